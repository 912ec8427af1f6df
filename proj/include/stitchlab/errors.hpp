// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace stitchlab {

struct InvalidInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ZeroNorm : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UnknownLayer : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Diverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonDivisibleShapes : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BottleneckNotSupported : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ZeroDenominator : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingStitchedActs : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SchemaViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace stitchlab
