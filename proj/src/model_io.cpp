// SPDX-License-Identifier: Apache-2.0
#include <array>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "stitchlab/nnet.hpp"

namespace stitchlab::nn {

namespace {

// CRC-64/XZ (reflected ECMA-182 polynomial).
constexpr std::uint64_t kCrcPoly = 0xC96C5795D7870F42ULL;

const std::array<std::uint64_t, 256>& crc_table() {
    static const std::array<std::uint64_t, 256> table = [] {
        std::array<std::uint64_t, 256> t{};
        for (std::uint64_t i = 0; i < 256; ++i) {
            std::uint64_t crc = i;
            for (int b = 0; b < 8; ++b)
                crc = (crc & 1) ? (crc >> 1) ^ kCrcPoly : crc >> 1;
            t[i] = crc;
        }
        return t;
    }();
    return table;
}

template <typename T>
void write_le(std::ostream& out, T v) {
    // Little-endian host assumed; asserted once at file open.
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError("unexpected end of file");
    return v;
}

void check_endianness() {
    const std::uint16_t probe = 0x0102;
    if (reinterpret_cast<const unsigned char*>(&probe)[0] != 0x02)
        throw IoError("big-endian hosts are not supported by the binary formats");
}

}  // namespace

std::uint64_t crc64(const void* data, std::size_t len) {
    const auto& table = crc_table();
    std::uint64_t crc = ~0ULL;
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xFF] ^ (crc >> 8);
    return ~crc;
}

void save_model(const Model& model, const std::string& path) {
    check_endianness();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write("MDL1", 4);
    write_le<std::uint16_t>(out, 1);
    nlohmann::json header;
    header["spec"] = model.spec.to_json();
    header["seed"] = model.seed;
    header["train_meta"] = {{"epochs", model.train_meta.epochs},
                            {"optimizer", model.train_meta.optimizer},
                            {"initial_train_loss", model.train_meta.initial_train_loss},
                            {"final_train_loss", model.train_meta.final_train_loss},
                            {"train_accuracy", model.train_meta.train_accuracy},
                            {"test_accuracy", model.train_meta.test_accuracy}};
    const std::string js = header.dump();
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(js.size()));
    out.write(js.data(), static_cast<std::streamsize>(js.size()));
    for (const auto& blob : model.weights)
        out.write(reinterpret_cast<const char*>(blob.data()),
                  static_cast<std::streamsize>(blob.size() * sizeof(float)));
    if (!out) throw IoError("write failed: " + path);
}

Model load_model(const std::string& path) {
    check_endianness();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MDL1", 4) != 0) throw IoError("not a model file: " + path);
    const auto version = read_le<std::uint16_t>(in);
    if (version != 1) throw IoError("unsupported model version");
    const auto js_len = read_le<std::uint32_t>(in);
    std::string js(js_len, '\0');
    in.read(js.data(), js_len);
    if (!in) throw IoError("truncated model header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaViolation(std::string("model header: ") + e.what());
    }
    Model model;
    model.spec = NetworkSpec::from_json(header.at("spec"));
    model.seed = header.value("seed", 0ULL);
    if (header.contains("train_meta")) {
        const auto& tm = header["train_meta"];
        model.train_meta.epochs = tm.value("epochs", 0);
        model.train_meta.optimizer = tm.value("optimizer", "");
        model.train_meta.initial_train_loss = tm.value("initial_train_loss", 0.0);
        model.train_meta.final_train_loss = tm.value("final_train_loss", 0.0);
        model.train_meta.train_accuracy = tm.value("train_accuracy", 0.0);
        model.train_meta.test_accuracy = tm.value("test_accuracy", 0.0);
    }
    const auto counts = model.spec.param_counts();
    model.weights.resize(counts.size());
    for (std::size_t k = 0; k < counts.size(); ++k) {
        model.weights[k].resize(counts[k]);
        in.read(reinterpret_cast<char*>(model.weights[k].data()),
                static_cast<std::streamsize>(counts[k] * sizeof(float)));
        if (!in) throw IoError("truncated weight blob");
    }
    return model;
}

void save_activations(const ActivationTensor& acts, const std::string& path) {
    check_endianness();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write("ACT1", 4);
    write_le<std::uint8_t>(out, 4);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(acts.t.n));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(acts.t.w));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(acts.t.h));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(acts.t.c));
    const auto* payload = reinterpret_cast<const char*>(acts.t.data.data());
    const std::size_t bytes = acts.t.data.size() * sizeof(float);
    out.write(payload, static_cast<std::streamsize>(bytes));
    write_le<std::uint64_t>(out, crc64(payload, bytes));
    if (!out) throw IoError("write failed: " + path);
}

ActivationTensor load_activations(const std::string& path) {
    check_endianness();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "ACT1", 4) != 0)
        throw IoError("not an activation file: " + path);
    const auto rank = read_le<std::uint8_t>(in);
    if (rank != 4) throw IoError("unsupported activation rank");
    const auto n = read_le<std::uint32_t>(in);
    const auto w = read_le<std::uint32_t>(in);
    const auto h = read_le<std::uint32_t>(in);
    const auto c = read_le<std::uint32_t>(in);
    ActivationTensor acts;
    acts.t = Tensor4(static_cast<int>(n), static_cast<int>(w), static_cast<int>(h),
                     static_cast<int>(c));
    const std::size_t bytes = acts.t.data.size() * sizeof(float);
    in.read(reinterpret_cast<char*>(acts.t.data.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw IoError("truncated activation payload");
    const auto stored = read_le<std::uint64_t>(in);
    if (stored != crc64(acts.t.data.data(), bytes))
        throw IoError("activation payload CRC mismatch");
    return acts;
}

}  // namespace stitchlab::nn
