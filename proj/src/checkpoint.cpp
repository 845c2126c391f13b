#include "knnlm/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "knnlm/errors.hpp"

namespace knnlm {

namespace {
constexpr char kMagic[5] = {'K', 'N', 'N', 'P', '1'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError(IoCode::truncated, "checkpoint truncated: " + path);
    return v;
}
}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoCode::open_failed, "cannot write checkpoint: " + path);
    out.write(kMagic, sizeof(kMagic));
    put(out, kVersion);
    put(out, static_cast<uint64_t>(tensors.size()));
    std::vector<float> f32;
    for (const auto& [name, t] : tensors) {
        put(out, static_cast<uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put(out, static_cast<uint8_t>(t.shape.size()));
        for (size_t d : t.shape) put(out, static_cast<uint32_t>(d));
        f32.resize(t.numel());
        for (size_t i = 0; i < t.numel(); ++i) f32[i] = static_cast<float>(t.data[i]);
        out.write(reinterpret_cast<const char*>(f32.data()),
                  static_cast<std::streamsize>(f32.size() * sizeof(float)));
    }
    if (!out) throw IoError(IoCode::write_failed, "checkpoint write failed: " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoCode::open_failed, "cannot read checkpoint: " + path);
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IoError(IoCode::bad_magic, "not a parameter checkpoint: " + path);
    }
    const auto version = get<uint32_t>(in, path);
    if (version != kVersion) {
        throw IoError(IoCode::bad_version, "unsupported checkpoint version: " + path);
    }
    const auto count = get<uint64_t>(in, path);
    NamedTensors tensors;
    tensors.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        const auto name_len = get<uint16_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto rank = get<uint8_t>(in, path);
        std::vector<size_t> shape(rank);
        for (auto& d : shape) d = get<uint32_t>(in, path);
        Tensor t(shape);
        std::vector<float> f32(t.numel());
        in.read(reinterpret_cast<char*>(f32.data()),
                static_cast<std::streamsize>(f32.size() * sizeof(float)));
        if (!in) throw IoError(IoCode::truncated, "checkpoint truncated: " + path);
        for (size_t j = 0; j < f32.size(); ++j) t.data[j] = static_cast<double>(f32[j]);
        tensors.emplace_back(std::move(name), std::move(t));
    }
    return tensors;
}

const Tensor& checkpoint_tensor(const NamedTensors& tensors, const std::string& name,
                                const std::vector<size_t>& expect_shape) {
    for (const auto& [n, t] : tensors) {
        if (n != name) continue;
        if (!expect_shape.empty() && t.shape != expect_shape) {
            throw IoError(IoCode::bad_layout, "checkpoint tensor shape mismatch: " + name);
        }
        return t;
    }
    throw IoError(IoCode::bad_layout, "checkpoint tensor missing: " + name);
}

}  // namespace knnlm
