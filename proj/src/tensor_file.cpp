#include "ctxopt/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "ctxopt/error.hpp"
#include "ctxopt/rng.hpp"

namespace ctxopt {

namespace {

constexpr char kMagic[8] = {'C', 'T', 'X', 'T', 'E', 'N', 'S', '0'};

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

void put_f32_le(std::string& out, float f) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

float get_f32_le(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(bits);
}

} // namespace

const Tensor& TensorFile::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw DataError("tensor '" + name + "' not present in file");
}

bool TensorFile::has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

void save_tensor_file(const std::string& path, const nlohmann::json& meta,
                      const std::vector<std::pair<std::string, Tensor>>& tensors) {
    nlohmann::json header;
    header["meta"] = meta;
    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["offset"] = offset;
        manifest.push_back(std::move(e));
        offset += t.numel();
    }
    header["manifest"] = std::move(manifest);
    const std::string header_str = header.dump();

    std::string out;
    out.reserve(16 + header_str.size() + offset * 4);
    out.append(kMagic, sizeof(kMagic));
    put_u64_le(out, header_str.size());
    out += header_str;
    for (const auto& [name, t] : tensors)
        for (float f : t.data()) put_f32_le(out, f);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("write failed: " + path);
}

TensorFile load_tensor_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open tensor file: " + path);
    std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (raw.size() < 16 || std::memcmp(raw.data(), kMagic, sizeof(kMagic)) != 0)
        throw DataError("not a tensor file (bad magic): " + path);
    const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
    const std::uint64_t header_len = get_u64_le(bytes + 8);
    if (16 + header_len > raw.size()) throw DataError("truncated tensor file header: " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(raw.substr(16, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed tensor file header: ") + e.what());
    }

    TensorFile tf;
    const std::size_t payload_start = 16 + static_cast<std::size_t>(header_len);
    const std::size_t payload_bytes = raw.size() - payload_start;
    try {
        tf.meta = header.at("meta");
        std::uint64_t expected_floats = 0;
        for (const auto& e : header.at("manifest")) {
            const std::string name = e.at("name").get<std::string>();
            const Shape shape = e.at("shape").get<Shape>();
            const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
            std::size_t n = 1;
            for (std::size_t d : shape) n *= d;
            if (offset != expected_floats)
                throw DataError("manifest offsets are not contiguous in: " + path);
            expected_floats += n;
            std::vector<float> data(n);
            const std::size_t byte_off = payload_start + offset * 4;
            if (byte_off + n * 4 > raw.size())
                throw DataError("truncated tensor payload in: " + path);
            for (std::size_t i = 0; i < n; ++i)
                data[i] = get_f32_le(bytes + byte_off + i * 4);
            tf.tensors.emplace_back(name, Tensor::from_data(shape, std::move(data)));
        }
        if (expected_floats * 4 != payload_bytes)
            throw DataError("tensor payload size mismatch in: " + path);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed tensor manifest: ") + e.what());
    }
    tf.payload_checksum = fnv1a64(raw.data() + payload_start, payload_bytes);
    return tf;
}

} // namespace ctxopt
