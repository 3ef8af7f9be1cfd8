// Single-file tensor container: 8-byte magic, u64 little-endian header
// length, JSON header, then the tensor payload as little-endian float32 in
// manifest order. The header carries arbitrary metadata plus a manifest of
// {name, shape, offset} entries; offsets are float indices into the payload.
// Used for encoder weights and learned-context checkpoints.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ctxopt/tensor.hpp"

namespace ctxopt {

struct TensorFile {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::uint64_t payload_checksum = 0; // fnv1a64 over the payload bytes

    const Tensor& find(const std::string& name) const;
    bool has(const std::string& name) const;
};

void save_tensor_file(const std::string& path, const nlohmann::json& meta,
                      const std::vector<std::pair<std::string, Tensor>>& tensors);

TensorFile load_tensor_file(const std::string& path);

} // namespace ctxopt
