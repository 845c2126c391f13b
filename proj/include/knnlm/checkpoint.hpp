#pragma once

#include <string>
#include <utility>
#include <vector>

#include "knnlm/tensor.hpp"

namespace knnlm {

/// Named-tensor parameter checkpoint.
///
/// Layout (little-endian): magic "KNNP1", version u32 = 1, count u64, then
/// per tensor: name length u16, UTF-8 name, rank u8, dims u32 each, and
/// f32 data in row-major order.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

/// Lookup helper; throws IoError(bad_layout) when `name` is missing or the
/// stored shape disagrees with `expect_shape` (when non-empty).
const Tensor& checkpoint_tensor(const NamedTensors& tensors, const std::string& name,
                                const std::vector<size_t>& expect_shape = {});

}  // namespace knnlm
