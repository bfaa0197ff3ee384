#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "adalink/tensor/tensor.hpp"

namespace adalink::model {

// A batch of examples from a single task. Rows of every per-example block
// are stacked: patches are [B·n_patches × patch_feature_dim], token arrays
// are B·len row-major.
struct MultimodalBatch {
    std::string task_id;
    std::size_t size = 0;
    std::size_t text_len = 0;
    std::size_t target_len = 0;
    std::optional<tensor::Tensor> patches;
    std::vector<int> text_tokens;
    std::vector<int> target_tokens;

    bool has_image() const { return patches.has_value(); }
    // Index of the first text row in each example's [image ∥ text] block.
    std::size_t modality_boundary(std::size_t n_patches) const { return has_image() ? n_patches : 0; }
};

}  // namespace adalink::model
