#pragma once

#include <cstdint>

#include "adalink/model/config.hpp"
#include "adalink/peft/adapters.hpp"

namespace adalink::peft {

struct ParamCount {
    std::uint64_t core = 0;
    // Prompt re-parameterization weights, reported apart from the prompt.
    std::uint64_t reparam = 0;

    std::uint64_t total() const { return core + reparam; }
};

// Every parameter of the backbone, frozen or not.
std::uint64_t count_backbone_params(const model::ModelConfig &config);
// Parameters full fine-tuning updates under the config's freeze policy.
std::uint64_t count_full_finetune_params(const model::ModelConfig &config);

// Exact trainable parameter count.
//   AdaLink:  scopes · 2 · d_emb · r, scopes = n_modalities (modality
//             scope) or 1 (unified / single modality)
//   LoRA:     Σ over adapted encoder linears of r · (d_in + d_out)
//   Prompt:   prompt_len · d_emb, plus reparam layers · 2 · d_emb · bottleneck
//   FullFT:   count_full_finetune_params
// Per-task specs multiply by n_tasks.
ParamCount count_trainable_params(const AdapterSpec &spec, const model::ModelConfig &config, std::size_t n_tasks = 1,
                                  std::size_t n_modalities = 2);

// Multiply-accumulates the adapter adds to one forward pass over an encoder
// input of `seq_len` positions ([image ∥ text]).
std::uint64_t flops_added(const AdapterSpec &spec, std::size_t seq_len, const model::ModelConfig &config);

// Encoder plus decoder cross-attention MACs that scale with the encoder
// sequence length. Used for the prompt-tuning overhead.
std::uint64_t encoder_length_macs(std::size_t seq_len, const model::ModelConfig &config);

}  // namespace adalink::peft
