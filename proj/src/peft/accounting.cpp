#include "adalink/peft/accounting.hpp"

#include <algorithm>

namespace adalink::peft {

namespace {

std::uint64_t linear_params(std::uint64_t in, std::uint64_t out) { return in * out + out; }

}  // namespace

std::uint64_t count_backbone_params(const model::ModelConfig &c) {
    const std::uint64_t d = c.d_emb, ff = c.d_ff;
    const std::uint64_t layer_norm = 2 * d;
    const std::uint64_t attn = 4 * linear_params(d, d) - d;  // no key bias
    const std::uint64_t mlp = linear_params(d, ff) + linear_params(ff, d);
    std::uint64_t n = 0;
    n += static_cast<std::uint64_t>(c.vocab_size) * d;
    n += linear_params(c.patch_feature_dim, d);
    n += static_cast<std::uint64_t>(c.encoder_len()) * d;
    n += static_cast<std::uint64_t>(c.max_target_len) * d;
    n += c.n_enc_layers * (2 * layer_norm + attn + mlp) + layer_norm;
    n += c.n_dec_layers * (3 * layer_norm + 2 * attn + mlp) + layer_norm;
    return n;
}

std::uint64_t count_full_finetune_params(const model::ModelConfig &c) {
    const std::uint64_t n = count_backbone_params(c);
    return c.freeze_patch_projector ? n - linear_params(c.patch_feature_dim, c.d_emb) : n;
}

ParamCount count_trainable_params(const AdapterSpec &spec, const model::ModelConfig &config, std::size_t n_tasks,
                                  std::size_t n_modalities) {
    const std::uint64_t d = config.d_emb;
    const std::uint64_t r = spec.rank;
    ParamCount count;
    switch (spec.kind) {
        case AdapterKind::kAdaLink: {
            const std::uint64_t scopes = spec.scope == AdaLinkScope::kModality ? n_modalities : 1;
            count.core = scopes * 2 * d * r;
            break;
        }
        case AdapterKind::kLoRA:
            for (const auto &name : lora_target_names(config)) {
                auto [din, dout] = lora_target_dims(config, name);
                count.core += r * (din + dout);
            }
            break;
        case AdapterKind::kPromptTuning:
            count.core = static_cast<std::uint64_t>(spec.prompt_len) * d;
            count.reparam = static_cast<std::uint64_t>(spec.reparam_layers) * 2 * d * spec.reparam_width(config.d_emb);
            break;
        case AdapterKind::kFullFT:
            count.core = count_full_finetune_params(config);
            break;
    }
    if (spec.per_task) {
        count.core *= n_tasks;
        count.reparam *= n_tasks;
    }
    return count;
}

std::uint64_t encoder_length_macs(std::size_t seq_len, const model::ModelConfig &c) {
    const std::uint64_t L = seq_len, d = c.d_emb, ff = c.d_ff, T = c.max_target_len;
    // Per encoder layer: Q,K,V,O projections, scores and weighted values, MLP.
    const std::uint64_t enc_layer = 4 * L * d * d + 2 * L * L * d + 2 * L * d * ff;
    // Per decoder layer: cross-attention K,V projections of the encoder
    // output, then scores and weighted values for T queries.
    const std::uint64_t cross_layer = 2 * L * d * d + 2 * T * L * d;
    return c.n_enc_layers * enc_layer + c.n_dec_layers * cross_layer;
}

std::uint64_t flops_added(const AdapterSpec &spec, std::size_t seq_len, const model::ModelConfig &config) {
    const std::uint64_t d = config.d_emb, r = spec.rank;
    switch (spec.kind) {
        case AdapterKind::kAdaLink: {
            std::uint64_t covered = seq_len;
            if (spec.scope == AdaLinkScope::kText) covered = std::min(seq_len, config.max_text_len);
            if (spec.scope == AdaLinkScope::kImage) covered = std::min(seq_len, config.n_patches);
            return covered * 2 * d * r;
        }
        case AdapterKind::kLoRA: {
            std::uint64_t macs = 0;
            for (const auto &name : lora_target_names(config)) {
                auto [din, dout] = lora_target_dims(config, name);
                macs += r * (din + dout) * seq_len;
            }
            return macs;
        }
        case AdapterKind::kPromptTuning:
            return encoder_length_macs(seq_len + spec.prompt_len, config) - encoder_length_macs(seq_len, config);
        case AdapterKind::kFullFT:
            return 0;
    }
    return 0;
}

}  // namespace adalink::peft
