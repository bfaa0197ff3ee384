#pragma once

#include <cstddef>
#include <map>
#include <string>

namespace adalink::model {

// Reserved token ids shared by every vocabulary.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;

struct ModelConfig {
    std::size_t d_emb = 64;
    std::size_t n_enc_layers = 2;
    std::size_t n_dec_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t vocab_size = 64;
    std::size_t patch_feature_dim = 9;
    std::size_t n_patches = 9;
    std::size_t max_text_len = 4;
    // Decoder positions, eos included.
    std::size_t max_target_len = 4;
    double dropout_rate = 0.1;
    // The patch projector stands in for a frozen vision tower; full
    // fine-tuning leaves it alone unless this is cleared.
    bool freeze_patch_projector = true;

    // Throws ConfigError naming the offending field.
    void validate() const;

    // Image slots followed by text slots.
    std::size_t encoder_len() const { return n_patches + max_text_len; }

    std::map<std::string, std::string> to_map() const;
    static ModelConfig from_map(const std::map<std::string, std::string> &values);

    bool operator==(const ModelConfig &) const = default;
};

}  // namespace adalink::model
