#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "adalink/model/batch.hpp"
#include "adalink/model/config.hpp"
#include "adalink/peft/adapters.hpp"
#include "adalink/tensor/ops.hpp"

namespace adalink::model {

using tensor::Mode;
using tensor::NamedTensor;
using tensor::Rng;
using tensor::Tensor;

struct Linear {
    Tensor weight;  // d_in × d_out
    Tensor bias;    // d_out; undefined when the layer has none
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
};

struct AttentionParams {
    Linear q, k, v, o;
};

struct FeedForward {
    Linear in, out;
};

struct EncoderLayer {
    LayerNormParams ln_attn;
    AttentionParams attn;
    LayerNormParams ln_ff;
    FeedForward ff;
};

struct DecoderLayer {
    LayerNormParams ln_self;
    AttentionParams self_attn;
    LayerNormParams ln_cross;
    AttentionParams cross_attn;
    LayerNormParams ln_ff;
    FeedForward ff;
};

// Pre-encoder state for a batch. Rows are stacked per example as
// [prompt | image | text]; `embeddings` holds the adapted inputs before
// positional embeddings are added.
struct EncoderInput {
    Tensor embeddings;
    std::optional<Tensor> prompt;
    std::size_t batch = 0;
    std::size_t prompt_len = 0;
    std::size_t image_len = 0;
    std::size_t text_len = 0;
    std::vector<std::uint8_t> key_valid;  // over full encoder rows

    std::size_t length() const { return prompt_len + image_len + text_len; }
};

// Optional instrumentation filled by forward().
struct ForwardTrace {
    std::size_t encoder_len = 0;
    // One entry per attention call: B·H·Lq rows of Lk probabilities.
    std::vector<std::vector<double>> attention_probs;
    std::vector<std::size_t> attention_key_len;
};

// Small pre-LN encoder-decoder transformer. Text tokens and image patch
// features are embedded, optionally adapted, concatenated image-then-text
// (with prompt rows in front for prompt tuning) and encoded; the decoder
// predicts target tokens with an output projection tied to the token table.
class Backbone {
   public:
    static Backbone create(const ModelConfig &config, std::uint64_t seed);

    const ModelConfig &config() const { return config_; }
    // Training runs may override the configured rate.
    void set_dropout_rate(double rate);

    // No positions here: those are added inside the encoder.
    Tensor embed_text(std::span<const int> tokens, const Tensor *table = nullptr) const;
    Tensor embed_patches(const Tensor &patches) const;

    EncoderInput encoder_input(const MultimodalBatch &batch, const peft::AdapterSet *adapters, Mode mode,
                               Rng *rng) const;

    // Teacher-forced next-token logits, [B·target_len × vocab_size].
    Tensor forward(const MultimodalBatch &batch, const peft::AdapterSet *adapters, Mode mode, Rng *rng = nullptr,
                   ForwardTrace *trace = nullptr) const;

    // Greedy decoding from bos until eos or max_len tokens (clamped to the
    // decoder's positional capacity). The eos itself is not returned. Ties
    // go to the lowest token id.
    std::vector<std::vector<int>> greedy_decode(const MultimodalBatch &batch, const peft::AdapterSet *adapters,
                                                std::size_t max_len) const;

    std::vector<NamedTensor> named_parameters() const;
    Tensor parameter(const std::string &name) const;
    // Replaces parameter values from named tensors (checkpoint loading).
    void load_parameters(const std::vector<NamedTensor> &tensors);

    // Freeze policy.
    void freeze();
    void unfreeze_all();
    // Everything except parts the config keeps frozen (patch projector).
    void unfreeze_for_finetune();

    Backbone clone() const;
    // CRC-32 over every parameter's bytes, in name order.
    std::uint32_t checksum() const;
    // Full copy of every parameter value, in name order.
    std::vector<std::vector<double>> snapshot() const;

    Tensor &token_embedding() { return token_embedding_; }
    const Tensor &token_embedding() const { return token_embedding_; }

   private:
    struct EncoderOutput {
        Tensor states;
        std::size_t length = 0;
        std::vector<std::uint8_t> key_valid;
    };

    void check_batch(const MultimodalBatch &batch) const;
    EncoderOutput encode(const MultimodalBatch &batch, const peft::AdapterSet *adapters, Mode mode, Rng *rng,
                         ForwardTrace *trace) const;
    Tensor decode(const EncoderOutput &enc, std::span<const int> decoder_tokens, std::size_t batch,
                  std::size_t dec_len, Mode mode, double dropout, Rng *rng, ForwardTrace *trace) const;
    Tensor linear(const Tensor &x, const Linear &layer, const peft::AdapterSet *adapters, const std::string &name,
                  Mode mode, double dropout, Rng *rng) const;

    ModelConfig config_;
    Tensor token_embedding_;
    Linear patch_projector_;
    Tensor enc_pos_;
    Tensor dec_pos_;
    std::vector<EncoderLayer> encoder_;
    std::vector<DecoderLayer> decoder_;
    LayerNormParams enc_final_;
    LayerNormParams dec_final_;
};

}  // namespace adalink::model
