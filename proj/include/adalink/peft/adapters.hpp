#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "adalink/model/config.hpp"
#include "adalink/tensor/ops.hpp"
#include "adalink/tensor/tensor.hpp"

namespace adalink::peft {

using tensor::Mode;
using tensor::NamedTensor;
using tensor::Rng;
using tensor::Tensor;

enum class AdapterKind { kAdaLink, kLoRA, kPromptTuning, kFullFT };

// Which input embeddings an AdaLink configuration transforms.
//   kModality: one module per modality (image, text)
//   kUnified:  one shared module for both
//   kText / kImage: a single modality; the other passes through untouched
enum class AdaLinkScope { kModality, kUnified, kText, kImage };

std::string to_string(AdapterKind kind);
std::string to_string(AdaLinkScope scope);
AdapterKind parse_adapter_kind(const std::string &name);
AdaLinkScope parse_adalink_scope(const std::string &name);

struct AdapterSpec {
    AdapterKind kind = AdapterKind::kAdaLink;
    std::size_t rank = 8;
    AdaLinkScope scope = AdaLinkScope::kModality;
    // One adapter per task (true) or one shared by all tasks.
    bool per_task = true;
    // f = ReLU when set; identity otherwise.
    bool use_nonlinearity = false;
    std::size_t prompt_len = 64;
    std::size_t reparam_layers = 2;
    // 0 selects d_emb / 4.
    std::size_t reparam_bottleneck = 0;
    double lora_scale = 1.0;
    // Overrides the model dropout while this adapter is active.
    std::optional<double> dropout_rate;

    std::size_t reparam_width(std::size_t d_emb) const;
    std::map<std::string, std::string> to_map() const;
    static AdapterSpec from_map(const std::map<std::string, std::string> &values);
    // Stable hash of to_map(), hex encoded.
    std::string hash() const;

    bool operator==(const AdapterSpec &) const = default;
};

// Residual low-rank map on embeddings: E + f(E·down)·up. No biases.
struct AdaLinkModule {
    Tensor down;  // d_emb × r
    Tensor up;    // r × d_emb, zero at init
    bool use_nonlinearity = false;

    std::size_t rank() const { return down.dim(1); }
    std::size_t width() const { return down.dim(0); }

    // down ~ truncated normal (std 1/sqrt(d_emb), cut at 2σ); up = 0.
    static AdaLinkModule create(std::size_t d_emb, std::size_t rank, bool use_nonlinearity, Rng &rng);
    AdaLinkModule clone() const;
};

Tensor adalink_forward(const Tensor &embeddings, const AdaLinkModule &module);
// Train-mode variant: dropout is applied to the residual branch.
Tensor adalink_forward(const Tensor &embeddings, const AdaLinkModule &module, Mode mode, double dropout_rate,
                       Rng *rng);

// LoRA factors for one linear layer: y = x·W + b + scale·(x·A)·B.
struct LoRAModule {
    Tensor a;  // d_in × r
    Tensor b;  // r × d_out, zero at init
    double scale = 1.0;

    static LoRAModule create(std::size_t d_in, std::size_t d_out, std::size_t rank, double scale, Rng &rng);
    LoRAModule clone() const;
};

// Base weights never receive gradient through this path.
Tensor lora_linear(const Tensor &x, const Tensor &base_weight, const Tensor &base_bias, const LoRAModule &lora);
Tensor lora_linear(const Tensor &x, const Tensor &base_weight, const Tensor &base_bias, const LoRAModule &lora,
                   Mode mode, double dropout_rate, Rng *rng);

// Bottleneck residual layer applied to the prompt matrix: p + g(p·w1)·w2.
struct ReparamLayer {
    Tensor w1;  // d_emb × bottleneck
    Tensor w2;  // bottleneck × d_emb, zero at init
};

struct PromptTuningModule {
    Tensor prompt;  // prompt_len × d_emb
    std::vector<ReparamLayer> reparam;

    // The matrix actually prepended to the encoder input.
    Tensor effective_prompt() const;
    std::size_t length() const { return prompt.dim(0); }
    PromptTuningModule clone() const;
};

// Names of the encoder linear layers LoRA attaches to.
std::vector<std::string> lora_target_names(const model::ModelConfig &config);
std::pair<std::size_t, std::size_t> lora_target_dims(const model::ModelConfig &config, const std::string &name);

// The adapter state for one task (or one shared run). Exactly one kind is
// active. kFullFT carries no tensors: the backbone itself is trained.
class AdapterSet {
   public:
    AdapterSet() = default;

    // `token_table` seeds prompt rows; required for kPromptTuning.
    static AdapterSet create(const AdapterSpec &spec, const model::ModelConfig &config, Rng &rng,
                             const Tensor *token_table = nullptr);

    const AdapterSpec &spec() const { return spec_; }
    AdapterKind kind() const { return spec_.kind; }

    std::optional<AdaLinkModule> text;
    std::optional<AdaLinkModule> image;
    std::optional<AdaLinkModule> unified;
    // Vocabulary table with the text AdaLink folded in. Serving only.
    std::optional<Tensor> baked_text_table;
    std::map<std::string, LoRAModule> lora;
    std::optional<PromptTuningModule> prompt;

    // Trainable tensors with stable names, sorted.
    std::vector<NamedTensor> parameters() const;
    // Every tensor including serving-only ones (baked table), sorted.
    std::vector<NamedTensor> tensors() const;
    // Rebuilds from tensors(); used by checkpoint loading.
    static AdapterSet from_tensors(const AdapterSpec &spec, const std::vector<NamedTensor> &tensors);

    void set_trainable(bool trainable);
    double dropout_rate(const model::ModelConfig &config) const;

    // Throws ConfigError if any tensor disagrees with the model widths.
    void validate(const model::ModelConfig &config) const;
    AdapterSet clone() const;

    const LoRAModule *find_lora(const std::string &name) const;

   private:
    explicit AdapterSet(AdapterSpec spec) : spec_(std::move(spec)) {}
    AdapterSpec spec_;
};

struct AdaptedEmbeddings {
    std::optional<Tensor> image;
    std::optional<Tensor> text;
};

// Applies the AdaLink modules of `set` to whichever modalities are present.
// In kUnified scope one module serves both; in kModality each modality has
// its own. A present modality covered by the scope without a module (or
// baked table for text) is a ConfigError.
AdaptedEmbeddings apply_multimodal_adalink(const std::optional<Tensor> &image, const std::optional<Tensor> &text,
                                           const AdapterSet &set, Mode mode = Mode::kEval, double dropout_rate = 0.0,
                                           Rng *rng = nullptr);

}  // namespace adalink::peft
