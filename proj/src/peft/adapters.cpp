#include "adalink/peft/adapters.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "adalink/errors.hpp"

namespace adalink::peft {

using tensor::Shape;

namespace {

Tensor truncated_normal(Shape shape, double stddev, Rng &rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> data(tensor::numel(shape));
    for (auto &v : data) {
        double z;
        do {
            z = dist(rng);
        } while (std::abs(z) > 2.0);
        v = z * stddev;
    }
    return Tensor(std::move(shape), std::move(data), true);
}

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

const std::string &require(const std::map<std::string, std::string> &values, const std::string &key) {
    auto it = values.find(key);
    if (it == values.end()) throw ConfigError("adapter spec is missing field '" + key + "'");
    return it->second;
}

std::size_t to_size(const std::string &key, const std::string &text) {
    try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(text, &pos);
        if (pos != text.size()) throw std::invalid_argument(text);
        return static_cast<std::size_t>(v);
    } catch (const std::exception &) {
        throw ConfigError("adapter spec field '" + key + "' is not an unsigned integer: " + text);
    }
}

double to_double(const std::string &key, const std::string &text) {
    try {
        return std::stod(text);
    } catch (const std::exception &) {
        throw ConfigError("adapter spec field '" + key + "' is not a number: " + text);
    }
}

void expect_shape(const Tensor &t, const Shape &want, const std::string &what) {
    if (t.shape() != want) {
        throw ConfigError(what + " has shape " + tensor::shape_str(t.shape()) + ", model expects " +
                          tensor::shape_str(want));
    }
}

}  // namespace

std::string to_string(AdapterKind kind) {
    switch (kind) {
        case AdapterKind::kAdaLink:
            return "adalink";
        case AdapterKind::kLoRA:
            return "lora";
        case AdapterKind::kPromptTuning:
            return "prompt";
        case AdapterKind::kFullFT:
            return "full";
    }
    return "?";
}

std::string to_string(AdaLinkScope scope) {
    switch (scope) {
        case AdaLinkScope::kModality:
            return "modality";
        case AdaLinkScope::kUnified:
            return "unified";
        case AdaLinkScope::kText:
            return "text";
        case AdaLinkScope::kImage:
            return "image";
    }
    return "?";
}

AdapterKind parse_adapter_kind(const std::string &name) {
    if (name == "adalink") return AdapterKind::kAdaLink;
    if (name == "lora") return AdapterKind::kLoRA;
    if (name == "prompt" || name == "prompt_tuning") return AdapterKind::kPromptTuning;
    if (name == "full" || name == "full_ft") return AdapterKind::kFullFT;
    throw ConfigError("unknown adapter kind '" + name + "' (expected adalink, lora, prompt, full)");
}

AdaLinkScope parse_adalink_scope(const std::string &name) {
    if (name == "modality") return AdaLinkScope::kModality;
    if (name == "unified") return AdaLinkScope::kUnified;
    if (name == "text") return AdaLinkScope::kText;
    if (name == "image") return AdaLinkScope::kImage;
    throw ConfigError("unknown AdaLink scope '" + name + "' (expected modality, unified, text, image)");
}

std::size_t AdapterSpec::reparam_width(std::size_t d_emb) const {
    return reparam_bottleneck ? reparam_bottleneck : std::max<std::size_t>(1, d_emb / 4);
}

std::map<std::string, std::string> AdapterSpec::to_map() const {
    std::map<std::string, std::string> m{
        {"kind", to_string(kind)},
        {"rank", std::to_string(rank)},
        {"scope", to_string(scope)},
        {"per_task", per_task ? "1" : "0"},
        {"use_nonlinearity", use_nonlinearity ? "1" : "0"},
        {"prompt_len", std::to_string(prompt_len)},
        {"reparam_layers", std::to_string(reparam_layers)},
        {"reparam_bottleneck", std::to_string(reparam_bottleneck)},
        {"lora_scale", format_double(lora_scale)},
    };
    if (dropout_rate) m["dropout_rate"] = format_double(*dropout_rate);
    return m;
}

AdapterSpec AdapterSpec::from_map(const std::map<std::string, std::string> &values) {
    AdapterSpec s;
    s.kind = parse_adapter_kind(require(values, "kind"));
    s.rank = to_size("rank", require(values, "rank"));
    s.scope = parse_adalink_scope(require(values, "scope"));
    s.per_task = to_size("per_task", require(values, "per_task")) != 0;
    s.use_nonlinearity = to_size("use_nonlinearity", require(values, "use_nonlinearity")) != 0;
    s.prompt_len = to_size("prompt_len", require(values, "prompt_len"));
    s.reparam_layers = to_size("reparam_layers", require(values, "reparam_layers"));
    s.reparam_bottleneck = to_size("reparam_bottleneck", require(values, "reparam_bottleneck"));
    s.lora_scale = to_double("lora_scale", require(values, "lora_scale"));
    if (auto it = values.find("dropout_rate"); it != values.end()) s.dropout_rate = to_double("dropout_rate", it->second);
    return s;
}

std::string AdapterSpec::hash() const {
    std::string text;
    for (const auto &[k, v] : to_map()) text += k + "=" + v + "\n";
    const auto crc = crc32(0L, reinterpret_cast<const Bytef *>(text.data()), static_cast<uInt>(text.size()));
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
    return buf;
}

AdaLinkModule AdaLinkModule::create(std::size_t d_emb, std::size_t rank, bool use_nonlinearity, Rng &rng) {
    if (rank < 1) throw ConfigError("AdaLink rank must be >= 1");
    AdaLinkModule m;
    m.down = truncated_normal({d_emb, rank}, 1.0 / std::sqrt(static_cast<double>(d_emb)), rng);
    m.up = Tensor::zeros({rank, d_emb}, true);
    m.use_nonlinearity = use_nonlinearity;
    return m;
}

AdaLinkModule AdaLinkModule::clone() const { return {down.clone(), up.clone(), use_nonlinearity}; }

Tensor adalink_forward(const Tensor &embeddings, const AdaLinkModule &module) {
    return adalink_forward(embeddings, module, Mode::kEval, 0.0, nullptr);
}

Tensor adalink_forward(const Tensor &embeddings, const AdaLinkModule &module, Mode mode, double dropout_rate,
                       Rng *rng) {
    if (embeddings.rank() != 2 || embeddings.dim(1) != module.width()) {
        throw DimensionError("AdaLink expects width " + std::to_string(module.width()) + ", got embeddings " +
                             tensor::shape_str(embeddings.shape()));
    }
    Tensor hidden = tensor::matmul(embeddings, module.down);
    if (module.use_nonlinearity) hidden = tensor::relu(hidden);
    Tensor branch = tensor::dropout(tensor::matmul(hidden, module.up), dropout_rate, mode, rng);
    return tensor::add(embeddings, branch);
}

LoRAModule LoRAModule::create(std::size_t d_in, std::size_t d_out, std::size_t rank, double scale, Rng &rng) {
    if (rank < 1) throw ConfigError("LoRA rank must be >= 1");
    LoRAModule m;
    m.a = truncated_normal({d_in, rank}, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
    m.b = Tensor::zeros({rank, d_out}, true);
    m.scale = scale;
    return m;
}

LoRAModule LoRAModule::clone() const { return {a.clone(), b.clone(), scale}; }

Tensor lora_linear(const Tensor &x, const Tensor &base_weight, const Tensor &base_bias, const LoRAModule &lora) {
    return lora_linear(x, base_weight, base_bias, lora, Mode::kEval, 0.0, nullptr);
}

Tensor lora_linear(const Tensor &x, const Tensor &base_weight, const Tensor &base_bias, const LoRAModule &lora,
                   Mode mode, double dropout_rate, Rng *rng) {
    if (lora.a.dim(0) != base_weight.dim(0) || lora.b.dim(1) != base_weight.dim(1) ||
        lora.a.dim(1) != lora.b.dim(0)) {
        throw DimensionError("LoRA factors " + tensor::shape_str(lora.a.shape()) + "·" +
                             tensor::shape_str(lora.b.shape()) + " do not match base weight " +
                             tensor::shape_str(base_weight.shape()));
    }
    Tensor base = tensor::matmul(x, base_weight.detach());
    if (base_bias.defined()) base = tensor::add_broadcast_rows(base, base_bias.detach());
    Tensor update = tensor::matmul(tensor::matmul(x, lora.a), lora.b);
    update = tensor::dropout(tensor::scale(update, lora.scale), dropout_rate, mode, rng);
    return tensor::add(base, update);
}

Tensor PromptTuningModule::effective_prompt() const {
    Tensor p = prompt;
    for (const auto &layer : reparam) {
        p = tensor::add(p, tensor::matmul(tensor::relu(tensor::matmul(p, layer.w1)), layer.w2));
    }
    return p;
}

PromptTuningModule PromptTuningModule::clone() const {
    PromptTuningModule out{prompt.clone(), {}};
    for (const auto &l : reparam) out.reparam.push_back({l.w1.clone(), l.w2.clone()});
    return out;
}

std::vector<std::string> lora_target_names(const model::ModelConfig &config) {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < config.n_enc_layers; ++l) {
        const std::string p = "enc." + std::to_string(l) + ".";
        for (const char *n : {"attn.q", "attn.k", "attn.v", "attn.o", "ff.in", "ff.out"}) names.push_back(p + n);
    }
    return names;
}

std::pair<std::size_t, std::size_t> lora_target_dims(const model::ModelConfig &config, const std::string &name) {
    if (name.ends_with("ff.in")) return {config.d_emb, config.d_ff};
    if (name.ends_with("ff.out")) return {config.d_ff, config.d_emb};
    return {config.d_emb, config.d_emb};
}

AdapterSet AdapterSet::create(const AdapterSpec &spec, const model::ModelConfig &config, Rng &rng,
                              const Tensor *token_table) {
    config.validate();
    AdapterSet set(spec);
    const std::size_t d = config.d_emb;
    switch (spec.kind) {
        case AdapterKind::kAdaLink:
            switch (spec.scope) {
                case AdaLinkScope::kModality:
                    set.image = AdaLinkModule::create(d, spec.rank, spec.use_nonlinearity, rng);
                    set.text = AdaLinkModule::create(d, spec.rank, spec.use_nonlinearity, rng);
                    break;
                case AdaLinkScope::kUnified:
                    set.unified = AdaLinkModule::create(d, spec.rank, spec.use_nonlinearity, rng);
                    break;
                case AdaLinkScope::kText:
                    set.text = AdaLinkModule::create(d, spec.rank, spec.use_nonlinearity, rng);
                    break;
                case AdaLinkScope::kImage:
                    set.image = AdaLinkModule::create(d, spec.rank, spec.use_nonlinearity, rng);
                    break;
            }
            break;
        case AdapterKind::kLoRA:
            for (const auto &name : lora_target_names(config)) {
                auto [din, dout] = lora_target_dims(config, name);
                set.lora.emplace(name, LoRAModule::create(din, dout, spec.rank, spec.lora_scale, rng));
            }
            break;
        case AdapterKind::kPromptTuning: {
            if (token_table == nullptr) throw ContractError("prompt tuning init needs the token embedding table");
            if (spec.prompt_len < 1) throw ConfigError("prompt_len must be >= 1");
            const std::size_t vocab = token_table->dim(0);
            std::uniform_int_distribution<std::size_t> pick(vocab > 4 ? 4 : 0, vocab - 1);
            std::vector<double> rows(spec.prompt_len * d);
            for (std::size_t i = 0; i < spec.prompt_len; ++i) {
                const std::size_t v = pick(rng);
                std::copy_n(token_table->data().begin() + static_cast<std::ptrdiff_t>(v * d), d, rows.begin() + i * d);
            }
            PromptTuningModule pt{Tensor({spec.prompt_len, d}, std::move(rows), true), {}};
            const std::size_t bottleneck = spec.reparam_width(d);
            for (std::size_t l = 0; l < spec.reparam_layers; ++l) {
                pt.reparam.push_back({truncated_normal({d, bottleneck}, 1.0 / std::sqrt(static_cast<double>(d)), rng),
                                      Tensor::zeros({bottleneck, d}, true)});
            }
            set.prompt = std::move(pt);
            break;
        }
        case AdapterKind::kFullFT:
            break;
    }
    return set;
}

std::vector<NamedTensor> AdapterSet::parameters() const {
    std::vector<NamedTensor> out;
    auto add_adalink = [&](const std::optional<AdaLinkModule> &m, const std::string &scope) {
        if (!m) return;
        out.push_back({"adalink." + scope + ".down", m->down});
        out.push_back({"adalink." + scope + ".up", m->up});
    };
    add_adalink(image, "image");
    add_adalink(text, "text");
    add_adalink(unified, "unified");
    for (const auto &[name, m] : lora) {
        out.push_back({"lora." + name + ".a", m.a});
        out.push_back({"lora." + name + ".b", m.b});
    }
    if (prompt) {
        out.push_back({"prompt.embeddings", prompt->prompt});
        for (std::size_t l = 0; l < prompt->reparam.size(); ++l) {
            out.push_back({"prompt.reparam." + std::to_string(l) + ".w1", prompt->reparam[l].w1});
            out.push_back({"prompt.reparam." + std::to_string(l) + ".w2", prompt->reparam[l].w2});
        }
    }
    std::sort(out.begin(), out.end(), [](const auto &a, const auto &b) { return a.name < b.name; });
    return out;
}

std::vector<NamedTensor> AdapterSet::tensors() const {
    auto out = parameters();
    if (baked_text_table) out.push_back({"baked.text_table", *baked_text_table});
    std::sort(out.begin(), out.end(), [](const auto &a, const auto &b) { return a.name < b.name; });
    return out;
}

AdapterSet AdapterSet::from_tensors(const AdapterSpec &spec, const std::vector<NamedTensor> &tensors) {
    AdapterSet set(spec);
    std::map<std::string, Tensor> by_name;
    for (const auto &nt : tensors) by_name.emplace(nt.name, nt.tensor);
    auto take = [&](const std::string &name) -> Tensor {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ConfigError("adapter checkpoint is missing tensor '" + name + "'");
        Tensor t = it->second;
        by_name.erase(it);
        return t;
    };
    auto adalink = [&](std::optional<AdaLinkModule> &slot, const std::string &scope) {
        if (by_name.count("adalink." + scope + ".down")) {
            slot = AdaLinkModule{take("adalink." + scope + ".down"), take("adalink." + scope + ".up"),
                                 spec.use_nonlinearity};
        }
    };
    adalink(set.image, "image");
    adalink(set.text, "text");
    adalink(set.unified, "unified");
    if (by_name.count("baked.text_table")) set.baked_text_table = take("baked.text_table");
    if (by_name.count("prompt.embeddings")) {
        PromptTuningModule pt{take("prompt.embeddings"), {}};
        for (std::size_t l = 0; by_name.count("prompt.reparam." + std::to_string(l) + ".w1"); ++l) {
            const std::string p = "prompt.reparam." + std::to_string(l);
            pt.reparam.push_back({take(p + ".w1"), take(p + ".w2")});
        }
        set.prompt = std::move(pt);
    }
    std::vector<std::string> lora_names;
    for (const auto &[name, t] : by_name) {
        if (name.starts_with("lora.") && name.ends_with(".a")) lora_names.push_back(name.substr(5, name.size() - 7));
    }
    for (const auto &n : lora_names) {
        set.lora.emplace(n, LoRAModule{take("lora." + n + ".a"), take("lora." + n + ".b"), spec.lora_scale});
    }
    if (!by_name.empty()) throw ConfigError("adapter checkpoint has unexpected tensor '" + by_name.begin()->first + "'");
    set.set_trainable(true);
    if (set.baked_text_table) set.baked_text_table->set_requires_grad(false);
    return set;
}

void AdapterSet::set_trainable(bool trainable) {
    for (auto &nt : parameters()) nt.tensor.set_requires_grad(trainable);
}

double AdapterSet::dropout_rate(const model::ModelConfig &config) const {
    return spec_.dropout_rate.value_or(config.dropout_rate);
}

void AdapterSet::validate(const model::ModelConfig &config) const {
    const std::size_t d = config.d_emb;
    auto check_adalink = [&](const std::optional<AdaLinkModule> &m, const std::string &scope) {
        if (!m) return;
        const std::size_t r = m->down.rank() == 2 ? m->down.dim(1) : 0;
        expect_shape(m->down, {d, r}, "AdaLink " + scope + " down-projection");
        expect_shape(m->up, {r, d}, "AdaLink " + scope + " up-projection");
    };
    check_adalink(image, "image");
    check_adalink(text, "text");
    check_adalink(unified, "unified");
    if (baked_text_table) expect_shape(*baked_text_table, {config.vocab_size, d}, "baked text table");
    for (const auto &[name, m] : lora) {
        const auto names = lora_target_names(config);
        if (std::find(names.begin(), names.end(), name) == names.end()) {
            throw ConfigError("LoRA target '" + name + "' does not exist in this model");
        }
        auto [din, dout] = lora_target_dims(config, name);
        const std::size_t r = m.a.rank() == 2 ? m.a.dim(1) : 0;
        expect_shape(m.a, {din, r}, "LoRA " + name + " A");
        expect_shape(m.b, {r, dout}, "LoRA " + name + " B");
    }
    if (prompt) {
        const std::size_t len = prompt->prompt.rank() == 2 ? prompt->prompt.dim(0) : 0;
        expect_shape(prompt->prompt, {len, d}, "prompt matrix");
        for (const auto &l : prompt->reparam) {
            const std::size_t b = l.w1.rank() == 2 ? l.w1.dim(1) : 0;
            expect_shape(l.w1, {d, b}, "prompt reparameterization w1");
            expect_shape(l.w2, {b, d}, "prompt reparameterization w2");
        }
    }
}

AdapterSet AdapterSet::clone() const {
    AdapterSet out(spec_);
    if (text) out.text = text->clone();
    if (image) out.image = image->clone();
    if (unified) out.unified = unified->clone();
    if (baked_text_table) out.baked_text_table = baked_text_table->clone();
    for (const auto &[name, m] : lora) out.lora.emplace(name, m.clone());
    if (prompt) out.prompt = prompt->clone();
    return out;
}

const LoRAModule *AdapterSet::find_lora(const std::string &name) const {
    auto it = lora.find(name);
    return it == lora.end() ? nullptr : &it->second;
}

AdaptedEmbeddings apply_multimodal_adalink(const std::optional<Tensor> &image, const std::optional<Tensor> &text,
                                           const AdapterSet &set, Mode mode, double dropout_rate, Rng *rng) {
    AdaptedEmbeddings out{image, text};
    const AdaLinkScope scope = set.spec().scope;
    const bool covers_image = scope != AdaLinkScope::kText;
    const bool covers_text = scope != AdaLinkScope::kImage;

    auto module_for = [&](bool is_image) -> const AdaLinkModule * {
        if (scope == AdaLinkScope::kUnified) return set.unified ? &*set.unified : nullptr;
        return is_image ? (set.image ? &*set.image : nullptr) : (set.text ? &*set.text : nullptr);
    };

    if (image && covers_image) {
        const AdaLinkModule *m = module_for(true);
        if (!m) throw ConfigError("AdaLink scope '" + to_string(scope) + "' covers images but no image module is set");
        out.image = adalink_forward(*image, *m, mode, dropout_rate, rng);
    }
    if (text && covers_text && !set.baked_text_table) {
        const AdaLinkModule *m = module_for(false);
        if (!m) throw ConfigError("AdaLink scope '" + to_string(scope) + "' covers text but no text module is set");
        out.text = adalink_forward(*text, *m, mode, dropout_rate, rng);
    }
    return out;
}

}  // namespace adalink::peft
