#include "adalink/model/backbone.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "adalink/errors.hpp"

namespace adalink::model {

using peft::AdapterKind;
using peft::AdapterSet;
using tensor::Shape;

namespace {

Tensor normal(Shape shape, double stddev, Rng &rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> data(tensor::numel(shape));
    for (auto &v : data) v = dist(rng);
    return Tensor(std::move(shape), std::move(data));
}

Linear make_linear(std::size_t in, std::size_t out, Rng &rng) {
    return {normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng), Tensor::zeros({out})};
}

LayerNormParams make_layer_norm(std::size_t d) {
    return {Tensor({d}, std::vector<double>(d, 1.0)), Tensor::zeros({d})};
}

// The key projection has no bias: a shared offset on every key shifts all
// scores of a query equally and cancels in the softmax.
AttentionParams make_attention(std::size_t d, Rng &rng) {
    AttentionParams a{make_linear(d, d, rng), make_linear(d, d, rng), make_linear(d, d, rng), make_linear(d, d, rng)};
    a.k.bias = Tensor();
    return a;
}

Tensor affine(const Tensor &x, const Linear &l) {
    Tensor y = tensor::matmul(x, l.weight);
    return l.bias.defined() ? tensor::add_broadcast_rows(y, l.bias) : y;
}

FeedForward make_ff(std::size_t d, std::size_t ff, Rng &rng) { return {make_linear(d, ff, rng), make_linear(ff, d, rng)}; }

void push_linear(std::vector<NamedTensor> &out, const std::string &p, const Linear &l) {
    out.push_back({p + ".weight", l.weight});
    if (l.bias.defined()) out.push_back({p + ".bias", l.bias});
}

void push_ln(std::vector<NamedTensor> &out, const std::string &p, const LayerNormParams &l) {
    out.push_back({p + ".gain", l.gain});
    out.push_back({p + ".bias", l.bias});
}

void push_attention(std::vector<NamedTensor> &out, const std::string &p, const AttentionParams &a) {
    push_linear(out, p + ".q", a.q);
    push_linear(out, p + ".k", a.k);
    push_linear(out, p + ".v", a.v);
    push_linear(out, p + ".o", a.o);
}

}  // namespace

Backbone Backbone::create(const ModelConfig &config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    Backbone b;
    b.config_ = config;
    const std::size_t d = config.d_emb;
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
    b.token_embedding_ = normal({config.vocab_size, d}, emb_std, rng);
    b.patch_projector_ = make_linear(config.patch_feature_dim, d, rng);
    b.enc_pos_ = normal({config.encoder_len(), d}, emb_std, rng);
    b.dec_pos_ = normal({config.max_target_len, d}, emb_std, rng);
    for (std::size_t l = 0; l < config.n_enc_layers; ++l) {
        b.encoder_.push_back({make_layer_norm(d), make_attention(d, rng), make_layer_norm(d), make_ff(d, config.d_ff, rng)});
    }
    for (std::size_t l = 0; l < config.n_dec_layers; ++l) {
        b.decoder_.push_back({make_layer_norm(d), make_attention(d, rng), make_layer_norm(d), make_attention(d, rng),
                              make_layer_norm(d), make_ff(d, config.d_ff, rng)});
    }
    b.enc_final_ = make_layer_norm(d);
    b.dec_final_ = make_layer_norm(d);
    return b;
}

void Backbone::set_dropout_rate(double rate) {
    ModelConfig c = config_;
    c.dropout_rate = rate;
    c.validate();
    config_ = c;
}

Tensor Backbone::embed_text(std::span<const int> tokens, const Tensor *table) const {
    return tensor::embedding(table ? *table : token_embedding_, tokens);
}

Tensor Backbone::embed_patches(const Tensor &patches) const {
    if (patches.rank() != 2 || patches.dim(1) != config_.patch_feature_dim || patches.dim(0) % config_.n_patches != 0) {
        throw DimensionError("patch features " + tensor::shape_str(patches.shape()) + " do not match " +
                             std::to_string(config_.n_patches) + " patches of dimension " +
                             std::to_string(config_.patch_feature_dim));
    }
    return affine(patches, patch_projector_);
}

void Backbone::check_batch(const MultimodalBatch &batch) const {
    if (batch.size == 0) throw DimensionError("empty batch");
    if (batch.text_len != config_.max_text_len || batch.text_tokens.size() != batch.size * batch.text_len) {
        throw DimensionError("batch text is " + std::to_string(batch.text_tokens.size()) + " tokens, expected " +
                             std::to_string(batch.size) + "x" + std::to_string(config_.max_text_len));
    }
    if (batch.target_len < 1 || batch.target_len > config_.max_target_len ||
        batch.target_tokens.size() != batch.size * batch.target_len) {
        throw DimensionError("batch targets do not fit max_target_len " + std::to_string(config_.max_target_len));
    }
    if (batch.patches && batch.patches->shape() != Shape{batch.size * config_.n_patches, config_.patch_feature_dim}) {
        throw DimensionError("batch patches " + tensor::shape_str(batch.patches->shape()) + " do not match config");
    }
}

EncoderInput Backbone::encoder_input(const MultimodalBatch &batch, const AdapterSet *adapters, Mode mode,
                                     Rng *rng) const {
    check_batch(batch);
    if (adapters) adapters->validate(config_);
    const double drop = adapters ? adapters->dropout_rate(config_) : config_.dropout_rate;
    const std::size_t B = batch.size, P = config_.n_patches, T = batch.text_len;

    std::optional<Tensor> image;
    if (batch.patches) image = embed_patches(*batch.patches);
    const Tensor *table = adapters && adapters->baked_text_table ? &*adapters->baked_text_table : nullptr;
    std::optional<Tensor> text = embed_text(batch.text_tokens, table);

    if (adapters && adapters->kind() == AdapterKind::kAdaLink) {
        auto adapted = peft::apply_multimodal_adalink(image, text, *adapters, mode, drop, rng);
        image = adapted.image;
        text = adapted.text;
    }

    EncoderInput in;
    in.batch = B;
    in.image_len = image ? P : 0;
    in.text_len = T;
    if (image) {
        std::vector<Tensor> parts;
        parts.reserve(2 * B);
        for (std::size_t b = 0; b < B; ++b) {
            parts.push_back(tensor::slice(*image, 0, b * P, (b + 1) * P));
            parts.push_back(tensor::slice(*text, 0, b * T, (b + 1) * T));
        }
        in.embeddings = tensor::concat(parts, 0);
    } else {
        in.embeddings = *text;
    }
    if (adapters && adapters->kind() == AdapterKind::kPromptTuning) {
        if (!adapters->prompt) throw ConfigError("prompt tuning adapter has no prompt");
        in.prompt = adapters->prompt->effective_prompt();
        in.prompt_len = adapters->prompt->length();
    }
    const std::size_t L = in.length();
    in.key_valid.assign(B * L, 1);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
            if (batch.text_tokens[b * T + t] == kPad) in.key_valid[b * L + in.prompt_len + in.image_len + t] = 0;
        }
    }
    return in;
}

Tensor Backbone::linear(const Tensor &x, const Linear &layer, const AdapterSet *adapters, const std::string &name,
                        Mode mode, double dropout, Rng *rng) const {
    if (adapters && adapters->kind() == AdapterKind::kLoRA) {
        if (const auto *lora = adapters->find_lora(name)) {
            return peft::lora_linear(x, layer.weight, layer.bias, *lora, mode, dropout, rng);
        }
    }
    return affine(x, layer);
}

Backbone::EncoderOutput Backbone::encode(const MultimodalBatch &batch, const AdapterSet *adapters, Mode mode, Rng *rng,
                                         ForwardTrace *trace) const {
    EncoderInput in = encoder_input(batch, adapters, mode, rng);
    const double drop = adapters ? adapters->dropout_rate(config_) : config_.dropout_rate;
    const std::size_t B = in.batch, L = in.length();

    // Image slots occupy positions [0, P), text [P, P+T) whether or not an
    // image is present. Prompt rows carry no position.
    const std::size_t first_pos = in.image_len ? 0 : config_.n_patches;
    Tensor pos = tensor::slice(enc_pos_, 0, first_pos, first_pos + in.image_len + in.text_len);
    Tensor x = tensor::add_broadcast_rows(in.embeddings, pos);
    if (in.prompt) {
        const std::size_t per = in.image_len + in.text_len;
        std::vector<Tensor> parts;
        parts.reserve(2 * B);
        for (std::size_t b = 0; b < B; ++b) {
            parts.push_back(*in.prompt);
            parts.push_back(tensor::slice(x, 0, b * per, (b + 1) * per));
        }
        x = tensor::concat(parts, 0);
    }
    x = tensor::dropout(x, drop, mode, rng);

    std::vector<double> probs;
    std::vector<double> *probe = trace ? &probs : nullptr;
    const tensor::AttentionShape shape{.batch = B, .query_len = L, .key_len = L, .n_heads = config_.n_heads, .causal = false};
    for (std::size_t l = 0; l < encoder_.size(); ++l) {
        const EncoderLayer &layer = encoder_[l];
        const std::string p = "enc." + std::to_string(l) + ".";
        Tensor h = tensor::layer_norm(x, layer.ln_attn.gain, layer.ln_attn.bias);
        Tensor q = linear(h, layer.attn.q, adapters, p + "attn.q", mode, drop, rng);
        Tensor k = linear(h, layer.attn.k, adapters, p + "attn.k", mode, drop, rng);
        Tensor v = linear(h, layer.attn.v, adapters, p + "attn.v", mode, drop, rng);
        Tensor a = tensor::attention(q, k, v, shape, in.key_valid, probe);
        if (trace) {
            trace->attention_probs.push_back(std::move(probs));
            trace->attention_key_len.push_back(L);
        }
        a = linear(a, layer.attn.o, adapters, p + "attn.o", mode, drop, rng);
        x = tensor::add(x, tensor::dropout(a, drop, mode, rng));

        h = tensor::layer_norm(x, layer.ln_ff.gain, layer.ln_ff.bias);
        h = tensor::relu(linear(h, layer.ff.in, adapters, p + "ff.in", mode, drop, rng));
        h = linear(h, layer.ff.out, adapters, p + "ff.out", mode, drop, rng);
        x = tensor::add(x, tensor::dropout(h, drop, mode, rng));
    }
    if (trace) trace->encoder_len = L;
    return {tensor::layer_norm(x, enc_final_.gain, enc_final_.bias), L, std::move(in.key_valid)};
}

Tensor Backbone::decode(const EncoderOutput &enc, std::span<const int> decoder_tokens, std::size_t batch,
                        std::size_t dec_len, Mode mode, double drop, Rng *rng, ForwardTrace *trace) const {
    const std::size_t B = batch;
    Tensor y = embed_text(decoder_tokens);
    y = tensor::add_broadcast_rows(y, tensor::slice(dec_pos_, 0, 0, dec_len));
    y = tensor::dropout(y, drop, mode, rng);

    std::vector<double> probs;
    std::vector<double> *probe = trace ? &probs : nullptr;
    const tensor::AttentionShape self_shape{
        .batch = B, .query_len = dec_len, .key_len = dec_len, .n_heads = config_.n_heads, .causal = true};
    const tensor::AttentionShape cross_shape{
        .batch = B, .query_len = dec_len, .key_len = enc.length, .n_heads = config_.n_heads, .causal = false};
    auto plain = [](const Tensor &x, const Linear &l) { return affine(x, l); };
    auto record = [&](std::size_t key_len) {
        if (!trace) return;
        trace->attention_probs.push_back(std::move(probs));
        trace->attention_key_len.push_back(key_len);
    };
    for (const DecoderLayer &layer : decoder_) {
        Tensor h = tensor::layer_norm(y, layer.ln_self.gain, layer.ln_self.bias);
        Tensor a = tensor::attention(plain(h, layer.self_attn.q), plain(h, layer.self_attn.k), plain(h, layer.self_attn.v),
                                     self_shape, {}, probe);
        record(dec_len);
        y = tensor::add(y, tensor::dropout(plain(a, layer.self_attn.o), drop, mode, rng));

        h = tensor::layer_norm(y, layer.ln_cross.gain, layer.ln_cross.bias);
        a = tensor::attention(plain(h, layer.cross_attn.q), plain(enc.states, layer.cross_attn.k),
                              plain(enc.states, layer.cross_attn.v), cross_shape, enc.key_valid, probe);
        record(enc.length);
        y = tensor::add(y, tensor::dropout(plain(a, layer.cross_attn.o), drop, mode, rng));

        h = tensor::layer_norm(y, layer.ln_ff.gain, layer.ln_ff.bias);
        h = plain(tensor::relu(plain(h, layer.ff.in)), layer.ff.out);
        y = tensor::add(y, tensor::dropout(h, drop, mode, rng));
    }
    y = tensor::layer_norm(y, dec_final_.gain, dec_final_.bias);
    const double out_scale = 1.0 / std::sqrt(static_cast<double>(config_.d_emb));
    return tensor::scale(tensor::matmul(y, tensor::transpose(token_embedding_)), out_scale);
}

Tensor Backbone::forward(const MultimodalBatch &batch, const AdapterSet *adapters, Mode mode, Rng *rng,
                         ForwardTrace *trace) const {
    if (mode == Mode::kTrain && rng == nullptr) throw ContractError("train-mode forward needs a random generator");
    EncoderOutput enc = encode(batch, adapters, mode, rng, trace);
    const double drop = adapters ? adapters->dropout_rate(config_) : config_.dropout_rate;
    const std::size_t B = batch.size, T = batch.target_len;
    // Teacher forcing: decoder sees [bos, y0, ..., y_{T-2}].
    std::vector<int> dec_in(B * T, kPad);
    for (std::size_t b = 0; b < B; ++b) {
        dec_in[b * T] = kBos;
        for (std::size_t t = 1; t < T; ++t) dec_in[b * T + t] = batch.target_tokens[b * T + t - 1];
    }
    return decode(enc, dec_in, B, T, mode, drop, rng, trace);
}

std::vector<std::vector<int>> Backbone::greedy_decode(const MultimodalBatch &batch, const AdapterSet *adapters,
                                                      std::size_t max_len) const {
    if (max_len < 1) throw ContractError("greedy_decode needs max_len >= 1");
    max_len = std::min(max_len, config_.max_target_len);
    EncoderOutput enc = encode(batch, adapters, Mode::kEval, nullptr, nullptr);
    const std::size_t B = batch.size, V = config_.vocab_size;
    std::vector<std::vector<int>> out(B);
    std::vector<bool> done(B, false);
    std::vector<std::vector<int>> prefix(B, std::vector<int>{kBos});
    for (std::size_t step = 0; step < max_len; ++step) {
        const std::size_t len = step + 1;
        std::vector<int> tokens;
        tokens.reserve(B * len);
        for (const auto &p : prefix) tokens.insert(tokens.end(), p.begin(), p.end());
        Tensor logits = decode(enc, tokens, B, len, Mode::kEval, 0.0, nullptr, nullptr);
        bool all_done = true;
        for (std::size_t b = 0; b < B; ++b) {
            const double *row = logits.data().data() + (b * len + step) * V;
            int best = 0;
            for (std::size_t v = 1; v < V; ++v) {
                if (row[v] > row[best]) best = static_cast<int>(v);
            }
            if (!done[b]) {
                if (best == kEos) {
                    done[b] = true;
                } else {
                    out[b].push_back(best);
                }
            }
            prefix[b].push_back(best);
            all_done = all_done && done[b];
        }
        if (all_done) break;
    }
    return out;
}

std::vector<NamedTensor> Backbone::named_parameters() const {
    std::vector<NamedTensor> out;
    out.push_back({"token_embedding", token_embedding_});
    push_linear(out, "patch_projector", patch_projector_);
    out.push_back({"enc.pos", enc_pos_});
    out.push_back({"dec.pos", dec_pos_});
    for (std::size_t l = 0; l < encoder_.size(); ++l) {
        const std::string p = "enc." + std::to_string(l);
        push_ln(out, p + ".ln_attn", encoder_[l].ln_attn);
        push_attention(out, p + ".attn", encoder_[l].attn);
        push_ln(out, p + ".ln_ff", encoder_[l].ln_ff);
        push_linear(out, p + ".ff.in", encoder_[l].ff.in);
        push_linear(out, p + ".ff.out", encoder_[l].ff.out);
    }
    push_ln(out, "enc.final", enc_final_);
    for (std::size_t l = 0; l < decoder_.size(); ++l) {
        const std::string p = "dec." + std::to_string(l);
        push_ln(out, p + ".ln_self", decoder_[l].ln_self);
        push_attention(out, p + ".self_attn", decoder_[l].self_attn);
        push_ln(out, p + ".ln_cross", decoder_[l].ln_cross);
        push_attention(out, p + ".cross_attn", decoder_[l].cross_attn);
        push_ln(out, p + ".ln_ff", decoder_[l].ln_ff);
        push_linear(out, p + ".ff.in", decoder_[l].ff.in);
        push_linear(out, p + ".ff.out", decoder_[l].ff.out);
    }
    push_ln(out, "dec.final", dec_final_);
    std::sort(out.begin(), out.end(), [](const auto &a, const auto &b) { return a.name < b.name; });
    return out;
}

Tensor Backbone::parameter(const std::string &name) const {
    for (auto &nt : named_parameters()) {
        if (nt.name == name) return nt.tensor;
    }
    throw ContractError("backbone has no parameter '" + name + "'");
}

void Backbone::load_parameters(const std::vector<NamedTensor> &tensors) {
    std::map<std::string, Tensor> by_name;
    for (const auto &nt : tensors) by_name.emplace(nt.name, nt.tensor);
    auto params = named_parameters();
    if (by_name.size() != params.size()) {
        throw CheckpointError("backbone checkpoint has " + std::to_string(by_name.size()) + " tensors, model has " +
                              std::to_string(params.size()));
    }
    for (auto &nt : params) {
        auto it = by_name.find(nt.name);
        if (it == by_name.end()) throw CheckpointError("backbone checkpoint is missing '" + nt.name + "'");
        if (it->second.shape() != nt.tensor.shape()) {
            throw DimensionError("checkpoint tensor '" + nt.name + "' has shape " +
                                 tensor::shape_str(it->second.shape()) + ", model expects " +
                                 tensor::shape_str(nt.tensor.shape()));
        }
        std::copy(it->second.data().begin(), it->second.data().end(), nt.tensor.mutable_data().begin());
    }
}

void Backbone::freeze() {
    for (auto &nt : named_parameters()) nt.tensor.set_requires_grad(false);
}

void Backbone::unfreeze_all() {
    for (auto &nt : named_parameters()) nt.tensor.set_requires_grad(true);
}

void Backbone::unfreeze_for_finetune() {
    for (auto &nt : named_parameters()) {
        const bool frozen = config_.freeze_patch_projector && nt.name.starts_with("patch_projector.");
        nt.tensor.set_requires_grad(!frozen);
    }
}

Backbone Backbone::clone() const {
    Backbone b = *this;
    auto params = b.named_parameters();
    // Rebind every handle to an independent copy.
    std::map<std::string, Tensor> copies;
    for (const auto &nt : params) copies.emplace(nt.name, nt.tensor.clone());
    auto rebind = [&](Tensor &t, const std::string &name) { t = copies.at(name); };
    auto rebind_linear = [&](Linear &l, const std::string &p) {
        rebind(l.weight, p + ".weight");
        if (l.bias.defined()) rebind(l.bias, p + ".bias");
    };
    auto rebind_ln = [&](LayerNormParams &l, const std::string &p) {
        rebind(l.gain, p + ".gain");
        rebind(l.bias, p + ".bias");
    };
    auto rebind_attn = [&](AttentionParams &a, const std::string &p) {
        rebind_linear(a.q, p + ".q");
        rebind_linear(a.k, p + ".k");
        rebind_linear(a.v, p + ".v");
        rebind_linear(a.o, p + ".o");
    };
    rebind(b.token_embedding_, "token_embedding");
    rebind_linear(b.patch_projector_, "patch_projector");
    rebind(b.enc_pos_, "enc.pos");
    rebind(b.dec_pos_, "dec.pos");
    for (std::size_t l = 0; l < b.encoder_.size(); ++l) {
        const std::string p = "enc." + std::to_string(l);
        rebind_ln(b.encoder_[l].ln_attn, p + ".ln_attn");
        rebind_attn(b.encoder_[l].attn, p + ".attn");
        rebind_ln(b.encoder_[l].ln_ff, p + ".ln_ff");
        rebind_linear(b.encoder_[l].ff.in, p + ".ff.in");
        rebind_linear(b.encoder_[l].ff.out, p + ".ff.out");
    }
    rebind_ln(b.enc_final_, "enc.final");
    for (std::size_t l = 0; l < b.decoder_.size(); ++l) {
        const std::string p = "dec." + std::to_string(l);
        rebind_ln(b.decoder_[l].ln_self, p + ".ln_self");
        rebind_attn(b.decoder_[l].self_attn, p + ".self_attn");
        rebind_ln(b.decoder_[l].ln_cross, p + ".ln_cross");
        rebind_attn(b.decoder_[l].cross_attn, p + ".cross_attn");
        rebind_ln(b.decoder_[l].ln_ff, p + ".ln_ff");
        rebind_linear(b.decoder_[l].ff.in, p + ".ff.in");
        rebind_linear(b.decoder_[l].ff.out, p + ".ff.out");
    }
    rebind_ln(b.dec_final_, "dec.final");
    return b;
}

std::uint32_t Backbone::checksum() const {
    uLong crc = crc32(0L, Z_NULL, 0);
    for (const auto &nt : named_parameters()) {
        crc = crc32(crc, reinterpret_cast<const Bytef *>(nt.name.data()), static_cast<uInt>(nt.name.size()));
        auto d = nt.tensor.data();
        crc = crc32(crc, reinterpret_cast<const Bytef *>(d.data()), static_cast<uInt>(d.size_bytes()));
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<std::vector<double>> Backbone::snapshot() const {
    std::vector<std::vector<double>> out;
    for (const auto &nt : named_parameters()) out.emplace_back(nt.tensor.data().begin(), nt.tensor.data().end());
    return out;
}

}  // namespace adalink::model
