#include "adalink/model/config.hpp"

#include <charconv>
#include <sstream>

#include "adalink/errors.hpp"

namespace adalink::model {

namespace {

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::size_t parse_size(const std::map<std::string, std::string> &values, const std::string &key) {
    auto it = values.find(key);
    if (it == values.end()) throw ConfigError("model config is missing field '" + key + "'");
    std::size_t out = 0;
    auto [ptr, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), out);
    if (ec != std::errc() || ptr != it->second.data() + it->second.size()) {
        throw ConfigError("model config field '" + key + "' is not an unsigned integer: " + it->second);
    }
    return out;
}

}  // namespace

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char *name) {
        if (v < 1) throw ConfigError(std::string("model config: ") + name + " must be >= 1");
    };
    positive(d_emb, "d_emb");
    positive(n_enc_layers, "n_enc_layers");
    positive(n_dec_layers, "n_dec_layers");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(patch_feature_dim, "patch_feature_dim");
    positive(n_patches, "n_patches");
    positive(max_text_len, "max_text_len");
    positive(max_target_len, "max_target_len");
    if (d_emb % n_heads != 0) {
        throw ConfigError("model config: d_emb (" + std::to_string(d_emb) + ") must be divisible by n_heads (" +
                          std::to_string(n_heads) + ")");
    }
    if (vocab_size < 4) throw ConfigError("model config: vocab_size must be >= 4 (pad, bos, eos, unk)");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("model config: dropout_rate must be in [0,1)");
}

std::map<std::string, std::string> ModelConfig::to_map() const {
    return {
        {"d_emb", std::to_string(d_emb)},
        {"n_enc_layers", std::to_string(n_enc_layers)},
        {"n_dec_layers", std::to_string(n_dec_layers)},
        {"n_heads", std::to_string(n_heads)},
        {"d_ff", std::to_string(d_ff)},
        {"vocab_size", std::to_string(vocab_size)},
        {"patch_feature_dim", std::to_string(patch_feature_dim)},
        {"n_patches", std::to_string(n_patches)},
        {"max_text_len", std::to_string(max_text_len)},
        {"max_target_len", std::to_string(max_target_len)},
        {"dropout_rate", format_double(dropout_rate)},
        {"freeze_patch_projector", freeze_patch_projector ? "1" : "0"},
    };
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string> &values) {
    ModelConfig c;
    c.d_emb = parse_size(values, "d_emb");
    c.n_enc_layers = parse_size(values, "n_enc_layers");
    c.n_dec_layers = parse_size(values, "n_dec_layers");
    c.n_heads = parse_size(values, "n_heads");
    c.d_ff = parse_size(values, "d_ff");
    c.vocab_size = parse_size(values, "vocab_size");
    c.patch_feature_dim = parse_size(values, "patch_feature_dim");
    c.n_patches = parse_size(values, "n_patches");
    c.max_text_len = parse_size(values, "max_text_len");
    c.max_target_len = parse_size(values, "max_target_len");
    auto it = values.find("dropout_rate");
    if (it == values.end()) throw ConfigError("model config is missing field 'dropout_rate'");
    try {
        c.dropout_rate = std::stod(it->second);
    } catch (const std::exception &) {
        throw ConfigError("model config field 'dropout_rate' is not a number: " + it->second);
    }
    c.freeze_patch_projector = parse_size(values, "freeze_patch_projector") != 0;
    c.validate();
    return c;
}

}  // namespace adalink::model
