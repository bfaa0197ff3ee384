#include "adalink/registry/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "adalink/errors.hpp"

namespace adalink::registry {

using tensor::Tensor;

namespace {

constexpr char kMagic[8] = {'A', 'D', 'L', 'K', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kDtypeF64 = 1;
// Model fields an adapter's shapes depend on.
constexpr const char *kWidthFields[] = {"d_emb", "d_ff", "n_enc_layers", "vocab_size"};

class Writer {
   public:
    void bytes(const void *p, std::size_t n) { out_.append(static_cast<const char *>(p), n); }
    void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string &s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    std::string &out() { return out_; }

   private:
    std::string out_;
};

class Reader {
   public:
    Reader(const std::string &data, std::size_t end) : data_(data), end_(end) {}

    void need(std::size_t n, const char *what) {
        if (n > end_ - pos_) {
            throw CheckpointError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                                  std::to_string(pos_));
        }
    }
    std::uint8_t u8(const char *what) {
        need(1, what);
        return static_cast<std::uint8_t>(data_[pos_++]);
    }
    std::uint32_t u32(const char *what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
        return v;
    }
    std::uint64_t u64(const char *what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
        return v;
    }
    double f64(const char *what) { return std::bit_cast<double>(u64(what)); }
    std::string str(const char *what) {
        const std::uint64_t n = u64(what);
        need(n, what);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }

   private:
    const std::string &data_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

std::uint32_t crc_of(const char *p, std::size_t n) {
    return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef *>(p), static_cast<uInt>(n)));
}

}  // namespace

std::string Checkpoint::serialize() const {
    Writer w;
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kVersion);
    w.u64(config.size());
    for (const auto &[k, v] : config) {
        w.str(k);
        w.str(v);
    }
    std::vector<const NamedTensor *> sorted;
    for (const auto &nt : tensors) sorted.push_back(&nt);
    std::sort(sorted.begin(), sorted.end(), [](const auto *a, const auto *b) { return a->name < b->name; });
    w.u64(sorted.size());
    for (const auto *nt : sorted) {
        w.str(nt->name);
        w.u8(kDtypeF64);
        w.u64(nt->tensor.rank());
        for (std::size_t d : nt->tensor.shape()) w.u64(d);
        for (double v : nt->tensor.data()) w.f64(v);
    }
    w.u32(crc_of(w.out().data(), w.out().size()));
    return std::move(w.out());
}

Checkpoint Checkpoint::parse(const std::string &bytes) {
    if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw CheckpointError("not a checkpoint (bad magic)");
    }
    if (bytes.size() < sizeof kMagic + 4 + 4) throw CheckpointError("checkpoint truncated in header");
    Reader header(bytes, bytes.size());
    for (std::size_t i = 0; i < sizeof kMagic; ++i) header.u8("magic");
    const std::uint32_t version = header.u32("version");
    if (version != kVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (this build reads " +
                              std::to_string(kVersion) + ")");
    }
    const std::size_t body = bytes.size() - 4;
    Reader trailer(bytes, bytes.size());
    for (std::size_t i = 0; i < body; ++i) trailer.u8("body");
    const std::uint32_t stored = trailer.u32("checksum");
    const std::uint32_t actual = crc_of(bytes.data(), body);

    // Parse the body first so that a cut-off file reports truncation rather
    // than a checksum mismatch.
    Checkpoint ckpt;
    Reader r(bytes, body);
    for (std::size_t i = 0; i < sizeof kMagic + 4; ++i) r.u8("header");
    try {
        const std::uint64_t n_config = r.u64("config count");
        for (std::uint64_t i = 0; i < n_config; ++i) {
            std::string k = r.str("config key");
            ckpt.config[k] = r.str("config value");
        }
        const std::uint64_t n_tensors = r.u64("tensor count");
        for (std::uint64_t i = 0; i < n_tensors; ++i) {
            std::string name = r.str("tensor name");
            if (r.u8("dtype") != kDtypeF64) throw CheckpointError("tensor '" + name + "' has an unknown dtype");
            const std::uint64_t rank = r.u64("rank");
            if (rank == 0 || rank > 8) throw CheckpointError("tensor '" + name + "' has invalid rank");
            tensor::Shape shape;
            std::uint64_t count = 1;
            for (std::uint64_t d = 0; d < rank; ++d) {
                shape.push_back(r.u64("dimension"));
                if (shape.back() == 0 || shape.back() > (std::uint64_t{1} << 40) / count) {
                    throw CheckpointError("tensor '" + name + "' has an invalid shape");
                }
                count *= shape.back();
            }
            r.need(count * 8, "tensor data");
            std::vector<double> values(count);
            for (auto &v : values) v = r.f64("tensor data");
            ckpt.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
        }
    } catch (const CheckpointError &) {
        if (stored != actual) throw CheckpointError("checkpoint checksum mismatch (file is corrupt or truncated)");
        throw;
    }
    if (r.pos() != body) throw CheckpointError("checkpoint has trailing bytes before the checksum");
    if (stored != actual) throw CheckpointError("checkpoint checksum mismatch (file is corrupt)");
    return ckpt;
}

void Checkpoint::save(const std::filesystem::path &path) const {
    const std::string bytes = serialize();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing '" + path.string() + "'");
}

Checkpoint Checkpoint::load(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return parse(bytes);
    } catch (const CheckpointError &e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

Checkpoint backbone_checkpoint(const model::Backbone &backbone) {
    Checkpoint c;
    c.config["type"] = "backbone";
    for (const auto &[k, v] : backbone.config().to_map()) c.config["model." + k] = v;
    c.tensors = backbone.named_parameters();
    return c;
}

model::Backbone backbone_from_checkpoint(const Checkpoint &ckpt) {
    auto type = ckpt.config.find("type");
    if (type == ckpt.config.end() || type->second != "backbone") throw CheckpointError("not a backbone checkpoint");
    std::map<std::string, std::string> model_map;
    for (const auto &[k, v] : ckpt.config) {
        if (k.starts_with("model.")) model_map[k.substr(6)] = v;
    }
    auto backbone = model::Backbone::create(model::ModelConfig::from_map(model_map), 0);
    backbone.load_parameters(ckpt.tensors);
    return backbone;
}

Checkpoint adapter_checkpoint(const peft::AdapterSet &adapters, const model::ModelConfig &config,
                              const std::map<std::string, std::string> &metadata) {
    Checkpoint c;
    c.config["type"] = "adapter";
    for (const auto &[k, v] : adapters.spec().to_map()) c.config["spec." + k] = v;
    const auto m = config.to_map();
    for (const char *f : kWidthFields) c.config[std::string("model.") + f] = m.at(f);
    for (const auto &[k, v] : metadata) c.config["meta." + k] = v;
    c.tensors = adapters.tensors();
    return c;
}

LoadedAdapter adapter_from_checkpoint(const Checkpoint &ckpt, const model::ModelConfig &config) {
    auto type = ckpt.config.find("type");
    if (type == ckpt.config.end() || type->second != "adapter") throw CheckpointError("not an adapter checkpoint");
    const auto m = config.to_map();
    for (const char *f : kWidthFields) {
        auto it = ckpt.config.find(std::string("model.") + f);
        if (it == ckpt.config.end()) throw CheckpointError(std::string("adapter checkpoint lacks model.") + f);
        if (it->second != m.at(f)) {
            throw DimensionError(std::string("adapter was built for ") + f + "=" + it->second + ", backbone has " + f +
                                 "=" + m.at(f));
        }
    }
    std::map<std::string, std::string> spec_map;
    LoadedAdapter out;
    for (const auto &[k, v] : ckpt.config) {
        if (k.starts_with("spec.")) spec_map[k.substr(5)] = v;
        if (k.starts_with("meta.")) out.metadata[k.substr(5)] = v;
    }
    out.adapters = peft::AdapterSet::from_tensors(peft::AdapterSpec::from_map(spec_map), ckpt.tensors);
    try {
        out.adapters.validate(config);
    } catch (const ConfigError &e) {
        throw DimensionError(e.what());
    }
    return out;
}

}  // namespace adalink::registry
