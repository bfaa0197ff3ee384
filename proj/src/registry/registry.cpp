#include "adalink/registry/registry.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include "adalink/errors.hpp"
#include "adalink/registry/checkpoint.hpp"

namespace adalink::registry {

using peft::AdaLinkScope;
using peft::AdapterKind;
using peft::AdapterSet;
using tensor::Tensor;

namespace {

constexpr const char *kIndexFile = "index.tsv";
constexpr const char *kIndexHeader = "task_id\tfile\tspec_hash";

std::uint64_t bytes_of(const std::vector<tensor::NamedTensor> &tensors) {
    std::uint64_t n = 0;
    for (const auto &t : tensors) n += t.tensor.size() * sizeof(double);
    return n;
}

}  // namespace

std::string entry_filename(const std::string &task_id) {
    std::string out;
    for (unsigned char c : task_id) {
        if (std::isalnum(c) || c == '_' || c == '-') {
            out.push_back(static_cast<char>(c));
        } else {
            char buf[4];
            std::snprintf(buf, sizeof buf, "%%%02X", c);
            out += buf;
        }
    }
    return out + ".adlk";
}

void AdapterRegistry::add(const std::string &task_id, const AdapterSet &adapters,
                          const std::map<std::string, std::string> &metadata) {
    if (task_id.empty()) throw ConfigError("task id must not be empty");
    if (task_id.find_first_of("\t\n\r") != std::string::npos) {
        throw ConfigError("task id '" + task_id + "' contains a tab or newline");
    }
    try {
        adapters.validate(config_);
    } catch (const ConfigError &e) {
        throw DimensionError("adapter for task '" + task_id + "': " + e.what());
    }
    auto entry = std::make_shared<RegistryEntry>();
    entry->task_id = task_id;
    entry->adapters = adapters.clone();
    entry->adapters.set_trainable(false);
    entry->metadata = metadata;
    const auto &spec = adapters.spec();
    entry->metadata["kind"] = peft::to_string(spec.kind);
    entry->metadata["rank"] = std::to_string(spec.rank);
    entry->metadata["scope"] = peft::to_string(spec.scope);
    entry->metadata["spec_hash"] = spec.hash();
    entry->metadata["task_id"] = task_id;

    std::shared_ptr<const RegistryEntry> published = std::move(entry);
    std::unique_lock lock(mutex_);
    entries_[task_id] = std::move(published);
}

bool AdapterRegistry::remove(const std::string &task_id) {
    std::shared_ptr<const RegistryEntry> old;  // released outside the lock
    std::unique_lock lock(mutex_);
    auto it = entries_.find(task_id);
    if (it == entries_.end()) return false;
    old = std::move(it->second);
    entries_.erase(it);
    return true;
}

std::shared_ptr<const RegistryEntry> AdapterRegistry::find(const std::string &task_id) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(task_id);
    return it == entries_.end() ? nullptr : it->second;
}

std::shared_ptr<const RegistryEntry> AdapterRegistry::route(const model::MultimodalBatch &batch) const {
    if (auto entry = find(batch.task_id)) return entry;
    std::string known;
    for (const auto &id : task_ids()) known += (known.empty() ? "" : ", ") + id;
    throw RoutingError("no adapter registered for task '" + batch.task_id + "' (known tasks: " +
                       (known.empty() ? "none" : known) + ")");
}

std::vector<std::string> AdapterRegistry::task_ids() const {
    std::shared_lock lock(mutex_);
    std::vector<std::string> ids;
    for (const auto &[id, _] : entries_) ids.push_back(id);
    return ids;
}

std::size_t AdapterRegistry::size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
}

std::map<std::string, std::shared_ptr<const RegistryEntry>> AdapterRegistry::snapshot() const {
    std::shared_lock lock(mutex_);
    return entries_;
}

void AdapterRegistry::save(const std::filesystem::path &dir) const {
    std::filesystem::create_directories(dir);
    const auto entries = snapshot();
    std::ostringstream index;
    index << kIndexHeader << '\n';
    for (const auto &[id, entry] : entries) {
        const std::string file = entry_filename(id);
        adapter_checkpoint(entry->adapters, config_, entry->metadata).save(dir / file);
        index << id << '\t' << file << '\t' << entry->adapters.spec().hash() << '\n';
    }
    std::ofstream out(dir / kIndexFile, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + (dir / kIndexFile).string());
    out << index.str();
    out.close();
    // Drop checkpoints of entries removed since the last save.
    std::set<std::string> live;
    for (const auto &[id, _] : entries) live.insert(entry_filename(id));
    for (const auto &f : std::filesystem::directory_iterator(dir)) {
        const auto name = f.path().filename().string();
        if (f.path().extension() == ".adlk" && !live.count(name)) std::filesystem::remove(f.path());
    }
}

std::unique_ptr<AdapterRegistry> AdapterRegistry::load(const std::filesystem::path &dir,
                                                       const model::ModelConfig &config) {
    std::ifstream in(dir / kIndexFile);
    if (!in) throw CheckpointError("registry index " + (dir / kIndexFile).string() + " not found");
    auto reg = std::make_unique<AdapterRegistry>(config);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no == 1) {
            if (line != kIndexHeader) throw CheckpointError("registry index has an unexpected header");
            continue;
        }
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string id, file, hash;
        if (!std::getline(fields, id, '\t') || !std::getline(fields, file, '\t') || !std::getline(fields, hash)) {
            throw CheckpointError("registry index line " + std::to_string(line_no) + " is malformed");
        }
        auto loaded = adapter_from_checkpoint(Checkpoint::load(dir / file), config);
        if (loaded.adapters.spec().hash() != hash) {
            throw CheckpointError("registry index line " + std::to_string(line_no) + ": spec hash of '" + file +
                                  "' does not match the index");
        }
        reg->add(id, loaded.adapters, loaded.metadata);
    }
    return reg;
}

RegistryStats AdapterRegistry::stats() const {
    RegistryStats out;
    for (const auto &[id, entry] : snapshot()) {
        EntryStats s;
        s.task_id = id;
        s.kind = peft::to_string(entry->adapters.kind());
        const auto params = entry->adapters.parameters();
        for (const auto &p : params) s.trainable_params += p.tensor.size();
        s.tensor_bytes = bytes_of(params);
        if (entry->adapters.baked_text_table) s.baked_table_bytes = entry->adapters.baked_text_table->size() * 8;
        s.file_bytes = adapter_checkpoint(entry->adapters, config_, entry->metadata).serialize().size();
        out.total_file_bytes += s.file_bytes;
        out.total_baked_table_bytes += s.baked_table_bytes;
        out.entries.push_back(std::move(s));
    }
    return out;
}

std::vector<Tensor> serve(const model::Backbone &backbone, const AdapterRegistry &registry,
                          std::span<const model::MultimodalBatch> batches) {
    std::vector<Tensor> out;
    out.reserve(batches.size());
    for (const auto &batch : batches) {
        const auto entry = registry.route(batch);
        out.push_back(backbone.forward(batch, &entry->adapters, tensor::Mode::kEval));
    }
    return out;
}

Tensor bake_text_adalink(const model::Backbone &backbone, const peft::AdaLinkModule &module, AdaLinkScope scope) {
    if (scope != AdaLinkScope::kText) {
        throw ContractError("only a text AdaLink module can be baked into the vocabulary table (got scope '" +
                            peft::to_string(scope) + "')");
    }
    if (module.width() != backbone.config().d_emb) {
        throw DimensionError("AdaLink width " + std::to_string(module.width()) + " does not match d_emb " +
                             std::to_string(backbone.config().d_emb));
    }
    return peft::adalink_forward(backbone.token_embedding().detach(), module).detach();
}

AdapterSet bake(const model::Backbone &backbone, const AdapterSet &adapters) {
    if (adapters.kind() != AdapterKind::kAdaLink) {
        throw ContractError("baking needs an AdaLink adapter, got " + peft::to_string(adapters.kind()));
    }
    const AdaLinkScope scope = adapters.spec().scope;
    if (scope != AdaLinkScope::kText && scope != AdaLinkScope::kModality) {
        throw ContractError("baking needs a separate text module; scope '" + peft::to_string(scope) + "' has none");
    }
    if (!adapters.text) throw ContractError("adapter has no text module to bake");
    AdapterSet out = adapters.clone();
    out.baked_text_table = bake_text_adalink(backbone, *adapters.text, AdaLinkScope::kText);
    out.text.reset();
    return out;
}

}  // namespace adalink::registry
