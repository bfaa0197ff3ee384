#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "adalink/model/backbone.hpp"
#include "adalink/model/batch.hpp"
#include "adalink/peft/adapters.hpp"

namespace adalink::registry {

struct RegistryEntry {
    std::string task_id;
    peft::AdapterSet adapters;
    // rank, scope, kind, spec_hash plus whatever the caller supplied
    // (train_config_hash, creation_step, ...).
    std::map<std::string, std::string> metadata;
};

struct EntryStats {
    std::string task_id;
    std::string kind;
    std::uint64_t trainable_params = 0;
    std::uint64_t tensor_bytes = 0;      // trainable tensors only
    std::uint64_t baked_table_bytes = 0;  // serving copy of the vocabulary table
    std::uint64_t file_bytes = 0;        // serialized checkpoint
};

struct RegistryStats {
    std::vector<EntryStats> entries;
    std::uint64_t total_file_bytes = 0;
    std::uint64_t total_baked_table_bytes = 0;
};

// Task id -> adapter set. Entries are immutable once published: add()
// stores a private deep copy and replacement swaps the pointer, so a reader
// holding an entry keeps a consistent adapter while a writer replaces it.
// Readers take a shared lock only long enough to copy the pointer.
class AdapterRegistry {
   public:
    explicit AdapterRegistry(model::ModelConfig config) : config_(std::move(config)) {}

    AdapterRegistry(const AdapterRegistry &) = delete;
    AdapterRegistry &operator=(const AdapterRegistry &) = delete;

    const model::ModelConfig &config() const { return config_; }

    // Registers or replaces. Throws ConfigError for an empty task id and
    // DimensionError if the adapter does not fit the model.
    void add(const std::string &task_id, const peft::AdapterSet &adapters,
             const std::map<std::string, std::string> &metadata = {});
    bool remove(const std::string &task_id);

    std::shared_ptr<const RegistryEntry> find(const std::string &task_id) const;
    // Throws RoutingError naming the known tasks when the batch's task is
    // not registered.
    std::shared_ptr<const RegistryEntry> route(const model::MultimodalBatch &batch) const;

    std::vector<std::string> task_ids() const;
    std::size_t size() const;

    // Directory layout: index.tsv (task_id, file, spec_hash per line, sorted
    // by task id) and one checkpoint file per task.
    void save(const std::filesystem::path &dir) const;
    static std::unique_ptr<AdapterRegistry> load(const std::filesystem::path &dir, const model::ModelConfig &config);

    RegistryStats stats() const;

   private:
    std::map<std::string, std::shared_ptr<const RegistryEntry>> snapshot() const;

    model::ModelConfig config_;
    mutable std::shared_mutex mutex_;
    std::map<std::string, std::shared_ptr<const RegistryEntry>> entries_;
};

// Eval-mode logits for each batch, each routed to its own task's adapter.
// Batches are single-task; a mixed stream is served one batch at a time.
std::vector<tensor::Tensor> serve(const model::Backbone &backbone, const AdapterRegistry &registry,
                                  std::span<const model::MultimodalBatch> batches);

// table' with row v = adalink_forward(row v). Exact for any module because
// the map acts on each row independently. `scope` names the modality the
// module was trained for; anything but text is a ContractError since image
// features are not looked up from a table.
tensor::Tensor bake_text_adalink(const model::Backbone &backbone, const peft::AdaLinkModule &module,
                                 peft::AdaLinkScope scope);

// Copy of an AdaLink set with its text module folded into a baked table.
// Requires a separate text module (text or modality scope).
peft::AdapterSet bake(const model::Backbone &backbone, const peft::AdapterSet &adapters);

// File name used for a task's checkpoint inside a registry directory.
std::string entry_filename(const std::string &task_id);

}  // namespace adalink::registry
