#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "adalink/model/backbone.hpp"
#include "adalink/peft/adapters.hpp"

namespace adalink::registry {

using tensor::NamedTensor;

// Binary layout, little-endian throughout:
//
//   "ADLKCKPT"                      8-byte magic
//   u32 version
//   u64 n_entries, then per entry:  u64 len, key bytes, u64 len, value bytes
//   u64 n_tensors, then per tensor: u64 len, name bytes, u8 dtype (1 = f64),
//                                   u64 rank, u64 dims[rank], f64 values
//   u32 CRC-32 of every preceding byte
//
// Entries and tensors are written in name order, so equal contents always
// serialize to equal bytes.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::map<std::string, std::string> config;
    std::vector<NamedTensor> tensors;

    std::string serialize() const;
    // Throws CheckpointError on bad magic, unknown version, truncation or a
    // checksum mismatch.
    static Checkpoint parse(const std::string &bytes);

    void save(const std::filesystem::path &path) const;
    static Checkpoint load(const std::filesystem::path &path);
};

Checkpoint backbone_checkpoint(const model::Backbone &backbone);
model::Backbone backbone_from_checkpoint(const Checkpoint &ckpt);

// Adapter tensors plus the spec, the model widths it was built for, and free
// metadata (stored under "meta.").
Checkpoint adapter_checkpoint(const peft::AdapterSet &adapters, const model::ModelConfig &config,
                              const std::map<std::string, std::string> &metadata = {});
struct LoadedAdapter {
    peft::AdapterSet adapters;
    std::map<std::string, std::string> metadata;
};
// Throws DimensionError, before any compute, when the adapter was built for
// different model widths than `config`.
LoadedAdapter adapter_from_checkpoint(const Checkpoint &ckpt, const model::ModelConfig &config);

}  // namespace adalink::registry
