#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adalink/model/config.hpp"
#include "adalink/peft/adapters.hpp"
#include "adalink/tasks/tasks.hpp"
#include "adalink/training/trainer.hpp"

namespace adalink::cli {

struct PretrainConfig {
    training::TrainConfig train;
    // Empty: the backbone is used as initialised.
    std::vector<tasks::TaskDef> tasks;
};

struct BackboneSource {
    std::uint64_t seed = 0;
    // Load this backbone checkpoint instead of building one.
    std::string checkpoint;
    PretrainConfig pretrain;
};

struct AblationConfig {
    std::vector<std::size_t> ranks{4, 16, 64};
    std::vector<std::size_t> layers{2, 4, 8};
};

// Everything one run needs, read from a single YAML file. Fields left out
// keep their defaults; the resolved form records every value.
struct ExperimentConfig {
    std::string name = "experiment";
    std::string output_root = "runs";
    model::ModelConfig model;
    peft::AdapterSpec adapter;
    training::TrainConfig train;
    BackboneSource backbone;
    std::vector<tasks::TaskDef> tasks;
    AblationConfig ablation;

    // output_root / name, where ADALINK_OUTPUT_ROOT replaces output_root.
    std::filesystem::path output_dir() const;
    std::string to_yaml() const;
};

ExperimentConfig default_experiment();

// `overrides` are "dotted.path=value" strings applied on top of the file,
// e.g. "adapter.rank=16" or "tasks.0.n_train=64". Errors are ConfigError
// messages of the form "<source>:<line>:<col>: field 'a.b': ...".
ExperimentConfig parse_experiment(const std::string &yaml, const std::string &source_name,
                                  std::span<const std::string> overrides = {});
ExperimentConfig load_experiment(const std::optional<std::filesystem::path> &file,
                                 std::span<const std::string> overrides = {});

}  // namespace adalink::cli
