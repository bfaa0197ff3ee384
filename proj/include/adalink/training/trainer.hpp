#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adalink/model/backbone.hpp"
#include "adalink/peft/adapters.hpp"
#include "adalink/tasks/metrics.hpp"
#include "adalink/tasks/tasks.hpp"
#include "adalink/training/optimizer.hpp"

namespace adalink::training {

enum class OptimizerKind { kAdafactor, kSgd };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string &name);

struct TrainConfig {
    double peak_lr = 0.03;
    std::size_t warmup_steps = 100;
    std::size_t total_steps = 1000;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    // Replaces the model's dropout during the run; adapter overrides win.
    std::optional<double> dropout_rate;
    OptimizerKind optimizer = OptimizerKind::kAdafactor;
    // Loss is averaged and logged over windows of this many steps.
    std::size_t log_every = 10;
    // Score every task's val split with greedy decoding after training.
    bool evaluate_at_end = true;
    std::size_t eval_batch_size = 128;

    // 0.03 for adapter kinds, 1e-4 for full fine-tuning.
    static double default_peak_lr(peft::AdapterKind kind);

    void validate() const;
    std::map<std::string, std::string> to_map() const;
    static TrainConfig from_map(const std::map<std::string, std::string> &values);

    bool operator==(const TrainConfig &) const = default;
};

// peak_lr · min(step / warmup, sqrt(warmup / step)); step counts from 1.
double lr_at(std::size_t step, const TrainConfig &cfg);

// Mean token cross-entropy over non-pad targets.
tensor::Tensor batch_loss(const model::Backbone &backbone, const model::MultimodalBatch &batch,
                          const peft::AdapterSet *adapters, tensor::Mode mode, tensor::Rng *rng = nullptr);

// One task in a run. With `adapters` null the whole backbone is trained
// (pre-training); with a kFullFT set the backbone is trained except for
// parts the model config keeps frozen; otherwise only the adapter tensors.
struct TaskBinding {
    const tasks::Dataset *dataset = nullptr;
    peft::AdapterSet *adapters = nullptr;
};

struct LogEntry {
    std::size_t step = 0;  // last step of the window
    double lr = 0.0;
    double loss = 0.0;  // mean over the window
    std::map<std::string, std::size_t> task_counts;
};

struct TrainReport {
    std::vector<LogEntry> log;
    std::size_t steps = 0;
    double wall_seconds = 0.0;
    bool diverged = false;
    std::string abort_reason;
    std::map<std::string, tasks::Scores> final_metrics;
    std::map<std::string, std::string> constants;  // optimizer constants, for the record
    std::size_t trainable_params = 0;
};

// Round-robin over tasks, per-task seeded shuffling. Deterministic given the
// config. The backbone's trainability flags are left as the policy set them.
// Divergence (loss above 1e3 or not finite) stops the run and is reported.
TrainReport train(model::Backbone &backbone, std::span<const TaskBinding> tasks, const TrainConfig &cfg);

// Greedy-decodes a split and scores it against the gold answers.
tasks::Scores evaluate(const model::Backbone &backbone, const peft::AdapterSet *adapters,
                       const tasks::Dataset &dataset, const std::vector<tasks::Example> &split,
                       std::size_t batch_size = 128);

// One JSON object per log entry.
void write_log_jsonl(std::ostream &out, const TrainReport &report);
// step,lr,loss rows. Wall time is deliberately absent so reruns compare equal.
void write_loss_csv(std::ostream &out, const TrainReport &report);
// task_id,exact_match,token_accuracy,count rows.
void write_metrics_csv(std::ostream &out, const TrainReport &report);

}  // namespace adalink::training
