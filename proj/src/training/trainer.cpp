#include "adalink/training/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "adalink/errors.hpp"

namespace adalink::training {

using peft::AdapterKind;
using tensor::Mode;
using tensor::Tensor;

namespace {

constexpr double kDivergenceLoss = 1e3;

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

const std::string &require(const std::map<std::string, std::string> &values, const std::string &key) {
    auto it = values.find(key);
    if (it == values.end()) throw ConfigError("train config is missing field '" + key + "'");
    return it->second;
}

std::size_t to_size(const std::string &key, const std::string &text) {
    try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(text, &pos);
        if (pos != text.size() || text.starts_with('-')) throw std::invalid_argument(text);
        return static_cast<std::size_t>(v);
    } catch (const std::exception &) {
        throw ConfigError("train config field '" + key + "' is not an unsigned integer: " + text);
    }
}

double to_double(const std::string &key, const std::string &text) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(text, &pos);
        if (pos != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception &) {
        throw ConfigError("train config field '" + key + "' is not a number: " + text);
    }
}

// Which tensors a binding trains, and the backbone policy that goes with it.
enum class Policy { kAdapters, kFullFinetune, kPretrain };

Policy policy_of(const TaskBinding &b) {
    if (!b.adapters) return Policy::kPretrain;
    return b.adapters->kind() == AdapterKind::kFullFT ? Policy::kFullFinetune : Policy::kAdapters;
}

std::vector<NamedTensor> trainable_of(const model::Backbone &backbone, const TaskBinding &b, const std::string &prefix) {
    std::vector<NamedTensor> out;
    if (policy_of(b) == Policy::kAdapters) {
        for (auto &nt : b.adapters->parameters()) out.push_back({prefix + nt.name, nt.tensor});
    } else {
        for (auto &nt : backbone.named_parameters()) {
            if (nt.tensor.requires_grad()) out.push_back({"backbone." + nt.name, nt.tensor});
        }
    }
    return out;
}

}  // namespace

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kAdafactor ? "adafactor" : "sgd"; }

OptimizerKind parse_optimizer(const std::string &name) {
    if (name == "adafactor") return OptimizerKind::kAdafactor;
    if (name == "sgd") return OptimizerKind::kSgd;
    throw ConfigError("unknown optimizer '" + name + "' (expected adafactor or sgd)");
}

double TrainConfig::default_peak_lr(AdapterKind kind) { return kind == AdapterKind::kFullFT ? 1e-4 : 0.03; }

void TrainConfig::validate() const {
    if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw ConfigError("train config: peak_lr must be > 0");
    if (warmup_steps < 1) throw ConfigError("train config: warmup_steps must be >= 1");
    if (warmup_steps > total_steps) {
        throw ConfigError("train config: warmup_steps (" + std::to_string(warmup_steps) + ") exceeds total_steps (" +
                          std::to_string(total_steps) + ")");
    }
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (log_every < 1) throw ConfigError("train config: log_every must be >= 1");
    if (eval_batch_size < 1) throw ConfigError("train config: eval_batch_size must be >= 1");
    if (dropout_rate && !(*dropout_rate >= 0.0 && *dropout_rate < 1.0)) {
        throw ConfigError("train config: dropout_rate must be in [0,1)");
    }
}

std::map<std::string, std::string> TrainConfig::to_map() const {
    std::map<std::string, std::string> m{
        {"peak_lr", format_double(peak_lr)},
        {"warmup_steps", std::to_string(warmup_steps)},
        {"total_steps", std::to_string(total_steps)},
        {"batch_size", std::to_string(batch_size)},
        {"seed", std::to_string(seed)},
        {"optimizer", to_string(optimizer)},
        {"log_every", std::to_string(log_every)},
        {"evaluate_at_end", evaluate_at_end ? "1" : "0"},
        {"eval_batch_size", std::to_string(eval_batch_size)},
    };
    if (dropout_rate) m["dropout_rate"] = format_double(*dropout_rate);
    return m;
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string> &values) {
    TrainConfig c;
    c.peak_lr = to_double("peak_lr", require(values, "peak_lr"));
    c.warmup_steps = to_size("warmup_steps", require(values, "warmup_steps"));
    c.total_steps = to_size("total_steps", require(values, "total_steps"));
    c.batch_size = to_size("batch_size", require(values, "batch_size"));
    c.seed = to_size("seed", require(values, "seed"));
    c.optimizer = parse_optimizer(require(values, "optimizer"));
    c.log_every = to_size("log_every", require(values, "log_every"));
    c.evaluate_at_end = to_size("evaluate_at_end", require(values, "evaluate_at_end")) != 0;
    c.eval_batch_size = to_size("eval_batch_size", require(values, "eval_batch_size"));
    if (auto it = values.find("dropout_rate"); it != values.end()) c.dropout_rate = to_double("dropout_rate", it->second);
    c.validate();
    return c;
}

double lr_at(std::size_t step, const TrainConfig &cfg) {
    if (step < 1) throw ContractError("lr_at: steps count from 1");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(cfg.warmup_steps);
    return cfg.peak_lr * std::min(s / w, std::sqrt(w / s));
}

Tensor batch_loss(const model::Backbone &backbone, const model::MultimodalBatch &batch, const peft::AdapterSet *adapters,
                  Mode mode, tensor::Rng *rng) {
    Tensor logits = backbone.forward(batch, adapters, mode, rng);
    return tensor::cross_entropy(logits, batch.target_tokens, model::kPad);
}

TrainReport train(model::Backbone &backbone, std::span<const TaskBinding> tasks, const TrainConfig &cfg) {
    cfg.validate();
    if (tasks.empty()) throw ContractError("train: no tasks");
    const Policy policy = policy_of(tasks[0]);
    for (const auto &t : tasks) {
        if (!t.dataset) throw ContractError("train: task binding without a dataset");
        if (t.dataset->train.empty()) throw ContractError("train: task '" + t.dataset->def.task_id + "' has no data");
        if (policy_of(t) != policy) throw ContractError("train: tasks in one run must share the adapter policy");
        if (t.adapters) t.adapters->validate(backbone.config());
    }

    switch (policy) {
        case Policy::kAdapters:
            backbone.freeze();
            for (const auto &t : tasks) t.adapters->set_trainable(true);
            break;
        case Policy::kFullFinetune:
            backbone.unfreeze_for_finetune();
            break;
        case Policy::kPretrain:
            backbone.unfreeze_all();
            break;
    }
    const double saved_dropout = backbone.config().dropout_rate;
    if (cfg.dropout_rate) backbone.set_dropout_rate(*cfg.dropout_rate);

    std::vector<std::vector<NamedTensor>> params;
    std::vector<tasks::BatchSampler> samplers;
    TrainReport report;
    // Optimizer state is keyed per adapter set, so tasks sharing one set
    // share its slots.
    std::vector<const peft::AdapterSet *> distinct;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        auto it = std::find(distinct.begin(), distinct.end(), tasks[i].adapters);
        const bool fresh = it == distinct.end();
        const std::size_t slot = fresh ? distinct.size() : static_cast<std::size_t>(it - distinct.begin());
        if (fresh) distinct.push_back(tasks[i].adapters);
        params.push_back(trainable_of(backbone, tasks[i], "adapters" + std::to_string(slot) + "."));
        samplers.emplace_back(tasks[i].dataset->train.size(), cfg.batch_size, cfg.seed * 1000003u + i + 1);
        if (fresh && (policy == Policy::kAdapters || i == 0)) {
            for (const auto &nt : params.back()) report.trainable_params += nt.tensor.size();
        }
    }
    if (cfg.optimizer == OptimizerKind::kAdafactor) {
        report.constants = AdafactorConfig{}.to_map();
    }
    report.constants["loss"] = "mean token cross-entropy over non-pad targets";
    report.constants["task_mixing"] = "round-robin";

    Adafactor adafactor;
    tensor::Rng dropout_rng(cfg.seed ^ 0x5eedULL);
    const auto started = std::chrono::steady_clock::now();

    LogEntry window;
    std::size_t in_window = 0;
    for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
        const std::size_t ti = (step - 1) % tasks.size();
        const TaskBinding &binding = tasks[ti];
        const auto &ds = *binding.dataset;
        const auto indices = samplers[ti].next();
        const auto batch = tasks::make_batch(ds, ds.train, indices, backbone.config());

        const double lr = lr_at(step, cfg);
        Tensor loss = batch_loss(backbone, batch, binding.adapters, Mode::kTrain, &dropout_rng);
        const double value = loss.item();
        if (!std::isfinite(value) || value > kDivergenceLoss) {
            report.diverged = true;
            report.abort_reason = "loss " + format_double(value) + " at step " + std::to_string(step) + " on task '" +
                                  ds.def.task_id + "'";
            for (auto &p : params[ti]) p.tensor.clear_grad();
            break;
        }
        loss.backward();
        if (cfg.optimizer == OptimizerKind::kAdafactor) {
            adafactor.step(params[ti], lr);
        } else {
            sgd_step(params[ti], lr);
        }
        for (auto &p : params[ti]) p.tensor.clear_grad();
        report.steps = step;

        window.loss += value;
        window.lr = lr;
        window.step = step;
        ++window.task_counts[ds.def.task_id];
        if (++in_window == cfg.log_every || step == cfg.total_steps) {
            window.loss /= static_cast<double>(in_window);
            report.log.push_back(std::move(window));
            window = {};
            in_window = 0;
        }
    }
    if (in_window) {
        window.loss /= static_cast<double>(in_window);
        report.log.push_back(std::move(window));
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (cfg.dropout_rate) backbone.set_dropout_rate(saved_dropout);

    if (cfg.evaluate_at_end && !report.diverged) {
        for (const auto &t : tasks) {
            if (t.dataset->val.empty()) continue;
            report.final_metrics[t.dataset->def.task_id] =
                evaluate(backbone, t.adapters, *t.dataset, t.dataset->val, cfg.eval_batch_size);
        }
    }
    return report;
}

tasks::Scores evaluate(const model::Backbone &backbone, const peft::AdapterSet *adapters, const tasks::Dataset &dataset,
                       const std::vector<tasks::Example> &split, std::size_t batch_size) {
    if (batch_size < 1) throw ContractError("evaluate: batch_size must be >= 1");
    std::vector<std::vector<int>> preds, golds;
    for (std::size_t start = 0; start < split.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, split.size() - start);
        std::span<const tasks::Example> chunk(split.data() + start, n);
        const auto batch = tasks::make_batch(dataset, chunk, backbone.config());
        auto decoded = backbone.greedy_decode(batch, adapters, backbone.config().max_target_len);
        for (std::size_t i = 0; i < n; ++i) {
            preds.push_back(std::move(decoded[i]));
            golds.push_back(chunk[i].answer);
        }
    }
    return tasks::score(preds, golds);
}

void write_log_jsonl(std::ostream &out, const TrainReport &report) {
    for (const auto &e : report.log) {
        nlohmann::ordered_json j;
        j["step"] = e.step;
        j["lr"] = e.lr;
        j["loss"] = e.loss;
        j["tasks"] = e.task_counts;
        out << j.dump() << '\n';
    }
}

void write_loss_csv(std::ostream &out, const TrainReport &report) {
    out << "step,lr,loss\n";
    for (const auto &e : report.log) out << e.step << ',' << format_double(e.lr) << ',' << format_double(e.loss) << '\n';
}

void write_metrics_csv(std::ostream &out, const TrainReport &report) {
    out << "task_id,exact_match,token_accuracy,count\n";
    for (const auto &[task, s] : report.final_metrics) {
        out << task << ',' << format_double(s.exact_match) << ',' << format_double(s.token_accuracy) << ',' << s.count
            << '\n';
    }
}

}  // namespace adalink::training
