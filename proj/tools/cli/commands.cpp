#include "commands.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "adalink/errors.hpp"
#include "adalink/peft/accounting.hpp"
#include "adalink/registry/checkpoint.hpp"
#include "adalink/registry/registry.hpp"
#include "adalink/tasks/dataset_io.hpp"

namespace adalink::cli {

namespace fs = std::filesystem;
using Map = std::map<std::string, std::string>;
using model::Backbone;
using peft::AdaLinkScope;
using peft::AdapterKind;
using peft::AdapterSet;
using peft::AdapterSpec;
using registry::AdapterRegistry;
using registry::Checkpoint;
using tasks::Dataset;

namespace {

std::string crc_hex(const std::string &text) {
    const auto crc = crc32(0L, reinterpret_cast<const Bytef *>(text.data()), static_cast<uInt>(text.size()));
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
    return buf;
}

std::string map_text(const Map &m) {
    std::string text;
    for (const auto &[k, v] : m) text += k + "=" + v + "\n";
    return text;
}

std::string points(double a) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * a);
    return buf;
}

fs::path prepare(const ExperimentConfig &cfg, const std::string &command) {
    const fs::path out = cfg.output_dir();
    fs::create_directories(out);
    write_text(out / "resolved" / (command + ".yaml"), "# adalink " + command + ", all fields resolved\n" + cfg.to_yaml());
    return out;
}

void emit(std::ostream &os, const fs::path &out, const std::string &stem, const std::string &title, const Table &t) {
    os << title << '\n' << t.text() << '\n';
    t.write_csv(out / (stem + ".csv"));
    write_text(out / (stem + ".txt"), title + '\n' + t.text());
}

std::vector<Dataset> generate_all(const std::vector<tasks::TaskDef> &defs, const model::ModelConfig &config) {
    std::vector<Dataset> out;
    out.reserve(defs.size());
    for (const auto &d : defs) out.push_back(tasks::generate(d, config));
    return out;
}

void require_tasks(const ExperimentConfig &cfg, const char *command) {
    if (cfg.tasks.empty()) throw ConfigError(std::string(command) + ": the config lists no tasks");
}

std::string backbone_provenance(const ExperimentConfig &cfg) {
    std::string text = map_text(cfg.model.to_map());
    text += "seed=" + std::to_string(cfg.backbone.seed) + "\n";
    if (!cfg.backbone.pretrain.tasks.empty()) {
        text += map_text(cfg.backbone.pretrain.train.to_map());
        for (const auto &d : cfg.backbone.pretrain.tasks) text += map_text(d.to_map());
    }
    return crc_hex(text);
}

// The frozen backbone every command shares: an explicit checkpoint, the
// cached one in the output directory when its provenance matches, or a
// freshly built (and optionally pre-trained) one that is then cached.
Backbone obtain_backbone(const ExperimentConfig &cfg, const fs::path &out, std::ostream &os) {
    if (!cfg.backbone.checkpoint.empty()) {
        auto bb = registry::backbone_from_checkpoint(Checkpoint::load(cfg.backbone.checkpoint));
        if (bb.config().d_emb != cfg.model.d_emb || bb.config().vocab_size != cfg.model.vocab_size) {
            throw DimensionError("backbone checkpoint '" + cfg.backbone.checkpoint +
                                 "' does not match the model section of the config");
        }
        bb.freeze();
        return bb;
    }
    const fs::path cache = out / "backbone.adlk";
    const std::string provenance = backbone_provenance(cfg);
    if (fs::exists(cache)) {
        auto ckpt = Checkpoint::load(cache);
        auto it = ckpt.config.find("provenance");
        if (it != ckpt.config.end() && it->second == provenance) {
            os << "backbone: reusing " << cache.string() << '\n';
            auto bb = registry::backbone_from_checkpoint(ckpt);
            bb.freeze();
            return bb;
        }
    }
    Backbone bb = Backbone::create(cfg.model, cfg.backbone.seed);
    if (!cfg.backbone.pretrain.tasks.empty()) {
        const auto data = generate_all(cfg.backbone.pretrain.tasks, cfg.model);
        std::vector<training::TaskBinding> bindings;
        for (const auto &d : data) bindings.push_back({&d, nullptr});
        os << "backbone: pre-training " << cfg.backbone.pretrain.train.total_steps << " steps on "
           << data.size() << " tasks\n";
        const auto report = training::train(bb, bindings, cfg.backbone.pretrain.train);
        if (report.diverged) throw TrainingError("backbone pre-training diverged: " + report.abort_reason);
        if (!report.log.empty()) os << "backbone: final pre-training loss " << report.log.back().loss << '\n';
    }
    bb.freeze();
    auto ckpt = registry::backbone_checkpoint(bb);
    ckpt.config["provenance"] = provenance;
    ckpt.save(cache);
    return bb;
}

struct Run {
    std::vector<AdapterSet> sets;
    training::TrainReport report;
    std::uint64_t expected_params = 0;
};

// One adapter per task (or one shared), trained jointly round-robin.
Run run_adapters(Backbone &bb, const std::vector<Dataset> &data, const ExperimentConfig &cfg, const AdapterSpec &spec) {
    Run run;
    const bool full = spec.kind == AdapterKind::kFullFT;
    const std::size_t n = spec.per_task && !full ? data.size() : 1;
    for (std::size_t i = 0; i < n; ++i) {
        tensor::Rng rng(cfg.train.seed * 1000 + 17 + i);
        run.sets.push_back(AdapterSet::create(spec, cfg.model, rng, &bb.token_embedding()));
    }
    std::vector<training::TaskBinding> bindings;
    for (std::size_t i = 0; i < data.size(); ++i) bindings.push_back({&data[i], &run.sets[n == 1 ? 0 : i]});
    run.report = training::train(bb, bindings, cfg.train);
    run.expected_params = full ? peft::count_full_finetune_params(cfg.model)
                               : peft::count_trainable_params(spec, cfg.model, data.size()).total();
    return run;
}

double mean_exact_match(const training::TrainReport &r) {
    if (r.final_metrics.empty()) return 0.0;
    double s = 0;
    for (const auto &[_, m] : r.final_metrics) s += m.exact_match;
    return s / static_cast<double>(r.final_metrics.size());
}

std::string diverged_detail(const training::TrainReport &r) { return r.diverged ? r.abort_reason : ""; }

fs::path registry_dir(const ExperimentConfig &cfg, const fs::path &dir) {
    return dir.empty() ? cfg.output_dir() / "registry" : dir;
}

std::unique_ptr<AdapterRegistry> load_registry(const ExperimentConfig &cfg, const fs::path &dir) {
    if (!fs::exists(dir / "index.tsv")) {
        throw ConfigError("no registry at '" + dir.string() + "' (run `adalink train` first)");
    }
    return AdapterRegistry::load(dir, cfg.model);
}

bool same_directory_bytes(const fs::path &a, const fs::path &b) {
    auto read = [](const fs::path &p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    };
    std::size_t count = 0;
    for (const auto &f : fs::directory_iterator(a)) {
        ++count;
        const fs::path other = b / f.path().filename();
        if (!fs::exists(other) || read(f.path()) != read(other)) return false;
    }
    return count == static_cast<std::size_t>(std::distance(fs::directory_iterator(b), fs::directory_iterator()));
}

Table registry_table(const AdapterRegistry &reg) {
    Table t({"task_id", "kind", "rank", "scope", "params", "file_bytes", "baked_table_bytes", "creation_step",
             "spec_hash"});
    for (const auto &s : reg.stats().entries) {
        const auto entry = reg.find(s.task_id);
        auto meta = [&](const char *k) {
            auto it = entry->metadata.find(k);
            return it == entry->metadata.end() ? std::string("-") : it->second;
        };
        t.add({s.task_id, s.kind, meta("rank"), meta("scope"), Cell(s.trainable_params), Cell(s.file_bytes),
               Cell(s.baked_table_bytes), meta("creation_step"), meta("spec_hash")});
    }
    return t;
}

}  // namespace

CheckList gen_tasks(const ExperimentConfig &cfg, std::ostream &os) {
    require_tasks(cfg, "gen-tasks");
    const fs::path out = prepare(cfg, "gen-tasks");
    CheckList checks;
    Table t({"task_id", "kind", "n_train", "n_val", "config_hash", "file"});
    for (const auto &def : cfg.tasks) {
        const Dataset ds = tasks::generate(def, cfg.model);
        const fs::path file = out / "data" / (def.task_id + ".jsonl");
        fs::create_directories(file.parent_path());
        tasks::write_dataset(file, ds);
        const auto report = tasks::verify(ds);
        checks.add("answers of '" + def.task_id + "' agree with the reference decoder", report.ok(),
                   std::to_string(report.mismatches) + " of " + std::to_string(report.checked) + " differ");
        const Dataset back = tasks::read_dataset(file, cfg.model);
        checks.add("'" + def.task_id + "' reads back unchanged", back.train == ds.train && back.val == ds.val);
        t.add({def.task_id, tasks::to_string(def.kind), Cell(std::uint64_t{ds.train.size()}),
               Cell(std::uint64_t{ds.val.size()}), ds.config_hash, fs::relative(file, out).string()});
    }
    emit(os, out, "gen_tasks", "generated tasks", t);
    return checks;
}

CheckList train(const ExperimentConfig &cfg, std::ostream &os) {
    require_tasks(cfg, "train");
    const fs::path out = prepare(cfg, "train");
    Backbone bb = obtain_backbone(cfg, out, os);
    const auto checksum_before = bb.checksum();
    const auto data = generate_all(cfg.tasks, cfg.model);
    os << "training " << peft::to_string(cfg.adapter.kind) << " for " << cfg.train.total_steps << " steps on "
       << data.size() << " task(s)\n";
    Run run = run_adapters(bb, data, cfg, cfg.adapter);
    const auto &report = run.report;

    {
        std::ofstream log(out / "log.jsonl", std::ios::trunc);
        training::write_log_jsonl(log, report);
        std::ofstream loss(out / "loss.csv", std::ios::trunc);
        training::write_loss_csv(loss, report);
        std::ofstream metrics(out / "metrics.csv", std::ios::trunc);
        training::write_metrics_csv(metrics, report);
    }

    const fs::path reg_dir = out / "registry";
    AdapterRegistry reg(cfg.model);
    const Map meta{{"train_config_hash", crc_hex(map_text(cfg.train.to_map()))},
                   {"creation_step", std::to_string(report.steps)}};
    for (std::size_t i = 0; i < data.size(); ++i) {
        reg.add(data[i].def.task_id, run.sets[run.sets.size() == 1 ? 0 : i], meta);
    }
    fs::remove_all(reg_dir);
    reg.save(reg_dir);
    if (cfg.adapter.kind == AdapterKind::kFullFT) registry::backbone_checkpoint(bb).save(out / "backbone_finetuned.adlk");

    Table t({"task_id", "exact_match", "token_accuracy", "count"});
    for (const auto &[id, m] : report.final_metrics) {
        t.add({id, Cell(m.exact_match), Cell(m.token_accuracy), Cell(std::uint64_t{m.count})});
    }
    emit(os, out, "train_summary", "validation after " + std::to_string(report.steps) + " steps", t);

    CheckList checks;
    checks.add("training finished without divergence", !report.diverged, diverged_detail(report));
    if (cfg.adapter.kind != AdapterKind::kFullFT) {
        checks.add("frozen backbone unchanged", bb.checksum() == checksum_before);
    }
    checks.add("trainable parameters match the accounting", report.trainable_params == run.expected_params,
               std::to_string(report.trainable_params) + " trained, " + std::to_string(run.expected_params) +
                   " expected");
    const fs::path again = out / ".registry_check";
    fs::remove_all(again);
    AdapterRegistry::load(reg_dir, cfg.model)->save(again);
    checks.add("registry save/load/save is byte-identical", same_directory_bytes(reg_dir, again));
    fs::remove_all(again);
    return checks;
}

CheckList eval(const ExperimentConfig &cfg, std::ostream &os) {
    require_tasks(cfg, "eval");
    const fs::path out = prepare(cfg, "eval");
    Backbone bb = obtain_backbone(cfg, out, os);
    const auto checksum = bb.checksum();
    auto reg = load_registry(cfg, out / "registry");
    std::optional<Backbone> tuned;
    if (fs::exists(out / "backbone_finetuned.adlk")) {
        tuned = registry::backbone_from_checkpoint(Checkpoint::load(out / "backbone_finetuned.adlk"));
    }
    const auto data = generate_all(cfg.tasks, cfg.model);

    CheckList checks;
    Table t({"task_id", "kind", "exact_match", "token_accuracy", "frozen_exact_match", "count"});
    for (const auto &ds : data) {
        model::MultimodalBatch probe;
        probe.task_id = ds.def.task_id;
        std::shared_ptr<const registry::RegistryEntry> entry;
        try {
            entry = reg->route(probe);
        } catch (const RoutingError &e) {
            checks.add("task '" + ds.def.task_id + "' routes to an adapter", false, e.what());
            continue;
        }
        const bool full = entry->adapters.kind() == AdapterKind::kFullFT;
        if (full && !tuned) {
            checks.add("task '" + ds.def.task_id + "' has its fine-tuned backbone", false, "backbone_finetuned.adlk missing");
            continue;
        }
        const Backbone &model = full ? *tuned : bb;
        const auto s = training::evaluate(model, &entry->adapters, ds, ds.val, cfg.train.eval_batch_size);
        const auto frozen = training::evaluate(bb, nullptr, ds, ds.val, cfg.train.eval_batch_size);
        t.add({ds.def.task_id, peft::to_string(entry->adapters.kind()), Cell(s.exact_match), Cell(s.token_accuracy),
               Cell(frozen.exact_match), Cell(std::uint64_t{s.count})});
        checks.add("task '" + ds.def.task_id + "' routes to an adapter", true);
    }
    emit(os, out, "eval", "validation exact match (frozen = backbone without adapter)", t);
    checks.add("evaluation leaves the backbone unchanged", bb.checksum() == checksum);
    return checks;
}

CheckList params(const ExperimentConfig &cfg, std::ostream &os) {
    const fs::path out = prepare(cfg, "params");
    const auto &m = cfg.model;
    const std::size_t r = cfg.adapter.rank;
    const std::size_t n_tasks = std::max<std::size_t>(1, cfg.tasks.size());

    auto spec_with = [&](AdapterKind kind, std::size_t rank, AdaLinkScope scope) {
        AdapterSpec s = cfg.adapter;
        s.kind = kind;
        s.rank = rank;
        s.scope = scope;
        return s;
    };
    struct Row {
        std::string label;
        AdapterSpec spec;
    };
    const std::vector<Row> rows{
        {"configured", cfg.adapter},
        {"adalink modality", spec_with(AdapterKind::kAdaLink, r, AdaLinkScope::kModality)},
        {"adalink unified 2r", spec_with(AdapterKind::kAdaLink, 2 * r, AdaLinkScope::kUnified)},
        {"adalink text", spec_with(AdapterKind::kAdaLink, r, AdaLinkScope::kText)},
        {"lora", spec_with(AdapterKind::kLoRA, r, cfg.adapter.scope)},
        {"prompt tuning", spec_with(AdapterKind::kPromptTuning, r, cfg.adapter.scope)},
        {"full fine-tuning", spec_with(AdapterKind::kFullFT, r, cfg.adapter.scope)},
    };
    Table t({"method", "kind", "rank", "scope", "params", "reparam", "n_tasks", "total"});
    std::map<std::string, std::uint64_t> per_task;
    for (const auto &row : rows) {
        const auto one = peft::count_trainable_params(row.spec, m, 1);
        const auto all = peft::count_trainable_params(row.spec, m, n_tasks);
        per_task[row.label] = one.total();
        const bool ranked = row.spec.kind == AdapterKind::kAdaLink || row.spec.kind == AdapterKind::kLoRA;
        t.add({row.label, peft::to_string(row.spec.kind), ranked ? Cell(std::uint64_t{row.spec.rank}) : Cell("-"),
               row.spec.kind == AdapterKind::kAdaLink ? peft::to_string(row.spec.scope) : "-", Cell(one.core),
               Cell(one.reparam), Cell(std::uint64_t{row.spec.per_task ? n_tasks : 1}), Cell(all.total())});
    }
    emit(os, out, "params", "trainable parameters at d_emb=" + std::to_string(m.d_emb), t);

    CheckList checks;
    checks.add("unified rank 2r costs the same as modality rank r",
               per_task["adalink modality"] == per_task["adalink unified 2r"]);
    if (cfg.adapter.kind != AdapterKind::kFullFT) {
        // Instantiate the configured adapter and count its tensors.
        tensor::Rng rng(0);
        const auto table = tensor::Tensor::zeros({m.vocab_size, m.d_emb});
        const auto set = AdapterSet::create(cfg.adapter, m, rng, &table);
        std::uint64_t counted = 0;
        for (const auto &p : set.parameters()) counted += p.tensor.size();
        checks.add("count matches the instantiated adapter", counted == per_task["configured"],
                   std::to_string(counted) + " tensor entries");
    }
    return checks;
}

CheckList flops(const ExperimentConfig &cfg, std::ostream &os) {
    const fs::path out = prepare(cfg, "flops");
    auto layers = cfg.ablation.layers;
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
    const std::size_t seq = cfg.model.encoder_len();

    auto spec_of = [&](AdapterKind kind) {
        AdapterSpec s = cfg.adapter;
        s.kind = kind;
        return s;
    };
    Table t({"n_enc_layers", "adalink", "lora", "prompt_tuning"});
    std::vector<std::uint64_t> ada, lora, prompt;
    for (std::size_t l : layers) {
        auto m = cfg.model;
        m.n_enc_layers = l;
        ada.push_back(peft::flops_added(spec_of(AdapterKind::kAdaLink), seq, m));
        lora.push_back(peft::flops_added(spec_of(AdapterKind::kLoRA), seq, m));
        prompt.push_back(peft::flops_added(spec_of(AdapterKind::kPromptTuning), seq, m));
        t.add({Cell(std::uint64_t{l}), Cell(ada.back()), Cell(lora.back()), Cell(prompt.back())});
    }
    emit(os, out, "flops",
         "added multiply-accumulates per forward pass over " + std::to_string(seq) + " encoder positions", t);

    CheckList checks;
    checks.add("AdaLink cost is independent of depth", std::adjacent_find(ada.begin(), ada.end(),
                                                                          std::not_equal_to<>()) == ada.end());
    checks.add("prompt tuning cost grows with depth",
               std::adjacent_find(prompt.begin(), prompt.end(), std::greater_equal<>()) == prompt.end());
    checks.add("LoRA cost grows with depth",
               std::adjacent_find(lora.begin(), lora.end(), std::greater_equal<>()) == lora.end());
    return checks;
}

CheckList ablate_rank(const ExperimentConfig &cfg, std::ostream &os) {
    require_tasks(cfg, "ablate-rank");
    const fs::path out = prepare(cfg, "ablate-rank");
    Backbone bb = obtain_backbone(cfg, out, os);
    const auto checksum = bb.checksum();
    const auto data = generate_all(cfg.tasks, cfg.model);

    std::vector<std::string> headers{"rank", "params", "mean_exact_match"};
    for (const auto &d : data) headers.push_back(d.def.task_id);
    Table t(headers);
    CheckList checks;
    std::vector<std::pair<std::size_t, double>> means;
    for (std::size_t r : cfg.ablation.ranks) {
        AdapterSpec spec = cfg.adapter;
        spec.kind = AdapterKind::kAdaLink;
        spec.rank = r;
        os << "rank " << r << ": training\n";
        Run run = run_adapters(bb, data, cfg, spec);
        checks.add("rank " + std::to_string(r) + " trains without divergence", !run.report.diverged,
                   diverged_detail(run.report));
        checks.add("rank " + std::to_string(r) + " parameter count matches the accounting",
                   run.report.trainable_params == run.expected_params);
        std::vector<Cell> row{Cell(std::uint64_t{r}), Cell(std::uint64_t{run.report.trainable_params}),
                              Cell(mean_exact_match(run.report))};
        for (const auto &d : data) {
            auto it = run.report.final_metrics.find(d.def.task_id);
            row.emplace_back(it == run.report.final_metrics.end() ? 0.0 : it->second.exact_match);
        }
        t.add(std::move(row));
        means.emplace_back(r, mean_exact_match(run.report));
    }
    emit(os, out, "ablate_rank", "AdaLink rank ablation (validation exact match)", t);
    std::sort(means.begin(), means.end());
    if (means.size() >= 2) {
        const auto &a = means[means.size() - 2];
        const auto &b = means.back();
        os << "exact-match difference between rank " << a.first << " and rank " << b.first << ": "
           << points(std::abs(a.second - b.second)) << " points\n";
    }
    checks.add("frozen backbone unchanged", bb.checksum() == checksum);
    return checks;
}

CheckList ablate_modality(const ExperimentConfig &cfg, std::ostream &os) {
    std::vector<tasks::TaskDef> mm;
    for (const auto &d : cfg.tasks) {
        if (d.multimodal()) mm.push_back(d);
    }
    if (mm.empty()) throw ConfigError("ablate-modality: the config lists no multimodal task");
    const fs::path out = prepare(cfg, "ablate-modality");
    const auto data = generate_all(mm, cfg.model);
    CheckList checks;

    Table probe({"task_id", "text_only", "image_only", "chance", "evaluated"});
    for (const auto &ds : data) {
        const auto rep = tasks::modality_ablation(ds);
        probe.add({ds.def.task_id, Cell(rep.text_only_accuracy), Cell(rep.image_only_accuracy), Cell(rep.chance),
                   Cell(std::uint64_t{rep.evaluated})});
        checks.add("'" + ds.def.task_id + "' is not solvable from text alone",
                   rep.text_only_accuracy <= rep.chance + 0.10,
                   "text-only " + points(rep.text_only_accuracy) + " vs chance " + points(rep.chance));
    }
    emit(os, out, "modality_probe", "single-modality majority predictors on held-out examples", probe);

    Backbone bb = obtain_backbone(cfg, out, os);
    const auto checksum = bb.checksum();
    const std::size_t r = cfg.adapter.rank;
    std::vector<std::string> headers{"configuration", "rank", "params", "mean_exact_match"};
    for (const auto &d : data) headers.push_back(d.def.task_id);
    Table t(headers);
    std::vector<std::uint64_t> budgets;
    for (auto [label, scope, rank] : {std::tuple{"modality", AdaLinkScope::kModality, r},
                                      std::tuple{"unified", AdaLinkScope::kUnified, 2 * r}}) {
        AdapterSpec spec = cfg.adapter;
        spec.kind = AdapterKind::kAdaLink;
        spec.scope = scope;
        spec.rank = rank;
        os << label << " rank " << rank << ": training\n";
        Run run = run_adapters(bb, data, cfg, spec);
        checks.add(std::string(label) + " trains without divergence", !run.report.diverged,
                   diverged_detail(run.report));
        budgets.push_back(run.report.trainable_params);
        std::vector<Cell> row{label, Cell(std::uint64_t{rank}), Cell(std::uint64_t{run.report.trainable_params}),
                              Cell(mean_exact_match(run.report))};
        for (const auto &d : data) {
            auto it = run.report.final_metrics.find(d.def.task_id);
            row.emplace_back(it == run.report.final_metrics.end() ? 0.0 : it->second.exact_match);
        }
        t.add(std::move(row));
    }
    emit(os, out, "ablate_modality", "modality-split vs unified AdaLink at matched budget", t);
    checks.add("both configurations train the same number of parameters", budgets[0] == budgets[1],
               std::to_string(budgets[0]) + " vs " + std::to_string(budgets[1]));
    checks.add("frozen backbone unchanged", bb.checksum() == checksum);
    return checks;
}

CheckList bake(const ExperimentConfig &cfg, std::ostream &os) {
    const fs::path out = prepare(cfg, "bake");
    Backbone bb = obtain_backbone(cfg, out, os);
    auto reg = load_registry(cfg, out / "registry");
    std::map<std::string, Dataset> data;
    for (const auto &d : cfg.tasks) data.emplace(d.task_id, tasks::generate(d, cfg.model));

    AdapterRegistry baked_reg(cfg.model);
    CheckList checks;
    Table t({"task_id", "scope", "baked", "live_bytes", "baked_bytes", "table_bytes", "batches_compared"});
    for (const auto &id : reg->task_ids()) {
        const auto entry = reg->find(id);
        const auto &live = entry->adapters;
        const bool bakeable = live.kind() == AdapterKind::kAdaLink && live.text &&
                              (live.spec().scope == AdaLinkScope::kText || live.spec().scope == AdaLinkScope::kModality);
        const auto live_bytes = registry::adapter_checkpoint(live, cfg.model, entry->metadata).serialize().size();
        if (!bakeable) {
            baked_reg.add(id, live, entry->metadata);
            t.add({id, peft::to_string(live.spec().scope), "no", Cell(std::uint64_t{live_bytes}), "-", "-", "-"});
            continue;
        }
        AdapterSet folded = registry::bake(bb, live);
        auto meta = entry->metadata;
        meta["baked"] = "1";
        baked_reg.add(id, folded, meta);
        const auto baked_bytes = registry::adapter_checkpoint(folded, cfg.model, meta).serialize().size();

        std::size_t compared = 0;
        bool equal = true;
        auto it = data.find(id);
        if (it != data.end()) {
            const auto &ds = it->second;
            for (std::size_t start = 0; start < ds.val.size(); start += cfg.train.eval_batch_size) {
                const std::size_t n = std::min(cfg.train.eval_batch_size, ds.val.size() - start);
                const auto batch = tasks::make_batch(ds, std::span(ds.val).subspan(start, n), cfg.model);
                const auto a = bb.forward(batch, &live, tensor::Mode::kEval);
                const auto b = bb.forward(batch, &folded, tensor::Mode::kEval);
                equal = equal && std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end());
                ++compared;
            }
        }
        checks.add("baked '" + id + "' matches the live adapter bit for bit", equal && compared > 0,
                   compared ? std::to_string(compared) + " batches" : "task not in config, nothing compared");
        t.add({id, peft::to_string(live.spec().scope), "yes", Cell(std::uint64_t{live_bytes}),
               Cell(std::uint64_t{baked_bytes}), Cell(std::uint64_t{folded.baked_text_table->size() * 8}),
               Cell(std::uint64_t{compared})});
    }
    const fs::path baked_dir = out / "registry_baked";
    fs::remove_all(baked_dir);
    baked_reg.save(baked_dir);
    emit(os, out, "bake", "baked vocabulary serving (written to " + baked_dir.string() + ")", t);
    return checks;
}

CheckList registry_ls(const ExperimentConfig &cfg, const fs::path &dir, std::ostream &os) {
    const fs::path d = registry_dir(cfg, dir);
    auto reg = load_registry(cfg, d);
    const auto t = registry_table(*reg);
    os << d.string() << '\n' << t.text();
    const auto stats = reg->stats();
    os << reg->size() << " task(s), " << group_digits(stats.total_file_bytes) << " bytes of adapter files, "
       << group_digits(stats.total_baked_table_bytes) << " bytes of baked tables\n";
    CheckList checks;
    checks.add("every entry loaded with a valid checksum", true, std::to_string(reg->size()) + " entries");
    return checks;
}

CheckList registry_add(const ExperimentConfig &cfg, const fs::path &dir, const std::string &task_id,
                       const fs::path &checkpoint, std::ostream &os) {
    const fs::path d = registry_dir(cfg, dir);
    std::unique_ptr<AdapterRegistry> reg =
        fs::exists(d / "index.tsv") ? AdapterRegistry::load(d, cfg.model) : std::make_unique<AdapterRegistry>(cfg.model);
    auto loaded = registry::adapter_from_checkpoint(Checkpoint::load(checkpoint), cfg.model);
    const bool replaced = reg->find(task_id) != nullptr;
    reg->add(task_id, loaded.adapters, loaded.metadata);
    reg->save(d);
    os << (replaced ? "replaced " : "added ") << task_id << " in " << d.string() << '\n';
    CheckList checks;
    model::MultimodalBatch probe;
    probe.task_id = task_id;
    checks.add("'" + task_id + "' routes after reload",
               AdapterRegistry::load(d, cfg.model)->route(probe)->adapters.spec() == loaded.adapters.spec());
    return checks;
}

CheckList registry_rm(const ExperimentConfig &cfg, const fs::path &dir, const std::string &task_id, std::ostream &os) {
    const fs::path d = registry_dir(cfg, dir);
    auto reg = load_registry(cfg, d);
    if (!reg->remove(task_id)) {
        model::MultimodalBatch probe;
        probe.task_id = task_id;
        reg->route(probe);  // throws RoutingError listing the known tasks
    }
    reg->save(d);
    os << "removed " << task_id << " from " << d.string() << '\n';
    CheckList checks;
    checks.add("'" + task_id + "' no longer listed", AdapterRegistry::load(d, cfg.model)->find(task_id) == nullptr);
    return checks;
}

}  // namespace adalink::cli
