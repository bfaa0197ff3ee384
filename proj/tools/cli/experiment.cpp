#include "experiment.hpp"

#include <yaml-cpp/yaml.h>

#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "adalink/errors.hpp"

namespace adalink::cli {

namespace {

using Map = std::map<std::string, std::string>;

const std::set<std::string> kBoolFields{"per_task", "use_nonlinearity", "evaluate_at_end", "freeze_patch_projector"};

class Context {
   public:
    explicit Context(std::string source) : source_(std::move(source)) {}

    std::string where(const YAML::Node &node) const {
        const YAML::Mark m = node.Mark();
        if (m.is_null()) return "--set: ";
        return source_ + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1) + ": ";
    }

    [[noreturn]] void fail(const YAML::Node &node, const std::string &field, const std::string &what) const {
        throw ConfigError(where(node) + "field '" + field + "': " + what);
    }

   private:
    std::string source_;
};

std::string join(const std::string &a, const std::string &b) { return a.empty() ? b : a + "." + b; }

std::string scalar(const YAML::Node &node, const std::string &field, const Context &ctx) {
    if (!node.IsScalar()) ctx.fail(node, field, "expected a single value");
    std::string v = node.Scalar();
    const auto last = field.substr(field.rfind('.') + 1);
    if (kBoolFields.count(last)) {
        if (v == "true" || v == "yes" || v == "on") v = "1";
        if (v == "false" || v == "no" || v == "off") v = "0";
        if (v != "0" && v != "1") ctx.fail(node, field, "expected true or false, got '" + node.Scalar() + "'");
    }
    return v;
}

std::uint64_t unsigned_value(const YAML::Node &node, const std::string &field, const Context &ctx) {
    const std::string s = scalar(node, field, ctx);
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        ctx.fail(node, field, "expected a non-negative integer, got '" + s + "'");
    }
    return v;
}

void require_map(const YAML::Node &node, const std::string &field, const Context &ctx) {
    if (!node.IsMap()) ctx.fail(node, field, "expected a mapping of fields");
}

std::string known_list(const Map &defaults, const std::set<std::string> &extra) {
    std::set<std::string> all(extra);
    for (const auto &[k, _] : defaults) all.insert(k);
    std::string out;
    for (const auto &k : all) out += (out.empty() ? "" : ", ") + k;
    return out;
}

// Overlays the node's fields on `defaults` and converts with `from_map`.
// A value that fails on its own is reported at its own line; failures that
// only arise from a combination of fields are reported at the section.
template <class T>
T parse_fields(const YAML::Node &node, const std::string &path, const Context &ctx, const Map &defaults,
               const std::function<T(const Map &)> &from_map, const std::set<std::string> &optional = {},
               const std::set<std::string> &skip = {}) {
    if (!node || node.IsNull()) return from_map(defaults);
    require_map(node, path, ctx);
    Map merged = defaults;
    std::vector<std::pair<std::string, YAML::Node>> given;
    for (const auto &kv : node) {
        const std::string key = kv.first.as<std::string>();
        if (skip.count(key)) continue;
        const std::string field = join(path, key);
        if (!defaults.count(key) && !optional.count(key)) {
            ctx.fail(kv.first, field, "unknown field (known: " + known_list(defaults, optional) + ")");
        }
        merged[key] = scalar(kv.second, field, ctx);
        given.emplace_back(key, kv.second);
    }
    try {
        return from_map(merged);
    } catch (const std::exception &combined) {
        // Blame a field when restoring its default alone makes the section
        // valid and no other field has that property.
        const YAML::Node *culprit = nullptr;
        std::string culprit_key;
        std::size_t fixes = 0;
        for (const auto &[key, value] : given) {
            Map trial = merged;
            trial[key] = defaults.count(key) ? defaults.at(key) : std::string();
            if (!defaults.count(key)) trial.erase(key);
            try {
                from_map(trial);
                ++fixes;
                culprit = &value;
                culprit_key = key;
            } catch (const std::exception &) {
            }
        }
        if (fixes == 1) ctx.fail(*culprit, join(path, culprit_key), combined.what());
        throw ConfigError(ctx.where(node) + "section '" + path + "': " + combined.what());
    }
}

std::vector<tasks::TaskDef> parse_tasks(const YAML::Node &node, const std::string &path, const Context &ctx) {
    std::vector<tasks::TaskDef> out;
    if (!node || node.IsNull()) return out;
    if (!node.IsSequence()) ctx.fail(node, path, "expected a list of task definitions");
    std::set<std::string> seen;
    for (std::size_t i = 0; i < node.size(); ++i) {
        const YAML::Node item = node[i];
        const std::string field = path + "." + std::to_string(i);
        require_map(item, field, ctx);
        if (!item["task_id"]) ctx.fail(item, field, "missing task_id");
        tasks::TaskDef defaults;
        defaults.task_id = "_";
        auto def = parse_fields<tasks::TaskDef>(item, field, ctx, defaults.to_map(),
                                                [](const Map &m) { return tasks::TaskDef::from_map(m); });
        if (!seen.insert(def.task_id).second) ctx.fail(item["task_id"], field, "duplicate task_id '" + def.task_id + "'");
        out.push_back(std::move(def));
    }
    return out;
}

std::vector<std::size_t> parse_sizes(const YAML::Node &node, const std::string &path, const Context &ctx,
                                     std::vector<std::size_t> fallback) {
    if (!node || node.IsNull()) return fallback;
    if (!node.IsSequence() || node.size() == 0) ctx.fail(node, path, "expected a non-empty list of integers");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < node.size(); ++i) {
        const auto v = unsigned_value(node[i], path + "." + std::to_string(i), ctx);
        if (v == 0) ctx.fail(node[i], path, "values must be >= 1");
        out.push_back(v);
    }
    return out;
}

void check_keys(const YAML::Node &node, const std::string &path, const Context &ctx,
                const std::set<std::string> &known) {
    if (!node || node.IsNull()) return;
    require_map(node, path.empty() ? "<top level>" : path, ctx);
    for (const auto &kv : node) {
        const std::string key = kv.first.as<std::string>();
        if (!known.count(key)) ctx.fail(kv.first, join(path, key), "unknown field (known: " + known_list({}, known) + ")");
    }
}

bool all_digits(const std::string &s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

void apply_override(YAML::Node &root, const std::string &text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + text + "'");
    std::vector<std::string> path;
    std::stringstream keys(text.substr(0, eq));
    for (std::string seg; std::getline(keys, seg, '.');) {
        if (seg.empty()) throw ConfigError("--set: empty path segment in '" + text + "'");
        path.push_back(seg);
    }
    const std::string raw = text.substr(eq + 1);
    YAML::Node value;
    if (!raw.empty() && (raw.front() == '[' || raw.front() == '{')) {
        try {
            value = YAML::Load(raw);
        } catch (const YAML::Exception &e) {
            throw ConfigError("--set " + text.substr(0, eq) + ": " + e.msg);
        }
    } else {
        value = YAML::Node(raw);
    }

    YAML::Node cur = root;
    for (std::size_t i = 0; i < path.size(); ++i) {
        const bool last = i + 1 == path.size();
        const std::string &seg = path[i];
        if (cur.IsSequence()) {
            if (!all_digits(seg) || std::stoul(seg) >= cur.size()) {
                throw ConfigError("--set " + text.substr(0, eq) + ": no list element '" + seg + "'");
            }
            const std::size_t idx = std::stoul(seg);
            if (last) {
                cur[idx] = value;
            } else {
                YAML::Node next = cur[idx];
                cur.reset(next);
            }
            continue;
        }
        if (!cur.IsMap() && !cur.IsNull()) {
            throw ConfigError("--set " + text.substr(0, eq) + ": '" + seg + "' is below a plain value");
        }
        if (last) {
            cur[seg] = value;
        } else {
            if (!cur[seg]) cur[seg] = YAML::Node(YAML::NodeType::Map);
            YAML::Node next = cur[seg];
            cur.reset(next);
        }
    }
}

void emit_map(YAML::Emitter &out, const Map &m) {
    out << YAML::BeginMap;
    for (const auto &[k, v] : m) out << YAML::Key << k << YAML::Value << v;
    out << YAML::EndMap;
}

void emit_tasks(YAML::Emitter &out, const std::vector<tasks::TaskDef> &defs) {
    out << YAML::BeginSeq;
    for (const auto &d : defs) emit_map(out, d.to_map());
    out << YAML::EndSeq;
}

training::TrainConfig default_pretrain() {
    training::TrainConfig c;
    c.peak_lr = 1e-2;
    c.total_steps = 2000;
    c.seed = 1;
    c.evaluate_at_end = false;
    return c;
}

}  // namespace

ExperimentConfig default_experiment() {
    ExperimentConfig c;
    c.backbone.pretrain.train = default_pretrain();
    return c;
}

std::filesystem::path ExperimentConfig::output_dir() const {
    const char *env = std::getenv("ADALINK_OUTPUT_ROOT");
    const std::filesystem::path root = env && *env ? std::filesystem::path(env) : std::filesystem::path(output_root);
    return root / name;
}

std::string ExperimentConfig::to_yaml() const {
    YAML::Emitter out;
    out << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << name;
    out << YAML::Key << "output_root" << YAML::Value << output_root;
    out << YAML::Key << "model" << YAML::Value;
    emit_map(out, model.to_map());
    out << YAML::Key << "adapter" << YAML::Value;
    emit_map(out, adapter.to_map());
    out << YAML::Key << "train" << YAML::Value;
    emit_map(out, train.to_map());
    out << YAML::Key << "backbone" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "seed" << YAML::Value << std::to_string(backbone.seed);
    out << YAML::Key << "checkpoint" << YAML::Value << backbone.checkpoint;
    out << YAML::Key << "pretrain" << YAML::Value << YAML::BeginMap;
    for (const auto &[k, v] : backbone.pretrain.train.to_map()) out << YAML::Key << k << YAML::Value << v;
    out << YAML::Key << "tasks" << YAML::Value;
    emit_tasks(out, backbone.pretrain.tasks);
    out << YAML::EndMap << YAML::EndMap;
    out << YAML::Key << "tasks" << YAML::Value;
    emit_tasks(out, tasks);
    out << YAML::Key << "ablation" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "ranks" << YAML::Value << YAML::Flow << ablation.ranks;
    out << YAML::Key << "layers" << YAML::Value << YAML::Flow << ablation.layers;
    out << YAML::EndMap;
    out << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

ExperimentConfig parse_experiment(const std::string &yaml, const std::string &source_name,
                                  std::span<const std::string> overrides) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml);
    } catch (const YAML::ParserException &e) {
        throw ConfigError(source_name + ":" + std::to_string(e.mark.line + 1) + ":" + std::to_string(e.mark.column + 1) +
                          ": " + e.msg);
    }
    if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
    for (const auto &o : overrides) apply_override(root, o);

    const Context ctx(source_name);
    check_keys(root, "", ctx, {"name", "output_root", "model", "adapter", "train", "backbone", "tasks", "ablation"});

    ExperimentConfig c = default_experiment();
    if (root["name"]) {
        c.name = scalar(root["name"], "name", ctx);
        if (c.name.empty() || c.name.find('/') != std::string::npos || c.name == "..") {
            ctx.fail(root["name"], "name", "must be a plain directory name");
        }
    }
    if (root["output_root"]) c.output_root = scalar(root["output_root"], "output_root", ctx);

    c.model = parse_fields<model::ModelConfig>(root["model"], "model", ctx, c.model.to_map(), [](const Map &m) {
        auto mc = model::ModelConfig::from_map(m);
        mc.validate();
        return mc;
    });
    c.adapter = parse_fields<peft::AdapterSpec>(root["adapter"], "adapter", ctx, c.adapter.to_map(),
                                                [](const Map &m) { return peft::AdapterSpec::from_map(m); },
                                                {"dropout_rate"});
    c.train = parse_fields<training::TrainConfig>(root["train"], "train", ctx, c.train.to_map(),
                                                  [](const Map &m) { return training::TrainConfig::from_map(m); },
                                                  {"dropout_rate"});

    const YAML::Node bb = root["backbone"];
    check_keys(bb, "backbone", ctx, {"seed", "checkpoint", "pretrain"});
    if (bb && bb["seed"]) c.backbone.seed = unsigned_value(bb["seed"], "backbone.seed", ctx);
    if (bb && bb["checkpoint"]) c.backbone.checkpoint = scalar(bb["checkpoint"], "backbone.checkpoint", ctx);
    if (bb && bb["pretrain"]) {
        const YAML::Node pt = bb["pretrain"];
        c.backbone.pretrain.train = parse_fields<training::TrainConfig>(
            pt, "backbone.pretrain", ctx, c.backbone.pretrain.train.to_map(),
            [](const Map &m) { return training::TrainConfig::from_map(m); }, {"dropout_rate"}, {"tasks"});
        if (pt.IsMap()) c.backbone.pretrain.tasks = parse_tasks(pt["tasks"], "backbone.pretrain.tasks", ctx);
    }

    c.tasks = parse_tasks(root["tasks"], "tasks", ctx);

    const YAML::Node ab = root["ablation"];
    check_keys(ab, "ablation", ctx, {"ranks", "layers"});
    if (ab) {
        c.ablation.ranks = parse_sizes(ab["ranks"], "ablation.ranks", ctx, c.ablation.ranks);
        c.ablation.layers = parse_sizes(ab["layers"], "ablation.layers", ctx, c.ablation.layers);
    }
    return c;
}

ExperimentConfig load_experiment(const std::optional<std::filesystem::path> &file,
                                 std::span<const std::string> overrides) {
    if (!file) return parse_experiment("", "<defaults>", overrides);
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot read config file '" + file->string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_experiment(ss.str(), file->string(), overrides);
}

}  // namespace adalink::cli
