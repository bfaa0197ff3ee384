#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sys/wait.h>

#include "adalink/errors.hpp"
#include "experiment.hpp"
#include "report.hpp"

using namespace adalink;
using namespace adalink::cli;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::string &yaml, std::vector<std::string> overrides = {}) {
    try {
        parse_experiment(yaml, "exp.yaml", overrides);
    } catch (const ConfigError &e) {
        return e.what();
    }
    return "";
}

std::string read_file(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Result {
    int status = -1;
    std::string output;
};

// Runs the adalink binary with ADALINK_OUTPUT_ROOT set, capturing stdout.
Result run_tool(const std::string &args, const fs::path &root) {
    const std::string cmd =
        "ADALINK_OUTPUT_ROOT='" + root.string() + "' '" + std::string(ADALINK_BIN) + "' " + args + " 2>&1";
    Result r;
    FILE *pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    while (std::size_t n = fread(buf, 1, sizeof buf, pipe)) r.output.append(buf, n);
    const int status = pclose(pipe);
    r.status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

class Scratch {
   public:
    explicit Scratch(const std::string &name)
        : path_(fs::temp_directory_path() / ("adalink_cli_" + name + "_" + std::to_string(::getpid()))) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~Scratch() { fs::remove_all(path_); }
    const fs::path &path() const { return path_; }

   private:
    fs::path path_;
};

constexpr const char *kSmall = R"(name: small
model: {d_emb: 16, n_heads: 2, d_ff: 32}
train: {total_steps: 30, warmup_steps: 10, batch_size: 16}
tasks:
  - {task_id: vqa, kind: mm_vqa, seed: 7, n_train: 120, n_val: 40}
  - {task_id: copy, kind: text_copy, seed: 3, n_train: 120, n_val: 40}
)";

}  // namespace

TEST(ExperimentConfig, EmptyFileGivesDefaults) {
    const auto c = parse_experiment("", "exp.yaml");
    const auto d = default_experiment();
    EXPECT_EQ(c.to_yaml(), d.to_yaml());
    EXPECT_EQ(c.model, model::ModelConfig{});
    EXPECT_EQ(c.adapter, peft::AdapterSpec{});
    EXPECT_TRUE(c.tasks.empty());
}

TEST(ExperimentConfig, ResolvedYamlReadsBackIdentically) {
    const std::string yaml = std::string(kSmall) + "adapter: {kind: lora, rank: 3, per_task: false}\n";
    const auto c = parse_experiment(yaml, "exp.yaml");
    EXPECT_EQ(c.adapter.kind, peft::AdapterKind::kLoRA);
    EXPECT_FALSE(c.adapter.per_task);
    ASSERT_EQ(c.tasks.size(), 2u);
    EXPECT_EQ(c.tasks[1].kind, tasks::TaskKind::kTextCopy);
    const auto again = parse_experiment(c.to_yaml(), "resolved.yaml");
    EXPECT_EQ(again.to_yaml(), c.to_yaml());
    EXPECT_EQ(again.tasks, c.tasks);
    EXPECT_EQ(again.train, c.train);
}

TEST(ExperimentConfig, ErrorsNameLineAndField) {
    EXPECT_NE(error_of("name: x\ntrain:\n  peak_lr: fast\n").find("exp.yaml:3:12: field 'train.peak_lr': "),
              std::string::npos);
    EXPECT_NE(error_of("train: {total_steps: 300, peak_lr: -1}\n").find("exp.yaml:1:36: field 'train.peak_lr'"),
              std::string::npos);
    EXPECT_NE(error_of("train:\n  total_steps: 30\n").find("exp.yaml:2:16: field 'train.total_steps'"),
              std::string::npos);
    EXPECT_NE(error_of("model: {d_emb: 10}\n").find("field 'model.d_emb'"), std::string::npos);
    EXPECT_NE(error_of("model:\n  d_emb: 8\n  depth: 3\n").find("exp.yaml:3:3: field 'model.depth': unknown field"),
              std::string::npos);
    EXPECT_NE(error_of("tasks:\n  - {task_id: a}\n  - {task_id: b, kind: maze}\n").find("exp.yaml:3:24: field 'tasks.1.kind'"),
              std::string::npos);
    EXPECT_NE(error_of("tasks:\n  - {kind: mm_vqa}\n").find("missing task_id"), std::string::npos);
    EXPECT_NE(error_of("tasks:\n  - {task_id: a}\n  - {task_id: a}\n").find("duplicate"), std::string::npos);
    EXPECT_NE(error_of("colour: red\n").find("exp.yaml:1:1: field 'colour'"), std::string::npos);
    EXPECT_NE(error_of("model: {d_emb: 12, n_heads: 8}\n").find("exp.yaml:1:8: section 'model'"), std::string::npos);
    EXPECT_NE(error_of("adapter: {per_task: sometimes}\n").find("expected true or false"), std::string::npos);
    EXPECT_NE(error_of("model: [1, 2\n").find("exp.yaml:"), std::string::npos);
    EXPECT_NE(error_of("ablation: {ranks: [4, x]}\n").find("ablation.ranks.1"), std::string::npos);
}

TEST(ExperimentConfig, OverridesApplyOnTopOfTheFile) {
    const std::vector<std::string> sets{"adapter.rank=16", "tasks.0.n_train=64", "ablation.layers=[1, 3]",
                                        "backbone.pretrain.total_steps=300", "name=other"};
    const auto c = parse_experiment(kSmall, "exp.yaml", sets);
    EXPECT_EQ(c.adapter.rank, 16u);
    EXPECT_EQ(c.tasks[0].n_train, 64u);
    EXPECT_EQ(c.tasks[1].n_train, 120u);
    EXPECT_EQ(c.ablation.layers, (std::vector<std::size_t>{1, 3}));
    EXPECT_EQ(c.backbone.pretrain.train.total_steps, 300u);
    EXPECT_EQ(c.name, "other");
    EXPECT_NE(error_of(kSmall, {"tasks.5.seed=1"}).find("no list element"), std::string::npos);
    EXPECT_NE(error_of(kSmall, {"adapter.rank"}).find("key=value"), std::string::npos);
    EXPECT_NE(error_of(kSmall, {"train.peak_lr=-1"}).find("--set: field 'train.peak_lr'"), std::string::npos);
}

TEST(ExperimentConfig, OutputRootComesFromTheEnvironment) {
    auto c = parse_experiment("name: run1\noutput_root: somewhere\n", "exp.yaml");
    ::unsetenv("ADALINK_OUTPUT_ROOT");
    EXPECT_EQ(c.output_dir(), fs::path("somewhere") / "run1");
    ::setenv("ADALINK_OUTPUT_ROOT", "/tmp/elsewhere", 1);
    EXPECT_EQ(c.output_dir(), fs::path("/tmp/elsewhere") / "run1");
    ::unsetenv("ADALINK_OUTPUT_ROOT");
}

TEST(Report, TablesAndChecks) {
    EXPECT_EQ(group_digits(1048576), "1,048,576");
    EXPECT_EQ(group_digits(999), "999");
    EXPECT_EQ(group_digits(0), "0");
    Table t({"name", "count"});
    t.add({"a,b", Cell(std::uint64_t{1234})});
    t.add({"say \"hi\"", Cell(0.5, 2)});
    EXPECT_EQ(t.csv(), "name,count\n\"a,b\",1234\n\"say \"\"hi\"\"\",0.5\n");
    EXPECT_EQ(t.text(), "    name  count\n--------  -----\n     a,b  1,234\nsay \"hi\"   0.50\n");
    EXPECT_THROW(t.add({"short"}), ContractError);

    CheckList checks;
    checks.add("one", true);
    EXPECT_TRUE(checks.all_passed());
    checks.add("two", false, "why");
    EXPECT_FALSE(checks.all_passed());
    EXPECT_EQ(checks.text(), "ok    one\nFAIL  two (why)\n");
}

TEST(Tool, ParamsPrintsThePaperScaleCount) {
    Scratch dir("params");
    const auto r = run_tool("params --set model.d_emb=4096 --set adapter.rank=64", dir.path());
    EXPECT_EQ(r.status, 0) << r.output;
    EXPECT_NE(r.output.find("adalink modality  adalink    64  modality    1,048,576"), std::string::npos) << r.output;
    EXPECT_TRUE(fs::exists(dir.path() / "experiment" / "resolved" / "params.yaml"));
    const auto csv = read_file(dir.path() / "experiment" / "params.csv");
    EXPECT_NE(csv.find("adalink modality,adalink,64,modality,1048576,0,1,1048576"), std::string::npos) << csv;
}

TEST(Tool, ConfigErrorsExitNonZero) {
    Scratch dir("errors");
    std::ofstream(dir.path() / "bad.yaml") << "train:\n  batch_size: many\n";
    const auto r = run_tool("train -c '" + (dir.path() / "bad.yaml").string() + "'", dir.path());
    EXPECT_EQ(r.status, 2);
    EXPECT_NE(r.output.find("bad.yaml:2:15: field 'train.batch_size'"), std::string::npos) << r.output;
    EXPECT_NE(run_tool("no-such-command", dir.path()).status, 0);
}

TEST(Tool, TrainTwiceGivesIdenticalOutputs) {
    Scratch dir("train");
    const fs::path cfg = dir.path() / "small.yaml";
    std::ofstream(cfg) << kSmall;
    const auto first = run_tool("train -c '" + cfg.string() + "'", dir.path() / "a");
    ASSERT_EQ(first.status, 0) << first.output;
    const auto second = run_tool("train -c '" + cfg.string() + "'", dir.path() / "b");
    ASSERT_EQ(second.status, 0) << second.output;
    for (const char *f : {"metrics.csv", "loss.csv", "log.jsonl", "registry/index.tsv", "registry/vqa.adlk",
                          "registry/copy.adlk", "backbone.adlk", "resolved/train.yaml"}) {
        const auto a = read_file(dir.path() / "a" / "small" / f);
        EXPECT_FALSE(a.empty()) << f;
        EXPECT_EQ(a, read_file(dir.path() / "b" / "small" / f)) << f;
    }
    // A rerun in place reuses the cached backbone and reproduces the metrics.
    const auto metrics = read_file(dir.path() / "a" / "small" / "metrics.csv");
    const auto third = run_tool("train -c '" + cfg.string() + "'", dir.path() / "a");
    ASSERT_EQ(third.status, 0) << third.output;
    EXPECT_NE(third.output.find("reusing"), std::string::npos);
    EXPECT_EQ(read_file(dir.path() / "a" / "small" / "metrics.csv"), metrics);

    const auto eval = run_tool("eval -c '" + cfg.string() + "'", dir.path() / "a");
    EXPECT_EQ(eval.status, 0) << eval.output;
    const auto bake = run_tool("bake -c '" + cfg.string() + "'", dir.path() / "a");
    EXPECT_EQ(bake.status, 0) << bake.output;
    EXPECT_NE(bake.output.find("ok    baked 'vqa' matches the live adapter bit for bit"), std::string::npos);
    const auto ls = run_tool("registry ls -c '" + cfg.string() + "'", dir.path() / "a");
    EXPECT_EQ(ls.status, 0) << ls.output;
    EXPECT_NE(ls.output.find("2 task(s)"), std::string::npos) << ls.output;
}
