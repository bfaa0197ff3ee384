// adalink: command-line front end. Every command reads one YAML experiment
// file (-c), applies --set overrides, writes its outputs under
// <output_root>/<name> and exits 0 only if all of its checks passed.

#include <CLI11.hpp>

#include <functional>
#include <iostream>
#include <optional>

#include "adalink/errors.hpp"
#include "commands.hpp"

namespace {

constexpr int kChecksFailed = 1;
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

}  // namespace

int main(int argc, char **argv) {
    using namespace adalink;
    CLI::App app{"Parameter-efficient adapters on a small frozen multimodal encoder-decoder."};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("-c,--config", config_path, "Experiment YAML file (defaults apply when omitted)")
        ->check(CLI::ExistingFile);
    app.add_option("--set", overrides, "Override one field, e.g. --set adapter.rank=16 (repeatable)");

    using Command = std::function<cli::CheckList(const cli::ExperimentConfig &)>;
    std::optional<Command> command;
    std::string command_name;
    auto simple = [&](const char *name, const char *help, cli::CheckList (*fn)(const cli::ExperimentConfig &,
                                                                                std::ostream &)) {
        app.add_subcommand(name, help)->callback([&, name, fn] {
            command_name = name;
            command = [fn](const cli::ExperimentConfig &cfg) { return fn(cfg, std::cout); };
        });
    };
    simple("gen-tasks", "Generate, verify and write the configured task datasets", cli::gen_tasks);
    simple("train", "Train the configured adapter on the configured tasks; writes a registry", cli::train);
    simple("eval", "Evaluate every task through the registry", cli::eval);
    simple("params", "Trainable parameter counts per method", cli::params);
    simple("flops", "Added compute per method across encoder depths", cli::flops);
    simple("ablate-rank", "Train AdaLink at each rank in ablation.ranks", cli::ablate_rank);
    simple("ablate-modality", "Modality-split vs unified AdaLink at a matched budget", cli::ablate_modality);
    simple("bake", "Fold text AdaLink modules into per-task vocabulary tables", cli::bake);

    auto *reg = app.add_subcommand("registry", "Inspect or edit an adapter registry directory");
    reg->require_subcommand(1);
    std::string reg_dir, task_id, checkpoint;
    reg->add_option("--dir", reg_dir, "Registry directory (default: <output>/registry)");
    auto *ls = reg->add_subcommand("ls", "List registered tasks");
    ls->callback([&] {
        command_name = "registry ls";
        command = [&](const cli::ExperimentConfig &cfg) { return cli::registry_ls(cfg, reg_dir, std::cout); };
    });
    auto *add = reg->add_subcommand("add", "Register (or replace) a task's adapter checkpoint");
    add->add_option("--task", task_id, "Task id")->required();
    add->add_option("--checkpoint", checkpoint, "Adapter checkpoint file")->required()->check(CLI::ExistingFile);
    add->callback([&] {
        command_name = "registry add";
        command = [&](const cli::ExperimentConfig &cfg) {
            return cli::registry_add(cfg, reg_dir, task_id, checkpoint, std::cout);
        };
    });
    auto *rm = reg->add_subcommand("rm", "Remove a task");
    rm->add_option("--task", task_id, "Task id")->required();
    rm->callback([&] {
        command_name = "registry rm";
        command = [&](const cli::ExperimentConfig &cfg) { return cli::registry_rm(cfg, reg_dir, task_id, std::cout); };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        return app.exit(e);
    }

    try {
        const auto cfg = cli::load_experiment(
            config_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_path), overrides);
        const cli::CheckList checks = (*command)(cfg);
        std::cout << "checks (" << command_name << ")\n" << checks.text();
        if (!checks.all_passed()) {
            std::cerr << "adalink: one or more checks failed\n";
            return kChecksFailed;
        }
        return 0;
    } catch (const ConfigError &e) {
        std::cerr << "adalink: config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::exception &e) {
        std::cerr << "adalink: " << e.what() << '\n';
        return kRuntimeError;
    }
}
