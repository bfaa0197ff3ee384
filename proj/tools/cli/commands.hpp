#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "experiment.hpp"
#include "report.hpp"

namespace adalink::cli {

// Every command writes its tables (text and CSV) and a resolved copy of the
// configuration under the experiment's output directory, prints the tables
// to `out`, and returns the invariant checks it ran.
CheckList gen_tasks(const ExperimentConfig &cfg, std::ostream &out);
CheckList train(const ExperimentConfig &cfg, std::ostream &out);
CheckList eval(const ExperimentConfig &cfg, std::ostream &out);
CheckList params(const ExperimentConfig &cfg, std::ostream &out);
CheckList flops(const ExperimentConfig &cfg, std::ostream &out);
CheckList ablate_rank(const ExperimentConfig &cfg, std::ostream &out);
CheckList ablate_modality(const ExperimentConfig &cfg, std::ostream &out);
CheckList bake(const ExperimentConfig &cfg, std::ostream &out);

// An empty `dir` means <output dir>/registry.
CheckList registry_ls(const ExperimentConfig &cfg, const std::filesystem::path &dir, std::ostream &out);
CheckList registry_add(const ExperimentConfig &cfg, const std::filesystem::path &dir, const std::string &task_id,
                       const std::filesystem::path &checkpoint, std::ostream &out);
CheckList registry_rm(const ExperimentConfig &cfg, const std::filesystem::path &dir, const std::string &task_id,
                      std::ostream &out);

}  // namespace adalink::cli
