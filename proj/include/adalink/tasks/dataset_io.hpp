#pragma once

#include <filesystem>
#include <iosfwd>

#include "adalink/tasks/tasks.hpp"

namespace adalink::tasks {

// Line-delimited JSON: a header object followed by one record per example,
// all values explicit integer arrays.
void write_dataset(std::ostream &out, const Dataset &dataset);
void write_dataset(const std::filesystem::path &path, const Dataset &dataset);

// Throws ConfigError on malformed input, naming the line.
Dataset read_dataset(std::istream &in, const model::ModelConfig &config);
Dataset read_dataset(const std::filesystem::path &path, const model::ModelConfig &config);

}  // namespace adalink::tasks
