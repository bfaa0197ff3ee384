#include "adalink/tasks/dataset_io.hpp"

#include <fstream>
#include <istream>
#include <ostream>

#include <json.hpp>

#include "adalink/errors.hpp"

namespace adalink::tasks {

namespace {

using nlohmann::json;

constexpr const char *kFormat = "adalink-dataset";
constexpr int kVersion = 1;

json record(const char *split, const Example &ex) {
    json j;
    j["split"] = split;
    j["text"] = ex.text;
    std::vector<int> patches(ex.patches.begin(), ex.patches.end());
    j["patches"] = patches;
    j["answer"] = ex.answer;
    return j;
}

}  // namespace

void write_dataset(std::ostream &out, const Dataset &dataset) {
    json header;
    header["format"] = kFormat;
    header["version"] = kVersion;
    header["task_id"] = dataset.def.task_id;
    header["seed"] = dataset.def.seed;
    header["config_hash"] = dataset.config_hash;
    header["task"] = dataset.def.to_map();
    out << header.dump() << '\n';
    for (const auto &ex : dataset.train) out << record("train", ex).dump() << '\n';
    for (const auto &ex : dataset.val) out << record("val", ex).dump() << '\n';
}

void write_dataset(const std::filesystem::path &path, const Dataset &dataset) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open '" + path.string() + "' for writing");
    write_dataset(out, dataset);
    if (!out) throw ConfigError("failed writing '" + path.string() + "'");
}

Dataset read_dataset(std::istream &in, const model::ModelConfig &config) {
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string &what) -> ConfigError {
        return ConfigError("dataset line " + std::to_string(line_no) + ": " + what);
    };
    if (!std::getline(in, line)) throw ConfigError("dataset is empty");
    ++line_no;
    Dataset ds;
    try {
        const json header = json::parse(line);
        if (header.at("format") != kFormat) throw fail("not an adalink dataset");
        if (header.at("version") != kVersion) throw fail("unsupported version " + header.at("version").dump());
        ds.def = TaskDef::from_map(header.at("task").get<std::map<std::string, std::string>>());
        ds.config_hash = header.at("config_hash").get<std::string>();
    } catch (const json::exception &e) {
        throw fail(e.what());
    }
    ds.vocab = Vocabulary::create(config);
    if (ds.config_hash != config_hash(ds.def, config)) {
        throw ConfigError("dataset '" + ds.def.task_id + "' was generated for a different configuration (hash " +
                          ds.config_hash + ", expected " + config_hash(ds.def, config) + ")");
    }
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            Example ex;
            ex.text = j.at("text").get<std::vector<int>>();
            const auto p = j.at("patches").get<std::vector<int>>();
            ex.patches.assign(p.begin(), p.end());
            ex.answer = j.at("answer").get<std::vector<int>>();
            const auto split = j.at("split").get<std::string>();
            if (split == "train") {
                ds.train.push_back(std::move(ex));
            } else if (split == "val") {
                ds.val.push_back(std::move(ex));
            } else {
                throw fail("unknown split '" + split + "'");
            }
        } catch (const json::exception &e) {
            throw fail(e.what());
        }
    }
    return ds;
}

Dataset read_dataset(const std::filesystem::path &path, const model::ModelConfig &config) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open dataset '" + path.string() + "'");
    return read_dataset(in, config);
}

}  // namespace adalink::tasks
