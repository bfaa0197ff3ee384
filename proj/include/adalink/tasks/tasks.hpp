#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "adalink/model/batch.hpp"
#include "adalink/model/config.hpp"

namespace adalink::tasks {

enum class TaskKind { kCaption, kVqa, kTextCls, kTextCopy };
enum class ClsRule { kPresence, kParity };
enum class QuestionAttr { kColor = 0, kShape = 1, kBoth = 2 };

std::string to_string(TaskKind kind);
std::string to_string(ClsRule rule);
TaskKind parse_task_kind(const std::string &name);
ClsRule parse_cls_rule(const std::string &name);

// Token layout shared by every synthetic task:
//
//   0..3    pad, bos, eos, unk
//   4..9    question words, two sets of {color, shape, both}
//   10..12  caption, copy, classify commands
//   13..14  yes, no
//   then    one position token per patch, the color words, the shape words
//   rest    free tokens for the text-only tasks
struct Vocabulary {
    static constexpr int kQuestionBase = 4;
    static constexpr int kCaptionCmd = 10;
    static constexpr int kCopyCmd = 11;
    static constexpr int kClassifyCmd = 12;
    static constexpr int kYes = 13;
    static constexpr int kNo = 14;
    static constexpr int kPositionBase = 15;

    std::size_t vocab_size = 0;
    std::size_t n_patches = 0;
    std::size_t n_colors = 4;
    std::size_t n_shapes = 4;

    // Throws ConfigError when the layout does not fit the model vocabulary.
    static Vocabulary create(const model::ModelConfig &config, std::size_t n_colors = 4, std::size_t n_shapes = 4);

    int question(int set, QuestionAttr attr) const { return kQuestionBase + 3 * set + static_cast<int>(attr); }
    int position(std::size_t k) const { return kPositionBase + static_cast<int>(k); }
    int color(std::size_t c) const { return position(n_patches) + static_cast<int>(c); }
    int shape(std::size_t s) const { return color(n_colors) + static_cast<int>(s); }
    int first_free() const { return shape(n_shapes); }
    std::size_t n_free() const { return vocab_size - static_cast<std::size_t>(first_free()); }
    // [color one-hot | shape one-hot | occupied]
    std::size_t feature_dim() const { return n_colors + n_shapes + 1; }
};

struct TaskDef {
    std::string task_id;
    TaskKind kind = TaskKind::kVqa;
    std::uint64_t seed = 0;
    std::size_t n_train = 512;
    std::size_t n_val = 128;

    // Image tasks.
    std::size_t n_objects = 4;
    // Which question words mm_vqa uses (0 or 1).
    int question_set = 0;
    // 0: [color | shape | occupied]; 1: [shape | color | occupied].
    int pattern_family = 0;

    // Text tasks. The free-token slice is [first_free + slice_offset,
    // first_free + slice_offset + slice_width); width 0 takes the rest.
    ClsRule rule = ClsRule::kPresence;
    std::size_t slice_offset = 0;
    std::size_t slice_width = 0;
    // Index of the marked token within the slice.
    std::size_t marked = 0;

    bool multimodal() const { return kind == TaskKind::kCaption || kind == TaskKind::kVqa; }
    std::map<std::string, std::string> to_map() const;
    static TaskDef from_map(const std::map<std::string, std::string> &values);

    bool operator==(const TaskDef &) const = default;
};

// One example; `patches` is n_patches × feature_dim row-major (empty for
// text tasks) and `answer` excludes the eos.
struct Example {
    std::vector<int> text;
    std::vector<double> patches;
    std::vector<int> answer;

    bool operator==(const Example &) const = default;
};

struct Dataset {
    TaskDef def;
    Vocabulary vocab;
    std::vector<Example> train;
    std::vector<Example> val;
    // Hash of the task definition together with the model dimensions that
    // shape the data.
    std::string config_hash;
};

std::string config_hash(const TaskDef &def, const model::ModelConfig &config);

// Pure function of (def, config). Train and val never share an example.
Dataset generate(const TaskDef &def, const model::ModelConfig &config);

// Recomputes the answer from the inputs alone by decoding patch features and
// replaying the task rule.
std::vector<int> reference_answer(const TaskDef &def, const Vocabulary &vocab, const Example &example);

struct VerifyReport {
    std::size_t checked = 0;
    std::size_t mismatches = 0;
    bool ok() const { return mismatches == 0; }
};
VerifyReport verify(const Dataset &dataset);

// Targets are answer + eos, padded to config.max_target_len.
model::MultimodalBatch make_batch(const Dataset &dataset, std::span<const Example> examples,
                                  const model::ModelConfig &config);
model::MultimodalBatch make_batch(const Dataset &dataset, const std::vector<Example> &split,
                                  std::span<const std::size_t> indices, const model::ModelConfig &config);

// Seeded epoch-wise shuffling over [0, n).
class BatchSampler {
   public:
    BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);
    std::vector<std::size_t> next();

   private:
    void reshuffle();

    std::size_t n_;
    std::size_t batch_size_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

// Held-out modality ablation: majority answers are fitted on train from one
// modality and scored on val.
struct AblationReport {
    double text_only_accuracy = 0.0;
    double image_only_accuracy = 0.0;
    // Expected accuracy of a uniform guess over each question's answer space.
    double chance = 0.0;
    std::size_t evaluated = 0;
};
AblationReport modality_ablation(const Dataset &dataset);

}  // namespace adalink::tasks
