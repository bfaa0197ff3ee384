#include "adalink/tasks/tasks.hpp"

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <numeric>
#include <set>
#include <tuple>

#include "adalink/errors.hpp"
#include "adalink/tensor/tensor.hpp"

namespace adalink::tasks {

namespace {

constexpr std::size_t kMaxAttemptsPerExample = 200;

std::size_t parse_size(const std::map<std::string, std::string> &values, const std::string &key) {
    auto it = values.find(key);
    if (it == values.end()) throw ConfigError("task definition is missing field '" + key + "'");
    std::size_t out = 0;
    const auto &s = it->second;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw ConfigError("task definition field '" + key + "' is not an unsigned integer: " + s);
    }
    return out;
}

std::uint32_t crc_of(const std::string &s) {
    return static_cast<std::uint32_t>(
        crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef *>(s.data()), static_cast<uInt>(s.size())));
}

std::mt19937_64 task_rng(const TaskDef &def) {
    std::seed_seq seq{static_cast<std::uint32_t>(def.seed), static_cast<std::uint32_t>(def.seed >> 32),
                      crc_of(def.task_id)};
    return std::mt19937_64(seq);
}

std::size_t uniform(std::mt19937_64 &rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

struct Slice {
    int first = 0;
    std::size_t width = 0;
    int marked = 0;
};

Slice token_slice(const TaskDef &def, const Vocabulary &vocab) {
    const std::size_t free = vocab.n_free();
    if (def.slice_offset >= free) {
        throw ConfigError("task '" + def.task_id + "': slice_offset " + std::to_string(def.slice_offset) +
                          " leaves no free tokens (" + std::to_string(free) + " available)");
    }
    Slice s;
    s.first = vocab.first_free() + static_cast<int>(def.slice_offset);
    s.width = def.slice_width ? def.slice_width : free - def.slice_offset;
    if (def.slice_offset + s.width > free) {
        throw ConfigError("task '" + def.task_id + "': token slice runs past the vocabulary");
    }
    if (def.marked >= s.width) {
        throw ConfigError("task '" + def.task_id + "': marked index " + std::to_string(def.marked) +
                          " outside a slice of width " + std::to_string(s.width));
    }
    s.marked = s.first + static_cast<int>(def.marked);
    return s;
}

struct Object {
    std::size_t color = 0;
    std::size_t shape = 0;
};

std::size_t color_offset(const TaskDef &def, const Vocabulary &vocab) {
    return def.pattern_family == 1 ? vocab.n_shapes : 0;
}

std::size_t shape_offset(const TaskDef &def, const Vocabulary &vocab) {
    return def.pattern_family == 1 ? 0 : vocab.n_colors;
}

// Random scene: `n_objects` distinct occupied patches.
std::vector<std::optional<Object>> random_scene(const TaskDef &def, const Vocabulary &vocab, std::mt19937_64 &rng) {
    std::vector<std::size_t> cells(vocab.n_patches);
    std::iota(cells.begin(), cells.end(), 0);
    std::shuffle(cells.begin(), cells.end(), rng);
    std::vector<std::optional<Object>> scene(vocab.n_patches);
    for (std::size_t i = 0; i < def.n_objects; ++i) {
        const std::size_t c = uniform(rng, vocab.n_colors);
        const std::size_t s = uniform(rng, vocab.n_shapes);
        scene[cells[i]] = Object{c, s};
    }
    return scene;
}

std::vector<double> encode_scene(const std::vector<std::optional<Object>> &scene, const TaskDef &def,
                                 const Vocabulary &vocab) {
    const std::size_t F = vocab.feature_dim();
    std::vector<double> out(scene.size() * F, 0.0);
    for (std::size_t p = 0; p < scene.size(); ++p) {
        if (!scene[p]) continue;
        double *row = out.data() + p * F;
        row[color_offset(def, vocab) + scene[p]->color] = 1.0;
        row[shape_offset(def, vocab) + scene[p]->shape] = 1.0;
        row[F - 1] = 1.0;
    }
    return out;
}

std::size_t argmax(const double *v, std::size_t n) {
    return static_cast<std::size_t>(std::max_element(v, v + n) - v);
}

std::vector<std::optional<Object>> decode_scene(const TaskDef &def, const Vocabulary &vocab,
                                                const std::vector<double> &patches) {
    const std::size_t F = vocab.feature_dim();
    if (patches.size() != vocab.n_patches * F) {
        throw DimensionError("example has " + std::to_string(patches.size()) + " patch features, expected " +
                             std::to_string(vocab.n_patches * F));
    }
    std::vector<std::optional<Object>> scene(vocab.n_patches);
    for (std::size_t p = 0; p < vocab.n_patches; ++p) {
        const double *row = patches.data() + p * F;
        if (row[F - 1] != 1.0) continue;
        scene[p] = Object{argmax(row + color_offset(def, vocab), vocab.n_colors),
                          argmax(row + shape_offset(def, vocab), vocab.n_shapes)};
    }
    return scene;
}

std::vector<int> body(const Example &ex) {
    std::vector<int> out;
    for (std::size_t i = 1; i < ex.text.size() && ex.text[i] != model::kPad; ++i) out.push_back(ex.text[i]);
    return out;
}

bool cls_label(const TaskDef &def, const Slice &slice, std::span<const int> tokens) {
    const auto n = std::count(tokens.begin(), tokens.end(), slice.marked);
    return def.rule == ClsRule::kPresence ? n > 0 : n % 2 == 1;
}

std::vector<int> padded(std::vector<int> tokens, std::size_t len) {
    tokens.resize(len, model::kPad);
    return tokens;
}

void check_config(const TaskDef &def, const Vocabulary &vocab, const model::ModelConfig &config) {
    auto need = [&](bool ok, const std::string &what) {
        if (!ok) throw ConfigError("task '" + def.task_id + "' (" + to_string(def.kind) + "): " + what);
    };
    need(def.n_train >= 1, "n_train must be >= 1");
    if (def.multimodal()) {
        need(config.patch_feature_dim == vocab.feature_dim(),
             "patch_feature_dim " + std::to_string(config.patch_feature_dim) + " must be " +
                 std::to_string(vocab.feature_dim()) + " (colors + shapes + occupied)");
        need(def.n_objects >= 1, "n_objects must be >= 1");
        need(def.n_objects <= vocab.n_patches, "n_objects " + std::to_string(def.n_objects) +
                                                   " exceeds the " + std::to_string(vocab.n_patches) + " patches");
        need(def.pattern_family == 0 || def.pattern_family == 1, "pattern_family must be 0 or 1");
        need(def.pattern_family == 0 || vocab.n_colors == vocab.n_shapes,
             "pattern_family 1 needs as many colors as shapes");
    }
    switch (def.kind) {
        case TaskKind::kVqa:
            need(def.question_set == 0 || def.question_set == 1, "question_set must be 0 or 1");
            need(config.max_text_len >= 2, "max_text_len must be >= 2");
            need(config.max_target_len >= 3, "max_target_len must be >= 3");
            break;
        case TaskKind::kCaption:
            need(config.max_target_len >= 4, "max_target_len must be >= 4");
            break;
        case TaskKind::kTextCopy:
        case TaskKind::kTextCls:
            need(config.max_text_len >= 2, "max_text_len must be >= 2");
            need(config.max_target_len >= 2, "max_target_len must be >= 2");
            token_slice(def, vocab);
            break;
    }
}

Example make_example(const TaskDef &def, const Vocabulary &vocab, const model::ModelConfig &config,
                     std::mt19937_64 &rng) {
    const std::size_t T = config.max_text_len;
    Example ex;
    switch (def.kind) {
        case TaskKind::kVqa: {
            auto scene = random_scene(def, vocab, rng);
            std::vector<std::size_t> occupied;
            for (std::size_t p = 0; p < scene.size(); ++p) {
                if (scene[p]) occupied.push_back(p);
            }
            const std::size_t k = occupied[uniform(rng, occupied.size())];
            const auto attr = static_cast<QuestionAttr>(uniform(rng, 3));
            ex.text = padded({vocab.question(def.question_set, attr), vocab.position(k)}, T);
            ex.patches = encode_scene(scene, def, vocab);
            if (attr != QuestionAttr::kShape) ex.answer.push_back(vocab.color(scene[k]->color));
            if (attr != QuestionAttr::kColor) ex.answer.push_back(vocab.shape(scene[k]->shape));
            break;
        }
        case TaskKind::kCaption: {
            auto scene = random_scene(def, vocab, rng);
            ex.text = padded({Vocabulary::kCaptionCmd}, T);
            ex.patches = encode_scene(scene, def, vocab);
            const auto first = static_cast<std::size_t>(
                std::find_if(scene.begin(), scene.end(), [](const auto &o) { return o.has_value(); }) - scene.begin());
            ex.answer = {vocab.position(first), vocab.color(scene[first]->color), vocab.shape(scene[first]->shape)};
            break;
        }
        case TaskKind::kTextCopy: {
            const Slice slice = token_slice(def, vocab);
            const std::size_t max_len = std::min(T - 1, config.max_target_len - 1);
            const std::size_t len = 1 + uniform(rng, max_len);
            std::vector<int> text{Vocabulary::kCopyCmd};
            for (std::size_t i = 0; i < len; ++i) {
                const int tok = slice.first + static_cast<int>(uniform(rng, slice.width));
                text.push_back(tok);
                ex.answer.push_back(tok);
            }
            ex.text = padded(std::move(text), T);
            break;
        }
        case TaskKind::kTextCls: {
            const Slice slice = token_slice(def, vocab);
            const bool want = uniform(rng, 2) == 0;
            std::vector<int> tokens(T - 1);
            for (std::size_t attempt = 0;; ++attempt) {
                if (attempt == kMaxAttemptsPerExample * 10) {
                    throw ConfigError("task '" + def.task_id + "': cannot sample a balanced label");
                }
                for (auto &t : tokens) t = slice.first + static_cast<int>(uniform(rng, slice.width));
                if (cls_label(def, slice, tokens) == want) break;
            }
            std::vector<int> text{Vocabulary::kClassifyCmd};
            text.insert(text.end(), tokens.begin(), tokens.end());
            ex.text = std::move(text);
            ex.answer = {want ? Vocabulary::kYes : Vocabulary::kNo};
            break;
        }
    }
    return ex;
}

}  // namespace

std::string to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::kCaption:
            return "mm_caption";
        case TaskKind::kVqa:
            return "mm_vqa";
        case TaskKind::kTextCls:
            return "text_cls";
        case TaskKind::kTextCopy:
            return "text_copy";
    }
    return "?";
}

std::string to_string(ClsRule rule) { return rule == ClsRule::kPresence ? "presence" : "parity"; }

TaskKind parse_task_kind(const std::string &name) {
    for (auto k : {TaskKind::kCaption, TaskKind::kVqa, TaskKind::kTextCls, TaskKind::kTextCopy}) {
        if (to_string(k) == name) return k;
    }
    throw ConfigError("unknown task kind '" + name + "' (expected mm_caption, mm_vqa, text_cls or text_copy)");
}

ClsRule parse_cls_rule(const std::string &name) {
    if (name == "presence") return ClsRule::kPresence;
    if (name == "parity") return ClsRule::kParity;
    throw ConfigError("unknown classification rule '" + name + "' (expected presence or parity)");
}

Vocabulary Vocabulary::create(const model::ModelConfig &config, std::size_t n_colors, std::size_t n_shapes) {
    Vocabulary v;
    v.vocab_size = config.vocab_size;
    v.n_patches = config.n_patches;
    v.n_colors = n_colors;
    v.n_shapes = n_shapes;
    if (n_colors < 1 || n_shapes < 1) throw ConfigError("vocabulary needs at least one color and one shape");
    if (static_cast<std::size_t>(v.first_free()) > config.vocab_size) {
        throw ConfigError("vocab_size " + std::to_string(config.vocab_size) + " is too small for " +
                          std::to_string(config.n_patches) + " position tokens, " + std::to_string(n_colors) +
                          " colors and " + std::to_string(n_shapes) + " shapes (need " +
                          std::to_string(v.first_free()) + ")");
    }
    return v;
}

std::map<std::string, std::string> TaskDef::to_map() const {
    return {
        {"task_id", task_id},
        {"kind", to_string(kind)},
        {"seed", std::to_string(seed)},
        {"n_train", std::to_string(n_train)},
        {"n_val", std::to_string(n_val)},
        {"n_objects", std::to_string(n_objects)},
        {"question_set", std::to_string(question_set)},
        {"pattern_family", std::to_string(pattern_family)},
        {"rule", to_string(rule)},
        {"slice_offset", std::to_string(slice_offset)},
        {"slice_width", std::to_string(slice_width)},
        {"marked", std::to_string(marked)},
    };
}

TaskDef TaskDef::from_map(const std::map<std::string, std::string> &values) {
    TaskDef d;
    auto it = values.find("task_id");
    if (it == values.end() || it->second.empty()) throw ConfigError("task definition is missing field 'task_id'");
    d.task_id = it->second;
    it = values.find("kind");
    if (it == values.end()) throw ConfigError("task definition is missing field 'kind'");
    d.kind = parse_task_kind(it->second);
    d.seed = parse_size(values, "seed");
    d.n_train = parse_size(values, "n_train");
    d.n_val = parse_size(values, "n_val");
    d.n_objects = parse_size(values, "n_objects");
    d.question_set = static_cast<int>(parse_size(values, "question_set"));
    d.pattern_family = static_cast<int>(parse_size(values, "pattern_family"));
    it = values.find("rule");
    if (it == values.end()) throw ConfigError("task definition is missing field 'rule'");
    d.rule = parse_cls_rule(it->second);
    d.slice_offset = parse_size(values, "slice_offset");
    d.slice_width = parse_size(values, "slice_width");
    d.marked = parse_size(values, "marked");
    return d;
}

std::string config_hash(const TaskDef &def, const model::ModelConfig &config) {
    std::string text;
    for (const auto &[k, v] : def.to_map()) text += k + "=" + v + "\n";
    text += "vocab_size=" + std::to_string(config.vocab_size) + "\n";
    text += "n_patches=" + std::to_string(config.n_patches) + "\n";
    text += "patch_feature_dim=" + std::to_string(config.patch_feature_dim) + "\n";
    text += "max_text_len=" + std::to_string(config.max_text_len) + "\n";
    text += "max_target_len=" + std::to_string(config.max_target_len) + "\n";
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", crc_of(text));
    return buf;
}

Dataset generate(const TaskDef &def, const model::ModelConfig &config) {
    Dataset ds;
    ds.def = def;
    ds.vocab = Vocabulary::create(config);
    ds.config_hash = config_hash(def, config);
    check_config(def, ds.vocab, config);

    auto rng = task_rng(def);
    const std::size_t total = def.n_train + def.n_val;
    std::set<std::tuple<std::vector<int>, std::vector<double>, std::vector<int>>> seen;
    std::vector<Example> all;
    all.reserve(total);
    std::size_t attempts = 0;
    while (all.size() < total) {
        if (++attempts > kMaxAttemptsPerExample * total) {
            throw ConfigError("task '" + def.task_id + "': only " + std::to_string(all.size()) +
                              " distinct examples found, " + std::to_string(total) + " requested");
        }
        Example ex = make_example(def, ds.vocab, config, rng);
        if (seen.emplace(ex.text, ex.patches, ex.answer).second) all.push_back(std::move(ex));
    }
    ds.train.assign(std::make_move_iterator(all.begin()), std::make_move_iterator(all.begin() + def.n_train));
    ds.val.assign(std::make_move_iterator(all.begin() + def.n_train), std::make_move_iterator(all.end()));
    return ds;
}

std::vector<int> reference_answer(const TaskDef &def, const Vocabulary &vocab, const Example &ex) {
    if (ex.text.empty()) throw ContractError("example has no text");
    switch (def.kind) {
        case TaskKind::kVqa: {
            const int q = ex.text[0] - vocab.question(def.question_set, QuestionAttr::kColor);
            if (q < 0 || q > 2) throw ContractError("token " + std::to_string(ex.text[0]) + " is not a question word");
            const int k = ex.text.size() > 1 ? ex.text[1] - vocab.position(0) : -1;
            if (k < 0 || k >= static_cast<int>(vocab.n_patches)) throw ContractError("question has no position");
            const auto scene = decode_scene(def, vocab, ex.patches);
            const auto &obj = scene[static_cast<std::size_t>(k)];
            if (!obj) throw ContractError("question asks about empty patch " + std::to_string(k));
            std::vector<int> out;
            const auto attr = static_cast<QuestionAttr>(q);
            if (attr != QuestionAttr::kShape) out.push_back(vocab.color(obj->color));
            if (attr != QuestionAttr::kColor) out.push_back(vocab.shape(obj->shape));
            return out;
        }
        case TaskKind::kCaption: {
            const auto scene = decode_scene(def, vocab, ex.patches);
            for (std::size_t p = 0; p < scene.size(); ++p) {
                if (scene[p]) return {vocab.position(p), vocab.color(scene[p]->color), vocab.shape(scene[p]->shape)};
            }
            throw ContractError("caption scene is empty");
        }
        case TaskKind::kTextCopy:
            return body(ex);
        case TaskKind::kTextCls: {
            const Slice slice = token_slice(def, vocab);
            return {cls_label(def, slice, body(ex)) ? Vocabulary::kYes : Vocabulary::kNo};
        }
    }
    return {};
}

VerifyReport verify(const Dataset &dataset) {
    VerifyReport r;
    for (const auto *split : {&dataset.train, &dataset.val}) {
        for (const auto &ex : *split) {
            ++r.checked;
            if (reference_answer(dataset.def, dataset.vocab, ex) != ex.answer) ++r.mismatches;
        }
    }
    return r;
}

model::MultimodalBatch make_batch(const Dataset &dataset, std::span<const Example> examples,
                                  const model::ModelConfig &config) {
    if (examples.empty()) throw DimensionError("cannot batch zero examples");
    model::MultimodalBatch b;
    b.task_id = dataset.def.task_id;
    b.size = examples.size();
    b.text_len = config.max_text_len;
    b.target_len = config.max_target_len;
    const bool image = dataset.def.multimodal();
    std::vector<double> patches;
    for (const auto &ex : examples) {
        if (ex.text.size() > b.text_len) {
            throw DimensionError("example text of length " + std::to_string(ex.text.size()) + " exceeds max_text_len " +
                                 std::to_string(b.text_len));
        }
        if (ex.answer.size() + 1 > b.target_len) {
            throw DimensionError("answer of length " + std::to_string(ex.answer.size()) +
                                 " plus eos exceeds max_target_len " + std::to_string(b.target_len));
        }
        auto text = padded(ex.text, b.text_len);
        b.text_tokens.insert(b.text_tokens.end(), text.begin(), text.end());
        auto target = ex.answer;
        target.push_back(model::kEos);
        target = padded(std::move(target), b.target_len);
        b.target_tokens.insert(b.target_tokens.end(), target.begin(), target.end());
        if (image) patches.insert(patches.end(), ex.patches.begin(), ex.patches.end());
    }
    if (image) {
        b.patches = tensor::Tensor({b.size * config.n_patches, config.patch_feature_dim}, std::move(patches));
    }
    return b;
}

model::MultimodalBatch make_batch(const Dataset &dataset, const std::vector<Example> &split,
                                  std::span<const std::size_t> indices, const model::ModelConfig &config) {
    std::vector<Example> picked;
    picked.reserve(indices.size());
    for (std::size_t i : indices) picked.push_back(split.at(i));
    return make_batch(dataset, picked, config);
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_size_(batch_size), rng_(seed), order_(n) {
    if (n == 0 || batch_size == 0) throw ContractError("batch sampler needs a nonempty split and batch size");
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
}

void BatchSampler::reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
    std::vector<std::size_t> out;
    out.reserve(batch_size_);
    while (out.size() < batch_size_) {
        if (cursor_ == n_) reshuffle();
        out.push_back(order_[cursor_++]);
    }
    return out;
}

AblationReport modality_ablation(const Dataset &dataset) {
    if (!dataset.def.multimodal()) throw ContractError("modality ablation needs an image task");
    using Counts = std::map<std::vector<int>, std::size_t>;
    std::map<std::vector<int>, Counts> by_text;
    std::map<std::vector<double>, Counts> by_image;
    Counts overall;
    for (const auto &ex : dataset.train) {
        ++by_text[ex.text][ex.answer];
        ++by_image[ex.patches][ex.answer];
        ++overall[ex.answer];
    }
    // Ties resolve to the smallest answer, which std::map iterates first.
    auto majority = [](const Counts &c) {
        return std::max_element(c.begin(), c.end(), [](const auto &a, const auto &b) { return a.second < b.second; })
            ->first;
    };
    const auto fallback = majority(overall);
    AblationReport r;
    const auto &v = dataset.vocab;
    for (const auto &ex : dataset.val) {
        auto t = by_text.find(ex.text);
        if ((t == by_text.end() ? fallback : majority(t->second)) == ex.answer) r.text_only_accuracy += 1;
        auto i = by_image.find(ex.patches);
        if ((i == by_image.end() ? fallback : majority(i->second)) == ex.answer) r.image_only_accuracy += 1;
        double space = 1;
        if (dataset.def.kind == TaskKind::kCaption) {
            space = static_cast<double>(v.n_patches * v.n_colors * v.n_shapes);
        } else {
            const int q = ex.text[0] - v.question(dataset.def.question_set, QuestionAttr::kColor);
            space = q == 0 ? v.n_colors : q == 1 ? v.n_shapes : v.n_colors * v.n_shapes;
        }
        r.chance += 1.0 / space;
        ++r.evaluated;
    }
    if (r.evaluated) {
        r.text_only_accuracy /= static_cast<double>(r.evaluated);
        r.image_only_accuracy /= static_cast<double>(r.evaluated);
        r.chance /= static_cast<double>(r.evaluated);
    }
    return r;
}

}  // namespace adalink::tasks
