#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "adalink/errors.hpp"
#include "adalink/tasks/dataset_io.hpp"
#include "adalink/tasks/metrics.hpp"
#include "adalink/tasks/tasks.hpp"

using namespace adalink;
using namespace adalink::tasks;

namespace {

TaskDef def_of(TaskKind kind, const std::string &id = "t", std::uint64_t seed = 7) {
    TaskDef d;
    d.task_id = id;
    d.kind = kind;
    d.seed = seed;
    d.n_train = 200;
    d.n_val = 50;
    return d;
}

std::string bytes(const Dataset &ds) {
    std::ostringstream os;
    write_dataset(os, ds);
    return os.str();
}

}  // namespace

TEST(Vocabulary, DefaultLayout) {
    auto v = Vocabulary::create(model::ModelConfig{});
    EXPECT_EQ(v.question(0, QuestionAttr::kColor), 4);
    EXPECT_EQ(v.question(1, QuestionAttr::kBoth), 9);
    EXPECT_EQ(v.position(0), 15);
    EXPECT_EQ(v.color(0), 24);
    EXPECT_EQ(v.shape(0), 28);
    EXPECT_EQ(v.first_free(), 32);
    EXPECT_EQ(v.n_free(), 32u);
    EXPECT_EQ(v.feature_dim(), 9u);
    model::ModelConfig small;
    small.vocab_size = 20;
    EXPECT_THROW(Vocabulary::create(small), ConfigError);
}

TEST(Generate, SameSeedSameBytes) {
    model::ModelConfig c;
    for (auto kind : {TaskKind::kVqa, TaskKind::kCaption, TaskKind::kTextCopy, TaskKind::kTextCls}) {
        auto a = generate(def_of(kind), c);
        auto b = generate(def_of(kind), c);
        EXPECT_EQ(bytes(a), bytes(b)) << to_string(kind);
        EXPECT_NE(bytes(a), bytes(generate(def_of(kind, "t", 8), c)));
        EXPECT_NE(bytes(a), bytes(generate(def_of(kind, "u", 7), c)));
    }
}

TEST(Generate, VerifierReplaysEveryAnswer) {
    model::ModelConfig c;
    for (auto kind : {TaskKind::kVqa, TaskKind::kCaption, TaskKind::kTextCopy, TaskKind::kTextCls}) {
        for (int family : {0, 1}) {
            auto d = def_of(kind);
            d.pattern_family = family;
            d.question_set = family;
            d.rule = family ? ClsRule::kParity : ClsRule::kPresence;
            auto report = verify(generate(d, c));
            EXPECT_EQ(report.checked, 250u);
            EXPECT_TRUE(report.ok()) << to_string(kind) << " mismatches " << report.mismatches;
        }
    }
}

TEST(Generate, TrainAndValAreDisjoint) {
    model::ModelConfig c;
    for (auto kind : {TaskKind::kVqa, TaskKind::kTextCls}) {
        auto ds = generate(def_of(kind), c);
        for (const auto &v : ds.val) {
            EXPECT_EQ(std::find(ds.train.begin(), ds.train.end(), v), ds.train.end());
        }
    }
}

TEST(Generate, TooManyObjects) {
    auto d = def_of(TaskKind::kVqa);
    d.n_objects = 10;
    EXPECT_THROW(generate(d, model::ModelConfig{}), ConfigError);
    auto small = def_of(TaskKind::kTextCopy);
    small.slice_width = 1;
    small.n_train = 10;  // only three distinct sequences exist
    EXPECT_THROW(generate(small, model::ModelConfig{}), ConfigError);
}

TEST(Vqa, QuestionAboutPatchZero) {
    model::ModelConfig c;
    auto v = Vocabulary::create(c);
    auto d = def_of(TaskKind::kVqa);
    Example ex;
    ex.text = {v.question(0, QuestionAttr::kColor), v.position(0), 0, 0};
    ex.patches.assign(c.n_patches * v.feature_dim(), 0.0);
    ex.patches[3] = 1;      // color 3
    ex.patches[4 + 1] = 1;  // shape 1
    ex.patches[8] = 1;
    EXPECT_EQ(reference_answer(d, v, ex), (std::vector<int>{v.color(3)}));
    ex.text[0] = v.question(0, QuestionAttr::kBoth);
    EXPECT_EQ(reference_answer(d, v, ex), (std::vector<int>{v.color(3), v.shape(1)}));
    ex.text[1] = v.position(1);  // empty patch
    EXPECT_THROW(reference_answer(d, v, ex), ContractError);
}

TEST(Vqa, PatchShuffleWithUpdatedQuestionKeepsAnswer) {
    model::ModelConfig c;
    auto ds = generate(def_of(TaskKind::kVqa), c);
    const std::size_t F = ds.vocab.feature_dim(), P = c.n_patches;
    std::mt19937_64 rng(3);
    for (const auto &ex : ds.val) {
        std::vector<std::size_t> perm(P);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Example moved = ex;
        for (std::size_t p = 0; p < P; ++p) {
            std::copy_n(ex.patches.begin() + p * F, F, moved.patches.begin() + perm[p] * F);
        }
        moved.text[1] = ds.vocab.position(perm[ex.text[1] - ds.vocab.position(0)]);
        EXPECT_EQ(reference_answer(ds.def, ds.vocab, moved), ex.answer);
    }
}

TEST(Vqa, AnswersNeedBothModalities) {
    auto d = def_of(TaskKind::kVqa);
    d.n_train = 4000;
    d.n_val = 1000;
    auto r = modality_ablation(generate(d, model::ModelConfig{}));
    EXPECT_EQ(r.evaluated, 1000u);
    EXPECT_LE(r.text_only_accuracy, r.chance + 0.10) << "chance " << r.chance;
    EXPECT_LE(r.image_only_accuracy, r.chance + 0.10);
}

TEST(Vqa, QuestionSetsUseDisjointWords) {
    model::ModelConfig c;
    auto a = def_of(TaskKind::kVqa);
    auto b = a;
    b.question_set = 1;
    std::set<int> wa, wb;
    for (const auto &ex : generate(a, c).train) wa.insert(ex.text[0]);
    for (const auto &ex : generate(b, c).train) wb.insert(ex.text[0]);
    EXPECT_EQ(wa, (std::set<int>{4, 5, 6}));
    EXPECT_EQ(wb, (std::set<int>{7, 8, 9}));
}

TEST(TextCls, PresenceRule) {
    model::ModelConfig c;
    auto v = Vocabulary::create(c);
    auto d = def_of(TaskKind::kTextCls);
    d.marked = 7;
    const int marked = v.first_free() + 7;
    Example ex{{Vocabulary::kClassifyCmd, 40, marked, 41}, {}, {}};
    EXPECT_EQ(reference_answer(d, v, ex), (std::vector<int>{Vocabulary::kYes}));
    ex.text[2] = 42;
    EXPECT_EQ(reference_answer(d, v, ex), (std::vector<int>{Vocabulary::kNo}));
}

// A bag-of-tokens logistic model fitted by plain gradient descent; if it
// separates the classes the task is learnable from the text alone.
TEST(TextCls, BagOfTokensLogisticFit) {
    model::ModelConfig c;
    auto d = def_of(TaskKind::kTextCls);
    d.n_train = 1000;
    d.n_val = 500;
    d.marked = 5;
    auto ds = generate(d, c);
    const std::size_t V = c.vocab_size;
    auto features = [&](const Example &ex) {
        std::vector<double> x(V, 0.0);
        for (std::size_t i = 1; i < ex.text.size(); ++i) x[ex.text[i]] += 1.0;
        return x;
    };
    std::vector<double> w(V, 0.0);
    double bias = 0.0;
    for (int epoch = 0; epoch < 200; ++epoch) {
        std::vector<double> gw(V, 0.0);
        double gb = 0.0;
        for (const auto &ex : ds.train) {
            const auto x = features(ex);
            double z = bias;
            for (std::size_t j = 0; j < V; ++j) z += w[j] * x[j];
            const double y = ex.answer[0] == Vocabulary::kYes ? 1.0 : 0.0;
            const double err = 1.0 / (1.0 + std::exp(-z)) - y;
            for (std::size_t j = 0; j < V; ++j) gw[j] += err * x[j];
            gb += err;
        }
        for (std::size_t j = 0; j < V; ++j) w[j] -= 0.5 * gw[j] / ds.train.size();
        bias -= 0.5 * gb / ds.train.size();
    }
    std::size_t correct = 0;
    for (const auto &ex : ds.val) {
        const auto x = features(ex);
        double z = bias;
        for (std::size_t j = 0; j < V; ++j) z += w[j] * x[j];
        correct += (z > 0) == (ex.answer[0] == Vocabulary::kYes);
    }
    EXPECT_GE(static_cast<double>(correct) / ds.val.size(), 0.95);
}

TEST(TextCls, LabelsAreBalanced) {
    auto d = def_of(TaskKind::kTextCls);
    d.n_train = 1000;
    auto ds = generate(d, model::ModelConfig{});
    std::size_t yes = 0;
    for (const auto &ex : ds.train) yes += ex.answer[0] == Vocabulary::kYes;
    EXPECT_NEAR(static_cast<double>(yes) / 1000.0, 0.5, 0.05);
}

TEST(Batch, TargetsEndWithEosAndPadsTrail) {
    model::ModelConfig c;
    for (auto kind : {TaskKind::kVqa, TaskKind::kCaption, TaskKind::kTextCopy, TaskKind::kTextCls}) {
        auto ds = generate(def_of(kind), c);
        auto batch = make_batch(ds, std::span<const Example>(ds.train.data(), 16), c);
        EXPECT_EQ(batch.size, 16u);
        EXPECT_EQ(batch.has_image(), ds.def.multimodal());
        if (batch.has_image()) {
            EXPECT_EQ(batch.patches->shape(), (tensor::Shape{16 * c.n_patches, c.patch_feature_dim}));
        }
        for (std::size_t b = 0; b < 16; ++b) {
            std::span<const int> row(batch.target_tokens.data() + b * c.max_target_len, c.max_target_len);
            auto eos = std::find(row.begin(), row.end(), model::kEos);
            ASSERT_NE(eos, row.end());
            EXPECT_EQ(static_cast<std::size_t>(eos - row.begin()), ds.train[b].answer.size());
            for (auto it = eos + 1; it != row.end(); ++it) EXPECT_EQ(*it, model::kPad);
            std::span<const int> text(batch.text_tokens.data() + b * c.max_text_len, c.max_text_len);
            bool seen_pad = false;
            for (int t : text) {
                if (seen_pad) {
                    EXPECT_EQ(t, model::kPad);
                }
                seen_pad = seen_pad || t == model::kPad;
            }
        }
    }
}

TEST(Batch, SamplerIsSeededAndCoversEpochs) {
    BatchSampler a(10, 4, 1), b(10, 4, 1);
    std::vector<std::size_t> seen;
    for (int i = 0; i < 5; ++i) {
        auto x = a.next();
        EXPECT_EQ(x, b.next());
        seen.insert(seen.end(), x.begin(), x.end());
    }
    std::vector<std::size_t> first(seen.begin(), seen.begin() + 10);
    std::sort(first.begin(), first.end());
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(first[i], i);
}

TEST(Metrics, Examples) {
    std::vector<int> g{20, 21, 22, 23, model::kEos};
    EXPECT_EQ(exact_match(g, g), 1);
    std::vector<int> p{20, 21, 9, 23, model::kEos};
    EXPECT_EQ(exact_match(p, g), 0);
    EXPECT_DOUBLE_EQ(token_accuracy(p, g), 0.75);
    std::vector<int> empty{model::kEos, model::kPad};
    EXPECT_EQ(exact_match(empty, std::vector<int>{}), 1);
    EXPECT_DOUBLE_EQ(token_accuracy(std::vector<int>{}, empty), 1.0);
    EXPECT_EQ(exact_match(std::vector<int>{20, model::kEos, 21}, std::vector<int>{20}), 1);
    auto s = score({{20}, {21}}, {{20}, {22}});
    EXPECT_DOUBLE_EQ(s.exact_match, 0.5);
    EXPECT_THROW(score({{20}}, {}), DimensionError);
}

TEST(DatasetIo, RoundTrip) {
    model::ModelConfig c;
    for (auto kind : {TaskKind::kVqa, TaskKind::kTextCls}) {
        auto ds = generate(def_of(kind), c);
        std::istringstream in(bytes(ds));
        auto back = read_dataset(in, c);
        EXPECT_EQ(back.def, ds.def);
        EXPECT_EQ(back.train, ds.train);
        EXPECT_EQ(back.val, ds.val);
        EXPECT_EQ(bytes(back), bytes(ds));
    }
    std::istringstream bad("{\"format\":\"adalink-dataset\",\"version\":9}\n");
    EXPECT_THROW(read_dataset(bad, c), ConfigError);
    auto ds = generate(def_of(TaskKind::kVqa), c);
    model::ModelConfig other = c;
    other.max_text_len = 5;
    std::istringstream in(bytes(ds));
    EXPECT_THROW(read_dataset(in, other), ConfigError);
}
