#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "adalink/errors.hpp"
#include "adalink/peft/accounting.hpp"
#include "adalink/peft/adapters.hpp"
#include "test_util.hpp"

using namespace adalink;
using namespace adalink::peft;
using adalink::testing::random_tensor;
using adalink::testing::to_vector;

namespace {

model::ModelConfig wide(std::size_t d_emb) {
    model::ModelConfig c;
    c.d_emb = d_emb;
    c.n_heads = 1;
    return c;
}

AdapterSpec adalink_spec(std::size_t rank, AdaLinkScope scope = AdaLinkScope::kModality) {
    AdapterSpec s;
    s.kind = AdapterKind::kAdaLink;
    s.rank = rank;
    s.scope = scope;
    return s;
}

void randomize(AdaLinkModule &m, std::mt19937_64 &rng) {
    m.down = random_tensor(m.down.shape(), rng);
    m.up = random_tensor(m.up.shape(), rng);
}

}  // namespace

TEST(AdaLink, ZeroInitIsIdentity) {
    Rng rng(1);
    std::mt19937_64 data_rng(2);
    AdaLinkModule m = AdaLinkModule::create(16, 4, false, rng);
    Tensor e = random_tensor({7, 16}, data_rng);
    EXPECT_EQ(to_vector(adalink_forward(e, m)), to_vector(e));
    for (double v : m.up.data()) EXPECT_EQ(v, 0.0);
    AdaLinkModule relu = AdaLinkModule::create(16, 4, true, rng);
    EXPECT_EQ(to_vector(adalink_forward(e, relu)), to_vector(e));
}

TEST(AdaLink, HandComputedLinearCase) {
    AdaLinkModule m{Tensor({2, 1}, {1, 1}), Tensor({1, 2}, {0.5, -0.5}), false};
    Tensor e({1, 2}, {1, 2});
    EXPECT_EQ(to_vector(adalink_forward(e, m)), (std::vector<double>{2.5, 0.5}));
}

TEST(AdaLink, NonlinearVariantUsesRelu) {
    AdaLinkModule m{Tensor({2, 1}, {-1, -1}), Tensor({1, 2}, {0.5, -0.5}), true};
    Tensor e({1, 2}, {1, 2});
    EXPECT_EQ(to_vector(adalink_forward(e, m)), (std::vector<double>{1, 2}));  // relu(-3) = 0
}

TEST(AdaLink, WidthMismatch) {
    Rng rng(1);
    AdaLinkModule m = AdaLinkModule::create(8, 2, false, rng);
    EXPECT_THROW(adalink_forward(Tensor({3, 6}), m), DimensionError);
}

// Singular values of the residual, computed independently with Eigen.
TEST(AdaLink, ResidualRankIsAtMostR) {
    std::mt19937_64 rng(3);
    for (bool nonlinear : {false, true}) {
        for (std::size_t r : {1u, 2u, 3u}) {
            AdaLinkModule m{random_tensor({12, r}, rng), random_tensor({r, 12}, rng), nonlinear};
            Tensor e = random_tensor({10, 12}, rng);
            Tensor out = adalink_forward(e, m);
            Eigen::MatrixXd diff(10, 12);
            for (int i = 0; i < 10; ++i)
                for (int j = 0; j < 12; ++j) diff(i, j) = out.at(i, j) - e.at(i, j);
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(diff);
            const auto &sv = svd.singularValues();
            EXPECT_GT(sv(static_cast<int>(r) - 1), 1e-6);
            for (int k = static_cast<int>(r); k < sv.size(); ++k) EXPECT_LT(sv(k), 1e-9) << "r=" << r;
        }
    }
}

TEST(AdaLink, LinearVariantIsHomogeneous) {
    std::mt19937_64 rng(4);
    AdaLinkModule m{random_tensor({6, 2}, rng), random_tensor({2, 6}, rng), false};
    Tensor e = random_tensor({5, 6}, rng);
    for (double alpha : {-2.5, 0.0, 0.3, 7.0}) {
        Tensor lhs = adalink_forward(tensor::scale(e, alpha), m);
        Tensor rhs = tensor::scale(adalink_forward(e, m), alpha);
        for (std::size_t i = 0; i < lhs.size(); ++i) {
            EXPECT_NEAR(lhs.data()[i], rhs.data()[i], 1e-12 * std::max(1.0, std::abs(rhs.data()[i])));
        }
    }
}

TEST(AdaLink, ModalityIsolation) {
    Rng rng(5);
    std::mt19937_64 data_rng(6);
    const auto config = wide(8);
    AdapterSet set = AdapterSet::create(adalink_spec(2), config, rng);
    randomize(*set.image, data_rng);
    randomize(*set.text, data_rng);
    Tensor img = random_tensor({4, 8}, data_rng);
    Tensor txt = random_tensor({3, 8}, data_rng);
    auto before = apply_multimodal_adalink(img, txt, set);
    set.text->up.mutable_data()[0] += 1.0;
    auto after = apply_multimodal_adalink(img, txt, set);
    EXPECT_EQ(to_vector(*before.image), to_vector(*after.image));
    EXPECT_NE(to_vector(*before.text), to_vector(*after.text));
}

TEST(AdaLink, FreshModulesLeaveBothModalitiesUnchanged) {
    Rng rng(7);
    std::mt19937_64 data_rng(8);
    Tensor img = random_tensor({4, 8}, data_rng);
    Tensor txt = random_tensor({3, 8}, data_rng);
    for (auto scope : {AdaLinkScope::kModality, AdaLinkScope::kUnified}) {
        AdapterSet set = AdapterSet::create(adalink_spec(2, scope), wide(8), rng);
        auto out = apply_multimodal_adalink(img, txt, set);
        EXPECT_EQ(to_vector(*out.image), to_vector(img));
        EXPECT_EQ(to_vector(*out.text), to_vector(txt));
    }
}

TEST(AdaLink, UnifiedModuleServesBothModalities) {
    Rng rng(9);
    std::mt19937_64 data_rng(10);
    AdapterSet set = AdapterSet::create(adalink_spec(2, AdaLinkScope::kUnified), wide(8), rng);
    randomize(*set.unified, data_rng);
    Tensor img = random_tensor({2, 8}, data_rng);
    Tensor txt = random_tensor({2, 8}, data_rng);
    auto out = apply_multimodal_adalink(img, txt, set);
    EXPECT_EQ(to_vector(*out.image), to_vector(adalink_forward(img, *set.unified)));
    EXPECT_EQ(to_vector(*out.text), to_vector(adalink_forward(txt, *set.unified)));
}

TEST(AdaLink, MissingModuleForPresentModality) {
    Rng rng(11);
    AdapterSet set = AdapterSet::create(adalink_spec(2), wide(8), rng);
    set.image.reset();
    Tensor img({2, 8});
    Tensor txt({2, 8});
    EXPECT_THROW(apply_multimodal_adalink(img, txt, set), ConfigError);
    // An absent modality needs no module.
    EXPECT_NO_THROW(apply_multimodal_adalink(std::nullopt, txt, set));
    // A text-only scope leaves images untouched.
    AdapterSet text_only = AdapterSet::create(adalink_spec(2, AdaLinkScope::kText), wide(8), rng);
    auto out = apply_multimodal_adalink(img, txt, text_only);
    EXPECT_TRUE(out.image->same_node(img));
}

TEST(LoRA, ZeroBAndZeroScaleGiveBaseLayer) {
    std::mt19937_64 rng(12);
    Tensor x = random_tensor({4, 3}, rng);
    Tensor w = random_tensor({3, 5}, rng, 1.0, false);
    Tensor b = random_tensor({5}, rng, 1.0, false);
    Tensor base = tensor::add_broadcast_rows(tensor::matmul(x, w), b);
    Rng init(1);
    LoRAModule fresh = LoRAModule::create(3, 5, 2, 1.0, init);
    EXPECT_EQ(to_vector(lora_linear(x, w, b, fresh)), to_vector(base));
    LoRAModule off{random_tensor({3, 2}, rng), random_tensor({2, 5}, rng), 0.0};
    EXPECT_EQ(to_vector(lora_linear(x, w, b, off)), to_vector(base));
}

TEST(LoRA, HandComputed) {
    // x = [1, 2]; W = [[1,0],[0,1]]; b = [0.5, -1]; A = [[1],[1]]; B = [[2, 3]].
    // base = [1.5, 1]; (x·A)·B = 3·[2, 3] = [6, 9] -> [7.5, 10].
    Tensor x({1, 2}, {1, 2});
    Tensor w({2, 2}, {1, 0, 0, 1});
    Tensor b({2}, {0.5, -1});
    LoRAModule lora{Tensor({2, 1}, {1, 1}), Tensor({1, 2}, {2, 3}), 1.0};
    EXPECT_EQ(to_vector(lora_linear(x, w, b, lora)), (std::vector<double>{7.5, 10}));
}

TEST(LoRA, BaseWeightsGetNoGradient) {
    std::mt19937_64 rng(13);
    Tensor x = random_tensor({2, 3}, rng, 1.0, false);
    Tensor w = random_tensor({3, 4}, rng, 1.0, true);  // even if marked trainable
    Tensor b = random_tensor({4}, rng, 1.0, true);
    LoRAModule lora{random_tensor({3, 2}, rng), random_tensor({2, 4}, rng), 1.0};
    tensor::sum(lora_linear(x, w, b, lora)).backward();
    EXPECT_FALSE(w.has_grad());
    EXPECT_FALSE(b.has_grad());
    EXPECT_TRUE(lora.a.has_grad());
    EXPECT_TRUE(lora.b.has_grad());
}

TEST(LoRA, ShapeMismatch) {
    Rng init(1);
    LoRAModule lora = LoRAModule::create(3, 5, 2, 1.0, init);
    EXPECT_THROW(lora_linear(Tensor({1, 4}), Tensor({4, 5}), Tensor({5}), lora), DimensionError);
}

TEST(PromptTuning, EffectivePromptAppliesBothReparamLayers) {
    model::ModelConfig config = wide(8);
    std::mt19937_64 rng(14);
    Tensor table = random_tensor({20, 8}, rng, 1.0, false);
    Rng init(2);
    AdapterSpec spec;
    spec.kind = AdapterKind::kPromptTuning;
    AdapterSet set = AdapterSet::create(spec, config, init, &table);
    ASSERT_TRUE(set.prompt);
    EXPECT_EQ(set.prompt->length(), 64u);
    EXPECT_EQ(set.prompt->reparam.size(), 2u);
    EXPECT_EQ(set.prompt->reparam[0].w1.shape(), (tensor::Shape{8, 2}));
    // Fresh reparam layers are identity (w2 = 0); prompt rows come from the table.
    EXPECT_EQ(to_vector(set.prompt->effective_prompt()), to_vector(set.prompt->prompt));
    for (std::size_t r = 0; r < 64; ++r) {
        bool found = false;
        for (std::size_t v = 0; v < 20 && !found; ++v) {
            bool eq = true;
            for (std::size_t c = 0; c < 8; ++c) eq = eq && set.prompt->prompt.at(r, c) == table.at(v, c);
            found = eq;
        }
        EXPECT_TRUE(found);
    }
    // p -> p + relu(p·w1)·w2, twice.
    auto &l0 = set.prompt->reparam[0];
    auto &l1 = set.prompt->reparam[1];
    l0.w2 = random_tensor(l0.w2.shape(), rng);
    l1.w2 = random_tensor(l1.w2.shape(), rng);
    Tensor p = set.prompt->prompt;
    Tensor p1 = tensor::add(p, tensor::matmul(tensor::relu(tensor::matmul(p, l0.w1)), l0.w2));
    Tensor p2 = tensor::add(p1, tensor::matmul(tensor::relu(tensor::matmul(p1, l1.w1)), l1.w2));
    EXPECT_EQ(to_vector(set.prompt->effective_prompt()), to_vector(p2));
}

TEST(AdapterSet, ValidateRejectsWrongWidth) {
    Rng rng(1);
    AdapterSet set = AdapterSet::create(adalink_spec(4), wide(64), rng);
    EXPECT_NO_THROW(set.validate(wide(64)));
    EXPECT_THROW(set.validate(wide(128)), ConfigError);
}

TEST(AdapterSet, TensorsRoundTrip) {
    Rng rng(1);
    auto config = wide(8);
    config.n_enc_layers = 2;
    AdapterSpec spec;
    spec.kind = AdapterKind::kLoRA;
    spec.rank = 2;
    AdapterSet set = AdapterSet::create(spec, config, rng);
    AdapterSet back = AdapterSet::from_tensors(spec, set.tensors());
    ASSERT_EQ(back.lora.size(), 12u);
    auto a = set.tensors();
    auto b = back.tensors();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        EXPECT_EQ(to_vector(a[i].tensor), to_vector(b[i].tensor));
    }
}

TEST(AdapterSpec, MapRoundTripAndHash) {
    AdapterSpec s = adalink_spec(16, AdaLinkScope::kUnified);
    s.dropout_rate = 0.05;
    EXPECT_EQ(AdapterSpec::from_map(s.to_map()), s);
    AdapterSpec t = s;
    t.rank = 8;
    EXPECT_NE(s.hash(), t.hash());
    EXPECT_EQ(s.hash(), AdapterSpec::from_map(s.to_map()).hash());
}

// Published "# params" figures.
TEST(Accounting, ReportedParameterCounts) {
    EXPECT_EQ(count_trainable_params(adalink_spec(64), wide(4096), 1, 2).total(), 1'048'576u);
    EXPECT_EQ(count_trainable_params(adalink_spec(64), wide(2048), 1, 2).total(), 524'288u);
    EXPECT_EQ(count_trainable_params(adalink_spec(4, AdaLinkScope::kText), wide(1024), 1, 1).total(), 8'192u);
    EXPECT_EQ(count_trainable_params(adalink_spec(256, AdaLinkScope::kText), wide(1024), 1, 1).total(), 524'288u);
    EXPECT_EQ(count_trainable_params(adalink_spec(1024, AdaLinkScope::kText), wide(1024), 1, 1).total(), 2'097'152u);
    AdapterSpec pt;
    pt.kind = AdapterKind::kPromptTuning;
    EXPECT_EQ(count_trainable_params(pt, wide(4096)).core, 262'144u);
    EXPECT_EQ(count_trainable_params(pt, wide(2048)).core, 131'072u);
    // Reparameterization reported separately: 2 layers · 2 · d · d/4.
    EXPECT_EQ(count_trainable_params(pt, wide(2048)).reparam, 2u * 2 * 2048 * 512);
}

TEST(Accounting, PerTaskAndUnifiedBudgets) {
    const auto c = wide(1024);
    EXPECT_EQ(count_trainable_params(adalink_spec(4, AdaLinkScope::kText), c, 8, 1).total(), 8u * 8'192);
    AdapterSpec shared = adalink_spec(4, AdaLinkScope::kText);
    shared.per_task = false;
    EXPECT_EQ(count_trainable_params(shared, c, 8, 1).total(), 8'192u);
    EXPECT_EQ(count_trainable_params(adalink_spec(128, AdaLinkScope::kUnified), wide(4096)).total(),
              count_trainable_params(adalink_spec(64, AdaLinkScope::kModality), wide(4096)).total());
}

TEST(Accounting, LoRACountsAdaptedEncoderLinears) {
    model::ModelConfig c = wide(16);
    c.d_ff = 32;
    c.n_enc_layers = 3;
    AdapterSpec s;
    s.kind = AdapterKind::kLoRA;
    s.rank = 4;
    // Per layer: 4 attention projections of 4·(16+16) plus MLP 4·(16+32) twice.
    EXPECT_EQ(count_trainable_params(s, c).total(), 3u * (4 * 4 * 32 + 2 * 4 * 48));
}

TEST(Accounting, FlopsAdded) {
    model::ModelConfig c = wide(64);
    EXPECT_EQ(flops_added(adalink_spec(4), 100, c), 51'200u);

    model::ModelConfig deep = c;
    std::uint64_t first = 0;
    for (std::size_t layers : {2u, 8u}) {
        deep.n_enc_layers = layers;
        deep.n_dec_layers = layers;
        deep.n_heads = layers;
        deep.d_ff = 32 * layers;
        const auto macs = flops_added(adalink_spec(4), 100, deep);
        if (!first) first = macs;
        EXPECT_EQ(macs, first);
    }

    AdapterSpec pt;
    pt.kind = AdapterKind::kPromptTuning;
    model::ModelConfig l2 = c, l4 = c;
    l2.n_enc_layers = l2.n_dec_layers = 2;
    l4.n_enc_layers = l4.n_dec_layers = 4;
    EXPECT_EQ(flops_added(pt, 100, l4), 2 * flops_added(pt, 100, l2));
    // Quadratic in length: the increment itself grows with N.
    EXPECT_GT(flops_added(pt, 200, l2) - flops_added(pt, 100, l2), 0u);
    EXPECT_GT(flops_added(pt, 200, l2), flops_added(pt, 100, l2));

    AdapterSpec lora;
    lora.kind = AdapterKind::kLoRA;
    lora.rank = 2;
    model::ModelConfig one = c;
    one.n_enc_layers = 1;
    one.d_ff = 128;
    EXPECT_EQ(flops_added(lora, 10, one), 10u * 2 * (4 * 128 + (64 + 128) * 2));
}
