#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <thread>

#include "adalink/errors.hpp"
#include "adalink/peft/accounting.hpp"
#include "adalink/registry/checkpoint.hpp"
#include "adalink/registry/registry.hpp"
#include "test_util.hpp"

using namespace adalink;
using namespace adalink::registry;
using adalink::model::Backbone;
using adalink::model::MultimodalBatch;
using adalink::peft::AdaLinkScope;
using adalink::peft::AdapterKind;
using adalink::peft::AdapterSet;
using adalink::peft::AdapterSpec;
using adalink::tensor::Mode;
using adalink::tensor::Tensor;
using adalink::testing::random_batch;
using adalink::testing::tiny_config;
using adalink::testing::to_vector;

namespace {

AdapterSpec spec_of(AdapterKind kind, std::size_t rank = 2, AdaLinkScope scope = AdaLinkScope::kModality) {
    AdapterSpec s;
    s.kind = kind;
    s.rank = rank;
    s.scope = scope;
    s.prompt_len = 3;
    return s;
}

void randomize(AdapterSet &set, std::mt19937_64 &rng, double stddev = 0.3) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto &nt : set.tensors()) {
        for (auto &v : nt.tensor.mutable_data()) v = dist(rng);
    }
}

AdapterSet random_adapter(const Backbone &model, AdapterSpec spec, std::uint64_t seed) {
    tensor::Rng init(seed);
    AdapterSet set = AdapterSet::create(spec, model.config(), init, &model.token_embedding());
    std::mt19937_64 rng(seed + 1);
    randomize(set, rng);
    return set;
}

std::string read_file(const std::filesystem::path &p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class TempDir {
   public:
    explicit TempDir(const std::string &name)
        : path_(std::filesystem::temp_directory_path() / ("adalink_" + name + "_" + std::to_string(::getpid()))) {
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path &path() const { return path_; }

   private:
    std::filesystem::path path_;
};

MultimodalBatch task_batch(const model::ModelConfig &config, const std::string &task, std::mt19937_64 &rng) {
    auto b = random_batch(config, 3, rng);
    b.task_id = task;
    return b;
}

}  // namespace

TEST(Checkpoint, SerializeParseSerializeIsStable) {
    auto config = tiny_config();
    Backbone model = Backbone::create(config, 1);
    const std::string bytes = backbone_checkpoint(model).serialize();
    EXPECT_EQ(bytes.substr(0, 8), "ADLKCKPT");
    EXPECT_EQ(Checkpoint::parse(bytes).serialize(), bytes);

    Backbone back = backbone_from_checkpoint(Checkpoint::parse(bytes));
    EXPECT_EQ(back.checksum(), model.checksum());
    EXPECT_EQ(back.config(), config);
}

TEST(Checkpoint, TensorOrderDoesNotAffectBytes) {
    Checkpoint a;
    a.tensors = {{"b", Tensor({1}, std::vector<double>{2.0})}, {"a", Tensor({2}, std::vector<double>{1.0, -0.0})}};
    Checkpoint b;
    b.tensors = {a.tensors[1], a.tensors[0]};
    EXPECT_EQ(a.serialize(), b.serialize());
    auto parsed = Checkpoint::parse(a.serialize());
    ASSERT_EQ(parsed.tensors.size(), 2u);
    EXPECT_EQ(parsed.tensors[0].name, "a");
    EXPECT_TRUE(std::signbit(parsed.tensors[0].tensor.data()[1]));
}

TEST(Checkpoint, FlippedPayloadByteIsAChecksumError) {
    Backbone model = Backbone::create(tiny_config(), 2);
    std::string bytes = backbone_checkpoint(model).serialize();
    // Every byte after the header: either the parse fails structurally or
    // the checksum catches it; it never loads silently.
    for (std::size_t pos : {bytes.size() / 2, bytes.size() - 20, std::size_t{40}}) {
        std::string bad = bytes;
        bad[pos] = static_cast<char>(bad[pos] ^ 0x01);
        EXPECT_THROW(Checkpoint::parse(bad), CheckpointError) << "byte " << pos;
    }
    std::string bad = bytes;
    bad[bytes.size() / 2] ^= 0x10;
    try {
        Checkpoint::parse(bad);
        FAIL();
    } catch (const CheckpointError &e) {
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, TruncationVersionAndMagicAreRejected) {
    Backbone model = Backbone::create(tiny_config(), 3);
    const std::string bytes = backbone_checkpoint(model).serialize();
    for (std::size_t keep : {std::size_t{0}, std::size_t{5}, std::size_t{14}, bytes.size() / 3, bytes.size() - 1}) {
        EXPECT_THROW(Checkpoint::parse(bytes.substr(0, keep)), CheckpointError) << "kept " << keep;
    }

    std::string v2 = bytes;
    v2[8] = 2;
    try {
        Checkpoint::parse(v2);
        FAIL();
    } catch (const CheckpointError &e) {
        EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos) << e.what();
    }

    std::string magic = bytes;
    magic[0] = 'X';
    EXPECT_THROW(Checkpoint::parse(magic), CheckpointError);
    EXPECT_THROW(Checkpoint::load("/nonexistent/file.adlk"), CheckpointError);
}

TEST(Checkpoint, AdapterRoundTripForEveryKind) {
    auto config = tiny_config();
    Backbone model = Backbone::create(config, 4);
    std::mt19937_64 rng(5);
    const auto batch = random_batch(config, 2, rng);
    for (auto kind : {AdapterKind::kAdaLink, AdapterKind::kLoRA, AdapterKind::kPromptTuning, AdapterKind::kFullFT}) {
        AdapterSet set = random_adapter(model, spec_of(kind), 6);
        const auto bytes = adapter_checkpoint(set, config, {{"creation_step", "17"}}).serialize();
        auto loaded = adapter_from_checkpoint(Checkpoint::parse(bytes), config);
        EXPECT_EQ(loaded.adapters.spec(), set.spec());
        EXPECT_EQ(loaded.metadata.at("creation_step"), "17");
        EXPECT_EQ(adapter_checkpoint(loaded.adapters, config, loaded.metadata).serialize(), bytes);
        EXPECT_EQ(to_vector(model.forward(batch, &loaded.adapters, Mode::kEval)),
                  to_vector(model.forward(batch, &set, Mode::kEval)))
            << peft::to_string(kind);
    }
}

TEST(Checkpoint, AdapterForAnotherWidthIsADimensionError) {
    auto small = tiny_config();
    auto wide = small;
    wide.d_emb = 16;
    Backbone model = Backbone::create(small, 7);
    AdapterSet set = random_adapter(model, spec_of(AdapterKind::kAdaLink), 8);
    const auto ckpt = adapter_checkpoint(set, small);
    EXPECT_THROW(adapter_from_checkpoint(ckpt, wide), DimensionError);

    AdapterRegistry reg(wide);
    EXPECT_THROW(reg.add("t", set), DimensionError);
}

TEST(Registry, EmptyAndUnknownRoutesAreErrors) {
    auto config = tiny_config();
    AdapterRegistry reg(config);
    std::mt19937_64 rng(9);
    auto batch = task_batch(config, "A", rng);
    try {
        reg.route(batch);
        FAIL();
    } catch (const RoutingError &e) {
        EXPECT_NE(std::string(e.what()).find("none"), std::string::npos);
    }
    Backbone model = Backbone::create(config, 10);
    reg.add("B", random_adapter(model, spec_of(AdapterKind::kAdaLink), 11));
    reg.add("C", random_adapter(model, spec_of(AdapterKind::kLoRA), 12));
    try {
        reg.route(batch);
        FAIL();
    } catch (const RoutingError &e) {
        EXPECT_NE(std::string(e.what()).find("B, C"), std::string::npos) << e.what();
    }
    batch.task_id = "C";
    EXPECT_EQ(reg.route(batch)->task_id, "C");
    EXPECT_TRUE(reg.remove("C"));
    EXPECT_FALSE(reg.remove("C"));
    EXPECT_THROW(reg.route(batch), RoutingError);
}

TEST(Registry, EntriesShareNoStateWithTheCaller) {
    auto config = tiny_config();
    Backbone model = Backbone::create(config, 13);
    AdapterRegistry reg(config);
    AdapterSet set = random_adapter(model, spec_of(AdapterKind::kAdaLink), 14);
    reg.add("A", set);
    reg.add("B", set);
    std::mt19937_64 rng(15);
    auto batch = task_batch(config, "A", rng);
    const auto before = to_vector(model.forward(batch, &reg.route(batch)->adapters, Mode::kEval));
    randomize(set, rng);
    EXPECT_EQ(to_vector(model.forward(batch, &reg.route(batch)->adapters, Mode::kEval)), before);
    EXPECT_NE(reg.find("A")->adapters.text->up.data().data(), reg.find("B")->adapters.text->up.data().data());
}

TEST(Registry, ReplacingOneTaskLeavesOthersUnchanged) {
    auto config = tiny_config();
    Backbone model = Backbone::create(config, 16);
    AdapterRegistry reg(config);
    reg.add("A", random_adapter(model, spec_of(AdapterKind::kAdaLink), 17));
    reg.add("B", random_adapter(model, spec_of(AdapterKind::kAdaLink), 18));
    std::mt19937_64 rng(19);
    auto a = task_batch(config, "A", rng);
    auto b = task_batch(config, "B", rng);
    const auto a_before = to_vector(model.forward(a, &reg.route(a)->adapters, Mode::kEval));
    const auto b_before = to_vector(model.forward(b, &reg.route(b)->adapters, Mode::kEval));
    reg.add("B", random_adapter(model, spec_of(AdapterKind::kAdaLink), 99));
    EXPECT_EQ(to_vector(model.forward(a, &reg.route(a)->adapters, Mode::kEval)), a_before);
    EXPECT_NE(to_vector(model.forward(b, &reg.route(b)->adapters, Mode::kEval)), b_before);
}

TEST(Registry, InterleavedStreamMatchesPerTaskRuns) {
    auto config = tiny_config();
    Backbone model = Backbone::create(config, 20);
    AdapterRegistry reg(config);
    reg.add("A", random_adapter(model, spec_of(AdapterKind::kAdaLink), 21));
    reg.add("B", random_adapter(model, spec_of(AdapterKind::kLoRA), 22));
    reg.add("C", random_adapter(model, spec_of(AdapterKind::kPromptTuning), 23));
    std::mt19937_64 rng(24);
    std::vector<MultimodalBatch> stream;
    for (int i = 0; i < 9; ++i) stream.push_back(task_batch(config, std::string(1, "ABC"[(i * 5) % 3]), rng));
    const auto interleaved = serve(model, reg, stream);
    for (const std::string task : {"A", "B", "C"}) {
        std::vector<MultimodalBatch> alone;
        std::vector<std::size_t> where;
        for (std::size_t i = 0; i < stream.size(); ++i) {
            if (stream[i].task_id == task) {
                alone.push_back(stream[i]);
                where.push_back(i);
            }
        }
        AdapterRegistry single(config);
        single.add(task, reg.find(task)->adapters);
        const auto solo = serve(model, single, alone);
        for (std::size_t k = 0; k < where.size(); ++k) {
            EXPECT_EQ(to_vector(solo[k]), to_vector(interleaved[where[k]])) << task;
        }
    }
}

TEST(Registry, ConcurrentReadersDuringReplacement) {
    auto config = tiny_config();
    Backbone model = Backbone::create(config, 25);
    AdapterRegistry reg(config);
    reg.add("A", random_adapter(model, spec_of(AdapterKind::kAdaLink), 26));
    reg.add("B", random_adapter(model, spec_of(AdapterKind::kAdaLink), 27));
    std::mt19937_64 rng(28);
    const auto a = task_batch(config, "A", rng);
    const auto expected = to_vector(model.forward(a, &reg.route(a)->adapters, Mode::kEval));

    std::vector<AdapterSet> replacements;
    for (int i = 0; i < 20; ++i) replacements.push_back(random_adapter(model, spec_of(AdapterKind::kAdaLink), 100 + i));

    std::atomic<bool> done{false};
    std::atomic<int> mismatches{0}, reads{0};
    std::vector<std::thread> readers;
    for (int t = 0; t < 4; ++t) {
        readers.emplace_back([&] {
            while (!done.load()) {
                auto entry = reg.route(a);
                if (to_vector(model.forward(a, &entry->adapters, Mode::kEval)) != expected) ++mismatches;
                ++reads;
            }
        });
    }
    for (const auto &r : replacements) reg.add("B", r);
    while (reads.load() < 20) std::this_thread::yield();
    done = true;
    for (auto &t : readers) t.join();
    EXPECT_EQ(mismatches.load(), 0);
    EXPECT_EQ(reg.size(), 2u);
}

TEST(Registry, SaveLoadSaveIsByteIdentical) {
    auto config = tiny_config();
    Backbone model = Backbone::create(config, 29);
    AdapterRegistry reg(config);
    reg.add("vqa/main", random_adapter(model, spec_of(AdapterKind::kAdaLink), 30),
            {{"train_config_hash", "abcd"}, {"creation_step", "500"}});
    reg.add("cls", random_adapter(model, spec_of(AdapterKind::kLoRA), 31));
    reg.add("cap", random_adapter(model, spec_of(AdapterKind::kPromptTuning), 32));
    reg.add("ft", random_adapter(model, spec_of(AdapterKind::kFullFT), 33));

    TempDir first("reg1"), second("reg2");
    reg.save(first.path());
    auto loaded = AdapterRegistry::load(first.path(), config);
    loaded->save(second.path());
    EXPECT_EQ(loaded->task_ids(), reg.task_ids());
    std::size_t files = 0;
    for (const auto &f : std::filesystem::directory_iterator(first.path())) {
        ++files;
        EXPECT_EQ(read_file(f.path()), read_file(second.path() / f.path().filename())) << f.path();
    }
    EXPECT_EQ(files, 5u);
    EXPECT_EQ(read_file(first.path() / "index.tsv").substr(0, 26), "task_id\tfile\tspec_hash\ncap");
    EXPECT_EQ(loaded->find("vqa/main")->metadata.at("creation_step"), "500");
    EXPECT_EQ(loaded->find("vqa/main")->metadata.at("rank"), "2");
}

TEST(Registry, IndexHashMismatchIsRejected) {
    auto config = tiny_config();
    Backbone model = Backbone::create(config, 34);
    AdapterRegistry reg(config);
    reg.add("A", random_adapter(model, spec_of(AdapterKind::kAdaLink), 35));
    TempDir dir("reg3");
    reg.save(dir.path());
    std::ofstream(dir.path() / "index.tsv") << "task_id\tfile\tspec_hash\nA\tA.adlk\tdeadbeef\n";
    EXPECT_THROW(AdapterRegistry::load(dir.path(), config), CheckpointError);
}

TEST(Registry, StorageIsBoundedByParamsAndIndependentOfDepth) {
    std::uint64_t first_bytes = 0;
    for (std::size_t layers : {1u, 4u}) {
        auto config = tiny_config();
        config.n_dec_layers = layers;
        Backbone model = Backbone::create(config, 36);
        AdapterRegistry reg(config);
        const auto spec = spec_of(AdapterKind::kAdaLink, 4);
        reg.add("A", random_adapter(model, spec, 37));
        reg.add("B", random_adapter(model, spec, 38));
        const auto stats = reg.stats();
        ASSERT_EQ(stats.entries.size(), 2u);
        const auto params = peft::count_trainable_params(spec, config).total();
        for (const auto &e : stats.entries) {
            EXPECT_EQ(e.trainable_params, params);
            EXPECT_EQ(e.tensor_bytes, params * 8);
            EXPECT_LE(e.file_bytes, params * 8 + 2048);
            EXPECT_EQ(e.baked_table_bytes, 0u);
        }
        EXPECT_EQ(stats.total_file_bytes, 2 * stats.entries[0].file_bytes);
        if (first_bytes == 0) first_bytes = stats.total_file_bytes;
        EXPECT_EQ(stats.total_file_bytes, first_bytes);
    }
}

TEST(Bake, ZeroInitModuleLeavesTableUnchanged) {
    auto config = tiny_config();
    Backbone model = Backbone::create(config, 39);
    tensor::Rng init(40);
    auto module = peft::AdaLinkModule::create(config.d_emb, 3, false, init);
    const Tensor baked = bake_text_adalink(model, module, AdaLinkScope::kText);
    EXPECT_EQ(to_vector(baked), to_vector(model.token_embedding()));
}

TEST(Bake, NonTextScopesAreContractErrors) {
    auto config = tiny_config();
    Backbone model = Backbone::create(config, 41);
    tensor::Rng init(42);
    auto module = peft::AdaLinkModule::create(config.d_emb, 3, false, init);
    EXPECT_THROW(bake_text_adalink(model, module, AdaLinkScope::kImage), ContractError);
    EXPECT_THROW(bake(model, random_adapter(model, spec_of(AdapterKind::kAdaLink, 2, AdaLinkScope::kUnified), 43)),
                 ContractError);
    EXPECT_THROW(bake(model, random_adapter(model, spec_of(AdapterKind::kAdaLink, 2, AdaLinkScope::kImage), 44)),
                 ContractError);
    EXPECT_THROW(bake(model, random_adapter(model, spec_of(AdapterKind::kLoRA), 45)), ContractError);
}

TEST(Bake, BakedMatchesLiveOnRandomBatches) {
    auto config = tiny_config();
    Backbone model = Backbone::create(config, 46);
    std::mt19937_64 rng(47);
    for (auto scope : {AdaLinkScope::kText, AdaLinkScope::kModality}) {
        for (bool relu : {false, true}) {
            auto spec = spec_of(AdapterKind::kAdaLink, 3, scope);
            spec.use_nonlinearity = relu;
            AdapterSet live = random_adapter(model, spec, 48);
            AdapterSet baked = bake(model, live);
            EXPECT_FALSE(baked.text.has_value());
            for (int i = 0; i < 100; ++i) {
                const auto batch = random_batch(config, 2, rng, i % 4 != 0);
                const auto a = model.encoder_input(batch, &live, Mode::kEval, nullptr).embeddings;
                const auto b = model.encoder_input(batch, &baked, Mode::kEval, nullptr).embeddings;
                ASSERT_EQ(to_vector(a), to_vector(b)) << "batch " << i;
            }
            const auto batch = random_batch(config, 3, rng);
            EXPECT_EQ(to_vector(model.forward(batch, &live, Mode::kEval)),
                      to_vector(model.forward(batch, &baked, Mode::kEval)));
        }
    }
}

TEST(Bake, BakedEntryReportsTableStorage) {
    auto config = tiny_config();
    Backbone model = Backbone::create(config, 49);
    AdapterRegistry reg(config);
    reg.add("A", bake(model, random_adapter(model, spec_of(AdapterKind::kAdaLink, 2, AdaLinkScope::kText), 50)));
    const auto stats = reg.stats();
    EXPECT_EQ(stats.entries[0].baked_table_bytes, config.vocab_size * config.d_emb * 8);
    EXPECT_EQ(stats.total_baked_table_bytes, stats.entries[0].baked_table_bytes);
    EXPECT_GT(stats.entries[0].file_bytes, stats.entries[0].baked_table_bytes);
}
