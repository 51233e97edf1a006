#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "gcnsr/training.hpp"

using namespace gcnsr;

namespace fs = std::filesystem;

namespace {

const fs::path kData = GCNSR_TEST_DATA;

fs::path scratch_dir(const std::string& name)
{
    auto dir = fs::temp_directory_path() / ("gcnsr_test_training_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

const PairDataset& toy4()
{
    static const PairDataset ds = load_corpus(kData / "toy4", CorpusOptions{});
    return ds;
}

TrainConfig small_config(Variant v, std::size_t iterations = 3)
{
    TrainConfig c;
    c.seed = 7;
    c.iterations = iterations;
    c.batch_size = 2;
    c.pretrain_iterations = 3;
    c.log_every = 0;
    c.generator.residual_blocks = 1;
    c.generator.base_channels = 8;
    c.generator.edge_kernel = 3;
    c.discriminator.dense_hidden = 8;
    c.strategy.variant = v;
    return c;
}

Archive sample_archive()
{
    Archive a;
    a.put("w", Tensor<float>(Shape{1, 2, 1, 3}, std::vector<float>{1, 2, 3, 4, 5, 6}));
    a.put("d", Tensor<double>(Shape{2, 1, 1, 1}, std::vector<double>{0.5, -1.25}));
    a.metadata = R"({"k": 1})";
    a.rng_state = "state 1 2";
    return a;
}

} // namespace

TEST_CASE("archive round-trips records of both dtypes", "[training][archive]")
{
    const Archive a = sample_archive();
    const std::string bytes = encode_archive(a);
    CHECK(bytes.substr(0, 5) == "GCNSR");
    const Archive b = decode_archive(bytes);
    CHECK(a == b);
    CHECK(encode_archive(b) == bytes);
    CHECK(b.get_as<double>("w")[5] == 6.0);
    CHECK_THROWS_AS(b.get<double>("w"), IntegrityError);
    CHECK_THROWS_AS(b.get<float>("missing"), IntegrityError);
}

TEST_CASE("archive rejects truncation, corruption and foreign versions", "[training][archive]")
{
    const std::string bytes = encode_archive(sample_archive());
    for (std::size_t cut : {std::size_t{0}, std::size_t{4}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1})
        CHECK_THROWS_AS(decode_archive(std::string_view(bytes).substr(0, cut)), IntegrityError);

    std::string flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x01;
    CHECK_THROWS_AS(decode_archive(flipped), IntegrityError);

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_archive(bad_magic), IntegrityError);

    std::string future = bytes;
    future[5] = 2;
    try {
        decode_archive(future);
        FAIL("expected VersionError");
    } catch (const VersionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find('2') != std::string::npos);
        CHECK(msg.find('1') != std::string::npos);
    }
}

TEST_CASE("archive writes are atomic and leave no temporary file", "[training][archive]")
{
    const auto dir = scratch_dir("atomic");
    const auto path = dir / "a.gcnsr";
    save_archive(path, sample_archive());
    CHECK(load_archive(path) == sample_archive());
    std::size_t files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir))
        ++files;
    CHECK(files == 1);
}

TEST_CASE("train config JSON round-trips and rejects unknown keys", "[training][config]")
{
    TrainConfig c = small_config(Variant::adv_rec);
    c.strategy.lambda2 = 0.01;
    c.strategy.tap.layer = 2;
    c.adam.decay = 1e-4;
    c.generator.upsample = UpsampleMode::nearest;
    const auto j = to_json(c);
    CHECK(train_config_from_json(j) == c);

    auto extra = j;
    extra["training"]["iterationz"] = 5;
    CHECK_THROWS_WITH(train_config_from_json(extra), Catch::Matchers::ContainsSubstring("training.iterationz"));

    auto wrong = j;
    wrong["training"]["batch_size"] = "ten";
    CHECK_THROWS_AS(train_config_from_json(wrong), ConfigError);

    auto negative = j;
    negative["seed"] = -1;
    CHECK_THROWS_AS(train_config_from_json(negative), ConfigError);

    auto variant = j;
    variant["strategy"]["variant"] = "gan";
    CHECK_THROWS_WITH(train_config_from_json(variant), Catch::Matchers::ContainsSubstring("strategy.variant"));
}

TEST_CASE("zero iterations returns the initialization", "[training]")
{
    const auto c = small_config(Variant::dis, 0);
    auto trained = train<float>(c, toy4());
    auto fresh = init_training<float>(c);
    CHECK(trained.iteration == 0);
    CHECK(trained.generator == fresh.generator);
    CHECK(trained.phi == fresh.phi);
    CHECK(trained.dis_head == fresh.dis_head);
    CHECK(trained.history.empty());
}

TEST_CASE("mse training never builds or touches an extractor", "[training]")
{
    auto s = train<float>(small_config(Variant::mse), toy4());
    CHECK(s.phi.empty());
    CHECK(s.dis_head.empty());
    CHECK(s.generator.step_count() == 3);
    CHECK(s.adversarial_evaluations == 0);
    for (const auto& r : s.history) {
        CHECK(r.adversarial == 0.0);
        CHECK(r.discriminator == 0.0);
        CHECK(r.content == r.total_generator);
    }
}

TEST_CASE("joint variants update generator and extractor every iteration", "[training]")
{
    const auto c = small_config(Variant::dis);
    auto fresh = init_training<float>(c);
    auto s = train<float>(c, toy4());
    CHECK_FALSE(s.generator.same_values(fresh.generator));
    CHECK_FALSE(s.phi.same_values(fresh.phi));
    CHECK_FALSE(s.dis_head.same_values(fresh.dis_head));
    CHECK(s.phi.step_count() == 3);
    CHECK(s.dis_head.step_count() == 3);
    CHECK(s.adversarial_evaluations == 0);
    for (const auto& r : s.history)
        CHECK(r.discriminator > 0.0);

    auto two = c;
    two.extractor_steps = 2;
    CHECK(train<float>(two, toy4()).phi.step_count() == 6);
}

TEST_CASE("adversarial variants evaluate the adversarial term once per generator step", "[training]")
{
    auto c = small_config(Variant::adv_mse);
    auto s = train<float>(c, toy4());
    CHECK(s.adversarial_evaluations == 3);
    for (const auto& r : s.history) {
        CHECK(r.adversarial > 0.0);
        CHECK(r.total_generator == Catch::Approx(r.content + 1e-3 * r.adversarial).epsilon(1e-5));
    }
}

TEST_CASE("lambda2 = 0 never computes the adversarial term", "[training][property]")
{
    for (Variant v : all_variants) {
        if (is_adversarial(v) || v == Variant::cla)
            continue;
        auto c = small_config(v, 2);
        c.strategy.lambda2 = 0.0;
        auto s = train<float>(c, toy4());
        INFO(to_string(v));
        CHECK(s.adversarial_evaluations == 0);
        CHECK(s.iteration == 2);
    }
}

TEST_CASE("frozen extractors stay bitwise fixed during generator training", "[training][property]")
{
    for (Variant v : {Variant::ran, Variant::rec}) {
        auto c = small_config(v);
        auto s = init_training<float>(c);
        pretrain_extractor(s, toy4(), nullptr);
        const auto phi = s.phi;
        const auto ae = s.ae_head;
        run_until(s, toy4(), 3);
        INFO(to_string(v));
        CHECK(s.phi == phi);
        CHECK(s.ae_head == ae);
        CHECK(s.generator.step_count() == 3);
    }
}

TEST_CASE("training is deterministic for a fixed seed", "[training]")
{
    const auto c = small_config(Variant::dis_rec);
    auto a = train<float>(c, toy4());
    auto b = train<float>(c, toy4());
    CHECK(a == b);
    CHECK(encode_checkpoint(a) == encode_checkpoint(b));

    auto other = c;
    other.seed = 8;
    CHECK_FALSE(train<float>(other, toy4()).generator == a.generator);
}

TEST_CASE("resuming from a checkpoint matches an uninterrupted run bitwise", "[training][checkpoint]")
{
    const auto dir = scratch_dir("resume");
    for (Variant v : {Variant::mse, Variant::adv_rec, Variant::rec}) {
        INFO(to_string(v));
        auto c = small_config(v, 6);
        if (v == Variant::adv_rec)
            c.strategy.lambda2 = 0.01;
        auto full = train<float>(c, toy4());

        auto half = c;
        half.iterations = 3;
        auto first = train<float>(half, toy4());
        save_checkpoint(dir / "half.gcnsr", first);
        auto resumed = load_checkpoint<float>(dir / "half.gcnsr");
        CHECK(resumed == first);
        resumed.config.iterations = 6;
        run_until(resumed, toy4(), 6);

        CHECK(resumed.generator == full.generator);
        CHECK(resumed.phi == full.phi);
        CHECK(resumed.history == full.history);
        CHECK(resumed.batch_state == full.batch_state);
        CHECK(encode_checkpoint(resumed) == encode_checkpoint(full));
    }
}

TEST_CASE("save, load, save produces identical bytes", "[training][checkpoint]")
{
    const auto dir = scratch_dir("stable");
    auto s = train<double>(small_config(Variant::dis, 2), toy4());
    save_checkpoint(dir / "a.gcnsr", s);
    auto loaded = load_checkpoint<double>(dir / "a.gcnsr");
    save_checkpoint(dir / "b.gcnsr", loaded);
    CHECK(read_file_bytes(dir / "a.gcnsr") == read_file_bytes(dir / "b.gcnsr"));
    CHECK_THROWS_AS(load_checkpoint<float>(dir / "a.gcnsr"), IntegrityError);

    std::string bytes = read_file_bytes(dir / "a.gcnsr");
    bytes.resize(bytes.size() - 9);
    write_file_bytes(dir / "c.gcnsr", bytes);
    CHECK_THROWS_AS(load_checkpoint<double>(dir / "c.gcnsr"), IntegrityError);
}

TEST_CASE("checkpoint metadata records the resolved configuration", "[training][checkpoint]")
{
    auto s = train<float>(small_config(Variant::dis, 1), toy4());
    const Archive a = checkpoint_archive(s);
    const auto meta = nlohmann::json::parse(a.metadata);
    CHECK(meta["format_version"] == kCheckpointFormat);
    CHECK(meta["dtype"] == "f32");
    CHECK(meta["iteration"] == 1);
    CHECK(meta["config"]["strategy"]["variant"] == "dis");
    CHECK(meta["config"]["generator"]["residual_blocks"] == 1);
    CHECK(meta["manifest_hash"] == toy4().manifest_hash());
    CHECK(a.contains("param/generator/head.conv.weight"));
    CHECK(a.contains("adam_m/phi/block0.conv.weight"));
    CHECK(a.rng_state.rfind("batch_order seed=", 0) == 0);
}

TEST_CASE("non-finite losses abort before any update", "[training][error]")
{
    auto c = small_config(Variant::mse);
    auto s = init_training<float>(c);
    const auto before = s.generator;
    auto [lr, hr] = toy4().batch<float>(std::vector<std::size_t>{0, 1});
    hr[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(train_step(s, lr, hr), NonFiniteError);
    CHECK(s.generator == before);
    CHECK(s.iteration == 0);

    bool reported = false;
    TrainHooks hooks;
    hooks.on_failure = [&](const NonFiniteError&) { reported = true; };
    PairDataset broken = toy4();
    for (auto& t : broken.hr)
        t[0] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(run_until(s, broken, 1, hooks), NonFiniteError);
    CHECK(reported);
}

TEST_CASE("pretrained variants refuse generator steps before pretraining", "[training][error]")
{
    auto s = init_training<float>(small_config(Variant::rec));
    auto [lr, hr] = toy4().batch<float>(std::vector<std::size_t>{0, 1});
    CHECK_THROWS_AS(train_step(s, lr, hr), InterfaceError);
    CHECK_THROWS_AS(init_training<float>(small_config(Variant::cla), false), ConfigError);
}

TEST_CASE("autoencoder pretraining lowers the reconstruction loss", "[training][pretrain]")
{
    auto c = small_config(Variant::rec);
    c.pretrain_iterations = 30;
    c.adam.lr = 1e-3;
    auto s = init_training<float>(c);
    pretrain_extractor(s, toy4(), nullptr);
    REQUIRE(s.pretrain_history.size() == 30);
    CHECK(s.pretrained);
    const double early = (s.pretrain_history[0] + s.pretrain_history[1]) / 2;
    const double late = (s.pretrain_history[28] + s.pretrain_history[29]) / 2;
    CHECK(late < 0.5 * early);
}

TEST_CASE("classifier pretraining separates the labeled classes", "[training][pretrain]")
{
    const auto labeled = load_labeled_corpus(kData / "labeled", CorpusOptions{});
    auto c = small_config(Variant::cla);
    c.pretrain_iterations = 30;
    c.batch_size = 4;
    c.adam.lr = 1e-3;
    auto s = init_training<float>(c, true);
    pretrain_extractor(s, toy4(), &labeled);
    CHECK(s.pretrained);
    CHECK(classifier_accuracy(s, labeled) >= 0.9);

    const auto dir = scratch_dir("cla");
    save_checkpoint(dir / "cla.gcnsr", s);
    auto loaded = load_checkpoint<float>(dir / "cla.gcnsr");
    CHECK(loaded.cls_head == s.cls_head);
    CHECK(loaded.phi == s.phi);
}
