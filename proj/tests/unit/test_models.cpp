#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <set>

#include "gcnsr/models.hpp"

using namespace gcnsr;

namespace {

GeneratorSpec small_generator(std::size_t blocks = 2)
{
    GeneratorSpec spec;
    spec.residual_blocks = blocks;
    spec.base_channels = 8;
    spec.edge_kernel = 3;
    return spec;
}

Tensor<float> random_image(Shape s, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    return Tensor<float>::uniform(s, rng, -1.0, 1.0);
}

} // namespace

TEST_CASE("default generator has ten residual blocks", "[generator]")
{
    auto params = build_generator<float>(GeneratorSpec{}, 1);
    CHECK(count_residual_blocks(params) == 10);
    CHECK(params.names_with_prefix("resblock09.").size() == 10);
    CHECK(params.names_with_prefix("resblock10.").empty());
    CHECK(params.entry("head.conv.weight").value.shape() == Shape{64, 3, 9, 9});
    CHECK(params.entry("tail.conv.weight").value.shape() == Shape{3, 64, 9, 9});
    CHECK(params.entry("up0.conv.weight").value.shape() == Shape{256, 64, 3, 3});
}

TEST_CASE("generator build is deterministic in the seed", "[generator][determinism]")
{
    auto a = build_generator<float>(GeneratorSpec{}, 7);
    auto b = build_generator<float>(GeneratorSpec{}, 7);
    auto c = build_generator<float>(GeneratorSpec{}, 8);
    CHECK(a == b);
    CHECK_FALSE(a.same_values(c));
}

TEST_CASE("generator without residual blocks is head, upsampling and tail", "[generator]")
{
    GeneratorSpec spec;
    spec.residual_blocks = 0;
    auto params = build_generator<float>(spec, 3);
    CHECK(count_residual_blocks(params) == 0);
    std::set<std::string> stems;
    for (const auto& [name, _] : params.entries())
        stems.insert(name.substr(0, name.find('.')));
    CHECK(stems == std::set<std::string>{"head", "up0", "up1", "tail"});
    auto out = generate(spec, params, random_image(Shape{1, 3, 4, 4}, 1));
    CHECK(out.shape() == Shape{1, 3, 16, 16});
}

TEST_CASE("generator forward shape law and tanh range", "[generator]")
{
    auto params = build_generator<float>(GeneratorSpec{}, 11);
    auto out = generate(GeneratorSpec{}, params, random_image(Shape{2, 3, 8, 8}, 2));
    CHECK(out.shape() == Shape{2, 3, 32, 32});
    CHECK(out.min() >= -1.0f);
    CHECK(out.max() <= 1.0f);
}

TEST_CASE("generator output extent is four times the input for h, w in [4, 64]", "[generator][property]")
{
    const auto spec = small_generator(1);
    auto params = build_generator<float>(spec, 5);
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<std::size_t> extent(4, 64);
    for (int trial = 0; trial < 8; ++trial) {
        const std::size_t h = extent(rng), w = extent(rng);
        auto out = generate(spec, params, random_image(Shape{1, 3, h, w}, rng()));
        INFO(h << "x" << w);
        CHECK(out.shape() == Shape{1, 3, 4 * h, 4 * w});
    }
    for (std::size_t hw : {std::size_t{4}, std::size_t{64}}) {
        auto out = generate(spec, params, random_image(Shape{1, 3, hw, hw}, hw));
        CHECK(out.shape() == Shape{1, 3, 4 * hw, 4 * hw});
    }
}

TEST_CASE("generator nearest-neighbour upsampling keeps the shape law", "[generator]")
{
    auto spec = small_generator();
    spec.upsample = UpsampleMode::nearest;
    auto params = build_generator<float>(spec, 5);
    CHECK(params.entry("up0.conv.weight").value.shape() == Shape{8, 8, 3, 3});
    auto out = generate(spec, params, random_image(Shape{1, 3, 5, 7}, 3));
    CHECK(out.shape() == Shape{1, 3, 20, 28});
}

TEST_CASE("zero tail convolution yields an all-zero image", "[generator]")
{
    auto params = build_generator<float>(GeneratorSpec{}, 2);
    params.entry("tail.conv.weight").value.fill(0.0f);
    params.entry("tail.conv.bias").value.fill(0.0f);
    auto out = generate(GeneratorSpec{}, params, random_image(Shape{1, 3, 6, 6}, 4));
    CHECK(out.min() == 0.0f);
    CHECK(out.max() == 0.0f);
}

TEST_CASE("generator rejects non-RGB input", "[generator][errors]")
{
    auto params = build_generator<float>(small_generator(), 2);
    CHECK_THROWS_AS(generate(small_generator(), params, Tensor<float>(Shape{1, 1, 8, 8})), DimensionError);
    CHECK_THROWS_WITH(generate(small_generator(), params, Tensor<float>(Shape{1, 4, 8, 8})),
                      Catch::Matchers::ContainsSubstring("channel"));
}

TEST_CASE("discriminator channel schedule doubles from 64 to 512", "[discriminator]")
{
    const DiscriminatorSpec spec;
    const FeatureTap tap;
    auto phi = build_extractor<float>(tap, 1);
    auto head = build_discriminator_head<float>(spec, tap, 2);
    std::vector<std::size_t> channels;
    for (std::size_t b = 0; b < DiscriminatorSpec::conv_blocks; ++b) {
        const std::string name = "block" + std::to_string(b) + ".conv.weight";
        const auto& owner = b == 0 ? phi : head;
        const Shape s = owner.entry(name).value.shape();
        CHECK(s.h == 3);
        CHECK(s.w == 3);
        if (b > 0)
            CHECK(s.c == channels.back());
        channels.push_back(s.n);
    }
    CHECK(channels == std::vector<std::size_t>{64, 64, 128, 128, 256, 256, 512, 512});
    CHECK_FALSE(phi.contains("block0.bn.gamma"));
    CHECK(head.contains("block1.bn.gamma"));
    CHECK(head.entry("dense1.weight").value.shape() == Shape{1, 1, 512 * 2 * 2, 1024});
    CHECK(head.entry("dense2.weight").value.shape() == Shape{1, 1, 1024, 1});
}

TEST_CASE("discriminator forward shapes and probability range", "[discriminator]")
{
    const DiscriminatorSpec spec;
    const FeatureTap tap;
    auto phi = build_extractor<float>(tap, 1);
    auto head = build_discriminator_head<float>(spec, tap, 2);
    Scope<float> sp(phi, Binding::inference()), sh(head, Binding::inference());
    auto out = discriminator_forward(spec, tap, sp, sh, Var<float>::constant(random_image(Shape{1, 3, 32, 32}, 5)));
    CHECK(out.prob.shape() == Shape{1, 1, 1, 1});
    CHECK(out.tap.shape() == Shape{1, 64, 32, 32});
    CHECK(out.prob.value()[0] > 0.0f);
    CHECK(out.prob.value()[0] < 1.0f);
    REQUIRE(out.taps.size() == 8);
    CHECK(out.taps.back().shape() == Shape{1, 512, 2, 2});
}

TEST_CASE("discriminator requires the configured input size", "[discriminator][errors]")
{
    const DiscriminatorSpec spec;
    const FeatureTap tap;
    auto phi = build_extractor<float>(tap, 1);
    auto head = build_discriminator_head<float>(spec, tap, 2);
    Scope<float> sp(phi, Binding::inference()), sh(head, Binding::inference());
    CHECK_NOTHROW(discriminator_forward(spec, tap, sp, sh, Var<float>::constant(Tensor<float>(Shape{1, 3, 32, 32}))));
    CHECK_THROWS_WITH(discriminator_forward(spec, tap, sp, sh, Var<float>::constant(Tensor<float>(Shape{1, 3, 33, 33}))),
                      Catch::Matchers::ContainsSubstring("32x32"));
    DiscriminatorSpec odd;
    odd.input_hw = 33;
    CHECK_THROWS_AS(odd.validate(), ConfigError);
}

TEST_CASE("classifier head emits one logit per class", "[discriminator]")
{
    DiscriminatorSpec spec;
    spec.outputs = 4;
    const FeatureTap tap;
    auto phi = build_extractor<float>(tap, 1);
    auto head = build_discriminator_head<float>(spec, tap, 2);
    Scope<float> sp(phi, Binding::inference()), sh(head, Binding::inference());
    auto out = discriminator_forward(spec, tap, sp, sh, Var<float>::constant(random_image(Shape{2, 3, 32, 32}, 5)));
    CHECK(out.logits.shape() == Shape{2, 4, 1, 1});
}

TEST_CASE("autoencoder reconstructs to the input shape in [-1, 1]", "[autoencoder]")
{
    const AutoencoderSpec spec;
    const FeatureTap tap;
    auto phi = build_extractor<float>(tap, 1);
    auto head = build_autoencoder_head<float>(spec, tap, 3);
    Scope<float> sp(phi, Binding::inference()), sh(head, Binding::inference());
    auto out = autoencoder_forward(spec, tap, sp, sh, Var<float>::constant(random_image(Shape{1, 3, 32, 32}, 6)));
    CHECK(out.reconstruction.shape() == Shape{1, 3, 32, 32});
    CHECK(out.reconstruction.value().min() >= -1.0f);
    CHECK(out.reconstruction.value().max() <= 1.0f);
    CHECK(out.tap.shape() == Shape{1, 64, 32, 32});
}

TEST_CASE("shared extractor gives identical taps to discriminator and autoencoder", "[autoencoder][property]")
{
    const AutoencoderSpec spec;
    const FeatureTap tap;
    auto phi = build_extractor<float>(tap, 1);
    auto dhead = build_discriminator_head<float>(spec.trunk, tap, 2);
    auto ahead = build_autoencoder_head<float>(spec, tap, 3);
    auto x = Var<float>::constant(random_image(Shape{2, 3, 32, 32}, 9));
    Scope<float> sp(phi, Binding::frozen_train()), sd(dhead, Binding::frozen_train()),
        sa(ahead, Binding::frozen_train());
    auto d = discriminator_forward(spec.trunk, tap, sp, sd, x);
    auto a = autoencoder_forward(spec, tap, sp, sa, x);
    CHECK(d.tap.value() == a.tap.value());
}

TEST_CASE("tap layer and pre-activation switch", "[tap]")
{
    FeatureTap tap;
    tap.layer = 1;
    auto phi = build_extractor<float>(tap, 1);
    CHECK(phi.contains("block1.conv.weight"));
    auto x = Var<float>::constant(random_image(Shape{1, 3, 16, 16}, 2));
    Scope<float> s(phi, Binding::frozen_train());
    auto post = extractor_forward(tap, s, x).tap;
    CHECK(post.shape() == Shape{1, 64, 8, 8});
    tap.pre_activation = true;
    auto pre = extractor_forward(tap, s, x).tap;
    CHECK(pre.value().min() < 0.0f);
    bool matches = true;
    for (std::size_t i = 0; i < pre.value().size(); ++i) {
        const float v = pre.value()[i];
        matches = matches && post.value()[i] == (v >= 0.0f ? v : 0.2f * v);
    }
    CHECK(matches);
    tap.layer = 8;
    CHECK_THROWS_AS(tap.validate(), ConfigError);
}

TEST_CASE("extract_features for identity, random and discriminator taps", "[tap]")
{
    auto x = Var<float>::constant(random_image(Shape{1, 3, 16, 16}, 3));

    FeatureSource<float> identity{FeatureTap{TapNetwork::identity, 0, false}};
    CHECK(extract_features(identity, x).value() == x.value());

    FeatureTap rtap{TapNetwork::random, 0, false};
    auto r1 = build_extractor<float>(rtap, 42);
    auto r2 = build_extractor<float>(rtap, 42);
    FeatureSource<float> s1{rtap, &r1}, s2{rtap, &r2};
    auto f1 = extract_features(s1, x, Binding::training());
    CHECK_FALSE(f1.requires_grad());
    CHECK(f1.value() == extract_features(s2, x).value());

    FeatureTap dtap;
    auto phi = build_extractor<float>(dtap, 1);
    FeatureSource<float> d{dtap, &phi};
    CHECK(extract_features(d, x).shape() == Shape{1, 64, 16, 16});

    FeatureSource<float> missing{FeatureTap{TapNetwork::external, 0, false}};
    CHECK_THROWS_AS(extract_features(missing, x), InterfaceError);
}

TEST_CASE("external network round-trips through records and runs", "[tap][external]")
{
    std::mt19937_64 rng(3);
    std::map<std::string, Tensor<float>> rec;
    rec.emplace("layer0.weight", Tensor<float>::normal(Shape{4, 3, 3, 3}, rng));
    rec.emplace("layer0.bias", Tensor<float>(Shape{1, 4, 1, 1}));
    rec.emplace("layer1.weight", Tensor<float>::normal(Shape{5, 4, 1, 1}, rng));
    rec.emplace("layer1.bias", Tensor<float>(Shape{1, 5, 1, 1}));
    rec.emplace("layer1.lin", Tensor<float>(Shape{1, 5, 1, 1}, 0.5f));
    auto net = ExternalNetwork<float>::from_records(rec);
    CHECK(net.layers().size() == 2);
    CHECK(net.records() == rec);
    auto taps = net.forward(Var<float>::constant(random_image(Shape{1, 3, 6, 6}, 1)));
    REQUIRE(taps.size() == 2);
    CHECK(taps[1].shape() == Shape{1, 5, 6, 6});

    FeatureSource<float> src{FeatureTap{TapNetwork::external, 1, false}, nullptr, &net};
    CHECK(extract_features(src, Var<float>::constant(random_image(Shape{1, 3, 6, 6}, 1))).value() == taps[1].value());
    src.tap.layer = 2;
    CHECK_THROWS_AS(extract_features(src, Var<float>::constant(random_image(Shape{1, 3, 6, 6}, 1))), InterfaceError);

    rec.erase("layer1.bias");
    CHECK_THROWS_AS(ExternalNetwork<float>::from_records(rec), InterfaceError);
    CHECK_THROWS_AS(ExternalNetwork<float>::from_records({}), InterfaceError);
}

TEST_CASE("gradient reaches the generator input through the discriminator tap", "[gradient][property]")
{
    const auto gspec = small_generator(1);
    auto gen = build_generator<double>(gspec, 4);
    const FeatureTap tap;
    auto phi = build_extractor<double>(tap, 5);
    std::mt19937_64 rng(6);
    auto lr = Var<double>::input(Tensor<double>::uniform(Shape{2, 3, 4, 4}, rng, -1.0, 1.0));
    Scope<double> g(gen, Binding::frozen_train()), p(phi, Binding::frozen_train());
    auto features = extractor_forward(tap, p, generator_forward(gspec, g, lr)).tap;
    auto weights = Tensor<double>::normal(features.shape(), rng);
    backward(ag::weighted_sum(features, weights));
    REQUIRE(lr.has_grad());
    double norm = 0.0;
    for (double v : lr.grad())
        norm += v * v;
    CHECK(norm > 0.0);
}
