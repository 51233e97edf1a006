#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>

#include "gcnsr/gradcheck.hpp"
#include "gcnsr/parameters.hpp"
#include "support/gradient_cases.hpp"

using namespace gcnsr;
using Catch::Approx;

namespace {

// Direct seven-loop convolution; shares nothing with the im2col path.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                          std::size_t stride, std::size_t pad)
{
    const Shape& s = x.shape();
    const std::size_t k = w.shape().h;
    const std::size_t ho = (s.h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (s.w + 2 * pad - k) / stride + 1;
    Tensor<double> out(Shape{s.n, w.shape().n, ho, wo});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t co = 0; co < w.shape().n; ++co)
            for (std::size_t oh = 0; oh < ho; ++oh)
                for (std::size_t ow = 0; ow < wo; ++ow) {
                    double acc = b[co];
                    for (std::size_t ci = 0; ci < s.c; ++ci)
                        for (std::size_t i = 0; i < k; ++i)
                            for (std::size_t j = 0; j < k; ++j) {
                                const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(pad);
                                const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(pad);
                                if (ih < 0 || iw < 0 || ih >= static_cast<long>(s.h) || iw >= static_cast<long>(s.w))
                                    continue;
                                acc += x(n, ci, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw)) *
                                       w(co, ci, i, j);
                            }
                    out(n, co, oh, ow) = acc;
                }
    return out;
}

} // namespace

TEST_CASE("conv2d scales by a 1x1 kernel", "[conv2d]")
{
    Tensor<float> x(Shape{1, 1, 3, 3}, 1.0f);
    Tensor<float> w(Shape{1, 1, 1, 1}, 2.0f);
    Tensor<float> b(Shape{1, 1, 1, 1}, 0.0f);
    auto y = kernels::conv2d_forward(x, w, b, 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 3, 3});
    for (float v : y)
        CHECK(v == 2.0f);
}

TEST_CASE("conv2d same padding and parameter count", "[conv2d]")
{
    std::mt19937_64 rng(1);
    ParameterSet<float> ps;
    add_conv(ps, "c", 64, 64, 3, rng);
    CHECK(ps.parameter_count() == 36928u);
    auto x = Tensor<float>::normal(Shape{1, 64, 8, 8}, rng);
    auto y = kernels::conv2d_forward(x, ps.entry("c.weight").value, ps.entry("c.bias").value, 1, 1);
    CHECK(y.shape() == Shape{1, 64, 8, 8});
}

TEST_CASE("conv2d matches a direct convolution", "[conv2d][oracle]")
{
    std::mt19937_64 rng(11);
    for (auto [stride, pad, k] : {std::tuple<std::size_t, std::size_t, std::size_t>{1, 1, 3}, {2, 1, 3}, {1, 0, 1},
                                  {1, 2, 5}, {2, 0, 3}}) {
        // 4 output channels take the direct path at stride 1, 12 the GEMM path
        for (std::size_t cout : {std::size_t{4}, std::size_t{12}}) {
            auto x = Tensor<double>::normal(Shape{3, 2, 7, 6}, rng);
            auto w = Tensor<double>::normal(Shape{cout, 2, k, k}, rng);
            auto b = Tensor<double>::normal(Shape{1, cout, 1, 1}, rng);
            auto fast = kernels::conv2d_forward(x, w, b, stride, pad);
            auto slow = naive_conv(x, w, b, stride, pad);
            REQUIRE(fast.shape() == slow.shape());
            CHECK(max_abs_diff(fast, slow) < 1e-12);
        }
    }
}

TEST_CASE("conv2d rejects mismatched extents naming the axis", "[conv2d][errors]")
{
    Tensor<float> x(Shape{1, 3, 4, 4});
    Tensor<float> w(Shape{2, 4, 3, 3});
    Tensor<float> b(Shape{1, 2, 1, 1});
    CHECK_THROWS_WITH(kernels::conv2d_forward(x, w, b, 1, 1), Catch::Matchers::ContainsSubstring("channel"));
    Tensor<float> big(Shape{2, 3, 7, 7});
    Tensor<float> tiny(Shape{1, 3, 2, 5});
    CHECK_THROWS_WITH(kernels::conv2d_forward(tiny, big, b, 1, 0), Catch::Matchers::ContainsSubstring("height"));
    CHECK_THROWS_AS(kernels::conv2d_forward(x, Tensor<float>(Shape{2, 3, 3, 3}), Tensor<float>(Shape{1, 3, 1, 1}), 1, 1),
                    DimensionError);
}

TEST_CASE("odd kernels with pad (k-1)/2 preserve spatial shape", "[conv2d][property]")
{
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> extent(1, 12);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t k = 2 * (trial % 4) + 1;
        const std::size_t h = extent(rng) + k;
        const std::size_t w = extent(rng) + k;
        Tensor<float> x(Shape{1, 2, h, w}, 0.5f);
        Tensor<float> wt(Shape{3, 2, k, k}, 0.1f);
        Tensor<float> b(Shape{1, 3, 1, 1});
        auto y = kernels::conv2d_forward(x, wt, b, 1, (k - 1) / 2);
        CHECK(y.shape() == Shape{1, 3, h, w});
    }
}

TEST_CASE("batch_norm normalizes two samples to -1 and +1", "[batch_norm]")
{
    Tensor<double> x(Shape{2, 1, 1, 1}, std::vector<double>{1.0, 3.0});
    Tensor<double> gamma(Shape{1, 1, 1, 1}, 1.0);
    Tensor<double> beta(Shape{1, 1, 1, 1}, 0.0);
    auto y = kernels::batch_norm_forward<double>(x, gamma, beta, nullptr, nullptr, kernels::NormMode::train, nullptr);
    const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
    CHECK(y[0] == Approx(-expected).epsilon(1e-12));
    CHECK(y[1] == Approx(expected).epsilon(1e-12));
}

TEST_CASE("batch_norm with zero gamma outputs beta", "[batch_norm]")
{
    std::mt19937_64 rng(2);
    auto x = Tensor<double>::normal(Shape{3, 2, 4, 4}, rng);
    Tensor<double> gamma(Shape{1, 2, 1, 1}, 0.0);
    Tensor<double> beta(Shape{1, 2, 1, 1}, std::vector<double>{0.5, -0.25});
    auto y = kernels::batch_norm_forward<double>(x, gamma, beta, nullptr, nullptr, kernels::NormMode::train, nullptr);
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < 16; ++i) {
            CHECK(y(n, 0, i / 4, i % 4) == 0.5);
            CHECK(y(n, 1, i / 4, i % 4) == -0.25);
        }
}

TEST_CASE("batch_norm eval mode with identity statistics is the identity", "[batch_norm]")
{
    std::mt19937_64 rng(3);
    auto x = Tensor<double>::normal(Shape{1, 3, 2, 2}, rng);
    Tensor<double> gamma(Shape{1, 3, 1, 1}, 1.0);
    Tensor<double> beta(Shape{1, 3, 1, 1}, 0.0);
    Tensor<double> rm(Shape{1, 3, 1, 1}, 0.0);
    Tensor<double> rv(Shape{1, 3, 1, 1}, 1.0);
    auto y = kernels::batch_norm_forward<double>(x, gamma, beta, &rm, &rv, kernels::NormMode::eval, nullptr);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(std::abs(y[i] - x[i]) <= 1e-5 * std::abs(x[i]));
}

TEST_CASE("batch_norm train output is standardized and running stats move", "[batch_norm]")
{
    std::mt19937_64 rng(4);
    auto x = Tensor<double>::normal(Shape{4, 2, 3, 3}, rng, 2.0, 3.0);
    Tensor<double> gamma(Shape{1, 2, 1, 1}, 1.0);
    Tensor<double> beta(Shape{1, 2, 1, 1}, 0.0);
    Tensor<double> rm(Shape{1, 2, 1, 1}, 0.0);
    Tensor<double> rv(Shape{1, 2, 1, 1}, 1.0);
    auto y = kernels::batch_norm_forward<double>(x, gamma, beta, &rm, &rv, kernels::NormMode::train, nullptr);
    const auto m = kernels::channel_moments(y);
    for (std::size_t c = 0; c < 2; ++c) {
        CHECK(std::abs(m.mean[c]) < 1e-12);
        CHECK(m.var[c] == Approx(1.0).epsilon(1e-4));
    }
    const auto mx = kernels::channel_moments(x);
    CHECK(rm[0] == Approx(0.1 * mx.mean[0]).epsilon(1e-12));
    CHECK(rv[0] == Approx(0.9 + 0.1 * mx.var[0] * 36.0 / 35.0).epsilon(1e-12));
}

TEST_CASE("batch_norm train mode rejects a single sample per channel", "[batch_norm][errors]")
{
    Tensor<float> x(Shape{1, 2, 1, 1}, 1.0f);
    Tensor<float> g(Shape{1, 2, 1, 1}, 1.0f);
    Tensor<float> b(Shape{1, 2, 1, 1}, 0.0f);
    CHECK_THROWS_AS(kernels::batch_norm_forward<float>(x, g, b, nullptr, nullptr, kernels::NormMode::train, nullptr),
                    DegenerateStatisticsError);
}

TEST_CASE("activations", "[activation]")
{
    Tensor<float> x(Shape{1, 1, 1, 1}, -2.0f);
    CHECK(kernels::activation_forward(kernels::Activation::leaky_relu, x, nullptr)[0] == Approx(-0.4f));

    std::mt19937_64 rng(9);
    auto big = Tensor<double>::normal(Shape{2, 3, 4, 4}, rng, 0.0, 10.0);
    auto t = kernels::activation_forward(kernels::Activation::tanh, big, nullptr);
    CHECK(t.max() <= 1.0);
    CHECK(t.min() >= -1.0);
    auto s = kernels::activation_forward(kernels::Activation::sigmoid, big, nullptr);
    CHECK(s.min() >= 0.0);
    CHECK(s.max() <= 1.0);

    CHECK_THROWS_AS(kernels::parse_activation("swish"), ConfigError);
    CHECK(kernels::parse_activation("prelu") == kernels::Activation::prelu);
    CHECK_THROWS_AS(kernels::activation_forward<float>(kernels::Activation::prelu, x, nullptr), ConfigError);
}

TEST_CASE("prelu slope gradient equals the negative input", "[activation]")
{
    auto x = Var<double>::input(Tensor<double>(Shape{1, 1, 1, 1}, -3.0));
    auto a = Var<double>::input(Tensor<double>(Shape{1, 1, 1, 1}, 0.25));
    auto y = ag::prelu(x, a);
    backward(y);
    CHECK(a.grad()[0] == -3.0);
    CHECK(x.grad()[0] == 0.25);
}

TEST_CASE("dense affine map", "[dense]")
{
    Tensor<double> x(Shape{1, 2, 1, 1}, std::vector<double>{1.0, 2.0});
    Tensor<double> eye(Shape{1, 1, 2, 2}, std::vector<double>{1, 0, 0, 1});
    Tensor<double> ones(Shape{1, 2, 1, 1}, 1.0);
    auto y = kernels::dense_forward(x, eye, ones);
    CHECK(y[0] == 2.0);
    CHECK(y[1] == 3.0);

    auto id = kernels::dense_forward(x, eye, Tensor<double>(Shape{1, 2, 1, 1}));
    CHECK(id.reshaped(x.shape()) == x);

    Tensor<double> bias(Shape{1, 3, 1, 1}, std::vector<double>{0.1, 0.2, 0.3});
    auto z = kernels::dense_forward(Tensor<double>(Shape{2, 2, 1, 1}, 7.0), Tensor<double>(Shape{1, 1, 2, 3}), bias);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t m = 0; m < 3; ++m)
            CHECK(z(n, m, 0, 0) == bias[m]);

    CHECK_THROWS_AS(kernels::dense_forward(Tensor<double>(Shape{1, 3, 1, 1}), eye, ones), DimensionError);
}

TEST_CASE("pixel_shuffle index law", "[pixel_shuffle]")
{
    Tensor<float> x(Shape{1, 4, 2, 2});
    for (std::size_t c = 0; c < 4; ++c)
        x(0, c, 0, 0) = static_cast<float>(c + 1);
    auto y = kernels::pixel_shuffle(x, 2);
    REQUIRE(y.shape() == Shape{1, 1, 4, 4});
    CHECK(y(0, 0, 0, 0) == 1.0f);
    CHECK(y(0, 0, 0, 1) == 2.0f);
    CHECK(y(0, 0, 1, 0) == 3.0f);
    CHECK(y(0, 0, 1, 1) == 4.0f);

    std::mt19937_64 rng(1);
    auto z = Tensor<float>::normal(Shape{2, 3, 4, 5}, rng);
    CHECK(kernels::pixel_shuffle(z, 1) == z);
    CHECK_THROWS_AS(kernels::pixel_shuffle(Tensor<float>(Shape{1, 6, 2, 2}), 2), DimensionError);
}

TEST_CASE("pixel_shuffle is a bijective rearrangement", "[pixel_shuffle][property]")
{
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<std::size_t> small(1, 4);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t r = small(rng);
        Shape s{small(rng), small(rng) * r * r, small(rng), small(rng)};
        auto x = Tensor<double>::normal(s, rng);
        auto y = kernels::pixel_shuffle(x, r);
        CHECK(kernels::pixel_unshuffle(y, r) == x);
        std::vector<double> a(x.begin(), x.end());
        std::vector<double> b(y.begin(), y.end());
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        CHECK(a == b);
    }
}

TEST_CASE("adam single step from fresh state", "[adam]")
{
    ParameterSet<double> ps;
    ps.add("p", Tensor<double>(Shape{1, 1, 1, 1}, 0.0));
    ps.entry("p").grad[0] = 1.0;
    adam_step(ps, AdamConfig{});
    CHECK(ps.entry("p").value[0] == Approx(-1.99999998e-4).epsilon(1e-12));
    CHECK(ps.step_count() == 1);
    CHECK(ps.entry("p").grad[0] == 0.0);
}

TEST_CASE("adam with zero gradients leaves values unchanged", "[adam][property]")
{
    std::mt19937_64 rng(3);
    ParameterSet<float> ps;
    add_conv(ps, "c", 3, 4, 3, rng);
    add_dense(ps, "d", 5, 2, rng);
    auto before = ps;
    for (int i = 0; i < 3; ++i)
        adam_step(ps, AdamConfig{});
    CHECK(ps.same_values(before));
    CHECK(ps.step_count() == 3);
}

TEST_CASE("adam is bitwise deterministic", "[adam]")
{
    auto run = [] {
        std::mt19937_64 rng(42);
        ParameterSet<float> ps;
        add_conv(ps, "c", 2, 3, 3, rng);
        for (int step = 0; step < 5; ++step) {
            for (auto& [_, e] : ps.entries())
                for (auto& g : e.grad)
                    g = static_cast<float>(std::normal_distribution<double>(0, 1)(rng));
            adam_step(ps, AdamConfig{});
        }
        return ps;
    };
    CHECK(run() == run());
}

TEST_CASE("adam aborts on a non-finite gradient naming the parameter", "[adam][errors]")
{
    ParameterSet<float> ps;
    ps.add("alpha", Tensor<float>(Shape{1, 1, 1, 2}, 1.0f));
    ps.add("beta", Tensor<float>(Shape{1, 1, 1, 1}, 1.0f));
    ps.entry("alpha").grad[0] = 0.5f;
    ps.entry("beta").grad[0] = std::nanf("");
    auto before = ps;
    CHECK_THROWS_WITH(adam_step(ps, AdamConfig{}), Catch::Matchers::ContainsSubstring("beta"));
    CHECK(ps.same_values(before));
    CHECK(ps.step_count() == 0);
}

TEST_CASE("tensor construction from external input rejects non-finite values", "[tensor]")
{
    std::vector<float> vals{1.0f, std::numeric_limits<float>::infinity()};
    CHECK_THROWS_AS(Tensor<float>::from_external(Shape{1, 1, 1, 2}, vals), NonFiniteError);
    CHECK_THROWS_AS(Tensor<float>(Shape{1, 1, 1, 3}, std::vector<float>{1.0f}), DimensionError);
}

TEST_CASE("finite-difference harness examples", "[gradcheck]")
{
    std::mt19937_64 rng(21);
    auto x = Tensor<double>::normal(Shape{1, 2, 4, 4}, rng);
    auto w = Tensor<double>::normal(Shape{3, 2, 3, 3}, rng);
    auto b = Tensor<double>::normal(Shape{1, 3, 1, 1}, rng);
    auto conv = finite_difference_check(
        [](const std::vector<Var<double>>& v) { return ag::conv2d(v[0], v[1], v[2], 1, 1); }, {x, w, b}, 1);
    CHECK(conv.max_relative_error < 1e-4);

    auto px = Tensor<double>::normal(Shape{2, 3, 3, 3}, rng);
    auto slope = Tensor<double>::uniform(Shape{1, 3, 1, 1}, rng, 0.1, 0.4);
    auto prelu = finite_difference_check(
        [](const std::vector<Var<double>>& v) { return ag::prelu(v[0], v[1]); }, {px, slope}, 2, 1e-5, {false, true});
    CHECK(prelu.max_relative_error < 1e-6);

    auto dx = Tensor<double>::normal(Shape{3, 4, 1, 1}, rng);
    auto dw = Tensor<double>::normal(Shape{1, 1, 4, 2}, rng);
    auto db = Tensor<double>::normal(Shape{1, 2, 1, 1}, rng);
    auto dense = finite_difference_check(
        [](const std::vector<Var<double>>& v) { return ag::dense(v[0], v[1], v[2]); }, {dx, dw, db}, 3);
    CHECK(dense.max_relative_error < 1e-8);
}

TEST_CASE("every primitive passes gradient checks on random shapes", "[gradcheck][property]")
{
    for (const auto& c : test_support::primitive_gradient_cases()) {
        std::mt19937_64 rng(1000);
        double worst = 0.0;
        for (int trial = 0; trial < 20; ++trial)
            worst = std::max(worst, c.run(rng).max_relative_error);
        INFO(c.name << " worst relative error " << worst);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("forward passes are deterministic", "[determinism]")
{
    std::mt19937_64 rng(8);
    auto x = Tensor<float>::normal(Shape{2, 3, 8, 8}, rng);
    auto w = Tensor<float>::normal(Shape{5, 3, 3, 3}, rng);
    auto b = Tensor<float>::normal(Shape{1, 5, 1, 1}, rng);
    CHECK(kernels::conv2d_forward(x, w, b, 2, 1) == kernels::conv2d_forward(x, w, b, 2, 1));
}
