#ifndef GCNSR_MODELS_HPP
#define GCNSR_MODELS_HPP

#include <array>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gcnsr/autograd.hpp"
#include "gcnsr/errors.hpp"
#include "gcnsr/parameters.hpp"

namespace gcnsr {

enum class UpsampleMode { subpixel, nearest };

inline const char* to_string(UpsampleMode m) { return m == UpsampleMode::subpixel ? "subpixel" : "nearest"; }

inline UpsampleMode parse_upsample_mode(const std::string& s)
{
    if (s == "subpixel")
        return UpsampleMode::subpixel;
    if (s == "nearest")
        return UpsampleMode::nearest;
    throw ConfigError("unknown upsample mode '" + s + "'");
}

/// SRResNet-style generator: head conv, residual body, two x2 upsamplings, tanh tail.
struct GeneratorSpec {
    std::size_t residual_blocks = 10;
    std::size_t base_channels = 64;
    std::size_t edge_kernel = 9; // first and last convolution
    UpsampleMode upsample = UpsampleMode::subpixel;

    static constexpr std::size_t upsample_stages = 2;
    static constexpr std::size_t image_channels = 3;
    static constexpr std::size_t scale = 4;

    void validate() const
    {
        if (base_channels == 0)
            throw ConfigError("generator.base_channels must be positive");
        if (edge_kernel % 2 == 0)
            throw ConfigError("generator.edge_kernel must be odd");
    }

    friend bool operator==(const GeneratorSpec&, const GeneratorSpec&) = default;
};

/// Eight conv blocks (3x3, LeakyReLU 0.2), 64 to 512 channels doubling every
/// second block, stride 2 on every second block, then two dense layers.
struct DiscriminatorSpec {
    std::size_t input_hw = 32;
    std::size_t dense_hidden = 1024;
    std::size_t outputs = 1; // 1: sigmoid probability; m > 1: class logits

    static constexpr std::size_t conv_blocks = 8;
    static constexpr std::size_t kernel = 3;
    static constexpr std::array<std::size_t, conv_blocks> channels{64, 64, 128, 128, 256, 256, 512, 512};

    static constexpr std::size_t stride(std::size_t block) { return block % 2 == 1 ? 2 : 1; }
    static constexpr std::size_t in_channels(std::size_t block) { return block == 0 ? 3 : channels[block - 1]; }
    std::size_t bottleneck_hw() const { return input_hw / 16; }

    void validate() const
    {
        if (input_hw == 0 || input_hw % 16 != 0)
            throw ConfigError("discriminator.input_hw must be a positive multiple of 16, got " +
                              std::to_string(input_hw));
        if (dense_hidden == 0)
            throw ConfigError("discriminator.dense_hidden must be positive");
        if (outputs == 0)
            throw ConfigError("discriminator.outputs must be positive");
    }

    friend bool operator==(const DiscriminatorSpec&, const DiscriminatorSpec&) = default;
};

/// Encoder is the discriminator conv trunk; decoder mirrors it with
/// pixel-shuffle upsampling back to the input extent and a tanh output.
struct AutoencoderSpec {
    DiscriminatorSpec trunk;

    static constexpr std::array<std::size_t, 4> decoder_channels{256, 128, 64, 64};
};

enum class TapNetwork { discriminator, autoencoder, identity, random, external };

inline const char* to_string(TapNetwork n)
{
    switch (n) {
    case TapNetwork::discriminator: return "discriminator";
    case TapNetwork::autoencoder: return "autoencoder";
    case TapNetwork::identity: return "identity";
    case TapNetwork::random: return "random";
    case TapNetwork::external: return "external";
    }
    return "?";
}

inline TapNetwork parse_tap_network(const std::string& s)
{
    for (auto n : {TapNetwork::discriminator, TapNetwork::autoencoder, TapNetwork::identity, TapNetwork::random,
                   TapNetwork::external})
        if (s == to_string(n))
            return n;
    throw ConfigError("unknown feature network '" + s + "'");
}

/// Where the features extractor ends. Layer l is the output of trunk block l;
/// layer 0 (default) is the first conv + activation at full resolution.
struct FeatureTap {
    TapNetwork network = TapNetwork::discriminator;
    std::size_t layer = 0;
    bool pre_activation = false; // tap the convolution output before its activation

    void validate() const
    {
        if (layer >= DiscriminatorSpec::conv_blocks)
            throw ConfigError("tap layer " + std::to_string(layer) + " out of range [0, 8)");
    }

    friend bool operator==(const FeatureTap&, const FeatureTap&) = default;
};

namespace detail {

inline std::string block_name(std::size_t b) { return "block" + std::to_string(b); }

inline std::string indexed(const char* stem, std::size_t i)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%02zu", stem, i);
    return buf;
}

inline std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t stream)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream)};
    return std::mt19937_64(seq);
}

template <class T, class Rng>
void add_trunk_blocks(ParameterSet<T>& ps, std::size_t first, std::size_t last, Rng& rng)
{
    for (std::size_t b = first; b <= last && b < DiscriminatorSpec::conv_blocks; ++b) {
        const std::string name = block_name(b);
        add_conv(ps, name + ".conv", DiscriminatorSpec::in_channels(b), DiscriminatorSpec::channels[b],
                 DiscriminatorSpec::kernel, rng);
        if (b > 0)
            add_batch_norm(ps, name + ".bn", DiscriminatorSpec::channels[b]);
    }
}

inline void require_image(const Shape& s, const std::string& who)
{
    if (s.c != 3) {
        throw DimensionError(who + ": channel axis must be 3 (RGB), got " + std::to_string(s.c));
    }
}

inline void require_square(const Shape& s, std::size_t hw, const std::string& who)
{
    require_image(s, who);
    if (s.h != hw || s.w != hw) {
        throw DimensionError(who + ": expected " + std::to_string(hw) + "x" + std::to_string(hw) +
                             " input, got " + std::to_string(s.h) + "x" + std::to_string(s.w));
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// generator

template <class T>
ParameterSet<T> build_generator(const GeneratorSpec& spec, std::uint64_t seed)
{
    spec.validate();
    auto rng = detail::seeded(seed, 0x6e6);
    const std::size_t C = spec.base_channels;
    ParameterSet<T> ps;
    add_conv(ps, "head.conv", GeneratorSpec::image_channels, C, spec.edge_kernel, rng);
    add_prelu(ps, "head.prelu", C);
    for (std::size_t i = 0; i < spec.residual_blocks; ++i) {
        const std::string p = detail::indexed("resblock", i);
        add_conv(ps, p + ".conv1", C, C, 3, rng);
        add_batch_norm(ps, p + ".bn1", C);
        add_prelu(ps, p + ".prelu1", C);
        add_conv(ps, p + ".conv2", C, C, 3, rng);
        add_batch_norm(ps, p + ".bn2", C);
        add_prelu(ps, p + ".prelu2", C);
    }
    for (std::size_t s = 0; s < GeneratorSpec::upsample_stages; ++s) {
        const std::string p = "up" + std::to_string(s);
        const std::size_t out = spec.upsample == UpsampleMode::subpixel ? 4 * C : C;
        add_conv(ps, p + ".conv", C, out, 3, rng);
        add_prelu(ps, p + ".prelu", C);
    }
    add_conv(ps, "tail.conv", C, GeneratorSpec::image_channels, spec.edge_kernel, rng);
    return ps;
}

/// LR batch N x 3 x h x w to HR batch N x 3 x 4h x 4w in [-1, 1].
template <class T>
Var<T> generator_forward(const GeneratorSpec& spec, Scope<T>& g, const Var<T>& lr)
{
    detail::require_image(lr.shape(), "generator");
    if (lr.shape().h == 0 || lr.shape().w == 0)
        throw DimensionError("generator: spatial extent must be at least 1");
    Var<T> x = g.prelu("head.prelu", g.conv_same("head.conv", lr));
    for (std::size_t i = 0; i < spec.residual_blocks; ++i) {
        const std::string p = detail::indexed("resblock", i);
        Var<T> y = g.prelu(p + ".prelu1", g.batch_norm(p + ".bn1", g.conv_same(p + ".conv1", x)));
        y = g.prelu(p + ".prelu2", g.batch_norm(p + ".bn2", g.conv_same(p + ".conv2", y)));
        x = ag::add(y, x);
    }
    for (std::size_t s = 0; s < GeneratorSpec::upsample_stages; ++s) {
        const std::string p = "up" + std::to_string(s);
        if (spec.upsample == UpsampleMode::subpixel) {
            x = ag::pixel_shuffle(g.conv_same(p + ".conv", x), 2);
        } else {
            x = g.conv_same(p + ".conv", ag::upsample_nearest(x, 2));
        }
        x = g.prelu(p + ".prelu", x);
    }
    return ag::tanh(g.conv_same("tail.conv", x));
}

/// Eval-mode inference without recording gradients.
template <class T>
Tensor<T> generate(const GeneratorSpec& spec, ParameterSet<T>& params, const Tensor<T>& lr)
{
    Scope<T> scope(params, Binding::inference());
    return generator_forward(spec, scope, Var<T>::constant(lr)).value();
}

/// Number of residual blocks present in a generator ParameterSet.
template <class T>
std::size_t count_residual_blocks(const ParameterSet<T>& ps)
{
    std::size_t count = 0;
    while (!ps.names_with_prefix(detail::indexed("resblock", count) + ".").empty())
        ++count;
    return count;
}

// ---------------------------------------------------------------------------
// features extractor (trunk blocks up to the tap) and heads

/// Blocks [0, tap.layer]: the shared features extractor.
template <class T>
ParameterSet<T> build_extractor(const FeatureTap& tap, std::uint64_t seed)
{
    tap.validate();
    auto rng = detail::seeded(seed, 0xf1);
    ParameterSet<T> ps;
    detail::add_trunk_blocks(ps, 0, tap.layer, rng);
    return ps;
}

template <class T>
ParameterSet<T> build_discriminator_head(const DiscriminatorSpec& spec, const FeatureTap& tap, std::uint64_t seed)
{
    spec.validate();
    tap.validate();
    auto rng = detail::seeded(seed, 0xd15);
    ParameterSet<T> ps;
    detail::add_trunk_blocks(ps, tap.layer + 1, DiscriminatorSpec::conv_blocks - 1, rng);
    const std::size_t flat = DiscriminatorSpec::channels.back() * spec.bottleneck_hw() * spec.bottleneck_hw();
    add_dense(ps, "dense1", flat, spec.dense_hidden, rng);
    add_dense(ps, "dense2", spec.dense_hidden, spec.outputs, rng);
    return ps;
}

template <class T>
ParameterSet<T> build_autoencoder_head(const AutoencoderSpec& spec, const FeatureTap& tap, std::uint64_t seed)
{
    spec.trunk.validate();
    tap.validate();
    auto rng = detail::seeded(seed, 0xae);
    ParameterSet<T> ps;
    detail::add_trunk_blocks(ps, tap.layer + 1, DiscriminatorSpec::conv_blocks - 1, rng);
    std::size_t in = DiscriminatorSpec::channels.back();
    for (std::size_t j = 0; j < AutoencoderSpec::decoder_channels.size(); ++j) {
        const std::size_t out = AutoencoderSpec::decoder_channels[j];
        const std::string p = "dec" + std::to_string(j);
        add_conv(ps, p + ".up", in, 4 * out, 3, rng);
        add_batch_norm(ps, p + ".up_bn", out);
        add_conv(ps, p + ".conv", out, out, 3, rng);
        add_batch_norm(ps, p + ".bn", out);
        in = out;
    }
    add_conv(ps, "out.conv", in, 3, 3, rng);
    return ps;
}

template <class T>
struct TrunkOutput {
    Var<T> tap;                 // features exposed as Phi
    Var<T> carry;               // post-activation output fed to the next block
    std::vector<Var<T>> blocks; // post-activation output of every block run
};

namespace detail {

template <class T>
void run_trunk_block(Scope<T>& s, std::size_t b, Var<T>& x, Var<T>* pre_activation)
{
    const std::string name = block_name(b);
    Var<T> y = s.conv(name + ".conv", x, DiscriminatorSpec::stride(b), DiscriminatorSpec::kernel / 2);
    if (b > 0)
        y = s.batch_norm(name + ".bn", y);
    if (pre_activation)
        *pre_activation = y;
    x = ag::leaky_relu(y);
}

} // namespace detail

/// Runs trunk blocks [0, tap.layer] bound to `phi`.
template <class T>
TrunkOutput<T> extractor_forward(const FeatureTap& tap, Scope<T>& phi, const Var<T>& image)
{
    detail::require_image(image.shape(), "features extractor");
    TrunkOutput<T> out;
    Var<T> x = image;
    for (std::size_t b = 0; b <= tap.layer; ++b) {
        Var<T> pre;
        detail::run_trunk_block(phi, b, x, b == tap.layer ? &pre : nullptr);
        out.blocks.push_back(x);
        if (b == tap.layer)
            out.tap = tap.pre_activation ? pre : x;
    }
    out.carry = x;
    return out;
}

template <class T>
struct DiscriminatorOutput {
    Var<T> logits;
    Var<T> prob; // sigmoid(logits) for single-output discriminators
    Var<T> tap;
    std::vector<Var<T>> taps; // every trunk block output
};

template <class T>
DiscriminatorOutput<T> discriminator_forward(const DiscriminatorSpec& spec, const FeatureTap& tap, Scope<T>& phi,
                                             Scope<T>& head, const Var<T>& image)
{
    detail::require_square(image.shape(), spec.input_hw, "discriminator");
    TrunkOutput<T> trunk = extractor_forward(tap, phi, image);
    DiscriminatorOutput<T> out;
    out.tap = trunk.tap;
    out.taps = trunk.blocks;
    Var<T> x = trunk.carry;
    for (std::size_t b = tap.layer + 1; b < DiscriminatorSpec::conv_blocks; ++b) {
        detail::run_trunk_block<T>(head, b, x, nullptr);
        out.taps.push_back(x);
    }
    x = ag::leaky_relu(head.dense("dense1", x));
    out.logits = head.dense("dense2", x);
    if (spec.outputs == 1)
        out.prob = ag::sigmoid(out.logits);
    return out;
}

template <class T>
struct AutoencoderOutput {
    Var<T> reconstruction;
    Var<T> tap;
    std::vector<Var<T>> taps;
};

template <class T>
AutoencoderOutput<T> autoencoder_forward(const AutoencoderSpec& spec, const FeatureTap& tap, Scope<T>& phi,
                                         Scope<T>& head, const Var<T>& image)
{
    detail::require_square(image.shape(), spec.trunk.input_hw, "autoencoder");
    TrunkOutput<T> trunk = extractor_forward(tap, phi, image);
    AutoencoderOutput<T> out;
    out.tap = trunk.tap;
    out.taps = trunk.blocks;
    Var<T> x = trunk.carry;
    for (std::size_t b = tap.layer + 1; b < DiscriminatorSpec::conv_blocks; ++b) {
        detail::run_trunk_block<T>(head, b, x, nullptr);
        out.taps.push_back(x);
    }
    for (std::size_t j = 0; j < AutoencoderSpec::decoder_channels.size(); ++j) {
        const std::string p = "dec" + std::to_string(j);
        x = ag::pixel_shuffle(head.conv_same(p + ".up", x), 2);
        x = ag::leaky_relu(head.batch_norm(p + ".up_bn", x));
        x = ag::leaky_relu(head.batch_norm(p + ".bn", head.conv_same(p + ".conv", x)));
    }
    out.reconstruction = ag::tanh(head.conv_same("out.conv", x));
    return out;
}

// ---------------------------------------------------------------------------
// external feature networks

/// A chain of same-padded stride-1 convolutions, each followed by
/// LeakyReLU(0.2); every layer output is a tap. Loaded from tensor-archive
/// records `layer<k>.weight`, `layer<k>.bias` and optional per-channel
/// weights `layer<k>.lin`.
template <class T>
class ExternalNetwork {
public:
    struct Layer {
        Tensor<T> weight;
        Tensor<T> bias;
        std::optional<Tensor<T>> channel_weights;
    };

    ExternalNetwork() = default;

    static ExternalNetwork from_records(const std::map<std::string, Tensor<T>>& records)
    {
        ExternalNetwork net;
        for (std::size_t k = 0;; ++k) {
            const std::string p = "layer" + std::to_string(k);
            auto w = records.find(p + ".weight");
            if (w == records.end())
                break;
            auto b = records.find(p + ".bias");
            if (b == records.end())
                throw InterfaceError("external network: missing record '" + p + ".bias'");
            const Shape& ws = w->second.shape();
            if (ws.h != ws.w || ws.h % 2 == 0)
                throw InterfaceError("external network: '" + p + ".weight' must have an odd square kernel");
            const std::size_t cin = k == 0 ? 3 : net.layers_.back().weight.shape().n;
            if (ws.c != cin) {
                throw InterfaceError("external network: '" + p + ".weight' expects " + std::to_string(ws.c) +
                                     " input channels, previous layer yields " + std::to_string(cin));
            }
            if (b->second.size() != ws.n)
                throw InterfaceError("external network: '" + p + ".bias' length mismatch");
            Layer layer{w->second, b->second.reshaped(Shape{1, ws.n, 1, 1}), std::nullopt};
            if (auto lin = records.find(p + ".lin"); lin != records.end()) {
                if (lin->second.size() != ws.n)
                    throw InterfaceError("external network: '" + p + ".lin' length mismatch");
                layer.channel_weights = lin->second.reshaped(Shape{1, ws.n, 1, 1});
            }
            net.layers_.push_back(std::move(layer));
        }
        if (net.layers_.empty())
            throw InterfaceError("external network: archive has no 'layer0.weight' record");
        return net;
    }

    /// Records that reproduce this network through from_records().
    std::map<std::string, Tensor<T>> records() const
    {
        std::map<std::string, Tensor<T>> out;
        for (std::size_t k = 0; k < layers_.size(); ++k) {
            const std::string p = "layer" + std::to_string(k);
            out.emplace(p + ".weight", layers_[k].weight);
            out.emplace(p + ".bias", layers_[k].bias);
            if (layers_[k].channel_weights)
                out.emplace(p + ".lin", *layers_[k].channel_weights);
        }
        return out;
    }

    std::vector<Var<T>> forward(const Var<T>& image) const
    {
        detail::require_image(image.shape(), "external network");
        std::vector<Var<T>> taps;
        Var<T> x = image;
        for (const auto& l : layers_) {
            x = ag::leaky_relu(ag::conv2d(x, Var<T>::constant(l.weight), Var<T>::constant(l.bias), 1,
                                          l.weight.shape().h / 2));
            taps.push_back(x);
        }
        return taps;
    }

    const std::vector<Layer>& layers() const { return layers_; }

private:
    std::vector<Layer> layers_;
};

/// An extractor's first-block convolution exported in the external format.
template <class T>
ExternalNetwork<T> export_first_block(const ParameterSet<T>& phi)
{
    std::map<std::string, Tensor<T>> records;
    records.emplace("layer0.weight", phi.entry("block0.conv.weight").value);
    records.emplace("layer0.bias", phi.entry("block0.conv.bias").value);
    return ExternalNetwork<T>::from_records(records);
}

// ---------------------------------------------------------------------------

/// Everything needed to evaluate Phi for a tap.
template <class T>
struct FeatureSource {
    FeatureTap tap;
    ParameterSet<T>* phi = nullptr;               // discriminator / autoencoder / random
    const ExternalNetwork<T>* external = nullptr; // external
};

/// Phi(image) for the tap. Identity returns the image; random taps are always
/// evaluated frozen.
template <class T>
Var<T> extract_features(const FeatureSource<T>& src, const Var<T>& image, Binding binding = Binding::frozen_train())
{
    switch (src.tap.network) {
    case TapNetwork::identity:
        return image;
    case TapNetwork::external: {
        if (!src.external)
            throw InterfaceError("external feature network not loaded");
        auto taps = src.external->forward(image);
        if (src.tap.layer >= taps.size()) {
            throw InterfaceError("external feature network has " + std::to_string(taps.size()) +
                                 " layers, tap requests layer " + std::to_string(src.tap.layer));
        }
        return taps[src.tap.layer];
    }
    case TapNetwork::random:
        binding.trainable = false;
        binding.update_stats = false;
        [[fallthrough]];
    case TapNetwork::discriminator:
    case TapNetwork::autoencoder: {
        if (!src.phi)
            throw InterfaceError(std::string("feature network '") + to_string(src.tap.network) + "' not built");
        Scope<T> scope(*src.phi, binding);
        return extractor_forward(src.tap, scope, image).tap;
    }
    }
    throw ConfigError("unreachable tap network");
}

} // namespace gcnsr

#endif
