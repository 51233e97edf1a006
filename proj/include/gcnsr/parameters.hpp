#ifndef GCNSR_PARAMETERS_HPP
#define GCNSR_PARAMETERS_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "gcnsr/autograd.hpp"
#include "gcnsr/errors.hpp"
#include "gcnsr/tensor.hpp"

namespace gcnsr {

template <class T>
struct ParameterEntry {
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> adam_m;
    Tensor<T> adam_v;

    explicit ParameterEntry(Tensor<T> v)
        : value(std::move(v)), grad(value.shape()), adam_m(value.shape()), adam_v(value.shape())
    {
    }

    friend bool operator==(const ParameterEntry&, const ParameterEntry&) = default;
};

/// Named trainable tensors with gradient slots and Adam moments, plus
/// non-trainable buffers (batch-norm running statistics).
template <class T>
class ParameterSet {
public:
    ParameterEntry<T>& add(const std::string& name, Tensor<T> value)
    {
        auto [it, inserted] = entries_.try_emplace(name, std::move(value));
        if (!inserted)
            throw ConfigError("duplicate parameter '" + name + "'");
        return it->second;
    }

    Tensor<T>& add_buffer(const std::string& name, Tensor<T> value)
    {
        auto [it, inserted] = buffers_.try_emplace(name, std::move(value));
        if (!inserted)
            throw ConfigError("duplicate buffer '" + name + "'");
        return it->second;
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    bool contains_buffer(const std::string& name) const { return buffers_.count(name) != 0; }

    ParameterEntry<T>& entry(const std::string& name)
    {
        auto it = entries_.find(name);
        if (it == entries_.end())
            throw InterfaceError("no parameter named '" + name + "'");
        return it->second;
    }
    const ParameterEntry<T>& entry(const std::string& name) const
    {
        auto it = entries_.find(name);
        if (it == entries_.end())
            throw InterfaceError("no parameter named '" + name + "'");
        return it->second;
    }

    Tensor<T>& buffer(const std::string& name)
    {
        auto it = buffers_.find(name);
        if (it == buffers_.end())
            throw InterfaceError("no buffer named '" + name + "'");
        return it->second;
    }
    const Tensor<T>& buffer(const std::string& name) const
    {
        auto it = buffers_.find(name);
        if (it == buffers_.end())
            throw InterfaceError("no buffer named '" + name + "'");
        return it->second;
    }

    std::map<std::string, ParameterEntry<T>>& entries() { return entries_; }
    const std::map<std::string, ParameterEntry<T>>& entries() const { return entries_; }
    std::map<std::string, Tensor<T>>& buffers() { return buffers_; }
    const std::map<std::string, Tensor<T>>& buffers() const { return buffers_; }

    std::vector<std::string> names_with_prefix(const std::string& prefix) const
    {
        std::vector<std::string> out;
        for (auto it = entries_.lower_bound(prefix); it != entries_.end(); ++it) {
            if (it->first.compare(0, prefix.size(), prefix) != 0)
                break;
            out.push_back(it->first);
        }
        return out;
    }

    std::size_t parameter_count() const
    {
        std::size_t total = 0;
        for (const auto& [_, e] : entries_)
            total += e.value.size();
        return total;
    }

    bool empty() const { return entries_.empty(); }

    void zero_grad()
    {
        for (auto& [_, e] : entries_)
            e.grad.fill(T(0));
    }

    std::uint64_t step_count() const { return step_count_; }
    void set_step_count(std::uint64_t t) { step_count_ = t; }

    /// Values and buffers only; ignores optimizer state.
    bool same_values(const ParameterSet& o) const
    {
        if (entries_.size() != o.entries_.size() || buffers_ != o.buffers_)
            return false;
        for (const auto& [name, e] : entries_) {
            auto it = o.entries_.find(name);
            if (it == o.entries_.end() || !(it->second.value == e.value))
                return false;
        }
        return true;
    }

    friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

private:
    std::map<std::string, ParameterEntry<T>> entries_;
    std::map<std::string, Tensor<T>> buffers_;
    std::uint64_t step_count_ = 0;
};

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double decay = 0.0; // inverse-time decay of lr: lr / (1 + decay * t)

    void validate() const
    {
        if (!(lr > 0.0))
            throw ConfigError("adam.lr must be positive");
        if (!(beta1 > 0.0 && beta1 < 1.0))
            throw ConfigError("adam.beta1 must lie in (0, 1)");
        if (!(beta2 > 0.0 && beta2 < 1.0))
            throw ConfigError("adam.beta2 must lie in (0, 1)");
        if (!(eps > 0.0))
            throw ConfigError("adam.eps must be positive");
        if (!(decay >= 0.0))
            throw ConfigError("adam.decay must be non-negative");
    }

    friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

/// One bias-corrected Adam update of every entry, then gradients are zeroed.
/// A non-finite gradient aborts before any value changes.
template <class T>
void adam_step(ParameterSet<T>& params, const AdamConfig& cfg)
{
    for (const auto& [name, e] : params.entries()) {
        if (!e.grad.all_finite())
            throw NonFiniteError("non-finite gradient for parameter '" + name + "'");
    }
    const std::uint64_t t = params.step_count() + 1;
    const double lr = cfg.lr / (1.0 + cfg.decay * static_cast<double>(params.step_count()));
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    // Arithmetic runs in the parameter precision with the bias corrections
    // folded into two scalars: value -= step * m / (sqrt(v) * inv_sqrt_c2 + eps).
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T one_b1 = static_cast<T>(1.0 - cfg.beta1), one_b2 = static_cast<T>(1.0 - cfg.beta2);
    const T step = static_cast<T>(lr / c1);
    const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
    const T eps = static_cast<T>(cfg.eps);
    for (auto& [_, e] : params.entries()) {
        T* __restrict value = e.value.data();
        T* __restrict grad = e.grad.data();
        T* __restrict am = e.adam_m.data();
        T* __restrict av = e.adam_v.data();
        const std::size_t n = e.value.size();
        for (std::size_t i = 0; i < n; ++i) {
            const T g = grad[i];
            const T m = b1 * am[i] + one_b1 * g;
            const T v = b2 * av[i] + one_b2 * g * g;
            am[i] = m;
            av[i] = v;
            value[i] -= step * m / (std::sqrt(v) * inv_sqrt_c2 + eps);
            grad[i] = T(0);
        }
    }
    params.set_step_count(t);
}

// ---------------------------------------------------------------------------
// initialization: He-normal weights, zero biases, PReLU slope 0.25, BN (1, 0)

inline constexpr double kPreluInitSlope = 0.25;

template <class T, class Rng>
void add_conv(ParameterSet<T>& ps, const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k,
              Rng& rng)
{
    const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
    ps.add(prefix + ".weight", Tensor<T>::normal(Shape{cout, cin, k, k}, rng, 0.0, stddev));
    ps.add(prefix + ".bias", Tensor<T>(Shape{1, cout, 1, 1}));
}

template <class T, class Rng>
void add_dense(ParameterSet<T>& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng)
{
    const double stddev = std::sqrt(2.0 / static_cast<double>(in));
    ps.add(prefix + ".weight", Tensor<T>::normal(Shape{1, 1, in, out}, rng, 0.0, stddev));
    ps.add(prefix + ".bias", Tensor<T>(Shape{1, out, 1, 1}));
}

template <class T>
void add_batch_norm(ParameterSet<T>& ps, const std::string& prefix, std::size_t channels)
{
    ps.add(prefix + ".gamma", Tensor<T>(Shape{1, channels, 1, 1}, T(1)));
    ps.add(prefix + ".beta", Tensor<T>(Shape{1, channels, 1, 1}));
    ps.add_buffer(prefix + ".running_mean", Tensor<T>(Shape{1, channels, 1, 1}));
    ps.add_buffer(prefix + ".running_var", Tensor<T>(Shape{1, channels, 1, 1}, T(1)));
}

template <class T>
void add_prelu(ParameterSet<T>& ps, const std::string& prefix, std::size_t channels)
{
    ps.add(prefix + ".slope", Tensor<T>(Shape{1, channels, 1, 1}, static_cast<T>(kPreluInitSlope)));
}

// ---------------------------------------------------------------------------

/// How a ParameterSet participates in one forward pass.
struct Binding {
    bool trainable = false;   // parameters receive gradients
    bool train_mode = false;  // batch-norm uses batch statistics
    bool update_stats = false; // batch-norm running statistics are refreshed

    static constexpr Binding training() { return {true, true, true}; }
    /// Batch statistics, no gradient to these parameters, running stats untouched.
    static constexpr Binding frozen_train() { return {false, true, false}; }
    static constexpr Binding inference() { return {false, false, false}; }
};

/// Binds a ParameterSet to a graph: hands out parameter leaves and applies
/// layers by name prefix.
template <class T>
class Scope {
public:
    Scope(ParameterSet<T>& params, Binding binding) : params_(&params), binding_(binding) {}

    Var<T> param(const std::string& name)
    {
        auto& e = params_->entry(name);
        return Var<T>::parameter(e.value, &e.grad, binding_.trainable);
    }

    Var<T> conv(const std::string& prefix, const Var<T>& x, std::size_t stride, std::size_t pad)
    {
        return ag::conv2d(x, param(prefix + ".weight"), param(prefix + ".bias"), stride, pad);
    }

    /// Same-padded stride-s convolution for odd kernels.
    Var<T> conv_same(const std::string& prefix, const Var<T>& x, std::size_t stride = 1)
    {
        const std::size_t k = params_->entry(prefix + ".weight").value.shape().h;
        return conv(prefix, x, stride, k / 2);
    }

    Var<T> batch_norm(const std::string& prefix, const Var<T>& x)
    {
        return ag::batch_norm(x, param(prefix + ".gamma"), param(prefix + ".beta"),
                              &params_->buffer(prefix + ".running_mean"), &params_->buffer(prefix + ".running_var"),
                              binding_.train_mode ? kernels::NormMode::train : kernels::NormMode::eval,
                              binding_.update_stats);
    }

    Var<T> prelu(const std::string& prefix, const Var<T>& x) { return ag::prelu(x, param(prefix + ".slope")); }

    Var<T> dense(const std::string& prefix, const Var<T>& x)
    {
        return ag::dense(x, param(prefix + ".weight"), param(prefix + ".bias"));
    }

    ParameterSet<T>& params() { return *params_; }
    const Binding& binding() const { return binding_; }

private:
    ParameterSet<T>* params_;
    Binding binding_;
};

} // namespace gcnsr

#endif
