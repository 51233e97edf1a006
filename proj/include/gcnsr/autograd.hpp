#ifndef GCNSR_AUTOGRAD_HPP
#define GCNSR_AUTOGRAD_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gcnsr/errors.hpp"
#include "gcnsr/kernels.hpp"
#include "gcnsr/tensor.hpp"

namespace gcnsr {

namespace detail {

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Tensor<T>* sink = nullptr; // parameter gradient slot, accumulated into after backward
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void accumulate(Tensor<T>&& g)
    {
        if (!requires_grad)
            return;
        if (!has_grad) {
            grad = std::move(g);
            has_grad = true;
        } else {
            grad += g;
        }
    }
};

} // namespace detail

/// Handle to a value in a dynamically recorded computation graph.
template <class T>
class Var {
public:
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    /// A value that never receives gradients.
    static Var constant(Tensor<T> value)
    {
        auto n = std::make_shared<detail::Node<T>>();
        n->value = std::move(value);
        return Var(std::move(n));
    }

    /// A leaf whose gradient is kept on the node (read it with grad()).
    static Var input(Tensor<T> value)
    {
        auto n = std::make_shared<detail::Node<T>>();
        n->value = std::move(value);
        n->requires_grad = true;
        return Var(std::move(n));
    }

    /// A leaf bound to a parameter; gradients accumulate into `sink` when trainable.
    static Var parameter(const Tensor<T>& value, Tensor<T>* sink, bool trainable)
    {
        auto n = std::make_shared<detail::Node<T>>();
        n->value = value;
        n->requires_grad = trainable;
        n->sink = trainable ? sink : nullptr;
        return Var(std::move(n));
    }

    const Tensor<T>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool has_grad() const { return node_ && node_->has_grad; }

    /// Gradient after backward(); zeros if nothing flowed here.
    Tensor<T> grad() const { return node_->has_grad ? node_->grad : Tensor<T>(node_->value.shape()); }

    /// Scalar value of a 1-element variable.
    T item() const
    {
        if (node_->value.size() != 1)
            throw DimensionError("item() on non-scalar of shape " + node_->value.shape().str());
        return node_->value[0];
    }

    const NodePtr& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    NodePtr node_;
};

namespace detail {

template <class T>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> parents,
                   std::function<void(Node<T>&)> backward)
{
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (const auto& p : parents)
        n->requires_grad = n->requires_grad || p.requires_grad();
    if (n->requires_grad) {
        for (const auto& p : parents)
            n->parents.push_back(p.node());
        n->backward = std::move(backward);
    }
    return Var<T>(std::move(n));
}

} // namespace detail

/// Reverse-mode sweep from a scalar root. Parameter leaves add their
/// gradient into their sinks; graph closures are released as they run.
template <class T>
void backward(const Var<T>& root)
{
    if (root.value().size() != 1)
        throw DimensionError("backward: root must be a scalar, got " + root.shape().str());
    if (!root.requires_grad())
        return;

    using NodeT = detail::Node<T>;
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> seen;
    std::vector<std::pair<NodeT*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second)
                stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->accumulate(Tensor<T>::scalar(T(1)));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* n = *it;
        if (!n->has_grad)
            continue;
        if (n->backward) {
            n->backward(*n);
            n->backward = nullptr;
        }
        if (n->sink)
            *n->sink += n->grad;
    }
}

namespace ag {

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t pad)
{
    Tensor<T> out = kernels::conv2d_forward(x.value(), weight.value(), bias.value(), stride, pad);
    return detail::make_result<T>(std::move(out), {x, weight, bias}, [stride, pad](detail::Node<T>& self) {
        auto& in = self.parents[0];
        auto& w = self.parents[1];
        auto& b = self.parents[2];
        auto g = kernels::conv2d_backward(in->value, w->value, b->value, self.grad, stride, pad,
                                          in->requires_grad, w->requires_grad, b->requires_grad);
        if (g.input)
            in->accumulate(std::move(*g.input));
        if (g.weight)
            w->accumulate(std::move(*g.weight));
        if (g.bias)
            b->accumulate(std::move(*g.bias));
    });
}

/// Running statistics are updated only when both pointers are non-null.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>* running_mean,
                  Tensor<T>* running_var, kernels::NormMode mode, bool update_running)
{
    auto cache = std::make_shared<kernels::BatchNormCache<T>>();
    Tensor<T> out;
    if (mode == kernels::NormMode::train) {
        out = kernels::batch_norm_forward(x.value(), gamma.value(), beta.value(),
                                          update_running ? running_mean : nullptr,
                                          update_running ? running_var : nullptr, mode, cache.get());
    } else {
        out = kernels::batch_norm_forward(x.value(), gamma.value(), beta.value(), running_mean, running_var,
                                          mode, cache.get());
    }
    return detail::make_result<T>(std::move(out), {x, gamma, beta}, [cache, mode](detail::Node<T>& self) {
        auto g = kernels::batch_norm_backward(self.grad, self.parents[1]->value, *cache, mode);
        self.parents[0]->accumulate(std::move(g.input));
        self.parents[1]->accumulate(std::move(g.gamma));
        self.parents[2]->accumulate(std::move(g.beta));
    });
}

template <class T>
Var<T> activation(kernels::Activation kind, const Var<T>& x, const Var<T>* slope = nullptr)
{
    if (kind == kernels::Activation::prelu && (slope == nullptr || !*slope))
        throw ConfigError("prelu requires a learnable slope tensor");
    Tensor<T> out = kernels::activation_forward(kind, x.value(), slope ? &slope->value() : nullptr);
    auto backward_fn = [kind](detail::Node<T>& self) {
        auto& in = self.parents[0];
        const bool with_slope = self.parents.size() > 1;
        const Tensor<T>* s = with_slope ? &self.parents[1]->value : nullptr;
        auto g = kernels::activation_backward(kind, in->value, self.value, self.grad, s,
                                              with_slope && self.parents[1]->requires_grad);
        in->accumulate(std::move(g.input));
        if (g.slope)
            self.parents[1]->accumulate(std::move(*g.slope));
    };
    if (slope)
        return detail::make_result<T>(std::move(out), {x, *slope}, backward_fn);
    return detail::make_result<T>(std::move(out), {x}, backward_fn);
}

template <class T>
Var<T> prelu(const Var<T>& x, const Var<T>& slope)
{
    return activation(kernels::Activation::prelu, x, &slope);
}

template <class T>
Var<T> leaky_relu(const Var<T>& x)
{
    return activation(kernels::Activation::leaky_relu, x);
}

template <class T>
Var<T> tanh(const Var<T>& x)
{
    return activation(kernels::Activation::tanh, x);
}

template <class T>
Var<T> sigmoid(const Var<T>& x)
{
    return activation(kernels::Activation::sigmoid, x);
}

template <class T>
Var<T> dense(const Var<T>& x, const Var<T>& weight, const Var<T>& bias)
{
    Tensor<T> out = kernels::dense_forward(x.value(), weight.value(), bias.value());
    return detail::make_result<T>(std::move(out), {x, weight, bias}, [](detail::Node<T>& self) {
        auto& in = self.parents[0];
        auto& w = self.parents[1];
        auto& b = self.parents[2];
        auto g = kernels::dense_backward(in->value, w->value, self.grad, in->requires_grad, w->requires_grad,
                                         b->requires_grad);
        if (g.input)
            in->accumulate(std::move(*g.input));
        if (g.weight)
            w->accumulate(std::move(*g.weight));
        if (g.bias)
            b->accumulate(std::move(*g.bias));
    });
}

template <class T>
Var<T> pixel_shuffle(const Var<T>& x, std::size_t r)
{
    return detail::make_result<T>(kernels::pixel_shuffle(x.value(), r), {x}, [r](detail::Node<T>& self) {
        self.parents[0]->accumulate(kernels::pixel_unshuffle(self.grad, r));
    });
}

template <class T>
Var<T> upsample_nearest(const Var<T>& x, std::size_t r)
{
    return detail::make_result<T>(kernels::upsample_nearest(x.value(), r), {x}, [r](detail::Node<T>& self) {
        self.parents[0]->accumulate(kernels::upsample_nearest_backward(self.grad, r));
    });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b)
{
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out = a.value();
    out += b.value();
    return detail::make_result<T>(std::move(out), {a, b}, [](detail::Node<T>& self) {
        if (self.parents[1]->requires_grad)
            self.parents[1]->accumulate(Tensor<T>(self.grad));
        self.parents[0]->accumulate(std::move(self.grad));
    });
}

/// Scalar c * a for a scalar variable a.
template <class T>
Var<T> scale(const Var<T>& a, double c)
{
    Tensor<T> out = a.value();
    for (auto& v : out)
        v = static_cast<T>(v * c);
    return detail::make_result<T>(std::move(out), {a}, [c](detail::Node<T>& self) {
        Tensor<T> g = self.grad;
        for (auto& v : g)
            v = static_cast<T>(v * c);
        self.parents[0]->accumulate(std::move(g));
    });
}

/// Sum of two scalar variables.
template <class T>
Var<T> add_scalars(const Var<T>& a, const Var<T>& b)
{
    if (a.value().size() != 1 || b.value().size() != 1)
        throw DimensionError("add_scalars: operands must be scalars");
    return detail::make_result<T>(Tensor<T>::scalar(a.item() + b.item()), {a, b}, [](detail::Node<T>& self) {
        self.parents[0]->accumulate(Tensor<T>(self.grad));
        self.parents[1]->accumulate(Tensor<T>(self.grad));
    });
}

/// mean over all elements of (a - b)^2
template <class T>
Var<T> mean_squared_error(const Var<T>& a, const Var<T>& b)
{
    require_same_shape(a.shape(), b.shape(), "mean_squared_error");
    const std::size_t count = a.value().size();
    if (count == 0)
        throw DimensionError("mean_squared_error: empty tensors");
    double acc = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double d = static_cast<double>(a.value()[i]) - b.value()[i];
        acc += d * d;
    }
    const double inv = 1.0 / static_cast<double>(count);
    return detail::make_result<T>(Tensor<T>::scalar(static_cast<T>(acc * inv)), {a, b},
                                  [inv](detail::Node<T>& self) {
                                      const double up = self.grad[0];
                                      const auto& av = self.parents[0]->value;
                                      const auto& bv = self.parents[1]->value;
                                      Tensor<T> ga(av.shape());
                                      for (std::size_t i = 0; i < av.size(); ++i)
                                          ga[i] = static_cast<T>(2.0 * inv * up * (static_cast<double>(av[i]) - bv[i]));
                                      if (self.parents[1]->requires_grad) {
                                          Tensor<T> gb = ga;
                                          for (auto& v : gb)
                                              v = -v;
                                          self.parents[1]->accumulate(std::move(gb));
                                      }
                                      self.parents[0]->accumulate(std::move(ga));
                                  });
}

/// sum(x * weights) for constant weights; projects a tensor to a scalar.
template <class T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights)
{
    require_same_shape(x.shape(), weights.shape(), "weighted_sum");
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i)
        acc += static_cast<double>(x.value()[i]) * weights[i];
    return detail::make_result<T>(Tensor<T>::scalar(static_cast<T>(acc)), {x}, [weights](detail::Node<T>& self) {
        Tensor<T> g = weights;
        const T up = self.grad[0];
        for (auto& v : g)
            v *= up;
        self.parents[0]->accumulate(std::move(g));
    });
}

inline constexpr double kProbabilityClamp = 1e-7;

/// mean(log(clamp(p))), or mean(log(1 - clamp(p))) when `complement`.
/// Clamped entries pass no gradient.
template <class T>
Var<T> mean_log_probability(const Var<T>& p, bool complement)
{
    const std::size_t count = p.value().size();
    if (count == 0)
        throw DimensionError("mean_log_probability: empty tensor");
    const double lo = kProbabilityClamp;
    const double hi = 1.0 - kProbabilityClamp;
    double acc = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double q = std::clamp(static_cast<double>(p.value()[i]), lo, hi);
        acc += complement ? std::log1p(-q) : std::log(q);
    }
    const double inv = 1.0 / static_cast<double>(count);
    return detail::make_result<T>(Tensor<T>::scalar(static_cast<T>(acc * inv)), {p},
                                  [inv, complement, lo, hi](detail::Node<T>& self) {
                                      const auto& pv = self.parents[0]->value;
                                      const double up = self.grad[0];
                                      Tensor<T> g(pv.shape());
                                      for (std::size_t i = 0; i < pv.size(); ++i) {
                                          const double q = pv[i];
                                          if (q <= lo || q >= hi)
                                              continue;
                                          g[i] = static_cast<T>(up * inv * (complement ? -1.0 / (1.0 - q) : 1.0 / q));
                                      }
                                      self.parents[0]->accumulate(std::move(g));
                                  });
}

/// Mean softmax negative log-likelihood; logits N x m (trailing extents flattened).
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels)
{
    const Shape& s = logits.shape();
    const std::size_t N = s.n;
    const std::size_t m = s.item();
    if (m < 2)
        throw DimensionError("softmax_cross_entropy: need at least 2 classes, got " + std::to_string(m));
    if (labels.size() != N) {
        throw DimensionError("softmax_cross_entropy: batch axis has " + std::to_string(N) + " items but " +
                             std::to_string(labels.size()) + " labels");
    }
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= m)
            throw DataError("label " + std::to_string(l) + " out of range [0, " + std::to_string(m) + ")");
    }
    auto probs = std::make_shared<Tensor<T>>(s);
    std::vector<int> lab(labels.begin(), labels.end());
    double loss = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        const T* z = logits.value().data() + n * m;
        const double zmax = *std::max_element(z, z + m);
        double denom = 0.0;
        for (std::size_t j = 0; j < m; ++j)
            denom += std::exp(z[j] - zmax);
        for (std::size_t j = 0; j < m; ++j)
            (*probs)[n * m + j] = static_cast<T>(std::exp(z[j] - zmax) / denom);
        loss += -(z[lab[n]] - zmax - std::log(denom));
    }
    const double inv = 1.0 / static_cast<double>(N);
    return detail::make_result<T>(Tensor<T>::scalar(static_cast<T>(loss * inv)), {logits},
                                  [probs, lab, inv, m](detail::Node<T>& self) {
                                      Tensor<T> g = *probs;
                                      const double up = self.grad[0];
                                      for (std::size_t n = 0; n < lab.size(); ++n)
                                          g[n * m + static_cast<std::size_t>(lab[n])] -= T(1);
                                      for (auto& v : g)
                                          v = static_cast<T>(v * up * inv);
                                      self.parents[0]->accumulate(std::move(g));
                                  });
}

} // namespace ag
} // namespace gcnsr

#endif
