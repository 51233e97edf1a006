#ifndef GCNSR_TENSOR_HPP
#define GCNSR_TENSOR_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gcnsr/errors.hpp"

namespace gcnsr {

/// Extents of an N x C x H x W tensor.
struct Shape {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    constexpr std::size_t numel() const noexcept { return n * c * h * w; }
    constexpr std::size_t plane() const noexcept { return h * w; }
    constexpr std::size_t item() const noexcept { return c * h * w; }
    constexpr std::array<std::size_t, 4> dims() const noexcept { return {n, c, h, w}; }

    friend constexpr bool operator==(const Shape&, const Shape&) = default;

    std::string str() const
    {
        std::ostringstream os;
        os << n << "x" << c << "x" << h << "x" << w;
        return os.str();
    }
};

inline const char* axis_name(std::size_t axis)
{
    static constexpr const char* names[] = {"batch", "channel", "height", "width"};
    return axis < 4 ? names[axis] : "unknown";
}

/// Throws a DimensionError naming the first axis where the shapes differ.
inline void require_same_shape(const Shape& a, const Shape& b, const std::string& what)
{
    const auto da = a.dims();
    const auto db = b.dims();
    for (std::size_t i = 0; i < 4; ++i) {
        if (da[i] != db[i]) {
            throw DimensionError(what + ": " + axis_name(i) + " axis mismatch (" + a.str() + " vs " +
                                 b.str() + ")");
        }
    }
}

/// Dense row-major N x C x H x W array with value semantics.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data))
    {
        if (data_.size() != shape_.numel()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_.str());
        }
    }

    /// Construction from untrusted values: rejects NaN and Inf.
    static Tensor from_external(Shape shape, std::span<const T> values)
    {
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!std::isfinite(values[i])) {
                throw NonFiniteError("non-finite value at flat index " + std::to_string(i));
            }
        }
        return Tensor(shape, std::vector<T>(values.begin(), values.end()));
    }

    static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }

    template <class Rng>
    static Tensor normal(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0)
    {
        std::normal_distribution<double> dist(mean, stddev);
        Tensor t(shape);
        for (auto& v : t.data_)
            v = static_cast<T>(dist(rng));
        return t;
    }

    template <class Rng>
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi)
    {
        std::uniform_real_distribution<double> dist(lo, hi);
        Tensor t(shape);
        for (auto& v : t.data_)
            v = static_cast<T>(dist(rng));
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    auto begin() noexcept { return data_.begin(); }
    auto end() noexcept { return data_.end(); }
    auto begin() const noexcept { return data_.begin(); }
    auto end() const noexcept { return data_.end(); }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept
    {
        return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }
    T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept
    {
        return data_[index(n, c, h, w)];
    }
    const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept
    {
        return data_[index(n, c, h, w)];
    }

    /// Same data, new extents with the same element count.
    Tensor reshaped(Shape s) const
    {
        if (s.numel() != shape_.numel()) {
            throw DimensionError("cannot reshape " + shape_.str() + " to " + s.str());
        }
        return Tensor(s, data_);
    }

    /// Items [first, first + count) along the batch axis.
    Tensor batch_slice(std::size_t first, std::size_t count) const
    {
        if (first + count > shape_.n) {
            throw DimensionError("batch slice out of range for " + shape_.str());
        }
        Shape s{count, shape_.c, shape_.h, shape_.w};
        const auto begin = data_.begin() + static_cast<std::ptrdiff_t>(first * shape_.item());
        return Tensor(s, std::vector<T>(begin, begin + static_cast<std::ptrdiff_t>(s.numel())));
    }

    template <class U>
    Tensor<U> cast() const
    {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const
    {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
    double mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }
    T min() const { return *std::min_element(data_.begin(), data_.end()); }
    T max() const { return *std::max_element(data_.begin(), data_.end()); }

    Tensor& operator+=(const Tensor& o)
    {
        require_same_shape(shape_, o.shape_, "tensor +=");
        for (std::size_t i = 0; i < data_.size(); ++i)
            data_[i] += o.data_[i];
        return *this;
    }

    /// Bitwise equality of shape and every element.
    friend bool operator==(const Tensor& a, const Tensor& b)
    {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_{};
    std::vector<T> data_;
};

/// Stacks equally shaped tensors along the batch axis.
template <class T>
Tensor<T> concat_batch(std::span<const Tensor<T>* const> parts)
{
    if (parts.empty())
        throw DimensionError("concat_batch: no tensors");
    Shape s = parts.front()->shape();
    std::size_t total = 0;
    for (const auto* p : parts) {
        const Shape& ps = p->shape();
        if (ps.c != s.c || ps.h != s.h || ps.w != s.w) {
            throw DimensionError("concat_batch: item shape " + ps.str() + " differs from " + s.str());
        }
        total += ps.n;
    }
    std::vector<T> out;
    out.reserve(total * s.item());
    for (const auto* p : parts)
        out.insert(out.end(), p->begin(), p->end());
    s.n = total;
    return Tensor<T>(s, std::move(out));
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b)
{
    require_same_shape(a.shape(), b.shape(), "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

} // namespace gcnsr

#endif
