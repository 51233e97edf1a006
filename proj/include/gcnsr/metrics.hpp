#ifndef GCNSR_METRICS_HPP
#define GCNSR_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcnsr/errors.hpp"
#include "gcnsr/models.hpp"
#include "gcnsr/tensor.hpp"

namespace gcnsr {

inline constexpr double kDynamicRange = 2.0; // images live in [-1, 1]
inline constexpr double kFeatureNormEps = 1e-10;

struct SsimConstants {
    std::size_t window = 8;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = kDynamicRange;
};

// ---------------------------------------------------------------------------
// pixel metrics

template <class T>
double l2_error(const Tensor<T>& x, const Tensor<T>& y)
{
    require_same_shape(x.shape(), y.shape(), "l2_error");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
        acc += d * d;
    }
    return x.empty() ? 0.0 : acc / static_cast<double>(x.size());
}

/// 10 log10(L^2 / mse) in dB; +inf when mse is 0.
inline double psnr_from_mse(double mse)
{
    if (mse == 0.0)
        return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(kDynamicRange * kDynamicRange / mse);
}

template <class T>
double psnr(const Tensor<T>& x, const Tensor<T>& y)
{
    return psnr_from_mse(l2_error(x, y));
}

namespace detail {

// Channel-mean luminance of item n as a row-major H x W plane.
template <class T>
std::vector<double> luminance(const Tensor<T>& t, std::size_t n)
{
    const Shape& s = t.shape();
    std::vector<double> out(s.plane(), 0.0);
    for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t i = 0; i < s.plane(); ++i)
            out[i] += static_cast<double>(t[(n * s.c + c) * s.plane() + i]);
    for (double& v : out)
        v /= static_cast<double>(s.c);
    return out;
}

} // namespace detail

/// Mean local SSIM over every valid window position of the channel-mean
/// luminance (uniform window, population statistics), averaged over the batch.
template <class T>
double ssim(const Tensor<T>& x, const Tensor<T>& y, const SsimConstants& k = {})
{
    require_same_shape(x.shape(), y.shape(), "ssim");
    const Shape& s = x.shape();
    if (s.h < k.window || s.w < k.window) {
        throw DimensionError("ssim: image " + std::to_string(s.h) + "x" + std::to_string(s.w) + " smaller than the " +
                             std::to_string(k.window) + "x" + std::to_string(k.window) + " window");
    }
    const double c1 = (k.k1 * k.dynamic_range) * (k.k1 * k.dynamic_range);
    const double c2 = (k.k2 * k.dynamic_range) * (k.k2 * k.dynamic_range);
    const double inv = 1.0 / static_cast<double>(k.window * k.window);
    double total = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
        const auto a = detail::luminance(x, n);
        const auto b = detail::luminance(y, n);
        double item = 0.0;
        std::size_t windows = 0;
        for (std::size_t i = 0; i + k.window <= s.h; ++i)
            for (std::size_t j = 0; j + k.window <= s.w; ++j) {
                double ma = 0, mb = 0;
                for (std::size_t u = 0; u < k.window; ++u)
                    for (std::size_t v = 0; v < k.window; ++v) {
                        ma += a[(i + u) * s.w + j + v];
                        mb += b[(i + u) * s.w + j + v];
                    }
                ma *= inv;
                mb *= inv;
                double va = 0, vb = 0, cov = 0;
                for (std::size_t u = 0; u < k.window; ++u)
                    for (std::size_t v = 0; v < k.window; ++v) {
                        const double da = a[(i + u) * s.w + j + v] - ma;
                        const double db = b[(i + u) * s.w + j + v] - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                va *= inv;
                vb *= inv;
                cov *= inv;
                item += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++windows;
            }
        total += item / static_cast<double>(windows);
    }
    return total / static_cast<double>(s.n);
}

// ---------------------------------------------------------------------------
// deep-feature distance

/// A frozen feature network for d_phi: per-layer activations plus optional
/// per-channel weights w_l (empty means all ones).
template <class T>
struct MetricNet {
    std::string name;
    std::string kind;
    std::function<std::vector<Tensor<T>>(const Tensor<T>&)> features;
    std::vector<Tensor<T>> weights;
};

/// Divides every spatial feature vector by its channel norm plus eps.
template <class T>
Tensor<T> unit_normalize_channels(const Tensor<T>& f, double eps = kFeatureNormEps)
{
    const Shape& s = f.shape();
    Tensor<T> out(s);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t p = 0; p < s.plane(); ++p) {
            double norm = 0.0;
            for (std::size_t c = 0; c < s.c; ++c) {
                const double v = static_cast<double>(f[(n * s.c + c) * s.plane() + p]);
                norm += v * v;
            }
            const double scale = 1.0 / (std::sqrt(norm) + eps);
            for (std::size_t c = 0; c < s.c; ++c) {
                const std::size_t i = (n * s.c + c) * s.plane() + p;
                out[i] = static_cast<T>(static_cast<double>(f[i]) * scale);
            }
        }
    return out;
}

/// d_phi for each batch item, from precomputed layer activations.
template <class T>
std::vector<double> d_phi_from_features(const std::vector<Tensor<T>>& fx, const std::vector<Tensor<T>>& fy,
                                        const std::vector<Tensor<T>>& weights, double eps = kFeatureNormEps)
{
    if (fx.size() != fy.size())
        throw DimensionError("d_phi: layer count mismatch");
    if (!weights.empty() && weights.size() != fx.size())
        throw ConfigError("d_phi: " + std::to_string(weights.size()) + " weight vectors for " +
                          std::to_string(fx.size()) + " layers");
    std::vector<double> out(fx.empty() ? 0 : fx.front().shape().n, 0.0);
    for (std::size_t l = 0; l < fx.size(); ++l) {
        require_same_shape(fx[l].shape(), fy[l].shape(), "d_phi");
        const Shape& s = fx[l].shape();
        if (!weights.empty() && weights[l].size() != s.c)
            throw ConfigError("d_phi: layer " + std::to_string(l) + " weight length mismatch");
        const auto a = unit_normalize_channels(fx[l], eps);
        const auto b = unit_normalize_channels(fy[l], eps);
        for (std::size_t n = 0; n < s.n; ++n) {
            double acc = 0.0;
            for (std::size_t c = 0; c < s.c; ++c) {
                const double w = weights.empty() ? 1.0 : static_cast<double>(weights[l][c]);
                const std::size_t base = (n * s.c + c) * s.plane();
                for (std::size_t p = 0; p < s.plane(); ++p) {
                    const double d = w * (static_cast<double>(a[base + p]) - static_cast<double>(b[base + p]));
                    acc += d * d;
                }
            }
            out[n] += acc / static_cast<double>(s.plane());
        }
    }
    return out;
}

/// Mean d_phi over the batch items of x and y.
template <class T>
double d_phi(const Tensor<T>& x, const Tensor<T>& y, const MetricNet<T>& net, double eps = kFeatureNormEps)
{
    require_same_shape(x.shape(), y.shape(), "d_phi");
    const auto per_item = d_phi_from_features(net.features(x), net.features(y), net.weights, eps);
    double total = 0.0;
    for (double v : per_item)
        total += v;
    return per_item.empty() ? 0.0 : total / static_cast<double>(per_item.size());
}

/// (1 / N) sum_i d_phi(sr_i, hr_i).
template <class T>
double perceptual_error(const std::vector<Tensor<T>>& sr, const std::vector<Tensor<T>>& hr, const MetricNet<T>& net)
{
    if (sr.empty())
        throw DataError("perceptual_error: empty test set");
    if (sr.size() != hr.size())
        throw DimensionError("perceptual_error: output and ground-truth counts differ");
    double total = 0.0;
    for (std::size_t i = 0; i < sr.size(); ++i)
        total += d_phi(sr[i], hr[i], net);
    return total / static_cast<double>(sr.size());
}

// reference networks ---------------------------------------------------------

template <class T>
MetricNet<T> identity_metric_net()
{
    return {"identity", "identity", [](const Tensor<T>& x) { return std::vector<Tensor<T>>{x}; }, {}};
}

/// Activations of trunk blocks `layers` of a frozen extractor (eval-mode BN).
template <class T>
MetricNet<T> extractor_metric_net(std::string name, std::string kind, std::shared_ptr<ParameterSet<T>> phi,
                                  std::vector<std::size_t> layers)
{
    if (layers.empty())
        throw ConfigError("metric net '" + name + "' taps no layers");
    std::size_t deepest = 0;
    for (std::size_t l : layers)
        deepest = std::max(deepest, l);
    FeatureTap tap{TapNetwork::discriminator, deepest, false};
    tap.validate();
    for (std::size_t b = 0; b <= deepest; ++b)
        if (!phi->contains("block" + std::to_string(b) + ".conv.weight"))
            throw InterfaceError("metric net '" + name + "' lacks trunk block " + std::to_string(b));
    auto fn = [phi, tap, layers](const Tensor<T>& x) {
        Scope<T> scope(*phi, Binding::inference());
        auto out = extractor_forward(tap, scope, Var<T>::constant(x));
        std::vector<Tensor<T>> f;
        for (std::size_t l : layers)
            f.push_back(out.blocks[l].value());
        return f;
    };
    return {std::move(name), std::move(kind), fn, {}};
}

/// Every layer of an external network, weighted by its `lin` records when present.
template <class T>
MetricNet<T> external_metric_net(std::string name, std::shared_ptr<const ExternalNetwork<T>> net)
{
    std::vector<Tensor<T>> weights;
    bool any = false;
    for (const auto& l : net->layers())
        any = any || l.channel_weights.has_value();
    if (any)
        for (const auto& l : net->layers())
            weights.push_back(l.channel_weights ? *l.channel_weights : Tensor<T>(l.bias.shape(), T(1)));
    auto fn = [net](const Tensor<T>& x) {
        std::vector<Tensor<T>> f;
        for (const auto& v : net->forward(Var<T>::constant(x)))
            f.push_back(v.value());
        return f;
    };
    return {std::move(name), "external", fn, std::move(weights)};
}

// ---------------------------------------------------------------------------
// reports

inline double round4(double v) { return std::isfinite(v) ? std::round(v * 1e4) / 1e4 : v; }

struct MetricsRow {
    std::string method;
    double l2 = 0.0;
    double ssim = 0.0;
    std::vector<double> pe; // one per reference net, in report order

    /// PSNR of the dataset-level L2.
    double psnr() const { return psnr_from_mse(l2); }

    friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

/// One row per method: L2 and SSIM (low-level) then PE per reference net,
/// all rounded to 4 decimals.
struct MetricsReport {
    std::string dataset;
    std::size_t samples = 0;
    std::vector<std::string> nets;
    std::vector<MetricsRow> rows;

    void add_row(MetricsRow r)
    {
        if (r.pe.size() != nets.size())
            throw DimensionError("report row '" + r.method + "' has " + std::to_string(r.pe.size()) +
                                 " PE values for " + std::to_string(nets.size()) + " nets");
        r.l2 = round4(r.l2);
        r.ssim = round4(r.ssim);
        for (double& v : r.pe)
            v = round4(v);
        rows.push_back(std::move(r));
    }

    std::vector<std::string> columns() const
    {
        std::vector<std::string> c{"method", "L2", "SSIM"};
        for (const auto& n : nets)
            c.push_back("PE_" + n);
        return c;
    }

    std::string to_csv() const
    {
        std::ostringstream os;
        const auto cols = columns();
        for (std::size_t i = 0; i < cols.size(); ++i)
            os << (i ? "," : "") << cols[i];
        os << '\n';
        auto num = [](double v) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.4f", v);
            return std::string(buf);
        };
        for (const auto& r : rows) {
            os << r.method << ',' << num(r.l2) << ',' << num(r.ssim);
            for (double v : r.pe)
                os << ',' << num(v);
            os << '\n';
        }
        return os.str();
    }

    static MetricsReport from_csv(const std::string& text, std::string dataset = "", std::size_t samples = 0)
    {
        MetricsReport rep;
        rep.dataset = std::move(dataset);
        rep.samples = samples;
        std::istringstream in(text);
        std::string line;
        auto split = [](const std::string& s) {
            std::vector<std::string> f;
            std::stringstream ss(s);
            std::string item;
            while (std::getline(ss, item, ','))
                f.push_back(item);
            return f;
        };
        if (!std::getline(in, line))
            throw DataError("empty report CSV");
        const auto header = split(line);
        if (header.size() < 3 || header[0] != "method" || header[1] != "L2" || header[2] != "SSIM")
            throw DataError("report CSV header must start with method,L2,SSIM");
        for (std::size_t i = 3; i < header.size(); ++i) {
            if (header[i].rfind("PE_", 0) != 0)
                throw DataError("unexpected report column '" + header[i] + "'");
            rep.nets.push_back(header[i].substr(3));
        }
        while (std::getline(in, line)) {
            if (line.empty())
                continue;
            const auto f = split(line);
            if (f.size() != header.size())
                throw DataError("report row has " + std::to_string(f.size()) + " fields, header has " +
                                std::to_string(header.size()));
            MetricsRow r;
            r.method = f[0];
            r.l2 = std::stod(f[1]);
            r.ssim = std::stod(f[2]);
            for (std::size_t i = 3; i < f.size(); ++i)
                r.pe.push_back(std::stod(f[i]));
            rep.rows.push_back(std::move(r));
        }
        return rep;
    }

    /// Sidecar recording the constants behind every column.
    nlohmann::ordered_json meta(const std::vector<std::string>& net_kinds = {}) const
    {
        const SsimConstants k;
        nlohmann::ordered_json j;
        j["dataset"] = dataset;
        j["samples"] = samples;
        j["l2"] = "mean squared error on [-1, 1] images";
        j["ssim"] = {{"window", k.window},         {"k1", k.k1},
                     {"k2", k.k2},                 {"dynamic_range", k.dynamic_range},
                     {"window_kind", "uniform"},   {"luminance", "channel mean"}};
        j["pe"] = {{"norm_eps", kFeatureNormEps}, {"layer_weights", "ones unless supplied by the net"}};
        auto nets_json = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < nets.size(); ++i)
            nets_json.push_back({{"name", nets[i]}, {"kind", i < net_kinds.size() ? net_kinds[i] : ""}});
        j["nets"] = nets_json;
        nlohmann::ordered_json ps;
        for (const auto& r : rows)
            ps[r.method] = std::isfinite(r.psnr()) ? nlohmann::ordered_json(round4(r.psnr())) : "inf";
        j["psnr_db"] = ps;
        return j;
    }

    /// Methods ordered best to worst by column `col` ("L2", "SSIM" or "PE_<net>").
    std::vector<std::string> ranking(const std::string& col) const
    {
        std::vector<std::pair<double, std::string>> v;
        for (const auto& r : rows) {
            double key;
            if (col == "L2")
                key = r.l2;
            else if (col == "SSIM")
                key = -r.ssim;
            else {
                auto it = std::find(nets.begin(), nets.end(), col.substr(3));
                if (col.rfind("PE_", 0) != 0 || it == nets.end())
                    throw ConfigError("unknown report column '" + col + "'");
                key = r.pe[static_cast<std::size_t>(it - nets.begin())];
            }
            v.emplace_back(key, r.method);
        }
        std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        std::vector<std::string> out;
        for (auto& [_, m] : v)
            out.push_back(m);
        return out;
    }

    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Metrics of a method's outputs against ground truth.
template <class T>
MetricsRow evaluate_outputs(const std::string& method, const std::vector<Tensor<T>>& sr,
                            const std::vector<Tensor<T>>& hr, const std::vector<MetricNet<T>>& nets)
{
    if (sr.empty())
        throw DataError("cannot evaluate '" + method + "' on an empty test set");
    if (sr.size() != hr.size())
        throw DimensionError("output and ground-truth counts differ for '" + method + "'");
    MetricsRow row;
    row.method = method;
    for (std::size_t i = 0; i < sr.size(); ++i) {
        row.l2 += l2_error(sr[i], hr[i]);
        row.ssim += ssim(sr[i], hr[i]);
    }
    row.l2 /= static_cast<double>(sr.size());
    row.ssim /= static_cast<double>(sr.size());
    for (const auto& net : nets)
        row.pe.push_back(perceptual_error(sr, hr, net));
    return row;
}

} // namespace gcnsr

#endif
