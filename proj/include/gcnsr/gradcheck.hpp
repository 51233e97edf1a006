#ifndef GCNSR_GRADCHECK_HPP
#define GCNSR_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "gcnsr/autograd.hpp"

namespace gcnsr {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;

    bool passed(double tolerance) const { return max_relative_error < tolerance; }
};

/// Per-element error |a - n| / max(|a|, |n|, floor). The floor keeps
/// near-zero gradients from amplifying rounding noise.
inline constexpr double kGradCheckFloor = 1e-6;

using DifferentiableOp = std::function<Var<double>(const std::vector<Var<double>>&)>;

/// Compares analytic gradients of `op` against central differences.
/// Non-scalar outputs are projected to a scalar with fixed random weights.
inline GradCheckResult finite_difference_check(const DifferentiableOp& op, const std::vector<Tensor<double>>& inputs,
                                               std::uint64_t seed = 0, double h = 1e-5,
                                               std::vector<bool> differentiate = {})
{
    if (differentiate.empty())
        differentiate.assign(inputs.size(), true);

    std::mt19937_64 rng(seed);
    Tensor<double> projection;
    auto objective = [&](const std::vector<Var<double>>& vars) {
        Var<double> out = op(vars);
        if (out.value().size() == 1)
            return out;
        if (projection.empty())
            projection = Tensor<double>::uniform(out.shape(), rng, -1.0, 1.0);
        return ag::weighted_sum(out, projection);
    };

    std::vector<Var<double>> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i)
        vars.push_back(differentiate[i] ? Var<double>::input(inputs[i]) : Var<double>::constant(inputs[i]));
    Var<double> root = objective(vars);
    backward(root);

    auto evaluate = [&](const std::vector<Tensor<double>>& xs) {
        std::vector<Var<double>> cs;
        for (const auto& x : xs)
            cs.push_back(Var<double>::constant(x));
        return static_cast<double>(objective(cs).item());
    };

    GradCheckResult result;
    std::vector<Tensor<double>> probe = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!differentiate[i])
            continue;
        const Tensor<double> analytic = vars[i].grad();
        for (std::size_t j = 0; j < inputs[i].size(); ++j) {
            const double orig = probe[i][j];
            probe[i][j] = orig + h;
            const double fp = evaluate(probe);
            probe[i][j] = orig - h;
            const double fm = evaluate(probe);
            probe[i][j] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[j];
            const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
            const double err = std::abs(a - numeric) / denom;
            ++result.checked;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_input = i;
                result.worst_index = j;
            }
        }
    }
    return result;
}

} // namespace gcnsr

#endif
