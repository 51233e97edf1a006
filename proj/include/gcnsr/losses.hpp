#ifndef GCNSR_LOSSES_HPP
#define GCNSR_LOSSES_HPP

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gcnsr/autograd.hpp"
#include "gcnsr/errors.hpp"

namespace gcnsr {

enum class AdversarialFormulation { saturating, non_saturating };

inline const char* to_string(AdversarialFormulation f)
{
    return f == AdversarialFormulation::saturating ? "saturating" : "non_saturating";
}

inline AdversarialFormulation parse_adversarial_formulation(const std::string& s)
{
    if (s == "saturating")
        return AdversarialFormulation::saturating;
    if (s == "non_saturating")
        return AdversarialFormulation::non_saturating;
    throw ConfigError("unknown adversarial formulation '" + s + "'");
}

/// (1 / (N d)) * sum over batch and feature coordinates of (phi_y - phi_fx)^2.
template <class T>
Var<T> feature_content_loss(const Var<T>& phi_y, const Var<T>& phi_fx)
{
    require_same_shape(phi_y.shape(), phi_fx.shape(), "feature_content_loss");
    return ag::mean_squared_error(phi_fx, phi_y);
}

template <class T>
double feature_content_loss(const Tensor<T>& phi_y, const Tensor<T>& phi_fx)
{
    return feature_content_loss(Var<T>::constant(phi_y), Var<T>::constant(phi_fx)).item();
}

/// Pixel-wise mean squared error between ground truth and a reconstruction.
template <class T>
Var<T> reconstruction_loss(const Var<T>& y, const Var<T>& y_hat)
{
    require_same_shape(y.shape(), y_hat.shape(), "reconstruction_loss");
    return ag::mean_squared_error(y_hat, y);
}

template <class T>
double reconstruction_loss(const Tensor<T>& y, const Tensor<T>& y_hat)
{
    return reconstruction_loss(Var<T>::constant(y), Var<T>::constant(y_hat)).item();
}

/// Softmax cross-entropy averaged over the batch.
template <class T>
Var<T> classification_loss(const Var<T>& logits, std::span<const int> labels)
{
    return ag::softmax_cross_entropy(logits, labels);
}

/// -mean(log d_real) - mean(log(1 - d_fake)), probabilities clamped at 1e-7.
template <class T>
Var<T> discriminator_loss(const Var<T>& d_real, const Var<T>& d_fake)
{
    auto real_term = ag::mean_log_probability(d_real, false);
    auto fake_term = ag::mean_log_probability(d_fake, true);
    return ag::scale(ag::add_scalars(real_term, fake_term), -1.0);
}

template <class T>
double discriminator_loss(const Tensor<T>& d_real, const Tensor<T>& d_fake)
{
    return discriminator_loss(Var<T>::constant(d_real), Var<T>::constant(d_fake)).item();
}

/// The generator's adversarial regularizer.
/// non_saturating: -mean(log d_fake); saturating: mean(log(1 - d_fake)).
template <class T>
Var<T> generator_adversarial_term(const Var<T>& d_fake, AdversarialFormulation form)
{
    if (form == AdversarialFormulation::non_saturating)
        return ag::scale(ag::mean_log_probability(d_fake, false), -1.0);
    return ag::mean_log_probability(d_fake, true);
}

template <class T>
double generator_adversarial_term(const Tensor<T>& d_fake, AdversarialFormulation form)
{
    return generator_adversarial_term(Var<T>::constant(d_fake), form).item();
}

/// Per-iteration loss values. Terms that were not computed are 0.
struct LossReport {
    double content = 0.0;
    double adversarial = 0.0;
    double reconstruction = 0.0;
    double discriminator = 0.0;
    double total_generator = 0.0;
    std::int64_t iteration = 0;

    bool all_finite() const
    {
        return std::isfinite(content) && std::isfinite(adversarial) && std::isfinite(reconstruction) &&
               std::isfinite(discriminator) && std::isfinite(total_generator);
    }

    friend bool operator==(const LossReport&, const LossReport&) = default;
};

} // namespace gcnsr

#endif
