#ifndef GCNSR_STRATEGY_HPP
#define GCNSR_STRATEGY_HPP

#include <array>
#include <cstdint>
#include <string>

#include "gcnsr/errors.hpp"
#include "gcnsr/losses.hpp"
#include "gcnsr/models.hpp"

namespace gcnsr {

enum class Variant { mse, ran, rec, cla, dis, dis_rec, adv, adv_mse, adv_rec };

inline constexpr std::array<Variant, 9> all_variants{Variant::mse, Variant::ran,     Variant::rec,
                                                     Variant::cla, Variant::dis,     Variant::dis_rec,
                                                     Variant::adv, Variant::adv_mse, Variant::adv_rec};

inline const char* to_string(Variant v)
{
    switch (v) {
    case Variant::mse: return "mse";
    case Variant::ran: return "ran";
    case Variant::rec: return "rec";
    case Variant::cla: return "cla";
    case Variant::dis: return "dis";
    case Variant::dis_rec: return "dis_rec";
    case Variant::adv: return "adv";
    case Variant::adv_mse: return "adv_mse";
    case Variant::adv_rec: return "adv_rec";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s)
{
    for (Variant v : all_variants)
        if (s == to_string(v))
            return v;
    throw ConfigError("unknown strategy variant '" + s +
                      "' (expected mse, ran, rec, cla, dis, dis_rec, adv, adv_mse or adv_rec)");
}

struct StrategyConfig {
    Variant variant = Variant::mse;
    double lambda1 = 1.0;
    double lambda2 = 1e-3;
    FeatureTap tap{};
    AdversarialFormulation adv_formulation = AdversarialFormulation::non_saturating;
    std::uint64_t random_seed = 1234; // seeds the frozen extractor of the ran variant
    double dis_weight = 1.0;          // weight of the discriminator loss in the extractor objective
    double rec_weight = 1.0;          // weight of the reconstruction loss in the extractor objective

    friend bool operator==(const StrategyConfig&, const StrategyConfig&) = default;
};

/// How the features extractor obtains its parameters.
enum class ExtractorTraining {
    none,           // identity: nothing to train
    frozen_random,  // seeded He-normal weights, never updated
    pretrained_rec, // autoencoder trained before the generator, then frozen
    pretrained_cla, // classifier trained before the generator, then frozen
    joint,          // updated alternately with the generator
};

/// The resolved wiring of one variant.
struct StrategyPlan {
    Variant variant = Variant::mse;
    FeatureTap content_tap{};  // Phi used by the generator's content term
    double lambda1 = 1.0;
    double lambda2 = 0.0;      // effective weight of the adversarial term
    AdversarialFormulation adv_formulation = AdversarialFormulation::non_saturating;
    ExtractorTraining extractor = ExtractorTraining::none;
    bool discriminator = false; // a discriminator head is built and trained
    bool autoencoder = false;   // an autoencoder head is built
    bool classifier = false;    // a classifier head is built (pretraining only)
    double dis_weight = 0.0;    // extractor objective = dis_weight * L_D + rec_weight * L_rec
    double rec_weight = 0.0;

    bool joint() const { return extractor == ExtractorTraining::joint; }
    bool disjoint_pretraining() const
    {
        return extractor == ExtractorTraining::pretrained_rec || extractor == ExtractorTraining::pretrained_cla;
    }
    bool uses_adversarial_term() const { return lambda2 > 0.0; }
    bool frozen_extractor() const
    {
        return extractor == ExtractorTraining::frozen_random || disjoint_pretraining();
    }
    /// When true, the discriminator's Phi is also the content Phi (dis, adv, dis_rec, adv_rec).
    bool shared_phi() const { return joint() && content_tap.network != TapNetwork::identity; }
};

inline bool is_adversarial(Variant v) { return v == Variant::adv || v == Variant::adv_mse || v == Variant::adv_rec; }

/// Maps a strategy to its generator objective, extractor objective and schedule.
inline StrategyPlan resolve_strategy(const StrategyConfig& cfg, bool labels_available)
{
    if (!(cfg.lambda1 >= 0.0) || !(cfg.lambda2 >= 0.0))
        throw ConfigError("strategy.lambda1 and strategy.lambda2 must be non-negative");
    if (!(cfg.dis_weight >= 0.0) || !(cfg.rec_weight >= 0.0))
        throw ConfigError("strategy.dis_weight and strategy.rec_weight must be non-negative");
    cfg.tap.validate();

    StrategyPlan p;
    p.variant = cfg.variant;
    p.lambda1 = cfg.lambda1;
    p.adv_formulation = cfg.adv_formulation;
    p.content_tap = cfg.tap;

    if (is_adversarial(cfg.variant)) {
        if (cfg.lambda2 == 0.0) {
            throw ConfigError(std::string("variant ") + to_string(cfg.variant) +
                              " requires strategy.lambda2 > 0; use the non-adversarial counterpart for lambda2 = 0");
        }
        p.lambda2 = cfg.lambda2;
    }

    switch (cfg.variant) {
    case Variant::mse:
        p.content_tap = FeatureTap{TapNetwork::identity, 0, false};
        break;
    case Variant::ran:
        p.content_tap.network = TapNetwork::random;
        p.extractor = ExtractorTraining::frozen_random;
        break;
    case Variant::rec:
        p.content_tap.network = TapNetwork::autoencoder;
        p.extractor = ExtractorTraining::pretrained_rec;
        p.autoencoder = true;
        p.rec_weight = 1.0;
        break;
    case Variant::cla:
        if (!labels_available)
            throw ConfigError("variant cla requires a labeled corpus (data.labeled_dir)");
        p.content_tap.network = TapNetwork::discriminator;
        p.extractor = ExtractorTraining::pretrained_cla;
        p.classifier = true;
        break;
    case Variant::dis:
    case Variant::adv:
        p.content_tap.network = TapNetwork::discriminator;
        p.extractor = ExtractorTraining::joint;
        p.discriminator = true;
        p.dis_weight = cfg.dis_weight;
        break;
    case Variant::dis_rec:
    case Variant::adv_rec:
        p.content_tap.network = TapNetwork::discriminator;
        p.extractor = ExtractorTraining::joint;
        p.discriminator = true;
        p.autoencoder = true;
        p.dis_weight = cfg.dis_weight;
        p.rec_weight = cfg.rec_weight;
        break;
    case Variant::adv_mse:
        p.content_tap = FeatureTap{TapNetwork::identity, 0, false};
        p.extractor = ExtractorTraining::joint;
        p.discriminator = true;
        p.dis_weight = cfg.dis_weight;
        break;
    }
    return p;
}

} // namespace gcnsr

#endif
