#ifndef GCNSR_TRAIN_CONFIG_HPP
#define GCNSR_TRAIN_CONFIG_HPP

#include <cstdint>
#include <set>
#include <string>

#include <json.hpp>

#include "gcnsr/errors.hpp"
#include "gcnsr/models.hpp"
#include "gcnsr/parameters.hpp"
#include "gcnsr/strategy.hpp"

namespace gcnsr {

struct TrainConfig {
    std::uint64_t seed = 0;
    std::size_t iterations = 5000;
    std::size_t batch_size = 10;
    std::size_t pretrain_iterations = 2000; // rec / cla extractor pretraining
    std::size_t log_every = 100;
    std::size_t checkpoint_every = 0; // 0: final checkpoint only
    std::size_t extractor_steps = 1;  // extractor updates per generator update
    AdamConfig adam{};
    StrategyConfig strategy{};
    GeneratorSpec generator{};
    DiscriminatorSpec discriminator{};

    void validate() const
    {
        if (batch_size == 0)
            throw ConfigError("training.batch_size must be positive");
        if (extractor_steps == 0)
            throw ConfigError("training.extractor_steps must be positive");
        adam.validate();
        generator.validate();
        discriminator.validate();
        strategy.tap.validate();
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

namespace json_detail {

using Json = nlohmann::ordered_json;

/// Reads one JSON object, remembering which keys were consumed so that
/// unknown keys can be reported.
class Section {
public:
    Section(const Json& j, std::string path) : j_(&j), path_(std::move(path))
    {
        if (!j.is_object())
            throw ConfigError("'" + (path_.empty() ? std::string("<root>") : path_) + "' must be an object");
    }

    bool has(const std::string& key) const { return j_->contains(key); }

    template <class V>
    void get(const std::string& key, V& out)
    {
        if (!j_->contains(key))
            return;
        seen_.insert(key);
        const Json& v = (*j_)[key];
        try {
            if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
                if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0))
                    throw ConfigError("");
            } else if constexpr (std::is_floating_point_v<V>) {
                if (!v.is_number())
                    throw ConfigError("");
            } else if constexpr (std::is_same_v<V, bool>) {
                if (!v.is_boolean())
                    throw ConfigError("");
            } else if constexpr (std::is_same_v<V, std::string>) {
                if (!v.is_string())
                    throw ConfigError("");
            }
            out = v.get<V>();
        } catch (const std::exception&) {
            throw ConfigError("'" + name(key) + "' has the wrong type (got " + v.dump() + ")");
        }
    }

    template <class V, class Parse>
    void get_parsed(const std::string& key, V& out, Parse parse)
    {
        std::string s;
        if (!j_->contains(key))
            return;
        get(key, s);
        try {
            out = parse(s);
        } catch (const ConfigError& e) {
            throw ConfigError("'" + name(key) + "': " + e.what());
        }
    }

    Section sub(const std::string& key)
    {
        seen_.insert(key);
        static const Json empty = Json::object();
        return Section(j_->contains(key) ? (*j_)[key] : empty, name(key));
    }

    const Json& raw(const std::string& key)
    {
        seen_.insert(key);
        return (*j_)[key];
    }

    /// Throws on the first key that no getter consumed.
    void finish() const
    {
        for (const auto& [k, _] : j_->items())
            if (!seen_.count(k))
                throw ConfigError("unknown config key '" + name(k) + "'");
    }

    std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    const Json* j_;
    std::string path_;
    std::set<std::string> seen_;
};

} // namespace json_detail

/// Reads the training-related top-level sections of a config document.
/// `allow_input_hw` is false for run configs, where the crop size fixes it.
inline void read_train_sections(json_detail::Section& root, TrainConfig& c, bool allow_input_hw)
{
    root.get("seed", c.seed);
    {
        auto s = root.sub("training");
        s.get("iterations", c.iterations);
        s.get("batch_size", c.batch_size);
        s.get("pretrain_iterations", c.pretrain_iterations);
        s.get("log_every", c.log_every);
        s.get("checkpoint_every", c.checkpoint_every);
        s.get("extractor_steps", c.extractor_steps);
        s.finish();
    }
    {
        auto s = root.sub("adam");
        s.get("lr", c.adam.lr);
        s.get("beta1", c.adam.beta1);
        s.get("beta2", c.adam.beta2);
        s.get("eps", c.adam.eps);
        s.get("decay", c.adam.decay);
        s.finish();
    }
    {
        auto s = root.sub("strategy");
        s.get_parsed("variant", c.strategy.variant, parse_variant);
        s.get("lambda1", c.strategy.lambda1);
        s.get("lambda2", c.strategy.lambda2);
        s.get_parsed("adv_formulation", c.strategy.adv_formulation, parse_adversarial_formulation);
        s.get("random_seed", c.strategy.random_seed);
        s.get("dis_weight", c.strategy.dis_weight);
        s.get("rec_weight", c.strategy.rec_weight);
        auto t = s.sub("tap");
        t.get("layer", c.strategy.tap.layer);
        t.get("pre_activation", c.strategy.tap.pre_activation);
        t.finish();
        s.finish();
    }
    {
        auto s = root.sub("generator");
        s.get("residual_blocks", c.generator.residual_blocks);
        s.get("base_channels", c.generator.base_channels);
        s.get("edge_kernel", c.generator.edge_kernel);
        s.get_parsed("upsample", c.generator.upsample, parse_upsample_mode);
        s.finish();
    }
    {
        auto s = root.sub("discriminator");
        if (allow_input_hw)
            s.get("input_hw", c.discriminator.input_hw);
        s.get("dense_hidden", c.discriminator.dense_hidden);
        s.finish();
    }
}

inline nlohmann::ordered_json to_json(const TrainConfig& c)
{
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["training"] = {{"iterations", c.iterations},
                     {"batch_size", c.batch_size},
                     {"pretrain_iterations", c.pretrain_iterations},
                     {"log_every", c.log_every},
                     {"checkpoint_every", c.checkpoint_every},
                     {"extractor_steps", c.extractor_steps}};
    j["adam"] = {{"lr", c.adam.lr},
                 {"beta1", c.adam.beta1},
                 {"beta2", c.adam.beta2},
                 {"eps", c.adam.eps},
                 {"decay", c.adam.decay}};
    j["strategy"] = {{"variant", to_string(c.strategy.variant)},
                     {"lambda1", c.strategy.lambda1},
                     {"lambda2", c.strategy.lambda2},
                     {"adv_formulation", to_string(c.strategy.adv_formulation)},
                     {"random_seed", c.strategy.random_seed},
                     {"dis_weight", c.strategy.dis_weight},
                     {"rec_weight", c.strategy.rec_weight},
                     {"tap", {{"layer", c.strategy.tap.layer}, {"pre_activation", c.strategy.tap.pre_activation}}}};
    j["generator"] = {{"residual_blocks", c.generator.residual_blocks},
                      {"base_channels", c.generator.base_channels},
                      {"edge_kernel", c.generator.edge_kernel},
                      {"upsample", to_string(c.generator.upsample)}};
    j["discriminator"] = {{"input_hw", c.discriminator.input_hw}, {"dense_hidden", c.discriminator.dense_hidden}};
    return j;
}

inline TrainConfig train_config_from_json(const nlohmann::ordered_json& j)
{
    TrainConfig c;
    json_detail::Section root(j, "");
    read_train_sections(root, c, true);
    root.finish();
    return c;
}

} // namespace gcnsr

#endif
