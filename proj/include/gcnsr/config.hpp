#ifndef GCNSR_CONFIG_HPP
#define GCNSR_CONFIG_HPP

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcnsr/data.hpp"
#include "gcnsr/errors.hpp"
#include "gcnsr/train_config.hpp"

namespace gcnsr {

struct DataConfig {
    std::filesystem::path train_dir;
    std::filesystem::path test_dir;
    std::filesystem::path labeled_dir; // class-per-subdirectory corpus for cla
    std::size_t crop_size = 32;        // HR crop edge; also the discriminator input size
    std::size_t crops_per_image = 1;
    std::uint64_t seed = 0;
    DownscaleMode downscale = DownscaleMode::bicubic;

    CorpusOptions corpus() const { return {crop_size, crops_per_image, seed, downscale}; }

    friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct ExternalNetConfig {
    std::string name;
    std::filesystem::path path;

    friend bool operator==(const ExternalNetConfig&, const ExternalNetConfig&) = default;
};

/// Reference networks for the perceptual error. Built-in kinds are
/// "identity", "random" (frozen He-normal trunk) and "rec" (trunk of an
/// autoencoder trained on `rec_dir`, which must not overlap the test set).
struct MetricsConfig {
    std::vector<std::string> nets{"identity", "random", "rec"};
    std::vector<std::size_t> layers{0}; // trunk blocks tapped by random / rec
    std::uint64_t random_seed = 4321;
    std::filesystem::path rec_dir;
    std::size_t rec_iterations = 200;
    std::vector<ExternalNetConfig> external;

    friend bool operator==(const MetricsConfig&, const MetricsConfig&) = default;
};

struct CompareConfig {
    std::vector<Variant> strategies{Variant::mse, Variant::dis, Variant::dis_rec, Variant::adv, Variant::adv_rec};

    friend bool operator==(const CompareConfig&, const CompareConfig&) = default;
};

struct RunConfig {
    TrainConfig train;
    std::filesystem::path output_dir = "runs/default";
    DataConfig data;
    MetricsConfig metrics;
    CompareConfig compare;

    /// Keeps the derived discriminator input size in sync with the crop size.
    void sync()
    {
        train.discriminator.input_hw = data.crop_size;
    }

    void validate() const
    {
        data.corpus().validate();
        train.validate();
        if (metrics.layers.empty())
            throw ConfigError("metrics.layers must list at least one trunk block");
        for (std::size_t l : metrics.layers)
            if (l >= DiscriminatorSpec::conv_blocks)
                throw ConfigError("metrics.layers entry " + std::to_string(l) + " exceeds the 8 trunk blocks");
        for (const auto& n : metrics.nets)
            if (n != "identity" && n != "random" && n != "rec")
                throw ConfigError("metrics.nets entry '" + n + "' is not identity, random or rec");
        for (const auto& e : metrics.external)
            if (e.name.empty() || e.path.empty())
                throw ConfigError("metrics.external entries need both name and path");
        if (compare.strategies.empty())
            throw ConfigError("compare.strategies must list at least one strategy");
    }

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

inline nlohmann::ordered_json to_json(const RunConfig& c)
{
    auto j = to_json(c.train);
    j["discriminator"].erase("input_hw");
    j["output_dir"] = c.output_dir.string();
    j["data"] = {{"train_dir", c.data.train_dir.string()},     {"test_dir", c.data.test_dir.string()},
                 {"labeled_dir", c.data.labeled_dir.string()}, {"crop_size", c.data.crop_size},
                 {"crops_per_image", c.data.crops_per_image},  {"seed", c.data.seed},
                 {"downscale", to_string(c.data.downscale)}};
    auto ext = nlohmann::ordered_json::array();
    for (const auto& e : c.metrics.external)
        ext.push_back({{"name", e.name}, {"path", e.path.string()}});
    j["metrics"] = {{"nets", c.metrics.nets},
                    {"layers", c.metrics.layers},
                    {"random_seed", c.metrics.random_seed},
                    {"rec_dir", c.metrics.rec_dir.string()},
                    {"rec_iterations", c.metrics.rec_iterations},
                    {"external", ext}};
    auto strategies = nlohmann::ordered_json::array();
    for (Variant v : c.compare.strategies)
        strategies.push_back(to_string(v));
    j["compare"] = {{"strategies", strategies}};
    return j;
}

namespace json_detail {

template <class V>
void get_list(Section& s, const std::string& key, std::vector<V>& out)
{
    if (!s.has(key))
        return;
    const Json& arr = s.raw(key);
    if (!arr.is_array())
        throw ConfigError("'" + s.name(key) + "' must be a list");
    std::vector<V> values;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        Json wrapper = {{"v", arr[i]}};
        Section item(wrapper, s.name(key) + "[" + std::to_string(i) + "]");
        V v{};
        item.get("v", v);
        values.push_back(v);
    }
    out = std::move(values);
}

inline void get_path(Section& s, const std::string& key, std::filesystem::path& out)
{
    std::string v;
    if (!s.has(key))
        return;
    s.get(key, v);
    out = v;
}

} // namespace json_detail

inline RunConfig run_config_from_json(const nlohmann::ordered_json& j)
{
    using namespace json_detail;
    RunConfig c;
    Section root(j, "");
    read_train_sections(root, c.train, false);
    get_path(root, "output_dir", c.output_dir);
    {
        auto s = root.sub("data");
        get_path(s, "train_dir", c.data.train_dir);
        get_path(s, "test_dir", c.data.test_dir);
        get_path(s, "labeled_dir", c.data.labeled_dir);
        s.get("crop_size", c.data.crop_size);
        s.get("crops_per_image", c.data.crops_per_image);
        s.get("seed", c.data.seed);
        s.get_parsed("downscale", c.data.downscale, parse_downscale_mode);
        s.finish();
    }
    {
        auto s = root.sub("metrics");
        get_list(s, "nets", c.metrics.nets);
        get_list(s, "layers", c.metrics.layers);
        s.get("random_seed", c.metrics.random_seed);
        get_path(s, "rec_dir", c.metrics.rec_dir);
        s.get("rec_iterations", c.metrics.rec_iterations);
        if (s.has("external")) {
            const Json& arr = s.raw("external");
            if (!arr.is_array())
                throw ConfigError("'metrics.external' must be a list");
            c.metrics.external.clear();
            for (std::size_t i = 0; i < arr.size(); ++i) {
                Section e(arr[i], "metrics.external[" + std::to_string(i) + "]");
                ExternalNetConfig net;
                e.get("name", net.name);
                get_path(e, "path", net.path);
                e.finish();
                c.metrics.external.push_back(std::move(net));
            }
        }
        s.finish();
    }
    {
        auto s = root.sub("compare");
        std::vector<std::string> names;
        get_list(s, "strategies", names);
        if (s.has("strategies")) {
            c.compare.strategies.clear();
            for (const auto& n : names) {
                try {
                    c.compare.strategies.push_back(parse_variant(n));
                } catch (const ConfigError& e) {
                    throw ConfigError(std::string("'compare.strategies': ") + e.what());
                }
            }
        }
        s.finish();
    }
    root.finish();
    c.sync();
    return c;
}

/// Environment variable that overrides config key `path` (dotted), e.g.
/// training.batch_size -> GCNSR_TRAINING_BATCH_SIZE.
inline std::string env_name(const std::string& path)
{
    std::string out = "GCNSR_";
    for (char ch : path)
        out += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return out;
}

namespace json_detail {

inline void leaf_paths(const Json& j, const std::string& prefix, std::vector<std::string>& out)
{
    if (j.is_object()) {
        for (const auto& [k, v] : j.items())
            leaf_paths(v, prefix.empty() ? k : prefix + "." + k, out);
    } else {
        out.push_back(prefix);
    }
}

inline Json env_value(const std::string& text)
{
    try {
        return Json::parse(text);
    } catch (const std::exception&) {
        return Json(text); // bare strings need no quoting
    }
}

} // namespace json_detail

/// Applies GCNSR_* environment overrides on top of document `j`. Values
/// are parsed as JSON when possible, otherwise taken as strings.
/// `getenv` is injectable for tests.
inline nlohmann::ordered_json apply_env_overrides(
    nlohmann::ordered_json j, const std::function<const char*(const char*)>& getenv = [](const char* n) {
        return std::getenv(n);
    })
{
    std::vector<std::string> paths;
    json_detail::leaf_paths(to_json(RunConfig{}), "", paths);
    for (const auto& path : paths) {
        const std::string var = env_name(path);
        const char* value = getenv(var.c_str());
        if (!value)
            continue;
        nlohmann::ordered_json* node = &j;
        std::stringstream parts(path);
        std::string part;
        std::vector<std::string> keys;
        while (std::getline(parts, part, '.'))
            keys.push_back(part);
        for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
            if (!node->contains(keys[i]))
                (*node)[keys[i]] = nlohmann::ordered_json::object();
            node = &(*node)[keys[i]];
            if (!node->is_object())
                throw ConfigError("cannot apply " + var + ": '" + keys[i] + "' is not an object");
        }
        (*node)[keys.back()] = json_detail::env_value(value);
    }
    return j;
}

inline nlohmann::ordered_json parse_config_text(const std::string& text, const std::string& source)
{
    try {
        return nlohmann::ordered_json::parse(text, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(source + ": " + e.what());
    }
}

/// Loaded configuration plus the raw text it came from (echoed into runs).
struct LoadedConfig {
    RunConfig config;
    std::string source_text;
};

/// File (optional) then environment. Command-line flags are applied by the caller.
inline LoadedConfig load_run_config(const std::optional<std::filesystem::path>& file)
{
    LoadedConfig out;
    nlohmann::ordered_json doc = nlohmann::ordered_json::object();
    if (file) {
        std::ifstream in(*file, std::ios::binary);
        if (!in)
            throw ConfigError("cannot read config file '" + file->string() + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        out.source_text = ss.str();
        doc = parse_config_text(out.source_text, file->string());
    }
    out.config = run_config_from_json(apply_env_overrides(std::move(doc)));
    return out;
}

} // namespace gcnsr

#endif
