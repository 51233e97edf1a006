#ifndef GCNSR_COMMANDS_HPP
#define GCNSR_COMMANDS_HPP

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcnsr/config.hpp"
#include "gcnsr/data.hpp"
#include "gcnsr/image.hpp"
#include "gcnsr/metrics.hpp"
#include "gcnsr/training.hpp"

namespace gcnsr {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

/// Inputs the operator got wrong map to 2, failures while running to 3.
inline int exit_code_for(const std::exception& e)
{
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const DataError*>(&e))
        return kExitUsage;
    return kExitRuntime;
}

namespace cmd_detail {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) { write_file_bytes(path, text); }

inline fs::path require_dir(const fs::path& dir, const std::string& field)
{
    if (dir.empty())
        throw ConfigError(field + " is required");
    if (!fs::is_directory(dir))
        throw ConfigError(field + ": '" + dir.string() + "' is not a directory");
    return dir;
}

inline std::string losses_csv(const std::vector<LossReport>& history)
{
    std::ostringstream os;
    os << "iteration,content,adversarial,reconstruction,discriminator,total_generator\n";
    char buf[256];
    for (const auto& r : history) {
        std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(r.iteration),
                      r.content, r.adversarial, r.reconstruction, r.discriminator, r.total_generator);
        os << buf;
    }
    return os.str();
}

/// Rows of LR (nearest-upscaled) | SR | HR for the first few training pairs, in [0, 255].
inline Tensor<float> sample_grid(TrainingState<float>& s, const PairDataset& data, std::size_t rows = 4)
{
    rows = std::min(rows, data.size());
    const std::size_t hw = data.hr[0].shape().h;
    Tensor<float> grid(Shape{1, 3, rows * hw, 3 * hw});
    for (std::size_t r = 0; r < rows; ++r) {
        const Tensor<float>& lr = data.lr[r];
        const Tensor<float> sr = generate(s.config.generator, s.generator, lr);
        const Tensor<float>& hr = data.hr[r];
        const std::size_t f = hw / lr.shape().h;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < hw; ++y)
                for (std::size_t x = 0; x < hw; ++x) {
                    grid(0, c, r * hw + y, x) = lr(0, c, y / f, x / f);
                    grid(0, c, r * hw + y, hw + x) = sr(0, c, y, x);
                    grid(0, c, r * hw + y, 2 * hw + x) = hr(0, c, y, x);
                }
    }
    return denormalize(grid);
}

inline std::string timestamp()
{
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

inline PairDataset load_test_set(const fs::path& test, const RunConfig& cfg)
{
    if (test.empty())
        throw ConfigError("data.test_dir is required (or pass --test)");
    if (fs::is_regular_file(test)) {
        auto ds = load_manifest(test);
        if (ds.empty())
            throw DataError("test manifest '" + test.string() + "' lists no pairs");
        return ds;
    }
    require_dir(test, "data.test_dir");
    return load_corpus(test, cfg.data.corpus(), Split::test);
}

inline std::string dataset_tag(const fs::path& test)
{
    const fs::path p = fs::is_regular_file(test) ? test.stem() : test.filename();
    return p.empty() ? fs::path(test).parent_path().filename().string() : p.string();
}

} // namespace cmd_detail

// ---------------------------------------------------------------------------
// train

struct TrainOutcome {
    std::filesystem::path dir;
    std::filesystem::path final_checkpoint;
    std::uint64_t manifest_hash = 0;
    std::vector<LossReport> history;
};

/// Trains one strategy into cfg.output_dir: config echo, manifest, periodic
/// loss CSV / sample grids / checkpoints, then final.gcnsr. A non-finite
/// loss dumps failed_state.gcnsr before the error propagates.
inline TrainOutcome cmd_train(const RunConfig& cfg_in, const std::string& source_text, std::ostream& log)
{
    namespace fs = std::filesystem;
    RunConfig cfg = cfg_in;
    cfg.sync();
    cfg.validate();
    const bool needs_labels = cfg.train.strategy.variant == Variant::cla;
    cmd_detail::require_dir(cfg.data.train_dir, "data.train_dir");
    if (needs_labels)
        cmd_detail::require_dir(cfg.data.labeled_dir, "data.labeled_dir");
    resolve_strategy(cfg.train.strategy, needs_labels);

    const PairDataset data = load_corpus(cfg.data.train_dir, cfg.data.corpus(), Split::train);
    if (data.size() < cfg.train.batch_size)
        throw ConfigError("training.batch_size " + std::to_string(cfg.train.batch_size) + " exceeds the " +
                          std::to_string(data.size()) + " training pairs");
    std::optional<LabeledDataset> labeled;
    if (needs_labels)
        labeled = load_labeled_corpus(cfg.data.labeled_dir, cfg.data.corpus());

    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir / "samples");
    cmd_detail::write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
    if (!source_text.empty())
        cmd_detail::write_text(dir / "config.source.json", source_text);
    save_manifest(dir / "manifest_train.txt", data);

    TrainingState<float> s = init_training<float>(cfg.train, labeled.has_value());
    s.manifest_hash = data.manifest_hash();
    log << "train " << to_string(cfg.train.strategy.variant) << ": " << data.size() << " pairs, "
        << cfg.train.iterations << " iterations, output " << dir.string() << "\n";

    auto dump_failure = [&](const std::string& what) {
        save_checkpoint(dir / "failed_state.gcnsr", s);
        cmd_detail::write_text(dir / "losses.csv", cmd_detail::losses_csv(s.history));
        log << "aborted: " << what << " (state saved to " << (dir / "failed_state.gcnsr").string() << ")\n";
    };

    if (cfg.train.iterations > 0 && s.plan.disjoint_pretraining()) {
        try {
            pretrain_extractor(s, data, labeled ? &*labeled : nullptr);
        } catch (const NonFiniteError& e) {
            dump_failure(e.what());
            throw;
        }
        if (!s.pretrain_history.empty())
            log << "pretrained extractor: loss " << s.pretrain_history.front() << " -> " << s.pretrain_history.back()
                << "\n";
    }

    TrainHooks hooks;
    hooks.on_log = [&](const LossReport& r) {
        log << "iter " << r.iteration << " content " << r.content << " adversarial " << r.adversarial
            << " reconstruction " << r.reconstruction << " discriminator " << r.discriminator << " total "
            << r.total_generator << "\n";
        cmd_detail::write_text(dir / "losses.csv", cmd_detail::losses_csv(s.history));
        write_png(dir / "samples" / ("iter_" + std::to_string(r.iteration) + ".png"), cmd_detail::sample_grid(s, data));
    };
    hooks.on_checkpoint = [&](std::int64_t it) {
        save_checkpoint(dir / ("ckpt_" + std::to_string(it) + ".gcnsr"), s);
    };
    hooks.on_failure = [&](const NonFiniteError& e) { dump_failure(e.what()); };
    run_until(s, data, static_cast<std::int64_t>(cfg.train.iterations), hooks);

    cmd_detail::write_text(dir / "losses.csv", cmd_detail::losses_csv(s.history));
    const fs::path final_path = dir / "final.gcnsr";
    save_checkpoint(final_path, s);
    log << "wrote " << final_path.string() << "\n";
    return {dir, final_path, s.manifest_hash, s.history};
}

// ---------------------------------------------------------------------------
// sr

inline constexpr std::size_t kMaxSrInput = 512;

/// Super-resolves one image with a checkpoint's generator and writes a PNG.
inline void cmd_sr(const std::filesystem::path& checkpoint, const std::filesystem::path& input,
                   const std::filesystem::path& output)
{
    auto s = load_checkpoint<float>(checkpoint);
    const Tensor<float> pixels = read_image(input);
    const auto& sh = pixels.shape();
    if (sh.h < 1 || sh.w < 1 || sh.h > kMaxSrInput || sh.w > kMaxSrInput)
        throw DataError("input '" + input.string() + "' is " + std::to_string(sh.w) + "x" + std::to_string(sh.h) +
                        "; each side must be between 1 and " + std::to_string(kMaxSrInput) + " pixels");
    const Tensor<float> sr = generate(s.config.generator, s.generator, normalize(pixels));
    write_png(output, denormalize(sr));
}

// ---------------------------------------------------------------------------
// eval

struct MetricNets {
    std::vector<MetricNet<float>> nets;
    std::vector<std::string> kinds;
};

/// Builds the configured reference nets. The rec net trains an autoencoder on
/// metrics.rec_dir, which has to share no source image with `test`.
inline MetricNets build_metric_nets(const RunConfig& cfg, const PairDataset& test, std::ostream& log)
{
    const auto& m = cfg.metrics;
    const std::size_t deepest = *std::max_element(m.layers.begin(), m.layers.end());
    const FeatureTap tap{TapNetwork::discriminator, deepest, false};
    MetricNets out;
    for (const auto& name : m.nets) {
        if (name == "identity") {
            out.nets.push_back(identity_metric_net<float>());
        } else if (name == "random") {
            auto phi = std::make_shared<ParameterSet<float>>(build_extractor<float>(tap, m.random_seed));
            out.nets.push_back(extractor_metric_net<float>("random", "random", phi, m.layers));
        } else {
            cmd_detail::require_dir(m.rec_dir, "metrics.rec_dir");
            const PairDataset ref = load_corpus(m.rec_dir, cfg.data.corpus(), Split::train);
            if (!disjoint_sources(ref, test))
                throw ConfigError("metrics.rec_dir shares source images with the test set");
            TrainConfig tc = cfg.train;
            tc.seed = m.random_seed;
            tc.strategy.variant = Variant::rec;
            tc.strategy.tap = tap;
            tc.pretrain_iterations = m.rec_iterations;
            tc.batch_size = std::min(tc.batch_size, ref.size());
            auto s = init_training<float>(tc);
            pretrain_extractor(s, ref, nullptr);
            log << "rec reference net: " << ref.size() << " pairs, loss " << s.pretrain_history.front() << " -> "
                << s.pretrain_history.back() << "\n";
            auto phi = std::make_shared<ParameterSet<float>>(std::move(s.phi));
            out.nets.push_back(extractor_metric_net<float>("rec", "rec", phi, m.layers));
        }
        out.kinds.push_back(out.nets.back().kind);
    }
    for (const auto& e : m.external) {
        const Archive a = load_archive(e.path);
        std::map<std::string, Tensor<float>> records;
        for (const auto& [k, _] : a.records)
            records.emplace(k, a.get_as<float>(k));
        auto net = std::make_shared<const ExternalNetwork<float>>(ExternalNetwork<float>::from_records(records));
        out.nets.push_back(external_metric_net<float>(e.name, net));
        out.kinds.push_back("external");
    }
    if (out.nets.empty())
        throw ConfigError("metrics.nets and metrics.external are both empty");
    return out;
}

struct EvalOutcome {
    MetricsReport report;
    std::filesystem::path csv;
    std::filesystem::path meta;
};

struct NamedCheckpoint {
    std::string method;
    std::filesystem::path path;
};

/// Names each checkpoint after its strategy, adding the file stem when two
/// checkpoints share one.
inline std::vector<NamedCheckpoint> name_checkpoints(const std::vector<std::filesystem::path>& paths)
{
    std::vector<NamedCheckpoint> out;
    std::map<std::string, int> seen;
    for (const auto& p : paths) {
        std::string method;
        try {
            const Archive a = load_archive(p);
            method = nlohmann::json::parse(a.metadata).at("config").at("strategy").at("variant").get<std::string>();
        } catch (const Error& e) {
            throw IntegrityError("checkpoint '" + p.string() + "': " + e.what());
        } catch (const std::exception& e) {
            throw IntegrityError("checkpoint '" + p.string() + "' has no strategy metadata (" + e.what() + ")");
        }
        out.push_back({method, p});
        ++seen[method];
    }
    for (auto& c : out)
        if (seen[c.method] > 1)
            c.method += ":" + c.path.parent_path().filename().string() + "/" + c.path.stem().string();
    return out;
}

/// Evaluates every checkpoint on the test set and writes
/// report_<dataset>_<timestamp>.csv plus a .meta.json sidecar.
inline EvalOutcome cmd_eval(const std::vector<NamedCheckpoint>& checkpoints, const std::filesystem::path& test,
                            const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& log)
{
    if (checkpoints.empty())
        throw ConfigError("eval needs at least one checkpoint");
    cfg.validate();
    const PairDataset data = cmd_detail::load_test_set(test, cfg);
    const MetricNets nets = build_metric_nets(cfg, data, log);

    MetricsReport report;
    report.dataset = cmd_detail::dataset_tag(test);
    report.samples = data.size();
    for (const auto& n : nets.nets)
        report.nets.push_back(n.name);

    std::vector<Tensor<float>> hr(data.hr.begin(), data.hr.end());
    auto methods = nlohmann::ordered_json::array();
    for (const auto& c : checkpoints) {
        TrainingState<float> s;
        try {
            s = load_checkpoint<float>(c.path);
        } catch (const Error& e) {
            throw IntegrityError("cannot evaluate checkpoint '" + c.path.string() + "': " + e.what());
        }
        std::vector<Tensor<float>> sr;
        for (const auto& lr : data.lr)
            sr.push_back(generate(s.config.generator, s.generator, lr));
        report.add_row(evaluate_outputs(c.method, sr, hr, nets.nets));
        methods.push_back({{"method", c.method},
                           {"checkpoint", c.path.filename().string()},
                           {"iteration", s.iteration},
                           {"train_manifest_hash", s.manifest_hash}});
        log << "evaluated " << c.method << "\n";
    }

    std::filesystem::create_directories(out_dir);
    const std::string stem = "report_" + report.dataset + "_" + cmd_detail::timestamp();
    EvalOutcome out{report, out_dir / (stem + ".csv"), out_dir / (stem + ".meta.json")};
    auto meta = report.meta(nets.kinds);
    meta["test_manifest_hash"] = data.manifest_hash();
    meta["metric_layers"] = cfg.metrics.layers;
    meta["methods"] = methods;
    cmd_detail::write_text(out.csv, report.to_csv());
    cmd_detail::write_text(out.meta, meta.dump(2) + "\n");
    log << "wrote " << out.csv.string() << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// compare

struct CompareOutcome {
    std::optional<EvalOutcome> eval;
    std::vector<std::string> failed;
    std::map<std::string, std::vector<std::string>> rankings;
    bool manifests_identical = true;
};

/// Trains every listed strategy with the same seed and data into
/// <output_dir>/<strategy>, then evaluates them together. A failing strategy
/// is recorded and the rest still run.
inline CompareOutcome cmd_compare(const RunConfig& cfg, const std::string& source_text, std::ostream& log)
{
    namespace fs = std::filesystem;
    cfg.validate();
    cmd_detail::require_dir(cfg.data.train_dir, "data.train_dir");
    if (cfg.data.test_dir.empty())
        throw ConfigError("data.test_dir is required");
    CompareOutcome out;
    std::vector<fs::path> finals;
    auto strategies = nlohmann::ordered_json::array();
    std::set<std::uint64_t> hashes;
    for (Variant v : cfg.compare.strategies) {
        RunConfig run = cfg;
        run.train.strategy.variant = v;
        run.output_dir = cfg.output_dir / to_string(v);
        try {
            const auto t = cmd_train(run, source_text, log);
            finals.push_back(t.final_checkpoint);
            hashes.insert(t.manifest_hash);
            strategies.push_back({{"strategy", to_string(v)}, {"status", "ok"}, {"manifest_hash", t.manifest_hash}});
        } catch (const std::exception& e) {
            log << "strategy " << to_string(v) << " failed: " << e.what() << "\n";
            out.failed.push_back(to_string(v));
            strategies.push_back({{"strategy", to_string(v)}, {"status", "failed"}, {"error", e.what()}});
        }
    }
    out.manifests_identical = hashes.size() <= 1;

    nlohmann::ordered_json summary;
    summary["strategies"] = strategies;
    summary["manifests_identical"] = out.manifests_identical;
    if (!finals.empty()) {
        out.eval = cmd_eval(name_checkpoints(finals), cfg.data.test_dir, cfg, cfg.output_dir, log);
        summary["report"] = out.eval->csv.filename().string();
        for (const auto& col : out.eval->report.columns()) {
            if (col == "method")
                continue;
            out.rankings[col] = out.eval->report.ranking(col);
            summary["ranking"][col] = out.rankings[col];
        }
    }
    cmd_detail::write_text(cfg.output_dir / "compare.json", summary.dump(2) + "\n");

    log << "training manifests identical across strategies: " << (out.manifests_identical ? "yes" : "NO") << "\n";
    for (const auto& [col, order] : out.rankings) {
        log << "rank by " << col << ":";
        for (const auto& m : order)
            log << ' ' << m;
        log << "\n";
    }
    if (!out.manifests_identical)
        throw InterfaceError("strategies were trained on different manifests");
    return out;
}

} // namespace gcnsr

#endif
