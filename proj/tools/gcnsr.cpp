// gcnsr: train super-resolution generators, super-resolve images, evaluate
// checkpoints and compare learning strategies.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gcnsr/commands.hpp"

namespace {

struct GlobalFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

gcnsr::LoadedConfig resolve(const GlobalFlags& g)
{
    std::optional<std::filesystem::path> file;
    if (!g.config.empty())
        file = g.config;
    auto loaded = gcnsr::load_run_config(file);
    if (g.seed)
        loaded.config.train.seed = *g.seed;
    if (!g.out.empty())
        loaded.config.output_dir = g.out;
    return loaded;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Super-resolution generators trained against learned feature losses"};
    app.require_subcommand(1);
    GlobalFlags g;
    app.add_option("--config", g.config, "JSON run configuration");
    app.add_option("--seed", g.seed, "Training seed (overrides the config)");
    app.add_option("--out", g.out, "Output directory (overrides output_dir)");

    auto* train = app.add_subcommand("train", "Train one strategy");
    std::string strategy;
    std::optional<std::size_t> iterations;
    train->add_option("--strategy", strategy, "mse, ran, rec, cla, dis, adv, adv_mse, dis_rec or adv_rec");
    train->add_option("--iterations", iterations, "Generator iterations");

    auto* sr = app.add_subcommand("sr", "Super-resolve one image (x4)");
    std::string checkpoint, input, output;
    sr->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
    sr->add_option("input", input, "Input image")->required();
    sr->add_option("output", output, "Output PNG")->required();

    auto* eval = app.add_subcommand("eval", "Evaluate checkpoints on a test set");
    std::vector<std::string> checkpoints;
    std::string test;
    eval->add_option("checkpoints", checkpoints, "Checkpoint files")->required();
    eval->add_option("--test", test, "Test image directory or manifest (default data.test_dir)");

    auto* compare = app.add_subcommand("compare", "Train and evaluate every strategy in compare.strategies");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? gcnsr::kExitOk : gcnsr::kExitUsage;
    }

    try {
        if (*train) {
            auto loaded = resolve(g);
            if (!strategy.empty())
                loaded.config.train.strategy.variant = gcnsr::parse_variant(strategy);
            if (iterations)
                loaded.config.train.iterations = *iterations;
            gcnsr::cmd_train(loaded.config, loaded.source_text, std::cout);
        } else if (*sr) {
            gcnsr::cmd_sr(checkpoint, input, output);
            std::cout << "wrote " << output << "\n";
        } else if (*eval) {
            const auto loaded = resolve(g);
            std::vector<std::filesystem::path> paths(checkpoints.begin(), checkpoints.end());
            const auto out = gcnsr::cmd_eval(gcnsr::name_checkpoints(paths),
                                             test.empty() ? loaded.config.data.test_dir : std::filesystem::path(test),
                                             loaded.config, loaded.config.output_dir, std::cout);
            std::cout << out.report.to_csv();
        } else if (*compare) {
            const auto loaded = resolve(g);
            const auto out = gcnsr::cmd_compare(loaded.config, loaded.source_text, std::cout);
            if (!out.failed.empty()) {
                std::cerr << "error: " << out.failed.size() << " strategies failed\n";
                return gcnsr::kExitRuntime;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return gcnsr::exit_code_for(e);
    }
    return gcnsr::kExitOk;
}
