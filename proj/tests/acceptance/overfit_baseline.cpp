// Records the training-L2 trajectory of the overfit runs on the 4-image toy
// corpus. Its output (tests/data/overfit_baseline.json) is where the
// acceptance thresholds come from.

#include <chrono>
#include <iostream>

#include <json.hpp>

#include "acceptance/overfit.hpp"

int main(int argc, char** argv)
{
    using namespace gcnsr;
    const std::filesystem::path out = argc > 1 ? argv[1] : "overfit_baseline.json";
    const PairDataset data = load_corpus(acceptance::toy_corpus("toy4"), CorpusOptions{});
    nlohmann::ordered_json doc;
    doc["corpus"] = "toy4";
    doc["manifest_hash"] = data.manifest_hash();
    for (Variant v : {Variant::mse, Variant::adv_rec}) {
        const TrainConfig cfg = acceptance::overfit_config(v);
        doc["config"][to_string(v)] = to_json(cfg);
        auto s = init_training<float>(cfg);
        const auto t0 = std::chrono::steady_clock::now();
        auto trajectory = nlohmann::ordered_json::array();
        for (std::size_t it = 50; it <= cfg.iterations; it += 50) {
            run_until(s, data, static_cast<std::int64_t>(it));
            const double l2 = dataset_l2(s, data);
            trajectory.push_back({{"iteration", it}, {"l2", l2}});
            std::cout << to_string(v) << " iteration " << it << " L2 " << l2 << std::endl;
        }
        doc["runs"][to_string(v)] = {
            {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()},
            {"trajectory", trajectory}};
    }
    write_file_bytes(out, doc.dump(2) + "\n");
}
