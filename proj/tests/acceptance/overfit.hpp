#ifndef GCNSR_ACCEPTANCE_OVERFIT_HPP
#define GCNSR_ACCEPTANCE_OVERFIT_HPP

#include <filesystem>

#include "gcnsr/training.hpp"

namespace acceptance {

inline std::filesystem::path toy_corpus(const std::string& name)
{
    return std::filesystem::path(GCNSR_TEST_DATA) / name;
}

/// Default architecture and optimizer; the batch covers the whole 4-image
/// corpus and 500 iterations.
inline gcnsr::TrainConfig overfit_config(gcnsr::Variant v)
{
    gcnsr::TrainConfig c;
    c.seed = 2024;
    c.iterations = 500;
    c.batch_size = 4;
    c.log_every = 0;
    c.strategy.variant = v;
    return c;
}

} // namespace acceptance

#endif
