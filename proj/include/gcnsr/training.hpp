#ifndef GCNSR_TRAINING_HPP
#define GCNSR_TRAINING_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcnsr/archive.hpp"
#include "gcnsr/data.hpp"
#include "gcnsr/errors.hpp"
#include "gcnsr/losses.hpp"
#include "gcnsr/metrics.hpp"
#include "gcnsr/models.hpp"
#include "gcnsr/parameters.hpp"
#include "gcnsr/strategy.hpp"
#include "gcnsr/train_config.hpp"

namespace gcnsr {

inline constexpr std::uint32_t kCheckpointFormat = 1;

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), 0x9e3779b9u};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

template <class T>
constexpr const char* dtype_name()
{
    return std::is_same_v<T, float> ? "f32" : "f64";
}

} // namespace detail

/// Everything a run needs to continue bit-exactly: parameters with Adam
/// state, iteration counter, batch order position and loss history.
template <class T>
struct TrainingState {
    TrainConfig config;
    StrategyPlan plan;
    AutoencoderSpec autoencoder;

    ParameterSet<T> generator;
    ParameterSet<T> phi;      // features extractor (shared by the heads when joint)
    ParameterSet<T> dis_head; // discriminator layers after phi
    ParameterSet<T> ae_head;  // encoder remainder + decoder
    ParameterSet<T> cls_head; // classifier layers after phi (cla pretraining)

    std::int64_t iteration = 0;
    bool pretrained = false;
    std::uint64_t adversarial_evaluations = 0; // generator objectives that computed the adversarial term
    std::uint64_t manifest_hash = 0;
    std::uint64_t batch_seed = 0;
    BatchIterator::State batch_state{};
    std::vector<LossReport> history;
    std::vector<double> pretrain_history;

    /// Split point of the discriminator / autoencoder trunk between phi and the heads.
    const FeatureTap& trunk_tap() const { return config.strategy.tap; }

    FeatureSource<T> content_source() { return {plan.content_tap, plan.content_tap.network == TapNetwork::identity ? nullptr : &phi}; }

    /// (name, set) pairs in serialization order; empty sets are skipped.
    std::vector<std::pair<std::string, ParameterSet<T>*>> sets() { return named_sets(*this); }
    std::vector<std::pair<std::string, const ParameterSet<T>*>> sets() const { return named_sets(*this); }

    template <class Self>
    static auto named_sets(Self& self)
    {
        using Ptr = decltype(&self.generator);
        std::vector<std::pair<std::string, Ptr>> out;
        for (auto [name, ps] : {std::pair{"generator", &self.generator}, std::pair{"phi", &self.phi},
                                std::pair{"dis_head", &self.dis_head}, std::pair{"ae_head", &self.ae_head},
                                std::pair{"cls_head", &self.cls_head}})
            if (!ps->empty())
                out.emplace_back(name, ps);
        return out;
    }

    friend bool operator==(const TrainingState& a, const TrainingState& b)
    {
        return a.config == b.config && a.generator == b.generator && a.phi == b.phi && a.dis_head == b.dis_head &&
               a.ae_head == b.ae_head && a.cls_head == b.cls_head && a.iteration == b.iteration &&
               a.pretrained == b.pretrained && a.adversarial_evaluations == b.adversarial_evaluations &&
               a.manifest_hash == b.manifest_hash && a.batch_seed == b.batch_seed && a.batch_state == b.batch_state &&
               a.history == b.history && a.pretrain_history == b.pretrain_history;
    }
};

template <class T>
using Checkpoint = TrainingState<T>;

/// Fresh state for `config`: builds every network the strategy needs.
template <class T>
TrainingState<T> init_training(const TrainConfig& config, bool labels_available = false)
{
    config.validate();
    TrainingState<T> s;
    s.config = config;
    s.plan = resolve_strategy(config.strategy, labels_available || config.strategy.variant != Variant::cla);
    s.autoencoder.trunk = config.discriminator;
    const auto seed = config.seed;
    const FeatureTap& tap = s.trunk_tap();

    s.generator = build_generator<T>(config.generator, detail::derive_seed(seed, 1));
    if (tap.network == TapNetwork::random)
        s.phi = build_extractor<T>(tap, config.strategy.random_seed);
    else if (s.plan.content_tap.network != TapNetwork::identity || s.plan.discriminator)
        s.phi = build_extractor<T>(tap, detail::derive_seed(seed, 2));
    if (s.plan.discriminator)
        s.dis_head = build_discriminator_head<T>(config.discriminator, tap, detail::derive_seed(seed, 3));
    if (s.plan.autoencoder)
        s.ae_head = build_autoencoder_head<T>(s.autoencoder, tap, detail::derive_seed(seed, 4));
    s.batch_seed = detail::derive_seed(seed, 6);
    return s;
}

/// A classifier head needs the class count, which is known only once the
/// labeled corpus is loaded.
template <class T>
void attach_classifier(TrainingState<T>& s, std::size_t classes)
{
    DiscriminatorSpec spec = s.config.discriminator;
    spec.outputs = classes;
    s.cls_head = build_discriminator_head<T>(spec, s.trunk_tap(), detail::derive_seed(s.config.seed, 5));
}

namespace detail {

template <class T>
Var<T> discriminate(TrainingState<T>& s, const Var<T>& image, Binding binding)
{
    Scope<T> p(s.phi, binding), h(s.dis_head, binding);
    return discriminator_forward(s.config.discriminator, s.trunk_tap(), p, h, image).prob;
}

template <class T>
Var<T> reconstruct(TrainingState<T>& s, const Var<T>& image, Binding binding)
{
    Scope<T> p(s.phi, binding), h(s.ae_head, binding);
    return autoencoder_forward(s.autoencoder, s.trunk_tap(), p, h, image).reconstruction;
}

inline void require_finite(const LossReport& r, const char* phase)
{
    if (!r.all_finite()) {
        std::ostringstream os;
        os << "non-finite loss in " << phase << " at iteration " << r.iteration << " (content " << r.content
           << ", adversarial " << r.adversarial << ", reconstruction " << r.reconstruction << ", discriminator "
           << r.discriminator << ")";
        throw NonFiniteError(os.str());
    }
}

template <class T>
std::size_t pretrain_batch(const TrainingState<T>& s, std::size_t n)
{
    return std::min(s.config.batch_size, n);
}

} // namespace detail

/// Generator objective lambda1 * content + lambda2 * adversarial on one batch.
/// Gradients flow into the generator only when `binding.trainable`.
template <class T>
Var<T> generator_objective(TrainingState<T>& s, const Tensor<T>& lr, const Tensor<T>& hr, Binding binding,
                           LossReport* report = nullptr)
{
    Scope<T> g(s.generator, binding);
    Var<T> sr = generator_forward(s.config.generator, g, Var<T>::constant(lr));
    const auto src = s.content_source();
    const Binding extractor = Binding::frozen_train();
    Var<T> content =
        feature_content_loss(extract_features(src, Var<T>::constant(hr), extractor), extract_features(src, sr, extractor));
    Var<T> total = ag::scale(content, s.plan.lambda1);
    double adversarial = 0.0;
    if (s.plan.uses_adversarial_term()) {
        ++s.adversarial_evaluations;
        Var<T> omega = generator_adversarial_term(detail::discriminate(s, sr, extractor), s.plan.adv_formulation);
        adversarial = omega.item();
        total = ag::add_scalars(total, ag::scale(omega, s.plan.lambda2));
    }
    if (report) {
        report->content = content.item();
        report->adversarial = adversarial;
        report->total_generator = total.item();
    }
    return total;
}

/// Extractor objective dis_weight * L_D + rec_weight * L_rec on one batch
/// (joint variants); the generator output is treated as a constant.
template <class T>
void extractor_update(TrainingState<T>& s, const Tensor<T>& lr, const Tensor<T>& hr, LossReport& report)
{
    Tensor<T> sr;
    {
        Scope<T> g(s.generator, Binding::frozen_train());
        sr = generator_forward(s.config.generator, g, Var<T>::constant(lr)).value();
    }
    const Binding train = Binding::training();
    Var<T> total;
    bool have = false;
    if (s.plan.discriminator) {
        Var<T> d_real = detail::discriminate(s, Var<T>::constant(hr), train);
        Var<T> d_fake = detail::discriminate(s, Var<T>::constant(sr), train);
        Var<T> ld = discriminator_loss(d_real, d_fake);
        report.discriminator = ld.item();
        total = ag::scale(ld, s.plan.dis_weight);
        have = true;
    }
    if (s.plan.autoencoder) {
        Var<T> lrec = reconstruction_loss(Var<T>::constant(hr), detail::reconstruct(s, Var<T>::constant(hr), train));
        report.reconstruction = lrec.item();
        Var<T> weighted = ag::scale(lrec, s.plan.rec_weight);
        total = have ? ag::add_scalars(total, weighted) : weighted;
        have = true;
    }
    if (!have)
        return;
    detail::require_finite(report, "extractor step");
    backward(total);
    std::vector<ParameterSet<T>*> sets{&s.phi};
    if (s.plan.discriminator)
        sets.push_back(&s.dis_head);
    if (s.plan.autoencoder)
        sets.push_back(&s.ae_head);
    for (auto* ps : sets)
        for (const auto& [name, e] : ps->entries())
            if (!e.grad.all_finite())
                throw NonFiniteError("non-finite gradient for extractor parameter '" + name + "'");
    for (auto* ps : sets)
        adam_step(*ps, s.config.adam);
}

/// One iteration: extractor update(s) for joint variants, then one generator update.
template <class T>
LossReport train_step(TrainingState<T>& s, const Tensor<T>& lr, const Tensor<T>& hr)
{
    if (s.plan.disjoint_pretraining() && !s.pretrained)
        throw InterfaceError(std::string("variant ") + to_string(s.plan.variant) +
                             " needs its extractor pretrained before generator training");
    LossReport report;
    report.iteration = s.iteration + 1;
    // BN running statistics move during the forward passes; put them back if the step aborts.
    std::vector<std::map<std::string, Tensor<T>>> buffers;
    for (auto& [_, ps] : s.sets())
        buffers.push_back(ps->buffers());
    try {
        if (s.plan.joint())
            for (std::size_t k = 0; k < s.config.extractor_steps; ++k)
                extractor_update(s, lr, hr, report);

        Var<T> total = generator_objective(s, lr, hr, Binding::training(), &report);
        detail::require_finite(report, "generator step");
        backward(total);
        adam_step(s.generator, s.config.adam);
    } catch (const NonFiniteError&) {
        std::size_t k = 0;
        for (auto& [_, ps] : s.sets()) {
            ps->buffers() = std::move(buffers[k++]);
            ps->zero_grad();
        }
        throw;
    }
    ++s.iteration;
    s.history.push_back(report);
    return report;
}

/// Disjoint pretraining of the extractor (rec: autoencoder on the HR crops,
/// cla: classifier on the labeled corpus). Phi stays frozen afterwards.
template <class T>
void pretrain_extractor(TrainingState<T>& s, const PairDataset& data, const LabeledDataset* labeled)
{
    if (!s.plan.disjoint_pretraining() || s.pretrained)
        return;
    const AdamConfig& adam = s.config.adam;
    const Binding train = Binding::training();
    if (s.plan.extractor == ExtractorTraining::pretrained_rec) {
        BatchIterator it(data.size(), detail::pretrain_batch(s, data.size()), detail::derive_seed(s.config.seed, 7));
        for (std::size_t i = 0; i < s.config.pretrain_iterations; ++i) {
            const auto idx = it.next();
            const Tensor<T> hr = data.batch<T>(idx).second;
            Var<T> loss = reconstruction_loss(Var<T>::constant(hr), detail::reconstruct(s, Var<T>::constant(hr), train));
            if (!std::isfinite(loss.item()))
                throw NonFiniteError("non-finite reconstruction loss at pretraining step " + std::to_string(i + 1));
            s.pretrain_history.push_back(loss.item());
            backward(loss);
            adam_step(s.phi, adam);
            adam_step(s.ae_head, adam);
        }
    } else {
        if (!labeled || labeled->size() == 0)
            throw ConfigError("variant cla requires a labeled corpus (data.labeled_dir)");
        if (s.cls_head.empty())
            attach_classifier(s, labeled->classes.size());
        DiscriminatorSpec spec = s.config.discriminator;
        spec.outputs = labeled->classes.size();
        BatchIterator it(labeled->size(), detail::pretrain_batch(s, labeled->size()),
                         detail::derive_seed(s.config.seed, 8));
        for (std::size_t i = 0; i < s.config.pretrain_iterations; ++i) {
            const auto idx = it.next();
            auto [images, labels] = labeled->batch<T>(idx);
            Scope<T> p(s.phi, train), h(s.cls_head, train);
            auto out = discriminator_forward(spec, s.trunk_tap(), p, h, Var<T>::constant(images));
            Var<T> loss = classification_loss(out.logits, labels);
            if (!std::isfinite(loss.item()))
                throw NonFiniteError("non-finite classification loss at pretraining step " + std::to_string(i + 1));
            s.pretrain_history.push_back(loss.item());
            backward(loss);
            adam_step(s.phi, adam);
            adam_step(s.cls_head, adam);
        }
    }
    s.pretrained = true;
}

/// Fraction of labeled images the pretrained classifier gets right (eval mode).
template <class T>
double classifier_accuracy(TrainingState<T>& s, const LabeledDataset& labeled)
{
    DiscriminatorSpec spec = s.config.discriminator;
    spec.outputs = labeled.classes.size();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labeled.size(); ++i) {
        const std::size_t idx[1] = {i};
        auto [image, label] = labeled.batch<T>(idx);
        Scope<T> p(s.phi, Binding::inference()), h(s.cls_head, Binding::inference());
        const auto logits = discriminator_forward(spec, s.trunk_tap(), p, h, Var<T>::constant(image)).logits.value();
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.size(); ++c)
            if (logits[c] > logits[best])
                best = c;
        correct += static_cast<int>(best) == label[0];
    }
    return static_cast<double>(correct) / static_cast<double>(labeled.size());
}

struct TrainHooks {
    std::function<void(const LossReport&)> on_log;        // every log_every iterations
    std::function<void(std::int64_t)> on_checkpoint;       // every checkpoint_every iterations
    std::function<void(const NonFiniteError&)> on_failure; // before a non-finite error propagates
};

/// Continues training until `stop_iteration` iterations have been run.
template <class T>
void run_until(TrainingState<T>& s, const PairDataset& data, std::int64_t stop_iteration, const TrainHooks& hooks = {})
{
    if (data.empty())
        throw DataError("training dataset is empty");
    BatchIterator it(data.size(), s.config.batch_size, s.batch_seed);
    it.restore(s.batch_state);
    while (s.iteration < stop_iteration) {
        const auto idx = it.next();
        const auto [lr, hr] = data.batch<T>(idx);
        LossReport r;
        try {
            r = train_step(s, lr, hr);
        } catch (const NonFiniteError& e) {
            if (hooks.on_failure)
                hooks.on_failure(e);
            throw;
        }
        s.batch_state = it.state();
        const auto i = static_cast<std::size_t>(s.iteration);
        if (hooks.on_log && s.config.log_every && i % s.config.log_every == 0)
            hooks.on_log(r);
        if (hooks.on_checkpoint && s.config.checkpoint_every && i % s.config.checkpoint_every == 0)
            hooks.on_checkpoint(s.iteration);
    }
}

/// Initializes, pretrains when the strategy requires it, then trains for
/// config.iterations iterations.
template <class T>
TrainingState<T> train(const TrainConfig& config, const PairDataset& data, const LabeledDataset* labeled = nullptr,
                       const TrainHooks& hooks = {})
{
    if (data.empty())
        throw DataError("training dataset is empty");
    TrainingState<T> s = init_training<T>(config, labeled && labeled->size() > 0);
    s.manifest_hash = data.manifest_hash();
    if (config.iterations > 0)
        pretrain_extractor(s, data, labeled);
    run_until(s, data, static_cast<std::int64_t>(config.iterations), hooks);
    return s;
}

/// Mean per-pixel squared error of the generator (eval mode) over a dataset.
template <class T>
double dataset_l2(TrainingState<T>& s, const PairDataset& data)
{
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Tensor<T> sr = generate(s.config.generator, s.generator, data.lr[i].template cast<T>());
        total += l2_error(sr, data.hr[i].template cast<T>());
    }
    return total / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// checkpoints

template <class T>
Archive checkpoint_archive(const TrainingState<T>& s)
{
    Archive a;
    nlohmann::ordered_json steps = nlohmann::ordered_json::object();
    for (auto& [name, ps] : s.sets()) {
        store_parameters(a, name, *ps);
        steps[name] = ps->step_count();
    }
    Tensor<double> losses(Shape{s.history.size(), 6, 1, 1});
    for (std::size_t i = 0; i < s.history.size(); ++i) {
        const auto& r = s.history[i];
        const double row[6] = {static_cast<double>(r.iteration), r.content, r.adversarial,
                               r.reconstruction, r.discriminator, r.total_generator};
        for (std::size_t k = 0; k < 6; ++k)
            losses[i * 6 + k] = row[k];
    }
    a.put("history/losses", std::move(losses));
    a.put("history/pretrain",
          Tensor<double>(Shape{s.pretrain_history.size(), 1, 1, 1}, std::vector<double>(s.pretrain_history)));

    nlohmann::ordered_json meta;
    meta["format_version"] = kCheckpointFormat;
    meta["dtype"] = detail::dtype_name<T>();
    meta["config"] = to_json(s.config);
    meta["iteration"] = s.iteration;
    meta["pretrained"] = s.pretrained;
    meta["classes"] = s.cls_head.empty() ? 0 : s.cls_head.entry("dense2.bias").value.size();
    meta["adversarial_evaluations"] = s.adversarial_evaluations;
    meta["manifest_hash"] = s.manifest_hash;
    meta["step_counts"] = steps;
    meta["initialization"] = {{"conv_dense", "he_normal"}, {"prelu_slope", kPreluInitSlope},
                              {"bn_gamma", 1.0},         {"bn_beta", 0.0},
                              {"bn_eps", kernels::kBatchNormEps}, {"bn_momentum", kernels::kBatchNormMomentum}};
    a.metadata = meta.dump(2);
    a.rng_state = "batch_order seed=" + std::to_string(s.batch_seed) + " epoch=" + std::to_string(s.batch_state.epoch) +
                  " cursor=" + std::to_string(s.batch_state.cursor);
    return a;
}

template <class T>
TrainingState<T> state_from_archive(const Archive& a, const std::string& source = "checkpoint")
{
    nlohmann::ordered_json meta;
    try {
        meta = nlohmann::ordered_json::parse(a.metadata);
    } catch (const std::exception& e) {
        throw IntegrityError(source + ": unreadable checkpoint metadata (" + e.what() + ")");
    }
    if (!meta.is_object() || !meta.contains("format_version"))
        throw IntegrityError(source + ": not a training checkpoint (no metadata)");
    const auto version = meta["format_version"].get<std::uint32_t>();
    if (version != kCheckpointFormat)
        throw VersionError(source + ": checkpoint format " + std::to_string(version) + ", this build reads format " +
                           std::to_string(kCheckpointFormat));
    if (meta["dtype"].get<std::string>() != detail::dtype_name<T>())
        throw IntegrityError(source + ": checkpoint dtype " + meta["dtype"].get<std::string>() + ", requested " +
                             detail::dtype_name<T>());

    const TrainConfig config = train_config_from_json(meta["config"]);
    TrainingState<T> s = init_training<T>(config, true);
    if (const auto classes = meta.value("classes", std::size_t{0}); classes > 0)
        attach_classifier(s, classes);
    for (auto& [name, ps] : s.sets()) {
        restore_parameters(a, name, *ps);
        ps->set_step_count(meta["step_counts"].value(name, std::uint64_t{0}));
    }
    s.iteration = meta["iteration"].get<std::int64_t>();
    s.pretrained = meta["pretrained"].get<bool>();
    s.adversarial_evaluations = meta["adversarial_evaluations"].get<std::uint64_t>();
    s.manifest_hash = meta["manifest_hash"].get<std::uint64_t>();

    std::istringstream rng(a.rng_state);
    std::string tag, seed, epoch, cursor;
    rng >> tag >> seed >> epoch >> cursor;
    if (tag != "batch_order" || seed.rfind("seed=", 0) != 0 || epoch.rfind("epoch=", 0) != 0 ||
        cursor.rfind("cursor=", 0) != 0)
        throw IntegrityError(source + ": malformed rng state '" + a.rng_state + "'");
    s.batch_seed = std::stoull(seed.substr(5));
    s.batch_state.epoch = std::stoull(epoch.substr(6));
    s.batch_state.cursor = std::stoull(cursor.substr(7));

    const auto& losses = a.get<double>("history/losses");
    if (losses.shape().c != 6)
        throw IntegrityError(source + ": malformed loss history");
    for (std::size_t i = 0; i < losses.shape().n; ++i) {
        LossReport r;
        r.iteration = static_cast<std::int64_t>(losses[i * 6]);
        r.content = losses[i * 6 + 1];
        r.adversarial = losses[i * 6 + 2];
        r.reconstruction = losses[i * 6 + 3];
        r.discriminator = losses[i * 6 + 4];
        r.total_generator = losses[i * 6 + 5];
        s.history.push_back(r);
    }
    const auto& pre = a.get<double>("history/pretrain");
    s.pretrain_history.assign(pre.begin(), pre.end());
    return s;
}

template <class T>
std::string encode_checkpoint(const TrainingState<T>& s)
{
    return encode_archive(checkpoint_archive(s));
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const TrainingState<T>& s)
{
    write_file_bytes(path, encode_checkpoint(s));
}

template <class T>
TrainingState<T> load_checkpoint(const std::filesystem::path& path)
{
    return state_from_archive<T>(load_archive(path), path.string());
}

} // namespace gcnsr

#endif
