#ifndef GCNSR_DATA_HPP
#define GCNSR_DATA_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gcnsr/archive.hpp"
#include "gcnsr/errors.hpp"
#include "gcnsr/image.hpp"
#include "gcnsr/tensor.hpp"

namespace gcnsr {

// ---------------------------------------------------------------------------
// value range

/// [0, 255] pixel values to [-1, 1].
template <class T>
Tensor<T> normalize(const Tensor<T>& pixels)
{
    Tensor<T> out(pixels.shape());
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        const double v = static_cast<double>(pixels[i]);
        if (!(v >= 0.0 && v <= 255.0))
            throw DataError("normalize: pixel value " + std::to_string(v) + " outside [0, 255]");
        out[i] = static_cast<T>(v / 127.5 - 1.0);
    }
    return out;
}

/// [-1, 1] back to integral [0, 255] values (clamped, rounded half away from zero).
template <class T>
Tensor<T> denormalize(const Tensor<T>& x)
{
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = (static_cast<double>(x[i]) + 1.0) * 127.5;
        out[i] = static_cast<T>(std::round(std::clamp(v, 0.0, 255.0)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// downscaling

enum class DownscaleMode { bicubic, average };

inline const char* to_string(DownscaleMode m) { return m == DownscaleMode::bicubic ? "bicubic" : "average"; }

inline DownscaleMode parse_downscale_mode(const std::string& s)
{
    if (s == "bicubic")
        return DownscaleMode::bicubic;
    if (s == "average")
        return DownscaleMode::average;
    throw ConfigError("unknown downscale mode '" + s + "' (expected bicubic or average)");
}

namespace detail {

// Keys cubic convolution kernel with a = -0.5.
inline double cubic_kernel(double x)
{
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x <= 1.0)
        return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0)
        return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
    return 0.0;
}

struct ResampleTaps {
    std::size_t first = 0;
    std::vector<double> weights;
};

// Antialiased taps for shrinking `in` samples by `factor`: the kernel is
// stretched by the factor, clipped at the borders and renormalized.
inline std::vector<ResampleTaps> downscale_taps(std::size_t in, std::size_t factor)
{
    const double scale = static_cast<double>(factor);
    const double support = 2.0 * scale;
    std::vector<ResampleTaps> taps(in / factor);
    for (std::size_t i = 0; i < taps.size(); ++i) {
        const double center = (static_cast<double>(i) + 0.5) * scale;
        const auto lo = static_cast<long>(std::max(0.0, std::floor(center - support + 0.5)));
        const auto hi = static_cast<long>(std::min(static_cast<double>(in), std::floor(center + support + 0.5)));
        ResampleTaps t;
        t.first = static_cast<std::size_t>(lo);
        double total = 0.0;
        for (long j = lo; j < hi; ++j) {
            const double w = cubic_kernel((static_cast<double>(j) + 0.5 - center) / scale);
            t.weights.push_back(w);
            total += w;
        }
        for (double& w : t.weights)
            w /= total;
        taps[i] = std::move(t);
    }
    return taps;
}

} // namespace detail

/// Shrinks the spatial extents of an N x C x H x W tensor by `factor`.
template <class T>
Tensor<T> downscale(const Tensor<T>& hr, std::size_t factor = 4, DownscaleMode mode = DownscaleMode::bicubic)
{
    const Shape& s = hr.shape();
    if (factor == 0 || s.h % factor != 0 || s.w % factor != 0) {
        throw DimensionError("downscale: extents " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                             " not divisible by " + std::to_string(factor));
    }
    const std::size_t oh = s.h / factor, ow = s.w / factor;
    Tensor<T> out(Shape{s.n, s.c, oh, ow});
    if (mode == DownscaleMode::average) {
        const double inv = 1.0 / static_cast<double>(factor * factor);
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t c = 0; c < s.c; ++c)
                for (std::size_t y = 0; y < oh; ++y)
                    for (std::size_t x = 0; x < ow; ++x) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < factor; ++i)
                            for (std::size_t j = 0; j < factor; ++j)
                                acc += static_cast<double>(hr(n, c, y * factor + i, x * factor + j));
                        out(n, c, y, x) = static_cast<T>(acc * inv);
                    }
        return out;
    }
    const auto tx = detail::downscale_taps(s.w, factor);
    const auto ty = detail::downscale_taps(s.h, factor);
    std::vector<double> rows(s.h * ow);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            for (std::size_t y = 0; y < s.h; ++y)
                for (std::size_t x = 0; x < ow; ++x) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < tx[x].weights.size(); ++k)
                        acc += tx[x].weights[k] * static_cast<double>(hr(n, c, y, tx[x].first + k));
                    rows[y * ow + x] = acc;
                }
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t x = 0; x < ow; ++x) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < ty[y].weights.size(); ++k)
                        acc += ty[y].weights[k] * rows[(ty[y].first + k) * ow + x];
                    out(n, c, y, x) = static_cast<T>(acc);
                }
        }
    return out;
}

// ---------------------------------------------------------------------------
// corpora

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

/// One crop: `path x y size seed`.
struct ManifestRecord {
    std::string path;
    std::size_t x = 0;
    std::size_t y = 0;
    std::size_t size = 0;
    std::uint64_t seed = 0;

    friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct CorpusOptions {
    std::size_t crop_size = 32;
    std::size_t crops_per_image = 1;
    std::uint64_t seed = 0;
    DownscaleMode downscale = DownscaleMode::bicubic;

    void validate() const
    {
        if (crop_size == 0 || crop_size % 16 != 0)
            throw ConfigError("data.crop_size must be a positive multiple of 16 (and hence of 4), got " +
                              std::to_string(crop_size));
        if (crops_per_image == 0)
            throw ConfigError("data.crops_per_image must be positive");
    }
};

/// (LR, HR) pairs in [-1, 1]; each tensor is 1 x 3 x h x w.
struct PairDataset {
    Split split = Split::train;
    DownscaleMode downscale = DownscaleMode::bicubic;
    std::vector<ManifestRecord> records;
    std::vector<std::string> notes; // skipped files
    std::vector<Tensor<float>> lr;
    std::vector<Tensor<float>> hr;

    std::size_t size() const { return hr.size(); }
    bool empty() const { return hr.empty(); }

    /// Stacks the selected pairs into N x 3 x h x w batches.
    template <class T>
    std::pair<Tensor<T>, Tensor<T>> batch(std::span<const std::size_t> indices) const
    {
        return {stack<T>(lr, indices), stack<T>(hr, indices)};
    }

    template <class T>
    std::pair<Tensor<T>, Tensor<T>> all() const
    {
        std::vector<std::size_t> idx(size());
        std::iota(idx.begin(), idx.end(), 0);
        return batch<T>(idx);
    }

    /// Line-oriented manifest; reloading it reproduces every pair exactly.
    std::string manifest_text() const
    {
        std::ostringstream os;
        os << "# gcnsr manifest split=" << to_string(split) << " downscale=" << to_string(downscale) << '\n';
        for (const auto& note : notes)
            os << "# " << note << '\n';
        for (const auto& r : records)
            os << r.path << ' ' << r.x << ' ' << r.y << ' ' << r.size << ' ' << r.seed << '\n';
        return os.str();
    }

    /// Hash of the crop records alone (split tag and notes excluded).
    std::uint64_t manifest_hash() const
    {
        std::string text;
        for (const auto& r : records)
            text += r.path + ' ' + std::to_string(r.x) + ' ' + std::to_string(r.y) + ' ' + std::to_string(r.size) +
                    ' ' + std::to_string(r.seed) + '\n';
        return fnv1a64(text);
    }

private:
    template <class T>
    static Tensor<T> stack(const std::vector<Tensor<float>>& items, std::span<const std::size_t> indices)
    {
        std::vector<const Tensor<float>*> parts;
        parts.reserve(indices.size());
        for (std::size_t i : indices) {
            if (i >= items.size())
                throw DataError("batch index " + std::to_string(i) + " out of range");
            parts.push_back(&items[i]);
        }
        return concat_batch<float>(parts).template cast<T>();
    }
};

namespace detail {

inline bool is_image_file(const std::filesystem::path& p)
{
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

inline Tensor<float> crop(const Tensor<float>& img, std::size_t x, std::size_t y, std::size_t size)
{
    Tensor<float> out(Shape{1, 3, size, size});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < size; ++i)
            for (std::size_t j = 0; j < size; ++j)
                out(0, c, i, j) = img(0, c, y + i, x + j);
    return out;
}

inline void add_pair(PairDataset& ds, const Tensor<float>& pixels_crop)
{
    Tensor<float> hr = normalize(pixels_crop);
    Tensor<float> lr = downscale(hr, 4, ds.downscale);
    for (auto& v : lr)
        v = std::clamp(v, -1.0f, 1.0f);
    ds.hr.push_back(std::move(hr));
    ds.lr.push_back(std::move(lr));
}

inline std::mt19937_64 crop_rng(std::uint64_t seed, std::size_t file_index)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(file_index)};
    return std::mt19937_64(seq);
}

} // namespace detail

/// Image files directly inside `dir`, sorted by name.
inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir)
{
    if (!std::filesystem::is_directory(dir))
        throw DataError("image directory '" + dir.string() + "' does not exist");
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && detail::is_image_file(e.path()))
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    return files;
}

/// Random square crops of every readable file. Unreadable or too-small files
/// are skipped with a warning and noted in the manifest.
inline PairDataset load_corpus(const std::vector<std::filesystem::path>& files, const CorpusOptions& opt,
                               Split split = Split::train)
{
    opt.validate();
    PairDataset ds;
    ds.split = split;
    ds.downscale = opt.downscale;
    for (std::size_t fi = 0; fi < files.size(); ++fi) {
        const auto& path = files[fi];
        std::string why;
        auto img = try_read_image(path, &why);
        if (img && (img->shape().h < opt.crop_size || img->shape().w < opt.crop_size)) {
            why = "smaller than crop size " + std::to_string(opt.crop_size);
            img.reset();
        }
        if (!img) {
            std::cerr << "warning: skipping '" << path.string() << "': " << why << '\n';
            ds.notes.push_back("skipped " + path.string() + ": " + why);
            continue;
        }
        auto rng = detail::crop_rng(opt.seed, fi);
        std::uniform_int_distribution<std::size_t> dx(0, img->shape().w - opt.crop_size);
        std::uniform_int_distribution<std::size_t> dy(0, img->shape().h - opt.crop_size);
        for (std::size_t k = 0; k < opt.crops_per_image; ++k) {
            const std::size_t x = dx(rng);
            const std::size_t y = dy(rng);
            ds.records.push_back({path.string(), x, y, opt.crop_size, opt.seed});
            detail::add_pair(ds, detail::crop(*img, x, y, opt.crop_size));
        }
    }
    if (ds.empty())
        throw DataError("corpus is empty: no readable image of at least " + std::to_string(opt.crop_size) + " pixels");
    return ds;
}

inline PairDataset load_corpus(const std::filesystem::path& dir, const CorpusOptions& opt, Split split = Split::train)
{
    return load_corpus(list_images(dir), opt, split);
}

/// Rebuilds a dataset from manifest text.
inline PairDataset load_from_manifest(const std::string& text)
{
    PairDataset ds;
    std::istringstream in(text);
    std::string line;
    bool header = false;
    std::string cached_path;
    Tensor<float> cached;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        if (line.rfind("# gcnsr manifest", 0) == 0) {
            header = true;
            if (line.find("split=test") != std::string::npos)
                ds.split = Split::test;
            const auto pos = line.find("downscale=");
            if (pos != std::string::npos)
                ds.downscale = parse_downscale_mode(line.substr(pos + 10));
            continue;
        }
        if (line[0] == '#') {
            ds.notes.push_back(line.substr(std::min<std::size_t>(2, line.size())));
            continue;
        }
        // the path may contain spaces: split the four numeric fields from the right
        std::size_t cut = line.size();
        std::vector<std::string> fields;
        for (int f = 0; f < 4; ++f) {
            const auto sp = line.rfind(' ', cut - 1);
            if (sp == std::string::npos || sp == 0)
                throw DataError("malformed manifest line: '" + line + "'");
            fields.insert(fields.begin(), line.substr(sp + 1, cut - sp - 1));
            cut = sp;
        }
        ManifestRecord r;
        r.path = line.substr(0, cut);
        try {
            r.x = std::stoull(fields[0]);
            r.y = std::stoull(fields[1]);
            r.size = std::stoull(fields[2]);
            r.seed = std::stoull(fields[3]);
        } catch (const std::exception&) {
            throw DataError("malformed manifest line: '" + line + "'");
        }
        if (r.size == 0 || r.size % 16 != 0)
            throw DataError("manifest crop size " + std::to_string(r.size) + " is not a positive multiple of 16");
        if (r.path != cached_path) {
            cached = read_image(r.path);
            cached_path = r.path;
        }
        if (r.x + r.size > cached.shape().w || r.y + r.size > cached.shape().h)
            throw DataError("manifest crop exceeds image '" + r.path + "'");
        ds.records.push_back(r);
        detail::add_pair(ds, detail::crop(cached, r.x, r.y, r.size));
    }
    if (!header)
        throw DataError("manifest lacks the '# gcnsr manifest' header");
    if (ds.empty())
        throw DataError("manifest lists no crops");
    return ds;
}

inline void save_manifest(const std::filesystem::path& path, const PairDataset& ds)
{
    write_file_bytes(path, ds.manifest_text());
}

inline PairDataset load_manifest(const std::filesystem::path& path)
{
    return load_from_manifest(read_file_bytes(path));
}

struct FileSplit {
    std::vector<std::filesystem::path> train;
    std::vector<std::filesystem::path> test;
};

/// The last `holdout` files (in sorted order) form the test split.
inline FileSplit split_holdout(std::vector<std::filesystem::path> files, std::size_t holdout)
{
    if (holdout >= files.size())
        throw ConfigError("data.holdout_images (" + std::to_string(holdout) + ") leaves no training images");
    FileSplit s;
    s.test.assign(files.end() - static_cast<long>(holdout), files.end());
    files.resize(files.size() - holdout);
    s.train = std::move(files);
    return s;
}

/// True when no crop source file appears in both datasets.
inline bool disjoint_sources(const PairDataset& a, const PairDataset& b)
{
    std::vector<std::string> pa, pb;
    for (const auto& r : a.records)
        pa.push_back(std::filesystem::weakly_canonical(r.path).string());
    for (const auto& r : b.records)
        pb.push_back(std::filesystem::weakly_canonical(r.path).string());
    std::sort(pa.begin(), pa.end());
    std::sort(pb.begin(), pb.end());
    std::vector<std::string> common;
    std::set_intersection(pa.begin(), pa.end(), pb.begin(), pb.end(), std::back_inserter(common));
    return common.empty();
}

/// HR crops with class labels from a directory-per-class layout.
struct LabeledDataset {
    std::vector<std::string> classes;
    std::vector<Tensor<float>> images; // 1 x 3 x size x size in [-1, 1]
    std::vector<int> labels;

    std::size_t size() const { return images.size(); }

    template <class T>
    std::pair<Tensor<T>, std::vector<int>> batch(std::span<const std::size_t> indices) const
    {
        std::vector<const Tensor<float>*> parts;
        std::vector<int> l;
        for (std::size_t i : indices) {
            parts.push_back(&images.at(i));
            l.push_back(labels.at(i));
        }
        return {concat_batch<float>(parts).template cast<T>(), std::move(l)};
    }
};

inline LabeledDataset load_labeled_corpus(const std::filesystem::path& dir, const CorpusOptions& opt)
{
    if (!std::filesystem::is_directory(dir))
        throw DataError("labeled directory '" + dir.string() + "' does not exist");
    std::vector<std::filesystem::path> class_dirs;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_directory())
            class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.size() < 2)
        throw DataError("labeled corpus '" + dir.string() + "' needs at least two class directories");
    LabeledDataset out;
    for (std::size_t c = 0; c < class_dirs.size(); ++c) {
        PairDataset ds = load_corpus(class_dirs[c], opt);
        out.classes.push_back(class_dirs[c].filename().string());
        for (auto& hr : ds.hr) {
            out.images.push_back(std::move(hr));
            out.labels.push_back(static_cast<int>(c));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// batching

/// Shuffled mini-batches without replacement; the final short batch of each
/// epoch is dropped. The permutation of epoch e depends only on (seed, e), so
/// the iterator state is just (epoch, cursor).
class BatchIterator {
public:
    struct State {
        std::uint64_t epoch = 0;
        std::size_t cursor = 0; // batches consumed in the current epoch

        friend bool operator==(const State&, const State&) = default;
    };

    BatchIterator(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
        : n_(dataset_size), batch_(batch_size), seed_(seed)
    {
        if (n_ == 0)
            throw DataError("cannot batch an empty dataset");
        if (batch_ == 0 || batch_ > n_) {
            throw ConfigError("batch size " + std::to_string(batch_) + " must lie in [1, dataset size " +
                              std::to_string(n_) + "]");
        }
        reshuffle();
    }

    std::size_t batches_per_epoch() const { return n_ / batch_; }
    std::size_t batch_size() const { return batch_; }

    std::vector<std::size_t> next()
    {
        if (state_.cursor == batches_per_epoch()) {
            ++state_.epoch;
            state_.cursor = 0;
            reshuffle();
        }
        const auto first = order_.begin() + static_cast<long>(state_.cursor * batch_);
        ++state_.cursor;
        return {first, first + static_cast<long>(batch_)};
    }

    const State& state() const { return state_; }
    void restore(const State& s)
    {
        if (s.cursor > batches_per_epoch())
            throw IntegrityError("batch iterator cursor out of range");
        state_ = s;
        reshuffle();
    }

    const std::vector<std::size_t>& order() const { return order_; }

private:
    void reshuffle()
    {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), 0);
        std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                          static_cast<std::uint32_t>(state_.epoch), static_cast<std::uint32_t>(state_.epoch >> 32)};
        std::mt19937_64 rng(seq);
        std::shuffle(order_.begin(), order_.end(), rng);
    }

    std::size_t n_;
    std::size_t batch_;
    std::uint64_t seed_;
    State state_{};
    std::vector<std::size_t> order_;
};

} // namespace gcnsr

#endif
