#ifndef GCNSR_ARCHIVE_HPP
#define GCNSR_ARCHIVE_HPP

// Binary tensor archive shared by checkpoints and external feature networks.
//
//   "GCNSR"  u32 version  u64 record_count
//   record*: u32 name_len, name, u8 dtype (0 f32, 1 f64), 4 x u64 shape, raw data
//   u64 metadata_len, metadata (JSON text, empty for plain archives)
//   u64 rng_len, rng state text
//   u64 FNV-1a checksum of every preceding byte
//
// All integers and tensor data are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <variant>

#include "gcnsr/errors.hpp"
#include "gcnsr/parameters.hpp"
#include "gcnsr/tensor.hpp"

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace gcnsr {

inline constexpr char kArchiveMagic[5] = {'G', 'C', 'N', 'S', 'R'};
inline constexpr std::uint32_t kArchiveVersion = 1;

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

inline std::uint64_t fnv1a64(std::string_view bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

struct Archive {
    std::map<std::string, AnyTensor> records;
    std::string metadata;
    std::string rng_state;

    template <class T>
    void put(const std::string& name, Tensor<T> t)
    {
        records.insert_or_assign(name, AnyTensor(std::move(t)));
    }

    bool contains(const std::string& name) const { return records.count(name) != 0; }

    /// Record `name` with exactly dtype T.
    template <class T>
    const Tensor<T>& get(const std::string& name) const
    {
        auto it = records.find(name);
        if (it == records.end())
            throw IntegrityError("archive has no record '" + name + "'");
        if (const auto* t = std::get_if<Tensor<T>>(&it->second))
            return *t;
        throw IntegrityError("archive record '" + name + "' has an unexpected dtype");
    }

    /// Record `name` converted to T.
    template <class T>
    Tensor<T> get_as(const std::string& name) const
    {
        auto it = records.find(name);
        if (it == records.end())
            throw IntegrityError("archive has no record '" + name + "'");
        return std::visit([](const auto& t) { return t.template cast<T>(); }, it->second);
    }

    friend bool operator==(const Archive&, const Archive&) = default;
};

namespace detail {

template <class U>
void put_le(std::string& out, U v)
{
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.append(buf, sizeof(U));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <class U>
    U get()
    {
        U v;
        std::memcpy(&v, take(sizeof(U)).data(), sizeof(U));
        return v;
    }

    std::string_view take(std::size_t n)
    {
        if (n > bytes_.size() - pos_)
            throw IntegrityError("archive truncated");
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

template <class T>
void put_tensor(std::string& out, const Tensor<T>& t)
{
    put_le<std::uint8_t>(out, std::is_same_v<T, float> ? 0 : 1);
    for (std::size_t d : t.shape().dims())
        put_le<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(T));
}

template <class T>
Tensor<T> get_tensor(Reader& r, const Shape& shape)
{
    const std::size_t n = shape.numel();
    if (n > r.remaining() / sizeof(T))
        throw IntegrityError("archive truncated inside tensor data");
    auto raw = r.take(n * sizeof(T));
    std::vector<T> v(n);
    std::memcpy(v.data(), raw.data(), raw.size());
    return Tensor<T>(shape, std::move(v));
}

} // namespace detail

inline std::string encode_archive(const Archive& a)
{
    std::string out(kArchiveMagic, sizeof kArchiveMagic);
    detail::put_le<std::uint32_t>(out, kArchiveVersion);
    detail::put_le<std::uint64_t>(out, a.records.size());
    for (const auto& [name, t] : a.records) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        std::visit([&](const auto& x) { detail::put_tensor(out, x); }, t);
    }
    detail::put_le<std::uint64_t>(out, a.metadata.size());
    out += a.metadata;
    detail::put_le<std::uint64_t>(out, a.rng_state.size());
    out += a.rng_state;
    detail::put_le<std::uint64_t>(out, fnv1a64(out));
    return out;
}

/// Parses an archive; `source` names the file in error messages.
inline Archive decode_archive(std::string_view bytes, const std::string& source = "archive")
{
    if (bytes.size() < sizeof kArchiveMagic + 4 || std::memcmp(bytes.data(), kArchiveMagic, sizeof kArchiveMagic) != 0)
        throw IntegrityError(source + ": not a GCNSR archive (bad magic)");
    std::uint32_t version;
    std::memcpy(&version, bytes.data() + sizeof kArchiveMagic, 4);
    if (version != kArchiveVersion) {
        throw VersionError(source + ": format version " + std::to_string(version) + ", this build reads version " +
                           std::to_string(kArchiveVersion));
    }
    if (bytes.size() < sizeof kArchiveMagic + 4 + 8 + 8)
        throw IntegrityError(source + ": archive truncated");
    const std::string_view body = bytes.substr(0, bytes.size() - 8);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body.size(), 8);
    if (stored != fnv1a64(body))
        throw IntegrityError(source + ": checksum mismatch (file truncated or corrupted)");

    try {
        detail::Reader r(body);
        r.take(sizeof kArchiveMagic + 4);
        Archive a;
        const auto count = r.get<std::uint64_t>();
        for (std::uint64_t i = 0; i < count; ++i) {
            const auto len = r.get<std::uint32_t>();
            std::string name(r.take(len));
            const auto dtype = r.get<std::uint8_t>();
            Shape s{r.get<std::uint64_t>(), r.get<std::uint64_t>(), r.get<std::uint64_t>(), r.get<std::uint64_t>()};
            if (dtype == 0)
                a.records.emplace(std::move(name), detail::get_tensor<float>(r, s));
            else if (dtype == 1)
                a.records.emplace(std::move(name), detail::get_tensor<double>(r, s));
            else
                throw IntegrityError("unknown dtype " + std::to_string(dtype) + " for record '" + name + "'");
        }
        a.metadata = std::string(r.take(r.get<std::uint64_t>()));
        a.rng_state = std::string(r.take(r.get<std::uint64_t>()));
        if (r.remaining() != 0)
            throw IntegrityError("trailing bytes before checksum");
        return a;
    } catch (const IntegrityError& e) {
        throw IntegrityError(source + ": " + e.what());
    }
}

inline std::string read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open '" + path.string() + "' for reading");
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes through a temporary sibling file so readers never see a partial archive.
inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes)
{
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw DataError("cannot open '" + tmp.string() + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw DataError("write to '" + tmp.string() + "' failed");
    }
    std::filesystem::rename(tmp, path);
}

inline void save_archive(const std::filesystem::path& path, const Archive& a) { write_file_bytes(path, encode_archive(a)); }

inline Archive load_archive(const std::filesystem::path& path)
{
    return decode_archive(read_file_bytes(path), path.string());
}

// ---------------------------------------------------------------------------
// ParameterSet <-> archive records

/// Stores values, Adam moments and buffers of `ps` under `<kind>/<set>/<name>`.
template <class T>
void store_parameters(Archive& a, const std::string& set, const ParameterSet<T>& ps)
{
    for (const auto& [name, e] : ps.entries()) {
        a.put("param/" + set + "/" + name, e.value);
        a.put("adam_m/" + set + "/" + name, e.adam_m);
        a.put("adam_v/" + set + "/" + name, e.adam_v);
    }
    for (const auto& [name, b] : ps.buffers())
        a.put("buffer/" + set + "/" + name, b);
}

/// Fills `ps` (built with the expected layout) from the archive. Every
/// parameter and buffer must be present with a matching shape and dtype.
template <class T>
void restore_parameters(const Archive& a, const std::string& set, ParameterSet<T>& ps)
{
    auto fetch = [&](const std::string& key, const Tensor<T>& like) -> const Tensor<T>& {
        const Tensor<T>& t = a.get<T>(key);
        if (!(t.shape() == like.shape())) {
            throw IntegrityError("record '" + key + "' has shape " + t.shape().str() + ", expected " +
                                 like.shape().str());
        }
        return t;
    };
    for (auto& [name, e] : ps.entries()) {
        e.value = fetch("param/" + set + "/" + name, e.value);
        e.adam_m = fetch("adam_m/" + set + "/" + name, e.adam_m);
        e.adam_v = fetch("adam_v/" + set + "/" + name, e.adam_v);
        e.grad.fill(T(0));
    }
    for (auto& [name, b] : ps.buffers())
        b = fetch("buffer/" + set + "/" + name, b);
}

} // namespace gcnsr

#endif
