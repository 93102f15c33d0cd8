#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "milbench/rng.hpp"
#include "milbench/tensor.hpp"

namespace milbench {

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

class SpecError : public std::runtime_error {
public:
    explicit SpecError(const std::string& what) : std::runtime_error(what) {}
};

enum class Split { Train, Val, Test };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        default: return "test";
    }
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw SpecError("unknown split '" + s + "'");
}

struct SlideRecord {
    std::string id;
    int label = 0;  // 0 or 1
    Split split = Split::Train;
    std::string path;  // relative to the manifest directory
    std::uint32_t n_tiles = 0;
};

struct DatasetManifest {
    std::string dataset_id;
    std::uint32_t dim = 0;
    std::vector<SlideRecord> slides;
    std::filesystem::path root;  // directory the manifest was loaded from

    std::filesystem::path resolve(const SlideRecord& r) const { return root / r.path; }

    std::vector<const SlideRecord*> split(Split s) const {
        std::vector<const SlideRecord*> out;
        for (const auto& r : slides)
            if (r.split == s) out.push_back(&r);
        return out;
    }
};

/// One slide's tile embeddings, widened to doubles.
struct EmbeddingBag {
    std::string slide_id;
    Tensor embeddings;  // [n, D]
};

// ---------------------------------------------------------------------------
// Embedding file format: little-endian, magic "MILB", u32 version=1,
// u32 n_tiles, u32 dim, then n_tiles*dim float32 values, row-major.
// ---------------------------------------------------------------------------

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "embedding file I/O assumes a little-endian host");

constexpr char kEmbeddingMagic[4] = {'M', 'I', 'L', 'B'};
constexpr std::uint32_t kEmbeddingVersion = 1;

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw IoError("embedding file: truncated " + what);
    return v;
}

}  // namespace detail

inline void write_embedding_file(const Tensor& embeddings,
                                 const std::filesystem::path& path) {
    if (embeddings.rank() != 2)
        throw DimensionError("write_embedding_file: expected [n,D] matrix");
    std::uint32_t n = static_cast<std::uint32_t>(embeddings.rows());
    std::uint32_t d = static_cast<std::uint32_t>(embeddings.cols());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path.string());
    os.write(detail::kEmbeddingMagic, 4);
    detail::write_u32(os, detail::kEmbeddingVersion);
    detail::write_u32(os, n);
    detail::write_u32(os, d);
    std::vector<float> row(d);
    for (std::uint32_t i = 0; i < n; ++i) {
        for (std::uint32_t j = 0; j < d; ++j)
            row[j] = static_cast<float>(embeddings.at(i, j));
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(sizeof(float) * d));
    }
    if (!os) throw IoError("write failed: " + path.string());
}

struct EmbeddingHeader {
    std::uint32_t n_tiles = 0;
    std::uint32_t dim = 0;
};

inline EmbeddingHeader read_embedding_header(std::istream& is,
                                             const std::string& name) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, detail::kEmbeddingMagic, 4) != 0)
        throw IoError("embedding file: bad magic in " + name);
    std::uint32_t version = detail::read_u32(is, "version");
    if (version != detail::kEmbeddingVersion)
        throw IoError("embedding file: unsupported version " +
                      std::to_string(version) + " in " + name);
    EmbeddingHeader h;
    h.n_tiles = detail::read_u32(is, "tile count");
    h.dim = detail::read_u32(is, "dim");
    if (h.n_tiles < 1 || h.dim < 1)
        throw IoError("embedding file: degenerate header in " + name);
    return h;
}

inline EmbeddingHeader read_embedding_header(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    return read_embedding_header(is, path.string());
}

inline Tensor read_embedding_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    EmbeddingHeader h = read_embedding_header(is, path.string());
    std::size_t count = static_cast<std::size_t>(h.n_tiles) * h.dim;
    std::vector<float> payload(count);
    is.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    std::size_t got = static_cast<std::size_t>(is.gcount());
    if (got != count * sizeof(float))
        throw IoError("embedding file: truncated payload in " + path.string() +
                      ", expected " + std::to_string(count * sizeof(float)) +
                      " bytes, got " + std::to_string(got));
    Tensor t({h.n_tiles, h.dim});
    for (std::size_t i = 0; i < count; ++i) t[i] = static_cast<double>(payload[i]);
    return t;
}

// ---------------------------------------------------------------------------
// Manifest JSON: {dataset_id, dim, slides:[{id,label,split,path,n_tiles}]}
// ---------------------------------------------------------------------------

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    nlohmann::json j;
    j["dataset_id"] = m.dataset_id;
    j["dim"] = m.dim;
    auto& slides = j["slides"] = nlohmann::json::array();
    for (const auto& r : m.slides) {
        slides.push_back({{"id", r.id},
                          {"label", r.label},
                          {"split", to_string(r.split)},
                          {"path", r.path},
                          {"n_tiles", r.n_tiles}});
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path.string());
    os << j.dump(2) << '\n';
    if (!os) throw IoError("write failed: " + path.string());
}

/// Loads and validates a manifest. With verify_files, every embedding file
/// header is checked against the record's (n_tiles, dim).
inline DatasetManifest load_manifest(const std::filesystem::path& path,
                                     bool verify_files = true) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("manifest parse error in " + path.string() + ": " + e.what());
    }
    DatasetManifest m;
    m.root = path.parent_path();
    try {
        m.dataset_id = j.at("dataset_id").get<std::string>();
        m.dim = j.at("dim").get<std::uint32_t>();
        for (const auto& s : j.at("slides")) {
            SlideRecord r;
            r.id = s.at("id").get<std::string>();
            r.label = s.at("label").get<int>();
            r.split = split_from_string(s.at("split").get<std::string>());
            r.path = s.at("path").get<std::string>();
            r.n_tiles = s.at("n_tiles").get<std::uint32_t>();
            if (r.label != 0 && r.label != 1)
                throw SpecError("manifest: label must be 0/1 for slide " + r.id);
            m.slides.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("manifest schema error in " + path.string() + ": " + e.what());
    }
    std::map<std::string, int> seen;
    for (const auto& r : m.slides)
        if (++seen[r.id] > 1) throw SpecError("manifest: duplicate slide id " + r.id);
    for (Split s : {Split::Train, Split::Val, Split::Test})
        if (m.split(s).empty())
            throw SpecError("manifest: split '" + to_string(s) + "' is empty");
    if (verify_files) {
        for (const auto& r : m.slides) {
            EmbeddingHeader h = read_embedding_header(m.resolve(r));
            if (h.n_tiles != r.n_tiles || h.dim != m.dim)
                throw IoError("manifest/file mismatch for slide " + r.id + ": file has " +
                              std::to_string(h.n_tiles) + "x" + std::to_string(h.dim) +
                              ", manifest says " + std::to_string(r.n_tiles) + "x" +
                              std::to_string(m.dim));
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Bag sampling
// ---------------------------------------------------------------------------

/// Uniform sample of bag_size tiles without replacement; slides smaller than
/// the bag contribute all their tiles, unpadded. Fresh sample each call.
inline std::vector<std::uint32_t> sample_bag_indices(std::uint32_t n_tiles,
                                                     std::size_t bag_size,
                                                     SeededRng& rng) {
    if (bag_size < 1) throw SpecError("sample_bag: bag_size must be >= 1");
    if (n_tiles <= bag_size) {
        std::vector<std::uint32_t> all(n_tiles);
        for (std::uint32_t i = 0; i < n_tiles; ++i) all[i] = i;
        return all;
    }
    return rng.sample_without_replacement(n_tiles, static_cast<std::uint32_t>(bag_size));
}

inline Tensor take_rows(const Tensor& m, const std::vector<std::uint32_t>& idx) {
    Tensor out({idx.size(), m.cols()});
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out.at(i, j) = m.at(idx[i], j);
    return out;
}

inline EmbeddingBag sample_bag(const DatasetManifest& m, const SlideRecord& r,
                               std::size_t bag_size, SeededRng& rng) {
    Tensor all = read_embedding_file(m.resolve(r));
    auto idx = sample_bag_indices(static_cast<std::uint32_t>(all.rows()), bag_size, rng);
    if (idx.size() == all.rows()) return EmbeddingBag{r.id, std::move(all)};
    return EmbeddingBag{r.id, take_rows(all, idx)};
}

/// One bag per slide; labels stay with their records. Bags may have
/// different lengths.
inline std::vector<EmbeddingBag> make_batch(const DatasetManifest& m,
                                            const std::vector<const SlideRecord*>& records,
                                            std::size_t bag_size, SeededRng& rng) {
    std::vector<EmbeddingBag> out;
    out.reserve(records.size());
    for (const auto* r : records) out.push_back(sample_bag(m, *r, bag_size, rng));
    return out;
}

/// In-memory view over a manifest's embeddings. Slides are loaded lazily and
/// cached up to a byte budget; sampling logic is shared with sample_bag.
class BagSource {
public:
    explicit BagSource(const DatasetManifest& m,
                       std::size_t cache_budget_bytes = std::size_t(1) << 30)
        : manifest_(m), budget_(cache_budget_bytes) {}

    const Tensor& full(const SlideRecord& r) {
        auto it = cache_.find(r.id);
        if (it != cache_.end()) return it->second;
        Tensor t = read_embedding_file(manifest_.resolve(r));
        std::size_t bytes = t.size() * sizeof(double);
        if (used_ + bytes > budget_ && !cache_.empty()) {
            cache_.clear();
            used_ = 0;
        }
        used_ += bytes;
        return cache_.emplace(r.id, std::move(t)).first->second;
    }

    EmbeddingBag sample(const SlideRecord& r, std::size_t bag_size, SeededRng& rng) {
        const Tensor& all = full(r);
        auto idx = sample_bag_indices(static_cast<std::uint32_t>(all.rows()), bag_size, rng);
        if (idx.size() == all.rows()) return EmbeddingBag{r.id, all};
        return EmbeddingBag{r.id, take_rows(all, idx)};
    }

private:
    const DatasetManifest& manifest_;
    std::size_t budget_;
    std::size_t used_ = 0;
    std::map<std::string, Tensor> cache_;
};

// ---------------------------------------------------------------------------
// Synthetic data: virtual extractors
// ---------------------------------------------------------------------------

/// Parameterized synthetic embedding distribution standing in for a real
/// foundation model. The witness direction is a fixed unit vector derived
/// from the extractor id.
struct VirtualExtractorSpec {
    std::string id;
    std::uint32_t dim = 0;
    double snr = 0.0;              // witness mean shift, in noise-std units
    double scale = 1.0;            // global scale multiplying all embeddings
    double anisotropy = 1.0;       // largest/smallest per-coordinate std
    double witness_fraction = 0.0; // fraction of tiles carrying signal

    void validate() const {
        if (id.empty()) throw SpecError("extractor spec: empty id");
        if (dim < 1) throw SpecError("extractor spec: dim must be >= 1");
        if (snr < 0.0) throw SpecError("extractor spec: snr must be >= 0");
        if (scale <= 0.0) throw SpecError("extractor spec: scale must be > 0");
        if (anisotropy < 1.0) throw SpecError("extractor spec: anisotropy must be >= 1");
        if (witness_fraction <= 0.0 || witness_fraction > 1.0)
            throw SpecError("extractor spec: witness fraction must be in (0,1]");
    }
};

struct SyntheticDatasetSpec {
    std::string id;
    std::size_t slide_count = 0;
    std::uint32_t tiles_min = 0, tiles_max = 0;
    double prevalence = 0.5;
    std::array<double, 3> split_fractions{0.70, 0.15, 0.15};
    std::uint64_t seed = 0;

    void validate() const {
        if (id.empty()) throw SpecError("dataset spec: empty id");
        if (slide_count < 6)
            throw SpecError("dataset spec: need at least 6 slides for nonempty splits");
        if (tiles_min < 1 || tiles_max < tiles_min)
            throw SpecError("dataset spec: bad tile range");
        if (prevalence <= 0.0 || prevalence >= 1.0)
            throw SpecError("dataset spec: prevalence must be in (0,1)");
        double sum = split_fractions[0] + split_fractions[1] + split_fractions[2];
        if (std::abs(sum - 1.0) > 1e-9)
            throw SpecError("dataset spec: split fractions must sum to 1");
        for (double f : split_fractions)
            if (f <= 0.0) throw SpecError("dataset spec: split fractions must be > 0");
    }
};

/// Per-coordinate noise std schedule: log-linear from scale to scale*anisotropy.
inline std::vector<double> coordinate_scales(const VirtualExtractorSpec& ex) {
    std::vector<double> s(ex.dim);
    for (std::uint32_t j = 0; j < ex.dim; ++j) {
        double t = ex.dim == 1 ? 0.0
                               : static_cast<double>(j) / static_cast<double>(ex.dim - 1);
        s[j] = ex.scale * std::pow(ex.anisotropy, t);
    }
    return s;
}

/// Unit-norm witness direction, a pure function of the extractor id.
inline std::vector<double> witness_direction(const VirtualExtractorSpec& ex) {
    SeededRng rng(fnv1a64("extractor|" + ex.id));
    std::vector<double> mu(ex.dim);
    double norm2 = 0.0;
    for (auto& v : mu) {
        v = rng.normal();
        norm2 += v * v;
    }
    double inv = 1.0 / std::sqrt(norm2);
    for (auto& v : mu) v *= inv;
    return mu;
}

namespace detail {

/// Stratified 70/15/15 (or as configured) assignment with largest-remainder
/// rounding, shuffled per class so splits are class-balanced and every split
/// is nonempty for valid specs.
inline std::vector<Split> assign_splits(std::size_t count,
                                        const std::array<double, 3>& fractions,
                                        SeededRng& rng) {
    std::array<std::size_t, 3> take{};
    std::array<double, 3> rem{};
    std::size_t assigned = 0;
    for (int k = 0; k < 3; ++k) {
        double exact = fractions[k] * static_cast<double>(count);
        take[k] = static_cast<std::size_t>(exact);
        rem[k] = exact - static_cast<double>(take[k]);
        assigned += take[k];
    }
    while (assigned < count) {
        int best = 0;
        for (int k = 1; k < 3; ++k)
            if (rem[k] > rem[best]) best = k;
        ++take[best];
        rem[best] = -1.0;
        ++assigned;
    }
    std::vector<Split> out;
    out.reserve(count);
    for (int k = 0; k < 3; ++k)
        out.insert(out.end(), take[k], static_cast<Split>(k));
    rng.shuffle(out);
    return out;
}

}  // namespace detail

/// Writes manifest.json plus embeddings/<slide>.bin under out_dir.
/// Deterministic: files depend only on (dataset spec, extractor spec); each
/// slide has its own derived stream, so generation order is irrelevant.
inline DatasetManifest generate_synthetic(const SyntheticDatasetSpec& ds,
                                          const VirtualExtractorSpec& ex,
                                          const std::filesystem::path& out_dir) {
    ds.validate();
    ex.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "embeddings", ec);
    if (ec) throw IoError("cannot create " + (out_dir / "embeddings").string());

    std::vector<double> mu = witness_direction(ex);
    std::vector<double> coord = coordinate_scales(ex);

    std::size_t positives = static_cast<std::size_t>(
        std::llround(ds.prevalence * static_cast<double>(ds.slide_count)));
    positives = std::clamp<std::size_t>(positives, 1, ds.slide_count - 1);

    SeededRng layout_rng(fnv1a64("layout|" + ds.id + "|" + std::to_string(ds.seed)));
    std::vector<int> labels(ds.slide_count, 0);
    std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(positives), 1);
    layout_rng.shuffle(labels);

    // Stratified split per class.
    std::vector<std::size_t> pos_idx, neg_idx;
    for (std::size_t i = 0; i < ds.slide_count; ++i)
        (labels[i] ? pos_idx : neg_idx).push_back(i);
    std::vector<Split> splits(ds.slide_count, Split::Train);
    auto pos_splits = detail::assign_splits(pos_idx.size(), ds.split_fractions, layout_rng);
    auto neg_splits = detail::assign_splits(neg_idx.size(), ds.split_fractions, layout_rng);
    for (std::size_t k = 0; k < pos_idx.size(); ++k) splits[pos_idx[k]] = pos_splits[k];
    for (std::size_t k = 0; k < neg_idx.size(); ++k) splits[neg_idx[k]] = neg_splits[k];

    DatasetManifest m;
    m.dataset_id = ds.id;
    m.dim = ex.dim;
    m.root = out_dir;

    int width = ds.slide_count > 9999 ? 6 : 4;
    for (std::size_t i = 0; i < ds.slide_count; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "slide_%0*zu", width, i);
        SlideRecord r;
        r.id = buf;
        r.label = labels[i];
        r.split = splits[i];
        r.path = "embeddings/" + r.id + ".bin";

        SeededRng slide_rng(fnv1a64("tiles|" + ds.id + "|" + std::to_string(ds.seed) +
                                    "|" + ex.id + "|" + r.id));
        std::uint32_t n = static_cast<std::uint32_t>(
            slide_rng.uniform_int(ds.tiles_min, ds.tiles_max));
        r.n_tiles = n;

        Tensor emb({n, ex.dim});
        for (std::uint32_t t = 0; t < n; ++t)
            for (std::uint32_t j = 0; j < ex.dim; ++j)
                emb.at(t, j) = coord[j] * slide_rng.normal();
        if (r.label == 1) {
            std::uint32_t witnesses = static_cast<std::uint32_t>(
                std::llround(ex.witness_fraction * static_cast<double>(n)));
            witnesses = std::min(witnesses, n);
            // Mean shift scales with the global scale so that changing the
            // scale is a pure homothety of the embedding space.
            for (std::uint32_t t = 0; t < witnesses; ++t)
                for (std::uint32_t j = 0; j < ex.dim; ++j)
                    emb.at(t, j) += ex.scale * ex.snr * mu[j];
        }
        write_embedding_file(emb, out_dir / r.path);
        m.slides.push_back(std::move(r));
    }
    save_manifest(m, out_dir / "manifest.json");
    return m;
}

// JSON spec files for the CLI.

inline VirtualExtractorSpec extractor_spec_from_json(const nlohmann::json& j) {
    VirtualExtractorSpec ex;
    try {
        ex.id = j.at("id").get<std::string>();
        ex.dim = j.at("dim").get<std::uint32_t>();
        ex.snr = j.at("snr").get<double>();
        ex.scale = j.value("scale", 1.0);
        ex.anisotropy = j.value("anisotropy", 1.0);
        ex.witness_fraction = j.at("witness_fraction").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw SpecError(std::string("extractor spec: ") + e.what());
    }
    ex.validate();
    return ex;
}

inline SyntheticDatasetSpec dataset_spec_from_json(const nlohmann::json& j) {
    SyntheticDatasetSpec ds;
    try {
        ds.id = j.at("id").get<std::string>();
        ds.slide_count = j.at("slide_count").get<std::size_t>();
        ds.tiles_min = j.at("tiles_min").get<std::uint32_t>();
        ds.tiles_max = j.at("tiles_max").get<std::uint32_t>();
        ds.prevalence = j.value("prevalence", 0.5);
        if (j.contains("split_fractions")) {
            auto f = j.at("split_fractions");
            ds.split_fractions = {f.at(0).get<double>(), f.at(1).get<double>(),
                                  f.at(2).get<double>()};
        }
        ds.seed = j.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw SpecError(std::string("dataset spec: ") + e.what());
    }
    ds.validate();
    return ds;
}

}  // namespace milbench
