#pragma once

// Synthetic confounded images. Each class has a disc ("blob") at its own home on
// a ring around the image centre; the blob is the true cause of the label. A
// square corner marker agrees with the class-0 label with probability rho, so
// its correlation with the label can differ between splits. Token records are
// drawn from the labels only.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "ivcxr/errors.hpp"
#include "ivcxr/image.hpp"
#include "ivcxr/ingest.hpp"
#include "ivcxr/rng.hpp"

namespace ivcxr::scm {

enum class Corner { top_left, top_right, bottom_left, bottom_right };

inline Corner parse_corner(const std::string& s) {
    if (s == "top-left") return Corner::top_left;
    if (s == "top-right") return Corner::top_right;
    if (s == "bottom-left") return Corner::bottom_left;
    if (s == "bottom-right") return Corner::bottom_right;
    throw ContractViolation("unknown marker corner '" + s + "'");
}

inline const char* corner_name(Corner c) {
    switch (c) {
        case Corner::top_left: return "top-left";
        case Corner::top_right: return "top-right";
        case Corner::bottom_left: return "bottom-left";
        case Corner::bottom_right: return "bottom-right";
    }
    return "?";
}

struct ScmConfig {
    std::size_t image_size = 32;
    std::size_t k = 4;
    std::size_t n_train = 2000;
    std::size_t n_test = 500;
    double prevalence = 0.3;
    double rho_train = 0.9;
    double rho_test = 0.1;
    double ring_radius = 8.0;    // distance of each class home from the centre, pixels
    double blob_radius = 3.0;
    double blob_intensity = 0.5;
    int blob_jitter = 2;         // integer offset drawn uniformly in [-jitter, jitter] per axis
    Corner marker_corner = Corner::bottom_right;
    std::size_t marker_size = 4;
    std::size_t marker_margin = 1;
    double marker_intensity = 0.8;
    double noise_sigma = 0.15;
    std::size_t vocab_size = 64;
    std::size_t tokens_per_sample = 4;  // uniform noise ids per record
    std::size_t attrs_per_class = 2;
    double token_fidelity = 0.8;        // chance a positive class contributes an attribute id
    std::uint64_t seed = 0;
};

struct Box {
    long y0, x0, y1, x1;  // inclusive
    bool intersects(const Box& o) const { return !(x1 < o.x0 || o.x1 < x0 || y1 < o.y0 || o.y1 < y0); }
    bool inside(long size) const { return y0 >= 0 && x0 >= 0 && y1 < size && x1 < size; }
};

/// Integer pixel home of class c's blob centre.
inline std::pair<long, long> blob_home(const ScmConfig& cfg, std::size_t c) {
    const double centre = static_cast<double>(cfg.image_size) / 2.0;
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(cfg.k);
    return {std::lround(centre + cfg.ring_radius * std::sin(angle)),
            std::lround(centre + cfg.ring_radius * std::cos(angle))};
}

/// Every pixel a blob of class c can ever touch.
inline Box blob_reach(const ScmConfig& cfg, std::size_t c) {
    auto [cy, cx] = blob_home(cfg, c);
    const long r = static_cast<long>(std::floor(cfg.blob_radius)) + cfg.blob_jitter;
    return {cy - r, cx - r, cy + r, cx + r};
}

inline Box marker_box(const ScmConfig& cfg) {
    const long s = static_cast<long>(cfg.image_size), m = static_cast<long>(cfg.marker_margin),
               w = static_cast<long>(cfg.marker_size);
    const bool bottom = cfg.marker_corner == Corner::bottom_left || cfg.marker_corner == Corner::bottom_right;
    const bool right = cfg.marker_corner == Corner::top_right || cfg.marker_corner == Corner::bottom_right;
    const long y0 = bottom ? s - m - w : m, x0 = right ? s - m - w : m;
    return {y0, x0, y0 + w - 1, x0 + w - 1};
}

inline std::size_t first_noise_token(const ScmConfig& cfg) { return 2 + cfg.k * cfg.attrs_per_class; }

inline void validate(const ScmConfig& cfg) {
    require(cfg.k >= 1 && cfg.k <= 16, "class count must be in [1, 16]");
    require(cfg.rho_train >= 0 && cfg.rho_train <= 1 && cfg.rho_test >= 0 && cfg.rho_test <= 1,
            "rho values must lie in [0, 1]");
    require(cfg.prevalence >= 0 && cfg.prevalence <= 1, "prevalence must lie in [0, 1]");
    require(cfg.token_fidelity >= 0 && cfg.token_fidelity <= 1, "token fidelity must lie in [0, 1]");
    require(cfg.blob_radius > 0 && cfg.blob_jitter >= 0 && cfg.noise_sigma >= 0, "invalid blob or noise setting");
    require(cfg.blob_intensity > 0 && cfg.blob_intensity <= 1 && cfg.marker_intensity > 0 &&
                cfg.marker_intensity <= 1,
            "intensities must lie in (0, 1]");
    require(cfg.marker_size > 0, "marker size must be positive");
    require(cfg.vocab_size > first_noise_token(cfg), "vocabulary too small for " + std::to_string(cfg.k) +
                                                         " classes with " + std::to_string(cfg.attrs_per_class) +
                                                         " attribute ids each");
    const long s = static_cast<long>(cfg.image_size);
    const Box mk = marker_box(cfg);
    require(mk.inside(s), "marker does not fit inside a " + std::to_string(s) + "-pixel image");
    for (std::size_t c = 0; c < cfg.k; ++c) {
        const Box b = blob_reach(cfg, c);
        require(b.inside(s), "blob of class " + std::to_string(c) + " can leave the image");
        require(!b.intersects(mk), "blob of class " + std::to_string(c) + " can overlap the marker");
    }
}

/// Address of one sample's randomness: (root seed, split name, sample index).
struct SampleKey {
    std::uint64_t seed = 0;
    std::string split = "train";
    std::uint64_t index = 0;

    StreamRng stream(const std::string& purpose) const { return StreamRng(seed, split + "/" + purpose, index); }
};

struct SyntheticSample {
    RasterImage image;
    std::vector<float> labels;
    std::vector<std::int64_t> tokens;
    RasterImage mask;  // 1 on rendered blob pixels, 0 elsewhere
    bool marker = false;
};

/// Draws one image for the given labels and marker state.
inline SyntheticSample render_sample(const ScmConfig& cfg, const std::vector<float>& labels, bool marker,
                                     const SampleKey& key) {
    validate(cfg);
    require(labels.size() == cfg.k, "render_sample: expected " + std::to_string(cfg.k) + " labels");
    const std::size_t S = cfg.image_size;
    SyntheticSample s;
    s.image = RasterImage(S, S, 1);
    s.mask = RasterImage(S, S, 1);
    s.labels = labels;
    s.marker = marker;

    StreamRng geo = key.stream("geometry");
    const long r = static_cast<long>(std::floor(cfg.blob_radius));
    const double r2 = cfg.blob_radius * cfg.blob_radius;
    for (std::size_t c = 0; c < cfg.k; ++c) {
        const long dy = static_cast<long>(geo.below(2 * cfg.blob_jitter + 1)) - cfg.blob_jitter;
        const long dx = static_cast<long>(geo.below(2 * cfg.blob_jitter + 1)) - cfg.blob_jitter;
        if (labels[c] != 1.0f) continue;
        auto [hy, hx] = blob_home(cfg, c);
        const long cy = hy + dy, cx = hx + dx;
        for (long y = cy - r; y <= cy + r; ++y)
            for (long x = cx - r; x <= cx + r; ++x)
                if (static_cast<double>((y - cy) * (y - cy) + (x - cx) * (x - cx)) <= r2) {
                    s.image.at(y, x) = static_cast<float>(cfg.blob_intensity);
                    s.mask.at(y, x) = 1.0f;
                }
    }
    if (marker) {
        const Box b = marker_box(cfg);
        for (long y = b.y0; y <= b.y1; ++y)
            for (long x = b.x0; x <= b.x1; ++x) s.image.at(y, x) = static_cast<float>(cfg.marker_intensity);
    }
    if (cfg.noise_sigma > 0) {
        StreamRng noise = key.stream("noise");
        for (float& p : s.image.pixels)
            p = static_cast<float>(std::clamp(p + cfg.noise_sigma * noise.normal(), 0.0, 1.0));
    }

    StreamRng tok = key.stream("tokens");
    for (std::size_t c = 0; c < cfg.k; ++c) {
        const bool emit = tok.bernoulli(cfg.token_fidelity);
        const auto which = tok.below(cfg.attrs_per_class);
        if (labels[c] == 1.0f && emit)
            s.tokens.push_back(static_cast<std::int64_t>(2 + c * cfg.attrs_per_class + which));
    }
    const std::size_t lo = first_noise_token(cfg);
    for (std::size_t t = 0; t < cfg.tokens_per_sample; ++t)
        s.tokens.push_back(static_cast<std::int64_t>(lo + tok.below(cfg.vocab_size - lo)));
    for (std::size_t i = s.tokens.size(); i > 1; --i) std::swap(s.tokens[i - 1], s.tokens[tok.below(i)]);
    return s;
}

struct Split {
    std::string name;
    double rho = 0.0;
    std::vector<SyntheticSample> samples;

    double marker_agreement() const {
        std::size_t agree = 0;
        for (const auto& s : samples) agree += s.marker == (s.labels[0] == 1.0f);
        return samples.empty() ? 0.0 : static_cast<double>(agree) / static_cast<double>(samples.size());
    }
};

/// Labels from the split's "labels" stream, marker from its "marker" stream.
inline Split generate_split(const ScmConfig& cfg, const std::string& name, std::size_t n, double rho) {
    validate(cfg);
    require(rho >= 0 && rho <= 1, "rho must lie in [0, 1]");
    Split split{name, rho, {}};
    split.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const SampleKey key{cfg.seed, name, i};
        StreamRng lab = key.stream("labels");
        std::vector<float> labels(cfg.k);
        for (auto& l : labels) l = lab.bernoulli(cfg.prevalence) ? 1.0f : 0.0f;
        StreamRng mk = key.stream("marker");
        const bool agree = mk.bernoulli(rho);
        const bool marker = agree ? labels[0] == 1.0f : labels[0] != 1.0f;
        split.samples.push_back(render_sample(cfg, labels, marker, key));
    }
    return split;
}

inline std::vector<std::string> class_names(std::size_t k) {
    std::vector<std::string> names;
    for (std::size_t c = 0; c < k; ++c) names.push_back("blob" + std::to_string(c));
    return names;
}

struct Dataset {
    Split train;    // rho_train
    Split test;     // rho_test: the out-of-distribution split
    Split id_test;  // rho_train with fresh samples: the in-distribution split
};

inline Dataset generate_dataset(const ScmConfig& cfg) {
    return {generate_split(cfg, "train", cfg.n_train, cfg.rho_train),
            generate_split(cfg, "test", cfg.n_test, cfg.rho_test),
            generate_split(cfg, "id_test", cfg.n_test, cfg.rho_train)};
}

/// Writes <dir>/<split>/NNNNN.ivr (+ NNNNN.mask.ivr), <dir>/<split>.manifest and <dir>/summary.txt.
inline void write_dataset(const Dataset& data, const ScmConfig& cfg, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (const Split* split : {&data.train, &data.test, &data.id_test}) {
        fs::create_directories(dir / split->name, ec);
        if (ec) throw IoError("cannot create " + (dir / split->name).string() + ": " + ec.message());
        ingest::Manifest m;
        m.classes = class_names(cfg.k);
        for (std::size_t i = 0; i < split->samples.size(); ++i) {
            const auto& s = split->samples[i];
            char stem[16];
            std::snprintf(stem, sizeof stem, "%05zu", i);
            const std::string rel = split->name + "/" + stem + ".ivr";
            ingest::save_raster(dir / rel, s.image);
            ingest::save_raster(dir / (split->name + "/" + stem + ".mask.ivr"), s.mask);
            ingest::ManifestRecord r{rel, {}, s.tokens};
            for (float l : s.labels) r.labels.push_back(static_cast<int>(l));
            m.records.push_back(std::move(r));
        }
        ingest::write_manifest(dir / (split->name + ".manifest"), m);
    }
    std::ostringstream sum;
    sum << "k=" << cfg.k << "\nimage_size=" << cfg.image_size << "\nseed=" << cfg.seed;
    for (const Split* split : {&data.train, &data.test, &data.id_test}) {
        sum << "\n" << split->name << ".n=" << split->samples.size() << "\n"
            << split->name << ".rho=" << split->rho << "\n"
            << split->name << ".marker_agreement=" << split->marker_agreement();
        for (std::size_t c = 0; c < cfg.k; ++c) {
            std::size_t pos = 0;
            for (const auto& s : split->samples) pos += s.labels[c] == 1.0f;
            sum << "\n" << split->name << ".positives." << c << "=" << pos;
        }
    }
    sum << "\n";
    ingest::write_file(dir / "summary.txt", sum.str());
}

}  // namespace ivcxr::scm
