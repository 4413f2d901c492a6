#pragma once

// Manifests, raster files, uncertain-label policies and the resize/crop pipeline.
//
// Raster format: the ASCII line "IVRASTER 1 <H> <W> <C>\n" followed by H*W*C
// little-endian float32 values, row-major, channel-last. Binary 8-bit PGM (P5)
// is also read.
//
// Manifest format: "classes:<c1>,<c2>,..." then one record per line,
// "path|l1,l2,...,lk|t1 t2 ...", labels in {1, 0, -1}.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ivcxr/errors.hpp"
#include "ivcxr/image.hpp"

namespace ivcxr::ingest {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- raster I/O

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline std::string encode_raster(const RasterImage& img) {
    validate(img);
    std::string out = "IVRASTER 1 " + std::to_string(img.height) + " " + std::to_string(img.width) + " " +
                      std::to_string(img.channels) + "\n";
    const std::size_t header = out.size();
    out.resize(header + 4 * img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(img.pixels[i]);
        for (int b = 0; b < 4; ++b) out[header + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
    return out;
}

namespace detail {

/// Reads whitespace-separated unsigned integers from a header, tracking the offset.
struct HeaderReader {
    std::string_view bytes;
    std::size_t pos = 0;
    std::string source;

    [[noreturn]] void fail(const std::string& what) const {
        throw IoError(source + ": decode error at offset " + std::to_string(pos) + ": " + what);
    }
    void skip_space(bool comments) {
        while (pos < bytes.size()) {
            if (comments && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    }
    std::size_t number(bool comments = false) {
        skip_space(comments);
        std::size_t v = 0;
        auto [end, ec] = std::from_chars(bytes.data() + pos, bytes.data() + bytes.size(), v);
        if (ec != std::errc() || end == bytes.data() + pos) fail("expected an integer");
        pos = static_cast<std::size_t>(end - bytes.data());
        return v;
    }
};

}  // namespace detail

inline RasterImage decode_raster(std::string_view bytes, const std::string& source = "<memory>") {
    detail::HeaderReader r{bytes, 0, source};
    if (bytes.starts_with("IVRASTER")) {
        r.pos = 8;
        if (r.number() != 1) r.fail("unsupported IVRASTER version");
        RasterImage img;
        img.height = r.number();
        img.width = r.number();
        img.channels = r.number();
        if (r.pos >= bytes.size() || bytes[r.pos] != '\n') r.fail("expected newline after header");
        ++r.pos;
        if (img.height == 0 || img.width == 0 || (img.channels != 1 && img.channels != 3))
            r.fail("invalid dimensions");
        const std::size_t n = img.height * img.width * img.channels;
        if (bytes.size() - r.pos != 4 * n) {
            const std::size_t have = bytes.size() - r.pos;
            r.pos = bytes.size();
            r.fail("payload holds " + std::to_string(have) + " bytes, expected " + std::to_string(4 * n));
        }
        img.pixels.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[r.pos + 4 * i + b])) << (8 * b);
            const float v = std::bit_cast<float>(bits);
            if (!(v >= 0.0f && v <= 1.0f)) {
                r.pos += 4 * i;
                r.fail("pixel value outside [0,1]");
            }
            img.pixels[i] = v;
        }
        return img;
    }
    if (bytes.starts_with("P5")) {
        r.pos = 2;
        RasterImage img;
        img.width = r.number(true);
        img.height = r.number(true);
        const std::size_t maxval = r.number(true);
        if (maxval == 0 || maxval > 255) r.fail("only 8-bit PGM is supported");
        if (r.pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[r.pos])))
            r.fail("expected whitespace after maxval");
        ++r.pos;
        if (img.height == 0 || img.width == 0) r.fail("invalid dimensions");
        img.channels = 1;
        const std::size_t n = img.height * img.width;
        if (bytes.size() - r.pos < n) {
            r.pos = bytes.size();
            r.fail("truncated payload, expected " + std::to_string(n) + " bytes");
        }
        img.pixels.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto v = static_cast<unsigned char>(bytes[r.pos + i]);
            if (v > maxval) {
                r.pos += i;
                r.fail("sample exceeds maxval");
            }
            img.pixels[i] = static_cast<float>(static_cast<double>(v) / static_cast<double>(maxval));
        }
        return img;
    }
    r.fail("unrecognized magic");
}

inline RasterImage load_raster(const fs::path& path) { return decode_raster(read_file(path), path.string()); }

inline void save_raster(const fs::path& path, const RasterImage& img) { write_file(path, encode_raster(img)); }

// ---------------------------------------------------------------- labels

enum class UncertainPolicy { ones, zeros };

inline UncertainPolicy parse_policy(std::string_view s) {
    if (s == "u-ones") return UncertainPolicy::ones;
    if (s == "u-zeros") return UncertainPolicy::zeros;
    throw ContractViolation("unknown uncertain-label policy '" + std::string(s) + "' (use u-ones or u-zeros)");
}

/// -1 becomes 1 (U-Ones) or 0 (U-Zeros); 0 and 1 pass through.
inline std::vector<float> apply_uncertain_policy(const std::vector<int>& raw, UncertainPolicy policy) {
    std::vector<float> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const int v = raw[i];
        require(v == 1 || v == 0 || v == -1, "label value " + std::to_string(v) + " is not one of 1, 0, -1");
        out[i] = v == -1 ? (policy == UncertainPolicy::ones ? 1.0f : 0.0f) : static_cast<float>(v);
    }
    return out;
}

// ---------------------------------------------------------------- manifest

struct ManifestRecord {
    std::string image_path;  // as written, relative to the manifest directory
    std::vector<int> labels;
    std::vector<std::int64_t> tokens;

    bool operator==(const ManifestRecord&) const = default;
};

struct Manifest {
    std::vector<std::string> classes;
    std::vector<ManifestRecord> records;
    fs::path directory;  // paths resolve against this

    fs::path resolve(const ManifestRecord& r) const { return directory / r.image_path; }
};

namespace detail {

inline std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i)
        if (i == s.size() || s[i] == sep) {
            out.push_back(s.substr(start, i - start));
            start = i + 1;
        }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

template <typename Int>
bool parse_int(std::string_view s, Int& v) {
    s = trim(s);
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    return ec == std::errc() && end == s.data() + s.size() && !s.empty();
}

}  // namespace detail

inline Manifest parse_manifest_text(std::string_view text, const fs::path& directory = {}) {
    Manifest m;
    m.directory = directory;
    std::set<std::string> seen;
    std::size_t line_no = 0;
    bool header = false;
    for (std::string_view line : detail::split(text, '\n')) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (detail::trim(line).empty()) continue;
        if (!header) {
            if (!line.starts_with("classes:")) throw ParseError("expected header 'classes:<c1>,<c2>,...'", line_no);
            for (auto c : detail::split(line.substr(8), ',')) {
                c = detail::trim(c);
                if (c.empty()) throw ParseError("empty class name in header", line_no);
                m.classes.emplace_back(c);
            }
            header = true;
            continue;
        }
        auto cols = detail::split(line, '|');
        if (cols.size() != 3)
            throw ParseError("expected 3 '|'-separated columns, found " + std::to_string(cols.size()), line_no);
        ManifestRecord r;
        r.image_path = std::string(detail::trim(cols[0]));
        if (r.image_path.empty()) throw ParseError("empty image path", line_no);
        for (auto v : detail::split(cols[1], ',')) {
            int x = 0;
            if (!detail::parse_int(v, x) || (x != 1 && x != 0 && x != -1))
                throw ParseError("label '" + std::string(v) + "' is not one of 1, 0, -1", line_no);
            r.labels.push_back(x);
        }
        if (r.labels.size() != m.classes.size())
            throw ParseError("expected " + std::to_string(m.classes.size()) + " labels, found " +
                                 std::to_string(r.labels.size()),
                             line_no);
        std::istringstream toks{std::string(cols[2])};
        std::string tok;
        while (toks >> tok) {
            std::int64_t id = 0;
            if (!detail::parse_int<std::int64_t>(tok, id) || id <= 0)
                throw ParseError("token '" + tok + "' is not a positive integer id", line_no);
            r.tokens.push_back(id);
        }
        if (!seen.insert(r.image_path).second) throw ParseError("duplicate image path " + r.image_path, line_no);
        m.records.push_back(std::move(r));
    }
    if (!header) throw ParseError("missing 'classes:' header", line_no == 0 ? 1 : line_no);
    return m;
}

inline Manifest parse_manifest(const fs::path& path) {
    return parse_manifest_text(read_file(path), path.parent_path());
}

inline std::string format_manifest(const Manifest& m) {
    std::string out = "classes:";
    for (std::size_t i = 0; i < m.classes.size(); ++i) out += (i ? "," : "") + m.classes[i];
    out += '\n';
    for (const auto& r : m.records) {
        out += r.image_path + '|';
        for (std::size_t i = 0; i < r.labels.size(); ++i) out += (i ? "," : "") + std::to_string(r.labels[i]);
        out += '|';
        for (std::size_t i = 0; i < r.tokens.size(); ++i) out += (i ? " " : "") + std::to_string(r.tokens[i]);
        out += '\n';
    }
    return out;
}

inline void write_manifest(const fs::path& path, const Manifest& m) { write_file(path, format_manifest(m)); }

// ---------------------------------------------------------------- geometry

/// Bilinear resize with half-pixel centres; edge samples are clamped.
inline RasterImage resize_bilinear(const RasterImage& img, std::size_t out_h, std::size_t out_w) {
    validate(img);
    require(out_h > 0 && out_w > 0, "resize target must be positive");
    RasterImage out(out_h, out_w, img.channels);
    auto coord = [](std::size_t o, std::size_t in, std::size_t outn, std::size_t& i0, std::size_t& i1, double& f) {
        double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        i0 = static_cast<std::size_t>(std::floor(s));
        i1 = std::min(i0 + 1, in - 1);
        f = s - static_cast<double>(i0);
    };
    for (std::size_t y = 0; y < out_h; ++y) {
        std::size_t y0, y1;
        double fy;
        coord(y, img.height, out_h, y0, y1, fy);
        for (std::size_t x = 0; x < out_w; ++x) {
            std::size_t x0, x1;
            double fx;
            coord(x, img.width, out_w, x0, x1, fx);
            for (std::size_t c = 0; c < img.channels; ++c) {
                const double top = (1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c);
                const double bot = (1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c);
                out.at(y, x, c) = static_cast<float>((1 - fy) * top + fy * bot);
            }
        }
    }
    return out;
}

/// Bilinear resize to resize_to x resize_to, then the central crop_to x crop_to window.
inline RasterImage resize_center_crop(const RasterImage& img, std::size_t resize_to, std::size_t crop_to) {
    require(crop_to > 0 && crop_to <= resize_to, "crop size " + std::to_string(crop_to) +
                                                     " must not exceed resize size " + std::to_string(resize_to));
    RasterImage r = resize_bilinear(img, resize_to, resize_to);
    if (crop_to == resize_to) return r;
    const std::size_t off = (resize_to - crop_to) / 2;
    RasterImage out(crop_to, crop_to, r.channels);
    for (std::size_t y = 0; y < crop_to; ++y)
        for (std::size_t x = 0; x < crop_to; ++x)
            for (std::size_t c = 0; c < r.channels; ++c) out.at(y, x, c) = r.at(y + off, x + off, c);
    return out;
}

}  // namespace ivcxr::ingest
