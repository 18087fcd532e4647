#include "rils/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "rils/errors.hpp"

namespace fs = std::filesystem;

namespace rils {

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)
// ---------------------------------------------------------------------------

void write_ppm(const Image& img, const std::string& path) {
    if (img.c != 3) throw ContractError("write_ppm: expected 3 channels, got " + std::to_string(img.c));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("write_ppm: cannot open " + path);
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<unsigned char> row(img.w * 3);
    for (size_t y = 0; y < img.h; ++y) {
        for (size_t x = 0; x < img.w; ++x)
            for (size_t ch = 0; ch < 3; ++ch) {
                const float v = std::min(1.0f, std::max(0.0f, img.at(ch, y, x)));
                row[x * 3 + ch] = static_cast<unsigned char>(std::lround(v * 255.0f));
            }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw DataError("write_ppm: short write to " + path);
}

namespace {

struct PpmCursor {
    const std::string& buf;
    size_t pos = 0;

    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError("ppm: " + what + " at byte offset " + std::to_string(pos));
    }

    void skip_space_and_comments() {
        while (pos < buf.size()) {
            const char c = buf[pos];
            if (c == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos;
            } else {
                break;
            }
        }
    }

    size_t read_uint() {
        skip_space_and_comments();
        if (pos >= buf.size() || !std::isdigit(static_cast<unsigned char>(buf[pos]))) fail("expected integer");
        size_t v = 0;
        while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos]))) {
            v = v * 10 + static_cast<size_t>(buf[pos] - '0');
            ++pos;
        }
        return v;
    }
};

}  // namespace

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("read_ppm: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();

    PpmCursor cur{buf};
    if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '6')
        throw ParseError("ppm: bad magic (want \"P6\") at byte offset 0 in " + path);
    cur.pos = 2;
    const size_t w = cur.read_uint();
    const size_t h = cur.read_uint();
    const size_t maxval = cur.read_uint();
    if (maxval != 255) cur.fail("unsupported maxval " + std::to_string(maxval));
    if (cur.pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[cur.pos])))
        cur.fail("expected single whitespace before pixel data");
    ++cur.pos;

    const size_t need = w * h * 3;
    if (buf.size() - cur.pos < need)
        throw ParseError("ppm: truncated pixel data (need " + std::to_string(need) + " bytes, have " +
                         std::to_string(buf.size() - cur.pos) + ") at byte offset " + std::to_string(cur.pos));

    Image img;
    img.c = 3;
    img.h = h;
    img.w = w;
    img.pix.resize(3 * h * w);
    for (size_t y = 0; y < h; ++y)
        for (size_t x = 0; x < w; ++x)
            for (size_t ch = 0; ch < 3; ++ch) {
                const auto byte = static_cast<unsigned char>(buf[cur.pos + (y * w + x) * 3 + ch]);
                img.at(ch, y, x) = static_cast<float>(byte) / 255.0f;
            }
    return img;
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

namespace {

struct Rgb {
    float r, g, b;
};

Rgb color_rgb(const std::string& name) {
    if (name == "red") return {0.90f, 0.10f, 0.10f};
    if (name == "green") return {0.10f, 0.80f, 0.15f};
    if (name == "blue") return {0.15f, 0.20f, 0.90f};
    if (name == "yellow") return {0.90f, 0.85f, 0.10f};
    if (name == "magenta") return {0.85f, 0.15f, 0.85f};
    if (name == "cyan") return {0.10f, 0.80f, 0.85f};
    throw ConfigError("unknown color name: " + name);
}

bool inside_shape(const std::string& shape, double x, double y, double cx, double cy, double r) {
    const double dx = x - cx, dy = y - cy;
    if (shape == "square") return std::abs(dx) <= r && std::abs(dy) <= r;
    if (shape == "circle") return dx * dx + dy * dy <= r * r;
    if (shape == "triangle") {
        if (dy < -r || dy > r) return false;
        const double half_width = r * (dy + r) / (2.0 * r);
        return std::abs(dx) <= half_width;
    }
    if (shape == "cross")
        return (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) || (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
    throw ConfigError("unknown shape name: " + shape);
}

}  // namespace

std::string SyntheticSpec::class_name(int id) const {
    const size_t shape_idx = static_cast<size_t>(id) / colors.size();
    const size_t color_idx = static_cast<size_t>(id) % colors.size();
    if (shape_idx >= shapes.size()) throw ConfigError("class_name: class id out of range");
    return colors[color_idx] + " " + shapes[shape_idx];
}

void SyntheticSpec::validate() const {
    if (shapes.empty() || colors.empty()) throw ConfigError("synthetic spec: shapes and colors must be non-empty");
    if (templates.empty()) throw ConfigError("synthetic spec: at least one caption template required");
    if (0.15 * static_cast<double>(canvas) < 2.0)
        throw ConfigError("synthetic spec: canvas " + std::to_string(canvas) +
                          " too small for minimum shape extent");
    for (const auto& t : templates)
        if (t.find("{}") == std::string::npos)
            throw ConfigError("synthetic spec: template \"" + t + "\" lacks a {} placeholder");
}

ImageTextPair generate_pair(const SyntheticSpec& spec, Rng& rng) {
    spec.validate();
    const size_t n = spec.canvas;

    std::uniform_int_distribution<size_t> shape_d(0, spec.shapes.size() - 1);
    std::uniform_int_distribution<size_t> color_d(0, spec.colors.size() - 1);
    std::uniform_int_distribution<size_t> tmpl_d(0, spec.templates.size() - 1);
    const size_t shape_idx = shape_d(rng);
    const size_t color_idx = color_d(rng);
    const size_t tmpl_idx = tmpl_d(rng);

    std::uniform_real_distribution<double> radius_d(0.15 * static_cast<double>(n), 0.30 * static_cast<double>(n));
    const double r = radius_d(rng);
    std::uniform_real_distribution<double> center_d(r, static_cast<double>(n) - 1.0 - r);
    const double cx = center_d(rng);
    const double cy = center_d(rng);
    std::uniform_real_distribution<float> bright_d(0.85f, 1.0f);
    const float brightness = bright_d(rng);

    Image img;
    img.c = 3;
    img.h = n;
    img.w = n;
    img.pix.resize(3 * n * n);
    std::uniform_real_distribution<float> noise_d(0.0f, 0.05f);
    for (size_t y = 0; y < n; ++y)
        for (size_t x = 0; x < n; ++x) {
            const float bg = 0.05f + noise_d(rng);
            for (size_t ch = 0; ch < 3; ++ch) img.at(ch, y, x) = bg;
        }

    const Rgb rgb = color_rgb(spec.colors[color_idx]);
    const float chan[3] = {rgb.r * brightness, rgb.g * brightness, rgb.b * brightness};
    for (size_t y = 0; y < n; ++y)
        for (size_t x = 0; x < n; ++x)
            if (inside_shape(spec.shapes[shape_idx], static_cast<double>(x), static_cast<double>(y), cx, cy, r))
                for (size_t ch = 0; ch < 3; ++ch) img.at(ch, y, x) = chan[ch];

    const std::string name = spec.colors[color_idx] + " " + spec.shapes[shape_idx];
    std::string caption = spec.templates[tmpl_idx];
    caption.replace(caption.find("{}"), 2, name);

    ImageTextPair pair;
    pair.image = std::move(img);
    pair.caption = std::move(caption);
    pair.class_id = spec.class_id(shape_idx, color_idx);
    return pair;
}

int parse_class_id(const SyntheticSpec& spec, const std::string& caption) {
    int shape_idx = -1, color_idx = -1;
    for (const auto& w : split_words(caption)) {
        for (size_t i = 0; i < spec.shapes.size(); ++i)
            if (w == spec.shapes[i]) shape_idx = static_cast<int>(i);
        for (size_t i = 0; i < spec.colors.size(); ++i)
            if (w == spec.colors[i]) color_idx = static_cast<int>(i);
    }
    if (shape_idx < 0 || color_idx < 0) return -1;
    return spec.class_id(static_cast<size_t>(shape_idx), static_cast<size_t>(color_idx));
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char raw : text) {
        const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

Tokenizer::Tokenizer(std::vector<std::string> words, size_t max_len) : words_(std::move(words)), max_len_(max_len) {
    if (max_len_ < 2) throw ConfigError("tokenizer: max_len must be >= 2 to frame SOT/EOT");
    std::sort(words_.begin(), words_.end());
    words_.erase(std::unique(words_.begin(), words_.end()), words_.end());
    for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int32_t>(4 + i);
}

Tokenizer Tokenizer::for_spec(const SyntheticSpec& spec, size_t max_len) {
    std::vector<std::string> words;
    for (const auto& t : spec.templates)
        for (const auto& w : split_words(t))
            if (w != "{}") words.push_back(w);
    words.insert(words.end(), spec.shapes.begin(), spec.shapes.end());
    words.insert(words.end(), spec.colors.begin(), spec.colors.end());
    return Tokenizer(std::move(words), max_len);
}

TokenSequence Tokenizer::encode(const std::string& text) const {
    const auto words = split_words(text);
    // Truncation keeps EOT as the final token when the caption is overlong.
    const size_t keep = std::min(words.size(), max_len_ - 2);

    TokenSequence seq;
    seq.ids.assign(max_len_, kPad);
    seq.ids[0] = kSot;
    for (size_t i = 0; i < keep; ++i) {
        const auto it = index_.find(words[i]);
        seq.ids[1 + i] = (it == index_.end()) ? kUnk : it->second;
    }
    seq.eot_pos = 1 + keep;
    seq.ids[seq.eot_pos] = kEot;
    return seq;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

Image resize_bilinear(const Image& img, size_t out_h, size_t out_w) {
    Image out;
    out.c = img.c;
    out.h = out_h;
    out.w = out_w;
    out.pix.resize(img.c * out_h * out_w);
    const double sy = static_cast<double>(img.h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(img.w) / static_cast<double>(out_w);
    for (size_t y = 0; y < out_h; ++y) {
        const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        const double fy0 = std::floor(fy);
        const double wy = fy - fy0;
        const size_t y0 = static_cast<size_t>(std::max(0.0, fy0));
        const size_t y1 = std::min(img.h - 1, static_cast<size_t>(std::max(0.0, fy0 + 1.0)));
        for (size_t x = 0; x < out_w; ++x) {
            const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            const double fx0 = std::floor(fx);
            const double wx = fx - fx0;
            const size_t x0 = static_cast<size_t>(std::max(0.0, fx0));
            const size_t x1 = std::min(img.w - 1, static_cast<size_t>(std::max(0.0, fx0 + 1.0)));
            for (size_t ch = 0; ch < img.c; ++ch) {
                const double top = (1.0 - wx) * img.at(ch, y0, x0) + wx * img.at(ch, y0, x1);
                const double bot = (1.0 - wx) * img.at(ch, y1, x0) + wx * img.at(ch, y1, x1);
                out.at(ch, y, x) = static_cast<float>((1.0 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

Image random_resized_crop(const Image& img, double scale_lo, double scale_hi, Rng& rng) {
    if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0))
        throw ConfigError("random_resized_crop: scale range must satisfy 0 < lo <= hi <= 1");
    const double area = static_cast<double>(img.h * img.w);
    std::uniform_real_distribution<double> scale_d(scale_lo, scale_hi);
    std::uniform_real_distribution<double> aspect_d(3.0 / 4.0, 4.0 / 3.0);

    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = scale_d(rng) * area;
        const double aspect = aspect_d(rng);
        const auto cw = static_cast<long>(std::lround(std::sqrt(target * aspect)));
        const auto chh = static_cast<long>(std::lround(std::sqrt(target / aspect)));
        if (cw < 1 || chh < 1 || cw > static_cast<long>(img.w) || chh > static_cast<long>(img.h)) continue;
        std::uniform_int_distribution<size_t> x_d(0, img.w - static_cast<size_t>(cw));
        std::uniform_int_distribution<size_t> y_d(0, img.h - static_cast<size_t>(chh));
        const size_t x0 = x_d(rng), y0 = y_d(rng);

        Image crop;
        crop.c = img.c;
        crop.h = static_cast<size_t>(chh);
        crop.w = static_cast<size_t>(cw);
        crop.pix.resize(crop.c * crop.h * crop.w);
        for (size_t ch = 0; ch < crop.c; ++ch)
            for (size_t y = 0; y < crop.h; ++y)
                for (size_t x = 0; x < crop.w; ++x) crop.at(ch, y, x) = img.at(ch, y0 + y, x0 + x);
        return resize_bilinear(crop, img.h, img.w);
    }
    return img;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

Dataset Dataset::from_pairs(std::vector<ImageTextPair> pairs) {
    Dataset d;
    d.captions_.reserve(pairs.size());
    d.class_ids_.reserve(pairs.size());
    d.images_.reserve(pairs.size());
    for (auto& p : pairs) {
        d.captions_.push_back(std::move(p.caption));
        d.class_ids_.push_back(p.class_id);
        d.images_.emplace_back(std::move(p.image));
    }
    return d;
}

Dataset Dataset::from_manifest(const std::string& manifest_path, const SyntheticSpec& spec) {
    std::ifstream in(manifest_path);
    if (!in) throw DataError("manifest: cannot open " + manifest_path);
    Dataset d;
    d.root_ = fs::path(manifest_path).parent_path().string();
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const size_t tab = line.find('\t');
        if (line.empty() || tab == std::string::npos || tab == 0)
            throw ParseError("manifest line " + std::to_string(lineno) +
                             ": expected \"image_path<TAB>caption\", got \"" + line + "\"");
        std::string path = line.substr(0, tab);
        std::string caption = line.substr(tab + 1);
        d.paths_.push_back(std::move(path));
        d.class_ids_.push_back(parse_class_id(spec, caption));
        d.captions_.push_back(std::move(caption));
        d.images_.emplace_back(std::nullopt);
    }
    return d;
}

const Image& Dataset::image(size_t i) const {
    if (i >= images_.size()) throw IndexError("dataset: sample " + std::to_string(i) + " out of range");
    if (!images_[i].has_value()) {
        const std::string full = root_.empty() ? paths_[i] : root_ + "/" + paths_[i];
        try {
            images_[i] = read_ppm(full);
        } catch (const std::exception& e) {
            throw DataError("manifest line " + std::to_string(i + 1) + ": " + e.what());
        }
    }
    return *images_[i];
}

namespace {
constexpr uint64_t kSplitSalt = 0x5b17c0de;
}

std::vector<size_t> Dataset::train_indices() const {
    std::vector<size_t> out;
    for (size_t i = 0; i < size(); ++i)
        if (derive_seed(kSplitSalt, sample_id(i)) % 10 != 0) out.push_back(i);
    return out;
}

std::vector<size_t> Dataset::heldout_indices() const {
    std::vector<size_t> out;
    for (size_t i = 0; i < size(); ++i)
        if (derive_seed(kSplitSalt, sample_id(i)) % 10 == 0) out.push_back(i);
    return out;
}

std::vector<ImageTextPair> generate_corpus(const SyntheticSpec& spec, size_t n) {
    spec.validate();
    Rng rng = make_rng(spec.seed, 7);
    std::vector<ImageTextPair> pairs;
    pairs.reserve(n);
    for (size_t i = 0; i < n; ++i) pairs.push_back(generate_pair(spec, rng));
    return pairs;
}

void write_corpus(const std::vector<ImageTextPair>& pairs, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream manifest(out_dir + "/manifest.tsv");
    if (!manifest) throw DataError("write_corpus: cannot open " + out_dir + "/manifest.tsv");
    char name[32];
    for (size_t i = 0; i < pairs.size(); ++i) {
        std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
        write_ppm(pairs[i].image, out_dir + "/" + name);
        manifest << name << "\t" << pairs[i].caption << "\n";
    }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

ImageTextBatch make_batch(const Dataset& data, const std::vector<size_t>& indices, const Tokenizer& tok,
                          const AugmentConfig& aug, Rng& rng) {
    ImageTextBatch batch;
    batch.images.reserve(indices.size());
    batch.tokens.reserve(indices.size());
    for (size_t i : indices) {
        if (i >= data.size())
            throw IndexError("make_batch: index " + std::to_string(i) + " out of range [0," +
                             std::to_string(data.size()) + ")");
        const Image& src = data.image(i);
        batch.images.push_back(aug.enabled ? random_resized_crop(src, aug.scale_lo, aug.scale_hi, rng) : src);
        batch.tokens.push_back(tok.encode(data.caption(i)));
        batch.captions.push_back(data.caption(i));
        batch.class_ids.push_back(data.class_id(i));
    }
    return batch;
}

}  // namespace rils
