#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "rils/rng.hpp"

namespace rils {

// ---------------------------------------------------------------------------
// Images: channel-major float buffers with values in [0,1].
// ---------------------------------------------------------------------------

struct Image {
    size_t c = 0, h = 0, w = 0;
    std::vector<float> pix;  // c * h * w, channel-major

    float at(size_t ch, size_t y, size_t x) const { return pix[(ch * h + y) * w + x]; }
    float& at(size_t ch, size_t y, size_t x) { return pix[(ch * h + y) * w + x]; }
};

void write_ppm(const Image& img, const std::string& path);
Image read_ppm(const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic corpus: one colored shape per image, caption from a template.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    std::vector<std::string> shapes = {"square", "circle", "triangle", "cross"};
    std::vector<std::string> colors = {"red", "green", "blue", "yellow"};
    size_t canvas = 32;
    // "{}" is replaced by "<color> <shape>".
    std::vector<std::string> templates = {"a photo of a {}", "a {}", "an image of a {}"};
    uint64_t seed = 0;

    size_t n_classes() const { return shapes.size() * colors.size(); }
    int class_id(size_t shape_idx, size_t color_idx) const {
        return static_cast<int>(shape_idx * colors.size() + color_idx);
    }
    std::string class_name(int class_id) const;
    void validate() const;
};

struct ImageTextPair {
    Image image;
    std::string caption;
    int class_id = -1;
};

ImageTextPair generate_pair(const SyntheticSpec& spec, Rng& rng);

// Recovers the class id from a caption by locating the color and shape words;
// returns -1 when either is absent.
int parse_class_id(const SyntheticSpec& spec, const std::string& caption);

// ---------------------------------------------------------------------------
// Tokenizer: closed vocabulary, whitespace split, SOT/EOT framing, PAD fill.
// ---------------------------------------------------------------------------

struct TokenSequence {
    std::vector<int32_t> ids;  // length == max_len
    size_t eot_pos = 0;
};

class Tokenizer {
public:
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kSot = 1;
    static constexpr int32_t kEot = 2;
    static constexpr int32_t kUnk = 3;

    Tokenizer() = default;
    Tokenizer(std::vector<std::string> words, size_t max_len);

    static Tokenizer for_spec(const SyntheticSpec& spec, size_t max_len);

    TokenSequence encode(const std::string& text) const;
    size_t vocab_size() const { return 4 + words_.size(); }
    size_t max_len() const { return max_len_; }
    const std::vector<std::string>& words() const { return words_; }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int32_t> index_;
    size_t max_len_ = 16;
};

std::vector<std::string> split_words(const std::string& text);

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

// Area-fraction crop with aspect jitter in [3/4, 4/3], bilinearly resized
// back to the source extents. Falls back to the full image after 10
// degenerate draws.
Image random_resized_crop(const Image& img, double scale_lo, double scale_hi, Rng& rng);

Image resize_bilinear(const Image& img, size_t out_h, size_t out_w);

// ---------------------------------------------------------------------------
// Dataset: in-memory pairs or a manifest of PPM files loaded lazily.
// ---------------------------------------------------------------------------

class Dataset {
public:
    static Dataset from_pairs(std::vector<ImageTextPair> pairs);
    // Manifest format: UTF-8, one "relative_image_path<TAB>caption" per line.
    static Dataset from_manifest(const std::string& manifest_path, const SyntheticSpec& spec);

    size_t size() const { return captions_.size(); }
    const std::string& caption(size_t i) const { return captions_.at(i); }
    int class_id(size_t i) const { return class_ids_.at(i); }
    uint64_t sample_id(size_t i) const { return i; }
    const Image& image(size_t i) const;  // loads and memoizes file-backed entries

    // Deterministic 90/10 split keyed on a hash of the sample id.
    std::vector<size_t> train_indices() const;
    std::vector<size_t> heldout_indices() const;

private:
    std::vector<std::string> captions_;
    std::vector<int> class_ids_;
    std::vector<std::string> paths_;  // empty for in-memory datasets
    std::string root_;
    mutable std::vector<std::optional<Image>> images_;
};

std::vector<ImageTextPair> generate_corpus(const SyntheticSpec& spec, size_t n);

// Writes images as img_NNNNN.ppm plus manifest.tsv under out_dir.
void write_corpus(const std::vector<ImageTextPair>& pairs, const std::string& out_dir);

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

struct ImageTextBatch {
    std::vector<Image> images;
    std::vector<TokenSequence> tokens;
    std::vector<std::string> captions;
    std::vector<int> class_ids;

    size_t size() const { return images.size(); }
};

struct AugmentConfig {
    bool enabled = false;
    double scale_lo = 0.5;
    double scale_hi = 1.0;
};

ImageTextBatch make_batch(const Dataset& data, const std::vector<size_t>& indices, const Tokenizer& tok,
                          const AugmentConfig& aug, Rng& rng);

}  // namespace rils
