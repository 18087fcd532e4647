#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rils/config.hpp"
#include "rils/data.hpp"
#include "rils/errors.hpp"
#include "rils/masking.hpp"
#include "rils/tensor.hpp"

namespace rils {

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
    bool no_decay = false;
};

template <typename T>
struct LinearLayer {
    Tensor<T> w;  // in x out
    Tensor<T> b;  // 1 x out
};

template <typename T>
Tensor<T> linear(const LinearLayer<T>& l, const Tensor<T>& x) {
    return add_row(matmul(x, l.w), l.b);
}

// Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x)).
template <typename T>
struct TransformerBlock {
    Tensor<T> ln1_g, ln1_b;
    LinearLayer<T> q, k, v, proj;
    Tensor<T> ln2_g, ln2_b;
    LinearLayer<T> fc1, fc2;
};

// Flattens an image into its N x (C*P*P) patch matrix (row-major patch grid,
// channel-major within a patch). A constant: gradients never reach pixels.
template <typename T>
Tensor<T> patchify(const Image& img, size_t patch) {
    if (img.h % patch != 0 || img.w % patch != 0)
        throw ConfigError("patchify: image " + std::to_string(img.w) + "x" + std::to_string(img.h) +
                          " not divisible by patch size " + std::to_string(patch));
    const size_t gy = img.h / patch, gx = img.w / patch;
    const size_t n = gy * gx, d = img.c * patch * patch;
    std::vector<T> out(n * d);
    for (size_t py = 0; py < gy; ++py)
        for (size_t px = 0; px < gx; ++px) {
            T* row = out.data() + (py * gx + px) * d;
            for (size_t ch = 0; ch < img.c; ++ch)
                for (size_t y = 0; y < patch; ++y)
                    for (size_t x = 0; x < patch; ++x)
                        row[(ch * patch + y) * patch + x] =
                            static_cast<T>(img.at(ch, py * patch + y, px * patch + x));
        }
    return Tensor<T>::from_data({n, d}, std::move(out));
}

template <typename T>
struct EncodedImage {
    Tensor<T> patch_feats;        // N x D_v
    Tensor<T> projected_patches;  // N x D_e, unit rows
    Tensor<T> global;             // 1 x D_e, unit norm
};

template <typename T>
struct DecodedImage {
    Tensor<T> decoded_feats;      // N x D_v, all positions
    Tensor<T> projected_patches;  // N x D_e, unit rows
};

// ---------------------------------------------------------------------------
// RilsModel: every learnable parameter of the three networks plus the two
// projection heads, the contrastive temperature, and the optional prototype
// bank / pixel head of the ablation spaces.
// ---------------------------------------------------------------------------

template <typename T>
struct RilsModel {
    RunConfig cfg;
    size_t vocab_size = 0;

    LinearLayer<T> patch_embed;  // (C*P*P) x D_v
    Tensor<T> vision_pos;        // N x D_v
    std::vector<TransformerBlock<T>> vision_blocks;

    Tensor<T> mask_token;   // 1 x D_v
    Tensor<T> decoder_pos;  // N x D_v
    std::vector<TransformerBlock<T>> decoder_blocks;

    Tensor<T> text_token_embed;  // vocab x D_t
    Tensor<T> text_pos;          // max_len x D_t
    std::vector<TransformerBlock<T>> text_blocks;

    LinearLayer<T> theta;  // D_v -> D_e (vision projection, shared by f, g, pooled)
    LinearLayer<T> phi;    // D_t -> D_e
    Tensor<T> logit_scale;  // 1x1, log of 1/sigma

    Tensor<T> prototypes;              // K x D_e, only for the prototype space
    LinearLayer<T> pixel_head;         // D_v -> C*P*P, only for the pixel space

    static RilsModel init(const RunConfig& cfg, size_t vocab_size);
    std::vector<NamedParam<T>> parameters();

    T inv_sigma() const { return std::exp(logit_scale.value()[0]); }
    T sigma() const { return std::exp(-logit_scale.value()[0]); }
};

namespace detail {

template <typename T>
Tensor<T> param(Rng& rng, Shape shape, T stddev) {
    return Tensor<T>::randn(std::move(shape), rng, stddev, true);
}

template <typename T>
LinearLayer<T> init_linear(Rng& rng, size_t in, size_t out, T stddev = static_cast<T>(0.02)) {
    return {param<T>(rng, {in, out}, stddev), Tensor<T>::zeros({1, out}, true)};
}

template <typename T>
TransformerBlock<T> init_block(Rng& rng, size_t width, size_t mlp_ratio) {
    TransformerBlock<T> b;
    b.ln1_g = Tensor<T>::full({1, width}, T(1), true);
    b.ln1_b = Tensor<T>::zeros({1, width}, true);
    b.q = init_linear<T>(rng, width, width);
    b.k = init_linear<T>(rng, width, width);
    b.v = init_linear<T>(rng, width, width);
    b.proj = init_linear<T>(rng, width, width);
    b.ln2_g = Tensor<T>::full({1, width}, T(1), true);
    b.ln2_b = Tensor<T>::zeros({1, width}, true);
    b.fc1 = init_linear<T>(rng, width, width * mlp_ratio);
    b.fc2 = init_linear<T>(rng, width * mlp_ratio, width);
    return b;
}

template <typename T>
void collect_block(std::vector<NamedParam<T>>& out, TransformerBlock<T>& b, const std::string& prefix) {
    out.push_back({prefix + ".ln1.g", b.ln1_g, true});
    out.push_back({prefix + ".ln1.b", b.ln1_b, true});
    out.push_back({prefix + ".q.w", b.q.w, false});
    out.push_back({prefix + ".q.b", b.q.b, true});
    out.push_back({prefix + ".k.w", b.k.w, false});
    out.push_back({prefix + ".k.b", b.k.b, true});
    out.push_back({prefix + ".v.w", b.v.w, false});
    out.push_back({prefix + ".v.b", b.v.b, true});
    out.push_back({prefix + ".proj.w", b.proj.w, false});
    out.push_back({prefix + ".proj.b", b.proj.b, true});
    out.push_back({prefix + ".ln2.g", b.ln2_g, true});
    out.push_back({prefix + ".ln2.b", b.ln2_b, true});
    out.push_back({prefix + ".fc1.w", b.fc1.w, false});
    out.push_back({prefix + ".fc1.b", b.fc1.b, true});
    out.push_back({prefix + ".fc2.w", b.fc2.w, false});
    out.push_back({prefix + ".fc2.b", b.fc2.b, true});
}

}  // namespace detail

template <typename T>
RilsModel<T> RilsModel<T>::init(const RunConfig& cfg, size_t vocab_size) {
    cfg.validate();
    RilsModel<T> m;
    m.cfg = cfg;
    m.vocab_size = vocab_size;
    const size_t n_patches = cfg.n_patches();
    const size_t patch_dim = 3 * cfg.patch_size * cfg.patch_size;
    Rng rng = make_rng(cfg.seed, 11);
    const T std02 = static_cast<T>(0.02);

    m.patch_embed = detail::init_linear<T>(rng, patch_dim, cfg.d_v);
    m.vision_pos = detail::param<T>(rng, {n_patches, cfg.d_v}, std02);
    for (size_t i = 0; i < cfg.vision_depth; ++i)
        m.vision_blocks.push_back(detail::init_block<T>(rng, cfg.d_v, cfg.mlp_ratio));

    m.mask_token = detail::param<T>(rng, {1, cfg.d_v}, std02);
    m.decoder_pos = detail::param<T>(rng, {n_patches, cfg.d_v}, std02);
    for (size_t i = 0; i < cfg.decoder_depth; ++i)
        m.decoder_blocks.push_back(detail::init_block<T>(rng, cfg.d_v, cfg.mlp_ratio));

    m.text_token_embed = detail::param<T>(rng, {vocab_size, cfg.d_t}, std02);
    m.text_pos = detail::param<T>(rng, {cfg.max_len, cfg.d_t}, std02);
    for (size_t i = 0; i < cfg.text_depth; ++i)
        m.text_blocks.push_back(detail::init_block<T>(rng, cfg.d_t, cfg.mlp_ratio));

    m.theta = detail::init_linear<T>(rng, cfg.d_v, cfg.d_e);
    m.phi = detail::init_linear<T>(rng, cfg.d_t, cfg.d_e);
    m.logit_scale =
        Tensor<T>::from_data({1, 1}, {static_cast<T>(std::log(1.0 / cfg.sigma_init))}, true);

    if (cfg.reconstruction_space == ReconSpace::kPrototype)
        m.prototypes = detail::param<T>(rng, {cfg.prototype_k, cfg.d_e}, std02);
    if (cfg.reconstruction_space == ReconSpace::kPixel)
        m.pixel_head = detail::init_linear<T>(rng, cfg.d_v, patch_dim);
    return m;
}

template <typename T>
std::vector<NamedParam<T>> RilsModel<T>::parameters() {
    std::vector<NamedParam<T>> out;
    out.push_back({"patch_embed.w", patch_embed.w, false});
    out.push_back({"patch_embed.b", patch_embed.b, true});
    out.push_back({"vision.pos", vision_pos, false});
    for (size_t i = 0; i < vision_blocks.size(); ++i)
        detail::collect_block(out, vision_blocks[i], "vision.block" + std::to_string(i));
    out.push_back({"decoder.mask_token", mask_token, false});
    out.push_back({"decoder.pos", decoder_pos, false});
    for (size_t i = 0; i < decoder_blocks.size(); ++i)
        detail::collect_block(out, decoder_blocks[i], "decoder.block" + std::to_string(i));
    out.push_back({"text.token_embed", text_token_embed, false});
    out.push_back({"text.pos", text_pos, false});
    for (size_t i = 0; i < text_blocks.size(); ++i)
        detail::collect_block(out, text_blocks[i], "text.block" + std::to_string(i));
    out.push_back({"theta.w", theta.w, false});
    out.push_back({"theta.b", theta.b, true});
    out.push_back({"phi.w", phi.w, false});
    out.push_back({"phi.b", phi.b, true});
    out.push_back({"logit_scale", logit_scale, true});
    if (prototypes.defined()) out.push_back({"prototypes", prototypes, false});
    if (pixel_head.w.defined()) {
        out.push_back({"pixel_head.w", pixel_head.w, false});
        out.push_back({"pixel_head.b", pixel_head.b, true});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> attention(const TransformerBlock<T>& blk, const Tensor<T>& x, size_t heads, const Tensor<T>* mask) {
    const size_t width = x.cols();
    const size_t head_dim = width / heads;
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(head_dim));
    Tensor<T> q = linear(blk.q, x), k = linear(blk.k, x), v = linear(blk.v, x);
    std::vector<Tensor<T>> outs;
    outs.reserve(heads);
    for (size_t h = 0; h < heads; ++h) {
        Tensor<T> qh = slice_cols(q, h * head_dim, head_dim);
        Tensor<T> kh = slice_cols(k, h * head_dim, head_dim);
        Tensor<T> vh = slice_cols(v, h * head_dim, head_dim);
        Tensor<T> scores = scalar_mul(matmul(qh, transpose(kh)), inv_sqrt_d);
        if (mask) scores = add(scores, *mask);
        outs.push_back(matmul(softmax_rows(scores), vh));
    }
    return linear(blk.proj, concat_cols(outs));
}

template <typename T>
Tensor<T> block_forward(const TransformerBlock<T>& blk, Tensor<T> x, size_t heads, const Tensor<T>* mask) {
    x = add(x, attention(blk, layer_norm(x, blk.ln1_g, blk.ln1_b), heads, mask));
    x = add(x, linear(blk.fc2, gelu(linear(blk.fc1, layer_norm(x, blk.ln2_g, blk.ln2_b)))));
    return x;
}

template <typename T>
Tensor<T> causal_mask(size_t n) {
    std::vector<T> m(n * n, T(0));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) m[i * n + j] = static_cast<T>(-1e9);
    return Tensor<T>::from_data({n, n}, std::move(m));
}

}  // namespace detail

// Encodes the uncorrupted image: all N patch features, their projections
// into the joint space, and the mean-pooled projected global feature.
template <typename T>
EncodedImage<T> vision_encode_full(const RilsModel<T>& m, const Image& img) {
    Tensor<T> x = patchify<T>(img, m.cfg.patch_size);
    if (x.rows() != m.cfg.n_patches())
        throw ConfigError("vision_encode_full: image yields " + std::to_string(x.rows()) + " patches, model has " +
                          std::to_string(m.cfg.n_patches()));
    x = add(linear(m.patch_embed, x), m.vision_pos);
    for (const auto& blk : m.vision_blocks) x = detail::block_forward<T>(blk, x, m.cfg.heads_vision, nullptr);

    EncodedImage<T> enc;
    enc.patch_feats = x;
    enc.projected_patches = l2_normalize_rows(linear(m.theta, x));
    enc.global = l2_normalize_rows(linear(m.theta, mean_axis(x, 0)));
    return enc;
}

// Encodes only the visible patches; output row r corresponds to
// plan.visible_idx[r].
template <typename T>
Tensor<T> vision_encode_masked(const RilsModel<T>& m, const Image& img, const MaskPlan& plan) {
    if (plan.n_patches != m.cfg.n_patches())
        throw ContractError("vision_encode_masked: plan covers " + std::to_string(plan.n_patches) +
                            " patches, image has " + std::to_string(m.cfg.n_patches()));
    Tensor<T> patches = gather_rows(patchify<T>(img, m.cfg.patch_size), plan.visible_idx);
    Tensor<T> x = add(linear(m.patch_embed, patches), gather_rows(m.vision_pos, plan.visible_idx));
    for (const auto& blk : m.vision_blocks) x = detail::block_forward<T>(blk, x, m.cfg.heads_vision, nullptr);
    return x;
}

// Fills masked slots with the mask token, restores patch order, and decodes.
template <typename T>
DecodedImage<T> vision_decode(const RilsModel<T>& m, const Tensor<T>& visible, const MaskPlan& plan) {
    if (visible.rows() != plan.n_visible())
        throw ContractError("vision_decode: got " + std::to_string(visible.rows()) + " visible rows, plan has " +
                            std::to_string(plan.n_visible()));
    // Row k of the gather below picks patch k from [visible rows; mask rows].
    std::vector<size_t> order(plan.n_patches);
    for (size_t r = 0; r < plan.visible_idx.size(); ++r) order[plan.visible_idx[r]] = r;
    for (size_t r = 0; r < plan.masked_idx.size(); ++r) order[plan.masked_idx[r]] = plan.n_visible() + r;

    Tensor<T> masks = gather_rows(m.mask_token, std::vector<size_t>(plan.n_masked(), 0));
    Tensor<T> x = gather_rows(concat_rows<T>({visible, masks}), order);
    x = add(x, m.decoder_pos);
    for (const auto& blk : m.decoder_blocks) x = detail::block_forward<T>(blk, x, m.cfg.heads_decoder, nullptr);

    DecodedImage<T> dec;
    dec.decoded_feats = x;
    dec.projected_patches = l2_normalize_rows(linear(m.theta, x));
    return dec;
}

// Causal text encoder; the global representation is the hidden state at the
// EOT position, projected and normalized.
template <typename T>
Tensor<T> language_encode(const RilsModel<T>& m, const TokenSequence& tokens) {
    const size_t L = m.cfg.max_len;
    if (tokens.ids.size() != L)
        throw ContractError("language_encode: sequence length " + std::to_string(tokens.ids.size()) +
                            " != configured max length " + std::to_string(L));
    if (tokens.ids[0] != Tokenizer::kSot) throw DataError("tokenization error: sequence must start with SOT");
    size_t eot_count = 0;
    for (int32_t id : tokens.ids) eot_count += (id == Tokenizer::kEot) ? 1 : 0;
    if (eot_count != 1 || tokens.eot_pos >= L || tokens.ids[tokens.eot_pos] != Tokenizer::kEot)
        throw DataError("tokenization error: sequence must contain exactly one EOT at eot_pos");

    std::vector<size_t> ids(L);
    for (size_t i = 0; i < L; ++i) {
        if (tokens.ids[i] < 0 || static_cast<size_t>(tokens.ids[i]) >= m.vocab_size)
            throw IndexError("language_encode: token id " + std::to_string(tokens.ids[i]) + " outside vocabulary");
        ids[i] = static_cast<size_t>(tokens.ids[i]);
    }
    Tensor<T> x = add(gather_rows(m.text_token_embed, ids), m.text_pos);
    Tensor<T> mask = detail::causal_mask<T>(L);
    for (const auto& blk : m.text_blocks) x = detail::block_forward<T>(blk, x, m.cfg.heads_text, &mask);
    Tensor<T> h = gather_rows(x, {tokens.eot_pos});
    return l2_normalize_rows(linear(m.phi, h));
}

// Mean-pooled pre-projection feature, the linear-probe input.
template <typename T>
Tensor<T> pooled_vision_feature(const RilsModel<T>& m, const Image& img) {
    return mean_axis(vision_encode_full(m, img).patch_feats, 0);
}

}  // namespace rils
