#pragma once

#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "rils/config.hpp"
#include "rils/data.hpp"
#include "rils/errors.hpp"
#include "rils/masking.hpp"
#include "rils/model.hpp"
#include "rils/tensor.hpp"

namespace rils {

struct LossBreakdown {
    double l_contra = 0.0;
    double l_recon = 0.0;
    double l_total = 0.0;
    double matched_fraction = 0.0;
    double l_i2t = 0.0;
    double l_t2i = 0.0;
};

template <typename T>
struct ContrastiveParts {
    Tensor<T> total;  // (i2t + t2i) / 2
    Tensor<T> i2t;
    Tensor<T> t2i;
};

namespace detail {

template <typename T>
Tensor<T> eye(size_t n) {
    std::vector<T> m(n * n, T(0));
    for (size_t i = 0; i < n; ++i) m[i * n + i] = T(1);
    return Tensor<T>::from_data({n, n}, std::move(m));
}

template <typename T>
Tensor<T> diag_mean_neg(const Tensor<T>& log_probs) {
    const size_t n = log_probs.rows();
    return scalar_mul(sum_all(mul(log_probs, eye<T>(n))), -T(1) / static_cast<T>(n));
}

}  // namespace detail

// Symmetric InfoNCE over cosine logits scaled by 1/sigma; the scale enters
// as a one-element tensor so a learnable temperature stays in the graph.
template <typename T>
ContrastiveParts<T> contrastive_loss(const Tensor<T>& z_img, const Tensor<T>& z_txt, const Tensor<T>& inv_sigma) {
    if (z_img.rows() == 0) throw ContractError("contrastive_loss: empty batch");
    if (z_img.shape() != z_txt.shape())
        throw ShapeError("contrastive_loss: embedding shapes " + shape_str(z_img.shape()) + " vs " +
                         shape_str(z_txt.shape()));
    if (!(inv_sigma.item() > T(0))) throw ConfigError("contrastive_loss: temperature must be positive");

    Tensor<T> logits = scale(matmul(z_img, transpose(z_txt)), inv_sigma);
    for (const T& v : logits.value())
        if (!std::isfinite(static_cast<double>(v))) throw NumericalError("contrastive_loss: non-finite logits");

    ContrastiveParts<T> parts;
    parts.i2t = detail::diag_mean_neg(log_softmax_rows(logits));
    parts.t2i = detail::diag_mean_neg(log_softmax_rows(transpose(logits)));
    parts.total = scalar_mul(add(parts.i2t, parts.t2i), static_cast<T>(0.5));
    return parts;
}

template <typename T>
ContrastiveParts<T> contrastive_loss(const Tensor<T>& z_img, const Tensor<T>& z_txt, T sigma) {
    if (!(sigma > T(0))) throw ConfigError("contrastive_loss: sigma must be positive");
    return contrastive_loss(z_img, z_txt, Tensor<T>::scalar(T(1) / sigma));
}

// Row-stochastic map of patch rows onto the batch text features (Eq. 8 form:
// softmax over scaled cosines).
template <typename T>
Tensor<T> patch_text_distribution(const Tensor<T>& patch_rows, const Tensor<T>& z_txt, T tau) {
    if (!(tau > T(0))) throw ConfigError("patch_text_distribution: tau must be positive");
    if (patch_rows.cols() != z_txt.cols())
        throw ShapeError("patch_text_distribution: embedding widths differ (" + shape_str(patch_rows.shape()) +
                         " vs " + shape_str(z_txt.shape()) + ")");
    return softmax_rows(scalar_mul(matmul(patch_rows, transpose(z_txt)), T(1) / tau));
}

// Batch indices whose image ranks its own caption first in image-to-text
// matching; exact ties break toward the diagonal. Pure value computation,
// no gradient.
template <typename T>
std::vector<size_t> matched_set(const Tensor<T>& z_img, const Tensor<T>& z_txt) {
    if (z_img.shape() != z_txt.shape())
        throw ShapeError("matched_set: embedding shapes differ");
    const size_t B = z_img.rows(), D = z_img.cols();
    std::vector<size_t> matched;
    for (size_t i = 0; i < B; ++i) {
        const T* zi = z_img.value().data() + i * D;
        T best = -std::numeric_limits<T>::infinity();
        T diag = 0;
        for (size_t j = 0; j < B; ++j) {
            const T* zj = z_txt.value().data() + j * D;
            T sim = 0;
            for (size_t d = 0; d < D; ++d) sim += zi[d] * zj[d];
            if (j == i) diag = sim;
            best = std::max(best, sim);
        }
        if (diag >= best) matched.push_back(i);
    }
    return matched;
}

namespace detail {

template <typename T>
void check_plans_share_m(const std::vector<MaskPlan>& plans) {
    if (plans.empty()) return;
    for (const auto& p : plans)
        if (p.n_masked() != plans.front().n_masked())
            throw ContractError("reconstruction loss: per-image plans must share |M|");
}

[[noreturn]] inline void throw_recon_nonfinite(size_t image, size_t patch) {
    throw NumericalError("reconstruction loss non-finite at image " + std::to_string(image) + ", patch " +
                         std::to_string(patch));
}

// Soft cross-entropy between the stop-gradient target distribution p and the
// prediction distribution q, averaged over contributing images and masked
// positions.
template <typename T>
Tensor<T> soft_ce_recon(const std::vector<Tensor<T>>& target_rows, const std::vector<Tensor<T>>& pred_rows,
                        const Tensor<T>& prototypes_or_text, const std::vector<MaskPlan>& plans,
                        const std::vector<size_t>& contributing, T tau_target, T tau_pred) {
    if (!(tau_target > T(0)) || !(tau_pred > T(0)))
        throw ConfigError("reconstruction loss: temperatures must be positive");
    check_plans_share_m<T>(plans);
    const size_t m = plans.empty() ? 0 : plans.front().n_masked();
    if (contributing.empty() || m == 0) return Tensor<T>::scalar(T(0));

    Tensor<T> zt_t = transpose(prototypes_or_text);
    Tensor<T> acc;
    for (size_t i : contributing) {
        const auto& masked = plans[i].masked_idx;
        Tensor<T> p = stop_gradient(
            softmax_rows(scalar_mul(matmul(gather_rows(target_rows[i], masked), zt_t), T(1) / tau_target)));
        Tensor<T> log_q =
            log_softmax_rows(scalar_mul(matmul(gather_rows(pred_rows[i], masked), zt_t), T(1) / tau_pred));
        Tensor<T> term = sum_all(mul(p, log_q));
        if (!std::isfinite(static_cast<double>(term.item()))) {
            for (size_t k = 0; k < m; ++k) {
                for (size_t c = 0; c < p.cols(); ++c) {
                    const double pv = static_cast<double>(p.at(k, c));
                    const double qv = static_cast<double>(log_q.at(k, c));
                    if (!std::isfinite(pv) || !std::isfinite(pv * qv)) throw_recon_nonfinite(i, masked[k]);
                }
            }
            throw_recon_nonfinite(i, plans[i].masked_idx[0]);
        }
        acc = acc.defined() ? add(acc, term) : term;
    }
    const T norm = -T(1) / (static_cast<T>(contributing.size()) * static_cast<T>(m));
    return scalar_mul(acc, norm);
}

}  // namespace detail

// Eq.-9-style reconstruction in language space: targets from the full-image
// encoder under stop-gradient, predictions from the decoder, both mapped to
// distributions over the batch text features.
template <typename T>
Tensor<T> reconstruction_loss_language(const std::vector<Tensor<T>>& f_proj, const std::vector<Tensor<T>>& g_proj,
                                       const Tensor<T>& z_txt, const std::vector<MaskPlan>& plans,
                                       const std::vector<size_t>& matched, T tau_target, T tau_pred) {
    return detail::soft_ce_recon(f_proj, g_proj, z_txt, plans, matched, tau_target, tau_pred);
}

// Raw-pixel ablation: per-element MSE of the pixel head's prediction against
// the patchified input, masked positions only, averaged over batch, masked
// patches, and patch elements.
template <typename T>
Tensor<T> reconstruction_loss_pixel(const std::vector<Tensor<T>>& decoded_feats, const std::vector<Image>& images,
                                    const std::vector<MaskPlan>& plans, const LinearLayer<T>& pixel_head,
                                    size_t patch_size) {
    detail::check_plans_share_m<T>(plans);
    const size_t B = decoded_feats.size();
    const size_t m = plans.empty() ? 0 : plans.front().n_masked();
    if (B == 0 || m == 0) return Tensor<T>::scalar(T(0));

    Tensor<T> acc;
    size_t patch_dim = 0;
    for (size_t i = 0; i < B; ++i) {
        const auto& masked = plans[i].masked_idx;
        Tensor<T> pred = gather_rows(linear(pixel_head, decoded_feats[i]), masked);
        Tensor<T> target = gather_rows(patchify<T>(images[i], patch_size), masked);
        patch_dim = target.cols();
        Tensor<T> diff = sub(pred, target);
        Tensor<T> term = sum_all(mul(diff, diff));
        acc = acc.defined() ? add(acc, term) : term;
    }
    return scalar_mul(acc, T(1) / static_cast<T>(B * m * patch_dim));
}

// Learnable-prototype ablation: text features replaced by a re-normalized
// prototype bank; every image contributes (no text matching exists here).
template <typename T>
Tensor<T> reconstruction_loss_prototype(const std::vector<Tensor<T>>& f_proj, const std::vector<Tensor<T>>& g_proj,
                                        const Tensor<T>& prototypes, const std::vector<MaskPlan>& plans,
                                        T tau_target, T tau_pred) {
    std::vector<size_t> all(f_proj.size());
    std::iota(all.begin(), all.end(), size_t{0});
    return detail::soft_ce_recon(f_proj, g_proj, l2_normalize_rows(prototypes), plans, all, tau_target, tau_pred);
}

// ---------------------------------------------------------------------------
// Total objective
// ---------------------------------------------------------------------------

template <typename T>
struct TotalLossResult {
    Tensor<T> loss;
    LossBreakdown parts;
};

template <typename T>
TotalLossResult<T> total_loss(const RilsModel<T>& model, const ImageTextBatch& batch,
                              const std::vector<MaskPlan>& plans, const RunConfig& cfg) {
    const size_t B = batch.size();
    if (B == 0) throw ContractError("total_loss: empty batch");
    if (batch.tokens.size() != B) throw ContractError("total_loss: image/token counts differ");

    std::vector<EncodedImage<T>> encs;
    encs.reserve(B);
    std::vector<Tensor<T>> globals, texts;
    for (size_t i = 0; i < B; ++i) {
        encs.push_back(vision_encode_full(model, batch.images[i]));
        globals.push_back(encs.back().global);
        texts.push_back(language_encode(model, batch.tokens[i]));
    }
    Tensor<T> z_img = concat_rows(globals);
    Tensor<T> z_txt = concat_rows(texts);

    ContrastiveParts<T> contra = contrastive_loss(z_img, z_txt, exp(model.logit_scale));
    const std::vector<size_t> matched = matched_set(z_img, z_txt);

    std::vector<size_t> all(B);
    std::iota(all.begin(), all.end(), size_t{0});

    const bool recon_active = cfg.reconstruction_space != ReconSpace::kNone && cfg.lambda2 != 0.0;
    Tensor<T> l_recon = Tensor<T>::scalar(T(0));
    if (recon_active) {
        if (plans.size() != B) throw ContractError("total_loss: one mask plan per image required");
        std::vector<Tensor<T>> f_proj, g_proj, g_feats;
        for (size_t i = 0; i < B; ++i) {
            Tensor<T> visible = vision_encode_masked(model, batch.images[i], plans[i]);
            DecodedImage<T> dec = vision_decode(model, visible, plans[i]);
            f_proj.push_back(encs[i].projected_patches);
            g_proj.push_back(dec.projected_patches);
            g_feats.push_back(dec.decoded_feats);
        }
        switch (cfg.reconstruction_space) {
            case ReconSpace::kLanguage:
                l_recon = reconstruction_loss_language(f_proj, g_proj, z_txt, plans,
                                                       cfg.matched_filter ? matched : all,
                                                       static_cast<T>(cfg.tau_target), static_cast<T>(cfg.tau_pred));
                break;
            case ReconSpace::kPixel:
                l_recon = reconstruction_loss_pixel(g_feats, batch.images, plans, model.pixel_head, cfg.patch_size);
                break;
            case ReconSpace::kPrototype:
                l_recon = reconstruction_loss_prototype(f_proj, g_proj, model.prototypes, plans,
                                                        static_cast<T>(cfg.tau_target), static_cast<T>(cfg.tau_pred));
                break;
            case ReconSpace::kNone: break;
        }
    }

    TotalLossResult<T> result;
    result.loss = add(scalar_mul(contra.total, static_cast<T>(cfg.lambda1)),
                      scalar_mul(l_recon, static_cast<T>(cfg.lambda2)));
    result.parts.l_contra = static_cast<double>(contra.total.item());
    result.parts.l_recon = static_cast<double>(l_recon.item());
    result.parts.l_total = static_cast<double>(result.loss.item());
    result.parts.l_i2t = static_cast<double>(contra.i2t.item());
    result.parts.l_t2i = static_cast<double>(contra.t2i.item());
    result.parts.matched_fraction = static_cast<double>(matched.size()) / static_cast<double>(B);
    return result;
}

// Convenience wrapper that draws the per-image masks itself.
template <typename T>
TotalLossResult<T> total_loss(const RilsModel<T>& model, const ImageTextBatch& batch, const RunConfig& cfg,
                              Rng& rng) {
    std::vector<MaskPlan> plans;
    const bool recon_active = cfg.reconstruction_space != ReconSpace::kNone && cfg.lambda2 != 0.0;
    if (recon_active) {
        plans.reserve(batch.size());
        for (size_t i = 0; i < batch.size(); ++i)
            plans.push_back(sample_mask(cfg.n_patches(), cfg.mask_ratio, rng));
    }
    return total_loss(model, batch, plans, cfg);
}

}  // namespace rils
