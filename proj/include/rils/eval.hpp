#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "rils/config.hpp"
#include "rils/data.hpp"
#include "rils/errors.hpp"
#include "rils/model.hpp"
#include "rils/objectives.hpp"
#include "rils/tensor.hpp"
#include "rils/train.hpp"

namespace rils {

// ---------------------------------------------------------------------------
// EvalReport: named metric values plus sample counts, serializable as plain
// text and printable as an aligned table.
// ---------------------------------------------------------------------------

struct EvalReport {
    std::string protocol;
    std::vector<std::pair<std::string, double>> metrics;
    std::vector<std::pair<std::string, size_t>> counts;
    std::string config_hash;

    std::string serialize() const;
    static EvalReport parse(const std::string& text);
    void write(const std::string& path) const;
    static EvalReport read(const std::string& path);
    std::string table() const;
};

// ---------------------------------------------------------------------------
// Embedding helpers (gradient-free; the model is never mutated).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embed_images(const RilsModel<T>& m, const std::vector<Image>& images) {
    NoGradGuard ng;
    std::vector<Tensor<T>> rows;
    rows.reserve(images.size());
    for (const auto& img : images) rows.push_back(vision_encode_full(m, img).global);
    return concat_rows(rows);
}

template <typename T>
Tensor<T> embed_texts(const RilsModel<T>& m, const std::vector<std::string>& captions, const Tokenizer& tok) {
    NoGradGuard ng;
    std::vector<Tensor<T>> rows;
    rows.reserve(captions.size());
    for (const auto& c : captions) rows.push_back(language_encode(m, tok.encode(c)));
    return concat_rows(rows);
}

// Mean-pooled pre-projection features, one row per requested sample.
template <typename T>
Tensor<T> probe_features(const RilsModel<T>& m, const Dataset& data, const std::vector<size_t>& idx) {
    NoGradGuard ng;
    std::vector<Tensor<T>> rows;
    rows.reserve(idx.size());
    for (size_t i : idx) rows.push_back(pooled_vision_feature(m, data.image(i)));
    return concat_rows(rows);
}

// ---------------------------------------------------------------------------
// Zero-shot classification: prompt-averaged text prototypes, cosine argmax.
// ---------------------------------------------------------------------------

struct ZeroShotResult {
    double accuracy = 0.0;
    std::vector<int> predictions;
};

template <typename T>
ZeroShotResult zero_shot_classify(const RilsModel<T>& m, const std::vector<Image>& images,
                                  const std::vector<int>& labels, const std::vector<std::string>& class_names,
                                  const std::vector<std::string>& templates, const Tokenizer& tok) {
    if (class_names.size() < 2) throw ContractError("zero_shot_classify: need at least 2 classes");
    if (templates.empty()) throw ContractError("zero_shot_classify: need at least one template");
    if (images.size() != labels.size()) throw ContractError("zero_shot_classify: image/label counts differ");
    NoGradGuard ng;

    std::vector<Tensor<T>> protos;
    protos.reserve(class_names.size());
    for (const auto& name : class_names) {
        std::vector<std::string> prompts;
        for (const auto& t : templates) {
            std::string p = t;
            const size_t at = p.find("{}");
            if (at == std::string::npos) throw ConfigError("zero_shot_classify: template lacks {}: " + t);
            p.replace(at, 2, name);
            prompts.push_back(std::move(p));
        }
        protos.push_back(l2_normalize_rows(mean_axis(embed_texts(m, prompts, tok), 0)));
    }
    Tensor<T> prototypes = concat_rows(protos);  // K x D_e

    ZeroShotResult res;
    res.predictions.reserve(images.size());
    size_t correct = 0;
    const size_t K = class_names.size(), D = prototypes.cols();
    for (size_t i = 0; i < images.size(); ++i) {
        Tensor<T> z = embed_images(m, {images[i]});
        int best = 0;
        T best_sim = -std::numeric_limits<T>::infinity();
        for (size_t k = 0; k < K; ++k) {
            T sim = 0;
            for (size_t d = 0; d < D; ++d) sim += z.value()[d] * prototypes.value()[k * D + d];
            if (sim > best_sim) {  // ties keep the lowest class index
                best_sim = sim;
                best = static_cast<int>(k);
            }
        }
        res.predictions.push_back(best);
        if (best == labels[i]) ++correct;
    }
    res.accuracy = images.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(images.size());
    return res;
}

// ---------------------------------------------------------------------------
// Low-shot sampling: exactly n per class, uniform without replacement.
// ---------------------------------------------------------------------------

std::vector<size_t> low_shot_sample(const Dataset& data, const std::vector<size_t>& pool, size_t n_per_class,
                                    Rng& rng);

// ---------------------------------------------------------------------------
// Linear probe: multinomial logistic regression on frozen features, trained
// with the library's own optimizer, best held-out accuracy over an lr grid.
// ---------------------------------------------------------------------------

struct ProbeConfig {
    std::vector<double> lr_grid = {0.3, 0.1, 0.03, 0.01};
    size_t steps = 300;
};

template <typename T>
double classify_accuracy(const Tensor<T>& logits, const std::vector<int>& labels) {
    size_t correct = 0;
    const size_t n = logits.rows(), k = logits.cols();
    for (size_t i = 0; i < n; ++i) {
        size_t best = 0;
        for (size_t j = 1; j < k; ++j)
            if (logits.value()[i * k + j] > logits.value()[i * k + best]) best = j;
        if (static_cast<int>(best) == labels[i]) ++correct;
    }
    return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n);
}

template <typename T>
double linear_probe(const Tensor<T>& train_x, const std::vector<int>& train_y, const Tensor<T>& held_x,
                    const std::vector<int>& held_y, const ProbeConfig& pc = {}) {
    if (train_x.rows() != train_y.size()) throw ContractError("linear_probe: feature/label counts differ");
    int max_label = -1;
    for (int y : train_y) max_label = std::max(max_label, y);
    const size_t k = static_cast<size_t>(max_label) + 1;
    {
        std::vector<bool> seen(k, false);
        size_t distinct = 0;
        for (int y : train_y) {
            if (y < 0) throw ContractError("linear_probe: negative label");
            if (!seen[static_cast<size_t>(y)]) {
                seen[static_cast<size_t>(y)] = true;
                ++distinct;
            }
        }
        if (distinct < 2) throw ContractError("linear_probe: labels must span at least 2 classes");
    }

    const size_t n = train_x.rows(), d = train_x.cols();
    std::vector<T> onehot_buf(n * k, T(0));
    for (size_t i = 0; i < n; ++i) onehot_buf[i * k + static_cast<size_t>(train_y[i])] = T(1);
    Tensor<T> onehot = Tensor<T>::from_data({n, k}, std::move(onehot_buf));
    Tensor<T> x = Tensor<T>::from_data(train_x.shape(), train_x.value());

    double best_acc = 0.0;
    for (double lr : pc.lr_grid) {
        Tensor<T> w = Tensor<T>::zeros({d, k}, true);
        Tensor<T> b = Tensor<T>::zeros({1, k}, true);
        std::vector<NamedParam<T>> params = {{"probe.w", w, false}, {"probe.b", b, true}};
        AdamWState<T> opt = AdamWState<T>::init(params, static_cast<T>(0.9), static_cast<T>(0.98),
                                                static_cast<T>(1e-8), T(0));
        for (size_t s = 0; s < pc.steps; ++s) {
            Tensor<T> lp = log_softmax_rows(add_row(matmul(x, w), b));
            Tensor<T> loss = scalar_mul(sum_all(mul(lp, onehot)), -T(1) / static_cast<T>(n));
            w.zero_grad();
            b.zero_grad();
            backward(loss);
            adamw_step(params, opt, static_cast<T>(lr));
        }
        NoGradGuard ng;
        Tensor<T> held_logits = add_row(matmul(held_x, w), b);
        best_acc = std::max(best_acc, classify_accuracy(held_logits, held_y));
    }
    return best_acc;
}

// ---------------------------------------------------------------------------
// Image-text retrieval: recall@k both directions, ties resolved by gallery
// index.
// ---------------------------------------------------------------------------

struct RetrievalResult {
    std::vector<std::pair<size_t, double>> i2t;  // (k, recall)
    std::vector<std::pair<size_t, double>> t2i;
};

template <typename T>
RetrievalResult retrieval_recall(const Tensor<T>& z_img, const Tensor<T>& z_txt, const std::vector<size_t>& ks) {
    if (z_img.shape() != z_txt.shape()) throw ShapeError("retrieval_recall: embedding shapes differ");
    const size_t B = z_img.rows(), D = z_img.cols();
    for (size_t k : ks)
        if (k == 0 || k > B)
            throw ContractError("retrieval_recall: k=" + std::to_string(k) + " outside [1, gallery size " +
                                std::to_string(B) + "]");

    auto ranks = [&](const Tensor<T>& query, const Tensor<T>& gallery) {
        std::vector<size_t> out(B);
        for (size_t i = 0; i < B; ++i) {
            const T* qi = query.value().data() + i * D;
            std::vector<T> sims(B);
            for (size_t j = 0; j < B; ++j) {
                const T* gj = gallery.value().data() + j * D;
                T s = 0;
                for (size_t d = 0; d < D; ++d) s += qi[d] * gj[d];
                sims[j] = s;
            }
            size_t rank = 1;
            for (size_t j = 0; j < B; ++j) {
                if (j == i) continue;
                if (sims[j] > sims[i] || (sims[j] == sims[i] && j < i)) ++rank;
            }
            out[i] = rank;
        }
        return out;
    };

    const std::vector<size_t> r_i2t = ranks(z_img, z_txt);
    const std::vector<size_t> r_t2i = ranks(z_txt, z_img);
    RetrievalResult res;
    for (size_t k : ks) {
        const auto at_k = [&](const std::vector<size_t>& r) {
            size_t hit = 0;
            for (size_t v : r) hit += (v <= k) ? 1 : 0;
            return static_cast<double>(hit) / static_cast<double>(B);
        };
        res.i2t.emplace_back(k, at_k(r_i2t));
        res.t2i.emplace_back(k, at_k(r_t2i));
    }
    return res;
}

}  // namespace rils
