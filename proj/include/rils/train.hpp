#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "rils/config.hpp"
#include "rils/data.hpp"
#include "rils/errors.hpp"
#include "rils/model.hpp"
#include "rils/objectives.hpp"
#include "rils/tensor.hpp"

namespace rils {

// ---------------------------------------------------------------------------
// Learning-rate schedule: linear warmup from zero, then cosine decay to
// min_lr. Continuous at the warmup boundary; lr(total_steps) == min_lr.
// ---------------------------------------------------------------------------

struct Schedule {
    double base_lr = 5e-4;
    double min_lr = 1e-5;
    size_t warmup_steps = 200;
    size_t total_steps = 2000;

    static Schedule from_config(const RunConfig& cfg) {
        return {cfg.base_lr, cfg.min_lr, cfg.warmup_steps, cfg.total_steps};
    }
};

inline double lr_at(const Schedule& s, size_t step) {
    if (step > s.total_steps)
        throw ContractError("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                            std::to_string(s.total_steps));
    if (s.warmup_steps >= s.total_steps) throw ContractError("lr_at: warmup_steps must be < total_steps");
    if (step <= s.warmup_steps)
        return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    const double progress = static_cast<double>(step - s.warmup_steps) /
                            static_cast<double>(s.total_steps - s.warmup_steps);
    return s.min_lr + 0.5 * (1.0 + std::cos(M_PI * progress)) * (s.base_lr - s.min_lr);
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and bias correction. Decay is skipped
// for parameters flagged no_decay (layer-norm gains/offsets, biases,
// logit_scale). Parameters whose grad buffer was never touched are skipped
// entirely, so disabled branches stay frozen.
// ---------------------------------------------------------------------------

template <typename T>
struct AdamWState {
    T beta1 = static_cast<T>(0.9);
    T beta2 = static_cast<T>(0.98);
    T eps = static_cast<T>(1e-8);
    T weight_decay = static_cast<T>(0.05);
    uint64_t t = 0;
    std::vector<std::vector<T>> m, v;

    template <typename P>
    static AdamWState init(const std::vector<P>& params, T b1, T b2, T eps_, T wd) {
        AdamWState st;
        st.beta1 = b1;
        st.beta2 = b2;
        st.eps = eps_;
        st.weight_decay = wd;
        st.m.reserve(params.size());
        st.v.reserve(params.size());
        for (const auto& p : params) {
            st.m.emplace_back(p.tensor.numel(), T(0));
            st.v.emplace_back(p.tensor.numel(), T(0));
        }
        return st;
    }

    static AdamWState from_config(const std::vector<NamedParam<T>>& params, const RunConfig& cfg) {
        return init(params, static_cast<T>(cfg.beta1), static_cast<T>(cfg.beta2), static_cast<T>(cfg.adam_eps),
                    static_cast<T>(cfg.weight_decay));
    }
};

template <typename T>
void adamw_step(std::vector<NamedParam<T>>& params, AdamWState<T>& st, T lr) {
    if (params.size() != st.m.size()) throw ContractError("adamw_step: state does not match parameter list");
    if (lr < T(0)) throw ContractError("adamw_step: negative learning rate");
    st.t += 1;
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(st.beta1), static_cast<double>(st.t)));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(st.beta2), static_cast<double>(st.t)));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        if (!p.tensor.has_grad()) continue;
        const auto& g = p.tensor.grad();
        auto& x = p.tensor.mutable_value();
        auto& m = st.m[pi];
        auto& v = st.v[pi];
        const T wd = p.no_decay ? T(0) : st.weight_decay;
        for (size_t i = 0; i < x.size(); ++i) {
            if (!std::isfinite(static_cast<double>(g[i])))
                throw NumericalError("adamw_step: non-finite gradient in parameter \"" + p.name + "\"");
            m[i] = st.beta1 * m[i] + (T(1) - st.beta1) * g[i];
            v[i] = st.beta2 * v[i] + (T(1) - st.beta2) * g[i] * g[i];
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            x[i] -= lr * (mhat / (std::sqrt(vhat) + st.eps)) + lr * wd * x[i];
        }
    }
}

template <typename T>
void clip_global_norm(std::vector<NamedParam<T>>& params, T max_norm) {
    double sq = 0.0;
    for (auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (const T& g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm <= static_cast<double>(max_norm)) return;
    const T scale = static_cast<T>(static_cast<double>(max_norm) / norm);
    for (auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        auto node = p.tensor.node();
        for (auto& g : node->grad) g *= scale;
    }
}

// Keeps 1/sigma at or below 100 after every step.
template <typename T>
void clamp_logit_scale(RilsModel<T>& model) {
    const T cap = static_cast<T>(std::log(100.0));
    auto& v = model.logit_scale.mutable_value();
    if (v[0] > cap) v[0] = cap;
}

// ---------------------------------------------------------------------------
// Metrics: one line-delimited record per step, fixed key order.
// ---------------------------------------------------------------------------

inline std::string format_metrics_line(size_t step, double lr, const LossBreakdown& parts, double sigma) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "{\"step\":%zu,\"lr\":%.17g,\"l_contra\":%.17g,\"l_recon\":%.17g,\"l_total\":%.17g,"
                  "\"matched_fraction\":%.17g,\"sigma\":%.17g}",
                  step, lr, parts.l_contra, parts.l_recon, parts.l_total, parts.matched_fraction, sigma);
    return buf;
}

// Batch index sampler. Duplicate captions inside a batch act as false
// negatives for the contrastive loss (the image cannot rank its own caption
// above an identical or paraphrased one), so when every pool sample carries a
// parsable class the sampler draws at most one instance per class while
// classes remain; slots beyond the class count fall back to uniform draws.
std::vector<size_t> sample_batch_indices(const Dataset& data, const std::vector<size_t>& pool, size_t batch_size,
                                         Rng& rng);

// ---------------------------------------------------------------------------
// Trainer: owns the model, optimizer state, and split indices. Every draw a
// step makes comes from an RNG derived from (seed, step), so a resumed run
// replays identically.
// ---------------------------------------------------------------------------

template <typename T = float>
class Trainer {
public:
    Trainer(const RunConfig& cfg, const Dataset* data, Tokenizer tok)
        : cfg_(cfg),
          data_(data),
          tok_(std::move(tok)),
          model_(RilsModel<T>::init(cfg, tok_.vocab_size())),
          params_(model_.parameters()),
          opt_(AdamWState<T>::from_config(params_, cfg)),
          schedule_(Schedule::from_config(cfg)),
          train_idx_(data->train_indices()) {
        if (train_idx_.empty()) throw DataError("trainer: training split is empty");
    }

    // Runs one optimization step (1-based index), returns its losses.
    LossBreakdown step(size_t step_index) {
        if (step_index == 0 || step_index > cfg_.total_steps)
            throw ContractError("trainer: step index " + std::to_string(step_index) + " outside [1, total_steps]");
        Rng rng = make_rng(derive_seed(cfg_.seed, 0x57e9), step_index);

        std::vector<size_t> idx = sample_batch_indices(*data_, train_idx_, cfg_.batch_size, rng);
        AugmentConfig aug;
        aug.enabled = true;
        ImageTextBatch batch = make_batch(*data_, idx, tok_, aug, rng);

        std::vector<MaskPlan> plans;
        const bool recon_active = cfg_.reconstruction_space != ReconSpace::kNone && cfg_.lambda2 != 0.0;
        if (recon_active)
            for (size_t i = 0; i < batch.size(); ++i)
                plans.push_back(sample_mask(cfg_.n_patches(), cfg_.mask_ratio, rng));

        TotalLossResult<T> res = total_loss(model_, batch, plans, cfg_);
        if (!std::isfinite(res.parts.l_total)) {
            char msg[256];
            std::snprintf(msg, sizeof(msg),
                          "training aborted at step %zu: non-finite loss (l_contra=%g, l_recon=%g)", step_index,
                          res.parts.l_contra, res.parts.l_recon);
            throw NumericalError(msg);
        }

        for (auto& p : params_) p.tensor.zero_grad();
        backward(res.loss);
        if (cfg_.grad_clip > 0.0) clip_global_norm(params_, static_cast<T>(cfg_.grad_clip));
        adamw_step(params_, opt_, static_cast<T>(lr_at(schedule_, step_index)));
        clamp_logit_scale(model_);
        completed_ = step_index;
        return res.parts;
    }

    const RunConfig& config() const { return cfg_; }
    RilsModel<T>& model() { return model_; }
    std::vector<NamedParam<T>>& parameters() { return params_; }
    AdamWState<T>& optimizer() { return opt_; }
    const Schedule& schedule() const { return schedule_; }
    uint64_t completed_steps() const { return completed_; }
    void set_completed_steps(uint64_t s) { completed_ = s; }
    const Tokenizer& tokenizer() const { return tok_; }
    const Dataset& dataset() const { return *data_; }

private:
    RunConfig cfg_;
    const Dataset* data_;
    Tokenizer tok_;
    RilsModel<T> model_;
    std::vector<NamedParam<T>> params_;
    AdamWState<T> opt_;
    Schedule schedule_;
    std::vector<size_t> train_idx_;
    uint64_t completed_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints (bit-exact): magic "RILS", version, config snapshot, named
// tensors, optimizer moments, completed step count. 32-bit little-endian
// payload throughout.
// ---------------------------------------------------------------------------

struct Checkpoint {
    std::string config_text;
    std::vector<std::string> names;
    std::vector<Shape> shapes;
    std::vector<std::vector<float>> values;
    uint64_t opt_t = 0;
    std::vector<std::vector<float>> opt_m, opt_v;
    uint64_t step = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint snapshot_trainer(Trainer<float>& trainer);
void restore_trainer(Trainer<float>& trainer, const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Full pretraining run: builds the corpus, trains, writes the resolved
// config, per-step metrics, and the final checkpoint into out_dir.
// ---------------------------------------------------------------------------

struct PretrainResult {
    LossBreakdown final_parts;
    double first_total = 0.0;
    std::string checkpoint_path;
    std::string metrics_path;
};

SyntheticSpec synthetic_spec_for(const RunConfig& cfg);
Dataset load_run_dataset(const RunConfig& cfg);

PretrainResult run_pretrain(const RunConfig& cfg, const std::string& out_dir, const std::string& resume_path = "",
                            bool verbose = false);

}  // namespace rils
