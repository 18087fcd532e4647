#pragma once

#include <cstdint>
#include <string>

namespace rils {

enum class ReconSpace { kLanguage, kPixel, kPrototype, kNone };

std::string to_string(ReconSpace s);
ReconSpace recon_space_from_string(const std::string& s);

// Every knob of a run. Parsed from "key = value" text; unknown keys are
// errors. Defaults are the desk-scale configuration.
struct RunConfig {
    // model
    size_t d_v = 64;
    size_t d_t = 64;
    size_t d_e = 32;
    size_t vision_depth = 2;
    size_t text_depth = 2;
    size_t decoder_depth = 1;
    size_t heads_vision = 4;
    size_t heads_text = 4;
    size_t heads_decoder = 4;
    size_t mlp_ratio = 4;
    size_t patch_size = 8;
    size_t image_size = 32;
    size_t max_len = 16;

    // objectives
    double mask_ratio = 0.75;
    double tau_target = 0.04;  // temperature on the target distribution p
    double tau_pred = 0.1;     // temperature on the prediction distribution q
    double lambda1 = 1.0;
    double lambda2 = 0.5;
    ReconSpace reconstruction_space = ReconSpace::kLanguage;
    bool matched_filter = true;
    double sigma_init = 0.07;
    size_t prototype_k = 64;

    // optimizer / schedule
    size_t batch_size = 16;
    double base_lr = 5e-4;
    double min_lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    double weight_decay = 0.05;
    double grad_clip = 0.0;  // 0 disables clipping
    size_t warmup_steps = 200;
    size_t total_steps = 2000;
    size_t checkpoint_every = 0;  // 0 = final checkpoint only

    // data
    std::string data_dir;  // empty = generate a synthetic corpus in memory
    size_t data_n = 4096;
    uint64_t data_seed = 1;

    uint64_t seed = 42;

    size_t n_patches() const { return (image_size / patch_size) * (image_size / patch_size); }

    void validate() const;
    std::string serialize() const;

    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::string& path);

    // Pre-training values from the full-scale recipe (ViT-B/16 class sizes);
    // selectable for documentation, not runnable at desk scale.
    static RunConfig paper_scale();
};

uint64_t fnv1a_hash(const std::string& text);
std::string config_hash(const RunConfig& cfg);

}  // namespace rils
