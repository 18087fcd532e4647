#pragma once

#include <string>
#include <vector>

#include "rils/config.hpp"
#include "rils/eval.hpp"
#include "rils/train.hpp"

namespace rils {

// Run-level protocol glue shared by the CLI, the ablation grid, and the
// acceptance suite. Everything here operates on float models and the
// synthetic corpus configuration embedded in RunConfig.

// Builds a model whose parameters come from a checkpoint; the config is the
// checkpoint's embedded snapshot.
RilsModel<float> model_from_checkpoint(const Checkpoint& ckpt, RunConfig& cfg_out);
void apply_checkpoint_params(RilsModel<float>& model, const Checkpoint& ckpt);

struct HeldoutData {
    std::vector<Image> images;
    std::vector<int> labels;
    std::vector<std::string> captions;
    std::vector<std::string> class_names;
    std::vector<std::string> templates;
    size_t n_classes = 0;
};

HeldoutData heldout_data(const RunConfig& cfg);

struct ZeroShotEval {
    double accuracy = 0.0;
    size_t samples = 0;
    size_t classes = 0;
};

ZeroShotEval zero_shot_on_heldout(const RilsModel<float>& model, const RunConfig& cfg);

struct ProbeEval {
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<double> per_seed;
    size_t shots = 0;
    size_t heldout = 0;
};

ProbeEval probe_on_heldout(const RilsModel<float>& model, const RunConfig& cfg, size_t shots, size_t n_seeds,
                           uint64_t seed0);

RetrievalResult retrieval_on_heldout(const RilsModel<float>& model, const RunConfig& cfg,
                                     const std::vector<size_t>& ks, size_t& gallery_out);

// One row of an ablation grid: the varied value plus end-of-run metrics.
struct AblationCell {
    std::string label;
    double zero_shot = 0.0;
    double probe10 = 0.0;
    double l_total = 0.0;
    double l_contra = 0.0;
    double l_recon = 0.0;
    double matched_fraction = 0.0;
};

// Axes follow the hyperparameter studies: reconstruction space
// {language, pixel, prototype}, mask ratio {0.60, 0.75, 0.90}, loss ratio
// {2:1, 1:1, 1:2}, decoder depth {1, 2, 4}.
std::vector<RunConfig> ablation_grid(const std::string& axis, const RunConfig& base);
std::string ablation_label(const std::string& axis, const RunConfig& cfg);

AblationCell run_ablation_cell(const std::string& axis, const RunConfig& cfg, const std::string& out_dir,
                               bool verbose);
std::vector<AblationCell> run_ablation_axis(const std::string& axis, const RunConfig& base,
                                            const std::string& out_dir, bool verbose);
std::string ablation_table(const std::string& axis, const std::vector<AblationCell>& cells);

// Central-difference sweep of the full training objective (language space,
// matched filter on) on a 64-bit toy model. Returns the max relative error.
// max_coords_per_param = 0 sweeps every coordinate.
double gradcheck_full_loss(double h, size_t max_coords_per_param, uint64_t seed = 99);

}  // namespace rils
