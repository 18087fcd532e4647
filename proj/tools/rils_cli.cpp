#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "rils/harness.hpp"

namespace fs = std::filesystem;
using namespace rils;

namespace {

RunConfig load_config_or_defaults(const std::string& path, bool paper_scale) {
    RunConfig cfg = paper_scale ? RunConfig::paper_scale() : RunConfig();
    if (!path.empty()) {
        if (paper_scale) throw ConfigError("--paper-scale cannot be combined with --config");
        cfg = RunConfig::load(path);
    }
    cfg.validate();
    return cfg;
}

int cmd_gen_data(const std::string& out, size_t n, uint64_t seed, size_t size) {
    SyntheticSpec spec;
    spec.canvas = size;
    spec.seed = seed;
    spec.validate();
    write_corpus(generate_corpus(spec, n), out);
    std::printf("wrote %zu pairs (%zu classes, %zux%zu) to %s\n", n, spec.n_classes(), size, size, out.c_str());
    return 0;
}

int cmd_pretrain(const std::string& config_path, const std::string& out, const std::string& resume,
                 bool paper_scale, bool quiet) {
    const RunConfig cfg = load_config_or_defaults(config_path, paper_scale);
    const PretrainResult res = run_pretrain(cfg, out, resume, !quiet);
    std::printf("done: %zu steps, l_total=%.4f matched=%.2f\n", cfg.total_steps, res.final_parts.l_total,
                res.final_parts.matched_fraction);
    std::printf("checkpoint: %s\nmetrics: %s\n", res.checkpoint_path.c_str(), res.metrics_path.c_str());
    return 0;
}

RilsModel<float> load_model(const std::string& ckpt_path, RunConfig& cfg_out) {
    return model_from_checkpoint(load_checkpoint(ckpt_path), cfg_out);
}

// Evaluation commands read the data location from the flag, not the
// checkpoint, so a model can be scored against any compatible corpus.
RunConfig cfg_with_data(RunConfig cfg, const std::string& data_dir) {
    if (!data_dir.empty()) cfg.data_dir = data_dir;
    return cfg;
}

int cmd_eval_zeroshot(const std::string& ckpt, const std::string& data_dir, const std::string& out_path) {
    RunConfig cfg;
    const RilsModel<float> model = load_model(ckpt, cfg);
    cfg = cfg_with_data(cfg, data_dir);
    const ZeroShotEval res = zero_shot_on_heldout(model, cfg);

    EvalReport report;
    report.protocol = "zero_shot";
    report.config_hash = config_hash(cfg);
    report.counts = {{"samples", res.samples}, {"classes", res.classes}};
    report.metrics = {{"accuracy", res.accuracy}, {"chance", 1.0 / static_cast<double>(res.classes)}};
    if (!out_path.empty()) report.write(out_path);
    std::fputs(report.table().c_str(), stdout);
    return 0;
}

int cmd_eval_probe(const std::string& ckpt, const std::string& data_dir, size_t shots, size_t seeds,
                   const std::string& out_path) {
    RunConfig cfg;
    const RilsModel<float> model = load_model(ckpt, cfg);
    cfg = cfg_with_data(cfg, data_dir);
    const ProbeEval res = probe_on_heldout(model, cfg, shots, seeds, cfg.seed + 1);

    EvalReport report;
    report.protocol = "linear_probe";
    report.config_hash = config_hash(cfg);
    report.counts = {{"shots_per_class", shots}, {"seeds", seeds}, {"heldout", res.heldout}};
    report.metrics = {{"accuracy_mean", res.mean}, {"accuracy_std", res.stddev}};
    for (size_t i = 0; i < res.per_seed.size(); ++i)
        report.metrics.emplace_back("accuracy_seed" + std::to_string(i), res.per_seed[i]);
    if (!out_path.empty()) report.write(out_path);
    std::fputs(report.table().c_str(), stdout);
    return 0;
}

int cmd_eval_retrieval(const std::string& ckpt, const std::string& data_dir, std::vector<size_t> ks,
                       const std::string& out_path) {
    RunConfig cfg;
    const RilsModel<float> model = load_model(ckpt, cfg);
    cfg = cfg_with_data(cfg, data_dir);
    size_t gallery = 0;
    if (ks.empty()) ks = {1, 5, 10};
    const RetrievalResult res = retrieval_on_heldout(model, cfg, ks, gallery);

    EvalReport report;
    report.protocol = "retrieval";
    report.config_hash = config_hash(cfg);
    report.counts = {{"gallery", gallery}};
    for (const auto& [k, v] : res.i2t) report.metrics.emplace_back("i2t_recall@" + std::to_string(k), v);
    for (const auto& [k, v] : res.t2i) report.metrics.emplace_back("t2i_recall@" + std::to_string(k), v);
    if (!out_path.empty()) report.write(out_path);
    std::fputs(report.table().c_str(), stdout);
    return 0;
}

int cmd_ablate(const std::string& axis, const std::string& config_path, const std::string& out, size_t steps,
               uint64_t seed, bool quiet) {
    RunConfig base = load_config_or_defaults(config_path, false);
    if (steps != 0) {
        base.total_steps = steps;
        base.warmup_steps = std::max<size_t>(1, steps / 10);
    }
    if (seed != 0) base.seed = seed;
    const auto cells = run_ablation_axis(axis, base, out, !quiet);
    const std::string table = ablation_table(axis, cells);
    std::fputs(table.c_str(), stdout);
    fs::create_directories(out);
    std::ofstream(out + "/ablation_" + axis + ".txt") << table;
    return 0;
}

int cmd_gradcheck(double h, size_t max_coords) {
    const double err = gradcheck_full_loss(h, max_coords);
    std::printf("gradcheck: max relative error %.3e (h=%g)\n", err, h);
    return err < 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked visual reconstruction in language semantic space: pretraining and evaluation"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic image-text corpus (PPM files + manifest)");
    std::string gen_out;
    size_t gen_n = 4096, gen_size = 32;
    uint64_t gen_seed = 1;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--n", gen_n, "Number of pairs");
    gen->add_option("--seed", gen_seed, "Generator seed");
    gen->add_option("--size", gen_size, "Canvas size in pixels");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "Run a full pretraining loop");
    std::string pre_cfg, pre_out, pre_resume;
    bool pre_paper = false, pre_quiet = false;
    pre->add_option("--config", pre_cfg, "Config file (key = value lines)");
    pre->add_option("--out", pre_out, "Run directory")->required();
    pre->add_option("--resume", pre_resume, "Checkpoint to resume from");
    pre->add_flag("--paper-scale", pre_paper, "Use the full-scale architecture and optimizer values");
    pre->add_flag("--quiet", pre_quiet, "Suppress progress lines");

    // eval-zeroshot
    auto* ezs = app.add_subcommand("eval-zeroshot", "Zero-shot classification on the held-out split");
    std::string ezs_ckpt, ezs_data, ezs_out;
    ezs->add_option("--ckpt", ezs_ckpt, "Checkpoint file")->required();
    ezs->add_option("--data", ezs_data, "Corpus directory (defaults to the checkpoint's data settings)");
    ezs->add_option("--out", ezs_out, "Write the report to this file");

    // eval-probe
    auto* epr = app.add_subcommand("eval-probe", "Low-shot linear probe on frozen features");
    std::string epr_ckpt, epr_data, epr_out;
    size_t epr_shots = 10, epr_seeds = 3;
    epr->add_option("--ckpt", epr_ckpt, "Checkpoint file")->required();
    epr->add_option("--data", epr_data, "Corpus directory");
    epr->add_option("--shots", epr_shots, "Labeled images per class");
    epr->add_option("--seeds", epr_seeds, "Number of sampling seeds");
    epr->add_option("--out", epr_out, "Write the report to this file");

    // eval-retrieval
    auto* ert = app.add_subcommand("eval-retrieval", "Image-text retrieval recall@k");
    std::string ert_ckpt, ert_data, ert_out;
    std::vector<size_t> ert_ks;
    ert->add_option("--ckpt", ert_ckpt, "Checkpoint file")->required();
    ert->add_option("--data", ert_data, "Corpus directory");
    ert->add_option("--ks", ert_ks, "Recall cutoffs")->delimiter(',');
    ert->add_option("--out", ert_out, "Write the report to this file");

    // ablate
    auto* abl = app.add_subcommand("ablate", "Run a hyperparameter grid and print a comparison table");
    std::string abl_axis, abl_cfg, abl_out = "ablation";
    size_t abl_steps = 600;
    uint64_t abl_seed = 0;
    bool abl_quiet = false;
    abl->add_option("--axis", abl_axis, "space | mask-ratio | lambda | decoder-depth")->required();
    abl->add_option("--config", abl_cfg, "Base config file");
    abl->add_option("--out", abl_out, "Output directory");
    abl->add_option("--steps", abl_steps, "Training steps per cell (0 = config value)");
    abl->add_option("--seed", abl_seed, "Override the training seed (0 = config value)");
    abl->add_flag("--quiet", abl_quiet, "Suppress progress lines");

    // gradcheck
    auto* grc = app.add_subcommand("gradcheck", "Finite-difference check of the full objective at 64-bit");
    double grc_h = 1e-6;
    size_t grc_coords = 0;
    grc->add_option("--fd-step", grc_h, "Central-difference step");
    grc->add_option("--coords", grc_coords, "Sampled coordinates per parameter (0 = all)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_out, gen_n, gen_seed, gen_size);
        if (pre->parsed()) return cmd_pretrain(pre_cfg, pre_out, pre_resume, pre_paper, pre_quiet);
        if (ezs->parsed()) return cmd_eval_zeroshot(ezs_ckpt, ezs_data, ezs_out);
        if (epr->parsed()) return cmd_eval_probe(epr_ckpt, epr_data, epr_shots, epr_seeds, epr_out);
        if (ert->parsed()) return cmd_eval_retrieval(ert_ckpt, ert_data, ert_ks, ert_out);
        if (abl->parsed()) return cmd_ablate(abl_axis, abl_cfg, abl_out, abl_steps, abl_seed, abl_quiet);
        if (grc->parsed()) return cmd_gradcheck(grc_h, grc_coords);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
