#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "rils/train.hpp"

namespace fs = std::filesystem;

namespace rils {

std::vector<size_t> sample_batch_indices(const Dataset& data, const std::vector<size_t>& pool, size_t batch_size,
                                         Rng& rng) {
    if (pool.size() <= batch_size) return pool;

    std::map<int, std::vector<size_t>> by_class;
    bool all_labeled = true;
    for (size_t i : pool) {
        const int c = data.class_id(i);
        if (c < 0) {
            all_labeled = false;
            break;
        }
        by_class[c].push_back(i);
    }

    std::vector<size_t> out;
    out.reserve(batch_size);
    if (all_labeled && by_class.size() >= 2) {
        std::vector<int> classes;
        classes.reserve(by_class.size());
        for (const auto& [c, members] : by_class) classes.push_back(c);
        std::shuffle(classes.begin(), classes.end(), rng);
        for (int c : classes) {
            if (out.size() == batch_size) break;
            const auto& members = by_class[c];
            std::uniform_int_distribution<size_t> pick(0, members.size() - 1);
            out.push_back(members[pick(rng)]);
        }
    }
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    while (out.size() < batch_size) out.push_back(pool[pick(rng)]);
    return out;
}

SyntheticSpec synthetic_spec_for(const RunConfig& cfg) {
    SyntheticSpec spec;
    spec.canvas = cfg.image_size;
    spec.seed = cfg.data_seed;
    return spec;
}

Dataset load_run_dataset(const RunConfig& cfg) {
    const SyntheticSpec spec = synthetic_spec_for(cfg);
    if (cfg.data_dir.empty()) return Dataset::from_pairs(generate_corpus(spec, cfg.data_n));
    return Dataset::from_manifest(cfg.data_dir + "/manifest.tsv", spec);
}

PretrainResult run_pretrain(const RunConfig& cfg, const std::string& out_dir, const std::string& resume_path,
                            bool verbose) {
    cfg.validate();
    fs::create_directories(out_dir);

    Dataset dataset = load_run_dataset(cfg);
    const Tokenizer tok = Tokenizer::for_spec(synthetic_spec_for(cfg), cfg.max_len);
    Trainer<float> trainer(cfg, &dataset, tok);

    size_t start = 1;
    if (!resume_path.empty()) {
        const Checkpoint ckpt = load_checkpoint(resume_path);
        if (ckpt.config_text != cfg.serialize())
            throw ConfigError("resume: checkpoint config does not match the requested config");
        restore_trainer(trainer, ckpt);
        start = ckpt.step + 1;
    }

    {
        std::ofstream cfg_out(out_dir + "/config.resolved.txt");
        if (!cfg_out) throw DataError("pretrain: cannot write config snapshot in " + out_dir);
        cfg_out << cfg.serialize();
    }

    PretrainResult result;
    result.metrics_path = out_dir + "/metrics.jsonl";
    result.checkpoint_path = out_dir + "/checkpoint_final.rils";
    std::ofstream metrics(result.metrics_path,
                          resume_path.empty() ? std::ios::trunc : (std::ios::app | std::ios::out));
    if (!metrics) throw DataError("pretrain: cannot open " + result.metrics_path);

    const Schedule sched = Schedule::from_config(cfg);
    bool first_recorded = start > 1;
    for (size_t s = start; s <= cfg.total_steps; ++s) {
        const LossBreakdown parts = trainer.step(s);
        if (!first_recorded) {
            result.first_total = parts.l_total;
            first_recorded = true;
        }
        metrics << format_metrics_line(s, lr_at(sched, s), parts, static_cast<double>(trainer.model().sigma()))
                << "\n";
        result.final_parts = parts;
        if (verbose && (s % 100 == 0 || s == cfg.total_steps))
            std::fprintf(stderr, "step %zu/%zu  l_total=%.4f  l_contra=%.4f  l_recon=%.4f  matched=%.2f\n", s,
                         cfg.total_steps, parts.l_total, parts.l_contra, parts.l_recon, parts.matched_fraction);
        if (cfg.checkpoint_every != 0 && s % cfg.checkpoint_every == 0 && s != cfg.total_steps)
            save_checkpoint(out_dir + "/checkpoint.rils", snapshot_trainer(trainer));
    }
    metrics.flush();
    save_checkpoint(result.checkpoint_path, snapshot_trainer(trainer));
    return result;
}

}  // namespace rils
