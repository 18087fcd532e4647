#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "rils/harness.hpp"
#include "rils/objectives.hpp"

namespace py = pybind11;
using namespace rils;

namespace {

Tensor<double> tensor2d(const std::vector<std::vector<double>>& rows, const char* what) {
    if (rows.empty()) throw ContractError(std::string(what) + ": empty matrix");
    const size_t d = rows[0].size();
    std::vector<double> flat;
    flat.reserve(rows.size() * d);
    for (const auto& r : rows) {
        if (r.size() != d) throw ShapeError(std::string(what) + ": ragged rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor<double>::from_data({rows.size(), d}, std::move(flat));
}

std::vector<std::vector<double>> rows_of(const Tensor<double>& t) {
    std::vector<std::vector<double>> out(t.rows());
    for (size_t r = 0; r < t.rows(); ++r)
        out[r].assign(t.value().begin() + static_cast<long>(r * t.cols()),
                      t.value().begin() + static_cast<long>((r + 1) * t.cols()));
    return out;
}

MaskPlan plan_of(size_t n_patches, const std::vector<size_t>& masked) {
    MaskPlan p;
    p.n_patches = n_patches;
    p.masked_idx = masked;
    std::sort(p.masked_idx.begin(), p.masked_idx.end());
    for (size_t i = 0; i < n_patches; ++i)
        if (!std::binary_search(p.masked_idx.begin(), p.masked_idx.end(), i)) p.visible_idx.push_back(i);
    p.shuffle_perm.resize(n_patches);
    std::iota(p.shuffle_perm.begin(), p.shuffle_perm.end(), size_t{0});
    p.restore_perm = p.shuffle_perm;
    return p;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Masked visual reconstruction in language semantic space: core operations";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
    py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);

    m.def(
        "sample_mask",
        [](size_t n_patches, double ratio, uint64_t seed) {
            Rng rng = make_rng(seed);
            const MaskPlan p = sample_mask(n_patches, ratio, rng);
            return py::make_tuple(p.masked_idx, p.visible_idx);
        },
        py::arg("n_patches"), py::arg("ratio"), py::arg("seed"),
        "Uniform without-replacement patch mask; returns (masked, visible) index lists");

    m.def(
        "softmax", [](const std::vector<double>& v) {
            return softmax_rows(Tensor<double>::from_data({1, v.size()}, v)).value();
        },
        py::arg("values"));

    m.def(
        "l2_normalize", [](const std::vector<double>& v) {
            return l2_normalize_rows(Tensor<double>::from_data({1, v.size()}, v)).value();
        },
        py::arg("values"));

    m.def(
        "contrastive_loss",
        [](const std::vector<std::vector<double>>& z_img, const std::vector<std::vector<double>>& z_txt,
           double sigma) {
            const ContrastiveParts<double> parts =
                contrastive_loss(tensor2d(z_img, "z_img"), tensor2d(z_txt, "z_txt"), sigma);
            return py::make_tuple(parts.total.item(), parts.i2t.item(), parts.t2i.item());
        },
        py::arg("z_img"), py::arg("z_txt"), py::arg("sigma"),
        "Symmetric InfoNCE over cosine logits; returns (total, i2t, t2i)");

    m.def(
        "patch_text_distribution",
        [](const std::vector<std::vector<double>>& patch_rows, const std::vector<std::vector<double>>& z_txt,
           double tau) {
            return rows_of(patch_text_distribution(tensor2d(patch_rows, "patch_rows"), tensor2d(z_txt, "z_txt"), tau));
        },
        py::arg("patch_rows"), py::arg("z_txt"), py::arg("tau"));

    m.def(
        "matched_set",
        [](const std::vector<std::vector<double>>& z_img, const std::vector<std::vector<double>>& z_txt) {
            return matched_set(tensor2d(z_img, "z_img"), tensor2d(z_txt, "z_txt"));
        },
        py::arg("z_img"), py::arg("z_txt"));

    m.def(
        "reconstruction_loss_language",
        [](const std::vector<std::vector<std::vector<double>>>& f_proj,
           const std::vector<std::vector<std::vector<double>>>& g_proj,
           const std::vector<std::vector<double>>& z_txt, const std::vector<std::vector<size_t>>& masked,
           const std::vector<size_t>& matched, double tau_target, double tau_pred) {
            std::vector<Tensor<double>> f, g;
            std::vector<MaskPlan> plans;
            for (size_t i = 0; i < f_proj.size(); ++i) {
                f.push_back(tensor2d(f_proj[i], "f_proj"));
                g.push_back(tensor2d(g_proj[i], "g_proj"));
                plans.push_back(plan_of(f.back().rows(), masked[i]));
            }
            return reconstruction_loss_language(f, g, tensor2d(z_txt, "z_txt"), plans, matched, tau_target, tau_pred)
                .item();
        },
        py::arg("f_proj"), py::arg("g_proj"), py::arg("z_txt"), py::arg("masked"), py::arg("matched"),
        py::arg("tau_target") = 0.04, py::arg("tau_pred") = 0.1);

    m.def(
        "lr_at",
        [](double base_lr, double min_lr, size_t warmup_steps, size_t total_steps, size_t step) {
            return lr_at(Schedule{base_lr, min_lr, warmup_steps, total_steps}, step);
        },
        py::arg("base_lr"), py::arg("min_lr"), py::arg("warmup_steps"), py::arg("total_steps"), py::arg("step"));

    m.def(
        "tokenize",
        [](const std::string& caption, size_t max_len) {
            SyntheticSpec spec;
            const TokenSequence seq = Tokenizer::for_spec(spec, max_len).encode(caption);
            return py::make_tuple(seq.ids, seq.eot_pos);
        },
        py::arg("caption"), py::arg("max_len") = 16);

    m.def(
        "gen_dataset",
        [](const std::string& out_dir, size_t n, uint64_t seed, size_t size) {
            SyntheticSpec spec;
            spec.canvas = size;
            spec.seed = seed;
            spec.validate();
            write_corpus(generate_corpus(spec, n), out_dir);
        },
        py::arg("out_dir"), py::arg("n"), py::arg("seed") = 1, py::arg("size") = 32);

    m.def(
        "pretrain",
        [](const std::string& config_text, const std::string& out_dir) {
            const RunConfig cfg = config_text.empty() ? RunConfig() : RunConfig::parse(config_text);
            const PretrainResult res = run_pretrain(cfg, out_dir);
            py::dict d;
            d["l_total"] = res.final_parts.l_total;
            d["l_contra"] = res.final_parts.l_contra;
            d["l_recon"] = res.final_parts.l_recon;
            d["matched_fraction"] = res.final_parts.matched_fraction;
            d["checkpoint"] = res.checkpoint_path;
            d["metrics"] = res.metrics_path;
            return d;
        },
        py::arg("config_text") = "", py::arg("out_dir"),
        "Run a full pretraining loop; returns final metrics and artifact paths");

    m.def(
        "zero_shot",
        [](const std::string& ckpt_path) {
            RunConfig cfg;
            const RilsModel<float> model = model_from_checkpoint(load_checkpoint(ckpt_path), cfg);
            const ZeroShotEval res = zero_shot_on_heldout(model, cfg);
            return py::make_tuple(res.accuracy, res.samples, res.classes);
        },
        py::arg("ckpt_path"), "Zero-shot accuracy on the held-out split; returns (accuracy, samples, classes)");

    m.def("gradcheck", [](double h, size_t coords) { return gradcheck_full_loss(h, coords); },
          py::arg("h") = 1e-6, py::arg("coords") = 48,
          "Max relative error of analytic vs central-difference gradients on a 64-bit toy objective");

    m.def("default_config", [] { return RunConfig().serialize(); });
}
