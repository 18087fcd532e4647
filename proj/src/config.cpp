#include "rils/config.hpp"

#include <cctype>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "rils/errors.hpp"

namespace rils {

std::string to_string(ReconSpace s) {
    switch (s) {
        case ReconSpace::kLanguage: return "language";
        case ReconSpace::kPixel: return "pixel";
        case ReconSpace::kPrototype: return "prototype";
        case ReconSpace::kNone: return "none";
    }
    throw ConfigError("invalid reconstruction space tag");
}

ReconSpace recon_space_from_string(const std::string& s) {
    if (s == "language") return ReconSpace::kLanguage;
    if (s == "pixel") return ReconSpace::kPixel;
    if (s == "prototype") return ReconSpace::kPrototype;
    if (s == "none") return ReconSpace::kNone;
    throw ConfigError("reconstruction_space: unrecognized tag \"" + s +
                      "\" (want language|pixel|prototype|none)");
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": cannot parse \"" + v + "\" as a number");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const unsigned long long u = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return u;
    } catch (const std::exception&) {
        throw ConfigError(key + ": cannot parse \"" + v + "\" as a non-negative integer");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError(key + ": cannot parse \"" + v + "\" as a boolean");
}

}  // namespace

void RunConfig::validate() const {
    auto positive = [](size_t v, const char* name) {
        if (v == 0) throw ConfigError(std::string(name) + ": must be positive");
    };
    positive(d_v, "d_v");
    positive(d_t, "d_t");
    positive(d_e, "d_e");
    positive(vision_depth, "vision_depth");
    positive(text_depth, "text_depth");
    positive(decoder_depth, "decoder_depth");
    positive(heads_vision, "heads_vision");
    positive(heads_text, "heads_text");
    positive(heads_decoder, "heads_decoder");
    positive(mlp_ratio, "mlp_ratio");
    positive(patch_size, "patch_size");
    positive(image_size, "image_size");
    positive(batch_size, "batch_size");
    positive(prototype_k, "prototype_k");
    if (max_len < 2) throw ConfigError("max_len: must be >= 2");
    if (image_size % patch_size != 0)
        throw ConfigError("image_size: " + std::to_string(image_size) + " not divisible by patch_size " +
                          std::to_string(patch_size));
    if (d_v % heads_vision != 0) throw ConfigError("heads_vision: must divide d_v");
    if (d_t % heads_text != 0) throw ConfigError("heads_text: must divide d_t");
    if (d_v % heads_decoder != 0) throw ConfigError("heads_decoder: must divide d_v");
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw ConfigError("mask_ratio: must be in [0,1]");
    if (tau_target <= 0.0) throw ConfigError("tau_target: must be positive");
    if (tau_pred <= 0.0) throw ConfigError("tau_pred: must be positive");
    if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("lambda1/lambda2: must be non-negative");
    if (sigma_init <= 0.0) throw ConfigError("sigma_init: must be positive");
    if (base_lr < 0.0 || min_lr < 0.0) throw ConfigError("base_lr/min_lr: must be non-negative");
    if (min_lr > base_lr) throw ConfigError("min_lr: must not exceed base_lr");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1: must be in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2: must be in [0,1)");
    if (adam_eps <= 0.0) throw ConfigError("eps: must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay: must be non-negative");
    if (grad_clip < 0.0) throw ConfigError("grad_clip: must be non-negative");
    if (warmup_steps >= total_steps) throw ConfigError("warmup_steps: must be < total_steps");
    if (data_dir.empty() && data_n == 0) throw ConfigError("data_n: must be positive for a synthetic corpus");
}

std::string RunConfig::serialize() const {
    std::ostringstream os;
    os << "d_v = " << d_v << "\n";
    os << "d_t = " << d_t << "\n";
    os << "d_e = " << d_e << "\n";
    os << "vision_depth = " << vision_depth << "\n";
    os << "text_depth = " << text_depth << "\n";
    os << "decoder_depth = " << decoder_depth << "\n";
    os << "heads_vision = " << heads_vision << "\n";
    os << "heads_text = " << heads_text << "\n";
    os << "heads_decoder = " << heads_decoder << "\n";
    os << "mlp_ratio = " << mlp_ratio << "\n";
    os << "patch_size = " << patch_size << "\n";
    os << "image_size = " << image_size << "\n";
    os << "max_len = " << max_len << "\n";
    os << "mask_ratio = " << fmt_double(mask_ratio) << "\n";
    os << "tau_target = " << fmt_double(tau_target) << "\n";
    os << "tau_pred = " << fmt_double(tau_pred) << "\n";
    os << "lambda1 = " << fmt_double(lambda1) << "\n";
    os << "lambda2 = " << fmt_double(lambda2) << "\n";
    os << "reconstruction_space = " << to_string(reconstruction_space) << "\n";
    os << "matched_filter = " << (matched_filter ? "true" : "false") << "\n";
    os << "sigma_init = " << fmt_double(sigma_init) << "\n";
    os << "prototype_k = " << prototype_k << "\n";
    os << "batch_size = " << batch_size << "\n";
    os << "base_lr = " << fmt_double(base_lr) << "\n";
    os << "min_lr = " << fmt_double(min_lr) << "\n";
    os << "beta1 = " << fmt_double(beta1) << "\n";
    os << "beta2 = " << fmt_double(beta2) << "\n";
    os << "eps = " << fmt_double(adam_eps) << "\n";
    os << "weight_decay = " << fmt_double(weight_decay) << "\n";
    os << "grad_clip = " << fmt_double(grad_clip) << "\n";
    os << "warmup_steps = " << warmup_steps << "\n";
    os << "total_steps = " << total_steps << "\n";
    os << "checkpoint_every = " << checkpoint_every << "\n";
    os << "data_dir = " << data_dir << "\n";
    os << "data_n = " << data_n << "\n";
    os << "data_seed = " << data_seed << "\n";
    os << "seed = " << seed << "\n";
    return os.str();
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::set<std::string> seen;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected \"key = value\", got \"" + line + "\"");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (!seen.insert(key).second)
            throw ConfigError("line " + std::to_string(lineno) + ": duplicate key \"" + key + "\"");

        if (key == "d_v") cfg.d_v = parse_u64(key, val);
        else if (key == "d_t") cfg.d_t = parse_u64(key, val);
        else if (key == "d_e") cfg.d_e = parse_u64(key, val);
        else if (key == "vision_depth") cfg.vision_depth = parse_u64(key, val);
        else if (key == "text_depth") cfg.text_depth = parse_u64(key, val);
        else if (key == "decoder_depth") cfg.decoder_depth = parse_u64(key, val);
        else if (key == "heads_vision") cfg.heads_vision = parse_u64(key, val);
        else if (key == "heads_text") cfg.heads_text = parse_u64(key, val);
        else if (key == "heads_decoder") cfg.heads_decoder = parse_u64(key, val);
        else if (key == "mlp_ratio") cfg.mlp_ratio = parse_u64(key, val);
        else if (key == "patch_size") cfg.patch_size = parse_u64(key, val);
        else if (key == "image_size") cfg.image_size = parse_u64(key, val);
        else if (key == "max_len") cfg.max_len = parse_u64(key, val);
        else if (key == "mask_ratio") cfg.mask_ratio = parse_double(key, val);
        else if (key == "tau_target") cfg.tau_target = parse_double(key, val);
        else if (key == "tau_pred") cfg.tau_pred = parse_double(key, val);
        else if (key == "lambda1") cfg.lambda1 = parse_double(key, val);
        else if (key == "lambda2") cfg.lambda2 = parse_double(key, val);
        else if (key == "reconstruction_space") cfg.reconstruction_space = recon_space_from_string(val);
        else if (key == "matched_filter") cfg.matched_filter = parse_bool(key, val);
        else if (key == "sigma_init") cfg.sigma_init = parse_double(key, val);
        else if (key == "prototype_k") cfg.prototype_k = parse_u64(key, val);
        else if (key == "batch_size") cfg.batch_size = parse_u64(key, val);
        else if (key == "base_lr") cfg.base_lr = parse_double(key, val);
        else if (key == "min_lr") cfg.min_lr = parse_double(key, val);
        else if (key == "beta1") cfg.beta1 = parse_double(key, val);
        else if (key == "beta2") cfg.beta2 = parse_double(key, val);
        else if (key == "eps") cfg.adam_eps = parse_double(key, val);
        else if (key == "weight_decay") cfg.weight_decay = parse_double(key, val);
        else if (key == "grad_clip") cfg.grad_clip = parse_double(key, val);
        else if (key == "warmup_steps") cfg.warmup_steps = parse_u64(key, val);
        else if (key == "total_steps") cfg.total_steps = parse_u64(key, val);
        else if (key == "checkpoint_every") cfg.checkpoint_every = parse_u64(key, val);
        else if (key == "data_dir") cfg.data_dir = val;
        else if (key == "data_n") cfg.data_n = parse_u64(key, val);
        else if (key == "data_seed") cfg.data_seed = parse_u64(key, val);
        else if (key == "seed") cfg.seed = parse_u64(key, val);
        else throw ConfigError("line " + std::to_string(lineno) + ": unknown key \"" + key + "\"");
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

RunConfig RunConfig::paper_scale() {
    RunConfig cfg;
    cfg.d_v = 768;
    cfg.d_t = 512;
    cfg.d_e = 512;
    cfg.vision_depth = 12;
    cfg.text_depth = 12;
    cfg.decoder_depth = 1;
    cfg.heads_vision = 12;
    cfg.heads_text = 8;
    cfg.heads_decoder = 12;
    cfg.mlp_ratio = 4;
    cfg.patch_size = 16;
    cfg.image_size = 224;
    cfg.max_len = 77;
    cfg.mask_ratio = 0.75;
    cfg.tau_target = 0.04;
    cfg.tau_pred = 0.1;
    cfg.lambda1 = 1.0;
    cfg.lambda2 = 0.5;
    cfg.batch_size = 4096;
    cfg.base_lr = 5e-4;
    cfg.min_lr = 1e-5;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.98;
    cfg.weight_decay = 0.5;
    return cfg;
}

uint64_t fnv1a_hash(const std::string& text) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string config_hash(const RunConfig& cfg) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, fnv1a_hash(cfg.serialize()));
    return buf;
}

}  // namespace rils
