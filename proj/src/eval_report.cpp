#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "rils/eval.hpp"

namespace rils {

std::string EvalReport::serialize() const {
    std::ostringstream os;
    os << "protocol = " << protocol << "\n";
    os << "config_hash = " << config_hash << "\n";
    for (const auto& [k, v] : counts) os << "count." << k << " = " << v << "\n";
    char buf[48];
    for (const auto& [k, v] : metrics) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        os << "metric." << k << " = " << buf << "\n";
    }
    return os.str();
}

EvalReport EvalReport::parse(const std::string& text) {
    EvalReport r;
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const size_t eq = line.find(" = ");
        if (eq == std::string::npos)
            throw ParseError("eval report line " + std::to_string(lineno) + ": expected \"key = value\"");
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 3);
        if (key == "protocol") r.protocol = val;
        else if (key == "config_hash") r.config_hash = val;
        else if (key.rfind("count.", 0) == 0) r.counts.emplace_back(key.substr(6), std::stoull(val));
        else if (key.rfind("metric.", 0) == 0) r.metrics.emplace_back(key.substr(7), std::stod(val));
        else throw ParseError("eval report line " + std::to_string(lineno) + ": unknown key \"" + key + "\"");
    }
    return r;
}

void EvalReport::write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("eval report: cannot open " + path);
    out << serialize();
}

EvalReport EvalReport::read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("eval report: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string EvalReport::table() const {
    size_t width = 8;
    for (const auto& [k, v] : metrics) width = std::max(width, k.size());
    for (const auto& [k, v] : counts) width = std::max(width, k.size());
    std::ostringstream os;
    os << protocol << " (config " << config_hash << ")\n";
    char buf[64];
    for (const auto& [k, v] : counts) {
        os << "  " << k << std::string(width - k.size() + 2, ' ') << v << "\n";
    }
    for (const auto& [k, v] : metrics) {
        std::snprintf(buf, sizeof(buf), "%.4f", v);
        os << "  " << k << std::string(width - k.size() + 2, ' ') << buf << "\n";
    }
    return os.str();
}

std::vector<size_t> low_shot_sample(const Dataset& data, const std::vector<size_t>& pool, size_t n_per_class,
                                    Rng& rng) {
    std::map<int, std::vector<size_t>> by_class;
    for (size_t i : pool) {
        const int c = data.class_id(i);
        if (c >= 0) by_class[c].push_back(i);
    }
    std::vector<size_t> out;
    for (auto& [cls, members] : by_class) {
        if (members.size() < n_per_class)
            throw DataError("low_shot_sample: class " + std::to_string(cls) + " has only " +
                            std::to_string(members.size()) + " samples, need " + std::to_string(n_per_class));
        std::vector<size_t> pick;
        pick.reserve(n_per_class);
        std::sample(members.begin(), members.end(), std::back_inserter(pick), n_per_class, rng);
        out.insert(out.end(), pick.begin(), pick.end());
    }
    return out;
}

}  // namespace rils
