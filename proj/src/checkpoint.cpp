#include <cstring>
#include <fstream>

#include "rils/train.hpp"

namespace rils {

namespace {

constexpr char kMagic[4] = {'R', 'I', 'L', 'S'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32s(std::string& out, const std::vector<float>& v) {
    const size_t off = out.size();
    out.resize(off + v.size() * 4);
    std::memcpy(out.data() + off, v.data(), v.size() * 4);
}

struct Reader {
    std::string buf;
    size_t pos = 0;

    [[noreturn]] void fail(const std::string& field) const {
        throw ParseError("checkpoint: truncated reading " + field + " at byte " + std::to_string(pos));
    }

    void need(size_t n, const std::string& field) const {
        if (buf.size() - pos < n) fail(field);
    }

    uint32_t u32(const std::string& field) {
        need(4, field);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }

    uint64_t u64(const std::string& field) {
        need(8, field);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }

    std::string bytes(size_t n, const std::string& field) {
        need(n, field);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }

    std::vector<float> f32s(size_t n, const std::string& field) {
        need(n * 4, field);
        std::vector<float> v(n);
        std::memcpy(v.data(), buf.data() + pos, n * 4);
        pos += n * 4;
        return v;
    }
};

// Guards length fields against tampering before any allocation.
constexpr uint64_t kMaxElements = 1ull << 30;

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u64(out, ckpt.config_text.size());
    out += ckpt.config_text;

    put_u64(out, ckpt.names.size());
    for (size_t i = 0; i < ckpt.names.size(); ++i) {
        put_u64(out, ckpt.names[i].size());
        out += ckpt.names[i];
        put_u32(out, static_cast<uint32_t>(ckpt.shapes[i].size()));
        for (size_t d : ckpt.shapes[i]) put_u64(out, d);
        put_f32s(out, ckpt.values[i]);
    }

    put_u64(out, ckpt.opt_t);
    for (size_t i = 0; i < ckpt.names.size(); ++i) {
        put_f32s(out, ckpt.opt_m[i]);
        put_f32s(out, ckpt.opt_v[i]);
    }
    put_u64(out, ckpt.step);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("checkpoint: cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("checkpoint: short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("checkpoint: cannot open " + path);
    Reader r;
    {
        std::ostringstream ss;
        ss << f.rdbuf();
        r.buf = ss.str();
    }

    const std::string magic = r.bytes(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) throw ParseError("checkpoint: bad magic (want \"RILS\")");
    const uint32_t version = r.u32("version");
    if (version != kVersion)
        throw ParseError("checkpoint: version mismatch (file has " + std::to_string(version) + ", expected " +
                         std::to_string(kVersion) + ")");

    Checkpoint ckpt;
    const uint64_t cfg_len = r.u64("config length");
    ckpt.config_text = r.bytes(cfg_len, "config snapshot");

    const uint64_t n_tensors = r.u64("tensor count");
    if (n_tensors > kMaxElements) throw ParseError("checkpoint: implausible tensor count field");
    for (uint64_t i = 0; i < n_tensors; ++i) {
        const std::string label = "tensor " + std::to_string(i);
        const uint64_t name_len = r.u64(label + " name length");
        if (name_len > 4096) throw ParseError("checkpoint: implausible " + label + " name length field");
        ckpt.names.push_back(r.bytes(name_len, label + " name"));
        const uint32_t rank = r.u32(label + " rank");
        if (rank > 8) throw ParseError("checkpoint: implausible " + label + " rank field");
        Shape shape;
        uint64_t numel = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            const uint64_t ext = r.u64(label + " extent");
            if (ext == 0 || ext > kMaxElements || numel * ext > kMaxElements)
                throw ParseError("checkpoint: implausible " + label + " extent field");
            shape.push_back(ext);
            numel *= ext;
        }
        ckpt.shapes.push_back(shape);
        ckpt.values.push_back(r.f32s(numel, label + " data"));
    }

    ckpt.opt_t = r.u64("optimizer step count");
    for (uint64_t i = 0; i < n_tensors; ++i) {
        const size_t numel = ckpt.values[i].size();
        ckpt.opt_m.push_back(r.f32s(numel, "optimizer m for tensor " + std::to_string(i)));
        ckpt.opt_v.push_back(r.f32s(numel, "optimizer v for tensor " + std::to_string(i)));
    }
    ckpt.step = r.u64("step");
    if (r.pos != r.buf.size()) throw ParseError("checkpoint: trailing bytes after step field");
    return ckpt;
}

Checkpoint snapshot_trainer(Trainer<float>& trainer) {
    Checkpoint ckpt;
    ckpt.config_text = trainer.config().serialize();
    for (auto& p : trainer.parameters()) {
        ckpt.names.push_back(p.name);
        ckpt.shapes.push_back(p.tensor.shape());
        ckpt.values.push_back(p.tensor.value());
    }
    ckpt.opt_t = trainer.optimizer().t;
    ckpt.opt_m = trainer.optimizer().m;
    ckpt.opt_v = trainer.optimizer().v;
    ckpt.step = trainer.completed_steps();
    return ckpt;
}

void restore_trainer(Trainer<float>& trainer, const Checkpoint& ckpt) {
    auto& params = trainer.parameters();
    if (ckpt.names.size() != params.size())
        throw ParseError("checkpoint: tensor count " + std::to_string(ckpt.names.size()) +
                         " does not match model parameter count " + std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        if (ckpt.names[i] != params[i].name)
            throw ParseError("checkpoint: tensor name \"" + ckpt.names[i] + "\" does not match parameter \"" +
                             params[i].name + "\"");
        if (ckpt.shapes[i] != params[i].tensor.shape())
            throw ParseError("checkpoint: shape mismatch for tensor \"" + ckpt.names[i] + "\"");
        params[i].tensor.mutable_value() = ckpt.values[i];
        trainer.optimizer().m[i] = ckpt.opt_m[i];
        trainer.optimizer().v[i] = ckpt.opt_v[i];
    }
    trainer.optimizer().t = ckpt.opt_t;
    trainer.set_completed_steps(ckpt.step);
}

}  // namespace rils
