#include "cgt/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include "cgt/config.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace cgt {

namespace {

constexpr uint32_t kMagic = 0x4b544743;  // "CGTK"
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}

void put_str(std::ostream& out, const std::string& s) {
    put_u32(out, uint32_t(s.size()));
    out.write(s.data(), std::streamsize(s.size()));
}

uint32_t get_u32(std::istream& in, const std::string& path) {
    uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4))
        throw ShapeError("checkpoint: truncated file " + path);
    return v;
}

std::string get_str(std::istream& in, const std::string& path, uint32_t cap) {
    const uint32_t n = get_u32(in, path);
    if (n > cap) throw ShapeError("checkpoint: oversized string field in " + path);
    std::string s(n, '\0');
    if (n && !in.read(s.data(), n)) throw ShapeError("checkpoint: truncated file " + path);
    return s;
}

// Tensors only the stage-1 y stream touches; frozen/folded inference runs
// with an externally supplied context, so these can be dropped from
// specialized checkpoints and zero-filled on load.
bool y_stream_only(const std::string& name) {
    return name == "embed.y" || name == "pos.y" ||
           name.find(".attn_y.") != std::string::npos ||
           name.find(".mlp_y.") != std::string::npos ||
           name.find(".ln1y.") != std::string::npos ||
           name.find(".ln2y.") != std::string::npos;
}

template <class S>
bool all_zero(const std::vector<S>& v) {
    for (S x : v)
        if (x != S(0)) return false;
    return true;
}

CheckpointMeta read_meta(std::istream& in, const std::string& path) {
    if (get_u32(in, path) != kMagic)
        throw ShapeError("checkpoint: bad magic in " + path);
    CheckpointMeta meta;
    meta.version = get_u32(in, path);
    if (meta.version != kVersion)
        throw ShapeError("checkpoint: unsupported format version " +
                         std::to_string(meta.version) + " in " + path);
    meta.config = parse_model_config(KvConfig::from_text(get_str(in, path, 1u << 20)));
    meta.specialized = get_u32(in, path) != 0;
    meta.provenance = get_str(in, path, 1u << 20);
    return meta;
}

}  // namespace

template <class S>
void save_checkpoint(const std::string& path, const Model<S>& m, bool specialized,
                     const std::string& provenance, const std::vector<S>* context) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ShapeError("checkpoint: cannot write " + path);
    put_u32(out, kMagic);
    put_u32(out, kVersion);
    put_str(out, serialize_model_config(m.config()));
    put_u32(out, specialized ? 1u : 0u);
    put_str(out, provenance);

    std::vector<std::string> keep;
    for (const auto& name : m.names()) {
        if (specialized && y_stream_only(name)) continue;
        if (specialized && name.rfind("bank.", 0) == 0 && all_zero(m.param(name)->val))
            continue;
        keep.push_back(name);
    }
    put_u32(out, uint32_t(keep.size() + (context ? 1 : 0)));
    std::vector<float> buf;
    auto put_tensor = [&](const std::string& name, const std::vector<int>& shape,
                          const std::vector<S>& val) {
        put_str(out, name);
        put_u32(out, uint32_t(shape.size()));
        for (int d : shape) put_u32(out, uint32_t(d));
        buf.resize(val.size());
        for (size_t i = 0; i < val.size(); ++i) buf[i] = float(val[i]);
        out.write(reinterpret_cast<const char*>(buf.data()),
                  std::streamsize(buf.size() * sizeof(float)));
    };
    for (const auto& name : keep) {
        const Node<S>* p = m.param(name);
        put_tensor(name, p->shape, p->val);
    }
    if (context) put_tensor("context.y", {int(context->size())}, *context);
    if (!out) throw ShapeError("checkpoint: write failed for " + path);
}

template <class S>
LoadedModel<S> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ShapeError("checkpoint: cannot open " + path);
    LoadedModel<S> loaded;
    loaded.meta = read_meta(in, path);
    loaded.model = std::make_unique<Model<S>>(loaded.meta.config);

    const uint32_t n_tensors = get_u32(in, path);
    std::set<std::string> filled;
    std::vector<float> buf;
    for (uint32_t t = 0; t < n_tensors; ++t) {
        const std::string name = get_str(in, path, 1u << 16);
        const uint32_t rank = get_u32(in, path);
        std::vector<uint32_t> dims(rank);
        size_t n_vals = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            dims[d] = get_u32(in, path);
            n_vals *= dims[d];
        }
        if (n_vals > (size_t(1) << 30))
            throw ShapeError("checkpoint: oversized tensor " + name + " in " + path);
        buf.resize(n_vals);
        if (!in.read(reinterpret_cast<char*>(buf.data()),
                     std::streamsize(n_vals * sizeof(float))))
            throw ShapeError("checkpoint: truncated tensor data in " + path);
        if (name == "context.y") {
            if (!loaded.meta.specialized || rank != 1)
                throw ShapeError("checkpoint: unexpected context record in " + path);
            loaded.context.assign(buf.begin(), buf.end());
            continue;
        }
        Node<S>* p = loaded.model->param(name);  // throws on unknown name
        if (rank != p->shape.size())
            throw ShapeError("checkpoint: tensor " + name + " rank mismatch in " + path);
        for (uint32_t d = 0; d < rank; ++d)
            if (int(dims[d]) != p->shape[d])
                throw ShapeError("checkpoint: tensor " + name + " shape mismatch in " + path);
        if (!filled.insert(name).second)
            throw ShapeError("checkpoint: duplicate tensor " + name + " in " + path);
        for (size_t i = 0; i < n_vals; ++i) p->val[i] = S(buf[i]);
    }
    for (const auto& name : loaded.model->names())
        if (!filled.count(name)) {
            // Specialized files legitimately omit y-stream weights and a
            // zeroed bank; those stay at constructor defaults, which keeps
            // frozen and folded inference exact.
            const bool droppable = y_stream_only(name) || name.rfind("bank.", 0) == 0;
            if (!loaded.meta.specialized || !droppable)
                throw ShapeError("checkpoint: missing tensor " + name + " in " + path);
        }
    return loaded;
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ShapeError("checkpoint: cannot open " + path);
    return read_meta(in, path);
}

std::string fnv1a_hex(const void* data, size_t n_bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 14695981039346656037ull;
    for (size_t i = 0; i < n_bytes; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

template void save_checkpoint<float>(const std::string&, const Model<float>&, bool,
                                     const std::string&, const std::vector<float>*);
template void save_checkpoint<double>(const std::string&, const Model<double>&, bool,
                                      const std::string&, const std::vector<double>*);
template LoadedModel<float> load_checkpoint<float>(const std::string&);
template LoadedModel<double> load_checkpoint<double>(const std::string&);

}  // namespace cgt
