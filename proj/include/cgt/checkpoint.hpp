#pragma once

#include <memory>
#include <string>

#include "cgt/model.hpp"

namespace cgt {

// Binary model snapshot: versioned header (magic, format version, the model
// config as flat text, specialized flag, provenance string) followed by one
// record per tensor: name length + name + rank + dims + little-endian f32
// data. Save/load round-trips every tensor bit-exactly for float models.
struct CheckpointMeta {
    uint32_t version = 1;
    ModelConfig config;
    bool specialized = false;
    std::string provenance;
};

// Specialized checkpoints drop what frozen/folded inference cannot touch:
// the stage-1 y-stream weights always, and the modulator bank when it is
// all zero (a folded model). They may carry the captured context as an
// extra "context.y" record. The loader leaves dropped tensors at their
// constructor defaults, so a specialized model must be run frozen (with its
// stored context) or folded; plain checkpoints round-trip every tensor.
template <class S>
void save_checkpoint(const std::string& path, const Model<S>& m, bool specialized = false,
                     const std::string& provenance = "",
                     const std::vector<S>* context = nullptr);

template <class S>
struct LoadedModel {
    CheckpointMeta meta;
    std::unique_ptr<Model<S>> model;
    std::vector<S> context;  // "context.y" payload when present
};

template <class S>
LoadedModel<S> load_checkpoint(const std::string& path);

// Header-only read (config and provenance without the tensor payload).
CheckpointMeta read_checkpoint_meta(const std::string& path);

// FNV-1a over arbitrary bytes, hex-encoded; used to stamp specialization
// provenance with a digest of the prefix that produced the context.
std::string fnv1a_hex(const void* data, size_t n_bytes);

}  // namespace cgt
