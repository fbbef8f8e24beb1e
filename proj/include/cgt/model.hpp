#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "cgt/rng.hpp"
#include "cgt/tensor.hpp"

namespace cgt {

enum class MixNonlin { tanh_mode, softmax_mode };
enum class InputMode { token, continuous };

// Dual-stream transformer. Layers 1..readout_layer carry both an x stream
// (blind to y) and a y stream (reads both); the y stream is read out after
// layer readout_layer and drives low-rank weight modulators for the two
// sublayers of every layer above it. Modulator slot k for layer v
// (1-based, v > readout_layer): k = 2*(v - readout_layer - 1) + 1 for the
// attention input, k + 1 for the MLP input.
struct ModelConfig {
    int n_layers = 4;       // L
    int readout_layer = 2;  // in [1, n_layers - 1]
    int dim_x = 64;
    int dim_y = 32;
    int heads_x = 4;
    int heads_y = 2;
    int mlp_mult = 4;
    int rank = 4;         // r: rank of each generated weight delta
    int n_templates = 8;  // M: mixture size of the template bank
    MixNonlin mixing = MixNonlin::tanh_mode;
    int vocab_size = 16;
    int max_seq_len = 64;
    InputMode input_mode = InputMode::token;
    int d_in = 0;   // continuous mode input width (padded into the x slot)
    int d_out = 0;  // continuous mode readout width
    bool vae_mode = false;

    int n_slots() const { return 2 * (n_layers - readout_layer); }
    // Width of the y residual stream; vae_mode doubles it to carry (mu, pre-sigma).
    int dim_y_stream() const { return vae_mode ? 2 * dim_y : dim_y; }
    int inner_x() const { return mlp_mult * dim_x; }
    int inner_y() const { return mlp_mult * dim_y_stream(); }
    int head_width() const { return input_mode == InputMode::token ? vocab_size : d_out; }
    void validate() const;  // throws ShapeError on violation
};

// Owns every trainable tensor under a stable dotted name. Registry order is
// fixed by construction, so checkpoints and optimizer state line up across
// runs of the same config.
template <class S>
class Model {
public:
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    const std::vector<Node<S>*>& params() const { return ptrs_; }
    const std::vector<std::string>& names() const { return names_; }
    Node<S>* param(const std::string& name) const;  // throws on unknown name
    bool has_param(const std::string& name) const;
    int64_t n_scalars() const;

    void init_weights(Rng& rng);  // normal(0, 0.02), scaled residual projections

private:
    Node<S>* add(std::vector<int> shape, const std::string& name);

    ModelConfig cfg_;
    std::vector<std::unique_ptr<Node<S>>> store_;
    std::vector<Node<S>*> ptrs_;
    std::vector<std::string> names_;
    std::unordered_map<std::string, size_t> index_;
};

struct TokenBatch {
    int batch = 0;
    int seq = 0;
    std::vector<int> ids;  // row-major [batch, seq]
};

template <class S>
struct VecBatch {
    int batch = 0;
    int seq = 0;
    int width = 0;          // <= dim_x; zero-padded into the x slot
    std::vector<S> vals;    // row-major [batch, seq, width]
};

template <class S>
struct ForwardOpts {
    // When set, the whole stage-1 y pathway is skipped and this node feeds
    // the modulators instead. Shape [B,1,dim_y] (constant per sequence,
    // broadcast over time) or [B,seq,dim_y] (per position). Must live in the
    // same graph as the forward call.
    Node<S>* override_y = nullptr;
    int pos_offset = 0;  // positional-embedding offset for suffix runs
    // vae_mode only: noise for the reparameterized sample, length
    // batch*seq*dim_y; null means eps = 0 (deterministic run on mu).
    const std::vector<S>* vae_eps = nullptr;
    bool record_stage1 = false;  // capture x after embed and after each stage-1 block
};

template <class S>
struct ForwardResult {
    Node<S>* logits = nullptr;  // [B,seq,vocab] or [B,seq,d_out]
    Node<S>* y_read = nullptr;  // modulator input actually used: [B,1,dim_y] or [B,seq,dim_y]
    Node<S>* mu = nullptr;      // vae_mode only, [B,seq,dim_y]
    Node<S>* sigma = nullptr;   // vae_mode only, softplus-positive
    std::vector<Node<S>*> x_stage1;  // filled when record_stage1
    size_t n_ops = 0;                // graph nodes recorded by this call
};

template <class S>
ForwardResult<S> forward(Graph<S>& g, const Model<S>& m, const TokenBatch& batch,
                         const ForwardOpts<S>& opts = {});
template <class S>
ForwardResult<S> forward(Graph<S>& g, const Model<S>& m, const VecBatch<S>& batch,
                         const ForwardOpts<S>& opts = {});

// Wraps an externally supplied context vector as an override node. Accepts
// dim_y (one vector for all sequences), batch*dim_y (one per sequence), or
// batch*seq*dim_y (fully per-position) values; anything else throws.
template <class S>
Node<S>* make_override(Graph<S>& g, const std::vector<S>& y, int batch, int seq, int dim_y);

// Mixing coefficients sig = h(S [y;1]) and the mixed low-rank factors
// L(y) = sum_m sig_m L^m, R(y) = sum_m sig_m R^m for one modulator slot
// (1-based). y_read: [B,t,dim_y] with t = 1 (constant) or t = seq.
template <class S>
struct ModFactors {
    Node<S>* sig = nullptr;   // [B,t,M]
    Node<S>* lmix = nullptr;  // [B,t,dim_x,rank]
    Node<S>* rmix = nullptr;  // [B,t,dim_x+1,rank]
};

template <class S>
ModFactors<S> modulator_factors(Graph<S>& g, const Model<S>& m, Node<S>* y_read, int slot);

// T(x) = x + L(y) (R(y)^T [x;1]), applied per position; factors with t = 1
// broadcast over time.
template <class S>
Node<S>* apply_modulator(Graph<S>& g, Node<S>* xn, const ModFactors<S>& f);

}  // namespace cgt
