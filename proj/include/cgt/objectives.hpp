#pragma once

#include <vector>

#include "cgt/kernels.hpp"
#include "cgt/model.hpp"
#include "cgt/rng.hpp"

namespace cgt {

enum class ZetaProfile { constant, linear, quadratic, last_k };

struct LossConfig {
    double eta = 0.5;  // weight on the main cross-entropy; 1 - eta on the auxiliary loss
    double w_c = 0.08;
    double w_d = 0.04;
    int horizon = 0;  // auxiliary suffix length cap (0: run to the end)
    ZetaProfile zeta = ZetaProfile::constant;
    int zeta_last_k = 2;  // support width for ZetaProfile::last_k
    int aux_samples = 1;  // auxiliary splits averaged per step
    // Re-base suffix positions to 0 (a specialized model never sees the
    // original offset). When false the suffix keeps its original positional
    // rows, which forces one shared split per batch.
    bool rebase_positions = true;
};

struct VaeObjective {
    double beta_y = 1.0;
    KernelSpec kernel;  // prior over y^l trajectories; built at the batch's length
};

// Position weights normalized to mean 1 over n_terms consecutive positions,
// the first of which sits at 1-based sequence position first_pos. last_k
// concentrates all mass uniformly on the final k terms.
std::vector<double> zeta_weights(ZetaProfile prof, int n_terms, int first_pos, int last_k = 2);

// Mean next-token cross-entropy: logits at position t score the token at t+1.
template <class S>
Node<S>* cross_entropy_loss(Graph<S>& g, Node<S>* logits, const TokenBatch& b);

// Masked squared-L2 readout loss for continuous mode, averaged over the
// masked positions.
template <class S>
struct ContinuousBatch {
    VecBatch<S> in;
    std::vector<S> target;  // [batch, seq, d_out]
    std::vector<S> mask;    // [batch, seq]; 1 where the readout is scored
};

// sum_{s>=2} zeta(s) ||n_s - n_{s-1}||^2 on normalized y, averaged over the
// batch; n_s = y_s / (||y_s|| + 1e-12).
template <class S>
Node<S>* reg_continuity(Graph<S>& g, Node<S>* y, ZetaProfile prof, int last_k = 2);

// sum_{s,a,b} zeta(s) (n_s^a . n_s^b - delta_ab)^2 over ordered sequence
// pairs, divided by batch^2 * seq. Batches of one contribute 0 and bump
// *warn_singleton.
template <class S>
Node<S>* reg_orthogonality(Graph<S>& g, Node<S>* y, ZetaProfile prof, int last_k = 2,
                           int* warn_singleton = nullptr);

// Auxiliary freeze-loss at an explicit 1-based split s in [2, seq-1]: the
// context y^l at position s-1 (from the already-built dynamic pass) overrides
// the y pathway for a fresh run on the suffix starting at s, scored by
// next-token cross-entropy. Gradients flow through the gathered context.
template <class S>
Node<S>* auxiliary_loss_at(Graph<S>& g, const Model<S>& m, const TokenBatch& b,
                           const ForwardResult<S>& dyn, int split, const LossConfig& cfg);
template <class S>
Node<S>* auxiliary_loss_at(Graph<S>& g, const Model<S>& m, const ContinuousBatch<S>& b,
                           const ForwardResult<S>& dyn, int split, const LossConfig& cfg);

template <class S>
struct AuxResult {
    Node<S>* loss = nullptr;  // null when every sequence was too short
    int skipped = 0;          // sequences that contributed nothing
    std::vector<int> splits;  // the sampled 1-based split per draw
};

// Samples cfg.aux_samples splits uniformly from (2, n) (or (2, n - horizon])
// and averages auxiliary_loss_at over them. Sequences shorter than the
// minimum contribute 0 with a warning count.
template <class S>
AuxResult<S> auxiliary_loss(Graph<S>& g, const Model<S>& m, const TokenBatch& b,
                            const ForwardResult<S>& dyn, const LossConfig& cfg, Rng& rng);
template <class S>
AuxResult<S> auxiliary_loss(Graph<S>& g, const Model<S>& m, const ContinuousBatch<S>& b,
                            const ForwardResult<S>& dyn, const LossConfig& cfg, Rng& rng);

// Exact Gaussian KL against the GP prior, constants dropped:
// (beta/2) * sum_i [mu_i' K^-1 mu_i + sum_s K^-1_ss sigma_is^2
//                   - sum_s log sigma_is^2], averaged over the batch.
template <class S>
Node<S>* vae_kl_term(Graph<S>& g, Node<S>* mu, Node<S>* sigma, const KernelMatrix& kernel,
                     double beta_y);

// Forward pass with a fresh reparameterization sample per call.
template <class S>
ForwardResult<S> vae_forward(Graph<S>& g, const Model<S>& m, const TokenBatch& b, Rng& rng,
                             ForwardOpts<S> opts = {});

// Distribution-matching penalties over a batch of y trajectories.
// r_p = (1/n) sum_s ||mu_hat_s||^2
//       + (1/n^2) sum_tuples (<dy_si dy_tj> - K_st delta_ij)^2;
// r_d_prime keeps only the same-position (s == t) tuples.
template <class S>
struct DistMatch {
    Node<S>* r_p = nullptr;
    Node<S>* r_d_prime = nullptr;
};

// tuples: flattened (s, t, i, j) quadruples; empty means every combination
// with i == j plus every same-position (i, j) pair, which covers every
// nonzero target plus the same-position cross terms.
template <class S>
DistMatch<S> dist_match_reg(Graph<S>& g, Node<S>* y, const KernelMatrix& kernel,
                            const std::vector<int>& tuples = {});

template <class S>
struct LossParts {
    Node<S>* total = nullptr;
    Node<S>* lce = nullptr;
    Node<S>* laux = nullptr;  // null when eta == 1 or nothing was long enough
    Node<S>* rc = nullptr;    // null when w_c == 0
    Node<S>* rd = nullptr;    // null when w_d == 0
    Node<S>* kl = nullptr;    // null without a VAE objective
    ForwardResult<S> fwd;     // the dynamic pass (y trace, mu/sigma, ...)
    std::vector<int> aux_splits;
    int aux_skipped = 0;
    int singleton_batch = 0;
};

// total = eta*lce + (1-eta)*laux + w_c*rc + w_d*rd (+ kl); each component is
// also exposed individually.
template <class S>
LossParts<S> joint_loss(Graph<S>& g, const Model<S>& m, const TokenBatch& b, const LossConfig& cfg,
                        Rng& rng, const VaeObjective* vae = nullptr);
template <class S>
LossParts<S> joint_loss(Graph<S>& g, const Model<S>& m, const ContinuousBatch<S>& b,
                        const LossConfig& cfg, Rng& rng, const VaeObjective* vae = nullptr);

}  // namespace cgt
