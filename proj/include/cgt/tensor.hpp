#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgt {

// Thrown on malformed shapes / invalid op arguments. Message carries the op
// name and the offending shapes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

std::string shape_str(const std::vector<int>& shape);
int64_t shape_numel(const std::vector<int>& shape);

// One value in the compute graph. Leaves (parameters, constants) are owned by
// their creator; interior nodes are owned by the Graph that recorded them.
template <class S>
struct Node {
    std::vector<int> shape;
    std::vector<S> val;
    std::vector<S> grad;  // allocated during backward
    bool requires_grad = false;
    bool leaf = true;
    std::string name;

    // graph bookkeeping
    int64_t id = -1;  // tape index, -1 for leaves
    uint64_t tag = 0;
    std::vector<Node*> parents;
    std::function<void(Node&)> backfn;

    int64_t numel() const { return int64_t(val.size()); }
    S* data() { return val.data(); }
    const S* data() const { return val.data(); }
    S* gptr() { return grad.data(); }
    void ensure_grad() {
        grad.assign(val.size(), S(0));
    }
    S scalar() const {
        if (val.size() != 1) throw ShapeError("scalar(): tensor has shape " + shape_str(shape));
        return val[0];
    }
};

template <class S>
std::unique_ptr<Node<S>> make_param(std::vector<int> shape, std::string name) {
    auto n = std::make_unique<Node<S>>();
    n->shape = std::move(shape);
    n->val.assign(size_t(shape_numel(n->shape)), S(0));
    n->requires_grad = true;
    n->name = std::move(name);
    return n;
}

// Records ops in execution order; backward walks the tape in reverse
// topological order visiting each reachable node exactly once. Calling
// backward twice without re-recording yields identical gradients (grads of
// every reachable node, leaves included, are zeroed first).
template <class S>
class Graph {
public:
    using N = Node<S>*;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    size_t num_ops() const { return tape_.size(); }
    void reset();

    // ---- node creation ----
    N input(const std::vector<int>& shape);                        // zero-filled, no grad
    N constant(const std::vector<int>& shape, const S* data);      // copies data, no grad
    N constant(const std::vector<int>& shape, const std::vector<S>& data);

    // ---- core ops ----
    N matmul(N a, N b);                       // [m,k]x[k,n] -> [m,n]
    N linear(N x, N w, N b);                  // [B,s,k]x[k,n](+ [n]) -> [B,s,n]; b may be null
    N add(N a, N b);                          // same shape
    N sub(N a, N b);
    N mul(N a, N b);
    N scale(N a, S c);
    N add_pos(N x, N table, int offset);      // x[B,s,d] + table[offset+t, :]
    N reshape(N x, std::vector<int> shape);   // same numel, new view (copies)
    N concat_last(N a, N b);
    N slice_last(N a, int start, int len);
    N slice_time(N a, int start, int len);    // [B,s,d] -> [B,len,d]
    N transpose(N a);                         // 2-d
    N softmax_last(N a, bool causal = false); // causal requires trailing [.., s, s]
    N layer_norm(N x, N gain, N bias);        // normalizes last dim
    N gelu(N x);
    N tanh_(N x);
    N exp_(N x);
    N log_(N x);
    N sqrt_(N x);
    N softplus(N x);
    N square(N x);
    N sum_all(N x);                           // -> [1]
    N mean_all(N x);                          // -> [1]
    N sum_last(N x);                          // [..., d] -> [...]
    N embedding(N table, const std::vector<int>& ids, int batch, int seq);
    N cross_entropy_logits(N logits, const std::vector<int>& targets,
                           const std::vector<S>& mask);            // -> [1]
    N sq_l2_loss(N pred, const std::vector<S>& target,
                 const std::vector<S>& mask);                      // -> [1]
    N causal_mha(N q, N k, N v, int heads);   // q,k,v: [B,s,H*hd]

    // ---- modulator / regularizer helpers ----
    N append_ones(N x);                                   // [B,s,d] -> [B,s,d+1]
    N mix_templates(N sig, N bank);                       // [B,t,M] x [M,p,r] -> [B,t,p,r]
    N pos_matvec(N m, N v);                               // [B,t,p,r] x [B,s,r] -> [B,s,p]
    N pos_matvec_t(N m, N v);                             // [B,t,p,r] x [B,s,p] -> [B,s,r]
    N gather_time(N x, const std::vector<int>& idx);      // [B,s,d] -> [B,d]
    N l2_normalize(N x, S eps = S(1e-12));                // rows of last dim
    N pair_dots_minus_delta(N n);                         // [B,s,d] -> [B,B,s]
    N gp_quad_form(N mu, const std::vector<S>& k_inv);    // [B,s,d], [s*s] -> [1]
    N weighted_sum_time(N x, const std::vector<S>& w);    // [B,s,d], [s] -> [1]
    N weighted_sum_last(N x, const std::vector<S>& w);    // [..., t], [t] -> [1]
    N mean_batch(N x);                                    // [B,s,d] -> [1,s,d]
    N sub_bcast_batch(N a, N b);                          // [B,s,d] - [1,s,d]
    // For tuples (s,t,i,j): sum_q ((1/B) sum_b x[b,s,i]*x[b,t,j] - target_q)^2.
    N cov_match(N x, const std::vector<int>& tuples, const std::vector<S>& targets);

    // ---- autodiff ----
    void backward(N loss);

private:
    N fresh(std::vector<int> shape, std::vector<N> parents);
    std::vector<std::unique_ptr<Node<S>>> tape_;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace cgt
