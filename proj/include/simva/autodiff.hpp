#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "simva/tensor.hpp"

namespace simva::ag {

class Tape;
struct Node;
using NodePtr = std::shared_ptr<Node>;

// One tensor in a define-by-run computation graph. Creation order on the
// tape is a topological order, so reverse-mode sweeps run the tape backwards.
struct Node {
    Tensor value;
    Tensor grad; // allocated on first accumulation during backward
    bool requires_grad = false;
    std::string label;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;
    Tape* tape = nullptr;
    size_t index = 0;

    Tensor& ensure_grad();
};

class Tape {
public:
    NodePtr constant(Tensor v, std::string label = "const");
    // Leaf whose gradient is wanted (parameters, or inputs under test).
    NodePtr leaf(Tensor v, std::string label);

    NodePtr emplace(Tensor v, std::string label, std::vector<NodePtr> parents,
                    std::function<void(Node&)> backward_fn);

    // Reverse sweep from a scalar loss; accumulates into node.grad of every
    // reachable node with requires_grad.
    void backward(const NodePtr& loss);

    const std::vector<NodePtr>& nodes() const { return nodes_; }

    // First node (in creation order) holding a non-finite value, or null.
    const Node* first_nonfinite() const;

private:
    std::vector<NodePtr> nodes_;
};

// ---- elementwise ----
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr divide(const NodePtr& a, const NodePtr& b);
NodePtr add_scalar(const NodePtr& a, double c);
NodePtr mul_scalar(const NodePtr& a, double c);
NodePtr neg(const NodePtr& a);
NodePtr exp_op(const NodePtr& a);
NodePtr log_op(const NodePtr& a);
NodePtr sqrt_op(const NodePtr& a);
NodePtr rsqrt(const NodePtr& a);
NodePtr square(const NodePtr& a);
NodePtr tanh_op(const NodePtr& a);
NodePtr sigmoid(const NodePtr& a);
NodePtr silu(const NodePtr& a);
NodePtr gelu(const NodePtr& a);
NodePtr softplus(const NodePtr& a);

// ---- structure ----
NodePtr broadcast_to(const NodePtr& a, const Shape& target);
NodePtr reduce_sum(const NodePtr& a, std::vector<int64_t> axes, bool keepdims);
NodePtr reduce_mean(const NodePtr& a, std::vector<int64_t> axes, bool keepdims);
NodePtr reshape(const NodePtr& a, Shape shape);
NodePtr permute(const NodePtr& a, std::vector<int64_t> perm);
NodePtr slice(const NodePtr& a, int64_t axis, int64_t start, int64_t len);
NodePtr concat(const std::vector<NodePtr>& parts, int64_t axis);
NodePtr gather_rows(const NodePtr& a, std::vector<int64_t> idx);

// ---- linear algebra ----
NodePtr matmul(const NodePtr& a, const NodePtr& b);            // [m,k] x [k,n]
NodePtr bmm(const NodePtr& a, const NodePtr& b);               // [...,m,k] x [...,k,n]
NodePtr linear(const NodePtr& x, const NodePtr& w, const NodePtr& b); // x[...,in], w[in,out], b[out] or null

// ---- reductions over the last axis ----
NodePtr softmax_lastdim(const NodePtr& a);
NodePtr logsumexp_lastdim(const NodePtr& a); // drops the last axis (scalar -> shape {1})

// ---- convolutions ----
// x [B,Cin,H,W], k [kh,kw,Cin,Cout], bias [Cout] (may be null), zero padding p.
NodePtr conv2d(const NodePtr& x, const NodePtr& k, const NodePtr& bias, int64_t pad);
// x [B,T,E], w [E,K], bias [E]; causal left padding of K-1 zeros.
NodePtr conv1d_depthwise_causal(const NodePtr& x, const NodePtr& w, const NodePtr& bias);

// ---- selective state-space scan ----
// u,dt [B,L,E]; A [E,N]; Bc,Cc [B,L,N]; D [E]  ->  y [B,L,E]
// h_t = exp(dt*A) * h_{t-1} + dt*B_t*u_t ; y_t = C_t . h_t + D*u_t
NodePtr selective_scan(const NodePtr& u, const NodePtr& dt, const NodePtr& A,
                       const NodePtr& Bc, const NodePtr& Cc, const NodePtr& D);

// ---- composites ----
NodePtr layer_norm_lastdim(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta, double eps);
NodePtr rms_norm_lastdim(const NodePtr& x, const NodePtr& scale, double eps);
// logits: 1-D [n]; returns scalar shape {1}.
NodePtr cross_entropy_1d(const NodePtr& logits, int64_t target);
NodePtr mean_of_scalars(const std::vector<NodePtr>& scalars);

} // namespace simva::ag
