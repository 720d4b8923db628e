#pragma once

#include <functional>
#include <map>
#include <vector>

#include "synergen/mask.hpp"
#include "synergen/tensor.hpp"

namespace synergen {

// Reverse-mode autodiff over Tensor values. Nodes are created in execution
// order, so the creation index doubles as a topological order; backward()
// walks it once in reverse. Every op validates that its output is finite.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaves.
    int leaf(Tensor v, bool requires_grad);
    int constant(Tensor v) { return leaf(std::move(v), false); }

    // Linear algebra.
    int matmul(int a, int b);     // [m x k] * [k x n]
    int matmul_nt(int a, int b);  // [m x k] * [n x k]^T
    int dot(int a, int b);        // flattened inner product -> scalar

    // Elementwise and structural.
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int scale(int a, double s);
    int add_rowvec(int a, int v);  // [n x d] + broadcast [1 x d]
    int relu(int a);
    int sigmoid(int a);
    int log(int a);
    int softplus(int a);
    int sum(int a);
    int mean(int a);
    int concat_cols(int a, int b);
    int concat_rows(int a, int b);
    int slice_cols(int a, int c0, int c1);
    int slice_rows(int a, int r0, int r1);
    int gather_rows(int a, std::vector<int> ids);
    int repeat_row(int v, int n);

    // Model-specific primitives.
    int layer_norm(int a, int gain, int bias, double eps = 1e-5);
    int row_softmax_masked(int logits, const MaskMatrix& mask);
    int rope_rotate(int x, Tensor angles);  // angles: [n x head_dim/2], constant
    int logsumexp_rows(int a);              // [n x m] -> [n x 1]

    void backward(int loss);

    const Tensor& value(int id) const { return nodes_[id].val; }
    bool has_grad(int id) const { return !nodes_[id].grad.data().empty(); }
    const Tensor& grad(int id) const;
    // Row indices of `id` that received gradient through gather_rows.
    std::vector<int> touched_rows(int id) const;

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor val;
        Tensor grad;  // empty until first accumulation
        bool requires_grad = false;
        std::function<void()> backprop;  // empty for leaves/constants
    };

    int push(Tensor v, bool requires_grad, std::function<void()> backprop);
    Tensor& grad_buf(int id);
    bool needs(int a) const { return nodes_[a].requires_grad; }
    void check_index(int id) const;

    std::vector<Node> nodes_;
    std::map<int, std::vector<int>> touched_;
};

}  // namespace synergen
