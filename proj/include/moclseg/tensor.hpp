#pragma once

// Minimal reverse-mode autodiff over dense float tensors. Covers exactly the
// ops the encoder/decoder and the corrective loss need; nothing speculative.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "moclseg/core.hpp"

namespace moclseg::nn {

struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0f);
    }
    Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {}

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    float& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    float at(int64_t i) const { return data[static_cast<size_t>(i)]; }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

class Node;
using Var = std::shared_ptr<Node>;

class Node {
public:
    Tensor value;
    Tensor grad;            // lazily allocated to value's shape
    bool requires_grad = false;
    std::string name;       // set for parameters, used by checkpoints

    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn; // accumulates into parents' grads

    explicit Node(Tensor v) : value(std::move(v)) {}

    Tensor& ensure_grad() {
        if (grad.data.empty()) grad = Tensor(value.shape);
        return grad;
    }
};

Var make_var(Tensor v, bool requires_grad = false);
Var make_param(Tensor v, std::string name);
Var constant(Tensor v);

// Runs reverse-mode accumulation from `root` (must be scalar, shape {1}).
void backward(const Var& root);
// Clears gradients of every node reachable from root (params keep theirs only
// if listed in `keep`). Optimizers call zero_grad on their own param lists.
void zero_grad(std::vector<Var>& params);

// ---- ops ----
// Shapes are row-major. 2D matmul: {n,k} x {k,m} -> {n,m}.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);                 // same shape
Var add_rowwise(const Var& a, const Var& bias);      // {n,m} + {m}
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);                 // hadamard
Var scale(const Var& a, float s);
Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
Var softmax_rows(const Var& a);                      // {n,m}, softmax along m
Var layer_norm(const Var& a, const Var& gamma, const Var& beta, float eps = 1e-5f); // {n,m}, per row
Var slice_cols(const Var& a, int c0, int c1);        // {n,m} -> {n,c1-c0}
Var concat_cols(const std::vector<Var>& parts);      // column-wise concat
Var transpose2d(const Var& a);
Var reshape(const Var& a, std::vector<int> shape);
Var sum(const Var& a);                               // -> {1}
Var mean(const Var& a);                              // -> {1}

// Spatial ops on {C,H,W} layout.
Var upsample2x_bilinear(const Var& a);               // {C,H,W} -> {C,2H,2W}
Var conv2d(const Var& a, const Var& w, const Var& b, int pad); // w {Cout,Cin,k,k}, b {Cout}
Var concat_chan(const Var& a, const Var& b);         // {C1,H,W}+{C2,H,W}

// grid {N,D} tokens <-> {D,H,W} maps, N = H*W row-major
Var tokens_to_chw(const Var& a, int h, int w);
Var chw_to_tokens(const Var& a);

// Weighted compound segmentation loss (soft Dice + BCE, per-pixel weights).
// y, omega are constants (no grad); prob requires grad. All shape {H,W} or
// flat {N}. eps_dice is the Dice smoothing constant.
Var weighted_dice_bce_loss(const Var& prob, const Tensor& y, const Tensor& omega,
                           float eps_dice = 1.0f, float clamp = 1e-7f);

// Parameter init helpers.
Tensor randn(std::vector<int> shape, Rng& rng, float stddev);
Tensor zeros(std::vector<int> shape);

} // namespace moclseg::nn
