#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "consept/tensor.hpp"

namespace consept::nn {

// Reverse-mode autodiff over a dynamically built DAG. Each op returns a new
// node; backward() walks the graph in reverse topological order, so gradients
// through shared subexpressions accumulate correctly.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first backward touch
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents
    std::string name;                        // non-empty for parameters

    Tensor& ensure_grad() {
        if (grad.data.empty()) grad = Tensor::zeros(value.shape);
        return grad;
    }
};

// leaves
Var constant(Tensor value);
Var leaf(Tensor value, bool requires_grad, std::string name = "");

// seeds root->grad with ones and propagates; root is usually a scalar loss
void backward(const Var& root);

// elementwise / scalar
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);
Var square(const Var& a);
Var exp_(const Var& a);
Var log_(const Var& a);
Var sigmoid(const Var& a);
Var gelu(const Var& a);
Var clamp(const Var& a, double lo, double hi);  // gradient passes only strictly inside

// reductions
Var sum(const Var& a);
Var mean(const Var& a);
Var dot(const Var& a, const Var& b);  // sum(a*b) without intermediate node

// linear algebra on 2-D tensors
Var matmul(const Var& a, const Var& b);     // [m,k]x[k,n]
Var matmul_nt(const Var& a, const Var& b);  // a @ b^T, [m,k]x[n,k]
Var add_rowwise(const Var& a, const Var& bias);  // bias broadcast over rows
Var softmax_rows(const Var& a);
Var logsumexp_rows(const Var& a);  // [m,n] -> [m,1], numerically stable
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var normalize_rows(const Var& a, double eps = 1e-8);  // unit-norm rows
Var take_diag(const Var& a);                          // [n,n] -> [n,1]

// structural (gradients are pure index permutations)
Var reshape(const Var& a, std::vector<int64_t> shape);
Var slice_rows(const Var& a, int64_t begin, int64_t count);
Var slice_cols(const Var& a, int64_t begin, int64_t count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var tokens_to_chw(const Var& tokens, int64_t h, int64_t w);  // [h*w,c] -> [c,h,w]
Var chw_to_tokens(const Var& map);                           // [c,h,w] -> [h*w,c]

// spatial ops on [C,H,W]
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var bilinear_resize(const Var& x, int64_t out_h, int64_t out_w);

// fused losses with hand-written gradients
// mean over all elements of the numerically stable binary CE with logits;
// `mask` (same H*W layout, values 0/1) selects contributing elements
Var bce_with_logits(const Var& logits, const Tensor& target, const Tensor& mask);

// checks d(f)/d(input) against central finite differences; returns the max
// relative error over all coordinates. Used by tests and the gradient suite.
double gradcheck(const std::function<Var(const Var&)>& f, const Tensor& input,
                 double eps = 1e-5);

}  // namespace consept::nn
