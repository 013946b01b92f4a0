#include "consept/autograd.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace consept::nn {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

namespace {

CMap as_mat(const Tensor& t) { return CMap(t.data.data(), t.rows(), t.cols()); }
MMap as_mat(Tensor& t) { return MMap(t.data.data(), t.rows(), t.cols()); }

Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents) n->requires_grad = n->requires_grad || p->requires_grad;
    if (n->requires_grad) n->backward_fn = std::move(bw);
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    a->value.shape_str() + " vs " + b->value.shape_str());
}

}  // namespace

Var constant(Tensor value) { return leaf(std::move(value), false); }

Var leaf(Tensor value, bool requires_grad, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->name = std::move(name);
    return n;
}

void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar");
    if (!root->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad().data[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
    }
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a->value;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i];
    return make(std::move(out), {a, b}, [](Node& n) {
        for (int k = 0; k < 2; ++k) {
            Node& p = *n.parents[k];
            if (!p.requires_grad) continue;
            auto& pg = p.ensure_grad().data;
            for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad.data[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a->value;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b->value.data[i];
    return make(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) {
            auto& pg = n.parents[0]->ensure_grad().data;
            for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad.data[i];
        }
        if (n.parents[1]->requires_grad) {
            auto& pg = n.parents[1]->ensure_grad().data;
            for (size_t i = 0; i < pg.size(); ++i) pg[i] -= n.grad.data[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->value;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->value.data[i];
    return make(std::move(out), {a, b}, [](Node& n) {
        const auto& av = n.parents[0]->value.data;
        const auto& bv = n.parents[1]->value.data;
        if (n.parents[0]->requires_grad) {
            auto& pg = n.parents[0]->ensure_grad().data;
            for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad.data[i] * bv[i];
        }
        if (n.parents[1]->requires_grad) {
            auto& pg = n.parents[1]->ensure_grad().data;
            for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad.data[i] * av[i];
        }
    });
}

Var div(const Var& a, const Var& b) {
    check_same_shape(a, b, "div");
    Tensor out = a->value;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] /= b->value.data[i];
    return make(std::move(out), {a, b}, [](Node& n) {
        const auto& av = n.parents[0]->value.data;
        const auto& bv = n.parents[1]->value.data;
        if (n.parents[0]->requires_grad) {
            auto& pg = n.parents[0]->ensure_grad().data;
            for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad.data[i] / bv[i];
        }
        if (n.parents[1]->requires_grad) {
            auto& pg = n.parents[1]->ensure_grad().data;
            for (size_t i = 0; i < pg.size(); ++i)
                pg[i] -= n.grad.data[i] * av[i] / (bv[i] * bv[i]);
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a->value;
    for (double& v : out.data) v *= s;
    return make(std::move(out), {a}, [s](Node& n) {
        auto& pg = n.parents[0]->ensure_grad().data;
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += s * n.grad.data[i];
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a->value;
    for (double& v : out.data) v += s;
    return make(std::move(out), {a}, [](Node& n) {
        auto& pg = n.parents[0]->ensure_grad().data;
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad.data[i];
    });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var square(const Var& a) {
    Tensor out = a->value;
    for (double& v : out.data) v *= v;
    return make(std::move(out), {a}, [](Node& n) {
        const auto& av = n.parents[0]->value.data;
        auto& pg = n.parents[0]->ensure_grad().data;
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += 2.0 * av[i] * n.grad.data[i];
    });
}

Var exp_(const Var& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = std::exp(v);
    return make(std::move(out), {a}, [](Node& n) {
        auto& pg = n.parents[0]->ensure_grad().data;
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.value.data[i] * n.grad.data[i];
    });
}

Var log_(const Var& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = std::log(v);
    return make(std::move(out), {a}, [](Node& n) {
        const auto& av = n.parents[0]->value.data;
        auto& pg = n.parents[0]->ensure_grad().data;
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad.data[i] / av[i];
    });
}

Var sigmoid(const Var& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return make(std::move(out), {a}, [](Node& n) {
        auto& pg = n.parents[0]->ensure_grad().data;
        for (size_t i = 0; i < pg.size(); ++i) {
            double y = n.value.data[i];
            pg[i] += y * (1.0 - y) * n.grad.data[i];
        }
    });
}

Var gelu(const Var& a) {
    static constexpr double kInvSqrt2 = 0.70710678118654752440;
    static constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    Tensor out = a->value;
    for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    return make(std::move(out), {a}, [](Node& n) {
        const auto& av = n.parents[0]->value.data;
        auto& pg = n.parents[0]->ensure_grad().data;
        for (size_t i = 0; i < pg.size(); ++i) {
            double x = av[i];
            double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            pg[i] += (cdf + x * pdf) * n.grad.data[i];
        }
    });
}

Var clamp(const Var& a, double lo, double hi) {
    Tensor out = a->value;
    for (double& v : out.data) v = std::min(hi, std::max(lo, v));
    return make(std::move(out), {a}, [lo, hi](Node& n) {
        const auto& av = n.parents[0]->value.data;
        auto& pg = n.parents[0]->ensure_grad().data;
        for (size_t i = 0; i < pg.size(); ++i)
            if (av[i] > lo && av[i] < hi) pg[i] += n.grad.data[i];
    });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a->value.data) s += v;
    return make(Tensor::scalar(s), {a}, [](Node& n) {
        auto& pg = n.parents[0]->ensure_grad().data;
        double g = n.grad.data[0];
        for (double& v : pg) v += g;
    });
}

Var mean(const Var& a) {
    double s = 0.0;
    for (double v : a->value.data) s += v;
    double inv_n = 1.0 / static_cast<double>(a->value.numel());
    return make(Tensor::scalar(s * inv_n), {a}, [inv_n](Node& n) {
        auto& pg = n.parents[0]->ensure_grad().data;
        double g = n.grad.data[0] * inv_n;
        for (double& v : pg) v += g;
    });
}

Var dot(const Var& a, const Var& b) {
    check_same_shape(a, b, "dot");
    double s = 0.0;
    for (size_t i = 0; i < a->value.data.size(); ++i) s += a->value.data[i] * b->value.data[i];
    return make(Tensor::scalar(s), {a, b}, [](Node& n) {
        const auto& av = n.parents[0]->value.data;
        const auto& bv = n.parents[1]->value.data;
        double g = n.grad.data[0];
        if (n.parents[0]->requires_grad) {
            auto& pg = n.parents[0]->ensure_grad().data;
            for (size_t i = 0; i < pg.size(); ++i) pg[i] += g * bv[i];
        }
        if (n.parents[1]->requires_grad) {
            auto& pg = n.parents[1]->ensure_grad().data;
            for (size_t i = 0; i < pg.size(); ++i) pg[i] += g * av[i];
        }
    });
}

Var matmul(const Var& a, const Var& b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.cols() != b->value.rows())
        throw std::invalid_argument("matmul: incompatible shapes " + a->value.shape_str() +
                                    " x " + b->value.shape_str());
    Tensor out({a->value.rows(), b->value.cols()});
    as_mat(out).noalias() = as_mat(a->value) * as_mat(b->value);
    return make(std::move(out), {a, b}, [](Node& n) {
        const Tensor& av = n.parents[0]->value;
        const Tensor& bv = n.parents[1]->value;
        if (n.parents[0]->requires_grad)
            as_mat(n.parents[0]->ensure_grad()).noalias() +=
                as_mat(n.grad) * as_mat(bv).transpose();
        if (n.parents[1]->requires_grad)
            as_mat(n.parents[1]->ensure_grad()).noalias() +=
                as_mat(av).transpose() * as_mat(n.grad);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.cols() != b->value.cols())
        throw std::invalid_argument("matmul_nt: incompatible shapes " + a->value.shape_str() +
                                    " x " + b->value.shape_str() + "^T");
    Tensor out({a->value.rows(), b->value.rows()});
    as_mat(out).noalias() = as_mat(a->value) * as_mat(b->value).transpose();
    return make(std::move(out), {a, b}, [](Node& n) {
        const Tensor& av = n.parents[0]->value;
        const Tensor& bv = n.parents[1]->value;
        if (n.parents[0]->requires_grad)
            as_mat(n.parents[0]->ensure_grad()).noalias() += as_mat(n.grad) * as_mat(bv);
        if (n.parents[1]->requires_grad)
            as_mat(n.parents[1]->ensure_grad()).noalias() +=
                as_mat(n.grad).transpose() * as_mat(av);
    });
}

Var add_rowwise(const Var& a, const Var& bias) {
    if (bias->value.numel() != a->value.cols())
        throw std::invalid_argument("add_rowwise: bias size mismatch");
    Tensor out = a->value;
    int64_t r = out.rows(), c = out.cols();
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out.at(i, j) += bias->value.data[static_cast<size_t>(j)];
    return make(std::move(out), {a, bias}, [](Node& n) {
        int64_t r = n.value.rows(), c = n.value.cols();
        if (n.parents[0]->requires_grad) {
            auto& pg = n.parents[0]->ensure_grad().data;
            for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad.data[i];
        }
        if (n.parents[1]->requires_grad) {
            auto& pg = n.parents[1]->ensure_grad().data;
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) pg[static_cast<size_t>(j)] += n.grad.at(i, j);
        }
    });
}

Var softmax_rows(const Var& a) {
    Tensor out = a->value;
    int64_t r = out.rows(), c = out.cols();
    for (int64_t i = 0; i < r; ++i) {
        double mx = out.at(i, 0);
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, out.at(i, j));
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double e = std::exp(out.at(i, j) - mx);
            out.at(i, j) = e;
            z += e;
        }
        for (int64_t j = 0; j < c; ++j) out.at(i, j) /= z;
    }
    return make(std::move(out), {a}, [](Node& n) {
        int64_t r = n.value.rows(), c = n.value.cols();
        Tensor& pg = n.parents[0]->ensure_grad();
        for (int64_t i = 0; i < r; ++i) {
            double gy = 0.0;
            for (int64_t j = 0; j < c; ++j) gy += n.grad.at(i, j) * n.value.at(i, j);
            for (int64_t j = 0; j < c; ++j)
                pg.at(i, j) += n.value.at(i, j) * (n.grad.at(i, j) - gy);
        }
    });
}

Var logsumexp_rows(const Var& a) {
    int64_t r = a->value.rows(), c = a->value.cols();
    Tensor out({r, 1});
    for (int64_t i = 0; i < r; ++i) {
        double mx = a->value.at(i, 0);
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, a->value.at(i, j));
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) z += std::exp(a->value.at(i, j) - mx);
        out.data[static_cast<size_t>(i)] = mx + std::log(z);
    }
    return make(std::move(out), {a}, [](Node& n) {
        const Tensor& av = n.parents[0]->value;
        Tensor& pg = n.parents[0]->ensure_grad();
        int64_t r = av.rows(), c = av.cols();
        for (int64_t i = 0; i < r; ++i) {
            double lse = n.value.data[static_cast<size_t>(i)];
            double g = n.grad.data[static_cast<size_t>(i)];
            for (int64_t j = 0; j < c; ++j) pg.at(i, j) += g * std::exp(av.at(i, j) - lse);
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    int64_t r = x->value.rows(), c = x->value.cols();
    if (gamma->value.numel() != c || beta->value.numel() != c)
        throw std::invalid_argument("layer_norm: affine size mismatch");
    Tensor out({r, c});
    Tensor xhat({r, c});
    Tensor rstd({r, 1});
    for (int64_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (int64_t j = 0; j < c; ++j) mu += x->value.at(i, j);
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double d = x->value.at(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        double rs = 1.0 / std::sqrt(var + eps);
        rstd.data[static_cast<size_t>(i)] = rs;
        for (int64_t j = 0; j < c; ++j) {
            double h = (x->value.at(i, j) - mu) * rs;
            xhat.at(i, j) = h;
            out.at(i, j) = h * gamma->value.data[static_cast<size_t>(j)] +
                           beta->value.data[static_cast<size_t>(j)];
        }
    }
    return make(std::move(out), {x, gamma, beta},
                [xhat = std::move(xhat), rstd = std::move(rstd)](Node& n) {
                    const Var& x = n.parents[0];
                    const Var& gamma = n.parents[1];
                    const Var& beta = n.parents[2];
                    int64_t r = n.value.rows(), c = n.value.cols();
                    double inv_c = 1.0 / static_cast<double>(c);
                    if (gamma->requires_grad) {
                        auto& gg = gamma->ensure_grad().data;
                        for (int64_t i = 0; i < r; ++i)
                            for (int64_t j = 0; j < c; ++j)
                                gg[static_cast<size_t>(j)] += n.grad.at(i, j) * xhat.at(i, j);
                    }
                    if (beta->requires_grad) {
                        auto& bg = beta->ensure_grad().data;
                        for (int64_t i = 0; i < r; ++i)
                            for (int64_t j = 0; j < c; ++j)
                                bg[static_cast<size_t>(j)] += n.grad.at(i, j);
                    }
                    if (x->requires_grad) {
                        Tensor& pg = x->ensure_grad();
                        for (int64_t i = 0; i < r; ++i) {
                            double m1 = 0.0, m2 = 0.0;
                            for (int64_t j = 0; j < c; ++j) {
                                double gj =
                                    n.grad.at(i, j) * gamma->value.data[static_cast<size_t>(j)];
                                m1 += gj;
                                m2 += gj * xhat.at(i, j);
                            }
                            m1 *= inv_c;
                            m2 *= inv_c;
                            double rs = rstd.data[static_cast<size_t>(i)];
                            for (int64_t j = 0; j < c; ++j) {
                                double gj =
                                    n.grad.at(i, j) * gamma->value.data[static_cast<size_t>(j)];
                                pg.at(i, j) += rs * (gj - m1 - xhat.at(i, j) * m2);
                            }
                        }
                    }
                });
}

Var normalize_rows(const Var& a, double eps) {
    int64_t r = a->value.rows(), c = a->value.cols();
    Tensor out({r, c});
    Tensor norms({r, 1});
    for (int64_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < c; ++j) s += a->value.at(i, j) * a->value.at(i, j);
        double nrm = std::max(std::sqrt(s), eps);
        norms.data[static_cast<size_t>(i)] = nrm;
        for (int64_t j = 0; j < c; ++j) out.at(i, j) = a->value.at(i, j) / nrm;
    }
    return make(std::move(out), {a}, [norms = std::move(norms), eps](Node& n) {
        int64_t r = n.value.rows(), c = n.value.cols();
        Tensor& pg = n.parents[0]->ensure_grad();
        for (int64_t i = 0; i < r; ++i) {
            double nrm = norms.data[static_cast<size_t>(i)];
            if (nrm <= eps) {
                for (int64_t j = 0; j < c; ++j) pg.at(i, j) += n.grad.at(i, j) / eps;
                continue;
            }
            double gy = 0.0;
            for (int64_t j = 0; j < c; ++j) gy += n.grad.at(i, j) * n.value.at(i, j);
            for (int64_t j = 0; j < c; ++j)
                pg.at(i, j) += (n.grad.at(i, j) - n.value.at(i, j) * gy) / nrm;
        }
    });
}

Var take_diag(const Var& a) {
    int64_t n_ = a->value.rows();
    if (a->value.cols() != n_) throw std::invalid_argument("take_diag: square matrix required");
    Tensor out({n_, 1});
    for (int64_t i = 0; i < n_; ++i) out.data[static_cast<size_t>(i)] = a->value.at(i, i);
    return make(std::move(out), {a}, [](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        int64_t k = n.value.rows();
        for (int64_t i = 0; i < k; ++i) pg.at(i, i) += n.grad.data[static_cast<size_t>(i)];
    });
}

Var reshape(const Var& a, std::vector<int64_t> shape) {
    if (Tensor::numel_of(shape) != a->value.numel())
        throw std::invalid_argument("reshape: numel mismatch");
    Tensor out(std::move(shape), a->value.data);
    return make(std::move(out), {a}, [](Node& n) {
        auto& pg = n.parents[0]->ensure_grad().data;
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad.data[i];
    });
}

Var slice_rows(const Var& a, int64_t begin, int64_t count) {
    int64_t c = a->value.cols();
    if (begin < 0 || begin + count > a->value.rows())
        throw std::invalid_argument("slice_rows: out of range");
    Tensor out({count, c});
    std::copy_n(a->value.data.begin() + begin * c, count * c, out.data.begin());
    return make(std::move(out), {a}, [begin](Node& n) {
        int64_t c = n.value.cols();
        Tensor& pg = n.parents[0]->ensure_grad();
        for (int64_t i = 0; i < n.value.rows(); ++i)
            for (int64_t j = 0; j < c; ++j) pg.at(begin + i, j) += n.grad.at(i, j);
    });
}

Var slice_cols(const Var& a, int64_t begin, int64_t count) {
    int64_t r = a->value.rows();
    if (begin < 0 || begin + count > a->value.cols())
        throw std::invalid_argument("slice_cols: out of range");
    Tensor out({r, count});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < count; ++j) out.at(i, j) = a->value.at(i, begin + j);
    return make(std::move(out), {a}, [begin](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        for (int64_t i = 0; i < n.value.rows(); ++i)
            for (int64_t j = 0; j < n.value.cols(); ++j)
                pg.at(i, begin + j) += n.grad.at(i, j);
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    int64_t c = parts[0]->value.cols(), r = 0;
    for (const auto& p : parts) {
        if (p->value.cols() != c) throw std::invalid_argument("concat_rows: col mismatch");
        r += p->value.rows();
    }
    Tensor out({r, c});
    int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->value.data.begin(), p->value.data.end(), out.data.begin() + off * c);
        off += p->value.rows();
    }
    return make(std::move(out), parts, [](Node& n) {
        int64_t c = n.value.cols();
        int64_t off = 0;
        for (auto& p : n.parents) {
            if (p->requires_grad) {
                auto& pg = p->ensure_grad().data;
                const double* src = n.grad.data.data() + off * c;
                for (size_t i = 0; i < pg.size(); ++i) pg[i] += src[i];
            }
            off += p->value.rows();
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    int64_t r = parts[0]->value.rows(), c = 0;
    for (const auto& p : parts) {
        if (p->value.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
        c += p->value.cols();
    }
    Tensor out({r, c});
    int64_t off = 0;
    for (const auto& p : parts) {
        int64_t pc = p->value.cols();
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < pc; ++j) out.at(i, off + j) = p->value.at(i, j);
        off += pc;
    }
    return make(std::move(out), parts, [](Node& n) {
        int64_t off = 0;
        for (auto& p : n.parents) {
            int64_t pc = p->value.cols();
            if (p->requires_grad) {
                Tensor& pg = p->ensure_grad();
                for (int64_t i = 0; i < pg.rows(); ++i)
                    for (int64_t j = 0; j < pc; ++j) pg.at(i, j) += n.grad.at(i, off + j);
            }
            off += pc;
        }
    });
}

Var tokens_to_chw(const Var& tokens, int64_t h, int64_t w) {
    int64_t n_ = tokens->value.rows(), c = tokens->value.cols();
    if (n_ != h * w) throw std::invalid_argument("tokens_to_chw: token count != h*w");
    Tensor out({c, h, w});
    for (int64_t i = 0; i < n_; ++i)
        for (int64_t ch = 0; ch < c; ++ch)
            out.data[static_cast<size_t>(ch * n_ + i)] = tokens->value.at(i, ch);
    return make(std::move(out), {tokens}, [](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        int64_t c = pg.cols(), n_tok = pg.rows();
        for (int64_t i = 0; i < n_tok; ++i)
            for (int64_t ch = 0; ch < c; ++ch)
                pg.at(i, ch) += n.grad.data[static_cast<size_t>(ch * n_tok + i)];
    });
}

Var chw_to_tokens(const Var& map) {
    int64_t c = map->value.dim(0), h = map->value.dim(1), w = map->value.dim(2);
    int64_t n_ = h * w;
    Tensor out({n_, c});
    for (int64_t i = 0; i < n_; ++i)
        for (int64_t ch = 0; ch < c; ++ch)
            out.at(i, ch) = map->value.data[static_cast<size_t>(ch * n_ + i)];
    return make(std::move(out), {map}, [](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        int64_t n_tok = n.value.rows(), c = n.value.cols();
        for (int64_t i = 0; i < n_tok; ++i)
            for (int64_t ch = 0; ch < c; ++ch)
                pg.data[static_cast<size_t>(ch * n_tok + i)] += n.grad.at(i, ch);
    });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    // x: [Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout]
    if (x->value.ndim() != 3 || w->value.ndim() != 4)
        throw std::invalid_argument("conv2d: rank mismatch");
    int64_t cin = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
    int64_t cout = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
    if (w->value.dim(1) != cin) throw std::invalid_argument("conv2d: channel mismatch");
    int64_t oh = (h + 2 * pad - kh) / stride + 1;
    int64_t ow = (wd + 2 * pad - kw) / stride + 1;
    Tensor out({cout, oh, ow});
    const auto& xv = x->value;
    const auto& wv = w->value;
    for (int64_t oc = 0; oc < cout; ++oc) {
        double bias = b->value.data[static_cast<size_t>(oc)];
        for (int64_t oy = 0; oy < oh; ++oy) {
            for (int64_t ox = 0; ox < ow; ++ox) {
                double acc = bias;
                for (int64_t ic = 0; ic < cin; ++ic) {
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        int64_t iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            int64_t ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= wd) continue;
                            acc += xv.at(ic, iy, ix) *
                                   wv.data[static_cast<size_t>(((oc * cin + ic) * kh + ky) * kw + kx)];
                        }
                    }
                }
                out.at(oc, oy, ox) = acc;
            }
        }
    }
    return make(std::move(out), {x, w, b}, [stride, pad](Node& n) {
        const Var& x = n.parents[0];
        const Var& w = n.parents[1];
        const Var& b = n.parents[2];
        int64_t cin = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
        int64_t cout = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
        int64_t oh = n.value.dim(1), ow = n.value.dim(2);
        Tensor* xg = x->requires_grad ? &x->ensure_grad() : nullptr;
        Tensor* wg = w->requires_grad ? &w->ensure_grad() : nullptr;
        Tensor* bg = b->requires_grad ? &b->ensure_grad() : nullptr;
        for (int64_t oc = 0; oc < cout; ++oc) {
            for (int64_t oy = 0; oy < oh; ++oy) {
                for (int64_t ox = 0; ox < ow; ++ox) {
                    double g = n.grad.at(oc, oy, ox);
                    if (g == 0.0) continue;
                    if (bg) bg->data[static_cast<size_t>(oc)] += g;
                    for (int64_t ic = 0; ic < cin; ++ic) {
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            int64_t iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                int64_t ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= wd) continue;
                                size_t wi = static_cast<size_t>(((oc * cin + ic) * kh + ky) * kw + kx);
                                if (wg) wg->data[wi] += g * x->value.at(ic, iy, ix);
                                if (xg) xg->at(ic, iy, ix) += g * w->value.data[wi];
                            }
                        }
                    }
                }
            }
        }
    });
}

namespace {
struct BilinearTap {
    int64_t lo, hi;
    double w_lo, w_hi;
};

std::vector<BilinearTap> bilinear_taps(int64_t in, int64_t out) {
    // half-pixel centers, edges clamped
    std::vector<BilinearTap> taps(static_cast<size_t>(out));
    double r = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * r - 0.5;
        double lo = std::floor(src);
        double frac = src - lo;
        int64_t i0 = std::max<int64_t>(0, std::min<int64_t>(in - 1, static_cast<int64_t>(lo)));
        int64_t i1 = std::max<int64_t>(0, std::min<int64_t>(in - 1, static_cast<int64_t>(lo) + 1));
        taps[static_cast<size_t>(o)] = {i0, i1, 1.0 - frac, frac};
    }
    return taps;
}
}  // namespace

Var bilinear_resize(const Var& x, int64_t out_h, int64_t out_w) {
    int64_t c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    auto ty = bilinear_taps(h, out_h);
    auto tx = bilinear_taps(w, out_w);
    Tensor out({c, out_h, out_w});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t oy = 0; oy < out_h; ++oy) {
            const auto& a = ty[static_cast<size_t>(oy)];
            for (int64_t ox = 0; ox < out_w; ++ox) {
                const auto& bx = tx[static_cast<size_t>(ox)];
                out.at(ch, oy, ox) = a.w_lo * (bx.w_lo * x->value.at(ch, a.lo, bx.lo) +
                                               bx.w_hi * x->value.at(ch, a.lo, bx.hi)) +
                                     a.w_hi * (bx.w_lo * x->value.at(ch, a.hi, bx.lo) +
                                               bx.w_hi * x->value.at(ch, a.hi, bx.hi));
            }
        }
    return make(std::move(out), {x}, [ty = std::move(ty), tx = std::move(tx)](Node& n) {
        Tensor& pg = n.parents[0]->ensure_grad();
        int64_t c = pg.dim(0);
        int64_t oh = n.value.dim(1), ow = n.value.dim(2);
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t oy = 0; oy < oh; ++oy) {
                const auto& a = ty[static_cast<size_t>(oy)];
                for (int64_t ox = 0; ox < ow; ++ox) {
                    const auto& bx = tx[static_cast<size_t>(ox)];
                    double g = n.grad.at(ch, oy, ox);
                    pg.at(ch, a.lo, bx.lo) += g * a.w_lo * bx.w_lo;
                    pg.at(ch, a.lo, bx.hi) += g * a.w_lo * bx.w_hi;
                    pg.at(ch, a.hi, bx.lo) += g * a.w_hi * bx.w_lo;
                    pg.at(ch, a.hi, bx.hi) += g * a.w_hi * bx.w_hi;
                }
            }
    });
}

Var bce_with_logits(const Var& logits, const Tensor& target, const Tensor& mask) {
    if (!logits->value.same_shape(target) || !logits->value.same_shape(mask))
        throw std::invalid_argument("bce_with_logits: shape mismatch");
    double count = 0.0;
    for (double m : mask.data) count += m;
    if (count <= 0.0) throw std::invalid_argument("bce_with_logits: no valid elements");
    double loss = 0.0;
    for (size_t i = 0; i < mask.data.size(); ++i) {
        if (mask.data[i] == 0.0) continue;
        double x = logits->value.data[i];
        double y = target.data[i];
        loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    double inv = 1.0 / count;
    return make(Tensor::scalar(loss * inv), {logits},
                [target, mask, inv](Node& n) {
                    auto& pg = n.parents[0]->ensure_grad().data;
                    const auto& xv = n.parents[0]->value.data;
                    double g = n.grad.data[0] * inv;
                    for (size_t i = 0; i < pg.size(); ++i) {
                        if (mask.data[i] == 0.0) continue;
                        double s = 1.0 / (1.0 + std::exp(-xv[i]));
                        pg[i] += g * (s - target.data[i]);
                    }
                });
}

double gradcheck(const std::function<Var(const Var&)>& f, const Tensor& input, double eps) {
    Var x = leaf(input, true);
    Var out = f(x);
    if (out->value.numel() != 1) throw std::invalid_argument("gradcheck: f must return a scalar");
    backward(out);
    Tensor analytic = x->grad.data.empty() ? Tensor::zeros(input.shape) : x->grad;

    // Central differences carry irreducible roundoff of order mach_eps*|f|/eps;
    // differences below that band are measurement noise, not gradient error.
    double f0 = std::abs(out->value.data[0]);
    double atol = 1000.0 * 2.220446049250313e-16 * std::max(1.0, f0) / eps;

    double worst = 0.0;
    for (size_t i = 0; i < input.data.size(); ++i) {
        Tensor plus = input, minus = input;
        plus.data[i] += eps;
        minus.data[i] -= eps;
        double fp = f(leaf(plus, false))->value.data[0];
        double fm = f(leaf(minus, false))->value.data[0];
        double fd = (fp - fm) / (2.0 * eps);
        double a = analytic.data[i];
        double rel = std::max(0.0, std::abs(a - fd) - atol) /
                     std::max({std::abs(a), std::abs(fd), atol});
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace consept::nn
