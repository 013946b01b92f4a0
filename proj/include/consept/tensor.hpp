#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

namespace consept::nn {

// Dense row-major tensor of doubles. Shapes used in practice are
// [rows, cols] for token/weight matrices and [channels, h, w] for maps.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
    Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {}

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int64_t> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    // 2-D accessors
    int64_t rows() const { return shape[0]; }
    int64_t cols() const { return shape[1]; }
    double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
    double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }

    // 3-D accessor for [C,H,W] maps
    double& at(int64_t c, int64_t y, int64_t x) {
        return data[static_cast<size_t>((c * shape[1] + y) * shape[2] + x)];
    }
    double at(int64_t c, int64_t y, int64_t x) const {
        return data[static_cast<size_t>((c * shape[1] + y) * shape[2] + x)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ", ";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

}  // namespace consept::nn
