#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "consept/model.hpp"

namespace consept::engine {

// Decoupled-weight-decay adaptive-moment optimizer with a polynomial decay
// schedule. Head parameters train at a learning-rate multiple; frozen
// parameters are skipped entirely (moments untouched), which keeps their
// bytes bit-identical across any number of steps.
class AdamW {
public:
    struct Options {
        double base_lr = 1e-3;
        double head_lr_multiplier = 10.0;
        double weight_decay = 0.01;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double poly_power = 0.9;
        int64_t total_iterations = 1;  // horizon K of the poly schedule
    };

    explicit AdamW(Options opt) : opt_(opt) {}

    double current_lr() const;  // base_lr * (1 - k/K)^power
    int64_t iteration() const { return iter_; }

    // applies one update using gradients harvested from the bound model
    void step(model::ModelState& state, const model::BoundModel& bound);

    void reset_schedule(int64_t total_iterations) {
        opt_.total_iterations = total_iterations;
        iter_ = 0;
    }

    const Options& options() const { return opt_; }

private:
    struct Moments {
        nn::Tensor m;
        nn::Tensor v;
    };
    Options opt_;
    int64_t iter_ = 0;
    std::unordered_map<std::string, Moments> moments_;
};

}  // namespace consept::engine
