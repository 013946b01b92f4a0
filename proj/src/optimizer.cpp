#include "consept/optimizer.hpp"

#include <cmath>

namespace consept::engine {

double AdamW::current_lr() const {
    double frac = static_cast<double>(iter_) / static_cast<double>(opt_.total_iterations);
    if (frac > 1.0) frac = 1.0;
    return opt_.base_lr * std::pow(1.0 - frac, opt_.poly_power);
}

void AdamW::step(model::ModelState& state, const model::BoundModel& bound) {
    double lr = current_lr();
    ++iter_;
    double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(iter_));
    double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(iter_));

    for (auto& p : state.params) {
        if (p.frozen) continue;
        const nn::Tensor* grad = bound.grad_of(p.name);
        if (!grad) continue;
        auto& mom = moments_[p.name];
        if (mom.m.data.empty()) {
            mom.m = nn::Tensor::zeros(p.value.shape);
            mom.v = nn::Tensor::zeros(p.value.shape);
        }
        double plr = p.is_head ? lr * opt_.head_lr_multiplier : lr;
        double wd = p.decay ? opt_.weight_decay : 0.0;
        for (size_t i = 0; i < p.value.data.size(); ++i) {
            double g = grad->data[i];
            double m = opt_.beta1 * mom.m.data[i] + (1.0 - opt_.beta1) * g;
            double v = opt_.beta2 * mom.v.data[i] + (1.0 - opt_.beta2) * g * g;
            mom.m.data[i] = m;
            mom.v.data[i] = v;
            double update = (m / bc1) / (std::sqrt(v / bc2) + opt_.eps);
            p.value.data[i] -= plr * (update + wd * p.value.data[i]);
        }
    }
}

}  // namespace consept::engine
