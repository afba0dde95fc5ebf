#include "trajmoe/adamw.hpp"

#include <cmath>

namespace trajmoe {

void adamw_update(Param& p, const Matrix& grad, const AdamWConfig& cfg, long step) {
    check_same_shape(p.value, grad, ("adamw_update(" + p.name + ")").c_str());
    p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * grad;
    p.v = cfg.beta2 * p.v.array() + (1.0 - cfg.beta2) * grad.array().square();
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    // Decoupled decay: applied to the parameter directly, not through the moments.
    p.value -=
        cfg.lr * ((p.m.array() / bc1) / ((p.v.array() / bc2).sqrt() + cfg.eps)).matrix() +
        (cfg.lr * cfg.weight_decay) * p.value;
}

}  // namespace trajmoe
