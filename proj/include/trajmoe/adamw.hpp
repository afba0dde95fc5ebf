#pragma once

#include "trajmoe/tape.hpp"

namespace trajmoe {

struct AdamWConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// One AdamW update for a single parameter: bias-corrected moments plus
// decoupled weight decay. `step` is the 1-based step count after increment.
void adamw_update(Param& p, const Matrix& grad, const AdamWConfig& cfg, long step);

// Optimizer over a whole store; owns only the shared step counter (the
// per-parameter moment state lives on the Params themselves).
class AdamW {
  public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    // Applies one update from each parameter's accumulated .grad, then
    // clears the gradients.
    void step(ParamStore& params) {
        ++step_;
        for (auto& p : params) {
            adamw_update(*p, p->grad, cfg_, step_);
            p->zero_grad();
        }
    }

    long steps_taken() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }

  private:
    AdamWConfig cfg_;
    long step_ = 0;
};

}  // namespace trajmoe
