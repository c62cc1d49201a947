#pragma once

#include "augsearch/model.hpp"

namespace augsearch::optim {

struct SgdConfig {
    double lr = 0.05;  // 0.1 diverges on the tiny classifier, which has no normalization layers
    double momentum = 0.9;
    bool nesterov = true;
    double weight_decay = 5e-4;
};

/// SGD with heavy-ball or Nesterov momentum and L2 weight decay:
///   d = g + wd * p;  v = m * v + d;  p -= lr * (nesterov ? d + m * v : v)
class Sgd {
public:
    Sgd(SgdConfig cfg, const model::ParamList& like);
    void step(model::ParamList& params, const model::ParamList& grads, double lr);
    const SgdConfig& config() const { return cfg_; }

private:
    SgdConfig cfg_;
    model::ParamList velocity_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction over a list of tensors.
class Adam {
public:
    Adam(AdamConfig cfg, const model::ParamList& like);
    void step(model::ParamList& params, const model::ParamList& grads);
    std::size_t steps() const { return t_; }

private:
    AdamConfig cfg_;
    model::ParamList m_, v_;
    std::size_t t_ = 0;
};

/// lr * (1 + cos(pi * step / total)) / 2.
double cosine_lr(double lr, std::size_t step, std::size_t total);

}  // namespace augsearch::optim
