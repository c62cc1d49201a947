#include "augsearch/optim.hpp"

#include <cmath>
#include <numbers>

#include "augsearch/errors.hpp"

namespace augsearch::optim {

namespace {

void check_like(const model::ParamList& a, const model::ParamList& b, const char* who) {
    if (a.size() != b.size()) throw ShapeError(std::string(who) + ": parameter lists differ in length");
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].shape() != b[i].shape()) {
            throw ShapeError(std::string(who) + ": " + to_string(a[i].shape()) + " vs " + to_string(b[i].shape()));
        }
}

}  // namespace

Sgd::Sgd(SgdConfig cfg, const model::ParamList& like) : cfg_(cfg), velocity_(model::zeros_like(like)) {}

void Sgd::step(model::ParamList& params, const model::ParamList& grads, double lr) {
    check_like(params, grads, "sgd");
    check_like(params, velocity_, "sgd");
    const double m = cfg_.momentum;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        Tensor& v = velocity_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double d = grads[i][j] + cfg_.weight_decay * p[j];
            v[j] = m * v[j] + d;
            p[j] -= lr * (cfg_.nesterov ? d + m * v[j] : v[j]);
        }
    }
}

Adam::Adam(AdamConfig cfg, const model::ParamList& like)
    : cfg_(cfg), m_(model::zeros_like(like)), v_(model::zeros_like(like)) {}

void Adam::step(model::ParamList& params, const model::ParamList& grads) {
    check_like(params, grads, "adam");
    check_like(params, m_, "adam");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < params[i].size(); ++j) {
            const double g = grads[i][j];
            m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
            v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
            params[i][j] -= cfg_.lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + cfg_.eps);
        }
}

double cosine_lr(double lr, std::size_t step, std::size_t total) {
    if (total == 0) return lr;
    const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
    return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * f));
}

}  // namespace augsearch::optim
