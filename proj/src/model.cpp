#include "augsearch/model.hpp"

#include <cmath>

#include "augsearch/errors.hpp"

namespace augsearch::model {

ParamList zeros_like(const ParamList& p) {
    ParamList out;
    out.reserve(p.size());
    for (const Tensor& t : p) out.emplace_back(t.shape(), 0.0);
    return out;
}

void axpy(double a, const ParamList& x, ParamList& y) {
    if (x.size() != y.size()) throw ShapeError("axpy: parameter lists differ in length");
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i].shape() != y[i].shape()) {
            throw ShapeError("axpy: " + to_string(x[i].shape()) + " vs " + to_string(y[i].shape()));
        }
        for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] += a * x[i][j];
    }
}

double dot(const ParamList& a, const ParamList& b) {
    if (a.size() != b.size()) throw ShapeError("dot: parameter lists differ in length");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].shape() != b[i].shape()) throw ShapeError("dot: " + to_string(a[i].shape()) + " vs " + to_string(b[i].shape()));
        for (std::size_t j = 0; j < a[i].size(); ++j) s += a[i][j] * b[i][j];
    }
    return s;
}

double norm(const ParamList& p) { return std::sqrt(dot(p, p)); }

bool all_finite(const ParamList& p) {
    for (const Tensor& t : p)
        if (!t.all_finite()) return false;
    return true;
}

namespace {

std::size_t conv_out(std::size_t n) { return (n + 2 - 3) / 2 + 1; }

}  // namespace

TinyClassifier::TinyClassifier(ClassifierSpec spec) : spec_(spec) {
    if (spec.channels == 0 || spec.height < 3 || spec.width < 3 || spec.classes < 2) {
        throw ConfigError("classifier needs at least 3x3 images and 2 classes");
    }
    feature_h_ = conv_out(conv_out(spec.height));
    feature_w_ = conv_out(conv_out(spec.width));
}

ParamList TinyClassifier::init(Rng& rng) const {
    auto normal = [&](Shape shape, double std) {
        Tensor t(std::move(shape));
        for (double& v : t.values()) v = std * rng.normal();
        return t;
    };
    const std::size_t features = spec_.conv2 * feature_h_ * feature_w_;
    ParamList p;
    p.push_back(normal({spec_.conv1, spec_.channels, 3, 3}, std::sqrt(2.0 / (spec_.channels * 9))));
    p.emplace_back(Shape{spec_.conv1}, 0.0);
    p.push_back(normal({spec_.conv2, spec_.conv1, 3, 3}, std::sqrt(2.0 / (spec_.conv1 * 9))));
    p.emplace_back(Shape{spec_.conv2}, 0.0);
    p.push_back(normal({features, spec_.classes}, std::sqrt(1.0 / features)));
    p.emplace_back(Shape{spec_.classes}, 0.0);
    return p;
}

std::vector<ad::Var> TinyClassifier::bind(ad::Tape& tape, const ParamList& theta, bool requires_grad) const {
    if (theta.size() != 6) throw ShapeError("classifier expects 6 parameter tensors, got " + std::to_string(theta.size()));
    std::vector<ad::Var> vars;
    for (const Tensor& t : theta) vars.push_back(tape.leaf(t, requires_grad));
    return vars;
}

ad::Var TinyClassifier::forward(std::span<const ad::Var> theta, const ad::Var& x) const {
    if (x.shape().size() != 4 || x.shape()[1] != spec_.channels || x.shape()[2] != spec_.height ||
        x.shape()[3] != spec_.width) {
        throw ShapeError("classifier input must be [B," + std::to_string(spec_.channels) + "," +
                         std::to_string(spec_.height) + "," + std::to_string(spec_.width) + "], got " +
                         to_string(x.shape()));
    }
    const std::size_t B = x.shape()[0];
    // Inputs are centered around zero before the first convolution.
    ad::Var h = ad::relu(ad::conv2d(ad::add_scalar(x, -0.5), theta[0], theta[1], 2, 1));
    h = ad::relu(ad::conv2d(h, theta[2], theta[3], 2, 1));
    h = ad::reshape(h, {B, spec_.conv2 * feature_h_ * feature_w_});
    return ad::matmul(h, theta[4]) + theta[5];
}

Tensor TinyClassifier::logits(const ParamList& theta, const Tensor& x) const {
    ad::Tape tape;
    const auto vars = bind(tape, theta, false);
    return forward(vars, tape.constant(x)).value();
}

std::vector<int> predictions(const Tensor& logits) {
    std::vector<int> out;
    const std::size_t C = logits.shape().back();
    for (std::size_t r = 0; r < logits.dim(0); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (logits.at(r, c) > logits.at(r, best)) best = c;
        out.push_back(static_cast<int>(best));
    }
    return out;
}

}  // namespace augsearch::model
