#pragma once

#include <span>
#include <vector>

#include "augsearch/autodiff.hpp"
#include "augsearch/rng.hpp"

namespace augsearch::model {

/// A flat list of parameter tensors.
using ParamList = std::vector<Tensor>;

ParamList zeros_like(const ParamList& p);
/// y += a * x
void axpy(double a, const ParamList& x, ParamList& y);
double dot(const ParamList& a, const ParamList& b);
double norm(const ParamList& p);
bool all_finite(const ParamList& p);

struct ClassifierSpec {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t classes = 2;
    std::size_t conv1 = 8;
    std::size_t conv2 = 16;
};

/// conv(3x3, stride 2) -> ReLU -> conv(3x3, stride 2) -> ReLU -> linear.
class TinyClassifier {
public:
    explicit TinyClassifier(ClassifierSpec spec);

    const ClassifierSpec& spec() const { return spec_; }

    /// He-initialized weights, zero biases.
    ParamList init(Rng& rng) const;

    /// Places parameters on a tape.
    std::vector<ad::Var> bind(ad::Tape& tape, const ParamList& theta, bool requires_grad) const;

    /// Logits [B, classes] for images [B, C, H, W].
    ad::Var forward(std::span<const ad::Var> theta, const ad::Var& x) const;

    /// Forward-only logits.
    Tensor logits(const ParamList& theta, const Tensor& x) const;

private:
    ClassifierSpec spec_;
    std::size_t feature_h_, feature_w_;
};

/// Index of the largest logit per row.
std::vector<int> predictions(const Tensor& logits);

}  // namespace augsearch::model
