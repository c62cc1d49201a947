#pragma once

#include <vector>

#include "augsearch/autodiff.hpp"
#include "augsearch/rng.hpp"

// Reparameterized samplers for the three policy degrees of freedom:
// Gumbel-Softmax over depth, Gumbel-Sinkhorn over transform-to-layer
// assignments, and uniform (or Gaussian) magnitudes. Every sampler has an
// overload taking its noise explicitly so callers can replay a draw.
namespace augsearch::relax {

/// Constant occupying the N - K padding columns of the permutation logits.
inline constexpr double kPadValue = -1e3;
/// Lower bound applied to exp((logits + noise) / t) before Sinkhorn.
inline constexpr double kSinkhornFloor = 1e-30;
/// Uniform draws are kept in [kUniformClamp, 1 - kUniformClamp].
inline constexpr double kUniformClamp = 1e-12;

class Temperature {
public:
    explicit Temperature(double t);
    double value() const noexcept { return t_; }

private:
    double t_;
};

/// Standard Gumbel transform -log(-log(u)) of a clamped uniform draw.
double gumbel_from_uniform(double u);
Tensor sample_gumbel(const Shape& shape, Rng& rng);
Tensor sample_uniform(const Shape& shape, Rng& rng);

struct CategoricalDraw {
    ad::Var soft;        // softmax((logits + g) / t)
    ad::Var hard;        // straight-through one-hot; forward is exactly one-hot
    std::size_t index;   // argmax
};

/// Gumbel-Softmax with straight-through hardening over the last axis of a
/// 1-D logit vector.
CategoricalDraw gumbel_softmax_hard(const ad::Var& logits, Temperature t, const Tensor& gumbel);
CategoricalDraw gumbel_softmax_hard(const ad::Var& logits, Temperature t, Rng& rng);

/// Pads N x K logits to N x N with `pad_value` columns. Requires K <= N.
Tensor pad_logits(const Tensor& pi, double pad_value = kPadValue);
ad::Var pad_logits(const ad::Var& pi, double pad_value = kPadValue);

/// `iterations` rounds of row normalization followed by column
/// normalization. Entries must be strictly positive.
ad::Var sinkhorn_normalize(const ad::Var& m, int iterations);

struct PermutationDraw {
    ad::Var soft;                  // N x K, first K columns of S^L((pad(pi) + G) / t)
    ad::Var hard;                  // N x K, straight-through one-hot per column
    std::vector<std::size_t> rows; // selected row (transform) for each column (layer)
};

/// Gumbel-Sinkhorn sample. `gumbel` is N x N and perturbs the padded matrix
/// including its padding columns.
PermutationDraw gumbel_sinkhorn_sample(const ad::Var& pi, Temperature t, int iterations, const Tensor& gumbel);
PermutationDraw gumbel_sinkhorn_sample(const ad::Var& pi, Temperature t, int iterations, Rng& rng);

/// M = (sigmoid(high) - sigmoid(low)) * eps + sigmoid(low), elementwise.
ad::Var sample_magnitude(const ad::Var& low, const ad::Var& high, const Tensor& eps);
ad::Var sample_magnitude(const ad::Var& low, const ad::Var& high, Rng& rng);

/// Lower edge used when clamping Gaussian magnitudes into (0, 1).
inline constexpr double kGaussianMagnitudeEdge = 1e-6;

/// M = clamp(mean + std * eps, edge, 1 - edge) with eps ~ N(0, 1).
ad::Var sample_magnitude_gaussian(const ad::Var& mean, const ad::Var& std, const Tensor& eps);
ad::Var sample_magnitude_gaussian(const ad::Var& mean, const ad::Var& std, Rng& rng);

/// True when some row index appears in more than one column of a one-hot matrix.
bool has_repeated_row(const std::vector<std::size_t>& rows);

}  // namespace augsearch::relax
