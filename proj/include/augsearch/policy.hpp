#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "augsearch/autodiff.hpp"
#include "augsearch/relax.hpp"
#include "augsearch/rng.hpp"

// Augmentation policies over the transform registry: sampling of depth,
// transform-to-layer assignment and magnitudes, application of the layered
// mixture, schedules, and the policy file format.
namespace augsearch::policy {

enum class MagnitudeDist { Uniform, Gaussian };
enum class DepthMode { Categorical, Bernoulli };
enum class SamplingMode { PerImage, PerBatch };

/// How a sampled policy is applied to an image.
///  Full:   every layer evaluates all N transforms and mixes them by P's column.
///  Sparse: same values and gradients as Full, but transforms whose
///          gradients are provably zero (P or d entry exactly 0) are evaluated
///          as constants.
enum class Mixture { Full, Sparse };

/// Learnable policy parameters. Magnitude bounds are stored as two N x K
/// tensors (lower and upper bound logits). Variant fields are empty unless
/// the corresponding mode is selected.
struct PolicyParams {
    std::size_t num_types = 0;
    std::size_t max_depth = 0;
    Tensor delta;    // [K+1]
    Tensor pi;       // [N, K]
    Tensor mu_low;   // [N, K]
    Tensor mu_high;  // [N, K]

    MagnitudeDist magnitude_dist = MagnitudeDist::Uniform;
    Tensor mag_mean;  // [N, K], Gaussian variant
    Tensor mag_std;   // [N, K], Gaussian variant

    DepthMode depth_mode = DepthMode::Categorical;
    Tensor gate_logits;  // [K], Bernoulli variant

    /// Uniform depth and type logits, magnitude interval (0.125, 0.875),
    /// Gaussian N(0.5, 0.1875), gates at probability 0.75.
    static PolicyParams initial(std::size_t max_depth, std::size_t num_types,
                                MagnitudeDist dist = MagnitudeDist::Uniform,
                                DepthMode depth = DepthMode::Categorical);
    /// Throws ConfigError on shape mismatch, K > N or non-finite entries.
    void validate() const;
    bool operator==(const PolicyParams&) const = default;
};

/// Schedules shared by search and evaluation. Warm-up thresholds are
/// fractions of the total number of epochs.
struct ScheduleConfig {
    double t_start = 1.0;
    double t_end = 0.5;
    double t_eval = 0.1;
    int sinkhorn_iters = 20;
    double warmup_mu = 50.0 / 300.0;
    double warmup_pi = 65.0 / 300.0;
    double warmup_delta = 80.0 / 300.0;

    void validate() const;
    bool operator==(const ScheduleConfig&) const = default;
};

/// t_start * (t_end / t_start)^(epoch / total_epochs).
relax::Temperature anneal_temperature(double epoch, double total_epochs, const ScheduleConfig& sched);

struct Groups {
    bool mu = false;
    bool pi = false;
    bool delta = false;
    bool any() const { return mu || pi || delta; }
    bool operator==(const Groups&) const = default;
};

/// Parameter groups receiving updates at `epoch_fraction` = epoch / total.
Groups warmup_gate(double epoch_fraction, const ScheduleConfig& sched);

/// Policy parameters placed on a tape.
struct PolicyVars {
    ad::Var delta, pi, mu_low, mu_high;
    ad::Var mag_mean, mag_std;
    ad::Var gate_logits;
    std::size_t num_types = 0;
    std::size_t max_depth = 0;
    MagnitudeDist magnitude_dist = MagnitudeDist::Uniform;
    DepthMode depth_mode = DepthMode::Categorical;
};

/// Registers the parameters as leaves; `grad` selects which groups require
/// gradients.
PolicyVars bind(ad::Tape& tape, const PolicyParams& params, Groups grad);

/// Gradients of the bound parameters after a backward pass, laid out like
/// `params` (zeros for groups without gradient).
PolicyParams gradients(ad::Tape& tape, const PolicyVars& vars, const PolicyParams& params);

/// Noise behind one policy draw.
struct PolicyNoise {
    Tensor depth;      // [K+1] Gumbel (categorical) or [K] logistic (Bernoulli)
    Tensor perm;       // [N, N] Gumbel
    Tensor magnitude;  // [N, K] uniform or standard normal
};

PolicyNoise draw_noise(const PolicyParams& params, Rng& rng);
PolicyNoise draw_noise(const PolicyVars& vars, Rng& rng);

struct PolicySample {
    ad::Var d;                          // [K+1] hard one-hot (categorical)
    ad::Var gates;                      // [K] hard 0/1 (Bernoulli)
    ad::Var P;                          // [N, K], one-hot columns
    ad::Var M;                          // [N, K] in (0, 1)
    std::vector<std::size_t> rows;      // transform selected at each layer
    std::size_t depth = 0;              // categorical depth
    std::vector<bool> active;           // per-layer gate state (Bernoulli)
    DepthMode depth_mode = DepthMode::Categorical;

    /// Layers whose transform reaches the output, in order.
    std::vector<std::size_t> applied_layers() const;
};

PolicySample sample_policy(const PolicyVars& vars, relax::Temperature t, int sinkhorn_iters,
                           const PolicyNoise& noise);
PolicySample sample_policy(const PolicyVars& vars, relax::Temperature t, int sinkhorn_iters, Rng& rng);

/// Layered mixture applied to one [C, H, W] image.
ad::Var apply_policy(const PolicySample& sample, const ad::Var& x0, Mixture mixture = Mixture::Sparse);

/// Forward-only application that runs just the selected transform of each
/// applied layer.
Tensor apply_selected(const PolicySample& sample, const Tensor& x0);

/// Applies policies to a [B, C, H, W] batch. `noise` holds B draws in
/// per-image mode or a single shared draw in per-batch mode.
ad::Var apply_policy_batch(const Tensor& x, const PolicyVars& vars, relax::Temperature t, int sinkhorn_iters,
                           std::span<const PolicyNoise> noise, Mixture mixture = Mixture::Sparse);
ad::Var apply_policy_batch(const Tensor& x, const PolicyVars& vars, relax::Temperature t, int sinkhorn_iters,
                           Rng& rng, SamplingMode mode, Mixture mixture = Mixture::Sparse);

/// Noise-free summaries used for reporting.
Tensor depth_distribution(const PolicyParams& params);
/// Columns of the Sinkhorn-normalized padded type logits at temperature 1.
Tensor type_marginals(const PolicyParams& params, int sinkhorn_iters);
/// Lower and upper magnitude interval ends, N x K each.
std::pair<Tensor, Tensor> magnitude_intervals(const PolicyParams& params);

std::string serialize_policy(const PolicyParams& params, const ScheduleConfig& sched);
/// Parses a policy document. Fields not stored in the file (t_start, t_end,
/// warm-up fractions) keep their defaults. Throws ParseError naming the
/// offending path.
std::pair<PolicyParams, ScheduleConfig> deserialize_policy(const std::string& doc);

std::string to_string(MagnitudeDist d);
std::string to_string(DepthMode d);
std::string to_string(SamplingMode m);
MagnitudeDist parse_magnitude_dist(const std::string& s);
DepthMode parse_depth_mode(const std::string& s);
SamplingMode parse_sampling_mode(const std::string& s);

}  // namespace augsearch::policy
