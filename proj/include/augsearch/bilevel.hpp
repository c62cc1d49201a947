#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "augsearch/data.hpp"
#include "augsearch/model.hpp"
#include "augsearch/optim.hpp"
#include "augsearch/policy.hpp"

// Alternating one-step bilevel search: an SGD step on the classifier
// weights theta, then a hypergradient step on the policy parameters phi.
namespace augsearch::bilevel {

enum class FdMode { Central, OneSided };
/// Where the validation gradient v is taken: at the virtual step
/// theta - eta * grad (Exact) or at theta itself (Current).
enum class HypergradPoint { Exact, Current };

struct HypergradConfig {
    FdMode mode = FdMode::Central;
    double fd_epsilon_scale = 0.01;
    HypergradPoint point = HypergradPoint::Exact;
    void validate() const;
};

using GradFn = std::function<model::ParamList(const model::ParamList& theta)>;

struct HypergradResult {
    model::ParamList dphi;  // empty when skipped
    model::ParamList theta_virtual;
    double v_norm = 0.0;
    double epsilon = 0.0;
    bool skipped = false;
};

/// Finite-difference approximation of
///   d/dphi L_val(theta - eta * grad_theta L_train(theta, phi))
///     = -eta * grad^2_{phi,theta} L_train(theta, phi) * v,
/// v = grad_theta L_val at the virtual point (or at theta). The mixed term is
/// [g_phi(theta + e v) - g_phi(theta - e v)] / (2e) with e = scale / |v|, or
/// the one-sided [g_phi(theta + e v) - g_phi(theta)] / e. Skips when |v| = 0.
HypergradResult fd_hypergradient(const model::ParamList& theta, const GradFn& train_grad_theta,
                                 const GradFn& val_grad_theta, const GradFn& train_grad_phi, double eta,
                                 const HypergradConfig& cfg);

enum class Group { Mu, Pi, Delta };

/// Policy parameters flattened in a fixed order: delta, pi, mu_low, mu_high,
/// then mag_mean, mag_std (Gaussian) and gate_logits (Bernoulli).
model::ParamList phi_to_list(const policy::PolicyParams& p);
void list_to_phi(const model::ParamList& list, policy::PolicyParams& p);
/// Group owning each entry of phi_to_list(p).
std::vector<Group> phi_groups(const policy::PolicyParams& p);

struct SearchConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    std::size_t max_depth = 7;
    policy::ScheduleConfig sched;
    double lr_mu = 0.02;
    double lr_pi = 0.01;
    double lr_delta = 1.0;
    optim::SgdConfig sgd;
    bool cosine = true;
    /// Virtual step size; the current classifier learning rate when unset.
    std::optional<double> eta;
    HypergradConfig hyper;
    policy::Groups freeze;
    policy::MagnitudeDist magnitude_dist = policy::MagnitudeDist::Uniform;
    policy::DepthMode depth_mode = policy::DepthMode::Categorical;
    policy::SamplingMode sampling = policy::SamplingMode::PerImage;
    /// Starting policy; the uniform initialization when unset. Must match
    /// max_depth, magnitude_dist and depth_mode.
    std::optional<policy::PolicyParams> init;

    void validate() const;
};

/// Lower bound kept on Gaussian magnitude deviations after each update.
inline constexpr double kMinMagnitudeStd = 1e-4;

struct EpochMetrics {
    std::size_t epoch = 0;
    double temperature = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    std::vector<double> depth_probs;     // K+1 (categorical) or K gate probabilities
    std::vector<double> layer_entropy;   // entropy of each layer's type marginal
    double mean_sigma_low = 0.0;
    double mean_sigma_high = 0.0;
};

struct SearchResult {
    policy::PolicyParams policy;
    policy::ScheduleConfig sched;
    std::vector<EpochMetrics> metrics;
    std::size_t skipped_hypersteps = 0;
    model::ParamList theta;
};

/// Mean cross-entropy of the classifier on a batch augmented by per-image (or
/// per-batch) policy draws; differentiable in theta and phi.
ad::Var train_loss(const model::TinyClassifier& net, std::span<const ad::Var> theta, const policy::PolicyVars& phi,
                   const Tensor& images, std::span<const int> labels, relax::Temperature t, int sinkhorn_iters,
                   std::span<const policy::PolicyNoise> noise, policy::Mixture mixture = policy::Mixture::Sparse);

/// Plain mean cross-entropy, no augmentation.
ad::Var val_loss(const model::TinyClassifier& net, std::span<const ad::Var> theta, const Tensor& images,
                 std::span<const int> labels);

/// Runs the alternating search. `on_epoch` sees each epoch's metrics as soon
/// as they are recorded. Throws ConfigError for unusable configurations.
SearchResult search_loop(const SearchConfig& cfg, const data::LabeledDataset& train, const data::LabeledDataset& val,
                         const std::function<void(const EpochMetrics&)>& on_epoch = {});

/// Noise for one search step: one draw per image (per-image) or one shared
/// draw (per-batch), keyed by (seed, step, image).
std::vector<policy::PolicyNoise> step_noise(const policy::PolicyParams& params, std::uint64_t seed,
                                            std::string_view stream, std::size_t step, std::size_t batch,
                                            policy::SamplingMode mode);

std::string metrics_header(std::size_t max_depth, policy::DepthMode depth_mode = policy::DepthMode::Categorical);
std::string metrics_row(const EpochMetrics& m);

/// Metrics of the current parameters (no losses).
EpochMetrics policy_metrics(const policy::PolicyParams& p, int sinkhorn_iters);

}  // namespace augsearch::bilevel
