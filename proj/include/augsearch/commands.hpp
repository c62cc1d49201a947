#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "augsearch/bilevel.hpp"
#include "augsearch/data.hpp"
#include "augsearch/training.hpp"

// The work behind each command-line subcommand, kept out of the binary so it
// can be tested directly.
namespace augsearch::cli {

/// Name of the built-in synthetic rotation task accepted by --dataset.
inline constexpr const char* kSynthDataset = "synth-rot";
inline constexpr std::size_t kSynthDefaultSize = 1000;

struct DataOptions {
    std::string dataset = kSynthDataset;  // "synth-rot" or a file path
    std::string format = "container";
    std::optional<std::size_t> subset;
    std::uint64_t seed = 1;  // dataset generation, subset and split
};

/// Loads (or generates) the dataset, applies the subset and splits it into
/// train and validation halves.
std::pair<data::LabeledDataset, data::LabeledDataset> load_split(const DataOptions& opts,
                                                                 std::vector<std::string>* warnings = nullptr);

/// Writes `content` to a temporary sibling and renames it over `path`.
void write_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_text(const std::filesystem::path& path);

struct SearchOptions {
    DataOptions data;
    bilevel::SearchConfig search;
    std::filesystem::path out = "policy.json";
    std::filesystem::path metrics;  // defaults to <out stem>.metrics.csv
};

/// p.json -> p.metrics.csv
std::filesystem::path default_metrics_path(const std::filesystem::path& out);

/// Runs the search, rewriting the metrics CSV after every epoch and the
/// policy file at the end. A failed run keeps the epochs it finished.
bilevel::SearchResult cmd_search(const SearchOptions& opts, std::ostream& log);

struct Interval {
    double mean = 0.0;
    double half_width = 0.0;  // NaN for fewer than two values
};

/// Mean and half-width of the two-sided 95% Student-t interval.
Interval mean_ci95(std::span<const double> values);

/// Per-image augmentation with a fixed policy, keyed by (seed, step, image).
training::Augmenter policy_augmenter(const policy::PolicyParams& p, relax::Temperature t, int sinkhorn_iters,
                                     std::uint64_t seed);

struct EvalOptions {
    DataOptions data;
    std::filesystem::path policy;
    std::optional<double> t_eval;  // the policy file's value when unset
    std::vector<std::uint64_t> seeds{1};
    training::TrainConfig train;
    bool baseline = true;
    std::filesystem::path out;  // CSV report; none when empty
};

struct EvalReport {
    std::vector<std::uint64_t> seeds;
    std::vector<double> policy_accuracy;
    std::vector<double> baseline_accuracy;  // empty without a baseline

    std::string csv() const;
};

/// Trains a fresh classifier per seed with the fixed policy (and without
/// augmentation for the baseline) and reports validation accuracy.
EvalReport cmd_eval(const EvalOptions& opts, std::ostream& log);

/// Validation accuracy after training from scratch with the policy.
double evaluate_policy(const policy::PolicyParams& p, relax::Temperature t, int sinkhorn_iters,
                       const data::LabeledDataset& train, const data::LabeledDataset& val,
                       const training::TrainConfig& cfg);

enum class Sampler { Sinkhorn, IndependentSoftmax };
std::string to_string(Sampler s);

struct RepetitionStats {
    double rate = 0.0;  // fraction of draws repeating a transform across layers
    double std = 0.0;   // standard deviation of the per-draw indicator
    std::size_t samples = 0;
    bool all_one_hot = true;  // every hardened column was one-hot
};

/// Repetition rate of hardened type assignments under a uniform Pi with N
/// types and K layers. The independent sampler draws each layer's type from
/// its own Gumbel-Softmax and ignores `sinkhorn_iters`.
RepetitionStats repetition_rate(std::size_t num_types, std::size_t max_depth, int sinkhorn_iters, double t,
                                Sampler sampler, std::size_t samples, std::uint64_t seed);

/// Mean over phi entries of the variance, across augmentation draws, of the
/// training-loss gradient on one fixed batch and classifier.
double policy_gradient_variance(const policy::PolicyParams& p, const model::TinyClassifier& net,
                                const model::ParamList& theta, const data::Batch& batch, relax::Temperature t,
                                int sinkhorn_iters, policy::SamplingMode mode, std::size_t draws, std::uint64_t seed);

struct AblateOptions {
    std::string ablation;  // repetition-rate, fixed-depth, sampling-mode, frozen-dof
    DataOptions data;
    bilevel::SearchConfig search;
    std::vector<std::uint64_t> seeds{1, 2};
    std::optional<double> t_eval;
    std::size_t samples = 10000;
    double temperature = 0.1;
    std::filesystem::path out;
};

inline constexpr const char* kAblations[] = {"repetition-rate", "fixed-depth", "sampling-mode", "frozen-dof"};

/// Runs the ablation and returns its CSV (also written to `out` when set).
std::string cmd_ablate(const AblateOptions& opts, std::ostream& log);

/// Distribution of the number of applied layers: softmax(delta) for the
/// categorical depth, the Poisson-binomial of the gate probabilities for
/// Bernoulli gates.
std::vector<double> applied_depth_distribution(const policy::PolicyParams& p);

/// Human-readable summary of a policy file.
std::string cmd_inspect(const std::filesystem::path& policy_file);

}  // namespace augsearch::cli
