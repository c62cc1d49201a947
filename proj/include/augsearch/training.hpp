#pragma once

#include <functional>
#include <span>

#include "augsearch/data.hpp"
#include "augsearch/model.hpp"
#include "augsearch/optim.hpp"

namespace augsearch::training {

/// Runs fn(0..n-1) on up to `workers` threads. Each index must write only
/// its own outputs, so results do not depend on the worker count.
void parallel_for(std::size_t workers, std::size_t n, const std::function<void(std::size_t)>& fn);

/// Batches are split into shards of this many images, each differentiated on
/// its own tape; shard gradients are summed in shard order.
inline constexpr std::size_t kShardSize = 8;

/// Shard boundaries [begin, end) for a batch of `n` images.
std::vector<std::pair<std::size_t, std::size_t>> shards(std::size_t n);

struct LossGrad {
    double loss = 0.0;
    model::ParamList grad;
};

/// Mean cross-entropy over the batch and its gradient with respect to theta.
LossGrad classifier_loss_grad(const model::TinyClassifier& net, const model::ParamList& theta, const Tensor& images,
                              std::span<const int> labels, std::size_t workers = 1);

/// Mean cross-entropy without gradients.
double classifier_loss(const model::TinyClassifier& net, const model::ParamList& theta, const Tensor& images,
                       std::span<const int> labels);

/// Fraction of correctly classified samples.
double accuracy(const model::TinyClassifier& net, const model::ParamList& theta, const data::LabeledDataset& ds,
                std::size_t workers = 1);

/// Per-image augmentation hook: (image [C,H,W], step, position in batch).
using Augmenter = std::function<Tensor(const Tensor& image, std::size_t step, std::size_t position)>;

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    optim::SgdConfig sgd;
    bool cosine = true;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
};

struct TrainResult {
    model::ParamList theta;
    double final_train_loss = 0.0;
    double val_accuracy = 0.0;
};

/// Trains a freshly initialized classifier with optional augmentation and
/// reports validation accuracy.
TrainResult train_classifier(const model::TinyClassifier& net, const data::LabeledDataset& train,
                             const data::LabeledDataset& val, const TrainConfig& cfg, const Augmenter& augment = {});

/// Shuffled mini-batch index lists for one epoch.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::string_view stream, std::size_t epoch);

}  // namespace augsearch::training
