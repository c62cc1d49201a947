#include "augsearch/training.hpp"

#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "augsearch/errors.hpp"

namespace augsearch::training {

void parallel_for(std::size_t workers, std::size_t n, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> threads;
    const std::size_t count = std::min(workers, n);
    for (std::size_t w = 0; w < count; ++w) {
        threads.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += count) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);
}

std::vector<std::pair<std::size_t, std::size_t>> shards(std::size_t n) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t b = 0; b < n; b += kShardSize) out.emplace_back(b, std::min(n, b + kShardSize));
    return out;
}

namespace {

Tensor rows(const Tensor& x, std::size_t begin, std::size_t end) {
    Shape s = x.shape();
    const std::size_t per = x.size() / s[0];
    s[0] = end - begin;
    Tensor out(s);
    std::copy_n(x.data() + begin * per, (end - begin) * per, out.data());
    return out;
}

}  // namespace

LossGrad classifier_loss_grad(const model::TinyClassifier& net, const model::ParamList& theta, const Tensor& images,
                              std::span<const int> labels, std::size_t workers) {
    const std::size_t B = labels.size();
    if (B == 0 || images.dim(0) != B) throw ShapeError("classifier_loss_grad: batch and labels disagree");
    const auto parts = shards(B);
    std::vector<LossGrad> results(parts.size());
    parallel_for(workers, parts.size(), [&](std::size_t s) {
        const auto [b, e] = parts[s];
        ad::Tape tape;
        const auto vars = net.bind(tape, theta, true);
        ad::Var logits = net.forward(vars, tape.constant(rows(images, b, e)));
        ad::Var loss = ad::scale(ad::cross_entropy(logits, labels.subspan(b, e - b)),
                                 static_cast<double>(e - b) / static_cast<double>(B));
        tape.backward(loss);
        results[s].loss = loss.item();
        for (const auto& v : vars) results[s].grad.push_back(tape.grad(v));
    });
    LossGrad total{0.0, model::zeros_like(theta)};
    for (const auto& r : results) {
        total.loss += r.loss;
        model::axpy(1.0, r.grad, total.grad);
    }
    return total;
}

double classifier_loss(const model::TinyClassifier& net, const model::ParamList& theta, const Tensor& images,
                       std::span<const int> labels) {
    ad::Tape tape;
    const auto vars = net.bind(tape, theta, false);
    return ad::cross_entropy(net.forward(vars, tape.constant(images)), labels).item();
}

double accuracy(const model::TinyClassifier& net, const model::ParamList& theta, const data::LabeledDataset& ds,
                std::size_t workers) {
    if (ds.size() == 0) throw ConfigError("accuracy of an empty dataset");
    constexpr std::size_t kChunk = 128;
    const std::size_t chunks = (ds.size() + kChunk - 1) / kChunk;
    std::vector<std::size_t> correct(chunks, 0);
    parallel_for(workers, chunks, [&](std::size_t c) {
        const std::size_t b = c * kChunk, e = std::min(ds.size(), b + kChunk);
        const auto pred = model::predictions(net.logits(theta, rows(ds.images, b, e)));
        for (std::size_t i = b; i < e; ++i) correct[c] += pred[i - b] == ds.labels[i];
    });
    return static_cast<double>(std::accumulate(correct.begin(), correct.end(), std::size_t{0})) /
           static_cast<double>(ds.size());
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::string_view stream, std::size_t epoch) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed, stream, {epoch});
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t b = 0; b < n; b += batch_size) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
    }
    return out;
}

TrainResult train_classifier(const model::TinyClassifier& net, const data::LabeledDataset& train,
                             const data::LabeledDataset& val, const TrainConfig& cfg, const Augmenter& augment) {
    if (train.size() == 0 || val.size() == 0) throw ConfigError("training needs nonempty train and validation sets");
    if (cfg.epochs == 0) throw ConfigError("epochs must be positive");
    Rng init_rng(cfg.seed, "init");
    TrainResult result;
    result.theta = net.init(init_rng);
    optim::Sgd sgd(cfg.sgd, result.theta);
    const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = per_epoch * cfg.epochs;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (const auto& idx : epoch_batches(train.size(), cfg.batch_size, cfg.seed, "shuffle", epoch)) {
            data::Batch batch = data::gather(train, idx);
            if (augment) {
                const Shape s = train.image_shape();
                const std::size_t per = numel(s);
                parallel_for(cfg.workers, idx.size(), [&](std::size_t b) {
                    Tensor img(s);
                    std::copy_n(batch.images.data() + b * per, per, img.data());
                    const Tensor out = augment(img, step, b);
                    std::copy_n(out.data(), per, batch.images.data() + b * per);
                });
            }
            const LossGrad lg = classifier_loss_grad(net, result.theta, batch.images, batch.labels, cfg.workers);
            const double lr = cfg.cosine ? optim::cosine_lr(cfg.sgd.lr, step, total) : cfg.sgd.lr;
            sgd.step(result.theta, lg.grad, lr);
            if (!model::all_finite(result.theta)) throw NumericError("classifier parameters became non-finite");
            loss_sum += lg.loss * static_cast<double>(idx.size());
            seen += idx.size();
            ++step;
        }
        result.final_train_loss = loss_sum / static_cast<double>(seen);
    }
    result.val_accuracy = accuracy(net, result.theta, val, cfg.workers);
    return result;
}

}  // namespace augsearch::training
