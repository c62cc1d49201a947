#include "augsearch/bilevel.hpp"

#include <cmath>
#include <sstream>

#include "augsearch/errors.hpp"
#include "augsearch/training.hpp"
#include "augsearch/transforms.hpp"

namespace augsearch::bilevel {

void HypergradConfig::validate() const {
    if (!(fd_epsilon_scale > 0.0) || !std::isfinite(fd_epsilon_scale)) {
        throw ConfigError("fd_epsilon_scale must be positive");
    }
}

HypergradResult fd_hypergradient(const model::ParamList& theta, const GradFn& train_grad_theta,
                                 const GradFn& val_grad_theta, const GradFn& train_grad_phi, double eta,
                                 const HypergradConfig& cfg) {
    cfg.validate();
    HypergradResult r;
    r.theta_virtual = theta;
    model::axpy(-eta, train_grad_theta(theta), r.theta_virtual);
    const model::ParamList v = val_grad_theta(cfg.point == HypergradPoint::Exact ? r.theta_virtual : theta);
    r.v_norm = model::norm(v);
    if (!(r.v_norm > 0.0)) {
        r.skipped = true;
        return r;
    }
    r.epsilon = cfg.fd_epsilon_scale / r.v_norm;
    model::ParamList plus = theta;
    model::axpy(r.epsilon, v, plus);
    const model::ParamList g_plus = train_grad_phi(plus);
    model::ParamList g_minus;
    double span = r.epsilon;
    if (cfg.mode == FdMode::Central) {
        model::ParamList minus = theta;
        model::axpy(-r.epsilon, v, minus);
        g_minus = train_grad_phi(minus);
        span = 2.0 * r.epsilon;
    } else {
        g_minus = train_grad_phi(theta);
    }
    r.dphi = model::zeros_like(g_plus);
    model::axpy(-eta / span, g_plus, r.dphi);
    model::axpy(eta / span, g_minus, r.dphi);
    return r;
}

model::ParamList phi_to_list(const policy::PolicyParams& p) {
    model::ParamList out{p.delta, p.pi, p.mu_low, p.mu_high};
    if (p.magnitude_dist == policy::MagnitudeDist::Gaussian) {
        out.push_back(p.mag_mean);
        out.push_back(p.mag_std);
    }
    if (p.depth_mode == policy::DepthMode::Bernoulli) out.push_back(p.gate_logits);
    return out;
}

void list_to_phi(const model::ParamList& list, policy::PolicyParams& p) {
    if (list.size() != phi_groups(p).size()) throw ShapeError("list_to_phi: wrong number of tensors");
    std::size_t i = 0;
    p.delta = list[i++];
    p.pi = list[i++];
    p.mu_low = list[i++];
    p.mu_high = list[i++];
    if (p.magnitude_dist == policy::MagnitudeDist::Gaussian) {
        p.mag_mean = list[i++];
        p.mag_std = list[i++];
    }
    if (p.depth_mode == policy::DepthMode::Bernoulli) p.gate_logits = list[i++];
}

std::vector<Group> phi_groups(const policy::PolicyParams& p) {
    std::vector<Group> g{Group::Delta, Group::Pi, Group::Mu, Group::Mu};
    if (p.magnitude_dist == policy::MagnitudeDist::Gaussian) {
        g.push_back(Group::Mu);
        g.push_back(Group::Mu);
    }
    if (p.depth_mode == policy::DepthMode::Bernoulli) g.push_back(Group::Delta);
    return g;
}

void SearchConfig::validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (workers == 0) throw ConfigError("workers must be positive");
    if (max_depth < 1 || max_depth > transforms::kNumTransforms) {
        throw ConfigError("max depth must lie in [1, " + std::to_string(transforms::kNumTransforms) + "]");
    }
    sched.validate();
    for (double lr : {lr_mu, lr_pi, lr_delta, sgd.lr})
        if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rates must be non-negative");
    if (eta && (!(*eta >= 0.0) || !std::isfinite(*eta))) throw ConfigError("eta must be non-negative");
    hyper.validate();
    if (init) {
        init->validate();
        if (init->max_depth != max_depth || init->magnitude_dist != magnitude_dist || init->depth_mode != depth_mode) {
            throw ConfigError("initial policy does not match the configured depth, magnitude and depth modes");
        }
    }
}

ad::Var train_loss(const model::TinyClassifier& net, std::span<const ad::Var> theta, const policy::PolicyVars& phi,
                   const Tensor& images, std::span<const int> labels, relax::Temperature t, int sinkhorn_iters,
                   std::span<const policy::PolicyNoise> noise, policy::Mixture mixture) {
    ad::Var x = policy::apply_policy_batch(images, phi, t, sinkhorn_iters, noise, mixture);
    return ad::cross_entropy(net.forward(theta, x), labels);
}

ad::Var val_loss(const model::TinyClassifier& net, std::span<const ad::Var> theta, const Tensor& images,
                 std::span<const int> labels) {
    return ad::cross_entropy(net.forward(theta, theta[0].tape().constant(images)), labels);
}

std::vector<policy::PolicyNoise> step_noise(const policy::PolicyParams& params, std::uint64_t seed,
                                            std::string_view stream, std::size_t step, std::size_t batch,
                                            policy::SamplingMode mode) {
    const std::size_t draws = mode == policy::SamplingMode::PerImage ? batch : 1;
    std::vector<policy::PolicyNoise> out;
    out.reserve(draws);
    for (std::size_t b = 0; b < draws; ++b) {
        Rng rng(seed, stream, {step, b});
        out.push_back(policy::draw_noise(params, rng));
    }
    return out;
}

EpochMetrics policy_metrics(const policy::PolicyParams& p, int sinkhorn_iters) {
    EpochMetrics m;
    if (p.depth_mode == policy::DepthMode::Categorical) {
        const Tensor d = policy::depth_distribution(p);
        m.depth_probs.assign(d.values().begin(), d.values().end());
    } else {
        for (double g : p.gate_logits.values()) m.depth_probs.push_back(1.0 / (1.0 + std::exp(-g)));
    }
    const Tensor marg = policy::type_marginals(p, sinkhorn_iters);
    for (std::size_t k = 0; k < p.max_depth; ++k) {
        double total = 0.0, h = 0.0;
        for (std::size_t i = 0; i < p.num_types; ++i) total += marg.at(i, k);
        for (std::size_t i = 0; i < p.num_types; ++i) {
            const double q = marg.at(i, k) / total;
            if (q > 0.0) h -= q * std::log(q);
        }
        m.layer_entropy.push_back(h);
    }
    const auto [lo, hi] = policy::magnitude_intervals(p);
    for (double v : lo.values()) m.mean_sigma_low += v;
    for (double v : hi.values()) m.mean_sigma_high += v;
    m.mean_sigma_low /= static_cast<double>(lo.size());
    m.mean_sigma_high /= static_cast<double>(hi.size());
    return m;
}

std::string metrics_header(std::size_t max_depth, policy::DepthMode depth_mode) {
    std::ostringstream os;
    os << "epoch,t,train_loss,val_loss";
    if (depth_mode == policy::DepthMode::Categorical) {
        for (std::size_t k = 0; k <= max_depth; ++k) os << ",depth_p" << k;
    } else {
        for (std::size_t k = 1; k <= max_depth; ++k) os << ",gate_p" << k;
    }
    for (std::size_t k = 1; k <= max_depth; ++k) os << ",entropy_l" << k;
    os << ",mean_sigma_low,mean_sigma_high";
    return os.str();
}

std::string metrics_row(const EpochMetrics& m) {
    std::ostringstream os;
    os.precision(17);
    os << m.epoch << ',' << m.temperature << ',' << m.train_loss << ',' << m.val_loss;
    for (double d : m.depth_probs) os << ',' << d;
    for (double h : m.layer_entropy) os << ',' << h;
    os << ',' << m.mean_sigma_low << ',' << m.mean_sigma_high;
    return os.str();
}

namespace {

Tensor image_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    Shape s = x.shape();
    const std::size_t per = x.size() / s[0];
    s[0] = end - begin;
    Tensor out(s);
    std::copy_n(x.data() + begin * per, (end - begin) * per, out.data());
    return out;
}

bool group_active(Group g, const policy::Groups& active) {
    switch (g) {
        case Group::Mu: return active.mu;
        case Group::Pi: return active.pi;
        case Group::Delta: return active.delta;
    }
    return false;
}

// One Adam state per parameter group, each over that group's tensors.
class GroupedAdam {
public:
    GroupedAdam(const policy::PolicyParams& phi, const SearchConfig& cfg) : groups_(phi_groups(phi)) {
        const model::ParamList all = phi_to_list(phi);
        for (Group g : {Group::Mu, Group::Pi, Group::Delta}) {
            const double lr = g == Group::Mu ? cfg.lr_mu : g == Group::Pi ? cfg.lr_pi : cfg.lr_delta;
            adams_.emplace_back(optim::AdamConfig{lr}, select(all, g));
        }
    }

    void step(policy::PolicyParams& phi, const model::ParamList& grad, const policy::Groups& active) {
        model::ParamList all = phi_to_list(phi);
        for (Group g : {Group::Mu, Group::Pi, Group::Delta}) {
            if (!group_active(g, active)) continue;
            model::ParamList params = select(all, g);
            adams_[static_cast<std::size_t>(g)].step(params, select(grad, g));
            std::size_t j = 0;
            for (std::size_t i = 0; i < all.size(); ++i)
                if (groups_[i] == g) all[i] = std::move(params[j++]);
        }
        list_to_phi(all, phi);
    }

private:
    model::ParamList select(const model::ParamList& all, Group g) const {
        model::ParamList out;
        for (std::size_t i = 0; i < all.size(); ++i)
            if (groups_[i] == g) out.push_back(all[i]);
        return out;
    }

    std::vector<Group> groups_;
    std::vector<optim::Adam> adams_;
};

}  // namespace

SearchResult search_loop(const SearchConfig& cfg, const data::LabeledDataset& train, const data::LabeledDataset& val,
                         const std::function<void(const EpochMetrics&)>& on_epoch) {
    cfg.validate();
    train.validate();
    val.validate();
    if (train.size() == 0 || val.size() == 0) throw ConfigError("search needs nonempty train and validation halves");
    const Shape img = train.image_shape();
    if (img.size() != 3 || val.image_shape() != img) throw ConfigError("train and validation images must share a [C,H,W] shape");
    const model::TinyClassifier net({img[0], img[1], img[2], train.class_count});

    SearchResult result;
    result.sched = cfg.sched;
    Rng init_rng(cfg.seed, "init");
    model::ParamList theta = net.init(init_rng);
    policy::PolicyParams phi = cfg.init ? *cfg.init
                                        : policy::PolicyParams::initial(cfg.max_depth, transforms::kNumTransforms,
                                                                        cfg.magnitude_dist, cfg.depth_mode);
    optim::Sgd sgd(cfg.sgd, theta);
    GroupedAdam adam(phi, cfg);

    const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = per_epoch * cfg.epochs;
    const int L = cfg.sched.sinkhorn_iters;
    const Shape img_shape = img;
    const std::size_t per_image = numel(img_shape);

    std::vector<std::vector<std::size_t>> val_batches;
    std::size_t val_cursor = 0, val_round = 0;

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        std::size_t seen = 0;
        double temperature = cfg.sched.t_start;
        for (const auto& idx : training::epoch_batches(train.size(), cfg.batch_size, cfg.seed, "search-train", epoch)) {
            const double progress = static_cast<double>(step) / static_cast<double>(total);
            const relax::Temperature t =
                policy::anneal_temperature(progress * static_cast<double>(cfg.epochs), static_cast<double>(cfg.epochs), cfg.sched);
            temperature = t.value();
            const policy::Groups gate = policy::warmup_gate(progress, cfg.sched);
            const policy::Groups active{gate.mu && !cfg.freeze.mu, gate.pi && !cfg.freeze.pi,
                                        gate.delta && !cfg.freeze.delta};
            const data::Batch batch = data::gather(train, idx);
            const std::size_t B = idx.size();
            const auto noise = step_noise(phi, cfg.seed, "policy", step, B, cfg.sampling);

            // Augmented images for the theta updates: only the selected transforms run.
            Tensor augmented(batch.images.shape());
            {
                std::vector<Tensor> outs(B);
                training::parallel_for(cfg.workers, B, [&](std::size_t b) {
                    ad::Tape tape;
                    const auto vars = policy::bind(tape, phi, policy::Groups{});
                    const auto s = policy::sample_policy(vars, t, L, noise[noise.size() == 1 ? 0 : b]);
                    Tensor x(img_shape);
                    std::copy_n(batch.images.data() + b * per_image, per_image, x.data());
                    outs[b] = policy::apply_selected(s, x);
                });
                for (std::size_t b = 0; b < B; ++b) std::copy_n(outs[b].data(), per_image, augmented.data() + b * per_image);
            }

            const double lr = cfg.cosine ? optim::cosine_lr(cfg.sgd.lr, step, total) : cfg.sgd.lr;
            const training::LossGrad lg = training::classifier_loss_grad(net, theta, augmented, batch.labels, cfg.workers);
            sgd.step(theta, lg.grad, lr);
            loss_sum += lg.loss * static_cast<double>(B);
            seen += B;

            if (active.any()) {
                if (val_cursor == val_batches.size()) {
                    val_batches = training::epoch_batches(val.size(), cfg.batch_size, cfg.seed, "search-val", val_round++);
                    val_cursor = 0;
                }
                const data::Batch vb = data::gather(val, val_batches[val_cursor++]);
                auto train_grad_theta = [&](const model::ParamList& th) {
                    return training::classifier_loss_grad(net, th, augmented, batch.labels, cfg.workers).grad;
                };
                auto val_grad_theta = [&](const model::ParamList& th) {
                    return training::classifier_loss_grad(net, th, vb.images, vb.labels, cfg.workers).grad;
                };
                auto train_grad_phi = [&](const model::ParamList& th) {
                    const auto parts = training::shards(B);
                    std::vector<model::ParamList> grads(parts.size());
                    training::parallel_for(cfg.workers, parts.size(), [&](std::size_t s) {
                        const auto [b, e] = parts[s];
                        ad::Tape tape;
                        const auto theta_vars = net.bind(tape, th, false);
                        const auto phi_vars = policy::bind(tape, phi, active);
                        const std::span<const policy::PolicyNoise> shard_noise =
                            noise.size() == 1 ? std::span<const policy::PolicyNoise>(noise)
                                              : std::span<const policy::PolicyNoise>(noise).subspan(b, e - b);
                        ad::Var loss = train_loss(net, theta_vars, phi_vars, image_rows(batch.images, b, e),
                                                  std::span<const int>(batch.labels).subspan(b, e - b), t, L, shard_noise);
                        tape.backward(ad::scale(loss, static_cast<double>(e - b) / static_cast<double>(B)));
                        grads[s] = phi_to_list(policy::gradients(tape, phi_vars, phi));
                    });
                    model::ParamList total_grad = model::zeros_like(phi_to_list(phi));
                    for (const auto& g : grads) model::axpy(1.0, g, total_grad);
                    return total_grad;
                };
                const double eta = cfg.eta.value_or(lr);
                const HypergradResult hr =
                    fd_hypergradient(theta, train_grad_theta, val_grad_theta, train_grad_phi, eta, cfg.hyper);
                if (hr.skipped) {
                    ++result.skipped_hypersteps;
                } else {
                    adam.step(phi, hr.dphi, active);
                    if (phi.magnitude_dist == policy::MagnitudeDist::Gaussian)
                        for (double& s : phi.mag_std.values()) s = std::max(s, kMinMagnitudeStd);
                }
            }
            if (!model::all_finite(theta)) throw NumericError("classifier parameters became non-finite at step " + std::to_string(step));
            if (!model::all_finite(phi_to_list(phi))) throw NumericError("policy parameters became non-finite at step " + std::to_string(step));
            ++step;
        }

        EpochMetrics m = policy_metrics(phi, L);
        m.epoch = epoch + 1;
        m.temperature = temperature;
        m.train_loss = loss_sum / static_cast<double>(seen);
        double vsum = 0.0;
        for (std::size_t b = 0; b < val.size(); b += 128) {
            const std::size_t e = std::min(val.size(), b + 128);
            vsum += training::classifier_loss(net, theta, image_rows(val.images, b, e),
                                              std::span<const int>(val.labels).subspan(b, e - b)) *
                    static_cast<double>(e - b);
        }
        m.val_loss = vsum / static_cast<double>(val.size());
        result.metrics.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    result.policy = phi;
    result.theta = std::move(theta);
    return result;
}

}  // namespace augsearch::bilevel
