#include "augsearch/commands.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "augsearch/errors.hpp"
#include "augsearch/transforms.hpp"

namespace augsearch::cli {

namespace {

// Depth logit that pins the categorical depth for the fixed-depth ablation.
constexpr double kFixedDepthLogit = 50.0;
constexpr std::size_t kVarianceDraws = 64;

std::string fmt(double v, int digits = 6) {
    if (std::isnan(v)) return "nan";
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

double sample_std(std::span<const double> v) {
    if (v.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

training::TrainConfig eval_config(const bilevel::SearchConfig& s, std::uint64_t seed) {
    training::TrainConfig cfg;
    cfg.epochs = s.epochs;
    cfg.batch_size = s.batch_size;
    cfg.sgd = s.sgd;
    cfg.cosine = s.cosine;
    cfg.seed = seed;
    cfg.workers = s.workers;
    return cfg;
}

model::TinyClassifier classifier_for(const data::LabeledDataset& ds) {
    const Shape s = ds.image_shape();
    return model::TinyClassifier({s[0], s[1], s[2], ds.class_count});
}

}  // namespace

std::pair<data::LabeledDataset, data::LabeledDataset> load_split(const DataOptions& opts,
                                                                 std::vector<std::string>* warnings) {
    if (opts.subset && *opts.subset == 0) throw ConfigError("subset must be positive");
    data::LabeledDataset ds;
    if (opts.dataset == kSynthDataset) {
        ds = data::synth_rotation_task(opts.subset.value_or(kSynthDefaultSize), opts.seed);
    } else {
        const std::filesystem::path path(opts.dataset);
        if (!std::filesystem::exists(path)) throw ConfigError("dataset file " + path.string() + " does not exist");
        ds = data::load_raw_dataset(path, data::parse_format(opts.format));
        if (opts.subset) ds = data::subset(ds, *opts.subset, opts.seed);
    }
    return data::train_val(ds, opts.seed, warnings);
}

void write_atomic(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot write " + tmp.string());
        f << content;
        f.flush();
        if (!f) throw Error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open " + path.string());
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

std::filesystem::path default_metrics_path(const std::filesystem::path& out) {
    std::filesystem::path p = out;
    p.replace_extension(".metrics.csv");
    return p;
}

bilevel::SearchResult cmd_search(const SearchOptions& opts, std::ostream& log) {
    opts.search.validate();
    if (opts.out.empty()) throw ConfigError("an output path is required");
    std::vector<std::string> warnings;
    const auto [train, val] = load_split(opts.data, &warnings);
    for (const auto& w : warnings) log << "warning: " << w << '\n';
    log << "search: " << train.size() << " train / " << val.size() << " validation samples, " << opts.search.epochs
        << " epochs\n";

    const auto metrics_path = opts.metrics.empty() ? default_metrics_path(opts.out) : opts.metrics;
    std::string csv = bilevel::metrics_header(opts.search.max_depth, opts.search.depth_mode) + "\n";
    write_atomic(metrics_path, csv);
    auto result = bilevel::search_loop(opts.search, train, val, [&](const bilevel::EpochMetrics& m) {
        csv += bilevel::metrics_row(m) + "\n";
        write_atomic(metrics_path, csv);
        log << "epoch " << m.epoch << ": t " << fmt(m.temperature, 3) << ", train loss " << fmt(m.train_loss, 4)
            << ", val loss " << fmt(m.val_loss, 4) << '\n';
    });
    if (result.skipped_hypersteps > 0) {
        log << "skipped " << result.skipped_hypersteps << " hypergradient steps with a zero validation gradient\n";
    }
    write_atomic(opts.out, policy::serialize_policy(result.policy, result.sched));
    log << "wrote " << opts.out.string() << " and " << metrics_path.string() << '\n';
    return result;
}

Interval mean_ci95(std::span<const double> values) {
    if (values.empty()) throw ConfigError("no values to summarize");
    Interval r;
    for (double v : values) r.mean += v;
    r.mean /= static_cast<double>(values.size());
    if (values.size() < 2) {
        r.half_width = std::numeric_limits<double>::quiet_NaN();
        return r;
    }
    const boost::math::students_t dist(static_cast<double>(values.size() - 1));
    r.half_width = boost::math::quantile(dist, 0.975) * sample_std(values) / std::sqrt(static_cast<double>(values.size()));
    return r;
}

training::Augmenter policy_augmenter(const policy::PolicyParams& p, relax::Temperature t, int sinkhorn_iters,
                                     std::uint64_t seed) {
    return [p, t, sinkhorn_iters, seed](const Tensor& image, std::size_t step, std::size_t position) {
        Rng rng(seed, "eval-policy", {step, position});
        ad::Tape tape;
        const auto vars = policy::bind(tape, p, policy::Groups{});
        return policy::apply_selected(policy::sample_policy(vars, t, sinkhorn_iters, rng), image);
    };
}

double evaluate_policy(const policy::PolicyParams& p, relax::Temperature t, int sinkhorn_iters,
                       const data::LabeledDataset& train, const data::LabeledDataset& val,
                       const training::TrainConfig& cfg) {
    const auto net = classifier_for(train);
    return training::train_classifier(net, train, val, cfg, policy_augmenter(p, t, sinkhorn_iters, cfg.seed))
        .val_accuracy;
}

std::string EvalReport::csv() const {
    const bool base = !baseline_accuracy.empty();
    std::ostringstream os;
    os << "seed,policy_accuracy" << (base ? ",baseline_accuracy" : "") << '\n';
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        os << seeds[i] << ',' << fmt(policy_accuracy[i]);
        if (base) os << ',' << fmt(baseline_accuracy[i]);
        os << '\n';
    }
    const Interval p = mean_ci95(policy_accuracy);
    Interval b;
    if (base) b = mean_ci95(baseline_accuracy);
    os << "mean," << fmt(p.mean) << (base ? "," + fmt(b.mean) : "") << '\n';
    os << "ci95_half_width," << fmt(p.half_width) << (base ? "," + fmt(b.half_width) : "") << '\n';
    return os.str();
}

EvalReport cmd_eval(const EvalOptions& opts, std::ostream& log) {
    if (opts.seeds.empty()) throw ConfigError("eval needs at least one seed");
    if (opts.policy.empty()) throw ConfigError("eval needs a policy file");
    if (opts.train.epochs == 0 || opts.train.batch_size == 0) throw ConfigError("epochs and batch size must be positive");
    const auto [params, sched] = policy::deserialize_policy(read_text(opts.policy));
    const relax::Temperature t(opts.t_eval.value_or(sched.t_eval));
    std::vector<std::string> warnings;
    const auto [train, val] = load_split(opts.data, &warnings);
    for (const auto& w : warnings) log << "warning: " << w << '\n';
    const auto net = classifier_for(train);

    EvalReport report;
    report.seeds = opts.seeds;
    for (std::uint64_t seed : opts.seeds) {
        training::TrainConfig cfg = opts.train;
        cfg.seed = seed;
        report.policy_accuracy.push_back(evaluate_policy(params, t, sched.sinkhorn_iters, train, val, cfg));
        log << "seed " << seed << ": policy " << fmt(report.policy_accuracy.back(), 4);
        if (opts.baseline) {
            report.baseline_accuracy.push_back(training::train_classifier(net, train, val, cfg).val_accuracy);
            log << ", baseline " << fmt(report.baseline_accuracy.back(), 4);
        }
        log << '\n';
    }
    const Interval ci = mean_ci95(report.policy_accuracy);
    log << "policy accuracy " << fmt(ci.mean, 4) << " +/- " << fmt(ci.half_width, 4) << " (95% t interval)\n";
    if (!opts.out.empty()) write_atomic(opts.out, report.csv());
    return report;
}

std::string to_string(Sampler s) { return s == Sampler::Sinkhorn ? "sinkhorn" : "independent-softmax"; }

RepetitionStats repetition_rate(std::size_t num_types, std::size_t max_depth, int sinkhorn_iters, double t,
                                Sampler sampler, std::size_t samples, std::uint64_t seed) {
    if (max_depth == 0 || max_depth > num_types) throw ConfigError("repetition rate needs 1 <= K <= N");
    if (samples == 0) throw ConfigError("repetition rate needs at least one sample");
    const relax::Temperature temp(t);
    // Same noise for every L so rates at different L differ only through L.
    Rng rng(seed, "repetition-" + to_string(sampler));
    RepetitionStats r;
    r.samples = samples;
    std::size_t repeats = 0;
    for (std::size_t s = 0; s < samples; ++s) {
        ad::Tape tape;
        std::vector<std::size_t> rows;
        if (sampler == Sampler::Sinkhorn) {
            const auto d = relax::gumbel_sinkhorn_sample(tape.constant(Tensor(Shape{num_types, max_depth}, 0.0)), temp,
                                                         sinkhorn_iters, rng);
            const Tensor& h = d.hard.value();
            for (std::size_t c = 0; c < max_depth; ++c) {
                double sum = 0.0;
                for (std::size_t i = 0; i < num_types; ++i) {
                    const double v = h.at(i, c);
                    if (v != 0.0 && v != 1.0) r.all_one_hot = false;
                    sum += v;
                }
                if (sum != 1.0) r.all_one_hot = false;
            }
            rows = d.rows;
        } else {
            for (std::size_t c = 0; c < max_depth; ++c)
                rows.push_back(relax::gumbel_softmax_hard(tape.constant(Tensor(Shape{num_types}, 0.0)), temp, rng).index);
        }
        repeats += relax::has_repeated_row(rows);
    }
    r.rate = static_cast<double>(repeats) / static_cast<double>(samples);
    r.std = std::sqrt(r.rate * (1.0 - r.rate));
    return r;
}

double policy_gradient_variance(const policy::PolicyParams& p, const model::TinyClassifier& net,
                                const model::ParamList& theta, const data::Batch& batch, relax::Temperature t,
                                int sinkhorn_iters, policy::SamplingMode mode, std::size_t draws, std::uint64_t seed) {
    if (draws < 2) throw ConfigError("gradient variance needs at least two draws");
    const std::size_t B = batch.labels.size();
    model::ParamList sum, sq;
    for (std::size_t r = 0; r < draws; ++r) {
        const auto noise = bilevel::step_noise(p, seed, "gradient-variance", r, B, mode);
        ad::Tape tape;
        const auto th = net.bind(tape, theta, false);
        const auto vars = policy::bind(tape, p, policy::Groups{true, true, true});
        tape.backward(bilevel::train_loss(net, th, vars, batch.images, batch.labels, t, sinkhorn_iters, noise));
        model::ParamList g = bilevel::phi_to_list(policy::gradients(tape, vars, p));
        if (sum.empty()) {
            sum = model::zeros_like(g);
            sq = model::zeros_like(g);
        }
        model::axpy(1.0, g, sum);
        for (auto& tensor : g)
            for (double& v : tensor.values()) v *= v;
        model::axpy(1.0, g, sq);
    }
    double total = 0.0;
    std::size_t entries = 0;
    const double n = static_cast<double>(draws);
    for (std::size_t k = 0; k < sum.size(); ++k)
        for (std::size_t i = 0; i < sum[k].size(); ++i) {
            const double mean = sum[k][i] / n;
            total += std::max(0.0, (sq[k][i] / n - mean * mean) * n / (n - 1.0));
            ++entries;
        }
    return total / static_cast<double>(entries);
}

std::string cmd_ablate(const AblateOptions& opts, std::ostream& log) {
    if (std::find(std::begin(kAblations), std::end(kAblations), opts.ablation) == std::end(kAblations)) {
        throw ConfigError("unknown ablation '" + opts.ablation +
                          "' (expected repetition-rate, fixed-depth, sampling-mode or frozen-dof)");
    }
    opts.search.validate();
    std::ostringstream csv;

    if (opts.ablation == "repetition-rate") {
        csv << "L,sampler,rate,std,samples\n";
        for (int L : {1, 5, 10, 20})
            for (Sampler s : {Sampler::Sinkhorn, Sampler::IndependentSoftmax}) {
                const auto r = repetition_rate(transforms::kNumTransforms, opts.search.max_depth, L, opts.temperature, s,
                                               opts.samples, opts.data.seed);
                csv << L << ',' << to_string(s) << ',' << fmt(r.rate) << ',' << fmt(r.std) << ',' << r.samples << '\n';
                log << "L=" << L << ' ' << to_string(s) << ": repetition rate " << fmt(r.rate, 4) << '\n';
            }
    } else {
        if (opts.seeds.empty()) throw ConfigError("ablation needs at least one seed");
        std::vector<std::pair<std::string, bilevel::SearchConfig>> configs;
        const auto& base = opts.search;
        if (opts.ablation == "fixed-depth") {
            if (base.depth_mode != policy::DepthMode::Categorical) {
                throw ConfigError("the fixed-depth ablation needs the categorical depth mode");
            }
            for (std::size_t k = 1; k <= base.max_depth; ++k) {
                auto cfg = base;
                auto init = policy::PolicyParams::initial(base.max_depth, transforms::kNumTransforms,
                                                          base.magnitude_dist, base.depth_mode);
                init.delta[k] = kFixedDepthLogit;
                cfg.init = init;
                cfg.freeze.delta = true;
                configs.emplace_back("depth=" + std::to_string(k), cfg);
            }
        } else if (opts.ablation == "sampling-mode") {
            for (auto mode : {policy::SamplingMode::PerImage, policy::SamplingMode::PerBatch}) {
                auto cfg = base;
                cfg.sampling = mode;
                configs.emplace_back(policy::to_string(mode), cfg);
            }
        } else {
            configs.emplace_back("joint", base);
            for (const char* g : {"mu", "pi", "delta"}) {
                auto cfg = base;
                (g[0] == 'm' ? cfg.freeze.mu : g[0] == 'p' ? cfg.freeze.pi : cfg.freeze.delta) = true;
                configs.emplace_back(std::string("freeze-") + g, cfg);
            }
        }

        std::vector<std::string> warnings;
        const auto [train, val] = load_split(opts.data, &warnings);
        for (const auto& w : warnings) log << "warning: " << w << '\n';
        const bool variance = opts.ablation == "sampling-mode";

        csv << "config";
        for (auto s : opts.seeds) csv << ",seed_" << s;
        csv << ",mean,std" << (variance ? ",grad_variance" : "") << '\n';
        for (const auto& [name, cfg0] : configs) {
            std::vector<double> acc;
            for (auto seed : opts.seeds) {
                auto cfg = cfg0;
                cfg.seed = seed;
                const auto result = bilevel::search_loop(cfg, train, val);
                const relax::Temperature t(opts.t_eval.value_or(cfg.sched.t_eval));
                acc.push_back(evaluate_policy(result.policy, t, cfg.sched.sinkhorn_iters, train, val,
                                              eval_config(cfg, seed)));
                log << name << " seed " << seed << ": accuracy " << fmt(acc.back(), 4) << '\n';
            }
            const Interval ci = mean_ci95(acc);
            csv << name;
            for (double a : acc) csv << ',' << fmt(a);
            csv << ',' << fmt(ci.mean) << ',' << fmt(sample_std(acc));
            if (variance) {
                const auto net = classifier_for(train);
                Rng init_rng(opts.data.seed, "init");
                const auto theta = net.init(init_rng);
                std::vector<std::size_t> idx(std::min(cfg0.batch_size, train.size()));
                for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
                const auto p = policy::PolicyParams::initial(cfg0.max_depth, transforms::kNumTransforms,
                                                             cfg0.magnitude_dist, cfg0.depth_mode);
                const double v = policy_gradient_variance(p, net, theta, data::gather(train, idx),
                                                          relax::Temperature(cfg0.sched.t_start),
                                                          cfg0.sched.sinkhorn_iters, cfg0.sampling, kVarianceDraws,
                                                          opts.data.seed);
                csv << ',' << std::scientific << std::setprecision(6) << v << std::defaultfloat;
                log << name << ": policy gradient variance " << v << '\n';
            }
            csv << '\n';
        }
    }
    const std::string out = csv.str();
    if (!opts.out.empty()) write_atomic(opts.out, out);
    return out;
}

std::vector<double> applied_depth_distribution(const policy::PolicyParams& p) {
    if (p.depth_mode == policy::DepthMode::Categorical) {
        const Tensor d = policy::depth_distribution(p);
        return {d.values().begin(), d.values().end()};
    }
    std::vector<double> dist{1.0};
    for (double g : p.gate_logits.values()) {
        const double q = 1.0 / (1.0 + std::exp(-g));
        std::vector<double> next(dist.size() + 1, 0.0);
        for (std::size_t k = 0; k < dist.size(); ++k) {
            next[k] += dist[k] * (1.0 - q);
            next[k + 1] += dist[k] * q;
        }
        dist = std::move(next);
    }
    return dist;
}

std::string cmd_inspect(const std::filesystem::path& policy_file) {
    const auto [p, sched] = policy::deserialize_policy(read_text(policy_file));
    const auto& reg = transforms::registry();
    std::ostringstream os;
    os << "policy: K=" << p.max_depth << ", N=" << p.num_types << ", magnitudes " << policy::to_string(p.magnitude_dist)
       << ", depth " << policy::to_string(p.depth_mode) << ", t_eval " << sched.t_eval << ", L " << sched.sinkhorn_iters
       << '\n';
    if (p.depth_mode == policy::DepthMode::Bernoulli) {
        os << "gate probabilities:";
        for (double g : p.gate_logits.values()) os << ' ' << fmt(1.0 / (1.0 + std::exp(-g)), 4);
        os << '\n';
    }
    os << "depth distribution (number of applied layers):\n";
    double total = 0.0;
    const auto depth = applied_depth_distribution(p);
    for (std::size_t k = 0; k < depth.size(); ++k) {
        os << "  depth " << k << ": " << fmt(depth[k], 10) << '\n';
        total += depth[k];
    }
    os << "  total: " << fmt(total, 10) << '\n';

    os << "type marginals per layer (top 3):\n";
    const Tensor marg = policy::type_marginals(p, sched.sinkhorn_iters);
    for (std::size_t k = 0; k < p.max_depth; ++k) {
        std::vector<std::size_t> order(p.num_types);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return marg.at(a, k) > marg.at(b, k); });
        os << "  layer " << k + 1 << ':';
        for (std::size_t j = 0; j < 3 && j < order.size(); ++j)
            os << ' ' << reg[order[j]].name << ' ' << fmt(marg.at(order[j], k), 4);
        os << '\n';
    }

    os << "magnitude intervals [sigma(l), sigma(u)] in (0, 1):\n";
    const auto [lo, hi] = policy::magnitude_intervals(p);
    for (std::size_t i = 0; i < p.num_types; ++i) {
        os << "  " << std::left << std::setw(13) << reg[i].name << std::right;
        for (std::size_t k = 0; k < p.max_depth; ++k) {
            const double a = std::min(lo.at(i, k), hi.at(i, k)), b = std::max(lo.at(i, k), hi.at(i, k));
            os << " [" << fmt(a, 3) << ", " << fmt(b, 3) << ']';
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace augsearch::cli
