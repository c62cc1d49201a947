#include "augsearch/policy.hpp"

#include <cfloat>
#include <cmath>

#include <json.hpp>

#include "augsearch/errors.hpp"
#include "augsearch/transforms.hpp"

namespace augsearch::policy {

namespace {

using nlohmann::ordered_json;

void check_shape(const Tensor& t, const Shape& expected, const char* field) {
    if (t.shape() != expected) {
        throw ConfigError(std::string("policy field ") + field + " has shape " + augsearch::to_string(t.shape()) +
                          ", expected " + augsearch::to_string(expected));
    }
    if (!t.all_finite()) throw ConfigError(std::string("policy field ") + field + " holds non-finite values");
}

ad::Var element(const ad::Var& m, std::size_t i, std::size_t k) {
    return ad::slice(ad::select(m, 0, i), 0, k, k + 1);
}

// One mixture layer X_{k+1} = sum_i P_ik tau_i(X_k, M_ik). With `grad` false
// only the selected transform runs and the result is a constant.
ad::Var mixture_layer(const PolicySample& s, const ad::Var& x, std::size_t k, bool grad, Mixture mixture) {
    ad::Tape& tape = x.tape();
    const auto reg = transforms::registry();
    const Tensor& m = s.M.value();
    const std::size_t chosen = s.rows[k];
    if (!grad) return tape.constant(transforms::apply_value(reg[chosen], x.value(), m.at(chosen, k)));
    const std::size_t n = s.P.shape()[0];
    std::vector<ad::Var> outs;
    outs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (mixture == Mixture::Full || i == chosen) {
            outs.push_back(transforms::apply(reg[i], x, element(s.M, i, k)));
        } else {
            outs.push_back(tape.constant(transforms::apply_value(reg[i], x.value(), m.at(i, k))));
        }
    }
    return ad::weighted_sum(ad::select(s.P, 1, k), outs);
}

Tensor image_at(const Tensor& x, std::size_t b) {
    const Shape img(x.shape().begin() + 1, x.shape().end());
    const std::size_t per = numel(img);
    Tensor out(img);
    std::copy_n(x.data() + b * per, per, out.data());
    return out;
}

ordered_json matrix_json(const Tensor& t) {
    ordered_json rows = ordered_json::array();
    for (std::size_t r = 0; r < t.dim(0); ++r) {
        ordered_json row = ordered_json::array();
        for (std::size_t c = 0; c < t.dim(1); ++c) row.push_back(t.at(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

ordered_json vector_json(const Tensor& t) {
    ordered_json out = ordered_json::array();
    for (double v : t.values()) out.push_back(v);
    return out;
}

const ordered_json& field(const ordered_json& doc, const char* name) {
    auto it = doc.find(name);
    if (it == doc.end()) throw ParseError(std::string("policy: missing field '") + name + "'");
    return *it;
}

double number_at(const ordered_json& j, const std::string& path) {
    if (!j.is_number()) throw ParseError("policy: " + path + ": expected a number");
    return j.get<double>();
}

std::size_t count_at(const ordered_json& j, const std::string& path) {
    if (!j.is_number_unsigned()) throw ParseError("policy: " + path + ": expected a non-negative integer");
    return j.get<std::size_t>();
}

Tensor parse_vector(const ordered_json& doc, const char* name, std::size_t n) {
    const ordered_json& j = field(doc, name);
    const std::string path = std::string("/") + name;
    if (!j.is_array() || j.size() != n) {
        throw ParseError("policy: " + path + ": expected an array of " + std::to_string(n) + " numbers");
    }
    Tensor out(Shape{n});
    for (std::size_t i = 0; i < n; ++i) out[i] = number_at(j[i], path + "/" + std::to_string(i));
    return out;
}

Tensor parse_matrix(const ordered_json& doc, const char* name, std::size_t rows, std::size_t cols) {
    const ordered_json& j = field(doc, name);
    const std::string path = std::string("/") + name;
    if (!j.is_array() || j.size() != rows) {
        throw ParseError("policy: " + path + ": expected " + std::to_string(rows) + " rows");
    }
    Tensor out(Shape{rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
        const std::string rp = path + "/" + std::to_string(r);
        if (!j[r].is_array() || j[r].size() != cols) {
            throw ParseError("policy: " + rp + ": expected " + std::to_string(cols) + " columns");
        }
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = number_at(j[r][c], rp + "/" + std::to_string(c));
    }
    return out;
}

}  // namespace

PolicyParams PolicyParams::initial(std::size_t max_depth, std::size_t num_types, MagnitudeDist dist,
                                   DepthMode depth) {
    PolicyParams p;
    p.num_types = num_types;
    p.max_depth = max_depth;
    p.delta = Tensor(Shape{max_depth + 1}, 0.0);
    p.pi = Tensor(Shape{num_types, max_depth}, 0.0);
    // sigmoid(-ln 7) = 1/8, sigmoid(ln 7) = 7/8.
    p.mu_low = Tensor(Shape{num_types, max_depth}, -std::log(7.0));
    p.mu_high = Tensor(Shape{num_types, max_depth}, std::log(7.0));
    p.magnitude_dist = dist;
    if (dist == MagnitudeDist::Gaussian) {
        p.mag_mean = Tensor(Shape{num_types, max_depth}, 0.5);
        p.mag_std = Tensor(Shape{num_types, max_depth}, 0.1875);
    }
    p.depth_mode = depth;
    if (depth == DepthMode::Bernoulli) p.gate_logits = Tensor(Shape{max_depth}, std::log(3.0));
    p.validate();
    return p;
}

void PolicyParams::validate() const {
    if (num_types != transforms::kNumTransforms) {
        throw ConfigError("policy must cover the " + std::to_string(transforms::kNumTransforms) +
                          " registered transforms, got " + std::to_string(num_types));
    }
    if (max_depth < 1 || max_depth > num_types) {
        throw ConfigError("max_depth must lie in [1, " + std::to_string(num_types) + "], got " +
                          std::to_string(max_depth));
    }
    const Shape nk{num_types, max_depth};
    check_shape(delta, {max_depth + 1}, "delta");
    check_shape(pi, nk, "pi");
    check_shape(mu_low, nk, "mu_low");
    check_shape(mu_high, nk, "mu_high");
    if (magnitude_dist == MagnitudeDist::Gaussian) {
        check_shape(mag_mean, nk, "mag_mean");
        check_shape(mag_std, nk, "mag_std");
        for (double s : mag_std.values())
            if (!(s > 0.0)) throw ConfigError("mag_std entries must be positive");
    }
    if (depth_mode == DepthMode::Bernoulli) check_shape(gate_logits, {max_depth}, "gate_logits");
}

void ScheduleConfig::validate() const {
    if (!(t_end > 0.0) || !(t_start >= t_end) || !std::isfinite(t_start)) {
        throw ConfigError("temperatures must satisfy t_start >= t_end > 0");
    }
    if (!(t_eval > 0.0) || !std::isfinite(t_eval)) throw ConfigError("t_eval must be positive");
    if (sinkhorn_iters < 1) throw ConfigError("sinkhorn_iters must be at least 1");
    if (!(warmup_mu >= 0.0) || !(warmup_mu <= warmup_pi) || !(warmup_pi <= warmup_delta)) {
        throw ConfigError("warm-up fractions must satisfy 0 <= mu <= pi <= delta");
    }
}

relax::Temperature anneal_temperature(double epoch, double total_epochs, const ScheduleConfig& sched) {
    if (!(total_epochs > 0.0) || !(epoch >= 0.0) || !(epoch <= total_epochs)) {
        throw DomainError("anneal_temperature: epoch " + std::to_string(epoch) + " outside [0, " +
                          std::to_string(total_epochs) + "]");
    }
    return relax::Temperature(sched.t_start * std::pow(sched.t_end / sched.t_start, epoch / total_epochs));
}

Groups warmup_gate(double epoch_fraction, const ScheduleConfig& sched) {
    return {epoch_fraction >= sched.warmup_mu, epoch_fraction >= sched.warmup_pi,
            epoch_fraction >= sched.warmup_delta};
}

PolicyVars bind(ad::Tape& tape, const PolicyParams& params, Groups grad) {
    params.validate();
    PolicyVars v;
    v.num_types = params.num_types;
    v.max_depth = params.max_depth;
    v.magnitude_dist = params.magnitude_dist;
    v.depth_mode = params.depth_mode;
    v.delta = tape.leaf(params.delta, grad.delta);
    v.pi = tape.leaf(params.pi, grad.pi);
    v.mu_low = tape.leaf(params.mu_low, grad.mu);
    v.mu_high = tape.leaf(params.mu_high, grad.mu);
    if (params.magnitude_dist == MagnitudeDist::Gaussian) {
        v.mag_mean = tape.leaf(params.mag_mean, grad.mu);
        v.mag_std = tape.leaf(params.mag_std, grad.mu);
    }
    if (params.depth_mode == DepthMode::Bernoulli) v.gate_logits = tape.leaf(params.gate_logits, grad.delta);
    return v;
}

PolicyParams gradients(ad::Tape& tape, const PolicyVars& vars, const PolicyParams& params) {
    auto grad_of = [&](const ad::Var& v, const Tensor& like) {
        if (v.valid() && v.requires_grad()) return tape.grad(v);
        return Tensor(like.shape(), 0.0);
    };
    PolicyParams g = params;
    g.delta = grad_of(vars.delta, params.delta);
    g.pi = grad_of(vars.pi, params.pi);
    g.mu_low = grad_of(vars.mu_low, params.mu_low);
    g.mu_high = grad_of(vars.mu_high, params.mu_high);
    if (params.magnitude_dist == MagnitudeDist::Gaussian) {
        g.mag_mean = grad_of(vars.mag_mean, params.mag_mean);
        g.mag_std = grad_of(vars.mag_std, params.mag_std);
    }
    if (params.depth_mode == DepthMode::Bernoulli) g.gate_logits = grad_of(vars.gate_logits, params.gate_logits);
    return g;
}

namespace {

PolicyNoise draw_noise_impl(std::size_t n, std::size_t k, MagnitudeDist dist, DepthMode depth, Rng& rng) {
    PolicyNoise noise;
    if (depth == DepthMode::Categorical) {
        noise.depth = relax::sample_gumbel({k + 1}, rng);
    } else {
        noise.depth = relax::sample_uniform({k}, rng);
        for (double& u : noise.depth.values()) u = std::log(u) - std::log1p(-u);
    }
    noise.perm = relax::sample_gumbel({n, n}, rng);
    if (dist == MagnitudeDist::Uniform) {
        noise.magnitude = relax::sample_uniform({n, k}, rng);
    } else {
        noise.magnitude = Tensor(Shape{n, k});
        for (double& e : noise.magnitude.values()) e = rng.normal();
    }
    return noise;
}

}  // namespace

PolicyNoise draw_noise(const PolicyParams& p, Rng& rng) {
    return draw_noise_impl(p.num_types, p.max_depth, p.magnitude_dist, p.depth_mode, rng);
}

PolicyNoise draw_noise(const PolicyVars& v, Rng& rng) {
    return draw_noise_impl(v.num_types, v.max_depth, v.magnitude_dist, v.depth_mode, rng);
}

std::vector<std::size_t> PolicySample::applied_layers() const {
    std::vector<std::size_t> layers;
    if (depth_mode == DepthMode::Categorical) {
        for (std::size_t k = 0; k < depth; ++k) layers.push_back(k);
    } else {
        for (std::size_t k = 0; k < active.size(); ++k)
            if (active[k]) layers.push_back(k);
    }
    return layers;
}

PolicySample sample_policy(const PolicyVars& vars, relax::Temperature t, int sinkhorn_iters,
                           const PolicyNoise& noise) {
    ad::Tape& tape = vars.pi.tape();
    PolicySample s;
    s.depth_mode = vars.depth_mode;
    if (vars.depth_mode == DepthMode::Categorical) {
        auto draw = relax::gumbel_softmax_hard(vars.delta, t, noise.depth);
        s.d = draw.hard;
        s.depth = draw.index;
    } else {
        // Binary Gumbel-softmax: logistic noise, sigmoid relaxation, threshold at 0.
        ad::Var z = ad::scale(vars.gate_logits + tape.constant(noise.depth), 1.0 / t.value());
        Tensor hard(z.shape());
        s.active.resize(hard.size());
        for (std::size_t k = 0; k < hard.size(); ++k) {
            s.active[k] = z.value()[k] > 0.0;
            hard[k] = s.active[k] ? 1.0 : 0.0;
        }
        s.gates = ad::straight_through(tape.constant(std::move(hard)), ad::sigmoid(z));
    }
    auto perm = relax::gumbel_sinkhorn_sample(vars.pi, t, sinkhorn_iters, noise.perm);
    s.P = perm.hard;
    s.rows = std::move(perm.rows);
    if (vars.magnitude_dist == MagnitudeDist::Uniform) {
        s.M = relax::sample_magnitude(vars.mu_low, vars.mu_high, noise.magnitude);
    } else {
        s.M = relax::sample_magnitude_gaussian(vars.mag_mean, vars.mag_std, noise.magnitude);
    }
    return s;
}

PolicySample sample_policy(const PolicyVars& vars, relax::Temperature t, int sinkhorn_iters, Rng& rng) {
    return sample_policy(vars, t, sinkhorn_iters, draw_noise(vars, rng));
}

ad::Var apply_policy(const PolicySample& s, const ad::Var& x0, Mixture mixture) {
    if (x0.shape().size() != 3) throw ShapeError("apply_policy: expected [C,H,W], got " + augsearch::to_string(x0.shape()));
    const std::size_t K = s.rows.size();
    if (s.depth_mode == DepthMode::Categorical) {
        std::vector<ad::Var> xs{x0};
        for (std::size_t k = 0; k < K; ++k) {
            // Layer k feeds the output only when the sampled depth exceeds k.
            const bool grad = mixture == Mixture::Full || k < s.depth;
            xs.push_back(mixture_layer(s, xs.back(), k, grad, mixture));
        }
        return ad::weighted_sum(s.d, xs);
    }
    ad::Var x = x0;
    for (std::size_t k = 0; k < K; ++k) {
        const bool grad = mixture == Mixture::Full || s.active[k];
        ad::Var mixed = mixture_layer(s, x, k, grad, mixture);
        ad::Var g = ad::slice(s.gates, 0, k, k + 1);
        x = g * mixed + ad::add_scalar(-g, 1.0) * x;
    }
    return x;
}

Tensor apply_selected(const PolicySample& s, const Tensor& x0) {
    const auto reg = transforms::registry();
    const Tensor& m = s.M.value();
    Tensor x = x0;
    for (std::size_t k : s.applied_layers()) x = transforms::apply_value(reg[s.rows[k]], x, m.at(s.rows[k], k));
    return x;
}

ad::Var apply_policy_batch(const Tensor& x, const PolicyVars& vars, relax::Temperature t, int sinkhorn_iters,
                           std::span<const PolicyNoise> noise, Mixture mixture) {
    if (x.rank() != 4) throw ShapeError("apply_policy_batch: expected [B,C,H,W], got " + augsearch::to_string(x.shape()));
    const std::size_t B = x.dim(0);
    if (noise.size() != B && noise.size() != 1) {
        throw ShapeError("apply_policy_batch: " + std::to_string(noise.size()) + " policy draws for a batch of " +
                         std::to_string(B));
    }
    ad::Tape& tape = vars.pi.tape();
    std::vector<PolicySample> samples;
    for (const auto& n : noise) samples.push_back(sample_policy(vars, t, sinkhorn_iters, n));
    std::vector<ad::Var> outs;
    outs.reserve(B);
    for (std::size_t b = 0; b < B; ++b) {
        const PolicySample& s = samples[samples.size() == 1 ? 0 : b];
        outs.push_back(apply_policy(s, tape.constant(image_at(x, b)), mixture));
    }
    return ad::stack(outs);
}

ad::Var apply_policy_batch(const Tensor& x, const PolicyVars& vars, relax::Temperature t, int sinkhorn_iters,
                           Rng& rng, SamplingMode mode, Mixture mixture) {
    if (x.rank() != 4) throw ShapeError("apply_policy_batch: expected [B,C,H,W], got " + augsearch::to_string(x.shape()));
    const std::size_t draws = mode == SamplingMode::PerImage ? x.dim(0) : 1;
    std::vector<PolicyNoise> noise;
    for (std::size_t i = 0; i < draws; ++i) noise.push_back(draw_noise(vars, rng));
    return apply_policy_batch(x, vars, t, sinkhorn_iters, noise, mixture);
}

Tensor depth_distribution(const PolicyParams& params) {
    ad::Tape tape;
    return ad::softmax(tape.constant(params.delta)).value();
}

Tensor type_marginals(const PolicyParams& params, int sinkhorn_iters) {
    ad::Tape tape;
    ad::Var e = ad::clamp(ad::exp(tape.constant(relax::pad_logits(params.pi))), relax::kSinkhornFloor, DBL_MAX);
    ad::Var s = relax::sinkhorn_normalize(e, sinkhorn_iters);
    return ad::slice(s, 1, 0, params.max_depth).value();
}

std::pair<Tensor, Tensor> magnitude_intervals(const PolicyParams& params) {
    ad::Tape tape;
    if (params.magnitude_dist == MagnitudeDist::Gaussian) {
        // Central 95% interval of the clamped Gaussian.
        Tensor lo = params.mag_mean, hi = params.mag_mean;
        for (std::size_t i = 0; i < lo.size(); ++i) {
            lo[i] = std::clamp(params.mag_mean[i] - 1.96 * params.mag_std[i], relax::kGaussianMagnitudeEdge,
                               1.0 - relax::kGaussianMagnitudeEdge);
            hi[i] = std::clamp(params.mag_mean[i] + 1.96 * params.mag_std[i], relax::kGaussianMagnitudeEdge,
                               1.0 - relax::kGaussianMagnitudeEdge);
        }
        return {lo, hi};
    }
    return {ad::sigmoid(tape.constant(params.mu_low)).value(), ad::sigmoid(tape.constant(params.mu_high)).value()};
}

std::string serialize_policy(const PolicyParams& params, const ScheduleConfig& sched) {
    params.validate();
    ordered_json doc;
    doc["version"] = "1";
    doc["num_types"] = params.num_types;
    doc["max_depth"] = params.max_depth;
    ordered_json names = ordered_json::array();
    const auto reg = transforms::registry();
    for (std::size_t i = 0; i < params.num_types; ++i) names.push_back(std::string(reg[i].name));
    doc["transform_names"] = std::move(names);
    doc["delta"] = vector_json(params.delta);
    doc["pi"] = matrix_json(params.pi);
    doc["mu_low"] = matrix_json(params.mu_low);
    doc["mu_high"] = matrix_json(params.mu_high);
    doc["temperature_eval"] = sched.t_eval;
    doc["sinkhorn_iters"] = sched.sinkhorn_iters;
    if (params.magnitude_dist == MagnitudeDist::Gaussian) {
        doc["magnitude_dist"] = to_string(params.magnitude_dist);
        doc["mag_mean"] = matrix_json(params.mag_mean);
        doc["mag_std"] = matrix_json(params.mag_std);
    }
    if (params.depth_mode == DepthMode::Bernoulli) {
        doc["depth_mode"] = to_string(params.depth_mode);
        doc["gate_logits"] = vector_json(params.gate_logits);
    }
    return doc.dump(2) + "\n";
}

std::pair<PolicyParams, ScheduleConfig> deserialize_policy(const std::string& text) {
    ordered_json doc;
    try {
        doc = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("policy: malformed JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ParseError("policy: document root must be an object");
    const ordered_json& version = field(doc, "version");
    if (!version.is_string() || version.get<std::string>() != "1") {
        throw ParseError("policy: /version: expected \"1\"");
    }
    PolicyParams p;
    p.num_types = count_at(field(doc, "num_types"), "/num_types");
    p.max_depth = count_at(field(doc, "max_depth"), "/max_depth");
    if (p.num_types != transforms::kNumTransforms) {
        throw ParseError("policy: /num_types: expected " + std::to_string(transforms::kNumTransforms));
    }
    if (p.max_depth < 1 || p.max_depth > p.num_types) throw ParseError("policy: /max_depth: out of range");
    const ordered_json& names = field(doc, "transform_names");
    if (!names.is_array() || names.size() != p.num_types) {
        throw ParseError("policy: /transform_names: expected " + std::to_string(p.num_types) + " names");
    }
    const auto reg = transforms::registry();
    for (std::size_t i = 0; i < p.num_types; ++i) {
        if (!names[i].is_string() || names[i].get<std::string>() != reg[i].name) {
            throw ParseError("policy: /transform_names/" + std::to_string(i) + ": expected \"" +
                             std::string(reg[i].name) + "\"");
        }
    }
    const std::size_t n = p.num_types, k = p.max_depth;
    p.delta = parse_vector(doc, "delta", k + 1);
    p.pi = parse_matrix(doc, "pi", n, k);
    p.mu_low = parse_matrix(doc, "mu_low", n, k);
    p.mu_high = parse_matrix(doc, "mu_high", n, k);
    ScheduleConfig sched;
    sched.t_eval = number_at(field(doc, "temperature_eval"), "/temperature_eval");
    const ordered_json& iters = field(doc, "sinkhorn_iters");
    if (!iters.is_number_integer()) throw ParseError("policy: /sinkhorn_iters: expected an integer");
    sched.sinkhorn_iters = iters.get<int>();
    if (doc.contains("magnitude_dist")) {
        const ordered_json& d = doc["magnitude_dist"];
        if (!d.is_string()) throw ParseError("policy: /magnitude_dist: expected a string");
        try {
            p.magnitude_dist = parse_magnitude_dist(d.get<std::string>());
        } catch (const ConfigError& e) {
            throw ParseError(std::string("policy: /magnitude_dist: ") + e.what());
        }
        if (p.magnitude_dist == MagnitudeDist::Gaussian) {
            p.mag_mean = parse_matrix(doc, "mag_mean", n, k);
            p.mag_std = parse_matrix(doc, "mag_std", n, k);
        }
    }
    if (doc.contains("depth_mode")) {
        const ordered_json& d = doc["depth_mode"];
        if (!d.is_string()) throw ParseError("policy: /depth_mode: expected a string");
        try {
            p.depth_mode = parse_depth_mode(d.get<std::string>());
        } catch (const ConfigError& e) {
            throw ParseError(std::string("policy: /depth_mode: ") + e.what());
        }
        if (p.depth_mode == DepthMode::Bernoulli) p.gate_logits = parse_vector(doc, "gate_logits", k);
    }
    try {
        p.validate();
        sched.validate();
    } catch (const ConfigError& e) {
        throw ParseError(std::string("policy: ") + e.what());
    }
    return {std::move(p), sched};
}

std::string to_string(MagnitudeDist d) { return d == MagnitudeDist::Uniform ? "uniform" : "gaussian"; }
std::string to_string(DepthMode d) { return d == DepthMode::Categorical ? "categorical" : "bernoulli"; }
std::string to_string(SamplingMode m) { return m == SamplingMode::PerImage ? "per-image" : "per-batch"; }

MagnitudeDist parse_magnitude_dist(const std::string& s) {
    if (s == "uniform") return MagnitudeDist::Uniform;
    if (s == "gaussian") return MagnitudeDist::Gaussian;
    throw ConfigError("unknown magnitude distribution '" + s + "' (expected uniform or gaussian)");
}

DepthMode parse_depth_mode(const std::string& s) {
    if (s == "categorical") return DepthMode::Categorical;
    if (s == "bernoulli") return DepthMode::Bernoulli;
    throw ConfigError("unknown depth mode '" + s + "' (expected categorical or bernoulli)");
}

SamplingMode parse_sampling_mode(const std::string& s) {
    if (s == "per-image") return SamplingMode::PerImage;
    if (s == "per-batch") return SamplingMode::PerBatch;
    throw ConfigError("unknown sampling mode '" + s + "' (expected per-image or per-batch)");
}

}  // namespace augsearch::policy
