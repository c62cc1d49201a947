#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "augsearch/commands.hpp"
#include "augsearch/errors.hpp"

using namespace augsearch;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

// Turns a key=value file into "--key value" tokens, skipping keys that the
// command line sets itself so that flags override the file.
std::vector<std::string> config_tokens(const std::string& path, const std::set<std::string>& cli_keys) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::vector<std::string> out;
    std::string line;
    for (int n = 1; std::getline(f, line); ++n) {
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(n) + ": expected key=value");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(path + ":" + std::to_string(n) + ": empty key");
        if (key == "config") throw ConfigError(path + ":" + std::to_string(n) + ": config files cannot nest");
        if (cli_keys.count(key)) continue;
        if (value == "true") {
            out.push_back("--" + key);
        } else if (value != "false") {
            out.push_back("--" + key);
            out.push_back(value);
        }
    }
    return out;
}

// Splices the config file named by --config in after the subcommand.
std::vector<std::string> expand_config(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string config;
    std::set<std::string> keys;
    std::vector<std::string> kept;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const std::string& a = args[i];
        if (a == "--config" && i + 1 < args.size()) {
            config = args[++i];
            continue;
        }
        if (a.rfind("--config=", 0) == 0) {
            config = a.substr(9);
            continue;
        }
        if (a.rfind("--", 0) == 0 && a.size() > 2) keys.insert(a.substr(2, a.find('=') - 2));
        kept.push_back(a);
    }
    if (config.empty() || kept.empty()) return kept;
    auto extra = config_tokens(config, keys);
    kept.insert(kept.begin() + 1, extra.begin(), extra.end());
    return kept;
}

std::vector<std::uint64_t> parse_seeds(const std::vector<std::string>& items) {
    std::vector<std::uint64_t> out;
    for (const auto& item : items) {
        std::size_t pos = 0;
        while (pos <= item.size()) {
            const auto comma = item.find(',', pos);
            const std::string tok = item.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            try {
                std::size_t used = 0;
                out.push_back(std::stoull(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::logic_error&) {
                throw ConfigError("invalid seed '" + tok + "'");
            }
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
    }
    return out;
}

struct Common {
    cli::DataOptions data;
    std::size_t epochs = 30;
    std::size_t batch_size = 128;
    std::size_t workers = 1;
    std::string out;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--dataset", c.data.dataset, "synth-rot or a dataset file")->capture_default_str();
    app->add_option("--format", c.data.format, "cifar-binary or container")->capture_default_str();
    app->add_option("--subset", c.data.subset, "class-stratified subset size (synthetic: number of images)");
    app->add_option("--epochs", c.epochs)->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--batch-size", c.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--seed", c.data.seed, "seed for data, splits and all random streams")->capture_default_str();
    app->add_option("--workers", c.workers, "threads; results do not depend on it")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    app->add_option("--config", "key=value file; command-line flags override it");
}

struct SearchFlags {
    bilevel::SearchConfig cfg;
    std::string magnitude = "uniform", depth = "categorical", sampling = "per-image", hypergrad = "exact-point",
                fd_mode = "central";
    std::vector<std::string> freeze;
    std::vector<double> warmup;
    std::optional<double> lr;
};

void add_search_flags(CLI::App* app, SearchFlags& s) {
    auto& c = s.cfg;
    app->add_option("--max-depth", c.max_depth)->capture_default_str();
    app->add_option("--sinkhorn-iters", c.sched.sinkhorn_iters)->capture_default_str();
    app->add_option("--t-start", c.sched.t_start)->capture_default_str();
    app->add_option("--t-end", c.sched.t_end)->capture_default_str();
    app->add_option("--lr-mu", c.lr_mu)->capture_default_str();
    app->add_option("--lr-pi", c.lr_pi)->capture_default_str();
    app->add_option("--lr-delta", c.lr_delta)->capture_default_str();
    app->add_option("--lr", s.lr, "classifier learning rate (default 0.05)");
    app->add_option("--eta", c.eta, "virtual step size (default: current classifier learning rate)");
    app->add_option("--hypergrad", s.hypergrad, "validation gradient at the virtual step or at the current weights")
        ->check(CLI::IsMember({"exact-point", "paper-point"}))->capture_default_str();
    app->add_option("--fd-mode", s.fd_mode)->check(CLI::IsMember({"central", "one-sided"}))->capture_default_str();
    app->add_option("--fd-epsilon", c.hyper.fd_epsilon_scale, "finite-difference step times |v|")->capture_default_str();
    app->add_option("--freeze", s.freeze, "mu, pi or delta; repeatable")->check(CLI::IsMember({"mu", "pi", "delta"}));
    app->add_option("--warmup-fracs", s.warmup, "mu,pi,delta fractions of training before each group updates")
        ->delimiter(',')
        ->expected(3);
    app->add_option("--magnitude-dist", s.magnitude)->check(CLI::IsMember({"uniform", "gaussian"}))->capture_default_str();
    app->add_option("--depth-mode", s.depth)->check(CLI::IsMember({"categorical", "bernoulli"}))->capture_default_str();
    app->add_option("--sampling", s.sampling)->check(CLI::IsMember({"per-image", "per-batch"}))->capture_default_str();
}

bilevel::SearchConfig finish_search(const SearchFlags& s, const Common& c) {
    bilevel::SearchConfig cfg = s.cfg;
    cfg.epochs = c.epochs;
    cfg.batch_size = c.batch_size;
    cfg.seed = c.data.seed;
    cfg.workers = c.workers;
    if (s.lr) cfg.sgd.lr = *s.lr;
    cfg.magnitude_dist = policy::parse_magnitude_dist(s.magnitude);
    cfg.depth_mode = policy::parse_depth_mode(s.depth);
    cfg.sampling = policy::parse_sampling_mode(s.sampling);
    cfg.hyper.point = s.hypergrad == "paper-point" ? bilevel::HypergradPoint::Current : bilevel::HypergradPoint::Exact;
    cfg.hyper.mode = s.fd_mode == "one-sided" ? bilevel::FdMode::OneSided : bilevel::FdMode::Central;
    for (const auto& f : s.freeze) (f == "mu" ? cfg.freeze.mu : f == "pi" ? cfg.freeze.pi : cfg.freeze.delta) = true;
    if (!s.warmup.empty()) {
        cfg.sched.warmup_mu = s.warmup[0];
        cfg.sched.warmup_pi = s.warmup[1];
        cfg.sched.warmup_delta = s.warmup[2];
    }
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Differentiable search over data augmentation policies"};
    app.require_subcommand(1);

    Common common;
    SearchFlags search;
    std::string metrics;
    std::optional<double> t_eval;
    std::vector<std::string> seeds;
    bool no_baseline = false;
    std::string policy_file, ablation;
    std::size_t samples = 10000;
    double temperature = 0.1;

    auto* s = app.add_subcommand("search", "search a policy and write it with a per-epoch metrics CSV");
    add_common(s, common);
    add_search_flags(s, search);
    s->add_option("--t-eval", search.cfg.sched.t_eval, "evaluation temperature stored in the policy file")
        ->capture_default_str();
    s->add_option("--out", common.out, "policy file")->required();
    s->add_option("--metrics", metrics, "metrics CSV (default: <out stem>.metrics.csv)");

    auto* e = app.add_subcommand("eval", "train fresh classifiers with a fixed policy and report accuracy");
    add_common(e, common);
    e->add_option("--policy", policy_file)->required();
    e->add_option("--t-eval", t_eval, "sampling temperature (default: the policy file's)");
    e->add_option("--seeds", seeds, "comma-separated training seeds (default 1)");
    e->add_option("--lr", search.lr, "classifier learning rate (default 0.05)");
    e->add_flag("--no-baseline", no_baseline, "skip the unaugmented baseline");
    e->add_option("--out", common.out, "CSV report");

    auto* a = app.add_subcommand("ablate", "run an ablation and write a statistics CSV");
    add_common(a, common);
    add_search_flags(a, search);
    a->add_option("--ablation", ablation)
        ->required()
        ->description("repetition-rate, fixed-depth, sampling-mode or frozen-dof");
    a->add_option("--seeds", seeds, "comma-separated seeds (default 1,2)");
    a->add_option("--t-eval", t_eval, "evaluation temperature (default 0.1)");
    a->add_option("--samples", samples, "draws per repetition-rate row")->capture_default_str();
    a->add_option("--temperature", temperature, "temperature for repetition-rate draws")->capture_default_str();
    a->add_option("--out", common.out, "CSV output");

    auto* i = app.add_subcommand("inspect", "print a readable summary of a policy file");
    i->add_option("policy,--policy", policy_file)->required();
    i->add_option("--out", common.out, "also write the summary here");

    try {
        auto args = expand_config(argc, argv);
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : kExitConfig;
    } catch (const ConfigError& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kExitConfig;
    }

    try {
        if (s->parsed()) {
            cli::SearchOptions opts;
            opts.data = common.data;
            opts.search = finish_search(search, common);
            opts.out = common.out;
            opts.metrics = metrics;
            cli::cmd_search(opts, std::cerr);
        } else if (e->parsed()) {
            cli::EvalOptions opts;
            opts.data = common.data;
            opts.policy = policy_file;
            opts.t_eval = t_eval;
            if (!seeds.empty()) opts.seeds = parse_seeds(seeds);
            opts.train.epochs = common.epochs;
            opts.train.batch_size = common.batch_size;
            opts.train.workers = common.workers;
            if (search.lr) opts.train.sgd.lr = *search.lr;
            opts.baseline = !no_baseline;
            opts.out = common.out;
            const auto report = cli::cmd_eval(opts, std::cerr);
            std::cout << report.csv();
        } else if (a->parsed()) {
            cli::AblateOptions opts;
            opts.ablation = ablation;
            opts.data = common.data;
            opts.search = finish_search(search, common);
            if (!seeds.empty()) opts.seeds = parse_seeds(seeds);
            opts.t_eval = t_eval;
            opts.samples = samples;
            opts.temperature = temperature;
            opts.out = common.out;
            std::cout << cli::cmd_ablate(opts, std::cerr);
        } else {
            const std::string text = cli::cmd_inspect(policy_file);
            if (!common.out.empty()) cli::write_atomic(common.out, text);
            std::cout << text;
        }
    } catch (const ConfigError& err) {
        std::cerr << "configuration error: " << err.what() << '\n';
        return kExitConfig;
    } catch (const ParseError& err) {
        std::cerr << "invalid input: " << err.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kExitRuntime;
    }
    return 0;
}
