#include "dcf/data.hpp"
#include "dcf/experiment.hpp"
#include "dcf/ipw.hpp"
#include "dcf/metrics.hpp"
#include "dcf/outcome.hpp"
#include "dcf/pf.hpp"
#include "dcf/simulation.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <unordered_map>

namespace fs = std::filesystem;
using namespace dcf;

namespace {

std::string unescape_delimiter(const std::string& d) {
    if (d == "tab" || d == "\\t") return "\t";
    if (d == "comma") return ",";
    if (d == "space") return " ";
    return d;
}

void add_load_options(CLI::App* app, LoadOptions& o, std::string& delimiter) {
    app->add_option("--delimiter", delimiter, "Field delimiter (tab, comma, space or a literal string)")->capture_default_str();
    app->add_option("--user_column", o.user_column, "Zero-based user column")->capture_default_str();
    app->add_option("--item_column", o.item_column, "Zero-based item column")->capture_default_str();
    app->add_option("--rating_column", o.rating_column, "Zero-based rating column")->capture_default_str();
    app->add_option("--index_base", o.index_base, "Smallest ID in the file (0 or 1); used when IDs are not remapped")
        ->capture_default_str();
    app->add_option("--header_lines", o.header_lines, "Lines to skip at the top of each file")->capture_default_str();
}

void add_sim_options(CLI::App* app, SimConfig& s) {
    app->add_option("--sim_users", s.U, "Simulated users")->capture_default_str();
    app->add_option("--sim_items", s.I, "Simulated items")->capture_default_str();
    app->add_option("--sim_K", s.K, "Simulation latent dimension")->capture_default_str();
    app->add_option("--gamma_theta", s.gamma_theta, "Exposure-confounder correlation in [0,1]")->capture_default_str();
    app->add_option("--gamma_y", s.gamma_y, "Confounder effect on ratings (>= 0)")->capture_default_str();
    app->add_option("--sim_gamma_shape", s.gamma_shape, "Gamma shape of simulated factors")->capture_default_str();
    app->add_option("--sim_gamma_rate", s.gamma_rate, "Gamma rate of simulated factors")->capture_default_str();
    app->add_option("--sim_seed", s.seed, "Simulation seed")->capture_default_str();
}

void add_outcome_options(CLI::App* app, OutcomeConfig& o, std::string& link) {
    app->add_option("--prior_std_gamma", o.prior_std_gamma, "Prior std of the confounder coefficients")->capture_default_str();
    app->add_option("--prior_std_intercept", o.prior_std_intercept, "Prior std of the intercept")->capture_default_str();
    app->add_option("--sigma2", o.sigma2, "Gaussian observation variance")->capture_default_str();
    app->add_option("--alpha_weight", o.alpha_weight, "Weighted MF confidence: c = 1 + alpha * y")->capture_default_str();
    app->add_option("--use_intercept", o.use_intercept, "Intercept in deconfounded models (0/1)")->capture_default_str();
    app->add_option("--poisson_link", link, "Poisson rate link: clamp or softplus")->capture_default_str();
    app->add_option("--learning_rate", o.learning_rate, "Initial step of the Poisson line search")->capture_default_str();
    app->add_option("--max_epochs", o.max_epochs, "Maximum outcome-model sweeps")->capture_default_str();
    app->add_option("--tol", o.tol, "Relative objective change for early stopping")->capture_default_str();
    app->add_option("--init_scale", o.init_scale, "Std of the Gaussian-variant initial factors")->capture_default_str();
}

void add_pf_options(CLI::App* app, PFConfig& p) {
    app->add_option("--pf_max_iters", p.max_iters, "Maximum CAVI sweeps")->capture_default_str();
    app->add_option("--pf_tol", p.tol, "Relative ELBO change for stopping")->capture_default_str();
    app->add_option("--pf_init_jitter", p.init_jitter, "Uniform jitter added to the initial Gamma parameters")
        ->capture_default_str();
}

// Flat key=value file; keys are option names without dashes. Command-line
// values win over the file.
void apply_config_file(CLI::App* app, const std::string& path) {
    if (path.empty()) return;
    if (!fs::exists(path)) throw std::runtime_error("config file " + path + " does not exist");
    for (const auto& item : CLI::ConfigINI().from_file(path)) {
        std::string key = item.parents.empty() ? item.name : item.fullname();
        auto* opt = app->get_option_no_throw("--" + key);
        if (!opt) throw std::runtime_error("unknown config key '" + key + "' in " + path);
        if (opt->count() > 0) continue;
        opt->clear();
        auto inputs = item.inputs;
        // The INI reader splits on commas; single-valued options such as a
        // method list take the text back whole.
        if (opt->get_items_expected_max() == 1 && inputs.size() > 1) {
            std::string joined;
            for (std::size_t k = 0; k < inputs.size(); ++k) joined += (k ? "," : "") + inputs[k];
            inputs = {joined};
        }
        opt->add_result(inputs);
        opt->run_callback();
    }
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

SplitMode parse_split(const std::string& s) {
    if (s == "train_val_80_20") return SplitMode::train_val_80_20;
    if (s == "train_val_test_60_20_20") return SplitMode::train_val_test_60_20_20;
    if (s == "provided_random_test") return SplitMode::provided_random_test;
    throw std::invalid_argument("unknown split mode '" + s + "'");
}

Gain parse_gain(const std::string& s) {
    if (s == "exp_minus_one") return Gain::exp_minus_one;
    if (s == "literal_paper") return Gain::literal_paper;
    throw std::invalid_argument("unknown gain '" + s + "'");
}

template <class Fn>
int guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return 1;
    }
}

void write_ids(const SparseInteractions& d, std::ostream& out) {
    out << "side,index,id\n";
    for (Index u = 0; u < d.n_users(); ++u) out << "user," << u << ',' << d.user_id(u) << '\n';
    for (Index i = 0; i < d.n_items(); ++i) out << "item," << i << ',' << d.item_id(i) << '\n';
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deconfounded recommender: exposure model, outcome models, simulation and evaluation"};
    app.require_subcommand(1);

    // ---- fit ---------------------------------------------------------
    struct {
        std::string train, delimiter = "\t", variant = "probabilistic", correction = "deconfounded", link = "clamp";
        std::string out = "model", config;
        LoadOptions load;
        OutcomeConfig outcome;
        PFConfig pf;
        double prior_std = 1.0, ipw_alpha = 0.25, ipw_target = 0.05;
        std::size_t K = 10, pf_K = 10;
        std::uint64_t seed = 0;
    } fit;
    auto* fit_cmd = app.add_subcommand("fit", "Fit the exposure and outcome models on a ratings file");
    fit_cmd->add_option("--train", fit.train, "Ratings file (required)");
    add_load_options(fit_cmd, fit.load, fit.delimiter);
    fit_cmd->add_option("--variant", fit.variant, "probabilistic, poisson or weighted")->capture_default_str();
    fit_cmd->add_option("--correction", fit.correction, "none, deconfounded or ipw")->capture_default_str();
    fit_cmd->add_option("--K", fit.K, "Outcome latent dimension")->capture_default_str();
    fit_cmd->add_option("--prior_std", fit.prior_std, "Prior std of theta and beta")->capture_default_str();
    fit_cmd->add_option("--pf_K", fit.pf_K, "Exposure-model latent dimension")->capture_default_str();
    fit_cmd->add_option("--ipw_alpha", fit.ipw_alpha, "Propensity decay per rating step below 4")->capture_default_str();
    fit_cmd->add_option("--ipw_target_mean", fit.ipw_target, "Grid-mean propensity")->capture_default_str();
    add_outcome_options(fit_cmd, fit.outcome, fit.link);
    add_pf_options(fit_cmd, fit.pf);
    fit_cmd->add_option("--seed", fit.seed, "Seed")->capture_default_str();
    fit_cmd->add_option("--out", fit.out, "Output directory")->capture_default_str();
    fit_cmd->add_option("--config", fit.config, "key=value config file");

    // ---- evaluate ----------------------------------------------------
    struct {
        std::string model = "model", test, delimiter = "\t", gain = "exp_minus_one", out, config;
        LoadOptions load;
        std::size_t recall_k = 5;
        double threshold = 3.0;
        bool clip = false;
    } ev;
    auto* ev_cmd = app.add_subcommand("evaluate", "Score a fitted model on a test ratings file");
    ev_cmd->add_option("--model", ev.model, "Directory written by fit")->capture_default_str();
    ev_cmd->add_option("--test", ev.test, "Test ratings file (required)");
    add_load_options(ev_cmd, ev.load, ev.delimiter);
    ev_cmd->add_option("--gain", ev.gain, "NDCG gain: exp_minus_one or literal_paper")->capture_default_str();
    ev_cmd->add_option("--recall_k", ev.recall_k, "Cutoff for Recall@k")->capture_default_str();
    ev_cmd->add_option("--relevance_threshold", ev.threshold, "Ratings at or above this are relevant")->capture_default_str();
    ev_cmd->add_option("--clip", ev.clip, "Clip predictions to the training rating scale (0/1)")->capture_default_str();
    ev_cmd->add_option("--out", ev.out, "Metrics CSV (default: stdout)");
    ev_cmd->add_option("--config", ev.config, "key=value config file");

    // ---- simulate ----------------------------------------------------
    struct {
        SimConfig sim;
        std::string out = "sim", config;
    } sim;
    auto* sim_cmd = app.add_subcommand("simulate", "Generate a confounded world with known potential outcomes");
    add_sim_options(sim_cmd, sim.sim);
    sim_cmd->add_option("--out", sim.out, "Output directory")->capture_default_str();
    sim_cmd->add_option("--config", sim.config, "key=value config file");

    // ---- sweep -------------------------------------------------------
    struct {
        SimConfig sim;
        std::vector<double> gt{0.0, 0.25, 0.5, 0.75, 1.0}, gy{3.0};
        std::string methods = "oracle,probabilistic_none,probabilistic_deconfounded", out = "sweep", config, link = "clamp";
        std::size_t K = 10, pf_K = 10, runs = 10, threads = 1;
        double prior_std = 0.1, train_fraction = 0.8;
        OutcomeConfig outcome;
        PFConfig pf;
    } sw;
    auto* sw_cmd = app.add_subcommand("sweep", "Vary confounding strength and compare methods on causal error");
    add_sim_options(sw_cmd, sw.sim);
    sw_cmd->add_option("--gamma_theta_grid", sw.gt, "gamma_theta values")->delimiter(',')->capture_default_str();
    sw_cmd->add_option("--gamma_y_grid", sw.gy, "gamma_y values")->delimiter(',')->capture_default_str();
    sw_cmd->add_option("--methods", sw.methods, "Comma-separated methods (oracle or <variant>_<correction>)")
        ->capture_default_str();
    sw_cmd->add_option("--K", sw.K, "Outcome latent dimension")->capture_default_str();
    sw_cmd->add_option("--prior_std", sw.prior_std, "Prior std of theta and beta")->capture_default_str();
    sw_cmd->add_option("--pf_K", sw.pf_K, "Exposure-model latent dimension")->capture_default_str();
    sw_cmd->add_option("--runs", sw.runs, "Runs per grid point")->capture_default_str();
    sw_cmd->add_option("--threads", sw.threads, "Worker threads")->capture_default_str();
    sw_cmd->add_option("--train_fraction", sw.train_fraction, "Share of observed ratings used for fitting")
        ->capture_default_str();
    add_outcome_options(sw_cmd, sw.outcome, sw.link);
    add_pf_options(sw_cmd, sw.pf);
    sw_cmd->add_option("--out", sw.out, "Output directory")->capture_default_str();
    sw_cmd->add_option("--config", sw.config, "key=value config file");

    // ---- run ---------------------------------------------------------
    ExperimentConfig ex;
    struct {
        std::string source = "simulation", delimiter = "\t", split = "train_val_80_20", generalization = "weak";
        std::string methods, gain = "exp_minus_one", link = "clamp", config;
    } rs;
    {
        std::string m;
        for (const auto& x : ex.methods) m += (m.empty() ? "" : ",") + x.name();
        rs.methods = m;
    }
    auto* run_cmd = app.add_subcommand("run", "Full pipeline: split, grid search, fit all methods, evaluate, write tables");
    run_cmd->add_option("--source", rs.source, "file or simulation")->capture_default_str();
    run_cmd->add_option("--train", ex.train_path, "Ratings file (file source)");
    run_cmd->add_option("--test", ex.test_path, "Randomized test ratings file (optional)");
    add_load_options(run_cmd, ex.load, rs.delimiter);
    add_sim_options(run_cmd, ex.sim);
    run_cmd->add_option("--sim_test_items", ex.sim_test_items, "Random unexposed test items per simulated user")
        ->capture_default_str();
    run_cmd->add_option("--split", rs.split, "train_val_80_20, train_val_test_60_20_20 or provided_random_test")
        ->capture_default_str();
    run_cmd->add_option("--split_seed", ex.split.seed, "Split seed")->capture_default_str();
    run_cmd->add_option("--strong_holdout", ex.split.strong_holdout, "Fraction of users held out as new users")
        ->capture_default_str();
    run_cmd->add_option("--foldin_fraction", ex.split.foldin_fraction, "Share of a new user's ratings revealed for fold-in")
        ->capture_default_str();
    run_cmd->add_option("--generalization", rs.generalization, "weak or strong")->capture_default_str();
    run_cmd->add_option("--methods", rs.methods, "Comma-separated methods (<variant>_<correction>, or oracle)")
        ->capture_default_str();
    run_cmd->add_option("--k_grid", ex.k_grid, "Outcome latent dimensions")->delimiter(',')->capture_default_str();
    run_cmd->add_option("--prior_std_grid", ex.prior_std_grid, "Prior stds of theta and beta")->delimiter(',')
        ->capture_default_str();
    run_cmd->add_option("--pf_k_grid", ex.pf_k_grid, "Exposure-model latent dimensions")->delimiter(',')
        ->capture_default_str();
    add_outcome_options(run_cmd, ex.outcome, rs.link);
    add_pf_options(run_cmd, ex.pf);
    run_cmd->add_option("--ipw_alpha", ex.ipw_alpha, "Propensity decay per rating step below 4")->capture_default_str();
    run_cmd->add_option("--ipw_target_mean", ex.ipw_target_mean, "Grid-mean propensity")->capture_default_str();
    run_cmd->add_option("--gain", rs.gain, "NDCG gain: exp_minus_one or literal_paper")->capture_default_str();
    run_cmd->add_option("--recall_k", ex.recall_k, "Cutoff for Recall@k")->capture_default_str();
    run_cmd->add_option("--relevance_threshold", ex.relevance_threshold, "Ratings at or above this are relevant")
        ->capture_default_str();
    run_cmd->add_option("--clip", ex.clip_predictions, "Clip predictions to the rating scale (0/1)")->capture_default_str();
    run_cmd->add_option("--seed", ex.seed, "Seed for exposure and outcome fits")->capture_default_str();
    run_cmd->add_option("--threads", ex.threads, "Worker threads")->capture_default_str();
    run_cmd->add_option("--out", ex.output_dir, "Output directory")->capture_default_str();
    run_cmd->add_option("--config", rs.config, "key=value config file; command-line flags override it");

    CLI11_PARSE(app, argc, argv);

    if (fit_cmd->parsed()) {
        return guarded([&] {
            apply_config_file(fit_cmd, fit.config);
            if (fit.train.empty()) throw std::invalid_argument("--train is required");
            fit.load.delimiter = unescape_delimiter(fit.delimiter);
            auto data = load_delimited(fit.train, fit.load);
            OutcomeConfig oc = fit.outcome;
            oc.variant = parse_variant(fit.variant);
            oc.correction = parse_correction(fit.correction);
            oc.poisson_link = parse_poisson_link(fit.link);
            oc.K = fit.K;
            oc.prior_std_factors = fit.prior_std;
            oc.seed = fit.seed;
            fs::create_directories(fit.out);
            std::optional<SubstituteConfounder> sub;
            if (oc.correction == Correction::deconfounded) {
                PFConfig pc = fit.pf;
                pc.K = fit.pf_K;
                pc.seed = fit.seed;
                auto post = fit_pf(binarize(data), pc);
                auto out = open_out(fs::path(fit.out) / "posterior.txt");
                write_posterior(post, out);
                sub = compute_substitute(post);
            }
            std::vector<double> props;
            if (oc.correction == Correction::ipw) {
                auto pm = fit_propensity(data, data.n_users(), data.n_items(), fit.ipw_alpha, fit.ipw_target);
                props = propensities(pm, data.entries());
                auto out = open_out(fs::path(fit.out) / "propensities.csv");
                write_propensities(pm, data, out);
            }
            auto model = fit_outcome(data, sub ? &*sub : nullptr, props, oc);
            {
                auto out = open_out(fs::path(fit.out) / "model.txt");
                write_model(model, out);
            }
            {
                auto out = open_out(fs::path(fit.out) / "ids.csv");
                write_ids(data, out);
            }
            {
                auto scale = observed_scale(data);
                auto out = open_out(fs::path(fit.out) / "scale.txt");
                out << scale.min << ' ' << scale.max << '\n';
            }
            std::cout << "fitted " << to_string(oc.variant) << '/' << to_string(oc.correction) << " on " << data.nnz()
                      << " ratings; final objective " << model.objective_trace.back() << '\n';
            return 0;
        });
    }

    if (ev_cmd->parsed()) {
        return guarded([&] {
            apply_config_file(ev_cmd, ev.config);
            if (ev.test.empty()) throw std::invalid_argument("--test is required");
            ev.load.delimiter = unescape_delimiter(ev.delimiter);
            fs::path dir(ev.model);
            std::ifstream min(dir / "model.txt");
            if (!min) throw std::runtime_error("cannot read " + (dir / "model.txt").string());
            auto model = read_model(min);
            std::optional<SubstituteConfounder> sub;
            if (model.cfg.correction == Correction::deconfounded) {
                std::ifstream pin(dir / "posterior.txt");
                if (!pin) throw std::runtime_error("cannot read " + (dir / "posterior.txt").string());
                sub = compute_substitute(read_posterior(pin));
            }
            std::unordered_map<ExternalId, Index> users, items;
            {
                std::ifstream iin(dir / "ids.csv");
                if (!iin) throw std::runtime_error("cannot read " + (dir / "ids.csv").string());
                std::string line;
                std::getline(iin, line);
                while (std::getline(iin, line)) {
                    auto a = line.find(','), b = line.rfind(',');
                    Index idx = static_cast<Index>(std::stoul(line.substr(a + 1, b - a - 1)));
                    ExternalId id = std::stoll(line.substr(b + 1));
                    (line.compare(0, 4, "user") == 0 ? users : items)[id] = idx;
                }
            }
            auto raw = load_delimited(ev.test, ev.load);
            std::vector<Entry> entries;
            std::size_t unknown = 0;
            for (const auto& e : raw.entries()) {
                auto u = users.find(raw.user_id(e.user));
                auto i = items.find(raw.item_id(e.item));
                if (u == users.end() || i == items.end()) {
                    ++unknown;
                    continue;
                }
                entries.push_back({u->second, i->second, e.value});
            }
            if (unknown) std::cerr << "warning: " << unknown << " test ratings with users or items unseen in training skipped\n";
            SparseInteractions test(model.n_users(), model.n_items(), std::move(entries));
            if (test.empty()) throw std::runtime_error("no evaluable test ratings");
            RatingScale scale;
            if (ev.clip) {
                std::ifstream sin(dir / "scale.txt");
                if (!(sin >> scale.min >> scale.max)) throw std::runtime_error("cannot read " + (dir / "scale.txt").string());
            }
            std::vector<double> pred;
            for (const auto& e : test.entries()) {
                double v = predict_existing(model, sub ? &*sub : nullptr, e.user, e.item);
                if (ev.clip) v = std::clamp(v, scale.min, scale.max);
                pred.push_back(v);
            }
            auto rep = evaluate(test, pred, parse_gain(ev.gain), ev.recall_k, ev.threshold);
            if (ev.out.empty()) {
                write_metrics(rep, std::cout);
            } else {
                auto out = open_out(ev.out);
                write_metrics(rep, out);
            }
            return 0;
        });
    }

    if (sim_cmd->parsed()) {
        return guarded([&] {
            apply_config_file(sim_cmd, sim.config);
            auto w = generate(sim.sim);
            fs::create_directories(sim.out);
            {
                auto out = open_out(fs::path(sim.out) / "observed.tsv");
                for (const auto& e : w.observed.entries()) out << e.user + 1 << '\t' << e.item + 1 << '\t' << e.value << '\n';
            }
            {
                auto out = open_out(fs::path(sim.out) / "potential.tsv");
                out << "user_id\titem_id\texposure\trating\n";
                for (Index u = 0; u < sim.sim.U; ++u)
                    for (Index i = 0; i < sim.sim.I; ++i)
                        out << u + 1 << '\t' << i + 1 << '\t' << int(w.exposure(u, i)) << '\t' << int(w.rating(u, i)) << '\n';
            }
            std::cout << "simulated " << sim.sim.U << " x " << sim.sim.I << " world with " << w.observed.nnz()
                      << " observed ratings\n";
            return 0;
        });
    }

    if (sw_cmd->parsed()) {
        return guarded([&] {
            apply_config_file(sw_cmd, sw.config);
            std::vector<SweepPoint> grid;
            for (double a : sw.gt)
                for (double b : sw.gy) grid.push_back({a, b});
            std::vector<SweepMethod> methods;
            for (const auto& name : split_list(sw.methods)) {
                auto spec = parse_method(name);
                SweepMethod m;
                m.name = spec.name();
                m.oracle = spec.oracle;
                m.outcome = sw.outcome;
                m.outcome.variant = spec.variant;
                m.outcome.correction = spec.correction;
                m.outcome.poisson_link = parse_poisson_link(sw.link);
                m.outcome.K = sw.K;
                m.outcome.prior_std_factors = sw.prior_std;
                m.pf = sw.pf;
                m.pf.K = sw.pf_K;
                methods.push_back(m);
            }
            SweepOptions opts;
            opts.runs = sw.runs;
            opts.threads = sw.threads;
            opts.train_fraction = sw.train_fraction;
            auto res = sweep(sw.sim, grid, methods, opts);
            fs::create_directories(sw.out);
            {
                auto out = open_out(fs::path(sw.out) / "sweep_runs.csv");
                write_sweep_records(res, out);
            }
            {
                auto out = open_out(fs::path(sw.out) / "sweep_summary.csv");
                write_sweep_aggregates(res, out);
            }
            write_sweep_aggregates(res, std::cout);
            return res.failures.empty() ? 0 : 1;
        });
    }

    if (run_cmd->parsed()) {
        return guarded([&] {
            apply_config_file(run_cmd, rs.config);
            ex.source = rs.source == "file" ? DataSource::file
                      : rs.source == "simulation"
                          ? DataSource::simulation
                          : throw std::invalid_argument("unknown source '" + rs.source + "'");
            ex.load.delimiter = unescape_delimiter(rs.delimiter);
            ex.split.mode = parse_split(rs.split);
            if (rs.generalization != "weak" && rs.generalization != "strong")
                throw std::invalid_argument("unknown generalization '" + rs.generalization + "'");
            ex.generalization = rs.generalization == "weak" ? Generalization::weak : Generalization::strong;
            ex.methods.clear();
            for (const auto& name : split_list(rs.methods)) ex.methods.push_back(parse_method(name));
            ex.gain = parse_gain(rs.gain);
            ex.outcome.poisson_link = parse_poisson_link(rs.link);
            ex.validate();
            auto table = run_experiment(ex);
            emit_outputs(table, ex.output_dir);
            for (const auto& r : table.rows) {
                if (r.ok)
                    std::cout << r.method << ": ndcg " << r.ndcg << ", recall@" << ex.recall_k << ' ' << r.recall << ", mse "
                              << r.mse << ", per-item mse " << r.item_mse << '\n';
                else
                    std::cout << r.method << ": failed (" << r.error << ")\n";
            }
            return table.all_ok() ? 0 : 1;
        });
    }
    return 0;
}
