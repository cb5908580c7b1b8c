#include "dcf/experiment.hpp"

#include "dcf/ipw.hpp"
#include "dcf/parallel.hpp"
#include "dcf/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>

namespace dcf {

std::string MethodSpec::name() const {
    if (oracle) return "oracle";
    return std::string(to_string(variant)) + "_" + std::string(to_string(correction));
}

MethodSpec parse_method(const std::string& name) {
    MethodSpec m;
    if (name == "oracle") {
        m.oracle = true;
        return m;
    }
    auto cut = name.find('_');
    if (cut == std::string::npos) throw std::invalid_argument("method '" + name + "' is not <variant>_<correction>");
    m.variant = parse_variant(name.substr(0, cut));
    m.correction = parse_correction(name.substr(cut + 1));
    return m;
}

std::vector<MethodSpec> all_methods() {
    std::vector<MethodSpec> out;
    for (auto v : {Variant::probabilistic, Variant::poisson, Variant::weighted})
        for (auto c : {Correction::none, Correction::deconfounded, Correction::ipw}) out.push_back({v, c, false});
    return out;
}

void ExperimentConfig::validate() const {
    if (methods.empty()) throw std::invalid_argument("no methods requested");
    if (k_grid.empty() || prior_std_grid.empty()) throw std::invalid_argument("hyperparameter grid is empty");
    for (auto k : k_grid)
        if (k < 1) throw std::invalid_argument("latent dimension must be >= 1");
    for (double s : prior_std_grid)
        if (!(s > 0)) throw std::invalid_argument("prior std must be positive");
    bool needs_pf = false;
    for (const auto& m : methods) {
        if (m.oracle && source != DataSource::simulation) throw std::invalid_argument("oracle method requires a simulation source");
        needs_pf = needs_pf || (!m.oracle && m.correction == Correction::deconfounded);
    }
    if (needs_pf && pf_k_grid.empty()) throw std::invalid_argument("deconfounded methods need a PF latent dimension grid");
    for (auto k : pf_k_grid)
        if (k < 1) throw std::invalid_argument("PF latent dimension must be >= 1");
    if (source == DataSource::file && train_path.empty()) throw std::invalid_argument("file source requires a training path");
    if (recall_k < 1) throw std::invalid_argument("recall_k must be >= 1");
    if (generalization == Generalization::strong && !(split.strong_holdout > 0 && split.strong_holdout < 1))
        throw std::invalid_argument("strong generalization needs a held-out user fraction in (0, 1)");
    if (source == DataSource::simulation) sim.validate();
}

namespace {

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T>
std::string join(const std::vector<T>& v) {
    std::string s;
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (k) s += ',';
        if constexpr (std::is_floating_point_v<T>)
            s += num(v[k]);
        else
            s += std::to_string(v[k]);
    }
    return s;
}

std::string mode_name(SplitMode m) {
    switch (m) {
    case SplitMode::train_val_80_20: return "train_val_80_20";
    case SplitMode::train_val_test_60_20_20: return "train_val_test_60_20_20";
    case SplitMode::provided_random_test: return "provided_random_test";
    }
    return "?";
}

std::string sanitize(std::string s) {
    for (char& c : s)
        if (c == ',' || c == '\n' || c == '\r') c = ';';
    return s;
}

} // namespace

std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& c) {
    std::vector<std::pair<std::string, std::string>> e;
    auto add = [&](std::string k, std::string v) { e.emplace_back(std::move(k), std::move(v)); };
    add("source", c.source == DataSource::file ? "file" : "simulation");
    add("train", c.train_path);
    add("test", c.test_path);
    add("delimiter", c.load.delimiter);
    add("user_column", std::to_string(c.load.user_column));
    add("item_column", std::to_string(c.load.item_column));
    add("rating_column", std::to_string(c.load.rating_column));
    add("index_base", std::to_string(c.load.index_base));
    add("header_lines", std::to_string(c.load.header_lines));
    add("sim_users", std::to_string(c.sim.U));
    add("sim_items", std::to_string(c.sim.I));
    add("sim_K", std::to_string(c.sim.K));
    add("gamma_theta", num(c.sim.gamma_theta));
    add("gamma_y", num(c.sim.gamma_y));
    add("sim_gamma_shape", num(c.sim.gamma_shape));
    add("sim_gamma_rate", num(c.sim.gamma_rate));
    add("sim_seed", std::to_string(c.sim.seed));
    add("sim_test_items", std::to_string(c.sim_test_items));
    add("split", mode_name(c.split.mode));
    add("split_seed", std::to_string(c.split.seed));
    add("strong_holdout", num(c.split.strong_holdout));
    add("foldin_fraction", num(c.split.foldin_fraction));
    add("generalization", c.generalization == Generalization::weak ? "weak" : "strong");
    std::string methods;
    for (std::size_t k = 0; k < c.methods.size(); ++k) methods += (k ? "," : "") + c.methods[k].name();
    add("methods", methods);
    add("k_grid", join(c.k_grid));
    add("prior_std_grid", join(c.prior_std_grid));
    add("pf_k_grid", join(c.pf_k_grid));
    add("prior_std_gamma", num(c.outcome.prior_std_gamma));
    add("prior_std_intercept", num(c.outcome.prior_std_intercept));
    add("sigma2", num(c.outcome.sigma2));
    add("alpha_weight", num(c.outcome.alpha_weight));
    add("use_intercept", c.outcome.use_intercept ? "1" : "0");
    add("poisson_link", std::string(to_string(c.outcome.poisson_link)));
    add("learning_rate", num(c.outcome.learning_rate));
    add("max_epochs", std::to_string(c.outcome.max_epochs));
    add("tol", num(c.outcome.tol));
    add("init_scale", num(c.outcome.init_scale));
    add("pf_shape_prior", num(c.pf.user_shape_prior) + "," + num(c.pf.item_shape_prior));
    add("pf_rate_prior", num(c.pf.user_rate_prior) + "," + num(c.pf.item_rate_prior));
    add("pf_max_iters", std::to_string(c.pf.max_iters));
    add("pf_tol", num(c.pf.tol));
    add("pf_init_jitter", num(c.pf.init_jitter));
    add("ipw_alpha", num(c.ipw_alpha));
    add("ipw_target_mean", num(c.ipw_target_mean));
    add("gain", c.gain == Gain::exp_minus_one ? "exp_minus_one" : "literal_paper");
    add("recall_k", std::to_string(c.recall_k));
    add("relevance_threshold", num(c.relevance_threshold));
    add("clip", c.clip_predictions ? "1" : "0");
    add("seed", std::to_string(c.seed));
    return e; // threads and output_dir do not change results
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [k, v] : config_entries(cfg)) {
        for (char ch : k + "=" + v + "\n") {
            h ^= static_cast<unsigned char>(ch);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

bool ResultsTable::all_ok() const {
    return std::all_of(rows.begin(), rows.end(), [](const ResultRow& r) { return r.ok; });
}

namespace {

struct Prepared {
    DatasetBundle bundle;
    std::optional<SimWorld> world;
};

Prepared prepare(const ExperimentConfig& cfg) {
    Prepared p;
    if (cfg.source == DataSource::simulation) {
        p.world = generate(cfg.sim);
        const auto& obs = p.world->observed;
        p.bundle = split(obs, cfg.split);
        if (split_fractions(cfg.split.mode)[2] == 0.0) {
            // Randomized test: items the user was never exposed to, rated by y(1).
            Rng rng(mix_seed(cfg.split.seed, 0x7e57));
            std::vector<Entry> test;
            std::vector<Index> pool;
            for (Index u = 0; u < cfg.sim.U; ++u) {
                pool.clear();
                for (Index i = 0; i < cfg.sim.I; ++i)
                    if (!p.world->exposure(u, i)) pool.push_back(i);
                std::size_t n = std::min(cfg.sim_test_items, pool.size());
                for (std::size_t k = 0; k < n; ++k) {
                    std::size_t j = k + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(pool.size() - k));
                    std::swap(pool[k], pool[j]);
                    test.push_back({u, pool[k], static_cast<double>(p.world->rating(u, pool[k]))});
                }
            }
            p.bundle.test = obs.with_entries(std::move(test));
            p.bundle.test_kind = TestKind::randomized;
        }
    } else {
        auto data = load_delimited(cfg.train_path, cfg.load);
        if (!cfg.test_path.empty()) {
            auto test = load_delimited(cfg.test_path, cfg.load);
            SplitSpec spec = cfg.split;
            spec.mode = SplitMode::provided_random_test;
            p.bundle = split(attach_random_test(data, test), spec);
        } else {
            p.bundle = split(data, cfg.split);
        }
    }
    return p;
}

struct GridPoint {
    std::size_t method; // index into cfg.methods
    std::size_t K;
    double prior_std;
    std::size_t pf_K;
};

} // namespace

ResultsTable run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();
    ResultsTable table;
    table.config = config_entries(cfg);
    table.config_hash = config_hash(cfg);

    Prepared prep = prepare(cfg);
    auto& B = prep.bundle;
    table.warnings = B.warnings;
    const bool strong = cfg.generalization == Generalization::strong;

    std::vector<bool> heldout(B.train.n_users(), false);
    for (Index u : B.heldout_users) heldout[u] = true;
    std::vector<bool> keep(B.train.n_users());
    for (std::size_t u = 0; u < keep.size(); ++u) keep[u] = !heldout[u];

    // Training universe: held-out users are removed entirely in strong mode.
    RestrictedUsers fit_data;
    if (strong) {
        fit_data = restrict_users(B.train, keep);
    } else {
        fit_data.data = B.train;
        fit_data.original_user.resize(B.train.n_users());
        for (Index u = 0; u < B.train.n_users(); ++u) fit_data.original_user[u] = u;
    }
    const SparseInteractions& train = fit_data.data;
    std::vector<std::optional<Index>> compact(B.train.n_users());
    for (Index r = 0; r < fit_data.original_user.size(); ++r) compact[fit_data.original_user[r]] = r;

    std::vector<Entry> val_entries;
    for (const auto& e : B.validation.entries())
        if (compact[e.user]) val_entries.push_back({*compact[e.user], e.item, e.value});
    SparseInteractions validation(train.n_users(), train.n_items(), std::move(val_entries));
    if (validation.empty()) table.warnings.push_back("validation fold is empty; grid selection falls back to config order");

    bool needs_pf = false, needs_ipw = false;
    for (const auto& m : cfg.methods) {
        needs_pf = needs_pf || (!m.oracle && m.correction == Correction::deconfounded);
        needs_ipw = needs_ipw || (!m.oracle && m.correction == Correction::ipw);
    }

    std::map<std::size_t, PFPosterior> posteriors;
    std::map<std::size_t, SubstituteConfounder> subs;
    std::map<std::size_t, std::string> pf_errors;
    if (needs_pf) {
        std::vector<std::size_t> ks = cfg.pf_k_grid;
        std::vector<std::optional<PFPosterior>> fitted(ks.size());
        std::vector<std::string> errs(ks.size());
        auto exposures = binarize(train);
        parallel_for(ks.size(), cfg.threads, [&](std::size_t j) {
            PFConfig pc = cfg.pf;
            pc.K = ks[j];
            pc.seed = mix_seed(cfg.seed, 0x9f00 + ks[j]);
            try {
                fitted[j] = fit_pf(exposures, pc);
            } catch (const std::exception& ex) {
                errs[j] = ex.what();
            }
        });
        for (std::size_t j = 0; j < ks.size(); ++j) {
            if (fitted[j]) {
                subs[ks[j]] = compute_substitute(*fitted[j]);
                posteriors[ks[j]] = std::move(*fitted[j]);
            } else {
                pf_errors[ks[j]] = errs[j];
            }
        }
    }

    std::optional<PropensityModel> prop;
    std::vector<double> train_props;
    std::string prop_error;
    if (needs_ipw) {
        try {
            prop = fit_propensity(train, train.n_users(), train.n_items(), cfg.ipw_alpha, cfg.ipw_target_mean);
            train_props = propensities(*prop, train.entries());
        } catch (const std::exception& ex) {
            prop_error = ex.what();
        }
    }

    std::vector<GridPoint> points;
    for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
        const auto& m = cfg.methods[mi];
        if (m.oracle) continue;
        std::vector<std::size_t> pfks = m.correction == Correction::deconfounded ? cfg.pf_k_grid : std::vector<std::size_t>{0};
        for (auto K : cfg.k_grid)
            for (double ps : cfg.prior_std_grid)
                for (auto pk : pfks) points.push_back({mi, K, ps, pk});
    }

    auto outcome_cfg = [&](const GridPoint& g) {
        OutcomeConfig oc = cfg.outcome;
        oc.variant = cfg.methods[g.method].variant;
        oc.correction = cfg.methods[g.method].correction;
        oc.K = g.K;
        oc.prior_std_factors = g.prior_std;
        oc.seed = mix_seed(cfg.seed, 0x0c);
        return oc;
    };
    auto sub_of = [&](const GridPoint& g) -> const SubstituteConfounder* {
        if (cfg.methods[g.method].correction != Correction::deconfounded) return nullptr;
        auto it = subs.find(g.pf_K);
        if (it == subs.end()) throw std::runtime_error("exposure model failed: " + pf_errors[g.pf_K]);
        return &it->second;
    };

    std::vector<std::optional<OutcomeModel>> models(points.size());
    std::vector<GridScore> scores(points.size());
    parallel_for(points.size(), cfg.threads, [&](std::size_t j) {
        const auto& g = points[j];
        auto& s = scores[j];
        s.method = cfg.methods[g.method].name();
        s.K = g.K;
        s.prior_std = g.prior_std;
        s.pf_K = g.pf_K;
        try {
            auto oc = outcome_cfg(g);
            const auto* sub = sub_of(g);
            std::span<const double> props;
            if (oc.correction == Correction::ipw) {
                if (!prop) throw std::runtime_error("propensity model failed: " + prop_error);
                props = train_props;
            }
            auto model = fit_outcome(train, sub, props, oc);
            if (!validation.empty()) {
                std::vector<double> vp;
                vp.reserve(validation.nnz());
                for (const auto& e : validation.entries()) vp.push_back(predict_existing(model, sub, e.user, e.item));
                s.validation_ndcg = ndcg(user_lists(validation, vp), cfg.gain);
            }
            models[j] = std::move(model);
        } catch (const std::exception& ex) {
            s.ok = false;
            s.error = sanitize(ex.what());
        }
    });
    table.grid = scores;

    // Test pairs: every test entry (weak) or held-out users' entries (strong).
    std::vector<Entry> test_entries;
    for (const auto& e : B.test.entries())
        if (!strong || heldout[e.user]) test_entries.push_back(e);
    SparseInteractions test = B.test.with_entries(test_entries);

    for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
        const auto& m = cfg.methods[mi];
        ResultRow row;
        row.method = m.name();
        try {
            if (test.empty()) throw std::runtime_error("test set is empty");
            std::vector<double> pred(test.nnz());
            if (m.oracle) {
                for (std::size_t k = 0; k < test.nnz(); ++k) {
                    const auto& e = test.entries()[k];
                    pred[k] = prep.world->rating(e.user, e.item);
                }
            } else {
                std::optional<std::size_t> best;
                for (std::size_t j = 0; j < points.size(); ++j) {
                    if (points[j].method != mi || !scores[j].ok) continue;
                    if (!best || scores[j].validation_ndcg > scores[*best].validation_ndcg) best = j;
                }
                if (!best) {
                    std::string why;
                    for (std::size_t j = 0; j < points.size(); ++j)
                        if (points[j].method == mi) why = scores[j].error;
                    throw std::runtime_error("every grid point failed: " + why);
                }
                // Fits are deterministic, so the retained grid model is the refit.
                const auto& g = points[*best];
                const OutcomeModel& model = *models[*best];
                const auto* sub = sub_of(g);
                row.K = g.K;
                row.prior_std = g.prior_std;
                row.pf_K = g.pf_K;
                row.validation_ndcg = scores[*best].validation_ndcg;
                for (std::size_t r = 0; r < model.rating_terms_per_user.size(); ++r)
                    if (heldout[fit_data.original_user[r]]) table.heldout_training_terms += model.rating_terms_per_user[r];

                if (!strong) {
                    for (std::size_t k = 0; k < test.nnz(); ++k) {
                        const auto& e = test.entries()[k];
                        pred[k] = predict_existing(model, sub, e.user, e.item);
                    }
                } else {
                    const PFPosterior* post = sub ? &posteriors.at(g.pf_K) : nullptr;
                    for (Index h : B.heldout_users) {
                        auto trow = test.row(h);
                        if (trow.empty()) continue;
                        NewUserRequest req;
                        for (const auto& e : B.foldin.row(h)) {
                            req.exposures.emplace_back(e.item, 1.0);
                            req.ratings.emplace_back(e.item, e.value);
                            if (m.correction == Correction::ipw) req.propensities.push_back(prop->propensity(e.value));
                        }
                        for (const auto& e : trow) req.items.push_back(e.item);
                        auto res = predict_new_user(model, post, req, model.cfg);
                        std::size_t base = static_cast<std::size_t>(trow.data() - test.entries().data());
                        for (std::size_t k = 0; k < trow.size(); ++k) pred[base + k] = res.values[k];
                    }
                }
            }
            if (cfg.clip_predictions)
                for (double& v : pred) v = std::clamp(v, B.rating_scale.min, B.rating_scale.max);
            for (double v : pred)
                if (!std::isfinite(v)) throw std::runtime_error("non-finite prediction");
            auto rep = evaluate(test, pred, cfg.gain, cfg.recall_k, cfg.relevance_threshold);
            row.ndcg = rep.get("ndcg", "user");
            row.recall = rep.get("recall@" + std::to_string(cfg.recall_k), "user");
            row.mse = rep.get("mse", "pooled");
            row.mae = rep.get("mae", "pooled");
            row.item_mse = rep.get("mse", "item");
            row.item_mae = rep.get("mae", "item");
            row.test_pairs = test.nnz();
            PredictionDump dump;
            dump.method = row.method;
            for (std::size_t k = 0; k < test.nnz(); ++k) {
                const auto& e = test.entries()[k];
                dump.user_ids.push_back(test.user_id(e.user));
                dump.item_ids.push_back(test.item_id(e.item));
                dump.ratings.push_back(e.value);
                dump.predictions.push_back(pred[k]);
            }
            table.predictions.push_back(std::move(dump));
        } catch (const std::exception& ex) {
            row = ResultRow{};
            row.method = m.name();
            row.ok = false;
            row.error = sanitize(ex.what());
            std::cerr << "error: method " << row.method << " failed: " << ex.what() << '\n';
        }
        table.rows.push_back(std::move(row));
    }
    table.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return table;
}

namespace {

const char* kResultsHeader =
    "method,status,ndcg,recall_at_k,mse,mae,item_mse,item_mae,K,prior_std,pf_K,validation_ndcg,test_pairs,error";

void write_results(const ResultsTable& t, std::ostream& out) {
    out << kResultsHeader << '\n';
    for (const auto& r : t.rows) {
        out << r.method << ',' << (r.ok ? "ok" : "failed") << ',' << num(r.ndcg) << ',' << num(r.recall) << ','
            << num(r.mse) << ',' << num(r.mae) << ',' << num(r.item_mse) << ',' << num(r.item_mae) << ',' << r.K << ','
            << num(r.prior_std) << ',' << r.pf_K << ',' << num(r.validation_ndcg) << ',' << r.test_pairs << ','
            << r.error << '\n';
    }
}

void write_grid(const ResultsTable& t, std::ostream& out) {
    out << "method,K,prior_std,pf_K,validation_ndcg,status,error\n";
    for (const auto& g : t.grid)
        out << g.method << ',' << g.K << ',' << num(g.prior_std) << ',' << g.pf_K << ',' << num(g.validation_ndcg) << ','
            << (g.ok ? "ok" : "failed") << ',' << g.error << '\n';
}

void write_predictions(const PredictionDump& d, std::ostream& out) {
    out << "user_id,item_id,rating,prediction\n";
    for (std::size_t k = 0; k < d.predictions.size(); ++k)
        out << d.user_ids[k] << ',' << d.item_ids[k] << ',' << num(d.ratings[k]) << ',' << num(d.predictions[k]) << '\n';
}

void write_manifest(const ResultsTable& t, const std::vector<std::string>& files, std::ostream& out) {
    nlohmann::ordered_json j;
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(t.config_hash));
    j["config_hash"] = hash;
    nlohmann::ordered_json c;
    for (const auto& [k, v] : t.config) c[k] = v;
    j["config"] = c;
    j["version"] = "dcfrec 0.1.0";
    j["wall_seconds"] = t.wall_seconds;
    j["all_methods_ok"] = t.all_ok();
    j["heldout_training_terms"] = t.heldout_training_terms;
    j["warnings"] = t.warnings;
    j["files"] = files;
    out << j.dump(2) << '\n';
}

} // namespace

std::vector<std::filesystem::path> emit_outputs(const ResultsTable& table, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (table.rows.empty()) throw std::invalid_argument("emit_outputs: results table has no methods");
    std::vector<fs::path> written;
    std::vector<fs::path> temps;
    auto cleanup = [&] {
        std::error_code ec;
        for (const auto& p : temps) fs::remove(p, ec);
        for (const auto& p : written) fs::remove(p, ec);
    };
    try {
        fs::create_directories(dir);
        auto emit = [&](const std::string& name, auto&& writer) {
            fs::path final_path = dir / name;
            fs::path tmp = dir / (name + ".tmp");
            temps.push_back(tmp);
            {
                std::ofstream out(tmp, std::ios::binary);
                if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
                writer(out);
                out.flush();
                if (!out) throw std::runtime_error("write failed for " + tmp.string());
            }
            fs::rename(tmp, final_path);
            temps.pop_back();
            written.push_back(final_path);
        };
        std::vector<std::string> names{"results.csv", "grid_scores.csv"};
        emit("results.csv", [&](std::ostream& o) { write_results(table, o); });
        emit("grid_scores.csv", [&](std::ostream& o) { write_grid(table, o); });
        for (const auto& d : table.predictions) {
            std::string name = "predictions_" + d.method + ".csv";
            names.push_back(name);
            emit(name, [&](std::ostream& o) { write_predictions(d, o); });
        }
        names.push_back("manifest.json");
        emit("manifest.json", [&](std::ostream& o) { write_manifest(table, names, o); });
    } catch (...) {
        cleanup();
        throw;
    }
    return written;
}

std::vector<ResultRow> read_results_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kResultsHeader) throw std::runtime_error("unexpected results header in " + path.string());
    std::vector<ResultRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (!line.empty() && line.back() == ',') f.emplace_back();
        if (f.size() != 14) throw std::runtime_error("malformed results row: " + line);
        ResultRow r;
        r.method = f[0];
        r.ok = f[1] == "ok";
        r.ndcg = std::stod(f[2]);
        r.recall = std::stod(f[3]);
        r.mse = std::stod(f[4]);
        r.mae = std::stod(f[5]);
        r.item_mse = std::stod(f[6]);
        r.item_mae = std::stod(f[7]);
        r.K = std::stoul(f[8]);
        r.prior_std = std::stod(f[9]);
        r.pf_K = std::stoul(f[10]);
        r.validation_ndcg = std::stod(f[11]);
        r.test_pairs = std::stoul(f[12]);
        r.error = f[13];
        rows.push_back(std::move(r));
    }
    return rows;
}

} // namespace dcf
