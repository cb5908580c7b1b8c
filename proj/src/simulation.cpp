#include "dcf/simulation.hpp"

#include "dcf/data.hpp"
#include "dcf/metrics.hpp"
#include "dcf/parallel.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace dcf {

void SimConfig::validate() const {
    if (U < 1 || I < 1 || K < 1) throw std::invalid_argument("SimConfig: U, I and K must be >= 1");
    if (!(gamma_theta >= 0.0 && gamma_theta <= 1.0)) throw std::invalid_argument("SimConfig: gamma_theta must be in [0, 1]");
    if (!(gamma_y >= 0.0)) throw std::invalid_argument("SimConfig: gamma_y must be >= 0");
    if (!(gamma_shape > 0.0 && gamma_rate > 0.0)) throw std::invalid_argument("SimConfig: Gamma shape and rate must be > 0");
}

namespace {

void fill_gamma(Matrix& m, double shape, double rate, Rng& rng) {
    std::gamma_distribution<double> g(shape, 1.0 / rate);
    for (double& v : m.data()) v = g(rng);
}

// min(Poisson(rate), cap) by inverse CDF from one uniform.
int truncated_poisson(double rate, int cap, double u) {
    double p = std::exp(-rate), cdf = p;
    int k = 0;
    while (k < cap && u >= cdf) {
        ++k;
        p *= rate / k;
        cdf += p;
    }
    return k;
}

} // namespace

SimWorld generate(const SimConfig& cfg) {
    cfg.validate();
    SimWorld w;
    w.cfg = cfg;
    Rng rng(mix_seed(cfg.seed, 0x51a));
    w.c = Matrix(cfg.U, cfg.K);
    w.beta = Matrix(cfg.I, cfg.K);
    w.theta = Matrix(cfg.U, cfg.K);
    fill_gamma(w.c, cfg.gamma_shape, cfg.gamma_rate, rng);
    fill_gamma(w.beta, cfg.gamma_shape, cfg.gamma_rate, rng);
    Matrix fresh(cfg.U, cfg.K);
    fill_gamma(fresh, cfg.gamma_shape, cfg.gamma_rate, rng);
    for (std::size_t k = 0; k < w.theta.data().size(); ++k)
        w.theta.data()[k] = cfg.gamma_theta * w.c.data()[k] + (1.0 - cfg.gamma_theta) * fresh.data()[k];

    w.exposures.resize(cfg.U * cfg.I);
    w.potential.resize(cfg.U * cfg.I);
    std::vector<Entry> entries;
    std::vector<double> pref(cfg.K);
    for (Index u = 0; u < cfg.U; ++u) {
        auto cu = w.c.row(u);
        auto tu = w.theta.row(u);
        for (std::size_t k = 0; k < cfg.K; ++k) pref[k] = tu[k] + cfg.gamma_y * cu[k];
        for (Index i = 0; i < cfg.I; ++i) {
            auto bi = w.beta.row(i);
            // P(Poisson(r) >= 1) = 1 - exp(-r)
            double ue = uniform01(rng), uy = uniform01(rng);
            std::uint8_t a = ue < -std::expm1(-dot(cu, bi)) ? 1 : 0;
            std::uint8_t y = static_cast<std::uint8_t>(1 + truncated_poisson(dot(pref, bi), 4, uy));
            w.exposures[std::size_t(u) * cfg.I + i] = a;
            w.potential[std::size_t(u) * cfg.I + i] = y;
            if (a) entries.push_back({u, i, static_cast<double>(y)});
        }
    }
    w.observed = SparseInteractions(cfg.U, cfg.I, std::move(entries));
    return w;
}

namespace {

double user_loss(const SimWorld& w, const Matrix& pred, Index u, std::span<const Index> items, SimLoss loss) {
    if (loss == SimLoss::mse) {
        double s = 0.0;
        for (Index i : items) {
            double r = pred(u, i) - w.rating(u, i);
            s += r * r;
        }
        return s / static_cast<double>(items.size());
    }
    UserList list;
    list.reserve(items.size());
    for (Index i : items) list.push_back({i, pred(u, i), static_cast<double>(w.rating(u, i))});
    return ndcg_user(list);
}

void check_shape(const SimWorld& w, const Matrix& pred) {
    if (pred.rows() != w.cfg.U || pred.cols() != w.cfg.I)
        throw std::invalid_argument("predictions must be a U x I matrix");
}

} // namespace

double causal_error(const SimWorld& world, const Matrix& predictions, SimLoss loss) {
    check_shape(world, predictions);
    std::vector<Index> all(world.cfg.I);
    std::iota(all.begin(), all.end(), Index{0});
    double s = 0.0;
    for (Index u = 0; u < world.cfg.U; ++u) s += user_loss(world, predictions, u, all, loss);
    return s / static_cast<double>(world.cfg.U);
}

double randomized_test_error(const SimWorld& world, const std::vector<std::vector<Index>>& subsets,
                             const Matrix& predictions, SimLoss loss, std::size_t* skipped) {
    check_shape(world, predictions);
    if (subsets.size() != world.cfg.U) throw std::invalid_argument("randomized_test_error: one subset per user required");
    double s = 0.0;
    std::size_t n = 0, sk = 0;
    for (Index u = 0; u < world.cfg.U; ++u) {
        if (subsets[u].empty()) {
            ++sk;
            continue;
        }
        s += user_loss(world, predictions, u, subsets[u], loss);
        ++n;
    }
    if (sk) std::cerr << "warning: " << sk << " users with an empty test subset skipped\n";
    if (skipped) *skipped = sk;
    return n ? s / static_cast<double>(n) : 0.0;
}

std::vector<std::vector<Index>> draw_subsets(std::size_t n_users, std::size_t n_items, std::size_t size, Rng& rng) {
    size = std::min(size, n_items);
    std::vector<std::vector<Index>> out(n_users);
    std::vector<Index> perm(n_items);
    for (auto& s : out) {
        std::iota(perm.begin(), perm.end(), Index{0});
        // partial Fisher-Yates
        for (std::size_t k = 0; k < size; ++k) {
            std::size_t j = k + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n_items - k));
            std::swap(perm[k], perm[j]);
        }
        s.assign(perm.begin(), perm.begin() + size);
    }
    return out;
}

Matrix predict_all(const OutcomeModel& model, const SubstituteConfounder* sub) {
    Matrix p(model.n_users(), model.n_items());
    for (Index u = 0; u < model.n_users(); ++u)
        for (Index i = 0; i < model.n_items(); ++i) p(u, i) = predict_existing(model, sub, u, i);
    return p;
}

std::vector<SweepMethod> default_sweep_methods(std::size_t K) {
    std::vector<SweepMethod> m(3);
    m[0].name = "oracle";
    m[0].oracle = true;
    m[1].name = "probabilistic_none";
    m[1].outcome.variant = Variant::probabilistic;
    m[1].outcome.correction = Correction::none;
    m[2].name = "probabilistic_deconfounded";
    m[2].outcome.variant = Variant::probabilistic;
    m[2].outcome.correction = Correction::deconfounded;
    for (auto& x : m) {
        x.outcome.K = K;
        x.outcome.prior_std_factors = 0.1;
        x.pf.K = K;
    }
    return m;
}

SweepResult sweep(const SimConfig& base, std::span<const SweepPoint> grid, std::span<const SweepMethod> methods,
                  const SweepOptions& opts) {
    if (opts.runs < 1) throw std::invalid_argument("sweep: runs must be >= 1");
    if (methods.empty()) throw std::invalid_argument("sweep: no methods");
    base.validate();
    static const char* kMetrics[] = {"causal_mse", "causal_ndcg"};

    struct Cell {
        std::vector<SweepRecord> records;
        std::vector<SweepFailure> failures;
    };
    std::vector<Cell> cells(grid.size() * opts.runs);
    parallel_for(cells.size(), opts.threads, [&](std::size_t idx) {
        const auto& pt = grid[idx / opts.runs];
        std::size_t run = idx % opts.runs;
        Cell& cell = cells[idx];
        auto fail = [&](const std::string& method, const std::string& what) {
            cell.failures.push_back({pt.gamma_theta, pt.gamma_y, method, run, what});
        };
        SimConfig cfg = base;
        cfg.gamma_theta = pt.gamma_theta;
        cfg.gamma_y = pt.gamma_y;
        cfg.seed = mix_seed(base.seed, run);
        SimWorld world;
        SparseInteractions train;
        try {
            world = generate(cfg);
            std::vector<Entry> kept;
            Rng rng(mix_seed(cfg.seed, 0x7a1));
            for (const auto& e : world.observed.entries())
                if (uniform01(rng) < opts.train_fraction) kept.push_back(e);
            train = world.observed.with_entries(std::move(kept));
        } catch (const std::exception& ex) {
            for (const auto& m : methods) fail(m.name, ex.what());
            return;
        }
        std::map<std::size_t, SubstituteConfounder> subs; // by PF K
        for (const auto& m : methods) {
            try {
                Matrix pred;
                if (m.oracle) {
                    pred = Matrix(cfg.U, cfg.I);
                    for (std::size_t k = 0; k < pred.data().size(); ++k) pred.data()[k] = world.potential[k];
                } else {
                    const SubstituteConfounder* sub = nullptr;
                    if (m.outcome.correction == Correction::deconfounded) {
                        auto it = subs.find(m.pf.K);
                        if (it == subs.end()) {
                            PFConfig pc = m.pf;
                            pc.seed = mix_seed(cfg.seed, 0x9f);
                            it = subs.emplace(m.pf.K, compute_substitute(fit_pf(binarize(train), pc))).first;
                        }
                        sub = &it->second;
                    }
                    if (m.outcome.correction == Correction::ipw)
                        throw std::invalid_argument("ipw is not supported in simulation sweeps");
                    OutcomeConfig oc = m.outcome;
                    oc.seed = mix_seed(cfg.seed, 0x0f);
                    pred = predict_all(fit_outcome(train, sub, {}, oc), sub);
                }
                cell.records.push_back({pt.gamma_theta, pt.gamma_y, m.name, kMetrics[0], run,
                                        causal_error(world, pred, SimLoss::mse)});
                cell.records.push_back({pt.gamma_theta, pt.gamma_y, m.name, kMetrics[1], run,
                                        causal_error(world, pred, SimLoss::ndcg)});
            } catch (const std::exception& ex) {
                fail(m.name, ex.what());
            }
        }
    });

    SweepResult res;
    for (auto& c : cells) {
        res.records.insert(res.records.end(), c.records.begin(), c.records.end());
        res.failures.insert(res.failures.end(), c.failures.begin(), c.failures.end());
    }
    for (const auto& f : res.failures)
        std::cerr << "warning: sweep run failed (gamma_theta=" << f.gamma_theta << ", gamma_y=" << f.gamma_y
                  << ", method=" << f.method << ", run=" << f.run << "): " << f.error << '\n';
    for (const auto& pt : grid) {
        for (const auto& m : methods) {
            for (const char* metric : kMetrics) {
                std::vector<double> v;
                for (const auto& r : res.records)
                    if (r.gamma_theta == pt.gamma_theta && r.gamma_y == pt.gamma_y && r.method == m.name && r.metric == metric)
                        v.push_back(r.value);
                if (v.empty()) continue;
                double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
                double se = 0.0;
                if (v.size() > 1) {
                    double ss = 0.0;
                    for (double x : v) ss += (x - mean) * (x - mean);
                    se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
                }
                res.aggregates.push_back({pt.gamma_theta, pt.gamma_y, m.name, metric, mean, se, v.size()});
            }
        }
    }
    return res;
}

namespace {
std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
} // namespace

void write_sweep_records(const SweepResult& result, std::ostream& out) {
    out << "gamma_theta,gamma_y,method,metric,run,value\n";
    for (const auto& r : result.records)
        out << fmt(r.gamma_theta) << ',' << fmt(r.gamma_y) << ',' << r.method << ',' << r.metric << ',' << r.run << ','
            << fmt(r.value) << '\n';
}

void write_sweep_aggregates(const SweepResult& result, std::ostream& out) {
    out << "gamma_theta,gamma_y,method,metric,mean,stderr\n";
    for (const auto& a : result.aggregates)
        out << fmt(a.gamma_theta) << ',' << fmt(a.gamma_y) << ',' << a.method << ',' << a.metric << ',' << fmt(a.mean)
            << ',' << fmt(a.stderr_) << '\n';
}

} // namespace dcf
