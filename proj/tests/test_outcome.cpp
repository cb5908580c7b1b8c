#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dcf/outcome.hpp"
#include "dcf/pf.hpp"
#include "dcf/simulation.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

using namespace dcf;

namespace {

const Variant kVariants[] = {Variant::probabilistic, Variant::poisson, Variant::weighted};
const Correction kCorrections[] = {Correction::none, Correction::deconfounded, Correction::ipw};

struct Instance {
    SparseInteractions ratings;
    SubstituteConfounder sub;
    std::vector<double> props;
};

Instance random_instance(std::size_t U, std::size_t I, std::size_t Kp, std::uint64_t seed, double density = 0.5) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution b(density);
    std::uniform_int_distribution<int> r(1, 5);
    std::uniform_real_distribution<double> un(0.1, 1.0), pr(0.02, 0.5);
    std::vector<Entry> e;
    for (Index u = 0; u < U; ++u)
        for (Index i = 0; i < I; ++i)
            if (b(rng) || i == u % I) e.push_back({u, i, double(r(rng))});
    Instance in{SparseInteractions(U, I, e), {Matrix(U, Kp), Matrix(I, Kp)}, {}};
    for (double& v : in.sub.user_means.data()) v = un(rng);
    for (double& v : in.sub.item_means.data()) v = un(rng);
    for (std::size_t k = 0; k < in.ratings.nnz(); ++k) in.props.push_back(pr(rng));
    return in;
}

OutcomeConfig config(Variant v, Correction c, std::size_t K = 3) {
    OutcomeConfig cfg;
    cfg.variant = v;
    cfg.correction = c;
    cfg.K = K;
    cfg.prior_std_factors = 0.8;
    cfg.prior_std_gamma = 1.3;
    cfg.prior_std_intercept = 0.7;
    cfg.sigma2 = 0.6;
    cfg.alpha_weight = 2.0;
    return cfg;
}

// Random parameters; Poisson gets positive ones so rates stay off the floor.
OutcomeModel random_model(const Instance& in, const OutcomeConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> pos(0.2, 1.0);
    std::normal_distribution<double> nd(0.0, 0.7);
    OutcomeModel m;
    m.cfg = cfg;
    m.theta = Matrix(in.ratings.n_users(), cfg.K);
    m.beta = Matrix(in.ratings.n_items(), cfg.K);
    m.gamma.assign(in.ratings.n_users(), 0.0);
    bool positive = cfg.variant == Variant::poisson;
    auto draw = [&] { return positive ? pos(rng) : nd(rng); };
    for (double& v : m.theta.data()) v = draw();
    for (double& v : m.beta.data()) v = draw();
    if (cfg.correction == Correction::deconfounded) {
        for (double& g : m.gamma) g = draw();
        m.intercept = draw();
    }
    return m;
}

double oracle_of(const OutcomeModel& m, const Instance& in) {
    return oracle::outcome_objective(m, in.ratings, &in.sub, in.props);
}

// Visits every free parameter of a model together with its gradient slot.
template <class Fn>
void each_param(OutcomeModel& m, OutcomeGradient& g, Fn&& fn) {
    for (std::size_t k = 0; k < m.theta.data().size(); ++k) fn(m.theta.data()[k], g.theta.data()[k]);
    for (std::size_t k = 0; k < m.beta.data().size(); ++k) fn(m.beta.data()[k], g.beta.data()[k]);
    if (m.cfg.correction == Correction::deconfounded) {
        for (std::size_t k = 0; k < m.gamma.size(); ++k) fn(m.gamma[k], g.gamma[k]);
        if (m.cfg.use_intercept) fn(m.intercept, g.intercept);
    }
}

SparseInteractions dense_rank2(std::size_t n, std::uint64_t seed, Matrix& truth) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> un(0.5, 1.5);
    Matrix a(n, 2), b(n, 2);
    for (double& v : a.data()) v = un(rng);
    for (double& v : b.data()) v = un(rng);
    truth = Matrix(n, n);
    std::vector<Entry> e;
    for (Index u = 0; u < n; ++u)
        for (Index i = 0; i < n; ++i) {
            truth(u, i) = dot(a.row(u), b.row(i));
            e.push_back({u, i, truth(u, i)});
        }
    return SparseInteractions(n, n, e);
}

} // namespace

TEST_CASE("mean function per variant") {
    CHECK(mean_fn(Variant::probabilistic, 2.5, 0) == 0.0);
    CHECK(mean_fn(Variant::weighted, 2.5, 0) == 2.5);
    CHECK(mean_fn(Variant::poisson, 2.5, 0) == 2.5);
    for (auto v : kVariants) CHECK(mean_fn(v, 0.0, 1) == 0.0);
    CHECK(mean_fn(Variant::probabilistic, 2.5, 1) == 2.5);
}

TEST_CASE("objective matches the pairwise oracle") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        auto in = random_instance(7, 6, 2, seed);
        for (auto v : kVariants)
            for (auto c : kCorrections)
                for (bool icpt : {true, false}) {
                    auto cfg = config(v, c);
                    cfg.use_intercept = icpt;
                    auto m = random_model(in, cfg, seed + 100);
                    auto d = make_outcome_data(in.ratings, &in.sub, in.props, cfg);
                    CAPTURE(to_string(v));
                    CAPTURE(to_string(c));
                    CHECK(outcome_objective(m, d) == doctest::Approx(oracle_of(m, in)).epsilon(1e-11));
                }
    }
}

TEST_CASE("gradient matches central differences of the oracle") {
    const double eps = 1e-5;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto in = random_instance(5, 4, 2, seed + 50);
        for (auto v : kVariants)
            for (auto c : kCorrections) {
                auto cfg = config(v, c, 2);
                auto m = random_model(in, cfg, seed);
                auto d = make_outcome_data(in.ratings, &in.sub, in.props, cfg);
                auto g = outcome_gradient(m, d);
                double worst = 0.0;
                each_param(m, g, [&](double& p, double& an) {
                    double keep = p;
                    p = keep + eps;
                    double fp = oracle_of(m, in);
                    p = keep - eps;
                    double fm = oracle_of(m, in);
                    p = keep;
                    double fd = (fp - fm) / (2 * eps);
                    worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-3}));
                });
                CAPTURE(to_string(v));
                CAPTURE(to_string(c));
                CHECK(worst < 1e-4);
            }
    }
}

TEST_CASE("softplus link gradient") {
    auto in = random_instance(5, 4, 2, 3);
    auto cfg = config(Variant::poisson, Correction::deconfounded, 2);
    cfg.poisson_link = PoissonLink::softplus;
    auto m = random_model(in, cfg, 4);
    m.intercept = -2.0; // some rates through the curved part of the link
    auto d = make_outcome_data(in.ratings, &in.sub, in.props, cfg);
    auto g = outcome_gradient(m, d);
    each_param(m, g, [&](double& p, double& an) {
        double keep = p;
        p = keep + 1e-5;
        double fp = outcome_objective(m, d);
        p = keep - 1e-5;
        double fm = outcome_objective(m, d);
        p = keep;
        double fd = (fp - fm) / 2e-5;
        CHECK(std::abs(an - fd) <= 1e-4 * std::max({std::abs(an), std::abs(fd), 1e-3}));
    });
}

TEST_CASE("objective trace never increases") {
    auto in = random_instance(25, 20, 3, 8, 0.3);
    for (auto v : kVariants)
        for (auto c : kCorrections) {
            auto cfg = config(v, c, 3);
            cfg.max_epochs = 40;
            cfg.tol = 1e-12;
            auto m = fit_outcome(in.ratings, &in.sub, in.props, cfg);
            CAPTURE(to_string(v));
            CAPTURE(to_string(c));
            REQUIRE(m.objective_trace.size() >= 2);
            for (std::size_t t = 1; t < m.objective_trace.size(); ++t)
                CHECK(m.objective_trace[t] <= m.objective_trace[t - 1] * (1 + 1e-12) + 1e-12);
            // the trace records the objective of the returned parameters
            auto d = make_outcome_data(in.ratings, &in.sub, in.props, cfg);
            CHECK(outcome_objective(m, d) == doctest::Approx(m.objective_trace.back()).epsilon(1e-12));
            if (c != Correction::deconfounded) {
                for (double g : m.gamma) CHECK(g == 0.0);
                CHECK(m.intercept == 0.0);
            }
        }
}

TEST_CASE("classical MF recovers a noiseless rank-2 matrix") {
    Matrix truth;
    auto r = dense_rank2(50, 3, truth);
    auto cfg = config(Variant::probabilistic, Correction::none, 2);
    cfg.sigma2 = 1e-4; // the prior is then negligible against 50 ratings per row
    cfg.prior_std_factors = 1.0;
    cfg.max_epochs = 500;
    cfg.tol = 1e-12;
    auto m = fit_outcome(r, nullptr, {}, cfg);
    double se = 0;
    for (Index u = 0; u < 50; ++u)
        for (Index i = 0; i < 50; ++i) se += std::pow(predict_existing(m, nullptr, u, i) - truth(u, i), 2);
    CHECK(std::sqrt(se / 2500) < 0.05);
}

TEST_CASE("constant confounder and constant ratings are fit exactly") {
    std::vector<Entry> e;
    for (Index u = 0; u < 10; ++u)
        for (Index i = 0; i < 8; ++i) e.push_back({u, i, 4.0});
    SparseInteractions r(10, 8, e);
    SubstituteConfounder sub{Matrix(10, 2, 0.5), Matrix(8, 2, 0.5)};
    auto cfg = config(Variant::probabilistic, Correction::deconfounded, 2);
    cfg.sigma2 = 1e-6;
    cfg.max_epochs = 3000;
    cfg.tol = 1e-15;
    auto m = fit_outcome(r, &sub, {}, cfg);
    double worst = 0;
    for (Index u = 0; u < 10; ++u)
        for (Index i = 0; i < 8; ++i) worst = std::max(worst, std::abs(predict_existing(m, &sub, u, i) - 4.0));
    CHECK(worst < 1e-3);
}

TEST_CASE("existing-user predictions") {
    OutcomeModel m;
    m.cfg = config(Variant::probabilistic, Correction::none, 1);
    m.theta = Matrix(1, 1, 3.7);
    m.beta = Matrix(1, 1, 1.0);
    m.gamma = {0.0};
    CHECK(predict_existing(m, nullptr, 0, 0) == doctest::Approx(3.7));

    m.cfg.correction = Correction::deconfounded;
    m.theta = Matrix(1, 1, 3.0);
    m.gamma = {0.5};
    m.intercept = 0.1;
    SubstituteConfounder sub{Matrix(1, 1, 2.0), Matrix(1, 1, 1.0)};
    CHECK(predict_existing(m, &sub, 0, 0) == doctest::Approx(4.1));
    m.cfg.use_intercept = false;
    CHECK(predict_existing(m, &sub, 0, 0) == doctest::Approx(4.0));
    CHECK_THROWS_AS(predict_existing(m, &sub, 1, 0), std::out_of_range);
    CHECK_THROWS_AS(predict_existing(m, nullptr, 0, 0), std::invalid_argument);

    m.cfg.variant = Variant::poisson;
    m.gamma = {-5.0};
    CHECK(predict_existing(m, &sub, 0, 0) == kPoissonRateFloor);
}

TEST_CASE("serialized parameters reproduce predictions") {
    auto in = random_instance(30, 25, 3, 12, 0.3);
    auto cfg = config(Variant::weighted, Correction::deconfounded, 4);
    cfg.max_epochs = 15;
    cfg.seed = 77;
    auto m = fit_outcome(in.ratings, &in.sub, {}, cfg);
    std::stringstream ss;
    write_model(m, ss);
    auto back = read_model(ss);
    CHECK(back.theta == m.theta);
    CHECK(back.beta == m.beta);
    CHECK(back.gamma == m.gamma);
    CHECK(back.intercept == m.intercept);
    CHECK(back.cfg.variant == cfg.variant);
    CHECK(back.cfg.correction == cfg.correction);
    CHECK(back.cfg.K == 4);
    CHECK(back.cfg.seed == 77);
    CHECK(back.cfg.alpha_weight == cfg.alpha_weight);
    std::mt19937_64 rng(1);
    for (int t = 0; t < 100; ++t) {
        Index u = rng() % 30, i = rng() % 25;
        double brute = 0;
        for (std::size_t k = 0; k < 4; ++k) brute += back.theta(u, k) * back.beta(i, k);
        double ah = 0;
        for (std::size_t k = 0; k < 3; ++k) ah += in.sub.user_means(u, k) * in.sub.item_means(i, k);
        brute += back.gamma[u] * ah + back.intercept;
        CHECK(predict_existing(m, &in.sub, u, i) == doctest::Approx(brute).epsilon(1e-13));
    }
    std::stringstream bad("# K=1\n# n_users=1\n# n_items=1\nfoo 0 0 1\n");
    CHECK_THROWS(read_model(bad));
}

TEST_CASE("new user identical to a training user") {
    SimConfig sc;
    sc.U = 200;
    sc.I = 200;
    sc.gamma_theta = 0.5;
    sc.seed = 4;
    auto w = generate(sc);
    PFConfig pc;
    pc.K = 5;
    auto pf = fit_pf(w.observed.with_entries([&] {
        std::vector<Entry> e(w.observed.entries().begin(), w.observed.entries().end());
        for (auto& x : e) x.value = 1.0;
        return e;
    }()), pc);
    auto sub = compute_substitute(pf);
    for (auto c : {Correction::none, Correction::deconfounded}) {
        for (auto v : {Variant::probabilistic, Variant::poisson}) {
            auto cfg = config(v, c, 5);
            cfg.max_epochs = 60;
            auto m = fit_outcome(w.observed, &sub, {}, cfg);
            CAPTURE(to_string(c));
            CAPTURE(to_string(v));
            for (Index u : {3u, 50u, 111u}) {
                NewUserRequest req;
                for (const auto& e : w.observed.row(u)) {
                    req.exposures.emplace_back(e.item, 1.0);
                    req.ratings.emplace_back(e.item, e.value);
                }
                for (Index i = 0; i < 200; ++i) req.items.push_back(i);
                auto fold = cfg;
                fold.max_epochs = 500;
                fold.tol = 1e-10;
                auto p = predict_new_user(m, &pf, req, fold);
                CHECK_FALSE(p.prior_only);
                double se = 0, ss = 0;
                for (Index i = 0; i < 200; ++i) {
                    double ex = predict_existing(m, &sub, u, i);
                    se += (p.values[i] - ex) * (p.values[i] - ex);
                    ss += ex * ex;
                }
                CHECK(std::sqrt(se / ss) < 0.1);
                for (std::size_t t = 1; t < p.objective_trace.size(); ++t)
                    CHECK(p.objective_trace[t] <= p.objective_trace[t - 1] + 1e-12);
            }
        }
    }
}

TEST_CASE("new user without ratings predicts the intercept") {
    auto in = random_instance(20, 15, 2, 5, 0.4);
    std::vector<Entry> ex;
    for (const auto& e : in.ratings.entries()) ex.push_back({e.user, e.item, 1.0});
    PFConfig pc;
    pc.K = 2;
    auto pf = fit_pf(SparseInteractions(20, 15, ex), pc);
    auto sub = compute_substitute(pf);
    auto cfg = config(Variant::probabilistic, Correction::deconfounded, 2);
    cfg.max_epochs = 30;
    auto m = fit_outcome(in.ratings, &sub, {}, cfg);
    NewUserRequest req;
    req.exposures = {{0, 1.0}, {3, 1.0}};
    req.items = {0, 4, 9};
    auto p = predict_new_user(m, &pf, req, cfg);
    CHECK(p.prior_only);
    for (double v : p.values) CHECK(v == doctest::Approx(m.intercept).epsilon(1e-12));
    CHECK(p.gamma == 0.0);
    req.items = {99};
    CHECK_THROWS_AS(predict_new_user(m, &pf, req, cfg), std::out_of_range);
    req.items = {0};
    CHECK_THROWS_AS(predict_new_user(m, nullptr, req, cfg), std::invalid_argument);
}

TEST_CASE("ranking") {
    std::map<Index, double> p{{0, 4.1}, {1, 3.9}};
    std::vector<Index> c{0, 1};
    CHECK(rank_items(p, c) == std::vector<Index>{0, 1});
    std::map<Index, double> flat{{5, 2.0}, {2, 2.0}, {9, 2.0}};
    std::vector<Index> cf{9, 5, 2};
    CHECK(rank_items(flat, cf) == std::vector<Index>{2, 5, 9});

    std::mt19937_64 rng(2);
    std::map<Index, double> rnd;
    std::vector<Index> cand;
    for (Index i = 0; i < 40; ++i) {
        rnd[i] = double(rng() % 7);
        cand.push_back(i);
    }
    auto want = rank_items(rnd, cand);
    for (int t = 0; t < 10; ++t) {
        std::shuffle(cand.begin(), cand.end(), rng);
        CHECK(rank_items(rnd, cand) == want);
    }
    CHECK_THROWS_AS(rank_items(p, std::vector<Index>{}), std::invalid_argument);
    CHECK_THROWS_AS(rank_items(p, std::vector<Index>{7}), std::invalid_argument);
}

TEST_CASE("zero confounder with pinned coefficients reduces to classical MF") {
    auto in = random_instance(30, 25, 2, 14, 0.3);
    SubstituteConfounder zero{Matrix(30, 2, 0.0), Matrix(25, 2, 0.0)};
    auto cfg = config(Variant::probabilistic, Correction::none, 3);
    cfg.max_epochs = 50;
    auto classical = fit_outcome(in.ratings, nullptr, {}, cfg);
    cfg.correction = Correction::deconfounded;
    cfg.prior_std_gamma = 1e-8;
    cfg.prior_std_intercept = 1e-8;
    auto deconf = fit_outcome(in.ratings, &zero, {}, cfg);
    double worst = 0;
    for (Index u = 0; u < 30; ++u)
        for (Index i = 0; i < 25; ++i)
            worst = std::max(worst, std::abs(predict_existing(deconf, &zero, u, i) - predict_existing(classical, nullptr, u, i)));
    CHECK(worst < 1e-6);
}

TEST_CASE("gamma gradient sums over every item") {
    auto in = random_instance(6, 9, 2, 15, 0.3);
    auto cfg = config(Variant::probabilistic, Correction::deconfounded, 2);
    auto m = random_model(in, cfg, 3);
    auto d = make_outcome_data(in.ratings, &in.sub, {}, cfg);
    auto g = outcome_gradient(m, d);
    for (Index u = 0; u < 6; ++u) {
        double all = 0, observed = 0;
        for (Index i = 0; i < 9; ++i) {
            double ah = dot(in.sub.user_means.row(u), in.sub.item_means.row(i));
            auto y = in.ratings.value(u, i);
            double eta = (y ? dot(m.theta.row(u), m.beta.row(i)) : 0.0) + m.gamma[u] * ah + m.intercept;
            double t = (eta - y.value_or(0.0)) * ah / cfg.sigma2;
            all += t;
            if (y) observed += t;
        }
        double prior = m.gamma[u] / (cfg.prior_std_gamma * cfg.prior_std_gamma);
        CHECK(g.gamma[u] == doctest::Approx(all + prior).epsilon(1e-12));
        CHECK(std::abs(g.gamma[u] - (observed + prior)) > 1e-6);
    }
    // theta sees only the rated items
    for (Index u = 0; u < 6; ++u)
        for (std::size_t k = 0; k < 2; ++k) {
            double s = 0;
            for (const auto& e : in.ratings.row(u)) {
                double ah = dot(in.sub.user_means.row(u), in.sub.item_means.row(e.item));
                double eta = dot(m.theta.row(u), m.beta.row(e.item)) + m.gamma[u] * ah + m.intercept;
                s += (eta - e.value) * m.beta(e.item, k) / cfg.sigma2;
            }
            s += m.theta(u, k) / (cfg.prior_std_factors * cfg.prior_std_factors);
            CHECK(g.theta(u, k) == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("uniform propensities reproduce the uncorrected probabilistic fit") {
    auto in = random_instance(30, 25, 2, 16, 0.3);
    auto cfg = config(Variant::probabilistic, Correction::none, 3);
    cfg.max_epochs = 80;
    auto plain = fit_outcome(in.ratings, nullptr, {}, cfg);
    cfg.correction = Correction::ipw;
    std::vector<double> flat(in.ratings.nnz(), 0.07);
    auto ipw = fit_outcome(in.ratings, nullptr, flat, cfg);
    for (std::size_t k = 0; k < plain.theta.data().size(); ++k)
        CHECK(ipw.theta.data()[k] == doctest::Approx(plain.theta.data()[k]).epsilon(1e-3));
    for (std::size_t k = 0; k < plain.beta.data().size(); ++k)
        CHECK(ipw.beta.data()[k] == doctest::Approx(plain.beta.data()[k]).epsilon(1e-3));
}

TEST_CASE("Poisson rates stay above the floor") {
    auto in = random_instance(20, 15, 2, 17, 0.3);
    for (auto c : kCorrections)
        for (auto link : {PoissonLink::clamp, PoissonLink::softplus}) {
            auto cfg = config(Variant::poisson, c, 2);
            cfg.poisson_link = link;
            cfg.max_epochs = 30;
            auto m = fit_outcome(in.ratings, &in.sub, in.props, cfg);
            for (Index u = 0; u < 20; ++u)
                for (Index i = 0; i < 15; ++i) CHECK(predict_existing(m, &in.sub, u, i) >= kPoissonRateFloor);
            for (double f : m.objective_trace) CHECK(std::isfinite(f));
        }
}

TEST_CASE("fits are deterministic under the seed") {
    auto in = random_instance(15, 12, 2, 18, 0.4);
    auto cfg = config(Variant::weighted, Correction::deconfounded, 2);
    cfg.max_epochs = 20;
    cfg.seed = 5;
    auto a = fit_outcome(in.ratings, &in.sub, {}, cfg);
    auto b = fit_outcome(in.ratings, &in.sub, {}, cfg);
    CHECK(a.theta == b.theta);
    CHECK(a.objective_trace == b.objective_trace);
    cfg.seed = 6;
    auto c = fit_outcome(in.ratings, &in.sub, {}, cfg);
    CHECK_FALSE(a.theta == c.theta);
}

TEST_CASE("preconditions and divergence") {
    auto in = random_instance(6, 5, 2, 19);
    auto cfg = config(Variant::probabilistic, Correction::deconfounded, 2);
    CHECK_THROWS_AS(fit_outcome(in.ratings, nullptr, {}, cfg), std::invalid_argument);
    SubstituteConfounder wrong{Matrix(5, 2), Matrix(5, 2)};
    CHECK_THROWS_AS(fit_outcome(in.ratings, &wrong, {}, cfg), std::invalid_argument);
    cfg.correction = Correction::ipw;
    CHECK_THROWS_AS(fit_outcome(in.ratings, nullptr, {}, cfg), std::invalid_argument);
    auto props = in.props;
    props[0] = 0.0;
    CHECK_THROWS_AS(fit_outcome(in.ratings, nullptr, props, cfg), std::invalid_argument);
    cfg = config(Variant::probabilistic, Correction::none, 0);
    CHECK_THROWS_AS(fit_outcome(in.ratings, nullptr, {}, cfg), std::invalid_argument);
    cfg = config(Variant::probabilistic, Correction::none, 2);
    cfg.sigma2 = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    CHECK_THROWS_AS(parse_variant("bernoulli"), std::invalid_argument);
    CHECK(parse_correction("deconfounded") == Correction::deconfounded);

    // a non-finite rating makes the first epoch diverge
    SparseInteractions bad(2, 2, {{0, 0, 3.0}, {1, 1, std::numeric_limits<double>::infinity()}});
    cfg = config(Variant::probabilistic, Correction::none, 1);
    try {
        fit_outcome(bad, nullptr, {}, cfg);
        FAIL("expected divergence");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
    }
}
