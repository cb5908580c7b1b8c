#include "dcf/outcome.hpp"

#include "dcf/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <random>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace dcf {

std::string_view to_string(Variant v) {
    switch (v) {
    case Variant::probabilistic: return "probabilistic";
    case Variant::poisson: return "poisson";
    case Variant::weighted: return "weighted";
    }
    return "?";
}

std::string_view to_string(Correction c) {
    switch (c) {
    case Correction::none: return "none";
    case Correction::deconfounded: return "deconfounded";
    case Correction::ipw: return "ipw";
    }
    return "?";
}

std::string_view to_string(PoissonLink l) { return l == PoissonLink::clamp ? "clamp" : "softplus"; }

Variant parse_variant(std::string_view s) {
    if (s == "probabilistic") return Variant::probabilistic;
    if (s == "poisson") return Variant::poisson;
    if (s == "weighted") return Variant::weighted;
    throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

Correction parse_correction(std::string_view s) {
    if (s == "none") return Correction::none;
    if (s == "deconfounded") return Correction::deconfounded;
    if (s == "ipw") return Correction::ipw;
    throw std::invalid_argument("unknown correction '" + std::string(s) + "'");
}

PoissonLink parse_poisson_link(std::string_view s) {
    if (s == "clamp") return PoissonLink::clamp;
    if (s == "softplus") return PoissonLink::softplus;
    throw std::invalid_argument("unknown poisson link '" + std::string(s) + "'");
}

void OutcomeConfig::validate() const {
    if (K < 1) throw std::invalid_argument("OutcomeConfig: K must be >= 1");
    if (!(prior_std_factors > 0 && prior_std_gamma > 0 && prior_std_intercept > 0))
        throw std::invalid_argument("OutcomeConfig: prior standard deviations must be positive");
    if (!(sigma2 > 0)) throw std::invalid_argument("OutcomeConfig: sigma2 must be positive");
    if (!(alpha_weight > 0)) throw std::invalid_argument("OutcomeConfig: alpha_weight must be positive");
    if (!(learning_rate > 0)) throw std::invalid_argument("OutcomeConfig: learning_rate must be positive");
    if (!(tol > 0)) throw std::invalid_argument("OutcomeConfig: tol must be positive");
}

double mean_fn(Variant variant, double dot, int exposure) {
    return variant == Variant::probabilistic ? exposure * dot : dot;
}

namespace {

// Which terms the objective contains for a (variant, correction) pair.
struct Layout {
    double s = 0.0;          // multiplier of theta.beta on unexposed entries
    bool g = false;          // gamma_u * a_hat term
    bool h = false;          // intercept term
    bool zero_terms = false; // unexposed entries enter with target 0
    bool gaussian = true;
    std::size_t K = 0, Kp = 0, D = 0;
};

Layout layout_of(const OutcomeConfig& cfg, const SubstituteConfounder* sub) {
    Layout L;
    L.s = cfg.variant == Variant::probabilistic ? 0.0 : 1.0;
    L.g = cfg.correction == Correction::deconfounded;
    L.h = L.g && cfg.use_intercept;
    L.zero_terms = cfg.correction != Correction::ipw && (cfg.variant != Variant::probabilistic || L.g);
    L.gaussian = cfg.variant != Variant::poisson;
    L.K = cfg.K;
    L.Kp = L.g && sub ? sub->user_means.cols() : 0;
    L.D = L.K + L.Kp + 1;
    return L;
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Rate and d(rate)/d(eta) for the Poisson variant. The rate never drops below
// kPoissonRateFloor; the gradient through the floor is zero.
double poisson_rate(PoissonLink link, double eta, double& deriv) {
    double rate = eta;
    deriv = 1.0;
    if (link == PoissonLink::softplus) {
        rate = softplus(eta);
        deriv = sigmoid(eta);
    }
    if (rate < kPoissonRateFloor) {
        rate = kPoissonRateFloor;
        deriv = 0.0;
    }
    return rate;
}

// Loss of one pair and d(loss)/d(eta). Unexposed entries pass y = 0, w = 1.
double pair_loss(const Layout& L, const OutcomeConfig& cfg, double eta, double y, double w, double& dl) {
    if (L.gaussian) {
        double r = eta - y;
        dl = w * r / cfg.sigma2;
        return 0.5 * w * r * r / cfg.sigma2;
    }
    double d;
    double rate = poisson_rate(cfg.poisson_link, eta, d);
    dl = w * (1.0 - y / rate) * d;
    return w * (rate - y * std::log(rate));
}

double ahat(const SubstituteConfounder* sub, std::span<const double> pi, Index i) {
    return dot(pi, sub->item_means.row(i));
}

std::span<const double> user_pi(const Layout& L, const SubstituteConfounder* sub, Index u) {
    if (!L.g) return {};
    return sub->user_means.row(u);
}

double prior_value(const OutcomeModel& m, const Layout& L) {
    const auto& c = m.cfg;
    double f = 0.0;
    for (double v : m.theta.data()) f += v * v;
    for (double v : m.beta.data()) f += v * v;
    double val = 0.5 * f / (c.prior_std_factors * c.prior_std_factors);
    if (L.g) {
        double gg = 0.0;
        for (double v : m.gamma) gg += v * v;
        val += 0.5 * gg / (c.prior_std_gamma * c.prior_std_gamma);
    }
    if (L.h) val += 0.5 * m.intercept * m.intercept / (c.prior_std_intercept * c.prior_std_intercept);
    return val;
}

// G = sum_i Q_i Q_i^T with Q_i = [beta_i, lambda_i, 1].
std::vector<double> item_gram(const OutcomeModel& m, const SubstituteConfounder* sub, const Layout& L) {
    std::vector<double> G(L.D * L.D, 0.0);
    std::vector<double> q(L.D);
    for (std::size_t i = 0; i < m.n_items(); ++i) {
        auto b = m.beta.row(i);
        std::copy(b.begin(), b.end(), q.begin());
        for (std::size_t k = 0; k < L.Kp; ++k) q[L.K + k] = sub->item_means(i, k);
        q[L.D - 1] = 1.0;
        for (std::size_t a = 0; a < L.D; ++a)
            for (std::size_t c = 0; c < L.D; ++c) G[a * L.D + c] += q[a] * q[c];
    }
    return G;
}

// P_u = [s theta_u, g gamma_u pi_u, h beta_0]; unexposed eta = P_u . Q_i.
std::vector<double> user_vec(const OutcomeModel& m, std::span<const double> theta, double gamma,
                             std::span<const double> pi, const Layout& L) {
    std::vector<double> p(L.D, 0.0);
    for (std::size_t k = 0; k < L.K; ++k) p[k] = L.s * theta[k];
    for (std::size_t k = 0; k < L.Kp; ++k) p[L.K + k] = gamma * pi[k];
    p[L.D - 1] = L.h ? m.intercept : 0.0;
    return p;
}

double quad(const std::vector<double>& G, const std::vector<double>& p, std::size_t D) {
    double s = 0.0;
    for (std::size_t a = 0; a < D; ++a) {
        double r = 0.0;
        for (std::size_t c = 0; c < D; ++c) r += G[a * D + c] * p[c];
        s += p[a] * r;
    }
    return s;
}

// Visits every pair of user u that enters the objective: observed entries
// (with their weight) and, when zero terms are on, the remaining items.
template <class Fn>
void for_each_user_pair(const Layout& L, const OutcomeData& d, Index u, Fn&& fn) {
    const auto& R = *d.ratings;
    auto row = R.row(u);
    const Entry* base = R.entries().data();
    if (!L.zero_terms) {
        for (const auto& e : row) fn(e.item, true, e.value, d.weights[&e - base]);
        return;
    }
    std::size_t p = 0;
    for (Index i = 0; i < R.n_items(); ++i) {
        if (p < row.size() && row[p].item == i) {
            fn(i, true, row[p].value, d.weights[&row[p] - base]);
            ++p;
        } else {
            fn(i, false, 0.0, 1.0);
        }
    }
}

double gaussian_objective(const OutcomeModel& m, const OutcomeData& d, const Layout& L) {
    const auto& R = *d.ratings;
    double obs = 0.0;
    for (std::size_t k = 0; k < R.nnz(); ++k) {
        const auto& e = R.entries()[k];
        double dt = dot(m.theta.row(e.user), m.beta.row(e.item));
        double off = (L.g ? m.gamma[e.user] * ahat(d.sub, user_pi(L, d.sub, e.user), e.item) : 0.0) +
                     (L.h ? m.intercept : 0.0);
        double r = dt + off - e.value;
        obs += d.weights[k] * r * r;
        if (L.zero_terms) {
            double eta0 = L.s * dt + off;
            obs -= eta0 * eta0;
        }
    }
    if (L.zero_terms) {
        auto G = item_gram(m, d.sub, L);
        for (Index u = 0; u < m.n_users(); ++u) {
            auto p = user_vec(m, m.theta.row(u), m.gamma[u], user_pi(L, d.sub, u), L);
            obs += quad(G, p, L.D);
        }
    }
    return 0.5 * obs / m.cfg.sigma2 + prior_value(m, L);
}

double dense_objective(const OutcomeModel& m, const OutcomeData& d, const Layout& L) {
    double val = 0.0;
    for (Index u = 0; u < m.n_users(); ++u) {
        auto pi = user_pi(L, d.sub, u);
        auto th = m.theta.row(u);
        for_each_user_pair(L, d, u, [&](Index i, bool observed, double y, double w) {
            double dt = dot(th, m.beta.row(i));
            double eta = (observed ? dt : L.s * dt) + (L.g ? m.gamma[u] * ahat(d.sub, pi, i) : 0.0) +
                         (L.h ? m.intercept : 0.0);
            double dl;
            val += pair_loss(L, m.cfg, eta, y, w, dl);
        });
    }
    return val + prior_value(m, L);
}

OutcomeGradient zero_gradient(const OutcomeModel& m, const Layout& L) {
    const auto& c = m.cfg;
    OutcomeGradient g{Matrix(m.n_users(), m.cfg.K), Matrix(m.n_items(), m.cfg.K),
                      std::vector<double>(m.n_users(), 0.0), 0.0};
    double pf = 1.0 / (c.prior_std_factors * c.prior_std_factors);
    for (std::size_t k = 0; k < m.theta.data().size(); ++k) g.theta.data()[k] = m.theta.data()[k] * pf;
    for (std::size_t k = 0; k < m.beta.data().size(); ++k) g.beta.data()[k] = m.beta.data()[k] * pf;
    if (L.g)
        for (std::size_t u = 0; u < m.n_users(); ++u) g.gamma[u] = m.gamma[u] / (c.prior_std_gamma * c.prior_std_gamma);
    if (L.h) g.intercept = m.intercept / (c.prior_std_intercept * c.prior_std_intercept);
    return g;
}

OutcomeGradient gaussian_gradient(const OutcomeModel& m, const OutcomeData& d, const Layout& L) {
    auto g = zero_gradient(m, L);
    const auto& R = *d.ratings;
    const double inv = 1.0 / m.cfg.sigma2;
    const std::size_t K = L.K;
    for (std::size_t k = 0; k < R.nnz(); ++k) {
        const auto& e = R.entries()[k];
        auto th = m.theta.row(e.user);
        auto be = m.beta.row(e.item);
        double dt = dot(th, be);
        double ah = L.g ? ahat(d.sub, user_pi(L, d.sub, e.user), e.item) : 0.0;
        double off = (L.g ? m.gamma[e.user] * ah : 0.0) + (L.h ? m.intercept : 0.0);
        double c1 = d.weights[k] * (dt + off - e.value) * inv;
        double c2 = L.zero_terms ? (L.s * dt + off) * inv : 0.0;
        double ct = c1 - L.s * c2; // theta/beta coefficient
        double co = c1 - c2;       // gamma/intercept coefficient
        auto gt = g.theta.row(e.user);
        auto gb = g.beta.row(e.item);
        for (std::size_t q = 0; q < K; ++q) {
            gt[q] += ct * be[q];
            gb[q] += ct * th[q];
        }
        if (L.g) g.gamma[e.user] += co * ah;
        if (L.h) g.intercept += co;
    }
    if (!L.zero_terms) return g;

    const std::size_t D = L.D;
    auto G = item_gram(m, d.sub, L);
    std::vector<double> N(K * D, 0.0); // sum_u theta_u P_u^T
    for (Index u = 0; u < m.n_users(); ++u) {
        auto pi = user_pi(L, d.sub, u);
        auto p = user_vec(m, m.theta.row(u), m.gamma[u], pi, L);
        std::vector<double> Gp(D, 0.0);
        for (std::size_t a = 0; a < D; ++a)
            for (std::size_t c = 0; c < D; ++c) Gp[a] += G[a * D + c] * p[c];
        auto gt = g.theta.row(u);
        for (std::size_t q = 0; q < K; ++q) gt[q] += L.s * Gp[q] * inv;
        if (L.g) {
            double s = 0.0;
            for (std::size_t q = 0; q < L.Kp; ++q) s += pi[q] * Gp[K + q];
            g.gamma[u] += s * inv;
        }
        if (L.h) g.intercept += Gp[D - 1] * inv;
        auto th = m.theta.row(u);
        for (std::size_t a = 0; a < K; ++a)
            for (std::size_t c = 0; c < D; ++c) N[a * D + c] += th[a] * p[c];
    }
    if (L.s != 0.0) {
        std::vector<double> q(D);
        for (Index i = 0; i < m.n_items(); ++i) {
            auto b = m.beta.row(i);
            std::copy(b.begin(), b.end(), q.begin());
            for (std::size_t k = 0; k < L.Kp; ++k) q[K + k] = d.sub->item_means(i, k);
            q[D - 1] = 1.0;
            auto gb = g.beta.row(i);
            for (std::size_t a = 0; a < K; ++a) {
                double s = 0.0;
                for (std::size_t c = 0; c < D; ++c) s += N[a * D + c] * q[c];
                gb[a] += L.s * s * inv;
            }
        }
    }
    return g;
}

OutcomeGradient dense_gradient(const OutcomeModel& m, const OutcomeData& d, const Layout& L) {
    auto g = zero_gradient(m, L);
    const std::size_t K = L.K;
    for (Index u = 0; u < m.n_users(); ++u) {
        auto pi = user_pi(L, d.sub, u);
        auto th = m.theta.row(u);
        auto gt = g.theta.row(u);
        for_each_user_pair(L, d, u, [&](Index i, bool observed, double y, double w) {
            auto be = m.beta.row(i);
            double dt = dot(th, be);
            double ah = L.g ? ahat(d.sub, pi, i) : 0.0;
            double sc = observed ? 1.0 : L.s;
            double eta = sc * dt + (L.g ? m.gamma[u] * ah : 0.0) + (L.h ? m.intercept : 0.0);
            double dl;
            pair_loss(L, m.cfg, eta, y, w, dl);
            auto gb = g.beta.row(i);
            for (std::size_t q = 0; q < K; ++q) {
                gt[q] += dl * sc * be[q];
                gb[q] += dl * sc * th[q];
            }
            if (L.g) g.gamma[u] += dl * ah;
            if (L.h) g.intercept += dl;
        });
    }
    return g;
}

// ---- block updates -------------------------------------------------------

struct ObservedTerm {
    Index index; // item (user block) or user (item block)
    double y, w;
};

// Exact minimizer over [theta_u, gamma_u] for the Gaussian variants with item
// parameters, the intercept and pi_u fixed.
std::vector<double> solve_user_gaussian(const OutcomeModel& m, const SubstituteConfounder* sub, const Layout& L,
                                        std::span<const double> pi, std::span<const ObservedTerm> obs,
                                        const std::vector<double>& G) {
    const auto& c = m.cfg;
    const std::size_t K = L.K, D = L.D, n = K + (L.g ? 1 : 0);
    const double inv = 1.0 / c.sigma2;
    const double b0 = L.h ? m.intercept : 0.0;
    std::vector<double> A(n * n, 0.0), b(n, 0.0);
    for (std::size_t q = 0; q < K; ++q) A[q * n + q] = 1.0 / (c.prior_std_factors * c.prior_std_factors);
    if (L.g) A[K * n + K] = 1.0 / (c.prior_std_gamma * c.prior_std_gamma);

    // Observed entries add w f f^T and remove the zero-target term f0 f0^T that
    // the all-items sum below counts; f = [beta_i, a_hat], f0 = [s beta_i, a_hat].
    const double zt = L.zero_terms ? 1.0 : 0.0;
    for (const auto& t : obs) {
        auto be = m.beta.row(t.index);
        double cbb = (t.w - zt * L.s * L.s) * inv;
        double rb = (t.w * (t.y - b0) + zt * L.s * b0) * inv;
        for (std::size_t a = 0; a < K; ++a) {
            double ba = cbb * be[a];
            for (std::size_t q = a; q < K; ++q) A[a * n + q] += ba * be[q];
            b[a] += rb * be[a];
        }
        if (L.g) {
            double ah = ahat(sub, pi, t.index);
            double cba = (t.w - zt * L.s) * inv * ah;
            for (std::size_t a = 0; a < K; ++a) A[a * n + K] += cba * be[a];
            A[K * n + K] += (t.w - zt) * inv * ah * ah;
            b[K] += (t.w * (t.y - b0) + zt * b0) * inv * ah;
        }
    }
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t q = a + 1; q < n; ++q) A[q * n + a] = A[a * n + q];
    if (L.zero_terms) {
        // sum over all items of f0 f0^T and f0, read off the item Gram matrix.
        std::vector<double> Gpi(K, 0.0);
        double pGp = 0.0, piSum = 0.0;
        if (L.g) {
            for (std::size_t a = 0; a < K; ++a)
                for (std::size_t q = 0; q < L.Kp; ++q) Gpi[a] += G[a * D + K + q] * pi[q];
            for (std::size_t a = 0; a < L.Kp; ++a) {
                for (std::size_t q = 0; q < L.Kp; ++q) pGp += pi[a] * G[(K + a) * D + K + q] * pi[q];
                piSum += pi[a] * G[(K + a) * D + D - 1];
            }
        }
        for (std::size_t a = 0; a < K; ++a) {
            for (std::size_t q = 0; q < K; ++q) A[a * n + q] += L.s * L.s * G[a * D + q] * inv;
            b[a] -= b0 * L.s * G[a * D + D - 1] * inv;
            if (L.g) {
                A[a * n + K] += L.s * Gpi[a] * inv;
                A[K * n + a] += L.s * Gpi[a] * inv;
            }
        }
        if (L.g) {
            A[K * n + K] += pGp * inv;
            b[K] -= b0 * piSum * inv;
        }
    }
    return cholesky_solve(std::move(A), std::move(b), n);
}

// Negative log posterior restricted to one user's terms (dense over items).
double user_block_value(const OutcomeModel& m, const SubstituteConfounder* sub, const Layout& L,
                        std::span<const double> pi, std::span<const ObservedTerm> obs, std::span<const double> x,
                        std::vector<double>* grad) {
    const auto& c = m.cfg;
    const std::size_t K = L.K;
    double gamma = L.g ? x[K] : 0.0;
    double val = 0.0;
    if (grad) grad->assign(x.size(), 0.0);
    auto term = [&](Index i, bool observed, double y, double w) {
        auto be = m.beta.row(i);
        double dt = dot(x.first(K), be);
        double ah = L.g ? ahat(sub, pi, i) : 0.0;
        double sc = observed ? 1.0 : L.s;
        double eta = sc * dt + gamma * ah + (L.h ? m.intercept : 0.0);
        double dl;
        val += pair_loss(L, c, eta, y, w, dl);
        if (grad) {
            for (std::size_t q = 0; q < K; ++q) (*grad)[q] += dl * sc * be[q];
            if (L.g) (*grad)[K] += dl * ah;
        }
    };
    if (L.zero_terms) {
        std::size_t p = 0;
        for (Index i = 0; i < m.n_items(); ++i) {
            if (p < obs.size() && obs[p].index == i) {
                term(i, true, obs[p].y, obs[p].w);
                ++p;
            } else {
                term(i, false, 0.0, 1.0);
            }
        }
    } else {
        for (const auto& t : obs) term(t.index, true, t.y, t.w);
    }
    double pf = 1.0 / (c.prior_std_factors * c.prior_std_factors);
    for (std::size_t q = 0; q < K; ++q) {
        val += 0.5 * x[q] * x[q] * pf;
        if (grad) (*grad)[q] += x[q] * pf;
    }
    if (L.g) {
        double pg = 1.0 / (c.prior_std_gamma * c.prior_std_gamma);
        val += 0.5 * gamma * gamma * pg;
        if (grad) (*grad)[K] += gamma * pg;
    }
    return val;
}

// Gradient steps with Armijo backtracking on a small block. `step` carries
// over between calls. Returns the final objective.
template <class Eval>
double descend(std::vector<double>& x, Eval&& eval, double& step, std::size_t iters) {
    std::vector<double> g, trial(x.size()), gt;
    double f = eval(x, &g);
    for (std::size_t it = 0; it < iters; ++it) {
        double gg = 0.0;
        for (double v : g) gg += v * v;
        if (gg == 0.0) break;
        bool accepted = false;
        for (int tries = 0; tries < 60; ++tries) {
            for (std::size_t k = 0; k < x.size(); ++k) trial[k] = x[k] - step * g[k];
            double ft = eval(trial, nullptr);
            if (std::isfinite(ft) && ft <= f - 1e-4 * step * gg) {
                x = trial;
                f = eval(x, &g);
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
    }
    return f;
}

std::vector<ObservedTerm> user_terms(const OutcomeData& d, Index u) {
    std::vector<ObservedTerm> out;
    const Entry* base = d.ratings->entries().data();
    for (const auto& e : d.ratings->row(u)) out.push_back({e.item, e.value, d.weights[&e - base]});
    return out;
}

std::vector<ObservedTerm> item_terms(const OutcomeData& d, Index i) {
    std::vector<ObservedTerm> out;
    for (std::size_t pos : d.ratings->column(i)) {
        const auto& e = d.ratings->entries()[pos];
        out.push_back({e.user, e.value, d.weights[pos]});
    }
    return out;
}

void gaussian_user_sweep(OutcomeModel& m, const OutcomeData& d, const Layout& L) {
    auto G = L.zero_terms ? item_gram(m, d.sub, L) : std::vector<double>{};
    for (Index u = 0; u < m.n_users(); ++u) {
        auto obs = user_terms(d, u);
        auto x = solve_user_gaussian(m, d.sub, L, user_pi(L, d.sub, u), obs, G);
        std::copy(x.begin(), x.begin() + L.K, m.theta.row(u).begin());
        if (L.g) m.gamma[u] = x[L.K];
    }
}

void gaussian_item_sweep(OutcomeModel& m, const OutcomeData& d, const Layout& L) {
    const auto& c = m.cfg;
    const std::size_t K = L.K, E = L.Kp + 1;
    const double inv = 1.0 / c.sigma2;
    const double b0 = L.h ? m.intercept : 0.0;
    const bool all = L.zero_terms && L.s != 0.0;
    // TT = sum_u theta theta^T, M = sum_u theta_u R_u^T with R_u = [gamma_u pi_u, b0].
    std::vector<double> TT(K * K, 0.0), M(K * E, 0.0);
    if (all) {
        for (Index u = 0; u < m.n_users(); ++u) {
            auto th = m.theta.row(u);
            auto pi = user_pi(L, d.sub, u);
            for (std::size_t a = 0; a < K; ++a) {
                for (std::size_t q = 0; q < K; ++q) TT[a * K + q] += th[a] * th[q];
                for (std::size_t q = 0; q < L.Kp; ++q) M[a * E + q] += th[a] * m.gamma[u] * pi[q];
                M[a * E + E - 1] += th[a] * b0;
            }
        }
    }
    std::vector<double> A(K * K), b(K);
    for (Index i = 0; i < m.n_items(); ++i) {
        std::fill(A.begin(), A.end(), 0.0);
        std::fill(b.begin(), b.end(), 0.0);
        for (std::size_t q = 0; q < K; ++q) A[q * K + q] = 1.0 / (c.prior_std_factors * c.prior_std_factors);
        double zt = L.zero_terms ? L.s * L.s : 0.0;
        for (const auto& t : item_terms(d, i)) {
            auto th = m.theta.row(t.index);
            double off = (L.g ? m.gamma[t.index] * ahat(d.sub, user_pi(L, d.sub, t.index), i) : 0.0) + b0;
            double c = (t.w - zt) * inv;
            double r = (t.w * (t.y - off) + (L.zero_terms ? L.s : 0.0) * off) * inv;
            for (std::size_t a = 0; a < K; ++a) {
                double ta = c * th[a];
                for (std::size_t q = a; q < K; ++q) A[a * K + q] += ta * th[q];
                b[a] += r * th[a];
            }
        }
        for (std::size_t a = 0; a < K; ++a)
            for (std::size_t q = a + 1; q < K; ++q) A[q * K + a] = A[a * K + q];
        if (all) {
            for (std::size_t a = 0; a < K; ++a) {
                for (std::size_t q = 0; q < K; ++q) A[a * K + q] += L.s * L.s * TT[a * K + q] * inv;
                double s = M[a * E + E - 1];
                for (std::size_t q = 0; q < L.Kp; ++q) s += M[a * E + q] * d.sub->item_means(i, q);
                b[a] -= L.s * s * inv;
            }
        }
        auto x = cholesky_solve(A, b, K);
        std::copy(x.begin(), x.end(), m.beta.row(i).begin());
    }
}

void gaussian_intercept_update(OutcomeModel& m, const OutcomeData& d, const Layout& L) {
    const auto& c = m.cfg;
    const auto& R = *d.ratings;
    double wsum = 0.0, num = 0.0;
    for (std::size_t k = 0; k < R.nnz(); ++k) {
        const auto& e = R.entries()[k];
        double dt = dot(m.theta.row(e.user), m.beta.row(e.item));
        double conf = L.g ? m.gamma[e.user] * ahat(d.sub, user_pi(L, d.sub, e.user), e.item) : 0.0;
        wsum += d.weights[k];
        num += d.weights[k] * (e.value - dt - conf);
        if (L.zero_terms) num += L.s * dt + conf; // removes observed pairs from the all-pairs sum below
    }
    if (L.zero_terms) {
        std::vector<double> beta_sum(L.K, 0.0), lambda_sum(L.Kp, 0.0);
        for (Index i = 0; i < m.n_items(); ++i) {
            for (std::size_t q = 0; q < L.K; ++q) beta_sum[q] += m.beta(i, q);
            for (std::size_t q = 0; q < L.Kp; ++q) lambda_sum[q] += d.sub->item_means(i, q);
        }
        for (Index u = 0; u < m.n_users(); ++u) {
            num -= L.s * dot(m.theta.row(u), beta_sum);
            if (L.g) num -= m.gamma[u] * dot(user_pi(L, d.sub, u), lambda_sum);
        }
        wsum += static_cast<double>(R.n_users() * R.n_items() - R.nnz());
    }
    double prec = 1.0 / (c.prior_std_intercept * c.prior_std_intercept);
    m.intercept = (num / c.sigma2) / (wsum / c.sigma2 + prec);
}

// ---- Poisson block updates ---------------------------------------------

double item_block_value(const OutcomeModel& m, const OutcomeData& d, const Layout& L, Index i,
                        std::span<const ObservedTerm> obs, std::span<const double> x, std::vector<double>* grad) {
    const auto& c = m.cfg;
    const std::size_t K = L.K;
    double val = 0.0;
    if (grad) grad->assign(K, 0.0);
    auto term = [&](Index u, bool observed, double y, double w) {
        auto th = m.theta.row(u);
        double sc = observed ? 1.0 : L.s;
        double eta = sc * dot(th, x) + (L.g ? m.gamma[u] * ahat(d.sub, user_pi(L, d.sub, u), i) : 0.0) +
                     (L.h ? m.intercept : 0.0);
        double dl;
        val += pair_loss(L, c, eta, y, w, dl);
        if (grad)
            for (std::size_t q = 0; q < K; ++q) (*grad)[q] += dl * sc * th[q];
    };
    if (L.zero_terms) {
        std::size_t p = 0;
        for (Index u = 0; u < m.n_users(); ++u) {
            if (p < obs.size() && obs[p].index == u) {
                term(u, true, obs[p].y, obs[p].w);
                ++p;
            } else {
                term(u, false, 0.0, 1.0);
            }
        }
    } else {
        for (const auto& t : obs) term(t.index, true, t.y, t.w);
    }
    double pf = 1.0 / (c.prior_std_factors * c.prior_std_factors);
    for (std::size_t q = 0; q < K; ++q) {
        val += 0.5 * x[q] * x[q] * pf;
        if (grad) (*grad)[q] += x[q] * pf;
    }
    return val;
}

struct PoissonSteps {
    std::vector<double> user, item;
    double intercept;
};

void poisson_sweep(OutcomeModel& m, const OutcomeData& d, const Layout& L, PoissonSteps& steps) {
    constexpr std::size_t kInner = 3;
    for (Index u = 0; u < m.n_users(); ++u) {
        auto obs = user_terms(d, u);
        auto pi = user_pi(L, d.sub, u);
        std::vector<double> x(m.theta.row(u).begin(), m.theta.row(u).end());
        if (L.g) x.push_back(m.gamma[u]);
        descend(x, [&](std::span<const double> v, std::vector<double>* g) {
            return user_block_value(m, d.sub, L, pi, obs, v, g);
        }, steps.user[u], kInner);
        std::copy(x.begin(), x.begin() + L.K, m.theta.row(u).begin());
        if (L.g) m.gamma[u] = x[L.K];
    }
    for (Index i = 0; i < m.n_items(); ++i) {
        auto obs = item_terms(d, i);
        std::vector<double> x(m.beta.row(i).begin(), m.beta.row(i).end());
        descend(x, [&](std::span<const double> v, std::vector<double>* g) {
            return item_block_value(m, d, L, i, obs, v, g);
        }, steps.item[i], kInner);
        std::copy(x.begin(), x.end(), m.beta.row(i).begin());
    }
    if (L.h) {
        std::vector<double> x{m.intercept};
        descend(x, [&](std::span<const double> v, std::vector<double>* g) {
            double saved = m.intercept;
            m.intercept = v[0];
            double f = dense_objective(m, d, L);
            if (g) *g = {dense_gradient(m, d, L).intercept};
            m.intercept = saved;
            return f;
        }, steps.intercept, 1);
        m.intercept = x[0];
    }
}

} // namespace

OutcomeData make_outcome_data(const SparseInteractions& ratings, const SubstituteConfounder* sub,
                              std::span<const double> propensities, const OutcomeConfig& cfg) {
    cfg.validate();
    if (cfg.correction == Correction::deconfounded) {
        if (!sub) throw std::invalid_argument("deconfounded outcome model requires a substitute confounder");
        if (sub->user_means.rows() != ratings.n_users() || sub->item_means.rows() != ratings.n_items() ||
            sub->user_means.cols() != sub->item_means.cols())
            throw std::invalid_argument("substitute confounder dimensions do not match the ratings");
    }
    OutcomeData d;
    d.ratings = &ratings;
    d.sub = cfg.correction == Correction::deconfounded ? sub : nullptr;
    d.weights.resize(ratings.nnz(), 1.0);
    if (cfg.variant == Variant::weighted)
        for (std::size_t k = 0; k < ratings.nnz(); ++k) d.weights[k] = 1.0 + cfg.alpha_weight * ratings.entries()[k].value;
    if (cfg.correction == Correction::ipw) {
        if (propensities.size() != ratings.nnz())
            throw std::invalid_argument("ipw outcome model requires one propensity per observed rating");
        // Inverse propensities normalized to mean one, so equal propensities
        // reproduce the uncorrected objective exactly.
        double mean_inv = 0.0;
        for (double p : propensities) {
            if (!(p > 0.0)) throw std::invalid_argument("propensity must be positive");
            mean_inv += 1.0 / p;
        }
        mean_inv /= static_cast<double>(std::max<std::size_t>(propensities.size(), 1));
        for (std::size_t k = 0; k < ratings.nnz(); ++k) d.weights[k] *= (1.0 / propensities[k]) / mean_inv;
    }
    return d;
}

double outcome_objective(const OutcomeModel& model, const OutcomeData& data) {
    auto L = layout_of(model.cfg, data.sub);
    return L.gaussian ? gaussian_objective(model, data, L) : dense_objective(model, data, L);
}

OutcomeGradient outcome_gradient(const OutcomeModel& model, const OutcomeData& data) {
    auto L = layout_of(model.cfg, data.sub);
    return L.gaussian ? gaussian_gradient(model, data, L) : dense_gradient(model, data, L);
}

OutcomeModel init_outcome(const OutcomeData& data, const OutcomeConfig& cfg) {
    const auto& R = *data.ratings;
    OutcomeModel m;
    m.cfg = cfg;
    m.theta = Matrix(R.n_users(), cfg.K);
    m.beta = Matrix(R.n_items(), cfg.K);
    m.gamma.assign(R.n_users(), 0.0);
    Rng rng(mix_seed(cfg.seed, 0x0c0e));
    if (cfg.variant == Variant::poisson) {
        // Positive start so every initial rate sits above the floor.
        double total = 0.0;
        for (const auto& e : R.entries()) total += e.value;
        auto L = layout_of(cfg, data.sub);
        double cells = L.zero_terms ? static_cast<double>(R.n_users() * R.n_items()) : static_cast<double>(R.nnz());
        double mean = cells > 0 ? std::max(total / cells, 1e-3) : 1.0;
        double scale = std::sqrt(mean / static_cast<double>(cfg.K));
        for (double& v : m.theta.data()) v = scale * (0.5 + uniform01(rng));
        for (double& v : m.beta.data()) v = scale * (0.5 + uniform01(rng));
    } else {
        std::normal_distribution<double> normal(0.0, cfg.init_scale);
        for (double& v : m.theta.data()) v = normal(rng);
        for (double& v : m.beta.data()) v = normal(rng);
    }
    return m;
}

OutcomeModel fit_outcome(const SparseInteractions& ratings, const SubstituteConfounder* sub,
                         std::span<const double> propensities, const OutcomeConfig& cfg) {
    auto data = make_outcome_data(ratings, sub, propensities, cfg);
    auto L = layout_of(cfg, data.sub);
    auto m = init_outcome(data, cfg);
    m.rating_terms_per_user.assign(ratings.n_users(), 0);
    for (const auto& e : ratings.entries()) ++m.rating_terms_per_user[e.user];

    PoissonSteps steps{std::vector<double>(ratings.n_users(), cfg.learning_rate),
                       std::vector<double>(ratings.n_items(), cfg.learning_rate), cfg.learning_rate};
    m.objective_trace.push_back(outcome_objective(m, data));
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        if (L.gaussian) {
            gaussian_user_sweep(m, data, L);
            gaussian_item_sweep(m, data, L);
            if (L.h) gaussian_intercept_update(m, data, L);
        } else {
            poisson_sweep(m, data, L, steps);
        }
        double obj = outcome_objective(m, data);
        if (!std::isfinite(obj))
            throw std::runtime_error("fit_outcome: objective diverged at epoch " + std::to_string(epoch));
        double prev = m.objective_trace.back();
        m.objective_trace.push_back(obj);
        if (std::abs(prev - obj) < cfg.tol * std::max(std::abs(prev), 1e-300)) break;
    }
    return m;
}

double predict_existing(const OutcomeModel& model, const SubstituteConfounder* sub, Index u, Index i) {
    if (u >= model.n_users() || i >= model.n_items()) throw std::out_of_range("predict_existing: index out of range");
    const auto& cfg = model.cfg;
    double eta = mean_fn(cfg.variant, dot(model.theta.row(u), model.beta.row(i)), 1);
    if (cfg.correction == Correction::deconfounded) {
        if (!sub) throw std::invalid_argument("predict_existing: deconfounded model requires the substitute confounder");
        eta += model.gamma[u] * substitute_value(*sub, u, i);
        if (cfg.use_intercept) eta += model.intercept;
    }
    if (cfg.variant == Variant::poisson) {
        double d;
        return poisson_rate(cfg.poisson_link, eta, d);
    }
    return eta;
}

NewUserPrediction predict_new_user(const OutcomeModel& model, const PFPosterior* pf, const NewUserRequest& req,
                                   const OutcomeConfig& cfg_in) {
    // Item-side structure comes from the fitted model; fitting knobs from cfg.
    OutcomeConfig cfg = model.cfg;
    cfg.max_epochs = cfg_in.max_epochs;
    cfg.tol = cfg_in.tol;
    cfg.learning_rate = cfg_in.learning_rate;
    const bool deconf = cfg.correction == Correction::deconfounded;
    if (deconf && !pf) throw std::invalid_argument("predict_new_user: deconfounded model requires the PF posterior");
    for (Index i : req.items)
        if (i >= model.n_items()) throw std::out_of_range("predict_new_user: item index out of range");

    NewUserPrediction out;
    SubstituteConfounder sub;
    if (deconf) {
        sub = compute_substitute(*pf);
        out.confounder = fold_in_user(*pf, req.exposures, pf->config);
    }
    auto L = layout_of(cfg, deconf ? &sub : nullptr);

    std::vector<ObservedTerm> obs;
    for (std::size_t k = 0; k < req.ratings.size(); ++k) {
        const auto& [i, y] = req.ratings[k];
        if (i >= model.n_items()) throw std::out_of_range("predict_new_user: rated item out of range");
        double w = cfg.variant == Variant::weighted ? 1.0 + cfg.alpha_weight * y : 1.0;
        if (cfg.correction == Correction::ipw) {
            if (req.propensities.size() != req.ratings.size())
                throw std::invalid_argument("predict_new_user: ipw requires one propensity per rating");
            if (!(req.propensities[k] > 0)) throw std::invalid_argument("propensity must be positive");
            w /= req.propensities[k];
        }
        obs.push_back({i, y, w});
    }
    std::sort(obs.begin(), obs.end(), [](const ObservedTerm& a, const ObservedTerm& b) { return a.index < b.index; });
    if (cfg.correction == Correction::ipw && !obs.empty()) {
        double mean_inv = 0.0;
        for (std::size_t k = 0; k < obs.size(); ++k) mean_inv += 1.0 / req.propensities[k];
        mean_inv /= static_cast<double>(obs.size());
        for (auto& t : obs) t.w /= mean_inv;
    }

    std::span<const double> pi = out.confounder;
    std::vector<double> x(cfg.K + (L.g ? 1 : 0), 0.0);
    auto value = [&](std::span<const double> v, std::vector<double>* g) {
        return user_block_value(model, &sub, L, pi, obs, v, g);
    };
    out.objective_trace.push_back(value(x, nullptr));
    if (obs.empty()) {
        out.prior_only = true;
    } else if (L.gaussian) {
        auto G = L.zero_terms ? item_gram(model, &sub, L) : std::vector<double>{};
        x = solve_user_gaussian(model, &sub, L, pi, obs, G);
        out.objective_trace.push_back(value(x, nullptr));
    } else {
        // Positive start keeps Poisson rates off the floor.
        for (std::size_t q = 0; q < cfg.K; ++q) x[q] = cfg.init_scale;
        out.objective_trace.back() = value(x, nullptr);
        double step = cfg.learning_rate;
        for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
            double prev = out.objective_trace.back();
            double f = descend(x, value, step, 1);
            out.objective_trace.push_back(f);
            if (std::abs(prev - f) < cfg.tol * std::max(std::abs(prev), 1e-300)) break;
        }
    }
    out.theta.assign(x.begin(), x.begin() + cfg.K);
    out.gamma = L.g ? x[cfg.K] : 0.0;

    out.values.reserve(req.items.size());
    for (Index i : req.items) {
        double eta = mean_fn(cfg.variant, dot(out.theta, model.beta.row(i)), 1);
        if (deconf) {
            eta += out.gamma * dot(out.confounder, sub.item_means.row(i));
            if (cfg.use_intercept) eta += model.intercept;
        }
        if (cfg.variant == Variant::poisson) {
            double d;
            eta = poisson_rate(cfg.poisson_link, eta, d);
        }
        out.values.push_back(eta);
    }
    return out;
}

std::vector<Index> rank_items(const std::map<Index, double>& predictions, std::span<const Index> candidates) {
    if (candidates.empty()) throw std::invalid_argument("rank_items: no candidates");
    std::vector<std::pair<double, Index>> scored;
    scored.reserve(candidates.size());
    for (Index i : candidates) {
        auto it = predictions.find(i);
        if (it == predictions.end()) throw std::invalid_argument("rank_items: no prediction for candidate " + std::to_string(i));
        scored.emplace_back(it->second, i);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<Index> out;
    out.reserve(scored.size());
    for (const auto& [s, i] : scored) out.push_back(i);
    return out;
}

void write_model(const OutcomeModel& m, std::ostream& out) {
    const auto& c = m.cfg;
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    out << "# outcome-model\n";
    out << "# variant=" << to_string(c.variant) << '\n';
    out << "# correction=" << to_string(c.correction) << '\n';
    out << "# K=" << c.K << '\n';
    out << "# n_users=" << m.n_users() << '\n';
    out << "# n_items=" << m.n_items() << '\n';
    out << "# prior_std_factors=" << num(c.prior_std_factors) << '\n';
    out << "# prior_std_gamma=" << num(c.prior_std_gamma) << '\n';
    out << "# prior_std_intercept=" << num(c.prior_std_intercept) << '\n';
    out << "# sigma2=" << num(c.sigma2) << '\n';
    out << "# alpha_weight=" << num(c.alpha_weight) << '\n';
    out << "# use_intercept=" << (c.use_intercept ? 1 : 0) << '\n';
    out << "# poisson_link=" << to_string(c.poisson_link) << '\n';
    out << "# seed=" << c.seed << '\n';
    for (std::size_t u = 0; u < m.n_users(); ++u)
        for (std::size_t k = 0; k < c.K; ++k) out << "theta " << u << ' ' << k << ' ' << num(m.theta(u, k)) << '\n';
    for (std::size_t i = 0; i < m.n_items(); ++i)
        for (std::size_t k = 0; k < c.K; ++k) out << "beta " << i << ' ' << k << ' ' << num(m.beta(i, k)) << '\n';
    for (std::size_t u = 0; u < m.n_users(); ++u) out << "gamma " << u << ' ' << num(m.gamma[u]) << '\n';
    out << "intercept " << num(m.intercept) << '\n';
}

OutcomeModel read_model(std::istream& in) {
    OutcomeModel m;
    auto& c = m.cfg;
    std::size_t U = 0, I = 0;
    bool allocated = false;
    auto allocate = [&] {
        if (allocated) return;
        m.theta = Matrix(U, c.K);
        m.beta = Matrix(I, c.K);
        m.gamma.assign(U, 0.0);
        allocated = true;
    };
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            std::string key = line.substr(2, eq - 2), val = line.substr(eq + 1);
            if (key == "variant") c.variant = parse_variant(val);
            else if (key == "correction") c.correction = parse_correction(val);
            else if (key == "K") c.K = std::stoul(val);
            else if (key == "n_users") U = std::stoul(val);
            else if (key == "n_items") I = std::stoul(val);
            else if (key == "prior_std_factors") c.prior_std_factors = std::stod(val);
            else if (key == "prior_std_gamma") c.prior_std_gamma = std::stod(val);
            else if (key == "prior_std_intercept") c.prior_std_intercept = std::stod(val);
            else if (key == "sigma2") c.sigma2 = std::stod(val);
            else if (key == "alpha_weight") c.alpha_weight = std::stod(val);
            else if (key == "use_intercept") c.use_intercept = val == "1";
            else if (key == "poisson_link") c.poisson_link = parse_poisson_link(val);
            else if (key == "seed") c.seed = std::stoull(val);
            continue;
        }
        allocate();
        std::istringstream ss(line);
        std::string table;
        ss >> table;
        if (table == "theta" || table == "beta") {
            std::size_t r, k;
            std::string v;
            ss >> r >> k >> v;
            Matrix& M = table == "theta" ? m.theta : m.beta;
            if (r >= M.rows() || k >= c.K) throw std::runtime_error("read_model: index out of range");
            M(r, k) = std::stod(v);
        } else if (table == "gamma") {
            std::size_t u;
            std::string v;
            ss >> u >> v;
            if (u >= U) throw std::runtime_error("read_model: index out of range");
            m.gamma[u] = std::stod(v);
        } else if (table == "intercept") {
            std::string v;
            ss >> v;
            m.intercept = std::stod(v);
        } else {
            throw std::runtime_error("read_model: unknown table '" + table + "'");
        }
    }
    allocate();
    return m;
}

} // namespace dcf
