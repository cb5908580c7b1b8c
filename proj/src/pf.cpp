#include "dcf/pf.hpp"

#include "dcf/random.hpp"

#include <boost/math/special_functions/digamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dcf {

namespace {

constexpr std::uint64_t kUserSide = 0x75736572;
constexpr std::uint64_t kItemSide = 0x6974656d;

double digamma(double x) { return boost::math::digamma(x); }

// E_q[log Gamma(x; a0, b0)] - E_q[log Gamma(x; a, b)] for q = Gamma(a, b).
double gamma_kl_term(double a0, double b0, double a, double b) {
    double elog = digamma(a) - std::log(b);
    double mean = a / b;
    double e_log_p = a0 * std::log(b0) - std::lgamma(a0) + (a0 - 1.0) * elog - b0 * mean;
    double e_log_q = a * std::log(b) - std::lgamma(a) + (a - 1.0) * elog - a;
    return e_log_p - e_log_q;
}

void init_side(Matrix& shape, Matrix& rate, double shape0, double rate0, const std::vector<ExternalId>& ids,
               std::uint64_t seed, std::uint64_t side, double jitter) {
    for (std::size_t r = 0; r < shape.rows(); ++r) {
        Rng rng(mix_seed(mix_seed(seed, side), static_cast<std::uint64_t>(ids[r])));
        for (std::size_t k = 0; k < shape.cols(); ++k) {
            shape(r, k) = shape0 + jitter * uniform01(rng);
            rate(r, k) = rate0 + jitter * uniform01(rng);
        }
    }
}

struct Expectations {
    Matrix mean, elog;
    std::vector<double> col_sum; // sum over rows of E[x_k]
};

Expectations expectations(const Matrix& shape, const Matrix& rate) {
    Expectations e{Matrix(shape.rows(), shape.cols()), Matrix(shape.rows(), shape.cols()),
                   std::vector<double>(shape.cols(), 0.0)};
    for (std::size_t r = 0; r < shape.rows(); ++r) {
        for (std::size_t k = 0; k < shape.cols(); ++k) {
            e.mean(r, k) = shape(r, k) / rate(r, k);
            e.elog(r, k) = digamma(shape(r, k)) - std::log(rate(r, k));
            e.col_sum[k] += e.mean(r, k);
        }
    }
    return e;
}

// Computes the optimal allocations for every nonzero, accumulating
// sum_i a_ui phi_uik and sum_u a_ui phi_uik; returns the data part of the ELBO
// that depends on the allocations: sum a_ui logsumexp_k(...) - log a_ui!.
double allocate(const SparseInteractions& x, const Expectations& users, const Expectations& items, Matrix& user_acc,
                Matrix& item_acc) {
    const std::size_t K = users.mean.cols();
    // exp(E[log x]) per row, shifted by the row maximum; the allocation of an
    // entry is the normalized product of its user and item rows.
    auto geometric = [K](const Matrix& elog, Matrix& g, std::vector<double>& shift) {
        g = Matrix(elog.rows(), K);
        shift.assign(elog.rows(), 0.0);
        for (std::size_t r = 0; r < elog.rows(); ++r) {
            auto row = elog.row(r);
            double m = *std::max_element(row.begin(), row.end());
            shift[r] = m;
            for (std::size_t k = 0; k < K; ++k) g(r, k) = std::exp(row[k] - m);
        }
    };
    Matrix gu, gi;
    std::vector<double> su, si;
    geometric(users.elog, gu, su);
    geometric(items.elog, gi, si);
    std::vector<double> s(K);
    double total = 0.0;
    for (const auto& e : x.entries()) {
        auto pu = gu.row(e.user);
        auto pi = gi.row(e.item);
        double z = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            s[k] = pu[k] * pi[k];
            z += s[k];
        }
        total += e.value * (su[e.user] + si[e.item] + std::log(z));
        if (e.value != 1.0) total -= std::lgamma(e.value + 1.0);
        double scale = e.value / z;
        auto ua = user_acc.row(e.user);
        auto ia = item_acc.row(e.item);
        for (std::size_t k = 0; k < K; ++k) {
            double w = scale * s[k];
            ua[k] += w;
            ia[k] += w;
        }
    }
    return total;
}

double prior_terms(const Matrix& shape, const Matrix& rate, double a0, double b0) {
    double t = 0.0;
    for (std::size_t r = 0; r < shape.rows(); ++r)
        for (std::size_t k = 0; k < shape.cols(); ++k) t += gamma_kl_term(a0, b0, shape(r, k), rate(r, k));
    return t;
}

double rate_terms(const Expectations& users, const Expectations& items) {
    double t = 0.0;
    for (std::size_t k = 0; k < users.col_sum.size(); ++k) t += users.col_sum[k] * items.col_sum[k];
    return t;
}

void check_exposures(const SparseInteractions& x) {
    for (const auto& e : x.entries()) {
        if (e.value < 0.0 || e.value != std::floor(e.value) || !std::isfinite(e.value))
            throw std::invalid_argument("fit_pf: exposure value " + std::to_string(e.value) + " at (user " +
                                        std::to_string(x.user_id(e.user)) + ", item " +
                                        std::to_string(x.item_id(e.item)) + ") is not a nonnegative integer");
    }
}

} // namespace

void PFConfig::validate() const {
    if (K < 1) throw std::invalid_argument("PFConfig: K must be >= 1");
    if (!(user_shape_prior > 0 && user_rate_prior > 0 && item_shape_prior > 0 && item_rate_prior > 0))
        throw std::invalid_argument("PFConfig: Gamma prior parameters must be positive");
    if (!(tol > 0)) throw std::invalid_argument("PFConfig: tol must be positive");
    if (init_jitter < 0) throw std::invalid_argument("PFConfig: init_jitter must be nonnegative");
}

double pf_elbo(const SparseInteractions& x, const PFPosterior& post) {
    const auto& cfg = post.config;
    auto users = expectations(post.user_shape, post.user_rate);
    auto items = expectations(post.item_shape, post.item_rate);
    Matrix ua(post.n_users(), post.K()), ia(post.n_items(), post.K());
    return allocate(x, users, items, ua, ia) - rate_terms(users, items) +
           prior_terms(post.user_shape, post.user_rate, cfg.user_shape_prior, cfg.user_rate_prior) +
           prior_terms(post.item_shape, post.item_rate, cfg.item_shape_prior, cfg.item_rate_prior);
}

PFPosterior fit_pf(const SparseInteractions& x, const PFConfig& cfg) {
    cfg.validate();
    if (x.n_users() < 1 || x.n_items() < 1) throw std::invalid_argument("fit_pf: need at least one user and item");
    check_exposures(x);

    const std::size_t U = x.n_users(), I = x.n_items(), K = cfg.K;
    PFPosterior post{Matrix(U, K), Matrix(U, K), Matrix(I, K), Matrix(I, K), {}, cfg};
    init_side(post.user_shape, post.user_rate, cfg.user_shape_prior, cfg.user_rate_prior, x.user_ids(), cfg.seed,
              kUserSide, cfg.init_jitter);
    init_side(post.item_shape, post.item_rate, cfg.item_shape_prior, cfg.item_rate_prior, x.item_ids(), cfg.seed,
              kItemSide, cfg.init_jitter);

    // One sweep: optimal allocations, then users, then items. Each step is an
    // exact coordinate update, so the recorded ELBO never decreases.
    for (std::size_t iter = 0;; ++iter) {
        auto users = expectations(post.user_shape, post.user_rate);
        auto items = expectations(post.item_shape, post.item_rate);
        Matrix user_acc(U, K), item_acc(I, K);
        double elbo = allocate(x, users, items, user_acc, item_acc) - rate_terms(users, items) +
                      prior_terms(post.user_shape, post.user_rate, cfg.user_shape_prior, cfg.user_rate_prior) +
                      prior_terms(post.item_shape, post.item_rate, cfg.item_shape_prior, cfg.item_rate_prior);
        if (!std::isfinite(elbo)) throw std::runtime_error("fit_pf: ELBO is not finite at iteration " + std::to_string(iter));
        post.elbo_trace.push_back(elbo);

        if (post.elbo_trace.size() >= 2) {
            double prev = post.elbo_trace[post.elbo_trace.size() - 2];
            if (std::abs(elbo - prev) < cfg.tol * std::abs(prev)) break;
        }
        if (iter >= cfg.max_iters) break;

        for (std::size_t u = 0; u < U; ++u)
            for (std::size_t k = 0; k < K; ++k) {
                post.user_shape(u, k) = cfg.user_shape_prior + user_acc(u, k);
                post.user_rate(u, k) = cfg.user_rate_prior + items.col_sum[k];
            }
        std::vector<double> user_sum(K, 0.0);
        for (std::size_t u = 0; u < U; ++u)
            for (std::size_t k = 0; k < K; ++k) user_sum[k] += post.user_shape(u, k) / post.user_rate(u, k);
        for (std::size_t i = 0; i < I; ++i)
            for (std::size_t k = 0; k < K; ++k) {
                post.item_shape(i, k) = cfg.item_shape_prior + item_acc(i, k);
                post.item_rate(i, k) = cfg.item_rate_prior + user_sum[k];
            }
    }
    return post;
}

SubstituteConfounder compute_substitute(const PFPosterior& post) {
    SubstituteConfounder sub{Matrix(post.n_users(), post.K()), Matrix(post.n_items(), post.K())};
    for (std::size_t u = 0; u < post.n_users(); ++u)
        for (std::size_t k = 0; k < post.K(); ++k) sub.user_means(u, k) = post.user_shape(u, k) / post.user_rate(u, k);
    for (std::size_t i = 0; i < post.n_items(); ++i)
        for (std::size_t k = 0; k < post.K(); ++k) sub.item_means(i, k) = post.item_shape(i, k) / post.item_rate(i, k);
    return sub;
}

double substitute_value(const SubstituteConfounder& sub, Index u, Index i) {
    if (u >= sub.user_means.rows() || i >= sub.item_means.rows())
        throw std::out_of_range("substitute_value: index out of range");
    return dot(sub.user_means.row(u), sub.item_means.row(i));
}

FoldInResult fold_in_user_posterior(const PFPosterior& post, std::span<const std::pair<Index, double>> exposures,
                                    const PFConfig& cfg) {
    cfg.validate();
    const std::size_t K = post.K();
    for (const auto& [i, a] : exposures) {
        if (i >= post.n_items()) throw std::out_of_range("fold_in_user: item index out of range");
        if (a < 0.0 || a != std::floor(a)) throw std::invalid_argument("fold_in_user: exposure is not a nonnegative integer");
    }
    auto items = expectations(post.item_shape, post.item_rate);

    FoldInResult r;
    r.shape.assign(K, cfg.user_shape_prior);
    r.rate.assign(K, cfg.user_rate_prior);
    Rng rng(mix_seed(cfg.seed, 0xf01d));
    for (std::size_t k = 0; k < K; ++k) {
        r.shape[k] += cfg.init_jitter * uniform01(rng);
        r.rate[k] += cfg.init_jitter * uniform01(rng);
    }

    std::vector<double> s(K), acc(K);
    for (std::size_t iter = 0;; ++iter) {
        std::vector<double> elog(K);
        double elbo = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            elog[k] = digamma(r.shape[k]) - std::log(r.rate[k]);
            elbo += gamma_kl_term(cfg.user_shape_prior, cfg.user_rate_prior, r.shape[k], r.rate[k]);
            elbo -= r.shape[k] / r.rate[k] * items.col_sum[k];
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        for (const auto& [i, a] : exposures) {
            if (a == 0.0) continue;
            auto li = items.elog.row(i);
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < K; ++k) {
                s[k] = elog[k] + li[k];
                m = std::max(m, s[k]);
            }
            double z = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                s[k] = std::exp(s[k] - m);
                z += s[k];
            }
            elbo += a * (m + std::log(z)) - std::lgamma(a + 1.0);
            for (std::size_t k = 0; k < K; ++k) acc[k] += a * s[k] / z;
        }
        r.elbo_trace.push_back(elbo);
        if (r.elbo_trace.size() >= 2) {
            double prev = r.elbo_trace[r.elbo_trace.size() - 2];
            if (std::abs(elbo - prev) < cfg.tol * std::abs(prev)) break;
        }
        if (iter >= cfg.max_iters) break;
        for (std::size_t k = 0; k < K; ++k) {
            r.shape[k] = cfg.user_shape_prior + acc[k];
            r.rate[k] = cfg.user_rate_prior + items.col_sum[k];
        }
    }
    r.means.resize(K);
    for (std::size_t k = 0; k < K; ++k) r.means[k] = r.shape[k] / r.rate[k];
    return r;
}

std::vector<double> fold_in_user(const PFPosterior& post, std::span<const std::pair<Index, double>> exposures,
                                 const PFConfig& cfg) {
    return fold_in_user_posterior(post, exposures, cfg).means;
}

void write_posterior(const PFPosterior& post, std::ostream& out) {
    const auto& c = post.config;
    char buf[128];
    out << "# pf-posterior\n";
    out << "# K=" << post.K() << '\n';
    out << "# n_users=" << post.n_users() << '\n';
    out << "# n_items=" << post.n_items() << '\n';
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g", c.user_shape_prior, c.user_rate_prior,
                  c.item_shape_prior, c.item_rate_prior);
    out << "# priors=" << buf << '\n';
    out << "# seed=" << c.seed << '\n';
    out << "# max_iters=" << c.max_iters << '\n';
    std::snprintf(buf, sizeof buf, "%.17g", c.tol);
    out << "# tol=" << buf << '\n';
    std::snprintf(buf, sizeof buf, "%.17g", c.init_jitter);
    out << "# init_jitter=" << buf << '\n';
    out << "# elbo=";
    for (std::size_t t = 0; t < post.elbo_trace.size(); ++t) {
        std::snprintf(buf, sizeof buf, "%.17g", post.elbo_trace[t]);
        out << (t ? "," : "") << buf;
    }
    out << "\nside,index,k,shape,rate\n";
    auto table = [&](const char* side, const Matrix& shape, const Matrix& rate) {
        for (std::size_t r = 0; r < shape.rows(); ++r)
            for (std::size_t k = 0; k < shape.cols(); ++k) {
                std::snprintf(buf, sizeof buf, "%.17g,%.17g", shape(r, k), rate(r, k));
                out << side << ',' << r << ',' << k << ',' << buf << '\n';
            }
    };
    table("user", post.user_shape, post.user_rate);
    table("item", post.item_shape, post.item_rate);
}

PFPosterior read_posterior(std::istream& in) {
    PFPosterior post;
    std::size_t K = 0, U = 0, I = 0;
    std::string line;
    bool header_done = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            std::string key = line.substr(2, eq - 2), val = line.substr(eq + 1);
            if (key == "K") K = std::stoul(val);
            else if (key == "n_users") U = std::stoul(val);
            else if (key == "n_items") I = std::stoul(val);
            else if (key == "seed") post.config.seed = std::stoull(val);
            else if (key == "max_iters") post.config.max_iters = std::stoul(val);
            else if (key == "tol") post.config.tol = std::stod(val);
            else if (key == "init_jitter") post.config.init_jitter = std::stod(val);
            else if (key == "priors") {
                std::istringstream ss(val);
                char comma;
                ss >> post.config.user_shape_prior >> comma >> post.config.user_rate_prior >> comma >>
                    post.config.item_shape_prior >> comma >> post.config.item_rate_prior;
            } else if (key == "elbo") {
                std::istringstream ss(val);
                std::string tok;
                while (std::getline(ss, tok, ','))
                    if (!tok.empty()) post.elbo_trace.push_back(std::stod(tok));
            }
            continue;
        }
        if (!header_done) {
            if (line != "side,index,k,shape,rate") throw std::runtime_error("read_posterior: bad table header");
            header_done = true;
            post.config.K = K;
            post.user_shape = Matrix(U, K);
            post.user_rate = Matrix(U, K);
            post.item_shape = Matrix(I, K);
            post.item_rate = Matrix(I, K);
            continue;
        }
        std::istringstream ss(line);
        std::string side, tok;
        std::getline(ss, side, ',');
        std::getline(ss, tok, ',');
        std::size_t r = std::stoul(tok);
        std::getline(ss, tok, ',');
        std::size_t k = std::stoul(tok);
        std::getline(ss, tok, ',');
        double shape = std::stod(tok);
        std::getline(ss, tok, ',');
        double rate = std::stod(tok);
        Matrix* sh = side == "user" ? &post.user_shape : &post.item_shape;
        Matrix* rt = side == "user" ? &post.user_rate : &post.item_rate;
        if (side != "user" && side != "item") throw std::runtime_error("read_posterior: unknown side " + side);
        if (r >= sh->rows() || k >= K) throw std::runtime_error("read_posterior: index out of range");
        (*sh)(r, k) = shape;
        (*rt)(r, k) = rate;
    }
    if (!header_done) throw std::runtime_error("read_posterior: missing table");
    return post;
}

} // namespace dcf
