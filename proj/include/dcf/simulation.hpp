#pragma once

#include "dcf/linalg.hpp"
#include "dcf/outcome.hpp"
#include "dcf/pf.hpp"
#include "dcf/random.hpp"
#include "dcf/sparse.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace dcf {

struct SimConfig {
    std::size_t U = 500;
    std::size_t I = 500;
    std::size_t K = 10;
    double gamma_theta = 0.5; // exposure-confounder correlation
    double gamma_y = 3.0;     // confounder effect on ratings
    double gamma_shape = 0.3;
    double gamma_rate = 0.3;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SimWorld {
    SimConfig cfg;
    Matrix c;     // U x K confounders
    Matrix beta;  // I x K
    Matrix theta; // U x K
    std::vector<std::uint8_t> exposures; // U*I, row-major, in {0,1}
    std::vector<std::uint8_t> potential; // U*I, row-major, y(1) in {1..5}
    SparseInteractions observed;         // y = a * y(1) on the exposure support

    std::uint8_t exposure(Index u, Index i) const { return exposures[std::size_t(u) * cfg.I + i]; }
    std::uint8_t rating(Index u, Index i) const { return potential[std::size_t(u) * cfg.I + i]; }
};

// c_u, beta_i ~ Gamma(shape, rate)^K; theta_u = g_theta c_u + (1 - g_theta) Gamma draw;
// a_ui = min(Poisson(c_u.beta_i), 1); y_ui(1) = min(1 + Poisson((theta_u + g_y c_u).beta_i), 5).
SimWorld generate(const SimConfig& cfg);

enum class SimLoss { mse, ndcg };

// Predictions are a dense U x I matrix. Per-user loss over all items,
// averaged over users.
double causal_error(const SimWorld& world, const Matrix& predictions, SimLoss loss);

// Same average restricted to a per-user item subset. Users with an empty
// subset are skipped (counted in *skipped).
double randomized_test_error(const SimWorld& world, const std::vector<std::vector<Index>>& subsets,
                             const Matrix& predictions, SimLoss loss, std::size_t* skipped = nullptr);

// `size` distinct items per user, uniformly at random (capped at n_items).
std::vector<std::vector<Index>> draw_subsets(std::size_t n_users, std::size_t n_items, std::size_t size, Rng& rng);

struct SweepMethod {
    std::string name;
    OutcomeConfig outcome;
    PFConfig pf;
    bool oracle = false; // predict the true potential outcomes
};

struct SweepPoint {
    double gamma_theta = 0.0;
    double gamma_y = 0.0;
};

struct SweepRecord {
    double gamma_theta, gamma_y;
    std::string method, metric;
    std::size_t run;
    double value;
};

struct SweepAggregate {
    double gamma_theta, gamma_y;
    std::string method, metric;
    double mean, stderr_;
    std::size_t n;
};

struct SweepFailure {
    double gamma_theta, gamma_y;
    std::string method;
    std::size_t run;
    std::string error;
};

struct SweepResult {
    std::vector<SweepRecord> records;       // grid, run, method, metric order
    std::vector<SweepAggregate> aggregates; // grid, method, metric order
    std::vector<SweepFailure> failures;
};

struct SweepOptions {
    std::size_t runs = 10;
    std::size_t threads = 1;
    double train_fraction = 0.8; // share of observed entries used for fitting
};

// World seed depends on the run index only, so grid points and methods are
// paired within a run.
SweepResult sweep(const SimConfig& base, std::span<const SweepPoint> grid, std::span<const SweepMethod> methods,
                  const SweepOptions& opts);

// Built-in method set: oracle, classical and deconfounded probabilistic MF,
// with the tighter of the two factor priors (std 0.1).
std::vector<SweepMethod> default_sweep_methods(std::size_t K = 10);

Matrix predict_all(const OutcomeModel& model, const SubstituteConfounder* sub);

void write_sweep_records(const SweepResult& result, std::ostream& out);
void write_sweep_aggregates(const SweepResult& result, std::ostream& out);

} // namespace dcf
