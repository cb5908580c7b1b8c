#pragma once

#include "dcf/linalg.hpp"
#include "dcf/pf.hpp"
#include "dcf/sparse.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dcf {

enum class Variant { probabilistic, poisson, weighted };
enum class Correction { none, deconfounded, ipw };
// How the Poisson variant maps its linear predictor to a rate.
enum class PoissonLink { clamp, softplus };

std::string_view to_string(Variant v);
std::string_view to_string(Correction c);
std::string_view to_string(PoissonLink l);
Variant parse_variant(std::string_view s);
Correction parse_correction(std::string_view s);
PoissonLink parse_poisson_link(std::string_view s);

inline constexpr double kPoissonRateFloor = 1e-6;

struct OutcomeConfig {
    Variant variant = Variant::probabilistic;
    Correction correction = Correction::none;
    std::size_t K = 10;
    double prior_std_factors = 1.0;   // theta and beta
    double prior_std_gamma = 1.0;
    double prior_std_intercept = 1.0;
    double sigma2 = 1.0;              // Gaussian observation variance
    double alpha_weight = 40.0;       // weighted MF: c_ui = 1 + alpha * y_ui
    bool use_intercept = true;        // deconfounded only
    PoissonLink poisson_link = PoissonLink::clamp;
    double learning_rate = 0.01;      // initial step of the Poisson line search
    std::size_t max_epochs = 200;
    double tol = 1e-6;                // relative objective change
    std::uint64_t seed = 0;
    double init_scale = 0.1;

    void validate() const;
};

// Mean of y(a) before confounder/intercept terms.
//   probabilistic: a * dot; weighted: dot; poisson: dot.
double mean_fn(Variant variant, double dot, int exposure);

struct OutcomeModel {
    Matrix theta;               // U x K
    Matrix beta;                // I x K
    std::vector<double> gamma;  // U; zero unless deconfounded
    double intercept = 0.0;     // zero unless deconfounded with intercept
    OutcomeConfig cfg;
    std::vector<double> objective_trace; // negative log posterior per epoch
    // Observed ratings that entered the objective, per training row.
    std::vector<std::size_t> rating_terms_per_user;

    std::size_t n_users() const noexcept { return theta.rows(); }
    std::size_t n_items() const noexcept { return beta.rows(); }
};

// Training inputs resolved against a config: observed ratings (a_ui = 1 on
// the support), the substitute confounder when deconfounded, and the
// per-entry weights of observed terms.
struct OutcomeData {
    const SparseInteractions* ratings = nullptr;
    const SubstituteConfounder* sub = nullptr;
    std::vector<double> weights; // parallel to ratings->entries()
};

// Validates preconditions: sub required iff deconfounded (and dimensions
// must agree); propensities required iff ipw, one per entry, each > 0.
OutcomeData make_outcome_data(const SparseInteractions& ratings, const SubstituteConfounder* sub,
                              std::span<const double> propensities, const OutcomeConfig& cfg);

// Negative log posterior (up to additive constants) and its gradient.
double outcome_objective(const OutcomeModel& model, const OutcomeData& data);

struct OutcomeGradient {
    Matrix theta, beta;
    std::vector<double> gamma;
    double intercept = 0.0;
};
OutcomeGradient outcome_gradient(const OutcomeModel& model, const OutcomeData& data);

// Seeded initial parameters (what fit_outcome starts from).
OutcomeModel init_outcome(const OutcomeData& data, const OutcomeConfig& cfg);

// MAP fit. Throws std::invalid_argument on unmet preconditions and
// std::runtime_error naming the epoch if the objective diverges.
OutcomeModel fit_outcome(const SparseInteractions& ratings, const SubstituteConfounder* sub,
                         std::span<const double> propensities, const OutcomeConfig& cfg);

// m(theta_u . beta_i, 1) + gamma_u a_hat_ui + beta_0 (through the rate link for Poisson).
double predict_existing(const OutcomeModel& model, const SubstituteConfounder* sub, Index u, Index i);

struct NewUserRequest {
    std::vector<std::pair<Index, double>> exposures;
    std::vector<std::pair<Index, double>> ratings;
    std::vector<Index> items;          // items to predict
    std::vector<double> propensities;  // per rating; required for ipw
};

struct NewUserPrediction {
    std::vector<double> values;        // parallel to request.items
    bool prior_only = false;           // no ratings: parameters left at the prior mode
    std::vector<double> theta;
    double gamma = 0.0;
    std::vector<double> confounder;    // folded-in E[pi_u']
    std::vector<double> objective_trace;
};

// Folds in a user unseen during training: E[pi_u'] with item factors frozen,
// then theta_u', gamma_u' by MAP with item-side outcome parameters frozen.
NewUserPrediction predict_new_user(const OutcomeModel& model, const PFPosterior* pf, const NewUserRequest& req,
                                   const OutcomeConfig& cfg);

// Descending by prediction, ties by ascending item index.
std::vector<Index> rank_items(const std::map<Index, double>& predictions, std::span<const Index> candidates);

void write_model(const OutcomeModel& model, std::ostream& out);
OutcomeModel read_model(std::istream& in);

} // namespace dcf
