#pragma once

#include "dcf/linalg.hpp"
#include "dcf/sparse.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

namespace dcf {

// Gamma-Poisson factorization of the exposure matrix:
//   pi_u ~ Gamma(c1, c2), lambda_i ~ Gamma(c3, c4), a_ui ~ Poisson(pi_u . lambda_i)
// Gamma parameters are (shape, rate).
struct PFConfig {
    std::size_t K = 10;
    double user_shape_prior = 0.3; // c1
    double user_rate_prior = 0.3;  // c2
    double item_shape_prior = 0.3; // c3
    double item_rate_prior = 0.3;  // c4
    std::size_t max_iters = 300;
    double tol = 1e-5; // relative ELBO change
    std::uint64_t seed = 0;
    double init_jitter = 0.1;

    void validate() const;
};

// Mean-field posterior q(pi_uk) = Gamma(user_shape, user_rate), likewise for items.
struct PFPosterior {
    Matrix user_shape, user_rate;
    Matrix item_shape, item_rate;
    std::vector<double> elbo_trace;
    PFConfig config;

    std::size_t K() const noexcept { return user_shape.cols(); }
    std::size_t n_users() const noexcept { return user_shape.rows(); }
    std::size_t n_items() const noexcept { return item_shape.rows(); }
};

struct SubstituteConfounder {
    Matrix user_means; // E[pi_u]
    Matrix item_means; // E[lambda_i]
};

// Coordinate-ascent VI. Exposures must be nonnegative integers (binary or
// counts). The init jitter of each row is keyed on its external ID, so
// permuting rows (IDs included) permutes the posterior.
PFPosterior fit_pf(const SparseInteractions& exposures, const PFConfig& cfg);

// Evidence lower bound of the given state with the allocation variables at
// their optimum; this is the quantity recorded in elbo_trace.
double pf_elbo(const SparseInteractions& exposures, const PFPosterior& post);

SubstituteConfounder compute_substitute(const PFPosterior& post);

// a_hat_ui = E[pi_u]^T E[lambda_i]. Throws std::out_of_range on bad indices.
double substitute_value(const SubstituteConfounder& sub, Index u, Index i);

struct FoldInResult {
    std::vector<double> shape, rate, means;
    std::vector<double> elbo_trace; // terms of the new user only
};

// CAVI for one new user's Gamma factors with item factors frozen.
FoldInResult fold_in_user_posterior(const PFPosterior& post, std::span<const std::pair<Index, double>> exposures,
                                    const PFConfig& cfg);
std::vector<double> fold_in_user(const PFPosterior& post, std::span<const std::pair<Index, double>> exposures,
                                 const PFConfig& cfg);

// Text table "side,index,k,shape,rate" preceded by '#' header lines with K,
// priors, seed and the ELBO trace.
void write_posterior(const PFPosterior& post, std::ostream& out);
PFPosterior read_posterior(std::istream& in);

} // namespace dcf
