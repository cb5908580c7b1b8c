#pragma once

#include "dcf/sparse.hpp"

#include <iosfwd>
#include <span>
#include <vector>

namespace dcf {

// p(y) = k * alpha^max(0, pivot - y), clamped to [floor, 1].
struct PropensityModel {
    double k = 0.0;
    double alpha = 0.25;
    double target_mean = 0.05;
    double pivot = 4.0;
    double floor = 1e-4;
    // Mean propensity over the U x I grid, with unobserved cells imputed from
    // the observed rating distribution.
    double grid_mean = 0.0;
    bool clamped_k = false;

    double propensity(double y) const noexcept;
};

// Throws std::invalid_argument on empty ratings or alpha outside (0, 1].
PropensityModel fit_propensity(const SparseInteractions& train, std::size_t n_users, std::size_t n_items,
                               double alpha = 0.25, double target_mean = 0.05);

// 1 / p for each entry's rating.
std::vector<double> ipw_weights(const PropensityModel& model, std::span<const Entry> entries);
std::vector<double> propensities(const PropensityModel& model, std::span<const Entry> entries);

// Header with k, alpha, target_mean, then "u,i,p" rows for observed entries.
void write_propensities(const PropensityModel& model, const SparseInteractions& train, std::ostream& out);

} // namespace dcf
