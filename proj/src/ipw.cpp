#include "dcf/ipw.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <stdexcept>

namespace dcf {

double PropensityModel::propensity(double y) const noexcept {
    double p = k * std::pow(alpha, std::max(0.0, pivot - y));
    return std::clamp(p, floor, 1.0);
}

PropensityModel fit_propensity(const SparseInteractions& train, std::size_t n_users, std::size_t n_items,
                               double alpha, double target_mean) {
    if (train.empty()) throw std::invalid_argument("fit_propensity: no ratings");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("fit_propensity: alpha must be in (0, 1]");
    if (!(target_mean > 0.0 && target_mean <= 1.0)) throw std::invalid_argument("fit_propensity: target_mean must be in (0, 1]");
    if (n_users * n_items < train.nnz()) throw std::invalid_argument("fit_propensity: grid smaller than the rating count");

    PropensityModel m;
    m.alpha = alpha;
    m.target_mean = target_mean;
    // Every cell, observed or imputed, has the observed rating distribution,
    // so the grid mean of the unclamped propensities is k * E[alpha^max(0, 4 - y)].
    double e = 0.0;
    for (const auto& en : train.entries()) e += std::pow(alpha, std::max(0.0, m.pivot - en.value));
    e /= static_cast<double>(train.nnz());
    m.k = target_mean / e;
    if (m.k > 1.0) {
        std::cerr << "warning: propensity scale k=" << m.k << " exceeds 1; clamped\n";
        m.k = 1.0;
        m.clamped_k = true;
    }
    double g = 0.0;
    for (const auto& en : train.entries()) g += m.propensity(en.value);
    m.grid_mean = g / static_cast<double>(train.nnz());
    return m;
}

std::vector<double> propensities(const PropensityModel& model, std::span<const Entry> entries) {
    std::vector<double> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(model.propensity(e.value));
    return out;
}

std::vector<double> ipw_weights(const PropensityModel& model, std::span<const Entry> entries) {
    auto out = propensities(model, entries);
    for (double& p : out) p = 1.0 / p;
    return out;
}

void write_propensities(const PropensityModel& model, const SparseInteractions& train, std::ostream& out) {
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    out << "# k=" << num(model.k) << '\n';
    out << "# alpha=" << num(model.alpha) << '\n';
    out << "# target_mean=" << num(model.target_mean) << '\n';
    out << "u,i,p\n";
    for (const auto& e : train.entries())
        out << train.user_id(e.user) << ',' << train.item_id(e.item) << ',' << num(model.propensity(e.value)) << '\n';
}

} // namespace dcf
