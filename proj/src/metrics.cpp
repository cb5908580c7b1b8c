#include "dcf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace dcf {

std::vector<ScoredItem> ranked(UserList list) {
    std::sort(list.begin(), list.end(), [](const ScoredItem& a, const ScoredItem& b) {
        return a.score != b.score ? a.score > b.score : a.item < b.item;
    });
    return list;
}

double gain(double rel, Gain g) {
    return g == Gain::exp_minus_one ? std::exp2(rel) - 1.0 : std::exp2(rel - 1.0);
}

double ndcg_user(const UserList& list, Gain g, bool* flagged) {
    if (flagged) *flagged = false;
    auto order = ranked(list);
    std::vector<double> gains;
    gains.reserve(list.size());
    double dcg = 0.0;
    for (std::size_t p = 0; p < order.size(); ++p) {
        double gn = gain(order[p].rating, g);
        gains.push_back(gn);
        dcg += gn / std::log2(static_cast<double>(p) + 2.0);
    }
    std::sort(gains.begin(), gains.end(), std::greater<>());
    double idcg = 0.0;
    for (std::size_t p = 0; p < gains.size(); ++p) idcg += gains[p] / std::log2(static_cast<double>(p) + 2.0);
    if (idcg <= 0.0) {
        if (flagged) *flagged = true;
        return 1.0;
    }
    return dcg / idcg;
}

double ndcg(std::span<const UserList> users, Gain g, std::size_t* flagged) {
    double total = 0.0;
    std::size_t n = 0, f = 0;
    for (const auto& u : users) {
        if (u.empty()) continue;
        bool fl;
        total += ndcg_user(u, g, &fl);
        f += fl;
        ++n;
    }
    if (flagged) *flagged = f;
    return n ? total / static_cast<double>(n) : 0.0;
}

double recall_at_k(std::span<const UserList> users, std::size_t k, double threshold, std::size_t* skipped) {
    if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
    double total = 0.0;
    std::size_t n = 0, s = 0;
    for (const auto& u : users) {
        std::size_t relevant = 0;
        for (const auto& it : u) relevant += it.rating >= threshold;
        if (relevant == 0) {
            ++s;
            continue;
        }
        auto order = ranked(u);
        std::size_t hits = 0;
        for (std::size_t p = 0; p < std::min(k, order.size()); ++p) hits += order[p].rating >= threshold;
        total += static_cast<double>(hits) / static_cast<double>(std::min(k, relevant));
        ++n;
    }
    if (skipped) *skipped = s;
    return n ? total / static_cast<double>(n) : 0.0;
}

double mse(std::span<const std::pair<double, double>> pairs) {
    if (pairs.empty()) throw std::invalid_argument("mse: no pairs");
    double s = 0.0;
    for (const auto& [p, y] : pairs) s += (p - y) * (p - y);
    return s / static_cast<double>(pairs.size());
}

double mae(std::span<const std::pair<double, double>> pairs) {
    if (pairs.empty()) throw std::invalid_argument("mae: no pairs");
    double s = 0.0;
    for (const auto& [p, y] : pairs) s += std::abs(p - y);
    return s / static_cast<double>(pairs.size());
}

ItemAccuracy per_item_accuracy(const SparseInteractions& test, std::span<const double> predictions) {
    if (predictions.size() != test.nnz()) throw std::invalid_argument("per_item_accuracy: prediction count mismatch");
    ItemAccuracy acc;
    std::size_t items = 0;
    for (Index i = 0; i < test.n_items(); ++i) {
        auto col = test.column(i);
        if (col.empty()) continue;
        double se = 0.0, ae = 0.0;
        for (std::size_t pos : col) {
            double r = predictions[pos] - test.entries()[pos].value;
            se += r * r;
            ae += std::abs(r);
        }
        acc.mse += se / static_cast<double>(col.size());
        acc.mae += ae / static_cast<double>(col.size());
        ++items;
    }
    if (items == 0) throw std::invalid_argument("per_item_accuracy: empty test set");
    acc.mse /= static_cast<double>(items);
    acc.mae /= static_cast<double>(items);
    return acc;
}

std::vector<UserList> user_lists(const SparseInteractions& test, std::span<const double> predictions) {
    if (predictions.size() != test.nnz()) throw std::invalid_argument("user_lists: prediction count mismatch");
    std::vector<UserList> out(test.n_users());
    for (std::size_t k = 0; k < test.nnz(); ++k) {
        const auto& e = test.entries()[k];
        out[e.user].push_back({e.item, predictions[k], e.value});
    }
    return out;
}

double MetricsReport::get(const std::string& metric, const std::string& scope) const {
    for (const auto& r : rows)
        if (r.metric == metric && r.scope == scope) return r.value;
    throw std::out_of_range("MetricsReport: no " + metric + "/" + scope);
}

MetricsReport evaluate(const SparseInteractions& test, std::span<const double> predictions, Gain g, std::size_t k,
                       double threshold) {
    MetricsReport rep;
    auto lists = user_lists(test, predictions);
    rep.rows.push_back({"ndcg", "user", ndcg(lists, g, &rep.ndcg_flagged_users)});
    rep.rows.push_back({"recall@" + std::to_string(k), "user", recall_at_k(lists, k, threshold, &rep.recall_skipped_users)});

    std::vector<std::pair<double, double>> pairs;
    pairs.reserve(test.nnz());
    for (std::size_t j = 0; j < test.nnz(); ++j) pairs.emplace_back(predictions[j], test.entries()[j].value);
    rep.rows.push_back({"mse", "pooled", mse(pairs)});
    rep.rows.push_back({"mae", "pooled", mae(pairs)});

    double umse = 0.0, umae = 0.0;
    std::size_t n = 0;
    for (const auto& u : lists) {
        if (u.empty()) continue;
        std::vector<std::pair<double, double>> up;
        for (const auto& it : u) up.emplace_back(it.score, it.rating);
        umse += mse(up);
        umae += mae(up);
        ++n;
    }
    rep.rows.push_back({"mse", "user", umse / static_cast<double>(n)});
    rep.rows.push_back({"mae", "user", umae / static_cast<double>(n)});
    auto item = per_item_accuracy(test, predictions);
    rep.rows.push_back({"mse", "item", item.mse});
    rep.rows.push_back({"mae", "item", item.mae});
    return rep;
}

void write_metrics(const MetricsReport& report, std::ostream& out) {
    out << "metric,scope,value\n";
    char buf[64];
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof buf, "%.17g", r.value);
        out << r.metric << ',' << r.scope << ',' << buf << '\n';
    }
}

} // namespace dcf
