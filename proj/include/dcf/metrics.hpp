#pragma once

#include "dcf/sparse.hpp"

#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dcf {

// 2^rel - 1 (standard) or 2^(rel - 1) as typeset in some references.
enum class Gain { exp_minus_one, literal_paper };

struct ScoredItem {
    Index item = 0;
    double score = 0.0;  // prediction
    double rating = 0.0; // true rating
};

// One user's test items; order is irrelevant, ranking happens inside.
using UserList = std::vector<ScoredItem>;

// Descending score, ties by ascending item index.
std::vector<ScoredItem> ranked(UserList list);

double gain(double rel, Gain g);

// Per-user NDCG averaged over users. Users whose gains are all zero count as 1
// and are tallied in *flagged. Empty users are ignored.
double ndcg(std::span<const UserList> users, Gain g = Gain::exp_minus_one, std::size_t* flagged = nullptr);
double ndcg_user(const UserList& list, Gain g = Gain::exp_minus_one, bool* flagged = nullptr);

// Relevant = rating >= threshold. Users with no relevant items are skipped
// and tallied in *skipped. Returns 0 if every user is skipped.
double recall_at_k(std::span<const UserList> users, std::size_t k, double threshold = 3.0,
                   std::size_t* skipped = nullptr);

// Throws std::invalid_argument when empty. Pairs are (prediction, truth).
double mse(std::span<const std::pair<double, double>> pairs);
double mae(std::span<const std::pair<double, double>> pairs);

struct ItemAccuracy {
    double mse = 0.0;
    double mae = 0.0;
};

// Unweighted mean over items of each item's MSE / MAE. `predictions` is
// parallel to test.entries().
ItemAccuracy per_item_accuracy(const SparseInteractions& test, std::span<const double> predictions);

// Groups test entries and their predictions into per-user lists.
std::vector<UserList> user_lists(const SparseInteractions& test, std::span<const double> predictions);

struct MetricRow {
    std::string metric;
    std::string scope; // user, item or pooled
    double value = 0.0;
};

struct MetricsReport {
    std::vector<MetricRow> rows;
    std::size_t ndcg_flagged_users = 0;
    std::size_t recall_skipped_users = 0;

    double get(const std::string& metric, const std::string& scope) const;
};

MetricsReport evaluate(const SparseInteractions& test, std::span<const double> predictions,
                       Gain g = Gain::exp_minus_one, std::size_t k = 5, double threshold = 3.0);

// "metric,scope,value"
void write_metrics(const MetricsReport& report, std::ostream& out);

} // namespace dcf
