#pragma once

#include "dcf/data.hpp"
#include "dcf/metrics.hpp"
#include "dcf/outcome.hpp"
#include "dcf/pf.hpp"
#include "dcf/simulation.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace dcf {

struct MethodSpec {
    Variant variant = Variant::probabilistic;
    Correction correction = Correction::none;
    bool oracle = false; // simulation only: predicts the true potential outcomes

    std::string name() const; // "probabilistic_deconfounded", "oracle", ...
    bool operator==(const MethodSpec&) const = default;
};

// Accepts "<variant>_<correction>" or "oracle".
MethodSpec parse_method(const std::string& name);
std::vector<MethodSpec> all_methods(); // 3 variants x 3 corrections

enum class DataSource { file, simulation };
enum class Generalization { weak, strong };

struct ExperimentConfig {
    DataSource source = DataSource::simulation;
    std::string train_path;
    std::string test_path; // optional randomized test set
    LoadOptions load;
    SimConfig sim;
    std::size_t sim_test_items = 10; // random unexposed items per user

    SplitSpec split;
    Generalization generalization = Generalization::weak;

    std::vector<MethodSpec> methods = all_methods();
    std::vector<std::size_t> k_grid{5, 10, 20};
    std::vector<double> prior_std_grid{1.0, 0.1};
    std::vector<std::size_t> pf_k_grid{10, 50};

    OutcomeConfig outcome; // variant, correction, K and prior std are overridden per grid point
    PFConfig pf;           // K is overridden per grid point
    double ipw_alpha = 0.25;
    double ipw_target_mean = 0.05;

    Gain gain = Gain::exp_minus_one;
    std::size_t recall_k = 5;
    double relevance_threshold = 3.0;
    bool clip_predictions = false;

    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::string output_dir = "out";

    // Throws std::invalid_argument: empty method list or grids, oracle without simulation, ...
    void validate() const;
};

// Canonical "key=value" listing of every setting, in a fixed order.
std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg);
// FNV-1a of the canonical listing.
std::uint64_t config_hash(const ExperimentConfig& cfg);

struct GridScore {
    std::string method;
    std::size_t K = 0;
    double prior_std = 0.0;
    std::size_t pf_K = 0; // 0 when the method uses no exposure model
    double validation_ndcg = 0.0;
    bool ok = true;
    std::string error;
};

struct ResultRow {
    std::string method;
    bool ok = true;
    std::string error;
    double ndcg = 0.0, recall = 0.0, mse = 0.0, mae = 0.0, item_mse = 0.0, item_mae = 0.0;
    std::size_t K = 0;
    double prior_std = 0.0;
    std::size_t pf_K = 0;
    double validation_ndcg = 0.0;
    std::size_t test_pairs = 0;

    bool operator==(const ResultRow&) const = default;
};

struct PredictionDump {
    std::string method;
    std::vector<ExternalId> user_ids, item_ids;
    std::vector<double> ratings, predictions;
};

struct ResultsTable {
    std::vector<ResultRow> rows; // config method order
    std::vector<GridScore> grid; // every evaluated grid point
    std::vector<PredictionDump> predictions;
    std::uint64_t config_hash = 0;
    std::vector<std::pair<std::string, std::string>> config;
    std::vector<std::string> warnings;
    double wall_seconds = 0.0;
    // Observed ratings of held-out users that entered any outcome objective
    // (strong generalization); zero by construction.
    std::size_t heldout_training_terms = 0;

    bool all_ok() const;
};

ResultsTable run_experiment(const ExperimentConfig& cfg);

// results.csv, grid_scores.csv, predictions_<method>.csv and manifest.json.
// Files are written under temporary names and renamed; on failure every file
// this call created is removed before the exception propagates.
std::vector<std::filesystem::path> emit_outputs(const ResultsTable& table, const std::filesystem::path& dir);

std::vector<ResultRow> read_results_csv(const std::filesystem::path& path);

} // namespace dcf
