#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dcf/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace dcf;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(std::uint64_t seed = 1) {
    ExperimentConfig c;
    c.sim.U = 60;
    c.sim.I = 50;
    c.sim.seed = seed;
    c.sim.gamma_theta = 0.5;
    c.split.seed = seed;
    c.seed = seed;
    c.k_grid = {3};
    c.prior_std_grid = {1.0};
    c.pf_k_grid = {4};
    c.outcome.max_epochs = 15;
    c.pf.max_iters = 30;
    return c;
}

// Size of the randomized test set for the given users.
std::size_t expected_test_pairs(const ExperimentConfig& c, const std::vector<Index>& users) {
    auto w = generate(c.sim);
    std::size_t n = 0;
    for (Index u : users) {
        std::size_t unexposed = 0;
        for (Index i = 0; i < c.sim.I; ++i) unexposed += !w.exposure(u, i);
        n += std::min(c.sim_test_items, unexposed);
    }
    return n;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    auto d = fs::temp_directory_path() / ("dcf_test_experiment_" + name);
    fs::remove_all(d);
    return d;
}

} // namespace

TEST_CASE("method names") {
    CHECK(all_methods().size() == 9);
    for (const auto& m : all_methods()) CHECK(parse_method(m.name()) == m);
    CHECK(parse_method("oracle").oracle);
    CHECK(parse_method("weighted_ipw").name() == "weighted_ipw");
    CHECK_THROWS_AS(parse_method("weighted"), std::invalid_argument);
    CHECK_THROWS_AS(parse_method("weighted_foo"), std::invalid_argument);
}

TEST_CASE("config hash changes iff the config changes") {
    auto a = tiny();
    CHECK(config_hash(a) == config_hash(tiny()));
    auto b = a;
    b.threads = 4;
    b.output_dir = "elsewhere";
    CHECK(config_hash(a) == config_hash(b));

    std::vector<ExperimentConfig> variants;
    auto push = [&](auto&& edit) {
        auto c = a;
        edit(c);
        variants.push_back(c);
    };
    push([](ExperimentConfig& c) { c.seed = 2; });
    push([](ExperimentConfig& c) { c.sim.gamma_theta = 0.6; });
    push([](ExperimentConfig& c) { c.k_grid = {3, 5}; });
    push([](ExperimentConfig& c) { c.prior_std_grid = {0.1}; });
    push([](ExperimentConfig& c) { c.methods.pop_back(); });
    push([](ExperimentConfig& c) { c.outcome.alpha_weight = 10; });
    push([](ExperimentConfig& c) { c.gain = Gain::literal_paper; });
    push([](ExperimentConfig& c) { c.split.mode = SplitMode::train_val_test_60_20_20; });
    push([](ExperimentConfig& c) { c.generalization = Generalization::strong; });
    push([](ExperimentConfig& c) { c.train_path = "x.tsv"; });
    push([](ExperimentConfig& c) { c.pf.tol = 1e-4; });
    std::set<std::uint64_t> hashes{config_hash(a)};
    for (const auto& v : variants) hashes.insert(config_hash(v));
    CHECK(hashes.size() == variants.size() + 1);
}

TEST_CASE("invalid configs are rejected before anything runs") {
    auto c = tiny();
    c.methods.clear();
    CHECK_THROWS_AS(run_experiment(c), std::invalid_argument);
    c = tiny();
    c.k_grid.clear();
    CHECK_THROWS_AS(run_experiment(c), std::invalid_argument);
    c = tiny();
    c.source = DataSource::file;
    c.train_path = "r.tsv";
    c.methods = {parse_method("oracle")};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = tiny();
    c.generalization = Generalization::strong;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    auto dir = scratch("empty");
    ResultsTable t;
    CHECK_THROWS_AS(emit_outputs(t, dir), std::invalid_argument);
    CHECK_FALSE(fs::exists(dir / "results.csv"));
}

TEST_CASE("oracle predictions have zero error") {
    auto c = tiny();
    c.methods = {parse_method("oracle")};
    auto t = run_experiment(c);
    REQUIRE(t.rows.size() == 1);
    CHECK(t.rows[0].ok);
    CHECK(t.rows[0].mse == 0.0);
    CHECK(t.rows[0].mae == 0.0);
    CHECK(t.rows[0].item_mse == 0.0);
    CHECK(t.rows[0].ndcg == doctest::Approx(1.0));
    std::vector<Index> all(60);
    for (Index u = 0; u < 60; ++u) all[u] = u;
    CHECK(t.rows[0].test_pairs == expected_test_pairs(c, all));
}

TEST_CASE("single grid point echoes the config") {
    auto c = tiny();
    c.k_grid = {4};
    c.prior_std_grid = {0.1};
    c.pf_k_grid = {3};
    c.methods = {parse_method("probabilistic_none"), parse_method("probabilistic_deconfounded"),
                 parse_method("weighted_ipw")};
    auto t = run_experiment(c);
    REQUIRE(t.rows.size() == 3);
    CHECK(t.grid.size() == 3);
    for (const auto& r : t.rows) {
        CHECK(r.ok);
        CHECK(r.K == 4);
        CHECK(r.prior_std == 0.1);
        CHECK(r.pf_K == (r.method == "probabilistic_deconfounded" ? 3u : 0u));
        CHECK(std::isfinite(r.mse));
        CHECK(std::isfinite(r.ndcg));
    }
}

TEST_CASE("selected grid point dominates the others") {
    auto c = tiny(3);
    c.k_grid = {2, 4};
    c.prior_std_grid = {1.0, 0.1};
    c.pf_k_grid = {3, 5};
    c.methods = {parse_method("probabilistic_deconfounded"), parse_method("poisson_none")};
    auto t = run_experiment(c);
    CHECK(t.grid.size() == 8 + 4);
    for (const auto& r : t.rows) {
        REQUIRE(r.ok);
        for (const auto& g : t.grid)
            if (g.method == r.method && g.ok) CHECK(r.validation_ndcg >= g.validation_ndcg);
    }
}

TEST_CASE("all nine methods run on a regular split") {
    auto c = tiny(4);
    c.split.mode = SplitMode::train_val_test_60_20_20;
    auto t = run_experiment(c);
    REQUIRE(t.rows.size() == 9);
    CHECK(t.all_ok());
    for (std::size_t k = 0; k < 9; ++k) CHECK(t.rows[k].method == all_methods()[k].name());
    CHECK(t.predictions.size() == 9);
}

TEST_CASE("outputs round trip and reproduce byte for byte") {
    auto c = tiny(5);
    c.methods = {parse_method("oracle"), parse_method("probabilistic_none"), parse_method("weighted_deconfounded")};
    auto a = scratch("a"), b = scratch("b");
    auto ta = run_experiment(c);
    auto files = emit_outputs(ta, a);
    CHECK(files.size() == 2 + 3 + 1);
    for (const auto& f : files) CHECK(fs::exists(f));
    for (const auto& e : fs::directory_iterator(a)) CHECK(e.path().extension() != ".tmp");
    CHECK(read_results_csv(a / "results.csv") == ta.rows);

    c.threads = 2;
    emit_outputs(run_experiment(c), b);
    CHECK(slurp(a / "results.csv") == slurp(b / "results.csv"));
    CHECK(slurp(a / "predictions_weighted_deconfounded.csv") == slurp(b / "predictions_weighted_deconfounded.csv"));

    auto manifest = slurp(a / "manifest.json");
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash(c)));
    CHECK(manifest.find(hash) != std::string::npos);
    CHECK(manifest.find("\"all_methods_ok\": true") != std::string::npos);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("failed methods are recorded and the rest proceed") {
    auto c = tiny(6);
    c.methods = {parse_method("probabilistic_none"), parse_method("probabilistic_deconfounded")};
    c.pf.init_jitter = -1.0; // rejected by the exposure model only
    auto t = run_experiment(c);
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0].ok);
    CHECK_FALSE(t.rows[1].ok);
    CHECK_FALSE(t.rows[1].error.empty());
    CHECK_FALSE(t.all_ok());
    auto dir = scratch("failed");
    emit_outputs(t, dir);
    auto rows = read_results_csv(dir / "results.csv");
    CHECK(rows[1].error == t.rows[1].error);
    fs::remove_all(dir);
}

TEST_CASE("strong generalization never trains on held-out users") {
    auto c = tiny(7);
    c.generalization = Generalization::strong;
    c.split.strong_holdout = 0.2;
    c.methods = {parse_method("probabilistic_none"), parse_method("probabilistic_deconfounded"),
                 parse_method("poisson_ipw")};
    auto t = run_experiment(c);
    CHECK(t.all_ok());
    CHECK(t.heldout_training_terms == 0);
    auto held = split(generate(c.sim).observed, c.split).heldout_users;
    CHECK(held.size() == 12);
    for (const auto& r : t.rows) CHECK(r.test_pairs == expected_test_pairs(c, held));
}

TEST_CASE("file source with an attached randomized test set") {
    auto dir = scratch("files");
    fs::create_directories(dir);
    SimConfig sc;
    sc.U = 40;
    sc.I = 30;
    sc.seed = 8;
    auto w = generate(sc);
    {
        std::ofstream tr(dir / "train.tsv"), te(dir / "test.tsv");
        for (const auto& e : w.observed.entries()) tr << e.user + 1 << '\t' << e.item + 1 << '\t' << e.value << '\n';
        for (Index u = 0; u < 40; ++u)
            for (Index i = 0; i < 30; ++i)
                if (!w.exposure(u, i) && (u + i) % 3 == 0) te << u + 1 << '\t' << i + 1 << '\t' << int(w.rating(u, i)) << '\n';
    }
    auto c = tiny(8);
    c.source = DataSource::file;
    c.train_path = (dir / "train.tsv").string();
    c.test_path = (dir / "test.tsv").string();
    c.split.mode = SplitMode::provided_random_test;
    c.methods = {parse_method("probabilistic_none"), parse_method("weighted_ipw")};
    auto t = run_experiment(c);
    CHECK(t.all_ok());
    CHECK(t.rows[0].test_pairs > 0);
    fs::remove_all(dir);
}

TEST_CASE("deconfounding lowers randomized-test MSE under full confounder correlation") {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        ExperimentConfig c;
        c.sim.U = 300;
        c.sim.I = 300;
        c.sim.gamma_theta = 1.0;
        c.sim.gamma_y = 3.0;
        c.sim.seed = mix_seed(seed, 0x300);
        c.sim_test_items = 30;
        c.split.seed = seed;
        c.seed = seed;
        c.k_grid = {10};
        c.prior_std_grid = {0.1};
        c.pf_k_grid = {10};
        c.methods = {parse_method("probabilistic_none"), parse_method("probabilistic_deconfounded")};
        auto t = run_experiment(c);
        REQUIRE(t.all_ok());
        wins += t.rows[1].mse < t.rows[0].mse;
    }
    MESSAGE("deconfounded wins: " << wins << "/10");
    CHECK(wins >= 8);
}
