#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dcf/data.hpp"
#include "dcf/sparse.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

using namespace dcf;

namespace {

SparseInteractions random_ratings(std::size_t U, std::size_t I, double density, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution b(density);
    std::uniform_int_distribution<int> r(1, 5);
    std::vector<Entry> e;
    for (Index u = 0; u < U; ++u)
        for (Index i = 0; i < I; ++i)
            if (b(rng)) e.push_back({u, i, double(r(rng))});
    return SparseInteractions(U, I, e);
}

std::set<std::pair<ExternalId, ExternalId>> pairs(const SparseInteractions& m) {
    std::set<std::pair<ExternalId, ExternalId>> s;
    for (const auto& e : m.entries()) s.emplace(m.user_id(e.user), m.item_id(e.item));
    return s;
}

std::size_t overlap(const SparseInteractions& a, const SparseInteractions& b) {
    auto pa = pairs(a);
    std::size_t n = 0;
    for (const auto& p : pairs(b)) n += pa.count(p);
    return n;
}

} // namespace

TEST_CASE("sparse storage invariants") {
    auto m = random_ratings(30, 20, 0.2, 1);
    std::size_t via_rows = 0, via_cols = 0;
    for (Index u = 0; u < 30; ++u)
        for (const auto& e : m.row(u)) {
            CHECK(e.user == u);
            CHECK(m.value(u, e.item) == e.value);
            ++via_rows;
        }
    for (Index i = 0; i < 20; ++i) {
        Index last = 0;
        bool first = true;
        for (std::size_t p : m.column(i)) {
            const auto& e = m.entries()[p];
            CHECK(e.item == i);
            if (!first) CHECK(e.user > last);
            last = e.user;
            first = false;
            ++via_cols;
        }
    }
    CHECK(via_rows == m.nnz());
    CHECK(via_cols == m.nnz());
    CHECK(m.value(29, 19).has_value() == m.contains(29, 19));

    CHECK_THROWS_AS(SparseInteractions(2, 2, {{2, 0, 1.0}}), std::invalid_argument);
    CHECK_THROWS_AS(SparseInteractions(2, 2, {{0, 0, 1.0}, {0, 0, 2.0}}), std::invalid_argument);
    CHECK_THROWS_AS(SparseInteractions(2, 2, {}, {1, 2, 3}), std::invalid_argument);
}

TEST_CASE("reading a delimited file") {
    auto dir = std::filesystem::temp_directory_path() / "dcf_test_data";
    std::filesystem::create_directories(dir);
    auto path = dir / "r.tsv";
    {
        std::ofstream f(path);
        f << "1\t2\t5\n1\t3\t4\n2\t2\t1\n";
    }
    auto m = load_delimited(path);
    CHECK(m.n_users() == 2);
    CHECK(m.n_items() == 2);
    CHECK(m.nnz() == 3);
    CHECK(m.user_ids() == std::vector<ExternalId>{1, 2});
    CHECK(m.item_ids() == std::vector<ExternalId>{2, 3});
    CHECK(m.value(0, 1) == 4.0);

    {
        std::ofstream f(path);
    }
    auto empty = load_delimited(path);
    CHECK(empty.nnz() == 0);
    CHECK(empty.n_users() == 0);
    CHECK_THROWS_AS(load_delimited(dir / "missing.tsv"), std::runtime_error);
    std::filesystem::remove_all(dir);
}

TEST_CASE("parse options") {
    std::istringstream ml("user::item::rating::ts\n10::7::3::99\n4::7::5::98\n");
    LoadOptions o;
    o.delimiter = "::";
    o.header_lines = 1;
    auto m = parse_delimited(ml, o);
    CHECK(m.user_ids() == std::vector<ExternalId>{4, 10});
    CHECK(m.value(1, 0) == 3.0);

    std::istringstream csv("5,1,0\n");
    LoadOptions c;
    c.delimiter = ",";
    c.rating_column = 0;
    c.user_column = 1;
    c.item_column = 2;
    c.index_base = 0;
    c.remap_ids = false;
    auto n = parse_delimited(csv, c);
    CHECK(n.n_users() == 2);
    CHECK(n.n_items() == 1);
    CHECK(n.value(1, 0) == 5.0);
}

TEST_CASE("parse errors carry the line number") {
    auto line_of = [](const std::string& text, LoadOptions o = {}) -> std::size_t {
        std::istringstream in(text);
        try {
            parse_delimited(in, o);
        } catch (const ParseError& e) {
            return e.line();
        }
        return 0;
    };
    CHECK(line_of("1\t2\t5\n1\tx\t4\n") == 2);
    CHECK(line_of("1\t2\t5\n\n1\t3\n") == 3);
    CHECK(line_of("1\t2\tfive\n") == 1);
    LoadOptions scaled;
    scaled.scale = RatingScale{1, 5};
    CHECK(line_of("1\t2\t5\n1\t3\t6\n", scaled) == 2);
    LoadOptions raw;
    raw.remap_ids = false;
    CHECK(line_of("1\t2\t5\n0\t3\t4\n", raw) == 2);

    std::istringstream dup("1\t2\t5\n1\t2\t4\n");
    try {
        parse_delimited(dup);
        FAIL("duplicate accepted");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("user 1, item 2") != std::string::npos);
    }
}

TEST_CASE("binarize") {
    SparseInteractions m(1, 3, {{0, 0, 5}, {0, 1, 4}, {0, 2, 1}});
    auto b = binarize(m);
    for (const auto& e : b.entries()) CHECK(e.value == 1.0);
    CHECK(binarize(SparseInteractions(2, 2, {})).nnz() == 0);
    auto r = random_ratings(100, 100, 0.1, 2);
    CHECK(binarize(r).nnz() == r.nnz());
    CHECK(binarize(binarize(r)) == binarize(r));
    CHECK(observed_scale(m) == RatingScale{1, 5});
}

TEST_CASE("split fractions") {
    for (auto mode : {SplitMode::train_val_80_20, SplitMode::train_val_test_60_20_20, SplitMode::provided_random_test}) {
        auto f = split_fractions(mode);
        CHECK(std::abs(f[0] + f[1] + f[2] - 1.0) < 1e-9);
    }
}

TEST_CASE("80/20 fold sizes follow the binomial") {
    auto r = random_ratings(100, 50, 0.2, 3);
    REQUIRE(r.nnz() > 900);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SplitSpec s;
        s.seed = seed;
        auto b = split(r, s);
        double n = r.nnz(), sd = std::sqrt(n * 0.8 * 0.2);
        CHECK(std::abs(b.train.nnz() - 0.8 * n) < 3 * sd);
        CHECK(b.train.nnz() + b.validation.nnz() + b.test.nnz() == r.nnz());
        CHECK(b.test.nnz() == 0);
        CHECK(overlap(b.train, b.validation) == 0);
    }
}

TEST_CASE("splits are disjoint, conserving and deterministic") {
    auto r = random_ratings(60, 40, 0.25, 4);
    for (auto mode : {SplitMode::train_val_80_20, SplitMode::train_val_test_60_20_20})
        for (double hold : {0.0, 0.2}) {
            SplitSpec s;
            s.mode = mode;
            s.seed = 11;
            s.strong_holdout = hold;
            auto a = split(r, s);
            auto b = split(r, s);
            CHECK(a.train == b.train);
            CHECK(a.validation == b.validation);
            CHECK(a.test == b.test);
            CHECK(a.foldin == b.foldin);
            CHECK(overlap(a.train, a.validation) == 0);
            CHECK(overlap(a.train, a.test) == 0);
            CHECK(overlap(a.validation, a.test) == 0);
            CHECK(overlap(a.foldin, a.train) == 0);
            CHECK(overlap(a.foldin, a.test) == 0);
            CHECK(a.train.nnz() + a.validation.nnz() + a.test.nnz() + a.foldin.nnz() == r.nnz());
            CHECK(a.train.n_users() == r.n_users());
            std::ostringstream ma, mb;
            write_split_manifest(a, ma);
            write_split_manifest(b, mb);
            CHECK(ma.str() == mb.str());
            s.seed = 12;
            CHECK_FALSE(split(r, s).train == a.train);
        }
}

TEST_CASE("strong holdout removes whole users from training") {
    auto r = random_ratings(100, 30, 0.3, 5);
    SplitSpec s;
    s.strong_holdout = 0.1;
    s.seed = 2;
    auto b = split(r, s);
    CHECK(b.heldout_users.size() == 10);
    for (Index u : b.heldout_users) {
        CHECK(b.train.row(u).empty());
        CHECK(b.validation.row(u).empty());
        CHECK(b.foldin.row(u).size() + b.test.row(u).size() == r.row(u).size());
    }
    std::set<Index> held(b.heldout_users.begin(), b.heldout_users.end());
    std::size_t absent = 0;
    for (Index u = 0; u < 100; ++u) absent += b.train.row(u).empty();
    CHECK(absent == 10);
    for (const auto& e : b.foldin.entries()) CHECK(held.count(e.user) == 1);
}

TEST_CASE("split errors and warnings") {
    SplitSpec s;
    CHECK_THROWS_AS(split(SparseInteractions(3, 3, {}), s), std::invalid_argument);
    s.strong_holdout = 1.0;
    CHECK_THROWS_AS(split(random_ratings(5, 5, 0.5, 1), s), std::invalid_argument);
    s = {};
    s.mode = SplitMode::provided_random_test;
    CHECK_THROWS_AS(split(random_ratings(5, 5, 0.5, 1), s), std::invalid_argument);
    s = {};
    s.mode = SplitMode::train_val_test_60_20_20;
    auto tiny = split(SparseInteractions(1, 1, {{0, 0, 3.0}}), s);
    CHECK_FALSE(tiny.warnings.empty());
}

TEST_CASE("attaching a randomized test set") {
    SparseInteractions train(2, 2, {{0, 0, 5}, {1, 1, 3}}, {10, 20}, {100, 200});
    SparseInteractions test(2, 2, {{0, 1, 2}, {1, 0, 4}}, {10, 30}, {100, 300});
    auto b = attach_random_test(train, test);
    CHECK(b.test_kind == TestKind::randomized);
    CHECK(b.train.n_users() == 3);
    CHECK(b.train.n_items() == 3);
    CHECK(b.train.user_ids() == std::vector<ExternalId>{10, 20, 30});
    CHECK(b.test.user_ids() == b.train.user_ids());
    CHECK(b.new_test_users == std::vector<Index>{2});
    CHECK(b.test.value(0, 2) == 2.0); // user 10, item 300
    CHECK(b.test.value(2, 0) == 4.0); // user 30, item 100
    CHECK(overlap(b.train, b.test) == 0);

    SparseInteractions clash(1, 1, {{0, 0, 1}}, {20}, {200});
    CHECK_THROWS_AS(attach_random_test(train, clash), std::invalid_argument);

    SplitSpec s;
    s.mode = SplitMode::provided_random_test;
    auto sp = split(b, s);
    CHECK(sp.test == b.test);
    CHECK(sp.train.nnz() + sp.validation.nnz() == 2);
}

TEST_CASE("randomized-test fixture with a sparse ID space") {
    // a 1% slice of a 15400 x 1000 universe with non-contiguous IDs
    std::mt19937_64 rng(6);
    std::ostringstream tr, te;
    std::set<std::pair<int, int>> used;
    for (int k = 0; k < 3000; ++k) {
        int u = 1 + rng() % 15400, i = 1 + rng() % 1000;
        if (used.insert({u, i}).second) tr << u << '\t' << i << '\t' << 1 + rng() % 5 << '\n';
    }
    for (int k = 0; k < 540; ++k) {
        int u = 1 + rng() % 15400, i = 1 + rng() % 1000;
        if (used.insert({u, i}).second) te << u << '\t' << i << '\t' << 1 + rng() % 5 << '\n';
    }
    std::istringstream a(tr.str()), b(te.str());
    auto train = parse_delimited(a), test = parse_delimited(b);
    auto bundle = attach_random_test(train, test);
    CHECK(bundle.test.nnz() == test.nnz());
    CHECK(bundle.train.nnz() == train.nnz());
    for (const auto& e : test.entries()) {
        auto uid = test.user_id(e.user), iid = test.item_id(e.item);
        bool found = false;
        for (const auto& f : bundle.test.entries())
            if (bundle.test.user_id(f.user) == uid && bundle.test.item_id(f.item) == iid) found = f.value == e.value;
        CHECK(found);
    }
}

TEST_CASE("restricting users keeps their rows") {
    auto r = random_ratings(10, 6, 0.5, 7);
    std::vector<bool> keep(10, false);
    keep[2] = keep[7] = true;
    auto s = restrict_users(r, keep);
    CHECK(s.data.n_users() == 2);
    CHECK(s.original_user == std::vector<Index>{2, 7});
    CHECK(s.data.user_ids() == std::vector<ExternalId>{2, 7});
    CHECK(s.data.row(1).size() == r.row(7).size());
}

TEST_CASE("split manifest format") {
    SparseInteractions r(1, 2, {{0, 0, 4.5}, {0, 1, 2}}, {7}, {8, 9});
    DatasetBundle b;
    b.train = r;
    b.validation = r.with_entries({});
    b.test = r.with_entries({});
    b.foldin = r.with_entries({});
    std::ostringstream os;
    write_split_manifest(b, os);
    CHECK(os.str() == "fold,user_id,item_id,value\ntrain,7,8,4.5\ntrain,7,9,2\n");
}
