#pragma once

#include "dcf/sparse.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcf {

struct RatingScale {
    double min = 1.0;
    double max = 5.0;

    bool contains(double v) const noexcept { return v >= min && v <= max; }
    bool operator==(const RatingScale&) const = default;
};

// Observed min/max of the stored values; {0,0} for an empty matrix.
RatingScale observed_scale(const SparseInteractions& data);

class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

struct LoadOptions {
    std::string delimiter = "\t"; // may be multi-character, e.g. "::" for MovieLens-1M
    std::size_t user_column = 0;
    std::size_t item_column = 1;
    std::size_t rating_column = 2;
    int index_base = 1;
    // Remap arbitrary external IDs to dense 0-based indices in ascending ID
    // order. When false, index = id - index_base.
    bool remap_ids = true;
    std::size_t header_lines = 0;
    std::optional<RatingScale> scale;
};

SparseInteractions load_delimited(const std::filesystem::path& path, const LoadOptions& options = {});
SparseInteractions parse_delimited(std::istream& in, const LoadOptions& options = {});

// Same sparsity pattern, every stored value set to 1.
SparseInteractions binarize(const SparseInteractions& ratings);

enum class SplitMode { train_val_80_20, train_val_test_60_20_20, provided_random_test };
enum class TestKind { regular, randomized };

struct SplitSpec {
    SplitMode mode = SplitMode::train_val_80_20;
    std::uint64_t seed = 0;
    // Fraction of users held out as new users (strong generalization); 0 disables.
    double strong_holdout = 0.0;
    // Share of a held-out user's entries revealed for fold-in; the rest is evaluated.
    double foldin_fraction = 0.5;
};

// (train, validation, test) fractions for a mode. provided_random_test splits
// only the observational part, so its test fraction is 0.
std::array<double, 3> split_fractions(SplitMode mode);

struct DatasetBundle {
    SparseInteractions train;
    SparseInteractions validation;
    SparseInteractions test;
    // Revealed entries of strong-generalization users; empty otherwise.
    SparseInteractions foldin;
    TestKind test_kind = TestKind::regular;
    RatingScale rating_scale;
    std::vector<Index> heldout_users;   // sorted
    std::vector<Index> new_test_users;  // test-only users added by attach_random_test
    std::vector<std::string> warnings;
};

DatasetBundle split(const SparseInteractions& data, const SplitSpec& spec);

// Splits the observational part of an attached bundle (mode must be
// provided_random_test); the randomized test set is kept intact.
DatasetBundle split(const DatasetBundle& attached, const SplitSpec& spec);

// Reconciles the two ID spaces by external ID; users or items present only in
// the test file are appended to the universe. Throws on an overlapping pair.
DatasetBundle attach_random_test(const SparseInteractions& train, const SparseInteractions& test);

// "fold,user_id,item_id,value" rows with external IDs.
void write_split_manifest(const DatasetBundle& bundle, std::ostream& out);

struct RestrictedUsers {
    SparseInteractions data;
    std::vector<Index> original_user; // compact row -> original row
};

// Keeps only users with keep[u] == true, re-indexing rows densely.
RestrictedUsers restrict_users(const SparseInteractions& data, const std::vector<bool>& keep);

// Re-expresses `data` in a universe of n_users x n_items without changing indices.
SparseInteractions widen(const SparseInteractions& data, const std::vector<ExternalId>& user_ids,
                         const std::vector<ExternalId>& item_ids);

} // namespace dcf
