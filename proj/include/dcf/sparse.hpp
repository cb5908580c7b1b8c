#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace dcf {

using Index = std::uint32_t;
using ExternalId = std::int64_t;

struct Entry {
    Index user = 0;
    Index item = 0;
    double value = 0.0;

    bool operator==(const Entry&) const = default;
};

// Immutable sparse user x item matrix stored as sorted triplets with a row
// (user) index and a column (item) permutation. Carries the external IDs of
// every internal row and column; by default external ID == internal index.
class SparseInteractions {
public:
    SparseInteractions() = default;

    // Throws std::invalid_argument on out-of-range indices, duplicate pairs or
    // ID tables whose size does not match the dimensions.
    SparseInteractions(std::size_t n_users, std::size_t n_items, std::vector<Entry> entries,
                       std::vector<ExternalId> user_ids = {}, std::vector<ExternalId> item_ids = {});

    std::size_t n_users() const noexcept { return n_users_; }
    std::size_t n_items() const noexcept { return n_items_; }
    std::size_t nnz() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }

    // Sorted by (user, item).
    std::span<const Entry> entries() const noexcept { return entries_; }
    std::span<const Entry> row(Index u) const noexcept {
        return {entries_.data() + row_ptr_[u], row_ptr_[u + 1] - row_ptr_[u]};
    }
    // Positions into entries() of column i's entries, ordered by user.
    std::span<const std::size_t> column(Index i) const noexcept {
        return {col_entries_.data() + col_ptr_[i], col_ptr_[i + 1] - col_ptr_[i]};
    }

    std::optional<double> value(Index u, Index i) const noexcept;
    bool contains(Index u, Index i) const noexcept { return value(u, i).has_value(); }

    ExternalId user_id(Index u) const noexcept { return user_ids_[u]; }
    ExternalId item_id(Index i) const noexcept { return item_ids_[i]; }
    const std::vector<ExternalId>& user_ids() const noexcept { return user_ids_; }
    const std::vector<ExternalId>& item_ids() const noexcept { return item_ids_; }

    // Same universe and IDs, different entries.
    SparseInteractions with_entries(std::vector<Entry> entries) const {
        return SparseInteractions(n_users_, n_items_, std::move(entries), user_ids_, item_ids_);
    }

    bool operator==(const SparseInteractions& o) const {
        return n_users_ == o.n_users_ && n_items_ == o.n_items_ && entries_ == o.entries_ &&
               user_ids_ == o.user_ids_ && item_ids_ == o.item_ids_;
    }

private:
    std::size_t n_users_ = 0;
    std::size_t n_items_ = 0;
    std::vector<Entry> entries_;
    std::vector<std::size_t> row_ptr_{0};
    std::vector<std::size_t> col_ptr_{0};
    std::vector<std::size_t> col_entries_;
    std::vector<ExternalId> user_ids_;
    std::vector<ExternalId> item_ids_;
};

} // namespace dcf
