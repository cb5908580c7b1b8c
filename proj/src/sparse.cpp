#include "dcf/sparse.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace dcf {

SparseInteractions::SparseInteractions(std::size_t n_users, std::size_t n_items, std::vector<Entry> entries,
                                       std::vector<ExternalId> user_ids, std::vector<ExternalId> item_ids)
    : n_users_(n_users), n_items_(n_items), entries_(std::move(entries)),
      user_ids_(std::move(user_ids)), item_ids_(std::move(item_ids)) {
    if (user_ids_.empty()) {
        user_ids_.resize(n_users_);
        std::iota(user_ids_.begin(), user_ids_.end(), ExternalId{0});
    }
    if (item_ids_.empty()) {
        item_ids_.resize(n_items_);
        std::iota(item_ids_.begin(), item_ids_.end(), ExternalId{0});
    }
    if (user_ids_.size() != n_users_ || item_ids_.size() != n_items_)
        throw std::invalid_argument("SparseInteractions: ID table size does not match dimensions");

    for (const auto& e : entries_) {
        if (e.user >= n_users_ || e.item >= n_items_)
            throw std::invalid_argument("SparseInteractions: entry (" + std::to_string(e.user) + "," +
                                        std::to_string(e.item) + ") out of range");
    }
    std::sort(entries_.begin(), entries_.end(), [](const Entry& a, const Entry& b) {
        return a.user != b.user ? a.user < b.user : a.item < b.item;
    });
    for (std::size_t k = 1; k < entries_.size(); ++k) {
        if (entries_[k].user == entries_[k - 1].user && entries_[k].item == entries_[k - 1].item)
            throw std::invalid_argument("SparseInteractions: duplicate pair (user " +
                                        std::to_string(user_ids_[entries_[k].user]) + ", item " +
                                        std::to_string(item_ids_[entries_[k].item]) + ")");
    }

    row_ptr_.assign(n_users_ + 1, 0);
    col_ptr_.assign(n_items_ + 1, 0);
    for (const auto& e : entries_) {
        ++row_ptr_[e.user + 1];
        ++col_ptr_[e.item + 1];
    }
    std::partial_sum(row_ptr_.begin(), row_ptr_.end(), row_ptr_.begin());
    std::partial_sum(col_ptr_.begin(), col_ptr_.end(), col_ptr_.begin());

    // Entries are user-sorted, so a stable fill yields user order within each column.
    col_entries_.resize(entries_.size());
    std::vector<std::size_t> cursor(col_ptr_.begin(), col_ptr_.end() - 1);
    for (std::size_t k = 0; k < entries_.size(); ++k) col_entries_[cursor[entries_[k].item]++] = k;
}

std::optional<double> SparseInteractions::value(Index u, Index i) const noexcept {
    if (u >= n_users_) return std::nullopt;
    auto r = row(u);
    auto it = std::lower_bound(r.begin(), r.end(), i, [](const Entry& e, Index item) { return e.item < item; });
    if (it == r.end() || it->item != i) return std::nullopt;
    return it->value;
}

} // namespace dcf
