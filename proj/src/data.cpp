#include "dcf/data.hpp"

#include "dcf/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <ostream>
#include <string_view>
#include <unordered_map>

namespace dcf {

namespace {

std::vector<std::string_view> split_fields(std::string_view line, std::string_view delim) {
    std::vector<std::string_view> out;
    if (delim.empty()) {
        out.push_back(line);
        return out;
    }
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(delim, start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + delim.size();
    }
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

ExternalId parse_id(std::string_view field, std::size_t line, const char* what) {
    field = trim(field);
    ExternalId v{};
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc{} || ptr != field.data() + field.size())
        throw ParseError(line, std::string("cannot parse ") + what + " '" + std::string(field) + "'");
    return v;
}

double parse_real(std::string_view field, std::size_t line) {
    field = trim(field);
    double v{};
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc{} || ptr != field.data() + field.size() || !std::isfinite(v))
        throw ParseError(line, "cannot parse rating '" + std::string(field) + "'");
    return v;
}

struct IdTable {
    std::vector<ExternalId> ids;
    std::vector<Index> index_of_raw; // parallel to raw rows
};

IdTable build_ids(const std::vector<ExternalId>& raw, const LoadOptions& opt,
                  const std::vector<std::size_t>& lines, const char* what) {
    IdTable t;
    t.index_of_raw.resize(raw.size());
    if (opt.remap_ids) {
        t.ids = raw;
        std::sort(t.ids.begin(), t.ids.end());
        t.ids.erase(std::unique(t.ids.begin(), t.ids.end()), t.ids.end());
        for (std::size_t k = 0; k < raw.size(); ++k)
            t.index_of_raw[k] = static_cast<Index>(std::lower_bound(t.ids.begin(), t.ids.end(), raw[k]) - t.ids.begin());
    } else {
        ExternalId max_id = opt.index_base - 1;
        for (std::size_t k = 0; k < raw.size(); ++k) {
            if (raw[k] < opt.index_base)
                throw ParseError(lines[k], std::string(what) + " id " + std::to_string(raw[k]) +
                                               " below index base " + std::to_string(opt.index_base));
            max_id = std::max(max_id, raw[k]);
            t.index_of_raw[k] = static_cast<Index>(raw[k] - opt.index_base);
        }
        t.ids.resize(static_cast<std::size_t>(max_id - opt.index_base + 1));
        for (std::size_t k = 0; k < t.ids.size(); ++k) t.ids[k] = static_cast<ExternalId>(k) + opt.index_base;
    }
    return t;
}

void warn(DatasetBundle& b, std::string msg) {
    std::cerr << "warning: " << msg << '\n';
    b.warnings.push_back(std::move(msg));
}

std::vector<Index> choose_heldout(const SparseInteractions& data, double fraction, Rng& rng) {
    std::vector<Index> candidates;
    for (Index u = 0; u < data.n_users(); ++u)
        if (!data.row(u).empty()) candidates.push_back(u);
    auto n_hold = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(candidates.size())));
    // Fisher-Yates with the portable uniform draw.
    for (std::size_t k = candidates.size(); k > 1; --k) {
        auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(k));
        std::swap(candidates[k - 1], candidates[std::min(j, k - 1)]);
    }
    candidates.resize(std::min(n_hold, candidates.size()));
    std::sort(candidates.begin(), candidates.end());
    return candidates;
}

void validate(const SplitSpec& spec) {
    auto f = split_fractions(spec.mode);
    if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw std::invalid_argument("split fractions do not sum to 1");
    if (spec.strong_holdout < 0.0 || spec.strong_holdout >= 1.0)
        throw std::invalid_argument("strong_holdout must lie in [0, 1)");
    if (spec.foldin_fraction < 0.0 || spec.foldin_fraction > 1.0)
        throw std::invalid_argument("foldin_fraction must lie in [0, 1]");
}

} // namespace

RatingScale observed_scale(const SparseInteractions& data) {
    if (data.empty()) return {0.0, 0.0};
    RatingScale s{data.entries()[0].value, data.entries()[0].value};
    for (const auto& e : data.entries()) {
        s.min = std::min(s.min, e.value);
        s.max = std::max(s.max, e.value);
    }
    return s;
}

SparseInteractions parse_delimited(std::istream& in, const LoadOptions& opt) {
    std::vector<ExternalId> raw_users, raw_items;
    std::vector<double> values;
    std::vector<std::size_t> lines;
    const std::size_t needed = std::max({opt.user_column, opt.item_column, opt.rating_column}) + 1;

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no <= opt.header_lines) continue;
        if (trim(line).empty()) continue;
        auto fields = split_fields(line, opt.delimiter);
        if (fields.size() < needed)
            throw ParseError(line_no, "expected at least " + std::to_string(needed) + " fields, got " +
                                          std::to_string(fields.size()));
        raw_users.push_back(parse_id(fields[opt.user_column], line_no, "user id"));
        raw_items.push_back(parse_id(fields[opt.item_column], line_no, "item id"));
        double v = parse_real(fields[opt.rating_column], line_no);
        if (opt.scale && !opt.scale->contains(v))
            throw ParseError(line_no, "rating " + std::string(trim(fields[opt.rating_column])) +
                                          " outside declared scale");
        values.push_back(v);
        lines.push_back(line_no);
    }

    auto users = build_ids(raw_users, opt, lines, "user");
    auto items = build_ids(raw_items, opt, lines, "item");
    std::vector<Entry> entries(values.size());
    for (std::size_t k = 0; k < values.size(); ++k)
        entries[k] = {users.index_of_raw[k], items.index_of_raw[k], values[k]};
    const std::size_t n_users = users.ids.size(), n_items = items.ids.size();
    return SparseInteractions(n_users, n_items, std::move(entries), std::move(users.ids), std::move(items.ids));
}

SparseInteractions load_delimited(const std::filesystem::path& path, const LoadOptions& options) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return parse_delimited(in, options);
}

SparseInteractions binarize(const SparseInteractions& ratings) {
    std::vector<Entry> entries(ratings.entries().begin(), ratings.entries().end());
    for (auto& e : entries) e.value = 1.0;
    return ratings.with_entries(std::move(entries));
}

std::array<double, 3> split_fractions(SplitMode mode) {
    switch (mode) {
    case SplitMode::train_val_80_20: return {0.8, 0.2, 0.0};
    case SplitMode::train_val_test_60_20_20: return {0.6, 0.2, 0.2};
    case SplitMode::provided_random_test: return {0.8, 0.2, 0.0};
    }
    return {1.0, 0.0, 0.0};
}

namespace {

struct Folds {
    std::vector<Entry> train, validation, test, foldin;
};

Folds assign(const SparseInteractions& data, const SplitSpec& spec, std::vector<Index>& heldout,
             bool heldout_all_to_foldin) {
    Rng rng(mix_seed(spec.seed, 0x5eed));
    heldout = spec.strong_holdout > 0.0 ? choose_heldout(data, spec.strong_holdout, rng) : std::vector<Index>{};
    std::vector<bool> is_held(data.n_users(), false);
    for (Index u : heldout) is_held[u] = true;

    auto f = split_fractions(spec.mode);
    Folds folds;
    for (const auto& e : data.entries()) {
        double r = uniform01(rng);
        if (is_held[e.user]) {
            if (heldout_all_to_foldin || r < spec.foldin_fraction) folds.foldin.push_back(e);
            else folds.test.push_back(e);
        } else if (r < f[0]) {
            folds.train.push_back(e);
        } else if (r < f[0] + f[1]) {
            folds.validation.push_back(e);
        } else {
            folds.test.push_back(e);
        }
    }
    return folds;
}

} // namespace

DatasetBundle split(const SparseInteractions& data, const SplitSpec& spec) {
    validate(spec);
    if (spec.mode == SplitMode::provided_random_test)
        throw std::invalid_argument("provided_random_test mode requires a bundle from attach_random_test");
    if (data.empty()) throw std::invalid_argument("split: input has no entries");

    DatasetBundle b;
    auto folds = assign(data, spec, b.heldout_users, false);
    b.train = data.with_entries(std::move(folds.train));
    b.validation = data.with_entries(std::move(folds.validation));
    b.test = data.with_entries(std::move(folds.test));
    b.foldin = data.with_entries(std::move(folds.foldin));
    b.test_kind = TestKind::regular;
    b.rating_scale = observed_scale(data);

    auto f = split_fractions(spec.mode);
    if (f[0] > 0 && b.train.empty()) warn(b, "train fold is empty");
    if (f[1] > 0 && b.validation.empty()) warn(b, "validation fold is empty");
    if (f[2] > 0 && b.test.empty()) warn(b, "test fold is empty");
    return b;
}

DatasetBundle split(const DatasetBundle& attached, const SplitSpec& spec) {
    validate(spec);
    if (spec.mode != SplitMode::provided_random_test)
        throw std::invalid_argument("bundle split requires provided_random_test mode");
    if (attached.train.empty()) throw std::invalid_argument("split: training data has no entries");

    DatasetBundle b = attached;
    auto folds = assign(attached.train, spec, b.heldout_users, true);
    b.train = attached.train.with_entries(std::move(folds.train));
    b.validation = attached.train.with_entries(std::move(folds.validation));
    b.foldin = attached.train.with_entries(std::move(folds.foldin));
    if (b.train.empty()) warn(b, "train fold is empty");
    if (b.validation.empty()) warn(b, "validation fold is empty");
    return b;
}

SparseInteractions widen(const SparseInteractions& data, const std::vector<ExternalId>& user_ids,
                         const std::vector<ExternalId>& item_ids) {
    std::vector<Entry> entries(data.entries().begin(), data.entries().end());
    return SparseInteractions(user_ids.size(), item_ids.size(), std::move(entries), user_ids, item_ids);
}

DatasetBundle attach_random_test(const SparseInteractions& train, const SparseInteractions& test) {
    auto extend = [](const std::vector<ExternalId>& base, const std::vector<ExternalId>& extra,
                     std::vector<Index>& map_extra) {
        std::vector<ExternalId> ids = base;
        std::unordered_map<ExternalId, Index> pos;
        for (std::size_t k = 0; k < base.size(); ++k) pos.emplace(base[k], static_cast<Index>(k));
        std::vector<ExternalId> fresh;
        for (auto id : extra)
            if (!pos.count(id)) fresh.push_back(id);
        std::sort(fresh.begin(), fresh.end());
        for (auto id : fresh) {
            pos.emplace(id, static_cast<Index>(ids.size()));
            ids.push_back(id);
        }
        map_extra.resize(extra.size());
        for (std::size_t k = 0; k < extra.size(); ++k) map_extra[k] = pos.at(extra[k]);
        return ids;
    };

    std::vector<Index> test_user_map, test_item_map;
    auto user_ids = extend(train.user_ids(), test.user_ids(), test_user_map);
    auto item_ids = extend(train.item_ids(), test.item_ids(), test_item_map);

    DatasetBundle b;
    b.train = widen(train, user_ids, item_ids);
    std::vector<Entry> test_entries;
    test_entries.reserve(test.nnz());
    for (const auto& e : test.entries()) {
        Entry m{test_user_map[e.user], test_item_map[e.item], e.value};
        if (b.train.contains(m.user, m.item))
            throw std::invalid_argument("attach_random_test: pair (user " + std::to_string(user_ids[m.user]) +
                                        ", item " + std::to_string(item_ids[m.item]) +
                                        ") appears in both train and test");
        test_entries.push_back(m);
    }
    b.test = SparseInteractions(user_ids.size(), item_ids.size(), std::move(test_entries), user_ids, item_ids);
    b.validation = b.train.with_entries({});
    b.foldin = b.train.with_entries({});
    b.test_kind = TestKind::randomized;
    for (Index u = static_cast<Index>(train.n_users()); u < user_ids.size(); ++u) b.new_test_users.push_back(u);

    auto s1 = observed_scale(train), s2 = observed_scale(test);
    b.rating_scale = train.empty() ? s2 : test.empty() ? s1 : RatingScale{std::min(s1.min, s2.min), std::max(s1.max, s2.max)};
    return b;
}

void write_split_manifest(const DatasetBundle& b, std::ostream& out) {
    char buf[64];
    auto emit = [&](const char* fold, const SparseInteractions& m) {
        for (const auto& e : m.entries()) {
            std::snprintf(buf, sizeof buf, "%.17g", e.value);
            out << fold << ',' << m.user_id(e.user) << ',' << m.item_id(e.item) << ',' << buf << '\n';
        }
    };
    out << "fold,user_id,item_id,value\n";
    emit("train", b.train);
    emit("validation", b.validation);
    emit("test", b.test);
    emit("foldin", b.foldin);
}

RestrictedUsers restrict_users(const SparseInteractions& data, const std::vector<bool>& keep) {
    RestrictedUsers r;
    std::vector<Index> compact(data.n_users(), 0);
    std::vector<ExternalId> ids;
    for (Index u = 0; u < data.n_users(); ++u) {
        if (keep[u]) {
            compact[u] = static_cast<Index>(r.original_user.size());
            r.original_user.push_back(u);
            ids.push_back(data.user_id(u));
        }
    }
    std::vector<Entry> entries;
    for (const auto& e : data.entries())
        if (keep[e.user]) entries.push_back({compact[e.user], e.item, e.value});
    r.data = SparseInteractions(r.original_user.size(), data.n_items(), std::move(entries), std::move(ids),
                                data.item_ids());
    return r;
}

} // namespace dcf
