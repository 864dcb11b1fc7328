#pragma once

#include "ruleagent/error.hpp"
#include "ruleagent/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace ruleagent {

using UserIndex = std::uint32_t;
using ItemIndex = std::uint32_t;

struct Interaction {
    UserIndex user = 0;
    ItemIndex item = 0;

    friend bool operator==(const Interaction&, const Interaction&) = default;
    friend auto operator<=>(const Interaction&, const Interaction&) = default;
};

/// Observed positives over a dense id space, plus the external ids each dense
/// index came from. Split parts share the id tables of the set they came from.
struct InteractionSet {
    std::vector<Interaction> interactions;
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    std::vector<std::string> user_ids;
    std::vector<std::string> item_ids;

    std::size_t size() const noexcept { return interactions.size(); }
    bool empty() const noexcept { return interactions.empty(); }

    friend bool operator==(const InteractionSet&, const InteractionSet&) = default;
};

struct NoiseLedger {
    std::vector<Interaction> injected;
    double rate = 0.0;
    std::uint64_t seed = 0;
};

struct LoadStats {
    std::size_t lines = 0;
    std::size_t duplicates = 0;
};

inline std::uint64_t pair_key(UserIndex u, ItemIndex i) noexcept
{
    return (static_cast<std::uint64_t>(u) << 32) | i;
}

/// Membership lookup over the (user, item) pairs of one or more sets.
class PairSet {
public:
    PairSet() = default;
    explicit PairSet(const std::vector<Interaction>& xs)
    {
        keys_.reserve(xs.size());
        for (const auto& x : xs) {
            keys_.insert(pair_key(x.user, x.item));
        }
    }

    bool contains(UserIndex u, ItemIndex i) const { return keys_.count(pair_key(u, i)) != 0; }
    bool contains(const Interaction& x) const { return contains(x.user, x.item); }
    bool insert(const Interaction& x) { return keys_.insert(pair_key(x.user, x.item)).second; }
    std::size_t size() const noexcept { return keys_.size(); }

private:
    std::unordered_set<std::uint64_t> keys_;
};

/// Items of each user, in set order.
inline std::vector<std::vector<ItemIndex>> items_by_user(const InteractionSet& set)
{
    std::vector<std::vector<ItemIndex>> out(set.num_users);
    for (const auto& x : set.interactions) {
        out.at(x.user).push_back(x.item);
    }
    return out;
}

namespace detail {

inline std::uint32_t intern(std::unordered_map<std::string, std::uint32_t>& index,
                            std::vector<std::string>& ids, std::string_view key)
{
    auto [it, inserted] = index.try_emplace(std::string(key), static_cast<std::uint32_t>(ids.size()));
    if (inserted) {
        ids.emplace_back(key);
    }
    return it->second;
}

} // namespace detail

/// Reads `<user>\t<item>` lines. Dense ids follow first appearance; repeated
/// pairs are dropped and counted in `stats`.
inline InteractionSet load_interactions(const std::filesystem::path& path, LoadStats* stats = nullptr)
{
    std::ifstream in(path);
    if (!in) {
        throw LoadError("cannot open interaction file: " + path.string());
    }

    InteractionSet set;
    std::unordered_map<std::string, std::uint32_t> users;
    std::unordered_map<std::string, std::uint32_t> items;
    PairSet seen;
    LoadStats local;

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.find_first_not_of(" \t") == std::string::npos) {
            continue;
        }
        ++local.lines;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 == line.size()
            || line.find('\t', tab + 1) != std::string::npos) {
            throw ParseError(path.string() + ":" + std::to_string(line_no)
                                 + ": expected '<user>\\t<item>'",
                             line_no);
        }
        const std::string_view view(line);
        const auto u = detail::intern(users, set.user_ids, view.substr(0, tab));
        const auto i = detail::intern(items, set.item_ids, view.substr(tab + 1));
        if (!seen.insert({u, i})) {
            ++local.duplicates;
            continue;
        }
        set.interactions.push_back({u, i});
    }

    if (set.interactions.empty()) {
        throw EmptyDatasetError("no interactions in " + path.string());
    }
    set.num_users = set.user_ids.size();
    set.num_items = set.item_ids.size();
    if (stats) {
        *stats = local;
    }
    return set;
}

/// Writes the set as `<user>\t<item>` lines using its external ids.
inline void save_interactions(const InteractionSet& set, const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    for (const auto& x : set.interactions) {
        out << set.user_ids.at(x.user) << '\t' << set.item_ids.at(x.item) << '\n';
    }
}

/// JSON sidecar holding the id maps plus free-form metadata (split, seeds).
inline nlohmann::json sidecar_json(const InteractionSet& set, const nlohmann::json& meta = nlohmann::json::object())
{
    return {
        {"format", "ruleagent.interactions"},
        {"version", 1},
        {"num_users", set.num_users},
        {"num_items", set.num_items},
        {"num_interactions", set.size()},
        {"user_ids", set.user_ids},
        {"item_ids", set.item_ids},
        {"meta", meta},
    };
}

/// Re-reads a TSV written by save_interactions against the dense ids of its sidecar.
inline InteractionSet load_with_sidecar(const std::filesystem::path& tsv, const std::filesystem::path& sidecar)
{
    std::ifstream meta_in(sidecar);
    if (!meta_in) {
        throw LoadError("cannot open sidecar: " + sidecar.string());
    }
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_in);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("corrupt sidecar " + sidecar.string() + ": " + e.what());
    }

    InteractionSet set;
    set.user_ids = meta.at("user_ids").get<std::vector<std::string>>();
    set.item_ids = meta.at("item_ids").get<std::vector<std::string>>();
    set.num_users = set.user_ids.size();
    set.num_items = set.item_ids.size();

    std::unordered_map<std::string, std::uint32_t> users;
    std::unordered_map<std::string, std::uint32_t> items;
    for (std::uint32_t k = 0; k < set.user_ids.size(); ++k) {
        users.emplace(set.user_ids[k], k);
    }
    for (std::uint32_t k = 0; k < set.item_ids.size(); ++k) {
        items.emplace(set.item_ids[k], k);
    }

    std::ifstream in(tsv);
    if (!in) {
        throw LoadError("cannot open interaction file: " + tsv.string());
    }
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw ParseError(tsv.string() + ":" + std::to_string(line_no) + ": expected '<user>\\t<item>'", line_no);
        }
        const auto u = users.find(line.substr(0, tab));
        const auto i = items.find(line.substr(tab + 1));
        if (u == users.end() || i == items.end()) {
            throw LoadError(tsv.string() + ":" + std::to_string(line_no) + ": id not present in sidecar", line_no);
        }
        set.interactions.push_back({u->second, i->second});
    }
    return set;
}

/// Keeps the `n` users with most interactions (ties: smaller dense id) and
/// reindexes. Users keep their relative order; items are numbered by first
/// appearance among the kept interactions.
inline InteractionSet densify_top_users(const InteractionSet& set, std::size_t n)
{
    if (n == 0) {
        throw InvalidArgument("densify_top_users: n must be positive");
    }
    if (n > set.num_users) {
        throw InvalidArgument("densify_top_users: n exceeds the number of users");
    }

    std::vector<std::size_t> counts(set.num_users, 0);
    for (const auto& x : set.interactions) {
        ++counts.at(x.user);
    }
    std::vector<UserIndex> order(set.num_users);
    for (UserIndex u = 0; u < order.size(); ++u) {
        order[u] = u;
    }
    std::stable_sort(order.begin(), order.end(), [&](UserIndex a, UserIndex b) { return counts[a] > counts[b]; });
    order.resize(n);
    std::sort(order.begin(), order.end());

    std::vector<std::int64_t> user_map(set.num_users, -1);
    InteractionSet out;
    for (const auto u : order) {
        user_map[u] = static_cast<std::int64_t>(out.user_ids.size());
        out.user_ids.push_back(set.user_ids.at(u));
    }
    std::vector<std::int64_t> item_map(set.num_items, -1);
    for (const auto& x : set.interactions) {
        if (user_map[x.user] < 0) {
            continue;
        }
        if (item_map[x.item] < 0) {
            item_map[x.item] = static_cast<std::int64_t>(out.item_ids.size());
            out.item_ids.push_back(set.item_ids.at(x.item));
        }
        out.interactions.push_back(
            {static_cast<UserIndex>(user_map[x.user]), static_cast<ItemIndex>(item_map[x.item])});
    }
    out.num_users = out.user_ids.size();
    out.num_items = out.item_ids.size();
    return out;
}

struct SplitSets {
    InteractionSet train;
    InteractionSet valid;
    InteractionSet test;
};

/// Per-user seeded 7:1:2 split: test gets floor(0.2k), validation floor(0.1k),
/// train the remainder. Each part keeps the input order.
inline SplitSets split(const InteractionSet& set, std::uint64_t seed)
{
    const auto per_user_positions = [&] {
        std::vector<std::vector<std::size_t>> out(set.num_users);
        for (std::size_t k = 0; k < set.interactions.size(); ++k) {
            out.at(set.interactions[k].user).push_back(k);
        }
        return out;
    }();

    // 0 = train, 1 = valid, 2 = test
    std::vector<std::uint8_t> part(set.size(), 0);
    for (UserIndex u = 0; u < per_user_positions.size(); ++u) {
        auto positions = per_user_positions[u];
        if (positions.empty()) {
            continue;
        }
        Rng rng(derive_seed(seed, u));
        shuffle(positions, rng);
        const auto k = positions.size();
        const auto n_test = k * 2 / 10;
        const auto n_valid = k / 10;
        for (std::size_t r = 0; r < n_test; ++r) {
            part[positions[r]] = 2;
        }
        for (std::size_t r = n_test; r < n_test + n_valid; ++r) {
            part[positions[r]] = 1;
        }
    }

    SplitSets out;
    for (auto* s : {&out.train, &out.valid, &out.test}) {
        s->num_users = set.num_users;
        s->num_items = set.num_items;
        s->user_ids = set.user_ids;
        s->item_ids = set.item_ids;
    }
    for (std::size_t k = 0; k < set.size(); ++k) {
        auto& dst = part[k] == 0 ? out.train : (part[k] == 1 ? out.valid : out.test);
        dst.interactions.push_back(set.interactions[k]);
    }
    return out;
}

struct NoisySet {
    InteractionSet set;
    NoiseLedger ledger;
};

/// Appends round(rate * |train|) uniformly drawn pairs that are neither in
/// `train` nor in `exclude` (pass the full data set so held-out positives are
/// never turned into noise).
inline NoisySet inject_noise(const InteractionSet& train, double rate, std::uint64_t seed,
                             const InteractionSet* exclude = nullptr)
{
    if (!(rate >= 0.0 && rate <= 1.0)) {
        throw InvalidArgument("inject_noise: rate must lie in [0, 1]");
    }
    const auto count = static_cast<std::size_t>(std::llround(rate * static_cast<double>(train.size())));

    PairSet taken(train.interactions);
    if (exclude) {
        for (const auto& x : exclude->interactions) {
            taken.insert(x);
        }
    }
    const auto capacity = train.num_users * train.num_items;
    if (capacity < taken.size() + count) {
        throw CapacityError("inject_noise: only " + std::to_string(capacity - taken.size())
                            + " unobserved pairs for " + std::to_string(count) + " injections");
    }

    NoisySet out{train, {{}, rate, seed}};
    Rng rng(derive_seed(seed, 0x6e6f697365ULL));
    const auto free_pairs = capacity - taken.size();
    if (count * 2 > free_pairs) {
        // Dense regime: enumerate the free pairs and draw without replacement.
        std::vector<Interaction> candidates;
        candidates.reserve(free_pairs);
        for (UserIndex u = 0; u < train.num_users; ++u) {
            for (ItemIndex i = 0; i < train.num_items; ++i) {
                if (!taken.contains(u, i)) {
                    candidates.push_back({u, i});
                }
            }
        }
        for (std::size_t r = 0; r < count; ++r) {
            const auto j = r + static_cast<std::size_t>(uniform_index(rng, candidates.size() - r));
            std::swap(candidates[r], candidates[j]);
            out.ledger.injected.push_back(candidates[r]);
        }
    } else {
        while (out.ledger.injected.size() < count) {
            const Interaction x{static_cast<UserIndex>(uniform_index(rng, train.num_users)),
                                static_cast<ItemIndex>(uniform_index(rng, train.num_items))};
            if (taken.insert(x)) {
                out.ledger.injected.push_back(x);
            }
        }
    }
    out.set.interactions.insert(out.set.interactions.end(), out.ledger.injected.begin(), out.ledger.injected.end());
    return out;
}

/// min(n, |set|) interactions drawn uniformly without replacement.
inline std::vector<Interaction> sample_interactions(const std::vector<Interaction>& xs, std::size_t n,
                                                    std::uint64_t seed)
{
    if (n == 0) {
        throw InvalidArgument("sample_interactions: n must be positive");
    }
    std::vector<Interaction> pool = xs;
    const auto take = std::min(n, pool.size());
    Rng rng(derive_seed(seed, 0x73616d70ULL));
    for (std::size_t r = 0; r < take; ++r) {
        const auto j = r + static_cast<std::size_t>(uniform_index(rng, pool.size() - r));
        std::swap(pool[r], pool[j]);
    }
    pool.resize(take);
    return pool;
}

inline std::vector<Interaction> sample_interactions(const InteractionSet& set, std::size_t n, std::uint64_t seed)
{
    return sample_interactions(set.interactions, n, seed);
}

/// Interactions of `set` whose pair is not in `removed`, in set order.
inline InteractionSet without(const InteractionSet& set, const PairSet& removed)
{
    InteractionSet out = set;
    out.interactions.clear();
    for (const auto& x : set.interactions) {
        if (!removed.contains(x)) {
            out.interactions.push_back(x);
        }
    }
    return out;
}

/// Planted block structure: users and items are split into `blocks` groups and
/// every user interacts only with items of its own group. Per-user counts are
/// uniform in [min_per_user, max_per_user].
inline InteractionSet make_block_fixture(std::size_t users, std::size_t items, std::size_t blocks,
                                         std::size_t min_per_user, std::size_t max_per_user, std::uint64_t seed)
{
    if (blocks == 0 || users == 0 || items < blocks || min_per_user == 0 || min_per_user > max_per_user
        || max_per_user > items / blocks) {
        throw InvalidArgument("make_block_fixture: inconsistent sizes");
    }
    InteractionSet set;
    set.num_users = users;
    set.num_items = items;
    for (std::size_t u = 0; u < users; ++u) {
        set.user_ids.push_back("u" + std::to_string(u));
    }
    for (std::size_t i = 0; i < items; ++i) {
        set.item_ids.push_back("i" + std::to_string(i));
    }
    const auto block_items = items / blocks;
    Rng rng(derive_seed(seed, 0x626c6f636bULL));
    for (UserIndex u = 0; u < users; ++u) {
        const auto block = u % blocks;
        std::vector<ItemIndex> pool(block_items);
        for (std::size_t k = 0; k < block_items; ++k) {
            pool[k] = static_cast<ItemIndex>(block * block_items + k);
        }
        shuffle(pool, rng);
        const auto k = min_per_user + uniform_index(rng, max_per_user - min_per_user + 1);
        for (std::size_t r = 0; r < k; ++r) {
            set.interactions.push_back({u, pool[r]});
        }
    }
    return set;
}

} // namespace ruleagent
