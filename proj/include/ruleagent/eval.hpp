#pragma once

#include "ruleagent/dataset.hpp"
#include "ruleagent/error.hpp"
#include "ruleagent/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

namespace ruleagent {

struct MetricPair {
    double recall = 0.0;
    double ndcg = 0.0;

    friend bool operator==(const MetricPair&, const MetricPair&) = default;
};

struct EvalResult {
    std::map<std::size_t, MetricPair> at; // keyed by K
    std::size_t users = 0;

    double recall(std::size_t k) const { return at.at(k).recall; }
    double ndcg(std::size_t k) const { return at.at(k).ndcg; }

    friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

inline nlohmann::json to_json(const EvalResult& r)
{
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, m] : r.at) {
        j["recall@" + std::to_string(k)] = m.recall;
        j["ndcg@" + std::to_string(k)] = m.ndcg;
    }
    j["users"] = r.users;
    return j;
}

inline EvalResult eval_from_json(const nlohmann::json& j)
{
    EvalResult r;
    for (const auto& [key, value] : j.items()) {
        if (key == "users") {
            r.users = value.get<std::size_t>();
        } else if (key.rfind("recall@", 0) == 0) {
            r.at[std::stoul(key.substr(7))].recall = value.get<double>();
        } else if (key.rfind("ndcg@", 0) == 0) {
            r.at[std::stoul(key.substr(5))].ndcg = value.get<double>();
        }
    }
    return r;
}

/// Orders `scores` descending with ties on the smaller index and returns the
/// first k indices not in `exclude`.
inline std::vector<ItemIndex> top_k(const std::vector<double>& scores, const std::unordered_set<ItemIndex>& exclude,
                                    std::size_t k)
{
    if (k == 0) {
        throw InvalidArgument("top_k: k must be positive");
    }
    std::vector<ItemIndex> candidates;
    candidates.reserve(scores.size());
    for (ItemIndex i = 0; i < scores.size(); ++i) {
        if (!exclude.count(i)) {
            candidates.push_back(i);
        }
    }
    const auto better = [&](ItemIndex a, ItemIndex b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
    const auto take = std::min(k, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(),
                      better);
    candidates.resize(take);
    return candidates;
}

inline std::vector<ItemIndex> rank_items(const GmfParams& params, UserIndex u,
                                         const std::unordered_set<ItemIndex>& exclude, std::size_t k)
{
    std::vector<double> scores(params.items.rows());
    for (ItemIndex i = 0; i < scores.size(); ++i) {
        scores[i] = score(params, u, i);
    }
    return top_k(scores, exclude, k);
}

inline double recall_at_k(const std::vector<ItemIndex>& ranked, const std::unordered_set<ItemIndex>& relevant,
                          std::size_t k)
{
    if (relevant.empty()) {
        throw InvalidArgument("recall_at_k: empty relevant set");
    }
    std::size_t hits = 0;
    for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
        hits += relevant.count(ranked[r]);
    }
    return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

inline double ndcg_at_k(const std::vector<ItemIndex>& ranked, const std::unordered_set<ItemIndex>& relevant,
                        std::size_t k)
{
    if (relevant.empty()) {
        throw InvalidArgument("ndcg_at_k: empty relevant set");
    }
    double dcg = 0.0;
    for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
        if (relevant.count(ranked[r])) {
            dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
        }
    }
    double idcg = 0.0;
    for (std::size_t r = 0; r < std::min(k, relevant.size()); ++r) {
        idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    }
    return dcg / idcg;
}

/// Full-catalog ranking per held-out user with training positives excluded;
/// metrics averaged over users that have at least one held-out item.
inline EvalResult evaluate(const GmfParams& params, const InteractionSet& heldout, const InteractionSet& train,
                           const std::vector<std::size_t>& ks)
{
    if (ks.empty()) {
        throw InvalidArgument("evaluate: no cutoffs given");
    }
    const auto max_k = *std::max_element(ks.begin(), ks.end());
    std::vector<std::unordered_set<ItemIndex>> relevant(heldout.num_users);
    for (const auto& x : heldout.interactions) {
        relevant.at(x.user).insert(x.item);
    }
    std::vector<std::unordered_set<ItemIndex>> seen(train.num_users);
    for (const auto& x : train.interactions) {
        seen.at(x.user).insert(x.item);
    }

    EvalResult result;
    for (const auto k : ks) {
        result.at[k] = {};
    }
    static const std::unordered_set<ItemIndex> none;
    for (UserIndex u = 0; u < relevant.size(); ++u) {
        if (relevant[u].empty()) {
            continue;
        }
        const auto ranked = rank_items(params, u, u < seen.size() ? seen[u] : none, max_k);
        for (const auto k : ks) {
            auto& m = result.at[k];
            m.recall += recall_at_k(ranked, relevant[u], k);
            m.ndcg += ndcg_at_k(ranked, relevant[u], k);
        }
        ++result.users;
    }
    if (result.users == 0) {
        throw EmptyEvaluationError("evaluate: no user has a held-out item");
    }
    for (auto& [k, m] : result.at) {
        m.recall /= static_cast<double>(result.users);
        m.ndcg /= static_cast<double>(result.users);
    }
    return result;
}

} // namespace ruleagent
