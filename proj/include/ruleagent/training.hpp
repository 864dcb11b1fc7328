#pragma once

#include "ruleagent/dataset.hpp"
#include "ruleagent/error.hpp"
#include "ruleagent/model.hpp"
#include "ruleagent/random.hpp"
#include "ruleagent/stats.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace ruleagent {

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 512;
    double learning_rate = 0.001;
    double alpha = 0.01;
    std::size_t negatives_per_positive = 1;
    std::uint64_t seed = 0;
    std::size_t trace_every = 1;
    std::size_t dim = 64;

    void validate() const
    {
        if (epochs == 0 || batch_size == 0 || negatives_per_positive == 0 || trace_every == 0 || dim == 0) {
            throw InvalidArgument("train config: epochs, batch_size, negatives_per_positive, trace_every and dim "
                                  "must be positive");
        }
        if (!(alpha >= 0.0) || !(learning_rate > 0.0)) {
            throw InvalidArgument("train config: alpha must be >= 0 and learning_rate > 0");
        }
    }
};

struct EpochReport {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double wall_seconds = 0.0;
};

inline nlohmann::json to_json(const EpochReport& r)
{
    return {{"epoch", r.epoch}, {"mean_loss", r.mean_loss}, {"wall_seconds", r.wall_seconds}};
}

/// Parameters, optimizer state and the global epoch counter of one model.
struct TrainingState {
    GmfParams params;
    AdamState adam;
    std::size_t epochs_done = 0;

    static TrainingState fresh(std::size_t num_users, std::size_t num_items, const TrainConfig& cfg)
    {
        auto params = init_params(num_users, num_items, cfg.dim, cfg.seed);
        auto adam = AdamState::for_params(params, cfg.learning_rate);
        return {std::move(params), std::move(adam), 0};
    }
};

namespace detail {

/// Item drawn uniformly among those not in `positives` (sorted).
inline ItemIndex sample_unobserved(Rng& rng, const std::vector<ItemIndex>& positives, std::size_t num_items)
{
    if (positives.size() >= num_items) {
        throw CapacityError("user has interacted with every item; no negative available");
    }
    if (positives.size() * 2 < num_items) {
        for (;;) {
            const auto j = static_cast<ItemIndex>(uniform_index(rng, num_items));
            if (!std::binary_search(positives.begin(), positives.end(), j)) {
                return j;
            }
        }
    }
    // Dense user: pick the r-th free item directly.
    auto r = uniform_index(rng, num_items - positives.size());
    ItemIndex j = 0;
    auto it = positives.begin();
    for (;; ++j) {
        while (it != positives.end() && *it < j) {
            ++it;
        }
        if (it != positives.end() && *it == j) {
            continue;
        }
        if (r == 0) {
            return j;
        }
        --r;
    }
}

inline std::vector<std::vector<ItemIndex>> sorted_items_by_user(const InteractionSet& set)
{
    auto by_user = items_by_user(set);
    for (auto& v : by_user) {
        std::sort(v.begin(), v.end());
    }
    return by_user;
}

} // namespace detail

/// Per-interaction BPR loss history. Each interaction is scored against one
/// evaluation negative fixed when the trace is created, so values recorded at
/// different epochs are comparable.
struct LossTrace {
    std::vector<Interaction> interactions;
    std::vector<ItemIndex> eval_negatives;
    std::vector<std::size_t> epochs;
    std::vector<std::vector<double>> columns; // one column per recorded epoch

    static LossTrace create(const InteractionSet& set, std::uint64_t seed)
    {
        LossTrace t;
        t.interactions = set.interactions;
        t.eval_negatives.reserve(set.size());
        const auto positives = detail::sorted_items_by_user(set);
        Rng rng(derive_seed(seed, 0x6576616cULL));
        for (const auto& x : set.interactions) {
            t.eval_negatives.push_back(detail::sample_unobserved(rng, positives.at(x.user), set.num_items));
        }
        return t;
    }

    std::size_t size() const noexcept { return interactions.size(); }

    std::vector<double> losses(const GmfParams& params) const
    {
        std::vector<double> out;
        out.reserve(interactions.size());
        for (std::size_t k = 0; k < interactions.size(); ++k) {
            out.push_back(bpr_loss(params, interactions[k].user, interactions[k].item, eval_negatives[k]));
        }
        return out;
    }

    void record(const GmfParams& params, std::size_t epoch)
    {
        if (!epochs.empty() && epoch <= epochs.back()) {
            throw InvalidArgument("loss trace: epochs must be strictly increasing");
        }
        epochs.push_back(epoch);
        columns.push_back(losses(params));
    }

    /// History of interaction k across recorded epochs.
    std::vector<double> history(std::size_t k) const
    {
        std::vector<double> out;
        out.reserve(columns.size());
        for (const auto& c : columns) {
            out.push_back(c.at(k));
        }
        return out;
    }

    const std::vector<double>& latest() const
    {
        if (columns.empty()) {
            throw InvalidArgument("loss trace has no recorded epochs");
        }
        return columns.back();
    }

    friend bool operator==(const LossTrace&, const LossTrace&) = default;
};

/// Losses of every interaction of `set` against its seeded evaluation negative.
inline std::vector<double> record_losses(const GmfParams& params, const InteractionSet& set, std::uint64_t seed)
{
    return LossTrace::create(set, seed).losses(params);
}

struct TrainResult {
    std::vector<EpochReport> reports;
    double wall_seconds = 0.0;
};

/// A noisy positive scheduled for unlearning with weight w in [0, 1].
struct NoisyPair {
    UserIndex user = 0;
    ItemIndex item = 0;
    double weight = 1.0;

    friend bool operator==(const NoisyPair&, const NoisyPair&) = default;
};

namespace detail {

inline bool record_at(std::size_t e, std::size_t total, std::size_t every) { return (total - e) % every == 0; }

struct EraserInput {
    const std::vector<NoisyPair>* noisy = nullptr;
    const InteractionSet* observed = nullptr; // pre-filter positives, fallback for users without clean ones
    std::vector<std::string>* log = nullptr;
};

// Shared epoch loop. Without an eraser input this is plain BPR training.
inline TrainResult run_epochs(TrainingState& state, const InteractionSet& train, const TrainConfig& cfg,
                              LossTrace* trace, const EraserInput* eraser)
{
    cfg.validate();
    if (train.empty()) {
        throw EmptyDatasetError("training set is empty");
    }
    state.adam.learning_rate = cfg.learning_rate;
    const auto positives = sorted_items_by_user(train);

    std::vector<std::vector<ItemIndex>> eraser_candidates;
    std::vector<bool> fallback_logged;
    if (eraser && !eraser->noisy->empty()) {
        eraser_candidates = items_by_user(train);
        fallback_logged.assign(train.num_users, false);
        const auto observed = items_by_user(*eraser->observed);
        for (const auto& np : *eraser->noisy) {
            if (np.user >= train.num_users || !(np.weight >= 0.0 && np.weight <= 1.0)) {
                throw InvalidArgument("noisy pair out of range");
            }
            if (eraser_candidates[np.user].empty()) {
                eraser_candidates[np.user] = observed.at(np.user);
                if (eraser->log && !fallback_logged[np.user]) {
                    eraser->log->push_back("eraser: user " + std::to_string(np.user)
                                           + " has no clean positives; pairing with pre-filter positives");
                    fallback_logged[np.user] = true;
                }
            }
        }
    }

    auto grad = GmfGradient::zeros_like(state.params);
    TrainResult result;
    const auto run_start = std::chrono::steady_clock::now();
    const std::size_t total = cfg.epochs;

    for (std::size_t e = 1; e <= total; ++e) {
        const auto epoch_start = std::chrono::steady_clock::now();
        const std::size_t global_epoch = state.epochs_done + 1;
        Rng rng(derive_seed(cfg.seed, global_epoch));

        std::vector<Triple> triples;
        triples.reserve(train.size() * cfg.negatives_per_positive);
        for (const auto& x : train.interactions) {
            for (std::size_t r = 0; r < cfg.negatives_per_positive; ++r) {
                triples.push_back({x.user, x.item, 0});
            }
        }
        shuffle(triples, rng);
        for (auto& t : triples) {
            t.other = sample_unobserved(rng, positives[t.user], train.num_items);
        }

        // Eraser triples come from their own stream so alpha = 0 leaves the
        // clean trajectory untouched.
        std::vector<Triple> erase;
        std::vector<double> weights;
        const double alpha_t = static_cast<double>(e) / static_cast<double>(total);
        if (!eraser_candidates.empty() && cfg.alpha > 0.0) {
            Rng erng(derive_seed(cfg.seed ^ 0x657261736572ULL, global_epoch));
            std::vector<std::size_t> order(eraser->noisy->size());
            for (std::size_t k = 0; k < order.size(); ++k) {
                order[k] = k;
            }
            shuffle(order, erng);
            for (const auto k : order) {
                const auto& np = (*eraser->noisy)[k];
                const auto& cands = eraser_candidates[np.user];
                erase.push_back({np.user, cands[uniform_index(erng, cands.size())], np.item});
                weights.push_back(np.weight);
            }
        }

        const std::size_t batches = (triples.size() + cfg.batch_size - 1) / cfg.batch_size;
        double loss_sum = 0.0;
        double eraser_sum = 0.0;
        for (std::size_t b = 0; b < batches; ++b) {
            const std::size_t lo = b * cfg.batch_size;
            const std::size_t hi = std::min(triples.size(), lo + cfg.batch_size);
            grad.clear();
            const double scale = 1.0 / static_cast<double>(hi - lo);
            for (std::size_t k = lo; k < hi; ++k) {
                const auto& t = triples[k];
                loss_sum += bpr_loss(state.params, t.user, t.pos, t.other);
                accumulate_bpr_grad(state.params, t, scale, grad);
            }
            if (!erase.empty()) {
                const std::size_t elo = b * erase.size() / batches;
                const std::size_t ehi = (b + 1) * erase.size() / batches;
                if (ehi > elo) {
                    const double escale = cfg.alpha / static_cast<double>(ehi - elo);
                    for (std::size_t k = elo; k < ehi; ++k) {
                        const auto& t = erase[k];
                        eraser_sum += eraser_term(state.params, t.user, t.pos, t.other, alpha_t, weights[k]);
                        accumulate_eraser_grad(state.params, t, alpha_t, weights[k], escale, grad);
                    }
                }
            }
            adam_step(state.params, state.adam, grad);
        }

        state.epochs_done = global_epoch;
        double mean = loss_sum / static_cast<double>(triples.size());
        if (!erase.empty()) {
            mean += cfg.alpha * eraser_sum / static_cast<double>(erase.size());
        }
        if (!std::isfinite(mean)) {
            throw NumericError("training diverged at epoch " + std::to_string(global_epoch));
        }
        if (trace && record_at(e, total, cfg.trace_every)) {
            trace->record(state.params, global_epoch);
        }
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - epoch_start;
        result.reports.push_back({global_epoch, mean, dt.count()});
    }
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - run_start;
    result.wall_seconds = dt.count();
    return result;
}

} // namespace detail

/// Minibatch Adam on the BPR objective. Negatives are drawn per epoch,
/// uniformly over items the user has not interacted with in `train`.
/// Losses are appended to `trace` every `trace_every` epochs, always
/// including the last one.
inline TrainResult train_bpr(TrainingState& state, const InteractionSet& train, const TrainConfig& cfg,
                             LossTrace* trace = nullptr)
{
    return detail::run_epochs(state, train, cfg, trace, nullptr);
}

/// LossEraser continuation: `clean` is optimized with BPR while every noisy
/// pair (u, n, w), joined with a clean positive i of u, adds
/// alpha * -log sigmoid(f(u,i) - alpha_t * w * f(u,n)) with alpha_t = t / T.
/// `observed` is the pre-filter set; `trace` should cover it so every
/// interaction stays observable.
inline TrainResult train_loss_eraser(TrainingState& state, const InteractionSet& clean,
                                     const std::vector<NoisyPair>& noisy, const InteractionSet& observed,
                                     const TrainConfig& cfg, LossTrace* trace = nullptr,
                                     std::vector<std::string>* log = nullptr)
{
    const detail::EraserInput input{&noisy, &observed, log};
    return detail::run_epochs(state, clean, cfg, trace, &input);
}

/// Progressive reversal factor at eraser epoch t of T.
inline double progressive_alpha(std::size_t t, std::size_t total)
{
    if (total == 0 || t == 0 || t > total) {
        throw InvalidArgument("progressive_alpha: need 1 <= t <= T");
    }
    return static_cast<double>(t) / static_cast<double>(total);
}

/// Indices whose value is strictly above the nearest-rank percentile.
inline std::vector<std::size_t> static_percentile_filter(const std::vector<double>& values, double percentile)
{
    if (values.empty()) {
        throw InvalidArgument("static_percentile_filter: empty loss vector");
    }
    const double tau = nearest_rank_percentile(values, percentile);
    std::vector<std::size_t> flagged;
    for (std::size_t k = 0; k < values.size(); ++k) {
        if (values[k] > tau) {
            flagged.push_back(k);
        }
    }
    return flagged;
}

// Trace file (native little-endian):
//   magic "RATRACE1" | u64 N | u64 E
//   N x (u32 user, u32 item, u32 eval_negative)
//   E x u64 epoch
//   E columns of N f64 losses
inline void save_trace(const LossTrace& t, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    auto put = [&out](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
    out.write("RATRACE1", 8);
    put(static_cast<std::uint64_t>(t.size()));
    put(static_cast<std::uint64_t>(t.epochs.size()));
    for (std::size_t k = 0; k < t.size(); ++k) {
        put(static_cast<std::uint32_t>(t.interactions[k].user));
        put(static_cast<std::uint32_t>(t.interactions[k].item));
        put(static_cast<std::uint32_t>(t.eval_negatives[k]));
    }
    for (const auto e : t.epochs) {
        put(static_cast<std::uint64_t>(e));
    }
    for (const auto& c : t.columns) {
        out.write(reinterpret_cast<const char*>(c.data()), static_cast<std::streamsize>(c.size() * sizeof(double)));
    }
}

inline LossTrace load_trace(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open " + path.string());
    }
    auto get = [&](auto& v) {
        if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
            throw LoadError("truncated trace file " + path.string());
        }
    };
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, "RATRACE1", 8) != 0) {
        throw LoadError("not a trace file: " + path.string());
    }
    std::uint64_t n = 0;
    std::uint64_t e = 0;
    get(n);
    get(e);
    LossTrace t;
    t.interactions.resize(n);
    t.eval_negatives.resize(n);
    for (std::uint64_t k = 0; k < n; ++k) {
        std::uint32_t u = 0, i = 0, j = 0;
        get(u);
        get(i);
        get(j);
        t.interactions[k] = {u, i};
        t.eval_negatives[k] = j;
    }
    for (std::uint64_t k = 0; k < e; ++k) {
        std::uint64_t epoch = 0;
        get(epoch);
        t.epochs.push_back(epoch);
    }
    t.columns.assign(e, std::vector<double>(n));
    for (auto& c : t.columns) {
        if (!in.read(reinterpret_cast<char*>(c.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
            throw LoadError("truncated trace file " + path.string());
        }
    }
    return t;
}

inline void write_run_log(const std::vector<EpochReport>& reports, std::ostream& out)
{
    for (const auto& r : reports) {
        out << to_json(r).dump() << '\n';
    }
}

} // namespace ruleagent
