#pragma once

// Oracles, generators and fixtures shared by the unit tests and the
// acceptance binary.

#include "ruleagent/agent.hpp"
#include "ruleagent/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <unordered_set>
#include <vector>

namespace ruleagent::testing {

namespace fs = std::filesystem;

// ---- gradients -----------------------------------------------------------

/// ||g - numeric|| / max(||g||, ||numeric||) over every parameter, with
/// central differences of step h.
inline double finite_difference_error(const GmfParams& p, const GmfGradient& g,
                                      const std::function<double(const GmfParams&)>& loss, double h = 1e-6)
{
    auto q = p;
    double diff = 0.0;
    double na = 0.0;
    double nn = 0.0;
    const auto probe = [&](std::vector<double>& xs, const std::vector<double>& analytic) {
        for (std::size_t k = 0; k < xs.size(); ++k) {
            const double keep = xs[k];
            xs[k] = keep + h;
            const double up = loss(q);
            xs[k] = keep - h;
            const double down = loss(q);
            xs[k] = keep;
            const double numeric = (up - down) / (2.0 * h);
            diff += (numeric - analytic[k]) * (numeric - analytic[k]);
            na += analytic[k] * analytic[k];
            nn += numeric * numeric;
        }
    };
    probe(q.users.data(), g.users.data());
    probe(q.items.data(), g.items.data());
    probe(q.head, g.head);
    const double scale = std::max(std::sqrt(na), std::sqrt(nn));
    return scale == 0.0 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

// ---- metrics -------------------------------------------------------------

struct MicroInstance {
    GmfParams params;
    InteractionSet train;
    InteractionSet heldout;
};

inline InteractionSet empty_like(std::size_t users, std::size_t items)
{
    InteractionSet s;
    s.num_users = users;
    s.num_items = items;
    for (std::size_t u = 0; u < users; ++u) {
        s.user_ids.push_back("u" + std::to_string(u));
    }
    for (std::size_t i = 0; i < items; ++i) {
        s.item_ids.push_back("i" + std::to_string(i));
    }
    return s;
}

/// <= 5 users, <= 10 items; scores are coarsely quantized so ties occur.
inline MicroInstance random_micro_instance(Rng& rng)
{
    const std::size_t nu = 1 + uniform_index(rng, 5);
    const std::size_t ni = 2 + uniform_index(rng, 9);
    MicroInstance m;
    m.params = init_params(nu, ni, 2, rng());
    for (auto& x : m.params.users.data()) {
        x = static_cast<double>(uniform_index(rng, 5)) - 2.0;
    }
    for (auto& x : m.params.items.data()) {
        x = static_cast<double>(uniform_index(rng, 5)) - 2.0;
    }
    m.train = empty_like(nu, ni);
    m.heldout = empty_like(nu, ni);
    bool any_heldout = false;
    for (UserIndex u = 0; u < nu; ++u) {
        for (ItemIndex i = 0; i < ni; ++i) {
            const auto r = uniform_index(rng, 6);
            if (r == 0) {
                m.train.interactions.push_back({u, i});
            } else if (r == 1) {
                m.heldout.interactions.push_back({u, i});
                any_heldout = true;
            }
        }
    }
    if (!any_heldout) {
        m.heldout.interactions.push_back({0, static_cast<ItemIndex>(ni - 1)});
        std::erase(m.train.interactions, Interaction{0, static_cast<ItemIndex>(ni - 1)});
    }
    return m;
}

/// Exhaustive ranker: every unseen item, sorted by (score desc, index asc).
inline EvalResult brute_force_evaluate(const GmfParams& p, const InteractionSet& heldout, const InteractionSet& train,
                                       const std::vector<std::size_t>& ks)
{
    EvalResult r;
    for (const auto k : ks) {
        r.at[k] = {};
    }
    for (UserIndex u = 0; u < heldout.num_users; ++u) {
        std::vector<ItemIndex> relevant;
        std::vector<ItemIndex> seen;
        for (const auto& x : heldout.interactions) {
            if (x.user == u) {
                relevant.push_back(x.item);
            }
        }
        for (const auto& x : train.interactions) {
            if (x.user == u) {
                seen.push_back(x.item);
            }
        }
        if (relevant.empty()) {
            continue;
        }
        std::vector<std::pair<double, ItemIndex>> ranked;
        for (ItemIndex i = 0; i < p.items.rows(); ++i) {
            if (std::find(seen.begin(), seen.end(), i) == seen.end()) {
                double s = 0.0;
                for (std::size_t d = 0; d < p.dim(); ++d) {
                    s += p.head[d] * p.users.row(u)[d] * p.items.row(i)[d];
                }
                ranked.push_back({-s, i});
            }
        }
        std::sort(ranked.begin(), ranked.end());
        for (const auto k : ks) {
            double hits = 0.0;
            double dcg = 0.0;
            for (std::size_t pos = 0; pos < std::min(k, ranked.size()); ++pos) {
                if (std::find(relevant.begin(), relevant.end(), ranked[pos].second) != relevant.end()) {
                    hits += 1.0;
                    dcg += 1.0 / std::log2(static_cast<double>(pos) + 2.0);
                }
            }
            double idcg = 0.0;
            for (std::size_t pos = 0; pos < std::min(k, relevant.size()); ++pos) {
                idcg += 1.0 / std::log2(static_cast<double>(pos) + 2.0);
            }
            r.at[k].recall += hits / static_cast<double>(relevant.size());
            r.at[k].ndcg += dcg / idcg;
        }
        ++r.users;
    }
    for (auto& [k, m] : r.at) {
        m.recall /= static_cast<double>(r.users);
        m.ndcg /= static_cast<double>(r.users);
    }
    return r;
}

// ---- rules ---------------------------------------------------------------

/// A ten-rule outline in the shape of a typical reflection answer, with the
/// thresholds the engine must recover.
inline constexpr const char* kOutline =
    "The updated denoising rules are:\n"
    "**Rule-1(Value-Related)**: Interactions with a large loss are the likeliest to be noise, so confidence "
    "falls as the loss grows.\n"
    "  **- Rule-1.1(Value Threshold)**: The noisy sample's loss value exceeds the 95th percentile threshold.\n"
    "    **- Rule-1.1.1(Multiple Exceedances)**: If a sample's loss exceeds the threshold three times across "
    "several trainings, it is classified as noisy.\n"
    "**Rule-2(Fluctuation-Related)**: Interactions whose loss swings strongly over time are treated as noisy.\n"
    "  **- Rule-2.1(High Variance)**: The loss shows high variance across consecutive periods.\n"
    "    **- Rule-2.1.1(Variance Threshold)**: If the variance exceeds a threshold 0.5 over the recorded "
    "intervals, the sample is flagged as noisy.\n"
    "  **- Rule-2.2(Oscillation)**: The loss alternates between extreme highs and lows with no steady trend.\n"
    "    **- Rule-2.2.1(Oscillation Threshold)**: If the loss value oscillates beyond set upper bound (0.8) and "
    "lower bound (0.06) 4 times, it is marked as noisy.\n"
    "**Rule-3(Outlier-Related)**: Interactions whose loss is an outlier against the rest of the data are "
    "treated as noisy.\n"
    "  **- Rule-3.1(Median Comparison)**: The loss value is far above or below the median loss of comparable "
    "interactions.\n";

inline bool outline_matches(const RuleTree& t, std::string& why)
{
    const std::vector<std::string> ids{"1", "1.1", "1.1.1", "2", "2.1", "2.1.1", "2.2", "2.2.1", "3", "3.1"};
    if (t.node_count() != 10 || t.ids() != ids) {
        why = "expected ids 1 .. 3.1, got " + std::to_string(t.node_count()) + " nodes";
        return false;
    }
    const auto expect = [&](const char* id, const Predicate& want) {
        if (!(t.find(id)->predicate == want)) {
            why += std::string("Rule-") + id + " predicate differs; ";
        }
    };
    expect("1.1", PercentileThreshold{0.95});
    expect("1.1.1", RepeatedExceedance{3, 0.95});
    expect("2.1.1", VarianceThreshold{0.5});
    expect("2.2.1", OscillationBounds{0.8, 0.06, 4});
    expect("3.1", MedianOutlier{3.0});
    for (const char* id : {"1", "2", "2.1", "2.2", "3"}) {
        if (is_executable(t.find(id)->predicate)) {
            why += std::string("Rule-") + id + " should be prose; ";
        }
    }
    if (t.find("1.1.1")->label != "Multiple Exceedances" || t.find("3")->label != "Outlier-Related") {
        why += "labels differ; ";
    }
    return why.empty();
}

inline std::string random_words(Rng& rng, std::size_t n)
{
    static const std::vector<std::string> words{"loss",   "signal", "drifts", "steady", "pattern", "sample",
                                                "unusual", "history", "user",  "item",   "behaviour", "rare",
                                                "shift",  "clicks", "early",  "late",   "sparse",  "dense"};
    std::string s;
    for (std::size_t k = 0; k < n; ++k) {
        if (k) {
            s += ' ';
        }
        s += words[uniform_index(rng, words.size())];
    }
    return s;
}

inline Predicate random_predicate(Rng& rng, double inherited_p)
{
    switch (uniform_index(rng, 6)) {
    case 0: return PercentileThreshold{static_cast<double>(500 + uniform_index(rng, 499)) / 1000.0};
    case 1: {
        const double p = uniform_index(rng, 2) ? inherited_p : static_cast<double>(50 + uniform_index(rng, 49)) / 100.0;
        return RepeatedExceedance{1 + uniform_index(rng, 6), p};
    }
    case 2: return VarianceThreshold{static_cast<double>(1 + uniform_index(rng, 2000)) / 1000.0};
    case 3: {
        const double lower = static_cast<double>(1 + uniform_index(rng, 50)) / 100.0;
        const double upper = lower + static_cast<double>(1 + uniform_index(rng, 100)) / 100.0;
        return OscillationBounds{upper, lower, 1 + uniform_index(rng, 6)};
    }
    case 4: return MedianOutlier{static_cast<double>(11 + uniform_index(rng, 40)) / 10.0};
    default: return Prose{random_words(rng, 2 + uniform_index(rng, 6)) + "."};
    }
}

inline RuleTree random_tree(Rng& rng)
{
    const auto grow = [&](const auto& self, std::size_t depth, double inherited_p) -> std::vector<RuleNode> {
        std::vector<RuleNode> nodes;
        const auto n = depth == 0 ? 1 + uniform_index(rng, 4) : uniform_index(rng, depth < 3 ? 3 : 1);
        for (std::size_t k = 0; k < n; ++k) {
            const auto pred = random_predicate(rng, inherited_p);
            const double child_p =
                std::holds_alternative<PercentileThreshold>(pred) ? std::get<PercentileThreshold>(pred).p : inherited_p;
            auto label = random_words(rng, 1 + uniform_index(rng, 2));
            label[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(label[0])));
            if (uniform_index(rng, 3) == 0) {
                label += "-" + std::to_string(uniform_index(rng, 100));
            }
            nodes.push_back(make_rule(label, describe(pred, inherited_p), self(self, depth + 1, child_p)));
        }
        return nodes;
    };
    RuleTree t;
    t.roots = grow(grow, 0, kDefaultPercentile);
    canonicalize(t);
    return t;
}

// ---- data ----------------------------------------------------------------

struct BlockData {
    InteractionSet full;
    SplitSets splits;
    InteractionSet noisy_train;
    NoiseLedger ledger;

    AgentData agent_data() const { return {noisy_train, splits.valid, splits.test}; }
};

inline InteractionSet block_fixture(std::size_t users, std::size_t items, std::size_t blocks, std::uint64_t seed)
{
    const auto per_block = items / blocks;
    return make_block_fixture(users, items, blocks, std::min<std::size_t>(20, per_block / 2),
                              std::min<std::size_t>(30, per_block), seed);
}

inline BlockData block_split(std::size_t users, std::size_t items, std::size_t blocks, double rate, std::uint64_t seed)
{
    BlockData d;
    d.full = block_fixture(users, items, blocks, seed);
    d.splits = split(d.full, seed);
    auto noisy = inject_noise(d.splits.train, rate, seed, &d.full);
    d.noisy_train = std::move(noisy.set);
    d.ledger = std::move(noisy.ledger);
    return d;
}

inline TrainConfig fixture_train_config(std::uint64_t seed = 1)
{
    // Library defaults except the batch: 512 leaves ~2 steps per epoch on a
    // ~1k-interaction fixture.
    TrainConfig c;
    c.batch_size = 128;
    c.seed = seed;
    return c;
}

inline nlohmann::json planning_script(const std::vector<char>& letters)
{
    nlohmann::json xs = nlohmann::json::array();
    for (const char c : letters) {
        xs.push_back(std::string("The next action is: ") + c + ". The reason for this decision is: scripted step "
                     + c + ".");
    }
    return {{"responses", xs}, {"cycle", true}};
}

inline std::string percentile_rule_response(int percent)
{
    return "The updated denoising rules are:\nRule-1(" + std::string(kInitialRuleLabel) + "): "
           + std::string(kInitialRuleText) + "\n  Rule-1.1(Value Threshold): The noisy sample's loss value exceeds the "
           + std::to_string(percent) + "th percentile threshold.";
}

struct DenoiseResult {
    double agent_recall = 0.0;
    double baseline_recall = 0.0;
};

/// Agent run (initialization map, percentile rule, three eraser cycles)
/// against a baseline trained on the noisy split for the same total epochs.
inline DenoiseResult denoising_trial(std::uint64_t seed)
{
    const auto data = block_split(50, 200, 5, 0.2, seed);
    const auto cfg = fixture_train_config(seed);
    AgentConfig a;
    a.max_actions = 8;
    a.reflection_sample_size = 1'000'000;
    a.eraser_epochs = 20;
    a.seed = seed;
    ScriptedBackend backend(BackendScript::from_json(
        {{"planning", planning_script({'b', 'a', 'c', 'd', 'c', 'd', 'c', 'd'})},
         {"rule_reflection", percentile_rule_response(80)},
         {"confidence_reflection", {{"policy", "rule_verdict"}}}}));
    Agent agent(data.agent_data(), cfg, a, backend);
    const auto report = agent.run();
    if (!report.complete) {
        throw Error("agent run incomplete: " + report.error);
    }

    auto base_cfg = cfg;
    base_cfg.epochs = cfg.epochs + 3 * a.eraser_epochs;
    auto base = TrainingState::fresh(data.noisy_train.num_users, data.noisy_train.num_items, base_cfg);
    train_bpr(base, data.noisy_train, base_cfg);
    const auto base_eval = evaluate(base.params, data.splits.test, data.noisy_train, {10});
    return {report.test->recall(10), base_eval.recall(10)};
}

// ---- agent harness -------------------------------------------------------

/// Evaluations performed by a run whose planner always picks d and whose
/// watched Recall@20 follows `sequence` (the last value repeats).
inline std::size_t evaluations_until_stop(const std::vector<double>& sequence, std::size_t max_actions)
{
    const auto data = block_split(12, 40, 2, 0.1, 3);
    auto cfg = fixture_train_config(3);
    cfg.epochs = 3;
    cfg.dim = 8;
    AgentConfig a;
    a.max_actions = max_actions;
    ScriptedBackend backend(BackendScript::from_json({{"planning", planning_script({'d'})}}));
    Agent agent(data.agent_data(), cfg, a, backend);
    std::size_t calls = 0;
    agent.set_evaluator([&](const GmfParams&) {
        EvalResult r;
        const double v = sequence.at(std::min(calls, sequence.size() - 1));
        r.at[10] = {v, v};
        r.at[20] = {v, v};
        r.users = 1;
        ++calls;
        return r;
    });
    agent.run();
    return calls;
}

// ---- fuzzing -------------------------------------------------------------

inline constexpr const char* kPlanSample =
    "The next action is: c. The reason for this decision is: flagged pairs still carry high loss.";
inline constexpr const char* kConfidenceSample =
    "The confidence score is 0.125. The explanation: the loss exceeded the threshold in most recorded epochs.";

inline std::string mutate(std::string s, Rng& rng)
{
    static const std::vector<std::string> tokens{"-1",  "2.5", "nan", "inf", "1e308", "-0",  "2",    "2.0000001",
                                                 "0x1", ".5",  "5.",  "1e-3", "e",    "..",  "Rule-0(", "Rule-1.0(",
                                                 "(",   ")",   ":",   "\n",  "\0",    "\xff", "Rule-", "Rule-1(x"};
    const auto ops = 1 + uniform_index(rng, 4);
    for (std::size_t k = 0; k < ops; ++k) {
        const auto pos = s.empty() ? 0 : uniform_index(rng, s.size() + 1);
        switch (uniform_index(rng, 7)) {
        case 0:
            if (!s.empty() && pos < s.size()) {
                s.erase(pos, 1 + uniform_index(rng, 5));
            }
            break;
        case 1: s.insert(pos, 1, static_cast<char>(uniform_index(rng, 256))); break;
        case 2:
            if (pos < s.size()) {
                s[pos] = static_cast<char>(uniform_index(rng, 256));
            }
            break;
        case 3: s.resize(pos); break;
        case 4: {
            const auto& t = tokens[uniform_index(rng, tokens.size())];
            s.insert(pos, t.c_str(), t.size());
            break;
        }
        case 5:
            if (pos < s.size()) {
                const auto len = std::min<std::size_t>(s.size() - pos, 1 + uniform_index(rng, 20));
                s.insert(pos, s.substr(pos, len));
            }
            break;
        default:
            for (auto& c : s) {
                if (uniform_index(rng, 4) == 0) {
                    c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
                }
            }
        }
    }
    return s;
}

struct FuzzStats {
    std::size_t parsed = 0;
    std::size_t rejected = 0;
    std::size_t other = 0;
    std::size_t out_of_range = 0;
};

/// n mutations of each of the three response formats.
inline FuzzStats fuzz_parsers(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    FuzzStats st;
    const auto attempt = [&](const std::function<void()>& f) {
        try {
            f();
            ++st.parsed;
        } catch (const ParseError&) {
            ++st.rejected;
        } catch (...) {
            ++st.other;
        }
    };
    for (std::size_t k = 0; k < n; ++k) {
        const auto plan = mutate(kPlanSample, rng);
        attempt([&] { parse_planning_response(plan); });
        const auto conf = mutate(kConfidenceSample, rng);
        attempt([&] {
            const auto u = parse_confidence_response(conf);
            if (!(u.score >= 0.0 && u.score <= 2.0)) {
                ++st.out_of_range;
            }
        });
        const auto rules = mutate(kOutline, rng);
        attempt([&] { parse_rules_response(rules); });
    }
    return st;
}

/// A confidence reflection fed n fuzzed answers leaves every score in [0, 2].
inline bool fuzzed_reflection_keeps_ranges(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    nlohmann::json answers = nlohmann::json::array();
    for (std::size_t k = 0; k < n; ++k) {
        // json needs valid UTF-8; keep the mutation ASCII.
        auto s = mutate(kConfidenceSample, rng);
        for (auto& c : s) {
            if (static_cast<unsigned char>(c) >= 0x80 || c == '\0') {
                c = '?';
            }
        }
        answers.push_back(s);
    }
    const auto data = block_split(12, 40, 2, 0.1, seed);
    auto cfg = fixture_train_config(seed);
    cfg.epochs = 3;
    cfg.dim = 8;
    AgentConfig a;
    a.reflection_sample_size = n;
    ScriptedBackend backend(BackendScript::from_json({{"planning", planning_script({'a'})},
                                                      {"confidence_reflection", {{"responses", answers}}}}));
    Agent agent(data.agent_data(), cfg, a, backend);
    agent.initialize();
    agent.reflect_confidence();
    agent.reflect_confidence();
    for (const auto& [key, e] : agent.memories().confidence.entries()) {
        if (!(e.score >= 0.0 && e.score <= 2.0)) {
            return false;
        }
    }
    for (const auto& np : agent.memories().confidence.noisy_set()) {
        if (!(np.weight >= 0.0 && np.weight <= 1.0)) {
            return false;
        }
    }
    return true;
}

// ---- processes and files -------------------------------------------------

inline fs::path scratch_dir(const std::string& name)
{
    const auto dir = fs::temp_directory_path() / ("ruleagent-test-" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

/// Runs the command line tool with `args`; stdout and stderr go to `log`.
inline int run_cli(const std::string& args, const fs::path& log)
{
    const std::string cmd = std::string(RULEAGENT_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

inline std::string read_bytes(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Run config for a fixture.tsv in `dir`, writing into dir/out.
inline nlohmann::json fixture_run_config(const fs::path& dir)
{
    return {{"dataset", (dir / "fixture.tsv").string()},
            {"output_dir", (dir / "out").string()},
            {"split_seed", 6},
            {"noise", {{"rate", 0.2}, {"seed", 6}}},
            {"train", {{"epochs", 100}, {"batch_size", 128}, {"learning_rate", 0.001}, {"dim", 64}, {"seed", 6}}},
            {"agent", {{"eraser_epochs", 20}}}};
}

} // namespace ruleagent::testing
