#pragma once

#include "ruleagent/dataset.hpp"
#include "ruleagent/error.hpp"
#include "ruleagent/eval.hpp"
#include "ruleagent/llm.hpp"
#include "ruleagent/memory.hpp"
#include "ruleagent/model.hpp"
#include "ruleagent/random.hpp"
#include "ruleagent/rules.hpp"
#include "ruleagent/stats.hpp"
#include "ruleagent/training.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <functional>
#include <future>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ruleagent {

inline constexpr std::string_view kDefaultProfile =
    "You are an expert in data denoising for recommender systems. You improve a recommendation model by "
    "finding noisy user-item interactions in its implicit-feedback training data. You score every interaction "
    "with a confidence between 0 and 2 and maintain a hierarchy of denoising rules over the training loss "
    "history. Interactions with low confidence are unlearned and kept out of training.";

inline constexpr std::string_view kInitialRuleLabel = "Value-Related";
inline constexpr std::string_view kInitialRuleText =
    "The confidence of the interaction data is related to the loss value of the interaction data, and the one "
    "with a large loss is more likely to be a noisy sample.";

inline RuleTree initial_rules()
{
    RuleTree t;
    t.roots.push_back(make_rule(std::string(kInitialRuleLabel), std::string(kInitialRuleText)));
    canonicalize(t);
    return t;
}

struct AgentConfig {
    std::size_t max_actions = 30;           // plannable actions, Initialization excluded
    std::size_t decline_window = 5;
    std::size_t reflection_sample_size = 1000;
    std::size_t eraser_epochs = 20;
    std::size_t parallel_reflections = 4;
    std::uint64_t seed = 0;
    std::string profile_text = std::string(kDefaultProfile);
    std::size_t history_actions = 20;       // action records shown to the planner
    std::size_t trace_tail = 50;            // loss values shown per interaction
    std::size_t decline_k = 20;             // Recall@K watched for termination
    std::vector<std::size_t> eval_ks{10, 20};
    std::string model = "gpt-4o-mini";
    double temperature = 0.0;
    std::size_t max_tokens = 1024;

    void validate() const
    {
        if (max_actions < 1 || decline_window < 1 || reflection_sample_size < 1) {
            throw ConfigError("agent: max_actions, decline_window and reflection_sample_size must be >= 1");
        }
        if (eraser_epochs < 1) {
            throw ConfigError("agent: eraser_epochs must be >= 1");
        }
        if (parallel_reflections < 1) {
            throw ConfigError("agent: parallel_reflections must be >= 1");
        }
        if (std::find(eval_ks.begin(), eval_ks.end(), decline_k) == eval_ks.end()) {
            throw ConfigError("agent: decline_k must be one of eval_ks");
        }
    }
};

// ---- response parsing --------------------------------------------------

struct PlanDecision {
    ActionKind kind = ActionKind::ModelEvaluation;
    std::string reason;

    friend bool operator==(const PlanDecision&, const PlanDecision&) = default;
};

struct ConfidenceUpdate {
    double score = 1.0;
    std::string explanation;
};

namespace detail {

inline std::size_t ifind(std::string_view text, std::string_view needle, std::size_t from = 0)
{
    if (needle.size() > text.size()) {
        return std::string_view::npos;
    }
    for (std::size_t k = from; k + needle.size() <= text.size(); ++k) {
        bool match = true;
        for (std::size_t m = 0; m < needle.size(); ++m) {
            if (std::tolower(static_cast<unsigned char>(text[k + m]))
                != std::tolower(static_cast<unsigned char>(needle[m]))) {
                match = false;
                break;
            }
        }
        if (match) {
            return k;
        }
    }
    return std::string_view::npos;
}

/// Single-line text: whitespace runs collapse to one space, ends trimmed.
inline std::string one_line(std::string_view s)
{
    std::string out;
    out.reserve(s.size());
    bool space = false;
    for (const char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            space = !out.empty();
        } else {
            if (space) {
                out.push_back(' ');
                space = false;
            }
            out.push_back(c);
        }
    }
    return out;
}

inline std::string strip_final_period(std::string s)
{
    if (!s.empty() && s.back() == '.') {
        s.pop_back();
    }
    return s;
}

inline bool skippable_markup(char c)
{
    return std::isspace(static_cast<unsigned char>(c)) || c == '*' || c == '_' || c == '`' || c == '<' || c == '"'
           || c == '\'';
}

} // namespace detail

inline constexpr std::string_view kPlanMarker = "The next action is:";
inline constexpr std::string_view kPlanReasonMarker = "The reason for this decision is:";
inline constexpr std::string_view kScoreMarker = "The confidence score is";
inline constexpr std::string_view kExplanationMarker = "The explanation:";
inline constexpr std::string_view kRulesMarker = "The updated denoising rules are:";

/// "The next action is: <a-d>. The reason for this decision is: <text>".
/// Case-insensitive markers; light markdown around the letter is tolerated.
inline PlanDecision parse_planning_response(std::string_view text)
{
    const auto at = detail::ifind(text, kPlanMarker);
    if (at == std::string_view::npos) {
        throw ParseError("planning response lacks '" + std::string(kPlanMarker) + "'");
    }
    auto pos = at + kPlanMarker.size();
    while (pos < text.size() && detail::skippable_markup(text[pos])) {
        ++pos;
    }
    if (pos >= text.size()) {
        throw ParseError("planning response: missing action letter", 0, pos);
    }
    const auto kind = action_from_letter(text[pos]);
    if (!kind || (pos + 1 < text.size() && std::isalnum(static_cast<unsigned char>(text[pos + 1])))) {
        throw ParseError("planning response: action must be one of a, b, c, d", 0, pos);
    }
    const auto why = detail::ifind(text, kPlanReasonMarker, pos + 1);
    if (why == std::string_view::npos) {
        throw ParseError("planning response lacks '" + std::string(kPlanReasonMarker) + "'", 0, pos + 1);
    }
    auto reason = detail::strip_final_period(detail::one_line(text.substr(why + kPlanReasonMarker.size())));
    if (reason.empty()) {
        throw ParseError("planning response: empty reason", 0, why);
    }
    return {*kind, std::move(reason)};
}

/// "The confidence score is <s>. The explanation: <text>" with s in [0, 2].
inline ConfidenceUpdate parse_confidence_response(std::string_view text)
{
    const auto at = detail::ifind(text, kScoreMarker);
    if (at == std::string_view::npos) {
        throw ParseError("confidence response lacks '" + std::string(kScoreMarker) + "'");
    }
    auto pos = at + kScoreMarker.size();
    while (pos < text.size() && detail::skippable_markup(text[pos])) {
        ++pos;
    }
    double score = 0.0;
    const auto* first = text.data() + pos;
    const auto* last = text.data() + text.size();
    const auto [end, ec] = std::from_chars(first, last, score, std::chars_format::general);
    if (ec != std::errc() || end == first) {
        throw ParseError("confidence response: score is not a number", 0, pos);
    }
    if (!(score >= kMinConfidence && score <= kMaxConfidence)) {
        throw ParseError("confidence response: score outside [0, 2]", 0, pos);
    }
    const auto expl = detail::ifind(text, kExplanationMarker, static_cast<std::size_t>(end - text.data()));
    if (expl == std::string_view::npos) {
        throw ParseError("confidence response lacks '" + std::string(kExplanationMarker) + "'");
    }
    for (auto k = static_cast<std::size_t>(end - text.data()); k < expl; ++k) {
        if (!detail::skippable_markup(text[k]) && text[k] != '.' && text[k] != '>') {
            throw ParseError("confidence response: unexpected text after the score", 0, k);
        }
    }
    auto explanation = detail::strip_final_period(detail::one_line(text.substr(expl + kExplanationMarker.size())));
    if (explanation.empty()) {
        throw ParseError("confidence response: empty explanation", 0, expl);
    }
    return {score, std::move(explanation)};
}

/// Rule outline following "The updated denoising rules are:".
inline RuleTree parse_rules_response(std::string_view text)
{
    const auto at = detail::ifind(text, kRulesMarker);
    if (at == std::string_view::npos) {
        throw ParseError("rule response lacks '" + std::string(kRulesMarker) + "'");
    }
    auto tree = parse_rule_text(text.substr(at + kRulesMarker.size()));
    if (tree.empty()) {
        throw ParseError("rule response contains no rules");
    }
    return tree;
}

// ---- prompt rendering --------------------------------------------------

namespace detail {

inline std::string fmt(double v, const char* f = "%.4f")
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

/// Shortest text that reads back as the same double.
inline std::string shortest(double v)
{
    char buf[64];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ec == std::errc() ? end : buf);
}

inline std::string render_entry(const ConfidenceEntry& e)
{
    return "(user " + std::to_string(e.user) + ", item " + std::to_string(e.item) + "): score " + fmt(e.score)
           + "; reason: " + e.reason;
}

inline std::string render_eval(const EvalResult& r)
{
    std::string out;
    for (const auto& [k, m] : r.at) {
        if (!out.empty()) {
            out += ", ";
        }
        out += "Recall@" + std::to_string(k) + " " + fmt(m.recall) + ", NDCG@" + std::to_string(k) + " "
               + fmt(m.ndcg);
    }
    return out;
}

inline std::string render_action(const ActionRecord& r)
{
    std::string out = "Action " + std::to_string(r.index) + ": " + std::string(action_name(r.kind));
    if (const auto letter = action_letter(r.kind)) {
        out += " (" + std::string(1, *letter) + ")";
    }
    out += ". Reason: " + r.reason;
    if (r.eval_outcome) {
        out += " Validation outcome: " + render_eval(*r.eval_outcome) + ".";
    }
    return out;
}

inline std::string render_losses(std::span<const double> xs, std::size_t tail)
{
    std::string out = "[";
    const auto from = xs.size() > tail ? xs.size() - tail : 0;
    if (from > 0) {
        out += "... ";
    }
    for (auto k = from; k < xs.size(); ++k) {
        out += fmt(xs[k]);
        if (k + 1 < xs.size()) {
            out += ", ";
        }
    }
    return out + "]";
}

inline std::string rules_block(const RuleTree& t)
{
    return t.empty() ? std::string("(no rules)\n") : serialize(t);
}

} // namespace detail

inline std::string planning_prompt(const std::vector<ConfidenceEntry>& sample, std::size_t confidence_total,
                                   std::size_t noisy_total, const RuleTree& rules,
                                   const std::vector<ActionRecord>& history, std::size_t history_total)
{
    std::string p = "Decide the next step by weighing three planning paths.\n\n";
    p += "1. Confidence-based path. Sampled confidence memory (" + std::to_string(sample.size()) + " of "
         + std::to_string(confidence_total) + " entries; " + std::to_string(noisy_total)
         + " entries are currently below 1 and count as noisy):\n";
    for (const auto& e : sample) {
        p += detail::render_entry(e) + "\n";
    }
    p += "Compare these scores and reasons with the training results and decide what to do next.\n\n";
    p += "2. Rule-based path. Current denoising rules (revision " + std::to_string(rules.revision) + "):\n";
    p += detail::rules_block(rules);
    p += "Check the training results against these rules and decide what to do next.\n\n";
    p += "3. Action-history path. Most recent actions (" + std::to_string(history.size()) + " of "
         + std::to_string(history_total) + "):\n";
    for (const auto& r : history) {
        p += detail::render_action(r) + "\n";
    }
    p += "Use past actions and their outcomes to decide what to do next.\n\n";
    p += "Available actions:\n"
         "a. Confidence Reflection: re-score sampled interactions and revise their explanations.\n"
         "b. Rule Reflection: revise the hierarchical denoising rules.\n"
         "c. LossEraser Training: unlearn the interactions the confidence memory marks as noisy and continue "
         "training on the rest.\n"
         "d. Model Evaluation: measure the current model on the validation split.\n\n";
    p += "Reconcile the three paths and answer strictly in this format:\n";
    p += std::string(kPlanMarker) + " <a/b/c/d>. " + std::string(kPlanReasonMarker) + " <your explanation>.";
    return p;
}

inline std::string confidence_prompt(const RuleTree& rules, const ConfidenceEntry& prior,
                                     std::span<const double> history, std::string_view verdict, std::size_t tail)
{
    std::string p = "Update the confidence score of one interaction (0 to 2: below 1 means noisy, 1 or above "
                    "means clean) and explain the new score.\n";
    p += "Denoising rules:\n" + detail::rules_block(rules);
    p += "User index: " + std::to_string(prior.user) + ". Item index: " + std::to_string(prior.item) + ".\n";
    p += "Historical loss: " + detail::render_losses(history, tail) + "\n";
    p += "Rule engine verdict: " + std::string(verdict) + "\n";
    p += "Previous assessment: score " + detail::shortest(prior.score) + ". Explanation: " + prior.reason + "\n";
    p += "Weigh the previous assessment against the rules and the loss history, then answer strictly in this "
         "format:\n";
    p += std::string(kScoreMarker) + " <0-2>. " + std::string(kExplanationMarker) + " <your explanation>.";
    return p;
}

inline std::string rule_reflection_prompt(const RuleTree& rules, const std::vector<ConfidenceEntry>& sample,
                                          std::size_t confidence_total, std::string_view reason)
{
    std::string p = "Current denoising rules (revision " + std::to_string(rules.revision) + "):\n";
    p += detail::rules_block(rules);
    p += "Sampled confidence memory (" + std::to_string(sample.size()) + " of " + std::to_string(confidence_total)
         + " entries):\n";
    for (const auto& e : sample) {
        p += detail::render_entry(e) + "\n";
    }
    p += "Reason given for this rule update: " + std::string(reason) + "\n\n";
    p += "Steps:\n"
         "1. From the scores and reasons, decide which interactions look noisy and summarise why.\n"
         "2. Compare that summary with the current rules and revise them. Keep the rules hierarchical with "
         "labelled identifiers such as Rule-1(Label), Rule-1.1(Label), Rule-1.1.1(Label), Rule-2(Label).\n"
         "3. Merge similar rules so that none is redundant.\n"
         "4. Output the revised rules, one per line, strictly in this format:\n";
    p += std::string(kRulesMarker) + "\nRule-1(<label>): <description>\n  Rule-1.1(<label>): <description>";
    return p;
}

inline constexpr std::string_view kRepromptSuffix =
    "\n\nYour previous reply did not follow the required response format. Reply again using exactly the format "
    "given above.";

// ---- agent -------------------------------------------------------------

struct AgentData {
    InteractionSet train; // pre-filter training split, noise included
    InteractionSet valid;
    InteractionSet test;
};

struct Timing {
    double initialization = 0.0;
    double training = 0.0;
    double evaluation = 0.0;
    double reflection = 0.0;
    double planning = 0.0;
    double total = 0.0;
};

inline nlohmann::json to_json(const Timing& t)
{
    return {{"initialization_seconds", t.initialization}, {"training_seconds", t.training},
            {"evaluation_seconds", t.evaluation},         {"reflection_seconds", t.reflection},
            {"planning_seconds", t.planning},             {"total_seconds", t.total}};
}

struct RunReport {
    bool complete = false;
    std::string stop_reason; // "max_actions", "decline" or "error"
    std::string error;
    std::string rules_text;
    std::size_t rules_revision = 0;
    std::optional<EvalResult> test;
    std::vector<ActionRecord> actions;
    std::vector<ConfidenceEntry> confidence;
    std::size_t noisy_count = 0;
    std::vector<std::string> log;
    Timing timing;
};

/// Deterministic part of a report; timing is kept out so reruns compare equal.
inline nlohmann::json to_json(const RunReport& r, const InteractionSet* ids = nullptr)
{
    nlohmann::json actions = nlohmann::json::array();
    for (const auto& a : r.actions) {
        actions.push_back(to_json(a));
    }
    nlohmann::json confidence = nlohmann::json::array();
    for (const auto& e : r.confidence) {
        auto j = to_json(e);
        if (ids && e.user < ids->user_ids.size() && e.item < ids->item_ids.size()) {
            j["user_id"] = ids->user_ids[e.user];
            j["item_id"] = ids->item_ids[e.item];
        }
        confidence.push_back(std::move(j));
    }
    nlohmann::json j{{"format", "ruleagent.report"},
                     {"version", 1},
                     {"complete", r.complete},
                     {"stop_reason", r.stop_reason},
                     {"rules", r.rules_text},
                     {"rules_revision", r.rules_revision},
                     {"test", r.test ? to_json(*r.test) : nlohmann::json()},
                     {"actions", actions},
                     {"noisy_count", r.noisy_count},
                     {"confidence", confidence},
                     {"log", r.log}};
    if (!r.error.empty()) {
        j["error"] = r.error;
    }
    return j;
}

/// Scores the model; the default evaluates on the validation split.
using Evaluator = std::function<EvalResult(const GmfParams&)>;

class Agent {
public:
    Agent(AgentData data, TrainConfig train_cfg, AgentConfig cfg, Backend& backend)
        : data_(std::move(data)), train_cfg_(train_cfg), cfg_(std::move(cfg)), backend_(backend)
    {
        train_cfg_.validate();
        cfg_.validate();
        if (data_.train.empty()) {
            throw EmptyDatasetError("agent: training split is empty");
        }
        for (std::size_t k = 0; k < data_.train.interactions.size(); ++k) {
            trace_index_[pair_key(data_.train.interactions[k].user, data_.train.interactions[k].item)] = k;
        }
        evaluator_ = [this](const GmfParams& p) { return evaluate(p, data_.valid, data_.train, cfg_.eval_ks); };
    }

    void set_evaluator(Evaluator e) { evaluator_ = std::move(e); }

    const Memories& memories() const noexcept { return memories_; }
    const TrainingState& training() const
    {
        require_initialized();
        return *state_;
    }
    const LossTrace& traces() const noexcept { return traces_; }
    const std::vector<std::string>& log() const noexcept { return log_; }
    const AgentData& data() const noexcept { return data_; }
    const Timing& timing() const noexcept { return timing_; }
    bool initialized() const noexcept { return state_.has_value(); }

    /// Full BPR training on the train split, then the closed-form Rule-1
    /// map score = 2 * (1 - percentile_rank(final loss)) for every entry.
    void initialize()
    {
        const auto start = now();
        state_ = TrainingState::fresh(data_.train.num_users, data_.train.num_items, train_cfg_);
        traces_ = LossTrace::create(data_.train, train_cfg_.seed);
        train_bpr(*state_, data_.train, train_cfg_, &traces_);

        memories_ = {};
        memories_.rules.push(initial_rules(), "initialization");
        memories_.actions.append(ActionKind::Initialization,
                                 "Full training cycle on the training split; confidence seeded from Rule-1.");
        const auto& losses = traces_.latest();
        const auto ranks = percentile_ranks(losses);
        for (std::size_t k = 0; k < traces_.size(); ++k) {
            const auto& x = traces_.interactions[k];
            const double s = std::clamp(2.0 * (1.0 - ranks[k]), kMinConfidence, kMaxConfidence);
            memories_.confidence.set({x.user, x.item, s,
                                      "Rule-1: the final training loss " + detail::fmt(losses[k])
                                          + " sits at percentile rank " + detail::fmt(ranks[k])
                                          + " of all training losses; larger losses suggest noise",
                                      1});
        }
        timing_.initialization += since(start);
    }

    /// One planning call (plus at most one re-prompt); the chosen action is
    /// appended to the action memory.
    PlanDecision plan()
    {
        require_initialized();
        const auto start = now();
        const auto action_index = memories_.actions.size() + 1;
        const auto sample = sample_confidence(derive_seed(cfg_.seed, 0x706c616e0000ULL + action_index));
        const auto& records = memories_.actions.records();
        const auto first = records.size() > cfg_.history_actions ? records.size() - cfg_.history_actions : 0;
        const std::vector<ActionRecord> history(records.begin() + static_cast<std::ptrdiff_t>(first), records.end());
        auto request = make_request(PromptKind::Planning, action_index,
                                    planning_prompt(sample, memories_.confidence.size(), noisy_count(),
                                                    memories_.rules.current(), history, records.size()));
        PlanDecision decision;
        try {
            decision = parse_planning_response(backend_.complete(request));
        } catch (const ParseError& first_error) {
            log_.push_back("plan " + std::to_string(action_index) + ": " + first_error.what() + "; re-prompting");
            request.user += kRepromptSuffix;
            try {
                decision = parse_planning_response(backend_.complete(request));
            } catch (const ParseError& e) {
                log_.push_back("plan " + std::to_string(action_index) + ": " + e.what());
                timing_.planning += since(start);
                throw PlanningError("planning response unparseable after re-prompt: " + std::string(e.what()));
            }
        }
        memories_.actions.append(decision.kind, decision.reason);
        timing_.planning += since(start);
        return decision;
    }

    void execute(ActionKind kind)
    {
        switch (kind) {
        case ActionKind::ConfidenceReflection: reflect_confidence(); break;
        case ActionKind::RuleReflection: reflect_rules(); break;
        case ActionKind::LossEraserTraining: execute_training(); break;
        case ActionKind::ModelEvaluation: execute_evaluation(); break;
        case ActionKind::Initialization: initialize(); break;
        }
    }

    /// Re-scores a seeded sample of interactions, one backend call each.
    /// Malformed answers get one re-prompt, then the prior entry is kept.
    void reflect_confidence()
    {
        require_initialized();
        const auto start = now();
        const auto action_index = current_action();
        const auto sample = sample_interactions(data_.train, cfg_.reflection_sample_size,
                                                derive_seed(cfg_.seed, 0x636f6e660000ULL + action_index));
        const auto& rules = memories_.rules.current();
        const auto verdicts = apply_rules(rules, traces_);

        std::vector<ChatRequest> requests;
        std::vector<ConfidenceEntry> priors;
        requests.reserve(sample.size());
        for (const auto& x : sample) {
            const auto k = trace_index_.at(pair_key(x.user, x.item));
            const auto prior = memories_.confidence.get(x.user, x.item).value();
            std::string verdict = "clean";
            if (verdicts.noisy[k]) {
                verdict = "noisy (fired:";
                for (const auto& id : verdicts.fired[k]) {
                    verdict += " Rule-" + id;
                }
                verdict += ")";
            }
            const auto history = traces_.history(k);
            requests.push_back(make_request(PromptKind::ConfidenceReflection, action_index,
                                            confidence_prompt(rules, prior, history, verdict, cfg_.trace_tail)));
            priors.push_back(prior);
        }

        const auto outcomes = run_reflections(requests);
        std::size_t updated = 0;
        for (std::size_t k = 0; k < outcomes.size(); ++k) {
            const auto& prior = priors[k];
            if (!outcomes[k].update) {
                log_.push_back("confidence " + std::to_string(action_index) + ": (" + std::to_string(prior.user)
                               + ", " + std::to_string(prior.item) + ") kept prior entry: " + outcomes[k].error);
                continue;
            }
            memories_.confidence.set(
                {prior.user, prior.item, outcomes[k].update->score, outcomes[k].update->explanation, action_index});
            ++updated;
        }
        log_.push_back("confidence " + std::to_string(action_index) + ": updated " + std::to_string(updated) + " of "
                       + std::to_string(sample.size()) + " sampled entries");
        timing_.reflection += since(start);
    }

    /// Asks for a revised rule outline and merges it into the rule memory as
    /// a new revision. An unusable answer leaves the rules as they are.
    void reflect_rules()
    {
        require_initialized();
        if (memories_.confidence.empty()) {
            throw InvalidArgument("reflect_rules: confidence memory is empty");
        }
        const auto start = now();
        const auto action_index = current_action();
        const auto sample = sample_confidence(derive_seed(cfg_.seed, 0x72756c650000ULL + action_index));
        const auto& records = memories_.actions.records();
        const std::string reason = records.empty() ? std::string() : records.back().reason;
        auto request = make_request(PromptKind::RuleReflection, action_index,
                                    rule_reflection_prompt(memories_.rules.current(), sample,
                                                           memories_.confidence.size(), reason));
        std::optional<RuleTree> proposed;
        std::string error;
        for (int attempt = 0; attempt < 2 && !proposed; ++attempt) {
            if (attempt == 1) {
                request.user += kRepromptSuffix;
            }
            try {
                proposed = parse_rules_response(backend_.complete(request));
            } catch (const ParseError& e) {
                error = e.what();
                log_.push_back("rules " + std::to_string(action_index) + ": " + error
                               + (attempt == 0 ? "; re-prompting" : "; keeping current rules"));
            }
        }
        if (proposed) {
            auto merged = merge(memories_.rules.current(), *proposed);
            memories_.rules.push(std::move(merged), "rule_reflection@" + std::to_string(action_index));
        }
        timing_.reflection += since(start);
    }

    /// One LossEraser continuation of eraser_epochs epochs: noisy pairs are
    /// dropped from the training split and unlearned with w = 1 - c.
    void execute_training()
    {
        require_initialized();
        const auto start = now();
        const auto noisy = memories_.confidence.noisy_set();
        std::vector<Interaction> removed;
        removed.reserve(noisy.size());
        for (const auto& np : noisy) {
            removed.push_back({np.user, np.item});
        }
        const auto clean = without(data_.train, PairSet(removed));
        auto cfg = train_cfg_;
        cfg.epochs = cfg_.eraser_epochs;
        train_loss_eraser(*state_, clean, noisy, data_.train, cfg, &traces_, &log_);
        log_.push_back("training " + std::to_string(current_action()) + ": " + std::to_string(noisy.size())
                       + " noisy pairs unlearned over " + std::to_string(cfg.epochs) + " epochs");
        timing_.training += since(start);
    }

    /// Evaluates the current model and attaches the outcome to the latest
    /// ModelEvaluation record.
    EvalResult execute_evaluation()
    {
        require_initialized();
        const auto start = now();
        if (memories_.actions.empty() || memories_.actions.back().kind != ActionKind::ModelEvaluation) {
            memories_.actions.append(ActionKind::ModelEvaluation, "Evaluation requested directly.");
        }
        auto result = evaluator_(state_->params);
        memories_.actions.attach_outcome(memories_.actions.back().index, result);
        timing_.evaluation += since(start);
        return result;
    }

    /// Initialization, then plan and execute until max_actions plannable
    /// actions have run or the watched recall declined decline_window times
    /// in a row. Errors after initialization yield an incomplete report.
    RunReport run()
    {
        const auto start = now();
        RunReport report;
        if (!initialized()) {
            initialize();
        }
        std::optional<double> previous;
        std::size_t declines = 0;
        std::size_t executed = 0;
        try {
            while (true) {
                if (executed >= cfg_.max_actions) {
                    report.stop_reason = "max_actions";
                    break;
                }
                const auto decision = plan();
                execute(decision.kind);
                ++executed;
                if (decision.kind == ActionKind::ModelEvaluation) {
                    const double recall = memories_.actions.back().eval_outcome->recall(cfg_.decline_k);
                    declines = previous && recall < *previous ? declines + 1 : 0;
                    previous = recall;
                    if (declines >= cfg_.decline_window) {
                        report.stop_reason = "decline";
                        break;
                    }
                }
            }
            const auto eval_start = now();
            report.test = evaluate(state_->params, data_.test, data_.train, cfg_.eval_ks);
            timing_.evaluation += since(eval_start);
            report.complete = true;
        } catch (const Error& e) {
            report.stop_reason = "error";
            report.error = e.what();
            log_.push_back(std::string("run aborted: ") + e.what());
        }
        timing_.total += since(start);
        fill_report(report);
        return report;
    }

    void fill_report(RunReport& report) const
    {
        const auto& rules = memories_.rules.current();
        report.rules_text = serialize(rules);
        report.rules_revision = rules.revision;
        report.actions = memories_.actions.records();
        report.confidence.clear();
        for (const auto& [key, e] : memories_.confidence.entries()) {
            report.confidence.push_back(e);
        }
        report.noisy_count = noisy_count();
        report.log = log_;
        report.timing = timing_;
    }

private:
    struct Outcome {
        std::optional<ConfidenceUpdate> update;
        std::string error;
    };

    Outcome reflect_one(ChatRequest request)
    {
        Outcome out;
        for (int attempt = 0; attempt < 2; ++attempt) {
            if (attempt == 1) {
                request.user += kRepromptSuffix;
            }
            try {
                out.update = parse_confidence_response(backend_.complete(request));
                return out;
            } catch (const ParseError& e) {
                out.error = e.what();
            }
        }
        return out;
    }

    std::vector<Outcome> run_reflections(const std::vector<ChatRequest>& requests)
    {
        std::vector<Outcome> outcomes(requests.size());
        const auto width = backend_.concurrent() ? cfg_.parallel_reflections : 1;
        if (width <= 1) {
            for (std::size_t k = 0; k < requests.size(); ++k) {
                outcomes[k] = reflect_one(requests[k]);
            }
            return outcomes;
        }
        for (std::size_t lo = 0; lo < requests.size(); lo += width) {
            const auto hi = std::min(requests.size(), lo + width);
            std::vector<std::future<Outcome>> futures;
            for (auto k = lo; k < hi; ++k) {
                futures.push_back(std::async(std::launch::async, [this, &requests, k] { return reflect_one(requests[k]); }));
            }
            for (auto k = lo; k < hi; ++k) {
                outcomes[k] = futures[k - lo].get();
            }
        }
        return outcomes;
    }

    std::vector<ConfidenceEntry> sample_confidence(std::uint64_t seed) const
    {
        std::vector<Interaction> keys;
        keys.reserve(memories_.confidence.size());
        for (const auto& [key, e] : memories_.confidence.entries()) {
            keys.push_back({key.first, key.second});
        }
        std::vector<ConfidenceEntry> out;
        if (keys.empty()) {
            return out;
        }
        auto picked = sample_interactions(keys, cfg_.reflection_sample_size, seed);
        std::sort(picked.begin(), picked.end());
        for (const auto& x : picked) {
            out.push_back(*memories_.confidence.get(x.user, x.item));
        }
        return out;
    }

    std::size_t noisy_count() const
    {
        std::size_t n = 0;
        for (const auto& [key, e] : memories_.confidence.entries()) {
            n += e.score < kNoisyBelow;
        }
        return n;
    }

    ChatRequest make_request(PromptKind kind, std::size_t action, std::string user) const
    {
        ChatRequest r;
        r.kind = kind;
        r.system = cfg_.profile_text;
        r.user = std::move(user);
        r.model = cfg_.model;
        r.temperature = cfg_.temperature;
        r.max_tokens = cfg_.max_tokens;
        r.action = action;
        return r;
    }

    std::size_t current_action() const { return memories_.actions.empty() ? 0 : memories_.actions.back().index; }

    void require_initialized() const
    {
        if (!state_) {
            throw InvalidArgument("agent is not initialized");
        }
    }

    static std::chrono::steady_clock::time_point now() { return std::chrono::steady_clock::now(); }
    static double since(std::chrono::steady_clock::time_point t)
    {
        return std::chrono::duration<double>(now() - t).count();
    }

    AgentData data_;
    TrainConfig train_cfg_;
    AgentConfig cfg_;
    Backend& backend_;
    Evaluator evaluator_;
    std::optional<TrainingState> state_;
    LossTrace traces_;
    Memories memories_;
    std::unordered_map<std::uint64_t, std::size_t> trace_index_;
    std::vector<std::string> log_;
    Timing timing_;
};

} // namespace ruleagent
