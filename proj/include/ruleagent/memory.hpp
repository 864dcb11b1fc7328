#pragma once

#include "ruleagent/dataset.hpp"
#include "ruleagent/error.hpp"
#include "ruleagent/eval.hpp"
#include "ruleagent/rules.hpp"
#include "ruleagent/training.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace ruleagent {

inline constexpr double kMinConfidence = 0.0;
inline constexpr double kMaxConfidence = 2.0;
/// Scores below this are noisy, at or above it clean.
inline constexpr double kNoisyBelow = 1.0;

struct ConfidenceEntry {
    UserIndex user = 0;
    ItemIndex item = 0;
    double score = 1.0;
    std::string reason;
    std::size_t revised_at = 0; // action index of the last update

    friend bool operator==(const ConfidenceEntry&, const ConfidenceEntry&) = default;
};

inline bool valid_confidence(double s) { return s >= kMinConfidence && s <= kMaxConfidence; }

/// Per-interaction noise confidence in [0, 2] with the reason behind it.
class ConfidenceMemory {
public:
    using Key = std::pair<UserIndex, ItemIndex>;

    void set(const ConfidenceEntry& entry)
    {
        if (!valid_confidence(entry.score)) {
            throw InvalidArgument("confidence score must lie in [0, 2], got " + std::to_string(entry.score));
        }
        entries_[{entry.user, entry.item}] = entry;
    }

    std::optional<ConfidenceEntry> get(UserIndex u, ItemIndex i) const
    {
        const auto it = entries_.find({u, i});
        if (it == entries_.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    const std::map<Key, ConfidenceEntry>& entries() const noexcept { return entries_; }

    /// Min-max scaling of every stored score to [0, 1]; 0.5 everywhere when
    /// all scores are equal.
    std::map<Key, double> normalized() const
    {
        if (entries_.empty()) {
            throw InvalidArgument("normalize_confidences: memory is empty");
        }
        double lo = entries_.begin()->second.score;
        double hi = lo;
        for (const auto& [key, e] : entries_) {
            lo = std::min(lo, e.score);
            hi = std::max(hi, e.score);
        }
        std::map<Key, double> out;
        for (const auto& [key, e] : entries_) {
            out[key] = hi > lo ? (e.score - lo) / (hi - lo) : 0.5;
        }
        return out;
    }

    /// Pairs scored below 1.0, weighted w = 1 - c.
    std::vector<NoisyPair> noisy_set() const
    {
        std::vector<NoisyPair> out;
        if (entries_.empty()) {
            return out;
        }
        const auto c = normalized();
        for (const auto& [key, e] : entries_) {
            if (e.score < kNoisyBelow) {
                out.push_back({key.first, key.second, std::clamp(1.0 - c.at(key), 0.0, 1.0)});
            }
        }
        return out;
    }

    friend bool operator==(const ConfidenceMemory&, const ConfidenceMemory&) = default;

private:
    std::map<Key, ConfidenceEntry> entries_;
};

enum class ActionKind { Initialization, ConfidenceReflection, RuleReflection, LossEraserTraining, ModelEvaluation };

inline std::string_view action_name(ActionKind k)
{
    switch (k) {
    case ActionKind::Initialization: return "Initialization";
    case ActionKind::ConfidenceReflection: return "Confidence Reflection";
    case ActionKind::RuleReflection: return "Rule Reflection";
    case ActionKind::LossEraserTraining: return "LossEraser Training";
    case ActionKind::ModelEvaluation: return "Model Evaluation";
    }
    return "?";
}

inline std::string_view action_key(ActionKind k)
{
    switch (k) {
    case ActionKind::Initialization: return "initialization";
    case ActionKind::ConfidenceReflection: return "confidence_reflection";
    case ActionKind::RuleReflection: return "rule_reflection";
    case ActionKind::LossEraserTraining: return "loss_eraser_training";
    case ActionKind::ModelEvaluation: return "model_evaluation";
    }
    return "?";
}

inline std::optional<ActionKind> action_from_key(std::string_view key)
{
    for (const auto k : {ActionKind::Initialization, ActionKind::ConfidenceReflection, ActionKind::RuleReflection,
                         ActionKind::LossEraserTraining, ActionKind::ModelEvaluation}) {
        if (action_key(k) == key) {
            return k;
        }
    }
    return std::nullopt;
}

/// Menu letter of a plannable action; Initialization has none.
inline std::optional<char> action_letter(ActionKind k)
{
    switch (k) {
    case ActionKind::ConfidenceReflection: return 'a';
    case ActionKind::RuleReflection: return 'b';
    case ActionKind::LossEraserTraining: return 'c';
    case ActionKind::ModelEvaluation: return 'd';
    default: return std::nullopt;
    }
}

inline std::optional<ActionKind> action_from_letter(char c)
{
    switch (std::tolower(static_cast<unsigned char>(c))) {
    case 'a': return ActionKind::ConfidenceReflection;
    case 'b': return ActionKind::RuleReflection;
    case 'c': return ActionKind::LossEraserTraining;
    case 'd': return ActionKind::ModelEvaluation;
    default: return std::nullopt;
    }
}

struct ActionRecord {
    std::size_t index = 0;
    ActionKind kind = ActionKind::Initialization;
    std::string reason;
    std::optional<EvalResult> eval_outcome;

    friend bool operator==(const ActionRecord&, const ActionRecord&) = default;
};

class ActionMemory {
public:
    ActionRecord& append(ActionKind kind, std::string reason)
    {
        records_.push_back({records_.size() + 1, kind, std::move(reason), std::nullopt});
        return records_.back();
    }

    void attach_outcome(std::size_t index, EvalResult outcome)
    {
        auto& r = records_.at(index - 1);
        if (r.kind != ActionKind::ModelEvaluation) {
            throw InvalidArgument("evaluation outcome on a non-evaluation action");
        }
        r.eval_outcome = std::move(outcome);
    }

    const std::vector<ActionRecord>& records() const noexcept { return records_; }
    std::size_t size() const noexcept { return records_.size(); }
    bool empty() const noexcept { return records_.empty(); }
    const ActionRecord& back() const { return records_.back(); }

    friend bool operator==(const ActionMemory&, const ActionMemory&) = default;

private:
    std::vector<ActionRecord> records_;
};

/// Current rule tree plus every earlier revision.
class RuleMemory {
public:
    void push(RuleTree tree, std::string provenance)
    {
        tree.revision = history_.empty() ? 1 : history_.back().revision + 1;
        tree.provenance = std::move(provenance);
        history_.push_back(std::move(tree));
    }

    const RuleTree& current() const
    {
        if (history_.empty()) {
            throw InvalidArgument("rule memory is empty");
        }
        return history_.back();
    }

    bool empty() const noexcept { return history_.empty(); }
    const std::vector<RuleTree>& history() const noexcept { return history_; }

    friend bool operator==(const RuleMemory& a, const RuleMemory& b)
    {
        if (a.history_.size() != b.history_.size()) {
            return false;
        }
        for (std::size_t k = 0; k < a.history_.size(); ++k) {
            const auto& x = a.history_[k];
            const auto& y = b.history_[k];
            if (!structurally_equal(x, y) || x.revision != y.revision || x.provenance != y.provenance) {
                return false;
            }
        }
        return true;
    }

private:
    std::vector<RuleTree> history_;
};

struct Memories {
    ConfidenceMemory confidence;
    RuleMemory rules;
    ActionMemory actions;

    friend bool operator==(const Memories&, const Memories&) = default;
};

inline nlohmann::json to_json(const ConfidenceEntry& e)
{
    return {{"user", e.user}, {"item", e.item}, {"score", e.score}, {"reason", e.reason}, {"revised_at", e.revised_at}};
}

inline nlohmann::json to_json(const ActionRecord& r)
{
    nlohmann::json j{{"index", r.index}, {"kind", action_key(r.kind)}, {"reason", r.reason}};
    if (const auto letter = action_letter(r.kind)) {
        j["letter"] = std::string(1, *letter);
    }
    if (r.eval_outcome) {
        j["eval_outcome"] = to_json(*r.eval_outcome);
    }
    return j;
}

inline nlohmann::json rules_meta_json(const RuleMemory& rules)
{
    nlohmann::json history = nlohmann::json::array();
    for (const auto& t : rules.history()) {
        history.push_back({{"revision", t.revision}, {"provenance", t.provenance}, {"text", serialize(t)}});
    }
    nlohmann::json j{{"format", "ruleagent.rules"}, {"version", 1}, {"history", history}};
    if (!rules.empty()) {
        j["revision"] = rules.current().revision;
        j["provenance"] = rules.current().provenance;
    }
    return j;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    out << text;
}

template <typename F>
void read_jsonl(const std::filesystem::path& path, F&& on_record)
{
    std::ifstream in(path);
    if (!in) {
        throw LoadError("cannot open " + path.string());
    }
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            on_record(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw LoadError(path.filename().string() + ":" + std::to_string(line_no) + ": corrupt record ("
                                + e.what() + ")",
                            line_no);
        } catch (const InvalidArgument& e) {
            throw LoadError(path.filename().string() + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
        }
    }
}

} // namespace detail

/// Writes confidence.jsonl, actions.jsonl, rules.txt and rules.meta.json into `dir`.
inline void persist(const Memories& m, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    std::string confidence;
    for (const auto& [key, e] : m.confidence.entries()) {
        confidence += to_json(e).dump() + "\n";
    }
    detail::write_text(dir / "confidence.jsonl", confidence);

    std::string actions;
    for (const auto& r : m.actions.records()) {
        actions += to_json(r).dump() + "\n";
    }
    detail::write_text(dir / "actions.jsonl", actions);

    detail::write_text(dir / "rules.txt", m.rules.empty() ? std::string() : serialize(m.rules.current()));
    detail::write_text(dir / "rules.meta.json", rules_meta_json(m.rules).dump(2) + "\n");
}

inline Memories load_memories(const std::filesystem::path& dir)
{
    Memories m;
    detail::read_jsonl(dir / "confidence.jsonl", [&](const nlohmann::json& j) {
        m.confidence.set({j.at("user").get<UserIndex>(), j.at("item").get<ItemIndex>(), j.at("score").get<double>(),
                          j.at("reason").get<std::string>(), j.at("revised_at").get<std::size_t>()});
    });

    std::vector<ActionRecord> records;
    detail::read_jsonl(dir / "actions.jsonl", [&](const nlohmann::json& j) {
        const auto kind = action_from_key(j.at("kind").get<std::string>());
        if (!kind) {
            throw InvalidArgument("unknown action kind");
        }
        const auto index = j.at("index").get<std::size_t>();
        if (index != records.size() + 1) {
            throw InvalidArgument("action indices must be contiguous from 1");
        }
        ActionRecord r{index, *kind, j.at("reason").get<std::string>(), std::nullopt};
        if (j.contains("eval_outcome")) {
            if (*kind != ActionKind::ModelEvaluation) {
                throw InvalidArgument("evaluation outcome on a non-evaluation action");
            }
            r.eval_outcome = eval_from_json(j.at("eval_outcome"));
        }
        records.push_back(std::move(r));
    });
    for (auto& r : records) {
        auto& added = m.actions.append(r.kind, r.reason);
        added.eval_outcome = r.eval_outcome;
    }

    std::ifstream meta_in(dir / "rules.meta.json");
    if (!meta_in) {
        throw LoadError("cannot open " + (dir / "rules.meta.json").string());
    }
    try {
        const auto meta = nlohmann::json::parse(meta_in);
        for (const auto& h : meta.at("history")) {
            auto tree = parse_rule_text(h.at("text").get<std::string>());
            m.rules.push(std::move(tree), h.at("provenance").get<std::string>());
            if (m.rules.current().revision != h.at("revision").get<std::size_t>()) {
                throw LoadError("rules.meta.json: revisions must be contiguous from 1");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("rules.meta.json: ") + e.what());
    } catch (const ParseError& e) {
        throw LoadError(std::string("rules.meta.json: ") + e.what());
    }
    return m;
}

} // namespace ruleagent
