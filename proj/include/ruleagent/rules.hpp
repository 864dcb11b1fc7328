#pragma once

#include "ruleagent/error.hpp"
#include "ruleagent/stats.hpp"
#include "ruleagent/training.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace ruleagent {

// Executable predicates. Each one reads an interaction's loss history and the
// population of latest losses over all interactions.

struct PercentileThreshold {
    double p = 0.95;
    friend bool operator==(const PercentileThreshold&, const PercentileThreshold&) = default;
};

/// Fires when at least `times` history values exceed the p-percentile of the
/// population. `p` comes from the nearest PercentileThreshold ancestor unless
/// the rule names its own percentile.
struct RepeatedExceedance {
    std::size_t times = 1;
    double p = 0.95;
    friend bool operator==(const RepeatedExceedance&, const RepeatedExceedance&) = default;
};

struct VarianceThreshold {
    double v = 0.0;
    friend bool operator==(const VarianceThreshold&, const VarianceThreshold&) = default;
};

/// Counts consecutive transitions that jump from above `upper` to below
/// `lower` or back.
struct OscillationBounds {
    double upper = 0.0;
    double lower = 0.0;
    std::size_t times = 1;
    friend bool operator==(const OscillationBounds&, const OscillationBounds&) = default;
};

struct MedianOutlier {
    double factor = 3.0;
    friend bool operator==(const MedianOutlier&, const MedianOutlier&) = default;
};

/// Free text that names no threshold the engine understands. Never fires.
struct Prose {
    std::string text;
    friend bool operator==(const Prose&, const Prose&) = default;
};

using Predicate =
    std::variant<PercentileThreshold, RepeatedExceedance, VarianceThreshold, OscillationBounds, MedianOutlier, Prose>;

inline constexpr double kDefaultPercentile = 0.95;
inline constexpr double kDefaultMedianFactor = 3.0;

inline bool is_executable(const Predicate& p) { return !std::holds_alternative<Prose>(p); }

struct RuleId {
    std::vector<std::uint32_t> path;

    std::string str() const
    {
        std::string s;
        for (std::size_t k = 0; k < path.size(); ++k) {
            if (k) {
                s += '.';
            }
            s += std::to_string(path[k]);
        }
        return s;
    }

    friend bool operator==(const RuleId&, const RuleId&) = default;
    friend auto operator<=>(const RuleId&, const RuleId&) = default;
};

struct RuleNode {
    RuleId id;
    std::string label;
    std::string description;
    Predicate predicate;
    std::vector<RuleNode> children;

    friend bool operator==(const RuleNode&, const RuleNode&) = default;
};

struct RuleTree {
    std::vector<RuleNode> roots;
    std::size_t revision = 1;
    std::string provenance;

    bool empty() const noexcept { return roots.empty(); }

    std::size_t node_count() const
    {
        std::size_t n = 0;
        const auto count = [&](const auto& self, const std::vector<RuleNode>& nodes) -> void {
            for (const auto& node : nodes) {
                ++n;
                self(self, node.children);
            }
        };
        count(count, roots);
        return n;
    }

    const RuleNode* find(std::string_view id) const
    {
        const auto walk = [&](const auto& self, const std::vector<RuleNode>& nodes) -> const RuleNode* {
            for (const auto& node : nodes) {
                if (node.id.str() == id) {
                    return &node;
                }
                if (const auto* hit = self(self, node.children)) {
                    return hit;
                }
            }
            return nullptr;
        };
        return walk(walk, roots);
    }

    /// Ids in depth-first order.
    std::vector<std::string> ids() const
    {
        std::vector<std::string> out;
        const auto walk = [&](const auto& self, const std::vector<RuleNode>& nodes) -> void {
            for (const auto& node : nodes) {
                out.push_back(node.id.str());
                self(self, node.children);
            }
        };
        walk(walk, roots);
        return out;
    }
};

/// Equality of content, ignoring revision metadata.
inline bool structurally_equal(const RuleTree& a, const RuleTree& b) { return a.roots == b.roots; }

namespace detail {

inline std::string lower(std::string_view s)
{
    std::string out(s);
    for (auto& c : out) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

inline std::string_view trim(std::string_view s)
{
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) {
        s.remove_prefix(1);
    }
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) {
        s.remove_suffix(1);
    }
    return s;
}

/// First decimal number starting at or after `from`, with its end position.
inline std::optional<std::pair<double, std::size_t>> number_after(std::string_view s, std::size_t from)
{
    for (std::size_t k = from; k < s.size(); ++k) {
        if (!std::isdigit(static_cast<unsigned char>(s[k]))) {
            continue;
        }
        auto start = k;
        if (start > 0 && s[start - 1] == '.') {
            --start; // ".5"
        }
        double value = 0.0;
        auto end = start;
        while (end < s.size() && (std::isdigit(static_cast<unsigned char>(s[end])) || s[end] == '.')) {
            ++end;
        }
        while (end > start && s[end - 1] == '.') {
            --end; // sentence full stop
        }
        const auto [ptr, ec] = std::from_chars(s.data() + start, s.data() + end, value);
        if (ec == std::errc()) {
            return std::pair{value, static_cast<std::size_t>(ptr - s.data())};
        }
        k = end;
    }
    return std::nullopt;
}

inline std::optional<std::size_t> count_word(std::string_view w)
{
    static const std::map<std::string_view, std::size_t> words{
        {"once", 1},  {"twice", 2}, {"thrice", 3}, {"one", 1},   {"two", 2},  {"three", 3},
        {"four", 4},  {"five", 5},  {"six", 6},    {"seven", 7}, {"eight", 8}, {"nine", 9},
        {"ten", 10},
    };
    if (const auto it = words.find(w); it != words.end()) {
        return it->second;
    }
    std::size_t n = 0;
    const auto [ptr, ec] = std::from_chars(w.data(), w.data() + w.size(), n);
    if (ec == std::errc() && ptr == w.data() + w.size()) {
        return n;
    }
    return std::nullopt;
}

inline bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-'; }

/// Count attached to "N times" / "once" / "twice" in lower-cased text.
inline std::optional<std::size_t> repetition_count(std::string_view s)
{
    for (const std::string_view single : {"once", "twice", "thrice"}) {
        const auto pos = s.find(single);
        if (pos != std::string_view::npos && (pos == 0 || !std::isalpha(static_cast<unsigned char>(s[pos - 1])))
            && (pos + single.size() == s.size() || !std::isalpha(static_cast<unsigned char>(s[pos + single.size()])))) {
            return count_word(single);
        }
    }
    std::size_t pos = 0;
    while ((pos = s.find("times", pos)) != std::string_view::npos) {
        auto end = pos;
        while (end > 0 && s[end - 1] == ' ') {
            --end;
        }
        auto start = end;
        while (start > 0 && is_word_char(s[start - 1])) {
            --start;
        }
        if (start < end) {
            if (const auto n = count_word(s.substr(start, end - start)); n && *n >= 1) {
                return n;
            }
        }
        pos += 5;
    }
    return std::nullopt;
}

/// Percentile named as "95th percentile" / "95% percentile", as a fraction.
inline std::optional<double> named_percentile(std::string_view s)
{
    const auto pos = s.find("percentile");
    if (pos == std::string_view::npos) {
        return std::nullopt;
    }
    auto end = pos;
    while (end > 0 && (s[end - 1] == ' ' || s[end - 1] == '%' || s[end - 1] == '-')) {
        --end;
    }
    for (const std::string_view suffix : {"th", "st", "nd", "rd"}) {
        if (end >= suffix.size() && s.substr(end - suffix.size(), suffix.size()) == suffix) {
            end -= suffix.size();
            break;
        }
    }
    auto start = end;
    while (start > 0 && (std::isdigit(static_cast<unsigned char>(s[start - 1])) || s[start - 1] == '.')) {
        --start;
    }
    double x = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data() + start, s.data() + end, x);
    if (start == end || ec != std::errc() || ptr != s.data() + end) {
        return std::nullopt;
    }
    const double p = x / 100.0;
    if (!(p > 0.0 && p < 1.0)) {
        return std::nullopt;
    }
    return p;
}

} // namespace detail

/// Maps a rule description onto a predicate. Phrasings that name no usable
/// threshold become Prose. `inherited_p` is the percentile of the nearest
/// PercentileThreshold ancestor.
inline Predicate compile_description(std::string_view description, double inherited_p = kDefaultPercentile)
{
    const auto text = detail::lower(description);
    const std::string_view s(text);

    if (s.find("oscillat") != std::string_view::npos) {
        const auto up = s.find("upper bound");
        const auto lo = s.find("lower bound");
        const auto times = detail::repetition_count(s);
        if (up != std::string_view::npos && lo != std::string_view::npos && times) {
            const auto u = detail::number_after(s, up);
            const auto l = detail::number_after(s, lo);
            if (u && l && u->first > l->first) {
                return OscillationBounds{u->first, l->first, *times};
            }
        }
        return Prose{std::string(description)};
    }
    if (const auto var = s.find("variance"); var != std::string_view::npos) {
        const auto thr = s.find("threshold", var);
        const auto v = detail::number_after(s, thr != std::string_view::npos ? thr : var);
        if (v && v->first >= 0.0) {
            return VarianceThreshold{v->first};
        }
        return Prose{std::string(description)};
    }
    if (s.find("exceed") != std::string_view::npos) {
        if (const auto times = detail::repetition_count(s)) {
            return RepeatedExceedance{*times, detail::named_percentile(s).value_or(inherited_p)};
        }
    }
    if (const auto p = detail::named_percentile(s)) {
        return PercentileThreshold{*p};
    }
    if (const auto med = s.find("median"); med != std::string_view::npos) {
        double factor = kDefaultMedianFactor;
        if (const auto times = s.find("times the median"); times != std::string_view::npos) {
            auto start = times;
            while (start > 0 && (s[start - 1] == ' ' || std::isdigit(static_cast<unsigned char>(s[start - 1]))
                                 || s[start - 1] == '.')) {
                --start;
            }
            if (const auto f = detail::number_after(s.substr(0, times), start); f && f->first > 1.0) {
                factor = f->first;
            }
        }
        return MedianOutlier{factor};
    }
    return Prose{std::string(description)};
}

namespace detail {

inline std::string format_number(double v)
{
    char buf[128];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
    return std::string(buf, ptr);
}

/// p as a percentage, rounded to 1e-9 so that 0.9 prints as "90".
inline std::string format_percent(double p)
{
    return format_number(std::round(p * 100.0 * 1e9) / 1e9);
}

} // namespace detail

/// Canonical description that compile_description maps back to `pred`.
inline std::string describe(const Predicate& pred, double inherited_p = kDefaultPercentile)
{
    using detail::format_number;
    return std::visit(
        [&](const auto& p) -> std::string {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, PercentileThreshold>) {
                return "The noisy sample's loss value exceeds the " + detail::format_percent(p.p)
                       + "th percentile threshold.";
            } else if constexpr (std::is_same_v<T, RepeatedExceedance>) {
                std::string where = p.p == inherited_p ? "the threshold" : "the " + detail::format_percent(p.p) + "th percentile";
                return "If the loss of a sample exceeds " + where + " " + std::to_string(p.times)
                       + " times across multiple trainings, it is classified as a noisy sample.";
            } else if constexpr (std::is_same_v<T, VarianceThreshold>) {
                return "If the variance exceeds a threshold " + format_number(p.v) + ", the sample is flagged as noisy.";
            } else if constexpr (std::is_same_v<T, OscillationBounds>) {
                return "If the loss value oscillates beyond set upper bound (" + format_number(p.upper)
                       + ") and lower bound (" + format_number(p.lower) + ") " + std::to_string(p.times)
                       + " times, it is marked as a noisy sample.";
            } else if constexpr (std::is_same_v<T, MedianOutlier>) {
                return "The loss value is above " + format_number(p.factor)
                       + " times the median loss or below the median divided by that factor.";
            } else {
                return p.text;
            }
        },
        pred);
}

/// Renumbers ids contiguously in sibling order and recompiles every predicate
/// from its description with the inherited percentile.
inline void canonicalize(RuleTree& tree)
{
    const auto walk = [](const auto& self, std::vector<RuleNode>& nodes, const std::vector<std::uint32_t>& prefix,
                         double inherited_p) -> void {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            auto& node = nodes[k];
            node.id.path = prefix;
            node.id.path.push_back(static_cast<std::uint32_t>(k + 1));
            node.predicate = compile_description(node.description, inherited_p);
            double child_p = inherited_p;
            if (const auto* pt = std::get_if<PercentileThreshold>(&node.predicate)) {
                child_p = pt->p;
            }
            self(self, node.children, node.id.path, child_p);
        }
    };
    walk(walk, tree.roots, {}, kDefaultPercentile);
}

/// Builds a node whose predicate is derived from `description`. Call
/// canonicalize on the owning tree once it is assembled.
inline RuleNode make_rule(std::string label, std::string description, std::vector<RuleNode> children = {})
{
    for (auto& c : description) {
        if (c == '\n' || c == '\r') {
            c = ' ';
        }
    }
    RuleNode node;
    node.label = std::move(label);
    node.description = std::string(detail::trim(description));
    node.predicate = compile_description(node.description);
    node.children = std::move(children);
    return node;
}

/// Parses a numbered outline of `Rule-<id>(<Label>): <description>` lines.
/// Leading whitespace, bullets and markdown emphasis are ignored; lines that do
/// not start with "Rule-" are skipped. Nesting follows the id path and every
/// rule's parent must appear before it.
inline RuleTree parse_rule_text(std::string_view text)
{
    RuleTree tree;
    struct Pending {
        std::vector<std::uint32_t> path;
        RuleNode node;
    };
    std::vector<Pending> order;

    std::size_t line_start = 0;
    std::size_t line_no = 0;
    while (line_start <= text.size()) {
        auto line_end = text.find('\n', line_start);
        if (line_end == std::string_view::npos) {
            line_end = text.size();
        }
        ++line_no;
        std::string_view line = text.substr(line_start, line_end - line_start);
        std::size_t pos = 0;
        while (pos < line.size()
               && (std::isspace(static_cast<unsigned char>(line[pos])) || line[pos] == '-' || line[pos] == '*'
                   || line[pos] == '+' || line[pos] == '#' || line[pos] == '>' || line[pos] == '_')) {
            ++pos;
        }
        // "•" in UTF-8
        while (line.substr(pos).rfind("\xE2\x80\xA2", 0) == 0) {
            pos += 3;
            while (pos < line.size() && std::isspace(static_cast<unsigned char>(line[pos]))) {
                ++pos;
            }
        }
        const auto rest = line.substr(pos);
        if (rest.size() >= 5 && detail::lower(rest.substr(0, 5)) == "rule-") {
            const auto base = line_start + pos;
            const auto fail = [&](const std::string& why, std::size_t at) {
                throw ParseError("line " + std::to_string(line_no) + ", offset " + std::to_string(base + at) + ": "
                                     + why,
                                 line_no, base + at);
            };
            std::size_t k = 5;
            std::vector<std::uint32_t> path;
            for (;;) {
                const auto digits_start = k;
                std::uint64_t value = 0;
                while (k < rest.size() && std::isdigit(static_cast<unsigned char>(rest[k]))) {
                    value = value * 10 + static_cast<std::uint64_t>(rest[k] - '0');
                    if (value > 1'000'000) {
                        fail("rule id component too large", k);
                    }
                    ++k;
                }
                if (k == digits_start) {
                    fail("malformed rule id", k);
                }
                if (value == 0) {
                    fail("rule id components start at 1", digits_start);
                }
                path.push_back(static_cast<std::uint32_t>(value));
                if (k + 1 < rest.size() && rest[k] == '.' && std::isdigit(static_cast<unsigned char>(rest[k + 1]))) {
                    ++k;
                    continue;
                }
                break;
            }
            while (k < rest.size() && rest[k] == ' ') {
                ++k;
            }
            if (k >= rest.size() || rest[k] != '(') {
                fail("expected '(' after rule id", k);
            }
            const auto label_start = ++k;
            int depth = 1;
            while (k < rest.size() && depth > 0) {
                if (rest[k] == '(') {
                    ++depth;
                } else if (rest[k] == ')') {
                    --depth;
                }
                ++k;
            }
            if (depth != 0) {
                fail("unterminated rule label", label_start);
            }
            const auto label = detail::trim(rest.substr(label_start, k - 1 - label_start));
            auto desc = rest.substr(k);
            while (!desc.empty() && (desc.front() == '*' || desc.front() == ' ' || desc.front() == '_')) {
                desc.remove_prefix(1);
            }
            if (!desc.empty() && desc.front() == ':') {
                desc.remove_prefix(1);
            }
            desc = detail::trim(desc);
            while (!desc.empty() && (desc.front() == '*' || desc.front() == '_')) {
                desc.remove_prefix(1);
            }
            desc = detail::trim(desc);

            if (std::any_of(order.begin(), order.end(), [&](const Pending& p) { return p.path == path; })) {
                fail("duplicate rule id Rule-" + RuleId{path}.str(), 0);
            }
            if (path.size() > 1) {
                const std::vector<std::uint32_t> parent(path.begin(), path.end() - 1);
                if (std::none_of(order.begin(), order.end(), [&](const Pending& p) { return p.path == parent; })) {
                    fail("Rule-" + RuleId{path}.str() + " has no parent Rule-" + RuleId{parent}.str(), 0);
                }
            }
            order.push_back({path, make_rule(std::string(label), std::string(desc))});
        }
        if (line_end == text.size()) {
            break;
        }
        line_start = line_end + 1;
    }

    // Attach in order of appearance; parents always precede children.
    const auto attach = [&](const auto& self, std::vector<RuleNode>& siblings,
                            const std::vector<std::uint32_t>& prefix) -> void {
        for (auto& pending : order) {
            if (pending.path.size() == prefix.size() + 1
                && std::equal(prefix.begin(), prefix.end(), pending.path.begin())) {
                siblings.push_back(pending.node);
                self(self, siblings.back().children, pending.path);
            }
        }
    };
    attach(attach, tree.roots, {});
    canonicalize(tree);
    return tree;
}

/// Depth-first numbered outline with two spaces of indent per level.
inline std::string serialize(const RuleTree& tree)
{
    std::string out;
    const auto walk = [&](const auto& self, const std::vector<RuleNode>& nodes, std::size_t depth) -> void {
        for (const auto& node : nodes) {
            out.append(depth * 2, ' ');
            out += "Rule-" + node.id.str() + "(" + node.label + "): " + node.description + "\n";
            self(self, node.children, depth + 1);
        }
    };
    walk(walk, tree.roots, 0);
    return out;
}

/// Union of two trees level by level, matching nodes by label. When labels
/// match but predicates differ the node from `b` wins. Ids are renumbered.
/// Each node of `a` absorbs at most one node of `b`, so repeated labels
/// among siblings survive a merge.
inline RuleTree merge(const RuleTree& a, const RuleTree& b)
{
    const auto merge_level = [](const auto& self, std::vector<RuleNode> left,
                                const std::vector<RuleNode>& right) -> std::vector<RuleNode> {
        const auto original = left.size();
        std::vector<bool> used(original, false);
        for (const auto& r : right) {
            std::size_t k = 0;
            while (k < original && (used[k] || left[k].label != r.label)) {
                ++k;
            }
            if (k == original) {
                left.push_back(r);
                continue;
            }
            used[k] = true;
            const auto it = left.begin() + static_cast<std::ptrdiff_t>(k);
            if (!(it->predicate == r.predicate)) {
                it->description = r.description;
                it->predicate = r.predicate;
            }
            it->children = self(self, it->children, r.children);
        }
        return left;
    };
    RuleTree out;
    out.roots = merge_level(merge_level, a.roots, b.roots);
    out.revision = std::max(a.revision, b.revision);
    out.provenance = b.provenance.empty() ? a.provenance : b.provenance;
    canonicalize(out);
    return out;
}

/// Population statistics shared by every predicate evaluation.
class RuleContext {
public:
    explicit RuleContext(std::vector<double> population) : population_(std::move(population)) {}

    bool empty() const noexcept { return population_.empty(); }

    double percentile(double p) const
    {
        if (population_.empty()) {
            throw InvalidArgument("rule evaluation: percentile over an empty population");
        }
        const auto it = thresholds_.find(p);
        if (it != thresholds_.end()) {
            return it->second;
        }
        return thresholds_[p] = nearest_rank_percentile(population_, p);
    }

    double median() const
    {
        if (population_.empty()) {
            throw InvalidArgument("rule evaluation: median over an empty population");
        }
        if (!median_) {
            median_ = ruleagent::median(population_);
        }
        return *median_;
    }

private:
    std::vector<double> population_;
    mutable std::map<double, double> thresholds_;
    mutable std::optional<double> median_;
};

inline bool evaluate_predicate(const Predicate& pred, std::span<const double> trace, const RuleContext& ctx)
{
    if (trace.empty()) {
        throw InvalidArgument("evaluate_predicate: empty loss history");
    }
    const double latest = trace.back();
    return std::visit(
        [&](const auto& p) -> bool {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, PercentileThreshold>) {
                return latest > ctx.percentile(p.p);
            } else if constexpr (std::is_same_v<T, RepeatedExceedance>) {
                const double tau = ctx.percentile(p.p);
                const auto n = std::count_if(trace.begin(), trace.end(), [&](double v) { return v > tau; });
                return static_cast<std::size_t>(n) >= p.times;
            } else if constexpr (std::is_same_v<T, VarianceThreshold>) {
                return population_variance(trace) > p.v;
            } else if constexpr (std::is_same_v<T, OscillationBounds>) {
                std::size_t crossings = 0;
                for (std::size_t k = 1; k < trace.size(); ++k) {
                    const double a = trace[k - 1];
                    const double b = trace[k];
                    if ((a > p.upper && b < p.lower) || (a < p.lower && b > p.upper)) {
                        ++crossings;
                    }
                }
                return crossings >= p.times;
            } else if constexpr (std::is_same_v<T, MedianOutlier>) {
                const double m = ctx.median();
                return latest > p.factor * m || latest < m / p.factor;
            } else {
                return false;
            }
        },
        pred);
}

inline bool evaluate_predicate(const Predicate& pred, std::span<const double> trace, const std::vector<double>& population)
{
    return evaluate_predicate(pred, trace, RuleContext(population));
}

struct Verdicts {
    std::vector<bool> noisy;
    std::vector<std::vector<std::string>> fired; // rule ids per interaction

    std::size_t noisy_count() const { return static_cast<std::size_t>(std::count(noisy.begin(), noisy.end(), true)); }
};

/// Leaves of the tree, depth-first.
inline std::vector<const RuleNode*> leaves(const RuleTree& tree)
{
    std::vector<const RuleNode*> out;
    const auto walk = [&](const auto& self, const std::vector<RuleNode>& nodes) -> void {
        for (const auto& node : nodes) {
            if (node.children.empty()) {
                out.push_back(&node);
            } else {
                self(self, node.children);
            }
        }
    };
    walk(walk, tree.roots);
    return out;
}

/// An interaction is noisy iff any executable leaf fires. `population`
/// defaults to the latest recorded losses of every traced interaction.
inline Verdicts apply_rules(const RuleTree& tree, const LossTrace& traces,
                            std::optional<std::vector<double>> population = std::nullopt)
{
    Verdicts v;
    v.noisy.assign(traces.size(), false);
    v.fired.assign(traces.size(), {});
    std::vector<const RuleNode*> active;
    for (const auto* leaf : leaves(tree)) {
        if (is_executable(leaf->predicate)) {
            active.push_back(leaf);
        }
    }
    if (active.empty() || traces.size() == 0) {
        return v;
    }
    const RuleContext ctx(population ? std::move(*population) : traces.latest());
    for (std::size_t k = 0; k < traces.size(); ++k) {
        const auto history = traces.history(k);
        for (const auto* leaf : active) {
            if (evaluate_predicate(leaf->predicate, history, ctx)) {
                v.noisy[k] = true;
                v.fired[k].push_back(leaf->id.str());
            }
        }
    }
    return v;
}

} // namespace ruleagent
