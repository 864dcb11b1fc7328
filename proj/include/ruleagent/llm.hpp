#pragma once

#include "ruleagent/error.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ruleagent {

enum class PromptKind { Planning, ConfidenceReflection, RuleReflection };

inline std::string_view prompt_kind_key(PromptKind k)
{
    switch (k) {
    case PromptKind::Planning: return "planning";
    case PromptKind::ConfidenceReflection: return "confidence_reflection";
    case PromptKind::RuleReflection: return "rule_reflection";
    }
    return "?";
}

inline std::optional<PromptKind> prompt_kind_from_key(std::string_view key)
{
    for (const auto k : {PromptKind::Planning, PromptKind::ConfidenceReflection, PromptKind::RuleReflection}) {
        if (prompt_kind_key(k) == key) {
            return k;
        }
    }
    return std::nullopt;
}

struct ChatRequest {
    PromptKind kind = PromptKind::Planning;
    std::string system;
    std::string user;
    std::string model = "gpt-4o-mini";
    double temperature = 0.0;
    std::size_t max_tokens = 1024;
    std::size_t action = 0; // index of the action record this call serves; 0 = initialization

    void validate() const
    {
        if (system.empty() || user.empty()) {
            throw InvalidArgument("chat request texts must be non-empty");
        }
        if (!(temperature >= 0.0)) {
            throw InvalidArgument("chat request temperature must be >= 0");
        }
        if (max_tokens == 0) {
            throw InvalidArgument("chat request max_tokens must be positive");
        }
    }
};

struct TranscriptEntry {
    std::size_t seq = 0;
    ChatRequest request;
    std::string response;
    std::string error; // set when the call failed; response is then empty
};

inline nlohmann::json to_json(const TranscriptEntry& e)
{
    nlohmann::json j{{"seq", e.seq},
                     {"kind", prompt_kind_key(e.request.kind)},
                     {"action", e.request.action},
                     {"model", e.request.model},
                     {"temperature", e.request.temperature},
                     {"max_tokens", e.request.max_tokens},
                     {"system", e.request.system},
                     {"user", e.request.user},
                     {"response", e.response}};
    if (!e.error.empty()) {
        j["error"] = e.error;
    }
    return j;
}

/// Chat-completion backend. complete() logs every call, successful or not,
/// before handing the text back.
class Backend {
public:
    virtual ~Backend() = default;

    std::string complete(const ChatRequest& request)
    {
        request.validate();
        try {
            auto text = do_complete(request);
            log(request, text, {});
            return text;
        } catch (const std::exception& e) {
            log(request, {}, e.what());
            throw;
        }
    }

    /// Whether complete() may be called from several threads at once.
    virtual bool concurrent() const { return false; }

    std::vector<TranscriptEntry> transcript() const
    {
        std::lock_guard lock(mutex_);
        return transcript_;
    }

    std::size_t calls() const
    {
        std::lock_guard lock(mutex_);
        return transcript_.size();
    }

    void write_transcript(const std::filesystem::path& path) const
    {
        std::ofstream out(path, std::ios::binary);
        if (!out) {
            throw Error("cannot write " + path.string());
        }
        for (const auto& e : transcript()) {
            out << to_json(e).dump() << '\n';
        }
    }

protected:
    virtual std::string do_complete(const ChatRequest& request) = 0;

private:
    void log(const ChatRequest& request, std::string response, std::string error)
    {
        std::lock_guard lock(mutex_);
        transcript_.push_back({transcript_.size() + 1, request, std::move(response), std::move(error)});
    }

    mutable std::mutex mutex_;
    std::vector<TranscriptEntry> transcript_;
};

/// Canned responses per prompt kind. Occurrence n of a kind gets
/// responses[n]; past the end the default is used if declared, otherwise
/// the list cycles when `cycle` is set. A confidence policy computes the
/// answer from the prompt instead:
///   echo_prior    repeats the score and reason quoted in the prompt
///   rule_verdict  answers noisy_score or clean_score from the rule engine
///                 verdict line of the prompt
struct ScriptEntry {
    std::vector<std::string> responses;
    std::optional<std::string> fallback;
    bool cycle = true;
    std::string policy;
    double noisy_score = 0.5;
    double clean_score = 1.5;
};

struct BackendScript {
    std::map<PromptKind, ScriptEntry> entries;

    static BackendScript from_json(const nlohmann::json& j)
    {
        if (!j.is_object()) {
            throw ConfigError("backend script must be a JSON object");
        }
        BackendScript s;
        for (const auto& [key, value] : j.items()) {
            const auto kind = prompt_kind_from_key(key);
            if (!kind) {
                throw ConfigError("backend script: unknown prompt kind '" + key + "'");
            }
            ScriptEntry e;
            if (value.is_string()) {
                e.fallback = value.get<std::string>();
            } else if (value.is_array()) {
                e.responses = value.get<std::vector<std::string>>();
            } else if (value.is_object()) {
                e.responses = value.value("responses", std::vector<std::string>{});
                if (value.contains("default")) {
                    e.fallback = value.at("default").get<std::string>();
                }
                e.cycle = value.value("cycle", true);
                e.policy = value.value("policy", std::string{});
                e.noisy_score = value.value("noisy_score", 0.5);
                e.clean_score = value.value("clean_score", 1.5);
            } else {
                throw ConfigError("backend script: bad entry for '" + key + "'");
            }
            if (!e.policy.empty() && e.policy != "echo_prior" && e.policy != "rule_verdict") {
                throw ConfigError("backend script: unknown policy '" + e.policy + "'");
            }
            if (!e.policy.empty() && *kind != PromptKind::ConfidenceReflection) {
                throw ConfigError("backend script: policies apply to confidence_reflection only");
            }
            if (e.policy.empty() && e.responses.empty() && !e.fallback) {
                throw ConfigError("backend script: '" + key + "' declares no response");
            }
            s.entries[*kind] = std::move(e);
        }
        return s;
    }

    static BackendScript load(const std::filesystem::path& path)
    {
        std::ifstream in(path);
        if (!in) {
            throw ConfigError("cannot open backend script " + path.string());
        }
        try {
            return from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("backend script " + path.string() + ": " + e.what());
        }
    }
};

namespace detail {

inline std::optional<std::string_view> text_between(std::string_view text, std::string_view open,
                                                    std::string_view close)
{
    const auto a = text.find(open);
    if (a == std::string_view::npos) {
        return std::nullopt;
    }
    const auto from = a + open.size();
    const auto b = close.empty() ? text.size() : text.find(close, from);
    if (b == std::string_view::npos) {
        return std::nullopt;
    }
    return text.substr(from, b - from);
}

} // namespace detail

/// Deterministic test double. No network I/O.
class ScriptedBackend final : public Backend {
public:
    explicit ScriptedBackend(BackendScript script) : script_(std::move(script)) {}

    std::size_t occurrences(PromptKind k) const
    {
        const auto it = seen_.find(k);
        return it == seen_.end() ? 0 : it->second;
    }

protected:
    std::string do_complete(const ChatRequest& request) override
    {
        const auto n = seen_[request.kind]++;
        const auto it = script_.entries.find(request.kind);
        if (it == script_.entries.end()) {
            throw ConfigError("backend script has no entry for " + std::string(prompt_kind_key(request.kind)));
        }
        const auto& e = it->second;
        if (!e.policy.empty()) {
            return apply_policy(e, request.user);
        }
        if (n < e.responses.size()) {
            return e.responses[n];
        }
        if (e.fallback) {
            return *e.fallback;
        }
        if (e.cycle && !e.responses.empty()) {
            return e.responses[n % e.responses.size()];
        }
        throw ConfigError("backend script exhausted for " + std::string(prompt_kind_key(request.kind)) + " call "
                          + std::to_string(n + 1));
    }

private:
    static std::string apply_policy(const ScriptEntry& e, std::string_view prompt)
    {
        if (e.policy == "echo_prior") {
            const auto score = detail::text_between(prompt, "Previous assessment: score ", ". Explanation: ");
            const auto reason = detail::text_between(prompt, ". Explanation: ", "\n");
            if (!score || !reason) {
                throw ProtocolError("echo_prior: prompt carries no prior score");
            }
            return "The confidence score is " + std::string(*score) + ". The explanation: " + std::string(*reason);
        }
        const auto verdict = detail::text_between(prompt, "Rule engine verdict: ", "\n");
        if (!verdict) {
            throw ProtocolError("rule_verdict: prompt carries no rule engine verdict");
        }
        char buf[32];
        if (verdict->rfind("noisy", 0) == 0) {
            std::snprintf(buf, sizeof buf, "%g", e.noisy_score);
            return "The confidence score is " + std::string(buf) + ". The explanation: the loss history matches the denoising rules"
                   + std::string(verdict->substr(5)) + ".";
        }
        std::snprintf(buf, sizeof buf, "%g", e.clean_score);
        return "The confidence score is " + std::string(buf)
               + ". The explanation: no denoising rule fires on the loss history.";
    }

    BackendScript script_;
    std::map<PromptKind, std::size_t> seen_;
};

} // namespace ruleagent
