#pragma once

// Run configuration and the data/backend plumbing shared by the command
// line tool and the acceptance suite.

#include "ruleagent/agent.hpp"
#include "ruleagent/dataset.hpp"
#include "ruleagent/error.hpp"
#include "ruleagent/llm.hpp"
#include "ruleagent/llm_http.hpp"
#include "ruleagent/memory.hpp"
#include "ruleagent/training.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>

namespace ruleagent {

struct BackendConfig {
    std::string kind = "scripted"; // scripted | http
    std::filesystem::path script;
    std::string base_url = "https://api.openai.com";
    std::string model = "gpt-4o-mini";
    double temperature = 0.0;
    std::size_t max_tokens = 1024;
    std::size_t max_attempts = 3;
};

struct RunConfig {
    std::filesystem::path dataset;
    std::filesystem::path sidecar; // optional id-map sidecar of a dense dataset
    std::filesystem::path output_dir = "run";
    std::size_t densify_users = 0;  // 0 keeps every user
    std::uint64_t split_seed = 0;
    double noise_rate = 0.0;
    std::uint64_t noise_seed = 0;
    TrainConfig train;
    AgentConfig agent;
    BackendConfig backend;

    /// Checks value ranges; `check_paths` also requires referenced files to exist.
    void validate(bool check_paths = true) const
    {
        try {
            train.validate();
        } catch (const InvalidArgument& e) {
            throw ConfigError(e.what());
        }
        agent.validate();
        if (!(noise_rate >= 0.0 && noise_rate < 1.0)) {
            throw ConfigError("noise.rate must lie in [0, 1)");
        }
        if (backend.kind != "scripted" && backend.kind != "http") {
            throw ConfigError("backend.kind must be 'scripted' or 'http', got '" + backend.kind + "'");
        }
        if (!(backend.temperature >= 0.0)) {
            throw ConfigError("backend.temperature must be >= 0");
        }
        if (!check_paths) {
            return;
        }
        if (dataset.empty() || !std::filesystem::exists(dataset)) {
            throw ConfigError("dataset not found: " + dataset.string());
        }
        if (!sidecar.empty() && !std::filesystem::exists(sidecar)) {
            throw ConfigError("sidecar not found: " + sidecar.string());
        }
        if (backend.kind == "scripted" && (backend.script.empty() || !std::filesystem::exists(backend.script))) {
            throw ConfigError("backend.script not found: " + backend.script.string());
        }
    }
};

namespace detail {

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p)
{
    if (p.empty()) {
        return {};
    }
    const std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out)
{
    if (j.contains(key) && !j.at(key).is_null()) {
        out = j.at(key).get<T>();
    }
}

} // namespace detail

/// Relative paths are resolved against `base` (the config file's directory).
inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {})
{
    if (!j.is_object()) {
        throw ConfigError("run config must be a JSON object");
    }
    RunConfig c;
    try {
        std::string path;
        if (detail::read_key(j, "dataset", path); !path.empty()) {
            c.dataset = detail::resolve(base, path);
        }
        path.clear();
        if (detail::read_key(j, "sidecar", path); !path.empty()) {
            c.sidecar = detail::resolve(base, path);
        }
        path.clear();
        if (detail::read_key(j, "output_dir", path); !path.empty()) {
            c.output_dir = detail::resolve(base, path);
        }
        detail::read_key(j, "densify_users", c.densify_users);
        detail::read_key(j, "split_seed", c.split_seed);
        if (j.contains("noise")) {
            const auto& n = j.at("noise");
            detail::read_key(n, "rate", c.noise_rate);
            detail::read_key(n, "seed", c.noise_seed);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            detail::read_key(t, "epochs", c.train.epochs);
            detail::read_key(t, "batch_size", c.train.batch_size);
            detail::read_key(t, "learning_rate", c.train.learning_rate);
            detail::read_key(t, "alpha", c.train.alpha);
            detail::read_key(t, "negatives_per_positive", c.train.negatives_per_positive);
            detail::read_key(t, "seed", c.train.seed);
            detail::read_key(t, "trace_every", c.train.trace_every);
            detail::read_key(t, "dim", c.train.dim);
        }
        if (j.contains("agent")) {
            const auto& a = j.at("agent");
            detail::read_key(a, "max_actions", c.agent.max_actions);
            detail::read_key(a, "decline_window", c.agent.decline_window);
            detail::read_key(a, "reflection_sample_size", c.agent.reflection_sample_size);
            detail::read_key(a, "eraser_epochs", c.agent.eraser_epochs);
            detail::read_key(a, "parallel_reflections", c.agent.parallel_reflections);
            detail::read_key(a, "seed", c.agent.seed);
            detail::read_key(a, "profile_text", c.agent.profile_text);
            detail::read_key(a, "history_actions", c.agent.history_actions);
            detail::read_key(a, "trace_tail", c.agent.trace_tail);
            detail::read_key(a, "decline_k", c.agent.decline_k);
            detail::read_key(a, "eval_ks", c.agent.eval_ks);
        }
        if (j.contains("backend")) {
            const auto& b = j.at("backend");
            detail::read_key(b, "kind", c.backend.kind);
            path.clear();
            if (detail::read_key(b, "script", path); !path.empty()) {
                c.backend.script = detail::resolve(base, path);
            }
            detail::read_key(b, "base_url", c.backend.base_url);
            detail::read_key(b, "model", c.backend.model);
            detail::read_key(b, "temperature", c.backend.temperature);
            detail::read_key(b, "max_tokens", c.backend.max_tokens);
            detail::read_key(b, "max_attempts", c.backend.max_attempts);
            if (b.contains("api_key")) {
                throw ConfigError("backend.api_key is not accepted; set RULEAGENT_API_KEY instead");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
    c.agent.model = c.backend.model;
    c.agent.temperature = c.backend.temperature;
    c.agent.max_tokens = c.backend.max_tokens;
    return c;
}

inline nlohmann::json to_json(const RunConfig& c)
{
    return {{"dataset", c.dataset.string()},
            {"sidecar", c.sidecar.string()},
            {"output_dir", c.output_dir.string()},
            {"densify_users", c.densify_users},
            {"split_seed", c.split_seed},
            {"noise", {{"rate", c.noise_rate}, {"seed", c.noise_seed}}},
            {"train",
             {{"epochs", c.train.epochs},
              {"batch_size", c.train.batch_size},
              {"learning_rate", c.train.learning_rate},
              {"alpha", c.train.alpha},
              {"negatives_per_positive", c.train.negatives_per_positive},
              {"seed", c.train.seed},
              {"trace_every", c.train.trace_every},
              {"dim", c.train.dim}}},
            {"agent",
             {{"max_actions", c.agent.max_actions},
              {"decline_window", c.agent.decline_window},
              {"reflection_sample_size", c.agent.reflection_sample_size},
              {"eraser_epochs", c.agent.eraser_epochs},
              {"parallel_reflections", c.agent.parallel_reflections},
              {"seed", c.agent.seed},
              {"profile_text", c.agent.profile_text},
              {"history_actions", c.agent.history_actions},
              {"trace_tail", c.agent.trace_tail},
              {"decline_k", c.agent.decline_k},
              {"eval_ks", c.agent.eval_ks}}},
            {"backend",
             {{"kind", c.backend.kind},
              {"script", c.backend.script.string()},
              {"base_url", c.backend.base_url},
              {"model", c.backend.model},
              {"temperature", c.backend.temperature},
              {"max_tokens", c.backend.max_tokens},
              {"max_attempts", c.backend.max_attempts}}}};
}

inline nlohmann::json read_json_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open " + path.string());
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    out << j.dump(2) << '\n';
}

struct PreparedData {
    InteractionSet full;
    SplitSets splits;
    InteractionSet noisy_train;
    NoiseLedger ledger;

    AgentData agent_data() const { return {noisy_train, splits.valid, splits.test}; }
};

inline InteractionSet load_dataset(const RunConfig& c, LoadStats* stats = nullptr)
{
    auto set = c.sidecar.empty() ? load_interactions(c.dataset, stats) : load_with_sidecar(c.dataset, c.sidecar);
    if (c.densify_users > 0) {
        set = densify_top_users(set, c.densify_users);
    }
    return set;
}

/// Load, optionally densify, split 7:1:2 and inject noise into the train split.
/// Injected pairs avoid every observed interaction of the full set.
inline PreparedData prepare_data(const RunConfig& c)
{
    PreparedData d;
    d.full = load_dataset(c);
    d.splits = split(d.full, c.split_seed);
    if (c.noise_rate > 0.0) {
        auto noisy = inject_noise(d.splits.train, c.noise_rate, c.noise_seed, &d.full);
        d.noisy_train = std::move(noisy.set);
        d.ledger = std::move(noisy.ledger);
    } else {
        d.noisy_train = d.splits.train;
        d.ledger.rate = 0.0;
        d.ledger.seed = c.noise_seed;
    }
    return d;
}

inline std::unique_ptr<Backend> make_backend(const BackendConfig& b)
{
    if (b.kind == "scripted") {
        return std::make_unique<ScriptedBackend>(BackendScript::load(b.script));
    }
    if (b.kind == "http") {
        HttpBackendConfig h;
        h.base_url = b.base_url;
        h.max_attempts = b.max_attempts;
        return std::make_unique<HttpBackend>(h);
    }
    throw ConfigError("unknown backend kind '" + b.kind + "'");
}

/// Writes every artifact of an agent run into `dir`.
inline void write_run_dir(const std::filesystem::path& dir, const RunConfig& cfg, const Agent& agent,
                          const RunReport& report, const Backend& backend)
{
    std::filesystem::create_directories(dir);
    write_json_file(dir / "config.json", to_json(cfg));
    backend.write_transcript(dir / "transcript.jsonl");
    persist(agent.memories(), dir);
    write_json_file(dir / "report.json", to_json(report, &agent.data().train));
    write_json_file(dir / "timing.json", to_json(report.timing));
    if (agent.initialized()) {
        save_params(agent.training().params, dir / "params.json");
        save_trace(agent.traces(), dir / "traces.bin");
    }
}

} // namespace ruleagent
