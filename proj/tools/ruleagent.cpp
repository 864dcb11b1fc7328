// ruleagent: command line front end.
//
// Every subcommand reads a JSON run config (--config) and accepts flag
// overrides named after the config keys (--split-seed, --train-epochs,
// --backend-kind, ...). Exit codes: 0 success, 1 usage error, 2 runtime error.

#include "ruleagent/agent.hpp"
#include "ruleagent/pipeline.hpp"

#include <CLI/CLI.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ruleagent;

namespace {

enum class Kind { Path, Text, Count, Real };

struct OverrideSpec {
    const char* flag;
    const char* pointer;
    Kind kind;
    const char* help;
};

const std::vector<OverrideSpec> kOverrides = {
    {"--dataset", "/dataset", Kind::Path, "interaction file, one <user>\\t<item> per line"},
    {"--sidecar", "/sidecar", Kind::Path, "id-map sidecar of a dense interaction file"},
    {"--output-dir", "/output_dir", Kind::Path, "directory receiving all artifacts"},
    {"--densify-users", "/densify_users", Kind::Count, "keep the N users with most interactions (0 = all)"},
    {"--split-seed", "/split_seed", Kind::Count, "seed of the 7:1:2 per-user split"},
    {"--noise-rate", "/noise/rate", Kind::Real, "fraction of injected noisy train pairs"},
    {"--noise-seed", "/noise/seed", Kind::Count, "seed of noise injection"},
    {"--train-epochs", "/train/epochs", Kind::Count, "epochs of a full training run"},
    {"--train-batch-size", "/train/batch_size", Kind::Count, "minibatch size"},
    {"--train-learning-rate", "/train/learning_rate", Kind::Real, "Adam learning rate"},
    {"--train-alpha", "/train/alpha", Kind::Real, "weight of the LossEraser term"},
    {"--train-negatives-per-positive", "/train/negatives_per_positive", Kind::Count, "sampled negatives per positive"},
    {"--train-seed", "/train/seed", Kind::Count, "seed of initialization and sampling"},
    {"--train-trace-every", "/train/trace_every", Kind::Count, "record losses every N epochs"},
    {"--train-dim", "/train/dim", Kind::Count, "embedding dimension"},
    {"--agent-max-actions", "/agent/max_actions", Kind::Count, "cap on planned actions"},
    {"--agent-decline-window", "/agent/decline_window", Kind::Count, "consecutive declines that stop a run"},
    {"--agent-reflection-sample-size", "/agent/reflection_sample_size", Kind::Count, "interactions per reflection"},
    {"--agent-eraser-epochs", "/agent/eraser_epochs", Kind::Count, "epochs of one LossEraser action"},
    {"--agent-parallel-reflections", "/agent/parallel_reflections", Kind::Count, "concurrent reflection calls"},
    {"--agent-seed", "/agent/seed", Kind::Count, "seed of reflection sampling"},
    {"--backend-kind", "/backend/kind", Kind::Text, "scripted or http"},
    {"--backend-script", "/backend/script", Kind::Path, "scripted backend response file"},
    {"--backend-base-url", "/backend/base_url", Kind::Text, "base URL of an OpenAI-compatible server"},
    {"--backend-model", "/backend/model", Kind::Text, "model identifier"},
    {"--backend-temperature", "/backend/temperature", Kind::Real, "sampling temperature"},
    {"--backend-max-tokens", "/backend/max_tokens", Kind::Count, "completion token limit"},
};

struct ConfigOptions {
    std::string config;
    std::map<std::string, std::string> values;
};

void add_config_options(CLI::App* cmd, ConfigOptions& opts)
{
    cmd->add_option("--config", opts.config, "JSON run config")->check(CLI::ExistingFile);
    for (const auto& o : kOverrides) {
        cmd->add_option(o.flag, opts.values[o.flag], o.help)->group("Config overrides");
    }
}

RunConfig load_config(const ConfigOptions& opts, bool check_paths = true)
{
    json j = json::object();
    fs::path base;
    if (!opts.config.empty()) {
        j = read_json_file(opts.config);
        base = fs::absolute(opts.config).parent_path();
    }
    for (const auto& o : kOverrides) {
        const auto& v = opts.values.at(o.flag);
        if (v.empty()) {
            continue;
        }
        json value;
        try {
            switch (o.kind) {
            case Kind::Path: value = fs::absolute(v).string(); break;
            case Kind::Text: value = v; break;
            case Kind::Count: value = std::stoull(v); break;
            case Kind::Real: value = std::stod(v); break;
            }
        } catch (const std::exception&) {
            throw ConfigError(std::string(o.flag) + ": not a valid value: " + v);
        }
        j[json::json_pointer(o.pointer)] = value;
    }
    auto cfg = run_config_from_json(j, base);
    cfg.validate(false);
    if (check_paths && (cfg.dataset.empty() || !fs::exists(cfg.dataset))) {
        throw ConfigError("dataset not found: '" + cfg.dataset.string() + "' (set it in --config or with --dataset)");
    }
    return cfg;
}

std::vector<std::size_t> metric_ks(const RunConfig& cfg) { return cfg.agent.eval_ks; }

json describe_set(const InteractionSet& s)
{
    return {{"users", s.num_users}, {"items", s.num_items}, {"interactions", s.size()}};
}

void save_set(const InteractionSet& s, const fs::path& dir, const std::string& name, const json& meta)
{
    save_interactions(s, dir / (name + ".tsv"));
    write_json_file(dir / (name + ".json"), sidecar_json(s, meta));
}

double seconds_since(std::chrono::steady_clock::time_point t)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

// ---- subcommands -------------------------------------------------------

int cmd_ingest(const ConfigOptions& opts)
{
    const auto cfg = load_config(opts);
    LoadStats stats;
    auto set = cfg.sidecar.empty() ? load_interactions(cfg.dataset, &stats) : load_with_sidecar(cfg.dataset, cfg.sidecar);
    if (cfg.densify_users > 0) {
        set = densify_top_users(set, cfg.densify_users);
    }
    fs::create_directories(cfg.output_dir);
    const json meta{{"source", cfg.dataset.string()},
                    {"lines", stats.lines},
                    {"duplicates_dropped", stats.duplicates},
                    {"densify_users", cfg.densify_users}};
    save_set(set, cfg.output_dir, "interactions", meta);
    auto summary = describe_set(set);
    summary["duplicates_dropped"] = stats.duplicates;
    std::cout << summary.dump(2) << '\n';
    return 0;
}

int cmd_split(const ConfigOptions& opts)
{
    const auto cfg = load_config(opts);
    const auto full = load_dataset(cfg);
    const auto parts = split(full, cfg.split_seed);
    fs::create_directories(cfg.output_dir);
    json summary;
    for (const auto& [name, set] : {std::pair<std::string, const InteractionSet*>{"train", &parts.train},
                                    {"valid", &parts.valid},
                                    {"test", &parts.test}}) {
        save_set(*set, cfg.output_dir, name, {{"split", name}, {"split_seed", cfg.split_seed}});
        summary[name] = describe_set(*set);
    }
    std::cout << summary.dump(2) << '\n';
    return 0;
}

int cmd_inject_noise(const ConfigOptions& opts)
{
    const auto cfg = load_config(opts);
    const auto data = prepare_data(cfg);
    fs::create_directories(cfg.output_dir);
    save_set(data.noisy_train, cfg.output_dir, "train_noisy",
             {{"split", "train"}, {"split_seed", cfg.split_seed}, {"noise_rate", cfg.noise_rate},
              {"noise_seed", cfg.noise_seed}});
    json injected = json::array();
    for (const auto& x : data.ledger.injected) {
        injected.push_back({{"user", x.user}, {"item", x.item}, {"user_id", data.noisy_train.user_ids[x.user]},
                            {"item_id", data.noisy_train.item_ids[x.item]}});
    }
    write_json_file(cfg.output_dir / "noise_ledger.json",
                    {{"rate", data.ledger.rate}, {"seed", data.ledger.seed}, {"injected", injected}});
    std::cout << json{{"train", data.splits.train.size()}, {"injected", data.ledger.injected.size()},
                      {"train_noisy", data.noisy_train.size()}}
                     .dump(2)
              << '\n';
    return 0;
}

int cmd_train(const ConfigOptions& opts)
{
    const auto cfg = load_config(opts);
    const auto data = prepare_data(cfg);
    auto state = TrainingState::fresh(data.noisy_train.num_users, data.noisy_train.num_items, cfg.train);
    auto trace = LossTrace::create(data.noisy_train, cfg.train.seed);
    const auto result = train_bpr(state, data.noisy_train, cfg.train, &trace);

    fs::create_directories(cfg.output_dir);
    save_params(state.params, cfg.output_dir / "params.json");
    save_trace(trace, cfg.output_dir / "traces.bin");
    {
        std::ofstream log(cfg.output_dir / "train_log.jsonl", std::ios::binary);
        write_run_log(result.reports, log);
    }
    const json report{{"train", describe_set(data.noisy_train)},
                      {"epochs", cfg.train.epochs},
                      {"final_loss", result.reports.back().mean_loss},
                      {"valid", to_json(evaluate(state.params, data.splits.valid, data.noisy_train, metric_ks(cfg)))},
                      {"test", to_json(evaluate(state.params, data.splits.test, data.noisy_train, metric_ks(cfg)))}};
    write_json_file(cfg.output_dir / "train_report.json", report);
    write_json_file(cfg.output_dir / "train_report.timing.json", {{"wall_seconds", result.wall_seconds}});
    std::cout << report.dump(2) << '\n';
    return 0;
}

int cmd_run_agent(const ConfigOptions& opts)
{
    auto cfg = load_config(opts);
    cfg.validate(true);
    // The backend is built first so a missing credential fails before any training.
    auto backend = make_backend(cfg.backend);
    const auto data = prepare_data(cfg);
    Agent agent(data.agent_data(), cfg.train, cfg.agent, *backend);
    const auto report = agent.run();
    write_run_dir(cfg.output_dir, cfg, agent, report, *backend);
    json summary{{"complete", report.complete},
                 {"stop_reason", report.stop_reason},
                 {"actions", report.actions.size()},
                 {"rules_revision", report.rules_revision},
                 {"noisy_count", report.noisy_count},
                 {"test", report.test ? to_json(*report.test) : json()}};
    std::cout << summary.dump(2) << '\n';
    if (!report.complete) {
        std::cerr << "ruleagent: run incomplete: " << report.error << '\n';
        return 2;
    }
    return 0;
}

int cmd_eval(const ConfigOptions& opts, const std::string& params_path, const std::string& split_name,
             const std::vector<std::size_t>& ks)
{
    const auto cfg = load_config(opts);
    const auto data = prepare_data(cfg);
    const fs::path params_file = params_path.empty() ? cfg.output_dir / "params.json" : fs::path(params_path);
    const auto params = load_params(params_file);
    if (params.users.rows() != data.noisy_train.num_users || params.items.rows() != data.noisy_train.num_items) {
        throw InvalidArgument("parameters do not match the configured dataset");
    }
    const auto& heldout = split_name == "valid" ? data.splits.valid : data.splits.test;
    const auto result = evaluate(params, heldout, data.noisy_train, ks.empty() ? metric_ks(cfg) : ks);
    fs::create_directories(cfg.output_dir);
    write_json_file(cfg.output_dir / ("eval_" + split_name + ".json"), to_json(result));
    std::cout << to_json(result).dump(2) << '\n';
    return 0;
}

int cmd_export_rules(const ConfigOptions& opts, const std::string& run_dir, const std::string& out_path,
                     std::size_t revision)
{
    fs::path dir = run_dir;
    if (dir.empty()) {
        dir = load_config(opts, false).output_dir;
    }
    const auto meta = read_json_file(dir / "rules.meta.json");
    const auto& history = meta.at("history");
    if (history.empty()) {
        throw LoadError("rule memory in " + dir.string() + " is empty");
    }
    const json* chosen = &history.back();
    if (revision > 0) {
        chosen = nullptr;
        for (const auto& h : history) {
            if (h.at("revision").get<std::size_t>() == revision) {
                chosen = &h;
            }
        }
        if (!chosen) {
            throw InvalidArgument("no rule revision " + std::to_string(revision));
        }
    }
    const auto text = serialize(parse_rule_text(chosen->at("text").get<std::string>()));
    if (out_path.empty()) {
        std::cout << text;
    } else {
        std::ofstream out(out_path, std::ios::binary);
        if (!out) {
            throw Error("cannot write " + out_path);
        }
        out << text;
    }
    return 0;
}

std::string read_text(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open " + p.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void check_trace_matches(const LossTrace& trace, const InteractionSet& train)
{
    if (trace.interactions != train.interactions) {
        throw InvalidArgument("traces do not cover the configured training split (different data, seeds or noise)");
    }
}

int cmd_compile_rules(const ConfigOptions& opts, const std::string& rules_path, const std::string& traces_path)
{
    const auto cfg = load_config(opts);
    const auto data = prepare_data(cfg);
    const auto rules = parse_rule_text(read_text(rules_path));
    const auto trace = load_trace(traces_path);
    check_trace_matches(trace, data.noisy_train);

    const auto verdicts = apply_rules(rules, trace);
    std::vector<Interaction> flagged;
    for (std::size_t k = 0; k < trace.size(); ++k) {
        if (verdicts.noisy[k]) {
            flagged.push_back(trace.interactions[k]);
        }
    }
    const PairSet injected(data.ledger.injected);
    std::size_t flagged_injected = 0;
    for (const auto& x : flagged) {
        flagged_injected += injected.contains(x);
    }
    const auto filtered = without(data.noisy_train, PairSet(flagged));
    auto state = TrainingState::fresh(filtered.num_users, filtered.num_items, cfg.train);
    train_bpr(state, filtered, cfg.train);

    fs::create_directories(cfg.output_dir);
    save_params(state.params, cfg.output_dir / "params_filtered.json");
    save_set(filtered, cfg.output_dir, "train_filtered", {{"rules", rules_path}});
    const json report{{"rules_nodes", rules.node_count()},
                      {"executable_leaves",
                       [&] {
                           std::size_t n = 0;
                           for (const auto* l : leaves(rules)) {
                               n += is_executable(l->predicate);
                           }
                           return n;
                       }()},
                      {"train", describe_set(data.noisy_train)},
                      {"flagged", flagged.size()},
                      {"flagged_injected", flagged_injected},
                      {"injected", data.ledger.injected.size()},
                      {"filtered_train", describe_set(filtered)},
                      {"valid", to_json(evaluate(state.params, data.splits.valid, data.noisy_train, metric_ks(cfg)))},
                      {"test", to_json(evaluate(state.params, data.splits.test, data.noisy_train, metric_ks(cfg)))}};
    write_json_file(cfg.output_dir / "compile_report.json", report);
    std::cout << report.dump(2) << '\n';
    return 0;
}

int cmd_compare_unlearning(const ConfigOptions& opts, const std::string& rules_path, double percentile)
{
    const auto cfg = load_config(opts);
    const auto data = prepare_data(cfg);
    const auto ks = metric_ks(cfg);

    // Shared starting point: a full training run on the noisy split.
    auto base = TrainingState::fresh(data.noisy_train.num_users, data.noisy_train.num_items, cfg.train);
    auto trace = LossTrace::create(data.noisy_train, cfg.train.seed);
    train_bpr(base, data.noisy_train, cfg.train, &trace);

    RuleTree rules;
    if (!rules_path.empty()) {
        rules = parse_rule_text(read_text(rules_path));
    } else {
        rules.roots.push_back(make_rule("Value Threshold", describe(PercentileThreshold{percentile})));
        canonicalize(rules);
    }
    const auto verdicts = apply_rules(rules, trace);
    std::vector<Interaction> flagged;
    std::vector<NoisyPair> noisy;
    for (std::size_t k = 0; k < trace.size(); ++k) {
        if (verdicts.noisy[k]) {
            flagged.push_back(trace.interactions[k]);
            noisy.push_back({trace.interactions[k].user, trace.interactions[k].item, 1.0});
        }
    }
    const auto clean = without(data.noisy_train, PairSet(flagged));

    auto retrain = TrainingState::fresh(clean.num_users, clean.num_items, cfg.train);
    const auto t0 = std::chrono::steady_clock::now();
    train_bpr(retrain, clean, cfg.train);
    const double retrain_seconds = seconds_since(t0);

    auto eraser = base;
    auto eraser_cfg = cfg.train;
    eraser_cfg.epochs = cfg.agent.eraser_epochs;
    const auto t1 = std::chrono::steady_clock::now();
    train_loss_eraser(eraser, clean, noisy, data.noisy_train, eraser_cfg);
    const double eraser_seconds = seconds_since(t1);

    const auto retrain_eval = evaluate(retrain.params, data.splits.test, data.noisy_train, ks);
    const auto eraser_eval = evaluate(eraser.params, data.splits.test, data.noisy_train, ks);
    const auto k_watch = cfg.agent.decline_k;
    const double gap = retrain_eval.recall(k_watch) > 0.0
                           ? std::abs(eraser_eval.recall(k_watch) - retrain_eval.recall(k_watch))
                                 / retrain_eval.recall(k_watch)
                           : 0.0;

    const json report{{"flagged", flagged.size()},
                      {"injected", data.ledger.injected.size()},
                      {"retrain", {{"epochs", cfg.train.epochs}, {"test", to_json(retrain_eval)}}},
                      {"loss_eraser", {{"epochs", eraser_cfg.epochs}, {"test", to_json(eraser_eval)}}},
                      {"watched_k", k_watch},
                      {"relative_recall_gap", gap}};
    const json timing{{"retrain_seconds", retrain_seconds},
                      {"loss_eraser_seconds", eraser_seconds},
                      {"speedup", eraser_seconds > 0.0 ? retrain_seconds / eraser_seconds : 0.0}};
    fs::create_directories(cfg.output_dir);
    write_json_file(cfg.output_dir / "compare_unlearning.json", report);
    write_json_file(cfg.output_dir / "compare_unlearning.timing.json", timing);
    auto printed = report;
    printed["timing"] = timing;
    std::cout << printed.dump(2) << '\n';
    return 0;
}

int cmd_report(const ConfigOptions& opts, const std::string& run_dir)
{
    fs::path dir = run_dir;
    if (dir.empty()) {
        dir = load_config(opts, false).output_dir;
    }
    const auto report = read_json_file(dir / "report.json");
    std::string out;
    out += "run: " + dir.string() + "\n";
    out += "complete: " + std::string(report.at("complete").get<bool>() ? "yes" : "no") + " ("
           + report.at("stop_reason").get<std::string>() + ")\n";
    if (report.contains("error")) {
        out += "error: " + report.at("error").get<std::string>() + "\n";
    }
    out += "actions:\n";
    for (const auto& a : report.at("actions")) {
        out += "  " + std::to_string(a.at("index").get<std::size_t>()) + ". " + a.at("kind").get<std::string>();
        if (a.contains("eval_outcome")) {
            out += "  " + a.at("eval_outcome").dump();
        }
        out += "\n";
    }
    out += "noisy interactions: " + std::to_string(report.at("noisy_count").get<std::size_t>()) + " of "
           + std::to_string(report.at("confidence").size()) + "\n";
    if (!report.at("test").is_null()) {
        out += "test: " + report.at("test").dump() + "\n";
    }
    out += "rules (revision " + std::to_string(report.at("rules_revision").get<std::size_t>()) + "):\n";
    out += report.at("rules").get<std::string>();
    if (fs::exists(dir / "timing.json")) {
        out += "timing: " + read_json_file(dir / "timing.json").dump() + "\n";
    }
    std::ofstream(dir / "summary.txt", std::ios::binary) << out;
    std::cout << out;
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"ruleagent: agent-driven denoising rule discovery for implicit-feedback recommenders"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    std::map<std::string, ConfigOptions> opts;
    const auto sub = [&](const char* name, const char* help) {
        auto* cmd = app.add_subcommand(name, help);
        add_config_options(cmd, opts[name]);
        return cmd;
    };

    sub("ingest", "Load a raw interaction file, drop duplicates, optionally densify, and write it with an id sidecar");
    sub("split", "Write the 7:1:2 per-user train/valid/test split");
    sub("inject-noise", "Write the train split with injected noisy pairs and the noise ledger");
    sub("train", "Train GMF with BPR on the (noisy) train split; write params, traces and metrics");
    sub("run-agent", "Run the full agent loop and write the run directory");

    auto* eval = sub("eval", "Evaluate saved parameters on the validation or test split");
    std::string params_path;
    std::string split_name = "test";
    std::vector<std::size_t> ks;
    eval->add_option("--params", params_path, "parameter file (default <output-dir>/params.json)");
    eval->add_option("--split", split_name, "held-out split")->check(CLI::IsMember({"valid", "test"}));
    eval->add_option("--ks", ks, "cutoffs K (default: agent.eval_ks)")->delimiter(',');

    auto* export_rules = sub("export-rules", "Print or write the rule tree stored in a run directory");
    std::string run_dir;
    std::string out_path;
    std::size_t revision = 0;
    export_rules->add_option("--run", run_dir, "run directory (default <output-dir>)");
    export_rules->add_option("--out", out_path, "output file (default stdout)");
    export_rules->add_option("--revision", revision, "rule revision (default latest)");

    auto* compile = sub("compile-rules", "Filter the train split with exported rules and retrain from scratch");
    std::string rules_path;
    std::string traces_path;
    compile->add_option("--rules", rules_path, "rule text file")->required()->check(CLI::ExistingFile);
    compile->add_option("--traces", traces_path, "loss traces (traces.bin)")->required()->check(CLI::ExistingFile);

    auto* compare = sub("compare-unlearning", "Compare LossEraser continuation with full re-training on the cleaned split");
    std::string compare_rules;
    double percentile = 0.8;
    compare->add_option("--rules", compare_rules, "rule text selecting the noisy pairs")->check(CLI::ExistingFile);
    compare->add_option("--percentile", percentile, "without --rules: flag losses above this nearest-rank percentile")
        ->check(CLI::Range(0.0, 1.0));

    auto* report = sub("report", "Summarize a run directory");
    report->add_option("--run", run_dir, "run directory (default <output-dir>)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const auto* cmd = app.get_subcommands().front();
        const std::string name = cmd->get_name();
        const auto& o = opts.at(name);
        if (name == "ingest") return cmd_ingest(o);
        if (name == "split") return cmd_split(o);
        if (name == "inject-noise") return cmd_inject_noise(o);
        if (name == "train") return cmd_train(o);
        if (name == "run-agent") return cmd_run_agent(o);
        if (name == "eval") return cmd_eval(o, params_path, split_name, ks);
        if (name == "export-rules") return cmd_export_rules(o, run_dir, out_path, revision);
        if (name == "compile-rules") return cmd_compile_rules(o, rules_path, traces_path);
        if (name == "compare-unlearning") return cmd_compare_unlearning(o, compare_rules, percentile);
        if (name == "report") return cmd_report(o, run_dir);
    } catch (const std::exception& e) {
        std::cerr << "ruleagent: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
