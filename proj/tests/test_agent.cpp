#include "fixtures.hpp"

#include <gtest/gtest.h>

using namespace ruleagent;
using ruleagent::testing::block_split;
using ruleagent::testing::evaluations_until_stop;
using ruleagent::testing::planning_script;

namespace {

TrainConfig tiny_config(std::uint64_t seed = 3)
{
    auto cfg = ruleagent::testing::fixture_train_config(seed);
    cfg.epochs = 4;
    cfg.dim = 8;
    return cfg;
}

AgentData tiny_data(std::uint64_t seed = 3)
{
    return block_split(12, 40, 2, 0.1, seed).agent_data();
}

ScriptedBackend scripted(const nlohmann::json& j)
{
    return ScriptedBackend(BackendScript::from_json(j));
}

// Echoes priors like the scripted policy but allows parallel calls.
class ConcurrentEcho final : public Backend {
public:
    bool concurrent() const override { return true; }

protected:
    std::string do_complete(const ChatRequest& r) override
    {
        const auto score = detail::text_between(r.user, "Previous assessment: score ", ". Explanation: ");
        const auto reason = detail::text_between(r.user, ". Explanation: ", "\n");
        return "The confidence score is " + std::string(*score) + ". The explanation: " + std::string(*reason);
    }
};

} // namespace

TEST(ParsePlanning, Examples)
{
    EXPECT_EQ(parse_planning_response("The next action is: c. The reason for this decision is: noisy pairs remain."),
              (PlanDecision{ActionKind::LossEraserTraining, "noisy pairs remain"}));
    EXPECT_EQ(parse_planning_response("Thinking...\nthe NEXT action is: **B**.\nThe reason for this decision is:\n"
                                      "rules  are\nstale"),
              (PlanDecision{ActionKind::RuleReflection, "rules are stale"}));
    EXPECT_EQ(parse_planning_response("The next action is: <d>. The reason for this decision is: check.").kind,
              ActionKind::ModelEvaluation);
}

TEST(ParsePlanning, Rejects)
{
    for (const char* bad : {"", "I pick c because it is good.", "The next action is: e. The reason for this decision is: x.",
                            "The next action is: ab. The reason for this decision is: x.",
                            "The next action is: a.", "The next action is: a. The reason for this decision is: .",
                            "The next action is:   "}) {
        EXPECT_THROW(parse_planning_response(bad), ParseError) << bad;
    }
}

TEST(ParseConfidence, Examples)
{
    const auto u = parse_confidence_response("The confidence score is 0.35. The explanation: loss stays high.");
    EXPECT_EQ(u.score, 0.35);
    EXPECT_EQ(u.explanation, "loss stays high");
    EXPECT_EQ(parse_confidence_response("the confidence score is **2**. The explanation: fine").score, 2.0);
    EXPECT_EQ(parse_confidence_response("The confidence score is 0. The explanation: noise").score, 0.0);
}

TEST(ParseConfidence, Rejects)
{
    for (const char* bad : {"The confidence score is 2.5. The explanation: x",
                            "The confidence score is -0.1. The explanation: x",
                            "The confidence score is nan. The explanation: x",
                            "The confidence score is high. The explanation: x",
                            "The confidence score is 0.5 or so. The explanation: x",
                            "The confidence score is 0.5.", "The confidence score is 0.5. The explanation:",
                            "score: 0.5"}) {
        EXPECT_THROW(parse_confidence_response(bad), ParseError) << bad;
    }
}

TEST(ParseRules, Examples)
{
    const auto t = parse_rules_response(ruleagent::testing::percentile_rule_response(75));
    ASSERT_EQ(t.roots.size(), 1u);
    ASSERT_EQ(t.roots[0].children.size(), 1u);
    EXPECT_EQ(t.roots[0].children[0].predicate, Predicate(PercentileThreshold{0.75}));
    EXPECT_THROW(parse_rules_response("Rule-1(A): x"), ParseError);
    EXPECT_THROW(parse_rules_response("The updated denoising rules are:\n(none)"), ParseError);
    std::string why;
    EXPECT_TRUE(ruleagent::testing::outline_matches(
        parse_rules_response(std::string("The updated denoising rules are:\n") + ruleagent::testing::kOutline), why))
        << why;
}

TEST(Prompts, PlanningListsActionsAndFormat)
{
    const std::vector<ConfidenceEntry> sample{{0, 1, 0.5, "high loss", 1}};
    ActionRecord rec;
    rec.index = 1;
    rec.kind = ActionKind::Initialization;
    rec.reason = "init";
    const auto p = planning_prompt(sample, 10, 3, initial_rules(), {rec}, 1);
    for (const char* s : {"Confidence Reflection", "Rule Reflection", "LossEraser Training", "Model Evaluation",
                          "(1 of 10 entries; 3 entries", "Rule-1(Value-Related)", "Action 1:", kPlanMarker.data(),
                          kPlanReasonMarker.data()}) {
        EXPECT_NE(p.find(s), std::string::npos) << s;
    }
}

TEST(Prompts, ConfidenceCarriesVerdictTailAndExactPrior)
{
    std::vector<double> losses(60);
    for (std::size_t k = 0; k < losses.size(); ++k) {
        losses[k] = static_cast<double>(k);
    }
    const ConfidenceEntry prior{2, 5, 0.1 + 0.2, "because", 1};
    const auto p = confidence_prompt(initial_rules(), prior, losses, "clean", 50);
    EXPECT_NE(p.find("Rule engine verdict: clean\n"), std::string::npos);
    EXPECT_NE(p.find("[... 10.0000, "), std::string::npos);
    EXPECT_EQ(p.find(" 9.0000,"), std::string::npos);
    const auto echoed = *detail::text_between(p, "Previous assessment: score ", ". Explanation: ");
    EXPECT_EQ(std::stod(std::string(echoed)), 0.1 + 0.2);
}

TEST(Agent, ConstructorValidates)
{
    auto backend = scripted({{"planning", "x"}});
    AgentData empty{ruleagent::testing::empty_like(2, 2), {}, {}};
    EXPECT_THROW(Agent(empty, tiny_config(), AgentConfig{}, backend), EmptyDatasetError);
    AgentConfig bad;
    bad.decline_k = 5;
    EXPECT_THROW(Agent(tiny_data(), tiny_config(), bad, backend), ConfigError);
    bad = AgentConfig{};
    bad.eraser_epochs = 0;
    EXPECT_THROW(Agent(tiny_data(), tiny_config(), bad, backend), ConfigError);
    Agent agent(tiny_data(), tiny_config(), AgentConfig{}, backend);
    EXPECT_THROW(agent.plan(), InvalidArgument);
}

TEST(Agent, InitializationSeedsConfidenceFromLossRanks)
{
    auto backend = scripted({{"planning", "x"}});
    Agent agent(tiny_data(), tiny_config(), AgentConfig{}, backend);
    agent.initialize();
    const auto& m = agent.memories();
    const auto& train = agent.data().train;
    ASSERT_EQ(m.confidence.size(), train.size());
    EXPECT_EQ(m.rules.current().revision, 1u);
    EXPECT_EQ(m.rules.current().roots[0].label, kInitialRuleLabel);
    ASSERT_EQ(m.actions.size(), 1u);
    EXPECT_EQ(m.actions.back().kind, ActionKind::Initialization);
    EXPECT_EQ(backend.calls(), 0u);

    const auto& losses = agent.traces().latest();
    const auto ranks = percentile_ranks(losses);
    for (std::size_t k = 0; k < train.size(); ++k) {
        const auto& x = agent.traces().interactions[k];
        const auto e = m.confidence.get(x.user, x.item);
        ASSERT_TRUE(e);
        EXPECT_DOUBLE_EQ(e->score, 2.0 * (1.0 - ranks[k]));
        for (std::size_t j = 0; j < train.size(); ++j) {
            if (losses[j] > losses[k]) {
                const auto& y = agent.traces().interactions[j];
                EXPECT_LE(m.confidence.get(y.user, y.item)->score, e->score);
            }
        }
    }
}

TEST(Agent, PlanRepromptsOnceThenFails)
{
    auto backend = scripted({{"planning", {{"responses", {"whatever", "The next action is: b. The reason for this "
                                                                      "decision is: rules first."}},
                                           {"cycle", false}}}});
    Agent agent(tiny_data(), tiny_config(), AgentConfig{}, backend);
    agent.initialize();
    EXPECT_EQ(agent.plan(), (PlanDecision{ActionKind::RuleReflection, "rules first"}));
    EXPECT_EQ(agent.memories().actions.back().index, 2u);
    const auto t = backend.transcript();
    ASSERT_EQ(t.size(), 2u);
    EXPECT_NE(t[1].request.user.find(kRepromptSuffix), std::string::npos);
    EXPECT_EQ(t[1].request.action, 2u);

    auto junk = scripted({{"planning", "no idea"}});
    Agent stuck(tiny_data(), tiny_config(), AgentConfig{}, junk);
    stuck.initialize();
    EXPECT_THROW(stuck.plan(), PlanningError);
    EXPECT_EQ(junk.calls(), 2u);
    EXPECT_EQ(stuck.memories().actions.size(), 1u);
}

TEST(Agent, EchoReflectionLeavesScoresBitIdentical)
{
    auto backend = scripted({{"planning", planning_script({'a'})}, {"confidence_reflection", {{"policy", "echo_prior"}}}});
    AgentConfig a;
    a.reflection_sample_size = 25;
    Agent agent(tiny_data(), tiny_config(), a, backend);
    agent.initialize();
    const auto before = agent.memories().confidence;
    agent.execute(agent.plan().kind);
    EXPECT_EQ(backend.calls(), 26u);
    const auto& after = agent.memories().confidence;
    ASSERT_EQ(after.size(), before.size());
    std::size_t revised = 0;
    for (const auto& [key, e] : after.entries()) {
        const auto old = before.get(key.first, key.second);
        EXPECT_EQ(e.score, old->score);
        EXPECT_EQ(e.reason, detail::strip_final_period(old->reason));
        revised += e.revised_at != old->revised_at;
    }
    EXPECT_EQ(revised, 25u);
}

TEST(Agent, ConcurrentReflectionMatchesSequential)
{
    AgentConfig a;
    a.reflection_sample_size = 30;
    a.parallel_reflections = 4;
    auto seq = scripted({{"planning", "x"}, {"confidence_reflection", {{"policy", "echo_prior"}}}});
    ConcurrentEcho par;
    Agent s(tiny_data(), tiny_config(), a, seq);
    Agent p(tiny_data(), tiny_config(), a, par);
    s.initialize();
    p.initialize();
    s.reflect_confidence();
    p.reflect_confidence();
    EXPECT_EQ(s.memories().confidence, p.memories().confidence);
    EXPECT_EQ(par.calls(), 30u);
}

TEST(Agent, RuleVerdictPolicyFollowsTheEngine)
{
    auto backend = scripted({{"planning", "x"},
                             {"rule_reflection", ruleagent::testing::percentile_rule_response(80)},
                             {"confidence_reflection", {{"policy", "rule_verdict"}}}});
    AgentConfig a;
    a.reflection_sample_size = 1'000'000;
    Agent agent(tiny_data(), tiny_config(), a, backend);
    agent.initialize();
    agent.reflect_rules();
    agent.reflect_confidence();
    const auto verdicts = apply_rules(agent.memories().rules.current(), agent.traces());
    for (std::size_t k = 0; k < agent.traces().size(); ++k) {
        const auto& x = agent.traces().interactions[k];
        EXPECT_EQ(agent.memories().confidence.get(x.user, x.item)->score, verdicts.noisy[k] ? 0.5 : 1.5);
    }
}

TEST(Agent, ReflectionKeepsPriorOnGarbage)
{
    auto backend = scripted({{"planning", "x"}, {"confidence_reflection", "I cannot say."}});
    AgentConfig a;
    a.reflection_sample_size = 5;
    Agent agent(tiny_data(), tiny_config(), a, backend);
    agent.initialize();
    const auto before = agent.memories().confidence;
    agent.reflect_confidence();
    EXPECT_EQ(agent.memories().confidence, before);
    EXPECT_EQ(backend.calls(), 10u);
    EXPECT_NE(agent.log().back().find("updated 0 of 5"), std::string::npos);
}

TEST(Agent, RuleReflectionMergesOrKeeps)
{
    auto backend = scripted({{"planning", "x"},
                             {"rule_reflection",
                              {{"responses", {ruleagent::testing::percentile_rule_response(90), "nothing", "still nothing"}},
                               {"cycle", false}}}});
    Agent agent(tiny_data(), tiny_config(), AgentConfig{}, backend);
    agent.initialize();
    agent.reflect_rules();
    const auto& rules = agent.memories().rules.current();
    EXPECT_EQ(rules.revision, 2u);
    EXPECT_EQ(rules.provenance, "rule_reflection@1");
    ASSERT_EQ(rules.roots.size(), 1u);
    EXPECT_EQ(rules.roots[0].children.at(0).predicate, Predicate(PercentileThreshold{0.9}));
    agent.reflect_rules();
    EXPECT_EQ(agent.memories().rules.current().revision, 2u);
    EXPECT_EQ(backend.calls(), 3u);
}

TEST(Agent, TrainingExtendsTracesAndEvaluationAttaches)
{
    auto backend = scripted({{"planning", "x"}});
    AgentConfig a;
    a.eraser_epochs = 3;
    Agent agent(tiny_data(), tiny_config(), a, backend);
    agent.initialize();
    const auto epochs = agent.traces().epochs.size();
    const auto done = agent.training().epochs_done;
    agent.execute(ActionKind::LossEraserTraining);
    EXPECT_EQ(agent.training().epochs_done, done + 3);
    EXPECT_EQ(agent.traces().epochs.size(), epochs + 3);
    EXPECT_NE(agent.log().back().find("noisy pairs unlearned over 3 epochs"), std::string::npos);

    const auto r = agent.execute_evaluation();
    const auto& last = agent.memories().actions.back();
    EXPECT_EQ(last.kind, ActionKind::ModelEvaluation);
    EXPECT_EQ(last.eval_outcome, r);
    EXPECT_TRUE(r.at.count(10) && r.at.count(20));
}

TEST(Termination, MaxActionsBoundsAFlatRun)
{
    EXPECT_EQ(evaluations_until_stop({0.5}, 7), 7u);
    EXPECT_EQ(evaluations_until_stop({0.1, 0.2, 0.3, 0.4}, 4), 4u);
}

TEST(Termination, FiveStrictDeclinesAfterReference)
{
    EXPECT_EQ(evaluations_until_stop({0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2}, 30), 6u);
    // an equal value is not a decline and restarts the count
    EXPECT_EQ(evaluations_until_stop({0.9, 0.8, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3}, 30), 8u);
}

TEST(Termination, RiseResetsTheCounter)
{
    EXPECT_EQ(evaluations_until_stop({1.0, 0.9, 0.8, 0.7, 0.6, 0.65, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0}, 30), 11u);
}

TEST(Agent, RunIsDeterministic)
{
    const auto once = [] {
        auto backend = scripted({{"planning", planning_script({'b', 'a', 'c', 'd'})},
                                 {"rule_reflection", ruleagent::testing::percentile_rule_response(80)},
                                 {"confidence_reflection", {{"policy", "rule_verdict"}}}});
        AgentConfig a;
        a.max_actions = 6;
        a.eraser_epochs = 2;
        a.reflection_sample_size = 20;
        a.seed = 9;
        Agent agent(tiny_data(), tiny_config(), a, backend);
        const auto report = agent.run();
        EXPECT_TRUE(report.complete);
        EXPECT_EQ(report.stop_reason, "max_actions");
        EXPECT_EQ(report.actions.size(), 7u);
        return to_json(report).dump();
    };
    EXPECT_EQ(once(), once());
}

TEST(Agent, PlanningFailureYieldsIncompleteReport)
{
    auto backend = scripted({{"planning", {{"responses", {"The next action is: d. The reason for this decision is: "
                                                          "look.", "?", "?"}},
                                           {"cycle", false}}}});
    Agent agent(tiny_data(), tiny_config(), AgentConfig{}, backend);
    const auto report = agent.run();
    EXPECT_FALSE(report.complete);
    EXPECT_EQ(report.stop_reason, "error");
    EXPECT_FALSE(report.error.empty());
    EXPECT_FALSE(report.test.has_value());
    EXPECT_EQ(report.actions.size(), 2u);
    EXPECT_TRUE(to_json(report).contains("error"));
}

TEST(Fuzz, ParsersOnlyThrowParseErrors)
{
    const auto st = ruleagent::testing::fuzz_parsers(3000, 11);
    EXPECT_EQ(st.other, 0u);
    EXPECT_EQ(st.out_of_range, 0u);
    EXPECT_GT(st.rejected, 0u);
    EXPECT_GT(st.parsed, 0u);
}

TEST(Fuzz, ReflectionKeepsScoresInRange)
{
    EXPECT_TRUE(ruleagent::testing::fuzzed_reflection_keeps_ranges(300, 12));
}
