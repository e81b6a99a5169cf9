#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "forge/metrics.hpp"
#include "json.hpp"

using namespace forge;
using namespace forge::metrics;
namespace fs = std::filesystem;

namespace {

// 3,520 restores at -1.0; 9,926 failure steps, 7,346 of them below -1.1.
std::vector<PenaltyStep> appendix_c_log() {
    std::vector<PenaltyStep> log;
    for (int i = 0; i < 3520; ++i) log.push_back({-1.0, true});
    for (int i = 0; i < 9926 - 7346; ++i) log.push_back({-1.1, false});
    const double below[] = {-1.2, -2.0, -2.1, -2.2, -3.2, -11.0, -12.5, -14.0};
    for (int i = 0; i < 7346; ++i) log.push_back({below[i % 8], false});
    std::shuffle(log.begin(), log.end(), std::mt19937_64(8));
    return log;
}

protocol::FinalReport report_with(std::vector<std::vector<double>> returns, std::vector<std::optional<int>> grads = {},
                                  int stages = 6) {
    protocol::FinalReport r;
    r.config.instances = int(returns.size());
    r.config.stages = stages;
    r.graduation_distribution.assign(std::size_t(stages) + 1, 0);
    for (std::size_t i = 0; i < returns.size(); ++i) {
        protocol::InstanceReport ir;
        ir.instance = int(i);
        ir.eval_returns = returns[i];
        if (i < grads.size()) ir.graduation_stage = grads[i];
        if (ir.graduation_stage)
            ++r.graduation_distribution[std::size_t(*ir.graduation_stage - 1)];
        else
            ++r.graduation_distribution.back();
        r.instances.push_back(ir);
    }
    for (int s = 1; s <= stages; ++s) {
        protocol::StageReport sr;
        sr.stage = s;
        for (std::size_t i = 0; i < returns.size(); ++i) sr.results.push_back({int(i), s, -20.0 - double(i), false, false});
        r.stages.push_back(sr);
    }
    const auto all = r.all_eval_returns();
    double sum = 0.0;
    for (double x : all) sum += x;
    r.mean_return = sum / double(all.size());
    return r;
}

fs::path write_session(const fs::path& dir, const protocol::FinalReport& r) {
    fs::create_directories(dir);
    std::ofstream(dir / "final_report.json") << protocol::to_json(r);
    return dir;
}

fs::path scratch(const char* name) {
    auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

}  // namespace

TEST_CASE("tail risk") {
    const std::vector<double> r = {-50, -120, -160};
    CHECK(tail_risk(r, -100) == doctest::Approx(2.0 / 3.0));
    CHECK(tail_risk(r, -150) == doctest::Approx(1.0 / 3.0));
    CHECK(tail_risk(std::vector<double>{-99.9}, -100) == 0.0);
    CHECK(tail_risk(std::vector<double>{-100.0}, -100) == 0.0);
    CHECK_THROWS_AS(tail_risk(std::vector<double>{}, -100), std::domain_error);
}

TEST_CASE("tail risk is monotone in the threshold") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> d(-250.0, 0.0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> r(50);
        for (auto& x : r) x = d(rng);
        double prev = 0.0;
        for (double t = -260.0; t <= 10.0; t += 2.5) {
            const double f = tail_risk(r, t);
            CHECK(f >= prev);
            CHECK(f <= 1.0);
            prev = f;
        }
    }
}

TEST_CASE("trigger analysis on the reference log") {
    const auto log = appendix_c_log();
    const auto a = trigger_analysis(log, -1.1);
    CHECK(a.failure_steps == 9926);
    CHECK(a.true_triggers_captured == 7346);
    CHECK(a.false_positives == 0);
    REQUIRE(a.precision);
    CHECK(*a.precision == 1.0);
    CHECK(a.recall == doctest::Approx(0.740).epsilon(0.001 / 0.740));
    CHECK(std::abs(a.recall - 0.740) <= 0.001);

    const auto loose = trigger_analysis(log, -0.5);
    CHECK(loose.false_positives == 3520);
    CHECK(loose.true_triggers_captured == 9926);
    REQUIRE(loose.precision);
    CHECK(*loose.precision < 1.0);
    CHECK(*loose.precision == doctest::Approx(9926.0 / (9926.0 + 3520.0)));
    CHECK(loose.recall == 1.0);

    const auto deep = trigger_analysis(log, -20.0);
    CHECK(deep.true_triggers_captured == 0);
    CHECK(deep.false_positives == 0);
    CHECK(deep.recall == 0.0);
    CHECK_FALSE(deep.precision);
}

TEST_CASE("precision is 1 whenever tau is below the restore cost") {
    const auto log = appendix_c_log();
    for (double tau : {-1.05, -1.1, -1.15, -2.0, -3.0, -11.0, -13.0}) {
        const auto a = trigger_analysis(log, tau);
        if (a.precision) CHECK(*a.precision == 1.0);
        CHECK(a.false_positives == 0);
        CHECK(a.recall >= 0.0);
        CHECK(a.recall <= 1.0);
    }
}

TEST_CASE("trigger analysis rejects non-penalized steps") {
    std::vector<PenaltyStep> log = {{-1.0, true}, {0.0, false}};
    CHECK_THROWS_AS(trigger_analysis(log, -1.1), ValidationError);
}

TEST_CASE("penalty log CSV") {
    const auto log = appendix_c_log();
    const auto back = parse_penalty_log(penalty_log_csv(log));
    REQUIRE(back.size() == log.size());
    for (std::size_t i = 0; i < log.size(); i += 97) {
        CHECK(back[i].reward == log[i].reward);
        CHECK(back[i].is_restore == log[i].is_restore);
    }
    const auto parsed = parse_penalty_log("reward,is_restore\n# comment\n-1.0,true\n-2.1,0\n\n-11.0,false\n");
    REQUIRE(parsed.size() == 3);
    CHECK(parsed[0].is_restore);
    CHECK_FALSE(parsed[2].is_restore);
    CHECK_THROWS_AS(parse_penalty_log("reward,is_restore\n-1.0,maybe\n"), ParseError);
    CHECK_THROWS_AS(parse_penalty_log("reward,is_restore\nabc,1\n"), ParseError);
    CHECK_THROWS_AS(parse_penalty_log("wrong,header\n"), ParseError);
    try {
        (void)parse_penalty_log("reward,is_restore\n-1.0,1\n-1.2,x\n");
    } catch (const ParseError& e) {
        CHECK(e.offset() == std::string("reward,is_restore\n-1.0,1\n").size());
    }
}

TEST_CASE("penalty steps from a trajectory") {
    cage::SleepPolicy sleep;
    const auto t = cage::run_episode(sleep, 3);
    const auto steps = penalty_steps(t);
    std::size_t penalized = 0;
    for (const auto& r : t) penalized += r.reward < 0.0;
    CHECK(steps.size() == penalized);
    for (const auto& s : steps) CHECK_FALSE(s.is_restore);
}

TEST_CASE("baselines") {
    const auto run = run_baselines(20, 0);
    REQUIRE(run.policies.size() == 3);
    CHECK(run.policies[0].policy == "sleep");
    CHECK(run.policies[1].policy == "random");
    CHECK(run.policies[2].policy == "heuristic");
    for (const auto& p : run.policies) CHECK(p.returns.size() == 20);
    CHECK(run.ordered == (run.policies[0].mean < run.policies[1].mean && run.policies[1].mean < run.policies[2].mean));
    CHECK_FALSE(run.penalty_log.empty());
    CHECK(nlohmann::json::parse(baselines_json(run)).at("policies").size() == 3);
}

TEST_CASE("aggregate: one session of {-10, -20}") {
    const auto root = scratch("forge_test_agg1");
    const auto dir = write_session(root / "a", report_with({{-10.0, -20.0}}));
    const auto rep = aggregate({dir});
    REQUIRE(rep.groups.size() == 1);
    CHECK(rep.groups[0].mean_return == doctest::Approx(-15.0));
    CHECK(rep.groups[0].sd_return == doctest::Approx(std::sqrt(50.0)));
    CHECK(rep.groups[0].sd_return == doctest::Approx(7.07).epsilon(0.001));
    CHECK(rep.groups[0].episodes == 2);
    CHECK(nlohmann::json::parse(aggregate_json(rep)).at("sd_convention") == "sample (n-1)");
    fs::remove_all(root);
}

TEST_CASE("aggregate: two identical sessions pool to the session mean") {
    const auto root = scratch("forge_test_agg2");
    const auto r = report_with({{-30.0, -12.0}, {-55.5, -8.25}, {-101.0, -20.0}});
    const auto rep = aggregate({write_session(root / "a", r), write_session(root / "b", r)});
    REQUIRE(rep.groups.size() == 1);
    CHECK(rep.groups[0].sessions == 2);
    CHECK(rep.groups[0].mean_return == doctest::Approx(r.mean_return));
    CHECK(rep.groups[0].major_failure_rate == doctest::Approx(1.0 / 6.0));
    fs::remove_all(root);
}

TEST_CASE("aggregate: graduation distribution row") {
    const auto root = scratch("forge_test_agg3");
    std::vector<std::vector<double>> returns(10, {-20.0});
    std::vector<std::optional<int>> grads(10);
    grads[1] = grads[4] = grads[8] = 2;
    const auto rep = aggregate({write_session(root / "a", report_with(returns, grads))});
    REQUIRE(rep.groups.size() == 1);
    CHECK(rep.groups[0].graduation_distribution == std::vector<int>{0, 3, 0, 0, 0, 0, 7});
    CHECK(render_aggregate(rep).find("Never") != std::string::npos);
    fs::remove_all(root);
}

TEST_CASE("aggregate: malformed sessions are skipped") {
    const auto root = scratch("forge_test_agg4");
    const auto good = write_session(root / "good", report_with({{-10.0}}));
    fs::create_directories(root / "broken");
    std::ofstream(root / "broken" / "final_report.json") << "{\"config\": ";
    fs::create_directories(root / "empty");
    const auto rep = aggregate({good, root / "broken", root / "empty", root / "missing"});
    CHECK(rep.sessions.size() == 1);
    CHECK(rep.skipped.size() == 3);
    fs::remove_all(root);
}

TEST_CASE("aggregate: groups and token totals") {
    const auto root = scratch("forge_test_agg5");
    auto forge_cfg = protocol::ProtocolConfig{};
    forge_cfg.instances = 3;
    forge_cfg.stages = 2;
    forge_cfg.backend = protocol::BackendKind::Llm;
    auto refl = forge_cfg;
    refl.condition = protocol::TrainingCondition::Reflexion;
    auto nograd = forge_cfg;
    nograd.graduation_enabled = false;
    std::vector<fs::path> dirs;
    connector::PhaseTotals expected;
    int k = 0;
    for (const auto& c : {forge_cfg, refl, nograd, forge_cfg}) {
        auto cc = c;
        cc.base_seed = std::uint64_t(k);
        const auto r = protocol::run_protocol(cc).report;
        expected.adaptation += r.tokens.adaptation;
        expected.evaluation += r.tokens.evaluation;
        dirs.push_back(write_session(root / std::to_string(k++), r));
    }
    const auto rep = aggregate(dirs);
    CHECK(rep.sessions.size() == 4);
    CHECK(rep.tokens == expected);
    std::set<std::string> labels;
    for (const auto& g : rep.groups) labels.insert(g.condition);
    CHECK(labels == std::set<std::string>{"best", "best-nograd", "individual"});
    connector::PhaseTotals group_sum;
    for (const auto& g : rep.groups) {
        group_sum.adaptation += g.tokens.adaptation;
        group_sum.evaluation += g.tokens.evaluation;
    }
    CHECK(group_sum == expected);
    const auto text = render_aggregate(rep);
    CHECK(text.find("prompt") != std::string::npos);
    CHECK(text.find("completion") != std::string::npos);
    fs::remove_all(root);
}

TEST_CASE("session summary") {
    auto c = protocol::ProtocolConfig{};
    c.instances = 4;
    c.stages = 3;
    const auto r = protocol::run_protocol(c).report;
    const auto s = summarize(r);
    CHECK(s.condition == "best");
    CHECK(s.instances == 4);
    CHECK(s.instance_returns.size() == 4);
    CHECK(s.mean_return == doctest::Approx(r.mean_return));
    CHECK(s.graduation_distribution == r.graduation_distribution);
    CHECK(s.stages.size() == 3);
    CHECK(s.volatility_pooled >= 0.0);
    int aborts = 0;
    for (const auto& st : r.stages) aborts += st.aborts;
    CHECK(s.aborts == aborts);
    CHECK(condition_label(protocol::FinalReport{}) == "zero-shot");
}

TEST_CASE("sweep") {
    auto c = protocol::ProtocolConfig{};
    c.instances = 3;
    c.stages = 2;
    c.base_seed = 4;
    const auto entries = sweep_tau(c, {-1.1, -20.0});
    REQUIRE(entries.size() == 2);
    for (const auto& e : entries) REQUIRE(e.summary);
    CHECK(entries[0].summary->tau == -1.1);
    CHECK(entries[0].summary->aborts > 0);
    const auto& deep = *entries[1].summary;
    CHECK(deep.aborts == 0);
    CHECK(deep.artifacts_added == 0);

    // No trigger ever fires: evaluation equals zero-shot behavior.
    auto zc = c;
    zc.tau = -20.0;
    protocol::BackendBundle bundle(zc);
    const auto z = protocol::zero_shot(zc, bundle.backends());
    CHECK(deep.mean_return == doctest::Approx(z.mean_return));

    const auto again = sweep_tau(c, {-1.1, -20.0});
    CHECK(sweep_json(again) == sweep_json(entries));
    CHECK_THROWS_AS(sweep_tau(c, {-1.1, 0.0}), ConfigError);
}

TEST_CASE("sweep: serial and parallel agree, and a bad tau run is isolated") {
    auto c = protocol::ProtocolConfig{};
    c.instances = 3;
    c.stages = 2;
    const auto serial = sweep_tau(c, {-1.1, -2.0, -3.0, -11.0});
    const auto parallel = sweep_tau(c, {-1.1, -2.0, -3.0, -11.0}, SweepOptions{std::nullopt, true});
    CHECK(sweep_json(serial) == sweep_json(parallel));
    CHECK(nlohmann::json::parse(sweep_json(serial)).at("runs").size() == 4);

    // Replay mode without the fixture file: every tau fails on its own.
    auto broken = c;
    broken.backend = protocol::BackendKind::Llm;
    broken.connector.mode = protocol::ConnectorMode::Replay;
    broken.connector.fixtures = "/nonexistent/fixtures.json";
    const auto failed = sweep_tau(broken, {-1.1, -2.0});
    REQUIRE(failed.size() == 2);
    for (const auto& e : failed) CHECK((!e.summary || e.summary->failed));
}
