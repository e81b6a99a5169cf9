#include <fstream>
#include <map>
#include <regex>
#include <sstream>

#include <fmt/format.h>

#include "doctest.h"
#include "forge/cage_lite.hpp"
#include "forge/calibration.hpp"

using namespace forge;
using namespace forge::cage;

namespace {

Trajectory play(std::uint64_t seed, const std::vector<BlueAction>& actions) {
    auto [state, obs] = reset(seed);
    Trajectory out;
    for (const auto& a : actions) {
        auto r = step(std::move(state), a);
        out.push_back({a, r.reward, r.observation, r.breakdown});
        state = std::move(r.state);
    }
    return out;
}

std::vector<BlueAction> random_actions(std::uint64_t seed, int n) {
    std::mt19937_64 rng(seed);
    std::vector<BlueAction> out;
    for (int i = 0; i < n; ++i) out.push_back(all_actions()[rng() % all_actions().size()]);
    return out;
}

// Finds a seed whose next variate makes the attacker's action succeed (or fail).
EnvState state_with_next_draw(bool success) {
    for (std::uint64_t s = 0;; ++s) {
        auto st = reset(s).state;
        auto probe = st.rng;
        if ((uniform01(probe) < calibration::kAttackSuccessProb) == success) return st;
    }
}

}  // namespace

TEST_CASE("topology") {
    int user = 0, ent = 0, op = 0;
    for (int i = 0; i < kHostCount; ++i) {
        switch (HostId(i).subnet()) {
            case Subnet::User: ++user; break;
            case Subnet::Enterprise: ++ent; break;
            case Subnet::Operational: ++op; break;
        }
    }
    CHECK(user == 5);
    CHECK(ent == 4);
    CHECK(op == 4);
    CHECK(HostId::op_server().name() == "Op_Server0");
    CHECK_THROWS_AS(HostId(13), InvalidActionError);
    CHECK(HostId::from_name("enterprise2") == HostId(7));
    CHECK(HostId::from_name("7") == HostId(7));
    CHECK_FALSE(HostId::from_name("Nowhere"));
}

TEST_CASE("action text round-trips") {
    for (const auto& a : all_actions()) CHECK(parse_action(to_string(a)) == a);
    CHECK(all_actions().size() == 53);
    CHECK(parse_action("Restore 12") == BlueAction::restore(HostId::op_server()));
    CHECK(parse_action("sleep") == BlueAction::monitor());
    CHECK_FALSE(parse_action("Restore"));
    CHECK_FALSE(parse_action("Monitor User0"));
    CHECK_FALSE(parse_action("Patch User0"));
}

TEST_CASE("reset gives a clean initial state") {
    auto [state, obs] = reset(42);
    for (const auto& h : state.hosts) {
        CHECK(h.level == CompromiseLevel::Clean);
        CHECK_FALSE(h.decoy_present);
    }
    CHECK(state.attacker.phase == AttackPhase::Discovery);
    CHECK_FALSE(state.attacker.foothold);
    CHECK(state.step == 0);
    CHECK(obs.step_index == 0);
    CHECK(state.attacker.target_chain == kill_chain());
}

TEST_CASE("reset is bit-identical for one seed") {
    auto a = reset(42);
    auto b = reset(42);
    CHECK(a.state == b.state);
    CHECK(a.observation == b.observation);
}

TEST_CASE("different seeds diverge under sleep") {
    SleepPolicy p1, p2;
    auto t1 = run_episode(p1, 42);
    auto t2 = run_episode(p2, 43);
    bool differ = false;
    for (std::size_t i = 0; i < t1.size(); ++i)
        differ |= t1[i].reward != t2[i].reward || t1[i].observation != t2[i].observation;
    CHECK(differ);
}

TEST_CASE("restore with no compromise costs exactly one") {
    for (int h = 0; h < kHostCount; ++h) {
        auto r = step(reset(7).state, BlueAction::restore(HostId(h)));
        CHECK(r.reward == doctest::Approx(-1.0));
        CHECK(r.breakdown.compromise_penalty == 0.0);
    }
}

TEST_CASE("monitor on a clean network is free") {
    auto r = step(reset(7).state, BlueAction::monitor());
    CHECK(r.reward == 0.0);
    CHECK(r.state.step == 1);
}

TEST_CASE("root on the operational server is a severe penalty") {
    for (int impact = 0; impact < 8; ++impact) {
        auto st = reset(1).state;
        st[HostId::op_server()].level = CompromiseLevel::RootAccess;
        st.attacker.foothold = HostId::op_server();
        st.attacker.position = kAttackPlanLength - 1;
        st.attacker.impact_steps = impact;
        auto r = step(st, BlueAction::monitor());
        CHECK(r.reward <= -11.0);
        CHECK(r.reward >= -14.0);
    }
}

TEST_CASE("step errors") {
    auto st = reset(3).state;
    st.step = calibration::kEpisodeSteps;
    CHECK_THROWS_AS(step(st, BlueAction::monitor()), ProtocolError);
    CHECK_THROWS_AS(step(reset(3).state, BlueAction{ActionKind::Restore, std::nullopt}), InvalidActionError);
    CHECK_THROWS_AS(step(reset(3).state, BlueAction{ActionKind::Monitor, HostId(2)}), InvalidActionError);
}

TEST_CASE("successful exploit moves the attacker from Discovery to Access") {
    auto st = state_with_next_draw(true);
    const HostId target = kill_chain()[0];
    st[target].level = CompromiseLevel::Scanned;
    st.attacker.position = 2;
    REQUIRE(attack_plan(kill_chain(), 2).kind == AttackStep::Kind::Exploit);
    auto a = attacker_transition(st);
    CHECK(a.phase == AttackPhase::Access);
    CHECK(a.foothold == target);
    CHECK(st[target].level == CompromiseLevel::UserAccess);
}

TEST_CASE("failed draw leaves the attacker in place") {
    auto st = state_with_next_draw(false);
    st[kill_chain()[0]].level = CompromiseLevel::Scanned;
    st.attacker.position = 2;
    auto a = attacker_transition(st);
    CHECK(a.phase == AttackPhase::Discovery);
    CHECK(a.position == 2);
}

TEST_CASE("a decoy absorbs the exploit") {
    auto st = state_with_next_draw(true);
    const HostId target = kill_chain()[0];
    st[target].level = CompromiseLevel::Scanned;
    st[target].decoy_present = true;
    st.attacker.position = 2;
    auto a = attacker_transition(st);
    CHECK(a.phase == AttackPhase::Discovery);
    CHECK_FALSE(a.foothold);
    CHECK(st[target].level == CompromiseLevel::Scanned);
}

TEST_CASE("restoring the foothold regresses the phase") {
    SUBCASE("user foothold") {
        auto st = reset(5).state;
        st[kill_chain()[0]].level = CompromiseLevel::UserAccess;
        st.attacker.foothold = kill_chain()[0];
        st.attacker.position = 3;
        st.attacker.phase = AttackPhase::Access;
        auto r = step(st, BlueAction::restore(kill_chain()[0]));
        CHECK(r.state.attacker.phase < AttackPhase::Access);
        CHECK(r.state[kill_chain()[0]].level < CompromiseLevel::UserAccess);
    }
    SUBCASE("enterprise foothold falls back to the user host") {
        auto st = reset(5).state;
        st[kill_chain()[0]].level = CompromiseLevel::RootAccess;
        st[kill_chain()[1]].level = CompromiseLevel::UserAccess;
        st.attacker.foothold = kill_chain()[1];
        st.attacker.position = 6;
        st.attacker.phase = AttackPhase::LateralMovement;
        auto r = step(st, BlueAction::restore(kill_chain()[1]));
        CHECK(r.state.attacker.phase < AttackPhase::LateralMovement);
        CHECK(r.state.attacker.foothold == kill_chain()[0]);
    }
}

TEST_CASE("remove never clears root") {
    for (std::uint64_t s = 0; s < 50; ++s) {
        auto st = reset(s).state;
        st[HostId(0)].level = CompromiseLevel::RootAccess;
        auto r = step(st, BlueAction::remove(HostId(0)));
        CHECK(r.state[HostId(0)].level == CompromiseLevel::RootAccess);
    }
}

TEST_CASE("remove succeeds on user access at about the configured rate") {
    int cleaned = 0;
    const int n = 2000;
    for (int s = 0; s < n; ++s) {
        auto st = reset(std::uint64_t(s)).state;
        st[HostId(0)].level = CompromiseLevel::UserAccess;
        cleaned += step(st, BlueAction::remove(HostId(0))).state[HostId(0)].level == CompromiseLevel::Clean;
    }
    CHECK(double(cleaned) / n == doctest::Approx(calibration::kRemoveSuccessProb).epsilon(0.05));
}

TEST_CASE("reward domain holds over 10,000 random steps") {
    RandomPolicy policy;
    int steps = 0;
    for (std::uint64_t e = 0; steps < 10000; ++e) {
        for (const auto& rec : run_episode(policy, 1000 + e)) {
            ++steps;
            CHECK(rec.reward <= 0.0);
            CHECK(reward_in_domain(rec.reward));
            CHECK_FALSE((rec.reward < -3.3 && rec.reward > -10.9));
        }
    }
}

TEST_CASE("reward_in_domain boundaries") {
    for (double r : {0.0, -1.0, -1.1, -1.2, -2.0, -3.2, -11.0, -14.0}) CHECK(reward_in_domain(r));
    for (double r : {-0.5, -1.05, -1.3, -1.9, -3.3, -5.0, -10.9, -14.1}) CHECK_FALSE(reward_in_domain(r));
}

TEST_CASE("episodes last exactly 30 steps") {
    SleepPolicy sleep;
    RandomPolicy random;
    HeuristicPolicy heuristic;
    for (Policy* p : std::initializer_list<Policy*>{&sleep, &random, &heuristic})
        for (std::uint64_t s = 0; s < 5; ++s) CHECK(run_episode(*p, s).size() == 30);
}

TEST_CASE("replay equality") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto actions = random_actions(s, 30);
        const auto a = play(s, actions), b = play(s, actions);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].reward == b[i].reward);
            CHECK(a[i].observation == b[i].observation);
        }
    }
}

TEST_CASE("draw budget does not depend on the action") {
    // Same seed, different blue actions on step 0: the attacker sees the same variate.
    auto a = step(reset(11).state, BlueAction::monitor()).state;
    auto b = step(reset(11).state, BlueAction::analyse(HostId(4))).state;
    CHECK(a.rng == b.rng);
    CHECK(a.attacker == b.attacker);
}

TEST_CASE("sleep penalty is non-decreasing in attacker phase") {
    std::map<AttackPhase, std::pair<double, long>> acc;
    for (std::uint64_t e = 0; e < 1000; ++e) {
        auto [state, obs] = reset(50000 + e);
        while (!state.terminal()) {
            auto r = step(std::move(state), BlueAction::monitor());
            state = std::move(r.state);
            auto& [sum, n] = acc[state.attacker.phase];
            sum += r.reward;
            ++n;
        }
    }
    double prev = 0.0;
    for (auto phase : {AttackPhase::Discovery, AttackPhase::Access, AttackPhase::LateralMovement,
                       AttackPhase::Escalation, AttackPhase::OpServerRoot}) {
        auto [sum, n] = acc[phase];
        REQUIRE(n > 0);
        const double severity = -sum / double(n);
        CHECK(severity >= prev - 1e-12);
        prev = severity;
    }
}

TEST_CASE("baseline ordering over 100 episodes") {
    SleepPolicy sleep;
    RandomPolicy random;
    HeuristicPolicy heuristic;
    auto mean = [](Policy& p) {
        double total = 0.0;
        for (std::uint64_t s = 0; s < 100; ++s) total += episode_return(run_episode(p, 9000 + s));
        return total / 100.0;
    };
    const double s = mean(sleep), r = mean(random), h = mean(heuristic);
    CHECK(s < r);
    CHECK(r < h);
}

TEST_CASE("trajectory line format") {
    SleepPolicy sleep;
    const auto traj = run_episode(sleep, 42);
    const std::regex line(R"(step=\d+ action=(Monitor|Analyse|Remove|Restore|Decoy) target=(\S+) reward=-?\d+\.\d\d flags=([.A][.C][.F]\|){12}[.A][.C][.F])");
    std::istringstream in(format_trajectory(traj));
    std::string l;
    int n = 0;
    while (std::getline(in, l)) {
        CHECK(std::regex_match(l, line));
        CHECK(l.rfind(fmt::format("step={} ", n), 0) == 0);
        ++n;
    }
    CHECK(n == 30);
}

TEST_CASE("golden sleep trajectory") {
    const std::string path = FORGE_SOURCE_DIR "/tests/golden/sleep_seed42.txt";
    SleepPolicy sleep;
    const auto text = format_trajectory(run_episode(sleep, 42));
    std::ifstream in(path);
    REQUIRE_MESSAGE(in, "missing golden file " << path);
    std::stringstream buf;
    buf << in.rdbuf();
    CHECK(buf.str() == text);
}
