#include "forge/reflexion.hpp"

#include <fstream>

#include <fmt/format.h>

#include "forge/errors.hpp"
#include "forge/calibration.hpp"
#include "forge/seeds.hpp"
#include "json.hpp"

namespace forge::reflexion {

using nlohmann::json;

std::string_view to_string(AttemptStatus status) {
    switch (status) {
        case AttemptStatus::Completed: return "completed";
        case AttemptStatus::Aborted: return "aborted";
        case AttemptStatus::Errored: return "errored";
    }
    return "?";
}

void validate(const FailureSnapshot& s, double tau) {
    if (!(s.failing_reward < tau)) throw ValidationError("snapshot failing reward is not below tau");
    if (s.trajectory.size() != std::size_t(s.failing_step) + 1)
        throw ValidationError("snapshot trajectory must end at the failing step");
    if (s.trajectory.back().reward != s.failing_reward)
        throw ValidationError("snapshot failing reward does not match its last step");
}

std::string snapshot_json(const FailureSnapshot& s) {
    json hosts = json::array();
    for (int i = 0; i < cage::kHostCount; ++i) {
        const auto& h = s.env_state.hosts[std::size_t(i)];
        hosts.push_back({{"host", cage::HostId(i).name()},
                         {"level", cage::to_string(h.level)},
                         {"decoy", h.decoy_present}});
    }
    const auto& atk = s.env_state.attacker;
    json j = {{"instance", s.tag.instance},
              {"stage", s.tag.stage},
              {"attempt", s.tag.attempt},
              {"failing_step", s.failing_step},
              {"failing_reward", s.failing_reward},
              {"trajectory", cage::format_trajectory(s.trajectory)},
              {"memory_at_failure", json::parse(memory::save(s.memory_at_failure))},
              {"env_state",
               {{"step", s.env_state.step},
                {"hosts", hosts},
                {"attacker_phase", cage::to_string(atk.phase)},
                {"attacker_position", atk.position}}}};
    return j.dump(2) + "\n";
}

namespace {

struct Played {
    cage::Trajectory trajectory;
    cage::EnvState state;
    bool aborted = false;
};

// Plays until the episode ends or, when `tau` is set, until a step reward
// falls strictly below it.
Played play(const InstanceMemory& memory, std::uint64_t seed, std::optional<double> tau,
            const agents::ActingBackend& backend, Representation rep, CallContext& ctx) {
    auto [state, obs] = cage::reset(seed);
    Played out;
    out.trajectory.reserve(calibration::kEpisodeSteps);
    while (!state.terminal()) {
        const auto view = agents::EpisodeView::from_history(out.trajectory, obs);
        const auto decision = agents::decide(view, memory, backend, rep, ctx);
        auto result = cage::step(std::move(state), decision.action);
        out.trajectory.push_back({decision.action, result.reward, result.observation, result.breakdown});
        state = std::move(result.state);
        obs = result.observation;
        if (tau && result.reward < *tau) {
            out.aborted = true;
            break;
        }
    }
    out.state = std::move(state);
    return out;
}

MemoryDelta single(memory::ArtifactKind kind, std::string text, const memory::Clause& clause, const AttemptTag& tag) {
    MemoryDelta d;
    d.additions.push_back({kind, memory::Role::Planner, std::move(text), clause, {tag.stage, tag.attempt, tag.instance}});
    return d;
}

}  // namespace

AttemptOutcome run_attempt(const InstanceMemory& memory, std::uint64_t env_seed, double tau,
                           const agents::ActingBackend& backend, Representation rep, CallContext& ctx,
                           AttemptTag tag) {
    if (!(tau < 0.0)) throw ValidationError("failure trigger tau must be negative");
    AttemptOutcome out;
    Played played;
    try {
        played = play(memory, env_seed, tau, backend, rep, ctx);
    } catch (const connector::ConnectorError& e) {
        out.status = AttemptStatus::Errored;
        out.error = e.what();
        ctx.event(fmt::format("attempt s{}a{} errored: {}", tag.stage, tag.attempt, e.what()));
        return out;
    }
    out.episode_return = cage::episode_return(played.trajectory);
    out.trajectory = played.trajectory;
    if (played.aborted) {
        out.status = AttemptStatus::Aborted;
        FailureSnapshot s;
        s.failing_step = int(played.trajectory.size()) - 1;
        s.failing_reward = played.trajectory.back().reward;
        s.trajectory = std::move(played.trajectory);
        s.memory_at_failure = memory;
        s.tag = tag;
        s.env_state = std::move(played.state);
        out.snapshot = std::move(s);
    }
    return out;
}

cage::Trajectory run_frozen_episode(const InstanceMemory& memory, std::uint64_t env_seed,
                                    const agents::ActingBackend& backend, Representation rep, CallContext& ctx) {
    return play(memory, env_seed, std::nullopt, backend, rep, ctx).trajectory;
}

MemoryDelta ScriptedLearner::reflect(const FailureSnapshot& s, CallContext&) const {
    const auto lesson = agents::infer_lesson(s.trajectory);
    return single(memory::ArtifactKind::Rule, memory::rule_text(lesson.rule), lesson.rule, s.tag);
}

MemoryDelta ScriptedLearner::exemplify(const FailureSnapshot& s, CallContext&) const {
    const auto lesson = agents::infer_lesson(s.trajectory);
    return single(memory::ArtifactKind::Example, memory::example_text(lesson.example, lesson.rationale),
                  lesson.example, s.tag);
}

std::string learning_prompt(const FailureSnapshot& s) {
    std::string out = fmt::format("Failure report for instance {}, stage {}, attempt {}.\n", s.tag.instance,
                                  s.tag.stage, s.tag.attempt);
    out += fmt::format("Failing step: {} (reward {:.2f}). The episode was aborted there.\n", s.failing_step,
                       s.failing_reward);
    out += "Trajectory (flags per host as anomalous_process/suspicious_connection/new_file, hosts in index order "
           "User0..User4, Enterprise0..Enterprise2, Defender, Op_Host0..Op_Host2, Op_Server0):\n";
    out += cage::format_trajectory(s.trajectory);
    out += "\nCurrent Planner memory:\n";
    out += memory::render_injection(s.memory_at_failure, memory::Role::Planner, Representation::Mixed);
    out += "\n";
    out += agents::action_reference_table();
    out += "\n";
    return out;
}

LlmLearner::LlmLearner(const connector::Connector& connector, agents::RoleDefinitions defs, std::string model,
                       int max_examples)
    : connector_(connector), defs_(std::move(defs)), model_(std::move(model)), max_examples_(max_examples) {}

template <typename Extract>
MemoryDelta LlmLearner::ask(agents::AgentRole role, const FailureSnapshot& s, CallContext& ctx,
                            Extract extract) const {
    const auto& cfg = defs_[role];
    std::vector<connector::ChatMessage> messages = {{"system", cfg.system_prompt}, {"user", learning_prompt(s)}};
    for (int round = 0; round <= agents::kMaxReprompts; ++round) {
        connector::ChatRequest req{model_, messages, cfg.sampling.temperature, cfg.sampling.max_output_tokens};
        const auto resp = connector_.complete(req);
        ctx.record(agents::to_string(role), resp);
        MemoryDelta delta = extract(resp.content);
        if (!delta.empty()) return delta;
        messages.push_back({"assistant", resp.content});
        messages.push_back({"user", "That reply contained no artifact in the required format. Try again."});
    }
    ctx.event(fmt::format("{} produced no valid artifact for s{}a{}", agents::to_string(role), s.tag.stage,
                          s.tag.attempt));
    return {};
}

MemoryDelta LlmLearner::reflect(const FailureSnapshot& s, CallContext& ctx) const {
    return ask(agents::AgentRole::Reflector, s, ctx, [&](std::string_view text) {
        MemoryDelta d;
        while (!text.empty()) {
            const auto nl = text.find('\n');
            std::string line(text.substr(0, nl));
            text = nl == std::string_view::npos ? std::string_view() : text.substr(nl + 1);
            auto start = line.find_first_not_of(" \t-*");
            if (start == std::string::npos) continue;
            line = line.substr(start);
            while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
            memory::MemoryArtifact a{memory::ArtifactKind::Rule, memory::Role::Planner, line,
                                     memory::parse_rule_text(line), {s.tag.stage, s.tag.attempt, s.tag.instance}};
            if (memory::is_valid(a)) d.additions.push_back(std::move(a));
        }
        return d;
    });
}

MemoryDelta LlmLearner::exemplify(const FailureSnapshot& s, CallContext& ctx) const {
    return ask(agents::AgentRole::Exemplifier, s, ctx, [&](std::string_view text) {
        MemoryDelta d;
        std::size_t pos = 0;
        while (int(d.additions.size()) < max_examples_ &&
               (pos = text.find("<example", pos)) != std::string_view::npos) {
            const auto end = text.find("</example>", pos);
            if (end == std::string_view::npos) break;
            const auto block = text.substr(pos, end + 10 - pos);
            memory::MemoryArtifact a{memory::ArtifactKind::Example, memory::Role::Planner, std::string(block),
                                     memory::parse_example_text(block), {s.tag.stage, s.tag.attempt, s.tag.instance}};
            if (memory::is_valid(a)) d.additions.push_back(std::move(a));
            pos = end + 10;
        }
        return d;
    });
}

MemoryDelta synthesize(const FailureSnapshot& s, Representation rep, const LearningBackend& learner,
                       CallContext& ctx) {
    MemoryDelta delta;
    if (memory::includes(rep, memory::ArtifactKind::Rule)) delta = learner.reflect(s, ctx);
    if (memory::includes(rep, memory::ArtifactKind::Example)) {
        auto examples = learner.exemplify(s, ctx);
        delta.additions.insert(delta.additions.end(), examples.additions.begin(), examples.additions.end());
    }
    return delta;
}

LoopResult reflexion_loop(InstanceMemory memory, const LoopSettings& st, const agents::ActingBackend& acting,
                          const LearningBackend& learner, CallContext& ctx) {
    if (st.attempts < 1) throw ValidationError("attempts per stage must be >= 1");
    LoopResult result;
    for (int attempt = 1; attempt <= st.attempts; ++attempt) {
        const AttemptTag tag{st.instance, st.stage, attempt};
        const auto seed = seeds::attempt_seed(st.base_seed, st.stage, st.instance, attempt);
        auto outcome = run_attempt(memory, seed, st.tau, acting, st.representation, ctx, tag);
        AttemptRecord rec{tag, seed, outcome.status, outcome.episode_return, int(outcome.trajectory.size()), 0, outcome.error};
        if (outcome.status == AttemptStatus::Aborted) {
            MemoryDelta delta;
            try {
                delta = synthesize(*outcome.snapshot, st.representation, learner, ctx);
            } catch (const connector::ConnectorError& e) {
                rec.error = e.what();
                ctx.event(fmt::format("learning for s{}a{} failed: {}", st.stage, attempt, e.what()));
            }
            memory = memory::apply_delta(std::move(memory), delta);
            rec.artifacts_added = delta.additions.size();
        }
        if (st.workspace) {
            const auto dir = *st.workspace / "attempts";
            std::filesystem::create_directories(dir);
            const auto stem = fmt::format("s{}_a{}", st.stage, attempt);
            std::ofstream(dir / (stem + "_trajectory.txt"), std::ios::trunc)
                << fmt::format("status={} return={:.2f} seed={}\n", to_string(rec.status), rec.episode_return, seed)
                << cage::format_trajectory(outcome.trajectory);
            if (outcome.snapshot)
                std::ofstream(dir / (stem + "_snapshot.json"), std::ios::trunc) << snapshot_json(*outcome.snapshot);
        }
        result.attempts.push_back(std::move(rec));
    }
    result.memory = std::move(memory);
    return result;
}

}  // namespace forge::reflexion
