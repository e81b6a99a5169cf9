#pragma once

// Failure-triggered inner loop: play an episode, abort at the first step
// whose reward falls strictly below tau, turn the snapshot into memory
// artifacts, restart from step 0. Exactly k_A attempts per call.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "forge/agents.hpp"
#include "forge/cage_lite.hpp"
#include "forge/memory.hpp"

namespace forge::reflexion {

using connector::CallContext;
using memory::InstanceMemory;
using memory::MemoryDelta;
using memory::Representation;

struct AttemptTag {
    int instance = 0;
    int stage = 0;
    int attempt = 0;
};

struct FailureSnapshot {
    /// Records up to and including the failing step.
    cage::Trajectory trajectory;
    InstanceMemory memory_at_failure;
    AttemptTag tag;
    int failing_step = 0;
    double failing_reward = 0.0;
    cage::EnvState env_state;
};

/// Throws ValidationError unless failing_reward < tau and the trajectory
/// ends at the failing step.
void validate(const FailureSnapshot& snapshot, double tau);
std::string snapshot_json(const FailureSnapshot& snapshot);

enum class AttemptStatus { Completed, Aborted, Errored };
std::string_view to_string(AttemptStatus status);

struct AttemptOutcome {
    AttemptStatus status = AttemptStatus::Completed;
    /// Sum of the step rewards that were played.
    double episode_return = 0.0;
    cage::Trajectory trajectory;
    /// Present iff Aborted.
    std::optional<FailureSnapshot> snapshot;
    std::string error;
};

/// Plays one episode from `env_seed`. Requires tau < 0. Backend failures
/// yield an Errored outcome instead of throwing.
AttemptOutcome run_attempt(const InstanceMemory& memory, std::uint64_t env_seed, double tau,
                           const agents::ActingBackend& backend, Representation representation, CallContext& ctx,
                           AttemptTag tag = {});

/// Full 30-step episode with learning disabled. Backend failures propagate.
cage::Trajectory run_frozen_episode(const InstanceMemory& memory, std::uint64_t env_seed,
                                    const agents::ActingBackend& backend, Representation representation,
                                    CallContext& ctx);

class LearningBackend {
public:
    virtual ~LearningBackend() = default;
    /// Reflector: Rule artifacts.
    virtual MemoryDelta reflect(const FailureSnapshot& snapshot, CallContext& ctx) const = 0;
    /// Exemplifier: Example artifacts.
    virtual MemoryDelta exemplify(const FailureSnapshot& snapshot, CallContext& ctx) const = 0;
};

/// Emits one Planner clause per failure, read off the trajectory.
class ScriptedLearner final : public LearningBackend {
public:
    MemoryDelta reflect(const FailureSnapshot& snapshot, CallContext& ctx) const override;
    MemoryDelta exemplify(const FailureSnapshot& snapshot, CallContext& ctx) const override;
};

/// Prompts the Reflector/Exemplifier roles with learning_prompt(); output
/// that fails artifact validation is re-prompted up to twice, then dropped.
class LlmLearner final : public LearningBackend {
public:
    LlmLearner(const connector::Connector& connector, agents::RoleDefinitions defs, std::string model,
               int max_examples = 1);
    MemoryDelta reflect(const FailureSnapshot& snapshot, CallContext& ctx) const override;
    MemoryDelta exemplify(const FailureSnapshot& snapshot, CallContext& ctx) const override;

private:
    template <typename Extract>
    MemoryDelta ask(agents::AgentRole role, const FailureSnapshot& snapshot, CallContext& ctx,
                    Extract extract) const;

    const connector::Connector& connector_;
    agents::RoleDefinitions defs_;
    std::string model_;
    int max_examples_;
};

/// Trajectory, failing-step marker, current memory and the action reference
/// table, as sent to the learning roles.
std::string learning_prompt(const FailureSnapshot& snapshot);

/// Rules -> reflect; Examples -> exemplify; Mixed -> both over the same
/// snapshot.
MemoryDelta synthesize(const FailureSnapshot& snapshot, Representation representation,
                       const LearningBackend& learner, CallContext& ctx);

struct LoopSettings {
    int attempts = 3;
    double tau = -1.1;
    Representation representation = Representation::Rules;
    std::uint64_t base_seed = 0;
    int stage = 1;
    int instance = 0;
    /// When set, per-attempt trajectory and snapshot files go under
    /// <workspace>/attempts/.
    std::optional<std::filesystem::path> workspace;
};

struct AttemptRecord {
    AttemptTag tag;
    std::uint64_t seed = 0;
    AttemptStatus status = AttemptStatus::Completed;
    double episode_return = 0.0;
    int steps = 0;
    std::size_t artifacts_added = 0;
    std::string error;
};

struct LoopResult {
    InstanceMemory memory;
    std::vector<AttemptRecord> attempts;
};

LoopResult reflexion_loop(InstanceMemory memory, const LoopSettings& settings, const agents::ActingBackend& acting,
                          const LearningBackend& learner, CallContext& ctx);

}  // namespace forge::reflexion
