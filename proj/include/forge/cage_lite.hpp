#pragma once

// CAGE-lite: a seedable cyber-defense POMDP. A blue defender protects 13 hosts
// in 3 subnets for 30 steps against a scripted kill-chain attacker.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "forge/errors.hpp"

namespace forge::cage {

inline constexpr int kHostCount = 13;

enum class Subnet { User, Enterprise, Operational };

/// Index into the fixed 13-host topology.
///
///   0..4   User0..User4            (Subnet::User)
///   5..7   Enterprise0..2          (Subnet::Enterprise)
///   8      Defender                (Subnet::Enterprise)
///   9..11  Op_Host0..2             (Subnet::Operational)
///   12     Op_Server0              (Subnet::Operational, high-value)
class HostId {
public:
    constexpr HostId() = default;
    explicit HostId(int index);

    constexpr int index() const { return index_; }
    Subnet subnet() const;
    std::string_view name() const;

    static std::optional<HostId> from_name(std::string_view name);
    static HostId op_server() { return HostId(12); }

    friend constexpr bool operator==(HostId, HostId) = default;
    friend constexpr auto operator<=>(HostId, HostId) = default;

private:
    int index_ = 0;
};

enum class CompromiseLevel { Clean, Scanned, UserAccess, RootAccess };

struct HostCompromise {
    CompromiseLevel level = CompromiseLevel::Clean;
    bool decoy_present = false;

    friend bool operator==(const HostCompromise&, const HostCompromise&) = default;
};

enum class AttackPhase { Discovery, Access, LateralMovement, Escalation, OpServerRoot };

struct AttackerState {
    AttackPhase phase = AttackPhase::Discovery;
    std::optional<HostId> foothold;
    /// Always User2 -> Enterprise2 -> Op_Server0 (see kill_chain()).
    std::array<HostId, 3> target_chain{};
    /// Next kill-chain action to attempt (see attack_plan()).
    int position = 0;
    int impact_steps = 0;
    /// Host the attacker acted on during the last transition.
    std::optional<HostId> last_target;

    friend bool operator==(const AttackerState&, const AttackerState&) = default;
};

enum class ActionKind { Monitor, Analyse, Remove, Restore, Decoy };

struct BlueAction {
    ActionKind kind = ActionKind::Monitor;
    std::optional<HostId> target;

    static BlueAction monitor() { return {}; }
    static BlueAction analyse(HostId h) { return {ActionKind::Analyse, h}; }
    static BlueAction remove(HostId h) { return {ActionKind::Remove, h}; }
    static BlueAction restore(HostId h) { return {ActionKind::Restore, h}; }
    static BlueAction decoy(HostId h) { return {ActionKind::Decoy, h}; }

    bool valid() const { return target.has_value() == (kind != ActionKind::Monitor); }

    friend bool operator==(const BlueAction&, const BlueAction&) = default;
};

std::string_view to_string(ActionKind kind);
std::string_view to_string(AttackPhase phase);
std::string_view to_string(CompromiseLevel level);
std::string_view to_string(Subnet subnet);
std::optional<ActionKind> parse_action_kind(std::string_view text);

/// "Monitor", "Restore Op_Server0", ...
std::string to_string(const BlueAction& action);
/// Accepts a host by name or index ("Restore 12", "Restore Op_Server0").
std::optional<BlueAction> parse_action(std::string_view text);

/// Every syntactically valid action: Monitor plus 4 kinds x 13 hosts.
const std::vector<BlueAction>& all_actions();

struct HostFlags {
    bool anomalous_process = false;
    bool suspicious_connection = false;
    bool new_file = false;

    int count() const { return int(anomalous_process) + int(suspicious_connection) + int(new_file); }
    bool any() const { return count() > 0; }

    friend bool operator==(const HostFlags&, const HostFlags&) = default;
};

struct AnalysisReport {
    HostId host;
    CompromiseLevel level = CompromiseLevel::Clean;

    friend bool operator==(const AnalysisReport&, const AnalysisReport&) = default;
};

struct Observation {
    std::array<HostFlags, kHostCount> hosts{};
    int step_index = 0;
    /// Present when the step's Analyse succeeded.
    std::optional<AnalysisReport> analysis;

    const HostFlags& operator[](HostId h) const { return hosts[std::size_t(h.index())]; }

    friend bool operator==(const Observation&, const Observation&) = default;
};

struct EnvState {
    std::array<HostCompromise, kHostCount> hosts{};
    AttackerState attacker;
    int step = 0;
    std::mt19937_64 rng;

    bool terminal() const;
    const HostCompromise& operator[](HostId h) const { return hosts[std::size_t(h.index())]; }
    HostCompromise& operator[](HostId h) { return hosts[std::size_t(h.index())]; }

    friend bool operator==(const EnvState&, const EnvState&) = default;
};

/// Split of one step's reward into its two sources.
struct RewardBreakdown {
    double action_cost = 0.0;
    double compromise_penalty = 0.0;

    double total() const { return action_cost + compromise_penalty; }
};

struct StepRecord {
    BlueAction action;
    double reward = 0.0;
    Observation observation;
    RewardBreakdown breakdown;
};

using Trajectory = std::vector<StepRecord>;

struct ResetResult {
    EnvState state;
    Observation observation;
};

struct StepResult {
    EnvState state;
    Observation observation;
    double reward = 0.0;
    RewardBreakdown breakdown;
};

ResetResult reset(std::uint64_t seed);

/// Applies the blue action, then the attacker's move, then scores the result.
/// Throws ProtocolError on a terminal state and InvalidActionError on a
/// malformed action.
StepResult step(EnvState state, const BlueAction& action);

/// Advances the attacker by at most one kill-chain action. Called exactly once
/// per step, after the blue action has been applied to `state.hosts`.
/// Draws exactly one variate from `state.rng`.
AttackerState attacker_transition(EnvState& state);

/// Compromise penalty of a state (no action cost).
double compromise_penalty(const EnvState& state);

/// True when `reward` lies in one of the documented penalty groups.
bool reward_in_domain(double reward);

/// Kill-chain action at `position` for a given chain, for tests and logging.
struct AttackStep {
    enum class Kind { DiscoverRemoteSystems, DiscoverNetworkServices, Exploit, Escalate, Impact };
    Kind kind;
    std::optional<HostId> target;
    Subnet subnet;
};
inline constexpr int kAttackPlanLength = 12;
AttackStep attack_plan(const std::array<HostId, 3>& chain, int position);

/// The fixed B_line route.
const std::array<HostId, 3>& kill_chain();

// ---------------------------------------------------------------------------
// Trajectory log: one line per step, fixed field order.
//
//   step=<n> action=<Kind> target=<name|-> reward=<%.2f> flags=<13 x 3 chars>
//
// flags lists each host as three characters (anomalous-process,
// suspicious-connection, new-file), 'A'/'C'/'F' when raised and '.' when not,
// hosts separated by '|'.
std::string format_step_line(int step, const StepRecord& record);
std::string format_trajectory(const Trajectory& trajectory);

// ---------------------------------------------------------------------------
// Reference policies used for calibration.

class Policy {
public:
    virtual ~Policy() = default;
    virtual void begin_episode(std::uint64_t seed) { (void)seed; }
    virtual BlueAction act(const Observation& obs) = 0;
};

class SleepPolicy final : public Policy {
public:
    BlueAction act(const Observation&) override { return BlueAction::monitor(); }
};

class RandomPolicy final : public Policy {
public:
    void begin_episode(std::uint64_t seed) override { rng_.seed(seed); }
    BlueAction act(const Observation&) override;

private:
    std::mt19937_64 rng_;
};

/// Analyse flagged hosts, Restore hosts confirmed compromised, else Monitor.
class HeuristicPolicy final : public Policy {
public:
    void begin_episode(std::uint64_t seed) override;
    BlueAction act(const Observation& obs) override;

private:
    std::array<bool, kHostCount> confirmed_{};
    std::array<int, kHostCount> last_analysed_{};
};

/// Hosts by defensive value: Op_Server0, enterprise, defender, op hosts, users.
const std::array<HostId, kHostCount>& priority_order();

/// Heuristic trigger: anomalous-process indicator raised.
bool host_flagged(const HostFlags& flags);

/// Runs one full episode; returns the trajectory.
Trajectory run_episode(Policy& policy, std::uint64_t seed);

double episode_return(const Trajectory& trajectory);

/// Uniform double in [0, 1) from a 64-bit engine, independent of the
/// standard library's distribution implementations.
inline double uniform01(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

}  // namespace forge::cage
