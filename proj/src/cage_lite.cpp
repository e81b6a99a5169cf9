#include "forge/cage_lite.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include <fmt/format.h>

#include "forge/calibration.hpp"

namespace forge::cage {

namespace cal = forge::calibration;

namespace {

constexpr std::array<std::string_view, kHostCount> kHostNames = {
    "User0",       "User1",       "User2",    "User3",    "User4",    "Enterprise0", "Enterprise1",
    "Enterprise2", "Defender",    "Op_Host0", "Op_Host1", "Op_Host2", "Op_Server0",
};

bool at_least_user(CompromiseLevel level) { return level >= CompromiseLevel::UserAccess; }

// Kill-chain positions (see attack_plan).
constexpr std::array<int, 3> kScanPos = {1, 4, 8};
constexpr std::array<int, 3> kExploitPos = {2, 5, 9};
constexpr std::array<int, 3> kEscalatePos = {3, 6, 10};
constexpr int kImpactPos = 11;

int chain_index(const AttackerState& a, HostId h) {
    for (int k = 0; k < 3; ++k)
        if (a.target_chain[std::size_t(k)] == h) return k;
    return -1;
}

AttackPhase derive_phase(const EnvState& state) {
    const auto& a = state.attacker;
    if (!a.foothold) return AttackPhase::Discovery;
    switch (chain_index(a, *a.foothold)) {
        case 0: return AttackPhase::Access;
        case 1: return AttackPhase::LateralMovement;
        default:
            return state[*a.foothold].level == CompromiseLevel::RootAccess ? AttackPhase::OpServerRoot
                                                                          : AttackPhase::Escalation;
    }
}

// The foothold was cleaned by blue: fall back to the deepest chain host the
// attacker still holds, and resume from there.
void regress(EnvState& state) {
    auto& a = state.attacker;
    const int lost = chain_index(a, *a.foothold);
    a.foothold.reset();
    a.impact_steps = 0;
    for (int k = lost - 1; k >= 0; --k) {
        const HostId h = a.target_chain[std::size_t(k)];
        const auto level = state[h].level;
        if (!at_least_user(level)) continue;
        a.foothold = h;
        a.position = level == CompromiseLevel::RootAccess ? kScanPos[std::size_t(k + 1)]
                                                          : kEscalatePos[std::size_t(k)];
        return;
    }
    a.position = kScanPos[0];
}

Observation observe(EnvState& state) {
    Observation obs;
    obs.step_index = state.step;
    const auto& a = state.attacker;
    for (int i = 0; i < kHostCount; ++i) {
        const HostId h(i);
        const auto level = state[h].level;
        const bool active = (a.foothold && *a.foothold == h) || (a.last_target && *a.last_target == h);
        const std::array<bool, 3> truth = {
            at_least_user(level),
            active,
            level == CompromiseLevel::RootAccess,
        };
        std::array<bool, 3> seen{};
        for (std::size_t f = 0; f < 3; ++f) {
            const double u = uniform01(state.rng);
            seen[f] = truth[f] ? (u >= cal::kFalseNegativeRate) : (u < cal::kFalsePositiveRate);
        }
        obs.hosts[std::size_t(i)] = HostFlags{seen[0], seen[1], seen[2]};
    }
    return obs;
}

double action_cost(ActionKind kind) {
    switch (kind) {
        case ActionKind::Monitor: return 0.0;
        case ActionKind::Analyse: return cal::kAnalyseCost;
        case ActionKind::Remove: return cal::kRemoveCost;
        case ActionKind::Restore: return cal::kRestoreCost;
        case ActionKind::Decoy: return cal::kDecoyCost;
    }
    return 0.0;
}

bool near(double a, double b) { return std::abs(a - b) < 1e-9; }

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

bool iequals(std::string_view a, std::string_view b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
               return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
           });
}

}  // namespace

HostId::HostId(int index) : index_(index) {
    if (index < 0 || index >= kHostCount) throw InvalidActionError(fmt::format("host index {} out of range", index));
}

Subnet HostId::subnet() const {
    if (index_ <= 4) return Subnet::User;
    if (index_ <= 8) return Subnet::Enterprise;
    return Subnet::Operational;
}

std::string_view HostId::name() const { return kHostNames[std::size_t(index_)]; }

std::optional<HostId> HostId::from_name(std::string_view name) {
    name = trim(name);
    for (int i = 0; i < kHostCount; ++i)
        if (iequals(kHostNames[std::size_t(i)], name)) return HostId(i);
    int idx = -1;
    auto [ptr, ec] = std::from_chars(name.data(), name.data() + name.size(), idx);
    if (ec == std::errc() && ptr == name.data() + name.size() && idx >= 0 && idx < kHostCount) return HostId(idx);
    return std::nullopt;
}

std::string_view to_string(ActionKind kind) {
    switch (kind) {
        case ActionKind::Monitor: return "Monitor";
        case ActionKind::Analyse: return "Analyse";
        case ActionKind::Remove: return "Remove";
        case ActionKind::Restore: return "Restore";
        case ActionKind::Decoy: return "Decoy";
    }
    return "?";
}

std::string_view to_string(AttackPhase phase) {
    switch (phase) {
        case AttackPhase::Discovery: return "Discovery";
        case AttackPhase::Access: return "Access";
        case AttackPhase::LateralMovement: return "LateralMovement";
        case AttackPhase::Escalation: return "Escalation";
        case AttackPhase::OpServerRoot: return "OpServerRoot";
    }
    return "?";
}

std::string_view to_string(CompromiseLevel level) {
    switch (level) {
        case CompromiseLevel::Clean: return "Clean";
        case CompromiseLevel::Scanned: return "Scanned";
        case CompromiseLevel::UserAccess: return "UserAccess";
        case CompromiseLevel::RootAccess: return "RootAccess";
    }
    return "?";
}

std::string_view to_string(Subnet subnet) {
    switch (subnet) {
        case Subnet::User: return "User";
        case Subnet::Enterprise: return "Enterprise";
        case Subnet::Operational: return "Operational";
    }
    return "?";
}

std::optional<ActionKind> parse_action_kind(std::string_view text) {
    text = trim(text);
    for (auto k : {ActionKind::Monitor, ActionKind::Analyse, ActionKind::Remove, ActionKind::Restore,
                   ActionKind::Decoy})
        if (iequals(to_string(k), text)) return k;
    if (iequals(text, "Analyze")) return ActionKind::Analyse;
    if (iequals(text, "Sleep")) return ActionKind::Monitor;
    return std::nullopt;
}

std::string to_string(const BlueAction& action) {
    if (!action.target) return std::string(to_string(action.kind));
    return fmt::format("{} {}", to_string(action.kind), action.target->name());
}

std::optional<BlueAction> parse_action(std::string_view text) {
    text = trim(text);
    const auto space = text.find_first_of(" \t");
    const auto kind = parse_action_kind(text.substr(0, space));
    if (!kind) return std::nullopt;
    if (*kind == ActionKind::Monitor) {
        if (space != std::string_view::npos && !trim(text.substr(space)).empty()) return std::nullopt;
        return BlueAction::monitor();
    }
    if (space == std::string_view::npos) return std::nullopt;
    auto rest = trim(text.substr(space));
    if (auto eq = rest.find('='); eq != std::string_view::npos) rest = trim(rest.substr(eq + 1));
    const auto host = HostId::from_name(rest);
    if (!host) return std::nullopt;
    return BlueAction{*kind, *host};
}

const std::vector<BlueAction>& all_actions() {
    static const std::vector<BlueAction> actions = [] {
        std::vector<BlueAction> out{BlueAction::monitor()};
        for (auto k : {ActionKind::Analyse, ActionKind::Remove, ActionKind::Restore, ActionKind::Decoy})
            for (int i = 0; i < kHostCount; ++i) out.push_back({k, HostId(i)});
        return out;
    }();
    return actions;
}

bool EnvState::terminal() const { return step >= cal::kEpisodeSteps; }

AttackStep attack_plan(const std::array<HostId, 3>& chain, int position) {
    using K = AttackStep::Kind;
    switch (position) {
        case 0: return {K::DiscoverRemoteSystems, std::nullopt, Subnet::User};
        case 1: return {K::DiscoverNetworkServices, chain[0], Subnet::User};
        case 2: return {K::Exploit, chain[0], Subnet::User};
        case 3: return {K::Escalate, chain[0], Subnet::User};
        case 4: return {K::DiscoverNetworkServices, chain[1], Subnet::Enterprise};
        case 5: return {K::Exploit, chain[1], Subnet::Enterprise};
        case 6: return {K::Escalate, chain[1], Subnet::Enterprise};
        case 7: return {K::DiscoverRemoteSystems, std::nullopt, Subnet::Operational};
        case 8: return {K::DiscoverNetworkServices, chain[2], Subnet::Operational};
        case 9: return {K::Exploit, chain[2], Subnet::Operational};
        case 10: return {K::Escalate, chain[2], Subnet::Operational};
        default: return {K::Impact, chain[2], Subnet::Operational};
    }
}

const std::array<HostId, 3>& kill_chain() {
    static const std::array<HostId, 3> chain = {HostId(2), HostId(7), HostId::op_server()};
    return chain;
}

ResetResult reset(std::uint64_t seed) {
    EnvState state;
    state.rng.seed(seed);
    auto& a = state.attacker;
    a.target_chain = kill_chain();
    Observation obs = observe(state);
    return {std::move(state), obs};
}

AttackerState attacker_transition(EnvState& state) {
    auto& a = state.attacker;
    const double u = uniform01(state.rng);

    if (a.foothold && !at_least_user(state[*a.foothold].level)) regress(state);

    const AttackStep next = attack_plan(a.target_chain, a.position);
    a.last_target = next.target;

    using K = AttackStep::Kind;
    if (next.kind == K::Exploit && state[*next.target].decoy_present) {
        // Absorbed by the honeypot: back to re-scanning the host.
        --a.position;
    } else if (next.kind == K::Exploit && state[*next.target].level == CompromiseLevel::Clean) {
        // Service scan was wiped by a restore.
        --a.position;
    } else if (u < cal::kAttackSuccessProb) {
        switch (next.kind) {
            case K::DiscoverRemoteSystems: break;
            case K::DiscoverNetworkServices:
                state[*next.target].level = std::max(state[*next.target].level, CompromiseLevel::Scanned);
                break;
            case K::Exploit:
                state[*next.target].level = std::max(state[*next.target].level, CompromiseLevel::UserAccess);
                a.foothold = *next.target;
                break;
            case K::Escalate: state[*next.target].level = CompromiseLevel::RootAccess; break;
            case K::Impact: ++a.impact_steps; break;
        }
        a.position = std::min(a.position + 1, kImpactPos);
    }
    a.phase = derive_phase(state);
    return a;
}

double compromise_penalty(const EnvState& state) {
    const auto& op = state[HostId::op_server()];
    if (op.level == CompromiseLevel::RootAccess)
        return cal::kOpServerRootPenalty +
               cal::kImpactSurcharge * std::min(state.attacker.impact_steps, cal::kImpactSurchargeCap);

    bool inner = false, inner_root = false, user = false, user_root = false;
    for (int i = 0; i < kHostCount; ++i) {
        const HostId h(i);
        const auto level = state[h].level;
        if (!at_least_user(level)) continue;
        const bool root = level == CompromiseLevel::RootAccess;
        if (h.subnet() == Subnet::User) {
            user = true;
            user_root |= root;
        } else {
            inner = true;
            inner_root |= root;
        }
    }
    if (inner) {
        double p = cal::kInnerBreachPenalty;
        if (inner_root) p += cal::kInnerRootSurcharge;
        if (op.level == CompromiseLevel::UserAccess) p += cal::kOpServerUserSurcharge;
        return p;
    }
    if (user) return user_root ? cal::kUserRootPenalty : cal::kUserAccessPenalty;
    return 0.0;
}

bool reward_in_domain(double r) {
    constexpr double eps = 1e-9;
    if (near(r, 0.0) || near(r, -1.0)) return true;
    auto within = [&](double lo, double hi) { return r >= lo - eps && r <= hi + eps; };
    return within(-1.2, -1.1) || within(-3.2, -2.0) || within(-14.0, -11.0);
}

StepResult step(EnvState state, const BlueAction& action) {
    if (state.terminal()) throw ProtocolError(fmt::format("step() called on terminal state (step {})", state.step));
    if (!action.valid()) throw InvalidActionError(fmt::format("malformed action '{}'", to_string(action)));

    // Fixed draw budget per step: blue (2), attacker (1), observation (39).
    const double u_analyse = uniform01(state.rng);
    const double u_remove = uniform01(state.rng);

    if (action.target) {
        auto& host = state[*action.target];
        switch (action.kind) {
            case ActionKind::Restore:
                host.level = CompromiseLevel::Clean;
                host.decoy_present = false;
                break;
            case ActionKind::Remove:
                if (host.level == CompromiseLevel::UserAccess && u_remove < cal::kRemoveSuccessProb)
                    host.level = CompromiseLevel::Clean;
                break;
            case ActionKind::Decoy: host.decoy_present = true; break;
            default: break;
        }
    }

    attacker_transition(state);
    ++state.step;

    RewardBreakdown breakdown{action_cost(action.kind), compromise_penalty(state)};
    Observation obs = observe(state);
    if (action.kind == ActionKind::Analyse && u_analyse < cal::kAnalyseRevealProb)
        obs.analysis = AnalysisReport{*action.target, state[*action.target].level};

    const double reward = breakdown.total();
    return {std::move(state), obs, reward, breakdown};
}

std::string format_step_line(int step_no, const StepRecord& record) {
    std::string flags;
    flags.reserve(kHostCount * 4);
    for (int i = 0; i < kHostCount; ++i) {
        const auto& f = record.observation.hosts[std::size_t(i)];
        if (i) flags += '|';
        flags += f.anomalous_process ? 'A' : '.';
        flags += f.suspicious_connection ? 'C' : '.';
        flags += f.new_file ? 'F' : '.';
    }
    return fmt::format("step={} action={} target={} reward={:.2f} flags={}", step_no, to_string(record.action.kind),
                       record.action.target ? record.action.target->name() : std::string_view("-"), record.reward,
                       flags);
}

std::string format_trajectory(const Trajectory& trajectory) {
    std::string out;
    for (std::size_t i = 0; i < trajectory.size(); ++i) {
        out += format_step_line(int(i), trajectory[i]);
        out += '\n';
    }
    return out;
}

bool host_flagged(const HostFlags& flags) { return flags.anomalous_process; }

BlueAction RandomPolicy::act(const Observation&) {
    const auto& actions = all_actions();
    return actions[rng_() % actions.size()];
}

namespace {
// Highest-value hosts first.
constexpr std::array<int, kHostCount> kPriority = {12, 5, 6, 7, 8, 9, 10, 11, 0, 1, 2, 3, 4};
}  // namespace

const std::array<HostId, kHostCount>& priority_order() {
    static const auto order = [] {
        std::array<HostId, kHostCount> out{};
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = HostId(kPriority[i]);
        return out;
    }();
    return order;
}

void HeuristicPolicy::begin_episode(std::uint64_t) {
    confirmed_.fill(false);
    last_analysed_.fill(-100);
}

BlueAction HeuristicPolicy::act(const Observation& obs) {
    if (obs.analysis) confirmed_[std::size_t(obs.analysis->host.index())] = at_least_user(obs.analysis->level);
    for (int i : kPriority) {
        if (confirmed_[std::size_t(i)]) {
            confirmed_[std::size_t(i)] = false;
            return BlueAction::restore(HostId(i));
        }
    }
    for (int i : kPriority) {
        if (host_flagged(obs.hosts[std::size_t(i)]) && obs.step_index - last_analysed_[std::size_t(i)] >= cal::kHeuristicReanalyseGap) {
            last_analysed_[std::size_t(i)] = obs.step_index;
            return BlueAction::analyse(HostId(i));
        }
    }
    return BlueAction::monitor();
}

Trajectory run_episode(Policy& policy, std::uint64_t seed) {
    policy.begin_episode(seed ^ 0x9e3779b97f4a7c15ULL);
    auto [state, obs] = reset(seed);
    Trajectory trajectory;
    trajectory.reserve(cal::kEpisodeSteps);
    while (!state.terminal()) {
        const BlueAction action = policy.act(obs);
        auto result = step(std::move(state), action);
        trajectory.push_back({action, result.reward, result.observation, result.breakdown});
        state = std::move(result.state);
        obs = result.observation;
    }
    return trajectory;
}

double episode_return(const Trajectory& trajectory) {
    double total = 0.0;
    for (const auto& r : trajectory) total += r.reward;
    return total;
}

}  // namespace forge::cage
