#pragma once

// Planner / Analyst / ActionChooser hierarchy with two backends: a
// deterministic clause-interpreting script and an LLM-driven ReAct loop.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "forge/cage_lite.hpp"
#include "forge/llm_connector.hpp"
#include "forge/memory.hpp"

namespace forge::agents {

using cage::BlueAction;
using cage::HostId;
using cage::Observation;
using connector::CallContext;
using memory::InstanceMemory;
using memory::Representation;
using memory::Severity;

enum class AgentRole { Planner, Analyst, ActionChooser, Reflector, Exemplifier };
inline constexpr std::array<AgentRole, 5> kAgentRoles = {AgentRole::Planner, AgentRole::Analyst,
                                                         AgentRole::ActionChooser, AgentRole::Reflector,
                                                         AgentRole::Exemplifier};
std::string_view to_string(AgentRole role);
std::optional<AgentRole> parse_agent_role(std::string_view text);
bool is_acting(AgentRole role);

inline constexpr int kActingMaxTokens = 10000;
inline constexpr int kLearningMaxTokens = 20000;
inline constexpr int kMaxToolCalls = 6;
inline constexpr int kMaxReprompts = 2;

struct Sampling {
    double temperature = 0.0;
    int max_output_tokens = kActingMaxTokens;
};

struct AgentRoleConfig {
    AgentRole role = AgentRole::Planner;
    std::string system_prompt;
    std::string persistent_memory;
    Sampling sampling;
};

struct RoleDefinitions {
    std::array<AgentRoleConfig, 5> roles;

    const AgentRoleConfig& operator[](AgentRole r) const { return roles[std::size_t(r)]; }
    AgentRoleConfig& operator[](AgentRole r) { return roles[std::size_t(r)]; }
};

RoleDefinitions default_role_definitions();
/// Reads <dir>/<role>.yaml for every role (keys: system_prompt,
/// persistent_memory, temperature, max_output_tokens). Throws ConfigError
/// when a file is missing or a token cap differs from the role's limit.
RoleDefinitions load_role_definitions(const std::filesystem::path& dir);
void write_role_definitions(const std::filesystem::path& dir, const RoleDefinitions& defs);

/// ActionChooser persistent memory; also handed to the learning roles.
std::string_view action_reference_table();

/// Empty dynamic memory with the acting roles' persistent sections.
InstanceMemory initial_memory(const RoleDefinitions& defs, std::size_t capacity = memory::kDefaultCapacity);

/// Everything the Planner knows at one step: the current observation plus
/// what it can recall from its own actions this episode.
struct EpisodeView {
    Observation observation;
    int step = 0;
    std::array<bool, cage::kHostCount> confirmed{};
    std::array<bool, cage::kHostCount> decoyed{};
    std::array<int, cage::kHostCount> last_analysed{};
    std::vector<BlueAction> previous_actions;

    /// `history` holds the episode's records so far; `current` is the latest
    /// observation (the reset observation when history is empty).
    static EpisodeView from_history(const cage::Trajectory& history, const Observation& current);

    bool recently_analysed(HostId h) const;
};

std::string render_view(const EpisodeView& view);
std::optional<EpisodeView> parse_view(std::string_view text);

struct Analysis {
    Severity severity = Severity::None;
    std::string summary;
    std::string recommended_focus;
};

struct RankContext {
    HostId host;
    Severity severity = Severity::None;
    std::string situation;
};

struct RankedAction {
    BlueAction action;
    double confidence = 0.0;
};

struct SubagentCall {
    AgentRole role;
    std::string request;
    std::string response;
};

struct ActionDecision {
    BlueAction action;
    std::string rationale;
    std::vector<SubagentCall> subagent_calls;
};

/// Scripted Analyst table: none -> None; one of connection/new-file -> Low;
/// anomalous-process alone or connection+new-file -> Medium; anomalous-process
/// with one other -> High; all three -> Critical.
Severity severity_for(const cage::HostFlags& flags);
/// Scripted ActionChooser table; confidences sum to 1 and are non-increasing.
std::vector<RankedAction> ranking_for(HostId host, Severity severity);

/// Actions the Planner will not repeat: a decoy already in place, or an
/// Analyse on a host analysed within the last few steps.
bool suppressed(const BlueAction& action, const EpisodeView& view);

class ActingBackend {
public:
    virtual ~ActingBackend() = default;
    virtual Analysis analyse(HostId host, const Observation& obs, const InstanceMemory& memory,
                             Representation representation, CallContext& ctx) const = 0;
    virtual std::vector<RankedAction> rank_actions(const RankContext& context, const InstanceMemory& memory,
                                                   Representation representation, CallContext& ctx) const = 0;
    virtual ActionDecision decide(const EpisodeView& view, const InstanceMemory& memory,
                                  Representation representation, CallContext& ctx) const = 0;
};

/// Deterministic backend. Planner order: restore hosts confirmed by analysis;
/// else the first visible Planner clause that matches; else analyse the most
/// indicative hosts and take the ActionChooser's top unsuppressed action.
class ScriptedBackend final : public ActingBackend {
public:
    Analysis analyse(HostId host, const Observation& obs, const InstanceMemory& memory,
                     Representation representation, CallContext& ctx) const override;
    std::vector<RankedAction> rank_actions(const RankContext& context, const InstanceMemory& memory,
                                           Representation representation, CallContext& ctx) const override;
    ActionDecision decide(const EpisodeView& view, const InstanceMemory& memory, Representation representation,
                          CallContext& ctx) const override;
};

/// ReAct loop over a chat connector. The Planner may call analyse_host and
/// get_suggestion_for_next_action (at most kMaxToolCalls per step) and must
/// finish with "Answer: <action>"; after kMaxReprompts failed parses it falls
/// back to Monitor.
class LlmBackend final : public ActingBackend {
public:
    LlmBackend(const connector::Connector& connector, RoleDefinitions defs, std::string model);

    Analysis analyse(HostId host, const Observation& obs, const InstanceMemory& memory,
                     Representation representation, CallContext& ctx) const override;
    std::vector<RankedAction> rank_actions(const RankContext& context, const InstanceMemory& memory,
                                           Representation representation, CallContext& ctx) const override;
    ActionDecision decide(const EpisodeView& view, const InstanceMemory& memory, Representation representation,
                          CallContext& ctx) const override;

    /// System prompt for an acting role: role prompt plus rendered memory.
    std::string system_prompt(AgentRole role, const InstanceMemory& memory, Representation representation) const;

private:
    connector::ChatResponse call(AgentRole role, std::vector<connector::ChatMessage> messages,
                                 CallContext& ctx) const;

    const connector::Connector& connector_;
    RoleDefinitions defs_;
    std::string model_;
};

ActionDecision decide(const EpisodeView& view, const InstanceMemory& memory, const ActingBackend& backend,
                      Representation representation, CallContext& ctx);

/// Extracts the action from the last "Answer:" line, if any.
std::optional<BlueAction> parse_answer(std::string_view text);

/// What the scripted learners take away from a failed trajectory (last
/// record = failing step). The culprit is the most-flagged host in the latest
/// observation where any host shows two or more indicators; the remedy is
/// Restore if new-file was seen, else Remove. Indicators are noisy, so a
/// missed new-file flag teaches Remove against a rooted host.
struct Lesson {
    memory::Clause rule;
    memory::Clause example;
    std::string rationale;
};
Lesson infer_lesson(const cage::Trajectory& trajectory);

/// Deterministic stand-in model for MockConnector that plays every role from
/// the default role prompts.
connector::Responder synthetic_responder();

}  // namespace forge::agents
