#pragma once

// Staged population training: per stage, every active instance runs its
// Reflexion loop, then a frozen checkpoint episode; instances above theta
// graduate and freeze; under FORGE the best active instance's dynamic memory
// replaces everyone else's. A final frozen evaluation covers all instances.

#include <atomic>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "forge/agents.hpp"
#include "forge/llm_connector.hpp"
#include "forge/memory.hpp"
#include "forge/reflexion.hpp"

namespace forge::protocol {

using memory::InstanceMemory;
using memory::Representation;

enum class TrainingCondition { Forge, Reflexion };
enum class BackendKind { Scripted, Llm };
enum class ConnectorMode { Synthetic, Record, Replay, Http };
enum class Execution { Serial, OpenMP };

std::string_view to_string(TrainingCondition c);
std::string_view to_string(BackendKind b);
std::string_view to_string(ConnectorMode m);
std::string_view to_string(Execution e);

struct ConnectorSettings {
    ConnectorMode mode = ConnectorMode::Synthetic;
    std::string model = "synthetic";
    /// Fixture file for record/replay.
    std::string fixtures;
};

struct ProtocolConfig {
    std::string name = "forge";
    int instances = 10;
    int stages = 6;
    int attempts = 3;
    double tau = -1.1;
    double theta = -15.0;
    Representation representation = Representation::Rules;
    TrainingCondition condition = TrainingCondition::Forge;
    bool graduation_enabled = true;
    std::uint64_t base_seed = 0;
    BackendKind backend = BackendKind::Scripted;
    ConnectorSettings connector;
    int eval_episodes = 2;
    std::size_t memory_capacity = memory::kDefaultCapacity;
    Execution execution = Execution::OpenMP;
    /// 0 = OpenMP default.
    int threads = 0;
    /// Directory of per-role YAML definitions; empty = built-in roles.
    std::string roles_dir;
};

/// Throws ConfigError on out-of-range values.
void validate(const ProtocolConfig& config);

/// YAML keys: name, transfer_strategy (best | individual), instances, stages,
/// attempts_per_stage, graduation_threshold, graduation_enabled,
/// failure_threshold, representation (rules | examples | mixed), base_seed,
/// eval_episodes_per_instance, memory_capacity, backend (scripted | llm),
/// connector {mode, model, fixtures}, execution (openmp | serial), threads,
/// roles_dir. Unknown keys are rejected.
ProtocolConfig parse_config(std::string_view yaml_text);
ProtocolConfig load_config(const std::filesystem::path& path);
std::string config_yaml(const ProtocolConfig& config);

inline constexpr double kFailedCheckpoint = -std::numeric_limits<double>::infinity();

struct CheckpointResult {
    int instance = 0;
    int stage = 0;
    double episode_return = 0.0;
    bool failed = false;
    bool graduated_now = false;
};

struct StageReport {
    int stage = 0;
    std::vector<CheckpointResult> results;
    std::optional<int> champion;
    std::vector<int> new_graduates;
    /// G after this stage.
    std::vector<int> graduated;
    int attempts = 0;
    int aborts = 0;
    int errored_attempts = 0;
    std::size_t artifacts_added = 0;
    std::size_t broadcast_recipients = 0;
    /// Indexed by instance; zero for instances idle this stage.
    std::vector<connector::PhaseTotals> tokens;
};

struct InstanceReport {
    int instance = 0;
    std::optional<int> graduation_stage;
    std::vector<double> eval_returns;
    std::string memory_hash;
    std::size_t artifacts = 0;
    connector::PhaseTotals tokens;
};

struct FinalReport {
    ProtocolConfig config;
    std::vector<StageReport> stages;
    std::vector<InstanceReport> instances;
    /// Graduations per stage S1..S_S, then the never-graduated count.
    std::vector<int> graduation_distribution;
    double mean_return = 0.0;
    /// Sample standard deviation (n - 1) over all evaluation episodes.
    double sd_return = 0.0;
    connector::PhaseTotals tokens;
    bool failed = false;
    std::string error;

    std::vector<double> all_eval_returns() const;
};

std::string to_json(const FinalReport& report);
FinalReport parse_final_report(std::string_view json_text);
std::string render_text(const FinalReport& report);

/// One frozen episode; returns its undiscounted return. Memory is not
/// touched.
double checkpoint(const InstanceMemory& memory, std::uint64_t seed, const agents::ActingBackend& backend,
                  Representation representation, connector::CallContext& ctx);

/// {i not in G | R_i > theta}, in instance order; always empty when
/// graduation is disabled. Failed checkpoints never graduate.
std::vector<int> graduate_set(const std::vector<CheckpointResult>& results, double theta, const std::set<int>& G,
                              bool graduation_enabled = true);

/// argmax of R_i over instances not in G, lowest index on ties; nullopt when
/// nothing is active or every active checkpoint failed.
std::optional<int> select_champion(const std::vector<CheckpointResult>& results, const std::set<int>& G);

/// Replaces every active non-champion dynamic memory with the champion's.
/// Returns the number of replace_dynamic calls.
std::size_t broadcast(std::vector<InstanceMemory>& population, int champion, const std::set<int>& G);

struct Backends {
    const agents::ActingBackend& acting;
    const reflexion::LearningBackend& learner;
};

/// Backends described by a config, with the connector they share.
class BackendBundle {
public:
    explicit BackendBundle(const ProtocolConfig& config);
    ~BackendBundle();
    Backends backends() const { return {*acting_, *learner_}; }
    /// Writes recorded fixtures in record mode; no-op otherwise.
    void finish() const;

private:
    ProtocolConfig config_;
    std::unique_ptr<connector::Connector> upstream_;
    std::unique_ptr<connector::MockConnector> mock_;
    std::unique_ptr<connector::Connector> http_;
    std::unique_ptr<agents::ActingBackend> acting_;
    std::unique_ptr<reflexion::LearningBackend> learner_;
};

/// Points at which the coordinator exposes the population to observers.
enum class Barrier { AfterLoops, AfterCheckpoints, AfterBroadcast, BeforeEvaluation };

struct BarrierView {
    Barrier barrier;
    int stage;
    const std::vector<InstanceMemory>& population;
    const std::set<int>& graduated;
};

/// Worker events stamped from one global counter, for ordering checks.
struct TraceEvent {
    enum class Kind { AttemptStart, AttemptEnd, CheckpointStart, CheckpointEnd, EvaluationStart };
    Kind kind;
    int stage;
    int instance;
    std::uint64_t seq;
};

struct RunOptions {
    std::optional<std::filesystem::path> run_dir;
    /// Copied verbatim to <run_dir>/config.yaml; config_yaml() when empty.
    std::string config_text;
    std::function<void(const BarrierView&)> observer;
    /// Overrides config.execution when set.
    std::optional<Execution> execution;
};

struct RunResult {
    FinalReport report;
    std::vector<InstanceMemory> memories;
    std::vector<TraceEvent> trace;
    std::vector<connector::TokenLogEntry> token_log;
    std::vector<std::string> events;
};

RunResult run_protocol(const ProtocolConfig& config, const Backends& backends, const RunOptions& options = {});
/// Builds backends from the config.
RunResult run_protocol(const ProtocolConfig& config, const RunOptions& options = {});

/// Final-evaluation episodes (same seeds as run_protocol) for N instances
/// with empty dynamic memory.
FinalReport zero_shot(const ProtocolConfig& config, const Backends& backends);

}  // namespace forge::protocol
