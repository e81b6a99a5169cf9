#pragma once

// Session statistics, the failure-trigger precision/recall analysis, tau
// sweeps and cross-session aggregation.

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forge/cage_lite.hpp"
#include "forge/protocol.hpp"

namespace forge::metrics {

inline constexpr double kMajorFailure = -100.0;
inline constexpr double kCatastrophicFailure = -150.0;

/// Fraction of returns strictly below `threshold`. Throws std::domain_error
/// on an empty list.
double tail_risk(std::span<const double> returns, double threshold);

struct PenaltyStep {
    double reward = 0.0;
    bool is_restore = false;
};

struct TriggerAnalysis {
    double tau = 0.0;
    /// Non-restore penalized steps, and how many of them fire.
    long failure_steps = 0;
    long true_triggers_captured = 0;
    /// Restore steps that fire.
    long false_positives = 0;
    /// Unset when nothing fires.
    std::optional<double> precision;
    double recall = 0.0;
};

/// A step fires iff reward < tau. Throws ValidationError on a non-negative
/// reward (the log holds penalized steps only).
TriggerAnalysis trigger_analysis(std::span<const PenaltyStep> log, double tau);

/// CSV with header "reward,is_restore"; is_restore is 0/1/true/false.
std::vector<PenaltyStep> parse_penalty_log(std::string_view csv);
std::string penalty_log_csv(std::span<const PenaltyStep> log);
/// Penalized steps of played trajectories.
std::vector<PenaltyStep> penalty_steps(const cage::Trajectory& trajectory);

std::string trigger_json(const std::vector<TriggerAnalysis>& analyses);
std::string render_trigger(const std::vector<TriggerAnalysis>& analyses);

struct BaselineResult {
    std::string policy;
    std::vector<double> returns;
    double mean = 0.0;
    double sd = 0.0;
    double reference = 0.0;
    /// |mean - reference| <= 25% of |reference|.
    bool within_tolerance = false;
};

struct BaselineRun {
    /// sleep, random, heuristic.
    std::vector<BaselineResult> policies;
    /// Penalized steps of every episode played.
    std::vector<PenaltyStep> penalty_log;
    /// sleep < random < heuristic, strictly.
    bool ordered = false;
};

/// Episode e of every policy uses seed derive(seed, "baseline", e).
BaselineRun run_baselines(int episodes, std::uint64_t seed);
std::string render_baselines(const BaselineRun& run);
std::string baselines_json(const BaselineRun& run);

struct StageStats {
    int stage = 0;
    /// Over non-failed checkpoints; sd is the sample SD.
    double checkpoint_mean = 0.0;
    double checkpoint_sd = 0.0;
    int checkpoints = 0;
    int aborts = 0;
    std::size_t artifacts_added = 0;
};

struct SessionSummary {
    std::string name;
    /// "best", "best-nograd", "individual" or "zero-shot".
    std::string condition;
    std::string representation;
    double tau = 0.0;
    int instances = 0;
    std::vector<std::vector<double>> instance_returns;
    double mean_return = 0.0;
    double sd_return = 0.0;
    double major_failure_rate = 0.0;
    double catastrophic_failure_rate = 0.0;
    int graduated = 0;
    double graduation_rate = 0.0;
    /// S1..S_S then never.
    std::vector<int> graduation_distribution;
    std::vector<StageStats> stages;
    int aborts = 0;
    std::size_t artifacts_added = 0;
    /// Checkpoint SD across stages, per instance then averaged over instances
    /// with at least two checkpoints.
    double volatility_instance_mean = 0.0;
    /// Sample SD of every checkpoint score of the session.
    double volatility_pooled = 0.0;
    connector::PhaseTotals tokens;
    bool failed = false;
    std::string error;
};

std::string condition_label(const protocol::FinalReport& report);
SessionSummary summarize(const protocol::FinalReport& report);
std::string summary_json(const SessionSummary& summary);

struct SweepEntry {
    double tau = 0.0;
    std::optional<SessionSummary> summary;
    std::string error;
};

struct SweepOptions {
    /// Each tau runs in <root>/tau_<value>/ when set.
    std::optional<std::filesystem::path> root;
    /// Runs the taus concurrently instead of one after another.
    bool parallel = false;
};

/// One run_protocol per tau with the config's base seed. A failing tau is
/// recorded in its entry and does not stop the others. Throws ConfigError
/// when a tau is not negative.
std::vector<SweepEntry> sweep_tau(const protocol::ProtocolConfig& config, const std::vector<double>& taus,
                                  const SweepOptions& options = {});
/// Same, with caller-supplied backends.
std::vector<SweepEntry> sweep_tau(const protocol::ProtocolConfig& config, const std::vector<double>& taus,
                                  const protocol::Backends& backends, const SweepOptions& options = {});

std::string sweep_json(const std::vector<SweepEntry>& entries);
std::string render_sweep(const std::vector<SweepEntry>& entries);

struct GroupStats {
    std::string condition;
    std::string representation;
    int sessions = 0;
    int episodes = 0;
    double mean_return = 0.0;
    double sd_return = 0.0;
    double major_failure_rate = 0.0;
    double catastrophic_failure_rate = 0.0;
    /// Summed over sessions; S1..S6 widened to the longest session.
    std::vector<int> graduation_distribution;
    connector::PhaseTotals tokens;
};

struct SessionRow {
    std::filesystem::path dir;
    SessionSummary summary;
};

struct AggregateReport {
    std::vector<SessionRow> sessions;
    /// Keyed by (condition, representation), in key order.
    std::vector<GroupStats> groups;
    std::vector<std::pair<std::filesystem::path, std::string>> skipped;
    connector::PhaseTotals tokens;
};

/// Reads <dir>/final_report.json from each directory. Unreadable or
/// malformed sessions are listed in `skipped` instead of failing.
AggregateReport aggregate(const std::vector<std::filesystem::path>& session_dirs);
std::string aggregate_json(const AggregateReport& report);
std::string render_aggregate(const AggregateReport& report);

}  // namespace forge::metrics
