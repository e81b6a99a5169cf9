// forge: run, sweep, analyze-trigger, aggregate, baselines.
// Exit codes: 0 success, 1 run failure, 2 config or usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "forge/errors.hpp"
#include "forge/metrics.hpp"
#include "forge/protocol.hpp"

namespace fs = std::filesystem;
using namespace forge;

namespace {

constexpr int kOk = 0;
constexpr int kRunFailure = 1;
constexpr int kConfigError = 2;

struct ConfigFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(fmt::format("cannot read {}", path.string()));
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const fs::path& path, std::string_view text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream(path, std::ios::binary | std::ios::trunc) << text;
}

// Config problems of any kind map to exit code 2.
protocol::ProtocolConfig load(const fs::path& path, std::string& text) {
    try {
        text = read_file(path);
        return protocol::parse_config(text);
    } catch (const std::exception& e) {
        throw ConfigFailure(e.what());
    }
}

struct RunArgs {
    fs::path config;
    fs::path out;
    std::optional<std::uint64_t> seed;
    std::string execution;
    bool zero_shot = false;
    bool json = false;
};

int cmd_run(const RunArgs& a) {
    std::string text;
    auto config = load(a.config, text);
    if (a.seed) {
        config.base_seed = *a.seed;
        text.clear();
    }
    if (a.execution == "serial") config.execution = protocol::Execution::Serial;
    if (a.execution == "openmp") config.execution = protocol::Execution::OpenMP;
    try {
        protocol::validate(config);
    } catch (const ConfigError& e) {
        throw ConfigFailure(e.what());
    }
    const fs::path out = a.out.empty() ? fs::path("runs") / fmt::format("{}-{}", config.name, config.base_seed) : a.out;

    protocol::FinalReport report;
    if (a.zero_shot) {
        protocol::BackendBundle bundle(config);
        report = protocol::zero_shot(config, bundle.backends());
        bundle.finish();
        write_file(out / "config.yaml", text.empty() ? protocol::config_yaml(config) : text);
        write_file(out / "final_report.json", protocol::to_json(report));
        write_file(out / "final_report.txt", protocol::render_text(report));
    } else {
        protocol::RunOptions options;
        options.run_dir = out;
        options.config_text = text;
        report = protocol::run_protocol(config, options).report;
    }
    std::cout << (a.json ? protocol::to_json(report) : protocol::render_text(report));
    std::cerr << fmt::format("session written to {}\n", out.string());
    if (report.failed) {
        std::cerr << fmt::format("run failed: {}\n", report.error);
        return kRunFailure;
    }
    return kOk;
}

int cmd_sweep(const fs::path& config_path, std::vector<double> taus, const fs::path& out_arg, bool parallel,
              bool json) {
    std::string text;
    auto config = load(config_path, text);
    if (taus.empty()) taus = {-1.1, -2.0, -3.0, -11.0};
    const fs::path out = out_arg.empty() ? fs::path("runs") / fmt::format("{}-sweep", config.name) : out_arg;
    std::vector<metrics::SweepEntry> entries;
    try {
        entries = metrics::sweep_tau(config, taus, {out, parallel});
    } catch (const ConfigError& e) {
        throw ConfigFailure(e.what());
    }
    write_file(out / "sweep_summary.json", metrics::sweep_json(entries));
    write_file(out / "sweep_summary.txt", metrics::render_sweep(entries));
    std::cout << (json ? metrics::sweep_json(entries) : metrics::render_sweep(entries));
    bool ok = true;
    for (const auto& e : entries) {
        if (e.summary && !e.summary->failed) continue;
        ok = false;
        std::cerr << fmt::format("tau {} failed: {}\n", e.tau, e.summary ? e.summary->error : e.error);
    }
    return ok ? kOk : kRunFailure;
}

int cmd_trigger(const fs::path& log_path, std::vector<double> taus, bool json) {
    if (taus.empty()) taus = {-1.1};
    const auto log = metrics::parse_penalty_log(read_file(log_path));
    std::vector<metrics::TriggerAnalysis> out;
    for (double t : taus) out.push_back(metrics::trigger_analysis(log, t));
    std::cout << (json ? metrics::trigger_json(out) : metrics::render_trigger(out));
    return kOk;
}

int cmd_aggregate(const std::vector<fs::path>& dirs, const fs::path& out, bool json) {
    const auto rep = metrics::aggregate(dirs);
    for (const auto& [dir, why] : rep.skipped)
        std::cerr << fmt::format("warning: skipping {}: {}\n", dir.string(), why);
    const auto text = json ? metrics::aggregate_json(rep) : metrics::render_aggregate(rep);
    if (!out.empty()) write_file(out, text);
    std::cout << text;
    return rep.sessions.empty() ? kRunFailure : kOk;
}

int cmd_baselines(int episodes, std::uint64_t seed, const fs::path& penalty_log, bool json) {
    const auto run = metrics::run_baselines(episodes, seed);
    if (!penalty_log.empty()) write_file(penalty_log, metrics::penalty_log_csv(run.penalty_log));
    std::cout << (json ? metrics::baselines_json(run) : metrics::render_baselines(run));
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Staged population training of LLM-agent memory on a CAGE-lite defense simulator"};
    app.require_subcommand(1);

    RunArgs run;
    auto* run_cmd = app.add_subcommand("run", "Run one training session from a config file");
    run_cmd->add_option("config", run.config, "YAML config")->required();
    run_cmd->add_option("-o,--out", run.out, "Session directory (default runs/<name>-<seed>)");
    run_cmd->add_option("--seed", run.seed, "Override base_seed");
    run_cmd->add_option("--execution", run.execution, "Override execution")->check(CLI::IsMember({"serial", "openmp"}));
    run_cmd->add_flag("--zero-shot", run.zero_shot, "Evaluate the initial memory only");
    run_cmd->add_flag("--json", run.json, "Print the JSON report");

    fs::path sweep_config, sweep_out;
    std::vector<double> sweep_taus;
    bool sweep_parallel = false, sweep_json = false;
    auto* sweep_cmd = app.add_subcommand("sweep", "Run one session per failure threshold");
    sweep_cmd->add_option("config", sweep_config, "YAML config")->required();
    sweep_cmd->add_option("--tau", sweep_taus, "Thresholds (default -1.1 -2 -3 -11)");
    sweep_cmd->add_option("-o,--out", sweep_out, "Sweep directory");
    sweep_cmd->add_flag("--parallel", sweep_parallel, "Run thresholds concurrently");
    sweep_cmd->add_flag("--json", sweep_json, "Print JSON");

    fs::path trigger_log;
    std::vector<double> trigger_taus;
    bool trigger_json = false;
    auto* trigger_cmd = app.add_subcommand("analyze-trigger", "Precision/recall of a failure threshold");
    trigger_cmd->add_option("log", trigger_log, "Penalty log CSV (reward,is_restore)")->required();
    trigger_cmd->add_option("--tau", trigger_taus, "Thresholds (default -1.1)");
    trigger_cmd->add_flag("--json", trigger_json, "Print JSON");

    std::vector<fs::path> agg_dirs;
    fs::path agg_out;
    bool agg_json = false;
    auto* agg_cmd = app.add_subcommand("aggregate", "Pool results across session directories");
    agg_cmd->add_option("sessions", agg_dirs, "Session directories")->required();
    agg_cmd->add_option("-o,--out", agg_out, "Also write the report here");
    agg_cmd->add_flag("--json", agg_json, "JSON instead of tables");

    int base_episodes = 100;
    std::uint64_t base_seed = 0;
    fs::path base_log;
    bool base_json = false;
    auto* base_cmd = app.add_subcommand("baselines", "Sleep, random and heuristic calibration episodes");
    base_cmd->add_option("-n,--episodes", base_episodes, "Episodes per policy")->check(CLI::PositiveNumber);
    base_cmd->add_option("--seed", base_seed, "Base seed");
    base_cmd->add_option("--penalty-log", base_log, "Write penalized steps as CSV");
    base_cmd->add_flag("--json", base_json, "Print JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (*run_cmd) return cmd_run(run);
        if (*sweep_cmd) return cmd_sweep(sweep_config, sweep_taus, sweep_out, sweep_parallel, sweep_json);
        if (*trigger_cmd) return cmd_trigger(trigger_log, trigger_taus, trigger_json);
        if (*agg_cmd) return cmd_aggregate(agg_dirs, agg_out, agg_json);
        if (*base_cmd) return cmd_baselines(base_episodes, base_seed, base_log, base_json);
    } catch (const ConfigFailure& e) {
        std::cerr << fmt::format("config error: {}\n", e.what());
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << fmt::format("error: {}\n", e.what());
        return kRunFailure;
    }
    return kOk;
}
