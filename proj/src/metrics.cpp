#include "forge/metrics.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include <fmt/format.h>
#include <omp.h>

#include "forge/calibration.hpp"
#include "forge/errors.hpp"
#include "forge/seeds.hpp"
#include "forge/stats.hpp"
#include "json.hpp"

namespace forge::metrics {

using nlohmann::json;
using protocol::FinalReport;

double tail_risk(std::span<const double> returns, double threshold) {
    if (returns.empty()) throw std::domain_error("tail_risk of an empty return list");
    const auto below = std::count_if(returns.begin(), returns.end(), [&](double r) { return r < threshold; });
    return double(below) / double(returns.size());
}

TriggerAnalysis trigger_analysis(std::span<const PenaltyStep> log, double tau) {
    TriggerAnalysis a;
    a.tau = tau;
    for (const auto& s : log) {
        if (!(s.reward < 0.0)) throw ValidationError(fmt::format("penalty log holds a non-penalty reward {}", s.reward));
        const bool fires = s.reward < tau;
        if (s.is_restore) {
            a.false_positives += fires;
        } else {
            ++a.failure_steps;
            a.true_triggers_captured += fires;
        }
    }
    if (const long fired = a.true_triggers_captured + a.false_positives; fired > 0)
        a.precision = double(a.true_triggers_captured) / double(fired);
    if (a.failure_steps > 0) a.recall = double(a.true_triggers_captured) / double(a.failure_steps);
    return a;
}

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

double parse_double(std::string_view text, std::size_t offset) {
    text = trim(text);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size())
        throw ParseError(fmt::format("bad number '{}'", text), offset);
    return v;
}

bool parse_flag(std::string_view text, std::size_t offset) {
    text = trim(text);
    if (text == "1" || text == "true") return true;
    if (text == "0" || text == "false") return false;
    throw ParseError(fmt::format("bad is_restore value '{}'", text), offset);
}

json optional_double(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json usage_json(const connector::TokenUsage& u) {
    return {{"prompt", u.prompt_tokens},
            {"completion", u.completion_tokens},
            {"ratio", u.prompt_tokens > 0 ? json(double(u.completion_tokens) / double(u.prompt_tokens)) : json(nullptr)}};
}

json totals_json(const connector::PhaseTotals& t) {
    return {{"adaptation", usage_json(t.adaptation)},
            {"evaluation", usage_json(t.evaluation)},
            {"total", usage_json(t.combined())}};
}

void add(connector::PhaseTotals& into, const connector::PhaseTotals& t) {
    into.adaptation += t.adaptation;
    into.evaluation += t.evaluation;
}

std::string rate(double r) { return fmt::format("{:.1f}%", 100.0 * r); }

std::string token_row(std::string_view label, const connector::TokenUsage& u) {
    return fmt::format("  {:<12} prompt {:>12} completion {:>12} ratio {}\n", label, u.prompt_tokens,
                       u.completion_tokens,
                       u.prompt_tokens > 0 ? fmt::format("{:.3f}", double(u.completion_tokens) / double(u.prompt_tokens))
                                           : std::string("-"));
}

std::string graduation_header(std::size_t stages) {
    std::string out;
    for (std::size_t s = 1; s <= stages; ++s) out += fmt::format(" {:>4}", fmt::format("S{}", s));
    return out + fmt::format(" {:>5}", "Never");
}

std::string graduation_row(const std::vector<int>& dist) {
    std::string out;
    for (int v : dist) out += fmt::format(" {:>4}", v);
    return out;
}

}  // namespace

std::vector<PenaltyStep> parse_penalty_log(std::string_view csv) {
    std::vector<PenaltyStep> out;
    std::size_t pos = 0;
    bool header = true;
    while (pos < csv.size()) {
        const auto nl = csv.find('\n', pos);
        const auto line = trim(csv.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
        const auto at = pos;
        pos = nl == std::string_view::npos ? csv.size() : nl + 1;
        if (line.empty() || line.front() == '#') continue;
        if (header) {
            header = false;
            if (line != "reward,is_restore") throw ParseError("penalty log must start with 'reward,is_restore'", at);
            continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string_view::npos) throw ParseError("penalty log row needs two fields", at);
        out.push_back({parse_double(line.substr(0, comma), at), parse_flag(line.substr(comma + 1), at)});
    }
    if (header) throw ParseError("empty penalty log", 0);
    return out;
}

std::string penalty_log_csv(std::span<const PenaltyStep> log) {
    std::string out = "reward,is_restore\n";
    for (const auto& s : log) out += fmt::format("{:.2f},{}\n", s.reward, s.is_restore ? 1 : 0);
    return out;
}

std::vector<PenaltyStep> penalty_steps(const cage::Trajectory& trajectory) {
    std::vector<PenaltyStep> out;
    for (const auto& rec : trajectory)
        if (rec.reward < 0.0) out.push_back({rec.reward, rec.action.kind == cage::ActionKind::Restore});
    return out;
}

std::string trigger_json(const std::vector<TriggerAnalysis>& analyses) {
    json rows = json::array();
    for (const auto& a : analyses)
        rows.push_back({{"tau", a.tau},
                        {"failure_steps", a.failure_steps},
                        {"true_triggers_captured", a.true_triggers_captured},
                        {"false_positives", a.false_positives},
                        {"precision", optional_double(a.precision)},
                        {"recall", a.recall}});
    return json{{"format", "forge-trigger-analysis/1"}, {"thresholds", rows}}.dump(2) + "\n";
}

std::string render_trigger(const std::vector<TriggerAnalysis>& analyses) {
    std::string out = fmt::format("{:>8} {:>9} {:>9} {:>9} {:>9} {:>7}\n", "tau", "failures", "captured", "false+",
                                  "precision", "recall");
    for (const auto& a : analyses)
        out += fmt::format("{:>8.2f} {:>9} {:>9} {:>9} {:>9} {:>7.3f}\n", a.tau, a.failure_steps,
                           a.true_triggers_captured, a.false_positives,
                           a.precision ? fmt::format("{:.3f}", *a.precision) : std::string("-"), a.recall);
    return out;
}

BaselineRun run_baselines(int episodes, std::uint64_t seed) {
    if (episodes < 1) throw ValidationError("baselines need at least one episode");
    cage::SleepPolicy sleep;
    cage::RandomPolicy random;
    cage::HeuristicPolicy heuristic;
    const std::array<std::tuple<std::string_view, cage::Policy*, double>, 3> policies = {{
        {"sleep", &sleep, calibration::kReferenceSleep},
        {"random", &random, calibration::kReferenceRandom},
        {"heuristic", &heuristic, calibration::kReferenceHeuristic},
    }};
    BaselineRun run;
    for (const auto& [name, policy, reference] : policies) {
        BaselineResult r{std::string(name), {}, 0.0, 0.0, reference, false};
        for (int e = 0; e < episodes; ++e) {
            const auto t = cage::run_episode(*policy, seeds::derive(seed, "baseline", {std::uint64_t(e)}));
            r.returns.push_back(cage::episode_return(t));
            const auto steps = penalty_steps(t);
            run.penalty_log.insert(run.penalty_log.end(), steps.begin(), steps.end());
        }
        r.mean = stats::mean(r.returns);
        r.sd = stats::sample_sd(r.returns);
        r.within_tolerance = std::abs(r.mean - reference) <= calibration::kReferenceTolerance * std::abs(reference);
        run.policies.push_back(std::move(r));
    }
    run.ordered = run.policies[0].mean < run.policies[1].mean && run.policies[1].mean < run.policies[2].mean;
    return run;
}

std::string render_baselines(const BaselineRun& run) {
    std::string out = fmt::format("{:<10} {:>9} {:>8} {:>10} {:>8}\n", "policy", "mean", "sd", "reference", "±25%");
    for (const auto& p : run.policies)
        out += fmt::format("{:<10} {:>9.2f} {:>8.2f} {:>10.2f} {:>8}\n", p.policy, p.mean, p.sd, p.reference,
                           p.within_tolerance ? "yes" : "no");
    out += fmt::format("ordering sleep < random < heuristic: {}\n", run.ordered ? "yes" : "no");
    return out;
}

std::string baselines_json(const BaselineRun& run) {
    json rows = json::array();
    for (const auto& p : run.policies)
        rows.push_back({{"policy", p.policy},
                        {"episodes", p.returns.size()},
                        {"mean", p.mean},
                        {"sd", p.sd},
                        {"reference", p.reference},
                        {"within_tolerance", p.within_tolerance}});
    return json{{"format", "forge-baselines/1"}, {"policies", rows}, {"ordered", run.ordered}}.dump(2) + "\n";
}

std::string condition_label(const FinalReport& report) {
    if (report.stages.empty()) return "zero-shot";
    const auto base = std::string(protocol::to_string(report.config.condition));
    if (report.config.condition == protocol::TrainingCondition::Forge && !report.config.graduation_enabled)
        return base + "-nograd";
    return base;
}

SessionSummary summarize(const FinalReport& r) {
    SessionSummary s;
    s.name = r.config.name;
    s.condition = condition_label(r);
    s.representation = std::string(memory::to_string(r.config.representation));
    s.tau = r.config.tau;
    s.instances = int(r.instances.size());
    s.failed = r.failed;
    s.error = r.error;
    s.tokens = r.tokens;
    s.graduation_distribution = r.graduation_distribution;
    for (const auto& i : r.instances) {
        s.instance_returns.push_back(i.eval_returns);
        s.graduated += i.graduation_stage.has_value();
    }
    if (s.instances > 0) s.graduation_rate = double(s.graduated) / double(s.instances);
    const auto all = r.all_eval_returns();
    s.mean_return = stats::mean(all);
    s.sd_return = stats::sample_sd(all);
    if (!all.empty()) {
        s.major_failure_rate = tail_risk(all, kMajorFailure);
        s.catastrophic_failure_rate = tail_risk(all, kCatastrophicFailure);
    }

    std::map<int, std::vector<double>> per_instance;
    std::vector<double> pooled;
    for (const auto& st : r.stages) {
        StageStats ss{st.stage, 0.0, 0.0, 0, st.aborts, st.artifacts_added};
        std::vector<double> xs;
        for (const auto& c : st.results) {
            if (c.failed) continue;
            xs.push_back(c.episode_return);
            per_instance[c.instance].push_back(c.episode_return);
        }
        ss.checkpoints = int(xs.size());
        ss.checkpoint_mean = stats::mean(xs);
        ss.checkpoint_sd = stats::sample_sd(xs);
        pooled.insert(pooled.end(), xs.begin(), xs.end());
        s.aborts += st.aborts;
        s.artifacts_added += st.artifacts_added;
        s.stages.push_back(ss);
    }
    std::vector<double> sds;
    for (const auto& [_, xs] : per_instance)
        if (xs.size() >= 2) sds.push_back(stats::sample_sd(xs));
    s.volatility_instance_mean = stats::mean(sds);
    s.volatility_pooled = stats::sample_sd(pooled);
    return s;
}

namespace {

json summary_to_json(const SessionSummary& s) {
    json stages = json::array();
    for (const auto& st : s.stages)
        stages.push_back({{"stage", st.stage},
                          {"checkpoint_mean", st.checkpoint_mean},
                          {"checkpoint_sd", st.checkpoint_sd},
                          {"checkpoints", st.checkpoints},
                          {"aborts", st.aborts},
                          {"artifacts_added", st.artifacts_added}});
    return {{"name", s.name},
            {"condition", s.condition},
            {"representation", s.representation},
            {"tau", s.tau},
            {"instances", s.instances},
            {"instance_returns", s.instance_returns},
            {"mean_return", s.mean_return},
            {"sd_return", s.sd_return},
            {"major_failure_rate", s.major_failure_rate},
            {"catastrophic_failure_rate", s.catastrophic_failure_rate},
            {"graduated", s.graduated},
            {"graduation_rate", s.graduation_rate},
            {"graduation_distribution", s.graduation_distribution},
            {"stages", stages},
            {"aborts", s.aborts},
            {"artifacts_added", s.artifacts_added},
            {"volatility",
             {{"instance_mean", s.volatility_instance_mean}, {"pooled", s.volatility_pooled}}},
            {"tokens", totals_json(s.tokens)},
            {"failed", s.failed},
            {"error", s.error}};
}

}  // namespace

std::string summary_json(const SessionSummary& s) {
    json j = summary_to_json(s);
    j["sd_convention"] = "sample (n-1)";
    return j.dump(2) + "\n";
}

std::vector<SweepEntry> sweep_tau(const protocol::ProtocolConfig& config, const std::vector<double>& taus,
                                  const SweepOptions& options) {
    for (double t : taus)
        if (!(t < 0.0)) throw ConfigError(fmt::format("sweep tau {} is not negative", t));
    std::vector<SweepEntry> out(taus.size());
    const auto one = [&](std::size_t k) {
        auto& e = out[k];
        e.tau = taus[k];
        try {
            auto c = config;
            c.tau = taus[k];
            protocol::RunOptions ro;
            if (options.root) ro.run_dir = *options.root / fmt::format("tau_{}", taus[k]);
            e.summary = summarize(protocol::run_protocol(c, ro).report);
        } catch (const std::exception& ex) {
            e.error = ex.what();
        }
    };
    if (options.parallel) {
#pragma omp parallel for schedule(dynamic, 1)
        for (std::size_t k = 0; k < taus.size(); ++k) one(k);
    } else {
        for (std::size_t k = 0; k < taus.size(); ++k) one(k);
    }
    return out;
}

std::vector<SweepEntry> sweep_tau(const protocol::ProtocolConfig& config, const std::vector<double>& taus,
                                  const protocol::Backends& backends, const SweepOptions& options) {
    for (double t : taus)
        if (!(t < 0.0)) throw ConfigError(fmt::format("sweep tau {} is not negative", t));
    std::vector<SweepEntry> out;
    for (double t : taus) {
        SweepEntry e;
        e.tau = t;
        try {
            auto c = config;
            c.tau = t;
            protocol::RunOptions ro;
            if (options.root) ro.run_dir = *options.root / fmt::format("tau_{}", t);
            e.summary = summarize(protocol::run_protocol(c, backends, ro).report);
        } catch (const std::exception& ex) {
            e.error = ex.what();
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::string sweep_json(const std::vector<SweepEntry>& entries) {
    json rows = json::array();
    for (const auto& e : entries)
        rows.push_back({{"tau", e.tau},
                        {"error", e.error},
                        {"summary", e.summary ? summary_to_json(*e.summary) : json(nullptr)}});
    return json{{"format", "forge-tau-sweep/1"}, {"sd_convention", "sample (n-1)"}, {"runs", rows}}.dump(2) + "\n";
}

std::string render_sweep(const std::vector<SweepEntry>& entries) {
    std::string out = fmt::format("{:>8} {:>16} {:>10} {:>8} {:>10} {:>8}\n", "tau", "return", "graduated",
                                  "aborts", "artifacts", "tokens");
    for (const auto& e : entries) {
        if (!e.summary) {
            out += fmt::format("{:>8.2f} failed: {}\n", e.tau, e.error);
            continue;
        }
        const auto& s = *e.summary;
        out += fmt::format("{:>8.2f} {:>16} {:>10} {:>8} {:>10} {:>8}\n", e.tau,
                           fmt::format("{:.2f} ± {:.2f}", s.mean_return, s.sd_return),
                           fmt::format("{}/{} {}", s.graduated, s.instances, rate(s.graduation_rate)), s.aborts,
                           s.artifacts_added, s.tokens.combined().total());
    }
    return out;
}

AggregateReport aggregate(const std::vector<std::filesystem::path>& dirs) {
    AggregateReport rep;
    std::map<std::pair<std::string, std::string>, std::vector<const SessionSummary*>> keyed;
    for (const auto& dir : dirs) {
        const auto path = dir / "final_report.json";
        try {
            std::ifstream in(path, std::ios::binary);
            if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
            std::stringstream buf;
            buf << in.rdbuf();
            rep.sessions.push_back({dir, summarize(protocol::parse_final_report(buf.str()))});
        } catch (const std::exception& e) {
            rep.skipped.emplace_back(dir, e.what());
        }
    }
    for (const auto& row : rep.sessions) {
        keyed[{row.summary.condition, row.summary.representation}].push_back(&row.summary);
        add(rep.tokens, row.summary.tokens);
    }
    for (const auto& [key, group] : keyed) {
        GroupStats g;
        g.condition = key.first;
        g.representation = key.second;
        g.sessions = int(group.size());
        std::vector<double> all;
        std::size_t stages = 0;
        for (const auto* s : group) {
            for (const auto& xs : s->instance_returns) all.insert(all.end(), xs.begin(), xs.end());
            if (!s->graduation_distribution.empty())
                stages = std::max(stages, s->graduation_distribution.size() - 1);
            add(g.tokens, s->tokens);
        }
        g.graduation_distribution.assign(stages + 1, 0);
        for (const auto* s : group) {
            const auto& d = s->graduation_distribution;
            if (d.empty()) continue;
            for (std::size_t k = 0; k + 1 < d.size(); ++k) g.graduation_distribution[k] += d[k];
            g.graduation_distribution[stages] += d.back();
        }
        g.episodes = int(all.size());
        g.mean_return = stats::mean(all);
        g.sd_return = stats::sample_sd(all);
        if (!all.empty()) {
            g.major_failure_rate = tail_risk(all, kMajorFailure);
            g.catastrophic_failure_rate = tail_risk(all, kCatastrophicFailure);
        }
        rep.groups.push_back(std::move(g));
    }
    return rep;
}

std::string aggregate_json(const AggregateReport& rep) {
    json sessions = json::array();
    for (const auto& row : rep.sessions) {
        auto j = summary_to_json(row.summary);
        j["dir"] = row.dir.string();
        sessions.push_back(std::move(j));
    }
    json groups = json::array();
    for (const auto& g : rep.groups)
        groups.push_back({{"condition", g.condition},
                          {"representation", g.representation},
                          {"sessions", g.sessions},
                          {"episodes", g.episodes},
                          {"mean_return", g.mean_return},
                          {"sd_return", g.sd_return},
                          {"major_failure_rate", g.major_failure_rate},
                          {"catastrophic_failure_rate", g.catastrophic_failure_rate},
                          {"graduation_distribution", g.graduation_distribution},
                          {"tokens", totals_json(g.tokens)}});
    json skipped = json::array();
    for (const auto& [dir, why] : rep.skipped) skipped.push_back({{"dir", dir.string()}, {"reason", why}});
    return json{{"format", "forge-aggregate/1"},
                {"sd_convention", "sample (n-1)"},
                {"groups", groups},
                {"sessions", sessions},
                {"skipped", skipped},
                {"tokens", totals_json(rep.tokens)}}
               .dump(2) +
           "\n";
}

std::string render_aggregate(const AggregateReport& rep) {
    std::string out = "Returns (mean ± sample SD, n-1), pooled over evaluation episodes\n";
    out += fmt::format("{:<14} {:<9} {:>8} {:>8} {:>18} {:>7} {:>7}\n", "condition", "repr", "sessions", "episodes",
                       "return", "<-100", "<-150");
    for (const auto& g : rep.groups)
        out += fmt::format("{:<14} {:<9} {:>8} {:>8} {:>18} {:>7} {:>7}\n", g.condition, g.representation,
                           g.sessions, g.episodes, fmt::format("{:.2f} ± {:.2f}", g.mean_return, g.sd_return),
                           rate(g.major_failure_rate), rate(g.catastrophic_failure_rate));

    out += "\nGraduation stage distribution\n";
    for (const auto& g : rep.groups) {
        if (g.graduation_distribution.empty()) continue;
        out += fmt::format("{:<14} {:<9}{}\n", "", "", graduation_header(g.graduation_distribution.size() - 1));
        out += fmt::format("{:<14} {:<9}{}\n", g.condition, g.representation, graduation_row(g.graduation_distribution));
    }

    out += "\nTokens\n";
    for (const auto& g : rep.groups) {
        out += fmt::format("{} / {}\n", g.condition, g.representation);
        out += token_row("adaptation", g.tokens.adaptation);
        out += token_row("evaluation", g.tokens.evaluation);
        out += token_row("total", g.tokens.combined());
    }
    out += "all sessions\n" + token_row("total", rep.tokens.combined());

    out += "\nSessions\n";
    for (const auto& row : rep.sessions) {
        const auto& s = row.summary;
        out += fmt::format("{}: {} {} tau={:.2f} return {:.2f} ± {:.2f}, graduated {}/{}, volatility {:.2f} "
                           "(instance mean) {:.2f} (pooled){}\n",
                           row.dir.string(), s.condition, s.representation, s.tau, s.mean_return, s.sd_return,
                           s.graduated, s.instances, s.volatility_instance_mean, s.volatility_pooled,
                           s.failed ? " FAILED" : "");
    }
    if (!rep.skipped.empty()) {
        out += "\nSkipped\n";
        for (const auto& [dir, why] : rep.skipped) out += fmt::format("{}: {}\n", dir.string(), why);
    }
    return out;
}

}  // namespace forge::metrics
