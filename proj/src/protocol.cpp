#include "forge/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <omp.h>
#include <yaml-cpp/yaml.h>

#include "forge/errors.hpp"
#include "forge/seeds.hpp"
#include "forge/stats.hpp"
#include "json.hpp"

namespace forge::protocol {

using nlohmann::json;
using stats::mean;
using stats::sample_sd;
using connector::CallContext;
using connector::Phase;
using connector::PhaseTotals;

std::string_view to_string(TrainingCondition c) { return c == TrainingCondition::Forge ? "best" : "individual"; }
std::string_view to_string(BackendKind b) { return b == BackendKind::Scripted ? "scripted" : "llm"; }
std::string_view to_string(Execution e) { return e == Execution::Serial ? "serial" : "openmp"; }

std::string_view to_string(ConnectorMode m) {
    switch (m) {
        case ConnectorMode::Synthetic: return "synthetic";
        case ConnectorMode::Record: return "record";
        case ConnectorMode::Replay: return "replay";
        case ConnectorMode::Http: return "http";
    }
    return "?";
}

void validate(const ProtocolConfig& c) {
    if (c.instances < 1) throw ConfigError("instances must be >= 1");
    if (c.stages < 1) throw ConfigError("stages must be >= 1");
    if (c.attempts < 1) throw ConfigError("attempts_per_stage must be >= 1");
    if (!(c.tau < 0.0)) throw ConfigError("failure_threshold must be negative");
    if (!std::isfinite(c.theta)) throw ConfigError("graduation_threshold must be finite");
    if (c.eval_episodes < 1) throw ConfigError("eval_episodes_per_instance must be >= 1");
    if (c.memory_capacity < 1) throw ConfigError("memory_capacity must be >= 1");
    if (c.threads < 0) throw ConfigError("threads must be >= 0");
    if (c.backend == BackendKind::Llm && c.connector.mode == ConnectorMode::Replay && c.connector.fixtures.empty())
        throw ConfigError("replay mode needs connector.fixtures");
}

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(const YAML::Node& node, std::string_view key, const std::array<Enum, N>& values) {
    const auto text = node.as<std::string>();
    for (auto v : values)
        if (to_string(v) == text) return v;
    throw ConfigError(fmt::format("invalid value '{}' for {}", text, key));
}

template <typename T>
T scalar(const YAML::Node& node, std::string_view key) {
    try {
        return node.as<T>();
    } catch (const YAML::Exception&) {
        throw ConfigError(fmt::format("invalid value for {}", key));
    }
}

}  // namespace

ProtocolConfig parse_config(std::string_view yaml_text) {
    YAML::Node root;
    try {
        root = YAML::Load(std::string(yaml_text));
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("config is not valid YAML: ") + e.what());
    }
    if (!root.IsMap()) throw ConfigError("config must be a mapping");
    ProtocolConfig c;
    for (const auto& kv : root) {
        const auto key = kv.first.as<std::string>();
        const auto& v = kv.second;
        if (key == "name") c.name = scalar<std::string>(v, key);
        else if (key == "transfer_strategy")
            c.condition = parse_enum(v, key, std::array{TrainingCondition::Forge, TrainingCondition::Reflexion});
        else if (key == "instances") c.instances = scalar<int>(v, key);
        else if (key == "stages") c.stages = scalar<int>(v, key);
        else if (key == "attempts_per_stage") c.attempts = scalar<int>(v, key);
        else if (key == "graduation_threshold") c.theta = scalar<double>(v, key);
        else if (key == "graduation_enabled") c.graduation_enabled = scalar<bool>(v, key);
        else if (key == "failure_threshold") c.tau = scalar<double>(v, key);
        else if (key == "representation") {
            const auto r = memory::parse_representation(scalar<std::string>(v, key));
            if (!r) throw ConfigError("representation must be rules, examples or mixed");
            c.representation = *r;
        } else if (key == "base_seed") c.base_seed = scalar<std::uint64_t>(v, key);
        else if (key == "eval_episodes_per_instance") c.eval_episodes = scalar<int>(v, key);
        else if (key == "memory_capacity") c.memory_capacity = scalar<std::size_t>(v, key);
        else if (key == "backend") c.backend = parse_enum(v, key, std::array{BackendKind::Scripted, BackendKind::Llm});
        else if (key == "execution") c.execution = parse_enum(v, key, std::array{Execution::Serial, Execution::OpenMP});
        else if (key == "threads") c.threads = scalar<int>(v, key);
        else if (key == "roles_dir") c.roles_dir = scalar<std::string>(v, key);
        else if (key == "connector") {
            if (!v.IsMap()) throw ConfigError("connector must be a mapping");
            for (const auto& ckv : v) {
                const auto ckey = ckv.first.as<std::string>();
                if (ckey == "mode")
                    c.connector.mode = parse_enum(ckv.second, "connector.mode",
                                                  std::array{ConnectorMode::Synthetic, ConnectorMode::Record,
                                                             ConnectorMode::Replay, ConnectorMode::Http});
                else if (ckey == "model") c.connector.model = scalar<std::string>(ckv.second, ckey);
                else if (ckey == "fixtures") c.connector.fixtures = scalar<std::string>(ckv.second, ckey);
                else throw ConfigError("unknown connector key '" + ckey + "'");
            }
        } else {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    validate(c);
    return c;
}

ProtocolConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string config_yaml(const ProtocolConfig& c) {
    YAML::Emitter out;
    out << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << c.name;
    out << YAML::Key << "transfer_strategy" << YAML::Value << std::string(to_string(c.condition));
    out << YAML::Key << "instances" << YAML::Value << c.instances;
    out << YAML::Key << "stages" << YAML::Value << c.stages;
    out << YAML::Key << "attempts_per_stage" << YAML::Value << c.attempts;
    out << YAML::Key << "graduation_threshold" << YAML::Value << fmt::format("{}", c.theta);
    out << YAML::Key << "graduation_enabled" << YAML::Value << c.graduation_enabled;
    out << YAML::Key << "failure_threshold" << YAML::Value << fmt::format("{}", c.tau);
    out << YAML::Key << "representation" << YAML::Value << std::string(memory::to_string(c.representation));
    out << YAML::Key << "base_seed" << YAML::Value << c.base_seed;
    out << YAML::Key << "eval_episodes_per_instance" << YAML::Value << c.eval_episodes;
    out << YAML::Key << "memory_capacity" << YAML::Value << c.memory_capacity;
    out << YAML::Key << "backend" << YAML::Value << std::string(to_string(c.backend));
    out << YAML::Key << "connector" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "mode" << YAML::Value << std::string(to_string(c.connector.mode));
    out << YAML::Key << "model" << YAML::Value << c.connector.model;
    if (!c.connector.fixtures.empty()) out << YAML::Key << "fixtures" << YAML::Value << c.connector.fixtures;
    out << YAML::EndMap;
    out << YAML::Key << "execution" << YAML::Value << std::string(to_string(c.execution));
    out << YAML::Key << "threads" << YAML::Value << c.threads;
    if (!c.roles_dir.empty()) out << YAML::Key << "roles_dir" << YAML::Value << c.roles_dir;
    out << YAML::EndMap;
    return std::string(out.c_str()) + "\n";
}

std::vector<double> FinalReport::all_eval_returns() const {
    std::vector<double> out;
    for (const auto& i : instances) out.insert(out.end(), i.eval_returns.begin(), i.eval_returns.end());
    return out;
}

namespace {

json totals_json(const PhaseTotals& t) {
    return {{"adaptation", {{"prompt", t.adaptation.prompt_tokens}, {"completion", t.adaptation.completion_tokens}}},
            {"evaluation", {{"prompt", t.evaluation.prompt_tokens}, {"completion", t.evaluation.completion_tokens}}}};
}

PhaseTotals totals_from_json(const json& j) {
    PhaseTotals t;
    t.adaptation = {j.at("adaptation").at("prompt").get<std::int64_t>(),
                    j.at("adaptation").at("completion").get<std::int64_t>()};
    t.evaluation = {j.at("evaluation").at("prompt").get<std::int64_t>(),
                    j.at("evaluation").at("completion").get<std::int64_t>()};
    return t;
}

json optional_int(const std::optional<int>& v) { return v ? json(*v) : json(nullptr); }

json stage_json(const StageReport& s) {
    json results = json::array();
    for (const auto& r : s.results)
        results.push_back({{"instance", r.instance},
                           {"return", r.failed ? json(nullptr) : json(r.episode_return)},
                           {"failed", r.failed},
                           {"graduated_now", r.graduated_now}});
    json tokens = json::array();
    for (const auto& t : s.tokens) tokens.push_back(totals_json(t));
    return {{"stage", s.stage},
            {"checkpoints", results},
            {"champion", optional_int(s.champion)},
            {"new_graduates", s.new_graduates},
            {"graduated", s.graduated},
            {"attempts", s.attempts},
            {"aborts", s.aborts},
            {"errored_attempts", s.errored_attempts},
            {"artifacts_added", s.artifacts_added},
            {"broadcast_recipients", s.broadcast_recipients},
            {"tokens", tokens}};
}

StageReport stage_from_json(const json& j) {
    StageReport s;
    s.stage = j.at("stage").get<int>();
    for (const auto& r : j.at("checkpoints")) {
        CheckpointResult c;
        c.instance = r.at("instance").get<int>();
        c.stage = s.stage;
        c.failed = r.at("failed").get<bool>();
        c.episode_return = c.failed ? kFailedCheckpoint : r.at("return").get<double>();
        c.graduated_now = r.at("graduated_now").get<bool>();
        s.results.push_back(c);
    }
    if (!j.at("champion").is_null()) s.champion = j.at("champion").get<int>();
    s.new_graduates = j.at("new_graduates").get<std::vector<int>>();
    s.graduated = j.at("graduated").get<std::vector<int>>();
    s.attempts = j.at("attempts").get<int>();
    s.aborts = j.at("aborts").get<int>();
    s.errored_attempts = j.at("errored_attempts").get<int>();
    s.artifacts_added = j.at("artifacts_added").get<std::size_t>();
    s.broadcast_recipients = j.at("broadcast_recipients").get<std::size_t>();
    for (const auto& t : j.at("tokens")) s.tokens.push_back(totals_from_json(t));
    return s;
}

void write_text(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
}

}  // namespace

std::string to_json(const FinalReport& r) {
    json stages = json::array();
    for (const auto& s : r.stages) stages.push_back(stage_json(s));
    json instances = json::array();
    for (const auto& i : r.instances)
        instances.push_back({{"instance", i.instance},
                             {"graduation_stage", optional_int(i.graduation_stage)},
                             {"eval_returns", i.eval_returns},
                             {"memory_hash", i.memory_hash},
                             {"artifacts", i.artifacts},
                             {"tokens", totals_json(i.tokens)}});
    json j = {{"format", "forge-final-report/1"},
              {"sd_convention", "sample (n-1)"},
              {"config", config_yaml(r.config)},
              {"failed", r.failed},
              {"error", r.error},
              {"mean_return", r.mean_return},
              {"sd_return", r.sd_return},
              {"graduation_distribution", r.graduation_distribution},
              {"tokens", totals_json(r.tokens)},
              {"stages", stages},
              {"instances", instances}};
    return j.dump(2) + "\n";
}

FinalReport parse_final_report(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(e.what(), e.byte);
    }
    try {
        if (j.at("format") != "forge-final-report/1") throw ParseError("not a final report", 0);
        FinalReport r;
        r.config = parse_config(j.at("config").get<std::string>());
        r.failed = j.at("failed").get<bool>();
        r.error = j.at("error").get<std::string>();
        r.mean_return = j.at("mean_return").get<double>();
        r.sd_return = j.at("sd_return").get<double>();
        r.graduation_distribution = j.at("graduation_distribution").get<std::vector<int>>();
        r.tokens = totals_from_json(j.at("tokens"));
        for (const auto& s : j.at("stages")) r.stages.push_back(stage_from_json(s));
        for (const auto& i : j.at("instances")) {
            InstanceReport ir;
            ir.instance = i.at("instance").get<int>();
            if (!i.at("graduation_stage").is_null()) ir.graduation_stage = i.at("graduation_stage").get<int>();
            ir.eval_returns = i.at("eval_returns").get<std::vector<double>>();
            ir.memory_hash = i.at("memory_hash").get<std::string>();
            ir.artifacts = i.at("artifacts").get<std::size_t>();
            ir.tokens = totals_from_json(i.at("tokens"));
            r.instances.push_back(std::move(ir));
        }
        return r;
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed final report: ") + e.what(), text.size());
    }
}

std::string render_text(const FinalReport& r) {
    std::string out = fmt::format("Session {} ({}, {}, graduation {})\n", r.config.name, to_string(r.config.condition),
                                  memory::to_string(r.config.representation),
                                  r.config.graduation_enabled ? "on" : "off");
    if (r.failed) out += fmt::format("RUN FAILED: {}\n", r.error);
    out += "\nStage  Mean ckpt  Champion  Graduated  Aborts  Artifacts\n";
    for (const auto& s : r.stages) {
        std::vector<double> xs;
        for (const auto& c : s.results)
            if (!c.failed) xs.push_back(c.episode_return);
        out += fmt::format("S{:<5} {:>9}  {:>8}  {:>9}  {:>6}  {:>9}\n", s.stage,
                           xs.empty() ? std::string("-") : fmt::format("{:.2f}", mean(xs)),
                           s.champion ? std::to_string(*s.champion) : std::string("-"), s.graduated.size(), s.aborts,
                           s.artifacts_added);
    }
    out += "\nInstance  Graduated  Eval returns\n";
    for (const auto& i : r.instances) {
        std::vector<std::string> rs;
        for (double x : i.eval_returns) rs.push_back(fmt::format("{:.2f}", x));
        out += fmt::format("{:<8}  {:>9}  {}\n", i.instance,
                           i.graduation_stage ? fmt::format("S{}", *i.graduation_stage) : std::string("never"),
                           fmt::join(rs, " "));
    }
    out += fmt::format("\nMean return {:.2f} +/- {:.2f} (sample SD)\n", r.mean_return, r.sd_return);
    out += "Graduation stage:";
    for (std::size_t s = 0; s < r.graduation_distribution.size(); ++s) {
        const bool never = s + 1 == r.graduation_distribution.size();
        out += fmt::format(" {}={}", never ? std::string("Never") : fmt::format("S{}", s + 1),
                           r.graduation_distribution[s]);
    }
    out += fmt::format("\nTokens adaptation {}/{} evaluation {}/{} (prompt/completion)\n",
                       r.tokens.adaptation.prompt_tokens, r.tokens.adaptation.completion_tokens,
                       r.tokens.evaluation.prompt_tokens, r.tokens.evaluation.completion_tokens);
    return out;
}

double checkpoint(const InstanceMemory& memory, std::uint64_t seed, const agents::ActingBackend& backend,
                  Representation rep, CallContext& ctx) {
    return cage::episode_return(reflexion::run_frozen_episode(memory, seed, backend, rep, ctx));
}

std::vector<int> graduate_set(const std::vector<CheckpointResult>& results, double theta, const std::set<int>& G,
                              bool graduation_enabled) {
    std::vector<int> h;
    if (!graduation_enabled) return h;
    for (const auto& r : results)
        if (!G.contains(r.instance) && !r.failed && r.episode_return > theta) h.push_back(r.instance);
    std::sort(h.begin(), h.end());
    return h;
}

std::optional<int> select_champion(const std::vector<CheckpointResult>& results, const std::set<int>& G) {
    std::optional<int> best;
    double best_return = kFailedCheckpoint;
    for (const auto& r : results) {
        if (G.contains(r.instance) || r.failed) continue;
        if (!best || r.episode_return > best_return || (r.episode_return == best_return && r.instance < *best)) {
            best = r.instance;
            best_return = r.episode_return;
        }
    }
    return best;
}

std::size_t broadcast(std::vector<InstanceMemory>& population, int champion, const std::set<int>& G) {
    if (champion < 0 || std::size_t(champion) >= population.size() || G.contains(champion))
        throw ProtocolError("broadcast champion must be an active instance");
    std::size_t calls = 0;
    for (std::size_t i = 0; i < population.size(); ++i) {
        if (int(i) == champion || G.contains(int(i))) continue;
        population[i] = memory::replace_dynamic(std::move(population[i]), population[std::size_t(champion)]);
        ++calls;
    }
    return calls;
}

BackendBundle::BackendBundle(const ProtocolConfig& config) : config_(config) {
    if (config.backend == BackendKind::Scripted) {
        acting_ = std::make_unique<agents::ScriptedBackend>();
        learner_ = std::make_unique<reflexion::ScriptedLearner>();
        return;
    }
    const auto roles =
        config.roles_dir.empty() ? agents::default_role_definitions() : agents::load_role_definitions(config.roles_dir);
    const connector::Connector* conn = nullptr;
    switch (config.connector.mode) {
        case ConnectorMode::Http:
            http_ = std::make_unique<connector::HttpConnector>(connector::http_settings_from_env());
            conn = http_.get();
            break;
        case ConnectorMode::Record:
            if (const char* url = std::getenv("FORGE_LLM_BASE_URL"); url && *url)
                upstream_ = std::make_unique<connector::HttpConnector>(connector::http_settings_from_env());
            mock_ = std::make_unique<connector::MockConnector>(connector::MockConnector::Mode::Record,
                                                               agents::synthetic_responder(), upstream_.get());
            conn = mock_.get();
            break;
        case ConnectorMode::Replay:
            mock_ = std::make_unique<connector::MockConnector>(connector::MockConnector::Mode::Replay, nullptr);
            mock_->load_fixtures(config.connector.fixtures);
            conn = mock_.get();
            break;
        case ConnectorMode::Synthetic:
            mock_ = std::make_unique<connector::MockConnector>(connector::MockConnector::Mode::Synthetic,
                                                               agents::synthetic_responder());
            conn = mock_.get();
            break;
    }
    acting_ = std::make_unique<agents::LlmBackend>(*conn, roles, config.connector.model);
    learner_ = std::make_unique<reflexion::LlmLearner>(*conn, roles, config.connector.model);
}

BackendBundle::~BackendBundle() = default;

void BackendBundle::finish() const {
    if (mock_ && mock_->mode() == connector::MockConnector::Mode::Record && !config_.connector.fixtures.empty())
        mock_->save_fixtures(config_.connector.fixtures);
}

namespace {

// Runs f(0..n-1); each call touches only its own slot. Exceptions are caught
// per slot and returned, since none may cross an OpenMP region boundary.
template <typename F>
std::vector<std::string> for_each_slot(std::size_t n, Execution exec, int threads, F&& f) {
    std::vector<std::string> errors(n);
    auto guarded = [&](std::size_t k) {
        try {
            f(k);
        } catch (const std::exception& e) {
            errors[k] = e.what();
            if (errors[k].empty()) errors[k] = "unknown error";
        }
    };
    if (exec == Execution::Serial || n < 2) {
        for (std::size_t k = 0; k < n; ++k) guarded(k);
    } else {
        const int nt = threads > 0 ? threads : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic, 1) num_threads(nt)
        for (long k = 0; k < long(n); ++k) guarded(std::size_t(k));
    }
    return errors;
}

std::string first_error(const std::vector<std::string>& errors, const std::vector<int>& ids, std::string_view what) {
    for (std::size_t k = 0; k < errors.size(); ++k)
        if (!errors[k].empty()) return fmt::format("{} failed for instance {}: {}", what, ids[k], errors[k]);
    return {};
}

struct Coordinator {
    const ProtocolConfig& config;
    const Backends& backends;
    const RunOptions& options;
    Execution exec;
    std::atomic<std::uint64_t> seq{0};
    std::vector<std::vector<TraceEvent>> traces;
    connector::TokenLog log;
    std::vector<std::string> events;

    Coordinator(const ProtocolConfig& c, const Backends& b, const RunOptions& o)
        : config(c),
          backends(b),
          options(o),
          exec(o.execution.value_or(c.execution)),
          traces(std::size_t(c.instances)),
          log(o.run_dir ? connector::TokenLog(*o.run_dir / "token_usage.log") : connector::TokenLog()) {}

    void stamp(TraceEvent::Kind kind, int stage, int instance) {
        traces[std::size_t(instance)].push_back({kind, stage, instance, seq.fetch_add(1)});
    }

    std::optional<std::filesystem::path> workspace(int instance) const {
        if (!options.run_dir) return std::nullopt;
        return *options.run_dir / "workspaces" / fmt::format("instance_{}", instance);
    }

    // Drains per-instance contexts in instance order; the only writer of the
    // shared token log.
    void drain(std::vector<CallContext>& ctxs, std::vector<PhaseTotals>* per_instance) {
        for (auto& ctx : ctxs) {
            for (const auto& e : ctx.entries)
                if (per_instance) (*per_instance)[std::size_t(ctx.instance)][e.phase] += e.usage;
            log.append(ctx.entries);
            for (auto& ev : ctx.events) events.push_back(fmt::format("instance {}: {}", ctx.instance, ev));
            ctx.entries.clear();
            ctx.events.clear();
        }
    }

    void notify(Barrier b, int stage, const std::vector<InstanceMemory>& pop, const std::set<int>& G) const {
        if (options.observer) options.observer({b, stage, pop, G});
    }

    // Frozen evaluation of every instance; returns per-instance returns.
    std::vector<std::vector<double>> evaluate(const std::vector<InstanceMemory>& population, std::string& error) {
        const std::size_t n = population.size();
        std::vector<std::vector<double>> returns(n);
        std::vector<CallContext> ctxs(n);
        std::vector<int> ids(n);
        for (std::size_t i = 0; i < n; ++i) {
            ctxs[i].instance = int(i);
            ctxs[i].phase = Phase::Evaluation;
            ids[i] = int(i);
        }
        const auto errors = for_each_slot(n, exec, config.threads, [&](std::size_t i) {
            stamp(TraceEvent::Kind::EvaluationStart, config.stages + 1, int(i));
            for (int e = 0; e < config.eval_episodes; ++e) {
                const auto seed = seeds::eval_seed(config.base_seed, int(i), e);
                double r = 0.0;
                try {
                    r = checkpoint(population[i], seed, backends.acting, config.representation, ctxs[i]);
                } catch (const connector::ConnectorError&) {
                    ctxs[i].event(fmt::format("evaluation episode {} retried", e));
                    r = checkpoint(population[i], seed, backends.acting, config.representation, ctxs[i]);
                }
                returns[i].push_back(r);
            }
        });
        drain(ctxs, nullptr);
        error = first_error(errors, ids, "evaluation");
        return returns;
    }
};

void finish_report(FinalReport& report, const std::vector<InstanceMemory>& population,
                   const std::vector<std::vector<double>>& returns, const std::vector<std::optional<int>>& grad_stage,
                   const connector::TokenLog& log, int stages) {
    const auto per_instance = log.totals_by_instance(int(population.size()));
    report.graduation_distribution.assign(std::size_t(stages) + 1, 0);
    for (std::size_t i = 0; i < population.size(); ++i) {
        InstanceReport ir;
        ir.instance = int(i);
        ir.graduation_stage = grad_stage[i];
        ir.eval_returns = returns[i];
        ir.memory_hash = memory::memory_hash(population[i]);
        ir.artifacts = population[i].artifact_count();
        ir.tokens = per_instance[i];
        report.instances.push_back(std::move(ir));
        if (grad_stage[i])
            ++report.graduation_distribution[std::size_t(*grad_stage[i] - 1)];
        else
            ++report.graduation_distribution.back();
    }
    const auto all = report.all_eval_returns();
    report.mean_return = mean(all);
    report.sd_return = sample_sd(all);
    report.tokens = log.totals();
}

}  // namespace

RunResult run_protocol(const ProtocolConfig& config, const Backends& backends, const RunOptions& options) {
    validate(config);
    const auto roles =
        config.roles_dir.empty() ? agents::default_role_definitions() : agents::load_role_definitions(config.roles_dir);
    const std::size_t n = std::size_t(config.instances);
    Coordinator co(config, backends, options);
    std::vector<InstanceMemory> population(n, agents::initial_memory(roles, config.memory_capacity));
    std::set<int> G;
    std::vector<std::optional<int>> grad_stage(n);

    RunResult result;
    FinalReport& report = result.report;
    report.config = config;
    const auto& dir = options.run_dir;
    if (dir) {
        std::filesystem::create_directories(*dir);
        write_text(*dir / "config.yaml", options.config_text.empty() ? config_yaml(config) : options.config_text);
    }

    auto fail = [&](std::string error) {
        report.failed = true;
        report.error = std::move(error);
    };

    for (int stage = 1; stage <= config.stages && !report.failed; ++stage) {
        StageReport sr;
        sr.stage = stage;
        sr.tokens.assign(n, {});
        std::vector<int> active;
        for (int i = 0; i < int(n); ++i)
            if (!G.contains(i)) active.push_back(i);

        std::vector<CallContext> ctxs(active.size());
        for (std::size_t k = 0; k < active.size(); ++k) ctxs[k].instance = active[k];

        // Reflexion loops.
        std::vector<std::vector<reflexion::AttemptRecord>> records(active.size());
        auto errors = for_each_slot(active.size(), co.exec, config.threads, [&](std::size_t k) {
            const int i = active[k];
            co.stamp(TraceEvent::Kind::AttemptStart, stage, i);
            reflexion::LoopSettings ls{config.attempts, config.tau,      config.representation,
                                       config.base_seed, stage,           i,
                                       co.workspace(i)};
            auto loop = reflexion::reflexion_loop(population[std::size_t(i)], ls, backends.acting, backends.learner,
                                                  ctxs[k]);
            population[std::size_t(i)] = std::move(loop.memory);
            records[k] = std::move(loop.attempts);
            co.stamp(TraceEvent::Kind::AttemptEnd, stage, i);
        });
        for (const auto& recs : records)
            for (const auto& r : recs) {
                ++sr.attempts;
                sr.aborts += r.status == reflexion::AttemptStatus::Aborted;
                sr.errored_attempts += r.status == reflexion::AttemptStatus::Errored;
                sr.artifacts_added += r.artifacts_added;
            }
        if (auto e = first_error(errors, active, "reflexion loop"); !e.empty()) fail(e);
        co.notify(Barrier::AfterLoops, stage, population, G);

        // Frozen checkpoints.
        std::vector<CheckpointResult> results(active.size());
        if (!report.failed) {
            errors = for_each_slot(active.size(), co.exec, config.threads, [&](std::size_t k) {
                const int i = active[k];
                co.stamp(TraceEvent::Kind::CheckpointStart, stage, i);
                const auto seed = seeds::checkpoint_seed(config.base_seed, stage, i);
                auto& r = results[k];
                r.instance = i;
                r.stage = stage;
                for (int tries = 0; tries < 2; ++tries) {
                    try {
                        r.episode_return =
                            checkpoint(population[std::size_t(i)], seed, backends.acting, config.representation,
                                       ctxs[k]);
                        r.failed = false;
                        break;
                    } catch (const connector::ConnectorError& e) {
                        r.failed = true;
                        r.episode_return = kFailedCheckpoint;
                        ctxs[k].event(fmt::format("checkpoint stage {} failed: {}", stage, e.what()));
                    }
                }
                co.stamp(TraceEvent::Kind::CheckpointEnd, stage, i);
            });
            if (auto e = first_error(errors, active, "checkpoint"); !e.empty()) fail(e);
        }
        co.drain(ctxs, &sr.tokens);

        if (!report.failed) {
            sr.new_graduates = graduate_set(results, config.theta, G, config.graduation_enabled);
            for (int h : sr.new_graduates) {
                G.insert(h);
                grad_stage[std::size_t(h)] = stage;
            }
            for (auto& r : results) r.graduated_now = std::binary_search(sr.new_graduates.begin(),
                                                                         sr.new_graduates.end(), r.instance);
            co.notify(Barrier::AfterCheckpoints, stage, population, G);

            if (config.condition == TrainingCondition::Forge) {
                sr.champion = select_champion(results, G);
                if (sr.champion) sr.broadcast_recipients = broadcast(population, *sr.champion, G);
            }
            co.notify(Barrier::AfterBroadcast, stage, population, G);
        }
        sr.results = std::move(results);
        sr.graduated.assign(G.begin(), G.end());

        if (dir) {
            for (std::size_t i = 0; i < n; ++i)
                write_text(*dir / "workspaces" / fmt::format("instance_{}", i) / fmt::format("stage_{}", stage) /
                               "memory.json",
                           memory::save(population[i]));
            write_text(*dir / fmt::format("stage_summary_s{}.json", stage), stage_json(sr).dump(2) + "\n");
        }
        report.stages.push_back(std::move(sr));
    }

    std::vector<std::vector<double>> returns(n);
    if (!report.failed) {
        co.notify(Barrier::BeforeEvaluation, config.stages, population, G);
        std::string error;
        returns = co.evaluate(population, error);
        if (!error.empty()) fail(error);
    }
    finish_report(report, population, returns, grad_stage, co.log, config.stages);

    if (dir) {
        for (std::size_t i = 0; i < n; ++i) memory::write_workspace(*co.workspace(int(i)), population[i]);
        write_text(*dir / "final_report.json", to_json(report));
        write_text(*dir / "final_report.txt", render_text(report));
        std::string log;
        for (const auto& e : co.events) log += e + "\n";
        write_text(*dir / "events.log", log);
    }

    for (auto& t : co.traces) result.trace.insert(result.trace.end(), t.begin(), t.end());
    std::sort(result.trace.begin(), result.trace.end(),
              [](const TraceEvent& a, const TraceEvent& b) { return a.seq < b.seq; });
    result.memories = std::move(population);
    result.token_log = co.log.entries();
    result.events = std::move(co.events);
    return result;
}

RunResult run_protocol(const ProtocolConfig& config, const RunOptions& options) {
    validate(config);
    BackendBundle bundle(config);
    auto result = run_protocol(config, bundle.backends(), options);
    bundle.finish();
    return result;
}

FinalReport zero_shot(const ProtocolConfig& config, const Backends& backends) {
    validate(config);
    const auto roles =
        config.roles_dir.empty() ? agents::default_role_definitions() : agents::load_role_definitions(config.roles_dir);
    RunOptions options;
    Coordinator co(config, backends, options);
    std::vector<InstanceMemory> population(std::size_t(config.instances),
                                           agents::initial_memory(roles, config.memory_capacity));
    FinalReport report;
    report.config = config;
    std::string error;
    const auto returns = co.evaluate(population, error);
    if (!error.empty()) {
        report.failed = true;
        report.error = error;
    }
    finish_report(report, population, returns, std::vector<std::optional<int>>(population.size()), co.log,
                  config.stages);
    return report;
}

}  // namespace forge::protocol
