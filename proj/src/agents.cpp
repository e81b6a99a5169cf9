#include "forge/agents.hpp"

#include <algorithm>
#include <fstream>
#include <regex>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include "forge/calibration.hpp"
#include "forge/errors.hpp"
#include "json.hpp"

namespace forge::agents {

using nlohmann::json;
using cage::HostFlags;
using memory::Clause;
using memory::Role;

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> lines_of(std::string_view text) {
    std::vector<std::string_view> out;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        out.push_back(text.substr(0, nl));
        if (nl == std::string_view::npos) break;
        text.remove_prefix(nl + 1);
    }
    return out;
}

Role memory_role(AgentRole r) {
    switch (r) {
        case AgentRole::Analyst: return Role::Analyst;
        case AgentRole::ActionChooser: return Role::ActionChooser;
        default: return Role::Planner;
    }
}

std::string join_hosts(const std::array<bool, cage::kHostCount>& set) {
    std::vector<std::string_view> names;
    for (int i = 0; i < cage::kHostCount; ++i)
        if (set[std::size_t(i)]) names.push_back(HostId(i).name());
    return names.empty() ? "none" : fmt::format("{}", fmt::join(names, ", "));
}

std::array<bool, cage::kHostCount> parse_hosts(std::string_view list) {
    std::array<bool, cage::kHostCount> out{};
    list = trim(list);
    if (list == "none") return out;
    while (!list.empty()) {
        const auto comma = list.find(',');
        if (auto h = HostId::from_name(trim(list.substr(0, comma)))) out[std::size_t(h->index())] = true;
        if (comma == std::string_view::npos) break;
        list.remove_prefix(comma + 1);
    }
    return out;
}

json flags_json(const HostFlags& f) {
    return {{"anomalous_process", f.anomalous_process},
            {"suspicious_connection", f.suspicious_connection},
            {"new_file", f.new_file}};
}

HostFlags flags_from_json(const json& j) {
    return {j.value("anomalous_process", false), j.value("suspicious_connection", false), j.value("new_file", false)};
}

// First JSON value embedded in free text.
std::optional<json> extract_json(std::string_view text) {
    const auto open = text.find_first_of("[{");
    if (open == std::string_view::npos) return std::nullopt;
    const char close = text[open] == '[' ? ']' : '}';
    const auto end = text.rfind(close);
    if (end == std::string_view::npos || end < open) return std::nullopt;
    try {
        return json::parse(text.substr(open, end - open + 1));
    } catch (const json::exception&) {
        return std::nullopt;
    }
}

std::string ranking_json(const std::vector<RankedAction>& ranking) {
    json out = json::array();
    for (const auto& r : ranking) out.push_back({{"action", cage::to_string(r.action)}, {"confidence", r.confidence}});
    return out.dump();
}

std::vector<RankedAction> parse_ranking(const json& j) {
    std::vector<RankedAction> out;
    const json& list = j.is_object() && j.contains("ranking") ? j.at("ranking") : j;
    if (!list.is_array()) return out;
    for (const auto& item : list) {
        if (!item.is_object() || !item.contains("action")) continue;
        const auto action = cage::parse_action(item.at("action").get<std::string>());
        if (!action || !action->valid()) continue;
        out.push_back({*action, std::clamp(item.value("confidence", 0.0), 0.0, 1.0)});
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const RankedAction& a, const RankedAction& b) { return a.confidence > b.confidence; });
    return out;
}

std::string focus_for(Severity s) {
    if (s >= Severity::High) return "containment";
    if (s >= Severity::Low) return "investigation";
    return "monitoring";
}

// Hosts worth asking the Analyst about: flagged, most indicators first, then
// by defensive priority.
std::vector<HostId> candidate_hosts(const Observation& obs, std::size_t limit) {
    std::vector<HostId> out;
    for (auto h : cage::priority_order())
        if (obs[h].any()) out.push_back(h);
    std::stable_sort(out.begin(), out.end(), [&](HostId a, HostId b) { return obs[a].count() > obs[b].count(); });
    if (out.size() > limit) out.resize(limit);
    return out;
}

std::optional<HostId> first_confirmed(const EpisodeView& view) {
    for (auto h : cage::priority_order())
        if (view.confirmed[std::size_t(h.index())]) return h;
    return std::nullopt;
}

// First Planner clause that matches and is not suppressed.
template <typename Clauses>
std::optional<std::pair<BlueAction, std::string>> clause_decision(const Clauses& clauses, const EpisodeView& view) {
    for (const auto& [clause, label] : clauses) {
        if (!clause.action || !clause.matches(view.observation)) continue;
        if (suppressed(*clause.action, view)) continue;
        return std::pair{*clause.action, label};
    }
    return std::nullopt;
}

std::vector<std::pair<Clause, std::string>> planner_clauses(const InstanceMemory& memory, Representation rep) {
    std::vector<std::pair<Clause, std::string>> out;
    for (const auto* a : memory::visible(memory, Role::Planner, rep))
        if (a->clause) out.emplace_back(*a->clause, a->id());
    return out;
}

constexpr std::string_view kPlannerPrompt = R"(You are the Planner of a blue-team cyber defense agent protecting a 13-host network for 30 steps.
Each step you receive host indicators and must choose exactly one action.
You may call tools before answering:
  analyse_host: {"host": "<host>"} returns a severity assessment from the Analyst.
  get_suggestion_for_next_action: {"host": "<host>", "severity": "<level>"} returns ranked actions from the ActionChooser.
Use this format:
Thought: <reasoning>
Tool: <tool>: <json arguments>
PAUSE
You will then receive "Observation: <result>". When ready, finish with:
Answer: <action>
Actions are Monitor, or Analyse, Remove, Restore or Decoy followed by a host name.)";

constexpr std::string_view kPlannerMemory = R"(Network: User0-User4 (user subnet), Enterprise0-Enterprise2 and Defender (enterprise subnet), Op_Host0-Op_Host2 and Op_Server0 (operational subnet).
The attacker moves from a user host to an enterprise host to Op_Server0. Losing Op_Server0 is the worst outcome.)";

constexpr std::string_view kAnalystPrompt = R"(You are the Analyst. You receive one host's indicators as JSON and reply with JSON only:
{"severity": "none|low|medium|high|critical", "summary": "<one sentence>", "recommended_focus": "monitoring|investigation|containment"}
If a severe compromise is likely, set recommended_focus to 'containment'.)";

constexpr std::string_view kAnalystMemory = R"(Indicators: anomalous_process means attacker code runs on the host; suspicious_connection means the host is being scanned or used for lateral movement; new_file usually means privilege escalation.
Indicators are noisy: about 5% false alarms and 10% missed detections.)";

constexpr std::string_view kChooserPrompt = R"(You are the ActionChooser. You receive a host, its severity and the situation as JSON and reply with a JSON list of candidate actions sorted by confidence, for example:
[{"action": "Restore Enterprise1", "confidence": 0.7}, {"action": "Monitor", "confidence": 0.3}])";

constexpr std::string_view kActionTable = R"(Action reference:
- Monitor: collect indicators on all hosts. No cost.
- Analyse <host>: inspect one host; its true compromise level is reported with the next observation. No cost.
- Remove <host>: kill user-level attacker processes; useless against root access. No cost.
- Restore <host>: reimage the host to a clean state and remove any decoy. Costs 1.0 per use.
- Decoy <host>: deploy a honeypot service that absorbs exploit attempts against the host until it is restored. No cost.)";

constexpr std::string_view kReflectorPrompt = R"(You are the Reflector. You receive a failed defense episode that was aborted at a heavily penalized step, together with the agent's current memory.
Identify the host and indicator pattern that preceded the failure and write one or more rules, each on its own line, in the form:
- When <host> shows <indicators>, then <action>.)";

constexpr std::string_view kExemplifierPrompt = R"(You are the Exemplifier. You receive a failed defense episode that was aborted at a heavily penalized step, together with the agent's current memory.
Write one worked example of the correct decision in this exact layout:
<example description='<ShortName>'>
Thought: <host> shows <indicators>.
Tool: get_suggestion_for_next_action: {"host": "<host>", "severity": "<level>"}
PAUSE
Observation: [{"action": "<action>", "confidence": <number>}]
Thought: <why this action prevents the failure>
Answer: <action>
</example>)";

}  // namespace

std::string_view to_string(AgentRole role) {
    switch (role) {
        case AgentRole::Planner: return "Planner";
        case AgentRole::Analyst: return "Analyst";
        case AgentRole::ActionChooser: return "ActionChooser";
        case AgentRole::Reflector: return "Reflector";
        case AgentRole::Exemplifier: return "Exemplifier";
    }
    return "?";
}

std::optional<AgentRole> parse_agent_role(std::string_view text) {
    for (auto r : kAgentRoles)
        if (to_string(r) == trim(text)) return r;
    return std::nullopt;
}

bool is_acting(AgentRole role) {
    return role == AgentRole::Planner || role == AgentRole::Analyst || role == AgentRole::ActionChooser;
}

std::string_view action_reference_table() { return kActionTable; }

RoleDefinitions default_role_definitions() {
    RoleDefinitions d;
    d[AgentRole::Planner] = {AgentRole::Planner, std::string(kPlannerPrompt), std::string(kPlannerMemory), {}};
    d[AgentRole::Analyst] = {AgentRole::Analyst, std::string(kAnalystPrompt), std::string(kAnalystMemory), {}};
    d[AgentRole::ActionChooser] = {AgentRole::ActionChooser, std::string(kChooserPrompt), std::string(kActionTable),
                                   {}};
    d[AgentRole::Reflector] = {AgentRole::Reflector, std::string(kReflectorPrompt), "", {0.0, kLearningMaxTokens}};
    d[AgentRole::Exemplifier] = {AgentRole::Exemplifier, std::string(kExemplifierPrompt), "",
                                 {0.0, kLearningMaxTokens}};
    return d;
}

RoleDefinitions load_role_definitions(const std::filesystem::path& dir) {
    RoleDefinitions d;
    for (auto role : kAgentRoles) {
        const auto path = dir / (std::string(to_string(role)) + ".yaml");
        if (!std::filesystem::exists(path)) throw ConfigError("missing role definition " + path.string());
        YAML::Node node;
        try {
            node = YAML::LoadFile(path.string());
        } catch (const YAML::Exception& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
        auto& cfg = d[role];
        cfg.role = role;
        cfg.system_prompt = node["system_prompt"].as<std::string>("");
        cfg.persistent_memory = node["persistent_memory"].as<std::string>("");
        // Literal blocks read back with a trailing newline.
        for (auto* text : {&cfg.system_prompt, &cfg.persistent_memory})
            while (!text->empty() && text->back() == '\n') text->pop_back();
        const int limit = is_acting(role) ? kActingMaxTokens : kLearningMaxTokens;
        cfg.sampling.temperature = node["temperature"].as<double>(0.0);
        cfg.sampling.max_output_tokens = node["max_output_tokens"].as<int>(limit);
        if (cfg.sampling.temperature != 0.0) throw ConfigError(path.string() + ": temperature must be 0");
        if (cfg.sampling.max_output_tokens != limit)
            throw ConfigError(fmt::format("{}: max_output_tokens must be {}", path.string(), limit));
        if (role == AgentRole::Planner && cfg.persistent_memory.find(kActionTable) != std::string::npos)
            throw ConfigError("the Planner's persistent memory must not contain the action reference table");
    }
    return d;
}

void write_role_definitions(const std::filesystem::path& dir, const RoleDefinitions& defs) {
    std::filesystem::create_directories(dir);
    for (auto role : kAgentRoles) {
        const auto& cfg = defs[role];
        YAML::Emitter out;
        out << YAML::BeginMap;
        out << YAML::Key << "role" << YAML::Value << std::string(to_string(role));
        out << YAML::Key << "system_prompt" << YAML::Value << YAML::Literal << cfg.system_prompt;
        out << YAML::Key << "persistent_memory" << YAML::Value << YAML::Literal << cfg.persistent_memory;
        out << YAML::Key << "temperature" << YAML::Value << cfg.sampling.temperature;
        out << YAML::Key << "max_output_tokens" << YAML::Value << cfg.sampling.max_output_tokens;
        out << YAML::EndMap;
        std::ofstream(dir / (std::string(to_string(role)) + ".yaml"), std::ios::trunc) << out.c_str() << '\n';
    }
}

InstanceMemory initial_memory(const RoleDefinitions& defs, std::size_t capacity) {
    InstanceMemory m;
    m.capacity = capacity;
    m.persistent[std::size_t(Role::Planner)] = defs[AgentRole::Planner].persistent_memory;
    m.persistent[std::size_t(Role::Analyst)] = defs[AgentRole::Analyst].persistent_memory;
    m.persistent[std::size_t(Role::ActionChooser)] = defs[AgentRole::ActionChooser].persistent_memory;
    return m;
}

EpisodeView EpisodeView::from_history(const cage::Trajectory& history, const Observation& current) {
    EpisodeView v;
    v.observation = current;
    v.step = int(history.size());
    v.last_analysed.fill(-100);
    for (std::size_t k = 0; k < history.size(); ++k) {
        const auto& rec = history[k];
        v.previous_actions.push_back(rec.action);
        if (rec.action.target) {
            const auto t = std::size_t(rec.action.target->index());
            switch (rec.action.kind) {
                case cage::ActionKind::Analyse: v.last_analysed[t] = int(k); break;
                case cage::ActionKind::Restore:
                    v.confirmed[t] = false;
                    v.decoyed[t] = false;
                    break;
                case cage::ActionKind::Decoy: v.decoyed[t] = true; break;
                default: break;
            }
        }
        if (const auto& report = rec.observation.analysis)
            v.confirmed[std::size_t(report->host.index())] = report->level >= cage::CompromiseLevel::UserAccess;
    }
    return v;
}

bool EpisodeView::recently_analysed(HostId h) const {
    return step - last_analysed[std::size_t(h.index())] < calibration::kHeuristicReanalyseGap;
}

bool suppressed(const BlueAction& action, const EpisodeView& view) {
    if (!action.target) return false;
    if (action.kind == cage::ActionKind::Decoy) return view.decoyed[std::size_t(action.target->index())];
    if (action.kind == cage::ActionKind::Analyse) return view.recently_analysed(*action.target);
    return false;
}

std::string render_view(const EpisodeView& v) {
    std::string out = fmt::format("Step {} of {}.\n", v.step, calibration::kEpisodeSteps);
    out += "Indicators per host (anomalous_process suspicious_connection new_file):\n";
    for (int i = 0; i < cage::kHostCount; ++i) {
        const auto& f = v.observation.hosts[std::size_t(i)];
        out += fmt::format("{} {} {} {}\n", HostId(i).name(), int(f.anomalous_process), int(f.suspicious_connection),
                           int(f.new_file));
    }
    if (const auto& a = v.observation.analysis)
        out += fmt::format("Last analysis: {} {}\n", a->host.name(), cage::to_string(a->level));
    else
        out += "Last analysis: none\n";
    out += fmt::format("Confirmed compromised: {}\n", join_hosts(v.confirmed));
    out += fmt::format("Decoys deployed: {}\n", join_hosts(v.decoyed));
    std::array<bool, cage::kHostCount> recent{};
    for (int i = 0; i < cage::kHostCount; ++i) recent[std::size_t(i)] = v.recently_analysed(HostId(i));
    out += fmt::format("Recently analysed: {}\n", join_hosts(recent));
    std::vector<std::string> acts;
    for (const auto& a : v.previous_actions) acts.push_back(cage::to_string(a));
    out += fmt::format("Previous actions: {}\n", acts.empty() ? std::string("none") : fmt::format("{}", fmt::join(acts, "; ")));
    return out;
}

std::optional<EpisodeView> parse_view(std::string_view text) {
    static const std::regex step_re(R"(^Step (\d+) of \d+\.$)");
    static const std::regex host_re(R"(^(\S+) ([01]) ([01]) ([01])$)");
    EpisodeView v;
    v.last_analysed.fill(-100);
    bool saw_step = false;
    int hosts_seen = 0;
    for (auto raw : lines_of(text)) {
        const std::string line(trim(raw));
        std::smatch m;
        if (std::regex_match(line, m, step_re)) {
            v.step = std::stoi(m[1]);
            v.observation.step_index = v.step;
            saw_step = true;
        } else if (std::regex_match(line, m, host_re)) {
            if (auto h = HostId::from_name(m[1].str())) {
                v.observation.hosts[std::size_t(h->index())] = {m[2] == "1", m[3] == "1", m[4] == "1"};
                ++hosts_seen;
            }
        } else if (line.starts_with("Last analysis: ") && line != "Last analysis: none") {
            const auto rest = std::string_view(line).substr(15);
            const auto sp = rest.find(' ');
            const auto host = HostId::from_name(rest.substr(0, sp));
            if (host && sp != std::string_view::npos) {
                const auto level_text = rest.substr(sp + 1);
                for (auto lvl : {cage::CompromiseLevel::Clean, cage::CompromiseLevel::Scanned,
                                 cage::CompromiseLevel::UserAccess, cage::CompromiseLevel::RootAccess})
                    if (cage::to_string(lvl) == level_text) v.observation.analysis = cage::AnalysisReport{*host, lvl};
            }
        } else if (line.starts_with("Confirmed compromised: ")) {
            v.confirmed = parse_hosts(std::string_view(line).substr(23));
        } else if (line.starts_with("Decoys deployed: ")) {
            v.decoyed = parse_hosts(std::string_view(line).substr(17));
        } else if (line.starts_with("Recently analysed: ")) {
            const auto recent = parse_hosts(std::string_view(line).substr(19));
            for (int i = 0; i < cage::kHostCount; ++i)
                if (recent[std::size_t(i)]) v.last_analysed[std::size_t(i)] = v.step - 1;
        } else if (line.starts_with("Previous actions: ") && line != "Previous actions: none") {
            std::string_view rest = std::string_view(line).substr(18);
            while (!rest.empty()) {
                const auto semi = rest.find(';');
                if (auto a = cage::parse_action(trim(rest.substr(0, semi)))) v.previous_actions.push_back(*a);
                if (semi == std::string_view::npos) break;
                rest.remove_prefix(semi + 1);
            }
        }
    }
    if (!saw_step || hosts_seen != cage::kHostCount) return std::nullopt;
    return v;
}

Severity severity_for(const HostFlags& f) {
    switch (f.count()) {
        case 0: return Severity::None;
        case 3: return Severity::Critical;
        case 1: return f.anomalous_process ? Severity::Medium : Severity::Low;
        default: return f.anomalous_process ? Severity::High : Severity::Medium;
    }
}

std::vector<RankedAction> ranking_for(HostId host, Severity severity) {
    using cage::BlueAction;
    switch (severity) {
        case Severity::None: return {{BlueAction::monitor(), 1.0}};
        case Severity::Low: return {{BlueAction::monitor(), 0.8}, {BlueAction::analyse(host), 0.2}};
        case Severity::Medium:
            return {{BlueAction::analyse(host), 0.6}, {BlueAction::monitor(), 0.3}, {BlueAction::restore(host), 0.1}};
        case Severity::High:
            return {{BlueAction::analyse(host), 0.5}, {BlueAction::restore(host), 0.35}, {BlueAction::monitor(), 0.15}};
        case Severity::Critical:
            return {{BlueAction::analyse(host), 0.5}, {BlueAction::restore(host), 0.45}, {BlueAction::monitor(), 0.05}};
    }
    return {{BlueAction::monitor(), 1.0}};
}

Analysis ScriptedBackend::analyse(HostId host, const Observation& obs, const InstanceMemory& memory,
                                  Representation rep, CallContext&) const {
    const auto& flags = obs[host];
    Analysis a;
    a.severity = severity_for(flags);
    std::vector<std::string> cited;
    for (const auto* art : memory::visible(memory, Role::Analyst, rep)) {
        if (!art->clause || art->clause->host != host || !art->clause->condition.matches(flags)) continue;
        if (cited.empty() && art->clause->severity) a.severity = *art->clause->severity;
        cited.push_back(art->id());
    }
    a.summary = fmt::format("{} indicators: anomalous_process={} suspicious_connection={} new_file={}; severity {}.",
                            host.name(), int(flags.anomalous_process), int(flags.suspicious_connection),
                            int(flags.new_file), memory::to_string(a.severity));
    if (!cited.empty()) a.summary += fmt::format(" Per {}.", fmt::join(cited, ", "));
    a.recommended_focus = focus_for(a.severity);
    return a;
}

std::vector<RankedAction> ScriptedBackend::rank_actions(const RankContext& context, const InstanceMemory& memory,
                                                        Representation rep, CallContext&) const {
    auto ranking = ranking_for(context.host, context.severity);
    if (context.severity == Severity::None) return ranking;
    // A learned ActionChooser preference for this host goes to the top.
    for (const auto* art : memory::visible(memory, Role::ActionChooser, rep)) {
        if (!art->clause || !art->clause->action || art->clause->host != context.host) continue;
        std::erase_if(ranking, [&](const RankedAction& r) { return r.action == *art->clause->action; });
        for (auto& r : ranking) r.confidence *= 0.5;
        ranking.insert(ranking.begin(), {*art->clause->action, 0.5});
        break;
    }
    return ranking;
}

ActionDecision ScriptedBackend::decide(const EpisodeView& view, const InstanceMemory& memory, Representation rep,
                                       CallContext& ctx) const {
    ActionDecision d;
    if (auto h = first_confirmed(view)) {
        d.action = BlueAction::restore(*h);
        d.rationale = fmt::format("analysis confirmed a foothold on {}", h->name());
        return d;
    }
    if (auto hit = clause_decision(planner_clauses(memory, rep), view)) {
        d.action = hit->first;
        d.rationale = fmt::format("learned clause {}", hit->second);
        return d;
    }
    // Analyst on up to kMaxToolCalls - 1 hosts, ActionChooser on the worst.
    std::optional<std::pair<HostId, Analysis>> worst;
    for (auto h : candidate_hosts(view.observation, kMaxToolCalls - 1)) {
        auto a = analyse(h, view.observation, memory, rep, ctx);
        d.subagent_calls.push_back({AgentRole::Analyst, std::string(h.name()), a.summary});
        if (!worst || a.severity > worst->second.severity) worst = std::pair{h, std::move(a)};
    }
    if (!worst || worst->second.severity == Severity::None) {
        d.action = BlueAction::monitor();
        d.rationale = "no indicators";
        return d;
    }
    const RankContext rc{worst->first, worst->second.severity, worst->second.recommended_focus};
    const auto ranking = rank_actions(rc, memory, rep, ctx);
    d.subagent_calls.push_back({AgentRole::ActionChooser,
                                fmt::format("{} {}", worst->first.name(), memory::to_string(rc.severity)),
                                ranking_json(ranking)});
    d.action = suppressed(ranking.front().action, view) ? BlueAction::monitor() : ranking.front().action;
    d.rationale = fmt::format("{} assessed {}", worst->first.name(), memory::to_string(rc.severity));
    return d;
}

LlmBackend::LlmBackend(const connector::Connector& connector, RoleDefinitions defs, std::string model)
    : connector_(connector), defs_(std::move(defs)), model_(std::move(model)) {}

std::string LlmBackend::system_prompt(AgentRole role, const InstanceMemory& memory, Representation rep) const {
    return defs_[role].system_prompt + "\n\n" + memory::render_injection(memory, memory_role(role), rep);
}

connector::ChatResponse LlmBackend::call(AgentRole role, std::vector<connector::ChatMessage> messages,
                                         CallContext& ctx) const {
    const auto& cfg = defs_[role];
    connector::ChatRequest req{model_, std::move(messages), cfg.sampling.temperature, cfg.sampling.max_output_tokens};
    auto resp = connector_.complete(req);
    ctx.record(to_string(role), resp);
    return resp;
}

Analysis LlmBackend::analyse(HostId host, const Observation& obs, const InstanceMemory& memory, Representation rep,
                             CallContext& ctx) const {
    const json request = {{"host", host.name()}, {"step", obs.step_index}, {"indicators", flags_json(obs[host])}};
    const auto resp = call(AgentRole::Analyst,
                           {{"system", system_prompt(AgentRole::Analyst, memory, rep)}, {"user", request.dump()}}, ctx);
    Analysis a;
    const auto j = extract_json(resp.content);
    if (j && j->is_object()) {
        a.severity = memory::parse_severity(j->value("severity", "none")).value_or(Severity::None);
        a.summary = j->value("summary", "");
        a.recommended_focus = j->value("recommended_focus", focus_for(a.severity));
    } else {
        ctx.event(fmt::format("analyst reply for {} was not JSON", host.name()));
        a.summary = resp.content;
        a.recommended_focus = focus_for(a.severity);
    }
    return a;
}

std::vector<RankedAction> LlmBackend::rank_actions(const RankContext& context, const InstanceMemory& memory,
                                                   Representation rep, CallContext& ctx) const {
    const json request = {{"host", context.host.name()},
                          {"severity", memory::to_string(context.severity)},
                          {"situation", context.situation}};
    const auto resp = call(AgentRole::ActionChooser,
                           {{"system", system_prompt(AgentRole::ActionChooser, memory, rep)}, {"user", request.dump()}},
                           ctx);
    std::vector<RankedAction> ranking;
    if (const auto j = extract_json(resp.content)) ranking = parse_ranking(*j);
    if (ranking.empty()) {
        ctx.event("action chooser reply had no valid ranking");
        ranking = {{BlueAction::monitor(), 1.0}};
    }
    return ranking;
}

std::optional<BlueAction> parse_answer(std::string_view text) {
    std::optional<std::string_view> last;
    for (auto line : lines_of(text)) {
        line = trim(line);
        if (line.starts_with("Answer:")) last = trim(line.substr(7));
    }
    if (!last) return std::nullopt;
    auto a = cage::parse_action(*last);
    if (!a || !a->valid()) return std::nullopt;
    return a;
}

namespace {

struct ToolCall {
    std::string name;
    json args;
};

std::optional<ToolCall> parse_tool(std::string_view text) {
    for (auto line : lines_of(text)) {
        line = trim(line);
        if (!line.starts_with("Tool:")) continue;
        line = trim(line.substr(5));
        const auto colon = line.find(':');
        if (colon == std::string_view::npos) return ToolCall{std::string(line), json::object()};
        auto args = extract_json(line.substr(colon + 1));
        return ToolCall{std::string(trim(line.substr(0, colon))), args ? *args : json::object()};
    }
    return std::nullopt;
}

}  // namespace

ActionDecision LlmBackend::decide(const EpisodeView& view, const InstanceMemory& memory, Representation rep,
                                  CallContext& ctx) const {
    ActionDecision d;
    std::vector<connector::ChatMessage> messages = {{"system", system_prompt(AgentRole::Planner, memory, rep)},
                                                    {"user", render_view(view)}};
    int tool_calls = 0;
    int reprompts = 0;
    while (true) {
        const auto resp = call(AgentRole::Planner, messages, ctx);
        messages.push_back({"assistant", resp.content});
        if (auto action = parse_answer(resp.content)) {
            d.action = *action;
            d.rationale = resp.content;
            return d;
        }
        const auto tool = parse_tool(resp.content);
        if (tool && tool_calls < kMaxToolCalls) {
            ++tool_calls;
            std::string observation;
            const auto host = HostId::from_name(tool->args.value("host", ""));
            if (!host) {
                observation = "error: unknown host";
            } else if (tool->name == "analyse_host" || tool->name == "analyze_host") {
                const auto a = analyse(*host, view.observation, memory, rep, ctx);
                observation = json{{"severity", memory::to_string(a.severity)},
                                   {"summary", a.summary},
                                   {"recommended_focus", a.recommended_focus}}
                                  .dump();
                d.subagent_calls.push_back({AgentRole::Analyst, tool->args.dump(), observation});
            } else if (tool->name == "get_suggestion_for_next_action") {
                const auto sev = memory::parse_severity(tool->args.value("severity", "none")).value_or(Severity::None);
                const auto ranking =
                    rank_actions({*host, sev, tool->args.value("situation", "")}, memory, rep, ctx);
                observation = ranking_json(ranking);
                d.subagent_calls.push_back({AgentRole::ActionChooser, tool->args.dump(), observation});
            } else {
                observation = "error: unknown tool " + tool->name;
            }
            messages.push_back({"user", "Observation: " + observation});
            continue;
        }
        if (tool) ctx.event(fmt::format("planner exceeded {} tool calls at step {}", kMaxToolCalls, view.step));
        if (tool || reprompts == kMaxReprompts) {
            ctx.event(fmt::format("planner parse failure at step {}; falling back to Monitor", view.step));
            d.action = BlueAction::monitor();
            d.rationale = "fallback";
            return d;
        }
        ++reprompts;
        messages.push_back({"user",
                            "Your reply did not end with a valid 'Answer: <action>' line. Reply with "
                            "'Answer: Monitor' or 'Answer: <Analyse|Remove|Restore|Decoy> <host>'."});
    }
}

ActionDecision decide(const EpisodeView& view, const InstanceMemory& memory, const ActingBackend& backend,
                      Representation representation, CallContext& ctx) {
    if (view.step >= calibration::kEpisodeSteps) throw ProtocolError("decide called on a finished episode");
    auto d = backend.decide(view, memory, representation, ctx);
    if (!d.action.valid()) {
        ctx.event("backend produced a malformed action; using Monitor");
        d.action = BlueAction::monitor();
    }
    return d;
}

namespace {

// A new-file indicator means root; Remove cannot clear that, Restore can.
BlueAction remedy(HostId host, const HostFlags& seen) {
    return seen.new_file ? BlueAction::restore(host) : BlueAction::remove(host);
}

}  // namespace

Lesson infer_lesson(const cage::Trajectory& trajectory) {
    if (trajectory.empty()) throw ValidationError("cannot learn from an empty trajectory");
    // Most recent observation where some host shows at least two indicators,
    // scanning back from the failing step. Single flags are mostly noise.
    std::optional<HostId> culprit;
    std::size_t at = trajectory.size();
    while (at > 0 && !culprit) {
        --at;
        const auto& obs = trajectory[at].observation;
        for (auto h : cage::priority_order())
            if (obs[h].count() >= 2 && (!culprit || obs[h].count() > obs[*culprit].count())) culprit = h;
    }
    Lesson lesson;
    if (!culprit) {
        const auto op = HostId::op_server();
        lesson.rule = {op, memory::Condition::compromised(), BlueAction::restore(op), std::nullopt};
        lesson.example = lesson.rule;
        lesson.rationale = "Nothing was visible before the failure; guard the operational server.";
        return lesson;
    }
    const auto& failing = trajectory[at].observation[*culprit];
    lesson.rule = {*culprit, memory::Condition::compromised(), remedy(*culprit, failing), std::nullopt};

    // Earliest sign of trouble on the culprit decides what the example teaches.
    HostFlags earliest = failing;
    for (std::size_t k = 0; k <= at; ++k)
        if (trajectory[k].observation[*culprit].any()) {
            earliest = trajectory[k].observation[*culprit];
            break;
        }
    const auto condition = memory::Condition::from_flags(earliest);
    if (earliest == HostFlags{false, true, false}) {
        lesson.example = {*culprit, condition, BlueAction::decoy(*culprit), std::nullopt};
        lesson.rationale = fmt::format("A decoy on {} absorbs the exploit that follows the scan.", culprit->name());
    } else {
        lesson.example = {*culprit, condition, remedy(*culprit, earliest), std::nullopt};
        lesson.rationale = fmt::format("Cleaning {} early removes the foothold before it spreads.", culprit->name());
    }
    return lesson;
}

namespace {

cage::Trajectory parse_trajectory_lines(std::string_view text) {
    static const std::regex line_re(R"(step=(\d+) action=(\S+) target=(\S+) reward=(-?[0-9.]+) flags=(\S+))");
    cage::Trajectory out;
    for (auto raw : lines_of(text)) {
        const std::string line(trim(raw));
        std::smatch m;
        if (!std::regex_search(line, m, line_re)) continue;
        cage::StepRecord rec;
        if (auto a = cage::parse_action(m[3] == "-" ? m[2].str() : m[2].str() + " " + m[3].str())) rec.action = *a;
        rec.reward = std::stod(m[4]);
        const std::string flags = m[5];
        for (int i = 0; i < cage::kHostCount && std::size_t(i * 4 + 2) < flags.size(); ++i)
            rec.observation.hosts[std::size_t(i)] = {flags[std::size_t(i * 4)] == 'A',
                                                     flags[std::size_t(i * 4 + 1)] == 'C',
                                                     flags[std::size_t(i * 4 + 2)] == 'F'};
        rec.observation.step_index = std::stoi(m[1]) + 1;
        out.push_back(rec);
    }
    return out;
}

std::vector<std::pair<Clause, std::string>> clauses_in_prompt(std::string_view system) {
    std::vector<std::pair<Clause, std::string>> out;
    for (auto line : lines_of(system))
        if (auto c = memory::parse_rule_text(line)) out.emplace_back(*c, "rule");
    std::size_t pos = 0;
    while ((pos = system.find("<example", pos)) != std::string_view::npos) {
        const auto end = system.find("</example>", pos);
        if (auto c = memory::parse_example_text(system.substr(pos, end - pos))) out.emplace_back(*c, "example");
        pos = end == std::string_view::npos ? system.size() : end;
    }
    return out;
}

std::string respond_planner(const connector::ChatRequest& req) {
    const auto& system = req.messages.front().content;
    const auto view = parse_view(req.messages.size() > 1 ? req.messages[1].content : "");
    if (!view) return "Thought: I cannot read the observation.\nAnswer: Monitor";
    std::vector<std::string_view> observations;
    for (const auto& m : req.messages)
        if (m.role == "user" && m.content.starts_with("Observation: ")) observations.push_back(m.content);
    if (req.messages.back().role == "user" && !req.messages.back().content.starts_with("Observation: ") &&
        req.messages.size() > 2)
        return "Answer: Monitor";

    if (auto h = first_confirmed(*view))
        return fmt::format("Thought: Analysis confirmed a foothold on {}.\nAnswer: Restore {}", h->name(), h->name());
    std::vector<std::pair<Clause, std::string>> clauses;
    for (auto& [c, label] : clauses_in_prompt(system))
        if (c.action) clauses.emplace_back(c, label);
    if (auto hit = clause_decision(clauses, *view))
        return fmt::format("Thought: A learned {} applies.\nAnswer: {}", hit->second, cage::to_string(hit->first));
    const auto candidates = candidate_hosts(view->observation, 1);
    if (candidates.empty()) return "Thought: No indicators are raised.\nAnswer: Monitor";
    const auto host = candidates.front();
    if (observations.empty())
        return fmt::format("Thought: {} shows indicators.\nTool: analyse_host: {{\"host\": \"{}\"}}\nPAUSE",
                           host.name(), host.name());
    if (observations.size() == 1) {
        const auto j = extract_json(observations[0].substr(13));
        const std::string sev = j && j->is_object() ? j->value("severity", "none") : "none";
        return fmt::format(
            "Thought: The Analyst rates {} as {}.\nTool: get_suggestion_for_next_action: {{\"host\": \"{}\", "
            "\"severity\": \"{}\"}}\nPAUSE",
            host.name(), sev, host.name(), sev);
    }
    std::vector<RankedAction> ranking;
    if (const auto j = extract_json(observations.back().substr(13))) ranking = parse_ranking(*j);
    const auto action = ranking.empty() || suppressed(ranking.front().action, *view) ? BlueAction::monitor()
                                                                                      : ranking.front().action;
    return fmt::format("Thought: Taking the top suggestion.\nAnswer: {}", cage::to_string(action));
}

std::string respond_analyst(const connector::ChatRequest& req) {
    const auto j = extract_json(req.messages.back().content);
    if (!j || !j->is_object()) return R"({"severity": "none", "summary": "unreadable request", "recommended_focus": "monitoring"})";
    const auto host = HostId::from_name(j->value("host", ""));
    const auto flags = flags_from_json(j->value("indicators", json::object()));
    auto severity = severity_for(flags);
    if (host)
        for (const auto& [c, label] : clauses_in_prompt(req.messages.front().content))
            if (c.severity && c.host == *host && c.condition.matches(flags)) {
                severity = *c.severity;
                break;
            }
    return json{{"severity", memory::to_string(severity)},
                {"summary", fmt::format("{} has {} raised indicators.", host ? host->name() : "?", flags.count())},
                {"recommended_focus", focus_for(severity)}}
        .dump();
}

std::string respond_chooser(const connector::ChatRequest& req) {
    const auto j = extract_json(req.messages.back().content);
    if (!j || !j->is_object()) return ranking_json({{BlueAction::monitor(), 1.0}});
    const auto host = HostId::from_name(j->value("host", ""));
    const auto severity = memory::parse_severity(j->value("severity", "none")).value_or(Severity::None);
    if (!host) return ranking_json({{BlueAction::monitor(), 1.0}});
    return ranking_json(ranking_for(*host, severity));
}

}  // namespace

connector::Responder synthetic_responder() {
    return [](const connector::ChatRequest& req) -> std::string {
        if (req.messages.empty()) return "Answer: Monitor";
        const auto& system = req.messages.front().content;
        if (system.starts_with("You are the Planner")) return respond_planner(req);
        if (system.starts_with("You are the Analyst")) return respond_analyst(req);
        if (system.starts_with("You are the ActionChooser")) return respond_chooser(req);
        const bool reflector = system.starts_with("You are the Reflector");
        const bool exemplifier = system.starts_with("You are the Exemplifier");
        if (reflector || exemplifier) {
            const auto trajectory = parse_trajectory_lines(req.messages.back().content);
            if (trajectory.empty()) return "No trajectory was provided.";
            const auto lesson = infer_lesson(trajectory);
            if (reflector) return "- " + memory::rule_text(lesson.rule);
            return memory::example_text(lesson.example, lesson.rationale);
        }
        return "Answer: Monitor";
    };
}

}  // namespace forge::agents
