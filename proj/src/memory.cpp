#include "forge/memory.hpp"

#include <algorithm>
#include <fstream>
#include <regex>
#include <sstream>

#include <fmt/format.h>
#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include "json.hpp"

namespace forge::memory {

using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return char(std::tolower(c)); });
    return out;
}

constexpr std::string_view kAnomalous = "anomalous-process";
constexpr std::string_view kConnection = "suspicious-connection";
constexpr std::string_view kNewFile = "new-file";

std::string condition_text(const Condition& c) {
    if (c == Condition::compromised()) return "compromised";
    std::vector<std::string_view> parts;
    if (c.anomalous_process) parts.push_back(kAnomalous);
    if (c.suspicious_connection) parts.push_back(kConnection);
    if (c.new_file) parts.push_back(kNewFile);
    const int required = int(parts.size());
    std::string out = fmt::format("{}", fmt::join(parts, "+"));
    if (c.min_count > required) out += fmt::format("{}min{}", out.empty() ? "" : "+", c.min_count);
    return out.empty() ? "any" : out;
}

std::optional<Condition> parse_condition(std::string_view text) {
    text = trim(text);
    if (text == "compromised") return Condition::compromised();
    Condition c;
    if (text == "any") {
        c.min_count = 1;
        return c;
    }
    while (!text.empty()) {
        const auto plus = text.find('+');
        const auto token = trim(text.substr(0, plus));
        if (token == kAnomalous)
            c.anomalous_process = true;
        else if (token == kConnection)
            c.suspicious_connection = true;
        else if (token == kNewFile)
            c.new_file = true;
        else if (token.starts_with("min") && token.size() == 4 && token[3] >= '1' && token[3] <= '3')
            c.min_count = token[3] - '0';
        else
            return std::nullopt;
        if (plus == std::string_view::npos) break;
        text.remove_prefix(plus + 1);
    }
    return c;
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << contents;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json artifact_json(const MemoryArtifact& a) {
    json j;
    j["kind"] = to_string(a.kind);
    j["role"] = to_string(a.role);
    j["text"] = a.text;
    j["clause"] = a.clause ? json(to_string(*a.clause)) : json(nullptr);
    j["origin"] = {{"stage", a.origin.stage}, {"attempt", a.origin.attempt}, {"instance", a.origin.instance}};
    return j;
}

std::optional<ArtifactKind> parse_kind(std::string_view text) {
    if (text == "Rule") return ArtifactKind::Rule;
    if (text == "Example") return ArtifactKind::Example;
    return std::nullopt;
}

MemoryArtifact artifact_from_json(const json& j, std::size_t offset) {
    MemoryArtifact a;
    const auto kind = parse_kind(j.at("kind").get<std::string>());
    const auto role = parse_role(j.at("role").get<std::string>());
    if (!kind || !role) throw ParseError("unknown artifact kind or role", offset);
    a.kind = *kind;
    a.role = *role;
    a.text = j.at("text").get<std::string>();
    if (!j.at("clause").is_null()) {
        a.clause = parse_clause(j.at("clause").get<std::string>());
        if (!a.clause) throw ParseError("malformed clause '" + j.at("clause").get<std::string>() + "'", offset);
    }
    const auto& o = j.at("origin");
    a.origin = {o.at("stage").get<int>(), o.at("attempt").get<int>(), o.at("instance").get<int>()};
    return a;
}

}  // namespace

std::string_view to_string(Role role) {
    switch (role) {
        case Role::Planner: return "Planner";
        case Role::Analyst: return "Analyst";
        case Role::ActionChooser: return "ActionChooser";
    }
    return "?";
}

std::string_view to_string(ArtifactKind kind) { return kind == ArtifactKind::Rule ? "Rule" : "Example"; }

std::string_view to_string(Representation r) {
    switch (r) {
        case Representation::Rules: return "rules";
        case Representation::Examples: return "examples";
        case Representation::Mixed: return "mixed";
    }
    return "?";
}

std::optional<Role> parse_role(std::string_view text) {
    for (auto r : kRoles)
        if (lower(to_string(r)) == lower(trim(text))) return r;
    return std::nullopt;
}

std::optional<Representation> parse_representation(std::string_view text) {
    const auto t = lower(trim(text));
    for (auto r : {Representation::Rules, Representation::Examples, Representation::Mixed})
        if (to_string(r) == t) return r;
    return std::nullopt;
}

bool includes(Representation r, ArtifactKind kind) {
    switch (r) {
        case Representation::Rules: return kind == ArtifactKind::Rule;
        case Representation::Examples: return kind == ArtifactKind::Example;
        case Representation::Mixed: return true;
    }
    return false;
}

std::string_view to_string(Severity s) {
    switch (s) {
        case Severity::None: return "none";
        case Severity::Low: return "low";
        case Severity::Medium: return "medium";
        case Severity::High: return "high";
        case Severity::Critical: return "critical";
    }
    return "?";
}

std::optional<Severity> parse_severity(std::string_view text) {
    const auto t = lower(trim(text));
    for (auto s : {Severity::None, Severity::Low, Severity::Medium, Severity::High, Severity::Critical})
        if (to_string(s) == t) return s;
    return std::nullopt;
}

Condition Condition::from_flags(const cage::HostFlags& flags) {
    return {flags.anomalous_process, flags.suspicious_connection, flags.new_file, 0};
}

bool Condition::matches(const cage::HostFlags& f) const {
    if (anomalous_process && !f.anomalous_process) return false;
    if (suspicious_connection && !f.suspicious_connection) return false;
    if (new_file && !f.new_file) return false;
    return f.count() >= std::max(min_count, 1);
}

std::string to_string(const Clause& clause) {
    std::string outcome = clause.action ? cage::to_string(*clause.action)
                                        : fmt::format("severity={}", to_string(clause.severity.value_or(Severity::None)));
    return fmt::format("{} {} => {}", clause.host.name(), condition_text(clause.condition), outcome);
}

std::optional<Clause> parse_clause(std::string_view text) {
    const auto arrow = text.find("=>");
    if (arrow == std::string_view::npos) return std::nullopt;
    const auto lhs = trim(text.substr(0, arrow));
    const auto rhs = trim(text.substr(arrow + 2));
    const auto space = lhs.find(' ');
    if (space == std::string_view::npos) return std::nullopt;
    const auto host = cage::HostId::from_name(lhs.substr(0, space));
    const auto condition = parse_condition(lhs.substr(space + 1));
    if (!host || !condition) return std::nullopt;
    Clause clause{*host, *condition, std::nullopt, std::nullopt};
    if (rhs.starts_with("severity=")) {
        clause.severity = parse_severity(rhs.substr(9));
        if (!clause.severity) return std::nullopt;
    } else {
        clause.action = cage::parse_action(rhs);
        if (!clause.action) return std::nullopt;
    }
    return clause;
}

std::string rule_text(const Clause& clause) {
    if (clause.action)
        return fmt::format("When {} shows {}, then {}.", clause.host.name(), condition_text(clause.condition),
                           cage::to_string(*clause.action));
    return fmt::format("When {} shows {}, then treat severity as {}.", clause.host.name(),
                       condition_text(clause.condition), to_string(clause.severity.value_or(Severity::None)));
}

std::optional<Clause> parse_rule_text(std::string_view text) {
    static const std::regex pattern(R"(^\s*(?:-\s*)?When (\S+) shows (\S+), then (.+?)\.?\s*$)");
    std::match_results<std::string_view::const_iterator> m;
    if (!std::regex_match(text.begin(), text.end(), m, pattern)) return std::nullopt;
    const std::string outcome = m[3].str();
    constexpr std::string_view kSeverity = "treat severity as ";
    if (outcome.starts_with(kSeverity))
        return parse_clause(fmt::format("{} {} => severity={}", m[1].str(), m[2].str(), outcome.substr(kSeverity.size())));
    return parse_clause(fmt::format("{} {} => {}", m[1].str(), m[2].str(), outcome));
}

std::string example_text(const Clause& clause, std::string_view rationale) {
    const auto action = clause.action ? cage::to_string(*clause.action) : std::string("Monitor");
    std::string label = action;
    std::erase(label, ' ');
    return fmt::format(
        "<example description='{}On{}'>\n"
        "Thought: {} shows {}.\n"
        "Tool: get_suggestion_for_next_action: {{\"host\": \"{}\", \"severity\": \"high\"}}\n"
        "PAUSE\n"
        "Observation: [{{\"action\": \"{}\", \"confidence\": 0.9}}]\n"
        "Thought: {}\n"
        "Answer: {}\n"
        "</example>",
        label, condition_text(clause.condition) == "compromised" ? "Compromise" : "Indicator", clause.host.name(),
        condition_text(clause.condition), clause.host.name(), action, rationale, action);
}

std::optional<Clause> parse_example_text(std::string_view text) {
    static const std::regex thought(R"(Thought: (\S+) shows (\S+)\.)");
    static const std::regex answer(R"(Answer: ([^\n]+))");
    std::match_results<std::string_view::const_iterator> t, a;
    if (!std::regex_search(text.begin(), text.end(), t, thought)) return std::nullopt;
    if (!std::regex_search(text.begin(), text.end(), a, answer)) return std::nullopt;
    return parse_clause(fmt::format("{} {} => {}", t[1].str(), t[2].str(), trim(a[1].str())));
}

std::string MemoryArtifact::id() const {
    return fmt::format("{}@s{}a{}i{}", kind == ArtifactKind::Rule ? "rule" : "example", origin.stage, origin.attempt,
                       origin.instance);
}

void validate(const MemoryArtifact& a) {
    const auto text = trim(a.text);
    if (text.empty()) throw ValidationError("artifact text is empty");
    if (a.kind == ArtifactKind::Rule) {
        auto t = lower(text);
        if (t.starts_with("- ")) t.erase(0, 2);
        if (!t.starts_with("when ") || t.find(", then ") == std::string::npos)
            throw ValidationError("rule must read 'When ..., then ...': " + std::string(text));
    } else {
        std::size_t at = 0;
        for (std::string_view marker : {"Thought:", "Tool:", "Observation:", "Answer:"}) {
            at = text.find(marker, at);
            if (at == std::string_view::npos)
                throw ValidationError(fmt::format("example is missing '{}' in Thought/Tool/Observation/Answer order",
                                                  marker));
        }
    }
    if (a.clause && a.clause->action.has_value() == a.clause->severity.has_value())
        throw ValidationError("clause must carry exactly one of action or severity");
    if (a.clause && a.clause->action && !a.clause->action->valid()) throw ValidationError("clause action is malformed");
}

bool is_valid(const MemoryArtifact& artifact) {
    try {
        validate(artifact);
        return true;
    } catch (const ValidationError&) {
        return false;
    }
}

void validate(const MemoryDelta& delta) {
    for (const auto& a : delta.additions) {
        validate(a);
        if (!(a.origin == delta.additions.front().origin))
            throw ValidationError("delta additions must share one origin");
    }
}

std::size_t InstanceMemory::artifact_count() const {
    std::size_t n = 0;
    for (const auto& list : dynamic) n += list.size();
    return n;
}

InstanceMemory append_artifact(InstanceMemory memory, MemoryArtifact artifact) {
    validate(artifact);
    auto& list = memory.dynamic[std::size_t(artifact.role)];
    list.push_back(std::move(artifact));
    if (list.size() > memory.capacity)
        list.erase(list.begin(), list.begin() + std::ptrdiff_t(list.size() - memory.capacity));
    return memory;
}

InstanceMemory apply_delta(InstanceMemory memory, const MemoryDelta& delta) {
    validate(delta);
    for (const auto& a : delta.additions) memory = append_artifact(std::move(memory), a);
    return memory;
}

std::vector<const MemoryArtifact*> visible(const InstanceMemory& memory, Role role, Representation representation) {
    std::vector<const MemoryArtifact*> out;
    for (const auto& a : memory.of(role))
        if (includes(representation, a.kind)) out.push_back(&a);
    return out;
}

std::string render_injection(const InstanceMemory& memory, Role role, Representation representation) {
    std::string out = memory.persistent_of(role);
    if (!out.empty() && out.back() != '\n') out += '\n';
    const auto artifacts = visible(memory, role, representation);
    if (includes(representation, ArtifactKind::Rule)) {
        out += "\n<reflection_knowledge>\n";
        for (const auto* a : artifacts)
            if (a->kind == ArtifactKind::Rule) out += fmt::format("- {}\n", trim(a->text));
        out += "</reflection_knowledge>\n";
    }
    if (includes(representation, ArtifactKind::Example)) {
        out += "\n<TOOL_USE_EXAMPLES>\n";
        for (const auto* a : artifacts)
            if (a->kind == ArtifactKind::Example) out += fmt::format("{}\n", trim(a->text));
        out += "</TOOL_USE_EXAMPLES>\n";
    }
    return out;
}

InstanceMemory replace_dynamic(InstanceMemory dst, const InstanceMemory& src) {
    if (dst.persistent != src.persistent)
        throw ProtocolError("broadcast between instances with different persistent memory");
    dst.dynamic = src.dynamic;
    return dst;
}

std::string save(const InstanceMemory& memory) {
    json j;
    j["format"] = "forge-memory/1";
    j["capacity"] = memory.capacity;
    for (auto role : kRoles) {
        const auto name = std::string(to_string(role));
        j["persistent"][name] = memory.persistent_of(role);
        j["dynamic"][name] = json::array();
        for (const auto& a : memory.of(role)) j["dynamic"][name].push_back(artifact_json(a));
    }
    return j.dump(2) + "\n";
}

InstanceMemory load(std::string_view bytes) {
    // save() always ends with a newline after the closing brace, so any strict
    // prefix of its output is rejected.
    if (bytes.empty() || bytes.back() != '\n') throw ParseError("truncated memory document", bytes.size());
    json j;
    try {
        j = json::parse(bytes);
    } catch (const json::parse_error& e) {
        throw ParseError(e.what(), e.byte);
    }
    try {
        if (j.at("format") != "forge-memory/1") throw ParseError("unsupported memory format", 0);
        InstanceMemory m;
        m.capacity = j.at("capacity").get<std::size_t>();
        for (auto role : kRoles) {
            const auto name = std::string(to_string(role));
            m.persistent[std::size_t(role)] = j.at("persistent").at(name).get<std::string>();
            for (const auto& a : j.at("dynamic").at(name)) {
                auto artifact = artifact_from_json(a, bytes.size());
                if (artifact.role != role) throw ParseError("artifact filed under the wrong role", bytes.size());
                try {
                    validate(artifact);
                } catch (const ValidationError& e) {
                    throw ParseError(e.what(), bytes.size());
                }
                m.dynamic[std::size_t(role)].push_back(std::move(artifact));
            }
            if (m.dynamic[std::size_t(role)].size() > m.capacity)
                throw ParseError("role list exceeds capacity", bytes.size());
        }
        return m;
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed memory document: ") + e.what(), bytes.size());
    }
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", digest[i]);
    return out;
}

std::string memory_hash(const InstanceMemory& memory) { return sha256_hex(save(memory)); }

std::string persistent_hash(const InstanceMemory& memory) {
    std::string joined;
    for (const auto& p : memory.persistent) {
        joined += p;
        joined += '\0';
    }
    return sha256_hex(joined);
}

void write_workspace(const std::filesystem::path& dir, const InstanceMemory& memory) {
    write_file(dir / "memory.json", save(memory));
    for (auto role : kRoles) {
        for (auto kind : {ArtifactKind::Rule, ArtifactKind::Example}) {
            YAML::Emitter out;
            out << YAML::BeginMap;
            out << YAML::Key << "role" << YAML::Value << std::string(to_string(role));
            out << YAML::Key << "kind" << YAML::Value << (kind == ArtifactKind::Rule ? "rules" : "examples");
            out << YAML::Key << "artifacts" << YAML::Value << YAML::BeginSeq;
            for (const auto& a : memory.of(role)) {
                if (a.kind != kind) continue;
                out << YAML::BeginMap;
                out << YAML::Key << "text" << YAML::Value << YAML::Literal << a.text;
                if (a.clause) out << YAML::Key << "clause" << YAML::Value << to_string(*a.clause);
                out << YAML::Key << "origin" << YAML::Value << YAML::Flow << YAML::BeginMap;
                out << YAML::Key << "stage" << YAML::Value << a.origin.stage;
                out << YAML::Key << "attempt" << YAML::Value << a.origin.attempt;
                out << YAML::Key << "instance" << YAML::Value << a.origin.instance;
                out << YAML::EndMap;
                out << YAML::EndMap;
            }
            out << YAML::EndSeq << YAML::EndMap;
            const char* file = kind == ArtifactKind::Rule ? "reflection_knowledge.yaml" : "reflection_examples.yaml";
            write_file(dir / std::string(to_string(role)) / file, std::string(out.c_str()) + "\n");
        }
    }
}

InstanceMemory read_workspace(const std::filesystem::path& dir) {
    InstanceMemory m = load(read_file(dir / "memory.json"));
    for (auto role : kRoles) {
        // Per-kind files lose the interleaving between rules and examples;
        // restore it from the origin ordering recorded in memory.json.
        std::vector<MemoryArtifact> merged;
        for (const char* file : {"reflection_knowledge.yaml", "reflection_examples.yaml"}) {
            const auto path = dir / std::string(to_string(role)) / file;
            YAML::Node root;
            try {
                root = YAML::LoadFile(path.string());
            } catch (const YAML::Exception& e) {
                throw ParseError(path.string() + ": " + e.what(), std::size_t(std::max(e.mark.pos, 0)));
            }
            const bool rules = root["kind"].as<std::string>() == "rules";
            for (const auto& node : root["artifacts"]) {
                MemoryArtifact a;
                a.kind = rules ? ArtifactKind::Rule : ArtifactKind::Example;
                a.role = role;
                // Literal blocks read back with a trailing newline.
                a.text = node["text"].as<std::string>();
                while (!a.text.empty() && a.text.back() == '\n') a.text.pop_back();
                if (node["clause"]) a.clause = parse_clause(node["clause"].as<std::string>());
                a.origin = {node["origin"]["stage"].as<int>(), node["origin"]["attempt"].as<int>(),
                            node["origin"]["instance"].as<int>()};
                validate(a);
                merged.push_back(std::move(a));
            }
        }
        const auto& order = m.of(role);
        std::stable_sort(merged.begin(), merged.end(), [&](const MemoryArtifact& x, const MemoryArtifact& y) {
            auto pos = [&](const MemoryArtifact& a) {
                return std::find_if(order.begin(), order.end(), [&](const MemoryArtifact& b) {
                           return a.kind == b.kind && a.origin == b.origin && a.clause == b.clause &&
                                  trim(a.text) == trim(b.text);
                       }) -
                       order.begin();
            };
            return pos(x) < pos(y);
        });
        m.dynamic[std::size_t(role)] = std::move(merged);
    }
    return m;
}

}  // namespace forge::memory
