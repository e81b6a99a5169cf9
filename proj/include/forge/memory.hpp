#pragma once

// Per-instance knowledge store: persistent (user-supplied) and dynamic
// (learned) sections for each acting role, plus serialization and the
// prompt-injection renderer.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "forge/cage_lite.hpp"
#include "forge/errors.hpp"

namespace forge::memory {

enum class Role { Planner, Analyst, ActionChooser };
inline constexpr std::array<Role, 3> kRoles = {Role::Planner, Role::Analyst, Role::ActionChooser};

enum class ArtifactKind { Rule, Example };
enum class Representation { Rules, Examples, Mixed };

std::string_view to_string(Role role);
std::string_view to_string(ArtifactKind kind);
std::string_view to_string(Representation representation);
std::optional<Role> parse_role(std::string_view text);
std::optional<Representation> parse_representation(std::string_view text);

/// Does the representation inject artifacts of this kind?
bool includes(Representation representation, ArtifactKind kind);

enum class Severity { None, Low, Medium, High, Critical };
std::string_view to_string(Severity severity);
std::optional<Severity> parse_severity(std::string_view text);

/// Indicator pattern a clause fires on: every indicator set to true must be
/// raised, and at least `min_count` indicators must be raised in total.
/// "compromised" is {none required, >= 2}.
struct Condition {
    bool anomalous_process = false;
    bool suspicious_connection = false;
    bool new_file = false;
    int min_count = 0;

    static Condition compromised() { return {false, false, false, 2}; }
    static Condition from_flags(const cage::HostFlags& flags);

    bool matches(const cage::HostFlags& flags) const;

    friend bool operator==(const Condition&, const Condition&) = default;
};

/// Machine-readable condition -> outcome pair carried by an artifact, read by
/// the scripted policy. Either an action (Planner) or a severity override
/// (Analyst).
///
/// Text form:  "<host> <condition> => <action>"   e.g.
///             "Enterprise2 compromised => Restore Enterprise2"
///             "User3 anomalous-process+suspicious-connection => Decoy User3"
///             "Op_Server0 suspicious-connection => severity=critical"
struct Clause {
    cage::HostId host;
    Condition condition;
    std::optional<cage::BlueAction> action;
    std::optional<Severity> severity;

    bool matches(const cage::Observation& obs) const { return condition.matches(obs[host]); }

    friend bool operator==(const Clause&, const Clause&) = default;
};

std::string to_string(const Clause& clause);
std::optional<Clause> parse_clause(std::string_view text);

/// Rule wording for a clause:
///   "When User2 shows suspicious-connection, then Decoy User2."
///   "When Op_Server0 shows compromised, then treat severity as critical."
std::string rule_text(const Clause& clause);
/// Inverse of rule_text; tolerates a leading "- ". Free-form rules yield nullopt.
std::optional<Clause> parse_rule_text(std::string_view text);

/// Example block in the Thought/Tool/PAUSE/Observation/Thought/Answer layout.
std::string example_text(const Clause& clause, std::string_view rationale);
/// Recovers the clause from the first Thought ("<host> shows <condition>.")
/// and the Answer line.
std::optional<Clause> parse_example_text(std::string_view text);

struct Origin {
    int stage = 0;
    int attempt = 0;
    int instance = 0;

    friend bool operator==(const Origin&, const Origin&) = default;
};

struct MemoryArtifact {
    ArtifactKind kind = ArtifactKind::Rule;
    Role role = Role::Planner;
    std::string text;
    std::optional<Clause> clause;
    Origin origin;

    /// Stable label used when an artifact is cited, e.g. "rule@s2a1i4".
    std::string id() const;

    friend bool operator==(const MemoryArtifact&, const MemoryArtifact&) = default;
};

/// Rules read "When ..., then ..."; Examples carry the
/// Thought/Tool/Observation/Answer markers in order.
void validate(const MemoryArtifact& artifact);
bool is_valid(const MemoryArtifact& artifact);

inline constexpr std::size_t kDefaultCapacity = 20;

struct InstanceMemory {
    std::array<std::string, 3> persistent{};
    std::array<std::vector<MemoryArtifact>, 3> dynamic{};
    std::size_t capacity = kDefaultCapacity;

    const std::vector<MemoryArtifact>& of(Role role) const { return dynamic[std::size_t(role)]; }
    const std::string& persistent_of(Role role) const { return persistent[std::size_t(role)]; }
    std::size_t artifact_count() const;

    friend bool operator==(const InstanceMemory&, const InstanceMemory&) = default;
};

struct MemoryDelta {
    std::vector<MemoryArtifact> additions;

    bool empty() const { return additions.empty(); }
};

/// Throws ValidationError when additions do not share one origin or any
/// addition fails validate().
void validate(const MemoryDelta& delta);

/// Appends to the artifact's role list, evicting that role's oldest artifact
/// when over capacity.
InstanceMemory append_artifact(InstanceMemory memory, MemoryArtifact artifact);
InstanceMemory apply_delta(InstanceMemory memory, const MemoryDelta& delta);

/// Persistent text followed by the role's dynamic artifacts for the
/// representation, inside <reflection_knowledge> (Rules) and
/// <TOOL_USE_EXAMPLES> (Examples) sections, in insertion order.
std::string render_injection(const InstanceMemory& memory, Role role, Representation representation);

/// Artifacts of a role visible under the representation, in insertion order.
std::vector<const MemoryArtifact*> visible(const InstanceMemory& memory, Role role, Representation representation);

/// Broadcast: dst's dynamic sections become a deep copy of src's. Throws
/// ProtocolError when persistent sections differ.
InstanceMemory replace_dynamic(InstanceMemory dst, const InstanceMemory& src);

/// Canonical JSON encoding; load() accepts only complete documents.
std::string save(const InstanceMemory& memory);
InstanceMemory load(std::string_view bytes);

/// SHA-256 of save(memory), hex.
std::string memory_hash(const InstanceMemory& memory);
/// SHA-256 over the three persistent sections only.
std::string persistent_hash(const InstanceMemory& memory);
std::string sha256_hex(std::string_view bytes);

/// Writes memory.json plus one YAML file per (role, kind):
/// <dir>/<role>/reflection_knowledge.yaml and reflection_examples.yaml.
void write_workspace(const std::filesystem::path& dir, const InstanceMemory& memory);
/// Rebuilds dynamic memory from the per-role YAML files; persistent sections
/// and capacity come from memory.json.
InstanceMemory read_workspace(const std::filesystem::path& dir);

}  // namespace forge::memory
