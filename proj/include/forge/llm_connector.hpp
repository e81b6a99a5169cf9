#pragma once

// Chat-completion transport: an HTTP client for OpenAI-style endpoints and a
// record/replay mock keyed by request content hash. Also owns token
// accounting: callers record every response into a CallContext, and the
// coordinator drains those into the run's append-only token log.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace forge::connector {

struct ChatMessage {
    std::string role;  // "system" | "user" | "assistant"
    std::string content;

    friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct ChatRequest {
    std::string model;
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
    int max_output_tokens = 10000;
};

struct TokenUsage {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;

    std::int64_t total() const { return prompt_tokens + completion_tokens; }
    TokenUsage& operator+=(const TokenUsage& other) {
        prompt_tokens += other.prompt_tokens;
        completion_tokens += other.completion_tokens;
        return *this;
    }
    friend bool operator==(const TokenUsage&, const TokenUsage&) = default;
};

struct ChatResponse {
    std::string content;
    TokenUsage usage;
    std::chrono::milliseconds provider_latency{0};
    int retries = 0;
};

class ConnectorError : public std::runtime_error {
public:
    ConnectorError(const std::string& what, int status) : std::runtime_error(what), status_(status) {}
    /// HTTP status of the last attempt, 0 for transport failures.
    int status() const { return status_; }

private:
    int status_;
};

class FixtureMissingError : public ConnectorError {
public:
    explicit FixtureMissingError(const std::string& key)
        : ConnectorError("no recorded fixture for request " + key, 0), key_(key) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

/// Shareable across threads; complete() may be called concurrently.
class Connector {
public:
    virtual ~Connector() = default;
    virtual ChatResponse complete(const ChatRequest& request) const = 0;
};

struct HttpSettings {
    std::string base_url;  // e.g. https://api.example.com/v1
    std::string api_key;
    int attempts = 3;
    std::chrono::milliseconds initial_backoff{500};
    std::chrono::seconds timeout{120};
};

/// Reads FORGE_LLM_BASE_URL and FORGE_LLM_API_KEY.
HttpSettings http_settings_from_env();

/// POSTs {base_url}/chat/completions. Retries 429, 5xx and transport errors
/// with exponential backoff; other statuses fail immediately.
class HttpConnector final : public Connector {
public:
    explicit HttpConnector(HttpSettings settings);
    ChatResponse complete(const ChatRequest& request) const override;

private:
    HttpSettings settings_;
};

/// Canonical JSON body sent to providers and hashed for fixture keys.
std::string request_json(const ChatRequest& request);
/// SHA-256 of request_json, hex.
std::string request_key(const ChatRequest& request);
/// Whitespace-separated token count.
std::int64_t count_tokens(std::string_view text);

struct Fixture {
    std::string content;
    TokenUsage usage;
};

/// Deterministic stand-in for a model.
using Responder = std::function<std::string(const ChatRequest&)>;

/// Synthetic: answers from the responder, usage by whitespace count.
/// Record:    same, or forwards to an upstream connector, and stores every
///            exchange as a fixture.
/// Replay:    serves stored fixtures byte-identically; a miss throws
///            FixtureMissingError.
class MockConnector final : public Connector {
public:
    enum class Mode { Synthetic, Record, Replay };

    MockConnector(Mode mode, Responder responder, const Connector* upstream = nullptr);

    ChatResponse complete(const ChatRequest& request) const override;

    void load_fixtures(const std::filesystem::path& path);
    void save_fixtures(const std::filesystem::path& path) const;
    void add_fixture(const std::string& key, Fixture fixture);
    std::size_t fixture_count() const;
    Mode mode() const { return mode_; }

private:
    Mode mode_;
    Responder responder_;
    const Connector* upstream_;
    mutable std::mutex mutex_;
    mutable std::map<std::string, Fixture> fixtures_;
};

enum class Phase { Adaptation, Evaluation };
std::string_view to_string(Phase phase);

struct TokenLogEntry {
    int instance = 0;
    std::string role;
    Phase phase = Phase::Adaptation;
    TokenUsage usage;
    int retries = 0;
};

/// Per-call bookkeeping owned by one instance's worker. Nothing in here is
/// shared, so workers record without locking.
struct CallContext {
    int instance = 0;
    Phase phase = Phase::Adaptation;
    std::vector<TokenLogEntry> entries;
    std::vector<std::string> events;

    void record(std::string_view role, const ChatResponse& response);
    void event(std::string message) { events.push_back(std::move(message)); }
};

struct PhaseTotals {
    TokenUsage adaptation;
    TokenUsage evaluation;

    TokenUsage& operator[](Phase p) { return p == Phase::Adaptation ? adaptation : evaluation; }
    const TokenUsage& operator[](Phase p) const { return p == Phase::Adaptation ? adaptation : evaluation; }
    TokenUsage combined() const {
        TokenUsage t = adaptation;
        t += evaluation;
        return t;
    }
    friend bool operator==(const PhaseTotals&, const PhaseTotals&) = default;
};

/// Append-only log, one JSON object per line:
/// {"timestamp", "instance", "role", "phase", "prompt_tokens", "completion_tokens", "retries"}.
class TokenLog {
public:
    TokenLog() = default;
    explicit TokenLog(std::filesystem::path path);

    /// Appends in the given order. Only the coordinator calls this.
    void append(const std::vector<TokenLogEntry>& entries);

    const std::vector<TokenLogEntry>& entries() const { return entries_; }
    PhaseTotals totals() const;
    std::vector<PhaseTotals> totals_by_instance(int instances) const;

private:
    std::optional<std::filesystem::path> path_;
    std::vector<TokenLogEntry> entries_;
};

/// Parses a token log file back into entries; timestamps are dropped.
std::vector<TokenLogEntry> read_token_log(const std::filesystem::path& path);

}  // namespace forge::connector
