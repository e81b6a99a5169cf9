#include "forge/llm_connector.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include <fmt/chrono.h>
#include <fmt/format.h>

#include "forge/errors.hpp"
#include "forge/memory.hpp"
#include "httplib.h"
#include "json.hpp"

namespace forge::connector {

using nlohmann::json;

HttpSettings http_settings_from_env() {
    HttpSettings s;
    if (const char* url = std::getenv("FORGE_LLM_BASE_URL")) s.base_url = url;
    if (const char* key = std::getenv("FORGE_LLM_API_KEY")) s.api_key = key;
    return s;
}

std::string request_json(const ChatRequest& request) {
    json j;
    j["model"] = request.model;
    j["messages"] = json::array();
    for (const auto& m : request.messages) j["messages"].push_back({{"role", m.role}, {"content", m.content}});
    j["temperature"] = request.temperature;
    j["max_tokens"] = request.max_output_tokens;
    return j.dump();
}

std::string request_key(const ChatRequest& request) { return memory::sha256_hex(request_json(request)); }

std::int64_t count_tokens(std::string_view text) {
    std::int64_t n = 0;
    bool in_token = false;
    for (char c : text) {
        const bool space = std::isspace(static_cast<unsigned char>(c));
        if (!space && !in_token) ++n;
        in_token = !space;
    }
    return n;
}

namespace {

TokenUsage approximate_usage(const ChatRequest& request, std::string_view completion) {
    TokenUsage u;
    for (const auto& m : request.messages) u.prompt_tokens += count_tokens(m.content);
    u.completion_tokens = count_tokens(completion);
    return u;
}

// Splits "https://host:port/v1" into the scheme-host part and the path prefix.
std::pair<std::string, std::string> split_base_url(const std::string& url) {
    const auto scheme = url.find("://");
    const auto path = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    if (path == std::string::npos) return {url, ""};
    std::string prefix = url.substr(path);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {url.substr(0, path), prefix};
}

bool transient(int status) { return status == 429 || status >= 500; }

}  // namespace

HttpConnector::HttpConnector(HttpSettings settings) : settings_(std::move(settings)) {
    if (settings_.base_url.empty()) throw ConfigError("provider base URL is not set (FORGE_LLM_BASE_URL)");
    if (settings_.attempts < 1) throw ConfigError("connector attempts must be >= 1");
}

ChatResponse HttpConnector::complete(const ChatRequest& request) const {
    const auto [host, prefix] = split_base_url(settings_.base_url);
    httplib::Client client(host);
    client.set_connection_timeout(settings_.timeout);
    client.set_read_timeout(settings_.timeout);
    httplib::Headers headers;
    if (!settings_.api_key.empty()) headers.emplace("Authorization", "Bearer " + settings_.api_key);
    const auto body = request_json(request);

    int status = 0;
    std::string detail;
    auto backoff = settings_.initial_backoff;
    for (int attempt = 0; attempt < settings_.attempts; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(backoff);
            backoff *= 2;
        }
        const auto started = std::chrono::steady_clock::now();
        auto result = client.Post(prefix + "/chat/completions", headers, body, "application/json");
        const auto latency =
            std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started);
        if (!result) {
            status = 0;
            detail = httplib::to_string(result.error());
            continue;
        }
        status = result->status;
        if (status != 200) {
            detail = result->body.substr(0, 200);
            if (transient(status)) continue;
            break;
        }
        try {
            const auto j = json::parse(result->body);
            ChatResponse response;
            response.content = j.at("choices").at(0).at("message").at("content").get<std::string>();
            const auto& usage = j.at("usage");
            response.usage = {usage.at("prompt_tokens").get<std::int64_t>(),
                              usage.at("completion_tokens").get<std::int64_t>()};
            response.provider_latency = latency;
            response.retries = attempt;
            return response;
        } catch (const json::exception& e) {
            throw ConnectorError(std::string("malformed provider response: ") + e.what(), status);
        }
    }
    throw ConnectorError(fmt::format("provider request failed after retries (status {}): {}", status, detail),
                         status);
}

MockConnector::MockConnector(Mode mode, Responder responder, const Connector* upstream)
    : mode_(mode), responder_(std::move(responder)), upstream_(upstream) {}

ChatResponse MockConnector::complete(const ChatRequest& request) const {
    const auto key = request_key(request);
    if (mode_ == Mode::Replay) {
        std::lock_guard lock(mutex_);
        const auto it = fixtures_.find(key);
        if (it == fixtures_.end()) throw FixtureMissingError(key);
        return {it->second.content, it->second.usage, std::chrono::milliseconds(0), 0};
    }
    ChatResponse response;
    if (upstream_ != nullptr) {
        response = upstream_->complete(request);
    } else {
        if (!responder_) throw ConnectorError("mock connector has no responder", 0);
        response.content = responder_(request);
        response.usage = approximate_usage(request, response.content);
    }
    if (mode_ == Mode::Record) {
        std::lock_guard lock(mutex_);
        fixtures_[key] = {response.content, response.usage};
    }
    return response;
}

void MockConnector::load_fixtures(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read fixture file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what(), e.byte);
    }
    std::lock_guard lock(mutex_);
    for (const auto& [key, value] : j.items()) {
        fixtures_[key] = {value.at("content").get<std::string>(),
                          {value.at("prompt_tokens").get<std::int64_t>(),
                           value.at("completion_tokens").get<std::int64_t>()}};
    }
}

void MockConnector::save_fixtures(const std::filesystem::path& path) const {
    json j = json::object();
    {
        std::lock_guard lock(mutex_);
        for (const auto& [key, f] : fixtures_)
            j[key] = {{"content", f.content},
                      {"prompt_tokens", f.usage.prompt_tokens},
                      {"completion_tokens", f.usage.completion_tokens}};
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << '\n';
}

void MockConnector::add_fixture(const std::string& key, Fixture fixture) {
    std::lock_guard lock(mutex_);
    fixtures_[key] = std::move(fixture);
}

std::size_t MockConnector::fixture_count() const {
    std::lock_guard lock(mutex_);
    return fixtures_.size();
}

std::string_view to_string(Phase phase) { return phase == Phase::Adaptation ? "adaptation" : "evaluation"; }

void CallContext::record(std::string_view role, const ChatResponse& response) {
    entries.push_back({instance, std::string(role), phase, response.usage, response.retries});
}

TokenLog::TokenLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
    std::ofstream(*path_, std::ios::trunc);
}

void TokenLog::append(const std::vector<TokenLogEntry>& entries) {
    entries_.insert(entries_.end(), entries.begin(), entries.end());
    if (!path_ || entries.empty()) return;
    std::ofstream out(*path_, std::ios::app);
    const auto now = std::chrono::system_clock::now();
    const auto stamp = fmt::format("{:%Y-%m-%dT%H:%M:%S}Z", fmt::gmtime(std::chrono::system_clock::to_time_t(now)));
    for (const auto& e : entries) {
        json j = {{"timestamp", stamp},
                  {"instance", e.instance},
                  {"role", e.role},
                  {"phase", to_string(e.phase)},
                  {"prompt_tokens", e.usage.prompt_tokens},
                  {"completion_tokens", e.usage.completion_tokens},
                  {"retries", e.retries}};
        out << j.dump() << '\n';
    }
}

PhaseTotals TokenLog::totals() const {
    PhaseTotals t;
    for (const auto& e : entries_) t[e.phase] += e.usage;
    return t;
}

std::vector<PhaseTotals> TokenLog::totals_by_instance(int instances) const {
    std::vector<PhaseTotals> out(std::size_t(std::max(instances, 0)));
    for (const auto& e : entries_)
        if (e.instance >= 0 && e.instance < instances) out[std::size_t(e.instance)][e.phase] += e.usage;
    return out;
}

std::vector<TokenLogEntry> read_token_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read token log " + path.string());
    std::vector<TokenLogEntry> out;
    std::string line;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            try {
                const auto j = json::parse(line);
                TokenLogEntry e;
                e.instance = j.at("instance").get<int>();
                e.role = j.at("role").get<std::string>();
                e.phase = j.at("phase").get<std::string>() == "evaluation" ? Phase::Evaluation : Phase::Adaptation;
                e.usage = {j.at("prompt_tokens").get<std::int64_t>(), j.at("completion_tokens").get<std::int64_t>()};
                e.retries = j.value("retries", 0);
                out.push_back(std::move(e));
            } catch (const json::exception& e) {
                throw ParseError(path.string() + ": " + e.what(), offset);
            }
        }
        offset += line.size() + 1;
    }
    return out;
}

}  // namespace forge::connector
