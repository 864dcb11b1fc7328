#pragma once

// OpenAI-compatible chat-completions client. https:// base URLs need the
// build to define CPPHTTPLIB_OPENSSL_SUPPORT.

#include "ruleagent/llm.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>

namespace ruleagent {

inline constexpr const char* kApiKeyEnv = "RULEAGENT_API_KEY";

struct HttpBackendConfig {
    std::string base_url = "https://api.openai.com";
    std::size_t max_attempts = 3;
    std::chrono::milliseconds initial_backoff{500};
    std::chrono::seconds timeout{120};
};

class HttpBackend final : public Backend {
public:
    /// Reads the credential from RULEAGENT_API_KEY; throws ConfigError
    /// when it is unset so no request is ever attempted without it.
    explicit HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg))
    {
        const char* key = std::getenv(kApiKeyEnv);
        if (!key || !*key) {
            throw ConfigError(std::string("http backend: environment variable ") + kApiKeyEnv + " is not set");
        }
        api_key_ = key;
        if (cfg_.max_attempts == 0) {
            throw ConfigError("http backend: max_attempts must be positive");
        }
        const auto scheme = cfg_.base_url.find("://");
        if (scheme == std::string::npos) {
            throw ConfigError("http backend: base_url needs a scheme: " + cfg_.base_url);
        }
        const auto slash = cfg_.base_url.find('/', scheme + 3);
        origin_ = cfg_.base_url.substr(0, slash);
        prefix_ = slash == std::string::npos ? std::string() : cfg_.base_url.substr(slash);
        while (!prefix_.empty() && prefix_.back() == '/') {
            prefix_.pop_back();
        }
    }

    bool concurrent() const override { return true; }

    std::string endpoint() const { return origin_ + prefix_ + "/v1/chat/completions"; }

    static nlohmann::json request_body(const ChatRequest& r)
    {
        return {{"model", r.model},
                {"messages",
                 nlohmann::json::array({{{"role", "system"}, {"content", r.system}},
                                        {{"role", "user"}, {"content", r.user}}})},
                {"temperature", r.temperature},
                {"max_tokens", r.max_tokens}};
    }

    static std::string extract_content(const std::string& body)
    {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception& e) {
            throw ProtocolError(std::string("chat completion is not JSON: ") + e.what());
        }
        const auto* content = [&]() -> const nlohmann::json* {
            if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
                return nullptr;
            }
            const auto& choice = j["choices"][0];
            if (!choice.contains("message") || !choice["message"].contains("content")) {
                return nullptr;
            }
            return &choice["message"]["content"];
        }();
        if (!content || !content->is_string() || content->get_ref<const std::string&>().empty()) {
            throw ProtocolError("chat completion carries no message content");
        }
        return content->get<std::string>();
    }

protected:
    std::string do_complete(const ChatRequest& request) override
    {
        const auto body = request_body(request).dump();
        const auto path = prefix_ + "/v1/chat/completions";
        const httplib::Headers headers{{"Authorization", "Bearer " + api_key_}};
        auto backoff = cfg_.initial_backoff;
        std::string last_error;
        for (std::size_t attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
            httplib::Client client(origin_);
            client.set_connection_timeout(cfg_.timeout);
            client.set_read_timeout(cfg_.timeout);
            client.set_write_timeout(cfg_.timeout);
            const auto res = client.Post(path, headers, body, "application/json");
            bool retryable = true;
            if (!res) {
                last_error = "connection failed: " + httplib::to_string(res.error());
            } else if (res->status == 200) {
                return extract_content(res->body);
            } else {
                last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
                retryable = res->status == 429 || res->status >= 500;
            }
            if (!retryable) {
                throw TransportError("chat completion failed: " + last_error);
            }
            if (attempt < cfg_.max_attempts) {
                std::this_thread::sleep_for(backoff);
                backoff *= 2;
            }
        }
        throw TransportError("chat completion failed after " + std::to_string(cfg_.max_attempts)
                             + " attempts: " + last_error);
    }

private:
    HttpBackendConfig cfg_;
    std::string api_key_;
    std::string origin_;
    std::string prefix_;
};

} // namespace ruleagent
