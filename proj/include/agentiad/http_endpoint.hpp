// SPDX-License-Identifier: Apache-2.0
#pragma once

// OpenAI-compatible chat-completions client. Images travel as inline data URLs;
// tool-result turns are sent with role "user" since many servers reject images
// on the "tool" role.

#include <cstdlib>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "endpoint.hpp"
#include "image.hpp"

namespace agentiad {

inline constexpr const char* tool_result_marker = "[tool_result]";

inline nlohmann::json build_chat_payload(const ChatRequest& request) {
    nlohmann::json payload;
    payload["model"] = request.model;
    payload["temperature"] = request.temperature;
    payload["messages"] = nlohmann::json::array();
    for (const auto& m : request.messages) {
        nlohmann::json msg;
        const bool plain = m.role == "system" || m.role == "assistant";
        msg["role"] = m.role == "tool" ? "user" : m.role;
        if (plain) {
            msg["content"] = m.text();
        } else {
            msg["content"] = nlohmann::json::array();
            if (m.role == "tool") msg["content"].push_back({{"type", "text"}, {"text", tool_result_marker}});
            for (const auto& c : m.content) {
                if (c.is_image()) {
                    msg["content"].push_back({{"type", "image_url"}, {"image_url", {{"url", image_data_url(c.path)}}}});
                } else {
                    msg["content"].push_back({{"type", "text"}, {"text", c.text}});
                }
            }
        }
        payload["messages"].push_back(std::move(msg));
    }
    return payload;
}

/// Extracts choices[0].message.content; array-valued content has its text parts joined.
inline std::string parse_chat_response(const std::string& body) {
    const auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) throw EndpointError("endpoint returned non-JSON body");
    try {
        const auto& content = j.at("choices").at(0).at("message").at("content");
        if (content.is_string()) return content.get<std::string>();
        if (content.is_array()) {
            std::string out;
            for (const auto& part : content) {
                if (part.value("type", "") == "text") out += part.value("text", "");
            }
            return out;
        }
    } catch (const nlohmann::json::exception&) {
    }
    throw EndpointError("endpoint response has no choices[0].message.content");
}

class OpenAiChatEndpoint : public ChatEndpoint {
public:
    explicit OpenAiChatEndpoint(BackendConfig cfg) : cfg_(std::move(cfg)) {
        const auto scheme_end = cfg_.endpoint_url.find("://");
        const auto path_start = cfg_.endpoint_url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
        base_ = cfg_.endpoint_url.substr(0, path_start);
        path_ = path_start == std::string::npos ? "/v1/chat/completions" : cfg_.endpoint_url.substr(path_start);
        if (const char* token = std::getenv(cfg_.auth_env.c_str()); token && *token) token_ = token;
    }

    std::string complete(const ChatRequest& request) override {
        ChatRequest req = request;
        if (req.model.empty()) req.model = cfg_.model_name;
        httplib::Client client(base_);
        const auto secs = static_cast<time_t>(cfg_.timeout_s);
        client.set_connection_timeout(secs);
        client.set_read_timeout(secs);
        client.set_write_timeout(secs);
        httplib::Headers headers;
        if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
        const auto res = client.Post(path_, headers, build_chat_payload(req).dump(), "application/json");
        if (!res) throw EndpointError("request to " + cfg_.endpoint_url + " failed: " + httplib::to_string(res.error()));
        if (res->status != 200) {
            throw EndpointError("endpoint returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
        }
        return parse_chat_response(res->body);
    }

private:
    BackendConfig cfg_;
    std::string base_;
    std::string path_;
    std::string token_;
};

} // namespace agentiad
