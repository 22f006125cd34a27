// SPDX-License-Identifier: Apache-2.0
#pragma once

// Chat endpoint abstraction shared by rollouts (vision chat) and trajectory
// construction (CoT text generation), with retry/throttle decorators and the
// deterministic mock backends used in tests.

#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "text.hpp"

namespace agentiad {

/// Where and how episodes talk to a model.
struct BackendConfig {
    std::string kind = "mock"; // "mock" (scripted replies) or "openai" (chat-completions over HTTP)
    std::string endpoint_url = "http://localhost:8000/v1/chat/completions";
    std::string model_name = "agentiad-3b";
    double temperature = 1.0;
    int max_turns = 6;
    double timeout_s = 120.0;
    std::string auth_env = "OPENAI_API_KEY";
    std::string script_path;
    int max_in_flight = 4;
    int requests_per_minute = 0;
    int retry_attempts = 3;
    int retry_base_delay_ms = 500;

    void check() const {
        if (max_turns < 2) throw ContractViolation("max_turns must be >= 2");
        if (!(temperature >= 0.0)) throw ContractViolation("temperature must be >= 0");
    }
};

struct ContentItem {
    enum class Kind { text, image };
    Kind kind = Kind::text;
    std::string text;
    std::filesystem::path path;
    std::string sha256; // content hash of image items written by tools; empty otherwise

    static ContentItem make_text(std::string t) { return {Kind::text, std::move(t), {}, {}}; }
    static ContentItem make_image(std::filesystem::path p, std::string hash = {}) {
        return {Kind::image, {}, std::move(p), std::move(hash)};
    }
    [[nodiscard]] bool is_image() const noexcept { return kind == Kind::image; }

    friend bool operator==(const ContentItem&, const ContentItem&) = default;
};

/// One conversation turn. `role` is the logical role (system, user, assistant, tool).
struct ChatMessage {
    std::string role;
    std::vector<ContentItem> content;
    bool supervised = false;

    [[nodiscard]] std::string text() const {
        std::string out;
        for (const auto& c : content) {
            if (c.kind == ContentItem::Kind::text) out += c.text;
        }
        return out;
    }

    friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

inline ChatMessage text_message(std::string role, std::string text) {
    return {std::move(role), {ContentItem::make_text(std::move(text))}, false};
}

inline nlohmann::ordered_json to_json(const ChatMessage& m) {
    nlohmann::ordered_json j;
    j["role"] = m.role;
    j["supervised"] = m.supervised;
    j["content"] = nlohmann::ordered_json::array();
    for (const auto& c : m.content) {
        nlohmann::ordered_json item;
        if (c.is_image()) {
            item["type"] = "image";
            item["path"] = c.path.string();
            if (!c.sha256.empty()) item["sha256"] = c.sha256;
        } else {
            item["type"] = "text";
            item["text"] = c.text;
        }
        j["content"].push_back(std::move(item));
    }
    return j;
}

template <typename Json>
ChatMessage message_from_json(const Json& j) {
    ChatMessage m;
    m.role = j.at("role").template get<std::string>();
    m.supervised = j.value("supervised", false);
    for (const auto& item : j.at("content")) {
        if (item.at("type") == "image") {
            m.content.push_back(ContentItem::make_image(item.at("path").template get<std::string>(),
                                                        item.value("sha256", std::string())));
        } else {
            m.content.push_back(ContentItem::make_text(item.at("text").template get<std::string>()));
        }
    }
    return m;
}

struct ChatRequest {
    std::string model;
    double temperature = 0.0;
    std::vector<ChatMessage> messages;
    // Bookkeeping for scripted backends; never sent over the wire.
    std::string sample_id;
    int episode_index = 0;

    [[nodiscard]] int assistant_turns() const {
        int n = 0;
        for (const auto& m : messages) n += m.role == "assistant";
        return n;
    }
};

class ChatEndpoint {
public:
    virtual ~ChatEndpoint() = default;
    /// Returns the assistant reply text; throws EndpointError on failure.
    virtual std::string complete(const ChatRequest& request) = 0;
};

struct RetryPolicy {
    int attempts = 3;
    std::chrono::milliseconds base_delay{500};
};

/// Calls the endpoint up to `attempts` times with exponential backoff between tries.
inline std::string complete_with_retry(ChatEndpoint& endpoint, const ChatRequest& request, const RetryPolicy& policy) {
    std::string last_error = "no attempts made";
    auto delay = policy.base_delay;
    for (int attempt = 0; attempt < policy.attempts; ++attempt) {
        if (attempt > 0 && delay.count() > 0) {
            std::this_thread::sleep_for(delay);
            delay *= 2;
        }
        try {
            return endpoint.complete(request);
        } catch (const EndpointError& e) {
            last_error = e.what();
        }
    }
    throw EndpointError("endpoint failed after " + std::to_string(policy.attempts) + " attempts: " + last_error);
}

/// Caps concurrent in-flight requests and, when requests_per_minute > 0, the request rate
/// over a sliding one-minute window.
class ThrottledEndpoint : public ChatEndpoint {
public:
    ThrottledEndpoint(std::shared_ptr<ChatEndpoint> inner, int max_in_flight, int requests_per_minute = 0)
        : inner_(std::move(inner)), max_in_flight_(std::max(1, max_in_flight)), per_minute_(requests_per_minute) {}

    std::string complete(const ChatRequest& request) override {
        acquire();
        struct Release {
            ThrottledEndpoint* self;
            ~Release() { self->release(); }
        } guard{this};
        return inner_->complete(request);
    }

    [[nodiscard]] int peak_in_flight() const {
        std::lock_guard lock(mutex_);
        return peak_;
    }

private:
    void acquire() {
        std::unique_lock lock(mutex_);
        for (;;) {
            if (in_flight_ >= max_in_flight_) {
                cv_.wait(lock);
                continue;
            }
            if (per_minute_ > 0) {
                const auto now = std::chrono::steady_clock::now();
                while (!recent_.empty() && now - recent_.front() >= std::chrono::minutes(1)) recent_.pop_front();
                if (static_cast<int>(recent_.size()) >= per_minute_) {
                    cv_.wait_until(lock, recent_.front() + std::chrono::minutes(1));
                    continue;
                }
                recent_.push_back(now);
            }
            break;
        }
        ++in_flight_;
        peak_ = std::max(peak_, in_flight_);
    }

    void release() {
        {
            std::lock_guard lock(mutex_);
            --in_flight_;
        }
        cv_.notify_all();
    }

    std::shared_ptr<ChatEndpoint> inner_;
    int max_in_flight_;
    int per_minute_;
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    int in_flight_ = 0;
    int peak_ = 0;
    std::deque<std::chrono::steady_clock::time_point> recent_;
};

/// Canned assistant replies keyed by (sample id, episode index, turn index).
///
/// Script file: a JSON list of {"sample_id": id or "*", "turn": k, "reply": text}
/// with an optional "episode": e. Lookup prefers an exact sample id over "*" and an
/// exact episode over an entry without one. Missing replies raise EndpointError.
class ScriptedBackend : public ChatEndpoint {
public:
    ScriptedBackend() = default;

    static ScriptedBackend from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw LoadError("cannot open mock script " + path.string());
        const auto j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded() || !j.is_array()) throw LoadError("mock script " + path.string() + " is not a JSON list");
        ScriptedBackend b;
        for (const auto& e : j) {
            try {
                std::optional<int> episode;
                if (e.contains("episode") && !e["episode"].is_null()) episode = e["episode"].get<int>();
                b.add(e.at("sample_id").get<std::string>(), e.at("turn").get<int>(), e.at("reply").get<std::string>(),
                      episode);
            } catch (const nlohmann::json::exception& ex) {
                throw LoadError("malformed mock script entry in " + path.string() + ": " + ex.what());
            }
        }
        return b;
    }

    void add(const std::string& sample_id, int turn, std::string reply, std::optional<int> episode = std::nullopt) {
        replies_[{sample_id, episode.value_or(any_episode), turn}] = std::move(reply);
    }

    std::string complete(const ChatRequest& request) override {
        const int turn = request.assistant_turns();
        for (const auto& sample : {request.sample_id, std::string("*")}) {
            for (int episode : {request.episode_index, any_episode}) {
                if (auto it = replies_.find({sample, episode, turn}); it != replies_.end()) return it->second;
            }
        }
        throw EndpointError("no scripted reply for sample '" + request.sample_id + "' turn " + std::to_string(turn));
    }

private:
    static constexpr int any_episode = -1;
    std::map<std::tuple<std::string, int, int>, std::string> replies_;
};

/// Returns replies from a fixed queue, then repeats the last one. Handy for retry tests.
class SequenceEndpoint : public ChatEndpoint {
public:
    explicit SequenceEndpoint(std::vector<std::string> replies) : replies_(std::move(replies)) {}

    std::string complete(const ChatRequest&) override {
        std::lock_guard lock(mutex_);
        ++calls_;
        if (replies_.empty()) throw EndpointError("sequence exhausted");
        if (next_ < replies_.size()) return replies_[next_++];
        return replies_.back();
    }

    [[nodiscard]] int calls() const {
        std::lock_guard lock(mutex_);
        return calls_;
    }

private:
    mutable std::mutex mutex_;
    std::vector<std::string> replies_;
    std::size_t next_ = 0;
    int calls_ = 0;
};

/// Always throws; stands in for an unreachable server.
class FailingEndpoint : public ChatEndpoint {
public:
    std::string complete(const ChatRequest&) override { throw EndpointError("connection refused"); }
};

/// Deterministic stand-in for the CoT text generator. It recognises the ROI and
/// CoT-1/2/3 prompts and answers consistently with the ground truth they embed.
class MockTextEndpoint : public ChatEndpoint {
public:
    std::string complete(const ChatRequest& request) override {
        std::string system, user;
        for (const auto& m : request.messages) {
            if (m.role == "system") system += m.text();
            if (m.role == "user") user += m.text();
        }
        const auto cls = field(user, "- Class: ").empty() ? field(user, "Class: ") : field(user, "- Class: ");
        const bool abnormal = user.find("ABNORMAL") != std::string::npos;
        auto type = field(user, "- Specific anomaly type: ");
        if (type.empty()) type = field(user, "Anomaly type: ");

        if (user.find("identify ONE region") != std::string::npos) return "[0.2, 0.3, 0.6, 0.7]";
        if (system.find("DO NOT mention") != std::string::npos) {
            return abnormal ? "The global view of the " + cls + " shows an irregular patch whose texture breaks the "
                                  "regular pattern; this area needs a closer look for " + type + "."
                            : "The " + cls + " looks uniform overall, but this area is where defects usually "
                                  "appear, so it deserves a closer look.";
        }
        if (system.find("industrial anomaly analysis expert") != std::string::npos) {
            return abnormal ? "- Compared with the normal reference, the ROI shows a localized deviation consistent "
                              "with " + type + ".\n- The reference surface is uniform where the target is disrupted."
                            : "- The ROI matches the normal reference in texture, color and shape.\n- No deviation "
                              "from the reference is visible.";
        }
        if (system.find("select the most fitting anomaly label") != std::string::npos) {
            if (abnormal) {
                return "<think>\nThe zoomed region of the " + cls + " reveals a clear local defect that matches " +
                       type + ", visible in both the original image and the crop.\n</think>\n<answer>\n"
                       "{\"anomaly_present\": true, \"top_anomaly\": \"" + type +
                       "\", \"visual_descriptions\": [\"localized " + type + " in the inspected region\"]}\n</answer>";
            }
            return "<think>\nThe zoomed region of the " + cls + " is consistent with the rest of the object; no "
                   "irregularity is visible.\n</think>\n<answer>\n{\"anomaly_present\": false, \"top_anomaly\": "
                   "\"none\", \"visual_descriptions\": []}\n</answer>";
        }
        throw EndpointError("mock text endpoint received an unrecognised prompt");
    }

private:
    static std::string field(const std::string& text, const std::string& key) {
        const auto p = text.find(key);
        if (p == std::string::npos) return {};
        const auto start = p + key.size();
        return trim(text.substr(start, text.find('\n', start) - start));
    }
};

} // namespace agentiad
