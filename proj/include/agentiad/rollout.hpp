// SPDX-License-Identifier: Apache-2.0
#pragma once

// Multi-turn episodes against a chat endpoint: send transcript, parse the reply,
// execute the first tool call (respecting the mode), append the result, stop on
// an answer, a second malformed reply, the turn cap, or endpoint failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "endpoint.hpp"
#include "errors.hpp"
#include "grpo.hpp"
#include "parallel.hpp"
#include "protocol.hpp"
#include "rewards.hpp"
#include "tools.hpp"

namespace agentiad {

enum class Termination { answered, turn_budget_exceeded, endpoint_error };

inline std::string to_string(Termination t) {
    switch (t) {
    case Termination::answered: return "answered";
    case Termination::turn_budget_exceeded: return "turn_budget_exceeded";
    case Termination::endpoint_error: return "endpoint_error";
    }
    return "endpoint_error";
}

inline Termination termination_from_string(const std::string& s) {
    if (s == "answered") return Termination::answered;
    if (s == "turn_budget_exceeded") return Termination::turn_budget_exceeded;
    if (s == "endpoint_error") return Termination::endpoint_error;
    throw LoadError("unknown termination '" + s + "'");
}

inline constexpr const char* nudge_text = "Invalid format: output a tool call or final answer.";
inline constexpr const char* tool_unavailable_text = "error: tool not available";

struct EpisodeRecord {
    std::string episode_id;
    std::string group_id;
    int episode_index = 0;
    SampleRecord sample;
    ToolMode mode = ToolMode::pz_only;
    int max_turns = 6;
    std::vector<ChatMessage> turns;
    EpisodeSummary summary;
    Termination termination = Termination::turn_budget_exceeded;
    std::vector<std::string> executed_tools;
    int tool_errors = 0;
    std::vector<std::string> tool_log;
    double wall_time = 0.0;
    // Filled in once the episode is scored inside its group.
    double query_rate = 0.0;
    std::optional<RewardBreakdown> reward;
    double advantage = 0.0;
    bool filtered = false;
    bool degraded = false;

    [[nodiscard]] int assistant_turns() const {
        int n = 0;
        for (const auto& t : turns) n += t.role == "assistant";
        return n;
    }
};

struct RolloutContext {
    ChatEndpoint* endpoint = nullptr;
    BackendConfig backend;
    const ExemplarIndex* exemplars = nullptr;
    std::filesystem::path workdir = "work";
    RetryPolicy retry;
};

inline RetryPolicy retry_policy_for(const BackendConfig& b) {
    return {b.retry_attempts, std::chrono::milliseconds(b.retry_base_delay_ms)};
}

namespace detail {

/// Maps a box given relative to `frame` into the frame's parent coordinates.
inline BBox compose_frame(const BBox& frame, const BBox& inner) {
    return {frame.x1 + inner.x1 * frame.width(), frame.y1 + inner.y1 * frame.height(),
            frame.x1 + inner.x2 * frame.width(), frame.y1 + inner.y2 * frame.height()};
}

} // namespace detail

/// Runs one episode. The sample image must be readable (LoadError otherwise).
inline EpisodeRecord run_episode(const SampleRecord& sample, const PromptBundle& prompts, const RolloutContext& ctx,
                                 const std::string& episode_id, int episode_index = 0) {
    if (ctx.endpoint == nullptr) throw ContractViolation("rollout context has no endpoint");
    ctx.backend.check();
    const auto started = std::chrono::steady_clock::now();

    EpisodeRecord rec;
    rec.episode_id = episode_id;
    rec.group_id = episode_id;
    rec.episode_index = episode_index;
    rec.sample = sample;
    rec.mode = prompts.mode;
    rec.max_turns = ctx.backend.max_turns;

    ToolWorkspace ws(ctx.workdir / episode_id, sample.image_path);
    // Region of each history image in original-image coordinates; absent for exemplars.
    std::vector<std::optional<BBox>> frames{BBox{0.0, 0.0, 1.0, 1.0}};

    rec.turns.push_back(text_message("system", prompts.system_text));
    rec.turns.push_back({"user", {ContentItem::make_image(sample.image_path), ContentItem::make_text(prompts.user_text)}, false});

    bool nudged = false;
    bool finished = false;
    while (!finished && rec.assistant_turns() < ctx.backend.max_turns) {
        ChatRequest req;
        req.model = ctx.backend.model_name;
        req.temperature = ctx.backend.temperature;
        req.messages = rec.turns;
        req.sample_id = sample.id;
        req.episode_index = episode_index;
        std::string reply;
        try {
            reply = complete_with_retry(*ctx.endpoint, req, ctx.retry);
        } catch (const EndpointError& e) {
            rec.termination = Termination::endpoint_error;
            rec.tool_log.push_back(e.what());
            finished = true;
            break;
        }
        rec.turns.push_back(text_message("assistant", reply));
        const auto parsed = parse_assistant_turn(reply);
        StepStat step;
        step.n_tool_calls = parsed.tool_call_blocks;
        if (parsed.answer) step.emitted_answer = parsed.answer->anomaly_present == sample.anomalous();
        rec.summary.steps.push_back(step);

        if (parsed.format_valid && parsed.answer) {
            rec.summary.final_answer = parsed.answer;
            rec.summary.format_valid = true;
            rec.termination = Termination::answered;
            finished = true;
            break;
        }
        if (parsed.format_valid && !parsed.tool_calls.empty()) {
            const auto& call = parsed.tool_calls.front();
            if (!call.is_crop() && prompts.mode == ToolMode::pz_only) {
                rec.turns.push_back(text_message("tool", tool_unavailable_text));
                ++rec.tool_errors;
                continue;
            }
            try {
                ImageRef ref;
                std::optional<BBox> frame;
                if (call.is_crop()) {
                    ref = crop_normalized(ws, *call.bbox, *call.target_image);
                    const auto& parent = frames[static_cast<std::size_t>(*call.target_image - 1)];
                    if (parent) {
                        frame = detail::compose_frame(*parent, call.bbox->clamped());
                        rec.summary.pred_bbox = frame;
                    }
                } else {
                    if (ctx.exemplars == nullptr) throw ToolError("no exemplar for class");
                    ref = retrieve_normal(ws, *ctx.exemplars, sample.class_name, sample.image_path);
                    rec.summary.used_query = true;
                }
                frames.push_back(frame);
                rec.executed_tools.push_back(to_string(call.name));
                rec.turns.push_back({"tool", {ContentItem::make_image(ref.path, sha256_file(ref.path))}, false});
            } catch (const ToolError& e) {
                rec.turns.push_back(text_message("tool", std::string("error: ") + e.what()));
                ++rec.tool_errors;
            }
            continue;
        }
        if (nudged) {
            rec.termination = Termination::turn_budget_exceeded;
            finished = true;
            break;
        }
        nudged = true;
        rec.turns.push_back(text_message("user", nudge_text));
    }
    if (!finished) rec.termination = Termination::turn_budget_exceeded;
    for (auto& line : ws.log) rec.tool_log.push_back(std::move(line));
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return rec;
}

/// Endpoint-error episodes score zero on every component.
inline RewardBreakdown score_episode(const EpisodeRecord& rec, double query_rate, const RewardCoefficients& coeffs) {
    if (rec.termination == Termination::endpoint_error || rec.summary.steps.empty()) return {};
    return total_reward(rec.summary, rec.sample, GroupStats{query_rate}, coeffs);
}

struct GroupOptions {
    RewardCoefficients coeffs;
    GrpoConfig grpo;
    bool zero_advantage_filtering = true;
};

/// Scores a set of episodes that share one prompt: query rate, rewards, advantages,
/// degradation (>50% endpoint errors) and zero-advantage filtering, written back into
/// the records. Returns the matching RolloutGroup.
inline RolloutGroup score_group(std::vector<EpisodeRecord>& episodes, const GroupOptions& opts) {
    RolloutGroup group;
    if (episodes.empty()) return group;
    group.group_id = episodes.front().group_id;
    int queried = 0, errors = 0;
    for (const auto& e : episodes) {
        queried += e.summary.used_query;
        errors += e.termination == Termination::endpoint_error;
    }
    group.query_rate = static_cast<double>(queried) / static_cast<double>(episodes.size());
    group.degraded = 2 * errors > static_cast<int>(episodes.size());
    for (auto& e : episodes) {
        e.query_rate = group.query_rate;
        e.reward = score_episode(e, group.query_rate, opts.coeffs);
        group.episodes.push_back({e.episode_id, e.summary, *e.reward, {}});
    }
    compute_advantages(group, opts.grpo);
    const bool filtered = opts.zero_advantage_filtering && !filter_zero_advantage(group);
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        episodes[i].advantage = group.advantages[i];
        episodes[i].filtered = filtered;
        episodes[i].degraded = group.degraded;
    }
    return group;
}

struct GroupResult {
    RolloutGroup group;
    std::vector<EpisodeRecord> episodes;
    bool filtered = false;

    /// Group usable for the objective: not degraded and not filtered.
    [[nodiscard]] bool usable() const { return !group.degraded && !filtered; }
};

/// K independent episodes for one sample, run concurrently up to the backend's in-flight cap.
inline GroupResult run_group(const SampleRecord& sample, const PromptBundle& prompts, const RolloutContext& ctx,
                             int group_size, const GroupOptions& opts) {
    if (group_size < 2) throw ContractViolation("group size must be >= 2");
    GroupResult out;
    out.episodes.resize(static_cast<std::size_t>(group_size));
    parallel_for(out.episodes.size(), ctx.backend.max_in_flight, [&](std::size_t k) {
        auto rec = run_episode(sample, prompts, ctx, sample.id + "-e" + std::to_string(k), static_cast<int>(k));
        rec.group_id = sample.id;
        out.episodes[k] = std::move(rec);
    });
    out.group = score_group(out.episodes, opts);
    out.filtered = !out.episodes.empty() && out.episodes.front().filtered;
    return out;
}

// ---------------------------------------------------------------------------
// Episode JSONL

inline nlohmann::ordered_json to_json(const EpisodeRecord& r) {
    nlohmann::ordered_json j;
    j["episode_id"] = r.episode_id;
    j["group_id"] = r.group_id;
    j["episode_index"] = r.episode_index;
    j["mode"] = to_string(r.mode);
    j["max_turns"] = r.max_turns;
    j["sample"] = to_json(r.sample);
    j["termination"] = to_string(r.termination);
    j["turns"] = nlohmann::ordered_json::array();
    for (const auto& t : r.turns) j["turns"].push_back(to_json(t));
    j["summary"] = to_json(r.summary);
    j["executed_tools"] = r.executed_tools;
    j["tool_errors"] = r.tool_errors;
    j["tool_log"] = r.tool_log;
    j["query_rate"] = r.query_rate;
    j["reward"] = r.reward ? to_json(*r.reward) : nlohmann::ordered_json(nullptr);
    j["advantage"] = r.advantage;
    j["filtered"] = r.filtered;
    j["degraded"] = r.degraded;
    j["wall_time"] = r.wall_time;
    return j;
}

template <typename Json>
EpisodeRecord episode_from_json(const Json& j) {
    EpisodeRecord r;
    r.episode_id = j.at("episode_id").template get<std::string>();
    r.group_id = j.at("group_id").template get<std::string>();
    r.episode_index = j.value("episode_index", 0);
    r.mode = tool_mode_from_string(j.at("mode").template get<std::string>());
    r.max_turns = j.value("max_turns", 6);
    r.sample = sample_from_json(j.at("sample"));
    r.termination = termination_from_string(j.at("termination").template get<std::string>());
    for (const auto& t : j.at("turns")) r.turns.push_back(message_from_json(t));
    r.summary = summary_from_json(j.at("summary"));
    r.executed_tools = j.value("executed_tools", std::vector<std::string>{});
    r.tool_errors = j.value("tool_errors", 0);
    r.tool_log = j.value("tool_log", std::vector<std::string>{});
    r.query_rate = j.value("query_rate", 0.0);
    if (j.contains("reward") && !j["reward"].is_null()) r.reward = reward_from_json(j["reward"]);
    r.advantage = j.value("advantage", 0.0);
    r.filtered = j.value("filtered", false);
    r.degraded = j.value("degraded", false);
    r.wall_time = j.value("wall_time", 0.0);
    return r;
}

inline void write_episodes(const std::filesystem::path& path, const std::vector<EpisodeRecord>& episodes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw LoadError("cannot write " + path.string());
    for (const auto& e : episodes) out << to_json(e).dump() << '\n';
}

inline std::vector<EpisodeRecord> read_episodes(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open episodes " + path.string());
    std::vector<EpisodeRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(episode_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw LoadError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

/// Episodes grouped by group_id, keeping first-appearance order of groups.
inline std::vector<std::vector<EpisodeRecord>> group_episodes(std::vector<EpisodeRecord> episodes) {
    std::vector<std::vector<EpisodeRecord>> groups;
    std::map<std::string, std::size_t> slot;
    for (auto& e : episodes) {
        auto [it, inserted] = slot.try_emplace(e.group_id, groups.size());
        if (inserted) groups.emplace_back();
        groups[it->second].push_back(std::move(e));
    }
    return groups;
}

} // namespace agentiad
