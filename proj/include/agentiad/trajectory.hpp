// SPDX-License-Identifier: Apache-2.0
#pragma once

// SFT trajectory construction: ROI extraction (mask bbox or proposed ROI for
// normals), CoT generation through a pluggable text endpoint, assembly of
// PZ-only and PZ+CR conversations with turn-level supervision flags, and the
// masked SFT loss.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "endpoint.hpp"
#include "errors.hpp"
#include "geometry.hpp"
#include "grpo.hpp"
#include "image.hpp"
#include "protocol.hpp"
#include "text.hpp"
#include "tools.hpp"

namespace agentiad {

inline constexpr std::uint8_t mask_threshold = 127;

/// Tight normalized bbox of every pixel above the threshold (union of all blobs);
/// x2/y2 are exclusive edges. Color masks use the brightest color channel.
inline BBox mask_to_bbox(const Image& mask) {
    const int color_channels = mask.channels >= 3 ? 3 : 1;
    int c_min = mask.width, c_max = -1, r_min = mask.height, r_max = -1;
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            const auto* px = mask.at(x, y);
            const auto v = *std::max_element(px, px + color_channels);
            if (v > mask_threshold) {
                c_min = std::min(c_min, x);
                c_max = std::max(c_max, x);
                r_min = std::min(r_min, y);
                r_max = std::max(r_max, y);
            }
        }
    }
    if (c_max < 0) throw LoadError("empty mask");
    const double w = mask.width, h = mask.height;
    return {c_min / w, r_min / h, (c_max + 1) / w, (r_max + 1) / h};
}

inline BBox mask_to_bbox(const std::filesystem::path& mask_path) { return mask_to_bbox(read_image(mask_path)); }

/// Fills gt_bbox of anomalous samples from their mask when it is not given explicitly.
inline void resolve_gt_bbox(SampleRecord& s) {
    if (s.anomalous() && !s.gt_bbox && s.mask_path) s.gt_bbox = mask_to_bbox(*s.mask_path);
}

enum class Taxonomy { pz, pz_cr };

inline std::string to_string(Taxonomy t) { return t == Taxonomy::pz ? "pz" : "pz_cr"; }

inline Taxonomy taxonomy_from_string(const std::string& s) {
    if (s == "pz") return Taxonomy::pz;
    if (s == "pz_cr") return Taxonomy::pz_cr;
    throw ContractViolation("unknown taxonomy '" + s + "'");
}

inline ToolMode mode_for(Taxonomy t) { return t == Taxonomy::pz ? ToolMode::pz_only : ToolMode::pz_cr; }

/// Seeded per-sample choice used by the "mixed" taxonomy setting.
inline Taxonomy choose_taxonomy(const std::string& sample_id, double pz_cr_fraction, std::uint64_t seed) {
    const auto h = detail::splitmix64(seed ^ detail::fnv1a(sample_id));
    return static_cast<double>(h % 1000000) < pz_cr_fraction * 1e6 ? Taxonomy::pz_cr : Taxonomy::pz;
}

struct Trajectory {
    SampleRecord sample;
    Taxonomy taxonomy = Taxonomy::pz;
    std::vector<ChatMessage> turns;
    BBox roi_bbox;
};

namespace cot_prompts {

inline constexpr std::string_view normal_roi_user =
    "This is a normal {class_name} image without any defects.\n"
    "However, I need you to identify ONE region in this image that you would focus on when verifying it is normal. "
    "Choose a region where defects are most likely to occur or that typically requires careful inspection.\n"
    "Please output ONLY the normalized bounding box coordinates in the format:\n"
    "[x_min, y_min, x_max, y_max]\n"
    "All values must be between 0 and 1, representing proportions of the image dimensions:\n"
    "- x_min: left edge (0 = left, 1 = right)\n"
    "- y_min: top edge (0 = top, 1 = bottom)\n"
    "- x_max: right edge\n"
    "- y_max: bottom edge\n"
    "Example: [0.2, 0.3, 0.6, 0.7]\n"
    "Output ONLY the bbox coordinates, nothing else.";

inline constexpr std::string_view cot1_system =
    "You are a vision expert specialized in industrial anomaly detection.\n"
    "You will evaluate whether the given object image is normal or abnormal. You have access to both the original "
    "image and a region-of-interest (ROI) image that highlights potential anomaly areas. Explain why you need to "
    "examine this ROI region - what caught your attention in the original image that led you to focus on this area, "
    "but DO NOT mention the ROI image in your explanation.\n"
    "\n"
    "ATTENTION: GT ANSWER IS PROVIDED IN THE QUESTION, YOU SHOULD FOLLOW IT.";

inline constexpr std::string_view cot1_user_abnormal =
    "Ground Truth Information:\n"
    "- Class: {class_name}\n"
    "- Status: ABNORMAL (defective)\n"
    "- Specific anomaly type: {anomaly_type}\n"
    "\n"
    "IMPORTANT: Your analysis MUST align with the Ground Truth provided above. The object is confirmed to be ABNORMAL "
    "with the specific anomaly type {anomaly_type}. Please identify and describe the visual evidence that explain why "
    "you need to examine this ROI region.\n"
    "\n"
    "ROI normalized bbox: {bbox_coords}";

inline constexpr std::string_view cot1_user_normal =
    "Ground Truth Information:\n"
    "- Class: {class_name}\n"
    "- Status: NORMAL (no defects)\n"
    "\n"
    "IMPORTANT: Your analysis MUST align with the Ground Truth provided above. The object is confirmed to be NORMAL "
    "with no defects. Please identify and describe the visual evidence that explain why you need to examine this ROI "
    "region.\n"
    "\n"
    "ROI normalized bbox: {bbox_coords}";

inline constexpr std::string_view cot2_system =
    "You are a vision expert specialized in industrial anomaly detection.\n"
    "\n"
    "You will evaluate whether the given object image is normal or abnormal. You have access to both the original "
    "image and a region-of-interest (ROI) image that highlights potential anomaly areas. If abnormal, select the most "
    "fitting anomaly label from the candidate types provided by the user.\n"
    "Output format:\n"
    "<think>\n"
    "Explain your visual reasoning, considering both the original image and the ROI information.\n"
    "</think>\n"
    "<answer>\n"
    "{\"anomaly_present\": true/false, \"top_anomaly\": \"<label or 'none'>\", \"visual_descriptions\": [\"...\"]}\n"
    "</answer>\n"
    "\n"
    "Guidelines:\n"
    "- In <think>: Provide detailed analysis of what you observe in both images.\n"
    "- If normal \xE2\x86\x92 anomaly_present=false, top_anomaly=\"none\", visual_descriptions=[].\n"
    "- If abnormal \xE2\x86\x92 include concise visual phrases for visible cues.\n"
    "\n"
    "ATTENTION: GT ANSWER IS PROVIDED IN THE QUESTION, YOU SHOULD FOLLOW IT.";

inline constexpr std::string_view cot2_user_abnormal =
    "Ground Truth Information:\n"
    "- Class: {class_name}\n"
    "- Status: ABNORMAL (defective)\n"
    "- Specific anomaly type: {anomaly_type}\n"
    "\n"
    "IMPORTANT: Your analysis MUST align with the Ground Truth provided above. The object is confirmed to be ABNORMAL "
    "with the specific anomaly type {anomaly_type}. Please identify and describe the visual evidence that supports "
    "this classification.\n"
    "\n"
    "ROI normalized bbox: {bbox_coords}";

inline constexpr std::string_view cot2_user_normal =
    "Ground Truth Information:\n"
    "- Class: {class_name}\n"
    "- Status: NORMAL (no defects)\n"
    "\n"
    "IMPORTANT: Your analysis MUST align with the Ground Truth provided above. The object is confirmed to be NORMAL "
    "with no defects. Please confirm this by describing why the object appears normal and free from anomalies.\n"
    "\n"
    "ROI normalized bbox: {bbox_coords}";

inline constexpr std::string_view cot3_system =
    "You are an industrial anomaly analysis expert.\n"
    "\n"
    "You will review images of manufactured products and explain the visual evidence that supports the provided "
    "ground truth. Focus strictly on verifiable cues visible in the images. Describe contrasts between the target "
    "image (with ROI) and the normal reference.\n"
    "\n"
    "Do not output any final classification or prediction\xE2\x80\x94only deliver the reasoning narrative.";

inline constexpr std::string_view cot3_user =
    "Class: {cls}\n"
    "\n"
    "You will receive three images in order:\n"
    "(1) the full target image,\n"
    "(2) the cropped ROI highlighting a potential anomaly,\n"
    "(3) a normal reference image from the same class.\n"
    "\n"
    "Candidate anomaly types:{anomalies_str}\n"
    "Ground truth: the sample is {status}.\n"
    "Anomaly type: {anomaly_type}\n"
    "ROI normalized bbox: {bbox_coords}\n"
    "\n"
    "Explain the concrete visual cues within the ROI that deviate from the normal reference and justify the provided "
    "anomaly type.\n"
    "\n"
    "Describe only the reasoning process, using concise sentences or bullet points referencing observable evidence.";

} // namespace cot_prompts

/// Finds the first `[a, b, c, d]` group of four finite numbers in free text.
inline std::optional<BBox> scan_bracket_bbox(std::string_view text) {
    for (auto open = text.find('['); open != std::string_view::npos; open = text.find('[', open + 1)) {
        const auto close = text.find(']', open);
        if (close == std::string_view::npos) break;
        const auto j = nlohmann::json::parse(text.substr(open, close - open + 1), nullptr, false);
        if (j.is_discarded()) continue;
        try {
            const auto b = bbox_from_json(j);
            if (b.finite()) return b;
        } catch (const std::invalid_argument&) {
        }
    }
    return std::nullopt;
}

struct RoiProposal {
    BBox bbox;
    bool fallback = false;
    int attempts = 0;
};

inline constexpr BBox fallback_roi{0.25, 0.25, 0.75, 0.75};
inline constexpr int roi_attempts = 3;

/// Asks the endpoint for an inspection ROI on a normal sample. Replies that do not contain
/// a usable bbox are retried; after three failures the centered fallback box is used.
inline RoiProposal propose_normal_roi(const SampleRecord& sample, ChatEndpoint& endpoint, const RetryPolicy& retry = {}) {
    if (sample.anomalous()) throw ContractViolation("ROI proposal is for normal samples");
    ChatRequest req;
    req.sample_id = sample.id;
    req.messages.push_back({"user",
                            {ContentItem::make_image(sample.image_path),
                             ContentItem::make_text(substitute(std::string(cot_prompts::normal_roi_user), "class_name",
                                                               sample.class_name))},
                            false});
    RoiProposal out;
    for (out.attempts = 1; out.attempts <= roi_attempts; ++out.attempts) {
        if (auto b = scan_bracket_bbox(complete_with_retry(endpoint, req, retry))) {
            auto c = b->clamped();
            if (c.ordered() && c.area() > 0.0) {
                out.bbox = c;
                return out;
            }
        }
    }
    out.attempts = roi_attempts;
    out.bbox = fallback_roi;
    out.fallback = true;
    return out;
}

struct TrajectoryContext {
    std::filesystem::path workdir;
    const ExemplarIndex* exemplars = nullptr;
    std::map<std::string, std::vector<std::string>> anomaly_labels; // class -> candidate types
    RetryPolicy retry;
};

struct TrajectoryResult {
    std::optional<Trajectory> trajectory;
    std::vector<std::string> log;
};

namespace detail {

/// Text of the <think> blocks, or the whole reply (minus any answer block) when untagged.
inline std::string extract_reasoning(const std::string& reply) {
    const auto parsed = parse_assistant_turn(reply);
    if (!parsed.think_texts.empty()) return join(parsed.think_texts, "\n");
    auto text = reply;
    if (const auto p = text.find("<answer>"); p != std::string::npos) text.erase(p);
    return trim(text);
}

inline bool answer_matches_gt(const FinalAnswer& a, const SampleRecord& s) {
    if (a.anomaly_present != s.anomalous()) return false;
    return !s.anomalous() || labels_match(a.top_anomaly, *s.c_gt);
}

inline ChatRequest cot_request(const SampleRecord& s, std::string_view system, std::vector<ContentItem> images,
                               std::string user) {
    ChatRequest req;
    req.sample_id = s.id;
    req.messages.push_back(text_message("system", std::string(system)));
    images.push_back(ContentItem::make_text(std::move(user)));
    req.messages.push_back({"user", std::move(images), false});
    return req;
}

inline std::string fill_gt(std::string_view tmpl, const SampleRecord& s, const BBox& roi) {
    auto text = substitute(std::string(tmpl), "class_name", s.class_name);
    text = substitute(std::move(text), "anomaly_type", s.c_gt.value_or("none"));
    return substitute(std::move(text), "bbox_coords", format_bbox(roi));
}

} // namespace detail

/// Builds one SFT trajectory. Endpoint failures, or a CoT-2 answer that contradicts the
/// ground truth twice in a row, skip the sample (trajectory absent, reason in the log).
inline TrajectoryResult build_trajectory(SampleRecord sample, Taxonomy taxonomy, ChatEndpoint& endpoint,
                                         const TrajectoryContext& ctx) {
    TrajectoryResult result;
    try {
        sample.check();
        resolve_gt_bbox(sample);
        const auto labels_it = ctx.anomaly_labels.find(sample.class_name);
        if (labels_it == ctx.anomaly_labels.end() || labels_it->second.empty()) {
            throw ContractViolation("no candidate anomaly types for class " + sample.class_name);
        }
        const auto& labels = labels_it->second;
        if (taxonomy == Taxonomy::pz_cr && ctx.exemplars == nullptr) {
            throw ContractViolation("pz_cr trajectories need an exemplar index");
        }

        BBox roi;
        if (sample.anomalous()) {
            roi = *sample.gt_bbox;
        } else {
            const auto proposal = propose_normal_roi(sample, endpoint, ctx.retry);
            roi = proposal.bbox;
            if (proposal.fallback) result.log.push_back(sample.id + ": ROI proposal unparseable, using center box");
        }

        ToolWorkspace ws(ctx.workdir / sample.id, sample.image_path);
        const auto crop = crop_normalized(ws, roi, 1);
        const auto original_item = ContentItem::make_image(sample.image_path);
        const auto crop_item = ContentItem::make_image(crop.path);

        const auto cot1 = detail::extract_reasoning(complete_with_retry(
            endpoint,
            detail::cot_request(sample, cot_prompts::cot1_system, {original_item, crop_item},
                                detail::fill_gt(sample.anomalous() ? cot_prompts::cot1_user_abnormal
                                                                   : cot_prompts::cot1_user_normal,
                                                sample, roi)),
            ctx.retry));

        const auto cot2_req = detail::cot_request(
            sample, cot_prompts::cot2_system, {original_item, crop_item},
            detail::fill_gt(sample.anomalous() ? cot_prompts::cot2_user_abnormal : cot_prompts::cot2_user_normal, sample,
                            roi));
        std::string cot2;
        std::optional<FinalAnswer> generated;
        for (int attempt = 0;; ++attempt) {
            const auto reply = complete_with_retry(endpoint, cot2_req, ctx.retry);
            const auto parsed = parse_assistant_turn(reply);
            if (parsed.answer && !detail::answer_matches_gt(*parsed.answer, sample)) {
                if (attempt == 0) {
                    result.log.push_back(sample.id + ": CoT-2 answer contradicts ground truth, regenerating");
                    continue;
                }
                result.log.push_back(sample.id + ": CoT-2 answer contradicts ground truth twice, skipped");
                return result;
            }
            cot2 = detail::extract_reasoning(reply);
            generated = parsed.answer;
            break;
        }

        FinalAnswer answer = FinalAnswer::normal();
        if (sample.anomalous()) {
            answer.anomaly_present = true;
            answer.top_anomaly = *sample.c_gt;
            answer.visual_descriptions = generated && !generated->visual_descriptions.empty()
                                             ? generated->visual_descriptions
                                             : std::vector<std::string>{*sample.c_gt};
        }

        Trajectory t;
        t.sample = sample;
        t.taxonomy = taxonomy;
        t.roi_bbox = roi;
        const auto bundle = build_prompts(sample.class_name, labels, mode_for(taxonomy));
        t.turns.push_back(text_message("system", bundle.system_text));
        t.turns.push_back({"user", {original_item, ContentItem::make_text(bundle.user_text)}, false});
        t.turns.push_back(text_message("assistant", render_think(cot1) + "\n" + render_tool_call(ToolCall::crop(roi, 1))));
        t.turns.push_back({"tool", {crop_item}, false});

        if (taxonomy == Taxonomy::pz) {
            t.turns[2].supervised = true;
            t.turns.push_back(text_message("assistant", render_think(cot2) + "\n" + render_answer(answer)));
            t.turns.back().supervised = true;
        } else {
            const auto ref = retrieve_normal(ws, *ctx.exemplars, sample.class_name, sample.image_path);
            const auto ref_item = ContentItem::make_image(ref.path);
            t.turns.push_back(text_message("assistant", render_think(cot2) + "\n" + render_tool_call(ToolCall::query())));
            t.turns.back().supervised = true;
            t.turns.push_back({"tool", {ref_item}, false});

            auto cot3_user = substitute(std::string(cot_prompts::cot3_user), "cls", sample.class_name);
            cot3_user = substitute(std::move(cot3_user), "anomalies_str", prompts::format_anomaly_list(labels));
            cot3_user = substitute(std::move(cot3_user), "status", sample.anomalous() ? "ABNORMAL" : "NORMAL");
            cot3_user = detail::fill_gt(cot3_user, sample, roi);
            const auto cot3 = detail::extract_reasoning(complete_with_retry(
                endpoint,
                detail::cot_request(sample, cot_prompts::cot3_system, {original_item, crop_item, ref_item}, cot3_user),
                ctx.retry));
            t.turns.push_back(text_message("assistant", render_think(cot3) + "\n" + render_answer(answer)));
            t.turns.back().supervised = true;
        }
        result.trajectory = std::move(t);
    } catch (const EndpointError& e) {
        result.log.push_back(sample.id + ": endpoint failure, skipped: " + e.what());
    } catch (const ToolError& e) {
        result.log.push_back(sample.id + ": tool failure, skipped: " + e.what());
    } catch (const LoadError& e) {
        result.log.push_back(sample.id + ": load failure, skipped: " + e.what());
    }
    return result;
}

/// Invariant violations of a built trajectory; empty when it is well formed.
inline std::vector<std::string> check_trajectory(const Trajectory& t) {
    std::vector<std::string> problems;
    int last_tool_turn = -1, last_answer_turn = -1, crop_calls = 0, query_calls = 0, crop_tool_result = -1;
    int query_turn = -1;
    std::optional<FinalAnswer> final_answer;
    for (int i = 0; i < static_cast<int>(t.turns.size()); ++i) {
        const auto& turn = t.turns[static_cast<std::size_t>(i)];
        if (turn.role == "tool" && crop_calls > 0 && crop_tool_result < 0) crop_tool_result = i;
        if (turn.role != "assistant") {
            if (turn.supervised) problems.push_back("non-assistant turn " + std::to_string(i) + " is supervised");
            continue;
        }
        const auto parsed = parse_assistant_turn(turn.text());
        if (!parsed.format_valid) problems.push_back("assistant turn " + std::to_string(i) + " is not well formed");
        if (!parsed.tool_calls.empty()) {
            last_tool_turn = i;
            for (const auto& c : parsed.tool_calls) {
                if (c.is_crop()) {
                    ++crop_calls;
                } else {
                    ++query_calls;
                    query_turn = i;
                }
            }
        }
        if (parsed.answer) {
            last_answer_turn = i;
            final_answer = parsed.answer;
        }
    }
    int supervised = 0;
    for (int i = 0; i < static_cast<int>(t.turns.size()); ++i) {
        const bool should = i == last_tool_turn || i == last_answer_turn;
        const bool is = t.turns[static_cast<std::size_t>(i)].supervised;
        supervised += is;
        if (should != is) problems.push_back("turn " + std::to_string(i) + " has the wrong supervision flag");
    }
    if (supervised != 2) problems.push_back("expected exactly 2 supervised turns, found " + std::to_string(supervised));
    if (last_answer_turn != static_cast<int>(t.turns.size()) - 1) problems.push_back("trajectory must end with the answer");
    if (crop_calls < 1) problems.push_back("trajectory has no crop call");
    if (t.taxonomy == Taxonomy::pz && query_calls != 0) problems.push_back("pz trajectory calls query_image");
    if (t.taxonomy == Taxonomy::pz_cr) {
        if (query_calls != 1) problems.push_back("pz_cr trajectory must call query_image exactly once");
        else if (query_turn <= crop_tool_result || crop_tool_result < 0)
            problems.push_back("query_image must follow the crop result");
    }
    if (!final_answer) {
        problems.push_back("trajectory has no final answer");
    } else if (!detail::answer_matches_gt(*final_answer, t.sample)) {
        problems.push_back("final answer disagrees with ground truth");
    }
    return problems;
}

inline nlohmann::ordered_json to_json(const Trajectory& t) {
    nlohmann::ordered_json j;
    j["id"] = t.sample.id;
    j["dataset"] = to_string(t.sample.dataset);
    j["class"] = t.sample.class_name;
    j["label"] = to_string(t.sample.y_gt);
    j["anomaly_type"] = t.sample.c_gt ? nlohmann::ordered_json(*t.sample.c_gt) : nlohmann::ordered_json(nullptr);
    j["taxonomy"] = to_string(t.taxonomy);
    j["roi_bbox"] = to_json_array(t.roi_bbox);
    j["turns"] = nlohmann::ordered_json::array();
    for (const auto& turn : t.turns) j["turns"].push_back(to_json(turn));
    return j;
}

template <typename Json>
Trajectory trajectory_from_json(const Json& j) {
    Trajectory t;
    t.sample.id = j.at("id").template get<std::string>();
    t.sample.dataset = dataset_from_string(j.at("dataset").template get<std::string>());
    t.sample.class_name = j.at("class").template get<std::string>();
    t.sample.y_gt = label_from_string(j.at("label").template get<std::string>());
    if (!j.at("anomaly_type").is_null()) t.sample.c_gt = j["anomaly_type"].template get<std::string>();
    t.taxonomy = taxonomy_from_string(j.at("taxonomy").template get<std::string>());
    t.roi_bbox = bbox_from_json(j.at("roi_bbox"));
    for (const auto& turn : j.at("turns")) t.turns.push_back(message_from_json(turn));
    return t;
}

/// -sum of log p over supervised tokens.
inline double masked_sft_loss(std::span<const TokenScore> tokens) {
    double loss = 0.0;
    for (const auto& t : tokens) {
        if (t.supervised) loss -= t.logp_policy;
    }
    return loss;
}

} // namespace agentiad
