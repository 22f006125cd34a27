// SPDX-License-Identifier: Apache-2.0
#pragma once

// Agent wire format: <think>…</think>, <tool_call>{JSON}</tool_call> and
// <answer>{JSON}</answer>, plus the system/user prompts for both tool modes.

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "errors.hpp"
#include "geometry.hpp"
#include "text.hpp"

namespace agentiad {

enum class ToolName { crop_image_normalized, query_image };

inline std::string to_string(ToolName n) {
    return n == ToolName::crop_image_normalized ? "crop_image_normalized" : "query_image";
}

struct ToolCall {
    ToolName name = ToolName::crop_image_normalized;
    std::optional<BBox> bbox;        // set iff crop
    std::optional<int> target_image; // set iff crop, 1-based

    static ToolCall crop(const BBox& b, int target = 1) { return {ToolName::crop_image_normalized, b, target}; }
    static ToolCall query() { return {ToolName::query_image, std::nullopt, std::nullopt}; }

    [[nodiscard]] bool is_crop() const noexcept { return name == ToolName::crop_image_normalized; }

    friend bool operator==(const ToolCall&, const ToolCall&) = default;
};

struct FinalAnswer {
    bool anomaly_present = false;
    std::string top_anomaly = "none";
    std::vector<std::string> visual_descriptions;

    static FinalAnswer normal() { return {}; }

    friend bool operator==(const FinalAnswer&, const FinalAnswer&) = default;
};

struct ParsedTurn {
    std::vector<std::string> think_texts;
    std::vector<ToolCall> tool_calls;
    std::optional<FinalAnswer> answer;
    bool format_valid = false;
    /// Number of <tool_call> blocks seen, including ones whose JSON failed to parse.
    int tool_call_blocks = 0;
    std::vector<std::string> diagnostics;
};

namespace detail {

struct TagSpec {
    std::string_view open;
    std::string_view close;
};

inline constexpr TagSpec think_tag{"<think>", "</think>"};
inline constexpr TagSpec tool_tag{"<tool_call>", "</tool_call>"};
inline constexpr TagSpec answer_tag{"<answer>", "</answer>"};

inline std::optional<ToolCall> parse_tool_json(const std::string& body, std::vector<std::string>& diags) {
    const auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) {
        diags.emplace_back("malformed tool_call JSON");
        return std::nullopt;
    }
    if (!j.is_object() || !j.contains("name") || !j["name"].is_string()) {
        diags.emplace_back("tool_call missing string 'name'");
        return std::nullopt;
    }
    const auto name = j["name"].get<std::string>();
    nlohmann::json args = nlohmann::json::object();
    if (j.contains("arguments")) {
        args = j["arguments"];
        if (!args.is_object()) {
            diags.emplace_back("tool_call 'arguments' is not an object");
            return std::nullopt;
        }
    }
    if (name == "query_image") {
        if (!args.empty()) {
            diags.emplace_back("query_image takes no arguments");
            return std::nullopt;
        }
        return ToolCall::query();
    }
    if (name != "crop_image_normalized") {
        diags.push_back("unknown tool '" + name + "'");
        return std::nullopt;
    }
    if (!args.contains("bbox_2d") || !args.contains("target_image")) {
        diags.emplace_back("crop_image_normalized requires bbox_2d and target_image");
        return std::nullopt;
    }
    BBox box;
    try {
        box = bbox_from_json(args["bbox_2d"]);
    } catch (const std::invalid_argument&) {
        diags.emplace_back("bbox_2d must be 4 numbers");
        return std::nullopt;
    }
    if (!box.valid()) {
        diags.emplace_back("bbox_2d requires x1<=x2 and y1<=y2");
        return std::nullopt;
    }
    const auto& t = args["target_image"];
    if (!t.is_number()) {
        diags.emplace_back("target_image must be a number");
        return std::nullopt;
    }
    const double tv = t.get<double>();
    if (!std::isfinite(tv) || tv != std::floor(tv) || tv < 1 || tv > 1e9) {
        diags.emplace_back("target_image must be a positive integer");
        return std::nullopt;
    }
    return ToolCall::crop(box, static_cast<int>(tv));
}

inline std::optional<FinalAnswer> parse_answer_json(const std::string& body, std::vector<std::string>& diags) {
    const auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        diags.emplace_back("malformed answer JSON");
        return std::nullopt;
    }
    if (!j.contains("anomaly_present") || !j["anomaly_present"].is_boolean()) {
        diags.emplace_back("answer missing boolean 'anomaly_present'");
        return std::nullopt;
    }
    if (!j.contains("top_anomaly") || !j["top_anomaly"].is_string()) {
        diags.emplace_back("answer missing string 'top_anomaly'");
        return std::nullopt;
    }
    if (!j.contains("visual_descriptions") || !j["visual_descriptions"].is_array()) {
        diags.emplace_back("answer missing array 'visual_descriptions'");
        return std::nullopt;
    }
    FinalAnswer a;
    a.anomaly_present = j["anomaly_present"].get<bool>();
    a.top_anomaly = j["top_anomaly"].get<std::string>();
    for (const auto& d : j["visual_descriptions"]) {
        if (!d.is_string()) {
            diags.emplace_back("visual_descriptions must hold strings");
            return std::nullopt;
        }
        a.visual_descriptions.push_back(d.get<std::string>());
    }
    const bool says_none = labels_match(a.top_anomaly, "none");
    if (!a.anomaly_present && (!says_none || !a.visual_descriptions.empty())) {
        diags.emplace_back("normal answer must have top_anomaly \"none\" and no visual_descriptions");
        return std::nullopt;
    }
    if (a.anomaly_present && (says_none || trim(a.top_anomaly).empty())) {
        diags.emplace_back("anomalous answer must name a label");
        return std::nullopt;
    }
    return a;
}

} // namespace detail

/// Never throws; malformed input yields format_valid=false with diagnostics.
inline ParsedTurn parse_assistant_turn(std::string_view text) {
    ParsedTurn turn;
    bool errors = false;
    int answer_blocks = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const detail::TagSpec* tag = nullptr;
        std::size_t open = std::string_view::npos;
        for (const auto* t : {&detail::think_tag, &detail::tool_tag, &detail::answer_tag}) {
            const auto p = text.find(t->open, pos);
            if (p < open) {
                open = p;
                tag = t;
            }
        }
        if (tag == nullptr) break;
        const auto body_start = open + tag->open.size();
        const auto close = text.find(tag->close, body_start);
        const bool terminated = close != std::string_view::npos;
        const std::string body(text.substr(body_start, terminated ? close - body_start : std::string_view::npos));
        pos = terminated ? close + tag->close.size() : text.size();

        if (tag == &detail::think_tag) {
            turn.think_texts.push_back(trim(body));
            if (!terminated) {
                turn.diagnostics.emplace_back("unterminated think block");
                errors = true;
            }
        } else if (tag == &detail::tool_tag) {
            ++turn.tool_call_blocks;
            if (!terminated) {
                turn.diagnostics.emplace_back("unterminated tool_call JSON");
                errors = true;
                continue;
            }
            if (auto call = detail::parse_tool_json(body, turn.diagnostics)) {
                turn.tool_calls.push_back(*call);
            } else {
                errors = true;
            }
        } else {
            ++answer_blocks;
            if (!terminated) {
                turn.diagnostics.emplace_back("unterminated answer JSON");
                errors = true;
                continue;
            }
            if (auto a = detail::parse_answer_json(body, turn.diagnostics)) {
                if (!turn.answer) turn.answer = std::move(a);
            } else {
                errors = true;
            }
        }
    }
    if (answer_blocks > 1) {
        turn.diagnostics.emplace_back("multiple answer blocks");
        errors = true;
    }
    if (turn.tool_call_blocks > 1) turn.diagnostics.emplace_back("multiple tool calls; only the first is executed");
    const bool has_call = turn.tool_call_blocks > 0;
    const bool has_answer = answer_blocks > 0;
    if (has_call && has_answer) turn.diagnostics.emplace_back("turn mixes tool_call and answer");
    if (!has_call && !has_answer) turn.diagnostics.emplace_back("no tool_call or answer");
    turn.format_valid = !errors && (has_call != has_answer);
    return turn;
}

inline nlohmann::ordered_json to_json(const ToolCall& call) {
    nlohmann::ordered_json j;
    j["name"] = to_string(call.name);
    nlohmann::ordered_json args = nlohmann::ordered_json::object();
    if (call.is_crop()) {
        args["bbox_2d"] = to_json_array(*call.bbox);
        args["target_image"] = *call.target_image;
    }
    j["arguments"] = std::move(args);
    return j;
}

/// Exact wire form; throws ContractViolation for calls that break the ToolCall invariants.
inline std::string render_tool_call(const ToolCall& call) {
    if (call.is_crop()) {
        if (!call.bbox || !call.target_image) throw ContractViolation("crop call needs bbox_2d and target_image");
        if (!call.bbox->valid()) throw ContractViolation("crop bbox requires x1<=x2 and y1<=y2");
        if (*call.target_image < 1) throw ContractViolation("target_image must be >= 1");
    } else if (call.bbox || call.target_image) {
        throw ContractViolation("query_image carries no arguments");
    }
    return "<tool_call>" + to_json(call).dump() + "</tool_call>";
}

inline nlohmann::ordered_json to_json(const FinalAnswer& a) {
    nlohmann::ordered_json j;
    j["anomaly_present"] = a.anomaly_present;
    j["top_anomaly"] = a.top_anomaly;
    j["visual_descriptions"] = a.visual_descriptions;
    return j;
}

/// Answer block in the spaced layout of the output-format instructions.
inline std::string render_answer(const FinalAnswer& a) {
    std::string out = "<answer>\n{\"anomaly_present\": ";
    out += a.anomaly_present ? "true" : "false";
    out += ", \"top_anomaly\": " + nlohmann::json(a.top_anomaly).dump() + ", \"visual_descriptions\": [";
    for (std::size_t i = 0; i < a.visual_descriptions.size(); ++i) {
        if (i) out += ", ";
        out += nlohmann::json(a.visual_descriptions[i]).dump();
    }
    out += "]}\n</answer>";
    return out;
}

inline std::string render_think(std::string_view text) { return "<think>\n" + trim(text) + "\n</think>"; }

inline bool validate_answer(const ParsedTurn& turn, const SampleRecord& gt) {
    return turn.format_valid && turn.answer && turn.answer->anomaly_present == gt.anomalous();
}

// ---------------------------------------------------------------------------
// Prompts

enum class ToolMode { pz_only, pz_cr };

inline std::string to_string(ToolMode m) { return m == ToolMode::pz_only ? "pz_only" : "pz_cr"; }

inline ToolMode tool_mode_from_string(const std::string& s) {
    if (s == "pz_only") return ToolMode::pz_only;
    if (s == "pz_cr") return ToolMode::pz_cr;
    throw ContractViolation("unknown tool mode '" + s + "'");
}

struct PromptBundle {
    std::string system_text;
    std::string user_text;
    ToolMode mode = ToolMode::pz_only;

    friend bool operator==(const PromptBundle&, const PromptBundle&) = default;
};

namespace prompts {

inline constexpr std::string_view crop_tool_signature =
    R"({"type": "function", "function": {"name": "crop_image_normalized", "description": "Zoom in on the image based on the bounding box coordinates.", "parameters": {"type": "object", "properties": {"bbox_2d": {"type": "array", "description": "normalized coordinates for bounding box of the region you want to zoom in. Values should be within [0.0,1.0].", "items": {"type": "number"}}, "target_image": {"type": "number", "description": "The index of the image to crop. Index from 1 to the number of images. Choose 1 to operate on original image."}}, "required": ["bbox_2d", "target_image"]}}})";

inline constexpr std::string_view query_tool_signature =
    R"({"type": "function", "function": {"name": "query_image", "description": "Retrieve a normal reference image of the same class for comparison. This function does not require any arguments.", "parameters": {"type": "object", "properties": {}, "required": []}}})";

inline constexpr std::string_view system_head =
    "You are a vision expert specialized in industrial anomaly detection.\n"
    "You will evaluate whether the given object image is normal or abnormal. If abnormal, select the most fitting "
    "anomaly label from the candidate types provided by the user.\n"
    "Output format:\n"
    "<think>\n"
    "Explain your visual reasoning.\n"
    "</think>\n"
    "<answer>\n"
    "{\"anomaly_present\": true/false, \"top_anomaly\": \"<label or 'none'>\", \"visual_descriptions\": [\"...\"]}\n"
    "</answer>\n"
    "If normal \xE2\x86\x92 anomaly_present=false, top_anomaly=\"none\", visual_descriptions=[].\n"
    "If abnormal \xE2\x86\x92 include concise visual phrases for visible cues.\n"
    "\n"
    "# Tools\n"
    "You may call function to assist with the user query.\n"
    "\n"
    "You are provided with function signatures within <tools></tools> XML tags:\n";

inline constexpr std::string_view call_instructions =
    "For each function call, return a json object with function name and arguments within <tool_call></tool_call> "
    "XML tags:\n"
    "<tool_call>\n"
    "{\"name\": <function-name>, \"arguments\": <args-json-object>}\n"
    "</tool_call>";

inline constexpr std::string_view user_pz_only =
    "Evaluate the following image from the class {class_name}.\n"
    "Candidate anomaly types:{anomaly_list}\n"
    "Determine if the object is normal or abnormal. Follow the instruction and we can look closer by "
    "`crop_image_normalized`.\n"
    "Reason with the visual information step by step, and output the final answer in the required XML format.";

inline constexpr std::string_view user_pz_cr =
    "Evaluate the following image from the class {class_name}.\n"
    "Candidate anomaly types:{anomaly_list}\n"
    "Determine if the object is normal or abnormal. Follow the instruction and we can look closer by "
    "`crop_image_normalized`.\n"
    "If, after inspecting the crop, the evidence is still insufficient, you may also call `query_image` to retrieve "
    "a normal reference image.\n"
    "\n"
    "Reason with the visual information step by step, and output the final answer in the required XML format.";

/// The candidate list follows the colon directly in the templates, hence the leading space.
inline std::string format_anomaly_list(const std::vector<std::string>& labels) { return " " + join(labels, ", "); }

} // namespace prompts

inline PromptBundle build_prompts(const std::string& class_name, const std::vector<std::string>& anomaly_labels,
                                  ToolMode mode) {
    if (anomaly_labels.empty()) throw ContractViolation("anomaly label list must be nonempty");
    PromptBundle out;
    out.mode = mode;
    std::string system(prompts::system_head);
    system += "<tools>\n";
    system += prompts::crop_tool_signature;
    std::string_view user_template;
    switch (mode) {
    case ToolMode::pz_only:
        system += "\n</tools>\n";
        user_template = prompts::user_pz_only;
        break;
    case ToolMode::pz_cr:
        system += "\n\n";
        system += prompts::query_tool_signature;
        system += "\n</tools>\n\n";
        user_template = prompts::user_pz_cr;
        break;
    default:
        throw ContractViolation("unknown tool mode");
    }
    system += prompts::call_instructions;
    out.system_text = std::move(system);
    out.user_text = substitute(substitute(std::string(user_template), "class_name", class_name), "anomaly_list",
                               prompts::format_anomaly_list(anomaly_labels));
    return out;
}

} // namespace agentiad
