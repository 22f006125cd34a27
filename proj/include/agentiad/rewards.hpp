// SPDX-License-Identifier: Apache-2.0
#pragma once

// Two-part verifiable reward: perception (accuracy, IoU, type) and behavior
// (stepwise correctness, CR diversity, tool-call efficiency).

#include <algorithm>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "errors.hpp"
#include "geometry.hpp"
#include "protocol.hpp"
#include "text.hpp"

namespace agentiad {

/// How the CR-diversity term is formed from the group query rate q.
enum class DiversityForm {
    query_rate_minus_one, // lambda2 * (q - 1)
    query_rate,           // lambda2 * q
};

struct RewardCoefficients {
    double alpha = 1.0;    // perception weight
    double beta_beh = 1.0; // behavior weight
    double lambda_type = 0.3;
    double lambda1 = 1.0;  // stepwise correctness
    double lambda2 = 0.5;  // CR diversity
    double lambda3 = 0.05; // tool-call efficiency
    double n_bar = 1.0;    // expected tool calls per step
    double iou_threshold = 0.5;
    double iou_reward_above_threshold = 1.0;
    DiversityForm diversity_form = DiversityForm::query_rate_minus_one;

    void check() const {
        for (double v : {alpha, beta_beh, lambda_type, lambda1, lambda2, lambda3, n_bar, iou_reward_above_threshold}) {
            if (!(v >= 0.0)) throw ContractViolation("reward coefficients must be nonnegative");
        }
        if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) throw ContractViolation("iou_threshold must lie in (0,1)");
    }
};

struct StepStat {
    int n_tool_calls = 0;
    /// Set when the step emitted an answer; true iff its verdict matched the ground truth.
    std::optional<bool> emitted_answer;

    friend bool operator==(const StepStat&, const StepStat&) = default;
};

struct EpisodeSummary {
    std::vector<StepStat> steps;
    std::optional<FinalAnswer> final_answer;
    std::optional<BBox> pred_bbox; // bbox of the last executed crop
    bool format_valid = false;
    bool used_query = false; // at least one query_image was executed

    friend bool operator==(const EpisodeSummary&, const EpisodeSummary&) = default;
};

struct RewardBreakdown {
    double r_acc = 0.0;
    double r_iou = 0.0;
    double r_type = 0.0;
    double r_perc = 0.0;
    double r_beh = 0.0;
    double total = 0.0;

    friend bool operator==(const RewardBreakdown&, const RewardBreakdown&) = default;
};

/// Intersection over union of two normalized boxes. Zero-area unions give 0.
inline double iou(const BBox& a, const BBox& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    if (uni <= 0.0) return 0.0;
    return std::clamp(inter / uni, 0.0, 1.0);
}

inline double accuracy_reward(const EpisodeSummary& summary, const SampleRecord& gt) {
    if (!summary.format_valid || !summary.final_answer) return 0.0;
    return summary.final_answer->anomaly_present == gt.anomalous() ? 1.0 : 0.0;
}

inline double iou_reward(const std::optional<BBox>& pred, const std::optional<BBox>& gt, const RewardCoefficients& c) {
    if (!pred || !gt) return 0.0;
    const double v = iou(*pred, *gt);
    return v > c.iou_threshold ? c.iou_reward_above_threshold : v;
}

inline double type_reward(const EpisodeSummary& summary, const SampleRecord& gt, const RewardCoefficients& c) {
    if (!gt.anomalous() || !gt.c_gt || !summary.final_answer) return 0.0;
    return labels_match(summary.final_answer->top_anomaly, *gt.c_gt) ? c.lambda_type : 0.0;
}

inline double diversity_term(double query_rate, const RewardCoefficients& c) {
    return c.diversity_form == DiversityForm::query_rate_minus_one ? c.lambda2 * (query_rate - 1.0)
                                                                   : c.lambda2 * query_rate;
}

/// Mean over steps of correctness + diversity - efficiency penalty. Steps without an
/// answer contribute nothing to the correctness term.
inline double behavior_reward(const EpisodeSummary& summary, double query_rate, const RewardCoefficients& c) {
    if (summary.steps.empty()) throw ContractViolation("episode must have at least one step");
    if (!(query_rate >= 0.0 && query_rate <= 1.0)) throw ContractViolation("query rate must lie in [0,1]");
    const double diversity = diversity_term(query_rate, c);
    double sum = 0.0;
    for (const auto& step : summary.steps) {
        const double correct = step.emitted_answer.value_or(false) ? 1.0 : 0.0;
        const double excess = std::max(0.0, static_cast<double>(step.n_tool_calls) - c.n_bar);
        sum += c.lambda1 * correct + diversity - c.lambda3 * excess;
    }
    return sum / static_cast<double>(summary.steps.size());
}

/// Group-level statistics the behavior reward depends on.
struct GroupStats {
    double query_rate = 0.0;
};

inline RewardBreakdown assemble_reward(double r_acc, double r_iou, double r_type, double r_beh,
                                       const RewardCoefficients& c) {
    RewardBreakdown r;
    r.r_acc = r_acc;
    r.r_iou = r_iou;
    r.r_type = r_type;
    r.r_perc = r_acc + r_iou + r_type;
    r.r_beh = r_beh;
    r.total = c.alpha * r.r_perc + c.beta_beh * r.r_beh;
    return r;
}

inline RewardBreakdown total_reward(const EpisodeSummary& summary, const SampleRecord& gt, const GroupStats& group,
                                    const RewardCoefficients& c) {
    return assemble_reward(accuracy_reward(summary, gt), iou_reward(summary.pred_bbox, gt.gt_bbox, c),
                           type_reward(summary, gt, c), behavior_reward(summary, group.query_rate, c), c);
}

inline nlohmann::ordered_json to_json(const RewardBreakdown& r) {
    nlohmann::ordered_json j;
    j["r_acc"] = r.r_acc;
    j["r_iou"] = r.r_iou;
    j["r_type"] = r.r_type;
    j["r_perc"] = r.r_perc;
    j["r_beh"] = r.r_beh;
    j["total"] = r.total;
    return j;
}

template <typename Json>
RewardBreakdown reward_from_json(const Json& j) {
    RewardBreakdown r;
    r.r_acc = j.at("r_acc").template get<double>();
    r.r_iou = j.at("r_iou").template get<double>();
    r.r_type = j.at("r_type").template get<double>();
    r.r_perc = j.at("r_perc").template get<double>();
    r.r_beh = j.at("r_beh").template get<double>();
    r.total = j.at("total").template get<double>();
    return r;
}

inline nlohmann::ordered_json to_json(const StepStat& s) {
    nlohmann::ordered_json j;
    j["n_tool_calls"] = s.n_tool_calls;
    j["answer_correct"] = s.emitted_answer ? nlohmann::ordered_json(*s.emitted_answer) : nlohmann::ordered_json(nullptr);
    return j;
}

inline nlohmann::ordered_json to_json(const EpisodeSummary& s) {
    nlohmann::ordered_json j;
    j["steps"] = nlohmann::ordered_json::array();
    for (const auto& step : s.steps) j["steps"].push_back(to_json(step));
    j["final_answer"] = s.final_answer ? to_json(*s.final_answer) : nlohmann::ordered_json(nullptr);
    j["pred_bbox"] = s.pred_bbox ? to_json_array(*s.pred_bbox) : nlohmann::ordered_json(nullptr);
    j["format_valid"] = s.format_valid;
    j["used_query"] = s.used_query;
    return j;
}

template <typename Json>
EpisodeSummary summary_from_json(const Json& j) {
    EpisodeSummary s;
    for (const auto& step : j.at("steps")) {
        StepStat st;
        st.n_tool_calls = step.at("n_tool_calls").template get<int>();
        if (!step.at("answer_correct").is_null()) st.emitted_answer = step["answer_correct"].template get<bool>();
        s.steps.push_back(st);
    }
    if (!j.at("final_answer").is_null()) {
        const auto& a = j["final_answer"];
        FinalAnswer fa;
        fa.anomaly_present = a.at("anomaly_present").template get<bool>();
        fa.top_anomaly = a.at("top_anomaly").template get<std::string>();
        fa.visual_descriptions = a.at("visual_descriptions").template get<std::vector<std::string>>();
        s.final_answer = fa;
    }
    if (!j.at("pred_bbox").is_null()) s.pred_bbox = bbox_from_json(j["pred_bbox"]);
    s.format_valid = j.at("format_valid").template get<bool>();
    s.used_query = j.value("used_query", false);
    return s;
}

} // namespace agentiad
