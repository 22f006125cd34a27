// SPDX-License-Identifier: Apache-2.0
#pragma once

// Objective-side GRPO math over externally supplied per-token log-probs:
// group-mean advantages, clipped surrogate, sampled-token KL estimate, and
// zero-advantage group filtering. No parameters are updated here.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "rewards.hpp"

namespace agentiad {

struct GrpoConfig {
    double epsilon = 0.2;
    double beta_kl = 0.1;
    int group_size = 8;
    bool normalize_std = true;

    void check() const {
        if (!(epsilon > 0.0 && epsilon < 1.0)) throw ContractViolation("epsilon must lie in (0,1)");
        if (group_size < 2) throw ContractViolation("group_size must be >= 2");
        if (!(beta_kl >= 0.0)) throw ContractViolation("beta_kl must be nonnegative");
    }
};

/// Log-probs of one sampled token under the policy and the reference, plus its loss-mask bit.
struct TokenScore {
    double logp_policy = 0.0;
    double logp_ref = 0.0;
    bool supervised = true;

    [[nodiscard]] double ratio() const { return std::exp(logp_policy - logp_ref); }
};

struct GroupEpisode {
    std::string episode_id;
    EpisodeSummary summary;
    RewardBreakdown reward;
    std::vector<TokenScore> tokens;
};

struct RolloutGroup {
    std::string group_id;
    std::vector<GroupEpisode> episodes;
    double query_rate = 0.0;
    std::vector<double> advantages;
    bool degraded = false;
};

inline constexpr double advantage_std_eps = 1e-8;
inline constexpr double zero_advantage_tol = 1e-9;

/// A_i = r_i - mean(r), optionally divided by (population std + 1e-8). A group whose
/// centered rewards all lie within 1e-9 of zero gets exact zeros.
inline std::vector<double> group_advantages(std::span<const double> rewards, bool normalize_std) {
    if (rewards.empty()) return {};
    const double n = static_cast<double>(rewards.size());
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
    std::vector<double> out(rewards.size());
    std::transform(rewards.begin(), rewards.end(), out.begin(), [mean](double r) { return r - mean; });
    const bool flat = std::all_of(out.begin(), out.end(), [](double a) { return std::abs(a) < zero_advantage_tol; });
    if (flat) {
        std::fill(out.begin(), out.end(), 0.0);
    } else if (normalize_std) {
        const double var = std::inner_product(out.begin(), out.end(), out.begin(), 0.0) / n;
        const double denom = std::sqrt(var) + advantage_std_eps;
        for (auto& a : out) a /= denom;
    }
    return out;
}

inline std::vector<double> group_rewards(const RolloutGroup& g) {
    std::vector<double> r;
    r.reserve(g.episodes.size());
    for (const auto& e : g.episodes) r.push_back(e.reward.total);
    return r;
}

inline void compute_advantages(RolloutGroup& g, const GrpoConfig& cfg) {
    const auto r = group_rewards(g);
    g.advantages = group_advantages(r, cfg.normalize_std);
}

inline double clipped_term(double ratio, double advantage, double epsilon) {
    if (!(ratio > 0.0)) throw ContractViolation("probability ratio must be positive");
    const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
    return std::min(ratio * advantage, clipped * advantage);
}

/// Mean over t of min(rho_t * A_t, clip(rho_t, 1-eps, 1+eps) * A_t).
inline double clipped_surrogate(std::span<const double> ratios, std::span<const double> advantages, double epsilon) {
    if (ratios.size() != advantages.size()) throw ContractViolation("ratios and advantages differ in length");
    if (ratios.empty()) throw ContractViolation("clipped surrogate needs at least one term");
    double sum = 0.0;
    for (std::size_t t = 0; t < ratios.size(); ++t) sum += clipped_term(ratios[t], advantages[t], epsilon);
    return sum / static_cast<double>(ratios.size());
}

/// r - log r - 1 with r = pi_ref / pi_theta at the sampled token; always >= 0.
inline double kl_estimate(const TokenScore& t) {
    const double log_r = t.logp_ref - t.logp_policy;
    return std::max(0.0, std::expm1(log_r) - log_r);
}

inline double kl_penalty(std::span<const TokenScore> tokens) {
    if (tokens.empty()) throw ContractViolation("kl penalty needs at least one token");
    double sum = 0.0;
    for (const auto& t : tokens) sum += kl_estimate(t);
    return sum / static_cast<double>(tokens.size());
}

/// Clipped surrogate minus beta_kl * KL, both averaged over every supervised token in
/// the group, with each episode's advantage broadcast to its tokens.
inline double grpo_objective(const RolloutGroup& g, const GrpoConfig& cfg) {
    if (g.advantages.size() != g.episodes.size()) throw ContractViolation("group advantages not computed");
    double surrogate = 0.0;
    double kl = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < g.episodes.size(); ++i) {
        for (const auto& tok : g.episodes[i].tokens) {
            if (!tok.supervised) continue;
            surrogate += clipped_term(tok.ratio(), g.advantages[i], cfg.epsilon);
            kl += kl_estimate(tok);
            ++count;
        }
    }
    if (count == 0) throw ContractViolation("group has no supervised tokens");
    return (surrogate - cfg.beta_kl * kl) / static_cast<double>(count);
}

/// Absent when the group's rewards are all equal within 1e-9, i.e. no learning signal.
/// Judged on mean-centered rewards so std normalization cannot inflate float noise.
inline std::optional<RolloutGroup> filter_zero_advantage(const RolloutGroup& g) {
    const auto centered = group_advantages(group_rewards(g), false);
    double max_abs = 0.0;
    for (double a : centered) max_abs = std::max(max_abs, std::abs(a));
    if (max_abs < zero_advantage_tol) return std::nullopt;
    return g;
}

/// Token scores side-file: one JSON object per line,
/// {"episode_id": ..., "tokens": [{"lp_policy": x, "lp_ref": y, "supervised": b}, ...]}.
inline std::map<std::string, std::vector<TokenScore>> load_token_scores(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open token scores " + path.string());
    std::map<std::string, std::vector<TokenScore>> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("episode_id") || !j.contains("tokens")) {
            throw LoadError("malformed token score record in " + path.string());
        }
        auto& tokens = out[j["episode_id"].get<std::string>()];
        for (const auto& t : j["tokens"]) {
            TokenScore s{t.at("lp_policy").get<double>(), t.at("lp_ref").get<double>(), t.value("supervised", true)};
            if (s.logp_policy > 0.0 || s.logp_ref > 0.0) throw LoadError("log-probabilities must be <= 0");
            tokens.push_back(s);
        }
    }
    return out;
}

} // namespace agentiad
