// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "endpoint.hpp"
#include "errors.hpp"
#include "grpo.hpp"
#include "image.hpp"
#include "rewards.hpp"

namespace agentiad {

/// SFT hyperparameters. Recorded for provenance; nothing here trains a model.
struct SftSettings {
    std::string backbone = "Qwen2.5-VL-3B";
    bool frozen_visual_encoder = true;
    std::string optimizer = "AdamW";
    double learning_rate = 2e-5;
    double weight_decay = 0.01;
    double warmup_ratio = 0.05;
    std::string scheduler = "cosine";
    int batch_size_per_gpu = 4;
    int gradient_accumulation = 4;
    std::string precision = "bfloat16";
    bool gradient_checkpointing = true;
    bool flash_attention_2 = true;
    int epochs = 20;
};

/// GRPO training settings. The objective math reads epsilon/beta_kl/group_size/normalize_std;
/// the rest are recorded values.
struct GrpoSettings {
    GrpoConfig objective;
    int replay_buffer_size = 128;
    std::string optimizer = "AdamW";
    double learning_rate = 1e-6;
    int global_batch_size = 128;
    double temperature = 1.0;
    bool zero_advantage_filtering = true;
    std::string precision = "bfloat16";
    int epochs = 3;
};

struct EvalSettings {
    double temperature = 0.0;
};

struct TrajectorySettings {
    double pz_cr_fraction = 0.07; // 112 of 1600 SFT samples
    std::uint64_t seed = 0;
    SplitConfig split;
};

struct PathSettings {
    std::string exemplar_manifest;
    std::string workdir = "work";
};

struct AppConfig {
    RewardCoefficients reward;
    double type_reward_bonus = 0.1; // listed separately from lambda_type; recorded only
    GrpoSettings grpo;
    SftSettings sft;
    BackendConfig backend;
    EvalSettings eval;
    TrajectorySettings trajectory;
    PathSettings paths;

    void check() const {
        reward.check();
        grpo.objective.check();
        backend.check();
        if (!(trajectory.pz_cr_fraction >= 0.0 && trajectory.pz_cr_fraction <= 1.0)) {
            throw ContractViolation("pz_cr_fraction must lie in [0,1]");
        }
        if (!(eval.temperature >= 0.0) || !(grpo.temperature >= 0.0)) throw ContractViolation("temperature must be >= 0");
    }
};

inline std::string to_string(DiversityForm f) {
    return f == DiversityForm::query_rate_minus_one ? "query_rate_minus_one" : "query_rate";
}

inline DiversityForm diversity_form_from_string(const std::string& s) {
    if (s == "query_rate_minus_one") return DiversityForm::query_rate_minus_one;
    if (s == "query_rate") return DiversityForm::query_rate;
    throw ContractViolation("unknown diversity_form '" + s + "'");
}

inline nlohmann::ordered_json to_json(const RewardCoefficients& c) {
    nlohmann::ordered_json j;
    j["alpha"] = c.alpha;
    j["beta"] = c.beta_beh;
    j["lambda_type"] = c.lambda_type;
    j["lambda1"] = c.lambda1;
    j["lambda2"] = c.lambda2;
    j["diversity_form"] = to_string(c.diversity_form);
    j["lambda3"] = c.lambda3;
    j["expected_tool_usage"] = c.n_bar;
    j["iou_threshold"] = c.iou_threshold;
    j["iou_reward_above_threshold"] = c.iou_reward_above_threshold;
    return j;
}

/// Missing keys keep their defaults, so partial files are fine.
template <typename Json>
RewardCoefficients coefficients_from_json(const Json& j, RewardCoefficients c = {}) {
    c.alpha = j.value("alpha", c.alpha);
    c.beta_beh = j.value("beta", c.beta_beh);
    c.lambda_type = j.value("lambda_type", c.lambda_type);
    c.lambda1 = j.value("lambda1", c.lambda1);
    c.lambda2 = j.value("lambda2", c.lambda2);
    if (j.contains("diversity_form")) c.diversity_form = diversity_form_from_string(j["diversity_form"].template get<std::string>());
    c.lambda3 = j.value("lambda3", c.lambda3);
    c.n_bar = j.value("expected_tool_usage", c.n_bar);
    c.iou_threshold = j.value("iou_threshold", c.iou_threshold);
    c.iou_reward_above_threshold = j.value("iou_reward_above_threshold", c.iou_reward_above_threshold);
    c.check();
    return c;
}

inline nlohmann::ordered_json to_json(const AppConfig& c) {
    nlohmann::ordered_json j;
    j["reward"] = to_json(c.reward);
    j["reward"]["type_reward_bonus"] = c.type_reward_bonus;

    auto& g = j["grpo"];
    g["rollouts_per_prompt"] = c.grpo.objective.group_size;
    g["replay_buffer_size"] = c.grpo.replay_buffer_size;
    g["optimizer"] = c.grpo.optimizer;
    g["learning_rate"] = c.grpo.learning_rate;
    g["global_batch_size"] = c.grpo.global_batch_size;
    g["temperature"] = c.grpo.temperature;
    g["kl_coefficient"] = c.grpo.objective.beta_kl;
    g["clip_epsilon"] = c.grpo.objective.epsilon;
    g["zero_advantage_filtering"] = c.grpo.zero_advantage_filtering;
    g["normalize_advantage_std"] = c.grpo.objective.normalize_std;
    g["precision"] = c.grpo.precision;
    g["epochs"] = c.grpo.epochs;

    auto& s = j["sft"];
    s["backbone"] = c.sft.backbone;
    s["frozen_visual_encoder"] = c.sft.frozen_visual_encoder;
    s["optimizer"] = c.sft.optimizer;
    s["learning_rate"] = c.sft.learning_rate;
    s["weight_decay"] = c.sft.weight_decay;
    s["warmup_ratio"] = c.sft.warmup_ratio;
    s["scheduler"] = c.sft.scheduler;
    s["batch_size_per_gpu"] = c.sft.batch_size_per_gpu;
    s["gradient_accumulation"] = c.sft.gradient_accumulation;
    s["precision"] = c.sft.precision;
    s["gradient_checkpointing"] = c.sft.gradient_checkpointing;
    s["flash_attention_2"] = c.sft.flash_attention_2;
    s["epochs"] = c.sft.epochs;

    auto& b = j["backend"];
    b["kind"] = c.backend.kind;
    b["endpoint_url"] = c.backend.endpoint_url;
    b["model_name"] = c.backend.model_name;
    b["max_turns"] = c.backend.max_turns;
    b["timeout_s"] = c.backend.timeout_s;
    b["auth_env"] = c.backend.auth_env;
    b["script_path"] = c.backend.script_path;
    b["max_in_flight"] = c.backend.max_in_flight;
    b["requests_per_minute"] = c.backend.requests_per_minute;
    b["retry_attempts"] = c.backend.retry_attempts;
    b["retry_base_delay_ms"] = c.backend.retry_base_delay_ms;

    j["eval"]["temperature"] = c.eval.temperature;

    auto& t = j["trajectory"];
    t["pz_cr_fraction"] = c.trajectory.pz_cr_fraction;
    t["seed"] = c.trajectory.seed;
    t["train_fraction"] = c.trajectory.split.train_fraction;
    t["sft_share"] = c.trajectory.split.sft_share;
    t["split_seed"] = c.trajectory.split.seed;

    j["paths"]["exemplar_manifest"] = c.paths.exemplar_manifest;
    j["paths"]["workdir"] = c.paths.workdir;
    return j;
}

template <typename Json>
AppConfig config_from_json(const Json& j) {
    AppConfig c;
    const Json empty = Json::object();
    auto section = [&](const char* key) -> const Json& { return j.contains(key) ? j[key] : empty; };

    const auto& r = section("reward");
    c.reward = coefficients_from_json(r);
    c.type_reward_bonus = r.value("type_reward_bonus", c.type_reward_bonus);

    const auto& g = section("grpo");
    c.grpo.objective.group_size = g.value("rollouts_per_prompt", c.grpo.objective.group_size);
    c.grpo.replay_buffer_size = g.value("replay_buffer_size", c.grpo.replay_buffer_size);
    c.grpo.optimizer = g.value("optimizer", c.grpo.optimizer);
    c.grpo.learning_rate = g.value("learning_rate", c.grpo.learning_rate);
    c.grpo.global_batch_size = g.value("global_batch_size", c.grpo.global_batch_size);
    c.grpo.temperature = g.value("temperature", c.grpo.temperature);
    c.grpo.objective.beta_kl = g.value("kl_coefficient", c.grpo.objective.beta_kl);
    c.grpo.objective.epsilon = g.value("clip_epsilon", c.grpo.objective.epsilon);
    c.grpo.zero_advantage_filtering = g.value("zero_advantage_filtering", c.grpo.zero_advantage_filtering);
    c.grpo.objective.normalize_std = g.value("normalize_advantage_std", c.grpo.objective.normalize_std);
    c.grpo.precision = g.value("precision", c.grpo.precision);
    c.grpo.epochs = g.value("epochs", c.grpo.epochs);

    const auto& s = section("sft");
    c.sft.backbone = s.value("backbone", c.sft.backbone);
    c.sft.frozen_visual_encoder = s.value("frozen_visual_encoder", c.sft.frozen_visual_encoder);
    c.sft.optimizer = s.value("optimizer", c.sft.optimizer);
    c.sft.learning_rate = s.value("learning_rate", c.sft.learning_rate);
    c.sft.weight_decay = s.value("weight_decay", c.sft.weight_decay);
    c.sft.warmup_ratio = s.value("warmup_ratio", c.sft.warmup_ratio);
    c.sft.scheduler = s.value("scheduler", c.sft.scheduler);
    c.sft.batch_size_per_gpu = s.value("batch_size_per_gpu", c.sft.batch_size_per_gpu);
    c.sft.gradient_accumulation = s.value("gradient_accumulation", c.sft.gradient_accumulation);
    c.sft.precision = s.value("precision", c.sft.precision);
    c.sft.gradient_checkpointing = s.value("gradient_checkpointing", c.sft.gradient_checkpointing);
    c.sft.flash_attention_2 = s.value("flash_attention_2", c.sft.flash_attention_2);
    c.sft.epochs = s.value("epochs", c.sft.epochs);

    const auto& b = section("backend");
    c.backend.kind = b.value("kind", c.backend.kind);
    c.backend.endpoint_url = b.value("endpoint_url", c.backend.endpoint_url);
    c.backend.model_name = b.value("model_name", c.backend.model_name);
    c.backend.max_turns = b.value("max_turns", c.backend.max_turns);
    c.backend.timeout_s = b.value("timeout_s", c.backend.timeout_s);
    c.backend.auth_env = b.value("auth_env", c.backend.auth_env);
    c.backend.script_path = b.value("script_path", c.backend.script_path);
    c.backend.max_in_flight = b.value("max_in_flight", c.backend.max_in_flight);
    c.backend.requests_per_minute = b.value("requests_per_minute", c.backend.requests_per_minute);
    c.backend.retry_attempts = b.value("retry_attempts", c.backend.retry_attempts);
    c.backend.retry_base_delay_ms = b.value("retry_base_delay_ms", c.backend.retry_base_delay_ms);

    c.eval.temperature = section("eval").value("temperature", c.eval.temperature);

    const auto& t = section("trajectory");
    c.trajectory.pz_cr_fraction = t.value("pz_cr_fraction", c.trajectory.pz_cr_fraction);
    c.trajectory.seed = t.value("seed", c.trajectory.seed);
    c.trajectory.split.train_fraction = t.value("train_fraction", c.trajectory.split.train_fraction);
    c.trajectory.split.sft_share = t.value("sft_share", c.trajectory.split.sft_share);
    c.trajectory.split.seed = t.value("split_seed", c.trajectory.split.seed);

    const auto& p = section("paths");
    c.paths.exemplar_manifest = p.value("exemplar_manifest", c.paths.exemplar_manifest);
    c.paths.workdir = p.value("workdir", c.paths.workdir);

    c.check();
    return c;
}

/// Relative paths inside the file are taken relative to the file's directory.
inline AppConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open config " + path.string());
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw LoadError("config " + path.string() + " is not a JSON object");
    AppConfig c;
    try {
        c = config_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("config " + path.string() + ": " + e.what());
    }
    const auto base = path.parent_path();
    auto resolve = [&](std::string& p) {
        if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
    };
    resolve(c.paths.exemplar_manifest);
    resolve(c.backend.script_path);
    return c;
}

inline void save_config(const std::filesystem::path& path, const AppConfig& c) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw LoadError("cannot write " + path.string());
    out << to_json(c).dump(2) << '\n';
}

/// Short stable hash of the effective configuration.
inline std::string config_fingerprint(const AppConfig& c) { return sha256_hex(to_json(c).dump()).substr(0, 16); }

} // namespace agentiad
