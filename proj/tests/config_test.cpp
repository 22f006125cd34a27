// SPDX-License-Identifier: Apache-2.0
#include <fstream>

#include <gtest/gtest.h>

#include <agentiad/config.hpp>

#include "test_util.hpp"

using namespace agentiad;

TEST(Defaults, RewardCoefficients) {
    const AppConfig c;
    EXPECT_EQ(c.reward.alpha, 1.0);
    EXPECT_EQ(c.reward.beta_beh, 1.0);
    EXPECT_EQ(c.reward.lambda1, 1.0);
    EXPECT_EQ(c.reward.lambda2, 0.5);
    EXPECT_EQ(c.reward.diversity_form, DiversityForm::query_rate_minus_one);
    EXPECT_EQ(c.reward.lambda3, 0.05);
    EXPECT_EQ(c.reward.n_bar, 1.0);
    EXPECT_EQ(c.reward.iou_threshold, 0.5);
    EXPECT_EQ(c.reward.iou_reward_above_threshold, 1.0);
    EXPECT_EQ(c.reward.lambda_type, 0.3);
    EXPECT_EQ(c.type_reward_bonus, 0.1);
}

TEST(Defaults, GrpoTable) {
    const AppConfig c;
    EXPECT_EQ(c.grpo.objective.group_size, 8);
    EXPECT_EQ(c.grpo.replay_buffer_size, 128);
    EXPECT_EQ(c.grpo.optimizer, "AdamW");
    EXPECT_EQ(c.grpo.learning_rate, 1e-6);
    EXPECT_EQ(c.grpo.global_batch_size, 128);
    EXPECT_EQ(c.grpo.temperature, 1.0);
    EXPECT_EQ(c.grpo.objective.beta_kl, 0.1);
    EXPECT_EQ(c.grpo.objective.epsilon, 0.2);
    EXPECT_TRUE(c.grpo.zero_advantage_filtering);
    EXPECT_EQ(c.grpo.precision, "bfloat16");
    EXPECT_EQ(c.grpo.epochs, 3);
}

TEST(Defaults, SftTable) {
    const AppConfig c;
    EXPECT_EQ(c.sft.backbone, "Qwen2.5-VL-3B");
    EXPECT_TRUE(c.sft.frozen_visual_encoder);
    EXPECT_EQ(c.sft.learning_rate, 2e-5);
    EXPECT_EQ(c.sft.weight_decay, 0.01);
    EXPECT_EQ(c.sft.warmup_ratio, 0.05);
    EXPECT_EQ(c.sft.batch_size_per_gpu, 4);
    EXPECT_EQ(c.sft.gradient_accumulation, 4);
    EXPECT_EQ(c.sft.epochs, 20);
    EXPECT_EQ(c.eval.temperature, 0.0);
    EXPECT_EQ(c.trajectory.pz_cr_fraction, 0.07);
}

TEST(Json, RoundTripAndPartialOverride) {
    AppConfig c;
    c.reward.lambda_type = 0.1;
    c.reward.diversity_form = DiversityForm::query_rate;
    c.grpo.objective.group_size = 4;
    c.backend.model_name = "m";
    const auto back = config_from_json(nlohmann::json::parse(to_json(c).dump()));
    EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
    EXPECT_EQ(config_fingerprint(back), config_fingerprint(c));
    EXPECT_NE(config_fingerprint(c), config_fingerprint(AppConfig{}));
    EXPECT_EQ(config_fingerprint(AppConfig{}).size(), 16u);

    const auto partial = config_from_json(nlohmann::json::parse(R"({"reward": {"alpha": 2.0}})"));
    EXPECT_EQ(partial.reward.alpha, 2.0);
    EXPECT_EQ(partial.reward.lambda2, 0.5);
    EXPECT_EQ(partial.grpo.objective.group_size, 8);
}

TEST(File, RelativePathsResolveAgainstConfig) {
    const auto dir = testutil::scratch_dir("config");
    std::ofstream(dir / "c.json") << R"({"paths": {"exemplar_manifest": "ex.json"}, "backend": {"script_path": "s.json"}})";
    const auto c = load_config(dir / "c.json");
    EXPECT_EQ(c.paths.exemplar_manifest, (dir / "ex.json").string());
    EXPECT_EQ(c.backend.script_path, (dir / "s.json").string());
    save_config(dir / "out" / "saved.json", c);
    EXPECT_EQ(to_json(load_config(dir / "out" / "saved.json")).dump(), to_json(c).dump());
    std::ofstream(dir / "bad.json") << "[1, 2]";
    EXPECT_THROW(load_config(dir / "bad.json"), LoadError);
    EXPECT_THROW(load_config(dir / "none.json"), LoadError);
}

TEST(Validation, RejectsBadValues) {
    AppConfig c;
    EXPECT_NO_THROW(c.check());
    c.trajectory.pz_cr_fraction = 1.5;
    EXPECT_THROW(c.check(), ContractViolation);
    c = AppConfig{};
    c.eval.temperature = -1;
    EXPECT_THROW(c.check(), ContractViolation);
    EXPECT_THROW(diversity_form_from_string("q"), ContractViolation);
}
