// SPDX-License-Identifier: Apache-2.0
#include <random>

#include <gtest/gtest.h>

#include <agentiad/rollout.hpp>
#include <agentiad/synthetic.hpp>

#include "test_util.hpp"

using namespace agentiad;
namespace fs = std::filesystem;

namespace {

struct Fixture {
    fs::path dir;
    std::vector<SampleRecord> samples;
    ExemplarIndex exemplars;
    std::map<std::string, std::vector<std::string>> labels;
    RolloutContext ctx;

    explicit Fixture(const std::string& tag) : dir(testutil::scratch_dir(tag)) {
        const auto bundle = synthetic::generate(dir / "data");
        samples = load_manifest(bundle.manifest);
        for (auto& s : samples) {
            if (s.mask_path) s.gt_bbox = read_gt(*s.mask_path);
        }
        exemplars = build_exemplar_index(bundle.exemplars);
        labels = candidate_labels(samples);
        ctx.exemplars = &exemplars;
        ctx.workdir = dir / "work";
        ctx.retry = {1, std::chrono::milliseconds(0)};
    }

    static BBox read_gt(const fs::path& mask) {
        const auto img = read_image(mask);
        int x0 = img.width, y0 = img.height, x1 = -1, y1 = -1;
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                if (img.at(x, y)[0] > 127) {
                    x0 = std::min(x0, x), y0 = std::min(y0, y), x1 = std::max(x1, x), y1 = std::max(y1, y);
                }
        return {x0 / double(img.width), y0 / double(img.height), (x1 + 1) / double(img.width), (y1 + 1) / double(img.height)};
    }

    const SampleRecord& defect() const {
        for (const auto& s : samples)
            if (s.anomalous()) return s;
        throw std::logic_error("no defect sample");
    }

    PromptBundle prompts(const SampleRecord& s, ToolMode m) const { return build_prompts(s.class_name, labels.at(s.class_name), m); }

    EpisodeRecord run(const SampleRecord& s, ToolMode m, ChatEndpoint& ep, const std::string& id = "ep") {
        ctx.endpoint = &ep;
        return run_episode(s, prompts(s, m), ctx, id);
    }
};

std::string crop_reply(BBox b, int target = 1) { return render_think("zoom") + render_tool_call(ToolCall::crop(b, target)); }
std::string query_reply() { return render_think("compare") + render_tool_call(ToolCall::query()); }
std::string answer_reply(const SampleRecord& s) { return render_think("done") + render_answer(synthetic::correct_answer(s)); }

} // namespace

TEST(Episode, CropThenAnswer) {
    Fixture f("roll-crop");
    const auto& s = f.defect();
    SequenceEndpoint ep({crop_reply(*s.gt_bbox), answer_reply(s)});
    const auto rec = f.run(s, ToolMode::pz_only, ep);
    EXPECT_EQ(rec.termination, Termination::answered);
    EXPECT_EQ(rec.executed_tools, std::vector<std::string>{"crop_image_normalized"});
    EXPECT_EQ(rec.turns.size(), 5u); // system, user, assistant, tool, assistant
    ASSERT_EQ(rec.turns[3].role, "tool");
    const auto& img = rec.turns[3].content.front();
    ASSERT_EQ(img.kind, ContentItem::Kind::image);
    EXPECT_EQ(img.path, f.ctx.workdir / "ep" / "crop_1.png");
    EXPECT_EQ(img.sha256, sha256_file(img.path));
    ASSERT_TRUE(rec.summary.pred_bbox.has_value());
    EXPECT_EQ(*rec.summary.pred_bbox, *s.gt_bbox);
    const auto r = score_episode(rec, 0.0, RewardCoefficients{});
    EXPECT_NEAR(r.r_iou, 1.0, 1e-12);
    EXPECT_NEAR(r.total, 2.3, 1e-9);
}

TEST(Episode, NestedCropComposesFrames) {
    Fixture f("roll-nested");
    const auto& s = f.defect();
    SequenceEndpoint ep({crop_reply({0.25, 0.25, 0.75, 0.75}), crop_reply({0, 0, 0.5, 0.5}, 2), answer_reply(s)});
    const auto rec = f.run(s, ToolMode::pz_only, ep);
    ASSERT_TRUE(rec.summary.pred_bbox.has_value());
    EXPECT_EQ(*rec.summary.pred_bbox, (BBox{0.25, 0.25, 0.5, 0.5}));
    EXPECT_EQ(read_image(f.ctx.workdir / "ep" / "crop_2.png").width, 16);
}

TEST(Episode, QueryBlockedInPzOnly) {
    Fixture f("roll-block");
    const auto& s = f.defect();
    SequenceEndpoint ep({query_reply(), answer_reply(s)});
    const auto rec = f.run(s, ToolMode::pz_only, ep);
    EXPECT_EQ(rec.termination, Termination::answered);
    EXPECT_TRUE(rec.executed_tools.empty());
    EXPECT_EQ(rec.tool_errors, 1);
    EXPECT_FALSE(rec.summary.used_query);
    EXPECT_EQ(rec.turns[3].role, "tool");
    EXPECT_EQ(rec.turns[3].text(), tool_unavailable_text);
}

TEST(Episode, QueryExecutesInPzCr) {
    Fixture f("roll-query");
    const auto& s = f.defect();
    SequenceEndpoint ep({crop_reply(*s.gt_bbox), query_reply(), answer_reply(s)});
    const auto rec = f.run(s, ToolMode::pz_cr, ep);
    EXPECT_EQ(rec.termination, Termination::answered);
    EXPECT_EQ(rec.executed_tools, (std::vector<std::string>{"crop_image_normalized", "query_image"}));
    EXPECT_TRUE(rec.summary.used_query);
    EXPECT_EQ(rec.turns[5].content.front().path, select_exemplar(f.exemplars, s.class_name, s.image_path));
}

TEST(Episode, AnswerOnly) {
    Fixture f("roll-answer");
    const auto& s = f.defect();
    SequenceEndpoint ep({answer_reply(s)});
    const auto rec = f.run(s, ToolMode::pz_only, ep);
    EXPECT_EQ(rec.termination, Termination::answered);
    EXPECT_EQ(rec.summary.steps.size(), 1u);
    EXPECT_FALSE(rec.summary.pred_bbox.has_value());
    EXPECT_EQ(score_episode(rec, 0.0, RewardCoefficients{}).r_iou, 0.0);
}

TEST(Episode, NudgeThenBudget) {
    Fixture f("roll-nudge");
    const auto& s = f.defect();
    SequenceEndpoint recover({"I think it is fine.", answer_reply(s)});
    const auto ok = f.run(s, ToolMode::pz_only, recover, "a");
    EXPECT_EQ(ok.termination, Termination::answered);
    EXPECT_EQ(ok.turns[3].text(), nudge_text);

    SequenceEndpoint prose({"prose"});
    const auto bad = f.run(s, ToolMode::pz_only, prose, "b");
    EXPECT_EQ(bad.termination, Termination::turn_budget_exceeded);
    EXPECT_EQ(bad.assistant_turns(), 2);

    SequenceEndpoint loop({crop_reply({0.1, 0.1, 0.9, 0.9})});
    const auto capped = f.run(s, ToolMode::pz_only, loop, "c");
    EXPECT_EQ(capped.termination, Termination::turn_budget_exceeded);
    EXPECT_EQ(capped.assistant_turns(), f.ctx.backend.max_turns);
}

TEST(Episode, EndpointError) {
    Fixture f("roll-dead");
    FailingEndpoint dead;
    const auto rec = f.run(f.defect(), ToolMode::pz_only, dead);
    EXPECT_EQ(rec.termination, Termination::endpoint_error);
    EXPECT_EQ(score_episode(rec, 0.0, RewardCoefficients{}).total, 0.0);

    f.ctx.endpoint = &dead;
    const auto& s = f.defect();
    const auto g = run_group(s, f.prompts(s, ToolMode::pz_only), f.ctx, 4, GroupOptions{});
    EXPECT_TRUE(g.group.degraded);
    EXPECT_FALSE(g.usable());
}

TEST(Group, HalfQueryRate) {
    Fixture f("roll-q");
    const auto& s = f.defect();
    ScriptedBackend ep;
    for (int e = 0; e < 4; ++e) {
        std::vector<std::string> replies{crop_reply(*s.gt_bbox)};
        if (e < 2) replies.push_back(query_reply());
        replies.push_back(answer_reply(s));
        for (std::size_t t = 0; t < replies.size(); ++t) ep.add(s.id, static_cast<int>(t), replies[t], e);
    }
    f.ctx.endpoint = &ep;
    const auto g = run_group(s, f.prompts(s, ToolMode::pz_cr), f.ctx, 4, GroupOptions{});
    EXPECT_DOUBLE_EQ(g.group.query_rate, 0.5);
    EXPECT_FALSE(g.filtered);
    // per-step means: (1 + 3 * 0.5 * (0.5 - 1)) / 3 and (1 + 2 * 0.5 * (0.5 - 1)) / 2
    EXPECT_NEAR(g.episodes[0].reward->r_beh, 0.25 / 3.0, 1e-12);
    EXPECT_NEAR(g.episodes[3].reward->r_beh, 0.25, 1e-12);
    EXPECT_LT(g.episodes[0].advantage, 0.0);
    EXPECT_GT(g.episodes[3].advantage, 0.0);
    EXPECT_EQ(g.episodes[2].episode_id, s.id + "-e2");
}

TEST(Group, IdenticalEpisodesFiltered) {
    Fixture f("roll-same");
    const auto& s = f.defect();
    auto ep = ScriptedBackend::from_file(f.dir / "data" / "script_pz_only.json");
    f.ctx.endpoint = &ep;
    const auto g = run_group(s, f.prompts(s, ToolMode::pz_only), f.ctx, 4, GroupOptions{});
    EXPECT_TRUE(g.filtered);
    for (const auto& e : g.episodes) {
        EXPECT_EQ(e.advantage, 0.0);
        EXPECT_NEAR(e.reward->total, 2.3, 1e-9);
    }
    GroupOptions keep;
    keep.zero_advantage_filtering = false;
    auto copy = g.episodes;
    score_group(copy, keep);
    EXPECT_FALSE(copy.front().filtered);
}

namespace {

/// Emits a random mix of crops, queries, answers and junk, deterministically per request.
class RandomAgent : public ChatEndpoint {
public:
    std::string complete(const ChatRequest& req) override {
        std::mt19937_64 rng(std::hash<std::string>{}(req.sample_id) ^ (static_cast<std::uint64_t>(req.episode_index) << 20) ^
                            static_cast<std::uint64_t>(req.assistant_turns()));
        switch (rng() % 5) {
        case 0:
        case 1: return query_reply();
        case 2: return crop_reply({0.1, 0.1, 0.6, 0.6}, 1);
        case 3: return query_reply() + render_tool_call(ToolCall::crop({0, 0, 1, 1}, 1));
        default: return rng() % 2 ? "junk" : render_answer(FinalAnswer::normal());
        }
    }
};

} // namespace

TEST(ModeSafety, PzOnlyNeverExecutesQuery) {
    Fixture f("roll-safety");
    RandomAgent agent;
    f.ctx.endpoint = &agent;
    int blocked = 0;
    for (int i = 0; i < 100; ++i) {
        const auto& s = f.samples[static_cast<std::size_t>(i) % f.samples.size()];
        const auto rec = run_episode(s, f.prompts(s, ToolMode::pz_only), f.ctx, "safe" + std::to_string(i), i);
        EXPECT_FALSE(rec.summary.used_query);
        for (const auto& t : rec.executed_tools) EXPECT_NE(t, "query_image");
        for (const auto& t : rec.turns) {
            for (const auto& c : t.content) {
                if (c.kind == ContentItem::Kind::image) {
                    EXPECT_EQ(c.path.string().find("references"), std::string::npos) << rec.episode_id;
                }
            }
        }
        blocked += rec.tool_errors;
    }
    EXPECT_GT(blocked, 0);
}

TEST(Jsonl, RoundTripAndGrouping) {
    Fixture f("roll-jsonl");
    auto ep = ScriptedBackend::from_file(f.dir / "data" / "script_pz_cr.json");
    f.ctx.endpoint = &ep;
    std::vector<EpisodeRecord> all;
    for (std::size_t i = 0; i < 3; ++i) {
        const auto& s = f.samples[i * 3];
        auto g = run_group(s, f.prompts(s, ToolMode::pz_cr), f.ctx, 2, GroupOptions{});
        for (auto& e : g.episodes) all.push_back(std::move(e));
    }
    write_episodes(f.dir / "eps.jsonl", all);
    const auto back = read_episodes(f.dir / "eps.jsonl");
    ASSERT_EQ(back.size(), all.size());
    for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(to_json(back[i]).dump(), to_json(all[i]).dump());
    const auto groups = group_episodes(back);
    ASSERT_EQ(groups.size(), 3u);
    EXPECT_EQ(groups[1].front().group_id, f.samples[3].id);
}
