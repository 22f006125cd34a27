// SPDX-License-Identifier: Apache-2.0
// Command-line front end: trajectories, rollouts, scoring, objective, evaluation, replay.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <unistd.h>

#include <CLI11.hpp>

#include <agentiad/agentiad.hpp>

namespace fs = std::filesystem;
using namespace agentiad;

namespace {

struct Common {
    std::string config;
    std::string exemplars;
    std::string script;
    std::string workdir;
    std::string labels;
};

AppConfig load_app_config(const Common& c) {
    AppConfig cfg = c.config.empty() ? AppConfig{} : load_config(c.config);
    if (!c.exemplars.empty()) cfg.paths.exemplar_manifest = c.exemplars;
    if (!c.script.empty()) cfg.backend.script_path = c.script;
    if (!c.workdir.empty()) cfg.paths.workdir = c.workdir;
    return cfg;
}

std::vector<SampleRecord> load_samples(const std::string& manifest) {
    auto samples = load_manifest(manifest);
    for (auto& s : samples) resolve_gt_bbox(s);
    return samples;
}

std::map<std::string, std::vector<std::string>> load_labels(const Common& c, const std::vector<SampleRecord>& samples) {
    if (c.labels.empty()) return candidate_labels(samples);
    std::ifstream in(c.labels);
    if (!in) throw LoadError("cannot open labels file " + c.labels);
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw LoadError("labels file must map class names to label lists");
    return j.get<std::map<std::string, std::vector<std::string>>>();
}

std::optional<ExemplarIndex> load_exemplars(const AppConfig& cfg) {
    if (cfg.paths.exemplar_manifest.empty()) return std::nullopt;
    return build_exemplar_index(cfg.paths.exemplar_manifest, cfg.trajectory.seed);
}

/// "mock" selects the scripted backend (or `mock_text` for trajectory building); anything
/// else is taken as a chat-completions URL.
std::shared_ptr<ChatEndpoint> make_endpoint(AppConfig& cfg, const std::string& endpoint, bool mock_text = false) {
    if (!endpoint.empty() && endpoint != "mock") {
        cfg.backend.kind = "openai";
        cfg.backend.endpoint_url = endpoint;
    } else if (endpoint == "mock") {
        cfg.backend.kind = "mock";
    }
    std::shared_ptr<ChatEndpoint> inner;
    if (cfg.backend.kind == "openai") {
        inner = std::make_shared<OpenAiChatEndpoint>(cfg.backend);
    } else if (mock_text) {
        inner = std::make_shared<MockTextEndpoint>();
    } else {
        if (cfg.backend.script_path.empty()) throw ContractViolation("mock backend needs --script or backend.script_path");
        inner = std::make_shared<ScriptedBackend>(ScriptedBackend::from_file(cfg.backend.script_path));
    }
    return std::make_shared<ThrottledEndpoint>(inner, cfg.backend.max_in_flight, cfg.backend.requests_per_minute);
}

GroupOptions group_options(const AppConfig& cfg) {
    return {cfg.reward, cfg.grpo.objective, cfg.grpo.zero_advantage_filtering};
}

nlohmann::ordered_json score_line(const EpisodeRecord& e) {
    nlohmann::ordered_json j;
    j["episode_id"] = e.episode_id;
    j["group_id"] = e.group_id;
    j["sample_id"] = e.sample.id;
    const auto reward = to_json(e.reward.value_or(RewardBreakdown{}));
    for (const auto& [k, v] : reward.items()) j[k] = v;
    j["query_rate"] = e.query_rate;
    j["advantage"] = e.advantage;
    j["filtered"] = e.filtered;
    j["degraded"] = e.degraded;
    return j;
}

int cmd_build_trajectories(const Common& common, const std::string& manifest, const std::string& taxonomy,
                           const std::string& endpoint_arg, const std::string& out_path) {
    auto cfg = load_app_config(common);
    const auto samples = load_samples(manifest);
    const auto exemplars = load_exemplars(cfg);
    auto endpoint = make_endpoint(cfg, endpoint_arg, true);
    TrajectoryContext ctx;
    ctx.workdir = fs::path(cfg.paths.workdir) / "trajectories";
    ctx.exemplars = exemplars ? &*exemplars : nullptr;
    ctx.anomaly_labels = load_labels(common, samples);
    ctx.retry = retry_policy_for(cfg.backend);

    std::vector<TrajectoryResult> results(samples.size());
    parallel_for(samples.size(), cfg.backend.max_in_flight, [&](std::size_t i) {
        const auto t = taxonomy == "mixed"
                           ? choose_taxonomy(samples[i].id, cfg.trajectory.pz_cr_fraction, cfg.trajectory.seed)
                           : taxonomy_from_string(taxonomy);
        results[i] = build_trajectory(samples[i], t, *endpoint, ctx);
    });
    if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
    std::ofstream out(out_path, std::ios::trunc);
    int written = 0, skipped = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        for (const auto& line : results[i].log) std::cerr << samples[i].id << ": " << line << '\n';
        if (!results[i].trajectory) {
            ++skipped;
            continue;
        }
        out << to_json(*results[i].trajectory).dump() << '\n';
        ++written;
    }
    std::cout << "trajectories written " << written << ", skipped " << skipped << '\n';
    return 0;
}

int cmd_rollout(const Common& common, const std::string& manifest, const std::string& mode_arg, int group_size,
                const std::string& endpoint_arg, const std::string& out_path) {
    auto cfg = load_app_config(common);
    if (group_size > 0) cfg.grpo.objective.group_size = group_size;
    cfg.grpo.objective.check();
    cfg.backend.temperature = cfg.grpo.temperature;
    const auto mode = tool_mode_from_string(mode_arg);
    const auto samples = load_samples(manifest);
    const auto labels = load_labels(common, samples);
    const auto exemplars = load_exemplars(cfg);
    auto endpoint = make_endpoint(cfg, endpoint_arg);
    RolloutContext ctx{endpoint.get(), cfg.backend, exemplars ? &*exemplars : nullptr, fs::path(cfg.paths.workdir) / "rollout",
                       retry_policy_for(cfg.backend)};

    std::vector<EpisodeRecord> all;
    int filtered = 0, degraded = 0;
    for (const auto& s : samples) {
        const auto it = labels.find(s.class_name);
        if (it == labels.end()) throw ContractViolation("no candidate anomaly types for class " + s.class_name);
        auto g = run_group(s, build_prompts(s.class_name, it->second, mode), ctx, cfg.grpo.objective.group_size,
                           group_options(cfg));
        filtered += g.filtered;
        degraded += g.group.degraded;
        for (auto& e : g.episodes) all.push_back(std::move(e));
    }
    write_episodes(out_path, all);
    std::cout << "groups " << samples.size() << ", episodes " << all.size() << ", filtered " << filtered
              << ", degraded " << degraded << '\n';
    return 0;
}

int cmd_score(const Common& common, const std::string& episodes_path, const std::string& coeffs_path,
              const std::string& out_path) {
    auto cfg = load_app_config(common);
    if (!coeffs_path.empty()) {
        std::ifstream in(coeffs_path);
        if (!in) throw LoadError("cannot open coefficients " + coeffs_path);
        const auto j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw LoadError("coefficients file is not a JSON object");
        cfg.reward = coefficients_from_json(j.contains("reward") ? j["reward"] : j);
    }
    const auto opts = group_options(cfg);
    std::ostringstream lines;
    std::size_t n = 0;
    for (auto& group : group_episodes(read_episodes(episodes_path))) {
        score_group(group, opts);
        for (const auto& e : group) {
            lines << score_line(e).dump() << '\n';
            ++n;
        }
    }
    if (out_path.empty()) {
        std::cout << lines.str();
    } else {
        if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
        std::ofstream(out_path, std::ios::trunc) << lines.str();
        std::cout << "scored " << n << " episodes\n";
    }
    return 0;
}

int cmd_grpo_objective(const Common& common, const std::string& groups_path, const std::string& scores_path) {
    const auto cfg = load_app_config(common);
    const auto tokens = load_token_scores(scores_path);
    double sum = 0.0;
    int used = 0;
    for (auto& episodes : group_episodes(read_episodes(groups_path))) {
        auto group = score_group(episodes, group_options(cfg));
        nlohmann::ordered_json line;
        line["group_id"] = group.group_id;
        const bool filtered = !episodes.empty() && episodes.front().filtered;
        if (group.degraded || filtered) {
            line["skipped"] = group.degraded ? "degraded" : "zero_advantage";
            std::cout << line.dump() << '\n';
            continue;
        }
        for (auto& ep : group.episodes) {
            const auto it = tokens.find(ep.episode_id);
            if (it == tokens.end()) throw LoadError("no token scores for episode " + ep.episode_id);
            ep.tokens = it->second;
        }
        const double obj = grpo_objective(group, cfg.grpo.objective);
        line["objective"] = obj;
        std::cout << line.dump() << '\n';
        sum += obj;
        ++used;
    }
    nlohmann::ordered_json total;
    total["groups_used"] = used;
    total["mean_objective"] = used ? sum / used : 0.0;
    std::cout << total.dump() << '\n';
    return 0;
}

int cmd_eval(const Common& common, const std::string& manifest, const std::string& mode_arg,
             const std::string& endpoint_arg, const std::string& report_dir) {
    auto cfg = load_app_config(common);
    cfg.backend.temperature = cfg.eval.temperature;
    const auto mode = tool_mode_from_string(mode_arg);
    const auto samples = load_samples(manifest);
    const auto labels = load_labels(common, samples);
    const auto exemplars = load_exemplars(cfg);
    auto endpoint = make_endpoint(cfg, endpoint_arg);
    RolloutContext ctx{endpoint.get(), cfg.backend, exemplars ? &*exemplars : nullptr,
                       fs::path(report_dir) / "crops", retry_policy_for(cfg.backend)};
    const auto run = evaluate(samples, mode, ctx, labels, group_options(cfg), config_fingerprint(cfg));
    write_report(report_dir, run.report);
    write_episodes(fs::path(report_dir) / "episodes.jsonl", run.episodes);
    std::cout << render_table(run.report);
    return 0;
}

int cmd_replay(const Common& common, const std::string& episodes_path) {
    const auto cfg = load_app_config(common);
    const auto exemplars = load_exemplars(cfg);
    ReplayOptions opts;
    opts.exemplars = exemplars ? &*exemplars : nullptr;
    opts.scoring = group_options(cfg);
    opts.scratch = fs::temp_directory_path() / ("agentiad-replay-" + std::to_string(::getpid()));
    const auto report = replay(read_episodes(episodes_path), opts);
    std::cout << to_json(report).dump(2) << '\n';
    std::cout << "episodes " << report.episodes << ", divergences " << report.divergences.size() << ", failures "
              << report.failures.size() << '\n';
    return report.clean() ? 0 : 1;
}

int cmd_make_synthetic(const std::string& out_dir) {
    const auto b = synthetic::generate(out_dir);
    std::cout << "wrote " << b.samples.size() << " samples to " << b.manifest.string() << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Agentic inspection harness"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--config", common.config, "JSON configuration file")->check(CLI::ExistingFile);
    app.add_option("--exemplars", common.exemplars, "normal exemplar manifest (overrides config)");
    app.add_option("--script", common.script, "mock backend script (overrides config)");
    app.add_option("--workdir", common.workdir, "directory for crops (overrides config)");
    app.add_option("--labels", common.labels, "JSON map of class -> candidate anomaly types");

    std::string manifest, taxonomy = "pz", endpoint, out, mode = "pz_only", episodes, coeffs, groups, token_scores,
                                         report;
    int group_size = 0;

    auto* bt = app.add_subcommand("build-trajectories", "build SFT trajectories");
    bt->add_option("--manifest", manifest)->required();
    bt->add_option("--taxonomy", taxonomy)->check(CLI::IsMember({"pz", "pz_cr", "mixed"}));
    bt->add_option("--endpoint", endpoint, "mock or a chat-completions URL")->default_val("mock");
    bt->add_option("--out", out)->required();

    auto* ro = app.add_subcommand("rollout", "run K-episode rollout groups");
    ro->add_option("--manifest", manifest)->required();
    ro->add_option("--mode", mode)->check(CLI::IsMember({"pz_only", "pz_cr"}));
    ro->add_option("--group-size", group_size);
    ro->add_option("--endpoint", endpoint, "mock or a chat-completions URL");
    ro->add_option("--out", out)->required();

    auto* sc = app.add_subcommand("score", "recompute rewards and advantages");
    sc->add_option("--episodes", episodes)->required();
    sc->add_option("--coeffs", coeffs, "reward coefficients JSON");
    sc->add_option("--out", out);

    auto* go = app.add_subcommand("grpo-objective", "evaluate the GRPO objective per group");
    go->add_option("--groups", groups)->required();
    go->add_option("--token-scores", token_scores)->required();

    auto* ev = app.add_subcommand("eval", "evaluate one episode per sample");
    ev->add_option("--manifest", manifest)->required();
    ev->add_option("--mode", mode)->check(CLI::IsMember({"pz_only", "pz_cr"}));
    ev->add_option("--endpoint", endpoint, "mock or a chat-completions URL");
    ev->add_option("--report", report)->required();

    auto* rp = app.add_subcommand("replay", "re-execute stored episodes and compare");
    rp->add_option("--episodes", episodes)->required();

    auto* ms = app.add_subcommand("make-synthetic", "write the synthetic demo set");
    ms->add_option("--out", out)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*bt) return cmd_build_trajectories(common, manifest, taxonomy, endpoint, out);
        if (*ro) return cmd_rollout(common, manifest, mode, group_size, endpoint, out);
        if (*sc) return cmd_score(common, episodes, coeffs, out);
        if (*go) return cmd_grpo_objective(common, groups, token_scores);
        if (*ev) return cmd_eval(common, manifest, mode, endpoint, report);
        if (*rp) return cmd_replay(common, episodes);
        if (*ms) return cmd_make_synthetic(out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
