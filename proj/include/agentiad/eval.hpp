// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "endpoint.hpp"
#include "errors.hpp"
#include "image.hpp"
#include "parallel.hpp"
#include "protocol.hpp"
#include "rollout.hpp"

namespace agentiad {

struct SampleOutcome {
    std::string dataset;
    std::string class_name;
    bool correct = false;
};

struct CategoryAccuracy {
    std::string dataset;
    std::string class_name;
    int correct = 0;
    int total = 0;
    double accuracy = 0.0; // percent
};

struct DatasetAccuracy {
    std::string dataset;
    int categories = 0;
    int samples = 0;
    double accuracy = 0.0; // unweighted mean over categories
};

struct EvalReport {
    std::string mode;
    std::string model;
    std::string config_fingerprint;
    std::vector<CategoryAccuracy> categories;
    std::vector<DatasetAccuracy> datasets;
    double overall = 0.0; // unweighted mean over datasets
    int samples = 0;
    int correct = 0;
    std::vector<std::string> endpoint_errors; // sample ids
};

namespace detail {

inline int dataset_rank(const std::string& name) {
    static const std::vector<std::string> order{"MVTec", "VisA", "LOCO", "GoodsAD", "synthetic"};
    const auto it = std::find(order.begin(), order.end(), name);
    return static_cast<int>(it - order.begin());
}

inline bool dataset_less(const std::string& a, const std::string& b) {
    const int ra = dataset_rank(a), rb = dataset_rank(b);
    return ra != rb ? ra < rb : a < b;
}

} // namespace detail

/// Category -> dataset -> overall, each level an unweighted mean of the level below.
inline void aggregate_accuracy(EvalReport& report, const std::vector<SampleOutcome>& outcomes) {
    std::map<std::pair<std::string, std::string>, std::pair<int, int>> per_cat;
    for (const auto& o : outcomes) {
        auto& [correct, total] = per_cat[{o.dataset, o.class_name}];
        correct += o.correct;
        ++total;
    }
    report.categories.clear();
    report.datasets.clear();
    for (const auto& [key, counts] : per_cat) {
        report.categories.push_back({key.first, key.second, counts.first, counts.second,
                                     100.0 * counts.first / counts.second});
    }
    std::stable_sort(report.categories.begin(), report.categories.end(),
                     [](const CategoryAccuracy& a, const CategoryAccuracy& b) {
                         if (a.dataset != b.dataset) return detail::dataset_less(a.dataset, b.dataset);
                         return a.class_name < b.class_name;
                     });
    for (const auto& c : report.categories) {
        if (report.datasets.empty() || report.datasets.back().dataset != c.dataset) report.datasets.push_back({c.dataset});
        auto& d = report.datasets.back();
        d.accuracy += c.accuracy;
        ++d.categories;
        d.samples += c.total;
    }
    double sum = 0.0;
    for (auto& d : report.datasets) {
        d.accuracy /= d.categories;
        sum += d.accuracy;
    }
    report.overall = report.datasets.empty() ? 0.0 : sum / static_cast<double>(report.datasets.size());
    report.samples = static_cast<int>(outcomes.size());
    report.correct = static_cast<int>(std::count_if(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.correct; }));
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["mode"] = r.mode;
    j["model"] = r.model;
    j["config_fingerprint"] = r.config_fingerprint;
    j["overall"] = r.overall;
    j["samples"] = r.samples;
    j["correct"] = r.correct;
    j["per_dataset"] = nlohmann::ordered_json::object();
    for (const auto& d : r.datasets) {
        j["per_dataset"][d.dataset] = {{"accuracy", d.accuracy}, {"categories", d.categories}, {"samples", d.samples}};
    }
    j["per_category"] = nlohmann::ordered_json::object();
    for (const auto& c : r.categories) {
        j["per_category"][c.dataset + "/" + c.class_name] = {
            {"accuracy", c.accuracy}, {"correct", c.correct}, {"total", c.total}};
    }
    j["endpoint_errors"] = r.endpoint_errors;
    return j;
}

namespace detail {

inline std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string pad(std::string s, std::size_t width, bool right) {
    if (s.size() >= width) return s;
    const std::string fill(width - s.size(), ' ');
    return right ? fill + s : s + fill;
}

inline std::string render_rows(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width;
    for (const auto& row : rows) {
        width.resize(std::max(width.size(), row.size()), 0);
        for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    }
    std::ostringstream out;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
            if (c) out << " | ";
            out << pad(rows[r][c], width[c], c > 0);
        }
        out << '\n';
        if (r == 0) {
            for (std::size_t c = 0; c < width.size(); ++c) out << (c ? "-+-" : "") << std::string(width[c], '-');
            out << '\n';
        }
    }
    return out.str();
}

} // namespace detail

/// Method | Tools | MVTec | VisA | LOCO | GoodsAD | Avg., then a per-category breakdown.
inline std::string render_table(const EvalReport& r) {
    std::vector<std::string> columns{"MVTec", "VisA", "LOCO", "GoodsAD"};
    for (const auto& d : r.datasets) {
        if (std::find(columns.begin(), columns.end(), d.dataset) == columns.end()) columns.push_back(d.dataset);
    }
    std::vector<std::vector<std::string>> summary{{"Method", "Tools"}};
    summary[0].insert(summary[0].end(), columns.begin(), columns.end());
    summary[0].push_back("Avg.");
    std::vector<std::string> row{r.model, r.mode == "pz_cr" ? "PZ+CR" : "PZ"};
    for (const auto& col : columns) {
        const auto it = std::find_if(r.datasets.begin(), r.datasets.end(), [&](const auto& d) { return d.dataset == col; });
        row.push_back(it == r.datasets.end() ? "--" : detail::fixed2(it->accuracy));
    }
    row.push_back(detail::fixed2(r.overall));
    summary.push_back(row);

    std::vector<std::vector<std::string>> cats{{"Dataset", "Category", "Correct", "Total", "Acc."}};
    for (const auto& c : r.categories) {
        cats.push_back({c.dataset, c.class_name, std::to_string(c.correct), std::to_string(c.total), detail::fixed2(c.accuracy)});
    }
    std::string out = detail::render_rows(summary) + "\n" + detail::render_rows(cats);
    out += "\nsamples " + std::to_string(r.samples) + ", correct " + std::to_string(r.correct) + ", endpoint errors " +
           std::to_string(r.endpoint_errors.size()) + ", config " + r.config_fingerprint + "\n";
    return out;
}

inline void write_report(const std::filesystem::path& dir, const EvalReport& r) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "report.json", std::ios::trunc) << to_json(r).dump(2) << '\n';
    std::ofstream(dir / "report.txt", std::ios::trunc) << render_table(r);
}

/// True iff the episode ended on an answer whose verdict matches the label.
inline bool episode_correct(const EpisodeRecord& e) {
    if (e.termination != Termination::answered) return false;
    for (auto it = e.turns.rbegin(); it != e.turns.rend(); ++it) {
        if (it->role == "assistant") return validate_answer(parse_assistant_turn(it->text()), e.sample);
    }
    return false;
}

struct EvalRun {
    EvalReport report;
    std::vector<EpisodeRecord> episodes;
};

/// One episode per sample, each scored as its own single-episode group.
inline EvalRun evaluate(const std::vector<SampleRecord>& samples, ToolMode mode, const RolloutContext& ctx,
                        const std::map<std::string, std::vector<std::string>>& anomaly_labels, const GroupOptions& opts,
                        const std::string& fingerprint = {}) {
    if (samples.empty()) throw ContractViolation("evaluation manifest is empty");
    EvalRun run;
    run.episodes.resize(samples.size());
    parallel_for(samples.size(), ctx.backend.max_in_flight, [&](std::size_t i) {
        const auto& s = samples[i];
        const auto labels = anomaly_labels.find(s.class_name);
        if (labels == anomaly_labels.end()) throw ContractViolation("no candidate anomaly types for class " + s.class_name);
        run.episodes[i] = run_episode(s, build_prompts(s.class_name, labels->second, mode), ctx, s.id, 0);
    });
    auto single = opts;
    single.zero_advantage_filtering = false;
    std::vector<SampleOutcome> outcomes;
    for (auto& e : run.episodes) {
        std::vector<EpisodeRecord> group{std::move(e)};
        score_group(group, single);
        e = std::move(group.front());
        outcomes.push_back({to_string(e.sample.dataset), e.sample.class_name, episode_correct(e)});
        if (e.termination == Termination::endpoint_error) run.report.endpoint_errors.push_back(e.sample.id);
    }
    run.report.mode = to_string(mode);
    run.report.model = ctx.backend.model_name;
    run.report.config_fingerprint = fingerprint;
    aggregate_accuracy(run.report, outcomes);
    return run;
}

// ---------------------------------------------------------------------------
// Replay

struct Divergence {
    std::string episode_id;
    std::string field;
    std::string detail;
};

struct ReplayFailure {
    std::string episode_id;
    std::string reason;
};

struct ReplayReport {
    std::size_t episodes = 0;
    std::vector<Divergence> divergences;
    std::vector<ReplayFailure> failures;
    std::vector<std::string> regenerated; // crop files restored from the re-execution

    [[nodiscard]] bool clean() const { return divergences.empty() && failures.empty(); }
};

/// Serves the assistant replies recorded in a transcript, in order.
class TranscriptEndpoint : public ChatEndpoint {
public:
    explicit TranscriptEndpoint(const std::vector<ChatMessage>& turns) {
        for (const auto& t : turns) {
            if (t.role == "assistant") replies_.push_back(t.text());
        }
    }

    std::string complete(const ChatRequest& request) override {
        const auto k = static_cast<std::size_t>(request.assistant_turns());
        if (k >= replies_.size()) throw EndpointError("transcript exhausted");
        return replies_[k];
    }

private:
    std::vector<std::string> replies_;
};

struct ReplayOptions {
    const ExemplarIndex* exemplars = nullptr;
    GroupOptions scoring;
    std::filesystem::path scratch = std::filesystem::temp_directory_path() / "agentiad-replay";
};

namespace detail {

inline void compare_turns(const EpisodeRecord& stored, const EpisodeRecord& fresh, ReplayReport& out) {
    const auto& id = stored.episode_id;
    if (stored.turns.size() != fresh.turns.size()) {
        out.divergences.push_back({id, "turns", "stored " + std::to_string(stored.turns.size()) + " turns, replay produced " +
                                                    std::to_string(fresh.turns.size())});
        return;
    }
    for (std::size_t i = 0; i < stored.turns.size(); ++i) {
        const auto& a = stored.turns[i];
        const auto& b = fresh.turns[i];
        const auto where = "turns[" + std::to_string(i) + "]";
        if (a.role != b.role || a.content.size() != b.content.size()) {
            out.divergences.push_back({id, where, "role or content layout differs"});
            continue;
        }
        for (std::size_t c = 0; c < a.content.size(); ++c) {
            const auto& x = a.content[c];
            const auto& y = b.content[c];
            if (x.kind != y.kind) {
                out.divergences.push_back({id, where, "content kind differs"});
            } else if (!x.is_image()) {
                if (x.text != y.text) out.divergences.push_back({id, where, "text differs"});
            } else if (x.sha256.empty()) {
                if (x.path != y.path) out.divergences.push_back({id, where, "image path differs"});
            } else {
                if (x.sha256 != y.sha256) {
                    out.divergences.push_back({id, where, "tool output hash " + y.sha256 + " != stored " + x.sha256});
                    continue;
                }
                if (!std::filesystem::exists(x.path)) {
                    std::filesystem::create_directories(x.path.parent_path());
                    std::filesystem::copy_file(y.path, x.path, std::filesystem::copy_options::overwrite_existing);
                    out.regenerated.push_back(x.path.string());
                } else if (sha256_file(x.path) != x.sha256) {
                    out.divergences.push_back({id, where, "stored crop file " + x.path.string() + " was modified"});
                }
            }
        }
    }
}

inline void compare_double(const std::string& id, const std::string& field, double stored, double fresh,
                           ReplayReport& out) {
    if (stored != fresh) {
        std::ostringstream msg;
        msg.precision(17);
        msg << "stored " << stored << ", recomputed " << fresh;
        out.divergences.push_back({id, field, msg.str()});
    }
}

} // namespace detail

/// Re-runs every stored transcript through the parser and tool executor, re-scores each
/// group, and reports any disagreement with the stored crops, summaries and rewards.
inline ReplayReport replay(const std::vector<EpisodeRecord>& stored, const ReplayOptions& opts) {
    ReplayReport out;
    out.episodes = stored.size();
    std::filesystem::remove_all(opts.scratch);
    for (const auto& group : group_episodes(stored)) {
        std::vector<EpisodeRecord> fresh_group;
        std::vector<const EpisodeRecord*> originals;
        for (const auto& rec : group) {
            if (!std::filesystem::exists(rec.sample.image_path)) {
                out.failures.push_back({rec.episode_id, "missing source image " + rec.sample.image_path.string()});
                continue;
            }
            if (rec.turns.size() < 2) {
                out.failures.push_back({rec.episode_id, "transcript lacks the prompt turns"});
                continue;
            }
            TranscriptEndpoint endpoint(rec.turns);
            RolloutContext ctx;
            ctx.endpoint = &endpoint;
            ctx.backend.max_turns = rec.max_turns;
            ctx.backend.temperature = 0.0;
            ctx.exemplars = opts.exemplars;
            ctx.workdir = opts.scratch;
            ctx.retry = {1, std::chrono::milliseconds(0)};
            PromptBundle prompts;
            prompts.system_text = rec.turns[0].text();
            prompts.user_text = rec.turns[1].text();
            prompts.mode = rec.mode;
            try {
                auto fresh = run_episode(rec.sample, prompts, ctx, rec.episode_id, rec.episode_index);
                fresh.group_id = rec.group_id;
                detail::compare_turns(rec, fresh, out);
                if (fresh.termination != rec.termination) {
                    out.divergences.push_back({rec.episode_id, "termination",
                                               "stored " + to_string(rec.termination) + ", replay " + to_string(fresh.termination)});
                }
                if (!(fresh.summary == rec.summary)) {
                    out.divergences.push_back({rec.episode_id, "summary", "episode summary differs"});
                }
                if (fresh.executed_tools != rec.executed_tools) {
                    out.divergences.push_back({rec.episode_id, "executed_tools", "executed tool list differs"});
                }
                fresh_group.push_back(std::move(fresh));
                originals.push_back(&rec);
            } catch (const std::exception& e) {
                out.failures.push_back({rec.episode_id, e.what()});
            }
        }
        if (fresh_group.size() != group.size()) continue; // cannot re-score a partial group
        auto scoring = opts.scoring;
        score_group(fresh_group, scoring);
        for (std::size_t i = 0; i < fresh_group.size(); ++i) {
            const auto& s = *originals[i];
            const auto& f = fresh_group[i];
            if (!s.reward) {
                out.divergences.push_back({s.episode_id, "reward", "stored record has no reward"});
                continue;
            }
            const auto& a = *s.reward;
            const auto& b = *f.reward;
            detail::compare_double(s.episode_id, "reward.r_acc", a.r_acc, b.r_acc, out);
            detail::compare_double(s.episode_id, "reward.r_iou", a.r_iou, b.r_iou, out);
            detail::compare_double(s.episode_id, "reward.r_type", a.r_type, b.r_type, out);
            detail::compare_double(s.episode_id, "reward.r_perc", a.r_perc, b.r_perc, out);
            detail::compare_double(s.episode_id, "reward.r_beh", a.r_beh, b.r_beh, out);
            detail::compare_double(s.episode_id, "reward.total", a.total, b.total, out);
            detail::compare_double(s.episode_id, "query_rate", s.query_rate, f.query_rate, out);
            detail::compare_double(s.episode_id, "advantage", s.advantage, f.advantage, out);
        }
    }
    std::filesystem::remove_all(opts.scratch);
    return out;
}

inline nlohmann::ordered_json to_json(const ReplayReport& r) {
    nlohmann::ordered_json j;
    j["episodes"] = r.episodes;
    j["divergences"] = nlohmann::ordered_json::array();
    for (const auto& d : r.divergences) j["divergences"].push_back({{"episode_id", d.episode_id}, {"field", d.field}, {"detail", d.detail}});
    j["failures"] = nlohmann::ordered_json::array();
    for (const auto& f : r.failures) j["failures"].push_back({{"episode_id", f.episode_id}, {"reason", f.reason}});
    j["regenerated"] = r.regenerated;
    return j;
}

} // namespace agentiad
