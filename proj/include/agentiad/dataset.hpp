// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "geometry.hpp"

namespace agentiad {

enum class Label { normal, anomalous };
enum class DatasetName { MVTec, VisA, LOCO, GoodsAD, synthetic };

inline std::string to_string(Label l) { return l == Label::normal ? "normal" : "anomalous"; }

inline Label label_from_string(const std::string& s) {
    if (s == "normal") return Label::normal;
    if (s == "anomalous") return Label::anomalous;
    throw LoadError("unknown label '" + s + "'");
}

inline std::string to_string(DatasetName d) {
    switch (d) {
    case DatasetName::MVTec: return "MVTec";
    case DatasetName::VisA: return "VisA";
    case DatasetName::LOCO: return "LOCO";
    case DatasetName::GoodsAD: return "GoodsAD";
    case DatasetName::synthetic: return "synthetic";
    }
    return "synthetic";
}

inline DatasetName dataset_from_string(const std::string& s) {
    for (auto d : {DatasetName::MVTec, DatasetName::VisA, DatasetName::LOCO, DatasetName::GoodsAD, DatasetName::synthetic}) {
        if (to_string(d) == s) return d;
    }
    throw LoadError("unknown dataset '" + s + "'");
}

/// One dataset image with its ground truth.
struct SampleRecord {
    std::string id;
    DatasetName dataset = DatasetName::synthetic;
    std::string class_name;
    std::filesystem::path image_path;
    Label y_gt = Label::normal;
    std::optional<std::string> c_gt;
    std::optional<std::filesystem::path> mask_path;
    std::optional<BBox> gt_bbox;

    [[nodiscard]] bool anomalous() const noexcept { return y_gt == Label::anomalous; }

    /// Throws LoadError when the label/type/mask coupling is broken.
    void check() const {
        if (id.empty()) throw LoadError("sample without id");
        if (anomalous()) {
            if (!c_gt || c_gt->empty()) throw LoadError("anomalous sample " + id + " has no anomaly_type");
            if (!mask_path && !gt_bbox) throw LoadError("anomalous sample " + id + " has neither mask nor gt_bbox");
        } else if (c_gt) {
            throw LoadError("normal sample " + id + " carries an anomaly_type");
        }
        if (gt_bbox && !gt_bbox->valid()) throw LoadError("sample " + id + " has an invalid gt_bbox");
    }
};

inline nlohmann::ordered_json to_json(const SampleRecord& s) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["dataset"] = to_string(s.dataset);
    j["class"] = s.class_name;
    j["image"] = s.image_path.string();
    j["label"] = to_string(s.y_gt);
    j["anomaly_type"] = s.c_gt ? nlohmann::ordered_json(*s.c_gt) : nlohmann::ordered_json(nullptr);
    j["mask"] = s.mask_path ? nlohmann::ordered_json(s.mask_path->string()) : nlohmann::ordered_json(nullptr);
    j["gt_bbox"] = s.gt_bbox ? to_json_array(*s.gt_bbox) : nlohmann::ordered_json(nullptr);
    return j;
}

/// Relative paths are resolved against base_dir.
template <typename Json>
SampleRecord sample_from_json(const Json& j, const std::filesystem::path& base_dir = {}) {
    auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
    };
    SampleRecord s;
    try {
        s.id = j.at("id").template get<std::string>();
        s.dataset = dataset_from_string(j.value("dataset", std::string("synthetic")));
        s.class_name = j.at("class").template get<std::string>();
        s.image_path = resolve(j.at("image").template get<std::string>());
        s.y_gt = label_from_string(j.at("label").template get<std::string>());
        if (j.contains("anomaly_type") && !j["anomaly_type"].is_null()) s.c_gt = j["anomaly_type"].template get<std::string>();
        if (j.contains("mask") && !j["mask"].is_null()) s.mask_path = resolve(j["mask"].template get<std::string>());
        if (j.contains("gt_bbox") && !j["gt_bbox"].is_null()) s.gt_bbox = bbox_from_json(j["gt_bbox"]);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("malformed sample record: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw LoadError(std::string("malformed sample record: ") + e.what());
    }
    s.check();
    return s;
}

/// Reads a JSONL manifest of sample records. Blank lines are skipped; relative paths become
/// absolute, resolved against the manifest's directory.
inline std::vector<SampleRecord> load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open manifest " + path.string());
    std::vector<SampleRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw LoadError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        out.push_back(sample_from_json(j, std::filesystem::absolute(path).lexically_normal().parent_path()));
    }
    return out;
}

/// Candidate anomaly labels per class: the sorted set of anomaly types seen in the samples.
inline std::map<std::string, std::vector<std::string>> candidate_labels(const std::vector<SampleRecord>& samples) {
    std::map<std::string, std::set<std::string>> seen;
    for (const auto& s : samples) {
        auto& set = seen[s.class_name];
        if (s.c_gt) set.insert(*s.c_gt);
    }
    std::map<std::string, std::vector<std::string>> out;
    for (auto& [cls, set] : seen) out[cls] = {set.begin(), set.end()};
    return out;
}

struct SplitConfig {
    double train_fraction = 0.2;
    // 1,600 of the 1,966 training samples go to SFT, the rest to GRPO.
    double sft_share = 1600.0 / 1966.0;
    std::uint64_t seed = 0;
};

struct ManifestSplit {
    std::vector<SampleRecord> sft;
    std::vector<SampleRecord> grpo;
    std::vector<SampleRecord> eval;
};

/// Seeded shuffle, then train/eval cut and SFT/GRPO cut of the training part.
inline ManifestSplit split_manifest(std::vector<SampleRecord> samples, const SplitConfig& cfg) {
    if (cfg.train_fraction < 0 || cfg.train_fraction > 1 || cfg.sft_share < 0 || cfg.sft_share > 1) {
        throw ContractViolation("split fractions must lie in [0,1]");
    }
    std::mt19937_64 rng(cfg.seed);
    for (std::size_t i = samples.size(); i > 1; --i) {
        std::swap(samples[i - 1], samples[rng() % i]);
    }
    const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * samples.size()));
    const auto n_sft = static_cast<std::size_t>(std::llround(cfg.sft_share * n_train));
    ManifestSplit out;
    out.sft.assign(samples.begin(), samples.begin() + n_sft);
    out.grpo.assign(samples.begin() + n_sft, samples.begin() + n_train);
    out.eval.assign(samples.begin() + n_train, samples.end());
    return out;
}

} // namespace agentiad
