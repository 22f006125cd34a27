// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small deterministic inspection set for tests and demos: two classes, three normal
// and three defective 64x64 images each, binary defect masks, a pair of extra normal
// references per class, and always-correct scripts for the mock backend.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "image.hpp"
#include "protocol.hpp"

namespace agentiad::synthetic {

inline constexpr int image_size = 64;

struct DefectSpec {
    std::string type;
    std::array<int, 4> rect; // x0, y0, x1, y1 in pixels, exclusive ends
    std::array<std::uint8_t, 3> color;
};

struct ClassSpec {
    std::string name;
    std::vector<DefectSpec> defects;
};

inline const std::vector<ClassSpec>& classes() {
    static const std::vector<ClassSpec> specs{
        {"bottle",
         {{"broken_large", {16, 16, 32, 32}, {25, 22, 20}},
          {"contamination", {32, 24, 48, 40}, {200, 70, 40}},
          {"broken_large", {24, 40, 40, 56}, {25, 22, 20}}}},
        {"tile",
         {{"crack", {8, 24, 40, 32}, {40, 40, 40}},
          {"oil", {40, 8, 56, 24}, {120, 90, 30}},
          {"crack", {24, 32, 32, 56}, {40, 40, 40}}}},
    };
    return specs;
}

inline constexpr int normals_per_class = 3;
inline constexpr int references_per_class = 2;

namespace detail {

inline std::uint8_t clamp_u8(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

/// Base texture of a defect-free part; `variant` perturbs the noise only.
inline Image render_normal(const std::string& cls, std::uint32_t variant) {
    Image img(image_size, image_size, 3);
    std::mt19937 rng(0x5eed0000u ^ (variant * 2654435761u) ^ static_cast<std::uint32_t>(cls.size()));
    const int c = image_size / 2;
    for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
            std::array<int, 3> px{};
            if (cls == "bottle") {
                const int d2 = (x - c) * (x - c) + (y - c) * (y - c);
                if (d2 <= 26 * 26) {
                    const int shade = 40 - d2 / 20;
                    px = {120 + shade, 95 + shade, 55 + shade / 2};
                } else {
                    px = {20, 20, 26};
                }
            } else {
                const bool dark = ((x / 8) + (y / 8)) % 2 == 1;
                px = dark ? std::array<int, 3>{158, 156, 148} : std::array<int, 3>{182, 180, 170};
            }
            const int noise = static_cast<int>(rng() % 9) - 4;
            auto* out = img.at(x, y);
            for (int k = 0; k < 3; ++k) out[k] = clamp_u8(px[static_cast<std::size_t>(k)] + noise);
        }
    }
    return img;
}

inline void paint_defect(Image& img, Image& mask, const DefectSpec& d) {
    const auto [x0, y0, x1, y1] = d.rect;
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            auto* px = img.at(x, y);
            for (int k = 0; k < 3; ++k) px[k] = d.color[static_cast<std::size_t>(k)];
            *mask.at(x, y) = 255;
        }
    }
}

inline BBox rect_bbox(const std::array<int, 4>& r) {
    const double s = image_size;
    return {r[0] / s, r[1] / s, r[2] / s, r[3] / s};
}

inline std::string think(const std::string& text) { return render_think(text) + "\n"; }

} // namespace detail

/// Region the scripted agent zooms into: the defect itself, or the central area for normals.
inline BBox scripted_roi(const SampleRecord& s) { return s.gt_bbox ? *s.gt_bbox : BBox{0.25, 0.25, 0.75, 0.75}; }

inline FinalAnswer correct_answer(const SampleRecord& s) {
    if (!s.anomalous()) return FinalAnswer::normal();
    return {true, *s.c_gt, {"localized " + *s.c_gt + " in the zoomed region"}};
}

/// Always-correct replies for one sample, in turn order.
inline std::vector<std::string> correct_replies(const SampleRecord& s, ToolMode mode) {
    std::vector<std::string> out;
    out.push_back(detail::think("The " + s.class_name + " needs a closer look at one region before deciding.") +
                  render_tool_call(ToolCall::crop(scripted_roi(s), 1)));
    if (mode == ToolMode::pz_cr) {
        out.push_back(detail::think("Comparing against a normal " + s.class_name + " will settle the verdict.") +
                      render_tool_call(ToolCall::query()));
    }
    out.push_back(detail::think(s.anomalous() ? "The crop shows a clear " + *s.c_gt + "."
                                              : "The crop is consistent with a normal part.") +
                  render_answer(correct_answer(s)));
    return out;
}

inline nlohmann::ordered_json script_json(const std::vector<SampleRecord>& samples, ToolMode mode) {
    auto j = nlohmann::ordered_json::array();
    for (const auto& s : samples) {
        const auto replies = correct_replies(s, mode);
        for (std::size_t t = 0; t < replies.size(); ++t) {
            j.push_back({{"sample_id", s.id}, {"turn", t}, {"reply", replies[t]}});
        }
    }
    return j;
}

struct Bundle {
    std::vector<SampleRecord> samples; // paths relative to the bundle directory
    std::filesystem::path manifest;
    std::filesystem::path exemplars;
    std::filesystem::path script_pz_only;
    std::filesystem::path script_pz_cr;
    std::filesystem::path config;
};

/// Writes the full bundle under `dir`. Output is identical on every run.
inline Bundle generate(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    fs::create_directories(dir / "references");
    Bundle b;
    std::vector<SampleRecord> resolved; // scripts need the mask-derived boxes
    nlohmann::ordered_json exemplars = nlohmann::ordered_json::object();
    std::uint32_t variant = 0;
    for (const auto& cls : classes()) {
        for (int i = 0; i < normals_per_class; ++i) {
            const auto rel = "images/" + cls.name + "_good_" + std::to_string(i) + ".png";
            write_png(dir / rel, detail::render_normal(cls.name, ++variant));
            SampleRecord s;
            s.id = cls.name + "_good_" + std::to_string(i);
            s.class_name = cls.name;
            s.image_path = rel;
            b.samples.push_back(s);
            resolved.push_back(s);
        }
        for (std::size_t i = 0; i < cls.defects.size(); ++i) {
            const auto& d = cls.defects[i];
            const auto stem = cls.name + "_" + d.type + "_" + std::to_string(i);
            auto img = detail::render_normal(cls.name, ++variant);
            Image mask(image_size, image_size, 1);
            detail::paint_defect(img, mask, d);
            write_png(dir / ("images/" + stem + ".png"), img);
            write_png(dir / ("masks/" + stem + ".png"), mask);
            SampleRecord s;
            s.id = stem;
            s.class_name = cls.name;
            s.image_path = "images/" + stem + ".png";
            s.y_gt = Label::anomalous;
            s.c_gt = d.type;
            s.mask_path = "masks/" + stem + ".png";
            b.samples.push_back(s);
            s.gt_bbox = detail::rect_bbox(d.rect); // what a loader derives from the mask
            resolved.push_back(s);
        }
        auto& refs = exemplars[cls.name];
        refs = nlohmann::ordered_json::array();
        for (int i = 0; i < references_per_class; ++i) {
            const auto rel = "references/" + cls.name + "_ref_" + std::to_string(i) + ".png";
            write_png(dir / rel, detail::render_normal(cls.name, ++variant));
            refs.push_back(rel);
        }
    }

    b.manifest = dir / "manifest.jsonl";
    {
        std::ofstream out(b.manifest, std::ios::trunc);
        for (const auto& s : b.samples) out << to_json(s).dump() << '\n';
    }
    b.exemplars = dir / "exemplars.json";
    std::ofstream(b.exemplars, std::ios::trunc) << exemplars.dump(2) << '\n';

    b.script_pz_only = dir / "script_pz_only.json";
    std::ofstream(b.script_pz_only, std::ios::trunc) << script_json(resolved, ToolMode::pz_only).dump(2) << '\n';
    b.script_pz_cr = dir / "script_pz_cr.json";
    std::ofstream(b.script_pz_cr, std::ios::trunc) << script_json(resolved, ToolMode::pz_cr).dump(2) << '\n';

    nlohmann::ordered_json cfg;
    cfg["backend"] = {{"kind", "mock"},
                      {"model_name", "scripted-mock"},
                      {"script_path", "script_pz_only.json"},
                      {"max_in_flight", 4},
                      {"retry_attempts", 1},
                      {"retry_base_delay_ms", 0}};
    cfg["paths"] = {{"exemplar_manifest", "exemplars.json"}, {"workdir", "work"}};
    b.config = dir / "config.json";
    std::ofstream(b.config, std::ios::trunc) << cfg.dump(2) << '\n';
    return b;
}

} // namespace agentiad::synthetic
