// SPDX-License-Identifier: Apache-2.0
#pragma once

// Perceptive Zoomer (normalized crop over the episode's image history) and
// Comparative Retriever (seeded same-class normal exemplar lookup).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "geometry.hpp"
#include "image.hpp"

namespace agentiad {

namespace fs = std::filesystem;

struct ImageRef {
    fs::path path;
    int width = 0;
    int height = 0;
    int index = 0; // 1-based position in the episode history

    friend bool operator==(const ImageRef&, const ImageRef&) = default;
};

inline ImageRef make_image_ref(const fs::path& path, int index) {
    const auto img = read_image(path);
    return {path, img.width, img.height, index};
}

inline constexpr int min_crop_px = 8;

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct PixelRect {
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;
    int y1 = 0;
    bool degenerate = false; // bbox had zero pixel area and was replaced by a centered window

    [[nodiscard]] int width() const noexcept { return x1 - x0; }
    [[nodiscard]] int height() const noexcept { return y1 - y0; }
    friend bool operator==(const PixelRect&, const PixelRect&) = default;
};

namespace detail {

inline int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

/// Grows [lo, hi) to at least min_crop_px around `center`, staying inside [0, extent).
inline void widen_span(int& lo, int& hi, double center, int extent) {
    if (hi - lo >= min_crop_px) return;
    const int size = std::min(min_crop_px, extent);
    lo = std::clamp(round_half_up(center - size / 2.0), 0, extent - size);
    hi = lo + size;
}

} // namespace detail

/// Maps a normalized bbox onto pixels of a width x height image: clamp to [0,1],
/// round half up, x2/y2 exclusive, every side at least min_crop_px (or the image extent).
inline PixelRect crop_rect(const BBox& requested, int width, int height) {
    if (width < 1 || height < 1) throw ContractViolation("image dimensions must be positive");
    BBox b = requested.clamped();
    if (b.x1 > b.x2) std::swap(b.x1, b.x2);
    if (b.y1 > b.y2) std::swap(b.y1, b.y2);
    PixelRect r{detail::round_half_up(b.x1 * width), detail::round_half_up(b.y1 * height),
                detail::round_half_up(b.x2 * width), detail::round_half_up(b.y2 * height), false};
    r.degenerate = r.width() <= 0 || r.height() <= 0;
    const double cx = (b.x1 + b.x2) / 2.0 * width;
    const double cy = (b.y1 + b.y2) / 2.0 * height;
    if (r.degenerate) {
        // Zero-area boxes become the full min-size window on both axes.
        r.x1 = r.x0;
        r.y1 = r.y0;
    }
    detail::widen_span(r.x0, r.x1, cx, width);
    detail::widen_span(r.y0, r.y1, cy, height);
    return r;
}

/// Per-episode tool state: the image history and the working directory crops are written to.
struct ToolWorkspace {
    fs::path workdir;
    std::vector<ImageRef> history;
    int crops_written = 0;
    std::vector<std::string> log;

    ToolWorkspace(fs::path dir, const fs::path& original) : workdir(std::move(dir)) {
        history.push_back(make_image_ref(original, 1));
    }

    [[nodiscard]] fs::path next_crop_path() const { return workdir / ("crop_" + std::to_string(crops_written + 1) + ".png"); }
};

/// Crops history[target-1], writes `<workdir>/crop_<k>.png` and appends it to the history.
inline ImageRef crop_normalized(ToolWorkspace& ws, const BBox& bbox, int target) {
    if (ws.history.empty()) throw ContractViolation("image history is empty");
    if (target < 1 || target > static_cast<int>(ws.history.size())) throw ToolError("bad image index");
    if (!bbox.finite()) throw ToolError("bbox coordinates must be finite");
    const auto& src_ref = ws.history[static_cast<std::size_t>(target - 1)];
    const auto src = read_image(src_ref.path);
    const auto rect = crop_rect(bbox, src.width, src.height);
    if (rect.degenerate) {
        ws.log.push_back("degenerate crop bbox " + format_bbox(bbox) + " expanded to a " +
                         std::to_string(rect.width()) + "x" + std::to_string(rect.height()) + " window");
    }
    const auto out_path = ws.next_crop_path();
    write_png(out_path, crop_pixels(src, rect.x0, rect.y0, rect.x1, rect.y1));
    ++ws.crops_written;
    ImageRef ref{out_path, rect.width(), rect.height(), static_cast<int>(ws.history.size()) + 1};
    ws.history.push_back(ref);
    return ref;
}

/// class name -> normal image paths, each list sorted lexicographically.
struct ExemplarIndex {
    std::map<std::string, std::vector<fs::path>> by_class;
    std::uint64_t seed = 0;
};

inline ExemplarIndex build_exemplar_index(const fs::path& manifest_path, std::uint64_t seed = 0) {
    std::ifstream in(manifest_path);
    if (!in) throw LoadError("cannot open exemplar manifest " + manifest_path.string());
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw LoadError("exemplar manifest " + manifest_path.string() + " is not a JSON object");
    }
    ExemplarIndex index;
    index.seed = seed;
    for (const auto& [cls, list] : j.items()) {
        if (!list.is_array()) throw LoadError("exemplar entry '" + cls + "' is not an array");
        auto& paths = index.by_class[cls];
        for (const auto& p : list) {
            if (!p.is_string()) throw LoadError("exemplar entry '" + cls + "' holds a non-string path");
            fs::path path(p.get<std::string>());
            if (path.is_relative()) path = manifest_path.parent_path() / path;
            if (!fs::exists(path)) throw LoadError("exemplar '" + p.get<std::string>() + "' of class '" + cls + "' does not exist");
            paths.push_back(path);
        }
        std::sort(paths.begin(), paths.end(), [](const fs::path& a, const fs::path& b) { return a.string() < b.string(); });
    }
    return index;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline bool same_file_path(const fs::path& a, const fs::path& b) {
    std::error_code ec1, ec2;
    const auto ca = fs::weakly_canonical(a, ec1);
    const auto cb = fs::weakly_canonical(b, ec2);
    if (ec1 || ec2) return a.lexically_normal() == b.lexically_normal();
    return ca == cb;
}

} // namespace detail

/// Path of the exemplar for `class_name`: a seeded start offset into the sorted list, then the
/// first entry that is not `exclude`. Pure in (index, class_name, exclude).
inline fs::path select_exemplar(const ExemplarIndex& index, const std::string& class_name, const fs::path& exclude) {
    const auto it = index.by_class.find(class_name);
    if (it == index.by_class.end() || it->second.empty()) throw ToolError("no exemplar for class");
    const auto& list = it->second;
    const auto start = detail::splitmix64(index.seed ^ detail::fnv1a(class_name)) % list.size();
    for (std::size_t k = 0; k < list.size(); ++k) {
        const auto& candidate = list[(start + k) % list.size()];
        if (!detail::same_file_path(candidate, exclude)) return candidate;
    }
    throw ToolError("no exemplar for class");
}

/// Retrieves the exemplar and appends it to the episode history.
inline ImageRef retrieve_normal(ToolWorkspace& ws, const ExemplarIndex& index, const std::string& class_name,
                                const fs::path& exclude) {
    auto ref = make_image_ref(select_exemplar(index, class_name, exclude), static_cast<int>(ws.history.size()) + 1);
    ws.history.push_back(ref);
    return ref;
}

} // namespace agentiad
