// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>

#include <nlohmann/json.hpp>

namespace agentiad {

/// Axis-aligned box in normalized image coordinates, (x1, y1) top-left, (x2, y2) bottom-right.
struct BBox {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;

    [[nodiscard]] bool finite() const noexcept {
        return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2);
    }
    [[nodiscard]] bool ordered() const noexcept { return x1 <= x2 && y1 <= y2; }
    [[nodiscard]] bool valid() const noexcept { return finite() && ordered(); }
    [[nodiscard]] double width() const noexcept { return x2 - x1; }
    [[nodiscard]] double height() const noexcept { return y2 - y1; }
    [[nodiscard]] double area() const noexcept { return std::max(0.0, width()) * std::max(0.0, height()); }

    [[nodiscard]] BBox clamped() const noexcept {
        auto c = [](double v) { return std::max(0.0, std::min(1.0, v)); };
        return {c(x1), c(y1), c(x2), c(y2)};
    }

    [[nodiscard]] std::array<double, 4> as_array() const noexcept { return {x1, y1, x2, y2}; }

    friend bool operator==(const BBox&, const BBox&) = default;
};

inline nlohmann::ordered_json to_json_array(const BBox& b) {
    return nlohmann::ordered_json::array({b.x1, b.y1, b.x2, b.y2});
}

template <typename Json>
BBox bbox_from_json(const Json& j) {
    if (!j.is_array() || j.size() != 4) {
        throw std::invalid_argument("bbox must be an array of 4 numbers");
    }
    for (const auto& v : j) {
        if (!v.is_number()) throw std::invalid_argument("bbox must be an array of 4 numbers");
    }
    return {j[0].template get<double>(), j[1].template get<double>(), j[2].template get<double>(),
            j[3].template get<double>()};
}

/// Human-facing "[x1, y1, x2, y2]" rendering used inside prompt text.
inline std::string format_bbox(const BBox& b, int decimals = 3) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "[%.*f, %.*f, %.*f, %.*f]", decimals, b.x1, decimals, b.y1, decimals,
                  b.x2, decimals, b.y2);
    return buf;
}

} // namespace agentiad
