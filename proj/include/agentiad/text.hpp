// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace agentiad {

inline std::string trim(std::string_view s) {
    auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
    auto b = std::find_if_not(s.begin(), s.end(), is_space);
    auto e = std::find_if_not(s.rbegin(), std::string_view::reverse_iterator(b), is_space).base();
    return {b, e};
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

/// Case-insensitive equality after trimming both sides.
inline bool labels_match(std::string_view a, std::string_view b) { return to_lower(trim(a)) == to_lower(trim(b)); }

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

/// Replaces every `{key}` occurrence.
inline std::string substitute(std::string text, std::string_view key, std::string_view value) {
    const std::string needle = "{" + std::string(key) + "}";
    for (auto pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + value.size())) {
        text.replace(pos, needle.size(), value);
    }
    return text;
}

} // namespace agentiad
