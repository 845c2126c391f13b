#pragma once

#include <cmath>
#include <limits>
#include <string>

#include "json.hpp"

namespace knnlm {

/// JSON has no literal for non-finite doubles; perplexities of
/// retrieval-only configurations can be infinite when the ground truth is
/// never retrieved, so those serialize as strings.
inline nlohmann::json json_number(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

inline double number_from(const nlohmann::json& j) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    }
    throw std::invalid_argument("expected a number, got: " + j.dump());
}

}  // namespace knnlm
