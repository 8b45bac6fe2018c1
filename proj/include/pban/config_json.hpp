#pragma once

#include "json.hpp"
#include "pban/model.hpp"

namespace pban {

// Field names mirror PbanConfig members. Missing fields keep their defaults.
void to_json(nlohmann::json& j, const PbanConfig& c);
void from_json(const nlohmann::json& j, PbanConfig& c);

}  // namespace pban
