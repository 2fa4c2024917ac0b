#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace dq {

// IEEE-754 doubles rendered in C99 hexadecimal notation ("0x1.8p-1").
// Parsing the rendered string yields the identical bit pattern.

std::string to_hex(double v);
double from_hex(const std::string& s);

nlohmann::json hex_array(const std::vector<double>& v);
std::vector<double> from_hex_array(const nlohmann::json& j);

/// Shortest decimal that parses back to the same double.
std::string shortest_decimal(double v);

}  // namespace dq
