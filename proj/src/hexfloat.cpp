#include "dq/hexfloat.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>

#include "dq/error.hpp"

namespace dq {

std::string to_hex(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double from_hex(const std::string& s) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw InvalidInput("malformed hex float: " + s);
  return v;
}

nlohmann::json hex_array(const std::vector<double>& v) {
  auto out = nlohmann::json::array();
  for (double x : v) out.push_back(to_hex(x));
  return out;
}

std::vector<double> from_hex_array(const nlohmann::json& j) {
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& e : j) out.push_back(from_hex(e.get<std::string>()));
  return out;
}

std::string shortest_decimal(double v) {
  if (!std::isfinite(v)) return to_hex(v);
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace dq
