#pragma once

#include <charconv>
#include <string>
#include <system_error>

namespace clab::detail {

// Shortest form that still carries 17 significant digits; locale independent.
inline std::string format_double(double value) {
  char buffer[64];
  auto [end, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value,
                                 std::chars_format::general, 17);
  if (ec != std::errc()) return "nan";
  return std::string(buffer, end);
}

}  // namespace clab::detail
