#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace fedcast {

/// Shortest text that parses back to exactly `v`; "nan"/"inf" for non-finite.
std::string format_number(double v);
/// Parses a whole token as a double; nullopt when any character is left over.
std::optional<double> parse_number(std::string_view text);

}  // namespace fedcast
