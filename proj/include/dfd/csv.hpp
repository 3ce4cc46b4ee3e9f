#pragma once

#include <string>
#include <vector>

namespace dfd {

/// Splits one comma-separated line; double-quoted fields may contain commas.
/// Fields never contain '"'. Trailing '\r' is ignored.
std::vector<std::string> parse_csv_line(const std::string& line);

/// Quotes a field containing a comma or newline; rejects '"'.
std::string csv_field(const std::string& s);

/// Shortest round-trip decimal form of a double.
std::string format_number(double v);

}  // namespace dfd
