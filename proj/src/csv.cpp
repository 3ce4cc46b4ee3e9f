#include "dfd/csv.hpp"

#include "dfd/config_fields.hpp"

#include <boost/tokenizer.hpp>

#include <charconv>
#include <cmath>

namespace dfd {

std::vector<std::string> parse_csv_line(const std::string& line) {
  std::string body = line;
  if (!body.empty() && body.back() == '\r') body.pop_back();
  // No escape character, so backslashes in Windows paths survive.
  boost::escaped_list_separator<char> sep('\0', ',', '"');
  std::vector<std::string> out;
  try {
    boost::tokenizer<boost::escaped_list_separator<char>> tok(body, sep);
    for (const auto& field : tok) out.push_back(field);
  } catch (const boost::escaped_list_error& e) {
    throw ValidationError(std::string("malformed CSV line: ") + e.what());
  }
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find('"') != std::string::npos) throw ValidationError("CSV fields may not contain '\"': " + s);
  if (s.find_first_of(",\n\r") == std::string::npos) return s;
  return "\"" + s + "\"";
}

std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace dfd
