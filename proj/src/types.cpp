#include "dfd/types.hpp"

#include "dfd/config_fields.hpp"

namespace dfd {

std::string to_string(Label l) { return l == Label::fake ? "fake" : "real"; }

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Label parse_label(const std::string& s) {
  if (s == "real") return Label::real;
  if (s == "fake") return Label::fake;
  throw ValidationError("unknown label '" + s + "' (expected real or fake)");
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "' (expected train, val or test)");
}

}  // namespace dfd
