#pragma once

#include <string>

namespace dfd {

/// Class labels; the numeric value is the logit index.
enum class Label { real = 0, fake = 1 };
enum class Split { train, val, test };

std::string to_string(Label l);
std::string to_string(Split s);
/// Throw ValidationError on unknown tokens.
Label parse_label(const std::string& s);
Split parse_split(const std::string& s);

}  // namespace dfd
