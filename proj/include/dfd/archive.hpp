#pragma once

#include "dfd/tensor.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace dfd {

/// Named float32 tensors plus a JSON metadata block, stored as
///
///   8 bytes   magic "DFDARCH\0"
///   u32 LE    format version (1)
///   u64 LE    header length in bytes
///   header    UTF-8 JSON {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
///   payload   little-endian float32 data, offsets relative to payload start
///
/// Used for pretrained weight artifacts, checkpoints and raw heatmap grids.
struct TensorArchive {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor<float>> tensors;

  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
  const Tensor<float>& at(const std::string& name) const;
};

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes to a sibling temp file and renames into place.
void save_archive(const TensorArchive& archive, const std::filesystem::path& path);
TensorArchive load_archive(const std::filesystem::path& path);

/// Writes `text` to `path` through a temp file + rename so readers never see partial output.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_file(const std::filesystem::path& path);

/// FNV-1a 64-bit digest, hex encoded.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace dfd
