#include "dfd/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace dfd {
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "archive IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'F', 'D', 'A', 'R', 'C', 'H', '\0'};

fs::path temp_sibling(const fs::path& path) {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  return path.parent_path() / (path.filename().string() + ".tmp" + std::to_string(rng() % 1000000));
}

}  // namespace

const Tensor<float>& TensorArchive::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ArchiveError("archive has no tensor '" + name + "'");
  return it->second;
}

void write_file_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_archive(const TensorArchive& archive, const fs::path& path) {
  nlohmann::json header;
  header["meta"] = archive.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(float);
  }
  const std::string head = header.dump();

  std::string blob;
  blob.reserve(sizeof(kMagic) + 12 + head.size() + offset);
  blob.append(kMagic, sizeof(kMagic));
  const std::uint32_t version = TensorArchive::kVersion;
  const std::uint64_t head_len = head.size();
  blob.append(reinterpret_cast<const char*>(&version), sizeof(version));
  blob.append(reinterpret_cast<const char*>(&head_len), sizeof(head_len));
  blob += head;
  for (const auto& [name, t] : archive.tensors) {
    blob.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(float));
  }
  write_file_atomic(path, blob);
}

TensorArchive load_archive(const fs::path& path) {
  if (!fs::exists(path)) throw ArchiveError("archive not found: " + path.string());
  const std::string blob = read_file(path);
  if (blob.size() < 20 || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ArchiveError("not a tensor archive (bad magic): " + path.string());
  }
  std::uint32_t version = 0;
  std::uint64_t head_len = 0;
  std::memcpy(&version, blob.data() + 8, sizeof(version));
  std::memcpy(&head_len, blob.data() + 12, sizeof(head_len));
  if (version != TensorArchive::kVersion) {
    throw ArchiveError("unsupported archive version " + std::to_string(version) + " in " + path.string());
  }
  if (20 + head_len > blob.size()) throw ArchiveError("truncated archive header: " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(20, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError("corrupt archive header in " + path.string() + ": " + e.what());
  }
  const std::size_t payload = 20 + head_len;

  TensorArchive archive;
  archive.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    Tensor<float> t(shape);
    const std::size_t bytes = static_cast<std::size_t>(t.size()) * sizeof(float);
    if (payload + offset + bytes > blob.size()) {
      throw ArchiveError("truncated payload for tensor '" + name + "' in " + path.string());
    }
    std::memcpy(t.data(), blob.data() + payload + offset, bytes);
    archive.tensors.emplace(name, std::move(t));
  }
  return archive;
}

}  // namespace dfd
