#include "dfd/system.hpp"

#include <Eigen/Core>

#include <fstream>
#include <thread>

#ifndef DFD_GIT_HASH
#define DFD_GIT_HASH "unknown"
#endif

namespace dfd {

std::string hardware_descriptor() {
  std::string model = "unknown CPU";
  std::ifstream cpuinfo("/proc/cpuinfo");
  for (std::string line; std::getline(cpuinfo, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) model = line.substr(line.find_first_not_of(' ', colon + 1));
      break;
    }
  }
  return model + " | " + std::to_string(std::thread::hardware_concurrency()) + " logical cores | " +
         Eigen::SimdInstructionSetsInUse();
}

std::string git_hash() { return DFD_GIT_HASH; }

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace dfd
