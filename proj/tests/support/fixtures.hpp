#pragma once

// Shared test fixtures: lazily built bases and scratch directories.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <memory>
#include <string>

#include "magslam/eigenbasis.hpp"

namespace magslam::testing {

/// Default tile geometry with a 64-function basis.
inline std::shared_ptr<const Basis3D> small_basis() {
  static const auto basis = [] {
    BasisSpec spec;
    spec.basis_size = 64;
    return build_basis(spec);
  }();
  return basis;
}

/// Default tile geometry with the full 256-function basis.
inline std::shared_ptr<const Basis3D> full_basis() {
  static const auto basis = build_basis(BasisSpec{});
  return basis;
}

/// Fresh, empty directory under the system temp dir; removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("magslam_" + tag + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace magslam::testing
