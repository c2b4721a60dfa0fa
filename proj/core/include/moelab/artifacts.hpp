// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

namespace moelab {

/// Shortest decimal string that round-trips the exact double. Serialization
/// of every numeric artifact goes through this, which is what makes repeated
/// runs byte-identical.
std::string format_double(double v);

/// Writes content to a temp file in the target directory, then renames over
/// the destination. Readers never observe partial files.
void atomic_write_file(const std::filesystem::path& path, const std::string& content);

/// First line of every artifact file: names the producing config and seed.
std::string artifact_stamp(const std::string& config_hash, std::uint64_t seed);

/// Sentinel-file lock on a run directory (created if missing). A second
/// locker of the same directory fails; the sentinel is removed on release.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path file_;
};

/// Row-at-a-time CSV writer. Rows accumulate in <path>.tmp with a flush per
/// row, so an aborted run leaves readable partial data; finalize() renames
/// the temp file into place atomically. Destruction without finalize() also
/// renames, preserving the partial artifact.
class CsvWriter {
 public:
  explicit CsvWriter(const std::filesystem::path& path);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  void line(const std::string& s);
  void finalize();

 private:
  std::filesystem::path path_;
  std::filesystem::path tmp_;
  std::ofstream f_;
  bool done_ = false;
};

}  // namespace moelab
