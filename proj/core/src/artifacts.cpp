// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include "moelab/artifacts.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <charconv>
#include <system_error>

#include "moelab/errors.hpp"

namespace moelab {

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void atomic_write_file(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw UsageError("cannot open '" + tmp.string() + "' for writing");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    f.flush();
    if (!f) throw UsageError("short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw UsageError("cannot rename '" + tmp.string() + "' to '" + path.string() +
                     "': " + ec.message());
  }
}

std::string artifact_stamp(const std::string& config_hash, std::uint64_t seed) {
  return "# config_hash=" + config_hash + " seed=" + std::to_string(seed);
}

RunLock::RunLock(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw UsageError("cannot create run directory '" + dir.string() + "': " +
                     ec.message());
  }
  file_ = dir / ".lock";
  const int fd = ::open(file_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw UsageError("run directory '" + dir.string() +
                     "' is locked by another writer (remove " + file_.string() +
                     " if stale)");
  }
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  std::filesystem::remove(file_, ec);
}

CsvWriter::CsvWriter(const std::filesystem::path& path)
    : path_(path), tmp_(path.string() + ".tmp") {
  f_.open(tmp_, std::ios::binary | std::ios::trunc);
  if (!f_) throw UsageError("cannot open '" + tmp_.string() + "' for writing");
}

void CsvWriter::line(const std::string& s) {
  f_ << s << '\n';
  f_.flush();
  if (!f_) throw UsageError("short write to '" + tmp_.string() + "'");
}

void CsvWriter::finalize() {
  if (done_) return;
  f_.close();
  std::error_code ec;
  std::filesystem::rename(tmp_, path_, ec);
  if (ec) {
    throw UsageError("cannot rename '" + tmp_.string() + "' to '" +
                     path_.string() + "': " + ec.message());
  }
  done_ = true;
}

CsvWriter::~CsvWriter() {
  if (!done_) {
    try {
      finalize();
    } catch (...) {
      // Destructor must not throw; the temp file stays behind as evidence.
    }
  }
}

}  // namespace moelab
