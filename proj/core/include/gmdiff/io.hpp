#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace gmdiff {

// CSV writer emitting doubles with 17 significant digits so that re-runs
// and resumed runs are byte-comparable.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header);
  ~CsvWriter();

  void row(const std::vector<double>& values);
  void row_mixed(const std::vector<std::string>& values);
  void flush();
  static std::string format(double v);

 private:
  std::ofstream out_;
  std::size_t n_cols_;
};

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
void ensure_directory(const std::string& path);
bool file_exists(const std::string& path);

// FNV-1a 64 over the canonical (key-sorted) JSON dump.
std::uint64_t config_hash(const nlohmann::json& j);
std::string hash_hex(std::uint64_t h);

}  // namespace gmdiff
