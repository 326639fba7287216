#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "moegeo/numerics.hpp"

namespace moegeo {

/// Shortest decimal that round-trips to the same double; "C" locale style.
std::string format_number(double v);
std::string format_optional(const std::optional<double>& v);

/// Strict parse of a number written by format_number.
double parse_number(std::string_view text);

/// FNV-1a over bytes; used to fingerprint emitted inputs.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

/// Rows of `m` as CSV lines with the given header.
std::string matrix_csv(const MatrixXd& m, const std::string& column_prefix);

class CsvBuilder {
 public:
  explicit CsvBuilder(const std::vector<std::string>& header);
  CsvBuilder& cell(const std::string& text);
  CsvBuilder& cell(double v);
  CsvBuilder& cell(long long v);
  CsvBuilder& cell(const std::optional<double>& v);
  void end_row();
  const std::string& str() const { return out_; }

 private:
  std::string out_;
  bool row_open_ = false;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column position by name; throws if absent.
  size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
/// Creates parent directories; errors name the path.
void write_text_file(const std::filesystem::path& path, const std::string& content);

}  // namespace moegeo
