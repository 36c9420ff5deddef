#pragma once

// Minimal RFC-4180-ish CSV reading shared by the ingestion code.

#include <string>
#include <vector>

namespace spatconf::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index or -1.
  int column(const std::string& name) const;
};

std::vector<std::string> split_line(const std::string& line);
/// Throws DataError when the file cannot be opened or rows are ragged.
Table read(const std::string& path);
std::string trim(const std::string& s);

}  // namespace spatconf::csv
