#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "smoothfit/design.hpp"

namespace smoothfit::cli {

// Comma-separated, header required, '.' decimal. Columns whose cells all parse as finite
// numbers become numeric, the rest are factors. NA-like tokens and empty cells are rejected.
DataTable read_csv(std::istream& in, const std::string& source = "<input>");
DataTable read_csv_file(const std::string& path);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

void write_csv(std::ostream& out, const CsvTable& t);
void write_csv_file(const std::string& path, const CsvTable& t);

// Shortest text that reads back to the same double.
std::string fmt_double(double v);

}  // namespace smoothfit::cli
