#include "csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "smoothfit/errors.hpp"

namespace smoothfit::cli {

namespace {

const std::set<std::string> kNaTokens = {"NA", "na", "N/A", "n/a", "NaN", "nan", "NAN", "null",
                                         "NULL", "."};

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && (s[a] == ' ' || s[a] == '\t')) ++a;
  while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
  return s.substr(a, b - a);
}

// Splits one record; double quotes protect commas, "" is a literal quote.
std::vector<std::string> split_record(const std::string& line, const std::string& where) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false, was_quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = was_quoted = true;
    } else if (c == ',') {
      out.push_back(was_quoted ? cur : trim(cur));
      cur.clear();
      was_quoted = false;
    } else {
      cur += c;
    }
  }
  if (quoted) throw SpecError(where + ": unterminated quote");
  out.push_back(was_quoted ? cur : trim(cur));
  return out;
}

bool parse_double(const std::string& s, double* v) {
  if (s.empty()) return false;
  const char* b = s.data();
  const char* e = b + s.size();
  if (*b == '+') ++b;
  auto [p, ec] = std::from_chars(b, e, *v);
  return ec == std::errc() && p == e && std::isfinite(*v);
}

}  // namespace

DataTable read_csv(std::istream& in, const std::string& source) {
  std::string line;
  int lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0)
      line.erase(0, 3);
    if (!trim(line).empty()) {
      header = split_record(line, source + ":" + std::to_string(lineno));
      break;
    }
  }
  if (header.empty()) throw SpecError(source + ": missing header line");
  std::set<std::string> seen;
  for (const auto& h : header) {
    if (h.empty()) throw SpecError(source + ":" + std::to_string(lineno) + ": empty column name");
    if (!seen.insert(h).second)
      throw SpecError(source + ":" + std::to_string(lineno) + ": duplicate column '" + h + "'");
  }

  const size_t nc = header.size();
  std::vector<std::vector<std::string>> cols(nc);
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    auto cells = split_record(line, where);
    if (cells.size() != nc)
      throw SpecError(where + ": expected " + std::to_string(nc) + " fields, found " +
                      std::to_string(cells.size()));
    for (size_t j = 0; j < nc; ++j) {
      if (cells[j].empty())
        throw SpecError(where + ": empty value in column '" + header[j] + "'");
      if (kNaTokens.count(cells[j]))
        throw SpecError(where + ": missing value '" + cells[j] + "' in column '" + header[j] +
                        "' (NA is not supported)");
      cols[j].push_back(std::move(cells[j]));
    }
  }

  DataTable t;
  t.nrows = static_cast<int>(cols[0].size());
  for (size_t j = 0; j < nc; ++j) {
    Vec v(cols[j].size());
    bool numeric = true;
    for (size_t i = 0; i < cols[j].size() && numeric; ++i) numeric = parse_double(cols[j][i], &v[i]);
    t.names.push_back(header[j]);
    t.text[header[j]] = cols[j];
    if (numeric) t.numeric[header[j]] = v;
  }
  return t;
}

DataTable read_csv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw SpecError("cannot open data file '" + path + "'");
  return read_csv(f, path);
}

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

void write_csv(std::ostream& out, const CsvTable& t) {
  auto field = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  for (size_t j = 0; j < t.header.size(); ++j) out << (j ? "," : "") << field(t.header[j]);
  out << "\n";
  for (const auto& r : t.rows) {
    for (size_t j = 0; j < r.size(); ++j) out << (j ? "," : "") << field(r[j]);
    out << "\n";
  }
}

void write_csv_file(const std::string& path, const CsvTable& t) {
  if (path.empty() || path == "-") {
    write_csv(std::cout, t);
    return;
  }
  std::ofstream f(path);
  if (!f) throw SpecError("cannot write '" + path + "'");
  write_csv(f, t);
}

}  // namespace smoothfit::cli
