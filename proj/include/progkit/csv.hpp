// Minimal comma-separated table reader/writer (no quoting; fields must not
// contain commas). Empty cells are preserved as empty strings.
#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "progkit/core.hpp"

namespace progkit::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
  int require(const std::string& name) const {
    const int c = column(name);
    if (c < 0) throw IngestionError("csv: missing column '" + name + "'");
    return c;
  }
};

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline Table parse(std::istream& in, const std::string& what = "csv") {
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw IngestionError(what + ": empty file");
  t.header = split(line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto row = split(line);
    if (row.size() != t.header.size())
      throw IngestionError(what + ": line " + std::to_string(lineno) + " has " + std::to_string(row.size()) +
                           " fields, expected " + std::to_string(t.header.size()));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline Table read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("csv: cannot open " + path);
  return parse(in, path);
}

/// Shortest representation that round-trips a double exactly.
inline std::string format(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double to_double(const std::string& s, const std::string& context) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && *b == ' ') ++b;
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) throw IngestionError(context + ": not a number: '" + s + "'");
  return v;
}

inline void write(const std::string& path, const Table& t) {
  std::ofstream out(path);
  if (!out) throw IngestionError("csv: cannot write " + path);
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    out << '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
}

}  // namespace progkit::csv
