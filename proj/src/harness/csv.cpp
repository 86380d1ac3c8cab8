#include "dprune/csv.hpp"

#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dprune::harness {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string num(int v) { return std::to_string(v); }
std::string num(std::size_t v) { return std::to_string(v); }

CsvWriter::CsvWriter(const std::filesystem::path& path, std::vector<std::string> header)
    : out_(path, std::ios::trunc), columns_(header.size()), path_(path) {
  if (!out_) throw std::runtime_error("csv: cannot write '" + path.string() + "'");
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  if (fields.size() != columns_) throw std::logic_error("csv: row width mismatch in '" + path_.string() + "'");
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (fields[i].find_first_of(",\n") != std::string::npos)
      throw std::logic_error("csv: field contains a separator: '" + fields[i] + "'");
    out_ << (i ? "," : "") << fields[i];
  }
  out_ << "\n";
  out_.flush();
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  throw std::runtime_error("csv: missing column '" + name + "'");
}

double CsvTable::value(std::size_t row, const std::string& name) const {
  const std::string& s = rows.at(row).at(column(name));
  if (s == "nan" || s.empty()) return std::nan("");
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw std::runtime_error("csv: '" + s + "' in column '" + name + "' is not a number");
  return v;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("csv: cannot open '" + path.string() + "'");
  CsvTable t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (first) {
      t.header = std::move(fields);
      first = false;
    } else if (!line.empty()) {
      if (fields.size() != t.header.size())
        throw std::runtime_error("csv: row width mismatch in '" + path.string() + "'");
      t.rows.push_back(std::move(fields));
    }
  }
  return t;
}

}  // namespace dprune::harness
