#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

namespace mrn {

// Fixed 9-significant-digit formatting so traces are byte-stable across runs.
inline std::string fmt_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::string& header) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    out_.open(path);
    if (!out_) throw std::runtime_error("cannot open output file: " + path.string());
    out_ << header << "\n";
  }

  // Row cells are appended with `cell`; `end_row` terminates the line.
  CsvWriter& cell(const std::string& s) {
    if (!first_) out_ << ",";
    out_ << s;
    first_ = false;
    return *this;
  }
  CsvWriter& cell(double v) { return cell(fmt_g9(v)); }
  CsvWriter& cell(long v) { return cell(std::to_string(v)); }
  CsvWriter& cell(int v) { return cell(std::to_string(v)); }
  void end_row() {
    out_ << "\n";
    first_ = true;
  }

 private:
  std::ofstream out_;
  bool first_ = true;
};

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open output file: " + path.string());
  out << content;
}

}  // namespace mrn
