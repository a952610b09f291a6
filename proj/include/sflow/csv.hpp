#pragma once

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>

namespace sflow {

/// Minimal CSV writer with stable numeric formatting, so identical runs
/// produce byte-identical files.
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : os_(path) {
    if (!os_) throw std::runtime_error("cannot open '" + path + "' for writing");
  }

  void raw_line(const std::string& line) { os_ << line << '\n'; }

  template <typename... Cols>
  void row(const Cols&... cols) {
    bool first = true;
    ((os_ << (first ? "" : ","), first = false, put(cols)), ...);
    os_ << '\n';
  }

  void close() {
    os_.close();
    if (os_.fail()) throw std::runtime_error("CSV write failed");
  }

 private:
  void put(const std::string& s) { os_ << s; }
  void put(const char* s) { os_ << s; }
  void put(bool v) { os_ << (v ? 1 : 0); }
  void put(int v) { os_ << v; }
  void put(long v) { os_ << v; }
  void put(long long v) { os_ << v; }
  void put(unsigned long v) { os_ << v; }
  void put(unsigned long long v) { os_ << v; }
  void put(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    os_ << buf;
  }
  void put(float v) { put(static_cast<double>(v)); }

  std::ofstream os_;
};

}  // namespace sflow
