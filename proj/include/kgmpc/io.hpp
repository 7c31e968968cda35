#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kgmpc/common.hpp"

namespace kgmpc {

/// Shortest decimal form that round-trips the double exactly; deterministic
/// across runs, so rerun artifacts compare byte-identical.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    double back = 0.0;
    // prefer shorter representations when they round-trip
    for (int prec = 1; prec <= 16; ++prec) {
        char shorter[32];
        std::snprintf(shorter, sizeof(shorter), "%.*g", prec, v);
        std::sscanf(shorter, "%lf", &back);
        if (back == v) return shorter;
    }
    return buf;
}

/// strtod without the out-of-range throw of std::stod (subnormals are data).
inline double parse_double(const std::string& s) {
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str()) throw std::invalid_argument("cannot parse number: " + s);
    return v;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for write: " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for read: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Row-oriented CSV writer with a fixed header.
class CsvWriter {
  public:
    explicit CsvWriter(std::vector<std::string> header) : ncols_(header.size()) {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (i) body_ += ',';
            body_ += header[i];
        }
        body_ += '\n';
    }

    void row(const std::vector<double>& values) {
        if (values.size() != ncols_) throw DimensionError("csv row width mismatch");
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (i) body_ += ',';
            body_ += format_double(values[i]);
        }
        body_ += '\n';
    }

    const std::string& str() const { return body_; }
    void save(const std::filesystem::path& path) const { write_file(path, body_); }

  private:
    std::size_t ncols_;
    std::string body_;
};

/// Parse a CSV with a header row of doubles; returns header + column arrays.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> columns;
};

inline CsvTable read_csv(const std::filesystem::path& path) {
    CsvTable table;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open csv: " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw IntegrityError("empty csv: " + path.string());
    std::stringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) table.header.push_back(cell);
    table.columns.resize(table.header.size());
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ls(line);
        std::size_t col = 0;
        while (std::getline(ls, cell, ',')) {
            if (col >= table.columns.size()) throw IntegrityError("ragged csv row in " + path.string());
            table.columns[col++].push_back(parse_double(cell));
        }
        if (col != table.columns.size()) throw IntegrityError("short csv row in " + path.string());
    }
    return table;
}

// Little-endian binary primitives for the snapshot/predictor file formats.
class BinaryWriter {
  public:
    void magic8(const char* tag) {
        char buf[8] = {0, 0, 0, 0, 0, 0, 0, 0};
        for (int i = 0; i < 8 && tag[i]; ++i) buf[i] = tag[i];
        bytes_.append(buf, 8);
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes_ += static_cast<char>((v >> (8 * i)) & 0xff);
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void f64_span(const double* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) f64(p[i]);
    }
    const std::string& bytes() const { return bytes_; }
    void save(const std::filesystem::path& path) const { write_file(path, bytes_); }

  private:
    std::string bytes_;
};

class BinaryReader {
  public:
    explicit BinaryReader(std::string bytes) : bytes_(std::move(bytes)) {}

    void expect_magic8(const char* tag) {
        char buf[8] = {0, 0, 0, 0, 0, 0, 0, 0};
        for (int i = 0; i < 8 && tag[i]; ++i) buf[i] = tag[i];
        if (bytes_.size() < pos_ + 8 || std::memcmp(bytes_.data() + pos_, buf, 8) != 0)
            throw IntegrityError(std::string("bad magic, expected ") + tag);
        pos_ += 8;
    }
    std::uint64_t u64() {
        if (bytes_.size() < pos_ + 8) throw IntegrityError("truncated file (u64)");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    void f64_span(double* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) p[i] = f64();
    }
    bool at_end() const { return pos_ == bytes_.size(); }

  private:
    std::string bytes_;
    std::size_t pos_ = 0;
};

}  // namespace kgmpc
