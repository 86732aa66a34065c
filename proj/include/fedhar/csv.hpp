#pragma once

// ExtraSensory per-subject CSV: "timestamp", feature columns, "label:*" columns
// with 0/1/empty, and an optional trailing "label_source". Files may be gzipped.

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fedhar/data.hpp"
#include "fedhar/errors.hpp"

namespace fedhar {

// Expected column counts; 0 accepts whatever the header declares.
struct CsvLayout {
  std::size_t n_features = 225;
  std::size_t n_labels = 51;

  static CsvLayout from_header() { return {0, 0}; }
};

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      cells.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return cells;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline bool is_missing_cell(std::string_view s) {
  return s.empty() || s == "nan" || s == "NaN" || s == "NAN" || s == "NA";
}

inline std::string cell_error(std::size_t row, std::size_t col, std::string_view cell, const char* what) {
  return "row " + std::to_string(row) + ", column " + std::to_string(col) + ": cannot parse '" +
         std::string(cell) + "' as " + what;
}

}  // namespace detail

inline SubjectRecord parse_extrasensory_csv(std::istream& in, std::string subject_id, CsvLayout layout = {}) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty CSV: missing header row");
  const auto header = detail::split_csv_line(detail::trim(line));
  if (header.empty() || detail::trim(header[0]) != "timestamp") {
    throw FormatError("first header column must be 'timestamp'");
  }
  std::size_t n_feat = 0, n_lab = 0;
  bool has_source = false;
  for (std::size_t c = 1; c < header.size(); ++c) {
    const auto name = detail::trim(header[c]);
    if (name == "label_source") {
      if (c + 1 != header.size()) throw FormatError("'label_source' must be the last column");
      has_source = true;
    } else if (name.rfind("label:", 0) == 0) {
      ++n_lab;
    } else {
      if (n_lab > 0) throw FormatError("feature column '" + std::string(name) + "' after label columns");
      ++n_feat;
    }
  }
  if (layout.n_features != 0 && n_feat != layout.n_features) {
    throw FormatError("expected " + std::to_string(layout.n_features) + " feature columns, found " +
                      std::to_string(n_feat));
  }
  if (layout.n_labels != 0 && n_lab != layout.n_labels) {
    throw FormatError("expected " + std::to_string(layout.n_labels) + " label columns, found " +
                      std::to_string(n_lab));
  }
  if (n_feat == 0 || n_lab == 0) throw FormatError("header declares no feature or no label columns");
  const std::size_t n_cols = 1 + n_feat + n_lab + (has_source ? 1 : 0);

  SubjectRecord rec;
  rec.subject_id = std::move(subject_id);
  rec.n_features = n_feat;
  rec.n_labels = n_lab;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    const auto trimmed = detail::trim(line);
    if (trimmed.empty()) continue;
    const auto cells = detail::split_csv_line(trimmed);
    if (cells.size() != n_cols) {
      throw FormatError("row " + std::to_string(row) + ": expected " + std::to_string(n_cols) +
                        " columns, found " + std::to_string(cells.size()));
    }
    {
      const auto cell = detail::trim(cells[0]);
      std::int64_t ts = 0;
      auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), ts);
      if (ec != std::errc() || p != cell.data() + cell.size()) {
        double d = 0;
        auto [p2, ec2] = std::from_chars(cell.data(), cell.data() + cell.size(), d);
        if (ec2 != std::errc() || p2 != cell.data() + cell.size() || !std::isfinite(d)) {
          throw FormatError(detail::cell_error(row, 0, cell, "timestamp"));
        }
        ts = static_cast<std::int64_t>(std::llround(d));
      }
      rec.timestamps.push_back(ts);
    }
    for (std::size_t c = 1; c <= n_feat; ++c) {
      const auto cell = detail::trim(cells[c]);
      float v = std::numeric_limits<float>::quiet_NaN();
      if (!detail::is_missing_cell(cell)) {
        auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
        if (ec != std::errc() || p != cell.data() + cell.size()) {
          throw FormatError(detail::cell_error(row, c, cell, "number"));
        }
      }
      rec.features.push_back(v);
    }
    for (std::size_t c = 1 + n_feat; c <= n_feat + n_lab; ++c) {
      const auto cell = detail::trim(cells[c]);
      std::int8_t lab = kMissingLabel;
      if (!detail::is_missing_cell(cell)) {
        double v = 0;
        auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
        if (ec != std::errc() || p != cell.data() + cell.size() || (v != 0.0 && v != 1.0)) {
          throw FormatError(detail::cell_error(row, c, cell, "label (0, 1 or empty)"));
        }
        lab = v == 1.0 ? 1 : 0;
      }
      rec.labels.push_back(lab);
    }
  }

  // stable sort rows by timestamp
  std::vector<std::size_t> order(rec.rows());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rec.timestamps[a] < rec.timestamps[b]; });
  SubjectRecord sorted = rec;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t src = order[i];
    sorted.timestamps[i] = rec.timestamps[src];
    std::copy_n(rec.features.begin() + static_cast<std::ptrdiff_t>(src * n_feat), n_feat,
                sorted.features.begin() + static_cast<std::ptrdiff_t>(i * n_feat));
    std::copy_n(rec.labels.begin() + static_cast<std::ptrdiff_t>(src * n_lab), n_lab,
                sorted.labels.begin() + static_cast<std::ptrdiff_t>(i * n_lab));
  }
  for (std::size_t i = 1; i < sorted.rows(); ++i) {
    if (sorted.timestamps[i] == sorted.timestamps[i - 1]) {
      throw FormatError("duplicate timestamp " + std::to_string(sorted.timestamps[i]));
    }
  }
  return sorted;
}

/// Writes a record in the same column convention, with floats at round-trip precision.
inline void write_extrasensory_csv(std::ostream& out, const SubjectRecord& rec,
                                   const std::vector<std::string>& feature_names,
                                   const std::vector<std::string>& label_names) {
  if (feature_names.size() != rec.n_features || label_names.size() != rec.n_labels) {
    throw ShapeError("column names do not match record layout");
  }
  out << "timestamp";
  for (const auto& n : feature_names) out << ',' << n;
  for (const auto& n : label_names) out << ",label:" << n;
  out << ",label_source\n";
  char buf[64];
  for (std::size_t r = 0; r < rec.rows(); ++r) {
    out << rec.timestamps[r];
    for (std::size_t c = 0; c < rec.n_features; ++c) {
      const float v = rec.feature(r, c);
      if (std::isnan(v)) {
        out << ",nan";
      } else {
        auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
        out << ',' << std::string_view(buf, static_cast<std::size_t>(p - buf));
      }
    }
    for (std::size_t k = 0; k < rec.n_labels; ++k) {
      const auto lab = rec.label(r, k);
      out << ',';
      if (lab != kMissingLabel) out << static_cast<int>(lab);
    }
    out << ",-1\n";
  }
}

/// Whole file as a string; ".gz" files are inflated.
inline std::string read_file_bytes(const std::filesystem::path& path) {
  if (path.extension() == ".gz") {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (f == nullptr) throw IoError("cannot open " + path.string());
    std::string out;
    char buf[1 << 16];
    int n = 0;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
    const bool failed = n < 0;
    gzclose(f);
    if (failed) throw IoError("gzip read error in " + path.string());
    return out;
  }
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Subject id = file name up to the first '.', e.g. "<uuid>.features_labels.csv.gz".
inline std::string subject_id_from_path(const std::filesystem::path& path) {
  const std::string name = path.filename().string();
  return name.substr(0, name.find('.'));
}

inline SubjectRecord load_subject_file(const std::filesystem::path& path, CsvLayout layout = {}) {
  std::istringstream in(read_file_bytes(path));
  try {
    return parse_extrasensory_csv(in, subject_id_from_path(path), layout);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Every *.csv / *.csv.gz in a directory, sorted by subject id.
inline std::vector<SubjectRecord> load_subject_dir(const std::filesystem::path& dir, CsvLayout layout = {}) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    const bool csv = name.size() > 4 && name.substr(name.size() - 4) == ".csv";
    const bool gz = name.size() > 7 && name.substr(name.size() - 7) == ".csv.gz";
    if (entry.is_regular_file() && (csv || gz)) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<SubjectRecord> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(load_subject_file(f, layout));
  std::sort(out.begin(), out.end(),
            [](const SubjectRecord& a, const SubjectRecord& b) { return a.subject_id < b.subject_id; });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].subject_id == out[i - 1].subject_id) {
      throw FormatError("duplicate subject id " + out[i].subject_id + " in " + dir.string());
    }
  }
  return out;
}

}  // namespace fedhar
