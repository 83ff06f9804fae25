#pragma once

// Embedding tables: records, on-disk formats, and per-feature quantile
// normalization into [-1, 1].

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "embgen/binary_io.hpp"
#include "embgen/common.hpp"

namespace embgen {

struct EmbeddingRecord {
  std::string utterance_id;
  std::string speaker_id;
  std::vector<float> vector;
};

class EmbeddingDataset {
 public:
  EmbeddingDataset() = default;

  /// Validates every invariant: dim > 0, at least one record, equal
  /// dimensions, finite components, unique utterance ids.
  EmbeddingDataset(std::size_t dim, std::vector<EmbeddingRecord> records, std::string source_tag = {})
      : dim_(dim), records_(std::move(records)), source_tag_(std::move(source_tag)) {
    if (dim_ == 0) throw ValidationError("dataset dimension must be positive");
    if (records_.empty()) throw ValidationError("dataset must contain at least one record");
    std::unordered_set<std::string> seen;
    seen.reserve(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      if (r.vector.size() != dim_)
        throw ValidationError("record " + std::to_string(i) + " (" + r.utterance_id + ") has dimension " +
                              std::to_string(r.vector.size()) + ", expected " + std::to_string(dim_));
      if (!all_finite(std::span<const float>(r.vector)))
        throw ValidationError("record " + std::to_string(i) + " (" + r.utterance_id + ") has non-finite values");
      if (!seen.insert(r.utterance_id).second)
        throw ValidationError("duplicate utterance_id: " + r.utterance_id);
    }
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }
  const std::vector<EmbeddingRecord>& records() const noexcept { return records_; }
  const EmbeddingRecord& operator[](std::size_t i) const { return records_[i]; }
  std::span<const float> row(std::size_t i) const { return records_[i].vector; }
  const std::string& source_tag() const noexcept { return source_tag_; }
  void set_source_tag(std::string tag) { source_tag_ = std::move(tag); }

  /// speaker_id -> row indices in dataset order.
  std::map<std::string, std::vector<std::size_t>> speakers() const {
    std::map<std::string, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < records_.size(); ++i) out[records_[i].speaker_id].push_back(i);
    return out;
  }

  std::optional<std::size_t> find(const std::string& utterance_id) const {
    for (std::size_t i = 0; i < records_.size(); ++i)
      if (records_[i].utterance_id == utterance_id) return i;
    return std::nullopt;
  }

  /// Rows widened to double.
  Matrix to_matrix() const {
    Matrix m(size(), dim_);
    for (std::size_t i = 0; i < size(); ++i)
      std::copy(records_[i].vector.begin(), records_[i].vector.end(), m.row(i).begin());
    return m;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<EmbeddingRecord> records_;
  std::string source_tag_;
};

// ---------------------------------------------------------------------------
// File formats

enum class DatasetFormat { manifest_binary, jsonl };

inline constexpr char kMatrixMagic[8] = {'E', 'M', 'B', 'T', '0', '0', '0', '1'};
inline constexpr std::size_t kMatrixHeaderBytes = 16;

inline DatasetFormat format_from_string(std::string_view s) {
  if (s == "manifest_binary" || s == "binary" || s == "embt") return DatasetFormat::manifest_binary;
  if (s == "jsonl") return DatasetFormat::jsonl;
  throw ValidationError("unknown dataset format: " + std::string(s));
}

inline const char* to_string(DatasetFormat f) {
  return f == DatasetFormat::jsonl ? "jsonl" : "manifest_binary";
}

/// `.jsonl` means jsonl; anything else is the binary matrix file.
inline DatasetFormat guess_format(const std::filesystem::path& path) {
  return path.extension() == ".jsonl" ? DatasetFormat::jsonl : DatasetFormat::manifest_binary;
}

/// For binary datasets `foo.embt` the manifest lives at `foo.manifest.jsonl`.
inline std::filesystem::path manifest_path_for(const std::filesystem::path& matrix_path) {
  auto p = matrix_path;
  p.replace_extension(".manifest.jsonl");
  return p;
}

/// Optional sidecar carrying source_tag and run metadata: `foo.meta.json`.
inline std::filesystem::path meta_path_for(const std::filesystem::path& path) {
  auto p = path;
  p.replace_extension(".meta.json");
  return p;
}

namespace detail {

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    start = end + 1;
  }
  return lines;
}

inline bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
}

inline nlohmann::json parse_json_line(std::string_view line, std::size_t lineno) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("invalid JSON: ") + e.what(), lineno, "line");
  }
}

inline std::string required_string(const nlohmann::json& obj, const char* key, std::size_t lineno) {
  if (!obj.is_object() || !obj.contains(key) || !obj[key].is_string())
    throw ParseError(std::string("missing string field \"") + key + "\"", lineno, "line");
  return obj[key].get<std::string>();
}

}  // namespace detail

inline EmbeddingDataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  if (!std::filesystem::exists(path)) throw ValidationError("dataset file not found: " + path.string());

  std::string source_tag = path.string();
  if (auto meta = meta_path_for(path); std::filesystem::exists(meta)) {
    auto j = nlohmann::json::parse(io::read_file(meta), nullptr, false);
    if (j.is_object() && j.contains("source_tag") && j["source_tag"].is_string())
      source_tag = j["source_tag"].get<std::string>();
  }

  std::vector<EmbeddingRecord> records;
  std::size_t dim = 0;

  if (format == DatasetFormat::jsonl) {
    const std::string text = io::read_file(path);
    auto lines = detail::split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (detail::is_blank(lines[i])) continue;
      const std::size_t lineno = i + 1;
      auto obj = detail::parse_json_line(lines[i], lineno);
      EmbeddingRecord r;
      r.utterance_id = detail::required_string(obj, "utterance_id", lineno);
      r.speaker_id = detail::required_string(obj, "speaker_id", lineno);
      if (!obj.contains("vector") || !obj["vector"].is_array())
        throw ParseError("missing array field \"vector\"", lineno, "line");
      for (const auto& v : obj["vector"]) {
        if (!v.is_number()) throw ParseError("non-numeric vector component", lineno, "line");
        r.vector.push_back(v.get<float>());
      }
      if (records.empty()) dim = r.vector.size();
      records.push_back(std::move(r));
    }
    if (records.empty()) throw ValidationError("dataset file has no records: " + path.string());
    return EmbeddingDataset(dim, std::move(records), source_tag);
  }

  // manifest_binary
  const std::string bytes = io::read_file(path);
  if (bytes.size() < kMatrixHeaderBytes) throw ParseError("truncated matrix header", bytes.size(), "byte");
  if (std::memcmp(bytes.data(), kMatrixMagic, 8) != 0) throw ParseError("bad magic, expected EMBT0001", 0, "byte");
  const std::uint32_t n = io::get_u32(bytes, 8);
  const std::uint32_t d = io::get_u32(bytes, 12);
  if (d == 0) throw ParseError("matrix dimension is zero", 12, "byte");
  const std::uint64_t expected = kMatrixHeaderBytes + std::uint64_t{n} * d * 4;
  if (bytes.size() != expected)
    throw ParseError("matrix payload size mismatch: expected " + std::to_string(expected) + " bytes, found " +
                         std::to_string(bytes.size()),
                     std::min<std::uint64_t>(bytes.size(), expected), "byte");

  const auto manifest = manifest_path_for(path);
  if (!std::filesystem::exists(manifest)) throw ValidationError("manifest file not found: " + manifest.string());
  const std::string text = io::read_file(manifest);
  auto lines = detail::split_lines(text);

  records.resize(n);
  std::vector<bool> filled(n, false);
  std::size_t count = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (detail::is_blank(lines[i])) continue;
    const std::size_t lineno = i + 1;
    auto obj = detail::parse_json_line(lines[i], lineno);
    if (!obj.contains("row") || !obj["row"].is_number_integer())
      throw ParseError("missing integer field \"row\"", lineno, "line");
    const auto row = obj["row"].get<std::int64_t>();
    if (row < 0 || static_cast<std::uint64_t>(row) >= n)
      throw ValidationError("manifest line " + std::to_string(lineno) + ": row " + std::to_string(row) +
                            " out of range [0, " + std::to_string(n) + ")");
    if (filled[row]) throw ValidationError("manifest line " + std::to_string(lineno) + ": row " +
                                           std::to_string(row) + " appears twice");
    filled[row] = true;
    ++count;
    auto& r = records[row];
    r.utterance_id = detail::required_string(obj, "utterance_id", lineno);
    r.speaker_id = detail::required_string(obj, "speaker_id", lineno);
    r.vector.resize(d);
    const std::size_t base = kMatrixHeaderBytes + static_cast<std::size_t>(row) * d * 4;
    for (std::uint32_t k = 0; k < d; ++k) r.vector[k] = io::get_f32(bytes, base + 4 * k);
  }
  if (count != n)
    throw ValidationError("manifest lists " + std::to_string(count) + " rows but matrix has " + std::to_string(n));
  return EmbeddingDataset(d, std::move(records), source_tag);
}

inline EmbeddingDataset load_dataset(const std::filesystem::path& path) { return load_dataset(path, guess_format(path)); }

/// Writes the dataset; a `.meta.json` sidecar is written when `meta` is an
/// object (the dataset's source_tag is merged in).
inline void save_dataset(const EmbeddingDataset& data, const std::filesystem::path& path, DatasetFormat format,
                         const nlohmann::json& meta = nlohmann::json()) {
  if (format == DatasetFormat::jsonl) {
    std::string out;
    for (const auto& r : data.records()) {
      nlohmann::json obj = {{"utterance_id", r.utterance_id}, {"speaker_id", r.speaker_id}, {"vector", r.vector}};
      out += obj.dump();
      out += '\n';
    }
    io::write_file_atomic(path, out);
  } else {
    std::string bin(kMatrixMagic, 8);
    io::put_u32(bin, static_cast<std::uint32_t>(data.size()));
    io::put_u32(bin, static_cast<std::uint32_t>(data.dim()));
    bin.reserve(kMatrixHeaderBytes + data.size() * data.dim() * 4);
    for (const auto& r : data.records())
      for (float v : r.vector) io::put_f32(bin, v);
    std::string manifest;
    for (std::size_t i = 0; i < data.size(); ++i) {
      nlohmann::json obj = {{"utterance_id", data[i].utterance_id}, {"speaker_id", data[i].speaker_id}, {"row", i}};
      manifest += obj.dump();
      manifest += '\n';
    }
    io::write_file_atomic(manifest_path_for(path), manifest);
    io::write_file_atomic(path, bin);
  }
  if (meta.is_object()) {
    nlohmann::json m = meta;
    m["source_tag"] = data.source_tag();
    io::write_file_atomic(meta_path_for(path), m.dump(2) + "\n");
  }
}

// ---------------------------------------------------------------------------
// Quantile normalization

inline constexpr double kLowQuantile = 0.001;
inline constexpr double kHighQuantile = 0.999;

struct NormalizationStats {
  std::size_t dim = 0;
  std::vector<double> q_low;
  std::vector<double> q_high;

  void validate() const {
    if (dim == 0 || q_low.size() != dim || q_high.size() != dim)
      throw ValidationError("normalization stats have inconsistent dimensions");
    for (std::size_t i = 0; i < dim; ++i)
      if (!(q_low[i] <= q_high[i]) || !std::isfinite(q_low[i]) || !std::isfinite(q_high[i]))
        throw ValidationError("normalization stats: q_low > q_high or non-finite at feature " + std::to_string(i));
  }

  /// Maps [-1, 1] onto itself; handy for data already in normalized space.
  static NormalizationStats identity(std::size_t dim) {
    return {dim, std::vector<double>(dim, -1.0), std::vector<double>(dim, 1.0)};
  }
};

inline void to_json(nlohmann::json& j, const NormalizationStats& s) {
  j = nlohmann::json{{"dim", s.dim}, {"q_low", s.q_low}, {"q_high", s.q_high}};
}

inline void from_json(const nlohmann::json& j, NormalizationStats& s) {
  s.dim = j.at("dim").get<std::size_t>();
  s.q_low = j.at("q_low").get<std::vector<double>>();
  s.q_high = j.at("q_high").get<std::vector<double>>();
  s.validate();
}

/// Linear interpolation between order statistics of an ascending-sorted
/// sample ("type 7").
inline double sorted_quantile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ValidationError("quantile of empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline NormalizationStats fit_normalizer(const Matrix& rows) {
  if (rows.rows < 2) throw ValidationError("fit_normalizer needs at least 2 records");
  if (!all_finite(std::span<const double>(rows.data))) throw ValidationError("fit_normalizer: non-finite values");
  NormalizationStats s{rows.cols, std::vector<double>(rows.cols), std::vector<double>(rows.cols)};
  std::vector<double> column(rows.rows);
  for (std::size_t j = 0; j < rows.cols; ++j) {
    for (std::size_t i = 0; i < rows.rows; ++i) column[i] = rows(i, j);
    std::sort(column.begin(), column.end());
    s.q_low[j] = sorted_quantile(column, kLowQuantile);
    s.q_high[j] = sorted_quantile(column, kHighQuantile);
  }
  return s;
}

inline NormalizationStats fit_normalizer(const EmbeddingDataset& data) { return fit_normalizer(data.to_matrix()); }

inline void normalize_into(std::span<const double> x, const NormalizationStats& s, std::span<double> out) {
  if (x.size() != s.dim || out.size() != s.dim)
    throw ValidationError("normalize: dimension " + std::to_string(x.size()) + " does not match stats dimension " +
                          std::to_string(s.dim));
  for (std::size_t i = 0; i < s.dim; ++i) {
    if (!std::isfinite(x[i])) throw ValidationError("normalize: non-finite component " + std::to_string(i));
    const double lo = s.q_low[i], hi = s.q_high[i];
    if (hi == lo) {
      out[i] = 0.0;
      continue;
    }
    const double c = std::clamp(x[i], lo, hi);
    out[i] = std::clamp(2.0 * (c - lo) / (hi - lo) - 1.0, -1.0, 1.0);
  }
}

inline std::vector<double> normalize(std::span<const double> x, const NormalizationStats& s) {
  std::vector<double> out(x.size());
  normalize_into(x, s, out);
  return out;
}

inline void denormalize_into(std::span<const double> y, const NormalizationStats& s, std::span<double> out) {
  if (y.size() != s.dim || out.size() != s.dim)
    throw ValidationError("denormalize: dimension " + std::to_string(y.size()) + " does not match stats dimension " +
                          std::to_string(s.dim));
  for (std::size_t i = 0; i < s.dim; ++i) {
    if (!std::isfinite(y[i])) throw ValidationError("denormalize: non-finite component " + std::to_string(i));
    const double lo = s.q_low[i], hi = s.q_high[i];
    const double c = std::clamp(y[i], -1.0, 1.0);
    out[i] = lo + 0.5 * (c + 1.0) * (hi - lo);
  }
}

inline std::vector<double> denormalize(std::span<const double> y, const NormalizationStats& s) {
  std::vector<double> out(y.size());
  denormalize_into(y, s, out);
  return out;
}

inline Matrix normalize_rows(const Matrix& rows, const NormalizationStats& s) {
  Matrix out(rows.rows, rows.cols);
  for (std::size_t i = 0; i < rows.rows; ++i) normalize_into(rows.row(i), s, out.row(i));
  return out;
}

inline Matrix normalize_dataset(const EmbeddingDataset& data, const NormalizationStats& s) {
  return normalize_rows(data.to_matrix(), s);
}

/// Builds a dataset of generated vectors with ids "gen-<seed>-<index>".
inline EmbeddingDataset make_generated_dataset(const Matrix& rows, std::uint64_t seed, std::string source_tag) {
  std::vector<EmbeddingRecord> records;
  records.reserve(rows.rows);
  for (std::size_t i = 0; i < rows.rows; ++i) {
    std::string id = "gen-" + std::to_string(seed) + "-" + std::to_string(i);
    EmbeddingRecord r{id, id, std::vector<float>(rows.cols)};
    for (std::size_t j = 0; j < rows.cols; ++j) r.vector[j] = static_cast<float>(rows(i, j));
    records.push_back(std::move(r));
  }
  return EmbeddingDataset(rows.cols, std::move(records), std::move(source_tag));
}

}  // namespace embgen
