#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace embgen {

/// Input violates a documented precondition or data invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file content. `position()` is a byte offset or 1-based line
/// number, as named by `unit()`.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::uint64_t position, std::string unit)
      : std::runtime_error(what + " (at " + unit + " " + std::to_string(position) + ")"),
        position_(position),
        unit_(std::move(unit)) {}

  std::uint64_t position() const noexcept { return position_; }
  const std::string& unit() const noexcept { return unit_; }

 private:
  std::uint64_t position_;
  std::string unit_;
};

/// A loss or statistic became NaN/Inf. `term()` names the offending quantity.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::string term)
      : std::runtime_error(what), term_(std::move(term)) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

/// Operation invoked on an object that is not in a usable state.
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  // Distinct streams for the same seed must not alias.
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

inline void fill_standard_normal(Rng& rng, std::span<double> out) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : out) v = normal(rng);
}

inline bool all_finite(std::span<const double> xs) {
  for (double v : xs)
    if (!std::isfinite(v)) return false;
  return true;
}

inline bool all_finite(std::span<const float> xs) {
  for (float v : xs)
    if (!std::isfinite(v)) return false;
  return true;
}

/// Population mean and standard deviation (divisor n), accumulated in order.
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd out;
  out.count = xs.size();
  if (xs.empty()) return out;
  double sum = 0.0;
  for (double v : xs) sum += v;
  out.mean = sum / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double v : xs) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(xs.size()));
  return out;
}

// Minimal leveled logging to stderr; verbosity from EMBGEN_LOG
// (error|warn|info|debug, or 0-3). Default warn.
namespace log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

inline Level threshold() {
  static const Level level = [] {
    const char* env = std::getenv("EMBGEN_LOG");
    if (env == nullptr) return Level::warn;
    std::string_view v(env);
    if (v == "error" || v == "0") return Level::error;
    if (v == "info" || v == "2") return Level::info;
    if (v == "debug" || v == "3") return Level::debug;
    return Level::warn;
  }();
  return level;
}

inline void write(Level level, std::string_view msg) {
  if (static_cast<int>(level) > static_cast<int>(threshold())) return;
  static constexpr const char* names[] = {"error", "warn", "info", "debug"};
  std::cerr << "[embgen " << names[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void error(std::string_view m) { write(Level::error, m); }
inline void warn(std::string_view m) { write(Level::warn, m); }
inline void info(std::string_view m) { write(Level::info, m); }
inline void debug(std::string_view m) { write(Level::debug, m); }

}  // namespace log
}  // namespace embgen

namespace embgen {

/// Dense row-major matrix of doubles; rows are samples.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

}  // namespace embgen
