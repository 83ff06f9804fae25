#pragma once

// Diagonal-covariance Gaussian mixture baseline, fitted by EM on normalized
// embeddings, with the MSE-curve component-count scan.

#include <algorithm>
#include <filesystem>
#include <limits>
#include <numeric>
#include <numbers>
#include <optional>

#include <nlohmann/json.hpp>

#include "embgen/common.hpp"
#include "embgen/container.hpp"
#include "embgen/embedding_store.hpp"

namespace embgen {

inline constexpr double kVarianceFloor = 1e-6;

struct GmmOptions {
  std::size_t k = 16;
  std::uint64_t seed = 0;
  std::size_t max_iters = 200;
  double tol = 1e-6;
  std::size_t restarts = 1;
  double variance_floor = kVarianceFloor;
};

struct GmmModel {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> weights;
  Matrix means;      // k x dim, normalized space
  Matrix variances;  // k x dim
  NormalizationStats norm_stats;
  double variance_floor = kVarianceFloor;
  /// Mean log-likelihood after each E-step of the retained fit.
  std::vector<double> loglik_trace;
  /// Trace indices whose preceding M-step re-seeded an empty component.
  std::vector<std::size_t> reseeded_at;
  /// Free-form run description carried through save/load.
  nlohmann::json metadata = nlohmann::json::object();

  void validate() const {
    if (k == 0 || dim == 0) throw ValidationError("GMM must have k >= 1 and dim >= 1");
    if (weights.size() != k || means.rows != k || means.cols != dim || variances.rows != k || variances.cols != dim)
      throw ValidationError("GMM parameter shapes inconsistent with k/dim");
    double s = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw ValidationError("GMM weight negative or NaN");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ValidationError("GMM weights do not sum to 1");
    for (double v : variances.data)
      if (!(v >= variance_floor)) throw ValidationError("GMM variance below floor");
  }
};

namespace detail {

inline double diag_log_density(std::span<const double> x, std::span<const double> mean, std::span<const double> var) {
  constexpr double log2pi = 1.8378770664093454835606594728112;
  double acc = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double d = x[j] - mean[j];
    acc += log2pi + std::log(var[j]) + d * d / var[j];
  }
  return -0.5 * acc;
}

inline double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double a : v) s += std::exp(a - mx);
  return mx + std::log(s);
}

/// Log joint log(w_k) + log N(x | k) for every component.
inline void component_log_joint(const GmmModel& m, std::span<const double> x, std::span<double> out) {
  for (std::size_t c = 0; c < m.k; ++c)
    out[c] = std::log(m.weights[c]) + diag_log_density(x, m.means.row(c), m.variances.row(c));
}

/// E-step: fills responsibilities (n x k) and returns the mean log-likelihood
/// together with each point's log-likelihood.
inline double e_step(const GmmModel& m, const Matrix& x, Matrix& resp, std::vector<double>& point_ll) {
  resp = Matrix(x.rows, m.k);
  point_ll.assign(x.rows, 0.0);
  double total = 0.0;
  std::vector<double> lj(m.k);
  for (std::size_t i = 0; i < x.rows; ++i) {
    component_log_joint(m, x.row(i), lj);
    const double lse = log_sum_exp(lj);
    point_ll[i] = lse;
    total += lse;
    for (std::size_t c = 0; c < m.k; ++c) resp(i, c) = std::exp(lj[c] - lse);
  }
  return total / static_cast<double>(x.rows);
}

inline std::vector<double> feature_variance(const Matrix& x) {
  std::vector<double> mean(x.cols, 0.0), var(x.cols, 0.0);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) mean[j] += x(i, j);
  for (double& v : mean) v /= static_cast<double>(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) var[j] += (x(i, j) - mean[j]) * (x(i, j) - mean[j]);
  for (double& v : var) v /= static_cast<double>(x.rows);
  return var;
}

/// M-step with variance floor. Components whose responsibility mass is
/// (numerically) zero are re-seeded on the worst-explained point. Returns true
/// when any component was re-seeded.
inline bool m_step(GmmModel& m, const Matrix& x, const Matrix& resp, const std::vector<double>& point_ll) {
  const std::size_t n = x.rows, d = x.cols;
  bool reseeded = false;
  std::vector<double> mass(m.k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < m.k; ++c) mass[c] += resp(i, c);

  std::vector<bool> used(n, false);
  for (std::size_t c = 0; c < m.k; ++c) {
    auto mu = m.means.row(c);
    auto var = m.variances.row(c);
    if (mass[c] < 1e-10 * static_cast<double>(n) || mass[c] <= std::numeric_limits<double>::min()) {
      std::size_t worst = 0;
      double worst_ll = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i)
        if (!used[i] && point_ll[i] < worst_ll) {
          worst_ll = point_ll[i];
          worst = i;
        }
      used[worst] = true;
      std::copy(x.row(worst).begin(), x.row(worst).end(), mu.begin());
      const auto gv = feature_variance(x);
      for (std::size_t j = 0; j < d; ++j) var[j] = std::max(gv[j], m.variance_floor);
      mass[c] = 1.0;
      reseeded = true;
      log::warn("GMM component " + std::to_string(c) + " lost all responsibility; re-seeded on point " +
                std::to_string(worst));
      continue;
    }
    std::fill(mu.begin(), mu.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double r = resp(i, c);
      if (r == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) mu[j] += r * x(i, j);
    }
    for (double& v : mu) v /= mass[c];
    std::fill(var.begin(), var.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double r = resp(i, c);
      if (r == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) var[j] += r * (x(i, j) - mu[j]) * (x(i, j) - mu[j]);
    }
    for (double& v : var) v = std::max(v / mass[c], m.variance_floor);
  }
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  for (std::size_t c = 0; c < m.k; ++c) m.weights[c] = mass[c] / total;
  return reseeded;
}

/// k-means++ seeding followed by one hard-assignment M-step.
inline GmmModel kmeanspp_init(const Matrix& x, std::size_t k, double floor, Rng& rng) {
  const std::size_t n = x.rows;
  std::vector<std::size_t> centers;
  centers.push_back(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  auto sqdist = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) s += (x(a, j) - x(b, j)) * (x(a, j) - x(b, j));
    return s;
  };
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sqdist(i, centers.back()));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick + 1 < n; ++pick) {
        u -= d2[pick];
        if (u < 0.0) break;
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
    centers.push_back(pick);
  }

  GmmModel m;
  m.k = k;
  m.dim = x.cols;
  m.variance_floor = floor;
  m.weights.assign(k, 1.0 / static_cast<double>(k));
  m.means = Matrix(k, x.cols);
  m.variances = Matrix(k, x.cols, 1.0);
  for (std::size_t c = 0; c < k; ++c) std::copy(x.row(centers[c]).begin(), x.row(centers[c]).end(), m.means.row(c).begin());

  Matrix resp(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      const double dd = sqdist(i, centers[c]);
      if (dd < best_d) {
        best_d = dd;
        best = c;
      }
    }
    resp(i, best) = 1.0;
  }
  std::vector<double> point_ll(n, 0.0);
  m_step(m, x, resp, point_ll);
  return m;
}

}  // namespace detail

/// EM on rows already in normalized space. The returned model's
/// norm_stats are left empty.
inline GmmModel fit_gmm_normalized(const Matrix& x, const GmmOptions& opt) {
  if (opt.k == 0) throw ValidationError("GMM k must be >= 1");
  if (x.rows < opt.k)
    throw ValidationError("GMM needs N >= k (N=" + std::to_string(x.rows) + ", k=" + std::to_string(opt.k) + ")");
  if (opt.max_iters == 0) throw ValidationError("GMM max_iters must be >= 1");
  Rng rng = make_rng(opt.seed, 0x474d4d);  // "GMM"
  std::optional<GmmModel> best;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, opt.restarts); ++r) {
    GmmModel m = detail::kmeanspp_init(x, opt.k, opt.variance_floor, rng);
    Matrix resp;
    std::vector<double> point_ll;
    for (std::size_t it = 0; it < opt.max_iters; ++it) {
      const double ll = detail::e_step(m, x, resp, point_ll);
      if (!std::isfinite(ll)) throw NumericalError("GMM log-likelihood is not finite", "loglik");
      m.loglik_trace.push_back(ll);
      const std::size_t t = m.loglik_trace.size();
      if (t >= 2 && m.loglik_trace[t - 1] - m.loglik_trace[t - 2] < opt.tol) break;
      if (it + 1 == opt.max_iters) break;
      if (detail::m_step(m, x, resp, point_ll)) m.reseeded_at.push_back(t);
    }
    if (!best || m.loglik_trace.back() > best->loglik_trace.back()) best = std::move(m);
  }
  return *best;
}

/// Fits normalization stats on `data`, then EM in normalized space.
inline GmmModel fit_gmm(const EmbeddingDataset& data, const GmmOptions& opt) {
  if (data.size() < opt.k)
    throw ValidationError("GMM needs N >= k (N=" + std::to_string(data.size()) + ", k=" + std::to_string(opt.k) + ")");
  const auto stats = fit_normalizer(data);
  GmmModel m = fit_gmm_normalized(normalize_dataset(data, stats), opt);
  m.norm_stats = stats;
  return m;
}

inline GmmModel fit_gmm(const EmbeddingDataset& data, std::size_t k, std::uint64_t seed, std::size_t max_iters,
                        double tol) {
  GmmOptions opt;
  opt.k = k;
  opt.seed = seed;
  opt.max_iters = max_iters;
  opt.tol = tol;
  return fit_gmm(data, opt);
}

/// Index of the most probable component for a normalized point.
inline std::size_t most_probable_component(const GmmModel& m, std::span<const double> x) {
  std::vector<double> lj(m.k);
  detail::component_log_joint(m, x, lj);
  return static_cast<std::size_t>(std::max_element(lj.begin(), lj.end()) - lj.begin());
}

/// Per-dimension MSE between normalized points and the mean of their most
/// probable component.
inline double gmm_mse_normalized(const Matrix& x, const GmmModel& m) {
  if (x.cols != m.dim) throw ValidationError("gmm_mse: dimension mismatch");
  if (x.rows == 0) throw ValidationError("gmm_mse: no points");
  double total = 0.0;
  for (std::size_t i = 0; i < x.rows; ++i) {
    const auto mu = m.means.row(most_probable_component(m, x.row(i)));
    for (std::size_t j = 0; j < x.cols; ++j) total += (x(i, j) - mu[j]) * (x(i, j) - mu[j]);
  }
  return total / static_cast<double>(x.rows) / static_cast<double>(x.cols);
}

inline double gmm_mse(const EmbeddingDataset& data, const GmmModel& m) {
  if (data.dim() != m.dim) throw ValidationError("gmm_mse: dimension mismatch");
  return gmm_mse_normalized(normalize_dataset(data, m.norm_stats), m);
}

struct KScanEntry {
  std::size_t k = 0;
  std::optional<double> mse;  // empty when the fit failed
  std::string error;
};

struct KScanReport {
  std::vector<KScanEntry> entries;
  std::optional<std::size_t> selected_k;
};

inline constexpr double kScanImprovementThreshold = 0.05;

inline std::vector<std::size_t> default_scan_range() {
  std::vector<std::size_t> ks;
  for (std::size_t k = 3; k <= 150; ++k) ks.push_back(k);
  return ks;
}

/// Selected k: the smallest scanned k whose relative MSE improvement over the
/// previous successfully fitted k is below 5%; the last fitted k otherwise.
inline std::optional<std::size_t> select_k(const std::vector<KScanEntry>& entries) {
  std::optional<double> prev;
  std::optional<std::size_t> last;
  for (const auto& e : entries) {
    if (!e.mse) continue;
    if (prev) {
      const double improvement = *prev > 0.0 ? (*prev - *e.mse) / *prev : 0.0;
      if (improvement < kScanImprovementThreshold) return e.k;
    }
    prev = e.mse;
    last = e.k;
  }
  return last;
}

inline KScanReport scan_k(const EmbeddingDataset& data, std::vector<std::size_t> ks, const GmmOptions& base) {
  if (ks.empty()) throw ValidationError("scan_k: empty k list");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  if (ks.front() == 0) throw ValidationError("scan_k: k must be >= 1");
  const auto stats = fit_normalizer(data);
  const Matrix x = normalize_dataset(data, stats);
  KScanReport report;
  for (std::size_t k : ks) {
    KScanEntry e;
    e.k = k;
    try {
      GmmOptions opt = base;
      opt.k = k;
      const GmmModel m = fit_gmm_normalized(x, opt);
      e.mse = gmm_mse_normalized(x, m);
    } catch (const std::exception& err) {
      e.error = err.what();
      log::warn("scan_k: k=" + std::to_string(k) + " failed: " + e.error);
    }
    report.entries.push_back(std::move(e));
  }
  report.selected_k = select_k(report.entries);
  return report;
}

inline nlohmann::json to_json(const KScanReport& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& e : r.entries) {
    nlohmann::json row = {{"k", e.k}};
    if (e.mse) row["mse"] = *e.mse;
    else row["error"] = e.error;
    curve.push_back(std::move(row));
  }
  nlohmann::json j = {{"curve", curve}, {"improvement_threshold", kScanImprovementThreshold}};
  j["selected_k"] = r.selected_k ? nlohmann::json(*r.selected_k) : nlohmann::json();
  return j;
}

/// Ancestral draws in normalized space.
inline Matrix sample_gmm_normalized(const GmmModel& m, std::size_t count, std::uint64_t seed,
                                    std::vector<std::size_t>* components = nullptr) {
  m.validate();
  Rng rng = make_rng(seed, 0x47534d50);  // "GSMP"
  std::discrete_distribution<std::size_t> pick(m.weights.begin(), m.weights.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(count, m.dim);
  if (components) components->assign(count, 0);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = pick(rng);
    if (components) (*components)[i] = c;
    for (std::size_t j = 0; j < m.dim; ++j) out(i, j) = m.means(c, j) + std::sqrt(m.variances(c, j)) * normal(rng);
  }
  return out;
}

inline EmbeddingDataset sample_gmm(const GmmModel& m, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ValidationError("sample count must be positive");
  if (m.norm_stats.dim != m.dim) throw StateError("GMM has no normalization stats");
  Matrix y = sample_gmm_normalized(m, count, seed);
  Matrix x(y.rows, y.cols);
  for (std::size_t i = 0; i < y.rows; ++i) denormalize_into(y.row(i), m.norm_stats, x.row(i));
  return make_generated_dataset(x, seed, "gmm-sample k=" + std::to_string(m.k) + " seed=" + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr std::string_view kGmmMagic = "EMBGGMM1";

inline std::string encode_gmm(const GmmModel& m) {
  io::Container c;
  c.header = {{"format", "embgen-gmm"},
              {"k", m.k},
              {"dim", m.dim},
              {"weights", m.weights},
              {"variance_floor", m.variance_floor},
              {"loglik_trace", m.loglik_trace},
              {"metadata", m.metadata}};
  if (m.norm_stats.dim == m.dim) c.header["norm_stats"] = m.norm_stats;
  auto block = [](const char* name, const Matrix& mat) {
    io::NamedTensor t{name, {mat.rows, mat.cols}, {}};
    for (double v : mat.data) t.data.push_back(static_cast<float>(v));
    return t;
  };
  c.tensors.push_back(block("means", m.means));
  c.tensors.push_back(block("variances", m.variances));
  return io::encode_container(kGmmMagic, c);
}

inline GmmModel decode_gmm(std::string_view bytes) {
  auto c = io::decode_container(bytes, kGmmMagic);
  GmmModel m;
  try {
    m.k = c.header.at("k").get<std::size_t>();
    m.dim = c.header.at("dim").get<std::size_t>();
    m.weights = c.header.at("weights").get<std::vector<double>>();
    m.variance_floor = c.header.value("variance_floor", kVarianceFloor);
    m.loglik_trace = c.header.value("loglik_trace", std::vector<double>{});
    m.metadata = c.header.value("metadata", nlohmann::json::object());
    if (c.header.contains("norm_stats")) m.norm_stats = c.header["norm_stats"].get<NormalizationStats>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("GMM header: ") + e.what(), 20, "byte");
  }
  auto unpack = [&](const char* name) {
    const auto& t = c.tensor(name);
    if (t.shape != std::vector<std::size_t>{m.k, m.dim}) throw ValidationError(std::string("GMM block shape: ") + name);
    Matrix mat(m.k, m.dim);
    for (std::size_t i = 0; i < t.data.size(); ++i) mat.data[i] = t.data[i];
    return mat;
  };
  m.means = unpack("means");
  m.variances = unpack("variances");
  // float32 storage can round a floored variance just below the floor.
  for (double& v : m.variances.data) v = std::max(v, m.variance_floor);
  m.validate();
  return m;
}

inline void save_gmm(const GmmModel& m, const std::filesystem::path& path) { io::write_file_atomic(path, encode_gmm(m)); }

inline GmmModel load_gmm(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("GMM file not found: " + path.string());
  return decode_gmm(io::read_file(path));
}

}  // namespace embgen
