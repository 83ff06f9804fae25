#pragma once

// Hierarchical VAE over flat embedding vectors treated as 1-channel
// sequences. Groups are ordered coarse-to-fine; group l's prior is produced
// by the top-down decoder state after groups < l, and its posterior is a
// residual correction of that prior from the bottom-up encoder features.

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "embgen/autodiff.hpp"
#include "embgen/common.hpp"
#include "embgen/container.hpp"
#include "embgen/embedding_store.hpp"

namespace embgen {

inline constexpr double kLogVarMin = -8.0;
inline constexpr double kLogVarMax = 4.0;
inline constexpr double kDefaultFreeBits = 0.1;

inline double clamp_logvar(double v) { return std::clamp(v, kLogVarMin, kLogVarMax); }

enum class CellKind { automatic, conv, affine };

inline const char* to_string(CellKind k) {
  switch (k) {
    case CellKind::conv: return "conv";
    case CellKind::affine: return "affine";
    default: return "auto";
  }
}

inline CellKind cell_kind_from_string(std::string_view s) {
  if (s == "conv") return CellKind::conv;
  if (s == "affine") return CellKind::affine;
  if (s == "auto" || s == "automatic") return CellKind::automatic;
  throw ValidationError("unknown cell kind: " + std::string(s));
}

struct LatentHierarchySpec {
  std::size_t levels = 2;
  std::size_t groups_per_level = 5;
  std::size_t dims_per_group = 20;
  std::size_t hidden_size = 64;
  std::size_t input_dim = 1024;
  CellKind cell = CellKind::automatic;

  std::size_t total_groups() const noexcept { return levels * groups_per_level; }
  std::size_t total_latent_dims() const noexcept { return total_groups() * dims_per_group; }

  /// Coarsest sequence length in convolutional mode.
  std::size_t coarsest_length() const noexcept { return input_dim >> (levels - 1); }

  bool conv_compatible() const noexcept {
    if (levels > 24) return false;
    const std::size_t step = std::size_t{1} << (levels - 1);
    return input_dim % step == 0 && input_dim / step >= 4;
  }

  CellKind resolved_cell() const {
    if (cell == CellKind::automatic) return conv_compatible() ? CellKind::conv : CellKind::affine;
    return cell;
  }

  void validate() const {
    if (levels == 0 || groups_per_level == 0 || dims_per_group == 0 || hidden_size == 0 || input_dim == 0)
      throw ValidationError("latent hierarchy fields must all be >= 1");
    if (cell == CellKind::conv && !conv_compatible())
      throw ValidationError("input_dim " + std::to_string(input_dim) + " cannot be halved " +
                            std::to_string(levels - 1) + " times to a length >= 4; use the affine cell");
  }

  bool operator==(const LatentHierarchySpec&) const = default;
};

inline void to_json(nlohmann::json& j, const LatentHierarchySpec& s) {
  j = nlohmann::json{{"levels", s.levels},       {"groups_per_level", s.groups_per_level},
                     {"dims_per_group", s.dims_per_group}, {"hidden_size", s.hidden_size},
                     {"input_dim", s.input_dim}, {"cell", to_string(s.cell)}};
}

inline void from_json(const nlohmann::json& j, LatentHierarchySpec& s) {
  s.levels = j.at("levels").get<std::size_t>();
  s.groups_per_level = j.at("groups_per_level").get<std::size_t>();
  s.dims_per_group = j.at("dims_per_group").get<std::size_t>();
  s.hidden_size = j.at("hidden_size").get<std::size_t>();
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.cell = cell_kind_from_string(j.value("cell", std::string("auto")));
  s.validate();
}

// ---------------------------------------------------------------------------
// Parameters

struct ParamTensor {
  std::string name;
  ad::Shape shape;
  std::vector<double> value;
};

class ParamSet {
 public:
  std::size_t add(std::string name, ad::Shape shape) {
    index_[name] = tensors_.size();
    tensors_.push_back({std::move(name), shape, std::vector<double>(shape.size(), 0.0)});
    return tensors_.size() - 1;
  }

  std::size_t size() const noexcept { return tensors_.size(); }
  ParamTensor& operator[](std::size_t i) { return tensors_[i]; }
  const ParamTensor& operator[](std::size_t i) const { return tensors_[i]; }
  std::vector<ParamTensor>& tensors() noexcept { return tensors_; }
  const std::vector<ParamTensor>& tensors() const noexcept { return tensors_; }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.value.size();
    return n;
  }

  bool operator==(const ParamSet& o) const {
    if (tensors_.size() != o.tensors_.size()) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      if (tensors_[i].name != o.tensors_[i].name || tensors_[i].value != o.tensors_[i].value) return false;
    return true;
  }

 private:
  std::vector<ParamTensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// One gradient buffer per parameter tensor, same order and sizes.
using GradientSet = std::vector<std::vector<double>>;

inline GradientSet zero_gradients(const ParamSet& params) {
  GradientSet g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) g[i].assign(params[i].value.size(), 0.0);
  return g;
}

namespace detail {

struct CellIndex {
  std::size_t w1, b1, w2, b2;
};

struct GroupIndex {
  std::optional<std::size_t> prior_w, prior_b;  // absent for the first group
  std::size_t post_w, post_b, inject_w, inject_b;
  CellIndex cell;
};

/// Parameter indices and derived geometry for a spec.
struct HvaeLayout {
  CellKind cell = CellKind::affine;
  std::size_t kernel = 1;
  std::vector<std::size_t> length;  // per level, coarse-to-fine
  std::vector<std::size_t> bins;    // pooled width of per-group heads
  std::size_t stem_w = 0, stem_b = 0;
  std::vector<CellIndex> enc_cell;                                 // per level
  std::vector<std::optional<std::array<std::size_t, 2>>> down;    // per level; level j -> j-1
  std::size_t s0 = 0;
  std::vector<GroupIndex> group;
  std::vector<std::optional<std::array<std::size_t, 2>>> up;      // per level; level j -> j+1
  std::size_t out_w = 0, out_b = 0;
  std::size_t obs_logvar = 0;
};

inline constexpr std::size_t kMaxHeadBins = 8;

inline std::size_t head_bins(std::size_t length) {
  for (std::size_t b = std::min(length, kMaxHeadBins); b > 1; --b)
    if (length % b == 0) return b;
  return 1;
}

}  // namespace detail

struct HvaeModel {
  LatentHierarchySpec spec;
  ParamSet params;
  detail::HvaeLayout layout;
  NormalizationStats norm_stats;  // dim 0 until fitted by the trainer or loaded
  double free_bits_lambda = kDefaultFreeBits;
  nlohmann::json schedule = nlohmann::json::object();

  bool has_norm_stats() const noexcept { return norm_stats.dim == spec.input_dim && norm_stats.dim > 0; }

  std::span<const double> obs_logvar() const { return params[layout.obs_logvar].value; }

  /// Tensor names of the inference network (φ) and generator (θ).
  std::vector<std::string> encoder_param_names() const { return names_with_prefix("enc."); }
  std::vector<std::string> decoder_param_names() const {
    auto out = names_with_prefix("dec.");
    out.push_back(params[layout.obs_logvar].name);
    return out;
  }

 private:
  std::vector<std::string> names_with_prefix(std::string_view prefix) const {
    std::vector<std::string> out;
    for (const auto& t : params.tensors())
      if (t.name.starts_with(prefix)) out.push_back(t.name);
    return out;
  }
};

namespace detail {

inline void init_tensor(ParamTensor& t, Rng& rng, std::size_t fan_in, double gain) {
  std::normal_distribution<double> normal(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
  for (double& v : t.value) v = normal(rng);
}

/// Declares every parameter tensor for `spec` (values zero) and records
/// their indices.
inline HvaeLayout declare_parameters(const LatentHierarchySpec& spec, ParamSet& p) {
  HvaeLayout lay;
  lay.cell = spec.resolved_cell();
  const bool conv = lay.cell == CellKind::conv;
  lay.kernel = conv ? 3 : 1;
  const std::size_t C = spec.hidden_size, K = spec.dims_per_group, D = spec.input_dim;
  const std::size_t Lv = spec.levels, G = spec.groups_per_level;
  for (std::size_t j = 0; j < Lv; ++j) {
    const std::size_t len = conv ? (D >> (Lv - 1 - j)) : 1;
    lay.length.push_back(len);
    lay.bins.push_back(head_bins(len));
  }
  const std::size_t k = lay.kernel;
  auto cell = [&](const std::string& base) {
    CellIndex c{};
    c.w1 = p.add(base + ".conv1.w", {C, C * k});
    c.b1 = p.add(base + ".conv1.b", {C, 1});
    c.w2 = p.add(base + ".conv2.w", {C, C * k});
    c.b2 = p.add(base + ".conv2.b", {C, 1});
    return c;
  };

  if (conv) {
    lay.stem_w = p.add("enc.stem.w", {C, 1 * k});
  } else {
    lay.stem_w = p.add("enc.stem.w", {C, D});
  }
  lay.stem_b = p.add("enc.stem.b", {C, 1});
  lay.enc_cell.resize(Lv);
  lay.down.resize(Lv);
  for (std::size_t jj = Lv; jj-- > 0;) {
    lay.enc_cell[jj] = cell("enc.level" + std::to_string(jj));
    if (conv && jj > 0) {
      lay.down[jj] = std::array<std::size_t, 2>{p.add("enc.down" + std::to_string(jj) + ".w", {C, C * k}),
                                                p.add("enc.down" + std::to_string(jj) + ".b", {C, 1})};
    }
  }

  lay.s0 = p.add("dec.s0", {C, lay.length[0]});
  lay.up.resize(Lv);
  for (std::size_t l = 0; l < spec.total_groups(); ++l) {
    const std::size_t j = l / G;
    const std::size_t P = lay.bins[j];
    const std::string base = "dec.group" + std::to_string(l);
    GroupIndex g{};
    if (l > 0) {
      g.prior_w = p.add(base + ".prior.w", {2 * K, C * P});
      g.prior_b = p.add(base + ".prior.b", {2 * K, 1});
    }
    g.post_w = p.add(base + ".posterior.w", {2 * K, 2 * C * P});
    g.post_b = p.add(base + ".posterior.b", {2 * K, 1});
    g.inject_w = p.add(base + ".inject.w", {C * P, K});
    g.inject_b = p.add(base + ".inject.b", {C * P, 1});
    g.cell = cell(base + ".cell");
    lay.group.push_back(g);
    if (conv && (l + 1) % G == 0 && j + 1 < Lv) {
      lay.up[j] = std::array<std::size_t, 2>{p.add("dec.up" + std::to_string(j) + ".w", {C, C * k}),
                                             p.add("dec.up" + std::to_string(j) + ".b", {C, 1})};
    }
  }
  if (conv) {
    lay.out_w = p.add("dec.out.w", {1, C * k});
    lay.out_b = p.add("dec.out.b", {1, 1});
  } else {
    lay.out_w = p.add("dec.out.w", {D, C});
    lay.out_b = p.add("dec.out.b", {D, 1});
  }
  lay.obs_logvar = p.add("obs.logvar", {D, 1});
  return lay;
}

}  // namespace detail

/// Deterministic in (spec, seed).
inline HvaeModel build_model(const LatentHierarchySpec& spec, std::uint64_t seed) {
  spec.validate();
  HvaeModel m;
  m.spec = spec;
  m.layout = detail::declare_parameters(spec, m.params);
  Rng rng = make_rng(seed, 0x48564145);  // "HVAE"
  const std::size_t k = m.layout.kernel, C = spec.hidden_size;
  for (auto& t : m.params.tensors()) {
    const std::string& n = t.name;
    if (n.ends_with(".b") || n == "obs.logvar") continue;  // zero
    if (n == "dec.s0") {
      detail::init_tensor(t, rng, 1, 1.0);
    } else if (n.ends_with("conv2.w")) {
      detail::init_tensor(t, rng, C * k, 0.1);
    } else if (n.ends_with("posterior.w") || n.ends_with("prior.w")) {
      detail::init_tensor(t, rng, t.shape.length, 0.1);
    } else {
      detail::init_tensor(t, rng, t.shape.length, 1.0);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Distributions

struct GroupGaussian {
  std::vector<double> mean;
  std::vector<double> logvar;

  GroupGaussian() = default;
  GroupGaussian(std::vector<double> m, std::vector<double> lv) : mean(std::move(m)), logvar(std::move(lv)) {
    if (mean.size() != logvar.size()) throw ValidationError("GroupGaussian: mean/logvar size mismatch");
    for (double& v : logvar) v = clamp_logvar(v);
  }
  std::size_t dim() const noexcept { return mean.size(); }
};

/// mean + exp(logvar / 2) * noise
inline std::vector<double> reparameterize(const GroupGaussian& g, std::span<const double> noise) {
  if (noise.size() != g.dim()) throw ValidationError("reparameterize: noise length mismatch");
  std::vector<double> z(g.dim());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = g.mean[i] + std::exp(0.5 * g.logvar[i]) * noise[i];
  return z;
}

/// KL(q || p) in nats, summed over dimensions.
inline double kl_gaussian(const GroupGaussian& q, const GroupGaussian& p) {
  if (q.dim() != p.dim()) throw ValidationError("kl_gaussian: dimension mismatch");
  return ad::kl_diag_value(q.mean, q.logvar, p.mean, p.logvar);
}

// ---------------------------------------------------------------------------
// Forward graph

namespace detail {

enum class LatentSource { posterior_sample, posterior_mean, given, prior };

struct PassOutputs {
  std::vector<ad::Var> prior_mean, prior_logvar, post_mean, post_logvar, z;
  ad::Var x_mean, x_logvar;
};

class Graph {
 public:
  Graph(ad::Tape& tape, const HvaeModel& model, GradientSet* grads)
      : t_(tape), m_(model), grads_(grads), cache_(model.params.size(), -1) {}

  ad::Var param(std::size_t idx) {
    if (cache_[idx] < 0) {
      const auto& pt = m_.params[idx];
      std::span<double> g;
      if (grads_ != nullptr) g = (*grads_)[idx];
      cache_[idx] = t_.parameter(pt.value, g, pt.shape).id;
    }
    return ad::Var{static_cast<std::uint32_t>(cache_[idx])};
  }

  ad::Var conv(ad::Var x, std::size_t w, std::size_t b, std::size_t stride = 1) {
    const std::size_t k = m_.layout.kernel;
    return ad::conv1d(t_, x, param(w), param(b), k, stride, k / 2);
  }

  ad::Var cell(ad::Var h, const CellIndex& c) {
    ad::Var a = conv(ad::swish(t_, h), c.w1, c.b1);
    a = conv(ad::swish(t_, a), c.w2, c.b2);
    return ad::add(t_, h, a);
  }

  ad::Var head(ad::Var s, std::size_t w, std::size_t b, std::size_t bins, std::size_t out) {
    ad::Var a = ad::avg_pool(t_, ad::swish(t_, s), bins);
    return ad::linear(t_, a, param(w), param(b), {out, 1});
  }

  PassOutputs run(LatentSource source, std::span<const double> x, std::span<const double> noise,
                  const std::vector<std::vector<double>>* given, double temperature) {
    const auto& spec = m_.spec;
    const auto& lay = m_.layout;
    const bool conv_mode = lay.cell == CellKind::conv;
    const std::size_t C = spec.hidden_size, K = spec.dims_per_group, D = spec.input_dim;
    const std::size_t Lv = spec.levels, G = spec.groups_per_level, L = spec.total_groups();
    const bool use_posterior = source == LatentSource::posterior_sample || source == LatentSource::posterior_mean;

    std::vector<ad::Var> feat(Lv);
    if (use_posterior) {
      ad::Var xin = t_.constant(std::vector<double>(x.begin(), x.end()), {1, D});
      ad::Var h = conv_mode ? conv(xin, lay.stem_w, lay.stem_b)
                            : ad::linear(t_, xin, param(lay.stem_w), param(lay.stem_b), {C, 1});
      for (std::size_t j = Lv; j-- > 0;) {
        h = cell(h, lay.enc_cell[j]);
        feat[j] = h;
        if (lay.down[j]) h = conv(ad::swish(t_, h), (*lay.down[j])[0], (*lay.down[j])[1], 2);
      }
    }

    PassOutputs out;
    ad::Var zeros = t_.constant(std::vector<double>(K, 0.0), {K, 1});
    ad::Var s = param(lay.s0);
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t j = l / G;
      const auto& g = lay.group[l];
      const std::size_t P = lay.bins[j];
      ad::Var pm = zeros, plv = zeros;
      if (l > 0) {
        ad::Var ph = head(s, *g.prior_w, *g.prior_b, P, 2 * K);
        pm = ad::slice(t_, ph, 0, K);
        plv = ad::clamp(t_, ad::slice(t_, ph, K, K), kLogVarMin, kLogVarMax);
      }
      out.prior_mean.push_back(pm);
      out.prior_logvar.push_back(plv);

      ad::Var z;
      if (use_posterior) {
        ad::Var qh = head(ad::concat_channels(t_, s, feat[j]), g.post_w, g.post_b, P, 2 * K);
        ad::Var qm = ad::add(t_, pm, ad::slice(t_, qh, 0, K));
        ad::Var qlv = ad::clamp(t_, ad::add(t_, plv, ad::slice(t_, qh, K, K)), kLogVarMin, kLogVarMax);
        out.post_mean.push_back(qm);
        out.post_logvar.push_back(qlv);
        z = source == LatentSource::posterior_mean ? qm : ad::reparameterize(t_, qm, qlv, noise.subspan(l * K, K));
      } else if (source == LatentSource::given) {
        z = t_.constant((*given)[l], {K, 1});
      } else {
        std::vector<double> eps(noise.begin() + l * K, noise.begin() + (l + 1) * K);
        for (double& e : eps) e *= temperature;
        z = ad::reparameterize(t_, pm, plv, eps);
      }
      out.z.push_back(z);

      ad::Var inj = ad::linear(t_, z, param(g.inject_w), param(g.inject_b), {C, P});
      s = ad::add(t_, s, ad::upsample(t_, inj, lay.length[j]));
      s = cell(s, g.cell);
      if ((l + 1) % G == 0 && lay.up[j]) {
        ad::Var u = ad::upsample(t_, ad::swish(t_, s), lay.length[j + 1]);
        s = conv(u, (*lay.up[j])[0], (*lay.up[j])[1]);
      }
    }

    ad::Var a = ad::swish(t_, s);
    ad::Var pre = conv_mode ? conv(a, lay.out_w, lay.out_b)
                            : ad::linear(t_, a, param(lay.out_w), param(lay.out_b), {D, 1});
    out.x_mean = ad::tanh(t_, pre);
    out.x_logvar = param(lay.obs_logvar);
    return out;
  }

 private:
  ad::Tape& t_;
  const HvaeModel& m_;
  GradientSet* grads_;
  std::vector<std::int64_t> cache_;
};

inline std::vector<double> to_vec(const ad::Tape& t, ad::Var v) {
  auto s = t.value(v);
  return {s.begin(), s.end()};
}

inline void check_input(const HvaeModel& model, std::span<const double> x) {
  if (x.size() != model.spec.input_dim)
    throw ValidationError("input has dimension " + std::to_string(x.size()) + ", model expects " +
                          std::to_string(model.spec.input_dim));
}

}  // namespace detail

/// Posterior statistics for every group, coarse-to-fine; each group
/// conditions on the posterior means of the coarser groups.
inline std::vector<GroupGaussian> encode(const HvaeModel& model, std::span<const double> x_norm) {
  detail::check_input(model, x_norm);
  ad::Tape tape;
  tape.set_tracking(false);
  detail::Graph graph(tape, model, nullptr);
  auto out = graph.run(detail::LatentSource::posterior_mean, x_norm, {}, nullptr, 1.0);
  std::vector<GroupGaussian> groups;
  for (std::size_t l = 0; l < out.post_mean.size(); ++l)
    groups.emplace_back(detail::to_vec(tape, out.post_mean[l]), detail::to_vec(tape, out.post_logvar[l]));
  return groups;
}

struct DecodedObservation {
  std::vector<double> mean;
  std::vector<double> logvar;
};

inline DecodedObservation decode(const HvaeModel& model, const std::vector<std::vector<double>>& z) {
  if (z.size() != model.spec.total_groups())
    throw ValidationError("decode: expected " + std::to_string(model.spec.total_groups()) + " latent groups, got " +
                          std::to_string(z.size()));
  for (const auto& g : z)
    if (g.size() != model.spec.dims_per_group)
      throw ValidationError("decode: latent group has " + std::to_string(g.size()) + " dims, expected " +
                            std::to_string(model.spec.dims_per_group));
  ad::Tape tape;
  tape.set_tracking(false);
  detail::Graph graph(tape, model, nullptr);
  auto out = graph.run(detail::LatentSource::given, {}, {}, &z, 1.0);
  return {detail::to_vec(tape, out.x_mean), detail::to_vec(tape, out.x_logvar)};
}

struct ElboBreakdown {
  double recon_loglik = 0.0;
  std::vector<double> kl_per_group;
  std::vector<double> kl_clamped_per_group;
  double beta = 1.0;
  double total_loss = 0.0;
};

/// Single-sample reparameterized ELBO estimate with `noise` (L x K standard
/// normals, group-major). When `grads` is given, weight * d(total_loss)/dθ is
/// accumulated into it.
inline ElboBreakdown elbo(const HvaeModel& model, std::span<const double> x_norm, std::span<const double> noise,
                          double beta, double free_bits_lambda, GradientSet* grads = nullptr, double weight = 1.0) {
  detail::check_input(model, x_norm);
  if (noise.size() != model.spec.total_latent_dims())
    throw ValidationError("elbo: noise length " + std::to_string(noise.size()) + ", expected " +
                          std::to_string(model.spec.total_latent_dims()));
  if (!(beta >= 0.0 && beta <= 1.0)) throw ValidationError("elbo: beta must lie in [0, 1]");
  if (!(free_bits_lambda >= 0.0)) throw ValidationError("elbo: free_bits_lambda must be >= 0");

  ad::Tape tape;
  tape.set_tracking(grads != nullptr);
  detail::Graph graph(tape, model, grads);
  auto out = graph.run(detail::LatentSource::posterior_sample, x_norm, noise, nullptr, 1.0);

  ElboBreakdown e;
  e.beta = beta;
  ad::Var recon = ad::gaussian_log_density(tape, x_norm, out.x_mean, out.x_logvar);
  e.recon_loglik = tape.scalar(recon);
  if (!std::isfinite(e.recon_loglik)) throw NumericalError("non-finite reconstruction log-likelihood", "recon_loglik");

  std::vector<ad::Var> terms{recon};
  std::vector<double> coeffs{-1.0};
  double kl_sum = 0.0;
  for (std::size_t l = 0; l < out.post_mean.size(); ++l) {
    ad::Var kl = ad::kl_diag(tape, out.post_mean[l], out.post_logvar[l], out.prior_mean[l], out.prior_logvar[l]);
    const double v = tape.scalar(kl);
    if (!std::isfinite(v)) throw NumericalError("non-finite KL in group " + std::to_string(l), "kl[" + std::to_string(l) + "]");
    ad::Var clamped = ad::floor_at(tape, kl, free_bits_lambda);
    e.kl_per_group.push_back(v);
    e.kl_clamped_per_group.push_back(tape.scalar(clamped));
    kl_sum += tape.scalar(clamped);
    terms.push_back(clamped);
    coeffs.push_back(beta);
  }
  e.total_loss = -e.recon_loglik + beta * kl_sum;
  if (!std::isfinite(e.total_loss)) throw NumericalError("non-finite total loss", "total_loss");

  if (grads != nullptr) {
    ad::Var total = ad::weighted_sum(tape, terms, coeffs);
    tape.backward(total, weight);
  }
  return e;
}

inline ElboBreakdown elbo(const HvaeModel& model, std::span<const double> x_norm, Rng& noise_source, double beta,
                          double free_bits_lambda) {
  std::vector<double> noise(model.spec.total_latent_dims());
  fill_standard_normal(noise_source, noise);
  return elbo(model, x_norm, noise, beta, free_bits_lambda);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::string_view kCheckpointMagic = "EMBGHVAE";

/// Parameters are stored as float32; decoding yields float-exact doubles, so
/// encode(decode(bytes)) reproduces `bytes`.
inline std::string encode_checkpoint(const HvaeModel& m) {
  io::Container c;
  c.header = {{"format", "embgen-hvae"},
              {"spec", m.spec},
              {"free_bits_lambda", m.free_bits_lambda},
              {"schedule", m.schedule}};
  if (m.has_norm_stats()) c.header["norm_stats"] = m.norm_stats;
  for (const auto& t : m.params.tensors()) {
    io::NamedTensor nt{t.name, {t.shape.channels, t.shape.length}, {}};
    nt.data.reserve(t.value.size());
    for (double v : t.value) nt.data.push_back(static_cast<float>(v));
    c.tensors.push_back(std::move(nt));
  }
  return io::encode_container(kCheckpointMagic, c);
}

inline HvaeModel decode_checkpoint(std::string_view bytes) {
  auto c = io::decode_container(bytes, kCheckpointMagic);
  if (c.header.value("format", std::string()) != "embgen-hvae")
    throw ParseError("checkpoint header has wrong format tag", 20, "byte");
  HvaeModel m;
  try {
    m = build_model(c.header.at("spec").get<LatentHierarchySpec>(), 0);
    m.free_bits_lambda = c.header.at("free_bits_lambda").get<double>();
    m.schedule = c.header.value("schedule", nlohmann::json::object());
    if (c.header.contains("norm_stats")) m.norm_stats = c.header["norm_stats"].get<NormalizationStats>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what(), 20, "byte");
  }
  if (c.tensors.size() != m.params.size())
    throw ValidationError("checkpoint has " + std::to_string(c.tensors.size()) + " tensors, spec implies " +
                          std::to_string(m.params.size()));
  for (const auto& nt : c.tensors) {
    auto idx = m.params.find(nt.name);
    if (!idx) throw ValidationError("checkpoint tensor not in model: " + nt.name);
    auto& pt = m.params[*idx];
    if (nt.data.size() != pt.value.size() || nt.shape != std::vector<std::size_t>{pt.shape.channels, pt.shape.length})
      throw ValidationError("checkpoint tensor shape mismatch: " + nt.name);
    for (std::size_t i = 0; i < nt.data.size(); ++i) pt.value[i] = nt.data[i];
  }
  for (double& v : m.params[m.layout.obs_logvar].value) v = clamp_logvar(v);
  return m;
}

inline void save_checkpoint(const HvaeModel& m, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(m));
}

inline HvaeModel load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("checkpoint not found: " + path.string());
  return decode_checkpoint(io::read_file(path));
}

}  // namespace embgen
