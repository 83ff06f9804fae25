#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <utility>

#include <nlohmann/json.hpp>

#include "embgen/common.hpp"
#include "embgen/embedding_store.hpp"
#include "embgen/hvae.hpp"

namespace embgen {

struct TrainConfig {
  std::size_t epochs = 1000;
  std::size_t batch_size = 1024;
  double learning_rate = 1e-3;
  double warmup_fraction = 0.3;
  double free_bits_lambda = kDefaultFreeBits;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 100;
  double grad_clip_norm = 100.0;
  std::filesystem::path checkpoint_path;  // empty: no checkpoints
  std::filesystem::path telemetry_path;   // empty: no telemetry file

  void validate() const {
    if (batch_size == 0) throw ValidationError("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0))
      throw ValidationError("warmup_fraction must lie in [0, 1]");
    if (!(free_bits_lambda >= 0.0)) throw ValidationError("free_bits_lambda must be non-negative");
    if (checkpoint_every == 0) throw ValidationError("checkpoint_every must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"warmup_fraction", c.warmup_fraction},
                     {"free_bits_lambda", c.free_bits_lambda},
                     {"seed", c.seed},
                     {"checkpoint_every", c.checkpoint_every},
                     {"grad_clip_norm", c.grad_clip_norm}};
}

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_total_loss = 0.0;
  double mean_recon_loglik = 0.0;
  std::vector<double> mean_kl_per_group;
  double beta = 0.0;
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch},
                     {"mean_total_loss", r.mean_total_loss},
                     {"mean_recon_loglik", r.mean_recon_loglik},
                     {"mean_kl_per_group", r.mean_kl_per_group},
                     {"beta", r.beta}};
}

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;
  std::filesystem::path final_checkpoint;
};

/// Training aborted on a non-finite quantity; the last checkpoint on disk
/// (if any) predates the failing epoch.
class TrainingAborted : public NumericalError {
 public:
  TrainingAborted(const NumericalError& cause, std::size_t epoch, std::size_t batch)
      : NumericalError("training aborted at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                           ": " + cause.what(),
                       cause.term()),
        epoch_(epoch),
        batch_(batch) {}
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_, batch_;
};

/// Linear KL warmup: min(1, epoch / (warmup_fraction * epochs)); 1 when
/// there is no warmup.
inline double warmup_beta(std::size_t epoch, const TrainConfig& config) {
  const double span = config.warmup_fraction * static_cast<double>(config.epochs);
  if (!(span > 0.0)) return 1.0;
  return std::min(1.0, static_cast<double>(epoch) / span);
}

/// Adam with bias correction.
class AdamOptimizer {
 public:
  AdamOptimizer(const ParamSet& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(zero_gradients(params)), v_(zero_gradients(params)) {}

  void step(ParamSet& params, const GradientSet& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].value;
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double g = grads[i][k];
        m_[i][k] = b1_ * m_[i][k] + (1.0 - b1_) * g;
        v_[i][k] = b2_ * v_[i][k] + (1.0 - b2_) * g * g;
        p[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  GradientSet m_, v_;
};

inline double global_norm(const GradientSet& g) {
  double ss = 0.0;
  for (const auto& t : g)
    for (double v : t) ss += v * v;
  return std::sqrt(ss);
}

/// Rescales `g` so its global L2 norm is at most `max_norm`. Returns the
/// pre-clip norm.
inline double clip_global_norm(GradientSet& g, double max_norm) {
  const double n = global_norm(g);
  if (n > max_norm && n > 0.0) {
    const double s = max_norm / n;
    for (auto& t : g)
      for (double& v : t) v *= s;
  }
  return n;
}

/// Optimizes `model` on `data` (raw embedding scale). Normalization stats are
/// fitted on `data` unless the model already carries them. Single-threaded and
/// deterministic in (model, data, config).
inline std::pair<HvaeModel, TrainReport> train(HvaeModel model, const EmbeddingDataset& data,
                                               const TrainConfig& config) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainReport report;
  if (config.epochs == 0) return {std::move(model), std::move(report)};
  if (data.dim() != model.spec.input_dim)
    throw ValidationError("dataset dimension " + std::to_string(data.dim()) + " does not match model input_dim " +
                          std::to_string(model.spec.input_dim));

  if (!model.has_norm_stats()) model.norm_stats = fit_normalizer(data);
  model.free_bits_lambda = config.free_bits_lambda;
  const Matrix x = normalize_dataset(data, model.norm_stats);
  const std::size_t n = x.rows;
  const std::size_t L = model.spec.total_groups();
  const std::size_t latent = model.spec.total_latent_dims();

  Rng shuffle_rng = make_rng(config.seed, 1);
  Rng noise_rng = make_rng(config.seed, 2);
  AdamOptimizer adam(model.params, config.learning_rate);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> noise(latent);

  std::optional<std::ofstream> telemetry;
  if (!config.telemetry_path.empty()) {
    if (config.telemetry_path.has_parent_path()) std::filesystem::create_directories(config.telemetry_path.parent_path());
    telemetry.emplace(config.telemetry_path, std::ios::binary | std::ios::trunc);
    if (!*telemetry) throw ValidationError("cannot write telemetry: " + config.telemetry_path.string());
  }

  auto write_checkpoint = [&](std::size_t epochs_done, double beta) {
    model.schedule = {{"epochs_completed", epochs_done}, {"beta", beta}, {"optimizer_steps", adam.steps()},
                      {"config", config}};
    if (!config.checkpoint_path.empty()) {
      save_checkpoint(model, config.checkpoint_path);
      report.final_checkpoint = config.checkpoint_path;
    }
  };

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double beta = warmup_beta(epoch, config);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.beta = beta;
    rec.mean_kl_per_group.assign(L, 0.0);

    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(n, start + config.batch_size);
      const double weight = 1.0 / static_cast<double>(end - start);
      GradientSet grads = zero_gradients(model.params);
      try {
        for (std::size_t b = start; b < end; ++b) {
          fill_standard_normal(noise_rng, noise);
          const auto e = elbo(model, x.row(order[b]), noise, beta, config.free_bits_lambda, &grads, weight);
          rec.mean_total_loss += e.total_loss;
          rec.mean_recon_loglik += e.recon_loglik;
          for (std::size_t l = 0; l < L; ++l) rec.mean_kl_per_group[l] += e.kl_per_group[l];
        }
        const double norm = clip_global_norm(grads, config.grad_clip_norm);
        if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm", "gradient");
      } catch (const NumericalError& err) {
        throw TrainingAborted(err, epoch, batch_index);
      }
      adam.step(model.params, grads);
      for (double& v : model.params[model.layout.obs_logvar].value) v = clamp_logvar(v);
    }

    const double inv_n = 1.0 / static_cast<double>(n);
    rec.mean_total_loss *= inv_n;
    rec.mean_recon_loglik *= inv_n;
    for (double& k : rec.mean_kl_per_group) k *= inv_n;
    if (telemetry) {
      *telemetry << nlohmann::json(rec).dump() << '\n';
      telemetry->flush();
    }
    log::debug("epoch " + std::to_string(epoch) + " loss " + std::to_string(rec.mean_total_loss));
    report.epochs.push_back(std::move(rec));

    if ((epoch + 1) % config.checkpoint_every == 0 || epoch + 1 == config.epochs) write_checkpoint(epoch + 1, beta);
  }

  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log::info("training finished in " + std::to_string(report.wall_seconds) + " s");
  return {std::move(model), std::move(report)};
}

}  // namespace embgen
