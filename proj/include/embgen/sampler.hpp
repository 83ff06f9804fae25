#pragma once

// Ancestral sampling from the top-down prior chain with temperature, and
// deterministic reconstruction through posterior means.

#include "embgen/common.hpp"
#include "embgen/embedding_store.hpp"
#include "embgen/hvae.hpp"

namespace embgen {

struct SampleRequest {
  std::size_t count = 1000;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (count == 0) throw ValidationError("sample count must be positive");
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw ValidationError("temperature must be >= 0");
  }
};

/// One prior-chain draw: z_l = prior_mean_l + temperature * prior_std_l * noise_l.
struct LatentDraw {
  std::vector<std::vector<double>> z;  // coarse-to-fine
  std::vector<double> x_mean;          // normalized space, decoder output
};

inline void require_usable(const HvaeModel& model) {
  if (model.params.size() == 0) throw StateError("model has no parameters");
  if (!model.has_norm_stats()) throw StateError("model has no normalization stats; train or load a checkpoint first");
}

inline LatentDraw draw_from_prior(const HvaeModel& model, std::span<const double> noise, double temperature) {
  if (noise.size() != model.spec.total_latent_dims()) throw ValidationError("draw_from_prior: noise length mismatch");
  ad::Tape tape;
  tape.set_tracking(false);
  detail::Graph graph(tape, model, nullptr);
  auto out = graph.run(detail::LatentSource::prior, {}, noise, nullptr, temperature);
  LatentDraw d;
  for (auto v : out.z) d.z.push_back(detail::to_vec(tape, v));
  d.x_mean = detail::to_vec(tape, out.x_mean);
  return d;
}

/// Conditional priors p(z_l | z_<l) evaluated along a given latent chain.
inline std::vector<GroupGaussian> prior_stats(const HvaeModel& model, const std::vector<std::vector<double>>& z) {
  ad::Tape tape;
  tape.set_tracking(false);
  detail::Graph graph(tape, model, nullptr);
  auto out = graph.run(detail::LatentSource::given, {}, {}, &z, 1.0);
  std::vector<GroupGaussian> priors;
  for (std::size_t l = 0; l < out.prior_mean.size(); ++l)
    priors.emplace_back(detail::to_vec(tape, out.prior_mean[l]), detail::to_vec(tape, out.prior_logvar[l]));
  return priors;
}

/// Decoder means in normalized space, one row per sample.
inline Matrix sample_normalized(const HvaeModel& model, const SampleRequest& req) {
  req.validate();
  Rng rng = make_rng(req.seed, 0x53414d50);  // "SAMP"
  Matrix out(req.count, model.spec.input_dim);
  std::vector<double> noise(model.spec.total_latent_dims());
  for (std::size_t i = 0; i < req.count; ++i) {
    fill_standard_normal(rng, noise);
    auto d = draw_from_prior(model, noise, req.temperature);
    std::copy(d.x_mean.begin(), d.x_mean.end(), out.row(i).begin());
  }
  return out;
}

/// Novel embeddings in the original feature scale. Speaker and utterance ids
/// are "gen-<seed>-<index>".
inline EmbeddingDataset sample_embeddings(const HvaeModel& model, const SampleRequest& req) {
  require_usable(model);
  Matrix y = sample_normalized(model, req);
  Matrix x(y.rows, y.cols);
  for (std::size_t i = 0; i < y.rows; ++i) denormalize_into(y.row(i), model.norm_stats, x.row(i));
  return make_generated_dataset(x, req.seed,
                                "hvae-sample seed=" + std::to_string(req.seed) +
                                    " temperature=" + nlohmann::json(req.temperature).dump());
}

/// Posterior-mean encode then decode, in normalized space.
inline std::vector<double> reconstruct_normalized(const HvaeModel& model, std::span<const double> x_norm) {
  detail::check_input(model, x_norm);
  ad::Tape tape;
  tape.set_tracking(false);
  detail::Graph graph(tape, model, nullptr);
  auto out = graph.run(detail::LatentSource::posterior_mean, x_norm, {}, nullptr, 1.0);
  return detail::to_vec(tape, out.x_mean);
}

/// Raw-scale input to raw-scale reconstruction.
inline std::vector<double> reconstruct(const HvaeModel& model, std::span<const double> x) {
  require_usable(model);
  detail::check_input(model, x);
  auto y = reconstruct_normalized(model, normalize(x, model.norm_stats));
  return denormalize(y, model.norm_stats);
}

}  // namespace embgen
