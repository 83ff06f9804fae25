#pragma once

// Planted synthetic corpora with known ground truth.

#include <cstdio>

#include <nlohmann/json.hpp>

#include "embgen/common.hpp"
#include "embgen/embedding_store.hpp"

namespace embgen {

/// Speakers grouped into clusters: cluster centers ~ N(0, cluster_spread^2 I),
/// speaker centers ~ N(cluster center, center_spread^2 I), utterances ~
/// N(speaker center, within_std^2 I). Speaker s belongs to cluster s mod clusters.
struct SynthConfig {
  std::size_t speakers = 10;
  std::size_t utterances_per_speaker = 20;
  std::size_t dim = 16;
  std::size_t clusters = 2;
  double cluster_spread = 1.0;
  double center_spread = 0.5;
  double within_std = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (speakers == 0 || utterances_per_speaker == 0 || dim == 0 || clusters == 0)
      throw ValidationError("synth: speakers, utterances, dim and clusters must be positive");
    if (!(cluster_spread >= 0.0) || !(center_spread >= 0.0) || !(within_std >= 0.0))
      throw ValidationError("synth: spreads must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"speakers", c.speakers},         {"utterances_per_speaker", c.utterances_per_speaker},
                     {"dim", c.dim},                   {"clusters", c.clusters},
                     {"cluster_spread", c.cluster_spread}, {"center_spread", c.center_spread},
                     {"within_std", c.within_std},     {"seed", c.seed}};
}

struct PlantedCorpus {
  EmbeddingDataset data;
  Matrix cluster_centers;
  Matrix speaker_centers;
  std::vector<std::size_t> speaker_cluster;
  nlohmann::json ground_truth() const;
};

inline nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < m.rows; ++i) rows.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
  return rows;
}

inline nlohmann::json PlantedCorpus::ground_truth() const {
  return {{"cluster_centers", matrix_json(cluster_centers)},
          {"speaker_centers", matrix_json(speaker_centers)},
          {"speaker_cluster", speaker_cluster}};
}

inline std::string speaker_name(std::size_t s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "spk%03zu", s);
  return buf;
}

inline PlantedCorpus make_planted_speakers(const SynthConfig& c) {
  c.validate();
  Rng rng = make_rng(c.seed, 0x53594e54);  // "SYNT"
  std::normal_distribution<double> normal(0.0, 1.0);
  PlantedCorpus out{EmbeddingDataset(), Matrix(c.clusters, c.dim), Matrix(c.speakers, c.dim), {}};
  for (double& v : out.cluster_centers.data) v = c.cluster_spread * normal(rng);
  std::vector<EmbeddingRecord> records;
  for (std::size_t s = 0; s < c.speakers; ++s) {
    const std::size_t k = s % c.clusters;
    out.speaker_cluster.push_back(k);
    for (std::size_t j = 0; j < c.dim; ++j) out.speaker_centers(s, j) = out.cluster_centers(k, j) + c.center_spread * normal(rng);
    for (std::size_t u = 0; u < c.utterances_per_speaker; ++u) {
      char utt[48];
      std::snprintf(utt, sizeof utt, "spk%03zu-utt%03zu", s, u);
      EmbeddingRecord r{utt, speaker_name(s), std::vector<float>(c.dim)};
      for (std::size_t j = 0; j < c.dim; ++j)
        r.vector[j] = static_cast<float>(out.speaker_centers(s, j) + c.within_std * normal(rng));
      records.push_back(std::move(r));
    }
  }
  out.data = EmbeddingDataset(c.dim, std::move(records), "synth seed=" + std::to_string(c.seed));
  return out;
}

/// Diagonal Gaussian mixture with exact per-component counts
/// round(weight * n) (remainder to the last component). Row order is shuffled;
/// `labels` holds the component of every row.
struct PlantedMixture {
  Matrix x;
  std::vector<std::size_t> labels;
  Matrix means;
  std::vector<double> weights;
  double std = 0.0;
};

inline PlantedMixture make_planted_mixture(const std::vector<double>& weights, std::size_t dim, std::size_t n,
                                           double mean_spread, double std, std::uint64_t seed) {
  if (weights.empty() || dim == 0 || n == 0) throw ValidationError("planted mixture: empty configuration");
  Rng rng = make_rng(seed, 0x504c4e54);  // "PLNT"
  std::normal_distribution<double> normal(0.0, 1.0);
  PlantedMixture p{Matrix(n, dim), {}, Matrix(weights.size(), dim), weights, std};
  for (double& v : p.means.data) v = mean_spread * normal(rng);
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < weights.size(); ++c) {
    std::size_t count = c + 1 == weights.size() ? n - assigned
                                                : static_cast<std::size_t>(std::llround(weights[c] * static_cast<double>(n)));
    count = std::min(count, n - assigned);
    p.labels.insert(p.labels.end(), count, c);
    assigned += count;
  }
  std::shuffle(p.labels.begin(), p.labels.end(), rng);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dim; ++j) p.x(i, j) = p.means(p.labels[i], j) + std * normal(rng);
  return p;
}

}  // namespace embgen
