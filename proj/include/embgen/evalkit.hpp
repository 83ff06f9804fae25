#pragma once

// Evaluation sets and cosine-similarity statistics over embedding tables,
// plus the conversion-backend seam used to build the synthesized sets.

#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "embgen/common.hpp"
#include "embgen/embedding_store.hpp"

namespace embgen {

struct EvalConfig {
  std::size_t m = 1000;
  std::uint64_t seed = 0;
  std::optional<std::size_t> pairwise_sample_cap;

  void validate() const {
    if (m < 2) throw ValidationError("evaluation budget m must be >= 2");
    if (pairwise_sample_cap && *pairwise_sample_cap == 0) throw ValidationError("pairwise_sample_cap must be positive");
  }
};

struct MetricStat {
  double mean = 0.0;
  double std = 0.0;
  std::size_t pair_count = 0;
};

template <typename A, typename B>
double cosine(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) throw ValidationError("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) throw ValidationError("cosine: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double cosine(std::span<const double> a, std::span<const double> b) { return cosine<double, double>(a, b); }
inline double cosine(std::span<const float> a, std::span<const float> b) { return cosine<float, float>(a, b); }

/// Records aligned row-by-row with another set; unlike EmbeddingDataset,
/// utterance ids may repeat.
using AlignedRecords = std::vector<EmbeddingRecord>;

struct StabilityJoin {
  /// generated speaker_id -> rows of g_syn converted to that speaker
  std::map<std::string, std::vector<std::size_t>> rows_by_generated;
  /// per g_syn row, the speaker of the source utterance
  std::vector<std::string> source_speaker;
};

struct EvalSets {
  EmbeddingDataset gt;
  AlignedRecords gt_same_speaker;
  std::optional<EmbeddingDataset> s_syn, s_recon, g_syn;
  StabilityJoin g_syn_join;
};

namespace detail {

inline MetricStat summarize(const std::vector<double>& values) {
  auto ms = mean_std(values);
  return {ms.mean, ms.std, ms.count};
}

/// Uniform sample of `cap` distinct indices from [0, total), ascending.
inline std::vector<std::uint64_t> sample_indices(std::uint64_t total, std::uint64_t cap, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x50414952);  // "PAIR"
  std::unordered_set<std::uint64_t> chosen;
  // Floyd's algorithm.
  for (std::uint64_t j = total - cap; j < total; ++j) {
    const std::uint64_t t = std::uniform_int_distribution<std::uint64_t>(0, j)(rng);
    if (!chosen.insert(t).second) chosen.insert(j);
  }
  std::vector<std::uint64_t> out(chosen.begin(), chosen.end());
  std::sort(out.begin(), out.end());
  return out;
}

/// Row pair (i, j), i < j, for linear index p in row-major upper-triangle order.
inline std::pair<std::size_t, std::size_t> unrank_pair(std::uint64_t p, std::size_t n) {
  std::size_t i = 0;
  std::uint64_t row_len = n - 1;
  while (p >= row_len) {
    p -= row_len;
    ++i;
    --row_len;
  }
  return {i, i + 1 + static_cast<std::size_t>(p)};
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

struct PairwiseOptions {
  bool exclude_same_utterance = false;
  std::optional<std::size_t> sample_cap;
  std::uint64_t seed = 0;
};

/// Mean cosine over all unordered pairs of distinct rows of one set.
inline MetricStat pairwise_within(const EmbeddingDataset& set, const PairwiseOptions& opt = {}) {
  const std::size_t n = set.size();
  const std::uint64_t total = std::uint64_t{n} * (n - 1) / 2;
  if (total == 0) throw ValidationError("pairwise: fewer than two embeddings");
  std::vector<double> values;
  if (opt.sample_cap && *opt.sample_cap < total) {
    for (auto p : detail::sample_indices(total, *opt.sample_cap, opt.seed)) {
      auto [i, j] = detail::unrank_pair(p, n);
      values.push_back(cosine(set.row(i), set.row(j)));
    }
  } else {
    values.reserve(total);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) values.push_back(cosine(set.row(i), set.row(j)));
  }
  return detail::summarize(values);
}

/// Mean cosine over the cross product of two sets, optionally skipping pairs
/// that share an utterance id.
inline MetricStat pairwise_between(const EmbeddingDataset& a, const EmbeddingDataset& b, const PairwiseOptions& opt = {}) {
  if (a.dim() != b.dim()) throw ValidationError("pairwise: dimension mismatch");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      if (!opt.exclude_same_utterance || a[i].utterance_id != b[j].utterance_id) pairs.emplace_back(i, j);
  if (pairs.empty()) throw ValidationError("pairwise: no eligible pairs");
  std::vector<double> values;
  if (opt.sample_cap && *opt.sample_cap < pairs.size()) {
    for (auto p : detail::sample_indices(pairs.size(), *opt.sample_cap, opt.seed))
      values.push_back(cosine(a.row(pairs[p].first), b.row(pairs[p].second)));
  } else {
    values.reserve(pairs.size());
    for (auto [i, j] : pairs) values.push_back(cosine(a.row(i), b.row(j)));
  }
  return detail::summarize(values);
}

/// Mean cosine over rows of `a` and `b` that share an utterance id.
inline MetricStat corresponding_similarity(const EmbeddingDataset& a, const EmbeddingDataset& b) {
  if (a.dim() != b.dim()) throw ValidationError("corresponding: dimension mismatch");
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t j = 0; j < b.size(); ++j) index.emplace(b[j].utterance_id, j);
  std::vector<double> values;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (auto it = index.find(a[i].utterance_id); it != index.end()) values.push_back(cosine(a.row(i), b.row(it->second)));
  if (values.empty()) throw ValidationError("corresponding: sets share no utterance ids");
  return detail::summarize(values);
}

/// Join for a converted set whose rows are source utterances of `source`
/// re-voiced as the generated speaker named by each row's speaker_id.
inline StabilityJoin make_stability_join(const EmbeddingDataset& g_syn, const EmbeddingDataset& source) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t j = 0; j < source.size(); ++j) index.emplace(source[j].utterance_id, j);
  StabilityJoin join;
  for (std::size_t i = 0; i < g_syn.size(); ++i) {
    auto it = index.find(g_syn[i].utterance_id);
    if (it == index.end()) throw ValidationError("stability join: unknown source utterance " + g_syn[i].utterance_id);
    join.rows_by_generated[g_syn[i].speaker_id].push_back(i);
    join.source_speaker.push_back(source[it->second].speaker_id);
  }
  return join;
}

/// Mean cosine over pairs converted to the same generated speaker from
/// different source speakers.
inline MetricStat stability(const EmbeddingDataset& g_syn, const StabilityJoin& join) {
  if (join.source_speaker.size() != g_syn.size()) throw ValidationError("stability: join does not cover g_syn");
  std::vector<double> values;
  for (const auto& [gen, rows] : join.rows_by_generated)
    for (std::size_t a = 0; a < rows.size(); ++a)
      for (std::size_t b = a + 1; b < rows.size(); ++b) {
        if (rows[a] >= g_syn.size() || rows[b] >= g_syn.size()) throw ValidationError("stability: row out of range");
        if (join.source_speaker[rows[a]] == join.source_speaker[rows[b]]) continue;
        values.push_back(cosine(g_syn.row(rows[a]), g_syn.row(rows[b])));
      }
  if (values.empty()) throw ValidationError("stability: no generated speaker has conversions from two source speakers");
  return detail::summarize(values);
}

/// Mean cosine over distinct-utterance pairs of the same natural speaker.
/// Exhaustive when the corpus has at most m such pairs, otherwise m pairs
/// drawn uniformly (with replacement).
inline MetricStat natural_consistency(const EmbeddingDataset& data, const EvalConfig& config) {
  config.validate();
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::uint64_t> cumulative;
  std::uint64_t total = 0;
  for (auto& [spk, rows] : data.speakers()) {
    if (rows.size() < 2) continue;
    total += std::uint64_t{rows.size()} * (rows.size() - 1) / 2;
    cumulative.push_back(total);
    groups.push_back(rows);
  }
  if (groups.empty()) throw ValidationError("natural consistency: no speaker has two or more utterances");
  std::vector<double> values;
  if (total <= config.m) {
    for (const auto& rows : groups)
      for (std::size_t a = 0; a < rows.size(); ++a)
        for (std::size_t b = a + 1; b < rows.size(); ++b) values.push_back(cosine(data.row(rows[a]), data.row(rows[b])));
  } else {
    Rng rng = make_rng(config.seed, 0x4e415443);  // "NATC"
    std::uniform_int_distribution<std::uint64_t> pick(0, total - 1);
    for (std::size_t s = 0; s < config.m; ++s) {
      const std::uint64_t p = pick(rng);
      const auto g = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), p) - cumulative.begin());
      const std::uint64_t local = p - (g == 0 ? 0 : cumulative[g - 1]);
      auto [a, b] = detail::unrank_pair(local, groups[g].size());
      values.push_back(cosine(data.row(groups[g][a]), data.row(groups[g][b])));
    }
  }
  return detail::summarize(values);
}

/// GT: m utterances drawn without replacement from speakers with >= 2
/// utterances. GT_SameSpeaker[i]: a uniformly drawn other utterance of
/// GT[i]'s speaker.
inline EvalSets build_eval_sets(const EmbeddingDataset& data, const EvalConfig& config) {
  config.validate();
  const auto speakers = data.speakers();
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (speakers.at(data[i].speaker_id).size() >= 2) eligible.push_back(i);
  if (eligible.size() < config.m)
    throw ValidationError("need " + std::to_string(config.m) + " utterances from multi-utterance speakers, only " +
                          std::to_string(eligible.size()) + " eligible");
  Rng rng = make_rng(config.seed, 0x45564c53);  // "EVLS"
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(config.m);

  std::vector<EmbeddingRecord> gt;
  EvalSets sets;
  for (std::size_t i : eligible) {
    gt.push_back(data[i]);
    const auto& rows = speakers.at(data[i].speaker_id);
    std::size_t partner;
    do {
      partner = rows[std::uniform_int_distribution<std::size_t>(0, rows.size() - 1)(rng)];
    } while (partner == i);
    sets.gt_same_speaker.push_back(data[partner]);
  }
  sets.gt = EmbeddingDataset(data.dim(), std::move(gt), "gt");
  return sets;
}

// ---------------------------------------------------------------------------
// Conversion backends

/// Produces the embedding a speaker-verification model would extract from
/// `source` re-voiced with `target`.
class ConversionBackend {
 public:
  virtual ~ConversionBackend() = default;
  virtual EmbeddingRecord convert(const EmbeddingRecord& source, std::span<const float> target,
                                  const std::string& target_speaker_id) const = 0;
};

/// target + noise_scale * N(0, I), seeded by (seed, source utterance id).
inline EmbeddingRecord stub_convert(const EmbeddingRecord& source, std::span<const float> target,
                                    const std::string& target_speaker_id, double noise_scale, std::uint64_t seed) {
  if (source.vector.size() != target.size()) throw ValidationError("stub_convert: dimension mismatch");
  EmbeddingRecord out{source.utterance_id, target_speaker_id, std::vector<float>(target.begin(), target.end())};
  if (noise_scale != 0.0) {
    Rng rng = make_rng(seed, detail::fnv1a(source.utterance_id));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (float& v : out.vector) v = static_cast<float>(v + noise_scale * normal(rng));
  }
  return out;
}

class StubBackend final : public ConversionBackend {
 public:
  StubBackend(double noise_scale, std::uint64_t seed) : noise_scale_(noise_scale), seed_(seed) {}
  EmbeddingRecord convert(const EmbeddingRecord& source, std::span<const float> target,
                          const std::string& target_speaker_id) const override {
    return stub_convert(source, target, target_speaker_id, noise_scale_, seed_);
  }

 private:
  double noise_scale_;
  std::uint64_t seed_;
};

/// S_syn: GT[i] re-voiced with GT_SameSpeaker[i]'s embedding.
inline EmbeddingDataset synthesize_same_speaker(const EvalSets& sets, const ConversionBackend& backend) {
  std::vector<EmbeddingRecord> out;
  for (std::size_t i = 0; i < sets.gt.size(); ++i)
    out.push_back(backend.convert(sets.gt[i], sets.gt_same_speaker[i].vector, sets.gt[i].speaker_id));
  return EmbeddingDataset(sets.gt.dim(), std::move(out), "s_syn");
}

/// S_recon: GT[i] re-voiced with `targets[i]` (its own embedding, or a model
/// reconstruction of it).
inline EmbeddingDataset synthesize_reconstruction(const EvalSets& sets, const std::vector<std::vector<float>>& targets,
                                                  const ConversionBackend& backend) {
  if (targets.size() != sets.gt.size()) throw ValidationError("reconstruction targets not aligned with GT");
  std::vector<EmbeddingRecord> out;
  for (std::size_t i = 0; i < sets.gt.size(); ++i)
    out.push_back(backend.convert(sets.gt[i], targets[i], sets.gt[i].speaker_id));
  return EmbeddingDataset(sets.gt.dim(), std::move(out), "s_recon");
}

/// G_syn: GT[i] re-voiced as generated speaker i mod G, where G =
/// min(|generated|, max(1, m / conversions_per_speaker)). Also fills the
/// stability join.
inline void synthesize_generated(EvalSets& sets, const EmbeddingDataset& generated, const ConversionBackend& backend,
                                 std::size_t conversions_per_speaker) {
  if (generated.dim() != sets.gt.dim()) throw ValidationError("generated embeddings have the wrong dimension");
  if (conversions_per_speaker == 0) throw ValidationError("conversions_per_speaker must be positive");
  const std::size_t G = std::min(generated.size(), std::max<std::size_t>(1, sets.gt.size() / conversions_per_speaker));
  std::vector<EmbeddingRecord> out;
  for (std::size_t i = 0; i < sets.gt.size(); ++i) {
    const auto& target = generated[i % G];
    out.push_back(backend.convert(sets.gt[i], target.vector, target.speaker_id));
  }
  sets.g_syn = EmbeddingDataset(sets.gt.dim(), std::move(out), "g_syn");
  sets.g_syn_join = make_stability_join(*sets.g_syn, sets.gt);
}

// ---------------------------------------------------------------------------
// Report

inline constexpr std::array<const char*, 8> kReportRows = {
    "original_diversity",   "generated_diversity",  "original_coverage",      "distribution_fidelity",
    "speaker_fidelity_syn", "speaker_fidelity_recon", "stability",            "natural_consistency"};

inline const char* row_label(std::string_view name) {
  if (name == "original_diversity") return "Pairwise(S_syn, S_syn), Original Diversity";
  if (name == "generated_diversity") return "Pairwise(G_syn, G_syn), Generated Diversity";
  if (name == "original_coverage") return "Pairwise(G_syn, S_syn), Original Coverage";
  if (name == "distribution_fidelity") return "Pairwise(S_syn, GT), Distribution Fidelity";
  if (name == "speaker_fidelity_syn") return "Corresponding(S_syn, GT), Speaker Fidelity";
  if (name == "speaker_fidelity_recon") return "Corresponding(S_recon, GT), Speaker Fidelity";
  if (name == "stability") return "Stability";
  if (name == "natural_consistency") return "Natural Consistency";
  return "";
}

struct SimilarityReport {
  std::vector<std::pair<std::string, MetricStat>> rows;  // in kReportRows order
  std::vector<std::string> omitted;                      // rows whose inputs were missing

  const MetricStat* find(std::string_view name) const {
    for (const auto& [n, s] : rows)
      if (n == name) return &s;
    return nullptr;
  }
};

inline SimilarityReport assemble_report(const EvalSets& sets, const EmbeddingDataset& data, const EvalConfig& config) {
  config.validate();
  SimilarityReport r;
  PairwiseOptions within{false, config.pairwise_sample_cap, config.seed};
  PairwiseOptions cross{true, config.pairwise_sample_cap, config.seed};
  auto add = [&](const char* name, bool available, auto&& compute) {
    if (available) r.rows.emplace_back(name, compute());
    else r.omitted.emplace_back(name);
  };
  const bool ss = sets.s_syn.has_value(), gs = sets.g_syn.has_value(), sr = sets.s_recon.has_value();
  if (!ss && !gs && !sr) throw ValidationError("no evaluation sets available: provide S_syn, S_recon or G_syn");
  add("original_diversity", ss, [&] { return pairwise_within(*sets.s_syn, within); });
  add("generated_diversity", gs, [&] { return pairwise_within(*sets.g_syn, within); });
  add("original_coverage", gs && ss, [&] { return pairwise_between(*sets.g_syn, *sets.s_syn, cross); });
  add("distribution_fidelity", ss, [&] { return pairwise_between(*sets.s_syn, sets.gt, cross); });
  add("speaker_fidelity_syn", ss, [&] { return corresponding_similarity(*sets.s_syn, sets.gt); });
  add("speaker_fidelity_recon", sr, [&] { return corresponding_similarity(*sets.s_recon, sets.gt); });
  add("stability", gs, [&] { return stability(*sets.g_syn, sets.g_syn_join); });
  add("natural_consistency", true, [&] { return natural_consistency(data, config); });
  return r;
}

inline nlohmann::json to_json(const SimilarityReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [name, s] : r.rows)
    rows.push_back({{"name", name}, {"mean", s.mean}, {"std", s.std}, {"pair_count", s.pair_count}});
  return {{"rows", rows}, {"omitted", r.omitted}};
}

/// Column-aligned text table, one line per metric row.
inline std::string render_table(const SimilarityReport& r) {
  std::size_t width = std::string_view("Metric").size();
  for (const auto& [name, s] : r.rows) width = std::max(width, std::string_view(row_label(name)).size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width)) << "Metric" << "  " << std::right << std::setw(13)
     << "mean+-std" << "  " << std::setw(10) << "pairs" << '\n';
  os << std::string(width + 27, '-') << '\n';
  for (const auto& [name, s] : r.rows) {
    std::ostringstream cell;
    cell << std::fixed << std::setprecision(2) << s.mean << "+-" << s.std;
    os << std::left << std::setw(static_cast<int>(width)) << row_label(name) << "  " << std::right << std::setw(13)
       << cell.str() << "  " << std::setw(10) << s.pair_count << '\n';
  }
  for (const auto& name : r.omitted) os << "omitted: " << name << " (inputs missing)\n";
  return os.str();
}

}  // namespace embgen
