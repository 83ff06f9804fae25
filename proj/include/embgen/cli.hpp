#pragma once

// The `embgen` command line: train, sample, gmm, eval, synth-data.
// Options may come from a TOML/INI file given with --config, with one section
// per subcommand; flags override file values.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "embgen/embedding_store.hpp"
#include "embgen/evalkit.hpp"
#include "embgen/gmm.hpp"
#include "embgen/hvae.hpp"
#include "embgen/sampler.hpp"
#include "embgen/synth.hpp"
#include "embgen/text_metrics.hpp"
#include "embgen/trainer.hpp"

namespace embgen::cli {

namespace fs = std::filesystem;

enum ExitCode : int { ok = 0, failure = 1, invalid = 2, numerical = 3 };

struct OutputOptions {
  std::string out;
  std::string format;  // empty: guess from extension

  DatasetFormat resolved() const { return format.empty() ? guess_format(out) : format_from_string(format); }
};

struct TrainArgs {
  std::string data;
  std::string out;
  std::string telemetry;
  TrainConfig config;
  LatentHierarchySpec spec;
  std::string cell = "auto";
};

struct SampleArgs {
  std::string model;
  OutputOptions output;
  SampleRequest request;
};

struct GmmArgs {
  std::string data;
  std::string out;
  std::string report;
  std::string samples;
  std::string format;
  GmmOptions options;
  bool scan = false;
  std::size_t scan_min = 3, scan_max = 150;
  std::size_t count = 1000;
};

struct EvalArgs {
  std::string data;
  std::string generated;
  std::string model;
  std::string transcripts;
  std::string out;
  std::string table;
  EvalConfig config;
  double noise_scale = 0.0;
  std::size_t conversions_per_speaker = 5;
  std::size_t pairwise_cap = 0;
};

struct SynthArgs {
  OutputOptions output;
  SynthConfig config;
};

inline void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ValidationError(std::string(what) + " path is required");
  if (!fs::exists(path)) throw ValidationError(std::string(what) + " not found: " + path);
}

inline void require_output(const std::string& path) {
  if (path.empty()) throw ValidationError("--out is required");
}

inline nlohmann::json spec_json(const LatentHierarchySpec& s) { return s; }

inline int cmd_train(TrainArgs a) {
  require_file(a.data, "dataset");
  require_output(a.out);
  const auto data = load_dataset(a.data);
  a.spec.input_dim = data.dim();
  a.spec.cell = cell_kind_from_string(a.cell);
  a.spec.validate();
  a.config.checkpoint_path = a.out;
  a.config.telemetry_path = a.telemetry.empty() ? fs::path(a.out + ".telemetry.jsonl") : fs::path(a.telemetry);
  auto model = build_model(a.spec, a.config.seed);
  log::info("training " + std::to_string(model.params.scalar_count()) + " parameters on " +
            std::to_string(data.size()) + " embeddings");
  auto [trained, report] = train(std::move(model), data, a.config);
  if (a.config.epochs == 0) {
    trained.schedule = {{"epochs_completed", 0}, {"config", a.config}};
    save_checkpoint(trained, a.out);
  }
  std::cout << "trained " << report.epochs.size() << " epochs; checkpoint " << a.out << '\n';
  return ok;
}

inline int cmd_sample(const SampleArgs& a) {
  require_file(a.model, "checkpoint");
  require_output(a.output.out);
  const auto model = load_checkpoint(a.model);
  const auto generated = sample_embeddings(model, a.request);
  const nlohmann::json meta = {{"command", "sample"},
                               {"model", a.model},
                               {"count", a.request.count},
                               {"temperature", a.request.temperature},
                               {"seed", a.request.seed}};
  save_dataset(generated, a.output.out, a.output.resolved(), meta);
  std::cout << "wrote " << generated.size() << " embeddings to " << a.output.out << '\n';
  return ok;
}

inline int cmd_gmm(const GmmArgs& a) {
  require_file(a.data, "dataset");
  require_output(a.out);
  const auto data = load_dataset(a.data);
  GmmOptions opt = a.options;
  nlohmann::json meta = {{"command", "gmm"},
                         {"data", a.data},
                         {"seed", opt.seed},
                         {"max_iters", opt.max_iters},
                         {"tol", opt.tol},
                         {"restarts", opt.restarts},
                         {"variance_floor", opt.variance_floor}};
  if (a.scan) {
    if (a.scan_min == 0 || a.scan_min > a.scan_max) throw ValidationError("invalid scan range");
    std::vector<std::size_t> ks;
    for (std::size_t k = a.scan_min; k <= a.scan_max; ++k) ks.push_back(k);
    const auto report = scan_k(data, ks, opt);
    if (!report.selected_k) throw ValidationError("k scan: every fit failed");
    opt.k = *report.selected_k;
    nlohmann::json rj = to_json(report);
    rj["config"] = meta;
    rj["config"]["scan_range"] = {a.scan_min, a.scan_max};
    io::write_file_atomic(a.report.empty() ? a.out + ".scan.json" : a.report, rj.dump(2) + "\n");
    meta["scan_range"] = {a.scan_min, a.scan_max};
  }
  meta["k"] = opt.k;
  GmmModel model = fit_gmm(data, opt);
  model.metadata = meta;
  save_gmm(model, a.out);
  std::cout << "fitted k=" << model.k << "; model " << a.out << '\n';
  if (!a.samples.empty()) {
    const auto generated = sample_gmm(model, a.count, opt.seed);
    const auto format = a.format.empty() ? guess_format(a.samples) : format_from_string(a.format);
    save_dataset(generated, a.samples, format, {{"command", "gmm"}, {"count", a.count}, {"gmm", meta}});
    std::cout << "wrote " << generated.size() << " embeddings to " << a.samples << '\n';
  }
  return ok;
}

inline int cmd_eval(const EvalArgs& a) {
  require_file(a.data, "dataset");
  require_output(a.out);
  EvalConfig config = a.config;
  if (a.pairwise_cap > 0) config.pairwise_sample_cap = a.pairwise_cap;
  const auto data = load_dataset(a.data);
  EvalSets sets = build_eval_sets(data, config);
  StubBackend backend(a.noise_scale, config.seed);
  sets.s_syn = synthesize_same_speaker(sets, backend);

  std::vector<std::vector<float>> targets;
  std::optional<HvaeModel> model;
  if (!a.model.empty()) {
    require_file(a.model, "checkpoint");
    model = load_checkpoint(a.model);
    require_usable(*model);
    if (model->spec.input_dim != data.dim()) throw ValidationError("checkpoint input_dim does not match dataset");
  }
  for (std::size_t i = 0; i < sets.gt.size(); ++i) {
    const auto& v = sets.gt[i].vector;
    if (!model) {
      targets.push_back(v);
      continue;
    }
    const std::vector<double> x(v.begin(), v.end());
    const auto y = reconstruct(*model, x);
    targets.emplace_back(y.begin(), y.end());
  }
  sets.s_recon = synthesize_reconstruction(sets, targets, backend);

  if (!a.generated.empty()) {
    require_file(a.generated, "generated embeddings");
    synthesize_generated(sets, load_dataset(a.generated), backend, a.conversions_per_speaker);
  }

  const auto report = assemble_report(sets, data, config);
  nlohmann::json resolved = {{"command", "eval"},
                             {"data", a.data},
                             {"generated", a.generated},
                             {"model", a.model},
                             {"m", config.m},
                             {"seed", config.seed},
                             {"noise_scale", a.noise_scale},
                             {"conversions_per_speaker", a.conversions_per_speaker},
                             {"backend", "stub"}};
  resolved["pairwise_sample_cap"] = config.pairwise_sample_cap ? nlohmann::json(*config.pairwise_sample_cap) : nlohmann::json();
  nlohmann::json out = to_json(report);
  out["config"] = resolved;
  if (!a.transcripts.empty()) {
    require_file(a.transcripts, "transcripts");
    out["text_metrics"] = to_json(summarize_error_rates(load_transcripts(a.transcripts)));
  }
  io::write_file_atomic(a.out, out.dump(2) + "\n");
  const std::string table = render_table(report);
  if (!a.table.empty()) io::write_file_atomic(a.table, table);
  std::cout << table;
  return ok;
}

inline int cmd_synth(const SynthArgs& a) {
  require_output(a.output.out);
  const auto corpus = make_planted_speakers(a.config);
  const nlohmann::json meta = {{"command", "synth-data"}, {"config", a.config}, {"ground_truth", corpus.ground_truth()}};
  save_dataset(corpus.data, a.output.out, a.output.resolved(), meta);
  std::cout << "wrote " << corpus.data.size() << " embeddings to " << a.output.out << '\n';
  return ok;
}

inline void add_output(CLI::App* cmd, OutputOptions& o, const char* what) {
  cmd->add_option("--out", o.out, what);
  cmd->add_option("--format", o.format, "dataset format: manifest_binary or jsonl (default: from extension)");
}

inline int run(int argc, const char* const* argv) {
  CLI::App app{"Hierarchical VAE and GMM generators for speaker embeddings, with evaluation metrics", "embgen"};
  app.set_config("--config", "", "TOML/INI file; one section per subcommand");
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a hierarchical VAE on an embedding dataset");
  train_cmd->add_option("--data", train_args.data, "training dataset");
  train_cmd->add_option("--out", train_args.out, "checkpoint path");
  train_cmd->add_option("--telemetry", train_args.telemetry, "per-epoch JSON Lines (default <out>.telemetry.jsonl)");
  train_cmd->add_option("--seed", train_args.config.seed);
  train_cmd->add_option("--epochs", train_args.config.epochs)->capture_default_str();
  train_cmd->add_option("--batch-size", train_args.config.batch_size)->capture_default_str();
  train_cmd->add_option("--lr", train_args.config.learning_rate)->capture_default_str();
  train_cmd->add_option("--warmup", train_args.config.warmup_fraction, "KL warmup fraction of epochs")->capture_default_str();
  train_cmd->add_option("--free-bits", train_args.config.free_bits_lambda)->capture_default_str();
  train_cmd->add_option("--checkpoint-every", train_args.config.checkpoint_every)->capture_default_str();
  train_cmd->add_option("--grad-clip", train_args.config.grad_clip_norm)->capture_default_str();
  train_cmd->add_option("--levels", train_args.spec.levels)->capture_default_str();
  train_cmd->add_option("--groups", train_args.spec.groups_per_level, "latent groups per level")->capture_default_str();
  train_cmd->add_option("--dims", train_args.spec.dims_per_group, "dimensions per latent group")->capture_default_str();
  train_cmd->add_option("--hidden", train_args.spec.hidden_size)->capture_default_str();
  train_cmd->add_option("--cell", train_args.cell, "auto, conv or affine")->capture_default_str();

  SampleArgs sample_args;
  auto* sample_cmd = app.add_subcommand("sample", "draw novel embeddings from a trained checkpoint");
  sample_cmd->add_option("--model", sample_args.model, "checkpoint path");
  add_output(sample_cmd, sample_args.output, "output dataset");
  sample_cmd->add_option("--count", sample_args.request.count)->capture_default_str();
  sample_cmd->add_option("--temperature", sample_args.request.temperature)->capture_default_str();
  sample_cmd->add_option("--seed", sample_args.request.seed);

  GmmArgs gmm_args;
  auto* gmm_cmd = app.add_subcommand("gmm", "fit a diagonal GMM baseline, optionally scanning k");
  gmm_cmd->add_option("--data", gmm_args.data, "training dataset");
  gmm_cmd->add_option("--out", gmm_args.out, "GMM model path");
  gmm_cmd->add_option("--k", gmm_args.options.k)->capture_default_str();
  gmm_cmd->add_flag("--scan", gmm_args.scan, "select k by the MSE curve over --scan-min..--scan-max");
  gmm_cmd->add_option("--scan-min", gmm_args.scan_min)->capture_default_str();
  gmm_cmd->add_option("--scan-max", gmm_args.scan_max)->capture_default_str();
  gmm_cmd->add_option("--report", gmm_args.report, "k-scan report (default <out>.scan.json)");
  gmm_cmd->add_option("--samples", gmm_args.samples, "also write --count sampled embeddings here");
  gmm_cmd->add_option("--count", gmm_args.count)->capture_default_str();
  gmm_cmd->add_option("--format", gmm_args.format, "format of --samples");
  gmm_cmd->add_option("--seed", gmm_args.options.seed);
  gmm_cmd->add_option("--max-iters", gmm_args.options.max_iters)->capture_default_str();
  gmm_cmd->add_option("--tol", gmm_args.options.tol)->capture_default_str();
  gmm_cmd->add_option("--restarts", gmm_args.options.restarts)->capture_default_str();

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "cosine-similarity report (stub conversion backend) and WER/CER");
  eval_cmd->add_option("--data", eval_args.data, "natural embedding corpus");
  eval_cmd->add_option("--generated", eval_args.generated, "generated speaker embeddings (enables G_syn rows)");
  eval_cmd->add_option("--model", eval_args.model, "checkpoint used for reconstruction targets");
  eval_cmd->add_option("--transcripts", eval_args.transcripts, "JSON Lines transcript pairs for WER/CER");
  eval_cmd->add_option("--out", eval_args.out, "report JSON");
  eval_cmd->add_option("--table", eval_args.table, "also write the text table here");
  eval_cmd->add_option("--m", eval_args.config.m, "utterance budget")->capture_default_str();
  eval_cmd->add_option("--seed", eval_args.config.seed);
  eval_cmd->add_option("--noise-scale", eval_args.noise_scale, "stub backend noise")->capture_default_str();
  eval_cmd->add_option("--conversions-per-speaker", eval_args.conversions_per_speaker)->capture_default_str();
  eval_cmd->add_option("--pairwise-cap", eval_args.pairwise_cap, "subsample pairs above this count (0: exact)");

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth-data", "generate a planted speaker corpus with ground truth");
  add_output(synth_cmd, synth_args.output, "output dataset");
  synth_cmd->add_option("--seed", synth_args.config.seed);
  synth_cmd->add_option("--speakers", synth_args.config.speakers)->capture_default_str();
  synth_cmd->add_option("--utterances", synth_args.config.utterances_per_speaker)->capture_default_str();
  synth_cmd->add_option("--dim", synth_args.config.dim)->capture_default_str();
  synth_cmd->add_option("--clusters", synth_args.config.clusters)->capture_default_str();
  synth_cmd->add_option("--cluster-spread", synth_args.config.cluster_spread)->capture_default_str();
  synth_cmd->add_option("--center-spread", synth_args.config.center_spread)->capture_default_str();
  synth_cmd->add_option("--within-std", synth_args.config.within_std)->capture_default_str();

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_args);
    if (sample_cmd->parsed()) return cmd_sample(sample_args);
    if (gmm_cmd->parsed()) return cmd_gmm(gmm_args);
    if (eval_cmd->parsed()) return cmd_eval(eval_args);
    if (synth_cmd->parsed()) return cmd_synth(synth_args);
  } catch (const TrainingAborted& e) {
    std::cerr << "embgen: " << e.what() << '\n';
    return numerical;
  } catch (const NumericalError& e) {
    std::cerr << "embgen: numerical error (" << e.term() << "): " << e.what() << '\n';
    return numerical;
  } catch (const ValidationError& e) {
    std::cerr << "embgen: " << e.what() << '\n';
    return invalid;
  } catch (const ParseError& e) {
    std::cerr << "embgen: " << e.what() << '\n';
    return invalid;
  } catch (const std::exception& e) {
    std::cerr << "embgen: " << e.what() << '\n';
    return failure;
  }
  return failure;
}

}  // namespace embgen::cli
