#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ttd/checkpoint.hpp"
#include "ttd/contamination.hpp"
#include "ttd/datasets.hpp"
#include "ttd/errors.hpp"
#include "ttd/evalbench.hpp"
#include "ttd/model.hpp"
#include "ttd/ops.hpp"
#include "ttd/rng.hpp"
#include "ttd/tokenizer.hpp"

namespace ttd {

// ---------------------------------------------------------------------------
// Optimizer

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over a fixed list of fp32 parameters.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<Tensor<float>> params, AdamOptions opts = {})
      : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0f);
      v_.emplace_back(p.numel(), 0.0f);
    }
  }

  void zero_grad() {
    for (auto& p : params_) {
      (void)p.mutable_grad();
      p.zero_grad();
    }
  }

  /// One update from the parameters' current gradients.
  void step(double learning_rate) {
    ++step_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
    const auto b1 = static_cast<float>(opts_.beta1), b2 = static_cast<float>(opts_.beta2);
    const auto step_size = static_cast<float>(learning_rate / c1);
    const auto inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(c2));
    const auto eps = static_cast<float>(opts_.eps);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      const auto g = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * g[i];
        v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
        w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + eps);
      }
    }
  }

  [[nodiscard]] std::uint64_t steps() const noexcept { return step_; }
  [[nodiscard]] const std::vector<std::vector<float>>& first_moments() const noexcept { return m_; }
  [[nodiscard]] const std::vector<std::vector<float>>& second_moments() const noexcept { return v_; }

 private:
  std::vector<Tensor<float>> params_;
  AdamOptions opts_;
  std::vector<std::vector<float>> m_, v_;
  std::uint64_t step_ = 0;
};

inline std::vector<Tensor<float>> parameter_tensors(const ModelWeights<float>& w) {
  std::vector<Tensor<float>> out;
  for (const auto& [name, t] : w.parameters()) out.push_back(t);
  return out;
}

// ---------------------------------------------------------------------------
// Single step

struct StepOptions {
  double learning_rate = 1e-3;
  std::uint64_t dropout_seed = 0;
  double positive_weight = 1.0;
  bool check_finite = true;
  std::string batch_name = "batch";
};

inline void require_finite_weights(const ModelWeights<float>& w, std::string_view context) {
  for (const auto& [name, t] : w.parameters()) {
    for (float v : t.data()) {
      if (!std::isfinite(v)) throw TrainingError("non-finite value in " + name + " after " + std::string(context));
    }
  }
}

/// Forward (train mode), BCE, backward and one Adam update. Returns the loss.
inline float train_step(const ModelConfig& config, ModelWeights<float>& weights, AdamOptimizer& optimizer,
                        const TokenBatch& batch, std::span<const float> labels, const StepOptions& opts = {}) {
  optimizer.zero_grad();
  Tape<float> tape;
  auto probs = forward(tape, weights, config, batch, Mode::train, opts.dropout_seed);
  auto loss = bce_loss(tape, probs, labels, opts.positive_weight);
  const float value = loss.item();
  if (!std::isfinite(value)) throw TrainingError("non-finite loss in " + opts.batch_name);
  tape.backward(loss);
  optimizer.step(opts.learning_rate);
  if (opts.check_finite) require_finite_weights(weights, opts.batch_name);
  return value;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradSample {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<GradSample> samples;
};

struct GradCheckOptions {
  std::size_t n_samples = 200;
  double step = 1e-3;
  std::uint64_t seed = 1;
  std::size_t batch = 2;
  std::size_t length = 6;
  /// Denominator floor for the relative error; pairs whose gradients are both
  /// below it in magnitude are compared on absolute scale.
  double abs_floor = 1e-6;
  /// Run the analytic pass on an fp64 tape. The fp32 tape carries ~1e-8
  /// round-off, which dominates on gradients that are identically zero
  /// (attention key biases, for one).
  bool fp64_tape = false;
};

/// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares fp32 tape gradients of the train-mode BCE loss on a small
/// synthetic batch against fp64 central differences, sampling parameters
/// round-robin over every weight tensor.
inline GradCheckReport grad_check(const ModelConfig& config, const ModelWeights<float>& weights,
                                  const GradCheckOptions& opts = {}) {
  if (opts.n_samples == 0) throw ContractError("grad_check: n_samples must be positive");
  const std::size_t len = std::min(opts.length, config.max_len);
  CounterRng rng(opts.seed);

  TokenBatch batch;
  batch.batch = opts.batch;
  batch.length = len;
  for (std::size_t b = 0; b < opts.batch; ++b) {
    const std::size_t content = b % 2 == 1 && len > 2 ? len - 2 : len;  // odd rows carry padding
    for (std::size_t t = 0; t < len; ++t) {
      const bool real = t < content;
      batch.ids.push_back(real ? kFirstByteId + static_cast<std::int32_t>(rng.below(config.vocab_size - kFirstByteId))
                               : kPadId);
      batch.mask.push_back(real ? 1.0f : 0.0f);
    }
  }
  std::vector<float> labels(opts.batch);
  for (std::size_t b = 0; b < opts.batch; ++b) labels[b] = static_cast<float>(b % 2 == 0);
  const std::uint64_t dropout_seed = rng.next_u64();

  // Analytic gradients on a private copy at the requested precision.
  std::vector<double> analytic;
  auto collect = [&]<class Real>(ModelWeights<Real> w) {
    Tape<Real> tape;
    auto loss = bce_loss(tape, forward(tape, w, config, batch, Mode::train, dropout_seed), labels);
    tape.backward(loss);
    for (const auto& [name, t] : w.parameters()) {
      if (t.has_grad()) {
        analytic.insert(analytic.end(), t.grad().begin(), t.grad().end());
      } else {
        analytic.resize(analytic.size() + t.numel(), 0.0);
      }
    }
  };
  if (opts.fp64_tape) {
    collect(cast_weights<double>(config, weights));
  } else {
    collect(cast_weights<float>(config, weights));
  }

  auto w64 = cast_weights<double>(config, weights);
  auto params64 = w64.parameters();
  auto loss64 = [&]() {
    Tape<double> t(false);
    return bce_loss(t, forward(t, w64, config, batch, Mode::train, dropout_seed), labels).item();
  };

  std::vector<std::int32_t> used_rows;
  for (std::size_t i = 0; i < batch.ids.size(); ++i)
    if (batch.mask[i] != 0.0f) used_rows.push_back(batch.ids[i]);

  std::vector<std::size_t> offsets;
  for (std::size_t k = 0, at = 0; k < params64.size(); at += params64[k].second.numel(), ++k) offsets.push_back(at);

  GradCheckReport report;
  for (std::size_t s = 0; s < opts.n_samples; ++s) {
    const std::size_t k = s % params64.size();
    auto& [name, t64] = params64[k];
    std::size_t index;
    if (name == "token_embedding") {
      const auto row = used_rows[rng.below(used_rows.size())];
      index = static_cast<std::size_t>(row) * config.d_model + rng.below(config.d_model);
    } else if (name == "positional_table") {
      index = rng.below(len) * config.d_model + rng.below(config.d_model);
    } else {
      index = rng.below(t64.numel());
    }
    auto data = t64.mutable_data();
    const double original = data[index];
    data[index] = original + opts.step;
    const double up = loss64();
    data[index] = original - opts.step;
    const double down = loss64();
    data[index] = original;

    GradSample sample;
    sample.tensor = name;
    sample.index = index;
    sample.numeric = (up - down) / (2.0 * opts.step);
    sample.analytic = analytic[offsets[k] + index];
    sample.rel_error = relative_error(sample.analytic, sample.numeric, opts.abs_floor);
    report.max_rel_error = std::max(report.max_rel_error, sample.rel_error);
    report.samples.push_back(std::move(sample));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Stage plans

enum class StagePurpose { base, targeted_overfit };

inline StagePurpose stage_purpose_from_string(std::string_view s) {
  if (s == "base") return StagePurpose::base;
  if (s == "targeted-overfit") return StagePurpose::targeted_overfit;
  throw ConfigError("unknown stage purpose '" + std::string(s) + "' (expected base or targeted-overfit)");
}

inline std::string to_string(StagePurpose p) { return p == StagePurpose::base ? "base" : "targeted-overfit"; }

struct TrainStageConfig {
  std::string name;
  std::string dataset;  // path, relative to the data directory
  DatasetFormat format = DatasetFormat::jigsaw;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  StagePurpose purpose = StagePurpose::base;
  double positive_weight = 1.0;

  void validate() const {
    if (epochs < 1) throw ConfigError("stage '" + name + "': epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("stage '" + name + "': batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("stage '" + name + "': learning_rate must be > 0");
    if (!(positive_weight > 0.0)) throw ConfigError("stage '" + name + "': positive_weight must be > 0");
  }
};

struct TrainPlan {
  ModelConfig model;
  std::uint64_t seed = 0;           // weight initialization
  std::string vocab;                // existing vocabulary file; empty = learn one
  std::size_t vocab_size = kDefaultVocabSize;
  std::string eval_dataset;         // optional held-out set
  DatasetFormat eval_format = DatasetFormat::jigsaw;
  double threshold = 0.5;
  double jaccard = 0.8;
  std::vector<TrainStageConfig> stages;
};

namespace detail {

inline std::string trim(std::string_view s) {
  while (!s.empty() && is_ascii_space(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && is_ascii_space(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T v{};
  in >> v;
  if (in.fail() || !in.eof()) throw ConfigError("plan: bad value '" + value + "' for " + key);
  return v;
}

}  // namespace detail

/// Parses a stage plan. Global `key = value` lines come first; each
/// `[stage NAME]` header opens a stage section. `#` starts a comment.
inline TrainPlan parse_plan(std::string_view text) {
  TrainPlan plan;
  TrainStageConfig* stage = nullptr;
  std::istringstream in{std::string(text)};
  std::size_t lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.resize(hash);
    const auto line = detail::trim(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("plan line " + std::to_string(lineno) + ": unterminated section");
      const auto inner = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      if (!inner.starts_with("stage")) throw ConfigError("plan line " + std::to_string(lineno) + ": unknown section");
      plan.stages.emplace_back();
      stage = &plan.stages.back();
      stage->name = detail::trim(std::string_view(inner).substr(5));
      if (stage->name.empty()) stage->name = "stage" + std::to_string(plan.stages.size());
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("plan line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(std::string_view(line).substr(0, eq));
    const auto value = detail::trim(std::string_view(line).substr(eq + 1));
    if (stage) {
      if (key == "dataset") stage->dataset = value;
      else if (key == "format") stage->format = dataset_format_from_string(value);
      else if (key == "epochs") stage->epochs = detail::parse_number<std::size_t>(key, value);
      else if (key == "batch_size") stage->batch_size = detail::parse_number<std::size_t>(key, value);
      else if (key == "learning_rate") stage->learning_rate = detail::parse_number<double>(key, value);
      else if (key == "seed") stage->seed = detail::parse_number<std::uint64_t>(key, value);
      else if (key == "purpose") stage->purpose = stage_purpose_from_string(value);
      else if (key == "positive_weight") stage->positive_weight = detail::parse_number<double>(key, value);
      else throw ConfigError("plan line " + std::to_string(lineno) + ": unknown stage key '" + key + "'");
    } else {
      if (key == "seed") plan.seed = detail::parse_number<std::uint64_t>(key, value);
      else if (key == "vocab") plan.vocab = value;
      else if (key == "vocab_size") plan.vocab_size = detail::parse_number<std::size_t>(key, value);
      else if (key == "eval") plan.eval_dataset = value;
      else if (key == "eval_format") plan.eval_format = dataset_format_from_string(value);
      else if (key == "threshold") plan.threshold = detail::parse_number<double>(key, value);
      else if (key == "jaccard") plan.jaccard = detail::parse_number<double>(key, value);
      else if (key == "n_layers") plan.model.n_layers = detail::parse_number<std::size_t>(key, value);
      else if (key == "n_heads") plan.model.n_heads = detail::parse_number<std::size_t>(key, value);
      else if (key == "d_model") plan.model.d_model = detail::parse_number<std::size_t>(key, value);
      else if (key == "d_ff") plan.model.d_ff = detail::parse_number<std::size_t>(key, value);
      else if (key == "max_len") plan.model.max_len = detail::parse_number<std::size_t>(key, value);
      else if (key == "dropout_rate") plan.model.dropout_rate = detail::parse_number<double>(key, value);
      else if (key == "positional") plan.model.positional = positional_from_string(value);
      else throw ConfigError("plan line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  if (plan.stages.empty()) throw ConfigError("plan defines no stages");
  for (const auto& s : plan.stages) {
    if (s.dataset.empty()) throw ConfigError("stage '" + s.name + "' has no dataset");
    s.validate();
  }
  plan.model.validate();
  return plan;
}

// ---------------------------------------------------------------------------
// Stage runner

struct EpochMetrics {
  std::string stage;
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean batch loss
  std::optional<double> eval_accuracy;
};

struct StageResult {
  std::string stage;
  std::vector<EpochMetrics> epochs;
  std::optional<EvalReport> eval;
  double train_accuracy = 0.0;
};

/// A stage with its examples already loaded.
struct LoadedStage {
  TrainStageConfig config;
  std::vector<LabeledExample> examples;
};

struct RunOptions {
  std::vector<LabeledExample> eval_examples;  // optional held-out set
  std::string eval_name = "eval";
  double threshold = 0.5;
  bool eval_every_epoch = true;
  std::function<void(const EpochMetrics&)> on_epoch;
  // Returning true ends the current stage after this epoch.
  std::function<bool(const Detector&, const EpochMetrics&)> stop_after_epoch;
  std::function<void(std::size_t stage_index, const Detector&, const StageResult&)> on_stage_end;
};

namespace detail {

inline std::vector<TokenSequence> tokenize_all(const Detector& det, std::span<const LabeledExample> examples) {
  std::vector<TokenSequence> out(examples.size());
  parallel_for(examples.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      out[i] = det.tokenize(examples[i].text);
      if (out[i].empty()) throw ValidationError("example '" + examples[i].id + "' has no tokens");
    }
  });
  return out;
}

}  // namespace detail

/// Trains the detector through `stages` in order. Batch order and dropout
/// masks depend only on each stage's seed, so runs replay bit-identically.
inline std::vector<StageResult> run_stages(Detector& det, std::span<const LoadedStage> stages,
                                           const RunOptions& opts = {}) {
  AdamOptimizer optimizer(parameter_tensors(det.weights));
  std::vector<StageResult> results;
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const auto& stage = stages[si];
    stage.config.validate();
    if (stage.examples.empty()) throw ValidationError("stage '" + stage.config.name + "' has no examples");
    const auto seqs = detail::tokenize_all(det, stage.examples);
    StageResult result;
    result.stage = stage.config.name;
    const CounterRng stage_rng(stage.config.seed);
    std::vector<std::size_t> order(stage.examples.size());
    for (std::size_t epoch = 1; epoch <= stage.config.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      auto shuffle_rng = stage_rng.split(2 * epoch);
      shuffle(order.begin(), order.end(), shuffle_rng);
      const auto dropout_rng = stage_rng.split(2 * epoch + 1);
      double loss_sum = 0.0;
      std::size_t n_batches = 0;
      for (std::size_t lo = 0; lo < order.size(); lo += stage.config.batch_size) {
        const std::size_t hi = std::min(order.size(), lo + stage.config.batch_size);
        std::vector<TokenSequence> bseqs;
        std::vector<float> labels;
        for (std::size_t i = lo; i < hi; ++i) {
          bseqs.push_back(seqs[order[i]]);
          labels.push_back(static_cast<float>(stage.examples[order[i]].label));
        }
        StepOptions step;
        step.learning_rate = stage.config.learning_rate;
        step.dropout_seed = dropout_rng.at(n_batches);
        step.positive_weight = stage.config.positive_weight;
        step.batch_name = "stage '" + stage.config.name + "' epoch " + std::to_string(epoch) + " batch " +
                          std::to_string(n_batches) + " (examples " + stage.examples[order[lo]].id + "...)";
        loss_sum += train_step(det.config, det.weights, optimizer, pad_batch(bseqs), labels, step);
        ++n_batches;
      }
      EpochMetrics m;
      m.stage = stage.config.name;
      m.epoch = epoch;
      m.loss = loss_sum / static_cast<double>(n_batches);
      const bool last = epoch == stage.config.epochs;
      if (!opts.eval_examples.empty() && (opts.eval_every_epoch || last)) {
        auto report = evaluate(det, opts.eval_name, opts.eval_examples, opts.threshold);
        m.eval_accuracy = report.accuracy;
        if (last) result.eval = report;
      }
      if (opts.on_epoch) opts.on_epoch(m);
      result.epochs.push_back(m);
      if (opts.stop_after_epoch && opts.stop_after_epoch(det, m)) break;
    }
    result.train_accuracy = evaluate(det, stage.config.name, stage.examples, opts.threshold).accuracy;
    if (opts.on_stage_end) opts.on_stage_end(si, det, result);
    results.push_back(std::move(result));
  }
  return results;
}

/// Raised when train/test overlap is found and no override was given.
class ContaminationError : public Error {
 public:
  using Error::Error;
};

struct PlanRunOptions {
  std::optional<std::uint64_t> seed_override;
  bool skip_contamination_check = false;
  std::ostream* log = nullptr;
};

inline std::string metrics_csv_header() { return csv::format_row({"stage", "epoch", "loss", "eval_accuracy"}); }

inline std::string metrics_csv_row(const EpochMetrics& m) {
  return csv::format_row({m.stage, std::to_string(m.epoch), fmt_fixed(m.loss, 6),
                          m.eval_accuracy ? fmt_fixed(*m.eval_accuracy, 6) : std::string()});
}

/// Runs a plan file end to end. Writes the final checkpoint to `out_path`,
/// a checkpoint per stage to `<out_path>.stageN`, and appends per-epoch
/// metrics to `<out_path>.metrics.csv`.
inline Detector train_from_plan(const TrainPlan& plan, const std::filesystem::path& data_dir,
                                const std::string& out_path, const PlanRunOptions& opts = {}) {
  auto log = [&](const std::string& msg) {
    if (opts.log) *opts.log << msg << '\n';
  };
  std::vector<LoadedStage> stages;
  for (const auto& s : plan.stages) {
    auto loaded = load_dataset((data_dir / s.dataset).string(), s.format, s.name);
    log("stage " + s.name + ": " + std::to_string(loaded.examples.size()) + " examples, " +
        std::to_string(loaded.rejects.size()) + " rejected of " + std::to_string(loaded.total_rows) + " rows");
    stages.push_back({s, std::move(loaded.examples)});
  }
  RunOptions run;
  run.threshold = plan.threshold;
  if (!plan.eval_dataset.empty()) {
    auto eval = load_dataset((data_dir / plan.eval_dataset).string(), plan.eval_format, "eval");
    run.eval_examples = std::move(eval.examples);
    run.eval_name = plan.eval_dataset;
    if (!opts.skip_contamination_check) {
      ContaminationOptions copts;
      copts.jaccard_threshold = plan.jaccard;
      for (const auto& s : stages) {
        const auto report = contamination_check(s.examples, run.eval_examples, copts);
        if (!report.clean()) {
          throw ContaminationError("stage '" + s.config.name + "' overlaps the evaluation set: " +
                                   std::to_string(report.exact_matches.size()) + " exact, " +
                                   std::to_string(report.near_duplicates.size()) +
                                   " near-duplicate pairs (use --skip-contamination-check to override)");
        }
        log("contamination check for stage " + s.config.name + ": clean");
      }
    }
  }

  Detector det;
  if (!plan.vocab.empty()) {
    det.vocab = Vocabulary::load((data_dir / plan.vocab).string());
  } else {
    std::vector<std::string> corpus;
    for (const auto& s : stages)
      for (const auto& e : s.examples) corpus.push_back(e.text);
    det.vocab = train_vocab(corpus, plan.vocab_size);
  }
  det.config = plan.model;
  det.config.vocab_size = det.vocab.size();
  det.weights = init_weights<float>(det.config, opts.seed_override.value_or(plan.seed));
  log("model: " + std::to_string(det.weights.param_count()) + " parameters, vocabulary " +
      std::to_string(det.vocab.size()));

  const std::string metrics_path = out_path + ".metrics.csv";
  const bool fresh = !std::filesystem::exists(metrics_path);
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw Error("cannot open metrics file " + metrics_path);
  if (fresh) metrics << metrics_csv_header();
  run.on_epoch = [&](const EpochMetrics& m) {
    metrics << metrics_csv_row(m) << std::flush;
    log(m.stage + " epoch " + std::to_string(m.epoch) + ": loss " + fmt_fixed(m.loss, 4) +
        (m.eval_accuracy ? ", eval accuracy " + fmt_fixed(*m.eval_accuracy, 4) : ""));
  };
  run.on_stage_end = [&](std::size_t index, const Detector& d, const StageResult& r) {
    save_checkpoint(d, out_path + ".stage" + std::to_string(index + 1));
    log("stage " + r.stage + " done: train accuracy " + fmt_fixed(r.train_accuracy, 4) +
        (r.eval ? ", eval accuracy " + fmt_fixed(r.eval->accuracy, 4) : ""));
  };
  run_stages(det, stages, run);
  save_checkpoint(det, out_path);
  return det;
}

}  // namespace ttd
