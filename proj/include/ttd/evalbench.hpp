#pragma once

#include <sys/utsname.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "ttd/checkpoint.hpp"
#include "ttd/csv.hpp"
#include "ttd/datasets.hpp"
#include "ttd/errors.hpp"
#include "ttd/model.hpp"
#include "ttd/parallel.hpp"
#include "ttd/rng.hpp"

namespace ttd {

// ---------------------------------------------------------------------------
// Accuracy

struct EvalReport {
  std::string dataset;
  std::size_t n_examples = 0;
  double accuracy = 0.0;
  double balanced_accuracy = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double threshold = 0.5;
};

/// Maps examples to toxicity probabilities.
using Scorer = std::function<std::vector<float>(std::span<const LabeledExample>)>;

/// Confusion matrix and accuracies for precomputed probabilities.
inline EvalReport tally(std::string dataset, std::span<const LabeledExample> examples, std::span<const float> probs,
                        double threshold) {
  if (examples.empty()) throw ValidationError("evaluate: empty dataset");
  if (probs.size() != examples.size()) throw DimensionError("evaluate: scorer returned the wrong number of scores");
  EvalReport r;
  r.dataset = std::move(dataset);
  r.n_examples = examples.size();
  r.threshold = threshold;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const bool predicted = decide(probs[i], threshold) == Label::toxic;
    const bool actual = examples[i].label == 1;
    if (predicted && actual) ++r.tp;
    else if (predicted) ++r.fp;
    else if (actual) ++r.fn;
    else ++r.tn;
  }
  const auto n = static_cast<double>(r.n_examples);
  r.accuracy = static_cast<double>(r.tp + r.tn) / n;
  const std::size_t pos = r.tp + r.fn, neg = r.tn + r.fp;
  if (pos > 0 && neg > 0) {
    r.balanced_accuracy = 0.5 * (static_cast<double>(r.tp) / static_cast<double>(pos) +
                                 static_cast<double>(r.tn) / static_cast<double>(neg));
  } else {
    r.balanced_accuracy = r.accuracy;
  }
  return r;
}

inline EvalReport evaluate(const Scorer& scorer, std::string dataset, std::span<const LabeledExample> examples,
                           double threshold = 0.5) {
  if (examples.empty()) throw ValidationError("evaluate: empty dataset");
  const auto probs = scorer(examples);
  return tally(std::move(dataset), examples, probs, threshold);
}

/// Batched fp32 inference at the detector's max_len, parallel across batches.
inline Scorer detector_scorer(const Detector& det, std::size_t batch_size = 32) {
  return [&det, batch_size](std::span<const LabeledExample> examples) {
    std::vector<float> probs(examples.size());
    const std::size_t n_batches = (examples.size() + batch_size - 1) / batch_size;
    parallel_for(n_batches, [&](std::size_t begin, std::size_t end) {
      for (std::size_t b = begin; b < end; ++b) {
        const std::size_t lo = b * batch_size, hi = std::min(examples.size(), lo + batch_size);
        std::vector<TokenSequence> seqs;
        for (std::size_t i = lo; i < hi; ++i) {
          seqs.push_back(det.tokenize(examples[i].text));
          if (seqs.back().empty()) throw ValidationError("example '" + examples[i].id + "' has no tokens");
        }
        const auto p = infer_probabilities(det.weights, det.config, pad_batch(seqs));
        std::copy(p.begin(), p.end(), probs.begin() + static_cast<std::ptrdiff_t>(lo));
      }
    });
    return probs;
  };
}

inline EvalReport evaluate(const Detector& det, std::string dataset, std::span<const LabeledExample> examples,
                           double threshold = 0.5) {
  return evaluate(detector_scorer(det), std::move(dataset), examples, threshold);
}

// ---------------------------------------------------------------------------
// Latency and memory

struct LatencyStats {
  std::size_t tokens = 0;
  std::size_t runs = 0;
  std::size_t warmup = 0;
  double mean_s = 0.0;
  double median_s = 0.0;
  double p95_s = 0.0;
  float probability = 0.0f;        // model output on the synthetic input
  bool outputs_identical = true;   // every timed run produced the same output
};

struct BenchReport {
  std::vector<LatencyStats> latency;
  std::size_t param_count = 0;
  std::size_t weight_bytes = 0;
  std::optional<std::int64_t> rss_delta_bytes;
  std::string hardware;
};

struct BenchOptions {
  std::vector<std::size_t> lengths = {128, 512};
  std::size_t runs = 100;
  std::size_t warmup = 10;
  std::uint64_t seed = 0;
};

/// Published single-example CPU latency of the original detector, kept as a
/// footnote in reports (hardware dependent, never asserted).
inline constexpr double kReferenceLatency128 = 0.0038;
inline constexpr double kReferenceLatency512 = 0.0072;
inline constexpr double kReferenceRamMb = 10.0;
inline constexpr double kReferenceVramMb = 8.0;

inline std::string hardware_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream info("/proc/cpuinfo");
  for (std::string line; std::getline(info, line);) {
    if (line.rfind("model name", 0) == 0) {
      if (auto colon = line.find(':'); colon != std::string::npos) cpu = line.substr(colon + 2);
      break;
    }
  }
  std::string os = "unknown os";
  if (utsname u{}; uname(&u) == 0) os = std::string(u.sysname) + " " + u.release + " " + u.machine;
  return cpu + "; " + std::to_string(std::thread::hardware_concurrency()) + " hw threads; " + os;
}

/// Summary statistics; p95 uses the nearest-rank definition.
inline LatencyStats summarize_latency(std::vector<double> seconds) {
  if (seconds.empty()) throw ContractError("summarize_latency: no samples");
  LatencyStats s;
  s.runs = seconds.size();
  s.mean_s = std::accumulate(seconds.begin(), seconds.end(), 0.0) / static_cast<double>(seconds.size());
  std::sort(seconds.begin(), seconds.end());
  const auto n = seconds.size();
  s.median_s = n % 2 ? seconds[n / 2] : 0.5 * (seconds[n / 2 - 1] + seconds[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  s.p95_s = seconds[std::max<std::size_t>(rank, 1) - 1];
  return s;
}

/// Synthetic single-row batch of exactly `length` content tokens.
inline TokenBatch synthetic_batch(std::size_t length, std::size_t vocab_size, std::uint64_t seed) {
  if (vocab_size <= static_cast<std::size_t>(kFirstByteId)) throw ConfigError("vocabulary too small for benchmarking");
  CounterRng rng(seed);
  TokenBatch b;
  b.batch = 1;
  b.length = length;
  for (std::size_t i = 0; i < length; ++i) {
    b.ids.push_back(kFirstByteId + static_cast<std::int32_t>(rng.below(vocab_size - kFirstByteId)));
  }
  b.mask.assign(length, 1.0f);
  return b;
}

/// Batch-1 CPU latency on the calling thread. Warmup runs are excluded from
/// every statistic.
inline BenchReport bench_latency(const Detector& det, const BenchOptions& opts = {}) {
  if (opts.runs == 0) throw ContractError("bench_latency: runs must be positive");
  BenchReport report;
  report.param_count = det.weights.param_count();
  report.weight_bytes = report.param_count * sizeof(float);
  report.hardware = hardware_descriptor();
  for (auto length : opts.lengths) {
    if (length == 0 || length > det.config.max_len) {
      throw ContractError("bench_latency: length " + std::to_string(length) + " outside [1, max_len]");
    }
    const auto batch = synthetic_batch(length, det.config.vocab_size, opts.seed + length);
    for (std::size_t i = 0; i < opts.warmup; ++i) (void)infer_probabilities(det.weights, det.config, batch);
    std::vector<double> times;
    std::vector<float> outputs;
    for (std::size_t i = 0; i < opts.runs; ++i) {
      const auto start = std::chrono::steady_clock::now();
      const auto p = infer_probabilities(det.weights, det.config, batch);
      const auto stop = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double>(stop - start).count());
      outputs.push_back(p[0]);
    }
    auto stats = summarize_latency(std::move(times));
    stats.tokens = length;
    stats.warmup = opts.warmup;
    stats.probability = outputs.front();
    stats.outputs_identical =
        std::all_of(outputs.begin(), outputs.end(), [&](float v) { return v == outputs.front(); });
    report.latency.push_back(stats);
  }
  return report;
}

struct MemoryReport {
  std::int64_t rss_delta_bytes = 0;
  std::size_t param_count = 0;
  std::size_t weight_bytes = 0;
};

namespace detail {

inline std::int64_t resident_bytes() {
  std::ifstream statm("/proc/self/statm");
  std::int64_t size = 0, resident = 0;
  statm >> size >> resident;
  return resident * static_cast<std::int64_t>(sysconf(_SC_PAGESIZE));
}

}  // namespace detail

/// Resident-set growth caused by loading a checkpoint (model + vocabulary),
/// measured in a forked child so the caller's heap does not interfere.
inline MemoryReport bench_memory(const std::string& checkpoint_path) {
  if (!std::filesystem::exists(checkpoint_path)) throw LoadError("checkpoint not found: " + checkpoint_path);
  int fds[2];
  if (pipe(fds) != 0) throw Error("bench_memory: pipe() failed");
  const pid_t pid = fork();
  if (pid < 0) throw Error("bench_memory: fork() failed");
  if (pid == 0) {
    close(fds[0]);
    std::int64_t msg[3] = {-1, 0, 0};
    try {
      const auto before = detail::resident_bytes();
      const auto det = load_checkpoint(checkpoint_path);
      const auto after = detail::resident_bytes();
      msg[0] = 0;
      msg[1] = after - before;
      msg[2] = static_cast<std::int64_t>(det.weights.param_count());
    } catch (...) {
    }
    [[maybe_unused]] auto n = write(fds[1], msg, sizeof msg);
    close(fds[1]);
    _exit(0);
  }
  close(fds[1]);
  std::int64_t msg[3] = {-1, 0, 0};
  const auto got = read(fds[0], msg, sizeof msg);
  close(fds[0]);
  int status = 0;
  waitpid(pid, &status, 0);
  if (got != static_cast<ssize_t>(sizeof msg) || msg[0] != 0) {
    throw LoadError("bench_memory: could not load checkpoint " + checkpoint_path);
  }
  MemoryReport r;
  r.rss_delta_bytes = msg[1];
  r.param_count = static_cast<std::size_t>(msg[2]);
  r.weight_bytes = r.param_count * sizeof(float);
  return r;
}

// ---------------------------------------------------------------------------
// Emissions

struct EmissionsEstimate {
  double power_kw = 0.0;
  double hours = 0.0;
  double intensity_kgco2_per_kwh = 0.0;
  double gross_kg = 0.0;
  double offset_fraction = 0.0;
  double net_kg = 0.0;
};

/// gross = power * hours * intensity; net = gross * (1 - offset).
inline EmissionsEstimate estimate_emissions(double power_kw, double hours, double intensity,
                                            double offset_fraction = 0.0) {
  auto check = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(std::string(name) + " must be a non-negative number");
  };
  check(power_kw, "power_kw");
  check(hours, "hours");
  check(intensity, "intensity");
  check(offset_fraction, "offset");
  if (offset_fraction > 1.0) throw ValidationError("offset must not exceed 1");
  EmissionsEstimate e;
  e.power_kw = power_kw;
  e.hours = hours;
  e.intensity_kgco2_per_kwh = intensity;
  e.offset_fraction = offset_fraction;
  e.gross_kg = power_kw * hours * intensity;
  e.net_kg = e.gross_kg * (1.0 - offset_fraction);
  return e;
}

// ---------------------------------------------------------------------------
// Report rendering

struct ReportBundle {
  std::string model_name = "ttd";
  std::size_t param_count = 0;
  std::vector<EvalReport> evaluations;
  std::optional<BenchReport> bench;
  std::optional<MemoryReport> memory;
  std::optional<EmissionsEstimate> emissions;
};

struct RenderedReports {
  std::string text;
  std::map<std::string, std::string> csv_files;  // file name -> contents
};

inline std::string fmt_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

/// Column-aligned plain-text table.
inline std::string text_table(const std::string& title, const std::vector<std::string>& header,
                              const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
  auto line = [&](const std::vector<std::string>& cells) {
    std::string s = "|";
    for (std::size_t c = 0; c < width.size(); ++c) {
      const auto& cell = c < cells.size() ? cells[c] : std::string();
      s += " " + cell + std::string(width[c] - cell.size(), ' ') + " |";
    }
    return s + "\n";
  };
  std::string rule = "+";
  for (auto w : width) rule += std::string(w + 2, '-') + "+";
  rule += "\n";
  std::string out = title + "\n" + rule + line(header) + rule;
  for (const auto& r : rows) out += line(r);
  return out + rule;
}

/// Text tables (requirements, latency, accuracy, emissions) plus CSV files,
/// including a params-vs-average-score scatter for external plotting.
inline RenderedReports emit_report_tables(const ReportBundle& b) {
  if (b.evaluations.empty() && !b.bench && !b.memory && !b.emissions) {
    throw ContractError("emit_report_tables: nothing to report");
  }
  RenderedReports out;
  const auto params = b.param_count ? b.param_count : (b.bench ? b.bench->param_count : (b.memory ? b.memory->param_count : 0));

  if (b.memory || b.bench) {
    std::vector<std::vector<std::string>> rows;
    const std::size_t weight_bytes = params * sizeof(float);
    std::string rss = b.memory ? fmt_fixed(static_cast<double>(b.memory->rss_delta_bytes) / 1e6, 2) : "n/a";
    rows.push_back({b.model_name, std::to_string(params), fmt_fixed(static_cast<double>(weight_bytes) / 1e6, 2), rss});
    out.text += text_table("Memory requirements", {"model", "parameters", "fp32 weights (MB)", "RSS delta on load (MB)"}, rows);
    out.text += "  reference: the original detector reports " + fmt_fixed(kReferenceRamMb, 0) + "MB RAM / " +
                fmt_fixed(kReferenceVramMb, 0) + "MB VRAM\n\n";
    out.csv_files["memory.csv"] = csv::format_row({"model", "parameters", "weight_bytes", "rss_delta_bytes"}) +
                                  csv::format_row({b.model_name, std::to_string(params), std::to_string(weight_bytes),
                                                   b.memory ? std::to_string(b.memory->rss_delta_bytes) : ""});
  }

  if (b.bench) {
    std::vector<std::vector<std::string>> rows;
    std::string csv_text = csv::format_row({"tokens", "runs", "warmup", "mean_s", "median_s", "p95_s", "hardware"});
    for (const auto& s : b.bench->latency) {
      rows.push_back({std::to_string(s.tokens), std::to_string(s.runs), std::to_string(s.warmup), fmt_fixed(s.mean_s, 6),
                      fmt_fixed(s.median_s, 6), fmt_fixed(s.p95_s, 6)});
      csv_text += csv::format_row({std::to_string(s.tokens), std::to_string(s.runs), std::to_string(s.warmup),
                                   fmt_fixed(s.mean_s, 9), fmt_fixed(s.median_s, 9), fmt_fixed(s.p95_s, 9),
                                   b.bench->hardware});
    }
    out.text += text_table("CPU inference latency (batch 1)", {"tokens", "runs", "warmup", "mean (s)", "median (s)", "p95 (s)"},
                           rows);
    out.text += "  hardware: " + b.bench->hardware + "\n";
    out.text += "  reference: the original detector reports " + fmt_fixed(kReferenceLatency128, 4) + " s @128 and " +
                fmt_fixed(kReferenceLatency512, 4) + " s @512 tokens on CPU (hardware dependent)\n\n";
    out.csv_files["latency.csv"] = csv_text;
  }

  if (!b.evaluations.empty()) {
    std::vector<std::vector<std::string>> rows;
    std::string csv_text = csv::format_row(
        {"dataset", "n", "accuracy", "balanced_accuracy", "tp", "fp", "tn", "fn", "threshold"});
    double total = 0.0;
    for (const auto& e : b.evaluations) {
      rows.push_back({e.dataset, std::to_string(e.n_examples), fmt_fixed(100.0 * e.accuracy, 2),
                      fmt_fixed(100.0 * e.balanced_accuracy, 2), std::to_string(e.tp), std::to_string(e.fp),
                      std::to_string(e.tn), std::to_string(e.fn)});
      csv_text += csv::format_row({e.dataset, std::to_string(e.n_examples), fmt_fixed(e.accuracy, 6),
                                   fmt_fixed(e.balanced_accuracy, 6), std::to_string(e.tp), std::to_string(e.fp),
                                   std::to_string(e.tn), std::to_string(e.fn), fmt_fixed(e.threshold, 4)});
      total += e.accuracy;
    }
    out.text += text_table("Accuracy", {"dataset", "n", "accuracy (%)", "balanced (%)", "TP", "FP", "TN", "FN"}, rows);
    out.text += "  reference: the original detector reports 90.97% (ToxiGen) / 86.98% (Jigsaw); "
                "90.26% / 87.34% are also quoted for the same sets\n\n";
    out.csv_files["accuracy.csv"] = csv_text;
    const double avg = total / static_cast<double>(b.evaluations.size());
    out.csv_files["scatter.csv"] = csv::format_row({"model", "parameters", "avg_benchmark_score"}) +
                                   csv::format_row({b.model_name, std::to_string(params), fmt_fixed(100.0 * avg, 4)});
  }

  if (b.emissions) {
    const auto& e = *b.emissions;
    out.text += text_table("Training emissions estimate", {"power (kW)", "hours", "kgCO2eq/kWh", "gross (kg)", "offset", "net (kg)"},
                           {{fmt_fixed(e.power_kw, 3), fmt_fixed(e.hours, 2), fmt_fixed(e.intensity_kgco2_per_kwh, 3),
                             fmt_fixed(e.gross_kg, 4), fmt_fixed(e.offset_fraction, 2), fmt_fixed(e.net_kg, 4)}});
    out.text += "\n";
    out.csv_files["emissions.csv"] =
        csv::format_row({"power_kw", "hours", "intensity_kgco2_per_kwh", "gross_kg", "offset_fraction", "net_kg"}) +
        csv::format_row({fmt_fixed(e.power_kw, 6), fmt_fixed(e.hours, 6), fmt_fixed(e.intensity_kgco2_per_kwh, 6),
                         fmt_fixed(e.gross_kg, 4), fmt_fixed(e.offset_fraction, 6), fmt_fixed(e.net_kg, 4)});
  }
  return out;
}

}  // namespace ttd
