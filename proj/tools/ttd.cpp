// ttd: command-line front end for the toxicity detector.
//
// Exit codes: 0 success, 1 runtime error, 2 usage error (bad flags, missing
// input files).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ttd/ttd.hpp"

namespace {

constexpr int kRuntimeError = 1;

std::string format_probability(float p) { return ttd::fmt_fixed(p, 6); }

/// Loads a labeled file as Jigsaw, falling back to ToxiGen when the Jigsaw
/// columns are absent.
ttd::LoadResult load_any(const std::string& path) {
  try {
    return ttd::load_jigsaw_csv(path);
  } catch (const ttd::SchemaError&) {
    return ttd::load_toxigen(path);
  }
}

void report_rejects(const ttd::LoadResult& r, const std::string& path) {
  if (!r.rejects.empty()) {
    std::cerr << path << ": skipped " << r.rejects.size() << " of " << r.total_rows << " rows";
    const auto& first = r.rejects.front();
    std::cerr << " (first: row " << first.row << ", " << first.reason << ")\n";
  }
}

void write_reports(const ttd::RenderedReports& reports, const std::optional<std::string>& out_dir) {
  std::cout << reports.text;
  if (!out_dir) return;
  std::filesystem::create_directories(*out_dir);
  for (const auto& [name, contents] : reports.csv_files) {
    const auto path = (std::filesystem::path(*out_dir) / name).string();
    ttd::write_file_bytes(path, contents);
    std::cerr << "wrote " << path << '\n';
  }
}

int cmd_build_vocab(const std::string& corpus_path, std::size_t size, const std::string& out) {
  std::vector<std::string> corpus;
  if (corpus_path.ends_with(".csv") || corpus_path.ends_with(".tsv")) {
    auto loaded = load_any(corpus_path);
    report_rejects(loaded, corpus_path);
    for (auto& e : loaded.examples) corpus.push_back(std::move(e.text));
  } else {
    std::ifstream in(corpus_path);
    for (std::string line; std::getline(in, line);) {
      if (!line.empty()) corpus.push_back(std::move(line));
    }
  }
  const auto vocab = ttd::train_vocab(corpus, size);
  vocab.save(out);
  std::cout << "tokens\t" << vocab.size() << "\nmerges\t" << vocab.merges().size() << '\n';
  return 0;
}

int cmd_train(const std::string& plan_path, const std::string& data_dir, const std::string& out,
              std::optional<std::uint64_t> seed, bool skip_check) {
  const auto plan = ttd::parse_plan(ttd::read_file_bytes(plan_path));
  ttd::PlanRunOptions opts;
  opts.seed_override = seed;
  opts.skip_contamination_check = skip_check;
  opts.log = &std::cerr;
  const auto det = ttd::train_from_plan(plan, data_dir, out, opts);
  std::cout << "checkpoint\t" << out << "\nparameters\t" << det.weights.param_count() << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& dataset, const std::string& format, double threshold,
             const std::optional<std::string>& out_dir) {
  const auto det = ttd::load_checkpoint(ckpt);
  const auto loaded = ttd::load_dataset(dataset, ttd::dataset_format_from_string(format));
  report_rejects(loaded, dataset);
  ttd::ReportBundle bundle;
  bundle.param_count = det.weights.param_count();
  bundle.evaluations.push_back(
      ttd::evaluate(det, std::filesystem::path(dataset).filename().string(), loaded.examples, threshold));
  write_reports(ttd::emit_report_tables(bundle), out_dir);
  return 0;
}

int cmd_predict(const std::string& ckpt, const std::optional<std::string>& text, double threshold) {
  const auto det = ttd::load_checkpoint(ckpt);
  auto emit = [&](const std::string& input) {
    const auto p = det.predict(input, threshold);
    std::cout << ttd::label_name(p.label) << '\t' << format_probability(p.probability) << '\n';
  };
  if (text) {
    emit(*text);
    return 0;
  }
  for (std::string line; std::getline(std::cin, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    emit(line);
  }
  return 0;
}

int cmd_bench(const std::string& ckpt, const std::vector<std::size_t>& lengths, std::size_t runs, std::uint64_t seed,
              const std::optional<std::string>& out_dir) {
  const auto det = ttd::load_checkpoint(ckpt);
  ttd::BenchOptions opts;
  opts.lengths = lengths;
  opts.runs = runs;
  opts.seed = seed;
  ttd::ReportBundle bundle;
  bundle.param_count = det.weights.param_count();
  bundle.memory = ttd::bench_memory(ckpt);
  bundle.bench = ttd::bench_latency(det, opts);
  bundle.bench->rss_delta_bytes = bundle.memory->rss_delta_bytes;
  write_reports(ttd::emit_report_tables(bundle), out_dir);
  return 0;
}

int cmd_check_contamination(const std::string& train_path, const std::string& test_path, double jaccard) {
  const auto train = load_any(train_path);
  const auto test = load_any(test_path);
  report_rejects(train, train_path);
  report_rejects(test, test_path);
  ttd::ContaminationOptions opts;
  opts.jaccard_threshold = jaccard;
  const auto report = ttd::contamination_check(train.examples, test.examples, opts);
  std::cout << "kind\ttrain_id\ttest_id\tjaccard\n";
  for (const auto& m : report.exact_matches) std::cout << "exact\t" << m.train_id << '\t' << m.test_id << "\t1.0000\n";
  for (const auto& n : report.near_duplicates) {
    std::cout << "near\t" << n.train_id << '\t' << n.test_id << '\t' << ttd::fmt_fixed(n.jaccard, 4) << '\n';
  }
  std::cerr << "exact matches: " << report.exact_matches.size()
            << ", near duplicates: " << report.near_duplicates.size() << '\n';
  return 0;
}

int cmd_estimate_co2(double power_kw, double hours, double intensity, double offset) {
  const auto e = ttd::estimate_emissions(power_kw, hours, intensity, offset);
  std::cout << "gross_kgco2eq\t" << ttd::fmt_fixed(e.gross_kg, 2) << '\n'
            << "net_kgco2eq\t" << ttd::fmt_fixed(e.net_kg, 2) << '\n'
            << "gross_exact\t" << ttd::fmt_fixed(e.gross_kg, 4) << '\n'
            << "net_exact\t" << ttd::fmt_fixed(e.net_kg, 4) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Small transformer toxicity classifier"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "ttd 1.0");

  // build-vocab
  std::string corpus, vocab_out;
  std::size_t vocab_size = ttd::kDefaultVocabSize;
  auto* build_vocab = app.add_subcommand("build-vocab", "Learn a byte-level BPE vocabulary");
  build_vocab->add_option("--corpus", corpus, "Text corpus: one document per line, or a labeled .csv/.tsv")
      ->required()
      ->check(CLI::ExistingFile);
  build_vocab->add_option("--size", vocab_size, "Target vocabulary size (>= 258)")->required()->check(CLI::Range(258, 1 << 24));
  build_vocab->add_option("--out", vocab_out, "Output vocabulary file")->required();

  // train
  std::string plan, data_dir, ckpt_out;
  std::optional<std::uint64_t> seed;
  bool skip_check = false;
  auto* train = app.add_subcommand("train", "Train through a staged plan");
  train->add_option("--plan", plan, "Stage plan file")->required()->check(CLI::ExistingFile);
  train->add_option("--data-dir", data_dir, "Directory that plan dataset paths are relative to")
      ->required()
      ->check(CLI::ExistingDirectory);
  train->add_option("--out", ckpt_out, "Output checkpoint; per-stage checkpoints and metrics are written alongside")
      ->required();
  train->add_option("--seed", seed, "Override the plan's initialization seed");
  train->add_flag("--skip-contamination-check", skip_check, "Train even if stage data overlaps the eval set");

  // eval
  std::string ckpt, dataset, format;
  double threshold = 0.5;
  std::optional<std::string> report_dir;
  auto* eval = app.add_subcommand("eval", "Accuracy on a labeled dataset");
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--dataset", dataset, "Labeled dataset file")->required()->check(CLI::ExistingFile);
  eval->add_option("--format", format, "Dataset format")->required()->check(CLI::IsMember({"jigsaw", "toxigen"}));
  eval->add_option("--threshold", threshold, "Decision threshold")->check(CLI::Range(0.0, 1.0));
  eval->add_option("--out", report_dir, "Directory for CSV report files");

  // predict
  std::optional<std::string> text;
  bool from_stdin = false;
  auto* predict = app.add_subcommand("predict", "Classify text; prints label TAB probability per input");
  predict->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  auto* text_opt = predict->add_option("--text", text, "Text to classify");
  auto* stdin_opt = predict->add_flag("--stdin", from_stdin, "Read newline-delimited UTF-8 texts from stdin");
  text_opt->excludes(stdin_opt);
  predict->add_option("--threshold", threshold, "Decision threshold")->check(CLI::Range(0.0, 1.0));
  predict->callback([&] {
    if (!text && !from_stdin) throw CLI::RequiredError("--text or --stdin");
  });

  // bench
  std::vector<std::size_t> lengths = {128, 512};
  std::size_t runs = 100;
  std::uint64_t bench_seed = 0;
  auto* bench = app.add_subcommand("bench", "CPU latency and memory benchmark");
  bench->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  bench->add_option("--lengths", lengths, "Comma-separated token lengths")
      ->delimiter(',')
      ->check(CLI::Range(std::size_t{1}, ttd::kMaxSequenceLength));
  bench->add_option("--runs", runs, "Timed runs per length")->check(CLI::Range(std::size_t{1}, std::size_t{1000000}));
  bench->add_option("--seed", bench_seed, "Seed for the synthetic inputs");
  bench->add_option("--out", report_dir, "Directory for CSV report files");

  // check-contamination
  std::string train_path, test_path;
  double jaccard = 0.8;
  auto* contamination = app.add_subcommand("check-contamination", "Find exact and near-duplicate train/test overlap");
  contamination->add_option("--train", train_path, "Training set")->required()->check(CLI::ExistingFile);
  contamination->add_option("--test", test_path, "Test set")->required()->check(CLI::ExistingFile);
  contamination->add_option("--jaccard", jaccard, "Near-duplicate Jaccard threshold")->check(CLI::Range(0.0, 1.0));

  // estimate-co2
  double power_kw = 0, hours = 0, intensity = 0, offset = 0;
  auto* co2 = app.add_subcommand("estimate-co2", "Training emissions estimate");
  co2->add_option("--power-kw", power_kw, "Average power draw in kW")->required();
  co2->add_option("--hours", hours, "Training hours")->required();
  co2->add_option("--intensity", intensity, "Grid intensity in kgCO2eq/kWh")->required();
  co2->add_option("--offset", offset, "Fraction of emissions offset, in [0, 1]");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*build_vocab) return cmd_build_vocab(corpus, vocab_size, vocab_out);
    if (*train) return cmd_train(plan, data_dir, ckpt_out, seed, skip_check);
    if (*eval) return cmd_eval(ckpt, dataset, format, threshold, report_dir);
    if (*predict) return cmd_predict(ckpt, text, threshold);
    if (*bench) return cmd_bench(ckpt, lengths, runs, bench_seed, report_dir);
    if (*contamination) return cmd_check_contamination(train_path, test_path, jaccard);
    if (*co2) return cmd_estimate_co2(power_kw, hours, intensity, offset);
  } catch (const ttd::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return 2;
}
