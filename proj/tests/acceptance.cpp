// Acceptance suite: one PASS/FAIL/SKIP line per criterion, nonzero exit if
// any hard criterion fails. Desk-scale Jigsaw training only runs when
// TTD_JIGSAW_CSV points at a Jigsaw train.csv.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support/ckpt_recount.hpp"
#include "support/contamination_fixture.hpp"
#include "support/gradcheck.hpp"
#include "ttd/ttd.hpp"

using namespace ttd;
namespace fs = std::filesystem;

namespace {

enum class Outcome { pass, fail, skip };

struct Verdict {
  Outcome outcome;
  std::string detail;
};

Verdict pass_if(bool ok, std::string detail) { return {ok ? Outcome::pass : Outcome::fail, std::move(detail)}; }

std::string fmt(double v, int digits = 6) {
  std::ostringstream ss;
  ss.precision(digits);
  ss << v;
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("ttd_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TokenBatch batch_of(const std::vector<std::vector<std::int32_t>>& rows) {
  TokenBatch b;
  b.batch = rows.size();
  for (const auto& r : rows) b.length = std::max(b.length, r.size());
  for (const auto& r : rows) {
    for (std::size_t t = 0; t < b.length; ++t) {
      const auto id = t < r.size() ? r[t] : kPadId;
      b.ids.push_back(id);
      b.mask.push_back(id == kPadId ? 0.0f : 1.0f);
    }
  }
  return b;
}

std::vector<std::int32_t> random_ids(CounterRng& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::int32_t> ids(n);
  for (auto& id : ids) id = kFirstByteId + static_cast<std::int32_t>(rng.below(vocab - kFirstByteId));
  return ids;
}

// Default architecture with a byte-level vocabulary stand-in; the parameter
// count and tensor shapes only depend on the config.
Detector default_detector(std::uint64_t seed) {
  Detector det;
  det.weights = init_weights<float>(det.config, seed);
  det.vocab = Vocabulary::bytes_only();
  return det;
}

// Toy corpus: toxic rows mix insults into filler, clean rows mix in polite
// words. Word choice is random so the model has to pick up the signal words.
std::vector<LabeledExample> toy_corpus(std::size_t n, std::uint64_t seed) {
  static const std::vector<std::string> insults = {"idiot", "moron", "loser", "stupid", "pathetic", "dumb", "jerk", "clown"};
  static const std::vector<std::string> polite = {"thanks", "please", "helpful", "great", "kind", "appreciate", "welcome", "nice"};
  static const std::vector<std::string> filler = {"the", "article", "edit", "page", "you", "this", "source", "talk",
                                                  "section", "is", "a", "for", "with", "again", "today", "really"};
  CounterRng rng(seed);
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const auto& signal = label ? insults : polite;
    std::string text;
    const auto words = 5 + rng.below(6);
    const auto at = rng.below(words);
    for (std::size_t w = 0; w < words; ++w) {
      text += (w ? " " : "") + (w == at ? signal[rng.below(signal.size())] : filler[rng.below(filler.size())]);
    }
    out.push_back({"toy-" + std::to_string(i), text, label, "toy"});
  }
  return out;
}

std::vector<std::string> texts_of(const std::vector<LabeledExample>& ex) {
  std::vector<std::string> out;
  for (const auto& e : ex) out.push_back(e.text);
  return out;
}

// ---------------------------------------------------------------------------

Verdict parameter_budget() {
  ModelConfig sinusoidal, learned;
  learned.positional = Positional::learned;
  const auto n_sin = count_params(sinusoidal), n_learned = count_params(learned);
  const auto dir = scratch("params");
  std::string detail = "sinusoidal " + std::to_string(n_sin) + ", learned " + std::to_string(n_learned);
  bool ok = n_sin == 2087361 && n_learned == 2120129;
  for (auto pos : {Positional::sinusoidal, Positional::learned}) {
    auto det = default_detector(1);
    det.config.positional = pos;
    det.weights = init_weights<float>(det.config, 1);
    const auto path = (dir / "default.ckpt").string();
    save_checkpoint(det, path);
    const auto census = oracle::recount_checkpoint(read_file_bytes(path));
    const auto expected = count_params(det.config);
    ok = ok && census.elements == expected && expected >= 2000000 && expected <= 2150000;
    detail += "; recount(" + to_string(pos) + ") " + std::to_string(census.elements) + " in " +
              std::to_string(census.tensors) + " tensors";
  }
  fs::remove_all(dir);
  return pass_if(ok, detail);
}

Verdict gradient_correctness() {
  ModelConfig c;
  const auto w = init_weights<float>(c, 5);
  GradCheckOptions o;
  o.n_samples = 240;
  o.fp64_tape = true;
  const auto model = grad_check(c, w, o);
  std::set<std::string> tensors;
  for (const auto& s : model.samples) tensors.insert(s.tensor);
  // Same samples on the fp32 tape, reported for information: its round-off
  // (~1e-8) exceeds the tolerance only where the true gradient is zero.
  o.fp64_tape = false;
  const auto single = grad_check(c, w, o);
  double fp32_nonzero = 0.0;
  for (const auto& s : single.samples)
    if (std::abs(s.numeric) > 1e-9) fp32_nonzero = std::max(fp32_nonzero, s.rel_error);
  double worst_op = 0.0;
  std::string worst_name;
  for (const auto& op : oracle::check_all_ops(3)) {
    if (op.check.max_rel_error >= worst_op) {
      worst_op = op.check.max_rel_error;
      worst_name = op.op;
    }
  }
  const bool ok = model.max_rel_error < 1e-2 && tensors.size() == w.parameters().size() && worst_op < 1e-3;
  return pass_if(ok, "fp64 tape max rel " + fmt(model.max_rel_error, 3) + " over " + std::to_string(model.samples.size()) +
                         " samples in " + std::to_string(tensors.size()) + "/" + std::to_string(w.parameters().size()) +
                         " tensors; fp32 ops worst " + worst_name + " " + fmt(worst_op, 3) + " [info: fp32 tape max " +
                         fmt(single.max_rel_error, 3) + ", " + fmt(fp32_nonzero, 3) + " where |numeric| > 1e-9]");
}

Verdict pad_invariance() {
  ModelConfig c;
  const auto w = init_weights<float>(c, 21);
  CounterRng rng(22);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto ids = random_ids(rng, 1 + rng.below(128), c.vocab_size);
    auto padded = ids;
    padded.resize(ids.size() + 1 + rng.below(64), kPadId);
    const float a = infer_probabilities(w, c, batch_of({ids}))[0];
    const float b = infer_probabilities(w, c, batch_of({padded}))[0];
    worst = std::max(worst, std::abs(static_cast<double>(a) - b));
  }
  return pass_if(worst < 1e-6, "max |diff| " + fmt(worst, 3) + " over 50 inputs");
}

Verdict attention_normalization() {
  ModelConfig c;
  const auto w = init_weights<float>(c, 31);
  CounterRng rng(32);
  std::vector<std::vector<std::int32_t>> rows;
  for (int i = 0; i < 6; ++i) rows.push_back(random_ids(rng, 1 + rng.below(40), c.vocab_size));
  const auto batch = batch_of(rows);
  Tape<float> tape(false);
  ForwardTrace<float> trace;
  (void)forward(tape, w, c, batch, Mode::infer, 0, &trace);
  const std::size_t T = batch.length, H = c.n_heads;
  double worst_sum = 0.0, worst_masked = 0.0;
  for (const auto& att : trace.attention) {
    for (std::size_t bh = 0; bh < batch.batch * H; ++bh) {
      const std::size_t row = bh / H;
      for (std::size_t i = 0; i < T; ++i) {
        if (batch.mask[row * T + i] == 0.0f) continue;
        double s = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          const double v = att.data()[(bh * T + i) * T + j];
          if (batch.mask[row * T + j] == 0.0f) worst_masked = std::max(worst_masked, v);
          s += v;
        }
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      }
    }
  }
  return pass_if(trace.attention.size() == c.n_layers && worst_sum <= 1e-6 && worst_masked < 1e-9,
                 "max |row sum - 1| " + fmt(worst_sum, 3) + ", max masked weight " + fmt(worst_masked, 3));
}

Verdict overfit() {
  const auto start = std::chrono::steady_clock::now();
  const auto examples = toy_corpus(128, 41);
  Detector det;
  det.vocab = train_vocab(texts_of(examples), 300);
  det.config.vocab_size = det.vocab.size();
  det.config.max_len = 64;
  det.weights = init_weights<float>(det.config, 42);
  LoadedStage stage;
  stage.config = {"overfit", "-", DatasetFormat::jigsaw, 200, 16, 1e-3, 43, StagePurpose::targeted_overfit, 1.0};
  stage.examples = examples;
  double accuracy = 0.0, loss = 0.0;
  std::size_t epochs = 0;
  RunOptions o;
  o.stop_after_epoch = [&](const Detector& d, const EpochMetrics& m) {
    epochs = m.epoch;
    loss = m.loss;
    accuracy = evaluate(d, "train", examples).accuracy;
    return accuracy >= 0.99 && loss < 0.05;
  };
  (void)run_stages(det, std::span<const LoadedStage>(&stage, 1), o);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return pass_if(accuracy >= 0.99 && loss < 0.05 && seconds < 300,
                 "train accuracy " + fmt(100 * accuracy, 4) + "%, epoch loss " + fmt(loss, 3) + " after " +
                     std::to_string(epochs) + " epochs, " + fmt(seconds, 3) + " s (default architecture, " +
                     std::to_string(det.config.vocab_size) + "-token vocabulary)");
}

Verdict desk_scale() {
  const char* path = std::getenv("TTD_JIGSAW_CSV");
  if (!path || !*path) return {Outcome::skip, "set TTD_JIGSAW_CSV to a Jigsaw train.csv to run"};
  auto data = load_jigsaw_csv(path).examples;
  CounterRng rng(51);
  shuffle(data.begin(), data.end(), rng);
  std::vector<LabeledExample> toxic, clean;
  for (auto& e : data) (e.label ? toxic : clean).push_back(std::move(e));
  const std::size_t held = std::min<std::size_t>(1000, toxic.size() / 4);
  std::vector<LabeledExample> test(toxic.begin(), toxic.begin() + static_cast<long>(held));
  test.insert(test.end(), clean.begin(), clean.begin() + static_cast<long>(held));
  std::vector<LabeledExample> train;
  const std::size_t n_toxic = std::min<std::size_t>(10000, toxic.size() - held);
  train.insert(train.end(), toxic.begin() + static_cast<long>(held), toxic.begin() + static_cast<long>(held + n_toxic));
  const std::size_t n_clean = std::min<std::size_t>(20000 - n_toxic, clean.size() - held);
  train.insert(train.end(), clean.begin() + static_cast<long>(held), clean.begin() + static_cast<long>(held + n_clean));
  shuffle(train.begin(), train.end(), rng);
  Detector det;
  det.vocab = train_vocab(texts_of(train), 8000);
  det.config.vocab_size = det.vocab.size();
  det.config.max_len = 128;
  det.weights = init_weights<float>(det.config, 52);
  LoadedStage stage;
  stage.config = {"jigsaw", path, DatasetFormat::jigsaw, 3, 32, 1e-3, 53, StagePurpose::base,
                  static_cast<double>(n_clean) / static_cast<double>(std::max<std::size_t>(n_toxic, 1))};
  stage.examples = std::move(train);
  (void)run_stages(det, std::span<const LoadedStage>(&stage, 1));
  const auto r = evaluate(det, "jigsaw-heldout", test);
  return pass_if(r.balanced_accuracy >= 0.70, "balanced accuracy " + fmt(100 * r.balanced_accuracy, 4) + "% on " +
                                                   std::to_string(test.size()) + " held-out examples (trained on " +
                                                   std::to_string(stage.examples.size()) + ")");
}

Verdict emissions() {
  const auto e = estimate_emissions(0.350, 12, 0.479, 0.20);
  return pass_if(std::abs(e.gross_kg - 2.01) <= 0.01,
                 "gross " + fmt_fixed(e.gross_kg, 4) + " kgCO2eq, net " + fmt_fixed(e.net_kg, 4) +
                     " (the original detector reports 2.01)");
}

Verdict serialization() {
  Detector det;
  std::vector<std::string> texts;
  for (int i = 0; i < 32; ++i) texts.push_back("fixture " + std::to_string(i * 31) + (i % 2 ? " you absolute clown" : " thanks"));
  det.vocab = train_vocab(texts, 320);
  det.config.vocab_size = det.vocab.size();
  det.weights = init_weights<float>(det.config, 61);
  const auto dir = scratch("serialization");
  const auto path = (dir / "fixture.ckpt").string();
  save_checkpoint(det, path);
  const auto back = load_checkpoint(path);
  const auto p1 = det.score(texts), p2 = back.score(texts);
  const bool identical = p1.size() == p2.size() && std::memcmp(p1.data(), p2.data(), p1.size() * sizeof(float)) == 0;
  auto bytes = read_file_bytes(path);
  bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x01);
  bool rejected = false;
  try {
    (void)parse_checkpoint(bytes);
  } catch (const LoadError& e) {
    rejected = std::string(e.what()).find("CRC") != std::string::npos;
  }
  fs::remove_all(dir);
  return pass_if(identical && rejected, std::string(identical ? "32 probabilities bit-identical" : "probabilities differ") +
                                            (rejected ? ", corrupted CRC rejected" : ", corruption NOT rejected"));
}

Verdict contamination() {
  const auto start = std::chrono::steady_clock::now();
  const auto f = oracle::planted_fixture(800, 200, 10, 10);
  const auto r = contamination_check(f.train, f.test);
  std::set<std::pair<std::string, std::string>> exact, near;
  for (const auto& m : r.exact_matches) exact.emplace(m.train_id, m.test_id);
  for (const auto& n : r.near_duplicates) near.emplace(n.train_id, n.test_id);
  std::size_t exact_hits = 0, near_hits = 0, oracle_hits = 0;
  for (const auto& p : f.exact) exact_hits += exact.count(p);
  for (const auto& p : f.near) near_hits += near.count(p);
  const auto brute = oracle::brute_force_near(f.train, f.test, 0.8);
  for (const auto& p : brute) oracle_hits += near.count(p);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double near_recall = static_cast<double>(near_hits) / static_cast<double>(f.near.size());
  return pass_if(exact_hits == f.exact.size() && near_recall >= 0.9 && oracle_hits == brute.size() && seconds < 60,
                 "exact " + std::to_string(exact_hits) + "/" + std::to_string(f.exact.size()) + ", near " +
                     std::to_string(near_hits) + "/" + std::to_string(f.near.size()) + ", brute-force pairs found " +
                     std::to_string(oracle_hits) + "/" + std::to_string(brute.size()) + ", " + fmt(seconds, 3) + " s");
}

Verdict latency() {
  const auto det = default_detector(71);
  BenchOptions o;
  o.lengths = {128, 512};
  o.runs = 30;
  o.warmup = 5;
  const auto r = bench_latency(det, o);
  const auto& at128 = r.latency[0];
  const auto& at512 = r.latency[1];
  return pass_if(at512.mean_s >= at128.mean_s && at128.mean_s < 0.050,
                 "mean " + fmt(1e3 * at128.mean_s, 4) + " ms @128, " + fmt(1e3 * at512.mean_s, 4) +
                     " ms @512 (the original detector reports 3.8 / 7.2 ms; " + r.hardware + ")");
}

Verdict determinism() {
  const fs::path samples = TTD_SAMPLES_DIR;
  if (!fs::exists(samples / "toy.plan")) return {Outcome::fail, "missing " + (samples / "toy.plan").string()};
  const auto plan = parse_plan(read_file_bytes((samples / "toy.plan").string()));
  std::vector<std::string> runs;
  for (int i = 0; i < 2; ++i) {
    const auto dir = scratch("determinism" + std::to_string(i));
    const auto out = (dir / "toy.ckpt").string();
    (void)train_from_plan(plan, samples, out);
    runs.push_back(read_file_bytes(out));
    fs::remove_all(dir);
  }
  return pass_if(runs[0] == runs[1], std::string(runs[0] == runs[1] ? "byte-identical" : "checkpoints differ") + " (" +
                                         std::to_string(runs[0].size()) + " bytes, samples/toy.plan)");
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"parameter budget", parameter_budget},
      {"gradient correctness", gradient_correctness},
      {"PAD invariance", pad_invariance},
      {"attention normalization", attention_normalization},
      {"overfit capability", overfit},
      {"desk-scale generalization", desk_scale},
      {"emissions formula", emissions},
      {"serialization round-trip", serialization},
      {"contamination checker", contamination},
      {"latency harness sanity", latency},
      {"determinism", determinism},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {Outcome::fail, std::string("threw: ") + e.what()};
    }
    const char* tag = v.outcome == Outcome::pass ? "PASS" : v.outcome == Outcome::fail ? "FAIL" : "SKIP";
    if (v.outcome == Outcome::fail) ++failures;
    std::cout << tag << "  " << name << ": " << v.detail << std::endl;
  }
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : "all hard criteria passed") << std::endl;
  return failures ? 1 : 0;
}
