#pragma once

// Train/test overlap detection: exact matches on normalized surface text and
// near-duplicates by Jaccard similarity of word 5-gram shingles. Candidate
// pairs come from MinHash signatures bucketed by LSH bands; every candidate
// is verified with the exact Jaccard score before being reported.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <unicode/locid.h>
#include <unicode/unistr.h>

#include "ttd/csv.hpp"
#include "ttd/datasets.hpp"
#include "ttd/errors.hpp"
#include "ttd/parallel.hpp"
#include "ttd/rng.hpp"
#include "ttd/unicode.hpp"

namespace ttd {

struct ContaminationOptions {
  double jaccard_threshold = 0.8;
  std::size_t shingle_size = 5;
  std::size_t num_permutations = 128;
  std::size_t bands = 32;  // rows per band = num_permutations / bands
  std::uint64_t seed = 0x5eed;
};

struct ExactMatch {
  std::string train_id;
  std::string test_id;
};

struct NearDuplicate {
  std::string train_id;
  std::string test_id;
  double jaccard = 0.0;
};

struct ContaminationReport {
  std::vector<ExactMatch> exact_matches;
  std::vector<NearDuplicate> near_duplicates;
  ContaminationOptions options;

  [[nodiscard]] bool clean() const { return exact_matches.empty() && near_duplicates.empty(); }
};

/// Lowercase, whitespace runs collapsed to one space, trimmed.
inline std::string normalize_for_matching(std::string_view text) {
  auto u = icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  u.toLower(icu::Locale::getRoot());
  std::string lowered;
  u.toUTF8String(lowered);
  std::string out;
  out.reserve(lowered.size());
  bool pending_space = false;
  for (char c : lowered) {
    if (is_ascii_space(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += c;
  }
  return out;
}

inline std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Sorted, de-duplicated hashes of word k-grams of normalized text. Texts
/// shorter than k words yield a single shingle of all their words.
inline std::vector<std::uint64_t> shingle_hashes(std::string_view normalized, std::size_t k) {
  std::vector<std::string_view> words;
  std::size_t pos = 0;
  while (pos < normalized.size()) {
    auto sp = normalized.find(' ', pos);
    if (sp == std::string_view::npos) sp = normalized.size();
    if (sp > pos) words.push_back(normalized.substr(pos, sp - pos));
    pos = sp + 1;
  }
  std::vector<std::uint64_t> out;
  if (words.empty()) return out;
  const std::size_t width = std::min(k, words.size());
  for (std::size_t i = 0; i + width <= words.size(); ++i) {
    const auto begin = words[i].data() - normalized.data();
    const auto end = words[i + width - 1].data() + words[i + width - 1].size() - normalized.data();
    out.push_back(fnv1a64(normalized.substr(static_cast<std::size_t>(begin), static_cast<std::size_t>(end - begin))));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Jaccard similarity of two sorted, unique sets.
inline double jaccard(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t i = 0, j = 0, common = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++common;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return static_cast<double>(common) / static_cast<double>(a.size() + b.size() - common);
}

/// MinHash signatures under universal hashes h(x) = (a x + b) mod (2^61 - 1).
class MinHasher {
 public:
  MinHasher(std::size_t num_permutations, std::uint64_t seed) {
    CounterRng rng(seed);
    for (std::size_t i = 0; i < num_permutations; ++i) {
      a_.push_back(1 + rng.below(kPrime - 1));
      b_.push_back(rng.below(kPrime));
    }
  }

  [[nodiscard]] std::vector<std::uint64_t> signature(const std::vector<std::uint64_t>& shingles) const {
    std::vector<std::uint64_t> sig(a_.size(), kPrime);
    for (auto s : shingles) {
      const std::uint64_t x = s % kPrime;
      for (std::size_t i = 0; i < a_.size(); ++i) {
        const auto prod = static_cast<unsigned __int128>(a_[i]) * x + b_[i];
        const auto h = static_cast<std::uint64_t>(prod % kPrime);
        if (h < sig[i]) sig[i] = h;
      }
    }
    return sig;
  }

 private:
  static constexpr std::uint64_t kPrime = (1ULL << 61) - 1;
  std::vector<std::uint64_t> a_, b_;
};

inline ContaminationReport contamination_check(std::span<const LabeledExample> train,
                                               std::span<const LabeledExample> test,
                                               const ContaminationOptions& opts = {}) {
  if (!(opts.jaccard_threshold > 0.0 && opts.jaccard_threshold <= 1.0)) {
    throw ConfigError("jaccard threshold must lie in (0, 1]");
  }
  if (opts.bands == 0 || opts.num_permutations % opts.bands != 0) {
    throw ConfigError("num_permutations must be a multiple of bands");
  }
  ContaminationReport report;
  report.options = opts;
  const std::size_t rows_per_band = opts.num_permutations / opts.bands;

  struct Doc {
    std::string normalized;
    std::vector<std::uint64_t> shingles;
    std::vector<std::uint64_t> signature;
  };
  const MinHasher hasher(opts.num_permutations, opts.seed);
  auto prepare = [&](std::span<const LabeledExample> data) {
    std::vector<Doc> docs(data.size());
    parallel_for(data.size(), [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        docs[i].normalized = normalize_for_matching(data[i].text);
        docs[i].shingles = shingle_hashes(docs[i].normalized, opts.shingle_size);
        docs[i].signature = hasher.signature(docs[i].shingles);
      }
    });
    return docs;
  };
  const auto train_docs = prepare(train);
  const auto test_docs = prepare(test);

  std::unordered_map<std::string_view, std::vector<std::uint32_t>> by_text;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> buckets;
  auto band_key = [&](const std::vector<std::uint64_t>& sig, std::size_t band) {
    std::uint64_t h = mix64(band);
    for (std::size_t r = 0; r < rows_per_band; ++r) h = mix64(h ^ sig[band * rows_per_band + r]);
    return h;
  };
  for (std::uint32_t i = 0; i < train_docs.size(); ++i) {
    by_text[train_docs[i].normalized].push_back(i);
    if (train_docs[i].shingles.empty()) continue;
    for (std::size_t band = 0; band < opts.bands; ++band) buckets[band_key(train_docs[i].signature, band)].push_back(i);
  }

  struct Hits {
    std::vector<std::uint32_t> exact;
    std::vector<std::pair<std::uint32_t, double>> near;
  };
  std::vector<Hits> hits(test_docs.size());
  parallel_for(test_docs.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t) {
      const auto& doc = test_docs[t];
      if (auto it = by_text.find(doc.normalized); it != by_text.end()) hits[t].exact = it->second;
      if (doc.shingles.empty()) continue;
      std::vector<std::uint32_t> candidates;
      for (std::size_t band = 0; band < opts.bands; ++band) {
        if (auto it = buckets.find(band_key(doc.signature, band)); it != buckets.end()) {
          candidates.insert(candidates.end(), it->second.begin(), it->second.end());
        }
      }
      std::sort(candidates.begin(), candidates.end());
      candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
      for (auto c : candidates) {
        if (train_docs[c].normalized == doc.normalized) continue;
        const double score = jaccard(train_docs[c].shingles, doc.shingles);
        if (score >= opts.jaccard_threshold) hits[t].near.emplace_back(c, score);
      }
    }
  });

  for (std::size_t t = 0; t < hits.size(); ++t) {
    for (auto c : hits[t].exact) report.exact_matches.push_back({train[c].id, test[t].id});
    for (const auto& [c, score] : hits[t].near) report.near_duplicates.push_back({train[c].id, test[t].id, score});
  }
  return report;
}

/// CSV rows: kind, train_id, test_id, jaccard.
inline std::string contamination_csv(const ContaminationReport& r) {
  std::string out = csv::format_row({"kind", "train_id", "test_id", "jaccard"});
  for (const auto& m : r.exact_matches) out += csv::format_row({"exact", m.train_id, m.test_id, "1.0000"});
  for (const auto& n : r.near_duplicates) {
    char score[32];
    std::snprintf(score, sizeof score, "%.4f", n.jaccard);
    out += csv::format_row({"near", n.train_id, n.test_id, score});
  }
  return out;
}

}  // namespace ttd
