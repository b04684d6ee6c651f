#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ttd/csv.hpp"
#include "ttd/errors.hpp"
#include "ttd/io.hpp"
#include "ttd/unicode.hpp"

namespace ttd {

struct LabeledExample {
  std::string id;
  std::string text;
  int label = 0;  // 1 = toxic
  std::string source;
};

struct RejectedRow {
  std::size_t row = 0;  // 1-based data row index (header excluded)
  std::size_t line = 0;
  std::string reason;
};

struct LoadResult {
  std::vector<LabeledExample> examples;
  std::vector<RejectedRow> rejects;
  std::size_t total_rows = 0;
  std::string source;
  std::uint32_t checksum = 0;  // CRC-32 of the raw file bytes
};

enum class DatasetFormat { jigsaw, toxigen };

inline DatasetFormat dataset_format_from_string(std::string_view s) {
  if (s == "jigsaw") return DatasetFormat::jigsaw;
  if (s == "toxigen") return DatasetFormat::toxigen;
  throw ConfigError("unknown dataset format '" + std::string(s) + "' (expected jigsaw or toxigen)");
}

enum class ToxiGenSubset {
  automatic,  // pick from the header
  annotated,  // human-annotated split: text + toxicity_human (1-5)
  raw,        // machine generations: generation + prompt_label (0/1)
};

struct ToxiGenOptions {
  ToxiGenSubset subset = ToxiGenSubset::automatic;
  double toxicity_threshold = 3.0;
};

inline constexpr std::array<std::string_view, 6> kJigsawLabelColumns = {"toxic",  "severe_toxic", "obscene",
                                                                      "threat", "insult",       "identity_hate"};

namespace detail {

inline char delimiter_for(std::string_view path) {
  return path.ends_with(".tsv") || path.ends_with(".TSV") ? '\t' : ',';
}

class Header {
 public:
  explicit Header(const std::vector<std::string>& names) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      std::string n = names[i];
      while (!n.empty() && (n.back() == ' ' || n.back() == '\r')) n.pop_back();
      index_.emplace(std::move(n), i);
    }
    width_ = names.size();
  }
  [[nodiscard]] std::optional<std::size_t> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  [[nodiscard]] std::size_t require(std::string_view name, std::string_view source) const {
    auto idx = find(name);
    if (!idx) throw SchemaError(std::string(source) + ": missing required column '" + std::string(name) + "'");
    return *idx;
  }
  [[nodiscard]] std::size_t width() const { return width_; }

 private:
  std::map<std::string, std::size_t> index_;
  std::size_t width_ = 0;
};

inline std::optional<double> parse_real(std::string_view s) {
  while (!s.empty() && (s.front() == ' ')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ')) s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<int> parse_binary(std::string_view s) {
  auto v = parse_real(s);
  if (!v) return std::nullopt;
  if (*v == 0.0) return 0;
  if (*v == 1.0) return 1;
  return std::nullopt;
}

inline bool has_content(std::string_view text) {
  return std::any_of(text.begin(), text.end(), [](char c) { return !is_ascii_space(static_cast<unsigned char>(c)); });
}

template <class RowFn>
LoadResult load_table(const std::string& path, std::string_view source, RowFn&& on_header) {
  const auto bytes = read_file_bytes(path);
  LoadResult result;
  result.source = std::string(source);
  result.checksum = crc32_of(bytes);
  auto rows = csv::parse(bytes, delimiter_for(path));
  if (rows.empty()) throw SchemaError(path + ": file is empty (no header row)");
  if (!rows[0].ok()) throw SchemaError(path + ": malformed header: " + rows[0].error);
  const Header header(rows[0].fields);
  auto handle_row = on_header(header);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    ++result.total_rows;
    const auto& row = rows[r];
    auto reject = [&](std::string reason) { result.rejects.push_back({r, row.line, std::move(reason)}); };
    if (!row.ok()) {
      reject(row.error);
      continue;
    }
    if (row.fields.size() != header.width()) {
      reject("expected " + std::to_string(header.width()) + " fields, got " + std::to_string(row.fields.size()));
      continue;
    }
    std::string reason;
    auto example = handle_row(row.fields, r, reason);
    if (!example) {
      reject(reason);
      continue;
    }
    example->source = std::string(source);
    result.examples.push_back(std::move(*example));
  }
  return result;
}

}  // namespace detail

/// Jigsaw toxic-comment CSV. Binary label = 1 iff any of the six label
/// columns equals 1. Rows with non-0/1 labels (e.g. the -1 "unscored"
/// marker) or empty text are rejected.
inline LoadResult load_jigsaw_csv(const std::string& path, std::string_view source = "jigsaw") {
  return detail::load_table(path, source, [&](const detail::Header& header) {
    const auto text_col = header.require("comment_text", path);
    std::array<std::size_t, 6> label_cols{};
    for (std::size_t i = 0; i < kJigsawLabelColumns.size(); ++i) label_cols[i] = header.require(kJigsawLabelColumns[i], path);
    const auto id_col = header.find("id");
    return [=](const std::vector<std::string>& f, std::size_t row, std::string& reason) -> std::optional<LabeledExample> {
      LabeledExample ex;
      ex.id = id_col ? f[*id_col] : "row-" + std::to_string(row);
      ex.text = f[text_col];
      if (!detail::has_content(ex.text)) {
        reason = "empty comment_text";
        return std::nullopt;
      }
      for (std::size_t i = 0; i < label_cols.size(); ++i) {
        auto v = detail::parse_binary(f[label_cols[i]]);
        if (!v) {
          reason = "column " + std::string(kJigsawLabelColumns[i]) + " is '" + f[label_cols[i]] + "', expected 0 or 1";
          return std::nullopt;
        }
        ex.label |= *v;
      }
      return ex;
    };
  });
}

/// ToxiGen export. The annotated split labels a text toxic iff its mean
/// human toxicity (1-5) is >= the threshold; raw generations use the binary
/// prompt_label column.
inline LoadResult load_toxigen(const std::string& path, ToxiGenOptions opts = {}, std::string_view source = "toxigen") {
  return detail::load_table(path, source, [&](const detail::Header& header) {
    auto subset = opts.subset;
    if (subset == ToxiGenSubset::automatic) {
      if (header.find("toxicity_human")) subset = ToxiGenSubset::annotated;
      else if (header.find("generation") && header.find("prompt_label")) subset = ToxiGenSubset::raw;
      else throw SchemaError(path + ": missing required column 'toxicity_human' (or 'generation'+'prompt_label')");
    }
    const bool annotated = subset == ToxiGenSubset::annotated;
    const auto text_col = header.require(annotated ? "text" : "generation", path);
    const auto score_col = header.require(annotated ? "toxicity_human" : "prompt_label", path);
    const auto id_col = header.find("id");
    const double threshold = opts.toxicity_threshold;
    return [=](const std::vector<std::string>& f, std::size_t row, std::string& reason) -> std::optional<LabeledExample> {
      LabeledExample ex;
      ex.id = id_col ? f[*id_col] : "row-" + std::to_string(row);
      ex.text = f[text_col];
      if (!detail::has_content(ex.text)) {
        reason = "empty text";
        return std::nullopt;
      }
      if (annotated) {
        auto score = detail::parse_real(f[score_col]);
        if (!score || *score < 1.0 || *score > 5.0) {
          reason = "toxicity_human is '" + f[score_col] + "', expected a number in [1, 5]";
          return std::nullopt;
        }
        ex.label = *score >= threshold ? 1 : 0;
      } else {
        auto v = detail::parse_binary(f[score_col]);
        if (!v) {
          reason = "prompt_label is '" + f[score_col] + "', expected 0 or 1";
          return std::nullopt;
        }
        ex.label = *v;
      }
      return ex;
    };
  });
}

inline LoadResult load_dataset(const std::string& path, DatasetFormat format, std::string_view source = {}) {
  if (format == DatasetFormat::jigsaw) return load_jigsaw_csv(path, source.empty() ? "jigsaw" : source);
  return load_toxigen(path, {}, source.empty() ? "toxigen" : source);
}

inline std::string rejects_csv(const LoadResult& r) {
  std::string out = csv::format_row({"row", "line", "reason"});
  for (const auto& rej : r.rejects) out += csv::format_row({std::to_string(rej.row), std::to_string(rej.line), rej.reason});
  return out;
}

/// Plain-text summary: counts, label balance and file checksum.
inline std::string dataset_manifest(const LoadResult& r) {
  std::size_t positives = 0;
  for (const auto& e : r.examples) positives += static_cast<std::size_t>(e.label);
  char crc[16];
  std::snprintf(crc, sizeof crc, "%08x", r.checksum);
  char balance[32];
  std::snprintf(balance, sizeof balance, "%.4f",
                r.examples.empty() ? 0.0 : static_cast<double>(positives) / static_cast<double>(r.examples.size()));
  std::string out;
  out += "source: " + r.source + "\n";
  out += "total_rows: " + std::to_string(r.total_rows) + "\n";
  out += "parsed: " + std::to_string(r.examples.size()) + "\n";
  out += "rejected: " + std::to_string(r.rejects.size()) + "\n";
  out += "toxic: " + std::to_string(positives) + "\n";
  out += "non_toxic: " + std::to_string(r.examples.size() - positives) + "\n";
  out += "toxic_fraction: " + std::string(balance) + "\n";
  out += "crc32: " + std::string(crc) + "\n";
  return out;
}

}  // namespace ttd
