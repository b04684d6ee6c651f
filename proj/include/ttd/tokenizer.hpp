#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ttd/errors.hpp"
#include "ttd/unicode.hpp"

namespace ttd {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr std::int32_t kFirstByteId = 2;
inline constexpr std::size_t kByteVocabSize = 258;  // specials + 256 bytes
inline constexpr std::size_t kMaxSequenceLength = 512;
inline constexpr std::size_t kDefaultVocabSize = 30522;

// 0xFF never occurs in normalized (well-formed UTF-8) text, so these can
// not collide with a learned token.
inline const std::string kPadToken = "\xff<pad>";
inline const std::string kUnkToken = "\xff<unk>";

/// Encoded text. `ids` holds content tokens only; padding is added by
/// pad_batch().
struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> attention_mask;
  std::size_t original_length = 0;

  [[nodiscard]] std::size_t size() const noexcept { return ids.size(); }
  [[nodiscard]] bool empty() const noexcept { return ids.empty(); }
};

/// Row-major [batch, length] ids and 0/1 mask.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;
  std::vector<float> mask;
};

struct MergeRule {
  std::int32_t left;
  std::int32_t right;
  std::int32_t result;
};

namespace detail {

inline std::string escape_token(std::string_view token) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned char c : token) {
    if (c == '\\') {
      out += "\\\\";
    } else if (c > 0x20 && c < 0x7f) {
      out += static_cast<char>(c);
    } else {
      out += "\\x";
      out += kHex[c >> 4];
      out += kHex[c & 0xf];
    }
  }
  return out;
}

inline int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

inline std::string unescape_token(std::string_view text) {
  std::string out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '\\') {
      out += text[i];
      continue;
    }
    if (i + 1 < text.size() && text[i + 1] == '\\') {
      out += '\\';
      ++i;
    } else if (i + 3 < text.size() && text[i + 1] == 'x' && hex_value(text[i + 2]) >= 0 &&
               hex_value(text[i + 3]) >= 0) {
      out += static_cast<char>(hex_value(text[i + 2]) * 16 + hex_value(text[i + 3]));
      i += 3;
    } else {
      throw LoadError("vocabulary: bad escape in token line '" + std::string(text) + "'");
    }
  }
  return out;
}

inline std::uint64_t pair_key(std::int32_t a, std::int32_t b) noexcept {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

/// Splits normalized text into pre-token chunks. A chunk starts at the
/// beginning of the text and at every whitespace byte that follows a
/// non-whitespace byte, so concatenating the chunks restores the input.
inline std::vector<std::string_view> split_chunks(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t start = 0;
  for (std::size_t i = 1; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    const auto prev = static_cast<unsigned char>(text[i - 1]);
    if (is_ascii_space(c) && !is_ascii_space(prev)) {
      chunks.push_back(text.substr(start, i - start));
      start = i;
    }
  }
  if (start < text.size()) chunks.push_back(text.substr(start));
  return chunks;
}

}  // namespace detail

/// Byte-level BPE vocabulary. Ids are dense: 0 = PAD, 1 = UNK, 2..257 the
/// raw bytes, then one id per distinct merged token in merge order.
class Vocabulary {
 public:
  /// Specials plus the 256 single-byte tokens.
  static Vocabulary bytes_only() {
    Vocabulary v;
    v.tokens_.push_back(kPadToken);
    v.tokens_.push_back(kUnkToken);
    for (int b = 0; b < 256; ++b) v.tokens_.push_back(std::string(1, static_cast<char>(b)));
    v.rebuild_index();
    return v;
  }

  [[nodiscard]] std::size_t size() const noexcept { return tokens_.size(); }
  [[nodiscard]] const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  [[nodiscard]] const std::vector<MergeRule>& merges() const noexcept { return merges_; }
  [[nodiscard]] const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  [[nodiscard]] std::optional<std::int32_t> id_of(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
  }

  /// Appends a merge of two existing ids; returns the id of the merged token
  /// (a fresh id unless the concatenation is already in the vocabulary).
  std::int32_t add_merge(std::int32_t left, std::int32_t right) {
    const std::string joined = token(left) + token(right);
    std::int32_t result;
    if (auto existing = id_of(joined)) {
      result = *existing;
    } else {
      result = static_cast<std::int32_t>(tokens_.size());
      tokens_.push_back(joined);
      token_to_id_.emplace(joined, result);
    }
    merge_rank_.emplace(detail::pair_key(left, right), merges_.size());
    merges_.push_back({left, right, result});
    return result;
  }

  /// Normalizes, segments and truncates `text` to at most `max_len` ids.
  [[nodiscard]] TokenSequence encode(std::string_view text, std::size_t max_len = kMaxSequenceLength) const {
    if (max_len < 1 || max_len > kMaxSequenceLength) {
      throw ContractError("encode: max_len must lie in [1, 512], got " + std::to_string(max_len));
    }
    TokenSequence seq;
    const std::string normalized = normalize_for_model(text);
    std::vector<std::int32_t> ids;
    for (auto chunk : detail::split_chunks(normalized)) encode_chunk(chunk, ids);
    seq.original_length = ids.size();
    if (ids.size() > max_len) ids.resize(max_len);
    seq.ids = std::move(ids);
    seq.attention_mask.assign(seq.ids.size(), 1);
    return seq;
  }

  [[nodiscard]] std::string decode(std::span<const std::int32_t> ids) const {
    std::string out;
    for (auto id : ids) {
      if (id == kPadId) continue;
      if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size() || id == kUnkId) {
        out += "\xef\xbf\xbd";
        continue;
      }
      out += tokens_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  /// Text form: magic line, size line, one escaped token per line,
  /// "#MERGES", then "left right" escaped token pairs.
  [[nodiscard]] std::string serialize() const {
    std::string out = "TTDVOCAB 1\n" + std::to_string(tokens_.size()) + "\n";
    for (const auto& t : tokens_) out += detail::escape_token(t) + "\n";
    out += "#MERGES\n";
    for (const auto& m : merges_) out += detail::escape_token(token(m.left)) + " " + detail::escape_token(token(m.right)) + "\n";
    return out;
  }

  static Vocabulary parse(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t pos = 0;
    while (pos < text.size()) {
      const auto nl = text.find('\n', pos);
      if (nl == std::string_view::npos) {
        lines.push_back(text.substr(pos));
        break;
      }
      lines.push_back(text.substr(pos, nl - pos));
      pos = nl + 1;
    }
    if (lines.size() < 2 || lines[0] != "TTDVOCAB 1") throw LoadError("vocabulary: missing 'TTDVOCAB 1' header");
    std::size_t count = 0;
    try {
      count = std::stoul(std::string(lines[1]));
    } catch (const std::exception&) {
      throw LoadError("vocabulary: bad size line '" + std::string(lines[1]) + "'");
    }
    if (count < kByteVocabSize || lines.size() < 2 + count + 1) throw LoadError("vocabulary: truncated token list");
    if (lines[2 + count] != "#MERGES") throw LoadError("vocabulary: missing #MERGES sentinel");

    Vocabulary v = bytes_only();
    for (std::size_t i = 0; i < kByteVocabSize; ++i) {
      if (detail::unescape_token(lines[2 + i]) != v.tokens_[i]) {
        throw LoadError("vocabulary: base token " + std::to_string(i) + " does not match the byte alphabet");
      }
    }
    for (std::size_t i = 3 + count; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      const auto sp = lines[i].find(' ');
      if (sp == std::string_view::npos) throw LoadError("vocabulary: bad merge line '" + std::string(lines[i]) + "'");
      const auto left = v.id_of(detail::unescape_token(lines[i].substr(0, sp)));
      const auto right = v.id_of(detail::unescape_token(lines[i].substr(sp + 1)));
      if (!left || !right) throw LoadError("vocabulary: merge references unknown token '" + std::string(lines[i]) + "'");
      v.add_merge(*left, *right);
    }
    if (v.size() != count) {
      throw LoadError("vocabulary: merges yield " + std::to_string(v.size()) + " tokens, header says " +
                      std::to_string(count));
    }
    for (std::size_t i = kByteVocabSize; i < count; ++i) {
      if (detail::unescape_token(lines[2 + i]) != v.tokens_[i]) {
        throw LoadError("vocabulary: token " + std::to_string(i) + " disagrees with merge list");
      }
    }
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write vocabulary to " + path);
    const auto text = serialize();
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error("failed writing vocabulary to " + path);
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open vocabulary " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_ && a.serialize() == b.serialize();
  }

 private:
  void rebuild_index() {
    token_to_id_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) token_to_id_.emplace(tokens_[i], static_cast<std::int32_t>(i));
  }

  void encode_chunk(std::string_view chunk, std::vector<std::int32_t>& out) const {
    std::vector<std::int32_t> syms;
    syms.reserve(chunk.size());
    for (unsigned char c : chunk) syms.push_back(kFirstByteId + c);
    while (syms.size() > 1) {
      std::size_t best_rank = merges_.size();
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = merge_rank_.find(detail::pair_key(syms[i], syms[i + 1]));
        if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
      }
      if (best_rank == merges_.size()) break;
      const auto& rule = merges_[best_rank];
      std::size_t w = 0;
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == rule.left && syms[i + 1] == rule.right) {
          syms[w++] = rule.result;
          ++i;
        } else {
          syms[w++] = syms[i];
        }
      }
      syms.resize(w);
    }
    out.insert(out.end(), syms.begin(), syms.end());
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> token_to_id_;
  std::vector<MergeRule> merges_;
  std::unordered_map<std::uint64_t, std::size_t> merge_rank_;
};

/// Learns a byte-level BPE vocabulary of `target_size` tokens. Merging stops
/// early if the corpus runs out of adjacent pairs. Ties between equally
/// frequent pairs go to the lexicographically smallest (left, right) pair.
inline Vocabulary train_vocab(std::span<const std::string> corpus, std::size_t target_size) {
  if (corpus.empty()) throw ValidationError("train_vocab: empty corpus");
  if (target_size < kByteVocabSize) {
    throw ContractError("train_vocab: target_size must be at least 258, got " + std::to_string(target_size));
  }
  Vocabulary vocab = Vocabulary::bytes_only();

  std::map<std::string, std::int64_t> chunk_counts;
  for (const auto& doc : corpus) {
    const auto normalized = normalize_for_model(doc);
    for (auto chunk : detail::split_chunks(normalized)) ++chunk_counts[std::string(chunk)];
  }
  if (chunk_counts.empty()) throw ValidationError("train_vocab: corpus contains no text");

  struct Word {
    std::vector<std::int32_t> syms;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(chunk_counts.size());
  for (const auto& [chunk, count] : chunk_counts) {
    Word w{{}, count};
    for (unsigned char c : chunk) w.syms.push_back(kFirstByteId + c);
    words.push_back(std::move(w));
  }

  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  std::unordered_map<std::uint64_t, std::unordered_set<std::uint32_t>> pair_words;
  for (std::uint32_t wi = 0; wi < words.size(); ++wi) {
    const auto& s = words[wi].syms;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      const auto key = detail::pair_key(s[i], s[i + 1]);
      pair_counts[key] += words[wi].count;
      pair_words[key].insert(wi);
    }
  }

  struct Candidate {
    std::int64_t count;
    std::uint64_t key;
  };
  // Highest count first; ties broken by the lexicographically smaller pair.
  auto worse = [&vocab](const Candidate& a, const Candidate& b) {
    if (a.count != b.count) return a.count < b.count;
    const auto al = static_cast<std::int32_t>(a.key >> 32), ar = static_cast<std::int32_t>(a.key & 0xffffffffu);
    const auto bl = static_cast<std::int32_t>(b.key >> 32), br = static_cast<std::int32_t>(b.key & 0xffffffffu);
    const auto& als = vocab.token(al);
    const auto& bls = vocab.token(bl);
    if (als != bls) return als > bls;
    return vocab.token(ar) > vocab.token(br);
  };
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(worse)> heap(worse);
  for (const auto& [key, count] : pair_counts) heap.push({count, key});

  while (vocab.size() < target_size && !heap.empty()) {
    const auto top = heap.top();
    heap.pop();
    auto pc = pair_counts.find(top.key);
    if (pc == pair_counts.end() || pc->second != top.count || top.count <= 0) continue;

    const auto left = static_cast<std::int32_t>(top.key >> 32);
    const auto right = static_cast<std::int32_t>(top.key & 0xffffffffu);
    const auto merged = vocab.add_merge(left, right);

    std::vector<std::uint32_t> affected(pair_words[top.key].begin(), pair_words[top.key].end());
    std::sort(affected.begin(), affected.end());
    std::unordered_set<std::uint64_t> touched;
    for (auto wi : affected) {
      auto& w = words[wi];
      for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) {
        const auto key = detail::pair_key(w.syms[i], w.syms[i + 1]);
        pair_counts[key] -= w.count;
        touched.insert(key);
      }
      std::vector<std::int32_t> next;
      next.reserve(w.syms.size());
      for (std::size_t i = 0; i < w.syms.size(); ++i) {
        if (i + 1 < w.syms.size() && w.syms[i] == left && w.syms[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(w.syms[i]);
        }
      }
      w.syms = std::move(next);
      for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) {
        const auto key = detail::pair_key(w.syms[i], w.syms[i + 1]);
        pair_counts[key] += w.count;
        pair_words[key].insert(wi);
        touched.insert(key);
      }
    }
    for (auto key : touched) {
      const auto count = pair_counts[key];
      if (count > 0) heap.push({count, key});
    }
  }
  return vocab;
}

/// Pads sequences to the longest one in the batch.
inline TokenBatch pad_batch(std::span<const TokenSequence> sequences) {
  if (sequences.empty()) throw ValidationError("pad_batch: empty batch");
  TokenBatch batch;
  batch.batch = sequences.size();
  for (const auto& s : sequences) batch.length = std::max(batch.length, s.size());
  if (batch.length == 0) throw ValidationError("pad_batch: no sequence has content tokens");
  if (batch.length > kMaxSequenceLength) {
    throw ContractError("pad_batch: sequence of length " + std::to_string(batch.length) + " exceeds 512");
  }
  batch.ids.assign(batch.batch * batch.length, kPadId);
  batch.mask.assign(batch.batch * batch.length, 0.0f);
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    for (std::size_t t = 0; t < sequences[b].size(); ++t) {
      batch.ids[b * batch.length + t] = sequences[b].ids[t];
      batch.mask[b * batch.length + t] = 1.0f;
    }
  }
  return batch;
}

}  // namespace ttd
