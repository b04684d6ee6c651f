#include <algorithm>
#include <cctype>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "ttd/tokenizer.hpp"

using namespace ttd;

namespace {

// Naive reference BPE over ASCII text: recount every pair from scratch each
// round, merge the most frequent, ties to the smallest (left, right) strings.
using Symbols = std::vector<std::string>;

std::vector<Symbols> naive_words(const std::vector<std::string>& corpus) {
  std::vector<Symbols> words;
  for (auto doc : corpus) {
    for (auto& c : doc) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    std::size_t start = 0;
    auto flush = [&](std::size_t end) {
      Symbols w;
      for (std::size_t i = start; i < end; ++i) w.push_back(std::string(1, doc[i]));
      if (!w.empty()) words.push_back(w);
      start = end;
    };
    for (std::size_t i = 1; i < doc.size(); ++i) {
      if (std::isspace(static_cast<unsigned char>(doc[i])) && !std::isspace(static_cast<unsigned char>(doc[i - 1]))) flush(i);
    }
    flush(doc.size());
  }
  return words;
}

std::vector<std::pair<std::string, std::string>> naive_bpe(const std::vector<std::string>& corpus, std::size_t n_merges) {
  auto words = naive_words(corpus);
  std::vector<std::pair<std::string, std::string>> merges;
  while (merges.size() < n_merges) {
    std::map<std::pair<std::string, std::string>, long> counts;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.size(); ++i) ++counts[{w[i], w[i + 1]}];
    if (counts.empty()) break;
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it)
      if (it->second > best->second) best = it;  // map order gives the smallest pair among ties
    merges.push_back(best->first);
    for (auto& w : words) {
      Symbols next;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == best->first.first && w[i + 1] == best->first.second) {
          next.push_back(w[i] + w[i + 1]);
          ++i;
        } else {
          next.push_back(w[i]);
        }
      }
      w = std::move(next);
    }
  }
  return merges;
}

// Reference segmentation: apply merges in rank order, each everywhere, left
// to right.
std::vector<std::string> naive_encode(const std::string& text,
                                      const std::vector<std::pair<std::string, std::string>>& merges) {
  std::vector<std::string> out;
  for (auto w : naive_words({text})) {
    for (const auto& [l, r] : merges) {
      Symbols next;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == l && w[i + 1] == r) {
          next.push_back(l + r);
          ++i;
        } else {
          next.push_back(w[i]);
        }
      }
      w = std::move(next);
    }
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

const std::vector<std::string>& corpus() {
  static const std::vector<std::string> c = {
      "I hate you and everything you stand for",
      "you are a wonderful person, thank you",
      "thanks for the edit, the article reads better now",
      "Stop vandalizing the page or you will be blocked",
      "what a stupid idea, you idiot",
      "the reference you added is broken, please fix it",
      "I appreciate the help with the formatting",
      "this is the worst article I have ever read",
      "please   keep\tdiscussion civil on the talk page",
      "you you you you you are the problem here",
  };
  return c;
}

}  // namespace

TEST(TrainVocab, FirstMergeOnTinyCorpus) {
  const std::vector<std::string> c = {"aaaa aaaa"};
  const auto v = train_vocab(c, 260);
  ASSERT_GE(v.merges().size(), 1u);
  EXPECT_EQ(v.token(v.merges()[0].left), "a");
  EXPECT_EQ(v.token(v.merges()[0].right), "a");
  EXPECT_EQ(v.token(v.merges()[0].result), "aa");
  EXPECT_EQ(v.size(), 260u);
}

TEST(TrainVocab, MinimumSizeHasNoMerges) {
  const auto v = train_vocab(corpus(), 258);
  EXPECT_TRUE(v.merges().empty());
  EXPECT_EQ(v.size(), 258u);
  EXPECT_EQ(v, Vocabulary::bytes_only());
}

TEST(TrainVocab, MatchesNaiveReference) {
  const auto v = train_vocab(corpus(), 360);
  const auto ref = naive_bpe(corpus(), v.merges().size());
  ASSERT_EQ(ref.size(), v.merges().size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    EXPECT_EQ(v.token(v.merges()[i].left), ref[i].first) << "merge " << i;
    EXPECT_EQ(v.token(v.merges()[i].right), ref[i].second) << "merge " << i;
  }
}

TEST(TrainVocab, StopsWhenPairsRunOut) {
  const std::vector<std::string> c = {"ab"};
  EXPECT_EQ(train_vocab(c, 1000).size(), 259u);
}

TEST(TrainVocab, Errors) {
  EXPECT_THROW((void)train_vocab({}, 300), ValidationError);
  EXPECT_THROW((void)train_vocab(corpus(), 257), ContractError);
}

TEST(TrainVocab, Deterministic) { EXPECT_EQ(train_vocab(corpus(), 330), train_vocab(corpus(), 330)); }

TEST(Vocabulary, IdsAreDenseAndInverse) {
  const auto v = train_vocab(corpus(), 330);
  EXPECT_EQ(v.token(kPadId), kPadToken);
  EXPECT_EQ(v.token(kUnkId), kUnkToken);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.id_of(v.tokens()[i]), static_cast<std::int32_t>(i));
}

TEST(Encode, MatchesNaiveSegmentation) {
  const auto v = train_vocab(corpus(), 360);
  std::vector<std::pair<std::string, std::string>> merges;
  for (const auto& m : v.merges()) merges.emplace_back(v.token(m.left), v.token(m.right));
  for (const std::string text : {"I hate you", "thanks for the help, you are wonderful", "zzz unseen words qq"}) {
    const auto seq = v.encode(text);
    std::vector<std::string> got;
    for (auto id : seq.ids) got.push_back(v.token(id));
    EXPECT_EQ(got, naive_encode(text, merges)) << text;
  }
}

TEST(Encode, EmptyText) {
  const auto seq = Vocabulary::bytes_only().encode("");
  EXPECT_TRUE(seq.ids.empty());
  EXPECT_TRUE(seq.attention_mask.empty());
  EXPECT_EQ(seq.original_length, 0u);
}

TEST(Encode, RoundTripsNormalizedText) {
  const auto v = train_vocab(corpus(), 360);
  const auto seq = v.encode("I hate you");
  EXPECT_LT(seq.size(), 10u);  // merges were applied
  EXPECT_EQ(v.decode(seq.ids), "i hate you");
  EXPECT_EQ(v.decode(v.encode("  MiXeD\tCase  text ").ids), "  mixed\tcase  text ");
  EXPECT_EQ(v.decode(v.encode("ÉCOLE Ünïcode 😀").ids), "école ünïcode 😀");
}

TEST(Encode, NfcComposesCombiningMarks) {
  const auto v = Vocabulary::bytes_only();
  EXPECT_EQ(v.encode("e\xCC\x81").ids, v.encode("\xC3\xA9").ids);
}

TEST(Encode, EncodeDecodeEncodeIsStable) {
  const auto v = train_vocab(corpus(), 400);
  for (const auto& text : corpus()) {
    const auto ids = v.encode(text).ids;
    EXPECT_EQ(v.encode(v.decode(ids)).ids, ids) << text;
  }
}

TEST(Encode, TruncatesAndKeepsOriginalLength) {
  const auto v = Vocabulary::bytes_only();
  std::string text;
  for (int i = 0; i < 2000; ++i) text += static_cast<char>('a' + i % 26);
  for (std::size_t max_len : {1u, 37u, 512u}) {
    const auto seq = v.encode(text, max_len);
    EXPECT_EQ(seq.size(), max_len);
    EXPECT_EQ(seq.original_length, 2000u);
    std::size_t mask_sum = 0;
    for (auto m : seq.attention_mask) mask_sum += m;
    EXPECT_EQ(mask_sum, std::min<std::size_t>(seq.original_length, max_len));
    for (auto id : seq.ids) EXPECT_NE(id, kPadId);
  }
  EXPECT_THROW((void)v.encode(text, 0), ContractError);
  EXPECT_THROW((void)v.encode(text, 513), ContractError);
}

TEST(Serialization, RoundTripIsBitExact) {
  const std::vector<std::string> c = {"back\\slash \x01 ctrl", "tab\there", "newline\nin doc", "ümlaut ümlaut ümlaut"};
  for (const auto& v : {train_vocab(corpus(), 400), train_vocab(c, 300), Vocabulary::bytes_only()}) {
    const auto text = v.serialize();
    EXPECT_TRUE(text.starts_with("TTDVOCAB 1\n"));
    const auto back = Vocabulary::parse(text);
    EXPECT_EQ(back, v);
    EXPECT_EQ(back.serialize(), text);
  }
}

TEST(Serialization, SaveLoad) {
  const auto v = train_vocab(corpus(), 320);
  const auto path = (std::filesystem::temp_directory_path() / "ttd_test_vocab.txt").string();
  v.save(path);
  EXPECT_EQ(Vocabulary::load(path), v);
  std::filesystem::remove(path);
  EXPECT_THROW((void)Vocabulary::load(path), LoadError);
}

TEST(Serialization, RejectsMalformedFiles) {
  auto text = train_vocab(corpus(), 300).serialize();
  EXPECT_THROW((void)Vocabulary::parse("NOTAVOCAB\n"), LoadError);
  EXPECT_THROW((void)Vocabulary::parse(text.substr(0, text.size() / 2)), LoadError);
  const auto pos = text.find("\n300\n");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 5, "\n301\n");
  EXPECT_THROW((void)Vocabulary::parse(text), LoadError);
}

TEST(Decode, SkipsPadAndReplacesUnknown) {
  const auto v = Vocabulary::bytes_only();
  const std::vector<std::int32_t> ids = {kFirstByteId + 'h', kPadId, kFirstByteId + 'i', kUnkId, 99999};
  EXPECT_EQ(v.decode(ids), "hi\xEF\xBF\xBD\xEF\xBF\xBD");
}

TEST(PadBatch, PadsToLongest) {
  const auto v = Vocabulary::bytes_only();
  const std::vector<TokenSequence> seqs = {v.encode("abc"), v.encode("a"), v.encode("abcde")};
  const auto b = pad_batch(seqs);
  EXPECT_EQ(b.batch, 3u);
  EXPECT_EQ(b.length, 5u);
  const std::vector<float> mask_row1 = {1, 0, 0, 0, 0};
  EXPECT_EQ(std::vector<float>(b.mask.begin() + 5, b.mask.begin() + 10), mask_row1);
  for (std::size_t i = 0; i < b.ids.size(); ++i) EXPECT_EQ(b.ids[i] == kPadId, b.mask[i] == 0.0f);
}

TEST(PadBatch, Errors) {
  EXPECT_THROW((void)pad_batch({}), ValidationError);
  const std::vector<TokenSequence> empty = {Vocabulary::bytes_only().encode("")};
  EXPECT_THROW((void)pad_batch(empty), ValidationError);
}
