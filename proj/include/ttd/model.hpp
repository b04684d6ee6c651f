#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttd/errors.hpp"
#include "ttd/ops.hpp"
#include "ttd/rng.hpp"
#include "ttd/tensor.hpp"
#include "ttd/tokenizer.hpp"

namespace ttd {

enum class Positional { sinusoidal, learned };

inline std::string to_string(Positional p) { return p == Positional::learned ? "learned" : "sinusoidal"; }

inline Positional positional_from_string(std::string_view s) {
  if (s == "sinusoidal") return Positional::sinusoidal;
  if (s == "learned") return Positional::learned;
  throw ConfigError("unknown positional encoding '" + std::string(s) + "'");
}

/// Architecture hyperparameters. Defaults are the published detector.
struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 2;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t max_len = kMaxSequenceLength;
  std::size_t vocab_size = kDefaultVocabSize;
  double dropout_rate = 0.1;
  Positional positional = Positional::sinusoidal;
  double layer_norm_eps = 1e-5;

  [[nodiscard]] std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
    }
    if (d_model % 2 != 0) throw ConfigError("d_model must be even for positional encoding");
    if (max_len == 0 || max_len > kMaxSequenceLength) throw ConfigError("max_len must lie in [1, 512]");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
    if (!(layer_norm_eps > 0.0)) throw ConfigError("layer_norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_model", c.d_model},       {"d_ff", c.d_ff},
          {"max_len", c.max_len},       {"vocab_size", c.vocab_size},
          {"dropout_rate", c.dropout_rate}, {"positional", to_string(c.positional)},
          {"layer_norm_eps", c.layer_norm_eps}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.positional = positional_from_string(j.at("positional").get<std::string>());
    c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Exact number of trainable scalars.
inline std::size_t count_params(const ModelConfig& c) {
  c.validate();
  const auto d = c.d_model, f = c.d_ff;
  const std::size_t attention = 4 * (d * d + d);
  const std::size_t feedforward = (d * f + f) + (f * d + d);
  const std::size_t norms = 4 * d;
  std::size_t total = c.vocab_size * d + c.n_layers * (attention + feedforward + norms) + (d + 1);
  if (c.positional == Positional::learned) total += c.max_len * d;
  return total;
}

/// Sinusoidal table: PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(...).
template <class Real>
Tensor<Real> positional_encoding(std::size_t max_len, std::size_t d) {
  if (d == 0 || d % 2 != 0) throw ConfigError("positional_encoding: d must be even, got " + std::to_string(d));
  if (max_len == 0) throw ConfigError("positional_encoding: max_len must be positive");
  std::vector<Real> table(max_len * d);
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      table[pos * d + 2 * i] = static_cast<Real>(std::sin(angle));
      table[pos * d + 2 * i + 1] = static_cast<Real>(std::cos(angle));
    }
  }
  return Tensor<Real>({max_len, d}, std::move(table));
}

template <class Real>
struct LayerWeights {
  Tensor<Real> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<Real> ln1_gamma, ln1_beta;
  Tensor<Real> w1, b1, w2, b2;
  Tensor<Real> ln2_gamma, ln2_beta;
};

template <class Real>
using NamedTensor = std::pair<std::string, Tensor<Real>>;

template <class Real>
struct ModelWeights {
  Tensor<Real> token_embedding;
  std::optional<Tensor<Real>> positional_table;  // learned positions only
  std::vector<LayerWeights<Real>> layers;
  Tensor<Real> classifier_w, classifier_b;
  Tensor<Real> fixed_positions;  // sinusoidal table, not trainable

  /// Trainable tensors in checkpoint order: token_embedding,
  /// [positional_table], per layer {attn q,k,v,o weights+biases, ln1, ff, ln2},
  /// classifier.
  [[nodiscard]] std::vector<NamedTensor<Real>> parameters() const {
    std::vector<NamedTensor<Real>> out;
    out.emplace_back("token_embedding", token_embedding);
    if (positional_table) out.emplace_back("positional_table", *positional_table);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto p = "layers." + std::to_string(i) + ".";
      const auto& l = layers[i];
      out.emplace_back(p + "attn.wq", l.wq);
      out.emplace_back(p + "attn.bq", l.bq);
      out.emplace_back(p + "attn.wk", l.wk);
      out.emplace_back(p + "attn.bk", l.bk);
      out.emplace_back(p + "attn.wv", l.wv);
      out.emplace_back(p + "attn.bv", l.bv);
      out.emplace_back(p + "attn.wo", l.wo);
      out.emplace_back(p + "attn.bo", l.bo);
      out.emplace_back(p + "ln1.gamma", l.ln1_gamma);
      out.emplace_back(p + "ln1.beta", l.ln1_beta);
      out.emplace_back(p + "ff.w1", l.w1);
      out.emplace_back(p + "ff.b1", l.b1);
      out.emplace_back(p + "ff.w2", l.w2);
      out.emplace_back(p + "ff.b2", l.b2);
      out.emplace_back(p + "ln2.gamma", l.ln2_gamma);
      out.emplace_back(p + "ln2.beta", l.ln2_beta);
    }
    out.emplace_back("classifier.w", classifier_w);
    out.emplace_back("classifier.b", classifier_b);
    return out;
  }

  [[nodiscard]] std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }
};

/// Expected shape of every trainable tensor, in checkpoint order.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  const auto d = c.d_model, f = c.d_ff;
  out.emplace_back("token_embedding", Shape{c.vocab_size, d});
  if (c.positional == Positional::learned) out.emplace_back("positional_table", Shape{c.max_len, d});
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const auto p = "layers." + std::to_string(i) + ".";
    for (const char* m : {"q", "k", "v", "o"}) {
      out.emplace_back(p + "attn.w" + m, Shape{d, d});
      out.emplace_back(p + "attn.b" + m, Shape{d});
    }
    out.emplace_back(p + "ln1.gamma", Shape{d});
    out.emplace_back(p + "ln1.beta", Shape{d});
    out.emplace_back(p + "ff.w1", Shape{d, f});
    out.emplace_back(p + "ff.b1", Shape{f});
    out.emplace_back(p + "ff.w2", Shape{f, d});
    out.emplace_back(p + "ff.b2", Shape{d});
    out.emplace_back(p + "ln2.gamma", Shape{d});
    out.emplace_back(p + "ln2.beta", Shape{d});
  }
  out.emplace_back("classifier.w", Shape{d, 1});
  out.emplace_back("classifier.b", Shape{1});
  return out;
}

/// Builds weights from tensors given in parameter_layout() order.
template <class Real>
ModelWeights<Real> assemble_weights(const ModelConfig& c, std::vector<Tensor<Real>> tensors) {
  const auto layout = parameter_layout(c);
  if (tensors.size() != layout.size()) {
    throw LoadError("expected " + std::to_string(layout.size()) + " tensors, got " + std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (tensors[i].shape() != layout[i].second) {
      throw LoadError("tensor " + layout[i].first + " has shape " + shape_str(tensors[i].shape()) + ", expected " +
                      shape_str(layout[i].second));
    }
    tensors[i].set_requires_grad(true);
  }
  ModelWeights<Real> w;
  std::size_t k = 0;
  auto next = [&]() { return tensors[k++]; };
  w.token_embedding = next();
  if (c.positional == Positional::learned) w.positional_table = next();
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    LayerWeights<Real> l;
    l.wq = next(); l.bq = next();
    l.wk = next(); l.bk = next();
    l.wv = next(); l.bv = next();
    l.wo = next(); l.bo = next();
    l.ln1_gamma = next(); l.ln1_beta = next();
    l.w1 = next(); l.b1 = next();
    l.w2 = next(); l.b2 = next();
    l.ln2_gamma = next(); l.ln2_beta = next();
    w.layers.push_back(std::move(l));
  }
  w.classifier_w = next();
  w.classifier_b = next();
  w.fixed_positions = positional_encoding<Real>(c.max_len, c.d_model);
  return w;
}

/// Random initialization. Matrices use Xavier-uniform, token embeddings
/// unit-variance uniform, biases zero, LayerNorm gains one.
template <class Real>
ModelWeights<Real> init_weights(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  const CounterRng root(seed);
  const auto layout = parameter_layout(c);
  std::vector<Tensor<Real>> tensors;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& [name, shape] = layout[i];
    auto rng = root.split(i);
    std::vector<Real> data(shape_numel(shape), Real{0});
    const bool is_gamma = name.ends_with(".gamma");
    if (is_gamma) {
      std::fill(data.begin(), data.end(), Real{1});
    } else if (name == "token_embedding") {
      for (auto& v : data) v = static_cast<Real>(rng.uniform(-std::sqrt(3.0), std::sqrt(3.0)));
    } else if (name == "positional_table") {
      for (auto& v : data) v = static_cast<Real>(rng.uniform(-0.1, 0.1));
    } else if (shape.size() == 2) {
      const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (auto& v : data) v = static_cast<Real>(rng.uniform(-limit, limit));
    }
    tensors.emplace_back(shape, std::move(data), true);
  }
  return assemble_weights<Real>(c, std::move(tensors));
}

/// Converts weights to another precision (e.g. fp64 for finite-difference checks).
template <class To, class From>
ModelWeights<To> cast_weights(const ModelConfig& c, const ModelWeights<From>& w) {
  std::vector<Tensor<To>> tensors;
  for (const auto& [name, t] : w.parameters()) {
    tensors.emplace_back(t.shape(), std::vector<To>(t.data().begin(), t.data().end()), true);
  }
  return assemble_weights<To>(c, std::move(tensors));
}

enum class Mode { train, infer };

/// Optional capture of intermediate values for inspection.
template <class Real>
struct ForwardTrace {
  std::vector<Tensor<Real>> attention;  // per layer, [B*H, T, T]
  Tensor<Real> logits;                  // [B]
};

namespace detail {

inline void require_content_rows(const TokenBatch& batch) {
  for (std::size_t b = 0; b < batch.batch; ++b) {
    bool any = false;
    for (std::size_t t = 0; t < batch.length && !any; ++t) any = batch.mask[b * batch.length + t] != 0.0f;
    if (!any) throw ValidationError("row " + std::to_string(b) + " has no content tokens");
  }
}

}  // namespace detail

/// Multi-head self-attention with PAD keys excluded. x: [B, T, d].
template <class Real>
Tensor<Real> self_attention(Tape<Real>& tape, const Tensor<Real>& x, std::span<const float> mask,
                            const LayerWeights<Real>& lw, std::size_t heads, ForwardTrace<Real>* trace = nullptr) {
  const auto width = x.shape().back();
  const auto dh = width / heads;
  auto q = split_heads(tape, linear(tape, x, lw.wq, lw.bq), heads);
  auto k = split_heads(tape, linear(tape, x, lw.wk, lw.bk), heads);
  auto v = split_heads(tape, linear(tape, x, lw.wv, lw.bv), heads);
  auto scores = batched_matmul(tape, q, k, true, static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh))));
  auto weights = softmax_lastdim(tape, mask_keys(tape, scores, mask, heads));
  if (trace) trace->attention.push_back(weights);
  auto context = merge_heads(tape, batched_matmul(tape, weights, v), heads);
  return linear(tape, context, lw.wo, lw.bo);
}

/// Post-norm encoder block: h = LN1(x + Attn(x)); out = LN2(h + FF(h)).
template <class Real>
Tensor<Real> encoder_layer(Tape<Real>& tape, const Tensor<Real>& x, std::span<const float> mask,
                           const LayerWeights<Real>& lw, const ModelConfig& c, bool training,
                           const CounterRng& attn_drop, const CounterRng& ff_drop, ForwardTrace<Real>* trace = nullptr) {
  const auto eps = static_cast<Real>(c.layer_norm_eps);
  auto attn = dropout(tape, self_attention(tape, x, mask, lw, c.n_heads, trace), c.dropout_rate, attn_drop, training);
  auto h = layer_norm(tape, add(tape, x, attn), lw.ln1_gamma, lw.ln1_beta, eps);
  auto ff = linear(tape, relu(tape, linear(tape, h, lw.w1, lw.b1)), lw.w2, lw.b2);
  ff = dropout(tape, ff, c.dropout_rate, ff_drop, training);
  return layer_norm(tape, add(tape, h, ff), lw.ln2_gamma, lw.ln2_beta, eps);
}

/// Toxicity probabilities [B] for a padded batch. Dropout masks in train
/// mode are a pure function of `dropout_seed`.
template <class Real>
Tensor<Real> forward(Tape<Real>& tape, const ModelWeights<Real>& w, const ModelConfig& c, const TokenBatch& batch,
                     Mode mode, std::uint64_t dropout_seed = 0, ForwardTrace<Real>* trace = nullptr) {
  if (batch.length > c.max_len) {
    throw ContractError("forward: sequence length " + std::to_string(batch.length) + " exceeds max_len " +
                        std::to_string(c.max_len));
  }
  if (batch.ids.size() != batch.batch * batch.length || batch.mask.size() != batch.ids.size()) {
    throw DimensionError("forward: malformed token batch");
  }
  detail::require_content_rows(batch);
  const bool training = mode == Mode::train;
  const CounterRng drop_root(dropout_seed);
  std::uint64_t site = 0;

  const Shape prefix{batch.batch, batch.length};
  auto x = embedding_lookup(tape, w.token_embedding, batch.ids, prefix);
  std::vector<std::int32_t> positions(batch.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % batch.length);
  const auto& pos_table = w.positional_table ? *w.positional_table : w.fixed_positions;
  x = add(tape, x, embedding_lookup(tape, pos_table, positions, prefix));
  x = dropout(tape, x, c.dropout_rate, drop_root.split(site++), training);

  for (const auto& lw : w.layers) {
    const auto attn_drop = drop_root.split(site++);
    const auto ff_drop = drop_root.split(site++);
    x = encoder_layer(tape, x, batch.mask, lw, c, training, attn_drop, ff_drop, trace);
  }

  auto pooled = masked_mean_pool(tape, x, batch.mask);
  pooled = dropout(tape, pooled, c.dropout_rate, drop_root.split(site++), training);
  auto logits = reshape(tape, linear(tape, pooled, w.classifier_w, w.classifier_b), Shape{batch.batch});
  if (trace) trace->logits = logits;
  return sigmoid(tape, logits);
}

/// Inference-only forward in fp32.
inline std::vector<float> infer_probabilities(const ModelWeights<float>& w, const ModelConfig& c,
                                              const TokenBatch& batch) {
  Tape<float> tape(false);
  auto p = forward(tape, w, c, batch, Mode::infer);
  return {p.data().begin(), p.data().end()};
}

enum class Label { non_toxic, toxic };

inline std::string_view label_name(Label l) { return l == Label::toxic ? "toxic" : "non-toxic"; }

struct Prediction {
  Label label;
  float probability;
};

/// Decision rule: toxic iff p >= threshold.
inline Label decide(double probability, double threshold = 0.5) {
  return probability >= threshold ? Label::toxic : Label::non_toxic;
}

/// A trained detector: configuration, fp32 weights and tokenizer. Immutable
/// once built, so concurrent predictions are safe.
struct Detector {
  ModelConfig config;
  ModelWeights<float> weights;
  Vocabulary vocab;

  [[nodiscard]] TokenSequence tokenize(std::string_view text) const { return vocab.encode(text, config.max_len); }

  /// Probabilities for a batch of texts; every text must yield tokens.
  [[nodiscard]] std::vector<float> score(std::span<const std::string> texts) const {
    std::vector<TokenSequence> seqs;
    seqs.reserve(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i) {
      seqs.push_back(tokenize(texts[i]));
      if (seqs.back().empty()) throw ValidationError("empty input (text " + std::to_string(i) + " has no tokens)");
    }
    return infer_probabilities(weights, config, pad_batch(seqs));
  }

  [[nodiscard]] Prediction predict(std::string_view text, double threshold = 0.5) const {
    const std::string s(text);
    const float p = score(std::span<const std::string>(&s, 1))[0];
    return {decide(p, threshold), p};
  }
};

}  // namespace ttd
