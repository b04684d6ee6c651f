#pragma once

// Straight nested-loop fp64 implementation of the inference forward pass.
// Shares nothing with the tape kernels beyond the weight containers, so it
// serves as an independent oracle for attention and end-to-end outputs.

#include <cmath>
#include <vector>

#include "ttd/model.hpp"

namespace ttd::oracle {

using Mat = std::vector<std::vector<double>>;  // [T][width]

struct RefLayerOut {
  Mat attn_out;                            // Wo-projected attention, before residual
  std::vector<Mat> weights;                // per head [T][T]
  Mat out;                                 // layer output
};

inline double at(const Tensor<float>& t, std::size_t r, std::size_t c) { return t.data()[r * t.shape()[1] + c]; }

inline Mat affine(const Mat& x, const Tensor<float>& w, const Tensor<float>& b) {
  const std::size_t in = w.shape()[0], out = w.shape()[1];
  Mat y(x.size(), std::vector<double>(out));
  for (std::size_t t = 0; t < x.size(); ++t) {
    for (std::size_t o = 0; o < out; ++o) {
      double s = b.data()[o];
      for (std::size_t i = 0; i < in; ++i) s += x[t][i] * at(w, i, o);
      y[t][o] = s;
    }
  }
  return y;
}

/// Attention for one sequence; `mask[t]` false marks a PAD key.
inline RefLayerOut ref_attention(const Mat& x, const std::vector<bool>& mask, const LayerWeights<float>& lw,
                                 std::size_t heads) {
  const std::size_t T = x.size(), d = x[0].size(), dh = d / heads;
  const auto q = affine(x, lw.wq, lw.bq), k = affine(x, lw.wk, lw.bk), v = affine(x, lw.wv, lw.bv);
  RefLayerOut r;
  Mat context(T, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    Mat w(T, std::vector<double>(T, 0.0));
    for (std::size_t i = 0; i < T; ++i) {
      std::vector<double> s(T);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < T; ++j) {
        if (!mask[j]) continue;
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i][h * dh + c] * k[j][h * dh + c];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < T; ++j)
        if (mask[j]) z += std::exp(s[j] - mx);
      for (std::size_t j = 0; j < T; ++j) w[i][j] = mask[j] ? std::exp(s[j] - mx) / z : 0.0;
      for (std::size_t j = 0; j < T; ++j)
        for (std::size_t c = 0; c < dh; ++c) context[i][h * dh + c] += w[i][j] * v[j][h * dh + c];
    }
    r.weights.push_back(std::move(w));
  }
  r.attn_out = affine(context, lw.wo, lw.bo);
  return r;
}

inline Mat ref_layer_norm(const Mat& x, const Tensor<float>& g, const Tensor<float>& b, double eps) {
  Mat y = x;
  for (auto& row : y) {
    double mean = 0, var = 0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - mean) / std::sqrt(var + eps) * g.data()[c] + b.data()[c];
  }
  return y;
}

inline RefLayerOut ref_encoder_layer(const Mat& x, const std::vector<bool>& mask, const LayerWeights<float>& lw,
                                     const ModelConfig& c) {
  auto r = ref_attention(x, mask, lw, c.n_heads);
  Mat h = x;
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t j = 0; j < x[t].size(); ++j) h[t][j] += r.attn_out[t][j];
  h = ref_layer_norm(h, lw.ln1_gamma, lw.ln1_beta, c.layer_norm_eps);
  auto f = affine(h, lw.w1, lw.b1);
  for (auto& row : f)
    for (auto& v : row) v = std::max(0.0, v);
  f = affine(f, lw.w2, lw.b2);
  for (std::size_t t = 0; t < h.size(); ++t)
    for (std::size_t j = 0; j < h[t].size(); ++j) f[t][j] += h[t][j];
  r.out = ref_layer_norm(f, lw.ln2_gamma, lw.ln2_beta, c.layer_norm_eps);
  return r;
}

/// Inference probability of one sequence (ids with PADs, mask from ids).
inline double ref_probability(const ModelWeights<float>& w, const ModelConfig& c, const std::vector<std::int32_t>& ids,
                              const std::vector<bool>& mask, std::vector<std::vector<Mat>>* attention = nullptr) {
  const std::size_t T = ids.size(), d = c.d_model;
  Mat x(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      double pe;
      if (c.positional == Positional::learned) {
        pe = at(*w.positional_table, t, j);
      } else {
        const double angle = static_cast<double>(t) / std::pow(10000.0, static_cast<double>(j - j % 2) / static_cast<double>(d));
        pe = j % 2 == 0 ? std::sin(angle) : std::cos(angle);
      }
      x[t][j] = at(w.token_embedding, static_cast<std::size_t>(ids[t]), j) + pe;
    }
  }
  for (const auto& lw : w.layers) {
    auto r = ref_encoder_layer(x, mask, lw, c);
    if (attention) attention->push_back(r.weights);
    x = std::move(r.out);
  }
  std::vector<double> pooled(d, 0.0);
  double n = 0;
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    n += 1;
    for (std::size_t j = 0; j < d; ++j) pooled[j] += x[t][j];
  }
  double logit = w.classifier_b.data()[0];
  for (std::size_t j = 0; j < d; ++j) logit += pooled[j] / n * w.classifier_w.data()[j];
  return 1.0 / (1.0 + std::exp(-logit));
}

}  // namespace ttd::oracle
