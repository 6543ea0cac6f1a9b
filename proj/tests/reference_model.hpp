#pragma once

// Test-only reference implementation of the same decoder architecture,
// written independently of the library engine: plain double-precision nested
// loops, no capture, no shared helpers. Used as the oracle for span_loss and
// the forward pass.

#include <cmath>
#include <cstddef>
#include <vector>

#include "rlens/model.hpp"

namespace refmodel {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major rows of doubles

inline Mat to_mat(const rlens::Tensor& t) {
  Mat m(t.rows(), Vec(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  }
  return m;
}

inline Vec to_vec(const rlens::Tensor& t) {
  Vec v(t.data.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = t.data[i];
  return v;
}

inline Vec apply(const Mat& w, const Vec& x) {
  Vec y(w.size(), 0.0);
  for (std::size_t r = 0; r < w.size(); ++r) {
    for (std::size_t c = 0; c < x.size(); ++c) y[r] += w[r][c] * x[c];
  }
  return y;
}

inline Vec rmsnorm(const Vec& x, const Vec& gain) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  const double r = std::sqrt(ms + 1e-5);
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gain[i] * x[i] / r;
  return y;
}

// Full forward pass returning seq x vocab logits.
inline Mat logits(const rlens::WeightStore& store, const std::vector<int>& tokens) {
  const auto& cfg = store.config;
  const std::size_t S = tokens.size();
  const std::size_t D = static_cast<std::size_t>(cfg.d_model);
  const std::size_t H = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t Dh = D / H;

  const Mat embed = to_mat(store.at("embed.tokens"));
  Mat x(S);
  for (std::size_t t = 0; t < S; ++t) x[t] = embed[static_cast<std::size_t>(tokens[t])];

  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string p = "layers." + std::to_string(layer) + ".";
    const Vec norm_attn = to_vec(store.at(p + "norm.attn"));
    const Mat wq = to_mat(store.at(p + "attn.q_proj"));
    const Mat wk = to_mat(store.at(p + "attn.k_proj"));
    const Mat wv = to_mat(store.at(p + "attn.v_proj"));
    const Mat wo = to_mat(store.at(p + "attn.o_proj"));
    const Vec norm_mlp = to_vec(store.at(p + "norm.mlp"));
    const Mat wgate = to_mat(store.at(p + "mlp.gate_proj"));
    const Mat wup = to_mat(store.at(p + "mlp.up_proj"));
    const Mat wdown = to_mat(store.at(p + "mlp.down_proj"));

    Mat q(S), k(S), v(S);
    for (std::size_t t = 0; t < S; ++t) {
      const Vec h = rmsnorm(x[t], norm_attn);
      q[t] = apply(wq, h);
      k[t] = apply(wk, h);
      v[t] = apply(wv, h);
      for (std::size_t head = 0; head < H; ++head) {
        for (std::size_t i = 0; 2 * i + 1 < Dh; ++i) {
          const double freq =
              std::pow(cfg.rope_theta, -2.0 * static_cast<double>(i) / static_cast<double>(Dh));
          const double ang = static_cast<double>(t) * freq;
          const std::size_t a = head * Dh + 2 * i;
          const std::size_t b = a + 1;
          const double q0 = q[t][a], q1 = q[t][b];
          q[t][a] = q0 * std::cos(ang) - q1 * std::sin(ang);
          q[t][b] = q0 * std::sin(ang) + q1 * std::cos(ang);
          const double k0 = k[t][a], k1 = k[t][b];
          k[t][a] = k0 * std::cos(ang) - k1 * std::sin(ang);
          k[t][b] = k0 * std::sin(ang) + k1 * std::cos(ang);
        }
      }
    }

    for (std::size_t t = 0; t < S; ++t) {
      Vec ctx(D, 0.0);
      for (std::size_t head = 0; head < H; ++head) {
        Vec scores(t + 1, 0.0);
        for (std::size_t s = 0; s <= t; ++s) {
          for (std::size_t i = 0; i < Dh; ++i) {
            scores[s] += q[t][head * Dh + i] * k[s][head * Dh + i];
          }
          scores[s] /= std::sqrt(static_cast<double>(Dh));
        }
        double mx = scores[0];
        for (double sc : scores) mx = std::max(mx, sc);
        double z = 0.0;
        for (double sc : scores) z += std::exp(sc - mx);
        for (std::size_t s = 0; s <= t; ++s) {
          const double w = std::exp(scores[s] - mx) / z;
          for (std::size_t i = 0; i < Dh; ++i) ctx[head * Dh + i] += w * v[s][head * Dh + i];
        }
      }
      const Vec attn = apply(wo, ctx);
      for (std::size_t i = 0; i < D; ++i) x[t][i] += attn[i];
    }

    for (std::size_t t = 0; t < S; ++t) {
      const Vec h = rmsnorm(x[t], norm_mlp);
      const Vec g = apply(wgate, h);
      const Vec u = apply(wup, h);
      Vec m(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
      }
      const Vec d = apply(wdown, m);
      for (std::size_t i = 0; i < D; ++i) x[t][i] += d[i];
    }
  }

  const Vec norm_final = to_vec(store.at("norm.final"));
  const Mat head = to_mat(store.at("head.lm"));
  Mat out(S);
  for (std::size_t t = 0; t < S; ++t) out[t] = apply(head, rmsnorm(x[t], norm_final));
  return out;
}

inline double span_ce(const rlens::WeightStore& store, const std::vector<int>& tokens,
                      std::size_t begin, std::size_t end) {
  const Mat lg = logits(store, tokens);
  double total = 0.0;
  for (std::size_t t = begin; t < end; ++t) {
    const Vec& row = lg[t - 1];
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    total += std::log(z) - (row[static_cast<std::size_t>(tokens[t])] - mx);
  }
  return total / static_cast<double>(end - begin);
}

}  // namespace refmodel
