// Copyright 2026 The LPSFed Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lpsfed/graph.hpp"
#include "lpsfed/mlp.hpp"
#include "lpsfed/random.hpp"
#include "lpsfed/spectral.hpp"

namespace lpsfed {

inline constexpr double kPi = std::numbers::pi;

enum class LossMode { kBC, kBPR };

struct TrainingConfig {
  double gamma = 1.0;               // margin strength
  double tau = 0.1;                 // softmax temperature
  double omega = 0.25;              // global/local margin interpolation
  double learning_rate = 0.0005;
  int local_epochs = 5;
  int negatives_per_positive = 4;
  LossMode loss_mode = LossMode::kBC;
  double bias_loss_weight = 1.0;
  int freeze_rounds = 2;
  int batch_size = 4096;
  bool margin_observed_only = false;       // Eq. over observed pairs instead of all
  std::int64_t margin_pair_cap = 1000000;  // exact below, uniform-sampled above
};

struct ModelDims {
  int embed_dim = 64;
  int gcn_layers = 2;
};

/// Every trainable tensor of one client. Pool/pred MLPs federate; embeddings,
/// layer kernels and bias encoders never leave the client.
struct ClientParams {
  Eigen::MatrixXd base_embeddings;             // (M+N) x D
  std::vector<Eigen::VectorXd> layer_kernels;  // L kernels of length Phi
  MlpParams pool, pred, user_bias, item_bias;

  template <class F>
  void for_each_tensor(F&& f) {
    f(base_embeddings);
    for (auto& k : layer_kernels) f(k);
    for (MlpParams* m : {&pool, &pred, &user_bias, &item_bias})
      for (auto& layer : m->layers) {
        f(layer.w);
        f(layer.b);
      }
  }

  /// Visits (param, other) tensor pairs in the same order as for_each_tensor.
  template <class F>
  static void for_each_pair(ClientParams& a, ClientParams& b, F&& f) {
    f(a.base_embeddings, b.base_embeddings);
    for (std::size_t k = 0; k < a.layer_kernels.size(); ++k)
      f(a.layer_kernels[k], b.layer_kernels[k]);
    const std::array<MlpParams ClientParams::*, 4> mlps = {
        &ClientParams::pool, &ClientParams::pred, &ClientParams::user_bias,
        &ClientParams::item_bias};
    for (auto member : mlps)
      for (std::size_t l = 0; l < (a.*member).layers.size(); ++l) {
        f((a.*member).layers[l].w, (b.*member).layers[l].w);
        f((a.*member).layers[l].b, (b.*member).layers[l].b);
      }
  }

  ClientParams zeros_like() const {
    ClientParams z;
    z.base_embeddings =
        Eigen::MatrixXd::Zero(base_embeddings.rows(), base_embeddings.cols());
    for (const auto& k : layer_kernels)
      z.layer_kernels.push_back(Eigen::VectorXd::Zero(k.size()));
    z.pool = MlpParams::zeros_like(pool);
    z.pred = MlpParams::zeros_like(pred);
    z.user_bias = MlpParams::zeros_like(user_bias);
    z.item_bias = MlpParams::zeros_like(item_bias);
    return z;
  }
};

struct ClientState {
  int num_users = 0;
  int num_items = 0;
  ClientParams params;
  double local_margin_avg = 0.0;        // M^c, refreshed after local training
  double received_global_margin = 0.0;  // blended margin from the server
  std::shared_ptr<const PartialSpectrum> spectrum;
  std::shared_ptr<const PopularityScores> popularity;

  int num_nodes() const { return num_users + num_items; }
  int embed_dim() const { return static_cast<int>(params.base_embeddings.cols()); }
  int gcn_layers() const { return static_cast<int>(params.layer_kernels.size()); }
};

/// Fresh client: embeddings ~ 0.1 * N(0,1), layer kernels all-ones (round
/// zero equals the plain low-pass projector), two-layer MLPs throughout.
inline ClientState init_client_state(
    int num_users, int num_items, const ModelDims& dims,
    std::shared_ptr<const PartialSpectrum> spectrum,
    std::shared_ptr<const PopularityScores> popularity, std::uint64_t seed) {
  const int n = num_users + num_items;
  if (spectrum->dim() != n)
    throw std::invalid_argument("spectrum dimension does not match graph");
  const int d = dims.embed_dim;
  const int phi = spectrum->cutoff();

  auto rng = make_rng(derive_seed(seed, 0x494e4954ULL));
  std::normal_distribution<double> gauss(0.0, 1.0);

  ClientState s;
  s.num_users = num_users;
  s.num_items = num_items;
  s.spectrum = std::move(spectrum);
  s.popularity = std::move(popularity);
  s.params.base_embeddings.resize(n, d);
  for (int c = 0; c < d; ++c)
    for (int r = 0; r < n; ++r) s.params.base_embeddings(r, c) = 0.1 * gauss(rng);
  for (int l = 0; l < dims.gcn_layers; ++l)
    s.params.layer_kernels.push_back(Eigen::VectorXd::Ones(phi));
  const double w_pool = 1.0 / std::sqrt((dims.gcn_layers + 1) * d);
  s.params.pool = MlpParams::init({(dims.gcn_layers + 1) * d, d, d}, rng, w_pool);
  s.params.pred = MlpParams::init({3 * d, d, 1}, rng, 1.0 / std::sqrt(3.0 * d));
  s.params.user_bias = MlpParams::init({1, d, d}, rng, 1.0);
  s.params.item_bias = MlpParams::init({1, d, d}, rng, 1.0);
  return s;
}

/// Z^(0..L): layer l is the low-pass convolution of layer l-1 with the l-th
/// trainable kernel.
inline std::vector<Eigen::MatrixXd> forward_lgcn(const ClientState& s) {
  std::vector<Eigen::MatrixXd> layers;
  layers.reserve(s.gcn_layers() + 1);
  layers.push_back(s.params.base_embeddings);
  for (int l = 0; l < s.gcn_layers(); ++l) {
    layers.push_back(
        low_pass_convolution(*s.spectrum, s.params.layer_kernels[l], layers.back()));
    if (!layers.back().allFinite())
      throw std::runtime_error("numerical blow-up at layer " + std::to_string(l + 1));
  }
  return layers;
}

inline Eigen::MatrixXd concat_layers(const std::vector<Eigen::MatrixXd>& layers) {
  const int n = static_cast<int>(layers[0].rows());
  const int d = static_cast<int>(layers[0].cols());
  Eigen::MatrixXd x(n, static_cast<int>(layers.size()) * d);
  for (std::size_t l = 0; l < layers.size(); ++l)
    x.middleCols(static_cast<int>(l) * d, d) = layers[l];
  return x;
}

/// Per-node pooled embedding: the pooling MLP applied row-wise to the
/// concatenated layer outputs. Rows 0..M-1 are users, the rest items.
inline Eigen::MatrixXd pool(const ClientState& s,
                            const std::vector<Eigen::MatrixXd>& layer_outputs) {
  if (layer_outputs.empty()) throw std::invalid_argument("no layer outputs");
  return mlp_forward(s.params.pool, concat_layers(layer_outputs));
}

inline Eigen::RowVectorXd pair_features(const Eigen::MatrixXd& pooled, int m,
                                        int u, int i) {
  const int d = static_cast<int>(pooled.cols());
  Eigen::RowVectorXd f(3 * d);
  f.segment(0, d) = pooled.row(u);
  f.segment(d, d) = pooled.row(m + i);
  f.segment(2 * d, d) =
      pooled.row(u).cwiseProduct(pooled.row(m + i));
  return f;
}

/// Preference angle R = arccos(tanh(score)); the ranking score is cos(R).
inline double predict_angle(const ClientState& s, int u, int i,
                            const Eigen::MatrixXd& pooled) {
  if (u < 0 || u >= s.num_users || i < 0 || i >= s.num_items)
    throw std::invalid_argument("pair index out of range");
  Eigen::MatrixXd out =
      mlp_forward(s.params.pred, pair_features(pooled, s.num_users, u, i));
  return std::acos(std::tanh(out(0, 0)));
}

namespace detail {

inline double cosine(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (na < 1e-12 || nb < 1e-12)
    throw std::runtime_error("degenerate bias embedding");
  return a.dot(b) / (na * nb);
}

constexpr double kCosClamp = 1.0 - 1e-12;

inline double clamped_acos(double c) {
  return std::acos(std::clamp(c, -kCosClamp, kCosClamp));
}

}  // namespace detail

/// Popularity-bias angle: angle between the encoded user and item popularity
/// embeddings.
inline double bias_angle(const ClientState& s, int u, int i) {
  Eigen::MatrixXd pu(1, 1), pi(1, 1);
  pu(0, 0) = s.popularity->user_pop[u];
  pi(0, 0) = s.popularity->item_pop[i];
  Eigen::RowVectorXd a = mlp_forward(s.params.user_bias, pu).row(0);
  Eigen::RowVectorXd b = mlp_forward(s.params.item_bias, pi).row(0);
  return detail::clamped_acos(detail::cosine(a, b));
}

/// M_ui = min(gamma * xi, pi - r_hat), never negative.
inline double adaptive_margin(double gamma, double xi, double r_hat) {
  return std::max(0.0, std::min(gamma * xi, kPi - r_hat));
}

/// Refined margin: omega * global + (1 - omega) * local.
inline double refined_margin(double local, double global_margin, double omega) {
  return omega * global_margin + (1.0 - omega) * local;
}

struct TrainBatch {
  std::vector<int> users;      // one entry per positive pair
  std::vector<int> pos_items;
  std::vector<std::vector<int>> negatives;  // >= 1 per positive
};

struct LossBreakdown {
  double ranking = 0.0;  // BC or BPR term
  double bias = 0.0;     // auxiliary contrastive term (BC mode only)
  double total = 0.0;
  int positives = 0;
};

namespace detail {

inline double log_sum_exp(const std::vector<double>& v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

struct SlotLayout {
  std::vector<int> user, item;  // per slot; positives first
  std::vector<int> neg_begin;   // negatives of positive p occupy
  std::vector<int> neg_count;   // [neg_begin[p], neg_begin[p]+neg_count[p])
  int positives = 0;
  int total = 0;
};

inline SlotLayout layout_batch(const TrainBatch& batch) {
  if (batch.users.empty()) throw std::invalid_argument("empty batch");
  if (batch.users.size() != batch.pos_items.size() ||
      batch.users.size() != batch.negatives.size())
    throw std::invalid_argument("ragged batch");
  SlotLayout lo;
  lo.positives = static_cast<int>(batch.users.size());
  for (int p = 0; p < lo.positives; ++p) {
    if (batch.negatives[p].empty())
      throw std::invalid_argument("positive without negatives");
    lo.user.push_back(batch.users[p]);
    lo.item.push_back(batch.pos_items[p]);
  }
  for (int p = 0; p < lo.positives; ++p) {
    lo.neg_begin.push_back(static_cast<int>(lo.user.size()));
    lo.neg_count.push_back(static_cast<int>(batch.negatives[p].size()));
    for (int j : batch.negatives[p]) {
      lo.user.push_back(batch.users[p]);
      lo.item.push_back(j);
    }
  }
  lo.total = static_cast<int>(lo.user.size());
  return lo;
}

}  // namespace detail

/// Loss (and optionally gradients w.r.t. every trainable tensor) for one
/// mini-batch. This is the reference definition of the training objective:
/// the finite-difference oracle in the tests differentiates exactly this.
inline LossBreakdown evaluate_batch(const ClientState& s,
                                    const TrainingConfig& cfg,
                                    const TrainBatch& batch,
                                    ClientParams* grads = nullptr) {
  const auto lo = detail::layout_batch(batch);
  const int m = s.num_users;
  const int d = s.embed_dim();
  const int big_l = s.gcn_layers();
  const auto& spec = *s.spectrum;
  const Eigen::MatrixXd& basis = spec.eigenvectors;

  // LGCN forward, keeping spectral coefficients for the backward pass.
  std::vector<Eigen::MatrixXd> z(big_l + 1), coef(big_l);
  z[0] = s.params.base_embeddings;
  for (int l = 0; l < big_l; ++l) {
    coef[l].noalias() = basis.transpose() * z[l];
    Eigen::MatrixXd scaled = coef[l];
    scaled.array().colwise() *= s.params.layer_kernels[l].array();
    z[l + 1].noalias() = basis * scaled;
    if (!z[l + 1].allFinite())
      throw std::runtime_error("numerical blow-up at layer " + std::to_string(l + 1));
  }
  Eigen::MatrixXd x = concat_layers(z);
  MlpCache pool_cache;
  Eigen::MatrixXd pooled =
      mlp_forward(s.params.pool, x, grads ? &pool_cache : nullptr);

  // Predictive MLP over all pair slots.
  Eigen::MatrixXd feats(lo.total, 3 * d);
  for (int t = 0; t < lo.total; ++t)
    feats.row(t) = pair_features(pooled, m, lo.user[t], lo.item[t]);
  MlpCache pred_cache;
  Eigen::VectorXd sval =
      mlp_forward(s.params.pred, feats, grads ? &pred_cache : nullptr).col(0);
  Eigen::VectorXd tval = sval.array().tanh();

  LossBreakdown out;
  out.positives = lo.positives;
  Eigen::VectorXd d_s = Eigen::VectorXd::Zero(lo.total);

  if (cfg.loss_mode == LossMode::kBPR) {
    for (int p = 0; p < lo.positives; ++p) {
      for (int k = 0; k < lo.neg_count[p]; ++k) {
        const int t = lo.neg_begin[p] + k;
        const double diff = tval[p] - tval[t];
        out.ranking += diff > 0 ? std::log1p(std::exp(-diff))
                                : -diff + std::log1p(std::exp(diff));
        if (grads) {
          const double g = 1.0 / (1.0 + std::exp(-diff)) - 1.0;  // sigma - 1
          d_s[p] += g * (1.0 - tval[p] * tval[p]);
          d_s[t] -= g * (1.0 - tval[t] * tval[t]);
        }
      }
    }
    out.total = out.ranking;
  } else {
    // Bias encoders over the users/items present in the batch.
    std::vector<int> uidx(s.num_users, -1), iidx(s.num_items, -1);
    std::vector<int> uniq_users, uniq_items;
    for (int t = 0; t < lo.total; ++t) {
      if (uidx[lo.user[t]] < 0) {
        uidx[lo.user[t]] = static_cast<int>(uniq_users.size());
        uniq_users.push_back(lo.user[t]);
      }
      if (iidx[lo.item[t]] < 0) {
        iidx[lo.item[t]] = static_cast<int>(uniq_items.size());
        uniq_items.push_back(lo.item[t]);
      }
    }
    Eigen::MatrixXd pu(uniq_users.size(), 1), pi(uniq_items.size(), 1);
    for (std::size_t k = 0; k < uniq_users.size(); ++k)
      pu(k, 0) = s.popularity->user_pop[uniq_users[k]];
    for (std::size_t k = 0; k < uniq_items.size(); ++k)
      pi(k, 0) = s.popularity->item_pop[uniq_items[k]];
    MlpCache ub_cache, ib_cache;
    Eigen::MatrixXd enc_u =
        mlp_forward(s.params.user_bias, pu, grads ? &ub_cache : nullptr);
    Eigen::MatrixXd enc_i =
        mlp_forward(s.params.item_bias, pi, grads ? &ib_cache : nullptr);

    Eigen::VectorXd cosb(lo.total);
    for (int t = 0; t < lo.total; ++t)
      cosb[t] = detail::cosine(enc_u.row(uidx[lo.user[t]]),
                               enc_i.row(iidx[lo.item[t]]));

    Eigen::VectorXd d_cos = Eigen::VectorXd::Zero(lo.total);
    std::vector<double> logits;
    for (int p = 0; p < lo.positives; ++p) {
      const double r_hat = std::acos(std::clamp(tval[p], -1.0, 1.0));
      const double cos_clamped =
          std::clamp(cosb[p], -detail::kCosClamp, detail::kCosClamp);
      const double xi = std::acos(cos_clamped);
      const bool capped = kPi - r_hat < cfg.gamma * xi;
      const double local_margin = adaptive_margin(cfg.gamma, xi, r_hat);
      const double refined =
          refined_margin(local_margin, s.received_global_margin, cfg.omega);
      const double arg = r_hat + refined;
      const bool inside = arg > 0.0 && arg < kPi;
      const double angle = std::clamp(arg, 0.0, kPi);

      logits.assign(1, std::cos(angle) / cfg.tau);
      for (int k = 0; k < lo.neg_count[p]; ++k)
        logits.push_back(tval[lo.neg_begin[p] + k] / cfg.tau);
      const double lse = detail::log_sum_exp(logits);
      out.ranking += lse - logits[0];

      std::vector<double> blogits(1, cosb[p] / cfg.tau);
      for (int k = 0; k < lo.neg_count[p]; ++k)
        blogits.push_back(cosb[lo.neg_begin[p] + k] / cfg.tau);
      const double blse = detail::log_sum_exp(blogits);
      out.bias += blse - blogits[0];

      if (grads) {
        // Ranking softmax.
        const double d_logit0 = std::exp(logits[0] - lse) - 1.0;
        const double d_angle = -std::sin(angle) * d_logit0 / cfg.tau;
        const double d_arg = inside ? d_angle : 0.0;
        const double d_rhat = d_arg * (capped ? cfg.omega : 1.0);
        d_s[p] += d_rhat * (-std::sqrt(std::max(0.0, 1.0 - tval[p] * tval[p])));
        if (!capped && std::abs(cosb[p]) < detail::kCosClamp) {
          const double d_xi = d_arg * (1.0 - cfg.omega) * cfg.gamma;
          d_cos[p] += d_xi * (-1.0 / std::sqrt(1.0 - cos_clamped * cos_clamped));
        }
        for (int k = 0; k < lo.neg_count[p]; ++k) {
          const int t = lo.neg_begin[p] + k;
          const double pr = std::exp(logits[k + 1] - lse);
          d_s[t] += pr / cfg.tau * (1.0 - tval[t] * tval[t]);
        }
        // Bias softmax.
        d_cos[p] += cfg.bias_loss_weight *
                    (std::exp(blogits[0] - blse) - 1.0) / cfg.tau;
        for (int k = 0; k < lo.neg_count[p]; ++k)
          d_cos[lo.neg_begin[p] + k] += cfg.bias_loss_weight *
                                        std::exp(blogits[k + 1] - blse) / cfg.tau;
      }
    }
    out.total = out.ranking + cfg.bias_loss_weight * out.bias;

    if (grads) {
      Eigen::MatrixXd d_enc_u = Eigen::MatrixXd::Zero(enc_u.rows(), enc_u.cols());
      Eigen::MatrixXd d_enc_i = Eigen::MatrixXd::Zero(enc_i.rows(), enc_i.cols());
      for (int t = 0; t < lo.total; ++t) {
        if (d_cos[t] == 0.0) continue;
        const int ku = uidx[lo.user[t]], ki = iidx[lo.item[t]];
        const Eigen::RowVectorXd a = enc_u.row(ku), b = enc_i.row(ki);
        const double na = a.norm(), nb = b.norm(), c = cosb[t];
        d_enc_u.row(ku) += d_cos[t] * (b / (na * nb) - c * a / (na * na));
        d_enc_i.row(ki) += d_cos[t] * (a / (na * nb) - c * b / (nb * nb));
      }
      mlp_backward(s.params.user_bias, ub_cache, d_enc_u, grads->user_bias);
      mlp_backward(s.params.item_bias, ib_cache, d_enc_i, grads->item_bias);
    }
  }

  if (grads) {
    Eigen::MatrixXd d_feats =
        mlp_backward(s.params.pred, pred_cache, d_s, grads->pred);
    Eigen::MatrixXd d_pooled = Eigen::MatrixXd::Zero(pooled.rows(), d);
    for (int t = 0; t < lo.total; ++t) {
      const int u = lo.user[t], v = m + lo.item[t];
      d_pooled.row(u) += d_feats.row(t).segment(0, d) +
                         d_feats.row(t).segment(2 * d, d).cwiseProduct(pooled.row(v));
      d_pooled.row(v) += d_feats.row(t).segment(d, d) +
                         d_feats.row(t).segment(2 * d, d).cwiseProduct(pooled.row(u));
    }
    Eigen::MatrixXd d_x = mlp_backward(s.params.pool, pool_cache, d_pooled, grads->pool);

    Eigen::MatrixXd running = d_x.middleCols(big_l * d, d);
    for (int l = big_l - 1; l >= 0; --l) {
      Eigen::MatrixXd d_scaled = basis.transpose() * running;
      grads->layer_kernels[l] += (d_scaled.array() * coef[l].array()).rowwise().sum().matrix();
      d_scaled.array().colwise() *= s.params.layer_kernels[l].array();
      running = basis * d_scaled + d_x.middleCols(l * d, d);
    }
    grads->base_embeddings += running;
  }
  return out;
}

/// Eq.-style wrappers over the batch engine.
inline double bc_loss(const ClientState& s, const TrainBatch& batch,
                      const TrainingConfig& cfg) {
  TrainingConfig c = cfg;
  c.loss_mode = LossMode::kBC;
  return evaluate_batch(s, c, batch).ranking;
}

inline double bpr_loss(const ClientState& s, const TrainBatch& batch) {
  TrainingConfig c;
  c.loss_mode = LossMode::kBPR;
  return evaluate_batch(s, c, batch).ranking;
}

inline double bias_contrastive_loss(const ClientState& s, const TrainBatch& batch,
                                    double tau) {
  TrainingConfig c;
  c.loss_mode = LossMode::kBC;
  c.tau = tau;
  return evaluate_batch(s, c, batch).bias;
}

/// Ranking scores cos(R) = tanh(pred(u, i)) for a list of pairs, chunked so
/// big sweeps stay in cache-friendly GEMMs.
inline Eigen::VectorXd predict_scores(const ClientState& s,
                                      const Eigen::MatrixXd& pooled,
                                      const std::vector<Edge>& pairs) {
  const int d = s.embed_dim();
  const int m = s.num_users;
  Eigen::VectorXd scores(pairs.size());
  constexpr int kChunk = 8192;
  Eigen::MatrixXd feats(std::min<std::int64_t>(kChunk, pairs.size()), 3 * d);
  for (std::size_t begin = 0; begin < pairs.size(); begin += kChunk) {
    const int count = static_cast<int>(std::min<std::size_t>(kChunk, pairs.size() - begin));
    for (int r = 0; r < count; ++r)
      feats.row(r) = pair_features(pooled, m, pairs[begin + r].first,
                                   pairs[begin + r].second);
    scores.segment(begin, count) =
        mlp_forward(s.params.pred, feats.topRows(count)).col(0).array().tanh();
  }
  return scores;
}

/// Mean adaptive margin over user-item pairs (Eq-style average). Exact when
/// the pair grid fits under `margin_pair_cap`, otherwise an unbiased uniform
/// sample of that many pairs. `observed` supplies the train edges for the
/// observed-only variant.
inline double average_margin(const ClientState& s, const TrainingConfig& cfg,
                             const std::vector<Edge>* observed,
                             std::uint64_t seed) {
  std::vector<Edge> pairs;
  if (cfg.margin_observed_only) {
    if (observed == nullptr)
      throw std::invalid_argument("observed-only margin needs train edges");
    pairs = *observed;
  } else {
    const std::int64_t grid =
        static_cast<std::int64_t>(s.num_users) * s.num_items;
    if (grid <= cfg.margin_pair_cap) {
      pairs.reserve(grid);
      for (int u = 0; u < s.num_users; ++u)
        for (int i = 0; i < s.num_items; ++i) pairs.emplace_back(u, i);
    } else {
      auto rng = make_rng(derive_seed(seed, 0x4d41524dULL));
      std::uniform_int_distribution<int> du(0, s.num_users - 1);
      std::uniform_int_distribution<int> di(0, s.num_items - 1);
      pairs.reserve(cfg.margin_pair_cap);
      for (std::int64_t k = 0; k < cfg.margin_pair_cap; ++k)
        pairs.emplace_back(du(rng), di(rng));
    }
  }
  if (pairs.empty()) return 0.0;

  Eigen::MatrixXd pooled = pool(s, forward_lgcn(s));
  Eigen::VectorXd t = predict_scores(s, pooled, pairs);

  Eigen::MatrixXd pu(s.num_users, 1), pi(s.num_items, 1);
  pu.col(0) = s.popularity->user_pop;
  pi.col(0) = s.popularity->item_pop;
  Eigen::MatrixXd enc_u = mlp_forward(s.params.user_bias, pu);
  Eigen::MatrixXd enc_i = mlp_forward(s.params.item_bias, pi);

  double sum = 0.0;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [u, i] = pairs[k];
    const double r_hat = std::acos(std::clamp(t[k], -1.0, 1.0));
    const double xi =
        detail::clamped_acos(detail::cosine(enc_u.row(u), enc_i.row(i)));
    sum += adaptive_margin(cfg.gamma, xi, r_hat);
  }
  return sum / static_cast<double>(pairs.size());
}

// --- Checkpoint serialization -----------------------------------------------

namespace detail {

inline void write_matrix(std::ostream& os, const Eigen::MatrixXd& m) {
  write_pod(os, static_cast<std::int64_t>(m.rows()));
  write_pod(os, static_cast<std::int64_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()), sizeof(double) * m.size());
}

inline Eigen::MatrixXd read_matrix(std::istream& is) {
  const auto rows = read_pod<std::int64_t>(is);
  const auto cols = read_pod<std::int64_t>(is);
  Eigen::MatrixXd m(rows, cols);
  is.read(reinterpret_cast<char*>(m.data()), sizeof(double) * rows * cols);
  if (!is) throw std::runtime_error("truncated checkpoint");
  return m;
}

inline void write_vector(std::ostream& os, const Eigen::VectorXd& v) {
  write_pod(os, static_cast<std::int64_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()), sizeof(double) * v.size());
}

inline Eigen::VectorXd read_vector(std::istream& is) {
  const auto n = read_pod<std::int64_t>(is);
  Eigen::VectorXd v(n);
  is.read(reinterpret_cast<char*>(v.data()), sizeof(double) * n);
  if (!is) throw std::runtime_error("truncated checkpoint");
  return v;
}

inline void write_mlp(std::ostream& os, const MlpParams& p) {
  write_pod(os, static_cast<std::uint32_t>(p.layers.size()));
  for (const auto& l : p.layers) {
    write_matrix(os, l.w);
    write_vector(os, l.b);
  }
}

inline MlpParams read_mlp(std::istream& is) {
  MlpParams p;
  const auto n = read_pod<std::uint32_t>(is);
  for (std::uint32_t l = 0; l < n; ++l) {
    DenseLayer layer;
    layer.w = read_matrix(is);
    layer.b = read_vector(is);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

}  // namespace detail

inline void write_client_params(std::ostream& os, const ClientParams& p) {
  detail::write_matrix(os, p.base_embeddings);
  detail::write_pod(os, static_cast<std::uint32_t>(p.layer_kernels.size()));
  for (const auto& k : p.layer_kernels) detail::write_vector(os, k);
  detail::write_mlp(os, p.pool);
  detail::write_mlp(os, p.pred);
  detail::write_mlp(os, p.user_bias);
  detail::write_mlp(os, p.item_bias);
}

inline ClientParams read_client_params(std::istream& is) {
  ClientParams p;
  p.base_embeddings = detail::read_matrix(is);
  const auto nk = detail::read_pod<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < nk; ++k)
    p.layer_kernels.push_back(detail::read_vector(is));
  p.pool = detail::read_mlp(is);
  p.pred = detail::read_mlp(is);
  p.user_bias = detail::read_mlp(is);
  p.item_bias = detail::read_mlp(is);
  return p;
}

/// Serializes the trainable state (spectrum and popularity are preprocessing
/// artifacts, re-attached on load from the caches).
inline void write_client_state(std::ostream& os, const ClientState& s) {
  detail::write_pod(os, static_cast<std::int32_t>(s.num_users));
  detail::write_pod(os, static_cast<std::int32_t>(s.num_items));
  detail::write_pod(os, s.local_margin_avg);
  detail::write_pod(os, s.received_global_margin);
  write_client_params(os, s.params);
}

inline ClientState read_client_state(std::istream& is) {
  ClientState s;
  s.num_users = detail::read_pod<std::int32_t>(is);
  s.num_items = detail::read_pod<std::int32_t>(is);
  s.local_margin_avg = detail::read_pod<double>(is);
  s.received_global_margin = detail::read_pod<double>(is);
  s.params = read_client_params(is);
  return s;
}

struct EpochLoss {
  double ranking = 0.0;
  double bias = 0.0;
  double total = 0.0;  // per-positive means
};

struct LocalTrainResult {
  std::vector<EpochLoss> epochs;
  bool frozen = false;
};

/// One round of local training: `local_epochs` passes of shuffled mini-batch
/// RMSProp over the client's positive edges. During the freeze window the
/// losses are still reported but no parameter moves.
inline LocalTrainResult local_train(ClientState& s, const TrainingConfig& cfg,
                                    const BipartiteGraph& train_graph,
                                    int rounds_elapsed, std::uint64_t seed) {
  const bool frozen = rounds_elapsed < cfg.freeze_rounds;
  LocalTrainResult result;
  result.frozen = frozen;

  std::vector<Edge> positives = train_graph.edges();
  if (positives.empty()) throw std::invalid_argument("client has no train edges");

  std::vector<RmsPropSlot> slots;
  s.params.for_each_tensor([&](auto&) { slots.emplace_back(); });
  RmsPropConfig opt{cfg.learning_rate};

  std::uniform_int_distribution<int> item_dist(0, s.num_items - 1);
  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    auto rng = make_rng(derive_seed(seed, 0x45504f43ULL, epoch));
    std::shuffle(positives.begin(), positives.end(), rng);

    EpochLoss ep;
    for (std::size_t begin = 0; begin < positives.size();
         begin += cfg.batch_size) {
      const std::size_t end =
          std::min(positives.size(), begin + cfg.batch_size);
      TrainBatch batch;
      for (std::size_t k = begin; k < end; ++k) {
        const auto [u, i] = positives[k];
        batch.users.push_back(u);
        batch.pos_items.push_back(i);
        std::vector<int> negs;
        for (int j = 0; j < cfg.negatives_per_positive; ++j) {
          int cand = item_dist(rng);
          for (int tries = 0;
               tries < 100 && train_graph.has_edge(u, cand); ++tries)
            cand = item_dist(rng);
          negs.push_back(cand);
        }
        batch.negatives.push_back(std::move(negs));
      }

      if (frozen) {
        LossBreakdown lb = evaluate_batch(s, cfg, batch);
        ep.ranking += lb.ranking;
        ep.bias += lb.bias;
        ep.total += lb.total;
      } else {
        ClientParams grads = s.params.zeros_like();
        LossBreakdown lb = evaluate_batch(s, cfg, batch, &grads);
        if (!std::isfinite(lb.total))
          throw std::runtime_error(
              "non-finite loss in epoch " + std::to_string(epoch) +
              " (ranking=" + std::to_string(lb.ranking) +
              ", bias=" + std::to_string(lb.bias) + ")");
        ep.ranking += lb.ranking;
        ep.bias += lb.bias;
        ep.total += lb.total;
        std::size_t slot = 0;
        ClientParams::for_each_pair(s.params, grads, [&](auto& param, auto& grad) {
          slots[slot++].step(param, grad, opt);
        });
      }
    }
    const double denom = static_cast<double>(positives.size());
    ep.ranking /= denom;
    ep.bias /= denom;
    ep.total /= denom;
    result.epochs.push_back(ep);
  }
  return result;
}

}  // namespace lpsfed
