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

#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace lpsfed {

constexpr double kLeakySlope = 0.01;

struct DenseLayer {
  Eigen::MatrixXd w;  // out x in
  Eigen::VectorXd b;  // out
};

/// Fully-connected stack with leaky-rectifier hidden activations and an
/// identity output layer. Rows of the input are independent samples.
struct MlpParams {
  std::vector<DenseLayer> layers;

  int in_dim() const { return static_cast<int>(layers.front().w.cols()); }
  int out_dim() const { return static_cast<int>(layers.back().w.rows()); }

  static MlpParams init(const std::vector<int>& dims, std::mt19937_64& rng,
                        double scale) {
    if (dims.size() < 2) throw std::invalid_argument("mlp needs >= 2 dims");
    std::normal_distribution<double> gauss(0.0, 1.0);
    MlpParams p;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      DenseLayer layer;
      layer.w.resize(dims[l + 1], dims[l]);
      for (int c = 0; c < layer.w.cols(); ++c)
        for (int r = 0; r < layer.w.rows(); ++r) layer.w(r, c) = scale * gauss(rng);
      layer.b = Eigen::VectorXd::Zero(dims[l + 1]);
      p.layers.push_back(std::move(layer));
    }
    return p;
  }

  static MlpParams zeros_like(const MlpParams& other) {
    MlpParams p;
    for (const auto& l : other.layers)
      p.layers.push_back({Eigen::MatrixXd::Zero(l.w.rows(), l.w.cols()),
                          Eigen::VectorXd::Zero(l.b.size())});
    return p;
  }
};

struct MlpCache {
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> pre;  // pre-activation per layer
  std::vector<Eigen::MatrixXd> act;  // post-activation per layer
};

inline double leaky(double x) { return x > 0 ? x : kLeakySlope * x; }
inline double leaky_grad(double x) { return x > 0 ? 1.0 : kLeakySlope; }

/// Forward pass; `cache` is only needed when a backward pass will follow.
inline Eigen::MatrixXd mlp_forward(const MlpParams& p, const Eigen::MatrixXd& x,
                                   MlpCache* cache = nullptr) {
  if (x.cols() != p.in_dim())
    throw std::invalid_argument("mlp input width mismatch");
  if (cache) {
    cache->input = x;
    cache->pre.clear();
    cache->act.clear();
  }
  Eigen::MatrixXd a = x;
  const int last = static_cast<int>(p.layers.size()) - 1;
  for (int l = 0; l <= last; ++l) {
    Eigen::MatrixXd pre =
        (a * p.layers[l].w.transpose()).rowwise() + p.layers[l].b.transpose();
    Eigen::MatrixXd act =
        l == last ? pre : pre.unaryExpr([](double v) { return leaky(v); });
    if (cache) {
      cache->pre.push_back(pre);
      cache->act.push_back(act);
    }
    a = std::move(act);
  }
  return a;
}

/// Backward pass. Accumulates parameter gradients into `grads` (must be
/// zeros_like-shaped) and returns the gradient w.r.t. the input.
inline Eigen::MatrixXd mlp_backward(const MlpParams& p, const MlpCache& cache,
                                    const Eigen::MatrixXd& d_out,
                                    MlpParams& grads) {
  const int last = static_cast<int>(p.layers.size()) - 1;
  Eigen::MatrixXd d_act = d_out;
  for (int l = last; l >= 0; --l) {
    Eigen::MatrixXd d_pre =
        l == last
            ? d_act
            : Eigen::MatrixXd(d_act.array() * cache.pre[l].unaryExpr([](double v) {
                                return leaky_grad(v);
                              }).array());
    const Eigen::MatrixXd& below = l == 0 ? cache.input : cache.act[l - 1];
    grads.layers[l].w.noalias() += d_pre.transpose() * below;
    grads.layers[l].b += d_pre.colwise().sum().transpose();
    d_act.noalias() = d_pre * p.layers[l].w;
  }
  return d_act;
}

/// Root-mean-square propagation state for one tensor.
struct RmsPropConfig {
  double learning_rate = 0.0005;
  double decay = 0.9;
  double epsilon = 1e-8;
};

class RmsPropSlot {
 public:
  void step(Eigen::Ref<Eigen::MatrixXd> param, const Eigen::MatrixXd& grad,
            const RmsPropConfig& cfg) {
    if (acc_.size() == 0) acc_ = Eigen::MatrixXd::Zero(param.rows(), param.cols());
    acc_ = cfg.decay * acc_ + (1.0 - cfg.decay) * grad.cwiseProduct(grad);
    param -= cfg.learning_rate *
             grad.cwiseQuotient((acc_.cwiseSqrt().array() + cfg.epsilon).matrix());
  }

  void step(Eigen::Ref<Eigen::VectorXd> param, const Eigen::VectorXd& grad,
            const RmsPropConfig& cfg) {
    if (accv_.size() == 0) accv_ = Eigen::VectorXd::Zero(param.size());
    accv_ = cfg.decay * accv_ + (1.0 - cfg.decay) * grad.cwiseProduct(grad);
    param -= cfg.learning_rate *
             grad.cwiseQuotient((accv_.cwiseSqrt().array() + cfg.epsilon).matrix());
  }

 private:
  Eigen::MatrixXd acc_;
  Eigen::VectorXd accv_;
};

}  // namespace lpsfed
