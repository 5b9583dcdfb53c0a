#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ctxmem/linalg.hpp"

namespace ctxmem {

struct OptimizerConfig {
  std::string kind = "sgd";  // "sgd" or "adam"
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

/// SGD or Adam over an ordered list of parameter matrices. The parameter
/// list must keep the same order and shapes across steps.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.kind != "sgd" && cfg_.kind != "adam") throw ConfigError("unknown optimizer '" + cfg_.kind + "'");
    if (!(cfg_.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  }

  const OptimizerConfig& config() const { return cfg_; }

  void step(std::span<Matrix* const> params, std::span<const Matrix* const> grads, double lr_scale = 1.0) {
    double clip = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (const Matrix* g : grads) sq += g->squaredNorm();
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) clip = cfg_.clip_norm / norm;
    }
    const double lr = cfg_.learning_rate * lr_scale;
    if (cfg_.kind == "sgd") {
      for (std::size_t i = 0; i < params.size(); ++i) *params[i] -= (lr * clip) * *grads[i];
      return;
    }
    if (m_.empty()) {
      for (const Matrix* p : params) {
        m_.push_back(Matrix::Zero(p->rows(), p->cols()));
        v_.push_back(Matrix::Zero(p->rows(), p->cols()));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * clip * *grads[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * (clip * *grads[i]).cwiseAbs2();
      params[i]->array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.epsilon);
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Matrix> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace ctxmem
