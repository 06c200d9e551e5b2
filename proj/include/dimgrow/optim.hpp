#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "dimgrow/diffcore.hpp"

namespace dimgrow {

struct AdamConfig {
  double learning_rate = 1e-3;
  double gate_learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// A trainable tensor together with its adaptive-moment state. The step
// counter is kept per element so that slots which are appended or re-activated
// mid-run restart bias correction from zero.
struct Param {
  Tensor2 w;
  std::vector<double> m;
  std::vector<double> v;
  std::vector<std::int64_t> t;

  Param() : Param(Tensor2{}) {}
  explicit Param(Tensor2 init)
      : w(std::move(init)), m(w.size(), 0.0), v(w.size(), 0.0), t(w.size(), 0) {}

  std::size_t rows() const { return w.rows; }
  std::size_t cols() const { return w.cols; }

  void reset_slot(std::size_t i) {
    m[i] = 0.0;
    v[i] = 0.0;
    t[i] = 0;
  }
};

// Leading sub-block of a Param that an update touches. Rows/cols beyond the
// block (unused embedding dims) are left frozen, moments included.
struct Block {
  std::size_t rows;
  std::size_t cols;
};

inline void adam_step(Param& p, const AdamConfig& cfg, double lr, Block block) {
  const std::size_t stride = p.w.cols;
  std::int64_t cached_t = -1;
  double bc1 = 1.0, bc2 = 1.0;
  for (std::size_t r = 0; r < block.rows; ++r) {
    for (std::size_t c = 0; c < block.cols; ++c) {
      const std::size_t i = r * stride + c;
      const double g = p.w.grad[i];
      p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
      p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
      const std::int64_t t = ++p.t[i];
      if (t != cached_t) {
        cached_t = t;
        bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
      }
      const double mhat = p.m[i] / bc1;
      const double vhat = p.v[i] / bc2;
      p.w.values[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

inline void adam_step(Param& p, const AdamConfig& cfg, double lr) {
  adam_step(p, cfg, lr, Block{p.w.rows, p.w.cols});
}

}  // namespace dimgrow
