#pragma once

// Tape-based reverse-mode differentiation over dense row-major 2-D arrays.
//
// A Graph is recorded fresh for every forward pass. Leaves either own a copy
// of their value (constants) or refer to an external Tensor2 (parameters);
// gradients for parameter leaves accumulate straight into the external
// tensor's grad buffer, so several backward passes add up until the caller
// zeroes them.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dimgrow/errors.hpp"

namespace dimgrow {

struct Tensor2 {
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::vector<double> values;
  std::vector<double> grad;

  Tensor2() : values(1, 0.0), grad(1, 0.0) {}

  Tensor2(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c) {
    if (r == 0 || c == 0) {
      throw ConfigError("Tensor2: shape must be at least 1x1, got " + std::to_string(r) + "x" +
                        std::to_string(c));
    }
    values.assign(r * c, fill);
    grad.assign(r * c, 0.0);
  }

  Tensor2(std::size_t r, std::size_t c, std::vector<double> data) : Tensor2(r, c) {
    if (data.size() != r * c) throw ConfigError("Tensor2: data size does not match shape");
    values = std::move(data);
  }

  Tensor2(std::size_t r, std::size_t c, std::initializer_list<double> data)
      : Tensor2(r, c, std::vector<double>(data)) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double& g(std::size_t r, std::size_t c) { return grad[r * cols + c]; }
  double g(std::size_t r, std::size_t c) const { return grad[r * cols + c]; }

  std::size_t size() const { return values.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

// Handle to a node recorded in a Graph.
struct Var {
  std::size_t id = 0;
};

namespace detail {

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline void require(bool ok, const char* op, const std::string& msg) {
  if (!ok) throw ConfigError(std::string(op) + ": " + msg);
}

inline std::string shape_str(const Tensor2& t) {
  return std::to_string(t.rows) + "x" + std::to_string(t.cols);
}

}  // namespace detail

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // Leaf bound to caller-owned storage; the tensor must outlive backward().
  Var param(Tensor2& t) {
    nodes_.push_back(Node{});
    nodes_.back().ext = &t;
    return Var{nodes_.size() - 1};
  }

  Var constant(Tensor2 t) { return push(std::move(t)); }

  const Tensor2& value(Var v) const { return tensor(v); }
  const std::vector<double>& grad(Var v) const { return tensor(v).grad; }
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b) {
    const Tensor2& A = tensor(a);
    const Tensor2& B = tensor(b);
    detail::require(A.cols == B.rows, "matmul",
                    "inner dimensions differ: " + detail::shape_str(A) + " * " + detail::shape_str(B));
    const std::size_t m = A.rows, k = A.cols, n = B.cols;
    Tensor2 C(m, n);
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = &C.values[i * n];
      for (std::size_t p = 0; p < k; ++p) {
        const double av = A.values[i * k + p];
        const double* brow = &B.values[p * n];
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
    Var out = push(std::move(C));
    set_backward(out, [a, b, out, m, k, n](Graph& g) {
      Tensor2& A = g.tensor(a);
      Tensor2& B = g.tensor(b);
      const Tensor2& C = g.tensor(out);
      // dA = dC * B^T
      for (std::size_t i = 0; i < m; ++i) {
        const double* dc = &C.grad[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = &B.values[p * n];
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += dc[j] * brow[j];
          A.grad[i * k + p] += acc;
        }
      }
      // dB = A^T * dC
      for (std::size_t i = 0; i < m; ++i) {
        const double* dc = &C.grad[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A.values[i * k + p];
          double* db = &B.grad[p * n];
          for (std::size_t j = 0; j < n; ++j) db[j] += av * dc[j];
        }
      }
    });
    return out;
  }

  Var concat_cols(std::span<const Var> parts) {
    detail::require(!parts.empty(), "concat_cols", "no parts");
    const std::size_t rows = tensor(parts[0]).rows;
    std::size_t total = 0;
    for (Var p : parts) {
      detail::require(tensor(p).rows == rows, "concat_cols", "row counts differ");
      total += tensor(p).cols;
    }
    Tensor2 out_t(rows, total);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (Var p : parts) {
      const Tensor2& t = tensor(p);
      offsets.push_back(off);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < t.cols; ++c) out_t(r, off + c) = t(r, c);
      off += t.cols;
    }
    Var out = push(std::move(out_t));
    std::vector<Var> ops(parts.begin(), parts.end());
    set_backward(out, [ops, offsets, out](Graph& g) {
      const Tensor2& O = g.tensor(out);
      for (std::size_t i = 0; i < ops.size(); ++i) {
        Tensor2& t = g.tensor(ops[i]);
        for (std::size_t r = 0; r < t.rows; ++r)
          for (std::size_t c = 0; c < t.cols; ++c) t.g(r, c) += O.g(r, offsets[i] + c);
      }
    });
    return out;
  }

  // First d columns.
  Var slice_cols(Var t, std::size_t d) {
    const Tensor2& T = tensor(t);
    detail::require(d >= 1 && d <= T.cols, "slice_cols",
                    "width " + std::to_string(d) + " outside [1, " + std::to_string(T.cols) + "]");
    Tensor2 out_t(T.rows, d);
    for (std::size_t r = 0; r < T.rows; ++r)
      for (std::size_t c = 0; c < d; ++c) out_t(r, c) = T(r, c);
    Var out = push(std::move(out_t));
    set_backward(out, [t, out, d](Graph& g) {
      Tensor2& T = g.tensor(t);
      const Tensor2& O = g.tensor(out);
      for (std::size_t r = 0; r < T.rows; ++r)
        for (std::size_t c = 0; c < d; ++c) T.g(r, c) += O.g(r, c);
    });
    return out;
  }

  // First d rows.
  Var slice_rows(Var t, std::size_t d) {
    const Tensor2& T = tensor(t);
    detail::require(d >= 1 && d <= T.rows, "slice_rows",
                    "height " + std::to_string(d) + " outside [1, " + std::to_string(T.rows) + "]");
    Tensor2 out_t(d, T.cols,
                  std::vector<double>(T.values.begin(), T.values.begin() + d * T.cols));
    Var out = push(std::move(out_t));
    set_backward(out, [t, out](Graph& g) {
      Tensor2& T = g.tensor(t);
      const Tensor2& O = g.tensor(out);
      for (std::size_t i = 0; i < O.size(); ++i) T.grad[i] += O.grad[i];
    });
    return out;
  }

  Var row_gather(Var table, std::span<const std::size_t> idx) {
    const Tensor2& T = tensor(table);
    detail::require(!idx.empty(), "row_gather", "empty index array");
    for (std::size_t j : idx) {
      if (j >= T.rows) {
        throw DataError("row_gather: index " + std::to_string(j) + " out of range for table with " +
                        std::to_string(T.rows) + " rows");
      }
    }
    const std::size_t d = T.cols;
    Tensor2 out_t(idx.size(), d);
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy_n(&T.values[idx[r] * d], d, &out_t.values[r * d]);
    Var out = push(std::move(out_t));
    std::vector<std::size_t> saved(idx.begin(), idx.end());
    set_backward(out, [table, out, saved = std::move(saved), d](Graph& g) {
      Tensor2& T = g.tensor(table);
      const Tensor2& O = g.tensor(out);
      for (std::size_t r = 0; r < saved.size(); ++r) {
        double* dst = &T.grad[saved[r] * d];
        const double* src = &O.grad[r * d];
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
    });
    return out;
  }

  Var sigmoid(Var t) {
    Tensor2 out_t = with_shape(tensor(t));
    const Tensor2& T = tensor(t);
    for (std::size_t i = 0; i < T.size(); ++i) out_t.values[i] = detail::stable_sigmoid(T.values[i]);
    Var out = push(std::move(out_t));
    set_backward(out, [t, out](Graph& g) {
      Tensor2& T = g.tensor(t);
      const Tensor2& O = g.tensor(out);
      for (std::size_t i = 0; i < O.size(); ++i) {
        const double y = O.values[i];
        T.grad[i] += O.grad[i] * y * (1.0 - y);
      }
    });
    return out;
  }

  Var relu(Var t) {
    Tensor2 out_t = with_shape(tensor(t));
    const Tensor2& T = tensor(t);
    for (std::size_t i = 0; i < T.size(); ++i) out_t.values[i] = T.values[i] > 0.0 ? T.values[i] : 0.0;
    Var out = push(std::move(out_t));
    set_backward(out, [t, out](Graph& g) {
      Tensor2& T = g.tensor(t);
      const Tensor2& O = g.tensor(out);
      for (std::size_t i = 0; i < O.size(); ++i)
        if (T.values[i] > 0.0) T.grad[i] += O.grad[i];
    });
    return out;
  }

  Var scale(Var t, double c) {
    Tensor2 out_t = with_shape(tensor(t));
    const Tensor2& T = tensor(t);
    for (std::size_t i = 0; i < T.size(); ++i) out_t.values[i] = c * T.values[i];
    Var out = push(std::move(out_t));
    set_backward(out, [t, out, c](Graph& g) {
      Tensor2& T = g.tensor(t);
      const Tensor2& O = g.tensor(out);
      for (std::size_t i = 0; i < O.size(); ++i) T.grad[i] += c * O.grad[i];
    });
    return out;
  }

  Var add(Var a, Var b) {
    const Tensor2& A = tensor(a);
    const Tensor2& B = tensor(b);
    detail::require(A.rows == B.rows && A.cols == B.cols, "add",
                    "shapes differ: " + detail::shape_str(A) + " vs " + detail::shape_str(B));
    Tensor2 out_t = with_shape(A);
    for (std::size_t i = 0; i < A.size(); ++i) out_t.values[i] = A.values[i] + B.values[i];
    Var out = push(std::move(out_t));
    set_backward(out, [a, b, out](Graph& g) {
      const Tensor2& O = g.tensor(out);
      Tensor2& A = g.tensor(a);
      for (std::size_t i = 0; i < O.size(); ++i) A.grad[i] += O.grad[i];
      Tensor2& B = g.tensor(b);
      for (std::size_t i = 0; i < O.size(); ++i) B.grad[i] += O.grad[i];
    });
    return out;
  }

  // x [B x n] + bias [1 x n] broadcast over rows.
  Var add_row(Var x, Var bias) {
    const Tensor2& X = tensor(x);
    const Tensor2& Bv = tensor(bias);
    detail::require(Bv.rows == 1 && Bv.cols == X.cols, "add_row",
                    "bias " + detail::shape_str(Bv) + " does not match " + detail::shape_str(X));
    Tensor2 out_t = with_shape(X);
    for (std::size_t r = 0; r < X.rows; ++r)
      for (std::size_t c = 0; c < X.cols; ++c) out_t(r, c) = X(r, c) + Bv.values[c];
    Var out = push(std::move(out_t));
    set_backward(out, [x, bias, out](Graph& g) {
      const Tensor2& O = g.tensor(out);
      Tensor2& X = g.tensor(x);
      for (std::size_t i = 0; i < O.size(); ++i) X.grad[i] += O.grad[i];
      Tensor2& Bv = g.tensor(bias);
      for (std::size_t r = 0; r < O.rows; ++r)
        for (std::size_t c = 0; c < O.cols; ++c) Bv.grad[c] += O.g(r, c);
    });
    return out;
  }

  // Scalar sum_i w_i * t_i over all elements (w empty -> plain sum).
  Var weighted_sum(Var t, std::span<const double> w = {}) {
    const Tensor2& T = tensor(t);
    detail::require(w.empty() || w.size() == T.size(), "weighted_sum", "weight length mismatch");
    std::vector<double> weights(w.begin(), w.end());
    if (weights.empty()) weights.assign(T.size(), 1.0);
    double s = 0.0;
    for (std::size_t i = 0; i < T.size(); ++i) s += weights[i] * T.values[i];
    Var out = push(Tensor2(1, 1, s));
    set_backward(out, [t, out, weights = std::move(weights)](Graph& g) {
      Tensor2& T = g.tensor(t);
      const double up = g.tensor(out).grad[0];
      for (std::size_t i = 0; i < T.size(); ++i) T.grad[i] += weights[i] * up;
    });
    return out;
  }

  Var sum(Var t) { return weighted_sum(t); }

  // out[:, k] = g_k * orig[:, k] + (1 - g_k) * shuffled[:, k].
  // No gradient is routed into `shuffled`.
  Var gate_mix(Var orig, Var shuffled, Var gates) {
    const Tensor2& O = tensor(orig);
    const Tensor2& S = tensor(shuffled);
    const Tensor2& G = tensor(gates);
    detail::require(O.rows == S.rows && O.cols == S.cols, "gate_mix", "orig/shuffled shapes differ");
    detail::require(G.rows == 1 && G.cols == O.cols, "gate_mix",
                    "gate length " + std::to_string(G.size()) + " != width " + std::to_string(O.cols));
    Tensor2 out_t = with_shape(O);
    for (std::size_t r = 0; r < O.rows; ++r)
      for (std::size_t c = 0; c < O.cols; ++c) {
        const double gk = G.values[c];
        out_t(r, c) = gk * O(r, c) + (1.0 - gk) * S(r, c);
      }
    Var out = push(std::move(out_t));
    set_backward(out, [orig, shuffled, gates, out](Graph& g) {
      const Tensor2& Out = g.tensor(out);
      Tensor2& O = g.tensor(orig);
      const Tensor2& S = g.tensor(shuffled);
      Tensor2& G = g.tensor(gates);
      for (std::size_t r = 0; r < Out.rows; ++r)
        for (std::size_t c = 0; c < Out.cols; ++c) {
          const double up = Out.g(r, c);
          O.g(r, c) += G.values[c] * up;
          G.grad[c] += up * (O(r, c) - S(r, c));
        }
    });
    return out;
  }

  // Forward identity, contributes nothing to its operand in backward.
  Var stop_gradient(Var t) { return push(copy_values(tensor(t))); }

  // out[r, k] = t[perm[k][r], k]; differentiable (gradient is routed back
  // through the permutation). Wrap in stop_gradient to cut it.
  Var permute_columns(Var t, const std::vector<std::vector<std::size_t>>& perm) {
    const Tensor2& T = tensor(t);
    detail::require(perm.size() == T.cols, "permute_columns", "one permutation per column required");
    Tensor2 out_t = with_shape(T);
    for (std::size_t c = 0; c < T.cols; ++c) {
      detail::require(perm[c].size() == T.rows, "permute_columns", "permutation length != rows");
      for (std::size_t r = 0; r < T.rows; ++r) out_t(r, c) = T(perm[c][r], c);
    }
    Var out = push(std::move(out_t));
    set_backward(out, [t, out, perm](Graph& g) {
      Tensor2& T = g.tensor(t);
      const Tensor2& O = g.tensor(out);
      for (std::size_t c = 0; c < T.cols; ++c)
        for (std::size_t r = 0; r < T.rows; ++r) T.g(perm[c][r], c) += O.g(r, c);
    });
    return out;
  }

  // Mean over rows of log(1 + exp(-(2y - 1) z)); logits must be B x 1.
  Var bce_with_logits(Var logits, std::span<const int> labels) {
    const Tensor2& Z = tensor(logits);
    if (labels.empty()) throw ConfigError("bce_with_logits: empty batch");
    detail::require(Z.cols == 1 && Z.rows == labels.size(), "bce_with_logits",
                    "logits " + detail::shape_str(Z) + " vs " + std::to_string(labels.size()) + " labels");
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != 0 && labels[i] != 1) throw DataError("bce_with_logits: label must be 0 or 1");
      const double z = Z.values[i];
      total += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
    }
    const double n = static_cast<double>(labels.size());
    Var out = push(Tensor2(1, 1, total / n));
    std::vector<int> y(labels.begin(), labels.end());
    set_backward(out, [logits, out, y = std::move(y), n](Graph& g) {
      Tensor2& Z = g.tensor(logits);
      const double up = g.tensor(out).grad[0];
      for (std::size_t i = 0; i < y.size(); ++i)
        Z.grad[i] += up * (detail::stable_sigmoid(Z.values[i]) - y[i]) / n;
    });
    return out;
  }

  // Seeds d(loss)/d(loss) = 1 and runs the tape in reverse. Gradients add
  // onto whatever the parameter grad buffers already hold.
  void backward(Var loss) {
    Tensor2& L = tensor(loss);
    if (L.rows != 1 || L.cols != 1) {
      throw ConfigError("backward: loss must be scalar, got " + detail::shape_str(L));
    }
    L.grad[0] += 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (nodes_[i].back) nodes_[i].back(*this);
    }
  }

 private:
  struct Node {
    Tensor2 own;
    Tensor2* ext = nullptr;
    std::function<void(Graph&)> back;
  };

  Tensor2& tensor(Var v) { return nodes_.at(v.id).ext ? *nodes_[v.id].ext : nodes_[v.id].own; }
  const Tensor2& tensor(Var v) const {
    return nodes_.at(v.id).ext ? *nodes_[v.id].ext : nodes_[v.id].own;
  }

  static Tensor2 with_shape(const Tensor2& t) { return Tensor2(t.rows, t.cols); }
  static Tensor2 copy_values(const Tensor2& t) { return Tensor2(t.rows, t.cols, t.values); }

  Var push(Tensor2 t) {
    nodes_.push_back(Node{std::move(t), nullptr, {}});
    return Var{nodes_.size() - 1};
  }

  void set_backward(Var v, std::function<void(Graph&)> fn) { nodes_[v.id].back = std::move(fn); }

  std::vector<Node> nodes_;
};

}  // namespace dimgrow
