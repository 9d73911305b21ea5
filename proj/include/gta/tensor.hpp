#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gta/common.hpp"

namespace gta {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Debug-mode NaN/Inf detection at op boundaries. Off in timed runs.
inline std::atomic<bool>& check_finite_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}
inline void set_check_finite(bool on) { check_finite_flag().store(on); }
inline bool check_finite_enabled() { return check_finite_flag().load(); }

constexpr int no_node = -1;

class Tape;
class Tensor;
namespace detail {
Tensor finish_op(Shape shape, std::vector<double> data, std::vector<int> parents,
                 std::function<void(const std::vector<double>&,
                                    const std::vector<std::span<double>>&)>
                     back);
}

// Dense row-major tensor of doubles. Immutable after creation; an optional
// node id ties it to the active gradient tape (constants carry none).
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
    validate_shape(shape_);
    if (shape_numel(shape_) != data.size())
      throw config_error("Tensor: shape " + shape_str(shape_) + " wants " +
                         std::to_string(shape_numel(shape_)) +
                         " values, got " + std::to_string(data.size()));
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor full(Shape shape, double v) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  bool empty() const { return !data_; }
  const std::vector<double>& data() const& { return *data_; }
  // Copies when called on a temporary, so the result never dangles.
  std::vector<double> data() && { return *data_; }
  const std::shared_ptr<const std::vector<double>>& data_ptr() const {
    return data_;
  }

  int rows() const {
    require_2d("rows");
    return shape_[0];
  }
  int cols() const {
    require_2d("cols");
    return shape_[1];
  }

  double at(int r, int c) const {
    require_2d("at");
    return (*data_)[static_cast<std::size_t>(r) * shape_[1] + c];
  }

  /// Value of a one-element tensor.
  double value() const {
    if (numel() != 1)
      throw config_error("Tensor::value: tensor has " +
                         std::to_string(numel()) + " elements");
    return (*data_)[0];
  }

  int node() const { return node_; }
  bool on_tape() const { return node_ != no_node; }

  /// Same data, no tape identity.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

 private:
  static void validate_shape(const Shape& s) {
    if (s.empty()) throw config_error("Tensor: empty shape");
    for (int d : s)
      if (d <= 0)
        throw config_error("Tensor: non-positive extent in " + shape_str(s));
  }
  void require_2d(const char* who) const {
    if (shape_.size() != 2)
      throw config_error(std::string("Tensor::") + who +
                         ": expects a 2-D tensor, got " + shape_str(shape_));
  }

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  int node_ = no_node;

  friend class Tape;
  friend Tensor detail::finish_op(
      Shape, std::vector<double>, std::vector<int>,
      std::function<void(const std::vector<double>&,
                         const std::vector<std::span<double>>&)>);
};

inline Tensor detach(const Tensor& t) { return t.detached(); }

class GradientMap;

// Wengert-list gradient tape. Leaves are parameter slots registered up
// front; op nodes are appended in execution order, which is topological by
// construction. Single-owner: one training thread per tape.
class Tape {
 public:
  // Gradient flowing into the node, spans of the parents' gradient buffers
  // (empty span for constant parents).
  using BackwardFn = std::function<void(const std::vector<double>& grad_out,
                                        const std::vector<std::span<double>>&
                                            parent_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  /// Register a leaf (parameter) slot and return the tensor tagged with it.
  Tensor watch(const Tensor& t) {
    Tensor tagged = t.detached();
    tagged.node_ = next_id();
    leaf_numel_.push_back(t.numel());
    return tagged;
  }

  /// Re-tag a tensor with an existing leaf id (parameter update path).
  Tensor bind(const Tensor& t, int leaf_id) {
    if (leaf_id < 0 || leaf_id >= static_cast<int>(leaf_numel_.size()))
      throw config_error("Tape::bind: unknown leaf id");
    if (leaf_numel_[static_cast<std::size_t>(leaf_id)] != t.numel())
      throw config_error("Tape::bind: size mismatch for leaf");
    Tensor tagged = t.detached();
    tagged.node_ = leaf_id;
    return tagged;
  }

  int record(std::vector<int> parents, std::size_t out_numel, BackwardFn back) {
    ops_.push_back(OpNode{std::move(parents), std::move(back), out_numel});
    return static_cast<int>(leaf_numel_.size() + ops_.size()) - 1;
  }

  /// Drop op nodes, keep leaf slots. Called between training steps.
  void reset_ops() { ops_.clear(); }

  std::size_t num_leaves() const { return leaf_numel_.size(); }
  std::size_t num_ops() const { return ops_.size(); }

  std::size_t node_numel(int id) const {
    const std::size_t lid = static_cast<std::size_t>(id);
    return lid < leaf_numel_.size() ? leaf_numel_[lid]
                                    : ops_[lid - leaf_numel_.size()].numel;
  }

  GradientMap backward(const Tensor& loss) const;

 private:
  struct OpNode {
    std::vector<int> parents;
    BackwardFn back;
    std::size_t numel;
  };

  int next_id() const {
    return static_cast<int>(leaf_numel_.size() + ops_.size());
  }

  std::vector<std::size_t> leaf_numel_;
  std::vector<OpNode> ops_;
};

// Gradients produced by one backward pass, indexed by node id. Leaves never
// reached by the pass read as zeros.
class GradientMap {
 public:
  GradientMap(std::vector<std::vector<double>> buffers,
              std::vector<std::size_t> numels)
      : buffers_(std::move(buffers)), numels_(std::move(numels)) {}

  const std::vector<double>& at_node(int id) const {
    const auto idx = static_cast<std::size_t>(id);
    if (idx >= buffers_.size())
      throw config_error("GradientMap: node id out of range");
    if (buffers_[idx].empty() && numels_[idx] > 0)
      buffers_[idx].assign(numels_[idx], 0.0);
    return buffers_[idx];
  }

  Tensor at(const Tensor& t) const {
    if (!t.on_tape())
      return Tensor::zeros(t.shape());
    return Tensor(t.shape(), at_node(t.node()));
  }

 private:
  mutable std::vector<std::vector<double>> buffers_;
  std::vector<std::size_t> numels_;
};

// Activates a tape for the current thread for the enclosing scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& t) : prev_(Tape::active()) { Tape::active() = &t; }
  ~TapeScope() { Tape::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Suspends recording (evaluation passes inside a training scope).
class NoTapeScope {
 public:
  NoTapeScope() : prev_(Tape::active()) { Tape::active() = nullptr; }
  ~NoTapeScope() { Tape::active() = prev_; }
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* prev_;
};

inline GradientMap Tape::backward(const Tensor& loss) const {
  if (loss.numel() != 1)
    throw config_error("backward: loss must be scalar, got shape " +
                       shape_str(loss.shape()));
  const std::size_t total = leaf_numel_.size() + ops_.size();
  std::vector<std::vector<double>> grads(total);
  std::vector<std::size_t> numels(total);
  for (std::size_t i = 0; i < leaf_numel_.size(); ++i) numels[i] = leaf_numel_[i];
  for (std::size_t i = 0; i < ops_.size(); ++i)
    numels[leaf_numel_.size() + i] = ops_[i].numel;

  if (loss.on_tape()) {
    if (static_cast<std::size_t>(loss.node()) >= total)
      throw config_error("backward: loss is not on this tape");
    grads[static_cast<std::size_t>(loss.node())] = {1.0};
    // Reverse pass over op nodes; creation order is topological, so one
    // sweep visits every node exactly once.
    for (std::size_t i = ops_.size(); i-- > 0;) {
      const std::size_t id = leaf_numel_.size() + i;
      if (grads[id].empty()) continue;  // not reachable from the loss
      const OpNode& op = ops_[i];
      std::vector<std::span<double>> parent_spans;
      parent_spans.reserve(op.parents.size());
      for (int p : op.parents) {
        if (p == no_node) {
          parent_spans.emplace_back();
          continue;
        }
        auto& buf = grads[static_cast<std::size_t>(p)];
        if (buf.empty()) buf.assign(numels[static_cast<std::size_t>(p)], 0.0);
        parent_spans.emplace_back(buf.data(), buf.size());
      }
      op.back(grads[id], parent_spans);
      grads[id].clear();
      grads[id].shrink_to_fit();
    }
  }
  return GradientMap(std::move(grads), std::move(numels));
}

// ---------------------------------------------------------------------------
// Matmul kernels. Fixed reduction order, so results are deterministic.
// Loop orders chosen so the inner loop runs over contiguous memory and
// vectorizes.
// ---------------------------------------------------------------------------
namespace detail {

// C (=|+=) A[m,k] * B[k,n]
template <bool Acc>
inline void mm_nn(const double* A, const double* B, double* C, int m, int k,
                  int n) {
  for (int i = 0; i < m; ++i) {
    double* c = C + static_cast<std::size_t>(i) * n;
    if constexpr (!Acc)
      for (int j = 0; j < n; ++j) c[j] = 0.0;
    const double* a = A + static_cast<std::size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double av = a[kk];
      const double* b = B + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C (=|+=) A[m,d] * B[n,d]^T -> C[m,n]
template <bool Acc>
inline void mm_nt(const double* A, const double* B, double* C, int m, int d,
                  int n) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<std::size_t>(i) * d;
    double* c = C + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* b = B + static_cast<std::size_t>(j) * d;
      double acc = 0.0;
      for (int kk = 0; kk < d; ++kk) acc += a[kk] * b[kk];
      if constexpr (Acc)
        c[j] += acc;
      else
        c[j] = acc;
    }
  }
}

// C (=|+=) A[m,k]^T * B[m,n] -> C[k,n]
template <bool Acc>
inline void mm_tn(const double* A, const double* B, double* C, int m, int k,
                  int n) {
  if constexpr (!Acc)
    for (std::size_t i = 0; i < static_cast<std::size_t>(k) * n; ++i) C[i] = 0.0;
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<std::size_t>(i) * k;
    const double* b = B + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = a[kk];
      double* c = C + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

inline void guard_finite(const std::vector<double>& data, const char* op) {
  if (!check_finite_enabled()) return;
  for (double v : data)
    if (!std::isfinite(v))
      throw numeric_error(std::string("non-finite value produced by ") + op);
}

inline Tensor finish_op(Shape shape, std::vector<double> data,
                        std::vector<int> parents, Tape::BackwardFn back) {
  Tensor out(std::move(shape), std::move(data));
  Tape* tape = Tape::active();
  if (tape) {
    bool any = false;
    for (int p : parents)
      if (p != no_node) {
        any = true;
        break;
      }
    if (any)
      out.node_ = tape->record(std::move(parents), out.numel(), std::move(back));
  }
  return out;
}

inline void require_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2)
    throw config_error(std::string(op) + ": expects 2-D tensors, got " +
                       shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (a.shape() != b.shape())
    throw config_error(std::string(op) + ": shape mismatch " +
                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

using ConstData = std::shared_ptr<const std::vector<double>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw config_error("matmul: inner dimensions disagree: " +
                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  detail::mm_nn<false>(a.data().data(), b.data().data(), out.data(), m, k, n);
  detail::guard_finite(out, "matmul");
  detail::ConstData ad = a.data_ptr(), bd = b.data_ptr();
  return detail::finish_op(
      {m, n}, std::move(out), {a.node(), b.node()},
      [ad, bd, m, k, n](const std::vector<double>& g,
                        const std::vector<std::span<double>>& pg) {
        if (!pg[0].empty())
          detail::mm_nt<true>(g.data(), bd->data(), pg[0].data(), m, n, k);
        if (!pg[1].empty())
          detail::mm_tn<true>(ad->data(), g.data(), pg[1].data(), m, k, n);
      });
}

/// a * b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul_nt");
  detail::require_2d(b, "matmul_nt");
  const int m = a.rows(), d = a.cols(), n = b.rows();
  if (b.cols() != d)
    throw config_error("matmul_nt: inner dimensions disagree: " +
                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  detail::mm_nt<false>(a.data().data(), b.data().data(), out.data(), m, d, n);
  detail::guard_finite(out, "matmul_nt");
  detail::ConstData ad = a.data_ptr(), bd = b.data_ptr();
  return detail::finish_op(
      {m, n}, std::move(out), {a.node(), b.node()},
      [ad, bd, m, d, n](const std::vector<double>& g,
                        const std::vector<std::span<double>>& pg) {
        if (!pg[0].empty())
          detail::mm_nn<true>(g.data(), bd->data(), pg[0].data(), m, n, d);
        if (!pg[1].empty())
          detail::mm_tn<true>(g.data(), ad->data(), pg[1].data(), m, n, d);
      });
}

inline Tensor softmax_rows(const Tensor& a) {
  detail::require_2d(a, "softmax_rows");
  const int m = a.rows(), n = a.cols();
  std::vector<double> out(a.numel());
  const double* x = a.data().data();
  for (int i = 0; i < m; ++i) {
    const double* row = x + static_cast<std::size_t>(i) * n;
    double* o = out.data() + static_cast<std::size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      o[j] = std::exp(row[j] - mx);
      sum += o[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < n; ++j) o[j] *= inv;
  }
  detail::guard_finite(out, "softmax_rows");
  auto saved = std::make_shared<const std::vector<double>>(out);
  return detail::finish_op(
      a.shape(), std::move(out), {a.node()},
      [saved, m, n](const std::vector<double>& g,
                    const std::vector<std::span<double>>& pg) {
        if (pg[0].empty()) return;
        const double* s = saved->data();
        for (int i = 0; i < m; ++i) {
          const std::size_t off = static_cast<std::size_t>(i) * n;
          double dot = 0.0;
          for (int j = 0; j < n; ++j) dot += g[off + j] * s[off + j];
          for (int j = 0; j < n; ++j)
            pg[0][off + j] += s[off + j] * (g[off + j] - dot);
        }
      });
}

/// Per-row standardization followed by a per-column affine transform.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps) {
  detail::require_2d(x, "layer_norm");
  if (eps <= 0.0) throw config_error("layer_norm: eps must be positive");
  const int m = x.rows(), d = x.cols();
  if (gamma.numel() != static_cast<std::size_t>(d) ||
      beta.numel() != static_cast<std::size_t>(d))
    throw config_error("layer_norm: gamma/beta size mismatch for " +
                       shape_str(x.shape()));
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(static_cast<std::size_t>(m));
  const double* xd = x.data().data();
  const double* gd = gamma.data().data();
  const double* bd = beta.data().data();
  for (int i = 0; i < m; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xd[off + j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = xd[off + j] - mean;
      var += c * c;
    }
    var /= d;
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = istd;
    for (int j = 0; j < d; ++j) {
      const double xh = (xd[off + j] - mean) * istd;
      xhat[off + j] = xh;
      out[off + j] = gd[j] * xh + bd[j];
    }
  }
  detail::guard_finite(out, "layer_norm");
  auto sx = std::make_shared<const std::vector<double>>(std::move(xhat));
  auto si = std::make_shared<const std::vector<double>>(std::move(inv_std));
  detail::ConstData sg = gamma.data_ptr();
  return detail::finish_op(
      x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [sx, si, sg, m, d](const std::vector<double>& g,
                         const std::vector<std::span<double>>& pg) {
        const double* xh = sx->data();
        for (int i = 0; i < m; ++i) {
          const std::size_t off = static_cast<std::size_t>(i) * d;
          if (!pg[1].empty())
            for (int j = 0; j < d; ++j) pg[1][j] += g[off + j] * xh[off + j];
          if (!pg[2].empty())
            for (int j = 0; j < d; ++j) pg[2][j] += g[off + j];
          if (!pg[0].empty()) {
            double mean_gg = 0.0, mean_ggx = 0.0;
            for (int j = 0; j < d; ++j) {
              const double gg = g[off + j] * (*sg)[j];
              mean_gg += gg;
              mean_ggx += gg * xh[off + j];
            }
            mean_gg /= d;
            mean_ggx /= d;
            const double istd = (*si)[static_cast<std::size_t>(i)];
            for (int j = 0; j < d; ++j) {
              const double gg = g[off + j] * (*sg)[j];
              pg[0][off + j] += istd * (gg - mean_gg - xh[off + j] * mean_ggx);
            }
          }
        }
      });
}

/// Exact Gaussian-error-linear unit, erf form.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  std::vector<double> out(x.numel());
  const double* xd = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * inv_sqrt2));
  detail::guard_finite(out, "gelu");
  detail::ConstData sx = x.data_ptr();
  return detail::finish_op(
      x.shape(), std::move(out), {x.node()},
      [sx](const std::vector<double>& g,
           const std::vector<std::span<double>>& pg) {
        if (pg[0].empty()) return;
        const double* xd = sx->data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double phi = 0.5 * (1.0 + std::erf(xd[i] * inv_sqrt2));
          const double pdf = inv_sqrt2pi * std::exp(-0.5 * xd[i] * xd[i]);
          pg[0][i] += g[i] * (phi + xd[i] * pdf);
        }
      });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  detail::guard_finite(out, "add");
  return detail::finish_op(
      a.shape(), std::move(out), {a.node(), b.node()},
      [](const std::vector<double>& g,
         const std::vector<std::span<double>>& pg) {
        for (int p = 0; p < 2; ++p)
          if (!pg[p].empty())
            for (std::size_t i = 0; i < g.size(); ++i) pg[p][i] += g[i];
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  detail::guard_finite(out, "sub");
  return detail::finish_op(
      a.shape(), std::move(out), {a.node(), b.node()},
      [](const std::vector<double>& g,
         const std::vector<std::span<double>>& pg) {
        if (!pg[0].empty())
          for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i];
        if (!pg[1].empty())
          for (std::size_t i = 0; i < g.size(); ++i) pg[1][i] -= g[i];
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  detail::guard_finite(out, "mul");
  detail::ConstData sa = a.data_ptr(), sb = b.data_ptr();
  return detail::finish_op(
      a.shape(), std::move(out), {a.node(), b.node()},
      [sa, sb](const std::vector<double>& g,
               const std::vector<std::span<double>>& pg) {
        if (!pg[0].empty())
          for (std::size_t i = 0; i < g.size(); ++i)
            pg[0][i] += g[i] * (*sb)[i];
        if (!pg[1].empty())
          for (std::size_t i = 0; i < g.size(); ++i)
            pg[1][i] += g[i] * (*sa)[i];
      });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  const double* ad = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * s;
  detail::guard_finite(out, "scale");
  return detail::finish_op(
      a.shape(), std::move(out), {a.node()},
      [s](const std::vector<double>& g,
          const std::vector<std::span<double>>& pg) {
        if (pg[0].empty()) return;
        for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i] * s;
      });
}

/// mat[m,n] + vec[n] broadcast over rows.
inline Tensor add_rowvec(const Tensor& mat, const Tensor& vec) {
  detail::require_2d(mat, "add_rowvec");
  const int m = mat.rows(), n = mat.cols();
  if (vec.numel() != static_cast<std::size_t>(n))
    throw config_error("add_rowvec: vector size mismatch " +
                       shape_str(mat.shape()) + " vs " +
                       shape_str(vec.shape()));
  std::vector<double> out(mat.numel());
  const double* md = mat.data().data();
  const double* vd = vec.data().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * n + j;
      out[k] = md[k] + vd[j];
    }
  detail::guard_finite(out, "add_rowvec");
  return detail::finish_op(
      mat.shape(), std::move(out), {mat.node(), vec.node()},
      [m, n](const std::vector<double>& g,
             const std::vector<std::span<double>>& pg) {
        if (!pg[0].empty())
          for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i];
        if (!pg[1].empty())
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
              pg[1][j] += g[static_cast<std::size_t>(i) * n + j];
      });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::finish_op(
      {1}, {s}, {a.node()},
      [n = a.numel()](const std::vector<double>& g,
                      const std::vector<std::span<double>>& pg) {
        if (pg[0].empty()) return;
        for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[0];
      });
}

inline Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  return detail::finish_op(
      {1}, {s * inv}, {a.node()},
      [n = a.numel(), inv](const std::vector<double>& g,
                           const std::vector<std::span<double>>& pg) {
        if (pg[0].empty()) return;
        for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[0] * inv;
      });
}

inline Tensor square(const Tensor& a) {
  std::vector<double> out(a.numel());
  const double* ad = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * ad[i];
  detail::guard_finite(out, "square");
  detail::ConstData sa = a.data_ptr();
  return detail::finish_op(
      a.shape(), std::move(out), {a.node()},
      [sa](const std::vector<double>& g,
           const std::vector<std::span<double>>& pg) {
        if (pg[0].empty()) return;
        for (std::size_t i = 0; i < g.size(); ++i)
          pg[0][i] += 2.0 * g[i] * (*sa)[i];
      });
}

inline Tensor sqrt(const Tensor& a) {
  std::vector<double> out(a.numel());
  const double* ad = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(ad[i]);
  detail::guard_finite(out, "sqrt");
  auto so = std::make_shared<const std::vector<double>>(out);
  return detail::finish_op(
      a.shape(), std::move(out), {a.node()},
      [so](const std::vector<double>& g,
           const std::vector<std::span<double>>& pg) {
        if (pg[0].empty()) return;
        for (std::size_t i = 0; i < g.size(); ++i)
          pg[0][i] += g[i] * 0.5 / (*so)[i];
      });
}

inline Tensor concat_last_dim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw config_error("concat_last_dim: no inputs");
  const int m = parts[0].rows();
  int total = 0;
  std::vector<int> widths;
  std::vector<int> parent_ids;
  for (const Tensor& p : parts) {
    detail::require_2d(p, "concat_last_dim");
    if (p.rows() != m)
      throw config_error("concat_last_dim: row mismatch " +
                         shape_str(parts[0].shape()) + " vs " +
                         shape_str(p.shape()));
    widths.push_back(p.cols());
    parent_ids.push_back(p.node());
    total += p.cols();
  }
  std::vector<double> out(static_cast<std::size_t>(m) * total);
  int col = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const double* pd = parts[pi].data().data();
    const int w = widths[pi];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        out[static_cast<std::size_t>(i) * total + col + j] =
            pd[static_cast<std::size_t>(i) * w + j];
    col += w;
  }
  return detail::finish_op(
      {m, total}, std::move(out), std::move(parent_ids),
      [m, total, widths](const std::vector<double>& g,
                         const std::vector<std::span<double>>& pg) {
        int col = 0;
        for (std::size_t pi = 0; pi < widths.size(); ++pi) {
          const int w = widths[pi];
          if (!pg[pi].empty())
            for (int i = 0; i < m; ++i)
              for (int j = 0; j < w; ++j)
                pg[pi][static_cast<std::size_t>(i) * w + j] +=
                    g[static_cast<std::size_t>(i) * total + col + j];
          col += w;
        }
      });
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "concat_rows");
  detail::require_2d(b, "concat_rows");
  if (a.cols() != b.cols())
    throw config_error("concat_rows: column mismatch " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
  const int n = a.cols(), ra = a.rows(), rb = b.rows();
  std::vector<double> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  return detail::finish_op(
      {ra + rb, n}, std::move(out), {a.node(), b.node()},
      [na = a.numel(), nb = b.numel()](
          const std::vector<double>& g,
          const std::vector<std::span<double>>& pg) {
        if (!pg[0].empty())
          for (std::size_t i = 0; i < na; ++i) pg[0][i] += g[i];
        if (!pg[1].empty())
          for (std::size_t i = 0; i < nb; ++i) pg[1][i] += g[na + i];
      });
}

/// Rows [r0, r1).
inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
  detail::require_2d(a, "slice_rows");
  const int m = a.rows(), n = a.cols();
  if (r0 < 0 || r1 > m || r0 >= r1)
    throw config_error("slice_rows: range [" + std::to_string(r0) + "," +
                       std::to_string(r1) + ") invalid for " +
                       shape_str(a.shape()));
  std::vector<double> out(static_cast<std::size_t>(r1 - r0) * n);
  const double* ad = a.data().data();
  std::copy(ad + static_cast<std::size_t>(r0) * n,
            ad + static_cast<std::size_t>(r1) * n, out.begin());
  return detail::finish_op(
      {r1 - r0, n}, std::move(out), {a.node()},
      [r0, n](const std::vector<double>& g,
              const std::vector<std::span<double>>& pg) {
        if (pg[0].empty()) return;
        const std::size_t base = static_cast<std::size_t>(r0) * n;
        for (std::size_t i = 0; i < g.size(); ++i) pg[0][base + i] += g[i];
      });
}

/// Columns [c0, c1).
inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
  detail::require_2d(a, "slice_cols");
  const int m = a.rows(), n = a.cols();
  if (c0 < 0 || c1 > n || c0 >= c1)
    throw config_error("slice_cols: range [" + std::to_string(c0) + "," +
                       std::to_string(c1) + ") invalid for " +
                       shape_str(a.shape()));
  const int w = c1 - c0;
  std::vector<double> out(static_cast<std::size_t>(m) * w);
  const double* ad = a.data().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j)
      out[static_cast<std::size_t>(i) * w + j] =
          ad[static_cast<std::size_t>(i) * n + c0 + j];
  return detail::finish_op(
      {m, w}, std::move(out), {a.node()},
      [m, n, c0, w](const std::vector<double>& g,
                    const std::vector<std::span<double>>& pg) {
        if (pg[0].empty()) return;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j)
            pg[0][static_cast<std::size_t>(i) * n + c0 + j] +=
                g[static_cast<std::size_t>(i) * w + j];
      });
}

/// Cross entropy of one sample from raw class logits (numel == class count).
inline Tensor cross_entropy_with_logits(const Tensor& logits, int label) {
  const std::size_t c = logits.numel();
  if (label < 0 || static_cast<std::size_t>(label) >= c)
    throw config_error("cross_entropy_with_logits: label " +
                       std::to_string(label) + " outside [0," +
                       std::to_string(c) + ")");
  const double* x = logits.data().data();
  double mx = x[0];
  for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < c; ++i) sum += std::exp(x[i] - mx);
  const double lse = mx + std::log(sum);
  const double ce = lse - x[static_cast<std::size_t>(label)];
  detail::ConstData sx = logits.data_ptr();
  return detail::finish_op(
      {1}, {ce}, {logits.node()},
      [sx, label, mx, sum](const std::vector<double>& g,
                           const std::vector<std::span<double>>& pg) {
        if (pg[0].empty()) return;
        const double* x = sx->data();
        for (std::size_t i = 0; i < sx->size(); ++i) {
          double p = std::exp(x[i] - mx) / sum;
          if (i == static_cast<std::size_t>(label)) p -= 1.0;
          pg[0][i] += g[0] * p;
        }
      });
}

}  // namespace gta
