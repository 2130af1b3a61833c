#pragma once

// Minimal reverse-mode differentiation over row-major matrices.
//
// A Tape records every operation of one forward pass as a node holding its
// value; Tape::backward walks the nodes in reverse and accumulates gradients.
// Parameters live outside the tape (ParamStore) and receive gradients when a
// tape node bound to them is differentiated.

#include "medfuse/common.hpp"
#include "medfuse/rng.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace medfuse {

template <class T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

// Named tensors in a stable insertion order.
template <class T>
class ParamStore {
 public:
  Parameter<T>& add(std::string name, Matrix<T> value) {
    if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
    index_[name] = params_.size();
    Parameter<T> p{std::move(name), std::move(value), {}};
    p.zero_grad();
    params_.push_back(std::move(p));
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw IndexError("no parameter named '" + name + "'");
    return params_[it->second];
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IndexError("no parameter named '" + name + "'");
    return params_[it->second];
  }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
class Tape {
 public:
  using Mat = Matrix<T>;

  struct Var {
    int id = -1;
  };

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  Eigen::Index rows(Var v) const { return nodes_[v.id].value.rows(); }
  Eigen::Index cols(Var v) const { return nodes_[v.id].value.cols(); }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Mat value) { return push(std::move(value), false); }

  // Differentiable view of a parameter; repeated calls return the same node.
  Var param(Parameter<T>& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    Var v = push(p.value, true);
    nodes_[v.id].param = &p;
    bound_[&p] = v;
    return v;
  }

  // Read-only parameter (no gradient flows back).
  Var param(const Parameter<T>& p) { return constant(p.value); }

  // Gradient accumulated at a node after backward().
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }

  void backward(Var loss) {
    if (value(loss).size() != 1) throw ShapeError("backward: loss must be a scalar");
    auto& root = nodes_[loss.id];
    root.grad = Mat::Ones(1, 1);
    for (int i = loss.id; i >= 0; --i) {
      auto& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.back) n.back();
      if (n.param) n.param->grad += nodes_[i].grad;
    }
  }

  // ---- elementwise and linear algebra ----------------------------------------

  Var matmul(Var a, Var b) {
    check(cols(a) == rows(b), "matmul inner dimensions");
    Var out = push(value(a) * value(b), any(a, b));
    on_back(out, [this, a, b, out] {
      const Mat& g = grad_of(out);
      if (needs(a)) acc(a, g * value(b).transpose());
      if (needs(b)) acc(b, value(a).transpose() * g);
    });
    return out;
  }

  // x W^T + b with W stored (out x in); bias may be omitted (id < 0).
  Var linear(Var x, Var w, Var b = Var{}) {
    check(cols(x) == cols(w), "linear input width");
    Mat y = value(x) * value(w).transpose();
    if (b.id >= 0) {
      check(rows(b) == 1 && cols(b) == rows(w), "linear bias shape");
      y.rowwise() += value(b).row(0);
    }
    Var out = push(std::move(y), any(x, w) || (b.id >= 0 && needs(b)));
    on_back(out, [this, x, w, b, out] {
      const Mat& g = grad_of(out);
      if (needs(x)) acc(x, g * value(w));
      if (needs(w)) acc(w, g.transpose() * value(x));
      if (b.id >= 0 && needs(b)) acc(b, g.colwise().sum());
    });
    return out;
  }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Var out = push(value(a) + value(b), any(a, b));
    on_back(out, [this, a, b, out] {
      if (needs(a)) acc(a, grad_of(out));
      if (needs(b)) acc(b, grad_of(out));
    });
    return out;
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    Var out = push(value(a) - value(b), any(a, b));
    on_back(out, [this, a, b, out] {
      if (needs(a)) acc(a, grad_of(out));
      if (needs(b)) acc(b, -grad_of(out));
    });
    return out;
  }

  Var hadamard(Var a, Var b) {
    check_same(a, b, "hadamard");
    Var out = push(value(a).cwiseProduct(value(b)), any(a, b));
    on_back(out, [this, a, b, out] {
      if (needs(a)) acc(a, grad_of(out).cwiseProduct(value(b)));
      if (needs(b)) acc(b, grad_of(out).cwiseProduct(value(a)));
    });
    return out;
  }

  Var scale(Var a, T s) {
    Var out = push(value(a) * s, needs(a));
    on_back(out, [this, a, s, out] { acc(a, grad_of(out) * s); });
    return out;
  }

  Var tanh(Var a) {
    Var out = push(value(a).array().tanh().matrix(), needs(a));
    on_back(out, [this, a, out] {
      const Mat& y = value(out);
      acc(a, (grad_of(out).array() * (T(1) - y.array().square())).matrix());
    });
    return out;
  }

  Var sigmoid(Var a) {
    Var out = push(sigmoid_of(value(a)), needs(a));
    on_back(out, [this, a, out] {
      const Mat& y = value(out);
      acc(a, (grad_of(out).array() * y.array() * (T(1) - y.array())).matrix());
    });
    return out;
  }

  Var relu(Var a) {
    Var out = push(value(a).cwiseMax(T(0)), needs(a));
    on_back(out, [this, a, out] {
      acc(a, (value(a).array() > T(0)).select(grad_of(out).array(), T(0)).matrix());
    });
    return out;
  }

  // Inverted dropout; the mask is drawn from `rng` at record time.
  Var dropout(Var a, double p, Rng& rng) {
    if (p <= 0.0) return a;
    std::bernoulli_distribution keep(1.0 - p);
    Mat mask(rows(a), cols(a));
    const T s = T(1.0 / (1.0 - p));
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : T(0);
    Var m = constant(std::move(mask));
    return hadamard(a, m);
  }

  // ---- structural ---------------------------------------------------------------

  // Rows of `table` selected by `idx`; the backward pass scatters into the
  // selected rows only.
  Var gather_rows(Var table, std::vector<int> idx) {
    Mat y(static_cast<Eigen::Index>(idx.size()), cols(table));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0 || idx[r] >= rows(table)) throw IndexError("gather_rows: index out of range");
      y.row(static_cast<Eigen::Index>(r)) = value(table).row(idx[r]);
    }
    Var out = push(std::move(y), needs(table));
    on_back(out, [this, table, idx = std::move(idx), out] {
      Mat& g = grad_ref(table);
      const Mat& go = grad_of(out);
      for (std::size_t r = 0; r < idx.size(); ++r) g.row(idx[r]) += go.row(static_cast<Eigen::Index>(r));
    });
    return out;
  }

  // Each column repeated k times in place: [a b] -> [a a b b] for k = 2.
  Var repeat_cols(Var a, int k) {
    if (k < 1) throw ShapeError("repeat_cols: k must be >= 1");
    const Eigen::Index n = cols(a);
    Mat y(rows(a), n * k);
    for (Eigen::Index j = 0; j < n; ++j) {
      for (int r = 0; r < k; ++r) y.col(j * k + r) = value(a).col(j);
    }
    Var out = push(std::move(y), needs(a));
    on_back(out, [this, a, k, n, out] {
      const Mat& go = grad_of(out);
      Mat g = Mat::Zero(rows(a), n);
      for (Eigen::Index j = 0; j < n; ++j) {
        for (int r = 0; r < k; ++r) g.col(j) += go.col(j * k + r);
      }
      acc(a, g);
    });
    return out;
  }

  Var concat_cols(Var a, Var b) {
    check(rows(a) == rows(b), "concat_cols rows");
    Mat y(rows(a), cols(a) + cols(b));
    y << value(a), value(b);
    Var out = push(std::move(y), any(a, b));
    on_back(out, [this, a, b, out] {
      const Mat& go = grad_of(out);
      if (needs(a)) acc(a, go.leftCols(cols(a)));
      if (needs(b)) acc(b, go.rightCols(cols(b)));
    });
    return out;
  }

  Var slice_rows(Var a, Eigen::Index start, Eigen::Index len) {
    check(start >= 0 && start + len <= rows(a), "slice_rows range");
    Var out = push(value(a).middleRows(start, len), needs(a));
    on_back(out, [this, a, start, len, out] { grad_ref(a).middleRows(start, len) += grad_of(out); });
    return out;
  }

  Var stack_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("stack_rows: nothing to stack");
    Eigen::Index total = 0;
    bool ng = false;
    for (Var p : parts) {
      check(cols(p) == cols(parts[0]), "stack_rows widths");
      total += rows(p);
      ng = ng || needs(p);
    }
    Mat y(total, cols(parts[0]));
    Eigen::Index r = 0;
    for (Var p : parts) {
      y.middleRows(r, rows(p)) = value(p);
      r += rows(p);
    }
    Var out = push(std::move(y), ng);
    on_back(out, [this, parts, out] {
      Eigen::Index r0 = 0;
      for (Var p : parts) {
        if (needs(p)) acc(p, grad_of(out).middleRows(r0, rows(p)));
        r0 += rows(p);
      }
    });
    return out;
  }

  // Places rows of each part at the given destination rows of an n-row
  // output; every destination row must be covered exactly once.
  Var scatter_rows(const std::vector<std::pair<Var, std::vector<int>>>& parts, Eigen::Index n,
                   Eigen::Index width) {
    Mat y = Mat::Zero(n, width);
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    bool ng = false;
    for (const auto& [v, dst] : parts) {
      check(static_cast<Eigen::Index>(dst.size()) == rows(v) && cols(v) == width,
            "scatter_rows part shape");
      for (std::size_t r = 0; r < dst.size(); ++r) {
        if (dst[r] < 0 || dst[r] >= n || seen[dst[r]]) throw ShapeError("scatter_rows: bad row map");
        seen[dst[r]] = 1;
        y.row(dst[r]) = value(v).row(static_cast<Eigen::Index>(r));
      }
      ng = ng || needs(v);
    }
    for (char s : seen) {
      if (!s) throw ShapeError("scatter_rows: uncovered row");
    }
    Var out = push(std::move(y), ng);
    on_back(out, [this, parts, out] {
      const Mat& go = grad_of(out);
      for (const auto& [v, dst] : parts) {
        if (!needs(v)) continue;
        Mat g(rows(v), cols(v));
        for (std::size_t r = 0; r < dst.size(); ++r) g.row(static_cast<Eigen::Index>(r)) = go.row(dst[r]);
        acc(v, g);
      }
    });
    return out;
  }

  // ---- fused layers ----------------------------------------------------------------

  Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5)) {
    const Eigen::Index n = rows(x), d = cols(x);
    check(cols(gain) == d && cols(bias) == d, "layer_norm affine width");
    Mat xhat(n, d);
    Vector<T> rstd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      T mu = value(x).row(i).mean();
      auto centered = value(x).row(i).array() - mu;
      T var = centered.square().mean();
      rstd(i) = T(1) / std::sqrt(var + eps);
      xhat.row(i) = (centered * rstd(i)).matrix();
    }
    Mat y = xhat;
    y.array().rowwise() *= value(gain).row(0).array();
    y.rowwise() += value(bias).row(0);
    Var out = push(std::move(y), any(x, gain) || needs(bias));
    on_back(out, [this, x, gain, bias, out, xhat = std::move(xhat), rstd = std::move(rstd), d] {
      const Mat& go = grad_of(out);
      if (needs(gain)) acc(gain, go.cwiseProduct(xhat).colwise().sum());
      if (needs(bias)) acc(bias, go.colwise().sum());
      if (needs(x)) {
        Mat dxhat = go;
        dxhat.array().rowwise() *= value(gain).row(0).array();
        Mat dx(rows(x), d);
        for (Eigen::Index i = 0; i < rows(x); ++i) {
          T m1 = dxhat.row(i).mean();
          T m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
          dx.row(i) = rstd(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2).matrix();
        }
        acc(x, dx);
      }
    });
    return out;
  }

  // Multi-head scaled dot-product attention on projected q, k, v (S x d).
  // key_mask[j] == 0 removes key j (logit -inf before the softmax).
  Var attention(Var q, Var k, Var v, int heads, std::span<const std::uint8_t> key_mask = {}) {
    const Eigen::Index s = rows(q), d = cols(q);
    check(rows(k) == s && rows(v) == s && cols(k) == d && cols(v) == d, "attention shapes");
    check(heads >= 1 && d % heads == 0, "attention heads divide width");
    check(key_mask.empty() || static_cast<Eigen::Index>(key_mask.size()) == s, "attention mask length");
    std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
    bool any_key = mask.empty();
    for (auto m : mask) any_key = any_key || m;
    if (!any_key) throw ContractError("attention: every key is masked");
    const Eigen::Index dh = d / heads;
    const T inv = T(1) / std::sqrt(static_cast<T>(dh));
    Mat out_val(s, d);
    std::vector<Mat> probs(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      auto qh = value(q).middleCols(h * dh, dh);
      auto kh = value(k).middleCols(h * dh, dh);
      auto vh = value(v).middleCols(h * dh, dh);
      Mat logits = (qh * kh.transpose()) * inv;
      if (!mask.empty()) {
        for (Eigen::Index j = 0; j < s; ++j) {
          if (!mask[j]) logits.col(j).setConstant(-std::numeric_limits<T>::infinity());
        }
      }
      Mat p = softmax_rows_of(logits);
      out_val.middleCols(h * dh, dh) = p * vh;
      probs[h] = std::move(p);
    }
    Var out = push(std::move(out_val), needs(q) || needs(k) || needs(v));
    on_back(out, [this, q, k, v, heads, dh, inv, out, probs = std::move(probs)] {
      const Mat& go = grad_of(out);
      const Eigen::Index s2 = rows(q), d2 = cols(q);
      Mat dq = Mat::Zero(s2, d2), dk = Mat::Zero(s2, d2), dv = Mat::Zero(s2, d2);
      for (int h = 0; h < heads; ++h) {
        const Mat& p = probs[h];
        auto goh = go.middleCols(h * dh, dh);
        Mat dp = goh * value(v).middleCols(h * dh, dh).transpose();
        dv.middleCols(h * dh, dh) = p.transpose() * goh;
        Vector<T> rowdot = (dp.cwiseProduct(p)).rowwise().sum();
        Mat ds = p.cwiseProduct(dp.colwise() - rowdot) * inv;
        dq.middleCols(h * dh, dh) = ds * value(k).middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh) = ds.transpose() * value(q).middleCols(h * dh, dh);
      }
      if (needs(q)) acc(q, dq);
      if (needs(k)) acc(k, dk);
      if (needs(v)) acc(v, dv);
    });
    return out;
  }

  // Mean over rows with mask[i] != 0; result is 1 x d.
  Var masked_mean_rows(Var x, std::span<const std::uint8_t> mask = {}) {
    const Eigen::Index n = rows(x);
    check(mask.empty() || static_cast<Eigen::Index>(mask.size()) == n, "masked_mean mask length");
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    if (m.empty()) m.assign(static_cast<std::size_t>(n), 1);
    Eigen::Index count = 0;
    Mat y = Mat::Zero(1, cols(x));
    for (Eigen::Index i = 0; i < n; ++i) {
      if (m[i]) {
        y += value(x).row(i);
        ++count;
      }
    }
    if (count == 0) throw ContractError("masked mean over an all-pad row");
    y /= static_cast<T>(count);
    Var out = push(std::move(y), needs(x));
    on_back(out, [this, x, m = std::move(m), count, out] {
      Mat& g = grad_ref(x);
      const T w = T(1) / static_cast<T>(count);
      for (Eigen::Index i = 0; i < rows(x); ++i) {
        if (m[i]) g.row(i) += grad_of(out).row(0) * w;
      }
    });
    return out;
  }

  Var softmax_rows(Var x) {
    Var out = push(softmax_rows_of(value(x)), needs(x));
    on_back(out, [this, x, out] {
      const Mat& p = value(out);
      const Mat& go = grad_of(out);
      Vector<T> rowdot = go.cwiseProduct(p).rowwise().sum();
      acc(x, p.cwiseProduct(go.colwise() - rowdot));
    });
    return out;
  }

  // Mean negative log-likelihood of `labels` under row distributions `probs`.
  // Probabilities below eps are clamped; `clamped` counts such rows.
  Var cross_entropy(Var probs, std::vector<int> labels, T eps, int* clamped = nullptr) {
    check(static_cast<Eigen::Index>(labels.size()) == rows(probs), "cross_entropy labels");
    const T inv_b = T(1) / static_cast<T>(labels.size());
    T total = 0;
    int n_clamped = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= cols(probs)) throw IndexError("cross_entropy: bad label");
      T p = value(probs)(static_cast<Eigen::Index>(i), labels[i]);
      if (p < eps) {
        p = eps;
        ++n_clamped;
      }
      total -= std::log(p);
    }
    if (clamped) *clamped += n_clamped;
    Mat y(1, 1);
    y(0, 0) = total * inv_b;
    Var out = push(std::move(y), needs(probs));
    on_back(out, [this, probs, labels = std::move(labels), inv_b, eps, out] {
      Mat g = Mat::Zero(rows(probs), cols(probs));
      const T go = grad_of(out)(0, 0);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        T p = value(probs)(static_cast<Eigen::Index>(i), labels[i]);
        if (p >= eps) g(static_cast<Eigen::Index>(i), labels[i]) = -go * inv_b / p;
      }
      acc(probs, g);
    });
    return out;
  }

  static Mat sigmoid_of(const Mat& a) {
    return a.unaryExpr([](T x) {
      if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
      T e = std::exp(x);
      return e / (T(1) + e);
    });
  }

  static Mat softmax_rows_of(const Mat& x) {
    Mat p(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      T m = x.row(i).maxCoeff();
      auto e = (x.row(i).array() - m).exp();
      p.row(i) = (e / e.sum()).matrix();
    }
    return p;
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    std::function<void()> back;
    Parameter<T>* param = nullptr;
  };

  Var push(Mat value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <class F>
  void on_back(Var out, F&& f) {
    if (nodes_[out.id].needs_grad) nodes_[out.id].back = std::forward<F>(f);
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  bool any(Var a, Var b) const { return needs(a) || needs(b); }
  const Mat& grad_of(Var v) const { return nodes_[v.id].grad; }

  Mat& grad_ref(Var v) {
    auto& n = nodes_[v.id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <class E>
  void acc(Var v, const E& g) {
    grad_ref(v) += g;
  }

  static void check(bool ok, const char* what) {
    if (!ok) throw ShapeError(std::string("shape mismatch: ") + what);
  }
  void check_same(Var a, Var b, const char* what) const {
    if (rows(a) != rows(b) || cols(a) != cols(b)) throw ShapeError(std::string("shape mismatch: ") + what);
  }

  std::vector<Node> nodes_;
  std::map<const Parameter<T>*, Var> bound_;
};

// Maps parameter names to tape nodes for one forward pass. With a mutable
// store the nodes are differentiable; with a const store they are constants.
template <class T>
class ParamBinder {
 public:
  using Var = typename Tape<T>::Var;

  ParamBinder(Tape<T>& tape, ParamStore<T>& store) : tape_(tape), store_(store), mutable_(&store) {}
  ParamBinder(Tape<T>& tape, const ParamStore<T>& store) : tape_(tape), store_(store) {}

  Var operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    Var v = mutable_ ? tape_.param(mutable_->at(name)) : tape_.param(store_.at(name));
    cache_.emplace(name, v);
    return v;
  }

  Tape<T>& tape() { return tape_; }
  const ParamStore<T>& store() const { return store_; }
  bool differentiable() const { return mutable_ != nullptr; }

 private:
  Tape<T>& tape_;
  const ParamStore<T>& store_;
  ParamStore<T>* mutable_ = nullptr;
  std::map<std::string, Var> cache_;
};

}  // namespace medfuse
