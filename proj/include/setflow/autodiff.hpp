#pragma once

// Reverse-mode automatic differentiation over the small operation set used by
// the SetFlow velocity network and the MIL classifier head.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "setflow/tensor.hpp"

namespace setflow {

struct Parameter {
  std::string name;
  Tensor value;
};

// Ordered, name-addressable collection of learnable tensors.
class ParamStore {
 public:
  Parameter& add(std::string name, Tensor value) {
    if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), std::move(value)});
    return params_.back();
  }

  std::size_t index(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) {
      throw Error("unknown parameter '" + std::string(name) + "'");
    }
    return it->second;
  }

  bool contains(std::string_view name) const {
    return index_.count(std::string(name)) != 0;
  }

  Parameter& operator[](std::string_view name) { return params_[index(name)]; }
  const Parameter& operator[](std::string_view name) const {
    return params_[index(name)];
  }

  Parameter& at(std::size_t i) { return params_.at(i); }
  const Parameter& at(std::size_t i) const { return params_.at(i); }

  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i) {
      if (a.params_[i].name != b.params_[i].name ||
          !(a.params_[i].value == b.params_[i].value)) {
        return false;
      }
    }
    return true;
  }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that never receives gradient.
  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  // Leaf that receives gradient.
  Var variable(Tensor value) { return push(std::move(value), true, {}); }

  // Leaf bound to a stored parameter; repeated lookups share one node so that
  // gradients from every use accumulate.
  Var param(const ParamStore& store, std::string_view name) {
    const std::size_t idx = store.index(name);
    const auto key = std::make_pair(static_cast<const void*>(&store), idx);
    if (auto it = bound_.find(key); it != bound_.end()) {
      return Var(this, it->second);
    }
    Var v = variable(store.at(idx).value);
    bound_.emplace(key, v.id());
    return v;
  }

  Var record(Tensor value, std::initializer_list<Var> parents, Backward fn) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.id()].requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : Backward{});
  }

  Var record(Tensor value, const std::vector<Var>& parents, Backward fn) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.id()].requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : Backward{});
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient accumulator of a parent node; only valid during backward().
  Tensor& grad_ref(std::size_t id) { return nodes_[id].grad; }

  std::size_t size() const { return nodes_.size(); }

  // Clears all accumulators, then walks nodes in reverse recording order.
  void backward(Var loss) {
    if (loss.value().size() != 1) {
      throw Error("backward: loss must be scalar, got shape " +
                  shape_str(loss.shape()));
    }
    for (auto& n : nodes_) {
      n.grad = n.requires_grad ? Tensor::zeros_like(n.value) : Tensor();
    }
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      if (nodes_[i].backward) nodes_[i].backward(*this, i);
    }
  }

  // Gradients for every parameter of `store`, zero for parameters that were
  // never touched by the recorded graph.
  std::vector<Tensor> param_grads(const ParamStore& store) const {
    std::vector<Tensor> out;
    out.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto it = bound_.find({static_cast<const void*>(&store), i});
      if (it == bound_.end() || nodes_[it->second].grad.empty()) {
        out.push_back(Tensor::zeros_like(store.at(i).value));
      } else {
        out.push_back(nodes_[it->second].grad);
      }
    }
    return out;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, bool requires_grad, Backward fn) {
    nodes_.push_back({std::move(value), Tensor(), std::move(fn), requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::map<std::pair<const void*, std::size_t>, std::size_t> bound_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using CMapVec = Eigen::Map<const Eigen::RowVectorXd>;
using MapVec = Eigen::Map<Eigen::RowVectorXd>;

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                " vs " + shape_str(b.shape()));
  }
}

inline void accumulate(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// out[i,j] = sum_k x[i,k] W[k,j] + b[j]; leading axes of x are flattened.
inline Var linear(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (wv.rank() != 2 || wv.dim(0) != xv.cols() || bv.rank() != 1 ||
      bv.size() != wv.dim(1)) {
    throw Error("linear: x " + shape_str(xv.shape()) + ", W " +
                shape_str(wv.shape()) + ", b " + shape_str(bv.shape()) +
                " are incompatible");
  }
  const std::size_t n = xv.rows(), din = wv.dim(0), dout = wv.dim(1);
  Shape out_shape = xv.shape();
  out_shape.back() = dout;
  Tensor out(out_shape);
  detail::MapMat o(out.data(), n, dout);
  o.noalias() = detail::CMapMat(xv.data(), n, din) * detail::CMapMat(wv.data(), din, dout);
  o.rowwise() += detail::CMapVec(bv.data(), dout);
  return x.tape().record(std::move(out), {x, w, b}, [x, w, b, n, din, dout](Tape& t, std::size_t self) {
    detail::CMapMat g(t.grad(self).data(), n, dout);
    if (t.requires_grad(x.id())) {
      detail::MapMat(t.grad_ref(x.id()).data(), n, din).noalias() +=
          g * detail::CMapMat(t.value(w.id()).data(), din, dout).transpose();
    }
    if (t.requires_grad(w.id())) {
      detail::MapMat(t.grad_ref(w.id()).data(), din, dout).noalias() +=
          detail::CMapMat(t.value(x.id()).data(), n, din).transpose() * g;
    }
    if (t.requires_grad(b.id())) {
      detail::MapVec(t.grad_ref(b.id()).data(), dout) += g.colwise().sum();
    }
  });
}

// Batched product a[B x n x k] * b[B x k x m], or a * b^T when b is [B x m x k].
inline Var batched_matmul(Var a, Var b, bool transpose_b = false) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) ||
      av.dim(2) != (transpose_b ? bv.dim(2) : bv.dim(1))) {
    throw Error("batched_matmul: " + shape_str(av.shape()) + " x " +
                shape_str(bv.shape()) + (transpose_b ? "^T" : "") +
                " are incompatible");
  }
  const std::size_t B = av.dim(0), n = av.dim(1), k = av.dim(2);
  const std::size_t m = transpose_b ? bv.dim(1) : bv.dim(2);
  Tensor out({B, n, m});
  for (std::size_t i = 0; i < B; ++i) {
    detail::CMapMat A(av.data() + i * n * k, n, k);
    detail::MapMat O(out.data() + i * n * m, n, m);
    if (transpose_b) {
      O.noalias() = A * detail::CMapMat(bv.data() + i * m * k, m, k).transpose();
    } else {
      O.noalias() = A * detail::CMapMat(bv.data() + i * k * m, k, m);
    }
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, B, n, k, m, transpose_b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(a.id());
    const Tensor& bv = t.value(b.id());
    const bool ga = t.requires_grad(a.id()), gb = t.requires_grad(b.id());
    for (std::size_t i = 0; i < B; ++i) {
      detail::CMapMat G(g.data() + i * n * m, n, m);
      if (transpose_b) {
        // O = A B^T, B is [m x k]
        detail::CMapMat Bm(bv.data() + i * m * k, m, k);
        if (ga) detail::MapMat(t.grad_ref(a.id()).data() + i * n * k, n, k).noalias() += G * Bm;
        if (gb) {
          detail::CMapMat A(av.data() + i * n * k, n, k);
          detail::MapMat(t.grad_ref(b.id()).data() + i * m * k, m, k).noalias() += G.transpose() * A;
        }
      } else {
        detail::CMapMat Bm(bv.data() + i * k * m, k, m);
        if (ga) detail::MapMat(t.grad_ref(a.id()).data() + i * n * k, n, k).noalias() += G * Bm.transpose();
        if (gb) {
          detail::CMapMat A(av.data() + i * n * k, n, k);
          detail::MapMat(t.grad_ref(b.id()).data() + i * k * m, k, m).noalias() += A.transpose() * G;
        }
      }
    }
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  detail::accumulate(out, b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a.id())) detail::accumulate(t.grad_ref(a.id()), g);
    if (t.requires_grad(b.id())) detail::accumulate(t.grad_ref(b.id()), g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a.id())) detail::accumulate(t.grad_ref(a.id()), g);
    if (t.requires_grad(b.id())) {
      Tensor& gb = t.grad_ref(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(a.id());
    const Tensor& bv = t.value(b.id());
    if (t.requires_grad(a.id())) {
      Tensor& ga = t.grad_ref(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b.id())) {
      Tensor& gb = t.grad_ref(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return a.tape().record(std::move(out), {a}, [a, s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_ref(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad_ref(a.id()).values()) v += g;
  });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [a](Tape& t, std::size_t self) {
    detail::accumulate(t.grad_ref(a.id()), t.grad(self));
  });
}

// Row lookup into an embedding table [V x d].
inline Var gather_rows(Var table, std::vector<std::size_t> indices) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw Error("gather_rows: table must be rank 2");
  const std::size_t V = tv.dim(0), d = tv.dim(1);
  Tensor out({indices.size(), d});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= V) {
      throw Error("gather_rows: index " + std::to_string(indices[r]) +
                  " out of range for table of " + std::to_string(V) + " rows");
    }
    std::copy_n(tv.data() + indices[r] * d, d, out.data() + r * d);
  }
  return table.tape().record(std::move(out), {table}, [table, idx = std::move(indices), d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gt = t.grad_ref(table.id());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < d; ++j) gt[idx[r] * d + j] += g[r * d + j];
    }
  });
}

// Inverse of gather_rows for distinct indices: row r of x lands in row
// indices[r] of a zero [n_rows x d] result.
inline Var scatter_rows(Var x, std::vector<std::size_t> indices, std::size_t n_rows) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.dim(0) != indices.size()) {
    throw Error("scatter_rows: " + shape_str(xv.shape()) + " vs " +
                std::to_string(indices.size()) + " indices");
  }
  const std::size_t d = xv.dim(1);
  Tensor out({n_rows, d});
  std::vector<std::uint8_t> seen(n_rows, 0);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= n_rows || seen[indices[r]]) {
      throw Error("scatter_rows: index " + std::to_string(indices[r]) + " out of range or repeated");
    }
    seen[indices[r]] = 1;
    std::copy_n(xv.data() + r * d, d, out.data() + indices[r] * d);
  }
  return x.tape().record(std::move(out), {x}, [x, idx = std::move(indices), d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_ref(x.id());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[idx[r] * d + j];
    }
  });
}

// Concatenation along the last axis; all parts share their leading shape.
inline Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_last: no inputs");
  const std::size_t rows = parts[0].value().rows();
  Shape shape = parts[0].shape();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    Shape lead = p.shape();
    lead.back() = shape.back();
    if (lead != shape) {
      throw Error("concat_last: leading shape mismatch " + shape_str(p.shape()) +
                  " vs " + shape_str(parts[0].shape()));
    }
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  shape.back() = total;
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      std::copy_n(parts[p].value().data() + r * widths[p], widths[p],
                  out.data() + r * total + off);
      off += widths[p];
    }
  }
  return parts[0].tape().record(std::move(out), parts, [parts, widths, rows, total](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      if (t.requires_grad(parts[p].id())) {
        Tensor& gp = t.grad_ref(parts[p].id());
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[p]; ++j) {
            gp[r * widths[p] + j] += g[r * total + off + j];
          }
        }
      }
      off += widths[p];
    }
  });
}

// Columns [begin, end) of the last axis.
inline Var slice_last(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  const std::size_t cols = av.cols(), rows = av.rows();
  if (begin >= end || end > cols) {
    throw Error("slice_last: range [" + std::to_string(begin) + "," +
                std::to_string(end) + ") invalid for width " + std::to_string(cols));
  }
  const std::size_t w = end - begin;
  Shape shape = av.shape();
  shape.back() = w;
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * cols + begin, w, out.data() + r * w);
  }
  return a.tape().record(std::move(out), {a}, [a, begin, w, cols, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_ref(a.id());
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) ga[r * cols + begin + j] += g[r * w + j];
    }
  });
}

// Repeats x[n x d] over a new leading batch axis of size B.
inline Var broadcast_batch(Var x, std::size_t B) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw Error("broadcast_batch: input must be rank 2");
  const std::size_t n = xv.size();
  Tensor out({B, xv.dim(0), xv.dim(1)});
  for (std::size_t b = 0; b < B; ++b) std::copy_n(xv.data(), n, out.data() + b * n);
  return x.tape().record(std::move(out), {x}, [x, B, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_ref(x.id());
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[b * n + i];
    }
  });
}

// Feature-wise modulation (1 + gamma) * h + beta, with gamma and beta packed
// side by side in the last axis of `gamma_beta`.
inline Var film(Var h, Var gamma_beta) {
  const Tensor& hv = h.value();
  const Tensor& gv = gamma_beta.value();
  const std::size_t rows = hv.rows(), d = hv.cols();
  if (gv.rows() != rows || gv.cols() != 2 * d) {
    throw Error("film: h " + shape_str(hv.shape()) + " vs gamma/beta " +
                shape_str(gv.shape()));
  }
  Tensor out(hv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      out[r * d + j] = (1.0 + gv[r * 2 * d + j]) * hv[r * d + j] + gv[r * 2 * d + d + j];
    }
  }
  return h.tape().record(std::move(out), {h, gamma_beta}, [h, gamma_beta, rows, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& hv = t.value(h.id());
    const Tensor& gv = t.value(gamma_beta.id());
    if (t.requires_grad(h.id())) {
      Tensor& gh = t.grad_ref(h.id());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j)
          gh[r * d + j] += g[r * d + j] * (1.0 + gv[r * 2 * d + j]);
    }
    if (t.requires_grad(gamma_beta.id())) {
      Tensor& gg = t.grad_ref(gamma_beta.id());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) {
          gg[r * 2 * d + j] += g[r * d + j] * hv[r * d + j];
          gg[r * 2 * d + d + j] += g[r * d + j];
        }
    }
  });
}

// Per-row normalization over the last axis (population variance), then
// affine by gamma/beta.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), d = xv.cols();
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw Error("layer_norm: affine size does not match width " + std::to_string(d));
  }
  if (!(eps > 0.0)) throw Error("layer_norm: eps must be positive");
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mean) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  return x.tape().record(std::move(out), {x, gamma, beta},
      [x, gamma, beta, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& gv = t.value(gamma.id());
    if (t.requires_grad(gamma.id()) || t.requires_grad(beta.id())) {
      const bool gg = t.requires_grad(gamma.id()), gb = t.requires_grad(beta.id());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) {
          if (gg) t.grad_ref(gamma.id())[j] += g[r * d + j] * xhat[r * d + j];
          if (gb) t.grad_ref(beta.id())[j] += g[r * d + j];
        }
    }
    if (!t.requires_grad(x.id())) return;
    Tensor& gx = t.grad_ref(x.id());
    std::vector<double> dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dxhat[j] = g[r * d + j] * gv[j];
        mean_d += dxhat[j];
        mean_dx += dxhat[j] * xhat[r * d + j];
      }
      mean_d /= static_cast<double>(d);
      mean_dx /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) {
        gx[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
      }
    }
  });
}

enum class Activation { Silu, Elu, Tanh, Sigmoid };

namespace detail {

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double act_value(Activation k, double x) {
  switch (k) {
    case Activation::Silu: return x * sigmoid(x);
    case Activation::Elu: return x > 0 ? x : std::expm1(x);
    case Activation::Tanh: return std::tanh(x);
    case Activation::Sigmoid: return sigmoid(x);
  }
  return 0.0;
}

inline double act_deriv(Activation k, double x, double y) {
  switch (k) {
    case Activation::Silu: {
      const double s = sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    }
    case Activation::Elu: return x > 0 ? 1.0 : y + 1.0;
    case Activation::Tanh: return 1.0 - y * y;
    case Activation::Sigmoid: return y * (1.0 - y);
  }
  return 0.0;
}

}  // namespace detail

inline Var activation(Var x, Activation kind) {
  Tensor out = x.value();
  for (double& v : out.values()) v = detail::act_value(kind, v);
  return x.tape().record(std::move(out), {x}, [x, kind](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(x.id());
    const Tensor& yv = t.value(self);
    Tensor& gx = t.grad_ref(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx[i] += g[i] * detail::act_deriv(kind, xv[i], yv[i]);
    }
  });
}

inline Var silu(Var x) { return activation(x, Activation::Silu); }
inline Var elu(Var x) { return activation(x, Activation::Elu); }

// Softmax over the last axis restricted to entries where mask != 0; masked
// entries come out exactly zero. `mask` has one flag per logit.
inline Var masked_softmax(Var logits, std::vector<std::uint8_t> mask) {
  const Tensor& lv = logits.value();
  if (mask.size() != lv.size()) {
    throw Error("masked_softmax: mask has " + std::to_string(mask.size()) +
                " entries for logits " + shape_str(lv.shape()));
  }
  const std::size_t rows = lv.rows(), m = lv.cols();
  Tensor out(lv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = lv.data() + r * m;
    const std::uint8_t* mk = mask.data() + r * m;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      if (mk[j]) mx = std::max(mx, in[j]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw Error("masked_softmax: row " + std::to_string(r) + " is fully masked");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (mk[j]) z += (out[r * m + j] = std::exp(in[j] - mx));
    }
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] /= z;
  }
  return logits.tape().record(std::move(out), {logits}, [logits, rows, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gl = t.grad_ref(logits.id());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += y[r * m + j] * g[r * m + j];
      for (std::size_t j = 0; j < m; ++j) {
        gl[r * m + j] += y[r * m + j] * (g[r * m + j] - dot);
      }
    }
  });
}

// Mean binary cross-entropy of logits against {0,1} targets, computed in the
// log-sum-exp stable form.
inline Var bce_with_logits(Var logits, std::vector<double> targets) {
  const Tensor& lv = logits.value();
  if (lv.size() != targets.size() || targets.empty()) {
    throw Error("bce_with_logits: " + std::to_string(lv.size()) + " logits vs " +
                std::to_string(targets.size()) + " targets");
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    const double z = lv[i];
    loss += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const double n = static_cast<double>(lv.size());
  return logits.tape().record(Tensor::scalar(loss / n), {logits}, [logits, tg = std::move(targets), n](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const Tensor& lv = t.value(logits.id());
    Tensor& gl = t.grad_ref(logits.id());
    for (std::size_t i = 0; i < lv.size(); ++i) {
      gl[i] += g * (detail::sigmoid(lv[i]) - tg[i]) / n;
    }
  });
}

}  // namespace setflow
