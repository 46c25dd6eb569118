#pragma once

// Dense tensors with tape-based reverse-mode differentiation. Everything the
// encoder/decoder model, the losses and the LMs need, nothing more: values are
// row-major, ops are recorded on an explicit Tape, backward replays the tape
// in reverse and accumulates into per-tensor gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnlab {

using real = double;

struct DimError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace detail

// Deterministic random source. All draws go through explicit conversions so
// that a fixed seed yields the same stream on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  // Derive an independent stream from (seed, a, b); used to key shuffles,
  // dropout masks and layer growth off (run seed, epoch, index) so resumed
  // runs see the same streams as uninterrupted ones.
  static Rng derive(uint64_t seed, uint64_t a, uint64_t b = 0) {
    uint64_t k = detail::splitmix64(seed ^ detail::splitmix64(a ^ detail::splitmix64(b + 0x2545f4914f6cdd1dull)));
    return Rng(k);
  }

  uint64_t next() { return eng_(); }

  // uniform in [0,1) with 53 random bits
  real uniform() { return static_cast<real>(eng_() >> 11) * 0x1.0p-53; }

  real uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

  real normal() {
    real u1 = uniform();
    real u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  size_t index(size_t n) { return n == 0 ? 0 : static_cast<size_t>(eng_() % n); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

 private:
  std::mt19937_64 eng_;
};

struct TensorNode {
  std::vector<size_t> shape;
  std::vector<real> value;
  std::vector<real> grad;  // lazily sized; empty means all-zero
  std::vector<real> adj;   // per-backward-call adjoint, cleared after each call
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<size_t> shape) {
    Tensor t;
    t.n_ = std::make_shared<TensorNode>();
    size_t n = 1;
    for (size_t e : shape) {
      if (e == 0) throw DimError("tensor extents must be positive");
      n *= e;
    }
    t.n_->shape = std::move(shape);
    t.n_->value.assign(n, 0.0);
    return t;
  }

  static Tensor from(std::vector<size_t> shape, std::vector<real> data) {
    Tensor t = zeros(shape);
    if (data.size() != t.numel()) throw DimError("data length does not match shape");
    t.n_->value = std::move(data);
    return t;
  }

  static Tensor scalar(real v) { return from({1}, {v}); }

  // uniform in +-sqrt(6/(rows+cols))
  static Tensor glorot(size_t rows, size_t cols, Rng& rng) {
    Tensor t = zeros({rows, cols});
    real s = std::sqrt(6.0 / static_cast<real>(rows + cols));
    for (real& v : t.n_->value) v = rng.uniform(-s, s);
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const std::vector<size_t>& shape() const { return n_->shape; }
  size_t rank() const { return n_->shape.size(); }
  size_t dim(size_t i) const { return n_->shape.at(i); }
  size_t numel() const { return n_->value.size(); }
  size_t rows() const { return check_rank2_(), n_->shape[0]; }
  size_t cols() const { return check_rank2_(), n_->shape[1]; }

  std::vector<real>& value() { return n_->value; }
  const std::vector<real>& value() const { return n_->value; }

  real item() const {
    if (numel() != 1) throw DimError("item() requires a single-element tensor");
    return n_->value[0];
  }

  real& at(size_t i) { return n_->value.at(i); }
  real at(size_t i) const { return n_->value.at(i); }
  real& at(size_t r, size_t c) { return n_->value.at(r * cols() + c); }
  real at(size_t r, size_t c) const { return n_->value.at(r * cols() + c); }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool b = true) {
    n_->requires_grad = b;
    return *this;
  }

  // gradient accumulator, allocated as zeros on first access
  std::vector<real>& grad() {
    if (n_->grad.empty()) n_->grad.assign(numel(), 0.0);
    return n_->grad;
  }
  void zero_grad() { n_->grad.assign(numel(), 0.0); }

  TensorNode* node() const { return n_.get(); }
  const std::shared_ptr<TensorNode>& ptr() const { return n_; }

 private:
  void check_rank2_() const {
    if (n_->shape.size() != 2) throw DimError("expected a rank-2 tensor");
  }
  std::shared_ptr<TensorNode> n_;
};

// Ordered record of executed ops. Rules are appended in execution order, so
// replaying them back-to-front is a reverse topological sweep.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  size_t size() const { return rules_.size(); }

  void record(std::vector<std::shared_ptr<TensorNode>> nodes, std::function<void()> rule) {
    if (!recording_) return;
    for (auto& n : nodes) touched_.push_back(n);
    rules_.push_back(std::move(rule));
  }

  // Seeds d(loss)=1 and sweeps the tape in reverse. Adjoints live in
  // per-node scratch cleared afterwards, so a second call without a grad
  // reset adds the same gradients again (exact doubling).
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw DimError("backward requires a scalar loss");
    adj(loss.node())[0] += 1.0;
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
    commit_(loss.node());
    for (auto& n : touched_) commit_(n.get());
  }

  static std::vector<real>& adj(TensorNode* n) {
    if (n->adj.empty()) n->adj.assign(n->value.size(), 0.0);
    return n->adj;
  }

 private:
  void commit_(TensorNode* n) {
    if (n->adj.empty()) return;
    if (n->requires_grad) {
      if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
      for (size_t i = 0; i < n->adj.size(); ++i) n->grad[i] += n->adj[i];
    }
    n->adj.clear();  // duplicates in touched_ then contribute nothing
  }

  bool recording_;
  std::vector<std::function<void()>> rules_;
  std::vector<std::shared_ptr<TensorNode>> touched_;
};

inline void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) throw DimError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] + b.value()[i];
  t.record({a.ptr(), b.ptr(), out.ptr()}, [a = a.ptr(), b = b.ptr(), o = out.ptr()] {
    auto& go = Tape::adj(o.get());
    auto& ga = Tape::adj(a.get());
    auto& gb = Tape::adj(b.get());
    for (size_t i = 0; i < go.size(); ++i) {
      ga[i] += go[i];
      gb[i] += go[i];
    }
  });
  return out;
}

inline Tensor sub(Tape& t, const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] - b.value()[i];
  t.record({a.ptr(), b.ptr(), out.ptr()}, [a = a.ptr(), b = b.ptr(), o = out.ptr()] {
    auto& go = Tape::adj(o.get());
    auto& ga = Tape::adj(a.get());
    auto& gb = Tape::adj(b.get());
    for (size_t i = 0; i < go.size(); ++i) {
      ga[i] += go[i];
      gb[i] -= go[i];
    }
  });
  return out;
}

inline Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] * b.value()[i];
  t.record({a.ptr(), b.ptr(), out.ptr()}, [a = a.ptr(), b = b.ptr(), o = out.ptr()] {
    auto& go = Tape::adj(o.get());
    auto& ga = Tape::adj(a.get());
    auto& gb = Tape::adj(b.get());
    for (size_t i = 0; i < go.size(); ++i) {
      ga[i] += go[i] * b->value[i];
      gb[i] += go[i] * a->value[i];
    }
  });
  return out;
}

inline Tensor scale(Tape& t, const Tensor& a, real c) {
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out.value()[i] = c * a.value()[i];
  t.record({a.ptr(), out.ptr()}, [a = a.ptr(), o = out.ptr(), c] {
    auto& go = Tape::adj(o.get());
    auto& ga = Tape::adj(a.get());
    for (size_t i = 0; i < go.size(); ++i) ga[i] += c * go[i];
  });
  return out;
}

inline Tensor tanh(Tape& t, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out.value()[i] = std::tanh(a.value()[i]);
  t.record({a.ptr(), out.ptr()}, [a = a.ptr(), o = out.ptr()] {
    auto& go = Tape::adj(o.get());
    auto& ga = Tape::adj(a.get());
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (1.0 - o->value[i] * o->value[i]);
  });
  return out;
}

inline Tensor sigmoid(Tape& t, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out.value()[i] = 1.0 / (1.0 + std::exp(-a.value()[i]));
  t.record({a.ptr(), out.ptr()}, [a = a.ptr(), o = out.ptr()] {
    auto& go = Tape::adj(o.get());
    auto& ga = Tape::adj(a.get());
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * o->value[i] * (1.0 - o->value[i]);
  });
  return out;
}

constexpr real kLogFloor = 1e-300;

// log with a floor; below the floor the output is flat, so no gradient flows
inline Tensor log(Tape& t, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out.value()[i] = std::log(std::max(a.value()[i], kLogFloor));
  t.record({a.ptr(), out.ptr()}, [a = a.ptr(), o = out.ptr()] {
    auto& go = Tape::adj(o.get());
    auto& ga = Tape::adj(a.get());
    for (size_t i = 0; i < go.size(); ++i)
      if (a->value[i] > kLogFloor) ga[i] += go[i] / a->value[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra

inline Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimError("matmul: rank-2 operands required");
  if (a.cols() != b.rows()) throw DimError("matmul: inner extents differ");
  size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) {
      real acc = 0.0;
      for (size_t x = 0; x < k; ++x) acc += a.at(i, x) * b.at(x, j);
      out.at(i, j) = acc;
    }
  t.record({a.ptr(), b.ptr(), out.ptr()}, [a = a.ptr(), b = b.ptr(), o = out.ptr(), m, k, n] {
    auto& go = Tape::adj(o.get());
    auto& ga = Tape::adj(a.get());
    auto& gb = Tape::adj(b.get());
    for (size_t i = 0; i < m; ++i)
      for (size_t x = 0; x < k; ++x) {
        real acc = 0.0;
        for (size_t j = 0; j < n; ++j) acc += go[i * n + j] * b->value[x * n + j];
        ga[i * k + x] += acc;
      }
    for (size_t x = 0; x < k; ++x)
      for (size_t j = 0; j < n; ++j) {
        real acc = 0.0;
        for (size_t i = 0; i < m; ++i) acc += a->value[i * k + x] * go[i * n + j];
        gb[x * n + j] += acc;
      }
  });
  return out;
}

inline Tensor matvec(Tape& t, const Tensor& a, const Tensor& x) {
  if (a.rank() != 2 || x.rank() != 1) throw DimError("matvec: need matrix and vector");
  if (a.cols() != x.numel()) throw DimError("matvec: inner extents differ");
  size_t m = a.rows(), k = a.cols();
  Tensor out = Tensor::zeros({m});
  for (size_t i = 0; i < m; ++i) {
    real acc = 0.0;
    for (size_t j = 0; j < k; ++j) acc += a.at(i, j) * x.at(j);
    out.at(i) = acc;
  }
  t.record({a.ptr(), x.ptr(), out.ptr()}, [a = a.ptr(), x = x.ptr(), o = out.ptr(), m, k] {
    auto& go = Tape::adj(o.get());
    auto& ga = Tape::adj(a.get());
    auto& gx = Tape::adj(x.get());
    for (size_t i = 0; i < m; ++i) {
      real g = go[i];
      if (g == 0.0) continue;
      for (size_t j = 0; j < k; ++j) {
        ga[i * k + j] += g * x->value[j];
        gx[j] += g * a->value[i * k + j];
      }
    }
  });
  return out;
}

// xT A for a row vector x: out_j = sum_i x_i A_ij
inline Tensor vecmat(Tape& t, const Tensor& x, const Tensor& a) {
  if (a.rank() != 2 || x.rank() != 1) throw DimError("vecmat: need vector and matrix");
  if (a.rows() != x.numel()) throw DimError("vecmat: inner extents differ");
  size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros({n});
  for (size_t j = 0; j < n; ++j) {
    real acc = 0.0;
    for (size_t i = 0; i < m; ++i) acc += x.at(i) * a.at(i, j);
    out.at(j) = acc;
  }
  t.record({a.ptr(), x.ptr(), out.ptr()}, [a = a.ptr(), x = x.ptr(), o = out.ptr(), m, n] {
    auto& go = Tape::adj(o.get());
    auto& ga = Tape::adj(a.get());
    auto& gx = Tape::adj(x.get());
    for (size_t i = 0; i < m; ++i) {
      real acc = 0.0;
      for (size_t j = 0; j < n; ++j) {
        acc += a->value[i * n + j] * go[j];
        ga[i * n + j] += x->value[i] * go[j];
      }
      gx[i] += acc;
    }
  });
  return out;
}

inline Tensor dot(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1 || a.numel() != b.numel()) throw DimError("dot: vectors of equal length required");
  real acc = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) acc += a.value()[i] * b.value()[i];
  Tensor out = Tensor::scalar(acc);
  t.record({a.ptr(), b.ptr(), out.ptr()}, [a = a.ptr(), b = b.ptr(), o = out.ptr()] {
    real g = Tape::adj(o.get())[0];
    if (g == 0.0) return;
    auto& ga = Tape::adj(a.get());
    auto& gb = Tape::adj(b.get());
    for (size_t i = 0; i < ga.size(); ++i) {
      ga[i] += g * b->value[i];
      gb[i] += g * a->value[i];
    }
  });
  return out;
}

inline Tensor sum(Tape& t, const Tensor& a) {
  real acc = 0.0;
  for (real v : a.value()) acc += v;
  Tensor out = Tensor::scalar(acc);
  t.record({a.ptr(), out.ptr()}, [a = a.ptr(), o = out.ptr()] {
    real g = Tape::adj(o.get())[0];
    if (g == 0.0) return;
    auto& ga = Tape::adj(a.get());
    for (real& v : ga) v += g;
  });
  return out;
}

// ---------------------------------------------------------------------------
// structure ops

inline Tensor concat(Tape& t, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimError("concat: no parts");
  size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 1) throw DimError("concat: rank-1 parts required");
    total += p.numel();
  }
  Tensor out = Tensor::zeros({total});
  size_t off = 0;
  std::vector<std::shared_ptr<TensorNode>> nodes;
  for (const Tensor& p : parts) {
    std::copy(p.value().begin(), p.value().end(), out.value().begin() + off);
    off += p.numel();
    nodes.push_back(p.ptr());
  }
  auto srcs = nodes;
  nodes.push_back(out.ptr());
  t.record(nodes, [srcs, o = out.ptr()] {
    auto& go = Tape::adj(o.get());
    size_t off = 0;
    for (auto& s : srcs) {
      auto& gs = Tape::adj(s.get());
      for (size_t i = 0; i < gs.size(); ++i) gs[i] += go[off + i];
      off += gs.size();
    }
  });
  return out;
}

inline Tensor slice(Tape& t, const Tensor& a, size_t offset, size_t len) {
  if (a.rank() != 1) throw DimError("slice: rank-1 input required");
  if (offset + len > a.numel()) throw DimError("slice: out of range");
  Tensor out = Tensor::zeros({len});
  std::copy(a.value().begin() + offset, a.value().begin() + offset + len, out.value().begin());
  t.record({a.ptr(), out.ptr()}, [a = a.ptr(), o = out.ptr(), offset, len] {
    auto& go = Tape::adj(o.get());
    auto& ga = Tape::adj(a.get());
    for (size_t i = 0; i < len; ++i) ga[offset + i] += go[i];
  });
  return out;
}

inline Tensor row(Tape& t, const Tensor& m, size_t r) {
  if (m.rank() != 2) throw DimError("row: rank-2 input required");
  if (r >= m.rows()) throw DimError("row: index out of range");
  size_t c = m.cols();
  Tensor out = Tensor::zeros({c});
  std::copy(m.value().begin() + r * c, m.value().begin() + (r + 1) * c, out.value().begin());
  t.record({m.ptr(), out.ptr()}, [m = m.ptr(), o = out.ptr(), r, c] {
    auto& go = Tape::adj(o.get());
    auto& gm = Tape::adj(m.get());
    for (size_t i = 0; i < c; ++i) gm[r * c + i] += go[i];
  });
  return out;
}

inline Tensor entry(Tape& t, const Tensor& m, size_t r, size_t c) {
  if (m.rank() != 2) throw DimError("entry: rank-2 input required");
  if (r >= m.rows() || c >= m.cols()) throw DimError("entry: index out of range");
  size_t cols = m.cols();
  Tensor out = Tensor::scalar(m.at(r, c));
  t.record({m.ptr(), out.ptr()}, [m = m.ptr(), o = out.ptr(), r, c, cols] {
    Tape::adj(m.get())[r * cols + c] += Tape::adj(o.get())[0];
  });
  return out;
}

inline Tensor stack_rows(Tape& t, const std::vector<Tensor>& rows) {
  if (rows.empty()) throw DimError("stack_rows: no rows");
  size_t c = rows[0].numel();
  for (const Tensor& r : rows)
    if (r.rank() != 1 || r.numel() != c) throw DimError("stack_rows: rows must be equal-length vectors");
  Tensor out = Tensor::zeros({rows.size(), c});
  std::vector<std::shared_ptr<TensorNode>> nodes;
  for (size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].value().begin(), rows[i].value().end(), out.value().begin() + i * c);
    nodes.push_back(rows[i].ptr());
  }
  auto srcs = nodes;
  nodes.push_back(out.ptr());
  t.record(nodes, [srcs, o = out.ptr(), c] {
    auto& go = Tape::adj(o.get());
    for (size_t i = 0; i < srcs.size(); ++i) {
      auto& gs = Tape::adj(srcs[i].get());
      for (size_t j = 0; j < c; ++j) gs[j] += go[i * c + j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// nonlinear reductions

// probability vector via max-subtraction; the normalizer is accumulated in
// 64-bit as are all internal sums
inline Tensor softmax(Tape& t, const Tensor& x) {
  if (x.rank() != 1 || x.numel() == 0) throw DimError("softmax: non-empty vector required");
  real mx = *std::max_element(x.value().begin(), x.value().end());
  Tensor out = Tensor::zeros(x.shape());
  real z = 0.0;
  for (size_t i = 0; i < x.numel(); ++i) {
    out.value()[i] = std::exp(x.value()[i] - mx);
    z += out.value()[i];
  }
  for (real& v : out.value()) v /= z;
  t.record({x.ptr(), out.ptr()}, [x = x.ptr(), o = out.ptr()] {
    auto& go = Tape::adj(o.get());
    auto& gx = Tape::adj(x.get());
    real s = 0.0;
    for (size_t i = 0; i < go.size(); ++i) s += go[i] * o->value[i];
    for (size_t i = 0; i < go.size(); ++i) gx[i] += o->value[i] * (go[i] - s);
  });
  return out;
}

// log(sum(exp(parts))) over scalars, max-subtracted
inline Tensor logaddexp(Tape& t, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimError("logaddexp: no parts");
  real mx = -std::numeric_limits<real>::infinity();
  for (const Tensor& p : parts) mx = std::max(mx, p.item());
  real z = 0.0;
  for (const Tensor& p : parts) z += std::exp(p.item() - mx);
  Tensor out = Tensor::scalar(mx + std::log(z));
  std::vector<std::shared_ptr<TensorNode>> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.ptr());
  auto srcs = nodes;
  nodes.push_back(out.ptr());
  t.record(nodes, [srcs, o = out.ptr()] {
    real g = Tape::adj(o.get())[0];
    if (g == 0.0) return;
    for (auto& s : srcs) Tape::adj(s.get())[0] += g * std::exp(s->value[0] - o->value[0]);
  });
  return out;
}

// Output row j = columnwise max over input rows [j*factor, min((j+1)*factor, T)).
// Backward routes the gradient to the argmax row; ties go to the lowest index.
inline Tensor max_pool_time(Tape& t, const Tensor& x, size_t factor) {
  if (x.rank() != 2) throw DimError("max_pool_time: rank-2 input required");
  if (factor < 1) throw DimError("max_pool_time: factor must be >= 1");
  size_t T = x.rows(), d = x.cols();
  size_t To = (T + factor - 1) / factor;
  Tensor out = Tensor::zeros({To, d});
  auto arg = std::make_shared<std::vector<size_t>>(To * d);
  for (size_t j = 0; j < To; ++j) {
    size_t lo = j * factor, hi = std::min((j + 1) * factor, T);
    for (size_t c = 0; c < d; ++c) {
      size_t best = lo;
      real bv = x.at(lo, c);
      for (size_t r = lo + 1; r < hi; ++r)
        if (x.at(r, c) > bv) {
          bv = x.at(r, c);
          best = r;
        }
      out.at(j, c) = bv;
      (*arg)[j * d + c] = best;
    }
  }
  t.record({x.ptr(), out.ptr()}, [x = x.ptr(), o = out.ptr(), arg, d] {
    auto& go = Tape::adj(o.get());
    auto& gx = Tape::adj(x.get());
    for (size_t i = 0; i < go.size(); ++i) gx[(*arg)[i] * d + (i % d)] += go[i];
  });
  return out;
}

// max over adjacent pairs; ties keep the lower index
inline Tensor maxout(Tape& t, const Tensor& x) {
  if (x.rank() != 1 || x.numel() % 2 != 0) throw DimError("maxout: even-length vector required");
  size_t g = x.numel() / 2;
  Tensor out = Tensor::zeros({g});
  auto arg = std::make_shared<std::vector<size_t>>(g);
  for (size_t j = 0; j < g; ++j) {
    size_t best = x.at(2 * j + 1) > x.at(2 * j) ? 2 * j + 1 : 2 * j;
    (*arg)[j] = best;
    out.at(j) = x.at(best);
  }
  t.record({x.ptr(), out.ptr()}, [x = x.ptr(), o = out.ptr(), arg] {
    auto& go = Tape::adj(o.get());
    auto& gx = Tape::adj(x.get());
    for (size_t j = 0; j < go.size(); ++j) gx[(*arg)[j]] += go[j];
  });
  return out;
}

// Inverted dropout: kept entries are scaled by 1/(1-rate). Identity when
// rate <= 0. The mask is drawn from the supplied stream.
inline Tensor dropout(Tape& t, const Tensor& x, real rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw DimError("dropout: rate must be < 1");
  Tensor out = Tensor::zeros(x.shape());
  auto mask = std::make_shared<std::vector<real>>(x.numel());
  real keep = 1.0 - rate;
  for (size_t i = 0; i < x.numel(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    out.value()[i] = x.value()[i] * (*mask)[i];
  }
  t.record({x.ptr(), out.ptr()}, [x = x.ptr(), o = out.ptr(), mask] {
    auto& go = Tape::adj(o.get());
    auto& gx = Tape::adj(x.get());
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (*mask)[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// recurrent cells

// Standard LSTM cell without peepholes. Gate order in the packed weight is
// [input, forget, candidate, output]; w is 4u x (in + u), b is 4u.
struct LstmWeights {
  Tensor w;
  Tensor b;

  size_t units() const { return b.numel() / 4; }
  size_t input_dim() const { return w.cols() - units(); }

  static LstmWeights init(size_t input_dim, size_t units, Rng& rng, real forget_bias = 1.0) {
    LstmWeights lw;
    lw.w = Tensor::glorot(4 * units, input_dim + units, rng);
    lw.b = Tensor::zeros({4 * units});
    for (size_t i = units; i < 2 * units; ++i) lw.b.at(i) = forget_bias;
    return lw;
  }
};

struct LstmOut {
  Tensor h;
  Tensor c;
};

inline LstmOut lstm_step(Tape& t, const Tensor& x, const Tensor& h_prev, const Tensor& c_prev,
                         const LstmWeights& w) {
  size_t u = h_prev.numel();
  if (c_prev.numel() != u) throw DimError("lstm_step: h/c extent mismatch");
  if (w.b.numel() != 4 * u || w.w.rows() != 4 * u || w.w.cols() != x.numel() + u)
    throw DimError("lstm_step: weight shapes inconsistent with inputs");
  Tensor z = add(t, matvec(t, w.w, concat(t, {x, h_prev})), w.b);
  Tensor gi = sigmoid(t, slice(t, z, 0, u));
  Tensor gf = sigmoid(t, slice(t, z, u, u));
  Tensor gc = tanh(t, slice(t, z, 2 * u, u));
  Tensor go = sigmoid(t, slice(t, z, 3 * u, u));
  Tensor c = add(t, mul(t, gf, c_prev), mul(t, gi, gc));
  Tensor h = mul(t, go, tanh(t, c));
  return {h, c};
}

// Left-to-right and right-to-left passes with zero initial states, outputs
// concatenated per frame: T x d -> T x 2u.
inline Tensor bilstm_layer(Tape& t, const Tensor& seq, const LstmWeights& fwd, const LstmWeights& bwd) {
  if (seq.rank() != 2) throw DimError("bilstm_layer: rank-2 input required");
  size_t T = seq.rows();
  size_t u = fwd.units();
  if (bwd.units() != u) throw DimError("bilstm_layer: direction width mismatch");
  std::vector<Tensor> hf(T), hb(T);
  Tensor h = Tensor::zeros({u}), c = Tensor::zeros({u});
  for (size_t i = 0; i < T; ++i) {
    LstmOut o = lstm_step(t, row(t, seq, i), h, c, fwd);
    h = o.h;
    c = o.c;
    hf[i] = o.h;
  }
  h = Tensor::zeros({u});
  c = Tensor::zeros({u});
  for (size_t i = T; i-- > 0;) {
    LstmOut o = lstm_step(t, row(t, seq, i), h, c, bwd);
    h = o.h;
    c = o.c;
    hb[i] = o.h;
  }
  std::vector<Tensor> rows(T);
  for (size_t i = 0; i < T; ++i) rows[i] = concat(t, {hf[i], hb[i]});
  return stack_rows(t, rows);
}

// ---------------------------------------------------------------------------
// finite-difference harness

// Central differences per coordinate against the tape gradient; returns the
// max of |g_a - g_n| / max(|g_a|, |g_n|, 1e-8) over all coordinates.
inline real grad_check(const std::function<Tensor(Tape&)>& f, const std::vector<Tensor>& params,
                       real eps = 1e-3) {
  for (Tensor p : params) {
    p.set_requires_grad();
    p.zero_grad();
  }
  Tape tape;
  Tensor loss = f(tape);
  tape.backward(loss);
  std::vector<std::vector<real>> analytic;
  for (const Tensor& p : params) analytic.push_back(const_cast<Tensor&>(p).grad());

  real worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    for (size_t i = 0; i < p.numel(); ++i) {
      real saved = p.value()[i];
      p.value()[i] = saved + eps;
      Tape t1(false);
      real f1 = f(t1).item();
      p.value()[i] = saved - eps;
      Tape t2(false);
      real f2 = f(t2).item();
      p.value()[i] = saved;
      real gn = (f1 - f2) / (2.0 * eps);
      real ga = analytic[pi][i];
      real rel = std::abs(ga - gn) / std::max({std::abs(ga), std::abs(gn), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace attnlab
