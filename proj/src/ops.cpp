#include "vermouth/ops.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace vermouth {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using CVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <typename T>
void accumulate(Node<T>& parent, const Tensor<T>& g) {
  auto& buf = parent.grad_buffer();
  VecMap<T>(buf.raw(), buf.numel()) += CVecMap<T>(g.raw(), g.numel());
}

// Reductions run in index order so results never depend on buffer alignment.
template <typename T>
T seq_sum(const T* p, std::int64_t n, std::int64_t stride = 1) {
  T acc = 0;
  for (std::int64_t i = 0; i < n; ++i) acc += p[i * stride];
  return acc;
}

template <typename T>
T seq_dot(const T* a, const T* b, std::int64_t n) {
  T acc = 0;
  for (std::int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::int64_t trailing(const Shape& s, std::size_t from) {
  std::int64_t n = 1;
  for (std::size_t i = from; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace

template <typename T>
void Var<T>::backward() {
  if (!node_) throw std::logic_error("backward on undefined Var");
  if (!node_->requires_grad) return;
  // Iterative post-order DFS for a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  auto& root = node_->grad_buffer();
  Tensor<T> ones(node_->value.shape(), T(1));
  VecMap<T>(root.raw(), root.numel()) += CVecMap<T>(ones.raw(), ones.numel());
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.shape() == n->value.shape()) n->backward_fn(*n);
  }
}

namespace ops {

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out(a.shape());
  VecMap<T>(out.raw(), out.numel()) =
      CVecMap<T>(a.value().raw(), out.numel()) + CVecMap<T>(b.value().raw(), out.numel());
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (wants(self, 0)) accumulate(*self.parents[0], self.grad);
    if (wants(self, 1)) accumulate(*self.parents[1], self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out(a.shape());
  VecMap<T>(out.raw(), out.numel()) =
      CVecMap<T>(a.value().raw(), out.numel()) - CVecMap<T>(b.value().raw(), out.numel());
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (wants(self, 0)) accumulate(*self.parents[0], self.grad);
    if (wants(self, 1)) {
      auto& buf = self.parents[1]->grad_buffer();
      VecMap<T>(buf.raw(), buf.numel()) -= CVecMap<T>(self.grad.raw(), buf.numel());
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  const auto n = a.value().numel();
  Tensor<T> out(a.shape());
  VecMap<T>(out.raw(), n) = CVecMap<T>(a.value().raw(), n).cwiseProduct(CVecMap<T>(b.value().raw(), n));
  return make_op<T>(std::move(out), {a, b}, [n](Node<T>& self) {
    CVecMap<T> g(self.grad.raw(), n);
    if (wants(self, 0)) {
      auto& buf = self.parents[0]->grad_buffer();
      VecMap<T>(buf.raw(), n) += g.cwiseProduct(CVecMap<T>(self.parents[1]->value.raw(), n));
    }
    if (wants(self, 1)) {
      auto& buf = self.parents[1]->grad_buffer();
      VecMap<T>(buf.raw(), n) += g.cwiseProduct(CVecMap<T>(self.parents[0]->value.raw(), n));
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  const auto n = a.value().numel();
  Tensor<T> out(a.shape());
  VecMap<T>(out.raw(), n) = CVecMap<T>(a.value().raw(), n) * s;
  return make_op<T>(std::move(out), {a}, [n, s](Node<T>& self) {
    auto& buf = self.parents[0]->grad_buffer();
    VecMap<T>(buf.raw(), n) += CVecMap<T>(self.grad.raw(), n) * s;
  });
}

template <typename T>
Var<T> sum_of(const std::vector<Var<T>>& xs) {
  require(!xs.empty(), "sum_of: no inputs");
  const auto n = xs[0].value().numel();
  Tensor<T> out(xs[0].shape());
  for (const auto& x : xs) {
    require_same_shape(out, x.value(), "sum_of");
    VecMap<T>(out.raw(), n) += CVecMap<T>(x.value().raw(), n);
  }
  return make_op<T>(std::move(out), xs, [](Node<T>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (wants(self, i)) accumulate(*self.parents[i], self.grad);
    }
  });
}

template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& v) {
  const auto c = x.dim(0);
  require(v.value().numel() == c, "add_channel: vector length must equal channel count");
  const auto s = trailing(x.shape(), 1);
  Tensor<T> out = x.value();
  MapR<T>(out.raw(), c, s).colwise() += CVecMap<T>(v.value().raw(), c);
  return make_op<T>(std::move(out), {x, v}, [c, s](Node<T>& self) {
    if (wants(self, 0)) accumulate(*self.parents[0], self.grad);
    if (wants(self, 1)) {
      auto& buf = self.parents[1]->grad_buffer();
      for (std::int64_t i = 0; i < c; ++i) buf[i] += seq_sum(self.grad.raw() + i * s, s);
    }
  });
}

template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& v) {
  require(x.shape().size() == 2, "add_row: x must be rank 2");
  const auto n = x.dim(0), d = x.dim(1);
  require(v.value().numel() == d, "add_row: vector length must equal row width");
  Tensor<T> out = x.value();
  MapR<T>(out.raw(), n, d).rowwise() += CVecMap<T>(v.value().raw(), d).transpose();
  return make_op<T>(std::move(out), {x, v}, [n, d](Node<T>& self) {
    if (wants(self, 0)) accumulate(*self.parents[0], self.grad);
    if (wants(self, 1)) {
      auto& buf = self.parents[1]->grad_buffer();
      for (std::int64_t j = 0; j < d; ++j) buf[j] += seq_sum(self.grad.raw() + j, n, d);
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  const auto n = x.value().numel();
  Tensor<T> out(x.shape());
  const T* in = x.value().raw();
  for (std::int64_t i = 0; i < n; ++i) out[i] = in[i] / (T(1) + std::exp(-in[i]));
  return make_op<T>(std::move(out), {x}, [n](Node<T>& self) {
    auto& buf = self.parents[0]->grad_buffer();
    const T* in = self.parents[0]->value.raw();
    for (std::int64_t i = 0; i < n; ++i) {
      const T sig = T(1) / (T(1) + std::exp(-in[i]));
      buf[i] += self.grad[i] * sig * (T(1) + in[i] * (T(1) - sig));
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  require(x.shape().size() == 3, "conv2d: input must be (C, H, W), got " + shape_str(x.shape()));
  require(w.shape().size() == 4, "conv2d: weight must be (Cout, Cin, k, k)");
  const auto cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const auto cout = w.dim(0), k = w.dim(2);
  require(w.dim(1) == cin, "conv2d: channel mismatch, input has " + std::to_string(cin) + " weight expects " +
                               std::to_string(w.dim(1)));
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const auto oh = (h + 2 * pad - k) / stride + 1;
  const auto ow = (wd + 2 * pad - k) / stride + 1;
  require(oh > 0 && ow > 0, "conv2d: output would be empty");
  if (b.defined()) require(b.value().numel() == cout, "conv2d: bias length mismatch");
  const auto kk = cin * k * k;
  const auto p = oh * ow;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  auto cols = std::make_shared<std::vector<T>>();
  if (!pointwise) {
    cols->assign(static_cast<std::size_t>(kk * p), T(0));
    const T* in = x.value().raw();
    for (std::int64_t c = 0; c < cin; ++c) {
      for (std::int64_t ky = 0; ky < k; ++ky) {
        for (std::int64_t kx = 0; kx < k; ++kx) {
          T* row = cols->data() + ((c * k + ky) * k + kx) * p;
          for (std::int64_t oy = 0; oy < oh; ++oy) {
            const auto iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (std::int64_t ox = 0; ox < ow; ++ox) {
              const auto ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= wd) continue;
              row[oy * ow + ox] = in[(c * h + iy) * wd + ix];
            }
          }
        }
      }
    }
  }
  const T* cols_ptr = pointwise ? x.value().raw() : cols->data();
  Tensor<T> out({cout, oh, ow});
  MapR<T> om(out.raw(), cout, p);
  om.noalias() = CMapR<T>(w.value().raw(), cout, kk) * CMapR<T>(cols_ptr, kk, p);
  if (b.defined()) om.colwise() += CVecMap<T>(b.value().raw(), cout);

  return make_op<T>(std::move(out), {x, w, b},
                    [=](Node<T>& self) {
                      CMapR<T> g(self.grad.raw(), cout, p);
                      const T* cp = pointwise ? self.parents[0]->value.raw() : cols->data();
                      CMapR<T> cm(cp, kk, p);
                      if (wants(self, 1)) {
                        auto& gw = self.parents[1]->grad_buffer();
                        MapR<T>(gw.raw(), cout, kk).noalias() += g * cm.transpose();
                      }
                      if (wants(self, 2)) {
                        auto& gb = self.parents[2]->grad_buffer();
                        for (std::int64_t i = 0; i < cout; ++i) gb[i] += seq_sum(self.grad.raw() + i * p, p);
                      }
                      if (wants(self, 0)) {
                        auto& gx = self.parents[0]->grad_buffer();
                        CMapR<T> wm(self.parents[1]->value.raw(), cout, kk);
                        if (pointwise) {
                          MapR<T>(gx.raw(), kk, p).noalias() += wm.transpose() * g;
                          return;
                        }
                        MatR<T> dcols = wm.transpose() * g;
                        T* dx = gx.raw();
                        for (std::int64_t c = 0; c < cin; ++c) {
                          for (std::int64_t ky = 0; ky < k; ++ky) {
                            for (std::int64_t kx = 0; kx < k; ++kx) {
                              const T* row = dcols.data() + ((c * k + ky) * k + kx) * p;
                              for (std::int64_t oy = 0; oy < oh; ++oy) {
                                const auto iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= h) continue;
                                for (std::int64_t ox = 0; ox < ow; ++ox) {
                                  const auto ix = ox * stride - pad + kx;
                                  if (ix < 0 || ix >= wd) continue;
                                  dx[(c * h + iy) * wd + ix] += row[oy * ow + ox];
                                }
                              }
                            }
                          }
                        }
                      }
                    });
}

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps) {
  require(x.shape().size() >= 1, "group_norm: empty shape");
  const auto c = x.dim(0);
  require(groups >= 1 && c % groups == 0, "group_norm: channels " + std::to_string(c) +
                                              " not divisible into " + std::to_string(groups) + " groups");
  if (gamma.defined()) require(gamma.value().numel() == c, "group_norm: gamma length mismatch");
  if (beta.defined()) require(beta.value().numel() == c, "group_norm: beta length mismatch");
  const auto s = trailing(x.shape(), 1);
  const auto per = (c / groups) * s;
  auto xhat = std::make_shared<Tensor<T>>(x.shape());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(groups));
  const T* in = x.value().raw();
  for (int g = 0; g < groups; ++g) {
    const T* seg = in + g * per;
    const T mean = seq_sum(seg, per) / static_cast<T>(per);
    T var = 0;
    for (std::int64_t i = 0; i < per; ++i) var += (seg[i] - mean) * (seg[i] - mean);
    var /= static_cast<T>(per);
    const T istd = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(g)] = istd;
    T* xo = xhat->raw() + g * per;
    for (std::int64_t i = 0; i < per; ++i) xo[i] = (seg[i] - mean) * istd;
  }
  Tensor<T> out = *xhat;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const T ga = gamma.defined() ? gamma.value()[ch] : T(1);
    const T be = beta.defined() ? beta.value()[ch] : T(0);
    T* row = out.raw() + ch * s;
    for (std::int64_t i = 0; i < s; ++i) row[i] = row[i] * ga + be;
  }
  const bool has_gamma = gamma.defined();
  return make_op<T>(std::move(out), {x, gamma, beta}, [=](Node<T>& self) {
    const T* g = self.grad.raw();
    const T* xh = xhat->raw();
    if (wants(self, 1)) {
      auto& gg = self.parents[1]->grad_buffer();
      for (std::int64_t ch = 0; ch < c; ++ch) {
        gg[ch] += seq_dot(g + ch * s, xh + ch * s, s);
      }
    }
    if (wants(self, 2)) {
      auto& gb = self.parents[2]->grad_buffer();
      for (std::int64_t ch = 0; ch < c; ++ch) gb[ch] += seq_sum(g + ch * s, s);
    }
    if (wants(self, 0)) {
      auto& gx = self.parents[0]->grad_buffer();
      std::vector<T> dxhat(static_cast<std::size_t>(c * s));
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T ga = has_gamma ? self.parents[1]->value[ch] : T(1);
        for (std::int64_t i = 0; i < s; ++i) dxhat[ch * s + i] = g[ch * s + i] * ga;
      }
      for (int gi = 0; gi < groups; ++gi) {
        const T* d = dxhat.data() + gi * per;
        const T* xs = xh + gi * per;
        const T mean_d = seq_sum(d, per) / static_cast<T>(per);
        const T mean_dx = seq_dot(d, xs, per) / static_cast<T>(per);
        const T istd = (*inv_std)[static_cast<std::size_t>(gi)];
        T* gxo = gx.raw() + gi * per;
        for (std::int64_t i = 0; i < per; ++i) gxo[i] += istd * (d[i] - mean_d - xs[i] * mean_dx);
      }
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require(x.shape().size() == 2 && w.shape().size() == 2, "linear: rank-2 operands required");
  const auto n = x.dim(0), din = x.dim(1), dout = w.dim(0);
  require(w.dim(1) == din, "linear: input width " + std::to_string(din) + " vs weight " + std::to_string(w.dim(1)));
  if (b.defined()) require(b.value().numel() == dout, "linear: bias length mismatch");
  Tensor<T> out({n, dout});
  MapR<T> om(out.raw(), n, dout);
  om.noalias() = CMapR<T>(x.value().raw(), n, din) * CMapR<T>(w.value().raw(), dout, din).transpose();
  if (b.defined()) om.rowwise() += CVecMap<T>(b.value().raw(), dout).transpose();
  return make_op<T>(std::move(out), {x, w, b}, [=](Node<T>& self) {
    CMapR<T> g(self.grad.raw(), n, dout);
    if (wants(self, 0)) {
      auto& gx = self.parents[0]->grad_buffer();
      MapR<T>(gx.raw(), n, din).noalias() += g * CMapR<T>(self.parents[1]->value.raw(), dout, din);
    }
    if (wants(self, 1)) {
      auto& gw = self.parents[1]->grad_buffer();
      MapR<T>(gw.raw(), dout, din).noalias() += g.transpose() * CMapR<T>(self.parents[0]->value.raw(), n, din);
    }
    if (wants(self, 2)) {
      auto& gb = self.parents[2]->grad_buffer();
      for (std::int64_t j = 0; j < dout; ++j) gb[j] += seq_sum(self.grad.raw() + j, n, dout);
    }
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2, "matmul: rank-2 operands required");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimension mismatch");
  Tensor<T> out({m, n});
  MapR<T>(out.raw(), m, n).noalias() = CMapR<T>(a.value().raw(), m, k) * CMapR<T>(b.value().raw(), k, n);
  return make_op<T>(std::move(out), {a, b}, [=](Node<T>& self) {
    CMapR<T> g(self.grad.raw(), m, n);
    if (wants(self, 0)) {
      auto& ga = self.parents[0]->grad_buffer();
      MapR<T>(ga.raw(), m, k).noalias() += g * CMapR<T>(self.parents[1]->value.raw(), k, n).transpose();
    }
    if (wants(self, 1)) {
      auto& gb = self.parents[1]->grad_buffer();
      MapR<T>(gb.raw(), k, n).noalias() += CMapR<T>(self.parents[0]->value.raw(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  require(a.shape().size() == 2, "transpose: rank-2 operand required");
  const auto m = a.dim(0), n = a.dim(1);
  Tensor<T> out({n, m});
  MapR<T>(out.raw(), n, m) = CMapR<T>(a.value().raw(), m, n).transpose();
  return make_op<T>(std::move(out), {a}, [=](Node<T>& self) {
    auto& ga = self.parents[0]->grad_buffer();
    MapR<T>(ga.raw(), m, n) += CMapR<T>(self.grad.raw(), n, m).transpose();
  });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  require(a.shape().size() == 2, "softmax_rows: rank-2 operand required");
  const auto m = a.dim(0), n = a.dim(1);
  Tensor<T> out({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    const T* row = a.value().raw() + i * n;
    T* o = out.raw() + i * n;
    T mx = row[0];
    for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::int64_t j = 0; j < n; ++j) z += (o[j] = std::exp(row[j] - mx));
    for (std::int64_t j = 0; j < n; ++j) o[j] /= z;
  }
  return make_op<T>(std::move(out), {a}, [=](Node<T>& self) {
    // The node's own value is the softmax output.
    auto& ga = self.parents[0]->grad_buffer();
    for (std::int64_t i = 0; i < m; ++i) {
      const T* y = self.value.raw() + i * n;
      const T* g = self.grad.raw() + i * n;
      T dot = 0;
      for (std::int64_t j = 0; j < n; ++j) dot += y[j] * g[j];
      for (std::int64_t j = 0; j < n; ++j) ga[i * n + j] += y[j] * (g[j] - dot);
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& ga = self.parents[0]->grad_buffer();
    VecMap<T>(ga.raw(), ga.numel()) += CVecMap<T>(self.grad.raw(), ga.numel());
  });
}

template <typename T>
Var<T> to_tokens(const Var<T>& x) {
  require(x.shape().size() == 3, "to_tokens: expects (C, H, W)");
  return transpose(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}

template <typename T>
Var<T> from_tokens(const Var<T>& tokens, std::int64_t h, std::int64_t w) {
  require(tokens.shape().size() == 2 && tokens.dim(0) == h * w, "from_tokens: token count mismatch");
  return reshape(transpose(tokens), {tokens.dim(1), h, w});
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  require(!xs.empty(), "concat: no inputs");
  const Shape& base = xs[0].shape();
  require(axis < base.size(), "concat: axis out of range");
  std::int64_t total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    require(s.size() == base.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis) {
        require(s[d] == base[d], "concat: shape mismatch " + shape_str(s) + " vs " + shape_str(base));
      }
    }
    total += s[axis];
  }
  if (xs.size() == 1) return xs[0];
  const auto outer = shape_numel(Shape(base.begin(), base.begin() + static_cast<long>(axis)));
  const auto inner = trailing(base, axis + 1);
  Shape os = base;
  os[axis] = total;
  Tensor<T> out(os);
  std::vector<std::int64_t> widths;
  std::int64_t off = 0;
  for (const auto& x : xs) {
    const auto len = x.shape()[axis] * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(x.value().raw() + o * len, len, out.raw() + o * total * inner + off);
    }
    widths.push_back(len);
    off += len;
  }
  return make_op<T>(std::move(out), xs, [=](Node<T>& self) {
    std::int64_t offset = 0;
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      const auto len = widths[i];
      if (wants(self, i)) {
        auto& gx = self.parents[i]->grad_buffer();
        for (std::int64_t o = 0; o < outer; ++o) {
          VecMap<T>(gx.raw() + o * len, len) += CVecMap<T>(self.grad.raw() + o * total * inner + offset, len);
        }
      }
      offset += len;
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::int64_t start, std::int64_t len) {
  const Shape& s = a.shape();
  require(axis < s.size(), "slice: axis out of range");
  require(start >= 0 && len >= 0 && start + len <= s[axis], "slice: range out of bounds");
  const auto outer = shape_numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
  const auto inner = trailing(s, axis + 1);
  const auto full = s[axis];
  Shape os = s;
  os[axis] = len;
  Tensor<T> out(os);
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(a.value().raw() + (o * full + start) * inner, len * inner, out.raw() + o * len * inner);
  }
  return make_op<T>(std::move(out), {a}, [=](Node<T>& self) {
    auto& ga = self.parents[0]->grad_buffer();
    for (std::int64_t o = 0; o < outer; ++o) {
      VecMap<T>(ga.raw() + (o * full + start) * inner, len * inner) +=
          CVecMap<T>(self.grad.raw() + o * len * inner, len * inner);
    }
  });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  require(x.shape().size() == 3, "avg_pool2: expects (C, H, W)");
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(h % 2 == 0 && w % 2 == 0, "avg_pool2: spatial size must be even");
  const auto oh = h / 2, ow = w / 2;
  Tensor<T> out({c, oh, ow});
  const auto& in = x.value();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xx = 0; xx < ow; ++xx)
        out.at(ch, y, xx) = T(0.25) * (in.at(ch, 2 * y, 2 * xx) + in.at(ch, 2 * y, 2 * xx + 1) +
                                       in.at(ch, 2 * y + 1, 2 * xx) + in.at(ch, 2 * y + 1, 2 * xx + 1));
  return make_op<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx) gx.at(ch, y, xx) += T(0.25) * self.grad.at(ch, y / 2, xx / 2);
  });
}

template <typename T>
Var<T> upsample_nearest2(const Var<T>& x) {
  require(x.shape().size() == 3, "upsample_nearest2: expects (C, H, W)");
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> out({c, 2 * h, 2 * w});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < 2 * h; ++y)
      for (std::int64_t xx = 0; xx < 2 * w; ++xx) out.at(ch, y, xx) = x.value().at(ch, y / 2, xx / 2);
  return make_op<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < 2 * h; ++y)
        for (std::int64_t xx = 0; xx < 2 * w; ++xx) gx.at(ch, y / 2, xx / 2) += self.grad.at(ch, y, xx);
  });
}

namespace {
struct Taps {
  std::vector<std::int64_t> lo, hi;
  std::vector<double> frac;
};

Taps bilinear_taps(std::int64_t in, std::int64_t out) {
  Taps t;
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::int64_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const auto hi = std::min(lo + 1, in - 1);
    t.lo.push_back(lo);
    t.hi.push_back(hi);
    t.frac.push_back(src - static_cast<double>(lo));
  }
  return t;
}
}  // namespace

template <typename T>
Var<T> resize_bilinear(const Var<T>& x, std::int64_t out_h, std::int64_t out_w) {
  require(x.shape().size() == 3, "resize_bilinear: expects (C, H, W)");
  require(out_h > 0 && out_w > 0, "resize_bilinear: empty output");
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == out_h && w == out_w) return x;
  auto ty = std::make_shared<Taps>(bilinear_taps(h, out_h));
  auto tx = std::make_shared<Taps>(bilinear_taps(w, out_w));
  Tensor<T> out({c, out_h, out_w});
  const auto& in = x.value();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < out_h; ++y) {
      const T fy = static_cast<T>(ty->frac[y]);
      for (std::int64_t xx = 0; xx < out_w; ++xx) {
        const T fx = static_cast<T>(tx->frac[xx]);
        const T top = in.at(ch, ty->lo[y], tx->lo[xx]) * (T(1) - fx) + in.at(ch, ty->lo[y], tx->hi[xx]) * fx;
        const T bot = in.at(ch, ty->hi[y], tx->lo[xx]) * (T(1) - fx) + in.at(ch, ty->hi[y], tx->hi[xx]) * fx;
        out.at(ch, y, xx) = top * (T(1) - fy) + bot * fy;
      }
    }
  return make_op<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < out_h; ++y) {
        const T fy = static_cast<T>(ty->frac[y]);
        for (std::int64_t xx = 0; xx < out_w; ++xx) {
          const T fx = static_cast<T>(tx->frac[xx]);
          const T g = self.grad.at(ch, y, xx);
          gx.at(ch, ty->lo[y], tx->lo[xx]) += g * (T(1) - fy) * (T(1) - fx);
          gx.at(ch, ty->lo[y], tx->hi[xx]) += g * (T(1) - fy) * fx;
          gx.at(ch, ty->hi[y], tx->lo[xx]) += g * fy * (T(1) - fx);
          gx.at(ch, ty->hi[y], tx->hi[xx]) += g * fy * fx;
        }
      }
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& ids) {
  require(table.shape().size() == 2, "gather_rows: table must be rank 2");
  const auto v = table.dim(0), d = table.dim(1);
  const auto n = static_cast<std::int64_t>(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= v) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  Tensor<T> out({n, d});
  for (std::int64_t i = 0; i < n; ++i) std::copy_n(table.value().raw() + ids[i] * d, d, out.raw() + i * d);
  return make_op<T>(std::move(out), {table}, [=](Node<T>& self) {
    auto& gt = self.parents[0]->grad_buffer();
    for (std::int64_t i = 0; i < n; ++i) {
      VecMap<T>(gt.raw() + ids[static_cast<std::size_t>(i)] * d, d) += CVecMap<T>(self.grad.raw() + i * d, d);
    }
  });
}

template <typename T>
Var<T> mean_axis(const Var<T>& a, std::size_t axis) {
  require(a.shape().size() == 2 && axis < 2, "mean_axis: rank-2 operand required");
  const auto m = a.dim(0), n = a.dim(1);
  require((axis == 0 ? m : n) > 0, "mean_axis: empty axis");
  Tensor<T> out(axis == 0 ? Shape{1, n} : Shape{m, 1});
  const T* av = a.value().raw();
  if (axis == 0) {
    for (std::int64_t j = 0; j < n; ++j) out[j] = seq_sum(av + j, m, n) / static_cast<T>(m);
  } else {
    for (std::int64_t i = 0; i < m; ++i) out[i] = seq_sum(av + i * n, n) / static_cast<T>(n);
  }
  return make_op<T>(std::move(out), {a}, [=](Node<T>& self) {
    auto& ga = self.parents[0]->grad_buffer();
    MapR<T> gm(ga.raw(), m, n);
    if (axis == 0) {
      gm.rowwise() += CVecMap<T>(self.grad.raw(), n).transpose() / static_cast<T>(m);
    } else {
      gm.colwise() += CVecMap<T>(self.grad.raw(), m) / static_cast<T>(n);
    }
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  const auto n = a.value().numel();
  Tensor<T> out({1}, seq_sum(a.value().raw(), n));
  return make_op<T>(std::move(out), {a}, [n](Node<T>& self) {
    auto& ga = self.parents[0]->grad_buffer();
    VecMap<T>(ga.raw(), n).array() += self.grad[0];
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  const auto n = a.value().numel();
  require(n > 0, "mean_all: empty tensor");
  return scale(sum_all(a), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> mse(const Var<T>& pred, const Var<T>& target) {
  require_same_shape(pred.value(), target.value(), "mse");
  const auto n = pred.value().numel();
  require(n > 0, "mse: empty tensor");
  T acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T d = pred.value()[i] - target.value()[i];
    acc += d * d;
  }
  Tensor<T> out({1}, acc / static_cast<T>(n));
  return make_op<T>(std::move(out), {pred, target}, [n](Node<T>& self) {
    const T k = T(2) * self.grad[0] / static_cast<T>(n);
    const T* p = self.parents[0]->value.raw();
    const T* t = self.parents[1]->value.raw();
    if (wants(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::int64_t i = 0; i < n; ++i) g[i] += k * (p[i] - t[i]);
    }
    if (wants(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::int64_t i = 0; i < n; ++i) g[i] -= k * (p[i] - t[i]);
    }
  });
}

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& a) {
  require(a.shape().size() == 2, "l2_normalize_rows: rank-2 operand required");
  const auto m = a.dim(0), n = a.dim(1);
  auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(m));
  Tensor<T> out({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    const T* row = a.value().raw() + i * n;
    const T nr = std::sqrt(seq_dot(row, row, n));
    (*norms)[static_cast<std::size_t>(i)] = nr;
    if (nr > T(0)) VecMap<T>(out.raw() + i * n, n) = CVecMap<T>(a.value().raw() + i * n, n) / nr;
  }
  return make_op<T>(std::move(out), {a}, [=](Node<T>& self) {
    auto& ga = self.parents[0]->grad_buffer();
    for (std::int64_t i = 0; i < m; ++i) {
      const T nr = (*norms)[static_cast<std::size_t>(i)];
      if (nr <= T(0)) continue;
      const T* y = self.value.raw() + i * n;
      const T* g = self.grad.raw() + i * n;
      const T yg = seq_dot(y, g, n);
      T* go = ga.raw() + i * n;
      for (std::int64_t j = 0; j < n; ++j) go[j] += (g[j] - y[j] * yg) / nr;
    }
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels, int ignore_index) {
  require(logits.shape().size() == 2, "cross_entropy: logits must be (N, K)");
  const auto n = logits.dim(0), k = logits.dim(1);
  require(static_cast<std::int64_t>(labels.size()) == n, "cross_entropy: label count mismatch");
  for (int l : labels) {
    if (l != ignore_index && (l < 0 || l >= k)) {
      throw std::out_of_range("label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * k));
  T total = 0;
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (labels[static_cast<std::size_t>(i)] == ignore_index) continue;
    const T* row = logits.value().raw() + i * k;
    T mx = row[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const T lse = mx + std::log(z);
    for (std::int64_t j = 0; j < k; ++j) (*probs)[static_cast<std::size_t>(i * k + j)] = std::exp(row[j] - lse);
    total += lse - row[labels[static_cast<std::size_t>(i)]];
    ++count;
  }
  Tensor<T> out({1}, count > 0 ? total / static_cast<T>(count) : T(0));
  return make_op<T>(std::move(out), {logits}, [=](Node<T>& self) {
    if (count == 0) return;
    auto& g = self.parents[0]->grad_buffer();
    const T s = self.grad[0] / static_cast<T>(count);
    for (std::int64_t i = 0; i < n; ++i) {
      const int l = labels[static_cast<std::size_t>(i)];
      if (l == ignore_index) continue;
      for (std::int64_t j = 0; j < k; ++j) {
        g[i * k + j] += s * ((*probs)[static_cast<std::size_t>(i * k + j)] - (j == l ? T(1) : T(0)));
      }
    }
  });
}

}  // namespace ops

#define VERMOUTH_INSTANTIATE(T)                                                                      \
  template class Var<T>;                                                                             \
  namespace ops {                                                                                    \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> scale(const Var<T>&, T);                                                           \
  template Var<T> sum_of(const std::vector<Var<T>>&);                                                \
  template Var<T> add_channel(const Var<T>&, const Var<T>&);                                         \
  template Var<T> add_row(const Var<T>&, const Var<T>&);                                             \
  template Var<T> silu(const Var<T>&);                                                               \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                     \
  template Var<T> group_norm(const Var<T>&, const Var<T>&, const Var<T>&, int, T);                   \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                               \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                              \
  template Var<T> transpose(const Var<T>&);                                                          \
  template Var<T> softmax_rows(const Var<T>&);                                                       \
  template Var<T> reshape(const Var<T>&, Shape);                                                     \
  template Var<T> to_tokens(const Var<T>&);                                                          \
  template Var<T> from_tokens(const Var<T>&, std::int64_t, std::int64_t);                            \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                                   \
  template Var<T> slice(const Var<T>&, std::size_t, std::int64_t, std::int64_t);                     \
  template Var<T> avg_pool2(const Var<T>&);                                                          \
  template Var<T> upsample_nearest2(const Var<T>&);                                                  \
  template Var<T> resize_bilinear(const Var<T>&, std::int64_t, std::int64_t);                        \
  template Var<T> gather_rows(const Var<T>&, const std::vector<int>&);                               \
  template Var<T> mean_axis(const Var<T>&, std::size_t);                                             \
  template Var<T> sum_all(const Var<T>&);                                                            \
  template Var<T> mean_all(const Var<T>&);                                                           \
  template Var<T> mse(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> l2_normalize_rows(const Var<T>&);                                                  \
  template Var<T> cross_entropy(const Var<T>&, const std::vector<int>&, int);                        \
  }
VERMOUTH_INSTANTIATE(float)
VERMOUTH_INSTANTIATE(double)
#undef VERMOUTH_INSTANTIATE

}  // namespace vermouth
