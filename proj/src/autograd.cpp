#include "tumorseg/autograd.hpp"

#include "tumorseg/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace tumorseg {

namespace {

thread_local bool g_grad_enabled = true;

template <typename Scalar>
using ConstRowMap = Eigen::Map<const RowMatrix<Scalar>>;
template <typename Scalar>
using RowMap = Eigen::Map<RowMatrix<Scalar>>;

std::string describe(const char* op, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << op << ": " << a << " vs " << b;
  return os.str();
}

Index conv_out_extent(Index in, Index kernel, int stride, int pad, int dilation) {
  return (in + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1;
}

// Unfolds one (C, H, W) sample into a (C*kh*kw, Ho*Wo) row-major matrix.
template <typename Scalar>
void im2col(const Scalar* x, Index channels, Index height, Index width, Index kh, Index kw,
            const ConvGeometry& g, Index out_h, Index out_w, Scalar* col) {
  const Index pixels = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        Scalar* dst = col + ((c * kh + ky) * kw + kx) * pixels;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky * g.dilation;
          Scalar* row = dst + oy * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(row, row + out_w, Scalar(0));
            continue;
          }
          const Scalar* src = x + (c * height + iy) * width;
          if (g.stride == 1) {
            const Index shift = kx * g.dilation - g.pad;
            const Index lo = std::clamp<Index>(-shift, 0, out_w);
            const Index hi = std::clamp<Index>(width - shift, 0, out_w);
            std::fill(row, row + lo, Scalar(0));
            if (hi > lo) std::copy(src + lo + shift, src + hi + shift, row + lo);
            std::fill(row + std::max(lo, hi), row + out_w, Scalar(0));
          } else {
            for (Index ox = 0; ox < out_w; ++ox) {
              const Index ix = ox * g.stride - g.pad + kx * g.dilation;
              row[ox] = (ix >= 0 && ix < width) ? src[ix] : Scalar(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into a (C, H, W) sample.
template <typename Scalar>
void col2im(const Scalar* col, Index channels, Index height, Index width, Index kh, Index kw,
            const ConvGeometry& g, Index out_h, Index out_w, Scalar* x) {
  const Index pixels = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        const Scalar* src = col + ((c * kh + ky) * kw + kx) * pixels;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky * g.dilation;
          if (iy < 0 || iy >= height) continue;
          Scalar* dst = x + (c * height + iy) * width;
          const Scalar* row = src + oy * out_w;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx * g.dilation;
            if (ix >= 0 && ix < width) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

struct AxisTable {
  std::vector<Index> lo;
  std::vector<Index> hi;
  std::vector<double> frac;
};

AxisTable bilinear_axis(Index in, Index out) {
  AxisTable t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    Index i0 = static_cast<Index>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    t.lo[o] = i0;
    t.hi[o] = std::min<Index>(i0 + 1, in - 1);
    t.frac[o] = src - static_cast<double>(i0);
  }
  return t;
}

template <typename Scalar>
void bilinear_forward(const Tensor<Scalar>& x, const AxisTable& ty, const AxisTable& tx, Tensor<Scalar>& out) {
  const Shape& s = x.shape();
  const Shape& o = out.shape();
  for (Index p = 0; p < s.n * s.c; ++p) {
    const Scalar* src = x.data() + p * s.plane();
    Scalar* dst = out.data() + p * o.plane();
    for (Index oy = 0; oy < o.h; ++oy) {
      const Scalar fy = static_cast<Scalar>(ty.frac[oy]);
      const Scalar* r0 = src + ty.lo[oy] * s.w;
      const Scalar* r1 = src + ty.hi[oy] * s.w;
      for (Index ox = 0; ox < o.w; ++ox) {
        const Scalar fx = static_cast<Scalar>(tx.frac[ox]);
        const Scalar top = (Scalar(1) - fx) * r0[tx.lo[ox]] + fx * r0[tx.hi[ox]];
        const Scalar bottom = (Scalar(1) - fx) * r1[tx.lo[ox]] + fx * r1[tx.hi[ox]];
        dst[oy * o.w + ox] = (Scalar(1) - fy) * top + fy * bottom;
      }
    }
  }
}

template <typename Scalar>
void check_defined(const Var<Scalar>& v, const char* what) {
  if (!v.defined()) throw Error(ErrorCode::kInvalidConfig, std::string(what) + " is undefined");
}

}  // namespace

// ---------------------------------------------------------------------------

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename Scalar>
Var<Scalar>::Var(Tensor<Scalar> value, bool requires_grad) : node_(std::make_shared<Node<Scalar>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::grad() const {
  return node_->grad_buffer();
}

template <typename Scalar>
void Var<Scalar>::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.set_zero();
}

template <typename Scalar>
Var<Scalar> make_result(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs,
                        std::function<void(Node<Scalar>&)> backward_fn) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var<Scalar>& v) { return v.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& v : inputs) node->parents.push_back(v.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Var<Scalar>(std::move(node));
}

template <typename Scalar>
void backward(const Var<Scalar>& root) {
  if (root.value().size() != 1) {
    throw Error(ErrorCode::kShapeMismatch, "backward() requires a single-element root");
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order. The order holds
  // owning references so clearing parent links below frees nothing early.
  std::vector<std::shared_ptr<Node<Scalar>>> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<std::shared_ptr<Node<Scalar>>, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const std::shared_ptr<Node<Scalar>>& parent = node->parents[next++];
      if (parent && parent->requires_grad && !seen.count(parent.get())) {
        seen.insert(parent.get());
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().vec().array() += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = it->get();
    if (node->backward_fn) {
      node->backward_fn(*node);
      node->backward_fn = nullptr;
      node->parents.clear();
      node->grad = Tensor<Scalar>();
    }
  }
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, ConvGeometry g) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (xs.c != ws.c) {
    throw Error(ErrorCode::kChannelMismatch, describe("conv2d input vs weight", xs, ws));
  }
  const Index kh = ws.h, kw = ws.w, cout = ws.n;
  const Index oh = conv_out_extent(xs.h, kh, g.stride, g.pad, g.dilation);
  const Index ow = conv_out_extent(xs.w, kw, g.stride, g.pad, g.dilation);
  if (oh < 1 || ow < 1) throw Error(ErrorCode::kSpatialMismatch, describe("conv2d output empty", xs, ws));
  const Index k = xs.c * kh * kw;
  const Index pixels = oh * ow;
  const bool pointwise = kh == 1 && kw == 1 && g.stride == 1 && g.pad == 0;

  Tensor<Scalar> out(Shape{xs.n, cout, oh, ow});
  ConstRowMap<Scalar> wmat(weight.value().data(), cout, k);
  RowMatrix<Scalar> col(pointwise ? 0 : k, pointwise ? 0 : pixels);
  for (Index n = 0; n < xs.n; ++n) {
    auto dst = out.sample(n);
    if (pointwise) {
      dst.noalias() = wmat * x.value().sample(n);
    } else {
      im2col(x.value().data() + n * xs.sample(), xs.c, xs.h, xs.w, kh, kw, g, oh, ow, col.data());
      dst.noalias() = wmat * col;
    }
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> b(bias.value().data(), cout);
      dst.colwise() += b;
    }
  }

  std::vector<Var<Scalar>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<Scalar>(std::move(out), std::move(inputs), [=](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.parents[0];
    Node<Scalar>& wn = *self.parents[1];
    Node<Scalar>* bn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    const Tensor<Scalar>& gout = self.grad;
    ConstRowMap<Scalar> w(wn.value.data(), cout, k);
    RowMatrix<Scalar> colbuf(pointwise ? 0 : k, pointwise ? 0 : pixels);
    RowMatrix<Scalar> dcol;
    for (Index n = 0; n < xs.n; ++n) {
      auto go = gout.sample(n);
      if (wn.requires_grad) {
        RowMap<Scalar> dw(wn.grad_buffer().data(), cout, k);
        if (pointwise) {
          dw.noalias() += go * xn.value.sample(n).transpose();
        } else {
          im2col(xn.value.data() + n * xs.sample(), xs.c, xs.h, xs.w, kh, kw, g, oh, ow, colbuf.data());
          dw.noalias() += go * colbuf.transpose();
        }
      }
      if (bn && bn->requires_grad) {
        Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> db(bn->grad_buffer().data(), cout);
        db += go.rowwise().sum();
      }
      if (xn.requires_grad) {
        if (pointwise) {
          xn.grad_buffer().sample(n).noalias() += w.transpose() * go;
        } else {
          dcol.noalias() = w.transpose() * go;
          col2im(dcol.data(), xs.c, xs.h, xs.w, kh, kw, g, oh, ow, xn.grad_buffer().data() + n * xs.sample());
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> conv_transpose2x2(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (xs.c != ws.n || ws.h != 2 || ws.w != 2) {
    throw Error(ErrorCode::kChannelMismatch, describe("conv_transpose2x2 input vs weight", xs, ws));
  }
  const Index cin = xs.c, cout = ws.c, pixels = xs.plane();
  const Shape os{xs.n, cout, xs.h * 2, xs.w * 2};
  Tensor<Scalar> out(os);
  ConstRowMap<Scalar> wmat(weight.value().data(), cin, cout * 4);
  RowMatrix<Scalar> cols(cout * 4, pixels);
  for (Index n = 0; n < xs.n; ++n) {
    cols.noalias() = wmat.transpose() * x.value().sample(n);
    Scalar* dst = out.data() + n * os.sample();
    for (Index co = 0; co < cout; ++co) {
      const Scalar b = bias.defined() ? bias.value().data()[co] : Scalar(0);
      for (Index tap = 0; tap < 4; ++tap) {
        const Index ky = tap / 2, kx = tap % 2;
        const Scalar* src = cols.data() + (co * 4 + tap) * pixels;
        for (Index i = 0; i < xs.h; ++i) {
          Scalar* row = dst + (co * os.h + 2 * i + ky) * os.w + kx;
          for (Index j = 0; j < xs.w; ++j) row[2 * j] = src[i * xs.w + j] + b;
        }
      }
    }
  }

  std::vector<Var<Scalar>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<Scalar>(std::move(out), std::move(inputs), [=](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.parents[0];
    Node<Scalar>& wn = *self.parents[1];
    Node<Scalar>* bn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    ConstRowMap<Scalar> w(wn.value.data(), cin, cout * 4);
    RowMatrix<Scalar> gcols(cout * 4, pixels);
    for (Index n = 0; n < xs.n; ++n) {
      const Scalar* g = self.grad.data() + n * os.sample();
      for (Index co = 0; co < cout; ++co) {
        for (Index tap = 0; tap < 4; ++tap) {
          const Index ky = tap / 2, kx = tap % 2;
          Scalar* dst = gcols.data() + (co * 4 + tap) * pixels;
          for (Index i = 0; i < xs.h; ++i) {
            const Scalar* row = g + (co * os.h + 2 * i + ky) * os.w + kx;
            for (Index j = 0; j < xs.w; ++j) dst[i * xs.w + j] = row[2 * j];
          }
        }
      }
      if (wn.requires_grad) {
        RowMap<Scalar> dw(wn.grad_buffer().data(), cin, cout * 4);
        dw.noalias() += xn.value.sample(n) * gcols.transpose();
      }
      if (bn && bn->requires_grad) {
        Scalar* db = bn->grad_buffer().data();
        for (Index co = 0; co < cout; ++co) db[co] += gcols.middleRows(co * 4, 4).sum();
      }
      if (xn.requires_grad) xn.grad_buffer().sample(n).noalias() += w * gcols;
    }
  });
}

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var, bool training,
                       Scalar momentum, Scalar eps) {
  const Shape s = x.shape();
  if (gamma.value().size() != s.c || beta.value().size() != s.c || running_mean.size() != s.c) {
    throw Error(ErrorCode::kChannelMismatch, describe("batch_norm", s, gamma.shape()));
  }
  const Index count = s.n * s.plane();
  std::vector<Scalar> mean(s.c), inv_std(s.c);
  if (training) {
    for (Index c = 0; c < s.c; ++c) {
      double sum = 0, sq = 0;
      for (Index n = 0; n < s.n; ++n) {
        const Scalar* p = x.value().data() + (n * s.c + c) * s.plane();
        for (Index i = 0; i < s.plane(); ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(count);
      for (Index n = 0; n < s.n; ++n) {
        const Scalar* p = x.value().data() + (n * s.c + c) * s.plane();
        for (Index i = 0; i < s.plane(); ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const double var = sq / static_cast<double>(count);
      mean[c] = static_cast<Scalar>(mu);
      inv_std[c] = static_cast<Scalar>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      running_mean.data()[c] = (Scalar(1) - momentum) * running_mean.data()[c] + momentum * static_cast<Scalar>(mu);
      running_var.data()[c] =
          (Scalar(1) - momentum) * running_var.data()[c] + momentum * static_cast<Scalar>(unbiased);
    }
  } else {
    for (Index c = 0; c < s.c; ++c) {
      mean[c] = running_mean.data()[c];
      inv_std[c] = Scalar(1) / std::sqrt(running_var.data()[c] + eps);
    }
  }

  Tensor<Scalar> out(s);
  Tensor<Scalar> xhat(s);
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < s.c; ++c) {
      const Index off = (n * s.c + c) * s.plane();
      const Scalar gm = gamma.value().data()[c], bt = beta.value().data()[c];
      for (Index i = 0; i < s.plane(); ++i) {
        const Scalar h = (x.value().data()[off + i] - mean[c]) * inv_std[c];
        xhat.data()[off + i] = h;
        out.data()[off + i] = gm * h + bt;
      }
    }
  }

  return make_result<Scalar>(std::move(out), {x, gamma, beta},
                             [=, xhat = std::move(xhat)](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.parents[0];
    Node<Scalar>& gn = *self.parents[1];
    Node<Scalar>& bn = *self.parents[2];
    const Scalar* gout = self.grad.data();
    for (Index c = 0; c < s.c; ++c) {
      double sum_g = 0, sum_gx = 0;
      for (Index n = 0; n < s.n; ++n) {
        const Index off = (n * s.c + c) * s.plane();
        for (Index i = 0; i < s.plane(); ++i) {
          sum_g += gout[off + i];
          sum_gx += gout[off + i] * xhat.data()[off + i];
        }
      }
      if (gn.requires_grad) gn.grad_buffer().data()[c] += static_cast<Scalar>(sum_gx);
      if (bn.requires_grad) bn.grad_buffer().data()[c] += static_cast<Scalar>(sum_g);
      if (!xn.requires_grad) continue;
      const Scalar scale = gn.value.data()[c] * inv_std[c];
      Scalar* dx = xn.grad_buffer().data();
      const Scalar mg = static_cast<Scalar>(sum_g / static_cast<double>(count));
      const Scalar mgx = static_cast<Scalar>(sum_gx / static_cast<double>(count));
      for (Index n = 0; n < s.n; ++n) {
        const Index off = (n * s.c + c) * s.plane();
        for (Index i = 0; i < s.plane(); ++i) {
          if (training) {
            dx[off + i] += scale * (gout[off + i] - mg - xhat.data()[off + i] * mgx);
          } else {
            dx[off + i] += scale * gout[off + i];
          }
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.vec() = x.value().vec().cwiseMax(Scalar(0));
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.parents[0];
    xn.grad_buffer().vec().array() +=
        (self.value.vec().array() > Scalar(0)).select(self.grad.vec().array(), Scalar(0));
  });
}

namespace {

template <typename Scalar>
Var<Scalar> sigmoid_between(const Var<Scalar>& x, Scalar lo, Scalar hi) {
  Tensor<Scalar> out(x.shape());
  const Scalar* in = x.value().data();
  Scalar* o = out.data();
  for (Index i = 0; i < out.size(); ++i) {
    const Scalar v = in[i];
    if (v >= 0) {
      o[i] = Scalar(1) / (Scalar(1) + std::exp(-v));
    } else {
      const Scalar e = std::exp(v);
      o[i] = e / (Scalar(1) + e);
    }
    o[i] = std::clamp(o[i], lo, hi);
  }
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.parents[0];
    const auto y = self.value.vec().array();
    xn.grad_buffer().vec().array() += self.grad.vec().array() * y * (Scalar(1) - y);
  });
}

}  // namespace

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  return sigmoid_between(x, Scalar(0), Scalar(1));
}

template <typename Scalar>
Var<Scalar> probability(const Var<Scalar>& x) {
  constexpr Scalar kMargin = std::numeric_limits<Scalar>::epsilon() / 2;
  return sigmoid_between(x, kMargin, Scalar(1) - kMargin);
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape()) throw Error(ErrorCode::kShapeMismatch, describe("add", a.shape(), b.shape()));
  Tensor<Scalar> out(a.shape());
  out.vec() = a.value().vec() + b.value().vec();
  return make_result<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->grad_buffer().vec() += self.grad.vec();
    }
  });
}

template <typename Scalar>
Var<Scalar> scale_spatial(const Var<Scalar>& alpha, const Var<Scalar>& x) {
  const Shape as = alpha.shape(), xs = x.shape();
  if (as.c != 1 || as.n != xs.n || as.h != xs.h || as.w != xs.w) {
    throw Error(ErrorCode::kSpatialMismatch, describe("scale_spatial", as, xs));
  }
  Tensor<Scalar> out(xs);
  for (Index n = 0; n < xs.n; ++n) {
    out.sample(n) = x.value().sample(n).array().rowwise() * alpha.value().sample(n).row(0).array();
  }
  return make_result<Scalar>(std::move(out), {alpha, x}, [=](Node<Scalar>& self) {
    Node<Scalar>& an = *self.parents[0];
    Node<Scalar>& xn = *self.parents[1];
    for (Index n = 0; n < xs.n; ++n) {
      const auto g = self.grad.sample(n);
      if (xn.requires_grad) {
        xn.grad_buffer().sample(n).array() += g.array().rowwise() * an.value.sample(n).row(0).array();
      }
      if (an.requires_grad) {
        an.grad_buffer().sample(n).row(0) += (g.array() * xn.value.sample(n).array()).colwise().sum().matrix();
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> scale_channels(const Var<Scalar>& s, const Var<Scalar>& x) {
  const Shape ss = s.shape(), xs = x.shape();
  if (ss.n != xs.n || ss.c != xs.c || ss.h != 1 || ss.w != 1) {
    throw Error(ErrorCode::kChannelMismatch, describe("scale_channels", ss, xs));
  }
  Tensor<Scalar> out(xs);
  for (Index n = 0; n < xs.n; ++n) {
    out.sample(n) = x.value().sample(n).array().colwise() * s.value().sample(n).col(0).array();
  }
  return make_result<Scalar>(std::move(out), {s, x}, [=](Node<Scalar>& self) {
    Node<Scalar>& sn = *self.parents[0];
    Node<Scalar>& xn = *self.parents[1];
    for (Index n = 0; n < xs.n; ++n) {
      const auto g = self.grad.sample(n);
      if (xn.requires_grad) {
        xn.grad_buffer().sample(n).array() += g.array().colwise() * sn.value.sample(n).col(0).array();
      }
      if (sn.requires_grad) {
        sn.grad_buffer().sample(n).col(0) += (g.array() * xn.value.sample(n).array()).rowwise().sum().matrix();
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  const Shape xs = x.shape();
  Tensor<Scalar> out(Shape{xs.n, xs.c, 1, 1});
  for (Index n = 0; n < xs.n; ++n) out.sample(n).col(0) = x.value().sample(n).rowwise().mean();
  return make_result<Scalar>(std::move(out), {x}, [=](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.parents[0];
    const Scalar inv = Scalar(1) / static_cast<Scalar>(xs.plane());
    for (Index n = 0; n < xs.n; ++n) {
      xn.grad_buffer().sample(n).colwise() += self.grad.sample(n).col(0) * inv;
    }
  });
}

template <typename Scalar>
Var<Scalar> max_pool(const Var<Scalar>& x, int kernel, int stride, int pad) {
  const Shape xs = x.shape();
  const Index oh = conv_out_extent(xs.h, kernel, stride, pad, 1);
  const Index ow = conv_out_extent(xs.w, kernel, stride, pad, 1);
  if (oh < 1 || ow < 1) throw Error(ErrorCode::kSpatialMismatch, "max_pool: input too small");
  const Shape os{xs.n, xs.c, oh, ow};
  Tensor<Scalar> out(os);
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(os.numel()));
  for (Index p = 0; p < xs.n * xs.c; ++p) {
    const Scalar* src = x.value().data() + p * xs.plane();
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        Index best_i = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= xs.h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const Index ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= xs.w) continue;
            const Scalar v = src[iy * xs.w + ix];
            if (best_i < 0 || v > best) {
              best = v;
              best_i = iy * xs.w + ix;
            }
          }
        }
        const Index o = p * os.plane() + oy * ow + ox;
        out.data()[o] = best;
        argmax[static_cast<std::size_t>(o)] = static_cast<std::int32_t>(best_i);
      }
    }
  }
  return make_result<Scalar>(std::move(out), {x}, [=, argmax = std::move(argmax)](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.parents[0];
    Scalar* dx = xn.grad_buffer().data();
    for (Index p = 0; p < xs.n * xs.c; ++p) {
      for (Index i = 0; i < os.plane(); ++i) {
        const Index o = p * os.plane() + i;
        dx[p * xs.plane() + argmax[static_cast<std::size_t>(o)]] += self.grad.data()[o];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> avg_pool2(const Var<Scalar>& x) {
  const Shape xs = x.shape();
  if (xs.h < 2 || xs.w < 2) throw Error(ErrorCode::kSpatialMismatch, "avg_pool2: input too small");
  const Shape os{xs.n, xs.c, xs.h / 2, xs.w / 2};
  Tensor<Scalar> out(os);
  for (Index p = 0; p < xs.n * xs.c; ++p) {
    const Scalar* src = x.value().data() + p * xs.plane();
    Scalar* dst = out.data() + p * os.plane();
    for (Index oy = 0; oy < os.h; ++oy) {
      for (Index ox = 0; ox < os.w; ++ox) {
        const Scalar* a = src + 2 * oy * xs.w + 2 * ox;
        dst[oy * os.w + ox] = Scalar(0.25) * (a[0] + a[1] + a[xs.w] + a[xs.w + 1]);
      }
    }
  }
  return make_result<Scalar>(std::move(out), {x}, [=](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.parents[0];
    for (Index p = 0; p < xs.n * xs.c; ++p) {
      Scalar* dst = xn.grad_buffer().data() + p * xs.plane();
      const Scalar* g = self.grad.data() + p * os.plane();
      for (Index oy = 0; oy < os.h; ++oy) {
        for (Index ox = 0; ox < os.w; ++ox) {
          const Scalar v = Scalar(0.25) * g[oy * os.w + ox];
          Scalar* a = dst + 2 * oy * xs.w + 2 * ox;
          a[0] += v;
          a[1] += v;
          a[xs.w] += v;
          a[xs.w + 1] += v;
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw Error(ErrorCode::kShapeMismatch, "concat_channels: no inputs");
  Shape os = parts.front().shape();
  os.c = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.n != os.n || s.h != os.h || s.w != os.w) {
      throw Error(ErrorCode::kSpatialMismatch, describe("concat_channels", parts.front().shape(), s));
    }
    os.c += s.c;
  }
  Tensor<Scalar> out(os);
  for (Index n = 0; n < os.n; ++n) {
    Index row = 0;
    for (const auto& p : parts) {
      out.sample(n).middleRows(row, p.shape().c) = p.value().sample(n);
      row += p.shape().c;
    }
  }
  return make_result<Scalar>(std::move(out), parts, [os](Node<Scalar>& self) {
    for (Index n = 0; n < os.n; ++n) {
      Index row = 0;
      for (auto& p : self.parents) {
        const Index c = p->value.shape().c;
        if (p->requires_grad) p->grad_buffer().sample(n) += self.grad.sample(n).middleRows(row, c);
        row += c;
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> resize_bilinear(const Var<Scalar>& x, Index out_h, Index out_w) {
  const Shape xs = x.shape();
  const AxisTable ty = bilinear_axis(xs.h, out_h);
  const AxisTable tx = bilinear_axis(xs.w, out_w);
  Tensor<Scalar> out(Shape{xs.n, xs.c, out_h, out_w});
  bilinear_forward(x.value(), ty, tx, out);
  return make_result<Scalar>(std::move(out), {x}, [=](Node<Scalar>& self) {
    Node<Scalar>& xn = *self.parents[0];
    for (Index p = 0; p < xs.n * xs.c; ++p) {
      Scalar* dst = xn.grad_buffer().data() + p * xs.plane();
      const Scalar* g = self.grad.data() + p * out_h * out_w;
      for (Index oy = 0; oy < out_h; ++oy) {
        const Scalar fy = static_cast<Scalar>(ty.frac[oy]);
        Scalar* r0 = dst + ty.lo[oy] * xs.w;
        Scalar* r1 = dst + ty.hi[oy] * xs.w;
        for (Index ox = 0; ox < out_w; ++ox) {
          const Scalar fx = static_cast<Scalar>(tx.frac[ox]);
          const Scalar v = g[oy * out_w + ox];
          r0[tx.lo[ox]] += (Scalar(1) - fy) * (Scalar(1) - fx) * v;
          r0[tx.hi[ox]] += (Scalar(1) - fy) * fx * v;
          r1[tx.lo[ox]] += fy * (Scalar(1) - fx) * v;
          r1[tx.hi[ox]] += fy * fx * v;
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& x, const Tensor<Scalar>& weights) {
  if (x.shape() != weights.shape()) {
    throw Error(ErrorCode::kShapeMismatch, describe("weighted_sum", x.shape(), weights.shape()));
  }
  Tensor<Scalar> out(Shape{1, 1, 1, 1});
  out.data()[0] = x.value().vec().dot(weights.vec());
  return make_result<Scalar>(std::move(out), {x}, [weights](Node<Scalar>& self) {
    self.parents[0]->grad_buffer().vec() += self.grad.data()[0] * weights.vec();
  });
}

template <typename Scalar>
Var<Scalar> bce_loss(const Var<Scalar>& pred, const Tensor<Scalar>& target, double eps) {
  if (pred.shape() != target.shape()) {
    throw Error(ErrorCode::kShapeMismatch, describe("bce_loss", pred.shape(), target.shape()));
  }
  const Index count = target.size();
  double total = 0;
  for (Index i = 0; i < count; ++i) {
    const double p = std::clamp(static_cast<double>(pred.value().data()[i]), eps, 1.0 - eps);
    const double y = static_cast<double>(target.data()[i]);
    total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  Tensor<Scalar> out(Shape{1, 1, 1, 1});
  out.data()[0] = static_cast<Scalar>(total / static_cast<double>(count));
  return make_result<Scalar>(std::move(out), {pred}, [target, eps, count](Node<Scalar>& self) {
    Node<Scalar>& pn = *self.parents[0];
    Scalar* dp = pn.grad_buffer().data();
    const double scale = static_cast<double>(self.grad.data()[0]) / static_cast<double>(count);
    for (Index i = 0; i < count; ++i) {
      const double p = std::clamp(static_cast<double>(pn.value.data()[i]), eps, 1.0 - eps);
      const double y = static_cast<double>(target.data()[i]);
      dp[i] += static_cast<Scalar>(scale * (p - y) / (p * (1.0 - p)));
    }
  });
}

template <typename Scalar>
Tensor<Scalar> resize_bilinear(const Tensor<Scalar>& x, Index out_h, Index out_w) {
  const Shape xs = x.shape();
  Tensor<Scalar> out(Shape{xs.n, xs.c, out_h, out_w});
  bilinear_forward(x, bilinear_axis(xs.h, out_h), bilinear_axis(xs.w, out_w), out);
  return out;
}

template <typename Scalar>
Tensor<Scalar> resize_nearest(const Tensor<Scalar>& x, Index out_h, Index out_w) {
  const Shape xs = x.shape();
  Tensor<Scalar> out(Shape{xs.n, xs.c, out_h, out_w});
  for (Index p = 0; p < xs.n * xs.c; ++p) {
    const Scalar* src = x.data() + p * xs.plane();
    Scalar* dst = out.data() + p * out_h * out_w;
    for (Index oy = 0; oy < out_h; ++oy) {
      const Index iy = std::min<Index>(oy * xs.h / out_h, xs.h - 1);
      for (Index ox = 0; ox < out_w; ++ox) {
        const Index ix = std::min<Index>(ox * xs.w / out_w, xs.w - 1);
        dst[oy * out_w + ox] = src[iy * xs.w + ix];
      }
    }
  }
  return out;
}

#define TUMORSEG_INSTANTIATE(S)                                                                            \
  template class Var<S>;                                                                                   \
  template Var<S> make_result(Tensor<S>, std::vector<Var<S>>, std::function<void(Node<S>&)>);             \
  template void backward(const Var<S>&);                                                                   \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, ConvGeometry);                       \
  template Var<S> conv_transpose2x2(const Var<S>&, const Var<S>&, const Var<S>&);                          \
  template Var<S> batch_norm(const Var<S>&, const Var<S>&, const Var<S>&, Tensor<S>&, Tensor<S>&, bool, S, \
                             S);                                                                           \
  template Var<S> relu(const Var<S>&);                                                                     \
  template Var<S> sigmoid(const Var<S>&);                                                                  \
  template Var<S> probability(const Var<S>&);                                                              \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                       \
  template Var<S> scale_spatial(const Var<S>&, const Var<S>&);                                             \
  template Var<S> scale_channels(const Var<S>&, const Var<S>&);                                            \
  template Var<S> global_avg_pool(const Var<S>&);                                                          \
  template Var<S> max_pool(const Var<S>&, int, int, int);                                                  \
  template Var<S> avg_pool2(const Var<S>&);                                                                \
  template Var<S> concat_channels(const std::vector<Var<S>>&);                                             \
  template Var<S> resize_bilinear(const Var<S>&, Index, Index);                                            \
  template Var<S> weighted_sum(const Var<S>&, const Tensor<S>&);                                           \
  template Var<S> bce_loss(const Var<S>&, const Tensor<S>&, double);                                       \
  template Tensor<S> resize_bilinear(const Tensor<S>&, Index, Index);                                      \
  template Tensor<S> resize_nearest(const Tensor<S>&, Index, Index);

TUMORSEG_INSTANTIATE(float)
TUMORSEG_INSTANTIATE(double)

}  // namespace tumorseg
