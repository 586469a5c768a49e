#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <string>
#include <vector>

#include "lsc/tensor.hpp"

namespace lsc {

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kInstanceNormEps = 1e-5;

namespace detail {

template <class R>
using MatMap = Eigen::Map<Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class R>
using CMatMap =
    Eigen::Map<const Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class R>
void check_finite(const char* op, const Tensor<R>& t) {
  LSC_CHECK(all_finite(t.values()), op << ": non-finite input value");
}

// Shared post-op bookkeeping: provenance propagation and tape recording.
// `make_backward` is only invoked when the op actually lands on a tape.
template <class R, class F>
void finish_op(const char* name, Tensor<R>& out, std::initializer_list<Tensor<R>> ins,
               F&& make_backward) {
  bool edited = false;
  bool rg = false;
  for (const auto& t : ins) {
    edited = edited || t.node()->edited;
    rg = rg || t.node()->requires_grad;
  }
  out.node()->edited = edited;
  Tape<R>* tp = Tape<R>::current();
  if (tp && rg) {
    out.node()->requires_grad = true;
    out.node()->op = name;
    for (const auto& t : ins) out.node()->inputs.push_back(t.node());
    out.node()->backward = make_backward();
    tp->record(out.node());
  }
}

// Images are handled as (B,C,H,W); a 3-D (C,H,W) tensor is the B=1 case.
struct ImageDims {
  int b, c, h, w;
  bool batched;
};

inline ImageDims image_dims(const char* op, const Shape& s) {
  LSC_CHECK(s.size() == 3 || s.size() == 4,
            op << ": expected a 3-D or 4-D tensor, got " << shape_str(s));
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  return {s[0], s[1], s[2], s[3], true};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
  LSC_CHECK(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
            "matmul: incompatible shapes " << shape_str(a.shape()) << " and "
                                           << shape_str(b.shape()));
  detail::check_finite("matmul", a);
  detail::check_finite("matmul", b);
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<R> out = Tensor<R>::zeros({m, n});
  detail::MatMap<R>(out.mutable_data(), m, n).noalias() =
      detail::CMatMap<R>(a.data(), m, k) * detail::CMatMap<R>(b.data(), k, n);
  detail::finish_op("matmul", out, {a, b}, [&] {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    return [an, bn, on, m, k, n]() {
      detail::CMatMap<R> g(on->grad.data(), m, n);
      if (an->requires_grad) {
        an->ensure_grad();
        detail::MatMap<R>(an->grad.data(), m, k).noalias() +=
            g * detail::CMatMap<R>(bn->value.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::MatMap<R>(bn->grad.data(), k, n).noalias() +=
            detail::CMatMap<R>(an->value.data(), m, k).transpose() * g;
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// conv2d_3x3: stride 1, zero padding 1, kernel (O,C,3,3), optional bias (O)
// ---------------------------------------------------------------------------

namespace detail {

// cols is (C*9) x (H*W) for one sample.
template <class R>
void im2col_3x3(const R* x, int c_in, int h, int w, R* cols) {
  const int hw = h * w;
  for (int c = 0; c < c_in; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        R* row = cols + (static_cast<std::size_t>(c * 9 + ky * 3 + kx)) * hw;
        const int dy = ky - 1, dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          R* dst = row + y * w;
          const int sy = y + dy;
          if (sy < 0 || sy >= h) {
            std::memset(dst, 0, sizeof(R) * static_cast<std::size_t>(w));
            continue;
          }
          const R* src = x + (static_cast<std::size_t>(c) * h + sy) * w;
          if (dx == 0) {
            std::memcpy(dst, src, sizeof(R) * static_cast<std::size_t>(w));
          } else if (dx < 0) {
            dst[0] = R(0);
            std::memcpy(dst + 1, src, sizeof(R) * static_cast<std::size_t>(w - 1));
          } else {
            std::memcpy(dst, src + 1, sizeof(R) * static_cast<std::size_t>(w - 1));
            dst[w - 1] = R(0);
          }
        }
      }
    }
  }
}

template <class R>
void col2im_3x3_add(const R* cols, int c_in, int h, int w, R* dx) {
  const int hw = h * w;
  for (int c = 0; c < c_in; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const R* row = cols + (static_cast<std::size_t>(c * 9 + ky * 3 + kx)) * hw;
        const int dy = ky - 1, dx_ = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const R* src = row + y * w;
          R* dst = dx + (static_cast<std::size_t>(c) * h + sy) * w;
          if (dx_ == 0) {
            for (int i = 0; i < w; ++i) dst[i] += src[i];
          } else if (dx_ < 0) {
            for (int i = 1; i < w; ++i) dst[i - 1] += src[i];
          } else {
            for (int i = 0; i < w - 1; ++i) dst[i + 1] += src[i];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <class R>
Tensor<R> conv2d_3x3(const Tensor<R>& x, const Tensor<R>& w, const Tensor<R>& bias) {
  auto d = detail::image_dims("conv2d_3x3", x.shape());
  LSC_CHECK(w.ndim() == 4 && w.dim(1) == d.c && w.dim(2) == 3 && w.dim(3) == 3,
            "conv2d_3x3: kernel " << shape_str(w.shape()) << " does not match input "
                                  << shape_str(x.shape()));
  const int c_out = w.dim(0);
  const bool has_bias = bias.valid();
  if (has_bias)
    LSC_CHECK(bias.ndim() == 1 && bias.dim(0) == c_out,
              "conv2d_3x3: bias " << shape_str(bias.shape()) << " does not match kernel "
                                  << shape_str(w.shape()));
  detail::check_finite("conv2d_3x3", x);
  detail::check_finite("conv2d_3x3", w);
  if (has_bias) detail::check_finite("conv2d_3x3", bias);

  const int hw = d.h * d.w, k = d.c * 9;
  Shape out_shape = d.batched ? Shape{d.b, c_out, d.h, d.w} : Shape{c_out, d.h, d.w};
  Tensor<R> out = Tensor<R>::zeros(out_shape);

  std::vector<R> cols(static_cast<std::size_t>(k) * hw);
  for (int b = 0; b < d.b; ++b) {
    const R* xb = x.data() + static_cast<std::size_t>(b) * d.c * hw;
    R* ob = out.mutable_data() + static_cast<std::size_t>(b) * c_out * hw;
    detail::im2col_3x3(xb, d.c, d.h, d.w, cols.data());
    detail::MatMap<R>(ob, c_out, hw).noalias() =
        detail::CMatMap<R>(w.data(), c_out, k) * detail::CMatMap<R>(cols.data(), k, hw);
    if (has_bias) {
      for (int o = 0; o < c_out; ++o) {
        const R bv = bias.data()[o];
        R* p = ob + static_cast<std::size_t>(o) * hw;
        for (int i = 0; i < hw; ++i) p[i] += bv;
      }
    }
  }

  auto run_backward = [&]() {
    auto xn = x.node();
    auto wn = w.node();
    auto bn = has_bias ? bias.node() : nullptr;
    auto* on = out.node().get();
    return [xn, wn, bn, on, d, c_out, hw, k]() {
      std::vector<R> cols2(static_cast<std::size_t>(k) * hw);
      std::vector<R> dcols(static_cast<std::size_t>(k) * hw);
      if (wn->requires_grad) wn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (int b = 0; b < d.b; ++b) {
        const R* gb = on->grad.data() + static_cast<std::size_t>(b) * c_out * hw;
        detail::CMatMap<R> g(gb, c_out, hw);
        if (wn->requires_grad) {
          const R* xb = xn->value.data() + static_cast<std::size_t>(b) * d.c * hw;
          detail::im2col_3x3(xb, d.c, d.h, d.w, cols2.data());
          detail::MatMap<R>(wn->grad.data(), c_out, k).noalias() +=
              g * detail::CMatMap<R>(cols2.data(), k, hw).transpose();
        }
        if (xn->requires_grad) {
          detail::MatMap<R>(dcols.data(), k, hw).noalias() =
              detail::CMatMap<R>(wn->value.data(), c_out, k).transpose() * g;
          R* dxb = xn->grad.data() + static_cast<std::size_t>(b) * d.c * hw;
          detail::col2im_3x3_add(dcols.data(), d.c, d.h, d.w, dxb);
        }
        if (bn && bn->requires_grad) {
          bn->ensure_grad();
          for (int o = 0; o < c_out; ++o) {
            R s = R(0);
            const R* p = gb + static_cast<std::size_t>(o) * hw;
            for (int i = 0; i < hw; ++i) s += p[i];
            bn->grad[static_cast<std::size_t>(o)] += s;
          }
        }
      }
    };
  };
  if (has_bias)
    detail::finish_op("conv2d_3x3", out, {x, w, bias}, run_backward);
  else
    detail::finish_op("conv2d_3x3", out, {x, w}, run_backward);
  return out;
}

template <class R>
Tensor<R> conv2d_3x3(const Tensor<R>& x, const Tensor<R>& w) {
  return conv2d_3x3(x, w, Tensor<R>());
}

// ---------------------------------------------------------------------------
// add: same shape, or rhs a scalar, or rhs a 1-D bias over dim 1
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b) {
  detail::check_finite("add", a);
  detail::check_finite("add", b);
  enum class Mode { same, scalar, bias2d, bias_chan } mode;
  if (a.shape() == b.shape())
    mode = Mode::same;
  else if (b.numel() == 1)
    mode = Mode::scalar;
  else if (a.ndim() == 2 && b.ndim() == 1 && b.dim(0) == a.dim(1))
    mode = Mode::bias2d;
  else if ((a.ndim() == 4 && b.ndim() == 1 && b.dim(0) == a.dim(1)) ||
           (a.ndim() == 3 && b.ndim() == 1 && b.dim(0) == a.dim(0)))
    mode = Mode::bias_chan;
  else
    LSC_CHECK(false, "add: incompatible shapes " << shape_str(a.shape()) << " and "
                                                 << shape_str(b.shape()));

  Tensor<R> out = Tensor<R>::zeros(a.shape());
  const std::size_t n = static_cast<std::size_t>(a.numel());
  R* o = out.mutable_data();
  const R* pa = a.data();
  const R* pb = b.data();
  std::size_t plane = 1, nchan = 1, rows = 1;
  switch (mode) {
    case Mode::same:
      for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] + pb[i];
      break;
    case Mode::scalar:
      for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] + pb[0];
      break;
    case Mode::bias2d: {
      rows = static_cast<std::size_t>(a.dim(0));
      const std::size_t cols = static_cast<std::size_t>(a.dim(1));
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] = pa[r * cols + c] + pb[c];
      break;
    }
    case Mode::bias_chan: {
      auto d = detail::image_dims("add", a.shape());
      plane = static_cast<std::size_t>(d.h) * d.w;
      nchan = static_cast<std::size_t>(d.c);
      for (int bb = 0; bb < d.b; ++bb)
        for (std::size_t c = 0; c < nchan; ++c) {
          const std::size_t base = (bb * nchan + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) o[base + i] = pa[base + i] + pb[c];
        }
      break;
    }
  }
  detail::finish_op("add", out, {a, b}, [&] {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    return [an, bn, on, mode, n]() {
      const R* g = on->grad.data();
      if (an->requires_grad) an->accumulate(g, n);
      if (!bn->requires_grad) return;
      bn->ensure_grad();
      switch (mode) {
        case Mode::same:
          for (std::size_t i = 0; i < n; ++i) bn->grad[i] += g[i];
          break;
        case Mode::scalar: {
          R s = R(0);
          for (std::size_t i = 0; i < n; ++i) s += g[i];
          bn->grad[0] += s;
          break;
        }
        case Mode::bias2d: {
          const std::size_t cols = bn->value.size();
          const std::size_t rows2 = n / cols;
          for (std::size_t r = 0; r < rows2; ++r)
            for (std::size_t c = 0; c < cols; ++c) bn->grad[c] += g[r * cols + c];
          break;
        }
        case Mode::bias_chan: {
          const std::size_t nc = bn->value.size();
          auto d = detail::image_dims("add", on->shape);
          const std::size_t plane2 = static_cast<std::size_t>(d.h) * d.w;
          for (int bb = 0; bb < d.b; ++bb)
            for (std::size_t c = 0; c < nc; ++c) {
              const std::size_t base = (bb * nc + c) * plane2;
              R s = R(0);
              for (std::size_t i = 0; i < plane2; ++i) s += g[base + i];
              bn->grad[c] += s;
            }
          break;
        }
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// mul: elementwise, or either side a scalar
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> mul(const Tensor<R>& a, const Tensor<R>& b) {
  detail::check_finite("mul", a);
  detail::check_finite("mul", b);
  LSC_CHECK(a.shape() == b.shape() || a.numel() == 1 || b.numel() == 1,
            "mul: incompatible shapes " << shape_str(a.shape()) << " and "
                                        << shape_str(b.shape()));
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const Tensor<R>& big = a_scalar ? b : a;
  Tensor<R> out = Tensor<R>::zeros(big.shape());
  const std::size_t n = static_cast<std::size_t>(big.numel());
  R* o = out.mutable_data();
  const R* pa = a.data();
  const R* pb = b.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] * pb[i];
  } else if (a_scalar) {
    for (std::size_t i = 0; i < n; ++i) o[i] = pa[0] * pb[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] * pb[0];
  }
  detail::finish_op("mul", out, {a, b}, [&] {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    return [an, bn, on, n]() {
      const R* g = on->grad.data();
      const bool same = an->value.size() == bn->value.size();
      if (an->requires_grad) {
        an->ensure_grad();
        if (same || an->value.size() == n) {
          const R* vb = bn->value.data();
          if (bn->value.size() == 1)
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i] * vb[0];
          else
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i] * vb[i];
        } else {  // a is the scalar
          R s = R(0);
          const R* vb = bn->value.data();
          for (std::size_t i = 0; i < n; ++i) s += g[i] * vb[i];
          an->grad[0] += s;
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        if (same || bn->value.size() == n) {
          const R* va = an->value.data();
          if (an->value.size() == 1)
            for (std::size_t i = 0; i < n; ++i) bn->grad[i] += g[i] * va[0];
          else
            for (std::size_t i = 0; i < n; ++i) bn->grad[i] += g[i] * va[i];
        } else {
          R s = R(0);
          const R* va = an->value.data();
          for (std::size_t i = 0; i < n; ++i) s += g[i] * va[i];
          bn->grad[0] += s;
        }
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// concat_channels (dim 1) and stack_rows (dim 0)
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> concat_channels(const Tensor<R>& a, const Tensor<R>& b) {
  detail::check_finite("concat_channels", a);
  detail::check_finite("concat_channels", b);
  LSC_CHECK(a.ndim() == b.ndim() && (a.ndim() == 2 || a.ndim() == 4),
            "concat_channels: incompatible shapes " << shape_str(a.shape()) << " and "
                                                    << shape_str(b.shape()));
  Shape os = a.shape();
  for (int i = 0; i < a.ndim(); ++i)
    if (i != 1)
      LSC_CHECK(a.dim(i) == b.dim(i), "concat_channels: incompatible shapes "
                                          << shape_str(a.shape()) << " and "
                                          << shape_str(b.shape()));
  os[1] = a.dim(1) + b.dim(1);
  Tensor<R> out = Tensor<R>::zeros(os);
  // per-leading-index contiguous chunks
  const std::size_t lead = static_cast<std::size_t>(a.dim(0));
  const std::size_t chunk_a = static_cast<std::size_t>(a.numel()) / lead;
  const std::size_t chunk_b = static_cast<std::size_t>(b.numel()) / lead;
  for (std::size_t i = 0; i < lead; ++i) {
    std::memcpy(out.mutable_data() + i * (chunk_a + chunk_b), a.data() + i * chunk_a,
                sizeof(R) * chunk_a);
    std::memcpy(out.mutable_data() + i * (chunk_a + chunk_b) + chunk_a, b.data() + i * chunk_b,
                sizeof(R) * chunk_b);
  }
  detail::finish_op("concat_channels", out, {a, b}, [&] {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    return [an, bn, on, lead, chunk_a, chunk_b]() {
      const R* g = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < lead; ++i)
          for (std::size_t j = 0; j < chunk_a; ++j)
            an->grad[i * chunk_a + j] += g[i * (chunk_a + chunk_b) + j];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < lead; ++i)
          for (std::size_t j = 0; j < chunk_b; ++j)
            bn->grad[i * chunk_b + j] += g[i * (chunk_a + chunk_b) + chunk_a + j];
      }
    };
  });
  return out;
}

template <class R>
Tensor<R> stack_rows(const std::vector<Tensor<R>>& parts) {
  LSC_CHECK(!parts.empty(), "stack_rows: empty input list");
  const int cols = parts[0].dim(parts[0].ndim() - 1);
  int rows = 0;
  for (const auto& p : parts) {
    detail::check_finite("stack_rows", p);
    LSC_CHECK(p.ndim() == 2 && p.dim(1) == cols, "stack_rows: incompatible shapes "
                                                     << shape_str(parts[0].shape()) << " and "
                                                     << shape_str(p.shape()));
    rows += p.dim(0);
  }
  Tensor<R> out = Tensor<R>::zeros({rows, cols});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.mutable_data() + off, p.data(), sizeof(R) * static_cast<std::size_t>(p.numel()));
    off += static_cast<std::size_t>(p.numel());
  }
  bool edited = false, rg = false;
  for (const auto& p : parts) {
    edited = edited || p.node()->edited;
    rg = rg || p.node()->requires_grad;
  }
  out.node()->edited = edited;
  Tape<R>* tp = Tape<R>::current();
  if (tp && rg) {
    out.node()->requires_grad = true;
    out.node()->op = "stack_rows";
    std::vector<std::shared_ptr<detail::Node<R>>> ins;
    ins.reserve(parts.size());
    for (const auto& p : parts) {
      out.node()->inputs.push_back(p.node());
      ins.push_back(p.node());
    }
    auto* on = out.node().get();
    out.node()->backward = [ins, on]() {
      const R* g = on->grad.data();
      std::size_t off2 = 0;
      for (const auto& n : ins) {
        const std::size_t sz = n->value.size();
        if (n->requires_grad) n->accumulate(g + off2, sz);
        off2 += sz;
      }
    };
    tp->record(out.node());
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities
// ---------------------------------------------------------------------------

namespace detail {

template <class R, class FwdF, class MakeBwd>
Tensor<R> unary_op(const char* name, const Tensor<R>& x, FwdF&& f, MakeBwd&& make_bwd) {
  check_finite(name, x);
  Tensor<R> out = Tensor<R>::zeros(x.shape());
  const std::size_t n = static_cast<std::size_t>(x.numel());
  const R* px = x.data();
  R* po = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) po[i] = f(px[i]);
  finish_op(name, out, {x}, [&] { return make_bwd(x.node(), out.node().get(), n); });
  return out;
}

}  // namespace detail

template <class R>
Tensor<R> leaky_relu(const Tensor<R>& x) {
  const R slope = static_cast<R>(kLeakySlope);
  return detail::unary_op(
      "leaky_relu", x, [slope](R v) { return v > R(0) ? v : slope * v; },
      [slope](std::shared_ptr<detail::Node<R>> xn, detail::Node<R>* on, std::size_t n) {
        return [xn, on, n, slope]() {
          if (!xn->requires_grad) return;
          xn->ensure_grad();
          const R* g = on->grad.data();
          const R* v = xn->value.data();
          for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g[i] * (v[i] > R(0) ? R(1) : slope);
        };
      });
}

template <class R>
Tensor<R> softplus(const Tensor<R>& x) {
  return detail::unary_op(
      "softplus", x,
      [](R v) {
        // stable: max(v,0) + log1p(exp(-|v|))
        const R a = v > R(0) ? v : R(0);
        return a + std::log1p(std::exp(-(v < R(0) ? -v : v)));
      },
      [](std::shared_ptr<detail::Node<R>> xn, detail::Node<R>* on, std::size_t n) {
        return [xn, on, n]() {
          if (!xn->requires_grad) return;
          xn->ensure_grad();
          const R* g = on->grad.data();
          const R* v = xn->value.data();
          for (std::size_t i = 0; i < n; ++i) {
            const R e = std::exp(-(v[i] < R(0) ? -v[i] : v[i]));
            const R sig = v[i] > R(0) ? R(1) / (R(1) + e) : e / (R(1) + e);
            xn->grad[i] += g[i] * sig;
          }
        };
      });
}

template <class R>
Tensor<R> tanh(const Tensor<R>& x) {
  return detail::unary_op(
      "tanh", x, [](R v) { return std::tanh(v); },
      [](std::shared_ptr<detail::Node<R>> xn, detail::Node<R>* on, std::size_t n) {
        return [xn, on, n]() {
          if (!xn->requires_grad) return;
          xn->ensure_grad();
          const R* g = on->grad.data();
          const R* y = on->value.data();
          for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g[i] * (R(1) - y[i] * y[i]);
        };
      });
}

template <class R>
Tensor<R> sqrt(const Tensor<R>& x) {
  for (std::size_t i = 0; i < static_cast<std::size_t>(x.numel()); ++i)
    LSC_CHECK(x.data()[i] >= R(0), "sqrt: negative input " << x.data()[i]);
  return detail::unary_op(
      "sqrt", x, [](R v) { return std::sqrt(v); },
      [](std::shared_ptr<detail::Node<R>> xn, detail::Node<R>* on, std::size_t n) {
        return [xn, on, n]() {
          if (!xn->requires_grad) return;
          xn->ensure_grad();
          const R* g = on->grad.data();
          const R* y = on->value.data();
          for (std::size_t i = 0; i < n; ++i)
            xn->grad[i] += g[i] * (R(0.5) / std::max(y[i], std::numeric_limits<R>::min()));
        };
      });
}

// ---------------------------------------------------------------------------
// spatial resampling
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> avg_pool2(const Tensor<R>& x) {
  auto d = detail::image_dims("avg_pool2", x.shape());
  LSC_CHECK(d.h % 2 == 0 && d.w % 2 == 0,
            "avg_pool2: spatial dims must be even, got " << shape_str(x.shape()));
  detail::check_finite("avg_pool2", x);
  const int oh = d.h / 2, ow = d.w / 2;
  Shape os = d.batched ? Shape{d.b, d.c, oh, ow} : Shape{d.c, oh, ow};
  Tensor<R> out = Tensor<R>::zeros(os);
  const R* px = x.data();
  R* po = out.mutable_data();
  const std::size_t planes = static_cast<std::size_t>(d.b) * d.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const R* xp = px + p * d.h * d.w;
    R* op = po + p * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xw = 0; xw < ow; ++xw) {
        const R* q = xp + (2 * y) * d.w + 2 * xw;
        op[y * ow + xw] = static_cast<R>(0.25) * (q[0] + q[1] + q[d.w] + q[d.w + 1]);
      }
  }
  detail::finish_op("avg_pool2", out, {x}, [&] {
    auto xn = x.node();
    auto* on = out.node().get();
    return [xn, on, d, oh, ow, planes]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        const R* gp = on->grad.data() + p * oh * ow;
        R* dxp = xn->grad.data() + p * d.h * d.w;
        for (int y = 0; y < oh; ++y)
          for (int xw = 0; xw < ow; ++xw) {
            const R g = static_cast<R>(0.25) * gp[y * ow + xw];
            R* q = dxp + (2 * y) * d.w + 2 * xw;
            q[0] += g;
            q[1] += g;
            q[d.w] += g;
            q[d.w + 1] += g;
          }
      }
    };
  });
  return out;
}

template <class R>
Tensor<R> upsample_nearest2(const Tensor<R>& x) {
  auto d = detail::image_dims("upsample_nearest2", x.shape());
  detail::check_finite("upsample_nearest2", x);
  const int oh = d.h * 2, ow = d.w * 2;
  Shape os = d.batched ? Shape{d.b, d.c, oh, ow} : Shape{d.c, oh, ow};
  Tensor<R> out = Tensor<R>::zeros(os);
  const R* px = x.data();
  R* po = out.mutable_data();
  const std::size_t planes = static_cast<std::size_t>(d.b) * d.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const R* xp = px + p * d.h * d.w;
    R* op = po + p * oh * ow;
    for (int y = 0; y < d.h; ++y)
      for (int xw = 0; xw < d.w; ++xw) {
        const R v = xp[y * d.w + xw];
        R* q = op + (2 * y) * ow + 2 * xw;
        q[0] = v;
        q[1] = v;
        q[ow] = v;
        q[ow + 1] = v;
      }
  }
  detail::finish_op("upsample_nearest2", out, {x}, [&] {
    auto xn = x.node();
    auto* on = out.node().get();
    return [xn, on, d, oh, ow, planes]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        const R* gp = on->grad.data() + p * oh * ow;
        R* dxp = xn->grad.data() + p * d.h * d.w;
        for (int y = 0; y < d.h; ++y)
          for (int xw = 0; xw < d.w; ++xw) {
            const R* q = gp + (2 * y) * ow + 2 * xw;
            dxp[y * d.w + xw] += q[0] + q[1] + q[ow] + q[ow + 1];
          }
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// instance_norm / adain
// ---------------------------------------------------------------------------

namespace detail {

// per-(sample,channel) mean/inv-std over the spatial plane; stats in double
template <class R>
void in_stats(const R* x, std::size_t planes, std::size_t plane, std::vector<R>& mu,
              std::vector<R>& inv) {
  mu.resize(planes);
  inv.resize(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    const R* xp = x + p * plane;
    double s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += xp[i];
    const double m = s / static_cast<double>(plane);
    double v = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double dlt = xp[i] - m;
      v += dlt * dlt;
    }
    v /= static_cast<double>(plane);
    mu[p] = static_cast<R>(m);
    inv[p] = static_cast<R>(1.0 / std::sqrt(v + kInstanceNormEps));
  }
}

// dx of y = (x - mu) * inv given upstream dyhat (written in-place adds)
template <class R>
void in_backward_plane(const R* dyhat, const R* yhat, R inv, std::size_t plane, R* dx) {
  double s1 = 0, s2 = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    s1 += dyhat[i];
    s2 += static_cast<double>(dyhat[i]) * yhat[i];
  }
  const R m1 = static_cast<R>(s1 / static_cast<double>(plane));
  const R m2 = static_cast<R>(s2 / static_cast<double>(plane));
  for (std::size_t i = 0; i < plane; ++i) dx[i] += inv * (dyhat[i] - m1 - yhat[i] * m2);
}

}  // namespace detail

template <class R>
Tensor<R> instance_norm(const Tensor<R>& x) {
  auto d = detail::image_dims("instance_norm", x.shape());
  detail::check_finite("instance_norm", x);
  const std::size_t planes = static_cast<std::size_t>(d.b) * d.c;
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  std::vector<R> mu, inv;
  detail::in_stats(x.data(), planes, plane, mu, inv);
  Tensor<R> out = Tensor<R>::zeros(x.shape());
  R* po = out.mutable_data();
  const R* px = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < plane; ++i) po[p * plane + i] = (px[p * plane + i] - mu[p]) * inv[p];
  detail::finish_op("instance_norm", out, {x}, [&] {
    auto xn = x.node();
    auto* on = out.node().get();
    return [xn, on, planes, plane, inv]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t p = 0; p < planes; ++p)
        detail::in_backward_plane(on->grad.data() + p * plane, on->value.data() + p * plane,
                                  inv[p], plane, xn->grad.data() + p * plane);
    };
  });
  return out;
}

// adain(x, gamma, beta) = gamma_c * instance_norm(x)_c + beta_c, per sample
template <class R>
Tensor<R> adain(const Tensor<R>& x, const Tensor<R>& gamma, const Tensor<R>& beta) {
  auto d = detail::image_dims("adain", x.shape());
  const Shape want = d.batched ? Shape{d.b, d.c} : Shape{d.c};
  LSC_CHECK(gamma.shape() == want && beta.shape() == want,
            "adain: style params " << shape_str(gamma.shape()) << "/" << shape_str(beta.shape())
                                   << " do not match input " << shape_str(x.shape()));
  detail::check_finite("adain", x);
  detail::check_finite("adain", gamma);
  detail::check_finite("adain", beta);
  const std::size_t planes = static_cast<std::size_t>(d.b) * d.c;
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  std::vector<R> mu, inv;
  detail::in_stats(x.data(), planes, plane, mu, inv);
  // keep the normalized activations for the backward pass
  auto xhat = std::make_shared<std::vector<R>>(planes * plane);
  const R* px = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < plane; ++i)
      (*xhat)[p * plane + i] = (px[p * plane + i] - mu[p]) * inv[p];
  Tensor<R> out = Tensor<R>::zeros(x.shape());
  R* po = out.mutable_data();
  const R* pg = gamma.data();
  const R* pb = beta.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < plane; ++i) po[p * plane + i] = pg[p] * (*xhat)[p * plane + i] + pb[p];
  detail::finish_op("adain", out, {x, gamma, beta}, [&] {
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto* on = out.node().get();
    return [xn, gn, bn, on, planes, plane, inv, xhat]() {
      const R* g = on->grad.data();
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t p = 0; p < planes; ++p) {
          R s = R(0);
          for (std::size_t i = 0; i < plane; ++i) s += g[p * plane + i];
          bn->grad[p] += s;
        }
      }
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (std::size_t p = 0; p < planes; ++p) {
          double s = 0;
          for (std::size_t i = 0; i < plane; ++i)
            s += static_cast<double>(g[p * plane + i]) * (*xhat)[p * plane + i];
          gn->grad[p] += static_cast<R>(s);
        }
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        std::vector<R> dyhat(plane);
        for (std::size_t p = 0; p < planes; ++p) {
          const R gv = gn->value[p];
          for (std::size_t i = 0; i < plane; ++i) dyhat[i] = gv * g[p * plane + i];
          detail::in_backward_plane(dyhat.data(), xhat->data() + p * plane, inv[p], plane,
                                    xn->grad.data() + p * plane);
        }
      }
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// reductions: reduce_l1 = sum |x|, reduce_l2 = sum x^2 (both to a scalar)
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> reduce_l1(const Tensor<R>& x) {
  detail::check_finite("reduce_l1", x);
  double s = 0;
  const R* px = x.data();
  const std::size_t n = static_cast<std::size_t>(x.numel());
  for (std::size_t i = 0; i < n; ++i) s += std::abs(static_cast<double>(px[i]));
  Tensor<R> out = Tensor<R>::scalar(static_cast<R>(s));
  detail::finish_op("reduce_l1", out, {x}, [&] {
    auto xn = x.node();
    auto* on = out.node().get();
    return [xn, on, n]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const R g = on->grad[0];
      const R* v = xn->value.data();
      for (std::size_t i = 0; i < n; ++i)
        xn->grad[i] += g * (v[i] > R(0) ? R(1) : (v[i] < R(0) ? R(-1) : R(0)));
    };
  });
  return out;
}

template <class R>
Tensor<R> reduce_l2(const Tensor<R>& x) {
  detail::check_finite("reduce_l2", x);
  double s = 0;
  const R* px = x.data();
  const std::size_t n = static_cast<std::size_t>(x.numel());
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(px[i]) * px[i];
  Tensor<R> out = Tensor<R>::scalar(static_cast<R>(s));
  detail::finish_op("reduce_l2", out, {x}, [&] {
    auto xn = x.node();
    auto* on = out.node().get();
    return [xn, on, n]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      const R g = on->grad[0];
      const R* v = xn->value.data();
      for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g * R(2) * v[i];
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// reshape (copying view; gradient passes straight through)
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> reshape(const Tensor<R>& x, Shape shape) {
  LSC_CHECK(shape_numel(shape) == x.numel(), "reshape: " << shape_str(x.shape()) << " to "
                                                         << shape_str(shape)
                                                         << " changes element count");
  detail::check_finite("reshape", x);
  Tensor<R> out = Tensor<R>::from_data(std::move(shape), x.values());
  detail::finish_op("reshape", out, {x}, [&] {
    auto xn = x.node();
    auto* on = out.node().get();
    return [xn, on]() {
      if (xn->requires_grad) xn->accumulate(on->grad.data(), on->grad.size());
    };
  });
  return out;
}

// ---------------------------------------------------------------------------
// composition helpers (no new primitive kinds)
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> scale(const Tensor<R>& x, R c) {
  return mul(x, Tensor<R>::scalar(c));
}

template <class R>
Tensor<R> neg(const Tensor<R>& x) {
  return scale(x, R(-1));
}

template <class R>
Tensor<R> sub(const Tensor<R>& a, const Tensor<R>& b) {
  return add(a, neg(b));
}

template <class R>
Tensor<R> mean_abs(const Tensor<R>& x) {
  return scale(reduce_l1(x), R(1) / static_cast<R>(x.numel()));
}

// exact hinge from the leaky slope: relu(x) = (leaky_relu(x) - 0.2 x) / 0.8
template <class R>
Tensor<R> relu(const Tensor<R>& x) {
  const R s = static_cast<R>(kLeakySlope);
  return scale(sub(leaky_relu(x), scale(x, s)), R(1) / (R(1) - s));
}

// sum of a (B,1) column as a 1-element tensor
template <class R>
Tensor<R> sum_column(const Tensor<R>& x) {
  LSC_CHECK(x.ndim() == 2 && x.dim(1) == 1, "sum_column: expected (B,1), got "
                                                << shape_str(x.shape()));
  return reshape(matmul(Tensor<R>::full({1, x.dim(0)}, R(1)), x), {1});
}

template <class R>
Tensor<R> mean_column(const Tensor<R>& x) {
  return scale(sum_column(x), R(1) / static_cast<R>(x.dim(0)));
}

// Euclidean norm of the difference of two same-shape tensors, guarded so the
// gradient stays finite at zero distance.
template <class R>
Tensor<R> euclidean_distance(const Tensor<R>& a, const Tensor<R>& b) {
  const R eps = std::is_same_v<R, double> ? R(1e-24) : R(1e-12);
  return sqrt(add(reduce_l2(sub(a, b)), Tensor<R>::scalar(eps)));
}

// ---------------------------------------------------------------------------
// spec-facing dispatcher over the primitive kinds
// ---------------------------------------------------------------------------

enum class OpKind {
  matmul,
  conv2d_3x3,
  add,
  mul,
  concat_channels,
  leaky_relu,
  avg_pool2,
  upsample_nearest2,
  instance_norm,
  adain,
  reduce_l1,
  reduce_l2,
  softplus,
  tanh,
  sqrt,
  stack_rows,
};

inline const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d_3x3: return "conv2d_3x3";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::concat_channels: return "concat_channels";
    case OpKind::leaky_relu: return "leaky_relu";
    case OpKind::avg_pool2: return "avg_pool2";
    case OpKind::upsample_nearest2: return "upsample_nearest2";
    case OpKind::instance_norm: return "instance_norm";
    case OpKind::adain: return "adain";
    case OpKind::reduce_l1: return "reduce_l1";
    case OpKind::reduce_l2: return "reduce_l2";
    case OpKind::softplus: return "softplus";
    case OpKind::tanh: return "tanh";
    case OpKind::sqrt: return "sqrt";
    case OpKind::stack_rows: return "stack_rows";
  }
  return "?";
}

template <class R>
Tensor<R> forward_op(OpKind kind, const std::vector<Tensor<R>>& inputs) {
  auto arity = [&](std::size_t want) {
    LSC_CHECK(inputs.size() == want, op_kind_name(kind) << ": expected " << want
                                                        << " inputs, got " << inputs.size());
  };
  switch (kind) {
    case OpKind::matmul: arity(2); return matmul(inputs[0], inputs[1]);
    case OpKind::conv2d_3x3:
      LSC_CHECK(inputs.size() == 2 || inputs.size() == 3,
                "conv2d_3x3: expected 2 or 3 inputs, got " << inputs.size());
      return inputs.size() == 2 ? conv2d_3x3(inputs[0], inputs[1])
                                : conv2d_3x3(inputs[0], inputs[1], inputs[2]);
    case OpKind::add: arity(2); return add(inputs[0], inputs[1]);
    case OpKind::mul: arity(2); return mul(inputs[0], inputs[1]);
    case OpKind::concat_channels: arity(2); return concat_channels(inputs[0], inputs[1]);
    case OpKind::leaky_relu: arity(1); return leaky_relu(inputs[0]);
    case OpKind::avg_pool2: arity(1); return avg_pool2(inputs[0]);
    case OpKind::upsample_nearest2: arity(1); return upsample_nearest2(inputs[0]);
    case OpKind::instance_norm: arity(1); return instance_norm(inputs[0]);
    case OpKind::adain: arity(3); return adain(inputs[0], inputs[1], inputs[2]);
    case OpKind::reduce_l1: arity(1); return reduce_l1(inputs[0]);
    case OpKind::reduce_l2: arity(1); return reduce_l2(inputs[0]);
    case OpKind::softplus: arity(1); return softplus(inputs[0]);
    case OpKind::tanh: arity(1); return tanh(inputs[0]);
    case OpKind::sqrt: arity(1); return sqrt(inputs[0]);
    case OpKind::stack_rows: return stack_rows(inputs);
  }
  LSC_CHECK(false, "forward_op: unknown kind");
  return {};
}

}  // namespace lsc
