#include "zonas/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "zonas/error.hpp"

namespace zonas::ops {

namespace {

using TensorPtr = std::shared_ptr<const Tensor>;

bool any_tracked(std::span<const Var> xs) {
  return std::any_of(xs.begin(), xs.end(), [](const Var& v) { return v.tracked(); });
}

Tape* tape_of(std::span<const Var> xs) {
  for (const auto& v : xs)
    if (v.tracked()) return v.tape();
  return nullptr;
}

Var emit(std::string_view op, TensorPtr out, std::span<const Var> inputs, BackwardFn fn,
         SavedTensors saved = {}) {
  if (!out->all_finite()) {
    throw NumericError(std::string(op) + ": non-finite output, shape " + shape_str(out->shape()));
  }
  Tape* tape = tape_of(inputs);
  if (!tape) return Var::constant(std::move(out));
  return tape->record(op, std::move(out), inputs, std::move(fn), std::move(saved));
}

Var emit(std::string_view op, Tensor out, std::span<const Var> inputs, BackwardFn fn, SavedTensors saved = {}) {
  return emit(op, std::make_shared<const Tensor>(std::move(out)), inputs, std::move(fn), std::move(saved));
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_rank(std::string_view op, const Var& x, std::size_t rank) {
  if (x.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

}  // namespace

Shape conv2d_output_shape(const Shape& x, const Shape& w, const Conv2dAttrs& a) {
  if (x.size() != 4 || w.size() != 4) shape_fail("conv2d", x, w);
  if (a.groups == 0 || x[1] % a.groups != 0 || w[0] % a.groups != 0 || w[1] != x[1] / a.groups) {
    shape_fail("conv2d", x, w);
  }
  const auto span_h = a.dilation * (w[2] - 1) + 1;
  const auto span_w = a.dilation * (w[3] - 1) + 1;
  if (x[2] + 2 * a.pad < span_h || x[3] + 2 * a.pad < span_w || a.stride == 0) shape_fail("conv2d", x, w);
  return {x[0], w[0], (x[2] + 2 * a.pad - span_h) / a.stride + 1, (x[3] + 2 * a.pad - span_w) / a.stride + 1};
}

Shape pool_output_shape(const Shape& x, const PoolAttrs& a) {
  if (x.size() != 4 || a.stride == 0 || x[2] + 2 * a.pad < a.kernel || x[3] + 2 * a.pad < a.kernel) {
    throw ShapeError("pool: input " + shape_str(x) + " too small for kernel " + std::to_string(a.kernel));
  }
  return {x[0], x[1], (x[2] + 2 * a.pad - a.kernel) / a.stride + 1, (x[3] + 2 * a.pad - a.kernel) / a.stride + 1};
}

Var identity(const Var& x) {
  const Var ins[] = {x};
  return emit("identity", x.value_ptr(), ins, [](const Tensor& g, const SavedTensors&, std::span<Tensor* const> gi) {
    if (gi[0]) gi[0]->add_(g);
  });
}

Var zero(const Var& x, std::size_t stride) {
  require_rank("zero", x, 4);
  Shape s = x.shape();
  s[2] = (s[2] + stride - 1) / stride;
  s[3] = (s[3] + stride - 1) / stride;
  const Var ins[] = {x};
  return emit("zero", Tensor(s), ins, [](const Tensor&, const SavedTensors&, std::span<Tensor* const>) {});
}

Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
  Tensor out = a.value();
  out.add_(b.value());
  const Var ins[] = {a, b};
  return emit("add", std::move(out), ins, [](const Tensor& g, const SavedTensors&, std::span<Tensor* const> gi) {
    for (auto* t : gi)
      if (t) t->add_(g);
  });
}

Var add_n(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("add_n: no inputs");
  Tensor out = xs[0].value();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i].shape() != out.shape()) shape_fail("add_n", out.shape(), xs[i].shape());
    out.add_(xs[i].value());
  }
  return emit("add_n", std::move(out), xs, [](const Tensor& g, const SavedTensors&, std::span<Tensor* const> gi) {
    for (auto* t : gi)
      if (t) t->add_(g);
  });
}

Var scale(const Var& x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= factor;
  const Var ins[] = {x};
  return emit("scale", std::move(out), ins,
              [factor](const Tensor& g, const SavedTensors&, std::span<Tensor* const> gi) {
                if (!gi[0]) return;
                auto d = gi[0]->data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * g[i];
              });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  auto out_ptr = std::make_shared<const Tensor>(std::move(out));
  const Var ins[] = {x};
  SavedTensors saved;
  if (any_tracked(ins)) saved.push_back(out_ptr);
  return emit("relu", out_ptr, ins,
              [](const Tensor& g, const SavedTensors& s, std::span<Tensor* const> gi) {
                if (!gi[0]) return;
                const Tensor& y = *s[0];
                auto d = gi[0]->data();
                for (std::size_t i = 0; i < d.size(); ++i)
                  if (y[i] > 0.0) d[i] += g[i];
              },
              std::move(saved));
}

Var sum(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  const Var ins[] = {x};
  return emit("sum", Tensor::scalar(acc), ins, [](const Tensor& g, const SavedTensors&, std::span<Tensor* const> gi) {
    if (!gi[0]) return;
    for (auto& v : gi[0]->data()) v += g[0];
  });
}

Var weighted_total(const Var& x, const Tensor& weights) {
  if (weights.shape() != x.shape()) shape_fail("weighted_total", x.shape(), weights.shape());
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.numel(); ++i) acc += weights[i] * x.value()[i];
  const Var ins[] = {x};
  return emit("weighted_total", Tensor::scalar(acc), ins,
              [weights](const Tensor& g, const SavedTensors&, std::span<Tensor* const> gi) {
                if (!gi[0]) return;
                auto d = gi[0]->data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[0] * weights[i];
              });
}

Var conv2d(const Var& x, const Var& w, const Conv2dAttrs& a) {
  const Shape os = conv2d_output_shape(x.shape(), w.shape(), a);
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  const std::size_t N = xs[0], H = xs[2], W = xs[3];
  const std::size_t Cout = ws[0], Cg = ws[1], KH = ws[2], KW = ws[3];
  const std::size_t OH = os[2], OW = os[3];
  const std::size_t out_per_group = Cout / a.groups;
  const long pad = static_cast<long>(a.pad);

  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  Tensor out(os);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < Cout; ++co) {
      const std::size_t ci0 = (co / out_per_group) * Cg;
      double* o = &out.at(n, co, 0, 0);
      for (std::size_t cl = 0; cl < Cg; ++cl) {
        const double* xin = &xv.at(n, ci0 + cl, 0, 0);
        for (std::size_t kh = 0; kh < KH; ++kh) {
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const double wt = wv[((co * Cg + cl) * KH + kh) * KW + kw];
            for (std::size_t oh = 0; oh < OH; ++oh) {
              const long ih = static_cast<long>(oh * a.stride + kh * a.dilation) - pad;
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              const double* xrow = xin + static_cast<std::size_t>(ih) * W;
              double* orow = o + oh * OW;
              for (std::size_t ow = 0; ow < OW; ++ow) {
                const long iw = static_cast<long>(ow * a.stride + kw * a.dilation) - pad;
                if (iw < 0 || iw >= static_cast<long>(W)) continue;
                orow[ow] += wt * xrow[iw];
              }
            }
          }
        }
      }
    }
  }

  const Var ins[] = {x, w};
  SavedTensors saved;
  if (any_tracked(ins)) saved = {x.value_ptr(), w.value_ptr()};
  return emit(
      "conv2d", std::move(out), ins,
      [a, xs, ws, os, out_per_group, pad](const Tensor& g, const SavedTensors& s, std::span<Tensor* const> gi) {
        const Tensor& xv = *s[0];
        const Tensor& wv = *s[1];
        const std::size_t N = xs[0], H = xs[2], W = xs[3];
        const std::size_t Cout = ws[0], Cg = ws[1], KH = ws[2], KW = ws[3];
        const std::size_t OH = os[2], OW = os[3];
        Tensor* dx = gi[0];
        Tensor* dw = gi[1];
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t co = 0; co < Cout; ++co) {
            const std::size_t ci0 = (co / out_per_group) * Cg;
            const double* go = &g.at(n, co, 0, 0);
            for (std::size_t cl = 0; cl < Cg; ++cl) {
              const std::size_t ci = ci0 + cl;
              for (std::size_t kh = 0; kh < KH; ++kh) {
                for (std::size_t kw = 0; kw < KW; ++kw) {
                  const std::size_t widx = ((co * Cg + cl) * KH + kh) * KW + kw;
                  const double wt = wv[widx];
                  double wacc = 0.0;
                  for (std::size_t oh = 0; oh < OH; ++oh) {
                    const long ih = static_cast<long>(oh * a.stride + kh * a.dilation) - pad;
                    if (ih < 0 || ih >= static_cast<long>(H)) continue;
                    const std::size_t row = ((n * xs[1] + ci) * H + static_cast<std::size_t>(ih)) * W;
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                      const long iw = static_cast<long>(ow * a.stride + kw * a.dilation) - pad;
                      if (iw < 0 || iw >= static_cast<long>(W)) continue;
                      const double gv = go[oh * OW + ow];
                      if (dx) (*dx)[row + static_cast<std::size_t>(iw)] += wt * gv;
                      wacc += gv * xv[row + static_cast<std::size_t>(iw)];
                    }
                  }
                  if (dw) (*dw)[widx] += wacc;
                }
              }
            }
          }
        }
      },
      std::move(saved));
}

Var channel_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Shape xs = x.shape();
  if (xs.size() < 2) throw ShapeError("channel_norm: expected rank >= 2, got " + shape_str(xs));
  const std::size_t N = xs[0], C = xs[1];
  const std::size_t S = shape_numel(xs) / (N * C);
  const bool affine = gamma.defined();
  if (affine && (gamma.shape() != Shape{C} || !beta.defined() || beta.shape() != Shape{C})) {
    shape_fail("channel_norm", xs, gamma.shape());
  }
  const Tensor& xv = x.value();
  Tensor xhat(xs);
  Tensor invstd(Shape{C});
  const double m = static_cast<double>(N * S);
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < S; ++i) mean += xv[(n * C + c) * S + i];
    mean /= m;
    double var = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < S; ++i) {
        const double d = xv[(n * C + c) * S + i] - mean;
        var += d * d;
      }
    var /= m;
    const double is = 1.0 / std::sqrt(var + eps);
    invstd[c] = is;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < S; ++i) {
        const std::size_t k = (n * C + c) * S + i;
        xhat[k] = (xv[k] - mean) * is;
      }
  }
  Tensor out = xhat;
  if (affine) {
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < S; ++i) {
          const std::size_t k = (n * C + c) * S + i;
          out[k] = gv[c] * xhat[k] + bv[c];
        }
  }

  std::vector<Var> ins{x};
  if (affine) {
    ins.push_back(gamma);
    ins.push_back(beta);
  }
  SavedTensors saved;
  if (any_tracked(ins)) {
    saved = {std::make_shared<const Tensor>(std::move(xhat)), std::make_shared<const Tensor>(std::move(invstd))};
    if (affine) saved.push_back(gamma.value_ptr());
  }
  return emit(
      "channel_norm", std::move(out), ins,
      [N, C, S, affine](const Tensor& g, const SavedTensors& s, std::span<Tensor* const> gi) {
        const Tensor& xh = *s[0];
        const Tensor& is = *s[1];
        const double m = static_cast<double>(N * S);
        for (std::size_t c = 0; c < C; ++c) {
          const double gam = affine ? (*s[2])[c] : 1.0;
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < S; ++i) {
              const std::size_t k = (n * C + c) * S + i;
              sum_g += g[k];
              sum_gx += g[k] * xh[k];
            }
          if (affine) {
            if (gi[1]) (*gi[1])[c] += sum_gx;
            if (gi[2]) (*gi[2])[c] += sum_g;
          }
          if (!gi[0]) continue;
          const double mg = sum_g / m, mgx = sum_gx / m;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < S; ++i) {
              const std::size_t k = (n * C + c) * S + i;
              (*gi[0])[k] += gam * is[c] * (g[k] - mg - xh[k] * mgx);
            }
        }
      },
      std::move(saved));
}

Var avg_pool2d(const Var& x, const PoolAttrs& a) {
  const Shape xs = x.shape();
  const Shape os = pool_output_shape(xs, a);
  const Tensor& xv = x.value();
  Tensor out(os);
  const long pad = static_cast<long>(a.pad);
  auto window = [xs, a, pad](std::size_t oh, std::size_t ow, auto&& visit) {
    const long h0 = static_cast<long>(oh * a.stride) - pad;
    const long w0 = static_cast<long>(ow * a.stride) - pad;
    std::size_t count = 0;
    for (long h = std::max(h0, 0L); h < std::min(h0 + static_cast<long>(a.kernel), static_cast<long>(xs[2])); ++h)
      for (long w = std::max(w0, 0L); w < std::min(w0 + static_cast<long>(a.kernel), static_cast<long>(xs[3])); ++w) {
        visit(static_cast<std::size_t>(h), static_cast<std::size_t>(w));
        ++count;
      }
    return count;
  };
  for (std::size_t n = 0; n < xs[0]; ++n)
    for (std::size_t c = 0; c < xs[1]; ++c)
      for (std::size_t oh = 0; oh < os[2]; ++oh)
        for (std::size_t ow = 0; ow < os[3]; ++ow) {
          double acc = 0.0;
          const auto cnt = window(oh, ow, [&](std::size_t h, std::size_t w) { acc += xv.at(n, c, h, w); });
          out.at(n, c, oh, ow) = acc / static_cast<double>(cnt);
        }
  const Var ins[] = {x};
  return emit("avg_pool2d", std::move(out), ins,
              [xs, os, window](const Tensor& g, const SavedTensors&, std::span<Tensor* const> gi) {
                if (!gi[0]) return;
                Tensor& dx = *gi[0];
                for (std::size_t n = 0; n < xs[0]; ++n)
                  for (std::size_t c = 0; c < xs[1]; ++c)
                    for (std::size_t oh = 0; oh < os[2]; ++oh)
                      for (std::size_t ow = 0; ow < os[3]; ++ow) {
                        const auto cnt = window(oh, ow, [](std::size_t, std::size_t) {});
                        const double share = g.at(n, c, oh, ow) / static_cast<double>(cnt);
                        window(oh, ow, [&](std::size_t h, std::size_t w) { dx.at(n, c, h, w) += share; });
                      }
              });
}

Var max_pool2d(const Var& x, const PoolAttrs& a) {
  const Shape xs = x.shape();
  const Shape os = pool_output_shape(xs, a);
  const Tensor& xv = x.value();
  Tensor out(os);
  Tensor argmax(os);
  const long pad = static_cast<long>(a.pad);
  for (std::size_t n = 0; n < xs[0]; ++n)
    for (std::size_t c = 0; c < xs[1]; ++c)
      for (std::size_t oh = 0; oh < os[2]; ++oh)
        for (std::size_t ow = 0; ow < os[3]; ++ow) {
          const long h0 = static_cast<long>(oh * a.stride) - pad;
          const long w0 = static_cast<long>(ow * a.stride) - pad;
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (long h = std::max(h0, 0L); h < std::min(h0 + static_cast<long>(a.kernel), static_cast<long>(xs[2])); ++h)
            for (long w = std::max(w0, 0L); w < std::min(w0 + static_cast<long>(a.kernel), static_cast<long>(xs[3]));
                 ++w) {
              const std::size_t k = ((n * xs[1] + c) * xs[2] + static_cast<std::size_t>(h)) * xs[3] +
                                    static_cast<std::size_t>(w);
              // Strict comparison keeps the first maximum in scan order.
              if (xv[k] > best) {
                best = xv[k];
                best_idx = k;
              }
            }
          out.at(n, c, oh, ow) = best;
          argmax.at(n, c, oh, ow) = static_cast<double>(best_idx);
        }
  const Var ins[] = {x};
  SavedTensors saved;
  if (any_tracked(ins)) saved.push_back(std::make_shared<const Tensor>(std::move(argmax)));
  return emit("max_pool2d", std::move(out), ins,
              [](const Tensor& g, const SavedTensors& s, std::span<Tensor* const> gi) {
                if (!gi[0]) return;
                const Tensor& idx = *s[0];
                for (std::size_t i = 0; i < g.numel(); ++i) (*gi[0])[static_cast<std::size_t>(idx[i])] += g[i];
              },
              std::move(saved));
}

Var global_avg_pool(const Var& x) {
  require_rank("global_avg_pool", x, 4);
  const Shape xs = x.shape();
  const std::size_t S = xs[2] * xs[3];
  Tensor out(Shape{xs[0], xs[1]});
  const Tensor& xv = x.value();
  for (std::size_t nc = 0; nc < xs[0] * xs[1]; ++nc) {
    double acc = 0.0;
    for (std::size_t i = 0; i < S; ++i) acc += xv[nc * S + i];
    out[nc] = acc / static_cast<double>(S);
  }
  const Var ins[] = {x};
  return emit("global_avg_pool", std::move(out), ins,
              [S](const Tensor& g, const SavedTensors&, std::span<Tensor* const> gi) {
                if (!gi[0]) return;
                for (std::size_t nc = 0; nc < g.numel(); ++nc)
                  for (std::size_t i = 0; i < S; ++i) (*gi[0])[nc * S + i] += g[nc] / static_cast<double>(S);
              });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  const std::size_t N = x.shape()[0], In = x.shape()[1], Out = w.shape()[0];
  if (w.shape()[1] != In) shape_fail("linear", x.shape(), w.shape());
  const bool bias = b.defined();
  if (bias && b.shape() != Shape{Out}) shape_fail("linear", w.shape(), b.shape());
  Tensor out(Shape{N, Out});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Out; ++o) {
      double acc = bias ? b.value()[o] : 0.0;
      for (std::size_t i = 0; i < In; ++i) acc += xv[n * In + i] * wv[o * In + i];
      out[n * Out + o] = acc;
    }
  std::vector<Var> ins{x, w};
  if (bias) ins.push_back(b);
  SavedTensors saved;
  if (any_tracked(ins)) saved = {x.value_ptr(), w.value_ptr()};
  return emit(
      "linear", std::move(out), ins,
      [N, In, Out](const Tensor& g, const SavedTensors& s, std::span<Tensor* const> gi) {
        const Tensor& xv = *s[0];
        const Tensor& wv = *s[1];
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t o = 0; o < Out; ++o) {
            const double gv = g[n * Out + o];
            if (gi.size() > 2 && gi[2]) (*gi[2])[o] += gv;
            for (std::size_t i = 0; i < In; ++i) {
              if (gi[0]) (*gi[0])[n * In + i] += gv * wv[o * In + i];
              if (gi[1]) (*gi[1])[o * In + i] += gv * xv[n * In + i];
            }
          }
      },
      std::move(saved));
}

namespace {
void softmax_rows(const Tensor& x, Tensor& y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, x[r * cols + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[r * cols + c] = std::exp(x[r * cols + c] - mx);
      z += y[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] /= z;
  }
}
}  // namespace

Var softmax(const Var& x) {
  if (x.shape().empty()) throw ShapeError("softmax: scalar input");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.value().numel() / cols;
  Tensor y(x.shape());
  softmax_rows(x.value(), y, rows, cols);
  auto yp = std::make_shared<const Tensor>(std::move(y));
  const Var ins[] = {x};
  SavedTensors saved;
  if (any_tracked(ins)) saved.push_back(yp);
  return emit("softmax", yp, ins,
              [rows, cols](const Tensor& g, const SavedTensors& s, std::span<Tensor* const> gi) {
                if (!gi[0]) return;
                const Tensor& y = *s[0];
                for (std::size_t r = 0; r < rows; ++r) {
                  double dot = 0.0;
                  for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
                  for (std::size_t c = 0; c < cols; ++c)
                    (*gi[0])[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
                }
              },
              std::move(saved));
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t N = logits.shape()[0], C = logits.shape()[1];
  if (labels.size() != N) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(logits.shape()));
  }
  Tensor p(logits.shape());
  softmax_rows(logits.value(), p, N, C);
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " out of range for " + std::to_string(C) +
                       " classes");
    }
    // log-softmax computed directly for accuracy on confident predictions.
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, logits.value()[n * C + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(logits.value()[n * C + c] - mx);
    loss -= logits.value()[n * C + static_cast<std::size_t>(y)] - mx - std::log(z);
  }
  loss /= static_cast<double>(N);
  const Var ins[] = {logits};
  SavedTensors saved;
  if (any_tracked(ins)) saved.push_back(std::make_shared<const Tensor>(std::move(p)));
  std::vector<int> lab(labels.begin(), labels.end());
  return emit("cross_entropy", Tensor::scalar(loss), ins,
              [N, C, lab](const Tensor& g, const SavedTensors& s, std::span<Tensor* const> gi) {
                if (!gi[0]) return;
                const Tensor& p = *s[0];
                const double k = g[0] / static_cast<double>(N);
                for (std::size_t n = 0; n < N; ++n)
                  for (std::size_t c = 0; c < C; ++c) {
                    const double onehot = static_cast<std::size_t>(lab[n]) == c ? 1.0 : 0.0;
                    (*gi[0])[n * C + c] += k * (p[n * C + c] - onehot);
                  }
              },
              std::move(saved));
}

namespace {
std::vector<std::size_t> kept_indices(std::string_view op, const Var& alpha, const std::vector<bool>& keep) {
  require_rank(op, alpha, 1);
  if (keep.size() != alpha.shape()[0]) {
    throw ShapeError(std::string(op) + ": mask of length " + std::to_string(keep.size()) + " for alpha " +
                     shape_str(alpha.shape()));
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) idx.push_back(i);
  if (idx.empty()) throw InvariantError(std::string(op) + ": every entry is masked");
  return idx;
}
}  // namespace

Var masked_softmax(const Var& alpha, const std::vector<bool>& keep) {
  const auto idx = kept_indices("masked_softmax", alpha, keep);
  Tensor sub(Shape{idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) sub[i] = alpha.value()[idx[i]];
  Tensor y(Shape{idx.size()});
  softmax_rows(sub, y, 1, idx.size());
  auto yp = std::make_shared<const Tensor>(std::move(y));
  const Var ins[] = {alpha};
  SavedTensors saved;
  if (any_tracked(ins)) saved.push_back(yp);
  return emit("masked_softmax", yp, ins,
              [idx](const Tensor& g, const SavedTensors& s, std::span<Tensor* const> gi) {
                if (!gi[0]) return;
                const Tensor& y = *s[0];
                double dot = 0.0;
                for (std::size_t i = 0; i < idx.size(); ++i) dot += g[i] * y[i];
                for (std::size_t i = 0; i < idx.size(); ++i) (*gi[0])[idx[i]] += y[i] * (g[i] - dot);
              },
              std::move(saved));
}

Var masked_logsumexp(const Var& alpha, const std::vector<bool>& keep) {
  const auto idx = kept_indices("masked_logsumexp", alpha, keep);
  double mx = -std::numeric_limits<double>::infinity();
  for (auto i : idx) mx = std::max(mx, alpha.value()[i]);
  double z = 0.0;
  for (auto i : idx) z += std::exp(alpha.value()[i] - mx);
  Tensor p(Shape{idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) p[i] = std::exp(alpha.value()[idx[i]] - mx) / z;
  const Var ins[] = {alpha};
  SavedTensors saved;
  if (any_tracked(ins)) saved.push_back(std::make_shared<const Tensor>(std::move(p)));
  return emit("masked_logsumexp", Tensor::scalar(mx + std::log(z)), ins,
              [idx](const Tensor& g, const SavedTensors& s, std::span<Tensor* const> gi) {
                if (!gi[0]) return;
                for (std::size_t i = 0; i < idx.size(); ++i) (*gi[0])[idx[i]] += g[0] * (*s[0])[i];
              },
              std::move(saved));
}

Var weighted_sum(std::span<const Var> xs, const Var& w) {
  if (xs.empty()) throw ShapeError("weighted_sum: no inputs");
  require_rank("weighted_sum", w, 1);
  if (w.shape()[0] != xs.size()) {
    throw ShapeError("weighted_sum: " + std::to_string(xs.size()) + " inputs for weights " + shape_str(w.shape()));
  }
  Tensor out(xs[0].shape());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].shape() != out.shape()) shape_fail("weighted_sum", out.shape(), xs[i].shape());
    const double wi = w.value()[i];
    const auto src = xs[i].value().data();
    auto dst = out.data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += wi * src[k];
  }
  std::vector<Var> ins(xs.begin(), xs.end());
  ins.push_back(w);
  SavedTensors saved;
  if (any_tracked(ins)) {
    for (const auto& x : xs) saved.push_back(x.value_ptr());
    saved.push_back(w.value_ptr());
  }
  const std::size_t k = xs.size();
  return emit("weighted_sum", std::move(out), ins,
              [k](const Tensor& g, const SavedTensors& s, std::span<Tensor* const> gi) {
                const Tensor& wv = *s[k];
                for (std::size_t i = 0; i < k; ++i) {
                  if (gi[i]) {
                    auto d = gi[i]->data();
                    for (std::size_t e = 0; e < d.size(); ++e) d[e] += wv[i] * g[e];
                  }
                  if (gi[k]) {
                    const Tensor& xi = *s[i];
                    double dot = 0.0;
                    for (std::size_t e = 0; e < g.numel(); ++e) dot += g[e] * xi[e];
                    (*gi[k])[i] += dot;
                  }
                }
              },
              std::move(saved));
}

Var concat_channels(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& x : xs) require_rank("concat_channels", x, 4);
  const Shape s0 = xs[0].shape();
  std::size_t C = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) shape_fail("concat_channels", s0, s);
    C += s[1];
  }
  const std::size_t N = s0[0], S = s0[2] * s0[3];
  Tensor out(Shape{N, C, s0[2], s0[3]});
  std::vector<std::size_t> widths;
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t off = 0;
    for (const auto& x : xs) {
      const std::size_t ci = x.shape()[1];
      std::copy_n(x.value().data().begin() + static_cast<long>(n * ci * S), ci * S,
                  out.data().begin() + static_cast<long>((n * C + off) * S));
      off += ci;
    }
  }
  for (const auto& x : xs) widths.push_back(x.shape()[1]);
  return emit("concat_channels", std::move(out), xs,
              [N, C, S, widths](const Tensor& g, const SavedTensors&, std::span<Tensor* const> gi) {
                for (std::size_t n = 0; n < N; ++n) {
                  std::size_t off = 0;
                  for (std::size_t j = 0; j < widths.size(); ++j) {
                    if (gi[j]) {
                      for (std::size_t e = 0; e < widths[j] * S; ++e)
                        (*gi[j])[n * widths[j] * S + e] += g[(n * C + off) * S + e];
                    }
                    off += widths[j];
                  }
                }
              });
}

Var select_channels(const Var& x, std::span<const std::size_t> channels) {
  require_rank("select_channels", x, 4);
  const Shape xs = x.shape();
  for (auto c : channels)
    if (c >= xs[1]) throw ShapeError("select_channels: channel " + std::to_string(c) + " of " + shape_str(xs));
  const std::size_t N = xs[0], C = xs[1], S = xs[2] * xs[3], K = channels.size();
  Tensor out(Shape{N, K, xs[2], xs[3]});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k)
      std::copy_n(x.value().data().begin() + static_cast<long>((n * C + channels[k]) * S), S,
                  out.data().begin() + static_cast<long>((n * K + k) * S));
  std::vector<std::size_t> ch(channels.begin(), channels.end());
  const Var ins[] = {x};
  return emit("select_channels", std::move(out), ins,
              [N, C, S, ch](const Tensor& g, const SavedTensors&, std::span<Tensor* const> gi) {
                if (!gi[0]) return;
                const std::size_t K = ch.size();
                for (std::size_t n = 0; n < N; ++n)
                  for (std::size_t k = 0; k < K; ++k)
                    for (std::size_t e = 0; e < S; ++e) (*gi[0])[(n * C + ch[k]) * S + e] += g[(n * K + k) * S + e];
              });
}

Var channel_shuffle(const Var& x, std::size_t groups) {
  require_rank("channel_shuffle", x, 4);
  const Shape xs = x.shape();
  if (groups == 0 || xs[1] % groups != 0) {
    throw ShapeError("channel_shuffle: " + std::to_string(groups) + " groups for " + shape_str(xs));
  }
  const std::size_t N = xs[0], C = xs[1], S = xs[2] * xs[3], per = C / groups;
  // Input channel g*per + j lands at output channel j*groups + g.
  auto dest = [groups, per](std::size_t c) { return (c % per) * groups + c / per; };
  Tensor out(xs);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      std::copy_n(x.value().data().begin() + static_cast<long>((n * C + c) * S), S,
                  out.data().begin() + static_cast<long>((n * C + dest(c)) * S));
  const Var ins[] = {x};
  return emit("channel_shuffle", std::move(out), ins,
              [N, C, S, dest](const Tensor& g, const SavedTensors&, std::span<Tensor* const> gi) {
                if (!gi[0]) return;
                for (std::size_t n = 0; n < N; ++n)
                  for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t e = 0; e < S; ++e)
                      (*gi[0])[(n * C + c) * S + e] += g[(n * C + dest(c)) * S + e];
              });
}

Var zeros(const Shape& shape) { return Var::constant(Tensor(shape)); }

std::string_view primitive_name(Primitive p) {
  switch (p) {
    case Primitive::kIdentity: return "identity";
    case Primitive::kZero: return "zero";
    case Primitive::kAdd: return "add";
    case Primitive::kScale: return "scale";
    case Primitive::kRelu: return "relu";
    case Primitive::kSum: return "sum";
    case Primitive::kConv2d: return "conv2d";
    case Primitive::kChannelNorm: return "channel_norm";
    case Primitive::kAvgPool: return "avg_pool2d";
    case Primitive::kMaxPool: return "max_pool2d";
    case Primitive::kGlobalAvgPool: return "global_avg_pool";
    case Primitive::kLinear: return "linear";
    case Primitive::kSoftmax: return "softmax";
    case Primitive::kCrossEntropy: return "cross_entropy";
    case Primitive::kMaskedSoftmax: return "masked_softmax";
    case Primitive::kMaskedLogSumExp: return "masked_logsumexp";
    case Primitive::kWeightedSum: return "weighted_sum";
    case Primitive::kConcat: return "concat_channels";
    case Primitive::kSelectChannels: return "select_channels";
    case Primitive::kChannelShuffle: return "channel_shuffle";
  }
  return "unknown";
}

Var forward_primitive(Primitive kind, std::span<const Var> in, const Attrs& attrs) {
  auto need = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi) {
      throw ContractError(std::string(primitive_name(kind)) + ": got " + std::to_string(in.size()) + " inputs");
    }
  };
  switch (kind) {
    case Primitive::kIdentity: need(1, 1); return identity(in[0]);
    case Primitive::kZero: need(1, 1); return zero(in[0], attrs.stride);
    case Primitive::kAdd: need(2, 2); return add(in[0], in[1]);
    case Primitive::kScale: need(1, 1); return scale(in[0], attrs.factor);
    case Primitive::kRelu: need(1, 1); return relu(in[0]);
    case Primitive::kSum: need(1, 1); return sum(in[0]);
    case Primitive::kConv2d: need(2, 2); return conv2d(in[0], in[1], attrs.conv);
    case Primitive::kChannelNorm:
      need(1, 3);
      return in.size() == 3 ? channel_norm(in[0], in[1], in[2], attrs.eps) : channel_norm(in[0], Var{}, Var{}, attrs.eps);
    case Primitive::kAvgPool: need(1, 1); return avg_pool2d(in[0], attrs.pool);
    case Primitive::kMaxPool: need(1, 1); return max_pool2d(in[0], attrs.pool);
    case Primitive::kGlobalAvgPool: need(1, 1); return global_avg_pool(in[0]);
    case Primitive::kLinear: need(2, 3); return linear(in[0], in[1], in.size() == 3 ? in[2] : Var{});
    case Primitive::kSoftmax: need(1, 1); return softmax(in[0]);
    case Primitive::kCrossEntropy: need(1, 1); return cross_entropy(in[0], attrs.labels);
    case Primitive::kMaskedSoftmax: need(1, 1); return masked_softmax(in[0], attrs.keep);
    case Primitive::kMaskedLogSumExp: need(1, 1); return masked_logsumexp(in[0], attrs.keep);
    case Primitive::kWeightedSum: need(2, SIZE_MAX); return weighted_sum(in.first(in.size() - 1), in.back());
    case Primitive::kConcat: need(1, SIZE_MAX); return concat_channels(in);
    case Primitive::kSelectChannels: need(1, 1); return select_channels(in[0], attrs.channels);
    case Primitive::kChannelShuffle: need(1, 1); return channel_shuffle(in[0], attrs.groups);
  }
  throw ContractError("forward_primitive: unknown kind");
}

}  // namespace zonas::ops
