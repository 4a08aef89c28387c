#include "ulmv/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace ulmv {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_val(double x) {
  if (x > 30.0) return x;          // identity branch, error < 1e-13
  return std::log1p(std::exp(x));  // safe for any x <= 30
}

/// Records an elementwise unary op whose local derivative depends only on
/// the input value.
template <class Fwd, class Dfn>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Dfn dfn) {
  Tensor y(x.shape());
  const double* xd = x.data();
  double* yd = y.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = fwd(xd[i]);

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x);
    if (xid >= 0) {
      Tensor xs = x;
      int id = tp->push_node(name, {xid}, n,
                             [xs, xid, dfn, n](Tape& t, const std::vector<double>& dy) {
                               std::vector<double> dx(static_cast<size_t>(n));
                               const double* xd2 = xs.data();
                               for (int64_t i = 0; i < n; ++i)
                                 dx[static_cast<size_t>(i)] =
                                     dy[static_cast<size_t>(i)] * dfn(xd2[i]);
                               t.add_to_buffer(xid, dx.data(), n);
                             });
      bind_node(y, id);
    }
  }
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(),
          "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y(a.shape());
  int64_t n = a.numel();
  const double* ad = a.data();
  const double* bd = b.data();
  double* yd = y.data();
  for (int64_t i = 0; i < n; ++i) yd[i] = ad[i] + bd[i];

  Tape* tp = active_tape();
  if (tp) {
    int aid = tp->id_of(a), bid = tp->id_of(b);
    if (aid >= 0 || bid >= 0) {
      int id = tp->push_node("add", {aid, bid}, n,
                             [aid, bid, n](Tape& t, const std::vector<double>& dy) {
                               t.add_to_buffer(aid, dy.data(), n);
                               t.add_to_buffer(bid, dy.data(), n);
                             });
      bind_node(y, id);
    }
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(),
          "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y(a.shape());
  int64_t n = a.numel();
  const double* ad = a.data();
  const double* bd = b.data();
  double* yd = y.data();
  for (int64_t i = 0; i < n; ++i) yd[i] = ad[i] * bd[i];

  Tape* tp = active_tape();
  if (tp) {
    int aid = tp->id_of(a), bid = tp->id_of(b);
    if (aid >= 0 || bid >= 0) {
      Tensor as = a, bs = b;
      int id = tp->push_node("mul", {aid, bid}, n,
                             [as, bs, aid, bid, n](Tape& t, const std::vector<double>& dy) {
                               std::vector<double> buf(static_cast<size_t>(n));
                               if (aid >= 0) {
                                 const double* bd2 = bs.data();
                                 for (int64_t i = 0; i < n; ++i)
                                   buf[static_cast<size_t>(i)] =
                                       dy[static_cast<size_t>(i)] * bd2[i];
                                 t.add_to_buffer(aid, buf.data(), n);
                               }
                               if (bid >= 0) {
                                 const double* ad2 = as.data();
                                 for (int64_t i = 0; i < n; ++i)
                                   buf[static_cast<size_t>(i)] =
                                       dy[static_cast<size_t>(i)] * ad2[i];
                                 t.add_to_buffer(bid, buf.data(), n);
                               }
                             });
      bind_node(y, id);
    }
  }
  return y;
}

Tensor scale(const Tensor& x, double c) {
  return unary_op("scale", x, [c](double v) { return c * v; },
                  [c](double) { return c; });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  require(s.numel() == 1, "scale_by: s must be a 1-element tensor");
  double c = s[0];
  Tensor y(x.shape());
  int64_t n = x.numel();
  const double* xd = x.data();
  double* yd = y.data();
  for (int64_t i = 0; i < n; ++i) yd[i] = c * xd[i];

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x), sid = tp->id_of(s);
    if (xid >= 0 || sid >= 0) {
      Tensor xs = x;
      int id = tp->push_node("scale_by", {xid, sid}, n,
                             [xs, xid, sid, c, n](Tape& t, const std::vector<double>& dy) {
                               if (xid >= 0) {
                                 std::vector<double> dx(static_cast<size_t>(n));
                                 for (int64_t i = 0; i < n; ++i)
                                   dx[static_cast<size_t>(i)] = c * dy[static_cast<size_t>(i)];
                                 t.add_to_buffer(xid, dx.data(), n);
                               }
                               if (sid >= 0) {
                                 double ds = 0.0;
                                 const double* xd2 = xs.data();
                                 for (int64_t i = 0; i < n; ++i)
                                   ds += dy[static_cast<size_t>(i)] * xd2[i];
                                 t.add_to_buffer(sid, &ds, 1);
                               }
                             });
      bind_node(y, id);
    }
  }
  return y;
}

Tensor neg_exp(const Tensor& x) {
  return unary_op("neg_exp", x, [](double v) { return -std::exp(v); },
                  [](double v) { return -std::exp(v); });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op("sigmoid", x, stable_sigmoid, [](double v) {
    double s = stable_sigmoid(v);
    return s * (1.0 - s);
  });
}

Tensor silu(const Tensor& x) {
  return unary_op("silu", x, [](double v) { return v * stable_sigmoid(v); },
                  [](double v) {
                    double s = stable_sigmoid(v);
                    return s * (1.0 + v * (1.0 - s));
                  });
}

Tensor softplus(const Tensor& x) {
  return unary_op("softplus", x, softplus_val, stable_sigmoid);
}

Tensor relu(const Tensor& x) {
  return unary_op("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                  [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  const double* xd = x.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += xd[i];
  Tensor y = Tensor::scalar(acc);

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x);
    if (xid >= 0) {
      int id = tp->push_node("sum_all", {xid}, 1,
                             [xid, n](Tape& t, const std::vector<double>& dy) {
                               std::vector<double> dx(static_cast<size_t>(n), dy[0]);
                               t.add_to_buffer(xid, dx.data(), n);
                             });
      bind_node(y, id);
    }
  }
  return y;
}

Tensor mean_all(const Tensor& x) {
  int64_t n = x.numel();
  double acc = 0.0;
  const double* xd = x.data();
  for (int64_t i = 0; i < n; ++i) acc += xd[i];
  Tensor y = Tensor::scalar(acc / static_cast<double>(n));

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x);
    if (xid >= 0) {
      int id = tp->push_node("mean_all", {xid}, 1,
                             [xid, n](Tape& t, const std::vector<double>& dy) {
                               std::vector<double> dx(static_cast<size_t>(n),
                                                      dy[0] / static_cast<double>(n));
                               t.add_to_buffer(xid, dx.data(), n);
                             });
      bind_node(y, id);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// linear

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(w.rank() == 2, "linear: weight must be [F_out,F_in]");
  int64_t f_in = w.dim(1), f_out = w.dim(0);
  require(x.rank() >= 1 && x.dim(-1) == f_in,
          "linear: input trailing axis " + shape_str(x.shape()) +
              " does not match weight " + shape_str(w.shape()));
  if (b.defined())
    require(b.numel() == f_out, "linear: bias length must equal F_out");

  int64_t m = x.numel() / f_in;
  Shape out_shape = x.shape();
  out_shape.back() = f_out;
  Tensor y(out_shape);

  ConstMatMap xm(x.data(), m, f_in);
  ConstMatMap wm(w.data(), f_out, f_in);
  MatMap ym(y.data(), m, f_out);
  ym.noalias() = xm * wm.transpose();
  if (b.defined()) {
    ConstMatMap bm(b.data(), 1, f_out);
    ym.rowwise() += bm.row(0);
  }

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x), wid = tp->id_of(w), bid = b.defined() ? tp->id_of(b) : -1;
    if (xid >= 0 || wid >= 0 || bid >= 0) {
      Tensor xs = x, ws = w;
      int id = tp->push_node(
          "linear", {xid, wid, bid}, y.numel(),
          [xs, ws, xid, wid, bid, m, f_in, f_out](Tape& t, const std::vector<double>& dy) {
            ConstMatMap dym(dy.data(), m, f_out);
            if (xid >= 0) {
              std::vector<double> dx(static_cast<size_t>(m * f_in));
              MatMap dxm(dx.data(), m, f_in);
              ConstMatMap wm2(ws.data(), f_out, f_in);
              dxm.noalias() = dym * wm2;
              t.add_to_buffer(xid, dx.data(), m * f_in);
            }
            if (wid >= 0) {
              std::vector<double> dw(static_cast<size_t>(f_out * f_in));
              MatMap dwm(dw.data(), f_out, f_in);
              ConstMatMap xm2(xs.data(), m, f_in);
              dwm.noalias() = dym.transpose() * xm2;
              t.add_to_buffer(wid, dw.data(), f_out * f_in);
            }
            if (bid >= 0) {
              std::vector<double> db(static_cast<size_t>(f_out));
              for (int64_t j = 0; j < f_out; ++j) db[static_cast<size_t>(j)] = dym.col(j).sum();
              t.add_to_buffer(bid, db.data(), f_out);
            }
          });
      bind_node(y, id);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// conv2d (im2col + GEMM)

namespace {

struct ConvDims {
  int64_t n, c_in, h, w, c_out, k;
  int stride, padding, dilation;
  int64_t h_out, w_out;
};

ConvDims conv_dims(const Tensor& x, const Tensor& weight, int stride, int padding,
                   int dilation) {
  require(x.rank() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  require(weight.rank() == 4 && weight.dim(2) == weight.dim(3),
          "conv2d: weight must be [C_out,C_in,k,k], got " + shape_str(weight.shape()));
  require(stride >= 1 && dilation >= 1 && padding >= 0, "conv2d: bad stride/padding/dilation");
  ConvDims d;
  d.n = x.dim(0);
  d.c_in = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.c_out = weight.dim(0);
  d.k = weight.dim(2);
  d.stride = stride;
  d.padding = padding;
  d.dilation = dilation;
  require(weight.dim(1) == d.c_in,
          "conv2d: input has " + std::to_string(d.c_in) + " channels but weight expects " +
              std::to_string(weight.dim(1)));
  int64_t eff = static_cast<int64_t>(dilation) * (d.k - 1) + 1;
  require(d.h + 2 * padding >= eff && d.w + 2 * padding >= eff,
          "conv2d: kernel does not fit input " + shape_str(x.shape()));
  d.h_out = (d.h + 2 * padding - eff) / stride + 1;
  d.w_out = (d.w + 2 * padding - eff) / stride + 1;
  return d;
}

// col layout: [C_in*k*k, H_out*W_out]
void im2col(const double* img, const ConvDims& d, double* col) {
  int64_t out_hw = d.h_out * d.w_out;
  int64_t row = 0;
  for (int64_t c = 0; c < d.c_in; ++c) {
    const double* src = img + c * d.h * d.w;
    for (int64_t ki = 0; ki < d.k; ++ki) {
      for (int64_t kj = 0; kj < d.k; ++kj, ++row) {
        double* dst = col + row * out_hw;
        for (int64_t oy = 0; oy < d.h_out; ++oy) {
          int64_t iy = oy * d.stride - d.padding + ki * d.dilation;
          if (iy < 0 || iy >= d.h) {
            std::fill(dst, dst + d.w_out, 0.0);
            dst += d.w_out;
            continue;
          }
          for (int64_t ox = 0; ox < d.w_out; ++ox) {
            int64_t ix = ox * d.stride - d.padding + kj * d.dilation;
            *dst++ = (ix >= 0 && ix < d.w) ? src[iy * d.w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvDims& d, double* img) {
  int64_t out_hw = d.h_out * d.w_out;
  int64_t row = 0;
  for (int64_t c = 0; c < d.c_in; ++c) {
    double* dst = img + c * d.h * d.w;
    for (int64_t ki = 0; ki < d.k; ++ki) {
      for (int64_t kj = 0; kj < d.k; ++kj, ++row) {
        const double* src = col + row * out_hw;
        for (int64_t oy = 0; oy < d.h_out; ++oy) {
          int64_t iy = oy * d.stride - d.padding + ki * d.dilation;
          if (iy < 0 || iy >= d.h) {
            src += d.w_out;
            continue;
          }
          for (int64_t ox = 0; ox < d.w_out; ++ox) {
            int64_t ix = ox * d.stride - d.padding + kj * d.dilation;
            if (ix >= 0 && ix < d.w) dst[iy * d.w + ix] += src[ox];
          }
          src += d.w_out;
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding,
              int dilation) {
  ConvDims d = conv_dims(x, w, stride, padding, dilation);
  if (b.defined()) require(b.numel() == d.c_out, "conv2d: bias length must equal C_out");

  Tensor y({d.n, d.c_out, d.h_out, d.w_out});
  int64_t col_rows = d.c_in * d.k * d.k;
  int64_t out_hw = d.h_out * d.w_out;
  int64_t in_sz = d.c_in * d.h * d.w;
  int64_t out_sz = d.c_out * out_hw;
  const double* xd = x.data();
  const double* wd = w.data();
  const double* bd = b.defined() ? b.data() : nullptr;
  double* yd = y.data();

  parallel_for(d.n, [&](int64_t lo, int64_t hi) {
    std::vector<double> col(static_cast<size_t>(col_rows * out_hw));
    for (int64_t i = lo; i < hi; ++i) {
      im2col(xd + i * in_sz, d, col.data());
      ConstMatMap wm(wd, d.c_out, col_rows);
      ConstMatMap cm(col.data(), col_rows, out_hw);
      MatMap ym(yd + i * out_sz, d.c_out, out_hw);
      ym.noalias() = wm * cm;
      if (bd) {
        for (int64_t c = 0; c < d.c_out; ++c) ym.row(c).array() += bd[c];
      }
    }
  });

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x), wid = tp->id_of(w), bid = b.defined() ? tp->id_of(b) : -1;
    if (xid >= 0 || wid >= 0 || bid >= 0) {
      Tensor xs = x, ws = w;
      int id = tp->push_node(
          "conv2d", {xid, wid, bid}, y.numel(),
          [xs, ws, xid, wid, bid, d, col_rows, out_hw, in_sz, out_sz](
              Tape& t, const std::vector<double>& dy) {
            const double* xd2 = xs.data();
            if (xid >= 0) {
              std::vector<double> dx(static_cast<size_t>(d.n * in_sz), 0.0);
              const double* wd2 = ws.data();
              parallel_for(d.n, [&](int64_t lo, int64_t hi) {
                std::vector<double> dcol(static_cast<size_t>(col_rows * out_hw));
                for (int64_t i = lo; i < hi; ++i) {
                  ConstMatMap wm(wd2, d.c_out, col_rows);
                  ConstMatMap dym(dy.data() + i * out_sz, d.c_out, out_hw);
                  MatMap dcm(dcol.data(), col_rows, out_hw);
                  dcm.noalias() = wm.transpose() * dym;
                  col2im_add(dcol.data(), d, dx.data() + i * in_sz);
                }
              });
              t.add_to_buffer(xid, dx.data(), d.n * in_sz);
            }
            if (wid >= 0) {
              // sequential over the batch so accumulation order is fixed
              std::vector<double> dw(static_cast<size_t>(d.c_out * col_rows), 0.0);
              std::vector<double> col(static_cast<size_t>(col_rows * out_hw));
              MatMap dwm(dw.data(), d.c_out, col_rows);
              for (int64_t i = 0; i < d.n; ++i) {
                im2col(xd2 + i * in_sz, d, col.data());
                ConstMatMap dym(dy.data() + i * out_sz, d.c_out, out_hw);
                ConstMatMap cm(col.data(), col_rows, out_hw);
                dwm.noalias() += dym * cm.transpose();
              }
              t.add_to_buffer(wid, dw.data(), d.c_out * col_rows);
            }
            if (bid >= 0) {
              std::vector<double> db(static_cast<size_t>(d.c_out), 0.0);
              for (int64_t i = 0; i < d.n; ++i) {
                ConstMatMap dym(dy.data() + i * out_sz, d.c_out, out_hw);
                for (int64_t c = 0; c < d.c_out; ++c) db[static_cast<size_t>(c)] += dym.row(c).sum();
              }
              t.add_to_buffer(bid, db.data(), d.c_out);
            }
          });
      bind_node(y, id);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// conv1d_causal

Tensor conv1d_causal(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() == 3, "conv1d_causal: input must be [B,D,L]");
  require(w.rank() == 3 && w.dim(1) == 1,
          "conv1d_causal: weight must be [D,1,k] (depthwise)");
  int64_t bsz = x.dim(0), dch = x.dim(1), len = x.dim(2), k = w.dim(2);
  require(k >= 1, "conv1d_causal: kernel width must be >= 1");
  require(w.dim(0) == dch, "conv1d_causal: weight channels must match input channels");
  if (b.defined()) require(b.numel() == dch, "conv1d_causal: bias length must equal D");

  Tensor y(x.shape());
  const double* xd = x.data();
  const double* wd = w.data();
  const double* bdp = b.defined() ? b.data() : nullptr;
  double* yd = y.data();

  for (int64_t bi = 0; bi < bsz; ++bi) {
    for (int64_t c = 0; c < dch; ++c) {
      const double* xr = xd + (bi * dch + c) * len;
      const double* wr = wd + c * k;
      double* yr = yd + (bi * dch + c) * len;
      double bias = bdp ? bdp[c] : 0.0;
      for (int64_t t = 0; t < len; ++t) {
        double acc = bias;
        // tap j reads x[t - (k-1) + j]
        int64_t j0 = std::max<int64_t>(0, k - 1 - t);
        for (int64_t j = j0; j < k; ++j) acc += wr[j] * xr[t - (k - 1) + j];
        yr[t] = acc;
      }
    }
  }

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x), wid = tp->id_of(w), bid = b.defined() ? tp->id_of(b) : -1;
    if (xid >= 0 || wid >= 0 || bid >= 0) {
      Tensor xs = x, ws = w;
      int id = tp->push_node(
          "conv1d_causal", {xid, wid, bid}, y.numel(),
          [xs, ws, xid, wid, bid, bsz, dch, len, k](Tape& t, const std::vector<double>& dy) {
            const double* xd2 = xs.data();
            const double* wd2 = ws.data();
            if (xid >= 0) {
              std::vector<double> dx(static_cast<size_t>(bsz * dch * len), 0.0);
              for (int64_t bi = 0; bi < bsz; ++bi)
                for (int64_t c = 0; c < dch; ++c) {
                  const double* dyr = dy.data() + (bi * dch + c) * len;
                  const double* wr = wd2 + c * k;
                  double* dxr = dx.data() + (bi * dch + c) * len;
                  for (int64_t tpos = 0; tpos < len; ++tpos) {
                    int64_t j0 = std::max<int64_t>(0, k - 1 - tpos);
                    for (int64_t j = j0; j < k; ++j)
                      dxr[tpos - (k - 1) + j] += dyr[tpos] * wr[j];
                  }
                }
              t.add_to_buffer(xid, dx.data(), bsz * dch * len);
            }
            if (wid >= 0) {
              std::vector<double> dw(static_cast<size_t>(dch * k), 0.0);
              for (int64_t bi = 0; bi < bsz; ++bi)
                for (int64_t c = 0; c < dch; ++c) {
                  const double* dyr = dy.data() + (bi * dch + c) * len;
                  const double* xr = xd2 + (bi * dch + c) * len;
                  double* dwr = dw.data() + c * k;
                  for (int64_t tpos = 0; tpos < len; ++tpos) {
                    int64_t j0 = std::max<int64_t>(0, k - 1 - tpos);
                    for (int64_t j = j0; j < k; ++j)
                      dwr[j] += dyr[tpos] * xr[tpos - (k - 1) + j];
                  }
                }
              t.add_to_buffer(wid, dw.data(), dch * k);
            }
            if (bid >= 0) {
              std::vector<double> db(static_cast<size_t>(dch), 0.0);
              for (int64_t bi = 0; bi < bsz; ++bi)
                for (int64_t c = 0; c < dch; ++c) {
                  const double* dyr = dy.data() + (bi * dch + c) * len;
                  for (int64_t tpos = 0; tpos < len; ++tpos) db[static_cast<size_t>(c)] += dyr[tpos];
                }
              t.add_to_buffer(bid, db.data(), dch);
            }
          });
      bind_node(y, id);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// pooling

Tensor max_pool2d(const Tensor& x, int k) {
  require(x.rank() == 4, "max_pool2d: input must be [N,C,H,W]");
  require(k >= 1, "max_pool2d: window must be >= 1");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t ho = h / k, wo = w / k;
  require(ho >= 1 && wo >= 1,
          "max_pool2d: input " + shape_str(x.shape()) + " smaller than window");

  Tensor y({n, c, ho, wo});
  std::vector<int64_t> argmax(static_cast<size_t>(y.numel()));
  const double* xd = x.data();
  double* yd = y.data();
  int64_t planes = n * c;
  for (int64_t p = 0; p < planes; ++p) {
    const double* src = xd + p * h * w;
    double* dst = yd + p * ho * wo;
    int64_t* am = argmax.data() + p * ho * wo;
    for (int64_t oy = 0; oy < ho; ++oy)
      for (int64_t ox = 0; ox < wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        int64_t best_idx = -1;
        for (int64_t dy0 = 0; dy0 < k; ++dy0)
          for (int64_t dx0 = 0; dx0 < k; ++dx0) {
            int64_t idx = (oy * k + dy0) * w + ox * k + dx0;
            if (src[idx] > best) {
              best = src[idx];
              best_idx = idx;
            }
          }
        dst[oy * wo + ox] = best;
        am[oy * wo + ox] = p * h * w + best_idx;
      }
  }

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x);
    if (xid >= 0) {
      int64_t xn = x.numel(), yn = y.numel();
      int id = tp->push_node("max_pool2d", {xid}, yn,
                             [xid, xn, yn, argmax](Tape& t, const std::vector<double>& dy) {
                               std::vector<double> dx(static_cast<size_t>(xn), 0.0);
                               for (int64_t i = 0; i < yn; ++i)
                                 dx[static_cast<size_t>(argmax[static_cast<size_t>(i)])] +=
                                     dy[static_cast<size_t>(i)];
                               t.add_to_buffer(xid, dx.data(), xn);
                             });
      bind_node(y, id);
    }
  }
  return y;
}

namespace {

Tensor spatial_mean(const Tensor& x, bool keep_spatial, const char* name) {
  require(x.rank() == 4, std::string(name) + ": input must be [N,C,H,W]");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t hw = h * w;
  Tensor y = keep_spatial ? Tensor({n, c, 1, 1}) : Tensor({n, c});
  const double* xd = x.data();
  double* yd = y.data();
  for (int64_t p = 0; p < n * c; ++p) {
    double acc = 0.0;
    const double* src = xd + p * hw;
    for (int64_t i = 0; i < hw; ++i) acc += src[i];
    yd[p] = acc / static_cast<double>(hw);
  }

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x);
    if (xid >= 0) {
      int id = tp->push_node(name, {xid}, y.numel(),
                             [xid, n, c, hw](Tape& t, const std::vector<double>& dy) {
                               std::vector<double> dx(static_cast<size_t>(n * c * hw));
                               for (int64_t p = 0; p < n * c; ++p) {
                                 double g = dy[static_cast<size_t>(p)] / static_cast<double>(hw);
                                 double* dst = dx.data() + p * hw;
                                 for (int64_t i = 0; i < hw; ++i) dst[i] = g;
                               }
                               t.add_to_buffer(xid, dx.data(), n * c * hw);
                             });
      bind_node(y, id);
    }
  }
  return y;
}

}  // namespace

Tensor adaptive_avg_pool2d(const Tensor& x) { return spatial_mean(x, true, "adaptive_avg_pool2d"); }

Tensor global_avg_pool(const Tensor& x) { return spatial_mean(x, false, "global_avg_pool"); }

// ---------------------------------------------------------------------------
// layer_norm

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  int64_t f = x.dim(-1);
  require(f >= 1 && eps > 0.0, "layer_norm: need F >= 1 and eps > 0");
  require(gamma.numel() == f && beta.numel() == f,
          "layer_norm: gamma/beta must have length F=" + std::to_string(f));
  int64_t rows = x.numel() / f;

  Tensor y(x.shape());
  std::vector<double> mean(static_cast<size_t>(rows)), inv_std(static_cast<size_t>(rows));
  const double* xd = x.data();
  const double* gd = gamma.data();
  const double* bd = beta.data();
  double* yd = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xd + r * f;
    double mu = 0.0;
    for (int64_t j = 0; j < f; ++j) mu += xr[j];
    mu /= static_cast<double>(f);
    double var = 0.0;
    for (int64_t j = 0; j < f; ++j) {
      double d = xr[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(f);  // population variance
    double is = 1.0 / std::sqrt(var + eps);
    mean[static_cast<size_t>(r)] = mu;
    inv_std[static_cast<size_t>(r)] = is;
    double* yr = yd + r * f;
    for (int64_t j = 0; j < f; ++j) yr[j] = (xr[j] - mu) * is * gd[j] + bd[j];
  }

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x), gid = tp->id_of(gamma), bid = tp->id_of(beta);
    if (xid >= 0 || gid >= 0 || bid >= 0) {
      Tensor xs = x, gs = gamma;
      int id = tp->push_node(
          "layer_norm", {xid, gid, bid}, y.numel(),
          [xs, gs, xid, gid, bid, rows, f, mean, inv_std](Tape& t,
                                                          const std::vector<double>& dy) {
            const double* xd2 = xs.data();
            const double* gd2 = gs.data();
            std::vector<double> dx, dg, db;
            if (xid >= 0) dx.assign(static_cast<size_t>(rows * f), 0.0);
            if (gid >= 0) dg.assign(static_cast<size_t>(f), 0.0);
            if (bid >= 0) db.assign(static_cast<size_t>(f), 0.0);
            for (int64_t r = 0; r < rows; ++r) {
              const double* xr = xd2 + r * f;
              const double* dyr = dy.data() + r * f;
              double mu = mean[static_cast<size_t>(r)];
              double is = inv_std[static_cast<size_t>(r)];
              if (gid >= 0 || bid >= 0) {
                for (int64_t j = 0; j < f; ++j) {
                  double xhat = (xr[j] - mu) * is;
                  if (gid >= 0) dg[static_cast<size_t>(j)] += dyr[j] * xhat;
                  if (bid >= 0) db[static_cast<size_t>(j)] += dyr[j];
                }
              }
              if (xid >= 0) {
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (int64_t j = 0; j < f; ++j) {
                  double xhat = (xr[j] - mu) * is;
                  double dxhat = dyr[j] * gd2[j];
                  sum_dxhat += dxhat;
                  sum_dxhat_xhat += dxhat * xhat;
                }
                double* dxr = dx.data() + r * f;
                double inv_f = 1.0 / static_cast<double>(f);
                for (int64_t j = 0; j < f; ++j) {
                  double xhat = (xr[j] - mu) * is;
                  double dxhat = dyr[j] * gd2[j];
                  dxr[j] = is * (dxhat - inv_f * sum_dxhat - xhat * inv_f * sum_dxhat_xhat);
                }
              }
            }
            if (xid >= 0) t.add_to_buffer(xid, dx.data(), rows * f);
            if (gid >= 0) t.add_to_buffer(gid, dg.data(), f);
            if (bid >= 0) t.add_to_buffer(bid, db.data(), f);
          });
      bind_node(y, id);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// batch_norm2d

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, BnMode mode, double momentum,
                    double eps, std::vector<double>* collect) {
  require(x.rank() == 4, "batch_norm2d: input must be [N,C,H,W]");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(gamma.numel() == c && beta.numel() == c && running_mean.numel() == c &&
              running_var.numel() == c,
          "batch_norm2d: parameter length must equal C");
  int64_t hw = h * w;
  int64_t cnt = n * hw;

  std::vector<double> mu(static_cast<size_t>(c)), var(static_cast<size_t>(c));
  const double* xd = x.data();
  if (mode == BnMode::Eval) {
    for (int64_t ch = 0; ch < c; ++ch) {
      mu[static_cast<size_t>(ch)] = running_mean[ch];
      var[static_cast<size_t>(ch)] = running_var[ch];
    }
  } else {
    for (int64_t ch = 0; ch < c; ++ch) {
      double s = 0.0, s2 = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double* src = xd + (i * c + ch) * hw;
        for (int64_t j = 0; j < hw; ++j) {
          s += src[j];
          s2 += src[j] * src[j];
        }
      }
      double m = s / static_cast<double>(cnt);
      mu[static_cast<size_t>(ch)] = m;
      var[static_cast<size_t>(ch)] = s2 / static_cast<double>(cnt) - m * m;
      if (mode == BnMode::Train) {
        double unbiased = cnt > 1 ? var[static_cast<size_t>(ch)] * static_cast<double>(cnt) /
                                        static_cast<double>(cnt - 1)
                                  : var[static_cast<size_t>(ch)];
        running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * m;
        running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * unbiased;
      } else if (collect) {
        // Collect: exact sums for a later moment rebuild.
        (*collect)[static_cast<size_t>(ch)] += s;
        (*collect)[static_cast<size_t>(c + ch)] += s2;
      }
    }
    if (mode == BnMode::Collect && collect) (*collect)[static_cast<size_t>(2 * c)] += static_cast<double>(cnt);
  }

  Tensor y(x.shape());
  std::vector<double> inv_std(static_cast<size_t>(c));
  for (int64_t ch = 0; ch < c; ++ch)
    inv_std[static_cast<size_t>(ch)] = 1.0 / std::sqrt(var[static_cast<size_t>(ch)] + eps);
  const double* gd = gamma.data();
  const double* bd = beta.data();
  double* yd = y.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* src = xd + (i * c + ch) * hw;
      double* dst = yd + (i * c + ch) * hw;
      double m = mu[static_cast<size_t>(ch)], is = inv_std[static_cast<size_t>(ch)];
      double g = gd[ch], bb = bd[ch];
      for (int64_t j = 0; j < hw; ++j) dst[j] = (src[j] - m) * is * g + bb;
    }

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x), gid = tp->id_of(gamma), bid = tp->id_of(beta);
    if (xid >= 0 || gid >= 0 || bid >= 0) {
      bool batch_stats = mode != BnMode::Eval;
      Tensor xs = x, gs = gamma;
      int id = tp->push_node(
          "batch_norm2d", {xid, gid, bid}, y.numel(),
          [xs, gs, xid, gid, bid, n, c, hw, mu, inv_std, batch_stats](
              Tape& t, const std::vector<double>& dy) {
            const double* xd2 = xs.data();
            const double* gd2 = gs.data();
            int64_t cnt2 = n * hw;
            std::vector<double> dx, dg, db;
            if (xid >= 0) dx.assign(static_cast<size_t>(n * c * hw), 0.0);
            if (gid >= 0) dg.assign(static_cast<size_t>(c), 0.0);
            if (bid >= 0) db.assign(static_cast<size_t>(c), 0.0);
            for (int64_t ch = 0; ch < c; ++ch) {
              double m = mu[static_cast<size_t>(ch)], is = inv_std[static_cast<size_t>(ch)];
              double sum_dy = 0.0, sum_dy_xhat = 0.0;
              for (int64_t i = 0; i < n; ++i) {
                const double* src = xd2 + (i * c + ch) * hw;
                const double* dyr = dy.data() + (i * c + ch) * hw;
                for (int64_t j = 0; j < hw; ++j) {
                  sum_dy += dyr[j];
                  sum_dy_xhat += dyr[j] * (src[j] - m) * is;
                }
              }
              if (gid >= 0) dg[static_cast<size_t>(ch)] = sum_dy_xhat;
              if (bid >= 0) db[static_cast<size_t>(ch)] = sum_dy;
              if (xid >= 0) {
                double g = gd2[ch];
                for (int64_t i = 0; i < n; ++i) {
                  const double* src = xd2 + (i * c + ch) * hw;
                  const double* dyr = dy.data() + (i * c + ch) * hw;
                  double* dxr = dx.data() + (i * c + ch) * hw;
                  for (int64_t j = 0; j < hw; ++j) {
                    if (batch_stats) {
                      double xhat = (src[j] - m) * is;
                      dxr[j] = g * is *
                               (dyr[j] - sum_dy / static_cast<double>(cnt2) -
                                xhat * sum_dy_xhat / static_cast<double>(cnt2));
                    } else {
                      dxr[j] = g * is * dyr[j];
                    }
                  }
                }
              }
            }
            if (xid >= 0) t.add_to_buffer(xid, dx.data(), n * c * hw);
            if (gid >= 0) t.add_to_buffer(gid, dg.data(), c);
            if (bid >= 0) t.add_to_buffer(bid, db.data(), c);
          });
      bind_node(y, id);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// channel split / concat

std::vector<Tensor> split_channels(const Tensor& x, int parts) {
  require(x.rank() == 4, "split_channels: input must be [N,C,H,W]");
  require(parts >= 1, "split_channels: parts must be >= 1");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(c % parts == 0, "split_channels: " + std::to_string(parts) +
                              " does not divide C=" + std::to_string(c));
  int64_t cp = c / parts;
  int64_t hw = h * w;

  Tape* tp = active_tape();
  int xid = tp ? tp->id_of(x) : -1;

  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(parts));
  const double* xd = x.data();
  for (int p = 0; p < parts; ++p) {
    Tensor piece({n, cp, h, w});
    double* pd = piece.data();
    for (int64_t i = 0; i < n; ++i)
      std::memcpy(pd + i * cp * hw, xd + (i * c + p * cp) * hw,
                  static_cast<size_t>(cp * hw) * sizeof(double));
    if (tp && xid >= 0) {
      int64_t xn = x.numel();
      int id = tp->push_node("split_channels", {xid}, piece.numel(),
                             [xid, xn, n, c, cp, hw, p](Tape& t, const std::vector<double>& dy) {
                               std::vector<double> dx(static_cast<size_t>(xn), 0.0);
                               for (int64_t i = 0; i < n; ++i)
                                 std::memcpy(dx.data() + (i * c + p * cp) * hw,
                                             dy.data() + i * cp * hw,
                                             static_cast<size_t>(cp * hw) * sizeof(double));
                               t.add_to_buffer(xid, dx.data(), xn);
                             });
      bind_node(piece, id);
    }
    out.push_back(std::move(piece));
  }
  return out;
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "concat_channels: empty input list");
  int64_t n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int64_t c_total = 0;
  for (const Tensor& t : xs) {
    require(t.rank() == 4 && t.dim(0) == n && t.dim(2) == h && t.dim(3) == w,
            "concat_channels: inputs must agree on N,H,W");
    c_total += t.dim(1);
  }
  int64_t hw = h * w;
  Tensor y({n, c_total, h, w});
  double* yd = y.data();
  int64_t c_off = 0;
  for (const Tensor& t : xs) {
    int64_t cp = t.dim(1);
    const double* td = t.data();
    for (int64_t i = 0; i < n; ++i)
      std::memcpy(yd + (i * c_total + c_off) * hw, td + i * cp * hw,
                  static_cast<size_t>(cp * hw) * sizeof(double));
    c_off += cp;
  }

  Tape* tp = active_tape();
  if (tp) {
    std::vector<int> ids(xs.size());
    bool any = false;
    for (size_t i = 0; i < xs.size(); ++i) {
      ids[i] = tp->id_of(xs[i]);
      any = any || ids[i] >= 0;
    }
    if (any) {
      std::vector<int64_t> cs(xs.size());
      for (size_t i = 0; i < xs.size(); ++i) cs[i] = xs[i].dim(1);
      int id = tp->push_node(
          "concat_channels", ids, y.numel(),
          [ids, cs, n, c_total, hw](Tape& t, const std::vector<double>& dy) {
            int64_t off = 0;
            for (size_t p = 0; p < ids.size(); ++p) {
              int64_t cp = cs[p];
              if (ids[p] >= 0) {
                std::vector<double> dpiece(static_cast<size_t>(n * cp * hw));
                for (int64_t i = 0; i < n; ++i)
                  std::memcpy(dpiece.data() + i * cp * hw, dy.data() + (i * c_total + off) * hw,
                              static_cast<size_t>(cp * hw) * sizeof(double));
                t.add_to_buffer(ids[p], dpiece.data(), n * cp * hw);
              }
              off += cp;
            }
          });
      bind_node(y, id);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// last-dim split / concat

std::vector<Tensor> split_lastdim(const Tensor& x, const std::vector<int64_t>& sizes) {
  int64_t f = x.dim(-1);
  int64_t total = 0;
  for (int64_t s : sizes) {
    require(s >= 1, "split_lastdim: sizes must be positive");
    total += s;
  }
  require(total == f, "split_lastdim: sizes must sum to the trailing axis");
  int64_t rows = x.numel() / f;

  Tape* tp = active_tape();
  int xid = tp ? tp->id_of(x) : -1;

  std::vector<Tensor> out;
  out.reserve(sizes.size());
  const double* xd = x.data();
  int64_t off = 0;
  for (int64_t s : sizes) {
    Shape sh = x.shape();
    sh.back() = s;
    Tensor piece(sh);
    double* pd = piece.data();
    for (int64_t r = 0; r < rows; ++r)
      std::memcpy(pd + r * s, xd + r * f + off, static_cast<size_t>(s) * sizeof(double));
    if (tp && xid >= 0) {
      int64_t xn = x.numel();
      int64_t o = off;
      int id = tp->push_node("split_lastdim", {xid}, piece.numel(),
                             [xid, xn, rows, f, s, o](Tape& t, const std::vector<double>& dy) {
                               std::vector<double> dx(static_cast<size_t>(xn), 0.0);
                               for (int64_t r = 0; r < rows; ++r)
                                 std::memcpy(dx.data() + r * f + o, dy.data() + r * s,
                                             static_cast<size_t>(s) * sizeof(double));
                               t.add_to_buffer(xid, dx.data(), xn);
                             });
      bind_node(piece, id);
    }
    out.push_back(std::move(piece));
    off += s;
  }
  return out;
}

Tensor concat_lastdim(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "concat_lastdim: empty input list");
  Shape lead = xs[0].shape();
  lead.pop_back();
  int64_t f_total = 0;
  for (const Tensor& t : xs) {
    Shape l = t.shape();
    l.pop_back();
    require(l == lead, "concat_lastdim: leading axes must agree");
    f_total += t.dim(-1);
  }
  Shape out_shape = lead;
  out_shape.push_back(f_total);
  Tensor y(out_shape);
  int64_t rows = y.numel() / f_total;
  double* yd = y.data();
  int64_t off = 0;
  for (const Tensor& t : xs) {
    int64_t s = t.dim(-1);
    const double* td = t.data();
    for (int64_t r = 0; r < rows; ++r)
      std::memcpy(yd + r * f_total + off, td + r * s, static_cast<size_t>(s) * sizeof(double));
    off += s;
  }

  Tape* tp = active_tape();
  if (tp) {
    std::vector<int> ids(xs.size());
    bool any = false;
    for (size_t i = 0; i < xs.size(); ++i) {
      ids[i] = tp->id_of(xs[i]);
      any = any || ids[i] >= 0;
    }
    if (any) {
      std::vector<int64_t> fs(xs.size());
      for (size_t i = 0; i < xs.size(); ++i) fs[i] = xs[i].dim(-1);
      int id = tp->push_node("concat_lastdim", ids, y.numel(),
                             [ids, fs, rows, f_total](Tape& t, const std::vector<double>& dy) {
                               int64_t o = 0;
                               for (size_t p = 0; p < ids.size(); ++p) {
                                 int64_t s = fs[p];
                                 if (ids[p] >= 0) {
                                   std::vector<double> dpiece(static_cast<size_t>(rows * s));
                                   for (int64_t r = 0; r < rows; ++r)
                                     std::memcpy(dpiece.data() + r * s, dy.data() + r * f_total + o,
                                                 static_cast<size_t>(s) * sizeof(double));
                                   t.add_to_buffer(ids[p], dpiece.data(), rows * s);
                                 }
                                 o += s;
                               }
                             });
      bind_node(y, id);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// reshape / permutations

Tensor reshape(const Tensor& x, Shape new_shape) {
  Tensor y = x.reshaped(std::move(new_shape));
  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x);
    if (xid >= 0) {
      int64_t n = x.numel();
      int id = tp->push_node("reshape", {xid}, n,
                             [xid, n](Tape& t, const std::vector<double>& dy) {
                               t.add_to_buffer(xid, dy.data(), n);
                             });
      // The reshaped view shares storage with x, whose storage already maps
      // to xid on this tape; rebind a copy of the handle to the new node.
      Tensor fresh = y.clone();
      bind_node(fresh, id);
      return fresh;
    }
  }
  return y;
}

namespace {

template <class IndexFn>
Tensor permute_op(const char* name, const Tensor& x, Shape out_shape, IndexFn dst_of_src) {
  Tensor y(out_shape);
  int64_t n = x.numel();
  const double* xd = x.data();
  double* yd = y.data();
  std::vector<int64_t> perm(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    int64_t j = dst_of_src(i);
    perm[static_cast<size_t>(i)] = j;
    yd[j] = xd[i];
  }

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x);
    if (xid >= 0) {
      int id = tp->push_node(name, {xid}, n,
                             [xid, n, perm](Tape& t, const std::vector<double>& dy) {
                               std::vector<double> dx(static_cast<size_t>(n));
                               for (int64_t i = 0; i < n; ++i)
                                 dx[static_cast<size_t>(i)] =
                                     dy[static_cast<size_t>(perm[static_cast<size_t>(i)])];
                               t.add_to_buffer(xid, dx.data(), n);
                             });
      bind_node(y, id);
    }
  }
  return y;
}

}  // namespace

Tensor nchw_to_nlc(const Tensor& x) {
  require(x.rank() == 4, "nchw_to_nlc: input must be [N,C,H,W]");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t hw = h * w;
  return permute_op("nchw_to_nlc", x, {n, hw, c}, [=](int64_t i) {
    int64_t wi = i % w;
    int64_t hi = (i / w) % h;
    int64_t ci = (i / hw) % c;
    int64_t ni = i / (c * hw);
    return (ni * hw + hi * w + wi) * c + ci;
  });
}

Tensor nlc_to_nchw(const Tensor& x, int64_t h, int64_t w) {
  require(x.rank() == 3, "nlc_to_nchw: input must be [N,L,C]");
  int64_t n = x.dim(0), l = x.dim(1), c = x.dim(2);
  require(l == h * w, "nlc_to_nchw: L must equal H*W");
  return permute_op("nlc_to_nchw", x, {n, c, h, w}, [=](int64_t i) {
    int64_t ci = i % c;
    int64_t li = (i / c) % l;
    int64_t ni = i / (c * l);
    return ((ni * c + ci) * h + li / w) * w + li % w;
  });
}

Tensor transpose12(const Tensor& x) {
  require(x.rank() == 3, "transpose12: input must be rank 3");
  int64_t a = x.dim(0), b = x.dim(1), c = x.dim(2);
  return permute_op("transpose12", x, {a, c, b}, [=](int64_t i) {
    int64_t ci = i % c;
    int64_t bi = (i / c) % b;
    int64_t ai = i / (b * c);
    return (ai * c + ci) * b + bi;
  });
}

Tensor reverse_seq(const Tensor& x) {
  require(x.rank() == 3, "reverse_seq: input must be [B,L,D]");
  int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  return permute_op("reverse_seq", x, {b, l, d}, [=](int64_t i) {
    int64_t di = i % d;
    int64_t li = (i / d) % l;
    int64_t bi = i / (l * d);
    return (bi * l + (l - 1 - li)) * d + di;
  });
}

// ---------------------------------------------------------------------------
// channel max / mean

Tensor channel_max(const Tensor& x) {
  require(x.rank() == 4, "channel_max: input must be [N,C,H,W]");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t hw = h * w;
  Tensor y({n, 1, h, w});
  std::vector<int64_t> argmax(static_cast<size_t>(n * hw));
  const double* xd = x.data();
  double* yd = y.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < hw; ++j) {
      double best = xd[(i * c) * hw + j];
      int64_t bc = 0;
      for (int64_t ch = 1; ch < c; ++ch) {
        double v = xd[(i * c + ch) * hw + j];
        if (v > best) {
          best = v;
          bc = ch;
        }
      }
      yd[i * hw + j] = best;
      argmax[static_cast<size_t>(i * hw + j)] = (i * c + bc) * hw + j;
    }

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x);
    if (xid >= 0) {
      int64_t xn = x.numel(), yn = y.numel();
      int id = tp->push_node("channel_max", {xid}, yn,
                             [xid, xn, yn, argmax](Tape& t, const std::vector<double>& dy) {
                               std::vector<double> dx(static_cast<size_t>(xn), 0.0);
                               for (int64_t i = 0; i < yn; ++i)
                                 dx[static_cast<size_t>(argmax[static_cast<size_t>(i)])] +=
                                     dy[static_cast<size_t>(i)];
                               t.add_to_buffer(xid, dx.data(), xn);
                             });
      bind_node(y, id);
    }
  }
  return y;
}

Tensor channel_mean(const Tensor& x) {
  require(x.rank() == 4, "channel_mean: input must be [N,C,H,W]");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t hw = h * w;
  Tensor y({n, 1, h, w});
  const double* xd = x.data();
  double* yd = y.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < hw; ++j) {
      double acc = 0.0;
      for (int64_t ch = 0; ch < c; ++ch) acc += xd[(i * c + ch) * hw + j];
      yd[i * hw + j] = acc / static_cast<double>(c);
    }

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x);
    if (xid >= 0) {
      int64_t xn = x.numel();
      int id = tp->push_node("channel_mean", {xid}, y.numel(),
                             [xid, xn, n, c, hw](Tape& t, const std::vector<double>& dy) {
                               std::vector<double> dx(static_cast<size_t>(xn));
                               for (int64_t i = 0; i < n; ++i)
                                 for (int64_t j = 0; j < hw; ++j) {
                                   double g = dy[static_cast<size_t>(i * hw + j)] /
                                              static_cast<double>(c);
                                   for (int64_t ch = 0; ch < c; ++ch)
                                     dx[static_cast<size_t>((i * c + ch) * hw + j)] = g;
                                 }
                               t.add_to_buffer(xid, dx.data(), xn);
                             });
      bind_node(y, id);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// attention application

Tensor scale_channels(const Tensor& x, const Tensor& s) {
  require(x.rank() == 4, "scale_channels: x must be [N,C,H,W]");
  require(s.rank() == 2 && s.dim(0) == x.dim(0) && s.dim(1) == x.dim(1),
          "scale_channels: s must be [N,C]");
  int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  const double* xd = x.data();
  const double* sd = s.data();
  double* yd = y.data();
  for (int64_t p = 0; p < n * c; ++p) {
    double f = sd[p];
    const double* src = xd + p * hw;
    double* dst = yd + p * hw;
    for (int64_t j = 0; j < hw; ++j) dst[j] = src[j] * f;
  }

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x), sid = tp->id_of(s);
    if (xid >= 0 || sid >= 0) {
      Tensor xs = x, ss = s;
      int id = tp->push_node(
          "scale_channels", {xid, sid}, y.numel(),
          [xs, ss, xid, sid, n, c, hw](Tape& t, const std::vector<double>& dy) {
            if (xid >= 0) {
              std::vector<double> dx(static_cast<size_t>(n * c * hw));
              const double* sd2 = ss.data();
              for (int64_t p = 0; p < n * c; ++p) {
                double f = sd2[p];
                const double* dyr = dy.data() + p * hw;
                double* dst = dx.data() + p * hw;
                for (int64_t j = 0; j < hw; ++j) dst[j] = dyr[j] * f;
              }
              t.add_to_buffer(xid, dx.data(), n * c * hw);
            }
            if (sid >= 0) {
              std::vector<double> ds(static_cast<size_t>(n * c), 0.0);
              const double* xd2 = xs.data();
              for (int64_t p = 0; p < n * c; ++p) {
                const double* dyr = dy.data() + p * hw;
                const double* src = xd2 + p * hw;
                double acc = 0.0;
                for (int64_t j = 0; j < hw; ++j) acc += dyr[j] * src[j];
                ds[static_cast<size_t>(p)] = acc;
              }
              t.add_to_buffer(sid, ds.data(), n * c);
            }
          });
      bind_node(y, id);
    }
  }
  return y;
}

Tensor scale_spatial(const Tensor& x, const Tensor& m) {
  require(x.rank() == 4, "scale_spatial: x must be [N,C,H,W]");
  require(m.rank() == 4 && m.dim(0) == x.dim(0) && m.dim(1) == 1 && m.dim(2) == x.dim(2) &&
              m.dim(3) == x.dim(3),
          "scale_spatial: m must be [N,1,H,W]");
  int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  const double* xd = x.data();
  const double* md = m.data();
  double* yd = y.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* src = xd + (i * c + ch) * hw;
      const double* mv = md + i * hw;
      double* dst = yd + (i * c + ch) * hw;
      for (int64_t j = 0; j < hw; ++j) dst[j] = src[j] * mv[j];
    }

  Tape* tp = active_tape();
  if (tp) {
    int xid = tp->id_of(x), mid = tp->id_of(m);
    if (xid >= 0 || mid >= 0) {
      Tensor xs = x, ms = m;
      int id = tp->push_node(
          "scale_spatial", {xid, mid}, y.numel(),
          [xs, ms, xid, mid, n, c, hw](Tape& t, const std::vector<double>& dy) {
            if (xid >= 0) {
              std::vector<double> dx(static_cast<size_t>(n * c * hw));
              const double* md2 = ms.data();
              for (int64_t i = 0; i < n; ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                  const double* dyr = dy.data() + (i * c + ch) * hw;
                  const double* mv = md2 + i * hw;
                  double* dst = dx.data() + (i * c + ch) * hw;
                  for (int64_t j = 0; j < hw; ++j) dst[j] = dyr[j] * mv[j];
                }
              t.add_to_buffer(xid, dx.data(), n * c * hw);
            }
            if (mid >= 0) {
              std::vector<double> dm(static_cast<size_t>(n * hw), 0.0);
              const double* xd2 = xs.data();
              for (int64_t i = 0; i < n; ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                  const double* dyr = dy.data() + (i * c + ch) * hw;
                  const double* src = xd2 + (i * c + ch) * hw;
                  double* dst = dm.data() + i * hw;
                  for (int64_t j = 0; j < hw; ++j) dst[j] += dyr[j] * src[j];
                }
              t.add_to_buffer(mid, dm.data(), n * hw);
            }
          });
      bind_node(y, id);
    }
  }
  return y;
}

}  // namespace ulmv
