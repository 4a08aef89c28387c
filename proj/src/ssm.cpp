#include "ulmv/ssm.hpp"

#include <cmath>
#include <string>

namespace ulmv {

int auto_dt_rank(int d_model) { return (d_model + 15) / 16; }

SsmParams make_ssm_params(int d_model, int d_state, int expand, int conv_k, int dt_rank,
                          Rng& rng) {
  require(d_model >= 1 && d_state >= 1 && expand >= 1 && conv_k >= 1 && dt_rank >= 1,
          "make_ssm_params: dimensions must be positive");
  SsmParams p;
  p.d_model = d_model;
  p.d_state = d_state;
  p.expand = expand;
  p.conv_k = conv_k;
  p.dt_rank = dt_rank;
  int di = p.d_inner();

  auto uniform_init = [&rng](Shape shape, double bound) {
    Tensor t(shape);
    double* d = t.data();
    int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) d[i] = rng.uniform(-bound, bound);
    return t;
  };

  // S4D-real initialisation: A row = -(1..d_state)
  p.a_log = Tensor({di, d_state});
  for (int c = 0; c < di; ++c)
    for (int n = 0; n < d_state; ++n) p.a_log[c * d_state + n] = std::log(double(n + 1));

  p.d_skip = Tensor({di}, 1.0);
  p.in_proj_w = uniform_init({2 * di, d_model}, 1.0 / std::sqrt(double(d_model)));
  p.conv_w = uniform_init({di, 1, conv_k}, 1.0 / std::sqrt(double(conv_k)));
  p.conv_b = uniform_init({di}, 1.0 / std::sqrt(double(conv_k)));
  p.x_proj_w = uniform_init({dt_rank + 2 * d_state, di}, 1.0 / std::sqrt(double(di)));
  p.dt_proj_w = uniform_init({di, dt_rank}, 1.0 / std::sqrt(double(dt_rank)));

  // bias chosen so softplus(bias) lands uniformly in [1e-3, 1e-1]
  p.dt_proj_b = Tensor({di});
  for (int c = 0; c < di; ++c) {
    double dt = rng.uniform(1e-3, 1e-1);
    p.dt_proj_b[c] = std::log(std::expm1(dt));
  }

  p.out_proj_w = uniform_init({d_model, di}, 1.0 / std::sqrt(double(di)));
  return p;
}

namespace {

struct ScanDims {
  int64_t b, l, d, n;
};

ScanDims check_scan_args(const ScanInputs& in, const Tensor& a, const Tensor& d_skip,
                         bool check_delta_positive) {
  require(in.x.rank() == 3, "selective_scan: x must be [B,L,d_inner]");
  ScanDims s;
  s.b = in.x.dim(0);
  s.l = in.x.dim(1);
  s.d = in.x.dim(2);
  require(a.rank() == 2 && a.dim(0) == s.d, "selective_scan: A must be [d_inner,d_state]");
  s.n = a.dim(1);
  require(in.delta.shape() == in.x.shape(), "selective_scan: delta must match x shape");
  require(in.b_seq.rank() == 3 && in.b_seq.dim(0) == s.b && in.b_seq.dim(1) == s.l &&
              in.b_seq.dim(2) == s.n,
          "selective_scan: B_seq must be [B,L,d_state]");
  require(in.c_seq.shape() == in.b_seq.shape(), "selective_scan: C_seq must be [B,L,d_state]");
  require(d_skip.numel() == s.d, "selective_scan: D must be [d_inner]");
  if (check_delta_positive) {
    const double* dd = in.delta.data();
    int64_t cnt = in.delta.numel();
    for (int64_t i = 0; i < cnt; ++i)
      require(dd[i] > 0.0, "selective_scan: delta must be positive everywhere");
  }
  return s;
}

[[noreturn]] void scan_nan_abort(int64_t bi, int64_t t, int64_t di) {
  throw std::runtime_error("selective_scan: non-finite state at batch " + std::to_string(bi) +
                           ", t=" + std::to_string(t) + ", channel=" + std::to_string(di));
}

// Sequential recurrence for one (batch, channel) pair. Writes y and, when
// h_out is non-null, the whole state trajectory ((t,n) layout).
void scan_row_sequential(const double* x, const double* delta, const double* b_seq,
                         const double* c_seq, const double* a_row, double d_val, int64_t bi,
                         int64_t di, int64_t l, int64_t n, int64_t row_stride, double* y,
                         double* h_out) {
  std::vector<double> h(static_cast<size_t>(n), 0.0);
  for (int64_t t = 0; t < l; ++t) {
    double xv = x[t * row_stride];
    double dv = delta[t * row_stride];
    const double* bt = b_seq + t * n;
    const double* ct = c_seq + t * n;
    double acc = 0.0;
    for (int64_t k = 0; k < n; ++k) {
      double abar = std::exp(dv * a_row[k]);
      double hv = abar * h[static_cast<size_t>(k)] + dv * bt[k] * xv;
      h[static_cast<size_t>(k)] = hv;
      acc += ct[k] * hv;
    }
    double yv = acc + d_val * xv;
    if (!std::isfinite(yv)) scan_nan_abort(bi, t, di);
    y[t * row_stride] = yv;
    if (h_out) {
      for (int64_t k = 0; k < n; ++k) h_out[t * n + k] = h[static_cast<size_t>(k)];
    }
  }
}

constexpr int64_t kScanChunk = 64;

// Blelloch exclusive scan over pair arrays pa/pb of length len (power of
// two), each entry an n-vector; combine follows sequence order.
void blelloch_exclusive(double* pa, double* pb, int64_t len, int64_t n) {
  for (int64_t d = 1; d < len; d <<= 1) {
    for (int64_t i = 2 * d - 1; i < len; i += 2 * d) {
      double* a2 = pa + i * n;
      double* b2 = pb + i * n;
      const double* a1 = pa + (i - d) * n;
      const double* b1 = pb + (i - d) * n;
      for (int64_t k = 0; k < n; ++k) {
        b2[k] = a2[k] * b1[k] + b2[k];
        a2[k] = a2[k] * a1[k];
      }
    }
  }
  // identity at the root, then sweep back down
  for (int64_t k = 0; k < n; ++k) {
    pa[(len - 1) * n + k] = 1.0;
    pb[(len - 1) * n + k] = 0.0;
  }
  for (int64_t d = len >> 1; d >= 1; d >>= 1) {
    for (int64_t i = 2 * d - 1; i < len; i += 2 * d) {
      double* left_a = pa + (i - d) * n;
      double* left_b = pb + (i - d) * n;
      double* cur_a = pa + i * n;
      double* cur_b = pb + i * n;
      for (int64_t k = 0; k < n; ++k) {
        double ta = left_a[k], tb = left_b[k];   // aggregate of the left block
        double prefix_a = cur_a[k], prefix_b = cur_b[k];
        left_a[k] = prefix_a;
        left_b[k] = prefix_b;
        // first the incoming prefix, then the left block
        cur_a[k] = ta * prefix_a;
        cur_b[k] = ta * prefix_b + tb;
      }
    }
  }
}

void scan_row_parallel(const double* x, const double* delta, const double* b_seq,
                       const double* c_seq, const double* a_row, double d_val, int64_t bi,
                       int64_t di, int64_t l, int64_t n, int64_t row_stride, double* y,
                       double* h_out) {
  std::vector<double> carry(static_cast<size_t>(n), 0.0);  // state entering the chunk
  std::vector<double> ea(static_cast<size_t>(kScanChunk * n)), eb(static_cast<size_t>(kScanChunk * n));
  std::vector<double> pa(static_cast<size_t>(kScanChunk * n)), pb(static_cast<size_t>(kScanChunk * n));

  for (int64_t t0 = 0; t0 < l; t0 += kScanChunk) {
    int64_t len = std::min<int64_t>(kScanChunk, l - t0);
    int64_t padded = 1;
    while (padded < len) padded <<= 1;

    for (int64_t j = 0; j < len; ++j) {
      int64_t t = t0 + j;
      double xv = x[t * row_stride];
      double dv = delta[t * row_stride];
      const double* bt = b_seq + t * n;
      for (int64_t k = 0; k < n; ++k) {
        ea[static_cast<size_t>(j * n + k)] = std::exp(dv * a_row[k]);
        eb[static_cast<size_t>(j * n + k)] = dv * bt[k] * xv;
      }
    }
    for (int64_t j = len; j < padded; ++j)
      for (int64_t k = 0; k < n; ++k) {
        ea[static_cast<size_t>(j * n + k)] = 1.0;
        eb[static_cast<size_t>(j * n + k)] = 0.0;
      }

    std::copy(ea.begin(), ea.begin() + padded * n, pa.begin());
    std::copy(eb.begin(), eb.begin() + padded * n, pb.begin());
    if (padded > 1) blelloch_exclusive(pa.data(), pb.data(), padded, n);
    else {
      for (int64_t k = 0; k < n; ++k) {
        pa[static_cast<size_t>(k)] = 1.0;
        pb[static_cast<size_t>(k)] = 0.0;
      }
    }

    for (int64_t j = 0; j < len; ++j) {
      int64_t t = t0 + j;
      double xv = x[t * row_stride];
      const double* ct = c_seq + t * n;
      double acc = 0.0;
      for (int64_t k = 0; k < n; ++k) {
        // inclusive prefix map = element o exclusive prefix
        double ia = ea[static_cast<size_t>(j * n + k)] * pa[static_cast<size_t>(j * n + k)];
        double ib = ea[static_cast<size_t>(j * n + k)] * pb[static_cast<size_t>(j * n + k)] +
                    eb[static_cast<size_t>(j * n + k)];
        double hv = ia * carry[static_cast<size_t>(k)] + ib;
        acc += ct[k] * hv;
        if (h_out) h_out[t * n + k] = hv;
        if (j == len - 1) carry[static_cast<size_t>(k)] = hv;
      }
      double yv = acc + d_val * xv;
      if (!std::isfinite(yv)) scan_nan_abort(bi, t, di);
      y[t * row_stride] = yv;
    }
  }
}

}  // namespace

std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& a,
                                     const Tensor& b_seq) {
  require(delta.rank() == 3, "discretize: delta must be [B,L,d_inner]");
  int64_t b = delta.dim(0), l = delta.dim(1), d = delta.dim(2);
  require(a.rank() == 2 && a.dim(0) == d, "discretize: A must be [d_inner,d_state]");
  int64_t n = a.dim(1);
  require(b_seq.rank() == 3 && b_seq.dim(0) == b && b_seq.dim(1) == l && b_seq.dim(2) == n,
          "discretize: B_seq must be [B,L,d_state]");
  {
    const double* dd = delta.data();
    int64_t cnt = delta.numel();
    for (int64_t i = 0; i < cnt; ++i)
      require(dd[i] > 0.0, "discretize: delta must be positive everywhere");
  }

  Tensor a_bar({b, l, d, n});
  Tensor b_bar({b, l, d, n});
  const double* dd = delta.data();
  const double* ad = a.data();
  const double* bd = b_seq.data();
  double* abar = a_bar.data();
  double* bbar = b_bar.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t t = 0; t < l; ++t)
      for (int64_t c = 0; c < d; ++c) {
        double dv = dd[(bi * l + t) * d + c];
        const double* brow = bd + (bi * l + t) * n;
        double* ao = abar + ((bi * l + t) * d + c) * n;
        double* bo = bbar + ((bi * l + t) * d + c) * n;
        for (int64_t k = 0; k < n; ++k) {
          ao[k] = std::exp(dv * ad[c * n + k]);
          bo[k] = dv * brow[k];
        }
      }
  return {a_bar, b_bar};
}

Tensor scan_core_states(const Tensor& abar, const Tensor& bx, bool parallel) {
  require(abar.rank() == 4 && abar.shape() == bx.shape(),
          "scan_core_states: abar and bx must both be [B,L,d,n]");
  int64_t b = abar.dim(0), l = abar.dim(1), d = abar.dim(2), n = abar.dim(3);
  Tensor h({b, l, d, n});
  const double* ad = abar.data();
  const double* bd = bx.data();
  double* hd = h.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t c = 0; c < d; ++c) {
      if (!parallel) {
        std::vector<double> state(static_cast<size_t>(n), 0.0);
        for (int64_t t = 0; t < l; ++t) {
          const double* at = ad + ((bi * l + t) * d + c) * n;
          const double* bt = bd + ((bi * l + t) * d + c) * n;
          double* ht = hd + ((bi * l + t) * d + c) * n;
          for (int64_t k = 0; k < n; ++k) {
            state[static_cast<size_t>(k)] = at[k] * state[static_cast<size_t>(k)] + bt[k];
            ht[k] = state[static_cast<size_t>(k)];
          }
        }
      } else {
        std::vector<double> carry(static_cast<size_t>(n), 0.0);
        std::vector<double> ea(static_cast<size_t>(kScanChunk * n)),
            eb(static_cast<size_t>(kScanChunk * n)), pa(static_cast<size_t>(kScanChunk * n)),
            pb(static_cast<size_t>(kScanChunk * n));
        for (int64_t t0 = 0; t0 < l; t0 += kScanChunk) {
          int64_t len = std::min<int64_t>(kScanChunk, l - t0);
          int64_t padded = 1;
          while (padded < len) padded <<= 1;
          for (int64_t j = 0; j < len; ++j) {
            const double* at = ad + ((bi * l + t0 + j) * d + c) * n;
            const double* bt = bd + ((bi * l + t0 + j) * d + c) * n;
            for (int64_t k = 0; k < n; ++k) {
              ea[static_cast<size_t>(j * n + k)] = at[k];
              eb[static_cast<size_t>(j * n + k)] = bt[k];
            }
          }
          for (int64_t j = len; j < padded; ++j)
            for (int64_t k = 0; k < n; ++k) {
              ea[static_cast<size_t>(j * n + k)] = 1.0;
              eb[static_cast<size_t>(j * n + k)] = 0.0;
            }
          std::copy(ea.begin(), ea.begin() + padded * n, pa.begin());
          std::copy(eb.begin(), eb.begin() + padded * n, pb.begin());
          if (padded > 1) blelloch_exclusive(pa.data(), pb.data(), padded, n);
          else
            for (int64_t k = 0; k < n; ++k) {
              pa[static_cast<size_t>(k)] = 1.0;
              pb[static_cast<size_t>(k)] = 0.0;
            }
          for (int64_t j = 0; j < len; ++j) {
            double* ht = hd + ((bi * l + t0 + j) * d + c) * n;
            for (int64_t k = 0; k < n; ++k) {
              double ia = ea[static_cast<size_t>(j * n + k)] * pa[static_cast<size_t>(j * n + k)];
              double ib = ea[static_cast<size_t>(j * n + k)] * pb[static_cast<size_t>(j * n + k)] +
                          eb[static_cast<size_t>(j * n + k)];
              ht[k] = ia * carry[static_cast<size_t>(k)] + ib;
              if (j == len - 1) carry[static_cast<size_t>(k)] = ht[k];
            }
          }
        }
      }
    }
  return h;
}

Tensor selective_scan(const ScanInputs& in, const Tensor& a, const Tensor& d_skip,
                      ScanBackend backend) {
  ScanDims s = check_scan_args(in, a, d_skip, /*check_delta_positive=*/true);

  Tape* tp = active_tape();
  bool record = false;
  int xid = -1, did = -1, bid = -1, cid = -1, aid = -1, skid = -1;
  if (tp) {
    xid = tp->id_of(in.x);
    did = tp->id_of(in.delta);
    bid = tp->id_of(in.b_seq);
    cid = tp->id_of(in.c_seq);
    aid = tp->id_of(a);
    skid = tp->id_of(d_skip);
    record = xid >= 0 || did >= 0 || bid >= 0 || cid >= 0 || aid >= 0 || skid >= 0;
  }

  Tensor y({s.b, s.l, s.d});
  // state trajectory, saved only when the tape needs it; layout (b,d,t,n)
  std::shared_ptr<std::vector<double>> h_save;
  if (record)
    h_save = std::make_shared<std::vector<double>>(
        static_cast<size_t>(s.b * s.d * s.l * s.n));

  const double* xd = in.x.data();
  const double* dd = in.delta.data();
  const double* bd = in.b_seq.data();
  const double* cd = in.c_seq.data();
  const double* ad = a.data();
  const double* skd = d_skip.data();
  double* yd = y.data();

  int64_t rows = s.b * s.d;
  parallel_for(rows, [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      int64_t bi = r / s.d;
      int64_t c = r % s.d;
      const double* xrow = xd + bi * s.l * s.d + c;
      const double* drow = dd + bi * s.l * s.d + c;
      const double* brow = bd + bi * s.l * s.n;
      const double* crow = cd + bi * s.l * s.n;
      double* yrow = yd + bi * s.l * s.d + c;
      double* hrow = h_save ? h_save->data() + (bi * s.d + c) * s.l * s.n : nullptr;
      if (backend == ScanBackend::Sequential) {
        scan_row_sequential(xrow, drow, brow, crow, ad + c * s.n, skd[c], bi, c, s.l, s.n,
                            s.d, yrow, hrow);
      } else {
        scan_row_parallel(xrow, drow, brow, crow, ad + c * s.n, skd[c], bi, c, s.l, s.n, s.d,
                          yrow, hrow);
      }
    }
  });

  if (record) {
    Tensor xs = in.x, ds = in.delta, bs = in.b_seq, cs = in.c_seq, as = a, sks = d_skip;
    ScanDims sd2 = s;
    int id = tp->push_node(
        "selective_scan", {xid, did, bid, cid, aid, skid}, y.numel(),
        [xs, ds, bs, cs, as, sks, h_save, xid, did, bid, cid, aid, skid,
         sd2](Tape& t, const std::vector<double>& dy) {
          const int64_t B = sd2.b, L = sd2.l, D = sd2.d, N = sd2.n;
          const double* xd2 = xs.data();
          const double* dd2 = ds.data();
          const double* bd2 = bs.data();
          const double* cd2 = cs.data();
          const double* ad2 = as.data();
          const double* skd2 = sks.data();
          const double* hd = h_save->data();

          std::vector<double> dx, ddelta, db, dc, da, dskip;
          if (xid >= 0) dx.assign(static_cast<size_t>(B * L * D), 0.0);
          if (did >= 0) ddelta.assign(static_cast<size_t>(B * L * D), 0.0);
          if (bid >= 0) db.assign(static_cast<size_t>(B * L * N), 0.0);
          if (cid >= 0) dc.assign(static_cast<size_t>(B * L * N), 0.0);
          if (aid >= 0) da.assign(static_cast<size_t>(D * N), 0.0);
          if (skid >= 0) dskip.assign(static_cast<size_t>(D), 0.0);

          std::vector<double> dh(static_cast<size_t>(N));
          for (int64_t bi = 0; bi < B; ++bi) {
            for (int64_t c = 0; c < D; ++c) {
              std::fill(dh.begin(), dh.end(), 0.0);
              const double* hrow = hd + (bi * D + c) * L * N;
              const double* arow = ad2 + c * N;
              for (int64_t tt = L - 1; tt >= 0; --tt) {
                int64_t xi = (bi * L + tt) * D + c;
                double xv = xd2[xi];
                double dv = dd2[xi];
                double gy = dy[static_cast<size_t>(xi)];
                const double* bt = bd2 + (bi * L + tt) * N;
                const double* ct = cd2 + (bi * L + tt) * N;
                const double* ht = hrow + tt * N;
                const double* hprev = tt > 0 ? hrow + (tt - 1) * N : nullptr;

                if (skid >= 0) dskip[static_cast<size_t>(c)] += gy * xv;
                double dx_acc = gy * skd2[c];
                double ddelta_acc = 0.0;
                for (int64_t k = 0; k < N; ++k) {
                  double dhk = dh[static_cast<size_t>(k)] + gy * ct[k];
                  if (cid >= 0) dc[static_cast<size_t>((bi * L + tt) * N + k)] += gy * ht[k];
                  double abar = std::exp(dv * arow[k]);
                  double hp = hprev ? hprev[k] : 0.0;
                  double dabar = dhk * hp;
                  if (aid >= 0) da[static_cast<size_t>(c * N + k)] += dabar * abar * dv;
                  ddelta_acc += dabar * abar * arow[k];
                  ddelta_acc += dhk * bt[k] * xv;
                  if (bid >= 0) db[static_cast<size_t>((bi * L + tt) * N + k)] += dhk * dv * xv;
                  dx_acc += dhk * dv * bt[k];
                  dh[static_cast<size_t>(k)] = dhk * abar;
                }
                if (xid >= 0) dx[static_cast<size_t>(xi)] += dx_acc;
                if (did >= 0) ddelta[static_cast<size_t>(xi)] += ddelta_acc;
              }
            }
          }
          if (xid >= 0) t.add_to_buffer(xid, dx.data(), B * L * D);
          if (did >= 0) t.add_to_buffer(did, ddelta.data(), B * L * D);
          if (bid >= 0) t.add_to_buffer(bid, db.data(), B * L * N);
          if (cid >= 0) t.add_to_buffer(cid, dc.data(), B * L * N);
          if (aid >= 0) t.add_to_buffer(aid, da.data(), D * N);
          if (skid >= 0) t.add_to_buffer(skid, dskip.data(), D);
        });
    bind_node(y, id);
  }
  return y;
}

Tensor selective_scan_sequential(const ScanInputs& in, const Tensor& a, const Tensor& d_skip) {
  return selective_scan(in, a, d_skip, ScanBackend::Sequential);
}

Tensor selective_scan_parallel(const ScanInputs& in, const Tensor& a, const Tensor& d_skip) {
  return selective_scan(in, a, d_skip, ScanBackend::Parallel);
}

Tensor mamba_block(const Tensor& x, const SsmParams& p, ScanBackend backend,
                   bool bidirectional) {
  require(x.rank() == 3 && x.dim(2) == p.d_model,
          "mamba_block: input must be [B,L," + std::to_string(p.d_model) + "], got " +
              shape_str(x.shape()));
  int di = p.d_inner();

  Tensor xz = linear(x, p.in_proj_w);  // [B,L,2*di]
  auto ug = split_lastdim(xz, {di, di});
  Tensor u = ug[0], gate = ug[1];

  // depthwise causal conv along the sequence
  u = transpose12(u);  // [B,di,L]
  u = conv1d_causal(u, p.conv_w, p.conv_b);
  u = transpose12(u);  // [B,L,di]
  u = silu(u);

  Tensor dbc = linear(u, p.x_proj_w);  // [B,L,dt_rank+2N]
  auto parts = split_lastdim(dbc, {p.dt_rank, p.d_state, p.d_state});
  Tensor delta = softplus(linear(parts[0], p.dt_proj_w, p.dt_proj_b));  // [B,L,di]

  Tensor a = neg_exp(p.a_log);
  Tensor y = selective_scan({u, delta, parts[1], parts[2]}, a, p.d_skip, backend);
  if (bidirectional) {
    Tensor y_rev = selective_scan(
        {reverse_seq(u), reverse_seq(delta), reverse_seq(parts[1]), reverse_seq(parts[2])}, a,
        p.d_skip, backend);
    y = add(y, reverse_seq(y_rev));
  }

  y = mul(y, silu(gate));
  return linear(y, p.out_proj_w);
}

}  // namespace ulmv
