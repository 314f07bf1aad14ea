#include "sswm/ssm/scan.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

namespace sswm::ssm {

using numkit::Dtype;
using numkit::Graph;
using numkit::Shape;
using numkit::Tensor;
using numkit::Var;
using numkit::shape_str;
using numkit::shapes_equal;

ScanElement ScanElement::identity(int64_t n) {
  ScanElement e;
  e.a_re.assign(static_cast<size_t>(n), 1.0);
  e.a_im.assign(static_cast<size_t>(n), 0.0);
  e.b_re.assign(static_cast<size_t>(n), 0.0);
  e.b_im.assign(static_cast<size_t>(n), 0.0);
  e.done = 0.0;
  return e;
}

ScanElement ScanElement::make(std::vector<double> a_re, std::vector<double> a_im,
                              std::vector<double> b_re, std::vector<double> b_im, double done) {
  if (done != 0.0 && done != 1.0) numkit::fail("scan element: done flag must be 0 or 1");
  ScanElement e;
  e.a_re = std::move(a_re);
  e.a_im = std::move(a_im);
  e.b_re = std::move(b_re);
  e.b_im = std::move(b_im);
  e.done = done;
  return e;
}

ScanElement combine(const ScanElement& ei, const ScanElement& ej) {
  const size_t n = ei.a_re.size();
  if (ej.a_re.size() != n) numkit::fail("scan combine: state sizes differ");
  ScanElement out;
  out.a_re.resize(n);
  out.a_im.resize(n);
  out.b_re.resize(n);
  out.b_im.resize(n);
  // Gating on the arriving element's flag keeps the operator associative; a set
  // flag discards the whole prefix.
  const double keep = 1.0 - ej.done;
  for (size_t k = 0; k < n; ++k) {
    const double ar = ej.a_re[k], ai = ej.a_im[k];
    // a_j * a_i
    const double aar = ar * ei.a_re[k] - ai * ei.a_im[k];
    const double aai = ar * ei.a_im[k] + ai * ei.a_re[k];
    out.a_re[k] = keep * aar + ej.done * ar;
    out.a_im[k] = keep * aai + ej.done * ai;
    // a_j * b_i + b_j
    const double abr = ar * ei.b_re[k] - ai * ei.b_im[k];
    const double abi = ar * ei.b_im[k] + ai * ei.b_re[k];
    out.b_re[k] = keep * abr + ej.b_re[k];
    out.b_im[k] = keep * abi + ej.b_im[k];
  }
  out.done = std::clamp(ei.done + ej.done, 0.0, 1.0);
  return out;
}

namespace {

// In-place Blelloch sweep over padded element arrays.
// Layout: a/b are [B, P, N] (complex split), dones [B, P].
template <typename T>
void blelloch_exclusive(int64_t B, int64_t P, int64_t N, T* ar, T* ai, T* br, T* bi, T* d,
                        int* stage_count) {
  int stages = 0;
  auto combine_at = [&](int64_t b, int64_t li, int64_t ri) {
    const int64_t lo = (b * P + li) * N;
    const int64_t ro = (b * P + ri) * N;
    const T dj = d[b * P + ri];
    const T keep = T(1) - dj;
    for (int64_t k = 0; k < N; ++k) {
      const T xar = ar[ro + k], xai = ai[ro + k];
      const T aar = xar * ar[lo + k] - xai * ai[lo + k];
      const T aai = xar * ai[lo + k] + xai * ar[lo + k];
      const T abr = xar * br[lo + k] - xai * bi[lo + k];
      const T abi = xar * bi[lo + k] + xai * br[lo + k];
      ar[ro + k] = keep * aar + dj * xar;
      ai[ro + k] = keep * aai + dj * xai;
      br[ro + k] = keep * abr + br[ro + k];
      bi[ro + k] = keep * abi + bi[ro + k];
    }
    d[b * P + ri] = std::clamp(d[b * P + li] + dj, T(0), T(1));
  };

  // up-sweep
  for (int64_t s = 1; s < P; s <<= 1) {
    ++stages;
    const int64_t nodes = P / (2 * s);
    const int64_t total = B * nodes;
#pragma omp parallel for schedule(static) if (total * N > 8192)
    for (int64_t idx = 0; idx < total; ++idx) {
      const int64_t b = idx / nodes;
      const int64_t k = idx % nodes;
      const int64_t right = 2 * s - 1 + k * 2 * s;
      combine_at(b, right - s, right);
    }
  }
  // down-sweep
  for (int64_t b = 0; b < B; ++b) {
    const int64_t off = (b * P + (P - 1)) * N;
    for (int64_t k = 0; k < N; ++k) {
      ar[off + k] = T(1);
      ai[off + k] = T(0);
      br[off + k] = T(0);
      bi[off + k] = T(0);
    }
    d[b * P + (P - 1)] = T(0);
  }
  for (int64_t s = P >> 1; s >= 1; s >>= 1) {
    ++stages;
    const int64_t nodes = P / (2 * s);
    const int64_t total = B * nodes;
#pragma omp parallel for schedule(static) if (total * N > 8192)
    for (int64_t idx = 0; idx < total; ++idx) {
      const int64_t b = idx / nodes;
      const int64_t k = idx % nodes;
      const int64_t right = 2 * s - 1 + k * 2 * s;
      const int64_t left = right - s;
      const int64_t lo = (b * P + left) * N;
      const int64_t ro = (b * P + right) * N;
      // tmp = left subtree total; left = incoming prefix; right = combine(incoming, tmp)
      std::vector<T> ta(ar + lo, ar + lo + N), tai(ai + lo, ai + lo + N);
      std::vector<T> tb(br + lo, br + lo + N), tbi(bi + lo, bi + lo + N);
      const T td = d[b * P + left];
      std::memcpy(ar + lo, ar + ro, sizeof(T) * static_cast<size_t>(N));
      std::memcpy(ai + lo, ai + ro, sizeof(T) * static_cast<size_t>(N));
      std::memcpy(br + lo, br + ro, sizeof(T) * static_cast<size_t>(N));
      std::memcpy(bi + lo, bi + ro, sizeof(T) * static_cast<size_t>(N));
      const T din = d[b * P + right];  // incoming done
      d[b * P + left] = din;
      // right = combine(incoming, tmp); the arriving (tmp) flag gates
      const T keep = T(1) - td;
      for (int64_t n = 0; n < N; ++n) {
        const T xar = ta[static_cast<size_t>(n)], xai = tai[static_cast<size_t>(n)];
        const T par = ar[lo + n], pai = ai[lo + n], pbr = br[lo + n], pbi = bi[lo + n];
        const T aar = xar * par - xai * pai;
        const T aai = xar * pai + xai * par;
        const T abr = xar * pbr - xai * pbi;
        const T abi = xar * pbi + xai * pbr;
        ar[ro + n] = keep * aar + td * xar;
        ai[ro + n] = keep * aai + td * xai;
        br[ro + n] = keep * abr + tb[static_cast<size_t>(n)];
        bi[ro + n] = keep * abi + tbi[static_cast<size_t>(n)];
      }
      d[b * P + right] = std::clamp(din + td, T(0), T(1));
    }
  }
  if (stage_count) *stage_count = stages;
}

// Inclusive reset-aware scan. a may be time-invariant (a_stride_t == 0, arrays length N)
// or per-element ([B,T,N]). dones/x0 may be null (zeros). Output written with row
// stride out_stride (>= N) so callers can interleave re/im planes.
template <typename T>
void scan_impl(int64_t B, int64_t L, int64_t N, const T* a_re, const T* a_im,
               bool a_invariant, const T* b_re, const T* b_im, const T* dones, const T* x0_re,
               const T* x0_im, T* out_re, T* out_im, int64_t out_stride, int* stage_count) {
  const int64_t P = static_cast<int64_t>(std::bit_ceil(static_cast<uint64_t>(L + 1)));
  std::vector<T> war(static_cast<size_t>(B * P * N), T(0));
  std::vector<T> wai(static_cast<size_t>(B * P * N), T(0));
  std::vector<T> wbr(static_cast<size_t>(B * P * N), T(0));
  std::vector<T> wbi(static_cast<size_t>(B * P * N), T(0));
  std::vector<T> wd(static_cast<size_t>(B * P), T(0));
  for (int64_t b = 0; b < B; ++b) {
    // position 0: init element (I, x0, 0)
    {
      const int64_t o = (b * P + 0) * N;
      for (int64_t n = 0; n < N; ++n) {
        war[static_cast<size_t>(o + n)] = T(1);
        if (x0_re) wbr[static_cast<size_t>(o + n)] = x0_re[b * N + n];
        if (x0_im) wbi[static_cast<size_t>(o + n)] = x0_im[b * N + n];
      }
    }
    for (int64_t t = 0; t < L; ++t) {
      const int64_t o = (b * P + t + 1) * N;
      const int64_t src = a_invariant ? 0 : (b * L + t) * N;
      for (int64_t n = 0; n < N; ++n) {
        war[static_cast<size_t>(o + n)] = a_re[src + n];
        wai[static_cast<size_t>(o + n)] = a_im[src + n];
        wbr[static_cast<size_t>(o + n)] = b_re[(b * L + t) * N + n];
        wbi[static_cast<size_t>(o + n)] = b_im[(b * L + t) * N + n];
      }
      // done at position t resets the state entering t+1, so the operator-level
      // flag (reset before me) of element t is the previous position's done
      if (dones && t > 0) wd[static_cast<size_t>(b * P + t + 1)] = dones[b * L + t - 1];
    }
    // padding beyond L+1 stays identity (a=1 set below)
    for (int64_t p = L + 1; p < P; ++p) {
      const int64_t o = (b * P + p) * N;
      for (int64_t n = 0; n < N; ++n) war[static_cast<size_t>(o + n)] = T(1);
    }
  }

  blelloch_exclusive<T>(B, P, N, war.data(), wai.data(), wbr.data(), wbi.data(), wd.data(),
                        stage_count);

  // After the exclusive sweep, padded position p holds f_0•…•f_{p-1}. Element t sits at
  // padded index t+1, so that slot now holds its incoming prefix; one trailing combine
  // per position yields the inclusive state (only the b-part is needed).
#pragma omp parallel for schedule(static) if (B * L * N > 8192)
  for (int64_t bt = 0; bt < B * L; ++bt) {
    const int64_t b = bt / L;
    const int64_t t = bt % L;
    const int64_t p_idx = t + 1;
    const int64_t prefix_off = (b * P + p_idx) * N;
    const T r_t = (dones && t > 0) ? dones[b * L + t - 1] : T(0);  // reset before element t
    const T keep = T(1) - r_t;
    const int64_t asrc = a_invariant ? 0 : (b * L + t) * N;
    const int64_t bsrc = (b * L + t) * N;
    const int64_t dst = (b * L + t) * out_stride;
    for (int64_t n = 0; n < N; ++n) {
      const T xar = a_re[asrc + n], xai = a_im[asrc + n];
      const T pbr = wbr[static_cast<size_t>(prefix_off + n)];
      const T pbi = wbi[static_cast<size_t>(prefix_off + n)];
      const T abr = xar * pbr - xai * pbi;
      const T abi = xar * pbi + xai * pbr;
      out_re[dst + n] = keep * abr + b_re[bsrc + n];
      out_im[dst + n] = keep * abi + b_im[bsrc + n];
    }
  }
}

}  // namespace

Tensor scan_states(const Tensor& a_re, const Tensor& a_im, const Tensor& b_re, const Tensor& b_im,
                   const Tensor& dones, const Tensor& x0_re, const Tensor& x0_im,
                   int* stage_count) {
  if (b_re.rank() != 3) numkit::fail("scan: b must be [B,T,N], got " + shape_str(b_re.shape()));
  const int64_t B = b_re.dim(0), L = b_re.dim(1), N = b_re.dim(2);
  if (L < 1) numkit::fail("scan: empty sequence rejected");
  const bool a_invariant = a_re.rank() == 1;
  if (a_invariant) {
    if (a_re.dim(0) != N) numkit::fail("scan: a length mismatch");
  } else if (!shapes_equal(a_re.shape(), b_re.shape())) {
    numkit::fail("scan: a shape " + shape_str(a_re.shape()) + " vs b " + shape_str(b_re.shape()));
  }
  const Dtype dt = b_re.dtype();
  Tensor out({B, L, 2, N}, dt);
  numkit::dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    const T* dn = dones.numel() ? dones.data<T>().data() : nullptr;
    const T* x0r = x0_re.numel() ? x0_re.data<T>().data() : nullptr;
    const T* x0i = x0_im.numel() ? x0_im.data<T>().data() : nullptr;
    scan_impl<T>(B, L, N, a_re.data<T>().data(), a_im.data<T>().data(), a_invariant,
                 b_re.data<T>().data(), b_im.data<T>().data(), dn, x0r, x0i,
                 out.data<T>().data(), out.data<T>().data() + N, 2 * N, stage_count);
  });
  return out;
}

std::vector<ComplexVec> parallel_scan(const std::vector<ScanElement>& elements,
                                      const ScanElement& init) {
  if (elements.empty()) numkit::fail("parallel_scan: empty sequence rejected");
  const int64_t L = static_cast<int64_t>(elements.size());
  const int64_t N = static_cast<int64_t>(init.b_re.size());
  for (double v : init.a_re)
    if (v != 1.0) numkit::fail("parallel_scan: init transition part must be the identity");
  for (double v : init.a_im)
    if (v != 0.0) numkit::fail("parallel_scan: init transition part must be the identity");
  if (init.done != 0.0) numkit::fail("parallel_scan: init done flag must be 0");

  Tensor ar({1, L, N}, Dtype::F64), ai({1, L, N}, Dtype::F64);
  Tensor br({1, L, N}, Dtype::F64), bi({1, L, N}, Dtype::F64);
  Tensor d({1, L}, Dtype::F64);
  Tensor x0r({1, N}, Dtype::F64), x0i({1, N}, Dtype::F64);
  for (int64_t t = 0; t < L; ++t) {
    const auto& e = elements[static_cast<size_t>(t)];
    if (static_cast<int64_t>(e.a_re.size()) != N) numkit::fail("parallel_scan: state sizes differ");
    for (int64_t n = 0; n < N; ++n) {
      ar.set(t * N + n, e.a_re[static_cast<size_t>(n)]);
      ai.set(t * N + n, e.a_im[static_cast<size_t>(n)]);
      br.set(t * N + n, e.b_re[static_cast<size_t>(n)]);
      bi.set(t * N + n, e.b_im[static_cast<size_t>(n)]);
    }
    d.set(t, e.done);
  }
  for (int64_t n = 0; n < N; ++n) {
    x0r.set(n, init.b_re[static_cast<size_t>(n)]);
    x0i.set(n, init.b_im[static_cast<size_t>(n)]);
  }
  Tensor out = scan_states(ar, ai, br, bi, d, x0r, x0i);
  std::vector<ComplexVec> states(static_cast<size_t>(L));
  for (int64_t t = 0; t < L; ++t) {
    ComplexVec& s = states[static_cast<size_t>(t)];
    s.re.resize(static_cast<size_t>(N));
    s.im.resize(static_cast<size_t>(N));
    for (int64_t n = 0; n < N; ++n) {
      s.re[static_cast<size_t>(n)] = out.at((t * 2 + 0) * N + n);
      s.im[static_cast<size_t>(n)] = out.at((t * 2 + 1) * N + n);
    }
  }
  return states;
}

Tensor DiagScanOp::forward(std::span<const Tensor* const> in) {
  if (in.size() != 6) numkit::fail("diag_scan: expects 6 inputs");
  const Tensor& a_re = *in[0];
  const Tensor& a_im = *in[1];
  const Tensor& bu_re = *in[2];
  const Tensor& bu_im = *in[3];
  const Tensor& x0_re = *in[4];
  const Tensor& x0_im = *in[5];
  if (dones_.dtype() != bu_re.dtype()) dones_ = dones_.cast(bu_re.dtype());
  if (bu_re.rank() != 3) numkit::fail("diag_scan: bu must be [B,T,N]");
  if (!shapes_equal(dones_.shape(), Shape{bu_re.dim(0), bu_re.dim(1)}))
    numkit::fail("diag_scan: dones shape " + shape_str(dones_.shape()) + " does not match bu " +
                 shape_str(bu_re.shape()));
  return scan_states(a_re, a_im, bu_re, bu_im, dones_, x0_re, x0_im);
}

std::vector<std::optional<Tensor>> DiagScanOp::backward(std::span<const Tensor* const> in,
                                                        const Tensor& value, const Tensor& grad) {
  const Tensor& a_re = *in[0];
  const Tensor& a_im = *in[1];
  const Tensor& bu_re = *in[2];
  const Tensor& x0_re = *in[4];
  const Tensor& x0_im = *in[5];
  const int64_t B = bu_re.dim(0), L = bu_re.dim(1), N = bu_re.dim(2);
  const Dtype dt = bu_re.dtype();

  Tensor gbu_re({B, L, N}, dt), gbu_im({B, L, N}, dt);
  Tensor ga_re({N}, dt), ga_im({N}, dt);
  Tensor gx0_re({B, N}, dt), gx0_im({B, N}, dt);

  numkit::dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    auto ar = a_re.data<T>();
    auto ai = a_im.data<T>();
    auto d = dones_.data<T>();
    auto st = value.data<T>();    // [B,L,2,N]
    auto gr = grad.data<T>();     // [B,L,2,N]
    auto x0r = x0_re.data<T>();
    auto x0i = x0_im.data<T>();

    // Reversed-time adjoint recurrence g_t = D_t + (1-d_t) conj(a) g_{t+1},
    // expressed as a plain scan over the reversed sequence.
    Tensor alpha_re({B, L, N}, dt), alpha_im({B, L, N}, dt);
    Tensor drev_re({B, L, N}, dt), drev_im({B, L, N}, dt);
    auto apr = alpha_re.data<T>();
    auto api = alpha_im.data<T>();
    auto dr = drev_re.data<T>();
    auto di = drev_im.data<T>();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t tau = 0; tau < L; ++tau) {
        const int64_t t = L - 1 - tau;  // original index (0-based)
        const T keep = T(1) - d[static_cast<size_t>(b * L + t)];
        for (int64_t n = 0; n < N; ++n) {
          apr[static_cast<size_t>((b * L + tau) * N + n)] = keep * ar[static_cast<size_t>(n)];
          api[static_cast<size_t>((b * L + tau) * N + n)] = -keep * ai[static_cast<size_t>(n)];
          dr[static_cast<size_t>((b * L + tau) * N + n)] =
              gr[static_cast<size_t>(((b * L + t) * 2 + 0) * N + n)];
          di[static_cast<size_t>((b * L + tau) * N + n)] =
              gr[static_cast<size_t>(((b * L + t) * 2 + 1) * N + n)];
        }
      }
    Tensor g_states = scan_states(alpha_re, alpha_im, drev_re, drev_im, Tensor(), Tensor(),
                                  Tensor());
    auto gs = g_states.data<T>();  // [B,L,2,N] in reversed time

    auto gbr = gbu_re.data<T>();
    auto gbi = gbu_im.data<T>();
    auto gar = ga_re.data<T>();
    auto gai = ga_im.data<T>();
    auto gxr = gx0_re.data<T>();
    auto gxi = gx0_im.data<T>();
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t t = 0; t < L; ++t) {
        const int64_t tau = L - 1 - t;
        const int64_t go = ((b * L + tau) * 2) * N;
        const int64_t bo = (b * L + t) * N;
        // gradient w.r.t. bu_t is g_t itself
        for (int64_t n = 0; n < N; ++n) {
          gbr[static_cast<size_t>(bo + n)] = gs[static_cast<size_t>(go + n)];
          gbi[static_cast<size_t>(bo + n)] = gs[static_cast<size_t>(go + N + n)];
        }
        // gradient w.r.t. the diagonal: conj(masked x_{t-1}) ∘ g_t
        const T mask = t == 0 ? T(1) : T(1) - d[static_cast<size_t>(b * L + t - 1)];
        for (int64_t n = 0; n < N; ++n) {
          T xr, xi;
          if (t == 0) {
            xr = x0r.empty() ? T(0) : x0r[static_cast<size_t>(b * N + n)];
            xi = x0i.empty() ? T(0) : x0i[static_cast<size_t>(b * N + n)];
          } else {
            xr = st[static_cast<size_t>(((b * L + t - 1) * 2 + 0) * N + n)];
            xi = st[static_cast<size_t>(((b * L + t - 1) * 2 + 1) * N + n)];
          }
          const T ggr = gs[static_cast<size_t>(go + n)];
          const T ggi = gs[static_cast<size_t>(go + N + n)];
          gar[static_cast<size_t>(n)] += mask * (xr * ggr + xi * ggi);
          gai[static_cast<size_t>(n)] += mask * (xr * ggi - xi * ggr);
        }
      }
      // gradient w.r.t. x0: conj(a) ∘ g_1
      const int64_t go1 = ((b * L + (L - 1)) * 2) * N;  // reversed index of t=0
      for (int64_t n = 0; n < N; ++n) {
        const T ggr = gs[static_cast<size_t>(go1 + n)];
        const T ggi = gs[static_cast<size_t>(go1 + N + n)];
        gxr[static_cast<size_t>(b * N + n)] = ar[static_cast<size_t>(n)] * ggr + ai[static_cast<size_t>(n)] * ggi;
        gxi[static_cast<size_t>(b * N + n)] = ar[static_cast<size_t>(n)] * ggi - ai[static_cast<size_t>(n)] * ggr;
      }
    }
  });

  return {ga_re, ga_im, gbu_re, gbu_im, gx0_re, gx0_im};
}

ScanVars diag_scan(Graph& g, Var a_re, Var a_im, Var bu_re, Var bu_im, Var x0_re, Var x0_im,
                   const Tensor& dones) {
  auto op = std::make_shared<DiagScanOp>(dones);
  std::vector<Var> inputs{a_re, a_im, bu_re, bu_im, x0_re, x0_im};
  Var packed = g.custom(op, inputs);
  const Shape& s = g.shape(packed);  // [B,T,2,N]
  const int64_t B = s[0], T = s[1], N = s[3];
  Var re = g.reshape(g.slice(packed, 2, 0, 1), {B, T, N});
  Var im = g.reshape(g.slice(packed, 2, 1, 1), {B, T, N});
  return {re, im};
}

}  // namespace sswm::ssm
