#pragma once
// Layer forward/backward kernels shared by the model variants. Activations
// are time- or token-major row-major matrices (rows = positions).

#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <numbers>
#include <vector>

#include "xmae/model.hpp"
#include "xmae/rng.hpp"

namespace xmae::detail {

constexpr double kLnEps = 1e-5;

template <typename T>
Mat<T> linear_fwd(const Linear<T>& l, const Mat<T>& x) {
  Mat<T> y = x * l.w;
  y.rowwise() += l.b.row(0);
  return y;
}

// Accumulates parameter gradients into g; dx is overwritten if non-null.
template <typename T>
void linear_bwd(const Linear<T>& l, const Mat<T>& x, const Mat<T>& dy, Linear<T>& g, Mat<T>* dx) {
  g.w.noalias() += x.transpose() * dy;
  g.b.row(0) += dy.colwise().sum();
  if (dx) *dx = dy * l.w.transpose();
}

template <typename T>
struct LnCache {
  Mat<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

template <typename T>
Mat<T> layer_norm_fwd(const LayerNormParams<T>& p, const Mat<T>& x, LnCache<T>* c) {
  const auto d = x.cols();
  Eigen::Matrix<T, Eigen::Dynamic, 1> mu = x.rowwise().mean();
  Mat<T> xc = x.colwise() - mu;
  Eigen::Matrix<T, Eigen::Dynamic, 1> var = xc.array().square().rowwise().sum() / static_cast<T>(d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd = (var.array() + static_cast<T>(kLnEps)).rsqrt();
  Mat<T> xhat = xc.array().colwise() * rstd.array();
  Mat<T> y = xhat.array().rowwise() * p.gamma.row(0).array();
  y.rowwise() += p.beta.row(0);
  if (c) {
    c->xhat = std::move(xhat);
    c->rstd = std::move(rstd);
  }
  return y;
}

template <typename T>
Mat<T> layer_norm_bwd(const LayerNormParams<T>& p, const LnCache<T>& c, const Mat<T>& dy, LayerNormParams<T>& g) {
  const T d = static_cast<T>(dy.cols());
  g.gamma.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  g.beta.row(0) += dy.colwise().sum();
  Mat<T> dxh = dy.array().rowwise() * p.gamma.row(0).array();
  Eigen::Matrix<T, Eigen::Dynamic, 1> m1 = dxh.rowwise().sum() / d;
  Eigen::Matrix<T, Eigen::Dynamic, 1> m2 = (dxh.array() * c.xhat.array()).rowwise().sum() / d;
  Mat<T> dx = dxh;
  dx.colwise() -= m1;
  dx.array() -= c.xhat.array().colwise() * m2.array();
  dx.array().colwise() *= c.rstd.array();
  return dx;
}

// Exact (erf) GELU.
template <typename T>
Mat<T> gelu(const Mat<T>& x) {
  const T s = static_cast<T>(1.0 / std::numbers::sqrt2);
  return (static_cast<T>(0.5) * x.array() * (static_cast<T>(1) + (x.array() * s).erf())).matrix();
}

template <typename T>
Mat<T> gelu_bwd(const Mat<T>& x, const Mat<T>& dy) {
  const T s = static_cast<T>(1.0 / std::numbers::sqrt2);
  const T k = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
  auto cdf = static_cast<T>(0.5) * (static_cast<T>(1) + (x.array() * s).erf());
  auto pdf = k * (static_cast<T>(-0.5) * x.array().square()).exp();
  return (dy.array() * (cdf + x.array() * pdf)).matrix();
}

// Inverted dropout mask (entries 0 or 1/(1-p)); empty when inactive.
template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng* rng) {
  if (!rng || p <= 0.0) return {};
  Mat<T> m(rows, cols);
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng->uniform() < p ? T(0) : keep;
  return m;
}

template <typename T>
void apply_mask(Mat<T>& x, const Mat<T>& m) {
  if (m.size()) x.array() *= m.array();
}

template <typename T>
Mat<T> softmax_rows(const Mat<T>& s) {
  Mat<T> a = s.colwise() - s.rowwise().maxCoeff();
  a = a.array().exp();
  a.array().colwise() /= a.rowwise().sum().array();
  return a;
}

template <typename T>
struct AttnCache {
  Mat<T> xq, xkv;  // projection inputs
  Mat<T> q, k, v;
  std::vector<Mat<T>> a;     // softmax weights per head
  std::vector<Mat<T>> drop;  // dropout masks per head
  Mat<T> concat;             // head outputs before the output projection
};

template <typename T>
Mat<T> attention_fwd(const AttentionParams<T>& p, const Mat<T>& xq, const Mat<T>& xkv, int heads, double dropout,
                     Rng* rng, AttnCache<T>& c) {
  c.xq = xq;
  c.xkv = xkv;
  c.q = linear_fwd(p.q, xq);
  c.k = linear_fwd(p.k, xkv);
  c.v = linear_fwd(p.v, xkv);
  const Eigen::Index dh = c.q.cols() / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  c.concat.resize(xq.rows(), c.q.cols());
  c.a.assign(heads, {});
  c.drop.assign(heads, {});
  for (int h = 0; h < heads; ++h) {
    Mat<T> s = (c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose()) * scale;
    c.a[h] = softmax_rows(s);
    c.drop[h] = dropout_mask<T>(s.rows(), s.cols(), dropout, rng);
    Mat<T> ad = c.a[h];
    apply_mask(ad, c.drop[h]);
    c.concat.middleCols(h * dh, dh).noalias() = ad * c.v.middleCols(h * dh, dh);
  }
  return linear_fwd(p.o, c.concat);
}

// Returns gradients w.r.t. the query-side and key/value-side inputs.
template <typename T>
void attention_bwd(const AttentionParams<T>& p, const AttnCache<T>& c, const Mat<T>& dy, int heads,
                   AttentionParams<T>& g, const BackwardFaults& faults, Mat<T>& dxq, Mat<T>& dxkv) {
  Mat<T> dcat;
  linear_bwd(p.o, c.concat, dy, g.o, &dcat);
  const Eigen::Index dh = c.q.cols() / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Mat<T> dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
  for (int h = 0; h < heads; ++h) {
    const auto doh = dcat.middleCols(h * dh, dh);
    Mat<T> ad = c.a[h];
    apply_mask(ad, c.drop[h]);
    dv.middleCols(h * dh, dh).noalias() = ad.transpose() * doh;
    Mat<T> da = doh * c.v.middleCols(h * dh, dh).transpose();
    apply_mask(da, c.drop[h]);
    Eigen::Matrix<T, Eigen::Dynamic, 1> r = (da.array() * c.a[h].array()).rowwise().sum();
    if (faults.flip_softmax_jacobian) r = -r;
    Mat<T> ds = (c.a[h].array() * (da.colwise() - r).array()).matrix() * scale;
    dq.middleCols(h * dh, dh).noalias() = ds * c.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * c.q.middleCols(h * dh, dh);
  }
  Mat<T> tmp;
  linear_bwd(p.q, c.xq, dq, g.q, &dxq);
  linear_bwd(p.k, c.xkv, dk, g.k, &dxkv);
  linear_bwd(p.v, c.xkv, dv, g.v, &tmp);
  dxkv += tmp;
}

template <typename T>
struct BlockCache {
  LnCache<T> ln1, ln_kv, ln2;
  AttnCache<T> attn;
  Mat<T> h;        // after the attention residual
  Mat<T> ff1_in;   // LN2(h)
  Mat<T> ff1_out;  // pre-activation
  Mat<T> act;      // GELU output
  Mat<T> ff_drop;
};

// Self-attention when kv is null, cross-attention otherwise.
template <typename T>
Mat<T> block_fwd(const BlockParams<T>& p, const Mat<T>& x, const Mat<T>* kv, int heads, double dropout, Rng* rng,
                 BlockCache<T>& c) {
  Mat<T> xq = layer_norm_fwd(p.ln1, x, &c.ln1);
  Mat<T> a;
  if (kv) {
    Mat<T> xkv = layer_norm_fwd(p.ln_kv, *kv, &c.ln_kv);
    a = attention_fwd(p.attn, xq, xkv, heads, dropout, rng, c.attn);
  } else {
    a = attention_fwd(p.attn, xq, xq, heads, dropout, rng, c.attn);
  }
  c.h = x + a;
  c.ff1_in = layer_norm_fwd(p.ln2, c.h, &c.ln2);
  c.ff1_out = linear_fwd(p.ff1, c.ff1_in);
  c.act = gelu(c.ff1_out);
  Mat<T> f = linear_fwd(p.ff2, c.act);
  c.ff_drop = dropout_mask<T>(f.rows(), f.cols(), dropout, rng);
  apply_mask(f, c.ff_drop);
  return c.h + f;
}

// Returns d(input x); for cross blocks also accumulates into *dkv.
template <typename T>
Mat<T> block_bwd(const BlockParams<T>& p, const BlockCache<T>& c, const Mat<T>& dy, bool cross, BlockParams<T>& g,
                 const BackwardFaults& faults, Mat<T>* dkv) {
  Mat<T> df = dy;
  apply_mask(df, c.ff_drop);
  Mat<T> dact;
  linear_bwd(p.ff2, c.act, df, g.ff2, &dact);
  Mat<T> dpre = gelu_bwd(c.ff1_out, dact);
  Mat<T> dln2;
  linear_bwd(p.ff1, c.ff1_in, dpre, g.ff1, &dln2);
  Mat<T> dh = dy + layer_norm_bwd(p.ln2, c.ln2, dln2, g.ln2);

  Mat<T> dxq, dxkv;
  attention_bwd(p.attn, c.attn, dh, static_cast<int>(c.attn.a.size()), g.attn, faults, dxq, dxkv);
  if (cross) {
    *dkv += layer_norm_bwd(p.ln_kv, c.ln_kv, dxkv, g.ln_kv);
  } else {
    dxq += dxkv;
  }
  return dh + layer_norm_bwd(p.ln1, c.ln1, dxq, g.ln1);
}

template <typename T>
struct StemCache {
  std::vector<Mat<T>> cols;  // im2col input of each conv
  std::vector<Mat<T>> pre;   // pre-activation of each conv
  Mat<T> last;               // input to the 1x1 projection
};

// "Same" padded im2col: row t holds x[t - pad .. t - pad + k - 1] across channels.
template <typename T>
Mat<T> im2col(const Mat<T>& x, int k) {
  const Eigen::Index n = x.rows(), c = x.cols();
  const Eigen::Index pad = (k - 1) / 2;
  Mat<T> cols = Mat<T>::Zero(n, k * c);
  for (int j = 0; j < k; ++j) {
    const Eigen::Index off = j - pad;
    const Eigen::Index t0 = std::max<Eigen::Index>(0, -off);
    const Eigen::Index t1 = std::min<Eigen::Index>(n, n - off);
    if (t1 > t0) cols.block(t0, j * c, t1 - t0, c) = x.block(t0 + off, 0, t1 - t0, c);
  }
  return cols;
}

template <typename T>
Mat<T> col2im(const Mat<T>& dcols, int k, Eigen::Index c) {
  const Eigen::Index n = dcols.rows();
  const Eigen::Index pad = (k - 1) / 2;
  Mat<T> dx = Mat<T>::Zero(n, c);
  for (int j = 0; j < k; ++j) {
    const Eigen::Index off = j - pad;
    const Eigen::Index t0 = std::max<Eigen::Index>(0, -off);
    const Eigen::Index t1 = std::min<Eigen::Index>(n, n - off);
    if (t1 > t0) dx.block(t0 + off, 0, t1 - t0, c) += dcols.block(t0, j * c, t1 - t0, c);
  }
  return dx;
}

template <typename T>
Mat<T> stem_fwd(const ConvStemParams<T>& p, const Mat<T>& x, int k, StemCache<T>* c) {
  Mat<T> h = x;
  if (c) {
    c->cols.clear();
    c->pre.clear();
  }
  for (const auto& conv : p.convs) {
    Mat<T> cols = im2col(h, k);
    Mat<T> pre = linear_fwd(conv, cols);
    h = gelu(pre);
    if (c) {
      c->cols.push_back(std::move(cols));
      c->pre.push_back(std::move(pre));
    }
  }
  Mat<T> out = linear_fwd(p.proj, h);
  if (c) c->last = std::move(h);
  return out;
}

// Returns d(input), an L x 1 column.
template <typename T>
Mat<T> stem_bwd(const ConvStemParams<T>& p, const StemCache<T>& c, const Mat<T>& dy, int k, ConvStemParams<T>& g) {
  Mat<T> dh;
  linear_bwd(p.proj, c.last, dy, g.proj, &dh);
  for (std::size_t i = p.convs.size(); i-- > 0;) {
    Mat<T> dpre = gelu_bwd(c.pre[i], dh);
    Mat<T> dcols;
    linear_bwd(p.convs[i], c.cols[i], dpre, g.convs[i], &dcols);
    dh = col2im(dcols, k, dcols.cols() / k);
  }
  return dh;
}

// L x C feature map viewed as (L/P) x (P*C) patch rows.
template <typename T>
Mat<T> patchify(const Mat<T>& fmap, int patch_len) {
  const Eigen::Index n = fmap.rows() / patch_len;
  return Eigen::Map<const Mat<T>>(fmap.data(), n, patch_len * fmap.cols());
}

template <typename T>
Mat<T> unpatchify(const Mat<T>& patches, int patch_len) {
  const Eigen::Index c = patches.cols() / patch_len;
  return Eigen::Map<const Mat<T>>(patches.data(), patches.rows() * patch_len, c);
}

}  // namespace xmae::detail
