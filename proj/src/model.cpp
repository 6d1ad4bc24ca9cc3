#include "xmae/model.hpp"

#include <stdexcept>

#include "nn.hpp"
#include "xmae/error.hpp"
#include "xmae/rng.hpp"

namespace xmae {

using namespace detail;

std::string_view to_string(Objective o) { return o == Objective::Xmae ? "xmae" : "mm_baseline"; }

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (seq_len < 1 || patch_len < 1) bad("seq_len and patch_len must be positive");
  if (seq_len % patch_len != 0) bad("seq_len must be a multiple of patch_len");
  if (conv_kernel < 1 || conv_kernel % 2 == 0) bad("conv_kernel must be odd");
  if (conv_widths.empty()) bad("conv_widths must be nonempty");
  for (int w : conv_widths)
    if (w < 1) bad("conv widths must be positive");
  if (conv_out < 1 || embed_dim < 1 || ff_dim < 1 || heads < 1) bad("dimensions must be positive");
  if (embed_dim % heads != 0) bad("embed_dim must be divisible by heads");
  if (depth_ppg < 1 || depth_ecg < 0 || depth_bridge < 1 || depth_decoder < 0) bad("invalid depth");
  if (!(dropout >= 0.0 && dropout < 1.0)) bad("dropout must be in [0, 1)");
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.embed_dim = 64;
  c.ff_dim = 96;
  c.heads = 4;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.seq_len = 80;
  c.patch_len = 20;
  c.conv_widths = {4, 4, 4};
  c.conv_out = 2;
  c.embed_dim = 8;
  c.ff_dim = 12;
  c.heads = 2;
  c.depth_ppg = c.depth_ecg = c.depth_bridge = c.depth_decoder = 1;
  return c;
}

namespace {

template <typename T>
Linear<T> zero_linear(int in, int out) {
  return {Mat<T>::Zero(in, out), Mat<T>::Zero(1, out)};
}

template <typename T>
LayerNormParams<T> zero_ln(int d) {
  return {Mat<T>::Zero(1, d), Mat<T>::Zero(1, d)};
}

template <typename T>
BlockParams<T> zero_block(const ModelConfig& c, bool cross) {
  const int d = c.embed_dim;
  BlockParams<T> b;
  b.cross = cross;
  b.ln1 = zero_ln<T>(d);
  if (cross) b.ln_kv = zero_ln<T>(d);
  b.attn = {zero_linear<T>(d, d), zero_linear<T>(d, d), zero_linear<T>(d, d), zero_linear<T>(d, d)};
  b.ln2 = zero_ln<T>(d);
  b.ff1 = zero_linear<T>(d, c.ff_dim);
  b.ff2 = zero_linear<T>(c.ff_dim, d);
  return b;
}

template <typename T>
ConvStemParams<T> zero_stem(const ModelConfig& c) {
  ConvStemParams<T> s;
  int in = 1;
  for (int w : c.conv_widths) {
    s.convs.push_back(zero_linear<T>(c.conv_kernel * in, w));
    in = w;
  }
  s.proj = zero_linear<T>(in, c.conv_out);
  return s;
}

template <typename T>
ModelParams<T> allocate(const ModelConfig& c, Objective obj) {
  c.validate();
  ModelParams<T> p;
  p.config = c;
  p.objective = obj;
  const int d = c.embed_dim, n = c.n_patches();
  p.stem_ppg = zero_stem<T>(c);
  p.stem_ecg = zero_stem<T>(c);
  p.patch_ppg = zero_linear<T>(c.patch_len * c.conv_out, d);
  p.patch_ecg = zero_linear<T>(c.patch_len * c.conv_out, d);
  p.pos_ppg = Mat<T>::Zero(n, d);
  p.pos_ecg = Mat<T>::Zero(n, d);
  p.mask_token = Mat<T>::Zero(1, d);
  auto blocks = [&](int count, bool cross) {
    std::vector<BlockParams<T>> v;
    for (int i = 0; i < count; ++i) v.push_back(zero_block<T>(c, cross));
    return v;
  };
  if (obj == Objective::Xmae) {
    p.enc_ppg = blocks(c.depth_ppg, false);
    p.enc_ecg = blocks(c.depth_ecg, false);
    p.bridge = blocks(c.depth_bridge, true);
  } else {
    // Same block budget as the two encoders plus the bridge.
    p.joint = blocks(c.depth_ppg + c.depth_ecg + c.depth_bridge, false);
    p.modality = Mat<T>::Zero(2, d);
    p.head_ln_ppg = zero_ln<T>(d);
    p.head_ppg = zero_linear<T>(d, c.patch_len);
  }
  p.decoder = blocks(c.depth_decoder, false);
  p.head_ln_ecg = zero_ln<T>(d);
  p.head_ecg = zero_linear<T>(d, c.patch_len);
  return p;
}

bool ends_with(const std::string& s, std::string_view suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

}  // namespace

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Mat<T>& m, bool) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

template <typename T>
ModelParams<T> ModelParams<T>::zeros_like() const {
  return allocate<T>(config, objective);
}

template <typename T>
void ModelParams<T>::set_zero() {
  for_each([](const std::string&, Mat<T>& m, bool) { m.setZero(); });
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out = allocate<U>(config, objective);
  std::vector<Mat<U>*> dst;
  out.for_each([&](const std::string&, Mat<U>& m, bool) { dst.push_back(&m); });
  std::size_t i = 0;
  for_each([&](const std::string&, const Mat<T>& m, bool) { *dst[i++] = m.template cast<U>(); });
  return out;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, Objective objective, std::uint64_t seed) {
  ModelParams<T> p = allocate<T>(cfg, objective);
  Rng rng(derive_seed({seed, 0x1417}));
  auto trunc = [&](double sd) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    return static_cast<T>(z * sd);
  };
  p.for_each([&](const std::string& name, Mat<T>& m, bool) {
    if (ends_with(name, ".gamma")) {
      m.setOnes();
    } else if (ends_with(name, ".b") || ends_with(name, ".beta")) {
      m.setZero();
    } else if (name.rfind("stem_", 0) == 0) {
      const double sd = std::sqrt(2.0 / static_cast<double>(m.rows()));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = trunc(sd);
    } else {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = trunc(0.02);
    }
  });
  return p;
}

namespace {

template <typename T>
void check_len(std::span<const T> x, const ModelConfig& c, const char* what) {
  if (static_cast<int>(x.size()) != c.seq_len)
    throw Error(ErrorKind::ShapeMismatch, std::string(what) + " length " + std::to_string(x.size()) +
                                              " != " + std::to_string(c.seq_len));
}

void check_mask(const MaskSpec& m, const ModelConfig& c) {
  if (static_cast<int>(m.n_patches()) != c.n_patches())
    throw Error(ErrorKind::ShapeMismatch, "mask has " + std::to_string(m.n_patches()) + " patches, expected " +
                                              std::to_string(c.n_patches()));
}

template <typename T>
Mat<T> gather_patches(std::span<const T> x, const std::vector<std::size_t>& idx, int patch_len) {
  Mat<T> out(static_cast<Eigen::Index>(idx.size()) * patch_len, 1);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int j = 0; j < patch_len; ++j) out(static_cast<Eigen::Index>(i) * patch_len + j, 0) = x[idx[i] * patch_len + j];
  return out;
}

template <typename T>
struct TokenCache {
  StemCache<T> stem;
  Mat<T> patches;
  std::vector<std::size_t> positions;
};

// Signal (L' x 1) -> conv stem -> patches -> tokens + positional rows.
template <typename T>
Mat<T> tokenize_fwd(const ConvStemParams<T>& stem, const Linear<T>& patch, const Mat<T>& pos, const Mat<T>& signal,
                    const std::vector<std::size_t>& positions, const ModelConfig& c, TokenCache<T>* tc) {
  Mat<T> fmap = stem_fwd(stem, signal, c.conv_kernel, tc ? &tc->stem : nullptr);
  Mat<T> patches = patchify(fmap, c.patch_len);
  Mat<T> tok = linear_fwd(patch, patches);
  for (std::size_t i = 0; i < positions.size(); ++i) tok.row(static_cast<Eigen::Index>(i)) += pos.row(positions[i]);
  if (tc) {
    tc->patches = std::move(patches);
    tc->positions = positions;
  }
  return tok;
}

template <typename T>
Mat<T> tokenize_bwd(const ConvStemParams<T>& stem, const Linear<T>& patch, const TokenCache<T>& tc, const Mat<T>& dtok,
                    const ModelConfig& c, ConvStemParams<T>& gstem, Linear<T>& gpatch, Mat<T>& gpos) {
  for (std::size_t i = 0; i < tc.positions.size(); ++i) gpos.row(tc.positions[i]) += dtok.row(static_cast<Eigen::Index>(i));
  Mat<T> dpatches;
  linear_bwd(patch, tc.patches, dtok, gpatch, &dpatches);
  return stem_bwd(stem, tc.stem, unpatchify(dpatches, c.patch_len), c.conv_kernel, gstem);
}

template <typename T>
Mat<T> run_blocks(const std::vector<BlockParams<T>>& bs, Mat<T> x, const Mat<T>* kv, const ModelConfig& c, Rng* rng,
                  std::vector<BlockCache<T>>* caches) {
  std::vector<BlockCache<T>> local(bs.size());
  auto& cs = caches ? *caches : local;
  cs.resize(bs.size());
  for (std::size_t i = 0; i < bs.size(); ++i) x = block_fwd(bs[i], x, kv, c.heads, c.dropout, rng, cs[i]);
  return x;
}

template <typename T>
Mat<T> run_blocks_bwd(const std::vector<BlockParams<T>>& bs, const std::vector<BlockCache<T>>& cs, Mat<T> dy,
                      std::vector<BlockParams<T>>& g, const BackwardFaults& faults, Mat<T>* dkv) {
  for (std::size_t i = bs.size(); i-- > 0;) dy = block_bwd(bs[i], cs[i], dy, bs[i].cross, g[i], faults, dkv);
  return dy;
}

template <typename T>
Mat<T> reinsert(const Mat<T>& vis_tokens, const std::vector<std::size_t>& vis, const Mat<T>& mask_token,
                const Mat<T>& pos, const Mat<T>* extra) {
  Mat<T> full(pos.rows(), pos.cols());
  std::vector<bool> seen(static_cast<std::size_t>(pos.rows()), false);
  for (std::size_t i = 0; i < vis.size(); ++i) {
    full.row(vis[i]) = vis_tokens.row(static_cast<Eigen::Index>(i));
    seen[vis[i]] = true;
  }
  for (Eigen::Index r = 0; r < pos.rows(); ++r) {
    if (seen[r]) continue;
    full.row(r) = mask_token.row(0) + pos.row(r);
    if (extra) full.row(r) += extra->row(0);
  }
  return full;
}

// Gradient of reinsert: returns d(visible tokens); masked rows feed the
// mask token, the positional table and (optionally) the extra embedding.
template <typename T>
Mat<T> reinsert_bwd(const Mat<T>& dfull, const std::vector<std::size_t>& vis, Mat<T>& gmask, Mat<T>& gpos,
                    Mat<T>* gextra) {
  Mat<T> dvis(static_cast<Eigen::Index>(vis.size()), dfull.cols());
  std::vector<bool> seen(static_cast<std::size_t>(dfull.rows()), false);
  for (std::size_t i = 0; i < vis.size(); ++i) {
    dvis.row(static_cast<Eigen::Index>(i)) = dfull.row(vis[i]);
    seen[vis[i]] = true;
  }
  for (Eigen::Index r = 0; r < dfull.rows(); ++r) {
    if (seen[r]) continue;
    gmask.row(0) += dfull.row(r);
    gpos.row(r) += dfull.row(r);
    if (gextra) gextra->row(0) += dfull.row(r);
  }
  return dvis;
}

template <typename T>
struct HeadCache {
  LnCache<T> ln;
  Mat<T> in;
};

template <typename T>
Mat<T> head_fwd(const LayerNormParams<T>& ln, const Linear<T>& lin, const Mat<T>& z, HeadCache<T>* hc) {
  HeadCache<T> local;
  auto& c = hc ? *hc : local;
  c.in = layer_norm_fwd(ln, z, &c.ln);
  return linear_fwd(lin, c.in);
}

template <typename T>
Mat<T> head_bwd(const LayerNormParams<T>& ln, const Linear<T>& lin, const HeadCache<T>& c, const Mat<T>& dy,
                LayerNormParams<T>& gln, Linear<T>& glin) {
  Mat<T> din;
  linear_bwd(lin, c.in, dy, glin, &din);
  return layer_norm_bwd(ln, c.ln, din, gln);
}

template <typename T>
std::vector<T> flatten(const Mat<T>& m) {
  return std::vector<T>(m.data(), m.data() + m.size());
}

// Masked MSE over `masked` samples; fills dpred (same shape as pred) scaled by weight.
template <typename T>
T masked_mse_grad(const Mat<T>& pred, std::span<const T> target, const std::vector<bool>& masked, T weight,
                  Mat<T>& dpred) {
  std::size_t count = 0;
  for (bool m : masked) count += m;
  if (count == 0) throw Error(ErrorKind::EmptyMask, "no masked samples to score");
  dpred = Mat<T>::Zero(pred.rows(), pred.cols());
  T sum = 0;
  const T inv = static_cast<T>(1) / static_cast<T>(count);
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (!masked[i]) continue;
    const T e = pred.data()[i] - target[i];
    sum += e * e;
    dpred.data()[i] = weight * static_cast<T>(2) * e * inv;
  }
  return sum * inv;
}

std::vector<bool> masked_samples(const MaskSpec& m, int patch_len) {
  auto v = expand_to_samples(m, static_cast<std::size_t>(patch_len));
  v.flip();
  return v;
}

template <typename T>
struct XmaeTape {
  TokenCache<T> ppg_tok, ecg_tok;
  std::vector<BlockCache<T>> enc_ppg, enc_ecg, bridge, dec;
  HeadCache<T> head;
  std::vector<std::size_t> vis;
};

template <typename T>
Mat<T> xmae_fwd(const ModelParams<T>& p, std::span<const T> ppg, std::span<const T> ecg, const MaskSpec& mask,
                const ForwardOptions& opts, XmaeTape<T>* tape) {
  const auto& c = p.config;
  if (p.objective != Objective::Xmae) throw Error(ErrorKind::ShapeMismatch, "parameters are not an xmae model");
  check_len(ppg, c, "ppg");
  check_len(ecg, c, "ecg");
  check_mask(mask, c);
  XmaeTape<T> local;
  auto& t = tape ? *tape : local;
  Rng drop_rng(derive_seed({opts.rng_seed, 0xd509}));
  Rng* rng = opts.train_mode ? &drop_rng : nullptr;

  std::vector<std::size_t> all(static_cast<std::size_t>(c.n_patches()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  Mat<T> zp = tokenize_fwd(p.stem_ppg, p.patch_ppg, p.pos_ppg, gather_patches(ppg, all, c.patch_len), all, c,
                           &t.ppg_tok);
  zp = run_blocks(p.enc_ppg, std::move(zp), static_cast<const Mat<T>*>(nullptr), c, rng, &t.enc_ppg);

  t.vis = mask.visible_indices();
  Mat<T> ze(0, c.embed_dim);
  if (!t.vis.empty()) {
    ze = tokenize_fwd(p.stem_ecg, p.patch_ecg, p.pos_ecg, gather_patches(ecg, t.vis, c.patch_len), t.vis, c,
                      &t.ecg_tok);
    ze = run_blocks(p.enc_ecg, std::move(ze), static_cast<const Mat<T>*>(nullptr), c, rng, &t.enc_ecg);
  }
  Mat<T> z = reinsert<T>(ze, t.vis, p.mask_token, p.pos_ecg, nullptr);
  z = run_blocks(p.bridge, std::move(z), &zp, c, rng, &t.bridge);
  z = run_blocks(p.decoder, std::move(z), static_cast<const Mat<T>*>(nullptr), c, rng, &t.dec);
  return head_fwd(p.head_ln_ecg, p.head_ecg, z, &t.head);  // N x P
}

template <typename T>
void xmae_bwd(const ModelParams<T>& p, const XmaeTape<T>& t, const Mat<T>& dpred, ModelParams<T>& g,
              GradExtras<T>* ex) {
  const auto& c = p.config;
  const BackwardFaults faults = ex ? ex->faults : BackwardFaults{};
  Mat<T> dz = head_bwd(p.head_ln_ecg, p.head_ecg, t.head, dpred, g.head_ln_ecg, g.head_ecg);
  dz = run_blocks_bwd(p.decoder, t.dec, std::move(dz), g.decoder, faults, static_cast<Mat<T>*>(nullptr));
  Mat<T> dzp = Mat<T>::Zero(c.n_patches(), c.embed_dim);
  dz = run_blocks_bwd(p.bridge, t.bridge, std::move(dz), g.bridge, faults, &dzp);
  Mat<T> dze = reinsert_bwd<T>(dz, t.vis, g.mask_token, g.pos_ecg, nullptr);

  if (ex && ex->d_ecg_input) ex->d_ecg_input->assign(static_cast<std::size_t>(c.seq_len), T(0));
  if (!t.vis.empty()) {
    dze = run_blocks_bwd(p.enc_ecg, t.enc_ecg, std::move(dze), g.enc_ecg, faults, static_cast<Mat<T>*>(nullptr));
    Mat<T> dsig = tokenize_bwd(p.stem_ecg, p.patch_ecg, t.ecg_tok, dze, c, g.stem_ecg, g.patch_ecg, g.pos_ecg);
    if (ex && ex->d_ecg_input) {
      for (std::size_t i = 0; i < t.vis.size(); ++i)
        for (int j = 0; j < c.patch_len; ++j)
          (*ex->d_ecg_input)[t.vis[i] * c.patch_len + j] = dsig(static_cast<Eigen::Index>(i) * c.patch_len + j, 0);
    }
  }
  dzp = run_blocks_bwd(p.enc_ppg, t.enc_ppg, std::move(dzp), g.enc_ppg, faults, static_cast<Mat<T>*>(nullptr));
  Mat<T> dppg = tokenize_bwd(p.stem_ppg, p.patch_ppg, t.ppg_tok, dzp, c, g.stem_ppg, g.patch_ppg, g.pos_ppg);
  if (ex && ex->d_ppg_input) ex->d_ppg_input->assign(dppg.data(), dppg.data() + dppg.size());
}

template <typename T>
struct MmTape {
  TokenCache<T> ppg_tok, ecg_tok;
  std::vector<BlockCache<T>> joint, dec;
  HeadCache<T> head_ppg, head_ecg;
  std::vector<std::size_t> vis_p, vis_e;
};

template <typename T>
std::pair<Mat<T>, Mat<T>> mm_fwd(const ModelParams<T>& p, std::span<const T> ppg, std::span<const T> ecg,
                                 const MaskSpec& mask_e, const MaskSpec& mask_p, const ForwardOptions& opts,
                                 MmTape<T>* tape) {
  const auto& c = p.config;
  if (p.objective != Objective::MmBaseline)
    throw Error(ErrorKind::ShapeMismatch, "parameters are not an mm_baseline model");
  check_len(ppg, c, "ppg");
  check_len(ecg, c, "ecg");
  check_mask(mask_e, c);
  check_mask(mask_p, c);
  MmTape<T> local;
  auto& t = tape ? *tape : local;
  Rng drop_rng(derive_seed({opts.rng_seed, 0xd509}));
  Rng* rng = opts.train_mode ? &drop_rng : nullptr;

  t.vis_p = mask_p.visible_indices();
  t.vis_e = mask_e.visible_indices();
  const auto np = static_cast<Eigen::Index>(t.vis_p.size());
  const auto ne = static_cast<Eigen::Index>(t.vis_e.size());
  Mat<T> joint(np + ne, c.embed_dim);
  if (np) {
    Mat<T> zp = tokenize_fwd(p.stem_ppg, p.patch_ppg, p.pos_ppg, gather_patches(ppg, t.vis_p, c.patch_len), t.vis_p,
                             c, &t.ppg_tok);
    zp.rowwise() += p.modality.row(0);
    joint.topRows(np) = zp;
  }
  if (ne) {
    Mat<T> ze = tokenize_fwd(p.stem_ecg, p.patch_ecg, p.pos_ecg, gather_patches(ecg, t.vis_e, c.patch_len), t.vis_e,
                             c, &t.ecg_tok);
    ze.rowwise() += p.modality.row(1);
    joint.bottomRows(ne) = ze;
  }
  joint = run_blocks(p.joint, std::move(joint), static_cast<const Mat<T>*>(nullptr), c, rng, &t.joint);

  const Eigen::Index n = c.n_patches();
  Mat<T> mod_p = p.modality.row(0), mod_e = p.modality.row(1);
  Mat<T> full(2 * n, c.embed_dim);
  full.topRows(n) = reinsert<T>(joint.topRows(np), t.vis_p, p.mask_token, p.pos_ppg, &mod_p);
  full.bottomRows(n) = reinsert<T>(joint.bottomRows(ne), t.vis_e, p.mask_token, p.pos_ecg, &mod_e);
  full = run_blocks(p.decoder, std::move(full), static_cast<const Mat<T>*>(nullptr), c, rng, &t.dec);
  Mat<T> pp = head_fwd(p.head_ln_ppg, p.head_ppg, Mat<T>(full.topRows(n)), &t.head_ppg);
  Mat<T> pe = head_fwd(p.head_ln_ecg, p.head_ecg, Mat<T>(full.bottomRows(n)), &t.head_ecg);
  return {std::move(pp), std::move(pe)};
}

template <typename T>
void mm_bwd(const ModelParams<T>& p, const MmTape<T>& t, const Mat<T>& dpp, const Mat<T>& dpe, ModelParams<T>& g,
            GradExtras<T>* ex) {
  const auto& c = p.config;
  const BackwardFaults faults = ex ? ex->faults : BackwardFaults{};
  const Eigen::Index n = c.n_patches();
  Mat<T> dfull(2 * n, c.embed_dim);
  dfull.topRows(n) = head_bwd(p.head_ln_ppg, p.head_ppg, t.head_ppg, dpp, g.head_ln_ppg, g.head_ppg);
  dfull.bottomRows(n) = head_bwd(p.head_ln_ecg, p.head_ecg, t.head_ecg, dpe, g.head_ln_ecg, g.head_ecg);
  dfull = run_blocks_bwd(p.decoder, t.dec, std::move(dfull), g.decoder, faults, static_cast<Mat<T>*>(nullptr));

  const auto np = static_cast<Eigen::Index>(t.vis_p.size());
  const auto ne = static_cast<Eigen::Index>(t.vis_e.size());
  Mat<T> gmod_p = Mat<T>::Zero(1, c.embed_dim), gmod_e = Mat<T>::Zero(1, c.embed_dim);
  Mat<T> djoint(np + ne, c.embed_dim);
  djoint.topRows(np) = reinsert_bwd<T>(Mat<T>(dfull.topRows(n)), t.vis_p, g.mask_token, g.pos_ppg, &gmod_p);
  djoint.bottomRows(ne) = reinsert_bwd<T>(Mat<T>(dfull.bottomRows(n)), t.vis_e, g.mask_token, g.pos_ecg, &gmod_e);
  djoint = run_blocks_bwd(p.joint, t.joint, std::move(djoint), g.joint, faults, static_cast<Mat<T>*>(nullptr));

  if (ex && ex->d_ppg_input) ex->d_ppg_input->assign(static_cast<std::size_t>(c.seq_len), T(0));
  if (ex && ex->d_ecg_input) ex->d_ecg_input->assign(static_cast<std::size_t>(c.seq_len), T(0));
  auto scatter = [&](const Mat<T>& dsig, const std::vector<std::size_t>& vis, std::vector<T>* out) {
    if (!out) return;
    for (std::size_t i = 0; i < vis.size(); ++i)
      for (int j = 0; j < c.patch_len; ++j)
        (*out)[vis[i] * c.patch_len + j] = dsig(static_cast<Eigen::Index>(i) * c.patch_len + j, 0);
  };
  if (np) {
    Mat<T> dz = djoint.topRows(np);
    gmod_p.row(0) += dz.colwise().sum();
    Mat<T> dsig = tokenize_bwd(p.stem_ppg, p.patch_ppg, t.ppg_tok, dz, c, g.stem_ppg, g.patch_ppg, g.pos_ppg);
    scatter(dsig, t.vis_p, ex ? ex->d_ppg_input : nullptr);
  }
  if (ne) {
    Mat<T> dz = djoint.bottomRows(ne);
    gmod_e.row(0) += dz.colwise().sum();
    Mat<T> dsig = tokenize_bwd(p.stem_ecg, p.patch_ecg, t.ecg_tok, dz, c, g.stem_ecg, g.patch_ecg, g.pos_ecg);
    scatter(dsig, t.vis_e, ex ? ex->d_ecg_input : nullptr);
  }
  g.modality.row(0) += gmod_p.row(0);
  g.modality.row(1) += gmod_e.row(0);
}

}  // namespace

template <typename T>
std::vector<T> forward_xmae(const ModelParams<T>& p, std::span<const T> ppg, std::span<const T> ecg,
                            const MaskSpec& mask, const ForwardOptions& opts, std::vector<bool>* loss_mask) {
  Mat<T> pred = xmae_fwd<T>(p, ppg, ecg, mask, opts, nullptr);
  if (loss_mask) *loss_mask = masked_samples(mask, p.config.patch_len);
  return flatten(pred);
}

template <typename T>
T xmae_loss_and_grad(const ModelParams<T>& p, std::span<const T> ppg, std::span<const T> ecg, const MaskSpec& mask,
                     const ForwardOptions& opts, ModelParams<T>& grads, T weight, GradExtras<T>* extras) {
  XmaeTape<T> tape;
  Mat<T> pred = xmae_fwd<T>(p, ppg, ecg, mask, opts, &tape);
  Mat<T> dpred;
  const T loss = masked_mse_grad<T>(pred, ecg, masked_samples(mask, p.config.patch_len), weight, dpred);
  if (extras && extras->ecg_hat) *extras->ecg_hat = flatten(pred);
  xmae_bwd(p, tape, dpred, grads, extras);
  return loss;
}

template <typename T>
MmOutput<T> forward_mm(const ModelParams<T>& p, std::span<const T> ppg, std::span<const T> ecg,
                       const MaskSpec& mask_ecg, const MaskSpec& mask_ppg, const ForwardOptions& opts) {
  auto [pp, pe] = mm_fwd<T>(p, ppg, ecg, mask_ecg, mask_ppg, opts, nullptr);
  MmOutput<T> out;
  out.ppg_hat = flatten(pp);
  out.ecg_hat = flatten(pe);
  out.ppg_loss_mask = masked_samples(mask_ppg, p.config.patch_len);
  out.ecg_loss_mask = masked_samples(mask_ecg, p.config.patch_len);
  return out;
}

template <typename T>
T mm_loss_and_grad(const ModelParams<T>& p, std::span<const T> ppg, std::span<const T> ecg,
                   const MaskSpec& mask_ecg, const MaskSpec& mask_ppg, const ForwardOptions& opts,
                   ModelParams<T>& grads, T weight, GradExtras<T>* extras) {
  MmTape<T> tape;
  auto [pp, pe] = mm_fwd<T>(p, ppg, ecg, mask_ecg, mask_ppg, opts, &tape);
  Mat<T> dpp, dpe;
  const T lp = masked_mse_grad<T>(pp, ppg, masked_samples(mask_ppg, p.config.patch_len), weight, dpp);
  const T le = masked_mse_grad<T>(pe, ecg, masked_samples(mask_ecg, p.config.patch_len), weight, dpe);
  if (extras && extras->ecg_hat) *extras->ecg_hat = flatten(pe);
  if (extras && extras->ppg_hat) *extras->ppg_hat = flatten(pp);
  mm_bwd(p, tape, dpp, dpe, grads, extras);
  return lp + le;
}

template <typename T>
std::vector<T> embed_ppg(const ModelParams<T>& p, std::span<const T> ppg) {
  const auto& c = p.config;
  check_len(ppg, c, "ppg");
  std::vector<std::size_t> all(static_cast<std::size_t>(c.n_patches()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  Mat<T> z = tokenize_fwd(p.stem_ppg, p.patch_ppg, p.pos_ppg, gather_patches(ppg, all, c.patch_len), all, c,
                          static_cast<TokenCache<T>*>(nullptr));
  if (p.objective == Objective::Xmae) {
    z = run_blocks(p.enc_ppg, std::move(z), static_cast<const Mat<T>*>(nullptr), c, nullptr,
                   static_cast<std::vector<BlockCache<T>>*>(nullptr));
  } else {
    z.rowwise() += p.modality.row(0);
    z = run_blocks(p.joint, std::move(z), static_cast<const Mat<T>*>(nullptr), c, nullptr,
                   static_cast<std::vector<BlockCache<T>>*>(nullptr));
  }
  Eigen::Matrix<T, 1, Eigen::Dynamic> m = z.colwise().mean();
  return std::vector<T>(m.data(), m.data() + m.size());
}

namespace nn {

template <typename T>
Mat<T> softmax_rows(const Mat<T>& s) {
  return detail::softmax_rows(s);
}

template <typename T>
Mat<T> attention_core(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int heads, std::vector<Mat<T>>* weights) {
  if (q.cols() != k.cols() || k.rows() != v.rows() || q.cols() % heads != 0)
    throw Error(ErrorKind::ShapeMismatch, "attention operand shapes disagree");
  const Eigen::Index dh = q.cols() / heads, dv = v.cols() / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Mat<T> out(q.rows(), v.cols());
  if (weights) weights->clear();
  for (int h = 0; h < heads; ++h) {
    Mat<T> a = detail::softmax_rows<T>((q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale);
    out.middleCols(h * dv, dv).noalias() = a * v.middleCols(h * dv, dv);
    if (weights) weights->push_back(std::move(a));
  }
  return out;
}

template <typename T>
Mat<T> conv_stem(const ConvStemParams<T>& p, std::span<const T> x) {
  const int k = p.convs.empty() ? 1 : static_cast<int>(p.convs.front().w.rows());
  if (static_cast<int>(x.size()) < k) throw std::invalid_argument("conv_stem: input shorter than the kernel");
  Mat<T> in = Eigen::Map<const Mat<T>>(x.data(), static_cast<Eigen::Index>(x.size()), 1);
  return stem_fwd(p, in, k, static_cast<StemCache<T>*>(nullptr));
}

template <typename T>
Mat<T> patch_embed(const Linear<T>& p, const Mat<T>& fmap, int patch_len) {
  if (patch_len < 1 || fmap.rows() % patch_len != 0)
    throw Error(ErrorKind::IndivisibleLength,
                std::to_string(fmap.rows()) + " samples do not split into patches of " + std::to_string(patch_len));
  if (p.w.rows() != patch_len * fmap.cols())
    throw Error(ErrorKind::ShapeMismatch, "patch projection expects " + std::to_string(p.w.rows()) + " inputs");
  return linear_fwd(p, patchify(fmap, patch_len));
}

template <typename T>
Mat<T> encoder_block(const BlockParams<T>& p, const Mat<T>& x, int heads) {
  BlockCache<T> c;
  return block_fwd(p, x, static_cast<const Mat<T>*>(nullptr), heads, 0.0, nullptr, c);
}

template <typename T>
Mat<T> cross_block(const BlockParams<T>& p, const Mat<T>& queries, const Mat<T>& keys_values, int heads) {
  if (queries.cols() != keys_values.cols())
    throw Error(ErrorKind::ShapeMismatch, "query and key/value token dims differ");
  BlockCache<T> c;
  return block_fwd(p, queries, &keys_values, heads, 0.0, nullptr, c);
}

template <typename T>
Mat<T> reinsert_mask_tokens(const Mat<T>& visible_tokens, const std::vector<std::size_t>& visible_positions,
                            const Mat<T>& mask_token, const Mat<T>& pos) {
  return reinsert<T>(visible_tokens, visible_positions, mask_token, pos, nullptr);
}

}  // namespace nn

#define XMAE_INSTANTIATE(T)                                                                                        \
  template struct ModelParams<T>;                                                                                  \
  template ModelParams<T> init_params<T>(const ModelConfig&, Objective, std::uint64_t);                            \
  template std::vector<T> forward_xmae<T>(const ModelParams<T>&, std::span<const T>, std::span<const T>,           \
                                          const MaskSpec&, const ForwardOptions&, std::vector<bool>*);             \
  template T xmae_loss_and_grad<T>(const ModelParams<T>&, std::span<const T>, std::span<const T>, const MaskSpec&, \
                                   const ForwardOptions&, ModelParams<T>&, T, GradExtras<T>*);                     \
  template MmOutput<T> forward_mm<T>(const ModelParams<T>&, std::span<const T>, std::span<const T>,               \
                                     const MaskSpec&, const MaskSpec&, const ForwardOptions&);                     \
  template T mm_loss_and_grad<T>(const ModelParams<T>&, std::span<const T>, std::span<const T>, const MaskSpec&,   \
                                 const MaskSpec&, const ForwardOptions&, ModelParams<T>&, T, GradExtras<T>*);      \
  template std::vector<T> embed_ppg<T>(const ModelParams<T>&, std::span<const T>);                                 \
  template Mat<T> nn::softmax_rows<T>(const Mat<T>&);                                                              \
  template Mat<T> nn::attention_core<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, int, std::vector<Mat<T>>*);  \
  template Mat<T> nn::conv_stem<T>(const ConvStemParams<T>&, std::span<const T>);                                  \
  template Mat<T> nn::patch_embed<T>(const Linear<T>&, const Mat<T>&, int);                                        \
  template Mat<T> nn::encoder_block<T>(const BlockParams<T>&, const Mat<T>&, int);                                 \
  template Mat<T> nn::cross_block<T>(const BlockParams<T>&, const Mat<T>&, const Mat<T>&, int);                    \
  template Mat<T> nn::reinsert_mask_tokens<T>(const Mat<T>&, const std::vector<std::size_t>&, const Mat<T>&,       \
                                              const Mat<T>&);

XMAE_INSTANTIATE(float)
XMAE_INSTANTIATE(double)

template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;

}  // namespace xmae
