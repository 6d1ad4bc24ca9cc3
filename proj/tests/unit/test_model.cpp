#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "xmae/model.hpp"
#include "xmae/training.hpp"

using namespace xmae;

namespace {

std::vector<double> signal(std::size_t n, std::uint64_t seed) { return th::noise(n, seed, 0.5); }

std::vector<float> to_float(const std::vector<double>& x) { return {x.begin(), x.end()}; }

template <typename T>
void zero_block_weights(BlockParams<T>& b) {
  for (auto* l : {&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.ff1, &b.ff2}) {
    l->w.setZero();
    l->b.setZero();
  }
}

}  // namespace

TEST_CASE("conv stem shapes and zero response") {
  auto p = init_params<double>(ModelConfig{}, Objective::Xmae, 1);
  const auto full = nn::conv_stem(p.stem_ppg, std::span<const double>(signal(1000, 1)));
  CHECK(full.rows() == 1000);
  CHECK(full.cols() == 32);
  const auto three = nn::conv_stem(p.stem_ppg, std::span<const double>(signal(120, 2)));
  CHECK(three.rows() == 120);
  CHECK(three.cols() == 32);

  const std::vector<double> zeros(1000, 0.0);
  for (auto& c : p.stem_ppg.convs) c.b.setZero();
  p.stem_ppg.proj.b.setZero();
  CHECK(nn::conv_stem(p.stem_ppg, std::span<const double>(zeros)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("patch embedding shapes") {
  auto p = init_params<double>(ModelConfig{}, Objective::Xmae, 2);
  CHECK(nn::patch_embed<double>(p.patch_ppg, Mat<double>::Random(1000, 32), 40).rows() == 25);
  CHECK(nn::patch_embed<double>(p.patch_ppg, Mat<double>::Random(1000, 32), 40).cols() == 256);
  CHECK(nn::patch_embed<double>(p.patch_ppg, Mat<double>::Random(120, 32), 40).rows() == 3);
  p.patch_ppg.b.setZero();
  CHECK(nn::patch_embed<double>(p.patch_ppg, Mat<double>::Zero(1000, 32), 40).cwiseAbs().maxCoeff() == 0.0);
  CHECK(th::error_kind([&] { nn::patch_embed<double>(p.patch_ppg, Mat<double>::Zero(1001, 32), 40); }) == ErrorKind::IndivisibleLength);
}

TEST_CASE("block with zeroed weights is the identity") {
  auto p = init_params<double>(ModelConfig::desk(), Objective::Xmae, 3);
  auto blk = p.enc_ppg[0];
  zero_block_weights(blk);
  const Mat<double> x = Mat<double>::Random(25, 64);
  CHECK((nn::encoder_block(blk, x, 4) - x).cwiseAbs().maxCoeff() == 0.0);
  auto cross = p.bridge[0];
  zero_block_weights(cross);
  const Mat<double> kv = Mat<double>::Random(25, 64);
  CHECK((nn::cross_block(cross, x, kv, 4) - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("attention rows are distributions") {
  for (int s = 0; s < 10; ++s) {
    const Mat<double> q = Mat<double>::Random(7, 16) * 1000.0, k = Mat<double>::Random(9, 16) * 1000.0, v = Mat<double>::Random(9, 16);
    std::vector<Mat<double>> w;
    const auto out = nn::attention_core(q, k, v, 4, &w);
    REQUIRE(w.size() == 4);
    CHECK(out.allFinite());
    for (const auto& h : w) {
      CHECK(h.allFinite());
      for (Eigen::Index r = 0; r < h.rows(); ++r) CHECK(std::abs(h.row(r).sum() - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("attention hand examples") {
  Mat<double> q(1, 1), k(2, 1), v(2, 1);
  q << 0.0;
  k << 0.0, 0.0;
  v << 2.0, 4.0;
  std::vector<Mat<double>> w;
  CHECK(nn::attention_core(q, k, v, 1, &w)(0, 0) == doctest::Approx(3.0));
  CHECK(w[0](0, 0) == doctest::Approx(0.5));

  // Dominant logit: softmax([20, 0, 0]) puts 2 e^-20 of mass elsewhere.
  Mat<double> q1(1, 1), k3(3, 1), v3(3, 1);
  q1 << 20.0;
  k3 << 1.0, 0.0, 0.0;
  v3 << 1.5, -3.0, 7.0;
  const double expect = (1.5 * std::exp(20.0) - 3.0 + 7.0) / (std::exp(20.0) + 2.0);
  CHECK(std::abs(nn::attention_core(q1, k3, v3, 1)(0, 0) - 1.5) < 1e-6);
  CHECK(nn::attention_core(q1, k3, v3, 1)(0, 0) == doctest::Approx(expect).epsilon(1e-12));

  // Shift invariance: adding c to every logit leaves the weights alone.
  const Mat<double> qq = Mat<double>::Random(3, 4), kk = Mat<double>::Random(5, 4);
  const auto a = nn::softmax_rows<double>(Mat<double>(qq * kk.transpose()));
  const auto b = nn::softmax_rows<double>(Mat<double>((qq * kk.transpose()).array() + 37.0));
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("self-attention over one token returns its value") {
  Mat<double> q = Mat<double>::Random(1, 8), k = Mat<double>::Random(1, 8), v = Mat<double>::Random(1, 8);
  CHECK((nn::attention_core(q, k, v, 2) - v).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("mask token reinsertion keeps positions in order") {
  const int n = 25, d = 6;
  const Mat<double> pos = Mat<double>::Random(n, d), mask = Mat<double>::Random(1, d);
  const std::vector<std::size_t> vis{7, 8, 9};
  const Mat<double> tokens = Mat<double>::Random(3, d);
  const auto z = nn::reinsert_mask_tokens(tokens, vis, mask, pos);
  REQUIRE(z.rows() == n);
  for (int i = 0; i < n; ++i) {
    const auto it = std::find(vis.begin(), vis.end(), static_cast<std::size_t>(i));
    const Mat<double> want = it != vis.end() ? Mat<double>(tokens.row(it - vis.begin())) : Mat<double>(mask + pos.row(i));
    CHECK((z.row(i) - want).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("cross-modal forward contract") {
  const auto cfg = ModelConfig::desk();
  const auto p = init_params<float>(cfg, Objective::Xmae, 4);
  const auto ppg = to_float(signal(1000, 5)), ecg = to_float(signal(1000, 6));
  for (double r : {0.8, 0.9}) {
    const auto mask = contiguous_mask(25, r, 9);
    std::vector<bool> lm;
    const auto y = forward_xmae<float>(p, ppg, ecg, mask, {}, &lm);
    CHECK(y.size() == 1000);
    CHECK(lm.size() == 1000);
    CHECK(y == forward_xmae<float>(p, ppg, ecg, mask, {}));
  }
}

TEST_CASE("masked ECG samples are never read") {
  const auto p = init_params<float>(ModelConfig::desk(), Objective::Xmae, 5);
  const auto ppg = to_float(signal(1000, 7));
  auto ecg = to_float(signal(1000, 8));
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto mask = contiguous_mask(25, 0.9, s);
    const auto base = forward_xmae<float>(p, ppg, ecg, mask, {});
    auto scrambled = ecg;
    const auto vis = expand_to_samples(mask, 40);
    const auto junk = th::noise(1000, 100 + s, 1e3);
    for (std::size_t i = 0; i < 1000; ++i)
      if (!vis[i]) scrambled[i] = static_cast<float>(junk[i]);
    CHECK(forward_xmae<float>(p, ppg, scrambled, mask, {}) == base);
  }
}

TEST_CASE("permuting PPG patches changes the reconstruction") {
  const auto p = init_params<float>(ModelConfig::desk(), Objective::Xmae, 6);
  const auto ppg = to_float(signal(1000, 9)), ecg = to_float(signal(1000, 10));
  const auto mask = contiguous_mask(25, 0.9, 1);
  std::vector<float> perm(1000);
  for (int k = 0; k < 25; ++k) std::copy_n(ppg.begin() + (24 - k) * 40, 40, perm.begin() + k * 40);
  const auto a = forward_xmae<float>(p, ppg, ecg, mask, {});
  const auto b = forward_xmae<float>(p, perm, ecg, mask, {});
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, static_cast<double>(std::abs(a[i] - b[i])));
  CHECK(diff > 1e-6);
}

TEST_CASE("symmetric baseline shapes and size") {
  const auto cfg = ModelConfig::desk();
  const auto p = init_params<float>(cfg, Objective::MmBaseline, 7);
  const auto ppg = to_float(signal(1000, 11)), ecg = to_float(signal(1000, 12));
  const auto out = forward_mm<float>(p, ppg, ecg, contiguous_mask(25, 0.9, 1), random_mask(25, 0.6, 2), {});
  CHECK(out.ppg_hat.size() == 1000);
  CHECK(out.ecg_hat.size() == 1000);

  for (const auto& c : {ModelConfig{}, ModelConfig::desk()}) {
    const double x = static_cast<double>(init_params<float>(c, Objective::Xmae, 1).parameter_count());
    const double m = static_cast<double>(init_params<float>(c, Objective::MmBaseline, 1).parameter_count());
    CHECK(std::abs(m - x) / x <= 0.05);
  }
}

TEST_CASE("PPG embedding") {
  const auto p = init_params<float>(ModelConfig{}, Objective::Xmae, 8);
  const auto ppg = to_float(signal(1000, 13));
  const auto e = embed_ppg<float>(p, ppg);
  CHECK(e.size() == 256);
  CHECK(embed_ppg<float>(p, ppg) == e);
  auto scaled = ppg;
  for (float& v : scaled) v *= 1.2f;
  CHECK(embed_ppg<float>(p, scaled) != e);
}

TEST_CASE("initialization statistics") {
  const auto p = init_params<double>(ModelConfig{}, Objective::Xmae, 9);
  const auto& w = p.enc_ppg[0].attn.q.w;
  const double mean = w.mean();
  const double sd = std::sqrt((w.array() - mean).square().mean());
  CHECK(w.cwiseAbs().maxCoeff() <= 0.04 + 1e-12);
  // Normal truncated at 2 sd has sd about 0.88 of the untruncated one.
  CHECK(sd == doctest::Approx(0.02 * 0.8796).epsilon(0.03));
  CHECK(p.enc_ppg[0].attn.q.b.cwiseAbs().maxCoeff() == 0.0);
  CHECK((p.enc_ppg[0].ln1.gamma.array() == 1.0).all());
  CHECK(init_params<double>(ModelConfig{}, Objective::Xmae, 9).pos_ppg == p.pos_ppg);
}

TEST_CASE("analytic gradients match finite differences") {
  const auto x = grad_check(ModelConfig::tiny(), 3);
  INFO("worst tensor " << x.worst_tensor);
  CHECK(x.max_rel_error < 1e-4);
  CHECK(x.per_tensor.size() > 10);

  GradCheckOptions mm;
  mm.objective = Objective::MmBaseline;
  const auto m = grad_check(ModelConfig::tiny(), 3, mm);
  INFO("worst tensor " << m.worst_tensor);
  CHECK(m.max_rel_error < 1e-4);
}

TEST_CASE("gradient check catches a broken softmax backward") {
  GradCheckOptions bad;
  bad.faults.flip_softmax_jacobian = true;
  CHECK(grad_check(ModelConfig::tiny(), 3, bad).max_rel_error > 1e-2);
}
