#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xmae/masking.hpp"

namespace xmae {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Objective { Xmae, MmBaseline };

std::string_view to_string(Objective o);

// Architecture hyperparameters. Defaults are the full-size network; the
// named presets scale it down for CPU runs and gradient checks.
struct ModelConfig {
  int seq_len = 1000;
  int patch_len = 40;
  std::vector<int> conv_widths{32, 64, 128};
  int conv_out = 32;
  int conv_kernel = 3;
  int embed_dim = 256;
  int ff_dim = 384;
  int heads = 8;
  int depth_ppg = 2;
  int depth_ecg = 1;
  int depth_bridge = 1;
  int depth_decoder = 1;
  double dropout = 0.1;

  int n_patches() const { return seq_len / patch_len; }
  int head_dim() const { return embed_dim / heads; }
  // Throws std::invalid_argument on inconsistent shapes.
  void validate() const;

  // d=64, ff=96, heads=4 with full-size depths.
  static ModelConfig desk();
  // L=80, P=20, N=4, d=8, heads=2, every depth 1.
  static ModelConfig tiny();

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct Linear {
  Mat<T> w;  // in x out
  Mat<T> b;  // 1 x out
};

template <typename T>
struct LayerNormParams {
  Mat<T> gamma;  // 1 x d
  Mat<T> beta;   // 1 x d
};

template <typename T>
struct AttentionParams {
  Linear<T> q, k, v, o;
};

// Pre-norm transformer block. Cross blocks normalize keys/values with their
// own ln_kv.
template <typename T>
struct BlockParams {
  bool cross = false;
  LayerNormParams<T> ln1;
  LayerNormParams<T> ln_kv;
  AttentionParams<T> attn;
  LayerNormParams<T> ln2;
  Linear<T> ff1, ff2;
};

template <typename T>
struct ConvStemParams {
  std::vector<Linear<T>> convs;  // kernel taps flattened: (k * c_in) x c_out
  Linear<T> proj;                // 1x1 projection to conv_out channels
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Objective objective = Objective::Xmae;

  ConvStemParams<T> stem_ppg, stem_ecg;
  Linear<T> patch_ppg, patch_ecg;  // (patch_len * conv_out) x d
  Mat<T> pos_ppg, pos_ecg;         // N x d
  Mat<T> mask_token;               // 1 x d

  // Xmae: PPG/ECG encoders and the ECG-queries-PPG bridge.
  std::vector<BlockParams<T>> enc_ppg, enc_ecg, bridge;
  // MmBaseline: joint encoder over both visible token streams.
  std::vector<BlockParams<T>> joint;
  Mat<T> modality;  // 2 x d (row 0 PPG, row 1 ECG); MmBaseline only

  std::vector<BlockParams<T>> decoder;
  LayerNormParams<T> head_ln_ecg;
  Linear<T> head_ecg;  // d x patch_len
  LayerNormParams<T> head_ln_ppg;
  Linear<T> head_ppg;  // MmBaseline only

  // Visits every learnable tensor in a fixed order:
  //   f(const std::string& name, Mat<T>& tensor, bool weight_decay)
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t parameter_count() const;
  ModelParams zeros_like() const;
  void set_zero();
  template <typename U>
  ModelParams<U> cast() const;

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f);
};

// Weight initialization: truncated normal (sd 0.02, cut at 2 sd) for
// projections, He-normal for conv kernels, zeros for biases and norm
// offsets, ones for norm scales.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, Objective objective, std::uint64_t seed);

struct ForwardOptions {
  bool train_mode = false;
  std::uint64_t rng_seed = 0;
};

// Hooks for the gradient-check mutation harness.
struct BackwardFaults {
  bool flip_softmax_jacobian = false;
};

template <typename T>
struct GradExtras {
  BackwardFaults faults;
  std::vector<T>* d_ecg_input = nullptr;  // length seq_len when requested
  std::vector<T>* d_ppg_input = nullptr;
  std::vector<T>* ecg_hat = nullptr;
  std::vector<T>* ppg_hat = nullptr;
};

// Cross-modal reconstruction. Only the visible ECG samples are read; the
// returned ecg_hat always has seq_len samples.
template <typename T>
std::vector<T> forward_xmae(const ModelParams<T>& p, std::span<const T> ppg, std::span<const T> ecg,
                            const MaskSpec& mask, const ForwardOptions& opts,
                            std::vector<bool>* loss_mask = nullptr);

// Masked MSE of forward_xmae and its gradient. Gradients are accumulated
// into `grads` scaled by `weight`.
template <typename T>
T xmae_loss_and_grad(const ModelParams<T>& p, std::span<const T> ppg, std::span<const T> ecg, const MaskSpec& mask,
                     const ForwardOptions& opts, ModelParams<T>& grads, T weight, GradExtras<T>* extras = nullptr);

template <typename T>
struct MmOutput {
  std::vector<T> ppg_hat;
  std::vector<T> ecg_hat;
  std::vector<bool> ppg_loss_mask;
  std::vector<bool> ecg_loss_mask;
};

// Symmetric baseline: visible tokens of both modalities share a joint
// encoder; mask tokens are reinserted per modality and both signals decoded.
template <typename T>
MmOutput<T> forward_mm(const ModelParams<T>& p, std::span<const T> ppg, std::span<const T> ecg,
                       const MaskSpec& mask_ecg, const MaskSpec& mask_ppg, const ForwardOptions& opts);

// Sum of both modalities' masked MSE and its gradient.
template <typename T>
T mm_loss_and_grad(const ModelParams<T>& p, std::span<const T> ppg, std::span<const T> ecg,
                   const MaskSpec& mask_ecg, const MaskSpec& mask_ppg, const ForwardOptions& opts,
                   ModelParams<T>& grads, T weight, GradExtras<T>* extras = nullptr);

// Mean of the PPG tokens after the last PPG-side encoder block (the joint
// encoder for the baseline). Deterministic.
template <typename T>
std::vector<T> embed_ppg(const ModelParams<T>& p, std::span<const T> ppg);

// Building blocks exposed for unit tests.
namespace nn {

// Row-wise softmax with max subtraction.
template <typename T>
Mat<T> softmax_rows(const Mat<T>& s);

// Multi-head scaled dot-product attention without projections:
// softmax(Q K^T / sqrt(d_head)) V per head.
template <typename T>
Mat<T> attention_core(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int heads,
                      std::vector<Mat<T>>* weights = nullptr);

template <typename T>
Mat<T> conv_stem(const ConvStemParams<T>& p, std::span<const T> x);

template <typename T>
Mat<T> patch_embed(const Linear<T>& p, const Mat<T>& fmap, int patch_len);

template <typename T>
Mat<T> encoder_block(const BlockParams<T>& p, const Mat<T>& x, int heads);

template <typename T>
Mat<T> cross_block(const BlockParams<T>& p, const Mat<T>& queries, const Mat<T>& keys_values, int heads);

// Full-length ECG token sequence: visible encoded tokens at their positions,
// mask token plus positional embedding elsewhere.
template <typename T>
Mat<T> reinsert_mask_tokens(const Mat<T>& visible_tokens, const std::vector<std::size_t>& visible_positions,
                            const Mat<T>& mask_token, const Mat<T>& pos);

}  // namespace nn

// ---------------------------------------------------------------------------

template <typename T>
template <typename Self, typename F>
void ModelParams<T>::visit(Self& self, F& f) {
  auto lin = [&](const std::string& n, auto& l) {
    f(n + ".w", l.w, true);
    f(n + ".b", l.b, false);
  };
  auto ln = [&](const std::string& n, auto& l) {
    f(n + ".gamma", l.gamma, false);
    f(n + ".beta", l.beta, false);
  };
  auto stem = [&](const std::string& n, auto& s) {
    for (std::size_t i = 0; i < s.convs.size(); ++i) lin(n + ".conv" + std::to_string(i), s.convs[i]);
    lin(n + ".proj", s.proj);
  };
  auto blocks = [&](const std::string& n, auto& bs) {
    for (std::size_t i = 0; i < bs.size(); ++i) {
      auto& b = bs[i];
      const std::string p = n + "." + std::to_string(i);
      ln(p + ".ln1", b.ln1);
      if (b.cross) ln(p + ".ln_kv", b.ln_kv);
      lin(p + ".attn.q", b.attn.q);
      lin(p + ".attn.k", b.attn.k);
      lin(p + ".attn.v", b.attn.v);
      lin(p + ".attn.o", b.attn.o);
      ln(p + ".ln2", b.ln2);
      lin(p + ".ff1", b.ff1);
      lin(p + ".ff2", b.ff2);
    }
  };
  stem("stem_ppg", self.stem_ppg);
  stem("stem_ecg", self.stem_ecg);
  lin("patch_ppg", self.patch_ppg);
  lin("patch_ecg", self.patch_ecg);
  f(std::string("pos_ppg"), self.pos_ppg, false);
  f(std::string("pos_ecg"), self.pos_ecg, false);
  f(std::string("mask_token"), self.mask_token, false);
  if (self.objective == Objective::Xmae) {
    blocks("enc_ppg", self.enc_ppg);
    blocks("enc_ecg", self.enc_ecg);
    blocks("bridge", self.bridge);
  } else {
    blocks("joint", self.joint);
    f(std::string("modality"), self.modality, false);
  }
  blocks("decoder", self.decoder);
  ln("head_ln_ecg", self.head_ln_ecg);
  lin("head_ecg", self.head_ecg);
  if (self.objective == Objective::MmBaseline) {
    ln("head_ln_ppg", self.head_ln_ppg);
    lin("head_ppg", self.head_ppg);
  }
}

}  // namespace xmae
