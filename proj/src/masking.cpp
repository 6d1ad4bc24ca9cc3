#include "xmae/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "xmae/error.hpp"
#include "xmae/rng.hpp"

namespace xmae {

std::size_t MaskSpec::masked_count() const {
  return static_cast<std::size_t>(std::count(visible.begin(), visible.end(), false));
}

std::vector<std::size_t> MaskSpec::visible_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < visible.size(); ++i) {
    if (visible[i]) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> MaskSpec::masked_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < visible.size(); ++i) {
    if (!visible[i]) out.push_back(i);
  }
  return out;
}

std::string MaskSpec::bitstring() const {
  std::string s;
  s.reserve(visible.size());
  for (bool v : visible) s.push_back(v ? '1' : '0');
  return s;
}

std::size_t MaskSpec::visible_runs() const {
  std::size_t runs = 0;
  for (std::size_t i = 0; i < visible.size(); ++i) {
    if (visible[i] && (i == 0 || !visible[i - 1])) ++runs;
  }
  return runs;
}

std::size_t masked_count_for(double ratio, std::size_t n_patches) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n_patches) + 1e-9));
}

namespace {

std::size_t checked_masked_count(std::size_t n_patches, double ratio) {
  if (n_patches < 2) throw Error(ErrorKind::InvalidRatio, "need at least 2 patches");
  if (!(ratio > 0.0 && ratio < 1.0)) throw Error(ErrorKind::InvalidRatio, "ratio must lie in (0, 1)");
  const std::size_t m = masked_count_for(ratio, n_patches);
  if (m == 0 || m == n_patches) {
    throw Error(ErrorKind::InvalidRatio, "floor(ratio * n) must leave both visible and masked patches");
  }
  return m;
}

}  // namespace

MaskSpec contiguous_mask(std::size_t n_patches, double ratio, std::uint64_t seed) {
  const std::size_t m = checked_masked_count(n_patches, ratio);
  const std::size_t run = n_patches - m;
  Rng rng(seed);
  const auto start = static_cast<std::size_t>(rng.below(m + 1));
  MaskSpec spec;
  spec.visible.assign(n_patches, false);
  for (std::size_t i = start; i < start + run; ++i) spec.visible[i] = true;
  spec.ratio = static_cast<double>(m) / static_cast<double>(n_patches);
  return spec;
}

MaskSpec random_mask(std::size_t n_patches, double ratio, std::uint64_t seed) {
  const std::size_t m = checked_masked_count(n_patches, ratio);
  std::vector<std::size_t> idx(n_patches);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n_patches - i));
    std::swap(idx[i], idx[j]);
  }
  MaskSpec spec;
  spec.visible.assign(n_patches, true);
  for (std::size_t i = 0; i < m; ++i) spec.visible[idx[i]] = false;
  spec.ratio = static_cast<double>(m) / static_cast<double>(n_patches);
  return spec;
}

MaskSpec make_mask(MaskMode mode, std::size_t n_patches, double ratio, std::uint64_t seed) {
  return mode == MaskMode::Contiguous ? contiguous_mask(n_patches, ratio, seed)
                                      : random_mask(n_patches, ratio, seed);
}

std::vector<bool> expand_to_samples(const MaskSpec& mask, std::size_t patch_len) {
  if (patch_len < 1) throw std::invalid_argument("patch_len must be >= 1");
  std::vector<bool> out;
  out.reserve(mask.visible.size() * patch_len);
  for (bool v : mask.visible) out.insert(out.end(), patch_len, v);
  return out;
}

CurriculumState curriculum_update(const CurriculumState& state, double epoch_loss) {
  if (!std::isfinite(epoch_loss) || !(epoch_loss > 0.0)) {
    throw Error(ErrorKind::NonFiniteLoss, "epoch loss must be finite and positive");
  }
  CurriculumState next = state;
  if (!state.best_loss) {
    next.best_loss = epoch_loss;
    return next;
  }
  const double best = *state.best_loss;
  if ((best - epoch_loss) / best >= state.improve_threshold) {
    // Snap to a 1e-9 grid so repeated steps land exactly on 0.85, 0.90, ...
    const double stepped = std::round((state.m_current + state.step) * 1e9) / 1e9;
    next.m_current = std::min(stepped, state.m_max);
    next.best_loss = epoch_loss;
  } else {
    next.best_loss = std::min(best, epoch_loss);
  }
  return next;
}

}  // namespace xmae
