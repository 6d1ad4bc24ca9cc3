#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace xmae {

enum class MaskMode { Contiguous, Random };

// Patch-level visibility. `ratio` is the realized masked fraction.
struct MaskSpec {
  std::vector<bool> visible;
  double ratio = 0.0;

  std::size_t n_patches() const { return visible.size(); }
  std::size_t masked_count() const;
  std::vector<std::size_t> visible_indices() const;
  std::vector<std::size_t> masked_indices() const;
  // '1' for visible, '0' for masked; used in training logs.
  std::string bitstring() const;
  // Number of maximal runs of visible patches.
  std::size_t visible_runs() const;
};

// floor(ratio * n), with a 1e-9 guard against representation error
// (0.6 * 25 must give 15).
std::size_t masked_count_for(double ratio, std::size_t n_patches);

// One visible run of n - floor(ratio n) patches at a uniform start offset.
MaskSpec contiguous_mask(std::size_t n_patches, double ratio, std::uint64_t seed);

// floor(ratio n) masked patches chosen uniformly without replacement.
MaskSpec random_mask(std::size_t n_patches, double ratio, std::uint64_t seed);

MaskSpec make_mask(MaskMode mode, std::size_t n_patches, double ratio, std::uint64_t seed);

// Per-sample visibility: each patch flag repeated patch_len times.
std::vector<bool> expand_to_samples(const MaskSpec& mask, std::size_t patch_len);

// Masking-ratio curriculum. The ratio steps up by `step` (capped at m_max)
// whenever the loss improves on the best seen so far by at least
// improve_threshold relative; otherwise only the best loss is tracked.
struct CurriculumState {
  double m0 = 0.80;
  double m_current = 0.80;
  double m_max = 0.90;
  double step = 0.05;
  double improve_threshold = 0.10;
  std::optional<double> best_loss;
};

CurriculumState curriculum_update(const CurriculumState& state, double epoch_loss);

}  // namespace xmae
