#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace xmae {

enum class Modality : std::uint8_t { PPG = 0, ECG = 1 };

std::string_view to_string(Modality m);

// Fixed-rate single-channel window. Samples are dimensionless once
// normalize_unit_range has been applied.
struct WaveformSegment {
  std::vector<double> samples;
  int fs = 100;
  Modality modality = Modality::PPG;
  std::string subject_id;
  double t0 = 0.0;

  std::size_t size() const { return samples.size(); }
  double duration_s() const { return static_cast<double>(samples.size()) / fs; }
};

// Second-order section, a0 normalized to 1:
//   y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]
// First-order sections use b2 = a2 = 0.
struct Biquad {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0;
  double a1 = 0.0, a2 = 0.0;
};

struct BiquadCascade {
  std::vector<Biquad> sections;
  double gain = 1.0;

  // Complex frequency response at f_hz for sampling rate fs.
  std::complex<double> response(double f_hz, double fs) const;
  std::vector<std::complex<double>> poles() const;
  bool stable(double margin = 1e-9) const;
};

enum class FilterKind { Lowpass, Highpass, Bandpass };

// Digital Butterworth design by bilinear transform with prewarping. Bandpass
// designs are the product of an order-`order` lowpass at the high cutoff and
// an order-`order` highpass at the low cutoff; poles are paired into
// ceil(total_poles / 2) sections.
BiquadCascade design_butterworth(FilterKind kind, int order, std::span<const double> cutoffs_hz,
                                 double fs);

// Causal single pass through the cascade (zero initial state), gain applied.
std::vector<double> filter_causal(const BiquadCascade& c, std::span<const double> x);

// Zero-phase application: mean of forward-backward and backward-forward
// passes over an odd-reflection padded copy (pad = 3 * 2 * sections). The
// magnitude response is |H|^2 and the result commutes with time reversal.
std::vector<double> filter_zero_phase(const BiquadCascade& c, std::span<const double> x);

WaveformSegment apply_filter(const BiquadCascade& c, const WaveformSegment& x, bool zero_phase);

// Kernel width used by notch_powerline: round(fs / line_hz) samples.
int powerline_kernel_width(int fs, double line_hz);

// One-period moving average centred on each sample. Even widths use the
// centred form [1/2, 1, ..., 1, 1/2] / width, which keeps zero phase and the
// null at line_hz. No-op when line_hz > fs / 2.
WaveformSegment notch_powerline(const WaveformSegment& x, double line_hz);

// Linear interpolation onto the target grid; a zero-phase order-5 lowpass at
// 0.45 * target_fs runs first when decimating by more than 2x.
WaveformSegment resample(const WaveformSegment& x, int target_fs);

// Affine map min -> -1, max -> +1. Throws DegenerateSignal when the range is
// below 1e-9.
WaveformSegment normalize_unit_range(const WaveformSegment& x);

// Consecutive non-overlapping windows of win_s seconds; trailing remainder is
// dropped.
std::vector<WaveformSegment> segment_windows(const WaveformSegment& x, double win_s);

struct QualityReport {
  std::vector<double> per_sample_score;
  double p15 = 0.0;
  bool pass = false;
};

constexpr double kQualityPassThreshold = 0.9;
constexpr double kQualityPercentile = 15.0;

// Template-match quality: each detected beat is correlated against the mean
// beat (Pearson, clamped to [0, 1]) and the score is spread over the samples
// nearest to that beat.
QualityReport quality_score(const WaveformSegment& x);

// Linear-interpolated percentile (q in [0, 100]) of a nonempty sample.
double percentile(std::span<const double> values, double q);

// Preprocessing chains applied to a full recording before windowing.
struct PreprocessConfig {
  double ppg_low_hz = 0.5;
  double ppg_high_hz = 8.0;
  int ppg_order = 3;
  double ecg_low_hz = 0.5;
  int ecg_order = 5;
  double powerline_hz = 50.0;
  int target_fs = 100;
  bool quality_gate = true;
};

WaveformSegment preprocess_ppg(const WaveformSegment& x, const PreprocessConfig& cfg);
WaveformSegment preprocess_ecg(const WaveformSegment& x, const PreprocessConfig& cfg);

}  // namespace xmae
