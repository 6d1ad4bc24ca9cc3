#include "xmae/sigproc.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "xmae/detect.hpp"
#include "xmae/error.hpp"

namespace xmae {

using cplx = std::complex<double>;

std::string_view to_string(Modality m) { return m == Modality::PPG ? "PPG" : "ECG"; }

// ---------------------------------------------------------------------------
// Butterworth design
// ---------------------------------------------------------------------------

namespace {

struct PoleZero {
  cplx pole;
  cplx zero;
};

// Digital poles of an analog Butterworth prototype after bilinear mapping,
// each carried with the zero it contributes (z = -1 lowpass, z = +1 highpass).
std::vector<PoleZero> butter_part(int order, double fc, double fs, bool highpass) {
  const double warped = 2.0 * fs * std::tan(std::numbers::pi * fc / fs);
  std::vector<PoleZero> out;
  out.reserve(static_cast<std::size_t>(order));
  for (int k = 0; k < order; ++k) {
    const double theta = std::numbers::pi * (2.0 * k + order + 1) / (2.0 * order);
    const cplx proto = std::polar(1.0, theta);
    const cplx s = highpass ? warped / proto : warped * proto;
    const cplx z = (2.0 * fs + s) / (2.0 * fs - s);
    out.push_back({z, cplx(highpass ? 1.0 : -1.0, 0.0)});
  }
  return out;
}

double part_gain(const std::vector<PoleZero>& pz, cplx ref) {
  cplx h(1.0, 0.0);
  for (const auto& e : pz) h *= (ref - e.zero) / (ref - e.pole);
  return 1.0 / std::abs(h);
}

Biquad section_from(const PoleZero& a, const PoleZero* b) {
  Biquad s;
  if (b == nullptr) {
    s.b1 = -a.zero.real();
    s.a1 = -a.pole.real();
    return s;
  }
  s.b1 = -(a.zero + b->zero).real();
  s.b2 = (a.zero * b->zero).real();
  s.a1 = -(a.pole + b->pole).real();
  s.a2 = (a.pole * b->pole).real();
  return s;
}

void check_cutoff(double fc, double fs) {
  if (!(fc > 0.0) || !(fc < fs / 2.0)) {
    throw Error(ErrorKind::InvalidCutoff,
                "cutoff " + std::to_string(fc) + " Hz outside (0, " + std::to_string(fs / 2.0) + ")");
  }
}

}  // namespace

BiquadCascade design_butterworth(FilterKind kind, int order, std::span<const double> cutoffs_hz,
                                 double fs) {
  if (order < 1) throw Error(ErrorKind::InvalidOrder, "order must be >= 1");
  if (!(fs > 0.0)) throw Error(ErrorKind::InvalidCutoff, "sampling rate must be positive");

  std::vector<PoleZero> all;
  double gain = 1.0;
  switch (kind) {
    case FilterKind::Lowpass:
    case FilterKind::Highpass: {
      if (cutoffs_hz.size() != 1) throw Error(ErrorKind::InvalidCutoff, "expected one cutoff");
      check_cutoff(cutoffs_hz[0], fs);
      const bool hp = kind == FilterKind::Highpass;
      all = butter_part(order, cutoffs_hz[0], fs, hp);
      gain = part_gain(all, cplx(hp ? -1.0 : 1.0, 0.0));
      break;
    }
    case FilterKind::Bandpass: {
      if (cutoffs_hz.size() != 2) throw Error(ErrorKind::InvalidCutoff, "expected two cutoffs");
      check_cutoff(cutoffs_hz[0], fs);
      check_cutoff(cutoffs_hz[1], fs);
      if (!(cutoffs_hz[0] < cutoffs_hz[1])) {
        throw Error(ErrorKind::InvalidCutoff, "bandpass requires low < high");
      }
      auto lp = butter_part(order, cutoffs_hz[1], fs, false);
      auto hp = butter_part(order, cutoffs_hz[0], fs, true);
      gain = part_gain(lp, cplx(1.0, 0.0)) * part_gain(hp, cplx(-1.0, 0.0));
      all = std::move(lp);
      all.insert(all.end(), hp.begin(), hp.end());
      break;
    }
  }

  // Conjugate pairs first (upper half-plane member represents the pair),
  // then leftover real poles two at a time.
  constexpr double kImagEps = 1e-12;
  BiquadCascade c;
  c.gain = gain;
  std::vector<PoleZero> reals;
  for (const auto& e : all) {
    if (std::abs(e.pole.imag()) <= kImagEps) {
      reals.push_back({cplx(e.pole.real(), 0.0), e.zero});
    } else if (e.pole.imag() > 0.0) {
      const PoleZero conj{std::conj(e.pole), e.zero};
      c.sections.push_back(section_from(e, &conj));
    }
  }
  for (std::size_t i = 0; i < reals.size(); i += 2) {
    c.sections.push_back(section_from(reals[i], i + 1 < reals.size() ? &reals[i + 1] : nullptr));
  }
  return c;
}

cplx BiquadCascade::response(double f_hz, double fs) const {
  const cplx z1 = std::polar(1.0, -2.0 * std::numbers::pi * f_hz / fs);
  const cplx z2 = z1 * z1;
  cplx h(gain, 0.0);
  for (const auto& s : sections) {
    h *= (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2);
  }
  return h;
}

std::vector<cplx> BiquadCascade::poles() const {
  std::vector<cplx> out;
  for (const auto& s : sections) {
    if (s.a2 == 0.0) {
      if (s.a1 != 0.0) out.emplace_back(-s.a1, 0.0);
      continue;
    }
    const cplx disc = std::sqrt(cplx(s.a1 * s.a1 - 4.0 * s.a2, 0.0));
    out.push_back((-s.a1 + disc) / 2.0);
    out.push_back((-s.a1 - disc) / 2.0);
  }
  return out;
}

bool BiquadCascade::stable(double margin) const {
  for (const auto& p : poles()) {
    if (!(std::abs(p) < 1.0 - margin)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

std::vector<double> filter_causal(const BiquadCascade& c, std::span<const double> x) {
  std::vector<double> y(x.begin(), x.end());
  for (const auto& s : c.sections) {
    double z1 = 0.0, z2 = 0.0;  // transposed direct form II state
    for (double& v : y) {
      const double in = v;
      const double out = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * out + z2;
      z2 = s.b2 * in - s.a2 * out;
      v = out;
    }
  }
  for (double& v : y) v *= c.gain;
  return y;
}

namespace {

// Odd reflection about each end sample: x[-k] = 2 x[0] - x[k].
std::vector<double> odd_pad(std::span<const double> x, std::size_t pad) {
  const std::size_t n = x.size();
  std::vector<double> out;
  out.reserve(n + 2 * pad);
  for (std::size_t k = pad; k >= 1; --k) out.push_back(2.0 * x[0] - x[k]);
  out.insert(out.end(), x.begin(), x.end());
  for (std::size_t k = 1; k <= pad; ++k) out.push_back(2.0 * x[n - 1] - x[n - 1 - k]);
  return out;
}

std::vector<double> forward_backward(const BiquadCascade& c, std::vector<double> v) {
  v = filter_causal(c, v);
  std::reverse(v.begin(), v.end());
  v = filter_causal(c, v);
  std::reverse(v.begin(), v.end());
  return v;
}

}  // namespace

std::vector<double> filter_zero_phase(const BiquadCascade& c, std::span<const double> x) {
  const std::size_t n = x.size();
  if (n == 0) throw Error(ErrorKind::DegenerateSignal, "empty input");
  const std::size_t pad = std::min<std::size_t>(3 * 2 * c.sections.size(), n - 1);
  auto padded = odd_pad(x, pad);

  auto fb = forward_backward(c, padded);
  std::reverse(padded.begin(), padded.end());
  auto bf = forward_backward(c, padded);
  std::reverse(bf.begin(), bf.end());

  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = 0.5 * (fb[i + pad] + bf[i + pad]);
  return y;
}

WaveformSegment apply_filter(const BiquadCascade& c, const WaveformSegment& x, bool zero_phase) {
  if (x.samples.empty()) throw Error(ErrorKind::DegenerateSignal, "empty segment");
  WaveformSegment out = x;
  out.samples = zero_phase ? filter_zero_phase(c, x.samples) : filter_causal(c, x.samples);
  return out;
}

int powerline_kernel_width(int fs, double line_hz) {
  return static_cast<int>(std::lround(static_cast<double>(fs) / line_hz));
}

WaveformSegment notch_powerline(const WaveformSegment& x, double line_hz) {
  if (!(line_hz > 0.0) || line_hz > x.fs / 2.0) return x;
  const int width = powerline_kernel_width(x.fs, line_hz);
  if (width < 2 || x.samples.empty()) return x;

  std::vector<double> taps;
  if (width % 2 == 1) {
    taps.assign(static_cast<std::size_t>(width), 1.0 / width);
  } else {
    taps.assign(static_cast<std::size_t>(width + 1), 1.0 / width);
    taps.front() *= 0.5;
    taps.back() *= 0.5;
  }
  const std::size_t half = taps.size() / 2;
  const std::size_t n = x.samples.size();
  const auto padded = odd_pad(x.samples, std::min(half, n - 1));
  const std::size_t pad = (padded.size() - n) / 2;

  WaveformSegment out = x;
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < taps.size(); ++k) {
      // Indices outside the padded range only occur for n <= half; clamp.
      const std::ptrdiff_t j = static_cast<std::ptrdiff_t>(i + pad + k) - static_cast<std::ptrdiff_t>(half);
      const std::size_t jj = static_cast<std::size_t>(
          std::clamp<std::ptrdiff_t>(j, 0, static_cast<std::ptrdiff_t>(padded.size()) - 1));
      acc += taps[k] * padded[jj];
    }
    out.samples[i] = acc;
  }
  return out;
}

WaveformSegment resample(const WaveformSegment& x, int target_fs) {
  if (target_fs <= 0) throw std::invalid_argument("target_fs must be positive");
  if (x.samples.size() < 2) throw Error(ErrorKind::DegenerateSignal, "need >= 2 samples to resample");
  if (target_fs == x.fs) return x;

  std::vector<double> src = x.samples;
  if (static_cast<double>(x.fs) / target_fs > 2.0) {
    const double cutoff = 0.45 * target_fs;
    const auto lp = design_butterworth(FilterKind::Lowpass, 5, std::span(&cutoff, 1), x.fs);
    src = filter_zero_phase(lp, src);
  }

  const std::size_t n = src.size();
  const auto n_out = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) * target_fs / static_cast<double>(x.fs)));
  WaveformSegment out = x;
  out.fs = target_fs;
  out.samples.resize(n_out);
  const double step = static_cast<double>(x.fs) / target_fs;
  for (std::size_t k = 0; k < n_out; ++k) {
    const double pos = std::min(static_cast<double>(k) * step, static_cast<double>(n - 1));
    const auto i0 = std::min(static_cast<std::size_t>(pos), n - 2);
    const double frac = pos - static_cast<double>(i0);
    out.samples[k] = src[i0] + frac * (src[i0 + 1] - src[i0]);
  }
  return out;
}

WaveformSegment normalize_unit_range(const WaveformSegment& x) {
  if (x.samples.empty()) throw Error(ErrorKind::DegenerateSignal, "empty segment");
  const auto [lo_it, hi_it] = std::minmax_element(x.samples.begin(), x.samples.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi - lo >= 1e-9)) throw Error(ErrorKind::DegenerateSignal, "range below 1e-9");
  WaveformSegment out = x;
  const double scale = 2.0 / (hi - lo);
  for (double& v : out.samples) v = (v - lo) * scale - 1.0;
  // Pin the extremes so the range is attained exactly.
  out.samples[static_cast<std::size_t>(lo_it - x.samples.begin())] = -1.0;
  out.samples[static_cast<std::size_t>(hi_it - x.samples.begin())] = 1.0;
  return out;
}

std::vector<WaveformSegment> segment_windows(const WaveformSegment& x, double win_s) {
  const double exact = win_s * x.fs;
  const auto len = static_cast<long long>(std::llround(exact));
  if (len <= 0 || std::abs(exact - static_cast<double>(len)) > 1e-9) {
    throw std::invalid_argument("win_s * fs must be a positive integer");
  }
  const auto win = static_cast<std::size_t>(len);
  std::vector<WaveformSegment> out;
  for (std::size_t start = 0; start + win <= x.samples.size(); start += win) {
    WaveformSegment w;
    w.fs = x.fs;
    w.modality = x.modality;
    w.subject_id = x.subject_id;
    w.t0 = x.t0 + static_cast<double>(start) / x.fs;
    w.samples.assign(x.samples.begin() + static_cast<std::ptrdiff_t>(start),
                     x.samples.begin() + static_cast<std::ptrdiff_t>(start + win));
    out.push_back(std::move(w));
  }
  return out;
}

double percentile(std::span<const double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of empty sample");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(v.size() - 1);
  const auto i0 = static_cast<std::size_t>(pos);
  const std::size_t i1 = std::min(i0 + 1, v.size() - 1);
  return v[i0] + (pos - static_cast<double>(i0)) * (v[i1] - v[i0]);
}

// ---------------------------------------------------------------------------
// Quality
// ---------------------------------------------------------------------------

namespace {

double pearson(std::span<const double> a, std::span<const double> b) {
  const auto n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

QualityReport quality_score(const WaveformSegment& x) {
  QualityReport rep;
  const std::size_t n = x.samples.size();
  rep.per_sample_score.assign(n, 0.0);

  const auto peaks = x.modality == Modality::ECG ? r_peak_indices(x) : ppg_peak_indices(x);
  if (peaks.size() < 2) return rep;  // NoBeatsDetected

  std::vector<double> rr;
  for (std::size_t i = 1; i < peaks.size(); ++i) rr.push_back(static_cast<double>(peaks[i] - peaks[i - 1]));
  const double med_rr = percentile(rr, 50.0);
  const auto before = static_cast<std::size_t>(std::lround(0.35 * med_rr));
  const auto after = static_cast<std::size_t>(std::lround(0.65 * med_rr));
  const std::size_t len = before + after;

  std::vector<std::size_t> complete;
  for (std::size_t k = 0; k < peaks.size(); ++k) {
    if (peaks[k] >= before && peaks[k] + after <= n) complete.push_back(k);
  }
  if (complete.size() < 2 || len < 3) return rep;

  std::vector<double> tmpl(len, 0.0);
  for (auto k : complete) {
    for (std::size_t j = 0; j < len; ++j) tmpl[j] += x.samples[peaks[k] - before + j];
  }
  for (double& v : tmpl) v /= static_cast<double>(complete.size());

  // Beats truncated by the window edge are scored against the overlapping
  // part of the template.
  std::vector<double> beat_score(peaks.size(), 0.0);
  for (std::size_t k = 0; k < peaks.size(); ++k) {
    const std::size_t lo = peaks[k] >= before ? peaks[k] - before : 0;
    const std::size_t hi = std::min(n, peaks[k] + after);
    const std::size_t t_off = lo + before - peaks[k];
    const std::size_t m = hi - lo;
    if (m < 3) continue;
    const double r = pearson(std::span(x.samples).subspan(lo, m), std::span(tmpl).subspan(t_off, m));
    beat_score[k] = std::clamp(r, 0.0, 1.0);
  }

  auto dist = [](std::size_t a, std::size_t b) { return a > b ? a - b : b - a; };
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    while (k + 1 < peaks.size() && dist(i, peaks[k + 1]) < dist(i, peaks[k])) ++k;
    rep.per_sample_score[i] = beat_score[k];
  }
  rep.p15 = percentile(rep.per_sample_score, kQualityPercentile);
  rep.pass = rep.p15 > kQualityPassThreshold;
  return rep;
}

// ---------------------------------------------------------------------------
// Preprocessing chains
// ---------------------------------------------------------------------------

WaveformSegment preprocess_ppg(const WaveformSegment& x, const PreprocessConfig& cfg) {
  WaveformSegment y = x.fs == cfg.target_fs ? x : resample(x, cfg.target_fs);
  const double band[2] = {cfg.ppg_low_hz, cfg.ppg_high_hz};
  const auto bp = design_butterworth(FilterKind::Bandpass, cfg.ppg_order, band, y.fs);
  return apply_filter(bp, y, true);
}

WaveformSegment preprocess_ecg(const WaveformSegment& x, const PreprocessConfig& cfg) {
  WaveformSegment y = x.fs == cfg.target_fs ? x : resample(x, cfg.target_fs);
  const auto hp = design_butterworth(FilterKind::Highpass, cfg.ecg_order, std::span(&cfg.ecg_low_hz, 1), y.fs);
  y = apply_filter(hp, y, true);
  return notch_powerline(y, cfg.powerline_hz);
}

}  // namespace xmae
