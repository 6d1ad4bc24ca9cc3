#include "xmae/detect.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace xmae {

namespace {

std::size_t samples_for(double seconds, int fs) {
  return static_cast<std::size_t>(std::lround(seconds * fs));
}

// Centred sliding extremum over [i - half, i + half] via monotone deque.
template <typename Better>
std::vector<double> rolling_extreme(const std::vector<double>& x, std::size_t half, Better better) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  std::deque<std::size_t> dq;
  std::size_t next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t hi = std::min(n - 1, i + half);
    while (next <= hi) {
      while (!dq.empty() && !better(x[dq.back()], x[next])) dq.pop_back();
      dq.push_back(next++);
    }
    const std::size_t lo = i >= half ? i - half : 0;
    while (dq.front() < lo) dq.pop_front();
    out[i] = x[dq.front()];
  }
  return out;
}

std::vector<double> rolling_max(const std::vector<double>& x, std::size_t half) {
  return rolling_extreme(x, half, [](double a, double b) { return a > b; });
}

std::vector<double> rolling_min(const std::vector<double>& x, std::size_t half) {
  return rolling_extreme(x, half, [](double a, double b) { return a < b; });
}

// Greedy refractory merge: of detections closer than `gap`, keep the one with
// the larger amplitude.
std::vector<std::size_t> enforce_refractory(std::vector<std::size_t> idx, const std::vector<double>& amp,
                                            std::size_t gap) {
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  std::vector<std::size_t> out;
  for (auto i : idx) {
    if (!out.empty() && i - out.back() < gap) {
      if (amp[i] > amp[out.back()]) out.back() = i;
      continue;
    }
    out.push_back(i);
  }
  return out;
}

constexpr double kFlatRange = 1e-12;

std::vector<double> to_seconds(const std::vector<std::size_t>& idx, int fs) {
  std::vector<double> t;
  t.reserve(idx.size());
  for (auto i : idx) t.push_back(static_cast<double>(i) / fs);
  return t;
}

}  // namespace

std::vector<std::size_t> r_peak_indices(const WaveformSegment& ecg) {
  const auto& x = ecg.samples;
  const std::size_t n = x.size();
  if (n < 3) return {};
  const int fs = ecg.fs;

  std::vector<double> energy(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double d = i == 0 ? x[1] - x[0] : i == n - 1 ? x[n - 1] - x[n - 2] : 0.5 * (x[i + 1] - x[i - 1]);
    energy[i] = d * d;
  }

  const std::size_t w = std::max<std::size_t>(1, samples_for(detector::kIntegrationWindowS, fs));
  const std::size_t left = w / 2;
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + energy[i];
  std::vector<double> integ(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= left ? i - left : 0;
    const std::size_t hi = std::min(n, i + (w - left));
    integ[i] = (prefix[hi] - prefix[lo]) / static_cast<double>(w);
  }

  const std::size_t half = samples_for(detector::kRollingMaxWindowS / 2.0, fs);
  const auto hi_env = rolling_max(integ, half);
  const auto lo_env = rolling_min(integ, half);

  const std::size_t search = samples_for(detector::kPeakSearchS, fs);
  std::vector<std::size_t> cand;
  std::size_t i = 0;
  while (i < n) {
    const double range = hi_env[i] - lo_env[i];
    const bool above = range > kFlatRange && integ[i] > lo_env[i] + detector::kThresholdFraction * range;
    if (!above) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < n) {
      const double r = hi_env[j + 1] - lo_env[j + 1];
      if (!(r > kFlatRange && integ[j + 1] > lo_env[j + 1] + detector::kThresholdFraction * r)) break;
      ++j;
    }
    const std::size_t lo = i >= search ? i - search : 0;
    const std::size_t hi = std::min(n - 1, j + search);
    std::size_t best = lo;
    for (std::size_t k = lo; k <= hi; ++k) {
      if (x[k] > x[best]) best = k;
    }
    cand.push_back(best);
    i = j + 1;
  }
  return enforce_refractory(std::move(cand), x, samples_for(detector::kRRefractoryS, ecg.fs));
}

std::vector<std::size_t> ppg_peak_indices(const WaveformSegment& ppg) {
  const auto& x = ppg.samples;
  const std::size_t n = x.size();
  if (n < 3) return {};
  const std::size_t half = samples_for(detector::kRollingMaxWindowS / 2.0, ppg.fs);
  const auto hi_env = rolling_max(x, half);
  const auto lo_env = rolling_min(x, half);

  std::vector<std::size_t> cand;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double range = hi_env[i] - lo_env[i];
    if (!(range > kFlatRange)) continue;
    if (x[i] > x[i - 1] && x[i] >= x[i + 1] && x[i] > lo_env[i] + detector::kThresholdFraction * range) {
      cand.push_back(i);
    }
  }
  return enforce_refractory(std::move(cand), x, samples_for(detector::kPpgRefractoryS, ppg.fs));
}

std::vector<std::size_t> ppg_onset_indices(const WaveformSegment& ppg) {
  const auto& x = ppg.samples;
  const std::size_t span = samples_for(detector::kOnsetSearchS, ppg.fs);
  std::vector<std::size_t> out;
  for (auto p : ppg_peak_indices(ppg)) {
    if (p == 0) continue;
    const std::size_t lo = p >= span ? p - span : 0;
    std::size_t best = lo;
    // Latest minimum wins ties so a flat baseline maps onto the upstroke start.
    for (std::size_t k = lo; k < p; ++k) {
      if (x[k] <= x[best]) best = k;
    }
    if (best == 0 && lo == 0) continue;  // still falling at the segment start
    if (!out.empty() && best <= out.back()) continue;
    out.push_back(best);
  }
  return out;
}

std::vector<double> detect_r_peaks(const WaveformSegment& ecg) { return to_seconds(r_peak_indices(ecg), ecg.fs); }

std::vector<double> detect_ppg_onsets(const WaveformSegment& ppg) {
  return to_seconds(ppg_onset_indices(ppg), ppg.fs);
}

}  // namespace xmae
