#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "xmae/detect.hpp"
#include "xmae/error.hpp"
#include "xmae/sigproc.hpp"
#include "xmae/synthgen.hpp"

using namespace xmae;

namespace {

WaveformSegment seg(std::vector<double> x, int fs = 100) {
  WaveformSegment s;
  s.samples = std::move(x);
  s.fs = fs;
  return s;
}

std::vector<double> impulse_response(const BiquadCascade& c, std::size_t n) {
  std::vector<double> x(n, 0.0);
  x[0] = 1.0;
  return filter_causal(c, x);
}

const std::vector<double> kPpgBand{0.5, 8.0};

BiquadCascade ppg_bandpass() { return design_butterworth(FilterKind::Bandpass, 3, kPpgBand, 100.0); }

// Amplitude of a tone at f over a span holding whole cycles.
double tone_amplitude(const std::vector<double>& x, std::size_t from, std::size_t n, double f, double fs) {
  std::vector<double> part(x.begin() + static_cast<std::ptrdiff_t>(from), x.begin() + static_cast<std::ptrdiff_t>(from + n));
  return 2.0 * std::abs(th::dft_at(part, f, fs)) / static_cast<double>(n);
}

WaveformSegment clean_ppg(double rr_ms, double seconds, std::uint64_t seed) {
  SubjectProfile p;
  p.rr_mean_ms = rr_ms;
  p.rr_sd_ms = 0.0;
  p.delay_ms = 200.0;
  p.seed = seed;
  const auto beats = gen_beat_train(p, seconds);
  return render_ppg(beats, p.delay_ms, 100, 0.0, seed);
}

}  // namespace

TEST_CASE("bandpass 0.5-8 Hz order 3 has three stable sections") {
  const auto c = ppg_bandpass();
  CHECK(c.sections.size() == 3);
  CHECK(c.stable());
}

TEST_CASE("bandpass gains measured on the impulse response DFT") {
  const auto c = ppg_bandpass();
  const auto h = impulse_response(c, 20000);
  const double g4 = std::abs(th::dft_at(h, 4.0, 100.0));
  const double g005 = std::abs(th::dft_at(h, 0.05, 100.0));
  CHECK(std::abs(g4 - 1.0) <= 0.05);
  CHECK(g005 < 0.05);
  // Analytic response agrees with the DFT oracle.
  for (double f : {0.3, 1.0, 4.0, 7.0, 12.0}) CHECK(std::abs(c.response(f, 100.0)) == doctest::Approx(std::abs(th::dft_at(h, f, 100.0))).epsilon(1e-6));
}

TEST_CASE("highpass rejects a constant input") {
  const std::vector<double> cut{0.5};
  const auto c = design_butterworth(FilterKind::Highpass, 5, cut, 100.0);
  CHECK(c.stable());
  const auto y = filter_causal(c, std::vector<double>(3000, 1.0));
  for (std::size_t i = 2000; i < y.size(); ++i) CHECK(std::abs(y[i]) < 1e-3);
  const double dc = std::abs(th::dft_at(impulse_response(c, 20000), 0.0, 100.0));
  CHECK(20.0 * std::log10(dc + 1e-300) < -40.0);
}

TEST_CASE("design rejects bad cutoffs and orders") {
  const std::vector<double> nyq{50.0}, neg{-1.0}, swapped{8.0, 0.5}, ok{1.0};
  auto kind_of = [](auto f) {
    try {
      f();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Config;
  };
  CHECK(kind_of([&] { design_butterworth(FilterKind::Lowpass, 2, nyq, 100.0); }) == ErrorKind::InvalidCutoff);
  CHECK(kind_of([&] { design_butterworth(FilterKind::Lowpass, 2, neg, 100.0); }) == ErrorKind::InvalidCutoff);
  CHECK(kind_of([&] { design_butterworth(FilterKind::Bandpass, 2, swapped, 100.0); }) == ErrorKind::InvalidCutoff);
  CHECK(kind_of([&] { design_butterworth(FilterKind::Lowpass, 0, ok, 100.0); }) == ErrorKind::InvalidOrder);
}

TEST_CASE("every designed cascade on the test grid is stable") {
  for (int order = 1; order <= 8; ++order) {
    for (double f : {0.2, 0.5, 5.0, 20.0, 45.0}) {
      const std::vector<double> one{f};
      CHECK(design_butterworth(FilterKind::Lowpass, order, one, 100.0).stable());
      CHECK(design_butterworth(FilterKind::Highpass, order, one, 100.0).stable());
    }
    const std::vector<double> band{0.5, 8.0}, band2{5.0, 40.0};
    CHECK(design_butterworth(FilterKind::Bandpass, order, band, 100.0).stable());
    CHECK(design_butterworth(FilterKind::Bandpass, order, band2, 100.0).stable());
  }
}

TEST_CASE("identity cascade and zero input") {
  BiquadCascade id;
  id.sections.push_back({});
  const auto x = th::noise(300, 3);
  CHECK(apply_filter(id, seg(x), false).samples == x);
  CHECK(th::max_abs_diff(apply_filter(id, seg(x), true).samples, x) < 1e-12);
  const auto z = apply_filter(ppg_bandpass(), seg(std::vector<double>(500, 0.0)), true);
  for (double v : z.samples) CHECK(v == 0.0);
}

TEST_CASE("zero-phase 5 Hz tone is scaled by the squared gain") {
  const auto c = ppg_bandpass();
  const double g = std::abs(th::dft_at(impulse_response(c, 20000), 5.0, 100.0));
  const auto x = th::tone(5.0, 100.0, 4000);
  const auto y = apply_filter(c, seg(x), true).samples;
  const double ratio = tone_amplitude(y, 1000, 2000, 5.0, 100.0) / tone_amplitude(x, 1000, 2000, 5.0, 100.0);
  CHECK(std::abs(ratio - g * g) < 1e-3);
}

TEST_CASE("zero-phase filtering commutes with time reversal") {
  const auto c = ppg_bandpass();
  auto x = th::noise(800, 11);
  auto y = apply_filter(c, seg(x), true).samples;
  std::reverse(x.begin(), x.end());
  auto yr = apply_filter(c, seg(x), true).samples;
  std::reverse(yr.begin(), yr.end());
  CHECK(th::max_abs_diff(y, yr) < 1e-9);
}

TEST_CASE("powerline smoothing") {
  CHECK(powerline_kernel_width(100, 50.0) == 2);
  CHECK(powerline_kernel_width(200, 50.0) == 4);
  const auto c = notch_powerline(seg(std::vector<double>(200, 3.25)), 50.0);
  for (double v : c.samples) CHECK(std::abs(v - 3.25) < 1e-12);

  const auto t = notch_powerline(seg(th::tone(50.0, 200.0, 400, 1.0, 0.3), 200), 50.0);
  for (std::size_t i = 4; i + 4 < t.samples.size(); ++i) CHECK(std::abs(t.samples[i]) < 1e-10);

  // Line frequency above Nyquist leaves the signal alone.
  const auto x = th::noise(100, 5);
  CHECK(notch_powerline(seg(x, 60), 50.0).samples == x);
}

TEST_CASE("resampling") {
  const auto x = th::tone(2.0, 500.0, 5000);
  const auto y = resample(seg(x, 500), 100);
  CHECK(y.fs == 100);
  REQUIRE(y.samples.size() == 1000);
  const auto ref = th::tone(2.0, 100.0, 1000);
  // Pearson correlation against the analytic tone.
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
  const double ma = mean(y.samples), mb = mean(ref);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    sab += (y.samples[i] - ma) * (ref[i] - mb);
    saa += (y.samples[i] - ma) * (y.samples[i] - ma);
    sbb += (ref[i] - mb) * (ref[i] - mb);
  }
  CHECK(sab / std::sqrt(saa * sbb) > 0.999);

  const auto same = resample(seg(x, 500), 500);
  CHECK(same.samples == x);
  CHECK_THROWS_AS(resample(seg({1.0}), 50), Error);
}

TEST_CASE("unit-range normalization") {
  const auto n = normalize_unit_range(seg({-2.0, 0.0, 2.0})).samples;
  CHECK(n == std::vector<double>{-1.0, 0.0, 1.0});
  std::vector<double> ramp;
  for (int i = 0; i <= 20; ++i) ramp.push_back(-1.0 + 0.1 * i);
  CHECK(th::max_abs_diff(normalize_unit_range(seg(ramp)).samples, ramp) < 1e-12);
  try {
    normalize_unit_range(seg({3.0, 3.0, 3.0}));
    FAIL("expected DegenerateSignal");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DegenerateSignal);
  }
}

TEST_CASE("normalization is idempotent and affine invariant") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto x = th::noise(257, s);
    const auto a = normalize_unit_range(seg(x)).samples;
    CHECK(*std::min_element(a.begin(), a.end()) == -1.0);
    CHECK(*std::max_element(a.begin(), a.end()) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(th::max_abs_diff(normalize_unit_range(seg(a)).samples, a) < 1e-9);
    std::vector<double> y(x);
    for (double& v : y) v = 3.7 * v - 12.0;
    CHECK(th::max_abs_diff(normalize_unit_range(seg(y)).samples, a) < 1e-9);
  }
}

TEST_CASE("windowing") {
  const auto x = th::noise(3500, 1);
  const auto w = segment_windows(seg(x), 10.0);
  REQUIRE(w.size() == 3);
  std::vector<double> cat;
  for (const auto& s : w) {
    CHECK(s.samples.size() == 1000);
    cat.insert(cat.end(), s.samples.begin(), s.samples.end());
  }
  CHECK(std::equal(cat.begin(), cat.end(), x.begin()));
  CHECK(segment_windows(seg(th::noise(1000, 2)), 10.0).size() == 1);
  CHECK(segment_windows(seg(th::noise(990, 2)), 10.0).empty());
}

TEST_CASE("percentile interpolates linearly") {
  const std::vector<double> v{4.0, 1.0, 3.0, 2.0};
  CHECK(percentile(v, 0.0) == 1.0);
  CHECK(percentile(v, 100.0) == 4.0);
  CHECK(percentile(v, 50.0) == doctest::Approx(2.5));
  CHECK(percentile(v, 15.0) == doctest::Approx(1.45));
}

TEST_CASE("quality of a periodic pulse train") {
  const auto ppg = clean_ppg(850.0, 10.0, 3);
  const auto q = quality_score(ppg);
  REQUIRE(q.per_sample_score.size() == ppg.samples.size());
  for (double s : q.per_sample_score) CHECK(s >= 0.99);
  CHECK(q.pass);
  CHECK(q.pass == (q.p15 > kQualityPassThreshold));
}

TEST_CASE("a corrupted beat scores below every clean beat") {
  auto ppg = clean_ppg(850.0, 10.0, 4);
  const auto peaks = ppg_peak_indices(ppg);
  REQUIRE(peaks.size() >= 6);
  // Replace the span between two middle peaks with white noise.
  const std::size_t a = peaks[4] - 20, b = peaks[5] - 20;
  const auto n = th::noise(b - a, 9, 0.4);
  for (std::size_t i = a; i < b; ++i) ppg.samples[i] = n[i - a];
  const auto q = quality_score(ppg);
  const double bad = q.per_sample_score[(a + b) / 2];
  for (std::size_t k = 0; k + 1 < peaks.size(); ++k) {
    if (k == 3 || k == 4 || k == 5) continue;  // beats touching the corrupted span
    CHECK(q.per_sample_score[peaks[k]] > bad);
  }
}

TEST_CASE("flat signal fails the quality gate") {
  const auto q = quality_score(seg(std::vector<double>(1000, 0.0)));
  CHECK_FALSE(q.pass);
  for (double s : q.per_sample_score) CHECK(s == 0.0);
}

TEST_CASE("quality decision equals the percentile rule") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto x = clean_ppg(700.0 + 40.0 * static_cast<double>(s), 10.0, s);
    const auto n = th::noise(x.samples.size(), 100 + s, 0.05 * static_cast<double>(s));
    for (std::size_t i = 0; i < n.size(); ++i) x.samples[i] += n[i];
    const auto q = quality_score(x);
    CHECK(q.pass == (q.p15 > 0.9));
  }
}
