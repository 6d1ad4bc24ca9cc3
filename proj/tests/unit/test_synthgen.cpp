#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "xmae/segment_io.hpp"
#include "xmae/synthgen.hpp"

using namespace xmae;

namespace {

SubjectProfile profile(double rr_mean, double rr_sd, double ar, std::uint64_t seed, double delay = 250.0) {
  SubjectProfile p;
  p.subject_id = "T";
  p.rr_mean_ms = rr_mean;
  p.rr_sd_ms = rr_sd;
  p.rr_ar1 = ar;
  p.delay_ms = delay;
  p.seed = seed;
  return p;
}

std::size_t argmax_in(const std::vector<double>& x, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(std::max_element(x.begin() + static_cast<std::ptrdiff_t>(lo), x.begin() + static_cast<std::ptrdiff_t>(hi)) - x.begin());
}

std::vector<std::filesystem::path> files_with(const std::filesystem::path& dir, const std::string& suffix) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto n = e.path().filename().string();
    if (n.size() >= suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("constant rhythm when rr_sd is zero") {
  const auto bt = gen_beat_train(profile(850.0, 0.0, 0.5, 1), 30.0);
  for (double rr : bt.rr_intervals_ms) CHECK(rr == doctest::Approx(850.0).epsilon(1e-9));
}

TEST_CASE("beat count for one minute at 1000 ms") {
  const auto bt = gen_beat_train(profile(1000.0, 30.0, 0.5, 2), 60.0);
  CHECK(bt.beat_times_s.size() >= 59);
  CHECK(bt.beat_times_s.size() <= 61);
}

TEST_CASE("beat train invariants") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto bt = gen_beat_train(profile(700.0 + 20.0 * static_cast<double>(s), 60.0, 0.7, s), 120.0);
    REQUIRE(bt.beat_times_s.size() == bt.rr_intervals_ms.size() + 1);
    for (std::size_t i = 0; i < bt.rr_intervals_ms.size(); ++i) {
      CHECK(bt.beat_times_s[i + 1] > bt.beat_times_s[i]);
      CHECK(bt.rr_intervals_ms[i] >= kMinRrMs - 1e-6);
      CHECK(bt.rr_intervals_ms[i] <= kMaxRrMs + 1e-6);
    }
    CHECK(bt.beat_times_s.back() < 120.0);
  }
}

TEST_CASE("lag-one autocorrelation of the RR series") {
  const auto p = profile(900.0, 40.0, 0.5, 42);
  const auto bt = gen_beat_train(p, 10001 * 0.9);
  const auto& rr = bt.rr_intervals_ms;
  REQUIRE(rr.size() >= 9900);
  const double mean = std::accumulate(rr.begin(), rr.end(), 0.0) / static_cast<double>(rr.size());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < rr.size(); ++i) {
    den += (rr[i] - mean) * (rr[i] - mean);
    if (i + 1 < rr.size()) num += (rr[i] - mean) * (rr[i + 1] - mean);
  }
  CHECK(std::abs(num / den - 0.5) <= 0.05);
}

TEST_CASE("ECG morphology at zero noise") {
  BeatTrain bt;
  bt.beat_times_s = {2.0};
  bt.duration_s = 4.0;
  const auto ecg = render_ecg(bt, 100, 0.0, 0);
  const auto peak = argmax_in(ecg.samples, 0, ecg.samples.size());
  CHECK(std::abs(static_cast<double>(peak) - 200.0) <= 1.0);
  // R > T > P at the bump centres.
  const double r = ecg.samples[200], t = ecg.samples[218], p = ecg.samples[184];
  CHECK(r > t);
  CHECK(t > p);
  CHECK(p > 0.0);
}

TEST_CASE("ECG maximum near each beat sits on the beat") {
  const auto bt = gen_beat_train(profile(800.0, 50.0, 0.5, 9), 30.0);
  const auto ecg = render_ecg(bt, 100, 0.0, 0);
  for (double tb : bt.beat_times_s) {
    const double c = tb * 100.0;
    if (c < 5.0 || c + 5.0 >= static_cast<double>(ecg.size())) continue;
    const auto lo = static_cast<std::size_t>(std::ceil(c - 5.0)), hi = static_cast<std::size_t>(std::floor(c + 5.0)) + 1;
    CHECK(std::abs(static_cast<double>(argmax_in(ecg.samples, lo, hi)) - c) <= 1.0);
  }
}

TEST_CASE("PPG onset valley follows the beat by the delay") {
  for (double delay : {0.0, 250.0}) {
    BeatTrain bt;
    bt.beat_times_s = {1.0, 2.0, 3.0};
    bt.duration_s = 5.0;
    const auto ppg = render_ppg(bt, delay, 100, 0.0, 0);
    for (double tb : bt.beat_times_s) {
      const double on = (tb + delay / 1000.0) * 100.0;
      // Walk back from the systolic peak to the preceding local minimum.
      auto i = argmax_in(ppg.samples, static_cast<std::size_t>(on), static_cast<std::size_t>(on) + 40);
      while (i > 0 && ppg.samples[i - 1] < ppg.samples[i]) --i;
      CHECK(std::abs(static_cast<double>(i) - on) <= 1.0);
    }
  }
}

TEST_CASE("pulse onsets respect the delay and the next beat") {
  auto p = profile(800.0, 50.0, 0.5, 3, 320.0);
  const auto bt = gen_beat_train(p, 60.0);
  const auto on = pulse_onsets(bt, p);
  REQUIRE(on.size() == bt.beat_times_s.size());
  for (std::size_t k = 0; k < on.size(); ++k) CHECK(std::abs(on[k] - bt.beat_times_s[k] - 0.320) < 1e-12);

  p.jitter_sd_ms = 15.0;
  const auto jit = pulse_onsets(bt, p);
  for (std::size_t k = 0; k + 1 < jit.size(); ++k) {
    CHECK(jit[k] > bt.beat_times_s[k]);
    CHECK(jit[k] < bt.beat_times_s[k + 1]);
  }
}

TEST_CASE("rendering is deterministic") {
  const auto p = profile(900.0, 40.0, 0.5, 17);
  const auto a = gen_beat_train(p, 30.0), b = gen_beat_train(p, 30.0);
  CHECK(a.beat_times_s == b.beat_times_s);
  CHECK(render_ecg(a, 100, 0.05, 5).samples == render_ecg(b, 100, 0.05, 5).samples);
  CHECK(render_ppg(a, 250.0, 100, 0.05, 6).samples == render_ppg(b, 250.0, 100, 0.05, 6).samples);
}

TEST_CASE("dataset file counts and byte determinism") {
  SynthConfig cfg;
  cfg.n_subjects = 5;
  cfg.segs_per_subject = 4;
  cfg.seed = 7;
  const auto d1 = th::temp_dir("synth_a"), d2 = th::temp_dir("synth_b");
  const auto m = gen_dataset(cfg, d1);
  gen_dataset(cfg, d2);
  CHECK(m.n_pairs() == 20);
  const auto xs = files_with(d1, ".xseg"), js = files_with(d1, ".json");
  CHECK(xs.size() == 40);
  CHECK(js.size() == 21);  // 20 sidecars and the manifest
  CHECK(std::filesystem::exists(d1 / "manifest.json"));
  for (const auto& f : std::filesystem::directory_iterator(d1))
    CHECK(read_file_bytes(f.path()) == read_file_bytes(d2 / f.path().filename()));

  // Every window is 10 s at 100 Hz, aligned and normalized.
  for (const auto& s : m.subjects) {
    for (const auto& f : s.files) {
      const auto ppg = read_xseg(d1 / f.ppg_file), ecg = read_xseg(d1 / f.ecg_file);
      CHECK(ppg.size() == 1000);
      CHECK(ecg.size() == 1000);
      CHECK(ppg.fs == 100);
      CHECK(*std::max_element(ppg.samples.begin(), ppg.samples.end()) == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(*std::min_element(ecg.samples.begin(), ecg.samples.end()) == doctest::Approx(-1.0).epsilon(1e-6));
    }
  }
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST_CASE("sidecar ground truth pairs each R-peak with its onset") {
  SynthConfig cfg;
  cfg.n_subjects = 3;
  cfg.segs_per_subject = 3;
  cfg.seed = 11;
  for (std::size_t s = 0; s < cfg.n_subjects; ++s) {
    const auto p = draw_profile(cfg.ranges, cfg.seed, s);
    for (const auto& pair : render_subject(cfg, p)) {
      const auto& r = *pair.meta.rpeaks_s;
      const auto& o = *pair.meta.onsets_s;
      CHECK(std::is_sorted(r.begin(), r.end()));
      CHECK(std::is_sorted(o.begin(), o.end()));
      for (double tr : r) {
        const double want = tr + p.delay_ms / 1000.0;
        if (want >= cfg.segment_s) continue;
        const auto it = std::min_element(o.begin(), o.end(), [&](double a, double b) { return std::abs(a - want) < std::abs(b - want); });
        REQUIRE(it != o.end());
        CHECK(std::abs(*it - want) < 1e-9);
      }
    }
  }
}

TEST_CASE("subject delays are uniform over their range") {
  ProfileRanges ranges;
  std::vector<double> d;
  for (std::size_t i = 0; i < 200; ++i) d.push_back(draw_profile(ranges, 2024, i).delay_ms);
  std::sort(d.begin(), d.end());
  double ks = 0.0;
  const double n = static_cast<double>(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double f = (d[i] - 150.0) / 300.0;
    ks = std::max({ks, std::abs(static_cast<double>(i + 1) / n - f), std::abs(f - static_cast<double>(i) / n)});
  }
  CHECK(ks < 0.1);
  CHECK(d.front() >= 150.0);
  CHECK(d.back() <= 450.0);
}

TEST_CASE("delay coupling shifts the diastolic bump") {
  ProfileRanges r;
  r.delay_morphology_coupling = 0.5;
  const auto p = draw_profile(r, 5, 0);
  CHECK(p.diastolic_offset_ms == doctest::Approx(380.0 + 0.5 * (p.delay_ms - 300.0)));
  ProfileRanges none;
  CHECK(draw_profile(none, 5, 0).diastolic_offset_ms == 380.0);
}

TEST_CASE("manifest round trip") {
  SynthConfig cfg;
  cfg.n_subjects = 2;
  cfg.segs_per_subject = 1;
  const auto d = th::temp_dir("synth_m");
  const auto m = gen_dataset(cfg, d);
  const auto back = read_manifest(d / "manifest.json");
  REQUIRE(back.subjects.size() == 2);
  CHECK(back.seed == m.seed);
  CHECK(back.subjects[1].profile.delay_ms == m.subjects[1].profile.delay_ms);
  CHECK(back.subjects[1].files[0].stem == m.subjects[1].files[0].stem);
  std::filesystem::remove_all(d);
}
