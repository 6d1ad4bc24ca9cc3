#include "xmae/synthgen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "xmae/error.hpp"

namespace xmae {

using nlohmann::json;

namespace {

struct Bump {
  double amplitude;
  double offset_s;
  double sd_s;
};

constexpr std::array<Bump, 5> kEcgBumps{{
    {0.15, -0.160, 0.025},  // P
    {-0.10, -0.025, 0.010},  // Q
    {1.00, 0.000, 0.012},   // R
    {-0.20, 0.025, 0.010},  // S
    {0.30, 0.180, 0.040},   // T
}};

constexpr Bump kSystolic{1.0, 0.120, 0.090};
constexpr Bump kDiastolic{0.35, kDiastolicOffsetMs / 1000.0, 0.120};
constexpr double kOnsetRiseS = 0.020;

// Support of each morphology relative to its anchor time.
constexpr double kEcgSupportLo = -0.30, kEcgSupportHi = 0.40;
constexpr double kPpgSupportHi = 1.20;

double gauss(double t, const Bump& b) {
  const double z = (t - b.offset_s) / b.sd_s;
  return b.amplitude * std::exp(-0.5 * z * z);
}

std::size_t sample_count(double duration_s, int fs) {
  return static_cast<std::size_t>(std::llround(duration_s * fs));
}

void add_noise(std::vector<double>& x, double sd, std::uint64_t seed) {
  if (sd <= 0.0) return;
  Rng rng(seed);
  for (double& v : x) v += sd * rng.normal();
}

// Adds f(t - anchor) for samples whose time lies in [anchor + lo, anchor + hi].
template <typename F>
void stamp(std::vector<double>& x, int fs, double anchor, double lo, double hi, F f) {
  const auto n = static_cast<long long>(x.size());
  const auto i0 = std::max(0LL, static_cast<long long>(std::ceil((anchor + lo) * fs)));
  const auto i1 = std::min(n - 1, static_cast<long long>(std::floor((anchor + hi) * fs)));
  for (long long i = i0; i <= i1; ++i) {
    x[static_cast<std::size_t>(i)] += f(static_cast<double>(i) / fs - anchor);
  }
}

}  // namespace

double Range::draw(Rng& rng) const { return hi > lo ? rng.uniform(lo, hi) : lo; }

BeatTrain gen_beat_train(const SubjectProfile& profile, double duration_s) {
  Rng rng(derive_seed({profile.seed, 1}));
  const double mean = profile.rr_mean_ms;
  const double ar = profile.rr_ar1;
  const double innov = std::sqrt(1.0 - ar * ar) * profile.rr_sd_ms;
  const double lo = std::max(kMinRrMs, profile.delay_ms + kRrDelayMarginMs);

  BeatTrain bt;
  bt.duration_s = duration_s;
  double t = rng.uniform() * mean / 1000.0;
  // Stationary start: first deviation drawn from the marginal distribution.
  double rr = mean + profile.rr_sd_ms * rng.normal();
  while (t < duration_s) {
    bt.beat_times_s.push_back(t);
    rr = std::clamp(rr, lo, kMaxRrMs);
    const double next = t + rr / 1000.0;
    if (next >= duration_s) break;
    bt.rr_intervals_ms.push_back(rr);
    t = next;
    rr = mean + ar * (rr - mean) + innov * rng.normal();
  }
  // Store intervals as the exact differences of the stored times.
  for (std::size_t i = 1; i < bt.beat_times_s.size(); ++i) {
    bt.rr_intervals_ms[i - 1] = (bt.beat_times_s[i] - bt.beat_times_s[i - 1]) * 1000.0;
  }
  return bt;
}

std::vector<double> pulse_onsets(const BeatTrain& beats, const SubjectProfile& profile) {
  Rng rng(derive_seed({profile.seed, 2}));
  const auto& t = beats.beat_times_s;
  std::vector<double> out;
  out.reserve(t.size());
  for (std::size_t k = 0; k < t.size(); ++k) {
    double d = profile.delay_ms;
    if (profile.jitter_sd_ms > 0.0) {
      d += profile.jitter_sd_ms * rng.normal();
      const double rr = k + 1 < t.size() ? (t[k + 1] - t[k]) * 1000.0 : profile.rr_mean_ms;
      d = std::clamp(d, 1.0, rr - 1.0);
    }
    out.push_back(t[k] + d / 1000.0);
  }
  return out;
}

WaveformSegment render_ecg(const BeatTrain& beats, int fs, double noise_sd, std::uint64_t seed) {
  if (fs < 50) throw std::invalid_argument("render_ecg requires fs >= 50");
  WaveformSegment seg;
  seg.fs = fs;
  seg.modality = Modality::ECG;
  seg.samples.assign(sample_count(beats.duration_s, fs), 0.0);
  for (double tb : beats.beat_times_s) {
    stamp(seg.samples, fs, tb, kEcgSupportLo, kEcgSupportHi, [](double tau) {
      double v = 0.0;
      for (const auto& b : kEcgBumps) v += gauss(tau, b);
      return v;
    });
  }
  add_noise(seg.samples, noise_sd, seed);
  return seg;
}

double ppg_pulse_shape(double tau_s, double diastolic_offset_ms) {
  if (tau_s <= 0.0) return 0.0;
  Bump dia = kDiastolic;
  dia.offset_s = diastolic_offset_ms / 1000.0;
  const double gate = 1.0 - std::exp(-tau_s / kOnsetRiseS);
  return gate * (gauss(tau_s, kSystolic) + gauss(tau_s, dia));
}

WaveformSegment render_ppg_at(const std::vector<double>& onsets_s, double duration_s, int fs, double noise_sd,
                              std::uint64_t seed, double diastolic_offset_ms) {
  if (fs < 50) throw std::invalid_argument("render_ppg requires fs >= 50");
  WaveformSegment seg;
  seg.fs = fs;
  seg.modality = Modality::PPG;
  seg.samples.assign(sample_count(duration_s, fs), 0.0);
  for (double on : onsets_s) stamp(seg.samples, fs, on, 0.0, kPpgSupportHi,
                                  [&](double tau) { return ppg_pulse_shape(tau, diastolic_offset_ms); });
  add_noise(seg.samples, noise_sd, seed);
  return seg;
}

WaveformSegment render_ppg(const BeatTrain& beats, double delay_ms, int fs, double noise_sd, std::uint64_t seed) {
  std::vector<double> onsets;
  onsets.reserve(beats.beat_times_s.size());
  for (double tb : beats.beat_times_s) onsets.push_back(tb + delay_ms / 1000.0);
  return render_ppg_at(onsets, beats.duration_s, fs, noise_sd, seed);
}

SubjectProfile draw_profile(const ProfileRanges& ranges, std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed({seed, 0x5b7ec7, index}));
  SubjectProfile p;
  char id[16];
  std::snprintf(id, sizeof id, "S%03zu", index);
  p.subject_id = id;
  p.delay_ms = ranges.delay_ms.draw(rng);
  p.rr_mean_ms = ranges.rr_mean_ms.draw(rng);
  p.rr_sd_ms = ranges.rr_sd_ms.draw(rng);
  p.rr_ar1 = ranges.rr_ar1.draw(rng);
  p.noise_sd = ranges.noise_sd.draw(rng);
  p.jitter_sd_ms = ranges.jitter_sd_ms.draw(rng);
  p.diastolic_offset_ms = kDiastolicOffsetMs + ranges.delay_morphology_coupling * (p.delay_ms - 300.0);
  p.seed = rng.next_u64();
  if (!(p.delay_ms < p.rr_mean_ms)) throw std::invalid_argument("profile ranges allow delay >= rr_mean");
  return p;
}

std::size_t Manifest::n_pairs() const {
  std::size_t n = 0;
  for (const auto& s : subjects) n += s.files.size();
  return n;
}

std::vector<SegmentPair> render_subject(const SynthConfig& cfg, const SubjectProfile& profile) {
  constexpr double kMarginS = 2.0;
  const double body_s = static_cast<double>(cfg.segs_per_subject) * cfg.segment_s;
  const double total_s = body_s + 2.0 * kMarginS;

  const auto beats = gen_beat_train(profile, total_s);
  const auto onsets = pulse_onsets(beats, profile);
  auto ecg = render_ecg(beats, cfg.render_fs, profile.noise_sd, derive_seed({profile.seed, 3}));
  auto ppg = render_ppg_at(onsets, total_s, cfg.render_fs, profile.noise_sd, derive_seed({profile.seed, 4}),
                          profile.diastolic_offset_ms);
  ecg.subject_id = ppg.subject_id = profile.subject_id;
  if (cfg.apply_preprocess) {
    ecg = preprocess_ecg(ecg, cfg.preprocess);
    ppg = preprocess_ppg(ppg, cfg.preprocess);
  }

  // Drop the margins so filter edge effects stay outside the windows.
  const int fs = ecg.fs;
  const auto skip = static_cast<std::ptrdiff_t>(std::llround(kMarginS * fs));
  const auto keep = static_cast<std::ptrdiff_t>(std::llround(body_s * fs));
  auto trim = [&](WaveformSegment& s) {
    s.samples = std::vector<double>(s.samples.begin() + skip, s.samples.begin() + skip + keep);
    s.t0 = 0.0;
  };
  trim(ecg);
  trim(ppg);

  const auto ecg_w = segment_windows(ecg, cfg.segment_s);
  const auto ppg_w = segment_windows(ppg, cfg.segment_s);

  std::vector<SegmentPair> out;
  for (std::size_t w = 0; w < ecg_w.size(); ++w) {
    SegmentPair pair;
    pair.ecg = normalize_unit_range(ecg_w[w]);
    pair.ppg = normalize_unit_range(ppg_w[w]);
    const double t0 = ecg_w[w].t0;
    const double t1 = t0 + cfg.segment_s;

    SegmentMeta meta;
    meta.subject_id = profile.subject_id;
    meta.t0_s = t0;
    meta.delay_ms = profile.delay_ms;
    std::vector<double> r, o;
    for (std::size_t k = 0; k < beats.beat_times_s.size(); ++k) {
      const double tr = beats.beat_times_s[k] - kMarginS;
      const double to = onsets[k] - kMarginS;
      if (tr >= t0 && tr < t1) r.push_back(tr - t0);
      if (to >= t0 && to < t1) o.push_back(to - t0);
    }
    meta.rpeaks_s = std::move(r);
    meta.onsets_s = std::move(o);
    pair.meta = meta;

    char stem[64];
    std::snprintf(stem, sizeof stem, "%s_%02zu", profile.subject_id.c_str(), w);
    pair.entry.stem = stem;
    pair.entry.ppg_file = pair.entry.stem + ".ppg.xseg";
    pair.entry.ecg_file = pair.entry.stem + ".ecg.xseg";
    pair.entry.meta_file = pair.entry.stem + ".json";
    pair.entry.ppg_quality = quality_score(pair.ppg).p15;
    pair.entry.ecg_quality = quality_score(pair.ecg).p15;
    pair.entry.quality_pass =
        pair.entry.ppg_quality > kQualityPassThreshold && pair.entry.ecg_quality > kQualityPassThreshold;
    out.push_back(std::move(pair));
  }
  return out;
}

Manifest gen_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  if (cfg.n_subjects < 1) throw std::invalid_argument("n_subjects must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create " + out_dir.string() + ": " + ec.message());

  Manifest m;
  m.seed = cfg.seed;
  for (std::size_t s = 0; s < cfg.n_subjects; ++s) {
    SubjectEntry entry;
    entry.profile = draw_profile(cfg.ranges, cfg.seed, s);
    for (auto& pair : render_subject(cfg, entry.profile)) {
      pair.ppg.subject_id = pair.ecg.subject_id = entry.profile.subject_id;
      write_xseg(out_dir / pair.entry.ppg_file, pair.ppg);
      write_xseg(out_dir / pair.entry.ecg_file, pair.ecg);
      write_sidecar(out_dir / pair.entry.meta_file, pair.meta);
      entry.files.push_back(pair.entry);
    }
    m.subjects.push_back(std::move(entry));
  }
  write_manifest(out_dir / "manifest.json", m);
  return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  json j;
  j["seed"] = m.seed;
  j["subjects"] = json::array();
  for (const auto& s : m.subjects) {
    json js;
    js["subject_id"] = s.profile.subject_id;
    js["delay_ms"] = s.profile.delay_ms;
    js["rr_mean_ms"] = s.profile.rr_mean_ms;
    js["rr_sd_ms"] = s.profile.rr_sd_ms;
    js["rr_ar1"] = s.profile.rr_ar1;
    js["noise_sd"] = s.profile.noise_sd;
    js["jitter_sd_ms"] = s.profile.jitter_sd_ms;
    js["diastolic_offset_ms"] = s.profile.diastolic_offset_ms;
    js["seed"] = s.profile.seed;
    js["files"] = json::array();
    for (const auto& f : s.files) {
      js["files"].push_back({{"stem", f.stem},
                             {"ppg", f.ppg_file},
                             {"ecg", f.ecg_file},
                             {"meta", f.meta_file},
                             {"ppg_quality", f.ppg_quality},
                             {"ecg_quality", f.ecg_quality},
                             {"quality_pass", f.quality_pass}});
    }
    j["subjects"].push_back(std::move(js));
  }
  const auto text = j.dump(1) + "\n";
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Manifest read_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  Manifest m;
  try {
    const auto j = json::parse(bytes.begin(), bytes.end());
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& js : j.at("subjects")) {
      SubjectEntry s;
      s.profile.subject_id = js.at("subject_id").get<std::string>();
      s.profile.delay_ms = js.at("delay_ms").get<double>();
      s.profile.rr_mean_ms = js.at("rr_mean_ms").get<double>();
      s.profile.rr_sd_ms = js.value("rr_sd_ms", 0.0);
      s.profile.rr_ar1 = js.value("rr_ar1", 0.0);
      s.profile.noise_sd = js.value("noise_sd", 0.0);
      s.profile.jitter_sd_ms = js.value("jitter_sd_ms", 0.0);
      s.profile.diastolic_offset_ms = js.value("diastolic_offset_ms", kDiastolicOffsetMs);
      s.profile.seed = js.value("seed", std::uint64_t{0});
      for (const auto& f : js.at("files")) {
        PairEntry e;
        e.stem = f.at("stem").get<std::string>();
        e.ppg_file = f.at("ppg").get<std::string>();
        e.ecg_file = f.at("ecg").get<std::string>();
        e.meta_file = f.at("meta").get<std::string>();
        e.ppg_quality = f.value("ppg_quality", 0.0);
        e.ecg_quality = f.value("ecg_quality", 0.0);
        e.quality_pass = f.value("quality_pass", true);
        s.files.push_back(std::move(e));
      }
      m.subjects.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace xmae
