#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xmae/rng.hpp"
#include "xmae/segment_io.hpp"
#include "xmae/sigproc.hpp"

namespace xmae {

struct SubjectProfile {
  std::string subject_id;
  double delay_ms = 250.0;
  double rr_mean_ms = 900.0;
  double rr_sd_ms = 40.0;
  double rr_ar1 = 0.5;
  double noise_sd = 0.05;
  // Per-beat Gaussian jitter on the ECG-to-PPG delay; 0 keeps it constant.
  double jitter_sd_ms = 0.0;
  // Offset of the diastolic bump after the onset.
  double diastolic_offset_ms = 380.0;
  std::uint64_t seed = 0;
};

struct BeatTrain {
  std::vector<double> beat_times_s;
  std::vector<double> rr_intervals_ms;
  double duration_s = 0.0;
};

struct GroundTruth {
  std::vector<double> rpeaks_s;
  std::vector<double> onsets_s;
  double delay_ms = 0.0;
};

constexpr double kMinRrMs = 300.0;
constexpr double kMaxRrMs = 2000.0;
// Shortest allowed RR relative to the delay, so every onset lands before
// the next R-peak.
constexpr double kRrDelayMarginMs = 50.0;

// AR(1) RR process. The first beat falls at a uniform phase in
// [0, rr_mean); beats accumulate while t < duration_s.
BeatTrain gen_beat_train(const SubjectProfile& profile, double duration_s);

// Per-beat onset times: t_b + (delay_ms + jitter) / 1000, jitter drawn from
// the profile seed. Jitter is clamped so each onset stays inside its RR.
std::vector<double> pulse_onsets(const BeatTrain& beats, const SubjectProfile& profile);

// Gaussian-bump PQRST morphology (amplitude, offset ms, sd ms):
//   P (0.15, -160, 25), Q (-0.1, -25, 10), R (1.0, 0, 12), S (-0.2, 25, 10),
//   T (0.3, 180, 40); plus white noise of sd noise_sd.
WaveformSegment render_ecg(const BeatTrain& beats, int fs, double noise_sd, std::uint64_t seed);

constexpr double kDiastolicOffsetMs = 380.0;

// Two-bump pulse starting at each onset: systolic (1.0, +120, 90) and
// diastolic (0.35, +diastolic_offset, 120), gated by 1 - exp(-tau / 20 ms) so
// the onset is the local minimum.
WaveformSegment render_ppg_at(const std::vector<double>& onsets_s, double duration_s, int fs, double noise_sd,
                              std::uint64_t seed, double diastolic_offset_ms = kDiastolicOffsetMs);
WaveformSegment render_ppg(const BeatTrain& beats, double delay_ms, int fs, double noise_sd, std::uint64_t seed);

// Value of the noise-free pulse shape tau seconds after its onset.
double ppg_pulse_shape(double tau_s, double diastolic_offset_ms = kDiastolicOffsetMs);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double draw(Rng& rng) const;
};

struct ProfileRanges {
  Range delay_ms{150.0, 450.0};
  Range rr_mean_ms{700.0, 1100.0};
  Range rr_sd_ms{20.0, 60.0};
  Range rr_ar1{0.2, 0.8};
  Range noise_sd{0.05, 0.05};
  Range jitter_sd_ms{0.0, 0.0};
  // Diastolic offset = 380 ms + coupling * (delay - 300 ms). At 0 the PPG
  // shape carries no trace of the delay.
  double delay_morphology_coupling = 0.0;
};

SubjectProfile draw_profile(const ProfileRanges& ranges, std::uint64_t seed, std::size_t index);

struct SynthConfig {
  std::size_t n_subjects = 20;
  std::size_t segs_per_subject = 10;
  ProfileRanges ranges;
  std::uint64_t seed = 77;
  int render_fs = 100;
  double segment_s = 10.0;
  PreprocessConfig preprocess;
  bool apply_preprocess = true;
};

struct PairEntry {
  std::string stem;  // shared by ppg/ecg/sidecar files
  std::string ppg_file;
  std::string ecg_file;
  std::string meta_file;
  double ppg_quality = 0.0;  // 15th-percentile template-match score
  double ecg_quality = 0.0;
  bool quality_pass = false;
};

struct SubjectEntry {
  SubjectProfile profile;
  std::vector<PairEntry> files;
};

struct Manifest {
  std::uint64_t seed = 0;
  std::vector<SubjectEntry> subjects;

  std::size_t n_pairs() const;
};

// Renders every subject as one continuous recording, preprocesses it, cuts
// aligned 10 s windows, normalizes each window and writes XSEG pairs, one
// sidecar per pair and manifest.json into out_dir.
Manifest gen_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

// In-memory variant used by gen_dataset; returns the pairs in manifest order.
struct SegmentPair {
  WaveformSegment ppg;
  WaveformSegment ecg;
  SegmentMeta meta;
  PairEntry entry;
};
std::vector<SegmentPair> render_subject(const SynthConfig& cfg, const SubjectProfile& profile);

void write_manifest(const std::filesystem::path& path, const Manifest& m);
Manifest read_manifest(const std::filesystem::path& path);

}  // namespace xmae
