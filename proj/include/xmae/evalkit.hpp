#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xmae/detect.hpp"
#include "xmae/model.hpp"
#include "xmae/segment_io.hpp"
#include "xmae/sigproc.hpp"
#include "xmae/synthgen.hpp"

namespace xmae {

// Upper end of the R-peak to onset pairing window.
constexpr double kPairWindowS = 0.5;
// Error charged when a reconstruction yields no R-peak/onset pairs.
constexpr double kUnpairedErrorMs = 500.0;

struct DelayEstimate {
  std::vector<double> per_beat_delays_ms;
  double mean_ms = 0.0;
  std::size_t n_paired = 0;
  std::size_t n_unpaired = 0;
};

// Each R-peak takes the earliest unused onset in (r, r + 0.5 s]; unpaired
// R-peaks and onsets are both counted. Throws NoPairs.
DelayEstimate estimate_delay(const std::vector<double>& rpeaks_s, const std::vector<double>& onsets_s);

struct CdfTable {
  std::vector<double> values;  // ascending
  std::vector<double> cdf;     // k / n
  double median = 0.0;
};

double median_of(std::vector<double> v);
CdfTable empirical_cdf(std::vector<double> values);

struct DelayPair {
  DelayEstimate gt;
  std::optional<DelayEstimate> rec;  // empty when the reconstruction had no pairs
};

// Per-pair |mean_gt - mean_rec| (kUnpairedErrorMs for empty rec).
CdfTable delay_error_table(const std::vector<DelayPair>& pairs);

struct HrvFeatures {
  double median_nn_ms = 0.0;
  double sdnn_ms = 0.0;
  double rmssd_ms = 0.0;
  double pnn20_pct = 0.0;
  double pnn50_pct = 0.0;
  double shannon_entropy_bits = 0.0;

  std::array<double, 6> as_array() const;
};

inline const std::array<const char*, 6> kHrvFeatureNames{"median_nn", "sdnn", "rmssd", "pnn20", "pnn50", "shannon_entropy"};

// Histogram bins for the entropy feature.
constexpr double kShanEnLoMs = 300.0;
constexpr double kShanEnHiMs = 2000.0;
constexpr double kShanEnBinMs = 8.0;

// Throws TooFewBeats for fewer than 3 beats.
HrvFeatures hrv_features(const std::vector<double>& beat_times_s);
HrvFeatures hrv_features_from_nn(const std::vector<double>& nn_ms);

struct HrvComparison {
  HrvFeatures gt, rec, ppg;
  std::array<double, 6> rec_abs_error{};
  std::array<double, 6> ppg_abs_error{};
};

HrvComparison hrv_error_comparison(const WaveformSegment& gt_ecg, const WaveformSegment& rec_ecg,
                                   const WaveformSegment& ppg);

// Raw ridge solution (X^T X + lambda I)^-1 X^T y; no centering. Throws
// SingularSystem when the system is rank deficient.
Eigen::VectorXd ridge_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda);

struct RidgeModel {
  Eigen::RowVectorXd mean, scale;
  Eigen::VectorXd weights;
  double intercept = 0.0;
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
};

// Standardizes features with training statistics and fits the centred target.
RidgeModel fit_standardized_ridge(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda);

constexpr int kProbeFolds = 5;

// Fold index per sample: subjects sorted by a seeded hash, dealt round-robin.
std::vector<int> subject_folds(const std::vector<std::string>& subject_ids, int k, std::uint64_t seed);

struct ProbeResult {
  std::vector<double> per_fold;
  double mean = 0.0;
  double sd = 0.0;
};

ProbeResult probe_regression(const Eigen::MatrixXd& embeddings, const std::vector<double>& targets,
                             const std::vector<std::string>& subject_ids, double lambda, std::uint64_t seed = 77);
ProbeResult probe_classification(const Eigen::MatrixXd& embeddings, const std::vector<int>& labels,
                                 const std::vector<std::string>& subject_ids, double lambda,
                                 std::uint64_t seed = 77);

// Rank statistic; tied scores contribute 1/2. Throws SingleClassFold when a
// class is absent.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

struct EcgTemplate {
  std::vector<double> ppg;  // same window as ecg
  std::vector<double> ecg;
};

struct Reconstruction {
  std::vector<double> ecg;        // model output with the template pasted into its region
  std::vector<double> ppg_input;  // spliced PPG fed to the model
  std::size_t template_samples = 0;
  // Output index i >= template_samples corresponds to incoming PPG index
  // i + incoming_shift.
  std::ptrdiff_t incoming_shift = 0;
};

// Template ECG fills the first three patch positions (visible); the
// incoming PPG is spliced valley-to-valley after the template PPG with a
// 50 ms raised-cosine crossfade. Throws TemplateTooShort, IncompatibleCheckpoint.
Reconstruction reconstruct_ecg_from_ppg(const ModelParams<float>& params, const std::vector<double>& ppg,
                                        const EcgTemplate& tpl, int fs = 100);

// Masked-segment reconstruction: visible ECG patches are kept, masked ones
// come from the model (PPG fully visible for both objectives).
std::vector<double> reconstruct_masked(const ModelParams<float>& params, const std::vector<double>& ppg,
                                       const std::vector<double>& ecg, const MaskSpec& mask);

// Corpus-level suites.
struct EvalSegment {
  std::string subject_id;
  std::string stem;
  WaveformSegment ppg;
  WaveformSegment ecg;
  SegmentMeta meta;
};

// Segments of the listed subjects (all subjects when empty), manifest order.
std::vector<EvalSegment> load_eval_segments(const Manifest& manifest, const std::filesystem::path& data_dir,
                                            const std::vector<std::string>& subjects = {});

struct EvalOptions {
  double mask_ratio = 0.90;
  std::uint64_t seed = 77;
  double probe_lambda = 1.0;
  int threads = 1;
};

struct DelaySuiteResult {
  std::vector<std::string> stems;
  std::vector<double> errors_ms;  // per segment, manifest order
  CdfTable table;
};

DelaySuiteResult run_delay_suite(const ModelParams<float>& params, const std::vector<EvalSegment>& segs,
                                 const EvalOptions& opts);

struct HrvWindow {
  std::string subject_id;
  std::string first_stem;
  HrvComparison cmp;
};

// Consecutive triples of a subject's segments form 30 s windows.
std::vector<HrvWindow> run_hrv_suite(const ModelParams<float>& params, const std::vector<EvalSegment>& segs,
                                     const EvalOptions& opts);

// Fraction of windows where the reconstruction error is <= the PPG error.
double hrv_dominance(const std::vector<HrvWindow>& windows, std::size_t feature);

// Ridge probe of the per-subject delay from frozen PPG embeddings.
ProbeResult run_probe_suite(const ModelParams<float>& params, const std::vector<EvalSegment>& segs,
                            const EvalOptions& opts);

// Template splice per subject: the first 1.2 s of its first segment drive
// the reconstruction of its second segment's PPG. recall_same is the
// fraction of reference R-peaks recovered within kReconToleranceS;
// recall_cross repeats it with the next subject's template.
constexpr double kReconToleranceS = 0.030;

struct ReconRow {
  std::string subject_id;
  std::string stem;
  double recall_same = 0.0;
  double recall_cross = 0.0;
};

std::vector<ReconRow> run_recon_suite(const ModelParams<float>& params, const std::vector<EvalSegment>& segs,
                                      const EvalOptions& opts);

// Fraction of reference beats with a detection within tol (one-to-one, in order).
double beat_recall(const std::vector<double>& reference, const std::vector<double>& detected, double tol);

// Artifact writers.
void write_cdf_csv(const std::filesystem::path& path, const CdfTable& t, const std::string& value_column = "error_ms");
void write_hrv_csv(const std::filesystem::path& path, const std::vector<HrvWindow>& windows);
void write_probe_csv(const std::filesystem::path& path, const ProbeResult& r);
void write_recon_csv(const std::filesystem::path& path, const std::vector<ReconRow>& rows);
// Step-CDF polylines in an 800x600 viewport.
void write_cdf_svg(const std::filesystem::path& path, const std::vector<std::pair<std::string, CdfTable>>& curves,
                   const std::string& x_label);

}  // namespace xmae
