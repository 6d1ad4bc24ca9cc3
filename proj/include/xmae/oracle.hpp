#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace xmae::oracle {

enum class ObsNoise { None, Flip };

// Discrete latent chain observed twice: E_t = g(S_t), P_t = h(S_{t - delay}).
// The latent path runs over 1 - delay .. horizon so every P_t has a source.
// Each modality's alphabet is the sorted set of its emission values; Flip
// noise replaces an emitted symbol by a uniformly chosen other symbol of the
// same alphabet with probability flip_prob.
struct ToyProcess {
  std::vector<std::vector<double>> transition;  // K x K, rows sum to 1
  std::vector<double> initial;                  // law of the first latent state; empty = stationary
  int horizon = 5;
  int delay = 0;
  std::vector<double> emit_ecg;  // state -> value
  std::vector<double> emit_ppg;
  ObsNoise noise = ObsNoise::None;
  double flip_prob = 0.0;

  int n_states() const { return static_cast<int>(transition.size()); }
  int latent_len() const { return horizon + delay; }
  ToyProcess with_delay(int d) const;
  // Throws std::invalid_argument.
  void validate() const;
};

constexpr double kMaxAtoms = 1e7;

std::vector<double> stationary_distribution(const std::vector<std::vector<double>>& transition);

// Nonzero atoms of the joint law of (latent path, E_1..T, P_1..T). Symbols
// are stored as alphabet indices, flattened row-major per atom.
struct JointTable {
  int latent_len = 0;
  int horizon = 0;
  std::vector<double> alphabet_ecg, alphabet_ppg;
  std::vector<std::uint8_t> latent;  // n_atoms x latent_len
  std::vector<std::uint8_t> ecg;     // n_atoms x horizon
  std::vector<std::uint8_t> ppg;
  std::vector<double> prob;

  std::size_t size() const { return prob.size(); }
  double total_mass() const;
  // Law of E_t (0-based t) over alphabet_ecg.
  std::vector<double> ecg_marginal(int t) const;
};

// Worst-case atom count K^(T + delay) * |A_E|^T * |A_P|^T.
double atom_count(const ToyProcess& tp);

// Throws Error(TooLarge) beyond kMaxAtoms.
JointTable enumerate_joint(const ToyProcess& tp);

// Risk of the predictor E[E_masked | P, E_visible] built under
// assumed_delay, scored under the true process; summed over masked
// positions. visible_ecg holds 0-based time indices.
double bayes_risk_cross(const ToyProcess& tp, const std::vector<int>& visible_ecg, int assumed_delay);

struct McEstimate {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

// Same risk estimated by simulating the true process.
McEstimate mc_risk_cross(const ToyProcess& tp, const std::vector<int>& visible_ecg, int assumed_delay,
                         std::size_t n_samples, std::uint64_t seed);

struct MmRisk {
  double with_cross_input = 0.0;  // both modalities conditioned on everything visible
  double unimodal = 0.0;          // each modality from its own visible samples
};

// Sum over both modalities of the masked squared error. Throws
// Error(ConstructionViolation) unless each masked sample is determined by
// the visible samples of its own modality.
MmRisk bayes_risk_mm(const ToyProcess& tp, const std::vector<int>& visible_ecg, const std::vector<int>& visible_ppg);

// Conditional entropy (bits) of the masked samples of one modality given its
// visible ones.
double self_entropy_ecg(const ToyProcess& tp, const std::vector<int>& visible_ecg);
double self_entropy_ppg(const ToyProcess& tp, const std::vector<int>& visible_ppg);

constexpr double kRiskTie = 1e-12;

struct RiskCurve {
  std::vector<int> assumed_delays;
  std::vector<double> risks;
  std::vector<McEstimate> mc;  // filled only by a Monte-Carlo check
  int argmin = 0;
  bool unique = true;  // no other point within kRiskTie of the minimum
};

// Throws std::invalid_argument when the range leaves [0, horizon - 1].
RiskCurve identifiability_scan(const ToyProcess& tp, const std::vector<int>& visible_ecg, int lo, int hi,
                               int threads = 1);

// Appends Monte-Carlo estimates for every point of the curve.
void add_mc_check(RiskCurve& curve, const ToyProcess& tp, const std::vector<int>& visible_ecg, std::size_t n_samples,
                  std::uint64_t seed);

// True iff every point agrees with its estimate within k standard errors
// (exact agreement required when the standard error is zero).
bool mc_agrees(const RiskCurve& curve, double k = 3.0);

// Scenario constructions used by the default oracle run.
ToyProcess informative_process(int horizon = 5, int delay = 2);
ToyProcess period_two_process(int horizon, int delay);
// Every other sample visible, starting at index 0.
std::vector<int> alternating_visible(int horizon);

struct DelaySweep {
  std::vector<int> delays;
  std::vector<MmRisk> risks;
  bool constant = true;  // both columns within kRiskTie across delays
};

DelaySweep symmetric_delay_sweep(const ToyProcess& base, const std::vector<int>& visible_ecg,
                                 const std::vector<int>& visible_ppg, const std::vector<int>& delays);

void write_risk_curve_csv(const std::filesystem::path& path, const RiskCurve& c);
void write_sweep_csv(const std::filesystem::path& path, const DelaySweep& s);

}  // namespace xmae::oracle
