#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xmae/checkpoint.hpp"
#include "xmae/masking.hpp"
#include "xmae/model.hpp"
#include "xmae/synthgen.hpp"

namespace xmae {

struct TrainConfig {
  int epochs = 37;
  int patience = 17;
  int batch_size = 64;
  double base_lr = 3e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double warmup_frac = 0.10;
  double clip_norm = 1.0;  // global gradient norm cap; <= 0 disables
  std::uint64_t seed = 77;
  Objective objective = Objective::Xmae;
  bool curriculum = true;
  MaskMode mask_mode = MaskMode::Contiguous;
  double mask_ratio = 0.90;  // fixed ratio when the curriculum is off
  CurriculumState curriculum_state;
  double mm_ratio_ecg = 0.90;
  double mm_ratio_ppg = 0.60;
  double val_frac = 0.10;
  bool quality_gate = true;  // train only on pairs that passed the quality check
  int threads = 1;

  // Throws Error(Config) when invariants fail.
  void validate() const;
};

double masked_mse(std::span<const double> pred, std::span<const double> target, const std::vector<bool>& loss_mask);
double masked_mse(std::span<const float> pred, std::span<const float> target, const std::vector<bool>& loss_mask);

// Linear warmup over round(warmup_frac * total) steps, cosine decay to 0 after.
double lr_at_step(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg);

// Decoupled-decay Adam update of one tensor at 1-based step t.
template <typename T>
void adamw_update(Mat<T>& p, const Mat<T>& g, Mat<T>& m, Mat<T>& v, std::int64_t t, double lr, bool decay,
                  const TrainConfig& cfg);

// Applies adamw_update to every tensor; decay touches only Linear weight
// matrices. Throws NonFiniteGradient naming the first bad tensor before
// changing anything.
void optimizer_step(ModelParams<float>& params, const ModelParams<float>& grads, OptimState& state, double lr,
                    const TrainConfig& cfg);

// Scales grads so the global L2 norm is at most max_norm; returns the norm before scaling.
double clip_global_norm(ModelParams<float>& grads, double max_norm);

struct TrainSample {
  std::string subject_id;
  std::string stem;
  std::vector<float> ppg;
  std::vector<float> ecg;
};

struct Corpus {
  std::vector<TrainSample> train;
  std::vector<TrainSample> val;
};

// Subjects ordered by a seeded hash; the first ceil(val_frac * n) form the
// validation split (at least one when n >= 2).
std::vector<std::string> validation_subjects(const std::vector<std::string>& subject_ids, double val_frac,
                                             std::uint64_t seed);

Corpus load_corpus(const Manifest& manifest, const std::filesystem::path& data_dir, const TrainConfig& cfg);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double mask_ratio = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  ModelParams<float> params;
  OptimState optim;
  std::vector<EpochLog> log;
  int best_epoch = 0;
  bool early_stopped = false;
};

// Log CSV with header epoch,train_loss,val_loss,mask_ratio,lr,seconds.
std::string format_log_csv(const std::vector<EpochLog>& log, bool include_seconds = true);

// Validation loss with dropout off and masks drawn from a fixed seed.
double validation_loss(const ModelParams<float>& params, const std::vector<TrainSample>& val, double ecg_ratio,
                       const TrainConfig& cfg);

// Called after each epoch with the log row and the current parameters.
using EpochCallback = std::function<void(const EpochLog&, const ModelParams<float>&)>;

TrainResult train(const Corpus& corpus, const TrainConfig& cfg, const ModelConfig& mcfg,
                  const EpochCallback& on_epoch = {});

// Writes checkpoint.bin and train_log.csv into out_dir.
TrainResult train_to_dir(const Manifest& manifest, const std::filesystem::path& data_dir, const TrainConfig& cfg,
                         const ModelConfig& mcfg, const std::filesystem::path& out_dir);

// Thread count from XMAE_THREADS when set, else 1.
int default_thread_count();

struct GradCheckOptions {
  Objective objective = Objective::Xmae;
  BackwardFaults faults;
  double h = 1e-4;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::vector<std::pair<std::string, double>> per_tensor;
};

// Central finite differences against the analytic gradient of the masked
// loss, in double precision, over every parameter tensor.
GradCheckReport grad_check(const ModelConfig& cfg, std::uint64_t seed, const GradCheckOptions& opts = {});

}  // namespace xmae
