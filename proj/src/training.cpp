#include "xmae/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <numbers>

#include "parallel.hpp"
#include "xmae/error.hpp"
#include "xmae/rng.hpp"
#include "xmae/segment_io.hpp"

namespace xmae {

using detail::parallel_for;

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kTagInit = 0x696e6974;
constexpr std::uint64_t kTagShuffle = 0x73687566;
constexpr std::uint64_t kTagMask = 0x6d61736b;
constexpr std::uint64_t kTagPpgMask = 0x70706d6b;
constexpr std::uint64_t kTagDrop = 0x64726f70;
constexpr std::uint64_t kTagVal = 0x76616c;
constexpr std::uint64_t kTagSplit = 0x73706c74;

// Samples per gradient buffer. Fixed so the reduction order does not depend
// on the thread count.
constexpr std::size_t kChunk = 8;

template <typename T>
double masked_mse_impl(std::span<const T> pred, std::span<const T> target, const std::vector<bool>& mask) {
  if (pred.size() != target.size() || pred.size() != mask.size())
    throw Error(ErrorKind::ShapeMismatch, "masked_mse operands differ in length");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask[i]) continue;
    const double e = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    sum += e * e;
    ++n;
  }
  if (n == 0) throw Error(ErrorKind::EmptyMask, "loss mask selects no samples");
  return sum / static_cast<double>(n);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorKind::Config, "train config: " + m); };
  if (epochs < 1) bad("epochs must be >= 1");
  if (patience < 1 || patience > epochs) bad("patience must be in [1, epochs]");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) bad("warmup_frac must be in (0, 1)");
  if (!(base_lr > 0.0)) bad("base_lr must be positive");
  if (weight_decay < 0.0) bad("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) bad("betas must be in [0, 1)");
  if (!(val_frac >= 0.0 && val_frac < 1.0)) bad("val_frac must be in [0, 1)");
  for (double r : {mask_ratio, mm_ratio_ecg, mm_ratio_ppg, curriculum_state.m_current, curriculum_state.m_max})
    if (!(r > 0.0 && r < 1.0)) bad("mask ratios must be in (0, 1)");
  if (threads < 1) bad("threads must be >= 1");
}

double masked_mse(std::span<const double> pred, std::span<const double> target, const std::vector<bool>& loss_mask) {
  return masked_mse_impl(pred, target, loss_mask);
}

double masked_mse(std::span<const float> pred, std::span<const float> target, const std::vector<bool>& loss_mask) {
  return masked_mse_impl(pred, target, loss_mask);
}

double lr_at_step(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg) {
  if (total_steps < 1 || step < 0 || step >= total_steps)
    throw std::invalid_argument("lr_at_step: step outside [0, total_steps)");
  const auto warm = static_cast<std::int64_t>(std::llround(cfg.warmup_frac * static_cast<double>(total_steps)));
  if (step < warm) return cfg.base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  // Progress reaches exactly 1 on the last step.
  const auto span = total_steps - 1 - warm;
  const double progress = span > 0 ? static_cast<double>(step - warm) / static_cast<double>(span) : 0.0;
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void adamw_update(Mat<T>& p, const Mat<T>& g, Mat<T>& m, Mat<T>& v, std::int64_t t, double lr, bool decay,
                  const TrainConfig& cfg) {
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  m = b1 * m + (T(1) - b1) * g;
  v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  const T step = static_cast<T>(lr);
  const T eps = static_cast<T>(cfg.adam_eps);
  Mat<T> upd = ((m.array() / c1) / ((v.array() / c2).sqrt() + eps)).matrix();
  if (decay && cfg.weight_decay > 0.0) upd += static_cast<T>(cfg.weight_decay) * p;
  p -= step * upd;
}

template void adamw_update<float>(Mat<float>&, const Mat<float>&, Mat<float>&, Mat<float>&, std::int64_t, double,
                                  bool, const TrainConfig&);
template void adamw_update<double>(Mat<double>&, const Mat<double>&, Mat<double>&, Mat<double>&, std::int64_t,
                                   double, bool, const TrainConfig&);

void optimizer_step(ModelParams<float>& params, const ModelParams<float>& grads, OptimState& state, double lr,
                    const TrainConfig& cfg) {
  std::vector<const Mat<float>*> gs;
  grads.for_each([&](const std::string& name, const Mat<float>& g, bool) {
    if (!g.allFinite()) throw Error(ErrorKind::NonFiniteGradient, "non-finite gradient in " + name);
    gs.push_back(&g);
  });
  std::vector<Mat<float>*> ms, vs;
  state.m.for_each([&](const std::string&, Mat<float>& x, bool) { ms.push_back(&x); });
  state.v.for_each([&](const std::string&, Mat<float>& x, bool) { vs.push_back(&x); });
  if (ms.size() != gs.size() || vs.size() != gs.size())
    throw Error(ErrorKind::ShapeMismatch, "optimizer state does not match parameters");
  const std::int64_t t = ++state.step;
  std::size_t i = 0;
  params.for_each([&](const std::string&, Mat<float>& p, bool decay) {
    adamw_update(p, *gs[i], *ms[i], *vs[i], t, lr, decay, cfg);
    ++i;
  });
}

double clip_global_norm(ModelParams<float>& grads, double max_norm) {
  double sq = 0.0;
  grads.for_each([&](const std::string&, const Mat<float>& g, bool) { sq += g.cast<double>().squaredNorm(); });
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    grads.for_each([&](const std::string&, Mat<float>& g, bool) { g *= s; });
  }
  return norm;
}

std::vector<std::string> validation_subjects(const std::vector<std::string>& ids, double val_frac,
                                             std::uint64_t seed) {
  std::vector<std::pair<std::uint64_t, std::string>> keyed;
  for (const auto& id : ids) keyed.emplace_back(derive_seed({seed, kTagSplit, stable_hash(id)}), id);
  std::sort(keyed.begin(), keyed.end());
  auto n_val = static_cast<std::size_t>(std::ceil(val_frac * static_cast<double>(ids.size()) - 1e-9));
  if (ids.size() >= 2 && val_frac > 0.0) n_val = std::max<std::size_t>(n_val, 1);
  n_val = std::min(n_val, ids.size() > 0 ? ids.size() - 1 : 0);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n_val; ++i) out.push_back(keyed[i].second);
  return out;
}

Corpus load_corpus(const Manifest& manifest, const std::filesystem::path& data_dir, const TrainConfig& cfg) {
  std::vector<std::string> ids;
  for (const auto& s : manifest.subjects) ids.push_back(s.profile.subject_id);
  const auto val_ids = validation_subjects(ids, cfg.val_frac, cfg.seed);
  Corpus c;
  for (const auto& s : manifest.subjects) {
    const bool is_val = std::find(val_ids.begin(), val_ids.end(), s.profile.subject_id) != val_ids.end();
    for (const auto& f : s.files) {
      if (cfg.quality_gate && !f.quality_pass) continue;
      TrainSample ts;
      ts.subject_id = s.profile.subject_id;
      ts.stem = f.stem;
      const auto ppg = read_xseg(data_dir / f.ppg_file);
      const auto ecg = read_xseg(data_dir / f.ecg_file);
      ts.ppg.assign(ppg.samples.begin(), ppg.samples.end());
      ts.ecg.assign(ecg.samples.begin(), ecg.samples.end());
      (is_val ? c.val : c.train).push_back(std::move(ts));
    }
  }
  if (c.train.empty()) throw Error(ErrorKind::NoPairs, "no training pairs after the quality gate");
  return c;
}

std::string format_log_csv(const std::vector<EpochLog>& log, bool include_seconds) {
  std::string out = include_seconds ? "epoch,train_loss,val_loss,mask_ratio,lr,seconds\n"
                                    : "epoch,train_loss,val_loss,mask_ratio,lr\n";
  for (const auto& e : log) {
    out += std::to_string(e.epoch) + "," + fmt("%.9g", e.train_loss) + "," + fmt("%.9g", e.val_loss) + "," +
           fmt("%.4f", e.mask_ratio) + "," + fmt("%.9g", e.lr);
    if (include_seconds) out += "," + fmt("%.3f", e.seconds);
    out += "\n";
  }
  return out;
}

namespace {

struct SampleMasks {
  MaskSpec ecg;
  MaskSpec ppg;  // baseline only
};

SampleMasks draw_masks(const TrainConfig& cfg, std::size_t n_patches, double ecg_ratio, std::uint64_t seed) {
  SampleMasks m;
  if (cfg.objective == Objective::Xmae) {
    m.ecg = make_mask(cfg.mask_mode, n_patches, ecg_ratio, derive_seed({seed, kTagMask}));
  } else {
    m.ecg = random_mask(n_patches, cfg.mm_ratio_ecg, derive_seed({seed, kTagMask}));
    m.ppg = random_mask(n_patches, cfg.mm_ratio_ppg, derive_seed({seed, kTagPpgMask}));
  }
  return m;
}

float sample_loss_and_grad(const ModelParams<float>& p, const TrainSample& s, const SampleMasks& m,
                           const ForwardOptions& fo, ModelParams<float>& g, float weight) {
  std::span<const float> ppg(s.ppg), ecg(s.ecg);
  if (p.objective == Objective::Xmae) return xmae_loss_and_grad<float>(p, ppg, ecg, m.ecg, fo, g, weight);
  return mm_loss_and_grad<float>(p, ppg, ecg, m.ecg, m.ppg, fo, g, weight);
}

double sample_loss(const ModelParams<float>& p, const TrainSample& s, const SampleMasks& m) {
  std::span<const float> ppg(s.ppg), ecg(s.ecg);
  ForwardOptions fo;
  if (p.objective == Objective::Xmae) {
    std::vector<bool> lm;
    const auto hat = forward_xmae<float>(p, ppg, ecg, m.ecg, fo, &lm);
    return masked_mse(std::span<const float>(hat), ecg, lm);
  }
  const auto out = forward_mm<float>(p, ppg, ecg, m.ecg, m.ppg, fo);
  return masked_mse(std::span<const float>(out.ppg_hat), ppg, out.ppg_loss_mask) +
         masked_mse(std::span<const float>(out.ecg_hat), ecg, out.ecg_loss_mask);
}

}  // namespace

double validation_loss(const ModelParams<float>& params, const std::vector<TrainSample>& val, double ecg_ratio,
                       const TrainConfig& cfg) {
  if (val.empty()) throw Error(ErrorKind::NoPairs, "validation split is empty");
  std::vector<double> losses(val.size());
  const auto n_patches = static_cast<std::size_t>(params.config.n_patches());
  parallel_for(val.size(), cfg.threads, [&](std::size_t i) {
    losses[i] = sample_loss(params, val[i], draw_masks(cfg, n_patches, ecg_ratio, derive_seed({cfg.seed, kTagVal, i})));
  });
  double sum = 0.0;
  for (double l : losses) sum += l;
  return sum / static_cast<double>(val.size());
}

TrainResult train(const Corpus& corpus, const TrainConfig& cfg, const ModelConfig& mcfg, const EpochCallback& on_epoch) {
  cfg.validate();
  mcfg.validate();
  if (corpus.train.empty()) throw Error(ErrorKind::NoPairs, "empty training split");
  TrainResult res{init_params<float>(mcfg, cfg.objective, derive_seed({cfg.seed, kTagInit})), {}, {}, 0, false};
  res.optim = make_optim_state(res.params);
  auto& params = res.params;
  const auto n_patches = static_cast<std::size_t>(mcfg.n_patches());
  const std::size_t n = corpus.train.size();
  const auto bsz = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (n + bsz - 1) / bsz;
  const auto total_steps = static_cast<std::int64_t>(steps_per_epoch) * cfg.epochs;

  CurriculumState cur = cfg.curriculum_state;
  const bool use_curriculum = cfg.curriculum && cfg.objective == Objective::Xmae;
  double ratio = cfg.objective == Objective::Xmae ? (use_curriculum ? cur.m_current : cfg.mask_ratio) : cfg.mm_ratio_ecg;

  std::vector<ModelParams<float>> chunk_grads((std::min(bsz, n) + kChunk - 1) / kChunk, params.zeros_like());
  ModelParams<float> grads = params.zeros_like();
  std::vector<float> losses(bsz);
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::int64_t global_step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuf(derive_seed({cfg.seed, kTagShuffle, static_cast<std::uint64_t>(epoch)}));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuf.below(i)]);

    double epoch_loss = 0.0;
    double lr = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++global_step) {
      const std::size_t lo = s * bsz, hi = std::min(n, lo + bsz);
      const std::size_t count = hi - lo;
      const std::size_t n_chunks = (count + kChunk - 1) / kChunk;
      const float weight = 1.0f / static_cast<float>(count);
      parallel_for(n_chunks, cfg.threads, [&](std::size_t c) {
        auto& g = chunk_grads[c];
        g.set_zero();
        for (std::size_t k = lo + c * kChunk; k < std::min(hi, lo + (c + 1) * kChunk); ++k) {
          const std::size_t idx = order[k];
          const std::uint64_t sseed =
              derive_seed({cfg.seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(idx)});
          ForwardOptions fo{true, derive_seed({sseed, kTagDrop})};
          losses[k - lo] = sample_loss_and_grad(params, corpus.train[idx], draw_masks(cfg, n_patches, ratio, sseed),
                                                fo, g, weight);
        }
      });
      grads.set_zero();
      std::vector<Mat<float>*> dst;
      grads.for_each([&](const std::string&, Mat<float>& m, bool) { dst.push_back(&m); });
      for (std::size_t c = 0; c < n_chunks; ++c) {
        std::size_t i = 0;
        chunk_grads[c].for_each([&](const std::string&, const Mat<float>& m, bool) { *dst[i++] += m; });
      }
      double batch_loss = 0.0;
      for (std::size_t k = 0; k < count; ++k) batch_loss += losses[k];
      if (!std::isfinite(batch_loss))
        throw Error(ErrorKind::NonFiniteLoss, "non-finite loss at step " + std::to_string(global_step));
      epoch_loss += batch_loss;
      clip_global_norm(grads, cfg.clip_norm);
      lr = lr_at_step(global_step, total_steps, cfg);
      try {
        optimizer_step(params, grads, res.optim, lr, cfg);
      } catch (const Error& e) {
        throw Error(e.kind(), std::string(e.what()) + " at step " + std::to_string(global_step));
      }
    }

    EpochLog row;
    row.epoch = epoch;
    row.train_loss = epoch_loss / static_cast<double>(n);
    row.val_loss = corpus.val.empty() ? row.train_loss : validation_loss(params, corpus.val, ratio, cfg);
    row.mask_ratio = ratio;
    row.lr = lr;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.push_back(row);
    if (on_epoch) on_epoch(row, params);

    if (use_curriculum) {
      cur = curriculum_update(cur, row.val_loss);
      ratio = cur.m_current;
    }
    if (row.val_loss < best_val) {
      best_val = row.val_loss;
      res.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best == cfg.patience) {
      res.early_stopped = true;
      break;
    }
  }
  return res;
}

TrainResult train_to_dir(const Manifest& manifest, const std::filesystem::path& data_dir, const TrainConfig& cfg,
                         const ModelConfig& mcfg, const std::filesystem::path& out_dir) {
  const Corpus corpus = load_corpus(manifest, data_dir, cfg);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create " + out_dir.string());
  auto res = train(corpus, cfg, mcfg, [](const EpochLog& e, const ModelParams<float>&) {
    std::cerr << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << " ratio "
              << e.mask_ratio << " (" << fmt("%.1f", e.seconds) << " s)\n";
  });
  save_checkpoint(out_dir / "checkpoint.bin", res.params, &res.optim);
  const auto csv = format_log_csv(res.log);
  write_file_bytes(out_dir / "train_log.csv",
                   std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
  return res;
}

int default_thread_count() {
  if (const char* env = std::getenv("XMAE_THREADS")) {
    try {
      const int t = std::stoi(env);
      if (t >= 1) return t;
    } catch (const std::exception&) {
    }
    throw Error(ErrorKind::Config, std::string("XMAE_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

constexpr double kGradFloor = 1e-6;

GradCheckReport grad_check(const ModelConfig& cfg, std::uint64_t seed, const GradCheckOptions& opts) {
  ModelParams<double> p = init_params<double>(cfg, opts.objective, seed);
  // Move off the symmetric initial point so every path carries gradient.
  Rng rng(derive_seed({seed, 0x6763}));
  p.for_each([&](const std::string&, Mat<double>& m, bool) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += 0.3 * rng.normal();
  });
  const auto L = static_cast<std::size_t>(cfg.seq_len);
  const auto N = static_cast<std::size_t>(cfg.n_patches());
  std::vector<double> ppg(L), ecg(L);
  for (auto& x : ppg) x = rng.normal();
  for (auto& x : ecg) x = rng.normal();
  const MaskSpec mask_e = opts.objective == Objective::Xmae ? contiguous_mask(N, 0.5, derive_seed({seed, 1}))
                                                            : random_mask(N, 0.5, derive_seed({seed, 1}));
  const MaskSpec mask_p = random_mask(N, 0.25, derive_seed({seed, 2}));
  // Dropout stays on with a fixed seed: its masks do not depend on values.
  const ForwardOptions fo{true, derive_seed({seed, 3})};

  auto loss = [&](const ModelParams<double>& q) {
    if (opts.objective == Objective::Xmae) {
      std::vector<bool> lm;
      const auto hat = forward_xmae<double>(q, ppg, ecg, mask_e, fo, &lm);
      return masked_mse(std::span<const double>(hat), ecg, lm);
    }
    const auto out = forward_mm<double>(q, ppg, ecg, mask_e, mask_p, fo);
    return masked_mse(std::span<const double>(out.ppg_hat), ppg, out.ppg_loss_mask) +
           masked_mse(std::span<const double>(out.ecg_hat), ecg, out.ecg_loss_mask);
  };

  ModelParams<double> g = p.zeros_like();
  GradExtras<double> ex;
  ex.faults = opts.faults;
  if (opts.objective == Objective::Xmae)
    xmae_loss_and_grad<double>(p, ppg, ecg, mask_e, fo, g, 1.0, &ex);
  else
    mm_loss_and_grad<double>(p, ppg, ecg, mask_e, mask_p, fo, g, 1.0, &ex);

  std::vector<Mat<double>*> gs;
  g.for_each([&](const std::string&, Mat<double>& m, bool) { gs.push_back(&m); });
  GradCheckReport rep;
  std::size_t ti = 0;
  p.for_each([&](const std::string& name, Mat<double>& m, bool) {
    const Mat<double>& a = *gs[ti++];
    Mat<double> num(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double x0 = m.data()[i];
      m.data()[i] = x0 + opts.h;
      const double fp = loss(p);
      m.data()[i] = x0 - opts.h;
      const double fm = loss(p);
      m.data()[i] = x0;
      num.data()[i] = (fp - fm) / (2.0 * opts.h);
    }
    // Floor well above finite-difference round-off (~1e-12) so tensors whose
    // true gradient vanishes (key biases: softmax is shift invariant) compare
    // by absolute error.
    const double denom = std::max(a.norm() + num.norm(), kGradFloor);
    const double rel = (a - num).norm() / denom;
    rep.per_tensor.emplace_back(name, rel);
    if (rel > rep.max_rel_error || rep.worst_tensor.empty()) {
      rep.max_rel_error = std::max(rep.max_rel_error, rel);
      rep.worst_tensor = name;
    }
  });
  return rep;
}

}  // namespace xmae
