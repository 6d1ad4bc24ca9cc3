#include "xmae/evalkit.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>

#include "parallel.hpp"
#include "xmae/error.hpp"
#include "xmae/rng.hpp"

namespace xmae {

DelayEstimate estimate_delay(const std::vector<double>& rpeaks, const std::vector<double>& onsets) {
  DelayEstimate d;
  std::size_t j = 0;
  for (double r : rpeaks) {
    while (j < onsets.size() && onsets[j] <= r) {
      ++d.n_unpaired;
      ++j;
    }
    if (j < onsets.size() && onsets[j] <= r + kPairWindowS) {
      d.per_beat_delays_ms.push_back((onsets[j] - r) * 1000.0);
      ++j;
    } else {
      ++d.n_unpaired;
    }
  }
  d.n_unpaired += onsets.size() - j;
  d.n_paired = d.per_beat_delays_ms.size();
  if (d.n_paired == 0) throw Error(ErrorKind::NoPairs, "no R-peak has an onset within 500 ms");
  d.mean_ms = std::accumulate(d.per_beat_delays_ms.begin(), d.per_beat_delays_ms.end(), 0.0) /
              static_cast<double>(d.n_paired);
  return d;
}

double median_of(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

CdfTable empirical_cdf(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("CDF of an empty list");
  CdfTable t;
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) t.cdf.push_back(static_cast<double>(k + 1) / n);
  t.median = median_of(values);
  t.values = std::move(values);
  return t;
}

CdfTable delay_error_table(const std::vector<DelayPair>& pairs) {
  std::vector<double> err;
  for (const auto& p : pairs) err.push_back(p.rec ? std::abs(p.gt.mean_ms - p.rec->mean_ms) : kUnpairedErrorMs);
  return empirical_cdf(std::move(err));
}

std::array<double, 6> HrvFeatures::as_array() const {
  return {median_nn_ms, sdnn_ms, rmssd_ms, pnn20_pct, pnn50_pct, shannon_entropy_bits};
}

HrvFeatures hrv_features_from_nn(const std::vector<double>& nn) {
  if (nn.size() < 2) throw Error(ErrorKind::TooFewBeats, "need at least 3 beats");
  HrvFeatures f;
  const auto n = static_cast<double>(nn.size());
  f.median_nn_ms = median_of(nn);
  const double mean = std::accumulate(nn.begin(), nn.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : nn) ss += (x - mean) * (x - mean);
  f.sdnn_ms = std::sqrt(ss / n);

  double sq = 0.0;
  std::size_t over20 = 0, over50 = 0;
  for (std::size_t i = 1; i < nn.size(); ++i) {
    const double d = nn[i] - nn[i - 1];
    sq += d * d;
    over20 += std::abs(d) > 20.0;
    over50 += std::abs(d) > 50.0;
  }
  const auto m = static_cast<double>(nn.size() - 1);
  f.rmssd_ms = std::sqrt(sq / m);
  f.pnn20_pct = 100.0 * static_cast<double>(over20) / m;
  f.pnn50_pct = 100.0 * static_cast<double>(over50) / m;

  const auto n_bins = static_cast<std::size_t>(std::ceil((kShanEnHiMs - kShanEnLoMs) / kShanEnBinMs));
  std::map<std::size_t, std::size_t> hist;
  for (double x : nn) {
    const double pos = std::floor((x - kShanEnLoMs) / kShanEnBinMs);
    const auto b = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(n_bins - 1)));
    ++hist[b];
  }
  double h = 0.0;
  for (const auto& [b, c] : hist) {
    const double p = static_cast<double>(c) / n;
    h -= p * std::log2(p);
  }
  f.shannon_entropy_bits = h;
  return f;
}

HrvFeatures hrv_features(const std::vector<double>& beats) {
  if (beats.size() < 3) throw Error(ErrorKind::TooFewBeats, "need at least 3 beats, got " + std::to_string(beats.size()));
  std::vector<double> nn;
  for (std::size_t i = 1; i < beats.size(); ++i) nn.push_back((beats[i] - beats[i - 1]) * 1000.0);
  return hrv_features_from_nn(nn);
}

HrvComparison hrv_error_comparison(const WaveformSegment& gt_ecg, const WaveformSegment& rec_ecg,
                                   const WaveformSegment& ppg) {
  if (gt_ecg.samples.size() != rec_ecg.samples.size() || gt_ecg.samples.size() * ppg.fs != ppg.samples.size() * gt_ecg.fs)
    throw Error(ErrorKind::ShapeMismatch, "HRV inputs must cover the same span");
  HrvComparison c;
  c.gt = hrv_features(detect_r_peaks(gt_ecg));
  c.rec = hrv_features(detect_r_peaks(rec_ecg));
  c.ppg = hrv_features(detect_ppg_onsets(ppg));
  const auto g = c.gt.as_array(), r = c.rec.as_array(), p = c.ppg.as_array();
  for (std::size_t i = 0; i < g.size(); ++i) {
    c.rec_abs_error[i] = std::abs(r[i] - g[i]);
    c.ppg_abs_error[i] = std::abs(p[i] - g[i]);
  }
  return c;
}

Eigen::VectorXd ridge_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda) {
  if (x.rows() != y.size()) throw Error(ErrorKind::ShapeMismatch, "ridge: X and y row counts differ");
  Eigen::MatrixXd a = x.transpose() * x;
  a.diagonal().array() += lambda;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  if (lu.rank() < a.rows()) throw Error(ErrorKind::SingularSystem, "ridge normal equations are singular");
  return lu.solve(x.transpose() * y);
}

Eigen::VectorXd RidgeModel::predict(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd z = (x.rowwise() - mean).array().rowwise() / scale.array();
  return (z * weights).array() + intercept;
}

RidgeModel fit_standardized_ridge(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda) {
  RidgeModel m;
  m.mean = x.colwise().mean();
  Eigen::MatrixXd xc = x.rowwise() - m.mean;
  m.scale = (xc.array().square().colwise().sum() / static_cast<double>(x.rows())).sqrt();
  for (Eigen::Index j = 0; j < m.scale.size(); ++j)
    if (m.scale(j) < 1e-12) m.scale(j) = 1.0;
  Eigen::MatrixXd z = xc.array().rowwise() / m.scale.array();
  m.intercept = y.mean();
  m.weights = ridge_fit(z, (y.array() - m.intercept).matrix(), lambda);
  return m;
}

std::vector<int> subject_folds(const std::vector<std::string>& ids, int k, std::uint64_t seed) {
  std::vector<std::string> uniq(ids);
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<std::pair<std::uint64_t, std::string>> keyed;
  for (const auto& id : uniq) keyed.emplace_back(derive_seed({seed, stable_hash(id)}), id);
  std::sort(keyed.begin(), keyed.end());
  std::map<std::string, int> fold;
  for (std::size_t i = 0; i < keyed.size(); ++i) fold[keyed[i].second] = static_cast<int>(i % static_cast<std::size_t>(k));
  std::vector<int> out;
  for (const auto& id : ids) out.push_back(fold[id]);
  return out;
}

namespace {

ProbeResult summarize(std::vector<double> per_fold) {
  ProbeResult r;
  const auto n = static_cast<double>(per_fold.size());
  r.mean = std::accumulate(per_fold.begin(), per_fold.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : per_fold) ss += (v - r.mean) * (v - r.mean);
  r.sd = per_fold.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;  // sample sd across folds
  r.per_fold = std::move(per_fold);
  return r;
}

void check_probe_inputs(const Eigen::MatrixXd& x, std::size_t n_targets, const std::vector<std::string>& ids) {
  if (static_cast<std::size_t>(x.rows()) != n_targets || ids.size() != n_targets)
    throw Error(ErrorKind::ShapeMismatch, "probe inputs disagree in length");
  std::vector<std::string> u(ids);
  std::sort(u.begin(), u.end());
  if (std::unique(u.begin(), u.end()) - u.begin() < 10)
    throw std::invalid_argument("probe needs at least 10 subjects");
}

template <typename Fn>
std::vector<double> run_folds(const std::vector<std::string>& ids, std::uint64_t seed,
                              Fn&& fold_metric) {
  const auto folds = subject_folds(ids, kProbeFolds, seed);
  std::vector<double> out;
  for (int f = 0; f < kProbeFolds; ++f) {
    std::vector<Eigen::Index> tr, te;
    for (std::size_t i = 0; i < folds.size(); ++i) (folds[i] == f ? te : tr).push_back(static_cast<Eigen::Index>(i));
    out.push_back(fold_metric(tr, te));
  }
  return out;
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
  return out;
}

}  // namespace

ProbeResult probe_regression(const Eigen::MatrixXd& emb, const std::vector<double>& targets,
                             const std::vector<std::string>& ids, double lambda, std::uint64_t seed) {
  check_probe_inputs(emb, targets.size(), ids);
  auto per_fold = run_folds(ids, seed, [&](const auto& tr, const auto& te) {
    Eigen::VectorXd ytr(static_cast<Eigen::Index>(tr.size()));
    for (std::size_t i = 0; i < tr.size(); ++i) ytr(static_cast<Eigen::Index>(i)) = targets[tr[i]];
    const auto model = fit_standardized_ridge(take_rows(emb, tr), ytr, lambda);
    const Eigen::VectorXd pred = model.predict(take_rows(emb, te));
    double mae = 0.0;
    for (std::size_t i = 0; i < te.size(); ++i) mae += std::abs(pred(static_cast<Eigen::Index>(i)) - targets[te[i]]);
    return mae / static_cast<double>(te.size());
  });
  return summarize(std::move(per_fold));
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw Error(ErrorKind::ShapeMismatch, "scores and labels differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) rank_sum += avg_rank;
    i = j;
  }
  for (int l : labels) n_pos += l != 0;
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error(ErrorKind::SingleClassFold, "AUROC needs both classes");
  const auto p = static_cast<double>(n_pos), q = static_cast<double>(n_neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

ProbeResult probe_classification(const Eigen::MatrixXd& emb, const std::vector<int>& labels,
                                 const std::vector<std::string>& ids, double lambda, std::uint64_t seed) {
  check_probe_inputs(emb, labels.size(), ids);
  auto per_fold = run_folds(ids, seed, [&](const auto& tr, const auto& te) {
    Eigen::VectorXd ytr(static_cast<Eigen::Index>(tr.size()));
    bool has[2] = {false, false};
    for (std::size_t i = 0; i < tr.size(); ++i) {
      const int l = labels[tr[i]] != 0;
      has[l] = true;
      ytr(static_cast<Eigen::Index>(i)) = l ? 1.0 : -1.0;
    }
    if (!has[0] || !has[1]) throw Error(ErrorKind::SingleClassFold, "a training fold holds a single class");
    const auto model = fit_standardized_ridge(take_rows(emb, tr), ytr, lambda);
    const Eigen::VectorXd pred = model.predict(take_rows(emb, te));
    std::vector<double> s(pred.data(), pred.data() + pred.size());
    std::vector<int> l;
    for (auto i : te) l.push_back(labels[i] != 0);
    return auroc(s, l);
  });
  return summarize(std::move(per_fold));
}

namespace {

std::vector<float> to_float(const std::vector<double>& x) { return {x.begin(), x.end()}; }

std::size_t last_valley(const std::vector<double>& ppg, int fs) {
  WaveformSegment s{ppg, fs, Modality::PPG, "", 0.0};
  const auto on = ppg_onset_indices(s);
  if (!on.empty()) return on.back();
  return static_cast<std::size_t>(std::min_element(ppg.begin(), ppg.end()) - ppg.begin());
}

std::size_t first_valley(const std::vector<double>& ppg, int fs) {
  WaveformSegment s{ppg, fs, Modality::PPG, "", 0.0};
  const auto on = ppg_onset_indices(s);
  if (!on.empty()) return on.front();
  return 0;
}

}  // namespace

Reconstruction reconstruct_ecg_from_ppg(const ModelParams<float>& params, const std::vector<double>& ppg,
                                        const EcgTemplate& tpl, int fs) {
  if (params.objective != Objective::Xmae)
    throw Error(ErrorKind::IncompatibleCheckpoint, "reconstruction needs an xmae checkpoint");
  const auto& c = params.config;
  const auto L = static_cast<std::size_t>(c.seq_len);
  const auto P = static_cast<std::size_t>(c.patch_len);
  const std::size_t T = 3 * P;
  if (tpl.ecg.size() < T || tpl.ppg.size() < T)
    throw Error(ErrorKind::TemplateTooShort, "template must cover 3 patches (" + std::to_string(T) + " samples)");
  if (ppg.empty()) throw Error(ErrorKind::ShapeMismatch, "empty incoming PPG");

  const std::vector<double> tpl_ppg(tpl.ppg.begin(), tpl.ppg.begin() + static_cast<std::ptrdiff_t>(T));
  const std::size_t vt = last_valley(tpl_ppg, fs);
  const std::size_t vi = first_valley(ppg, fs);
  const auto shift = static_cast<std::ptrdiff_t>(vi) - static_cast<std::ptrdiff_t>(vt);
  auto incoming = [&](std::size_t pos) {
    const std::ptrdiff_t j = static_cast<std::ptrdiff_t>(pos) + shift;
    if (j < 0) return ppg.front();
    return ppg[std::min(static_cast<std::size_t>(j), ppg.size() - 1)];
  };

  Reconstruction out;
  out.template_samples = T;
  out.incoming_shift = shift;
  out.ppg_input.resize(L);
  const auto half = static_cast<std::ptrdiff_t>(std::max<long>(1, std::lround(0.025 * fs)));
  for (std::size_t pos = 0; pos < L; ++pos) {
    const auto d = static_cast<std::ptrdiff_t>(pos) - static_cast<std::ptrdiff_t>(vt);
    if (d < -half) {
      out.ppg_input[pos] = tpl_ppg[pos];
    } else if (d >= half || pos >= T) {
      out.ppg_input[pos] = incoming(pos);
    } else {
      const double w = 0.5 * (1.0 - std::cos(std::numbers::pi * (static_cast<double>(d + half) + 0.5) /
                                             static_cast<double>(2 * half)));
      out.ppg_input[pos] = (1.0 - w) * tpl_ppg[pos] + w * incoming(pos);
    }
  }

  std::vector<double> ecg_in(L, 0.0);
  std::copy(tpl.ecg.begin(), tpl.ecg.begin() + static_cast<std::ptrdiff_t>(T), ecg_in.begin());
  MaskSpec mask;
  mask.visible.assign(static_cast<std::size_t>(c.n_patches()), false);
  for (std::size_t i = 0; i < 3; ++i) mask.visible[i] = true;
  mask.ratio = static_cast<double>(mask.masked_count()) / static_cast<double>(mask.n_patches());

  const auto pf = to_float(out.ppg_input), ef = to_float(ecg_in);
  const auto hat = forward_xmae<float>(params, pf, ef, mask, ForwardOptions{});
  out.ecg.assign(hat.begin(), hat.end());
  std::copy(ecg_in.begin(), ecg_in.begin() + static_cast<std::ptrdiff_t>(T), out.ecg.begin());
  return out;
}

std::vector<double> reconstruct_masked(const ModelParams<float>& params, const std::vector<double>& ppg,
                                       const std::vector<double>& ecg, const MaskSpec& mask) {
  const auto pf = to_float(ppg), ef = to_float(ecg);
  std::vector<float> hat;
  if (params.objective == Objective::Xmae) {
    hat = forward_xmae<float>(params, pf, ef, mask, ForwardOptions{});
  } else {
    MaskSpec all;
    all.visible.assign(mask.n_patches(), true);
    hat = forward_mm<float>(params, pf, ef, mask, all, ForwardOptions{}).ecg_hat;
  }
  std::vector<double> out(hat.begin(), hat.end());
  const auto vis = expand_to_samples(mask, static_cast<std::size_t>(params.config.patch_len));
  for (std::size_t i = 0; i < out.size(); ++i)
    if (vis[i]) out[i] = ecg[i];
  return out;
}

std::vector<EvalSegment> load_eval_segments(const Manifest& manifest, const std::filesystem::path& dir,
                                            const std::vector<std::string>& subjects) {
  std::vector<EvalSegment> out;
  for (const auto& s : manifest.subjects) {
    const auto& id = s.profile.subject_id;
    if (!subjects.empty() && std::find(subjects.begin(), subjects.end(), id) == subjects.end()) continue;
    for (const auto& f : s.files) {
      EvalSegment e;
      e.subject_id = id;
      e.stem = f.stem;
      e.ppg = load_segment(dir / f.ppg_file, &e.meta);
      e.ecg = read_xseg(dir / f.ecg_file);
      e.ecg.subject_id = id;
      out.push_back(std::move(e));
    }
  }
  return out;
}

namespace {

MaskSpec eval_mask(const ModelParams<float>& p, const EvalSegment& s, const EvalOptions& o) {
  return contiguous_mask(static_cast<std::size_t>(p.config.n_patches()), o.mask_ratio,
                         derive_seed({o.seed, stable_hash(s.stem), stable_hash(s.subject_id)}));
}

WaveformSegment with_samples(const WaveformSegment& like, std::vector<double> x) {
  WaveformSegment s = like;
  s.samples = std::move(x);
  return s;
}

}  // namespace

DelaySuiteResult run_delay_suite(const ModelParams<float>& params, const std::vector<EvalSegment>& segs,
                                 const EvalOptions& opts) {
  std::vector<std::optional<DelayPair>> pairs(segs.size());
  detail::parallel_for(segs.size(), opts.threads, [&](std::size_t i) {
    const auto& s = segs[i];
    const auto onsets = detect_ppg_onsets(s.ppg);
    DelayPair dp;
    try {
      dp.gt = estimate_delay(detect_r_peaks(s.ecg), onsets);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NoPairs) throw;
      return;  // no usable ground truth
    }
    const auto rec = with_samples(s.ecg, reconstruct_masked(params, s.ppg.samples, s.ecg.samples, eval_mask(params, s, opts)));
    try {
      dp.rec = estimate_delay(detect_r_peaks(rec), onsets);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NoPairs) throw;
    }
    pairs[i] = std::move(dp);
  });
  DelaySuiteResult r;
  std::vector<DelayPair> kept;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    if (!pairs[i]) continue;
    r.stems.push_back(segs[i].stem);
    const auto& p = *pairs[i];
    r.errors_ms.push_back(p.rec ? std::abs(p.gt.mean_ms - p.rec->mean_ms) : kUnpairedErrorMs);
    kept.push_back(p);
  }
  if (kept.empty()) throw Error(ErrorKind::NoPairs, "no segment produced a ground-truth delay");
  r.table = delay_error_table(kept);
  return r;
}

std::vector<HrvWindow> run_hrv_suite(const ModelParams<float>& params, const std::vector<EvalSegment>& segs,
                                     const EvalOptions& opts) {
  // Group consecutive segments of one subject into triples.
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < segs.size();) {
    std::size_t j = i;
    while (j < segs.size() && segs[j].subject_id == segs[i].subject_id) ++j;
    for (std::size_t k = i; k + 3 <= j; k += 3) groups.push_back({k, k + 1, k + 2});
    i = j;
  }
  std::vector<std::optional<HrvWindow>> out(groups.size());
  detail::parallel_for(groups.size(), opts.threads, [&](std::size_t g) {
    std::vector<double> gt, rec, ppg;
    for (auto i : groups[g]) {
      const auto& s = segs[i];
      const auto r = reconstruct_masked(params, s.ppg.samples, s.ecg.samples, eval_mask(params, s, opts));
      gt.insert(gt.end(), s.ecg.samples.begin(), s.ecg.samples.end());
      rec.insert(rec.end(), r.begin(), r.end());
      ppg.insert(ppg.end(), s.ppg.samples.begin(), s.ppg.samples.end());
    }
    const auto& first = segs[groups[g][0]];
    HrvWindow w{first.subject_id, first.stem, {}};
    try {
      w.cmp.gt = hrv_features(detect_r_peaks(with_samples(first.ecg, gt)));
      w.cmp.ppg = hrv_features(detect_ppg_onsets(with_samples(first.ppg, ppg)));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::TooFewBeats) throw;
      return;  // window without usable reference beats
    }
    const auto gta = w.cmp.gt.as_array(), ppa = w.cmp.ppg.as_array();
    try {
      w.cmp.rec = hrv_features(detect_r_peaks(with_samples(first.ecg, rec)));
      const auto ra = w.cmp.rec.as_array();
      for (std::size_t k = 0; k < 6; ++k) w.cmp.rec_abs_error[k] = std::abs(ra[k] - gta[k]);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::TooFewBeats) throw;
      w.cmp.rec_abs_error.fill(std::numeric_limits<double>::infinity());
    }
    for (std::size_t k = 0; k < 6; ++k) w.cmp.ppg_abs_error[k] = std::abs(ppa[k] - gta[k]);
    out[g] = std::move(w);
  });
  std::vector<HrvWindow> res;
  for (auto& w : out)
    if (w) res.push_back(std::move(*w));
  return res;
}

double hrv_dominance(const std::vector<HrvWindow>& windows, std::size_t feature) {
  if (windows.empty()) return 0.0;
  std::size_t wins = 0;
  for (const auto& w : windows) wins += w.cmp.rec_abs_error[feature] <= w.cmp.ppg_abs_error[feature];
  return static_cast<double>(wins) / static_cast<double>(windows.size());
}

ProbeResult run_probe_suite(const ModelParams<float>& params, const std::vector<EvalSegment>& segs,
                            const EvalOptions& opts) {
  Eigen::MatrixXd emb(static_cast<Eigen::Index>(segs.size()), params.config.embed_dim);
  std::vector<double> targets(segs.size());
  std::vector<std::string> ids(segs.size());
  detail::parallel_for(segs.size(), opts.threads, [&](std::size_t i) {
    const auto& s = segs[i];
    if (!s.meta.delay_ms) throw Error(ErrorKind::Format, "segment " + s.stem + " has no delay_ms in its sidecar");
    const auto e = embed_ppg<float>(params, to_float(s.ppg.samples));
    for (std::size_t j = 0; j < e.size(); ++j) emb(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = e[j];
    targets[i] = *s.meta.delay_ms;
    ids[i] = s.subject_id;
  });
  return probe_regression(emb, targets, ids, opts.probe_lambda, opts.seed);
}

double beat_recall(const std::vector<double>& reference, const std::vector<double>& detected, double tol) {
  if (reference.empty()) return 1.0;
  std::size_t hit = 0, j = 0;
  for (double r : reference) {
    while (j < detected.size() && detected[j] < r - tol) ++j;
    if (j < detected.size() && detected[j] <= r + tol) {
      ++hit;
      ++j;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(reference.size());
}

std::vector<ReconRow> run_recon_suite(const ModelParams<float>& params, const std::vector<EvalSegment>& segs,
                                      const EvalOptions& opts) {
  // First two segments of every subject.
  std::vector<std::pair<std::size_t, std::size_t>> subj;
  for (std::size_t i = 0; i + 1 < segs.size(); ++i) {
    if (segs[i].subject_id != segs[i + 1].subject_id) continue;
    if (i > 0 && segs[i - 1].subject_id == segs[i].subject_id) continue;
    subj.emplace_back(i, i + 1);
  }
  if (subj.empty()) throw Error(ErrorKind::ShapeMismatch, "recon suite needs two segments of one subject");
  const auto T = static_cast<std::ptrdiff_t>(3 * params.config.patch_len);
  auto make_template = [&](const EvalSegment& s) {
    return EcgTemplate{{s.ppg.samples.begin(), s.ppg.samples.begin() + T}, {s.ecg.samples.begin(), s.ecg.samples.begin() + T}};
  };
  std::vector<ReconRow> rows(subj.size());
  detail::parallel_for(subj.size(), opts.threads, [&](std::size_t k) {
    const auto& tpl_seg = segs[subj[k].first];
    const auto& in = segs[subj[k].second];
    const int fs = in.ppg.fs;
    const auto truth = detect_r_peaks(in.ecg);
    auto recall = [&](const EcgTemplate& tpl) {
      const auto rec = reconstruct_ecg_from_ppg(params, in.ppg.samples, tpl, fs);
      const double shift_s = static_cast<double>(rec.incoming_shift) / fs;
      // Judge only the model-generated span, away from its edges.
      const double lo = static_cast<double>(rec.template_samples) / fs + 0.1;
      const double hi = static_cast<double>(rec.ecg.size()) / fs - 0.1;
      std::vector<double> det, ref;
      for (double t : detect_r_peaks(with_samples(in.ecg, rec.ecg)))
        if (t >= lo && t <= hi) det.push_back(t + shift_s);
      for (double t : truth)
        if (t >= lo + shift_s && t <= hi + shift_s) ref.push_back(t);
      return beat_recall(ref, det, kReconToleranceS);
    };
    rows[k].subject_id = in.subject_id;
    rows[k].stem = in.stem;
    rows[k].recall_same = recall(make_template(tpl_seg));
    rows[k].recall_cross = recall(make_template(segs[subj[(k + 1) % subj.size()].first]));
  });
  return rows;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

std::string num(double v, const char* f = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

void write_cdf_csv(const std::filesystem::path& path, const CdfTable& t, const std::string& value_column) {
  std::string s = value_column + ",cdf\n";
  for (std::size_t i = 0; i < t.values.size(); ++i) s += num(t.values[i]) + "," + num(t.cdf[i]) + "\n";
  write_text(path, s);
}

void write_hrv_csv(const std::filesystem::path& path, const std::vector<HrvWindow>& windows) {
  std::string s = "window,feature,source,abs_error\n";
  for (const auto& w : windows) {
    for (std::size_t k = 0; k < kHrvFeatureNames.size(); ++k) {
      s += w.first_stem + "," + kHrvFeatureNames[k] + ",rec_ecg," + num(w.cmp.rec_abs_error[k]) + "\n";
      s += w.first_stem + "," + kHrvFeatureNames[k] + ",ppg," + num(w.cmp.ppg_abs_error[k]) + "\n";
    }
  }
  write_text(path, s);
}

void write_probe_csv(const std::filesystem::path& path, const ProbeResult& r) {
  std::string s = "fold,metric\n";
  for (std::size_t i = 0; i < r.per_fold.size(); ++i) s += std::to_string(i) + "," + num(r.per_fold[i]) + "\n";
  write_text(path, s);
}

void write_recon_csv(const std::filesystem::path& path, const std::vector<ReconRow>& rows) {
  std::string s = "subject,stem,recall_same,recall_cross\n";
  for (const auto& r : rows) s += r.subject_id + "," + r.stem + "," + num(r.recall_same) + "," + num(r.recall_cross) + "\n";
  write_text(path, s);
}

void write_cdf_svg(const std::filesystem::path& path, const std::vector<std::pair<std::string, CdfTable>>& curves,
                   const std::string& x_label) {
  constexpr double W = 800, H = 600, ml = 70, mr = 30, mt = 30, mb = 60;
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  double xmax = 0.0;
  for (const auto& [name, t] : curves)
    if (!t.values.empty()) xmax = std::max(xmax, t.values.back());
  if (!(xmax > 0.0)) xmax = 1.0;
  auto px = [&](double x) { return ml + (W - ml - mr) * x / xmax; };
  auto py = [&](double y) { return H - mb - (H - mt - mb) * y; };
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"600\" viewBox=\"0 0 800 600\">\n";
  s += "<rect width=\"800\" height=\"600\" fill=\"white\"/>\n";
  s += "<line x1=\"" + num(ml) + "\" y1=\"" + num(py(0)) + "\" x2=\"" + num(W - mr) + "\" y2=\"" + num(py(0)) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(ml) + "\" y1=\"" + num(py(0)) + "\" x2=\"" + num(ml) + "\" y2=\"" + num(py(1)) +
       "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double y = k / 4.0, x = xmax * k / 4.0;
    s += "<text x=\"" + num(ml - 8) + "\" y=\"" + num(py(y) + 4) + "\" font-size=\"12\" text-anchor=\"end\">" +
         num(y, "%.2f") + "</text>\n";
    s += "<text x=\"" + num(px(x)) + "\" y=\"" + num(py(0) + 18) + "\" font-size=\"12\" text-anchor=\"middle\">" +
         num(x, "%.4g") + "</text>\n";
  }
  s += "<text x=\"" + num((ml + W - mr) / 2) + "\" y=\"" + num(H - 15) + "\" font-size=\"14\" text-anchor=\"middle\">" +
       x_label + "</text>\n";
  s += "<text x=\"18\" y=\"" + num((mt + H - mb) / 2) + "\" font-size=\"14\" transform=\"rotate(-90 18 " +
       num((mt + H - mb) / 2) + ")\" text-anchor=\"middle\">CDF</text>\n";
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const auto& [name, t] = curves[c];
    const char* col = colors[c % 5];
    std::string pts = num(px(0)) + "," + num(py(0));
    double prev = 0.0;
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      pts += " " + num(px(t.values[i])) + "," + num(py(prev));
      pts += " " + num(px(t.values[i])) + "," + num(py(t.cdf[i]));
      prev = t.cdf[i];
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(col) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    s += "<text x=\"" + num(W - mr - 10) + "\" y=\"" + num(py(0.1) - 20.0 * static_cast<double>(c)) +
         "\" font-size=\"13\" text-anchor=\"end\" fill=\"" + col + "\">" + name + " (median " +
         num(t.median, "%.1f") + ")</text>\n";
  }
  s += "</svg>\n";
  write_text(path, s);
}

}  // namespace xmae
