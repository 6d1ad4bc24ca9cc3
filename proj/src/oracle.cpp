#include "xmae/oracle.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <stdexcept>

#include "parallel.hpp"
#include "xmae/error.hpp"
#include "xmae/rng.hpp"

namespace xmae::oracle {

ToyProcess ToyProcess::with_delay(int d) const {
  ToyProcess t = *this;
  t.delay = d;
  return t;
}

void ToyProcess::validate() const {
  const auto k = transition.size();
  if (k == 0 || k > 255) throw std::invalid_argument("toy process needs 1..255 states");
  for (const auto& row : transition) {
    if (row.size() != k) throw std::invalid_argument("transition matrix must be square");
    double s = 0.0;
    for (double v : row) {
      if (!(v >= 0.0)) throw std::invalid_argument("negative transition probability");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("transition rows must sum to 1");
  }
  if (!initial.empty()) {
    if (initial.size() != k) throw std::invalid_argument("initial law has the wrong length");
    double s = 0.0;
    for (double v : initial) {
      if (!(v >= 0.0)) throw std::invalid_argument("negative initial probability");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("initial law must sum to 1");
  }
  if (horizon < 1) throw std::invalid_argument("horizon must be positive");
  if (delay < 0 || delay >= horizon) throw std::invalid_argument("delay must lie in [0, horizon)");
  if (emit_ecg.size() != k || emit_ppg.size() != k) throw std::invalid_argument("one emission value per state");
  if (noise == ObsNoise::Flip && !(flip_prob >= 0.0 && flip_prob <= 1.0))
    throw std::invalid_argument("flip_prob must lie in [0, 1]");
}

std::vector<double> stationary_distribution(const std::vector<std::vector<double>>& transition) {
  const auto k = static_cast<Eigen::Index>(transition.size());
  // [P^T - I; 1^T] pi = [0; 1], minimum-norm least squares.
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(k + 1, k);
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j) a(j, i) = transition[i][j];
  a.topRows(k) -= Eigen::MatrixXd::Identity(k, k);
  a.row(k).setOnes();
  Eigen::VectorXd b = Eigen::VectorXd::Zero(k + 1);
  b(k) = 1.0;
  Eigen::VectorXd pi = a.completeOrthogonalDecomposition().solve(b);
  std::vector<double> out(static_cast<std::size_t>(k));
  double s = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) s += out[i] = std::max(0.0, pi(i));
  for (double& v : out) v /= s;
  return out;
}

namespace {

std::vector<double> alphabet_of(const std::vector<double>& emit) {
  std::vector<double> a(emit);
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  if (a.size() > 255) throw std::invalid_argument("alphabet too large");
  return a;
}

std::vector<int> symbols_of(const std::vector<double>& emit, const std::vector<double>& alphabet) {
  std::vector<int> s;
  for (double v : emit)
    s.push_back(static_cast<int>(std::lower_bound(alphabet.begin(), alphabet.end(), v) - alphabet.begin()));
  return s;
}

// Row s: law of the observed symbol when the latent state emits symbol s.
std::vector<std::vector<double>> channel(std::size_t n_symbols, const ToyProcess& tp) {
  const double p = (tp.noise == ObsNoise::Flip && n_symbols > 1) ? tp.flip_prob : 0.0;
  std::vector<std::vector<double>> c(n_symbols, std::vector<double>(n_symbols, 0.0));
  for (std::size_t s = 0; s < n_symbols; ++s)
    for (std::size_t a = 0; a < n_symbols; ++a)
      c[s][a] = a == s ? 1.0 - p : p / static_cast<double>(n_symbols - 1);
  return c;
}

// Mixed-radix code of (E_1..T, P_1..T): digit d < T is E_d, digit T + t is P_t.
struct Codec {
  int horizon = 0;
  std::vector<double> ae, ap;
  std::vector<std::uint64_t> place;
  std::vector<std::uint64_t> radix;
  std::uint64_t size = 1;

  Codec(int t, std::vector<double> e, std::vector<double> p) : horizon(t), ae(std::move(e)), ap(std::move(p)) {
    for (int d = 0; d < 2 * t; ++d) {
      place.push_back(size);
      radix.push_back(d < t ? ae.size() : ap.size());
      size *= radix.back();
    }
  }
  std::uint64_t digit(std::uint64_t code, int d) const { return (code / place[d]) % radix[d]; }
  double value(std::uint64_t code, int d) const {
    const auto s = digit(code, d);
    return d < horizon ? ae[s] : ap[s];
  }
  std::uint64_t project(std::uint64_t code, const std::vector<int>& keep) const {
    std::uint64_t out = 0;
    for (int d : keep) out += digit(code, d) * place[d];
    return out;
  }
};

struct ObsLaw {
  Codec codec;
  std::vector<double> q;
};

ObsLaw obs_law(const ToyProcess& tp) {
  const auto joint = enumerate_joint(tp);
  Codec codec(tp.horizon, joint.alphabet_ecg, joint.alphabet_ppg);
  std::vector<double> q(codec.size, 0.0);
  const auto T = static_cast<std::size_t>(tp.horizon);
  for (std::size_t i = 0; i < joint.size(); ++i) {
    std::uint64_t code = 0;
    for (std::size_t t = 0; t < T; ++t) {
      code += joint.ecg[i * T + t] * codec.place[t];
      code += joint.ppg[i * T + t] * codec.place[T + t];
    }
    q[code] += joint.prob[i];
  }
  return {std::move(codec), std::move(q)};
}

// Conditional-mean predictor of the target digits given the cond digits,
// learned from `model`. Keys the model never produces fall back to the
// target's prior mean under the model.
struct Predictor {
  std::vector<int> cond, target;
  std::vector<double> weight;
  std::vector<std::vector<double>> sum;  // per target
  std::vector<double> prior;

  Predictor(const ObsLaw& model, std::vector<int> c, std::vector<int> t)
      : cond(std::move(c)), target(std::move(t)), weight(model.codec.size, 0.0),
        sum(target.size(), std::vector<double>(model.codec.size, 0.0)), prior(target.size(), 0.0) {
    for (std::uint64_t code = 0; code < model.codec.size; ++code) {
      const double w = model.q[code];
      if (w == 0.0) continue;
      const auto key = model.codec.project(code, cond);
      weight[key] += w;
      for (std::size_t m = 0; m < target.size(); ++m) {
        const double v = model.codec.value(code, target[m]);
        sum[m][key] += w * v;
        prior[m] += w * v;
      }
    }
  }

  double predict(std::size_t m, std::uint64_t key) const {
    return weight[key] > 0.0 ? sum[m][key] / weight[key] : prior[m];
  }

  double loss(const Codec& codec, std::uint64_t code) const {
    const auto key = codec.project(code, cond);
    double l = 0.0;
    for (std::size_t m = 0; m < target.size(); ++m) {
      const double e = codec.value(code, target[m]) - predict(m, key);
      l += e * e;
    }
    return l;
  }
};

double risk_under(const ObsLaw& truth, const Predictor& f) {
  double r = 0.0;
  for (std::uint64_t code = 0; code < truth.codec.size; ++code)
    if (truth.q[code] > 0.0) r += truth.q[code] * f.loss(truth.codec, code);
  return r;
}

std::vector<int> masked_of(const std::vector<int>& visible, int horizon, const char* what) {
  std::vector<bool> vis(static_cast<std::size_t>(horizon), false);
  for (int v : visible) {
    if (v < 0 || v >= horizon) throw std::invalid_argument(std::string(what) + " index out of range");
    vis[static_cast<std::size_t>(v)] = true;
  }
  std::vector<int> masked;
  for (int t = 0; t < horizon; ++t)
    if (!vis[static_cast<std::size_t>(t)]) masked.push_back(t);
  if (masked.empty()) throw std::invalid_argument(std::string(what) + " must leave at least one sample masked");
  return masked;
}

std::vector<int> sorted_unique(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

std::vector<int> shifted(const std::vector<int>& v, int by) {
  std::vector<int> out;
  for (int x : v) out.push_back(x + by);
  return out;
}

std::vector<int> concat(std::vector<int> a, const std::vector<int>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<int> cross_cond(const std::vector<int>& visible_ecg, int horizon) {
  std::vector<int> c = sorted_unique(visible_ecg);
  for (int t = 0; t < horizon; ++t) c.push_back(horizon + t);
  return c;
}

double conditional_entropy(const ObsLaw& law, const std::vector<int>& cond, const std::vector<int>& target) {
  const auto both = concat(cond, target);
  std::vector<double> pj(law.codec.size, 0.0), pc(law.codec.size, 0.0);
  for (std::uint64_t code = 0; code < law.codec.size; ++code) {
    if (law.q[code] == 0.0) continue;
    pj[law.codec.project(code, both)] += law.q[code];
    pc[law.codec.project(code, cond)] += law.q[code];
  }
  double h = 0.0;
  for (std::uint64_t key = 0; key < law.codec.size; ++key) {
    if (pj[key] <= 0.0) continue;
    h -= pj[key] * std::log2(pj[key] / pc[law.codec.project(key, cond)]);
  }
  return std::max(0.0, h);
}

}  // namespace

double JointTable::total_mass() const {
  double s = 0.0;
  for (double p : prob) s += p;
  return s;
}

std::vector<double> JointTable::ecg_marginal(int t) const {
  if (t < 0 || t >= horizon) throw std::invalid_argument("time index out of range");
  std::vector<double> m(alphabet_ecg.size(), 0.0);
  const auto T = static_cast<std::size_t>(horizon);
  for (std::size_t i = 0; i < size(); ++i) m[ecg[i * T + static_cast<std::size_t>(t)]] += prob[i];
  return m;
}

double atom_count(const ToyProcess& tp) {
  const double k = static_cast<double>(tp.n_states());
  const double ae = static_cast<double>(alphabet_of(tp.emit_ecg).size());
  const double ap = static_cast<double>(alphabet_of(tp.emit_ppg).size());
  return std::pow(k, tp.latent_len()) * std::pow(ae * ap, tp.horizon);
}

JointTable enumerate_joint(const ToyProcess& tp) {
  tp.validate();
  const double atoms = atom_count(tp);
  if (atoms > kMaxAtoms) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "enumeration needs %.3g atoms (limit %.0g)", atoms, kMaxAtoms);
    throw Error(ErrorKind::TooLarge, buf);
  }
  JointTable j;
  j.latent_len = tp.latent_len();
  j.horizon = tp.horizon;
  j.alphabet_ecg = alphabet_of(tp.emit_ecg);
  j.alphabet_ppg = alphabet_of(tp.emit_ppg);
  const auto sym_e = symbols_of(tp.emit_ecg, j.alphabet_ecg);
  const auto sym_p = symbols_of(tp.emit_ppg, j.alphabet_ppg);
  const auto ch_e = channel(j.alphabet_ecg.size(), tp);
  const auto ch_p = channel(j.alphabet_ppg.size(), tp);
  const auto init = tp.initial.empty() ? stationary_distribution(tp.transition) : tp.initial;

  const int K = tp.n_states(), L = j.latent_len, T = j.horizon, D = tp.delay;
  std::vector<int> s(static_cast<std::size_t>(L), 0);
  std::vector<std::uint8_t> e(static_cast<std::size_t>(T)), p(static_cast<std::size_t>(T));

  // Latent index l corresponds to time l - D + 1, so E_t reads s[t + D]
  // and P_t reads s[t] (0-based t).
  std::function<void(int, double)> emit = [&](int d, double w) {
    if (w == 0.0) return;
    if (d == 2 * T) {
      for (int l = 0; l < L; ++l) j.latent.push_back(static_cast<std::uint8_t>(s[static_cast<std::size_t>(l)]));
      j.ecg.insert(j.ecg.end(), e.begin(), e.end());
      j.ppg.insert(j.ppg.end(), p.begin(), p.end());
      j.prob.push_back(w);
      return;
    }
    if (d < T) {
      const auto& row = ch_e[static_cast<std::size_t>(sym_e[static_cast<std::size_t>(s[static_cast<std::size_t>(d + D)])])];
      for (std::size_t a = 0; a < row.size(); ++a) {
        e[static_cast<std::size_t>(d)] = static_cast<std::uint8_t>(a);
        emit(d + 1, w * row[a]);
      }
    } else {
      const int t = d - T;
      const auto& row = ch_p[static_cast<std::size_t>(sym_p[static_cast<std::size_t>(s[static_cast<std::size_t>(t)])])];
      for (std::size_t a = 0; a < row.size(); ++a) {
        p[static_cast<std::size_t>(t)] = static_cast<std::uint8_t>(a);
        emit(d + 1, w * row[a]);
      }
    }
  };

  std::function<void(int, double)> walk = [&](int l, double w) {
    if (w == 0.0) return;
    if (l == L) {
      emit(0, w);
      return;
    }
    for (int k = 0; k < K; ++k) {
      s[static_cast<std::size_t>(l)] = k;
      const double step = l == 0 ? init[static_cast<std::size_t>(k)]
                                 : tp.transition[static_cast<std::size_t>(s[static_cast<std::size_t>(l - 1)])][static_cast<std::size_t>(k)];
      walk(l + 1, w * step);
    }
  };
  walk(0, 1.0);
  return j;
}

double bayes_risk_cross(const ToyProcess& tp, const std::vector<int>& visible_ecg, int assumed_delay) {
  const auto masked = masked_of(visible_ecg, tp.horizon, "visible_ecg");
  const auto truth = obs_law(tp);
  const auto model = obs_law(tp.with_delay(assumed_delay));
  const Predictor f(model, cross_cond(visible_ecg, tp.horizon), masked);
  return risk_under(truth, f);
}

McEstimate mc_risk_cross(const ToyProcess& tp, const std::vector<int>& visible_ecg, int assumed_delay,
                         std::size_t n_samples, std::uint64_t seed) {
  if (n_samples < 2) throw std::invalid_argument("Monte-Carlo check needs at least 2 samples");
  const auto masked = masked_of(visible_ecg, tp.horizon, "visible_ecg");
  tp.validate();
  const auto model = obs_law(tp.with_delay(assumed_delay));
  const Predictor f(model, cross_cond(visible_ecg, tp.horizon), masked);
  const Codec& codec = model.codec;

  const auto sym_e = symbols_of(tp.emit_ecg, codec.ae);
  const auto sym_p = symbols_of(tp.emit_ppg, codec.ap);
  const auto init = tp.initial.empty() ? stationary_distribution(tp.transition) : tp.initial;
  const int T = tp.horizon, D = tp.delay, L = tp.latent_len();
  const bool flip = tp.noise == ObsNoise::Flip;

  auto draw = [](Rng& rng, const std::vector<double>& law) {
    const double u = rng.uniform();
    double c = 0.0;
    for (std::size_t i = 0; i < law.size(); ++i) {
      c += law[i];
      if (u < c) return static_cast<int>(i);
    }
    return static_cast<int>(law.size() - 1);
  };
  auto observe = [&](Rng& rng, int sym, std::size_t n_sym) -> std::uint64_t {
    if (!flip || n_sym < 2 || !(rng.uniform() < tp.flip_prob)) return static_cast<std::uint64_t>(sym);
    auto other = rng.below(n_sym - 1);
    return other >= static_cast<std::uint64_t>(sym) ? other + 1 : other;
  };

  Rng rng(seed);
  std::vector<int> s(static_cast<std::size_t>(L));
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t n = 0; n < n_samples; ++n) {
    s[0] = draw(rng, init);
    for (int l = 1; l < L; ++l) s[static_cast<std::size_t>(l)] = draw(rng, tp.transition[static_cast<std::size_t>(s[static_cast<std::size_t>(l - 1)])]);
    std::uint64_t code = 0;
    for (int t = 0; t < T; ++t) {
      code += observe(rng, sym_e[static_cast<std::size_t>(s[static_cast<std::size_t>(t + D)])], codec.ae.size()) * codec.place[static_cast<std::size_t>(t)];
      code += observe(rng, sym_p[static_cast<std::size_t>(s[static_cast<std::size_t>(t)])], codec.ap.size()) * codec.place[static_cast<std::size_t>(T + t)];
    }
    const double l = f.loss(codec, code);
    sum += l;
    sum_sq += l * l;
  }
  const double nd = static_cast<double>(n_samples);
  McEstimate est;
  est.n = n_samples;
  est.mean = sum / nd;
  const double var = std::max(0.0, (sum_sq - nd * est.mean * est.mean) / (nd - 1.0));
  est.se = std::sqrt(var / nd);
  return est;
}

double self_entropy_ecg(const ToyProcess& tp, const std::vector<int>& visible_ecg) {
  const auto masked = masked_of(visible_ecg, tp.horizon, "visible_ecg");
  return conditional_entropy(obs_law(tp), sorted_unique(visible_ecg), masked);
}

double self_entropy_ppg(const ToyProcess& tp, const std::vector<int>& visible_ppg) {
  const auto masked = masked_of(visible_ppg, tp.horizon, "visible_ppg");
  return conditional_entropy(obs_law(tp), shifted(sorted_unique(visible_ppg), tp.horizon),
                             shifted(masked, tp.horizon));
}

MmRisk bayes_risk_mm(const ToyProcess& tp, const std::vector<int>& visible_ecg, const std::vector<int>& visible_ppg) {
  const int T = tp.horizon;
  const auto me = masked_of(visible_ecg, T, "visible_ecg");
  const auto mp = shifted(masked_of(visible_ppg, T, "visible_ppg"), T);
  const auto ve = sorted_unique(visible_ecg);
  const auto vp = shifted(sorted_unique(visible_ppg), T);
  const auto law = obs_law(tp);

  const double he = conditional_entropy(law, ve, me);
  const double hp = conditional_entropy(law, vp, mp);
  if (he > 1e-12 || hp > 1e-12) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "masked samples not determined by their own modality (H_ecg = %.3g, H_ppg = %.3g bits)",
                  he, hp);
    throw Error(ErrorKind::ConstructionViolation, buf);
  }

  MmRisk r;
  const auto all_visible = concat(ve, vp);
  r.with_cross_input = risk_under(law, Predictor(law, all_visible, concat(me, mp)));
  r.unimodal = risk_under(law, Predictor(law, ve, me)) + risk_under(law, Predictor(law, vp, mp));
  return r;
}

RiskCurve identifiability_scan(const ToyProcess& tp, const std::vector<int>& visible_ecg, int lo, int hi, int threads) {
  if (lo < 0 || hi >= tp.horizon || lo > hi) throw std::invalid_argument("delay range must lie in [0, horizon - 1]");
  tp.validate();
  masked_of(visible_ecg, tp.horizon, "visible_ecg");
  RiskCurve c;
  for (int d = lo; d <= hi; ++d) c.assumed_delays.push_back(d);
  c.risks.assign(c.assumed_delays.size(), 0.0);
  detail::parallel_for(c.assumed_delays.size(), threads,
                       [&](std::size_t i) { c.risks[i] = bayes_risk_cross(tp, visible_ecg, c.assumed_delays[i]); });
  const auto best = std::min_element(c.risks.begin(), c.risks.end()) - c.risks.begin();
  c.argmin = c.assumed_delays[static_cast<std::size_t>(best)];
  int ties = 0;
  for (double r : c.risks) ties += r <= c.risks[static_cast<std::size_t>(best)] + kRiskTie;
  c.unique = ties == 1;
  return c;
}

void add_mc_check(RiskCurve& curve, const ToyProcess& tp, const std::vector<int>& visible_ecg, std::size_t n_samples,
                  std::uint64_t seed) {
  curve.mc.clear();
  for (int d : curve.assumed_delays)
    curve.mc.push_back(mc_risk_cross(tp, visible_ecg, d, n_samples, derive_seed({seed, static_cast<std::uint64_t>(d)})));
}

bool mc_agrees(const RiskCurve& curve, double k) {
  if (curve.mc.size() != curve.risks.size()) return false;
  for (std::size_t i = 0; i < curve.risks.size(); ++i) {
    const double diff = std::abs(curve.mc[i].mean - curve.risks[i]);
    if (curve.mc[i].se == 0.0 ? diff > 1e-12 : diff > k * curve.mc[i].se) return false;
  }
  return true;
}

ToyProcess informative_process(int horizon, int delay) {
  ToyProcess tp;
  tp.transition = {{0.85, 0.15}, {0.30, 0.70}};
  tp.horizon = horizon;
  tp.delay = delay;
  tp.emit_ecg = {0.0, 1.0};
  tp.emit_ppg = {0.0, 1.0};
  return tp;
}

ToyProcess period_two_process(int horizon, int delay) {
  ToyProcess tp;
  tp.transition = {{0.0, 1.0}, {1.0, 0.0}};
  tp.horizon = horizon;
  tp.delay = delay;
  tp.emit_ecg = {0.0, 1.0};
  tp.emit_ppg = {0.0, 1.0};
  return tp;
}

std::vector<int> alternating_visible(int horizon) {
  std::vector<int> v;
  for (int t = 0; t < horizon; t += 2) v.push_back(t);
  return v;
}

DelaySweep symmetric_delay_sweep(const ToyProcess& base, const std::vector<int>& visible_ecg,
                                 const std::vector<int>& visible_ppg, const std::vector<int>& delays) {
  DelaySweep s;
  s.delays = delays;
  for (int d : delays) s.risks.push_back(bayes_risk_mm(base.with_delay(d), visible_ecg, visible_ppg));
  for (const auto& r : s.risks) {
    s.constant = s.constant && std::abs(r.with_cross_input - s.risks.front().with_cross_input) <= kRiskTie &&
                 std::abs(r.unimodal - s.risks.front().unimodal) <= kRiskTie;
  }
  return s;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_risk_curve_csv(const std::filesystem::path& path, const RiskCurve& c) {
  const bool mc = c.mc.size() == c.risks.size() && !c.mc.empty();
  std::string s = mc ? "assumed_delay,risk,mc_risk,mc_se\n" : "assumed_delay,risk\n";
  for (std::size_t i = 0; i < c.risks.size(); ++i) {
    s += std::to_string(c.assumed_delays[i]) + "," + num(c.risks[i]);
    if (mc) s += "," + num(c.mc[i].mean) + "," + num(c.mc[i].se);
    s += "\n";
  }
  write_text(path, s);
}

void write_sweep_csv(const std::filesystem::path& path, const DelaySweep& sw) {
  std::string s = "delay,risk_with_cross_input,risk_unimodal\n";
  for (std::size_t i = 0; i < sw.delays.size(); ++i)
    s += std::to_string(sw.delays[i]) + "," + num(sw.risks[i].with_cross_input) + "," + num(sw.risks[i].unimodal) + "\n";
  write_text(path, s);
}

}  // namespace xmae::oracle
