#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "xmae/oracle.hpp"

using namespace xmae;
using namespace xmae::oracle;

namespace {

// Brute-force reference: the observation law of a process built directly
// from path and noise enumeration, without the library's tables.
using Obs = std::pair<std::vector<int>, std::vector<int>>;  // ECG, PPG symbol indices

std::vector<double> power_stationary(const std::vector<std::vector<double>>& t) {
  std::vector<double> pi(t.size(), 1.0 / static_cast<double>(t.size()));
  for (int it = 0; it < 20000; ++it) {
    std::vector<double> nx(t.size(), 0.0);
    for (std::size_t i = 0; i < t.size(); ++i)
      for (std::size_t j = 0; j < t.size(); ++j) nx[j] += pi[i] * t[i][j];
    pi = nx;
  }
  return pi;
}

std::vector<double> sorted_unique(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

int index_of(const std::vector<double>& a, double v) {
  return static_cast<int>(std::find(a.begin(), a.end(), v) - a.begin());
}

// Spreads `mass` over every noisy version of the clean symbol string.
void add_noisy(std::map<Obs, double>& law, const std::vector<int>& ce, const std::vector<int>& cp, double mass,
               std::size_t ne, std::size_t np, double p) {
  const std::size_t T = ce.size();
  std::vector<int> all(ce);
  all.insert(all.end(), cp.begin(), cp.end());
  std::vector<int> cur(all.size());
  auto rec = [&](auto&& self, std::size_t i, double m) -> void {
    if (m == 0.0) return;
    if (i == all.size()) {
      law[{std::vector<int>(cur.begin(), cur.begin() + static_cast<std::ptrdiff_t>(T)),
           std::vector<int>(cur.begin() + static_cast<std::ptrdiff_t>(T), cur.end())}] += m;
      return;
    }
    const std::size_t a = i < T ? ne : np;
    for (std::size_t s = 0; s < a; ++s) {
      double q;
      if (a == 1) q = 1.0;
      else q = static_cast<int>(s) == all[i] ? 1.0 - p : p / static_cast<double>(a - 1);
      cur[i] = static_cast<int>(s);
      self(self, i + 1, m * q);
    }
  };
  rec(rec, 0, mass);
}

std::map<Obs, double> observation_law(const ToyProcess& tp, int delay) {
  const int K = tp.n_states(), T = tp.horizon, n = T + delay;
  const auto ae = sorted_unique(tp.emit_ecg), ap = sorted_unique(tp.emit_ppg);
  const auto init = tp.initial.empty() ? power_stationary(tp.transition) : tp.initial;
  const double p = tp.noise == ObsNoise::Flip ? tp.flip_prob : 0.0;
  std::map<Obs, double> law;
  std::vector<int> path(static_cast<std::size_t>(n));
  auto rec = [&](auto&& self, int i, double m) -> void {
    if (m == 0.0) return;
    if (i == n) {
      std::vector<int> e(static_cast<std::size_t>(T)), q(static_cast<std::size_t>(T));
      for (int t = 0; t < T; ++t) {
        e[static_cast<std::size_t>(t)] = index_of(ae, tp.emit_ecg[static_cast<std::size_t>(path[static_cast<std::size_t>(t + delay)])]);
        q[static_cast<std::size_t>(t)] = index_of(ap, tp.emit_ppg[static_cast<std::size_t>(path[static_cast<std::size_t>(t)])]);
      }
      add_noisy(law, e, q, m, ae.size(), ap.size(), p);
      return;
    }
    for (int s = 0; s < K; ++s) {
      path[static_cast<std::size_t>(i)] = s;
      const double w = i == 0 ? init[static_cast<std::size_t>(s)]
                              : tp.transition[static_cast<std::size_t>(path[static_cast<std::size_t>(i - 1)])][static_cast<std::size_t>(s)];
      self(self, i + 1, m * w);
    }
  };
  rec(rec, 0, 1.0);
  return law;
}

// Risk of the conditional-mean predictor built under `assumed`, scored
// under the true delay, summed over masked positions. Keys the assumed
// model never produces fall back to its prior mean.
double reference_cross_risk(const ToyProcess& tp, const std::vector<int>& visible, int assumed) {
  const auto ae = sorted_unique(tp.emit_ecg);
  const int T = tp.horizon;
  std::vector<int> masked;
  for (int t = 0; t < T; ++t)
    if (std::find(visible.begin(), visible.end(), t) == visible.end()) masked.push_back(t);

  auto key_of = [&](const Obs& o) {
    std::vector<int> k(o.second);
    for (int v : visible) k.push_back(o.first[static_cast<std::size_t>(v)]);
    return k;
  };
  const auto model = observation_law(tp, assumed);
  std::map<std::vector<int>, std::pair<double, std::vector<double>>> acc;
  std::vector<double> prior(static_cast<std::size_t>(T), 0.0);
  for (const auto& [o, m] : model) {
    auto& a = acc[key_of(o)];
    a.second.resize(static_cast<std::size_t>(T), 0.0);
    a.first += m;
    for (int t : masked) {
      a.second[static_cast<std::size_t>(t)] += m * ae[static_cast<std::size_t>(o.first[static_cast<std::size_t>(t)])];
      prior[static_cast<std::size_t>(t)] += m * ae[static_cast<std::size_t>(o.first[static_cast<std::size_t>(t)])];
    }
  }
  double risk = 0.0;
  for (const auto& [o, m] : observation_law(tp, tp.delay)) {
    const auto it = acc.find(key_of(o));
    for (int t : masked) {
      const auto ut = static_cast<std::size_t>(t);
      const double pred = it != acc.end() && it->second.first > 0.0 ? it->second.second[ut] / it->second.first : prior[ut];
      const double err = ae[static_cast<std::size_t>(o.first[ut])] - pred;
      risk += m * err * err;
    }
  }
  return risk;
}

ToyProcess two_state(std::vector<std::vector<double>> t, int T, int delay) {
  ToyProcess tp;
  tp.transition = std::move(t);
  tp.horizon = T;
  tp.delay = delay;
  tp.emit_ecg = {0.0, 1.0};
  tp.emit_ppg = {0.0, 1.0};
  return tp;
}

}  // namespace

TEST_CASE("joint enumeration counts and mass") {
  auto tp = two_state({{0.5, 0.5}, {0.5, 0.5}}, 4, 0);
  tp.initial = {0.5, 0.5};
  const auto j = enumerate_joint(tp);
  CHECK(j.size() == 16);
  CHECK(std::abs(j.total_mass() - 1.0) < 1e-10);
  std::set<std::vector<std::uint8_t>> paths;
  for (std::size_t a = 0; a < j.size(); ++a) paths.insert({j.latent.begin() + static_cast<std::ptrdiff_t>(a * 4), j.latent.begin() + static_cast<std::ptrdiff_t>(a * 4 + 4)});
  CHECK(paths.size() == 16);
}

TEST_CASE("absorbing chain keeps all mass on one path") {
  auto tp = two_state({{1.0, 0.0}, {0.4, 0.6}}, 5, 1);
  tp.initial = {1.0, 0.0};
  const auto j = enumerate_joint(tp);
  REQUIRE(j.size() == 1);
  CHECK(j.prob[0] == doctest::Approx(1.0));
  for (auto s : j.latent) CHECK(s == 0);
}

TEST_CASE("flip noise marginal by hand") {
  auto tp = two_state({{0.9, 0.1}, {0.2, 0.8}}, 3, 0);
  tp.initial = {0.3, 0.7};
  tp.noise = ObsNoise::Flip;
  tp.flip_prob = 0.1;
  const auto m = enumerate_joint(tp).ecg_marginal(0);
  CHECK(m[0] == doctest::Approx(0.3 * 0.9 + 0.7 * 0.1).epsilon(1e-12));
  CHECK(m[1] == doctest::Approx(0.3 * 0.1 + 0.7 * 0.9).epsilon(1e-12));
  CHECK(std::abs(enumerate_joint(tp).total_mass() - 1.0) < 1e-10);
}

TEST_CASE("stationary law of the informative chain") {
  const auto pi = stationary_distribution({{0.85, 0.15}, {0.30, 0.70}});
  CHECK(pi[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(pi[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("size guard") {
  ToyProcess big = two_state({{0.5, 0.5}, {0.5, 0.5}}, 12, 3);
  CHECK(atom_count(big) > kMaxAtoms);
  CHECK(th::error_kind([&] { enumerate_joint(big); }) == ErrorKind::TooLarge);
  CHECK(th::error_kind([&] { bayes_risk_cross(big, {0}, 1); }) == ErrorKind::TooLarge);
}

TEST_CASE("process validation") {
  auto bad = two_state({{0.5, 0.4}, {0.5, 0.5}}, 5, 0);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  auto late = two_state({{0.5, 0.5}, {0.5, 0.5}}, 3, 3);
  CHECK_THROWS_AS(late.validate(), std::invalid_argument);
}

TEST_CASE("cross risk agrees with brute-force reference") {
  std::vector<ToyProcess> cases{informative_process(5, 2), period_two_process(5, 1)};
  auto noisy = informative_process(4, 1);
  noisy.noise = ObsNoise::Flip;
  noisy.flip_prob = 0.15;
  cases.push_back(noisy);
  auto three = two_state({{0.6, 0.3, 0.1}, {0.2, 0.5, 0.3}, {0.3, 0.3, 0.4}}, 4, 1);
  three.emit_ecg = {0.0, 1.0, 2.5};
  three.emit_ppg = {0.0, 1.0, 1.0};
  cases.push_back(three);
  for (const auto& tp : cases) {
    for (int d = 0; d < tp.horizon; ++d) {
      for (const std::vector<int>& vis : {std::vector<int>{0}, std::vector<int>{1, 2}}) {
        const double lib = bayes_risk_cross(tp, vis, d);
        const double ref = reference_cross_risk(tp, vis, d);
        CHECK(lib == doctest::Approx(ref).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("informative construction identifies the delay") {
  const auto tp = informative_process(5, 2);
  const auto c = identifiability_scan(tp, {0}, 0, 4);
  CHECK(c.assumed_delays == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(c.argmin == 2);
  CHECK(c.unique);
  for (std::size_t i = 0; i < c.risks.size(); ++i) {
    CHECK(c.risks[i] >= 0.0);
    if (i != 2) CHECK(c.risks[i] > c.risks[2] + kRiskTie);
  }
}

TEST_CASE("risk at the true delay is a global minimum of every scan") {
  for (int delay = 0; delay < 4; ++delay) {
    for (const auto& vis : {std::vector<int>{0}, std::vector<int>{4}, std::vector<int>{1, 3}}) {
      auto tp = informative_process(5, delay);
      const auto c = identifiability_scan(tp, vis, 0, 4);
      const double at_truth = c.risks[static_cast<std::size_t>(delay)];
      for (double r : c.risks) CHECK(at_truth <= r + kRiskTie);
      tp.noise = ObsNoise::Flip;
      tp.flip_prob = 0.1;
      const auto n = identifiability_scan(tp, vis, 0, 4);
      for (double r : n.risks) CHECK(n.risks[static_cast<std::size_t>(delay)] <= r + kRiskTie);
    }
  }
}

TEST_CASE("uninformative PPG gives a flat curve") {
  auto tp = informative_process(5, 2);
  tp.emit_ppg = {0.5, 0.5};
  const auto c = identifiability_scan(tp, {0}, 0, 4);
  for (double r : c.risks) CHECK(r == doctest::Approx(c.risks[0]).epsilon(1e-12));
  CHECK_FALSE(c.unique);
}

TEST_CASE("period-matched chain reports a tied minimum") {
  const auto tp = period_two_process(5, 1);
  const auto c = identifiability_scan(tp, {0}, 0, 4);
  CHECK_FALSE(c.unique);
  CHECK(c.risks[1] == doctest::Approx(c.risks[3]).epsilon(1e-12));
  CHECK(c.risks[1] <= c.risks[0]);
}

TEST_CASE("scan ranges") {
  const auto tp = informative_process(5, 2);
  const auto one = identifiability_scan(tp, {0}, 3, 3);
  CHECK(one.risks.size() == 1);
  CHECK(one.assumed_delays == std::vector<int>{3});
  CHECK_THROWS_AS(identifiability_scan(tp, {0}, 0, 5), std::invalid_argument);
  CHECK_THROWS_AS(identifiability_scan(tp, {0}, -1, 2), std::invalid_argument);
  const auto threaded = identifiability_scan(tp, {0}, 0, 4, 3);
  CHECK(threaded.risks == identifiability_scan(tp, {0}, 0, 4, 1).risks);
}

TEST_CASE("symmetric objective on the period-two chain") {
  const auto tp = period_two_process(6, 0);
  const auto vis = alternating_visible(6);
  CHECK(vis == std::vector<int>{0, 2, 4});
  CHECK(self_entropy_ecg(tp, vis) == doctest::Approx(0.0).epsilon(1e-12));
  const auto r = bayes_risk_mm(tp, vis, vis);
  CHECK(r.with_cross_input == 0.0);
  CHECK(r.unimodal == 0.0);

  const auto sweep = symmetric_delay_sweep(tp, vis, vis, {0, 1, 2, 3});
  REQUIRE(sweep.risks.size() == 4);
  CHECK(sweep.constant);
  for (const auto& x : sweep.risks) {
    CHECK(std::abs(x.with_cross_input - sweep.risks[0].with_cross_input) <= 1e-12);
    CHECK(std::abs(x.unimodal - sweep.risks[0].unimodal) <= 1e-12);
  }
}

TEST_CASE("noise breaks self-sufficiency") {
  auto tp = period_two_process(6, 1);
  tp.noise = ObsNoise::Flip;
  tp.flip_prob = 0.2;
  const auto vis = alternating_visible(6);
  CHECK(self_entropy_ecg(tp, vis) > 1e-3);
  CHECK(th::error_kind([&] { bayes_risk_mm(tp, vis, vis); }) == ErrorKind::ConstructionViolation);
}

TEST_CASE("Monte-Carlo cross-check of the enumerated curve") {
  const auto tp = informative_process(5, 2);
  auto c = identifiability_scan(tp, {0}, 0, 4);
  add_mc_check(c, tp, {0}, 1000000, 77);
  REQUIRE(c.mc.size() == c.risks.size());
  for (const auto& m : c.mc) CHECK(m.n == 1000000);
  CHECK(mc_agrees(c));

  // A curve shifted by several standard errors must be rejected.
  auto off = c;
  for (std::size_t i = 0; i < off.risks.size(); ++i) off.risks[i] += 10.0 * std::max(off.mc[i].se, 1e-3);
  CHECK_FALSE(mc_agrees(off));
}

TEST_CASE("risk curve CSV") {
  const auto dir = th::temp_dir("oracle_csv");
  const auto c = identifiability_scan(informative_process(5, 2), {0}, 0, 2);
  write_risk_curve_csv(dir / "risk_curve.csv", c);
  std::ifstream in(dir / "risk_curve.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "assumed_delay,risk");
  int rows = 0;
  for (std::string line; std::getline(in, line);) rows += !line.empty();
  CHECK(rows == 3);
  std::filesystem::remove_all(dir);
}
