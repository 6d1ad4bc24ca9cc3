#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

#include "json.hpp"
#include "xmae/checkpoint.hpp"
#include "xmae/error.hpp"
#include "xmae/evalkit.hpp"
#include "xmae/oracle.hpp"
#include "xmae/run_config.hpp"
#include "xmae/synthgen.hpp"
#include "xmae/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace xmae;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kIo = 3, kNumeric = 4, kCompat = 5, kSize = 6 };

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config:
    case ErrorKind::InvalidCutoff:
    case ErrorKind::InvalidOrder:
    case ErrorKind::InvalidRatio:
    case ErrorKind::IndivisibleLength:
      return kConfig;
    case ErrorKind::Io:
    case ErrorKind::Format:
      return kIo;
    case ErrorKind::IncompatibleCheckpoint:
      return kCompat;
    case ErrorKind::TooLarge:
      return kSize;
    default:
      return kNumeric;
  }
}

void write_json(const fs::path& path, const json& j) {
  const auto text = j.dump(2) + "\n";
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

// Run directories are append-only unless --force.
void prepare_out_dir(const fs::path& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec) && !force)
    throw Error(ErrorKind::Io, dir.string() + " is not empty; pass --force to write into it");
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
}

struct Common {
  std::string config;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "run config JSON");
  sub->add_option("--out", c.out, "output directory")->required();
  sub->add_flag("--force", c.force, "write into a non-empty directory");
}

int cmd_synth(const Common& c, int) {
  const auto rc = config_or_default(c.config);
  prepare_out_dir(c.out, c.force);
  const auto m = gen_dataset(rc.synth, c.out);
  write_json(fs::path(c.out) / "resolved_config.json", run_config_to_json(rc));
  std::size_t pass = 0;
  for (const auto& s : m.subjects)
    for (const auto& f : s.files) pass += f.quality_pass;
  std::printf("subjects %zu  segment pairs %zu  quality pass %zu\n", m.subjects.size(), m.n_pairs(), pass);
  return kOk;
}

struct PretrainFlags {
  std::string data;
  std::string objective;
  std::string mask;
  std::string curriculum;
  std::optional<double> mask_ratio;
};

int cmd_pretrain(const Common& c, const PretrainFlags& f, int threads) {
  auto rc = config_or_default(c.config);
  auto& t = rc.train;
  if (!f.objective.empty()) t.objective = f.objective == "xmae" ? Objective::Xmae : Objective::MmBaseline;
  if (!f.mask.empty()) t.mask_mode = f.mask == "random" ? MaskMode::Random : MaskMode::Contiguous;
  if (!f.curriculum.empty()) t.curriculum = f.curriculum == "on";
  if (f.mask_ratio) t.mask_ratio = *f.mask_ratio;
  t.threads = threads;
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw Error(ErrorKind::Config, e.what());
  }
  const auto manifest = read_manifest(fs::path(f.data) / "manifest.json");
  prepare_out_dir(c.out, c.force);
  write_json(fs::path(c.out) / "resolved_config.json", run_config_to_json(rc));
  const auto res = train_to_dir(manifest, f.data, t, rc.model, c.out);
  std::printf("objective %s  epochs %zu  best epoch %d  final val loss %.6g%s\n",
              std::string(to_string(t.objective)).c_str(), res.log.size(), res.best_epoch,
              res.log.empty() ? 0.0 : res.log.back().val_loss, res.early_stopped ? "  (early stop)" : "");
  return kOk;
}

struct EvalFlags {
  std::vector<std::string> checkpoints;
  std::vector<std::string> labels;
  std::string data;
  std::string suite;
};

std::string label_for(const EvalFlags& f, std::size_t i) {
  if (i < f.labels.size()) return f.labels[i];
  const auto parent = fs::path(f.checkpoints[i]).parent_path().filename().string();
  return parent.empty() ? "model" + std::to_string(i) : parent;
}

int cmd_eval(const Common& c, const EvalFlags& f, int threads) {
  auto rc = config_or_default(c.config);
  rc.eval.options.threads = threads;
  const auto manifest = read_manifest(fs::path(f.data) / "manifest.json");

  std::vector<std::string> ids;
  for (const auto& s : manifest.subjects) ids.push_back(s.profile.subject_id);
  // The probe is cross-validated across subjects, so it always sees everyone.
  std::vector<std::string> subset;
  if (rc.eval.split == EvalSplit::Validation && f.suite != "probe")
    subset = validation_subjects(ids, rc.train.val_frac, rc.train.seed);
  const auto segs = load_eval_segments(manifest, f.data, subset);

  std::vector<std::pair<std::string, Checkpoint>> models;
  for (std::size_t i = 0; i < f.checkpoints.size(); ++i) {
    auto ck = load_checkpoint(f.checkpoints[i]);
    if (f.suite == "recon" && ck.params.objective != Objective::Xmae)
      throw Error(ErrorKind::IncompatibleCheckpoint, "recon suite needs an xmae checkpoint: " + f.checkpoints[i]);
    models.emplace_back(label_for(f, i), std::move(ck));
  }
  prepare_out_dir(c.out, c.force);
  write_json(fs::path(c.out) / "resolved_config.json", run_config_to_json(rc));
  const fs::path out(c.out);
  const bool single = models.size() == 1;
  auto file = [&](const std::string& stem, const std::string& label, const char* ext) {
    return out / (single ? stem + ext : stem + "_" + label + ext);
  };

  json summary;
  summary["suite"] = f.suite;
  summary["n_segments"] = segs.size();
  std::vector<std::pair<std::string, CdfTable>> curves;
  for (const auto& [label, ck] : models) {
    const auto& p = ck.params;
    json s;
    s["objective"] = std::string(to_string(p.objective));
    if (f.suite == "delay") {
      const auto r = run_delay_suite(p, segs, rc.eval.options);
      write_cdf_csv(file("delay_cdf", label, ".csv"), r.table);
      s["median_delay_error_ms"] = r.table.median;
      s["n_scored"] = r.errors_ms.size();
      curves.emplace_back(label, r.table);
      std::printf("%s: median delay error %.2f ms over %zu segments\n", label.c_str(), r.table.median, r.errors_ms.size());
    } else if (f.suite == "hrv") {
      const auto w = run_hrv_suite(p, segs, rc.eval.options);
      write_hrv_csv(file("hrv_errors", label, ".csv"), w);
      s["n_windows"] = w.size();
      for (std::size_t k = 0; k < kHrvFeatureNames.size(); ++k) {
        std::vector<double> re, pe;
        for (const auto& x : w) {
          re.push_back(x.cmp.rec_abs_error[k]);
          pe.push_back(x.cmp.ppg_abs_error[k]);
        }
        json fj;
        if (!w.empty()) {
          fj["median_rec_ecg_error"] = median_of(re);
          fj["median_ppg_error"] = median_of(pe);
        }
        fj["rec_le_ppg_fraction"] = hrv_dominance(w, k);
        s["features"][kHrvFeatureNames[k]] = fj;
      }
      std::printf("%s: %zu HRV windows, RMSSD dominance %.3f, pNN20 dominance %.3f\n", label.c_str(), w.size(),
                  hrv_dominance(w, 2), hrv_dominance(w, 3));
    } else if (f.suite == "probe") {
      const auto r = run_probe_suite(p, segs, rc.eval.options);
      write_probe_csv(file("probe", label, ".csv"), r);
      s["probe_mae_mean"] = r.mean;
      s["probe_mae_sd"] = r.sd;
      s["per_fold"] = r.per_fold;
      std::printf("%s: probe MAE %.3f +- %.3f ms\n", label.c_str(), r.mean, r.sd);
    } else {
      const auto rows = run_recon_suite(p, segs, rc.eval.options);
      write_recon_csv(file("recon", label, ".csv"), rows);
      std::vector<double> same, cross;
      for (const auto& r : rows) {
        same.push_back(r.recall_same);
        cross.push_back(r.recall_cross);
      }
      s["median_recall_same_subject"] = median_of(same);
      s["median_recall_cross_subject"] = median_of(cross);
      std::printf("%s: median beat recall %.3f (same-subject template), %.3f (cross-subject)\n", label.c_str(),
                  median_of(same), median_of(cross));
    }
    summary["models"][label] = s;
  }
  if (!curves.empty()) write_cdf_svg(out / "delay_cdf.svg", curves, "absolute delay error (ms)");
  write_json(out / "summary.json", summary);
  return kOk;
}

int cmd_oracle(const Common& c, bool mc_check, int threads) {
  const auto rc = config_or_default(c.config);
  const auto& oc = rc.oracle;
  const auto tp = oc.cross_process();
  tp.validate();
  // Size guard before touching the output directory.
  if (oracle::atom_count(tp) > oracle::kMaxAtoms) oracle::enumerate_joint(tp);
  prepare_out_dir(c.out, c.force);
  write_json(fs::path(c.out) / "resolved_config.json", run_config_to_json(rc));
  const fs::path out(c.out);
  json summary;

  // Symmetric objective on the self-sufficient construction.
  {
    const auto base = oracle::period_two_process(oc.sym_horizon, 0);
    const auto vis = oracle::alternating_visible(oc.sym_horizon);
    const auto sw = oracle::symmetric_delay_sweep(base, vis, vis, oc.sym_delays);
    fs::create_directories(out / "symmetric");
    oracle::write_sweep_csv(out / "symmetric" / "risk_curve.csv", sw);
    json j;
    j["delays"] = sw.delays;
    for (const auto& r : sw.risks) {
      j["risk_with_cross_input"].push_back(r.with_cross_input);
      j["risk_unimodal"].push_back(r.unimodal);
    }
    j["constant_in_delay"] = sw.constant;
    write_json(out / "symmetric" / "summary.json", j);
    summary["symmetric"] = j;
    std::printf("symmetric objective: risk %s across delays\n", sw.constant ? "constant" : "NOT constant");
  }

  auto scan = [&](const std::string& name, const oracle::ToyProcess& p, const std::vector<int>& vis) {
    auto curve = oracle::identifiability_scan(p, vis, 0, p.horizon - 1, threads);
    if (mc_check) oracle::add_mc_check(curve, p, vis, oc.mc_samples, oc.mc_seed);
    fs::create_directories(out / name);
    oracle::write_risk_curve_csv(out / name / "risk_curve.csv", curve);
    json j;
    j["argmin"] = curve.argmin;
    j["unique"] = curve.unique;
    j["true_delay"] = p.delay;
    j["risk_at_truth"] = curve.risks[static_cast<std::size_t>(p.delay)];
    if (mc_check) j["mc_within_3se"] = oracle::mc_agrees(curve);
    write_json(out / name / "summary.json", j);
    summary[name] = j;
    std::printf("%s: argmin %d (%s), true delay %d\n", name.c_str(), curve.argmin, curve.unique ? "unique" : "not unique",
                p.delay);
  };
  scan("cross", tp, oc.visible_ecg);
  // Period-matched chain: delays two apart are indistinguishable.
  scan("degenerate", oracle::period_two_process(oc.horizon, oc.true_delay), oc.visible_ecg);

  write_json(out / "summary.json", summary);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal masked autoencoder toolkit"};
  app.require_subcommand(1);
  std::optional<int> threads_flag;
  app.add_option("--threads", threads_flag, "worker cap (falls back to XMAE_THREADS)")->check(CLI::PositiveNumber);

  Common synth_c, pre_c, eval_c, oracle_c;
  auto* synth = app.add_subcommand("synth", "generate a synthetic paired corpus");
  add_common(synth, synth_c);

  PretrainFlags pf;
  auto* pre = app.add_subcommand("pretrain", "pretrain a model");
  add_common(pre, pre_c);
  pre->add_option("--data", pf.data, "dataset directory")->required();
  pre->add_option("--objective", pf.objective)->check(CLI::IsMember({"xmae", "mm"}));
  pre->add_option("--mask", pf.mask)->check(CLI::IsMember({"contiguous", "random"}));
  pre->add_option("--curriculum", pf.curriculum)->check(CLI::IsMember({"on", "off"}));
  pre->add_option("--mask-ratio", pf.mask_ratio);

  EvalFlags ef;
  auto* ev = app.add_subcommand("eval", "run an evaluation suite");
  add_common(ev, eval_c);
  ev->add_option("--checkpoint", ef.checkpoints, "checkpoint file (repeatable)")->required();
  ev->add_option("--label", ef.labels, "label per checkpoint");
  ev->add_option("--data", ef.data, "dataset directory")->required();
  ev->add_option("--suite", ef.suite)->required()->check(CLI::IsMember({"delay", "hrv", "probe", "recon"}));

  bool mc_check = false;
  auto* orc = app.add_subcommand("oracle", "exact-enumeration delay identifiability checks");
  add_common(orc, oracle_c);
  orc->add_flag("--mc-check", mc_check, "add a Monte-Carlo column");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    const int threads = threads_flag ? *threads_flag : default_thread_count();
    if (*synth) return cmd_synth(synth_c, threads);
    if (*pre) return cmd_pretrain(pre_c, pf, threads);
    if (*ev) return cmd_eval(eval_c, ef, threads);
    return cmd_oracle(oracle_c, mc_check, threads);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}
