#include "xmae/run_config.hpp"

#include <set>

#include "xmae/checkpoint.hpp"
#include "xmae/error.hpp"

namespace xmae {

using nlohmann::json;

oracle::ToyProcess OracleConfig::cross_process() const {
  oracle::ToyProcess tp;
  tp.transition = transition;
  tp.horizon = horizon;
  tp.delay = true_delay;
  tp.emit_ecg = emit_ecg;
  tp.emit_ppg = emit_ppg;
  if (flip_prob > 0.0) {
    tp.noise = oracle::ObsNoise::Flip;
    tp.flip_prob = flip_prob;
  }
  return tp;
}

namespace {

template <typename E>
struct EnumNames {
  std::vector<std::pair<E, std::string>> names;
  std::vector<std::pair<std::string, E>> aliases;
};

const EnumNames<Objective> kObjectiveNames{{{Objective::Xmae, "xmae"}, {Objective::MmBaseline, "mm_baseline"}},
                                          {{"mm", Objective::MmBaseline}}};
const EnumNames<MaskMode> kMaskNames{{{MaskMode::Contiguous, "contiguous"}, {MaskMode::Random, "random"}}, {}};
const EnumNames<EvalSplit> kSplitNames{{{EvalSplit::Validation, "validation"}, {EvalSplit::All, "all"}}, {}};

template <typename E>
E enum_from(const EnumNames<E>& t, const std::string& s, const std::string& key) {
  for (const auto& [e, n] : t.names)
    if (n == s) return e;
  for (const auto& [n, e] : t.aliases)
    if (n == s) return e;
  throw Error(ErrorKind::Config, key + ": unknown value '" + s + "'");
}

template <typename E>
std::string enum_name(const EnumNames<E>& t, E e) {
  for (const auto& [v, n] : t.names)
    if (v == e) return n;
  return "?";
}

// Reads the keys a section binds and rejects the rest.
class Reader {
 public:
  Reader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw Error(ErrorKind::Config, section_ + " must be an object");
  }

  template <typename T>
  void operator()(const std::string& key, T& ref) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      read(j_.at(key), ref, section_ + "." + key);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Config, section_ + "." + key + ": " + e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw Error(ErrorKind::Config, "unknown key '" + section_ + "." + it.key() + "'");
  }

 private:
  template <typename T>
  static void read(const json& v, T& ref, const std::string&) {
    ref = v.get<T>();
  }
  static void read(const json& v, Range& r, const std::string& key) {
    const auto a = v.get<std::vector<double>>();
    if (a.size() != 2 || a[0] > a[1]) throw Error(ErrorKind::Config, key + " must be [lo, hi] with lo <= hi");
    r = {a[0], a[1]};
  }
  static void read(const json& v, Objective& o, const std::string& key) { o = enum_from(kObjectiveNames, v.get<std::string>(), key); }
  static void read(const json& v, MaskMode& m, const std::string& key) { m = enum_from(kMaskNames, v.get<std::string>(), key); }
  static void read(const json& v, EvalSplit& s, const std::string& key) { s = enum_from(kSplitNames, v.get<std::string>(), key); }

  const json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  template <typename T>
  void operator()(const std::string& key, const T& v) {
    out[key] = v;
  }
  void operator()(const std::string& key, const Range& r) { out[key] = {r.lo, r.hi}; }
  void operator()(const std::string& key, const Objective& o) { out[key] = enum_name(kObjectiveNames, o); }
  void operator()(const std::string& key, const MaskMode& m) { out[key] = enum_name(kMaskNames, m); }
  void operator()(const std::string& key, const EvalSplit& s) { out[key] = enum_name(kSplitNames, s); }

  json out = json::object();
};

template <typename V, typename S>
void bind_synth(V& v, S& c) {
  v("n_subjects", c.n_subjects);
  v("segs_per_subject", c.segs_per_subject);
  v("seed", c.seed);
  v("render_fs", c.render_fs);
  v("segment_s", c.segment_s);
  v("apply_preprocess", c.apply_preprocess);
  v("delay_ms", c.ranges.delay_ms);
  v("rr_mean_ms", c.ranges.rr_mean_ms);
  v("rr_sd_ms", c.ranges.rr_sd_ms);
  v("rr_ar1", c.ranges.rr_ar1);
  v("noise_sd", c.ranges.noise_sd);
  v("jitter_sd_ms", c.ranges.jitter_sd_ms);
  v("delay_morphology_coupling", c.ranges.delay_morphology_coupling);
}

template <typename V, typename P>
void bind_preprocess(V& v, P& c) {
  v("ppg_low_hz", c.ppg_low_hz);
  v("ppg_high_hz", c.ppg_high_hz);
  v("ppg_order", c.ppg_order);
  v("ecg_low_hz", c.ecg_low_hz);
  v("ecg_order", c.ecg_order);
  v("powerline_hz", c.powerline_hz);
  v("target_fs", c.target_fs);
  v("quality_gate", c.quality_gate);
}

template <typename V, typename T>
void bind_train(V& v, T& c) {
  v("epochs", c.epochs);
  v("patience", c.patience);
  v("batch_size", c.batch_size);
  v("base_lr", c.base_lr);
  v("weight_decay", c.weight_decay);
  v("beta1", c.beta1);
  v("beta2", c.beta2);
  v("adam_eps", c.adam_eps);
  v("warmup_frac", c.warmup_frac);
  v("clip_norm", c.clip_norm);
  v("seed", c.seed);
  v("objective", c.objective);
  v("curriculum", c.curriculum);
  v("mask_mode", c.mask_mode);
  v("mask_ratio", c.mask_ratio);
  v("curriculum_start", c.curriculum_state.m0);
  v("curriculum_max", c.curriculum_state.m_max);
  v("curriculum_step", c.curriculum_state.step);
  v("curriculum_threshold", c.curriculum_state.improve_threshold);
  v("mm_ratio_ecg", c.mm_ratio_ecg);
  v("mm_ratio_ppg", c.mm_ratio_ppg);
  v("val_frac", c.val_frac);
  v("quality_gate", c.quality_gate);
}

template <typename V, typename E>
void bind_eval(V& v, E& c) {
  v("mask_ratio", c.options.mask_ratio);
  v("seed", c.options.seed);
  v("probe_lambda", c.options.probe_lambda);
  v("split", c.split);
}

template <typename V, typename O>
void bind_oracle(V& v, O& c) {
  v("horizon", c.horizon);
  v("true_delay", c.true_delay);
  v("transition", c.transition);
  v("emit_ecg", c.emit_ecg);
  v("emit_ppg", c.emit_ppg);
  v("flip_prob", c.flip_prob);
  v("visible_ecg", c.visible_ecg);
  v("sym_horizon", c.sym_horizon);
  v("sym_delays", c.sym_delays);
  v("mc_samples", c.mc_samples);
  v("mc_seed", c.mc_seed);
}

template <typename Bind, typename T>
void read_section(const json& root, const char* name, T& target, Bind bind) {
  if (!root.contains(name)) return;
  Reader r(root.at(name), name);
  bind(r, target);
  r.finish();
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorKind::Config, "run config must be a JSON object");
  static const std::set<std::string> kSections{"synth", "preprocess", "model", "train", "eval", "oracle"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!kSections.count(it.key())) throw Error(ErrorKind::Config, "unknown section '" + it.key() + "'");

  RunConfig c;
  read_section(j, "synth", c.synth, [](auto& v, auto& t) { bind_synth(v, t); });
  read_section(j, "preprocess", c.synth.preprocess, [](auto& v, auto& t) { bind_preprocess(v, t); });
  read_section(j, "train", c.train, [](auto& v, auto& t) { bind_train(v, t); });
  read_section(j, "eval", c.eval, [](auto& v, auto& t) { bind_eval(v, t); });
  read_section(j, "oracle", c.oracle, [](auto& v, auto& t) { bind_oracle(v, t); });
  if (j.contains("model")) {
    if (j.at("model").is_object() && j.at("model").contains("objective"))
      throw Error(ErrorKind::Config, "unknown key 'model.objective' (the objective lives in train)");
    c.model = model_config_from_json(j.at("model"));
  }
  c.train.curriculum_state.m_current = c.train.curriculum_state.m0;

  try {
    c.train.validate();
    c.oracle.cross_process().validate();
    if (!(c.eval.options.mask_ratio > 0.0 && c.eval.options.mask_ratio < 1.0))
      throw std::invalid_argument("eval.mask_ratio must lie in (0, 1)");
    if (!(c.eval.options.probe_lambda > 0.0)) throw std::invalid_argument("eval.probe_lambda must be positive");
    if (c.synth.n_subjects < 1 || c.synth.segs_per_subject < 1)
      throw std::invalid_argument("synth needs at least one subject and one segment");
  } catch (const std::invalid_argument& e) {
    throw Error(ErrorKind::Config, e.what());
  }
  return c;
}

json run_config_to_json(const RunConfig& c) {
  json j;
  Writer w;
  bind_synth(w, c.synth);
  j["synth"] = std::move(w.out);
  w.out = json::object();
  bind_preprocess(w, c.synth.preprocess);
  j["preprocess"] = std::move(w.out);
  auto model = model_config_to_json(c.model, c.train.objective);
  model.erase("objective");
  j["model"] = std::move(model);
  w.out = json::object();
  bind_train(w, c.train);
  j["train"] = std::move(w.out);
  w.out = json::object();
  bind_eval(w, c.eval);
  j["eval"] = std::move(w.out);
  w.out = json::object();
  bind_oracle(w, c.oracle);
  j["oracle"] = std::move(w.out);
  return j;
}

json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    // The parser message carries line and column.
    throw Error(ErrorKind::Config, origin + ": " + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return run_config_from_json(parse_json_text(std::string(bytes.begin(), bytes.end()), path.string()));
}

}  // namespace xmae
