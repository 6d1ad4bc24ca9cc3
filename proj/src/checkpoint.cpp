#include "xmae/checkpoint.hpp"

#include "xmae/byteio.hpp"
#include "xmae/error.hpp"
#include "xmae/segment_io.hpp"

namespace xmae {

using nlohmann::json;

namespace {

constexpr std::uint32_t kCkptVersion = 1;
const std::string kOptimM = "optim.m.";
const std::string kOptimV = "optim.v.";
const std::string kOptimStep = "optim.step";

void put_tensor(std::vector<std::uint8_t>& out, const std::string& name, const Mat<float>& m) {
  if (name.size() > 0xffff) throw Error(ErrorKind::Format, "tensor name too long");
  byteio::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  byteio::put_bytes(out, name);
  byteio::put<std::uint8_t>(out, 2);
  byteio::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
  byteio::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) byteio::put<float>(out, m.data()[i]);
}

}  // namespace

OptimState make_optim_state(const ModelParams<float>& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

json model_config_to_json(const ModelConfig& c, Objective objective) {
  return json{{"objective", std::string(to_string(objective))},
              {"seq_len", c.seq_len},
              {"patch_len", c.patch_len},
              {"conv_widths", c.conv_widths},
              {"conv_out", c.conv_out},
              {"conv_kernel", c.conv_kernel},
              {"embed_dim", c.embed_dim},
              {"ff_dim", c.ff_dim},
              {"heads", c.heads},
              {"depth_ppg", c.depth_ppg},
              {"depth_ecg", c.depth_ecg},
              {"depth_bridge", c.depth_bridge},
              {"depth_decoder", c.depth_decoder},
              {"dropout", c.dropout}};
}

ModelConfig model_config_from_json(const json& j, Objective* objective) {
  if (!j.is_object()) throw Error(ErrorKind::Config, "model config must be an object");
  ModelConfig c;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      const auto& v = it.value();
      if (k == "objective") {
        const auto s = v.get<std::string>();
        if (s != "xmae" && s != "mm_baseline" && s != "mm") throw Error(ErrorKind::Config, "unknown objective " + s);
        if (objective) *objective = s == "xmae" ? Objective::Xmae : Objective::MmBaseline;
      } else if (k == "seq_len") {
        c.seq_len = v.get<int>();
      } else if (k == "patch_len") {
        c.patch_len = v.get<int>();
      } else if (k == "conv_widths") {
        c.conv_widths = v.get<std::vector<int>>();
      } else if (k == "conv_out") {
        c.conv_out = v.get<int>();
      } else if (k == "conv_kernel") {
        c.conv_kernel = v.get<int>();
      } else if (k == "embed_dim") {
        c.embed_dim = v.get<int>();
      } else if (k == "ff_dim") {
        c.ff_dim = v.get<int>();
      } else if (k == "heads") {
        c.heads = v.get<int>();
      } else if (k == "depth_ppg") {
        c.depth_ppg = v.get<int>();
      } else if (k == "depth_ecg") {
        c.depth_ecg = v.get<int>();
      } else if (k == "depth_bridge") {
        c.depth_bridge = v.get<int>();
      } else if (k == "depth_decoder") {
        c.depth_decoder = v.get<int>();
      } else if (k == "dropout") {
        c.dropout = v.get<double>();
      } else {
        throw Error(ErrorKind::Config, "unknown model key '" + k + "'");
      }
    }
    c.validate();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Config, std::string("model config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw Error(ErrorKind::Config, e.what());
  }
  return c;
}

std::vector<std::uint8_t> encode_checkpoint(const ModelParams<float>& params, const OptimState* optim) {
  std::vector<std::uint8_t> out;
  byteio::put_bytes(out, "XCKP");
  byteio::put<std::uint32_t>(out, kCkptVersion);
  const auto cfg = model_config_to_json(params.config, params.objective).dump();
  byteio::put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  byteio::put_bytes(out, cfg);

  std::uint32_t count = 0;
  params.for_each([&](const std::string&, const Mat<float>&, bool) { ++count; });
  if (optim) count = 3 * count + 1;  // params, m, v, step
  byteio::put<std::uint32_t>(out, count);
  params.for_each([&](const std::string& n, const Mat<float>& m, bool) { put_tensor(out, n, m); });
  if (optim) {
    optim->m.for_each([&](const std::string& n, const Mat<float>& m, bool) { put_tensor(out, kOptimM + n, m); });
    optim->v.for_each([&](const std::string& n, const Mat<float>& m, bool) { put_tensor(out, kOptimV + n, m); });
    Mat<float> step(1, 1);
    step(0, 0) = static_cast<float>(optim->step);
    put_tensor(out, kOptimStep, step);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  byteio::Reader r(bytes);
  if (r.get_string(4) != "XCKP") throw Error(ErrorKind::Format, "bad checkpoint magic");
  if (const auto v = r.get<std::uint32_t>(); v != kCkptVersion)
    throw Error(ErrorKind::IncompatibleCheckpoint, "unsupported checkpoint version " + std::to_string(v));
  const auto cfg_len = r.get<std::uint32_t>();
  json cfg_json;
  try {
    cfg_json = json::parse(r.get_string(cfg_len));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, std::string("checkpoint config: ") + e.what());
  }
  Objective obj = Objective::Xmae;
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(cfg_json, &obj);
  } catch (const Error& e) {
    throw Error(ErrorKind::IncompatibleCheckpoint, e.what());
  }

  std::map<std::string, StoredTensor> tensors;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.get_string(r.get<std::uint16_t>());
    StoredTensor t;
    const auto rank = r.get<std::uint8_t>();
    std::size_t n = 1;
    for (int d = 0; d < rank; ++d) {
      t.dims.push_back(r.get<std::uint32_t>());
      n *= t.dims.back();
    }
    if (n > r.remaining() / 4) throw Error(ErrorKind::Format, "tensor " + name + " overruns the file");
    t.data.resize(n);
    for (auto& x : t.data) x = r.get<float>();
    if (!tensors.emplace(name, std::move(t)).second) throw Error(ErrorKind::Format, "duplicate tensor " + name);
  }
  if (!r.done()) throw Error(ErrorKind::Format, "trailing bytes after checkpoint");

  auto fill = [&](const std::string& name, Mat<float>& m) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error(ErrorKind::IncompatibleCheckpoint, "missing tensor " + name);
    const auto& t = it->second;
    if (t.dims.size() != 2 || t.dims[0] != m.rows() || t.dims[1] != m.cols())
      throw Error(ErrorKind::IncompatibleCheckpoint, "shape mismatch for " + name);
    std::copy(t.data.begin(), t.data.end(), m.data());
    tensors.erase(it);
  };

  Checkpoint ck{init_params<float>(cfg, obj, 0), std::nullopt};
  ck.params.for_each([&](const std::string& n, Mat<float>& m, bool) { fill(n, m); });
  if (tensors.count(kOptimStep)) {
    OptimState st = make_optim_state(ck.params);
    st.m.for_each([&](const std::string& n, Mat<float>& m, bool) { fill(kOptimM + n, m); });
    st.v.for_each([&](const std::string& n, Mat<float>& m, bool) { fill(kOptimV + n, m); });
    Mat<float> step(1, 1);
    fill(kOptimStep, step);
    st.step = static_cast<std::int64_t>(step(0, 0));
    ck.optim = std::move(st);
  }
  if (!tensors.empty())
    throw Error(ErrorKind::IncompatibleCheckpoint, "unexpected tensor " + tensors.begin()->first);
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params, const OptimState* optim) {
  write_file_bytes(path, encode_checkpoint(params, optim));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace xmae
