#include "xmae/segment_io.hpp"

#include <fstream>
#include <iterator>

#include "json.hpp"
#include "xmae/byteio.hpp"
#include "xmae/error.hpp"

namespace xmae {

using nlohmann::json;

std::vector<std::uint8_t> encode_xseg(const WaveformSegment& seg) {
  std::vector<std::uint8_t> out;
  out.reserve(15 + 4 * seg.samples.size());
  byteio::put_bytes(out, "XSEG");
  byteio::put<std::uint16_t>(out, kXsegVersion);
  byteio::put<std::uint8_t>(out, static_cast<std::uint8_t>(seg.modality));
  byteio::put<std::uint32_t>(out, static_cast<std::uint32_t>(seg.fs));
  byteio::put<std::uint32_t>(out, static_cast<std::uint32_t>(seg.samples.size()));
  for (double v : seg.samples) byteio::put<float>(out, static_cast<float>(v));
  return out;
}

WaveformSegment decode_xseg(std::span<const std::uint8_t> bytes) {
  byteio::Reader r(bytes);
  if (r.get_string(4) != "XSEG") throw Error(ErrorKind::Format, "bad XSEG magic");
  if (const auto v = r.get<std::uint16_t>(); v != kXsegVersion) {
    throw Error(ErrorKind::Format, "unsupported XSEG version " + std::to_string(v));
  }
  WaveformSegment seg;
  const auto mod = r.get<std::uint8_t>();
  if (mod > 1) throw Error(ErrorKind::Format, "bad modality byte");
  seg.modality = static_cast<Modality>(mod);
  seg.fs = static_cast<int>(r.get<std::uint32_t>());
  if (seg.fs <= 0) throw Error(ErrorKind::Format, "fs must be positive");
  const auto n = r.get<std::uint32_t>();
  if (r.remaining() != 4ULL * n) throw Error(ErrorKind::Format, "sample count does not match payload");
  seg.samples.resize(n);
  for (auto& v : seg.samples) v = static_cast<double>(r.get<float>());
  return seg;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

void write_xseg(const std::filesystem::path& path, const WaveformSegment& seg) {
  write_file_bytes(path, encode_xseg(seg));
}

WaveformSegment read_xseg(const std::filesystem::path& path) { return decode_xseg(read_file_bytes(path)); }

std::filesystem::path sidecar_path(const std::filesystem::path& xseg_path) {
  const auto name = xseg_path.filename().string();
  return xseg_path.parent_path() / (name.substr(0, name.find('.')) + ".json");
}

void write_sidecar(const std::filesystem::path& path, const SegmentMeta& meta) {
  json j;
  j["subject_id"] = meta.subject_id;
  j["t0_s"] = meta.t0_s;
  if (meta.delay_ms) j["delay_ms"] = *meta.delay_ms;
  if (meta.rpeaks_s) j["rpeaks_s"] = *meta.rpeaks_s;
  if (meta.onsets_s) j["onsets_s"] = *meta.onsets_s;
  const auto text = j.dump(1) + "\n";
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

SegmentMeta read_sidecar(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, path.string() + ": " + e.what());
  }
  SegmentMeta m;
  try {
    m.subject_id = j.at("subject_id").get<std::string>();
    m.t0_s = j.at("t0_s").get<double>();
    if (j.contains("delay_ms")) m.delay_ms = j["delay_ms"].get<double>();
    if (j.contains("rpeaks_s")) m.rpeaks_s = j["rpeaks_s"].get<std::vector<double>>();
    if (j.contains("onsets_s")) m.onsets_s = j["onsets_s"].get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, path.string() + ": " + e.what());
  }
  return m;
}

WaveformSegment load_segment(const std::filesystem::path& xseg_path, SegmentMeta* meta_out) {
  auto seg = read_xseg(xseg_path);
  const auto meta = read_sidecar(sidecar_path(xseg_path));
  seg.subject_id = meta.subject_id;
  seg.t0 = meta.t0_s;
  if (meta_out != nullptr) *meta_out = meta;
  return seg;
}

}  // namespace xmae
