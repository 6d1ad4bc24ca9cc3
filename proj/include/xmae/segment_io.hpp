#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xmae/sigproc.hpp"

namespace xmae {

// XSEG layout (little endian):
//   "XSEG" | u16 version=1 | u8 modality | u32 fs | u32 n | n x f32
constexpr std::uint16_t kXsegVersion = 1;

std::vector<std::uint8_t> encode_xseg(const WaveformSegment& seg);
// subject_id and t0 are not part of the binary; they come from the sidecar.
WaveformSegment decode_xseg(std::span<const std::uint8_t> bytes);

void write_xseg(const std::filesystem::path& path, const WaveformSegment& seg);
WaveformSegment read_xseg(const std::filesystem::path& path);

// Sidecar JSON next to each XSEG file, named by the file name up to its first
// '.', so "S000_00.ppg.xseg" and "S000_00.ecg.xseg" share "S000_00.json".
// Beat times are in seconds from the segment start.
struct SegmentMeta {
  std::string subject_id;
  double t0_s = 0.0;
  std::optional<double> delay_ms;
  std::optional<std::vector<double>> rpeaks_s;
  std::optional<std::vector<double>> onsets_s;
};

std::filesystem::path sidecar_path(const std::filesystem::path& xseg_path);
void write_sidecar(const std::filesystem::path& path, const SegmentMeta& meta);
SegmentMeta read_sidecar(const std::filesystem::path& path);

// Reads the XSEG file and its sidecar, filling subject_id and t0.
WaveformSegment load_segment(const std::filesystem::path& xseg_path, SegmentMeta* meta_out = nullptr);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace xmae
