#pragma once

#include <cstddef>
#include <vector>

#include "xmae/sigproc.hpp"

namespace xmae {

// Frozen detector constants.
namespace detector {
constexpr double kIntegrationWindowS = 0.150;
constexpr double kRollingMaxWindowS = 2.0;
constexpr double kThresholdFraction = 0.5;
constexpr double kPeakSearchS = 0.060;
constexpr double kRRefractoryS = 0.200;
constexpr double kPpgRefractoryS = 0.300;
constexpr double kOnsetSearchS = 0.400;
}  // namespace detector

// Sample indices of ECG R-peaks: derivative, squaring, 150 ms centred
// integration, adaptive threshold at half the rolling 2 s range, raw-signal
// maximum within +-60 ms of each supra-threshold run, 200 ms refractory.
std::vector<std::size_t> r_peak_indices(const WaveformSegment& ecg);

// Sample indices of PPG systolic peaks: local maxima above half the rolling
// 2 s range with a 300 ms refractory period.
std::vector<std::size_t> ppg_peak_indices(const WaveformSegment& ppg);

// Onset valley for each systolic peak: argmin over the preceding 400 ms.
std::vector<std::size_t> ppg_onset_indices(const WaveformSegment& ppg);

// Same detections expressed in seconds from the segment start.
std::vector<double> detect_r_peaks(const WaveformSegment& ecg);
std::vector<double> detect_ppg_onsets(const WaveformSegment& ppg);

}  // namespace xmae
