#pragma once

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "xmae/error.hpp"
#include "xmae/rng.hpp"

namespace th {

// Plain O(n) DFT bin of x at frequency f (Hz).
inline std::complex<double> dft_at(const std::vector<double>& x, double f, double fs) {
  std::complex<double> acc = 0.0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    const double ph = -2.0 * std::numbers::pi * f * static_cast<double>(n) / fs;
    acc += x[n] * std::complex<double>(std::cos(ph), std::sin(ph));
  }
  return acc;
}

inline std::vector<double> tone(double f, double fs, std::size_t n, double amp = 1.0, double phase = 0.0) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(i) / fs + phase);
  return x;
}

inline std::vector<double> noise(std::size_t n, std::uint64_t seed, double sd = 1.0) {
  xmae::Rng r(seed);
  std::vector<double> x(n);
  for (auto& v : x) v = sd * r.normal();
  return x;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("xmae_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Kind of the xmae::Error thrown by f, or nullopt when nothing is thrown.
template <typename F>
std::optional<xmae::ErrorKind> error_kind(F&& f) {
  try {
    f();
  } catch (const xmae::Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

}  // namespace th
