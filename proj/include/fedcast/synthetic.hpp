#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fedcast/trace.hpp"

namespace fedcast {

struct SyntheticClientSpec {
  double ar_coeff = 0.7;
  double offset = 50.0;     // Mbps
  double amplitude = 15.0;  // Mbps
  double period = 40.0;     // seconds
  double noise_std = 4.0;   // AR innovation stddev, Mbps
};

struct SyntheticSpec {
  std::vector<SyntheticClientSpec> clients;
  std::size_t length = 400;

  /// Throws std::invalid_argument naming the first offending client.
  void validate(std::size_t min_length = 2) const;

  /// `count` clients with offsets spread evenly over [offset_min, offset_max]
  /// and AR coefficients, periods and noise levels interleaved so that
  /// neighbouring clients differ on every axis.
  static SyntheticSpec heterogeneous(std::size_t count, std::size_t length,
                                     double offset_min = 10.0, double offset_max = 100.0,
                                     double amplitude_ratio = 0.3, double noise_ratio = 0.08);
};

/// tput(t) = offset + A sin(2 pi t / P) + e(t), e an AR(1) process started
/// from its stationary law, clipped at 0. RSRP and SINR are noisy increasing
/// functions of tput; speed and position follow a slow drive.
std::vector<ClientTrace> generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

}  // namespace fedcast
