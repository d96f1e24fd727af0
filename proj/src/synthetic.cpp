#include "fedcast/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>
#include <string>

#include "fedcast/rng.hpp"

namespace fedcast {

void SyntheticSpec::validate(std::size_t min_length) const {
  if (clients.empty()) throw std::invalid_argument("synthetic: no clients");
  if (length < min_length) {
    throw std::invalid_argument("synthetic: length must be at least " +
                                std::to_string(min_length));
  }
  for (std::size_t i = 0; i < clients.size(); ++i) {
    const auto& c = clients[i];
    const std::string who = "synthetic client " + std::to_string(i);
    if (!(c.ar_coeff > -1.0 && c.ar_coeff < 1.0)) {
      throw std::invalid_argument(who + ": AR coefficient must lie in (-1, 1)");
    }
    if (!(c.period > 0.0)) throw std::invalid_argument(who + ": period must be positive");
    if (!(c.noise_std >= 0.0)) throw std::invalid_argument(who + ": noise must be >= 0");
    if (!(c.amplitude >= 0.0)) throw std::invalid_argument(who + ": amplitude must be >= 0");
    if (!std::isfinite(c.offset)) throw std::invalid_argument(who + ": offset must be finite");
  }
}

SyntheticSpec SyntheticSpec::heterogeneous(std::size_t count, std::size_t length,
                                           double offset_min, double offset_max,
                                           double amplitude_ratio, double noise_ratio) {
  static constexpr double kAr[] = {0.5, 0.8, 0.6, 0.9, 0.7};
  static constexpr double kPeriod[] = {30.0, 55.0, 40.0, 25.0, 60.0, 35.0, 50.0};
  SyntheticSpec s;
  s.length = length;
  for (std::size_t i = 0; i < count; ++i) {
    const double frac = count == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(count - 1);
    SyntheticClientSpec c;
    c.offset = offset_min + frac * (offset_max - offset_min);
    c.ar_coeff = kAr[i % std::size(kAr)];
    c.period = kPeriod[i % std::size(kPeriod)];
    c.amplitude = amplitude_ratio * c.offset;
    c.noise_std = noise_ratio * c.offset;
    s.clients.push_back(c);
  }
  return s;
}

std::vector<ClientTrace> generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<ClientTrace> out;
  for (std::size_t ci = 0; ci < spec.clients.size(); ++ci) {
    const auto& c = spec.clients[ci];
    Rng rng(derive_seed(seed, "synthetic", ci));
    char id[32];
    std::snprintf(id, sizeof id, "synthetic-%02zu", ci);
    ClientTrace tr;
    tr.client_id = id;
    tr.dataset_tag = "synthetic";
    tr.sample_period = 1.0;

    const double phi = c.ar_coeff;
    double e = c.noise_std / std::sqrt(1.0 - phi * phi) * rng.normal();
    double lat = 44.97 + 0.01 * static_cast<double>(ci);
    double lon = -93.26;
    for (std::size_t t = 0; t < spec.length; ++t) {
      if (t > 0) e = phi * e + c.noise_std * rng.normal();
      const double td = static_cast<double>(t);
      TraceRecord r;
      r.timestamp = td;
      r.throughput =
          std::max(0.0, c.offset + c.amplitude * std::sin(2.0 * std::numbers::pi * td / c.period) + e);
      const double level = std::log10(1.0 + r.throughput);
      r.rsrp = -120.0 + 18.0 * level + 1.5 * rng.normal();
      r.sinr = -4.0 + 9.0 * level + 1.0 * rng.normal();
      r.speed = std::abs(8.0 + 3.0 * std::sin(2.0 * std::numbers::pi * td / 90.0) +
                         0.8 * rng.normal());
      lat += 1e-5 * r.speed;
      lon += 5e-6 * r.speed;
      r.latitude = lat;
      r.longitude = lon;
      r.radio_type = RadioType::kNrNsa;
      tr.records.push_back(r);
    }
    out.push_back(std::move(tr));
  }
  return out;
}

}  // namespace fedcast
