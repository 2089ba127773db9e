#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "otafl/common.hpp"
#include "otafl/rng.hpp"

namespace otafl {

enum class FadingKind { none, rayleigh, fixed };
enum class GainFloorPolicy { clamp, redraw };

struct Fading {
  FadingKind kind = FadingKind::none;
  double scale = 1.0;          // Rayleigh scale s; E[h^2] = 2 s^2
  std::vector<double> gains;   // FadingKind::fixed
  double floor_factor = 0.1;   // h_min = floor_factor * scale
  GainFloorPolicy floor_policy = GainFloorPolicy::clamp;
};

/// Uplink Gaussian MAC: y = sum_i h_i z_i + w, w ~ N(0, sigma_c2 I_d).
struct ChannelConfig {
  double sigma_c2 = 0.0;
  Fading fading;
  std::uint64_t seed = 0;

  void validate() const {
    require(std::isfinite(sigma_c2) && sigma_c2 >= 0.0, "channel noise variance must be finite and >= 0");
    if (fading.kind == FadingKind::rayleigh) require(fading.scale > 0.0, "Rayleigh scale must be > 0");
    if (fading.kind == FadingKind::fixed)
      for (double h : fading.gains) require(h > 0.0 && std::isfinite(h), "fixed gains must be positive");
  }
};

struct PowerCheck {
  bool ok = true;
  double excess = 0.0;  // |z|^2 - limit when violated
  explicit operator bool() const { return ok; }
};

/// |z|^2 <= limit, boundary inclusive. An infinite limit always passes.
inline PowerCheck check_power(const Vector& z, double limit) {
  require(limit > 0.0, "power limit must be > 0");
  const double energy = z.squaredNorm();
  if (energy <= limit) return {true, 0.0};
  return {false, energy - limit};
}

/// Per-coordinate noise variance for a given SNR: (reference_power / d) over
/// 10^(snr_db / 10).
inline double sigma_from_snr(double snr_db, double reference_power, std::size_t d) {
  require(reference_power > 0.0 && std::isfinite(reference_power), "reference power must be finite and > 0");
  require(d >= 1, "dimension must be >= 1");
  return (reference_power / static_cast<double>(d)) / std::pow(10.0, snr_db / 10.0);
}

inline Rng noise_stream(const ChannelConfig& cfg, std::size_t round) {
  return make_stream(cfg.seed, StreamTag::channel_noise, round);
}

struct GainDraw {
  std::vector<double> h;
  std::size_t clamped = 0;
};

/// Channel gains of round `round`. Draws come from a stream keyed by
/// (seed, round) so they do not depend on how clients are scheduled.
inline GainDraw draw_gains(const ChannelConfig& cfg, std::size_t m, std::size_t round) {
  GainDraw out;
  switch (cfg.fading.kind) {
    case FadingKind::none:
      out.h.assign(m, 1.0);
      break;
    case FadingKind::fixed:
      require(cfg.fading.gains.size() == m, "fixed gain vector length differs from client count");
      out.h = cfg.fading.gains;
      break;
    case FadingKind::rayleigh: {
      Rng rng = make_stream(cfg.seed, StreamTag::channel_gain, round);
      std::uniform_real_distribution<double> u01(0.0, 1.0);
      const double s = cfg.fading.scale;
      const double floor = cfg.fading.floor_factor * s;
      auto draw = [&] { return s * std::sqrt(-2.0 * std::log1p(-u01(rng))); };
      out.h.resize(m);
      for (auto& h : out.h) {
        h = draw();
        if (h >= floor) continue;
        ++out.clamped;
        if (cfg.fading.floor_policy == GainFloorPolicy::clamp) {
          h = floor;
        } else {
          while (h < floor) h = draw();
        }
      }
      break;
    }
  }
  return out;
}

/// Noise-free channel output sum_i gains_i z_i, summed in client order.
inline Vector superpose(std::span<const Vector> z, std::span<const double> gains, std::size_t dim) {
  require(z.size() == gains.size(), "one gain per channel input required");
  Vector y = Vector::Zero(static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < z.size(); ++i) {
    require(static_cast<std::size_t>(z[i].size()) == dim, "channel input dimension mismatch");
    y += gains[i] * z[i];
  }
  return y;
}

inline void add_channel_noise(Vector& y, double sigma_c2, Rng& rng) {
  if (sigma_c2 <= 0.0) return;
  std::normal_distribution<double> n01(0.0, 1.0);
  const double sd = std::sqrt(sigma_c2);
  for (Eigen::Index j = 0; j < y.size(); ++j) y(j) += sd * n01(rng);
}

/// One synchronous channel use: all inputs of the round together, noise added
/// once to the aggregate.
inline Vector transmit(std::span<const Vector> z, std::span<const double> gains, std::size_t dim,
                       const ChannelConfig& cfg, Rng& rng) {
  Vector y = superpose(z, gains, dim);
  add_channel_noise(y, cfg.sigma_c2, rng);
  return y;
}

}  // namespace otafl
