#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "twinbeam/error.hpp"
#include "twinbeam/fft.hpp"
#include "twinbeam/image.hpp"
#include "twinbeam/parallel.hpp"
#include "twinbeam/rng.hpp"
#include "twinbeam/spectrum.hpp"
#include "twinbeam/stackio.hpp"

namespace twinbeam {

struct BeamProfile {
  enum class Kind { Gaussian, Flat };
  Kind kind = Kind::Gaussian;
  double center_x = 0.0;
  double center_y = 0.0;
  double sigma_beam_px = 40.0;

  static BeamProfile gaussian(double cx, double cy, double sigma) { return {Kind::Gaussian, cx, cy, sigma}; }
  static BeamProfile flat() { return {Kind::Flat, 0.0, 0.0, 0.0}; }
};

/// Parameters of the photon-pair generator.
struct SimParams {
  FieldMode mode = FieldMode::NearField;
  std::size_t width = 512;
  std::size_t height = 170;
  BeamProfile mean_profile = BeamProfile::gaussian(256.0, 85.0, 45.0);
  double pairs_per_frame = 3e5;
  double jitter_sigma_x = 4.25;
  double jitter_sigma_y = 3.50;
  double eta_p = 0.7;
  double eta_c = 0.7;
  double bg_rate = 0.0;
  std::size_t n_acquisitions = 200;
  std::uint64_t seed = 1;
  /// Use exactly round(pairs_per_frame) pairs instead of a Poisson count.
  bool fixed_pair_count = false;
  /// Emit background frames (probe seed off) with each acquisition.
  bool background_frames = true;

  void validate() const {
    require(width > 0 && height > 0, Errc::InvalidParameter, "frame size must be positive");
    require(n_acquisitions > 0, Errc::InvalidParameter, "n_acquisitions must be > 0");
    require(pairs_per_frame >= 0.0 && std::isfinite(pairs_per_frame), Errc::InvalidParameter,
            "pairs_per_frame must be finite and >= 0");
    require(jitter_sigma_x >= 0.0 && jitter_sigma_y >= 0.0, Errc::InvalidParameter, "jitter must be >= 0");
    require(eta_p >= 0.0 && eta_p <= 1.0 && eta_c >= 0.0 && eta_c <= 1.0, Errc::InvalidParameter,
            "detection efficiencies must lie in [0, 1]");
    require(bg_rate >= 0.0 && std::isfinite(bg_rate), Errc::InvalidParameter, "bg_rate must be >= 0");
    if (mean_profile.kind == BeamProfile::Kind::Gaussian) {
      require(mean_profile.sigma_beam_px > 0.0, Errc::InvalidParameter, "sigma_beam_px must be > 0");
    }
  }
};

/// Frames tuned so that the correlation widths match the measured ones:
/// 512 x 170 camera, Gaussian beam, 3e5 pairs, 70% detection, 0.5 counts of
/// background per pixel.
inline SimParams tuned_preset(FieldMode mode) {
  SimParams p;
  p.mode = mode;
  p.eta_p = p.eta_c = 0.7;
  p.bg_rate = 0.5;
  if (mode == FieldMode::NearField) {
    p.jitter_sigma_x = 4.250;
    p.jitter_sigma_y = 3.496;
  } else {
    p.jitter_sigma_x = 4.763;
    p.jitter_sigma_y = 4.883;
  }
  return p;
}

/// Asymptotic noise ratio of the pair model for super-pixels much larger than
/// the jitter, with no background.
inline double expected_nr(double eta_p, double eta_c) {
  require(eta_p >= 0.0 && eta_p <= 1.0 && eta_c >= 0.0 && eta_c <= 1.0, Errc::InvalidParameter,
          "efficiencies must lie in [0, 1]");
  if (eta_p + eta_c == 0.0) return 1.0;
  return 1.0 - 2.0 * eta_p * eta_c / (eta_p + eta_c);
}

namespace detail {

enum StreamFrame : std::uint64_t { kFrame1 = 0, kFrame2 = 1, kBgProbe = 2, kBgConj = 3 };
inline constexpr std::uint64_t kCoherentDomain = 0x636f686572656e74ULL;  // "coherent"

inline void deposit(Image<float>& img, double x, double y) {
  if (!(x >= 0.0 && y >= 0.0)) return;
  const auto ix = static_cast<std::size_t>(x);
  const auto iy = static_cast<std::size_t>(y);
  if (ix < img.width() && iy < img.height()) img(ix, iy) += 1.0f;
}

inline void draw_position(const SimParams& p, Rng& rng, double& x, double& y) {
  if (p.mean_profile.kind == BeamProfile::Kind::Gaussian) {
    x = p.mean_profile.center_x + p.mean_profile.sigma_beam_px * rng.normal();
    y = p.mean_profile.center_y + p.mean_profile.sigma_beam_px * rng.normal();
  } else {
    x = static_cast<double>(p.width) * rng.uniform();
    y = static_cast<double>(p.height) * rng.uniform();
  }
}

// Continuous mirror x -> W - x maps pixel i onto pixel W-1-i.
inline void mirror(const SimParams& p, double& x, double& y) {
  x = static_cast<double>(p.width) - x;
  y = static_cast<double>(p.height) - y;
}

inline void add_background(Image<float>& img, double rate, Rng& rng) {
  if (rate <= 0.0) return;
  for (auto& v : img.pixels()) v += static_cast<float>(rng.poisson(rate));
}

inline std::uint64_t pair_count(const SimParams& p, Rng& rng) {
  return p.fixed_pair_count ? static_cast<std::uint64_t>(std::llround(p.pairs_per_frame))
                            : rng.poisson(p.pairs_per_frame);
}

inline void twin_frame(const SimParams& p, std::size_t acq, std::uint64_t frame, Image<float>& probe,
                       Image<float>& conj) {
  Rng rng(stream_seed(p.seed, acq, frame));
  probe = Image<float>(p.width, p.height);
  conj = Image<float>(p.width, p.height);
  const std::uint64_t k = pair_count(p, rng);
  for (std::uint64_t i = 0; i < k; ++i) {
    double xp, yp;
    draw_position(p, rng, xp, yp);
    double xc = xp, yc = yp;
    if (p.mode == FieldMode::FarField) mirror(p, xc, yc);
    if (p.jitter_sigma_x > 0.0) xc += p.jitter_sigma_x * rng.normal();
    if (p.jitter_sigma_y > 0.0) yc += p.jitter_sigma_y * rng.normal();
    if (rng.uniform() < p.eta_p) deposit(probe, xp, yp);
    if (rng.uniform() < p.eta_c) deposit(conj, xc, yc);
  }
  add_background(probe, p.bg_rate, rng);
  add_background(conj, p.bg_rate, rng);
}

inline void background_pair(const SimParams& p, std::uint64_t seed, std::size_t acq, AcquisitionSet& out) {
  Rng rp(stream_seed(seed, acq, kBgProbe));
  Rng rc(stream_seed(seed, acq, kBgConj));
  out.bg_probe = Image<float>(p.width, p.height);
  out.bg_conj = Image<float>(p.width, p.height);
  add_background(*out.bg_probe, p.bg_rate, rp);
  add_background(*out.bg_conj, p.bg_rate, rc);
}

}  // namespace detail

/// One twin-beam acquisition. Deterministic in (seed, index); independent of
/// how acquisitions are scheduled.
inline AcquisitionSet simulate_acquisition(const SimParams& params, std::size_t index) {
  AcquisitionSet a;
  detail::twin_frame(params, index, detail::kFrame1, a.probe_f1, a.conj_f1);
  detail::twin_frame(params, index, detail::kFrame2, a.probe_f2, a.conj_f2);
  if (params.background_frames) detail::background_pair(params, params.seed, index, a);
  return a;
}

inline std::vector<AcquisitionSet> simulate_acquisitions(const SimParams& params) {
  params.validate();
  std::vector<AcquisitionSet> out(params.n_acquisitions);
  parallel_for(out.size(), [&](std::size_t i) { out[i] = simulate_acquisition(params, i); });
  return out;
}

/// Shot-noise-limit calibration: probe and conjugate are independent Poisson
/// fields with the same mean profile (mirrored in the far field). Detection
/// efficiencies are ignored.
inline AcquisitionSet simulate_coherent_acquisition(const SimParams& params, std::size_t index) {
  const std::uint64_t seed = params.seed ^ detail::kCoherentDomain;
  auto beam = [&](std::uint64_t frame, bool conjugate) {
    Rng rng(stream_seed(seed, index, 2 * frame + (conjugate ? 1 : 0)));
    Image<float> img(params.width, params.height);
    const std::uint64_t k = detail::pair_count(params, rng);
    for (std::uint64_t i = 0; i < k; ++i) {
      double x, y;
      detail::draw_position(params, rng, x, y);
      if (conjugate && params.mode == FieldMode::FarField) detail::mirror(params, x, y);
      detail::deposit(img, x, y);
    }
    detail::add_background(img, params.bg_rate, rng);
    return img;
  };
  AcquisitionSet a;
  a.probe_f1 = beam(0, false);
  a.conj_f1 = beam(0, true);
  a.probe_f2 = beam(1, false);
  a.conj_f2 = beam(1, true);
  if (params.background_frames) detail::background_pair(params, seed, index, a);
  return a;
}

inline std::vector<AcquisitionSet> simulate_coherent_pair(const SimParams& params) {
  params.validate();
  std::vector<AcquisitionSet> out(params.n_acquisitions);
  parallel_for(out.size(), [&](std::size_t i) { out[i] = simulate_coherent_acquisition(params, i); });
  return out;
}

// ---------------------------------------------------------------------------
// Temporal traces
// ---------------------------------------------------------------------------

struct TemporalSimParams {
  SpectrumModel spectrum = SpectrumModel::lorentzian_diff(0.3112, 2.0 * std::numbers::pi * 1e6);
  double dt = 2e-9;
  double duration = 1e-6;    ///< detection window t_d
  double frame_gap = 20e-6;  ///< delay between the two frames
  std::size_t n_trials = 4000;
  std::uint64_t seed = 7;

  void validate() const {
    require(dt > 0.0 && std::isfinite(dt), Errc::InvalidParameter, "dt must be > 0");
    require(duration >= 8.0 * dt, Errc::InvalidParameter, "duration must span many samples");
    require(frame_gap >= duration, Errc::InvalidParameter, "frame_gap must be >= duration");
    require(n_trials >= 1, Errc::InvalidParameter, "n_trials must be >= 1");
    spectrum.validate();
  }

  /// Power of two holding both windows with an equal-length margin against
  /// the periodic wrap of the synthesized record.
  std::size_t n_samples() const {
    const double need = 2.0 * (frame_gap + duration) / dt;
    std::size_t n = 16;
    while (static_cast<double>(n) < need) n <<= 1;
    return n;
  }
};

/// Zero-mean fluctuation traces sampled every dt.
struct TracePair {
  double dt = 0.0;
  std::vector<double> probe, conj;
};

/// Frequency-domain coloring: independent complex normals are multiplied by
/// the symmetric square root of the 2x2 cross-spectral matrix at each FFT
/// frequency and transformed back. The half-spectrum layout makes the result
/// real.
inline TracePair simulate_temporal_trace(const TemporalSimParams& params, std::size_t trial) {
  const std::size_t n = params.n_samples();
  const std::size_t nh = n / 2 + 1;
  const double amp = std::sqrt(static_cast<double>(n) / params.dt);
  const double dw = 2.0 * std::numbers::pi / (static_cast<double>(n) * params.dt);

  Rng rng(stream_seed(params.seed, trial, 0x74726163ULL));
  std::vector<std::complex<double>> zp(nh), zc(nh);
  for (std::size_t k = 0; k < nh; ++k) {
    const double w = static_cast<double>(k) * dw;
    params.spectrum.check_psd(w);
    const auto c = params.spectrum.at(w);
    const double s = std::sqrt(std::max(0.0, c.s_p * c.s_c - c.s_pc * c.s_pc));
    const double t = std::sqrt(std::max(0.0, c.s_p + c.s_c + 2.0 * s));
    double r11 = 0.0, r12 = 0.0, r22 = 0.0;
    if (t > 0.0) {
      r11 = (c.s_p + s) / t;
      r22 = (c.s_c + s) / t;
      r12 = c.s_pc / t;
    }
    const bool real_bin = (k == 0) || (k == n / 2);
    std::complex<double> w1, w2;
    if (real_bin) {
      w1 = {rng.normal(), 0.0};
      w2 = {rng.normal(), 0.0};
    } else {
      const double h = std::numbers::sqrt2 / 2.0;
      w1 = {h * rng.normal(), h * rng.normal()};
      w2 = {h * rng.normal(), h * rng.normal()};
    }
    zp[k] = amp * (r11 * w1 + r12 * w2);
    zc[k] = amp * (r12 * w1 + r22 * w2);
  }
  TracePair out;
  out.dt = params.dt;
  out.probe = fft::c2r(zp, 1, n);
  out.conj = fft::c2r(zc, 1, n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (auto& v : out.probe) v *= inv_n;
  for (auto& v : out.conj) v *= inv_n;
  return out;
}

inline std::vector<TracePair> simulate_temporal_traces(const TemporalSimParams& params) {
  params.validate();
  std::vector<TracePair> out(params.n_trials);
  parallel_for(out.size(), [&](std::size_t i) { out[i] = simulate_temporal_trace(params, i); });
  return out;
}

}  // namespace twinbeam
