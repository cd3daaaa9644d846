#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "twinbeam/error.hpp"
#include "twinbeam/image.hpp"
#include "twinbeam/parallel.hpp"
#include "twinbeam/simgen.hpp"
#include "twinbeam/specorr.hpp"
#include "twinbeam/spectrum.hpp"
#include "twinbeam/stackio.hpp"

namespace twinbeam {

// ---------------------------------------------------------------------------
// Spatial noise ratio
// ---------------------------------------------------------------------------

struct NrPoint {
  std::size_t bin_k = 1;
  double nr = 0.0;
  double sem = 0.0;
  bool background_corrected = false;
};

/// Windows of the probe and conjugate frames that image the same modes. In
/// the far field the conjugate window refers to the rotated frame.
struct NrRegions {
  AnalysisRegion probe;
  AnalysisRegion conj;
  bool rotated = false;

  static NrRegions same(const AnalysisRegion& r) { return {r, r, false}; }

  /// The selection windows of a planned correlation geometry.
  static NrRegions from_geometry(const PipelineGeometry& g) {
    const auto sel = g.selection();
    return {g.probe_region.compose(sel), g.conj_region.compose(sel), g.rotated};
  }
};

namespace detail {

struct NrWindows {
  Image<double> p1, p2, c1, c2;
  std::optional<Image<double>> bp, bc;
};

inline NrWindows nr_windows(const AcquisitionSet& acq, const NrRegions& r, bool with_bg, double gain) {
  acq.validate();
  const std::size_t w = acq.probe_f1.width(), h = acq.probe_f1.height();
  require(r.probe.fits(w, h) && r.conj.fits(w, h), Errc::RegionOutOfBounds, "noise-ratio region outside frame");
  require(r.probe.width == r.conj.width && r.probe.height == r.conj.height, Errc::DimensionMismatch,
          "probe and conjugate windows differ in size");
  NrWindows out;
  out.p1 = cut(acq.probe_f1, r.probe, false, gain);
  out.p2 = cut(acq.probe_f2, r.probe, false, gain);
  out.c1 = cut(acq.conj_f1, r.conj, r.rotated, gain);
  out.c2 = cut(acq.conj_f2, r.conj, r.rotated, gain);
  if (with_bg) {
    require(acq.has_background(), Errc::InvalidParameter, "background correction requested without background frames");
    out.bp = cut(*acq.bg_probe, r.probe, false, gain);
    out.bc = cut(*acq.bg_conj, r.conj, r.rotated, gain);
  }
  return out;
}

inline void mean_var(const Image<double>& img, double& mean, double& var) {
  const double n = double(img.size());
  double s = 0.0;
  for (double v : img.pixels()) s += v;
  mean = s / n;
  double ss = 0.0;
  for (double v : img.pixels()) ss += (v - mean) * (v - mean);
  var = ss / (n - 1.0);
}

inline double nr_from_windows(const NrWindows& w, std::size_t k) {
  const auto p1 = bin_superpixels(w.p1, k), p2 = bin_superpixels(w.p2, k);
  const auto c1 = bin_superpixels(w.c1, k), c2 = bin_superpixels(w.c2, k);
  require(p1.size() >= 2, Errc::TooFewSuperpixels,
          "bin " + std::to_string(k) + " leaves fewer than 2 super-pixels");
  Image<double> d(p1.width(), p1.height()), s(p1.width(), p1.height());
  for (std::size_t i = 0; i < d.size(); ++i) {
    d.pixels()[i] = (p1.pixels()[i] - p2.pixels()[i]) - (c1.pixels()[i] - c2.pixels()[i]);
    s.pixels()[i] = p1.pixels()[i] + p2.pixels()[i] + c1.pixels()[i] + c2.pixels()[i];
  }
  double md, vd, ms, vs;
  mean_var(d, md, vd);
  mean_var(s, ms, vs);
  if (w.bp) {
    // Each signal frame carries its own background realization: remove the
    // four background variances from the numerator and the four background
    // means from the shot-noise reference.
    double mbp, vbp, mbc, vbc;
    mean_var(bin_superpixels(*w.bp, k), mbp, vbp);
    mean_var(bin_superpixels(*w.bc, k), mbc, vbc);
    vd -= 2.0 * (vbp + vbc);
    ms -= 2.0 * (mbp + mbc);
  }
  require(ms > 0.0, Errc::DegenerateInput, "shot-noise reference is not positive");
  return std::max(0.0, vd / ms);
}

}  // namespace detail

/// Var(D) / Mean(S) over k x k super-pixels, D = (P1 - P2) - (C1 - C2) and
/// S = P1 + P2 + C1 + C2, with unbiased variance across super-pixels.
inline double noise_ratio(const AcquisitionSet& acq, const NrRegions& regions, std::size_t bin_k,
                          bool background_correct, double gain = 1.0) {
  require(bin_k >= 1, Errc::InvalidBin, "bin size must be >= 1");
  return detail::nr_from_windows(detail::nr_windows(acq, regions, background_correct, gain), bin_k);
}

inline double noise_ratio(const AcquisitionSet& acq, const AnalysisRegion& region, std::size_t bin_k,
                          bool background_correct, double gain = 1.0) {
  return noise_ratio(acq, NrRegions::same(region), bin_k, background_correct, gain);
}

/// Mean NR over acquisitions per bin size with SEM = sd / sqrt(n_acq).
inline std::vector<NrPoint> nr_curve(std::span<const AcquisitionSet> acqs, const NrRegions& regions,
                                     std::span<const std::size_t> bins, bool background_correct,
                                     double gain = 1.0) {
  require(!bins.empty(), Errc::InvalidParameter, "empty bins list");
  require(acqs.size() >= 2, Errc::EmptyInput, "noise-ratio curve needs >= 2 acquisitions");
  for (std::size_t k : bins) require(k >= 1, Errc::InvalidBin, "bin size must be >= 1");
  const std::size_t n = acqs.size();
  std::vector<double> per(n * bins.size());
  parallel_for(n, [&](std::size_t a) {
    const auto w = detail::nr_windows(acqs[a], regions, background_correct, gain);
    for (std::size_t b = 0; b < bins.size(); ++b) per[b * n + a] = detail::nr_from_windows(w, bins[b]);
  });
  std::vector<NrPoint> out;
  for (std::size_t b = 0; b < bins.size(); ++b) {
    double s = 0.0;
    for (std::size_t a = 0; a < n; ++a) s += per[b * n + a];
    const double mean = s / double(n);
    double ss = 0.0;
    for (std::size_t a = 0; a < n; ++a) ss += (per[b * n + a] - mean) * (per[b * n + a] - mean);
    const double sd = std::sqrt(ss / double(n - 1));
    out.push_back({bins[b], mean, sd / std::sqrt(double(n)), background_correct});
  }
  return out;
}

inline std::vector<NrPoint> nr_curve(std::span<const AcquisitionSet> acqs, const AnalysisRegion& region,
                                     std::span<const std::size_t> bins, bool background_correct,
                                     double gain = 1.0) {
  return nr_curve(acqs, NrRegions::same(region), bins, background_correct, gain);
}

inline double nr_to_db(double nr) {
  require(nr > 0.0, Errc::InvalidParameter, "noise ratio must be > 0");
  return -10.0 * std::log10(nr);
}

inline double db_to_nr(double db) { return std::pow(10.0, -db / 10.0); }

/// NR after a beam-splitter loss of efficiency eta on both beams.
inline double apply_detection_loss(double nr, double eta) {
  require(eta >= 0.0 && eta <= 1.0 && nr >= 0.0, Errc::InvalidParameter, "need 0 <= eta <= 1 and nr >= 0");
  return 1.0 - eta * (1.0 - nr);
}

// ---------------------------------------------------------------------------
// Spectral prediction
// ---------------------------------------------------------------------------

/// Samples of the normalized filter on a symmetric ascending grid. The
/// trapezoid integral of the result is 1.
inline std::vector<double> pulse_filter(const PulseProfile& pulse, std::span<const double> grid) {
  pulse.validate();
  const std::size_t n = grid.size();
  require(n >= 3, Errc::InsufficientGridCoverage, "filter grid needs >= 3 points");
  const double wmax = std::max(std::fabs(grid.front()), std::fabs(grid.back()));
  for (std::size_t i = 0; i < n; ++i) {
    require(i == 0 || grid[i] > grid[i - 1], Errc::InvalidParameter, "filter grid must be ascending");
    require(std::fabs(grid[i] + grid[n - 1 - i]) <= 1e-9 * wmax, Errc::InvalidParameter,
            "filter grid must be symmetric about 0");
  }
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = pulse.energy_spectrum(grid[i]);
  double area = 0.0;
  for (std::size_t i = 1; i < n; ++i) area += 0.5 * (g[i] + g[i - 1]) * (grid[i] - grid[i - 1]);
  require(area >= 0.999 * pulse.energy_total(), Errc::InsufficientGridCoverage,
          "filter grid covers less than 99.9% of the pulse energy spectrum");
  for (auto& v : g) v /= area;
  return g;
}

struct SpectralPrediction {
  double nr = 0.0;
  std::size_t n_points = 0;  ///< nodes of the final half-line grid
  double omega_max = 0.0;    ///< rad/s
  double step = 0.0;         ///< rad/s
  bool converged = false;
};

namespace detail {

// Trapezoid grid spacing below which the quadrature of the (nearly band-limited)
// filter is spectrally accurate.
inline double filter_resolution(const PulseProfile& p) {
  return p.kind == PulseProfile::Kind::Rect ? 0.5 * std::numbers::pi / p.T : 0.5 / p.sigma_t();
}

// 2 * integral_0^wmax G(w) (S_diff(w) - S_tail) dw + S_tail, uniform trapezoid.
inline double predict_on_grid(const SpectrumModel& m, const PulseProfile& p, double wmax, double h) {
  const double tail = m.s_diff_tail();
  const std::size_t n = static_cast<std::size_t>(std::ceil(wmax / h));
  double acc = 0.0;
  for (std::size_t i = 0; i <= n; ++i) {
    const double w = double(i) * h;
    const double f = p.filter(w) * (m.s_diff(w) - tail);
    acc += (i == 0 || i == n) ? 0.5 * f : f;
  }
  return tail + 2.0 * h * acc;
}

inline SpectralPrediction predict_one(const SpectrumModel& m, const PulseProfile& p) {
  m.validate();
  p.validate();
  SpectralPrediction out;
  const double bw = p.bandwidth();
  double h = std::min(filter_resolution(p), m.feature_scale() / 8.0);
  double wmax = 4.0 * std::max(bw, m.feature_extent());
  if (!(m.feature_extent() > 0.0) && m.kind == SpectrumModel::Kind::LorentzianDiff) {
    // flat spectrum: the integrand vanishes identically
    out.nr = m.s_diff_tail();
    out.converged = true;
    out.omega_max = wmax;
    out.step = h;
    out.n_points = 1;
    return out;
  }
  constexpr double kTol = 1e-6;
  constexpr double kMaxPoints = double(1u << 24);
  for (;;) {
    const double e1 = predict_on_grid(m, p, wmax, h);
    const double e2 = predict_on_grid(m, p, 2.0 * wmax, h);
    const double e3 = predict_on_grid(m, p, 2.0 * wmax, 0.5 * h);
    const bool range_ok = std::fabs(e2 - e1) <= kTol * std::fabs(e2);
    const bool step_ok = std::fabs(e3 - e2) <= kTol * std::fabs(e3);
    out.nr = e3;
    out.omega_max = 2.0 * wmax;
    out.step = 0.5 * h;
    out.n_points = static_cast<std::size_t>(std::ceil(out.omega_max / out.step)) + 1;
    if (range_ok && step_ok) {
      out.converged = true;
      return out;
    }
    if (!range_ok) wmax *= 2.0;
    if (!step_ok) h *= 0.5;
    if (4.0 * wmax / h > kMaxPoints) return out;
  }
}

}  // namespace detail

/// NR = integral of G(w) S_diff(w) dw, averaged over the per-pixel models
/// when any are given (otherwise `model` stands for a uniform pixel).
inline SpectralPrediction spectral_nr_predict(const SpectrumModel& model, const PulseProfile& pulse,
                                              std::span<const SpectrumModel> per_pixel_models = {}) {
  if (per_pixel_models.empty()) return detail::predict_one(model, pulse);
  SpectralPrediction acc;
  acc.converged = true;
  for (const auto& m : per_pixel_models) {
    const auto r = detail::predict_one(m, pulse);
    acc.nr += r.nr;
    acc.n_points = std::max(acc.n_points, r.n_points);
    acc.omega_max = std::max(acc.omega_max, r.omega_max);
    acc.step = acc.step == 0.0 ? r.step : std::min(acc.step, r.step);
    acc.converged = acc.converged && r.converged;
  }
  acc.nr /= double(per_pixel_models.size());
  return acc;
}

struct TimeDomainNr {
  double nr = 0.0;
  double mc_sem = 0.0;
  std::size_t n_trials = 0;
};

/// Monte Carlo counterpart of the spectral prediction: per trial, two frame
/// integrals sum_j f_j x_j dt a frame_gap apart, D = (Np1 - Np2) - (Nc1 - Nc2),
/// and Var(D) over trials divided by its white, uncorrelated reference
/// 2 (SN_p + SN_c) dt sum_j f_j^2.
inline TimeDomainNr time_domain_nr(const SpectrumModel& model, const PulseProfile& pulse,
                                   const TemporalSimParams& sim) {
  pulse.validate();
  TemporalSimParams p = sim;
  p.spectrum = model;
  p.duration = std::max(p.duration, pulse.support());
  require(p.frame_gap >= p.duration, Errc::InvalidParameter, "frame_gap must be >= the detection window");
  require(p.n_trials >= 2, Errc::InvalidParameter, "time-domain estimate needs >= 2 trials");
  p.validate();

  const std::size_t len = static_cast<std::size_t>(std::llround(pulse.support() / p.dt));
  const std::size_t gap = static_cast<std::size_t>(std::llround(p.frame_gap / p.dt));
  std::vector<double> f(len);
  for (std::size_t j = 0; j < len; ++j) {
    const double t = pulse.kind == PulseProfile::Kind::Rect ? (double(j) + 0.5) * p.dt
                                                            : (double(j) - 0.5 * double(len - 1)) * p.dt;
    f[j] = pulse.intensity(t);
  }
  double f2 = 0.0;
  for (double v : f) f2 += v * v;
  const double reference = 2.0 * (model.shot_noise_p() + model.shot_noise_c()) * p.dt * f2;

  std::vector<double> d(p.n_trials);
  parallel_for(p.n_trials, [&](std::size_t trial) {
    const auto tr = simulate_temporal_trace(p, trial);
    auto frame = [&](const std::vector<double>& x, std::size_t start) {
      double s = 0.0;
      for (std::size_t j = 0; j < len; ++j) s += f[j] * x[start + j];
      return s * p.dt;
    };
    d[trial] = (frame(tr.probe, 0) - frame(tr.probe, gap)) - (frame(tr.conj, 0) - frame(tr.conj, gap));
  });

  const double n = double(p.n_trials);
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= n;
  std::vector<double> q(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) q[i] = (d[i] - mean) * (d[i] - mean) * n / (n - 1.0) / reference;
  TimeDomainNr out;
  out.n_trials = p.n_trials;
  for (double v : q) out.nr += v;
  out.nr /= n;
  double ss = 0.0;
  for (double v : q) ss += (v - out.nr) * (v - out.nr);
  out.mc_sem = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  return out;
}

}  // namespace twinbeam
