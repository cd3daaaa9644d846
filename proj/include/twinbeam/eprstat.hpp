#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "twinbeam/error.hpp"
#include "twinbeam/gfit.hpp"
#include "twinbeam/parallel.hpp"
#include "twinbeam/specorr.hpp"
#include "twinbeam/stackio.hpp"

namespace twinbeam {

enum class Axis { X, Y };
enum class CiLevel { P68, P95 };

inline const char* to_string(Axis a) { return a == Axis::X ? "x" : "y"; }

/// Position uncertainty (m) from a near-field correlation width in pixels.
inline double delta_r(double sigma_px, const OpticsConfig& optics) {
  require(optics.mode == FieldMode::NearField, Errc::WrongMode, "delta_r needs near-field optics");
  optics.validate();
  return sigma_px * optics.pixel_size_s / optics.magnification_M;
}

/// Momentum uncertainty over hbar (1/m) from a far-field width in pixels.
inline double delta_p_hbar(double sigma_px, const OpticsConfig& optics) {
  require(optics.mode == FieldMode::FarField, Errc::WrongMode, "delta_p_hbar needs far-field optics");
  optics.validate();
  return 2.0 * std::numbers::pi * sigma_px * optics.pixel_size_s / (optics.wavelength_lambda * optics.focal_f);
}

/// A fitted width with its confidence half-width at some level.
struct Width {
  double sigma = 0.0;
  double ci = 0.0;
};

struct EprAxisResult {
  Axis axis = Axis::X;
  CiLevel level = CiLevel::P68;
  Width near, far;
  double delta_r = 0.0;       ///< m
  double delta_p_hbar = 0.0;  ///< 1/m
  double product = 0.0;       ///< in units of hbar^2
  double delta = 0.0;         ///< propagated uncertainty at `level`
  double confidence = 0.0;    ///< |1/4 - product| / delta
  bool violation = false;     ///< product < 1/4
};

/// Distance of the product below (or above) the bound in units of delta. The
/// bound is 1/4 in hbar^2 units; passing it explicitly keeps the ratio
/// unit-free.
inline double confidence_level(double product, double delta, double bound = 0.25) {
  const double gap = std::fabs(bound - product);
  if (delta > 0.0) return gap / delta;
  return gap == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
}

/// Product (dr * dp)^2 in hbar^2 with relative width errors added in
/// quadrature; the CIs in `near`/`far` set the level of delta.
inline EprAxisResult epr_product(Width near, Width far, const OpticsConfig& near_optics,
                                 const OpticsConfig& far_optics, Axis axis, CiLevel level) {
  require(near.sigma > 0.0 && far.sigma > 0.0, Errc::InvalidParameter, "widths must be > 0");
  EprAxisResult r;
  r.axis = axis;
  r.level = level;
  r.near = near;
  r.far = far;
  r.delta_r = delta_r(near.sigma, near_optics);
  r.delta_p_hbar = delta_p_hbar(far.sigma, far_optics);
  const double uncertainty = r.delta_r * r.delta_p_hbar;
  r.product = uncertainty * uncertainty;
  r.delta = 2.0 * r.product * std::hypot(near.ci / near.sigma, far.ci / far.sigma);
  r.confidence = confidence_level(r.product, r.delta);
  r.violation = r.product < 0.25;
  return r;
}

inline Width fitted_width(const GaussFitResult& fit, Axis axis, CiLevel level) {
  const std::size_t i = axis == Axis::X ? kSigmaX : kSigmaY;
  const double s = axis == Axis::X ? fit.model.sigma_x : fit.model.sigma_y;
  return {s, level == CiLevel::P68 ? fit.ci68[i] : fit.ci95[i]};
}

inline EprAxisResult epr_product(const GaussFitResult& near_fit, const GaussFitResult& far_fit,
                                 const OpticsConfig& near_optics, const OpticsConfig& far_optics, Axis axis,
                                 CiLevel level = CiLevel::P68) {
  require(near_fit.converged && far_fit.converged, Errc::NonConvergedFit, "EPR product needs converged fits");
  return epr_product(fitted_width(near_fit, axis, level), fitted_width(far_fit, axis, level), near_optics,
                     far_optics, axis, level);
}

inline bool check_significance(const EprAxisResult& r) { return r.product < 0.25 && r.confidence > 5.0; }

struct Inseparability {
  double value = 0.0;
  bool entangled = false;
};

inline Inseparability inseparability(double nr_near, double nr_far) {
  require(nr_near >= 0.0 && nr_far >= 0.0, Errc::InvalidParameter, "noise ratios must be >= 0");
  const double i = nr_near + nr_far;
  return {i, i < 2.0};
}

// ---------------------------------------------------------------------------
// Confidence level versus number of images
// ---------------------------------------------------------------------------

struct ConfidenceEntry {
  std::size_t n_images = 0;
  double mean_c = 0.0;
  double sd_c = 0.0;
  std::size_t n_groups = 0;
  std::size_t n_failed = 0;  ///< groups whose fit did not converge
  std::size_t unused = 0;    ///< acquisitions left over after grouping
};

struct ConfidenceCurve {
  Axis axis = Axis::X;
  std::vector<ConfidenceEntry> entries;
  double fitted_A0 = 0.0;
  double scaling_exponent = std::numeric_limits<double>::quiet_NaN();
};

struct ScalingFit {
  double A0 = 0.0;
  double exponent = std::numeric_limits<double>::quiet_NaN();
};

/// Least-squares C = A0 * sqrt(N) and the slope of log C against log N.
inline ScalingFit fit_scaling(std::span<const ConfidenceEntry> entries) {
  ScalingFit f;
  double num = 0.0, den = 0.0;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t m = 0;
  for (const auto& e : entries) {
    if (!std::isfinite(e.mean_c) || e.n_groups == 0 || e.n_groups == e.n_failed) continue;
    const double n = double(e.n_images);
    num += e.mean_c * std::sqrt(n);
    den += n;
    if (e.mean_c > 0.0) {
      const double lx = std::log(n), ly = std::log(e.mean_c);
      sx += lx;
      sy += ly;
      sxx += lx * lx;
      sxy += lx * ly;
      ++m;
    }
  }
  if (den > 0.0) f.A0 = num / den;
  const double md = double(m);
  if (m >= 2 && md * sxx - sx * sx > 0.0) f.exponent = (md * sxy - sx * sy) / (md * sxx - sx * sx);
  return f;
}

struct EprPipelineConfig {
  PipelineConfig pipeline;
  OpticsConfig near_optics{FieldMode::NearField};
  OpticsConfig far_optics{FieldMode::FarField};
  CiLevel level = CiLevel::P68;
  FitOptions fit;
};

/// Per-acquisition correlation moments of one field, prepared once and then
/// averaged over arbitrary groups.
struct FieldMoments {
  PipelineGeometry geometry;
  std::vector<XcorrMoments> moments;

  static FieldMoments build(std::span<const AcquisitionSet> acqs, FieldMode mode, const PipelineConfig& cfg) {
    FieldMoments f;
    f.geometry = plan_geometry(acqs, mode, cfg);
    f.moments = acquisition_moments(acqs, f.geometry, cfg);
    return f;
  }

  CrossCorrMap map(std::size_t first, std::size_t last, Normalization norm) const {
    return accumulate_moments(moments, first, last, norm);
  }
};

struct EprGroupResult {
  bool ok = false;
  std::string error;
  GaussFitResult near_fit, far_fit;
  EprAxisResult x, y;
};

/// Fit both fields over acquisitions [first, last) and evaluate both axes.
inline EprGroupResult epr_for_group(const FieldMoments& near, const FieldMoments& far, std::size_t first,
                                    std::size_t last, const EprPipelineConfig& cfg) {
  EprGroupResult g;
  try {
    g.near_fit = fit_gaussian2d(near.map(first, last, cfg.pipeline.normalization), cfg.fit);
    g.far_fit = fit_gaussian2d(far.map(first, last, cfg.pipeline.normalization), cfg.fit);
    g.x = epr_product(g.near_fit, g.far_fit, cfg.near_optics, cfg.far_optics, Axis::X, cfg.level);
    g.y = epr_product(g.near_fit, g.far_fit, cfg.near_optics, cfg.far_optics, Axis::Y, cfg.level);
    g.ok = true;
  } catch (const Error& e) {
    g.error = e.what();
  }
  return g;
}

/// C versus group size for both axes. Groups are consecutive disjoint blocks
/// of N acquisitions; leftovers are reported as unused.
inline std::array<ConfidenceCurve, 2> confidence_curve(const FieldMoments& near, const FieldMoments& far,
                                                       std::span<const std::size_t> group_sizes,
                                                       const EprPipelineConfig& cfg) {
  const std::size_t total = std::min(near.moments.size(), far.moments.size());
  require(!group_sizes.empty(), Errc::InvalidParameter, "no group sizes");
  for (std::size_t n : group_sizes) {
    require(n >= 1 && n <= total, Errc::InvalidParameter,
            "group size " + std::to_string(n) + " exceeds the " + std::to_string(total) + " acquisitions");
  }
  std::array<ConfidenceCurve, 2> curves;
  curves[0].axis = Axis::X;
  curves[1].axis = Axis::Y;
  for (std::size_t n : group_sizes) {
    const std::size_t groups = total / n;
    std::vector<EprGroupResult> res(groups);
    parallel_for(groups, [&](std::size_t g) { res[g] = epr_for_group(near, far, g * n, (g + 1) * n, cfg); });
    for (int a = 0; a < 2; ++a) {
      ConfidenceEntry e;
      e.n_images = n;
      e.n_groups = groups;
      e.unused = total - groups * n;
      std::vector<double> cs;
      for (const auto& r : res) {
        if (!r.ok) {
          ++e.n_failed;
          continue;
        }
        cs.push_back((a == 0 ? r.x : r.y).confidence);
      }
      if (!cs.empty()) {
        double s = 0.0;
        for (double c : cs) s += c;
        e.mean_c = s / double(cs.size());
        double ss = 0.0;
        for (double c : cs) ss += (c - e.mean_c) * (c - e.mean_c);
        e.sd_c = cs.size() > 1 ? std::sqrt(ss / double(cs.size() - 1)) : 0.0;
      } else {
        e.mean_c = std::numeric_limits<double>::quiet_NaN();
      }
      curves[std::size_t(a)].entries.push_back(e);
    }
  }
  for (auto& c : curves) {
    const auto f = fit_scaling(c.entries);
    c.fitted_A0 = f.A0;
    c.scaling_exponent = f.exponent;
  }
  return curves;
}

inline std::array<ConfidenceCurve, 2> confidence_curve(std::span<const AcquisitionSet> near_acqs,
                                                       std::span<const AcquisitionSet> far_acqs,
                                                       std::span<const std::size_t> group_sizes,
                                                       const EprPipelineConfig& cfg) {
  const auto near = FieldMoments::build(near_acqs, FieldMode::NearField, cfg.pipeline);
  const auto far = FieldMoments::build(far_acqs, FieldMode::FarField, cfg.pipeline);
  return confidence_curve(near, far, group_sizes, cfg);
}

}  // namespace twinbeam
