#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdlib>
#include <limits>
#include <span>
#include <vector>

#include "twinbeam/error.hpp"
#include "twinbeam/fft.hpp"
#include "twinbeam/image.hpp"
#include "twinbeam/parallel.hpp"
#include "twinbeam/stackio.hpp"

namespace twinbeam {

enum class Normalization { Covariance, Pearson };

/// Integer translation of the conjugate relative to the probe.
struct Shift {
  long dx = 0;
  long dy = 0;
  friend bool operator==(const Shift&, const Shift&) = default;
};

struct FluctuationPair {
  Image<double> probe_fluct;  ///< e.g. 120 x 120
  Image<double> conj_fluct;   ///< e.g. 80 x 80, strictly smaller on both axes
  Shift registration_shift;
  bool rotated = false;
};

/// Valid-overlap cross-correlation. Entry (0, 0) corresponds to lag
/// (lag_x0, lag_y0) = (-(Wp-Wc)/2, -(Hp-Hc)/2).
struct CrossCorrMap {
  Image<double> values;
  long lag_x0 = 0;
  long lag_y0 = 0;
  Normalization normalization = Normalization::Covariance;
  std::size_t n_acq_accumulated = 0;

  double lag_x(double index_x) const { return index_x + static_cast<double>(lag_x0); }
  double lag_y(double index_y) const { return index_y + static_cast<double>(lag_y0); }
};

/// Pipeline knobs shared by the correlation and noise-ratio analyses.
struct PipelineConfig {
  std::size_t crop = 120;    ///< square crop around the intensity maximum
  std::size_t select = 80;   ///< central conjugate window scanned over the probe
  long max_shift = 20;       ///< registration search radius
  double gain = 1.0;         ///< photoelectrons per raw count
  bool background_correct = false;
  Normalization normalization = Normalization::Covariance;

  void validate() const {
    require(select > 0 && select < crop, Errc::InvalidParameter, "select must be in (0, crop)");
    require(max_shift >= 0, Errc::InvalidParameter, "max_shift must be >= 0");
    require(gain > 0.0, Errc::InvalidParameter, "gain must be > 0");
  }
};

/// Where the pipeline cuts each beam. The conjugate region is expressed in
/// the (possibly rotated) conjugate frame.
struct PipelineGeometry {
  AnalysisRegion probe_region;
  AnalysisRegion conj_region;
  Shift shift;
  bool rotated = false;
  std::size_t select = 80;

  /// Central select x select window relative to either crop.
  AnalysisRegion selection() const { return AnalysisRegion{0, 0, probe_region.width, probe_region.height}.centered(select, select); }
};

// ---------------------------------------------------------------------------
// Registration
// ---------------------------------------------------------------------------

/// Integer shift d maximizing the Pearson correlation of a(x) with b(x + d)
/// over their overlap, i.e. the d for which b is a translated by d. Ties go
/// to the smallest |dx| + |dy|, then row-major (dy, dx) order.
template <typename T>
Shift register_shift(const Image<T>& a, const Image<T>& b, long max_shift = 20) {
  require(a.same_shape(b), Errc::DimensionMismatch, "registration images differ in shape");
  require(sample_variance(a) > 0.0 && sample_variance(b) > 0.0, Errc::DegenerateInput,
          "registration image has zero variance");
  const long w = static_cast<long>(a.width()), h = static_cast<long>(a.height());
  const long rx = std::min(max_shift, w - 2), ry = std::min(max_shift, h - 2);

  Shift best;
  double best_r = -std::numeric_limits<double>::infinity();
  for (long dy = -ry; dy <= ry; ++dy) {
    for (long dx = -rx; dx <= rx; ++dx) {
      const long x_lo = std::max(0L, -dx), x_hi = std::min(w, w - dx);
      const long y_lo = std::max(0L, -dy), y_hi = std::min(h, h - dy);
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (long y = y_lo; y < y_hi; ++y) {
        auto ra = a.row(static_cast<std::size_t>(y));
        auto rb = b.row(static_cast<std::size_t>(y + dy));
        for (long x = x_lo; x < x_hi; ++x) {
          const double va = ra[static_cast<std::size_t>(x)];
          const double vb = rb[static_cast<std::size_t>(x + dx)];
          sa += va;
          sb += vb;
          saa += va * va;
          sbb += vb * vb;
          sab += va * vb;
        }
      }
      const double n = static_cast<double>((x_hi - x_lo) * (y_hi - y_lo));
      const double va = saa - sa * sa / n, vb = sbb - sb * sb / n;
      if (!(va > 0.0 && vb > 0.0)) continue;
      const double r = (sab - sa * sb / n) / std::sqrt(va * vb);
      const bool better = r > best_r ||
                          (r == best_r && std::labs(dx) + std::labs(dy) < std::labs(best.dx) + std::labs(best.dy));
      if (better) {
        best_r = r;
        best = {dx, dy};
      }
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Geometry and differencing
// ---------------------------------------------------------------------------

namespace detail {

inline Image<double> ensemble_mean(std::span<const AcquisitionSet> acqs, bool conj) {
  const auto& first = conj ? acqs.front().conj_f1 : acqs.front().probe_f1;
  Image<double> acc(first.width(), first.height());
  for (const auto& a : acqs) {
    const auto& f1 = conj ? a.conj_f1 : a.probe_f1;
    const auto& f2 = conj ? a.conj_f2 : a.probe_f2;
    for (std::size_t i = 0; i < acc.size(); ++i) {
      acc.pixels()[i] += 0.5 * (static_cast<double>(f1.pixels()[i]) + static_cast<double>(f2.pixels()[i]));
    }
  }
  const double inv = 1.0 / static_cast<double>(acqs.size());
  for (auto& v : acc.pixels()) v *= inv;
  return acc;
}

}  // namespace detail

/// Locates the crops from the ensemble-mean images: the probe crop is
/// centered on the smoothed argmax, the conjugate crop is the probe crop moved
/// by the registration shift (after 180-degree rotation in the far field).
inline PipelineGeometry plan_geometry(std::span<const AcquisitionSet> acqs, FieldMode mode,
                                      const PipelineConfig& cfg) {
  require(!acqs.empty(), Errc::EmptyInput, "no acquisitions");
  cfg.validate();
  for (const auto& a : acqs) a.validate();
  const Image<double> probe_mean = detail::ensemble_mean(acqs, false);
  Image<double> conj_mean = detail::ensemble_mean(acqs, true);
  const bool rotated = mode == FieldMode::FarField;
  if (rotated) conj_mean = rotate180(conj_mean);

  const auto [cx, cy] = smoothed_argmax(probe_mean);
  PipelineGeometry g;
  g.rotated = rotated;
  g.select = cfg.select;
  g.probe_region = region_around(cx, cy, cfg.crop, cfg.crop, probe_mean.width(), probe_mean.height());
  g.shift = register_shift(probe_mean, conj_mean, cfg.max_shift);
  const long x0 = static_cast<long>(g.probe_region.x0) + g.shift.dx;
  const long y0 = static_cast<long>(g.probe_region.y0) + g.shift.dy;
  require(x0 >= 0 && y0 >= 0, Errc::RegionOutOfBounds, "registered conjugate crop leaves the frame");
  g.conj_region = {static_cast<std::size_t>(x0), static_cast<std::size_t>(y0), cfg.crop, cfg.crop};
  require(g.conj_region.fits(conj_mean.width(), conj_mean.height()), Errc::RegionOutOfBounds,
          "registered conjugate crop leaves the frame");
  return g;
}

/// Geometry for frames that are already cropped and aligned: both crops are
/// the whole frame.
inline PipelineGeometry identity_geometry(std::size_t width, std::size_t height, std::size_t select) {
  require(select < width && select < height, Errc::InvalidParameter, "select must be smaller than the frame");
  PipelineGeometry g;
  g.probe_region = {0, 0, width, height};
  g.conj_region = g.probe_region;
  g.select = select;
  return g;
}

namespace detail {

inline Image<double> cut(const Image<float>& frame, const AnalysisRegion& r, bool rotate, double gain) {
  Image<double> out = image_cast<double>(crop(rotate ? rotate180(frame) : frame, r));
  if (gain != 1.0) out = scaled(out, gain);
  return out;
}

}  // namespace detail

/// Frame differencing: probe_fluct = (P1 - bg) - (P2 - bg) over the probe
/// crop; the conjugate crop is differenced the same way and reduced to its
/// central selection window.
inline FluctuationPair difference_frames(const AcquisitionSet& acq, const PipelineGeometry& g,
                                         bool background_correct, double gain = 1.0) {
  acq.validate();
  require(!background_correct || acq.has_background(), Errc::InvalidParameter,
          "background correction requested without background frames");
  auto p1 = detail::cut(acq.probe_f1, g.probe_region, false, gain);
  auto p2 = detail::cut(acq.probe_f2, g.probe_region, false, gain);
  auto c1 = detail::cut(acq.conj_f1, g.conj_region, g.rotated, gain);
  auto c2 = detail::cut(acq.conj_f2, g.conj_region, g.rotated, gain);
  if (background_correct) {
    const auto bp = detail::cut(*acq.bg_probe, g.probe_region, false, gain);
    const auto bc = detail::cut(*acq.bg_conj, g.conj_region, g.rotated, gain);
    p1 = p1 - bp;
    p2 = p2 - bp;
    c1 = c1 - bc;
    c2 = c2 - bc;
  }
  FluctuationPair out;
  out.probe_fluct = p1 - p2;
  out.conj_fluct = crop(c1 - c2, g.selection());
  out.registration_shift = g.shift;
  out.rotated = g.rotated;
  return out;
}

/// Differencing for acquisitions already cropped and aligned.
inline FluctuationPair difference_frames(const AcquisitionSet& acq, bool background_correct,
                                         std::size_t select = 80) {
  return difference_frames(acq, identity_geometry(acq.probe_f1.width(), acq.probe_f1.height(), select),
                           background_correct);
}

// ---------------------------------------------------------------------------
// Cross-correlation
// ---------------------------------------------------------------------------

namespace detail {

inline void check_pair(const FluctuationPair& pair) {
  const auto& p = pair.probe_fluct;
  const auto& c = pair.conj_fluct;
  require(!p.empty() && !c.empty(), Errc::EmptyInput, "empty fluctuation image");
  require(c.width() < p.width() && c.height() < p.height(), Errc::DimensionMismatch,
          "conjugate window must be strictly smaller than the probe image");
}

inline bool negligible_variance(double var, double mean_square) {
  return !(var > 1e-12 * mean_square) || mean_square == 0.0;
}

}  // namespace detail

/// Literal per-lag evaluation of the local-mean-removed covariance (or
/// Pearson coefficient) over the valid overlap.
inline CrossCorrMap crosscorr_direct(const FluctuationPair& pair, Normalization norm) {
  detail::check_pair(pair);
  const auto& P = pair.probe_fluct;
  const auto& C = pair.conj_fluct;
  const std::size_t wc = C.width(), hc = C.height();
  const std::size_t ow = P.width() - wc + 1, oh = P.height() - hc + 1;
  const double n = static_cast<double>(wc * hc);

  const double mc = mean_of(C);
  double var_c = 0.0, msq_c = 0.0;
  for (double v : C.pixels()) {
    var_c += (v - mc) * (v - mc);
    msq_c += v * v;
  }
  var_c /= n;
  msq_c /= n;
  if (norm == Normalization::Pearson) {
    require(!detail::negligible_variance(var_c, msq_c), Errc::ZeroVariance, "conjugate window is constant");
  }

  CrossCorrMap out;
  out.values = Image<double>(ow, oh);
  out.lag_x0 = -static_cast<long>((P.width() - wc) / 2);
  out.lag_y0 = -static_cast<long>((P.height() - hc) / 2);
  out.normalization = norm;
  out.n_acq_accumulated = 1;

  for (std::size_t i = 0; i < oh; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      double sp = 0.0;
      for (std::size_t y = 0; y < hc; ++y) {
        auto rp = P.row(i + y).subspan(j, wc);
        for (double v : rp) sp += v;
      }
      const double mp = sp / n;
      double cov = 0.0, var_p = 0.0, msq_p = 0.0;
      for (std::size_t y = 0; y < hc; ++y) {
        auto rp = P.row(i + y).subspan(j, wc);
        auto rc = C.row(y);
        for (std::size_t x = 0; x < wc; ++x) {
          const double dp = rp[x] - mp;
          cov += dp * (rc[x] - mc);
          var_p += dp * dp;
          msq_p += rp[x] * rp[x];
        }
      }
      cov /= n;
      double value = cov;
      if (norm == Normalization::Pearson) {
        var_p /= n;
        msq_p /= n;
        require(!detail::negligible_variance(var_p, msq_p), Errc::ZeroVariance,
                "probe patch is constant at lag index " + std::to_string(j) + "," + std::to_string(i));
        value = cov / std::sqrt(var_p * var_c);
      }
      out.values(j, i) = value;
    }
  }
  return out;
}

/// Per-lag sufficient statistics of one pair: covariance map, probe patch
/// variance per lag, and the conjugate window variance.
struct XcorrMoments {
  Image<double> cov;
  Image<double> var_p;
  Image<double> msq_p;
  double var_c = 0.0;
  double msq_c = 0.0;
  long lag_x0 = 0, lag_y0 = 0;
};

namespace detail {

// Valid-mode correlation sum_{y,x} A[y+i][x+j] * K[y][x], given the half
// spectrum of A (rows x cols) and the kernel zero-padded to the same grid.
inline Image<double> correlate_valid(const std::vector<std::complex<double>>& fa,
                                     const std::vector<double>& kernel_padded, std::size_t rows,
                                     std::size_t cols, std::size_t ow, std::size_t oh) {
  auto fk = fft::r2c(kernel_padded, rows, cols);
  for (std::size_t i = 0; i < fk.size(); ++i) fk[i] = fa[i] * std::conj(fk[i]);
  const auto full = fft::c2r(fk, rows, cols);
  const double inv = 1.0 / static_cast<double>(rows * cols);
  Image<double> out(ow, oh);
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) out(j, i) = full[i * cols + j] * inv;
  return out;
}

}  // namespace detail

/// FFT route to the moments: the covariance is the correlation of the probe
/// with the zero-mean conjugate window, the local probe sums come from
/// correlating the probe and its square with a box of ones.
inline XcorrMoments xcorr_moments_fft(const FluctuationPair& pair, bool with_variance) {
  detail::check_pair(pair);
  const auto& P = pair.probe_fluct;
  const auto& C = pair.conj_fluct;
  const std::size_t rows = P.height(), cols = P.width();
  const std::size_t wc = C.width(), hc = C.height();
  const std::size_t ow = cols - wc + 1, oh = rows - hc + 1;
  const double n = static_cast<double>(wc * hc);

  XcorrMoments m;
  m.lag_x0 = -static_cast<long>((cols - wc) / 2);
  m.lag_y0 = -static_cast<long>((rows - hc) / 2);

  const double mc = mean_of(C);
  std::vector<double> kernel(rows * cols, 0.0);
  for (std::size_t y = 0; y < hc; ++y) {
    for (std::size_t x = 0; x < wc; ++x) {
      const double v = C(x, y);
      kernel[y * cols + x] = v - mc;
      m.var_c += (v - mc) * (v - mc);
      m.msq_c += v * v;
    }
  }
  m.var_c /= n;
  m.msq_c /= n;

  const auto fp = fft::r2c(P.pixels(), rows, cols);
  m.cov = detail::correlate_valid(fp, kernel, rows, cols, ow, oh);
  for (auto& v : m.cov.pixels()) v /= n;

  if (with_variance) {
    std::vector<double> ones(rows * cols, 0.0);
    for (std::size_t y = 0; y < hc; ++y)
      for (std::size_t x = 0; x < wc; ++x) ones[y * cols + x] = 1.0;
    std::vector<double> sq(P.size());
    for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = P.pixels()[i] * P.pixels()[i];
    const auto s1 = detail::correlate_valid(fp, ones, rows, cols, ow, oh);
    const auto s2 = detail::correlate_valid(fft::r2c(sq, rows, cols), ones, rows, cols, ow, oh);
    m.var_p = Image<double>(ow, oh);
    m.msq_p = Image<double>(ow, oh);
    for (std::size_t i = 0; i < m.var_p.size(); ++i) {
      const double mean = s1.pixels()[i] / n;
      const double msq = s2.pixels()[i] / n;
      m.msq_p.pixels()[i] = msq;
      m.var_p.pixels()[i] = std::max(0.0, msq - mean * mean);
    }
  }
  return m;
}

namespace detail {

inline CrossCorrMap map_from_moments(const XcorrMoments& m, Normalization norm, std::size_t n_acq) {
  CrossCorrMap out;
  out.lag_x0 = m.lag_x0;
  out.lag_y0 = m.lag_y0;
  out.normalization = norm;
  out.n_acq_accumulated = n_acq;
  out.values = m.cov;
  if (norm == Normalization::Pearson) {
    require(!negligible_variance(m.var_c, m.msq_c), Errc::ZeroVariance, "conjugate window is constant");
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      const double vp = m.var_p.pixels()[i];
      require(!negligible_variance(vp, m.msq_p.pixels()[i]), Errc::ZeroVariance,
              "probe patch is constant at a lag");
      out.values.pixels()[i] /= std::sqrt(vp * m.var_c);
    }
  }
  return out;
}

}  // namespace detail

inline CrossCorrMap crosscorr_fft(const FluctuationPair& pair, Normalization norm) {
  return detail::map_from_moments(xcorr_moments_fft(pair, norm == Normalization::Pearson), norm, 1);
}

/// Fixed-order mean of the moments in [first, last).
inline XcorrMoments mean_moments(std::span<const XcorrMoments> ms, std::size_t first, std::size_t last) {
  require(last > first && last <= ms.size(), Errc::EmptyInput, "empty moment range");
  const bool with_var = !ms[first].var_p.empty();
  auto add = [with_var](XcorrMoments a, const XcorrMoments& b) {
    for (std::size_t i = 0; i < a.cov.size(); ++i) a.cov.pixels()[i] += b.cov.pixels()[i];
    if (with_var) {
      for (std::size_t i = 0; i < a.var_p.size(); ++i) {
        a.var_p.pixels()[i] += b.var_p.pixels()[i];
        a.msq_p.pixels()[i] += b.msq_p.pixels()[i];
      }
    }
    a.var_c += b.var_c;
    a.msq_c += b.msq_c;
    return a;
  };
  XcorrMoments sum = tree_reduce<XcorrMoments>(
      first, last, [&](std::size_t i) { return ms[i]; }, add);
  const double inv = 1.0 / static_cast<double>(last - first);
  for (auto& v : sum.cov.pixels()) v *= inv;
  for (auto& v : sum.var_p.pixels()) v *= inv;
  for (auto& v : sum.msq_p.pixels()) v *= inv;
  sum.var_c *= inv;
  sum.msq_c *= inv;
  return sum;
}

/// Per-acquisition moments through the full pipeline, computed in parallel.
inline std::vector<XcorrMoments> acquisition_moments(std::span<const AcquisitionSet> acqs,
                                                     const PipelineGeometry& g, const PipelineConfig& cfg) {
  require(!acqs.empty(), Errc::EmptyInput, "no acquisitions");
  std::vector<XcorrMoments> out(acqs.size());
  const bool with_var = cfg.normalization == Normalization::Pearson;
  parallel_for(acqs.size(), [&](std::size_t i) {
    out[i] = xcorr_moments_fft(difference_frames(acqs[i], g, cfg.background_correct, cfg.gain), with_var);
  });
  return out;
}

/// Mean of per-acquisition covariance maps over [first, last); Pearson
/// normalization, when requested, is applied after averaging.
inline CrossCorrMap accumulate_moments(std::span<const XcorrMoments> ms, std::size_t first, std::size_t last,
                                       Normalization norm) {
  return detail::map_from_moments(mean_moments(ms, first, last), norm, last - first);
}

inline CrossCorrMap accumulate_xcorr(std::span<const AcquisitionSet> acqs, const PipelineGeometry& g,
                                     const PipelineConfig& cfg) {
  const auto ms = acquisition_moments(acqs, g, cfg);
  return accumulate_moments(ms, 0, ms.size(), cfg.normalization);
}

/// Plans the geometry from the acquisitions themselves, then accumulates.
inline CrossCorrMap accumulate_xcorr(std::span<const AcquisitionSet> acqs, FieldMode mode,
                                     const PipelineConfig& cfg) {
  return accumulate_xcorr(acqs, plan_geometry(acqs, mode, cfg), cfg);
}

/// Largest |Pearson| over all lags against the level reached by uncorrelated
/// beams, 4 / sqrt(window pixels * acquisitions).
struct PeakCheck {
  double max_abs = 0.0;
  double threshold = 0.0;
  bool present = false;
};

inline PeakCheck correlation_peak(const CrossCorrMap& pearson, std::size_t window_pixels) {
  require(pearson.normalization == Normalization::Pearson, Errc::InvalidParameter, "peak check needs a Pearson map");
  require(window_pixels > 0 && pearson.n_acq_accumulated > 0, Errc::InvalidParameter, "empty window");
  PeakCheck c;
  for (double v : pearson.values.pixels()) c.max_abs = std::max(c.max_abs, std::fabs(v));
  c.threshold = 4.0 / std::sqrt(double(window_pixels) * double(pearson.n_acq_accumulated));
  c.present = c.max_abs >= c.threshold;
  return c;
}

}  // namespace twinbeam
