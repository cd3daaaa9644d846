#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "twinbeam/error.hpp"

namespace twinbeam {

/// Two-sided noise power levels at one angular frequency.
struct SpectralComponents {
  double s_p = 0.0;
  double s_c = 0.0;
  double s_pc = 0.0;
};

/// Parametric description of the probe/conjugate noise spectra. All levels
/// are two-sided densities and even in Omega.
///
/// LorentzianDiff: white shot-noise-level beams (S_p = S_c = 1) with a real
/// cross spectrum chosen so that
///   S_diff(Omega) = 1 - (1 - nr0) * gamma^2 / (gamma^2 + Omega^2).
/// gamma = +inf gives a flat S_diff = nr0.
///
/// Tabulated: samples on a non-negative ascending grid, linearly interpolated
/// and held constant past the last node. One-sided input is halved when
/// mirrored to two-sided.
struct SpectrumModel {
  enum class Kind { LorentzianDiff, Tabulated };

  Kind kind = Kind::LorentzianDiff;
  double nr0 = 0.3112;
  double gamma = 2.0 * std::numbers::pi * 1e6;

  std::vector<double> omega, s_p, s_c, s_pc;
  double sn_p = 1.0, sn_c = 1.0;
  bool one_sided = false;

  static SpectrumModel lorentzian_diff(double nr0, double gamma) {
    SpectrumModel m;
    m.kind = Kind::LorentzianDiff;
    m.nr0 = nr0;
    m.gamma = gamma;
    m.validate();
    return m;
  }

  static SpectrumModel flat(double nr) {
    return lorentzian_diff(nr, std::numeric_limits<double>::infinity());
  }

  static SpectrumModel tabulated(std::vector<double> omega, std::vector<double> s_p,
                                 std::vector<double> s_c, std::vector<double> s_pc, double sn_p,
                                 double sn_c, bool one_sided = false) {
    SpectrumModel m;
    m.kind = Kind::Tabulated;
    m.omega = std::move(omega);
    m.s_p = std::move(s_p);
    m.s_c = std::move(s_c);
    m.s_pc = std::move(s_pc);
    m.sn_p = sn_p;
    m.sn_c = sn_c;
    m.one_sided = one_sided;
    m.validate();
    return m;
  }

  double scale() const noexcept { return kind == Kind::Tabulated && one_sided ? 0.5 : 1.0; }
  double shot_noise_p() const noexcept { return kind == Kind::Tabulated ? sn_p * scale() : 1.0; }
  double shot_noise_c() const noexcept { return kind == Kind::Tabulated ? sn_c * scale() : 1.0; }

  SpectralComponents at(double w) const {
    w = std::fabs(w);
    if (kind == Kind::LorentzianDiff) {
      return {1.0, 1.0, (1.0 - nr0) * lorentz(w)};
    }
    const double f = scale();
    return {f * interp(s_p, w), f * interp(s_c, w), f * interp(s_pc, w)};
  }

  /// Normalized intensity-difference spectrum.
  double s_diff(double w) const {
    const auto c = at(w);
    return (c.s_p + c.s_c - 2.0 * c.s_pc) / (shot_noise_p() + shot_noise_c());
  }

  /// Limit of s_diff as |Omega| grows past the modeled features.
  double s_diff_tail() const {
    if (kind == Kind::LorentzianDiff) return std::isinf(gamma) ? nr0 : 1.0;
    return s_diff(omega.back());
  }

  /// Finest frequency scale carried by the model (rad/s); +inf when flat.
  double feature_scale() const {
    if (kind == Kind::LorentzianDiff) return gamma;
    double h = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < omega.size(); ++i) h = std::min(h, omega[i] - omega[i - 1]);
    return h;
  }

  /// Largest frequency at which the model still has structure.
  double feature_extent() const {
    if (kind == Kind::LorentzianDiff) return std::isinf(gamma) ? 0.0 : gamma;
    return omega.back();
  }

  /// Throws NotPositiveSemidefinite when [[S_p, S_pc], [S_pc, S_c]] fails
  /// at w.
  void check_psd(double w) const {
    const auto c = at(w);
    const double scale = std::max({1e-300, std::fabs(c.s_p), std::fabs(c.s_c)});
    const double det = c.s_p * c.s_c - c.s_pc * c.s_pc;
    if (c.s_p >= -1e-12 * scale && c.s_c >= -1e-12 * scale && det >= -1e-12 * scale * scale) return;
    throw Error(Errc::NotPositiveSemidefinite,
                "cross-spectral matrix not positive semidefinite at omega=" + std::to_string(w));
  }

  void validate() const {
    if (kind == Kind::LorentzianDiff) {
      require(nr0 >= 0.0 && nr0 <= 1.0, Errc::InvalidParameter, "nr0 must lie in [0, 1]");
      require(gamma > 0.0, Errc::InvalidParameter, "gamma must be > 0");
      return;
    }
    const std::size_t n = omega.size();
    require(n >= 2 && s_p.size() == n && s_c.size() == n && s_pc.size() == n, Errc::InvalidParameter,
            "tabulated spectra need >= 2 nodes of equal length");
    require(omega.front() >= 0.0, Errc::InvalidParameter, "tabulated grid must be non-negative");
    for (std::size_t i = 1; i < n; ++i) {
      require(omega[i] > omega[i - 1], Errc::InvalidParameter, "tabulated grid must be ascending");
    }
    require(sn_p > 0.0 && sn_c > 0.0, Errc::InvalidParameter, "shot-noise levels must be > 0");
    for (double w : omega) check_psd(w);
  }

 private:
  double lorentz(double w) const {
    if (std::isinf(gamma)) return 1.0;
    return gamma * gamma / (gamma * gamma + w * w);
  }

  double interp(const std::vector<double>& v, double w) const {
    if (w <= omega.front()) return v.front();
    if (w >= omega.back()) return v.back();
    const auto it = std::upper_bound(omega.begin(), omega.end(), w);
    const std::size_t i = static_cast<std::size_t>(it - omega.begin());
    const double t = (w - omega[i - 1]) / (omega[i] - omega[i - 1]);
    return v[i - 1] + t * (v[i] - v[i - 1]);
  }
};

/// Temporal intensity profile f(t) of the probe pulse.
struct PulseProfile {
  enum class Kind { Rect, Gaussian };

  Kind kind = Kind::Rect;
  double T = 1e-6;  ///< Rect: duration. Gaussian: intensity FWHM.

  static PulseProfile rect(double T) { return {Kind::Rect, T}; }
  static PulseProfile gaussian(double fwhm) { return {Kind::Gaussian, fwhm}; }

  void validate() const { require(T > 0.0, Errc::InvalidParameter, "pulse duration must be > 0"); }

  double sigma_t() const { return T / (2.0 * std::sqrt(2.0 * std::numbers::ln2)); }

  /// f(t) with Rect on [0, T) and Gaussian centered at 0.
  double intensity(double t) const {
    if (kind == Kind::Rect) return (t >= 0.0 && t < T) ? 1.0 : 0.0;
    const double s = sigma_t();
    return std::exp(-0.5 * t * t / (s * s));
  }

  /// |F(Omega)|^2 of the profile above.
  double energy_spectrum(double w) const {
    if (kind == Kind::Rect) {
      const double x = 0.5 * w * T;
      const double sinc = std::fabs(x) < 1e-8 ? 1.0 - x * x / 6.0 : std::sin(x) / x;
      return T * T * sinc * sinc;
    }
    const double s = sigma_t();
    return 2.0 * std::numbers::pi * s * s * std::exp(-w * w * s * s);
  }

  /// Integral of |F|^2 over the whole line (= 2 pi * integral of f^2).
  double energy_total() const {
    if (kind == Kind::Rect) return 2.0 * std::numbers::pi * T;
    return 2.0 * std::numbers::pi * sigma_t() * std::sqrt(std::numbers::pi);
  }

  /// Normalized filter G(Omega), analytic.
  double filter(double w) const { return energy_spectrum(w) / energy_total(); }

  /// Width of the filter's main lobe (rad/s).
  double bandwidth() const {
    return kind == Kind::Rect ? 2.0 * std::numbers::pi / T : 1.0 / sigma_t();
  }

  /// Recommended detection window length holding essentially all of f.
  double support() const { return kind == Kind::Rect ? T : 12.0 * sigma_t(); }
};

}  // namespace twinbeam
