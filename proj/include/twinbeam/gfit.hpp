#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "twinbeam/error.hpp"
#include "twinbeam/image.hpp"
#include "twinbeam/parallel.hpp"
#include "twinbeam/rng.hpp"
#include "twinbeam/specorr.hpp"

namespace twinbeam {

/// Axis-aligned Gaussian A*exp(-(dx^2/2sx^2 + dy^2/2sy^2)) + B in map index
/// coordinates (column x, row y). Use CrossCorrMap::lag_x/lag_y to convert
/// the center to lags.
struct GaussModel {
  double A = 1.0;
  double x0 = 0.0, y0 = 0.0;
  double sigma_x = 1.0, sigma_y = 1.0;
  double B = 0.0;

  double operator()(double x, double y) const {
    const double dx = x - x0, dy = y - y0;
    return A * std::exp(-0.5 * (dx * dx / (sigma_x * sigma_x) + dy * dy / (sigma_y * sigma_y))) + B;
  }

  /// Samples the model on a width x height index grid.
  Image<double> render(std::size_t width, std::size_t height) const {
    Image<double> out(width, height);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) out(x, y) = (*this)(double(x), double(y));
    return out;
  }
};

struct FitOptions {
  bool fit_offset = false;
  std::optional<GaussModel> init_override;
  int max_iter = 200;
};

/// Parameter order in covariance and CI arrays.
enum GaussParam : std::size_t { kA = 0, kX0, kY0, kSigmaX, kSigmaY, kB };

struct GaussFitResult {
  GaussModel model;
  std::size_t n_params = 5;
  std::array<std::array<double, 6>, 6> covariance{};
  std::array<double, 6> ci68{};
  std::array<double, 6> ci95{};
  double ssr = 0.0;
  int n_iter = 0;
  bool converged = false;
};

namespace detail {

inline double median_of(std::span<const double> values) {
  std::vector<double> v(values.begin(), values.end());
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<long>(mid)));
  return m;
}

inline GaussModel moment_init(const Image<double>& z, bool fit_offset) {
  const double med = median_of(z.pixels());
  double sw = 0, sx = 0, sy = 0, peak = -std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < z.height(); ++y) {
    for (std::size_t x = 0; x < z.width(); ++x) {
      const double w = std::max(0.0, z(x, y) - med);
      sw += w;
      sx += w * double(x);
      sy += w * double(y);
      peak = std::max(peak, z(x, y));
    }
  }
  require(sw > 0.0, Errc::SingularNormalMatrix, "map has no structure above its median");
  GaussModel g;
  g.x0 = sx / sw;
  g.y0 = sy / sw;
  double vx = 0, vy = 0;
  for (std::size_t y = 0; y < z.height(); ++y) {
    for (std::size_t x = 0; x < z.width(); ++x) {
      const double w = std::max(0.0, z(x, y) - med);
      vx += w * (double(x) - g.x0) * (double(x) - g.x0);
      vy += w * (double(y) - g.y0) * (double(y) - g.y0);
    }
  }
  const double cap_x = 0.5 * double(z.width()), cap_y = 0.5 * double(z.height());
  g.sigma_x = std::clamp(std::sqrt(vx / sw), 0.5, cap_x);
  g.sigma_y = std::clamp(std::sqrt(vy / sw), 0.5, cap_y);
  g.A = peak - med;
  g.B = fit_offset ? med : 0.0;
  return g;
}

struct Problem {
  const Image<double>& z;
  std::size_t p;

  static Eigen::VectorXd pack(const GaussModel& g, std::size_t p) {
    Eigen::VectorXd v(p);
    v << g.A, g.x0, g.y0, g.sigma_x, g.sigma_y;
    if (p == 6) v(5) = g.B;
    return v;
  }

  GaussModel unpack(const Eigen::VectorXd& v) const {
    return {v(0), v(1), v(2), v(3), v(4), p == 6 ? v(5) : 0.0};
  }

  double cost(const Eigen::VectorXd& v) const {
    const GaussModel g = unpack(v);
    double c = 0.0;
    for (std::size_t y = 0; y < z.height(); ++y)
      for (std::size_t x = 0; x < z.width(); ++x) {
        const double r = g(double(x), double(y)) - z(x, y);
        c += r * r;
      }
    return c;
  }

  // Normal equations J^T J and J^T r at v.
  void normal(const Eigen::VectorXd& v, Eigen::MatrixXd& jtj, Eigen::VectorXd& jtr) const {
    const GaussModel g = unpack(v);
    jtj.setZero(long(p), long(p));
    jtr.setZero(long(p));
    Eigen::VectorXd row(static_cast<Eigen::Index>(p));
    const double isx2 = 1.0 / (g.sigma_x * g.sigma_x), isy2 = 1.0 / (g.sigma_y * g.sigma_y);
    for (std::size_t y = 0; y < z.height(); ++y) {
      for (std::size_t x = 0; x < z.width(); ++x) {
        const double dx = double(x) - g.x0, dy = double(y) - g.y0;
        const double e = std::exp(-0.5 * (dx * dx * isx2 + dy * dy * isy2));
        const double ae = g.A * e;
        row(0) = e;
        row(1) = ae * dx * isx2;
        row(2) = ae * dy * isy2;
        row(3) = ae * dx * dx * isx2 / g.sigma_x;
        row(4) = ae * dy * dy * isy2 / g.sigma_y;
        if (p == 6) row(5) = 1.0;
        const double r = ae + g.B - z(x, y);
        jtj.selfadjointView<Eigen::Lower>().rankUpdate(row);
        jtr += r * row;
      }
    }
    jtj = jtj.selfadjointView<Eigen::Lower>();
  }
};

// Condition number of J^T J after Jacobi scaling.
inline double scaled_condition(const Eigen::MatrixXd& jtj) {
  const Eigen::VectorXd d = jtj.diagonal();
  if ((d.array() <= 0.0).any()) return std::numeric_limits<double>::infinity();
  const Eigen::VectorXd s = d.cwiseSqrt().cwiseInverse();
  const Eigen::MatrixXd m = s.asDiagonal() * jtj * s.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  if (!(lo > 0.0)) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

}  // namespace detail

/// Damped Gauss-Newton least squares on the map values. Values are divided
/// by max|value| during the iteration; A, B and their uncertainties are
/// reported in map units.
inline GaussFitResult fit_gaussian2d(const Image<double>& map, const FitOptions& opt = {}) {
  require(map.width() >= 7 && map.height() >= 7, Errc::InvalidDimensions, "fit needs a map of at least 7x7");
  double vmax = 0.0;
  for (double v : map.pixels()) {
    require(std::isfinite(v), Errc::InvalidParameter, "map contains non-finite values");
    vmax = std::max(vmax, std::fabs(v));
  }
  require(vmax > 0.0, Errc::SingularNormalMatrix, "map is identically zero");
  const Image<double> z = scaled(map, 1.0 / vmax);
  const std::size_t p = opt.fit_offset ? 6 : 5;
  const detail::Problem prob{z, p};

  GaussModel init;
  if (opt.init_override) {
    init = *opt.init_override;
    init.A /= vmax;
    init.B = opt.fit_offset ? init.B / vmax : 0.0;
  } else {
    init = detail::moment_init(z, opt.fit_offset);
  }

  Eigen::VectorXd v = detail::Problem::pack(init, p);
  double cost = prob.cost(v);
  double lambda = 1e-3;
  GaussFitResult res;
  Eigen::MatrixXd jtj;
  Eigen::VectorXd jtr;
  bool need_normal = true;
  while (res.n_iter < opt.max_iter) {
    ++res.n_iter;
    if (need_normal) prob.normal(v, jtj, jtr);
    if (cost < 1e-28) {
      res.converged = true;
      break;
    }
    Eigen::MatrixXd damped = jtj;
    damped.diagonal().array() += lambda;
    const Eigen::VectorXd step = damped.ldlt().solve(-jtr);
    const double step_norm = step.cwiseAbs().maxCoeff();
    const Eigen::VectorXd cand = v + step;
    const double cand_cost = (cand(3) > 0.0 && cand(4) > 0.0 && step.allFinite())
                                 ? prob.cost(cand)
                                 : std::numeric_limits<double>::infinity();
    if (cand_cost < cost) {
      const double rel = (cost - cand_cost) / cost;
      v = cand;
      cost = cand_cost;
      lambda *= 0.1;
      need_normal = true;
      if (rel < 1e-10 || step_norm < 1e-12) {
        res.converged = true;
        break;
      }
    } else {
      lambda *= 10.0;
      need_normal = false;
      if (step_norm < 1e-12) {
        res.converged = true;
        break;
      }
      if (lambda > 1e20) break;
    }
  }

  prob.normal(v, jtj, jtr);
  require(detail::scaled_condition(jtj) <= 1e12, Errc::SingularNormalMatrix,
          "normal matrix is numerically singular");

  res.model = prob.unpack(v);
  res.model.A *= vmax;
  res.model.B *= vmax;
  res.n_params = p;
  const double n = double(z.size());
  const double s2 = n > double(p) ? cost / (n - double(p)) : 0.0;
  const Eigen::MatrixXd cov = s2 * jtj.ldlt().solve(Eigen::MatrixXd::Identity(long(p), long(p)));
  for (std::size_t i = 0; i < p; ++i) {
    const double si = (i == kA || i == kB) ? vmax : 1.0;
    for (std::size_t j = 0; j < p; ++j) {
      const double sj = (j == kA || j == kB) ? vmax : 1.0;
      res.covariance[i][j] = cov(long(i), long(j)) * si * sj;
    }
    res.ci68[i] = std::sqrt(std::max(0.0, res.covariance[i][i]));
    res.ci95[i] = 1.96 * res.ci68[i];
  }
  res.ssr = cost * vmax * vmax;
  return res;
}

inline GaussFitResult fit_gaussian2d(const CrossCorrMap& map, const FitOptions& opt = {}) {
  return fit_gaussian2d(map.values, opt);
}

struct CoverageReport {
  double coverage = 0.0;       ///< covered / valid
  std::size_t n_trials = 0;
  std::size_t n_valid = 0;     ///< converged fits
  std::size_t n_covered = 0;
  std::size_t n_failed = 0;    ///< thrown or non-converged fits, excluded
};

/// Fits n_trials noisy renderings of `truth` and counts how often the 68%
/// interval for sigma_x contains the true value.
inline CoverageReport ci_coverage_selftest(const GaussModel& truth, double noise_sd, std::size_t n_trials,
                                           std::uint64_t seed, std::size_t grid = 41) {
  require(n_trials >= 100, Errc::InvalidParameter, "coverage self-test needs >= 100 trials");
  require(noise_sd >= 0.0, Errc::InvalidParameter, "noise_sd must be >= 0");
  const Image<double> clean = truth.render(grid, grid);
  enum Outcome : int { Failed, Missed, Covered };
  std::vector<int> outcome(n_trials, Failed);
  parallel_for(n_trials, [&](std::size_t t) {
    Rng rng(stream_seed(seed, t, 0x6669742dULL));
    Image<double> noisy = clean;
    for (auto& v : noisy.pixels()) v += noise_sd * rng.normal();
    try {
      const auto fit = fit_gaussian2d(noisy, {truth.B != 0.0, std::nullopt, 200});
      if (!fit.converged) return;
      const double err = std::fabs(fit.model.sigma_x - truth.sigma_x);
      outcome[t] = err <= fit.ci68[kSigmaX] + 1e-9 * std::fabs(truth.sigma_x) ? Covered : Missed;
    } catch (const Error&) {
    }
  });
  CoverageReport r;
  r.n_trials = n_trials;
  for (int o : outcome) {
    if (o == Failed) ++r.n_failed;
    else ++r.n_valid;
    if (o == Covered) ++r.n_covered;
  }
  r.coverage = r.n_valid ? double(r.n_covered) / double(r.n_valid) : 0.0;
  return r;
}

}  // namespace twinbeam
