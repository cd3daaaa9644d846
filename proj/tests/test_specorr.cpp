#include <gtest/gtest.h>

#include <cmath>

#include "twinbeam/rng.hpp"
#include "twinbeam/simgen.hpp"
#include "twinbeam/specorr.hpp"

using namespace twinbeam;

namespace {

Image<double> noise(std::size_t w, std::size_t h, std::uint64_t seed) {
  Rng r(seed);
  Image<double> img(w, h);
  for (auto& v : img.pixels()) v = r.normal();
  return img;
}

// A few smooth blobs: a registration target with a unique best alignment.
Image<double> blobs(std::size_t w, std::size_t h) {
  Image<double> img(w, h);
  const double c[3][3] = {{20, 15, 4}, {45, 30, 6}, {30, 40, 3}};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (const auto& b : c) {
        const double dx = double(x) - b[0], dy = double(y) - b[1];
        img(x, y) += std::exp(-(dx * dx + dy * dy) / (2 * b[2] * b[2]));
      }
  return img;
}

FluctuationPair random_pair(std::uint64_t seed, std::size_t wp = 120, std::size_t wc = 80) {
  return {noise(wp, wp, seed), noise(wc, wc, seed + 1000), {}, false};
}

double max_abs(const Image<double>& m) {
  double v = 0;
  for (double x : m.pixels()) v = std::max(v, std::fabs(x));
  return v;
}

AcquisitionSet from_images(const Image<double>& p1, const Image<double>& p2, const Image<double>& c1,
                           const Image<double>& c2) {
  return {image_cast<float>(p1), image_cast<float>(p2), image_cast<float>(c1), image_cast<float>(c2), {}, {}};
}

// Peak height over the spread of the map away from the center.
double peak_to_floor(const CrossCorrMap& m) {
  const long cx = -m.lag_x0, cy = -m.lag_y0;
  double s = 0, ss = 0, n = 0, peak = -1e300;
  for (std::size_t y = 0; y < m.values.height(); ++y)
    for (std::size_t x = 0; x < m.values.width(); ++x) {
      const double v = m.values(x, y);
      const long dx = long(x) - cx, dy = long(y) - cy;
      if (std::abs(dx) <= 1 && std::abs(dy) <= 1) peak = std::max(peak, v);
      if (dx * dx + dy * dy > 15 * 15) {
        s += v;
        ss += v * v;
        n += 1;
      }
    }
  const double mean = s / n;
  return (peak - mean) / std::sqrt(ss / n - mean * mean);
}

}  // namespace

TEST(Register, IdenticalImagesGiveZeroShift) {
  const auto a = blobs(64, 56);
  EXPECT_EQ(register_shift(a, a), (Shift{0, 0}));
}

TEST(Register, RecoversExplicitShift) {
  const auto a = blobs(64, 56);
  EXPECT_EQ(register_shift(a, shifted(a, 3, -2)), (Shift{3, -2}));
  EXPECT_EQ(register_shift(a, shifted(a, -5, 4)), (Shift{-5, 4}));
}

TEST(Register, ConstantImageIsDegenerate) {
  const Image<double> c(32, 32, 7.0);
  try {
    register_shift(c, blobs(32, 32));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DegenerateInput);
  }
}

TEST(Difference, EqualFramesGiveZeroFluctuation) {
  const auto p = noise(120, 120, 1), c = noise(120, 120, 2);
  const auto pair = difference_frames(from_images(p, p, c, c), false);
  EXPECT_EQ(pair.probe_fluct.width(), 120u);
  EXPECT_EQ(pair.conj_fluct.width(), 80u);
  EXPECT_EQ(max_abs(pair.probe_fluct), 0.0);
  EXPECT_EQ(max_abs(pair.conj_fluct), 0.0);
}

TEST(Difference, ConstantBackgroundCancels) {
  Image<double> p1(120, 120), p2(120, 120), c1(120, 120), c2(120, 120);
  Rng r(3);
  for (auto* img : {&p1, &p2, &c1, &c2})
    for (auto& v : img->pixels()) v = double(r.poisson(20.0));
  auto acq = from_images(p1, p2, c1, c2);
  acq.bg_probe = Image<float>(120, 120, 3.0f);
  acq.bg_conj = Image<float>(120, 120, 5.0f);
  const auto off = difference_frames(acq, false);
  const auto on = difference_frames(acq, true);
  EXPECT_EQ(off.probe_fluct, on.probe_fluct);
  EXPECT_EQ(off.conj_fluct, on.conj_fluct);
}

TEST(Difference, SimulatedFluctuationsHaveZeroMean) {
  SimParams p;
  p.width = 200;
  p.height = 140;
  p.mean_profile = BeamProfile::gaussian(100, 70, 30);
  p.pairs_per_frame = 5e4;
  p.n_acquisitions = 3;
  const auto acqs = simulate_acquisitions(p);
  const auto g = plan_geometry(acqs, FieldMode::NearField, PipelineConfig{});
  for (const auto& a : acqs) {
    const auto pair = difference_frames(a, g, false);
    for (const auto* img : {&pair.probe_fluct, &pair.conj_fluct}) {
      const double sem = std::sqrt(sample_variance(*img) / double(img->size()));
      EXPECT_LT(std::fabs(mean_of(*img)), 5 * sem);
    }
  }
}

TEST(Difference, ConjugateNotSmallerIsRejected) {
  FluctuationPair bad{noise(80, 80, 1), noise(80, 80, 2), {}, false};
  EXPECT_THROW(crosscorr_direct(bad, Normalization::Covariance), Error);
}

TEST(Crosscorr, GeometryFollowsValidOverlapRule) {
  const auto m = crosscorr_fft(random_pair(1), Normalization::Covariance);
  EXPECT_EQ(m.values.width(), 41u);
  EXPECT_EQ(m.values.height(), 41u);
  EXPECT_EQ(m.lag_x0, -20);
  EXPECT_EQ(m.lag_y0, -20);
  FluctuationPair odd{noise(50, 37, 1), noise(20, 30, 2), {}, false};
  const auto o = crosscorr_direct(odd, Normalization::Covariance);
  EXPECT_EQ(o.values.width(), 31u);
  EXPECT_EQ(o.values.height(), 8u);
  EXPECT_EQ(o.lag_x0, -15);
  EXPECT_EQ(o.lag_y0, -3);
}

TEST(Crosscorr, SelfCorrelationIsOneAtZeroLag) {
  const auto p = noise(120, 120, 4);
  FluctuationPair pair{p, crop(p, {20, 20, 80, 80}), {}, false};
  const auto m = crosscorr_direct(pair, Normalization::Pearson);
  EXPECT_NEAR(m.values(20, 20), 1.0, 1e-12);
  for (double v : m.values.pixels()) {
    EXPECT_LE(v, 1.0 + 1e-12);
    EXPECT_GE(v, -1.0 - 1e-12);
  }
}

TEST(Crosscorr, IndependentNoiseHasNoPeak) {
  // Each lag is ~N(0, 1/6400); the 4-sigma bound on the maximum over 1681
  // lags is exceeded in roughly one map in ten, so check the rate and the
  // per-lag spread rather than a single draw.
  const double bound = 4.0 / std::sqrt(6400.0);
  int exceed = 0;
  double ss = 0, n = 0;
  for (std::uint64_t s = 10; s < 30; ++s) {
    const auto m = crosscorr_fft(random_pair(s), Normalization::Pearson);
    exceed += max_abs(m.values) >= bound;
    for (double v : m.values.pixels()) {
      ss += v * v;
      n += 1;
    }
  }
  EXPECT_LE(exceed, 6);
  EXPECT_NEAR(std::sqrt(ss / n) * 80.0, 1.0, 0.1);
}

TEST(Crosscorr, FftMatchesDirect) {
  for (std::uint64_t s = 20; s < 25; ++s) {
    const auto pair = random_pair(s);
    for (auto norm : {Normalization::Covariance, Normalization::Pearson}) {
      const auto d = crosscorr_direct(pair, norm);
      const auto f = crosscorr_fft(pair, norm);
      double diff = 0;
      for (std::size_t i = 0; i < d.values.size(); ++i)
        diff = std::max(diff, std::fabs(d.values.pixels()[i] - f.values.pixels()[i]));
      EXPECT_LE(diff, 1e-9 * max_abs(d.values));
    }
  }
}

TEST(Crosscorr, ZeroConjugateGivesZeroCovariance) {
  FluctuationPair pair{noise(120, 120, 5), Image<double>(80, 80), {}, false};
  EXPECT_EQ(max_abs(crosscorr_fft(pair, Normalization::Covariance).values), 0.0);
  EXPECT_EQ(max_abs(crosscorr_direct(pair, Normalization::Covariance).values), 0.0);
  try {
    crosscorr_fft(pair, Normalization::Pearson);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ZeroVariance);
  }
}

TEST(Crosscorr, ConstantProbePatchIsZeroVariance) {
  Image<double> p = noise(60, 60, 6);
  for (std::size_t y = 0; y < 40; ++y)
    for (std::size_t x = 0; x < 40; ++x) p(x, y) = 2.5;
  FluctuationPair pair{p, noise(40, 40, 7), {}, false};
  EXPECT_THROW(crosscorr_direct(pair, Normalization::Pearson), Error);
  EXPECT_THROW(crosscorr_fft(pair, Normalization::Pearson), Error);
  EXPECT_NO_THROW(crosscorr_fft(pair, Normalization::Covariance));
}

TEST(Crosscorr, CovarianceIsSymmetricUnderSwapAndLagReversal) {
  // Zero-mean windows embedded in zero frames: swapping the roles of the two
  // images mirrors the lag.
  auto center = [](Image<double> img) {
    const double m = mean_of(img);
    for (auto& v : img.pixels()) v -= m;
    return img;
  };
  const auto a = center(noise(40, 40, 8)), b = center(noise(40, 40, 9));
  auto embed = [](const Image<double>& img) {
    Image<double> out(60, 60);
    for (std::size_t y = 0; y < 40; ++y)
      for (std::size_t x = 0; x < 40; ++x) out(x + 10, y + 10) = img(x, y);
    return out;
  };
  const auto ab = crosscorr_direct({embed(a), b, {}, false}, Normalization::Covariance);
  const auto ba = crosscorr_direct({embed(b), a, {}, false}, Normalization::Covariance);
  for (std::size_t y = 0; y < 21; ++y)
    for (std::size_t x = 0; x < 21; ++x) EXPECT_NEAR(ab.values(x, y), ba.values(20 - x, 20 - y), 1e-12);
}

TEST(Accumulate, SingleAndRepeatedAcquisitions) {
  SimParams p;
  p.width = 160;
  p.height = 130;
  p.mean_profile = BeamProfile::gaussian(80, 65, 30);
  p.pairs_per_frame = 3e4;
  p.n_acquisitions = 1;
  const auto one = simulate_acquisitions(p);
  PipelineConfig cfg;
  cfg.normalization = Normalization::Pearson;
  const auto g = plan_geometry(one, FieldMode::NearField, cfg);
  const auto single = accumulate_xcorr(one, g, cfg);
  EXPECT_EQ(single.n_acq_accumulated, 1u);
  const auto direct = crosscorr_fft(difference_frames(one[0], g, false), Normalization::Pearson);
  EXPECT_EQ(single.values, direct.values);

  const std::vector<AcquisitionSet> copies(4, one[0]);
  const auto rep = accumulate_xcorr(copies, g, cfg);
  EXPECT_EQ(rep.n_acq_accumulated, 4u);
  for (std::size_t i = 0; i < rep.values.size(); ++i)
    EXPECT_NEAR(rep.values.pixels()[i], single.values.pixels()[i], 1e-12);
  EXPECT_THROW(accumulate_xcorr(std::span<const AcquisitionSet>{}, g, cfg), Error);
}

TEST(Geometry, RegistrationFindsInjectedConjugateOffset) {
  SimParams p;
  p.width = 200;
  p.height = 150;
  p.mean_profile = BeamProfile::gaussian(90, 70, 25);
  p.pairs_per_frame = 4e4;
  p.jitter_sigma_x = p.jitter_sigma_y = 1.0;
  p.n_acquisitions = 4;
  auto acqs = simulate_acquisitions(p);
  for (auto& a : acqs) {
    a.conj_f1 = shifted(a.conj_f1, 4, -3);
    a.conj_f2 = shifted(a.conj_f2, 4, -3);
  }
  const auto g = plan_geometry(acqs, FieldMode::NearField, PipelineConfig{});
  EXPECT_EQ(g.shift, (Shift{4, -3}));
  EXPECT_EQ(g.conj_region.x0, g.probe_region.x0 + 4);
  EXPECT_EQ(g.conj_region.y0 + 3, g.probe_region.y0);
  // the correlation peak returns to zero lag once the shift is applied
  const auto m = accumulate_xcorr(acqs, g, PipelineConfig{});
  std::size_t bx = 0, by = 0;
  for (std::size_t y = 0; y < m.values.height(); ++y)
    for (std::size_t x = 0; x < m.values.width(); ++x)
      if (m.values(x, y) > m.values(bx, by)) bx = x, by = y;
  EXPECT_EQ(m.lag_x(double(bx)), 0.0);
  EXPECT_EQ(m.lag_y(double(by)), 0.0);
}

TEST(Geometry, FarFieldNeedsRotationForPeak) {
  SimParams p;
  p.mode = FieldMode::FarField;
  p.width = 220;
  p.height = 150;
  p.mean_profile = BeamProfile::gaussian(110, 75, 30);
  p.pairs_per_frame = 6e4;
  p.jitter_sigma_x = 2.0;
  p.jitter_sigma_y = 2.0;
  p.n_acquisitions = 20;
  p.eta_p = p.eta_c = 0.8;
  const auto acqs = simulate_acquisitions(p);
  const PipelineConfig cfg;
  const auto rotated = accumulate_xcorr(acqs, FieldMode::FarField, cfg);
  const auto plain = accumulate_xcorr(acqs, FieldMode::NearField, cfg);
  EXPECT_GT(peak_to_floor(rotated), 10.0);
  EXPECT_LT(peak_to_floor(plain), 5.0);
}

TEST(Accumulate, PeakSnrGrowsAsSquareRootOfCount) {
  SimParams p;
  p.width = 180;
  p.height = 140;
  p.mean_profile = BeamProfile::gaussian(90, 70, 40);
  p.pairs_per_frame = 2e4;
  p.jitter_sigma_x = p.jitter_sigma_y = 2.0;
  p.n_acquisitions = 80;
  p.seed = 5;
  const auto acqs = simulate_acquisitions(p);
  const PipelineConfig cfg;
  const auto g = plan_geometry(acqs, FieldMode::NearField, cfg);
  const auto ms = acquisition_moments(acqs, g, cfg);
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t n : {5u, 20u, 80u}) {
    const double lx = std::log(double(n)), ly = std::log(peak_to_floor(accumulate_moments(ms, 0, n, cfg.normalization)));
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double slope = (3 * sxy - sx * sy) / (3 * sxx - sx * sx);
  EXPECT_NEAR(slope, 0.5, 0.15);
}

TEST(PeakCheck, TwinBeamsHaveAPeakCoherentBeamsDoNot) {
  SimParams p;
  p.width = 200;
  p.height = 150;
  p.mean_profile = BeamProfile::gaussian(100, 75, 30);
  p.pairs_per_frame = 6e4;
  p.jitter_sigma_x = p.jitter_sigma_y = 2.0;
  p.n_acquisitions = 20;
  p.eta_p = p.eta_c = 0.8;
  PipelineConfig cfg;
  cfg.normalization = Normalization::Pearson;
  const auto twin = accumulate_xcorr(simulate_acquisitions(p), FieldMode::NearField, cfg);
  const auto coh = accumulate_xcorr(simulate_coherent_pair(p), FieldMode::NearField, cfg);
  const auto a = correlation_peak(twin, cfg.select * cfg.select);
  const auto b = correlation_peak(coh, cfg.select * cfg.select);
  EXPECT_NEAR(a.threshold, 4.0 / std::sqrt(6400.0 * 20.0), 1e-15);
  EXPECT_TRUE(a.present);
  EXPECT_GT(a.max_abs, 2.0 * a.threshold);
  EXPECT_FALSE(b.present) << b.max_abs << " vs " << b.threshold;

  EXPECT_THROW(correlation_peak(accumulate_xcorr(simulate_acquisitions(p), FieldMode::NearField, PipelineConfig{}), 6400),
               Error);
  EXPECT_THROW(correlation_peak(twin, 0), Error);
}
