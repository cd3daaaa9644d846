#include <gtest/gtest.h>

#include <cmath>
#include <complex>

#include "twinbeam/fft.hpp"
#include "twinbeam/simgen.hpp"
#include "twinbeam/sqz.hpp"

using namespace twinbeam;

namespace {

SimParams small(FieldMode mode) {
  SimParams p;
  p.mode = mode;
  p.width = 64;
  p.height = 48;
  p.mean_profile = BeamProfile::gaussian(32, 24, 10);
  p.pairs_per_frame = 5000;
  p.n_acquisitions = 4;
  p.seed = 11;
  return p;
}

double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

TEST(ExpectedNr, OracleValues) {
  EXPECT_DOUBLE_EQ(expected_nr(1, 1), 0.0);
  EXPECT_NEAR(expected_nr(0.8, 0.8), 0.2, 1e-15);
  EXPECT_NEAR(expected_nr(0.7, 0.9), 0.2125, 1e-15);
  EXPECT_DOUBLE_EQ(expected_nr(0, 0), 1.0);
  EXPECT_THROW(expected_nr(1.2, 0.5), Error);
}

TEST(Simgen, PerfectCorrelationLimitNearField) {
  auto p = small(FieldMode::NearField);
  p.eta_p = p.eta_c = 1.0;
  p.jitter_sigma_x = p.jitter_sigma_y = 0.0;
  p.fixed_pair_count = true;
  const auto a = simulate_acquisition(p, 0);
  EXPECT_EQ(a.probe_f1, a.conj_f1);
  EXPECT_EQ(a.probe_f2, a.conj_f2);
  double total = 0;
  for (float v : a.probe_f1.pixels()) total += v;
  EXPECT_GT(total, 4900.0);
}

TEST(Simgen, FarFieldPartnersAreMirrored) {
  auto p = small(FieldMode::FarField);
  p.eta_p = p.eta_c = 1.0;
  p.jitter_sigma_x = p.jitter_sigma_y = 0.0;
  const auto a = simulate_acquisition(p, 1);
  EXPECT_EQ(rotate180(a.probe_f1), a.conj_f1);
  EXPECT_EQ(rotate180(a.probe_f2), a.conj_f2);
}

TEST(Simgen, DeterministicAcrossThreadCounts) {
  auto p = small(FieldMode::NearField);
  p.bg_rate = 0.5;
  p.n_acquisitions = 6;
  set_thread_count(1);
  const auto one = simulate_acquisitions(p);
  set_thread_count(4);
  const auto four = simulate_acquisitions(p);
  set_thread_count(0);
  ASSERT_EQ(one.size(), four.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    EXPECT_EQ(one[i].probe_f1, four[i].probe_f1);
    EXPECT_EQ(one[i].conj_f2, four[i].conj_f2);
    EXPECT_EQ(*one[i].bg_probe, *four[i].bg_probe);
  }
  // a single acquisition does not depend on how many were requested
  EXPECT_EQ(simulate_acquisition(p, 5).conj_f1, one[5].conj_f1);
}

TEST(Simgen, ValidationRejectsBadParameters) {
  auto p = small(FieldMode::NearField);
  p.n_acquisitions = 0;
  EXPECT_THROW(p.validate(), Error);
  p = small(FieldMode::NearField);
  p.eta_c = 1.5;
  EXPECT_THROW(p.validate(), Error);
  p = small(FieldMode::NearField);
  p.jitter_sigma_x = -1;
  EXPECT_THROW(p.validate(), Error);
}

TEST(Simgen, EnsembleMeanCountsMatchProfile) {
  auto p = small(FieldMode::NearField);
  p.n_acquisitions = 150;
  p.pairs_per_frame = 20000;
  p.eta_p = 0.7;
  p.bg_rate = 0.3;
  const auto acqs = simulate_acquisitions(p);
  const double sb = p.mean_profile.sigma_beam_px;
  for (std::size_t x : {20u, 28u, 32u, 37u}) {
    for (std::size_t y : {18u, 24u, 30u}) {
      double s = 0, ss = 0;
      for (const auto& a : acqs)
        for (const auto* f : {&a.probe_f1, &a.probe_f2}) {
          const double v = (*f)(x, y);
          s += v;
          ss += v * v;
        }
      const double n = 2.0 * double(acqs.size());
      const double mean = s / n, se = std::sqrt((ss / n - mean * mean) / n);
      const double mx = norm_cdf((double(x) + 1 - 32) / sb) - norm_cdf((double(x) - 32) / sb);
      const double my = norm_cdf((double(y) + 1 - 24) / sb) - norm_cdf((double(y) - 24) / sb);
      const double expect = p.pairs_per_frame * p.eta_p * mx * my + p.bg_rate;
      EXPECT_NEAR(mean, expect, 4 * se) << "pixel " << x << "," << y;
    }
  }
}

TEST(Simgen, BackgroundFramesHoldOnlyBackground) {
  auto p = small(FieldMode::NearField);
  p.bg_rate = 2.0;
  const auto a = simulate_acquisition(p, 0);
  ASSERT_TRUE(a.has_background());
  EXPECT_NEAR(mean_of(*a.bg_probe), 2.0, 4 * std::sqrt(2.0 / double(a.bg_probe->size())));
  p.bg_rate = 0.0;
  const auto b = simulate_acquisition(p, 0);
  for (float v : b.bg_conj->pixels()) EXPECT_EQ(v, 0.0f);
  p.background_frames = false;
  EXPECT_FALSE(simulate_acquisition(p, 0).has_background());
}

TEST(Simgen, CoherentZeroProfileGivesZeroFrames) {
  auto p = small(FieldMode::NearField);
  p.pairs_per_frame = 0;
  p.n_acquisitions = 2;
  for (const auto& a : simulate_coherent_pair(p)) {
    for (float v : a.probe_f1.pixels()) EXPECT_EQ(v, 0.0f);
    for (float v : a.conj_f2.pixels()) EXPECT_EQ(v, 0.0f);
  }
}

// Brute-force check of the Poisson-thinning algebra: with no jitter every pair
// lands in one super-pixel, so NR equals the oracle at any bin size.
class PairModelNr : public ::testing::TestWithParam<std::pair<double, double>> {};

TEST_P(PairModelNr, MatchesExpectedNrOverManySuperpixels) {
  const auto [ep, ec] = GetParam();
  SimParams p;
  p.width = p.height = 100;
  p.mean_profile = BeamProfile::flat();
  p.pairs_per_frame = 1e5;
  p.jitter_sigma_x = p.jitter_sigma_y = 0.0;
  p.eta_p = ep;
  p.eta_c = ec;
  p.n_acquisitions = 100;
  p.background_frames = false;
  const auto acqs = simulate_acquisitions(p);
  const std::vector<std::size_t> bins{10};  // 100 super-pixels x 100 acquisitions
  const auto curve = nr_curve(acqs, AnalysisRegion{0, 0, 100, 100}, bins, false);
  EXPECT_NEAR(curve[0].nr, expected_nr(ep, ec), 3 * curve[0].sem);
  EXPECT_LT(curve[0].sem, 0.01);
}

INSTANTIATE_TEST_SUITE_P(Simgen, PairModelNr,
                         ::testing::Values(std::pair{0.8, 0.8}, std::pair{0.7, 0.9}, std::pair{1.0, 1.0}));

// --- temporal traces --------------------------------------------------------

namespace {

TemporalSimParams short_traces(SpectrumModel m, std::size_t trials) {
  TemporalSimParams t;
  t.spectrum = m;
  t.dt = 2e-9;
  t.duration = 1e-6;
  t.frame_gap = 2e-6;
  t.n_trials = trials;
  t.seed = 21;
  return t;
}

}  // namespace

TEST(Temporal, ParameterValidation) {
  auto t = short_traces(SpectrumModel::flat(0.5), 10);
  t.dt = 0;
  EXPECT_THROW(t.validate(), Error);
  t = short_traces(SpectrumModel::flat(0.5), 10);
  t.frame_gap = 0.5e-6;
  EXPECT_THROW(t.validate(), Error);
  EXPECT_EQ(short_traces(SpectrumModel::flat(0.5), 10).n_samples(), 4096u);
}

TEST(Temporal, IndependentWhiteTracesAreUncorrelated) {
  // nr0 = 1 and infinite gamma: S_pc = 0, S_p = S_c = 1
  const auto traces = simulate_temporal_traces(short_traces(SpectrumModel::flat(1.0), 4));
  for (const auto& tr : traces) {
    double sp = 0, sc = 0, spc = 0;
    for (std::size_t i = 0; i < tr.probe.size(); ++i) {
      sp += tr.probe[i] * tr.probe[i];
      sc += tr.conj[i] * tr.conj[i];
      spc += tr.probe[i] * tr.conj[i];
    }
    const double r = spc / std::sqrt(sp * sc);
    EXPECT_LT(std::fabs(r), 4.0 / std::sqrt(double(tr.probe.size())));
    // white two-sided level 1 gives per-sample variance 1/dt
    EXPECT_NEAR(sp / double(tr.probe.size()) * tr.dt, 1.0, 0.1);
  }
}

TEST(Temporal, NonPsdSpectrumRejected) {
  EXPECT_THROW(SpectrumModel::tabulated({0, 1}, {1, 1}, {1, 1}, {2, 2}, 1, 1), Error);
}

TEST(Temporal, DifferencePeriodogramMatchesModel) {
  const auto model = SpectrumModel::lorentzian_diff(0.3112, 2 * std::numbers::pi * 5e6);
  const auto params = short_traces(model, 200);
  const auto traces = simulate_temporal_traces(params);
  const std::size_t n = params.n_samples();
  const double dw = 2 * std::numbers::pi / (double(n) * params.dt);
  const std::size_t band = 64, n_bands = 12;
  std::vector<double> sum(n_bands, 0.0), sum2(n_bands, 0.0);
  for (const auto& tr : traces) {
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = tr.probe[i] - tr.conj[i];
    const auto X = fft::r2c(d, 1, n);
    for (std::size_t b = 0; b < n_bands; ++b)
      for (std::size_t k = 1 + b * band; k <= (b + 1) * band; ++k) {
        const double pk = std::norm(X[k]) * params.dt / double(n);
        sum[b] += pk;
        sum2[b] += pk * pk;
      }
  }
  const double m = double(traces.size() * band);
  for (std::size_t b = 0; b < n_bands; ++b) {
    double expect = 0;
    for (std::size_t k = 1 + b * band; k <= (b + 1) * band; ++k) {
      const auto c = model.at(double(k) * dw);
      expect += c.s_p + c.s_c - 2 * c.s_pc;
    }
    expect /= double(band);
    const double mean = sum[b] / m;
    const double se = std::sqrt((sum2[b] / m - mean * mean) / m);
    EXPECT_NEAR(mean, expect, 3 * se) << "band " << b;
  }
}
