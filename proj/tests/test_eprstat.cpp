#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "twinbeam/eprstat.hpp"
#include "twinbeam/simgen.hpp"

using namespace twinbeam;

namespace {

OpticsConfig near_optics() { return OpticsConfig{FieldMode::NearField}; }
OpticsConfig far_optics() { return OpticsConfig{FieldMode::FarField}; }

// Reference widths with their 95% half-widths.
EprAxisResult reference_axis(Axis axis) {
  const Width near = axis == Axis::X ? Width{4.27, 0.10} : Width{3.52, 0.08};
  const Width far = axis == Axis::X ? Width{4.78, 0.13} : Width{4.90, 0.13};
  return epr_product(near, far, near_optics(), far_optics(), axis, CiLevel::P95);
}

}  // namespace

TEST(Transforms, DeltaR) {
  EXPECT_NEAR(delta_r(4.27, near_optics()), 1.0511e-4, 1e-8);
  EXPECT_EQ(delta_r(0.0, near_optics()), 0.0);
  auto unit = near_optics();
  unit.magnification_M = 1.0;
  unit.pixel_size_s = 1.0;
  EXPECT_DOUBLE_EQ(delta_r(3.7, unit), 3.7);
  try {
    delta_r(1.0, far_optics());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::WrongMode);
  }
}

TEST(Transforms, DeltaP) {
  EXPECT_NEAR(delta_p_hbar(4.78, far_optics()), 1208.9, 0.05);
  EXPECT_EQ(delta_p_hbar(0.0, far_optics()), 0.0);
  auto longer = far_optics();
  longer.focal_f *= 2;
  EXPECT_DOUBLE_EQ(delta_p_hbar(4.78, longer), 0.5 * delta_p_hbar(4.78, far_optics()));
  EXPECT_THROW(delta_p_hbar(1.0, near_optics()), Error);
}

TEST(Epr, ReferenceWidthsReproduceQuotedProducts) {
  const auto x = reference_axis(Axis::X), y = reference_axis(Axis::Y);
  EXPECT_NEAR(x.product, 1.61e-2, 0.0006e-2 + 0.005e-2);
  EXPECT_NEAR(x.product / 1.62e-2, 1.0, 0.015);
  EXPECT_NEAR(y.product / 1.15e-2, 1.0, 0.015);
  EXPECT_NEAR(x.delta / 0.12e-2, 1.0, 0.10);
  EXPECT_NEAR(y.delta / 0.08e-2, 1.0, 0.10);
  EXPECT_TRUE(x.violation);
  EXPECT_TRUE(check_significance(x));
  EXPECT_DOUBLE_EQ(x.confidence, std::fabs(0.25 - x.product) / x.delta);
}

TEST(Epr, BoundaryProductHasZeroConfidence) {
  // pick the far width so that (dr * dp)^2 = 1/4 exactly
  const double near_sigma = 4.0;
  const double dr = delta_r(near_sigma, near_optics());
  const double dp_per_px = delta_p_hbar(1.0, far_optics());
  const double far_sigma = 0.5 / (dr * dp_per_px);
  const auto r = epr_product(Width{near_sigma, 0.1}, Width{far_sigma, 0.1}, near_optics(), far_optics(), Axis::X,
                             CiLevel::P68);
  EXPECT_NEAR(r.product, 0.25, 1e-12);
  EXPECT_NEAR(r.confidence, 0.0, 1e-9);
  EXPECT_FALSE(check_significance(r));
}

TEST(Epr, SignificanceCases) {
  EprAxisResult r;
  r.product = 1.6e-2;
  r.delta = 6e-4;
  r.confidence = confidence_level(r.product, r.delta);
  EXPECT_NEAR(r.confidence, 390.0, 0.5);
  EXPECT_TRUE(check_significance(r));
  r.product = 0.24;
  r.delta = 0.1;
  r.confidence = confidence_level(r.product, r.delta);
  EXPECT_NEAR(r.confidence, 0.1, 1e-12);
  EXPECT_FALSE(check_significance(r));
  r.product = 0.3;
  r.delta = 1e-6;
  r.confidence = confidence_level(r.product, r.delta);
  EXPECT_GT(r.confidence, 5);
  EXPECT_FALSE(check_significance(r));
}

TEST(Epr, ProductScalingLaws) {
  const auto base = epr_product(Width{4.0, 0.1}, Width{5.0, 0.1}, near_optics(), far_optics(), Axis::X, CiLevel::P68);
  const double two_pi = 2 * std::numbers::pi;
  const double s = 16e-6, M = 0.65, lf = 795e-9 * 0.5;
  const double literal = (s / M) * (s / M) * (s / lf) * (s / lf) * two_pi * two_pi * 16.0 * 25.0;
  EXPECT_NEAR(base.product / literal, 1.0, 1e-12);
  const auto doubled = epr_product(Width{8.0, 0.2}, Width{5.0, 0.1}, near_optics(), far_optics(), Axis::X, CiLevel::P68);
  EXPECT_NEAR(doubled.delta_r / base.delta_r, 2.0, 1e-12);
  EXPECT_NEAR(doubled.product / base.product, 4.0, 1e-12);
  // C is unchanged when product, delta and the bound are expressed in other units
  for (double k : {1e-3, 0.5, 7.0})
    EXPECT_NEAR(confidence_level(0.1 * k, 0.02 * k, 0.25 * k), confidence_level(0.1, 0.02), 1e-12);
  EXPECT_NEAR(std::fabs(0.25 - 0.1) / 0.02, confidence_level(0.1, 0.02), 1e-12);
}

TEST(Epr, FitInputsUseSelectedCiLevel) {
  GaussFitResult n, f;
  n.converged = f.converged = true;
  n.model.sigma_x = 4.27;
  n.model.sigma_y = 3.52;
  f.model.sigma_x = 4.78;
  f.model.sigma_y = 4.90;
  n.ci68[kSigmaX] = 0.05;
  n.ci95[kSigmaX] = 0.098;
  f.ci68[kSigmaX] = 0.06;
  f.ci95[kSigmaX] = 0.1176;
  const auto r68 = epr_product(n, f, near_optics(), far_optics(), Axis::X);
  const auto r95 = epr_product(n, f, near_optics(), far_optics(), Axis::X, CiLevel::P95);
  EXPECT_NEAR(r95.delta / r68.delta, 1.96, 1e-12);
  f.converged = false;
  try {
    epr_product(n, f, near_optics(), far_optics(), Axis::X);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NonConvergedFit);
  }
}

TEST(Inseparability, ReferenceValuesAndBoundary) {
  const auto a = inseparability(0.84, 0.83);
  EXPECT_NEAR(a.value, 1.67, 1e-12);
  EXPECT_TRUE(a.entangled);
  const auto b = inseparability(0.82, 0.81);
  EXPECT_NEAR(b.value, 1.63, 1e-12);
  EXPECT_TRUE(b.entangled);
  const auto c = inseparability(1.0, 1.0);
  EXPECT_EQ(c.value, 2.0);
  EXPECT_FALSE(c.entangled);
  EXPECT_THROW(inseparability(-0.1, 1.0), Error);
}

TEST(Scaling, ClosedFormAndSlope) {
  std::vector<ConfidenceEntry> e;
  for (std::size_t n : {5u, 10u, 20u, 40u}) e.push_back({n, 3.0 * std::sqrt(double(n)), 0.0, 200 / n, 0, 0});
  const auto f = fit_scaling(e);
  EXPECT_NEAR(f.A0, 3.0, 1e-12);
  EXPECT_NEAR(f.exponent, 0.5, 1e-12);
  std::vector<ConfidenceEntry> flat{{5, 2.0, 0, 40, 0, 0}, {50, 2.0, 0, 4, 0, 0}};
  EXPECT_NEAR(fit_scaling(flat).exponent, 0.0, 1e-12);
  std::vector<ConfidenceEntry> one{{5, 2.0, 0, 40, 0, 0}};
  EXPECT_TRUE(std::isnan(fit_scaling(one).exponent));
}

class ConfidenceCurveSim : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    SimParams p;
    p.width = 200;
    p.height = 140;
    p.mean_profile = BeamProfile::gaussian(100, 70, 35);
    p.pairs_per_frame = 6e4;
    p.jitter_sigma_x = 3.0;
    p.jitter_sigma_y = 2.5;
    p.n_acquisitions = 30;
    p.seed = 3;
    near_ = new std::vector<AcquisitionSet>(simulate_acquisitions(p));
    p.mode = FieldMode::FarField;
    p.jitter_sigma_x = p.jitter_sigma_y = 3.5;
    p.seed = 4;
    far_ = new std::vector<AcquisitionSet>(simulate_acquisitions(p));
  }
  static void TearDownTestSuite() {
    delete near_;
    delete far_;
  }
  static std::vector<AcquisitionSet>* near_;
  static std::vector<AcquisitionSet>* far_;
};

std::vector<AcquisitionSet>* ConfidenceCurveSim::near_ = nullptr;
std::vector<AcquisitionSet>* ConfidenceCurveSim::far_ = nullptr;

TEST_F(ConfidenceCurveSim, GroupCountsAndLeftovers) {
  const EprPipelineConfig cfg;
  const std::vector<std::size_t> sizes{5, 7, 30};
  const auto curves = confidence_curve(*near_, *far_, sizes, cfg);
  const auto& x = curves[0].entries;
  ASSERT_EQ(x.size(), 3u);
  EXPECT_EQ(x[0].n_groups, 6u);
  EXPECT_EQ(x[0].unused, 0u);
  EXPECT_EQ(x[1].n_groups, 4u);
  EXPECT_EQ(x[1].unused, 2u);
  EXPECT_EQ(x[2].n_groups, 1u);
  EXPECT_EQ(x[2].sd_c, 0.0);
  for (const auto& e : x) EXPECT_LE(e.n_groups * e.n_images, 30u);
  const std::vector<std::size_t> too_big{31};
  EXPECT_THROW(confidence_curve(*near_, *far_, too_big, cfg), Error);
}

TEST_F(ConfidenceCurveSim, FullGroupEqualsFullDataConfidence) {
  const EprPipelineConfig cfg;
  const std::vector<std::size_t> all{30};
  const auto curves = confidence_curve(*near_, *far_, all, cfg);
  const auto near = FieldMoments::build(*near_, FieldMode::NearField, cfg.pipeline);
  const auto far = FieldMoments::build(*far_, FieldMode::FarField, cfg.pipeline);
  const auto g = epr_for_group(near, far, 0, 30, cfg);
  ASSERT_TRUE(g.ok) << g.error;
  EXPECT_DOUBLE_EQ(curves[0].entries[0].mean_c, g.x.confidence);
  EXPECT_DOUBLE_EQ(curves[1].entries[0].mean_c, g.y.confidence);
  EXPECT_TRUE(g.x.violation);
}

TEST_F(ConfidenceCurveSim, GroupOrderDoesNotChangeMeanC) {
  const EprPipelineConfig cfg;
  const std::vector<std::size_t> sizes{5};
  const auto base = confidence_curve(*near_, *far_, sizes, cfg);
  // reverse the order of the six blocks, keeping each block intact
  std::vector<AcquisitionSet> near_r, far_r;
  for (int b = 5; b >= 0; --b)
    for (int i = 0; i < 5; ++i) {
      near_r.push_back((*near_)[std::size_t(b * 5 + i)]);
      far_r.push_back((*far_)[std::size_t(b * 5 + i)]);
    }
  const auto rev = confidence_curve(near_r, far_r, sizes, cfg);
  for (int a = 0; a < 2; ++a) {
    EXPECT_NEAR(rev[a].entries[0].mean_c, base[a].entries[0].mean_c, 1e-9 * base[a].entries[0].mean_c);
    EXPECT_NEAR(rev[a].entries[0].sd_c, base[a].entries[0].sd_c, 1e-9 * base[a].entries[0].sd_c);
  }
}
