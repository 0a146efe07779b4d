#include <gtest/gtest.h>

#include <cmath>

#include "phantom.hpp"
#include "progkit/localizer.hpp"

using namespace progkit;

namespace {

AxialProfile step_profile(std::size_t n, std::size_t at, double hi, double lo, double sp = 1.0) {
  std::vector<double> v(n);
  for (std::size_t k = 0; k < n; ++k) v[k] = k < at ? hi : lo;
  return AxialProfile(v, sp, 0.0);
}

}  // namespace

TEST(AxialProfile, ConstantVolume) {
  Volume v({6, 5, 4}, {2, 1, 1}, {10, 0, 0}, Modality::PET, 3.0f);
  const AxialProfile p = axial_profile(v);
  ASSERT_EQ(p.size(), 6u);
  for (double x : p.values) EXPECT_DOUBLE_EQ(x, 3.0);
  EXPECT_DOUBLE_EQ(p.z_of(2), 14.0);
}

TEST(AxialProfile, SingleBrightSlice) {
  Volume v({5, 4, 4}, {1, 1, 1}, {0, 0, 0}, Modality::PET, 0.0f);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) v.at(3, y, x) = 2.0f;
  const AxialProfile p = axial_profile(v);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_DOUBLE_EQ(p.values[k], k == 3 ? 2.0 : 0.0);
}

TEST(AxialProfile, GaussianBlobPeaksAtItsCentre) {
  Volume v({41, 21, 21}, {1, 1, 1}, {0, 0, 0}, Modality::PET, 0.0f);
  for (std::size_t z = 0; z < 41; ++z)
    for (std::size_t y = 0; y < 21; ++y)
      for (std::size_t x = 0; x < 21; ++x) {
        const double r2 = std::pow(z - 17.0, 2) + std::pow(y - 10.0, 2) + std::pow(x - 10.0, 2);
        v.at(z, y, x) = static_cast<float>(std::exp(-r2 / 18.0));
      }
  const AxialProfile p = axial_profile(v);
  std::size_t arg = 0;
  for (std::size_t k = 1; k < p.size(); ++k)
    if (p.values[k] > p.values[arg]) arg = k;
  EXPECT_EQ(arg, 17u);
  EXPECT_NEAR(p.values[10], p.values[24], 1e-6);
}

TEST(HeadTop, FirstSliceAboveThreshold) {
  std::vector<double> v(40, 0.0);
  for (std::size_t k = 10; k < 40; ++k) v[k] = 1.0 + static_cast<double>(k);
  EXPECT_DOUBLE_EQ(find_head_top(AxialProfile(v, 2.0, 0.0)), 20.0);
}

TEST(HeadTop, PositiveEverywhereReturnsFirstSlice) {
  EXPECT_DOUBLE_EQ(find_head_top(AxialProfile(std::vector<double>(10, 0.5), 3.0, -7.0)), -7.0);
}

TEST(HeadTop, Errors) {
  EXPECT_THROW(find_head_top(AxialProfile(std::vector<double>(10, 0.0), 1.0, 0.0)), DetectionError);
  EXPECT_THROW(find_head_top(AxialProfile(std::vector<double>(10, 1.0), 1.0, 0.0), 0.0), ArgumentError);
  EXPECT_THROW(find_head_top(AxialProfile(std::vector<double>(10, 1.0), 1.0, 0.0), 1.0), ArgumentError);
}

TEST(BrainPeak, BladderOutsideWindowIsIgnored) {
  std::vector<double> v(800, 1.0);
  v[80] = 5.0;
  v[600] = 50.0;
  EXPECT_DOUBLE_EQ(find_brain_peak(AxialProfile(v, 1.0, 0.0), 0.0), 80.0);
}

TEST(BrainPeak, WindowIsInclusiveOf250) {
  std::vector<double> v(400, 1.0);
  v[250] = 9.0;
  v[251] = 20.0;
  EXPECT_DOUBLE_EQ(find_brain_peak(AxialProfile(v, 1.0, 0.0), 0.0), 250.0);
}

TEST(BrainPeak, PlateauResolvesSuperior) {
  std::vector<double> v(100, 1.0);
  for (std::size_t k = 30; k < 40; ++k) v[k] = 4.0;
  EXPECT_DOUBLE_EQ(find_brain_peak(AxialProfile(v, 2.0, 0.0), 10.0), 60.0);
}

TEST(BrainPeak, HeadTopOutsideProfile) {
  EXPECT_THROW(find_brain_peak(AxialProfile(std::vector<double>(10, 1.0), 1.0, 0.0), 50.0), DetectionError);
}

TEST(NeckDrop, StepIsLocatedAtTheEdge) {
  EXPECT_DOUBLE_EQ(find_neck_drop(step_profile(400, 150, 100.0, 20.0), 50.0), 150.0);
}

TEST(NeckDrop, CoarseStep) {
  EXPECT_DOUBLE_EQ(find_neck_drop(step_profile(60, 20, 100.0, 20.0, 7.0), 35.0), 140.0);
}

TEST(NeckDrop, StrongestOfSeveralFalls) {
  std::vector<double> v(300, 100.0);
  for (std::size_t k = 100; k < 300; ++k) v[k] = 90.0;
  for (std::size_t k = 200; k < 300; ++k) v[k] = 10.0;
  EXPECT_DOUBLE_EQ(find_neck_drop(AxialProfile(v, 1.0, 0.0), 0.0), 200.0);
}

TEST(NeckDrop, MonotoneIncreasingProfile) {
  std::vector<double> v(200);
  for (std::size_t k = 0; k < 200; ++k) v[k] = static_cast<double>(k);
  const AxialProfile p(v, 1.0, 0.0);
  EXPECT_THROW(find_neck_drop(p, 10.0), DetectionError);
  EXPECT_DOUBLE_EQ(find_neck_drop(p, 10.0, 100.0, true), 110.0);
  EXPECT_THROW(find_neck_drop(p, 10.0, 0.0), ArgumentError);
}

TEST(RoiBox, StartsAtHeadTop) {
  Volume pet({100, 20, 20}, {5, 5, 5}, {0, 0, 0}, Modality::PET, 1.0f);
  const BoxMM b = roi_box({0.0, 80.0, 200.0}, pet);
  EXPECT_DOUBLE_EQ(b.min_corner_mm[0], 0.0);
  EXPECT_DOUBLE_EQ(b.size_mm[0], 440.0);
  EXPECT_DOUBLE_EQ(b.min_corner_mm[0] + b.size_mm[0], 440.0);
  EXPECT_NEAR(b.min_corner_mm[1] + 220.0, 47.5, 1e-9);
  EXPECT_NEAR(b.min_corner_mm[2] + 220.0, 47.5, 1e-9);
}

TEST(RoiBox, RejectsInconsistentLandmarks) {
  Volume pet({10, 4, 4}, {5, 5, 5}, {0, 0, 0}, Modality::PET, 1.0f);
  EXPECT_THROW(roi_box({50.0, 20.0, 80.0}, pet), ArgumentError);
  EXPECT_THROW(roi_box({0.0, 300.0, 320.0}, pet), ArgumentError);
}

TEST(Localize, PhantomLandmarks) {
  for (double top : {30.0, 42.0, 57.5, 88.0}) {
    phantom::Body body;
    body.head_top_mm = top;
    const auto pair = phantom::make(body);
    const Localization loc = localize(pair.ct, pair.pet);
    SCOPED_TRACE(top);
    EXPECT_NEAR(loc.landmarks.head_top_mm, top, 7.0);
    EXPECT_NEAR(loc.box.min_corner_mm[0], top, 7.0);
    EXPECT_NEAR(loc.box.min_corner_mm[0] + loc.box.size_mm[0], top + 440.0, 7.0);
    EXPECT_NEAR(loc.landmarks.brain_peak_mm, body.brain_z(), 14.0);
    EXPECT_LT(loc.landmarks.brain_peak_mm, body.brain_z() + 250.0);
    EXPECT_NEAR(loc.landmarks.neck_drop_mm, body.neck_top(), 14.0);
    EXPECT_TRUE(valid(loc.landmarks));
  }
}

TEST(Localize, PetScalingInvariance) {
  phantom::Body body;
  const Localization a = localize(phantom::make(body).ct, phantom::make(body).pet);
  body.pet_scale = 3.7;
  const Localization b = localize(phantom::make(body).ct, phantom::make(body).pet);
  EXPECT_DOUBLE_EQ(a.landmarks.head_top_mm, b.landmarks.head_top_mm);
  EXPECT_DOUBLE_EQ(a.landmarks.brain_peak_mm, b.landmarks.brain_peak_mm);
}

TEST(Localize, CtOffsetInvariance) {
  phantom::Body body;
  const Localization a = localize(phantom::make(body).ct, phantom::make(body).pet);
  body.ct_shift = 60.0;
  const Localization b = localize(phantom::make(body).ct, phantom::make(body).pet);
  EXPECT_DOUBLE_EQ(a.landmarks.neck_drop_mm, b.landmarks.neck_drop_mm);
}

TEST(Localize, DistractorDoesNotMoveBrain) {
  phantom::Body body;
  body.bladder = false;
  const Localization a = localize(phantom::make(body).ct, phantom::make(body).pet);
  body.bladder = true;
  body.bladder_uptake = 40.0;
  const Localization b = localize(phantom::make(body).ct, phantom::make(body).pet);
  EXPECT_DOUBLE_EQ(a.landmarks.brain_peak_mm, b.landmarks.brain_peak_mm);
}

TEST(Localize, GridMismatch) {
  Volume ct({10, 4, 4}, {5, 5, 5}, {0, 0, 0}, Modality::CT, 0.0f);
  Volume pet({10, 4, 4}, {5, 5, 4}, {0, 0, 0}, Modality::PET, 0.0f);
  EXPECT_THROW(localize(ct, pet), ArgumentError);
}
