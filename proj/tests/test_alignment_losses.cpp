#include "cmemd/alignment_losses.hpp"
#include "cmemd/errors.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

namespace cmemd {
namespace {

Matrix rows_of(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

Matrix gaussian(Eigen::Index n, Eigen::Index d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Matrix m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x,
                        double h = 1e-5) {
  Matrix g(x.rows(), x.cols());
  Matrix probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = probe.data()[i];
    probe.data()[i] = keep + h;
    const double up = f(probe);
    probe.data()[i] = keep - h;
    const double down = f(probe);
    probe.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

double max_relative_error(const Matrix& analytic, const Matrix& numeric) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i], n = numeric.data()[i];
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-5}));
  }
  return worst;
}

// C classes with `per` visible then `per` thermal samples each.
LabeledBatch random_batch(int classes, int per, Eigen::Index dim, std::mt19937_64& rng) {
  LabeledBatch b;
  b.features = gaussian(classes * per * 2, dim, rng);
  for (int c = 0; c < classes; ++c) {
    for (int m = 0; m < 2; ++m) {
      for (int k = 0; k < per; ++k) {
        b.identity.push_back(c);
        b.modality.push_back(m == 0 ? Modality::kVisible : Modality::kThermal);
      }
    }
  }
  return b;
}

double brute_force_cm_dl(const LabeledBatch& b) {
  const Eigen::Index d = b.features.cols();
  Vector mu_v = Vector::Zero(d), mu_t = Vector::Zero(d);
  int nv = 0, nt = 0, classes = 0;
  for (Eigen::Index i = 0; i < b.size(); ++i) {
    classes = std::max(classes, b.identity[i] + 1);
    if (b.modality[i] == Modality::kVisible) {
      mu_v += b.features.row(i).transpose();
      ++nv;
    } else {
      mu_t += b.features.row(i).transpose();
      ++nt;
    }
  }
  mu_v /= nv;
  mu_t /= nt;
  double intra = 0, inter = 0;
  for (int c = 0; c < classes; ++c) {
    Vector cv = Vector::Zero(d), ct = Vector::Zero(d);
    int ncv = 0, nct = 0;
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      if (b.identity[i] != c) continue;
      if (b.modality[i] == Modality::kVisible) {
        cv += b.features.row(i).transpose();
        ++ncv;
      } else {
        ct += b.features.row(i).transpose();
        ++nct;
      }
    }
    cv /= ncv;
    ct /= nct;
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      if (b.identity[i] != c) continue;
      const Vector f = b.features.row(i).transpose();
      intra += (b.modality[i] == Modality::kThermal ? (f - cv) : (f - ct)).squaredNorm();
    }
    inter += ncv * (cv - mu_t).squaredNorm() + nct * (ct - mu_v).squaredNorm();
  }
  return intra / inter;
}

TEST(ModalityTags, RoundTrip) {
  EXPECT_EQ(parse_modality_tag("v"), Modality::kVisible);
  EXPECT_EQ(parse_modality_tag("t"), Modality::kThermal);
  EXPECT_EQ(modality_tag(Modality::kThermal), 't');
  EXPECT_THROW(parse_modality_tag("x"), InvalidArgument);
  EXPECT_EQ(parse_weight_mode("cosine_similarity"), WeightMode::kCosineSimilarity);
  EXPECT_EQ(to_string(WeightMode::kUniform), "uniform");
  EXPECT_THROW(parse_weight_mode("kl"), InvalidArgument);
}

TEST(CmEmd, CoincidentPointIsZero) {
  const Matrix p = rows_of({{1.5, -2.0}});
  const EmdLoss l = cm_emd_loss(p, p);
  EXPECT_EQ(l.value, 0.0);
  EXPECT_TRUE(l.grad_visible.isZero(0.0));
  EXPECT_TRUE(l.grad_thermal.isZero(0.0));
}

TEST(CmEmd, SinglePairEveryMode) {
  for (WeightMode mode :
       {WeightMode::kOptimalTransport, WeightMode::kCosineSimilarity, WeightMode::kUniform}) {
    EmdOptions opts;
    opts.weight_mode = mode;
    const EmdLoss l = cm_emd_loss(rows_of({{0, 0}}), rows_of({{3, 4}}), opts);
    EXPECT_NEAR(l.value, 5.0, 1e-12);
    EXPECT_NEAR(l.grad_visible(0, 0), -0.6, 1e-12);
    EXPECT_NEAR(l.grad_visible(0, 1), -0.8, 1e-12);
    EXPECT_NEAR(l.grad_thermal(0, 0), 0.6, 1e-12);
    EXPECT_NEAR(l.grad_thermal(0, 1), 0.8, 1e-12);
  }
}

TEST(CmEmd, TransportDiscountsHighVariationPairs) {
  // Pairwise distances [[0,10],[10,0]].
  const Matrix fv = rows_of({{0}, {10}});
  const Matrix ft = rows_of({{0}, {10}});
  EmdOptions ot;
  ot.sinkhorn.epsilon = 0.01;
  EmdOptions uniform;
  uniform.weight_mode = WeightMode::kUniform;
  EXPECT_LT(cm_emd_loss(fv, ft, ot).value, 1e-5);
  EXPECT_NEAR(cm_emd_loss(fv, ft, uniform).value, 5.0, 1e-12);
}

TEST(CmEmd, Errors) {
  EXPECT_THROW(cm_emd_loss(Matrix(0, 2), rows_of({{1, 2}})), InvalidArgument);
  EXPECT_THROW(cm_emd_loss(rows_of({{1, 2}}), rows_of({{1, 2, 3}})), InvalidArgument);
  const Matrix wrong = Matrix::Constant(2, 2, 0.25);
  EmdOptions opts;
  opts.frozen_weights = &wrong;
  EXPECT_THROW(cm_emd_loss(rows_of({{1, 2}}), rows_of({{1, 2}}), opts), InvalidArgument);
}

TEST(CmEmd, UniformIsMeanPairwiseDistance) {
  std::mt19937_64 rng(4);
  EmdOptions opts;
  opts.weight_mode = WeightMode::kUniform;
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix fv = gaussian(5, 3, rng), ft = gaussian(7, 3, rng);
    double mean = 0;
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 7; ++j) mean += (fv.row(i) - ft.row(j)).norm();
    }
    EXPECT_NEAR(cm_emd_loss(fv, ft, opts).value, mean / 35.0, 1e-9);
  }
}

TEST(CmEmd, CosineWeightsFollowDefinition) {
  std::mt19937_64 rng(6);
  const Matrix fv = gaussian(3, 4, rng), ft = gaussian(4, 4, rng);
  EmdOptions opts;
  opts.weight_mode = WeightMode::kCosineSimilarity;
  const EmdLoss l = cm_emd_loss(fv, ft, opts);
  Matrix expected(3, 4);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j) {
      expected(i, j) = (1.0 + fv.row(i).dot(ft.row(j)) / (fv.row(i).norm() * ft.row(j).norm())) / 2.0;
    }
  }
  expected /= expected.sum();
  EXPECT_TRUE(l.weights.isApprox(expected, 1e-12));
}

TEST(CmEmd, SymmetricUnderModalitySwap) {
  std::mt19937_64 rng(8);
  for (WeightMode mode :
       {WeightMode::kOptimalTransport, WeightMode::kCosineSimilarity, WeightMode::kUniform}) {
    const Matrix fv = gaussian(4, 3, rng), ft = gaussian(6, 3, rng);
    EmdOptions opts;
    opts.weight_mode = mode;
    const EmdLoss forward = cm_emd_loss(fv, ft, opts);
    const Matrix transposed = forward.weights.transpose();
    opts.frozen_weights = &transposed;
    const EmdLoss swapped = cm_emd_loss(ft, fv, opts);
    EXPECT_NEAR(forward.value, swapped.value, 1e-9);
    // Re-solving from scratch agrees once both solves are tight.
    opts.frozen_weights = nullptr;
    opts.sinkhorn.tolerance = 1e-13;
    opts.sinkhorn.max_iterations = 1000000;
    const double tight = cm_emd_loss(fv, ft, opts).value;
    EXPECT_NEAR(tight, cm_emd_loss(ft, fv, opts).value, 1e-9);
  }
}

TEST(CmEmd, FrozenPlanGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix fv = gaussian(4, 3, rng), ft = gaussian(5, 3, rng);
    EmdOptions opts;
    opts.sinkhorn.tolerance = 1e-9;
    opts.sinkhorn.max_iterations = 100000;
    const EmdLoss l = cm_emd_loss(fv, ft, opts);
    ASSERT_TRUE(l.converged);
    const Matrix w = l.weights;
    auto frozen_value = [&](const Matrix& a, const Matrix& b) {
      double s = 0;
      for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < b.rows(); ++j) s += w(i, j) * (a.row(i) - b.row(j)).norm();
      }
      return s;
    };
    EXPECT_NEAR(l.value, frozen_value(fv, ft), 1e-12);
    EXPECT_LE(max_relative_error(l.grad_visible,
                                 numeric_gradient([&](const Matrix& x) { return frozen_value(x, ft); }, fv)),
              1e-4);
    EXPECT_LE(max_relative_error(l.grad_thermal,
                                 numeric_gradient([&](const Matrix& x) { return frozen_value(fv, x); }, ft)),
              1e-4);
  }
}

TEST(CmEmd, CoincidentPairContributesZeroGradient) {
  const Matrix fv = rows_of({{1, 1}, {0, 0}});
  const Matrix ft = rows_of({{1, 1}});
  EmdOptions opts;
  opts.weight_mode = WeightMode::kUniform;
  const EmdLoss l = cm_emd_loss(fv, ft, opts);
  EXPECT_EQ(l.grad_visible(0, 0), 0.0);
  EXPECT_EQ(l.grad_visible(0, 1), 0.0);
  EXPECT_TRUE(l.grad_visible.allFinite());
  EXPECT_TRUE(l.grad_thermal.allFinite());
}

TEST(Means, Examples) {
  LabeledBatch b;
  b.features = rows_of({{0, 0}, {2, 2}, {5, 1}});
  b.identity = {0, 0, 0};
  b.modality = {Modality::kVisible, Modality::kVisible, Modality::kThermal};
  const ModalityMeans m = modality_means(b);
  EXPECT_EQ(m.visible, Vector::Constant(2, 1.0));
  EXPECT_EQ(m.thermal, b.features.row(2).transpose());

  const auto classes = class_modality_means(b);
  ASSERT_EQ(classes.size(), 1u);
  EXPECT_EQ(classes[0].visible, m.visible);
  EXPECT_EQ(classes[0].thermal, m.thermal);

  b.features = rows_of({{0, 0}, {0, 2}, {5, 1}});
  EXPECT_EQ(class_modality_means(b)[0].visible, (Vector(2) << 0, 1).finished());

  b.modality = {Modality::kVisible, Modality::kVisible, Modality::kVisible};
  EXPECT_THROW(modality_means(b), InvalidArgument);
}

TEST(Means, MatchLoopOracle) {
  std::mt19937_64 rng(12);
  const LabeledBatch b = random_batch(3, 2, 4, rng);
  const auto classes = class_modality_means(b);
  ASSERT_EQ(classes.size(), 3u);
  for (const ClassMeans& cm : classes) {
    Vector v = Vector::Zero(4), t = Vector::Zero(4);
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      if (b.identity[i] != cm.identity) continue;
      for (int d = 0; d < 4; ++d) {
        (b.modality[i] == Modality::kVisible ? v : t)[d] += b.features(i, d);
      }
    }
    EXPECT_LE((cm.visible - v / 2).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((cm.thermal - t / 2).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(cm.visible_count, 2);
    EXPECT_EQ(cm.thermal_count, 2);
  }
  const LabeledBatch one = random_batch(1, 4, 3, rng);
  Vector v = Vector::Zero(3);
  for (int i = 0; i < 4; ++i) v += one.features.row(i).transpose();
  EXPECT_LE((modality_means(one).visible - v / 4).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Means, ClassMissingFromOneModality) {
  LabeledBatch b;
  b.features = rows_of({{0}, {1}, {2}});
  b.identity = {0, 1, 0};
  b.modality = {Modality::kVisible, Modality::kVisible, Modality::kThermal};
  EXPECT_THROW(class_modality_means(b), InvalidArgument);
}

TEST(LabeledBatch, Validation) {
  LabeledBatch b;
  b.features = rows_of({{0}, {1}});
  b.identity = {0};
  b.modality = {Modality::kVisible, Modality::kThermal};
  EXPECT_THROW(b.validate(), InvalidArgument);
  b.identity = {0, -1};
  EXPECT_THROW(b.validate(), InvalidArgument);
}

TEST(CmDl, PerfectAlignmentIsZero) {
  LabeledBatch b;
  b.features = rows_of({{0, 0}, {0, 0}, {4, 1}, {4, 1}});
  b.identity = {0, 0, 1, 1};
  b.modality = {Modality::kVisible, Modality::kThermal, Modality::kVisible, Modality::kThermal};
  EXPECT_EQ(cm_dl_loss(b).value, 0.0);

  b.features = rows_of({{-1}, {-1}, {1}, {1}});
  const LossValue l = cm_dl_loss(b);
  EXPECT_EQ(l.value, 0.0);
  EXPECT_TRUE(l.gradient.isZero(0.0));
}

TEST(CmDl, Errors) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(cm_dl_loss(random_batch(1, 2, 3, rng)), InvalidArgument);
  LabeledBatch collapsed = random_batch(2, 1, 3, rng);
  collapsed.features.setConstant(2.0);
  EXPECT_THROW(cm_dl_loss(collapsed), DegenerateBatch);
}

TEST(CmDl, MatchesBruteForceAndFiniteDifferences) {
  std::mt19937_64 rng(20);
  for (int trial = 0; trial < 10; ++trial) {
    const LabeledBatch b = random_batch(3, 2, 4, rng);
    const LossValue l = cm_dl_loss(b);
    EXPECT_NEAR(l.value, brute_force_cm_dl(b), 1e-12 * std::max(1.0, l.value));
    auto f = [&](const Matrix& x) {
      LabeledBatch p = b;
      p.features = x;
      return brute_force_cm_dl(p);
    };
    EXPECT_LE(max_relative_error(l.gradient, numeric_gradient(f, b.features)), 1e-5);
  }
}

TEST(CmDl, UnequalClassCountsMatchBruteForce) {
  std::mt19937_64 rng(21);
  LabeledBatch b;
  b.features = gaussian(9, 3, rng);
  b.identity = {0, 0, 0, 0, 1, 1, 1, 2, 2};
  b.modality = {Modality::kVisible, Modality::kThermal, Modality::kThermal, Modality::kThermal,
                Modality::kVisible, Modality::kVisible, Modality::kThermal, Modality::kThermal,
                Modality::kVisible};
  const LossValue l = cm_dl_loss(b);
  EXPECT_NEAR(l.value, brute_force_cm_dl(b), 1e-12);
  auto f = [&](const Matrix& x) {
    LabeledBatch p = b;
    p.features = x;
    return brute_force_cm_dl(p);
  };
  EXPECT_LE(max_relative_error(l.gradient, numeric_gradient(f, b.features)), 1e-5);
}

TEST(CmDl, TranslationAndScaleInvariant) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    const LabeledBatch b = random_batch(3, 2, 5, rng);
    const double base = cm_dl_loss(b).value;
    EXPECT_GE(base, 0.0);
    LabeledBatch shifted = b;
    const Vector shift = gaussian(1, 5, rng, 10.0).row(0).transpose();
    shifted.features.rowwise() += shift.transpose();
    EXPECT_NEAR(cm_dl_loss(shifted).value, base, 1e-9);
    LabeledBatch scaled = b;
    scaled.features *= 7.5;
    EXPECT_NEAR(cm_dl_loss(scaled).value, base, 1e-9);
  }
}

TEST(CmDl, VariancesMatchOracleTerms) {
  std::mt19937_64 rng(23);
  const LabeledBatch b = random_batch(2, 3, 2, rng);
  const VarianceRatio v = cross_modality_variances(b);
  EXPECT_NEAR(v.intra / v.inter, brute_force_cm_dl(b), 1e-12);
}

TEST(IdentityLoss, Examples) {
  EXPECT_NEAR(identity_loss(Matrix::Zero(3, 4), {0, 1, 3}).value, std::log(4.0), 1e-15);
  EXPECT_NEAR(identity_loss(rows_of({{1, 0}}), {0}).value, std::log1p(std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(identity_loss(rows_of({{1, 0}}), {0}).value, 0.3133, 5e-5);
  double previous = 1.0;
  for (double margin : {1.0, 5.0, 20.0, 50.0}) {
    const double v = identity_loss(rows_of({{margin, 0, 0}}), {0}).value;
    EXPECT_LT(v, previous);
    previous = v;
  }
  EXPECT_LT(previous, 1e-20);
  EXPECT_THROW(identity_loss(rows_of({{1, 0}}), {2}), InvalidArgument);
  EXPECT_THROW(identity_loss(rows_of({{1, 0}}), {-1}), InvalidArgument);
  EXPECT_THROW(identity_loss(rows_of({{1, 0}}), {0, 1}), InvalidArgument);
}

TEST(IdentityLoss, GradientRowsSumToZeroAndMatchFiniteDifferences) {
  std::mt19937_64 rng(30);
  const Matrix logits = gaussian(6, 5, rng, 3.0);
  const std::vector<int> labels = {0, 4, 2, 2, 1, 3};
  const LossValue l = identity_loss(logits, labels);
  EXPECT_LE(l.gradient.rowwise().sum().cwiseAbs().maxCoeff(), 1e-9);
  auto f = [&](const Matrix& x) { return identity_loss(x, labels).value; };
  EXPECT_LE(max_relative_error(l.gradient, numeric_gradient(f, logits)), 1e-5);
}

TEST(KlBaseline, Examples) {
  std::mt19937_64 rng(40);
  const Matrix x = gaussian(6, 3, rng);
  EXPECT_NEAR(kl_alignment_baseline(x, x).value, 0.0, 1e-12);

  // Unit per-dimension variance (population) and means offset by delta.
  const Matrix base = rows_of({{-1, 1}, {1, -1}});
  Matrix shifted = base;
  shifted.col(0).array() += 0.5;
  shifted.col(1).array() -= 2.0;
  const double var = 1.0 + kKlVarianceSmoothing;
  EXPECT_NEAR(kl_alignment_baseline(base, shifted).value, (0.25 + 4.0) / (2.0 * var), 1e-12);

  for (int trial = 0; trial < 20; ++trial) {
    EXPECT_GE(kl_alignment_baseline(gaussian(5, 4, rng), gaussian(7, 4, rng, 2.0)).value, 0.0);
  }
  EXPECT_TRUE(std::isfinite(kl_alignment_baseline(Matrix::Ones(3, 2), Matrix::Zero(3, 2)).value));
}

TEST(KlBaseline, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(41);
  const Matrix fv = gaussian(5, 3, rng), ft = gaussian(4, 3, rng, 1.5);
  const PairLoss l = kl_alignment_baseline(fv, ft);
  EXPECT_LE(max_relative_error(
                l.grad_visible,
                numeric_gradient([&](const Matrix& x) { return kl_alignment_baseline(x, ft).value; }, fv)),
            1e-5);
  EXPECT_LE(max_relative_error(
                l.grad_thermal,
                numeric_gradient([&](const Matrix& x) { return kl_alignment_baseline(fv, x).value; }, ft)),
            1e-5);
}

TEST(CenterLoss, ZeroAtCentersAndFiniteDifferences) {
  CenterState centers;
  const Matrix f = rows_of({{1, 2}, {1, 2}, {-3, 0}});
  const std::vector<int> labels = {0, 0, 1};
  EXPECT_EQ(center_loss(f, labels, centers).value, 0.0);

  std::mt19937_64 rng(50);
  const Matrix x = gaussian(4, 3, rng);
  const std::vector<int> lab = {0, 1, 0, 1};
  CenterState fixed;
  fixed.set(0, Vector::Zero(3));
  fixed.set(1, Vector::Ones(3));
  const LossValue l = center_loss(x, lab, fixed);
  double oracle = 0;
  for (int i = 0; i < 4; ++i) oracle += (x.row(i).transpose() - fixed.center(lab[i])).squaredNorm();
  EXPECT_NEAR(l.value, oracle / 4, 1e-12);
  auto fn = [&](const Matrix& m) { return center_loss(m, lab, fixed).value; };
  EXPECT_LE(max_relative_error(l.gradient, numeric_gradient(fn, x)), 1e-5);
}

TEST(CenterLoss, UpdateMovesTowardBatchMean) {
  CenterState centers(0.5);
  centers.set(0, Vector::Zero(1));
  centers.update(rows_of({{2}, {4}}), {0, 0});
  EXPECT_NEAR(centers.center(0)[0], 1.5, 1e-15);
  centers.update(rows_of({{7}}), {3});
  EXPECT_EQ(centers.center(3)[0], 7.0);
}

TEST(TripletLoss, HingeExamples) {
  // Anchor 0: positive at 1, negative at 3. Anchor 1: positive at 1, negative at 2.
  EXPECT_NEAR(batch_hard_triplet_loss(rows_of({{0}, {1}, {3}}), {0, 0, 1}, 0.3).value, 0.0, 1e-15);

  // Anchor 0: positive at 3, negative at 1 -> 2.3. Anchor 1: positive at 3,
  // negative at 2 -> 1.3. The negative has no positive and is skipped.
  const LossValue l = batch_hard_triplet_loss(rows_of({{0}, {3}, {1}}), {0, 0, 1}, 0.3);
  EXPECT_NEAR(l.value, (2.3 + 1.3) / 2.0, 1e-12);
  EXPECT_FALSE(l.empty);
}

TEST(TripletLoss, NoValidAnchorFlagsEmpty) {
  const LossValue l = batch_hard_triplet_loss(rows_of({{0}, {1}}), {0, 1}, 0.3);
  EXPECT_EQ(l.value, 0.0);
  EXPECT_TRUE(l.empty);
  EXPECT_TRUE(l.gradient.isZero(0.0));
}

TEST(TripletLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(60);
  const Matrix x = gaussian(6, 3, rng);
  const std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  const LossValue l = batch_hard_triplet_loss(x, labels, 5.0);
  auto fn = [&](const Matrix& m) { return batch_hard_triplet_loss(m, labels, 5.0).value; };
  EXPECT_LE(max_relative_error(l.gradient, numeric_gradient(fn, x)), 1e-5);
}

TEST(MetricBaseline, Dispatch) {
  std::mt19937_64 rng(70);
  const LabeledBatch b = random_batch(2, 2, 3, rng);
  EXPECT_THROW(metric_baseline(b, MetricBaseline::kCenter, 0.3, nullptr), InvalidState);
  CenterState centers;
  EXPECT_TRUE(std::isfinite(metric_baseline(b, MetricBaseline::kCenter, 0.3, &centers).value));
  EXPECT_NEAR(metric_baseline(b, MetricBaseline::kTriplet, 0.3, nullptr).value,
              batch_hard_triplet_loss(b.features, b.identity, 0.3).value, 1e-15);
}

}  // namespace
}  // namespace cmemd
