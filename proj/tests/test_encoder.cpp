#include "cmemd/encoder_toy.hpp"
#include "cmemd/errors.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

namespace cmemd {
namespace {

namespace fs = std::filesystem;

EncoderShape small_shape() {
  EncoderShape s;
  s.input_dim = 5;
  s.shallow_width = 6;
  s.trunk_width = 7;
  s.map_height = 2;
  s.map_width = 1;
  s.map_channels = 3;
  return s;
}

Matrix gaussian(Eigen::Index n, Eigen::Index d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Matrix m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// Every bias gets a random value so no activation sits exactly at the kink.
EncoderParams randomized(const EncoderShape& shape, std::uint64_t seed) {
  EncoderParams p = EncoderParams::init(shape, seed);
  std::mt19937_64 rng(seed + 100);
  for (AffineLayer* l : {&p.shallow_visible, &p.shallow_thermal, &p.trunk, &p.global_stream, &p.local_stream}) {
    l->bias = gaussian(l->bias.size(), 1, rng, 0.3).col(0);
  }
  return p;
}

std::vector<Modality> alternating(Eigen::Index n) {
  std::vector<Modality> m;
  for (Eigen::Index i = 0; i < n; ++i) m.push_back(i % 2 ? Modality::kThermal : Modality::kVisible);
  return m;
}

// Naive per-neuron loop forward.
std::pair<Matrix, Matrix> loop_forward(const EncoderParams& p, const Matrix& x, const std::vector<Modality>& tags) {
  auto layer = [](const AffineLayer& l, const Vector& in, bool relu) {
    Vector out(l.weight.rows());
    for (Eigen::Index o = 0; o < l.weight.rows(); ++o) {
      double s = l.bias[o];
      for (Eigen::Index i = 0; i < l.weight.cols(); ++i) s += l.weight(o, i) * in[i];
      out[o] = relu ? std::max(0.0, s) : s;
    }
    return out;
  };
  Matrix g(x.rows(), p.shape.map_size()), l(x.rows(), p.shape.map_size());
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    const AffineLayer& shallow = tags[n] == Modality::kVisible ? p.shallow_visible : p.shallow_thermal;
    const Vector h = layer(p.trunk, layer(shallow, x.row(n).transpose(), true), true);
    g.row(n) = layer(p.global_stream, h, true).transpose();
    l.row(n) = layer(p.local_stream, h, true).transpose();
  }
  return {g, l};
}

TEST(EncoderShape, Validation) {
  EncoderShape s;
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.map_size(), 96);
  s.map_height = 0;
  EXPECT_THROW(s.validate(), InvalidArgument);
}

TEST(Encoder, ZeroParametersGiveZeroMaps) {
  EncoderParams p = EncoderParams::init(small_shape(), 1);
  for (const ParamRef& r : p.params()) Eigen::Map<Matrix>(r.value, r.rows, r.cols).setZero();
  std::mt19937_64 rng(1);
  const EncoderOutput out = encoder_forward(p, gaussian(4, 5, rng), alternating(4));
  EXPECT_TRUE(out.global_map.data.isZero(0.0));
  EXPECT_TRUE(out.local_map.data.isZero(0.0));
  EXPECT_EQ(out.local_map.height, 2);
  EXPECT_EQ(out.local_map.channels, 3);
}

TEST(Encoder, IdenticalInputsGiveIdenticalMaps) {
  const EncoderParams p = randomized(small_shape(), 2);
  std::mt19937_64 rng(2);
  Matrix x(2, 5);
  x.row(0) = gaussian(1, 5, rng);
  x.row(1) = x.row(0);
  const EncoderOutput out = encoder_forward(p, x, {Modality::kThermal, Modality::kThermal});
  EXPECT_EQ(out.global_map.data.row(0), out.global_map.data.row(1));
  EXPECT_EQ(out.local_map.data.row(0), out.local_map.data.row(1));
}

TEST(Encoder, MatchesLoopOracle) {
  const EncoderParams p = randomized(EncoderShape{}, 3);
  std::mt19937_64 rng(3);
  const Matrix x = gaussian(6, 16, rng);
  const auto tags = alternating(6);
  const EncoderOutput out = encoder_forward(p, x, tags);
  const auto [g, l] = loop_forward(p, x, tags);
  EXPECT_LE((out.global_map.data - g).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((out.local_map.data - l).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Encoder, SampleOverloadAndErrors) {
  const EncoderParams p = randomized(small_shape(), 4);
  std::vector<ToySample> samples(2);
  samples[0].input = Vector::Ones(5);
  samples[1].input = Vector::Ones(5);
  samples[1].modality = Modality::kThermal;
  const EncoderOutput a = encoder_forward(p, samples);
  const EncoderOutput b = encoder_forward(p, Matrix::Ones(2, 5), {Modality::kVisible, Modality::kThermal});
  EXPECT_EQ(a.global_map.data, b.global_map.data);
  samples[1].input = Vector::Ones(4);
  EXPECT_THROW(encoder_forward(p, samples), InvalidArgument);
  EXPECT_THROW(encoder_forward(p, Matrix::Ones(2, 4), alternating(2)), InvalidArgument);
  EXPECT_THROW(encoder_forward(p, Matrix::Ones(2, 5), alternating(3)), InvalidArgument);
}

TEST(Encoder, ModalityIsolation) {
  EncoderParams p = randomized(small_shape(), 5);
  std::mt19937_64 rng(5);
  const Matrix x = gaussian(6, 5, rng);
  const auto tags = alternating(6);
  const EncoderOutput before = encoder_forward(p, x, tags);
  p.shallow_thermal.weight.array() += 0.7;
  p.shallow_thermal.bias.array() -= 0.2;
  const EncoderOutput after = encoder_forward(p, x, tags);
  for (Eigen::Index n = 0; n < 6; n += 2) {
    EXPECT_EQ(before.global_map.data.row(n), after.global_map.data.row(n));
    EXPECT_EQ(before.local_map.data.row(n), after.local_map.data.row(n));
  }
  EXPECT_NE(before.global_map.data.row(1), after.global_map.data.row(1));

  // Shallow gradients accumulate only from their own modality.
  SpatialBatch up(6, 2, 1, 3);
  up.data = gaussian(6, 6, rng);
  std::vector<Modality> visible_only(6, Modality::kVisible);
  const EncoderOutput out = encoder_forward(p, x, visible_only);
  encoder_backward(p, out.tape, up, up);
  EXPECT_TRUE(p.shallow_thermal.weight_grad.isZero(0.0));
  EXPECT_TRUE(p.shallow_thermal.bias_grad.isZero(0.0));
  EXPECT_FALSE(p.shallow_visible.weight_grad.isZero(0.0));
}

TEST(Encoder, ZeroUpstreamGivesZeroGradients) {
  EncoderParams p = randomized(small_shape(), 6);
  std::mt19937_64 rng(6);
  const EncoderOutput out = encoder_forward(p, gaussian(3, 5, rng), alternating(3));
  SpatialBatch zero(3, 2, 1, 3);
  zero.data.setZero();
  encoder_backward(p, out.tape, zero, zero);
  for (const ParamRef& r : p.params()) {
    EXPECT_TRUE(Eigen::Map<Matrix>(r.grad, r.rows, r.cols).isZero(0.0)) << r.name;
  }
  SpatialBatch wrong(2, 2, 1, 3);
  wrong.data.setZero();
  EXPECT_THROW(encoder_backward(p, out.tape, wrong, zero), InvalidArgument);
}

TEST(AffineLayer, SingleSampleGradientIsOuterProduct) {
  std::mt19937_64 rng(7);
  AffineLayer l(3, 2, rng);
  const Matrix x = (Matrix(1, 3) << 1.0, -2.0, 0.5).finished();
  const Matrix up = (Matrix(1, 2) << 0.25, -4.0).finished();
  const Matrix dx = l.backward(x, up);
  EXPECT_TRUE(l.weight_grad.isApprox(up.transpose() * x, 1e-15));
  EXPECT_TRUE(l.bias_grad.isApprox(up.transpose(), 1e-15));
  EXPECT_TRUE(dx.isApprox(up * l.weight, 1e-15));
}

TEST(Encoder, BackwardMatchesFiniteDifferencesOnRandomParameters) {
  const EncoderShape shape = small_shape();
  EncoderParams p = randomized(shape, 8);
  std::mt19937_64 rng(8);
  const Matrix x = gaussian(4, 5, rng);
  const auto tags = alternating(4);
  SpatialBatch wg(4, 2, 1, 3), wl(4, 2, 1, 3);
  wg.data = gaussian(4, 6, rng);
  wl.data = gaussian(4, 6, rng);
  auto objective = [&](const EncoderParams& q) {
    const EncoderOutput o = encoder_forward(q, x, tags);
    return (o.global_map.data.array() * wg.data.array()).sum() + (o.local_map.data.array() * wl.data.array()).sum();
  };
  const EncoderOutput out = encoder_forward(p, x, tags);
  encoder_backward(p, out.tape, wg, wl);

  const std::vector<ParamRef> refs = p.params();
  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  for (std::size_t r = 0; r < refs.size(); ++r) {
    for (Eigen::Index k = 0; k < refs[r].size(); ++k) coords.emplace_back(r, k);
  }
  std::shuffle(coords.begin(), coords.end(), rng);
  coords.resize(20);
  const double h = 1e-5;
  for (const auto& [r, k] : coords) {
    double* v = refs[r].value + k;
    const double keep = *v;
    *v = keep + h;
    const double up = objective(p);
    *v = keep - h;
    const double down = objective(p);
    *v = keep;
    const double numeric = (up - down) / (2 * h);
    const double analytic = refs[r].grad[k];
    EXPECT_LE(std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-5}), 1e-5)
        << refs[r].name << "[" << k << "]";
  }
}

TEST(Sgd, Examples) {
  Matrix p = Matrix::Constant(1, 1, 1.0), g = Matrix::Constant(1, 1, 0.5);
  Sgd sgd(SgdConfig{});
  sgd.step({param_ref("p", p, g)}, 0.01);
  EXPECT_DOUBLE_EQ(p(0, 0), 0.995);
  EXPECT_EQ(g(0, 0), 0.0);
  sgd.step({param_ref("p", p, g)}, 0.01);
  EXPECT_DOUBLE_EQ(p(0, 0), 0.995);
}

TEST(Sgd, NonFiniteGradientLeavesParametersUntouched) {
  Matrix a = Matrix::Ones(2, 1), ga = Matrix::Ones(2, 1);
  Matrix b = Matrix::Ones(1, 1), gb = Matrix::Constant(1, 1, std::nan(""));
  Sgd sgd(SgdConfig{});
  EXPECT_THROW(sgd.step({param_ref("a", a, ga), param_ref("b", b, gb)}, 0.1), NumericalError);
  EXPECT_EQ(a, Matrix::Ones(2, 1));
  EXPECT_EQ(b(0, 0), 1.0);
}

TEST(Sgd, MomentumAndWeightDecay) {
  SgdConfig cfg;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0.1;
  Sgd sgd(cfg);
  Matrix p = Matrix::Constant(1, 1, 2.0), g = Matrix::Constant(1, 1, 1.0);
  sgd.step({param_ref("p", p, g)}, 0.1);
  // v = 1 + 0.2 = 1.2 -> p = 1.88
  EXPECT_NEAR(p(0, 0), 1.88, 1e-15);
  g(0, 0) = 1.0;
  sgd.step({param_ref("p", p, g)}, 0.1);
  // v = 0.9 * 1.2 + 1 + 0.188 = 2.268 -> p = 1.6532
  EXPECT_NEAR(p(0, 0), 1.6532, 1e-15);
}

TEST(StepDecay, Schedule) {
  const StepDecay s(0.01, 30);
  EXPECT_DOUBLE_EQ(s.rate(0), 0.01);
  EXPECT_DOUBLE_EQ(s.rate(29), 0.01);
  EXPECT_NEAR(s.rate(30), 0.001, 1e-18);
  EXPECT_NEAR(s.rate(60), 0.0001, 1e-19);
  SgdConfig cfg;
  EXPECT_EQ(StepDecay::proportional(cfg).step_epochs(), 30);
  cfg.epochs = 8;
  EXPECT_EQ(StepDecay::proportional(cfg).step_epochs(), 3);
  cfg.epochs = 1;
  EXPECT_EQ(StepDecay::proportional(cfg).step_epochs(), 1);
  EXPECT_THROW(StepDecay(0.0, 3), InvalidArgument);
  EXPECT_THROW(StepDecay(0.1, 0), InvalidArgument);
}

class CheckpointTest : public ::testing::Test {
 protected:
  fs::path path = fs::path(::testing::TempDir()) / "cmemd_ckpt_test.bin";
  void TearDown() override { fs::remove(path); }
};

std::vector<StateRef> states_of(EncoderParams& p) {
  std::vector<StateRef> out;
  for (const ParamRef& r : p.params()) out.push_back(r.state());
  return out;
}

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  EncoderParams a = randomized(small_shape(), 9);
  save_checkpoint(path, states_of(a), 0xfeedbeefULL);
  const Checkpoint ckpt = read_checkpoint(path);
  EXPECT_EQ(ckpt.config_hash, 0xfeedbeefULL);
  EXPECT_EQ(ckpt.tensors.size(), 10u);
  EncoderParams b = EncoderParams::init(small_shape(), 77);
  restore_checkpoint(ckpt, states_of(b));
  const auto ra = a.params(), rb = b.params();
  for (std::size_t k = 0; k < ra.size(); ++k) {
    EXPECT_EQ(std::memcmp(ra[k].value, rb[k].value, sizeof(double) * ra[k].size()), 0) << ra[k].name;
  }
  // Saving the restored state reproduces the file byte for byte.
  const fs::path again = path.string() + ".2";
  save_checkpoint(again, states_of(b), 0xfeedbeefULL);
  std::ifstream f1(path, std::ios::binary), f2(again, std::ios::binary);
  const std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  EXPECT_EQ(s1, s2);
  fs::remove(again);
}

TEST_F(CheckpointTest, MismatchesAreRejected) {
  EncoderParams a = randomized(small_shape(), 10);
  save_checkpoint(path, states_of(a), 1);
  const Checkpoint ckpt = read_checkpoint(path);

  EncoderShape wider = small_shape();
  wider.trunk_width = 8;
  EncoderParams b = EncoderParams::init(wider, 1);
  EXPECT_THROW(restore_checkpoint(ckpt, states_of(b)), InvalidArgument);

  EncoderParams c = EncoderParams::init(small_shape(), 1);
  auto fewer = states_of(c);
  fewer.pop_back();
  EXPECT_THROW(restore_checkpoint(ckpt, fewer), InvalidArgument);
  auto renamed = states_of(c);
  renamed[0].name = "other";
  EXPECT_THROW(restore_checkpoint(ckpt, renamed), InvalidArgument);
}

TEST_F(CheckpointTest, CorruptFilesAreRejected) {
  EXPECT_THROW(read_checkpoint(path), InvalidArgument);
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTACKPT";
  }
  EXPECT_THROW(read_checkpoint(path), InvalidArgument);

  EncoderParams a = randomized(small_shape(), 11);
  save_checkpoint(path, states_of(a), 1);
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 3);
  EXPECT_THROW(read_checkpoint(path), InvalidArgument);
}

}  // namespace
}  // namespace cmemd
