#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>

namespace cmemd {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// One row per sample embedding.
using FeatureMatrix = Matrix;

void require_finite(const Matrix& m, const char* what);

struct CostMatrix {
  Matrix data;
  // Factor the raw costs were divided by; 1 when unscaled.
  double normalizer = 1.0;

  Eigen::Index rows() const { return data.rows(); }
  Eigen::Index cols() const { return data.cols(); }
};

// out(i, j) = ||a.row(i) - b.row(j)||_2. Squared distances are floored at 0
// before the square root.
CostMatrix pairwise_euclidean(const FeatureMatrix& a, const FeatureMatrix& b);

// Squared distances only, no sqrt.
Matrix pairwise_squared_euclidean(const FeatureMatrix& a, const FeatureMatrix& b);

// H x W x C activation map for a single sample, stored channel-fastest:
// index ((h * W) + w) * C + c.
struct SpatialFeature {
  int height = 0;
  int width = 0;
  int channels = 0;
  Vector data;

  SpatialFeature() = default;
  SpatialFeature(int h, int w, int c);

  double& at(int h, int w, int c) { return data[(h * width + w) * channels + c]; }
  double at(int h, int w, int c) const { return data[(h * width + w) * channels + c]; }
};

// A batch of spatial maps sharing one shape; row n is sample n laid out as
// in SpatialFeature.
struct SpatialBatch {
  int height = 0;
  int width = 0;
  int channels = 0;
  Matrix data;

  SpatialBatch() = default;
  SpatialBatch(Eigen::Index n, int h, int w, int c);

  Eigen::Index size() const { return data.rows(); }
  int cell_count() const { return height * width; }
  SpatialFeature sample(Eigen::Index n) const;
};

struct GemOptions {
  double p = 3.0;
  double clamp_min = 1e-6;
};

// Generalized-mean pooling over every cell of the region:
// out[c] = (mean(max(x, clamp_min)^p))^(1/p).
Vector gem_pool(const SpatialFeature& region, const GemOptions& opts = {});

// GeM over the horizontal band of rows [h_begin, h_end) for every sample.
// Returns N x C.
Matrix gem_pool_band(const SpatialBatch& maps, int h_begin, int h_end, const GemOptions& opts = {});

// Accumulates d(pooled)/d(maps) into grad_maps for the same band.
// `pooled` is the forward output for that band.
void gem_pool_band_backward(const SpatialBatch& maps, int h_begin, int h_end, const Matrix& pooled,
                            const Matrix& grad_pooled, SpatialBatch& grad_maps,
                            const GemOptions& opts = {});

// Max-shifted softmax.
Vector softmax(const Vector& logits);

// Gradient of a scalar through softmax: given dL/dw for w = softmax(z),
// returns dL/dz.
Vector softmax_backward(const Vector& weights, const Vector& grad_weights);

double log_sum_exp(std::span<const double> values);

enum class NormMode { kTrain, kEval };

// BNNeck-style per-dimension standardization with a learned multiplicative
// scale and no additive shift.
class BnNeck {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BnNeck() = default;
  explicit BnNeck(Eigen::Index dim);

  Eigen::Index dim() const { return scale_.size(); }

  // Training mode normalizes with batch statistics and updates the running
  // state; eval mode uses the running state.
  Matrix forward(const Matrix& x, NormMode mode);

  // Backward through the most recent training-mode forward. Accumulates into
  // scale_grad() and returns dL/dx.
  Matrix backward(const Matrix& grad_out);

  Vector& scale() { return scale_; }
  const Vector& scale() const { return scale_; }
  Vector& scale_grad() { return scale_grad_; }
  Vector& running_mean() { return running_mean_; }
  const Vector& running_mean() const { return running_mean_; }
  Vector& running_var() { return running_var_; }
  const Vector& running_var() const { return running_var_; }

 private:
  Vector scale_;
  Vector scale_grad_;
  Vector running_mean_;
  Vector running_var_;
  // Cache of the last training-mode forward.
  Matrix normalized_;
  Vector inv_std_;
  NormMode last_mode_ = NormMode::kEval;
};

}  // namespace cmemd
