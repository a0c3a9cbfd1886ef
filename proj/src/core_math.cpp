#include "cmemd/core_math.hpp"

#include "cmemd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cmemd {

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw InvalidArgument(std::string(what) + " contains non-finite entries");
  }
}

Matrix pairwise_squared_euclidean(const FeatureMatrix& a, const FeatureMatrix& b) {
  if (a.cols() != b.cols()) {
    throw InvalidArgument("pairwise distance: dimension mismatch (" + std::to_string(a.cols()) +
                          " vs " + std::to_string(b.cols()) + ")");
  }
  require_finite(a, "pairwise distance lhs");
  require_finite(b, "pairwise distance rhs");
  Matrix out(a.rows(), b.rows());
  // Direct differences rather than the |a|^2 + |b|^2 - 2ab expansion, which
  // loses the exact zero diagonal.
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      out(i, j) = (a.row(i) - b.row(j)).squaredNorm();
    }
  }
  return out;
}

CostMatrix pairwise_euclidean(const FeatureMatrix& a, const FeatureMatrix& b) {
  CostMatrix cost;
  cost.data = pairwise_squared_euclidean(a, b).cwiseMax(0.0).cwiseSqrt();
  return cost;
}

SpatialFeature::SpatialFeature(int h, int w, int c)
    : height(h), width(w), channels(c), data(Vector::Zero(static_cast<Eigen::Index>(h) * w * c)) {}

SpatialBatch::SpatialBatch(Eigen::Index n, int h, int w, int c)
    : height(h), width(w), channels(c), data(Matrix::Zero(n, static_cast<Eigen::Index>(h) * w * c)) {}

SpatialFeature SpatialBatch::sample(Eigen::Index n) const {
  SpatialFeature f(height, width, channels);
  f.data = data.row(n).transpose();
  return f;
}

Vector gem_pool(const SpatialFeature& region, const GemOptions& opts) {
  const int cells = region.height * region.width;
  if (cells == 0 || region.channels == 0) {
    throw InvalidArgument("gem_pool: empty region");
  }
  if (!(opts.p >= 1.0)) {
    throw InvalidArgument("gem_pool: exponent must be >= 1");
  }
  Vector out = Vector::Zero(region.channels);
  for (int h = 0; h < region.height; ++h) {
    for (int w = 0; w < region.width; ++w) {
      for (int c = 0; c < region.channels; ++c) {
        out[c] += std::pow(std::max(region.at(h, w, c), opts.clamp_min), opts.p);
      }
    }
  }
  for (int c = 0; c < region.channels; ++c) {
    out[c] = std::pow(out[c] / cells, 1.0 / opts.p);
  }
  return out;
}

namespace {

void check_band(const SpatialBatch& maps, int h_begin, int h_end) {
  if (h_begin < 0 || h_end > maps.height || h_begin >= h_end || maps.width <= 0 ||
      maps.channels <= 0) {
    throw InvalidArgument("gem_pool: empty or out-of-range band");
  }
}

}  // namespace

Matrix gem_pool_band(const SpatialBatch& maps, int h_begin, int h_end, const GemOptions& opts) {
  check_band(maps, h_begin, h_end);
  if (!(opts.p >= 1.0)) {
    throw InvalidArgument("gem_pool: exponent must be >= 1");
  }
  const int C = maps.channels;
  const int cells = (h_end - h_begin) * maps.width;
  Matrix out = Matrix::Zero(maps.size(), C);
  for (Eigen::Index n = 0; n < maps.size(); ++n) {
    for (int h = h_begin; h < h_end; ++h) {
      for (int w = 0; w < maps.width; ++w) {
        const Eigen::Index base = (static_cast<Eigen::Index>(h) * maps.width + w) * C;
        for (int c = 0; c < C; ++c) {
          out(n, c) += std::pow(std::max(maps.data(n, base + c), opts.clamp_min), opts.p);
        }
      }
    }
  }
  const double inv_p = 1.0 / opts.p;
  return (out / cells).unaryExpr([inv_p](double m) { return std::pow(m, inv_p); });
}

void gem_pool_band_backward(const SpatialBatch& maps, int h_begin, int h_end, const Matrix& pooled,
                            const Matrix& grad_pooled, SpatialBatch& grad_maps,
                            const GemOptions& opts) {
  check_band(maps, h_begin, h_end);
  if (grad_maps.data.rows() != maps.data.rows() || grad_maps.data.cols() != maps.data.cols()) {
    throw InvalidArgument("gem_pool backward: gradient buffer shape mismatch");
  }
  const int C = maps.channels;
  const double cells = static_cast<double>((h_end - h_begin) * maps.width);
  // y = (mean x^p)^(1/p)  =>  dy/dx_k = y^(1-p) x_k^(p-1) / cells
  for (Eigen::Index n = 0; n < maps.size(); ++n) {
    for (int c = 0; c < C; ++c) {
      const double scale = grad_pooled(n, c) * std::pow(pooled(n, c), 1.0 - opts.p) / cells;
      for (int h = h_begin; h < h_end; ++h) {
        for (int w = 0; w < maps.width; ++w) {
          const Eigen::Index idx = (static_cast<Eigen::Index>(h) * maps.width + w) * C + c;
          const double x = maps.data(n, idx);
          if (x < opts.clamp_min) continue;
          grad_maps.data(n, idx) += scale * std::pow(x, opts.p - 1.0);
        }
      }
    }
  }
}

Vector softmax(const Vector& logits) {
  if (logits.size() == 0) return logits;
  const double shift = logits.maxCoeff();
  Vector e = (logits.array() - shift).exp();
  return e / e.sum();
}

Vector softmax_backward(const Vector& weights, const Vector& grad_weights) {
  const double dot = weights.dot(grad_weights);
  return (weights.array() * (grad_weights.array() - dot)).matrix();
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - mx);
  return mx + std::log(acc);
}

BnNeck::BnNeck(Eigen::Index dim)
    : scale_(Vector::Ones(dim)),
      scale_grad_(Vector::Zero(dim)),
      running_mean_(Vector::Zero(dim)),
      running_var_(Vector::Ones(dim)) {}

Matrix BnNeck::forward(const Matrix& x, NormMode mode) {
  if (x.rows() == 0) {
    throw InvalidArgument("BNNeck: zero batch size");
  }
  if (x.cols() != dim()) {
    throw InvalidArgument("BNNeck: feature dimension mismatch");
  }
  if ((running_var_.array() < 0.0).any()) {
    throw InvalidArgument("BNNeck: negative running variance");
  }
  last_mode_ = mode;
  if (mode == NormMode::kEval) {
    Vector inv_std = (running_var_.array() + kEps).rsqrt();
    return ((x.rowwise() - running_mean_.transpose()).array().rowwise() *
            (inv_std.array() * scale_.array()).transpose())
        .matrix();
  }

  const double n = static_cast<double>(x.rows());
  Vector mean = x.colwise().mean().transpose();
  Matrix centered = x.rowwise() - mean.transpose();
  Vector var = centered.array().square().colwise().sum().transpose() / n;
  inv_std_ = (var.array() + kEps).rsqrt();
  normalized_ = (centered.array().rowwise() * inv_std_.array().transpose()).matrix();

  running_mean_ = (1.0 - kMomentum) * running_mean_ + kMomentum * mean;
  // Running variance tracks the unbiased estimate.
  const Vector unbiased = x.rows() > 1 ? Vector(var * (n / (n - 1.0))) : var;
  running_var_ = (1.0 - kMomentum) * running_var_ + kMomentum * unbiased;

  return (normalized_.array().rowwise() * scale_.array().transpose()).matrix();
}

Matrix BnNeck::backward(const Matrix& grad_out) {
  if (last_mode_ != NormMode::kTrain || normalized_.size() == 0) {
    throw InvalidState("BNNeck backward requires a preceding training-mode forward");
  }
  if (grad_out.rows() != normalized_.rows() || grad_out.cols() != normalized_.cols()) {
    throw InvalidArgument("BNNeck backward: gradient shape mismatch");
  }
  const double n = static_cast<double>(grad_out.rows());
  scale_grad_ += grad_out.cwiseProduct(normalized_).colwise().sum().transpose();
  Matrix g = (grad_out.array().rowwise() * scale_.array().transpose()).matrix();
  Vector sum_g = g.colwise().sum().transpose();
  Vector sum_gx = g.cwiseProduct(normalized_).colwise().sum().transpose();
  Matrix dx = (g * n).rowwise() - sum_g.transpose();
  dx -= (normalized_.array().rowwise() * sum_gx.array().transpose()).matrix();
  return (dx.array().rowwise() * (inv_std_.array() / n).transpose()).matrix();
}

}  // namespace cmemd
