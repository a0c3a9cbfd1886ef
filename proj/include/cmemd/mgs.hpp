#pragma once

#include "cmemd/alignment_losses.hpp"
#include "cmemd/core_math.hpp"
#include "cmemd/parameters.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace cmemd {

struct MgsConfig {
  int parts = 6;
  // Weight of the accumulated-part terms in the local ID and alignment losses.
  double alpha = 1.0;
  // Weights of: holistic CM-DL, local ID, local CM-EMD, global ID, global CM-EMD.
  std::array<double, 5> gamma{3.0, 2.0, 0.4, 1.0, 0.6};
  // Test-time weight of the local block against the global block.
  double beta = 0.5;
  GemOptions gem;

  void validate() const;
};

struct MgsFeatureSet {
  FeatureMatrix global;
  std::vector<FeatureMatrix> locals;
  // accumulated[k] concatenates locals[0..k+1]; K-1 entries.
  std::vector<FeatureMatrix> accumulated;
  FeatureMatrix holistic;
  Vector part_weight_logits;
};

// Same layout as MgsFeatureSet, holding dLoss/dFeature.
struct MgsFeatureGrads {
  Matrix global;
  std::vector<Matrix> locals;
  std::vector<Matrix> accumulated;
  Matrix holistic;

  static MgsFeatureGrads zeros_like(const MgsFeatureSet& set);
};

FeatureMatrix concat_columns(const std::vector<FeatureMatrix>& blocks, std::size_t count);

// [w_1 f_1 | ... | w_K f_K] with w = softmax(logits).
FeatureMatrix holistic_feature(const std::vector<FeatureMatrix>& locals, const Vector& logits);

struct HolisticGrads {
  std::vector<Matrix> locals;
  Vector logits;
};

HolisticGrads holistic_feature_backward(const std::vector<FeatureMatrix>& locals,
                                        const Vector& logits, const Matrix& grad_holistic);

// [beta * (f_1 | ... | f_K) | (1 - beta) * f_g]
FeatureMatrix inference_feature(const MgsFeatureSet& set, double beta);

// GeM + BNNeck per granularity, plus the trainable part-weight logits.
// Owns one normalization state for the global stream and one per part.
class MultiGranularity {
 public:
  MultiGranularity() = default;
  MultiGranularity(int channels, const MgsConfig& cfg);

  MgsFeatureSet forward(const SpatialBatch& global_map, const SpatialBatch& local_map, NormMode mode);

  struct MapGrads {
    SpatialBatch global;
    SpatialBatch local;
  };
  // Backward through the last training-mode forward. Accumulates into the
  // normalization scales and the part-logit gradient.
  MapGrads backward(const MgsFeatureGrads& grads);

  const MgsConfig& config() const { return cfg_; }
  BnNeck& global_norm() { return global_norm_; }
  std::vector<BnNeck>& local_norms() { return local_norms_; }
  Vector& part_logits() { return part_logits_; }
  Vector& part_logits_grad() { return part_logits_grad_; }

  std::vector<ParamRef> params(bool include_part_logits);
  std::vector<StateRef> states();

 private:
  MgsConfig cfg_;
  int channels_ = 0;
  BnNeck global_norm_;
  std::vector<BnNeck> local_norms_;
  Vector part_logits_;
  Vector part_logits_grad_;
  // Forward cache.
  SpatialBatch global_map_;
  SpatialBatch local_map_;
  Matrix global_pooled_;
  std::vector<Matrix> local_pooled_;
  std::vector<Matrix> locals_;
};

// Bias-free fully connected classifier: logits = X W^T.
class LinearHead {
 public:
  LinearHead() = default;
  LinearHead(Eigen::Index in_dim, Eigen::Index classes, std::uint64_t seed);

  Matrix forward(const Matrix& x) const;
  // Accumulates the weight gradient; returns dL/dx.
  Matrix backward(const Matrix& x, const Matrix& grad_logits);

  Matrix& weight() { return weight_; }
  Matrix& grad() { return grad_; }

 private:
  Matrix weight_;
  Matrix grad_;
};

// 1 global head, K part heads and K-1 accumulated-part heads.
struct IdentityHeads {
  LinearHead global;
  std::vector<LinearHead> locals;
  std::vector<LinearHead> accumulated;

  static IdentityHeads create(int channels, int parts, int classes, std::uint64_t seed);
  std::vector<ParamRef> params();
};

enum class AlignmentLoss { kNone, kCmEmd, kKl };
enum class DiscriminationLoss { kNone, kCmDl, kCenter, kTriplet };

struct ObjectiveConfig {
  MgsConfig mgs;
  EmdOptions emd;
  AlignmentLoss alignment = AlignmentLoss::kCmEmd;
  DiscriminationLoss discrimination = DiscriminationLoss::kCmDl;
  double triplet_margin = 0.3;
  // Required for the center-loss baseline.
  CenterState* centers = nullptr;
  // Indexed by granularity (0 global, 1..K parts, K+1..2K-1 accumulated).
  // When non-empty the alignment weights are taken from here.
  const std::vector<Matrix>* frozen_weights = nullptr;
};

struct LossTerms {
  double discrimination = 0.0;  // gamma_1
  double id_local = 0.0;        // gamma_2
  double align_local = 0.0;     // gamma_3
  double id_global = 0.0;       // gamma_4
  double align_global = 0.0;    // gamma_5
};

struct MgsObjective {
  double total = 0.0;
  LossTerms terms;
  MgsFeatureGrads grads;
  // Pair weights per granularity, for frozen-plan re-evaluation.
  std::vector<Matrix> alignment_weights;
  int sinkhorn_nonconverged = 0;
};

// Weighted objective over every granularity. Head weight gradients are
// accumulated into `heads`; feature gradients are returned.
MgsObjective mgs_losses(const MgsFeatureSet& set, const std::vector<int>& labels,
                        const std::vector<Modality>& modality, IdentityHeads& heads,
                        const ObjectiveConfig& cfg);

}  // namespace cmemd
