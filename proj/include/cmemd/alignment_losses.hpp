#pragma once

#include "cmemd/core_math.hpp"
#include "cmemd/ot_solver.hpp"

#include <map>
#include <string_view>
#include <vector>

namespace cmemd {

enum class Modality { kVisible, kThermal };

char modality_tag(Modality m);
Modality parse_modality_tag(std::string_view tag);

struct LabeledBatch {
  FeatureMatrix features;
  std::vector<int> identity;
  std::vector<Modality> modality;

  Eigen::Index size() const { return features.rows(); }
  // Throws InvalidArgument when label/tag vectors disagree with the rows.
  void validate() const;
  std::vector<Eigen::Index> rows_of(Modality m) const;
  FeatureMatrix select(const std::vector<Eigen::Index>& rows) const;
};

// Scalar loss with the gradient w.r.t. one feature matrix.
struct LossValue {
  double value = 0.0;
  Matrix gradient;
  // Set by losses that can legitimately find nothing to penalize.
  bool empty = false;
};

// Loss over a visible/thermal pair of feature matrices.
struct PairLoss {
  double value = 0.0;
  Matrix grad_visible;
  Matrix grad_thermal;
};

enum class WeightMode { kOptimalTransport, kCosineSimilarity, kUniform };

WeightMode parse_weight_mode(std::string_view name);
std::string_view to_string(WeightMode mode);

struct EmdOptions {
  SinkhornConfig sinkhorn;
  WeightMode weight_mode = WeightMode::kOptimalTransport;
  // L2-normalize rows before building the cost.
  bool l2_normalize = false;
  // When set, use these weights instead of solving (frozen-plan evaluation).
  const Matrix* frozen_weights = nullptr;
};

struct EmdLoss : PairLoss {
  Matrix weights;
  bool converged = true;
  int iterations = 0;
  double marginal_violation = 0.0;
};

// Pair-weighted cross-modality distance: sum_ij W_ij * ||fv_i - ft_j||.
// The weights are treated as constants when differentiating.
EmdLoss cm_emd_loss(const FeatureMatrix& fv, const FeatureMatrix& ft, const EmdOptions& opts = {});

// Weight matrix used by cm_emd_loss for a given cost and features.
Matrix pair_weights(const FeatureMatrix& fv, const FeatureMatrix& ft, const CostMatrix& cost,
                    const EmdOptions& opts, TransportPlan* plan_out = nullptr);

struct ModalityMeans {
  Vector visible;
  Vector thermal;
};

ModalityMeans modality_means(const LabeledBatch& batch);

struct ClassMeans {
  int identity = 0;
  Vector visible;
  Vector thermal;
  Eigen::Index visible_count = 0;
  Eigen::Index thermal_count = 0;
};

// Sorted by identity.
std::vector<ClassMeans> class_modality_means(const LabeledBatch& batch);

struct VarianceRatio {
  double intra = 0.0;
  double inter = 0.0;
};

inline constexpr double kInterVarianceFloor = 1e-12;

// Cross-modality intra/inter class scatter (trace form).
VarianceRatio cross_modality_variances(const LabeledBatch& batch);

// V_intra / V_inter with the exact gradient through both terms and all means.
// Throws DegenerateBatch when V_inter < kInterVarianceFloor.
LossValue cm_dl_loss(const LabeledBatch& batch);

// Mean softmax cross-entropy with gradient (softmax - onehot) / N.
LossValue identity_loss(const Matrix& logits, const std::vector<int>& labels);

// Added to every fitted variance. A channel that collapses in one modality
// (common after ReLU) would otherwise dominate the ratio and diverge.
inline constexpr double kKlVarianceSmoothing = 1e-2;

// KL(N_v || N_t) between per-dimension Gaussian fits, summed over dimensions.
PairLoss kl_alignment_baseline(const FeatureMatrix& fv, const FeatureMatrix& ft);

// Running class centers for the center-loss baseline. Single writer.
class CenterState {
 public:
  explicit CenterState(double update_rate = 0.5) : rate_(update_rate) {}

  bool has(int identity) const { return centers_.count(identity) != 0; }
  const Vector& center(int identity) const { return centers_.at(identity); }
  void set(int identity, Vector c) { centers_[identity] = std::move(c); }
  // Moves centers toward the batch class means. Unseen classes start at their
  // batch mean.
  void update(const FeatureMatrix& features, const std::vector<int>& labels);

 private:
  double rate_;
  std::map<int, Vector> centers_;
};

// Mean squared distance to the class centers. Classes without a center yet are
// seeded from the batch before evaluating.
LossValue center_loss(const FeatureMatrix& features, const std::vector<int>& labels,
                      CenterState& centers);

// Batch-hard triplet loss, averaged over anchors having both a positive and a
// negative. No valid anchor yields value 0 with `empty` set.
LossValue batch_hard_triplet_loss(const FeatureMatrix& features, const std::vector<int>& labels,
                                  double margin);

enum class MetricBaseline { kCenter, kTriplet };

LossValue metric_baseline(const LabeledBatch& batch, MetricBaseline kind, double margin,
                          CenterState* centers);

}  // namespace cmemd
