#include "cmemd/alignment_losses.hpp"

#include "cmemd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cmemd {

namespace {

// Under-the-root smoothing for distance gradients; coincident points get a
// zero gradient because their difference vector is zero.
constexpr double kDistanceFloor = 1e-12;

struct RowNormalized {
  Matrix values;
  Vector norms;
};

RowNormalized l2_rows(const FeatureMatrix& x) {
  RowNormalized out;
  out.norms = x.rowwise().norm().cwiseMax(1e-12);
  out.values = x.array().colwise() / out.norms.array();
  return out;
}

// Backward of y = x / ||x|| row-wise.
Matrix l2_rows_backward(const RowNormalized& y, const Matrix& grad_y) {
  const Vector dots = y.values.cwiseProduct(grad_y).rowwise().sum();
  Matrix g = grad_y - (y.values.array().colwise() * dots.array()).matrix();
  return g.array().colwise() / y.norms.array();
}

}  // namespace

char modality_tag(Modality m) { return m == Modality::kVisible ? 'v' : 't'; }

Modality parse_modality_tag(std::string_view tag) {
  if (tag == "v") return Modality::kVisible;
  if (tag == "t") return Modality::kThermal;
  throw InvalidArgument("unknown modality tag '" + std::string(tag) + "'");
}

void LabeledBatch::validate() const {
  if (static_cast<Eigen::Index>(identity.size()) != features.rows() ||
      static_cast<Eigen::Index>(modality.size()) != features.rows()) {
    throw InvalidArgument("labeled batch: label/modality count does not match feature rows");
  }
  for (int id : identity) {
    if (id < 0) throw InvalidArgument("labeled batch: negative identity");
  }
}

std::vector<Eigen::Index> LabeledBatch::rows_of(Modality m) const {
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < modality.size(); ++i) {
    if (modality[i] == m) rows.push_back(static_cast<Eigen::Index>(i));
  }
  return rows;
}

FeatureMatrix LabeledBatch::select(const std::vector<Eigen::Index>& rows) const {
  FeatureMatrix out(static_cast<Eigen::Index>(rows.size()), features.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = features.row(rows[k]);
  return out;
}

WeightMode parse_weight_mode(std::string_view name) {
  if (name == "optimal_transport") return WeightMode::kOptimalTransport;
  if (name == "cosine_similarity") return WeightMode::kCosineSimilarity;
  if (name == "uniform") return WeightMode::kUniform;
  throw InvalidArgument("unknown weight mode '" + std::string(name) + "'");
}

std::string_view to_string(WeightMode mode) {
  switch (mode) {
    case WeightMode::kOptimalTransport: return "optimal_transport";
    case WeightMode::kCosineSimilarity: return "cosine_similarity";
    case WeightMode::kUniform: return "uniform";
  }
  return "?";
}

Matrix pair_weights(const FeatureMatrix& fv, const FeatureMatrix& ft, const CostMatrix& cost,
                    const EmdOptions& opts, TransportPlan* plan_out) {
  const Eigen::Index nv = fv.rows();
  const Eigen::Index nt = ft.rows();
  switch (opts.weight_mode) {
    case WeightMode::kOptimalTransport: {
      TransportPlan plan = sinkhorn(cost, MarginalWeights::uniform(nv), MarginalWeights::uniform(nt),
                                    opts.sinkhorn);
      Matrix w = plan.plan;
      if (plan_out) *plan_out = std::move(plan);
      return w;
    }
    case WeightMode::kCosineSimilarity: {
      const Vector nvn = fv.rowwise().norm();
      const Vector ntn = ft.rowwise().norm();
      Matrix w(nv, nt);
      for (Eigen::Index i = 0; i < nv; ++i) {
        for (Eigen::Index j = 0; j < nt; ++j) {
          const double denom = nvn[i] * ntn[j];
          const double cos = denom > 0.0 ? fv.row(i).dot(ft.row(j)) / denom : 0.0;
          w(i, j) = 0.5 * (1.0 + std::clamp(cos, -1.0, 1.0));
        }
      }
      const double total = w.sum();
      if (total > 0.0) return w / total;
      return Matrix::Constant(nv, nt, 1.0 / static_cast<double>(nv * nt));
    }
    case WeightMode::kUniform:
      return Matrix::Constant(nv, nt, 1.0 / static_cast<double>(nv * nt));
  }
  throw InvalidArgument("unknown weight mode");
}

EmdLoss cm_emd_loss(const FeatureMatrix& fv, const FeatureMatrix& ft, const EmdOptions& opts) {
  if (fv.rows() == 0 || ft.rows() == 0) throw InvalidArgument("cm_emd_loss: empty modality");
  if (fv.cols() != ft.cols()) throw InvalidArgument("cm_emd_loss: feature dimension mismatch");

  RowNormalized nv, nt;
  if (opts.l2_normalize) {
    nv = l2_rows(fv);
    nt = l2_rows(ft);
  }
  const FeatureMatrix& xv = opts.l2_normalize ? nv.values : fv;
  const FeatureMatrix& xt = opts.l2_normalize ? nt.values : ft;

  const Matrix sq = pairwise_squared_euclidean(xv, xt).cwiseMax(0.0);
  CostMatrix cost;
  cost.data = sq.cwiseSqrt();

  EmdLoss out;
  if (opts.frozen_weights) {
    if (opts.frozen_weights->rows() != fv.rows() || opts.frozen_weights->cols() != ft.rows()) {
      throw InvalidArgument("cm_emd_loss: frozen weights have the wrong shape");
    }
    out.weights = *opts.frozen_weights;
  } else {
    TransportPlan plan;
    out.weights = pair_weights(xv, xt, cost, opts, &plan);
    if (opts.weight_mode == WeightMode::kOptimalTransport) {
      out.converged = plan.converged;
      out.iterations = plan.iterations;
      out.marginal_violation = plan.marginal_violation;
    }
  }

  out.value = out.weights.cwiseProduct(cost.data).sum();
  const Matrix coef = out.weights.array() / (sq.array() + kDistanceFloor).sqrt();
  Matrix gv = (xv.array().colwise() * coef.rowwise().sum().array()).matrix() - coef * xt;
  Matrix gt = (xt.array().colwise() * coef.colwise().sum().transpose().array()).matrix() -
              coef.transpose() * xv;
  if (opts.l2_normalize) {
    gv = l2_rows_backward(nv, gv);
    gt = l2_rows_backward(nt, gt);
  }
  out.grad_visible = std::move(gv);
  out.grad_thermal = std::move(gt);
  return out;
}

ModalityMeans modality_means(const LabeledBatch& batch) {
  batch.validate();
  const auto vis = batch.rows_of(Modality::kVisible);
  const auto thr = batch.rows_of(Modality::kThermal);
  if (vis.empty() || thr.empty()) throw InvalidArgument("modality_means: a modality is missing");
  ModalityMeans out;
  out.visible = batch.select(vis).colwise().mean().transpose();
  out.thermal = batch.select(thr).colwise().mean().transpose();
  return out;
}

std::vector<ClassMeans> class_modality_means(const LabeledBatch& batch) {
  batch.validate();
  const Eigen::Index d = batch.features.cols();
  std::map<int, ClassMeans> acc;
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    ClassMeans& cm = acc[batch.identity[i]];
    if (cm.visible.size() == 0) {
      cm.identity = batch.identity[i];
      cm.visible = Vector::Zero(d);
      cm.thermal = Vector::Zero(d);
    }
    if (batch.modality[i] == Modality::kVisible) {
      cm.visible += batch.features.row(i).transpose();
      ++cm.visible_count;
    } else {
      cm.thermal += batch.features.row(i).transpose();
      ++cm.thermal_count;
    }
  }
  std::vector<ClassMeans> out;
  out.reserve(acc.size());
  for (auto& [id, cm] : acc) {
    if (cm.visible_count == 0 || cm.thermal_count == 0) {
      throw InvalidArgument("class_modality_means: identity " + std::to_string(id) +
                            " is missing from one modality");
    }
    cm.visible /= static_cast<double>(cm.visible_count);
    cm.thermal /= static_cast<double>(cm.thermal_count);
    out.push_back(std::move(cm));
  }
  return out;
}

namespace {

struct ScatterStats {
  ModalityMeans global;
  std::vector<ClassMeans> classes;
  std::map<int, std::size_t> class_index;
  VarianceRatio ratio;
};

ScatterStats scatter_stats(const LabeledBatch& batch) {
  ScatterStats s;
  s.global = modality_means(batch);
  s.classes = class_modality_means(batch);
  for (std::size_t k = 0; k < s.classes.size(); ++k) s.class_index[s.classes[k].identity] = k;
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    const ClassMeans& cm = s.classes[s.class_index.at(batch.identity[i])];
    // Each sample is measured against the opposite modality's class mean.
    const Vector& ref = batch.modality[i] == Modality::kVisible ? cm.thermal : cm.visible;
    s.ratio.intra += (batch.features.row(i).transpose() - ref).squaredNorm();
  }
  for (const ClassMeans& cm : s.classes) {
    s.ratio.inter += static_cast<double>(cm.visible_count) * (cm.visible - s.global.thermal).squaredNorm();
    s.ratio.inter += static_cast<double>(cm.thermal_count) * (cm.thermal - s.global.visible).squaredNorm();
  }
  return s;
}

}  // namespace

VarianceRatio cross_modality_variances(const LabeledBatch& batch) {
  return scatter_stats(batch).ratio;
}

LossValue cm_dl_loss(const LabeledBatch& batch) {
  const ScatterStats s = scatter_stats(batch);
  if (s.classes.size() < 2) throw InvalidArgument("cm_dl_loss: needs at least two identities");
  const double A = s.ratio.intra;
  const double B = s.ratio.inter;
  if (!(B >= kInterVarianceFloor)) {
    throw DegenerateBatch("cm_dl_loss: inter-class variance collapsed below 1e-12");
  }

  const double n_vis = static_cast<double>(batch.rows_of(Modality::kVisible).size());
  const double n_thr = static_cast<double>(batch.size()) - n_vis;

  LossValue out;
  out.value = A / B;
  out.gradient.resize(batch.size(), batch.features.cols());
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    const ClassMeans& cm = s.classes[s.class_index.at(batch.identity[i])];
    const bool visible = batch.modality[i] == Modality::kVisible;
    // Own modality (o) and opposite modality (x) statistics.
    const Vector& mu_o_c = visible ? cm.visible : cm.thermal;
    const Vector& mu_x_c = visible ? cm.thermal : cm.visible;
    const double n_o_c = static_cast<double>(visible ? cm.visible_count : cm.thermal_count);
    const double n_x_c = static_cast<double>(visible ? cm.thermal_count : cm.visible_count);
    const Vector& mu_o = visible ? s.global.visible : s.global.thermal;
    const Vector& mu_x = visible ? s.global.thermal : s.global.visible;
    const double n_o = visible ? n_vis : n_thr;
    const double n_x = visible ? n_thr : n_vis;

    const Vector f = batch.features.row(i).transpose();
    const Vector dA = 2.0 * (f - mu_x_c) - (2.0 * n_x_c / n_o_c) * (mu_x_c - mu_o_c);
    const Vector dB = 2.0 * (mu_o_c - mu_x) - (2.0 * n_x / n_o) * (mu_x - mu_o);
    out.gradient.row(i) = ((dA * B - A * dB) / (B * B)).transpose();
  }
  return out;
}

LossValue identity_loss(const Matrix& logits, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows() || logits.rows() == 0) {
    throw InvalidArgument("identity_loss: label count does not match logits rows");
  }
  const Eigen::Index n = logits.rows();
  const Eigen::Index k = logits.cols();
  LossValue out;
  out.gradient.resize(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) {
      throw InvalidArgument("identity_loss: label " + std::to_string(y) + " out of range [0, " +
                            std::to_string(k) + ")");
    }
    const Vector p = softmax(logits.row(i).transpose());
    out.value -= std::log(std::max(p[y], std::numeric_limits<double>::min()));
    out.gradient.row(i) = p.transpose();
    out.gradient(i, y) -= 1.0;
  }
  out.value /= static_cast<double>(n);
  out.gradient /= static_cast<double>(n);
  return out;
}

PairLoss kl_alignment_baseline(const FeatureMatrix& fv, const FeatureMatrix& ft) {
  if (fv.rows() == 0 || ft.rows() == 0) throw InvalidArgument("kl_alignment: empty modality");
  if (fv.cols() != ft.cols()) throw InvalidArgument("kl_alignment: feature dimension mismatch");
  const double nv = static_cast<double>(fv.rows());
  const double nt = static_cast<double>(ft.rows());
  const Vector mv = fv.colwise().mean().transpose();
  const Vector mt = ft.colwise().mean().transpose();
  const Matrix cv = fv.rowwise() - mv.transpose();
  const Matrix ct = ft.rowwise() - mt.transpose();
  const Vector raw_sv = cv.array().square().colwise().sum().transpose() / nv;
  const Vector raw_st = ct.array().square().colwise().sum().transpose() / nt;
  const Vector sv = raw_sv.array() + kKlVarianceSmoothing;
  const Vector st = raw_st.array() + kKlVarianceSmoothing;

  PairLoss out;
  const Vector diff = mv - mt;
  out.value = (0.5 * (st.array() / sv.array()).log() +
               (sv.array() + diff.array().square()) / (2.0 * st.array()) - 0.5)
                  .sum();

  const Vector d_mv = diff.array() / st.array();
  const Vector d_sv = -0.5 / sv.array() + 0.5 / st.array();
  const Vector d_st = 0.5 / st.array() - (sv.array() + diff.array().square()) / (2.0 * st.array().square());

  out.grad_visible = (cv.array().rowwise() * (2.0 * d_sv.array() / nv).transpose()).matrix();
  out.grad_visible.rowwise() += (d_mv / nv).transpose();
  out.grad_thermal = (ct.array().rowwise() * (2.0 * d_st.array() / nt).transpose()).matrix();
  out.grad_thermal.rowwise() -= (d_mv / nt).transpose();
  return out;
}

namespace {

std::map<int, std::pair<Vector, int>> class_sums(const FeatureMatrix& features,
                                                 const std::vector<int>& labels) {
  std::map<int, std::pair<Vector, int>> sums;
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    auto& [sum, count] = sums[labels[static_cast<std::size_t>(i)]];
    if (sum.size() == 0) sum = Vector::Zero(features.cols());
    sum += features.row(i).transpose();
    ++count;
  }
  return sums;
}

}  // namespace

void CenterState::update(const FeatureMatrix& features, const std::vector<int>& labels) {
  for (auto& [id, entry] : class_sums(features, labels)) {
    const Vector mean = entry.first / static_cast<double>(entry.second);
    auto it = centers_.find(id);
    if (it == centers_.end()) {
      centers_.emplace(id, mean);
    } else {
      it->second += rate_ * (mean - it->second);
    }
  }
}

LossValue center_loss(const FeatureMatrix& features, const std::vector<int>& labels,
                      CenterState& centers) {
  if (static_cast<Eigen::Index>(labels.size()) != features.rows() || features.rows() == 0) {
    throw InvalidArgument("center_loss: label count does not match feature rows");
  }
  for (auto& [id, entry] : class_sums(features, labels)) {
    if (!centers.has(id)) centers.set(id, entry.first / static_cast<double>(entry.second));
  }
  const double n = static_cast<double>(features.rows());
  LossValue out;
  out.gradient.resize(features.rows(), features.cols());
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const Vector d = features.row(i).transpose() - centers.center(labels[static_cast<std::size_t>(i)]);
    out.value += d.squaredNorm();
    out.gradient.row(i) = (2.0 / n) * d.transpose();
  }
  out.value /= n;
  return out;
}

LossValue batch_hard_triplet_loss(const FeatureMatrix& features, const std::vector<int>& labels,
                                  double margin) {
  if (static_cast<Eigen::Index>(labels.size()) != features.rows()) {
    throw InvalidArgument("triplet_loss: label count does not match feature rows");
  }
  const Eigen::Index n = features.rows();
  const Matrix sq = pairwise_squared_euclidean(features, features).cwiseMax(0.0);
  const Matrix dist = sq.cwiseSqrt();

  LossValue out;
  out.gradient = Matrix::Zero(n, features.cols());
  int valid = 0;
  for (Eigen::Index a = 0; a < n; ++a) {
    Eigen::Index pos = -1, neg = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (pos < 0 || dist(a, j) > dist(a, pos)) pos = j;
      } else if (neg < 0 || dist(a, j) < dist(a, neg)) {
        neg = j;
      }
    }
    if (pos < 0 || neg < 0) continue;
    ++valid;
    const double hinge = dist(a, pos) - dist(a, neg) + margin;
    if (hinge > 0.0) {
      out.value += hinge;
      const auto dp = (features.row(a) - features.row(pos)) / std::sqrt(sq(a, pos) + kDistanceFloor);
      const auto dn = (features.row(a) - features.row(neg)) / std::sqrt(sq(a, neg) + kDistanceFloor);
      out.gradient.row(a) += dp - dn;
      out.gradient.row(pos) -= dp;
      out.gradient.row(neg) += dn;
    }
  }
  if (valid == 0) {
    out.empty = true;
    return out;
  }
  out.value /= valid;
  out.gradient /= valid;
  return out;
}

LossValue metric_baseline(const LabeledBatch& batch, MetricBaseline kind, double margin,
                          CenterState* centers) {
  batch.validate();
  if (kind == MetricBaseline::kCenter) {
    if (!centers) throw InvalidState("center loss needs a CenterState");
    return center_loss(batch.features, batch.identity, *centers);
  }
  return batch_hard_triplet_loss(batch.features, batch.identity, margin);
}

}  // namespace cmemd
