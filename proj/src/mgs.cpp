#include "cmemd/mgs.hpp"

#include "cmemd/errors.hpp"

#include <string>

namespace cmemd {

void MgsConfig::validate() const {
  if (parts < 2) throw InvalidArgument("mgs: part count K must be >= 2");
  if (!(alpha >= 0.0)) throw InvalidArgument("mgs: alpha must be >= 0");
  for (double g : gamma) {
    if (!(g >= 0.0)) throw InvalidArgument("mgs: gamma entries must be >= 0");
  }
  if (!(beta >= 0.0 && beta <= 1.0)) throw InvalidArgument("mgs: beta must lie in [0, 1]");
  if (!(gem.p >= 1.0)) throw InvalidArgument("mgs: GeM exponent must be >= 1");
}

MgsFeatureGrads MgsFeatureGrads::zeros_like(const MgsFeatureSet& set) {
  MgsFeatureGrads g;
  g.global = Matrix::Zero(set.global.rows(), set.global.cols());
  for (const auto& l : set.locals) g.locals.push_back(Matrix::Zero(l.rows(), l.cols()));
  for (const auto& a : set.accumulated) g.accumulated.push_back(Matrix::Zero(a.rows(), a.cols()));
  g.holistic = Matrix::Zero(set.holistic.rows(), set.holistic.cols());
  return g;
}

FeatureMatrix concat_columns(const std::vector<FeatureMatrix>& blocks, std::size_t count) {
  if (count == 0 || count > blocks.size()) throw InvalidArgument("concat: bad block count");
  Eigen::Index cols = 0;
  for (std::size_t k = 0; k < count; ++k) {
    if (blocks[k].rows() != blocks[0].rows()) throw InvalidArgument("concat: row-count mismatch");
    cols += blocks[k].cols();
  }
  FeatureMatrix out(blocks[0].rows(), cols);
  Eigen::Index offset = 0;
  for (std::size_t k = 0; k < count; ++k) {
    out.middleCols(offset, blocks[k].cols()) = blocks[k];
    offset += blocks[k].cols();
  }
  return out;
}

FeatureMatrix holistic_feature(const std::vector<FeatureMatrix>& locals, const Vector& logits) {
  if (locals.empty() || static_cast<Eigen::Index>(locals.size()) != logits.size()) {
    throw InvalidArgument("holistic_feature: need one logit per part");
  }
  const Vector w = softmax(logits);
  FeatureMatrix out = concat_columns(locals, locals.size());
  Eigen::Index offset = 0;
  for (std::size_t k = 0; k < locals.size(); ++k) {
    out.middleCols(offset, locals[k].cols()) *= w[static_cast<Eigen::Index>(k)];
    offset += locals[k].cols();
  }
  return out;
}

HolisticGrads holistic_feature_backward(const std::vector<FeatureMatrix>& locals,
                                        const Vector& logits, const Matrix& grad_holistic) {
  const Vector w = softmax(logits);
  HolisticGrads out;
  Vector grad_w(w.size());
  Eigen::Index offset = 0;
  for (std::size_t k = 0; k < locals.size(); ++k) {
    const auto block = grad_holistic.middleCols(offset, locals[k].cols());
    const auto kk = static_cast<Eigen::Index>(k);
    out.locals.push_back(block * w[kk]);
    grad_w[kk] = block.cwiseProduct(locals[k]).sum();
    offset += locals[k].cols();
  }
  out.logits = softmax_backward(w, grad_w);
  return out;
}

FeatureMatrix inference_feature(const MgsFeatureSet& set, double beta) {
  const FeatureMatrix local = concat_columns(set.locals, set.locals.size());
  FeatureMatrix out(local.rows(), local.cols() + set.global.cols());
  out.leftCols(local.cols()) = beta * local;
  out.rightCols(set.global.cols()) = (1.0 - beta) * set.global;
  return out;
}

MultiGranularity::MultiGranularity(int channels, const MgsConfig& cfg)
    : cfg_(cfg),
      channels_(channels),
      global_norm_(channels),
      local_norms_(static_cast<std::size_t>(cfg.parts), BnNeck(channels)),
      part_logits_(Vector::Zero(cfg.parts)),
      part_logits_grad_(Vector::Zero(cfg.parts)) {
  cfg_.validate();
}

MgsFeatureSet MultiGranularity::forward(const SpatialBatch& global_map, const SpatialBatch& local_map,
                                        NormMode mode) {
  const int K = cfg_.parts;
  if (local_map.height % K != 0) {
    throw InvalidArgument("extract_mgs: local map height " + std::to_string(local_map.height) +
                          " is not divisible by K = " + std::to_string(K));
  }
  if (global_map.size() != local_map.size()) throw InvalidArgument("extract_mgs: batch size mismatch");
  if (global_map.channels != channels_ || local_map.channels != channels_) {
    throw InvalidArgument("extract_mgs: channel count mismatch");
  }
  MgsFeatureSet set;
  global_pooled_ = gem_pool_band(global_map, 0, global_map.height, cfg_.gem);
  set.global = global_norm_.forward(global_pooled_, mode);

  const int band = local_map.height / K;
  local_pooled_.clear();
  for (int k = 0; k < K; ++k) {
    local_pooled_.push_back(gem_pool_band(local_map, k * band, (k + 1) * band, cfg_.gem));
    set.locals.push_back(local_norms_[static_cast<std::size_t>(k)].forward(local_pooled_.back(), mode));
  }
  for (int k = 2; k <= K; ++k) set.accumulated.push_back(concat_columns(set.locals, static_cast<std::size_t>(k)));
  set.part_weight_logits = part_logits_;
  set.holistic = holistic_feature(set.locals, part_logits_);

  global_map_ = global_map;
  local_map_ = local_map;
  locals_ = set.locals;
  return set;
}

MultiGranularity::MapGrads MultiGranularity::backward(const MgsFeatureGrads& grads) {
  const int K = cfg_.parts;
  if (static_cast<int>(grads.locals.size()) != K ||
      static_cast<int>(grads.accumulated.size()) != K - 1) {
    throw InvalidArgument("mgs backward: gradient set does not match K");
  }
  std::vector<Matrix> local_grads = grads.locals;
  for (int a = 0; a < K - 1; ++a) {
    Eigen::Index offset = 0;
    for (int k = 0; k <= a + 1; ++k) {
      const auto cols = locals_[static_cast<std::size_t>(k)].cols();
      local_grads[static_cast<std::size_t>(k)] += grads.accumulated[static_cast<std::size_t>(a)].middleCols(offset, cols);
      offset += cols;
    }
  }
  const HolisticGrads hg = holistic_feature_backward(locals_, part_logits_, grads.holistic);
  part_logits_grad_ += hg.logits;

  MapGrads out{SpatialBatch(local_map_.size(), global_map_.height, global_map_.width, channels_),
               SpatialBatch(local_map_.size(), local_map_.height, local_map_.width, channels_)};
  const int band = local_map_.height / K;
  for (int k = 0; k < K; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    const Matrix d_pooled = local_norms_[kk].backward(local_grads[kk] + hg.locals[kk]);
    gem_pool_band_backward(local_map_, k * band, (k + 1) * band, local_pooled_[kk], d_pooled,
                           out.local, cfg_.gem);
  }
  const Matrix d_global = global_norm_.backward(grads.global);
  gem_pool_band_backward(global_map_, 0, global_map_.height, global_pooled_, d_global, out.global,
                         cfg_.gem);
  return out;
}

std::vector<ParamRef> MultiGranularity::params(bool include_part_logits) {
  std::vector<ParamRef> out;
  out.push_back(param_ref("mgs.global.bn.scale", global_norm_.scale(), global_norm_.scale_grad()));
  for (std::size_t k = 0; k < local_norms_.size(); ++k) {
    out.push_back(param_ref("mgs.part" + std::to_string(k) + ".bn.scale", local_norms_[k].scale(),
                            local_norms_[k].scale_grad()));
  }
  if (include_part_logits) out.push_back(param_ref("mgs.part_logits", part_logits_, part_logits_grad_));
  return out;
}

std::vector<StateRef> MultiGranularity::states() {
  std::vector<StateRef> out;
  auto add_norm = [&out](const std::string& prefix, BnNeck& bn) {
    out.push_back(state_ref(prefix + ".bn.scale", bn.scale()));
    out.push_back(state_ref(prefix + ".bn.running_mean", bn.running_mean()));
    out.push_back(state_ref(prefix + ".bn.running_var", bn.running_var()));
  };
  add_norm("mgs.global", global_norm_);
  for (std::size_t k = 0; k < local_norms_.size(); ++k) add_norm("mgs.part" + std::to_string(k), local_norms_[k]);
  out.push_back(state_ref("mgs.part_logits", part_logits_));
  return out;
}

LinearHead::LinearHead(Eigen::Index in_dim, Eigen::Index classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  weight_ = glorot_uniform(classes, in_dim, rng);
  grad_ = Matrix::Zero(classes, in_dim);
}

Matrix LinearHead::forward(const Matrix& x) const {
  if (x.cols() != weight_.cols()) throw InvalidArgument("classifier head: input dimension mismatch");
  return x * weight_.transpose();
}

Matrix LinearHead::backward(const Matrix& x, const Matrix& grad_logits) {
  grad_ += grad_logits.transpose() * x;
  return grad_logits * weight_;
}

IdentityHeads IdentityHeads::create(int channels, int parts, int classes, std::uint64_t seed) {
  IdentityHeads h;
  std::uint64_t s = seed;
  h.global = LinearHead(channels, classes, s++);
  for (int k = 0; k < parts; ++k) h.locals.emplace_back(channels, classes, s++);
  for (int k = 2; k <= parts; ++k) h.accumulated.emplace_back(static_cast<Eigen::Index>(channels) * k, classes, s++);
  return h;
}

std::vector<ParamRef> IdentityHeads::params() {
  std::vector<ParamRef> out;
  out.push_back(param_ref("head.global", global.weight(), global.grad()));
  for (std::size_t k = 0; k < locals.size(); ++k) {
    out.push_back(param_ref("head.part" + std::to_string(k), locals[k].weight(), locals[k].grad()));
  }
  for (std::size_t k = 0; k < accumulated.size(); ++k) {
    out.push_back(param_ref("head.acc1_" + std::to_string(k + 2), accumulated[k].weight(),
                            accumulated[k].grad()));
  }
  return out;
}

namespace {

struct ModalitySplit {
  std::vector<Eigen::Index> visible;
  std::vector<Eigen::Index> thermal;
};

Matrix gather(const Matrix& x, const std::vector<Eigen::Index>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = x.row(rows[k]);
  return out;
}

void scatter_add(Matrix& target, const std::vector<Eigen::Index>& rows, const Matrix& src, double w) {
  for (std::size_t k = 0; k < rows.size(); ++k) target.row(rows[k]) += w * src.row(static_cast<Eigen::Index>(k));
}

// Returns the unweighted alignment loss and adds w * gradient into `grad`.
double alignment_term(const Matrix& features, const ModalitySplit& split, const ObjectiveConfig& cfg,
                      std::size_t granularity, double w, Matrix& grad, MgsObjective& obj) {
  const Matrix fv = gather(features, split.visible);
  const Matrix ft = gather(features, split.thermal);
  if (cfg.alignment == AlignmentLoss::kKl) {
    const PairLoss kl = kl_alignment_baseline(fv, ft);
    scatter_add(grad, split.visible, kl.grad_visible, w);
    scatter_add(grad, split.thermal, kl.grad_thermal, w);
    return kl.value;
  }
  EmdOptions opts = cfg.emd;
  if (cfg.frozen_weights && !cfg.frozen_weights->empty()) {
    opts.frozen_weights = &cfg.frozen_weights->at(granularity);
  }
  EmdLoss emd = cm_emd_loss(fv, ft, opts);
  if (!emd.converged) ++obj.sinkhorn_nonconverged;
  scatter_add(grad, split.visible, emd.grad_visible, w);
  scatter_add(grad, split.thermal, emd.grad_thermal, w);
  obj.alignment_weights[granularity] = std::move(emd.weights);
  return emd.value;
}

double id_term(const Matrix& features, LinearHead& head, const std::vector<int>& labels, double w,
               Matrix& grad) {
  const LossValue ce = identity_loss(head.forward(features), labels);
  grad += head.backward(features, w * ce.gradient);
  return ce.value;
}

}  // namespace

MgsObjective mgs_losses(const MgsFeatureSet& set, const std::vector<int>& labels,
                        const std::vector<Modality>& modality, IdentityHeads& heads,
                        const ObjectiveConfig& cfg) {
  const auto& mc = cfg.mgs;
  mc.validate();
  const std::size_t K = set.locals.size();
  if (static_cast<int>(K) != mc.parts || set.accumulated.size() != K - 1) {
    throw InvalidArgument("mgs_losses: feature set does not match K");
  }
  if (heads.locals.size() != K || heads.accumulated.size() != K - 1) {
    throw InvalidArgument("mgs_losses: expected 2K classification heads (1 + K + K-1)");
  }
  if (labels.size() != static_cast<std::size_t>(set.global.rows()) || modality.size() != labels.size()) {
    throw InvalidArgument("mgs_losses: label/modality count does not match the batch");
  }

  ModalitySplit split;
  for (std::size_t i = 0; i < modality.size(); ++i) {
    (modality[i] == Modality::kVisible ? split.visible : split.thermal).push_back(static_cast<Eigen::Index>(i));
  }

  MgsObjective obj;
  obj.grads = MgsFeatureGrads::zeros_like(set);
  obj.alignment_weights.resize(2 * K);
  const auto& [g1, g2, g3, g4, g5] = mc.gamma;

  if (g1 > 0.0 && cfg.discrimination != DiscriminationLoss::kNone) {
    LossValue d;
    switch (cfg.discrimination) {
      case DiscriminationLoss::kCmDl:
        d = cm_dl_loss(LabeledBatch{set.holistic, labels, modality});
        break;
      case DiscriminationLoss::kCenter:
        if (!cfg.centers) throw InvalidState("mgs_losses: center-loss baseline needs a CenterState");
        d = center_loss(set.holistic, labels, *cfg.centers);
        break;
      case DiscriminationLoss::kTriplet:
        d = batch_hard_triplet_loss(set.holistic, labels, cfg.triplet_margin);
        break;
      case DiscriminationLoss::kNone:
        break;
    }
    obj.terms.discrimination = d.value;
    if (d.gradient.size() > 0) obj.grads.holistic += g1 * d.gradient;
  }

  if (g2 > 0.0) {
    double v = 0.0;
    for (std::size_t k = 0; k < K; ++k) v += id_term(set.locals[k], heads.locals[k], labels, g2, obj.grads.locals[k]);
    if (mc.alpha > 0.0) {
      for (std::size_t a = 0; a + 1 < K; ++a) {
        v += mc.alpha * id_term(set.accumulated[a], heads.accumulated[a], labels, g2 * mc.alpha,
                                obj.grads.accumulated[a]);
      }
    }
    obj.terms.id_local = v;
  }

  const bool align = cfg.alignment != AlignmentLoss::kNone;
  if (g3 > 0.0 && align) {
    double v = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      v += alignment_term(set.locals[k], split, cfg, 1 + k, g3, obj.grads.locals[k], obj);
    }
    if (mc.alpha > 0.0) {
      for (std::size_t a = 0; a + 1 < K; ++a) {
        v += mc.alpha * alignment_term(set.accumulated[a], split, cfg, K + 1 + a, g3 * mc.alpha,
                                       obj.grads.accumulated[a], obj);
      }
    }
    obj.terms.align_local = v;
  }

  if (g4 > 0.0) obj.terms.id_global = id_term(set.global, heads.global, labels, g4, obj.grads.global);

  if (g5 > 0.0 && align) {
    obj.terms.align_global = alignment_term(set.global, split, cfg, 0, g5, obj.grads.global, obj);
  }

  obj.total = g1 * obj.terms.discrimination + g2 * obj.terms.id_local + g3 * obj.terms.align_local +
              g4 * obj.terms.id_global + g5 * obj.terms.align_global;
  return obj;
}

}  // namespace cmemd
