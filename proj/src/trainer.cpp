#include "cmemd/trainer.hpp"

#include "cmemd/errors.hpp"

#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <set>

namespace cmemd {

TrainData load_train_data(const RunConfig& cfg) {
  TrainData out;
  if (!cfg.data.train_file.empty()) {
    out.train = to_samples(load_feature_file(cfg.data.train_file));
    out.test = to_samples(load_feature_file(cfg.data.test_file));
  } else {
    Dataset ds = generate_dataset(cfg.data.synth);
    out.train = std::move(ds.train);
    out.test = std::move(ds.test);
  }
  if (out.train.empty() || out.test.empty()) throw InvalidArgument("train and test sets must be nonempty");
  out.input_dim = static_cast<int>(out.train.front().input.size());
  for (const auto* set : {&out.train, &out.test}) {
    for (const ToySample& s : *set) {
      if (s.input.size() != out.input_dim) throw InvalidArgument("train and test feature dimensions differ");
    }
  }
  std::map<int, int> relabel;
  for (const ToySample& s : out.train) relabel.emplace(s.identity, 0);
  int next = 0;
  for (auto& [id, idx] : relabel) idx = next++;
  for (ToySample& s : out.train) s.identity = relabel.at(s.identity);
  out.classes = next;
  return out;
}

Model::Model(const RunConfig& cfg, int input_dim, int classes) {
  EncoderShape shape = cfg.encoder;
  shape.input_dim = input_dim;
  encoder = EncoderParams::init(shape, cfg.seed);
  mgs = MultiGranularity(shape.map_channels, cfg.mgs);
  heads = IdentityHeads::create(shape.map_channels, cfg.mgs.parts, classes, cfg.seed + 1);
}

Model Model::from_checkpoint(const RunConfig& cfg, const Checkpoint& ckpt) {
  int input_dim = -1;
  int classes = -1;
  for (const CheckpointTensor& t : ckpt.tensors) {
    if (t.name == "encoder.shallow_visible.weight") input_dim = static_cast<int>(t.value.cols());
    if (t.name == "head.global") classes = static_cast<int>(t.value.rows());
  }
  if (input_dim < 1 || classes < 1) {
    throw InvalidArgument("checkpoint lacks encoder.shallow_visible.weight or head.global");
  }
  Model m(cfg, input_dim, classes);
  restore_checkpoint(ckpt, m.states());
  return m;
}

std::vector<ParamRef> Model::params(bool include_part_logits) {
  std::vector<ParamRef> out = encoder.params();
  for (ParamRef& p : mgs.params(include_part_logits)) out.push_back(std::move(p));
  for (ParamRef& p : heads.params()) out.push_back(std::move(p));
  return out;
}

std::vector<StateRef> Model::states() {
  std::vector<StateRef> out;
  for (const ParamRef& p : encoder.params()) out.push_back(p.state());
  for (StateRef& s : mgs.states()) out.push_back(std::move(s));
  for (const ParamRef& p : heads.params()) out.push_back(p.state());
  return out;
}

LabeledBatch Model::embed(const std::vector<ToySample>& samples, double beta) {
  const EncoderOutput out = encoder_forward(encoder, samples);
  const MgsFeatureSet set = mgs.forward(out.global_map, out.local_map, NormMode::kEval);
  LabeledBatch batch;
  batch.features = inference_feature(set, beta);
  for (const ToySample& s : samples) {
    batch.identity.push_back(s.identity);
    batch.modality.push_back(s.modality);
  }
  return batch;
}

EvalMetrics evaluate_model(Model& model, const std::vector<ToySample>& test, double beta) {
  const LabeledBatch emb = model.embed(test, beta);
  EvalMetrics m;
  m.modality_gap = (emb.select(emb.rows_of(Modality::kVisible)).colwise().mean() -
                    emb.select(emb.rows_of(Modality::kThermal)).colwise().mean())
                       .norm();
  const std::set<int> ids(emb.identity.begin(), emb.identity.end());
  m.fisher_ratio = ids.size() < 2 ? std::numeric_limits<double>::quiet_NaN() : fisher_ratio(emb);
  m.visible_to_thermal = evaluate_split(emb, Direction::kVisibleToThermal);
  m.thermal_to_visible = evaluate_split(emb, Direction::kThermalToVisible);
  return m;
}

namespace {

std::string num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string metrics_csv_header() {
  return "epoch,learning_rate,loss_total,loss_discrimination,loss_id_local,loss_align_local,"
         "loss_id_global,loss_align_global,modality_gap,fisher_ratio,v2t_rank_1,v2t_rank_10,v2t_map,"
         "t2v_rank_1,t2v_rank_10,t2v_map,sinkhorn_nonconverged";
}

std::string metrics_csv_row(const EpochRecord& r) {
  std::string s = std::to_string(r.epoch) + "," + num(r.learning_rate);
  if (r.terms) {
    const LossTerms& t = *r.terms;
    for (double v : {r.total, t.discrimination, t.id_local, t.align_local, t.id_global, t.align_global}) {
      s += "," + num(v);
    }
  } else {
    s += ",,,,,,";
  }
  const EvalMetrics& e = r.eval;
  for (double v : {e.modality_gap, e.fisher_ratio, e.visible_to_thermal.rank_1, e.visible_to_thermal.rank_10,
                   e.visible_to_thermal.map, e.thermal_to_visible.rank_1, e.thermal_to_visible.rank_10,
                   e.thermal_to_visible.map}) {
    s += "," + num(v);
  }
  s += "," + std::to_string(r.sinkhorn_nonconverged);
  return s;
}

Trainer::Trainer(const RunConfig& cfg, TrainData data)
    : cfg_(cfg),
      data_(std::move(data)),
      model_(cfg, data_.input_dim, data_.classes),
      sampler_(data_.train, cfg.batch, cfg.seed + 2),
      sgd_(cfg.optim),
      schedule_(cfg.schedule()),
      centers_(cfg.center_update_rate),
      objective_(objective_config(cfg)) {
  cfg_.validate();
  objective_.centers = &centers_;
}

EpochRecord Trainer::evaluate(int epoch) {
  EpochRecord r;
  r.epoch = epoch;
  r.learning_rate = schedule_.rate(epoch);
  r.eval = evaluate_model(model_, data_.test, cfg_.mgs.beta);
  return r;
}

EpochRecord Trainer::run_epoch(int epoch) {
  const double lr = schedule_.rate(epoch - 1);
  const auto batch_size = static_cast<std::size_t>(cfg_.batch.size());
  const std::size_t batches = (data_.train.size() + batch_size - 1) / batch_size;
  const std::vector<ParamRef> params = model_.params(cfg_.trainable_part_weights);
  LossTerms sum;
  double total = 0.0;
  int nonconverged = 0;
  for (std::size_t b = 0; b < batches; ++b) {
    const std::vector<ToySample> batch = sampler_.next_batch();
    std::vector<int> labels;
    for (const ToySample& s : batch) labels.push_back(s.identity);
    const EncoderOutput enc = encoder_forward(model_.encoder, batch);
    const MgsFeatureSet set = model_.mgs.forward(enc.global_map, enc.local_map, NormMode::kTrain);
    std::vector<Modality> modality;
    for (const ToySample& s : batch) modality.push_back(s.modality);
    const MgsObjective obj = mgs_losses(set, labels, modality, model_.heads, objective_);
    if (!std::isfinite(obj.total)) {
      zero_grads(params);
      throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b));
    }
    const auto map_grads = model_.mgs.backward(obj.grads);
    encoder_backward(model_.encoder, enc.tape, map_grads.global, map_grads.local);
    if (!cfg_.trainable_part_weights) model_.mgs.part_logits_grad().setZero();
    sgd_.step(params, lr);
    if (objective_.discrimination == DiscriminationLoss::kCenter) centers_.update(set.holistic, labels);
    total += obj.total;
    sum.discrimination += obj.terms.discrimination;
    sum.id_local += obj.terms.id_local;
    sum.align_local += obj.terms.align_local;
    sum.id_global += obj.terms.id_global;
    sum.align_global += obj.terms.align_global;
    nonconverged += obj.sinkhorn_nonconverged;
  }
  EpochRecord r = evaluate(epoch);
  r.learning_rate = lr;
  const double n = static_cast<double>(batches);
  r.terms = LossTerms{sum.discrimination / n, sum.id_local / n, sum.align_local / n, sum.id_global / n,
                      sum.align_global / n};
  r.total = total / n;
  r.sinkhorn_nonconverged = nonconverged;
  return r;
}

std::vector<EpochRecord> Trainer::run(const std::function<void(const EpochRecord&)>& on_epoch) {
  std::vector<EpochRecord> history;
  history.push_back(evaluate(0));
  if (on_epoch) on_epoch(history.back());
  for (int e = 1; e <= cfg_.optim.epochs; ++e) {
    history.push_back(run_epoch(e));
    if (on_epoch) on_epoch(history.back());
  }
  return history;
}

}  // namespace cmemd
