#pragma once

#include "cmemd/encoder_toy.hpp"
#include "cmemd/evalkit.hpp"
#include "cmemd/mgs.hpp"
#include "cmemd/run_config.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cmemd {

struct TrainData {
  // Train identities are relabelled 0..classes-1; test identities are kept.
  std::vector<ToySample> train;
  std::vector<ToySample> test;
  int input_dim = 0;
  int classes = 0;
};

// Synthetic data from cfg.data.synth, or the configured feature files.
TrainData load_train_data(const RunConfig& cfg);

// Encoder, multi-granularity features and identity classifiers.
class Model {
 public:
  Model(const RunConfig& cfg, int input_dim, int classes);
  // Shapes taken from the checkpoint's encoder input and global head.
  static Model from_checkpoint(const RunConfig& cfg, const Checkpoint& ckpt);

  EncoderParams encoder;
  MultiGranularity mgs;
  IdentityHeads heads;

  std::vector<ParamRef> params(bool include_part_logits);
  std::vector<StateRef> states();

  // Eval-mode inference features of every sample.
  LabeledBatch embed(const std::vector<ToySample>& samples, double beta);
};

struct EvalMetrics {
  double modality_gap = 0.0;
  // NaN when the test split holds a single identity.
  double fisher_ratio = 0.0;
  RetrievalReport visible_to_thermal;
  RetrievalReport thermal_to_visible;
};

EvalMetrics evaluate_model(Model& model, const std::vector<ToySample>& test, double beta);

struct EpochRecord {
  int epoch = 0;
  double learning_rate = 0.0;
  // Means over the epoch's batches; absent for the initial row.
  std::optional<LossTerms> terms;
  double total = 0.0;
  int sinkhorn_nonconverged = 0;
  EvalMetrics eval;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochRecord& rec);

class Trainer {
 public:
  Trainer(const RunConfig& cfg, TrainData data);

  // Held-out metrics of the current parameters at `epoch`.
  EpochRecord evaluate(int epoch);
  // One pass of ceil(train / batch) batches. Throws NumericalError on a
  // non-finite loss or gradient; parameters then hold the last good step.
  EpochRecord run_epoch(int epoch);
  // Initial record followed by one record per epoch.
  std::vector<EpochRecord> run(const std::function<void(const EpochRecord&)>& on_epoch = {});

  Model& model() { return model_; }
  const TrainData& data() const { return data_; }

 private:
  RunConfig cfg_;
  TrainData data_;
  Model model_;
  BatchSampler sampler_;
  Sgd sgd_;
  StepDecay schedule_;
  CenterState centers_;
  ObjectiveConfig objective_;
};

}  // namespace cmemd
