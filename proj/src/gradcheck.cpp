#include "cmemd/gradcheck.hpp"

#include "cmemd/errors.hpp"
#include "cmemd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace cmemd {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-5});
  return std::abs(analytic - numeric) / denom;
}

double central_difference(const std::function<double()>& loss, double* x, double step) {
  const double saved = *x;
  *x = saved + step;
  const double plus = loss();
  *x = saved - step;
  const double minus = loss();
  *x = saved;
  return (plus - minus) / (2.0 * step);
}

std::vector<std::string> gradcheck_components() {
  return {"cm_emd_loss",         "cm_dl_loss",       "identity_loss",        "holistic_weights",
          "encoder.shallow_visible", "encoder.shallow_thermal", "encoder.trunk", "encoder.global_stream",
          "encoder.local_stream", "end_to_end"};
}

namespace {

// A coordinate to probe and its analytic derivative.
struct Coord {
  double* value;
  double analytic;
};

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  }
  return m;
}

class Checker {
 public:
  Checker(int num_probes, std::optional<std::string> corrupt, std::uint64_t seed)
      : num_probes_(num_probes), corrupt_(std::move(corrupt)), rng_(seed) {}

  void check(const std::string& name, std::vector<Coord> coords, const std::function<double()>& loss) {
    ComponentCheck c;
    c.name = name;
    const bool corrupt = corrupt_ && *corrupt_ == name;
    const int probes = std::min<int>(num_probes_, static_cast<int>(coords.size()));
    for (int p = 0; p < probes; ++p) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(p), coords.size() - 1);
      std::swap(coords[static_cast<std::size_t>(p)], coords[pick(rng_)]);
      const Coord& k = coords[static_cast<std::size_t>(p)];
      const double analytic = corrupt ? k.analytic * 1.1 + 1e-3 : k.analytic;
      const double numeric = central_difference(loss, k.value);
      c.max_relative_error = std::max(c.max_relative_error, relative_error(analytic, numeric));
      ++c.probes;
    }
    c.passed = c.max_relative_error <= kGradcheckTolerance;
    report.passed = report.passed && c.passed;
    report.components.push_back(c);
  }

  std::mt19937_64& rng() { return rng_; }
  GradcheckReport report;

 private:
  int num_probes_;
  std::optional<std::string> corrupt_;
  std::mt19937_64 rng_;
};

void add_coords(std::vector<Coord>& out, Matrix& value, const Matrix& grad) {
  for (Eigen::Index i = 0; i < value.size(); ++i) out.push_back({value.data() + i, grad.data()[i]});
}

void add_coords(std::vector<Coord>& out, const ParamRef& p) {
  for (Eigen::Index i = 0; i < p.size(); ++i) out.push_back({p.value + i, p.grad[i]});
}

void check_cm_emd(Checker& ck, const RunConfig& cfg) {
  Matrix fv = gaussian(6, 8, ck.rng());
  Matrix ft = gaussian(6, 8, ck.rng());
  EmdOptions opts;
  opts.sinkhorn = cfg.sinkhorn;
  opts.sinkhorn.tolerance = 1e-9;
  opts.sinkhorn.max_iterations = std::max(opts.sinkhorn.max_iterations, 10000);
  opts.weight_mode = cfg.weight_mode;
  opts.l2_normalize = cfg.l2_normalize;
  const EmdLoss base = cm_emd_loss(fv, ft, opts);
  const Matrix frozen = base.weights;
  opts.frozen_weights = &frozen;
  std::vector<Coord> coords;
  add_coords(coords, fv, base.grad_visible);
  add_coords(coords, ft, base.grad_thermal);
  ck.check("cm_emd_loss", coords, [&] { return cm_emd_loss(fv, ft, opts).value; });
}

void check_cm_dl(Checker& ck) {
  LabeledBatch b;
  b.features = gaussian(12, 5, ck.rng());
  for (int c = 0; c < 3; ++c) {
    for (Modality m : {Modality::kVisible, Modality::kVisible, Modality::kThermal, Modality::kThermal}) {
      b.identity.push_back(c);
      b.modality.push_back(m);
    }
  }
  const LossValue base = cm_dl_loss(b);
  std::vector<Coord> coords;
  add_coords(coords, b.features, base.gradient);
  ck.check("cm_dl_loss", coords, [&] { return cm_dl_loss(b).value; });
}

void check_identity(Checker& ck) {
  Matrix logits = gaussian(8, 5, ck.rng());
  std::vector<int> labels;
  std::uniform_int_distribution<int> pick(0, 4);
  for (int i = 0; i < 8; ++i) labels.push_back(pick(ck.rng()));
  const LossValue base = identity_loss(logits, labels);
  std::vector<Coord> coords;
  add_coords(coords, logits, base.gradient);
  ck.check("identity_loss", coords, [&] { return identity_loss(logits, labels).value; });
}

void check_holistic(Checker& ck, const RunConfig& cfg) {
  const int k = cfg.mgs.parts;
  std::vector<FeatureMatrix> locals;
  for (int p = 0; p < k; ++p) locals.push_back(gaussian(4, 3, ck.rng()));
  Matrix logits_m = gaussian(k, 1, ck.rng());
  const Matrix g = gaussian(4, 3 * k, ck.rng());
  auto loss = [&] {
    return (holistic_feature(locals, logits_m.col(0)).array() * g.array()).sum();
  };
  const HolisticGrads grads = holistic_feature_backward(locals, logits_m.col(0), g);
  std::vector<Coord> coords;
  add_coords(coords, logits_m, Matrix(grads.logits));
  // Probing the logits alone would miss the per-part scaling of the features.
  std::vector<Coord> feature_coords;
  for (int p = 0; p < k; ++p) add_coords(feature_coords, locals[static_cast<std::size_t>(p)], grads.locals[static_cast<std::size_t>(p)]);
  std::shuffle(feature_coords.begin(), feature_coords.end(), ck.rng());
  feature_coords.resize(std::min<std::size_t>(feature_coords.size(), static_cast<std::size_t>(k)));
  coords.insert(coords.end(), feature_coords.begin(), feature_coords.end());
  ck.check("holistic_weights", coords, loss);
}

void check_encoder(Checker& ck, const RunConfig& cfg, int input_dim) {
  EncoderShape shape = cfg.encoder;
  shape.input_dim = input_dim;
  EncoderParams params = EncoderParams::init(shape, cfg.seed);
  // Nonzero biases so every layer's bias gradient is exercised.
  for (AffineLayer* l : {&params.shallow_visible, &params.shallow_thermal, &params.trunk, &params.global_stream,
                         &params.local_stream}) {
    l->bias = 0.1 * gaussian(l->bias.size(), 1, ck.rng()).col(0);
  }
  const Matrix inputs = gaussian(8, input_dim, ck.rng());
  std::vector<Modality> modality;
  for (int i = 0; i < 8; ++i) modality.push_back(i % 2 ? Modality::kThermal : Modality::kVisible);
  const Matrix gg = gaussian(8, shape.map_size(), ck.rng());
  const Matrix gl = gaussian(8, shape.map_size(), ck.rng());
  auto loss = [&] {
    const EncoderOutput out = encoder_forward(params, inputs, modality);
    return (out.global_map.data.array() * gg.array()).sum() + (out.local_map.data.array() * gl.array()).sum();
  };
  const EncoderOutput out = encoder_forward(params, inputs, modality);
  SpatialBatch grad_g = out.global_map;
  grad_g.data = gg;
  SpatialBatch grad_l = out.local_map;
  grad_l.data = gl;
  encoder_backward(params, out.tape, grad_g, grad_l);
  const std::vector<ParamRef> refs = params.params();
  for (const char* layer : {"shallow_visible", "shallow_thermal", "trunk", "global_stream", "local_stream"}) {
    const std::string name = std::string("encoder.") + layer;
    std::vector<Coord> coords;
    for (const ParamRef& p : refs) {
      if (p.name.rfind(name + ".", 0) == 0) add_coords(coords, p);
    }
    ck.check(name, coords, loss);
  }
}

void check_end_to_end(Checker& ck, const RunConfig& cfg, const TrainData& data) {
  Model model(cfg, data.input_dim, data.classes);
  BatchSampler sampler(data.train, cfg.batch, cfg.seed + 2);
  const std::vector<ToySample> batch = sampler.next_batch();
  std::vector<int> labels;
  std::vector<Modality> modality;
  for (const ToySample& s : batch) {
    labels.push_back(s.identity);
    modality.push_back(s.modality);
  }
  CenterState centers(cfg.center_update_rate);
  ObjectiveConfig obj = objective_config(cfg);
  obj.centers = &centers;
  const std::vector<ParamRef> params = model.params(true);
  auto forward = [&](const ObjectiveConfig& oc) {
    const EncoderOutput enc = encoder_forward(model.encoder, batch);
    const MgsFeatureSet set = model.mgs.forward(enc.global_map, enc.local_map, NormMode::kTrain);
    return std::make_pair(enc, mgs_losses(set, labels, modality, model.heads, oc));
  };
  zero_grads(params);
  auto [enc, first] = forward(obj);
  const std::vector<Matrix> frozen = first.alignment_weights;
  obj.frozen_weights = &frozen;
  zero_grads(params);
  auto [enc2, base] = forward(obj);
  const auto map_grads = model.mgs.backward(base.grads);
  encoder_backward(model.encoder, enc2.tape, map_grads.global, map_grads.local);
  std::vector<Coord> coords;
  for (const ParamRef& p : params) add_coords(coords, p);
  ck.check("end_to_end", coords, [&] { return forward(obj).second.total; });
}

}  // namespace

GradcheckReport run_gradcheck(const RunConfig& cfg, int num_probes, const std::optional<std::string>& corrupt) {
  cfg.validate();
  if (num_probes < 0) throw InvalidArgument("gradcheck: num_probes must be >= 0");
  if (corrupt) {
    const auto names = gradcheck_components();
    if (std::find(names.begin(), names.end(), *corrupt) == names.end()) {
      throw InvalidArgument("gradcheck: unknown component '" + *corrupt + "'");
    }
  }
  Checker ck(num_probes, corrupt, cfg.seed);
  const TrainData data = load_train_data(cfg);
  check_cm_emd(ck, cfg);
  check_cm_dl(ck);
  check_identity(ck);
  check_holistic(ck, cfg);
  check_encoder(ck, cfg, data.input_dim);
  check_end_to_end(ck, cfg, data);
  if (num_probes == 0) ck.report.warning = "num_probes = 0: no coordinates checked, pass is vacuous";
  return ck.report;
}

}  // namespace cmemd
