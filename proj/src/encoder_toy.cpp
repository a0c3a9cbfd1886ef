#include "cmemd/encoder_toy.hpp"

#include "cmemd/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace cmemd {

void EncoderShape::validate() const {
  if (input_dim < 1 || shallow_width < 1 || trunk_width < 1 || map_height < 1 || map_width < 1 ||
      map_channels < 1) {
    throw InvalidArgument("encoder shape: every dimension must be >= 1");
  }
}

AffineLayer::AffineLayer(int in, int out, std::mt19937_64& rng)
    : weight(glorot_uniform(out, in, rng)),
      bias(Vector::Zero(out)),
      weight_grad(Matrix::Zero(out, in)),
      bias_grad(Vector::Zero(out)) {}

Matrix AffineLayer::forward(const Matrix& x) const {
  Matrix y = x * weight.transpose();
  y.rowwise() += bias.transpose();
  return y;
}

Matrix AffineLayer::backward(const Matrix& x, const Matrix& grad_out) {
  weight_grad += grad_out.transpose() * x;
  bias_grad += grad_out.colwise().sum().transpose();
  return grad_out * weight;
}

EncoderParams EncoderParams::init(const EncoderShape& shape, std::uint64_t seed) {
  shape.validate();
  std::mt19937_64 rng(seed);
  EncoderParams p;
  p.shape = shape;
  p.shallow_visible = AffineLayer(shape.input_dim, shape.shallow_width, rng);
  p.shallow_thermal = AffineLayer(shape.input_dim, shape.shallow_width, rng);
  p.trunk = AffineLayer(shape.shallow_width, shape.trunk_width, rng);
  p.global_stream = AffineLayer(shape.trunk_width, shape.map_size(), rng);
  p.local_stream = AffineLayer(shape.trunk_width, shape.map_size(), rng);
  return p;
}

std::vector<ParamRef> EncoderParams::params() {
  std::vector<ParamRef> out;
  auto add = [&out](const std::string& name, AffineLayer& l) {
    out.push_back(param_ref(name + ".weight", l.weight, l.weight_grad));
    out.push_back(param_ref(name + ".bias", l.bias, l.bias_grad));
  };
  add("encoder.shallow_visible", shallow_visible);
  add("encoder.shallow_thermal", shallow_thermal);
  add("encoder.trunk", trunk);
  add("encoder.global_stream", global_stream);
  add("encoder.local_stream", local_stream);
  return out;
}

namespace {

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix relu_backward(const Matrix& pre, const Matrix& grad) {
  return (pre.array() > 0.0).select(grad, 0.0);
}

}  // namespace

EncoderOutput encoder_forward(const EncoderParams& params, const Matrix& inputs,
                              const std::vector<Modality>& modality) {
  const EncoderShape& s = params.shape;
  if (inputs.cols() != s.input_dim) {
    throw InvalidArgument("encoder: input dimension " + std::to_string(inputs.cols()) +
                          " does not match " + std::to_string(s.input_dim));
  }
  if (static_cast<Eigen::Index>(modality.size()) != inputs.rows()) {
    throw InvalidArgument("encoder: one modality tag per input row required");
  }
  EncoderOutput out;
  EncoderTape& t = out.tape;
  t.input = inputs;
  t.modality = modality;
  t.shallow_pre.resize(inputs.rows(), s.shallow_width);
  for (Eigen::Index i = 0; i < inputs.rows(); ++i) {
    const AffineLayer& layer =
        modality[static_cast<std::size_t>(i)] == Modality::kVisible ? params.shallow_visible : params.shallow_thermal;
    t.shallow_pre.row(i) = inputs.row(i) * layer.weight.transpose() + layer.bias.transpose();
  }
  t.trunk_in = relu(t.shallow_pre);
  t.trunk_pre = params.trunk.forward(t.trunk_in);
  t.stream_in = relu(t.trunk_pre);
  t.global_pre = params.global_stream.forward(t.stream_in);
  t.local_pre = params.local_stream.forward(t.stream_in);

  out.global_map = SpatialBatch(inputs.rows(), s.map_height, s.map_width, s.map_channels);
  out.global_map.data = relu(t.global_pre);
  out.local_map = SpatialBatch(inputs.rows(), s.map_height, s.map_width, s.map_channels);
  out.local_map.data = relu(t.local_pre);
  return out;
}

EncoderOutput encoder_forward(const EncoderParams& params, std::span<const ToySample> samples) {
  Matrix x(static_cast<Eigen::Index>(samples.size()), params.shape.input_dim);
  std::vector<Modality> tags;
  tags.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].input.size() != params.shape.input_dim) {
      throw InvalidArgument("encoder: sample " + std::to_string(i) + " has input length " +
                            std::to_string(samples[i].input.size()));
    }
    x.row(static_cast<Eigen::Index>(i)) = samples[i].input.transpose();
    tags.push_back(samples[i].modality);
  }
  return encoder_forward(params, x, tags);
}

void encoder_backward(EncoderParams& params, const EncoderTape& tape, const SpatialBatch& grad_global,
                      const SpatialBatch& grad_local) {
  if (grad_global.data.rows() != tape.global_pre.rows() ||
      grad_global.data.cols() != tape.global_pre.cols() ||
      grad_local.data.rows() != tape.local_pre.rows() || grad_local.data.cols() != tape.local_pre.cols()) {
    throw InvalidArgument("encoder backward: upstream gradient shape mismatch");
  }
  Matrix d_stream = params.global_stream.backward(tape.stream_in, relu_backward(tape.global_pre, grad_global.data));
  d_stream += params.local_stream.backward(tape.stream_in, relu_backward(tape.local_pre, grad_local.data));
  const Matrix d_trunk_in = params.trunk.backward(tape.trunk_in, relu_backward(tape.trunk_pre, d_stream));
  const Matrix d_shallow = relu_backward(tape.shallow_pre, d_trunk_in);
  for (Eigen::Index i = 0; i < d_shallow.rows(); ++i) {
    AffineLayer& layer =
        tape.modality[static_cast<std::size_t>(i)] == Modality::kVisible ? params.shallow_visible : params.shallow_thermal;
    layer.weight_grad += d_shallow.row(i).transpose() * tape.input.row(i);
    layer.bias_grad += d_shallow.row(i).transpose();
  }
}

StepDecay::StepDecay(double initial, int step_epochs) : initial_(initial), step_(step_epochs) {
  if (!(initial > 0.0)) throw InvalidArgument("learning rate must be > 0");
  if (step_epochs < 1) throw InvalidArgument("decay step must be >= 1 epoch");
}

StepDecay StepDecay::proportional(const SgdConfig& cfg) {
  const int step = std::max(1, static_cast<int>(std::lround(cfg.epochs * 30.0 / 80.0)));
  return StepDecay(cfg.learning_rate, step);
}

double StepDecay::rate(int epoch) const {
  return initial_ * std::pow(0.1, std::max(0, epoch) / step_);
}

void Sgd::step(const std::vector<ParamRef>& params, double lr) {
  for (const ParamRef& p : params) {
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      if (!std::isfinite(p.grad[k])) {
        throw NumericalError("non-finite gradient in '" + p.name + "'; update aborted");
      }
    }
  }
  for (const ParamRef& p : params) {
    std::vector<double>* vel = nullptr;
    if (cfg_.momentum > 0.0) {
      vel = &velocity_[p.name];
      vel->resize(static_cast<std::size_t>(p.size()), 0.0);
    }
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      double g = p.grad[k] + cfg_.weight_decay * p.value[k];
      if (vel) {
        double& v = (*vel)[static_cast<std::size_t>(k)];
        v = cfg_.momentum * v + g;
        g = v;
      }
      p.value[k] -= lr * g;
      p.grad[k] = 0.0;
    }
  }
}

namespace {

constexpr char kMagic[8] = {'C', 'M', 'E', 'M', 'D', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little-endian");

template <class T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw InvalidArgument("checkpoint " + path.string() + ": truncated file");
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<StateRef>& states,
                     std::uint64_t config_hash) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, config_hash);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(states.size()));
  for (const StateRef& s : states) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.name.size()));
    os.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.rows));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.cols));
    os.write(reinterpret_cast<const char*>(s.value), static_cast<std::streamsize>(s.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("error while writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidArgument("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw InvalidArgument("checkpoint " + path.string() + ": bad magic");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw InvalidArgument("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.config_hash = get<std::uint64_t>(is, path);
  const auto count = get<std::uint32_t>(is, path);
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointTensor t;
    const auto len = get<std::uint32_t>(is, path);
    t.name.resize(len);
    if (!is.read(t.name.data(), len)) throw InvalidArgument("checkpoint " + path.string() + ": truncated name");
    const auto rows = get<std::uint32_t>(is, path);
    const auto cols = get<std::uint32_t>(is, path);
    t.value.resize(rows, cols);
    if (!is.read(reinterpret_cast<char*>(t.value.data()),
                 static_cast<std::streamsize>(t.value.size() * sizeof(double)))) {
      throw InvalidArgument("checkpoint " + path.string() + ": truncated tensor '" + t.name + "'");
    }
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

void restore_checkpoint(const Checkpoint& ckpt, const std::vector<StateRef>& states) {
  if (ckpt.tensors.size() != states.size()) {
    throw InvalidArgument("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                          " tensors, model expects " + std::to_string(states.size()));
  }
  for (std::size_t k = 0; k < states.size(); ++k) {
    const CheckpointTensor& t = ckpt.tensors[k];
    const StateRef& s = states[k];
    if (t.name != s.name) {
      throw InvalidArgument("checkpoint tensor " + std::to_string(k) + " is '" + t.name + "', expected '" + s.name + "'");
    }
    if (t.value.rows() != s.rows || t.value.cols() != s.cols) {
      throw InvalidArgument("checkpoint tensor '" + t.name + "' has shape " + std::to_string(t.value.rows()) + "x" +
                            std::to_string(t.value.cols()) + ", model expects " + std::to_string(s.rows) + "x" +
                            std::to_string(s.cols));
    }
  }
  for (std::size_t k = 0; k < states.size(); ++k) {
    std::copy(ckpt.tensors[k].value.data(), ckpt.tensors[k].value.data() + states[k].size(), states[k].value);
  }
}

}  // namespace cmemd
