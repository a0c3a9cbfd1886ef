#pragma once

#include "cmemd/alignment_losses.hpp"
#include "cmemd/core_math.hpp"
#include "cmemd/parameters.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace cmemd {

struct ToySample {
  Vector input;
  int identity = 0;
  Modality modality = Modality::kVisible;
};

struct EncoderShape {
  int input_dim = 16;
  int shallow_width = 32;
  int trunk_width = 64;
  int map_height = 6;
  int map_width = 1;
  int map_channels = 16;

  int map_size() const { return map_height * map_width * map_channels; }
  void validate() const;
};

// y = x W^T + b, one sample per row.
struct AffineLayer {
  Matrix weight;  // out x in
  Vector bias;
  Matrix weight_grad;
  Vector bias_grad;

  AffineLayer() = default;
  AffineLayer(int in, int out, std::mt19937_64& rng);

  Matrix forward(const Matrix& x) const;
  // Accumulates parameter gradients; returns dL/dx.
  Matrix backward(const Matrix& x, const Matrix& grad_out);
};

// Modality-specific shallow layers, a shared trunk, and separate global and
// local stream heads that emit spatial maps.
struct EncoderParams {
  EncoderShape shape;
  AffineLayer shallow_visible;
  AffineLayer shallow_thermal;
  AffineLayer trunk;
  AffineLayer global_stream;
  AffineLayer local_stream;

  static EncoderParams init(const EncoderShape& shape, std::uint64_t seed);

  std::vector<ParamRef> params();
};

struct EncoderTape {
  Matrix input;
  std::vector<Modality> modality;
  Matrix shallow_pre;
  Matrix trunk_in;
  Matrix trunk_pre;
  Matrix stream_in;
  Matrix global_pre;
  Matrix local_pre;
};

struct EncoderOutput {
  SpatialBatch global_map;
  SpatialBatch local_map;
  EncoderTape tape;
};

EncoderOutput encoder_forward(const EncoderParams& params, const Matrix& inputs,
                              const std::vector<Modality>& modality);
EncoderOutput encoder_forward(const EncoderParams& params, std::span<const ToySample> samples);

void encoder_backward(EncoderParams& params, const EncoderTape& tape, const SpatialBatch& grad_global,
                      const SpatialBatch& grad_local);

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.0;
  double weight_decay = 0.0;
  // Total epochs; the /10 decay step is placed at 30/80 of this, as in an
  // 80-epoch schedule decayed every 30 epochs.
  int epochs = 80;
};

// lr(epoch) = lr0 * 0.1^floor(epoch / step).
class StepDecay {
 public:
  StepDecay(double initial, int step_epochs);
  static StepDecay proportional(const SgdConfig& cfg);

  double rate(int epoch) const;
  int step_epochs() const { return step_; }

 private:
  double initial_;
  int step_;
};

class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) {}

  // p <- p - lr * (g + wd * p), with optional momentum. Zeroes the gradients.
  // Throws NumericalError, leaving every parameter untouched, when any
  // gradient is non-finite.
  void step(const std::vector<ParamRef>& params, double lr);

 private:
  SgdConfig cfg_;
  std::map<std::string, std::vector<double>> velocity_;
};

// Binary checkpoint: named column-major float64 arrays with shape headers.
struct CheckpointTensor {
  std::string name;
  Matrix value;
};

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::vector<CheckpointTensor> tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const std::vector<StateRef>& states,
                     std::uint64_t config_hash);
Checkpoint read_checkpoint(const std::filesystem::path& path);
// Copies every tensor into the matching state; names and shapes must agree
// exactly, otherwise InvalidArgument.
void restore_checkpoint(const Checkpoint& ckpt, const std::vector<StateRef>& states);

}  // namespace cmemd
