#pragma once

#include "cmemd/alignment_losses.hpp"
#include "cmemd/data_synth.hpp"
#include "cmemd/encoder_toy.hpp"
#include "cmemd/mgs.hpp"
#include "cmemd/ot_solver.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace cmemd {

enum class BaselineLoss { kNone, kKl, kCenter, kTriplet };

BaselineLoss parse_baseline_loss(std::string_view name);
std::string_view to_string(BaselineLoss b);

struct DataConfig {
  SynthSpec synth;
  // Feature CSV files; when both are set they replace the synthetic data.
  std::string train_file;
  std::string test_file;
};

struct RunConfig {
  DataConfig data;
  EncoderShape encoder;
  MgsConfig mgs;
  bool trainable_part_weights = true;
  SinkhornConfig sinkhorn;
  BatchSpec batch;
  SgdConfig optim;
  // Epochs between /10 decays; 0 places the step proportionally.
  int decay_step = 0;
  bool enable_cm_emd = true;
  bool enable_cm_dl = true;
  WeightMode weight_mode = WeightMode::kOptimalTransport;
  BaselineLoss baseline_loss = BaselineLoss::kNone;
  double triplet_margin = 0.3;
  double center_update_rate = 0.5;
  bool l2_normalize = false;
  std::uint64_t seed = 1;

  void validate() const;
  StepDecay schedule() const;
};

// "sysu-profile" or "regdb-profile"; the default RunConfig equals the latter.
RunConfig preset_config(std::string_view name);

// Applies "[section]" / "key = value" text on top of `cfg`. '#' starts a
// comment. Unknown sections or keys and malformed values raise ParseError.
void apply_config_text(RunConfig& cfg, const std::string& text);
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

// Canonical text form listing every key; feeding it back reproduces `cfg`.
std::string to_config_text(const RunConfig& cfg);

std::uint64_t fnv1a64(std::string_view bytes);
// Hash of the canonical text form.
std::uint64_t config_hash(const RunConfig& cfg);
std::string hex64(std::uint64_t value);

// Loss wiring implied by the ablation switches.
ObjectiveConfig objective_config(const RunConfig& cfg);

}  // namespace cmemd
