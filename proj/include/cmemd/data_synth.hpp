#pragma once

#include "cmemd/alignment_losses.hpp"
#include "cmemd/encoder_toy.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace cmemd {

struct SynthSpec {
  int num_identities = 60;
  int num_test_identities = 20;
  int dim = 16;
  // Spread of identity centers around the origin.
  double center_scale = 1.0;
  double modality_offset_scale = 1.0;
  std::uint64_t modality_transform_seed = 7;
  // Thermal map is I + strength * R with columns renormalized; 0 gives I.
  double modality_transform_strength = 0.3;
  double intra_identity_noise = 0.25;
  // Fraction of identities whose noise is multiplied by noisy_identity_factor.
  double noisy_identity_fraction = 0.0;
  double noisy_identity_factor = 1.0;
  int samples_per_identity_per_modality = 20;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Dataset {
  SynthSpec spec;
  // Identities 0 .. num_train-1 train, the rest test.
  std::vector<ToySample> train;
  std::vector<ToySample> test;
  Matrix modality_transform;
  Vector modality_offset;
};

// Well-conditioned map I + strength * R with R_ij ~ N(0, 1/dim), columns
// rescaled to unit norm; redrawn until its condition number is below 5.
Matrix modality_transform(int dim, double strength, std::uint64_t seed);

Dataset generate_dataset(const SynthSpec& spec);

struct BatchSpec {
  int identities = 6;
  int visible_per_identity = 4;
  int thermal_per_identity = 4;

  int size() const { return identities * (visible_per_identity + thermal_per_identity); }
  void validate() const;
};

// Draws C identities, then n_v visible and n_t thermal samples of each, all
// without replacement. Owns its RNG stream.
class BatchSampler {
 public:
  BatchSampler(const std::vector<ToySample>& pool, BatchSpec spec, std::uint64_t seed);

  // Indices into the pool, grouped identity by identity.
  std::vector<std::size_t> next();
  std::vector<ToySample> next_batch();
  int identity_count() const { return static_cast<int>(identities_.size()); }

 private:
  struct PerIdentity {
    int identity;
    std::vector<std::size_t> visible;
    std::vector<std::size_t> thermal;
  };
  const std::vector<ToySample>* pool_;
  BatchSpec spec_;
  std::vector<PerIdentity> identities_;
  std::mt19937_64 rng_;
};

// Feature CSV: "dim=<D>" header, then "<identity>,<v|t>,<f1>,...,<fD>" rows.
LabeledBatch load_feature_file(const std::filesystem::path& path);
LabeledBatch parse_feature_csv(const std::string& text);
std::string format_feature_csv(const LabeledBatch& batch);
void write_feature_file(const std::filesystem::path& path, const LabeledBatch& batch);

// Plain numeric CSV (no header), e.g. a cost matrix. Rows must agree in length.
Matrix parse_numeric_csv(const std::string& text);
Matrix load_numeric_csv(const std::filesystem::path& path);

LabeledBatch to_labeled_batch(const std::vector<ToySample>& samples);
std::vector<ToySample> to_samples(const LabeledBatch& batch);

}  // namespace cmemd
