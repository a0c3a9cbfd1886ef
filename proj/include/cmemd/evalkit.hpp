#pragma once

#include "cmemd/alignment_losses.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string_view>
#include <vector>

namespace cmemd {

enum class Direction { kVisibleToThermal, kThermalToVisible };

std::string_view to_string(Direction d);

inline constexpr int kReportSchemaVersion = 1;

struct RetrievalReport {
  Direction direction = Direction::kVisibleToThermal;
  double rank_1 = 0.0;
  double rank_10 = 0.0;
  double rank_20 = 0.0;
  double map = 0.0;
  // Queries scored; excluded ones have no match in the gallery.
  int num_queries = 0;
  int excluded_queries = 0;
};

nlohmann::json to_json(const RetrievalReport& report);

// Ranks the gallery for each query row of `distances` (ascending, ties by
// gallery index) and scores CMC@{1,10,20} and mAP over queries that have at
// least one matching gallery identity.
RetrievalReport score_rankings(const Matrix& distances, const std::vector<int>& query_ids,
                               const std::vector<int>& gallery_ids, Direction direction);

// Euclidean retrieval. Query rows must carry the direction's query modality and
// gallery rows the opposite one.
RetrievalReport evaluate_retrieval(const LabeledBatch& query, const LabeledBatch& gallery,
                                   Direction direction);

// Splits a two-modality batch and evaluates in the given direction.
RetrievalReport evaluate_split(const LabeledBatch& batch, Direction direction);

struct ModalityGap {
  // Distance between the two modality mean vectors.
  double mean_distance = 0.0;
  // Exact EMD between the uniform empirical distributions, when the sizes fit
  // exact_transport.
  std::optional<double> emd;
};

ModalityGap modality_gap(const FeatureMatrix& fv, const FeatureMatrix& ft);

// V_intra / V_inter on held-out features; +inf when V_inter is below the
// cm_dl_loss floor.
double fisher_ratio(const LabeledBatch& batch);

}  // namespace cmemd
