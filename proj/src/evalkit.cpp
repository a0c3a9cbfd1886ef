#include "cmemd/evalkit.hpp"

#include "cmemd/errors.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <set>

namespace cmemd {

std::string_view to_string(Direction d) {
  return d == Direction::kVisibleToThermal ? "visible_to_thermal" : "thermal_to_visible";
}

nlohmann::json to_json(const RetrievalReport& r) {
  return {{"schema_version", kReportSchemaVersion},
          {"direction", std::string(to_string(r.direction))},
          {"rank_1", r.rank_1},
          {"rank_10", r.rank_10},
          {"rank_20", r.rank_20},
          {"map", r.map},
          {"num_queries", r.num_queries},
          {"excluded_queries", r.excluded_queries}};
}

RetrievalReport score_rankings(const Matrix& distances, const std::vector<int>& query_ids,
                               const std::vector<int>& gallery_ids, Direction direction) {
  if (static_cast<std::size_t>(distances.rows()) != query_ids.size() ||
      static_cast<std::size_t>(distances.cols()) != gallery_ids.size()) {
    throw InvalidArgument("score_rankings: distance shape does not match the label vectors");
  }
  require_finite(distances, "score_rankings distances");
  RetrievalReport r;
  r.direction = direction;
  const std::set<int> gallery_set(gallery_ids.begin(), gallery_ids.end());
  std::vector<Eigen::Index> order(gallery_ids.size());
  double hits1 = 0, hits10 = 0, hits20 = 0, ap_sum = 0;
  for (Eigen::Index q = 0; q < distances.rows(); ++q) {
    const int id = query_ids[static_cast<std::size_t>(q)];
    if (gallery_set.count(id) == 0) {
      ++r.excluded_queries;
      continue;
    }
    ++r.num_queries;
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return distances(q, a) < distances(q, b); });
    int relevant = 0;
    double precision_sum = 0;
    std::size_t first_hit = order.size();
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (gallery_ids[static_cast<std::size_t>(order[k])] != id) continue;
      if (relevant == 0) first_hit = k;
      ++relevant;
      precision_sum += static_cast<double>(relevant) / static_cast<double>(k + 1);
    }
    hits1 += first_hit < 1;
    hits10 += first_hit < 10;
    hits20 += first_hit < 20;
    ap_sum += precision_sum / relevant;
  }
  if (r.num_queries > 0) {
    const double n = r.num_queries;
    r.rank_1 = hits1 / n;
    r.rank_10 = hits10 / n;
    r.rank_20 = hits20 / n;
    r.map = ap_sum / n;
  }
  return r;
}

namespace {

Modality query_modality(Direction d) {
  return d == Direction::kVisibleToThermal ? Modality::kVisible : Modality::kThermal;
}

Modality other(Modality m) { return m == Modality::kVisible ? Modality::kThermal : Modality::kVisible; }

LabeledBatch subset(const LabeledBatch& batch, Modality m) {
  LabeledBatch out;
  const auto rows = batch.rows_of(m);
  out.features = batch.select(rows);
  for (auto i : rows) {
    out.identity.push_back(batch.identity[static_cast<std::size_t>(i)]);
    out.modality.push_back(m);
  }
  return out;
}

}  // namespace

RetrievalReport evaluate_retrieval(const LabeledBatch& query, const LabeledBatch& gallery,
                                   Direction direction) {
  query.validate();
  gallery.validate();
  const Modality qm = query_modality(direction);
  const auto wrong = [](const LabeledBatch& b, Modality m) {
    return std::any_of(b.modality.begin(), b.modality.end(), [m](Modality x) { return x != m; });
  };
  if (wrong(query, qm) || wrong(gallery, other(qm))) {
    throw InvalidArgument("evaluate_retrieval: " + std::string(to_string(direction)) +
                          " needs " + modality_tag(qm) + " queries and " + modality_tag(other(qm)) +
                          " gallery items");
  }
  if (query.size() == 0 || gallery.size() == 0) {
    throw InvalidArgument("evaluate_retrieval: query and gallery must be nonempty");
  }
  const CostMatrix d = pairwise_euclidean(query.features, gallery.features);
  return score_rankings(d.data, query.identity, gallery.identity, direction);
}

RetrievalReport evaluate_split(const LabeledBatch& batch, Direction direction) {
  const Modality qm = query_modality(direction);
  return evaluate_retrieval(subset(batch, qm), subset(batch, other(qm)), direction);
}

ModalityGap modality_gap(const FeatureMatrix& fv, const FeatureMatrix& ft) {
  if (fv.rows() == 0 || ft.rows() == 0) throw InvalidArgument("modality_gap: both sets must be nonempty");
  if (fv.cols() != ft.cols()) throw InvalidArgument("modality_gap: feature dimensions differ");
  ModalityGap gap;
  gap.mean_distance = (fv.colwise().mean() - ft.colwise().mean()).norm();
  const bool assignment = fv.rows() == ft.rows() && fv.rows() <= kMaxAssignmentSize;
  const bool general = fv.rows() <= kMaxGeneralSize && ft.rows() <= kMaxGeneralSize;
  if (assignment || general) {
    const CostMatrix cost = pairwise_euclidean(fv, ft);
    const TransportPlan plan = exact_transport(cost, MarginalWeights::uniform(fv.rows()),
                                               MarginalWeights::uniform(ft.rows()));
    gap.emd = transport_cost(plan, cost);
  }
  return gap;
}

double fisher_ratio(const LabeledBatch& batch) {
  batch.validate();
  const std::set<int> ids(batch.identity.begin(), batch.identity.end());
  if (ids.size() < 2) throw InvalidArgument("fisher_ratio: needs at least two identities");
  const VarianceRatio v = cross_modality_variances(batch);
  if (!(v.inter >= kInterVarianceFloor)) return std::numeric_limits<double>::infinity();
  return v.intra / v.inter;
}

}  // namespace cmemd
