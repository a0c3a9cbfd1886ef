#include "cmemd/data_synth.hpp"

#include "cmemd/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string_view>

namespace cmemd {

void SynthSpec::validate() const {
  if (num_identities < 1 || dim < 1 || samples_per_identity_per_modality < 1) {
    throw InvalidArgument("synth spec: counts must be >= 1");
  }
  if (num_test_identities < 0 || num_test_identities >= num_identities) {
    throw InvalidArgument("synth spec: need 0 <= test identities < identities");
  }
  if (!(intra_identity_noise >= 0.0) || !(modality_offset_scale >= 0.0) || !(center_scale >= 0.0)) {
    throw InvalidArgument("synth spec: noise, offset and center scale must be >= 0");
  }
  if (!(modality_transform_strength >= 0.0)) {
    throw InvalidArgument("synth spec: transform strength must be >= 0");
  }
  if (!(noisy_identity_fraction >= 0.0 && noisy_identity_fraction <= 1.0) || !(noisy_identity_factor >= 0.0)) {
    throw InvalidArgument("synth spec: noisy fraction must lie in [0, 1] and factor be >= 0");
  }
}

Matrix modality_transform(int dim, double strength, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  // Entry variance 1/dim keeps the spectral size of R near 2 for any dim.
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Matrix r(dim, dim);
    for (int i = 0; i < dim; ++i) {
      for (int j = 0; j < dim; ++j) r(i, j) = normal(rng);
    }
    Matrix a = Matrix::Identity(dim, dim) + strength * r;
    for (int j = 0; j < dim; ++j) a.col(j).normalize();
    const Vector sv = Eigen::JacobiSVD<Matrix>(a).singularValues();
    if (sv[dim - 1] > 0.0 && sv[0] / sv[dim - 1] < 5.0) return a;
  }
  throw NumericalError("modality transform: no well-conditioned draw in 1000 attempts");
}

Dataset generate_dataset(const SynthSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.modality_transform = modality_transform(spec.dim, spec.modality_transform_strength, spec.modality_transform_seed);
  {
    std::mt19937_64 rng(spec.modality_transform_seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector dir(spec.dim);
    for (int d = 0; d < spec.dim; ++d) dir[d] = normal(rng);
    ds.modality_offset = dir.normalized() * spec.modality_offset_scale;
  }

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](double scale) {
    Vector v(spec.dim);
    for (int d = 0; d < spec.dim; ++d) v[d] = scale * normal(rng);
    return v;
  };

  std::vector<int> order(static_cast<std::size_t>(spec.num_identities));
  for (int c = 0; c < spec.num_identities; ++c) order[static_cast<std::size_t>(c)] = c;
  std::shuffle(order.begin(), order.end(), rng);
  const int noisy = static_cast<int>(std::lround(spec.noisy_identity_fraction * spec.num_identities));
  std::vector<double> sigma(static_cast<std::size_t>(spec.num_identities), spec.intra_identity_noise);
  for (int k = 0; k < noisy; ++k) sigma[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] *= spec.noisy_identity_factor;

  const int num_train = spec.num_identities - spec.num_test_identities;
  for (int c = 0; c < spec.num_identities; ++c) {
    const Vector center = gaussian(spec.center_scale);
    const Vector thermal_center = ds.modality_transform * center + ds.modality_offset;
    auto& split = c < num_train ? ds.train : ds.test;
    const double s = sigma[static_cast<std::size_t>(c)];
    for (int k = 0; k < spec.samples_per_identity_per_modality; ++k) {
      split.push_back({center + gaussian(s), c, Modality::kVisible});
    }
    for (int k = 0; k < spec.samples_per_identity_per_modality; ++k) {
      split.push_back({thermal_center + gaussian(s), c, Modality::kThermal});
    }
  }
  return ds;
}

void BatchSpec::validate() const {
  if (identities < 2) throw InvalidArgument("batch spec: need at least 2 identities per batch");
  if (visible_per_identity < 1 || thermal_per_identity < 1) {
    throw InvalidArgument("batch spec: need at least one sample per modality per identity");
  }
}

BatchSampler::BatchSampler(const std::vector<ToySample>& pool, BatchSpec spec, std::uint64_t seed)
    : pool_(&pool), spec_(spec), rng_(seed) {
  spec_.validate();
  std::map<int, PerIdentity> by_id;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    PerIdentity& p = by_id[pool[i].identity];
    p.identity = pool[i].identity;
    (pool[i].modality == Modality::kVisible ? p.visible : p.thermal).push_back(i);
  }
  for (auto& [id, p] : by_id) {
    if (static_cast<int>(p.visible.size()) >= spec_.visible_per_identity &&
        static_cast<int>(p.thermal.size()) >= spec_.thermal_per_identity) {
      identities_.push_back(std::move(p));
    }
  }
  if (static_cast<int>(identities_.size()) < spec_.identities) {
    throw InvalidArgument("batch sampler: only " + std::to_string(identities_.size()) +
                          " identities have enough samples in both modalities, " +
                          std::to_string(spec_.identities) + " required");
  }
}

namespace {

// First k entries of a partial Fisher-Yates shuffle.
template <class T>
std::vector<T> choose(std::vector<T> items, int k, std::mt19937_64& rng) {
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), items.size() - 1);
    std::swap(items[static_cast<std::size_t>(i)], items[pick(rng)]);
  }
  items.resize(static_cast<std::size_t>(k));
  return items;
}

}  // namespace

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> slots(identities_.size());
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  std::vector<std::size_t> out;
  out.reserve(static_cast<std::size_t>(spec_.size()));
  for (std::size_t slot : choose(slots, spec_.identities, rng_)) {
    const PerIdentity& p = identities_[slot];
    for (std::size_t idx : choose(p.visible, spec_.visible_per_identity, rng_)) out.push_back(idx);
    for (std::size_t idx : choose(p.thermal, spec_.thermal_per_identity, rng_)) out.push_back(idx);
  }
  return out;
}

std::vector<ToySample> BatchSampler::next_batch() {
  std::vector<ToySample> out;
  for (std::size_t idx : next()) out.push_back((*pool_)[idx]);
  return out;
}

LabeledBatch to_labeled_batch(const std::vector<ToySample>& samples) {
  LabeledBatch b;
  if (samples.empty()) return b;
  const Eigen::Index d = samples.front().input.size();
  b.features.resize(static_cast<Eigen::Index>(samples.size()), d);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].input.size() != d) throw InvalidArgument("samples have inconsistent dimensions");
    b.features.row(static_cast<Eigen::Index>(i)) = samples[i].input.transpose();
    b.identity.push_back(samples[i].identity);
    b.modality.push_back(samples[i].modality);
  }
  return b;
}

std::vector<ToySample> to_samples(const LabeledBatch& batch) {
  batch.validate();
  std::vector<ToySample> out;
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    out.push_back({batch.features.row(i).transpose(), batch.identity[static_cast<std::size_t>(i)],
                   batch.modality[static_cast<std::size_t>(i)]});
  }
  return out;
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

}  // namespace

LabeledBatch parse_feature_csv(const std::string& text) {
  std::vector<std::string_view> lines;
  {
    std::string_view rest(text);
    while (!rest.empty()) {
      const std::size_t nl = rest.find('\n');
      std::string_view line = rest.substr(0, nl);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      lines.push_back(line);
      if (nl == std::string_view::npos) break;
      rest.remove_prefix(nl + 1);
    }
  }
  if (lines.empty()) throw ParseError(1, "empty feature file; expected header 'dim=<D>'");
  const std::string_view header = lines[0];
  int dim = 0;
  if (header.substr(0, 4) != "dim=" || !parse_number(header.substr(4), dim) || dim < 1) {
    throw ParseError(1, "expected header 'dim=<D>' with D >= 1, got '" + std::string(header) + "'");
  }
  std::vector<std::vector<double>> rows;
  LabeledBatch batch;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    const std::size_t line_no = ln + 1;
    if (lines[ln].empty()) {
      if (ln + 1 == lines.size()) break;
      throw ParseError(line_no, "empty row");
    }
    const auto fields = split_commas(lines[ln]);
    if (static_cast<int>(fields.size()) != dim + 2) {
      throw ParseError(line_no, "row has " + std::to_string(fields.size()) + " columns, expected " +
                                    std::to_string(dim + 2) + " (identity, modality, " + std::to_string(dim) +
                                    " features)");
    }
    int id = 0;
    if (!parse_number(fields[0], id) || id < 0) {
      throw ParseError(line_no, "identity '" + std::string(fields[0]) + "' is not a non-negative integer");
    }
    if (fields[1] != "v" && fields[1] != "t") {
      throw ParseError(line_no, "unknown modality tag '" + std::string(fields[1]) + "' (expected v or t)");
    }
    std::vector<double> values(static_cast<std::size_t>(dim));
    for (int d = 0; d < dim; ++d) {
      const auto field = fields[static_cast<std::size_t>(d) + 2];
      if (!parse_number(field, values[static_cast<std::size_t>(d)]) || !std::isfinite(values[static_cast<std::size_t>(d)])) {
        throw ParseError(line_no, "feature " + std::to_string(d + 1) + " '" + std::string(field) +
                                      "' is not a finite decimal number");
      }
    }
    batch.identity.push_back(id);
    batch.modality.push_back(parse_modality_tag(fields[1]));
    rows.push_back(std::move(values));
  }
  batch.features.resize(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int d = 0; d < dim; ++d) batch.features(static_cast<Eigen::Index>(i), d) = rows[i][static_cast<std::size_t>(d)];
  }
  return batch;
}

Matrix parse_numeric_csv(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream is(text);
  std::string raw;
  std::size_t line_no = 0;
  std::size_t blank_after = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    std::string_view line(raw);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) {
      if (blank_after == 0) blank_after = line_no;
      continue;
    }
    if (blank_after != 0) throw ParseError(blank_after, "empty row");
    std::vector<double> row;
    std::size_t col = 0;
    for (std::string_view field : split_commas(line)) {
      ++col;
      while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
      while (!field.empty() && field.back() == ' ') field.remove_suffix(1);
      double v = 0.0;
      if (!parse_number(field, v) || !std::isfinite(v)) {
        throw ParseError(line_no, "column " + std::to_string(col) + " '" + std::string(field) +
                                      "' is not a finite number");
      }
      row.push_back(v);
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw ParseError(line_no, "row has " + std::to_string(row.size()) + " columns, expected " +
                                    std::to_string(rows.front().size()));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError(1, "no numeric rows");
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

namespace {

std::string read_text(const std::filesystem::path& path, const char* what) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error(std::string("cannot open ") + what + " " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Re-raises with the path in front of the "line N: " message.
template <class F>
auto with_path(const std::filesystem::path& path, F&& parse) {
  try {
    return parse();
  } catch (const ParseError& e) {
    throw ParseError(path.string(), e.line(), e.detail());
  }
}

}  // namespace

Matrix load_numeric_csv(const std::filesystem::path& path) {
  const std::string text = read_text(path, "CSV file");
  return with_path(path, [&] { return parse_numeric_csv(text); });
}

LabeledBatch load_feature_file(const std::filesystem::path& path) {
  const std::string text = read_text(path, "feature file");
  return with_path(path, [&] { return parse_feature_csv(text); });
}

std::string format_feature_csv(const LabeledBatch& batch) {
  batch.validate();
  std::string out = "dim=" + std::to_string(batch.features.cols()) + "\n";
  char buf[64];
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    out += std::to_string(batch.identity[static_cast<std::size_t>(i)]);
    out += ',';
    out += modality_tag(batch.modality[static_cast<std::size_t>(i)]);
    for (Eigen::Index d = 0; d < batch.features.cols(); ++d) {
      // Shortest round-trip representation.
      const auto res = std::to_chars(buf, buf + sizeof(buf), batch.features(i, d));
      out += ',';
      out.append(buf, res.ptr);
    }
    out += '\n';
  }
  return out;
}

void write_feature_file(const std::filesystem::path& path, const LabeledBatch& batch) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write feature file " + path.string());
  os << format_feature_csv(batch);
  if (!os) throw std::runtime_error("error while writing feature file " + path.string());
}

}  // namespace cmemd
