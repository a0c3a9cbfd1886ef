#include "cmemd/run_config.hpp"

#include "cmemd/errors.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace cmemd {

BaselineLoss parse_baseline_loss(std::string_view name) {
  if (name == "none") return BaselineLoss::kNone;
  if (name == "kl") return BaselineLoss::kKl;
  if (name == "center") return BaselineLoss::kCenter;
  if (name == "triplet") return BaselineLoss::kTriplet;
  throw InvalidArgument("unknown baseline loss '" + std::string(name) + "' (none, kl, center, triplet)");
}

std::string_view to_string(BaselineLoss b) {
  switch (b) {
    case BaselineLoss::kNone: return "none";
    case BaselineLoss::kKl: return "kl";
    case BaselineLoss::kCenter: return "center";
    case BaselineLoss::kTriplet: return "triplet";
  }
  return "none";
}

void RunConfig::validate() const {
  data.synth.validate();
  if (data.train_file.empty() != data.test_file.empty()) {
    throw InvalidArgument("data: train_file and test_file must be set together");
  }
  encoder.validate();
  mgs.validate();
  sinkhorn.validate();
  batch.validate();
  if (encoder.map_height % mgs.parts != 0) {
    throw InvalidArgument("encoder.map_height must be divisible by mgs.parts");
  }
  if (!(optim.learning_rate > 0.0) || !(optim.momentum >= 0.0 && optim.momentum < 1.0) ||
      !(optim.weight_decay >= 0.0) || optim.epochs < 0 || decay_step < 0) {
    throw InvalidArgument("optim: need lr > 0, momentum in [0, 1), weight_decay >= 0, epochs >= 0, decay_step >= 0");
  }
  if (!(triplet_margin >= 0.0)) throw InvalidArgument("ablation.triplet_margin must be >= 0");
  if (!(center_update_rate > 0.0 && center_update_rate <= 1.0)) {
    throw InvalidArgument("ablation.center_update_rate must lie in (0, 1]");
  }
}

StepDecay RunConfig::schedule() const {
  return decay_step > 0 ? StepDecay(optim.learning_rate, decay_step) : StepDecay::proportional(optim);
}

RunConfig preset_config(std::string_view name) {
  RunConfig cfg;
  if (name == "regdb-profile") return cfg;
  if (name == "sysu-profile") {
    cfg.mgs.alpha = 0.2;
    cfg.mgs.gamma = {1.0, 1.0, 0.1, 2.0, 0.1};
    cfg.mgs.beta = 0.7;
    cfg.batch = {6, 8, 8};
    return cfg;
  }
  throw InvalidArgument("unknown preset '" + std::string(name) + "' (sysu-profile, regdb-profile)");
}

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_value(std::string_view s) {
  T out{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw InvalidArgument("cannot parse '" + std::string(s) + "' as a number");
  }
  return out;
}

bool parse_bool(std::string_view s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw InvalidArgument("expected true or false, got '" + std::string(s) + "'");
}

struct Key {
  std::string section;
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <class T>
Key number_key(std::string section, std::string name, std::function<T&(RunConfig&)> ref) {
  return {std::move(section), std::move(name),
          [ref](const RunConfig& c) {
            T v = ref(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(v);
            } else {
              return std::to_string(v);
            }
          },
          [ref](RunConfig& c, std::string_view s) { ref(c) = parse_value<T>(s); }};
}

#define CMEMD_NUM(section, name, type, expr) \
  number_key<type>(section, name, [](RunConfig& c) -> type& { return expr; })

#define CMEMD_BOOL(section, name, expr)                                       \
  Key{section, name, [](const RunConfig& c) { return std::string((expr) ? "true" : "false"); }, \
      [](RunConfig& c, std::string_view s) { (expr) = parse_bool(s); }}

#define CMEMD_STR(section, name, expr)                                  \
  Key{section, name, [](const RunConfig& c) { return std::string(expr); }, \
      [](RunConfig& c, std::string_view s) { (expr) = std::string(s); }}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      CMEMD_NUM("data", "num_identities", int, c.data.synth.num_identities),
      CMEMD_NUM("data", "num_test_identities", int, c.data.synth.num_test_identities),
      CMEMD_NUM("data", "dim", int, c.data.synth.dim),
      CMEMD_NUM("data", "center_scale", double, c.data.synth.center_scale),
      CMEMD_NUM("data", "modality_offset_scale", double, c.data.synth.modality_offset_scale),
      CMEMD_NUM("data", "modality_transform_seed", std::uint64_t, c.data.synth.modality_transform_seed),
      CMEMD_NUM("data", "modality_transform_strength", double, c.data.synth.modality_transform_strength),
      CMEMD_NUM("data", "intra_identity_noise", double, c.data.synth.intra_identity_noise),
      CMEMD_NUM("data", "noisy_identity_fraction", double, c.data.synth.noisy_identity_fraction),
      CMEMD_NUM("data", "noisy_identity_factor", double, c.data.synth.noisy_identity_factor),
      CMEMD_NUM("data", "samples_per_identity_per_modality", int, c.data.synth.samples_per_identity_per_modality),
      CMEMD_NUM("data", "seed", std::uint64_t, c.data.synth.seed),
      CMEMD_STR("data", "train_file", c.data.train_file),
      CMEMD_STR("data", "test_file", c.data.test_file),
      CMEMD_NUM("encoder", "shallow_width", int, c.encoder.shallow_width),
      CMEMD_NUM("encoder", "trunk_width", int, c.encoder.trunk_width),
      CMEMD_NUM("encoder", "map_height", int, c.encoder.map_height),
      CMEMD_NUM("encoder", "map_width", int, c.encoder.map_width),
      CMEMD_NUM("encoder", "map_channels", int, c.encoder.map_channels),
      CMEMD_NUM("mgs", "parts", int, c.mgs.parts),
      CMEMD_NUM("mgs", "alpha", double, c.mgs.alpha),
      Key{"mgs", "gamma",
          [](const RunConfig& c) {
            std::string s;
            for (std::size_t i = 0; i < c.mgs.gamma.size(); ++i) {
              s += (i ? "," : "") + format_double(c.mgs.gamma[i]);
            }
            return s;
          },
          [](RunConfig& c, std::string_view s) {
            std::array<double, 5> g{};
            std::size_t n = 0;
            while (true) {
              const auto comma = s.find(',');
              std::string_view item = s.substr(0, comma);
              while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
              while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
              if (n == g.size()) throw InvalidArgument("gamma takes exactly 5 comma-separated values");
              g[n++] = parse_value<double>(item);
              if (comma == std::string_view::npos) break;
              s.remove_prefix(comma + 1);
            }
            if (n != g.size()) throw InvalidArgument("gamma takes exactly 5 comma-separated values");
            c.mgs.gamma = g;
          }},
      CMEMD_NUM("mgs", "beta", double, c.mgs.beta),
      CMEMD_NUM("mgs", "gem_p", double, c.mgs.gem.p),
      CMEMD_BOOL("mgs", "trainable_part_weights", c.trainable_part_weights),
      CMEMD_NUM("sinkhorn", "epsilon", double, c.sinkhorn.epsilon),
      CMEMD_NUM("sinkhorn", "max_iterations", int, c.sinkhorn.max_iterations),
      CMEMD_NUM("sinkhorn", "tolerance", double, c.sinkhorn.tolerance),
      CMEMD_BOOL("sinkhorn", "normalize_cost", c.sinkhorn.normalize_cost),
      CMEMD_NUM("batch", "identities", int, c.batch.identities),
      CMEMD_NUM("batch", "visible_per_identity", int, c.batch.visible_per_identity),
      CMEMD_NUM("batch", "thermal_per_identity", int, c.batch.thermal_per_identity),
      CMEMD_NUM("optim", "learning_rate", double, c.optim.learning_rate),
      CMEMD_NUM("optim", "momentum", double, c.optim.momentum),
      CMEMD_NUM("optim", "weight_decay", double, c.optim.weight_decay),
      CMEMD_NUM("optim", "epochs", int, c.optim.epochs),
      CMEMD_NUM("optim", "decay_step", int, c.decay_step),
      CMEMD_BOOL("ablation", "enable_cm_emd", c.enable_cm_emd),
      CMEMD_BOOL("ablation", "enable_cm_dl", c.enable_cm_dl),
      Key{"ablation", "weight_mode", [](const RunConfig& c) { return std::string(to_string(c.weight_mode)); },
          [](RunConfig& c, std::string_view s) { c.weight_mode = parse_weight_mode(s); }},
      Key{"ablation", "baseline_loss", [](const RunConfig& c) { return std::string(to_string(c.baseline_loss)); },
          [](RunConfig& c, std::string_view s) { c.baseline_loss = parse_baseline_loss(s); }},
      CMEMD_NUM("ablation", "triplet_margin", double, c.triplet_margin),
      CMEMD_NUM("ablation", "center_update_rate", double, c.center_update_rate),
      CMEMD_BOOL("ablation", "l2_normalize", c.l2_normalize),
      CMEMD_NUM("run", "seed", std::uint64_t, c.seed),
  };
  return table;
}

#undef CMEMD_NUM
#undef CMEMD_BOOL
#undef CMEMD_STR

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::set<std::string> sections;
  for (const Key& k : keys()) sections.insert(k.section);
  std::set<std::string> seen;
  std::string section;
  std::istringstream is(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    std::string_view line(raw);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(line_no, "unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (sections.count(section) == 0) throw ParseError(line_no, "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(line_no, "expected 'key = value'");
    if (section.empty()) throw ParseError(line_no, "key outside of any [section]");
    const std::string name(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    const std::string full = section + "." + name;
    const Key* key = nullptr;
    for (const Key& k : keys()) {
      if (k.section == section && k.name == name) key = &k;
    }
    if (key == nullptr) throw ParseError(line_no, "unknown key '" + full + "'");
    if (!seen.insert(full).second) throw ParseError(line_no, "duplicate key '" + full + "'");
    try {
      key->set(cfg, value);
    } catch (const InvalidArgument& e) {
      throw ParseError(line_no, full + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    apply_config_text(cfg, ss.str());
  } catch (const ParseError& e) {
    throw ParseError(path.string(), e.line(), e.detail());
  }
}

std::string to_config_text(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const Key& k : keys()) {
    if (k.section != section) {
      if (!section.empty()) out += '\n';
      section = k.section;
      out += "[" + section + "]\n";
    }
    out += k.name + " = " + k.get(cfg) + "\n";
  }
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(to_config_text(cfg)); }

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

ObjectiveConfig objective_config(const RunConfig& cfg) {
  ObjectiveConfig obj;
  obj.mgs = cfg.mgs;
  obj.emd.sinkhorn = cfg.sinkhorn;
  obj.emd.weight_mode = cfg.weight_mode;
  obj.emd.l2_normalize = cfg.l2_normalize;
  obj.triplet_margin = cfg.triplet_margin;
  if (!cfg.enable_cm_emd) {
    obj.alignment = AlignmentLoss::kNone;
  } else {
    obj.alignment = cfg.baseline_loss == BaselineLoss::kKl ? AlignmentLoss::kKl : AlignmentLoss::kCmEmd;
  }
  if (!cfg.enable_cm_dl) {
    obj.discrimination = DiscriminationLoss::kNone;
  } else if (cfg.baseline_loss == BaselineLoss::kCenter) {
    obj.discrimination = DiscriminationLoss::kCenter;
  } else if (cfg.baseline_loss == BaselineLoss::kTriplet) {
    obj.discrimination = DiscriminationLoss::kTriplet;
  } else {
    obj.discrimination = DiscriminationLoss::kCmDl;
  }
  return obj;
}

}  // namespace cmemd
