#include "virda/config.hpp"

#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

namespace virda {

void TrainConfig::validate() const {
  auto rate = [](double v, const char* name) {
    if (!(v > 0.0)) throw ConfigError(std::string(name) + " must be > 0");
  };
  auto prob = [](double v, const char* name) {
    if (!(v >= 0.0 && v < 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1)");
  };
  rate(lr_heads, "lr_heads");
  rate(lr_vr, "lr_vr");
  rate(adam_eps, "adam_eps");
  prob(beta1, "beta1");
  prob(beta2, "beta2");
  prob(p_mask, "p_mask");
  prob(p_cls, "p_cls");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (losses.unc && passes < 2) throw ConfigError("passes (M) must be >= 2 when unc is enabled");
  if (tau < 0.0 || tau > 1.0) throw ConfigError("tau must lie in [0, 1]");
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (eval_batch < 1) throw ConfigError("eval_batch must be >= 1");
  if (pretrain_epochs < 1 || pretrain_count < 1)
    throw ConfigError("pretrain_epochs and pretrain_count must be >= 1");
  if (!losses.use_vr && losses.any_target())
    throw ConfigError("source_only runs cannot enable target objectives");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("setting '" + key + "': expected a number, got '" + v + "'");
  }
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("setting '" + key + "': expected an integer, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("setting '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (v.empty() || v == "none") return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(to_int(key, trim(item))));
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string fmt_list(const std::vector<int>& v) {
  if (v.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Setting {
  std::string key;
  std::function<void(RunSpec&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunSpec&)> get;
};

#define VIRDA_DOUBLE(name, field)                                                            \
  Setting {                                                                                  \
    name, [](RunSpec& s, const std::string& k, const std::string& v) { s.field = to_double(k, v); }, \
        [](const RunSpec& s) { return fmt(s.field); }                                        \
  }
#define VIRDA_INT(name, field)                                                                 \
  Setting {                                                                                    \
    name,                                                                                      \
        [](RunSpec& s, const std::string& k, const std::string& v) {                           \
          s.field = static_cast<decltype(s.field)>(to_int(k, v));                              \
        },                                                                                     \
        [](const RunSpec& s) { return std::to_string(s.field); }                               \
  }
#define VIRDA_BOOL(name, field)                                                              \
  Setting {                                                                                  \
    name, [](RunSpec& s, const std::string& k, const std::string& v) { s.field = to_bool(k, v); }, \
        [](const RunSpec& s) { return std::string(s.field ? "true" : "false"); }             \
  }
#define VIRDA_STRING(name, field)                                                     \
  Setting {                                                                           \
    name, [](RunSpec& s, const std::string&, const std::string& v) { s.field = v; }, \
        [](const RunSpec& s) { return std::string(s.field); }                         \
  }

const std::vector<Setting>& settings() {
  static const std::vector<Setting> table = {
      VIRDA_INT("seed", train.seed),
      VIRDA_INT("epochs", train.epochs),
      VIRDA_INT("batch_size", train.batch_size),
      VIRDA_INT("passes", train.passes),
      VIRDA_DOUBLE("lr_heads", train.lr_heads),
      VIRDA_DOUBLE("lr_vr", train.lr_vr),
      VIRDA_DOUBLE("beta1", train.beta1),
      VIRDA_DOUBLE("beta2", train.beta2),
      VIRDA_DOUBLE("weight_decay", train.weight_decay),
      VIRDA_DOUBLE("adam_eps", train.adam_eps),
      VIRDA_DOUBLE("p_mask", train.p_mask),
      VIRDA_DOUBLE("p_cls", train.p_cls),
      VIRDA_INT("vr_depth", train.vr_depth),
      VIRDA_INT("patch_exponent", train.patch_exponent),
      VIRDA_INT("mask_hidden", train.mask_hidden),
      VIRDA_INT("coord_reduction", train.coord_reduction),
      VIRDA_BOOL("use_coord", train.use_coord),
      VIRDA_DOUBLE("tau", train.tau),
      VIRDA_DOUBLE("lambda", train.lambda),
      VIRDA_BOOL("lambda_ramp", train.lambda_ramp),
      Setting{"losses",
              [](RunSpec& s, const std::string&, const std::string& v) {
                s.train.losses = LossMask::parse(v);
              },
              [](const RunSpec& s) { return s.train.losses.str(); }},
      VIRDA_DOUBLE("weight_sup", train.weights.sup),
      VIRDA_DOUBLE("weight_adv", train.weights.adv),
      VIRDA_DOUBLE("weight_unc", train.weights.unc),
      VIRDA_DOUBLE("weight_unsup", train.weights.unsup),
      VIRDA_DOUBLE("weight_distrib", train.weights.distrib),
      VIRDA_BOOL("aggregate_unc", train.aggregate_unc),
      VIRDA_INT("intra_warmup_epochs", train.intra_warmup_epochs),
      Setting{"classifier_hidden",
              [](RunSpec& s, const std::string& k, const std::string& v) {
                s.train.classifier_hidden = to_int_list(k, v);
              },
              [](const RunSpec& s) { return fmt_list(s.train.classifier_hidden); }},
      Setting{"disc_hidden",
              [](RunSpec& s, const std::string& k, const std::string& v) {
                s.train.disc_hidden = to_int_list(k, v);
              },
              [](const RunSpec& s) { return fmt_list(s.train.disc_hidden); }},
      Setting{"backbone",
              [](RunSpec& s, const std::string&, const std::string& v) {
                s.train.backbone = parse_arch(v);
              },
              [](const RunSpec& s) { return to_string(s.train.backbone); }},
      Setting{"backbone_weights",
              [](RunSpec& s, const std::string&, const std::string& v) {
                if (v.empty() || v == "none") {
                  s.train.backbone_weights.reset();
                } else {
                  s.train.backbone_weights = v;
                }
              },
              [](const RunSpec& s) {
                return s.train.backbone_weights ? s.train.backbone_weights->string()
                                                : std::string("none");
              }},
      VIRDA_INT("backbone_seed", train.backbone_seed),
      VIRDA_INT("pretrain_epochs", train.pretrain_epochs),
      VIRDA_INT("pretrain_count", train.pretrain_count),
      VIRDA_DOUBLE("augment_rotation", train.augment.rotation_deg),
      VIRDA_DOUBLE("augment_translation", train.augment.translation),
      VIRDA_DOUBLE("augment_brightness", train.augment.brightness),
      VIRDA_DOUBLE("augment_contrast", train.augment.contrast),
      VIRDA_DOUBLE("augment_saturation", train.augment.saturation),
      VIRDA_DOUBLE("augment_hue", train.augment.hue),
      VIRDA_BOOL("source_train_aug", train.source_train_aug),
      VIRDA_INT("eval_batch", train.eval_batch),
      VIRDA_STRING("dataset", data.dataset),
      VIRDA_STRING("source", data.source),
      VIRDA_STRING("target", data.target),
      Setting{"data_root",
              [](RunSpec& s, const std::string&, const std::string& v) { s.data.root = v; },
              [](const RunSpec& s) { return s.data.root.string(); }},
      VIRDA_INT("synth_seed", data.synth_seed),
      VIRDA_INT("synth_train", data.synth_train),
      VIRDA_INT("synth_test", data.synth_test),
      VIRDA_BOOL("shift_invert", data.shift.invert),
      VIRDA_DOUBLE("shift_texture", data.shift.texture_amplitude),
      VIRDA_INT("shift_period", data.shift.texture_period),
      VIRDA_DOUBLE("shift_blur", data.shift.blur_sigma),
      VIRDA_DOUBLE("shift_tint_r", data.shift.tint[0]),
      VIRDA_DOUBLE("shift_tint_g", data.shift.tint[1]),
      VIRDA_DOUBLE("shift_tint_b", data.shift.tint[2]),
      VIRDA_INT("image_size", data.image_size),
  };
  return table;
}

#undef VIRDA_DOUBLE
#undef VIRDA_INT
#undef VIRDA_BOOL
#undef VIRDA_STRING

}  // namespace

void apply_setting(RunSpec& spec, const std::string& key, const std::string& value) {
  for (const auto& s : settings()) {
    if (s.key == key) {
      s.set(spec, key, trim(value));
      return;
    }
  }
  throw ConfigError("unknown setting '" + key + "'");
}

RunSpec parse_run_spec(const std::string& text, const std::string& origin) {
  RunSpec spec;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    try {
      apply_setting(spec, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return spec;
}

RunSpec load_run_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  RunSpec spec = parse_run_spec(ss.str(), path.string());
  // Relative data roots are resolved against the config file location.
  if (!spec.data.root.empty() && spec.data.root.is_relative())
    spec.data.root = path.parent_path() / spec.data.root;
  if (spec.train.backbone_weights && spec.train.backbone_weights->is_relative())
    spec.train.backbone_weights = path.parent_path() / *spec.train.backbone_weights;
  return spec;
}

std::string to_text(const RunSpec& spec) {
  std::ostringstream out;
  for (const auto& s : settings()) out << s.key << " = " << s.get(spec) << "\n";
  return out.str();
}

std::vector<std::string> setting_keys() {
  std::vector<std::string> keys;
  for (const auto& s : settings()) keys.push_back(s.key);
  return keys;
}

}  // namespace virda
