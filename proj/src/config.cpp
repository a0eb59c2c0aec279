#include "trajdistill/config.hpp"

#include "trajdistill/rng.hpp"
#include "trajdistill/serialize.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace trajdistill {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& path, const std::string& expected, const std::string& text) {
  throw ConfigError(path + ": expected " + expected + ", got '" + text + "'");
}

template <class T>
T parse_integer(const std::string& path, const std::string& text, const char* what) {
  const std::string t = trim(text);
  T v{};
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty()) bad_value(path, what, text);
  return v;
}

double parse_double(const std::string& path, const std::string& text) {
  const std::string t = trim(text);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size() || !std::isfinite(v)) bad_value(path, "a finite number", text);
  return v;
}

bool parse_bool(const std::string& path, const std::string& text) {
  std::string t = trim(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "true" || t == "on" || t == "yes" || t == "1") return true;
  if (t == "false" || t == "off" || t == "no" || t == "0") return false;
  bad_value(path, "on/off", text);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

using Fields = std::vector<ConfigField>;

template <class T>
void add(Fields& fs, const char* section, const char* key, T& (*ref)(RunConfig&), std::string enum_values = "") {
  ConfigField f;
  f.section = section;
  f.key = key;
  const std::string path = f.path();
  if constexpr (std::is_same_v<T, int>) {
    f.type = "int";
    f.set = [ref, path](RunConfig& c, const std::string& s) { ref(c) = parse_integer<int>(path, s, "an integer"); };
    f.get = [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); };
  } else if constexpr (std::is_same_v<T, std::uint64_t>) {
    f.type = "uint";
    f.set = [ref, path](RunConfig& c, const std::string& s) {
      ref(c) = parse_integer<std::uint64_t>(path, s, "a non-negative integer");
    };
    f.get = [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); };
  } else if constexpr (std::is_same_v<T, double>) {
    f.type = "float";
    f.set = [ref, path](RunConfig& c, const std::string& s) { ref(c) = parse_double(path, s); };
    f.get = [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); };
  } else if constexpr (std::is_same_v<T, bool>) {
    f.type = "bool";
    f.set = [ref, path](RunConfig& c, const std::string& s) { ref(c) = parse_bool(path, s); };
    f.get = [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "on" : "off"); };
  } else {
    static_assert(std::is_same_v<T, std::string>);
    f.type = enum_values.empty() ? "string" : enum_values;
    f.set = [ref, path, enum_values](RunConfig& c, const std::string& s) {
      const std::string t = trim(s);
      if (!enum_values.empty()) {
        std::stringstream ss(enum_values);
        std::string opt;
        bool ok = false;
        while (std::getline(ss, opt, '|')) ok = ok || opt == t;
        if (!ok) bad_value(path, "one of " + enum_values, s);
      }
      ref(c) = t;
    };
    f.get = [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); };
  }
  fs.push_back(std::move(f));
}

#define TD_FIELD(fs, sec, key, member, ...) \
  add(fs, sec, key, +[](RunConfig& c) -> auto& { return c.member; } __VA_OPT__(, ) __VA_ARGS__)

Fields build_schema() {
  Fields fs;
  TD_FIELD(fs, "run", "seed", run.seed);
  TD_FIELD(fs, "run", "name", run.name);

  TD_FIELD(fs, "data", "source", data.source, "blobs|idx|csv");
  TD_FIELD(fs, "data", "classes", data.classes);
  TD_FIELD(fs, "data", "per_class", data.per_class);
  TD_FIELD(fs, "data", "test_per_class", data.test_per_class);
  TD_FIELD(fs, "data", "shape", data.shape);
  TD_FIELD(fs, "data", "spread", data.spread);
  TD_FIELD(fs, "data", "train_images", data.train_images);
  TD_FIELD(fs, "data", "train_labels", data.train_labels);
  TD_FIELD(fs, "data", "test_images", data.test_images);
  TD_FIELD(fs, "data", "test_labels", data.test_labels);
  TD_FIELD(fs, "data", "train_csv", data.train_csv);
  TD_FIELD(fs, "data", "test_csv", data.test_csv);

  TD_FIELD(fs, "model", "kind", model.kind, "mlp|convnet");
  TD_FIELD(fs, "model", "depth", model.depth);
  TD_FIELD(fs, "model", "width", model.width);

  TD_FIELD(fs, "buffer", "experts", buffer.experts);
  TD_FIELD(fs, "buffer", "epochs", buffer.epochs);
  TD_FIELD(fs, "buffer", "eta", buffer.eta);
  TD_FIELD(fs, "buffer", "momentum", buffer.momentum);
  TD_FIELD(fs, "buffer", "batch_size", buffer.batch_size);
  TD_FIELD(fs, "buffer", "halve_lr", buffer.halve_lr);
  TD_FIELD(fs, "buffer", "smooth", buffer.smooth);
  TD_FIELD(fs, "buffer", "mu", buffer.mu);
  TD_FIELD(fs, "buffer", "k_target", buffer.k_target);
  TD_FIELD(fs, "buffer", "ramp", buffer.ramp);

  TD_FIELD(fs, "distill", "buffer", distill.buffer);
  TD_FIELD(fs, "distill", "init", distill.init, "representative|random");
  TD_FIELD(fs, "distill", "ablate", distill.ablate, "none|vanilla-mtt");
  TD_FIELD(fs, "distill", "expert_epochs", distill.expert_epochs);
  TD_FIELD(fs, "distill", "student_steps", distill.student_steps);
  TD_FIELD(fs, "distill", "max_start", distill.max_start);
  TD_FIELD(fs, "distill", "ipc", distill.ipc);
  TD_FIELD(fs, "distill", "beta", distill.beta, "equal|scaled");
  TD_FIELD(fs, "distill", "rho", distill.rho);
  TD_FIELD(fs, "distill", "vartheta", distill.vartheta);
  TD_FIELD(fs, "distill", "alpha0", distill.alpha0);
  TD_FIELD(fs, "distill", "outer_iters", distill.outer_iters);
  TD_FIELD(fs, "distill", "lr_images", distill.lr_images);
  TD_FIELD(fs, "distill", "lr_alpha", distill.lr_alpha);
  TD_FIELD(fs, "distill", "balance", distill.balance);
  TD_FIELD(fs, "distill", "intermediate", distill.intermediate);
  TD_FIELD(fs, "distill", "syn_batch", distill.syn_batch);
  TD_FIELD(fs, "distill", "eval_every", distill.eval_every);

  TD_FIELD(fs, "augment", "flip", augment.flip);
  TD_FIELD(fs, "augment", "shift", augment.shift);
  TD_FIELD(fs, "augment", "scale", augment.scale);

  TD_FIELD(fs, "eval", "synthetic", eval.synthetic);
  TD_FIELD(fs, "eval", "baselines", eval.baselines);
  TD_FIELD(fs, "eval", "seeds", eval.seeds);
  TD_FIELD(fs, "eval", "iters", eval.iters);
  TD_FIELD(fs, "eval", "lr", eval.lr);
  TD_FIELD(fs, "eval", "halve_at", eval.halve_at);
  TD_FIELD(fs, "eval", "batch", eval.batch);
  TD_FIELD(fs, "eval", "arch", eval.arch, "same|mlp");
  TD_FIELD(fs, "eval", "width", eval.width);

  TD_FIELD(fs, "gradcheck", "eps", gradcheck.eps);
  TD_FIELD(fs, "gradcheck", "first_tol", gradcheck.first_tol);
  TD_FIELD(fs, "gradcheck", "second_tol", gradcheck.second_tol);
  TD_FIELD(fs, "gradcheck", "steps", gradcheck.steps);
  return fs;
}

#undef TD_FIELD

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

const std::vector<ConfigField>& config_schema() {
  static const Fields schema = build_schema();
  return schema;
}

const ConfigField* find_field(const std::string& path) {
  for (const auto& f : config_schema())
    if (f.path() == path) return &f;
  return nullptr;
}

void set_config_value(RunConfig& cfg, const std::string& path, const std::string& value) {
  const ConfigField* f = find_field(path);
  if (!f) throw ConfigError(path + ": unknown key");
  f->set(cfg, value);
}

RunConfig parse_config_text(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      const bool known = std::any_of(config_schema().begin(), config_schema().end(),
                                     [&](const ConfigField& f) { return f.section == section; });
      if (!known) throw ConfigError(section + ": unknown section (line " + std::to_string(lineno) + ")");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside of a section");
    const std::string path = section + "." + trim(line.substr(0, eq));
    try {
      set_config_value(base, path, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(e.what()) + " (line " + std::to_string(lineno) + ")");
    }
  }
  return base;
}

nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json sections = nlohmann::json::object();
  for (const auto& f : config_schema()) sections[f.section][f.key] = f.get(cfg);
  return {{"format_version", RunConfig::kFormatVersion}, {"config", sections}};
}

RunConfig config_from_json(const nlohmann::json& j, RunConfig base) {
  if (!j.is_object() || !j.contains("config")) throw ConfigError("config: JSON echo lacks a 'config' object");
  const int version = j.value("format_version", -1);
  if (version != RunConfig::kFormatVersion) {
    throw ConfigError("format_version: expected " + std::to_string(RunConfig::kFormatVersion) + ", got " +
                      std::to_string(version));
  }
  for (const auto& [section, keys] : j.at("config").items()) {
    if (!keys.is_object()) throw ConfigError(section + ": expected an object of keys");
    for (const auto& [key, value] : keys.items()) {
      const std::string text = value.is_string() ? value.get<std::string>() : value.dump();
      set_config_value(base, section + "." + key, text);
    }
  }
  return base;
}

RunConfig load_config_file(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
    }
    return config_from_json(j, std::move(base));
  }
  return parse_config_text(text, std::move(base));
}

std::string config_to_text(const RunConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : config_schema()) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(cfg) << '\n';
  }
  return os.str();
}

Shape sample_shape(const RunConfig& cfg) {
  Shape s;
  for (const auto& part : split_list(cfg.data.shape)) {
    const auto v = parse_integer<Index>("data.shape", part, "a comma list of positive integers");
    if (v < 1) bad_value("data.shape", "a comma list of positive integers", cfg.data.shape);
    s.push_back(v);
  }
  if (s.size() != 1 && s.size() != 3) bad_value("data.shape", "'d' or 'channels,h,w'", cfg.data.shape);
  return s;
}

std::vector<std::uint64_t> eval_seed_indices(const RunConfig& cfg) {
  std::vector<std::uint64_t> out;
  for (const auto& part : split_list(cfg.eval.seeds))
    out.push_back(parse_integer<std::uint64_t>("eval.seeds", part, "a comma list of seed indices"));
  return out;
}

void validate_config(const RunConfig& cfg) {
  auto require = [](bool ok, const std::string& path, const std::string& why) {
    if (!ok) throw ConfigError(path + ": " + why);
  };
  if (cfg.data.source == "blobs") {
    require(cfg.data.classes >= 2, "data.classes", "must be >= 2");
    require(cfg.data.per_class >= 1, "data.per_class", "must be >= 1");
    require(cfg.data.test_per_class >= 1, "data.test_per_class", "must be >= 1");
    require(cfg.data.spread >= 0.0, "data.spread", "must be >= 0");
    sample_shape(cfg);
  } else if (cfg.data.source == "idx") {
    for (const auto* p : {&cfg.data.train_images, &cfg.data.train_labels, &cfg.data.test_images,
                          &cfg.data.test_labels})
      require(!p->empty(), "data.train_images", "idx source needs train/test image and label paths");
  } else {
    require(!cfg.data.train_csv.empty(), "data.train_csv", "csv source needs a path");
    require(!cfg.data.test_csv.empty(), "data.test_csv", "csv source needs a path");
  }
  require(cfg.model.depth >= 1, "model.depth", "must be >= 1");
  require(cfg.model.width >= 1, "model.width", "must be >= 1");
  require(cfg.buffer.experts >= 1, "buffer.experts", "must be >= 1");
  require(cfg.buffer.epochs >= 1, "buffer.epochs", "must be >= 1");
  require(cfg.buffer.eta > 0.0, "buffer.eta", "must be > 0");
  require(cfg.buffer.momentum >= 0.0 && cfg.buffer.momentum < 1.0, "buffer.momentum", "must lie in [0, 1)");
  require(cfg.buffer.batch_size >= 1, "buffer.batch_size", "must be >= 1");
  require(cfg.buffer.mu >= 0.0, "buffer.mu", "must be >= 0");
  require(cfg.buffer.k_target > 0.0, "buffer.k_target", "must be > 0");
  require(cfg.buffer.ramp >= 0, "buffer.ramp", "must be >= 0");
  require(cfg.distill.eval_every >= 0, "distill.eval_every", "must be >= 0");
  require(cfg.eval.iters >= 1, "eval.iters", "must be >= 1");
  require(cfg.eval.batch >= 0, "eval.batch", "must be >= 0");
  require(cfg.eval.width >= 0, "eval.width", "must be >= 0");
  require(eval_seed_indices(cfg).size() >= 3, "eval.seeds", "need at least 3 evaluation seeds");
  for (const auto& b : split_list(cfg.eval.baselines))
    require(b == "random" || b == "full", "eval.baselines", "unknown baseline '" + b + "' (random, full)");
  require(cfg.gradcheck.eps > 0.0, "gradcheck.eps", "must be > 0");
  require(cfg.gradcheck.steps >= 1 && cfg.gradcheck.steps <= 3, "gradcheck.steps", "must lie in [1, 3]");
  try {
    distill_config(cfg).validate(std::max(cfg.buffer.epochs, cfg.distill.max_start + cfg.distill.expert_epochs));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

ModelSpec model_spec(const RunConfig& cfg, const Shape& input_shape, int classes) {
  ModelSpec s;
  s.kind = parse_model_kind(cfg.model.kind);
  s.depth = cfg.model.depth;
  s.width = cfg.model.width;
  s.input_shape = input_shape;
  s.num_classes = classes;
  return s;
}

ModelSpec eval_spec(const RunConfig& cfg, const ModelSpec& trained) {
  if (cfg.eval.arch == "same") return trained;
  ModelSpec s = trained;
  s.kind = ModelKind::mlp;
  s.depth = 1;
  s.width = cfg.eval.width > 0 ? cfg.eval.width : cfg.model.width;
  return s;
}

ExpertOptimizer expert_optimizer(const RunConfig& cfg) {
  ExpertOptimizer o;
  o.eta = cfg.buffer.eta;
  o.gamma = cfg.buffer.momentum;
  o.batch_size = cfg.buffer.batch_size;
  o.halve_lr = cfg.buffer.halve_lr;
  return o;
}

SmoothnessConfig smoothness(const RunConfig& cfg) {
  if (!cfg.buffer.smooth) return SmoothnessConfig::off();
  return SmoothnessConfig::standard(cfg.buffer.ramp, cfg.buffer.mu, cfg.buffer.k_target);
}

AugmentationPolicy augmentation(const RunConfig& cfg) {
  AugmentationPolicy p;
  p.flip = cfg.augment.flip;
  p.shift = cfg.augment.shift;
  p.scale = cfg.augment.scale;
  return p;
}

DistillConfig distill_config(const RunConfig& cfg) {
  DistillConfig d;
  d.expert_epochs = cfg.distill.expert_epochs;
  d.student_steps = cfg.distill.student_steps;
  d.max_start = cfg.distill.max_start;
  d.ipc = cfg.distill.ipc;
  d.beta = parse_beta_mode(cfg.distill.beta);
  d.rho = cfg.distill.rho;
  d.vartheta = cfg.distill.vartheta;
  d.alpha0 = cfg.distill.alpha0;
  d.outer_iters = cfg.distill.outer_iters;
  d.lr_images = cfg.distill.lr_images;
  d.lr_alpha = cfg.distill.lr_alpha;
  d.policy = augmentation(cfg);
  d.seed = distill_seed(cfg);
  d.balance = cfg.distill.balance;
  d.intermediate = cfg.distill.intermediate;
  d.syn_batch = cfg.distill.syn_batch;
  return cfg.distill.ablate == "vanilla-mtt" ? d.vanilla() : d;
}

EvalOptions eval_options(const RunConfig& cfg) {
  EvalOptions o;
  o.iters = cfg.eval.iters;
  o.lr = cfg.eval.lr;
  o.halve_at = cfg.eval.halve_at;
  o.policy = augmentation(cfg);
  o.batch = cfg.eval.batch;
  return o;
}

std::pair<LabeledDataset, LabeledDataset> load_datasets(const RunConfig& cfg) {
  if (cfg.data.source == "blobs") {
    const LabeledDataset all = gen_blobs(cfg.data.classes, cfg.data.per_class + cfg.data.test_per_class,
                                         sample_shape(cfg), cfg.data.spread, data_seed(cfg));
    return split_per_class(all, cfg.data.per_class);
  }
  if (cfg.data.source == "idx") {
    return {load_idx(cfg.data.train_images, cfg.data.train_labels),
            load_idx(cfg.data.test_images, cfg.data.test_labels)};
  }
  const Shape shape = trim(cfg.data.shape).empty() ? Shape{} : sample_shape(cfg);
  LabeledDataset train = load_csv(cfg.data.train_csv, shape).data;
  LabeledDataset test = load_csv(cfg.data.test_csv, shape).data;
  test.class_count = std::max(test.class_count, train.class_count);
  return {std::move(train), std::move(test)};
}

std::uint64_t data_seed(const RunConfig& cfg) { return derive_seed(cfg.run.seed, "data"); }
std::uint64_t expert_seed(const RunConfig& cfg, int expert) {
  return derive_seed(cfg.run.seed, "buffer", static_cast<std::uint64_t>(expert));
}
std::uint64_t distill_seed(const RunConfig& cfg) { return derive_seed(cfg.run.seed, "distill"); }
std::uint64_t eval_seed(const RunConfig& cfg, std::uint64_t index) { return derive_seed(cfg.run.seed, "eval", index); }

}  // namespace trajdistill
