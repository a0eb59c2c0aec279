#pragma once

#include "trajdistill/buffer.hpp"
#include "trajdistill/data.hpp"
#include "trajdistill/distill.hpp"
#include "trajdistill/eval.hpp"
#include "trajdistill/model.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace trajdistill {

/// Invalid configuration; the message starts with the offending field path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  static constexpr int kFormatVersion = 1;

  struct Run {
    std::uint64_t seed = 0;
    std::string name = "run";
  } run;

  struct Data {
    std::string source = "blobs";  // blobs | idx | csv
    int classes = 3;
    int per_class = 60;
    int test_per_class = 40;
    std::string shape = "16";  // "d" or "channels,h,w"
    double spread = 0.3;
    std::string train_images, train_labels, test_images, test_labels;
    std::string train_csv, test_csv;
  } data;

  struct Model {
    std::string kind = "mlp";
    int depth = 1;
    int width = 32;
  } model;

  struct Buffer {
    int experts = 2;
    int epochs = 20;
    double eta = 0.01;
    double momentum = 0.9;
    int batch_size = 32;
    bool halve_lr = true;
    bool smooth = true;
    double mu = 1.0;
    double k_target = 1.0;
    int ramp = 5;
  } buffer;

  struct Distill {
    std::string buffer;  // directory written by the buffer command
    std::string init = "representative";  // representative | random
    std::string ablate = "none";          // none | vanilla-mtt
    int expert_epochs = 2;
    int student_steps = 10;
    int max_start = 5;
    int ipc = 1;
    std::string beta = "equal";
    double rho = 0.1;
    double vartheta = 8.0;
    double alpha0 = 0.01;
    int outer_iters = 200;
    double lr_images = 1.0;
    double lr_alpha = 1e-5;
    bool balance = true;
    bool intermediate = true;
    int syn_batch = 0;
    int eval_every = 0;  // 0 disables intermediate evaluation rows
  } distill;

  struct Augment {
    bool flip = false;
    bool shift = false;
    bool scale = false;
  } augment;

  struct Eval {
    std::string synthetic;        // directory written by the distill command
    std::string baselines;        // comma list of random, full
    std::string seeds = "0,1,2";  // evaluation seed indices
    int iters = 300;
    double lr = 0.0;
    int halve_at = -1;
    int batch = 0;
    std::string arch = "same";  // same | mlp
    int width = 0;              // mlp width when arch = mlp; 0 = model.width
  } eval;

  struct Gradcheck {
    double eps = 1e-5;
    double first_tol = 1e-6;
    double second_tol = 1e-4;
    int steps = 3;
  } gradcheck;
};

/// One typed field of the flat config schema.
struct ConfigField {
  std::string section;
  std::string key;
  std::string type;  // int, uint, float, bool, string, or "a|b|c" for enums
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;  // throws ConfigError

  std::string path() const { return section + "." + key; }
};

const std::vector<ConfigField>& config_schema();
const ConfigField* find_field(const std::string& path);

/// Sets `path` (section.key) from text. Throws ConfigError on unknown keys
/// or ill-typed values.
void set_config_value(RunConfig& cfg, const std::string& path, const std::string& value);

/// Sectioned key = value text. `#` and `;` start comments.
RunConfig parse_config_text(const std::string& text, RunConfig base = {});
/// Reads either the text format or a JSON echo written by config_to_json.
RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {});

nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {});
std::string config_to_text(const RunConfig& cfg);

/// Cross-field checks (enum values, positivity, shape syntax).
void validate_config(const RunConfig& cfg);

// Resolved module settings.
Shape sample_shape(const RunConfig& cfg);
/// Network for the [model] section on samples of `input_shape`.
ModelSpec model_spec(const RunConfig& cfg, const Shape& input_shape, int classes);
/// Evaluation network: the trained spec, or an MLP when eval.arch = mlp.
ModelSpec eval_spec(const RunConfig& cfg, const ModelSpec& trained);
ExpertOptimizer expert_optimizer(const RunConfig& cfg);
SmoothnessConfig smoothness(const RunConfig& cfg);
AugmentationPolicy augmentation(const RunConfig& cfg);
DistillConfig distill_config(const RunConfig& cfg);
EvalOptions eval_options(const RunConfig& cfg);
std::vector<std::uint64_t> eval_seed_indices(const RunConfig& cfg);

/// Train and test sets named by the [data] section.
std::pair<LabeledDataset, LabeledDataset> load_datasets(const RunConfig& cfg);

// Named substreams of the root seed.
std::uint64_t data_seed(const RunConfig& cfg);
std::uint64_t expert_seed(const RunConfig& cfg, int expert);
std::uint64_t distill_seed(const RunConfig& cfg);
std::uint64_t eval_seed(const RunConfig& cfg, std::uint64_t index);

}  // namespace trajdistill
