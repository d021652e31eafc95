#pragma once

#include "hair/degradations.hpp"
#include "hair/model.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hair {

/// Invalid configuration; `line` is 0 when the problem is not tied to a line.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(int line, std::string key, const std::string& message);
  int line() const { return line_; }
  const std::string& key() const { return key_; }
  const std::string& detail() const { return detail_; }

 private:
  int line_;
  std::string key_;
  std::string detail_;
};

/// Sampling rule for one degradation parameter: fixed, uniform over
/// [lo, hi] ("0.4..0.8"), or a uniform choice ("15|25|50").
struct ParamDist {
  enum class Mode { fixed, range, choice } mode = Mode::fixed;
  std::vector<double> values;  // fixed: {v}; range: {lo, hi}; choice: options
  double sample(std::mt19937_64& rng) const;
  std::string serialize() const;
};

struct StageDist {
  DegradationKind kind = DegradationKind::noise;
  std::map<std::string, ParamDist> params;
};

/// A training/evaluation task: a chain of degradations with sampled
/// parameters, e.g. "haze:A=0.7..1.0,t=0.4..0.8" or "noise:sigma=25+haze".
/// Parameters not mentioned use the kind's default distribution.
struct TaskSpec {
  std::string label;  // chain of kind names, e.g. "noise+haze"
  std::vector<StageDist> stages;

  std::vector<DegradationSpec> sample(std::mt19937_64& rng) const;
  std::string serialize() const;
};

TaskSpec parse_task(const std::string& text);
/// ';'-separated task list.
std::vector<TaskSpec> parse_task_list(const std::string& text);

enum class Profile { toy, paper };

/// Everything a run needs, validated before any work starts.
struct RunConfig {
  Profile profile = Profile::toy;

  // model
  Index channels = 8;
  std::vector<int> blocks{1, 1, 1, 1};
  std::vector<int> box_sizes{2, 2, 2, 2};
  std::vector<int> heads{1, 1, 2, 2};
  double expansion = 2.66;
  int split = 3;
  bool hyper = true;
  BlockKind block_kind = BlockKind::transformer;

  // training
  std::uint64_t seed = 0;
  std::int64_t steps = 2000;  // toy profile budget
  std::int64_t epochs = 160;  // paper profile budget
  int batch = 4;
  Index patch = 32;
  double lr = 2e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool flips = true;
  std::int64_t eval_every = 500;
  std::int64_t log_every = 50;

  // data
  std::vector<TaskSpec> tasks;
  std::vector<TaskSpec> composites;
  int train_images = 200;
  int val_images = 50;
  Index image_size = 64;
  std::uint64_t data_seed = 1;
  std::string clean_source = "procedural";

  // outputs
  std::string output_dir = "run";

  ModelDesc model_desc() const;
  /// Optimizer steps for the whole run under this profile.
  std::int64_t total_steps() const;
  std::int64_t steps_per_epoch() const;

  /// Canonical key=value text; parse_config(serialize()) reproduces *this.
  std::string serialize() const;
  /// Range checks shared by the parser and programmatic construction.
  void validate() const;
};

RunConfig toy_profile();
RunConfig paper_profile();

/// Parses the flat `key = value` format (`#` starts a comment). The
/// `profile` key selects the defaults the other keys override. Unknown keys,
/// malformed values and out-of-range settings raise ConfigError naming the
/// line and key.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

std::string to_string(Profile profile);

}  // namespace hair
