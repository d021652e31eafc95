#pragma once

#include "hair/config.hpp"
#include "hair/degradations.hpp"
#include "hair/metrics.hpp"
#include "hair/model.hpp"

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace hair {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

template <typename Scalar>
struct OptimState {
  std::vector<Tensor<Scalar>> m;  // first moments, shaped like the parameters
  std::vector<Tensor<Scalar>> v;  // second moments
  std::int64_t step = 0;
  AdamWHyper hyper;
};

template <typename Scalar>
OptimState<Scalar> make_optim_state(const std::vector<Tensor<Scalar>>& params, AdamWHyper hyper = {});

/// One AdamW update in place: p <- p (1 - lr wd), then the bias-corrected
/// Adam step. `names` (optional) label parameters in diagnostics. Throws
/// NonFiniteError before touching anything when a gradient is NaN/Inf.
template <typename Scalar>
void adamw_step(std::vector<Tensor<Scalar>*> params, const std::vector<Tensor<Scalar>>& grads,
                OptimState<Scalar>& state, double lr, const std::vector<std::string>& names = {});

/// Convenience overload: updates the model's leaves from their accumulated
/// gradients.
template <typename Scalar>
void adamw_step(const std::vector<NamedParam<Scalar>>& params, OptimState<Scalar>& state, double lr);

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Two-phase constant schedule: `base` before `drop_at`, `base / 10` from
/// `drop_at` until `total`. The unit is whatever the caller counts (epochs
/// or steps).
struct LrSchedule {
  double base = 2e-4;
  std::int64_t total = 160;
  std::int64_t drop_at = 150;

  /// Throws std::out_of_range outside [0, total).
  double operator()(std::int64_t t) const;

  /// The last sixteenth of `total` runs at base / 10 (160 -> drop at 150).
  static LrSchedule scaled(std::int64_t total, double base);
};

/// Epoch-indexed under the paper profile, step-indexed under the toy profile.
LrSchedule lr_schedule(const RunConfig& config);
double lr_at_step(const RunConfig& config, std::int64_t step);

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<Image> train;
  std::vector<Image> val;
};

/// Procedural images seeded from `data_seed`, or PPM files read from the
/// `clean_source` directory (sorted by name; the first `val_images` are held
/// out, the next `train_images` are used for training).
Dataset make_dataset(const RunConfig& config);

/// Every validation image degraded by every task in `tasks` with fixed
/// per-(task, image) seeds. Ids are "<label>/<index>".
std::vector<Sample> validation_samples(const RunConfig& config, const Dataset& data,
                                       const std::vector<TaskSpec>& tasks);

struct Batch {
  Tensor<float> degraded;  // [B, 3, patch, patch]
  Tensor<float> clean;
  std::vector<std::string> labels;
};

/// Deterministic in (config.seed, step).
Batch make_batch(const RunConfig& config, const Dataset& data, std::int64_t step);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

/// Binary layout: "HAIR", u32 version, u32 length + UTF-8 config block, then
/// records until EOF: u32 name length, name, u32 rank, u32 dims, f32 data.
/// All integers and floats little-endian. Optimizer moments are stored as
/// "adam.m/<name>" and "adam.v/<name>" records.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t version = kVersion;
  std::string config;  // RunConfig text followed by "state.*" lines
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
std::vector<char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<char>& bytes);

Checkpoint make_checkpoint(const RunConfig& config, const Model<float>& model, const OptimState<float>* optim,
                           std::int64_t step);
RunConfig checkpoint_config(const Checkpoint& ckpt);
std::int64_t checkpoint_step(const Checkpoint& ckpt);

/// Copies the checkpoint's tensors into `model`. Throws CheckpointError naming
/// the first missing tensor or the first shape mismatch.
void load_parameters(Model<float>& model, const Checkpoint& ckpt);
Model<float> restore_model(const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

/// Restores one [3, H, W] image (any H, W) and clamps to [0, 1].
Image restore_image(const Model<float>& model, const Image& degraded);

/// GIV of every degraded sample, labelled by its chain.
std::vector<LabeledGiv> compute_givs(const Model<float>& model, const std::vector<Sample>& samples);

/// Per-label PSNR/SSIM of restored vs clean.
MetricsReport evaluate(const Model<float>& model, const std::vector<Sample>& samples);
/// Per-label PSNR/SSIM of degraded vs clean.
MetricsReport evaluate_degraded(const std::vector<Sample>& samples);

struct LogRow {
  std::int64_t step = 0;  // completed optimizer steps
  double lr = 0.0;
  double train_loss = 0.0;  // mean since the previous row
  bool has_eval = false;
  MetricsReport eval;
};

struct TrainOptions {
  /// When non-empty, the final checkpoint (or the last good one on abort)
  /// and the CSV log are written here.
  std::string checkpoint_path;
  std::string log_path;
  std::function<void(const LogRow&)> on_log;
};

struct TrainResult {
  Model<float> model;
  OptimState<float> optim;
  std::int64_t steps = 0;
  std::vector<double> losses;  // per step
  std::vector<LogRow> log;
  std::string log_csv;
};

/// Seeded loop: batch -> forward -> L1 -> backward -> AdamW, with periodic
/// validation. Throws NonFiniteError on a non-finite loss after saving the
/// last good checkpoint.
TrainResult train_loop(const RunConfig& config, const Dataset& data, const TrainOptions& options = {});

/// "step,lr,train_loss,psnr_<label>,ssim_<label>,..." with empty metric cells
/// on rows without validation.
std::string log_csv_header(const RunConfig& config);
std::string log_csv_row(const RunConfig& config, const LogRow& row);

}  // namespace hair
