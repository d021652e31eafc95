#include "hair/training.hpp"

#include "hair/image_io.hpp"
#include "hair/ops.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

namespace hair {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <typename Scalar>
OptimState<Scalar> make_optim_state(const std::vector<Tensor<Scalar>>& params, AdamWHyper hyper) {
  OptimState<Scalar> state;
  state.hyper = hyper;
  for (const auto& p : params) {
    state.m.emplace_back(p.shape());
    state.v.emplace_back(p.shape());
  }
  return state;
}

template <typename Scalar>
void adamw_step(std::vector<Tensor<Scalar>*> params, const std::vector<Tensor<Scalar>>& grads,
                OptimState<Scalar>& state, double lr, const std::vector<std::string>& names) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size())
    throw std::invalid_argument("adamw_step: parameter, gradient and state counts differ");
  if (state.step < 0) throw std::invalid_argument("adamw_step: negative step counter");
  auto label = [&](std::size_t i) { return i < names.size() ? names[i] : "#" + std::to_string(i); };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() || params[i]->shape() != state.m[i].shape() ||
        params[i]->shape() != state.v[i].shape())
      throw ShapeError("adamw_step: shape mismatch for parameter '" + label(i) + "'");
    if (!grads[i].all_finite()) {
      Index bad = 0;
      while (std::isfinite(static_cast<double>(grads[i][bad]))) ++bad;
      std::ostringstream os;
      os << "non-finite gradient in parameter '" << label(i) << "' at element " << bad << " (value "
         << grads[i][bad] << ") on step " << state.step + 1;
      throw NonFiniteError(os.str());
    }
  }
  const AdamWHyper& h = state.hyper;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const auto decay = static_cast<Scalar>(1.0 - lr * h.weight_decay);
  const auto b1 = static_cast<Scalar>(h.beta1), b2 = static_cast<Scalar>(h.beta2);
  const auto c1 = static_cast<Scalar>(1.0 / (1.0 - std::pow(h.beta1, t)));
  const auto c2 = static_cast<Scalar>(1.0 / (1.0 - std::pow(h.beta2, t)));
  const auto step = static_cast<Scalar>(lr), eps = static_cast<Scalar>(h.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->array();
    auto m = state.m[i].array();
    auto v = state.v[i].array();
    const auto g = grads[i].array();
    p *= decay;
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    p -= step * (m * c1) / ((v * c2).sqrt() + eps);
  }
}

template <typename Scalar>
void adamw_step(const std::vector<NamedParam<Scalar>>& params, OptimState<Scalar>& state, double lr) {
  std::vector<Tensor<Scalar>*> values;
  std::vector<Tensor<Scalar>> grads;
  std::vector<std::string> names;
  for (const auto& p : params) {
    Var<Scalar> var = p.var;
    values.push_back(&var.mutable_value());
    grads.push_back(var.grad());
    names.push_back(p.name);
  }
  adamw_step(values, grads, state, lr, names);
}

template OptimState<float> make_optim_state(const std::vector<Tensor<float>>&, AdamWHyper);
template OptimState<double> make_optim_state(const std::vector<Tensor<double>>&, AdamWHyper);
template void adamw_step(std::vector<Tensor<float>*>, const std::vector<Tensor<float>>&, OptimState<float>&, double,
                         const std::vector<std::string>&);
template void adamw_step(std::vector<Tensor<double>*>, const std::vector<Tensor<double>>&, OptimState<double>&, double,
                         const std::vector<std::string>&);
template void adamw_step(const std::vector<NamedParam<float>>&, OptimState<float>&, double);
template void adamw_step(const std::vector<NamedParam<double>>&, OptimState<double>&, double);

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

double LrSchedule::operator()(std::int64_t t) const {
  if (t < 0 || t >= total)
    throw std::out_of_range("lr_schedule: index " + std::to_string(t) + " outside [0, " + std::to_string(total) + ")");
  return t < drop_at ? base : base / 10.0;
}

LrSchedule LrSchedule::scaled(std::int64_t total, double base) { return LrSchedule{base, total, total - total / 16}; }

LrSchedule lr_schedule(const RunConfig& config) {
  return LrSchedule::scaled(config.profile == Profile::paper ? config.epochs : config.steps, config.lr);
}

double lr_at_step(const RunConfig& config, std::int64_t step) {
  const LrSchedule schedule = lr_schedule(config);
  if (config.profile == Profile::paper) return schedule(step / config.steps_per_epoch());
  return schedule(step);
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

Dataset make_dataset(const RunConfig& config) {
  Dataset data;
  if (config.clean_source == "procedural") {
    const std::uint64_t train_seed = derive_seed(config.data_seed, 0), val_seed = derive_seed(config.data_seed, 1);
    for (int i = 0; i < config.train_images; ++i)
      data.train.push_back(gen_clean(derive_seed(train_seed, i), config.image_size, config.image_size));
    for (int i = 0; i < config.val_images; ++i)
      data.val.push_back(gen_clean(derive_seed(val_seed, i), config.image_size, config.image_size));
    return data;
  }
  const auto paths = list_images(config.clean_source);
  if (paths.size() < 2) throw std::invalid_argument("clean_source '" + config.clean_source + "' needs at least two images");
  const std::size_t n_val = std::min<std::size_t>(config.val_images, paths.size() - 1);
  for (std::size_t i = 0; i < paths.size(); ++i) {
    if (i >= n_val + static_cast<std::size_t>(config.train_images)) break;
    Image img = read_ppm(paths[i]);
    if (img.dim(1) < config.patch || img.dim(2) < config.patch)
      throw std::invalid_argument("image '" + paths[i] + "' is smaller than the training patch");
    (i < n_val ? data.val : data.train).push_back(std::move(img));
  }
  return data;
}

std::vector<Sample> validation_samples(const RunConfig& config, const Dataset& data,
                                       const std::vector<TaskSpec>& tasks) {
  std::vector<Sample> out;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const std::uint64_t task_seed = derive_seed(config.data_seed, 2 + k);
    for (std::size_t j = 0; j < data.val.size(); ++j) {
      std::mt19937_64 rng(derive_seed(task_seed, j));
      auto specs = tasks[k].sample(rng);
      out.push_back(compose(data.val[j], std::move(specs), rng(), tasks[k].label + "/" + std::to_string(j)));
    }
  }
  return out;
}

Batch make_batch(const RunConfig& config, const Dataset& data, std::int64_t step) {
  if (data.train.empty()) throw std::invalid_argument("make_batch: empty training set");
  if (config.tasks.empty()) throw std::invalid_argument("make_batch: no tasks");
  const Index p = config.patch, plane = 3 * p * p;
  Batch batch{Tensor<float>(Shape{config.batch, 3, p, p}), Tensor<float>(Shape{config.batch, 3, p, p}), {}};
  const std::uint64_t step_seed = derive_seed(derive_seed(config.seed, 0x7261696eULL), static_cast<std::uint64_t>(step));
  for (int i = 0; i < config.batch; ++i) {
    std::mt19937_64 rng(derive_seed(step_seed, i));
    const auto& img = data.train[std::uniform_int_distribution<std::size_t>(0, data.train.size() - 1)(rng)];
    const auto& task = config.tasks[std::uniform_int_distribution<std::size_t>(0, config.tasks.size() - 1)(rng)];
    auto specs = task.sample(rng);
    const Sample full = compose(img, std::move(specs), rng());
    const Sample patch = sample_patch(full, p, rng(), config.flips);
    batch.degraded.vec().segment(i * plane, plane) = patch.degraded.vec();
    batch.clean.vec().segment(i * plane, plane) = patch.clean.vec();
    batch.labels.push_back(task.label);
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFFu));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += 4;
    return v;
  }

  std::string text(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const std::string& what) const {
    if (remaining() < n) throw CheckpointError("corrupt checkpoint: truncated " + what);
  }

 private:
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

std::string state_value(const Checkpoint& ckpt, const std::string& key) {
  std::istringstream is(ckpt.config);
  std::string line;
  const std::string prefix = key + " = ";
  while (std::getline(is, line)) {
    if (line.rfind(prefix, 0) == 0) return line.substr(prefix.size());
  }
  throw CheckpointError("checkpoint config lacks '" + key + "'");
}

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::vector<char> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<char> out{'H', 'A', 'I', 'R'};
  put_u32(out, ckpt.version);
  put_u32(out, static_cast<std::uint32_t>(ckpt.config.size()));
  out.insert(out.end(), ckpt.config.begin(), ckpt.config.end());
  for (const auto& t : ckpt.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put_u32(out, static_cast<std::uint32_t>(t.value.rank()));
    for (Index d : t.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (Index i = 0; i < t.value.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(t.value[i]));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<char>& bytes) {
  ByteReader in(bytes);
  if (in.remaining() < 4 || in.text(4, "magic") != "HAIR") throw CheckpointError("not a HAIR checkpoint (bad magic bytes)");
  Checkpoint ckpt;
  ckpt.version = in.u32("version");
  if (ckpt.version != Checkpoint::kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(ckpt.version) + " (expected " +
                          std::to_string(Checkpoint::kVersion) + ")");
  const std::uint32_t config_len = in.u32("config length");
  ckpt.config = in.text(config_len, "config block");
  while (!in.done()) {
    const std::string where = "record " + std::to_string(ckpt.tensors.size());
    const std::uint32_t name_len = in.u32(where + " name length");
    if (name_len == 0 || name_len > 4096) throw CheckpointError("corrupt checkpoint: bad name length in " + where);
    NamedTensor t;
    t.name = in.text(name_len, where + " name");
    const std::uint32_t rank = in.u32("rank of '" + t.name + "'");
    if (rank == 0 || rank > 8) throw CheckpointError("corrupt checkpoint: bad rank for '" + t.name + "'");
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint32_t d = in.u32("dims of '" + t.name + "'");
      if (d == 0) throw CheckpointError("corrupt checkpoint: zero extent in '" + t.name + "'");
      count *= d;
      if (count > in.remaining() / 4 + 1) throw CheckpointError("corrupt checkpoint: truncated data of '" + t.name + "'");
      shape.push_back(d);
    }
    in.need(count * 4, "data of '" + t.name + "'");
    typename Tensor<float>::Vector data(static_cast<Index>(count));
    for (Index i = 0; i < data.size(); ++i) data[i] = std::bit_cast<float>(in.u32("data"));
    if (!data.allFinite()) throw CheckpointError("corrupt checkpoint: non-finite values in '" + t.name + "'");
    t.value = Tensor<float>(std::move(shape), std::move(data));
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw std::ios_base::failure("write failed for checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open checkpoint '" + path + "'");
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path + ": " + e.what());
  }
}

Checkpoint make_checkpoint(const RunConfig& config, const Model<float>& model, const OptimState<float>* optim,
                           std::int64_t step) {
  Checkpoint ckpt;
  std::ostringstream os;
  os << config.serialize() << "state.step = " << step << '\n'
     << "state.epoch = " << (config.profile == Profile::paper ? step / config.steps_per_epoch() : 0) << '\n'
     << "state.rng = " << config.seed << ':' << step << '\n';
  ckpt.config = os.str();
  const auto& params = model.parameters();
  for (const auto& p : params) ckpt.tensors.push_back({p.name, p.var.value()});
  if (optim) {
    for (std::size_t i = 0; i < params.size(); ++i) ckpt.tensors.push_back({"adam.m/" + params[i].name, optim->m.at(i)});
    for (std::size_t i = 0; i < params.size(); ++i) ckpt.tensors.push_back({"adam.v/" + params[i].name, optim->v.at(i)});
  }
  return ckpt;
}

RunConfig checkpoint_config(const Checkpoint& ckpt) {
  std::istringstream is(ckpt.config);
  std::string line, text;
  while (std::getline(is, line)) {
    if (line.rfind("state.", 0) != 0) text += line + '\n';
  }
  try {
    return parse_config(text);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config block is invalid: ") + e.what());
  }
}

std::int64_t checkpoint_step(const Checkpoint& ckpt) {
  const std::string v = state_value(ckpt, "state.step");
  std::int64_t step = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), step);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size() || step < 0)
    throw CheckpointError("checkpoint has a malformed step counter");
  return step;
}

void load_parameters(Model<float>& model, const Checkpoint& ckpt) {
  for (const auto& p : model.parameters()) {
    const NamedTensor* t = ckpt.find(p.name);
    if (!t) throw CheckpointError("checkpoint is missing tensor '" + p.name + "'");
    if (t->value.shape() != p.var.value().shape())
      throw CheckpointError("shape mismatch for tensor '" + p.name + "': checkpoint " + to_string(t->value.shape()) +
                            ", model " + to_string(p.var.value().shape()));
  }
  for (const auto& p : model.parameters()) model.parameter(p.name).mutable_value() = ckpt.find(p.name)->value;
}

Model<float> restore_model(const Checkpoint& ckpt) {
  const RunConfig config = checkpoint_config(ckpt);
  Model<float> model(config.model_desc(), config.seed);
  load_parameters(model, ckpt);
  return model;
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

Image restore_image(const Model<float>& model, const Image& degraded) {
  if (degraded.rank() != 3 || degraded.dim(0) != 3)
    throw ShapeError("restore_image: expected [3,H,W], got " + to_string(degraded.shape()));
  const Index h = degraded.dim(1), w = degraded.dim(2);
  const auto out = model.forward(Var<float>(degraded.reshaped({1, 3, h, w})));
  return clamp01(out.image.value().reshaped({3, h, w}));
}

std::vector<LabeledGiv> compute_givs(const Model<float>& model, const std::vector<Sample>& samples) {
  std::vector<LabeledGiv> out;
  for (const auto& s : samples) {
    const Index h = s.degraded.dim(1), w = s.degraded.dim(2);
    const Tensor<float> giv = model.giv(Var<float>(s.degraded.reshaped({1, 3, h, w}))).value();
    out.push_back({giv.vec().cast<double>(), chain_label(s.specs)});
  }
  return out;
}

MetricsReport evaluate(const Model<float>& model, const std::vector<Sample>& samples) {
  MetricsReport report;
  for (const auto& s : samples) {
    const Image restored = restore_image(model, s.degraded);
    report.add(chain_label(s.specs), psnr(restored, s.clean), ssim(restored, s.clean).value);
  }
  return report;
}

MetricsReport evaluate_degraded(const std::vector<Sample>& samples) {
  MetricsReport report;
  for (const auto& s : samples) report.add(chain_label(s.specs), psnr(s.degraded, s.clean), ssim(s.degraded, s.clean).value);
  return report;
}

namespace {

std::vector<std::string> task_labels(const RunConfig& config) {
  std::vector<std::string> labels;
  for (const auto& t : config.tasks) {
    if (std::find(labels.begin(), labels.end(), t.label) == labels.end()) labels.push_back(t.label);
  }
  return labels;
}

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write '" + path + "'");
  out << text;
  out.flush();
  if (!out) throw std::ios_base::failure("write failed for '" + path + "'");
}

}  // namespace

std::string log_csv_header(const RunConfig& config) {
  std::string out = "step,lr,train_loss";
  for (const auto& label : task_labels(config)) out += ",psnr_" + label + ",ssim_" + label;
  return out + '\n';
}

std::string log_csv_row(const RunConfig& config, const LogRow& row) {
  std::ostringstream os;
  os << row.step << ',' << shortest(row.lr) << ',';
  if (std::isfinite(row.train_loss)) os << std::fixed << std::setprecision(6) << row.train_loss;
  for (const auto& label : task_labels(config)) {
    os << ',';
    if (row.has_eval) os << format_metric(row.eval.row(label).mean_psnr());
    os << ',';
    if (row.has_eval) os << format_metric(row.eval.row(label).mean_ssim());
  }
  os << '\n';
  return os.str();
}

TrainResult train_loop(const RunConfig& config, const Dataset& data, const TrainOptions& options) {
  config.validate();
  if (data.train.empty() || data.val.empty()) throw std::invalid_argument("train_loop: empty dataset");

  Model<float> model(config.model_desc(), config.seed);
  std::vector<Tensor<float>> values;
  for (const auto& p : model.parameters()) values.push_back(p.var.value());
  OptimState<float> optim =
      make_optim_state(values, AdamWHyper{config.beta1, config.beta2, config.eps, config.weight_decay});
  const std::vector<Sample> val = validation_samples(config, data, config.tasks);
  const std::int64_t total = config.total_steps();

  TrainResult result{std::move(model), std::move(optim), 0, {}, {}, log_csv_header(config)};
  auto emit = [&](LogRow row) {
    result.log_csv += log_csv_row(config, row);
    if (options.on_log) options.on_log(row);
    result.log.push_back(std::move(row));
  };
  auto persist = [&] {
    if (!options.log_path.empty()) write_text(options.log_path, result.log_csv);
    if (!options.checkpoint_path.empty())
      save_checkpoint(make_checkpoint(config, result.model, &result.optim, result.steps), options.checkpoint_path);
  };

  if (total == 0) {
    LogRow row{0, config.lr, std::nan(""), true, evaluate(result.model, val)};
    emit(std::move(row));
  }

  double window = 0.0;
  std::int64_t window_n = 0;
  for (std::int64_t step = 0; step < total; ++step) {
    const double lr = lr_at_step(config, step);
    const Batch batch = make_batch(config, data, step);
    for (const auto& p : result.model.parameters()) Var<float>(p.var).zero_grad();
    try {
      const auto out = result.model.forward(Var<float>(batch.degraded));
      const Var<float> loss = l1_loss(out.image, Var<float>(batch.clean));
      const double value = loss.value()[0];
      if (!std::isfinite(value)) throw NonFiniteError("non-finite training loss at step " + std::to_string(step));
      backward(loss);
      adamw_step(result.model.parameters(), result.optim, lr);
      result.losses.push_back(value);
      window += value;
      ++window_n;
    } catch (const NonFiniteError&) {
      persist();
      throw;
    }
    result.steps = step + 1;
    const bool eval_now = result.steps == total || (config.eval_every > 0 && result.steps % config.eval_every == 0);
    if (eval_now || result.steps % config.log_every == 0) {
      LogRow row{result.steps, lr, window / static_cast<double>(window_n), eval_now, {}};
      if (eval_now) row.eval = evaluate(result.model, val);
      emit(std::move(row));
      window = 0.0;
      window_n = 0;
    }
  }
  persist();
  return result;
}

}  // namespace hair
