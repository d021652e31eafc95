#include "hair/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace hair {

ModelDesc restormer_desc(Index channels, const std::vector<int>& blocks, const std::vector<int>& heads,
                         double expansion, BlockKind kind) {
  if (channels < 1) throw std::invalid_argument("channels must be positive");
  if (blocks.size() < 2) throw std::invalid_argument("an encoder-decoder needs at least two levels");
  if (heads.size() != blocks.size()) throw std::invalid_argument("heads must list one entry per level");
  const int levels = static_cast<int>(blocks.size());
  ModelDesc desc;
  desc.channels = channels;
  desc.expansion = expansion;
  desc.kind = kind;
  auto make = [&](GroupRole role, int level, std::string name) {
    GroupDesc g;
    g.name = std::move(name);
    g.role = role;
    g.level = level;
    g.width = channels << (level - 1);
    g.heads = heads[level - 1];
    g.blocks = blocks[level - 1];
    if (g.blocks < 0) throw std::invalid_argument("block counts must be non-negative");
    desc.hyper_for(g).validate();
    return g;
  };
  for (int l = 1; l < levels; ++l) desc.groups.push_back(make(GroupRole::encoder, l, "enc" + std::to_string(l)));
  desc.groups.push_back(make(GroupRole::latent, levels, "lat"));
  for (int l = levels - 1; l >= 1; --l) desc.groups.push_back(make(GroupRole::decoder, l, "dec" + std::to_string(l)));
  return desc;
}

DacSchedule default_dac_schedule(Index tap_width, Index channels) {
  DacSchedule s;
  s.input = tap_width;
  Index w = tap_width;
  for (int t = 0; t < 3; ++t) {
    w = (t == 2) ? 2 * channels : std::max(w / 2, 2 * channels);
    s.stages.push_back(w);
  }
  return s;
}

ModelDesc hyperize(ModelDesc baseline, int split, const std::vector<int>& box_sizes, std::optional<DacSchedule> dac) {
  if (baseline.hyper()) throw std::invalid_argument("hyperize: baseline already has a DAC");
  const int n_groups = static_cast<int>(baseline.groups.size());
  if (split < 1 || split >= n_groups) {
    throw std::invalid_argument("hyperize: split " + std::to_string(split) + " must leave groups on both sides (1.." +
                                std::to_string(n_groups - 1) + ")");
  }
  if (static_cast<int>(box_sizes.size()) != baseline.levels()) {
    throw std::invalid_argument("hyperize: need one Weight Box size per level");
  }
  int post_blocks = 0;
  for (int i = split; i < n_groups; ++i) post_blocks += baseline.groups[i].blocks;
  if (post_blocks == 0) throw std::invalid_argument("hyperize: split leaves zero post-split blocks");

  const Index tap_width = baseline.groups[split].width;
  if (dac) {
    if (dac->input != tap_width) {
      throw std::invalid_argument("hyperize: DAC input width " + std::to_string(dac->input) +
                                  " incompatible with tapped feature width " + std::to_string(tap_width));
    }
    if (dac->stages.size() != 3 || dac->stages.back() != baseline.giv_length()) {
      throw std::invalid_argument("hyperize: DAC schedule must have three stages ending at 2C");
    }
    baseline.dac = *dac;
  } else {
    baseline.dac = default_dac_schedule(tap_width, baseline.channels);
  }
  for (int i = split; i < n_groups; ++i) {
    auto& g = baseline.groups[i];
    g.hyper = true;
    g.box_size = box_sizes[g.level - 1];
    if (g.box_size < 1) throw std::invalid_argument("hyperize: Weight Box sizes must be >= 1");
  }
  baseline.split = split;
  return baseline;
}

std::string to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::io:
      return "io";
    case ParamGroup::encoder:
      return "encoder";
    case ParamGroup::decoder:
      return "decoder";
    case ParamGroup::dac:
      return "dac";
    case ParamGroup::fcnn:
      return "fcnn";
    case ParamGroup::weight_box:
      return "weight_box";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> dac_backbone_step(const Var<Scalar>& features, const DacParams<Scalar>& dac, int stage) {
  if (stage < 0 || stage >= static_cast<int>(dac.stages.size()) || stage >= 3) {
    throw std::out_of_range("dac_backbone_step: stage index " + std::to_string(stage) + " out of range");
  }
  if (features.value().rank() != 4 || features.dim(2) % 2 != 0 || features.dim(3) % 2 != 0) {
    throw ShapeError("dac_backbone_step: needs even spatial extents, got " + to_string(features.shape()));
  }
  const auto& p = dac.stages[static_cast<std::size_t>(stage)];
  auto r = add(features, conv2d(gelu(conv2d(features, p.res_a, 1, 1)), p.res_b, 1, 1));
  return conv2d(r, p.down, 2, 1);
}

template <typename Scalar>
Var<Scalar> dac_forward(const Var<Scalar>& features, const DacParams<Scalar>& dac) {
  if (features.value().rank() != 4 || features.dim(2) % 8 != 0 || features.dim(3) % 8 != 0) {
    throw ShapeError("dac_forward: spatial extents must be divisible by 8, got " + to_string(features.shape()));
  }
  if (dac.stages.size() != 3) throw ShapeError("dac_forward: expected three stages");
  auto f = features;
  for (int t = 0; t < 3; ++t) f = dac_backbone_step(f, dac, t);
  return global_average_pool(f);
}

template <typename Scalar>
Var<Scalar> hsn_select(const Var<Scalar>& giv, const Fcnn<Scalar>& fcnn) {
  const Index width = fcnn.weight.dim(1);
  if (giv.size() != width) {
    throw ShapeError("hsn_select: GIV length " + std::to_string(giv.size()) + " != FCNN input width " +
                     std::to_string(width));
  }
  return softmax(linear(reshape(giv, Shape{1, width}), fcnn.weight, std::optional<Var<Scalar>>(fcnn.bias)));
}

template <typename Scalar>
Var<Scalar> weightbox_mix(const Var<Scalar>& selecting, const WeightBox<Scalar>& box) {
  if (!box.rows.defined() || box.rows.value().rank() != 2 || box.size() < 1) {
    throw ShapeError("weightbox_mix: empty Weight Box");
  }
  if (selecting.size() != box.size()) {
    throw ShapeError("weightbox_mix: selecting vector length " + std::to_string(selecting.size()) + " != box rows " +
                     std::to_string(box.size()));
  }
  return matmul(reshape(selecting, Shape{1, box.size()}), box.rows);
}

template <typename Scalar>
Var<Scalar> hypertrans_forward(const Var<Scalar>& x, const Var<Scalar>& giv, const HyperTransBlock<Scalar>& block,
                               const std::optional<Var<Scalar>>& selecting) {
  if (!block.box) throw std::invalid_argument("hypertrans_forward: block has no Weight Box");
  const Index batch = x.dim(0);
  auto run = [&](const Var<Scalar>& xs, const Var<Scalar>& gs) {
    auto vs = selecting ? *selecting : hsn_select(gs, block.fcnn);
    return block_forward(xs, weightbox_mix(vs, *block.box), block.box->layout, block.hyper);
  };
  if (batch == 1) return run(x, giv);
  if (giv.value().rank() != 2 || giv.dim(0) != batch) {
    throw ShapeError("hypertrans_forward: need one GIV per sample");
  }
  std::vector<Var<Scalar>> outs;
  for (Index b = 0; b < batch; ++b) outs.push_back(run(slice_batch(x, b), slice_batch(giv, b)));
  return concat_batch(outs);
}

// ---------------------------------------------------------------------------

namespace {

template <typename Scalar>
Tensor<Scalar> uniform_kernel(Shape shape, std::mt19937_64& rng) {
  Tensor<Scalar> t(std::move(shape));
  Index fan_in = 1;
  for (std::size_t i = 1; i < t.shape().size(); ++i) fan_in *= t.shape()[i];
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

}  // namespace

template <typename Scalar>
Var<Scalar>& Model<Scalar>::add_param(std::string name, ParamGroup group, Tensor<Scalar> value) {
  params_.push_back({std::move(name), group, Var<Scalar>::parameter(std::move(value))});
  return params_.back().var;
}

template <typename Scalar>
Model<Scalar>::Model(ModelDesc desc, std::uint64_t seed) : desc_(std::move(desc)) {
  if (desc_.groups.size() < 3 || desc_.groups.size() % 2 == 0) {
    throw std::invalid_argument("model description must have 2L-1 groups");
  }
  std::mt19937_64 rng(seed);
  const Index c = desc_.channels;

  embed_ = add_param("embed", ParamGroup::encoder, uniform_kernel<Scalar>({c, 3, 3, 3}, rng));

  for (const auto& gd : desc_.groups) {
    Group g;
    g.desc = gd;
    g.hyper = desc_.hyper_for(gd);
    g.layout = param_layout(g.hyper);
    const ParamGroup role = gd.role == GroupRole::decoder || gd.hyper ? ParamGroup::decoder : ParamGroup::encoder;

    if (gd.role == GroupRole::decoder) {
      const Index wide = gd.width * 2;
      up_.push_back(add_param("up" + std::to_string(gd.level), ParamGroup::decoder,
                              uniform_kernel<Scalar>({2 * wide, wide, 1, 1}, rng)));
      fuse_.push_back(add_param("fuse" + std::to_string(gd.level), ParamGroup::decoder,
                                uniform_kernel<Scalar>({gd.width, 2 * gd.width, 1, 1}, rng)));
    }

    if (gd.hyper) {
      g.box = std::make_shared<WeightBox<Scalar>>();
      g.box->layout = g.layout;
      g.box->level = gd.level;
      Tensor<Scalar> rows(Shape{gd.box_size, g.layout.total});
      for (int r = 0; r < gd.box_size; ++r) rows.vec().segment(r * g.layout.total, g.layout.total) =
          g.layout.template initialize<Scalar>(rng).vec();
      g.box->rows = add_param(gd.name + ".box", ParamGroup::weight_box, std::move(rows));
      for (int b = 0; b < gd.blocks; ++b) {
        HyperTransBlock<Scalar> blk;
        const std::string prefix = gd.name + ".block" + std::to_string(b) + ".hsn";
        blk.fcnn.weight = add_param(prefix + ".weight", ParamGroup::fcnn,
                                    uniform_kernel<Scalar>({gd.box_size, desc_.giv_length()}, rng));
        blk.fcnn.bias = add_param(prefix + ".bias", ParamGroup::fcnn, Tensor<Scalar>(Shape{gd.box_size}));
        blk.box = g.box;
        blk.hyper = g.hyper;
        g.hyper_blocks.push_back(std::move(blk));
      }
    } else {
      for (int b = 0; b < gd.blocks; ++b) {
        g.plain.push_back(add_param(gd.name + ".block" + std::to_string(b), role,
                                    g.layout.template initialize<Scalar>(rng)));
      }
    }

    if (gd.role == GroupRole::encoder) {
      down_.push_back(add_param("down" + std::to_string(gd.level), ParamGroup::encoder,
                                uniform_kernel<Scalar>({2 * gd.width, 4 * gd.width, 1, 1}, rng)));
    }
    groups_.push_back(std::move(g));
  }

  if (desc_.hyper()) {
    const auto& sched = desc_.dac;
    if (sched.stages.size() != 3) throw std::invalid_argument("DAC schedule must have three stages");
    Index in = sched.input;
    for (int t = 0; t < 3; ++t) {
      const Index out = sched.stages[static_cast<std::size_t>(t)];
      const std::string prefix = "dac.stage" + std::to_string(t);
      DacStage<Scalar> st;
      st.res_a = add_param(prefix + ".res_a", ParamGroup::dac, uniform_kernel<Scalar>({in, in, 3, 3}, rng));
      st.res_b = add_param(prefix + ".res_b", ParamGroup::dac, uniform_kernel<Scalar>({in, in, 3, 3}, rng));
      st.down = add_param(prefix + ".down", ParamGroup::dac, uniform_kernel<Scalar>({out, in, 3, 3}, rng));
      dac_.stages.push_back(st);
      in = out;
    }
  }

  output_conv_ = add_param("output", ParamGroup::decoder, uniform_kernel<Scalar>({3, c, 3, 3}, rng));
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::tap(const Var<Scalar>& features) const {
  const Index h = features.dim(2), w = features.dim(3);
  const Index ph = (8 - h % 8) % 8, pw = (8 - w % 8) % 8;
  auto f = (ph || pw) ? pad_reflect(features, 0, ph, 0, pw) : features;
  return dac_forward(f, dac_);
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::run_group(const Group& group, const Var<Scalar>& x, const Var<Scalar>& giv,
                                     std::map<std::string, Tensor<Scalar>>* sel) const {
  auto f = x;
  if (!group.desc.hyper) {
    for (const auto& w : group.plain) f = block_forward(f, w, group.layout, group.hyper);
    return f;
  }
  for (std::size_t b = 0; b < group.hyper_blocks.size(); ++b) {
    const auto& blk = group.hyper_blocks[b];
    auto vs = hsn_select(giv, blk.fcnn);
    if (sel) (*sel)[group.desc.name + ".block" + std::to_string(b)] = vs.value();
    f = block_forward(f, weightbox_mix(vs, *blk.box), group.layout, group.hyper);
  }
  return f;
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::forward_sample(const Var<Scalar>& x, Var<Scalar>* giv_out,
                                          std::map<std::string, Tensor<Scalar>>* sel, bool stop_at_giv) const {
  auto f = conv2d(x, embed_, 1, 1);
  std::vector<Var<Scalar>> skips;
  Var<Scalar> giv;
  std::size_t down_i = 0, up_i = 0;
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    const auto& g = groups_[gi];
    if (g.desc.role == GroupRole::decoder) {
      f = resample_up(f, up_[up_i]);
      f = skip_fuse(f, skips.at(static_cast<std::size_t>(g.desc.level - 1)), fuse_[up_i]);
      ++up_i;
    }
    if (desc_.split && static_cast<int>(gi) == *desc_.split) {
      giv = tap(f);
      if (giv_out) *giv_out = giv;
      if (stop_at_giv) return giv;
    }
    f = run_group(g, f, giv, sel);
    if (g.desc.role == GroupRole::encoder) {
      skips.push_back(f);
      f = resample_down(f, down_[down_i++]);
    }
  }
  return add(x, conv2d(f, output_conv_, 1, 1));
}

template <typename Scalar>
ForwardResult<Scalar> Model<Scalar>::forward(const Var<Scalar>& images, const ForwardOptions& options) const {
  if (images.value().rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("model_forward expects [B,3,H,W], got " + to_string(images.shape()));
  }
  const Index batch = images.dim(0), h = images.dim(2), w = images.dim(3);
  const Index m = desc_.spatial_multiple();
  const Index ph = (m - h % m) % m, pw = (m - w % m) % m;
  if ((ph || pw) && !options.pad) {
    throw ShapeError("model_forward: spatial extents must be divisible by " + std::to_string(m) +
                     " when padding is disabled");
  }

  ForwardResult<Scalar> result;
  std::vector<Var<Scalar>> outs, givs;
  for (Index b = 0; b < batch; ++b) {
    auto x = batch == 1 ? images : slice_batch(images, b);
    if (ph || pw) x = pad_reflect(x, 0, ph, 0, pw);
    Var<Scalar> giv;
    std::map<std::string, Tensor<Scalar>> sel;
    auto y = forward_sample(x, &giv, &sel, false);
    if (ph || pw) y = crop(y, 0, 0, h, w);
    outs.push_back(y);
    if (giv.defined()) givs.push_back(giv);
    result.selections.push_back(std::move(sel));
  }
  result.image = batch == 1 ? outs.front() : concat_batch(outs);
  if (!result.image.value().all_finite()) throw NonFiniteError("model_forward: non-finite activations");
  if (!givs.empty()) result.giv = batch == 1 ? givs.front() : concat_batch(givs);
  return result;
}

template <typename Scalar>
Var<Scalar> Model<Scalar>::giv(const Var<Scalar>& images, const ForwardOptions& options) const {
  if (!desc_.hyper()) throw std::logic_error("model has no DAC");
  if (images.value().rank() != 4 || images.dim(1) != 3) throw ShapeError("giv expects [B,3,H,W]");
  const Index batch = images.dim(0), h = images.dim(2), w = images.dim(3);
  const Index m = desc_.spatial_multiple();
  const Index ph = (m - h % m) % m, pw = (m - w % m) % m;
  if ((ph || pw) && !options.pad) throw ShapeError("giv: indivisible extents with padding disabled");
  std::vector<Var<Scalar>> givs;
  for (Index b = 0; b < batch; ++b) {
    auto x = batch == 1 ? images : slice_batch(images, b);
    if (ph || pw) x = pad_reflect(x, 0, ph, 0, pw);
    givs.push_back(forward_sample(x, nullptr, nullptr, true));
  }
  return batch == 1 ? givs.front() : concat_batch(givs);
}

template <typename Scalar>
std::vector<Var<Scalar>> Model<Scalar>::parameter_vars() const {
  std::vector<Var<Scalar>> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(p.var);
  return vars;
}

template <typename Scalar>
Var<Scalar>& Model<Scalar>::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p.var;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

template <typename Scalar>
Index Model<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.var.size();
  return n;
}

template <typename Scalar>
template <typename Other>
Model<Other> Model<Scalar>::cast() const {
  Model<Other> out(desc_, 0);
  for (const auto& p : params_) out.parameter(p.name).mutable_value() = p.var.value().template cast<Other>();
  return out;
}

#define HAIR_INSTANTIATE_MODEL(S)                                                                          \
  template Var<S> dac_backbone_step(const Var<S>&, const DacParams<S>&, int);                             \
  template Var<S> dac_forward(const Var<S>&, const DacParams<S>&);                                        \
  template Var<S> hsn_select(const Var<S>&, const Fcnn<S>&);                                              \
  template Var<S> weightbox_mix(const Var<S>&, const WeightBox<S>&);                                      \
  template Var<S> hypertrans_forward(const Var<S>&, const Var<S>&, const HyperTransBlock<S>&,             \
                                     const std::optional<Var<S>>&);                                       \
  template class Model<S>;

HAIR_INSTANTIATE_MODEL(float)
HAIR_INSTANTIATE_MODEL(double)

template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;

}  // namespace hair
