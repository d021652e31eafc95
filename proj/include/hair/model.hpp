#pragma once

#include "hair/blocks.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace hair {

// ---------------------------------------------------------------------------
// Architecture description
// ---------------------------------------------------------------------------

enum class GroupRole { encoder, latent, decoder };

/// One run of consecutive blocks at a single resolution level.
struct GroupDesc {
  std::string name;  // enc1, ..., lat, ..., dec1
  GroupRole role = GroupRole::encoder;
  int level = 1;  // 1-based; width = C * 2^(level-1)
  Index width = 8;
  int heads = 1;
  int blocks = 1;
  bool hyper = false;
  int box_size = 1;  // Weight Box rows when hyper
};

/// Channel widths of the Degradation-Aware Classifier: input then one output
/// width per strided stage.
struct DacSchedule {
  Index input = 0;
  std::vector<Index> stages;
};

/// Sequential U-shaped description: encoder groups (levels 1..L-1), the
/// latent group (level L), decoder groups (levels L-1..1).
struct ModelDesc {
  Index channels = 8;
  double expansion = 2.66;
  BlockKind kind = BlockKind::transformer;
  std::vector<GroupDesc> groups;
  /// Index of the first hyper group; the DAC taps the feature entering it.
  std::optional<int> split;
  DacSchedule dac;

  int levels() const { return static_cast<int>((groups.size() + 1) / 2); }
  bool hyper() const { return split.has_value(); }
  BlockHyper hyper_for(const GroupDesc& g) const { return BlockHyper{g.width, g.heads, expansion, kind}; }
  Index giv_length() const { return 2 * channels; }
  /// Spatial multiple required by the encoder's downsampling chain.
  Index spatial_multiple() const { return Index{1} << (levels() - 1); }
};

/// Plain encoder-decoder with `blocks.size()` levels. No group is hyper.
ModelDesc restormer_desc(Index channels, const std::vector<int>& blocks, const std::vector<int>& heads,
                         double expansion = 2.66, BlockKind kind = BlockKind::transformer);

/// Inserts a DAC in front of group `split` and turns every later group into
/// HyperTrans groups whose Weight Box has box_sizes[level - 1] rows.
///
/// Throws std::invalid_argument when the split leaves no post-split block, or
/// when an explicit `dac` schedule's input width differs from the tapped width.
ModelDesc hyperize(ModelDesc baseline, int split, const std::vector<int>& box_sizes,
                   std::optional<DacSchedule> dac = std::nullopt);

/// 8C -> 4C -> 2C -> 2C for the default tap; in general each stage halves the
/// width but never drops below 2C, and the last stage emits exactly 2C.
DacSchedule default_dac_schedule(Index tap_width, Index channels);

// ---------------------------------------------------------------------------
// Mechanism building blocks
// ---------------------------------------------------------------------------

template <typename Scalar>
struct DacStage {
  Var<Scalar> res_a;  // [Ct, Ct, 3, 3]
  Var<Scalar> res_b;  // [Ct, Ct, 3, 3]
  Var<Scalar> down;   // [Ct', Ct, 3, 3], stride 2
};

template <typename Scalar>
struct DacParams {
  std::vector<DacStage<Scalar>> stages;
};

/// Residual block (two 3x3 convs, GELU between, identity skip) followed by the
/// stride-2 3x3 channel-changing conv of stage `stage` (0-based, < 3).
template <typename Scalar>
Var<Scalar> dac_backbone_step(const Var<Scalar>& features, const DacParams<Scalar>& dac, int stage);

/// Three backbone steps then global average pooling: [B, Ct, H, W] -> [B, 2C].
/// Requires H, W divisible by 8. No softmax is applied.
template <typename Scalar>
Var<Scalar> dac_forward(const Var<Scalar>& features, const DacParams<Scalar>& dac);

/// Per-block Hyper Selecting Net: a single affine layer 2C -> N.
template <typename Scalar>
struct Fcnn {
  Var<Scalar> weight;  // [N, 2C]
  Var<Scalar> bias;    // [N]
  Index rows() const { return weight.dim(0); }
};

template <typename Scalar>
struct WeightBox {
  Var<Scalar> rows;  // [N, P]
  ParamLayout layout;
  int level = 1;
  Index size() const { return rows.dim(0); }
};

/// softmax(fcnn(giv)) -> [1, N]. `giv` is [2C] or [1, 2C].
template <typename Scalar>
Var<Scalar> hsn_select(const Var<Scalar>& giv, const Fcnn<Scalar>& fcnn);

/// sum_i vs_i * box.rows[i] -> [1, P].
template <typename Scalar>
Var<Scalar> weightbox_mix(const Var<Scalar>& selecting, const WeightBox<Scalar>& box);

template <typename Scalar>
struct HyperTransBlock {
  Fcnn<Scalar> fcnn;
  std::shared_ptr<WeightBox<Scalar>> box;
  BlockHyper hyper;
};

/// block(x, mix(select(giv))). `x` must hold one sample when `giv` does.
/// `selecting`, when given, replaces the HSN output (test injection).
template <typename Scalar>
Var<Scalar> hypertrans_forward(const Var<Scalar>& x, const Var<Scalar>& giv, const HyperTransBlock<Scalar>& block,
                               const std::optional<Var<Scalar>>& selecting = std::nullopt);

// ---------------------------------------------------------------------------
// Full network
// ---------------------------------------------------------------------------

enum class ParamGroup { io, encoder, decoder, dac, fcnn, weight_box };
std::string to_string(ParamGroup group);

template <typename Scalar>
struct NamedParam {
  std::string name;
  ParamGroup group;
  Var<Scalar> var;
};

struct ForwardOptions {
  /// Reflect-pad inputs to the encoder's spatial multiple and crop back.
  bool pad = true;
};

template <typename Scalar>
struct ForwardResult {
  Var<Scalar> image;  // [B, 3, H, W]
  Var<Scalar> giv;    // [B, 2C]; undefined for models without a DAC
  /// Selecting vectors of every HyperTrans block, per sample, keyed by
  /// "<group>.block<i>".
  std::vector<std::map<std::string, Tensor<Scalar>>> selections;
};

template <typename Scalar>
class Model {
 public:
  struct Group {
    GroupDesc desc;
    BlockHyper hyper;
    ParamLayout layout;
    std::vector<Var<Scalar>> plain;  // one flat vector per plain block
    std::shared_ptr<WeightBox<Scalar>> box;
    std::vector<HyperTransBlock<Scalar>> hyper_blocks;
  };

  Model(ModelDesc desc, std::uint64_t seed);

  ForwardResult<Scalar> forward(const Var<Scalar>& images, const ForwardOptions& options = {}) const;

  /// GIVs only (runs the network up to the DAC).
  Var<Scalar> giv(const Var<Scalar>& images, const ForwardOptions& options = {}) const;

  const ModelDesc& desc() const { return desc_; }
  const std::vector<Group>& groups() const { return groups_; }
  std::vector<Group>& groups() { return groups_; }
  const DacParams<Scalar>& dac() const { return dac_; }
  Var<Scalar>& output_conv() { return output_conv_; }

  /// Every learnable tensor in a fixed order.
  const std::vector<NamedParam<Scalar>>& parameters() const { return params_; }
  std::vector<Var<Scalar>> parameter_vars() const;
  Var<Scalar>& parameter(const std::string& name);
  Index parameter_count() const;

  /// Copy with the same description and parameter values in another scalar type.
  template <typename Other>
  Model<Other> cast() const;

 private:
  Var<Scalar> forward_sample(const Var<Scalar>& x, Var<Scalar>* giv_out, std::map<std::string, Tensor<Scalar>>* sel,
                             bool stop_at_giv) const;
  Var<Scalar> run_group(const Group& group, const Var<Scalar>& x, const Var<Scalar>& giv,
                        std::map<std::string, Tensor<Scalar>>* sel) const;
  Var<Scalar> tap(const Var<Scalar>& features) const;
  Var<Scalar>& add_param(std::string name, ParamGroup group, Tensor<Scalar> value);

  ModelDesc desc_;
  Var<Scalar> embed_;
  Var<Scalar> output_conv_;
  std::vector<Group> groups_;
  std::vector<Var<Scalar>> down_;  // per encoder transition
  std::vector<Var<Scalar>> up_;    // per decoder transition, in forward order
  std::vector<Var<Scalar>> fuse_;  // per decoder transition, in forward order
  DacParams<Scalar> dac_;
  std::vector<NamedParam<Scalar>> params_;
};

}  // namespace hair
