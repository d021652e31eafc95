#include "hair/layout.hpp"

#include <cmath>
#include <stdexcept>

namespace hair {

std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::transformer:
      return "transformer";
    case BlockKind::res_conv:
      return "res_conv";
  }
  return "unknown";
}

BlockKind parse_block_kind(const std::string& text) {
  if (text == "transformer") return BlockKind::transformer;
  if (text == "res_conv") return BlockKind::res_conv;
  throw std::invalid_argument("unknown block kind '" + text + "'");
}

Index BlockHyper::hidden() const {
  return std::max<Index>(1, static_cast<Index>(std::floor(expansion * static_cast<double>(channels))));
}

void BlockHyper::validate() const {
  if (channels < 1) throw ShapeError("block channels must be positive");
  if (kind == BlockKind::res_conv) return;
  if (heads < 1) throw ShapeError("block heads must be positive");
  if (channels % heads != 0) {
    throw ShapeError("channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
  }
  if (!(expansion > 0.0)) throw ShapeError("expansion factor must be positive");
}

const ParamLayout::Entry& ParamLayout::at(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("no layout entry named '" + name + "'");
}

template <typename Scalar>
std::vector<Tensor<Scalar>> ParamLayout::unflatten(const Tensor<Scalar>& flat) const {
  if (flat.size() != total) {
    throw ShapeError("flat parameter length " + std::to_string(flat.size()) + " != layout total " + std::to_string(total));
  }
  std::vector<Tensor<Scalar>> parts;
  parts.reserve(entries.size());
  for (const auto& e : entries) parts.emplace_back(e.shape, flat.vec().segment(e.offset, e.size()));
  return parts;
}

template <typename Scalar>
Tensor<Scalar> ParamLayout::flatten(const std::vector<Tensor<Scalar>>& parts) const {
  if (parts.size() != entries.size()) throw ShapeError("flatten: wrong number of parts");
  Tensor<Scalar> flat(Shape{total});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].shape() != entries[i].shape) {
      throw ShapeError("flatten: part '" + entries[i].name + "' has shape " + to_string(parts[i].shape()) +
                       ", expected " + to_string(entries[i].shape));
    }
    flat.vec().segment(entries[i].offset, entries[i].size()) = parts[i].vec();
  }
  return flat;
}

namespace {
bool is_unit_entry(const std::string& name) {
  return name.ends_with(".norm") || name.ends_with(".temperature");
}
}  // namespace

template <typename Scalar>
Tensor<Scalar> ParamLayout::initialize(std::mt19937_64& rng) const {
  Tensor<Scalar> flat(Shape{total});
  for (const auto& e : entries) {
    auto seg = flat.vec().segment(e.offset, e.size());
    if (is_unit_entry(e.name)) {
      seg.setOnes();
      continue;
    }
    const Index fan_in = e.shape[1] * e.shape[2] * e.shape[3];
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Index i = 0; i < seg.size(); ++i) seg[i] = static_cast<Scalar>(bound * dist(rng));
  }
  return flat;
}

ParamLayout param_layout(const BlockHyper& hyper) {
  hyper.validate();
  ParamLayout layout;
  auto push = [&layout](std::string name, Shape shape) {
    ParamLayout::Entry e{std::move(name), std::move(shape), layout.total};
    layout.total += e.size();
    layout.entries.push_back(std::move(e));
  };
  const Index c = hyper.channels;
  if (hyper.kind == BlockKind::res_conv) {
    push("conv.a", {c, c, 3, 3});
    push("conv.b", {c, c, 3, 3});
    return layout;
  }
  const Index h = hyper.hidden();
  push("mdta.norm", {c});
  push("mdta.qkv", {3 * c, c, 1, 1});
  push("mdta.qkv_dw", {3 * c, 1, 3, 3});
  push("mdta.temperature", {hyper.heads});
  push("mdta.project_out", {c, c, 1, 1});
  push("gdfn.norm", {c});
  push("gdfn.project_in", {2 * h, c, 1, 1});
  push("gdfn.dw", {2 * h, 1, 3, 3});
  push("gdfn.project_out", {c, h, 1, 1});
  return layout;
}

template std::vector<Tensor<float>> ParamLayout::unflatten(const Tensor<float>&) const;
template std::vector<Tensor<double>> ParamLayout::unflatten(const Tensor<double>&) const;
template Tensor<float> ParamLayout::flatten(const std::vector<Tensor<float>>&) const;
template Tensor<double> ParamLayout::flatten(const std::vector<Tensor<double>>&) const;
template Tensor<float> ParamLayout::initialize(std::mt19937_64&) const;
template Tensor<double> ParamLayout::initialize(std::mt19937_64&) const;

}  // namespace hair
