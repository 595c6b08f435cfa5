#pragma once

#include <optional>
#include <string>
#include <vector>

#include "trecx/config.hpp"
#include "trecx/ops.hpp"

namespace trecx {

enum class LayerKind { Conv, Depthwise, Pointwise, BatchNorm, Relu, ResidualAdd, Pool, Dense, Flatten };
enum class EeVariant { None, TRecX, BaselineEE };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Depthwise: return "depthwise";
    case LayerKind::Pointwise: return "pointwise";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::ResidualAdd: return "residual_add";
    case LayerKind::Pool: return "pool";
    case LayerKind::Dense: return "dense";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

inline const char* to_string(EeVariant v) {
  switch (v) {
    case EeVariant::None: return "none";
    case EeVariant::TRecX: return "trecx";
    case EeVariant::BaselineEE: return "baseline_ee";
  }
  return "?";
}

struct Projection {
  std::size_t filters = 0;
  std::size_t stride = 1;
};

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t filters = 0;  // conv / pointwise output channels, dense units
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t stride = 1;
  Padding padding = Padding::Same;
  bool bias = true;
  int from = -1;  // residual_add: layer whose output is the skip input (-1 = model input)
  std::optional<Projection> projection;
};

struct ArchitectureSpec {
  std::string name;
  std::vector<std::size_t> input;  // per-sample dims: {h, w, c} or {features}
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;
  int attach_index = -1;  // -1 = no attach point
  EeVariant ee_variant = EeVariant::None;
  bool early_view = false;
  std::string source;  // config text this spec was read from, if any
};

namespace detail {

inline LayerKind parse_layer_kind(const std::string& s, const std::string& ctx) {
  static const std::pair<const char*, LayerKind> table[] = {
      {"conv", LayerKind::Conv},           {"depthwise", LayerKind::Depthwise},
      {"pointwise", LayerKind::Pointwise}, {"batchnorm", LayerKind::BatchNorm},
      {"relu", LayerKind::Relu},           {"residual_add", LayerKind::ResidualAdd},
      {"pool", LayerKind::Pool},           {"dense", LayerKind::Dense},
      {"flatten", LayerKind::Flatten}};
  for (const auto& [name, kind] : table)
    if (s == name) return kind;
  throw ConfigError(ctx + ": unknown layer kind '" + s + "'");
}

inline EeVariant parse_ee_variant(const std::string& s) {
  if (s == "none") return EeVariant::None;
  if (s == "trecx") return EeVariant::TRecX;
  if (s == "baseline_ee") return EeVariant::BaselineEE;
  throw ConfigError("ee_variant must be one of none, trecx, baseline_ee; got '" + s + "'");
}

inline Padding parse_padding(const std::string& s, const std::string& ctx) {
  if (s == "same") return Padding::Same;
  if (s == "valid") return Padding::Valid;
  throw ConfigError(ctx + ": padding must be same or valid, got '" + s + "'");
}

inline LayerSpec parse_layer(const YAML::Node& node, std::size_t index) {
  config::Section sec(node, "layer " + std::to_string(index));
  LayerSpec l;
  l.kind = parse_layer_kind(sec.required<std::string>("kind"), sec.context());
  switch (l.kind) {
    case LayerKind::Conv:
    case LayerKind::Depthwise: {
      if (l.kind == LayerKind::Conv) l.filters = sec.required<std::size_t>("filters");
      const auto k = sec.required<std::vector<std::size_t>>("kernel");
      if (k.size() != 2) throw ConfigError(sec.context() + ": kernel must be [height, width]");
      l.kernel_h = k[0];
      l.kernel_w = k[1];
      l.stride = sec.optional<std::size_t>("stride", 1);
      l.padding = parse_padding(sec.optional<std::string>("padding", "same"), sec.context());
      l.bias = sec.optional<bool>("bias", true);
      break;
    }
    case LayerKind::Pointwise:
      l.filters = sec.required<std::size_t>("filters");
      l.bias = sec.optional<bool>("bias", true);
      break;
    case LayerKind::Dense:
      l.filters = sec.required<std::size_t>("units");
      l.bias = sec.optional<bool>("bias", true);
      break;
    case LayerKind::ResidualAdd:
      l.from = sec.required<int>("from");
      if (sec.has("projection")) {
        config::Section p(sec.node("projection"), sec.context() + " projection");
        l.projection = Projection{p.required<std::size_t>("filters"), p.optional<std::size_t>("stride", 1)};
        p.finish();
      }
      break;
    default:
      break;
  }
  if (l.stride == 0) throw ConfigError(sec.context() + ": stride must be >= 1");
  sec.finish();
  return l;
}

}  // namespace detail

inline ArchitectureSpec parse_architecture(const std::string& text, const std::string& origin = "architecture") {
  const YAML::Node root = config::parse(text, origin);
  config::Section sec(root, origin);
  ArchitectureSpec spec;
  spec.name = sec.required<std::string>("name");
  spec.input = sec.required<std::vector<std::size_t>>("input");
  if (spec.input.size() != 1 && spec.input.size() != 3)
    throw ConfigError(origin + ": input must be [height, width, channels] or [features]");
  spec.num_classes = sec.required<std::size_t>("num_classes");
  spec.attach_index = sec.optional<int>("attach_index", -1);
  spec.ee_variant = detail::parse_ee_variant(sec.optional<std::string>("ee_variant", "none"));
  spec.early_view = sec.optional<bool>("early_view", false);
  const YAML::Node layers = sec.node("layers");
  if (!layers || !layers.IsSequence() || layers.size() == 0)
    throw ConfigError(origin + ": 'layers' must be a non-empty list");
  for (std::size_t i = 0; i < layers.size(); ++i) spec.layers.push_back(detail::parse_layer(layers[i], i));
  sec.finish();
  spec.source = text;
  return spec;
}

inline ArchitectureSpec load_architecture(const std::string& path) {
  return parse_architecture(config::read_file(path), path);
}

// Canonical YAML rendering; used to echo a spec into checkpoints.
inline std::string render_architecture(const ArchitectureSpec& spec) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "name" << YAML::Value << spec.name;
  out << YAML::Key << "input" << YAML::Value << YAML::Flow << spec.input;
  out << YAML::Key << "num_classes" << YAML::Value << spec.num_classes;
  out << YAML::Key << "attach_index" << YAML::Value << spec.attach_index;
  out << YAML::Key << "ee_variant" << YAML::Value << to_string(spec.ee_variant);
  out << YAML::Key << "early_view" << YAML::Value << spec.early_view;
  out << YAML::Key << "layers" << YAML::Value << YAML::BeginSeq;
  for (const auto& l : spec.layers) {
    out << YAML::Flow << YAML::BeginMap;
    out << YAML::Key << "kind" << YAML::Value << to_string(l.kind);
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::Depthwise:
        if (l.kind == LayerKind::Conv) out << YAML::Key << "filters" << YAML::Value << l.filters;
        out << YAML::Key << "kernel" << YAML::Value << YAML::Flow
            << std::vector<std::size_t>{l.kernel_h, l.kernel_w};
        out << YAML::Key << "stride" << YAML::Value << l.stride;
        out << YAML::Key << "padding" << YAML::Value << to_string(l.padding);
        out << YAML::Key << "bias" << YAML::Value << l.bias;
        break;
      case LayerKind::Pointwise:
        out << YAML::Key << "filters" << YAML::Value << l.filters;
        out << YAML::Key << "bias" << YAML::Value << l.bias;
        break;
      case LayerKind::Dense:
        out << YAML::Key << "units" << YAML::Value << l.filters;
        out << YAML::Key << "bias" << YAML::Value << l.bias;
        break;
      case LayerKind::ResidualAdd:
        out << YAML::Key << "from" << YAML::Value << l.from;
        if (l.projection) {
          out << YAML::Key << "projection" << YAML::Value << YAML::Flow << YAML::BeginMap;
          out << YAML::Key << "filters" << YAML::Value << l.projection->filters;
          out << YAML::Key << "stride" << YAML::Value << l.projection->stride;
          out << YAML::EndMap;
        }
        break;
      default:
        break;
    }
    out << YAML::EndMap;
  }
  out << YAML::EndSeq << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

}  // namespace trecx
