#pragma once

// Compiles an ArchitectureSpec into a two-exit computation graph.
//
// Node order is topological: common block, early-exit block, final block.
// The final block optionally carries an assist branch in front of the final
// pooling layer: the early-view depthwise conv (weights linked to the early
// exit) or, for ablations, the early-exit feature maps themselves.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trecx/architecture.hpp"
#include "trecx/ops.hpp"
#include "trecx/params.hpp"
#include "trecx/rng.hpp"

namespace trecx {

enum class Block { Common, EarlyExit, Final };
enum class FinalAssist { None, EarlyView, FmapConcat };

inline const char* to_string(Block b) {
  switch (b) {
    case Block::Common: return "common";
    case Block::EarlyExit: return "early_exit";
    case Block::Final: return "final";
  }
  return "?";
}

enum class NodeOp { Conv, Depthwise, BatchNorm, Relu, Add, GlobalPool, AvgPool, Dense, Flatten, Concat, Slice };

inline constexpr int kModelInput = -1;

struct Node {
  NodeOp op = NodeOp::Relu;
  std::string name;
  int input = kModelInput;
  int input2 = kModelInput;  // second operand of Add / Concat
  std::vector<std::size_t> in_dims, out_dims;  // per sample
  Block block = Block::Common;
  std::size_t stride = 1, window = 1, first = 0, count = 0;
  Padding padding = Padding::Same;
  std::string kernel, bias, scale, shift, mean, var;  // parameter names, empty when unused
};

// Per-block costs in FLOPs.
struct FlopsBreakdown {
  std::uint64_t common = 0, early_exit = 0, final_block = 0;

  std::uint64_t early_path() const { return common + early_exit; }     // C_E-e
  std::uint64_t final_path() const { return early_path() + final_block; }  // C_E-f
  std::uint64_t total() const { return final_path(); }
};

// Parameter pairs tying DCONV_Ef to the first `channels` filters of DCONV_Ee.
struct TransferLink {
  std::string source_kernel, source_bias, target_kernel, target_bias;
  std::size_t channels = 0;
};

struct BuildOptions {
  // Replaces the early-view head with the early-exit feature-map concatenation ablation.
  bool fmap_concat = false;
};

template <typename T>
struct Outputs {
  Tensor<T> logits_ee, logits_ef, softmax_ee, softmax_ef;  // *_ee empty without an early exit
  std::vector<std::size_t> node_calls;
};

template <typename T>
struct Trace {
  Mode mode = Mode::Infer;
  Tensor<T> input;
  std::vector<Tensor<T>> acts;
  std::vector<BatchNormCache<T>> bn;
};

template <typename T>
class GraphModel {
 public:
  static GraphModel build(const ArchitectureSpec& spec, std::uint64_t seed, BuildOptions opts = {}) {
    GraphModel m;
    m.spec_ = spec;
    m.seed_ = seed;
    m.opts_ = opts;
    m.compile(opts);
    m.initialize();
    return m;
  }

  const ArchitectureSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  const BuildOptions& build_options() const { return opts_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  bool has_early_exit() const { return ee_logits_ >= 0; }
  FinalAssist assist() const { return assist_; }
  const std::optional<TransferLink>& transfer_link() const { return link_; }
  std::size_t num_classes() const { return spec_.num_classes; }
  int early_logits_node() const { return ee_logits_; }
  int final_logits_node() const { return ef_logits_; }

  // Width of the tensor entering the final dense layer.
  std::size_t final_dense_inputs() const { return nodes_[static_cast<std::size_t>(ef_logits_)].in_dims[0]; }

  Block param_block(const std::string& name) const { return param_blocks_.at(name); }

  std::size_t count_params() const { return params_.scalar_count(false); }
  std::size_t count_trainable_params() const { return params_.scalar_count(true); }
  std::size_t count_params(Block b) const {
    std::size_t n = 0;
    for (const auto& p : params_.entries())
      if (param_blocks_.at(p.name) == b) n += p.value.size();
    return n;
  }

  std::uint64_t node_flops(std::size_t i) const { return flops_of(nodes_[i]); }

  FlopsBreakdown count_flops() const {
    FlopsBreakdown f;
    for (const auto& n : nodes_) {
      const auto c = flops_of(n);
      switch (n.block) {
        case Block::Common: f.common += c; break;
        case Block::EarlyExit: f.early_exit += c; break;
        case Block::Final: f.final_block += c; break;
      }
    }
    return f;
  }

  std::vector<std::size_t> input_shape(std::size_t batch) const {
    std::vector<std::size_t> s{batch};
    s.insert(s.end(), spec_.input.begin(), spec_.input.end());
    return s;
  }

  // Runs every node once; both heads are always evaluated.
  Outputs<T> forward(const Tensor<T>& x, Mode mode, Trace<T>* trace = nullptr) {
    const Shape expected(input_shape(x.rank() ? x.dim(0) : 0));
    if (x.shape() != expected) throw ShapeError("model input", x.shape(), expected);

    std::vector<Tensor<T>> acts(nodes_.size());
    std::vector<BatchNormCache<T>> bn(nodes_.size());
    Outputs<T> out;
    out.node_calls.assign(nodes_.size(), 0);
    auto in = [&](int id) -> const Tensor<T>& { return id == kModelInput ? x : acts[static_cast<std::size_t>(id)]; };
    static const Tensor<T> kNone;
    auto param = [&](const std::string& name) -> const Tensor<T>& {
      return name.empty() ? kNone : params_.value(name);
    };

    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      const Tensor<T>& a = in(n.input);
      switch (n.op) {
        case NodeOp::Conv:
          acts[i] = conv2d(a, param(n.kernel), param(n.bias), n.stride, n.padding);
          break;
        case NodeOp::Depthwise:
          acts[i] = depthwise_conv2d(a, param(n.kernel), param(n.bias), n.stride, n.padding);
          break;
        case NodeOp::BatchNorm:
          acts[i] = batch_norm(a, param(n.scale), param(n.shift), params_.value(n.mean), params_.value(n.var), mode,
                               &bn[i]);
          break;
        case NodeOp::Relu: acts[i] = relu(a); break;
        case NodeOp::Add: acts[i] = add(a, in(n.input2)); break;
        case NodeOp::GlobalPool: acts[i] = global_avg_pool(a); break;
        case NodeOp::AvgPool: acts[i] = avg_pool(a, n.window); break;
        case NodeOp::Dense: acts[i] = dense(a, param(n.kernel), param(n.bias)); break;
        case NodeOp::Flatten: acts[i] = a.reshaped(Shape{a.dim(0), a.size() / a.dim(0)}); break;
        case NodeOp::Concat: acts[i] = concat_channels(a, in(n.input2)); break;
        case NodeOp::Slice: acts[i] = slice_channels(a, n.first, n.count); break;
      }
      ++out.node_calls[i];
    }

    out.logits_ef = acts[static_cast<std::size_t>(ef_logits_)];
    out.softmax_ef = softmax(out.logits_ef);
    if (has_early_exit()) {
      out.logits_ee = acts[static_cast<std::size_t>(ee_logits_)];
      out.softmax_ee = softmax(out.logits_ee);
    }
    if (trace) {
      trace->mode = mode;
      trace->input = x;
      trace->acts = std::move(acts);
      trace->bn = std::move(bn);
    }
    return out;
  }

  // Reverse-mode pass seeded with gradients w.r.t. both heads' logits (either may be
  // empty). Parameter gradients are accumulated into the ParamSet gradient slots.
  // `training` rejects traces recorded with inference-mode batch norm.
  Tensor<T> backward(const Trace<T>& trace, const Tensor<T>& d_logits_ee, const Tensor<T>& d_logits_ef,
                     bool training = true) {
    if (trace.acts.size() != nodes_.size()) throw std::logic_error("backward: trace does not match model");
    std::vector<Tensor<T>> g(nodes_.size());
    Tensor<T> d_input;
    auto push = [&](int id, Tensor<T> t) {
      Tensor<T>& dst = id == kModelInput ? d_input : g[static_cast<std::size_t>(id)];
      if (dst.empty()) {
        dst = std::move(t);
      } else {
        if (dst.shape() != t.shape()) throw ShapeError("gradient accumulation", dst.shape(), t.shape());
        for (std::size_t k = 0; k < t.size(); ++k) dst[k] += t[k];
      }
    };
    if (!d_logits_ef.empty()) push(ef_logits_, d_logits_ef);
    if (!d_logits_ee.empty()) {
      if (!has_early_exit()) throw std::logic_error("backward: model has no early exit");
      push(ee_logits_, d_logits_ee);
    }
    auto in = [&](int id) -> const Tensor<T>& {
      return id == kModelInput ? trace.input : trace.acts[static_cast<std::size_t>(id)];
    };

    for (std::size_t idx = nodes_.size(); idx-- > 0;) {
      if (g[idx].empty()) continue;
      const Node& n = nodes_[idx];
      const Tensor<T>& dy = g[idx];
      const Tensor<T>& a = in(n.input);
      switch (n.op) {
        case NodeOp::Conv: {
          auto r = conv2d_backward(a, params_.value(n.kernel), !n.bias.empty(), n.stride, n.padding, dy);
          params_.accumulate_grad(n.kernel, r.kernel);
          if (!n.bias.empty()) params_.accumulate_grad(n.bias, r.bias);
          push(n.input, std::move(r.input));
          break;
        }
        case NodeOp::Depthwise: {
          auto r = depthwise_conv2d_backward(a, params_.value(n.kernel), !n.bias.empty(), n.stride, n.padding, dy);
          params_.accumulate_grad(n.kernel, r.kernel);
          if (!n.bias.empty()) params_.accumulate_grad(n.bias, r.bias);
          push(n.input, std::move(r.input));
          break;
        }
        case NodeOp::BatchNorm: {
          auto r = batch_norm_backward(trace.bn[idx], params_.value(n.scale), dy, training);
          params_.accumulate_grad(n.scale, r.scale);
          params_.accumulate_grad(n.shift, r.shift);
          push(n.input, std::move(r.input));
          break;
        }
        case NodeOp::Relu: push(n.input, relu_backward(a, dy)); break;
        case NodeOp::Add:
          push(n.input, dy);
          push(n.input2, dy);
          break;
        case NodeOp::GlobalPool: push(n.input, global_avg_pool_backward(a.shape(), dy)); break;
        case NodeOp::AvgPool: push(n.input, avg_pool_backward(a.shape(), n.window, dy)); break;
        case NodeOp::Dense: {
          auto r = dense_backward(a, params_.value(n.kernel), !n.bias.empty(), dy);
          params_.accumulate_grad(n.kernel, r.weights);
          if (!n.bias.empty()) params_.accumulate_grad(n.bias, r.bias);
          push(n.input, std::move(r.input));
          break;
        }
        case NodeOp::Flatten: push(n.input, dy.reshaped(a.shape())); break;
        case NodeOp::Concat: {
          auto [da, db] = concat_channels_backward(a.dim(3), dy);
          push(n.input, std::move(da));
          push(n.input2, std::move(db));
          break;
        }
        case NodeOp::Slice: push(n.input, slice_channels_backward(a.shape(), n.first, dy)); break;
      }
    }
    return d_input;
  }

  // Copies every parameter of `other` whose name and shape match; returns the count copied.
  std::size_t copy_matching_params(const GraphModel& other) {
    std::size_t copied = 0;
    for (auto& p : params_.entries()) {
      if (!other.params_.contains(p.name)) continue;
      const auto& src = other.params_.get(p.name);
      if (src.value.shape() != p.value.shape()) continue;
      p.value = src.value;
      ++copied;
    }
    return copied;
  }

 private:
  GraphModel() = default;

  static std::uint64_t elems(const std::vector<std::size_t>& d) {
    std::uint64_t n = 1;
    for (auto v : d) n *= v;
    return n;
  }

  std::uint64_t flops_of(const Node& n) const {
    const std::uint64_t out = elems(n.out_dims);
    const std::uint64_t bias_adds = n.bias.empty() ? 0 : out;
    switch (n.op) {
      case NodeOp::Conv: {
        const auto& k = params_.value(n.kernel);
        return 2 * out * k.dim(0) * k.dim(1) * k.dim(2) + bias_adds;
      }
      case NodeOp::Depthwise: {
        const auto& k = params_.value(n.kernel);
        return 2 * out * k.dim(0) * k.dim(1) + bias_adds;
      }
      case NodeOp::Dense: return 2 * elems(n.in_dims) * out + bias_adds;
      case NodeOp::GlobalPool:
      case NodeOp::AvgPool: return elems(n.in_dims);
      case NodeOp::Add: return out;
      default: return 0;
    }
  }

  // -- compilation -------------------------------------------------------------

  static Node make_node(NodeOp op, std::string name, int input, int input2, std::vector<std::size_t> in_dims,
                        std::vector<std::size_t> out_dims, Block block) {
    Node n;
    n.op = op;
    n.name = std::move(name);
    n.input = input;
    n.input2 = input2;
    n.in_dims = std::move(in_dims);
    n.out_dims = std::move(out_dims);
    n.block = block;
    return n;
  }

  struct Cursor {
    int id = kModelInput;
    std::vector<std::size_t> dims;
  };

  int emit(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void declare(const std::string& name, Shape shape, Block block, bool trainable = true) {
    params_.add(name, Tensor<T>(std::move(shape)), trainable);
    param_blocks_[name] = block;
  }

  static void require_spatial(const Cursor& c, const std::string& what) {
    if (c.dims.size() != 3)
      throw ShapeError(what + " needs a height x width x channels input, got rank " + std::to_string(c.dims.size()));
  }

  Cursor emit_conv(const Cursor& c, const std::string& name, std::size_t kh, std::size_t kw, std::size_t filters,
                   std::size_t stride, Padding pad, bool bias, Block block) {
    require_spatial(c, name);
    const auto gh = axis_geometry(c.dims[0], kh, stride, pad);
    const auto gw = axis_geometry(c.dims[1], kw, stride, pad);
    Node n = make_node(NodeOp::Conv, name, c.id, kModelInput, c.dims, {gh.out, gw.out, filters}, block);
    n.stride = stride;
    n.padding = pad;
    n.kernel = name + "/kernel";
    declare(n.kernel, Shape{kh, kw, c.dims[2], filters}, block);
    if (bias) {
      n.bias = name + "/bias";
      declare(n.bias, Shape{filters}, block);
    }
    Cursor r{0, n.out_dims};
    r.id = emit(std::move(n));
    return r;
  }

  Cursor emit_depthwise(const Cursor& c, const std::string& name, std::size_t kh, std::size_t kw, std::size_t stride,
                        Padding pad, bool bias, Block block) {
    require_spatial(c, name);
    const auto gh = axis_geometry(c.dims[0], kh, stride, pad);
    const auto gw = axis_geometry(c.dims[1], kw, stride, pad);
    Node n = make_node(NodeOp::Depthwise, name, c.id, kModelInput, c.dims, {gh.out, gw.out, c.dims[2]}, block);
    n.stride = stride;
    n.padding = pad;
    n.kernel = name + "/kernel";
    declare(n.kernel, Shape{kh, kw, c.dims[2]}, block);
    if (bias) {
      n.bias = name + "/bias";
      declare(n.bias, Shape{c.dims[2]}, block);
    }
    Cursor r{0, n.out_dims};
    r.id = emit(std::move(n));
    return r;
  }

  Cursor emit_simple(const Cursor& c, NodeOp op, const std::string& name, std::vector<std::size_t> out, Block block) {
    Node n = make_node(op, name, c.id, kModelInput, c.dims, std::move(out), block);
    Cursor r{0, n.out_dims};
    r.id = emit(std::move(n));
    return r;
  }

  Cursor emit_pool(const Cursor& c, const std::string& name, Block block) {
    require_spatial(c, name);
    return emit_simple(c, NodeOp::GlobalPool, name, {c.dims[2]}, block);
  }

  Cursor emit_dense(const Cursor& c, const std::string& name, std::size_t units, bool bias, Block block) {
    if (c.dims.size() != 1) throw ShapeError(name + ": dense needs a flat input; add a pool or flatten layer");
    Node n = make_node(NodeOp::Dense, name, c.id, kModelInput, c.dims, {units}, block);
    n.kernel = name + "/weights";
    declare(n.kernel, Shape{c.dims[0], units}, block);
    if (bias) {
      n.bias = name + "/bias";
      declare(n.bias, Shape{units}, block);
    }
    Cursor r{0, n.out_dims};
    r.id = emit(std::move(n));
    return r;
  }

  Cursor emit_binary(NodeOp op, const Cursor& a, const Cursor& b, const std::string& name,
                     std::vector<std::size_t> out, Block block) {
    Node n = make_node(op, name, a.id, b.id, a.dims, std::move(out), block);
    Cursor r{0, n.out_dims};
    r.id = emit(std::move(n));
    return r;
  }

  // T-RecX block: PCONV (2x channels) -> relu -> DCONV 3x3/2 -> relu -> pool -> dense.
  void emit_early_exit(const Cursor& at) {
    const Block b = Block::EarlyExit;
    Cursor c = at;
    if (spec_.ee_variant == EeVariant::TRecX) {
      require_spatial(c, "early exit attach point");
      ee_width_ = 2 * c.dims[2];
      c = emit_conv(c, "ee/pconv", 1, 1, ee_width_, 1, Padding::Same, true, b);
      c = emit_simple(c, NodeOp::Relu, "ee/pconv_relu", c.dims, b);
      c = emit_depthwise(c, "ee/dconv", 3, 3, 2, Padding::Same, true, b);
      ee_dconv_node_ = c.id;
      c = emit_simple(c, NodeOp::Relu, "ee/dconv_relu", c.dims, b);
      ee_features_ = c;
    }
    c = emit_pool(c, "ee/pool", b);
    c = emit_dense(c, "ee/dense", spec_.num_classes, true, b);
    ee_logits_ = c.id;
  }

  // Inserted between the final conv block and the final pool.
  Cursor emit_assist(const Cursor& final_fmaps, const BuildOptions& opts) {
    const Block b = Block::Final;
    require_spatial(final_fmaps, "final assist branch");
    if (opts.fmap_concat) {
      assist_ = FinalAssist::FmapConcat;
      const auto& e = ee_features_.dims;
      const auto& f = final_fmaps.dims;
      if (e[0] % f[0] != 0 || e[1] % f[1] != 0 || e[0] / f[0] != e[1] / f[1])
        throw ShapeError("fmap concat: early-exit maps " + std::to_string(e[0]) + "x" + std::to_string(e[1]) +
                         " do not stride-align to final maps " + std::to_string(f[0]) + "x" + std::to_string(f[1]));
      Cursor aligned = ee_features_;
      const std::size_t window = e[0] / f[0];
      if (window > 1) {
        Node n = make_node(NodeOp::AvgPool, "assist/align", ee_features_.id, kModelInput, e, {f[0], f[1], e[2]}, b);
        n.window = window;
        aligned = Cursor{emit(std::move(n)), {f[0], f[1], e[2]}};
      }
      return emit_binary(NodeOp::Concat, final_fmaps, aligned, "assist/concat", {f[0], f[1], f[2] + e[2]}, b);
    }
    assist_ = FinalAssist::EarlyView;
    const std::size_t c_ef = ee_width_ / 2;
    if (final_fmaps.dims[2] < c_ef)
      throw ConfigError("early view needs " + std::to_string(c_ef) + " channels but the final block has " +
                        std::to_string(final_fmaps.dims[2]));
    Node slice = make_node(NodeOp::Slice, "ev/slice", final_fmaps.id, kModelInput, final_fmaps.dims,
               {final_fmaps.dims[0], final_fmaps.dims[1], c_ef}, b);
    slice.first = 0;
    slice.count = c_ef;
    Cursor s{emit(std::move(slice)), {final_fmaps.dims[0], final_fmaps.dims[1], c_ef}};
    Cursor ev = emit_depthwise(s, "ev/dconv", 3, 3, 1, Padding::Same, true, b);
    link_ = TransferLink{"ee/dconv/kernel", "ee/dconv/bias", "ev/dconv/kernel", "ev/dconv/bias", c_ef};
    return emit_binary(NodeOp::Concat, final_fmaps, ev, "ev/concat",
                       {final_fmaps.dims[0], final_fmaps.dims[1], final_fmaps.dims[2] + c_ef}, b);
  }

  void compile(const BuildOptions& opts) {
    const auto& layers = spec_.layers;
    const int count = static_cast<int>(layers.size());
    if (spec_.num_classes == 0) throw ConfigError(spec_.name + ": num_classes must be positive");
    if (spec_.ee_variant != EeVariant::None && spec_.attach_index < 0)
      throw ConfigError(spec_.name + ": an early exit needs attach_index");
    if (spec_.attach_index >= 0 && spec_.attach_index > count - 2)
      throw ConfigError(spec_.name + ": attach_index " + std::to_string(spec_.attach_index) +
                        " must leave at least one layer after the attach point");
    if (spec_.early_view && spec_.ee_variant != EeVariant::TRecX)
      throw ConfigError(spec_.name + ": early_view requires the trecx early exit");
    if (opts.fmap_concat && spec_.ee_variant != EeVariant::TRecX)
      throw ConfigError(spec_.name + ": fmap concat requires the trecx early exit");
    if (opts.fmap_concat && spec_.early_view)
      throw ConfigError(spec_.name + ": fmap concat replaces early view; disable early_view");

    int final_pool = -1;
    for (int i = 0; i < count; ++i)
      if (layers[static_cast<std::size_t>(i)].kind == LayerKind::Pool) final_pool = i;
    const bool wants_assist = spec_.early_view || opts.fmap_concat;
    if (wants_assist && final_pool <= spec_.attach_index)
      throw ConfigError(spec_.name + ": assist branch needs a pool layer after the attach point");

    std::vector<Cursor> outputs;
    Cursor c{kModelInput, spec_.input};
    for (int i = 0; i < count; ++i) {
      const auto& l = layers[static_cast<std::size_t>(i)];
      const Block b = spec_.attach_index >= 0 && i <= spec_.attach_index ? Block::Common : Block::Final;
      const std::string name = "L" + std::to_string(i);
      try {
        switch (l.kind) {
          case LayerKind::Conv:
            c = emit_conv(c, name, l.kernel_h, l.kernel_w, l.filters, l.stride, l.padding, l.bias, b);
            break;
          case LayerKind::Pointwise:
            c = emit_conv(c, name, 1, 1, l.filters, 1, Padding::Same, l.bias, b);
            break;
          case LayerKind::Depthwise:
            c = emit_depthwise(c, name, l.kernel_h, l.kernel_w, l.stride, l.padding, l.bias, b);
            break;
          case LayerKind::BatchNorm: {
            const std::size_t ch = c.dims.back();
            Node n = make_node(NodeOp::BatchNorm, name, c.id, kModelInput, c.dims, c.dims, b);
            n.scale = name + "/gamma";
            n.shift = name + "/beta";
            n.mean = name + "/moving_mean";
            n.var = name + "/moving_var";
            declare(n.scale, Shape{ch}, b);
            declare(n.shift, Shape{ch}, b);
            declare(n.mean, Shape{ch}, b, false);
            declare(n.var, Shape{ch}, b, false);
            c = Cursor{emit(std::move(n)), c.dims};
            break;
          }
          case LayerKind::Relu: c = emit_simple(c, NodeOp::Relu, name, c.dims, b); break;
          case LayerKind::ResidualAdd: {
            if (l.from < -1 || l.from >= i)
              throw ConfigError("residual 'from' must reference an earlier layer or -1");
            Cursor skip = l.from == -1 ? Cursor{kModelInput, spec_.input} : outputs[static_cast<std::size_t>(l.from)];
            if (l.projection)
              skip = emit_conv(skip, name + "/proj", 1, 1, l.projection->filters, l.projection->stride,
                               Padding::Same, true, b);
            if (skip.dims != c.dims)
              throw ShapeError("residual operands", Shape(skip.dims), Shape(c.dims));
            c = emit_binary(NodeOp::Add, c, skip, name, c.dims, b);
            break;
          }
          case LayerKind::Pool:
            if (i == final_pool && wants_assist) c = emit_assist(c, opts);
            c = emit_pool(c, name, b);
            break;
          case LayerKind::Dense: c = emit_dense(c, name, l.filters, l.bias, b); break;
          case LayerKind::Flatten:
            c = emit_simple(c, NodeOp::Flatten, name, {static_cast<std::size_t>(elems(c.dims))}, b);
            break;
        }
      } catch (const ShapeError& e) {
        throw ShapeError(spec_.name + ": layer " + std::to_string(i) + " (" + to_string(l.kind) + "): " + e.what());
      } catch (const ConfigError& e) {
        throw ConfigError(spec_.name + ": layer " + std::to_string(i) + " (" + to_string(l.kind) + "): " + e.what());
      }
      outputs.push_back(c);
      if (i == spec_.attach_index && spec_.ee_variant != EeVariant::None) emit_early_exit(c);
    }
    if (c.dims != std::vector<std::size_t>{spec_.num_classes})
      throw ShapeError(spec_.name + ": network output " + Shape(c.dims).str() + " does not match num_classes " +
                       std::to_string(spec_.num_classes));
    if (nodes_[static_cast<std::size_t>(c.id)].op != NodeOp::Dense)
      throw ConfigError(spec_.name + ": the last layer must be dense");
    ef_logits_ = c.id;
  }

  // He-uniform kernels, zero biases/shift/mean, unit scale/var. Each tensor draws from
  // its own stream keyed by (seed, name) so adding heads leaves other tensors unchanged.
  void initialize() {
    for (auto& p : params_.entries()) {
      const std::string& name = p.name;
      auto ends_with = [&](const char* suffix) {
        const std::string s(suffix);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
      };
      if (ends_with("/kernel") || ends_with("/weights")) {
        const auto& d = p.value.shape();
        const std::size_t fan_in = d.rank() == 2 ? d[0] : d.rank() == 3 ? d[0] * d[1] : d[0] * d[1] * d[2];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        SplitMix64 rng(stream_seed(seed_, name));
        for (auto& v : p.value.vec()) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * limit);
      } else if (ends_with("/gamma") || ends_with("/moving_var")) {
        p.value.fill(T{1});
      } else {
        p.value.fill(T{0});
      }
    }
    if (link_) copy_transfer_slice(params_, *link_);
  }

 public:
  // DCONV_Ef <- first `channels` filters of DCONV_Ee (kernel and bias), bit-exact.
  static void copy_transfer_slice(ParamSet<T>& ps, const TransferLink& link) {
    const auto& src = ps.value(link.source_kernel);
    auto& dst = ps.value(link.target_kernel);
    const std::size_t taps = src.dim(0) * src.dim(1), cs = src.dim(2), cd = dst.dim(2);
    for (std::size_t t = 0; t < taps; ++t)
      for (std::size_t ch = 0; ch < link.channels; ++ch) dst[t * cd + ch] = src[t * cs + ch];
    const auto& sb = ps.value(link.source_bias);
    auto& db = ps.value(link.target_bias);
    for (std::size_t ch = 0; ch < link.channels; ++ch) db[ch] = sb[ch];
  }

 private:
  ArchitectureSpec spec_;
  std::uint64_t seed_ = 0;
  BuildOptions opts_;
  std::vector<Node> nodes_;
  ParamSet<T> params_;
  std::map<std::string, Block> param_blocks_;
  int ee_logits_ = -1, ef_logits_ = -1, ee_dconv_node_ = -1;
  std::size_t ee_width_ = 0;
  Cursor ee_features_;
  FinalAssist assist_ = FinalAssist::None;
  std::optional<TransferLink> link_;
};

// Adds an early exit to a model that has none; existing parameters carry over.
template <typename T>
GraphModel<T> attach_early_exit(const GraphModel<T>& model, EeVariant variant) {
  if (model.has_early_exit()) throw std::logic_error("model already has an early exit");
  if (variant == EeVariant::None) throw std::invalid_argument("attach_early_exit: variant must not be none");
  ArchitectureSpec spec = model.spec();
  spec.ee_variant = variant;
  auto out = GraphModel<T>::build(spec, model.seed());
  out.copy_matching_params(model);
  return out;
}

// Adds the early-view head to a model carrying the T-RecX early exit. DCONV_Ef starts
// as a copy of the linked DCONV_Ee filters; the final dense layer is re-initialized at its new width.
template <typename T>
GraphModel<T> attach_early_view(const GraphModel<T>& model) {
  if (model.spec().ee_variant != EeVariant::TRecX)
    throw std::logic_error("attach_early_view requires the trecx early exit");
  if (model.assist() != FinalAssist::None) throw std::logic_error("model already has an assist head");
  ArchitectureSpec spec = model.spec();
  spec.early_view = true;
  auto out = GraphModel<T>::build(spec, model.seed());
  out.copy_matching_params(model);
  GraphModel<T>::copy_transfer_slice(out.params(), *out.transfer_link());
  return out;
}

}  // namespace trecx
