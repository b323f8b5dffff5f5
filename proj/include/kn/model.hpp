#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kn/knconv.hpp"
#include "kn/norm.hpp"
#include "kn/ops.hpp"
#include "kn/rng.hpp"

namespace kn {

// ===========================================================================
// Norm selection
// ===========================================================================

enum class NormKind { Batch, Group, Layer, Instance, Kernel };

inline const char* norm_kind_name(NormKind k) {
  switch (k) {
    case NormKind::Batch: return "batch";
    case NormKind::Group: return "group";
    case NormKind::Layer: return "layer";
    case NormKind::Instance: return "instance";
    case NormKind::Kernel: return "kernel";
  }
  return "?";
}

inline NormKind norm_kind_from(const std::string& s) {
  if (s == "batch") return NormKind::Batch;
  if (s == "group") return NormKind::Group;
  if (s == "layer") return NormKind::Layer;
  if (s == "instance") return NormKind::Instance;
  if (s == "kernel") return NormKind::Kernel;
  throw std::invalid_argument("unknown norm kind: " + s);
}

enum class Arch { VGG9, ResNet8, PreactResNet18, ResNet18 };

inline const char* arch_name(Arch a) {
  switch (a) {
    case Arch::VGG9: return "vgg9";
    case Arch::ResNet8: return "resnet8";
    case Arch::PreactResNet18: return "preactresnet18";
    case Arch::ResNet18: return "resnet18";
  }
  return "?";
}

inline Arch arch_from(const std::string& s) {
  if (s == "vgg9") return Arch::VGG9;
  if (s == "resnet8") return Arch::ResNet8;
  if (s == "preactresnet18") return Arch::PreactResNet18;
  if (s == "resnet18") return Arch::ResNet18;
  throw std::invalid_argument("unknown architecture: " + s);
}

struct ModelSpec {
  Arch arch = Arch::ResNet8;
  NormKind norm = NormKind::Kernel;
  int num_classes = 10;
  int group_size = 32;          // channels per GroupNorm group
  double final_kn_dropout = -1; // < 0: use the per-architecture default
  double inner_kn_dropout = 0.1;
  int input_h = 32, input_w = 32;

  double resolved_final_dropout() const {
    if (final_kn_dropout >= 0) return final_kn_dropout;
    return arch == Arch::ResNet8 ? 0.25 : 0.5;
  }
};

// ===========================================================================
// Layers
// ===========================================================================

template <typename T>
struct ForwardCtx {
  Rng rng{0};
  std::uint64_t step = 0;
  std::int64_t sample_offset = 0;
  bool training = false;

  Rng layer_stream(int layer_id) const {
    return rng.split(static_cast<std::uint64_t>(layer_id)).split(step);
  }
};

using Shape3 = std::array<int, 3>;  // (c, h, w)

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Value<T> forward(const Value<T>& x, ForwardCtx<T>& ctx) = 0;
  virtual Shape3 out_shape(Shape3 in) const = 0;
  virtual void collect_params(const std::string& prefix,
                              std::vector<std::pair<std::string, Value<T>>>&) {}
  virtual void collect_buffers(const std::string& prefix,
                               std::vector<std::pair<std::string, Tensor4<T>*>>&) {}
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

namespace detail {

template <typename T>
Value<T> he_param(int n, int c, int h, int w, int fan_in, Rng rng,
                  const std::string& name) {
  Tensor4<T> t(n, c, h, w);
  const double std = std::sqrt(2.0 / fan_in);
  for (auto& v : t.data) v = static_cast<T>(rng.next_normal() * std);
  return leaf(std::move(t), true, name);
}

template <typename T>
Value<T> const_param(int len, T fill, const std::string& name) {
  return leaf(Tensor4<T>(len, 1, 1, 1, fill), true, name);
}

}  // namespace detail

template <typename T>
class Conv2dLayer final : public Layer<T> {
 public:
  Conv2dLayer(int ch_in, int ch_out, int k, int s, int p, bool with_bias,
              Rng rng)
      : ch_in_(ch_in), ch_out_(ch_out), k_(k), s_(s), p_(p) {
    weight_ = detail::he_param<T>(ch_out, ch_in, k, k, ch_in * k * k,
                                  rng.split(0), "weight");
    if (with_bias) bias_ = detail::const_param<T>(ch_out, T(0), "bias");
  }

  Value<T> forward(const Value<T>& x, ForwardCtx<T>&) override {
    return conv2d(x, weight_, bias_, s_, s_, p_, p_);
  }

  Shape3 out_shape(Shape3 in) const override {
    if (in[0] != ch_in_) throw std::runtime_error("conv: channel mismatch");
    return {ch_out_, conv_out_dim(in[1], p_, k_, s_),
            conv_out_dim(in[2], p_, k_, s_)};
  }

  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Value<T>>>& out) override {
    out.emplace_back(prefix + ".weight", weight_);
    if (bias_) out.emplace_back(prefix + ".bias", *bias_);
  }

 private:
  int ch_in_, ch_out_, k_, s_, p_;
  Value<T> weight_;
  std::optional<Value<T>> bias_;
};

template <typename T>
class KnConv2dLayer final : public Layer<T> {
 public:
  KnConv2dLayer(int ch_in, int ch_out, int kh, int kw, int sh, int sw, int ph,
                int pw, double dropout_p, bool with_bias, int layer_id, Rng rng) {
    p_.ch_in = ch_in;
    p_.ch_out = ch_out;
    p_.kh = kh;
    p_.kw = kw;
    p_.sh = sh;
    p_.sw = sw;
    p_.ph = ph;
    p_.pw = pw;
    p_.dropout_p = dropout_p;
    p_.weights = detail::he_param<T>(ch_out, ch_in, kh, kw, ch_in * kh * kw,
                                     rng.split(0), "weight");
    if (with_bias) p_.bias = detail::const_param<T>(ch_out, T(0), "bias");
    layer_id_ = layer_id;
  }

  Value<T> forward(const Value<T>& x, ForwardCtx<T>& ctx) override {
    return knconv_efficient(x, p_, ctx.layer_stream(layer_id_), ctx.training,
                            ctx.sample_offset);
  }

  Shape3 out_shape(Shape3 in) const override {
    if (in[0] != p_.ch_in) throw std::runtime_error("knconv: channel mismatch");
    auto [nh, nw] = kn_window_grid(in[1], in[2], p_.norm_config());
    return {p_.ch_out, nh, nw};
  }

  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Value<T>>>& out) override {
    out.emplace_back(prefix + ".weight", p_.weights);
    if (p_.bias) out.emplace_back(prefix + ".bias", *p_.bias);
  }

 private:
  KnConvParams<T> p_;
  int layer_id_ = 0;
};

template <typename T>
class KernelNormLayer final : public Layer<T> {
 public:
  KernelNormLayer(KernelNormConfig cfg, int layer_id)
      : cfg_(cfg), layer_id_(layer_id) {}

  Value<T> forward(const Value<T>& x, ForwardCtx<T>& ctx) override {
    return kernel_norm(x, cfg_, ctx.layer_stream(layer_id_), ctx.training,
                       ctx.sample_offset);
  }

  Shape3 out_shape(Shape3 in) const override {
    auto [ho, wo] = kernel_norm_output_shape(in[1], in[2], cfg_);
    return {in[0], ho, wo};
  }

 private:
  KernelNormConfig cfg_;
  int layer_id_;
};

template <typename T>
class AffineNormLayer final : public Layer<T> {
 public:
  // kind Batch keeps running statistics; others are stateless.
  AffineNormLayer(NormKind kind, int channels, int group_size)
      : kind_(kind), channels_(channels) {
    gamma_ = detail::const_param<T>(channels, T(1), "gamma");
    beta_ = detail::const_param<T>(channels, T(0), "beta");
    switch (kind) {
      case NormKind::Group: group_size_ = group_size; break;
      case NormKind::Layer: group_size_ = channels; break;
      case NormKind::Instance: group_size_ = 1; break;
      default: group_size_ = 0; break;
    }
    if (kind_ != NormKind::Batch && channels % std::max(group_size_, 1) != 0)
      throw std::invalid_argument("c not divisible by group count");
  }

  Value<T> forward(const Value<T>& x, ForwardCtx<T>& ctx) override {
    if (kind_ == NormKind::Batch)
      return batch_norm(x, gamma_, beta_, state_, ctx.training);
    return group_norm(x, gamma_, beta_, group_size_);
  }

  Shape3 out_shape(Shape3 in) const override {
    if (in[0] != channels_) throw std::runtime_error("norm: channel mismatch");
    return in;
  }

  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Value<T>>>& out) override {
    out.emplace_back(prefix + ".gamma", gamma_);
    out.emplace_back(prefix + ".beta", beta_);
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<std::pair<std::string, Tensor4<T>*>>& out) override {
    if (kind_ != NormKind::Batch) return;
    state_.init(channels_);
    out.emplace_back(prefix + ".running_mean", &state_.running_mean);
    out.emplace_back(prefix + ".running_var", &state_.running_var);
  }

  BatchNormState<T>& bn_state() { return state_; }

 private:
  NormKind kind_;
  int channels_;
  int group_size_ = 0;
  Value<T> gamma_, beta_;
  BatchNormState<T> state_;
};

enum class Act { Relu, Mish };

template <typename T>
class ActivationLayer final : public Layer<T> {
 public:
  explicit ActivationLayer(Act a) : act_(a) {}
  Value<T> forward(const Value<T>& x, ForwardCtx<T>&) override {
    return act_ == Act::Relu ? relu(x) : mish(x);
  }
  Shape3 out_shape(Shape3 in) const override { return in; }

 private:
  Act act_;
};

template <typename T>
class MaxPoolLayer final : public Layer<T> {
 public:
  MaxPoolLayer(int k, int s, int p = 0) : k_(k), s_(s), p_(p) {}
  Value<T> forward(const Value<T>& x, ForwardCtx<T>&) override {
    return maxpool2d(x, k_, k_, s_, s_, p_, p_);
  }
  Shape3 out_shape(Shape3 in) const override {
    return {in[0], conv_out_dim(in[1], p_, k_, s_),
            conv_out_dim(in[2], p_, k_, s_)};
  }

 private:
  int k_, s_, p_;
};

template <typename T>
class AdaptiveAvgPoolLayer final : public Layer<T> {
 public:
  AdaptiveAvgPoolLayer(int oh, int ow) : oh_(oh), ow_(ow) {}
  Value<T> forward(const Value<T>& x, ForwardCtx<T>&) override {
    return adaptive_avg_pool(x, oh_, ow_);
  }
  Shape3 out_shape(Shape3 in) const override { return {in[0], oh_, ow_}; }

 private:
  int oh_, ow_;
};

template <typename T>
class ClassifierLayer final : public Layer<T> {
 public:
  ClassifierLayer(int in_features, int num_classes, Rng rng)
      : in_features_(in_features), num_classes_(num_classes) {
    weight_ = detail::he_param<T>(num_classes, in_features, 1, 1, in_features,
                                  rng.split(0), "weight");
    bias_ = detail::const_param<T>(num_classes, T(0), "bias");
  }

  Value<T> forward(const Value<T>& x, ForwardCtx<T>&) override {
    return linear(flatten(x), weight_, bias_);
  }

  Shape3 out_shape(Shape3 in) const override {
    if (in[0] * in[1] * in[2] != in_features_)
      throw std::runtime_error("classifier: expected " +
                               std::to_string(in_features_) + " features, got " +
                               std::to_string(in[0] * in[1] * in[2]));
    return {num_classes_, 1, 1};
  }

  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Value<T>>>& out) override {
    out.emplace_back(prefix + ".weight", weight_);
    out.emplace_back(prefix + ".bias", bias_);
  }

 private:
  int in_features_, num_classes_;
  Value<T> weight_, bias_;
};

template <typename T>
class Sequential final : public Layer<T> {
 public:
  Sequential() = default;

  void add(std::string name, LayerPtr<T> l) {
    entries_.push_back({std::move(name), std::move(l)});
  }
  void add(LayerPtr<T> l) {
    add(std::to_string(entries_.size()), std::move(l));
  }
  std::size_t size() const { return entries_.size(); }
  Layer<T>* at(std::size_t i) { return entries_[i].layer.get(); }

  Value<T> forward(const Value<T>& x, ForwardCtx<T>& ctx) override {
    Value<T> v = x;
    for (auto& e : entries_) v = e.layer->forward(v, ctx);
    return v;
  }

  Shape3 out_shape(Shape3 in) const override {
    for (const auto& e : entries_) in = e.layer->out_shape(in);
    return in;
  }

  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Value<T>>>& out) override {
    for (auto& e : entries_)
      e.layer->collect_params(prefix.empty() ? e.name : prefix + "." + e.name, out);
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<std::pair<std::string, Tensor4<T>*>>& out) override {
    for (auto& e : entries_)
      e.layer->collect_buffers(prefix.empty() ? e.name : prefix + "." + e.name, out);
  }

 private:
  struct Entry {
    std::string name;
    LayerPtr<T> layer;
  };
  std::vector<Entry> entries_;
};

/// out = main(x) + skip(x) [+ post-activation]. skip may be empty (identity).
template <typename T>
class ResidualBlock final : public Layer<T> {
 public:
  ResidualBlock(LayerPtr<T> main, LayerPtr<T> skip, std::optional<Act> post)
      : main_(std::move(main)), skip_(std::move(skip)), post_(post) {}

  Value<T> forward(const Value<T>& x, ForwardCtx<T>& ctx) override {
    Value<T> m = main_->forward(x, ctx);
    Value<T> s = skip_ ? skip_->forward(x, ctx) : x;
    Value<T> y = add(m, s);
    if (post_) y = *post_ == Act::Relu ? relu(y) : mish(y);
    return y;
  }

  Shape3 out_shape(Shape3 in) const override {
    Shape3 m = main_->out_shape(in);
    Shape3 s = skip_ ? skip_->out_shape(in) : in;
    if (m != s)
      throw std::runtime_error("residual branches disagree on shape");
    return m;
  }

  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Value<T>>>& out) override {
    main_->collect_params(prefix + ".main", out);
    if (skip_) skip_->collect_params(prefix + ".skip", out);
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<std::pair<std::string, Tensor4<T>*>>& out) override {
    main_->collect_buffers(prefix + ".main", out);
    if (skip_) skip_->collect_buffers(prefix + ".skip", out);
  }

 private:
  LayerPtr<T> main_;
  LayerPtr<T> skip_;  // null = identity
  std::optional<Act> post_;
};

/// Pre-activation basic block: shortcut taps the pre-activated signal when
/// it needs a projection, the raw input otherwise.
template <typename T>
class PreactBlock final : public Layer<T> {
 public:
  PreactBlock(LayerPtr<T> norm1, LayerPtr<T> conv1, LayerPtr<T> norm2,
              LayerPtr<T> conv2, LayerPtr<T> shortcut)
      : norm1_(std::move(norm1)), conv1_(std::move(conv1)),
        norm2_(std::move(norm2)), conv2_(std::move(conv2)),
        shortcut_(std::move(shortcut)) {}

  Value<T> forward(const Value<T>& x, ForwardCtx<T>& ctx) override {
    Value<T> pre = relu(norm1_->forward(x, ctx));
    Value<T> s = shortcut_ ? shortcut_->forward(pre, ctx) : x;
    Value<T> y = conv1_->forward(pre, ctx);
    y = relu(norm2_->forward(y, ctx));
    y = conv2_->forward(y, ctx);
    return add(y, s);
  }

  Shape3 out_shape(Shape3 in) const override {
    Shape3 pre = norm1_->out_shape(in);
    Shape3 s = shortcut_ ? shortcut_->out_shape(pre) : in;
    Shape3 m = conv2_->out_shape(norm2_->out_shape(conv1_->out_shape(pre)));
    if (m != s) throw std::runtime_error("preact branches disagree on shape");
    return m;
  }

  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Value<T>>>& out) override {
    norm1_->collect_params(prefix + ".norm1", out);
    conv1_->collect_params(prefix + ".conv1", out);
    norm2_->collect_params(prefix + ".norm2", out);
    conv2_->collect_params(prefix + ".conv2", out);
    if (shortcut_) shortcut_->collect_params(prefix + ".shortcut", out);
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<std::pair<std::string, Tensor4<T>*>>& out) override {
    norm1_->collect_buffers(prefix + ".norm1", out);
    norm2_->collect_buffers(prefix + ".norm2", out);
    if (shortcut_) shortcut_->collect_buffers(prefix + ".shortcut", out);
  }

 private:
  LayerPtr<T> norm1_, conv1_, norm2_, conv2_, shortcut_;
};

// ===========================================================================
// LayerGraph
// ===========================================================================

template <typename T>
struct LayerGraph {
  ModelSpec spec;
  std::uint64_t seed = 0;
  std::shared_ptr<Sequential<T>> root;
  Shape3 input_shape{};

  Value<T> forward(const Value<T>& x, ForwardCtx<T>& ctx) const {
    return root->forward(x, ctx);
  }

  std::vector<std::pair<std::string, Value<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Value<T>>> out;
    root->collect_params("net", out);
    return out;
  }

  std::vector<Value<T>> parameters() const {
    std::vector<Value<T>> out;
    for (auto& [n, p] : named_parameters()) out.push_back(p);
    return out;
  }

  std::vector<std::pair<std::string, Tensor4<T>*>> named_buffers() const {
    std::vector<std::pair<std::string, Tensor4<T>*>> out;
    root->collect_buffers("net", out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t s = 0;
    for (auto& [n, p] : named_parameters()) s += p->value.size();
    return s;
  }

  Shape3 output_shape() const { return root->out_shape(input_shape); }

  void copy_state_from(const LayerGraph<T>& other) {
    auto mine = named_parameters();
    auto theirs = other.named_parameters();
    if (mine.size() != theirs.size())
      throw std::runtime_error("copy_state: parameter sets differ");
    for (std::size_t i = 0; i < mine.size(); ++i) {
      if (mine[i].first != theirs[i].first)
        throw std::runtime_error("copy_state: name mismatch " + mine[i].first);
      mine[i].second->value = theirs[i].second->value;
    }
    auto mb = named_buffers();
    auto tb = other.named_buffers();
    for (std::size_t i = 0; i < mb.size(); ++i) *mb[i].second = *tb[i].second;
  }
};

}  // namespace kn
