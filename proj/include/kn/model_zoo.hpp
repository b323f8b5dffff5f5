#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kn/model.hpp"

namespace kn {

// ===========================================================================
// Block builders
// ===========================================================================

/// Shared bookkeeping while assembling a network: parameter streams are
/// derived per layer index, and every dropout-carrying layer gets a stable
/// id for its mask stream.
struct BuildCtx {
  Rng param_rng;
  int next_layer_id = 0;
  Act act = Act::Relu;
  double inner_dropout = 0.1;

  explicit BuildCtx(std::uint64_t seed) : param_rng(seed) {}

  Rng next_param_stream() {
    return param_rng.split(static_cast<std::uint64_t>(next_layer_id));
  }
  int take_id() { return next_layer_id++; }
};

template <typename T>
LayerPtr<T> make_knconv(BuildCtx& ctx, int ch_in, int ch_out, int k, int s,
                        int p, double dropout) {
  Rng prng = ctx.next_param_stream();
  return std::make_unique<KnConv2dLayer<T>>(ch_in, ch_out, k, k, s, s, p, p,
                                            dropout, /*bias=*/true,
                                            ctx.take_id(), prng);
}

template <typename T>
LayerPtr<T> make_kernel_norm(BuildCtx& ctx, int kh, int kw, int sh, int sw,
                             double dropout) {
  KernelNormConfig cfg;
  cfg.kh = kh;
  cfg.kw = kw;
  cfg.sh = sh;
  cfg.sw = sw;
  cfg.dropout_p = dropout;
  return std::make_unique<KernelNormLayer<T>>(cfg, ctx.take_id());
}

template <typename T>
LayerPtr<T> make_conv(BuildCtx& ctx, int ch_in, int ch_out, int k, int s,
                      int p, bool bias) {
  Rng prng = ctx.next_param_stream();
  ctx.take_id();
  return std::make_unique<Conv2dLayer<T>>(ch_in, ch_out, k, s, p, bias, prng);
}

/// Kernel-normalized VGG fragment: 3x3 KNConv (stride/pad 1) + activation;
/// the pooled variant inserts a KernelNorm before the 2x2 max-pool.
template <typename T>
std::unique_ptr<Sequential<T>> build_kn_vgg_block(BuildCtx& ctx, int ch_in,
                                                  int ch_out,
                                                  bool with_maxpool) {
  if (ch_in < 1 || ch_out < 1)
    throw std::invalid_argument("vgg block: channels must be positive");
  auto seq = std::make_unique<Sequential<T>>();
  seq->add("conv", make_knconv<T>(ctx, ch_in, ch_out, 3, 1, 1, ctx.inner_dropout));
  seq->add("act", std::make_unique<ActivationLayer<T>>(ctx.act));
  if (with_maxpool) {
    seq->add("norm", make_kernel_norm<T>(ctx, 2, 2, 2, 2, ctx.inner_dropout));
    seq->add("pool", std::make_unique<MaxPoolLayer<T>>(2, 2));
  }
  return seq;
}

enum class Shortcut { Identity, Conv };

/// Kernel-normalized basic block. Identity: x + f(x) with two 3x3 KNConvs.
/// Conv shortcut: the skip is a 2x2 stride-2 zero-pad KNConv and the main
/// path ends in a stride-2 KernelNorm placed before the residual sum, so
/// both branches downsample by 2 (even spatial dims required).
template <typename T>
std::unique_ptr<ResidualBlock<T>> build_kn_basic_block(BuildCtx& ctx,
                                                       int ch_in, int ch_out,
                                                       Shortcut sc) {
  if (sc == Shortcut::Identity && ch_in != ch_out)
    throw std::invalid_argument(
        "identity shortcut requires matching channels");
  auto main = std::make_unique<Sequential<T>>();
  main->add("conv1", make_knconv<T>(ctx, ch_in, ch_out, 3, 1, 1, ctx.inner_dropout));
  main->add("act1", std::make_unique<ActivationLayer<T>>(ctx.act));
  main->add("conv2", make_knconv<T>(ctx, ch_out, ch_out, 3, 1, 1, ctx.inner_dropout));
  main->add("act2", std::make_unique<ActivationLayer<T>>(ctx.act));
  LayerPtr<T> skip;
  if (sc == Shortcut::Conv) {
    // 1x1-kernel stride-2 KernelNorm: normalizes across channels at the
    // kept positions and halves the grid to match the skip branch
    main->add("aggnorm", make_kernel_norm<T>(ctx, 1, 1, 2, 2, ctx.inner_dropout));
    auto s = std::make_unique<Sequential<T>>();
    s->add("conv", make_knconv<T>(ctx, ch_in, ch_out, 2, 2, 0, ctx.inner_dropout));
    skip = std::move(s);
  }
  return std::make_unique<ResidualBlock<T>>(std::move(main), std::move(skip),
                                            std::nullopt);
}

namespace detail {

template <typename T>
LayerPtr<T> make_affine_norm(const ModelSpec& spec, int channels) {
  return std::make_unique<AffineNormLayer<T>>(spec.norm, channels,
                                              spec.group_size);
}

// conv + norm + activation stack for the non-kernel variants
template <typename T>
void add_conv_norm_act(Sequential<T>& seq, BuildCtx& ctx,
                       const ModelSpec& spec, const std::string& name,
                       int ch_in, int ch_out, int k, int s, int p) {
  seq.add(name, make_conv<T>(ctx, ch_in, ch_out, k, s, p, /*bias=*/false));
  seq.add(name + "_norm", make_affine_norm<T>(spec, ch_out));
  seq.add(name + "_act", std::make_unique<ActivationLayer<T>>(ctx.act));
}

}  // namespace detail

// ===========================================================================
// Architectures
// ===========================================================================

/// ResNet-8: 3->64->128 convs, two identity-residual pairs at 128 and 256,
/// three 2x2 max-pools, adaptive average pooling to (2, 2), linear 1024->k.
/// Mish activations. The kernel variant swaps convs for KNConv, drops the
/// norm layers and inserts a final KernelNorm before the adaptive pooling.
template <typename T>
LayerGraph<T> build_resnet8(NormKind norm, int num_classes = 10,
                            std::uint64_t seed = 0, ModelSpec base = {}) {
  ModelSpec spec = base;
  spec.arch = Arch::ResNet8;
  spec.norm = norm;
  spec.num_classes = num_classes;
  spec.input_h = 32;
  spec.input_w = 32;

  BuildCtx ctx(seed);
  ctx.act = Act::Mish;
  ctx.inner_dropout = spec.inner_kn_dropout;
  const bool kernel = norm == NormKind::Kernel;
  auto root = std::make_shared<Sequential<T>>();

  auto conv_unit = [&](const std::string& name, int ci, int co) {
    if (kernel) {
      root->add(name, make_knconv<T>(ctx, ci, co, 3, 1, 1, ctx.inner_dropout));
      root->add(name + "_act", std::make_unique<ActivationLayer<T>>(Act::Mish));
    } else {
      detail::add_conv_norm_act(*root, ctx, spec, name, ci, co, 3, 1, 1);
    }
  };
  auto residual_pair = [&](const std::string& name, int ch) {
    auto main = std::make_unique<Sequential<T>>();
    auto sub_unit = [&](const std::string& sub, int ci, int co) {
      if (kernel) {
        main->add(sub, make_knconv<T>(ctx, ci, co, 3, 1, 1, ctx.inner_dropout));
        main->add(sub + "_act", std::make_unique<ActivationLayer<T>>(Act::Mish));
      } else {
        detail::add_conv_norm_act(*main, ctx, spec, sub, ci, co, 3, 1, 1);
      }
    };
    sub_unit("conv1", ch, ch);
    sub_unit("conv2", ch, ch);
    root->add(name, std::make_unique<ResidualBlock<T>>(std::move(main), nullptr,
                                                       std::nullopt));
  };

  conv_unit("conv1", 3, 64);
  conv_unit("conv2", 64, 128);
  root->add("pool1", std::make_unique<MaxPoolLayer<T>>(2, 2));
  residual_pair("res1", 128);
  conv_unit("conv3", 128, 256);
  root->add("pool2", std::make_unique<MaxPoolLayer<T>>(2, 2));
  residual_pair("res2", 256);
  root->add("pool3", std::make_unique<MaxPoolLayer<T>>(2, 2));
  if (kernel)
    root->add("final_norm",
              make_kernel_norm<T>(ctx, 2, 2, 2, 2, spec.resolved_final_dropout()));
  root->add("avgpool", std::make_unique<AdaptiveAvgPoolLayer<T>>(2, 2));
  root->add("fc", std::make_unique<ClassifierLayer<T>>(
                      256 * 2 * 2, num_classes, ctx.next_param_stream()));
  ctx.take_id();

  LayerGraph<T> g;
  g.spec = spec;
  g.seed = seed;
  g.root = std::move(root);
  g.input_shape = {3, 32, 32};
  g.output_shape();  // chain-check at build time
  return g;
}

/// VGG-9: VGG-11 with the last max-pooling and the two hidden linear layers
/// removed; 8 convs, 4 pools, one classifier. ReLU activations.
template <typename T>
LayerGraph<T> build_vgg9(NormKind norm, int num_classes = 100,
                         std::uint64_t seed = 0, ModelSpec base = {}) {
  ModelSpec spec = base;
  spec.arch = Arch::VGG9;
  spec.norm = norm;
  spec.num_classes = num_classes;
  spec.input_h = 32;
  spec.input_w = 32;

  BuildCtx ctx(seed);
  ctx.act = Act::Relu;
  ctx.inner_dropout = spec.inner_kn_dropout;
  const bool kernel = norm == NormKind::Kernel;
  auto root = std::make_shared<Sequential<T>>();

  struct Stage {
    int ch;
    bool pool;
  };
  const Stage plan[] = {{64, true},  {128, true}, {256, false}, {256, true},
                        {512, false}, {512, true}, {512, false}, {512, false}};
  int ch_in = 3;
  int idx = 0;
  for (const auto& st : plan) {
    const std::string name = "block" + std::to_string(idx++);
    if (kernel) {
      root->add(name, build_kn_vgg_block<T>(ctx, ch_in, st.ch, st.pool));
    } else {
      auto seq = std::make_unique<Sequential<T>>();
      detail::add_conv_norm_act(*seq, ctx, spec, "conv", ch_in, st.ch, 3, 1, 1);
      if (st.pool) seq->add("pool", std::make_unique<MaxPoolLayer<T>>(2, 2));
      root->add(name, std::move(seq));
    }
    ch_in = st.ch;
  }
  if (kernel)
    root->add("final_norm",
              make_kernel_norm<T>(ctx, 2, 2, 2, 2, spec.resolved_final_dropout()));
  root->add("fc", std::make_unique<ClassifierLayer<T>>(
                      512 * 2 * 2, num_classes, ctx.next_param_stream()));
  ctx.take_id();

  LayerGraph<T> g;
  g.spec = spec;
  g.seed = seed;
  g.root = std::move(root);
  g.input_shape = {3, 32, 32};
  g.output_shape();
  return g;
}

namespace detail {

// standard post-activation basic block (ResNet-18)
template <typename T>
LayerPtr<T> make_plain_basic_block(BuildCtx& ctx, const ModelSpec& spec,
                                   int ch_in, int ch_out, int stride) {
  auto main = std::make_unique<Sequential<T>>();
  main->add("conv1", make_conv<T>(ctx, ch_in, ch_out, 3, stride, 1, false));
  main->add("norm1", make_affine_norm<T>(spec, ch_out));
  main->add("act1", std::make_unique<ActivationLayer<T>>(Act::Relu));
  main->add("conv2", make_conv<T>(ctx, ch_out, ch_out, 3, 1, 1, false));
  main->add("norm2", make_affine_norm<T>(spec, ch_out));
  LayerPtr<T> skip;
  if (stride != 1 || ch_in != ch_out) {
    auto s = std::make_unique<Sequential<T>>();
    s->add("conv", make_conv<T>(ctx, ch_in, ch_out, 1, stride, 0, false));
    s->add("norm", make_affine_norm<T>(spec, ch_out));
    skip = std::move(s);
  }
  return std::make_unique<ResidualBlock<T>>(std::move(main), std::move(skip),
                                            Act::Relu);
}

template <typename T>
LayerPtr<T> make_preact_block(BuildCtx& ctx, const ModelSpec& spec, int ch_in,
                              int ch_out, int stride) {
  auto norm1 = make_affine_norm<T>(spec, ch_in);
  auto conv1 = make_conv<T>(ctx, ch_in, ch_out, 3, stride, 1, false);
  auto norm2 = make_affine_norm<T>(spec, ch_out);
  auto conv2 = make_conv<T>(ctx, ch_out, ch_out, 3, 1, 1, false);
  LayerPtr<T> shortcut;
  if (stride != 1 || ch_in != ch_out)
    shortcut = make_conv<T>(ctx, ch_in, ch_out, 1, stride, 0, false);
  return std::make_unique<PreactBlock<T>>(std::move(norm1), std::move(conv1),
                                          std::move(norm2), std::move(conv2),
                                          std::move(shortcut));
}

template <typename T>
LayerPtr<T> make_basic_block(BuildCtx& ctx, const ModelSpec& spec, int ch_in,
                             int ch_out, int stride, bool preact) {
  if (spec.norm == NormKind::Kernel) {
    if (stride == 1 && ch_in == ch_out)
      return build_kn_basic_block<T>(ctx, ch_in, ch_out, Shortcut::Identity);
    return build_kn_basic_block<T>(ctx, ch_in, ch_out, Shortcut::Conv);
  }
  return preact ? make_preact_block<T>(ctx, spec, ch_in, ch_out, stride)
                : make_plain_basic_block<T>(ctx, spec, ch_in, ch_out, stride);
}

}  // namespace detail

/// PreactResNet-18 (CIFAR geometry): 3x3 stem, four stages of two basic
/// blocks (64/128/256/512), global average pooling, linear.
template <typename T>
LayerGraph<T> build_preact_resnet18(NormKind norm, int num_classes = 100,
                                    std::uint64_t seed = 0, ModelSpec base = {}) {
  ModelSpec spec = base;
  spec.arch = Arch::PreactResNet18;
  spec.norm = norm;
  spec.num_classes = num_classes;
  spec.input_h = 32;
  spec.input_w = 32;

  BuildCtx ctx(seed);
  ctx.act = Act::Relu;
  ctx.inner_dropout = spec.inner_kn_dropout;
  const bool kernel = norm == NormKind::Kernel;
  auto root = std::make_shared<Sequential<T>>();

  if (kernel)
    root->add("conv1", make_knconv<T>(ctx, 3, 64, 3, 1, 1, ctx.inner_dropout));
  else
    root->add("conv1", make_conv<T>(ctx, 3, 64, 3, 1, 1, false));

  const int chs[4] = {64, 128, 256, 512};
  int ch_in = 64;
  for (int stage = 0; stage < 4; ++stage) {
    const int stride = stage == 0 ? 1 : 2;
    root->add("layer" + std::to_string(stage + 1) + "_0",
              detail::make_basic_block<T>(ctx, spec, ch_in, chs[stage], stride,
                                          /*preact=*/true));
    root->add("layer" + std::to_string(stage + 1) + "_1",
              detail::make_basic_block<T>(ctx, spec, chs[stage], chs[stage], 1,
                                          /*preact=*/true));
    ch_in = chs[stage];
  }
  if (kernel)
    root->add("final_norm",
              make_kernel_norm<T>(ctx, 2, 2, 2, 2, spec.resolved_final_dropout()));
  root->add("avgpool", std::make_unique<AdaptiveAvgPoolLayer<T>>(1, 1));
  root->add("fc", std::make_unique<ClassifierLayer<T>>(512, num_classes,
                                                       ctx.next_param_stream()));
  ctx.take_id();

  LayerGraph<T> g;
  g.spec = spec;
  g.seed = seed;
  g.root = std::move(root);
  g.input_shape = {3, 32, 32};
  g.output_shape();
  return g;
}

/// ResNet-18 (ImageNet geometry): 7x7 stride-2 stem, 3x3 stride-2 max-pool,
/// four stages of two basic blocks, global average pooling, linear.
template <typename T>
LayerGraph<T> build_resnet18(NormKind norm, int num_classes = 10,
                             std::uint64_t seed = 0, int input_hw = 160,
                             ModelSpec base = {}) {
  ModelSpec spec = base;
  spec.arch = Arch::ResNet18;
  spec.norm = norm;
  spec.num_classes = num_classes;
  spec.input_h = input_hw;
  spec.input_w = input_hw;

  BuildCtx ctx(seed);
  ctx.act = Act::Relu;
  ctx.inner_dropout = spec.inner_kn_dropout;
  const bool kernel = norm == NormKind::Kernel;
  auto root = std::make_shared<Sequential<T>>();

  if (kernel) {
    Rng prng = ctx.next_param_stream();
    root->add("conv1", std::make_unique<KnConv2dLayer<T>>(
                           3, 64, 7, 7, 2, 2, 3, 3, ctx.inner_dropout, true,
                           ctx.take_id(), prng));
    root->add("act1", std::make_unique<ActivationLayer<T>>(Act::Relu));
  } else {
    root->add("conv1", make_conv<T>(ctx, 3, 64, 7, 2, 3, false));
    root->add("norm1", detail::make_affine_norm<T>(spec, 64));
    root->add("act1", std::make_unique<ActivationLayer<T>>(Act::Relu));
  }
  root->add("pool1", std::make_unique<MaxPoolLayer<T>>(3, 2, 1));

  const int chs[4] = {64, 128, 256, 512};
  int ch_in = 64;
  for (int stage = 0; stage < 4; ++stage) {
    const int stride = stage == 0 ? 1 : 2;
    root->add("layer" + std::to_string(stage + 1) + "_0",
              detail::make_basic_block<T>(ctx, spec, ch_in, chs[stage], stride,
                                          /*preact=*/false));
    root->add("layer" + std::to_string(stage + 1) + "_1",
              detail::make_basic_block<T>(ctx, spec, chs[stage], chs[stage], 1,
                                          /*preact=*/false));
    ch_in = chs[stage];
  }
  if (kernel)
    root->add("final_norm",
              make_kernel_norm<T>(ctx, 2, 2, 2, 2, spec.resolved_final_dropout()));
  root->add("avgpool", std::make_unique<AdaptiveAvgPoolLayer<T>>(1, 1));
  root->add("fc", std::make_unique<ClassifierLayer<T>>(512, num_classes,
                                                       ctx.next_param_stream()));
  ctx.take_id();

  LayerGraph<T> g;
  g.spec = spec;
  g.seed = seed;
  g.root = std::move(root);
  g.input_shape = {3, input_hw, input_hw};
  g.output_shape();
  return g;
}

template <typename T>
LayerGraph<T> build_model(const ModelSpec& spec, std::uint64_t seed) {
  switch (spec.arch) {
    case Arch::VGG9:
      return build_vgg9<T>(spec.norm, spec.num_classes, seed, spec);
    case Arch::ResNet8:
      return build_resnet8<T>(spec.norm, spec.num_classes, seed, spec);
    case Arch::PreactResNet18:
      return build_preact_resnet18<T>(spec.norm, spec.num_classes, seed, spec);
    case Arch::ResNet18:
      return build_resnet18<T>(spec.norm, spec.num_classes, seed, spec.input_h,
                               spec);
  }
  throw std::invalid_argument("unknown architecture");
}

// ===========================================================================
// Checkpoints
// ===========================================================================

/// Directory of named parameter tensors plus manifest.json.
template <typename T>
void save_checkpoint(const std::string& dir, const LayerGraph<T>& g,
                     std::uint64_t step) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest{{"architecture", arch_name(g.spec.arch)},
                          {"norm", norm_kind_name(g.spec.norm)},
                          {"seed", g.seed},
                          {"step", step},
                          {"dtype", std::is_same_v<T, float> ? "f32" : "f64"}};
  std::ofstream mf(dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";
  for (auto& [name, p] : g.named_parameters())
    save_tensor(dir + "/" + name + ".knt4", p->value);
  for (auto& [name, b] : g.named_buffers())
    save_tensor(dir + "/" + name + ".knt4", *b);
}

template <typename T>
std::uint64_t load_checkpoint(const std::string& dir, LayerGraph<T>& g) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw std::runtime_error("cannot open checkpoint manifest");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.at("architecture").get<std::string>() != arch_name(g.spec.arch))
    throw std::runtime_error("checkpoint architecture mismatch");
  for (auto& [name, p] : g.named_parameters()) {
    Tensor4<T> t = load_tensor<T>(dir + "/" + name + ".knt4");
    if (!t.same_shape(p->value))
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    p->value = std::move(t);
  }
  for (auto& [name, b] : g.named_buffers())
    *b = load_tensor<T>(dir + "/" + name + ".knt4");
  return manifest.at("step").get<std::uint64_t>();
}

}  // namespace kn
