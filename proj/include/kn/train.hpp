#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "kn/data.hpp"
#include "kn/model_zoo.hpp"

namespace kn {

// ===========================================================================
// Optimizer and schedulers
// ===========================================================================

template <typename T>
struct SgdConfig {
  T lr = T(0.1);
  T momentum = T(0);
  T weight_decay = T(0);

  void validate() const {
    if (!(lr > T(0))) throw std::invalid_argument("lr must be > 0");
    if (momentum < T(0) || momentum >= T(1))
      throw std::invalid_argument("momentum in [0, 1)");
    if (weight_decay < T(0)) throw std::invalid_argument("weight_decay >= 0");
  }
};

template <typename T>
struct SgdState {
  std::unordered_map<Node<T>*, Tensor4<T>> velocity;
};

/// v <- momentum * v + (g + weight_decay * theta); theta <- theta - lr * v.
/// Parameters without an accumulated gradient are skipped.
template <typename T>
void sgd_step(const std::vector<Value<T>>& params, SgdState<T>& state,
              const SgdConfig<T>& cfg) {
  cfg.validate();
  for (const auto& p : params) {
    if (p->grad.size() == 0) continue;
    if (!p->grad.same_shape(p->value))
      throw std::runtime_error("sgd: gradient shape mismatch");
    auto& v = state.velocity[p.get()];
    if (v.size() == 0) v = Tensor4<T>(p->value.n, p->value.c, p->value.h, p->value.w);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const T g = p->grad.data[i];
      if (!std::isfinite(static_cast<double>(g)))
        throw std::runtime_error("divergence");
      const T upd = g + cfg.weight_decay * p->value.data[i];
      v.data[i] = cfg.momentum * v.data[i] + upd;
      p->value.data[i] -= cfg.lr * v.data[i];
    }
  }
}

struct SchedulerSpec {
  enum class Kind { Constant, CosineAnnealing, StepHalving };
  Kind kind = Kind::Constant;
  int total_steps = 0;                // cosine
  std::vector<int> milestones;        // step halving, strictly increasing

  void validate() const {
    if (kind == Kind::CosineAnnealing && total_steps < 1)
      throw std::invalid_argument("cosine: total_steps >= 1");
    for (std::size_t i = 1; i < milestones.size(); ++i)
      if (milestones[i] <= milestones[i - 1])
        throw std::invalid_argument("milestones must be strictly increasing");
  }
};

inline double lr_at(const SchedulerSpec& spec, int step, double base_lr) {
  spec.validate();
  switch (spec.kind) {
    case SchedulerSpec::Kind::Constant:
      return base_lr;
    case SchedulerSpec::Kind::CosineAnnealing:
      return base_lr *
             (1.0 + std::cos(M_PI * static_cast<double>(step) / spec.total_steps)) /
             2.0;
    case SchedulerSpec::Kind::StepHalving: {
      int passed = 0;
      for (int m : spec.milestones)
        if (step >= m) ++passed;
      return base_lr / std::pow(2.0, passed);
    }
  }
  return base_lr;
}

// ===========================================================================
// Metrics
// ===========================================================================

struct MetricRow {
  int epoch = 0;                // epoch or federated round
  std::string split;            // "train" or "eval"
  double loss = 0;
  double acc = 0;
  double lr = 0;
  double wall_ms = 0;
};

inline void write_metrics_csv(const std::string& path,
                              const std::vector<MetricRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "epoch,split,loss,acc,lr,wall_ms\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.9g,%.9g,%.9g,%.3f\n", r.epoch,
                  r.split.c_str(), r.loss, r.acc, r.lr, r.wall_ms);
    f << buf;
  }
}

inline void write_metrics_jsonl(const std::string& path,
                                const std::vector<MetricRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  for (const auto& r : rows) {
    nlohmann::json j{{"epoch", r.epoch}, {"split", r.split}, {"loss", r.loss},
                     {"acc", r.acc},     {"lr", r.lr},       {"wall_ms", r.wall_ms}};
    f << j.dump() << "\n";
  }
}

/// Mean of a metric over the last up-to-five rows of one split.
inline double last5_average(const std::vector<MetricRow>& rows,
                            const std::string& split) {
  std::vector<double> vals;
  for (const auto& r : rows)
    if (r.split == split) vals.push_back(r.acc);
  if (vals.empty()) return 0.0;
  const std::size_t k = std::min<std::size_t>(5, vals.size());
  double s = 0;
  for (std::size_t i = vals.size() - k; i < vals.size(); ++i) s += vals[i];
  return s / static_cast<double>(k);
}

// ===========================================================================
// Evaluation
// ===========================================================================

template <typename T>
std::pair<double, double> evaluate(const LayerGraph<T>& g, const Dataset& ds,
                                   const PreprocessSpec& spec, int batch,
                                   Rng rng_base) {
  double loss_sum = 0;
  long correct = 0;
  std::vector<int> idx(ds.count);
  std::iota(idx.begin(), idx.end(), 0);
  for (int start = 0; start < ds.count; start += batch) {
    const int len = std::min(batch, ds.count - start);
    std::vector<int> part(idx.begin() + start, idx.begin() + start + len);
    Tensor4<T> x = augment_batch<T>(ds, part, spec, rng_base, /*augment=*/false);
    std::vector<int> y = batch_labels(ds, part);
    ForwardCtx<T> ctx;
    ctx.rng = rng_base;
    ctx.training = false;
    Value<T> logits = g.forward(leaf(std::move(x)), ctx);
    Value<T> loss = softmax_cross_entropy(logits, y);
    loss_sum += static_cast<double>(loss->value.data[0]) * len;
    const auto& lv = logits->value;
    for (int i = 0; i < len; ++i) {
      int best = 0;
      for (int k = 1; k < lv.c; ++k)
        if (lv.at(i, k, 0, 0) > lv.at(i, best, 0, 0)) best = k;
      if (best == y[i]) ++correct;
    }
  }
  return {loss_sum / ds.count, static_cast<double>(correct) / ds.count};
}

// ===========================================================================
// Centralized training
// ===========================================================================

template <typename T>
struct TrainConfig {
  SgdConfig<T> sgd;
  SchedulerSpec sched;
  int epochs = 1;
  int batch = 32;
  std::uint64_t seed = 0;
  PreprocessSpec preprocess;
  bool augment = false;
  int eval_batch = 64;
};

template <typename T>
struct TrainResult {
  std::vector<MetricRow> history;
  double representative_train_acc = 0;  // mean of last five epochs
  double representative_eval_acc = 0;
  bool diverged = false;
};

namespace detail {

inline std::vector<int> shuffled_indices(int count, Rng rng) {
  std::vector<int> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = count - 1; i > 0; --i)
    std::swap(idx[i], idx[rng.next_below(i + 1)]);
  return idx;
}

}  // namespace detail

/// Epoch loop of shuffled mini-batches with augmentation, backprop, SGD and
/// the configured scheduler (applied per epoch). A non-finite loss aborts
/// with the metrics collected so far.
template <typename T>
TrainResult<T> train_centralized(LayerGraph<T>& g, const Dataset& train_ds,
                                 const Dataset* eval_ds,
                                 const TrainConfig<T>& cfg) {
  cfg.sgd.validate();
  TrainResult<T> res;
  Rng run(cfg.seed);
  SgdState<T> opt_state;
  auto params = g.parameters();
  std::uint64_t gstep = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(cfg.sched, epoch, static_cast<double>(cfg.sgd.lr));
    SgdConfig<T> step_cfg = cfg.sgd;
    step_cfg.lr = static_cast<T>(lr);

    auto idx = detail::shuffled_indices(train_ds.count, run.split(1).split(epoch));
    double loss_sum = 0;
    long correct = 0, seen = 0;
    bool aborted = false;
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch) {
      const std::size_t len = std::min<std::size_t>(cfg.batch, idx.size() - start);
      std::vector<int> part(idx.begin() + start, idx.begin() + start + len);
      Tensor4<T> x = augment_batch<T>(train_ds, part, cfg.preprocess,
                                      run.split(2).split(gstep), cfg.augment);
      std::vector<int> y = batch_labels(train_ds, part);

      ForwardCtx<T> ctx;
      ctx.rng = run.split(3);
      ctx.step = gstep;
      ctx.training = true;
      Value<T> logits = g.forward(leaf(std::move(x)), ctx);
      Value<T> loss = softmax_cross_entropy(logits, y);
      const double lv = static_cast<double>(loss->value.data[0]);
      if (!std::isfinite(lv)) {
        res.diverged = true;
        aborted = true;
        break;
      }
      loss_sum += lv * len;
      const auto& lg = logits->value;
      for (std::size_t i = 0; i < len; ++i) {
        int best = 0;
        for (int k = 1; k < lg.c; ++k)
          if (lg.at(i, k, 0, 0) > lg.at(i, best, 0, 0)) best = k;
        if (best == y[i]) ++correct;
      }
      seen += len;
      backward(loss);
      sgd_step(params, opt_state, step_cfg);
      zero_grad(params);
      ++gstep;
    }

    const double wall =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    MetricRow row;
    row.epoch = epoch;
    row.split = "train";
    row.loss = seen ? loss_sum / seen : std::numeric_limits<double>::quiet_NaN();
    row.acc = seen ? static_cast<double>(correct) / seen : 0.0;
    row.lr = lr;
    row.wall_ms = wall;
    res.history.push_back(row);

    if (eval_ds && !aborted) {
      const auto e0 = std::chrono::steady_clock::now();
      auto [el, ea] = evaluate(g, *eval_ds, cfg.preprocess, cfg.eval_batch, run.split(4));
      MetricRow er;
      er.epoch = epoch;
      er.split = "eval";
      er.loss = el;
      er.acc = ea;
      er.lr = lr;
      er.wall_ms = std::chrono::duration<double, std::milli>(
                       std::chrono::steady_clock::now() - e0)
                       .count();
      res.history.push_back(er);
    }
    if (aborted) break;
  }

  res.representative_train_acc = last5_average(res.history, "train");
  res.representative_eval_acc = last5_average(res.history, "eval");
  return res;
}

// ===========================================================================
// Federated averaging
// ===========================================================================

struct FedConfig {
  int clients = 1;
  int rounds = 1;
  int local_epochs = 1;

  void validate() const {
    if (clients < 1) throw std::invalid_argument("clients >= 1");
    if (rounds < 1) throw std::invalid_argument("rounds >= 1");
    if (local_epochs < 1) throw std::invalid_argument("local_epochs >= 1");
  }
};

/// One FederatedAveraging round: every client copies the global state, runs
/// `local_epochs` of SGD on its shard, and the server replaces the global
/// state with the sample-count-weighted average of the client states
/// (learnable parameters and running statistics alike).
template <typename T>
void fedavg_round(LayerGraph<T>& global, LayerGraph<T>& scratch,
                  const Dataset& ds,
                  const std::vector<std::vector<int>>& shards,
                  const TrainConfig<T>& local_cfg, const FedConfig& fed,
                  int round) {
  fed.validate();
  std::size_t total = 0;
  for (const auto& s : shards) {
    if (s.empty()) throw std::invalid_argument("empty client shard");
    total += s.size();
  }

  auto gparams = global.named_parameters();
  auto gbuffers = global.named_buffers();
  std::vector<std::vector<double>> acc_p(gparams.size());
  std::vector<std::vector<double>> acc_b(gbuffers.size());
  for (std::size_t i = 0; i < gparams.size(); ++i)
    acc_p[i].assign(gparams[i].second->value.size(), 0.0);
  for (std::size_t i = 0; i < gbuffers.size(); ++i)
    acc_b[i].assign(gbuffers[i].second->size(), 0.0);

  for (std::size_t c = 0; c < shards.size(); ++c) {
    scratch.copy_state_from(global);
    Dataset local = subset(ds, shards[c]);
    TrainConfig<T> cfg = local_cfg;
    cfg.epochs = fed.local_epochs;
    cfg.seed = local_cfg.seed ^ (0x9e3779b97f4a7c15ULL * (round * 1000003ULL + c + 1));
    TrainResult<T> r = train_centralized(scratch, local, nullptr, cfg);
    if (r.diverged) throw std::runtime_error("divergence");

    const double w = static_cast<double>(shards[c].size()) / total;
    auto cparams = scratch.named_parameters();
    for (std::size_t i = 0; i < cparams.size(); ++i)
      for (std::size_t k = 0; k < acc_p[i].size(); ++k)
        acc_p[i][k] += w * static_cast<double>(cparams[i].second->value.data[k]);
    auto cbuffers = scratch.named_buffers();
    for (std::size_t i = 0; i < cbuffers.size(); ++i)
      for (std::size_t k = 0; k < acc_b[i].size(); ++k)
        acc_b[i][k] += w * static_cast<double>(cbuffers[i].second->data[k]);
  }

  for (std::size_t i = 0; i < gparams.size(); ++i)
    for (std::size_t k = 0; k < acc_p[i].size(); ++k)
      gparams[i].second->value.data[k] = static_cast<T>(acc_p[i][k]);
  for (std::size_t i = 0; i < gbuffers.size(); ++i)
    for (std::size_t k = 0; k < acc_b[i].size(); ++k)
      gbuffers[i].second->data[k] = static_cast<T>(acc_b[i][k]);
}

template <typename T>
TrainResult<T> train_federated(LayerGraph<T>& global, const Dataset& ds,
                               const std::vector<std::vector<int>>& shards,
                               const Dataset* eval_ds,
                               const TrainConfig<T>& local_cfg,
                               const FedConfig& fed) {
  TrainResult<T> res;
  LayerGraph<T> scratch = build_model<T>(global.spec, global.seed);
  for (int round = 0; round < fed.rounds; ++round) {
    const auto t0 = std::chrono::steady_clock::now();
    fedavg_round(global, scratch, ds, shards, local_cfg, fed, round);
    const double wall =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    MetricRow row;
    row.epoch = round;
    row.split = "train";
    row.lr = static_cast<double>(local_cfg.sgd.lr);
    row.wall_ms = wall;
    if (eval_ds) {
      auto [el, ea] =
          evaluate(global, *eval_ds, local_cfg.preprocess, local_cfg.eval_batch,
                   Rng(local_cfg.seed).split(4));
      MetricRow er = row;
      er.split = "eval";
      er.loss = el;
      er.acc = ea;
      res.history.push_back(row);
      res.history.push_back(er);
    } else {
      res.history.push_back(row);
    }
  }
  res.representative_train_acc = last5_average(res.history, "train");
  res.representative_eval_acc = last5_average(res.history, "eval");
  return res;
}

// ===========================================================================
// Per-sample-gradient (DP-style) SGD
// ===========================================================================

template <typename T>
struct DpConfig {
  T clip_norm = std::numeric_limits<T>::infinity();  // infinity = unclipped
  T noise_multiplier = T(0);
  int batch = 32;

  void validate() const {
    if (!(clip_norm > T(0))) throw std::invalid_argument("clip_norm must be > 0");
    if (noise_multiplier < T(0))
      throw std::invalid_argument("noise_multiplier >= 0");
  }
};

/// Per-sample gradients of the mean loss: each sample's gradient is clipped
/// to L2 norm <= C, Gaussian noise with stddev sigma*C is added to the sum,
/// and the average is applied through sgd_step. Rejects models that couple
/// samples through batch statistics.
template <typename T>
void dp_sgd_step(LayerGraph<T>& g, const Tensor4<T>& x,
                 const std::vector<int>& y, const DpConfig<T>& dp,
                 const SgdConfig<T>& sgd, SgdState<T>& opt_state, Rng noise_rng,
                 Rng dropout_rng, std::uint64_t step,
                 std::int64_t base_offset) {
  dp.validate();
  if (g.spec.norm == NormKind::Batch)
    throw std::invalid_argument("per-sample gradients unavailable");
  if (x.n < 1 || static_cast<int>(y.size()) != x.n)
    throw std::invalid_argument("dp: batch empty or label mismatch");

  auto params = g.parameters();
  std::vector<std::vector<double>> sum_g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    sum_g[i].assign(params[i]->value.size(), 0.0);

  for (int s = 0; s < x.n; ++s) {
    Tensor4<T> xi(1, x.c, x.h, x.w);
    std::copy(x.data.begin() + static_cast<std::size_t>(s) * x.c * x.h * x.w,
              x.data.begin() + static_cast<std::size_t>(s + 1) * x.c * x.h * x.w,
              xi.data.begin());
    ForwardCtx<T> ctx;
    ctx.rng = dropout_rng;
    ctx.step = step;
    ctx.sample_offset = base_offset + s;
    ctx.training = true;
    Value<T> logits = g.forward(leaf(std::move(xi)), ctx);
    Value<T> loss = softmax_cross_entropy(logits, {y[s]});
    backward(loss);

    double norm2 = 0;
    for (const auto& p : params)
      if (p->grad.size())
        for (const T gv : p->grad.data)
          norm2 += static_cast<double>(gv) * static_cast<double>(gv);
    const double norm = std::sqrt(norm2);
    double factor = 1.0;
    if (std::isfinite(static_cast<double>(dp.clip_norm)) &&
        norm > static_cast<double>(dp.clip_norm))
      factor = static_cast<double>(dp.clip_norm) / norm;
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i]->grad.size())
        for (std::size_t k = 0; k < sum_g[i].size(); ++k)
          sum_g[i][k] += factor * static_cast<double>(params[i]->grad.data[k]);
    zero_grad(params);
  }

  if (dp.noise_multiplier > T(0)) {
    if (!std::isfinite(static_cast<double>(dp.clip_norm)))
      throw std::invalid_argument("dp: noise requires a finite clip norm");
    Rng nr = noise_rng.split(step);
    const double sd = static_cast<double>(dp.noise_multiplier) *
                      static_cast<double>(dp.clip_norm);
    for (auto& v : sum_g)
      for (auto& e : v) e += sd * nr.next_normal();
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    p->ensure_grad();
    for (std::size_t k = 0; k < sum_g[i].size(); ++k)
      p->grad.data[k] = static_cast<T>(sum_g[i][k] / x.n);
  }
  sgd_step(params, opt_state, sgd);
  zero_grad(params);
}

template <typename T>
TrainResult<T> train_dp(LayerGraph<T>& g, const Dataset& train_ds,
                        const Dataset* eval_ds, const TrainConfig<T>& cfg,
                        const DpConfig<T>& dp) {
  TrainResult<T> res;
  Rng run(cfg.seed);
  SgdState<T> opt_state;
  std::uint64_t gstep = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(cfg.sched, epoch, static_cast<double>(cfg.sgd.lr));
    SgdConfig<T> step_cfg = cfg.sgd;
    step_cfg.lr = static_cast<T>(lr);
    auto idx = detail::shuffled_indices(train_ds.count, run.split(1).split(epoch));

    double loss_sum = 0;
    long correct = 0, seen = 0;
    for (std::size_t start = 0; start < idx.size(); start += dp.batch) {
      const std::size_t len = std::min<std::size_t>(dp.batch, idx.size() - start);
      std::vector<int> part(idx.begin() + start, idx.begin() + start + len);
      Tensor4<T> x = augment_batch<T>(train_ds, part, cfg.preprocess,
                                      run.split(2).split(gstep), cfg.augment);
      std::vector<int> y = batch_labels(train_ds, part);

      // batch metrics from a plain eval-style pass
      {
        ForwardCtx<T> ctx;
        ctx.rng = run.split(3);
        ctx.step = gstep;
        ctx.training = false;
        Value<T> logits = g.forward(leaf(x), ctx);
        Value<T> loss = softmax_cross_entropy(logits, y);
        loss_sum += static_cast<double>(loss->value.data[0]) * len;
        const auto& lg = logits->value;
        for (std::size_t i = 0; i < len; ++i) {
          int best = 0;
          for (int k = 1; k < lg.c; ++k)
            if (lg.at(i, k, 0, 0) > lg.at(i, best, 0, 0)) best = k;
          if (best == y[i]) ++correct;
        }
        seen += len;
      }

      dp_sgd_step(g, x, y, dp, step_cfg, opt_state, run.split(5), run.split(3),
                  gstep, static_cast<std::int64_t>(start));
      ++gstep;
    }

    const double wall =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    MetricRow row;
    row.epoch = epoch;
    row.split = "train";
    row.loss = seen ? loss_sum / seen : 0.0;
    row.acc = seen ? static_cast<double>(correct) / seen : 0.0;
    row.lr = lr;
    row.wall_ms = wall;
    res.history.push_back(row);
    if (eval_ds) {
      auto [el, ea] =
          evaluate(g, *eval_ds, cfg.preprocess, cfg.eval_batch, run.split(4));
      MetricRow er = row;
      er.split = "eval";
      er.loss = el;
      er.acc = ea;
      er.wall_ms = 0;
      res.history.push_back(er);
    }
  }
  res.representative_train_acc = last5_average(res.history, "train");
  res.representative_eval_acc = last5_average(res.history, "eval");
  return res;
}

}  // namespace kn
