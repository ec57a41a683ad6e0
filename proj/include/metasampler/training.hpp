#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "metasampler/data.hpp"
#include "metasampler/errors.hpp"
#include "metasampler/losses.hpp"
#include "metasampler/models.hpp"

namespace msamp {

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

enum class OptimizerKind { kAdam, kSgd };

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::int64_t step = 0;

  void ensure(const std::vector<Tensor>& params) {
    if (!m.empty()) return;
    for (const auto& p : params) {
      m.emplace_back(p.data().size(), 0.0);
      v.emplace_back(p.data().size(), 0.0);
    }
  }
};

// Standard Adam (beta1 0.9, beta2 0.999, eps 1e-8) with bias correction.
// Undefined gradients count as zero; the step counter always advances.
inline void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                      AdamState& state, double lr) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  if (params.size() != grads.size())
    throw ContractViolation("adam_step: params/grads size mismatch");
  state.ensure(params);
  state.step += 1;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (grads[i].defined() && grads[i].numel() != params[i].numel())
      throw ContractViolation("adam_step: gradient shape mismatch at parameter " +
                              std::to_string(i));
    for (std::size_t t = 0; t < value.size(); ++t) {
      const double g = grads[i].defined() ? grads[i].data()[t] : 0.0;
      m[t] = kBeta1 * m[t] + (1.0 - kBeta1) * g;
      v[t] = kBeta2 * v[t] + (1.0 - kBeta2) * g * g;
      const double mh = m[t] / bc1;
      const double vh = v[t] / bc2;
      value[t] -= lr * mh / (std::sqrt(vh) + kEps);
    }
  }
}

inline void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
  if (params.size() != grads.size())
    throw ContractViolation("sgd_step: params/grads size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].defined()) continue;
    auto& value = params[i].mutable_data();
    for (std::size_t t = 0; t < value.size(); ++t) value[t] -= lr * grads[i].data()[t];
  }
}

// ---------------------------------------------------------------------------
// Configs and metric logs
// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 24;
  double lr = 1e-3;
  OptimizerKind optimizer_kind = OptimizerKind::kAdam;
  int epochs = 10;
  std::uint64_t seed = 1;
  LossWeights loss_weights;
  int eval_every = 1;
  int eval_n_way = 4;        // retrieval evaluation
  int eval_episodes = 64;    // retrieval/pose evaluation set size
  std::string eval_split = "val";
};

struct MetaTask {
  TaskKind kind;
  std::vector<TaskModel> pool;
};

struct MetaConfig {
  double alpha = 1e-3;      // inner step size
  double beta = 1e-3;       // meta step size
  int inner_steps = 5;
  bool second_order = true; // exact meta-gradient; false = first-order approximation
  double aux_lr = 1e-3;     // direct simplification/projection updates
  int meta_iters = 60;
  int batch_size = 24;
  std::uint64_t seed = 1;
  LossWeights loss_weights;
  // optional per-task running-mean normalizer for the outer sum; off by
  // default (raw Eq. 4 summation)
  bool normalize_task_losses = false;
};

struct MetricRecord {
  std::string engine;
  std::string task;
  std::uint64_t seed = 0;
  int epoch = 0;
  double loss_task = 0.0;
  double loss_simp = 0.0;
  double loss_proj = 0.0;
  double loss_total = 0.0;
  nlohmann::json eval;  // metric name -> value
  double wall_ms = 0.0;
};

inline nlohmann::json to_json(const MetricRecord& r) {
  return nlohmann::json{{"engine", r.engine},        {"task", r.task},
                        {"seed", r.seed},            {"epoch", r.epoch},
                        {"loss_task", r.loss_task},  {"loss_simp", r.loss_simp},
                        {"loss_proj", r.loss_proj},  {"loss_total", r.loss_total},
                        {"eval", r.eval},            {"wall_ms", r.wall_ms}};
}

using MetricLog = std::vector<MetricRecord>;

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

inline TaskBatch make_batch(TaskKind kind, const std::vector<LabeledCloud>& items,
                            int batch_size, Rng& rng) {
  if (items.empty()) throw ContractViolation("make_batch: empty item list");
  TaskBatch batch;
  batch.reserve(static_cast<std::size_t>(batch_size));
  for (int b = 0; b < batch_size; ++b) {
    TaskItem item;
    switch (kind) {
      case TaskKind::kClassification:
      case TaskKind::kReconstruction: {
        const auto& src = items[static_cast<std::size_t>(rng.index(static_cast<int>(items.size())))];
        item.cloud = src.cloud;
        item.label = src.label;
        break;
      }
      case TaskKind::kRetrieval: {
        RetrievalPair pair = gen_retrieval_pair(items, rng.next_u64());
        item.cloud = std::move(pair.a);
        item.second = std::move(pair.b);
        item.is_match = pair.is_match;
        break;
      }
      case TaskKind::kPoseRegression: {
        RegistrationPair pair = gen_registration_pair(items, rng.next_u64());
        item.cloud = std::move(pair.source);
        item.second = std::move(pair.target);
        break;
      }
    }
    batch.push_back(std::move(item));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum class EvalMode { kMatched, kSoft };

struct EvalOptions {
  EvalMode mode = EvalMode::kMatched;
  int n_way = 4;
  int episodes = 64;
  std::uint64_t eval_seed = 9001;
  std::vector<std::uint64_t> forbidden_uids;  // training-pool uids; overlap fails
};

struct EvalResult {
  std::string metric;   // accuracy / chamfer / rot_err_deg
  double value = 0.0;
  double mean_loss = 0.0;
};

namespace detail {

inline void check_pool_allowed(const std::vector<TaskModel>& pool,
                               const std::vector<std::uint64_t>& forbidden) {
  for (const auto& m : pool)
    for (auto uid : forbidden)
      if (m.uid == uid)
        throw PoolOverlap("evaluation pool contains training model uid " + std::to_string(uid));
}

// The cloud a task model sees: identity when the sampler is null or n >= m.
inline PointCloud eval_input(const SamplerModel* s, const PointCloud& cloud, EvalMode mode) {
  if (s == nullptr || s->n >= cloud.size()) return cloud;
  if (mode == EvalMode::kMatched) return subset(cloud, sampler_match(*s, cloud));
  NoGradScope no_grad;
  return from_tensor(sampler_forward(*s, cloud).soft_points);
}

inline int argmax_index(const Tensor& v) {
  int best = 0;
  for (std::int64_t i = 1; i < v.numel(); ++i)
    if (v.at(i) > v.at(best)) best = static_cast<int>(i);
  return best;
}

}  // namespace detail

// Task metrics of a model pool under a sampler (or the identity when
// sampler == nullptr), averaged over the pool. Deterministic given
// opts.eval_seed.
inline EvalResult evaluate(const SamplerModel* sampler, const std::vector<TaskModel>& pool,
                           const std::vector<LabeledCloud>& items, const EvalOptions& opts = {}) {
  if (pool.empty()) throw ContractViolation("evaluate: empty pool");
  detail::check_pool_allowed(pool, opts.forbidden_uids);
  NoGradScope no_grad;
  const TaskKind kind = pool.front().kind;
  EvalResult out;
  double metric_sum = 0.0, loss_sum = 0.0;
  std::int64_t count = 0;

  switch (kind) {
    case TaskKind::kClassification: {
      out.metric = "accuracy";
      for (const auto& item : items) {
        PointCloud input = detail::eval_input(sampler, item.cloud, opts.mode);
        Tensor input_t = to_tensor(input);
        for (const auto& model : pool) {
          Tensor logits = classify_logits(model, input_t);
          metric_sum += detail::argmax_index(logits) == item.label ? 1.0 : 0.0;
          loss_sum += loss_classification(logits, item.label).item();
          ++count;
        }
      }
      break;
    }
    case TaskKind::kReconstruction: {
      out.metric = "chamfer";
      for (const auto& item : items) {
        PointCloud input = detail::eval_input(sampler, item.cloud, opts.mode);
        Tensor input_t = to_tensor(input);
        Tensor full = to_tensor(item.cloud);
        for (const auto& model : pool) {
          const double cd = chamfer(reconstruct(model, input_t), full).item();
          metric_sum += cd;
          loss_sum += cd;
          ++count;
        }
      }
      break;
    }
    case TaskKind::kRetrieval: {
      out.metric = "accuracy";
      for (int e = 0; e < opts.episodes; ++e) {
        RetrievalEpisode ep =
            gen_retrieval_episode(items, opts.n_way, derive_seed(opts.eval_seed, static_cast<std::uint64_t>(e)));
        PointCloud query = detail::eval_input(sampler, ep.query, opts.mode);
        Tensor query_t = to_tensor(query);
        for (const auto& model : pool) {
          int best = 0;
          double best_score = -1.0;
          double answer_score = 0.0;
          for (int c = 0; c < opts.n_way; ++c) {
            const double s =
                retrieval_score(model, query_t, to_tensor(ep.candidates[static_cast<std::size_t>(c)])).item();
            if (s > best_score) {
              best_score = s;
              best = c;
            }
            if (c == ep.answer) answer_score = s;
          }
          metric_sum += best == ep.answer ? 1.0 : 0.0;
          loss_sum += -std::log(std::max(answer_score, 1e-12));
          ++count;
        }
      }
      break;
    }
    case TaskKind::kPoseRegression: {
      out.metric = "rot_err_deg";
      for (int e = 0; e < opts.episodes; ++e) {
        RegistrationPair pair =
            gen_registration_pair(items, derive_seed(opts.eval_seed, static_cast<std::uint64_t>(e)));
        PointCloud source = detail::eval_input(sampler, pair.source, opts.mode);
        Tensor source_t = to_tensor(source);
        Tensor target_t = to_tensor(pair.target);
        for (const auto& model : pool) {
          PosePrediction pred = predict_pose(model, source_t, target_t);
          const Vec3 pe{pred.euler_deg.at(0), pred.euler_deg.at(1), pred.euler_deg.at(2)};
          metric_sum += rotation_error_deg(pe, pair.euler);
          loss_sum += loss_pose(pred, source_t, target_t).item();
          ++count;
        }
      }
      break;
    }
  }
  out.value = metric_sum / static_cast<double>(count);
  out.mean_loss = loss_sum / static_cast<double>(count);
  return out;
}

// ---------------------------------------------------------------------------
// Joint / single sampler training (Eq. 1 and Eq. 2)
// ---------------------------------------------------------------------------

struct SamplerBatchLosses {
  Tensor task, simp, proj, total;
};

// Shared soft samples feed both the (joint) task loss and the
// simplification loss; projection depends only on the temperature.
inline SamplerBatchLosses sampler_batch_losses(const SamplerModel& s,
                                               const std::vector<TaskModel>& pool,
                                               const TaskBatch& batch, const LossWeights& w) {
  if (pool.empty() || batch.empty())
    throw ContractViolation("sampler_batch_losses: empty pool or batch");
  for (const auto& m : pool) {
    detail::require_frozen(m, "sampler_batch_losses");
    if (m.kind != pool.front().kind)
      throw ContractViolation("sampler_batch_losses: mixed task kinds in pool");
  }
  std::vector<SoftSample> samples = soft_samples(s, batch);

  SamplerBatchLosses out;
  bool first_model = true;
  for (const auto& model : pool) {
    Tensor model_sum;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Tensor l = task_loss_on_input(model, samples[i].soft_points, batch[i]);
      model_sum = i == 0 ? l : add(model_sum, l);
    }
    Tensor model_mean = mul_scalar(model_sum, 1.0 / static_cast<double>(batch.size()));
    out.task = first_model ? model_mean : add(out.task, model_mean);
    first_model = false;
  }
  Tensor simp_sum;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tensor l = loss_simplification(samples[i].raw_points, to_tensor(batch[i].cloud), w.gamma_max,
                                   w.gamma_cov);
    simp_sum = i == 0 ? l : add(simp_sum, l);
  }
  out.simp = mul_scalar(simp_sum, 1.0 / static_cast<double>(batch.size()));
  out.proj = loss_projection(s);
  out.total = loss_total(out.task, out.simp, out.proj, w);
  return out;
}

struct TrainResult {
  MetricLog log;
};

// Joint multi-model training: Eq. 2 task loss plus simplification and
// projection, Adam by default. Per-epoch metrics cover the training pool and
// the held-out test pool.
inline TrainResult train_joint(SamplerModel& sampler, const std::vector<TaskModel>& pool,
                               const Dataset& ds, const std::vector<TaskModel>& test_pool,
                               const TrainConfig& cfg, const std::string& engine_name = "joint") {
  if (pool.empty()) throw ContractViolation("train_joint: empty pool");
  const TaskKind kind = pool.front().kind;
  std::vector<std::uint64_t> train_uids;
  for (const auto& m : pool) train_uids.push_back(m.uid);

  auto params = sampler.params();
  AdamState adam;
  TrainResult result;
  const auto& items = ds.train;
  const int batches_per_epoch =
      std::max(1, static_cast<int>(items.size()) / std::max(1, cfg.batch_size));
  const auto t0 = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 0xE10C + static_cast<std::uint64_t>(epoch)));
    double ep_task = 0, ep_simp = 0, ep_proj = 0, ep_total = 0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      TaskBatch batch = make_batch(kind, items, cfg.batch_size, rng);
      TapeScope scope;
      SamplerBatchLosses losses = sampler_batch_losses(sampler, pool, batch, cfg.loss_weights);
      const double total = losses.total.item();
      if (!std::isfinite(total))
        throw NumericAbort("train " + engine_name + ": non-finite loss at epoch " +
                           std::to_string(epoch) + " batch " + std::to_string(b) +
                           " (task=" + std::to_string(losses.task.item()) +
                           ", simp=" + std::to_string(losses.simp.item()) +
                           ", proj=" + std::to_string(losses.proj.item()) + ")");
      for (auto& p : params) p.zero_grad();
      backward(losses.total);
      std::vector<Tensor> grads;
      for (const auto& p : params) grads.push_back(p.grad());
      if (cfg.optimizer_kind == OptimizerKind::kAdam)
        adam_step(params, grads, adam, cfg.lr);
      else
        sgd_step(params, grads, cfg.lr);
      ep_task += losses.task.item();
      ep_simp += losses.simp.item();
      ep_proj += losses.proj.item();
      ep_total += total;
    }

    MetricRecord rec;
    rec.engine = engine_name;
    rec.task = task_name(kind);
    rec.seed = cfg.seed;
    rec.epoch = epoch;
    rec.loss_task = ep_task / batches_per_epoch;
    rec.loss_simp = ep_simp / batches_per_epoch;
    rec.loss_proj = ep_proj / batches_per_epoch;
    rec.loss_total = ep_total / batches_per_epoch;
    if (epoch % std::max(1, cfg.eval_every) == 0 || epoch == cfg.epochs - 1) {
      EvalOptions opts;
      opts.n_way = cfg.eval_n_way;
      opts.episodes = cfg.eval_episodes;
      const auto& eval_items = ds.split(cfg.eval_split);
      EvalResult on_train_pool = evaluate(&sampler, pool, eval_items, opts);
      rec.eval["train_pool_" + on_train_pool.metric] = on_train_pool.value;
      if (!test_pool.empty()) {
        EvalOptions test_opts = opts;
        test_opts.forbidden_uids = train_uids;
        EvalResult on_test_pool = evaluate(&sampler, test_pool, eval_items, test_opts);
        rec.eval["test_pool_" + on_test_pool.metric] = on_test_pool.value;
      }
      rec.eval["temperature"] = sampler.temperature().item();
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(std::move(rec));
  }
  return result;
}

// Single-model training (Eq. 1): joint training with a pool of one.
inline TrainResult train_single(SamplerModel& sampler, const TaskModel& model, const Dataset& ds,
                                const std::vector<TaskModel>& test_pool, const TrainConfig& cfg) {
  return train_joint(sampler, {model}, ds, test_pool, cfg, "single");
}

// ---------------------------------------------------------------------------
// Meta-training (Eq. 3 inner updates, Eq. 4 outer update)
// ---------------------------------------------------------------------------

using ParamLossFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Plain gradient-descent inner update on a parameter vector. With
// second_order the returned parameters stay differentiable w.r.t. the inputs.
inline std::vector<Tensor> gd_inner_update(const std::vector<Tensor>& theta,
                                           const ParamLossFn& loss, double alpha, int steps,
                                           bool second_order) {
  std::vector<Tensor> cur = theta;
  for (int s = 0; s < steps; ++s) {
    Tensor l = loss(cur);
    backward(l, /*create_graph=*/second_order);
    std::vector<Tensor> next;
    next.reserve(cur.size());
    for (auto& p : cur) {
      Tensor g = p.grad();
      next.push_back(g.defined() ? sub(p, mul_scalar(g, alpha)) : p);
    }
    cur = std::move(next);
  }
  return cur;
}

struct MetaStepState {
  std::vector<Tensor> theta;                                   // leaf parameters
  std::map<std::pair<int, int>, std::vector<Tensor>> adapted;  // (task, model) -> theta'
  std::vector<Tensor> meta_gradient;                           // filled by the outer update
};

// Inner update for one (task, model) pair: `steps` gradient steps on the
// single-model task loss starting from theta.
inline std::vector<Tensor> meta_inner_update(const SamplerModel& proto,
                                             const std::vector<Tensor>& theta,
                                             const TaskModel& model, const TaskBatch& batch,
                                             double alpha, int steps, bool second_order) {
  detail::require_frozen(model, "meta_inner_update");
  auto loss = [&](const std::vector<Tensor>& p) {
    return loss_sampler_task_single(proto.with_params(p), model, batch);
  };
  return gd_inner_update(theta, loss, alpha, steps, second_order);
}

// Outer update (Eq. 4): one SGD step of size beta on the summed
// post-adaptation losses across every (task, model) pair.
inline void meta_outer_update(const SamplerModel& proto, MetaStepState& state,
                              const std::vector<MetaTask>& tasks,
                              const std::map<std::pair<int, int>, TaskBatch>& batches,
                              double beta,
                              const std::vector<double>* task_scales = nullptr) {
  Tensor outer;
  bool first = true;
  for (int i = 0; i < static_cast<int>(tasks.size()); ++i) {
    for (int j = 0; j < static_cast<int>(tasks[static_cast<std::size_t>(i)].pool.size()); ++j) {
      auto found = state.adapted.find({i, j});
      if (found == state.adapted.end())
        throw ContractViolation("meta_outer_update: missing adapted parameters for task " +
                                std::to_string(i) + ", model " + std::to_string(j));
      auto batch_it = batches.find({i, j});
      if (batch_it == batches.end())
        throw ContractViolation("meta_outer_update: missing batch for task " + std::to_string(i));
      Tensor l = loss_sampler_task_single(proto.with_params(found->second),
                                          tasks[static_cast<std::size_t>(i)].pool[static_cast<std::size_t>(j)],
                                          batch_it->second);
      if (task_scales)
        l = mul_scalar(l, 1.0 / std::max(1e-9, (*task_scales)[static_cast<std::size_t>(i)]));
      outer = first ? l : add(outer, l);
      first = false;
    }
  }
  backward(outer);
  state.meta_gradient.clear();
  for (auto& p : state.theta) {
    Tensor g = p.grad();
    state.meta_gradient.push_back(g.defined() ? g.constant_copy()
                                              : Tensor::zeros(p.shape()));
    if (g.defined() && beta != 0.0) {
      auto& value = p.mutable_data();
      for (std::size_t t = 0; t < value.size(); ++t) value[t] -= beta * g.data()[t];
    }
  }
}

struct MetaResult {
  MetricLog log;
  std::vector<std::uint64_t> pool_uids;  // models seen during meta-training
};

// Full meta-training loop. Per meta-iteration: one batch per (task, model)
// drives both the inner updates and the outer loss; the committed theta then
// takes one direct Adam step on simplification + projection.
inline MetaResult meta_train(SamplerModel& sampler, const std::vector<MetaTask>& tasks,
                             const Dataset& ds, const MetaConfig& cfg) {
  if (tasks.empty()) throw ContractViolation("meta_train: no tasks");
  for (const auto& t : tasks) {
    if (t.pool.empty()) throw ContractViolation("meta_train: empty pool");
    for (const auto& m : t.pool) detail::require_frozen(m, "meta_train");
  }

  MetaResult result;
  for (const auto& t : tasks)
    for (const auto& m : t.pool) result.pool_uids.push_back(m.uid);

  auto params = sampler.params();
  AdamState aux_adam;
  std::vector<double> task_running(tasks.size(), 1.0);
  bool running_init = false;
  const auto t0 = std::chrono::steady_clock::now();

  for (int iter = 0; iter < cfg.meta_iters; ++iter) {
    Rng rng(derive_seed(cfg.seed, 0x3E7A + static_cast<std::uint64_t>(iter)));
    double outer_loss_sum = 0.0;
    {
      TapeScope scope;
      MetaStepState state;
      state.theta = params;
      std::map<std::pair<int, int>, TaskBatch> batches;
      std::vector<double> iter_task_loss(tasks.size(), 0.0);
      for (int i = 0; i < static_cast<int>(tasks.size()); ++i) {
        const auto& task = tasks[static_cast<std::size_t>(i)];
        for (int j = 0; j < static_cast<int>(task.pool.size()); ++j) {
          TaskBatch batch = make_batch(task.kind, ds.train, cfg.batch_size, rng);
          state.adapted[{i, j}] =
              meta_inner_update(sampler, state.theta, task.pool[static_cast<std::size_t>(j)], batch,
                                cfg.alpha, cfg.inner_steps, cfg.second_order);
          batches[{i, j}] = std::move(batch);
        }
      }
      const std::vector<double>* scales = cfg.normalize_task_losses ? &task_running : nullptr;
      meta_outer_update(sampler, state, tasks, batches, cfg.beta, scales);

      // bookkeeping for the log and the optional normalizer
      {
        NoGradScope no_grad;
        for (int i = 0; i < static_cast<int>(tasks.size()); ++i) {
          const auto& task = tasks[static_cast<std::size_t>(i)];
          double l = 0.0;
          for (int j = 0; j < static_cast<int>(task.pool.size()); ++j)
            l += loss_sampler_task_single(sampler.with_params(state.adapted[{i, j}]),
                                          task.pool[static_cast<std::size_t>(j)], batches[{i, j}])
                     .item();
          iter_task_loss[static_cast<std::size_t>(i)] = l;
          outer_loss_sum += l;
        }
      }
      if (cfg.normalize_task_losses) {
        for (std::size_t i = 0; i < tasks.size(); ++i) {
          const double observed = iter_task_loss[i] / static_cast<double>(tasks[i].pool.size());
          task_running[i] = running_init ? 0.9 * task_running[i] + 0.1 * observed : observed;
        }
        running_init = true;
      }
      if (!std::isfinite(outer_loss_sum)) {
        std::string parts;
        for (std::size_t i = 0; i < tasks.size(); ++i)
          parts += std::string(task_name(tasks[i].kind)) + "=" +
                   std::to_string(iter_task_loss[i]) + " ";
        throw NumericAbort("meta_train: non-finite outer loss at iteration " +
                           std::to_string(iter) + " (" + parts + ")");
      }
    }

    // direct (non-meta) update of the task-agnostic losses at committed theta
    double simp_val = 0.0, proj_val = 0.0;
    {
      TapeScope scope;
      TaskBatch clouds = make_batch(TaskKind::kReconstruction, ds.train, cfg.batch_size, rng);
      Tensor simp_sum;
      for (std::size_t i = 0; i < clouds.size(); ++i) {
        SoftSample sample = sampler_forward(sampler, clouds[i].cloud);
        Tensor l = loss_simplification(sample.raw_points, to_tensor(clouds[i].cloud),
                                       cfg.loss_weights.gamma_max, cfg.loss_weights.gamma_cov);
        simp_sum = i == 0 ? l : add(simp_sum, l);
      }
      Tensor simp = mul_scalar(simp_sum, 1.0 / static_cast<double>(clouds.size()));
      Tensor proj = loss_projection(sampler);
      Tensor aux = add(mul_scalar(simp, cfg.loss_weights.w_simp),
                       mul_scalar(proj, cfg.loss_weights.w_proj));
      simp_val = simp.item();
      proj_val = proj.item();
      if (!std::isfinite(simp_val + proj_val))
        throw NumericAbort("meta_train: non-finite auxiliary loss at iteration " +
                           std::to_string(iter));
      for (auto& p : params) p.zero_grad();
      backward(aux);
      std::vector<Tensor> grads;
      for (const auto& p : params) grads.push_back(p.grad());
      adam_step(params, grads, aux_adam, cfg.aux_lr);
    }

    MetricRecord rec;
    rec.engine = "meta";
    rec.task = "multi";
    rec.seed = cfg.seed;
    rec.epoch = iter;
    rec.loss_task = outer_loss_sum;
    rec.loss_simp = simp_val;
    rec.loss_proj = proj_val;
    rec.loss_total = outer_loss_sum + simp_val + proj_val;
    rec.eval["temperature"] = sampler.temperature().item();
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(std::move(rec));
  }
  return result;
}

// Rapid task adaptation: joint training initialized from the meta-sampler.
// The adaptation pool must be disjoint from every pool seen in meta-training.
inline TrainResult adapt(SamplerModel& sampler, const std::vector<std::uint64_t>& meta_uids,
                         const std::vector<TaskModel>& pool, const Dataset& ds,
                         const std::vector<TaskModel>& test_pool, const TrainConfig& cfg) {
  for (const auto& m : pool)
    for (auto uid : meta_uids)
      if (m.uid == uid)
        throw PoolOverlap("adapt: pool model " + std::to_string(uid) +
                          " was used during meta-training");
  return train_joint(sampler, pool, ds, test_pool, cfg, "adapt");
}

// ---------------------------------------------------------------------------
// Task-model pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int batch_size = 24;
  double lr = 1e-3;
  int max_epochs = 80;
  int min_epochs = 2;
  double cls_accuracy_bar = 0.90;
  double retrieval_bar = 1.0;   // 4-way accuracy
  int retrieval_eval_episodes = 128;
  double recon_bar_factor = 10.0;  // x mean-NN-spacing^2
  // pose converges on its chamfer loss; rotation error w.r.t. the generating
  // transform is unidentifiable on rotation-symmetric shapes
  double pose_cd_bar = 0.30;
  std::uint64_t eval_seed = 424242;
};

struct PretrainOutcome {
  TaskModel model;
  MetricLog log;
  double final_metric = 0.0;
};

// Trains one task model on unsampled clouds until its convergence bar.
inline PretrainOutcome pretrain_task_model(TaskKind kind, std::uint64_t seed, const Dataset& ds,
                                           const PretrainConfig& cfg) {
  TaskModel model = TaskModel::init(kind, seed, ds.spec.m);
  auto params = model.params();
  AdamState adam;
  PretrainOutcome out;

  const double nn2 = [&] {
    if (kind != TaskKind::kReconstruction) return 0.0;
    const double s = mean_nn_spacing(ds.train);
    return s * s;
  }();

  const int batches_per_epoch =
      std::max(1, static_cast<int>(ds.train.size()) / std::max(1, cfg.batch_size));
  const auto t0 = std::chrono::steady_clock::now();
  bool converged = false;
  double metric = 0.0;

  for (int epoch = 0; epoch < cfg.max_epochs && !converged; ++epoch) {
    Rng rng(derive_seed(seed, 0x9E7 + static_cast<std::uint64_t>(epoch)));
    double ep_loss = 0.0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      TaskBatch batch = make_batch(kind, ds.train, cfg.batch_size, rng);
      TapeScope scope;
      Tensor loss_sum;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        Tensor l = task_loss_on_input(model, to_tensor(batch[i].cloud), batch[i]);
        loss_sum = i == 0 ? l : add(loss_sum, l);
      }
      Tensor loss = mul_scalar(loss_sum, 1.0 / static_cast<double>(batch.size()));
      const double lv = loss.item();
      if (!std::isfinite(lv))
        throw NumericAbort("pretrain(" + std::string(task_name(kind)) + ", seed " +
                           std::to_string(seed) + "): non-finite loss at epoch " +
                           std::to_string(epoch));
      for (auto& p : params) p.zero_grad();
      backward(loss);
      std::vector<Tensor> grads;
      for (const auto& p : params) grads.push_back(p.grad());
      adam_step(params, grads, adam, cfg.lr);
      ep_loss += lv;
    }

    EvalOptions opts;
    opts.episodes = cfg.retrieval_eval_episodes;
    opts.eval_seed = cfg.eval_seed;
    EvalResult ev = evaluate(nullptr, {model}, ds.val, opts);
    metric = ev.value;
    if (epoch + 1 >= cfg.min_epochs) {
      switch (kind) {
        case TaskKind::kClassification: converged = metric >= cfg.cls_accuracy_bar; break;
        case TaskKind::kRetrieval: converged = metric >= cfg.retrieval_bar; break;
        case TaskKind::kReconstruction: converged = metric <= cfg.recon_bar_factor * nn2; break;
        case TaskKind::kPoseRegression: converged = ev.mean_loss <= cfg.pose_cd_bar; break;
      }
    }

    MetricRecord rec;
    rec.engine = "pretrain";
    rec.task = task_name(kind);
    rec.seed = seed;
    rec.epoch = epoch;
    rec.loss_task = ep_loss / batches_per_epoch;
    rec.loss_total = rec.loss_task;
    rec.eval[ev.metric] = metric;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    out.log.push_back(std::move(rec));
  }

  if (!converged)
    throw PretrainFailure("pretrain(" + std::string(task_name(kind)) + "): seed " +
                          std::to_string(seed) + " missed its convergence bar (last metric " +
                          std::to_string(metric) + ")");
  model.freeze();
  out.model = std::move(model);
  out.final_metric = metric;
  return out;
}

// A train/test pool from distinct seeds; the two sub-pools are disjoint by
// construction.
inline ModelPool pretrain_pool(TaskKind kind, int train_count, int test_count,
                               std::uint64_t seed_base, const Dataset& ds,
                               const PretrainConfig& cfg, MetricLog* log = nullptr) {
  ModelPool pool;
  pool.kind = kind;
  for (int i = 0; i < train_count + test_count; ++i) {
    const std::uint64_t seed = derive_seed(seed_base, 0xB00 + static_cast<std::uint64_t>(i));
    PretrainOutcome out = pretrain_task_model(kind, seed, ds, cfg);
    if (log)
      for (auto& r : out.log) log->push_back(r);
    if (i < train_count)
      pool.train_models.push_back(std::move(out.model));
    else
      pool.test_models.push_back(std::move(out.model));
  }
  return pool;
}

}  // namespace msamp
