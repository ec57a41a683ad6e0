#pragma once

#include <string>
#include <vector>

#include "metasampler/errors.hpp"
#include "metasampler/geometry.hpp"
#include "metasampler/models.hpp"
#include "metasampler/tensor.hpp"

namespace msamp {

struct LossWeights {
  double w_task = 1.0;   // task : simplification : projection defaults to 1:1:1
  double w_simp = 1.0;
  double w_proj = 1.0;
  double gamma_max = 1.0;  // weight of the max nearest-neighbor term
  double gamma_cov = 1.0;  // weight of the coverage term
};

enum class ClassificationLoss { kSoftmaxCrossEntropy, kBceOneHot };

// Softmax cross-entropy by default; the BCE-on-one-hot variant treats the C
// logits as independent binary problems.
inline Tensor loss_classification(const Tensor& logits, int label,
                                  ClassificationLoss variant = ClassificationLoss::kSoftmaxCrossEntropy) {
  const std::int64_t c = logits.numel();
  if (label < 0 || label >= c)
    throw ContractViolation("loss_classification: label " + std::to_string(label) +
                            " out of [0," + std::to_string(c) + ")");
  Tensor flat = reshape(logits, {c});
  if (variant == ClassificationLoss::kSoftmaxCrossEntropy) {
    // stable logsumexp with a constant max shift
    double mx = flat.at(0);
    for (std::int64_t i = 1; i < c; ++i) mx = std::max(mx, flat.at(i));
    Tensor lse = add_scalar(log(sum_all(exp(add_scalar(flat, -mx)))), mx);
    return sub(lse, reshape(gather_rows(flat, {label}), Shape{}));
  }
  Tensor probs = clamp(sigmoid(flat), 1e-12, 1.0 - 1e-12);
  std::vector<double> onehot(static_cast<std::size_t>(c), 0.0);
  onehot[static_cast<std::size_t>(label)] = 1.0;
  Tensor y = Tensor::from(std::move(onehot), {c});
  Tensor pos = mul(y, log(probs));
  Tensor neg_branch = mul(add_scalar(neg(y), 1.0), log(add_scalar(neg(probs), 1.0)));
  return neg(mean_all(add(pos, neg_branch)));
}

inline Tensor loss_reconstruction(const Tensor& predicted, const Tensor& input) {
  return chamfer(predicted, input);
}

// Binary cross entropy on a match probability; scores at exactly 0/1 are
// clamped at 1e-12.
inline Tensor loss_retrieval(const Tensor& score, bool is_match) {
  Tensor s = clamp(reshape(score, Shape{}), 1e-12, 1.0 - 1e-12);
  if (is_match) return neg(log(s));
  return neg(log(add_scalar(neg(s), 1.0)));
}

inline Tensor loss_pose(const PosePrediction& pred, const Tensor& source, const Tensor& target) {
  return chamfer(apply_rigid_t(source, pred.euler_deg, pred.t), target);
}

// One training example. `cloud` is the network input (the sampler replaces it
// with its sampled version); the remaining fields depend on the task.
struct TaskItem {
  PointCloud cloud;
  int label = 0;        // classification
  PointCloud second;    // retrieval candidate / pose target
  bool is_match = false;
};

using TaskBatch = std::vector<TaskItem>;

// Task loss of one model on an explicit input tensor. For reconstruction the
// target is always the item's full cloud, matching the autoencoder setup.
inline Tensor task_loss_on_input(const TaskModel& model, const Tensor& input,
                                 const TaskItem& item) {
  switch (model.kind) {
    case TaskKind::kClassification:
      return loss_classification(classify_logits(model, input), item.label);
    case TaskKind::kReconstruction:
      return loss_reconstruction(reconstruct(model, input), to_tensor(item.cloud));
    case TaskKind::kRetrieval:
      return loss_retrieval(retrieval_score(model, input, to_tensor(item.second)), item.is_match);
    case TaskKind::kPoseRegression: {
      Tensor target = to_tensor(item.second);
      return loss_pose(predict_pose(model, input, target), input, target);
    }
  }
  throw ContractViolation("task_loss_on_input: bad task kind");
}

namespace detail {

inline void require_frozen(const TaskModel& m, const char* where) {
  if (!m.frozen)
    throw ContractViolation(std::string(where) + ": task model must be frozen");
}

}  // namespace detail

// Soft-sampled inputs for a batch, computed once and shared across the pool.
inline std::vector<SoftSample> soft_samples(const SamplerModel& s, const TaskBatch& batch) {
  std::vector<SoftSample> out;
  out.reserve(batch.size());
  for (const auto& item : batch) out.push_back(sampler_forward(s, item.cloud));
  return out;
}

// Single-model sampler task loss: the frozen model's task loss on the
// soft-sampled clouds, averaged over the batch.
inline Tensor loss_sampler_task_single(const SamplerModel& s, const TaskModel& model,
                                       const TaskBatch& batch) {
  detail::require_frozen(model, "loss_sampler_task_single");
  if (batch.empty()) throw ContractViolation("loss_sampler_task_single: empty batch");
  Tensor total;
  std::size_t i = 0;
  for (const auto& item : batch) {
    SoftSample sample = sampler_forward(s, item.cloud);
    Tensor l = task_loss_on_input(model, sample.soft_points, item);
    total = (i == 0) ? l : add(total, l);
    ++i;
  }
  return mul_scalar(total, 1.0 / static_cast<double>(batch.size()));
}

// Joint sampler task loss: the sum (not mean) over the pool of per-model task
// losses, each on the same shared soft samples.
inline Tensor loss_sampler_task_joint(const SamplerModel& s, const std::vector<TaskModel>& pool,
                                      const TaskBatch& batch) {
  if (pool.empty()) throw ContractViolation("loss_sampler_task_joint: empty pool");
  if (batch.empty()) throw ContractViolation("loss_sampler_task_joint: empty batch");
  for (const auto& m : pool) {
    detail::require_frozen(m, "loss_sampler_task_joint");
    if (m.kind != pool.front().kind)
      throw ContractViolation("loss_sampler_task_joint: mixed task kinds in pool");
  }
  std::vector<SoftSample> samples = soft_samples(s, batch);
  Tensor total;
  bool first = true;
  for (const auto& model : pool) {
    Tensor model_sum;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Tensor l = task_loss_on_input(model, samples[i].soft_points, batch[i]);
      model_sum = (i == 0) ? l : add(model_sum, l);
    }
    Tensor model_mean = mul_scalar(model_sum, 1.0 / static_cast<double>(batch.size()));
    total = first ? model_mean : add(total, model_mean);
    first = false;
  }
  return total;
}

// Simplification loss: average + max nearest-neighbor distance from the
// generated points to the input, plus a coverage term from the input to the
// generated points (without it the generator can collapse onto one point).
inline Tensor loss_simplification(const Tensor& generated, const Tensor& input,
                                  double gamma_max = 1.0, double gamma_cov = 1.0) {
  if (generated.dim(0) < 1 || input.dim(0) < 1)
    throw ContractViolation("loss_simplification: empty cloud");
  Tensor d2 = pairwise_dist2(generated, input);
  Tensor nearest_fwd = reduce_min(d2, 1);  // per generated point
  Tensor nearest_bwd = reduce_min(d2, 0);  // per input point
  Tensor avg_term = mean_all(nearest_fwd);
  Tensor max_term = max_all(nearest_fwd);
  Tensor cov_term = mean_all(nearest_bwd);
  return add(add(avg_term, mul_scalar(max_term, gamma_max)), mul_scalar(cov_term, gamma_cov));
}

// Projection loss: temperature^2. Descent drives the soft projection toward
// a delta at the nearest neighbor.
inline Tensor loss_projection(const SamplerModel& s) {
  return reshape(square(exp(s.log_temperature)), Shape{});
}

inline Tensor loss_total(const Tensor& task, const Tensor& simp, const Tensor& proj,
                         const LossWeights& w) {
  if (w.w_task < 0 || w.w_simp < 0 || w.w_proj < 0)
    throw ContractViolation("loss_total: negative loss weights");
  return add(add(mul_scalar(task, w.w_task), mul_scalar(simp, w.w_simp)),
             mul_scalar(proj, w.w_proj));
}

}  // namespace msamp
