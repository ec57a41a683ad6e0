#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "metasampler/data.hpp"
#include "metasampler/losses.hpp"

using namespace msamp;

namespace {

PointCloud random_cloud(Rng& rng, int m) {
  PointCloud c;
  for (int i = 0; i < m; ++i)
    c.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  return c;
}

TaskBatch classification_batch(Rng& rng, int items, int m = 16) {
  TaskBatch batch;
  for (int i = 0; i < items; ++i) {
    TaskItem item;
    item.cloud = random_cloud(rng, m);
    item.label = rng.index(kNumClassesOut);
    batch.push_back(std::move(item));
  }
  return batch;
}

}  // namespace

TEST_CASE("losses: classification hand cases", "[losses]") {
  NoGradScope no_grad;
  Tensor uniform = Tensor::zeros({8});
  REQUIRE(loss_classification(uniform, 0).item() == Catch::Approx(std::log(8.0)).margin(1e-12));

  // dominant true-class logit drives the loss toward zero
  Tensor sharp = Tensor::zeros({8});
  sharp.mutable_data()[3] = 60.0;
  REQUIRE(loss_classification(sharp, 3).item() <= 1e-12);

  REQUIRE_THROWS_AS(loss_classification(uniform, 8), ContractViolation);
  REQUIRE_THROWS_AS(loss_classification(uniform, -1), ContractViolation);
}

TEST_CASE("losses: classification gradient check", "[losses]") {
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> logits(8);
    for (auto& v : logits) v = rng.uniform(-1.5, 1.5);
    const int label = rng.index(8);
    auto f = [&](const Tensor& x) { return loss_classification(x, label); };
    REQUIRE(grad_check(f, Tensor::from(logits, {8}), 1e-5) <= 1e-8);
    auto g = [&](const Tensor& x) {
      return loss_classification(x, label, ClassificationLoss::kBceOneHot);
    };
    REQUIRE(grad_check(g, Tensor::from(logits, {8}), 1e-5) <= 1e-8);
  }
}

TEST_CASE("losses: bce-on-one-hot variant behaves", "[losses]") {
  NoGradScope no_grad;
  Tensor uniform = Tensor::zeros({8});
  // sigmoid(0)=0.5 per class -> mean BCE = ln 2
  REQUIRE(loss_classification(uniform, 2, ClassificationLoss::kBceOneHot).item() ==
          Catch::Approx(std::log(2.0)).margin(1e-12));
}

TEST_CASE("losses: reconstruction equals chamfer bit-exactly", "[losses]") {
  Rng rng(7);
  NoGradScope no_grad;
  PointCloud a = random_cloud(rng, 12);
  PointCloud b = random_cloud(rng, 12);
  REQUIRE(loss_reconstruction(to_tensor(a), to_tensor(b)).item() == chamfer_distance(a, b));
  REQUIRE(loss_reconstruction(to_tensor(a), to_tensor(a)).item() == 0.0);

  PointCloud p1{{{0, 0, 0}}};
  PointCloud p2{{{1, 0, 0}}};
  REQUIRE(loss_reconstruction(to_tensor(p1), to_tensor(p2)).item() == Catch::Approx(2.0));
}

TEST_CASE("losses: retrieval hand cases and gradient", "[losses]") {
  {
    NoGradScope no_grad;
    REQUIRE(loss_retrieval(Tensor::scalar(0.5), true).item() ==
            Catch::Approx(std::log(2.0)).margin(1e-12));
    REQUIRE(loss_retrieval(Tensor::scalar(0.5), false).item() ==
            Catch::Approx(std::log(2.0)).margin(1e-12));
    REQUIRE(loss_retrieval(Tensor::scalar(0.9), true).item() ==
            Catch::Approx(-std::log(0.9)).epsilon(1e-12));
    // clamp keeps the endpoints finite
    REQUIRE(std::isfinite(loss_retrieval(Tensor::scalar(1.0), false).item()));
    REQUIRE(std::isfinite(loss_retrieval(Tensor::scalar(0.0), true).item()));
  }

  Rng rng(8);
  for (int t = 0; t < 10; ++t) {
    const bool y = rng.index(2) == 1;
    auto f = [&](const Tensor& x) { return loss_retrieval(x, y); };
    REQUIRE(grad_check(f, Tensor::scalar(rng.uniform(0.05, 0.95)), 1e-6) <= 1e-8);
  }
}

TEST_CASE("losses: pose loss zero at ground truth", "[losses]") {
  Rng rng(9);
  PointCloud src = random_cloud(rng, 10);
  const Vec3 euler{20.0, -35.0, 8.0};
  const Vec3 shift{0.4, 0.1, -0.6};
  PointCloud dst = apply_rigid(src, euler, shift);

  NoGradScope no_grad;
  PosePrediction pred;
  pred.euler_deg = Tensor::from({euler[0], euler[1], euler[2]}, {3});
  pred.t = Tensor::from({shift[0], shift[1], shift[2]}, {3});
  REQUIRE(loss_pose(pred, to_tensor(src), to_tensor(dst)).item() <= 1e-18);

  PosePrediction ident;
  ident.euler_deg = Tensor::zeros({3});
  ident.t = Tensor::zeros({3});
  REQUIRE(loss_pose(ident, to_tensor(src), to_tensor(src)).item() == 0.0);
}

TEST_CASE("losses: pose gradient w.r.t. angles", "[losses]") {
  Rng rng(10);
  PointCloud src = random_cloud(rng, 8);
  PointCloud dst = random_cloud(rng, 8);
  auto f = [&](const Tensor& params) {
    PosePrediction pred;
    pred.euler_deg = narrow(params, 0, 0, 3);
    pred.t = narrow(params, 0, 3, 3);
    return loss_pose(pred, to_tensor(src), to_tensor(dst));
  };
  for (int t = 0; t < 5; ++t) {
    std::vector<double> p{rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(-30, 30),
                          rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
    REQUIRE(grad_check(f, Tensor::from(std::move(p), {6}), 1e-4) <= 1e-6);
  }
}

TEST_CASE("losses: joint loss reduces to single for k=1", "[losses]") {
  Rng rng(11);
  SamplerModel s = SamplerModel::init(4, 21, 4);
  TaskModel m = TaskModel::init(TaskKind::kClassification, 22);
  m.freeze();
  TaskBatch batch = classification_batch(rng, 3);
  NoGradScope no_grad;
  const double single = loss_sampler_task_single(s, m, batch).item();
  const double joint = loss_sampler_task_joint(s, {m}, batch).item();
  REQUIRE(single == joint);
  REQUIRE(single >= 0.0);
}

TEST_CASE("losses: joint loss over identical models is k times single", "[losses]") {
  Rng rng(12);
  SamplerModel s = SamplerModel::init(4, 23, 4);
  TaskModel m = TaskModel::init(TaskKind::kClassification, 24);
  m.freeze();
  TaskBatch batch = classification_batch(rng, 2);
  NoGradScope no_grad;
  const double single = loss_sampler_task_single(s, m, batch).item();
  REQUIRE(loss_sampler_task_joint(s, {m, m}, batch).item() == 2.0 * single);
  REQUIRE(loss_sampler_task_joint(s, {m, m, m}, batch).item() == 3.0 * single);
}

TEST_CASE("losses: joint gradient is the sum of single gradients", "[losses]") {
  Rng rng(13);
  SamplerModel s = SamplerModel::init(4, 25, 4);
  std::vector<TaskModel> pool;
  for (int i = 0; i < 3; ++i) {
    TaskModel m = TaskModel::init(TaskKind::kClassification, 30 + static_cast<std::uint64_t>(i));
    m.freeze();
    pool.push_back(std::move(m));
  }
  TaskBatch batch = classification_batch(rng, 2);

  auto grads_of = [&](auto&& loss_fn) {
    TapeScope scope;
    for (auto& p : s.params()) p.zero_grad();
    backward(loss_fn());
    std::vector<std::vector<double>> out;
    for (const auto& p : s.params())
      out.push_back(p.grad().defined() ? p.grad().data()
                                       : std::vector<double>(p.data().size(), 0.0));
    return out;
  };

  auto joint = grads_of([&] { return loss_sampler_task_joint(s, pool, batch); });
  std::vector<std::vector<double>> sum;
  for (int i = 0; i < 3; ++i) {
    auto gi = grads_of([&] { return loss_sampler_task_single(s, pool[static_cast<std::size_t>(i)], batch); });
    if (sum.empty()) {
      sum = gi;
    } else {
      for (std::size_t a = 0; a < gi.size(); ++a)
        for (std::size_t b = 0; b < gi[a].size(); ++b) sum[a][b] += gi[a][b];
    }
  }
  // 1e-12 relative to the gradient scale; association order differs between
  // the one-pass joint backward and three separate passes
  double scale = 0.0;
  for (const auto& block : sum)
    for (double v : block) scale = std::max(scale, std::fabs(v));
  for (std::size_t a = 0; a < joint.size(); ++a)
    for (std::size_t b = 0; b < joint[a].size(); ++b)
      REQUIRE(std::fabs(joint[a][b] - sum[a][b]) <= 1e-12 * scale);
}

TEST_CASE("losses: unfrozen model is rejected", "[losses]") {
  Rng rng(14);
  SamplerModel s = SamplerModel::init(4, 26, 4);
  TaskModel m = TaskModel::init(TaskKind::kClassification, 27);  // not frozen
  TaskBatch batch = classification_batch(rng, 1);
  REQUIRE_THROWS_AS(loss_sampler_task_single(s, m, batch), ContractViolation);

  TaskModel frozen = TaskModel::init(TaskKind::kClassification, 28);
  frozen.freeze();
  TaskModel other = TaskModel::init(TaskKind::kReconstruction, 29, 16);
  other.freeze();
  REQUIRE_THROWS_AS(loss_sampler_task_joint(s, {frozen, other}, batch), ContractViolation);
}

TEST_CASE("losses: simplification hand cases", "[losses]") {
  NoGradScope no_grad;
  // line {0,1,2,3} on x, one generated point at the origin
  Tensor p = Tensor::from({0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0, 0}, {4, 3});
  Tensor q = Tensor::zeros({1, 3});
  REQUIRE(loss_simplification(q, p).item() == Catch::Approx(3.5).margin(1e-12));

  // subset zeroes the forward terms, coverage stays positive
  Tensor q2 = Tensor::from({0, 0, 0}, {1, 3});
  Tensor p2 = Tensor::from({0, 0, 0, 1, 0, 0}, {2, 3});
  const double v = loss_simplification(q2, p2).item();
  REQUIRE(v == Catch::Approx(0.5).margin(1e-12));  // coverage term only

  // identical sets -> exactly zero
  Rng rng(15);
  PointCloud c = random_cloud(rng, 9);
  REQUIRE(loss_simplification(to_tensor(c), to_tensor(c)).item() == 0.0);
}

TEST_CASE("losses: projection loss and its descent direction", "[losses]") {
  SamplerModel s = SamplerModel::init(4, 31, 4);
  {
    NoGradScope no_grad;
    REQUIRE(loss_projection(s).item() == Catch::Approx(1.0).margin(1e-12));
    s.log_temperature.mutable_data()[0] = std::log(0.1);
    REQUIRE(loss_projection(s).item() == Catch::Approx(0.01).epsilon(1e-12));
  }
  // gradient on log-temperature is strictly positive: descent lowers it
  for (double lt : {-1.0, 0.0, 0.7}) {
    s.log_temperature.mutable_data()[0] = lt;
    TapeScope scope;
    s.log_temperature.zero_grad();
    backward(loss_projection(s));
    REQUIRE(s.log_temperature.grad().item() > 0.0);
  }
}

TEST_CASE("losses: total loss combines components", "[losses]") {
  NoGradScope no_grad;
  LossWeights w;
  REQUIRE(loss_total(Tensor::scalar(2), Tensor::scalar(3), Tensor::scalar(4), w).item() == 9.0);
  LossWeights zero;
  zero.w_task = zero.w_simp = zero.w_proj = 0.0;
  REQUIRE(loss_total(Tensor::scalar(2), Tensor::scalar(3), Tensor::scalar(4), zero).item() == 0.0);
  LossWeights bad;
  bad.w_simp = -1.0;
  REQUIRE_THROWS_AS(loss_total(Tensor::scalar(1), Tensor::scalar(1), Tensor::scalar(1), bad),
                    ContractViolation);
}

TEST_CASE("losses: total loss gradient is the weighted sum", "[losses]") {
  Rng rng(16);
  LossWeights w;
  w.w_task = 0.5;
  w.w_simp = 2.0;
  w.w_proj = 0.25;
  auto f = [&](const Tensor& x) {
    Tensor a = sum_all(square(x));
    Tensor b = sum_all(x);
    Tensor c = mean_all(mul(x, x));
    return loss_total(a, b, c, w);
  };
  REQUIRE(grad_check(f, Tensor::from({0.3, -0.8, 1.2}, {3}), 1e-6) <= 1e-8);
}

TEST_CASE("losses: sampler task losses produce nonzero sampler gradients", "[losses]") {
  Rng rng(17);
  SamplerModel s = SamplerModel::init(4, 33, 4);
  TaskModel m = TaskModel::init(TaskKind::kClassification, 34);
  m.freeze();
  TaskBatch batch = classification_batch(rng, 8);
  TapeScope scope;
  backward(loss_sampler_task_single(s, m, batch));
  std::int64_t nonzero = 0, total = 0;
  for (const auto& p : s.params()) {
    for (double g : p.grad().defined() ? p.grad().data()
                                       : std::vector<double>(p.data().size(), 0.0)) {
      ++total;
      if (g != 0.0) ++nonzero;
    }
  }
  REQUIRE(static_cast<double>(nonzero) / static_cast<double>(total) >= 0.99);

  // frozen weights stayed grad-free and bit-identical
  for (const auto& p : m.params()) REQUIRE_FALSE(p.grad().defined());
}
