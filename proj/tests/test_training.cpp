#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <thread>

#include "metasampler/training.hpp"

using namespace msamp;

namespace {

DatasetSpec tiny_spec(std::uint64_t seed = 5) {
  DatasetSpec spec;
  spec.m = 32;
  spec.train_per_class = 8;
  spec.val_per_class = 3;
  spec.test_per_class = 3;
  spec.seed = seed;
  return spec;
}

std::vector<TaskModel> frozen_pool(TaskKind kind, int count, std::uint64_t seed_base, int m = 32) {
  std::vector<TaskModel> pool;
  for (int i = 0; i < count; ++i) {
    TaskModel model = TaskModel::init(kind, seed_base + static_cast<std::uint64_t>(i), m);
    model.freeze();
    pool.push_back(std::move(model));
  }
  return pool;
}

bool logs_equal(const MetricLog& a, const MetricLog& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].loss_task != b[i].loss_task || a[i].loss_simp != b[i].loss_simp ||
        a[i].loss_proj != b[i].loss_proj || a[i].loss_total != b[i].loss_total ||
        a[i].eval != b[i].eval)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("training: adam zero gradient leaves parameters unchanged", "[training]") {
  std::vector<Tensor> params{Tensor::from({1.0, -2.0}, {2}, true)};
  std::vector<Tensor> grads{Tensor::zeros({2})};
  AdamState st;
  adam_step(params, grads, st, 0.1);
  REQUIRE(params[0].data() == std::vector<double>{1.0, -2.0});
  REQUIRE(st.step == 1);
}

TEST_CASE("training: adam first step is roughly -lr * sign", "[training]") {
  std::vector<Tensor> params{Tensor::from({1.0, 1.0}, {2}, true)};
  std::vector<Tensor> grads{Tensor::from({0.3, -2.0}, {2})};
  AdamState st;
  adam_step(params, grads, st, 0.01);
  REQUIRE(params[0].at(0) == Catch::Approx(1.0 - 0.01).margin(1e-6));
  REQUIRE(params[0].at(1) == Catch::Approx(1.0 + 0.01).margin(1e-6));
}

TEST_CASE("training: adam converges on a quadratic", "[training]") {
  std::vector<Tensor> params{Tensor::from({1.0, 1.0}, {2}, true)};
  AdamState st;
  for (int i = 0; i < 200; ++i) {
    TapeScope scope;
    params[0].zero_grad();
    backward(sum_all(square(params[0])));
    std::vector<Tensor> grads{params[0].grad()};
    adam_step(params, grads, st, 0.05);
  }
  REQUIRE(std::sqrt(params[0].at(0) * params[0].at(0) + params[0].at(1) * params[0].at(1)) < 1e-3);
}

TEST_CASE("training: inner update identities on the quadratic toy", "[training][meta]") {
  const double c = 0.7, theta0 = 0.2, alpha = 0.05;
  auto quad = [&](const std::vector<Tensor>& p) {
    return square(add_scalar(p[0], -c));  // (theta - c)^2
  };

  // alpha = 0 leaves theta untouched
  {
    TapeScope scope;
    std::vector<Tensor> theta{Tensor::scalar(theta0, true)};
    auto adapted = gd_inner_update(theta, quad, 0.0, 3, true);
    REQUIRE(adapted[0].item() == theta0);
  }

  // one step: theta' = theta - 2 alpha (theta - c)
  {
    TapeScope scope;
    std::vector<Tensor> theta{Tensor::scalar(theta0, true)};
    auto adapted = gd_inner_update(theta, quad, alpha, 1, true);
    REQUIRE(adapted[0].item() == Catch::Approx(theta0 - 2 * alpha * (theta0 - c)).margin(1e-15));
  }

  // five steps match the iterated closed form
  {
    TapeScope scope;
    std::vector<Tensor> theta{Tensor::scalar(theta0, true)};
    auto adapted = gd_inner_update(theta, quad, alpha, 5, true);
    double expect = theta0;
    for (int s = 0; s < 5; ++s) expect = expect - 2 * alpha * (expect - c);
    REQUIRE(adapted[0].item() == Catch::Approx(expect).margin(1e-12));
  }
}

TEST_CASE("training: second-order meta-gradient on the quadratic toy", "[training][meta]") {
  // L(theta) = (theta - c)^2, one inner step:
  // outer(theta) = ((1-2a)(theta-c))^2, d/dtheta = 2 (1-2a)^2 (theta - c)
  const double alpha = 0.1;
  auto meta_grad_at = [&](double theta0, double c, bool second_order) {
    TapeScope scope;
    Tensor theta = Tensor::scalar(theta0, true);
    auto quad = [&](const std::vector<Tensor>& p) { return square(add_scalar(p[0], -c)); };
    auto adapted = gd_inner_update({theta}, quad, alpha, 1, second_order);
    backward(quad({adapted[0]}));
    return theta.grad().item();
  };

  for (double theta0 : {-0.8, 0.3, 1.9}) {
    const double c = 0.5;
    const double analytic = 2.0 * (1 - 2 * alpha) * (1 - 2 * alpha) * (theta0 - c);
    REQUIRE(meta_grad_at(theta0, c, true) == Catch::Approx(analytic).margin(1e-8));

    // central finite differences of the outer objective
    const double eps = 1e-6;
    auto outer_value = [&](double t0) {
      const double t1 = t0 - 2 * alpha * (t0 - c);
      return (t1 - c) * (t1 - c);
    };
    const double numeric = (outer_value(theta0 + eps) - outer_value(theta0 - eps)) / (2 * eps);
    REQUIRE(meta_grad_at(theta0, c, true) == Catch::Approx(numeric).margin(1e-6));

    // first-order approximation drops the (1-2a)^2 factor in one of the terms
    const double fomaml = 2.0 * (1 - 2 * alpha) * (theta0 - c);
    REQUIRE(meta_grad_at(theta0, c, false) == Catch::Approx(fomaml).margin(1e-8));
  }
}

TEST_CASE("training: symmetric two-task meta-gradient vanishes", "[training][meta]") {
  const double alpha = 0.07;
  TapeScope scope;
  Tensor theta = Tensor::scalar(0.0, true);
  Tensor outer;
  for (double c : {1.0, -1.0}) {
    auto quad = [c](const std::vector<Tensor>& p) { return square(add_scalar(p[0], -c)); };
    auto adapted = gd_inner_update({theta}, quad, alpha, 1, true);
    Tensor l = quad({adapted[0]});
    outer = outer.defined() ? add(outer, l) : l;
  }
  backward(outer);
  REQUIRE(std::fabs(theta.grad().item()) <= 1e-12);
}

TEST_CASE("training: meta_outer_update applies one SGD step and beta=0 is identity",
          "[training][meta]") {
  Dataset ds = gen_dataset(tiny_spec());
  std::vector<MetaTask> tasks;
  tasks.push_back({TaskKind::kClassification, frozen_pool(TaskKind::kClassification, 2, 100)});

  SamplerModel sampler = SamplerModel::init(4, 50, 4);
  auto run = [&](double beta) {
    SamplerModel s = sampler.clone();
    TapeScope scope;
    MetaStepState state;
    state.theta = s.params();
    Rng rng(3);
    std::map<std::pair<int, int>, TaskBatch> batches;
    for (int j = 0; j < 2; ++j) {
      TaskBatch batch = make_batch(TaskKind::kClassification, ds.train, 4, rng);
      state.adapted[{0, j}] = meta_inner_update(s, state.theta, tasks[0].pool[static_cast<std::size_t>(j)],
                                                batch, 1e-3, 2, true);
      batches[{0, j}] = std::move(batch);
    }
    meta_outer_update(s, state, tasks, batches, beta);
    return s;
  };

  SamplerModel same = run(0.0);
  auto pa = sampler.params(), pb = same.params();
  for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i].data() == pb[i].data());

  SamplerModel moved = run(1e-3);
  bool any_change = false;
  auto pc = moved.params();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].data() != pc[i].data()) any_change = true;
  REQUIRE(any_change);

  // missing adapted entry is a contract violation
  TapeScope scope;
  MetaStepState incomplete;
  incomplete.theta = sampler.params();
  std::map<std::pair<int, int>, TaskBatch> no_batches;
  REQUIRE_THROWS_AS(meta_outer_update(sampler, incomplete, tasks, no_batches, 1e-3),
                    ContractViolation);
}

TEST_CASE("training: degenerate meta config reduces to the joint gradient",
          "[training][meta]") {
  // K_T = 1, k = 1, zero inner steps: the outer gradient equals the Eq. 2
  // gradient at theta
  Dataset ds = gen_dataset(tiny_spec());
  auto pool = frozen_pool(TaskKind::kClassification, 1, 200);
  SamplerModel sampler = SamplerModel::init(4, 51, 4);
  Rng rng(9);
  TaskBatch batch = make_batch(TaskKind::kClassification, ds.train, 6, rng);

  std::vector<std::vector<double>> meta_grad;
  {
    TapeScope scope;
    MetaStepState state;
    state.theta = sampler.params();
    state.adapted[{0, 0}] =
        meta_inner_update(sampler, state.theta, pool[0], batch, 1e-3, 0, true);
    std::map<std::pair<int, int>, TaskBatch> batches{{{0, 0}, batch}};
    std::vector<MetaTask> tasks{{TaskKind::kClassification, pool}};
    meta_outer_update(sampler, state, tasks, batches, 0.0);
    for (const auto& g : state.meta_gradient) meta_grad.push_back(g.data());
  }

  std::vector<std::vector<double>> joint_grad;
  {
    TapeScope scope;
    for (auto& p : sampler.params()) p.zero_grad();
    backward(loss_sampler_task_joint(sampler, pool, batch));
    for (const auto& p : sampler.params())
      joint_grad.push_back(p.grad().defined() ? p.grad().data()
                                              : std::vector<double>(p.data().size(), 0.0));
  }

  double scale = 0.0;
  for (const auto& block : joint_grad)
    for (double v : block) scale = std::max(scale, std::fabs(v));
  for (std::size_t a = 0; a < meta_grad.size(); ++a)
    for (std::size_t b = 0; b < meta_grad[a].size(); ++b)
      REQUIRE(std::fabs(meta_grad[a][b] - joint_grad[a][b]) <= 1e-12 * scale);
}

TEST_CASE("training: joint with k=1 matches single bit-exactly", "[training]") {
  Dataset ds = gen_dataset(tiny_spec());
  auto pool = frozen_pool(TaskKind::kClassification, 1, 300);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  cfg.eval_episodes = 8;
  cfg.seed = 77;

  SamplerModel a = SamplerModel::init(4, 52, 4);
  SamplerModel b = a.clone();
  TrainResult ra = train_single(a, pool[0], ds, {}, cfg);
  TrainResult rb = train_joint(b, pool, ds, {}, cfg);
  REQUIRE(logs_equal(ra.log, rb.log));
  auto pa = a.params(), pb = b.params();
  for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i].data() == pb[i].data());
}

TEST_CASE("training: identical seeds give identical logs and weights", "[training]") {
  Dataset ds = gen_dataset(tiny_spec());
  auto pool = frozen_pool(TaskKind::kReconstruction, 2, 400);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  cfg.seed = 5;
  cfg.eval_episodes = 8;

  SamplerModel a = SamplerModel::init(4, 53, 4);
  SamplerModel b = a.clone();
  TrainResult ra = train_joint(a, pool, ds, {}, cfg);
  TrainResult rb = train_joint(b, pool, ds, {}, cfg);
  REQUIRE(logs_equal(ra.log, rb.log));
}

TEST_CASE("training: frozen task models stay bit-identical through training", "[training]") {
  Dataset ds = gen_dataset(tiny_spec());
  auto pool = frozen_pool(TaskKind::kClassification, 2, 500);
  std::vector<std::vector<double>> before;
  for (const auto& m : pool)
    for (const auto& p : m.params()) before.push_back(p.data());

  SamplerModel s = SamplerModel::init(4, 54, 4);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  cfg.eval_episodes = 8;
  train_joint(s, pool, ds, {}, cfg);

  std::size_t i = 0;
  for (const auto& m : pool)
    for (const auto& p : m.params()) REQUIRE(p.data() == before[i++]);
}

TEST_CASE("training: loss decreases over the first epochs", "[training]") {
  Dataset ds = gen_dataset(tiny_spec(11));
  auto pool = frozen_pool(TaskKind::kReconstruction, 1, 600);
  std::vector<double> drops;
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    SamplerModel s = SamplerModel::init(4, 60 + seed, 4);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 8;
    cfg.seed = seed;
    cfg.eval_every = 100;  // keep it cheap
    TrainResult r = train_joint(s, pool, ds, {}, cfg);
    drops.push_back(r.log.front().loss_total - r.log.back().loss_total);
  }
  std::sort(drops.begin(), drops.end());
  REQUIRE(drops[1] > 0.0);  // median drop positive
}

TEST_CASE("training: meta_train runs, lowers temperature, and is deterministic",
          "[training][meta]") {
  Dataset ds = gen_dataset(tiny_spec(13));
  std::vector<MetaTask> tasks;
  tasks.push_back({TaskKind::kClassification, frozen_pool(TaskKind::kClassification, 2, 700)});
  tasks.push_back({TaskKind::kReconstruction, frozen_pool(TaskKind::kReconstruction, 2, 800)});

  MetaConfig cfg;
  cfg.meta_iters = 6;
  cfg.batch_size = 4;
  cfg.inner_steps = 2;
  cfg.seed = 3;

  SamplerModel a = SamplerModel::init(4, 55, 4);
  SamplerModel b = a.clone();
  const double temp_before = a.temperature().item();
  MetaResult ra = meta_train(a, tasks, ds, cfg);
  MetaResult rb = meta_train(b, tasks, ds, cfg);
  REQUIRE(logs_equal(ra.log, rb.log));
  REQUIRE(a.temperature().item() < temp_before);
  REQUIRE(ra.pool_uids.size() == 4);
}

TEST_CASE("training: adapt rejects pool overlap and honors zero epochs", "[training]") {
  Dataset ds = gen_dataset(tiny_spec(17));
  auto meta_pool = frozen_pool(TaskKind::kClassification, 2, 900);
  std::vector<std::uint64_t> meta_uids{meta_pool[0].uid, meta_pool[1].uid};

  SamplerModel s = SamplerModel::init(4, 56, 4);
  TrainConfig cfg;
  cfg.epochs = 0;
  auto before = s.params();
  std::vector<std::vector<double>> snapshot;
  for (const auto& p : before) snapshot.push_back(p.data());

  auto fresh = frozen_pool(TaskKind::kClassification, 1, 1000);
  TrainResult r = adapt(s, meta_uids, fresh, ds, {}, cfg);
  REQUIRE(r.log.empty());
  for (std::size_t i = 0; i < before.size(); ++i) REQUIRE(before[i].data() == snapshot[i]);

  REQUIRE_THROWS_AS(adapt(s, meta_uids, meta_pool, ds, {}, cfg), PoolOverlap);
}

TEST_CASE("training: evaluate at ratio one reproduces unsampled metrics", "[training]") {
  Dataset ds = gen_dataset(tiny_spec(19));
  auto pool = frozen_pool(TaskKind::kClassification, 2, 1100);
  EvalOptions opts;
  opts.episodes = 8;
  EvalResult unsampled = evaluate(nullptr, pool, ds.val, opts);

  // identity sampling: n == m means match returns a permutation of all points
  SamplerModel identity = SamplerModel::init(32, 57, 4);
  EvalResult sampled = evaluate(&identity, pool, ds.val, opts);
  REQUIRE(std::fabs(sampled.value - unsampled.value) <= 1e-9);
  REQUIRE(std::fabs(sampled.mean_loss - unsampled.mean_loss) <= 1e-9);

  EvalResult again = evaluate(nullptr, pool, ds.val, opts);
  REQUIRE(again.value == unsampled.value);

  EvalOptions forbidden = opts;
  forbidden.forbidden_uids = {pool[0].uid};
  REQUIRE_THROWS_AS(evaluate(nullptr, pool, ds.val, forbidden), PoolOverlap);
}

TEST_CASE("training: pretraining hits its bar deterministically", "[training][pretrain]") {
  DatasetSpec spec = tiny_spec(23);
  spec.train_per_class = 16;
  Dataset ds = gen_dataset(spec);
  PretrainConfig cfg;
  cfg.max_epochs = 40;
  cfg.cls_accuracy_bar = 0.5;  // relaxed bar for the tiny dataset
  cfg.retrieval_eval_episodes = 32;

  PretrainOutcome a = pretrain_task_model(TaskKind::kClassification, 31, ds, cfg);
  REQUIRE(a.model.frozen);
  REQUIRE(a.final_metric >= 0.5);

  PretrainOutcome b = pretrain_task_model(TaskKind::kClassification, 31, ds, cfg);
  auto pa = a.model.params(), pb = b.model.params();
  for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i].data() == pb[i].data());

  PretrainConfig impossible = cfg;
  impossible.max_epochs = 1;
  impossible.min_epochs = 1;
  impossible.cls_accuracy_bar = 1.0;
  REQUIRE_THROWS_AS(pretrain_task_model(TaskKind::kClassification, 32, ds, impossible),
                    PretrainFailure);
}

TEST_CASE("training: concurrent workers reproduce sequential results", "[training]") {
  Dataset ds = gen_dataset(tiny_spec(29));
  auto pool = frozen_pool(TaskKind::kClassification, 1, 1200);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  cfg.eval_episodes = 8;

  auto run = [&](std::uint64_t seed) {
    SamplerModel s = SamplerModel::init(4, seed, 4);
    TrainConfig c = cfg;
    c.seed = seed;
    return train_joint(s, pool, ds, {}, c);
  };

  TrainResult seq1 = run(71), seq2 = run(72);
  TrainResult par1, par2;
  std::thread w1([&] { par1 = run(71); });
  std::thread w2([&] { par2 = run(72); });
  w1.join();
  w2.join();
  REQUIRE(logs_equal(seq1.log, par1.log));
  REQUIRE(logs_equal(seq2.log, par2.log));
}
