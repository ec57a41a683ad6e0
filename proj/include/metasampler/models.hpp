#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "metasampler/errors.hpp"
#include "metasampler/geometry.hpp"
#include "metasampler/rng.hpp"
#include "metasampler/tensor.hpp"

namespace msamp {

enum class TaskKind : int {
  kClassification = 0,
  kReconstruction = 1,
  kRetrieval = 2,
  kPoseRegression = 3,
};

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::kClassification: return "classification";
    case TaskKind::kReconstruction: return "reconstruction";
    case TaskKind::kRetrieval: return "retrieval";
    case TaskKind::kPoseRegression: return "pose_regression";
  }
  return "?";
}

inline TaskKind task_from_name(const std::string& s) {
  if (s == "classification") return TaskKind::kClassification;
  if (s == "reconstruction") return TaskKind::kReconstruction;
  if (s == "retrieval") return TaskKind::kRetrieval;
  if (s == "pose_regression" || s == "pose") return TaskKind::kPoseRegression;
  throw ContractViolation("unknown task '" + s + "'");
}

constexpr int kNumClassesOut = 8;   // classification logits
constexpr int kFeatureDim = 64;     // global feature width
constexpr int kEncoderHidden = 32;
constexpr int kHeadHidden = 32;

struct DenseLayer {
  Tensor w, b;
};

namespace detail {

inline DenseLayer make_dense(Rng& rng, std::int64_t in, std::int64_t out, double bias_init = 0.0) {
  std::vector<double> w(static_cast<std::size_t>(in * out));
  const double sigma = std::sqrt(2.0 / static_cast<double>(in));
  for (auto& v : w) v = rng.normal(0.0, sigma);
  DenseLayer l;
  l.w = Tensor::from(std::move(w), {in, out}, true);
  l.b = Tensor::full({out}, bias_init);
  l.b.set_requires_grad(true);
  return l;
}

// vector in, vector out: y = x W + b
inline Tensor dense_vec(const DenseLayer& l, const Tensor& x) {
  Tensor row = reshape(x, {1, x.numel()});
  Tensor y = matmul(row, l.w);
  return add(reshape(y, {l.w.dim(1)}), l.b);
}

// per-row application for [m, in] inputs
inline Tensor dense_rows(const DenseLayer& l, const Tensor& x) {
  return add(matmul(x, l.w), expand_rows(l.b, x.dim(0)));
}

inline Tensor center_rows(const Tensor& points) {
  return sub(points, expand_rows(reduce_mean(points, 0), points.dim(0)));
}

}  // namespace detail

// Shared per-point feature extractor: 3 -> 32 -> 64 MLP with relu, max-pooled
// over points. Permutation invariance is exact by construction.
struct Encoder {
  DenseLayer l1, l2;

  static Encoder init(Rng& rng) {
    Encoder e;
    // positive bias keeps most first-layer units live over the unit ball
    e.l1 = detail::make_dense(rng, 3, kEncoderHidden, 1.0);
    e.l2 = detail::make_dense(rng, kEncoderHidden, kFeatureDim);
    return e;
  }
};

inline Tensor encode(const Encoder& enc, const Tensor& points) {
  if (points.rank() != 2 || points.dim(1) != 3 || points.dim(0) < 1)
    throw ContractViolation("encode: expected nonempty [m,3] cloud, got " +
                            shape_str(points.shape()));
  Tensor h1 = relu(detail::dense_rows(enc.l1, points));
  // second layer stays linear: max-pooled features carry both signs, which
  // keeps downstream relu units live across inputs
  Tensor h2 = detail::dense_rows(enc.l2, h1);
  return reduce_max(h2, 0);
}

inline Tensor encode(const Encoder& enc, const PointCloud& cloud) {
  return encode(enc, to_tensor(cloud));
}

// ---------------------------------------------------------------------------
// Task models
// ---------------------------------------------------------------------------

// A frozen, pretrained task network: shared encoder plus a task head.
// `uid` identifies the pretraining run; pool-disjointness checks compare uids.
struct TaskModel {
  TaskKind kind = TaskKind::kClassification;
  Encoder encoder;
  DenseLayer head1, head2;
  bool frozen = false;
  std::uint64_t uid = 0;
  std::int64_t recon_points = 0;  // decoder output count (reconstruction only)

  static TaskModel init(TaskKind kind, std::uint64_t seed, std::int64_t recon_points = 64) {
    Rng rng(derive_seed(seed, 0xA5));
    TaskModel m;
    m.kind = kind;
    m.uid = derive_seed(seed, static_cast<std::uint64_t>(kind) + 0x7A5CULL);
    m.encoder = Encoder::init(rng);
    switch (kind) {
      case TaskKind::kClassification:
        m.head1 = detail::make_dense(rng, kFeatureDim, kHeadHidden);
        m.head2 = detail::make_dense(rng, kHeadHidden, kNumClassesOut);
        break;
      case TaskKind::kReconstruction:
        m.recon_points = recon_points;
        m.head1 = detail::make_dense(rng, kFeatureDim, kHeadHidden);
        m.head2 = detail::make_dense(rng, kHeadHidden, recon_points * 3);
        break;
      case TaskKind::kRetrieval:
        m.head1 = detail::make_dense(rng, 2 * kFeatureDim, kHeadHidden);
        m.head2 = detail::make_dense(rng, kHeadHidden, 1);
        break;
      case TaskKind::kPoseRegression:
        m.head1 = detail::make_dense(rng, 2 * kFeatureDim, kHeadHidden);
        m.head2 = detail::make_dense(rng, kHeadHidden, 6);
        break;
    }
    return m;
  }

  std::vector<Tensor> params() const {
    return {encoder.l1.w, encoder.l1.b, encoder.l2.w, encoder.l2.b,
            head1.w,      head1.b,      head2.w,      head2.b};
  }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    return {{"enc.l1.w", encoder.l1.w}, {"enc.l1.b", encoder.l1.b},
            {"enc.l2.w", encoder.l2.w}, {"enc.l2.b", encoder.l2.b},
            {"head1.w", head1.w},       {"head1.b", head1.b},
            {"head2.w", head2.w},       {"head2.b", head2.b}};
  }

  void freeze() {
    frozen = true;
    for (auto& p : params()) p.set_requires_grad(false);
  }
};

// classification -> C logits
inline Tensor classify_logits(const TaskModel& m, const Tensor& points) {
  if (m.kind != TaskKind::kClassification)
    throw ContractViolation("classify_logits: wrong task kind");
  Tensor f = encode(m.encoder, points);
  Tensor h = relu(detail::dense_vec(m.head1, f));
  return detail::dense_vec(m.head2, h);
}

// reconstruction -> [recon_points, 3] cloud
inline Tensor reconstruct(const TaskModel& m, const Tensor& points) {
  if (m.kind != TaskKind::kReconstruction)
    throw ContractViolation("reconstruct: wrong task kind");
  Tensor f = encode(m.encoder, points);
  Tensor h = relu(detail::dense_vec(m.head1, f));
  Tensor raw = detail::dense_vec(m.head2, h);
  return reshape(raw, {m.recon_points, 3});
}

// retrieval -> match probability in (0,1); symmetric in its two inputs.
// Inputs are centered so the match score ignores translation.
inline Tensor retrieval_score(const TaskModel& m, const Tensor& a, const Tensor& b) {
  if (m.kind != TaskKind::kRetrieval)
    throw ContractViolation("retrieval_score: wrong task kind");
  Tensor e1 = encode(m.encoder, detail::center_rows(a));
  Tensor e2 = encode(m.encoder, detail::center_rows(b));
  Tensor feats = concat({abs(sub(e1, e2)), mul(e1, e2)}, 0);
  Tensor h = relu(detail::dense_vec(m.head1, feats));
  Tensor s = detail::dense_vec(m.head2, h);
  return reshape(sigmoid(s), Shape{});
}

struct PosePrediction {
  Tensor euler_deg;  // [3]
  Tensor t;          // [3]
};

// pose regression -> Euler angles (degrees) and translation aligning source
// onto target
inline PosePrediction predict_pose(const TaskModel& m, const Tensor& source,
                                   const Tensor& target) {
  if (m.kind != TaskKind::kPoseRegression)
    throw ContractViolation("predict_pose: wrong task kind");
  Tensor es = encode(m.encoder, source);
  Tensor et = encode(m.encoder, target);
  Tensor h = relu(detail::dense_vec(m.head1, concat({es, et}, 0)));
  Tensor raw = detail::dense_vec(m.head2, h);
  PosePrediction out;
  out.euler_deg = mul_scalar(narrow(raw, 0, 0, 3), 45.0);
  out.t = narrow(raw, 0, 3, 3);
  return out;
}

// ---------------------------------------------------------------------------
// Sampler
// ---------------------------------------------------------------------------

// Learnable sampler: generator emits n raw points, each softly projected onto
// its k_proj nearest input points with weights softmax(-d^2 / temperature^2).
// The temperature is learnable through its logarithm so it stays positive.
struct SamplerModel {
  Encoder encoder;
  DenseLayer g1, g2;
  Tensor log_temperature;
  std::int64_t n = 16;
  std::int64_t k_proj = 4;

  static SamplerModel init(std::int64_t n, std::uint64_t seed, std::int64_t k_proj = 4) {
    Rng rng(derive_seed(seed, 0x5A17));
    SamplerModel s;
    s.n = n;
    s.k_proj = k_proj;
    s.encoder = Encoder::init(rng);
    s.g1 = detail::make_dense(rng, kFeatureDim, 64);
    s.g2 = detail::make_dense(rng, 64, n * 3);
    s.log_temperature = Tensor::scalar(0.0, true);  // temperature starts at 1
    return s;
  }

  std::vector<Tensor> params() const {
    return {encoder.l1.w, encoder.l1.b, encoder.l2.w, encoder.l2.b,
            g1.w,         g1.b,         g2.w,         g2.b,
            log_temperature};
  }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    return {{"enc.l1.w", encoder.l1.w}, {"enc.l1.b", encoder.l1.b},
            {"enc.l2.w", encoder.l2.w}, {"enc.l2.b", encoder.l2.b},
            {"g1.w", g1.w},             {"g1.b", g1.b},
            {"g2.w", g2.w},             {"g2.b", g2.b},
            {"log_temperature", log_temperature}};
  }

  // Same architecture over substituted parameter handles (used by the inner
  // update, whose adapted parameters are tape expressions).
  SamplerModel with_params(const std::vector<Tensor>& p) const {
    if (p.size() != 9) throw ContractViolation("with_params: expected 9 tensors");
    SamplerModel s = *this;
    s.encoder.l1.w = p[0];
    s.encoder.l1.b = p[1];
    s.encoder.l2.w = p[2];
    s.encoder.l2.b = p[3];
    s.g1.w = p[4];
    s.g1.b = p[5];
    s.g2.w = p[6];
    s.g2.b = p[7];
    s.log_temperature = p[8];
    return s;
  }

  SamplerModel clone() const {
    std::vector<Tensor> copies;
    for (const auto& p : params()) copies.push_back(p.clone_detached());
    return with_params(copies);
  }

  Tensor temperature() const { return exp(log_temperature); }
};

struct SoftSample {
  Tensor soft_points;                 // [n, 3]
  Tensor weights;                     // [n, k_proj], rows sum to 1
  std::vector<std::int64_t> neighbor_idx;  // flattened [n * k_proj]
  Tensor raw_points;                  // generator output before projection
};

inline SoftSample sampler_forward(const SamplerModel& s, const Tensor& points) {
  const std::int64_t m = points.dim(0);
  if (s.n >= m)
    throw ContractViolation("sampler_forward: n=" + std::to_string(s.n) +
                            " must be smaller than m=" + std::to_string(m));
  if (s.k_proj > m) throw ContractViolation("sampler_forward: k_proj exceeds cloud size");

  Tensor feat = encode(s.encoder, points);
  // sigmoid hidden layer: no dead units, and a real second derivative for
  // the meta-gradient path
  Tensor h = sigmoid(detail::dense_vec(s.g1, feat));
  Tensor raw = reshape(detail::dense_vec(s.g2, h), {s.n, 3});

  // nearest input points per generated point, by forward values
  Tensor d2_full = pairwise_dist2(raw, points);
  const std::int64_t k = s.k_proj;
  std::vector<std::int64_t> flat_idx(static_cast<std::size_t>(s.n * k));
  std::vector<std::int64_t> order(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < s.n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
      return d2_full.at(i, a) < d2_full.at(i, b);
    });
    for (std::int64_t j = 0; j < k; ++j)
      flat_idx[static_cast<std::size_t>(i * k + j)] = order[static_cast<std::size_t>(j)];
  }

  std::vector<std::int64_t> rep_idx(static_cast<std::size_t>(s.n * k));
  for (std::int64_t i = 0; i < s.n; ++i)
    for (std::int64_t j = 0; j < k; ++j) rep_idx[static_cast<std::size_t>(i * k + j)] = i;

  Tensor neighbors = gather_rows(points, flat_idx);       // [n*k, 3]
  Tensor raw_rep = gather_rows(raw, rep_idx);             // [n*k, 3]
  Tensor d2_sel = reshape(reduce_sum(square(sub(raw_rep, neighbors)), 1), {s.n, k});
  Tensor temp2 = square(exp(s.log_temperature));
  Tensor logits = scale(neg(d2_sel), reciprocal(temp2));
  Tensor weights = softmax(logits);                       // [n, k]

  Tensor wflat = reshape(weights, {s.n * k});
  Tensor weighted = mul(neighbors, expand_cols(wflat, 3));  // [n*k, 3]
  Tensor soft = scatter_add_rows(weighted, rep_idx, s.n);   // [n, 3]

  SoftSample out;
  out.soft_points = soft;
  out.weights = weights;
  out.neighbor_idx = std::move(flat_idx);
  out.raw_points = raw;
  return out;
}

inline SoftSample sampler_forward(const SamplerModel& s, const PointCloud& cloud) {
  return sampler_forward(s, to_tensor(cloud));
}

// Inference-time matching: each soft point maps to its nearest input index;
// duplicates are dropped in generator order and the shortfall is filled by
// FPS over the unchosen indices seeded from the chosen set. Always returns
// exactly n distinct indices.
inline std::vector<std::int64_t> sampler_match(const SamplerModel& s, const PointCloud& cloud) {
  const std::int64_t m = cloud.size();
  const std::int64_t n = std::min<std::int64_t>(s.n, m);
  std::vector<std::int64_t> chosen;
  {
    NoGradScope no_grad;
    if (s.n < m) {
      SoftSample sample = sampler_forward(s, cloud);
      std::vector<bool> used(static_cast<std::size_t>(m), false);
      for (std::int64_t i = 0; i < s.n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::int64_t best_j = 0;
        for (std::int64_t j = 0; j < m; ++j) {
          const Vec3 sp{sample.soft_points.at(i, 0), sample.soft_points.at(i, 1),
                        sample.soft_points.at(i, 2)};
          const double d = dist2(sp, cloud[j]);
          if (d < best) {
            best = d;
            best_j = j;
          }
        }
        if (!used[static_cast<std::size_t>(best_j)]) {
          used[static_cast<std::size_t>(best_j)] = true;
          chosen.push_back(best_j);
        }
      }
    }
  }
  if (static_cast<std::int64_t>(chosen.size()) < n) {
    std::vector<bool> used(static_cast<std::size_t>(m), false);
    for (auto c : chosen) used[static_cast<std::size_t>(c)] = true;
    std::vector<std::int64_t> candidates;
    for (std::int64_t j = 0; j < m; ++j)
      if (!used[static_cast<std::size_t>(j)]) candidates.push_back(j);
    if (chosen.empty()) {
      chosen.push_back(candidates.front());
      candidates.erase(candidates.begin());
    }
    chosen = farthest_point_fill(cloud, std::move(chosen), std::move(candidates), n);
  }
  return chosen;
}

// ---------------------------------------------------------------------------
// Pools
// ---------------------------------------------------------------------------

struct ModelPool {
  TaskKind kind = TaskKind::kClassification;
  std::vector<TaskModel> train_models;
  std::vector<TaskModel> test_models;
};

inline bool pools_overlap(const std::vector<TaskModel>& a, const std::vector<TaskModel>& b) {
  for (const auto& x : a)
    for (const auto& y : b)
      if (x.uid == y.uid) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest (length-prefixed) followed by TSR1 records in
// manifest order.
// ---------------------------------------------------------------------------

inline void write_checkpoint(std::ostream& os, const nlohmann::json& meta,
                             const std::vector<std::pair<std::string, Tensor>>& tensors) {
  nlohmann::json manifest = meta;
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    nlohmann::json rec;
    rec["name"] = name;
    rec["shape"] = t.shape();
    manifest["tensors"].push_back(rec);
  }
  const std::string text = manifest.dump();
  const std::uint32_t len = static_cast<std::uint32_t>(text.size());
  os.write("MSCK", 4);
  os.write(reinterpret_cast<const char*>(&len), 4);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : tensors) write_tensor(os, t);
  if (!os) throw IoError("write_checkpoint: stream failure");
}

struct Checkpoint {
  nlohmann::json manifest;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MSCK", 4) != 0)
    throw IoError("read_checkpoint: bad magic");
  std::uint32_t len = 0;
  is.read(reinterpret_cast<char*>(&len), 4);
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (!is) throw IoError("read_checkpoint: truncated manifest");
  Checkpoint ck;
  ck.manifest = nlohmann::json::parse(text);
  for (const auto& rec : ck.manifest.at("tensors"))
    ck.tensors.emplace_back(rec.at("name").get<std::string>(), read_tensor(is));
  return ck;
}

inline void copy_params_from(const std::vector<std::pair<std::string, Tensor>>& dst,
                             const Checkpoint& ck) {
  for (const auto& [name, t] : dst) {
    bool found = false;
    for (const auto& [cname, ct] : ck.tensors) {
      if (cname == name) {
        if (ct.shape() != t.shape())
          throw IoError("checkpoint: shape mismatch for '" + name + "'");
        Tensor target = t;
        target.mutable_data() = ct.data();
        found = true;
        break;
      }
    }
    if (!found) throw IoError("checkpoint: missing tensor '" + name + "'");
  }
}

inline void save_task_model(const std::string& path, const TaskModel& m,
                            nlohmann::json extra = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_task_model: cannot open " + path);
  nlohmann::json meta = std::move(extra);
  meta["kind"] = "task_model";
  meta["task_kind"] = task_name(m.kind);
  meta["uid"] = m.uid;
  meta["recon_points"] = m.recon_points;
  write_checkpoint(os, meta, m.named_params());
}

inline TaskModel load_task_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_task_model: cannot open " + path);
  Checkpoint ck = read_checkpoint(is);
  TaskModel m = TaskModel::init(task_from_name(ck.manifest.at("task_kind").get<std::string>()),
                                /*seed=*/1,
                                ck.manifest.value("recon_points", 64));
  m.uid = ck.manifest.at("uid").get<std::uint64_t>();
  copy_params_from(m.named_params(), ck);
  return m;
}

inline void save_sampler(const std::string& path, const SamplerModel& s,
                         nlohmann::json extra = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_sampler: cannot open " + path);
  nlohmann::json meta = std::move(extra);
  meta["kind"] = "sampler";
  meta["n"] = s.n;
  meta["k_proj"] = s.k_proj;
  write_checkpoint(os, meta, s.named_params());
}

inline SamplerModel load_sampler(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_sampler: cannot open " + path);
  Checkpoint ck = read_checkpoint(is);
  SamplerModel s = SamplerModel::init(ck.manifest.at("n").get<std::int64_t>(), 1,
                                      ck.manifest.at("k_proj").get<std::int64_t>());
  copy_params_from(s.named_params(), ck);
  return s;
}

}  // namespace msamp
