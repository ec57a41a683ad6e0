#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "metasampler/errors.hpp"
#include "metasampler/geometry.hpp"
#include "metasampler/rng.hpp"

// Deterministic synthetic shape data: eight parametric families with
// per-instance shape parameters, used in place of a scanned-object corpus.
// Everything is a pure function of (spec, seed, index).

namespace msamp {

enum class ShapeClass : int {
  kSphere = 0,
  kCube = 1,
  kCylinder = 2,
  kCone = 3,
  kTorus = 4,
  kTetrahedron = 5,
  kEllipsoid = 6,
  kHelix = 7,
};

constexpr int kNumClasses = 8;

inline const char* shape_name(int id) {
  static const char* names[kNumClasses] = {"sphere",      "cube",      "cylinder",
                                           "cone",        "torus",     "tetrahedron",
                                           "ellipsoid",   "helix"};
  return names[id];
}

struct DatasetSpec {
  std::int64_t m = 64;        // points per cloud
  int train_per_class = 120;
  int val_per_class = 40;
  int test_per_class = 40;
  double jitter_sigma = 0.01;
  double max_yaw_deg = 180.0;  // per-instance yaw augmentation, uniform [-max, max]
  std::uint64_t seed = 1;
  bool distribution_shift = false;  // second distribution for transfer runs
};

struct LabeledCloud {
  PointCloud cloud;
  int label = 0;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<LabeledCloud> train, val, test;

  const std::vector<LabeledCloud>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ContractViolation("dataset: unknown split '" + name + "'");
  }
};

namespace detail {

inline Vec3 unit_direction(Rng& rng) {
  while (true) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n2 = dot3(v, v);
    if (n2 > 1e-12) {
      const double inv = 1.0 / std::sqrt(n2);
      return {v[0] * inv, v[1] * inv, v[2] * inv};
    }
  }
}

constexpr double kTau = 6.283185307179586476925286766559;

inline Vec3 surface_point(int cls, Rng& rng, const std::array<double, 4>& p) {
  switch (static_cast<ShapeClass>(cls)) {
    case ShapeClass::kSphere:
    case ShapeClass::kEllipsoid: {
      const Vec3 d = unit_direction(rng);
      return {d[0] * p[0], d[1] * p[1], d[2] * p[2]};
    }
    case ShapeClass::kCube: {
      const int axis = rng.index(3);
      const double sign = rng.index(2) == 0 ? -1.0 : 1.0;
      Vec3 v{rng.uniform(-1, 1) * p[0], rng.uniform(-1, 1) * p[1], rng.uniform(-1, 1) * p[2]};
      v[static_cast<std::size_t>(axis)] = sign * p[static_cast<std::size_t>(axis)];
      return v;
    }
    case ShapeClass::kCylinder: {
      const double r = p[0], h = p[1];
      if (rng.uniform() < 0.75) {  // lateral surface
        const double a = rng.uniform(0, kTau);
        return {r * std::cos(a), r * std::sin(a), rng.uniform(-h, h)};
      }
      const double a = rng.uniform(0, kTau);
      const double rr = r * std::sqrt(rng.uniform());
      return {rr * std::cos(a), rr * std::sin(a), rng.index(2) == 0 ? -h : h};
    }
    case ShapeClass::kCone: {
      const double r = p[0], h = p[1];
      if (rng.uniform() < 0.7) {  // lateral surface
        const double u = std::sqrt(rng.uniform());  // area-uniform along slant
        const double a = rng.uniform(0, kTau);
        return {u * r * std::cos(a), u * r * std::sin(a), h * (1.0 - u) - h / 2};
      }
      const double a = rng.uniform(0, kTau);
      const double rr = r * std::sqrt(rng.uniform());
      return {rr * std::cos(a), rr * std::sin(a), -h / 2};
    }
    case ShapeClass::kTorus: {
      const double ring = p[0], tube = p[1];
      const double u = rng.uniform(0, kTau), v = rng.uniform(0, kTau);
      const double w = ring + tube * std::cos(v);
      return {w * std::cos(u), w * std::sin(u), tube * std::sin(v)};
    }
    case ShapeClass::kTetrahedron: {
      // p[3] is the per-instance vertex perturbation scale; vertices derived
      // from the rng at construction time are passed via the caller
      return {0, 0, 0};  // handled by caller
    }
    case ShapeClass::kHelix: {
      const double r = p[0], turns = p[1], thick = p[2];
      const double u = rng.uniform();
      const double a = u * turns * kTau;
      const Vec3 jig = unit_direction(rng);
      return {r * std::cos(a) + thick * jig[0], r * std::sin(a) + thick * jig[1],
              2.0 * (u - 0.5) + thick * jig[2]};
    }
  }
  throw ContractViolation("surface_point: bad class id");
}

}  // namespace detail

// m surface points of one shape instance: per-instance parameters, yaw
// augmentation and Gaussian jitter, then normalize(). Deterministic in
// (class, instance_seed, m, spec knobs).
inline PointCloud gen_shape(int cls, std::uint64_t instance_seed, std::int64_t m,
                            const DatasetSpec& spec = DatasetSpec{}) {
  if (cls < 0 || cls >= kNumClasses)
    throw ContractViolation("gen_shape: class id out of range");
  if (m < 8) throw ContractViolation("gen_shape: m must be at least 8");
  Rng rng(instance_seed);
  const bool shift = spec.distribution_shift;

  // per-instance shape parameters; the shift regime uses disjoint ranges
  std::array<double, 4> p{1, 1, 1, 0};
  switch (static_cast<ShapeClass>(cls)) {
    case ShapeClass::kSphere: {
      // exactly round; normalize() maps it to the unit sphere
      const double r = shift ? rng.uniform(0.6, 1.4) : rng.uniform(0.8, 1.2);
      p = {r, r, r, 0};
      break;
    }
    case ShapeClass::kCube:
      for (int d = 0; d < 3; ++d)
        p[static_cast<std::size_t>(d)] = shift ? rng.uniform(0.45, 1.2) : rng.uniform(0.65, 1.0);
      break;
    case ShapeClass::kCylinder:
      p = {shift ? rng.uniform(0.3, 0.55) : rng.uniform(0.5, 0.8),
           shift ? rng.uniform(1.2, 1.9) : rng.uniform(0.8, 1.4), 0, 0};
      break;
    case ShapeClass::kCone:
      p = {shift ? rng.uniform(0.5, 1.2) : rng.uniform(0.6, 1.0),
           shift ? rng.uniform(0.9, 1.4) : rng.uniform(1.2, 2.0), 0, 0};
      break;
    case ShapeClass::kTorus:
      p = {1.0, shift ? rng.uniform(0.1, 0.22) : rng.uniform(0.2, 0.4), 0, 0};
      break;
    case ShapeClass::kTetrahedron:
      p[3] = shift ? 0.3 : 0.15;
      break;
    case ShapeClass::kEllipsoid:
      p = {1.0, shift ? rng.uniform(0.55, 0.85) : rng.uniform(0.45, 0.7),
           shift ? rng.uniform(0.35, 0.6) : rng.uniform(0.22, 0.42), 0};
      break;
    case ShapeClass::kHelix:
      p = {shift ? rng.uniform(0.35, 0.6) : rng.uniform(0.5, 0.9),
           shift ? rng.uniform(3.0, 4.5) : rng.uniform(1.5, 3.0), 0.04, 0};
      break;
  }

  PointCloud c;
  c.points.reserve(static_cast<std::size_t>(m));
  if (static_cast<ShapeClass>(cls) == ShapeClass::kSphere) {
    // antipodal pairs: centroid exactly zero, so normalize() keeps every
    // point on the unit sphere
    for (std::int64_t i = 0; i < m / 2; ++i) {
      const Vec3 d = detail::unit_direction(rng);
      c.points.push_back({d[0] * p[0], d[1] * p[1], d[2] * p[2]});
      c.points.push_back({-d[0] * p[0], -d[1] * p[1], -d[2] * p[2]});
    }
    if (m % 2 == 1) {
      const Vec3 d = detail::unit_direction(rng);
      c.points.push_back({d[0] * p[0], d[1] * p[1], d[2] * p[2]});
    }
  } else if (static_cast<ShapeClass>(cls) == ShapeClass::kTetrahedron) {
    const double s = 1.0 / std::sqrt(2.0);
    std::array<Vec3, 4> verts{Vec3{1, 0, -s}, Vec3{-1, 0, -s}, Vec3{0, 1, s}, Vec3{0, -1, s}};
    for (auto& v : verts)
      for (auto& x : v) x += rng.uniform(-p[3], p[3]);
    for (std::int64_t i = 0; i < m; ++i) {
      const int f = rng.index(4);  // face opposite vertex f
      double b0 = rng.uniform(), b1 = rng.uniform();
      if (b0 + b1 > 1.0) {
        b0 = 1.0 - b0;
        b1 = 1.0 - b1;
      }
      const double b2 = 1.0 - b0 - b1;
      const Vec3& a = verts[static_cast<std::size_t>((f + 1) % 4)];
      const Vec3& b = verts[static_cast<std::size_t>((f + 2) % 4)];
      const Vec3& d = verts[static_cast<std::size_t>((f + 3) % 4)];
      c.points.push_back({a[0] * b0 + b[0] * b1 + d[0] * b2, a[1] * b0 + b[1] * b1 + d[1] * b2,
                          a[2] * b0 + b[2] * b1 + d[2] * b2});
    }
  } else {
    for (std::int64_t i = 0; i < m; ++i) c.points.push_back(detail::surface_point(cls, rng, p));
  }

  const double yaw = rng.uniform(-spec.max_yaw_deg, spec.max_yaw_deg);
  c = apply_rigid(c, {yaw, 0, 0}, {0, 0, 0});
  const double sigma = spec.jitter_sigma * (shift ? 2.0 : 1.0);
  if (sigma > 0)
    for (auto& pt : c.points)
      for (auto& v : pt) v += rng.normal(0.0, sigma);
  return normalize(c);
}

// Split membership is decided by index before generation, so train/val/test
// are disjoint by construction. The shift regime skews per-class frequencies.
inline Dataset gen_dataset(const DatasetSpec& spec) {
  Dataset ds;
  ds.spec = spec;
  static const double kShiftSkew[kNumClasses] = {0.4, 0.4, 1.0, 0.6, 1.8, 0.4, 1.0, 2.2};
  for (int cls = 0; cls < kNumClasses; ++cls) {
    auto scaled = [&](int n) {
      if (!spec.distribution_shift) return n;
      return std::max(1, static_cast<int>(std::lround(n * kShiftSkew[cls])));
    };
    const int n_train = scaled(spec.train_per_class);
    const int n_val = scaled(spec.val_per_class);
    const int n_test = scaled(spec.test_per_class);
    const int total = n_train + n_val + n_test;
    for (int i = 0; i < total; ++i) {
      const std::uint64_t item_seed =
          derive_seed(spec.seed + (spec.distribution_shift ? 0x5157ULL << 32 : 0),
                      static_cast<std::uint64_t>(cls) * 1000003ULL + static_cast<std::uint64_t>(i));
      LabeledCloud item{gen_shape(cls, item_seed, spec.m, spec), cls};
      if (i < n_train)
        ds.train.push_back(std::move(item));
      else if (i < n_train + n_val)
        ds.val.push_back(std::move(item));
      else
        ds.test.push_back(std::move(item));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Task-specific generators
// ---------------------------------------------------------------------------

struct RetrievalEpisode {
  PointCloud query;
  std::vector<PointCloud> candidates;
  int answer = 0;
};

constexpr double kRetrievalMaxYawDeg = 180.0;
constexpr double kRetrievalMaxShift = 0.5;

// Matching pairs are the query shifted and rotated about the up axis.
inline PointCloud retrieval_transform(const PointCloud& c, Rng& rng) {
  const Vec3 euler{rng.uniform(-kRetrievalMaxYawDeg, kRetrievalMaxYawDeg), 0.0, 0.0};
  const Vec3 t{rng.uniform(-kRetrievalMaxShift, kRetrievalMaxShift),
               rng.uniform(-kRetrievalMaxShift, kRetrievalMaxShift),
               rng.uniform(-kRetrievalMaxShift, kRetrievalMaxShift)};
  return apply_rigid(c, euler, t);
}

// N-way episode: the answer candidate is a rigid transform of the query;
// distractors include at least one same-class hard negative when available.
inline RetrievalEpisode gen_retrieval_episode(const std::vector<LabeledCloud>& items,
                                              int n_way, std::uint64_t seed) {
  if (n_way < 2) throw ContractViolation("gen_retrieval_episode: N must be >= 2");
  if (static_cast<int>(items.size()) < n_way)
    throw ContractViolation("gen_retrieval_episode: not enough items for N-way episode");
  Rng rng(seed);
  const int qi = rng.index(static_cast<int>(items.size()));
  const LabeledCloud& q = items[static_cast<std::size_t>(qi)];

  std::vector<int> same_class, other;
  for (int i = 0; i < static_cast<int>(items.size()); ++i) {
    if (i == qi) continue;
    (items[static_cast<std::size_t>(i)].label == q.label ? same_class : other).push_back(i);
  }

  std::vector<int> distractors;
  if (!same_class.empty())
    distractors.push_back(same_class[static_cast<std::size_t>(rng.index(static_cast<int>(same_class.size())))]);
  std::vector<int> pool = other;
  for (int i : same_class)
    if (distractors.empty() || i != distractors[0]) pool.push_back(i);
  rng.shuffle(pool);
  for (int i : pool) {
    if (static_cast<int>(distractors.size()) >= n_way - 1) break;
    distractors.push_back(i);
  }
  if (static_cast<int>(distractors.size()) < n_way - 1)
    throw ContractViolation("gen_retrieval_episode: not enough distinct distractors");

  RetrievalEpisode ep;
  ep.query = q.cloud;
  ep.answer = rng.index(n_way);
  int d = 0;
  for (int slot = 0; slot < n_way; ++slot) {
    if (slot == ep.answer)
      ep.candidates.push_back(retrieval_transform(q.cloud, rng));
    else
      ep.candidates.push_back(items[static_cast<std::size_t>(distractors[static_cast<std::size_t>(d++)])].cloud);
  }
  return ep;
}

struct RetrievalPair {
  PointCloud a, b;
  bool is_match = false;
};

// Binary training pair; non-matches are same-class hard negatives half the
// time when possible.
inline RetrievalPair gen_retrieval_pair(const std::vector<LabeledCloud>& items,
                                        std::uint64_t seed) {
  if (items.size() < 2) throw ContractViolation("gen_retrieval_pair: need at least two items");
  Rng rng(seed);
  const int ai = rng.index(static_cast<int>(items.size()));
  const LabeledCloud& a = items[static_cast<std::size_t>(ai)];
  RetrievalPair pair;
  pair.a = a.cloud;
  pair.is_match = rng.uniform() < 0.5;
  if (pair.is_match) {
    pair.b = retrieval_transform(a.cloud, rng);
    return pair;
  }
  const bool want_hard = rng.uniform() < 0.5;
  std::vector<int> cands;
  for (int i = 0; i < static_cast<int>(items.size()); ++i) {
    if (i == ai) continue;
    const bool same = items[static_cast<std::size_t>(i)].label == a.label;
    if (same == want_hard) cands.push_back(i);
  }
  if (cands.empty())
    for (int i = 0; i < static_cast<int>(items.size()); ++i)
      if (i != ai) cands.push_back(i);
  const PointCloud& other =
      items[static_cast<std::size_t>(cands[static_cast<std::size_t>(rng.index(static_cast<int>(cands.size())))])].cloud;
  pair.b = retrieval_transform(other, rng);
  return pair;
}

struct RegistrationPair {
  PointCloud source;
  PointCloud target;  // source under the ground-truth transform
  Vec3 euler{0, 0, 0};
  Vec3 t{0, 0, 0};
};

constexpr double kRegistrationMaxAngleDeg = 45.0;
constexpr double kRegistrationMaxShift = 1.0;

inline RegistrationPair gen_registration_pair(const std::vector<LabeledCloud>& items,
                                              std::uint64_t seed) {
  if (items.empty()) throw ContractViolation("gen_registration_pair: empty item list");
  Rng rng(seed);
  RegistrationPair pair;
  pair.source = items[static_cast<std::size_t>(rng.index(static_cast<int>(items.size())))].cloud;
  for (int d = 0; d < 3; ++d) {
    pair.euler[static_cast<std::size_t>(d)] =
        rng.uniform(-kRegistrationMaxAngleDeg, kRegistrationMaxAngleDeg);
    pair.t[static_cast<std::size_t>(d)] = rng.uniform(-kRegistrationMaxShift, kRegistrationMaxShift);
  }
  pair.target = apply_rigid(pair.source, pair.euler, pair.t);
  return pair;
}

// Mean over points of the Euclidean distance to the nearest neighbor;
// the dataset-scale statistic used by the reconstruction convergence bar.
inline double mean_nn_spacing(const std::vector<LabeledCloud>& items) {
  double total = 0.0;
  std::int64_t count = 0;
  for (const auto& item : items) {
    const auto& c = item.cloud;
    for (std::int64_t i = 0; i < c.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < c.size(); ++j)
        if (j != i) best = std::min(best, dist2(c[i], c[j]));
      total += std::sqrt(best);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace msamp
