#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "metasampler/errors.hpp"
#include "metasampler/rng.hpp"
#include "metasampler/tensor.hpp"

namespace msamp {

using Vec3 = std::array<double, 3>;

inline double dot3(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

inline double dist2(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

// Ordered list of 3-D points; the universal currency between samplers and
// task networks. Normalized clouds have centroid 0 and max point norm 1.
struct PointCloud {
  std::vector<Vec3> points;

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> pts) : points(std::move(pts)) {}

  std::int64_t size() const { return static_cast<std::int64_t>(points.size()); }
  Vec3& operator[](std::int64_t i) { return points[static_cast<std::size_t>(i)]; }
  const Vec3& operator[](std::int64_t i) const { return points[static_cast<std::size_t>(i)]; }
};

inline Tensor to_tensor(const PointCloud& c) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(c.size() * 3));
  for (const auto& p : c.points) {
    data.push_back(p[0]);
    data.push_back(p[1]);
    data.push_back(p[2]);
  }
  return Tensor::from(std::move(data), {c.size(), 3});
}

inline PointCloud from_tensor(const Tensor& t) {
  if (t.rank() != 2 || t.dim(1) != 3)
    throw ContractViolation("from_tensor: expected [m,3], got " + shape_str(t.shape()));
  PointCloud c;
  c.points.resize(static_cast<std::size_t>(t.dim(0)));
  for (std::int64_t i = 0; i < t.dim(0); ++i)
    c.points[static_cast<std::size_t>(i)] = {t.at(i, 0), t.at(i, 1), t.at(i, 2)};
  return c;
}

inline PointCloud subset(const PointCloud& c, const std::vector<std::int64_t>& idx) {
  PointCloud out;
  out.points.reserve(idx.size());
  for (auto i : idx) out.points.push_back(c[i]);
  return out;
}

// Centroid to the origin, max point norm to 1. Idempotent within 1e-9.
inline PointCloud normalize(const PointCloud& cloud) {
  if (cloud.size() < 1) throw ContractViolation("normalize: empty cloud");
  Vec3 centroid{0, 0, 0};
  for (const auto& p : cloud.points)
    for (int d = 0; d < 3; ++d) centroid[static_cast<std::size_t>(d)] += p[static_cast<std::size_t>(d)];
  for (auto& v : centroid) v /= static_cast<double>(cloud.size());

  PointCloud out = cloud;
  double max_norm2 = 0.0;
  for (auto& p : out.points) {
    for (int d = 0; d < 3; ++d) {
      p[static_cast<std::size_t>(d)] -= centroid[static_cast<std::size_t>(d)];
      if (!std::isfinite(p[static_cast<std::size_t>(d)]))
        throw ContractViolation("normalize: non-finite coordinate");
    }
    max_norm2 = std::max(max_norm2, dot3(p, p));
  }
  if (max_norm2 <= 1e-24)
    throw DegenerateInput("normalize: all points identical");
  const double inv = 1.0 / std::sqrt(max_norm2);
  for (auto& p : out.points)
    for (auto& v : p) v *= inv;
  return out;
}

// Greedy farthest point sampling; each pick maximizes the minimum distance
// to the already-chosen set, ties to the lowest index.
inline std::vector<std::int64_t> farthest_point_sample(const PointCloud& cloud, std::int64_t n,
                                                       std::int64_t start = 0) {
  const std::int64_t m = cloud.size();
  if (n < 1 || n > m)
    throw ContractViolation("farthest_point_sample: n=" + std::to_string(n) + " out of [1," +
                            std::to_string(m) + "]");
  if (start < 0 || start >= m)
    throw ContractViolation("farthest_point_sample: start index out of range");
  std::vector<std::int64_t> chosen{start};
  std::vector<bool> taken(static_cast<std::size_t>(m), false);
  taken[static_cast<std::size_t>(start)] = true;
  std::vector<double> min_d2(static_cast<std::size_t>(m),
                             std::numeric_limits<double>::infinity());
  std::int64_t last = start;
  while (static_cast<std::int64_t>(chosen.size()) < n) {
    double best = -1.0;
    std::int64_t best_i = -1;
    for (std::int64_t i = 0; i < m; ++i) {
      const double d = dist2(cloud[i], cloud[last]);
      if (d < min_d2[static_cast<std::size_t>(i)]) min_d2[static_cast<std::size_t>(i)] = d;
      if (!taken[static_cast<std::size_t>(i)] && min_d2[static_cast<std::size_t>(i)] > best) {
        best = min_d2[static_cast<std::size_t>(i)];
        best_i = i;
      }
    }
    chosen.push_back(best_i);
    taken[static_cast<std::size_t>(best_i)] = true;
    last = best_i;
  }
  return chosen;
}

// FPS continuation: extends an existing chosen set over `candidates` only.
inline std::vector<std::int64_t> farthest_point_fill(const PointCloud& cloud,
                                                     std::vector<std::int64_t> chosen,
                                                     std::vector<std::int64_t> candidates,
                                                     std::int64_t n) {
  std::vector<double> min_d2(candidates.size(), std::numeric_limits<double>::infinity());
  for (std::size_t t = 0; t < candidates.size(); ++t)
    for (auto c : chosen)
      min_d2[t] = std::min(min_d2[t], dist2(cloud[candidates[t]], cloud[c]));
  while (static_cast<std::int64_t>(chosen.size()) < n && !candidates.empty()) {
    std::size_t best_t = 0;
    for (std::size_t t = 1; t < candidates.size(); ++t)
      if (min_d2[t] > min_d2[best_t]) best_t = t;
    const std::int64_t picked = candidates[best_t];
    chosen.push_back(picked);
    candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(best_t));
    min_d2.erase(min_d2.begin() + static_cast<std::ptrdiff_t>(best_t));
    for (std::size_t t = 0; t < candidates.size(); ++t)
      min_d2[t] = std::min(min_d2[t], dist2(cloud[candidates[t]], cloud[picked]));
  }
  return chosen;
}

inline std::vector<std::int64_t> random_sample(const PointCloud& cloud, std::int64_t n,
                                               std::uint64_t seed) {
  const std::int64_t m = cloud.size();
  if (n < 1 || n > m)
    throw ContractViolation("random_sample: n=" + std::to_string(n) + " out of [1," +
                            std::to_string(m) + "]");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(m));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  // partial Fisher-Yates: first n entries are the sample
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t j = i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(m - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(n));
  return idx;
}

// Deterministic inverse-density sampling: points with the largest summed
// distance to their k nearest neighbors (the sparsest) win; ties to the
// lowest index.
inline std::vector<std::int64_t> inverse_density_sample(const PointCloud& cloud, std::int64_t n,
                                                        std::int64_t k) {
  const std::int64_t m = cloud.size();
  if (n < 1 || n > m)
    throw ContractViolation("inverse_density_sample: n out of range");
  if (k < 1 || k >= m)
    throw ContractViolation("inverse_density_sample: k=" + std::to_string(k) +
                            " must be in [1," + std::to_string(m) + ")");
  std::vector<double> score(static_cast<std::size_t>(m), 0.0);
  std::vector<double> d(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    std::size_t cnt = 0;
    for (std::int64_t j = 0; j < m; ++j)
      if (j != i) d[cnt++] = std::sqrt(dist2(cloud[i], cloud[j]));
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k - 1), d.begin() + static_cast<std::ptrdiff_t>(cnt));
    double s = 0.0;
    for (std::int64_t t = 0; t < k; ++t) s += d[static_cast<std::size_t>(t)];
    score[static_cast<std::size_t>(i)] = s;
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::int64_t a, std::int64_t b) {
                     return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
                   });
  order.resize(static_cast<std::size_t>(n));
  return order;
}

// Two-way Chamfer distance on tensors (differentiable): mean of squared
// nearest-neighbor distances in each direction, directions summed.
inline Tensor chamfer(const Tensor& a, const Tensor& b) {
  if (a.dim(0) < 1 || b.dim(0) < 1) throw ContractViolation("chamfer: empty cloud");
  Tensor d2 = pairwise_dist2(a, b);
  Tensor fwd = mean_all(reduce_min(d2, 1));
  Tensor bwd = mean_all(reduce_min(d2, 0));
  return add(fwd, bwd);
}

inline double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  NoGradScope no_grad;
  return chamfer(to_tensor(a), to_tensor(b)).item();
}

constexpr double kDegToRad = 0.017453292519943295;

// Z-Y-X intrinsic rotation (yaw about z, then pitch about the new y, then
// roll about the new x), as the matrix product Rz * Ry * Rx.
inline std::array<Vec3, 3> rotation_matrix(const Vec3& euler_deg) {
  const double cz = std::cos(euler_deg[0] * kDegToRad), sz = std::sin(euler_deg[0] * kDegToRad);
  const double cy = std::cos(euler_deg[1] * kDegToRad), sy = std::sin(euler_deg[1] * kDegToRad);
  const double cx = std::cos(euler_deg[2] * kDegToRad), sx = std::sin(euler_deg[2] * kDegToRad);
  return {Vec3{cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx},
          Vec3{sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx},
          Vec3{-sy, cy * sx, cy * cx}};
}

inline PointCloud apply_rigid(const PointCloud& cloud, const Vec3& euler_deg, const Vec3& t) {
  const auto r = rotation_matrix(euler_deg);
  PointCloud out;
  out.points.reserve(cloud.points.size());
  for (const auto& p : cloud.points)
    out.points.push_back({dot3(r[0], p) + t[0], dot3(r[1], p) + t[1], dot3(r[2], p) + t[2]});
  return out;
}

// Differentiable rigid transform: euler_deg and t are rank-1 [3] tensors,
// points is [m,3]. Same Z-Y-X convention as apply_rigid.
inline Tensor apply_rigid_t(const Tensor& points, const Tensor& euler_deg, const Tensor& t) {
  if (euler_deg.numel() != 3 || t.numel() != 3)
    throw ContractViolation("apply_rigid_t: euler and t must have 3 elements");
  Tensor rad = mul_scalar(reshape(euler_deg, {3}), kDegToRad);
  Tensor cz = cos(narrow(rad, 0, 0, 1)), sz = sin(narrow(rad, 0, 0, 1));
  Tensor cy = cos(narrow(rad, 0, 1, 1)), sy = sin(narrow(rad, 0, 1, 1));
  Tensor cx = cos(narrow(rad, 0, 2, 1)), sx = sin(narrow(rad, 0, 2, 1));
  auto prod = [](const Tensor& a, const Tensor& b) { return mul(a, b); };
  std::vector<Tensor> entries{
      prod(cz, cy), sub(mul(prod(cz, sy), sx), prod(sz, cx)), add(mul(prod(cz, sy), cx), prod(sz, sx)),
      prod(sz, cy), add(mul(prod(sz, sy), sx), prod(cz, cx)), sub(mul(prod(sz, sy), cx), prod(cz, sx)),
      neg(sy),      prod(cy, sx),                              prod(cy, cx)};
  Tensor r = reshape(concat(entries, 0), {3, 3});
  Tensor rotated = matmul(points, transpose(r));
  return add(rotated, expand_rows(reshape(t, {3}), points.dim(0)));
}

// Relative rotation angle between two Euler triples, in degrees.
inline double rotation_error_deg(const Vec3& euler_a, const Vec3& euler_b) {
  const auto ra = rotation_matrix(euler_a);
  const auto rb = rotation_matrix(euler_b);
  // trace(Ra^T Rb)
  double tr = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      tr += ra[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] *
            rb[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  const double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) / kDegToRad;
}

// ---------------------------------------------------------------------------
// PCB1 binary format: magic "PCB1", u32 point count, f32 xyz triples, LE.
// ---------------------------------------------------------------------------

inline void write_pcb1(std::ostream& os, const PointCloud& c) {
  os.write("PCB1", 4);
  const std::uint32_t n = static_cast<std::uint32_t>(c.size());
  os.write(reinterpret_cast<const char*>(&n), 4);
  for (const auto& p : c.points)
    for (int d = 0; d < 3; ++d) {
      const float f = static_cast<float>(p[static_cast<std::size_t>(d)]);
      os.write(reinterpret_cast<const char*>(&f), 4);
    }
  if (!os) throw IoError("write_pcb1: stream failure");
}

inline PointCloud read_pcb1(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PCB1", 4) != 0)
    throw IoError("read_pcb1: bad magic (expected PCB1)");
  std::uint32_t n = 0;
  is.read(reinterpret_cast<char*>(&n), 4);
  PointCloud c;
  c.points.resize(n);
  for (auto& p : c.points)
    for (int d = 0; d < 3; ++d) {
      float f = 0.0f;
      is.read(reinterpret_cast<char*>(&f), 4);
      p[static_cast<std::size_t>(d)] = static_cast<double>(f);
    }
  if (!is) throw IoError("read_pcb1: truncated stream");
  return c;
}

inline void save_pcb1(const std::string& path, const PointCloud& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_pcb1: cannot open " + path);
  write_pcb1(os, c);
}

inline PointCloud load_pcb1(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_pcb1: cannot open " + path);
  return read_pcb1(is);
}

// Plain-text interop: one "x y z" per line, '#' comments skipped.
inline PointCloud read_xyz(std::istream& is) {
  PointCloud c;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Vec3 p;
    if (ls >> p[0] >> p[1] >> p[2]) c.points.push_back(p);
  }
  return c;
}

inline void write_xyz(std::ostream& os, const PointCloud& c) {
  os.precision(17);
  for (const auto& p : c.points) os << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
}

}  // namespace msamp
