#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "kinelift/sync.hpp"
#include "kinelift/track.hpp"
#include "kinelift/types.hpp"

// Uncalibrated two-view lifting: fundamental matrix by RANSAC over the
// normalized 8-point algorithm, pseudo-intrinsics, essential decomposition
// with a cheirality vote, DLT triangulation, and Adam-based bundle adjustment
// over the 3D joints and relative pose with the pseudo-intrinsics held fixed.

namespace kinelift::stereo {

struct Correspondence {
  Eigen::Vector2d u1 = Eigen::Vector2d::Zero();
  Eigen::Vector2d u2 = Eigen::Vector2d::Zero();
  double w1 = 1.0, w2 = 1.0;  // per-view joint confidences
  std::int64_t frame_a = 0, frame_b = 0;
  int joint = 0;
};

struct FundamentalMatrix {
  Eigen::Matrix3d f = Eigen::Matrix3d::Zero();  // pixel coords, ||F||_F = 1, rank 2
  std::vector<char> inliers;
  int inlier_count = 0;
  double tau = 0.0;
  // Hartley normalizers of the full correspondence set; the inlier test runs
  // in this normalized system.
  Eigen::Matrix3d t1 = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d t2 = Eigen::Matrix3d::Identity();

  Eigen::Matrix3d normalized() const {
    // f = t2^T fn t1  =>  fn = t2^-T f t1^-1
    return t2.transpose().inverse() * f * t1.inverse();
  }
};

struct RelativePose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::UnitX();  // unit norm
};

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

inline Eigen::Matrix3d camera_matrix(const CameraModel& cam) {
  Eigen::Matrix3d k = Eigen::Matrix3d::Identity();
  k(0, 0) = cam.fx;
  k(1, 1) = cam.fy;
  k(0, 2) = cam.cx;
  k(1, 2) = cam.cy;
  return k;
}

// Image-centered pinhole with focal length proportional to the image size.
inline CameraModel pseudo_intrinsics(int width, int height, double focal_scale = 1.0) {
  if (width <= 0 || height <= 0) throw input_error("pseudo_intrinsics: bad image size");
  CameraModel cam;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = focal_scale * std::max(width, height);
  cam.cx = width / 2.0;
  cam.cy = height / 2.0;
  return cam;
}

// First-order geometric (Sampson) distance of a point pair under F: the
// linear-unit quantity |x2^T F x1| / sqrt(g1^2+g2^2+g3^2+g4^2).
inline double sampson_distance(const Eigen::Matrix3d& f, const Eigen::Vector2d& p1,
                               const Eigen::Vector2d& p2) {
  const Eigen::Vector3d x1(p1.x(), p1.y(), 1.0);
  const Eigen::Vector3d x2(p2.x(), p2.y(), 1.0);
  const Eigen::Vector3d fx1 = f * x1;
  const Eigen::Vector3d ftx2 = f.transpose() * x2;
  const double e = x2.dot(fx1);
  const double denom =
      fx1.x() * fx1.x() + fx1.y() * fx1.y() + ftx2.x() * ftx2.x() + ftx2.y() * ftx2.y();
  if (denom <= 0.0) return std::numeric_limits<double>::infinity();
  return std::abs(e) / std::sqrt(denom);
}

namespace detail {

// Hartley normalization: translate to the centroid, scale the mean distance
// to sqrt(2).
inline Eigen::Matrix3d hartley_transform(const std::vector<Eigen::Vector2d>& pts) {
  Eigen::Vector2d centroid = Eigen::Vector2d::Zero();
  for (const auto& p : pts) centroid += p;
  centroid /= static_cast<double>(pts.size());
  double mean_dist = 0.0;
  for (const auto& p : pts) mean_dist += (p - centroid).norm();
  mean_dist /= static_cast<double>(pts.size());
  const double s = mean_dist > 0.0 ? std::sqrt(2.0) / mean_dist : 1.0;
  Eigen::Matrix3d t;
  t << s, 0, -s * centroid.x(), 0, s, -s * centroid.y(), 0, 0, 1;
  return t;
}

inline Eigen::Vector2d apply_h(const Eigen::Matrix3d& t, const Eigen::Vector2d& p) {
  const Eigen::Vector3d q = t * Eigen::Vector3d(p.x(), p.y(), 1.0);
  return q.head<2>() / q.z();
}

// Linear 8-point solve (on >= 8 points) with rank-2 enforcement. Returns
// nullopt when the design matrix is rank-deficient (no unique solution).
inline std::optional<Eigen::Matrix3d> eight_point(const std::vector<Eigen::Vector2d>& p1,
                                                  const std::vector<Eigen::Vector2d>& p2,
                                                  const std::vector<int>& idx) {
  Eigen::MatrixXd a(static_cast<Eigen::Index>(idx.size()), 9);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& x1 = p1[static_cast<std::size_t>(idx[r])];
    const auto& x2 = p2[static_cast<std::size_t>(idx[r])];
    a.row(static_cast<Eigen::Index>(r)) << x2.x() * x1.x(), x2.x() * x1.y(), x2.x(),
        x2.y() * x1.x(), x2.y() * x1.y(), x2.y(), x1.x(), x1.y(), 1.0;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(0) <= 0.0 || sv(7) / sv(0) < 1e-12) return std::nullopt;
  const Eigen::VectorXd fvec = svd.matrixV().col(8);
  Eigen::Matrix3d f;
  f << fvec(0), fvec(1), fvec(2), fvec(3), fvec(4), fvec(5), fvec(6), fvec(7), fvec(8);
  // Rank-2 enforcement: zero the smallest singular value.
  Eigen::JacobiSVD<Eigen::Matrix3d> fsvd(f, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d s = fsvd.singularValues();
  s(2) = 0.0;
  return Eigen::Matrix3d(fsvd.matrixU() * s.asDiagonal() * fsvd.matrixV().transpose());
}

// Deterministic sign/scale convention: Frobenius norm 1 with the
// largest-magnitude entry positive.
inline Eigen::Matrix3d canonicalize(Eigen::Matrix3d f) {
  f /= f.norm();
  Eigen::Index r = 0, c = 0;
  f.cwiseAbs().maxCoeff(&r, &c);
  if (f(r, c) < 0.0) f = -f;
  return f;
}

}  // namespace detail

// RANSAC over 8-point minimal samples in the Hartley-normalized system;
// consensus refit with its own normalization, rank-2 enforcement, and
// denormalization back to pixels.
inline FundamentalMatrix estimate_fundamental(const std::vector<Correspondence>& corrs,
                                              double tau = 0.005, int iterations = 2000,
                                              std::uint64_t seed = 7) {
  const int n = static_cast<int>(corrs.size());
  if (n < 8) throw insufficient_data_error("estimate_fundamental: need at least 8 correspondences");

  std::vector<Eigen::Vector2d> raw1, raw2;
  raw1.reserve(corrs.size());
  raw2.reserve(corrs.size());
  for (const auto& c : corrs) {
    raw1.push_back(c.u1);
    raw2.push_back(c.u2);
  }
  FundamentalMatrix out;
  out.tau = tau;
  out.t1 = detail::hartley_transform(raw1);
  out.t2 = detail::hartley_transform(raw2);
  std::vector<Eigen::Vector2d> p1(corrs.size()), p2(corrs.size());
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    p1[i] = detail::apply_h(out.t1, raw1[i]);
    p2[i] = detail::apply_h(out.t2, raw2[i]);
  }

  std::mt19937_64 rng(seed);
  auto count_inliers = [&](const Eigen::Matrix3d& fn, std::vector<char>* mask) {
    int count = 0;
    for (std::size_t i = 0; i < corrs.size(); ++i) {
      const bool in = sampson_distance(fn, p1[i], p2[i]) < tau;
      if (mask) (*mask)[i] = in ? 1 : 0;
      count += in ? 1 : 0;
    }
    return count;
  };

  int best_count = 0;
  Eigen::Matrix3d best_fn = Eigen::Matrix3d::Zero();
  std::vector<int> sample(8);
  for (int it = 0; it < iterations; ++it) {
    for (int k = 0; k < 8; ++k) {
      bool fresh = false;
      while (!fresh) {
        sample[static_cast<std::size_t>(k)] = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
        fresh = true;
        for (int j = 0; j < k; ++j)
          if (sample[static_cast<std::size_t>(j)] == sample[static_cast<std::size_t>(k)]) fresh = false;
      }
    }
    const auto fn = detail::eight_point(p1, p2, sample);
    if (!fn) continue;
    const int count = count_inliers(*fn, nullptr);
    if (count > best_count) {
      best_count = count;
      best_fn = *fn;
    }
  }
  if (best_count < 8)
    throw degenerate_geometry_error("estimate_fundamental: no model with 8 inliers");

  // Refit on the consensus set with a second-level Hartley normalization.
  std::vector<char> mask(corrs.size(), 0);
  count_inliers(best_fn, &mask);
  for (int round = 0; round < 2; ++round) {
    std::vector<Eigen::Vector2d> in1, in2;
    std::vector<int> idx;
    for (std::size_t i = 0; i < corrs.size(); ++i) {
      if (!mask[i]) continue;
      in1.push_back(p1[i]);
      in2.push_back(p2[i]);
      idx.push_back(static_cast<int>(idx.size()));
    }
    if (static_cast<int>(idx.size()) < 8) break;
    const Eigen::Matrix3d s1 = detail::hartley_transform(in1);
    const Eigen::Matrix3d s2 = detail::hartley_transform(in2);
    for (auto& p : in1) p = detail::apply_h(s1, p);
    for (auto& p : in2) p = detail::apply_h(s2, p);
    const auto fn_inner = detail::eight_point(in1, in2, idx);
    if (!fn_inner) {
      if (round == 0) throw degenerate_geometry_error("estimate_fundamental: degenerate consensus set");
      break;
    }
    best_fn = s2.transpose() * (*fn_inner) * s1;
    count_inliers(best_fn, &mask);
  }

  out.inlier_count = count_inliers(best_fn, &mask);
  if (out.inlier_count < 8)
    throw degenerate_geometry_error("estimate_fundamental: consensus collapsed below 8 inliers");
  out.inliers = std::move(mask);
  // Denormalize to pixel coordinates: x2^T Fn x1 = (T2 u2)^T Fn (T1 u1).
  out.f = detail::canonicalize(out.t2.transpose() * best_fn * out.t1);
  return out;
}

// E0 = K2^T F K1, projected to the essential manifold (two equal singular
// values, third zero) and scaled so the nonzero singular values are 1.
inline Eigen::Matrix3d essential_from_fundamental(const Eigen::Matrix3d& f,
                                                  const CameraModel& cam1,
                                                  const CameraModel& cam2) {
  const Eigen::Matrix3d e0 = camera_matrix(cam2).transpose() * f * camera_matrix(cam1);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(e0, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double sigma = 0.5 * (svd.singularValues()(0) + svd.singularValues()(1));
  if (sigma <= 0.0) throw degenerate_geometry_error("essential_from_fundamental: zero essential");
  const Eigen::Vector3d s(1.0, 1.0, 0.0);
  return svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
}

// Homogeneous DLT triangulation. Invalid when the system is rank-deficient
// (points on the baseline) or the depth is not positive in both cameras.
inline Joint3D triangulate(const Eigen::Vector2d& u1, const Eigen::Vector2d& u2,
                           const CameraModel& cam1, const CameraModel& cam2,
                           const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation) {
  Eigen::Matrix<double, 3, 4> proj1 = Eigen::Matrix<double, 3, 4>::Zero();
  proj1.leftCols<3>() = Eigen::Matrix3d::Identity();
  proj1 = camera_matrix(cam1) * proj1;
  Eigen::Matrix<double, 3, 4> proj2;
  proj2.leftCols<3>() = rotation;
  proj2.col(3) = translation;
  proj2 = camera_matrix(cam2) * proj2;

  Eigen::Matrix4d a;
  a.row(0) = u1.x() * proj1.row(2) - proj1.row(0);
  a.row(1) = u1.y() * proj1.row(2) - proj1.row(1);
  a.row(2) = u2.x() * proj2.row(2) - proj2.row(0);
  a.row(3) = u2.y() * proj2.row(2) - proj2.row(1);
  for (int r = 0; r < 4; ++r) {
    const double norm = a.row(r).norm();
    if (norm > 0.0) a.row(r) /= norm;
  }

  Joint3D out;
  Eigen::JacobiSVD<Eigen::Matrix4d> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(0) <= 0.0 || sv(2) / sv(0) < 1e-9) return out;  // rank < 3: solution family
  const Eigen::Vector4d xh = svd.matrixV().col(3);
  if (std::abs(xh(3)) < 1e-15 * xh.head<3>().norm()) return out;  // point at infinity
  const Eigen::Vector3d x = xh.head<3>() / xh(3);
  const double z1 = x.z();
  const double z2 = (rotation * x + translation).z();
  if (z1 <= 0.0 || z2 <= 0.0) return out;
  out.x = x.x();
  out.y = x.y();
  out.z = x.z();
  out.valid = true;
  return out;
}

// Four-fold decomposition of E with a positive-depth (cheirality) vote over
// the correspondences; the winner must take more than half the votes.
inline RelativePose recover_pose(const Eigen::Matrix3d& essential,
                                 const std::vector<Correspondence>& corrs,
                                 const CameraModel& cam1, const CameraModel& cam2) {
  if (corrs.empty()) throw insufficient_data_error("recover_pose: no correspondences");
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(essential, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  Eigen::Matrix3d v = svd.matrixV();
  if (u.determinant() < 0.0) u = -u;
  if (v.determinant() < 0.0) v = -v;
  Eigen::Matrix3d w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Eigen::Matrix3d r1 = u * w * v.transpose();
  const Eigen::Matrix3d r2 = u * w.transpose() * v.transpose();
  const Eigen::Vector3d t = u.col(2);

  const std::array<RelativePose, 4> candidates = {
      RelativePose{r1, t}, RelativePose{r1, -t}, RelativePose{r2, t}, RelativePose{r2, -t}};

  // Strided subset keeps the vote cheap on large sets, deterministically.
  const std::size_t stride = std::max<std::size_t>(1, corrs.size() / 500);
  CameraModel unit1, unit2;
  unit1.fx = unit1.fy = unit2.fx = unit2.fy = 1.0;
  unit1.width = unit1.height = unit2.width = unit2.height = 1;
  const Eigen::Matrix3d k1i = camera_matrix(cam1).inverse();
  const Eigen::Matrix3d k2i = camera_matrix(cam2).inverse();

  int best = -1, best_votes = -1, total = 0;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    int votes = 0;
    int seen = 0;
    for (std::size_t i = 0; i < corrs.size(); i += stride) {
      ++seen;
      const Eigen::Vector2d x1 =
          (k1i * Eigen::Vector3d(corrs[i].u1.x(), corrs[i].u1.y(), 1.0)).hnormalized();
      const Eigen::Vector2d x2 =
          (k2i * Eigen::Vector3d(corrs[i].u2.x(), corrs[i].u2.y(), 1.0)).hnormalized();
      const Joint3D p = triangulate(x1, x2, unit1, unit2, candidates[c].rotation,
                                    candidates[c].translation);
      if (p.valid) ++votes;
    }
    total = seen;
    if (votes > best_votes) {
      best_votes = votes;
      best = static_cast<int>(c);
    }
  }
  if (best < 0 || best_votes * 2 <= total)
    throw cheirality_error("recover_pose: no candidate places a majority of points in front");

  RelativePose pose = candidates[static_cast<std::size_t>(best)];
  // Re-project onto SO(3) so downstream orthonormality holds to 1e-9.
  Eigen::JacobiSVD<Eigen::Matrix3d> rsvd(pose.rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
  pose.rotation = rsvd.matrixU() * rsvd.matrixV().transpose();
  if (pose.rotation.determinant() < 0.0)
    pose.rotation = rsvd.matrixU() * Eigen::Vector3d(1, 1, -1).asDiagonal() * rsvd.matrixV().transpose();
  pose.translation.normalize();
  return pose;
}

// --------------------------------------------------------------------------
// Bundle adjustment.

struct BundleOptions {
  double lambda_rep = 1.0;
  double lambda_epi = 0.1;
  double step = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int iterations = 500;
  double huber_px = 10.0;
};

// One optimizable 3D point with its pair of pixel observations.
struct BundlePoint {
  Eigen::Vector3d x = Eigen::Vector3d::Zero();
  Eigen::Vector2d u1 = Eigen::Vector2d::Zero();
  Eigen::Vector2d u2 = Eigen::Vector2d::Zero();
  double w1 = 1.0, w2 = 1.0;
  bool active = true;  // inactive points are carried through untouched
};

struct BundleResult {
  std::vector<Eigen::Vector3d> points;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  std::vector<double> loss_trace;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int best_iteration = 0;  // 0 = initial parameters
};

namespace detail {

inline Eigen::Matrix3d exp_so3(const Eigen::Vector3d& w) {
  const double theta = w.norm();
  const Eigen::Matrix3d wx = skew(w);
  if (theta < 1e-12) return Eigen::Matrix3d::Identity() + wx;
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Eigen::Matrix3d::Identity() + a * wx + b * (wx * wx);
}

inline Eigen::Matrix3d reorthonormalize(const Eigen::Matrix3d& r) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d out = svd.matrixU() * svd.matrixV().transpose();
  if (out.determinant() < 0.0)
    out = svd.matrixU() * Eigen::Vector3d(1, 1, -1).asDiagonal() * svd.matrixV().transpose();
  return out;
}

struct HuberGrad {
  double value;
  Eigen::Vector2d grad;  // d value / d residual vector
};

inline HuberGrad huber(const Eigen::Vector2d& r, double delta) {
  const double n = r.norm();
  if (n <= delta) return {n * n, 2.0 * r};
  return {2.0 * delta * n - delta * delta, n > 0.0 ? Eigen::Vector2d(2.0 * delta / n * r) : Eigen::Vector2d::Zero()};
}

// Squared Sampson error and its gradients w.r.t. both image points.
struct SampsonGrad {
  double value = 0.0;
  Eigen::Vector2d d_p1 = Eigen::Vector2d::Zero();
  Eigen::Vector2d d_p2 = Eigen::Vector2d::Zero();
};

inline SampsonGrad sampson_sq(const Eigen::Matrix3d& f, const Eigen::Vector2d& p1,
                              const Eigen::Vector2d& p2) {
  const Eigen::Vector3d x1(p1.x(), p1.y(), 1.0);
  const Eigen::Vector3d x2(p2.x(), p2.y(), 1.0);
  const Eigen::Vector3d fx1 = f * x1;
  const Eigen::Vector3d ftx2 = f.transpose() * x2;
  const double e = x2.dot(fx1);
  const double g1 = fx1.x(), g2 = fx1.y(), g3 = ftx2.x(), g4 = ftx2.y();
  const double d = g1 * g1 + g2 * g2 + g3 * g3 + g4 * g4;
  SampsonGrad out;
  if (d <= 0.0) return out;
  out.value = e * e / d;

  // de/dp1 = (g3, g4); de/dp2 = (g1, g2).
  // dg1/dp1 = (F00, F01), dg2/dp1 = (F10, F11); g3, g4 do not depend on p1.
  const Eigen::Vector2d de_p1(g3, g4);
  const Eigen::Vector2d de_p2(g1, g2);
  const Eigen::Vector2d dd_p1 =
      2.0 * g1 * Eigen::Vector2d(f(0, 0), f(0, 1)) + 2.0 * g2 * Eigen::Vector2d(f(1, 0), f(1, 1));
  const Eigen::Vector2d dd_p2 =
      2.0 * g3 * Eigen::Vector2d(f(0, 0), f(1, 0)) + 2.0 * g4 * Eigen::Vector2d(f(0, 1), f(1, 1));
  out.d_p1 = (2.0 * e * de_p1 * d - e * e * dd_p1) / (d * d);
  out.d_p2 = (2.0 * e * de_p2 * d - e * e * dd_p2) / (d * d);
  return out;
}

}  // namespace detail

// Joint refinement problem over 3D points and the relative pose; the camera
// matrices and the data-driven fundamental matrix stay fixed. Rotation moves
// through a local 3-vector increment composed onto R, so the loss/gradient
// pair below is an explicit function of (points, omega, t) around the current
// rotation — which is what the finite-difference check in the tests probes.
class BundleProblem {
 public:
  BundleProblem(std::vector<BundlePoint> points, Eigen::Matrix3d rotation,
                Eigen::Vector3d translation, const CameraModel& cam1, const CameraModel& cam2,
                const Eigen::Matrix3d& fundamental, BundleOptions options = {})
      : points_(std::move(points)),
        rotation_(std::move(rotation)),
        translation_(std::move(translation)),
        cam1_(cam1),
        cam2_(cam2),
        fundamental_(fundamental),
        options_(options) {
    for (const auto& p : points_)
      if (p.active) ++active_count_;
  }

  int parameter_count() const { return 3 * active_count_ + 6; }

  // Parameter layout: [x y z per active point..., omega(3), t(3)] with omega
  // a rotation increment relative to the problem's current R.
  Eigen::VectorXd pack() const {
    Eigen::VectorXd p(parameter_count());
    int k = 0;
    for (const auto& pt : points_) {
      if (!pt.active) continue;
      p.segment<3>(3 * k) = pt.x;
      ++k;
    }
    p.segment<3>(3 * k) = Eigen::Vector3d::Zero();
    p.segment<3>(3 * k + 3) = translation_;
    return p;
  }

  double loss(const Eigen::VectorXd& params) const { return evaluate(params, nullptr); }

  Eigen::VectorXd gradient(const Eigen::VectorXd& params) const {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(params.size());
    evaluate(params, &g);
    return g;
  }

  BundleResult solve() {
    Eigen::VectorXd params = pack();
    const int n = parameter_count();
    Eigen::VectorXd m = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
    const int omega_at = 3 * active_count_;

    BundleResult result;
    double loss_now = loss(params);
    if (!std::isfinite(loss_now)) throw divergence_error("bundle_adjust: non-finite initial loss", 0);
    result.initial_loss = loss_now;
    result.loss_trace.push_back(loss_now);

    double best_loss = loss_now;
    std::vector<Eigen::Vector3d> best_points = snapshot_points();
    Eigen::Matrix3d best_rotation = rotation_;
    Eigen::Vector3d best_translation = translation_;
    int best_iteration = 0;

    for (int it = 1; it <= options_.iterations; ++it) {
      const Eigen::VectorXd g = gradient(params);
      m = options_.beta1 * m + (1.0 - options_.beta1) * g;
      v = options_.beta2 * v + (1.0 - options_.beta2) * g.cwiseProduct(g);
      const double mc = 1.0 - std::pow(options_.beta1, it);
      const double vc = 1.0 - std::pow(options_.beta2, it);
      for (int i = 0; i < n; ++i) {
        const double step = options_.step * (m(i) / mc) / (std::sqrt(v(i) / vc) + options_.epsilon);
        params(i) -= step;
      }

      // Compose the rotation increment onto R and reset the chart.
      const Eigen::Vector3d omega = params.segment<3>(omega_at);
      rotation_ = detail::reorthonormalize(rotation_ * detail::exp_so3(omega));
      params.segment<3>(omega_at).setZero();
      unpack_points(params);
      translation_ = params.segment<3>(omega_at + 3);

      loss_now = loss(params);
      if (!std::isfinite(loss_now))
        throw divergence_error("bundle_adjust: non-finite loss at iteration " + std::to_string(it), it);
      result.loss_trace.push_back(loss_now);
      if (loss_now < best_loss) {
        best_loss = loss_now;
        best_points = snapshot_points();
        best_rotation = rotation_;
        best_translation = translation_;
        best_iteration = it;
      }
    }

    // Best-iterate checkpoint guarantees final <= initial.
    result.points = std::move(best_points);
    result.rotation = best_rotation;
    result.translation = best_translation;
    result.final_loss = best_loss;
    result.best_iteration = best_iteration;
    return result;
  }

  const Eigen::Matrix3d& rotation() const { return rotation_; }
  const std::vector<BundlePoint>& points() const { return points_; }

 private:
  std::vector<Eigen::Vector3d> snapshot_points() const {
    std::vector<Eigen::Vector3d> out;
    out.reserve(points_.size());
    for (const auto& p : points_) out.push_back(p.x);
    return out;
  }

  void unpack_points(const Eigen::VectorXd& params) {
    int k = 0;
    for (auto& pt : points_) {
      if (!pt.active) continue;
      pt.x = params.segment<3>(3 * k);
      ++k;
    }
  }

  // Shared loss/gradient evaluation. `grad`, when given, must be zeroed and
  // sized to parameter_count().
  double evaluate(const Eigen::VectorXd& params, Eigen::VectorXd* grad) const {
    const int omega_at = 3 * active_count_;
    const Eigen::Vector3d omega = params.segment<3>(omega_at);
    const Eigen::Vector3d t = params.segment<3>(omega_at + 3);
    const Eigen::Matrix3d r = rotation_ * detail::exp_so3(omega);

    double total = 0.0;
    int k = 0;
    for (const auto& pt : points_) {
      if (!pt.active) continue;
      const Eigen::Vector3d x = params.segment<3>(3 * k);

      // View 1: camera frame is the world frame.
      const double z1 = x.z();
      const Eigen::Vector2d p1(cam1_.fx * x.x() / z1 + cam1_.cx, cam1_.fy * x.y() / z1 + cam1_.cy);
      Eigen::Matrix<double, 2, 3> j1;
      j1 << cam1_.fx / z1, 0.0, -cam1_.fx * x.x() / (z1 * z1), 0.0, cam1_.fy / z1,
          -cam1_.fy * x.y() / (z1 * z1);

      // View 2.
      const Eigen::Vector3d y = r * x + t;
      const double z2 = y.z();
      const Eigen::Vector2d p2(cam2_.fx * y.x() / z2 + cam2_.cx, cam2_.fy * y.y() / z2 + cam2_.cy);
      Eigen::Matrix<double, 2, 3> j2;
      j2 << cam2_.fx / z2, 0.0, -cam2_.fx * y.x() / (z2 * z2), 0.0, cam2_.fy / z2,
          -cam2_.fy * y.y() / (z2 * z2);

      const auto h1 = detail::huber(p1 - pt.u1, options_.huber_px);
      const auto h2 = detail::huber(p2 - pt.u2, options_.huber_px);
      const auto ep = detail::sampson_sq(fundamental_, p1, p2);
      total += options_.lambda_rep * (pt.w1 * h1.value + pt.w2 * h2.value) +
               options_.lambda_epi * ep.value;

      if (grad) {
        const Eigen::Vector2d d_p1 =
            options_.lambda_rep * pt.w1 * h1.grad + options_.lambda_epi * ep.d_p1;
        const Eigen::Vector2d d_p2 =
            options_.lambda_rep * pt.w2 * h2.grad + options_.lambda_epi * ep.d_p2;
        const Eigen::Vector3d g_y = j2.transpose() * d_p2;
        grad->segment<3>(3 * k) += j1.transpose() * d_p1 + r.transpose() * g_y;
        // d y / d omega at omega: for the left-composed increment the chart
        // gradient is evaluated at the unpacked omega (tests probe omega=0).
        grad->segment<3>(omega_at) += skew(x) * (r.transpose() * g_y);
        grad->segment<3>(omega_at + 3) += g_y;
      }
      ++k;
    }
    return total;
  }

  std::vector<BundlePoint> points_;
  Eigen::Matrix3d rotation_;
  Eigen::Vector3d translation_;
  CameraModel cam1_, cam2_;
  Eigen::Matrix3d fundamental_;
  BundleOptions options_;
  int active_count_ = 0;
};

// --------------------------------------------------------------------------
// Full sequence lift: correspondences -> F -> E -> (R,t) -> triangulation ->
// bundle adjustment -> per-frame 3D skeletons.

struct LiftConfig {
  double conf_threshold = 0.98;
  double tau_f = 0.005;
  int ransac_iterations = 2000;
  std::uint64_t seed = 7;
  double focal_scale = 1.0;
  int image_width = 1920;
  int image_height = 1080;
  BundleOptions bundle;
  // Post-bundle quality gate: a joint whose worst-view reprojection residual
  // exceeds max(quality_gate_min_px, quality_gate_scale * median residual) is
  // flagged invalid. Identity glitches leave residuals orders of magnitude
  // above the median; the relative form tolerates the systematic misfit a
  // wrong focal guess produces.
  double quality_gate_min_px = 10.0;
  double quality_gate_scale = 5.0;
};

struct FrameSkeleton {
  std::int64_t frame_a = 0;
  std::int64_t frame_b = 0;
  std::int64_t timestamp_ms = 0;
  std::vector<Joint3D> joints;
};

struct LiftResult {
  FundamentalMatrix fundamental;
  CameraModel cam1, cam2;
  Eigen::Matrix3d essential = Eigen::Matrix3d::Zero();
  RelativePose pose;  // refined; translation renormalized to unit length
  std::vector<FrameSkeleton> skeletons;
  std::vector<double> loss_trace;
  int correspondence_count = 0;
};

// High-confidence joint correspondences aggregated across the synchronized,
// identity-tracked frames. Frames missing in either view contribute nothing.
inline std::vector<Correspondence> collect_correspondences(
    const PoseTensor& poses_a, const PoseTensor& poses_b, const track::TrackResult& track_a,
    const track::TrackResult& track_b, const sync::Pairing& pairing, double conf_threshold) {
  std::vector<Correspondence> out;
  for (const auto& pair : pairing.pairs) {
    if (!pair.matched) continue;
    if (pair.frame_a >= poses_a.frame_count() || pair.frame_b >= poses_b.frame_count()) continue;
    const int na = track_a.index[static_cast<std::size_t>(pair.frame_a)];
    const int nb = track_b.index[static_cast<std::size_t>(pair.frame_b)];
    if (na < 0 || nb < 0) continue;
    const auto& pa = poses_a.frame(static_cast<std::size_t>(pair.frame_a)).persons[static_cast<std::size_t>(na)];
    const auto& pb = poses_b.frame(static_cast<std::size_t>(pair.frame_b)).persons[static_cast<std::size_t>(nb)];
    for (int j = 0; j < poses_a.joint_count(); ++j) {
      const auto& ka = pa.joints[static_cast<std::size_t>(j)];
      const auto& kb = pb.joints[static_cast<std::size_t>(j)];
      if (ka.confidence < conf_threshold || kb.confidence < conf_threshold) continue;
      Correspondence c;
      c.u1 = {ka.x, ka.y};
      c.u2 = {kb.x, kb.y};
      c.w1 = ka.confidence;
      c.w2 = kb.confidence;
      c.frame_a = pair.frame_a;
      c.frame_b = pair.frame_b;
      c.joint = j;
      out.push_back(c);
    }
  }
  if (out.size() < 8)
    throw insufficient_data_error("collect_correspondences: fewer than 8 correspondences");
  return out;
}

inline LiftResult lift_sequence(const PoseTensor& poses_a, const PoseTensor& poses_b,
                                const track::TrackResult& track_a,
                                const track::TrackResult& track_b, const sync::Pairing& pairing,
                                const std::vector<FrameClock>& clocks_a,
                                const std::vector<FrameClock>& clocks_b,
                                const LiftConfig& config = {}) {
  LiftResult result;
  auto corrs = collect_correspondences(poses_a, poses_b, track_a, track_b, pairing,
                                       config.conf_threshold);
  result.correspondence_count = static_cast<int>(corrs.size());

  result.fundamental =
      estimate_fundamental(corrs, config.tau_f, config.ransac_iterations, config.seed);
  result.cam1 = pseudo_intrinsics(config.image_width, config.image_height, config.focal_scale);
  result.cam2 = result.cam1;
  result.essential = essential_from_fundamental(result.fundamental.f, result.cam1, result.cam2);

  std::vector<Correspondence> inlier_corrs;
  for (std::size_t i = 0; i < corrs.size(); ++i)
    if (result.fundamental.inliers[i]) inlier_corrs.push_back(corrs[i]);
  RelativePose pose0 = recover_pose(result.essential, inlier_corrs, result.cam1, result.cam2);

  // Triangulate every correspondence; the bundle optimizes the valid ones
  // (Huber + confidence weights absorb the outliers RANSAC never saw).
  std::vector<BundlePoint> points;
  std::vector<std::size_t> corr_of_point;
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    const Joint3D p = triangulate(corrs[i].u1, corrs[i].u2, result.cam1, result.cam2,
                                  pose0.rotation, pose0.translation);
    if (!p.valid) continue;
    BundlePoint bp;
    bp.x = {p.x, p.y, p.z};
    bp.u1 = corrs[i].u1;
    bp.u2 = corrs[i].u2;
    bp.w1 = corrs[i].w1;
    bp.w2 = corrs[i].w2;
    points.push_back(bp);
    corr_of_point.push_back(i);
  }
  if (points.size() < 8)
    throw degenerate_geometry_error("lift_sequence: triangulation produced too few valid points");

  BundleProblem problem(points, pose0.rotation, pose0.translation, result.cam1, result.cam2,
                        result.fundamental.f, config.bundle);
  BundleResult refined = problem.solve();
  result.loss_trace = refined.loss_trace;

  // Reconstruction is scale-ambiguous; renormalize so ||t|| = 1.
  const double scale = refined.translation.norm();
  if (scale <= 0.0) throw degenerate_geometry_error("lift_sequence: refined translation collapsed");
  result.pose.rotation = refined.rotation;
  result.pose.translation = refined.translation / scale;

  // Assemble per-pair skeletons on the common timeline.
  std::map<std::pair<std::int64_t, std::int64_t>, std::size_t> pair_slot;
  for (const auto& pair : pairing.pairs) {
    if (!pair.matched) continue;
    FrameSkeleton sk;
    sk.frame_a = pair.frame_a;
    sk.frame_b = pair.frame_b;
    const auto ta = clocks_a.at(static_cast<std::size_t>(pair.frame_a)).timestamp_ms;
    const auto tb = clocks_b.at(static_cast<std::size_t>(pair.frame_b)).timestamp_ms;
    if (ta && tb)
      sk.timestamp_ms = round_half_even(0.5 * (static_cast<double>(*ta) + static_cast<double>(*tb)));
    else if (ta)
      sk.timestamp_ms = *ta;
    else if (tb)
      sk.timestamp_ms = *tb;
    sk.joints.assign(static_cast<std::size_t>(poses_a.joint_count()), Joint3D{});
    pair_slot[{pair.frame_a, pair.frame_b}] = result.skeletons.size();
    result.skeletons.push_back(std::move(sk));
  }
  // Worst-view reprojection residual per refined point, for the quality gate.
  const Eigen::Matrix3d k1 = camera_matrix(result.cam1);
  const Eigen::Matrix3d k2 = camera_matrix(result.cam2);
  std::vector<double> residual(refined.points.size());
  for (std::size_t k = 0; k < refined.points.size(); ++k) {
    const auto& c = corrs[corr_of_point[k]];
    const Eigen::Vector3d x = refined.points[k];
    const Eigen::Vector3d y = refined.rotation * x + refined.translation;
    const Eigen::Vector2d r1 = (k1 * x).hnormalized() - c.u1;
    const Eigen::Vector2d r2 = (k2 * y).hnormalized() - c.u2;
    residual[k] = std::max(r1.norm(), r2.norm());
  }
  std::vector<double> sorted = residual;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted.empty() ? 0.0 : sorted[sorted.size() / 2];
  const double gate = std::max(config.quality_gate_min_px, config.quality_gate_scale * median);

  for (std::size_t k = 0; k < refined.points.size(); ++k) {
    if (residual[k] > gate) continue;
    const auto& c = corrs[corr_of_point[k]];
    const auto it = pair_slot.find({c.frame_a, c.frame_b});
    if (it == pair_slot.end()) continue;
    Joint3D& j = result.skeletons[it->second].joints[static_cast<std::size_t>(c.joint)];
    j.x = refined.points[k].x() / scale;
    j.y = refined.points[k].y() / scale;
    j.z = refined.points[k].z() / scale;
    j.valid = true;
  }
  return result;
}

}  // namespace kinelift::stereo
