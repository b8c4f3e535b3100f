#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "kinelift/types.hpp"

// Joint angles from 3D skeletons plus the comparison metrics used against a
// reference series (MAE, Pearson correlation, range).

namespace kinelift::kin {

// Three joint indices defining a scalar angle at `vertex`.
struct JointTriple {
  std::string name;
  int proximal = 0;
  int vertex = 0;
  int distal = 0;
};

struct MetricReport {
  std::string triple_name;
  double mae_deg = 0.0;
  double pearson_r = 0.0;
  double range_est_min = 0.0, range_est_max = 0.0;
  double range_ref_min = 0.0, range_ref_max = 0.0;
  std::int64_t n_compared = 0;
};

// A timestamped scalar series; samples are strictly increasing in time.
struct Series {
  std::vector<std::int64_t> t_ms;
  std::vector<double> value;

  std::size_t size() const { return t_ms.size(); }
};

// Angle at triple.vertex between the proximal and distal limb vectors, in
// degrees. The arccos argument is clamped so collinear noise never produces a
// domain error. Absent when any joint is invalid or a limb vector has zero
// length.
inline std::optional<double> joint_angle(const std::vector<Joint3D>& skeleton,
                                         const JointTriple& triple) {
  const auto idx_ok = [&](int i) {
    return i >= 0 && i < static_cast<int>(skeleton.size()) && skeleton[static_cast<std::size_t>(i)].valid;
  };
  if (!idx_ok(triple.proximal) || !idx_ok(triple.vertex) || !idx_ok(triple.distal))
    return std::nullopt;
  const Joint3D& a = skeleton[static_cast<std::size_t>(triple.proximal)];
  const Joint3D& b = skeleton[static_cast<std::size_t>(triple.vertex)];
  const Joint3D& c = skeleton[static_cast<std::size_t>(triple.distal)];
  const double ux = a.x - b.x, uy = a.y - b.y, uz = a.z - b.z;
  const double vx = c.x - b.x, vy = c.y - b.y, vz = c.z - b.z;
  const double nu = std::sqrt(ux * ux + uy * uy + uz * uz);
  const double nv = std::sqrt(vx * vx + vy * vy + vz * vz);
  if (nu == 0.0 || nv == 0.0) return std::nullopt;
  double cosang = (ux * vx + uy * vy + uz * vz) / (nu * nv);
  cosang = std::clamp(cosang, -1.0, 1.0);
  return std::acos(cosang) * 180.0 / std::numbers::pi;
}

// Linear resampling onto target timestamps. Targets outside the series span
// or inside gaps longer than max_gap_ms come back absent; exact hits return
// the sample value regardless of gap length.
inline std::vector<std::optional<double>> resample(const Series& series,
                                                   const std::vector<std::int64_t>& targets,
                                                   std::int64_t max_gap_ms) {
  std::vector<std::optional<double>> out(targets.size());
  if (series.size() == 0) return out;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const std::int64_t t = targets[k];
    auto it = std::lower_bound(series.t_ms.begin(), series.t_ms.end(), t);
    if (it != series.t_ms.end() && *it == t) {
      out[k] = series.value[static_cast<std::size_t>(it - series.t_ms.begin())];
      continue;
    }
    if (it == series.t_ms.begin() || it == series.t_ms.end()) continue;  // outside span
    const std::size_t hi = static_cast<std::size_t>(it - series.t_ms.begin());
    const std::size_t lo = hi - 1;
    const std::int64_t gap = series.t_ms[hi] - series.t_ms[lo];
    if (gap > max_gap_ms) continue;
    const double w = static_cast<double>(t - series.t_ms[lo]) / static_cast<double>(gap);
    out[k] = series.value[lo] * (1.0 - w) + series.value[hi] * w;
  }
  return out;
}

// Mean absolute error over co-valid samples of two aligned series.
inline double mae(const std::vector<std::optional<double>>& est,
                  const std::vector<std::optional<double>>& ref) {
  double sum = 0.0;
  std::int64_t n = 0;
  const std::size_t len = std::min(est.size(), ref.size());
  for (std::size_t i = 0; i < len; ++i) {
    if (!est[i] || !ref[i]) continue;
    sum += std::abs(*est[i] - *ref[i]);
    ++n;
  }
  if (n == 0) throw insufficient_data_error("mae: no co-valid samples");
  return sum / static_cast<double>(n);
}

// Pearson correlation coefficient over co-valid samples. Needs at least two
// samples and non-constant inputs.
inline double pearson(const std::vector<std::optional<double>>& est,
                      const std::vector<std::optional<double>>& ref) {
  std::vector<double> xs, ys;
  const std::size_t len = std::min(est.size(), ref.size());
  for (std::size_t i = 0; i < len; ++i) {
    if (!est[i] || !ref[i]) continue;
    xs.push_back(*est[i]);
    ys.push_back(*ref[i]);
  }
  if (xs.size() < 2) throw insufficient_data_error("pearson: fewer than 2 co-valid samples");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0)
    throw insufficient_data_error("pearson: undefined correlation for constant series");
  return sxy / (std::sqrt(sxx) * std::sqrt(syy));
}

inline std::pair<double, double> angle_range(const std::vector<std::optional<double>>& series) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (const auto& v : series) {
    if (!v) continue;
    lo = std::min(lo, *v);
    hi = std::max(hi, *v);
    any = true;
  }
  if (!any) throw insufficient_data_error("angle_range: no valid samples");
  return {lo, hi};
}

// Compares an estimated series against a reference. The higher-rate series is
// resampled onto the lower-rate timeline, never the other way around, so no
// samples are invented.
inline MetricReport compare_series(const Series& est, const Series& ref, const std::string& name,
                                   std::int64_t max_gap_ms = 200) {
  auto mean_step = [](const Series& s) {
    if (s.size() < 2) return std::numeric_limits<double>::infinity();
    return static_cast<double>(s.t_ms.back() - s.t_ms.front()) / static_cast<double>(s.size() - 1);
  };
  const bool ref_is_denser = mean_step(ref) <= mean_step(est);

  std::vector<std::optional<double>> est_v, ref_v;
  if (ref_is_denser) {
    est_v.resize(est.size());
    for (std::size_t i = 0; i < est.size(); ++i) est_v[i] = est.value[i];
    ref_v = resample(ref, est.t_ms, max_gap_ms);
  } else {
    ref_v.resize(ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ref_v[i] = ref.value[i];
    est_v = resample(est, ref.t_ms, max_gap_ms);
  }

  MetricReport report;
  report.triple_name = name;
  report.mae_deg = mae(est_v, ref_v);
  report.pearson_r = pearson(est_v, ref_v);
  std::tie(report.range_est_min, report.range_est_max) = angle_range(est_v);
  std::tie(report.range_ref_min, report.range_ref_max) = angle_range(ref_v);
  std::int64_t n = 0;
  for (std::size_t i = 0; i < est_v.size(); ++i)
    if (est_v[i] && i < ref_v.size() && ref_v[i]) ++n;
  report.n_compared = n;
  return report;
}

}  // namespace kinelift::kin
