#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kinelift/agent.hpp"
#include "kinelift/sampling.hpp"
#include "kinelift/types.hpp"

// Assigns a timestamp to every frame of each video from sparse agent clock
// readings, then aligns the two videos onto a common timeline. Sampling is
// hierarchical: an even initial pool, adaptive refinement around drift steps
// (duplicated frames, rate changes), and a final validation pool.

namespace kinelift::sync {

struct Observation {
  std::int64_t frame_index = 0;
  std::int64_t timestamp_ms = 0;
};

struct DriftModel {
  double nominal_fps = 0.0;
  double t0_ms = 0.0;                    // median-offset estimate of frame 0's time
  double tol_ms = 0.0;
  std::vector<Observation> observations;  // sorted by frame_index, unique frames
  std::vector<double> residuals;          // observed minus nominal timeline
  std::int64_t stable_begin = 0;          // stable region, inclusive frame bounds
  std::int64_t stable_end = 0;

  double period_ms() const { return 1000.0 / nominal_fps; }
};

// Endpoint-inclusive even spacing: round(k*(T-1)/(budget-1)), deduplicated.
inline std::vector<std::int64_t> sample_initial(std::int64_t frame_count, int budget) {
  return even_spaced_indices(frame_count, budget);
}

// Fits the nominal-rate timeline t0 + i*period with a median offset (robust
// to single misreads) and finds the longest contiguous run of observations
// whose residuals sit within tol_ms of the median residual.
inline DriftModel fit_drift(std::vector<Observation> observations, double nominal_fps,
                            double tol_ms = -1.0) {
  // Unique frames, last reading wins.
  std::map<std::int64_t, std::int64_t> by_frame;
  for (const auto& o : observations) by_frame[o.frame_index] = o.timestamp_ms;
  observations.clear();
  for (const auto& [f, ts] : by_frame) observations.push_back({f, ts});
  if (observations.size() < 2)
    throw insufficient_data_error("fit_drift: need at least 2 valid observations");

  DriftModel model;
  model.nominal_fps = nominal_fps;
  const double period = 1000.0 / nominal_fps;
  model.tol_ms = tol_ms > 0.0 ? tol_ms : 0.6 * period;

  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };

  std::vector<double> offsets;
  for (const auto& o : observations)
    offsets.push_back(static_cast<double>(o.timestamp_ms) - static_cast<double>(o.frame_index) * period);
  model.t0_ms = median(offsets);

  for (std::size_t i = 0; i < observations.size(); ++i)
    model.residuals.push_back(offsets[i] - model.t0_ms);
  const double med_r = median(model.residuals);

  std::size_t best_begin = 0, best_len = 0, run_begin = 0, run_len = 0;
  for (std::size_t i = 0; i < observations.size(); ++i) {
    if (std::abs(model.residuals[i] - med_r) <= model.tol_ms) {
      if (run_len == 0) run_begin = i;
      ++run_len;
      if (run_len > best_len) {
        best_len = run_len;
        best_begin = run_begin;
      }
    } else {
      run_len = 0;
    }
  }
  if (best_len == 0) {
    // Degenerate: no observation near the median. Fall back to the single
    // observation closest to it.
    std::size_t closest = 0;
    for (std::size_t i = 1; i < observations.size(); ++i)
      if (std::abs(model.residuals[i] - med_r) < std::abs(model.residuals[closest] - med_r))
        closest = i;
    best_begin = closest;
    best_len = 1;
  }
  model.stable_begin = observations[best_begin].frame_index;
  model.stable_end = observations[best_begin + best_len - 1].frame_index;
  model.observations = std::move(observations);
  return model;
}

// Midpoints of every observation gap whose residuals disagree by more than
// tol_ms (drift steps from duplicated frames live inside such gaps), widest
// gap first, up to budget. Queried iteratively: each round halves the gaps
// until steps sit between adjacent frames.
inline std::vector<std::int64_t> refine(const DriftModel& drift, int budget) {
  if (budget <= 0) return {};
  struct Gap {
    std::int64_t lo, hi;
    std::int64_t width() const { return hi - lo; }
  };
  std::vector<Gap> gaps;
  for (std::size_t i = 0; i + 1 < drift.observations.size(); ++i) {
    const auto& a = drift.observations[i];
    const auto& b = drift.observations[i + 1];
    if (b.frame_index - a.frame_index < 2) continue;
    if (std::abs(drift.residuals[i + 1] - drift.residuals[i]) <= drift.tol_ms) continue;
    gaps.push_back({a.frame_index, b.frame_index});
  }
  std::sort(gaps.begin(), gaps.end(), [](const Gap& a, const Gap& b) {
    return a.width() != b.width() ? a.width() > b.width() : a.lo < b.lo;
  });
  std::vector<std::int64_t> out;
  for (const auto& g : gaps) {
    if (static_cast<int>(out.size()) >= budget) break;
    out.push_back((g.lo + g.hi) / 2);
  }
  return out;
}

// Piecewise-linear interpolation between bracketing observations, nominal
// frame period beyond the outermost ones. Integer milliseconds with
// round-half-even so runs are bit-identical across platforms.
inline std::vector<FrameClock> propagate(const DriftModel& drift, std::int64_t frame_count,
                                         const std::string& video_id) {
  const auto& obs = drift.observations;
  if (obs.empty()) throw insufficient_data_error("propagate: no observations");
  const double period = drift.period_ms();

  std::vector<FrameClock> clocks(static_cast<std::size_t>(frame_count));
  std::size_t hi = 0;  // first observation with frame_index >= i
  for (std::int64_t i = 0; i < frame_count; ++i) {
    while (hi < obs.size() && obs[hi].frame_index < i) ++hi;
    FrameClock& fc = clocks[static_cast<std::size_t>(i)];
    fc.video_id = video_id;
    fc.frame_index = i;
    if (hi < obs.size() && obs[hi].frame_index == i) {
      fc.timestamp_ms = obs[hi].timestamp_ms;
      fc.source = ClockSource::agent_observed;
      continue;
    }
    fc.source = ClockSource::propagated;
    if (hi == 0) {
      fc.timestamp_ms = round_half_even(static_cast<double>(obs.front().timestamp_ms) -
                                        static_cast<double>(obs.front().frame_index - i) * period);
    } else if (hi == obs.size()) {
      fc.timestamp_ms = round_half_even(static_cast<double>(obs.back().timestamp_ms) +
                                        static_cast<double>(i - obs.back().frame_index) * period);
    } else {
      const auto& a = obs[hi - 1];
      const auto& b = obs[hi];
      const double w = static_cast<double>(i - a.frame_index) /
                       static_cast<double>(b.frame_index - a.frame_index);
      fc.timestamp_ms = round_half_even(static_cast<double>(a.timestamp_ms) +
                                        w * static_cast<double>(b.timestamp_ms - a.timestamp_ms));
    }
  }
  return clocks;
}

// Verification pool: temporal boundaries, draws from the stable region, and
// uniformly random frames. Deterministic for a given seed.
inline std::vector<std::int64_t> select_validation_frames(std::int64_t frame_count,
                                                          std::int64_t stable_begin,
                                                          std::int64_t stable_end, int count,
                                                          std::uint64_t seed) {
  std::vector<std::int64_t> out;
  auto push_unique = [&](std::int64_t f) {
    if (std::find(out.begin(), out.end(), f) == out.end()) out.push_back(f);
  };
  if (frame_count <= 0 || count <= 0) return out;
  push_unique(0);
  push_unique(frame_count - 1);

  std::mt19937_64 rng(seed);
  auto draw = [&](std::int64_t lo, std::int64_t hi) {  // inclusive bounds
    return lo + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
  };
  const int remaining = count - static_cast<int>(out.size());
  const int n_stable = remaining > 0 ? (remaining + 1) / 2 : 0;
  int guard = 16 * count;
  for (int k = 0; k < n_stable && guard > 0;) {
    const std::int64_t f = draw(stable_begin, std::max(stable_begin, stable_end));
    --guard;
    if (std::find(out.begin(), out.end(), f) == out.end()) {
      out.push_back(f);
      ++k;
    }
  }
  while (static_cast<int>(out.size()) < count && guard > 0) {
    const std::int64_t f = draw(0, frame_count - 1);
    --guard;
    if (std::find(out.begin(), out.end(), f) == out.end()) out.push_back(f);
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct ValidationSample {
  std::int64_t frame_index = 0;
  std::int64_t observed_ms = 0;
  std::int64_t propagated_ms = 0;
  std::int64_t abs_error_ms = 0;
};

struct ValidationReport {
  std::vector<ValidationSample> samples;
  std::int64_t max_abs_error_ms = 0;
  double tolerance_ms = 0.0;
  bool passed = true;
};

inline ValidationReport validate(const std::vector<FrameClock>& clocks,
                                 const std::vector<Observation>& verification,
                                 double tolerance_ms) {
  ValidationReport report;
  report.tolerance_ms = tolerance_ms;
  for (const auto& o : verification) {
    if (o.frame_index < 0 || o.frame_index >= static_cast<std::int64_t>(clocks.size())) continue;
    const auto& fc = clocks[static_cast<std::size_t>(o.frame_index)];
    if (!fc.timestamp_ms) continue;
    ValidationSample s;
    s.frame_index = o.frame_index;
    s.observed_ms = o.timestamp_ms;
    s.propagated_ms = *fc.timestamp_ms;
    s.abs_error_ms = std::abs(s.propagated_ms - s.observed_ms);
    report.max_abs_error_ms = std::max(report.max_abs_error_ms, s.abs_error_ms);
    report.samples.push_back(s);
  }
  report.passed = report.max_abs_error_ms <= static_cast<std::int64_t>(tolerance_ms);
  return report;
}

// --------------------------------------------------------------------------
// Cross-view pairing.

struct FramePair {
  std::int64_t frame_a = 0;
  std::int64_t frame_b = 0;
  std::int64_t abs_dt_ms = 0;
  bool matched = true;
};

struct Pairing {
  std::vector<FramePair> pairs;
  std::string warning;
};

namespace detail {

// Index of the nearest timestamp, lowest index on ties.
inline std::size_t nearest(const std::vector<std::int64_t>& ts, std::int64_t t) {
  const auto it = std::lower_bound(ts.begin(), ts.end(), t);
  if (it == ts.begin()) return 0;
  if (it == ts.end()) return ts.size() - 1;
  const std::size_t hi = static_cast<std::size_t>(it - ts.begin());
  const std::size_t lo = hi - 1;
  return (t - ts[lo]) <= (ts[hi] - t) ? lo : hi;
}

}  // namespace detail

// Mutual nearest-timestamp matching. Each frame appears in at most one pair;
// pairs wider than half the larger frame period are flagged unmatched.
// Swapping the inputs transposes the pairing.
inline Pairing align_views(const std::vector<FrameClock>& clocks_a,
                           const std::vector<FrameClock>& clocks_b) {
  Pairing out;
  std::vector<std::int64_t> ta, tb;
  for (const auto& c : clocks_a) ta.push_back(c.timestamp_ms.value());
  for (const auto& c : clocks_b) tb.push_back(c.timestamp_ms.value());
  if (ta.empty() || tb.empty()) {
    out.warning = "empty clock list";
    return out;
  }
  if (ta.front() > tb.back() || tb.front() > ta.back()) {
    out.warning = "video time ranges do not overlap";
    return out;
  }

  auto period = [](const std::vector<std::int64_t>& ts) {
    return ts.size() < 2 ? 0.0
                         : static_cast<double>(ts.back() - ts.front()) /
                               static_cast<double>(ts.size() - 1);
  };
  const double half_period = 0.5 * std::max(period(ta), period(tb));

  for (std::size_t i = 0; i < ta.size(); ++i) {
    const std::size_t j = detail::nearest(tb, ta[i]);
    if (detail::nearest(ta, tb[j]) != i) continue;  // not mutual
    FramePair p;
    p.frame_a = clocks_a[i].frame_index;
    p.frame_b = clocks_b[j].frame_index;
    p.abs_dt_ms = std::abs(ta[i] - tb[j]);
    p.matched = static_cast<double>(p.abs_dt_ms) <= half_period;
    out.pairs.push_back(p);
  }
  return out;
}

// --------------------------------------------------------------------------
// Orchestration: initial pool -> drift fit -> refinement loop -> propagation
// -> validation, all through the agent client.

struct SyncConfig {
  double nominal_fps = 30.0;
  int initial_budget = 12;
  int refine_budget = 8;
  int validation_budget = 6;
  double tol_ms = -1.0;  // <=0 means 0.6 * frame period
  double validation_tolerance_ms = 50.0;
  std::uint64_t seed = 1;
  int max_concurrency = 4;
};

struct VideoSource {
  std::string video_id;
  std::int64_t frame_count = 0;
  // Preprocessed (and anonymized) frame for agent submission; nullopt when
  // frames are unavailable (pure fixture runs).
  std::function<std::optional<img::RasterImage>(std::int64_t)> frame;
};

struct VideoSync {
  std::string video_id;
  DriftModel drift;
  std::vector<FrameClock> clocks;
  ValidationReport validation;
  std::vector<std::int64_t> invalid_frames;  // queried but unusable replies
  int queries = 0;
};

namespace detail {

inline std::map<std::int64_t, std::optional<std::int64_t>> query_clocks(
    const agent::AgentClient& client, const VideoSource& source,
    const std::vector<std::int64_t>& frames, int max_concurrency) {
  return agent::query_batch(frames, max_concurrency,
                            [&](std::int64_t f) -> std::optional<std::int64_t> {
    std::optional<img::RasterImage> image;
    if (source.frame) image = source.frame(f);
    agent::TimestampQuery q;
    q.video_id = source.video_id;
    q.frame_index = f;
    q.image = image ? &*image : nullptr;
    q.anonymized = true;  // preprocessing contract: providers blur before handing out
    const auto reply = client.query_timestamp(q);
    if (!reply.detected || !reply.timestamp_raw) return std::nullopt;
    try {
      return agent::parse_clock_string(*reply.timestamp_raw);
    } catch (const parse_error&) {
      return std::nullopt;  // never guess; record as invalid
    }
  });
}

}  // namespace detail

inline VideoSync synchronize_video(const agent::AgentClient& client, const VideoSource& source,
                                   const SyncConfig& config) {
  VideoSync result;
  result.video_id = source.video_id;

  std::vector<Observation> observations;
  std::vector<std::int64_t> queried;
  auto ingest = [&](const std::map<std::int64_t, std::optional<std::int64_t>>& replies) {
    for (const auto& [frame, ts] : replies) {
      ++result.queries;
      queried.push_back(frame);
      if (ts) observations.push_back({frame, *ts});
      else result.invalid_frames.push_back(frame);
    }
  };

  ingest(detail::query_clocks(client, source,
                              sample_initial(source.frame_count, config.initial_budget),
                              config.max_concurrency));
  result.drift = fit_drift(observations, config.nominal_fps, config.tol_ms);

  int remaining = config.refine_budget;
  while (remaining > 0) {
    auto extra = refine(result.drift, remaining);
    extra.erase(std::remove_if(extra.begin(), extra.end(),
                               [&](std::int64_t f) {
                                 return std::find(queried.begin(), queried.end(), f) != queried.end();
                               }),
                extra.end());
    if (extra.empty()) break;
    remaining -= static_cast<int>(extra.size());
    ingest(detail::query_clocks(client, source, extra, config.max_concurrency));
    result.drift = fit_drift(observations, config.nominal_fps, config.tol_ms);
  }

  result.clocks = propagate(result.drift, source.frame_count, source.video_id);

  const auto vframes =
      select_validation_frames(source.frame_count, result.drift.stable_begin,
                               result.drift.stable_end, config.validation_budget, config.seed);
  std::vector<Observation> vobs;
  for (const auto& [frame, ts] : detail::query_clocks(client, source, vframes,
                                                      config.max_concurrency)) {
    ++result.queries;
    if (ts) vobs.push_back({frame, *ts});
  }
  result.validation = validate(result.clocks, vobs, config.validation_tolerance_ms);
  for (const auto& s : result.validation.samples)
    result.clocks[static_cast<std::size_t>(s.frame_index)].source = ClockSource::validated;
  return result;
}

}  // namespace kinelift::sync
