#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kinelift/sampling.hpp"
#include "kinelift/types.hpp"

// Selects one identity-consistent target pose per frame: agent-provided
// anchor frames pin the identity, a constant-velocity Kalman filter on the
// confidence-weighted center propagates it between anchors, and an IoU gate
// against the last accepted bounding box suppresses switches in crowds.

namespace kinelift::track {

enum class FrameStatus { anchor, propagated, missing };

inline const char* to_string(FrameStatus s) {
  switch (s) {
    case FrameStatus::anchor: return "anchor";
    case FrameStatus::propagated: return "propagated";
    case FrameStatus::missing: return "missing";
  }
  return "?";
}

struct TrackResult {
  std::vector<int> index;           // n*_t in [-1, N_t-1]
  std::vector<FrameStatus> status;  // missing <=> index == -1
  std::optional<Box> last_box;
};

struct TrackConfig {
  double conf_threshold = 0.98;
  int min_valid_joints = 6;
  double iou_gate = 0.05;
  int warmup_length = 5;
  // Constant-velocity model noise, tuned for 30 fps human motion.
  double q_pos = 1.0, q_vel = 4.0;   // process noise, px^2
  double r_pos = 25.0;               // measurement noise, px^2
  double p0_pos = 100.0, p0_vel = 400.0;
};

// Confidence-weighted centroid of a person's joints. Undefined (and the slot
// invalid) when all confidences are zero.
inline std::optional<Eigen::Vector2d> weighted_center(const PersonPose& pose) {
  double wsum = 0.0;
  Eigen::Vector2d acc = Eigen::Vector2d::Zero();
  for (const auto& kp : pose.joints) {
    acc += kp.confidence * Eigen::Vector2d(kp.x, kp.y);
    wsum += kp.confidence;
  }
  if (wsum <= 0.0) return std::nullopt;
  return acc / wsum;
}

// --------------------------------------------------------------------------
// Constant-velocity Kalman filter over the image-plane center.

class KalmanFilter {
 public:
  explicit KalmanFilter(const TrackConfig& config = {}) : config_(config) {}

  void init(const Eigen::Vector2d& center) {
    mean_ << center.x(), center.y(), 0.0, 0.0;
    cov_ = Eigen::Vector4d(config_.p0_pos, config_.p0_pos, config_.p0_vel, config_.p0_vel).asDiagonal();
    warmup_count_ = 1;
    engaged_ = true;
  }

  Eigen::Vector2d predict() {
    Eigen::Matrix4d A = Eigen::Matrix4d::Identity();
    A(0, 2) = 1.0;
    A(1, 3) = 1.0;
    Eigen::Matrix4d Q =
        Eigen::Vector4d(config_.q_pos, config_.q_pos, config_.q_vel, config_.q_vel).asDiagonal();
    mean_ = A * mean_;
    cov_ = A * cov_ * A.transpose() + Q;
    cov_ = 0.5 * (cov_ + cov_.transpose().eval());
    return mean_.head<2>();
  }

  void update(const Eigen::Vector2d& measurement) {
    Eigen::Matrix<double, 2, 4> H = Eigen::Matrix<double, 2, 4>::Zero();
    H(0, 0) = 1.0;
    H(1, 1) = 1.0;
    const Eigen::Matrix2d R = Eigen::Vector2d(config_.r_pos, config_.r_pos).asDiagonal();
    const Eigen::Vector2d innovation = measurement - H * mean_;
    const Eigen::Matrix2d S = H * cov_ * H.transpose() + R;
    const Eigen::Matrix<double, 4, 2> K = cov_ * H.transpose() * S.inverse();
    mean_ += K * innovation;
    // Joseph form keeps the covariance symmetric positive-definite.
    const Eigen::Matrix4d IKH = Eigen::Matrix4d::Identity() - K * H;
    cov_ = IKH * cov_ * IKH.transpose() + K * R * K.transpose();
    cov_ = 0.5 * (cov_ + cov_.transpose().eval());
    ++warmup_count_;
  }

  bool engaged() const { return engaged_; }
  bool warmed_up() const { return warmup_count_ >= config_.warmup_length; }
  int warmup_count() const { return warmup_count_; }
  const Eigen::Vector4d& mean() const { return mean_; }
  const Eigen::Matrix4d& covariance() const { return cov_; }
  Eigen::Vector2d center() const { return mean_.head<2>(); }

 private:
  TrackConfig config_;
  Eigen::Vector4d mean_ = Eigen::Vector4d::Zero();
  Eigen::Matrix4d cov_ = Eigen::Matrix4d::Identity();
  int warmup_count_ = 0;
  bool engaged_ = false;
};

// --------------------------------------------------------------------------
// Association and anchor sampling.

// Nearest valid candidate to the predicted center; ties break to the lower
// index, empty set gives -1.
inline int associate(const Eigen::Vector2d& prediction,
                     const std::vector<std::pair<int, Eigen::Vector2d>>& candidates) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& [index, center] : candidates) {
    const double d = (center - prediction).norm();
    if (d < best_d) {
      best_d = d;
      best = index;
    }
  }
  return best;
}

// Valid person candidates at a frame: non-padded slots with enough confident
// joints and a defined weighted center.
inline std::vector<std::pair<int, Eigen::Vector2d>> valid_candidates(const PoseFrame& frame,
                                                                     const TrackConfig& config) {
  std::vector<std::pair<int, Eigen::Vector2d>> out;
  for (std::size_t n = 0; n < frame.persons.size(); ++n) {
    const auto& person = frame.persons[n];
    if (person.padded) continue;
    int confident = 0;
    for (const auto& kp : person.joints)
      if (kp.confidence >= config.conf_threshold) ++confident;
    if (confident < config.min_valid_joints) continue;
    const auto center = weighted_center(person);
    if (!center) continue;
    out.emplace_back(static_cast<int>(n), *center);
  }
  return out;
}

// Scores frames by multi-person trajectory proximity and person-count
// instability, then merges the top scorers with an even-spaced backbone.
inline std::vector<std::int64_t> sample_anchor_frames(const PoseTensor& tensor, int budget,
                                                      const TrackConfig& config = {},
                                                      double w_proximity = 1.0,
                                                      double w_instability = 1.0) {
  if (budget < 1) throw input_error("sample_anchor_frames: budget must be >= 1");
  const std::int64_t frames = tensor.frame_count();
  if (frames == 0) return {};

  std::vector<std::pair<double, std::int64_t>> scored;
  int prev_detected = tensor.persons_detected(0);
  for (std::int64_t t = 0; t < frames; ++t) {
    const auto candidates = valid_candidates(tensor.frame(static_cast<std::size_t>(t)), config);
    double score = 0.0;
    if (candidates.size() >= 2) {
      double min_d = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < candidates.size(); ++i)
        for (std::size_t j = i + 1; j < candidates.size(); ++j)
          min_d = std::min(min_d, (candidates[i].second - candidates[j].second).norm());
      score += w_proximity / (1.0 + min_d);
    }
    const int detected = tensor.persons_detected(static_cast<std::size_t>(t));
    if (t > 0 && detected != prev_detected) score += w_instability;
    prev_detected = detected;
    if (score > 0.0) scored.emplace_back(score, t);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });

  std::vector<std::int64_t> anchors;
  if (frames == 1 || budget == 1) {
    anchors.push_back(0);
  } else {
    anchors = even_spaced_indices(frames, budget);
  }
  for (int k = 0; k < budget && k < static_cast<int>(scored.size()); ++k)
    anchors.push_back(scored[static_cast<std::size_t>(k)].second);
  std::sort(anchors.begin(), anchors.end());
  anchors.erase(std::unique(anchors.begin(), anchors.end()), anchors.end());
  return anchors;
}

// --------------------------------------------------------------------------
// Main tracking pass.

namespace detail {

// One directional pass over `order`. `anchors` maps frame -> asserted index
// (or -1). Writes result entries for every frame visited.
inline void run_pass(const PoseTensor& tensor, const std::vector<std::int64_t>& order,
                     const std::map<std::int64_t, int>& anchors, const TrackConfig& config,
                     TrackResult& result) {
  KalmanFilter filter(config);
  std::optional<Box> last_box;

  for (const std::int64_t t : order) {
    const auto& frame = tensor.frame(static_cast<std::size_t>(t));
    auto& out_index = result.index[static_cast<std::size_t>(t)];
    auto& out_status = result.status[static_cast<std::size_t>(t)];
    const auto candidates = valid_candidates(frame, config);

    const auto anchor_it = anchors.find(t);
    if (anchor_it != anchors.end()) {
      const int a = anchor_it->second;
      std::optional<Eigen::Vector2d> center;
      for (const auto& [index, c] : candidates)
        if (index == a) center = c;
      if (a >= 0 && center) {
        // Anchors re-seat the filter directly on the asserted center rather
        // than blending through the gain, so accumulated drift (or a wrong
        // lock) cannot survive an anchor.
        filter.init(*center);
        out_index = a;
        out_status = FrameStatus::anchor;
        last_box = bbox_of(frame.persons[static_cast<std::size_t>(a)], config.conf_threshold);
      } else {
        out_index = -1;
        out_status = FrameStatus::missing;
        if (filter.engaged()) filter.predict();  // coast
      }
      continue;
    }

    if (!filter.engaged()) {
      out_index = -1;
      out_status = FrameStatus::missing;
      continue;
    }

    const Eigen::Vector2d prediction = filter.predict();
    const int chosen = associate(prediction, candidates);
    if (chosen < 0) {
      out_index = -1;
      out_status = FrameStatus::missing;
      continue;
    }
    const auto box = bbox_of(frame.persons[static_cast<std::size_t>(chosen)], config.conf_threshold);
    if (last_box && box && iou(*last_box, *box) < config.iou_gate) {
      // Bounding-box consistency gate: reject, keep the last accepted box.
      out_index = -1;
      out_status = FrameStatus::missing;
      continue;
    }
    Eigen::Vector2d center = Eigen::Vector2d::Zero();
    for (const auto& [index, c] : candidates)
      if (index == chosen) center = c;
    filter.update(center);
    out_index = chosen;
    out_status = FrameStatus::propagated;
    if (box) last_box = box;
  }
  if (last_box) result.last_box = last_box;
}

}  // namespace detail

// Forward pass from the first anchor onward; frames before it are filled by
// a time-reversed pass that reuses the same machinery.
inline TrackResult track(const PoseTensor& tensor, const std::map<std::int64_t, int>& anchors,
                         const TrackConfig& config = {}) {
  if (anchors.empty()) throw input_error("track: at least one anchor frame is required");
  const std::int64_t frames = tensor.frame_count();
  for (const auto& [frame, index] : anchors) {
    if (frame < 0 || frame >= frames) throw input_error("track: anchor frame out of range");
    if (index < -1 || index >= tensor.capacity())
      throw input_error("track: anchor index out of range");
  }

  TrackResult result;
  result.index.assign(static_cast<std::size_t>(frames), -1);
  result.status.assign(static_cast<std::size_t>(frames), FrameStatus::missing);

  const std::int64_t first_anchor = anchors.begin()->first;
  std::vector<std::int64_t> forward, backward;
  for (std::int64_t t = first_anchor; t < frames; ++t) forward.push_back(t);
  for (std::int64_t t = first_anchor; t >= 0; --t) backward.push_back(t);

  detail::run_pass(tensor, forward, anchors, config, result);
  if (first_anchor > 0) {
    TrackResult back;
    back.index.assign(static_cast<std::size_t>(frames), -1);
    back.status.assign(static_cast<std::size_t>(frames), FrameStatus::missing);
    detail::run_pass(tensor, backward, anchors, config, back);
    for (std::int64_t t = 0; t < first_anchor; ++t) {
      result.index[static_cast<std::size_t>(t)] = back.index[static_cast<std::size_t>(t)];
      result.status[static_cast<std::size_t>(t)] = back.status[static_cast<std::size_t>(t)];
    }
  }
  return result;
}

}  // namespace kinelift::track
