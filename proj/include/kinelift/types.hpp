#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

// Core domain types shared by every pipeline stage. Everything here is a
// plain value type, immutable in practice once constructed, and safe to
// share across threads.

namespace kinelift {

// ---------------------------------------------------------------------------
// Errors. One base class so callers can catch the whole family; subtypes match
// the failure modes of the individual stages.

struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct parse_error : error { using error::error; };
struct schema_error : error { using error::error; };
struct format_error : error { using error::error; };
struct input_error : error { using error::error; };
struct config_error : error { using error::error; };
struct insufficient_data_error : error { using error::error; };
struct degenerate_geometry_error : error { using error::error; };
struct cheirality_error : error { using error::error; };

// Transport failures are retriable; protocol errors are not and carry the
// offending payload for postmortems.
struct transport_error : error { using error::error; };

struct protocol_error : error {
  explicit protocol_error(const std::string& what, std::string payload = {})
      : error(what), payload(std::move(payload)) {}
  std::string payload;
};

struct divergence_error : error {
  divergence_error(const std::string& what, int iteration)
      : error(what), iteration(iteration) {}
  int iteration;
};

// ---------------------------------------------------------------------------
// Geometry primitives.

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  double confidence = 0.0;  // in [0,1]
};

struct Box {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
};

// Intersection over union of two axis-aligned boxes. Degenerate (zero-area)
// inputs and empty intersections both give 0.
inline double iou(const Box& a, const Box& b) {
  const double ix0 = std::max(a.x0, b.x0);
  const double iy0 = std::max(a.y0, b.y0);
  const double ix1 = std::min(a.x1, b.x1);
  const double iy1 = std::min(a.y1, b.y1);
  const double iw = ix1 - ix0;
  const double ih = iy1 - iy0;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

// ---------------------------------------------------------------------------
// Multi-person pose tensor.

struct PersonPose {
  std::vector<Keypoint> joints;  // exactly J entries
  bool padded = false;           // filler slot, not a detection
};

struct PoseFrame {
  std::int64_t frame_index = 0;
  std::vector<PersonPose> persons;  // N slots after padding
  int detected = 0;                 // persons actually detected in this frame
};

// Padded per-frame multi-person keypoint stack. N is the maximum number of
// detected persons over the whole sequence; frames with fewer detections
// carry explicitly flagged padding slots so downstream code can never
// mistake padding for a detection at the origin.
class PoseTensor {
 public:
  PoseTensor() = default;

  // Frames are reordered by frame_index and padded to the common capacity.
  // Throws schema_error if joint counts disagree across persons/frames.
  static PoseTensor from_frames(std::vector<PoseFrame> frames, int joint_count);

  std::int64_t frame_count() const { return static_cast<std::int64_t>(frames_.size()); }
  int joint_count() const { return joint_count_; }
  int capacity() const { return capacity_; }  // N in the padded layout

  const PoseFrame& frame(std::size_t t) const { return frames_.at(t); }
  const std::vector<PoseFrame>& frames() const { return frames_; }
  int persons_detected(std::size_t t) const { return frames_.at(t).detected; }

 private:
  std::vector<PoseFrame> frames_;
  int joint_count_ = 0;
  int capacity_ = 0;
};

inline PoseTensor PoseTensor::from_frames(std::vector<PoseFrame> frames, int joint_count) {
  PoseTensor out;
  out.joint_count_ = joint_count;

  std::sort(frames.begin(), frames.end(),
            [](const PoseFrame& a, const PoseFrame& b) { return a.frame_index < b.frame_index; });

  int capacity = 0;
  for (auto& f : frames) {
    f.detected = static_cast<int>(f.persons.size());
    capacity = std::max(capacity, f.detected);
    for (const auto& p : f.persons) {
      if (static_cast<int>(p.joints.size()) != joint_count)
        throw schema_error("pose frame " + std::to_string(f.frame_index) + ": person has " +
                           std::to_string(p.joints.size()) + " joints, expected " +
                           std::to_string(joint_count));
    }
  }
  for (auto& f : frames) {
    while (static_cast<int>(f.persons.size()) < capacity) {
      PersonPose pad;
      pad.joints.assign(static_cast<std::size_t>(joint_count), Keypoint{});
      pad.padded = true;
      f.persons.push_back(std::move(pad));
    }
  }
  out.capacity_ = capacity;
  out.frames_ = std::move(frames);
  return out;
}

// Tight bounding box over the keypoints whose confidence clears the
// threshold. Fewer than two such keypoints -> no box.
inline std::optional<Box> bbox_of(const PersonPose& pose, double conf_threshold) {
  Box box{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
          -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  int n = 0;
  for (const auto& kp : pose.joints) {
    if (kp.confidence < conf_threshold) continue;
    box.x0 = std::min(box.x0, kp.x);
    box.y0 = std::min(box.y0, kp.y);
    box.x1 = std::max(box.x1, kp.x);
    box.y1 = std::max(box.y1, kp.y);
    ++n;
  }
  if (n < 2) return std::nullopt;
  return box;
}

// ---------------------------------------------------------------------------
// Time.

constexpr std::int64_t kMillisPerDay = 86'400'000;

enum class ClockSource { agent_observed, propagated, validated };

inline const char* to_string(ClockSource s) {
  switch (s) {
    case ClockSource::agent_observed: return "agent_observed";
    case ClockSource::propagated: return "propagated";
    case ClockSource::validated: return "validated";
  }
  return "?";
}

inline ClockSource clock_source_from_string(const std::string& s) {
  if (s == "agent_observed") return ClockSource::agent_observed;
  if (s == "propagated") return ClockSource::propagated;
  if (s == "validated") return ClockSource::validated;
  throw parse_error("unknown clock source: " + s);
}

// One frame's place on the wall-clock timeline. timestamp_ms is
// milliseconds since midnight; day rollovers are out of scope.
struct FrameClock {
  std::string video_id;
  std::int64_t frame_index = 0;
  std::optional<std::int64_t> timestamp_ms;
  ClockSource source = ClockSource::propagated;
};

// Round-half-even to the nearest integer, so interpolated timestamps are
// reproducible across platforms.
inline std::int64_t round_half_even(double v) {
  const double f = std::floor(v);
  const double diff = v - f;
  if (diff > 0.5) return static_cast<std::int64_t>(f) + 1;
  if (diff < 0.5) return static_cast<std::int64_t>(f);
  const auto lo = static_cast<std::int64_t>(f);
  return (lo % 2 == 0) ? lo : lo + 1;
}

// ---------------------------------------------------------------------------
// Cameras and reconstruction.

// Pinhole camera with zero skew. Also used for the pseudo-intrinsics that
// stand in when no calibration exists.
struct CameraModel {
  double fx = 0.0, fy = 0.0;
  double cx = 0.0, cy = 0.0;
  int width = 0, height = 0;
};

struct Joint3D {
  double x = 0.0, y = 0.0, z = 0.0;
  bool valid = false;
};

struct AngleSample {
  std::int64_t timestamp_ms = 0;
  double angle_deg = 0.0;  // clamped arccos, always in [0, 180]
  std::string triple_name;
};

}  // namespace kinelift
