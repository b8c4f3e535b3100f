#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "kinelift/agent.hpp"
#include "kinelift/kinematics.hpp"
#include "kinelift/pose_io.hpp"
#include "kinelift/stereo.hpp"
#include "kinelift/types.hpp"

// Ground-truth oracle generator: a parametric walking actor plus optional
// distractors, projected through two known pinhole cameras into multi-person
// pose streams, with visual-clock fixtures (offset, duplicated frames) and
// agent fixture files. Everything is a pure function of the SceneSpec seed.

namespace kinelift::synth {

struct CameraSpec {
  double azimuth_deg = 0.0;    // position on a circle around the actor
  double distance_m = 5.0;
  double height_m = 1.4;
  double focal_scale = 1.0;    // true focal = scale * max(width, height)
  int width = 1920;
  int height = 1080;
  double fps = 30.0;
  std::vector<std::int64_t> dup_frames;  // output frames that repeat their predecessor
};

struct SceneSpec {
  double duration_s = 30.0;
  CameraSpec cam_a{.azimuth_deg = 0.0};
  CameraSpec cam_b{.azimuth_deg = 30.0};
  double gait_hz = 0.5;
  double knee_min_deg = 60.0;
  double knee_max_deg = 175.0;
  int distractors = 0;
  double noise_px = 0.0;
  double outlier_fraction = 0.0;
  double clock_offset_ms = 400.0;         // camera B starts this much later
  std::int64_t clock_origin_ms = 51'785'000;
  int joint_count = 133;
  std::uint64_t seed = 1234;
};

struct TrueGeometry {
  Eigen::Matrix3d k1 = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d k2 = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // cam1 -> cam2
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();   // unit norm
  Eigen::Matrix3d fundamental = Eigen::Matrix3d::Zero();   // ||F|| = 1
};

struct GeneratedVideo {
  std::string id;
  PoseTensor poses;
  std::vector<std::int64_t> true_timestamp_ms;  // per output frame
  std::vector<int> actor_slot;                  // planted identity, -1 if absent
};

struct GeneratedScene {
  GeneratedVideo a, b;
  agent::FixtureBackend fixtures;
  TrueGeometry geometry;
};

// COCO body-17 names for the default triples.
inline const std::vector<kin::JointTriple>& default_triples() {
  static const std::vector<kin::JointTriple> triples = {
      {"left_knee", 11, 13, 15},  {"right_knee", 12, 14, 16}, {"left_elbow", 5, 7, 9},
      {"right_elbow", 6, 8, 10},  {"left_hip", 5, 11, 13},    {"right_hip", 6, 12, 14},
  };
  return triples;
}

namespace detail {

inline Eigen::Matrix3d rot_y(double a) {
  Eigen::Matrix3d m;
  m << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  return m;
}

// Deterministic uniform in [0,1) and gaussian; mt19937_64 is pinned by the
// standard, Box-Muller keeps the normal draws portable.
struct Rng {
  std::mt19937_64 engine;
  explicit Rng(std::uint64_t seed) : engine(seed) {}
  double uniform() { return static_cast<double>(engine() >> 11) * 0x1.0p-53; }
  double gauss() {
    const double u1 = std::max(uniform(), 0x1.0p-53);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
};

}  // namespace detail

// A person's articulated 17-joint skeleton. The knee and elbow angles follow
// exact sinusoidal schedules, built so that the 3-point angle computed from
// the joints reproduces the schedule to machine precision.
class ActorModel {
 public:
  ActorModel(double gait_hz, double knee_min_deg, double knee_max_deg, double phase = 0.0,
             Eigen::Vector3d base = {0.0, 0.0, 0.0}, Eigen::Vector3d velocity = {0.0, 0.0, 0.0},
             double scale = 1.0, double sweep_amp = 0.0, double sweep_hz = 0.0,
             double sweep_phase = 0.0)
      : gait_hz_(gait_hz),
        knee_mid_(0.5 * (knee_min_deg + knee_max_deg)),
        knee_amp_(0.5 * (knee_max_deg - knee_min_deg)),
        phase_(phase),
        base_(std::move(base)),
        velocity_(std::move(velocity)),
        scale_(scale),
        sweep_amp_(sweep_amp),
        sweep_hz_(sweep_hz),
        sweep_phase_(sweep_phase) {}

  double knee_angle_deg(double tau, bool left) const {
    return knee_mid_ - knee_amp_ * std::cos(omega(tau) + (left ? 0.0 : std::numbers::pi));
  }
  double elbow_angle_deg(double tau, bool left) const {
    return 145.0 - 25.0 * std::cos(omega(tau) + (left ? std::numbers::pi : 0.0));
  }

  // COCO body-17 joints in world coordinates at time tau (seconds).
  std::vector<Eigen::Vector3d> joints(double tau) const {
    using Eigen::Vector3d;
    const double s = scale_;
    const Vector3d up(0, 0, 1), lat(0, 1, 0), fwd(1, 0, 0);
    const double w = omega(tau);
    const double sweep =
        sweep_amp_ * std::sin(2.0 * std::numbers::pi * sweep_hz_ * tau + sweep_phase_);
    const Vector3d pelvis = base_ + velocity_ * tau +
                            Vector3d(0, sweep + 0.05 * s * std::sin(w),
                                     s * 1.00 + 0.02 * s * std::sin(2.0 * w));
    const Vector3d neck = pelvis + s * 0.55 * up;

    std::vector<Vector3d> j(17);
    const Vector3d nose = neck + s * (0.22 * up + 0.08 * fwd);
    j[0] = nose;
    j[1] = nose + s * (0.03 * lat + 0.03 * up - 0.02 * fwd);   // left eye
    j[2] = nose + s * (-0.03 * lat + 0.03 * up - 0.02 * fwd);  // right eye
    j[3] = nose + s * (0.07 * lat + 0.01 * up - 0.06 * fwd);   // left ear
    j[4] = nose + s * (-0.07 * lat + 0.01 * up - 0.06 * fwd);  // right ear
    j[5] = neck + s * (0.20 * lat - 0.02 * up);                // left shoulder
    j[6] = neck + s * (-0.20 * lat - 0.02 * up);               // right shoulder
    j[11] = pelvis + s * 0.12 * lat;                           // left hip
    j[12] = pelvis - s * 0.12 * lat;                           // right hip

    auto leg = [&](bool left) {
      const double ph = left ? 0.0 : std::numbers::pi;
      const Vector3d hip = left ? j[11] : j[12];
      const double swing = 0.45 * std::sin(w + ph);
      const Vector3d thigh_dir = detail::rot_y(swing) * Vector3d(0, 0, -1);
      const Vector3d knee = hip + s * 0.45 * thigh_dir;
      const double theta = knee_angle_deg(tau, left) * std::numbers::pi / 180.0;
      const Vector3d shank_dir = detail::rot_y(std::numbers::pi - theta) * thigh_dir;
      const Vector3d ankle = knee + s * 0.45 * shank_dir;
      return std::make_pair(knee, ankle);
    };
    std::tie(j[13], j[15]) = leg(true);
    std::tie(j[14], j[16]) = leg(false);

    auto arm = [&](bool left) {
      const double ph = (left ? std::numbers::pi : 0.0);
      const Vector3d shoulder = left ? j[5] : j[6];
      const double swing = 0.35 * std::sin(w + ph);
      const Vector3d upper_dir = detail::rot_y(swing) * Vector3d(0, 0, -1);
      const Vector3d elbow = shoulder + s * 0.30 * upper_dir;
      const double theta = elbow_angle_deg(tau, left) * std::numbers::pi / 180.0;
      const Vector3d fore_dir = detail::rot_y(std::numbers::pi - theta) * upper_dir;
      const Vector3d wrist = elbow + s * 0.28 * fore_dir;
      return std::make_pair(elbow, wrist);
    };
    std::tie(j[7], j[9]) = arm(true);
    std::tie(j[8], j[10]) = arm(false);
    return j;
  }

 private:
  double omega(double tau) const { return 2.0 * std::numbers::pi * gait_hz_ * tau + phase_; }

  double gait_hz_;
  double knee_mid_, knee_amp_;
  double phase_;
  Eigen::Vector3d base_, velocity_;
  double scale_;
  double sweep_amp_, sweep_hz_, sweep_phase_;
};

// --------------------------------------------------------------------------

class Scene {
 public:
  explicit Scene(SceneSpec spec) : spec_(std::move(spec)), actor_(make_actor(spec_)) {
    if ((camera_center(spec_.cam_a) - camera_center(spec_.cam_b)).norm() < 1e-9)
      throw input_error("scene: cameras have coincident centers");
  }

  const SceneSpec& spec() const { return spec_; }
  const ActorModel& actor() const { return actor_; }

  std::vector<ActorModel> distractor_models() const {
    std::vector<ActorModel> out;
    for (int k = 0; k < spec_.distractors; ++k) {
      // Lateral sweeps through the actor's spot, staggered in depth and
      // phase: repeated image-space crossings at a brisk, distinct velocity.
      const Eigen::Vector3d base(0.4 + 0.3 * k, 0.0, 0.0);
      const double amp = 1.5 + 0.15 * k;
      const double hz = 0.08 * (1.0 + 0.2 * k);
      out.emplace_back(spec_.gait_hz * (1.0 + 0.1 * (k + 1)), 70.0, 165.0, 0.9 * (k + 1), base,
                       Eigen::Vector3d::Zero(), 0.95 + 0.05 * (k % 3), amp, hz,
                       0.5 + 1.3 * k);
    }
    return out;
  }

  static Eigen::Vector3d camera_center(const CameraSpec& cam) {
    const double az = cam.azimuth_deg * std::numbers::pi / 180.0;
    return {-cam.distance_m * std::cos(az), -cam.distance_m * std::sin(az), cam.height_m};
  }

  // World -> camera rotation (camera x right, y down, z forward), aimed at
  // the actor's torso.
  static Eigen::Matrix3d camera_rotation(const CameraSpec& cam) {
    const Eigen::Vector3d target(0.0, 0.0, 1.0);
    const Eigen::Vector3d center = camera_center(cam);
    const Eigen::Vector3d zc = (target - center).normalized();
    // zc x up is the right-pointing axis; yc = zc x xc then points down,
    // matching the y-down image convention.
    Eigen::Vector3d xc = zc.cross(Eigen::Vector3d(0, 0, 1));
    if (xc.norm() < 1e-12) throw input_error("scene: camera looks straight up/down");
    xc.normalize();
    const Eigen::Vector3d yc = zc.cross(xc);
    Eigen::Matrix3d r;
    r.row(0) = xc;
    r.row(1) = yc;
    r.row(2) = zc;
    return r;
  }

  static Eigen::Matrix3d camera_k(const CameraSpec& cam) {
    Eigen::Matrix3d k = Eigen::Matrix3d::Identity();
    const double f = cam.focal_scale * std::max(cam.width, cam.height);
    k(0, 0) = k(1, 1) = f;
    k(0, 2) = cam.width / 2.0;
    k(1, 2) = cam.height / 2.0;
    return k;
  }

  TrueGeometry geometry() const {
    TrueGeometry g;
    g.k1 = camera_k(spec_.cam_a);
    g.k2 = camera_k(spec_.cam_b);
    const Eigen::Matrix3d r1 = camera_rotation(spec_.cam_a);
    const Eigen::Matrix3d r2 = camera_rotation(spec_.cam_b);
    const Eigen::Vector3d c1 = camera_center(spec_.cam_a);
    const Eigen::Vector3d c2 = camera_center(spec_.cam_b);
    g.rotation = r2 * r1.transpose();
    g.translation = (r2 * (c1 - c2)).normalized();
    const Eigen::Matrix3d e = stereo::skew(g.translation) * g.rotation;
    Eigen::Matrix3d f = g.k2.inverse().transpose() * e * g.k1.inverse();
    g.fundamental = f / f.norm();
    return g;
  }

  // Ground-truth angle series for a triple, sampled at rate_hz on the clock
  // timeline over the overlap of both recordings.
  kin::Series gt_angle_series(const kin::JointTriple& triple, double rate_hz = 100.0) const {
    kin::Series series;
    const double start_tau = spec_.clock_offset_ms / 1000.0;
    const double end_tau = spec_.duration_s;
    const std::int64_t step_ms = static_cast<std::int64_t>(std::llround(1000.0 / rate_hz));
    for (std::int64_t ms = static_cast<std::int64_t>(std::llround(start_tau * 1000.0));
         ms <= static_cast<std::int64_t>(std::llround(end_tau * 1000.0)); ms += step_ms) {
      const double tau = static_cast<double>(ms) / 1000.0;
      const auto angle = kin::joint_angle(skeleton133(tau), triple);
      if (!angle) continue;
      series.t_ms.push_back(spec_.clock_origin_ms + ms);
      series.value.push_back(*angle);
    }
    return series;
  }

  // Actor joints in the 133-slot layout (first 17 valid).
  std::vector<Joint3D> skeleton133(double tau) const {
    std::vector<Joint3D> out(static_cast<std::size_t>(spec_.joint_count));
    const auto joints = actor_.joints(tau);
    for (std::size_t i = 0; i < joints.size() && i < out.size(); ++i) {
      out[i].x = joints[i].x();
      out[i].y = joints[i].y();
      out[i].z = joints[i].z();
      out[i].valid = true;
    }
    return out;
  }

  GeneratedScene generate() const {
    GeneratedScene scene;
    scene.geometry = geometry();
    detail::Rng rng(spec_.seed);
    scene.a = generate_video("a", spec_.cam_a, 0.0, rng);
    scene.b = generate_video("b", spec_.cam_b, spec_.clock_offset_ms / 1000.0, rng);
    for (const auto* video : {&scene.a, &scene.b}) {
      for (std::int64_t i = 0; i < video->poses.frame_count(); ++i) {
        nlohmann::ordered_json ts_reply;
        ts_reply["video"] = video->id;
        ts_reply["frame"] = i;
        ts_reply["detected"] = true;
        ts_reply["timestamp"] =
            agent::format_clock_string(video->true_timestamp_ms[static_cast<std::size_t>(i)]);
        ts_reply["note"] = "synthetic clock";
        scene.fixtures.add(agent::QueryKind::timestamp, video->id, i, ts_reply.dump());

        nlohmann::ordered_json tg_reply;
        tg_reply["frame"] = i;
        tg_reply["index"] = video->actor_slot[static_cast<std::size_t>(i)];
        scene.fixtures.add(agent::QueryKind::target, video->id, i, tg_reply.dump());
      }
    }
    return scene;
  }

  void write(const std::string& dir) const;

 private:
  static ActorModel make_actor(const SceneSpec& spec) {
    return ActorModel(spec.gait_hz, spec.knee_min_deg, spec.knee_max_deg);
  }

  GeneratedVideo generate_video(const std::string& id, const CameraSpec& cam, double start_tau,
                                detail::Rng& rng) const {
    GeneratedVideo video;
    video.id = id;
    const auto frame_total = static_cast<std::int64_t>(std::llround(spec_.duration_s * cam.fps));

    // Source frames first (a duplicated output frame is a byte-identical
    // repeat, noise included), then the output mapping.
    std::vector<std::int64_t> source_of(static_cast<std::size_t>(frame_total));
    std::int64_t src = 0;
    for (std::int64_t i = 0; i < frame_total; ++i) {
      const bool dup = i > 0 && std::find(cam.dup_frames.begin(), cam.dup_frames.end(), i) !=
                                    cam.dup_frames.end();
      if (i > 0 && !dup) ++src;
      source_of[static_cast<std::size_t>(i)] = src;
    }
    const std::int64_t n_sources = src + 1;

    const Eigen::Matrix3d k = camera_k(cam);
    const Eigen::Matrix3d r = camera_rotation(cam);
    const Eigen::Vector3d center = camera_center(cam);
    const auto distractors = distractor_models();

    struct SourceFrame {
      std::vector<PersonPose> persons;
      int actor_slot = -1;
      std::int64_t ts = 0;
    };
    std::vector<SourceFrame> sources(static_cast<std::size_t>(n_sources));

    for (std::int64_t sidx = 0; sidx < n_sources; ++sidx) {
      const double tau = start_tau + static_cast<double>(sidx) / cam.fps;
      SourceFrame& sf = sources[static_cast<std::size_t>(sidx)];
      sf.ts = spec_.clock_origin_ms + round_half_even(tau * 1000.0);

      struct Candidate {
        PersonPose pose;
        double cx = 0.0;
        bool is_actor = false;
        int visible = 0;
      };
      std::vector<Candidate> candidates;
      auto add_person = [&](const std::vector<Eigen::Vector3d>& joints, bool is_actor) {
        Candidate cand;
        cand.is_actor = is_actor;
        cand.pose.joints.assign(static_cast<std::size_t>(spec_.joint_count), Keypoint{});
        double wsum = 0.0, xsum = 0.0;
        for (std::size_t j = 0; j < cand.pose.joints.size(); ++j) {
          Keypoint& kp = cand.pose.joints[j];
          if (j < joints.size()) {
            const Eigen::Vector3d pc = r * (joints[j] - center);
            if (pc.z() <= 0.1) {
              kp = {0.0, 0.0, 0.0};
              continue;
            }
            double u = k(0, 0) * pc.x() / pc.z() + k(0, 2);
            double v = k(1, 1) * pc.y() / pc.z() + k(1, 2);
            if (spec_.noise_px > 0.0) {
              u += spec_.noise_px * rng.gauss();
              v += spec_.noise_px * rng.gauss();
            }
            bool outlier = false;
            if (spec_.outlier_fraction > 0.0 && rng.uniform() < spec_.outlier_fraction) {
              u = rng.uniform() * cam.width;
              v = rng.uniform() * cam.height;
              outlier = true;
            }
            const bool inside = u >= 0.0 && u < cam.width && v >= 0.0 && v < cam.height;
            kp.x = u;
            kp.y = v;
            kp.confidence = (inside || outlier) ? 0.99 : 0.2;
            if (kp.confidence >= 0.98) {
              ++cand.visible;
              wsum += kp.confidence;
              xsum += kp.confidence * u;
            }
          } else {
            // Filler slots of the whole-body layout: low confidence, parked
            // near the body with a bit of jitter.
            const Eigen::Vector3d pc = r * (joints[0] - center);
            const double u = k(0, 0) * pc.x() / pc.z() + k(0, 2) + 20.0 * (rng.uniform() - 0.5);
            const double v = k(1, 1) * pc.y() / pc.z() + k(1, 2) + 20.0 * (rng.uniform() - 0.5);
            kp = {u, v, 0.3};
          }
        }
        cand.cx = wsum > 0.0 ? xsum / wsum : 0.0;
        if (cand.visible >= 6) candidates.push_back(std::move(cand));
      };

      add_person(actor_.joints(tau), true);
      for (const auto& d : distractors) add_person(d.joints(tau), false);

      // Detector-like ordering: left to right in the image, so indices swap
      // when trajectories cross.
      std::sort(candidates.begin(), candidates.end(),
                [](const Candidate& a, const Candidate& b) { return a.cx < b.cx; });
      for (std::size_t n = 0; n < candidates.size(); ++n) {
        if (candidates[n].is_actor) sf.actor_slot = static_cast<int>(n);
        sf.persons.push_back(std::move(candidates[n].pose));
      }
    }

    std::vector<PoseFrame> frames;
    for (std::int64_t i = 0; i < frame_total; ++i) {
      const auto& sf = sources[static_cast<std::size_t>(source_of[static_cast<std::size_t>(i)])];
      PoseFrame pf;
      pf.frame_index = i;
      pf.persons = sf.persons;
      frames.push_back(std::move(pf));
      video.true_timestamp_ms.push_back(sf.ts);
      video.actor_slot.push_back(sf.actor_slot);
    }
    video.poses = PoseTensor::from_frames(std::move(frames), spec_.joint_count);
    return video;
  }

  SceneSpec spec_;
  ActorModel actor_;
};

// --------------------------------------------------------------------------
// Fixture directory writer.

inline void Scene::write(const std::string& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "gt");
  const GeneratedScene scene = generate();

  save_pose_jsonl(scene.a.poses, (fs::path(dir) / "poses_a.jsonl").string());
  save_pose_jsonl(scene.b.poses, (fs::path(dir) / "poses_b.jsonl").string());

  {
    std::ofstream out((fs::path(dir) / "agent_fixtures.jsonl").string(), std::ios::binary);
    for (const auto* video : {&scene.a, &scene.b}) {
      for (std::int64_t i = 0; i < video->poses.frame_count(); ++i) {
        nlohmann::ordered_json ts;
        ts["kind"] = "timestamp";
        ts["video"] = video->id;
        ts["frame"] = i;
        ts["reply"] = {
            {"video", video->id},
            {"frame", i},
            {"detected", true},
            {"timestamp",
             agent::format_clock_string(video->true_timestamp_ms[static_cast<std::size_t>(i)])},
            {"note", "synthetic clock"}};
        out << ts.dump() << '\n';
        nlohmann::ordered_json tg;
        tg["kind"] = "target";
        tg["video"] = video->id;
        tg["frame"] = i;
        tg["reply"] = {{"frame", i}, {"index", video->actor_slot[static_cast<std::size_t>(i)]}};
        out << tg.dump() << '\n';
      }
    }
  }

  for (const auto* video : {&scene.a, &scene.b}) {
    nlohmann::ordered_json j;
    j["video"] = video->id;
    auto arr = nlohmann::ordered_json::array();
    for (std::int64_t i = 0; i < video->poses.frame_count(); ++i)
      arr.push_back({{"frame", i},
                     {"timestamp_ms", video->true_timestamp_ms[static_cast<std::size_t>(i)]},
                     {"index", video->actor_slot[static_cast<std::size_t>(i)]}});
    j["frames"] = std::move(arr);
    std::ofstream out((fs::path(dir) / "gt" / ("gt_track_" + video->id + ".json")).string(),
                      std::ios::binary);
    out << j.dump(2) << '\n';
  }

  for (const auto& triple : default_triples()) {
    const auto series = gt_angle_series(triple);
    std::ofstream out(
        (fs::path(dir) / "gt" / ("gt_angles_" + triple.name + ".csv")).string(), std::ios::binary);
    out << "timestamp_ms,angle_deg\n";
    char buf[64];
    for (std::size_t i = 0; i < series.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%lld,%.9f\n", static_cast<long long>(series.t_ms[i]),
                    series.value[i]);
      out << buf;
    }
  }

  {
    const auto& g = scene.geometry;
    nlohmann::ordered_json j;
    auto mat = [](const Eigen::Matrix3d& m) {
      auto rows = nlohmann::ordered_json::array();
      for (int r = 0; r < 3; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2)});
      return rows;
    };
    j["k1"] = mat(g.k1);
    j["k2"] = mat(g.k2);
    j["rotation"] = mat(g.rotation);
    j["translation"] = {g.translation.x(), g.translation.y(), g.translation.z()};
    j["fundamental"] = mat(g.fundamental);
    std::ofstream out((fs::path(dir) / "gt" / "geometry.json").string(), std::ios::binary);
    out << j.dump(2) << '\n';
  }
}

}  // namespace kinelift::synth
