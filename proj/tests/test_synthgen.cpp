#include <catch2/catch.hpp>

#include <filesystem>
#include <fstream>

#include "kinelift/synthgen.hpp"

using namespace kinelift;
using namespace kinelift::synth;

namespace {

SceneSpec small_spec() {
  SceneSpec spec;
  spec.duration_s = 4.0;
  spec.clock_offset_ms = 400.0;
  return spec;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("ground-truth angles from the skeleton match the parametric schedule") {
  const Scene scene(small_spec());
  const kin::JointTriple left_knee{"left_knee", 11, 13, 15};
  const kin::JointTriple right_knee{"right_knee", 12, 14, 16};
  double worst = 0.0;
  for (double tau = 0.0; tau <= 4.0; tau += 0.037) {
    const auto skel = scene.skeleton133(tau);
    const auto l = kin::joint_angle(skel, left_knee);
    const auto r = kin::joint_angle(skel, right_knee);
    REQUIRE(l);
    REQUIRE(r);
    worst = std::max(worst, std::abs(*l - scene.actor().knee_angle_deg(tau, true)));
    worst = std::max(worst, std::abs(*r - scene.actor().knee_angle_deg(tau, false)));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("knee schedule spans the configured range") {
  const Scene scene(small_spec());
  double lo = 1e9, hi = -1e9;
  for (double tau = 0.0; tau <= 2.0; tau += 0.001) {
    const double a = scene.actor().knee_angle_deg(tau, true);
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  CHECK(lo == Approx(60.0).margin(0.01));
  CHECK(hi == Approx(175.0).margin(0.01));
}

TEST_CASE("noise-free projections satisfy the true epipolar constraint") {
  const Scene scene(small_spec());
  const auto generated = scene.generate();
  const auto& g = generated.geometry;

  double worst = 0.0;
  int checked = 0;
  for (std::int64_t t = 0; t < generated.a.poses.frame_count(); t += 7) {
    const int slot_a = generated.a.actor_slot[static_cast<std::size_t>(t)];
    // Same capture time in b happens 400 ms = 12 frames earlier on b's index
    // axis only when frames align; just reuse matching timestamps.
    if (slot_a < 0) continue;
    const auto ts = generated.a.true_timestamp_ms[static_cast<std::size_t>(t)];
    const auto& tb = generated.b.true_timestamp_ms;
    const auto it = std::find(tb.begin(), tb.end(), ts);
    if (it == tb.end()) continue;
    const auto fb = static_cast<std::size_t>(it - tb.begin());
    const int slot_b = generated.b.actor_slot[fb];
    if (slot_b < 0) continue;

    const auto& pa = generated.a.poses.frame(static_cast<std::size_t>(t)).persons[static_cast<std::size_t>(slot_a)];
    const auto& pb = generated.b.poses.frame(fb).persons[static_cast<std::size_t>(slot_b)];
    for (int j = 0; j < 17; ++j) {
      const auto& ka = pa.joints[static_cast<std::size_t>(j)];
      const auto& kb = pb.joints[static_cast<std::size_t>(j)];
      if (ka.confidence < 0.98 || kb.confidence < 0.98) continue;
      const Eigen::Vector3d x1(ka.x, ka.y, 1.0);
      const Eigen::Vector3d x2(kb.x, kb.y, 1.0);
      worst = std::max(worst, std::abs(x2.dot(g.fundamental * x1)));
      ++checked;
    }
  }
  REQUIRE(checked > 100);
  CHECK(worst < 1e-6);  // |x2' F x1| with ||F||=1 and pixel-scale homogeneous points
}

TEST_CASE("a 400 ms offset at 30 fps shifts the clock fixtures by 12 frames") {
  const Scene scene(small_spec());
  const auto generated = scene.generate();
  CHECK(generated.b.true_timestamp_ms[0] - generated.a.true_timestamp_ms[0] == 400);
  // Frame 12 of a shows the same clock as frame 0 of b.
  CHECK(generated.a.true_timestamp_ms[12] == generated.b.true_timestamp_ms[0]);
}

TEST_CASE("duplicated frames repeat both the clock and the pose content") {
  SceneSpec spec = small_spec();
  spec.cam_a.dup_frames = {20};
  const Scene scene(spec);
  const auto generated = scene.generate();
  CHECK(generated.a.true_timestamp_ms[20] == generated.a.true_timestamp_ms[19]);
  const auto& f19 = generated.a.poses.frame(19).persons[0].joints;
  const auto& f20 = generated.a.poses.frame(20).persons[0].joints;
  REQUIRE(f19.size() == f20.size());
  for (std::size_t j = 0; j < f19.size(); ++j) {
    CHECK(f19[j].x == f20[j].x);
    CHECK(f19[j].y == f20[j].y);
  }
  // Frames after the duplication lag by exactly one source frame.
  const std::int64_t base = generated.a.true_timestamp_ms[0];
  CHECK(generated.a.true_timestamp_ms[21] == base + round_half_even(20 * 1000.0 / 30.0));
}

TEST_CASE("distractors appear as extra persons and the planted slot tracks the actor") {
  SceneSpec spec = small_spec();
  spec.distractors = 2;
  const Scene scene(spec);
  const auto generated = scene.generate();
  const auto& tensor = generated.a.poses;
  CHECK(tensor.capacity() >= 2);
  int multi_frames = 0;
  for (std::int64_t t = 0; t < tensor.frame_count(); ++t) {
    if (tensor.persons_detected(static_cast<std::size_t>(t)) >= 2) ++multi_frames;
    const int slot = generated.a.actor_slot[static_cast<std::size_t>(t)];
    REQUIRE(slot >= 0);
    REQUIRE(slot < tensor.persons_detected(static_cast<std::size_t>(t)));
  }
  CHECK(multi_frames > 0);
}

TEST_CASE("generation is byte deterministic for a fixed seed") {
  namespace fs = std::filesystem;
  const auto dir1 = fs::temp_directory_path() / "kinelift_synth_det1";
  const auto dir2 = fs::temp_directory_path() / "kinelift_synth_det2";
  fs::remove_all(dir1);
  fs::remove_all(dir2);
  SceneSpec spec = small_spec();
  spec.duration_s = 2.0;
  spec.noise_px = 1.0;
  spec.distractors = 1;
  spec.outlier_fraction = 0.01;
  Scene(spec).write(dir1.string());
  Scene(spec).write(dir2.string());

  for (const char* name : {"poses_a.jsonl", "poses_b.jsonl", "agent_fixtures.jsonl",
                           "gt/gt_track_a.json", "gt/gt_angles_left_knee.csv"}) {
    CHECK(slurp(dir1 / name) == slurp(dir2 / name));
    CHECK_FALSE(slurp(dir1 / name).empty());
  }

  SceneSpec other = spec;
  other.seed += 1;
  const auto dir3 = fs::temp_directory_path() / "kinelift_synth_det3";
  fs::remove_all(dir3);
  Scene(other).write(dir3.string());
  CHECK(slurp(dir1 / "poses_a.jsonl") != slurp(dir3 / "poses_a.jsonl"));
}

TEST_CASE("coincident camera centers are rejected") {
  SceneSpec spec = small_spec();
  spec.cam_b = spec.cam_a;
  CHECK_THROWS_AS(Scene(spec), input_error);
}
