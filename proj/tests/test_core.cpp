#include <catch2/catch.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "kinelift/pose_io.hpp"
#include "kinelift/types.hpp"

using namespace kinelift;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const auto dir = fs::temp_directory_path() / "kinelift_core_test";
  fs::create_directories(dir);
  return dir;
}

PersonPose person(std::initializer_list<Keypoint> kps) {
  PersonPose p;
  p.joints = kps;
  return p;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  for (const auto& l : lines) out << l << '\n';
}

std::string frame_line(std::int64_t frame, int persons, int joints) {
  std::string persons_json;
  for (int p = 0; p < persons; ++p) {
    std::string kps;
    for (int j = 0; j < joints; ++j) {
      kps += "[" + std::to_string(p * 10 + j) + "," + std::to_string(j) + ",0.99]";
      if (j + 1 < joints) kps += ",";
    }
    persons_json += "{\"keypoints\":[" + kps + "]}";
    if (p + 1 < persons) persons_json += ",";
  }
  return "{\"frame\":" + std::to_string(frame) + ",\"persons\":[" + persons_json + "]}";
}

}  // namespace

TEST_CASE("pose jsonl load pads to the max person count") {
  const auto path = temp_dir() / "pad.jsonl";
  write_lines(path, {frame_line(0, 2, 5), frame_line(1, 1, 5), frame_line(2, 3, 5)});
  const auto tensor = load_pose_jsonl(path.string());
  CHECK(tensor.frame_count() == 3);
  CHECK(tensor.capacity() == 3);
  CHECK(tensor.joint_count() == 5);
  CHECK(tensor.persons_detected(0) == 2);
  CHECK(tensor.persons_detected(1) == 1);
  CHECK(tensor.persons_detected(2) == 3);
  CHECK(tensor.frame(1).persons.size() == 3);
  CHECK_FALSE(tensor.frame(1).persons[0].padded);
  CHECK(tensor.frame(1).persons[1].padded);
  CHECK(tensor.frame(1).persons[2].padded);
}

TEST_CASE("empty pose file gives an empty tensor") {
  const auto path = temp_dir() / "empty.jsonl";
  write_lines(path, {});
  const auto tensor = load_pose_jsonl(path.string());
  CHECK(tensor.frame_count() == 0);
  CHECK(tensor.capacity() == 0);
}

TEST_CASE("inconsistent joint count is a schema error") {
  const auto path = temp_dir() / "badj.jsonl";
  write_lines(path, {frame_line(0, 1, 133), frame_line(1, 1, 17)});
  CHECK_THROWS_AS(load_pose_jsonl(path.string()), schema_error);
}

TEST_CASE("malformed line names its line number") {
  const auto path = temp_dir() / "badline.jsonl";
  write_lines(path, {frame_line(0, 1, 4), "{not json"});
  try {
    load_pose_jsonl(path.string());
    FAIL("expected parse_error");
  } catch (const parse_error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("load-save-load round trips non-padding content") {
  const auto path = temp_dir() / "rt.jsonl";
  write_lines(path, {frame_line(0, 2, 4), frame_line(1, 1, 4), frame_line(2, 3, 4)});
  const auto tensor = load_pose_jsonl(path.string());
  const auto path2 = temp_dir() / "rt2.jsonl";
  save_pose_jsonl(tensor, path2.string());
  const auto tensor2 = load_pose_jsonl(path2.string());

  REQUIRE(tensor2.frame_count() == tensor.frame_count());
  REQUIRE(tensor2.capacity() == tensor.capacity());
  for (std::int64_t t = 0; t < tensor.frame_count(); ++t) {
    const auto& fa = tensor.frame(static_cast<std::size_t>(t));
    const auto& fb = tensor2.frame(static_cast<std::size_t>(t));
    REQUIRE(fa.detected == fb.detected);
    for (int n = 0; n < fa.detected; ++n)
      for (std::size_t j = 0; j < fa.persons[static_cast<std::size_t>(n)].joints.size(); ++j) {
        const auto& ka = fa.persons[static_cast<std::size_t>(n)].joints[j];
        const auto& kb = fb.persons[static_cast<std::size_t>(n)].joints[j];
        CHECK(ka.x == kb.x);
        CHECK(ka.y == kb.y);
        CHECK(ka.confidence == kb.confidence);
      }
  }
}

TEST_CASE("property: capacity equals the max detected count over random frame sets") {
  std::mt19937 rng(99);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<PoseFrame> frames;
    const int T = 1 + static_cast<int>(rng() % 12);
    int expected = 0;
    for (int t = 0; t < T; ++t) {
      PoseFrame f;
      f.frame_index = t;
      const int n = static_cast<int>(rng() % 5);
      expected = std::max(expected, n);
      for (int p = 0; p < n; ++p)
        f.persons.push_back(person({{1.0 * p, 2.0 * p, 0.9}, {3.0, 4.0, 0.8}}));
      frames.push_back(std::move(f));
    }
    const auto tensor = PoseTensor::from_frames(std::move(frames), 2);
    CHECK(tensor.capacity() == expected);
    for (std::int64_t t = 0; t < tensor.frame_count(); ++t)
      CHECK(static_cast<int>(tensor.frame(static_cast<std::size_t>(t)).persons.size()) == expected);
  }
}

TEST_CASE("bbox over confident joints") {
  const auto p = person({{0, 0, 1.0}, {2, 4, 1.0}});
  const auto box = bbox_of(p, 0.98);
  REQUIRE(box);
  CHECK(box->x0 == 0.0);
  CHECK(box->y0 == 0.0);
  CHECK(box->x1 == 2.0);
  CHECK(box->y1 == 4.0);
}

TEST_CASE("bbox absent when no joint clears the threshold") {
  const auto p = person({{1, 1, 0.5}, {2, 2, 0.5}, {3, 3, 0.5}});
  CHECK_FALSE(bbox_of(p, 0.98));
}

TEST_CASE("bbox ignores low-confidence joints") {
  const auto p = person({{1, 1, 0.99}, {5, 3, 0.99}, {9, 9, 0.10}});
  const auto box = bbox_of(p, 0.98);
  REQUIRE(box);
  CHECK(box->x0 == 1.0);
  CHECK(box->y0 == 1.0);
  CHECK(box->x1 == 5.0);
  CHECK(box->y1 == 3.0);
}

TEST_CASE("property: bbox is order-invariant and monotone in the threshold") {
  std::mt19937 rng(7);
  auto uniform = [&](double lo, double hi) {
    return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
  };
  for (int rep = 0; rep < 100; ++rep) {
    PersonPose p;
    const int n = 2 + static_cast<int>(rng() % 8);
    for (int i = 0; i < n; ++i)
      p.joints.push_back({uniform(-50, 50), uniform(-50, 50), uniform(0, 1)});

    PersonPose shuffled = p;
    std::shuffle(shuffled.joints.begin(), shuffled.joints.end(), rng);
    const double thr = uniform(0, 1);
    const auto a = bbox_of(p, thr);
    const auto b = bbox_of(shuffled, thr);
    REQUIRE(a.has_value() == b.has_value());
    if (a) {
      CHECK(a->x0 == b->x0);
      CHECK(a->y1 == b->y1);
    }

    // Lowering the threshold never shrinks the box.
    const auto wide = bbox_of(p, thr * 0.5);
    if (a) {
      REQUIRE(wide);
      CHECK(wide->x0 <= a->x0);
      CHECK(wide->y0 <= a->y0);
      CHECK(wide->x1 >= a->x1);
      CHECK(wide->y1 >= a->y1);
    }
  }
}

TEST_CASE("keypoint confidence outside [0,1] rejected at load") {
  const auto path = temp_dir() / "badconf.jsonl";
  write_lines(path, {"{\"frame\":0,\"persons\":[{\"keypoints\":[[1,2,1.5]]}]}"});
  CHECK_THROWS_AS(load_pose_jsonl(path.string()), parse_error);
}

TEST_CASE("coco whole-body joint table has 133 named joints") {
  const auto names =
      load_joint_names(std::string(KINELIFT_SOURCE_DIR) + "/data/coco_wholebody_joints.json");
  REQUIRE(names.size() == 133);
  CHECK(names[0] == "nose");
  CHECK(names[13] == "left_knee");
  CHECK(names[16] == "right_ankle");
}
