#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "kinelift/types.hpp"

// Pose JSONL schema, one object per line:
//   {"frame": int, "persons": [{"keypoints": [[x,y,c], ... J entries]}]}
// Writers emit keys in exactly that order; readers accept any order.

namespace kinelift {

namespace detail {

inline PoseFrame parse_pose_line(const nlohmann::json& j, int line_no) {
  if (!j.is_object() || !j.contains("frame") || !j.contains("persons"))
    throw parse_error("pose jsonl line " + std::to_string(line_no) +
                      ": expected object with \"frame\" and \"persons\"");
  PoseFrame frame;
  frame.frame_index = j.at("frame").get<std::int64_t>();
  for (const auto& pj : j.at("persons")) {
    PersonPose person;
    for (const auto& kj : pj.at("keypoints")) {
      if (!kj.is_array() || kj.size() != 3)
        throw parse_error("pose jsonl line " + std::to_string(line_no) +
                          ": keypoint must be [x,y,c]");
      Keypoint kp{kj[0].get<double>(), kj[1].get<double>(), kj[2].get<double>()};
      if (!std::isfinite(kp.x) || !std::isfinite(kp.y))
        throw parse_error("pose jsonl line " + std::to_string(line_no) +
                          ": non-finite keypoint coordinates");
      if (kp.confidence < 0.0 || kp.confidence > 1.0)
        throw parse_error("pose jsonl line " + std::to_string(line_no) +
                          ": confidence outside [0,1]");
      person.joints.push_back(kp);
    }
    frame.persons.push_back(std::move(person));
  }
  return frame;
}

}  // namespace detail

// Loads a padded PoseTensor from a JSONL file. The joint count is taken from
// the first person seen; frames that disagree raise schema_error. An empty
// file yields T=0, N=0.
inline PoseTensor load_pose_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("cannot open pose file: " + path);

  std::vector<PoseFrame> frames;
  int joint_count = -1;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw parse_error("pose jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    PoseFrame frame = detail::parse_pose_line(j, line_no);
    for (const auto& p : frame.persons) {
      if (joint_count < 0) joint_count = static_cast<int>(p.joints.size());
      if (static_cast<int>(p.joints.size()) != joint_count)
        throw schema_error("pose jsonl line " + std::to_string(line_no) + ": person has " +
                           std::to_string(p.joints.size()) + " joints, expected " +
                           std::to_string(joint_count));
    }
    frames.push_back(std::move(frame));
  }
  if (joint_count < 0) joint_count = 0;
  return PoseTensor::from_frames(std::move(frames), joint_count);
}

// Writes the non-padding content back out. Round trips exactly with
// load_pose_jsonl on everything except padding slots.
inline void save_pose_jsonl(const PoseTensor& tensor, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw input_error("cannot open for writing: " + path);
  for (const auto& frame : tensor.frames()) {
    nlohmann::ordered_json j;
    j["frame"] = frame.frame_index;
    auto persons = nlohmann::ordered_json::array();
    for (const auto& person : frame.persons) {
      if (person.padded) continue;
      auto kps = nlohmann::ordered_json::array();
      for (const auto& kp : person.joints)
        kps.push_back({kp.x, kp.y, kp.confidence});
      persons.push_back({{"keypoints", std::move(kps)}});
    }
    j["persons"] = std::move(persons);
    out << j.dump() << '\n';
  }
}

// COCO whole-body joint-name table (data/coco_wholebody_joints.json). The
// library itself never needs names; this exists for config files and tooling.
inline std::vector<std::string> load_joint_names(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open joint table: " + path);
  nlohmann::json j;
  in >> j;
  std::vector<std::string> names;
  for (const auto& n : j.at("joints")) names.push_back(n.get<std::string>());
  return names;
}

}  // namespace kinelift
