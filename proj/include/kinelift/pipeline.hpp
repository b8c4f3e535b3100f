#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kinelift/agent.hpp"
#include "kinelift/image.hpp"
#include "kinelift/kinematics.hpp"
#include "kinelift/pose_io.hpp"
#include "kinelift/stereo.hpp"
#include "kinelift/sync.hpp"
#include "kinelift/synthgen.hpp"
#include "kinelift/track.hpp"
#include "kinelift/types.hpp"

// Pipeline orchestration: config parsing, stage sequencing (preproc -> sync
// -> track -> lift -> angles -> metrics), artifact persistence with schema
// checks, and SVG plotting. Every stage is a pure function of its on-disk
// inputs, which is what makes --resume and byte-level reproducibility work.

namespace kinelift::pipeline {

namespace fs = std::filesystem;

// --------------------------------------------------------------------------
// Configuration.

struct VideoConfig {
  std::string id;
  std::string poses_path;
  std::string frames_dir;  // optional raw frames (PPM), one per frame index
  double fps = 30.0;
};

struct PreprocConfig {
  bool enabled = false;
  int clahe_tiles = 8;
  double clahe_clip = 2.0;
  double blur_sigma = 6.0;
};

struct TrackStageConfig {
  track::TrackConfig base;
  std::int64_t anchor_stride = 300;  // one agent anchor query per this many frames
};

struct AnglesConfig {
  std::vector<kin::JointTriple> triples = synth::default_triples();
  std::int64_t max_gap_ms = 200;
};

struct PipelineConfig {
  VideoConfig video_a{.id = "a"};
  VideoConfig video_b{.id = "b"};
  std::string fixtures_path;            // fixture backend when set
  agent::HttpBackendConfig http;        // otherwise HTTP backend (host required)
  std::string face_boxes_path;          // JSONL {"frame":int,"boxes":[[x0,y0,x1,y1],..]}
  std::string output_dir = "out";
  sync::SyncConfig sync;
  TrackStageConfig track;
  stereo::LiftConfig lift;
  AnglesConfig angles;
  PreprocConfig preproc;
  std::map<std::string, std::string> references;  // triple name -> reference csv

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j, const fs::path& base_dir);
  static PipelineConfig from_file(const std::string& path);
};

namespace detail {

inline std::string resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  fs::path path(p);
  return path.is_absolute() ? path.string() : (base / path).lexically_normal().string();
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline void PipelineConfig::validate() const {
  auto need_file = [](const std::string& p, const char* what) {
    if (p.empty()) throw config_error(std::string("config: missing ") + what);
    if (!fs::exists(p)) throw config_error(std::string("config: ") + what + " not found: " + p);
  };
  need_file(video_a.poses_path, "video_a.poses");
  need_file(video_b.poses_path, "video_b.poses");
  if (video_a.id == video_b.id) throw config_error("config: video ids must differ");
  if (fixtures_path.empty() && http.host.empty())
    throw config_error("config: need either fixtures or an http host");
  if (!fixtures_path.empty()) need_file(fixtures_path, "fixtures");
  if (!face_boxes_path.empty()) need_file(face_boxes_path, "face_boxes");
  for (const auto& v : {video_a, video_b})
    if (!v.frames_dir.empty() && !fs::is_directory(v.frames_dir))
      throw config_error("config: frames_dir not a directory: " + v.frames_dir);
  for (const auto& [name, path] : references) need_file(path, ("reference for " + name).c_str());

  if (video_a.fps <= 0.0 || video_b.fps <= 0.0) throw config_error("config: fps must be positive");
  if (sync.initial_budget < 2) throw config_error("config: sync.initial_budget must be >= 2");
  if (sync.refine_budget < 0 || sync.validation_budget < 0)
    throw config_error("config: sync budgets must be non-negative");
  if (track.base.conf_threshold < 0.0 || track.base.conf_threshold > 1.0)
    throw config_error("config: track.conf_threshold outside [0,1]");
  if (track.anchor_stride < 1) throw config_error("config: track.anchor_stride must be >= 1");
  if (lift.tau_f <= 0.0) throw config_error("config: lift.tau_f must be positive");
  if (lift.ransac_iterations < 1) throw config_error("config: lift.ransac_iterations must be >= 1");
  if (lift.focal_scale <= 0.0) throw config_error("config: lift.focal_scale must be positive");
  if (lift.image_width <= 0 || lift.image_height <= 0)
    throw config_error("config: lift image size must be positive");
  if (lift.bundle.iterations < 0) throw config_error("config: bundle.iterations must be >= 0");
  if (angles.max_gap_ms <= 0) throw config_error("config: angles.max_gap_ms must be positive");
  for (const auto& t : angles.triples) {
    if (t.proximal == t.vertex || t.vertex == t.distal || t.proximal == t.distal)
      throw config_error("config: triple " + t.name + " must use three distinct joints");
  }
  if (preproc.enabled && (preproc.clahe_tiles < 1 || preproc.clahe_clip <= 0.0 ||
                          preproc.blur_sigma <= 0.0))
    throw config_error("config: bad preproc parameters");
}

inline nlohmann::ordered_json PipelineConfig::to_json() const {
  nlohmann::ordered_json j;
  auto video = [](const VideoConfig& v) {
    return nlohmann::ordered_json{
        {"id", v.id}, {"poses", v.poses_path}, {"frames_dir", v.frames_dir}, {"fps", v.fps}};
  };
  j["video_a"] = video(video_a);
  j["video_b"] = video(video_b);
  j["fixtures"] = fixtures_path;
  j["http"] = {{"host", http.host}, {"path", http.path}, {"model", http.model},
               {"token_env", http.token_env}, {"record_path", http.record_path}};
  j["face_boxes"] = face_boxes_path;
  j["output_dir"] = output_dir;
  j["sync"] = {{"initial_budget", sync.initial_budget},
               {"refine_budget", sync.refine_budget},
               {"validation_budget", sync.validation_budget},
               {"tol_ms", sync.tol_ms},
               {"validation_tolerance_ms", sync.validation_tolerance_ms},
               {"seed", sync.seed},
               {"max_concurrency", sync.max_concurrency}};
  j["track"] = {{"conf_threshold", track.base.conf_threshold},
                {"min_valid_joints", track.base.min_valid_joints},
                {"iou_gate", track.base.iou_gate},
                {"warmup_length", track.base.warmup_length},
                {"anchor_stride", track.anchor_stride}};
  j["lift"] = {{"conf_threshold", lift.conf_threshold},
               {"tau_f", lift.tau_f},
               {"ransac_iterations", lift.ransac_iterations},
               {"seed", lift.seed},
               {"focal_scale", lift.focal_scale},
               {"image_width", lift.image_width},
               {"image_height", lift.image_height},
               {"quality_gate_min_px", lift.quality_gate_min_px},
               {"quality_gate_scale", lift.quality_gate_scale},
               {"bundle",
                {{"lambda_rep", lift.bundle.lambda_rep},
                 {"lambda_epi", lift.bundle.lambda_epi},
                 {"step", lift.bundle.step},
                 {"iterations", lift.bundle.iterations},
                 {"huber_px", lift.bundle.huber_px}}}};
  auto triples = nlohmann::ordered_json::array();
  for (const auto& t : angles.triples)
    triples.push_back({{"name", t.name}, {"proximal", t.proximal}, {"vertex", t.vertex},
                       {"distal", t.distal}});
  j["angles"] = {{"triples", std::move(triples)}, {"max_gap_ms", angles.max_gap_ms}};
  j["preproc"] = {{"enabled", preproc.enabled},
                  {"clahe_tiles", preproc.clahe_tiles},
                  {"clahe_clip", preproc.clahe_clip},
                  {"blur_sigma", preproc.blur_sigma}};
  j["references"] = references;
  return j;
}

inline PipelineConfig PipelineConfig::from_json(const nlohmann::json& j, const fs::path& base_dir) {
  PipelineConfig c;
  auto video = [&](const nlohmann::json& vj, VideoConfig& v) {
    detail::maybe(vj, "id", v.id);
    std::string poses, frames;
    detail::maybe(vj, "poses", poses);
    detail::maybe(vj, "frames_dir", frames);
    v.poses_path = detail::resolve(base_dir, poses);
    v.frames_dir = detail::resolve(base_dir, frames);
    detail::maybe(vj, "fps", v.fps);
  };
  if (j.contains("video_a")) video(j.at("video_a"), c.video_a);
  if (j.contains("video_b")) video(j.at("video_b"), c.video_b);
  std::string fixtures, face_boxes, output_dir = c.output_dir;
  detail::maybe(j, "fixtures", fixtures);
  detail::maybe(j, "face_boxes", face_boxes);
  detail::maybe(j, "output_dir", output_dir);
  c.fixtures_path = detail::resolve(base_dir, fixtures);
  c.face_boxes_path = detail::resolve(base_dir, face_boxes);
  c.output_dir = detail::resolve(base_dir, output_dir);
  if (j.contains("http")) {
    const auto& h = j.at("http");
    detail::maybe(h, "host", c.http.host);
    detail::maybe(h, "path", c.http.path);
    detail::maybe(h, "model", c.http.model);
    detail::maybe(h, "token_env", c.http.token_env);
    std::string record;
    detail::maybe(h, "record_path", record);
    c.http.record_path = detail::resolve(base_dir, record);
  }
  if (j.contains("sync")) {
    const auto& s = j.at("sync");
    detail::maybe(s, "initial_budget", c.sync.initial_budget);
    detail::maybe(s, "refine_budget", c.sync.refine_budget);
    detail::maybe(s, "validation_budget", c.sync.validation_budget);
    detail::maybe(s, "tol_ms", c.sync.tol_ms);
    detail::maybe(s, "validation_tolerance_ms", c.sync.validation_tolerance_ms);
    detail::maybe(s, "seed", c.sync.seed);
    detail::maybe(s, "max_concurrency", c.sync.max_concurrency);
  }
  if (j.contains("track")) {
    const auto& t = j.at("track");
    detail::maybe(t, "conf_threshold", c.track.base.conf_threshold);
    detail::maybe(t, "min_valid_joints", c.track.base.min_valid_joints);
    detail::maybe(t, "iou_gate", c.track.base.iou_gate);
    detail::maybe(t, "warmup_length", c.track.base.warmup_length);
    detail::maybe(t, "anchor_stride", c.track.anchor_stride);
  }
  if (j.contains("lift")) {
    const auto& l = j.at("lift");
    detail::maybe(l, "conf_threshold", c.lift.conf_threshold);
    detail::maybe(l, "tau_f", c.lift.tau_f);
    detail::maybe(l, "ransac_iterations", c.lift.ransac_iterations);
    detail::maybe(l, "seed", c.lift.seed);
    detail::maybe(l, "focal_scale", c.lift.focal_scale);
    detail::maybe(l, "image_width", c.lift.image_width);
    detail::maybe(l, "image_height", c.lift.image_height);
    detail::maybe(l, "quality_gate_min_px", c.lift.quality_gate_min_px);
    detail::maybe(l, "quality_gate_scale", c.lift.quality_gate_scale);
    if (l.contains("bundle")) {
      const auto& b = l.at("bundle");
      detail::maybe(b, "lambda_rep", c.lift.bundle.lambda_rep);
      detail::maybe(b, "lambda_epi", c.lift.bundle.lambda_epi);
      detail::maybe(b, "step", c.lift.bundle.step);
      detail::maybe(b, "iterations", c.lift.bundle.iterations);
      detail::maybe(b, "huber_px", c.lift.bundle.huber_px);
    }
  }
  if (j.contains("angles")) {
    const auto& a = j.at("angles");
    if (a.contains("triples")) {
      c.angles.triples.clear();
      for (const auto& tj : a.at("triples"))
        c.angles.triples.push_back({tj.at("name").get<std::string>(), tj.at("proximal").get<int>(),
                                    tj.at("vertex").get<int>(), tj.at("distal").get<int>()});
    }
    detail::maybe(a, "max_gap_ms", c.angles.max_gap_ms);
  }
  if (j.contains("preproc")) {
    const auto& p = j.at("preproc");
    detail::maybe(p, "enabled", c.preproc.enabled);
    detail::maybe(p, "clahe_tiles", c.preproc.clahe_tiles);
    detail::maybe(p, "clahe_clip", c.preproc.clahe_clip);
    detail::maybe(p, "blur_sigma", c.preproc.blur_sigma);
  }
  if (j.contains("references"))
    for (const auto& [name, path] : j.at("references").items())
      c.references[name] = detail::resolve(base_dir, path.get<std::string>());
  return c;
}

inline PipelineConfig PipelineConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("config parse: ") + e.what());
  }
  return from_json(j, fs::path(path).parent_path());
}

// Dotted-path overrides for `--set sync.seed=5`.
inline void apply_override(nlohmann::json& j, const std::string& key, const std::string& value) {
  nlohmann::json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (dot == std::string::npos) {
      try {
        (*node)[part] = nlohmann::json::parse(value);
      } catch (const nlohmann::json::exception&) {
        (*node)[part] = value;  // bare strings
      }
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

// --------------------------------------------------------------------------
// Minimal structural schema validation (type/required/properties/items).

inline void validate_schema(const nlohmann::json& value, const nlohmann::json& schema,
                            const std::string& where = "$") {
  if (schema.contains("type")) {
    const std::string type = schema.at("type").get<std::string>();
    const bool ok = (type == "object" && value.is_object()) ||
                    (type == "array" && value.is_array()) ||
                    (type == "string" && value.is_string()) ||
                    (type == "number" && value.is_number()) ||
                    (type == "integer" && value.is_number_integer()) ||
                    (type == "boolean" && value.is_boolean()) || (type == "null" && value.is_null());
    if (!ok) throw schema_error("schema: " + where + " is not a " + type);
  }
  if (schema.contains("required"))
    for (const auto& key : schema.at("required"))
      if (!value.contains(key.get<std::string>()))
        throw schema_error("schema: " + where + " missing required key " + key.get<std::string>());
  if (schema.contains("properties") && value.is_object())
    for (const auto& [key, sub] : schema.at("properties").items())
      if (value.contains(key)) validate_schema(value.at(key), sub, where + "." + key);
  if (schema.contains("items") && value.is_array()) {
    std::size_t i = 0;
    for (const auto& item : value)
      validate_schema(item, schema.at("items"), where + "[" + std::to_string(i++) + "]");
  }
}

// Embedded artifact schemas; data/schemas/ ships the same content (a test
// pins the two together).
inline const std::map<std::string, const char*>& artifact_schemas() {
  static const std::map<std::string, const char*> schemas = {
      {"sync",
       R"({"type":"object","required":["videos","pairing"],"properties":{"videos":{"type":"object"},"pairing":{"type":"array","items":{"type":"object","required":["frame_a","frame_b","abs_dt_ms","matched"]}}}})"},
      {"track",
       R"({"type":"object","required":["video","frames"],"properties":{"video":{"type":"string"},"frames":{"type":"array","items":{"type":"object","required":["frame","index","status"]}}}})"},
      {"geometry",
       R"({"type":"object","required":["fundamental","k1","k2","rotation","translation","inlier_count","correspondences","loss_trace"],"properties":{"fundamental":{"type":"array"},"translation":{"type":"array"},"inlier_count":{"type":"integer"},"loss_trace":{"type":"array"}}})"},
      {"joints3d_line",
       R"({"type":"object","required":["frame_pair","timestamp_ms","joints"],"properties":{"frame_pair":{"type":"array"},"timestamp_ms":{"type":"integer"},"joints":{"type":"array","items":{"type":"array"}}}})"},
      {"metrics",
       R"({"type":"object","required":["triples"],"properties":{"triples":{"type":"array","items":{"type":"object","required":["name","mae_deg","pearson_r","range_est","range_ref","n_compared"]}}}})"},
  };
  return schemas;
}

inline void validate_artifact(const nlohmann::json& value, const std::string& schema_name) {
  validate_schema(value, nlohmann::json::parse(artifact_schemas().at(schema_name)));
}

// --------------------------------------------------------------------------
// Artifact I/O.

struct SyncArtifact {
  std::vector<FrameClock> clocks_a, clocks_b;
  sync::Pairing pairing;
};

inline void write_sync_artifact(const std::string& path, const sync::VideoSync& a,
                                const sync::VideoSync& b, const sync::Pairing& pairing,
                                double fps_a, double fps_b) {
  nlohmann::ordered_json j;
  auto video_json = [](const sync::VideoSync& v, double fps) {
    nlohmann::ordered_json vj;
    vj["fps"] = fps;
    vj["frame_count"] = static_cast<std::int64_t>(v.clocks.size());
    vj["stable_region"] = {v.drift.stable_begin, v.drift.stable_end};
    vj["queries"] = v.queries;
    auto clocks = nlohmann::ordered_json::array();
    for (const auto& c : v.clocks)
      clocks.push_back({{"frame", c.frame_index},
                        {"timestamp_ms", c.timestamp_ms ? nlohmann::json(*c.timestamp_ms)
                                                        : nlohmann::json(nullptr)},
                        {"source", to_string(c.source)}});
    vj["clocks"] = std::move(clocks);
    nlohmann::ordered_json val;
    val["passed"] = v.validation.passed;
    val["max_abs_error_ms"] = v.validation.max_abs_error_ms;
    val["tolerance_ms"] = v.validation.tolerance_ms;
    auto samples = nlohmann::ordered_json::array();
    for (const auto& s : v.validation.samples)
      samples.push_back({{"frame", s.frame_index},
                         {"observed_ms", s.observed_ms},
                         {"propagated_ms", s.propagated_ms},
                         {"abs_error_ms", s.abs_error_ms}});
    val["samples"] = std::move(samples);
    vj["validation"] = std::move(val);
    return vj;
  };
  j["videos"] = {{a.video_id, video_json(a, fps_a)}, {b.video_id, video_json(b, fps_b)}};
  auto pairs = nlohmann::ordered_json::array();
  for (const auto& p : pairing.pairs)
    pairs.push_back({{"frame_a", p.frame_a},
                     {"frame_b", p.frame_b},
                     {"abs_dt_ms", p.abs_dt_ms},
                     {"matched", p.matched}});
  j["pairing"] = std::move(pairs);
  j["warning"] = pairing.warning;
  validate_artifact(j, "sync");
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << '\n';
}

inline SyncArtifact load_sync_artifact(const std::string& path, const std::string& id_a,
                                       const std::string& id_b) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open sync artifact: " + path);
  nlohmann::json j;
  in >> j;
  validate_artifact(j, "sync");
  SyncArtifact art;
  auto load_clocks = [&](const std::string& id, std::vector<FrameClock>& out) {
    for (const auto& cj : j.at("videos").at(id).at("clocks")) {
      FrameClock c;
      c.video_id = id;
      c.frame_index = cj.at("frame").get<std::int64_t>();
      if (!cj.at("timestamp_ms").is_null()) c.timestamp_ms = cj.at("timestamp_ms").get<std::int64_t>();
      c.source = clock_source_from_string(cj.at("source").get<std::string>());
      out.push_back(c);
    }
  };
  load_clocks(id_a, art.clocks_a);
  load_clocks(id_b, art.clocks_b);
  for (const auto& pj : j.at("pairing")) {
    sync::FramePair p;
    p.frame_a = pj.at("frame_a").get<std::int64_t>();
    p.frame_b = pj.at("frame_b").get<std::int64_t>();
    p.abs_dt_ms = pj.at("abs_dt_ms").get<std::int64_t>();
    p.matched = pj.at("matched").get<bool>();
    art.pairing.pairs.push_back(p);
  }
  if (j.contains("warning")) art.pairing.warning = j.at("warning").get<std::string>();
  return art;
}

inline void write_track_artifact(const std::string& path, const std::string& video_id,
                                 const track::TrackResult& result) {
  nlohmann::ordered_json j;
  j["video"] = video_id;
  auto frames = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < result.index.size(); ++t)
    frames.push_back({{"frame", static_cast<std::int64_t>(t)},
                      {"index", result.index[t]},
                      {"status", track::to_string(result.status[t])}});
  j["frames"] = std::move(frames);
  validate_artifact(j, "track");
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << '\n';
}

inline track::TrackResult load_track_artifact(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open track artifact: " + path);
  nlohmann::json j;
  in >> j;
  validate_artifact(j, "track");
  track::TrackResult result;
  for (const auto& fj : j.at("frames")) {
    result.index.push_back(fj.at("index").get<int>());
    const std::string status = fj.at("status").get<std::string>();
    result.status.push_back(status == "anchor" ? track::FrameStatus::anchor
                            : status == "propagated" ? track::FrameStatus::propagated
                                                     : track::FrameStatus::missing);
  }
  return result;
}

inline void write_geometry_artifact(const std::string& path, const stereo::LiftResult& lift,
                                    double tau_f) {
  auto mat = [](const Eigen::Matrix3d& m) {
    auto rows = nlohmann::ordered_json::array();
    for (int r = 0; r < 3; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2)});
    return rows;
  };
  nlohmann::ordered_json j;
  j["fundamental"] = mat(lift.fundamental.f);
  j["tau_f"] = tau_f;
  j["k1"] = {{"fx", lift.cam1.fx}, {"fy", lift.cam1.fy}, {"cx", lift.cam1.cx},
             {"cy", lift.cam1.cy}, {"width", lift.cam1.width}, {"height", lift.cam1.height}};
  j["k2"] = {{"fx", lift.cam2.fx}, {"fy", lift.cam2.fy}, {"cx", lift.cam2.cx},
             {"cy", lift.cam2.cy}, {"width", lift.cam2.width}, {"height", lift.cam2.height}};
  j["essential"] = mat(lift.essential);
  j["rotation"] = mat(lift.pose.rotation);
  j["translation"] = {lift.pose.translation.x(), lift.pose.translation.y(),
                      lift.pose.translation.z()};
  j["inlier_count"] = lift.fundamental.inlier_count;
  j["correspondences"] = lift.correspondence_count;
  j["loss_trace"] = lift.loss_trace;
  validate_artifact(j, "geometry");
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << '\n';
}

inline void write_joints3d_artifact(const std::string& path,
                                    const std::vector<stereo::FrameSkeleton>& skeletons) {
  std::ofstream out(path, std::ios::binary);
  for (const auto& sk : skeletons) {
    nlohmann::ordered_json j;
    j["frame_pair"] = {sk.frame_a, sk.frame_b};
    j["timestamp_ms"] = sk.timestamp_ms;
    auto joints = nlohmann::ordered_json::array();
    for (const auto& jt : sk.joints)
      joints.push_back({jt.x, jt.y, jt.z, jt.valid ? 1 : 0});
    j["joints"] = std::move(joints);
    validate_artifact(j, "joints3d_line");
    out << j.dump() << '\n';
  }
}

inline std::vector<stereo::FrameSkeleton> load_joints3d_artifact(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open joints3d artifact: " + path);
  std::vector<stereo::FrameSkeleton> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    validate_artifact(j, "joints3d_line");
    stereo::FrameSkeleton sk;
    sk.frame_a = j.at("frame_pair")[0].get<std::int64_t>();
    sk.frame_b = j.at("frame_pair")[1].get<std::int64_t>();
    sk.timestamp_ms = j.at("timestamp_ms").get<std::int64_t>();
    for (const auto& jj : j.at("joints")) {
      Joint3D jt;
      jt.x = jj[0].get<double>();
      jt.y = jj[1].get<double>();
      jt.z = jj[2].get<double>();
      jt.valid = jj[3].get<int>() != 0;
      sk.joints.push_back(jt);
    }
    out.push_back(std::move(sk));
  }
  return out;
}

inline void write_angles_csv(const std::string& path, const kin::Series& series) {
  std::ofstream out(path, std::ios::binary);
  out << "timestamp_ms,angle_deg\n";
  char buf[64];
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%lld,%.9f\n", static_cast<long long>(series.t_ms[i]),
                  series.value[i]);
    out << buf;
  }
}

inline kin::Series load_angles_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw input_error("cannot open angle csv: " + path);
  kin::Series series;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw parse_error("angle csv: bad line: " + line);
    series.t_ms.push_back(std::stoll(line.substr(0, comma)));
    series.value.push_back(std::stod(line.substr(comma + 1)));
  }
  return series;
}

inline void write_metrics_artifact(const std::string& path,
                                   const std::vector<kin::MetricReport>& reports) {
  nlohmann::ordered_json j;
  auto triples = nlohmann::ordered_json::array();
  for (const auto& r : reports)
    triples.push_back({{"name", r.triple_name},
                       {"mae_deg", r.mae_deg},
                       {"pearson_r", r.pearson_r},
                       {"range_est", {r.range_est_min, r.range_est_max}},
                       {"range_ref", {r.range_ref_min, r.range_ref_max}},
                       {"n_compared", r.n_compared}});
  j["triples"] = std::move(triples);
  validate_artifact(j, "metrics");
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << '\n';
}

// --------------------------------------------------------------------------
// Face boxes ({"frame": int, "boxes": [[x0,y0,x1,y1], ...]} per line).

inline std::map<std::int64_t, std::vector<Box>> load_face_boxes(const std::string& path) {
  std::map<std::int64_t, std::vector<Box>> out;
  std::ifstream in(path);
  if (!in) throw input_error("cannot open face boxes: " + path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    std::vector<Box> boxes;
    for (const auto& bj : j.at("boxes"))
      boxes.push_back({bj[0].get<double>(), bj[1].get<double>(), bj[2].get<double>(),
                       bj[3].get<double>()});
    out[j.at("frame").get<std::int64_t>()] = std::move(boxes);
  }
  return out;
}

// --------------------------------------------------------------------------
// SVG plot: estimated series in black, reference in red.

inline std::string plot_svg(const kin::Series& est, const kin::Series* ref = nullptr) {
  if (est.size() == 0) throw insufficient_data_error("plot: empty series");
  const int width = 860, height = 420, ml = 60, mr = 20, mt = 20, mb = 45;

  std::int64_t t0 = est.t_ms.front(), t1 = est.t_ms.back();
  double lo = est.value[0], hi = est.value[0];
  auto absorb = [&](const kin::Series& s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      t0 = std::min(t0, s.t_ms[i]);
      t1 = std::max(t1, s.t_ms[i]);
      lo = std::min(lo, s.value[i]);
      hi = std::max(hi, s.value[i]);
    }
  };
  absorb(est);
  if (ref) absorb(*ref);
  if (t1 == t0) t1 = t0 + 1;
  if (hi - lo < 1.0) {
    hi += 0.5;
    lo -= 0.5;
  }

  const double px = width - ml - mr, py = height - mt - mb;
  auto sx = [&](std::int64_t t) {
    return ml + px * static_cast<double>(t - t0) / static_cast<double>(t1 - t0);
  };
  auto sy = [&](double v) { return mt + py * (1.0 - (v - lo) / (hi - lo)); };
  char buf[128];
  std::string svg;
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" "
                "viewBox=\"0 0 %d %d\">\n",
                width, height, width, height);
  svg += buf;
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  // Axes.
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", ml,
                height - mb, width - mr, height - mb);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", ml, mt, ml,
                height - mb);
  svg += buf;
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%.1f\" font-size=\"11\" text-anchor=\"end\">%.1f</text>\n",
                  ml - 6, sy(v) + 4.0, v);
    svg += buf;
    const std::int64_t t = t0 + (t1 - t0) * k / 4;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%d\" font-size=\"11\" text-anchor=\"middle\">%.2f</text>\n",
                  sx(t), height - mb + 16, static_cast<double>(t - t0) / 1000.0);
    svg += buf;
  }
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%d\" y=\"%d\" font-size=\"12\" text-anchor=\"middle\">time "
                "(s)</text>\n",
                ml + static_cast<int>(px / 2), height - 8);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<text x=\"14\" y=\"%d\" font-size=\"12\" text-anchor=\"middle\" "
                "transform=\"rotate(-90 14 %d)\">angle (deg)</text>\n",
                mt + static_cast<int>(py / 2), mt + static_cast<int>(py / 2));
  svg += buf;

  auto polyline = [&](const kin::Series& s, const char* color) {
    std::string pts;
    for (std::size_t i = 0; i < s.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", sx(s.t_ms[i]), sy(s.value[i]));
      pts += buf;
    }
    return "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"1.2\" points=\"" + pts + "\"/>\n";
  };
  if (ref) svg += polyline(*ref, "red");
  svg += polyline(est, "black");
  svg += "</svg>\n";
  return svg;
}

// --------------------------------------------------------------------------
// Stages. Each one reads its inputs from disk and writes one artifact set.

namespace detail {

inline std::string frame_path(const std::string& dir, std::int64_t frame) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%06lld.ppm", static_cast<long long>(frame));
  return (fs::path(dir) / buf).string();
}

inline std::unique_ptr<agent::AgentBackend> make_backend(const PipelineConfig& config) {
  if (!config.fixtures_path.empty())
    return std::make_unique<agent::FixtureBackend>(
        agent::FixtureBackend::from_file(config.fixtures_path));
  return std::make_unique<agent::HttpBackend>(config.http);
}

// Frames handed to the agent come only from the preproc output; raw frames
// never leave the machine.
inline std::function<std::optional<img::RasterImage>(std::int64_t)> preprocessed_frame_provider(
    const PipelineConfig& config, const VideoConfig& video) {
  const fs::path dir = fs::path(config.output_dir) / "preproc" / video.id;
  if (!config.preproc.enabled || video.frames_dir.empty() || !fs::is_directory(dir))
    return nullptr;
  return [dir](std::int64_t frame) -> std::optional<img::RasterImage> {
    const std::string path = frame_path(dir.string(), frame);
    if (!fs::exists(path)) return std::nullopt;
    return img::read_ppm(path);
  };
}

}  // namespace detail

inline void stage_preproc(const PipelineConfig& config) {
  if (!config.preproc.enabled) return;
  std::map<std::int64_t, std::vector<Box>> face_boxes;
  if (!config.face_boxes_path.empty()) face_boxes = load_face_boxes(config.face_boxes_path);
  for (const auto& video : {config.video_a, config.video_b}) {
    if (video.frames_dir.empty()) continue;
    const fs::path out_dir = fs::path(config.output_dir) / "preproc" / video.id;
    fs::create_directories(out_dir);
    for (const auto& entry : fs::directory_iterator(video.frames_dir)) {
      if (entry.path().extension() != ".ppm") continue;
      img::RasterImage image = img::read_ppm(entry.path().string());
      image = img::gray_world(image);
      image = img::clahe(image, config.preproc.clahe_tiles, config.preproc.clahe_tiles,
                         config.preproc.clahe_clip);
      // Frame index from "frame_%06d.ppm".
      const std::string stem = entry.path().stem().string();
      const auto us = stem.rfind('_');
      if (us != std::string::npos) {
        const std::int64_t frame = std::stoll(stem.substr(us + 1));
        const auto it = face_boxes.find(frame);
        if (it != face_boxes.end())
          image = img::blur_boxes(image, it->second, config.preproc.blur_sigma);
      }
      img::write_ppm(image, (out_dir / entry.path().filename()).string());
    }
  }
}

inline void stage_sync(const PipelineConfig& config) {
  const auto backend = detail::make_backend(config);
  agent::AgentClient client(*backend);

  auto make_source = [&](const VideoConfig& video) {
    sync::VideoSource source;
    source.video_id = video.id;
    source.frame_count = load_pose_jsonl(video.poses_path).frame_count();
    source.frame = detail::preprocessed_frame_provider(config, video);
    return source;
  };
  sync::SyncConfig sync_a = config.sync;
  sync_a.nominal_fps = config.video_a.fps;
  sync::SyncConfig sync_b = config.sync;
  sync_b.nominal_fps = config.video_b.fps;

  const auto result_a = sync::synchronize_video(client, make_source(config.video_a), sync_a);
  const auto result_b = sync::synchronize_video(client, make_source(config.video_b), sync_b);
  const auto pairing = sync::align_views(result_a.clocks, result_b.clocks);

  fs::create_directories(config.output_dir);
  write_sync_artifact((fs::path(config.output_dir) / "sync.json").string(), result_a, result_b,
                      pairing, config.video_a.fps, config.video_b.fps);
}

inline void stage_track(const PipelineConfig& config) {
  const auto backend = detail::make_backend(config);
  agent::AgentClient client(*backend);
  fs::create_directories(config.output_dir);

  auto track_one = [&](const VideoConfig& video) {
    const PoseTensor tensor = load_pose_jsonl(video.poses_path);
    const int budget = static_cast<int>(
        std::max<std::int64_t>(1, (tensor.frame_count() + config.track.anchor_stride - 1) /
                                      config.track.anchor_stride));
    const auto anchor_frames = track::sample_anchor_frames(tensor, budget, config.track.base);

    const auto frames = detail::preprocessed_frame_provider(config, video);
    agent::TargetQuery query;
    query.video_id = video.id;
    std::vector<std::optional<img::RasterImage>> renders(anchor_frames.size());
    for (std::size_t i = 0; i < anchor_frames.size(); ++i) {
      agent::TargetRender render;
      render.frame_index = anchor_frames[i];
      render.n_persons = tensor.persons_detected(static_cast<std::size_t>(anchor_frames[i]));
      if (frames) {
        auto image = frames(anchor_frames[i]);
        if (image) {
          renders[i] = agent::render_indexed_poses(
              *image, tensor.frame(static_cast<std::size_t>(anchor_frames[i])).persons,
              config.track.base.conf_threshold);
          render.image = &*renders[i];
          render.anonymized = true;
        }
      }
      query.renders.push_back(render);
    }
    const auto reply = client.query_targets(query);
    std::map<std::int64_t, int> anchors;
    for (std::size_t i = 0; i < reply.frames.size(); ++i)
      anchors[reply.frames[i]] = reply.indices[i];
    const auto result = track::track(tensor, anchors, config.track.base);
    write_track_artifact(
        (fs::path(config.output_dir) / ("track_" + video.id + ".json")).string(), video.id,
        result);
  };

  // The two views are independent; run them concurrently.
  auto fut = std::async(std::launch::async, track_one, config.video_a);
  track_one(config.video_b);
  fut.get();
}

inline void stage_lift(const PipelineConfig& config) {
  const PoseTensor poses_a = load_pose_jsonl(config.video_a.poses_path);
  const PoseTensor poses_b = load_pose_jsonl(config.video_b.poses_path);
  const auto sync_art = load_sync_artifact((fs::path(config.output_dir) / "sync.json").string(),
                                           config.video_a.id, config.video_b.id);
  const auto track_a = load_track_artifact(
      (fs::path(config.output_dir) / ("track_" + config.video_a.id + ".json")).string());
  const auto track_b = load_track_artifact(
      (fs::path(config.output_dir) / ("track_" + config.video_b.id + ".json")).string());

  const auto lift = stereo::lift_sequence(poses_a, poses_b, track_a, track_b, sync_art.pairing,
                                          sync_art.clocks_a, sync_art.clocks_b, config.lift);
  write_joints3d_artifact((fs::path(config.output_dir) / "joints3d.jsonl").string(),
                          lift.skeletons);
  write_geometry_artifact((fs::path(config.output_dir) / "geometry.json").string(), lift,
                          config.lift.tau_f);
}

inline void stage_angles(const PipelineConfig& config) {
  const auto skeletons =
      load_joints3d_artifact((fs::path(config.output_dir) / "joints3d.jsonl").string());
  for (const auto& triple : config.angles.triples) {
    kin::Series series;
    for (const auto& sk : skeletons) {
      const auto angle = kin::joint_angle(sk.joints, triple);
      if (!angle) continue;
      series.t_ms.push_back(sk.timestamp_ms);
      series.value.push_back(*angle);
    }
    write_angles_csv(
        (fs::path(config.output_dir) / ("angles_" + triple.name + ".csv")).string(), series);
  }
}

inline void stage_metrics(const PipelineConfig& config) {
  std::vector<kin::MetricReport> reports;
  for (const auto& triple : config.angles.triples) {
    const auto ref_it = config.references.find(triple.name);
    if (ref_it == config.references.end()) continue;
    const auto est = load_angles_csv(
        (fs::path(config.output_dir) / ("angles_" + triple.name + ".csv")).string());
    const auto ref = load_angles_csv(ref_it->second);
    reports.push_back(kin::compare_series(est, ref, triple.name, config.angles.max_gap_ms));
  }
  write_metrics_artifact((fs::path(config.output_dir) / "metrics.json").string(), reports);
}

// --------------------------------------------------------------------------
// Runner with stage filtering and resume.

struct RunOptions {
  std::vector<std::string> stages;  // empty = all
  bool resume = false;
};

namespace detail {

inline bool artifact_valid(const PipelineConfig& config, const std::string& stage) {
  const fs::path out(config.output_dir);
  auto json_ok = [](const fs::path& p, const std::string& schema) {
    if (!fs::exists(p)) return false;
    try {
      std::ifstream in(p);
      nlohmann::json j;
      in >> j;
      validate_artifact(j, schema);
      return true;
    } catch (...) {
      return false;
    }
  };
  if (stage == "preproc") return !config.preproc.enabled;
  if (stage == "sync") return json_ok(out / "sync.json", "sync");
  if (stage == "track")
    return json_ok(out / ("track_" + config.video_a.id + ".json"), "track") &&
           json_ok(out / ("track_" + config.video_b.id + ".json"), "track");
  if (stage == "lift")
    return fs::exists(out / "joints3d.jsonl") && json_ok(out / "geometry.json", "geometry");
  if (stage == "angles") {
    for (const auto& t : config.angles.triples)
      if (!fs::exists(out / ("angles_" + t.name + ".csv"))) return false;
    return true;
  }
  if (stage == "metrics") return json_ok(out / "metrics.json", "metrics");
  return false;
}

}  // namespace detail

inline const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> order = {"preproc", "sync",   "track",
                                                 "lift",    "angles", "metrics"};
  return order;
}

// Runs the requested stages in pipeline order. Throws error on the first
// failing stage; artifacts from completed stages stay on disk.
inline void run(const PipelineConfig& config, const RunOptions& options = {}) {
  config.validate();
  for (const auto& stage : options.stages)
    if (std::find(stage_order().begin(), stage_order().end(), stage) == stage_order().end())
      throw config_error("unknown stage: " + stage);
  fs::create_directories(config.output_dir);
  for (const auto& stage : stage_order()) {
    if (!options.stages.empty() &&
        std::find(options.stages.begin(), options.stages.end(), stage) == options.stages.end())
      continue;
    if (options.resume && detail::artifact_valid(config, stage)) continue;
    try {
      if (stage == "preproc") stage_preproc(config);
      else if (stage == "sync") stage_sync(config);
      else if (stage == "track") stage_track(config);
      else if (stage == "lift") stage_lift(config);
      else if (stage == "angles") stage_angles(config);
      else if (stage == "metrics") stage_metrics(config);
    } catch (const std::exception& e) {
      throw error("stage " + stage + ": " + e.what());
    }
  }
}

}  // namespace kinelift::pipeline
