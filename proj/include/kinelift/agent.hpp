#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kinelift/draw.hpp"
#include "kinelift/image.hpp"
#include "kinelift/types.hpp"

// Uniform interface to the multimodal agent for timestamp extraction and
// target identification. Two backends share one wire contract: each query
// posts a prompt (plus an optional image) and gets back a response body whose
// first balanced JSON object is the reply. The fixture backend replays
// recorded bodies, so the parse/validation layer is exercised identically in
// tests and against a live endpoint.

namespace kinelift::agent {

// --------------------------------------------------------------------------
// Clock strings. "HH:MM:SS.mmm" (or "MM:SS.mmm") to milliseconds since
// midnight. Anything that does not match exactly is a parse error; the caller
// records the observation as invalid rather than guessing.

inline std::int64_t parse_clock_string(const std::string& raw) {
  auto fail = [&]() -> std::int64_t { throw parse_error("bad clock string: \"" + raw + "\""); };
  std::vector<std::string> parts;
  std::string cur;
  for (char c : raw) {
    if (c == ':') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  if (parts.size() != 2 && parts.size() != 3) return fail();

  const std::string& sec_part = parts.back();
  const auto dot = sec_part.find('.');
  if (dot == std::string::npos || sec_part.size() - dot - 1 != 3) return fail();

  auto to_num = [&](const std::string& s, int max_digits) -> std::int64_t {
    if (s.empty() || s.size() > static_cast<std::size_t>(max_digits)) return fail();
    for (char c : s)
      if (!std::isdigit(static_cast<unsigned char>(c))) return fail();
    return std::stoll(s);
  };

  const std::int64_t hours = parts.size() == 3 ? to_num(parts[0], 2) : 0;
  const std::int64_t minutes = to_num(parts[parts.size() - 2], 2);
  const std::int64_t seconds = to_num(sec_part.substr(0, dot), 2);
  const std::int64_t millis = to_num(sec_part.substr(dot + 1), 3);
  if (hours > 23 || minutes > 59 || seconds > 59) return fail();
  return ((hours * 60 + minutes) * 60 + seconds) * 1000 + millis;
}

inline std::string format_clock_string(std::int64_t ms) {
  if (ms < 0 || ms >= kMillisPerDay) throw input_error("clock value out of range");
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%02lld:%02lld:%02lld.%03lld",
                static_cast<long long>(ms / 3'600'000), static_cast<long long>(ms / 60'000 % 60),
                static_cast<long long>(ms / 1000 % 60), static_cast<long long>(ms % 1000));
  return buf;
}

// --------------------------------------------------------------------------
// Queries and replies.

enum class QueryKind { timestamp, target };

struct AgentRequest {
  QueryKind kind = QueryKind::timestamp;
  std::string video_id;
  std::int64_t frame_index = 0;
  std::string prompt;
  const img::RasterImage* image = nullptr;
  bool anonymized = false;
};

struct TimestampQuery {
  std::string video_id;
  std::int64_t frame_index = 0;
  const img::RasterImage* image = nullptr;  // already preprocessed/anonymized
  bool anonymized = false;
};

struct TimestampReply {
  std::string video_id;
  std::int64_t frame_index = 0;
  bool detected = false;
  std::optional<std::string> timestamp_raw;
  std::string note;
};

struct TargetRender {
  std::int64_t frame_index = 0;
  int n_persons = 0;  // N_t at this frame, bounds the reply index
  const img::RasterImage* image = nullptr;
  bool anonymized = false;
};

struct TargetQuery {
  std::string video_id;
  std::vector<TargetRender> renders;
};

struct TargetReply {
  std::vector<std::int64_t> frames;
  std::vector<int> indices;  // one per queried frame, in [-1, N_t-1]
};

// --------------------------------------------------------------------------
// Backends.

class AgentBackend {
 public:
  virtual ~AgentBackend() = default;
  // Returns the raw response body. Throws transport_error on failures that
  // are worth retrying at a higher level.
  virtual std::string post(const AgentRequest& request) = 0;
};

// Replays recorded replies keyed by (kind, video, frame). Pure: identical
// queries yield identical bodies.
class FixtureBackend : public AgentBackend {
 public:
  FixtureBackend() = default;

  static FixtureBackend from_file(const std::string& path) {
    FixtureBackend b;
    std::ifstream in(path);
    if (!in) throw input_error("cannot open fixture file: " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw parse_error("fixture line " + std::to_string(line_no) + ": " + e.what());
      }
      const QueryKind kind =
          j.at("kind").get<std::string>() == "target" ? QueryKind::target : QueryKind::timestamp;
      b.add(kind, j.at("video").get<std::string>(), j.at("frame").get<std::int64_t>(),
            j.at("reply").dump());
    }
    return b;
  }

  void add(QueryKind kind, const std::string& video, std::int64_t frame, std::string body) {
    replies_[key(kind, video, frame)] = std::move(body);
  }

  std::string post(const AgentRequest& request) override {
    const auto it = replies_.find(key(request.kind, request.video_id, request.frame_index));
    if (it == replies_.end())
      throw transport_error("no fixture reply for " + request.video_id + " frame " +
                            std::to_string(request.frame_index));
    return it->second;
  }

 private:
  static std::string key(QueryKind kind, const std::string& video, std::int64_t frame) {
    return (kind == QueryKind::target ? "t:" : "c:") + video + ":" + std::to_string(frame);
  }
  std::map<std::string, std::string> replies_;
};

inline std::string base64_encode(const std::uint8_t* data, std::size_t len) {
  static const char* alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  for (std::size_t i = 0; i < len; i += 3) {
    std::uint32_t v = static_cast<std::uint32_t>(data[i]) << 16;
    if (i + 1 < len) v |= static_cast<std::uint32_t>(data[i + 1]) << 8;
    if (i + 2 < len) v |= data[i + 2];
    out.push_back(alphabet[(v >> 18) & 63]);
    out.push_back(alphabet[(v >> 12) & 63]);
    out.push_back(i + 1 < len ? alphabet[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < len ? alphabet[v & 63] : '=');
  }
  return out;
}

struct HttpBackendConfig {
  std::string host;             // e.g. "http://127.0.0.1:8080"
  std::string path = "/v1/query";
  std::string model = "glm-4.5v";
  std::string token_env = "KINELIFT_AGENT_TOKEN";
  std::string record_path;      // when set, replies are appended as fixtures
  int timeout_s = 60;
};

// Declared here, defined below to keep the httplib include localized.
class HttpBackend : public AgentBackend {
 public:
  explicit HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {}
  std::string post(const AgentRequest& request) override;

 private:
  void record(const AgentRequest& request, const std::string& body);
  HttpBackendConfig config_;
  std::mutex record_mutex_;
};

// --------------------------------------------------------------------------
// Reply parsing. The model often wraps its JSON in prose, so the reply is the
// first balanced {...} in the body.

inline std::optional<std::string> extract_json_object(const std::string& body) {
  const auto start = body.find('{');
  if (start == std::string::npos) return std::nullopt;
  int depth = 0;
  bool in_string = false;
  for (std::size_t i = start; i < body.size(); ++i) {
    const char c = body[i];
    if (in_string) {
      if (c == '\\') {
        ++i;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '{') ++depth;
    else if (c == '}') {
      --depth;
      if (depth == 0) return body.substr(start, i - start + 1);
    }
  }
  return std::nullopt;
}

namespace detail {

inline TimestampReply parse_timestamp_body(const std::string& body, const TimestampQuery& q) {
  const auto obj = extract_json_object(body);
  if (!obj) throw parse_error("no JSON object in reply body");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(*obj);
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(std::string("reply not valid JSON: ") + e.what());
  }
  // The prompt mandates exactly these five fields; anything extra is ignored.
  for (const char* field : {"video", "frame", "detected", "timestamp", "note"})
    if (!j.contains(field)) throw parse_error(std::string("reply missing field: ") + field);

  TimestampReply reply;
  reply.video_id = j.at("video").get<std::string>();
  reply.frame_index = j.at("frame").get<std::int64_t>();
  reply.detected = j.at("detected").get<bool>();
  if (!j.at("timestamp").is_null()) reply.timestamp_raw = j.at("timestamp").get<std::string>();
  reply.note = j.at("note").get<std::string>();

  if (reply.video_id != q.video_id || reply.frame_index != q.frame_index)
    throw parse_error("reply keyed to wrong query: " + reply.video_id + "/" +
                      std::to_string(reply.frame_index));
  if (!reply.detected && reply.timestamp_raw)
    throw parse_error("inconsistent reply: timestamp present but detected=false");
  return reply;
}

inline int parse_target_body(const std::string& body, const std::string& video,
                             std::int64_t frame, int n_persons) {
  const auto obj = extract_json_object(body);
  if (!obj) throw parse_error("no JSON object in reply body");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(*obj);
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(std::string("reply not valid JSON: ") + e.what());
  }
  if (!j.contains("frame") || !j.contains("index"))
    throw parse_error("target reply missing frame/index");
  if (j.at("frame").get<std::int64_t>() != frame)
    throw parse_error("target reply keyed to wrong frame");
  const int index = j.at("index").get<int>();
  if (index < -1 || index >= n_persons)
    throw parse_error("target index " + std::to_string(index) + " outside [-1," +
                      std::to_string(n_persons - 1) + "] for " + video + " frame " +
                      std::to_string(frame));
  return index;
}

}  // namespace detail

// --------------------------------------------------------------------------
// Prompts. Versioned text assets; the built-in strings are v1 and the
// pipeline can override them from data/prompts/.

inline const char* kTimestampPromptV1 =
    "You are a strict image analysis assistant. For each input image, you are given the "
    "corresponding video filename and frame index. Your task is to identify whether a tablet "
    "screen (e.g., an iPad) is present and to read any valid timestamp visible in the frame "
    "(preferably from the tablet display). Record the timestamp exactly as observed without "
    "guessing or completion; if no valid timestamp is visible, return null. Output only a valid "
    "JSON object containing the video filename, frame index, detection status, the extracted "
    "timestamp value (or null), and a brief note explaining the decision.";

inline const char* kTargetPromptV1 =
    "You are a strict image analysis assistant. The image shows all detected person poses "
    "rendered with indexed skeleton overlays and bounding boxes labeled P0, P1, and so on. "
    "Identify the primary target subject, judged by consistent appearance across the sampled "
    "frames of this video. Output only a valid JSON object with the frame index and the index "
    "of the chosen pose, or -1 if no valid target pose is present: {\"frame\": <int>, "
    "\"index\": <int>}.";

struct ClientConfig {
  std::string timestamp_prompt = kTimestampPromptV1;
  std::string target_prompt = kTargetPromptV1;
  int max_concurrency = 4;
};

// --------------------------------------------------------------------------
// Client: prompt assembly, one retry on malformed payloads, validation.

class AgentClient {
 public:
  AgentClient(AgentBackend& backend, ClientConfig config = {})
      : backend_(&backend), config_(std::move(config)) {}

  TimestampReply query_timestamp(const TimestampQuery& q) const {
    AgentRequest request;
    request.kind = QueryKind::timestamp;
    request.video_id = q.video_id;
    request.frame_index = q.frame_index;
    request.image = q.image;
    request.anonymized = q.anonymized;
    request.prompt = config_.timestamp_prompt + "\nVideo filename: " + q.video_id +
                     "\nFrame index: " + std::to_string(q.frame_index);

    std::string body = backend_->post(request);
    try {
      return detail::parse_timestamp_body(body, q);
    } catch (const parse_error&) {
      // One automatic re-query, then give up with the raw payload attached.
      body = backend_->post(request);
      try {
        return detail::parse_timestamp_body(body, q);
      } catch (const parse_error& e) {
        throw protocol_error(std::string("malformed timestamp reply: ") + e.what(), body);
      }
    }
  }

  TargetReply query_targets(const TargetQuery& q) const {
    if (q.renders.empty()) throw input_error("query_targets: no renders");
    TargetReply reply;
    for (const auto& render : q.renders) {
      AgentRequest request;
      request.kind = QueryKind::target;
      request.video_id = q.video_id;
      request.frame_index = render.frame_index;
      request.image = render.image;
      request.anonymized = render.anonymized;
      request.prompt = config_.target_prompt + "\nVideo filename: " + q.video_id +
                       "\nFrame index: " + std::to_string(render.frame_index) +
                       "\nDetected poses: " + std::to_string(render.n_persons);

      std::string body = backend_->post(request);
      int index;
      try {
        index = detail::parse_target_body(body, q.video_id, render.frame_index, render.n_persons);
      } catch (const parse_error&) {
        body = backend_->post(request);
        try {
          index = detail::parse_target_body(body, q.video_id, render.frame_index, render.n_persons);
        } catch (const parse_error& e) {
          throw protocol_error(std::string("malformed target reply: ") + e.what(), body);
        }
      }
      reply.frames.push_back(render.frame_index);
      reply.indices.push_back(index);
    }
    return reply;
  }

  const ClientConfig& config() const { return config_; }

 private:
  AgentBackend* backend_;
  ClientConfig config_;
};

// Runs fn(frame) for a pool of frames with bounded concurrency. Results are
// keyed by frame index, never by arrival order.
template <typename F>
auto query_batch(const std::vector<std::int64_t>& frames, int max_concurrency, F&& fn)
    -> std::map<std::int64_t, decltype(fn(std::int64_t{}))> {
  std::map<std::int64_t, decltype(fn(std::int64_t{}))> results;
  const std::size_t stride = static_cast<std::size_t>(std::max(1, max_concurrency));
  for (std::size_t i = 0; i < frames.size(); i += stride) {
    const std::size_t end = std::min(frames.size(), i + stride);
    std::vector<std::future<decltype(fn(std::int64_t{}))>> inflight;
    for (std::size_t k = i; k < end; ++k)
      inflight.push_back(std::async(std::launch::async, fn, frames[k]));
    for (std::size_t k = i; k < end; ++k) results[frames[k]] = inflight[k - i].get();
  }
  return results;
}

// --------------------------------------------------------------------------
// Indexed skeleton overlays for target queries: per-person colored edges, a
// bounding box, and a "P<i>" label above it.

inline const std::vector<std::pair<int, int>>& body_skeleton_edges() {
  // COCO body subset; applies to any layout whose first 17 joints follow it.
  static const std::vector<std::pair<int, int>> edges = {
      {0, 1},   {0, 2},  {1, 3},   {2, 4},   {5, 6},   {5, 7},  {7, 9},   {6, 8},
      {8, 10},  {5, 11}, {6, 12},  {11, 12}, {11, 13}, {13, 15}, {12, 14}, {14, 16},
  };
  return edges;
}

inline img::RasterImage render_indexed_poses(const img::RasterImage& frame,
                                             const std::vector<PersonPose>& persons,
                                             double conf_threshold = 0.5) {
  img::RasterImage out = frame;
  for (std::size_t i = 0; i < persons.size(); ++i) {
    const auto& person = persons[i];
    if (person.padded) continue;
    const auto box = bbox_of(person, conf_threshold);
    if (!box) continue;
    const img::Color color = img::index_color(static_cast<int>(i));

    auto visible = [&](int j) {
      return j < static_cast<int>(person.joints.size()) &&
             person.joints[static_cast<std::size_t>(j)].confidence >= conf_threshold;
    };
    for (const auto& [a, b] : body_skeleton_edges()) {
      if (!visible(a) || !visible(b)) continue;
      const auto& ka = person.joints[static_cast<std::size_t>(a)];
      const auto& kb = person.joints[static_cast<std::size_t>(b)];
      img::draw_line(out, static_cast<int>(std::lround(ka.x)), static_cast<int>(std::lround(ka.y)),
                     static_cast<int>(std::lround(kb.x)), static_cast<int>(std::lround(kb.y)), color);
    }
    const int x0 = static_cast<int>(std::lround(box->x0));
    const int y0 = static_cast<int>(std::lround(box->y0));
    const int x1 = static_cast<int>(std::lround(box->x1));
    const int y1 = static_cast<int>(std::lround(box->y1));
    img::draw_rect(out, x0, y0, x1, y1, color);
    img::draw_text(out, x0, std::max(0, y0 - 9), "P" + std::to_string(i), color);
  }
  return out;
}

}  // namespace kinelift::agent

// --------------------------------------------------------------------------
// HTTP backend implementation.

#include <httplib.h>
#ifdef _res
#undef _res  // resolv.h macro (via httplib) clashes with Eigen kernel params
#endif

namespace kinelift::agent {

inline std::string HttpBackend::post(const AgentRequest& request) {
  if (request.image && !request.anonymized)
    throw input_error("http backend refuses frames that are not anonymized");

  nlohmann::ordered_json payload;
  payload["model"] = config_.model;
  payload["prompt"] = request.prompt;
  payload["image_b64"] =
      request.image ? base64_encode(request.image->data.data(), request.image->data.size()) : "";

  httplib::Client client(config_.host);
  client.set_connection_timeout(config_.timeout_s);
  client.set_read_timeout(config_.timeout_s);
  httplib::Headers headers;
  if (const char* token = std::getenv(config_.token_env.c_str()); token && *token)
    headers.emplace("Authorization", std::string("Bearer ") + token);

  const auto res = client.Post(config_.path, headers, payload.dump(), "application/json");
  if (!res) throw transport_error("agent endpoint unreachable: " + config_.host);
  if (res->status != 200)
    throw transport_error("agent endpoint returned status " + std::to_string(res->status));
  if (!config_.record_path.empty()) record(request, res->body);
  return res->body;
}

inline void HttpBackend::record(const AgentRequest& request, const std::string& body) {
  const auto obj = extract_json_object(body);
  if (!obj) return;  // nothing replayable
  std::lock_guard<std::mutex> lock(record_mutex_);
  std::ofstream out(config_.record_path, std::ios::app);
  nlohmann::ordered_json rec;
  rec["kind"] = request.kind == QueryKind::target ? "target" : "timestamp";
  rec["video"] = request.video_id;
  rec["frame"] = request.frame_index;
  rec["reply"] = nlohmann::json::parse(*obj);
  out << rec.dump() << '\n';
}

}  // namespace kinelift::agent
