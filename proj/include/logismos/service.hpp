#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "logismos/pipeline.hpp"

namespace logismos {

using json = nlohmann::json;

inline std::string base64_encode(const std::uint8_t* data, std::size_t n) {
  static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (std::size_t i = 0; i < n; i += 3) {
    const std::uint32_t b = (data[i] << 16) | (i + 1 < n ? data[i + 1] << 8 : 0) | (i + 2 < n ? data[i + 2] : 0);
    out += tbl[(b >> 18) & 63];
    out += tbl[(b >> 12) & 63];
    out += i + 1 < n ? tbl[(b >> 6) & 63] : '=';
    out += i + 2 < n ? tbl[b & 63] : '=';
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<std::uint8_t> out;
  std::uint32_t buf = 0;
  int bits = 0;
  for (char c : s) {
    const int v = val(c);
    if (v < 0) continue;
    buf = (buf << 6) | v;
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((buf >> bits) & 0xff));
    }
  }
  return out;
}

/// The two in-plane axes of a slice, ascending.
inline std::array<int, 2> slice_axes(int axis) {
  if (axis == 0) return {1, 2};
  if (axis == 1) return {0, 2};
  return {0, 1};
}

/// Plane section of a triangle mesh chained into polylines. Closed loops repeat
/// their first point at the end.
inline std::vector<std::vector<Vec3>> mesh_section(const TriangleMesh& mesh, int axis, double plane) {
  using EdgeKey = std::pair<int, int>;
  auto key = [](int a, int b) { return a < b ? EdgeKey{a, b} : EdgeKey{b, a}; };
  // Vertices exactly on the plane are nudged up so every crossing is an edge interior.
  auto side = [&](int v) { return mesh.vertices[v][axis] >= plane; };
  std::map<EdgeKey, std::vector<EdgeKey>> adj;
  std::map<EdgeKey, Vec3> point;
  for (const auto& f : mesh.faces) {
    std::vector<EdgeKey> cut;
    for (int e = 0; e < 3; ++e) {
      const int a = f[e], b = f[(e + 1) % 3];
      if (side(a) == side(b)) continue;
      const EdgeKey k = key(a, b);
      cut.push_back(k);
      if (!point.count(k)) {
        const Vec3 &pa = mesh.vertices[k.first], &pb = mesh.vertices[k.second];
        Vec3 p = pa + (pb - pa) * ((plane - pa[axis]) / (pb[axis] - pa[axis]));
        p[axis] = plane;
        point[k] = p;
      }
    }
    if (cut.size() == 2) {
      adj[cut[0]].push_back(cut[1]);
      adj[cut[1]].push_back(cut[0]);
    }
  }
  std::vector<std::vector<Vec3>> lines;
  std::set<EdgeKey> used;
  auto walk = [&](EdgeKey start) {
    std::vector<Vec3> line{point[start]};
    used.insert(start);
    EdgeKey cur = start;
    for (;;) {
      std::optional<EdgeKey> next;
      for (const auto& n : adj[cur])
        if (!used.count(n)) {
          next = n;
          break;
        }
      if (!next) {
        for (const auto& n : adj[cur])
          if (n == start && line.size() > 2) line.push_back(point[start]);
        break;
      }
      used.insert(*next);
      line.push_back(point[*next]);
      cur = *next;
    }
    lines.push_back(std::move(line));
  };
  // Open chains first (from their endpoints), then closed loops.
  for (const auto& [k, n] : adj)
    if (n.size() == 1 && !used.count(k)) walk(k);
  for (const auto& [k, n] : adj)
    if (!used.count(k)) walk(k);
  return lines;
}

// ---------------------------------------------------------------------------

struct Session {
  std::string id;
  std::string volume;
  std::string mode;
  Case data;
  Segmentation seg;
  EditHistory history;
  std::vector<NudgeContour> nudges;  ///< parallel to history records
  std::unique_ptr<NodeIndexKD> kd;
  long long sequence = 0;
  JeiOptions jei;
  float lo = 0, hi = 1;
  mutable std::shared_mutex mutex;
};

/// JSON shapes shared by the endpoints.
inline json point_json(const Vec3& p) { return json::array({p.x, p.y, p.z}); }

inline Vec3 json_point(const json& j) {
  if (!j.is_array() || j.size() != 3) fail(ErrorCode::InvalidArgument, "a point must be [x, y, z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline json nudge_to_json(const NudgeContour& n) {
  json pts = json::array();
  for (const auto& p : n.points) pts.push_back(point_json(p));
  return {{"object", n.object}, {"surface", n.surface}, {"axis", n.axis}, {"slice", n.slice}, {"points", pts}};
}

inline int parse_axis(const json& j) {
  if (j.is_number_integer()) return j.get<int>();
  const std::string s = j.get<std::string>();
  if (s == "x" || s == "0") return 0;
  if (s == "y" || s == "1") return 1;
  if (s == "z" || s == "2") return 2;
  fail(ErrorCode::InvalidArgument, "slice axis must be x, y or z");
}

/// Accepts world points ("points") or slice pixel coordinates ("pixels", [u, v]).
inline NudgeContour nudge_from_json(const json& j, const VolumeGeometry& geom) {
  NudgeContour n;
  n.object = j.value("object", 0);
  n.surface = j.value("surface", 1);
  n.axis = j.contains("axis") ? parse_axis(j["axis"]) : 2;
  n.slice = j.value("slice", 0);
  if (j.contains("points"))
    for (const auto& p : j["points"]) n.points.push_back(json_point(p));
  if (j.contains("pixels")) {
    const auto ax = slice_axes(n.axis);
    for (const auto& p : j["pixels"]) {
      if (!p.is_array() || p.size() != 2) fail(ErrorCode::InvalidArgument, "a pixel must be [u, v]");
      Vec3 w;
      w[n.axis] = geom.origin[n.axis] + n.slice * geom.spacing[n.axis];
      w[ax[0]] = geom.origin[ax[0]] + p[0].get<double>() * geom.spacing[ax[0]];
      w[ax[1]] = geom.origin[ax[1]] + p[1].get<double>() * geom.spacing[ax[1]];
      n.points.push_back(w);
    }
  }
  return n;
}

class SessionManager {
 public:
  SessionManager(std::filesystem::path data_root, KeyValueConfig config)
      : root_(std::move(data_root)), config_(std::move(config)) {}

  const std::filesystem::path& root() const { return root_; }

  /// Runs the pipeline through the initial solve and registers the session.
  json create(const json& req) {
    const std::string volume = req.value("volume", "");
    require(!volume.empty(), ErrorCode::InvalidArgument, "request needs a volume name");
    require(volume.find('/') == std::string::npos && volume.find("..") == std::string::npos,
            ErrorCode::InvalidArgument, "volume names may not contain path separators");
    std::string mode_name = req.value("mode", "gradient");
    if (mode_name == "learned") mode_name = "naf+rf";
    const CostMode mode = parse_cost_mode(mode_name);
    KeyValueConfig kv = config_;
    if (req.contains("params"))
      for (const auto& [k, v] : req["params"].items()) kv.set(k, v.is_string() ? v.get<std::string>() : v.dump());

    auto s = std::make_shared<Session>();
    s->volume = volume;
    s->mode = to_string(mode);
    build(*s, kv);
    {
      std::unique_lock lock(map_mutex_);
      s->id = fresh_id();
      sessions_[s->id] = s;
    }
    persist_header(*s, kv);
    return with_summary(*s, {{"id", s->id}});
  }

  std::shared_ptr<Session> get(const std::string& id) {
    {
      std::shared_lock lock(map_mutex_);
      auto it = sessions_.find(id);
      if (it != sessions_.end()) return it->second;
    }
    return restore(id);
  }

  json slice(const std::string& id, int axis, int index) {
    auto s = get(id);
    std::shared_lock lock(s->mutex);
    return slice_json(*s, axis, index);
  }

  json nudge(const std::string& id, const json& req) {
    auto s = get(id);
    std::unique_lock lock(s->mutex);
    NudgeContour n = nudge_from_json(req, s->data.volume.geometry());
    n.session_id = s->id;
    json out = apply(*s, n);
    append_log(*s, json{{"op", "nudge"}, {"nudge", nudge_to_json(n)}});
    return out;
  }

  json undo(const std::string& id) {
    auto s = get(id);
    std::unique_lock lock(s->mutex);
    json out = undo_locked(*s);
    append_log(*s, json{{"op", "undo"}});
    return out;
  }

  json export_surfaces(const std::string& id) {
    auto s = get(id);
    std::unique_lock lock(s->mutex);
    const auto dir = session_dir(s->id) / "export";
    std::filesystem::create_directories(dir);
    json files = json::array();
    const auto& g = *s->seg.graph;
    const SurfaceSolution& sol = s->seg.flow->solution();
    audit_solution(g, sol);
    for (int k = 0; k < g.surface_count(); ++k) {
      const auto& sd = g.surfaces[k];
      const auto path = dir / truth_file(sd.object, sd.surface);
      write_obj(surface_mesh(g, sol, k), path);
      files.push_back({{"object", sd.object}, {"surface", sd.surface}, {"path", path.string()},
                       {"vertices", g.columns_of_surface(k)}});
    }
    return {{"id", s->id}, {"sequence", s->sequence}, {"files", files}};
  }

  json status(const std::string& id) {
    auto s = get(id);
    std::shared_lock lock(s->mutex);
    return with_summary(*s, {{"id", s->id}, {"volume", s->volume}, {"mode", s->mode}, {"edits", s->history.size()}});
  }

  /// Drops in-memory sessions; they are rebuilt from their logs on next use.
  void forget_all() {
    std::unique_lock lock(map_mutex_);
    sessions_.clear();
  }

  std::filesystem::path session_dir(const std::string& id) const { return root_ / "sessions" / id; }

 private:
  void build(Session& s, const KeyValueConfig& kv) {
    const PipelineConfig cfg = PipelineConfig::from_config(kv);
    s.data = load_case(root_ / "phantoms" / s.volume);
    const CostMode mode = parse_cost_mode(s.mode);
    ShapePrior prior;
    if (std::filesystem::exists(root_ / "prior" / "s0_femur.obj")) {
      prior = load_prior(root_ / "prior");
    } else {
      if (mode != CostMode::Gradient)
        fail(ErrorCode::FailedPrecondition, "learned mode needs the shape prior under " + (root_ / "prior").string());
      for (auto& m : prior.s0) {
        m = icosphere(3);
        m.clusters.assign(m.vertices.size(), 0);
      }
    }
    LearnedModels models;
    const auto mdir = root_ / "models";
    if (mode == CostMode::NafRf) {
      if (!std::filesystem::exists(mdir / "naf.lgmd"))
        fail(ErrorCode::FailedPrecondition, "missing trained NAF model " + (mdir / "naf.lgmd").string());
      if (!std::filesystem::exists(mdir / "rf_naf.lgmd"))
        fail(ErrorCode::FailedPrecondition, "missing trained RF model " + (mdir / "rf_naf.lgmd").string());
      models.naf = load_naf_model(mdir / "naf.lgmd");
      models.rf_naf = load_rf_model(mdir / "rf_naf.lgmd");
    } else if (mode == CostMode::RfOnly) {
      if (!std::filesystem::exists(mdir / "rf_only.lgmd"))
        fail(ErrorCode::FailedPrecondition, "missing trained RF model " + (mdir / "rf_only.lgmd").string());
      models.rf_only = load_rf_model(mdir / "rf_only.lgmd");
    }
    std::optional<AdaBoostModel> detector;
    if (!cfg.bypass_voi && std::filesystem::exists(mdir / "voi.lgmd")) detector = load_voi_model(mdir / "voi.lgmd");
    s.seg = segment_case(s.data, prior, mode, models, cfg, detector ? &*detector : nullptr);
    s.kd = std::make_unique<NodeIndexKD>(*s.seg.graph);
    s.jei = cfg.jei;
    const auto& d = s.data.volume.data();
    const auto [mn, mx] = std::minmax_element(d.begin(), d.end());
    s.lo = *mn;
    s.hi = *mx > *mn ? *mx : *mn + 1;
  }

  std::string fresh_id() {
    for (;;) {
      std::string id = "s" + std::to_string(++counter_);
      if (!sessions_.count(id) && !std::filesystem::exists(session_dir(id))) return id;
    }
  }

  json with_summary(const Session& s, json j) const {
    const auto& g = *s.seg.graph;
    const auto& sol = s.seg.flow->solution();
    json surfs = json::array();
    for (int k = 0; k < g.surface_count(); ++k)
      surfs.push_back({{"object", g.surfaces[k].object},
                       {"surface", g.surfaces[k].surface},
                       {"columns", g.columns_of_surface(k)},
                       {"nodes", g.columns_of_surface(k) * g.column_size()}});
    j["objective"] = sol.objective;
    j["surfaces"] = surfs;
    j["sequence"] = s.sequence;
    return j;
  }

  json contours(const Session& s, int axis, int index) const {
    const auto& geom = s.data.volume.geometry();
    const auto& g = *s.seg.graph;
    const auto& sol = s.seg.flow->solution();
    const double plane = geom.origin[axis] + index * geom.spacing[axis];
    const auto ax = slice_axes(axis);
    json out = json::array();
    for (int k = 0; k < g.surface_count(); ++k) {
      json lines = json::array();
      for (const auto& line : mesh_section(surface_mesh(g, sol, k), axis, plane)) {
        json world = json::array(), pix = json::array();
        for (const auto& p : line) {
          world.push_back(point_json(p));
          const Vec3 ix = geom.to_index(p);
          pix.push_back(json::array({ix[ax[0]], ix[ax[1]]}));
        }
        lines.push_back({{"world", world}, {"pixels", pix}});
      }
      out.push_back({{"object", g.surfaces[k].object}, {"surface", g.surfaces[k].surface}, {"polylines", lines}});
    }
    return out;
  }

  json slice_json(const Session& s, int axis, int index) const {
    const auto& geom = s.data.volume.geometry();
    if (axis < 0 || axis > 2) fail(ErrorCode::InvalidArgument, "slice axis must be x, y or z");
    if (index < 0 || index >= geom.dims[axis])
      fail(ErrorCode::OutOfRange, "slice index " + std::to_string(index) + " outside [0, " +
                                      std::to_string(geom.dims[axis] - 1) + "]");
    const auto ax = slice_axes(axis);
    const int w = geom.dims[ax[0]], h = geom.dims[ax[1]];
    std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h);
    for (int v = 0; v < h; ++v)
      for (int u = 0; u < w; ++u) {
        std::array<int, 3> ijk;
        ijk[axis] = index;
        ijk[ax[0]] = u;
        ijk[ax[1]] = v;
        const double t = (s.data.volume(ijk[0], ijk[1], ijk[2]) - s.lo) / (s.hi - s.lo);
        px[static_cast<std::size_t>(v) * w + u] = static_cast<std::uint8_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255));
      }
    const double plane = geom.origin[axis] + index * geom.spacing[axis];
    return {{"id", s.id},
            {"sequence", s.sequence},
            {"axis", axis},
            {"index", index},
            {"plane_mm", plane},
            {"width", w},
            {"height", h},
            {"spacing", {geom.spacing[ax[0]], geom.spacing[ax[1]]}},
            {"origin", point_json(geom.origin)},
            {"window", {s.lo, s.hi}},
            {"pixels", base64_encode(px.data(), px.size())},
            {"contours", contours(s, axis, index)}};
  }

  json apply(Session& s, const NudgeContour& n) {
    const double before = s.seg.flow->solution().objective;
    const auto res = apply_nudge(*s.seg.flow, *s.kd, n, s.history, s.jei, &s.data.volume.geometry());
    s.nudges.push_back(n);
    ++s.sequence;
    s.seg.solution = res.solution;
    return {{"id", s.id},
            {"sequence", s.sequence},
            {"objective", res.solution.objective},
            {"objective_delta", res.solution.objective - before},
            {"resolve_ms", res.resolve_ms},
            {"columns", res.record.columns.size()},
            {"axis", n.axis},
            {"index", n.slice},
            {"contours", contours(s, n.axis, n.slice)}};
  }

  json undo_locked(Session& s) {
    require(!s.nudges.empty(), ErrorCode::FailedPrecondition, "nothing to undo");
    const NudgeContour n = s.nudges.back();
    s.nudges.pop_back();
    s.seg.solution = logismos::undo(*s.seg.flow, s.history);
    ++s.sequence;
    return {{"id", s.id},
            {"sequence", s.sequence},
            {"objective", s.seg.solution.objective},
            {"axis", n.axis},
            {"index", n.slice},
            {"contours", contours(s, n.axis, n.slice)}};
  }

  void persist_header(const Session& s, const KeyValueConfig& kv) {
    const auto dir = session_dir(s.id);
    std::filesystem::create_directories(dir);
    KeyValueConfig h = kv;
    h.set("session.volume", s.volume);
    h.set("session.mode", s.mode);
    h.save((dir / "session.cfg").string());
    std::ofstream(dir / "edits.jsonl", std::ios::trunc);
  }

  void append_log(const Session& s, const json& entry) {
    std::ofstream out(session_dir(s.id) / "edits.jsonl", std::ios::app);
    if (!out) fail(ErrorCode::Io, "cannot append to the session log of " + s.id);
    out << entry.dump() << "\n";
  }

  /// Rebuilds a session from its header and replays its edit log.
  std::shared_ptr<Session> restore(const std::string& id) {
    std::unique_lock lock(map_mutex_);
    if (auto it = sessions_.find(id); it != sessions_.end()) return it->second;
    const auto dir = session_dir(id);
    if (id.empty() || id.find('/') != std::string::npos || !std::filesystem::exists(dir / "session.cfg"))
      fail(ErrorCode::NotFound, "unknown session '" + id + "'");
    KeyValueConfig kv = KeyValueConfig::load((dir / "session.cfg").string());
    auto s = std::make_shared<Session>();
    s->id = id;
    s->volume = kv.get_string("session.volume", "");
    s->mode = kv.get_string("session.mode", "gradient");
    build(*s, kv);
    std::ifstream in(dir / "edits.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json e = json::parse(line);
      if (e.at("op") == "nudge")
        apply(*s, nudge_from_json(e.at("nudge"), s->data.volume.geometry()));
      else
        undo_locked(*s);
    }
    sessions_[id] = s;
    return s;
  }

  std::filesystem::path root_;
  KeyValueConfig config_;
  std::shared_mutex map_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::atomic<long long> counter_{0};
};

inline int http_status(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidArgument: return 400;
    case ErrorCode::NotFound: return 404;
    case ErrorCode::FailedPrecondition: return 409;
    case ErrorCode::OutOfRange: return 416;
    case ErrorCode::NoIntersection: return 422;
    case ErrorCode::Infeasible: return 422;
    case ErrorCode::DetectionFailed: return 422;
    default: return 500;
  }
}

inline json error_json(ErrorCode code, const std::string& stage, const std::string& message) {
  return {{"code", std::string(to_string(code))}, {"stage", stage}, {"message", message}};
}

/// Wires the session endpoints onto an httplib server.
inline void register_routes(httplib::Server& srv, SessionManager& mgr) {
  auto handle = [](httplib::Response& res, const std::string& stage, auto&& fn) {
    try {
      res.set_content(fn().dump(), "application/json");
    } catch (const Error& e) {
      res.status = http_status(e.code());
      res.set_content(error_json(e.code(), e.stage().empty() ? stage : e.stage(), e.what()).dump(),
                      "application/json");
    } catch (const json::exception& e) {
      res.status = 400;
      res.set_content(error_json(ErrorCode::InvalidArgument, stage, e.what()).dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(error_json(ErrorCode::Internal, stage, e.what()).dump(), "application/json");
    }
  };
  auto body = [](const httplib::Request& req) { return req.body.empty() ? json::object() : json::parse(req.body); };

  srv.Post("/sessions", [&, handle, body](const httplib::Request& req, httplib::Response& res) {
    handle(res, "create", [&] { return mgr.create(body(req)); });
  });
  srv.Get(R"(/sessions/([^/]+)/slice)", [&, handle](const httplib::Request& req, httplib::Response& res) {
    handle(res, "slice", [&] {
      if (!req.has_param("axis") || !req.has_param("index"))
        fail(ErrorCode::InvalidArgument, "slice needs axis and index parameters");
      int index;
      try {
        index = std::stoi(req.get_param_value("index"));
      } catch (const std::exception&) {
        fail(ErrorCode::InvalidArgument, "slice index must be an integer");
      }
      return mgr.slice(req.matches[1], parse_axis(json(req.get_param_value("axis"))), index);
    });
  });
  srv.Post(R"(/sessions/([^/]+)/nudge)", [&, handle, body](const httplib::Request& req, httplib::Response& res) {
    handle(res, "nudge", [&] { return mgr.nudge(req.matches[1], body(req)); });
  });
  srv.Post(R"(/sessions/([^/]+)/undo)", [&, handle](const httplib::Request& req, httplib::Response& res) {
    handle(res, "undo", [&] { return mgr.undo(req.matches[1]); });
  });
  srv.Post(R"(/sessions/([^/]+)/export)", [&, handle](const httplib::Request& req, httplib::Response& res) {
    handle(res, "export", [&] { return mgr.export_surfaces(req.matches[1]); });
  });
  srv.Get(R"(/sessions/([^/]+)/status)", [&, handle](const httplib::Request& req, httplib::Response& res) {
    handle(res, "status", [&] { return mgr.status(req.matches[1]); });
  });
}

}  // namespace logismos
