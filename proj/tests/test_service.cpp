#include <gtest/gtest.h>

#include <thread>

#include "logismos/service.hpp"
#include "test_util.hpp"

using namespace logismos;
using nlohmann::json;

namespace {

/// Data root holding one saved phantom, plus an HTTP server on a free port.
class ServiceTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new TempDir();
    PhantomSpec spec;
    spec.seed = 5;
    spec.lesion_count = 2;
    save_case(case_from_phantom("p5", make_phantom(spec)), root_->path / "phantoms" / "p5");
  }
  static void TearDownTestSuite() {
    delete root_;
    root_ = nullptr;
  }

  void SetUp() override { start(); }
  void TearDown() override { stop(); }

  void start() {
    mgr_ = std::make_unique<SessionManager>(root_->path, KeyValueConfig{});
    srv_ = std::make_unique<httplib::Server>();
    register_routes(*srv_, *mgr_);
    port_ = srv_->bind_to_any_port("127.0.0.1");
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { srv_->listen_after_bind(); });
    srv_->wait_until_ready();
  }
  void stop() {
    if (!srv_) return;
    srv_->stop();
    thread_.join();
    srv_.reset();
    mgr_.reset();
  }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(300, 0);
    return c;
  }
  std::pair<int, json> post(const std::string& path, const json& body = json::object()) const {
    auto r = client().Post(path, body.dump(), "application/json");
    if (!r) return {0, json()};
    return {r->status, json::parse(r->body)};
  }
  std::pair<int, json> get(const std::string& path) const {
    auto r = client().Get(path);
    if (!r) return {0, json()};
    return {r->status, json::parse(r->body)};
  }

  /// Outer femur contour on slice z, pushed `shift` mm away from its centroid.
  json shifted_contour(const std::string& id, int z, double shift) const {
    const auto [st, sl] = get("/sessions/" + id + "/slice?axis=z&index=" + std::to_string(z));
    EXPECT_EQ(st, 200);
    std::vector<Vec3> pts;
    for (const auto& c : sl["contours"])
      if (c["object"] == 0 && c["surface"] == 1 && !c["polylines"].empty())
        for (const auto& p : c["polylines"][0]["world"]) pts.push_back(json_point(p));
    EXPECT_FALSE(pts.empty());
    Vec3 centre;
    for (const auto& p : pts) centre += p;
    centre /= static_cast<double>(pts.size());
    json out = json::array();
    for (std::size_t k = 0; k < pts.size(); k += 4) {
      Vec3 d = pts[k] - centre;
      d.z = 0;
      out.push_back(point_json(pts[k] + normalized(d) * shift));
    }
    return {{"object", 0}, {"surface", 1}, {"axis", "z"}, {"slice", z}, {"points", out}};
  }

  static inline TempDir* root_ = nullptr;
  std::unique_ptr<SessionManager> mgr_;
  std::unique_ptr<httplib::Server> srv_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace

TEST(ServiceUtil, Base64RoundTrip) {
  for (std::size_t n = 0; n < 20; ++n) {
    std::vector<std::uint8_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::uint8_t>(i * 37 + 11);
    const std::string e = base64_encode(v.data(), v.size());
    EXPECT_EQ(e.size(), (n + 2) / 3 * 4);
    EXPECT_EQ(base64_decode(e), v);
  }
  EXPECT_EQ(base64_encode(reinterpret_cast<const std::uint8_t*>("Man"), 3), "TWFu");
}

TEST(ServiceUtil, MeshSectionOfSphereIsACircle) {
  TriangleMesh m = icosphere(3);
  for (auto& v : m.vertices) v = v * 4.0;
  const auto lines = mesh_section(m, 2, 1.0);
  ASSERT_EQ(lines.size(), 1u);
  for (const auto& p : lines[0]) {
    EXPECT_NEAR(p.z, 1.0, 1e-12);
    EXPECT_NEAR(std::hypot(p.x, p.y), std::sqrt(15.0), 0.1);
  }
  EXPECT_TRUE(mesh_section(m, 0, 9.0).empty());
}

TEST(ServiceUtil, HttpStatusMapping) {
  EXPECT_EQ(http_status(ErrorCode::InvalidArgument), 400);
  EXPECT_EQ(http_status(ErrorCode::NotFound), 404);
  EXPECT_EQ(http_status(ErrorCode::FailedPrecondition), 409);
  EXPECT_EQ(http_status(ErrorCode::OutOfRange), 416);
  EXPECT_EQ(http_status(ErrorCode::NoIntersection), 422);
  EXPECT_EQ(http_status(ErrorCode::Internal), 500);
}

TEST_F(ServiceTest, SessionLifecycleOverHttp) {
  const auto [cs, created] = post("/sessions", {{"volume", "p5"}, {"mode", "gradient"}});
  ASSERT_EQ(cs, 200) << created.dump();
  const std::string id = created["id"];
  EXPECT_EQ(created["sequence"], 0);
  ASSERT_EQ(created["surfaces"].size(), 4u);

  const auto [ss, sl] = get("/sessions/" + id + "/slice?axis=z&index=32");
  ASSERT_EQ(ss, 200);
  EXPECT_EQ(sl["width"], 56);
  EXPECT_EQ(sl["height"], 56);
  EXPECT_EQ(base64_decode(sl["pixels"].get<std::string>()).size(), 56u * 56u);
  EXPECT_EQ(sl["contours"].size(), 4u);

  const double obj0 = created["objective"];
  const auto [n1s, n1] = post("/sessions/" + id + "/nudge", shifted_contour(id, 45, 0.6));
  ASSERT_EQ(n1s, 200) << n1.dump();
  EXPECT_EQ(n1["sequence"], 1);
  EXPECT_GT(n1["columns"].get<int>(), 0);
  EXPECT_GE(n1["resolve_ms"].get<double>(), 0.0);
  EXPECT_NEAR(n1["objective_delta"].get<double>(), n1["objective"].get<double>() - obj0, 1e-9);

  const auto [n2s, n2] = post("/sessions/" + id + "/nudge", shifted_contour(id, 41, -0.4));
  ASSERT_EQ(n2s, 200) << n2.dump();
  EXPECT_EQ(n2["sequence"], 2);

  const auto [us, u] = post("/sessions/" + id + "/undo");
  ASSERT_EQ(us, 200);
  EXPECT_EQ(u["sequence"], 3);
  EXPECT_DOUBLE_EQ(u["objective"].get<double>(), n1["objective"].get<double>());

  const auto [sts, st] = get("/sessions/" + id + "/status");
  ASSERT_EQ(sts, 200);
  EXPECT_EQ(st["sequence"], 3);
  EXPECT_EQ(st["edits"], 1);
  EXPECT_EQ(st["mode"], "gradient");

  const auto [es, ex] = post("/sessions/" + id + "/export");
  ASSERT_EQ(es, 200);
  ASSERT_EQ(ex["files"].size(), 4u);
  for (const auto& f : ex["files"]) {
    const TriangleMesh m = read_obj(f["path"].get<std::string>());
    EXPECT_EQ(static_cast<int>(m.vertices.size()), f["vertices"].get<int>());
    validate_closed_manifold(m);
  }

  // A restarted server rebuilds the session from its log.
  const json before = get("/sessions/" + id + "/slice?axis=z&index=32").second;
  stop();
  start();
  const auto [rs, restored] = get("/sessions/" + id + "/status");
  ASSERT_EQ(rs, 200) << restored.dump();
  EXPECT_EQ(restored["sequence"], 3);
  EXPECT_EQ(restored["edits"], 1);
  EXPECT_DOUBLE_EQ(restored["objective"].get<double>(), st["objective"].get<double>());
  const json after = get("/sessions/" + id + "/slice?axis=z&index=32").second;
  EXPECT_EQ(after["contours"], before["contours"]);
  // And keeps counting from where it stopped.
  const auto [n3s, n3] = post("/sessions/" + id + "/nudge", shifted_contour(id, 43, 0.5));
  ASSERT_EQ(n3s, 200);
  EXPECT_EQ(n3["sequence"], 4);
}

TEST_F(ServiceTest, ErrorResponsesCarryCodeStageAndMessage) {
  auto check = [](const std::pair<int, json>& r, int status, const std::string& code) {
    EXPECT_EQ(r.first, status) << r.second.dump();
    EXPECT_EQ(r.second.value("code", ""), code);
    EXPECT_TRUE(r.second.contains("stage"));
    EXPECT_FALSE(r.second.value("message", "").empty());
  };
  check(post("/sessions", json::object()), 400, "invalid_argument");
  check(post("/sessions", {{"volume", "missing"}}), 404, "not_found");
  check(post("/sessions", {{"volume", "../p5"}}), 400, "invalid_argument");
  check(post("/sessions", {{"volume", "p5"}, {"mode", "naf+rf"}}), 409, "failed_precondition");
  check(post("/sessions", {{"volume", "p5"}, {"mode", "bogus"}}), 400, "invalid_argument");
  check(get("/sessions/nope/status"), 404, "not_found");
  {
    auto r = client().Post("/sessions", "{not json", "application/json");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 400);
  }

  const auto [cs, created] = post("/sessions", {{"volume", "p5"}});
  ASSERT_EQ(cs, 200);
  const std::string id = created["id"];
  check(get("/sessions/" + id + "/slice?axis=z&index=999"), 416, "out_of_range");
  check(get("/sessions/" + id + "/slice?axis=w&index=3"), 400, "invalid_argument");
  check(get("/sessions/" + id + "/slice?axis=z"), 400, "invalid_argument");
  check(post("/sessions/" + id + "/undo"), 409, "failed_precondition");
  check(post("/sessions/" + id + "/nudge", {{"axis", "z"}, {"slice", 5}, {"points", {{0.5, 0.5, 3.5}}}}), 422,
        "no_intersection");
  check(post("/sessions/" + id + "/nudge", {{"axis", "z"}, {"slice", 5}, {"points", {{1, 2}}}}), 400,
        "invalid_argument");
  check(post("/sessions/" + id + "/nudge", {{"axis", "z"}, {"slice", 5}, {"surface", 7}, {"points", {{1, 2, 3.5}}}}),
        404, "not_found");
  // Failed edits leave the session untouched.
  EXPECT_EQ(get("/sessions/" + id + "/status").second["sequence"], 0);
}

TEST_F(ServiceTest, PixelCoordinatesMapOntoTheSlicePlane) {
  const VolumeGeometry g{{10, 12, 14}, {0.5, 0.6, 0.7}, {1, 2, 3}};
  const NudgeContour n = nudge_from_json({{"axis", "y"}, {"slice", 4}, {"pixels", {{2, 3}}}}, g);
  ASSERT_EQ(n.points.size(), 1u);
  EXPECT_NEAR(n.points[0].x, 1 + 2 * 0.5, 1e-12);
  EXPECT_NEAR(n.points[0].y, 2 + 4 * 0.6, 1e-12);
  EXPECT_NEAR(n.points[0].z, 3 + 3 * 0.7, 1e-12);
  EXPECT_NO_THROW(validate_nudge(n, g));
}
