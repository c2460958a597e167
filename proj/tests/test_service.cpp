#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <thread>

#include "parkpredict/service.hpp"
#include "parkpredict/train_eval.hpp"

using namespace parkpredict;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("parkpredict_service_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Writes an untrained (seeded) checkpoint pair under `dir/m`.
fs::path write_checkpoint(const fs::path& dir, bool cnn) {
  IntentNetConfig ic;
  ic.hidden = 8;
  TrajNetConfig tc;
  tc.hidden = 8;
  if (cnn) {
    ic.use_cnn = tc.use_cnn = true;
    ic.bev_height = ic.bev_width = tc.bev_height = tc.bev_width = 16;
  }
  IntentNet<float> intent(ic);
  intent.init(11);
  TrajNet<float> traj(tc);
  traj.init(12);
  save_intent_net(dir / "m_intent", intent, Variant::kMultimodal);
  save_traj_net(dir / "m_traj", traj, Variant::kMultimodal);
  return dir / "m";
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

json predict_body(const Demonstration& d, int n) {
  json hist = json::array();
  for (int k = 0; k < 5; ++k) {
    const auto& p = d.poses[static_cast<std::size_t>(20 + k)].pose;
    hist.push_back({p.x, p.y, p.theta});
  }
  return {{"Z_hist", hist}, {"occupancy", d.occupancy}, {"n", n}};
}

const Demonstration& demo() {
  static const Demonstration d = generate_demo(LotConfig{}, 42);
  return d;
}

}  // namespace

TEST(Base64, RoundTripsAllLengths) {
  std::mt19937_64 rng(1);
  for (std::size_t n = 0; n < 40; ++n) {
    std::vector<std::uint8_t> bytes(n);
    for (auto& b : bytes) b = static_cast<std::uint8_t>(rng());
    const auto text = base64_encode(bytes);
    EXPECT_EQ(text.size() % 4, 0u);
    EXPECT_EQ(base64_decode(text), bytes);
  }
  EXPECT_EQ(base64_encode({'M', 'a', 'n'}), "TWFu");
  EXPECT_EQ(base64_encode({'M', 'a'}), "TWE=");
  EXPECT_THROW(base64_decode("abc"), ShapeError);
  EXPECT_THROW(base64_decode("a!c="), ShapeError);
}

TEST(Service, NewLotIsSeededAndMatchesBuildLot) {
  PredictionService svc(ServiceConfig{});
  const auto a = svc.new_lot("17"), b = svc.new_lot("17");
  ASSERT_EQ(a.status, 200);
  EXPECT_EQ(a.body.at("occupancy"), b.body.at("occupancy"));
  EXPECT_NE(a.body.at("session"), b.body.at("session"));
  EXPECT_EQ(a.body.at("schema_version"), kSchemaVersion);

  const auto occ = a.body.at("occupancy").get<OccupancyMatrix>();
  EXPECT_EQ(occ.free_count(), 8);
  const auto lot = build_lot(LotConfig{});
  const auto& spots = a.body.at("spots");
  ASSERT_EQ(spots.size(), lot.size());
  for (std::size_t i = 0; i < lot.size(); ++i) {
    EXPECT_EQ(spots[i].at("id").get<int>(), lot[i].id);
    EXPECT_EQ(spots[i].at("x").get<double>(), lot[i].center.x);
    EXPECT_EQ(spots[i].at("y").get<double>(), lot[i].center.y);
    EXPECT_EQ(spots[i].at("heading").get<double>(), lot[i].heading);
  }
  EXPECT_EQ(occ, sample_free_configuration(lot, 17, 8));
  EXPECT_NE(svc.new_lot("18").body.at("occupancy"), a.body.at("occupancy"));
}

TEST(Service, MalformedSeedIs400) {
  PredictionService svc(ServiceConfig{});
  for (const char* s : {"", "-1", "abc", "12x", "1.5"}) EXPECT_EQ(svc.new_lot(std::string(s)).status, 400) << s;
  EXPECT_EQ(svc.new_lot(std::nullopt).status, 200);
}

TEST(Service, AcceptsValidDemoWithRecountedSnippets) {
  const auto dir = scratch("accept");
  ServiceConfig cfg;
  cfg.demos_out = dir / "demos.jsonl";
  PredictionService svc(cfg);
  const auto& d = demo();
  const auto r = svc.submit_demo(json(d).dump());
  ASSERT_EQ(r.status, 202) << r.body.dump();
  EXPECT_TRUE(r.body.at("accepted").get<bool>());
  EXPECT_EQ(r.body.at("snippet_count").get<std::size_t>(), build_dataset({d}, cfg.dataset).size());
  const auto l = lines(cfg.demos_out);
  ASSERT_EQ(l.size(), 1u);
  EXPECT_EQ(json::parse(l[0]).get<Demonstration>(), d);
}

TEST(Service, RejectsDemoWithoutIntentSignal) {
  const auto dir = scratch("nointent");
  ServiceConfig cfg;
  cfg.demos_out = dir / "demos.jsonl";
  PredictionService svc(cfg);
  auto d = demo();
  d.intent_time.reset();
  const auto r = svc.submit_demo(json(d).dump());
  EXPECT_EQ(r.status, 422);
  EXPECT_EQ(r.body.at("invariant"), "intent_signaled");
  EXPECT_FALSE(fs::exists(cfg.demos_out));
}

TEST(Service, RejectsDemoThroughParkedCar) {
  const auto dir = scratch("collision");
  ServiceConfig cfg;
  cfg.demos_out = dir / "demos.jsonl";
  PredictionService svc(cfg);
  auto d = demo();
  const auto lot = build_lot(d.lot);
  std::size_t occupied = 0;
  while (d.occupancy.entries[occupied].free) ++occupied;
  auto& p = d.poses[d.poses.size() / 2].pose;
  p.x = lot[occupied].center.x;
  p.y = lot[occupied].center.y;
  const auto r = svc.submit_demo(json(d).dump());
  EXPECT_EQ(r.status, 422);
  EXPECT_EQ(r.body.at("invariant"), "collision_free");
}

TEST(Service, DemoErrors) {
  const auto dir = scratch("demoerr");
  ServiceConfig cfg;
  cfg.demos_out = dir / "demos.jsonl";
  PredictionService svc(cfg);
  EXPECT_EQ(svc.submit_demo("{not json").status, 400);
  EXPECT_EQ(svc.submit_demo("{}").status, 400);

  auto d = demo();
  d.lot.spots_per_row = 10;
  d.occupancy.entries.resize(static_cast<std::size_t>(d.lot.spot_count()));
  EXPECT_EQ(svc.submit_demo(json(d).dump()).status, 422);

  json j = demo();
  j["session"] = "nope";
  EXPECT_EQ(svc.submit_demo(j.dump()).body.at("invariant"), "session");
}

TEST(Service, SessionOccupancyMustMatch) {
  const auto dir = scratch("session");
  ServiceConfig cfg;
  cfg.demos_out = dir / "demos.jsonl";
  PredictionService svc(cfg);
  const auto lot = svc.new_lot("3");
  json j = demo();
  j["session"] = lot.body.at("session");
  const auto r = svc.submit_demo(j.dump());
  EXPECT_EQ(r.status, 422);
  EXPECT_EQ(r.body.at("invariant"), "session_occupancy");

  // The generator's first layout draw is the first output of its seeded engine.
  const auto layout_seed = std::mt19937_64(42)();
  const auto sess = svc.new_lot(std::to_string(layout_seed));
  ASSERT_EQ(sess.body.at("occupancy").get<OccupancyMatrix>(), demo().occupancy);
  j["session"] = sess.body.at("session");
  EXPECT_EQ(svc.submit_demo(j.dump()).status, 202);
}

TEST(Service, RestartKeepsAcceptedDemos) {
  const auto dir = scratch("restart");
  ServiceConfig cfg;
  cfg.demos_out = dir / "demos.jsonl";
  {
    PredictionService svc(cfg);
    ASSERT_EQ(svc.submit_demo(json(demo()).dump()).status, 202);
  }
  PredictionService again(cfg);
  ASSERT_EQ(again.submit_demo(json(generate_demo(LotConfig{}, 43)).dump()).status, 202);
  const auto l = lines(cfg.demos_out);
  ASSERT_EQ(l.size(), 2u);
  EXPECT_EQ(json::parse(l[0]).get<Demonstration>(), demo());
}

TEST(Service, ConcurrentAppendsStayWholeLines) {
  const auto dir = scratch("concurrent");
  ServiceConfig cfg;
  cfg.demos_out = dir / "demos.jsonl";
  PredictionService svc(cfg);
  std::vector<std::string> bodies;
  for (int i = 0; i < 8; ++i) bodies.push_back(json(generate_demo(LotConfig{}, 300 + static_cast<std::uint64_t>(i))).dump());
  std::vector<std::thread> workers;
  for (int t = 0; t < 4; ++t)
    workers.emplace_back([&, t] {
      for (int i = t; i < 8; i += 4) EXPECT_EQ(svc.submit_demo(bodies[static_cast<std::size_t>(i)]).status, 202);
    });
  for (auto& w : workers) w.join();
  const auto l = lines(cfg.demos_out);
  ASSERT_EQ(l.size(), 8u);
  std::set<std::string> got(l.begin(), l.end()), want(bodies.begin(), bodies.end());
  EXPECT_EQ(got, want);
}

TEST(Service, PredictWithoutModelIs503) {
  PredictionService svc(ServiceConfig{});
  EXPECT_FALSE(svc.has_model());
  EXPECT_EQ(svc.predict(predict_body(demo(), 3).dump(), false).status, 503);
  EXPECT_EQ(svc.predict("[", false).status, 400);
}

TEST(Service, PredictReturnsNRolloutsAndEkfBaseline) {
  const auto dir = scratch("predict");
  ServiceConfig cfg;
  cfg.checkpoint = write_checkpoint(dir, false);
  PredictionService svc(cfg);
  ASSERT_TRUE(svc.has_model());
  EXPECT_FALSE(svc.model_needs_images());

  for (int n : {1, 3, 65}) {
    const auto r = svc.predict(predict_body(demo(), n).dump(), false);
    ASSERT_EQ(r.status, 200) << r.body.dump();
    EXPECT_EQ(r.body.at("rollouts").size(), static_cast<std::size_t>(n));
    const auto p = r.body.at("intent").get<std::vector<double>>();
    ASSERT_EQ(p.size(), 65u);
    double s = 0.0;
    for (double v : p) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
    double prev = 2.0;
    for (const auto& ro : r.body.at("rollouts")) {
      EXPECT_LE(ro.at("probability").get<double>(), prev);
      prev = ro.at("probability").get<double>();
      EXPECT_EQ(ro.at("trajectory").size(), 20u);
    }
    EXPECT_FALSE(r.body.contains("baseline"));
  }

  const auto body = predict_body(demo(), 3);
  const auto r = svc.predict(body.dump(), true);
  ASSERT_EQ(r.status, 200);
  std::vector<Pose> hist;
  for (const auto& p : body.at("Z_hist")) hist.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
  const auto want = ekf::ekf_predict(hist, 0.1, cfg.ekf_noise, 20);
  const auto& got = r.body.at("baseline").at("trajectory");
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t k = 0; k < want.size(); ++k) {
    EXPECT_EQ(got[k][0].get<double>(), want[k].x);
    EXPECT_EQ(got[k][1].get<double>(), want[k].y);
    EXPECT_EQ(got[k][2].get<double>(), want[k].theta);
  }
  EXPECT_EQ(r.body.at("baseline").at("intent").get<std::vector<double>>(), ekf::ekf_intent(want.back(), demo().occupancy));
}

TEST(Service, PredictShapeErrorsAre400) {
  const auto dir = scratch("shape");
  ServiceConfig cfg;
  cfg.checkpoint = write_checkpoint(dir, false);
  PredictionService svc(cfg);
  auto b = predict_body(demo(), 3);
  b["Z_hist"].erase(0);
  EXPECT_EQ(svc.predict(b.dump(), false).status, 400);
  b = predict_body(demo(), 3);
  b["Z_hist"][0] = {1.0, 2.0};
  EXPECT_EQ(svc.predict(b.dump(), false).status, 400);
  b = predict_body(demo(), 0);
  EXPECT_EQ(svc.predict(b.dump(), false).status, 400);
  b = predict_body(demo(), 66);
  EXPECT_EQ(svc.predict(b.dump(), false).status, 400);
  b = predict_body(demo(), 3);
  b["occupancy"].erase(0);
  EXPECT_EQ(svc.predict(b.dump(), false).status, 400);
  b.erase("occupancy");
  EXPECT_EQ(svc.predict(b.dump(), false).status, 400);
}

TEST(Service, CnnCheckpointNeedsFrames) {
  const auto dir = scratch("cnn");
  ServiceConfig cfg;
  cfg.checkpoint = write_checkpoint(dir, true);
  PredictionService svc(cfg);
  ASSERT_TRUE(svc.model_needs_images());
  auto b = predict_body(demo(), 3);
  EXPECT_EQ(svc.predict(b.dump(), false).status, 409);

  b["rasterize"] = "server";
  const auto server = svc.predict(b.dump(), false);
  ASSERT_EQ(server.status, 200) << server.body.dump();

  // Client frames rendered the same way give the same answer.
  const auto lot = build_lot(LotConfig{});
  const auto frame = make_raster_frame(LotConfig{}, 16, 16);
  json frames = json::array();
  for (const auto& p : b.at("Z_hist")) {
    const auto img = rasterize_bev(frame, LotConfig{}, lot, demo().occupancy, Pose{p[0], p[1], p[2]});
    frames.push_back(base64_encode(img.data));
  }
  b.erase("rasterize");
  b["I_hist"] = {{"height", 16}, {"width", 16}, {"frames", frames}};
  const auto client = svc.predict(b.dump(), false);
  ASSERT_EQ(client.status, 200);
  EXPECT_EQ(client.body, server.body);

  b["I_hist"]["height"] = 8;
  EXPECT_EQ(svc.predict(b.dump(), false).status, 400);
  b["I_hist"]["height"] = 16;
  b["I_hist"]["frames"][0] = base64_encode({1, 2, 3});
  EXPECT_EQ(svc.predict(b.dump(), false).status, 400);
  b["I_hist"]["frames"].erase(0);
  EXPECT_EQ(svc.predict(b.dump(), false).status, 400);
}

TEST(Service, CheckpointMismatchThrows) {
  const auto dir = scratch("mismatch");
  ServiceConfig cfg;
  cfg.checkpoint = write_checkpoint(dir, false);
  cfg.dataset.n_pred = 10;
  EXPECT_THROW(PredictionService{cfg}, ShapeError);
  cfg.dataset.n_pred = 20;
  cfg.lot.spots_per_row = 10;
  EXPECT_THROW(PredictionService{cfg}, ShapeError);
  cfg.lot = LotConfig{};
  cfg.checkpoint = dir / "missing";
  EXPECT_ANY_THROW(PredictionService{cfg});
}

TEST(Service, LoadsEkfNoiseBesideCheckpoint) {
  const auto dir = scratch("noise");
  ServiceConfig cfg;
  cfg.checkpoint = write_checkpoint(dir, false);
  ekf::NoiseConfig n;
  n.Q(3, 3) = 0.5;
  std::ofstream(dir / "ekf_noise.json") << json(n).dump();
  PredictionService svc(cfg);
  EXPECT_EQ(json(svc.config().ekf_noise), json(n));
}

TEST(ServiceHttp, EndpointsOverTheWire) {
  const auto dir = scratch("http");
  ServiceConfig cfg;
  cfg.demos_out = dir / "demos.jsonl";
  cfg.checkpoint = write_checkpoint(dir, false);
  PredictionService svc(cfg);
  httplib::Server server;
  svc.mount(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  auto lot = cli.Get("/api/lot/new?seed=5");
  ASSERT_TRUE(lot);
  EXPECT_EQ(lot->status, 200);
  EXPECT_EQ(json::parse(lot->body).at("occupancy").get<OccupancyMatrix>().free_count(), 8);
  EXPECT_EQ(cli.Get("/api/lot/new?seed=x")->status, 400);

  auto demo_res = cli.Post("/api/demos", json(demo()).dump(), "application/json");
  ASSERT_TRUE(demo_res);
  EXPECT_EQ(demo_res->status, 202);

  auto pred = cli.Post("/api/predict?baseline=1", predict_body(demo(), 3).dump(), "application/json");
  ASSERT_TRUE(pred);
  EXPECT_EQ(pred->status, 200);
  const auto body = json::parse(pred->body);
  EXPECT_EQ(body.at("rollouts").size(), 3u);
  EXPECT_EQ(body.at("baseline").at("model"), "ekf");
  EXPECT_EQ(body.at("schema_version"), kSchemaVersion);
  EXPECT_EQ(pred->get_header_value("Content-Type"), "application/json");

  server.stop();
  th.join();
}
