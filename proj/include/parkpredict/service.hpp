#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>
#include <openssl/evp.h>

#include "parkpredict/bev.hpp"
#include "parkpredict/dataset.hpp"
#include "parkpredict/ekf.hpp"
#include "parkpredict/models.hpp"

// After Eigen: httplib pulls in <resolv.h>, whose `_res` macro clashes with Eigen parameter names.
#include <httplib.h>

namespace parkpredict {

inline constexpr int kSchemaVersion = 1;

struct ServiceConfig {
  LotConfig lot;
  DatasetConfig dataset;
  std::filesystem::path demos_out = "demos.jsonl";
  // Prefix of a trained pair: `<prefix>_intent` and `<prefix>_traj` checkpoints.
  std::optional<std::filesystem::path> checkpoint;
  ekf::NoiseConfig ekf_noise;
  int free_spots = 8;
};

/// Loads the EKF noise stored beside a checkpoint prefix, if any.
inline std::optional<ekf::NoiseConfig> load_noise_beside(const std::filesystem::path& prefix) {
  const auto p = prefix.parent_path() / "ekf_noise.json";
  std::ifstream in(p);
  if (!in) return std::nullopt;
  return nlohmann::json::parse(in).get<ekf::NoiseConfig>();
}

inline std::vector<std::uint8_t> base64_decode(const std::string& in) {
  if (in.size() % 4 != 0) throw ShapeError("base64 payload length must be a multiple of 4");
  std::vector<std::uint8_t> out(in.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(in.data()), static_cast<int>(in.size()));
  if (n < 0) throw ShapeError("invalid base64 payload");
  std::size_t pad = 0;
  if (!in.empty() && in.back() == '=') ++pad;
  if (in.size() > 1 && in[in.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

inline std::string base64_encode(const std::vector<std::uint8_t>& in) {
  std::string out(4 * ((in.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), in.data(), static_cast<int>(in.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

/// Lot generation, demonstration intake and prediction over one read-only checkpoint.
class PredictionService {
 public:
  struct Reply {
    int status = 200;
    nlohmann::json body;
  };

  explicit PredictionService(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.lot.validate();
    cfg_.dataset.validate();
    if (cfg_.checkpoint) {
      intent_.emplace(load_intent_net<float>(std::filesystem::path(cfg_.checkpoint->string() + "_intent")));
      traj_.emplace(load_traj_net<float>(std::filesystem::path(cfg_.checkpoint->string() + "_traj")));
      if (intent_->config().n_hist != cfg_.dataset.n_hist || traj_->config().n_pred != cfg_.dataset.n_pred)
        throw ShapeError("checkpoint horizons differ from the service configuration");
      if (intent_->config().spots != cfg_.lot.spot_count()) throw ShapeError("checkpoint lot size differs from the service lot");
      if (auto noise = load_noise_beside(*cfg_.checkpoint)) cfg_.ekf_noise = *noise;
    }
  }

  const ServiceConfig& config() const { return cfg_; }
  bool has_model() const { return intent_.has_value(); }
  bool model_needs_images() const { return intent_ && (intent_->config().use_cnn || traj_->config().use_cnn); }

  Reply new_lot(const std::optional<std::string>& seed_text) {
    std::uint64_t seed = 0;
    if (seed_text) {
      try {
        std::size_t used = 0;
        if (seed_text->empty() || (*seed_text)[0] == '-') throw std::invalid_argument("sign");
        seed = std::stoull(*seed_text, &used);
        if (used != seed_text->size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        return error(400, "seed must be a non-negative integer");
      }
    } else {
      seed = next_session_.load();
    }
    const auto lot = build_lot(cfg_.lot);
    const auto occ = sample_free_configuration(lot, seed, cfg_.free_spots);
    const std::string id = "s" + std::to_string(next_session_++);
    {
      std::lock_guard lock(mutex_);
      sessions_[id] = Session{occ, false};
    }
    nlohmann::json spots = nlohmann::json::array();
    for (const auto& s : lot)
      spots.push_back({{"id", s.id}, {"row", s.row}, {"column", s.column}, {"x", s.center.x}, {"y", s.center.y},
                       {"heading", s.heading}, {"width", cfg_.lot.spot_width}, {"depth", cfg_.lot.spot_depth}});
    return ok(200, {{"session", id}, {"seed", seed}, {"lot", cfg_.lot}, {"spots", spots}, {"occupancy", occ}});
  }

  Reply submit_demo(const std::string& text) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      return error(400, std::string("body is not JSON: ") + e.what());
    }
    Demonstration d;
    try {
      d = j.get<Demonstration>();
    } catch (const DataError& e) {
      return error(400, e.what());
    }
    std::size_t count = 0;
    try {
      validate_demonstration(d);
      if (!(d.lot == cfg_.lot)) throw ValidationError("lot_config", "demonstration lot differs from the served lot");
      if (std::abs(d.dt - cfg_.dataset.dt) > 1e-9) throw ValidationError("dt_positive", "demonstration dt differs from the dataset dt");
      if (j.contains("session")) {
        std::lock_guard lock(mutex_);
        const auto it = sessions_.find(j.at("session").get<std::string>());
        if (it == sessions_.end()) throw ValidationError("session", "unknown session");
        if (!(it->second.occupancy == d.occupancy)) throw ValidationError("session_occupancy", "occupancy differs from the session");
        it->second.locked = true;
      }
      count = snippet_count(trim_demo(d).poses.size(), cfg_.dataset);
    } catch (const ValidationError& e) {
      auto r = error(422, e.what());
      r.body["invariant"] = e.invariant();
      return r;
    } catch (const DataError& e) {
      auto r = error(422, e.what());
      r.body["invariant"] = "moving";
      return r;
    }
    {
      // One line per write keeps appends atomic with respect to other requests.
      std::lock_guard lock(mutex_);
      std::ofstream out(cfg_.demos_out, std::ios::app);
      out << nlohmann::json(d).dump() << '\n';
      out.flush();
      if (!out) return error(500, "cannot append to the demonstrations file");
    }
    return ok(202, {{"accepted", true}, {"snippet_count", count}, {"id", d.id}});
  }

  Reply predict(const std::string& text, bool baseline) const {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      return error(400, std::string("body is not JSON: ") + e.what());
    }
    Snippet s;
    int n = 3;
    std::vector<Pose> hist;
    OccupancyMatrix occ;
    try {
      for (const auto& p : j.at("Z_hist")) {
        if (!p.is_array() || p.size() != 3) throw ShapeError("Z_hist rows must be [x, y, theta]");
        hist.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
      }
      if (static_cast<int>(hist.size()) != cfg_.dataset.n_hist)
        throw ShapeError("Z_hist must have " + std::to_string(cfg_.dataset.n_hist) + " poses");
      occ = j.at("occupancy").get<OccupancyMatrix>();
      if (static_cast<int>(occ.size()) != cfg_.lot.spot_count())
        throw ShapeError("occupancy must have " + std::to_string(cfg_.lot.spot_count()) + " rows");
      n = j.value("n", 3);
      if (n < 1 || n > cfg_.lot.spot_count() + 1) throw ShapeError("n must be in 1..G+1");
    } catch (const nlohmann::json::exception& e) {
      return error(400, std::string("malformed request: ") + e.what());
    } catch (const DataError& e) {
      return error(400, e.what());
    }

    nlohmann::json body = nlohmann::json::object();
    if (!has_model()) return error(503, "no checkpoint loaded");
    for (const auto& p : hist) {
      s.z_hist.push_back(static_cast<float>(p.x));
      s.z_hist.push_back(static_cast<float>(p.y));
      s.z_hist.push_back(static_cast<float>(p.theta));
    }
    for (const auto& e : occ.entries) {
      s.occ.push_back(static_cast<float>(e.x));
      s.occ.push_back(static_cast<float>(e.y));
      s.occ.push_back(e.free ? 1.0f : 0.0f);
    }
    const bool images = model_needs_images();
    const int h = intent_->config().bev_height, w = intent_->config().bev_width;
    if (images) {
      try {
        if (j.contains("I_hist")) {
          const auto& ih = j.at("I_hist");
          if (ih.at("height").get<int>() != h || ih.at("width").get<int>() != w)
            throw ShapeError("I_hist frames must be " + std::to_string(h) + "x" + std::to_string(w));
          const auto& frames = ih.at("frames");
          if (static_cast<int>(frames.size()) != cfg_.dataset.n_hist) throw ShapeError("I_hist needs one frame per history pose");
          for (const auto& f : frames) {
            const auto bytes = base64_decode(f.get<std::string>());
            if (bytes.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * 3)
              throw ShapeError("I_hist frame has the wrong byte count");
            s.bev.insert(s.bev.end(), bytes.begin(), bytes.end());
          }
        } else if (j.value("rasterize", "") == "server") {
          const auto lot = build_lot(cfg_.lot);
          const auto frame = make_raster_frame(cfg_.lot, h, w);
          for (const auto& p : hist) {
            const auto img = rasterize_bev(frame, cfg_.lot, lot, occ, p);
            s.bev.insert(s.bev.end(), img.data.begin(), img.data.end());
          }
        } else {
          return error(409, "the loaded checkpoint needs I_hist frames (or rasterize=server)");
        }
      } catch (const nlohmann::json::exception& e) {
        return error(400, std::string("malformed I_hist: ") + e.what());
      } catch (const DataError& e) {
        return error(400, e.what());
      }
    }

    const auto batch = make_batch<float>({&s}, cfg_.dataset.n_hist, cfg_.dataset.n_pred, images, h, w);
    const auto result = predict_multimodal(*intent_, *traj_, batch, n).front();
    body = result;
    if (baseline) {
      const auto pred = ekf::ekf_predict(hist, cfg_.dataset.dt, cfg_.ekf_noise, cfg_.dataset.n_pred);
      nlohmann::json traj = nlohmann::json::array();
      for (const auto& p : pred) traj.push_back({p.x, p.y, p.theta});
      body["baseline"] = {{"model", "ekf"}, {"trajectory", traj}, {"intent", ekf::ekf_intent(pred.back(), occ)}};
    }
    return ok(200, std::move(body));
  }

  /// Registers the HTTP routes (and optionally a static UI directory) on `server`.
  void mount(httplib::Server& server, const std::optional<std::filesystem::path>& ui_dir = std::nullopt) {
    server.Get("/api/lot/new", [this](const httplib::Request& req, httplib::Response& res) {
      std::optional<std::string> seed;
      if (req.has_param("seed")) seed = req.get_param_value("seed");
      send(res, new_lot(seed));
    });
    server.Post("/api/demos", [this](const httplib::Request& req, httplib::Response& res) { send(res, submit_demo(req.body)); });
    server.Post("/api/predict", [this](const httplib::Request& req, httplib::Response& res) {
      const bool baseline = req.has_param("baseline") && req.get_param_value("baseline") == "1";
      send(res, predict(req.body, baseline));
    });
    if (ui_dir) server.set_mount_point("/", ui_dir->string());
  }

 private:
  struct Session {
    OccupancyMatrix occupancy;
    bool locked = false;
  };

  static Reply ok(int status, nlohmann::json body) {
    body["schema_version"] = kSchemaVersion;
    return {status, std::move(body)};
  }
  static Reply error(int status, const std::string& message) {
    return {status, {{"schema_version", kSchemaVersion}, {"error", message}}};
  }
  static void send(httplib::Response& res, const Reply& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  }

  ServiceConfig cfg_;
  std::optional<IntentNet<float>> intent_;
  std::optional<TrajNet<float>> traj_;
  mutable std::mutex mutex_;
  std::map<std::string, Session> sessions_;
  std::atomic<std::uint64_t> next_session_{1};
};

}  // namespace parkpredict
