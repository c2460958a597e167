// parkpredict: command-line driver for data generation, training, evaluation and serving.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "parkpredict/dataset.hpp"
#include "parkpredict/demo_gen.hpp"
#include "parkpredict/service.hpp"
#include "parkpredict/train_eval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace parkpredict;

namespace {

constexpr const char* kVersion = "0.1.0";

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

/// Reproducibility manifest written beside every output.
void write_manifest(const fs::path& p, const std::string& command, const json& config) {
  json m = {{"command", command},
            {"config", config},
            {"versions",
             {{"parkpredict", kVersion},
              {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                            std::to_string(EIGEN_MINOR_VERSION)},
              {"compiler", __VERSION__},
              {"schema_version", kSchemaVersion}}}};
  write_text(p, m.dump(2) + "\n");
}

std::vector<Demonstration> read_demos(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  std::vector<Demonstration> demos;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      demos.push_back(json::parse(line).get<Demonstration>());
    } catch (const json::exception& e) {
      throw DataError(p.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(p.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return demos;
}

LotConfig lot_from(const std::string& path) {
  if (path.empty()) return {};
  auto c = read_json_file(path).get<LotConfig>();
  c.validate();
  return c;
}

int default_threads() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

struct TrainFlags {
  std::string preset;
  std::string config_file;
  int epochs = 0, batch = 0, folds = 0, hidden = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;
  int threads = 0;
  CLI::Option *epochs_opt = nullptr, *batch_opt = nullptr, *folds_opt = nullptr, *lr_opt = nullptr, *seed_opt = nullptr,
              *hidden_opt = nullptr, *threads_opt = nullptr;

  void add(CLI::App* cmd) {
    cmd->add_option("--preset", preset, "desk (40 epochs) or paper (200 epochs)")->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--config", config_file, "JSON file with TrainConfig fields");
    epochs_opt = cmd->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
    batch_opt = cmd->add_option("--batch", batch)->check(CLI::PositiveNumber);
    folds_opt = cmd->add_option("--folds", folds)->check(CLI::Range(2, 100));
    lr_opt = cmd->add_option("--lr", lr)->check(CLI::PositiveNumber);
    seed_opt = cmd->add_option("--seed", seed);
    hidden_opt = cmd->add_option("--hidden", hidden)->check(CLI::PositiveNumber);
    threads_opt = cmd->add_option("--threads", threads, "worker threads (fold level)")->envname("PARKPREDICT_THREADS")->check(CLI::PositiveNumber);
  }

  /// defaults < preset < config file < flags
  TrainConfig resolve() const {
    TrainConfig c = preset == "desk" ? TrainConfig::desk() : TrainConfig::paper();
    if (!config_file.empty()) {
      json j = c;
      j.update(read_json_file(config_file));
      c = j.get<TrainConfig>();
    }
    if (epochs_opt->count()) c.epochs = epochs;
    if (batch_opt->count()) c.batch_size = batch;
    if (folds_opt->count()) c.folds = folds;
    if (lr_opt->count()) c.learning_rate = lr;
    if (seed_opt->count()) c.seed = seed;
    if (hidden_opt->count()) c.hidden = hidden;
    c.threads = threads_opt->count() ? threads : default_threads();
    c.validate();
    return c;
  }
};

RunSpec spec_from(const std::string& model, const std::string& variant, bool no_ekf) {
  RunSpec s;
  s.ekf = !no_ekf;
  if (model == "all")
    s.architectures = {Architecture::kLstm, Architecture::kCnn};
  else
    s.architectures = {architecture_from_string(model)};
  if (variant != "all") s.variants = {variant_from_string(variant)};
  return s;
}

RunSpec spec_from_json(const json& j) {
  RunSpec s;
  s.ekf = j.at("ekf").get<bool>();
  s.architectures.clear();
  for (const auto& a : j.at("architectures")) s.architectures.push_back(architecture_from_string(a.get<std::string>()));
  s.variants.clear();
  for (const auto& v : j.at("variants")) s.variants.push_back(variant_from_string(v.get<std::string>()));
  s.rollouts = j.at("rollouts").get<int>();
  return s;
}

void write_report(const EvalReport& r, const fs::path& json_path) {
  write_text(json_path, report_json(r).dump(2) + "\n");
  auto csv = json_path;
  csv.replace_extension(".csv");
  write_text(csv, report_csv(r));
}

void print_summary(const EvalReport& r) {
  for (const auto& m : r.models) {
    std::cout << m.model << '/' << m.variant << ':';
    if (!m.pooled.accuracy.empty())
      std::cout << " A1=" << m.pooled.accuracy[0] << " A3=" << (m.pooled.accuracy.size() > 2 ? m.pooled.accuracy[2] : 0.0);
    if (!m.pooled.d.empty()) std::cout << " d_last=" << m.pooled.d.back();
    if (!m.pooled.d_curved.empty()) std::cout << " d_last_curved=" << m.pooled.d_curved.back();
    std::cout << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parking-lot intent and trajectory prediction toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Generate synthetic parking demonstrations (JSONL)");
  int n_demos = 0;
  std::uint64_t gen_seed = 1;
  std::string gen_out, gen_lot;
  gen->add_option("--demos", n_demos, "number of demonstrations")->required()->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", gen_seed);
  gen->add_option("--out", gen_out, "output JSONL file")->required();
  gen->add_option("--lot", gen_lot, "LotConfig JSON");

  // snippetize
  auto* snip = app.add_subcommand("snippetize", "Cut demonstrations into a binary snippet dataset");
  std::string snip_in, snip_out;
  DatasetConfig snip_cfg;
  int bev_size = 96;
  snip->add_option("--in", snip_in)->required();
  snip->add_option("--out", snip_out, "dataset directory")->required();
  snip->add_flag("--bev", snip_cfg.include_bev, "render BEV frames");
  snip->add_option("--bev-size", bev_size, "BEV frame height and width")->check(CLI::Range(8, 1024));
  snip->add_option("--hist", snip_cfg.n_hist)->check(CLI::PositiveNumber);
  snip->add_option("--pred", snip_cfg.n_pred)->check(CLI::PositiveNumber);

  // train
  auto* train = app.add_subcommand("train", "Cross-validated training and evaluation");
  std::string train_data, train_out, train_model = "lstm", train_variant = "all";
  bool no_ekf = false;
  TrainFlags tflags;
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory for checkpoints and reports")->required();
  train->add_option("--model", train_model)->check(CLI::IsMember({"lstm", "cnn", "all"}));
  train->add_option("--variant", train_variant)->check(CLI::IsMember({"multimodal", "gt_intent", "no_intent", "all"}));
  train->add_flag("--no-ekf", no_ekf, "skip the EKF baseline row");
  tflags.add(train);

  // eval
  auto* eval = app.add_subcommand("eval", "Recompute reports from saved checkpoints");
  std::string eval_data, eval_ckpt, eval_out;
  int eval_threads = 0;
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--checkpoints", eval_ckpt, "directory written by train")->required();
  eval->add_option("--out", eval_out, "report JSON path (default <checkpoints>/eval_report.json)");
  auto* eval_threads_opt = eval->add_option("--threads", eval_threads)->envname("PARKPREDICT_THREADS")->check(CLI::PositiveNumber);

  // predict
  auto* pred = app.add_subcommand("predict", "Multimodal prediction for one snippet");
  std::string pred_data, pred_ckpt, pred_out;
  std::size_t pred_index = 0;
  int pred_n = 3;
  bool pred_baseline = false;
  pred->add_option("--data", pred_data)->required();
  pred->add_option("--checkpoint", pred_ckpt, "checkpoint prefix, e.g. run/fold1/lstm")->required();
  pred->add_option("--snippet", pred_index, "snippet index")->required();
  pred->add_option("--n", pred_n)->check(CLI::PositiveNumber);
  pred->add_option("--out", pred_out, "PredictionResult JSON path")->required();
  pred->add_flag("--baseline", pred_baseline, "include the EKF baseline");

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP/JSON service");
  int port = 8080;
  std::string host = "127.0.0.1", serve_ckpt, demos_out = "demos.jsonl", serve_lot, ui_dir;
  serve->add_option("--port", port)->check(CLI::Range(1, 65535));
  serve->add_option("--host", host);
  serve->add_option("--checkpoint", serve_ckpt, "checkpoint prefix, e.g. run/fold1/lstm");
  serve->add_option("--demos-out", demos_out);
  serve->add_option("--lot", serve_lot, "LotConfig JSON");
  serve->add_option("--ui-dir", ui_dir, "static UI bundle to serve at /");

  // export-plots
  auto* plots = app.add_subcommand("export-plots", "CSV series for accuracy bars and distance curves");
  std::string plots_report, plots_out;
  plots->add_option("--report", plots_report)->required();
  plots->add_option("--out", plots_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) {
      const LotConfig lot = lot_from(gen_lot);
      const fs::path out = gen_out;
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      std::ofstream file(out, std::ios::trunc);
      if (!file) throw std::runtime_error("cannot write " + out.string());
      for (int i = 0; i < n_demos; ++i) {
        // Per-demo seed = base seed + index, independent of scheduling.
        const std::uint64_t s = gen_seed + static_cast<std::uint64_t>(i);
        Demonstration d;
        try {
          d = generate_demo(lot, s);
        } catch (const std::exception& e) {
          file.close();
          fs::remove(out);
          std::cerr << "generate: demonstration " << i << " failed: " << e.what() << '\n';
          return kRuntime;
        }
        file << json(d).dump() << '\n';
      }
      file.close();
      if (!file) throw std::runtime_error("cannot write " + out.string());
      write_manifest(out.string() + ".manifest.json", "generate",
                     {{"demos", n_demos}, {"seed", gen_seed}, {"lot", lot}, {"generator", "default"}});
      std::cout << "wrote " << n_demos << " demonstrations to " << out << '\n';
      return kOk;
    }

    if (*snip) {
      snip_cfg.bev_height = snip_cfg.bev_width = bev_size;
      const auto demos = read_demos(snip_in);
      const Dataset ds = build_dataset(demos, snip_cfg);
      const fs::path out = snip_out;
      try {
        save_dataset(ds, out);
        write_manifest(out / "run_manifest.json", "snippetize", {{"in", snip_in}, {"dataset", snip_cfg}});
      } catch (...) {
        std::error_code ec;
        fs::remove_all(out, ec);
        throw;
      }
      std::cout << "M=" << ds.size() << '\n';
      return kOk;
    }

    if (*train) {
      const TrainConfig cfg = tflags.resolve();
      RunSpec spec = spec_from(train_model, train_variant, no_ekf);
      const fs::path out = train_out;
      spec.checkpoint_dir = out;
      const Dataset ds = load_dataset(train_data);
      std::cout << "training on " << ds.size() << " snippets, " << cfg.folds << " folds, " << cfg.epochs << " epochs\n";
      fs::create_directories(out);
      json run = {{"train", cfg}, {"run", run_spec_json(spec)}, {"data", train_data}};
      write_text(out / "run.json", run.dump(2) + "\n");
      const auto report = cross_validate(ds, cfg, spec, [](const std::string& s) { std::cout << s << std::endl; });
      write_report(report, out / "report.json");
      write_manifest(out / "manifest.json", "train", run);
      print_summary(report);
      return kOk;
    }

    if (*eval) {
      const fs::path dir = eval_ckpt;
      const json run = read_json_file(dir / "run.json");
      TrainConfig cfg = run.at("train").get<TrainConfig>();
      cfg.threads = eval_threads_opt->count() ? eval_threads : default_threads();
      const RunSpec spec = spec_from_json(run.at("run"));
      const Dataset ds = load_dataset(eval_data);
      const auto report = evaluate_checkpoints(ds, dir, cfg, spec);
      const fs::path out = eval_out.empty() ? dir / "eval_report.json" : fs::path(eval_out);
      write_report(report, out);
      write_manifest(out.parent_path() / "eval_manifest.json", "eval", {{"data", eval_data}, {"checkpoints", eval_ckpt}});
      print_summary(report);
      return kOk;
    }

    if (*pred) {
      const Dataset ds = load_dataset(pred_data);
      if (pred_index >= ds.size()) throw DataError("snippet index out of range (M=" + std::to_string(ds.size()) + ")");
      ServiceConfig sc;
      sc.lot = ds.lot;
      sc.dataset = ds.cfg;
      sc.checkpoint = fs::path(pred_ckpt);
      const PredictionService service(sc);
      const Snippet& s = ds.snippets[pred_index];
      json req = {{"Z_hist", json::array()}, {"occupancy", snippet_occupancy(s)}, {"n", pred_n}};
      for (const auto& p : snippet_poses(s.z_hist)) req["Z_hist"].push_back({p.x, p.y, p.theta});
      if (service.model_needs_images()) {
        if (s.bev.empty()) throw DataError("the CNN checkpoint needs a dataset with BEV frames");
        const std::size_t frame = s.bev.size() / static_cast<std::size_t>(ds.cfg.n_hist);
        json frames = json::array();
        for (int t = 0; t < ds.cfg.n_hist; ++t)
          frames.push_back(base64_encode({s.bev.begin() + static_cast<std::ptrdiff_t>(t * frame),
                                          s.bev.begin() + static_cast<std::ptrdiff_t>((t + 1) * frame)}));
        req["I_hist"] = {{"height", ds.cfg.bev_height}, {"width", ds.cfg.bev_width}, {"frames", frames}};
      }
      const auto reply = service.predict(req.dump(), pred_baseline);
      if (reply.status != 200) throw DataError(reply.body.value("error", "prediction failed"));
      write_text(pred_out, reply.body.dump(2) + "\n");
      write_manifest(pred_out + ".manifest.json", "predict",
                     {{"data", pred_data}, {"checkpoint", pred_ckpt}, {"snippet", pred_index}, {"n", pred_n}});
      std::cout << "snippet " << pred_index << ": " << reply.body.at("rollouts").size() << " rollouts, top intent "
                << reply.body.at("rollouts").at(0).at("intent_index") << '\n';
      return kOk;
    }

    if (*serve) {
      ServiceConfig sc;
      sc.lot = lot_from(serve_lot);
      sc.demos_out = demos_out;
      if (!serve_ckpt.empty()) {
        sc.checkpoint = fs::path(serve_ckpt);
        // The dataset horizons come from the checkpoint.
        const auto side = load_sidecar(fs::path(serve_ckpt + "_traj"));
        const auto tc = side.config.get<TrajNetConfig>();
        sc.dataset.n_hist = tc.n_hist;
        sc.dataset.n_pred = tc.n_pred;
      }
      PredictionService service(sc);
      httplib::Server server;
      service.mount(server, ui_dir.empty() ? std::nullopt : std::optional<fs::path>(ui_dir));
      write_manifest(fs::path(demos_out).string() + ".serve_manifest.json", "serve",
                     {{"port", port}, {"host", host}, {"checkpoint", serve_ckpt}, {"lot", sc.lot}});
      std::cout << "listening on http://" << host << ':' << port << std::endl;
      if (!server.listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
      return kOk;
    }

    if (*plots) {
      const auto report = report_from_json(read_json_file(plots_report));
      const double dt = report.meta.at("config").at("dataset").at("dt").get<double>();
      const fs::path out = plots_out;
      write_text(out / "accuracy_bars.csv", accuracy_plot_csv(report));
      write_text(out / "distance_curves.csv", distance_plot_csv(report, dt));
      write_manifest(out / "plots_manifest.json", "export-plots", {{"report", plots_report}});
      std::cout << "wrote " << (out / "accuracy_bars.csv") << " and " << (out / "distance_curves.csv") << '\n';
      return kOk;
    }
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
