#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "parkpredict/bev.hpp"
#include "parkpredict/demo_gen.hpp"
#include "parkpredict/errors.hpp"

namespace parkpredict {

static_assert(std::endian::native == std::endian::little, "binary dataset format assumes a little-endian host");

struct DatasetConfig {
  double dt = 0.1;
  int n_hist = 5;
  int n_pred = 20;
  bool include_bev = false;
  int bev_height = 96;
  int bev_width = 96;

  void validate() const {
    if (n_hist < 1 || n_pred < 1 || !(dt > 0.0)) throw DataError("DatasetConfig: need n_hist >= 1, n_pred >= 1, dt > 0");
    if (include_bev && (bev_height <= 0 || bev_width <= 0)) throw DataError("DatasetConfig: BEV size must be positive");
  }
  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

inline void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"dt", c.dt},
       {"N_hist", c.n_hist},
       {"N_pred", c.n_pred},
       {"include_bev", c.include_bev},
       {"H", c.bev_height},
       {"W", c.bev_width}};
}

inline void from_json(const nlohmann::json& j, DatasetConfig& c) {
  DatasetConfig d;
  c.dt = j.value("dt", d.dt);
  c.n_hist = j.value("N_hist", d.n_hist);
  c.n_pred = j.value("N_pred", d.n_pred);
  c.include_bev = j.value("include_bev", d.include_bev);
  c.bev_height = j.value("H", d.bev_height);
  c.bev_width = j.value("W", d.bev_width);
}

/// One dataset instance. Poses are world-frame rows of (x, y, theta).
struct Snippet {
  std::vector<float> z_hist;       // n_hist x 3
  std::vector<float> occ;          // G x 3 (x, y, free)
  std::vector<std::uint8_t> bev;   // n_hist x H x W x 3, empty when not rendered
  std::vector<float> z_future;     // n_pred x 3
  std::vector<float> intent;       // G + 1, one-hot; last entry = undetermined
  double t_ref = 0.0;
  std::string demo_id;

  int spot_count() const { return static_cast<int>(occ.size() / 3); }
  /// 0-based category index of the one-hot label (G means undetermined).
  int intent_index() const {
    return static_cast<int>(std::max_element(intent.begin(), intent.end()) - intent.begin());
  }
  bool undetermined() const { return intent_index() == spot_count(); }
  friend bool operator==(const Snippet&, const Snippet&) = default;
};

struct Dataset {
  DatasetConfig cfg;
  LotConfig lot;
  std::vector<Snippet> snippets;

  int spot_count() const { return lot.spot_count(); }
  std::size_t size() const { return snippets.size(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// ---------------------------------------------------------------------------------------------

namespace detail {
inline bool stationary_step(const Pose& a, const Pose& b) {
  return std::hypot(b.x - a.x, b.y - a.y) < 0.01 && std::abs(wrap_angle(b.theta - a.theta)) < 0.001;
}
}  // namespace detail

/// Drops the idle frames before the car starts moving and after it has parked.
inline Demonstration trim_demo(const Demonstration& demo) {
  const auto& p = demo.poses;
  std::size_t first = p.size();
  for (std::size_t i = 0; i + 1 < p.size(); ++i) {
    if (!detail::stationary_step(p[i].pose, p[i + 1].pose)) {
      first = i;
      break;
    }
  }
  if (first == p.size()) throw DataError("trim_demo: demonstration '" + demo.id + "' never moves");
  std::size_t last = first + 1;
  for (std::size_t i = p.size() - 1; i > first; --i) {
    if (!detail::stationary_step(p[i - 1].pose, p[i].pose)) {
      last = i;
      break;
    }
  }
  Demonstration out = demo;
  out.poses.assign(p.begin() + static_cast<std::ptrdiff_t>(first), p.begin() + static_cast<std::ptrdiff_t>(last) + 1);
  return out;
}

/// Number of snippets a trimmed demonstration of `poses` poses yields.
inline std::size_t snippet_count(std::size_t poses, const DatasetConfig& cfg) {
  const auto need = static_cast<std::size_t>(cfg.n_hist + cfg.n_pred);
  return poses >= need ? poses - need + 1 : 0;
}

/// Cuts a (trimmed) demonstration into stride-1 snippets, one per valid reference index.
inline std::vector<Snippet> snippetize(const Demonstration& demo, const DatasetConfig& cfg) {
  cfg.validate();
  std::vector<Snippet> out;
  const std::size_t n = snippet_count(demo.poses.size(), cfg);
  if (n == 0) return out;
  if (!demo.intent_time) throw DataError("snippetize: demonstration '" + demo.id + "' has no intent signal");
  if (std::abs(demo.dt - cfg.dt) > 1e-9) throw DataError("snippetize: demonstration dt differs from dataset dt");

  const int g = demo.lot.spot_count();
  if (static_cast<int>(demo.occupancy.size()) != g) throw DataError("snippetize: occupancy does not match lot");
  std::vector<float> occ;
  occ.reserve(static_cast<std::size_t>(g) * 3);
  for (const auto& e : demo.occupancy.entries) {
    occ.push_back(static_cast<float>(e.x));
    occ.push_back(static_cast<float>(e.y));
    occ.push_back(e.free ? 1.0f : 0.0f);
  }

  // Every pose appears in up to n_hist histories, so render each frame once.
  std::vector<BevImage> frames;
  if (cfg.include_bev) {
    const auto lot = build_lot(demo.lot);
    const auto frame = make_raster_frame(demo.lot, cfg.bev_height, cfg.bev_width);
    const BevImage base = rasterize_bev(frame, demo.lot, lot, demo.occupancy, std::nullopt);
    const VehicleFootprint footprint;
    frames.reserve(demo.poses.size());
    for (const auto& tp : demo.poses) {
      BevImage img = base;
      detail::fill_box(img, frame, footprint.at(tp.pose), kEgo);
      frames.push_back(std::move(img));
    }
  }

  auto push_pose = [](std::vector<float>& v, const Pose& p) {
    v.push_back(static_cast<float>(p.x));
    v.push_back(static_cast<float>(p.y));
    v.push_back(static_cast<float>(p.theta));
  };

  const auto first_ref = static_cast<std::size_t>(cfg.n_hist - 1);
  for (std::size_t k = first_ref; k < first_ref + n; ++k) {
    Snippet s;
    s.t_ref = demo.poses[k].t;
    s.demo_id = demo.id;
    s.occ = occ;
    for (std::size_t i = k + 1 - static_cast<std::size_t>(cfg.n_hist); i <= k; ++i) {
      push_pose(s.z_hist, demo.poses[i].pose);
      if (cfg.include_bev) s.bev.insert(s.bev.end(), frames[i].data.begin(), frames[i].data.end());
    }
    for (std::size_t i = k + 1; i <= k + static_cast<std::size_t>(cfg.n_pred); ++i) push_pose(s.z_future, demo.poses[i].pose);
    s.intent.assign(static_cast<std::size_t>(g) + 1, 0.0f);
    const bool undetermined = s.t_ref < *demo.intent_time;
    s.intent[undetermined ? static_cast<std::size_t>(g) : static_cast<std::size_t>(demo.chosen_spot - 1)] = 1.0f;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Folds

struct FoldSplit {
  int folds = 0;
  std::vector<int> assignment;              // per snippet, values in 1..folds
  std::map<std::string, int> demo_fold;     // demo id -> fold

  std::vector<std::size_t> members(int fold) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] == fold) idx.push_back(i);
    return idx;
  }
  std::vector<std::size_t> complement(int fold) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] != fold) idx.push_back(i);
    return idx;
  }
};

/// Group-aware K-fold split. `demo_ids` holds one entry per snippet; distinct demonstrations are
/// shuffled with the seed and dealt round-robin, and every snippet inherits its demo's fold.
inline FoldSplit kfold_split(const std::vector<std::string>& demo_ids, int folds, std::uint64_t rng_seed) {
  if (folds < 2) throw DataError("kfold_split: need at least 2 folds");
  std::vector<std::string> unique;
  std::map<std::string, int> seen;
  for (const auto& id : demo_ids)
    if (seen.emplace(id, 0).second) unique.push_back(id);
  if (static_cast<int>(unique.size()) < folds)
    throw DataError("kfold_split: " + std::to_string(folds) + " folds but only " + std::to_string(unique.size()) +
                    " demonstrations");

  std::mt19937_64 rng(rng_seed);
  for (std::size_t i = unique.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(unique[i - 1], unique[pick(rng)]);
  }
  FoldSplit split;
  split.folds = folds;
  for (std::size_t i = 0; i < unique.size(); ++i) split.demo_fold[unique[i]] = static_cast<int>(i % folds) + 1;
  split.assignment.reserve(demo_ids.size());
  for (const auto& id : demo_ids) split.assignment.push_back(split.demo_fold.at(id));
  return split;
}

inline std::vector<std::string> snippet_demo_ids(const Dataset& ds) {
  std::vector<std::string> ids;
  ids.reserve(ds.size());
  for (const auto& s : ds.snippets) ids.push_back(s.demo_id);
  return ids;
}

// ---------------------------------------------------------------------------------------------
// Binary dataset directory: manifest.json + one flat little-endian blob per field.

namespace detail {

template <typename T>
void write_blob(const std::filesystem::path& path, const std::vector<T>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

template <typename T>
std::vector<T> read_blob(const std::filesystem::path& path, std::size_t expected_elements) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot read " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != expected_elements * sizeof(T))
    throw ShapeError("dimension mismatch: " + path.filename().string() + " holds " + std::to_string(bytes) +
                     " bytes, manifest implies " + std::to_string(expected_elements * sizeof(T)));
  std::vector<T> data(expected_elements);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw DataError("short read on " + path.string());
  return data;
}

inline std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::size_t m = ds.size();
  const auto g = static_cast<std::size_t>(ds.spot_count());
  const auto nh = static_cast<std::size_t>(ds.cfg.n_hist);
  const auto np = static_cast<std::size_t>(ds.cfg.n_pred);
  const auto h = static_cast<std::size_t>(ds.cfg.bev_height);
  const auto w = static_cast<std::size_t>(ds.cfg.bev_width);

  std::vector<float> z_hist, occ, z_future, intent;
  std::vector<std::uint8_t> bev;
  z_hist.reserve(m * nh * 3);
  occ.reserve(m * g * 3);
  z_future.reserve(m * np * 3);
  intent.reserve(m * (g + 1));
  nlohmann::json demo_ids = nlohmann::json::array();
  nlohmann::json snippet_demo = nlohmann::json::array();
  nlohmann::json t_ref = nlohmann::json::array();
  std::map<std::string, std::size_t> demo_index;
  for (const auto& s : ds.snippets) {
    if (s.z_hist.size() != nh * 3 || s.occ.size() != g * 3 || s.z_future.size() != np * 3 || s.intent.size() != g + 1)
      throw ShapeError("save_dataset: snippet shape does not match the dataset configuration");
    if (ds.cfg.include_bev && s.bev.size() != nh * h * w * 3) throw ShapeError("save_dataset: BEV history has wrong size");
    z_hist.insert(z_hist.end(), s.z_hist.begin(), s.z_hist.end());
    occ.insert(occ.end(), s.occ.begin(), s.occ.end());
    z_future.insert(z_future.end(), s.z_future.begin(), s.z_future.end());
    intent.insert(intent.end(), s.intent.begin(), s.intent.end());
    if (ds.cfg.include_bev) bev.insert(bev.end(), s.bev.begin(), s.bev.end());
    auto [it, added] = demo_index.emplace(s.demo_id, demo_ids.size());
    if (added) demo_ids.push_back(s.demo_id);
    snippet_demo.push_back(it->second);
    t_ref.push_back(s.t_ref);
  }

  auto field = [](const std::string& file, const std::string& dtype, std::vector<std::size_t> shape) {
    return nlohmann::json{{"file", file}, {"dtype", dtype}, {"shape", shape}};
  };
  nlohmann::json fields = {{"z_hist", field("z_hist.bin", "float32", {m, nh, 3})},
                           {"occ", field("occ.bin", "float32", {m, g, 3})},
                           {"z_future", field("z_future.bin", "float32", {m, np, 3})},
                           {"intent", field("intent.bin", "float32", {m, g + 1})}};
  if (ds.cfg.include_bev) fields["bev"] = field("bev.bin", "uint8", {m, nh, h, w, 3});

  nlohmann::json manifest = {{"format", "parkpredict-dataset"},
                             {"version", 1},
                             {"M", m},
                             {"G", g},
                             {"cfg", ds.cfg},
                             {"lot", ds.lot},
                             {"byte_order", "little"},
                             {"fields", fields},
                             {"demo_ids", demo_ids},
                             {"snippet_demo", snippet_demo},
                             {"t_ref", t_ref}};

  detail::write_blob(dir / "z_hist.bin", z_hist);
  detail::write_blob(dir / "occ.bin", occ);
  detail::write_blob(dir / "z_future.bin", z_future);
  detail::write_blob(dir / "intent.bin", intent);
  if (ds.cfg.include_bev)
    detail::write_blob(dir / "bev.bin", bev);
  else
    fs::remove(dir / "bev.bin");
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << manifest.dump(1) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("cannot read " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupted manifest: ") + e.what());
  }

  Dataset ds;
  std::size_t m = 0, g = 0;
  nlohmann::json fields;
  try {
    if (manifest.at("format").get<std::string>() != "parkpredict-dataset") throw DataError("not a parkpredict dataset");
    m = manifest.at("M").get<std::size_t>();
    g = manifest.at("G").get<std::size_t>();
    ds.cfg = manifest.at("cfg").get<DatasetConfig>();
    ds.lot = manifest.at("lot").get<LotConfig>();
    fields = manifest.at("fields");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupted manifest: ") + e.what());
  }
  ds.cfg.validate();
  if (static_cast<std::size_t>(ds.lot.spot_count()) != g) throw ShapeError("manifest G disagrees with lot");
  const auto nh = static_cast<std::size_t>(ds.cfg.n_hist);
  const auto np = static_cast<std::size_t>(ds.cfg.n_pred);
  const auto h = static_cast<std::size_t>(ds.cfg.bev_height);
  const auto w = static_cast<std::size_t>(ds.cfg.bev_width);

  auto expect_shape = [&](const char* name, std::vector<std::size_t> shape) {
    if (!fields.contains(name)) throw DataError(std::string("corrupted manifest: missing field ") + name);
    if (fields.at(name).at("shape").get<std::vector<std::size_t>>() != shape)
      throw ShapeError(std::string("dimension mismatch: manifest shape of ") + name);
    return detail::shape_product(shape);
  };
  const auto z_hist = detail::read_blob<float>(dir / "z_hist.bin", expect_shape("z_hist", {m, nh, 3}));
  const auto occ = detail::read_blob<float>(dir / "occ.bin", expect_shape("occ", {m, g, 3}));
  const auto z_future = detail::read_blob<float>(dir / "z_future.bin", expect_shape("z_future", {m, np, 3}));
  const auto intent = detail::read_blob<float>(dir / "intent.bin", expect_shape("intent", {m, g + 1}));
  std::vector<std::uint8_t> bev;
  if (ds.cfg.include_bev) bev = detail::read_blob<std::uint8_t>(dir / "bev.bin", expect_shape("bev", {m, nh, h, w, 3}));

  std::vector<std::string> demo_ids;
  std::vector<std::size_t> snippet_demo;
  std::vector<double> t_ref;
  try {
    demo_ids = manifest.at("demo_ids").get<std::vector<std::string>>();
    snippet_demo = manifest.at("snippet_demo").get<std::vector<std::size_t>>();
    t_ref = manifest.at("t_ref").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupted manifest: ") + e.what());
  }
  if (snippet_demo.size() != m || t_ref.size() != m) throw ShapeError("dimension mismatch: per-snippet metadata length");

  ds.snippets.resize(m);
  const std::size_t bev_stride = nh * h * w * 3;
  for (std::size_t i = 0; i < m; ++i) {
    auto& s = ds.snippets[i];
    auto slice = [i](const auto& v, std::size_t stride) {
      using V = std::decay_t<decltype(v)>;
      return V(v.begin() + static_cast<std::ptrdiff_t>(i * stride), v.begin() + static_cast<std::ptrdiff_t>((i + 1) * stride));
    };
    s.z_hist = slice(z_hist, nh * 3);
    s.occ = slice(occ, g * 3);
    s.z_future = slice(z_future, np * 3);
    s.intent = slice(intent, g + 1);
    if (ds.cfg.include_bev) s.bev = slice(bev, bev_stride);
    if (snippet_demo[i] >= demo_ids.size()) throw DataError("corrupted manifest: snippet_demo index out of range");
    s.demo_id = demo_ids[snippet_demo[i]];
    s.t_ref = t_ref[i];
  }
  return ds;
}

/// Reflects a snippet across the lot's vertical centre line (`flip_x`) and/or its horizontal
/// centre line (`flip_y`). The default lot is symmetric under both, so the result is another
/// plausible snippet with spot indices, poses, occupancy and BEV frames permuted to match.
inline Snippet mirror_snippet(const Snippet& s, const LotConfig& lot, bool flip_x, bool flip_y, int bev_height = 0,
                              int bev_width = 0) {
  if (flip_y && lot.rows % 2 != 0) throw DataError("mirror_snippet: vertical flip needs an even number of rows");
  const int rows = lot.rows, cols = lot.spots_per_row, g = lot.spot_count();
  if (s.spot_count() != g || s.intent.size() != static_cast<std::size_t>(g) + 1)
    throw ShapeError("mirror_snippet: snippet does not match the lot");
  const double xc = lot.origin.x + 0.5 * lot.extent_width();
  const double yc = lot.origin.y + 0.5 * lot.extent_height();
  auto reflect = [&](double& x, double& y) {
    if (flip_x) x = 2.0 * xc - x;
    if (flip_y) y = 2.0 * yc - y;
  };
  auto reflect_poses = [&](std::vector<float>& v) {
    for (std::size_t i = 0; i + 2 < v.size(); i += 3) {
      double x = v[i], y = v[i + 1], th = v[i + 2];
      reflect(x, y);
      if (flip_x) th = std::numbers::pi - th;
      if (flip_y) th = -th;
      v[i] = static_cast<float>(x);
      v[i + 1] = static_cast<float>(y);
      v[i + 2] = static_cast<float>(wrap_angle(th));
    }
  };
  Snippet out = s;
  reflect_poses(out.z_hist);
  reflect_poses(out.z_future);
  for (int j = 0; j < g; ++j) {
    int r = j / cols, c = j % cols;
    if (flip_x) c = cols - 1 - c;
    if (flip_y) r = rows - 1 - r;
    const auto src = static_cast<std::size_t>(j), dst = static_cast<std::size_t>(r * cols + c);
    double x = s.occ[3 * src], y = s.occ[3 * src + 1];
    reflect(x, y);
    out.occ[3 * dst] = static_cast<float>(x);
    out.occ[3 * dst + 1] = static_cast<float>(y);
    out.occ[3 * dst + 2] = s.occ[3 * src + 2];
    out.intent[dst] = s.intent[src];
  }
  if (!s.bev.empty()) {
    // The raster frame is centred on the lot, so reflecting the scene reflects the pixel grid.
    const auto h = static_cast<std::size_t>(bev_height), w = static_cast<std::size_t>(bev_width);
    const std::size_t frames = s.z_hist.size() / 3;
    if (h * w * 3 * frames != s.bev.size()) throw ShapeError("mirror_snippet: BEV size does not match H x W");
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
          const std::size_t rr = flip_y ? h - 1 - r : r, cc = flip_x ? w - 1 - c : c;
          for (std::size_t ch = 0; ch < 3; ++ch)
            out.bev[((f * h + rr) * w + cc) * 3 + ch] = s.bev[((f * h + r) * w + c) * 3 + ch];
        }
  }
  return out;
}

/// Trims and snippetizes a batch of demonstrations sharing one lot.
inline Dataset build_dataset(const std::vector<Demonstration>& demos, const DatasetConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.cfg = cfg;
  if (!demos.empty()) ds.lot = demos.front().lot;
  for (const auto& d : demos) {
    if (!(d.lot == ds.lot)) throw DataError("build_dataset: demonstrations use different lot configurations");
    auto snippets = snippetize(trim_demo(d), cfg);
    for (auto& s : snippets) ds.snippets.push_back(std::move(s));
  }
  return ds;
}

}  // namespace parkpredict
