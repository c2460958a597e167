// Generate a few demonstrations, train a tiny model pair, and predict three rollouts for one snippet.

#include <iomanip>
#include <iostream>

#include "parkpredict/ekf.hpp"
#include "parkpredict/train_eval.hpp"

using namespace parkpredict;

int main() {
  std::vector<Demonstration> demos;
  for (std::uint64_t seed = 0; seed < 12; ++seed) demos.push_back(generate_demo(LotConfig{}, seed));
  const Dataset ds = build_dataset(demos, DatasetConfig{});
  std::cout << demos.size() << " demos -> " << ds.size() << " snippets\n";

  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.folds = 2;
  cfg.hidden = 16;
  RunSpec spec;
  spec.variants = {Variant::kMultimodal};
  spec.checkpoint_dir = std::filesystem::temp_directory_path() / "parkpredict_quickstart";
  const auto report = cross_validate(ds, cfg, spec);
  for (const auto& m : report.models)
    std::cout << std::setw(5) << m.model << " " << std::setw(10) << m.variant << "  A1="
              << (m.pooled.accuracy.empty() ? 0.0 : m.pooled.accuracy[0]) << "  d20=" << m.pooled.d.back() << " m\n";

  // Reload the fold-1 checkpoints and run one held-out-style prediction.
  const auto intent = load_intent_net<float>(*spec.checkpoint_dir / "fold1" / "lstm_intent");
  const auto traj = load_traj_net<float>(*spec.checkpoint_dir / "fold1" / "lstm_traj");
  const Snippet& s = ds.snippets[ds.size() / 2];
  const auto batch = make_batch<float>({&s}, ds.cfg.n_hist, ds.cfg.n_pred, false, 0, 0);
  const auto result = predict_multimodal(intent, traj, batch, 3).front();

  const auto truth = snippet_poses(s.z_future);
  std::cout << "true intent " << s.intent_index() + 1 << "\n";
  for (const auto& r : result.rollouts)
    std::cout << "  intent " << std::setw(2) << r.intent_index + 1 << "  p=" << std::fixed << std::setprecision(3)
              << r.probability << "  J_traj=" << traj_loss(r.trajectory, truth) << " m\n";
  const auto ekf = ekf::ekf_predict(snippet_poses(s.z_hist), ds.cfg.dt, ekf::NoiseConfig{}, ds.cfg.n_pred);
  std::cout << "  ekf                 J_traj=" << traj_loss(ekf, truth) << " m\n";
}
