#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "mvcr/experiments.hpp"

namespace {

using namespace mvcr;

fs::path default_out(const std::string& sub) {
  const char* env = std::getenv("MVCR_OUTPUT_ROOT");
  return fs::path(env && *env ? env : "runs") / sub;
}

template <class T>
void print_eval(const Checkpoint& ckpt, const std::string& split, bool with_mvcr) {
  const auto cfg = parse_config(ckpt.config_text, "<checkpoint config>");
  const auto model = restore_model<T>(ckpt);
  if (with_mvcr && model.pools.empty()) throw std::invalid_argument("checkpoint has no MVCR pools");
  const auto data = cfg.make_dataset();
  const auto& examples = split == "dev" ? data.dev : split == "train" ? data.train : data.test;
  const double metric = evaluate(model, examples, with_mvcr, cfg.train.eval_seed);
  nlohmann::ordered_json j;
  j["split"] = split;
  j["with_mvcr"] = with_mvcr;
  j["metric"] = metric;
  j["metric_name"] = cfg.encoder.task == TaskKind::sequence ? "accuracy" : "span_f1";
  std::cout << j.dump() << "\n";
}

void inspect(const Checkpoint& ckpt) {
  std::map<Group, std::size_t> counts;
  std::cout << "version " << ckpt.version << "\nelement_bytes " << int(ckpt.element_bytes) << "\nseed " << ckpt.seed
            << "\nparameters " << ckpt.params.size() << "\n";
  for (const auto& p : ckpt.params) {
    counts[p.group] += p.values.size();
    std::cout << "  " << p.name << " " << to_string(p.group) << " " << to_string(p.shape) << "\n";
  }
  for (auto g : {Group::backbone, Group::head, Group::hae}) std::cout << "count." << to_string(g) << " " << counts[g] << "\n";

  // A vanilla model of the same shape must have exactly the non-HAE parameters.
  auto cfg = parse_config(ckpt.config_text, "<checkpoint config>");
  cfg.mvcr.enabled = false;
  const auto vanilla = EncoderModel<float>::init(cfg.encoder, cfg.mvcr, ckpt.seed).parameter_counts();
  const std::size_t plugged = counts[Group::backbone] + counts[Group::head];
  const std::size_t expected = vanilla.at(Group::backbone) + vanilla.at(Group::head);
  std::cout << "plug_out.count " << plugged << "\nvanilla.count " << expected << "\nplug_out.matches_vanilla "
            << (plugged == expected ? "true" : "false") << "\n";
  std::cout << "config:\n" << ckpt.config_text;
  if (plugged != expected) throw std::runtime_error("plugged-out parameter count differs from a vanilla model");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view compressed representation experiments"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "Train one model and write its run directory");
  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  std::string out_dir;
  train->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "Overrides train.seed");
  train->add_option("--override", overrides, "key=value, repeatable");
  train->add_option("--out", out_dir, "Run directory (default <output root>/<name>/seed<seed>)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ckpt_path, split = "test";
  bool with_mvcr = false;
  eval->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));
  eval->add_flag("--with-mvcr", with_mvcr, "Keep the stochastic MVCR path at inference");

  auto* fig1 = app.add_subcommand("fig1-demo", "Train digit autoencoders at several compression dims");
  Fig1Options fopt;
  std::string target = "clean";
  fig1->add_option("--dims", fopt.dims, "Compression dims")->delimiter(',');
  fig1->add_option("--sigma", fopt.sigma, "Pixel noise stddev")->check(CLI::NonNegativeNumber);
  fig1->add_option("--seeds", fopt.seeds, "Seeds")->delimiter(',');
  fig1->add_option("--target", target, "Training target")->check(CLI::IsMember({"clean", "noisy"}));
  fig1->add_option("--train-size", fopt.train_size, "Training images");
  fig1->add_option("--max-epochs", fopt.max_epochs, "Epoch cap");
  fig1->add_option("--out", out_dir, "Output directory (default <output root>/fig1)");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid and write <grid.name>.csv");
  std::string grid_path;
  std::size_t jobs = 1;
  ablate->add_option("--grid", grid_path, "Grid file")->required()->check(CLI::ExistingFile);
  ablate->add_option("--override", overrides, "key=value applied to every run, repeatable");
  ablate->add_option("--jobs", jobs, "Parallel runs")->check(CLI::PositiveNumber);
  ablate->add_option("--out", out_dir, "Output directory (default <output root>/ablations)");

  auto* insp = app.add_subcommand("inspect", "Print checkpoint contents");
  insp->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      auto cfg = load_config(config_path);
      for (const auto& o : overrides) apply_override(cfg, o);
      if (train->count("--seed")) cfg.train.seed = seed;
      const fs::path dir = out_dir.empty() ? run_directory(cfg) : fs::path(out_dir);
      const auto s = run_experiment(cfg, {dir});
      auto j = s.to_json();
      j["run_dir"] = dir.string();
      std::cout << j.dump() << "\n";
    } else if (*eval) {
      const auto ckpt = read_checkpoint(ckpt_path);
      if (ckpt.element_bytes == 8)
        print_eval<double>(ckpt, split, with_mvcr);
      else
        print_eval<float>(ckpt, split, with_mvcr);
    } else if (*fig1) {
      fopt.clean_target = target == "clean";
      fopt.out_dir = out_dir.empty() ? default_out("fig1") : fs::path(out_dir);
      const auto r = run_fig1(fopt, &std::cout);
      std::cout << "ordering " << (r.ordering_holds() ? "holds" : "violated") << "\nwrote " << fopt.out_dir.string()
                << "\n";
    } else if (*ablate) {
      const auto grid = load_grid(grid_path);
      const fs::path dir = out_dir.empty() ? default_out("ablations") : fs::path(out_dir);
      run_grid(grid, dir, overrides, jobs, &std::cerr);
      std::cout << (dir / (grid.name + ".csv")).string() << "\n";
    } else if (*insp) {
      inspect(read_checkpoint(ckpt_path));
    }
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
