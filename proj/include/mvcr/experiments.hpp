#pragma once

// Experiment drivers behind the CLI: single training runs, the digit
// autoencoder demo, and ablation grids.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "mvcr/checkpoint.hpp"
#include "mvcr/config.hpp"
#include "mvcr/train.hpp"

namespace mvcr {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Single runs

struct RunSummary {
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
  double best_dev = 0.0;
  double best_test = 0.0;
  double best_test_with_mvcr = 0.0;
  double final_test = 0.0;
  double wall_seconds = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["best_epoch"] = best_epoch;
    j["best_dev"] = best_dev;
    j["best_test"] = best_test;
    j["best_test_with_mvcr"] = best_test_with_mvcr;
    j["final_test"] = final_test;
    return j;
  }
};

struct RunOutputs {
  fs::path dir;  // empty: nothing is written
  bool checkpoints = true;
};

inline fs::path run_directory(const ExperimentConfig& cfg) {
  return fs::path(output_root(cfg)) / cfg.name / ("seed" + std::to_string(cfg.train.seed));
}

/// Trains one model. With an output directory, writes
///   config.cfg   resolved configuration
///   run.jsonl    header line, then one line per epoch
///   summary.json best/final metrics
///   best.ckpt, final.ckpt
///   deploy.ckpt  best model with MVCR plugged out
/// Only the `wall_ms` fields and summary timing differ between replays.
template <class T>
RunSummary run_experiment(const ExperimentConfig& cfg, const RunOutputs& out = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset data = cfg.make_dataset();
  auto model = EncoderModel<T>::init(cfg.encoder, cfg.resolved_mvcr(), cfg.train.seed);

  std::ofstream log;
  if (!out.dir.empty()) {
    fs::create_directories(out.dir);
    std::ofstream(out.dir / "config.cfg") << to_text(cfg);
    log.open(out.dir / "run.jsonl", std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + (out.dir / "run.jsonl").string());
    nlohmann::ordered_json head;
    head["experiment"] = cfg.name;
    head["seed"] = cfg.train.seed;
    head["dtype"] = cfg.dtype;
    nlohmann::ordered_json counts;
    for (auto [g, n] : model.parameter_counts()) counts[std::string(to_string(g))] = n;
    head["parameters"] = counts;
    log << head.dump() << "\n";
  }
  const EpochSink sink = [&](const EpochRecord& r) {
    if (log.is_open()) log << r.to_json().dump() << "\n" << std::flush;
  };

  TrainRun<T> run = run_training(std::move(model), data, cfg.train, sink);

  RunSummary s;
  s.seed = cfg.train.seed;
  s.best_epoch = run.best_epoch;
  s.best_dev = run.best_dev;
  s.best_test = run.best_test;
  s.best_test_with_mvcr = run.best.pools.empty() ? run.best_test : evaluate(run.best, data.test, true, cfg.train.eval_seed);
  s.final_test = evaluate(run.final, data.test, false, cfg.train.eval_seed);
  s.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!out.dir.empty()) {
    std::ofstream(out.dir / "summary.json") << s.to_json().dump(2) << "\n";
    if (out.checkpoints) {
      save_checkpoint((out.dir / "best.ckpt").string(), run.best, cfg, cfg.train.seed);
      save_checkpoint((out.dir / "final.ckpt").string(), run.final, cfg, cfg.train.seed);
      save_checkpoint((out.dir / "deploy.ckpt").string(), plug_out(run.best), cfg, cfg.train.seed);
    }
  }
  return s;
}

inline RunSummary run_experiment(const ExperimentConfig& cfg, const RunOutputs& out = {}) {
  return cfg.dtype == "f64" ? run_experiment<double>(cfg, out) : run_experiment<float>(cfg, out);
}

// ---------------------------------------------------------------------------
// Digit autoencoder demo

struct Fig1Options {
  std::vector<std::size_t> dims{392, 98, 49};
  double sigma = 0.3;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t train_size = 4000;
  std::size_t test_size = 500;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::size_t max_epochs = 150;
  double tolerance = 2e-4;  // stop once an epoch improves train loss by less than this fraction
  bool clean_target = true;
  fs::path out_dir;
};

struct Fig1Row {
  std::uint64_t seed = 0;
  std::size_t dim = 0;
  std::size_t epochs = 0;
  double train_loss = 0.0;
  double mse_clean = 0.0;  // test split, against clean images
  double mse_noisy = 0.0;  // test split, against the noisy inputs
};

struct Fig1Result {
  std::vector<Fig1Row> rows;

  /// Per seed: MSE against clean targets strictly increases as dim shrinks.
  bool ordering_holds() const {
    std::map<std::uint64_t, std::vector<std::pair<std::size_t, double>>> by_seed;
    for (const auto& r : rows) by_seed[r.seed].push_back({r.dim, r.mse_clean});
    for (auto& [seed, v] : by_seed) {
      std::sort(v.begin(), v.end(), std::greater<>());
      for (std::size_t i = 1; i < v.size(); ++i)
        if (!(v[i - 1].second < v[i].second)) return false;
    }
    return true;
  }
};

namespace detail {

inline std::vector<float> stack_images(std::span<const DigitImage> imgs, std::span<const std::size_t> idx, bool clean) {
  std::vector<float> out;
  out.reserve(idx.size() * kDigitSide * kDigitSide);
  for (auto i : idx) {
    const auto& src = clean ? imgs[i].clean : imgs[i].noisy;
    out.insert(out.end(), src.begin(), src.end());
  }
  return out;
}

/// 8-bit binary PGM; values are clamped to [0, 1].
inline void write_pgm(const fs::path& path, std::size_t width, std::size_t height, std::span<const float> pixels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  for (float v : pixels) out.put(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
}

/// Tiles rows of 28x28 images into one picture with a 2 px gutter.
inline void write_image_grid(const fs::path& path, const std::vector<std::vector<std::vector<float>>>& rows) {
  constexpr std::size_t gap = 2;
  const std::size_t cols = rows.empty() ? 0 : rows[0].size();
  const std::size_t W = cols * (kDigitSide + gap) + gap, H = rows.size() * (kDigitSide + gap) + gap;
  std::vector<float> canvas(W * H, 1.0f);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      for (std::size_t y = 0; y < kDigitSide; ++y)
        for (std::size_t x = 0; x < kDigitSide; ++x)
          canvas[(gap + r * (kDigitSide + gap) + y) * W + gap + c * (kDigitSide + gap) + x] =
              rows[r][c][y * kDigitSide + x];
  write_pgm(path, W, H, canvas);
}

}  // namespace detail

/// Mean squared reconstruction error of `ae` on the given images.
inline double digit_mse(const Autoencoder<float>& ae, std::span<const DigitImage> imgs, bool against_clean) {
  std::vector<std::size_t> idx(imgs.size());
  std::iota(idx.begin(), idx.end(), 0);
  Tape<float> tape;
  auto x = tape.constant({imgs.size(), kDigitSide * kDigitSide}, detail::stack_images(imgs, idx, false));
  auto y = tape.constant({imgs.size(), kDigitSide * kDigitSide}, detail::stack_images(imgs, idx, against_clean));
  return mse(ae_forward(tape, ae, x), y).value()[0];
}

inline std::vector<float> reconstruct(const Autoencoder<float>& ae, const DigitImage& img) {
  Tape<float> tape;
  auto x = tape.constant({1, kDigitSide * kDigitSide}, img.noisy);
  auto o = ae_forward(tape, ae, x).value();
  return {o.begin(), o.end()};
}

/// Trains AE_{784,dim} on noisy digits until the per-epoch improvement in
/// training loss drops below the tolerance.
inline Autoencoder<float> train_digit_ae(std::size_t dim, std::span<const DigitImage> train, const Fig1Options& opt,
                                         std::uint64_t seed, std::size_t* epochs_run = nullptr,
                                         double* final_loss = nullptr) {
  Stream init(seed, {static_cast<std::uint64_t>(Purpose::init), 4, dim});
  auto ae = Autoencoder<float>::init(kDigitSide * kDigitSide, dim, init);
  std::vector<NamedParam<float>> params;
  ae.visit("ae", [&](const std::string& name, Tensor<float>& t) { params.push_back({name, &t, Group::hae}); });
  Adam<float> adam(opt.lr);

  std::vector<std::size_t> order(train.size());
  double prev = std::numeric_limits<double>::infinity(), loss_sum = 0.0;
  std::size_t epoch = 0;
  while (epoch < opt.max_epochs) {
    ++epoch;
    std::iota(order.begin(), order.end(), 0);
    Stream sh(seed, {static_cast<std::uint64_t>(Purpose::shuffle), 4, dim, epoch});
    for (std::size_t i = 0; i + 1 < order.size(); ++i) std::swap(order[i], order[i + sh.below(order.size() - i)]);
    loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += opt.batch_size) {
      std::span<const std::size_t> pick(order.data() + b, std::min(opt.batch_size, order.size() - b));
      Tape<float> tape;
      auto x = tape.constant({pick.size(), kDigitSide * kDigitSide}, detail::stack_images(train, pick, false));
      auto y = tape.constant({pick.size(), kDigitSide * kDigitSide}, detail::stack_images(train, pick, opt.clean_target));
      auto loss = mse(ae_forward(tape, ae, x), y);
      tape.backward(loss);
      std::vector<std::vector<float>> grads;
      for (const auto& p : params) {
        auto g = tape.grad(*p.tensor);
        grads.emplace_back(g.begin(), g.end());
      }
      adam.step(params, grads);
      loss_sum += loss.value()[0];
      ++batches;
    }
    loss_sum /= double(batches);
    if (prev - loss_sum < opt.tolerance * prev) break;
    prev = loss_sum;
  }
  if (epochs_run) *epochs_run = epoch;
  if (final_loss) *final_loss = loss_sum;
  return ae;
}

/// Trains one AE per (seed, dim). With an output directory, writes
/// fig1_mse.csv and per seed a grid (rows: noisy input, clean, then one row
/// per dim in the given order; one column per digit class).
inline Fig1Result run_fig1(const Fig1Options& opt, std::ostream* progress = nullptr) {
  if (opt.dims.empty() || opt.seeds.empty()) throw std::invalid_argument("fig1: need dims and seeds");
  for (auto d : opt.dims)
    if (d == 0 || d >= kDigitSide * kDigitSide) throw std::invalid_argument("fig1: dim out of range");
  Fig1Result result;
  if (!opt.out_dir.empty()) fs::create_directories(opt.out_dir);
  for (auto seed : opt.seeds) {
    const auto train = generate_digits(opt.train_size, opt.sigma, seed, Split::train);
    const auto test = generate_digits(opt.test_size, opt.sigma, seed, Split::test);
    std::vector<std::size_t> shown;
    for (int digit = 0; digit < 10; ++digit)
      for (std::size_t i = 0; i < test.size(); ++i)
        if (test[i].label == digit) {
          shown.push_back(i);
          break;
        }
    std::vector<std::vector<std::vector<float>>> grid(2);
    for (auto i : shown) {
      grid[0].push_back(test[i].noisy);
      grid[1].push_back(test[i].clean);
    }
    for (auto dim : opt.dims) {
      Fig1Row row{seed, dim};
      const auto ae = train_digit_ae(dim, train, opt, seed, &row.epochs, &row.train_loss);
      row.mse_clean = digit_mse(ae, test, true);
      row.mse_noisy = digit_mse(ae, test, false);
      result.rows.push_back(row);
      if (progress)
        *progress << "seed " << seed << " dim " << dim << " epochs " << row.epochs << " mse_clean " << row.mse_clean
                  << " mse_noisy " << row.mse_noisy << "\n";
      auto& r = grid.emplace_back();
      for (auto i : shown) r.push_back(reconstruct(ae, test[i]));
    }
    if (!opt.out_dir.empty())
      detail::write_image_grid(opt.out_dir / ("fig1_seed" + std::to_string(seed) + ".pgm"), grid);
  }
  if (!opt.out_dir.empty()) {
    std::ofstream csv(opt.out_dir / "fig1_mse.csv");
    csv << "seed,dim,epochs,train_loss,mse_clean,mse_noisy\n";
    csv.precision(9);
    for (const auto& r : result.rows)
      csv << r.seed << "," << r.dim << "," << r.epochs << "," << r.train_loss << "," << r.mse_clean << ","
          << r.mse_noisy << "\n";
  }
  return result;
}

// ---------------------------------------------------------------------------
// Ablation grids
//
// Grid files use the config syntax with keys
//   grid.name       output CSV stem
//   grid.base       base config, relative to the grid file
//   grid.key        swept config key, with grid.values = v1;v2;...
//   point.<label>   alternatively, explicit points: k=v; k=v
//   grid.seeds      comma-separated
//   grid.overrides  optional k=v; k=v applied to every point

struct GridPoint {
  std::string label;
  std::vector<std::string> assignments;  // k=v
};

struct GridSpec {
  std::string name;
  fs::path base;
  std::vector<GridPoint> points;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> overrides;
};

inline GridSpec parse_grid(std::istream& in, const fs::path& grid_dir, const std::string& source = "<grid>") {
  GridSpec g;
  std::string key, values, line;
  auto assignments = [](const std::string& v) {
    std::vector<std::string> out;
    for (auto& a : detail::split(v, ';'))
      if (!a.empty()) out.push_back(a);
    return out;
  };
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument(source + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string k = detail::trim(line.substr(0, eq)), v = detail::trim(line.substr(eq + 1));
    if (k == "grid.name") g.name = v;
    else if (k == "grid.base") g.base = grid_dir / v;
    else if (k == "grid.key") key = v;
    else if (k == "grid.values") values = v;
    else if (k == "grid.overrides") g.overrides = assignments(v);
    else if (k == "grid.seeds") {
      for (const auto& s : detail::split(v, ',')) g.seeds.push_back(detail::parse_uint("grid.seeds", s));
    } else if (k.rfind("point.", 0) == 0 && k.size() > 6) {
      g.points.push_back({k.substr(6), assignments(v)});
    } else {
      throw std::invalid_argument(source + ":" + std::to_string(lineno) + ": unknown grid key '" + k + "'");
    }
  }
  if (!key.empty()) {
    if (!g.points.empty()) throw std::invalid_argument(source + ": use either grid.key/grid.values or point.* entries");
    for (const auto& v : detail::split(values, ';'))
      if (!v.empty()) g.points.push_back({v, {key + "=" + v}});
  }
  if (g.name.empty()) throw std::invalid_argument(source + ": missing grid.name");
  if (g.points.empty()) throw std::invalid_argument(source + ": grid has no points");
  if (g.seeds.empty()) throw std::invalid_argument(source + ": missing grid.seeds");
  return g;
}

inline GridSpec load_grid(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open grid file '" + path.string() + "'");
  return parse_grid(in, path.parent_path(), path.string());
}

/// Base config, then grid overrides, point assignments, extra overrides, seed.
inline ExperimentConfig grid_config(const GridSpec& g, const GridPoint& p, std::uint64_t seed,
                                    const std::vector<std::string>& extra = {}) {
  ExperimentConfig cfg = g.base.empty() ? ExperimentConfig{} : load_config(g.base.string());
  for (const auto& a : g.overrides) apply_override(cfg, a);
  for (const auto& a : p.assignments) apply_override(cfg, a);
  for (const auto& a : extra) apply_override(cfg, a);
  cfg.train.seed = seed;
  cfg.name = g.name + "/" + p.label;
  return cfg;
}

struct GridCell {
  std::string point;
  std::uint64_t seed = 0;
  RunSummary summary;
};

struct PointStats {
  double mean = 0.0;
  double stddev = 0.0;  // sample (n - 1); 0 for a single seed
  std::size_t n = 0;
};

inline PointStats summarize(std::span<const double> xs) {
  PointStats s;
  s.n = xs.size();
  if (xs.empty()) return s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / double(xs.size() - 1));
  }
  return s;
}

struct GridResult {
  GridSpec spec;
  std::vector<GridCell> cells;  // point-major, seeds in grid order

  std::vector<double> test_metrics(const std::string& point) const {
    std::vector<double> out;
    for (const auto& c : cells)
      if (c.point == point) out.push_back(c.summary.best_test);
    return out;
  }
  PointStats stats(const std::string& point) const {
    const auto xs = test_metrics(point);
    return summarize(xs);
  }
};

inline constexpr std::string_view kGridCsvHeader =
    "grid,point,seed,dev_metric,test_metric,test_metric_with_mvcr,point_mean,point_stddev,n_seeds";

/// One row per (point, seed). The point_* columns aggregate test_metric over
/// the point's seeds and repeat on each of its rows.
inline std::string grid_csv(const GridResult& r) {
  std::ostringstream os;
  os.precision(10);
  os << kGridCsvHeader << "\n";
  for (const auto& c : r.cells) {
    const auto st = r.stats(c.point);
    os << r.spec.name << "," << c.point << "," << c.seed << "," << c.summary.best_dev << "," << c.summary.best_test
       << "," << c.summary.best_test_with_mvcr << "," << st.mean << "," << st.stddev << "," << st.n << "\n";
  }
  return os.str();
}

/// Runs every (point, seed) cell on up to `jobs` threads and writes
/// <out_dir>/<grid.name>.csv.
inline GridResult run_grid(const GridSpec& g, const fs::path& out_dir, const std::vector<std::string>& extra = {},
                           std::size_t jobs = 1, std::ostream* progress = nullptr) {
  GridResult result{g, {}};
  std::vector<ExperimentConfig> cfgs;
  for (const auto& p : g.points)
    for (auto seed : g.seeds) {
      cfgs.push_back(grid_config(g, p, seed, extra));
      cfgs.back().validate();
      result.cells.push_back({p.label, seed, {}});
    }
  std::atomic<std::size_t> next{0};
  std::mutex io;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < cfgs.size();) {
      try {
        result.cells[i].summary = run_experiment(cfgs[i]);
        std::lock_guard lock(io);
        if (progress)
          *progress << g.name << " point " << result.cells[i].point << " seed " << result.cells[i].seed << " test "
                    << result.cells[i].summary.best_test << "\n";
      } catch (...) {
        std::lock_guard lock(io);
        if (!failure) failure = std::current_exception();
        next = cfgs.size();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < std::max<std::size_t>(jobs, 1); ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream(out_dir / (g.name + ".csv")) << grid_csv(result);
  }
  return result;
}

}  // namespace mvcr
