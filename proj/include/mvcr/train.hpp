#pragma once

// Dual-rate Adam training: HAE pretraining on the reconstruction loss with a
// frozen backbone and head, then joint tuning where the task loss updates
// every group at the task rate and the reconstruction loss additionally
// updates the HAE group at the reconstruction rate.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mvcr/data.hpp"
#include "mvcr/encoder.hpp"

namespace mvcr {

enum class Phase { hae_pretrain, joint };

inline std::string_view to_string(Phase p) { return p == Phase::hae_pretrain ? "hae_pretrain" : "joint"; }

struct TrainSchedule {
  std::size_t total_epochs = 100;
  std::size_t pretrain_epochs = 20;
  std::size_t batch_size = 32;
  double lr_task = 2e-5;
  double lr_mse = 2e-3;
  std::uint64_t seed = 0;
  Regularizer baseline;
  std::size_t eval_every = 1;  // epochs between dev/test evaluations
  bool alternate_updates = false;
  std::uint64_t eval_seed = 0x5eed;

  void validate() const {
    if (pretrain_epochs > total_epochs) throw std::invalid_argument("schedule: pretrain_epochs exceeds total_epochs");
    if (!(lr_task > 0.0) || !(lr_mse > 0.0)) throw std::invalid_argument("schedule: learning rates must be positive");
    if (batch_size == 0) throw std::invalid_argument("schedule: batch_size must be positive");
    if (eval_every == 0) throw std::invalid_argument("schedule: eval_every must be positive");
    if (baseline.kind != BaselineKind::none) validate_regularizer(baseline.kind, baseline.strength);
  }

  /// Phase of each epoch. Runs without MVCR skip pretraining and train
  /// total - pretrain epochs, the same number of task epochs.
  std::vector<Phase> phases(bool with_mvcr) const {
    std::vector<Phase> out;
    if (with_mvcr) out.assign(pretrain_epochs, Phase::hae_pretrain);
    out.insert(out.end(), total_epochs - pretrain_epochs, Phase::joint);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Adam

template <class T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  struct Moments {
    std::vector<double> m, v;
  };

  /// One update of every listed parameter from the given gradients.
  void step(const std::vector<NamedParam<T>>& params, const std::vector<std::vector<T>>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& w = params[i].tensor->data;
      const auto& g = grads[i];
      auto& st = state_[params[i].name];
      if (st.m.empty()) {
        st.m.assign(w.size(), 0.0);
        st.v.assign(w.size(), 0.0);
      }
      if (st.m.size() != w.size() || g.size() != w.size())
        throw std::logic_error("adam: moment shape mismatch for " + params[i].name);
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        st.m[j] = beta1_ * st.m[j] + (1 - beta1_) * gj;
        st.v[j] = beta2_ * st.v[j] + (1 - beta2_) * gj * gj;
        const double mh = st.m[j] / c1, vh = st.v[j] / c2;
        w[j] = static_cast<T>(double(w[j]) - lr_ * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  double lr() const { return lr_; }
  const Moments* moments(const std::string& name) const {
    auto it = state_.find(name);
    return it == state_.end() ? nullptr : &it->second;
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::unordered_map<std::string, Moments> state_;
};

// ---------------------------------------------------------------------------
// Steps

struct StepMetrics {
  std::optional<double> task_loss;
  std::optional<double> mse_loss;
  // Gradient norms per group from each loss.
  std::map<Group, double> task_grad_norm;
  std::map<Group, double> recon_grad_norm;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::string snapshot)
      : std::runtime_error(what), snapshot_(std::move(snapshot)) {}
  const std::string& snapshot() const { return snapshot_; }

 private:
  std::string snapshot_;
};

template <class T>
class Trainer {
 public:
  Trainer(EncoderModel<T>& model, const TrainSchedule& schedule)
      : model_(model), schedule_(schedule), task_opt_(schedule.lr_task), recon_opt_(schedule.lr_mse) {
    schedule.validate();
    for (auto& p : model_.parameters())
      if (p.group == Group::backbone) initial_.emplace(p.name, *p.tensor);
  }

  /// One optimization step on a batch.
  StepMetrics step(const Batch& batch, Phase phase, AugmentationTrace* trace = nullptr) {
    const bool has_pools = !model_.pools.empty();
    if (phase == Phase::hae_pretrain && !has_pools)
      throw std::logic_error("train_step: hae_pretrain phase without MVCR pools");
    StepMetrics metrics;
    const std::uint64_t step = step_++;
    auto params = model_.parameters();

    bool do_task = phase == Phase::joint;
    bool do_recon = has_pools;
    if (schedule_.alternate_updates && phase == Phase::joint && has_pools) {
      do_task = joint_steps_ % 2 == 0;
      do_recon = !do_task;
    }
    if (phase == Phase::joint) ++joint_steps_;

    Tape<T> tape;
    ForwardContext ctx;
    ctx.mode = phase == Phase::joint ? Mode::train : Mode::eval;
    ctx.rng = CounterRng(schedule_.seed);
    ctx.step = step;
    ctx.regularizer = schedule_.baseline;
    ctx.trace = trace;

    std::optional<Var<T>> task_loss;
    EncodeResult<T> encoded;
    if (phase == Phase::joint) {
      auto out = task_forward(tape, model_, batch, ctx);
      task_loss = out.loss;
      if (schedule_.baseline.kind == BaselineKind::weight_decay_to_init)
        task_loss = add(*task_loss, weight_decay_penalty(tape, params));
      encoded = std::move(out.encoded);
    } else {
      encoded = encode(tape, model_, batch, ctx);
    }
    std::optional<ReconResult<T>> recon;
    if (has_pools) {
      ForwardContext rctx = ctx;
      rctx.mode = Mode::train;
      recon = mvcr_reconstruction(tape, model_, encoded, batch, rctx);
    }

    if (task_loss) metrics.task_loss = static_cast<double>(task_loss->item());
    if (recon) metrics.mse_loss = static_cast<double>(recon->loss.item());
    check_finite(metrics, step);

    std::vector<std::vector<T>> task_grads, recon_grads;
    if (task_loss) {
      tape.backward(*task_loss);
      task_grads = collect(tape, params, metrics.task_grad_norm);
    }
    if (recon) {
      tape.backward(recon->loss);
      recon_grads = collect(tape, params, metrics.recon_grad_norm);
    }

    if (do_task && task_loss) task_opt_.step(params, task_grads);
    if (do_recon && recon) {
      std::vector<NamedParam<T>> hae;
      std::vector<std::vector<T>> g;
      const bool with_backbone = model_.mvcr.recon_to_backbone && phase == Phase::joint;
      for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].group == Group::hae || (with_backbone && params[i].group == Group::backbone)) {
          hae.push_back(params[i]);
          g.push_back(std::move(recon_grads[i]));
        }
      recon_opt_.step(hae, g);
    }
    if (phase == Phase::joint && schedule_.baseline.kind == BaselineKind::mixout) apply_mixout(params, step);
    return metrics;
  }

  std::uint64_t steps() const { return step_; }
  const Adam<T>& task_optimizer() const { return task_opt_; }
  const Adam<T>& recon_optimizer() const { return recon_opt_; }

 private:
  Var<T> weight_decay_penalty(Tape<T>& tape, const std::vector<NamedParam<T>>& params) {
    std::vector<const Tensor<T>*> ps;
    std::vector<Tensor<T>> init;
    for (const auto& p : params)
      if (p.group == Group::backbone) {
        ps.push_back(p.tensor);
        init.push_back(initial_.at(p.name));
      }
    return weight_decay_to_init<T>(tape, ps, init, schedule_.baseline.strength);
  }

  void apply_mixout(const std::vector<NamedParam<T>>& params, std::uint64_t step) {
    std::vector<Tensor<T>*> ps;
    std::vector<Tensor<T>> init;
    for (const auto& p : params)
      if (p.group == Group::backbone) {
        ps.push_back(p.tensor);
        init.push_back(initial_.at(p.name));
      }
    Stream rng(CounterRng(schedule_.seed).bits(Purpose::mixout, {step, 0}), {});
    mixout<T>(ps, init, schedule_.baseline.strength, rng);
  }

  static std::vector<std::vector<T>> collect(const Tape<T>& tape, const std::vector<NamedParam<T>>& params,
                                             std::map<Group, double>& norms) {
    std::vector<std::vector<T>> grads(params.size());
    for (auto g : {Group::backbone, Group::head, Group::hae}) norms[g] = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto g = tape.grad(*params[i].tensor);
      if (g.empty()) {
        grads[i].assign(params[i].tensor->size(), T{0});
        continue;
      }
      grads[i].assign(g.begin(), g.end());
      double s = 0;
      for (T v : g) s += double(v) * double(v);
      norms[params[i].group] += s;
    }
    for (auto& [_, v] : norms) v = std::sqrt(v);
    return grads;
  }

  void check_finite(const StepMetrics& m, std::uint64_t step) {
    auto bad = [](const std::optional<double>& v) { return v && !std::isfinite(*v); };
    if (!bad(m.task_loss) && !bad(m.mse_loss)) return;
    std::ostringstream snap;
    snap << "step " << step << " task_loss " << m.task_loss.value_or(0.0) << " mse_loss " << m.mse_loss.value_or(0.0)
         << '\n';
    for (auto& p : model_.parameters()) {
      std::size_t count = 0;
      for (T v : p.tensor->data) count += std::isfinite(double(v)) ? 0 : 1;
      if (count) snap << "  " << p.name << ": " << count << " non-finite values\n";
    }
    throw TrainingDiverged("training diverged: non-finite loss at step " + std::to_string(step), snap.str());
  }

  EncoderModel<T>& model_;
  TrainSchedule schedule_;
  Adam<T> task_opt_, recon_opt_;
  std::map<std::string, Tensor<T>> initial_;
  std::uint64_t step_ = 0;
  std::uint64_t joint_steps_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Accuracy (sequence tasks) or span F1 (token tasks), in points (0-100).
/// With mvcr_at_inference the stochastic path runs with draws keyed by
/// eval_seed and the batch index; otherwise the pools are bypassed.
template <class T>
double evaluate(const EncoderModel<T>& model, std::span<const Example> split, bool mvcr_at_inference = false,
                std::uint64_t eval_seed = 0x5eed, std::size_t batch_size = 64) {
  if (split.empty()) throw std::invalid_argument("evaluate: empty split");
  std::size_t correct = 0, total = 0;
  SpanCounts spans;
  std::vector<std::size_t> picked;
  for (std::size_t start = 0, index = 0; start < split.size(); start += batch_size, ++index) {
    picked.clear();
    for (std::size_t i = start; i < std::min(split.size(), start + batch_size); ++i) picked.push_back(i);
    const Batch batch = make_batch(split, picked, model.cfg.task);
    Tape<T> tape;
    ForwardContext ctx;
    ctx.mode = mvcr_at_inference ? Mode::eval_with_mvcr : Mode::eval;
    ctx.rng = CounterRng(eval_seed);
    ctx.step = index;
    Batch unlabeled = batch;
    unlabeled.labels.clear();
    auto out = task_forward(tape, model, unlabeled, ctx);
    if (model.cfg.task == TaskKind::sequence) {
      for (std::size_t b = 0; b < batch.batch; ++b) correct += out.predictions[b] == batch.labels[b] ? 1 : 0;
      total += batch.batch;
    } else {
      for (std::size_t b = 0; b < batch.batch; ++b) {
        const std::size_t len = split[picked[b]].ids.size();
        std::span<const int> gold(batch.labels.data() + b * batch.seq, len);
        std::span<const int> pred(out.predictions.data() + b * batch.seq, len);
        spans.add(gold, pred);
      }
    }
  }
  if (model.cfg.task == TaskKind::sequence) return 100.0 * double(correct) / double(total);
  return 100.0 * spans.f1();
}

/// Reconstruction loss of every pool on a fixed batch. Sub-AE draws are keyed
/// by probe_seed, so repeated calls on the same parameters agree exactly.
template <class T>
double probe_reconstruction_loss(const EncoderModel<T>& model, const Batch& probe, std::uint64_t probe_seed = 0) {
  if (model.pools.empty()) throw std::invalid_argument("probe_reconstruction_loss: model has no MVCR pools");
  Tape<T> tape;
  ForwardContext ctx;
  ctx.rng = CounterRng(probe_seed);
  auto encoded = encode(tape, model, probe, ctx);
  ctx.mode = Mode::train;
  return static_cast<double>(mvcr_reconstruction(tape, model, encoded, probe, ctx)->loss.item());
}

// ---------------------------------------------------------------------------
// Runs

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  Phase phase = Phase::joint;
  std::optional<double> task_loss;
  std::optional<double> mse_loss;
  std::optional<double> dev_metric;
  std::optional<double> test_metric;
  double wall_ms = 0.0;

  nlohmann::ordered_json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["phase"] = std::string(to_string(phase));
    j["task_loss"] = opt(task_loss);
    j["mse_loss"] = opt(mse_loss);
    j["dev_metric"] = opt(dev_metric);
    j["test_metric"] = opt(test_metric);
    j["wall_ms"] = wall_ms;
    return j;
  }
};

template <class T>
struct TrainRun {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 when no joint epoch was evaluated
  double best_dev = -1.0;
  double best_test = -1.0;
  EncoderModel<T> best;   // parameters at best_epoch
  EncoderModel<T> final;  // parameters after the last epoch
};

/// Called after every epoch, e.g. to append a JSONL record.
using EpochSink = std::function<void(const EpochRecord&)>;

template <class T>
TrainRun<T> run_training(EncoderModel<T> model, const Dataset& data, const TrainSchedule& schedule,
                         const EpochSink& sink = {}) {
  schedule.validate();
  if (data.train.empty() || data.dev.empty() || data.test.empty())
    throw std::invalid_argument("run_training: empty split");
  if (data.task != model.cfg.task || data.num_classes != model.cfg.num_classes)
    throw std::invalid_argument("run_training: dataset does not match the model's task");

  TrainRun<T> run;
  Trainer<T> trainer(model, schedule);
  const auto phases = schedule.phases(!model.pools.empty());
  std::vector<std::size_t> order(data.train.size());
  std::vector<std::size_t> picked;
  for (std::size_t e = 0; e < phases.size(); ++e) {
    const auto started = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Stream shuffle(schedule.seed, {static_cast<std::uint64_t>(Purpose::shuffle), e});
    for (std::size_t i = 0; i + 1 < order.size(); ++i) std::swap(order[i], order[i + shuffle.below(order.size() - i)]);

    EpochRecord rec;
    rec.epoch = e + 1;
    rec.phase = phases[e];
    double task_sum = 0, mse_sum = 0;
    std::size_t task_n = 0, mse_n = 0;
    for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
      picked.assign(order.begin() + start, order.begin() + std::min(order.size(), start + schedule.batch_size));
      auto m = trainer.step(make_batch(data.train, picked, data.task), phases[e]);
      if (m.task_loss) task_sum += *m.task_loss, ++task_n;
      if (m.mse_loss) mse_sum += *m.mse_loss, ++mse_n;
    }
    if (task_n) rec.task_loss = task_sum / double(task_n);
    if (mse_n) rec.mse_loss = mse_sum / double(mse_n);

    const bool last = e + 1 == phases.size();
    if ((e + 1) % schedule.eval_every == 0 || last) {
      rec.dev_metric = evaluate(model, data.dev);
      rec.test_metric = evaluate(model, data.test);
      if (phases[e] == Phase::joint && *rec.dev_metric > run.best_dev) {
        run.best_dev = *rec.dev_metric;
        run.best_test = *rec.test_metric;
        run.best_epoch = rec.epoch;
        run.best = model;
      }
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    run.history.push_back(rec);
    if (sink) sink(rec);
  }
  if (run.best_epoch == 0) run.best = model;
  run.final = std::move(model);
  return run;
}

}  // namespace mvcr
