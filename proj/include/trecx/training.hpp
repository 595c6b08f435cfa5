#pragma once

// Joint-loss training with Adam and the early-view weight-transfer schedule.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "trecx/adam.hpp"
#include "trecx/config.hpp"
#include "trecx/dataset.hpp"
#include "trecx/evaluation.hpp"
#include "trecx/graph.hpp"

namespace trecx {

struct TrainConfig {
  std::string architecture;  // path; relative paths resolve against the config file
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  AdamConfig adam;
  double w_ee = 0.5;
  double transfer_fraction = 0.8;
  std::uint64_t seed = 0;
  bool shuffle = true;
  double holdout_fraction = 0.1;  // trailing share of the data kept for per-epoch accuracy
  std::size_t train_subset = 0;   // use only the first n samples; 0 keeps all
  std::size_t eval_batch_size = 256;

  // Number of leading epochs that end every batch with a weight transfer.
  std::size_t transfer_epochs() const {
    return static_cast<std::size_t>(std::floor(transfer_fraction * static_cast<double>(epochs) + 1e-9));
  }

  void validate() const {
    auto bad = [](const std::string& what) { throw ConfigError("train config: " + what); };
    if (epochs < 1) bad("epochs must be >= 1");
    if (batch_size < 1) bad("batch_size must be >= 1");
    if (eval_batch_size < 1) bad("eval_batch_size must be >= 1");
    if (!(w_ee > 0.0 && w_ee < 1.0)) bad("w_ee must lie strictly between 0 and 1");
    if (!(transfer_fraction >= 0.0 && transfer_fraction <= 1.0)) bad("transfer_fraction must lie in [0, 1]");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) bad("holdout_fraction must lie in [0, 1)");
    if (!(adam.learning_rate > 0.0)) bad("learning_rate must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) bad("adam.beta1 must lie in [0, 1)");
    if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) bad("adam.beta2 must lie in [0, 1)");
    if (!(adam.epsilon > 0.0)) bad("adam.epsilon must be positive");
  }
};

inline TrainConfig parse_train_config(const std::string& text, const std::string& origin) {
  config::Section s(config::parse(text, origin), origin);
  TrainConfig c;
  c.architecture = s.required<std::string>("architecture");
  c.epochs = s.optional<std::size_t>("epochs", c.epochs);
  c.batch_size = s.optional<std::size_t>("batch_size", c.batch_size);
  c.adam.learning_rate = s.optional<double>("learning_rate", c.adam.learning_rate);
  c.w_ee = s.required<double>("w_ee");
  c.transfer_fraction = s.optional<double>("transfer_fraction", c.transfer_fraction);
  c.seed = s.optional<std::uint64_t>("seed", c.seed);
  c.shuffle = s.optional<bool>("shuffle", c.shuffle);
  c.holdout_fraction = s.optional<double>("holdout_fraction", c.holdout_fraction);
  c.train_subset = s.optional<std::size_t>("train_subset", c.train_subset);
  c.eval_batch_size = s.optional<std::size_t>("eval_batch_size", c.eval_batch_size);
  if (s.has("adam")) {
    config::Section a(s.node("adam"), origin + ": adam");
    c.adam.beta1 = a.optional<double>("beta1", c.adam.beta1);
    c.adam.beta2 = a.optional<double>("beta2", c.adam.beta2);
    c.adam.epsilon = a.optional<double>("epsilon", c.adam.epsilon);
    a.finish();
  }
  s.finish();
  c.validate();
  return c;
}

// Loads a training config; the architecture path is made absolute relative to the file.
inline TrainConfig load_train_config(const std::filesystem::path& path) {
  auto c = parse_train_config(config::read_file(path.string()), path.string());
  std::filesystem::path arch(c.architecture);
  if (arch.is_relative()) c.architecture = (path.parent_path() / arch).lexically_normal().string();
  return c;
}

// L = w_ee * CE(early) + CE(final).
template <typename T>
T joint_loss(const Tensor<T>& softmax_ee, const Tensor<T>& softmax_ef, std::span<const int> labels, T w_ee) {
  return w_ee * cross_entropy(softmax_ee, labels) + cross_entropy(softmax_ef, labels);
}

// DCONV_Ef <- first c_ef filters of DCONV_Ee, kernel and bias.
template <typename T>
void transfer_early_view_weights(GraphModel<T>& model) {
  if (model.assist() != FinalAssist::EarlyView || !model.transfer_link())
    throw std::logic_error("transfer_early_view_weights: model has no early-view head");
  GraphModel<T>::copy_transfer_slice(model.params(), *model.transfer_link());
}

struct EpochRecord {
  std::uint64_t epoch = 0;
  double loss = 0, loss_ee = 0, loss_ef = 0;  // sample-weighted means over the epoch
  double acc_ee = 0, acc_ef = 0;              // standalone accuracies on the holdout
  bool transfer = false;
};

// Everything besides the parameters needed to continue a run bit-exactly.
struct TrainState {
  std::uint64_t epoch = 0;      // completed epochs
  std::uint64_t adam_step = 0;  // completed optimizer updates
  std::uint64_t rng = 0;        // root of the per-epoch shuffle streams
  std::vector<EpochRecord> history;
};

inline TrainState initial_train_state(const TrainConfig& cfg) {
  TrainState s;
  s.rng = stream_seed(cfg.seed, "train/shuffle");
  return s;
}

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct BatchEvent {
  std::size_t epoch, batch, batches;
  bool transferred;
  double loss, loss_ee, loss_ef;
  const GraphModel<T>& model;
};

template <typename T>
struct TrainHooks {
  std::function<void(const BatchEvent<T>&)> after_batch;
  std::ostream* progress = nullptr;
  std::size_t stop_at_epoch = 0;  // stop once this many epochs are complete; 0 runs to cfg.epochs
};

// Splits off the trailing holdout share. Returns {train, holdout}; the holdout may be empty.
inline std::pair<Dataset, Dataset> split_holdout(const Dataset& data, const TrainConfig& cfg) {
  const std::size_t n =
      cfg.train_subset ? std::min(cfg.train_subset, data.size()) : data.size();
  const auto n_hold = static_cast<std::size_t>(std::floor(static_cast<double>(n) * cfg.holdout_fraction));
  if (n - n_hold == 0) throw TrainingError("train: no training samples after the holdout split");
  Dataset train = take(data, 0, n - n_hold, "train");
  Dataset hold;
  if (n_hold) hold = take(data, n - n_hold, n_hold, "holdout");
  return {std::move(train), std::move(hold)};
}

template <typename T>
std::pair<double, double> standalone_accuracies(GraphModel<T>& model, const Dataset& data, std::size_t batch) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (data.size() == 0) return {nan, nan};
  if (model.has_early_exit()) {
    const auto rec = collect_records(model, data, batch);
    return {standalone_accuracy(rec, Exit::Early), standalone_accuracy(rec, Exit::Final)};
  }
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t n = std::min(batch, data.size() - start);
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
    const auto o = model.forward(gather_samples(data, idx).template cast<T>(), Mode::Infer);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < model.num_classes(); ++j)
        if (o.softmax_ef.at(i, j) > o.softmax_ef.at(i, best)) best = j;
      correct += static_cast<int>(best) == data.labels[start + i];
    }
  }
  return {nan, static_cast<double>(correct) / static_cast<double>(data.size())};
}

// Runs epochs state.epoch .. end. Each batch: forward both heads, joint loss, full
// backward, one Adam step, then the early-view transfer while epoch < transfer_epochs().
template <typename T>
std::vector<EpochRecord> train(GraphModel<T>& model, const Dataset& data, const TrainConfig& cfg, TrainState& state,
                               const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  data.validate();
  if (Shape(data.sample_dims()) != Shape(model.spec().input))
    throw TrainingError("train: data samples are " + Shape(data.sample_dims()).str() + " but the model expects " +
                        Shape(model.spec().input).str());
  if (data.num_classes != model.num_classes())
    throw TrainingError("train: data has " + std::to_string(data.num_classes) + " classes, model " +
                        std::to_string(model.num_classes()));

  const auto [train_set, holdout] = split_holdout(data, cfg);
  const std::size_t n = train_set.size();
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t end = hooks.stop_at_epoch ? std::min(hooks.stop_at_epoch, cfg.epochs) : cfg.epochs;
  const bool has_ee = model.has_early_exit();
  const bool has_ev = model.assist() == FinalAssist::EarlyView;
  const T w = static_cast<T>(cfg.w_ee);

  std::vector<EpochRecord> ran;
  std::vector<std::size_t> idx;
  Trace<T> trace;
  for (std::size_t epoch = state.epoch; epoch < end; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool transfer = has_ev && epoch < cfg.transfer_epochs();
    std::vector<std::size_t> order;
    if (cfg.shuffle) {
      order = permutation(n, stream_seed(state.rng, "epoch/" + std::to_string(epoch)));
    } else {
      order.resize(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
    }
    double sum = 0, sum_ee = 0, sum_ef = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi));
      const auto x = gather_samples(train_set, idx).template cast<T>();
      const auto y = gather_labels(train_set, idx);

      const auto out = model.forward(x, Mode::Train, &trace);
      const double l_ef = static_cast<double>(cross_entropy(out.softmax_ef, y));
      const double l_ee = has_ee ? static_cast<double>(cross_entropy(out.softmax_ee, y)) : 0.0;
      const double loss = static_cast<double>(w) * l_ee + l_ef;
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << ", batch " << b << ": L_ee=" << l_ee << " L_ef=" << l_ef
            << " w_ee=" << cfg.w_ee << " L=" << loss;
        throw TrainingError(msg.str());
      }

      Tensor<T> d_ee;
      if (has_ee) {
        d_ee = softmax_cross_entropy_backward(out.softmax_ee, y);
        for (auto& v : d_ee.vec()) v *= w;
      }
      model.params().zero_grads();
      model.backward(trace, d_ee, softmax_cross_entropy_backward(out.softmax_ef, y));
      adam_step(model.params(), cfg.adam, state.adam_step);
      if (transfer) transfer_early_view_weights(model);

      const double m = static_cast<double>(hi - lo);
      sum += loss * m;
      sum_ee += l_ee * m;
      sum_ef += l_ef * m;
      if (hooks.after_batch) hooks.after_batch(BatchEvent<T>{epoch, b, batches, transfer, loss, l_ee, l_ef, model});
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = sum / static_cast<double>(n);
    rec.loss_ee = sum_ee / static_cast<double>(n);
    rec.loss_ef = sum_ef / static_cast<double>(n);
    std::tie(rec.acc_ee, rec.acc_ef) = standalone_accuracies(model, holdout, cfg.eval_batch_size);
    rec.transfer = transfer;
    state.epoch = epoch + 1;
    state.history.push_back(rec);
    ran.push_back(rec);

    if (hooks.progress) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      *hooks.progress << "epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << rec.loss << " (ee " << rec.loss_ee
                      << ", ef " << rec.loss_ef << ") holdout acc ee " << rec.acc_ee << " ef " << rec.acc_ef
                      << (transfer ? " transfer" : "") << " " << secs << "s" << std::endl;
    }
  }
  return ran;
}

inline void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history) {
  out << "epoch,loss,loss_ee,loss_ef,acc_ee,acc_ef,transfer\n";
  for (const auto& r : history)
    out << r.epoch << ',' << format_g9(r.loss) << ',' << format_g9(r.loss_ee) << ',' << format_g9(r.loss_ef) << ','
        << format_g9(r.acc_ee) << ',' << format_g9(r.acc_ef) << ',' << (r.transfer ? 1 : 0) << '\n';
}

}  // namespace trecx
