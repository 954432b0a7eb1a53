#ifndef OVERLAP_TRAINING_HPP
#define OVERLAP_TRAINING_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "overlap/common.hpp"
#include "overlap/dataset.hpp"
#include "overlap/model.hpp"
#include "overlap/rng.hpp"
#include "overlap/tensor.hpp"

namespace overlap {

struct Hardening {
  enum class Kind { none, fast_fgsm };
  Kind kind = Kind::none;
  float epsilon = 0.3f;
  // 1.25 * epsilon unless set explicitly; the fast single-step setting.
  float alpha = -1.0f;

  float effective_alpha() const { return alpha >= 0.0f ? alpha : 1.25f * epsilon; }
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  float learning_rate = 0.0004f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_epsilon = 1e-8f;
  std::vector<std::size_t> lr_decay_epochs;  // 1-based epochs where lr *= gamma
  float lr_decay_gamma = 0.2f;
  Hardening hardening;
  std::uint64_t shuffle_seed = 0;

  void validate() const {
    if (learning_rate <= 0.0f) throw ShapeError("learning_rate must be > 0");
    if (batch_size < 1) throw ShapeError("batch_size must be >= 1");
    if (hardening.kind == Hardening::Kind::fast_fgsm && hardening.epsilon < 0.0f) {
      throw ShapeError("hardening epsilon must be >= 0");
    }
  }
};

struct OptimizerState {
  std::vector<std::vector<float>> m;  // first moments, one buffer per parameter
  std::vector<std::vector<float>> v;  // second moments
  std::uint64_t t = 0;

  static OptimizerState for_params(const std::vector<NamedTensor>& params) {
    OptimizerState s;
    for (const NamedTensor& p : params) {
      s.m.emplace_back(p.tensor.size(), 0.0f);
      s.v.emplace_back(p.tensor.size(), 0.0f);
    }
    return s;
  }
};

// One bias-corrected Adam update over all parameters. Gradients are read from
// each tensor's grad buffer and left untouched.
inline void adam_step(std::vector<NamedTensor>& params, OptimizerState& state,
                      const TrainConfig& cfg, float lr) {
  state.t += 1;
  const float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(state.t));
  const float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(state.t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<float>& theta = params[p].tensor.values();
    std::vector<float>& m = state.m[p];
    std::vector<float>& v = state.v[p];
    const bool has_grad = params[p].tensor.has_grad();
    const std::vector<float>& stored = params[p].tensor.grad_view();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const float gi = has_grad ? stored[i] : 0.0f;
      if (!std::isfinite(gi)) {
        throw NumericError("NaN gradient in parameter " + params[p].name);
      }
      m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * gi * gi;
      const float mhat = m[i] / bc1;
      const float vhat = v[i] / bc2;
      theta[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_epsilon);
    }
  }
}

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean batch loss weighted by batch size
  double accuracy = 0.0;  // train-set accuracy after the epoch
};

struct TrainResult {
  Model model;
  std::vector<EpochStats> history;
};

// Accuracy of the model on a dataset whose labels are mapped into the model's
// output index space through class_map.
inline double evaluate(const Model& model, const LabeledDataset& ds,
                       const std::map<int, int>& class_map) {
  if (ds.size() == 0) throw ShapeError("evaluate on an empty dataset");
  const std::size_t per = ds.sample_elements();
  std::vector<std::size_t> sample_shape(ds.inputs.shape().begin() + 1, ds.inputs.shape().end());
  std::size_t correct = 0;
  const std::size_t chunk = 256;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t n = std::min(chunk, ds.size() - start);
    std::vector<std::size_t> shape = {n};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    std::vector<float> vals(ds.inputs.values().begin() + start * per,
                            ds.inputs.values().begin() + (start + n) * per);
    const std::vector<int> pred = predict(model, Tensor::from_values(std::move(shape), std::move(vals)));
    for (std::size_t i = 0; i < n; ++i) {
      const auto it = class_map.find(ds.labels[start + i]);
      if (it == class_map.end()) {
        throw ShapeError("label " + std::to_string(ds.labels[start + i]) +
                         " has no mapping into the model's classes");
      }
      if (pred[i] == it->second) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// Identity-mapped evaluate for datasets already in the model's index space.
inline double evaluate(const Model& model, const LabeledDataset& ds) {
  std::map<int, int> identity;
  for (int c : ds.class_universe) identity[c] = c;
  return evaluate(model, ds, identity);
}

namespace detail {

inline void clear_param_grads(std::vector<NamedTensor>& params) {
  for (NamedTensor& p : params) p.tensor.clear_grad();
}

inline Tensor make_batch(const LabeledDataset& ds, const std::vector<std::size_t>& ids,
                         std::vector<int>& labels_out, bool requires_grad = false) {
  const std::size_t per = ds.sample_elements();
  std::vector<std::size_t> shape = ds.inputs.shape();
  shape[0] = ids.size();
  std::vector<float> vals(ids.size() * per);
  labels_out.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const float* src = ds.inputs.values().data() + ids[i] * per;
    std::copy(src, src + per, vals.data() + i * per);
    labels_out[i] = ds.labels[ids[i]];
  }
  return Tensor::from_values(std::move(shape), std::move(vals), requires_grad);
}


}  // namespace detail

// Standard or hardened training, depending on cfg.hardening. Deterministic in
// (initial model, dataset, config): shuffling, init and hardening noise all
// run on seeded counter-based streams.
inline TrainResult train(const Model& initial, const LabeledDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.size() == 0) throw ShapeError("train on an empty dataset");
  for (int y : ds.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= initial.arch.num_classes) {
      throw ShapeError("train label " + std::to_string(y) + " outside model's " +
                       std::to_string(initial.arch.num_classes) + " classes");
    }
  }
  TrainResult out{initial.clone(), {}};
  Model& model = out.model;
  OptimizerState state = OptimizerState::for_params(model.params);
  const bool hardened = cfg.hardening.kind == Hardening::Kind::fast_fgsm;
  const float h_eps = cfg.hardening.epsilon;
  const float h_alpha = cfg.hardening.effective_alpha();
  Rng noise_rng(mix_seed({cfg.shuffle_seed, 0xadf5}));
  float lr = cfg.learning_rate;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (std::find(cfg.lr_decay_epochs.begin(), cfg.lr_decay_epochs.end(), epoch) !=
        cfg.lr_decay_epochs.end()) {
      lr *= cfg.lr_decay_gamma;
    }
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(mix_seed({cfg.shuffle_seed, epoch}));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      const std::vector<std::size_t> ids(order.begin() + start, order.begin() + start + n);
      std::vector<int> labels;
      Tensor x = detail::make_batch(ds, ids, labels);

      if (hardened) {
        // Wong-style single-step FGSM from a random start inside the ball.
        std::vector<float> delta(x.size());
        for (float& d : delta) d = noise_rng.uniform(-h_eps, h_eps);
        Tensor probe(x.shape(), true);
        for (std::size_t i = 0; i < x.size(); ++i)
          probe.at(i) = std::clamp(x.at(i) + delta[i], 0.0f, 1.0f);
        {
          Tape tape;
          Tensor loss = tape.softmax_cross_entropy(forward(tape, model, probe), labels);
          tape.backward(loss);
        }
        const std::vector<float>& g = probe.grad_view();
        for (std::size_t i = 0; i < x.size(); ++i) {
          const float stepped = delta[i] + h_alpha * detail::sign_of(g[i]);
          const float clipped = std::clamp(stepped, -h_eps, h_eps);
          x.at(i) = std::clamp(x.at(i) + clipped, 0.0f, 1.0f);
        }
        detail::clear_param_grads(model.params);
      }

      Tape tape;
      Tensor loss = tape.softmax_cross_entropy(forward(tape, model, x), labels);
      tape.backward(loss);
      adam_step(model.params, state, cfg, lr);
      detail::clear_param_grads(model.params);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
    }
    out.history.push_back({epoch, loss_sum / static_cast<double>(ds.size()), evaluate(model, ds)});
  }
  return out;
}

// Same loop with the fast-FGSM branch required on.
inline TrainResult train_hardened(const Model& initial, const LabeledDataset& ds,
                                  const TrainConfig& cfg) {
  if (cfg.hardening.kind != Hardening::Kind::fast_fgsm) {
    throw ShapeError("train_hardened requires a fast_fgsm hardening config");
  }
  return train(initial, ds, cfg);
}

inline void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << "epoch,loss,train_accuracy\n";
  char buf[80];
  for (const EpochStats& e : history) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", e.epoch, e.loss, e.accuracy);
    out << buf;
  }
}

}  // namespace overlap

#endif  // OVERLAP_TRAINING_HPP
