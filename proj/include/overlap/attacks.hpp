#ifndef OVERLAP_ATTACKS_HPP
#define OVERLAP_ATTACKS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "overlap/common.hpp"
#include "overlap/model.hpp"
#include "overlap/rng.hpp"
#include "overlap/serialize.hpp"
#include "overlap/tensor.hpp"

namespace overlap {

struct AttackConfig {
  float epsilon = 0.3f;               // L-inf budget
  float alpha = 0.01f;                // step size
  std::size_t pgd_iterations = 250;   // N
  std::size_t mask_iterations = 100;  // T, masked PGD only
  float mask_keep_probability = 0.5f;
  bool keep_true_class = true;
  float momentum = 1.0f;  // MI-FGSM decay mu
  bool random_start = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(epsilon >= 0.0f && epsilon <= 1.0f)) throw ShapeError("epsilon must lie in [0, 1]");
    if (!(alpha > 0.0f)) throw ShapeError("alpha must be > 0");
    if (epsilon > 0.0f && alpha > epsilon) throw ShapeError("alpha must not exceed epsilon");
    if (pgd_iterations < 1) throw ShapeError("pgd_iterations must be >= 1");
    if (mask_iterations < 1) throw ShapeError("mask_iterations must be >= 1");
    if (!(mask_keep_probability > 0.0f && mask_keep_probability <= 1.0f)) {
      throw ShapeError("mask_keep_probability must lie in (0, 1]");
    }
    if (momentum < 0.0f) throw ShapeError("momentum must be >= 0");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["epsilon"] = epsilon;
    j["alpha"] = alpha;
    j["pgd_iterations"] = pgd_iterations;
    j["mask_iterations"] = mask_iterations;
    j["mask_keep_probability"] = mask_keep_probability;
    j["keep_true_class"] = keep_true_class;
    j["momentum"] = momentum;
    j["random_start"] = random_start;
    j["seed"] = seed;
    return j;
  }

  static AttackConfig from_json(const nlohmann::json& j) {
    AttackConfig c;
    c.epsilon = j.value("epsilon", c.epsilon);
    c.alpha = j.value("alpha", c.alpha);
    c.pgd_iterations = j.value("pgd_iterations", c.pgd_iterations);
    c.mask_iterations = j.value("mask_iterations", c.mask_iterations);
    c.mask_keep_probability = j.value("mask_keep_probability", c.mask_keep_probability);
    c.keep_true_class = j.value("keep_true_class", c.keep_true_class);
    c.momentum = j.value("momentum", c.momentum);
    c.random_start = j.value("random_start", c.random_start);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

struct AdversarialBatch {
  Tensor perturbed;                    // x_tilde, in [0, 1]
  Tensor delta;                        // x_tilde - x, inside the epsilon ball
  std::vector<bool> surrogate_fooled;  // surrogate prediction != y on x_tilde
  AttackConfig config;
  std::string surrogate_id;
};

// Per-class keep flags applied to the surrogate's logits.
struct LogitMask {
  std::vector<std::uint8_t> keep;  // 1 = class participates
};

// Independent Bernoulli(keep_probability) per class, the true label forced on
// when requested. Redrawn until at least one non-true class survives so the
// softmax contrast stays nondegenerate.
inline LogitMask sample_mask(std::size_t num_classes, float keep_probability, int true_label,
                             bool keep_true_class, Rng& rng) {
  if (num_classes < 2) throw ShapeError("sample_mask needs num_classes >= 2");
  LogitMask m;
  m.keep.assign(num_classes, 0);
  for (;;) {
    bool any_non_true = false;
    for (std::size_t c = 0; c < num_classes; ++c) {
      m.keep[c] = rng.next_float() < keep_probability ? 1 : 0;
      if (m.keep[c] && static_cast<int>(c) != true_label) any_non_true = true;
    }
    if (keep_true_class && true_label >= 0) m.keep[static_cast<std::size_t>(true_label)] = 1;
    if (any_non_true) return m;
  }
}

namespace detail {


inline void check_attack_inputs(const Model& model, const Tensor& x, const std::vector<int>& y) {
  if (x.shape().empty() || x.shape()[0] != y.size()) {
    throw ShapeError("attack batch " + shape_to_string(x.shape()) + " vs " +
                     std::to_string(y.size()) + " labels");
  }
  for (int label : y) {
    if (label < 0 || static_cast<std::size_t>(label) >= model.arch.num_classes) {
      throw ShapeError("attack label " + std::to_string(label) + " outside model's " +
                       std::to_string(model.arch.num_classes) + " classes");
    }
  }
  for (float v : x.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ShapeError("attack input outside [0, 1]");
  }
}

// Gradient of the surrogate loss at clamp(x + delta, 0, 1), optionally with a
// per-sample logit mask. The box clamp is applied outside the tape
// (straight-through), so the returned gradient plays the role of grad
// w.r.t. delta.
inline std::vector<float> input_gradient(const Model& model, const Tensor& x,
                                         const std::vector<float>& delta,
                                         const std::vector<int>& y,
                                         const std::vector<float>* logit_mask) {
  Tensor x_cur(x.shape(), true);
  for (std::size_t i = 0; i < x.size(); ++i)
    x_cur.at(i) = std::clamp(x.at(i) + delta[i], 0.0f, 1.0f);
  Tape tape;
  Tensor logits = forward(tape, model, x_cur);
  if (logit_mask != nullptr) {
    Tensor mask = Tensor::from_values(logits.shape(), *logit_mask);
    logits = tape.mul(logits, mask);
  }
  Tensor loss = tape.softmax_cross_entropy(logits, y);
  tape.backward(loss);
  return x_cur.grad();
}

inline AdversarialBatch finalize(const Model& model, const Tensor& x, const std::vector<int>& y,
                                 const std::vector<float>& delta, const AttackConfig& cfg) {
  AdversarialBatch out;
  out.config = cfg;
  out.surrogate_id = model.id();
  Tensor xt(x.shape());
  Tensor d(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xt.at(i) = std::clamp(x.at(i) + delta[i], 0.0f, 1.0f);
    d.at(i) = xt.at(i) - x.at(i);
  }
  out.perturbed = xt;
  out.delta = d;
  const std::vector<int> pred = predict(model, xt);
  out.surrogate_fooled.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out.surrogate_fooled[i] = pred[i] != y[i];
  return out;
}

}  // namespace detail

// Single sign-of-gradient step at the clean input.
inline AdversarialBatch fgsm(const Model& surrogate, const Tensor& x, const std::vector<int>& y,
                             float epsilon) {
  if (!(epsilon >= 0.0f && epsilon <= 1.0f)) throw ShapeError("epsilon must lie in [0, 1]");
  detail::check_attack_inputs(surrogate, x, y);
  const Model model = frozen_clone(surrogate);
  std::vector<float> delta(x.size(), 0.0f);
  const std::vector<float> g = detail::input_gradient(model, x, delta, y, nullptr);
  for (std::size_t i = 0; i < x.size(); ++i) delta[i] = epsilon * detail::sign_of(g[i]);
  AttackConfig cfg;
  cfg.epsilon = epsilon;
  cfg.alpha = epsilon > 0.0f ? epsilon : cfg.alpha;
  cfg.pgd_iterations = 1;
  cfg.random_start = false;
  return detail::finalize(model, x, y, delta, cfg);
}

// N iterations of projected sign steps inside the epsilon ball and unit box.
inline AdversarialBatch pgd(const Model& surrogate, const Tensor& x, const std::vector<int>& y,
                            const AttackConfig& cfg) {
  cfg.validate();
  detail::check_attack_inputs(surrogate, x, y);
  const Model model = frozen_clone(surrogate);
  std::vector<float> delta(x.size(), 0.0f);
  if (cfg.random_start) {
    Rng rng(mix_seed({cfg.seed, 0x70676473}));
    for (float& d : delta) d = rng.uniform(-cfg.epsilon, cfg.epsilon);
  }
  for (std::size_t it = 0; it < cfg.pgd_iterations; ++it) {
    const std::vector<float> g = detail::input_gradient(model, x, delta, y, nullptr);
    for (std::size_t i = 0; i < x.size(); ++i) {
      delta[i] = std::clamp(delta[i] + cfg.alpha * detail::sign_of(g[i]), -cfg.epsilon,
                            cfg.epsilon);
    }
  }
  return detail::finalize(model, x, y, delta, cfg);
}

// PGD with an L1-normalized gradient momentum buffer ahead of the sign step.
inline AdversarialBatch mi_fgsm(const Model& surrogate, const Tensor& x, const std::vector<int>& y,
                                const AttackConfig& cfg) {
  cfg.validate();
  detail::check_attack_inputs(surrogate, x, y);
  const Model model = frozen_clone(surrogate);
  const std::size_t n = x.shape()[0];
  const std::size_t per = x.size() / n;
  std::vector<float> delta(x.size(), 0.0f);
  if (cfg.random_start) {
    Rng rng(mix_seed({cfg.seed, 0x6d696673}));
    for (float& d : delta) d = rng.uniform(-cfg.epsilon, cfg.epsilon);
  }
  std::vector<float> buf(x.size(), 0.0f);
  for (std::size_t it = 0; it < cfg.pgd_iterations; ++it) {
    const std::vector<float> g = detail::input_gradient(model, x, delta, y, nullptr);
    for (std::size_t s = 0; s < n; ++s) {
      double l1 = 0.0;
      for (std::size_t i = 0; i < per; ++i) l1 += std::fabs(static_cast<double>(g[s * per + i]));
      // all-zero gradient: contribute nothing rather than divide by zero
      const float inv = l1 > 0.0 ? static_cast<float>(1.0 / l1) : 0.0f;
      for (std::size_t i = 0; i < per; ++i) {
        const std::size_t idx = s * per + i;
        buf[idx] = cfg.momentum * buf[idx] + g[idx] * inv;
      }
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      delta[i] = std::clamp(delta[i] + cfg.alpha * detail::sign_of(buf[i]), -cfg.epsilon,
                            cfg.epsilon);
    }
  }
  return detail::finalize(model, x, y, delta, cfg);
}

// Masked PGD: every PGD iteration averages T candidate steps, each taken
// under a fresh random logit mask per sample, simulating uncertainty about
// which classes the victim shares. Averaging clamped candidates keeps the
// result inside the epsilon ball.
inline AdversarialBatch masked_pgd(const Model& surrogate, const Tensor& x,
                                   const std::vector<int>& y, const AttackConfig& cfg) {
  cfg.validate();
  detail::check_attack_inputs(surrogate, x, y);
  const Model model = frozen_clone(surrogate);
  const std::size_t n = x.shape()[0];
  const std::size_t classes = model.arch.num_classes;
  std::vector<float> delta(x.size(), 0.0f);
  if (cfg.random_start) {
    Rng start_rng(mix_seed({cfg.seed, 0x6d706773}));
    for (float& d : delta) d = start_rng.uniform(-cfg.epsilon, cfg.epsilon);
  }
  Rng mask_rng(mix_seed({cfg.seed, 0x6d61736b}));
  std::vector<float> mask_values(n * classes);
  std::vector<float> accum(x.size());
  std::vector<float> candidate(x.size());
  for (std::size_t it = 0; it < cfg.pgd_iterations; ++it) {
    for (std::size_t j = 0; j < cfg.mask_iterations; ++j) {
      for (std::size_t s = 0; s < n; ++s) {
        const LogitMask m = sample_mask(classes, cfg.mask_keep_probability, y[s],
                                        cfg.keep_true_class, mask_rng);
        for (std::size_t c = 0; c < classes; ++c)
          mask_values[s * classes + c] = static_cast<float>(m.keep[c]);
      }
      const std::vector<float> g = detail::input_gradient(model, x, delta, y, &mask_values);
      for (std::size_t i = 0; i < x.size(); ++i) {
        candidate[i] = std::clamp(delta[i] + cfg.alpha * detail::sign_of(g[i]), -cfg.epsilon,
                                  cfg.epsilon);
      }
      if (j == 0) {
        accum = candidate;
      } else {
        for (std::size_t i = 0; i < x.size(); ++i) accum[i] += candidate[i];
      }
    }
    const float inv_t = 1.0f / static_cast<float>(cfg.mask_iterations);
    for (std::size_t i = 0; i < x.size(); ++i) delta[i] = accum[i] * inv_t;
  }
  return detail::finalize(model, x, y, delta, cfg);
}

enum class AttackKind { fgsm, pgd, mi_fgsm, masked_pgd };

inline const char* attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::mi_fgsm: return "mi_fgsm";
    case AttackKind::masked_pgd: return "masked_pgd";
  }
  return "unknown";
}

inline AttackKind attack_kind_from_name(const std::string& name) {
  if (name == "fgsm") return AttackKind::fgsm;
  if (name == "pgd") return AttackKind::pgd;
  if (name == "mi_fgsm") return AttackKind::mi_fgsm;
  if (name == "masked_pgd") return AttackKind::masked_pgd;
  throw FormatError("unknown attack kind '" + name + "'");
}

inline AdversarialBatch run_attack(AttackKind kind, const Model& surrogate, const Tensor& x,
                                   const std::vector<int>& y, const AttackConfig& cfg) {
  switch (kind) {
    case AttackKind::fgsm: return fgsm(surrogate, x, y, cfg.epsilon);
    case AttackKind::pgd: return pgd(surrogate, x, y, cfg);
    case AttackKind::mi_fgsm: return mi_fgsm(surrogate, x, y, cfg);
    case AttackKind::masked_pgd: return masked_pgd(surrogate, x, y, cfg);
  }
  throw ShapeError("unhandled attack kind");
}

// Container + JSON sidecar round trip for adversarial batches.
inline void save_adversarial_batch(const AdversarialBatch& batch, const std::string& bin_path,
                                   const std::string& sidecar_path) {
  nlohmann::json desc;
  desc["kind"] = "adversarial_batch";
  write_container(bin_path, desc.dump(),
                  {{"perturbed", batch.perturbed}, {"delta", batch.delta}});
  nlohmann::json side;
  side["config"] = batch.config.to_json();
  side["surrogate_id"] = batch.surrogate_id;
  side["fooled"] = std::vector<bool>(batch.surrogate_fooled.begin(), batch.surrogate_fooled.end());
  std::ofstream out(sidecar_path);
  if (!out) throw FormatError("cannot open " + sidecar_path + " for writing");
  out << side.dump(2) << "\n";
}

inline AdversarialBatch load_adversarial_batch(const std::string& bin_path,
                                               const std::string& sidecar_path) {
  Container c = read_container(bin_path);
  nlohmann::json desc = nlohmann::json::parse(c.descriptor_json, nullptr, false);
  if (desc.is_discarded() || desc.value("kind", "") != std::string("adversarial_batch")) {
    throw FormatError(bin_path + ": not an adversarial batch container");
  }
  AdversarialBatch out;
  for (NamedTensor& nt : c.tensors) {
    if (nt.name == "perturbed") out.perturbed = nt.tensor;
    else if (nt.name == "delta") out.delta = nt.tensor;
    else throw FormatError(bin_path + ": unexpected tensor '" + nt.name + "'");
  }
  if (out.perturbed.size() == 0 || out.delta.size() == 0) {
    throw FormatError(bin_path + ": missing perturbed/delta tensors");
  }
  std::ifstream in(sidecar_path);
  if (!in) throw FormatError("cannot open " + sidecar_path);
  nlohmann::json side;
  try {
    in >> side;
    out.config = AttackConfig::from_json(side.at("config"));
    out.surrogate_id = side.value("surrogate_id", "");
    const std::vector<bool> fooled = side.at("fooled").get<std::vector<bool>>();
    out.surrogate_fooled.assign(fooled.begin(), fooled.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(sidecar_path + ": bad sidecar: " + e.what());
  }
  return out;
}

}  // namespace overlap

#endif  // OVERLAP_ATTACKS_HPP
