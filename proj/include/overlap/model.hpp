#ifndef OVERLAP_MODEL_HPP
#define OVERLAP_MODEL_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "overlap/common.hpp"
#include "overlap/rng.hpp"
#include "overlap/serialize.hpp"
#include "overlap/tensor.hpp"

namespace overlap {

enum class ArchKind { mlp, cnn };

// Conv blocks are fixed at 3x3 kernels, stride 1, padding 1, each followed by
// ReLU and 2x2 average pooling; only the channel plan varies.
struct ArchSpec {
  ArchKind kind = ArchKind::mlp;
  std::vector<std::size_t> input_shape;  // [d] for mlp, [c, h, w] for cnn
  std::vector<std::size_t> hidden;       // mlp hidden layer widths
  std::vector<std::size_t> channels;     // cnn conv channel plan
  std::size_t num_classes = 0;

  static ArchSpec mlp(std::size_t input_dim, std::vector<std::size_t> hidden_widths,
                      std::size_t num_classes) {
    ArchSpec a;
    a.kind = ArchKind::mlp;
    a.input_shape = {input_dim};
    a.hidden = std::move(hidden_widths);
    a.num_classes = num_classes;
    return a;
  }

  static ArchSpec cnn(std::vector<std::size_t> input_chw, std::vector<std::size_t> channel_plan,
                      std::size_t num_classes) {
    ArchSpec a;
    a.kind = ArchKind::cnn;
    a.input_shape = std::move(input_chw);
    a.channels = std::move(channel_plan);
    a.num_classes = num_classes;
    return a;
  }

  std::size_t input_elements() const { return Tensor::element_count(input_shape); }

  void validate() const {
    if (num_classes < 2) throw ShapeError("arch needs num_classes >= 2");
    if (kind == ArchKind::mlp) {
      if (input_shape.size() != 1 || input_shape[0] == 0) {
        throw ShapeError("mlp arch needs a 1-d input shape, got " + shape_to_string(input_shape));
      }
    } else {
      if (input_shape.size() != 3) {
        throw ShapeError("cnn arch needs [channels, h, w] input shape, got " +
                         shape_to_string(input_shape));
      }
      if (channels.empty()) throw ShapeError("cnn arch needs at least one conv block");
      std::size_t h = input_shape[1], w = input_shape[2];
      for (std::size_t i = 0; i < channels.size(); ++i) {
        // conv keeps h x w (3x3, pad 1); pooling halves it
        h /= 2;
        w /= 2;
        if (h == 0 || w == 0) {
          throw ShapeError("cnn plan pools input " + shape_to_string(input_shape) +
                           " below 1x1 at block " + std::to_string(i));
        }
      }
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["kind"] = kind == ArchKind::mlp ? "mlp" : "cnn";
    j["input_shape"] = input_shape;
    if (kind == ArchKind::mlp) {
      j["hidden"] = hidden;
    } else {
      j["channels"] = channels;
    }
    j["num_classes"] = num_classes;
    return j;
  }

  static ArchSpec from_json(const nlohmann::json& j) {
    ArchSpec a;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "mlp") {
      a.kind = ArchKind::mlp;
      a.hidden = j.value("hidden", std::vector<std::size_t>{});
    } else if (kind == "cnn") {
      a.kind = ArchKind::cnn;
      a.channels = j.at("channels").get<std::vector<std::size_t>>();
    } else {
      throw FormatError("unknown arch kind '" + kind + "'");
    }
    a.input_shape = j.at("input_shape").get<std::vector<std::size_t>>();
    a.num_classes = j.at("num_classes").get<std::size_t>();
    a.validate();
    return a;
  }
};

struct Model {
  ArchSpec arch;
  std::vector<NamedTensor> params;
  std::uint64_t init_seed = 0;

  // Deep copy; the default copy would share parameter storage.
  Model clone() const {
    Model m;
    m.arch = arch;
    m.init_seed = init_seed;
    m.params.reserve(params.size());
    for (const NamedTensor& p : params) {
      Tensor t = Tensor::from_values(p.tensor.shape(), p.tensor.values(), p.tensor.requires_grad());
      m.params.push_back({p.name, std::move(t)});
    }
    return m;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const NamedTensor& p : params) n += p.tensor.size();
    return n;
  }

  std::string id() const {
    return (arch.kind == ArchKind::mlp ? "mlp" : "cnn") + std::string("-c") +
           std::to_string(arch.num_classes) + "-seed" + std::to_string(init_seed);
  }
};

namespace detail {

// Expected (name, shape) parameter plan for an arch, in forward order.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>> param_plan(
    const ArchSpec& arch) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> plan;
  if (arch.kind == ArchKind::mlp) {
    std::vector<std::size_t> widths;
    widths.push_back(arch.input_shape[0]);
    widths.insert(widths.end(), arch.hidden.begin(), arch.hidden.end());
    widths.push_back(arch.num_classes);
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      const std::string tag = "fc" + std::to_string(i);
      plan.push_back({tag + ".weight", {widths[i], widths[i + 1]}});
      plan.push_back({tag + ".bias", {widths[i + 1]}});
    }
  } else {
    std::size_t cin = arch.input_shape[0];
    std::size_t h = arch.input_shape[1], w = arch.input_shape[2];
    for (std::size_t i = 0; i < arch.channels.size(); ++i) {
      const std::string tag = "conv" + std::to_string(i);
      plan.push_back({tag + ".weight", {arch.channels[i], cin, 3, 3}});
      plan.push_back({tag + ".bias", {arch.channels[i]}});
      cin = arch.channels[i];
      h /= 2;
      w /= 2;
    }
    plan.push_back({"head.weight", {cin * h * w, arch.num_classes}});
    plan.push_back({"head.bias", {arch.num_classes}});
  }
  return plan;
}

inline std::size_t fan_in(const std::vector<std::size_t>& shape) {
  if (shape.size() == 2) return shape[0];                       // [in, out] linear weight
  if (shape.size() == 4) return shape[1] * shape[2] * shape[3]; // [cout, cin, kh, kw]
  return shape.empty() ? 1 : shape[0];
}

}  // namespace detail

// Kaiming-uniform weights (bound sqrt(6/fan_in)), zero biases, all draws from
// one counter-based stream so equal (arch, seed) rebuilds bit-identically.
inline Model build_model(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  Model m;
  m.arch = arch;
  m.init_seed = seed;
  Rng rng(seed);
  for (const auto& [name, shape] : detail::param_plan(arch)) {
    Tensor t(shape, true);
    const bool is_weight = name.ends_with(".weight");
    if (is_weight) {
      const float bound =
          std::sqrt(6.0f / static_cast<float>(detail::fan_in(shape)));
      for (float& v : t.values()) v = rng.uniform(-bound, bound);
    }
    m.params.push_back({name, std::move(t)});
  }
  return m;
}

// Logits for a batch; differentiable w.r.t. parameters and the input. MLP
// accepts [batch, d] or any [batch, ...] flattening to d.
inline Tensor forward(Tape& tape, const Model& model, const Tensor& batch) {
  if (batch.shape().empty() || batch.shape()[0] == 0) {
    throw ShapeError("forward needs a non-empty batch, got " + shape_to_string(batch.shape()));
  }
  const std::size_t n = batch.shape()[0];
  const std::size_t per_sample = batch.size() / n;
  if (model.arch.kind == ArchKind::mlp) {
    if (per_sample != model.arch.input_elements()) {
      throw ShapeError("batch " + shape_to_string(batch.shape()) + " does not match mlp input " +
                       shape_to_string(model.arch.input_shape));
    }
    Tensor x = batch.shape().size() == 2 ? batch : tape.reshape(batch, {n, per_sample});
    const std::size_t layers = model.params.size() / 2;
    for (std::size_t i = 0; i < layers; ++i) {
      x = tape.add(tape.matmul(x, model.params[2 * i].tensor), model.params[2 * i + 1].tensor);
      if (i + 1 < layers) x = tape.relu(x);
    }
    return x;
  }
  if (batch.shape().size() != 4 ||
      std::vector<std::size_t>(batch.shape().begin() + 1, batch.shape().end()) !=
          model.arch.input_shape) {
    throw ShapeError("batch " + shape_to_string(batch.shape()) + " does not match cnn input " +
                     shape_to_string(model.arch.input_shape));
  }
  Tensor x = batch;
  const std::size_t blocks = model.arch.channels.size();
  for (std::size_t i = 0; i < blocks; ++i) {
    x = tape.conv2d(x, model.params[2 * i].tensor, 1, 1);
    x = tape.add_channel_bias(x, model.params[2 * i + 1].tensor);
    x = tape.relu(x);
    x = tape.avg_pool2d(x, 2);
  }
  x = tape.reshape(x, {n, x.size() / n});
  x = tape.add(tape.matmul(x, model.params[2 * blocks].tensor),
               model.params[2 * blocks + 1].tensor);
  return x;
}

// Deep copy with parameter gradients detached. Attacks work on a frozen
// clone so concurrent runs against one trained model never share gradient
// buffers.
inline Model frozen_clone(const Model& model) {
  Model m = model.clone();
  for (NamedTensor& p : m.params) p.tensor.set_requires_grad(false);
  return m;
}

// Per-row argmax, ties broken toward the lowest class index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits.at(i * c + j) > logits.at(i * c + best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline std::vector<int> predict(const Model& model, const Tensor& batch) {
  Tape tape;
  return argmax_rows(forward(tape, model, batch));
}

inline void save_model(const Model& model, const std::string& path) {
  nlohmann::json desc = model.arch.to_json();
  desc["init_seed"] = model.init_seed;
  write_container(path, desc.dump(), model.params);
}

inline Model load_model(const std::string& path) {
  Container c = read_container(path);
  nlohmann::json desc;
  try {
    desc = nlohmann::json::parse(c.descriptor_json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad checkpoint descriptor: " + e.what());
  }
  Model m;
  try {
    m.arch = ArchSpec::from_json(desc);
    m.init_seed = desc.value("init_seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad checkpoint descriptor: " + e.what());
  }
  const auto plan = detail::param_plan(m.arch);
  if (c.tensors.size() != plan.size()) {
    throw FormatError(path + ": checkpoint holds " + std::to_string(c.tensors.size()) +
                      " tensors, arch expects " + std::to_string(plan.size()));
  }
  for (std::size_t i = 0; i < plan.size(); ++i) {
    if (c.tensors[i].name != plan[i].first || c.tensors[i].tensor.shape() != plan[i].second) {
      throw FormatError(path + ": parameter " + std::to_string(i) + " is " + c.tensors[i].name +
                        shape_to_string(c.tensors[i].tensor.shape()) + ", arch expects " +
                        plan[i].first + shape_to_string(plan[i].second));
    }
    c.tensors[i].tensor.set_requires_grad(true);
  }
  m.params = std::move(c.tensors);
  return m;
}

}  // namespace overlap

#endif  // OVERLAP_MODEL_HPP
