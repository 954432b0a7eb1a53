#ifndef OVERLAP_TENSOR_HPP
#define OVERLAP_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "overlap/common.hpp"

namespace overlap {

// Dense float32 n-d array in row-major order. Cheap shared handle: ops on a
// Tape capture copies, so gradients written during backward are visible
// through every handle to the same storage.
class Tensor {
 public:
  Tensor() : d_(std::make_shared<Data>()) {}

  Tensor(std::vector<std::size_t> shape, bool requires_grad = false)
      : d_(std::make_shared<Data>()) {
    d_->shape = std::move(shape);
    d_->values.assign(element_count(d_->shape), 0.0f);
    d_->requires_grad = requires_grad;
  }

  static Tensor from_values(std::vector<std::size_t> shape, std::vector<float> values,
                            bool requires_grad = false) {
    if (element_count(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_to_string(shape) + " expects " +
                       std::to_string(element_count(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(float v, bool requires_grad = false) {
    return from_values({1}, {v}, requires_grad);
  }

  const std::vector<std::size_t>& shape() const { return d_->shape; }
  std::size_t size() const { return d_->values.size(); }

  std::vector<float>& values() { return d_->values; }
  const std::vector<float>& values() const { return d_->values; }

  float& at(std::size_t i) { return d_->values[i]; }
  float at(std::size_t i) const { return d_->values[i]; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  bool has_grad() const { return !d_->grad.empty(); }

  // Gradient buffer, zero-initialized on first access.
  std::vector<float>& grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0f);
    return d_->grad;
  }
  const std::vector<float>& grad_view() const { return d_->grad; }

  void clear_grad() { d_->grad.clear(); }

  float item() const {
    if (size() != 1) {
      throw ShapeError("item() requires a scalar tensor, got shape " + shape_to_string(shape()));
    }
    return d_->values[0];
  }

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<std::size_t>());
  }

 private:
  struct Data {
    std::vector<std::size_t> shape{};
    std::vector<float> values{};
    std::vector<float> grad{};
    bool requires_grad = false;
  };
  std::shared_ptr<Data> d_;
};

// Records executed ops in order; backward replays them strictly reversed.
// A tape is rebuilt per forward pass and consumed by a single backward call.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor matmul(Tensor a, Tensor b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
      throw ShapeError("matmul dimension mismatch: " + shape_to_string(a.shape()) + " x " +
                       shape_to_string(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out({m, n}, a.requires_grad() || b.requires_grad());
    const float* av = a.values().data();
    const float* bv = b.values().data();
    float* ov = out.values().data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        const float aik = av[i * k + kk];
        const float* brow = bv + kk * n;
        float* orow = ov + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
      }
    }
    check_finite(out, "matmul");
    record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const std::vector<float>& go = out.grad();
      if (a.requires_grad()) {
        std::vector<float>& ga = a.grad();
        const float* bv2 = b.values().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const float g = go[i * n + j];
            for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += g * bv2[kk * n + j];
          }
      }
      if (b.requires_grad()) {
        std::vector<float>& gb = b.grad();
        const float* av2 = a.values().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const float aik = av2[i * k + kk];
            for (std::size_t j = 0; j < n; ++j) gb[kk * n + j] += aik * go[i * n + j];
          }
      }
    });
    return out;
  }

  // Cross-correlation with zero padding. x: [batch, cin, h, w],
  // kernel: [cout, cin, kh, kw].
  Tensor conv2d(Tensor x, Tensor kernel, std::size_t stride, std::size_t padding) {
    if (x.shape().size() != 4 || kernel.shape().size() != 4) {
      throw ShapeError("conv2d expects 4-d input and kernel, got " + shape_to_string(x.shape()) +
                       " and " + shape_to_string(kernel.shape()));
    }
    if (stride == 0) throw ShapeError("conv2d stride must be >= 1");
    const std::size_t batch = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    const std::size_t cout = kernel.shape()[0], kcin = kernel.shape()[1], kh = kernel.shape()[2],
                      kw = kernel.shape()[3];
    if (kcin != cin) {
      throw ShapeError("conv2d channel mismatch: input has " + std::to_string(cin) +
                       ", kernel expects " + std::to_string(kcin));
    }
    if (kh > h + 2 * padding || kw > w + 2 * padding) {
      throw ShapeError("conv2d kernel " + shape_to_string(kernel.shape()) +
                       " larger than padded input " + shape_to_string(x.shape()));
    }
    const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::size_t ow = (w + 2 * padding - kw) / stride + 1;
    Tensor out({batch, cout, oh, ow}, x.requires_grad() || kernel.requires_grad());
    const float* xv = x.values().data();
    const float* kv = kernel.values().data();
    float* ov = out.values().data();
    auto xidx = [=](std::size_t b, std::size_t c, std::size_t i, std::size_t j) {
      return ((b * cin + c) * h + i) * w + j;
    };
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t oc = 0; oc < cout; ++oc)
        for (std::size_t oi = 0; oi < oh; ++oi)
          for (std::size_t oj = 0; oj < ow; ++oj) {
            float acc = 0.0f;
            for (std::size_t ic = 0; ic < cin; ++ic)
              for (std::size_t ki = 0; ki < kh; ++ki)
                for (std::size_t kj = 0; kj < kw; ++kj) {
                  const std::ptrdiff_t ii =
                      static_cast<std::ptrdiff_t>(oi * stride + ki) -
                      static_cast<std::ptrdiff_t>(padding);
                  const std::ptrdiff_t jj =
                      static_cast<std::ptrdiff_t>(oj * stride + kj) -
                      static_cast<std::ptrdiff_t>(padding);
                  if (ii < 0 || jj < 0 || ii >= static_cast<std::ptrdiff_t>(h) ||
                      jj >= static_cast<std::ptrdiff_t>(w))
                    continue;
                  acc += xv[xidx(b, ic, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj))] *
                         kv[((oc * cin + ic) * kh + ki) * kw + kj];
                }
            ov[((b * cout + oc) * oh + oi) * ow + oj] = acc;
          }
    check_finite(out, "conv2d");
    record([x, kernel, out, batch, cin, h, w, cout, kh, kw, oh, ow, stride, padding]() mutable {
      if (!out.has_grad()) return;
      const std::vector<float>& go = out.grad();
      const bool need_x = x.requires_grad();
      const bool need_k = kernel.requires_grad();
      if (!need_x && !need_k) return;
      float* gx = need_x ? x.grad().data() : nullptr;
      float* gk = need_k ? kernel.grad().data() : nullptr;
      const float* xv = x.values().data();
      const float* kv = kernel.values().data();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t oc = 0; oc < cout; ++oc)
          for (std::size_t oi = 0; oi < oh; ++oi)
            for (std::size_t oj = 0; oj < ow; ++oj) {
              const float g = go[((b * cout + oc) * oh + oi) * ow + oj];
              if (g == 0.0f) continue;
              for (std::size_t ic = 0; ic < cin; ++ic)
                for (std::size_t ki = 0; ki < kh; ++ki)
                  for (std::size_t kj = 0; kj < kw; ++kj) {
                    const std::ptrdiff_t ii =
                        static_cast<std::ptrdiff_t>(oi * stride + ki) -
                        static_cast<std::ptrdiff_t>(padding);
                    const std::ptrdiff_t jj =
                        static_cast<std::ptrdiff_t>(oj * stride + kj) -
                        static_cast<std::ptrdiff_t>(padding);
                    if (ii < 0 || jj < 0 || ii >= static_cast<std::ptrdiff_t>(h) ||
                        jj >= static_cast<std::ptrdiff_t>(w))
                      continue;
                    const std::size_t xi =
                        ((b * cin + ic) * h + static_cast<std::size_t>(ii)) * w +
                        static_cast<std::size_t>(jj);
                    const std::size_t kidx = ((oc * cin + ic) * kh + ki) * kw + kj;
                    if (need_x) gx[xi] += g * kv[kidx];
                    if (need_k) gk[kidx] += g * xv[xi];
                  }
            }
    });
    return out;
  }

  // Non-overlapping average pooling with window == stride; trailing rows or
  // columns that do not fill a window are dropped.
  Tensor avg_pool2d(Tensor x, std::size_t window) {
    if (x.shape().size() != 4) {
      throw ShapeError("avg_pool2d expects 4-d input, got " + shape_to_string(x.shape()));
    }
    if (window == 0) throw ShapeError("avg_pool2d window must be >= 1");
    const std::size_t batch = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    const std::size_t oh = h / window, ow = w / window;
    if (oh == 0 || ow == 0) {
      throw ShapeError("avg_pool2d window " + std::to_string(window) + " larger than input " +
                       shape_to_string(x.shape()));
    }
    Tensor out({batch, c, oh, ow}, x.requires_grad());
    const float inv = 1.0f / static_cast<float>(window * window);
    const float* xv = x.values().data();
    float* ov = out.values().data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oi = 0; oi < oh; ++oi)
          for (std::size_t oj = 0; oj < ow; ++oj) {
            float acc = 0.0f;
            for (std::size_t ki = 0; ki < window; ++ki)
              for (std::size_t kj = 0; kj < window; ++kj)
                acc += xv[((b * c + ch) * h + oi * window + ki) * w + oj * window + kj];
            ov[((b * c + ch) * oh + oi) * ow + oj] = acc * inv;
          }
    check_finite(out, "avg_pool2d");
    record([x, out, batch, c, h, w, oh, ow, window, inv]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const std::vector<float>& go = out.grad();
      float* gx = x.grad().data();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t oi = 0; oi < oh; ++oi)
            for (std::size_t oj = 0; oj < ow; ++oj) {
              const float g = go[((b * c + ch) * oh + oi) * ow + oj] * inv;
              for (std::size_t ki = 0; ki < window; ++ki)
                for (std::size_t kj = 0; kj < window; ++kj)
                  gx[((b * c + ch) * h + oi * window + ki) * w + oj * window + kj] += g;
            }
    });
    return out;
  }

  Tensor relu(Tensor x) {
    Tensor out(x.shape(), x.requires_grad());
    for (std::size_t i = 0; i < x.size(); ++i) out.at(i) = x.at(i) > 0.0f ? x.at(i) : 0.0f;
    check_finite(out, "relu");
    record([x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const std::vector<float>& go = out.grad();
      std::vector<float>& gx = x.grad();
      // subgradient 0 at exactly 0
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (x.at(i) > 0.0f) gx[i] += go[i];
    });
    return out;
  }

  // Elementwise add; b may also have a's shape minus the leading batch
  // dimension, in which case it is broadcast across the batch.
  Tensor add(Tensor a, Tensor b) {
    const bool broadcast = a.shape() != b.shape();
    std::size_t batch = 1;
    if (broadcast) {
      if (a.shape().empty() ||
          std::vector<std::size_t>(a.shape().begin() + 1, a.shape().end()) != b.shape()) {
        throw ShapeError("add shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
      }
      batch = a.shape()[0];
    }
    const std::size_t inner = b.size();
    Tensor out(a.shape(), a.requires_grad() || b.requires_grad());
    if (broadcast) {
      for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < inner; ++j)
          out.at(i * inner + j) = a.at(i * inner + j) + b.at(j);
    } else {
      for (std::size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) + b.at(i);
    }
    check_finite(out, "add");
    record([a, b, out, batch, inner, broadcast]() mutable {
      if (!out.has_grad()) return;
      const std::vector<float>& go = out.grad();
      if (a.requires_grad()) {
        std::vector<float>& ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        std::vector<float>& gb = b.grad();
        if (broadcast) {
          for (std::size_t i = 0; i < batch; ++i)
            for (std::size_t j = 0; j < inner; ++j) gb[j] += go[i * inner + j];
        } else {
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i];
        }
      }
    });
    return out;
  }

  // Adds bias[c] to every spatial position of channel c. x: [batch, c, h, w].
  Tensor add_channel_bias(Tensor x, Tensor bias) {
    if (x.shape().size() != 4 || bias.shape().size() != 1 || bias.shape()[0] != x.shape()[1]) {
      throw ShapeError("add_channel_bias shape mismatch: " + shape_to_string(x.shape()) +
                       " vs " + shape_to_string(bias.shape()));
    }
    const std::size_t batch = x.shape()[0], c = x.shape()[1], plane = x.shape()[2] * x.shape()[3];
    Tensor out(x.shape(), x.requires_grad() || bias.requires_grad());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float bv = bias.at(ch);
        for (std::size_t p = 0; p < plane; ++p)
          out.at((b * c + ch) * plane + p) = x.at((b * c + ch) * plane + p) + bv;
      }
    check_finite(out, "add_channel_bias");
    record([x, bias, out, batch, c, plane]() mutable {
      if (!out.has_grad()) return;
      const std::vector<float>& go = out.grad();
      if (x.requires_grad()) {
        std::vector<float>& gx = x.grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
      }
      if (bias.requires_grad()) {
        std::vector<float>& gb = bias.grad();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < plane; ++p) gb[ch] += go[(b * c + ch) * plane + p];
      }
    });
    return out;
  }

  Tensor scale(Tensor x, float c) {
    Tensor out(x.shape(), x.requires_grad());
    for (std::size_t i = 0; i < x.size(); ++i) out.at(i) = x.at(i) * c;
    check_finite(out, "scale");
    record([x, out, c]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const std::vector<float>& go = out.grad();
      std::vector<float>& gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * c;
    });
    return out;
  }

  // Same-shape elementwise product (carries masked logits, among other uses).
  Tensor mul(Tensor a, Tensor b) {
    if (a.shape() != b.shape()) {
      throw ShapeError("mul shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                       shape_to_string(b.shape()));
    }
    Tensor out(a.shape(), a.requires_grad() || b.requires_grad());
    for (std::size_t i = 0; i < a.size(); ++i) out.at(i) = a.at(i) * b.at(i);
    check_finite(out, "mul");
    record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const std::vector<float>& go = out.grad();
      if (a.requires_grad()) {
        std::vector<float>& ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * b.at(i);
      }
      if (b.requires_grad()) {
        std::vector<float>& gb = b.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * a.at(i);
      }
    });
    return out;
  }

  Tensor mean(Tensor x) {
    if (x.size() == 0) throw ShapeError("mean of empty tensor");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x.at(i));
    Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(x.size())));
    out.set_requires_grad(x.requires_grad());
    check_finite(out, "mean");
    record([x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const float g = out.grad()[0] / static_cast<float>(x.size());
      std::vector<float>& gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
    return out;
  }

  // Copies into a new shape with the same element count.
  Tensor reshape(Tensor x, std::vector<std::size_t> new_shape) {
    if (Tensor::element_count(new_shape) != x.size()) {
      throw ShapeError("reshape " + shape_to_string(x.shape()) + " -> " +
                       shape_to_string(new_shape) + " changes element count");
    }
    Tensor out = Tensor::from_values(std::move(new_shape), x.values(), x.requires_grad());
    record([x, out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const std::vector<float>& go = out.grad();
      std::vector<float>& gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    });
    return out;
  }

  // Mean over the batch of -log softmax(logits)[label], stabilized by
  // subtracting the per-row max. Row sums accumulate in double so saturated
  // rows keep their tiny but nonzero losses.
  Tensor softmax_cross_entropy(Tensor logits, std::vector<int> labels) {
    if (logits.shape().size() != 2) {
      throw ShapeError("softmax_cross_entropy expects [batch, classes] logits, got " +
                       shape_to_string(logits.shape()));
    }
    const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
    if (labels.size() != batch) {
      throw ShapeError("softmax_cross_entropy got " + std::to_string(labels.size()) +
                       " labels for batch " + std::to_string(batch));
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= classes) {
        throw ShapeError("label " + std::to_string(y) + " out of range [0, " +
                         std::to_string(classes) + ")");
      }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
      float mx = logits.at(i * classes);
      for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, logits.at(i * classes + j));
      double sum = 0.0;
      for (std::size_t j = 0; j < classes; ++j)
        sum += std::exp(static_cast<double>(logits.at(i * classes + j) - mx));
      const double row = std::log(sum) -
                         static_cast<double>(logits.at(i * classes + static_cast<std::size_t>(labels[i])) - mx);
      total += std::max(row, 0.0);
    }
    Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(batch)));
    out.set_requires_grad(logits.requires_grad());
    check_finite(out, "softmax_cross_entropy");
    record([logits, labels, out, batch, classes]() mutable {
      if (!out.has_grad() || !logits.requires_grad()) return;
      const float g = out.grad()[0] / static_cast<float>(batch);
      std::vector<float>& gl = logits.grad();
      for (std::size_t i = 0; i < batch; ++i) {
        float mx = logits.at(i * classes);
        for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, logits.at(i * classes + j));
        double sum = 0.0;
        for (std::size_t j = 0; j < classes; ++j)
          sum += std::exp(static_cast<double>(logits.at(i * classes + j) - mx));
        for (std::size_t j = 0; j < classes; ++j) {
          const float p = static_cast<float>(
              std::exp(static_cast<double>(logits.at(i * classes + j) - mx)) / sum);
          const float onehot = (static_cast<std::size_t>(labels[i]) == j) ? 1.0f : 0.0f;
          gl[i * classes + j] += g * (p - onehot);
        }
      }
    });
    return out;
  }

  // Seeds d(loss)/d(loss) = 1 and replays ops in reverse execution order.
  void backward(Tensor& loss) {
    if (loss.size() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " +
                       shape_to_string(loss.shape()));
    }
    if (consumed_) {
      throw std::logic_error("backward called twice on the same tape; re-run the forward pass");
    }
    consumed_ = true;
    loss.grad()[0] += 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  std::size_t op_count() const { return nodes_.size(); }

 private:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  static void check_finite(const Tensor& t, const char* op) {
    for (float v : t.values()) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string(op) + " produced a non-finite value");
      }
    }
  }

  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

}  // namespace overlap

#endif  // OVERLAP_TENSOR_HPP
