#pragma once

// Minimal dense tensor library with reverse-mode autodiff.
//
// Tensors are float32, NCHW row-major, value-semantic handles onto shared
// nodes.  Every differentiable op records its inputs and a backward closure;
// Tape replays the closures in reverse topological order.  Reductions and
// inner products accumulate in double before rounding to float32 so results
// are deterministic and well conditioned for finite-difference checks.

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace afenet {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  bool leaf = false;
  std::vector<float> grad;  // sized on first use
  std::vector<Tensor> parents;
  std::function<void(Node&)> backward;  // pulls node.grad into parent grads
  const char* op = "leaf";
  // Pre-rounding value for scalar results, kept alongside the float32 store;
  // finite differences of large reductions need it to stay above noise.
  double hi_scalar = std::numeric_limits<double>::quiet_NaN();

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  // Returns the grad buffer, allocating zeros on first access.
  float* grad_buf();
};

}  // namespace detail

// Thread-local switch: when disabled, ops produce constant results with no
// recorded parents.  Weights keep requires_grad; only taping is suppressed.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> values,
                          bool requires_grad = false);
  static Tensor scalar(float value);
  static Tensor randn(Shape shape, std::mt19937& rng, float stddev = 1.0f,
                      bool requires_grad = false);
  static Tensor uniform(Shape shape, std::mt19937& rng, float lo, float hi,
                        bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int64_t dim(int axis) const;
  int64_t numel() const;
  bool requires_grad() const;

  const float* data() const;
  const std::vector<float>& vec() const;
  // In-place access; valid for leaves only (optimizer updates between steps).
  float* mutable_data();
  float item() const;      // defined scalar (numel == 1) only
  double item_hi() const;  // pre-rounding scalar value when tracked

  // Grad of this tensor after backward(); empty tensor when absent.
  Tensor grad() const;
  const float* grad_data() const;
  void zero_grad();
  void set_requires_grad(bool value);  // leaves only

  std::shared_ptr<detail::Node> node() const { return n_; }
  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> n_;
};

// Integer raster (labels, predictions). Plain data, no autograd.
struct IntTensor {
  Shape shape;
  std::vector<int32_t> v;

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
};

// Op-author helper: allocates the result node and attaches the backward
// closure unless grad recording is off or no parent needs gradients.
Tensor make_op(const char* op, Shape shape, std::vector<float> data,
               std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward);

// ---- elementwise / broadcast ----
// add/sub/mul/divide broadcast with right-aligned singleton semantics.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor affine(const Tensor& x, float scale, float shift);  // scale * x + shift
Tensor clamp(const Tensor& x, float lo, float hi);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);

// ---- linear algebra ----
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// Batched matmul: (..., M, K) x (..., K, N); leading dims must match exactly.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& x);

// ---- convolution / pooling / resampling ----
// input (N, Cin, H, W), weight (Cout, Cin/groups, Kh, Kw), bias (Cout) or
// undefined.  Zero padding on all sides.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride = 1, int padding = 0, int groups = 1);

enum class PoolKind {
  global_avg,    // (N,C,H,W) -> (N,C,1,1)
  channel_avg,   // (N,C,H,W) -> (N,1,H,W)
  channel_max,   // (N,C,H,W) -> (N,1,H,W)
};
Tensor pool(const Tensor& x, PoolKind kind);
Tensor avg_pool2d(const Tensor& x, int factor);  // kernel = stride = factor
Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding);

enum class UpsampleMode { nearest, bilinear };
// Integer-factor upsampling; bilinear uses half-pixel source mapping.
Tensor upsample(const Tensor& x, int factor, UpsampleMode mode);

// ---- shape ops ----
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);
Tensor reshape(const Tensor& x, Shape shape);
Tensor flip(const Tensor& x, int axis);
Tensor stack0(const std::vector<Tensor>& xs);  // new leading axis

// ---- reductions ----
Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar
Tensor sum_axes(const Tensor& x, std::vector<int> axes, bool keepdims);

// Per-(n, c) normalization over the spatial extent with per-channel affine:
// y = gamma[c] * (x - mu) / sqrt(var + eps) + beta[c], population variance.
Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    float eps = 1e-5f);

// ---- graph execution ----
class Tape {
 public:
  explicit Tape(const Tensor& root);
  // Seeds d(root)/d(root) = 1 and replays adjoints; root must be scalar.
  void backward();
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<std::shared_ptr<detail::Node>> order_;  // topological, root last
};

void backward(const Tensor& loss);

// Argmax over axis 1 of (N, K, H, W); ties take the lowest class index.
IntTensor argmax_channels(const Tensor& logits);
Tensor one_hot(const IntTensor& labels, int num_classes);  // (N,K,H,W) constant

// Central finite-difference check of f at the given leaf inputs.
// Returns the max relative error max(|a - n|) / max(1, |a|, |n|) over all
// input elements; inputs are restored afterwards.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, double eps = 1e-3);

// SplitMix64 stream derivation: a stable 64-bit seed for substream `stream`
// of `seed`.  Parallel per-sample / per-step generators built on this stay
// independent of scheduling order.
uint64_t mix_seed(uint64_t seed, uint64_t stream);

}  // namespace afenet
