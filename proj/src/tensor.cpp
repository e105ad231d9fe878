#include "afenet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace afenet {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument("tensor: " + msg);
}

void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

thread_local bool g_grad_enabled = true;

// Right-aligned broadcast of two shapes; singleton dims stretch.
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const int ra = static_cast<int>(a.size());
  const int rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  Shape out(r);
  for (int i = 0; i < r; ++i) {
    const int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    const int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      fail(std::string(op) + ": shapes " + shape_str(a) + " and " +
           shape_str(b) + " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides with 0 on broadcast axes, aligned to `out` rank.
std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  const int r = static_cast<int>(out.size());
  const int rs = static_cast<int>(s.size());
  std::vector<int64_t> st(r, 0);
  int64_t acc = 1;
  for (int i = rs - 1; i >= 0; --i) {
    st[i + (r - rs)] = (s[i] == 1) ? 0 : acc;
    acc *= s[i];
  }
  return st;
}

// Walks `out` in row-major order calling f(out_i, a_i, b_i).
template <class F>
void for_each_pair(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
  const int r = static_cast<int>(out.size());
  const int64_t total = shape_numel(out);
  const auto sta = broadcast_strides(sa, out);
  const auto stb = broadcast_strides(sb, out);
  std::vector<int64_t> idx(r, 0);
  int64_t ai = 0, bi = 0;
  for (int64_t oi = 0; oi < total; ++oi) {
    f(oi, ai, bi);
    for (int k = r - 1; k >= 0; --k) {
      ++idx[k];
      ai += sta[k];
      bi += stb[k];
      if (idx[k] < out[k]) break;
      ai -= sta[k] * out[k];
      bi -= stb[k] * out[k];
      idx[k] = 0;
    }
  }
}

// Double-precision scratch for one parent's gradient; folded in on flush so
// scattered accumulation stays well conditioned.
struct GradAccum {
  detail::Node* p = nullptr;
  std::vector<double> buf;

  explicit GradAccum(const Tensor& t) {
    if (t.defined() && t.requires_grad()) {
      p = t.node().get();
      buf.assign(static_cast<size_t>(p->numel()), 0.0);
    }
  }
  bool active() const { return p != nullptr; }
  void add(int64_t i, double v) { buf[static_cast<size_t>(i)] += v; }
  void flush() {
    if (!active()) return;
    float* g = p->grad_buf();
    for (size_t i = 0; i < buf.size(); ++i) g[i] += static_cast<float>(buf[i]);
  }
};

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    fail(std::string(op) + ": axis out of range for rank " +
         std::to_string(rank));
  return axis;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_fwd(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_bwd(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

double sigmoid_fwd(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Pre-rounding value of a scalar tensor when tracked, float value otherwise.
double scalar_hi(const Tensor& t) {
  const double hi = t.node()->hi_scalar;
  return std::isnan(hi) ? static_cast<double>(t.data()[0]) : hi;
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

float* detail::Node::grad_buf() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad.data();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- Tensor ----

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.n_ = std::move(node);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  for (int64_t d : shape) check(d > 0, "full: non-positive dim");
  auto n = std::make_shared<detail::Node>();
  n->data.assign(static_cast<size_t>(shape_numel(shape)), value);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  n->leaf = true;
  return wrap(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> values,
                         bool requires_grad) {
  check(shape_numel(shape) == static_cast<int64_t>(values.size()),
        "from_data: size mismatch for shape " + shape_str(shape));
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  n->leaf = true;
  return wrap(std::move(n));
}

Tensor Tensor::scalar(float value) { return full({1}, value, false); }

Tensor Tensor::randn(Shape shape, std::mt19937& rng, float stddev,
                     bool requires_grad) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return from_data(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::uniform(Shape shape, std::mt19937& rng, float lo, float hi,
                       bool requires_grad) {
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return from_data(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
  check(defined(), "shape of undefined tensor");
  return n_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int64_t Tensor::dim(int axis) const {
  const Shape& s = shape();
  axis = normalize_axis(axis, static_cast<int>(s.size()), "dim");
  return s[axis];
}

int64_t Tensor::numel() const {
  check(defined(), "numel of undefined tensor");
  return n_->numel();
}

bool Tensor::requires_grad() const { return defined() && n_->requires_grad; }

const float* Tensor::data() const {
  check(defined(), "data of undefined tensor");
  return n_->data.data();
}

const std::vector<float>& Tensor::vec() const {
  check(defined(), "vec of undefined tensor");
  return n_->data;
}

float* Tensor::mutable_data() {
  check(defined(), "mutable_data of undefined tensor");
  check(n_->leaf, "mutable_data: only leaves may be mutated");
  return n_->data.data();
}

float Tensor::item() const {
  check(defined() && numel() == 1, "item: tensor is not a scalar");
  return n_->data[0];
}

double Tensor::item_hi() const {
  check(defined() && numel() == 1, "item_hi: tensor is not a scalar");
  return std::isnan(n_->hi_scalar) ? static_cast<double>(n_->data[0])
                                   : n_->hi_scalar;
}

Tensor Tensor::grad() const {
  check(defined(), "grad of undefined tensor");
  if (n_->grad.empty()) return Tensor();
  return from_data(n_->shape, n_->grad, false);
}

const float* Tensor::grad_data() const {
  check(defined(), "grad of undefined tensor");
  return n_->grad.empty() ? nullptr : n_->grad.data();
}

void Tensor::zero_grad() {
  check(defined(), "zero_grad of undefined tensor");
  n_->grad.clear();
}

void Tensor::set_requires_grad(bool value) {
  check(defined() && n_->leaf, "set_requires_grad: leaves only");
  n_->requires_grad = value;
}

Tensor make_op(const char* op, Shape shape, std::vector<float> data,
               std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward) {
  check(shape_numel(shape) == static_cast<int64_t>(data.size()),
        std::string(op) + ": result size mismatch");
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool need = false;
  if (g_grad_enabled)
    for (const Tensor& p : parents)
      if (p.defined() && p.requires_grad()) need = true;
  if (need) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(n));
}

// ---- elementwise / broadcast ----

namespace {

enum class BinOp { add, sub, mul, div };

Tensor binary_op(const char* name, BinOp kind, const Tensor& a,
                 const Tensor& b) {
  check(a.defined() && b.defined(), std::string(name) + ": undefined input");
  const Shape out = broadcast_shape(a.shape(), b.shape(), name);
  std::vector<float> y(static_cast<size_t>(shape_numel(out)));
  const float* pa = a.data();
  const float* pb = b.data();
  for_each_pair(out, a.shape(), b.shape(), [&](int64_t oi, int64_t ai,
                                               int64_t bi) {
    const double va = pa[ai], vb = pb[bi];
    double r = 0.0;
    switch (kind) {
      case BinOp::add: r = va + vb; break;
      case BinOp::sub: r = va - vb; break;
      case BinOp::mul: r = va * vb; break;
      case BinOp::div: r = va / vb; break;
    }
    y[static_cast<size_t>(oi)] = static_cast<float>(r);
  });
  Shape sa = a.shape(), sb = b.shape();
  Tensor result = make_op(name, out, std::move(y), {a, b},
                 [name, kind, a, b, out, sa, sb](detail::Node& n) {
                   GradAccum ga(a), gb(b);
                   const float* g = n.grad.data();
                   const float* pa = a.data();
                   const float* pb = b.data();
                   for_each_pair(out, sa, sb, [&](int64_t oi, int64_t ai,
                                                  int64_t bi) {
                     const double gv = g[oi];
                     switch (kind) {
                       case BinOp::add:
                         if (ga.active()) ga.add(ai, gv);
                         if (gb.active()) gb.add(bi, gv);
                         break;
                       case BinOp::sub:
                         if (ga.active()) ga.add(ai, gv);
                         if (gb.active()) gb.add(bi, -gv);
                         break;
                       case BinOp::mul:
                         if (ga.active()) ga.add(ai, gv * pb[bi]);
                         if (gb.active()) gb.add(bi, gv * pa[ai]);
                         break;
                       case BinOp::div: {
                         const double vb = pb[bi];
                         if (ga.active()) ga.add(ai, gv / vb);
                         if (gb.active()) gb.add(bi, -gv * pa[ai] / (vb * vb));
                         break;
                       }
                     }
                   });
                   ga.flush();
                   gb.flush();
                 });
  if (result.numel() == 1 && a.numel() == 1 && b.numel() == 1) {
    const double va = scalar_hi(a), vb = scalar_hi(b);
    double r = 0.0;
    switch (kind) {
      case BinOp::add: r = va + vb; break;
      case BinOp::sub: r = va - vb; break;
      case BinOp::mul: r = va * vb; break;
      case BinOp::div: r = va / vb; break;
    }
    result.node()->hi_scalar = r;
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op("add", BinOp::add, a, b);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op("sub", BinOp::sub, a, b);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op("mul", BinOp::mul, a, b);
}
Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_op("div", BinOp::div, a, b);
}

Tensor affine(const Tensor& x, float scale, float shift) {
  check(x.defined(), "affine: undefined input");
  std::vector<float> y(x.vec().size());
  const float* px = x.data();
  for (size_t i = 0; i < y.size(); ++i)
    y[i] = static_cast<float>(static_cast<double>(scale) * px[i] + shift);
  Tensor result = make_op("affine", x.shape(), std::move(y), {x},
                          [x, scale](detail::Node& n) {
                            if (!x.requires_grad()) return;
                            float* g = x.node()->grad_buf();
                            for (int64_t i = 0; i < n.numel(); ++i)
                              g[i] += n.grad[static_cast<size_t>(i)] * scale;
                          });
  if (result.numel() == 1 && x.numel() == 1)
    result.node()->hi_scalar =
        static_cast<double>(scale) * scalar_hi(x) + shift;
  return result;
}

Tensor clamp(const Tensor& x, float lo, float hi) {
  check(x.defined(), "clamp: undefined input");
  check(lo <= hi, "clamp: lo > hi");
  std::vector<float> y(x.vec().size());
  const float* px = x.data();
  for (size_t i = 0; i < y.size(); ++i) y[i] = std::min(std::max(px[i], lo), hi);
  return make_op("clamp", x.shape(), std::move(y), {x},
                 [x, lo, hi](detail::Node& n) {
                   if (!x.requires_grad()) return;
                   float* g = x.node()->grad_buf();
                   const float* px = x.data();
                   for (int64_t i = 0; i < n.numel(); ++i) {
                     const float v = px[i];
                     if (v >= lo && v <= hi)
                       g[i] += n.grad[static_cast<size_t>(i)];
                   }
                 });
}

namespace {

Tensor unary_op(const char* name, const Tensor& x, double (*fwd)(double),
                double (*bwd)(double)) {
  check(x.defined(), std::string(name) + ": undefined input");
  std::vector<float> y(x.vec().size());
  const float* px = x.data();
  for (size_t i = 0; i < y.size(); ++i)
    y[i] = static_cast<float>(fwd(px[i]));
  return make_op(name, x.shape(), std::move(y), {x},
                 [x, bwd](detail::Node& n) {
                   if (!x.requires_grad()) return;
                   float* g = x.node()->grad_buf();
                   const float* px = x.data();
                   for (int64_t i = 0; i < n.numel(); ++i)
                     g[i] += static_cast<float>(
                         n.grad[static_cast<size_t>(i)] * bwd(px[i]));
                 });
}

double relu_fwd(double x) { return x > 0.0 ? x : 0.0; }
double relu_bwd(double x) { return x > 0.0 ? 1.0 : 0.0; }
double sigmoid_bwd(double x) {
  const double s = sigmoid_fwd(x);
  return s * (1.0 - s);
}

}  // namespace

Tensor gelu(const Tensor& x) { return unary_op("gelu", x, gelu_fwd, gelu_bwd); }
Tensor sigmoid(const Tensor& x) {
  return unary_op("sigmoid", x, sigmoid_fwd, sigmoid_bwd);
}
Tensor relu(const Tensor& x) { return unary_op("relu", x, relu_fwd, relu_bwd); }

Tensor softmax(const Tensor& x, int axis) {
  check(x.defined(), "softmax: undefined input");
  const Shape& s = x.shape();
  axis = normalize_axis(axis, x.rank(), "softmax");
  const int64_t n_ax = s[axis];
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  for (int i = 0; i < axis; ++i) outer *= s[i];
  std::vector<float> y(x.vec().size());
  const float* px = x.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n_ax * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t k = 0; k < n_ax; ++k)
        mx = std::max(mx, static_cast<double>(px[base + k * inner]));
      double z = 0.0;
      for (int64_t k = 0; k < n_ax; ++k)
        z += std::exp(static_cast<double>(px[base + k * inner]) - mx);
      for (int64_t k = 0; k < n_ax; ++k)
        y[static_cast<size_t>(base + k * inner)] = static_cast<float>(
            std::exp(static_cast<double>(px[base + k * inner]) - mx) / z);
    }
  return make_op(
      "softmax", s, std::move(y), {x},
      [x, n_ax, inner, outer](detail::Node& n) {
        if (!x.requires_grad()) return;
        GradAccum gx(x);
        const float* g = n.grad.data();
        const float* py = n.data.data();
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n_ax * inner + in;
            double dot = 0.0;
            for (int64_t k = 0; k < n_ax; ++k) {
              const int64_t i = base + k * inner;
              dot += static_cast<double>(g[i]) * py[i];
            }
            for (int64_t k = 0; k < n_ax; ++k) {
              const int64_t i = base + k * inner;
              gx.add(i, static_cast<double>(py[i]) * (g[i] - dot));
            }
          }
        gx.flush();
      });
}

// ---- linear algebra ----

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check(x.defined() && weight.defined(), "linear: undefined input");
  check(weight.rank() == 2, "linear: weight must be (out, in)");
  const int64_t in_f = weight.dim(1);
  const int64_t out_f = weight.dim(0);
  check(x.rank() >= 1 && x.shape().back() == in_f,
        "linear: input " + shape_str(x.shape()) + " vs weight " +
            shape_str(weight.shape()));
  if (bias.defined())
    check(bias.rank() == 1 && bias.dim(0) == out_f, "linear: bad bias shape");
  const int64_t m = x.numel() / in_f;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  std::vector<float> y(static_cast<size_t>(m * out_f));
  const float* px = x.data();
  const float* pw = weight.data();
  const float* pb = bias.defined() ? bias.data() : nullptr;
  for (int64_t r = 0; r < m; ++r)
    for (int64_t o = 0; o < out_f; ++o) {
      double acc = pb ? pb[o] : 0.0;
      const float* xr = px + r * in_f;
      const float* wr = pw + o * in_f;
      for (int64_t k = 0; k < in_f; ++k) acc += static_cast<double>(xr[k]) * wr[k];
      y[static_cast<size_t>(r * out_f + o)] = static_cast<float>(acc);
    }
  return make_op(
      "linear", out_shape, std::move(y), {x, weight, bias},
      [x, weight, bias, m, in_f, out_f](detail::Node& n) {
        GradAccum gx(x), gw(weight), gb(bias);
        const float* g = n.grad.data();
        const float* px = x.data();
        const float* pw = weight.data();
        for (int64_t r = 0; r < m; ++r)
          for (int64_t o = 0; o < out_f; ++o) {
            const double gv = g[r * out_f + o];
            if (gv == 0.0) continue;
            if (gb.active()) gb.add(o, gv);
            for (int64_t k = 0; k < in_f; ++k) {
              if (gx.active()) gx.add(r * in_f + k, gv * pw[o * in_f + k]);
              if (gw.active()) gw.add(o * in_f + k, gv * px[r * in_f + k]);
            }
          }
        gx.flush();
        gw.flush();
        gb.flush();
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.defined() && b.defined(), "matmul: undefined input");
  check(a.rank() >= 2 && b.rank() == a.rank(), "matmul: rank mismatch");
  const int r = a.rank();
  for (int i = 0; i < r - 2; ++i)
    check(a.shape()[i] == b.shape()[i], "matmul: batch dims differ");
  const int64_t M = a.shape()[r - 2];
  const int64_t K = a.shape()[r - 1];
  const int64_t N = b.shape()[r - 1];
  check(b.shape()[r - 2] == K, "matmul: inner dims " + shape_str(a.shape()) +
                                   " vs " + shape_str(b.shape()));
  int64_t batch = 1;
  for (int i = 0; i < r - 2; ++i) batch *= a.shape()[i];
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(M);
  out_shape.push_back(N);
  std::vector<float> y(static_cast<size_t>(batch * M * N));
  const float* pa = a.data();
  const float* pb = b.data();
  for (int64_t bt = 0; bt < batch; ++bt) {
    const float* A = pa + bt * M * K;
    const float* B = pb + bt * K * N;
    float* C = y.data() + bt * M * N;
    for (int64_t i = 0; i < M; ++i)
      for (int64_t j = 0; j < N; ++j) {
        double acc = 0.0;
        for (int64_t k = 0; k < K; ++k)
          acc += static_cast<double>(A[i * K + k]) * B[k * N + j];
        C[i * N + j] = static_cast<float>(acc);
      }
  }
  return make_op(
      "matmul", out_shape, std::move(y), {a, b},
      [a, b, batch, M, K, N](detail::Node& n) {
        GradAccum ga(a), gb(b);
        const float* g = n.grad.data();
        const float* pa = a.data();
        const float* pb = b.data();
        for (int64_t bt = 0; bt < batch; ++bt) {
          const float* A = pa + bt * M * K;
          const float* B = pb + bt * K * N;
          const float* G = g + bt * M * N;
          for (int64_t i = 0; i < M; ++i)
            for (int64_t j = 0; j < N; ++j) {
              const double gv = G[i * N + j];
              if (gv == 0.0) continue;
              for (int64_t k = 0; k < K; ++k) {
                if (ga.active())
                  ga.add(bt * M * K + i * K + k, gv * B[k * N + j]);
                if (gb.active())
                  gb.add(bt * K * N + k * N + j, gv * A[i * K + k]);
              }
            }
        }
        ga.flush();
        gb.flush();
      });
}

Tensor transpose_last2(const Tensor& x) {
  check(x.defined() && x.rank() >= 2, "transpose_last2: rank < 2");
  const int r = x.rank();
  const int64_t M = x.shape()[r - 2];
  const int64_t N = x.shape()[r - 1];
  int64_t batch = 1;
  for (int i = 0; i < r - 2; ++i) batch *= x.shape()[i];
  Shape out_shape = x.shape();
  std::swap(out_shape[r - 2], out_shape[r - 1]);
  std::vector<float> y(x.vec().size());
  const float* px = x.data();
  for (int64_t bt = 0; bt < batch; ++bt)
    for (int64_t i = 0; i < M; ++i)
      for (int64_t j = 0; j < N; ++j)
        y[static_cast<size_t>(bt * M * N + j * M + i)] = px[bt * M * N + i * N + j];
  return make_op("transpose_last2", out_shape, std::move(y), {x},
                 [x, batch, M, N](detail::Node& n) {
                   if (!x.requires_grad()) return;
                   float* g = x.node()->grad_buf();
                   const float* gn = n.grad.data();
                   for (int64_t bt = 0; bt < batch; ++bt)
                     for (int64_t i = 0; i < M; ++i)
                       for (int64_t j = 0; j < N; ++j)
                         g[bt * M * N + i * N + j] += gn[bt * M * N + j * M + i];
                 });
}

// ---- convolution / pooling / resampling ----

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding, int groups) {
  check(input.defined() && weight.defined(), "conv2d: undefined input");
  check(input.rank() == 4, "conv2d: input must be (N,C,H,W)");
  check(weight.rank() == 4, "conv2d: weight must be (Cout,Cin/g,Kh,Kw)");
  check(stride >= 1 && padding >= 0 && groups >= 1, "conv2d: bad hyperparams");
  const int64_t N = input.dim(0), Cin = input.dim(1);
  const int64_t H = input.dim(2), W = input.dim(3);
  const int64_t Cout = weight.dim(0), Cpg = weight.dim(1);
  const int64_t Kh = weight.dim(2), Kw = weight.dim(3);
  check(Cin == Cpg * groups, "conv2d: channels " + std::to_string(Cin) +
                                 " vs weight " + shape_str(weight.shape()) +
                                 " with groups " + std::to_string(groups));
  check(Cout % groups == 0, "conv2d: Cout not divisible by groups");
  if (bias.defined())
    check(bias.rank() == 1 && bias.dim(0) == Cout, "conv2d: bad bias shape");
  const int64_t Ho = (H + 2 * padding - Kh) / stride + 1;
  const int64_t Wo = (W + 2 * padding - Kw) / stride + 1;
  check(H + 2 * padding >= Kh && W + 2 * padding >= Kw,
        "conv2d: kernel larger than padded input");
  const int64_t Copg = Cout / groups;
  std::vector<float> y(static_cast<size_t>(N * Cout * Ho * Wo));
  const float* px = input.data();
  const float* pw = weight.data();
  const float* pb = bias.defined() ? bias.data() : nullptr;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t oc = 0; oc < Cout; ++oc) {
      const int64_t g = oc / Copg;
      const int64_t ci0 = g * Cpg;
      float* yo = y.data() + ((n * Cout + oc) * Ho) * Wo;
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = pb ? pb[oc] : 0.0;
          for (int64_t ci = 0; ci < Cpg; ++ci) {
            const float* xc = px + ((n * Cin + ci0 + ci) * H) * W;
            const float* wc = pw + ((oc * Cpg + ci) * Kh) * Kw;
            for (int64_t kh = 0; kh < Kh; ++kh) {
              const int64_t ih = oh * stride - padding + kh;
              if (ih < 0 || ih >= H) continue;
              for (int64_t kw = 0; kw < Kw; ++kw) {
                const int64_t iw = ow * stride - padding + kw;
                if (iw < 0 || iw >= W) continue;
                acc += static_cast<double>(xc[ih * W + iw]) * wc[kh * Kw + kw];
              }
            }
          }
          yo[oh * Wo + ow] = static_cast<float>(acc);
        }
    }
  Shape out_shape{N, Cout, Ho, Wo};
  const int64_t s = stride, p = padding;
  return make_op(
      "conv2d", out_shape, std::move(y), {input, weight, bias},
      [input, weight, bias, N, Cin, H, W, Cout, Cpg, Copg, Kh, Kw, Ho, Wo, s,
       p](detail::Node& nd) {
        GradAccum gx(input), gw(weight), gb(bias);
        const float* g = nd.grad.data();
        const float* px = input.data();
        const float* pw = weight.data();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t oc = 0; oc < Cout; ++oc) {
            const int64_t grp = oc / Copg;
            const int64_t ci0 = grp * Cpg;
            const float* go = g + ((n * Cout + oc) * Ho) * Wo;
            for (int64_t oh = 0; oh < Ho; ++oh)
              for (int64_t ow = 0; ow < Wo; ++ow) {
                const double gv = go[oh * Wo + ow];
                if (gv == 0.0) continue;
                if (gb.active()) gb.add(oc, gv);
                for (int64_t ci = 0; ci < Cpg; ++ci) {
                  const int64_t xbase = ((n * Cin + ci0 + ci) * H) * W;
                  const int64_t wbase = ((oc * Cpg + ci) * Kh) * Kw;
                  for (int64_t kh = 0; kh < Kh; ++kh) {
                    const int64_t ih = oh * s - p + kh;
                    if (ih < 0 || ih >= H) continue;
                    for (int64_t kw = 0; kw < Kw; ++kw) {
                      const int64_t iw = ow * s - p + kw;
                      if (iw < 0 || iw >= W) continue;
                      if (gx.active())
                        gx.add(xbase + ih * W + iw, gv * pw[wbase + kh * Kw + kw]);
                      if (gw.active())
                        gw.add(wbase + kh * Kw + kw, gv * px[xbase + ih * W + iw]);
                    }
                  }
                }
              }
          }
        gx.flush();
        gw.flush();
        gb.flush();
      });
}

Tensor pool(const Tensor& x, PoolKind kind) {
  check(x.defined() && x.rank() == 4, "pool: input must be (N,C,H,W)");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t HW = H * W;
  const float* px = x.data();
  if (kind == PoolKind::global_avg) {
    std::vector<float> y(static_cast<size_t>(N * C));
    for (int64_t nc = 0; nc < N * C; ++nc) {
      double acc = 0.0;
      for (int64_t i = 0; i < HW; ++i) acc += px[nc * HW + i];
      y[static_cast<size_t>(nc)] = static_cast<float>(acc / HW);
    }
    return make_op("global_avg_pool", {N, C, 1, 1}, std::move(y), {x},
                   [x, N, C, HW](detail::Node& n) {
                     if (!x.requires_grad()) return;
                     float* g = x.node()->grad_buf();
                     for (int64_t nc = 0; nc < N * C; ++nc) {
                       const float gv = n.grad[static_cast<size_t>(nc)] /
                                        static_cast<float>(HW);
                       for (int64_t i = 0; i < HW; ++i) g[nc * HW + i] += gv;
                     }
                   });
  }
  if (kind == PoolKind::channel_avg) {
    std::vector<float> y(static_cast<size_t>(N * HW));
    for (int64_t n = 0; n < N; ++n)
      for (int64_t i = 0; i < HW; ++i) {
        double acc = 0.0;
        for (int64_t c = 0; c < C; ++c) acc += px[(n * C + c) * HW + i];
        y[static_cast<size_t>(n * HW + i)] = static_cast<float>(acc / C);
      }
    return make_op("channel_avg_pool", {N, 1, H, W}, std::move(y), {x},
                   [x, N, C, HW](detail::Node& n) {
                     if (!x.requires_grad()) return;
                     float* g = x.node()->grad_buf();
                     for (int64_t b = 0; b < N; ++b)
                       for (int64_t i = 0; i < HW; ++i) {
                         const float gv = n.grad[static_cast<size_t>(b * HW + i)] /
                                          static_cast<float>(C);
                         for (int64_t c = 0; c < C; ++c)
                           g[(b * C + c) * HW + i] += gv;
                       }
                   });
  }
  // channel_max: ties resolve to the lowest channel index.
  std::vector<float> y(static_cast<size_t>(N * HW));
  auto arg = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(N * HW));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < HW; ++i) {
      float best = px[(n * C + 0) * HW + i];
      int32_t bc = 0;
      for (int64_t c = 1; c < C; ++c) {
        const float v = px[(n * C + c) * HW + i];
        if (v > best) {
          best = v;
          bc = static_cast<int32_t>(c);
        }
      }
      y[static_cast<size_t>(n * HW + i)] = best;
      (*arg)[static_cast<size_t>(n * HW + i)] = bc;
    }
  return make_op("channel_max_pool", {N, 1, H, W}, std::move(y), {x},
                 [x, arg, N, C, HW](detail::Node& n) {
                   if (!x.requires_grad()) return;
                   float* g = x.node()->grad_buf();
                   for (int64_t b = 0; b < N; ++b)
                     for (int64_t i = 0; i < HW; ++i) {
                       const int64_t c = (*arg)[static_cast<size_t>(b * HW + i)];
                       g[(b * C + c) * HW + i] +=
                           n.grad[static_cast<size_t>(b * HW + i)];
                     }
                 });
}

Tensor avg_pool2d(const Tensor& x, int factor) {
  check(x.defined() && x.rank() == 4, "avg_pool2d: input must be (N,C,H,W)");
  check(factor >= 1, "avg_pool2d: factor must be >= 1");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(H % factor == 0 && W % factor == 0,
        "avg_pool2d: spatial dims must be divisible by factor");
  const int64_t f = factor, Ho = H / f, Wo = W / f;
  std::vector<float> y(static_cast<size_t>(N * C * Ho * Wo));
  const float* px = x.data();
  for (int64_t nc = 0; nc < N * C; ++nc)
    for (int64_t oh = 0; oh < Ho; ++oh)
      for (int64_t ow = 0; ow < Wo; ++ow) {
        double acc = 0.0;
        for (int64_t dh = 0; dh < f; ++dh)
          for (int64_t dw = 0; dw < f; ++dw)
            acc += px[nc * H * W + (oh * f + dh) * W + ow * f + dw];
        y[static_cast<size_t>(nc * Ho * Wo + oh * Wo + ow)] =
            static_cast<float>(acc / (f * f));
      }
  return make_op("avg_pool2d", {N, C, Ho, Wo}, std::move(y), {x},
                 [x, N, C, H, W, f, Ho, Wo](detail::Node& n) {
                   if (!x.requires_grad()) return;
                   float* g = x.node()->grad_buf();
                   for (int64_t nc = 0; nc < N * C; ++nc)
                     for (int64_t oh = 0; oh < Ho; ++oh)
                       for (int64_t ow = 0; ow < Wo; ++ow) {
                         const float gv =
                             n.grad[static_cast<size_t>(nc * Ho * Wo + oh * Wo + ow)] /
                             static_cast<float>(f * f);
                         for (int64_t dh = 0; dh < f; ++dh)
                           for (int64_t dw = 0; dw < f; ++dw)
                             g[nc * H * W + (oh * f + dh) * W + ow * f + dw] += gv;
                       }
                 });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding) {
  check(x.defined() && x.rank() == 4, "max_pool2d: input must be (N,C,H,W)");
  check(kernel >= 1 && stride >= 1 && padding >= 0, "max_pool2d: bad params");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Ho = (H + 2 * padding - kernel) / stride + 1;
  const int64_t Wo = (W + 2 * padding - kernel) / stride + 1;
  check(Ho >= 1 && Wo >= 1, "max_pool2d: empty output");
  std::vector<float> y(static_cast<size_t>(N * C * Ho * Wo));
  auto arg = std::make_shared<std::vector<int64_t>>(y.size());
  const float* px = x.data();
  for (int64_t nc = 0; nc < N * C; ++nc)
    for (int64_t oh = 0; oh < Ho; ++oh)
      for (int64_t ow = 0; ow < Wo; ++ow) {
        float best = -std::numeric_limits<float>::infinity();
        int64_t bi = -1;
        for (int kh = 0; kh < kernel; ++kh) {
          const int64_t ih = oh * stride - padding + kh;
          if (ih < 0 || ih >= H) continue;
          for (int kw = 0; kw < kernel; ++kw) {
            const int64_t iw = ow * stride - padding + kw;
            if (iw < 0 || iw >= W) continue;
            const float v = px[nc * H * W + ih * W + iw];
            if (v > best) {
              best = v;
              bi = ih * W + iw;
            }
          }
        }
        check(bi >= 0, "max_pool2d: window covers no input");
        const size_t oi = static_cast<size_t>(nc * Ho * Wo + oh * Wo + ow);
        y[oi] = best;
        (*arg)[oi] = nc * H * W + bi;
      }
  return make_op("max_pool2d", {N, C, Ho, Wo}, std::move(y), {x},
                 [x, arg](detail::Node& n) {
                   if (!x.requires_grad()) return;
                   float* g = x.node()->grad_buf();
                   for (size_t i = 0; i < arg->size(); ++i)
                     g[(*arg)[i]] += n.grad[i];
                 });
}

Tensor upsample(const Tensor& x, int factor, UpsampleMode mode) {
  check(x.defined() && x.rank() == 4, "upsample: input must be (N,C,H,W)");
  check(factor >= 1, "upsample: factor must be >= 1");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t f = factor, Ho = H * f, Wo = W * f;
  std::vector<float> y(static_cast<size_t>(N * C * Ho * Wo));
  const float* px = x.data();
  if (mode == UpsampleMode::nearest) {
    for (int64_t nc = 0; nc < N * C; ++nc)
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow)
          y[static_cast<size_t>(nc * Ho * Wo + oh * Wo + ow)] =
              px[nc * H * W + (oh / f) * W + ow / f];
    return make_op("upsample_nearest", {N, C, Ho, Wo}, std::move(y), {x},
                   [x, N, C, H, W, f, Ho, Wo](detail::Node& n) {
                     if (!x.requires_grad()) return;
                     GradAccum gx(x);
                     const float* g = n.grad.data();
                     for (int64_t nc = 0; nc < N * C; ++nc)
                       for (int64_t oh = 0; oh < Ho; ++oh)
                         for (int64_t ow = 0; ow < Wo; ++ow)
                           gx.add(nc * H * W + (oh / f) * W + ow / f,
                                  g[nc * Ho * Wo + oh * Wo + ow]);
                     gx.flush();
                   });
  }
  // Bilinear with half-pixel centers; negative source coords clamp to 0, so a
  // factor of 1 is the identity and constants are preserved exactly.
  struct Lerp {
    int64_t i0, i1;
    double w0, w1;
  };
  auto make_table = [](int64_t in, int64_t out, int64_t fac) {
    std::vector<Lerp> t(static_cast<size_t>(out));
    for (int64_t o = 0; o < out; ++o) {
      double src = (o + 0.5) / fac - 0.5;
      if (src < 0) src = 0;
      int64_t i0 = static_cast<int64_t>(src);
      const double lam = src - i0;
      int64_t i1 = std::min(i0 + 1, in - 1);
      t[static_cast<size_t>(o)] = {i0, i1, 1.0 - lam, lam};
    }
    return t;
  };
  auto rows = std::make_shared<std::vector<Lerp>>(make_table(H, Ho, f));
  auto cols = std::make_shared<std::vector<Lerp>>(make_table(W, Wo, f));
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* xc = px + nc * H * W;
    float* yc = y.data() + nc * Ho * Wo;
    for (int64_t oh = 0; oh < Ho; ++oh) {
      const Lerp& rh = (*rows)[static_cast<size_t>(oh)];
      for (int64_t ow = 0; ow < Wo; ++ow) {
        const Lerp& rw = (*cols)[static_cast<size_t>(ow)];
        const double v = rh.w0 * (rw.w0 * xc[rh.i0 * W + rw.i0] +
                                  rw.w1 * xc[rh.i0 * W + rw.i1]) +
                         rh.w1 * (rw.w0 * xc[rh.i1 * W + rw.i0] +
                                  rw.w1 * xc[rh.i1 * W + rw.i1]);
        yc[oh * Wo + ow] = static_cast<float>(v);
      }
    }
  }
  return make_op(
      "upsample_bilinear", {N, C, Ho, Wo}, std::move(y), {x},
      [x, rows, cols, N, C, H, W, Ho, Wo](detail::Node& n) {
        if (!x.requires_grad()) return;
        GradAccum gx(x);
        const float* g = n.grad.data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const int64_t xb = nc * H * W;
          for (int64_t oh = 0; oh < Ho; ++oh) {
            const Lerp& rh = (*rows)[static_cast<size_t>(oh)];
            for (int64_t ow = 0; ow < Wo; ++ow) {
              const Lerp& rw = (*cols)[static_cast<size_t>(ow)];
              const double gv = g[nc * Ho * Wo + oh * Wo + ow];
              if (gv == 0.0) continue;
              gx.add(xb + rh.i0 * W + rw.i0, gv * rh.w0 * rw.w0);
              gx.add(xb + rh.i0 * W + rw.i1, gv * rh.w0 * rw.w1);
              gx.add(xb + rh.i1 * W + rw.i0, gv * rh.w1 * rw.w0);
              gx.add(xb + rh.i1 * W + rw.i1, gv * rh.w1 * rw.w1);
            }
          }
        }
        gx.flush();
      });
}

// ---- shape ops ----

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  check(!xs.empty(), "concat: empty input list");
  const int r = xs[0].rank();
  axis = normalize_axis(axis, r, "concat");
  Shape out_shape = xs[0].shape();
  int64_t total_axis = 0;
  for (const Tensor& t : xs) {
    check(t.defined() && t.rank() == r, "concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis)
        check(t.shape()[i] == out_shape[i],
              "concat: shape mismatch at axis " + std::to_string(i));
    total_axis += t.shape()[axis];
  }
  out_shape[axis] = total_axis;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[i];
  std::vector<float> y(static_cast<size_t>(shape_numel(out_shape)));
  int64_t off = 0;
  for (const Tensor& t : xs) {
    const int64_t ax = t.shape()[axis];
    const float* pt = t.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(y.data() + (o * total_axis + off) * inner,
                  pt + o * ax * inner,
                  static_cast<size_t>(ax * inner) * sizeof(float));
    off += ax;
  }
  std::vector<Tensor> parents = xs;
  return make_op(
      "concat", out_shape, std::move(y), parents,
      [xs, axis, outer, inner, total_axis](detail::Node& n) {
        const float* g = n.grad.data();
        int64_t off = 0;
        for (const Tensor& t : xs) {
          const int64_t ax = t.shape()[axis];
          if (t.requires_grad()) {
            float* gt = t.node()->grad_buf();
            for (int64_t o = 0; o < outer; ++o)
              for (int64_t i = 0; i < ax * inner; ++i)
                gt[o * ax * inner + i] += g[(o * total_axis + off) * inner + i];
          }
          off += ax;
        }
      });
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
  check(x.defined(), "slice: undefined input");
  const int r = x.rank();
  axis = normalize_axis(axis, r, "slice");
  const int64_t ax = x.shape()[axis];
  check(start >= 0 && len >= 1 && start + len <= ax,
        "slice: range [" + std::to_string(start) + "," +
            std::to_string(start + len) + ") out of bounds for axis size " +
            std::to_string(ax));
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  std::vector<float> y(static_cast<size_t>(shape_numel(out_shape)));
  const float* px = x.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(y.data() + o * len * inner, px + (o * ax + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(float));
  return make_op("slice", out_shape, std::move(y), {x},
                 [x, ax, start, len, outer, inner](detail::Node& n) {
                   if (!x.requires_grad()) return;
                   float* g = x.node()->grad_buf();
                   const float* gn = n.grad.data();
                   for (int64_t o = 0; o < outer; ++o)
                     for (int64_t i = 0; i < len * inner; ++i)
                       g[(o * ax + start) * inner + i] += gn[o * len * inner + i];
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  check(x.defined(), "reshape: undefined input");
  check(shape_numel(shape) == x.numel(),
        "reshape: cannot view " + shape_str(x.shape()) + " as " +
            shape_str(shape));
  std::vector<float> y = x.vec();
  return make_op("reshape", std::move(shape), std::move(y), {x},
                 [x](detail::Node& n) {
                   if (!x.requires_grad()) return;
                   float* g = x.node()->grad_buf();
                   for (int64_t i = 0; i < n.numel(); ++i)
                     g[i] += n.grad[static_cast<size_t>(i)];
                 });
}

Tensor flip(const Tensor& x, int axis) {
  check(x.defined(), "flip: undefined input");
  const int r = x.rank();
  axis = normalize_axis(axis, r, "flip");
  const int64_t ax = x.shape()[axis];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  std::vector<float> y(x.vec().size());
  const float* px = x.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < ax; ++k)
      std::memcpy(y.data() + (o * ax + k) * inner,
                  px + (o * ax + (ax - 1 - k)) * inner,
                  static_cast<size_t>(inner) * sizeof(float));
  return make_op("flip", x.shape(), std::move(y), {x},
                 [x, ax, outer, inner](detail::Node& n) {
                   if (!x.requires_grad()) return;
                   float* g = x.node()->grad_buf();
                   const float* gn = n.grad.data();
                   for (int64_t o = 0; o < outer; ++o)
                     for (int64_t k = 0; k < ax; ++k)
                       for (int64_t i = 0; i < inner; ++i)
                         g[(o * ax + (ax - 1 - k)) * inner + i] +=
                             gn[(o * ax + k) * inner + i];
                 });
}

Tensor stack0(const std::vector<Tensor>& xs) {
  check(!xs.empty(), "stack0: empty input list");
  std::vector<Tensor> expanded;
  expanded.reserve(xs.size());
  for (const Tensor& t : xs) {
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    expanded.push_back(reshape(t, s));
  }
  return concat(expanded, 0);
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
  check(x.defined(), "sum: undefined input");
  double acc = 0.0;
  const float* px = x.data();
  for (int64_t i = 0; i < x.numel(); ++i) acc += px[i];
  Tensor result = make_op("sum", {1}, {static_cast<float>(acc)}, {x},
                          [x](detail::Node& n) {
                            if (!x.requires_grad()) return;
                            float* g = x.node()->grad_buf();
                            const float gv = n.grad[0];
                            for (int64_t i = 0; i < x.numel(); ++i) g[i] += gv;
                          });
  result.node()->hi_scalar = acc;
  return result;
}

Tensor mean(const Tensor& x) {
  check(x.defined(), "mean: undefined input");
  return affine(sum(x), 1.0f / static_cast<float>(x.numel()), 0.0f);
}

Tensor sum_axes(const Tensor& x, std::vector<int> axes, bool keepdims) {
  check(x.defined(), "sum_axes: undefined input");
  const int r = x.rank();
  std::vector<bool> reduce(r, false);
  for (int a : axes) reduce[static_cast<size_t>(normalize_axis(a, r, "sum_axes"))] = true;
  Shape keep_shape = x.shape();
  for (int i = 0; i < r; ++i)
    if (reduce[static_cast<size_t>(i)]) keep_shape[i] = 1;
  const int64_t out_n = shape_numel(keep_shape);
  std::vector<double> acc(static_cast<size_t>(out_n), 0.0);
  // Row-major walk mapping each input cell onto its keepdims slot.
  const auto ost = broadcast_strides(keep_shape, x.shape());
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  const float* px = x.data();
  int64_t oi = 0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    acc[static_cast<size_t>(oi)] += px[i];
    for (int k = r - 1; k >= 0; --k) {
      ++idx[static_cast<size_t>(k)];
      oi += ost[static_cast<size_t>(k)];
      if (idx[static_cast<size_t>(k)] < x.shape()[k]) break;
      oi -= ost[static_cast<size_t>(k)] * x.shape()[k];
      idx[static_cast<size_t>(k)] = 0;
    }
  }
  std::vector<float> y(static_cast<size_t>(out_n));
  for (int64_t i = 0; i < out_n; ++i)
    y[static_cast<size_t>(i)] = static_cast<float>(acc[static_cast<size_t>(i)]);
  Shape out_shape;
  if (keepdims) {
    out_shape = keep_shape;
  } else {
    for (int i = 0; i < r; ++i)
      if (!reduce[static_cast<size_t>(i)]) out_shape.push_back(x.shape()[i]);
    if (out_shape.empty()) out_shape.push_back(1);
  }
  Tensor kept = make_op(
      "sum_axes", keep_shape, std::move(y), {x},
      [x, keep_shape](detail::Node& n) {
        if (!x.requires_grad()) return;
        float* g = x.node()->grad_buf();
        const float* gn = n.grad.data();
        const int r = x.rank();
        const auto ost = broadcast_strides(keep_shape, x.shape());
        std::vector<int64_t> idx(static_cast<size_t>(r), 0);
        int64_t oi = 0;
        for (int64_t i = 0; i < x.numel(); ++i) {
          g[i] += gn[oi];
          for (int k = r - 1; k >= 0; --k) {
            ++idx[static_cast<size_t>(k)];
            oi += ost[static_cast<size_t>(k)];
            if (idx[static_cast<size_t>(k)] < x.shape()[k]) break;
            oi -= ost[static_cast<size_t>(k)] * x.shape()[k];
            idx[static_cast<size_t>(k)] = 0;
          }
        }
      });
  return keepdims ? kept : reshape(kept, out_shape);
}

Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    float eps) {
  check(x.defined() && gamma.defined() && beta.defined(),
        "channel_norm: undefined input");
  check(x.rank() == 4, "channel_norm: input must be (N,C,H,W)");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check(gamma.rank() == 1 && gamma.dim(0) == C && beta.rank() == 1 &&
            beta.dim(0) == C,
        "channel_norm: affine params must be (C)");
  const int64_t m = H * W;
  std::vector<float> y(x.vec().size());
  auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(N * C));
  auto inv = std::make_shared<std::vector<double>>(static_cast<size_t>(N * C));
  const float* px = x.data();
  const float* pg = gamma.data();
  const float* pbn = beta.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* xs = px + nc * m;
    double s = 0.0;
    for (int64_t i = 0; i < m; ++i) s += xs[i];
    const double mean = s / m;
    double v = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      const double d = xs[i] - mean;
      v += d * d;
    }
    const double ivar = 1.0 / std::sqrt(v / m + eps);
    (*mu)[static_cast<size_t>(nc)] = mean;
    (*inv)[static_cast<size_t>(nc)] = ivar;
    const int64_t c = nc % C;
    for (int64_t i = 0; i < m; ++i)
      y[static_cast<size_t>(nc * m + i)] = static_cast<float>(
          pg[c] * (xs[i] - mean) * ivar + pbn[c]);
  }
  return make_op(
      "channel_norm", x.shape(), std::move(y), {x, gamma, beta},
      [x, gamma, beta, mu, inv, N, C, m](detail::Node& n) {
        GradAccum gx(x), gg(gamma), gb(beta);
        const float* g = n.grad.data();
        const float* px = x.data();
        const float* pg = gamma.data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const float* xs = px + nc * m;
          const float* gs = g + nc * m;
          const double mean = (*mu)[static_cast<size_t>(nc)];
          const double ivar = (*inv)[static_cast<size_t>(nc)];
          const int64_t c = nc % C;
          double sum_g = 0.0, sum_gx = 0.0;
          for (int64_t i = 0; i < m; ++i) {
            const double xh = (xs[i] - mean) * ivar;
            sum_g += gs[i];
            sum_gx += gs[i] * xh;
          }
          if (gb.active()) gb.add(c, sum_g);
          if (gg.active()) gg.add(c, sum_gx);
          if (gx.active()) {
            const double k = pg[c] * ivar;
            for (int64_t i = 0; i < m; ++i) {
              const double xh = (xs[i] - mean) * ivar;
              gx.add(nc * m + i, k * (gs[i] - sum_g / m - xh * sum_gx / m));
            }
          }
        }
        gx.flush();
        gg.flush();
        gb.flush();
      });
}

// ---- graph execution ----

Tape::Tape(const Tensor& root) {
  check(root.defined(), "tape: undefined root");
  std::unordered_set<detail::Node*> seen;
  // Iterative post-order DFS; parents first so reverse order is root-first.
  struct Frame {
    std::shared_ptr<detail::Node> node;
    size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node(), 0});
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      auto p = f.node->parents[f.next++].node();
      if (p && p->requires_grad && !seen.count(p.get())) {
        seen.insert(p.get());
        stack.push_back({p, 0});
      }
    } else {
      order_.push_back(f.node);
      stack.pop_back();
    }
  }
}

void Tape::backward() {
  check(!order_.empty(), "tape: empty");
  auto& root = order_.back();
  check(root->numel() == 1, "backward: root must be a scalar");
  root->grad_buf()[0] += 1.0f;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
}

void backward(const Tensor& loss) {
  Tape tape(loss);
  tape.backward();
}

IntTensor argmax_channels(const Tensor& logits) {
  check(logits.defined() && logits.rank() == 4,
        "argmax_channels: input must be (N,K,H,W)");
  const int64_t N = logits.dim(0), K = logits.dim(1);
  const int64_t H = logits.dim(2), W = logits.dim(3);
  IntTensor out;
  out.shape = {N, H, W};
  out.v.resize(static_cast<size_t>(N * H * W));
  const float* p = logits.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < H * W; ++i) {
      float best = p[(n * K) * H * W + i];
      int32_t bk = 0;
      for (int64_t k = 1; k < K; ++k) {
        const float v = p[(n * K + k) * H * W + i];
        if (v > best) {
          best = v;
          bk = static_cast<int32_t>(k);
        }
      }
      out.v[static_cast<size_t>(n * H * W + i)] = bk;
    }
  return out;
}

Tensor one_hot(const IntTensor& labels, int num_classes) {
  check(labels.shape.size() == 3, "one_hot: labels must be (N,H,W)");
  check(num_classes >= 1, "one_hot: bad class count");
  const int64_t N = labels.shape[0], H = labels.shape[1], W = labels.shape[2];
  std::vector<float> v(static_cast<size_t>(N * num_classes * H * W), 0.0f);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < H * W; ++i) {
      const int32_t k = labels.v[static_cast<size_t>(n * H * W + i)];
      check(k >= 0 && k < num_classes,
            "one_hot: label " + std::to_string(k) + " out of range");
      v[static_cast<size_t>((n * num_classes + k) * H * W + i)] = 1.0f;
    }
  return Tensor::from_data({N, num_classes, H, W}, std::move(v), false);
}

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, double eps) {
  for (const Tensor& t : inputs) {
    const_cast<Tensor&>(t).set_requires_grad(true);
    const_cast<Tensor&>(t).zero_grad();
  }
  Tensor loss = f(inputs);
  if (loss.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
  backward(loss);
  std::vector<std::vector<float>> analytic;
  analytic.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    const float* g = t.grad_data();
    if (g)
      analytic.emplace_back(g, g + t.numel());
    else
      analytic.emplace_back(static_cast<size_t>(t.numel()), 0.0f);
  }
  double max_err = 0.0;
  NoGradGuard ng;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor t = inputs[ti];
    float* d = t.node()->data.data();
    for (int64_t j = 0; j < t.numel(); ++j) {
      const float orig = d[j];
      d[j] = static_cast<float>(orig + eps);
      const double xp = d[j];
      const double lp = f(inputs).item_hi();
      d[j] = static_cast<float>(orig - eps);
      const double xm = d[j];
      const double lm = f(inputs).item_hi();
      d[j] = orig;
      // The step is re-measured after float rounding of the endpoints.
      const double num = (lp - lm) / (xp - xm);
      const double an = analytic[ti][static_cast<size_t>(j)];
      const double err =
          std::fabs(an - num) / std::max({1.0, std::fabs(an), std::fabs(num)});
      max_err = std::max(max_err, err);
    }
  }
  for (const Tensor& t : inputs) const_cast<Tensor&>(t).zero_grad();
  return max_err;
}

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace afenet
