#include "cpcvar/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cpcvar {

namespace {

thread_local Tape* g_active_tape = nullptr;

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
constexpr double kLayerNormEps = 1e-5;

void ensure_finite(const char* op_name, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v))
      throw NumericError(std::string(op_name) + ": non-finite output value");
  }
}

[[noreturn]] void shape_fail(const char* op_name, const std::string& detail) {
  throw ShapeError(std::string(op_name) + ": " + detail);
}

TensorDataPtr make_output(const char* op_name, Shape shape, std::vector<double> value,
                          const std::vector<TensorDataPtr>& inputs) {
  ensure_finite(op_name, value);
  auto out = std::make_shared<TensorData>();
  out->shape = std::move(shape);
  out->value = std::move(value);
  if (Tape::active() != nullptr) {
    for (const auto& in : inputs)
      if (in->requires_grad) {
        out->requires_grad = true;
        break;
      }
  }
  return out;
}

// Records the node when anything downstream can require gradients.
void maybe_record(const char* op_name, std::vector<TensorDataPtr> inputs, TensorDataPtr out,
                  std::function<void()> vjp) {
  Tape* tape = Tape::active();
  if (tape == nullptr || !out->requires_grad) return;
  tape->record(op_name, std::move(inputs), std::move(out), std::move(vjp));
}

// outer x axis x inner decomposition for axis-wise ops.
void axis_split(const Shape& shape, int64_t axis, int64_t* outer, int64_t* mid, int64_t* inner) {
  *outer = 1;
  *mid = shape[static_cast<size_t>(axis)];
  *inner = 1;
  for (int64_t i = 0; i < axis; ++i) *outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) *inner *= shape[i];
}

struct PoolWindow {
  int64_t lo, hi;  // [lo, hi)
};

// Adaptive window [floor(i*in/out), ceil((i+1)*in/out)): exact partition means.
PoolWindow pool_window(int64_t i, int64_t in, int64_t out) {
  PoolWindow w;
  w.lo = (i * in) / out;
  w.hi = ((i + 1) * in + out - 1) / out;
  return w;
}

struct LerpCoord {
  int64_t i0, i1;
  double w1;  // weight of i1; weight of i0 is 1-w1
};

// align-corners-false source coordinate for bilinear resize.
LerpCoord lerp_coord(int64_t i, int64_t in, int64_t out) {
  double src = (static_cast<double>(i) + 0.5) * static_cast<double>(in) /
                   static_cast<double>(out) -
               0.5;
  if (src < 0.0) src = 0.0;
  double max_src = static_cast<double>(in - 1);
  if (src > max_src) src = max_src;
  LerpCoord c;
  c.i0 = static_cast<int64_t>(std::floor(src));
  if (c.i0 > in - 1) c.i0 = in - 1;
  c.i1 = std::min<int64_t>(c.i0 + 1, in - 1);
  c.w1 = src - static_cast<double>(c.i0);
  return c;
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  out += "]";
  return out;
}

Tensor Tensor::from(Shape shape, std::vector<double> value, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(value.size()))
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " does not cover " +
                     std::to_string(value.size()) + " values");
  ensure_finite("Tensor::from", value);
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->value = std::move(value);
  d->requires_grad = requires_grad;
  return wrap(std::move(d));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = static_cast<size_t>(shape_numel(shape));
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  auto n = static_cast<size_t>(shape_numel(shape));
  return from(std::move(shape), std::vector<double>(n, fill), requires_grad);
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("Tensor::item: tensor has " + std::to_string(numel()) +
                                     " elements, expected 1");
  return d_->value[0];
}

// ---- Tape ----

Tape::Tape() {
  previous_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op_name, std::vector<TensorDataPtr> inputs, TensorDataPtr output,
                  std::function<void()> vjp) {
  nodes_.push_back(Node{op_name, std::move(inputs), std::move(output), std::move(vjp)});
}

void Tape::backward(const Tensor& loss) {
  if (backward_done_)
    throw StateError("Tape::backward: called twice on the same tape without reset");
  if (loss.numel() != 1)
    throw ShapeError("Tape::backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  if (nodes_.empty()) throw StateError("Tape::backward: tape is empty");
  backward_done_ = true;

  loss.data_ptr()->materialize_grad();
  loss.data_ptr()->grad[0] = 1.0;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    // Nodes whose output grad was never materialized cannot contribute.
    if (it->output->grad.empty()) continue;
    it->vjp();
  }
}

// ---- Primitives ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    shape_fail("matmul", "incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  const double* pa = a.value().data();
  const double* pb = b.value().data();
  for (int64_t i = 0; i < m; ++i) {
    double* po = out.data() + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      double av = pa[i * k + kk];
      const double* pbr = pb + kk * n;
      for (int64_t j = 0; j < n; ++j) po[j] += av * pbr[j];
    }
  }
  auto od = make_output("matmul", {m, n}, std::move(out), {a.data_ptr(), b.data_ptr()});
  auto ad = a.data_ptr();
  auto bd = b.data_ptr();
  maybe_record("matmul", {ad, bd}, od, [ad, bd, od, m, k, n] {
    const std::vector<double>& gy = od->grad;
    if (ad->requires_grad) {
      ad->materialize_grad();
      // dA = gY @ B^T
      for (int64_t i = 0; i < m; ++i)
        for (int64_t kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          const double* pg = gy.data() + i * n;
          const double* pb = bd->value.data() + kk * n;
          for (int64_t j = 0; j < n; ++j) acc += pg[j] * pb[j];
          ad->grad[static_cast<size_t>(i * k + kk)] += acc;
        }
    }
    if (bd->requires_grad) {
      bd->materialize_grad();
      // dB = A^T @ gY
      for (int64_t kk = 0; kk < k; ++kk) {
        double* pgb = bd->grad.data() + kk * n;
        for (int64_t i = 0; i < m; ++i) {
          double av = ad->value[static_cast<size_t>(i * k + kk)];
          const double* pg = gy.data() + i * n;
          for (int64_t j = 0; j < n; ++j) pgb[j] += av * pg[j];
        }
      }
    }
  });
  return Tensor::wrap(od);
}

namespace {

Tensor elementwise_binary(const char* op_name, const Tensor& a, const Tensor& b, bool subtract,
                          bool multiply) {
  if (a.shape() != b.shape())
    shape_fail(op_name, "shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
  size_t n = a.value().size();
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) {
    if (multiply)
      out[i] = a.value()[i] * b.value()[i];
    else
      out[i] = subtract ? a.value()[i] - b.value()[i] : a.value()[i] + b.value()[i];
  }
  auto od = make_output(op_name, a.shape(), std::move(out), {a.data_ptr(), b.data_ptr()});
  auto ad = a.data_ptr();
  auto bd = b.data_ptr();
  maybe_record(op_name, {ad, bd}, od, [ad, bd, od, subtract, multiply, n] {
    const auto& gy = od->grad;
    if (ad->requires_grad) {
      ad->materialize_grad();
      for (size_t i = 0; i < n; ++i) ad->grad[i] += multiply ? gy[i] * bd->value[i] : gy[i];
    }
    if (bd->requires_grad) {
      bd->materialize_grad();
      for (size_t i = 0; i < n; ++i) {
        if (multiply)
          bd->grad[i] += gy[i] * ad->value[i];
        else
          bd->grad[i] += subtract ? -gy[i] : gy[i];
      }
    }
  });
  return Tensor::wrap(od);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary("add", a, b, false, false); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary("sub", a, b, true, false); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise_binary("multiply", a, b, false, true); }

Tensor mul_scalar(const Tensor& a, double s) {
  size_t n = a.value().size();
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = a.value()[i] * s;
  auto od = make_output("multiply-scalar", a.shape(), std::move(out), {a.data_ptr()});
  auto ad = a.data_ptr();
  maybe_record("multiply-scalar", {ad}, od, [ad, od, s, n] {
    if (!ad->requires_grad) return;
    ad->materialize_grad();
    for (size_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i] * s;
  });
  return Tensor::wrap(od);
}

Tensor div_scalar(const Tensor& a, double s) {
  if (s == 0.0) throw NumericError("divide-by-scalar: division by zero");
  return mul_scalar(a, 1.0 / s);
}

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const Shape& ref = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int64_t>(ref.size()))
    shape_fail("concat", "axis " + std::to_string(axis) + " out of range for " + shape_str(ref));
  int64_t total_axis = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != ref.size()) shape_fail("concat", "rank mismatch");
    for (size_t i = 0; i < ref.size(); ++i)
      if (static_cast<int64_t>(i) != axis && p.shape()[i] != ref[i])
        shape_fail("concat", "shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
    total_axis += p.dim(static_cast<size_t>(axis));
  }
  Shape out_shape = ref;
  out_shape[static_cast<size_t>(axis)] = total_axis;

  int64_t outer, mid_ref, inner;
  axis_split(ref, axis, &outer, &mid_ref, &inner);
  (void)mid_ref;

  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
  std::vector<int64_t> offsets(parts.size());
  {
    int64_t off = 0;
    for (size_t p = 0; p < parts.size(); ++p) {
      offsets[p] = off;
      off += parts[p].dim(static_cast<size_t>(axis));
    }
  }
  for (size_t p = 0; p < parts.size(); ++p) {
    int64_t mid = parts[p].dim(static_cast<size_t>(axis));
    const double* src = parts[p].value().data();
    for (int64_t o = 0; o < outer; ++o) {
      double* dst = out.data() + (o * total_axis + offsets[p]) * inner;
      std::memcpy(dst, src + o * mid * inner, static_cast<size_t>(mid * inner) * sizeof(double));
    }
  }

  std::vector<TensorDataPtr> ins;
  ins.reserve(parts.size());
  for (const Tensor& p : parts) ins.push_back(p.data_ptr());
  auto od = make_output("concat", out_shape, std::move(out), ins);
  maybe_record("concat", ins, od, [ins, od, offsets, outer, inner, total_axis, axis] {
    const auto& gy = od->grad;
    for (size_t p = 0; p < ins.size(); ++p) {
      if (!ins[p]->requires_grad) continue;
      ins[p]->materialize_grad();
      int64_t mid = ins[p]->shape[static_cast<size_t>(axis)];
      for (int64_t o = 0; o < outer; ++o) {
        const double* src = gy.data() + (o * total_axis + offsets[p]) * inner;
        double* dst = ins[p]->grad.data() + o * mid * inner;
        for (int64_t i = 0; i < mid * inner; ++i) dst[i] += src[i];
      }
    }
  });
  return Tensor::wrap(od);
}

Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t end) {
  if (axis < 0 || axis >= static_cast<int64_t>(a.ndim()))
    shape_fail("slice", "axis " + std::to_string(axis) + " out of range for " +
                            shape_str(a.shape()));
  int64_t mid = a.dim(static_cast<size_t>(axis));
  if (start < 0 || end > mid || start >= end)
    shape_fail("slice", "range [" + std::to_string(start) + "," + std::to_string(end) +
                            ") invalid for axis size " + std::to_string(mid));
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = end - start;
  int64_t outer, m, inner;
  axis_split(a.shape(), axis, &outer, &m, &inner);
  int64_t span = end - start;
  std::vector<double> out(static_cast<size_t>(outer * span * inner));
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * span * inner, a.value().data() + (o * m + start) * inner,
                static_cast<size_t>(span * inner) * sizeof(double));
  auto od = make_output("slice", out_shape, std::move(out), {a.data_ptr()});
  auto ad = a.data_ptr();
  maybe_record("slice", {ad}, od, [ad, od, outer, m, inner, start, span] {
    if (!ad->requires_grad) return;
    ad->materialize_grad();
    const auto& gy = od->grad;
    for (int64_t o = 0; o < outer; ++o) {
      const double* src = gy.data() + o * span * inner;
      double* dst = ad->grad.data() + (o * m + start) * inner;
      for (int64_t i = 0; i < span * inner; ++i) dst[i] += src[i];
    }
  });
  return Tensor::wrap(od);
}

Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    shape_fail("reshape", shape_str(a.shape()) + " cannot reshape to " + shape_str(new_shape));
  auto od = make_output("reshape", new_shape, a.value(), {a.data_ptr()});
  auto ad = a.data_ptr();
  maybe_record("reshape", {ad}, od, [ad, od] {
    if (!ad->requires_grad) return;
    ad->materialize_grad();
    for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
  });
  return Tensor::wrap(od);
}

Tensor transpose2d(const Tensor& a) {
  if (a.ndim() != 2) shape_fail("transpose", "expected 2-d input, got " + shape_str(a.shape()));
  int64_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j * m + i)] = a.value()[static_cast<size_t>(i * n + j)];
  auto od = make_output("transpose", {n, m}, std::move(out), {a.data_ptr()});
  auto ad = a.data_ptr();
  maybe_record("transpose", {ad}, od, [ad, od, m, n] {
    if (!ad->requires_grad) return;
    ad->materialize_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        ad->grad[static_cast<size_t>(i * n + j)] += od->grad[static_cast<size_t>(j * m + i)];
  });
  return Tensor::wrap(od);
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids) {
  if (table.ndim() != 2)
    shape_fail("embedding-lookup", "table must be 2-d, got " + shape_str(table.shape()));
  int64_t vocab = table.dim(0), d = table.dim(1);
  for (int64_t id : ids)
    if (id < 0 || id >= vocab)
      throw StateError("embedding-lookup: id " + std::to_string(id) + " out of range [0," +
                       std::to_string(vocab) + ")");
  int64_t n = static_cast<int64_t>(ids.size());
  std::vector<double> out(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i)
    std::memcpy(out.data() + i * d, table.value().data() + ids[static_cast<size_t>(i)] * d,
                static_cast<size_t>(d) * sizeof(double));
  auto od = make_output("embedding-lookup", {n, d}, std::move(out), {table.data_ptr()});
  auto td = table.data_ptr();
  maybe_record("embedding-lookup", {td}, od, [td, od, ids, d] {
    if (!td->requires_grad) return;
    td->materialize_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      const double* src = od->grad.data() + static_cast<int64_t>(i) * d;
      double* dst = td->grad.data() + ids[i] * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return Tensor::wrap(od);
}

namespace {

// Shared forward for softmax / log-softmax over the last axis.
void softmax_rows(const std::vector<double>& in, int64_t rows, int64_t cols,
                  std::vector<double>* soft) {
  soft->resize(in.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * cols;
    double* y = soft->data() + r * cols;
    double mx = x[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      denom += y[c];
    }
    for (int64_t c = 0; c < cols; ++c) y[c] /= denom;
  }
}

}  // namespace

Tensor softmax_lastdim(const Tensor& a) {
  if (a.ndim() < 1) shape_fail("softmax", "rank-0 input");
  int64_t cols = a.dim(a.ndim() - 1);
  int64_t rows = a.numel() / cols;
  std::vector<double> out;
  softmax_rows(a.value(), rows, cols, &out);
  auto od = make_output("softmax", a.shape(), std::move(out), {a.data_ptr()});
  auto ad = a.data_ptr();
  maybe_record("softmax", {ad}, od, [ad, od, rows, cols] {
    if (!ad->requires_grad) return;
    ad->materialize_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = od->value.data() + r * cols;
      const double* g = od->grad.data() + r * cols;
      double dot = 0.0;
      for (int64_t c = 0; c < cols; ++c) dot += y[c] * g[c];
      double* gx = ad->grad.data() + r * cols;
      for (int64_t c = 0; c < cols; ++c) gx[c] += y[c] * (g[c] - dot);
    }
  });
  return Tensor::wrap(od);
}

Tensor log_softmax_lastdim(const Tensor& a) {
  if (a.ndim() < 1) shape_fail("log-softmax", "rank-0 input");
  int64_t cols = a.dim(a.ndim() - 1);
  int64_t rows = a.numel() / cols;
  std::vector<double> out(a.value().size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = a.value().data() + r * cols;
    double* y = out.data() + r * cols;
    double mx = x[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < cols; ++c) denom += std::exp(x[c] - mx);
    double lse = mx + std::log(denom);
    for (int64_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
  }
  auto od = make_output("log-softmax", a.shape(), std::move(out), {a.data_ptr()});
  auto ad = a.data_ptr();
  maybe_record("log-softmax", {ad}, od, [ad, od, rows, cols] {
    if (!ad->requires_grad) return;
    ad->materialize_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* ly = od->value.data() + r * cols;
      const double* g = od->grad.data() + r * cols;
      double gsum = 0.0;
      for (int64_t c = 0; c < cols; ++c) gsum += g[c];
      double* gx = ad->grad.data() + r * cols;
      for (int64_t c = 0; c < cols; ++c) gx[c] += g[c] - std::exp(ly[c]) * gsum;
    }
  });
  return Tensor::wrap(od);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.ndim() < 1) shape_fail("layer-normalization", "rank-0 input");
  int64_t cols = x.dim(x.ndim() - 1);
  int64_t rows = x.numel() / cols;
  if (gain.numel() != cols || bias.numel() != cols)
    shape_fail("layer-normalization", "gain/bias " + shape_str(gain.shape()) + "/" +
                                          shape_str(bias.shape()) + " do not match last axis " +
                                          std::to_string(cols));
  std::vector<double> out(x.value().size());
  std::vector<double> xhat(x.value().size());
  std::vector<double> inv_std(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* px = x.value().data() + r * cols;
    double mean = 0.0;
    for (int64_t c = 0; c < cols; ++c) mean += px[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      double d = px[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    double istd = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[static_cast<size_t>(r)] = istd;
    for (int64_t c = 0; c < cols; ++c) {
      double h = (px[c] - mean) * istd;
      xhat[static_cast<size_t>(r * cols + c)] = h;
      out[static_cast<size_t>(r * cols + c)] = gain.value()[static_cast<size_t>(c)] * h +
                                               bias.value()[static_cast<size_t>(c)];
    }
  }
  auto od = make_output("layer-normalization", x.shape(), std::move(out),
                        {x.data_ptr(), gain.data_ptr(), bias.data_ptr()});
  auto xd = x.data_ptr();
  auto gd = gain.data_ptr();
  auto bd = bias.data_ptr();
  maybe_record("layer-normalization", {xd, gd, bd}, od,
               [xd, gd, bd, od, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                cols] {
                 const auto& gy = od->grad;
                 if (gd->requires_grad) gd->materialize_grad();
                 if (bd->requires_grad) bd->materialize_grad();
                 if (xd->requires_grad) xd->materialize_grad();
                 for (int64_t r = 0; r < rows; ++r) {
                   const double* g = gy.data() + r * cols;
                   const double* h = xhat.data() + r * cols;
                   if (gd->requires_grad || bd->requires_grad) {
                     for (int64_t c = 0; c < cols; ++c) {
                       if (gd->requires_grad) gd->grad[static_cast<size_t>(c)] += g[c] * h[c];
                       if (bd->requires_grad) bd->grad[static_cast<size_t>(c)] += g[c];
                     }
                   }
                   if (xd->requires_grad) {
                     double mean_dh = 0.0, mean_dh_h = 0.0;
                     for (int64_t c = 0; c < cols; ++c) {
                       double dh = g[c] * gd->value[static_cast<size_t>(c)];
                       mean_dh += dh;
                       mean_dh_h += dh * h[c];
                     }
                     mean_dh /= static_cast<double>(cols);
                     mean_dh_h /= static_cast<double>(cols);
                     double istd = inv_std[static_cast<size_t>(r)];
                     double* gx = xd->grad.data() + r * cols;
                     for (int64_t c = 0; c < cols; ++c) {
                       double dh = g[c] * gd->value[static_cast<size_t>(c)];
                       gx[c] += istd * (dh - mean_dh - h[c] * mean_dh_h);
                     }
                   }
                 }
               });
  return Tensor::wrap(od);
}

Tensor gelu(const Tensor& a) {
  size_t n = a.value().size();
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) {
    double x = a.value()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  auto od = make_output("gelu", a.shape(), std::move(out), {a.data_ptr()});
  auto ad = a.data_ptr();
  maybe_record("gelu", {ad}, od, [ad, od, n] {
    if (!ad->requires_grad) return;
    ad->materialize_grad();
    for (size_t i = 0; i < n; ++i) {
      double x = ad->value[i];
      double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      ad->grad[i] += od->grad[i] * (cdf + x * pdf);
    }
  });
  return Tensor::wrap(od);
}

Tensor avg_pool2d(const Tensor& a, int64_t out_h, int64_t out_w) {
  if (a.ndim() != 3)
    shape_fail("average-pool-2d", "expected [h,w,c] input, got " + shape_str(a.shape()));
  int64_t h = a.dim(0), w = a.dim(1), c = a.dim(2);
  if (out_h < 1 || out_w < 1 || out_h > h || out_w > w)
    shape_fail("average-pool-2d", "cannot pool " + shape_str(a.shape()) + " to [" +
                                      std::to_string(out_h) + "," + std::to_string(out_w) + "]");
  std::vector<double> out(static_cast<size_t>(out_h * out_w * c), 0.0);
  for (int64_t i = 0; i < out_h; ++i) {
    PoolWindow wy = pool_window(i, h, out_h);
    for (int64_t j = 0; j < out_w; ++j) {
      PoolWindow wx = pool_window(j, w, out_w);
      double inv = 1.0 / static_cast<double>((wy.hi - wy.lo) * (wx.hi - wx.lo));
      double* po = out.data() + (i * out_w + j) * c;
      for (int64_t y = wy.lo; y < wy.hi; ++y)
        for (int64_t x = wx.lo; x < wx.hi; ++x) {
          const double* pi = a.value().data() + (y * w + x) * c;
          for (int64_t ch = 0; ch < c; ++ch) po[ch] += pi[ch] * inv;
        }
    }
  }
  auto od = make_output("average-pool-2d", {out_h, out_w, c}, std::move(out), {a.data_ptr()});
  auto ad = a.data_ptr();
  maybe_record("average-pool-2d", {ad}, od, [ad, od, h, w, c, out_h, out_w] {
    if (!ad->requires_grad) return;
    ad->materialize_grad();
    for (int64_t i = 0; i < out_h; ++i) {
      PoolWindow wy = pool_window(i, h, out_h);
      for (int64_t j = 0; j < out_w; ++j) {
        PoolWindow wx = pool_window(j, w, out_w);
        double inv = 1.0 / static_cast<double>((wy.hi - wy.lo) * (wx.hi - wx.lo));
        const double* g = od->grad.data() + (i * out_w + j) * c;
        for (int64_t y = wy.lo; y < wy.hi; ++y)
          for (int64_t x = wx.lo; x < wx.hi; ++x) {
            double* gi = ad->grad.data() + (y * w + x) * c;
            for (int64_t ch = 0; ch < c; ++ch) gi[ch] += g[ch] * inv;
          }
      }
    }
  });
  return Tensor::wrap(od);
}

Tensor bilinear_resize2d(const Tensor& a, int64_t out_h, int64_t out_w) {
  if (a.ndim() != 3)
    shape_fail("bilinear-resize-2d", "expected [h,w,c] input, got " + shape_str(a.shape()));
  int64_t h = a.dim(0), w = a.dim(1), c = a.dim(2);
  if (out_h < 1 || out_w < 1)
    shape_fail("bilinear-resize-2d", "invalid target size");
  std::vector<double> out(static_cast<size_t>(out_h * out_w * c), 0.0);
  for (int64_t i = 0; i < out_h; ++i) {
    LerpCoord cy = lerp_coord(i, h, out_h);
    for (int64_t j = 0; j < out_w; ++j) {
      LerpCoord cx = lerp_coord(j, w, out_w);
      double w00 = (1.0 - cy.w1) * (1.0 - cx.w1);
      double w01 = (1.0 - cy.w1) * cx.w1;
      double w10 = cy.w1 * (1.0 - cx.w1);
      double w11 = cy.w1 * cx.w1;
      const double* p00 = a.value().data() + (cy.i0 * w + cx.i0) * c;
      const double* p01 = a.value().data() + (cy.i0 * w + cx.i1) * c;
      const double* p10 = a.value().data() + (cy.i1 * w + cx.i0) * c;
      const double* p11 = a.value().data() + (cy.i1 * w + cx.i1) * c;
      double* po = out.data() + (i * out_w + j) * c;
      for (int64_t ch = 0; ch < c; ++ch)
        po[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
    }
  }
  auto od = make_output("bilinear-resize-2d", {out_h, out_w, c}, std::move(out), {a.data_ptr()});
  auto ad = a.data_ptr();
  maybe_record("bilinear-resize-2d", {ad}, od, [ad, od, h, w, c, out_h, out_w] {
    if (!ad->requires_grad) return;
    ad->materialize_grad();
    for (int64_t i = 0; i < out_h; ++i) {
      LerpCoord cy = lerp_coord(i, h, out_h);
      for (int64_t j = 0; j < out_w; ++j) {
        LerpCoord cx = lerp_coord(j, w, out_w);
        double w00 = (1.0 - cy.w1) * (1.0 - cx.w1);
        double w01 = (1.0 - cy.w1) * cx.w1;
        double w10 = cy.w1 * (1.0 - cx.w1);
        double w11 = cy.w1 * cx.w1;
        const double* g = od->grad.data() + (i * out_w + j) * c;
        double* g00 = ad->grad.data() + (cy.i0 * w + cx.i0) * c;
        double* g01 = ad->grad.data() + (cy.i0 * w + cx.i1) * c;
        double* g10 = ad->grad.data() + (cy.i1 * w + cx.i0) * c;
        double* g11 = ad->grad.data() + (cy.i1 * w + cx.i1) * c;
        for (int64_t ch = 0; ch < c; ++ch) {
          g00[ch] += w00 * g[ch];
          g01[ch] += w01 * g[ch];
          g10[ch] += w10 * g[ch];
          g11[ch] += w11 * g[ch];
        }
      }
    }
  });
  return Tensor::wrap(od);
}

Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int64_t>& targets) {
  if (logits.ndim() != 2)
    shape_fail("cross-entropy-with-logits", "logits must be [n,V], got " +
                                                shape_str(logits.shape()));
  int64_t n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != n)
    shape_fail("cross-entropy-with-logits", std::to_string(targets.size()) +
                                                " targets for " + std::to_string(n) + " rows");
  for (int64_t t : targets)
    if (t < 0 || t >= v)
      throw StateError("cross-entropy-with-logits: target " + std::to_string(t) +
                       " out of range [0," + std::to_string(v) + ")");
  std::vector<double> soft;
  softmax_rows(logits.value(), n, v, &soft);
  double total = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const double* x = logits.value().data() + r * v;
    double mx = x[0];
    for (int64_t c = 1; c < v; ++c) mx = std::max(mx, x[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < v; ++c) denom += std::exp(x[c] - mx);
    total += mx + std::log(denom) - x[targets[static_cast<size_t>(r)]];
  }
  auto od = make_output("cross-entropy-with-logits", {1}, {total}, {logits.data_ptr()});
  auto ld = logits.data_ptr();
  maybe_record("cross-entropy-with-logits", {ld}, od,
               [ld, od, soft = std::move(soft), targets, n, v] {
                 if (!ld->requires_grad) return;
                 ld->materialize_grad();
                 double g = od->grad[0];
                 for (int64_t r = 0; r < n; ++r) {
                   double* gx = ld->grad.data() + r * v;
                   const double* p = soft.data() + r * v;
                   for (int64_t c = 0; c < v; ++c) gx[c] += g * p[c];
                   gx[targets[static_cast<size_t>(r)]] -= g;
                 }
               });
  return Tensor::wrap(od);
}

Tensor mask_mul(const Tensor& a, const std::vector<double>& mask) {
  if (mask.size() != a.value().size())
    shape_fail("elementwise-mask-multiply", "mask of " + std::to_string(mask.size()) +
                                                " entries vs tensor " + shape_str(a.shape()));
  size_t n = mask.size();
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = a.value()[i] * mask[i];
  auto od = make_output("elementwise-mask-multiply", a.shape(), std::move(out), {a.data_ptr()});
  auto ad = a.data_ptr();
  maybe_record("elementwise-mask-multiply", {ad}, od, [ad, od, mask, n] {
    if (!ad->requires_grad) return;
    ad->materialize_grad();
    for (size_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i] * mask[i];
  });
  return Tensor::wrap(od);
}

Tensor bias_add(const Tensor& x, const Tensor& b) {
  if (x.ndim() < 1 || b.ndim() != 1 || x.dim(x.ndim() - 1) != b.dim(0))
    shape_fail("bias-add", shape_str(x.shape()) + " with bias " + shape_str(b.shape()));
  int64_t cols = b.dim(0);
  int64_t rows = x.numel() / cols;
  std::vector<double> out(x.value().size());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c)
      out[static_cast<size_t>(r * cols + c)] =
          x.value()[static_cast<size_t>(r * cols + c)] + b.value()[static_cast<size_t>(c)];
  auto od = make_output("bias-add", x.shape(), std::move(out), {x.data_ptr(), b.data_ptr()});
  auto xd = x.data_ptr();
  auto bd = b.data_ptr();
  maybe_record("bias-add", {xd, bd}, od, [xd, bd, od, rows, cols] {
    const auto& gy = od->grad;
    if (xd->requires_grad) {
      xd->materialize_grad();
      for (size_t i = 0; i < gy.size(); ++i) xd->grad[i] += gy[i];
    }
    if (bd->requires_grad) {
      bd->materialize_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c)
          bd->grad[static_cast<size_t>(c)] += gy[static_cast<size_t>(r * cols + c)];
    }
  });
  return Tensor::wrap(od);
}

Tensor sum_all(const Tensor& a) {
  double total = 0.0;
  for (double v : a.value()) total += v;
  auto od = make_output("sum", {1}, {total}, {a.data_ptr()});
  auto ad = a.data_ptr();
  maybe_record("sum", {ad}, od, [ad, od] {
    if (!ad->requires_grad) return;
    ad->materialize_grad();
    double g = od->grad[0];
    for (size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += g;
  });
  return Tensor::wrap(od);
}

namespace {

// Forward index map for space_to_depth; reused by both movements.
// out[i, j, (dy*b+dx)*c + ch] = in[i*b+dy, j*b+dx, ch]
size_t s2d_src_index(int64_t i, int64_t j, int64_t dy, int64_t dx, int64_t ch, int64_t w_in,
                     int64_t c, int64_t block) {
  return static_cast<size_t>(((i * block + dy) * w_in + (j * block + dx)) * c + ch);
}

}  // namespace

Tensor space_to_depth(const Tensor& a, int64_t block) {
  if (a.ndim() != 3)
    shape_fail("space-to-depth", "expected [h,w,c], got " + shape_str(a.shape()));
  int64_t h = a.dim(0), w = a.dim(1), c = a.dim(2);
  if (block < 1 || h % block != 0 || w % block != 0)
    shape_fail("space-to-depth", shape_str(a.shape()) + " not divisible by block " +
                                     std::to_string(block));
  int64_t oh = h / block, ow = w / block, oc = c * block * block;
  std::vector<double> out(static_cast<size_t>(oh * ow * oc));
  size_t idx = 0;
  for (int64_t i = 0; i < oh; ++i)
    for (int64_t j = 0; j < ow; ++j)
      for (int64_t dy = 0; dy < block; ++dy)
        for (int64_t dx = 0; dx < block; ++dx)
          for (int64_t ch = 0; ch < c; ++ch)
            out[idx++] = a.value()[s2d_src_index(i, j, dy, dx, ch, w, c, block)];
  auto od = make_output("space-to-depth", {oh, ow, oc}, std::move(out), {a.data_ptr()});
  auto ad = a.data_ptr();
  maybe_record("space-to-depth", {ad}, od, [ad, od, oh, ow, w, c, block] {
    if (!ad->requires_grad) return;
    ad->materialize_grad();
    size_t idx = 0;
    for (int64_t i = 0; i < oh; ++i)
      for (int64_t j = 0; j < ow; ++j)
        for (int64_t dy = 0; dy < block; ++dy)
          for (int64_t dx = 0; dx < block; ++dx)
            for (int64_t ch = 0; ch < c; ++ch)
              ad->grad[s2d_src_index(i, j, dy, dx, ch, w, c, block)] += od->grad[idx++];
  });
  return Tensor::wrap(od);
}

Tensor depth_to_space(const Tensor& a, int64_t block) {
  if (a.ndim() != 3)
    shape_fail("depth-to-space", "expected [h,w,c], got " + shape_str(a.shape()));
  int64_t h = a.dim(0), w = a.dim(1), c = a.dim(2);
  if (block < 1 || c % (block * block) != 0)
    shape_fail("depth-to-space", shape_str(a.shape()) + " channels not divisible by block^2");
  int64_t oc = c / (block * block);
  int64_t oh = h * block, ow = w * block;
  std::vector<double> out(static_cast<size_t>(oh * ow * oc));
  size_t idx = 0;
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j)
      for (int64_t dy = 0; dy < block; ++dy)
        for (int64_t dx = 0; dx < block; ++dx)
          for (int64_t ch = 0; ch < oc; ++ch)
            out[s2d_src_index(i, j, dy, dx, ch, ow, oc, block)] = a.value()[idx++];
  auto od = make_output("depth-to-space", {oh, ow, oc}, std::move(out), {a.data_ptr()});
  auto ad = a.data_ptr();
  maybe_record("depth-to-space", {ad}, od, [ad, od, h, w, oc, ow, block] {
    if (!ad->requires_grad) return;
    ad->materialize_grad();
    size_t idx = 0;
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j)
        for (int64_t dy = 0; dy < block; ++dy)
          for (int64_t dx = 0; dx < block; ++dx)
            for (int64_t ch = 0; ch < oc; ++ch)
              ad->grad[idx++] += od->grad[s2d_src_index(i, j, dy, dx, ch, ow, oc, block)];
  });
  return Tensor::wrap(od);
}

std::vector<double> finite_diff_gradient(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> theta,
    double epsilon) {
  if (epsilon <= 0.0) throw NumericError("finite_diff_gradient: epsilon must be positive");
  double probe_a = f(theta);
  double probe_b = f(theta);
  if (std::memcmp(&probe_a, &probe_b, sizeof(double)) != 0)
    throw NumericError("finite_diff_gradient: f is not deterministic under fixed inputs");
  std::vector<double> grad(theta.size());
  for (size_t j = 0; j < theta.size(); ++j) {
    double saved = theta[j];
    theta[j] = saved + epsilon;
    double hi = f(theta);
    theta[j] = saved - epsilon;
    double lo = f(theta);
    theta[j] = saved;
    grad[j] = (hi - lo) / (2.0 * epsilon);
  }
  return grad;
}

}  // namespace cpcvar
