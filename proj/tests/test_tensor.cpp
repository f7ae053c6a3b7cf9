#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "cpcvar/rng.hpp"
#include "cpcvar/tensor.hpp"

using namespace cpcvar;

namespace {

double rel_err(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-3});
  return std::fabs(a - b) / denom;
}

// Independent oracle: central finite differences of loss = sum(op(x) * W)
// against the tape's analytic VJP, over all inputs jointly.
void gradcheck(const char* name, const std::vector<Shape>& input_shapes,
               const std::function<Tensor(const std::vector<Tensor>&)>& op, uint64_t seed,
               double tol = 1e-4) {
  Rng rng(seed);
  std::vector<size_t> sizes;
  size_t total = 0;
  for (const Shape& s : input_shapes) {
    sizes.push_back(static_cast<size_t>(shape_numel(s)));
    total += sizes.back();
  }
  std::vector<double> theta(total);
  for (auto& v : theta) v = rng.uniform(-1.0, 1.0);

  auto build_inputs = [&](const std::vector<double>& flat) {
    std::vector<Tensor> inputs;
    size_t off = 0;
    for (size_t i = 0; i < input_shapes.size(); ++i) {
      std::vector<double> vals(flat.begin() + static_cast<long>(off),
                               flat.begin() + static_cast<long>(off + sizes[i]));
      inputs.push_back(Tensor::from(input_shapes[i], std::move(vals), true));
      off += sizes[i];
    }
    return inputs;
  };

  // Fixed projection weights give the loss full Jacobian coverage.
  std::vector<double> proj;
  {
    auto probe = op(build_inputs(theta));
    proj.resize(probe.value().size());
    Rng wrng(seed ^ 0xabcdef12345ULL);
    for (auto& w : proj) w = wrng.uniform(-1.0, 1.0);
  }

  auto loss_of = [&](const std::vector<double>& flat) {
    auto out = op(build_inputs(flat));
    double acc = 0.0;
    for (size_t i = 0; i < out.value().size(); ++i) acc += out.value()[i] * proj[i];
    return acc;
  };

  std::vector<double> numeric = finite_diff_gradient(loss_of, theta, 1e-5);

  Tape tape;
  auto inputs = build_inputs(theta);
  auto out = op(inputs);
  auto loss = sum_all(mask_mul(out, proj));
  tape.backward(loss);

  size_t off = 0;
  double max_err = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    const auto& g = inputs[i].grad();
    for (size_t j = 0; j < g.size(); ++j)
      max_err = std::max(max_err, rel_err(g[j], numeric[off + j]));
    off += sizes[i];
  }
  INFO(name << " seed=" << seed << " max rel err=" << max_err);
  CHECK(max_err < tol);
}

}  // namespace

TEST_CASE("matmul shape algebra") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({3, 4});
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 4});
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), ShapeError);
}

TEST_CASE("softmax uniform case") {
  auto x = Tensor::zeros({1, 5});
  auto y = softmax_lastdim(x);
  for (double v : y.value()) CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(7);
  auto x = Tensor::from({6, 9}, rng.normal_vec(54, 0.0, 3.0));
  auto y = softmax_lastdim(x);
  for (int64_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < 9; ++c) s += y.value()[static_cast<size_t>(r * 9 + c)];
    CHECK(std::fabs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("cross entropy closed form ln 2") {
  auto logits = Tensor::from({1, 2}, {0.0, 0.0});
  auto loss = cross_entropy_sum(logits, {0});
  // -log softmax([0,0])[0] = ln 2, hand-checked.
  CHECK(loss.item() == doctest::Approx(0.6931471805599453).epsilon(1e-12));
}

TEST_CASE("layer norm row means vanish") {
  Rng rng(11);
  auto x = Tensor::from({4, 8}, rng.normal_vec(32, 0.7, 2.0));
  auto y = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}));
  for (int64_t r = 0; r < 4; ++r) {
    double mean = 0.0;
    for (int64_t c = 0; c < 8; ++c) mean += y.value()[static_cast<size_t>(r * 8 + c)];
    mean /= 8.0;
    CHECK(std::fabs(mean) < 1e-10);
  }
}

TEST_CASE("backward of sum gives ones") {
  Tape tape;
  auto x = Tensor::from({3}, {4.0, -1.0, 2.5}, true);
  auto loss = sum_all(x);
  tape.backward(loss);
  CHECK(x.grad() == std::vector<double>{1.0, 1.0, 1.0});
}

TEST_CASE("backward of quadratic") {
  Tape tape;
  auto x = Tensor::from({3}, {1.0, 2.0, 3.0}, true);
  auto loss = sum_all(mul(x, x));
  tape.backward(loss);
  CHECK(x.grad() == std::vector<double>{2.0, 4.0, 6.0});
}

TEST_CASE("gradient accumulates across fan-out") {
  Tape tape;
  auto x = Tensor::from({2}, {1.5, -0.5}, true);
  auto loss = sum_all(add(x, x));
  tape.backward(loss);
  CHECK(x.grad() == std::vector<double>{2.0, 2.0});
}

TEST_CASE("backward called twice fails") {
  Tape tape;
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  auto loss = sum_all(x);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), StateError);
}

TEST_CASE("two layer net matches finite differences") {
  // 17 parameters: W1 [2,3], b1 [3], W2 [3,2], b2 [2].
  Rng rng(42);
  std::vector<double> theta(17);
  for (auto& v : theta) v = rng.uniform(-1.0, 1.0);
  std::vector<double> input = {0.3, -0.8};
  std::vector<double> proj = {0.9, -1.3};

  auto unpack = [&](const std::vector<double>& t) {
    std::vector<double> w1(t.begin(), t.begin() + 6);
    std::vector<double> b1(t.begin() + 6, t.begin() + 9);
    std::vector<double> w2(t.begin() + 9, t.begin() + 15);
    std::vector<double> b2(t.begin() + 15, t.begin() + 17);
    return std::tuple{Tensor::from({2, 3}, w1, true), Tensor::from({3}, b1, true),
                      Tensor::from({3, 2}, w2, true), Tensor::from({2}, b2, true)};
  };
  auto forward = [&](const std::vector<double>& t) {
    auto [w1, b1, w2, b2] = unpack(t);
    auto x = Tensor::from({1, 2}, input);
    auto h = gelu(bias_add(matmul(x, w1), b1));
    auto y = bias_add(matmul(h, w2), b2);
    return std::tuple{y, w1, b1, w2, b2};
  };
  auto loss_of = [&](const std::vector<double>& t) {
    auto [y, w1, b1, w2, b2] = forward(t);
    return y.value()[0] * proj[0] + y.value()[1] * proj[1];
  };

  auto numeric = finite_diff_gradient(loss_of, theta, 1e-5);

  Tape tape;
  auto [y, w1, b1, w2, b2] = forward(theta);
  auto loss = sum_all(mask_mul(y, proj));
  tape.backward(loss);

  std::vector<double> analytic;
  for (const Tensor* t : {&w1, &b1, &w2, &b2})
    analytic.insert(analytic.end(), t->grad().begin(), t->grad().end());

  REQUIRE(analytic.size() == 17);
  for (size_t i = 0; i < 17; ++i) CHECK(rel_err(analytic[i], numeric[i]) < 1e-4);
}

TEST_CASE("finite diff on square and constant") {
  auto square = [](const std::vector<double>& t) { return t[0] * t[0]; };
  auto g = finite_diff_gradient(square, {3.0}, 1e-5);
  CHECK(g[0] == doctest::Approx(6.0).epsilon(1e-6));

  auto constant = [](const std::vector<double>&) { return 4.25; };
  auto gc = finite_diff_gradient(constant, {1.0, 2.0, 3.0}, 1e-5);
  for (double v : gc) CHECK(v == 0.0);
}

TEST_CASE("finite diff rejects nondeterministic f") {
  int calls = 0;
  auto f = [&calls](const std::vector<double>& t) { return t[0] + 1e-13 * (calls++); };
  CHECK_THROWS_AS(finite_diff_gradient(f, {1.0}, 1e-5), NumericError);
}

TEST_CASE("analytic VJP matches central differences on every primitive") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng shp(seed * 977 + 3);
    int64_t m = 1 + static_cast<int64_t>(shp.below(4));
    int64_t k = 1 + static_cast<int64_t>(shp.below(4));
    int64_t n = 1 + static_cast<int64_t>(shp.below(4));

    gradcheck("matmul", {{m, k}, {k, n}},
              [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); }, seed);
    gradcheck("add", {{m, n}, {m, n}},
              [](const std::vector<Tensor>& in) { return add(in[0], in[1]); }, seed);
    gradcheck("sub", {{m, n}, {m, n}},
              [](const std::vector<Tensor>& in) { return sub(in[0], in[1]); }, seed);
    gradcheck("multiply", {{m, n}, {m, n}},
              [](const std::vector<Tensor>& in) { return mul(in[0], in[1]); }, seed);
    gradcheck("multiply-scalar", {{m, n}},
              [](const std::vector<Tensor>& in) { return mul_scalar(in[0], -0.6); }, seed);
    gradcheck("divide-by-scalar", {{m, n}},
              [](const std::vector<Tensor>& in) { return div_scalar(in[0], 1.7); }, seed);
    gradcheck("concat", {{m, n}, {m, n}, {m, n}},
              [](const std::vector<Tensor>& in) { return concat(in, 1); }, seed);
    gradcheck("slice", {{4, 5}},
              [](const std::vector<Tensor>& in) { return slice(in[0], 1, 1, 4); }, seed);
    gradcheck("reshape", {{2, 6}},
              [](const std::vector<Tensor>& in) { return reshape(in[0], {3, 4}); }, seed);
    gradcheck("transpose", {{m, n}},
              [](const std::vector<Tensor>& in) { return transpose2d(in[0]); }, seed);
    gradcheck("embedding-lookup", {{5, 3}},
              [](const std::vector<Tensor>& in) {
                return embedding_lookup(in[0], {4, 0, 0, 2});
              },
              seed);
    gradcheck("softmax", {{m, 5}},
              [](const std::vector<Tensor>& in) { return softmax_lastdim(in[0]); }, seed);
    gradcheck("log-softmax", {{m, 5}},
              [](const std::vector<Tensor>& in) { return log_softmax_lastdim(in[0]); }, seed);
    gradcheck("layer-normalization", {{3, 6}, {6}, {6}},
              [](const std::vector<Tensor>& in) { return layer_norm(in[0], in[1], in[2]); },
              seed);
    gradcheck("gelu", {{m, n}},
              [](const std::vector<Tensor>& in) { return gelu(in[0]); }, seed);
    gradcheck("average-pool-2d", {{5, 7, 2}},
              [](const std::vector<Tensor>& in) { return avg_pool2d(in[0], 2, 3); }, seed);
    gradcheck("bilinear-resize-up", {{2, 3, 2}},
              [](const std::vector<Tensor>& in) { return bilinear_resize2d(in[0], 5, 4); },
              seed);
    gradcheck("bilinear-resize-down", {{4, 4, 2}},
              [](const std::vector<Tensor>& in) { return bilinear_resize2d(in[0], 2, 2); },
              seed);
    gradcheck("cross-entropy", {{3, 4}},
              [](const std::vector<Tensor>& in) {
                return cross_entropy_sum(in[0], {1, 3, 0});
              },
              seed);
    gradcheck("mask-multiply", {{2, 3}},
              [](const std::vector<Tensor>& in) {
                return mask_mul(in[0], {1.0, 0.0, 1.0, 0.0, 1.0, 1.0});
              },
              seed);
    gradcheck("bias-add", {{3, 4}, {4}},
              [](const std::vector<Tensor>& in) { return bias_add(in[0], in[1]); }, seed);
    gradcheck("space-to-depth", {{4, 6, 3}},
              [](const std::vector<Tensor>& in) { return space_to_depth(in[0], 2); }, seed);
    gradcheck("depth-to-space", {{2, 3, 8}},
              [](const std::vector<Tensor>& in) { return depth_to_space(in[0], 2); }, seed);
  }
}

TEST_CASE("forward backward replay is bit identical") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tape tape;
    auto w = Tensor::from({4, 4}, rng.normal_vec(16, 0.0, 0.5), true);
    auto x = Tensor::from({2, 4}, rng.normal_vec(8, 0.0, 1.0));
    auto h = gelu(matmul(x, w));
    auto y = softmax_lastdim(h);
    auto loss = cross_entropy_sum(h, {1, 2});
    tape.backward(loss);
    return std::tuple{y.value(), w.grad(), loss.item()};
  };
  auto [y1, g1, l1] = run(99);
  auto [y2, g2, l2] = run(99);
  CHECK(std::memcmp(y1.data(), y2.data(), y1.size() * 8) == 0);
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * 8) == 0);
  CHECK(std::memcmp(&l1, &l2, 8) == 0);
}

TEST_CASE("untouched tensors report zero grad") {
  Tape tape;
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  auto z = Tensor::from({2}, {5.0, 6.0}, true);
  auto loss = sum_all(x);
  tape.backward(loss);
  CHECK(z.grad() == std::vector<double>{0.0, 0.0});
}

TEST_CASE("shape errors name the primitive and shapes") {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
}

TEST_CASE("non-finite outputs are numeric faults") {
  auto x = Tensor::from({1}, {1e308});
  CHECK_THROWS_AS(mul(x, x), NumericError);
  CHECK_THROWS_AS(div_scalar(x, 0.0), NumericError);
}

TEST_CASE("pooling and resize specific values") {
  // (2,2) -> (1,1) mean of {1,2,3,4} is 2.5
  auto x = Tensor::from({2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
  auto p = avg_pool2d(x, 1, 1);
  CHECK(p.item() == doctest::Approx(2.5).epsilon(1e-15));

  // constant map stays constant under both resamplers
  auto c = Tensor::full({3, 3, 2}, 0.77);
  auto pooled = avg_pool2d(c, 2, 2);
  for (double v : pooled.value()) CHECK(v == doctest::Approx(0.77));
  auto resized = bilinear_resize2d(c, 7, 5);
  for (double v : resized.value()) CHECK(v == doctest::Approx(0.77));
}

TEST_CASE("backward on empty tape fails") {
  Tape tape;
  auto x = Tensor::from({1}, {3.0}, true);
  CHECK_THROWS_AS(tape.backward(x), StateError);
}
