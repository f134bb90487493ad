#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "warpattn/gradcheck.hpp"
#include "warpattn/tensor.hpp"

using namespace warpattn;

namespace {

Tensor<double> identity2(Index n) {
  Tensor<double> t = Tensor<double>::zeros({n, n});
  for (Index i = 0; i < n; ++i) t.mutable_data()[i * n + i] = 1.0;
  return t;
}

}  // namespace

TEST_CASE("matmul identity and selection") {
  auto a = Tensor<double>::from_vector({2, 2}, {1, 2, 3, 4});
  auto r = matmul(a, identity2(2));
  CHECK(oracle::max_abs_diff(r, {1.0, 2.0, 3.0, 4.0}) == 0.0);

  auto u = Tensor<double>::from_vector({1, 2}, {1, 0});
  auto v = Tensor<double>::from_vector({2, 1}, {0, 5});
  CHECK(matmul(u, v).item() == 0.0);
}

TEST_CASE("matmul random vs triple-loop oracle") {
  SeededRng rng(7);
  auto a = uniform_tensor<double>(rng, {4, 3}, -1, 1);
  auto b = uniform_tensor<double>(rng, {3, 5}, -1, 1);
  auto ref = oracle::matmul(oracle::to_vec(a), oracle::to_vec(b), 4, 3, 5);
  CHECK(oracle::max_abs_diff(matmul(a, b), ref) <= 1e-12);
}

TEST_CASE("matmul shape mismatch") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({2, 3});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ValidationError);
}

TEST_CASE("matmul associativity on random 4x4 triples") {
  SeededRng rng(21);
  for (int t = 0; t < 10; ++t) {
    auto a = uniform_tensor<double>(rng, {4, 4}, -1, 1);
    auto b = uniform_tensor<double>(rng, {4, 4}, -1, 1);
    auto c = uniform_tensor<double>(rng, {4, 4}, -1, 1);
    auto lhs = matmul(matmul(a, b), c);
    auto rhs = matmul(a, matmul(b, c));
    CHECK(oracle::max_abs_diff(lhs, rhs) <= 1e-10);
  }
}

TEST_CASE("softmax_rows basics") {
  auto x = Tensor<double>::from_vector({1, 2}, {0, 0});
  auto y = softmax_rows(x, 1.0);
  CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(0.5).epsilon(1e-12));

  auto big = Tensor<double>::from_vector({1, 2}, {1000, 0});
  auto yb = softmax_rows(big, 1.0);
  CHECK(std::abs(yb[0] - 1.0) <= 1e-12);
  CHECK(std::abs(yb[1] - 0.0) <= 1e-12);

  CHECK_THROWS_AS(softmax_rows(x, 0.0), ValidationError);
  CHECK_THROWS_AS(softmax_rows(x, -1.0), ValidationError);
}

TEST_CASE("softmax_rows random vs naive oracle") {
  SeededRng rng(11);
  auto x = uniform_tensor<double>(rng, {3, 4}, -2, 2);
  auto ref = oracle::softmax_rows(oracle::to_vec(x), 3, 4, std::sqrt(4.0));
  CHECK(oracle::max_abs_diff(softmax_rows(x, std::sqrt(4.0)), ref) <= 1e-12);
}

TEST_CASE("softmax_rows rows sum to one (property)") {
  SeededRng rng(13);
  for (int t = 0; t < 50; ++t) {
    Index m = 1 + rng.next_u32() % 5, n = 1 + rng.next_u32() % 7;
    auto x = uniform_tensor<double>(rng, {m, n}, -50, 50);
    auto y = softmax_rows(x, 2.0);
    for (Index r = 0; r < m; ++r) {
      double s = 0;
      for (Index j = 0; j < n; ++j) s += y[r * n + j];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("conv2d identity kernel and zero input") {
  SeededRng rng(3);
  auto in = uniform_tensor<double>(rng, {1, 4, 5}, -1, 1);
  auto k = Tensor<double>::from_vector({1, 1, 1, 1}, {1.0});
  CHECK(oracle::max_abs_diff(conv2d(in, k, 1, 0), oracle::to_vec(in)) == 0.0);

  auto zin = Tensor<double>::zeros({2, 4, 4});
  auto k2 = uniform_tensor<double>(rng, {3, 2, 3, 3}, -1, 1);
  auto out = conv2d(zin, k2, 1, 1);
  for (Index i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);
}

TEST_CASE("conv2d random vs direct-loop oracle") {
  SeededRng rng(5);
  auto in = uniform_tensor<double>(rng, {2, 5, 5}, -1, 1);
  auto k = uniform_tensor<double>(rng, {3, 2, 3, 3}, -1, 1);
  for (Index stride : {Index{1}, Index{2}}) {
    for (Index pad : {Index{0}, Index{1}}) {
      auto out = conv2d(in, k, stride, pad);
      auto ref = oracle::conv2d(oracle::to_vec(in), oracle::to_vec(k), 2, 5, 5, 3, 3,
                                stride, pad);
      CHECK(oracle::max_abs_diff(out, ref) <= 1e-12);
    }
  }
}

TEST_CASE("conv2d validation errors") {
  auto in = Tensor<double>::zeros({1, 2, 2});
  auto k4 = Tensor<double>::zeros({1, 1, 4, 4});  // even kernel
  CHECK_THROWS_AS(conv2d(in, k4, 1, 0), ValidationError);
  auto k5 = Tensor<double>::zeros({1, 1, 5, 5});  // output would be < 1
  CHECK_THROWS_AS(conv2d(in, k5, 1, 0), ValidationError);
}

TEST_CASE("elementwise definitions") {
  auto x = Tensor<double>::from_vector({2}, {-10, 10});
  auto y = leaky_relu(x, 0.1);
  CHECK(y[0] == doctest::Approx(-1.0));
  CHECK(y[1] == doctest::Approx(10.0));

  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({1, 3});
  auto c = concat<double>({a, b}, 0);
  CHECK(c.shape() == Shape{3, 3});

  auto s = sum_abs(Tensor<double>::from_vector({3}, {-1, 2, -3}));
  CHECK(s.item() == 6.0);

  auto m = mean(Tensor<double>::from_vector({4}, {1, 2, 3, 4}));
  CHECK(m.item() == doctest::Approx(2.5));

  CHECK_THROWS_AS(add(a, b), ValidationError);
}

TEST_CASE("concat interior axis") {
  auto a = Tensor<double>::from_vector({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from_vector({2, 1}, {9, 8});
  auto c = concat<double>({a, b}, 1);
  REQUIRE(c.shape() == Shape{2, 3});
  CHECK(oracle::max_abs_diff(c, {1, 2, 9, 3, 4, 8}) == 0.0);
}

TEST_CASE("transpose/reshape/slice/tile") {
  auto x = Tensor<double>::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
  auto t = transpose2d(x);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.at({2, 1}) == 6.0);

  auto r = reshape(x, {3, 2});
  CHECK(r.at({2, 1}) == 6.0);
  CHECK_THROWS_AS(reshape(x, {4, 2}), ValidationError);

  auto s = slice0(x, 1, 1);
  CHECK(s.shape() == Shape{1, 3});
  CHECK(s[0] == 4.0);

  auto tiled = tile0(s, 3);
  CHECK(tiled.shape() == Shape{3, 3});
  CHECK(tiled.at({2, 2}) == 6.0);
}

TEST_CASE("upsample2x preserves constants and doubles size") {
  auto x = Tensor<double>::full({2, 3, 4}, 0.7);
  auto u = upsample2x(x);
  CHECK(u.shape() == Shape{2, 6, 8});
  for (Index i = 0; i < u.size(); ++i) CHECK(u[i] == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("backward on sum of squares") {
  Graph<double> g;
  auto x = Tensor<double>::leaf(g, Tensor<double>::from_vector({3}, {1, 2, 3}), "x");
  auto loss = mean(mul(x, x));  // (1/3) sum x^2
  auto grads = backward(loss);
  auto gx = grads.at(x.node());
  CHECK(gx[0] == doctest::Approx(2.0 / 3));
  CHECK(gx[1] == doctest::Approx(4.0 / 3));
  CHECK(gx[2] == doctest::Approx(6.0 / 3));
}

TEST_CASE("backward: untracked constant absent from gradient map") {
  Graph<double> g;
  auto x = Tensor<double>::leaf(g, Tensor<double>::from_vector({2}, {1, 2}), "x");
  auto c = Tensor<double>::from_vector({2}, {5, 5});  // constant
  auto loss = mean(mul(x, c));
  auto grads = backward(loss);
  CHECK(grads.count(x.node()) == 1);
  CHECK(!c.tracked());
  // graph only contains x, mul, mean
  CHECK(grads.size() <= 3);
}

TEST_CASE("backward rejects non-scalar loss") {
  Graph<double> g;
  auto x = Tensor<double>::leaf(g, Tensor<double>::from_vector({2}, {1, 2}), "x");
  auto y = mul(x, x);
  CHECK_THROWS_AS(backward(y), ValidationError);
}

TEST_CASE("backward of mean(matmul) matches finite differences") {
  SeededRng rng(17);
  auto b = uniform_tensor<double>(rng, {3, 2}, -1, 1);
  auto point = uniform_tensor<double>(rng, {2, 3}, -1, 1);
  auto rep = gradcheck<double>(
      [&](const Tensor<double>& a) { return mean(matmul(a, b)); }, point, 1e-5);
  CHECK(rep.max_rel_err <= 1e-6);
}

TEST_CASE("gradcheck on linear function is near-exact") {
  SeededRng rng(19);
  auto point = uniform_tensor<double>(rng, {5}, -1, 1);
  auto rep = gradcheck<double>(
      [](const Tensor<double>& x) { return scale(sum_abs(mul(x, x)), 0.5); }, point,
      1e-5);
  CHECK(rep.max_rel_err <= 1e-6);

  auto lin = gradcheck<double>([](const Tensor<double>& x) { return mean(x); },
                               point, 1e-5);
  CHECK(lin.max_rel_err <= 1e-10);
}

TEST_CASE("gradcheck across the registered op set") {
  SeededRng rng(23);
  // point kept away from leaky_relu kink and abs kink
  auto point = uniform_tensor<double>(rng, {2, 6}, 0.2, 1.0);
  auto other = uniform_tensor<double>(rng, {2, 6}, -1.0, -0.2);

  auto composite = [&](const Tensor<double>& x) {
    auto a = leaky_relu(sub(x, other), 0.1);
    auto b = softmax_rows(a, 2.0);
    auto c = matmul(b, transpose2d(a));
    auto d = tanh_map(concat<double>({c, c}, 1));
    auto e = reshape(d, {4, 12});
    return add(mean(slice0(e, 1, 2)), scale(sum_abs(b), 0.01));
  };
  auto rep = gradcheck<double>(composite, point, 1e-5);
  CHECK(rep.max_rel_err <= 1e-6);
}

TEST_CASE("gradcheck through conv2d and upsample2x") {
  SeededRng rng(29);
  auto kernel = uniform_tensor<double>(rng, {2, 3, 3, 3}, -0.5, 0.5);
  auto point = uniform_tensor<double>(rng, {3, 4, 4}, -1, 1);
  auto repi = gradcheck<double>(
      [&](const Tensor<double>& x) { return mean(upsample2x(conv2d(x, kernel, 2, 1))); },
      point, 1e-5);
  CHECK(repi.max_rel_err <= 1e-6);

  auto input = uniform_tensor<double>(rng, {3, 4, 4}, -1, 1);
  auto repk = gradcheck<double>(
      [&](const Tensor<double>& k) { return mean(conv2d(input, k, 1, 1)); }, kernel,
      1e-5);
  CHECK(repk.max_rel_err <= 1e-6);
}

TEST_CASE("gradcheck f32 composite meets 1e-4") {
  SeededRng rng(31);
  auto point = uniform_tensor<float>(rng, {3, 3}, 0.2f, 1.0f);
  auto rep = gradcheck<float>(
      [](const Tensor<float>& x) {
        return mean(matmul(softmax_rows(x, 1.5f), transpose2d(x)));
      },
      point, 1e-2f);
  CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("deliberately wrong backward is caught (fault fixture)") {
  SeededRng rng(37);
  auto point = uniform_tensor<double>(rng, {4}, 0.5, 1.5);
  // a broken "square" op whose backward claims d/dx = 3x instead of 2x
  auto broken_square = [](const Tensor<double>& x) {
    auto buf = warpattn::detail::make_buffer<double>(x.size());
    for (Index i = 0; i < x.size(); ++i) (*buf)[i] = x[i] * x[i];
    Tensor<double> out = Tensor<double>::wrap(x.shape(), std::move(buf));
    Tensor<double> xd = x.detached();
    warpattn::detail::record_op<double>(
        out, "broken_square",
        {{&x, [xd](const Tensor<double>& g) { return scale(mul(g, xd), 3.0); }}});
    return out;
  };
  auto rep = gradcheck<double>(
      [&](const Tensor<double>& x) { return mean(broken_square(x)); }, point, 1e-5);
  CHECK(rep.max_rel_err > 0.1);
}

TEST_CASE("tensors reject non-finite values at construction") {
  CHECK_THROWS_AS(Tensor<double>::from_vector({1}, {std::nan("")}), NumericError);
  DebugChecksGuard guard(true);
  auto x = Tensor<double>::from_vector({1}, {1e308});
  CHECK_THROWS_AS(mul(x, x), NumericError);
}

TEST_CASE("ops are deterministic across runs") {
  auto run = [] {
    SeededRng rng(99);
    auto a = uniform_tensor<double>(rng, {8, 8}, -1, 1);
    auto b = uniform_tensor<double>(rng, {8, 8}, -1, 1);
    return matmul(softmax_rows(a, 2.0), b);
  };
  auto r1 = run(), r2 = run();
  for (Index i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("mixing graphs is rejected") {
  Graph<double> g1, g2;
  auto x = Tensor<double>::leaf(g1, Tensor<double>::scalar(1.0), "x");
  auto y = Tensor<double>::leaf(g2, Tensor<double>::scalar(2.0), "y");
  CHECK_THROWS_AS(add(x, y), ValidationError);
}

TEST_CASE("allocation stats track buffer lifetimes") {
  auto& stats = alloc_stats();
  const auto base = stats.current;
  stats.reset_peak();
  {
    auto t = Tensor<double>::zeros({64, 64});
    CHECK(stats.current >= base + 64 * 64 * static_cast<Index>(sizeof(double)));
  }
  CHECK(stats.current == base);
  CHECK(stats.peak >= base + 64 * 64 * static_cast<Index>(sizeof(double)));
}
