// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "beatkit/tensor.hpp"

using namespace beatkit;

namespace {

// All gradient checks run in 64-bit mode.
using T = Tensor<double>;
using TapeD = Tape<double>;

double finite_diff_tol = 1e-3;

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  auto I = T::from({2, 2}, {1, 0, 0, 1});
  auto v = T::from({2, 1}, {3, 4});
  auto r = matmul(I, v);
  CHECK(r.data() == std::vector<double>{3, 4});

  auto a = T::from({2, 2}, {1, 2, 3, 4});
  auto b = T::from({2, 1}, {5, 6});
  auto c = matmul(a, b);
  CHECK(c.data() == std::vector<double>{17, 39});
}

TEST_CASE("matmul shape errors name both shapes") {
  auto a = T::zeros({2, 3});
  auto b = T::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(7);
  auto a = T::randn({3, 4}, rng);
  auto b = T::randn({4, 2}, rng);
  b.set_requires_grad();
  auto rep = grad_check([&]() { return sum(matmul(a, b)); }, a);
  CHECK(rep.max_rel_err < finite_diff_tol);

  // d sum(A*B) / dA = ones x B^T
  a.set_requires_grad();
  a.zero_grad();
  b.zero_grad();
  TapeD tape;
  {
    TapeD::Scope scope(tape);
    tape.backward(sum(matmul(a, b)));
  }
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 4; ++j) {
      double expect = b.at({j, 0}) + b.at({j, 1});
      CHECK_THAT(a.grad()[size_t(i * 4 + j)],
                 Catch::Matchers::WithinRel(expect, 1e-9));
    }
}

TEST_CASE("matmul broadcasts batch dimensions") {
  Rng rng(3);
  auto a = T::randn({2, 3, 2, 4}, rng);
  auto w = T::randn({4, 5}, rng);
  auto out = matmul(a, w);
  CHECK(out.shape() == Shape{2, 3, 2, 5});
  w.set_requires_grad();
  auto rep = grad_check([&]() { return sum(gelu(matmul(a, w))); }, w);
  CHECK(rep.max_rel_err < finite_diff_tol);
}

TEST_CASE("matmul transpose flags agree with explicit transpose") {
  Rng rng(11);
  auto a = T::randn({4, 3}, rng);
  auto b = T::randn({4, 5}, rng);
  auto r1 = matmul(a, b, true, false);
  auto r2 = matmul(transpose(a, {1, 0}), b);
  for (size_t i = 0; i < r1.data().size(); ++i)
    CHECK_THAT(r1.data()[i], Catch::Matchers::WithinAbs(r2.data()[i], 1e-12));

  a.set_requires_grad();
  auto rep = grad_check([&]() { return sum(square(matmul(a, b, true, false))); }, a);
  CHECK(rep.max_rel_err < finite_diff_tol);
  b.set_requires_grad();
  auto rep2 = grad_check(
      [&]() { return sum(square(matmul(b, a, true, true))); }, b);
  CHECK(rep2.max_rel_err < finite_diff_tol);
}

TEST_CASE("conv2d identity and hand case") {
  auto x = T::from({4, 1, 1}, {1, 2, 3, 4});
  auto k1 = T::from({1, 1, 1, 1}, {1});
  auto id = conv2d(x, k1, {1, 1}, {0, 0});
  CHECK(id.data() == x.data());

  // [1,2,3,4] * [1,1] stride 2 -> [3,7]
  auto k = T::from({2, 1, 1, 1}, {1, 1});
  auto out = conv2d(x, k, {2, 1}, {0, 0});
  CHECK(out.shape() == Shape{2, 1, 1});
  CHECK(out.data() == std::vector<double>{3, 7});
}

TEST_CASE("conv2d rejects non-integral output size") {
  auto x = T::zeros({5, 1, 1});
  auto k = T::zeros({2, 1, 1, 1});
  CHECK_THROWS_AS(conv2d(x, k, {2, 1}, {0, 0}), ShapeError);
}

TEST_CASE("conv2d gradient matches finite differences") {
  Rng rng(5);
  auto x = T::randn({8, 8, 2}, rng);
  auto w = T::randn({3, 3, 2, 3}, rng);
  auto repx = grad_check(
      [&]() { return sum(square(conv2d(x, w, {1, 2}, {1, 1}))); }, x);
  CHECK(repx.max_rel_err < finite_diff_tol);
  auto repw = grad_check(
      [&]() { return sum(square(conv2d(x, w, {1, 2}, {1, 1}))); }, w);
  CHECK(repw.max_rel_err < finite_diff_tol);

  // batched input shares the kernel
  auto xb = T::randn({2, 5, 4, 2}, rng);
  auto repb = grad_check(
      [&]() { return sum(square(conv2d(xb, w, {1, 1}, {1, 1}))); }, w);
  CHECK(repb.max_rel_err < finite_diff_tol);
}

TEST_CASE("batch_norm basics") {
  auto gamma = T::ones({2});
  auto beta = T::zeros({2});
  auto rm = T::zeros({2});
  auto rv = T::ones({2});

  SECTION("constant input normalizes to zero in train mode") {
    auto x = T::filled({4, 2}, 3.0);
    auto y = batch_norm(x, gamma, beta, rm, rv, 1, true);
    for (double v : y.data()) CHECK_THAT(v, Catch::Matchers::WithinAbs(0, 1e-6));
  }

  SECTION("[1,3] normalizes to [-1,1] with population variance") {
    auto x = T::from({2, 1}, {1, 3});
    auto g1 = T::ones({1});
    auto b1 = T::zeros({1});
    auto m1 = T::zeros({1});
    auto v1 = T::ones({1});
    auto y = batch_norm(x, g1, b1, m1, v1, 1, true);
    CHECK_THAT(y.data()[0], Catch::Matchers::WithinAbs(-1.0, 1e-4));
    CHECK_THAT(y.data()[1], Catch::Matchers::WithinAbs(1.0, 1e-4));
    // running stats moved toward batch stats with momentum 0.1
    CHECK_THAT(m1.data()[0], Catch::Matchers::WithinAbs(0.2, 1e-12));
    CHECK_THAT(v1.data()[0], Catch::Matchers::WithinAbs(0.9 + 0.1, 1e-12));
  }

  SECTION("eval mode is an affine function of its input") {
    Rng rng(9);
    auto x1 = T::randn({3, 2}, rng);
    auto x2 = T::randn({3, 2}, rng);
    rm = T::from({2}, {0.5, -0.25});
    rv = T::from({2}, {2.0, 0.5});
    auto ga = T::from({2}, {1.5, 0.75});
    auto be = T::from({2}, {0.1, -0.2});
    auto y1 = batch_norm(x1, ga, be, rm, rv, 1, false);
    auto y2 = batch_norm(x2, ga, be, rm, rv, 1, false);
    auto xs = add(x1, x2);
    auto y0 = batch_norm(T::zeros({3, 2}), ga, be, rm, rv, 1, false);
    auto ys = batch_norm(xs, ga, be, rm, rv, 1, false);
    // f(a+b) = f(a) + f(b) - f(0) for affine f
    for (size_t i = 0; i < ys.data().size(); ++i)
      CHECK_THAT(ys.data()[i],
                 Catch::Matchers::WithinAbs(
                     y1.data()[i] + y2.data()[i] - y0.data()[i], 1e-9));
  }

  SECTION("gradients match finite differences in both modes") {
    Rng rng(13);
    auto x = T::randn({6, 3}, rng);
    auto g = T::randn({3}, rng);
    auto b = T::randn({3}, rng);
    auto m = T::zeros({3});
    auto v = T::ones({3});
    for (bool training : {true, false}) {
      auto f = [&]() {
        auto mm = m.detach();
        auto vv = v.detach();
        return sum(square(batch_norm(x, g, b, mm, vv, 1, training)));
      };
      auto repx = grad_check(f, x);
      CHECK(repx.max_rel_err < finite_diff_tol);
      auto repg = grad_check(f, g);
      CHECK(repg.max_rel_err < finite_diff_tol);
      auto repb = grad_check(f, b);
      CHECK(repb.max_rel_err < finite_diff_tol);
    }
  }
}

TEST_CASE("pointwise primitives") {
  auto x = T::from({3}, {0.0, 1.0, -1.0});
  CHECK(gelu(x).data()[0] == 0.0);
  CHECK_THAT(sigmoid(T::scalar(0.0)).item(), Catch::Matchers::WithinAbs(0.5, 1e-12));
  auto sm = softmax(T::from({2}, {0.0, 0.0}), 0);
  CHECK_THAT(sm.data()[0], Catch::Matchers::WithinAbs(0.5, 1e-12));
  CHECK_THAT(sm.data()[1], Catch::Matchers::WithinAbs(0.5, 1e-12));
  CHECK_THROWS_AS(softmax(x, 3), ShapeError);

  Rng rng(21);
  auto r = T::randn({4, 5}, rng);
  for (auto op : {0, 1, 2, 3, 4}) {
    auto f = [&]() {
      switch (op) {
        case 0: return sum(gelu(r));
        case 1: return sum(sigmoid(r));
        case 2: return sum(softplus(r));
        case 3: return sum(square(softmax(r, 1)));
        default: return sum(mul(r, sigmoid(r)));
      }
    };
    auto rep = grad_check(f, r);
    INFO("op " << op);
    CHECK(rep.max_rel_err < finite_diff_tol);
  }
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(2);
  auto x = T::randn({7, 9}, rng, 3.0);
  auto y = softmax(x, 1);
  for (int64_t i = 0; i < 7; ++i) {
    double s = 0;
    for (int64_t j = 0; j < 9; ++j) s += y.at({i, j});
    CHECK_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-6));
  }
}

TEST_CASE("shape ops preserve values") {
  Rng rng(17);
  auto x = T::randn({3, 4, 5}, rng);
  auto r = reshape(x, {4, 15});
  auto t = transpose(x, {2, 0, 1});
  auto sorted_of = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  CHECK(sorted_of(r.data()) == sorted_of(x.data()));
  CHECK(sorted_of(t.data()) == sorted_of(x.data()));
  CHECK(t.shape() == Shape{5, 3, 4});
  CHECK(t.at({2, 1, 3}) == x.at({1, 3, 2}));

  auto back = transpose(t, {1, 2, 0});
  CHECK(back.data() == x.data());

  auto rep = grad_check(
      [&]() { return sum(square(transpose(reshape(x, {12, 5}), {1, 0}))); }, x);
  CHECK(rep.max_rel_err < finite_diff_tol);
}

TEST_CASE("concat and slice round trip with gradients") {
  Rng rng(31);
  auto a = T::randn({2, 3}, rng);
  auto b = T::randn({2, 2}, rng);
  auto c = concat<double>({a, b}, 1);
  CHECK(c.shape() == Shape{2, 5});
  auto a2 = slice(c, 1, 0, 3);
  CHECK(a2.data() == a.data());
  auto rep = grad_check(
      [&]() { return sum(square(slice(concat<double>({a, b}, 1), 1, 1, 4))); }, a);
  CHECK(rep.max_rel_err < finite_diff_tol);
  CHECK_THROWS_AS(slice(c, 1, 3, 6), ShapeError);
}

TEST_CASE("reductions") {
  auto x = T::from({2, 2}, {1, 2, 3, 4});
  CHECK(sum(x).item() == 10.0);
  CHECK(mean(x).item() == 2.5);
  auto s0 = sum(x, 0);
  CHECK(s0.data() == std::vector<double>{4, 6});
  auto m1 = max(x, 1, true);
  CHECK(m1.shape() == Shape{2, 1});
  CHECK(m1.data() == std::vector<double>{2, 4});

  Rng rng(41);
  auto r = T::randn({3, 4}, rng);
  auto rep = grad_check([&]() { return sum(square(mean(r, 0))); }, r);
  CHECK(rep.max_rel_err < finite_diff_tol);
  auto repm = grad_check([&]() { return sum(square(max(r, 1))); }, r);
  CHECK(repm.max_rel_err < finite_diff_tol);
}

TEST_CASE("backward populates leaf gradients") {
  SECTION("sum gives ones") {
    auto x = T::zeros({2, 3}).set_requires_grad();
    TapeD tape;
    TapeD::Scope scope(tape);
    tape.backward(sum(x));
    CHECK(x.grad() == std::vector<double>(6, 1.0));
  }

  SECTION("sum of squares") {
    auto x = T::from({2}, {1, 2}).set_requires_grad();
    TapeD tape;
    TapeD::Scope scope(tape);
    tape.backward(sum(square(x)));
    CHECK(x.grad() == std::vector<double>{2, 4});
  }

  SECTION("non-scalar loss is rejected") {
    auto x = T::zeros({2}).set_requires_grad();
    TapeD tape;
    TapeD::Scope scope(tape);
    auto y = square(x);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
  }

  SECTION("calling backward twice doubles leaf gradients") {
    auto x = T::from({2}, {1, 2}).set_requires_grad();
    TapeD tape;
    TapeD::Scope scope(tape);
    auto loss = sum(square(x));
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad() == std::vector<double>{4, 8});
  }

  SECTION("gradients accumulate across uses of the same tensor") {
    auto x = T::from({2}, {1, 3}).set_requires_grad();
    TapeD tape;
    TapeD::Scope scope(tape);
    // loss = sum(x*x) + sum(x) -> grad = 2x + 1
    tape.backward(add(sum(mul(x, x)), sum(x)));
    CHECK(x.grad() == std::vector<double>{3, 7});
  }
}

TEST_CASE("composite graph matches finite differences") {
  Rng rng(55);
  auto x = T::randn({4, 3}, rng);
  auto w = T::randn({3, 5}, rng);
  auto rep = grad_check([&]() { return sum(gelu(matmul(x, w))); }, x);
  CHECK(rep.max_rel_err < finite_diff_tol);
  auto repw = grad_check([&]() { return sum(gelu(matmul(x, w))); }, w);
  CHECK(repw.max_rel_err < finite_diff_tol);
}

TEST_CASE("max_pool_1d") {
  SECTION("k=7 spreads an isolated peak over the whole window") {
    auto x = T::from({7}, {0, 0, 0, 1, 0, 0, 0});
    auto y = max_pool_1d(x, 7);
    CHECK(y.data() == std::vector<double>(7, 1.0));
  }

  SECTION("k=1 is the identity") {
    Rng rng(5);
    auto x = T::randn({10}, rng);
    CHECK(max_pool_1d(x, 1).data() == x.data());
  }

  SECTION("k=13 covers +-6 frames") {
    std::vector<double> v(13, 0.0);
    v[6] = 1.0;
    auto y = max_pool_1d(T::from({13}, v), 13);
    CHECK(y.data() == std::vector<double>(13, 1.0));
  }

  SECTION("even window is a configuration error") {
    CHECK_THROWS_AS(max_pool_1d(T::zeros({4}), 2), ConfigError);
  }

  SECTION("pooled output dominates the input") {
    Rng rng(77);
    auto x = T::randn({50}, rng);
    auto y = max_pool_1d(x, 7);
    for (size_t i = 0; i < 50; ++i) CHECK(y.data()[i] >= x.data()[i]);
  }

  SECTION("gradient routes to first argmax and matches finite differences") {
    auto x = T::from({5}, {1, 2, 2, 0, 1}).set_requires_grad();
    TapeD tape;
    {
      TapeD::Scope scope(tape);
      tape.backward(sum(max_pool_1d(x, 3)));
    }
    // windows t=0..2 all resolve to idx 1 (first of the tied pair),
    // t=3 -> idx 2, t=4 -> idx 4
    CHECK(x.grad() == std::vector<double>{0, 3, 1, 0, 1});

    Rng rng(6);
    auto r = T::randn({2, 31}, rng);
    auto rep = grad_check([&]() { return sum(square(max_pool_1d(r, 7))); }, r);
    CHECK(rep.max_rel_err < finite_diff_tol);
  }

  SECTION("pooling along a non-terminal axis") {
    auto x = T::from({3, 2}, {0, 5, 1, 0, 0, 0});
    auto y = max_pool_1d(x, 3, 0);
    CHECK(y.data() == std::vector<double>{1, 5, 1, 5, 1, 0});
  }
}

TEST_CASE("grad_check on trivial function reports zero error") {
  auto x = T::from({4}, {1, 2, 3, 4});
  auto rep = grad_check([&]() { return sum(x); }, x);
  CHECK(rep.max_rel_err < 1e-9);
  CHECK(rep.checked == 4);
}

TEST_CASE("no recording happens without an active tape") {
  auto x = T::from({2}, {1, 2}).set_requires_grad();
  auto y = square(x);
  CHECK_FALSE(y.node()->on_tape);
}
