// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "fanformer/tensor.hpp"
#include "gradcheck.hpp"

using namespace fanformer;
using testutil::check_gradients;
using testutil::random_tensor;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul identity and hand cases") {
  Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor out = matmul(Tensor::identity(2), a);
  CHECK(out.at(0, 0) == 1);
  CHECK(out.at(0, 1) == 2);
  CHECK(out.at(1, 0) == 3);
  CHECK(out.at(1, 1) == 4);

  Tensor r = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  CHECK(r.item() == 11);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  try {
    matmul(a, b);
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("4x2") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches finite differences") {
  std::mt19937_64 rng(7);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {4, 2});
  auto res = check_gradients([&] { return sum(matmul(a, b)); }, {&a, &b});
  CHECK(res.pass);
  CHECK(res.worst_abs < 1e-6);
}

TEST_CASE("unary basics") {
  Tensor z = Tensor::zeros({2, 3});
  Tensor c = unary(UnaryKind::cos, z);
  Tensor s = unary(UnaryKind::sin, z);
  for (double v : c.data()) CHECK(v == 1.0);
  for (double v : s.data()) CHECK(v == 0.0);
  CHECK(unary(UnaryKind::swish, Tensor::scalar(0)).item() == 0.0);
  CHECK_THROWS_AS(unary(UnaryKind::reciprocal, Tensor::scalar(0)), NumericError);
}

TEST_CASE("d/dx cos at 1 is -sin(1)") {
  Tensor x = Tensor::scalar(1.0);
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = sum(unary(UnaryKind::cos, x));
  tape.backward(y);
  CHECK(tape.grad(x).item() == doctest::Approx(-std::sin(1.0)).epsilon(1e-10));
  auto res = check_gradients([&] { return sum(unary(UnaryKind::cos, x)); }, {&x});
  CHECK(res.worst_abs < 1e-6);
}

TEST_CASE("all pointwise unaries pass gradcheck") {
  std::mt19937_64 rng(11);
  for (UnaryKind kind : {UnaryKind::cos, UnaryKind::sin, UnaryKind::exp,
                         UnaryKind::swish, UnaryKind::neg, UnaryKind::gelu,
                         UnaryKind::sigmoid}) {
    Tensor x = random_tensor(rng, {2, 5});
    Tensor w = random_tensor(rng, {2, 5}, -1, 1, false);
    auto res = check_gradients([&] { return sum(mul(unary(kind, x), w)); }, {&x});
    CHECK_MESSAGE(res.pass, "kind=" << static_cast<int>(kind)
                                    << " worst_abs=" << res.worst_abs);
  }
  // positive-domain unaries
  Tensor x = random_tensor(rng, {2, 5}, 0.5, 3.0);
  for (UnaryKind kind : {UnaryKind::reciprocal, UnaryKind::sqrt}) {
    auto res = check_gradients([&] { return sum(unary(kind, x)); }, {&x});
    CHECK(res.pass);
  }
}

TEST_CASE("softmax values and stabilization") {
  Tensor u = softmax_lastdim(Tensor::row({0, 0, 0}));
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-14));

  Tensor big = softmax_lastdim(Tensor::row({1000, 1000}));
  CHECK(big.data()[0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(std::isfinite(big.data()[0]));

  std::mt19937_64 rng(3);
  Tensor x = random_tensor(rng, {4, 6}, -5, 5, false);
  Tensor s = softmax_lastdim(x);
  for (std::size_t i = 0; i < 4; ++i) {
    double row_sum = 0;
    for (std::size_t j = 0; j < 6; ++j) {
      CHECK(s.at(i, j) >= 0.0);
      row_sum += s.at(i, j);
    }
    CHECK(std::abs(row_sum - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax gradient matches finite differences") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor(rng, {1, 5});
  Tensor w = random_tensor(rng, {1, 5}, -1, 1, false);
  auto res = check_gradients([&] { return sum(mul(softmax_lastdim(x), w)); }, {&x});
  CHECK(res.pass);
  CHECK(res.worst_abs < 1e-6);
}

TEST_CASE("concat columns and identity") {
  Tensor a = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  Tensor b = Tensor::matrix({{7}, {8}});
  Tensor c = concat_lastdim({a, b});
  CHECK(c.shape() == Shape{2, 4});
  CHECK(c.at(0, 3) == 7);
  CHECK(c.at(1, 0) == 4);

  Tensor one = concat_lastdim({a});
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(one.data()[i] == a.data()[i]);

  CHECK_THROWS_AS(concat_lastdim({a, Tensor::zeros({3, 1})}), ShapeError);
}

TEST_CASE("concat/slice backward round-trips the gradient partition") {
  std::mt19937_64 rng(9);
  Tensor a = random_tensor(rng, {2, 3});
  Tensor b = random_tensor(rng, {2, 2});
  Tensor w = random_tensor(rng, {2, 5}, -1, 1, false);
  Tape tape;
  Tensor cat = concat_lastdim({a, b});
  tape.backward(sum(mul(cat, w)));
  Tensor ga = tape.grad(a), gb = tape.grad(b);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(ga.at(i, j) == w.at(i, j));
    for (std::size_t j = 0; j < 2; ++j) CHECK(gb.at(i, j) == w.at(i, j + 3));
  }
}

TEST_CASE("slice gradcheck") {
  std::mt19937_64 rng(13);
  Tensor x = random_tensor(rng, {3, 6});
  auto res = check_gradients([&] { return sum(slice_lastdim(x, 2, 3)); }, {&x});
  CHECK(res.pass);
}

TEST_CASE("backward of sum is all-ones; of sum(x*x) is 2x") {
  std::mt19937_64 rng(17);
  Tensor x = random_tensor(rng, {3, 4});
  {
    Tape tape;
    tape.backward(sum(x));
    for (double g : tape.grad(x).data()) CHECK(g == 1.0);
  }
  {
    Tape tape;
    tape.backward(sum(mul(x, x)));
    Tensor g = tape.grad(x);
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(g.data()[i] == doctest::Approx(2 * x.data()[i]).epsilon(1e-14));
  }
}

TEST_CASE("backward requires a scalar root") {
  Tensor x = Tensor::zeros({2, 2}, true);
  Tape tape;
  Tensor y = add(x, x);
  CHECK_THROWS_AS(tape.backward(y), UsageError);
}

TEST_CASE("forward is bit-identical with and without grad tracking") {
  std::mt19937_64 rng(21);
  Tensor xg = random_tensor(rng, {3, 4}, -2, 2, true);
  Tensor w = random_tensor(rng, {4, 4}, -2, 2, false);
  Tensor xn(xg.shape(), xg.data());
  auto run = [&](const Tensor& x) {
    return softmax_lastdim(unary(UnaryKind::swish, matmul(x, w)));
  };
  Tape tape;
  Tensor with = run(xg);
  Tensor without = run(xn);
  for (std::size_t i = 0; i < with.size(); ++i)
    CHECK(with.data()[i] == without.data()[i]);
}

TEST_CASE("bias/row helpers gradcheck") {
  std::mt19937_64 rng(23);
  Tensor x = random_tensor(rng, {3, 4});
  Tensor bias = random_tensor(rng, {1, 4});
  Tensor gain = random_tensor(rng, {1, 4});
  Tensor r = random_tensor(rng, {3, 1});
  Tensor w = random_tensor(rng, {3, 4}, -1, 1, false);
  auto loss = [&] {
    return sum(mul(row_scale(mul_bias_row(add_bias_row(x, bias), gain), r), w));
  };
  auto res = check_gradients(loss, {&x, &bias, &gain, &r});
  CHECK(res.pass);
}

TEST_CASE("transpose, scale, sub, add_scalar gradcheck") {
  std::mt19937_64 rng(29);
  Tensor x = random_tensor(rng, {2, 4});
  Tensor y = random_tensor(rng, {2, 4});
  auto loss = [&] {
    Tensor t = transpose(x);                     // 4x2
    Tensor z = matmul(t, scale(y, 0.5));         // 4x4
    return sum(mul(add_scalar(z, 1.0), sub(matmul(t, y), scale(matmul(t, y), 2.0))));
  };
  auto res = check_gradients(loss, {&x, &y});
  CHECK(res.pass);
}

TEST_CASE("embedding and row gather backward scatter-adds") {
  std::mt19937_64 rng(31);
  Tensor table = random_tensor(rng, {5, 3});
  std::vector<int> tokens = {1, 4, 1};
  Tensor w = random_tensor(rng, {3, 3}, -1, 1, false);
  auto res = check_gradients(
      [&] { return sum(mul(embedding_lookup(table, tokens), w)); }, {&table});
  CHECK(res.pass);
  {
    Tape tape;
    tape.backward(sum(embedding_lookup(table, tokens)));
    Tensor g = tape.grad(table);
    CHECK(g.at(1, 0) == 2.0);  // token 1 used twice
    CHECK(g.at(4, 0) == 1.0);
    CHECK(g.at(0, 0) == 0.0);
  }
  std::vector<int> rows = {0, 2};
  auto res2 =
      check_gradients([&] { return sum(gather_rows(table, rows)); }, {&table});
  CHECK(res2.pass);
}

TEST_CASE("rope gradcheck") {
  std::mt19937_64 rng(37);
  Tensor x = random_tensor(rng, {4, 6});
  Tensor w = random_tensor(rng, {4, 6}, -1, 1, false);
  auto res = check_gradients([&] { return sum(mul(rope(x), w)); }, {&x});
  CHECK(res.pass);
}

TEST_CASE("masked cross entropy gradcheck and value") {
  std::mt19937_64 rng(41);
  Tensor logits = random_tensor(rng, {3, 7});
  std::vector<int> targets = {2, 0, 6};
  std::vector<std::uint8_t> mask = {1, 0, 1};
  auto res = check_gradients(
      [&] { return masked_cross_entropy(logits, targets, mask); }, {&logits});
  CHECK(res.pass);
}

TEST_CASE("repeated backward on fresh tapes is bit-identical") {
  std::mt19937_64 rng(43);
  Tensor x = random_tensor(rng, {3, 3});
  Tensor w = random_tensor(rng, {3, 3}, -2, 2, false);
  std::vector<double> first;
  for (int rep = 0; rep < 2; ++rep) {
    Tape tape;
    tape.backward(sum(softmax_lastdim(matmul(x, w))));
    Tensor g = tape.grad(x);
    if (rep == 0)
      first = g.data();
    else
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(g.data()[i] == first[i]);
  }
}

TEST_SUITE_END();
