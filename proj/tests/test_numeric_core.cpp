#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ogfr/ops.hpp"
#include "test_util.hpp"

using namespace ogfr;
using ogfr::testing::make_param;
using ogfr::testing::max_grad_error;
using ogfr::testing::random_matrix;

namespace {

// Contracts a matrix output against fixed random weights so every entry is probed.
Var<double> probe(Tape<double>& tape, Var<double> out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, tape.constant(random_matrix(out.rows(), out.cols(), rng))));
}

}  // namespace

TEST_CASE("matmul hand cases") {
  Tape<double> tape(false);
  Var<double> x = tape.constant(Tensor<double>::matrix(2, 2, {1.5, -2, 0.25, 7}));
  const Tensor<double> product = matmul(tape.constant(Tensor<double>::identity(2)), x).value();
  CHECK(product == x.value());

  Var<double> a = tape.constant(Tensor<double>::matrix(2, 2, {1, 2, 3, 4}));
  Var<double> b = tape.constant(Tensor<double>::matrix(2, 1, {0, 1}));
  CHECK(matmul(a, b).value() == Tensor<double>::matrix(2, 1, {2, 4}));
}

TEST_CASE("matmul gradient matches central differences") {
  Rng rng(3);
  auto a = make_param("a", random_matrix(5, 4, rng));
  auto b = make_param("b", random_matrix(4, 3, rng));
  auto f = [&](Tape<double>& t) { return probe(t, matmul(t.param(a), t.param(b)), 11); };
  CHECK(max_grad_error(f, {&a, &b}) < 1e-6);
}

TEST_CASE("matmul rejects inner-dimension mismatch") {
  Tape<double> tape(false);
  CHECK_THROWS_AS(matmul(tape.constant(Tensor<double>::matrix(2, 3)), tape.constant(Tensor<double>::matrix(2, 3))),
                  DimensionError);
}

TEST_CASE("softmax symmetry, stability and gradient") {
  Tape<double> tape(false);
  Var<double> u = softmax_rows(tape.constant(Tensor<double>::matrix(1, 3, 0.0)));
  for (std::size_t i = 0; i < 3; ++i) CHECK(u.value()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Var<double> s = softmax_rows(tape.constant(Tensor<double>::matrix(1, 2, {1000, 0})));
  CHECK(s.value().all_finite());
  CHECK(s.value()[0] == doctest::Approx(1.0));
  CHECK(s.value()[1] < 1e-300);

  Rng rng(5);
  auto x = make_param("x", random_matrix(1, 7, rng));
  auto f = [&](Tape<double>& t) { return probe(t, softmax_rows(t.param(x)), 2); };
  CHECK(max_grad_error(f, {&x}) < 1e-6);
}

TEST_CASE("softmax rows are positive and sum to one") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Tape<double> tape(false);
    Var<double> s = softmax_rows(tape.constant(random_matrix(6, 9, rng, 10.0)));
    for (std::size_t r = 0; r < 6; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 9; ++c) {
        CHECK(s.value()(r, c) > 0.0);
        total += s.value()(r, c);
      }
      CHECK(std::abs(total - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("layer norm limits and gradient") {
  Tape<double> tape(false);
  Var<double> ones = tape.constant(Tensor<double>::matrix(1, 4, 1.0));
  Var<double> zeros = tape.constant(Tensor<double>::matrix(1, 4, 0.0));
  Var<double> constant_row = tape.constant(Tensor<double>::matrix(2, 4, 3.25));
  Var<double> y = layer_norm_rows(constant_row, ones, zeros);
  for (double v : y.value().data()) CHECK(v == 0.0);

  Rng rng(8);
  Var<double> x = tape.constant(random_matrix(3, 4, rng));
  Var<double> bias = tape.constant(Tensor<double>::matrix(1, 4, {0.5, -1, 2, 0}));
  Var<double> z = layer_norm_rows(x, zeros, bias);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(z.value()(r, c) == bias.value()[c]);

  auto px = make_param("x", random_matrix(3, 5, rng));
  auto g = make_param("g", random_matrix(1, 5, rng));
  auto b = make_param("b", random_matrix(1, 5, rng));
  auto f = [&](Tape<double>& t) { return probe(t, layer_norm_rows(t.param(px), t.param(g), t.param(b)), 4); };
  CHECK(max_grad_error(f, {&px, &g, &b}) < 1e-6);
}

TEST_CASE("grad_check on sum of squares") {
  Rng rng(1);
  auto x = make_param("x", random_matrix(4, 3, rng));
  auto f = [&](Tape<double>& t) { return sum(square(t.param(x))); };
  CHECK(max_grad_error(f, {&x}, 1e-5) < 1e-8);
}

TEST_CASE("reused operand accumulates its gradient") {
  Tape<double> tape;
  Var<double> x = tape.leaf(Tensor<double>::matrix(2, 2, {1, -3, 4, 0.5}));
  tape.backward(sum(add(x, x)));
  const Tensor<double> g = tape.grad(x);
  for (double v : g.data()) CHECK(v == 2.0);
}

TEST_CASE("detach blocks the gradient") {
  Tape<double> tape;
  Var<double> x = tape.leaf(Tensor<double>::matrix(1, 3, {1, 2, 3}));
  tape.backward(sum(mul(x, detach(x))));
  const Tensor<double> g = tape.grad(x);
  CHECK(g == Tensor<double>::matrix(1, 3, {1, 2, 3}));
}

TEST_CASE("finite checking raises NumericError") {
  Tape<double> tape(false);
  tape.set_check_finite(true);
  CHECK_THROWS_AS(log(tape.constant(Tensor<double>::matrix(1, 2, {1.0, 0.0}))), NumericError);
}

TEST_CASE("tensor shape contract") {
  CHECK_THROWS_AS(Tensor<double>({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor<double> t({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
}

TEST_CASE("every op matches central differences over 20 seeds") {
  double worst = 0;
  std::string worst_op;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    const std::size_t m = 2 + rng.below(3), n = 2 + rng.below(4), k = 2 + rng.below(3);
    auto a = make_param("a", random_matrix(m, n, rng));
    auto b = make_param("b", random_matrix(m, n, rng));
    auto c = make_param("c", random_matrix(n, k, rng));
    auto row = make_param("row", random_matrix(1, n, rng));
    Tensor<double> pos_init = random_matrix(m, n, rng);
    for (std::size_t i = 0; i < pos_init.numel(); ++i) pos_init[i] = 0.5 + std::abs(pos_init[i]);
    auto pos = make_param("pos", pos_init);
    Tensor<double> col_init = random_matrix(m, 1, rng);
    for (std::size_t i = 0; i < col_init.numel(); ++i) col_init[i] = 0.5 + std::abs(col_init[i]);
    auto col = make_param("col", col_init);
    std::vector<std::size_t> labels(m);
    for (auto& l : labels) l = rng.below(n);
    std::vector<std::uint8_t> keep(m);
    for (auto& v : keep) v = static_cast<std::uint8_t>(rng.below(2));

    using F = std::function<Var<double>(Tape<double>&)>;
    const std::vector<std::pair<const char*, F>> cases = {
        {"add", [&](Tape<double>& t) { return probe(t, add(t.param(a), t.param(b)), seed); }},
        {"sub", [&](Tape<double>& t) { return probe(t, sub(t.param(a), t.param(b)), seed); }},
        {"mul", [&](Tape<double>& t) { return probe(t, mul(t.param(a), t.param(b)), seed); }},
        {"div", [&](Tape<double>& t) { return probe(t, div(t.param(a), t.param(pos)), seed); }},
        {"matmul", [&](Tape<double>& t) { return probe(t, matmul(t.param(a), t.param(c)), seed); }},
        {"transpose", [&](Tape<double>& t) { return probe(t, transpose(t.param(a)), seed); }},
        {"add_row", [&](Tape<double>& t) { return probe(t, add_row(t.param(a), t.param(row)), seed); }},
        {"div_col", [&](Tape<double>& t) { return probe(t, div_col(t.param(a), t.param(col)), seed); }},
        {"scale", [&](Tape<double>& t) { return probe(t, scale(t.param(a), -1.75), seed); }},
        {"add_scalar", [&](Tape<double>& t) { return probe(t, add_scalar(t.param(a), 0.3), seed); }},
        {"neg", [&](Tape<double>& t) { return probe(t, neg(t.param(a)), seed); }},
        {"exp", [&](Tape<double>& t) { return probe(t, exp(t.param(a)), seed); }},
        {"log", [&](Tape<double>& t) { return probe(t, log(t.param(pos)), seed); }},
        {"sqrt", [&](Tape<double>& t) { return probe(t, sqrt(t.param(pos)), seed); }},
        {"square", [&](Tape<double>& t) { return probe(t, square(t.param(a)), seed); }},
        {"sigmoid", [&](Tape<double>& t) { return probe(t, sigmoid(t.param(a)), seed); }},
        {"gelu", [&](Tape<double>& t) { return probe(t, gelu(t.param(a)), seed); }},
        {"relu", [&](Tape<double>& t) { return probe(t, relu(t.param(pos)), seed); }},
        {"sum", [&](Tape<double>& t) { return scale(sum(square(t.param(a))), 0.5); }},
        {"mean", [&](Tape<double>& t) { return mean(square(t.param(a))); }},
        {"sum_rows", [&](Tape<double>& t) { return probe(t, sum_rows(square(t.param(a))), seed); }},
        {"softmax_rows", [&](Tape<double>& t) { return probe(t, softmax_rows(t.param(a)), seed); }},
        {"log_softmax_rows", [&](Tape<double>& t) { return probe(t, log_softmax_rows(t.param(a)), seed); }},
        {"layer_norm_rows",
         [&](Tape<double>& t) { return probe(t, layer_norm_rows(t.param(a), t.param(row), t.param(row)), seed); }},
        {"concat_rows", [&](Tape<double>& t) { return probe(t, concat_rows<double>({t.param(a), t.param(b)}), seed); }},
        {"concat_cols", [&](Tape<double>& t) { return probe(t, concat_cols<double>({t.param(a), t.param(b)}), seed); }},
        {"slice_rows", [&](Tape<double>& t) { return probe(t, slice_rows(t.param(a), 1, m - 1), seed); }},
        {"slice_cols", [&](Tape<double>& t) { return probe(t, slice_cols(t.param(a), 1, n - 1), seed); }},
        {"gather_rows", [&](Tape<double>& t) { return probe(t, gather_rows(t.param(a), {m - 1, 0, m - 1}), seed); }},
        {"select_rows", [&](Tape<double>& t) { return probe(t, select_rows(keep, t.param(a), t.param(b)), seed); }},
        {"pick", [&](Tape<double>& t) { return probe(t, pick(t.param(a), labels), seed); }},
        {"reshape", [&](Tape<double>& t) { return probe(t, reshape(t.param(a), {n, m}), seed); }},
        {"cross_entropy", [&](Tape<double>& t) { return cross_entropy(t.param(a), labels); }},
    };
    std::vector<Parameter<double>*> all = {&a, &b, &c, &row, &pos, &col};
    for (const auto& [name, f] : cases) {
      // Only parameters the case reaches are perturbed meaningfully; the rest give 0 == 0.
      const double err = max_grad_error(f, all);
      if (err > worst) worst = err, worst_op = name;
    }
  }
  INFO("worst op: " << worst_op);
  CHECK(worst < 1e-4);
}
