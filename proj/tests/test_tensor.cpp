#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "sessrec/adam.hpp"
#include "sessrec/rng.hpp"
#include "sessrec/tensor.hpp"
#include "support/oracles.hpp"

using sessrec::ContractError;
using sessrec::NumericError;
using sessrec::Rng;
using sessrec::ShapeError;
using sessrec::Tape;
using sessrec::Tensor;

using D = double;
using TD = Tensor<double>;

namespace {

TD random_tensor(sessrec::Shape shape, Rng& rng, bool rg = true) {
  return TD::uniform(std::move(shape), rng, -1.0, 1.0, rg);
}

// Analytic gradient of sum(expr(x)) via one backward pass.
template <typename Expr>
std::vector<double> analytic_grad_of_sum(TD x, Expr expr) {
  Tape<D> tape;
  auto loss = tape.sum_all(expr(tape));
  tape.backward(loss);
  return x.grad();
}

}  // namespace

TEST_CASE("matmul identity and hand products") {
  Tape<D> tape;
  auto eye = TD::from({2, 2}, {1, 0, 0, 1});
  auto m = TD::from({2, 2}, {3, -2, 7, 5});
  auto prod = tape.matmul(eye, m);
  REQUIRE(prod.value() == m.value());

  auto a = TD::from({1, 2}, {1, 2});
  auto b = TD::from({2, 1}, {3, 4});
  auto c = tape.matmul(a, b);
  REQUIRE(c.numel() == 1);
  REQUIRE(c.item() == Catch::Approx(11.0));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  Tape<D> tape;
  auto a = TD::zeros({2, 3});
  auto b = TD::zeros({2, 3});
  REQUIRE_THROWS_MATCHES(tape.matmul(a, b), ShapeError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("[2 x 3]")));
}

TEST_CASE("matmul gradient: sum(a*b) w.r.t. a equals ones*b^T, and matches FD") {
  Rng rng(11);
  auto a = random_tensor({5, 4}, rng);
  auto b = random_tensor({4, 3}, rng, false);

  auto ga = analytic_grad_of_sum(a, [&](Tape<D>& t) { return t.matmul(a, b); });

  // ones(5x3) * b^T, written out directly
  for (int i = 0; i < 5; ++i)
    for (int p = 0; p < 4; ++p) {
      double expect = 0;
      for (int j = 0; j < 3; ++j) expect += b.val(p, j);
      REQUIRE(ga[i * 4 + p] == Catch::Approx(expect).epsilon(1e-12));
    }

  auto fd = oracle::fd_gradient(a, [&]() {
    Tape<D> t;
    t.set_recording(false);
    return t.sum_all(t.matmul(a, b)).item();
  });
  REQUIRE(oracle::max_scaled_err(ga, fd) < 1e-3);
}

TEST_CASE("elementwise basics") {
  Tape<D> tape;
  REQUIRE(tape.sigmoid(TD::scalar(0.0)).item() == Catch::Approx(0.5));

  auto mx = tape.max_reduce_rows(TD::from({2, 2}, {1, 5, 3, 2}));
  REQUIRE(mx.value() == std::vector<double>{3, 5});

  auto sum = tape.add(TD::from({2, 2}, {1, 2, 3, 4}), TD::vec({10, 20}));
  REQUIRE(sum.value() == std::vector<double>{11, 22, 13, 24});

  REQUIRE_THROWS_AS(tape.add(TD::zeros({2, 3}), TD::zeros({3, 2})), ShapeError);
  REQUIRE_THROWS_AS(tape.mul(TD::zeros({2, 3}), TD::zeros({4})), ShapeError);
}

TEST_CASE("tanh gradient matches finite differences") {
  Rng rng(7);
  for (int seed = 0; seed < 3; ++seed) {
    auto x = random_tensor({3, 4}, rng);
    auto ga = analytic_grad_of_sum(x, [&](Tape<D>& t) { return t.tanh(x); });
    auto fd = oracle::fd_gradient(x, [&]() {
      Tape<D> t;
      t.set_recording(false);
      return t.sum_all(t.tanh(x)).item();
    });
    REQUIRE(oracle::max_scaled_err(ga, fd) < 1e-3);
  }
}

TEST_CASE("softmax rows: symmetry, stabilization, row sums") {
  Tape<D> tape;
  auto u = tape.softmax_rows(TD::vec({0, 0, 0}));
  for (int j = 0; j < 3; ++j) REQUIRE(u.val(j) == Catch::Approx(1.0 / 3));

  auto big = tape.softmax_rows(TD::vec({1000, 1000}));
  REQUIRE(big.val(0) == Catch::Approx(0.5));
  REQUIRE(big.val(1) == Catch::Approx(0.5));

  Rng rng(3);
  auto x = TD::uniform({4, 6}, rng, -1e3, 1e3);
  auto y = tape.softmax_rows(x);
  for (int i = 0; i < 4; ++i) {
    double s = 0;
    for (int j = 0; j < 6; ++j) s += y.val(i, j);
    REQUIRE(std::abs(s - 1.0) < 1e-6);
  }

  auto bad = TD::vec({1.0, std::numeric_limits<double>::quiet_NaN()});
  REQUIRE_THROWS_AS(tape.softmax_rows(bad), NumericError);
}

TEST_CASE("softmax Jacobian matches finite differences") {
  Rng rng(5);
  auto x = random_tensor({4, 6}, rng);
  // weight the outputs so the pullback exercises off-diagonal Jacobian terms
  auto w = TD::uniform({4, 6}, rng, 0.1, 2.0);
  auto ga = analytic_grad_of_sum(x, [&](Tape<D>& t) { return t.mul(t.softmax_rows(x), w); });
  auto fd = oracle::fd_gradient(x, [&]() {
    Tape<D> t;
    t.set_recording(false);
    return t.sum_all(t.mul(t.softmax_rows(x), w)).item();
  });
  REQUIRE(oracle::max_scaled_err(ga, fd) < 1e-3);
}

TEST_CASE("backward populates leaf gradients and clears the tape") {
  Tape<D> tape;
  auto w = TD::vec({4, -1, 2});
  w.set_requires_grad(true);
  auto loss = tape.sum_all(w);
  tape.backward(loss);
  REQUIRE(w.grad() == std::vector<double>{1, 1, 1});
  REQUIRE(tape.size() == 0);
  REQUIRE_THROWS_AS(tape.backward(loss), ContractError);  // tape now empty
}

TEST_CASE("backward of sum(w*w)") {
  Tape<D> tape;
  auto w = TD::vec({1, 2});
  w.set_requires_grad(true);
  auto loss = tape.sum_all(tape.mul(w, w));
  tape.backward(loss);
  REQUIRE(w.grad() == std::vector<double>{2, 4});
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape<D> tape;
  auto w = TD::vec({1, 2});
  w.set_requires_grad(true);
  auto y = tape.mul(w, w);
  REQUIRE_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("backward is deterministic") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    auto a = random_tensor({6, 5}, rng);
    auto b = random_tensor({5, 4}, rng);
    Tape<D> tape;
    auto y = tape.softmax_rows(tape.matmul(tape.tanh(a), tape.sigmoid(b)));
    tape.backward(tape.sum_all(tape.mul(y, y)));
    auto g = a.grad();
    auto g2 = b.grad();
    g.insert(g.end(), g2.begin(), g2.end());
    return g;
  };
  REQUIRE(run(99) == run(99));  // bitwise
}

TEST_CASE("every primitive passes a finite-difference check on 5 seeds") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto x = random_tensor({4, 3}, rng);
    auto y = random_tensor({4, 3}, rng);
    auto row = random_tensor({3}, rng);
    auto b23 = random_tensor({3, 5}, rng);
    auto w = TD::uniform({4, 3}, rng, 0.2, 1.5, true);  // positive, for log/rsqrt

    struct Case {
      const char* name;
      std::function<Tensor<D>(Tape<D>&)> expr;
      Tensor<D> wrt;
    };
    std::vector<Case> cases = {
        {"matmul_nn", [&](Tape<D>& t) { return t.matmul(x, b23); }, x},
        {"matmul_nt", [&](Tape<D>& t) { return t.matmul(x, y, false, true); }, y},
        {"matmul_tn", [&](Tape<D>& t) { return t.matmul(x, y, true, false); }, x},
        {"matmul_tt", [&](Tape<D>& t) { return t.matmul(b23, x, true, true); }, b23},
        {"add", [&](Tape<D>& t) { return t.add(x, y); }, x},
        {"sub", [&](Tape<D>& t) { return t.sub(x, y); }, y},
        {"mul", [&](Tape<D>& t) { return t.mul(x, y); }, x},
        {"add_rowbcast", [&](Tape<D>& t) { return t.add(x, row); }, row},
        {"mul_rowbcast", [&](Tape<D>& t) { return t.mul(x, row); }, row},
        {"sub_rowbcast_a", [&](Tape<D>& t) { return t.sub(row, x); }, row},
        {"sigmoid", [&](Tape<D>& t) { return t.sigmoid(x); }, x},
        {"tanh", [&](Tape<D>& t) { return t.tanh(x); }, x},
        {"relu", [&](Tape<D>& t) { return t.relu(x); }, x},
        {"log", [&](Tape<D>& t) { return t.log_clamped(w); }, w},
        {"rsqrt", [&](Tape<D>& t) { return t.rsqrt(w); }, w},
        {"scalar_mul", [&](Tape<D>& t) { return t.scalar_mul(x, 2.5); }, x},
        {"scalar_add", [&](Tape<D>& t) { return t.scalar_add(x, -1.25); }, x},
        {"softmax", [&](Tape<D>& t) { return t.mul(t.softmax_rows(x), w); }, x},
        {"max_reduce", [&](Tape<D>& t) { return t.max_reduce_rows(x); }, x},
        {"sum_rows", [&](Tape<D>& t) { return t.sum_rows(x); }, x},
        {"mean_rows", [&](Tape<D>& t) { return t.mean_rows(x); }, x},
        {"gather", [&](Tape<D>& t) { return t.gather_rows(x, {2, 0, 2, 1}); }, x},
        {"repeat", [&](Tape<D>& t) { return t.repeat_rows(row, 4); }, row},
        {"concat_cols", [&](Tape<D>& t) { return t.concat_cols(x, y); }, y},
        {"concat_rows", [&](Tape<D>& t) { return t.concat_rows({x, y}); }, x},
    };

    for (auto& c : cases) {
      CAPTURE(c.name, seed);
      c.wrt.clear_grad();
      Tape<D> tape;
      auto loss = tape.sum_all(c.expr(tape));
      tape.backward(loss);
      auto analytic = c.wrt.grad();
      auto fd = oracle::fd_gradient(c.wrt, [&]() {
        Tape<D> t;
        t.set_recording(false);
        return t.sum_all(c.expr(t)).item();
      });
      REQUIRE(oracle::max_scaled_err(analytic, fd) < 1e-3);
      c.wrt.clear_grad();
      x.clear_grad();
      y.clear_grad();
      row.clear_grad();
      b23.clear_grad();
      w.clear_grad();
    }
  }
}

TEST_CASE("max_reduce_rows ties route gradient to the first maximal row") {
  Tape<D> tape;
  auto x = TD::from({3, 2}, {7, 1, 7, 5, 3, 5});
  x.set_requires_grad(true);
  tape.backward(tape.sum_all(tape.max_reduce_rows(x)));
  // column 0: rows 0 and 1 tie at 7 -> row 0; column 1: rows 1 and 2 tie at 5 -> row 1
  REQUIRE(x.grad() == std::vector<double>{1, 0, 0, 1, 0, 0});
}

TEST_CASE("adam first step moves by about lr, zero grad leaves params fixed") {
  auto w = TD::scalar(1.0);
  w.set_requires_grad(true);
  sessrec::Adam<D> opt({w}, 0.001);

  w.zero_grad();
  w.impl()->grad[0] = 1.0;
  opt.step();
  REQUIRE(w.item() == Catch::Approx(1.0 - 0.001).epsilon(1e-6));
  REQUIRE(opt.step_count() == 1);
  REQUIRE(w.grad() == std::vector<double>{0});  // zeroed by step

  auto w2 = TD::scalar(3.5);
  w2.set_requires_grad(true);
  sessrec::Adam<D> opt2({w2}, 0.1);
  w2.zero_grad();
  opt2.step();
  REQUIRE(w2.item() == 3.5);
}

TEST_CASE("adam requires populated gradients") {
  auto w = TD::scalar(1.0);
  w.set_requires_grad(true);
  sessrec::Adam<D> opt({w}, 0.001);
  REQUIRE_THROWS_AS(opt.step(), ContractError);
}

TEST_CASE("adam matches an independent scalar trajectory and converges on (w-3)^2") {
  auto w = TD::scalar(0.0);
  w.set_requires_grad(true);
  sessrec::Adam<D> opt({w}, 0.1);

  // independent scalar Adam, transcribed directly from the update rule
  double sw = 0.0, m = 0.0, v = 0.0;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.1;

  for (int t = 1; t <= 100; ++t) {
    Tape<D> tape;
    auto diff = tape.scalar_add(w, -3.0);
    auto loss = tape.sum_all(tape.mul(diff, diff));
    tape.backward(loss);
    opt.step();

    const double g = 2.0 * (sw - 3.0);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    sw -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    REQUIRE(w.item() == Catch::Approx(sw).margin(1e-12));
  }
  REQUIRE(std::abs(w.item() - 3.0) < 0.5);
}

TEST_CASE("float32 engine runs the same ops") {
  using TF = Tensor<float>;
  Tape<float> tape;
  sessrec::Rng rng(2);
  auto a = TF::uniform({3, 3}, rng, -1.f, 1.f, true);
  auto y = tape.softmax_rows(tape.matmul(a, a, false, true));
  tape.backward(tape.sum_all(tape.mul(y, y)));
  REQUIRE(a.has_grad());
}
