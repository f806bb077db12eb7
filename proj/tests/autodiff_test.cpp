#include "sapo/autodiff.hpp"

#include <gtest/gtest.h>

#include <bit>
#include <cmath>

#include "sapo/rng.hpp"
#include "test_util.hpp"

using sapo::ad::GradCheckReport;
using sapo::ad::Shape;
using sapo::ad::Tape;
using sapo::ad::Var;

namespace {

std::vector<double> random_vec(sapo::rng::Stream& st, std::size_t n, double lo = -2.0,
                               double hi = 2.0) {
  std::vector<double> v(n);
  for (double& x : v) x = st.next_in(lo, hi);
  return v;
}

}  // namespace

TEST(Autodiff, LogSoftmaxOfZerosIsSymmetric) {
  Tape t;
  Var x = t.leaf({2}, {0.0, 0.0});
  Var y = t.log_softmax(x);
  const double ln2 = std::log(2.0);
  EXPECT_NEAR(t.value(y)[0], -ln2, 1e-15);
  EXPECT_NEAR(t.value(y)[1], -ln2, 1e-15);
}

TEST(Autodiff, LogSigmoidAtZero) {
  Tape t;
  Var y = t.log_sigmoid(t.scalar(0.0));
  EXPECT_NEAR(t.scalar_value(y), -0.6931471805599453, 1e-15);
}

TEST(Autodiff, LogSigmoidExtremeNegativeDoesNotOverflow) {
  Tape t;
  Var y = t.log_sigmoid(t.scalar(-1000.0));
  EXPECT_TRUE(std::isfinite(t.scalar_value(y)));
  EXPECT_NEAR(t.scalar_value(y), -1000.0, 1e-9);
}

TEST(Autodiff, ProductRule) {
  Tape t;
  Var x = t.scalar(2.0);
  Var y = t.scalar(3.0);
  Var f = t.mul(x, y);
  t.backward(f);
  EXPECT_DOUBLE_EQ(t.grad(x)[0], 3.0);
  EXPECT_DOUBLE_EQ(t.grad(y)[0], 2.0);
}

TEST(Autodiff, LogSigmoidGradientAtZero) {
  Tape t;
  Var x = t.scalar(0.0);
  Var f = t.log_sigmoid(x);
  t.backward(f);
  EXPECT_DOUBLE_EQ(t.grad(x)[0], 0.5);
}

TEST(Autodiff, ShapeMismatchNamesBothShapes) {
  Tape t;
  Var a = t.leaf({2, 3}, std::vector<double>(6, 0.0));
  Var b = t.leaf({3, 2}, std::vector<double>(6, 0.0));
  try {
    t.add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const sapo::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[3,2]"), std::string::npos);
  }
}

TEST(Autodiff, NonScalarBackwardIsContractError) {
  Tape t;
  Var a = t.leaf({2}, {1.0, 2.0});
  EXPECT_THROW(t.backward(a), sapo::ContractError);
}

TEST(Autodiff, TapeConsumedAfterBackward) {
  Tape t;
  Var a = t.scalar(1.0);
  Var f = t.scale(a, 2.0);
  t.backward(f);
  EXPECT_THROW(t.scalar(0.0), sapo::ContractError);
  EXPECT_THROW(t.backward(f), sapo::ContractError);
  // values and grads remain readable
  EXPECT_DOUBLE_EQ(t.grad(a)[0], 2.0);
}

// Every primitive's adjoint against central finite differences on random
// shapes and values. The scalar head is sum(output * constant mask) so all
// output elements receive distinct upstream gradients.
TEST(Autodiff, PrimitiveAdjointsMatchFiniteDifferences) {
  sapo::rng::Stream st(0xad1f);
  const double step = 1e-6;
  int cases = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const int m = 1 + static_cast<int>(st.next_below(4));
    const int k = 1 + static_cast<int>(st.next_below(4));
    const int n = 1 + static_cast<int>(st.next_below(4));
    const int prim = rep % 10;

    // one input vector x, mapped into the primitive under test
    Shape xshape;
    std::size_t xn = 0;
    switch (prim) {
      case 0: case 1: case 2: case 5: case 9:
        xshape = {m, n}; xn = static_cast<std::size_t>(m) * n; break;
      case 3:  // matmul lhs
        xshape = {m, k}; xn = static_cast<std::size_t>(m) * k; break;
      case 4:  // add_rowvec vec
        xshape = {n}; xn = static_cast<std::size_t>(n); break;
      case 6:  // gather table
        xshape = {m + 2, n}; xn = static_cast<std::size_t>(m + 2) * n; break;
      case 7: case 8:
        xshape = {m, n}; xn = static_cast<std::size_t>(m) * n; break;
    }
    std::vector<double> x0 = random_vec(st, xn);
    if (prim == 8)  // log_odds needs strictly negative inputs
      for (double& v : x0) v = -0.05 - std::abs(v);

    // fixed co-inputs
    std::vector<double> other = random_vec(st, static_cast<std::size_t>(k) * n);
    std::vector<double> mat = random_vec(st, static_cast<std::size_t>(m) * n);
    std::vector<int> rows(static_cast<std::size_t>(m));
    for (int& r : rows) r = static_cast<int>(st.next_below(static_cast<std::uint64_t>(m + 2)));
    std::vector<double> mask = random_vec(st, 64);

    auto build = [&](Tape& t, Var x) -> Var {
      Var out;
      switch (prim) {
        case 0: out = t.tanh(x); break;
        case 1: out = t.log_softmax(x); break;
        case 2: out = t.mul(x, t.leaf({m, n}, mat)); break;
        case 3: out = t.matmul(x, t.leaf({k, n}, other)); break;
        case 4: out = t.add_rowvec(t.leaf({m, n}, mat), x); break;
        case 5: out = t.add(t.scale(x, 1.7), t.leaf({m, n}, mat)); break;
        case 6: out = t.gather_rows(x, rows); break;
        case 7: out = t.log_sigmoid(x); break;
        case 8: out = t.log_odds(x); break;
        case 9: out = t.sub(t.reshape(x, {n, m}), t.reshape(t.leaf({m, n}, mat), {n, m})); break;
      }
      const std::size_t on = sapo::ad::numel(t.shape(out));
      std::vector<double> w(mask.begin(), mask.begin() + on);
      Var weighted = t.mul(out, t.leaf(t.shape(out), w));
      return rep % 2 == 0 ? t.sum(weighted) : t.mean(weighted);
    };

    Tape t;
    Var x = t.leaf(xshape, x0);
    Var loss = build(t, x);
    t.backward(loss);
    const std::vector<double> analytic = t.grad(x);

    auto f = [&](const std::vector<double>& xv) {
      Tape tt;
      Var xx = tt.leaf(xshape, xv);
      return tt.scalar_value(build(tt, xx));
    };
    const std::vector<double> fd = testutil::finite_diff(f, x0, step);
    EXPECT_LT(testutil::max_rel_err(analytic, fd), 1e-6)
        << "primitive case " << prim << " rep " << rep;
    ++cases;
  }
  EXPECT_EQ(cases, 100);
}

TEST(Autodiff, TwoLayerNetworkMatchesFiniteDifferences) {
  sapo::rng::Stream st(0x2a7e);
  const int in = 5, hid = 4, out = 3;
  auto w1 = random_vec(st, in * hid, -0.5, 0.5);
  auto b1 = random_vec(st, hid, -0.5, 0.5);
  auto w2 = random_vec(st, hid * out, -0.5, 0.5);
  auto b2 = random_vec(st, out, -0.5, 0.5);
  auto input = random_vec(st, in, -1.0, 1.0);

  auto f = [&](Tape& t, const std::vector<Var>& p) {
    Var x = t.leaf({1, in}, input);
    Var h = t.tanh(t.add_rowvec(t.matmul(x, p[0]), p[1]));
    Var logits = t.add_rowvec(t.matmul(h, p[2]), p[3]);
    return t.sum(t.log_softmax(logits));
  };
  GradCheckReport rep = sapo::ad::grad_check(
      f,
      {{{in, hid}, w1}, {{hid}, b1}, {{hid, out}, w2}, {{out}, b2}},
      1e-6, 1e-5);
  EXPECT_TRUE(rep.pass) << "max rel err " << rep.max_rel_err;
}

TEST(Autodiff, GradCheckQuadratic) {
  auto f = [](Tape& t, const std::vector<Var>& p) { return t.sum(t.mul(p[0], p[0])); };
  GradCheckReport rep =
      sapo::ad::grad_check(f, {{{2}, {1.0, -2.0}}}, 1e-6, 1e-9);
  EXPECT_TRUE(rep.pass) << rep.max_rel_err;

  // analytic gradient is [2, -4]
  Tape t;
  Var x = t.leaf({2}, {1.0, -2.0});
  Var loss = t.sum(t.mul(x, x));
  t.backward(loss);
  EXPECT_NEAR(t.grad(x)[0], 2.0, 1e-12);
  EXPECT_NEAR(t.grad(x)[1], -4.0, 1e-12);
}

TEST(Autodiff, GradCheckRejectsBadArguments) {
  auto f = [](Tape& t, const std::vector<Var>& p) { return t.sum(p[0]); };
  EXPECT_THROW(sapo::ad::grad_check(f, {{{1}, {0.0}}}, 0.0, 1e-6), sapo::ContractError);
  EXPECT_THROW(sapo::ad::grad_check(f, {{{1}, {0.0}}}, 1e-6, 0.0), sapo::ContractError);
}

TEST(Autodiff, GradCheckFlagsNonFiniteProbe) {
  auto f = [](Tape& t, const std::vector<Var>& p) {
    return t.sum(t.mul(t.scale(p[0], 1e308), p[0]));  // overflows to inf
  };
  EXPECT_THROW(sapo::ad::grad_check(f, {{{1}, {2.0}}}, 1e-3, 1e-6), sapo::NumericError);
}

TEST(Autodiff, BackwardLinearity) {
  sapo::rng::Stream st(0x11e4);
  auto x0 = random_vec(st, 6);
  auto build_a = [&](Tape& t, Var x) { return t.sum(t.tanh(x)); };
  auto build_b = [&](Tape& t, Var x) { return t.mean(t.mul(x, x)); };

  Tape t1;
  Var xa = t1.leaf({6}, x0);
  t1.backward(build_a(t1, xa));
  Tape t2;
  Var xb = t2.leaf({6}, x0);
  t2.backward(build_b(t2, xb));

  Tape t3;
  Var xc = t3.leaf({6}, x0);
  t3.backward(t3.add(build_a(t3, xc), build_b(t3, xc)));

  for (int i = 0; i < 6; ++i) {
    const double sum_sep = t1.grad(xa)[i] + t2.grad(xb)[i];
    EXPECT_NEAR(t3.grad(xc)[i], sum_sep, 1e-12 * std::max(1.0, std::abs(sum_sep)));
  }
}

TEST(Autodiff, ForwardIsDeterministic) {
  auto run = [] {
    sapo::rng::Stream st(77);
    Tape t;
    Var a = t.leaf({3, 3}, random_vec(st, 9));
    Var b = t.leaf({3, 3}, random_vec(st, 9));
    Var f = t.sum(t.log_softmax(t.matmul(t.tanh(a), b)));
    return t.scalar_value(f);
  };
  const double v1 = run();
  const double v2 = run();
  EXPECT_EQ(std::bit_cast<std::uint64_t>(v1), std::bit_cast<std::uint64_t>(v2));
}

TEST(Autodiff, LogOddsDomainGuard) {
  Tape t;
  EXPECT_THROW(t.log_odds(t.scalar(0.0)), sapo::DomainError);
  EXPECT_THROW(t.log_odds(t.scalar(0.5)), sapo::DomainError);
}

TEST(Autodiff, GatherRowsOutOfRange) {
  Tape t;
  Var table = t.leaf({2, 2}, {1.0, 2.0, 3.0, 4.0});
  EXPECT_THROW(t.gather_rows(table, {0, 2}), sapo::ContractError);
}
