#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "mtpb/layers.hpp"
#include "mtpb/optim.hpp"
#include "mtpb/params.hpp"
#include "mtpb/tape.hpp"
#include "test_util.hpp"

using namespace mtpb;
using namespace mtpb::nn;
using mtpb::testing::grad_error;
using mtpb::testing::random_mat;

namespace {

constexpr double kTol = 1e-4;

// Loss = <unary(x), R> for a fixed random projection R, so every output
// entry carries a distinct gradient.
double unary_error(const std::function<Var(Var)>& op, Mat x, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  ParameterStore store;
  store.add("x", std::move(x));
  Mat probe;
  auto fn = [&](Tape& t, ParameterStore& s) {
    Var y = op(t.param(s, "x"));
    if (probe.size() == 0) probe = random_mat(y.rows(), y.cols(), rng);
    return sum(hadamard(y, t.constant(probe)));
  };
  return grad_error(fn, store);
}

double binary_error(const std::function<Var(Var, Var)>& op, Mat a, Mat b, std::uint64_t seed = 2) {
  std::mt19937_64 rng(seed);
  ParameterStore store;
  store.add("a", std::move(a));
  store.add("b", std::move(b));
  Mat probe;
  auto fn = [&](Tape& t, ParameterStore& s) {
    Var y = op(t.param(s, "a"), t.param(s, "b"));
    if (probe.size() == 0) probe = random_mat(y.rows(), y.cols(), rng);
    return sum(hadamard(y, t.constant(probe)));
  };
  return grad_error(fn, store);
}

Mat away_from_zero(Mat m) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (std::abs(m.data()[i]) < 0.05) m.data()[i] = 0.3;
  return m;
}

}  // namespace

TEST_CASE("linear matches hand values and identity") {
  Tape t;
  Mat x(1, 2);
  x << 1, 2;
  Mat w(2, 2);
  w << 1, 1, 0, 1;
  Mat b(1, 2);
  b << 1, 0;
  Mat y = linear(t.constant(x), t.constant(w), t.constant(b)).value();
  CHECK(y(0, 0) == 4.0);
  CHECK(y(0, 1) == 2.0);
  Mat id = linear(t.constant(x), t.constant(Mat::Identity(2, 2)), t.constant(Mat::Zero(1, 2))).value();
  CHECK(id == x);
  CHECK_THROWS_AS(linear(t.constant(Mat::Zero(1, 3)), t.constant(w), t.constant(b)), std::invalid_argument);
}

TEST_CASE("linear weight gradient matches central differences") {
  std::mt19937_64 rng(3);
  const Mat x = random_mat(3, 4, rng);
  ParameterStore store;
  store.add("w", random_mat(5, 4, rng));
  store.add("b", random_mat(1, 5, rng));
  const Mat probe = random_mat(3, 5, rng);
  auto fn = [&](Tape& t, ParameterStore& s) {
    return sum(hadamard(linear(t.constant(x), t.param(s, "w"), t.param(s, "b")), t.constant(probe)));
  };
  CHECK(grad_error(fn, store) < kTol);
}

TEST_CASE("elementwise and structural ops pass gradient checks") {
  std::mt19937_64 rng(5);
  const Mat a = random_mat(4, 3, rng), b = random_mat(4, 3, rng);
  CHECK(binary_error([](Var p, Var q) { return add(p, q); }, a, b) < kTol);
  CHECK(binary_error([](Var p, Var q) { return sub(p, q); }, a, b) < kTol);
  CHECK(binary_error([](Var p, Var q) { return hadamard(p, q); }, a, b) < kTol);
  CHECK(binary_error([](Var p, Var q) { return matmul(p, q); }, a, random_mat(3, 5, rng)) < kTol);
  CHECK(binary_error([](Var p, Var q) { return matmul_nt(p, q); }, a, random_mat(6, 3, rng)) < kTol);
  CHECK(binary_error([](Var p, Var q) { return add_row(p, q); }, a, random_mat(1, 3, rng)) < kTol);
  CHECK(binary_error([](Var p, Var q) { return mul_row(p, q); }, a, random_mat(1, 3, rng)) < kTol);
  CHECK(binary_error([](Var p, Var q) { return concat_cols({p, q}); }, a, b) < kTol);
  CHECK(binary_error([](Var p, Var q) { return concat_rows({p, q, p}); }, a, b) < kTol);
  CHECK(unary_error([](Var p) { return transpose(p); }, a) < kTol);
  CHECK(unary_error([](Var p) { return scale(p, -2.5); }, a) < kTol);
  CHECK(unary_error([](Var p) { return add_scalar(p, 1.5); }, a) < kTol);
  CHECK(unary_error([](Var p) { return relu(p); }, away_from_zero(a)) < kTol);
  CHECK(unary_error([](Var p) { return tanh(p); }, a) < kTol);
  CHECK(unary_error([](Var p) { return sigmoid(p); }, a) < kTol);
  CHECK(unary_error([](Var p) { return softmax_rows(p); }, a) < kTol);
  CHECK(unary_error([](Var p) { return reshape(p, 2, 6); }, a) < kTol);
  CHECK(unary_error([](Var p) { return slice_rows(p, 1, 2); }, a) < kTol);
  CHECK(unary_error([](Var p) { return slice_cols(p, 1, 2); }, a) < kTol);
  CHECK(unary_error([](Var p) { return gather_rows(p, {3, 0, 3, 1}); }, a) < kTol);
  CHECK(unary_error([](Var p) { return shift_in_blocks(p, 2, 2, 1); }, a) < kTol);
  CHECK(unary_error([](Var p) { return block_mean(p, 2, 2); }, a) < kTol);
  CHECK(unary_error([](Var p) { return row_normalize(p); }, a.cwiseAbs().array() + 0.5) < kTol);
  CHECK(unary_error([](Var p) { return sum(p); }, a) < kTol);
  CHECK(unary_error([](Var p) { return mean(p); }, a) < kTol);
  CHECK(unary_error([](Var p) { return sum_squares(p); }, a) < kTol);
}

TEST_CASE("layer_norm gradient and statistics") {
  std::mt19937_64 rng(7);
  ParameterStore store;
  store.add("x", random_mat(5, 6, rng, 3.0));
  store.add("g", random_mat(1, 6, rng));
  store.add("b", random_mat(1, 6, rng));
  const Mat probe = random_mat(5, 6, rng);
  auto fn = [&](Tape& t, ParameterStore& s) {
    return sum(hadamard(layer_norm(t.param(s, "x"), t.param(s, "g"), t.param(s, "b")), t.constant(probe)));
  };
  CHECK(grad_error(fn, store) < kTol);

  Tape t;
  Mat y = layer_norm(t.constant(store.value("x")), t.constant(Mat::Ones(1, 6)), t.constant(Mat::Zero(1, 6)))
              .value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double m = y.row(r).mean();
    const double var = (y.row(r).array() - m).square().mean();
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("softmax rows are stochastic and shift invariant") {
  std::mt19937_64 rng(8);
  const Mat a = random_mat(6, 9, rng, 4.0);
  Tape t;
  Mat s = softmax_rows(t.constant(a)).value();
  Mat shifted = a;
  for (Eigen::Index r = 0; r < a.rows(); ++r) shifted.row(r).array() += 10.0 * (r + 1);
  Mat s2 = softmax_rows(t.constant(shifted)).value();
  for (Eigen::Index r = 0; r < s.rows(); ++r) CHECK(std::abs(s.row(r).sum() - 1.0) < 1e-6);
  CHECK((s - s2).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("mse examples, masking, and empty inclusion set") {
  Tape t;
  Mat p(1, 1), y(1, 1);
  p << 3;
  y << 1;
  CHECK(mse(t.constant(p), y).scalar() == 4.0);
  CHECK(mse(t.constant(y), y).scalar() == 0.0);

  std::mt19937_64 rng(9);
  const Mat a = random_mat(5, 4, rng), b = random_mat(5, 4, rng);
  Mat m = Mat::Zero(5, 4);
  double acc = 0.0;
  int n = 0;
  std::bernoulli_distribution coin(0.4);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (coin(rng)) {
      m.data()[i] = 1.0;
      const double e = a.data()[i] - b.data()[i];
      acc += e * e;
      ++n;
    }
  REQUIRE(n > 0);
  CHECK(mse(t.constant(a), b, m).scalar() == doctest::Approx(acc / n).epsilon(1e-14));

  Tape rec;
  Var leaf = rec.leaf(a);
  Var zero = mse(leaf, b, Mat::Zero(5, 4));
  CHECK(zero.scalar() == 0.0);
  rec.backward(zero);
  CHECK((leaf.grad().size() == 0 || leaf.grad().cwiseAbs().maxCoeff() == 0.0));

  ParameterStore store;
  store.add("p", a);
  auto fn = [&](Tape& tt, ParameterStore& s) { return mse(tt.param(s, "p"), b, m); };
  CHECK(grad_error(fn, store) < kTol);
}

TEST_CASE("solve_spd gradient") {
  std::mt19937_64 rng(10);
  const Mat r = random_mat(4, 4, rng);
  ParameterStore store;
  store.add("m", r * r.transpose() + 4.0 * Mat::Identity(4, 4));
  store.add("b", random_mat(4, 3, rng));
  const Mat probe = random_mat(4, 3, rng);
  auto fn = [&](Tape& t, ParameterStore& s) {
    Var m = t.param(s, "m");
    // Symmetrise so perturbing one entry keeps the system SPD and symmetric.
    Var sym = scale(add(m, transpose(m)), 0.5);
    return sum(hadamard(solve_spd(sym, t.param(s, "b")), t.constant(probe)));
  };
  CHECK(grad_error(fn, store) < kTol);
  Tape t;
  CHECK_THROWS_AS(solve_spd(t.constant(-Mat::Identity(2, 2)), t.constant(Mat::Ones(2, 1))), std::runtime_error);
}

TEST_CASE("transformer block: gradients, single token, equivariance, stochastic attention") {
  std::mt19937_64 rng(11);
  ParameterStore store;
  init_transformer_block(store, "blk", 8, 16, rng);
  store.add("x", random_mat(6, 8, rng));
  const Mat probe = random_mat(6, 8, rng);
  auto fn = [&](Tape& t, ParameterStore& s) {
    return sum(hadamard(transformer_block(t, s, "blk", t.param(s, "x"), 2, 2), t.constant(probe)));
  };
  CHECK(grad_error(fn, store) < kTol);

  {
    Tape t;
    std::vector<Mat> w;
    transformer_block(t, store, "blk", t.constant(random_mat(1, 8, rng)), 1, 2, &w);
    REQUIRE(w.size() == 2);
    for (const auto& m : w) {
      CHECK(m.rows() == 1);
      CHECK(m(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    }
  }
  {
    const Mat x = random_mat(8, 8, rng);
    std::vector<int> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tape t;
    std::vector<Mat> w;
    Mat y = transformer_block(t, store, "blk", t.constant(x), 1, 2, &w).value();
    Mat yp = transformer_block(t, store, "blk", gather_rows(t.constant(x), perm), 1, 2).value();
    for (int i = 0; i < 8; ++i) CHECK((yp.row(i) - y.row(perm[i])).cwiseAbs().maxCoeff() < 1e-12);
    for (const auto& m : w)
      for (Eigen::Index r = 0; r < m.rows(); ++r) CHECK(std::abs(m.row(r).sum() - 1.0) < 1e-6);
  }
  Tape t;
  CHECK_THROWS(transformer_block(t, store, "blk", t.constant(Mat(0, 8)), 1, 2));
}

TEST_CASE("graph_conv: self-loop case, hand oracle, equivariance, gradients") {
  std::mt19937_64 rng(12);
  Tape t;
  const Mat h = random_mat(4, 3, rng).cwiseAbs();
  Mat out = graph_conv(t.constant(h), t.constant(Mat::Zero(4, 4)), t.constant(Mat::Identity(3, 3))).value();
  CHECK((out - 2.0 * h).cwiseAbs().maxCoeff() < 1e-15);

  Mat a(2, 2);
  a << 0, 1, 1, 0;
  const Mat h2 = random_mat(2, 3, rng), w = random_mat(3, 3, rng);
  // Ã = D^{-1}(A+I) = 0.5 everywhere for the 2-node path.
  Mat expect = h2;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) {
      double pre = 0.0;
      for (int k = 0; k < 3; ++k) pre += 0.5 * (h2(0, k) + h2(1, k)) * w(k, j);
      expect(i, j) += std::max(0.0, pre);
    }
  Mat got = graph_conv(t.constant(h2), t.constant(a), t.constant(w)).value();
  CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-8);

  const int n = 5;
  const Mat adj = mtpb::testing::random_adjacency(n, rng), hh = random_mat(n, 3, rng);
  std::vector<int> perm = {3, 0, 4, 1, 2};
  Mat pa(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) pa(i, j) = adj(perm[i], perm[j]);
  Mat y = graph_conv(t.constant(hh), t.constant(adj), t.constant(w)).value();
  Mat yp = graph_conv(gather_rows(t.constant(hh), perm), t.constant(pa), t.constant(w)).value();
  for (int i = 0; i < n; ++i) CHECK((yp.row(i) - y.row(perm[i])).cwiseAbs().maxCoeff() < 1e-12);

  ParameterStore store;
  store.add("h", random_mat(n, 3, rng));
  store.add("a", adj);
  store.add("w", random_mat(3, 3, rng));
  const Mat probe = random_mat(n, 3, rng);
  auto fn = [&](Tape& tt, ParameterStore& s) {
    return sum(hadamard(graph_conv(tt.param(s, "h"), tt.param(s, "a"), tt.param(s, "w")), tt.constant(probe)));
  };
  CHECK(grad_error(fn, store) < kTol);

  ParameterStore slots;
  slots.add("h", random_mat(3 * 4, 3, rng));
  slots.add("w", random_mat(3, 3, rng));
  const Mat adj3 = mtpb::testing::random_adjacency(3, rng);
  const Mat probe2 = random_mat(12, 3, rng);
  auto fn2 = [&](Tape& tt, ParameterStore& s) {
    return sum(hadamard(graph_conv_slots(tt.param(s, "h"), tt.constant(adj3), tt.param(s, "w"), 3, 4),
                        tt.constant(probe2)));
  };
  CHECK(grad_error(fn2, slots) < kTol);
}

TEST_CASE("adam: identity, scalar recurrence, determinism, NaN naming") {
  ParameterStore s;
  s.add("p", Mat::Constant(2, 2, 0.7));
  s.at("p").grad = Mat::Zero(2, 2);
  adam_step(s, AdamConfig{1e-3, 0.0});
  CHECK(s.value("p") == Mat::Constant(2, 2, 0.7));
  CHECK(s.step() == 1);

  const double g = 0.37, lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ParameterStore q;
  q.add("w", Mat::Constant(1, 1, 2.0));
  q.at("w").grad = Mat::Constant(1, 1, g);
  adam_step(q, AdamConfig{lr, 0.0, b1, b2, eps});
  const double m = (1 - b1) * g, v = (1 - b2) * g * g;
  const double mhat = m / (1 - b1), vhat = v / (1 - b2);
  CHECK(q.value("w")(0, 0) == doctest::Approx(2.0 - lr * mhat / (std::sqrt(vhat) + eps)).epsilon(1e-14));
  CHECK(std::abs(2.0 - q.value("w")(0, 0)) == doctest::Approx(lr).epsilon(1e-4));

  std::mt19937_64 rng(13);
  ParameterStore x, y;
  const Mat init = random_mat(3, 3, rng);
  x.add("a", init);
  y.add("a", init);
  for (int i = 0; i < 100; ++i) {
    const Mat gr = random_mat(3, 3, rng);
    x.at("a").grad = gr;
    y.at("a").grad = gr;
    adam_step(x, AdamConfig{});
    adam_step(y, AdamConfig{});
  }
  CHECK(x.value("a") == y.value("a"));

  ParameterStore bad;
  bad.add("enc/w", Mat::Zero(1, 1));
  bad.at("enc/w").grad = Mat::Constant(1, 1, std::nan(""));
  try {
    adam_step(bad, AdamConfig{});
    FAIL("expected a throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("enc/w") != std::string::npos);
  }
}

TEST_CASE("finite_diff_check on a quadratic and an unused parameter") {
  std::mt19937_64 rng(14);
  ParameterStore s;
  s.add("theta", random_mat(4, 3, rng));
  s.add("unused", random_mat(2, 2, rng));
  auto fn = [](Tape& t, ParameterStore& st) {
    t.param(st, "unused");
    return scale(sum_squares(t.param(st, "theta")), 0.5);
  };
  GradCheckOptions opts;
  opts.prefix = "theta";
  CHECK(finite_diff_check(fn, s, opts).max_rel_error < 1e-9);

  ParameterStore probe = s;
  probe.zero_grad();
  Tape t;
  Var l = fn(t, probe);
  t.backward(l);
  CHECK((probe.at("theta").grad - probe.value("theta")).cwiseAbs().maxCoeff() < 1e-15);
  const Mat& gu = probe.at("unused").grad;
  CHECK((gu.size() == 0 || gu.cwiseAbs().maxCoeff() == 0.0));
  opts.prefix = "unused";
  CHECK(finite_diff_check(fn, s, opts).max_abs_error < 1e-8);
}

TEST_CASE("snapshot restore and checkpoint round trip are bit exact") {
  std::mt19937_64 rng(15);
  ParameterStore s;
  init_linear(s, "lin", 4, 3, rng);
  const Mat x = random_mat(2, 4, rng);
  auto forward = [&] {
    Tape t(false);
    return linear(t, s, "lin", t.constant(x)).value();
  };
  const Mat before = forward();
  const Snapshot snap = s.snapshot();
  s.value("lin/w") *= 3.0;
  CHECK(forward() != before);
  s.restore(snap);
  CHECK(forward() == before);

  const auto file = std::filesystem::temp_directory_path() / "mtpb_test_ckpt.bin";
  s.set_step(42);
  s.save(file);
  ParameterStore r;
  r.load(file);
  CHECK(r.hash() == s.hash());
  CHECK(r.step() == 42);
  CHECK(r.value("lin/w") == s.value("lin/w"));
  std::filesystem::remove(file);
}

TEST_CASE("layer spec validation") {
  LayerSpec spec;
  CHECK_NOTHROW(spec.validate());
  spec.heads = 3;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}
