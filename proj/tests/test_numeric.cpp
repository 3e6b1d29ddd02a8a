#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "avsdiff/autodiff.hpp"
#include "avsdiff/gradcheck.hpp"
#include "avsdiff/rng.hpp"
#include "avsdiff/tensor.hpp"

using namespace avsdiff;

namespace {

// Independent quadruple-loop convolution used as the exactness oracle.
Tensor naive_conv2d(const Tensor& x, const Tensor& k, int stride, int pad) {
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int o = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  Tensor out({b, o, oh, ow});
  for (int bb = 0; bb < b; ++bb) {
    for (int oo = 0; oo < o; ++oo) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (int cc = 0; cc < c; ++cc) {
            for (int ky = 0; ky < kh; ++ky) {
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = oy * stride - pad + ky;
                const int ix = ox * stride - pad + kx;
                if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                  acc += x.at(bb, cc, iy, ix) * k.at(oo, cc, ky, kx);
                }
              }
            }
          }
          out.at(bb, oo, oy, ox) = acc;
        }
      }
    }
  }
  return out;
}

// Keeps FD probes away from non-smooth points (relu kink, clamp edges).
Tensor away_from(Tensor t, double point, double gap) {
  for (std::int64_t i = 0; i < t.size(); ++i) {
    if (std::fabs(t[i] - point) < gap) t[i] = point + (t[i] >= point ? gap : -gap);
  }
  return t;
}

// Finite-difference check for one op: wraps the inputs as Params, reduces the
// op output to a scalar with fixed random weights, compares tape gradients.
double fd_check(RngStream& rng, std::vector<Tensor> inputs,
                const std::function<NodeId(Tape&, const std::vector<NodeId>&)>& build) {
  std::vector<std::unique_ptr<Param>> params;
  std::vector<Param*> raw;
  for (size_t i = 0; i < inputs.size(); ++i) {
    params.push_back(std::make_unique<Param>("in" + std::to_string(i), inputs[i]));
    raw.push_back(params.back().get());
  }
  Tensor weights;
  auto loss = [&](bool with_grad) {
    Tape tape;
    std::vector<NodeId> ids;
    ids.reserve(raw.size());
    for (Param* p : raw) ids.push_back(tape.param(*p));
    NodeId out = build(tape, ids);
    if (weights.empty()) weights = rng.gauss_tensor(tape.value(out).shape());
    NodeId scalar = tape.sum(tape.cmul(out, weights));
    if (with_grad) tape.backward(scalar);
    return tape.value(scalar).item();
  };
  return grad_check(raw, loss).max_rel_err;
}

}  // namespace

TEST_CASE("tensor shape and data length stay consistent") {
  CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), DimensionError);
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.shape() == std::vector<int>{2, 3});
  CHECK_THROWS_AS(Tensor::scalar(1.0).item() == 1.0 ? Tensor({2}).item() : 0.0, ContractError);
}

TEST_CASE("matmul identity, hand dot product, annihilator") {
  Tape tape;
  NodeId eye = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  NodeId m = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  const Tensor prod_eye = tape.value(tape.matmul(eye, m));
  CHECK(prod_eye == Tensor({2, 2}, {1, 2, 3, 4}));

  // [[1,2]] . [[3],[4]] = [[1*3 + 2*4]] = [[11]]
  NodeId a = tape.constant(Tensor({1, 2}, {1, 2}));
  NodeId b = tape.constant(Tensor({2, 1}, {3, 4}));
  CHECK(tape.value(tape.matmul(a, b)).item() == 11.0);

  NodeId z = tape.constant(Tensor({2, 3}));
  NodeId any = tape.constant(RngStream(1, 2).gauss_tensor({3, 2}));
  const Tensor& prod = tape.value(tape.matmul(z, any));
  for (std::int64_t i = 0; i < prod.size(); ++i) CHECK(prod[i] == 0.0);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
  Tape tape;
  NodeId a = tape.constant(Tensor({2, 3}));
  NodeId b = tape.constant(Tensor({2, 3}));
  try {
    tape.matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("conv2d identity kernel, direct summation, zero input") {
  Tape tape;
  NodeId x = tape.constant(Tensor({1, 1, 1, 1}, {5}));
  NodeId k = tape.constant(Tensor({1, 1, 1, 1}, {1}));
  CHECK(tape.value(tape.conv2d(x, k, 1, 0)).item() == 5.0);

  NodeId x2 = tape.constant(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  NodeId k2 = tape.constant(Tensor({1, 1, 2, 2}, {1, 1, 1, 1}));
  const Tensor expected =
      naive_conv2d(tape.value(x2), tape.value(k2), 1, 0);  // direct summation: 10
  CHECK(expected.item() == 10.0);
  CHECK(tape.value(tape.conv2d(x2, k2, 1, 0)) == expected);

  NodeId xz = tape.constant(Tensor({1, 2, 4, 4}));
  NodeId kz = tape.constant(RngStream(3, 4).gauss_tensor({3, 2, 3, 3}));
  const Tensor& out = tape.value(tape.conv2d(xz, kz, 1, 1));
  for (std::int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);
}

TEST_CASE("conv2d rejects non-integral output sizes") {
  Tape tape;
  NodeId x = tape.constant(Tensor({1, 1, 4, 4}));
  NodeId k = tape.constant(Tensor({1, 1, 3, 3}));
  CHECK_THROWS_AS(tape.conv2d(x, k, 2, 1), DimensionError);  // (4+2-3)/2 not integral
  NodeId kbig = tape.constant(Tensor({1, 1, 7, 7}));
  CHECK_THROWS_AS(tape.conv2d(x, kbig, 1, 1), DimensionError);  // kernel larger than padded
}

TEST_CASE("conv2d matches the naive quadruple loop exactly on small inputs") {
  RngStream rng(11, 0);
  for (int trial = 0; trial < 25; ++trial) {
    const int b = 1 + static_cast<int>(rng.uniform_index(2));
    const int c = 1 + static_cast<int>(rng.uniform_index(3));
    const int o = 1 + static_cast<int>(rng.uniform_index(3));
    const int kh = 1 + static_cast<int>(rng.uniform_index(3));
    const int stride = 1 + static_cast<int>(rng.uniform_index(2));
    const int pad = static_cast<int>(rng.uniform_index(2));
    int h = kh + stride * static_cast<int>(rng.uniform_index(3)) - 2 * pad;
    if (h < 1) h = kh;  // keep geometry valid
    if ((h + 2 * pad - kh) % stride != 0) continue;
    if (h > 8) continue;
    Tensor x = rng.gauss_tensor({b, c, h, h});
    Tensor k = rng.gauss_tensor({o, c, kh, kh});
    Tape tape;
    const Tensor& fast = tape.value(tape.conv2d(tape.constant(x), tape.constant(k), stride, pad));
    CHECK(fast == naive_conv2d(x, k, stride, pad));
  }
}

TEST_CASE("leaky_relu definition and slope corner cases") {
  Tape tape;
  NodeId x = tape.constant(Tensor({3}, {-1, 0, 2}));
  const Tensor& y = tape.value(tape.leaky_relu(x, 0.2));
  CHECK(y[0] == doctest::Approx(-0.2));
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 2.0);

  NodeId r = tape.constant(Tensor({2}, {-3, 3}));
  const Tensor& yr = tape.value(tape.leaky_relu(r, 0.0));
  CHECK(yr[0] == 0.0);
  CHECK(yr[1] == 3.0);

  Tensor any = RngStream(5, 6).gauss_tensor({7});
  NodeId id = tape.constant(any);
  CHECK(tape.value(tape.leaky_relu(id, 1.0)) == any);
}

TEST_CASE("leaky_relu derivative at zero is the slope") {
  Param p("x", Tensor({1}, {0.0}));
  Tape tape;
  NodeId y = tape.leaky_relu(tape.param(p), 0.2);
  tape.backward(tape.sum(y));
  CHECK(p.grad[0] == 0.2);
}

TEST_CASE("batch_norm hand-computed and degenerate cases") {
  Tape tape;
  Param gamma("g", Tensor({1}, {1.0}));
  Param beta("b", Tensor({1}, {0.0}));

  // channel values {-1, +1}: mean 0, biased variance 1 -> output {-1, +1}
  NodeId x = tape.constant(Tensor({2, 1}, {-1.0, 1.0}));
  NodeId y = tape.batch_norm(x, tape.param(gamma), tape.param(beta), RunningStats{}, 1e-12, 0.1,
                             NetMode::kTrain);
  CHECK(tape.value(y)[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(tape.value(y)[1] == doctest::Approx(1.0).epsilon(1e-9));

  // gamma = 0 -> output equals beta broadcast
  Param g0("g0", Tensor({2}, {0.0, 0.0}));
  Param b7("b7", Tensor({2}, {7.0, -3.0}));
  NodeId x2 = tape.constant(RngStream(8, 1).gauss_tensor({3, 2}));
  const Tensor& y2 = tape.value(tape.batch_norm(x2, tape.param(g0), tape.param(b7),
                                                RunningStats{}, 1e-5, 0.1, NetMode::kTrain));
  for (int i = 0; i < 3; ++i) {
    CHECK(y2.at(i, 0) == 7.0);
    CHECK(y2.at(i, 1) == -3.0);
  }

  // constant channel: zero variance, output ~= beta
  NodeId xc = tape.constant(Tensor({4, 1}, {2.5, 2.5, 2.5, 2.5}));
  const Tensor& yc = tape.value(tape.batch_norm(xc, tape.param(gamma), tape.param(beta),
                                                RunningStats{}, 1e-5, 0.1, NetMode::kTrain));
  for (int i = 0; i < 4; ++i) CHECK(std::fabs(yc[i] - 0.0) < 1e-3);

  NodeId x1 = tape.constant(Tensor({1, 2}, {1.0, 2.0}));
  Param g2("g2", Tensor({2}, {1.0, 1.0}));
  Param be2("be2", Tensor({2}, {0.0, 0.0}));
  CHECK_THROWS_AS(tape.batch_norm(x1, tape.param(g2), tape.param(be2), RunningStats{}, 1e-5, 0.1,
                                  NetMode::kTrain),
                  ContractError);
}

TEST_CASE("backward on sums and squares gives analytic gradients") {
  Param p("p", Tensor({2, 3}, {1, -2, 3, 0.5, -0.25, 2}));
  {
    Tape tape;
    tape.backward(tape.sum(tape.param(p)));
    for (std::int64_t i = 0; i < p.grad.size(); ++i) CHECK(p.grad[i] == 1.0);
  }
  Param q("q", Tensor({2}, {1, -2}));
  {
    Tape tape;
    NodeId n = tape.param(q);
    tape.backward(tape.affine(tape.sum(tape.mul(n, n)), 0.5, 0.0));
    CHECK(q.grad[0] == doctest::Approx(1.0));
    CHECK(q.grad[1] == doctest::Approx(-2.0));
  }
  {
    Tape tape;
    NodeId n = tape.param(p);
    CHECK_THROWS_AS(tape.backward(n), ContractError);
  }
}

TEST_CASE("param grad accumulates until zero_grad") {
  Param p("p", Tensor({2}, {1.0, 2.0}));
  for (int i = 0; i < 3; ++i) {
    Tape tape;
    tape.backward(tape.sum(tape.param(p)));
  }
  CHECK(p.grad[0] == 3.0);
  p.zero_grad();
  CHECK(p.grad[0] == 0.0);
}

TEST_CASE("every differentiable op matches central finite differences") {
  RngStream rng(99, 0);
  std::vector<std::pair<const char*, std::function<double()>>> checks;

  auto run = [&](const char* name, std::vector<Tensor> inputs,
                 std::function<NodeId(Tape&, const std::vector<NodeId>&)> build) {
    const double err = fd_check(rng, std::move(inputs), build);
    INFO(name);
    CHECK(err < 1e-4);
  };

  for (int trial = 0; trial < 4; ++trial) {
    auto g = [&](std::vector<int> shape) { return rng.gauss_tensor(std::move(shape)); };

    run("add", {g({3, 4}), g({3, 4})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.add(in[0], in[1]); });
    run("sub", {g({3, 4}), g({3, 4})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.sub(in[0], in[1]); });
    run("mul", {g({3, 4}), g({3, 4})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.mul(in[0], in[1]); });
    run("affine", {g({5})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.affine(in[0], -1.7, 0.3); });
    {
      Tensor w = g({2, 6});
      run("cmul", {g({2, 6})},
          [w](Tape& t, const std::vector<NodeId>& in) { return t.cmul(in[0], w); });
    }
    run("leaky_relu", {away_from(g({4, 4}), 0.0, 1e-2)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.leaky_relu(in[0], 0.2); });
    run("sigmoid", {g({3, 3})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.sigmoid(in[0]); });
    run("exp", {g({6})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.exp(in[0]); });
    {
      Tensor pos = g({6});
      for (std::int64_t i = 0; i < pos.size(); ++i) pos[i] = 0.2 + std::fabs(pos[i]);
      run("log", {pos}, [](Tape& t, const std::vector<NodeId>& in) { return t.log(in[0]); });
    }
    run("clamp", {away_from(away_from(g({8}), -1.0, 1e-2), 1.0, 1e-2)},
        [](Tape& t, const std::vector<NodeId>& in) { return t.clamp(in[0], -1.0, 1.0); });
    run("matmul", {g({3, 4}), g({4, 2})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.matmul(in[0], in[1]); });
    run("transpose", {g({3, 5})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.transpose(in[0]); });
    run("linear", {g({3, 4}), g({5, 4}), g({5})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.linear(in[0], in[1], in[2]); });
    run("conv2d_s1", {g({2, 2, 4, 4}), g({3, 2, 3, 3}), g({3})},
        [](Tape& t, const std::vector<NodeId>& in) {
          return t.conv2d(in[0], in[1], in[2], 1, 1);
        });
    run("conv2d_s2", {g({1, 2, 6, 6}), g({2, 2, 4, 4})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.conv2d(in[0], in[1], 2, 1); });
    run("reshape", {g({2, 6})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.reshape(in[0], {3, 4}); });
    run("slice0", {g({5, 3})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.slice0(in[0], 1, 4); });
    run("concat0", {g({2, 3}), g({3, 3})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.concat({in[0], in[1]}, 0); });
    run("concat1", {g({2, 3}), g({2, 2})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.concat({in[0], in[1]}, 1); });
    run("concat_ch", {g({2, 2, 3, 3}), g({2, 1, 3, 3})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.concat({in[0], in[1]}, 1); });
    run("broadcast_row", {g({4})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.broadcast_row(in[0], 3); });
    run("tile_spatial", {g({2, 3})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.tile_spatial(in[0], 2, 2); });
    run("upsample2x", {g({1, 2, 2, 3})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.upsample2x(in[0]); });
    run("global_avg_pool", {g({2, 3, 2, 2})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.global_avg_pool(in[0]); });
    run("row_l2_normalize", {g({4, 3})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.row_l2_normalize(in[0]); });
    run("softmax_rows", {g({3, 4})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.softmax_rows(in[0]); });
    run("log_softmax_rows", {g({3, 4})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.log_softmax_rows(in[0]); });
    run("batch_norm_train", {g({4, 3}), g({3}), g({3})},
        [](Tape& t, const std::vector<NodeId>& in) {
          return t.batch_norm(in[0], in[1], in[2], RunningStats{}, 1e-5, 0.1, NetMode::kTrain);
        });
    {
      Tensor rm = g({2});
      Tensor rv = g({2});
      for (std::int64_t i = 0; i < rv.size(); ++i) rv[i] = 0.5 + std::fabs(rv[i]);
      auto rms = std::make_shared<Tensor>(rm);
      auto rvs = std::make_shared<Tensor>(rv);
      run("batch_norm_eval", {g({3, 2, 2, 2}), g({2}), g({2})},
          [rms, rvs](Tape& t, const std::vector<NodeId>& in) {
            return t.batch_norm(in[0], in[1], in[2], RunningStats{rms.get(), rvs.get()}, 1e-5,
                                0.1, NetMode::kEval);
          });
    }
    run("sum", {g({3, 3})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.sum(in[0]); });
    run("mean", {g({7})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.mean(in[0]); });
    run("neg_mean_diag", {g({3, 3})},
        [](Tape& t, const std::vector<NodeId>& in) { return t.neg_mean_diag(in[0]); });
    {
      Tensor target = g({2, 5});
      run("mse", {g({2, 5})},
          [target](Tape& t, const std::vector<NodeId>& in) { return t.mse(in[0], target); });
    }
    {
      Tensor target({2, 4});
      Tensor weight({2, 4});
      Tensor pred({2, 4});
      for (std::int64_t i = 0; i < pred.size(); ++i) {
        target[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
        weight[i] = rng.uniform() < 0.3 ? 0.0 : 1.0;
        pred[i] = 0.05 + 0.9 * rng.uniform();
      }
      weight[0] = 1.0;
      run("bce", {pred}, [target, weight](Tape& t, const std::vector<NodeId>& in) {
        return t.bce(in[0], target, weight);
      });
    }
  }
}

TEST_CASE("ops are pure: same inputs give bit-identical outputs") {
  RngStream rng(123, 5);
  Tensor a = rng.gauss_tensor({6, 6});
  Tensor b = rng.gauss_tensor({6, 6});
  Tape t1, t2;
  CHECK(t1.value(t1.matmul(t1.constant(a), t1.constant(b))) ==
        t2.value(t2.matmul(t2.constant(a), t2.constant(b))));
  CHECK(t1.value(t1.softmax_rows(t1.constant(a))) == t2.value(t2.softmax_rows(t2.constant(a))));
}

TEST_CASE("gauss stream statistics and determinism") {
  RngStream rng(7, 7);
  const std::int64_t n = 1000000;
  double mean = 0.0, m2 = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double x = rng.gauss();
    const double d = x - mean;
    mean += d / static_cast<double>(i + 1);
    m2 += d * (x - mean);
  }
  const double var = m2 / static_cast<double>(n - 1);
  CHECK(std::fabs(mean) < 0.01);
  CHECK(std::fabs(var - 1.0) < 0.01);

  RngStream s1(42, 3), s2(42, 3);
  CHECK(s1.gauss_tensor({4, 4}) == s2.gauss_tensor({4, 4}));

  RngStream s3(42, 4);
  CHECK(s3.gauss_tensor({0}).size() == 0);
}

TEST_CASE("rng forks are independent of parent consumption") {
  RngStream a(9, 1);
  RngStream fork_before = a.fork(5);
  (void)a.next_u64();
  RngStream fork_after = a.fork(5);
  CHECK(fork_before.next_u64() == fork_after.next_u64());
  CHECK(a.fork(5).next_u64() != a.fork(6).next_u64());
}

TEST_CASE("uniform is in range and shuffle is deterministic") {
  RngStream r(1, 1);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  std::vector<int> v1{1, 2, 3, 4, 5, 6, 7};
  std::vector<int> v2 = v1;
  RngStream s1(5, 5), s2(5, 5);
  s1.shuffle(v1);
  s2.shuffle(v2);
  CHECK(v1 == v2);
}
