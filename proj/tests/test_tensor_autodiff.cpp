#include <catch2/catch_amalgamated.hpp>

#include "protolab/gradcheck.hpp"
#include "protolab/rng.hpp"
#include "protolab/tape.hpp"

using namespace protolab;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// scalar objective: fixed random weighted sum of the op output, so the
// composed function is smooth wherever the op is
struct WeightedProbe {
  Tensor weights;
  explicit WeightedProbe(std::size_t n, Rng& rng)
      : weights({n}) {
    for (std::size_t i = 0; i < n; ++i) weights[i] = rng.uniform(-1.0, 1.0);
  }
};

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rank() == 3);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), std::invalid_argument);
  CHECK(Tensor::scalar(7.0).item() == 7.0);
}

TEST_CASE("conv2d identity kernel preserves the input") {
  Tape tape;
  Var x = tape.leaf(Tensor::full({1, 3, 3}, 1.0));
  Var k = tape.leaf(Tensor({1, 1, 1, 1}, {1.0}));
  Var y = tape.conv2d(x, k, Var{}, 1, 0);
  const Tensor& out = tape.value(y);
  REQUIRE(out.shape() == std::vector<std::size_t>{1, 3, 3});
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 1.0);
}

TEST_CASE("conv2d full-window kernel sums the input") {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 2, 2}, {1, 2, 3, 4}));
  Var k = tape.leaf(Tensor::full({1, 1, 2, 2}, 1.0));
  Var y = tape.conv2d(x, k, Var{}, 1, 0);
  REQUIRE(tape.value(y).shape() == std::vector<std::size_t>{1, 1, 1});
  CHECK(tape.value(y)[0] == 10.0);
}

TEST_CASE("conv2d rejects channel mismatch naming both shapes") {
  Tape tape;
  Var x = tape.leaf(Tensor({2, 5, 5}));
  Var k = tape.leaf(Tensor({3, 3, 3, 3}));
  try {
    tape.conv2d(x, k, Var{}, 1, 0);
    FAIL("expected a shape diagnostic");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,5,5]") != std::string::npos);
    CHECK(msg.find("[3,3,3,3]") != std::string::npos);
  }
}

TEST_CASE("conv2d rejects kernels larger than the padded input") {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 2, 2}));
  Var k = tape.leaf(Tensor({1, 1, 4, 4}));
  CHECK_THROWS_AS(tape.conv2d(x, k, Var{}, 1, 0), std::invalid_argument);
  CHECK_NOTHROW(tape.conv2d(x, k, Var{}, 1, 1));  // padded extent 4 fits
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(42);
  const Tensor x0 = random_tensor({2, 5, 5}, rng);
  const Tensor k0 = random_tensor({3, 2, 3, 3}, rng);
  const Tensor b0 = random_tensor({3}, rng);
  WeightedProbe probe(3 * 5 * 5, rng);

  auto loss = [&](const Tensor& x, const Tensor& k, const Tensor& b,
                  Tape& tape) {
    Var xv = tape.leaf(x, true);
    Var kv = tape.leaf(k, true);
    Var bv = tape.leaf(b, true);
    Var y = tape.conv2d(xv, kv, bv, 1, 1);
    Var s = tape.weighted_sum(y, probe.weights);
    return std::tuple{xv, kv, bv, s};
  };

  Tape tape;
  auto [xv, kv, bv, s] = loss(x0, k0, b0, tape);
  tape.backward(s);

  SECTION("input gradient") {
    auto f = [&](const Tensor& x) {
      Tape t;
      return t.value(std::get<3>(loss(x, k0, b0, t))).item();
    };
    auto rep = finite_difference_check(f, x0, tape.grad(xv), 1e-4, 1e-5);
    INFO("max error " << rep.max_error);
    CHECK(rep.ok());
  }
  SECTION("kernel gradient") {
    auto f = [&](const Tensor& k) {
      Tape t;
      return t.value(std::get<3>(loss(x0, k, b0, t))).item();
    };
    auto rep = finite_difference_check(f, k0, tape.grad(kv), 1e-4, 1e-5);
    CHECK(rep.ok());
  }
  SECTION("bias gradient") {
    auto f = [&](const Tensor& b) {
      Tape t;
      return t.value(std::get<3>(loss(x0, k0, b, t))).item();
    };
    auto rep = finite_difference_check(f, b0, tape.grad(bv), 1e-4, 1e-5);
    CHECK(rep.ok());
  }
  SECTION("strided and padded output shape") {
    Tape t;
    Var y = t.conv2d(t.leaf(random_tensor({2, 7, 6}, rng)),
                     t.leaf(random_tensor({1, 2, 3, 3}, rng)), Var{}, 2, 1);
    // (7 + 2 - 3)/2 + 1 = 4, (6 + 2 - 3)/2 + 1 = 3
    CHECK(t.value(y).shape() == std::vector<std::size_t>{1, 4, 3});
  }
}

TEST_CASE("maxpool2d single window picks the max") {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 2, 2}, {1, 2, 3, 0.5}));
  Var y = tape.maxpool2d(x, 2, 2);
  REQUIRE(tape.value(y).size() == 1);
  CHECK(tape.value(y)[0] == 3.0);
}

TEST_CASE("maxpool2d constant input stays constant") {
  Tape tape;
  Var y = tape.maxpool2d(tape.leaf(Tensor::full({2, 4, 4}, 0.7)), 2, 2);
  for (std::size_t i = 0; i < tape.value(y).size(); ++i)
    CHECK(tape.value(y)[i] == 0.7);
}

TEST_CASE("maxpool2d rejects windows larger than the input") {
  Tape tape;
  CHECK_THROWS_AS(tape.maxpool2d(tape.leaf(Tensor({1, 2, 2})), 3, 1),
                  std::invalid_argument);
}

TEST_CASE("maxpool2d backward routes to the first max on ties") {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 2, 2}, {5.0, 5.0, 1.0, 5.0}), true);
  Var y = tape.maxpool2d(x, 2, 2);
  tape.backward(y);
  const Tensor& g = tape.grad(x);
  CHECK(g[0] == 1.0);  // row-major first among the tied cells
  CHECK(g[1] == 0.0);
  CHECK(g[3] == 0.0);
}

TEST_CASE("maxpool2d gradient matches finite differences away from ties") {
  Rng rng(7);
  const Tensor x0 = random_tensor({1, 4, 4}, rng);
  WeightedProbe probe(4, rng);
  auto f = [&](const Tensor& x) {
    Tape t;
    Var y = t.maxpool2d(t.leaf(x, true), 2, 2);
    return t.value(t.weighted_sum(y, probe.weights)).item();
  };
  Tape tape;
  Var xv = tape.leaf(x0, true);
  Var s = tape.weighted_sum(tape.maxpool2d(xv, 2, 2), probe.weights);
  tape.backward(s);
  auto rep = finite_difference_check(f, x0, tape.grad(xv), 1e-4, 1e-5);
  CHECK(rep.ok());
}

TEST_CASE("activations: values and gradients") {
  Tape tape;
  CHECK(tape.value(tape.relu(tape.leaf(Tensor::scalar(-1.0))))[0] == 0.0);
  CHECK(tape.value(tape.sigmoid(tape.leaf(Tensor::scalar(0.0))))[0] == 0.5);

  SECTION("relu gradient at exactly zero is zero") {
    Tape t;
    Var x = t.leaf(Tensor::scalar(0.0), true);
    t.backward(t.relu(x));
    CHECK(t.grad(x)[0] == 0.0);
  }

  Rng rng(11);
  const Tensor x0 = random_tensor({3, 4}, rng, -2.0, 2.0);
  WeightedProbe probe(12, rng);
  SECTION("relu finite differences") {
    auto f = [&](const Tensor& x) {
      Tape t;
      return t.value(t.weighted_sum(t.relu(t.leaf(x, true)), probe.weights))
          .item();
    };
    Tape t;
    Var xv = t.leaf(x0, true);
    Var s = t.weighted_sum(t.relu(xv), probe.weights);
    t.backward(s);
    CHECK(finite_difference_check(f, x0, t.grad(xv), 1e-4, 1e-5).ok());
  }
  SECTION("sigmoid finite differences") {
    auto f = [&](const Tensor& x) {
      Tape t;
      return t.value(t.weighted_sum(t.sigmoid(t.leaf(x, true)), probe.weights))
          .item();
    };
    Tape t;
    Var xv = t.leaf(x0, true);
    Var s = t.weighted_sum(t.sigmoid(xv), probe.weights);
    t.backward(s);
    CHECK(finite_difference_check(f, x0, t.grad(xv), 1e-4, 1e-5).ok());
  }
}

TEST_CASE("dense layer basics") {
  Tape tape;
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Var x = tape.leaf(Tensor({3}, {1.0, -2.0, 0.5}));
  Var y = tape.dense(x, tape.leaf(eye), tape.leaf(Tensor({3})));
  CHECK(tape.value(y)[0] == 1.0);
  CHECK(tape.value(y)[1] == -2.0);
  CHECK(tape.value(y)[2] == 0.5);

  Var z = tape.dense(x, tape.leaf(Tensor({2, 3})), Var{});
  CHECK(tape.value(z)[0] == 0.0);
  CHECK(tape.value(z)[1] == 0.0);

  CHECK_THROWS_AS(tape.dense(x, tape.leaf(Tensor({2, 4})), Var{}),
                  std::invalid_argument);
}

TEST_CASE("dense weight gradient matches finite differences") {
  Rng rng(13);
  const Tensor x0 = random_tensor({4}, rng);
  const Tensor w0 = random_tensor({3, 4}, rng);
  const Tensor b0 = random_tensor({3}, rng);
  WeightedProbe probe(3, rng);
  auto f = [&](const Tensor& w) {
    Tape t;
    Var y = t.dense(t.leaf(x0), t.leaf(w, true), t.leaf(b0));
    return t.value(t.weighted_sum(y, probe.weights)).item();
  };
  Tape tape;
  Var wv = tape.leaf(w0, true);
  Var s = tape.weighted_sum(tape.dense(tape.leaf(x0), wv, tape.leaf(b0)),
                            probe.weights);
  tape.backward(s);
  CHECK(finite_difference_check(f, w0, tape.grad(wv), 1e-4, 1e-6).ok());
}

TEST_CASE("softmax cross entropy") {
  SECTION("uniform logits give log k") {
    Tape tape;
    Var loss = tape.softmax_cross_entropy(tape.leaf(Tensor({4})), 2);
    CHECK_THAT(tape.value(loss)[0],
               Catch::Matchers::WithinAbs(std::log(4.0), 1e-12));
  }
  SECTION("saturated correct logit gives ~0 loss") {
    Tape tape;
    Tensor z({3});
    z[1] = 1000.0;
    Var loss = tape.softmax_cross_entropy(tape.leaf(z), 1);
    CHECK(tape.value(loss)[0] < 1e-9);
    CHECK(std::isfinite(tape.value(loss)[0]));
  }
  SECTION("label out of range is rejected") {
    Tape tape;
    CHECK_THROWS_AS(tape.softmax_cross_entropy(tape.leaf(Tensor({3})), 3),
                    std::invalid_argument);
  }
  SECTION("gradient matches finite differences") {
    Rng rng(17);
    const Tensor z0 = random_tensor({5}, rng, -2.0, 2.0);
    auto f = [&](const Tensor& z) {
      Tape t;
      return t.value(t.softmax_cross_entropy(t.leaf(z, true), 3)).item();
    };
    Tape tape;
    Var zv = tape.leaf(z0, true);
    tape.backward(tape.softmax_cross_entropy(zv, 3));
    CHECK(finite_difference_check(f, z0, tape.grad(zv), 1e-5, 1e-6).ok());
  }
}

TEST_CASE("backward seeds and accumulation") {
  SECTION("root equal to the leaf has gradient one") {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(3.5), true);
    tape.backward(x);
    CHECK(tape.grad(x)[0] == 1.0);
  }
  SECTION("two uses of the same leaf accumulate") {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(2.0), true);
    tape.backward(tape.add(x, x));
    CHECK(tape.grad(x)[0] == 2.0);
  }
  SECTION("non-scalar root is rejected") {
    Tape tape;
    Var x = tape.leaf(Tensor({3}), true);
    CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
  }
}

TEST_CASE("full toy-model loss gradients match finite differences") {
  // two dense layers with relu between, cross entropy on top
  Rng rng(23);
  const Tensor x0 = random_tensor({6}, rng);
  ParameterStore store;
  store.add("w1", random_tensor({5, 6}, rng));
  store.add("b1", random_tensor({5}, rng));
  store.add("w2", random_tensor({3, 5}, rng));
  store.add("b2", random_tensor({3}, rng));
  const std::size_t label = 1;

  auto build = [&](Tape& tape, ParameterStore& s) {
    Var h = tape.relu(
        tape.dense(tape.leaf(x0), tape.param(s.at("w1")), tape.param(s.at("b1"))));
    Var logits =
        tape.dense(h, tape.param(s.at("w2")), tape.param(s.at("b2")));
    return tape.softmax_cross_entropy(logits, label);
  };

  Tape tape;
  Var loss = build(tape, store);
  tape.backward(loss);
  tape.flush_param_grads();

  for (const char* name : {"w1", "b1", "w2", "b2"}) {
    auto f = [&](const Tensor& p) {
      ParameterStore probe = store;
      probe.at(name).value = p;
      Tape t;
      return t.value(build(t, probe)).item();
    };
    auto rep = finite_difference_check(f, store.at(name).value,
                                       store.at(name).grad, 1e-5, 1e-3);
    INFO(name << " max error " << rep.max_error);
    CHECK(rep.ok());
  }
}

TEST_CASE("finite_difference_check on simple closed forms") {
  SECTION("x squared at 3") {
    Tensor p = Tensor::scalar(3.0);
    auto f = [](const Tensor& x) { return x[0] * x[0]; };
    Tensor analytic = Tensor::scalar(6.0);
    auto rep = finite_difference_check(f, p, analytic, 1e-4, 1e-7);
    CHECK(rep.ok());
    CHECK(rep.max_error < 1e-7);
  }
  SECTION("constant function has zero gradient") {
    Tensor p({4}, {1, 2, 3, 4});
    auto f = [](const Tensor&) { return 42.0; };
    auto rep = finite_difference_check(f, p, Tensor({4}), 1e-4, 1e-9);
    CHECK(rep.ok());
    CHECK(rep.max_error == 0.0);
  }
  SECTION("non-finite evaluations are flagged, not fatal") {
    Tensor p = Tensor::scalar(0.0);
    auto f = [](const Tensor& x) { return 1.0 / x[0]; };
    auto rep =
        finite_difference_check(f, p, Tensor::scalar(0.0), 1e-4, 1e-5);
    CHECK(rep.encountered_nonfinite == false);  // 1/h is finite
    Tensor q = Tensor::scalar(1e-300);
    auto g = [](const Tensor& x) { return std::log(-x[0]); };  // NaN both sides
    auto rep2 = finite_difference_check(g, q, Tensor::scalar(0.0), 1e-4, 1e-5);
    CHECK(rep2.encountered_nonfinite);
    CHECK_FALSE(rep2.ok());
  }
}

TEST_CASE("mul gradients") {
  Tape tape;
  Var a = tape.leaf(Tensor::scalar(3.0), true);
  Var y = tape.mul(a, a);
  tape.backward(y);
  CHECK(tape.value(y)[0] == 9.0);
  CHECK(tape.grad(a)[0] == 6.0);
}

TEST_CASE("determinism: identical tapes give identical values and grads") {
  auto run = [] {
    Rng rng(99);
    Tensor x = random_tensor({2, 6, 6}, rng);
    Tensor k = random_tensor({4, 2, 3, 3}, rng);
    WeightedProbe probe(4 * 3 * 3, rng);
    Tape tape;
    Var xv = tape.leaf(x, true);
    Var y = tape.maxpool2d(
        tape.relu(tape.conv2d(xv, tape.leaf(k, true), Var{}, 1, 1)), 2, 2);
    Var s = tape.weighted_sum(y, probe.weights);
    tape.backward(s);
    std::vector<double> out(tape.value(s).data(), tape.value(s).data() + 1);
    const Tensor& g = tape.grad(xv);
    out.insert(out.end(), g.data(), g.data() + g.size());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("composed forward/backward passes stay finite") {
  Rng rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor({3, 8, 8}, rng, 0.0, 1.0);
    Tensor k = random_tensor({4, 3, 3, 3}, rng, -3.0, 3.0);
    Tape tape;
    Var xv = tape.leaf(x, true);
    Var kv = tape.leaf(k, true);
    Var y = tape.sigmoid(tape.conv2d(xv, kv, Var{}, 1, 1));
    Var p = tape.maxpool2d(y, 2, 2);
    Var s = tape.weighted_sum(p, Tensor::full({4 * 4 * 4}, 1.0));
    tape.backward(s);
    CHECK(tape.value(s).all_finite());
    CHECK(tape.grad(xv).all_finite());
    CHECK(tape.grad(kv).all_finite());
  }
}
