#pragma once

// The registered gradient-check battery: every differentiable primitive is
// checked against central finite differences on seeded random instances,
// plus the full composite training loss on a downscaled model. Used by the
// gradcheck command and the acceptance suite.

#include <string>
#include <vector>

#include "protolab/gradcheck.hpp"
#include "protolab/train.hpp"

namespace protolab {

struct PrimitiveCheck {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t instances = 0;
  bool pass = false;
};

namespace detail {

inline Tensor rand_tensor(std::vector<std::size_t> shape, Rng& rng, double lo,
                          double hi) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// one (point, analytic, f) gradient comparison
struct CheckCase {
  Tensor point;
  Tensor analytic;
  std::function<double(const Tensor&)> f;
  std::vector<std::size_t> subset;  // empty = all
  double step = 1e-5;
};

inline double run_case(const CheckCase& c) {
  auto rep = finite_difference_check(
      c.f, c.point, c.analytic, c.step, /*tolerance*/ 1e9,
      std::span<const std::size_t>(c.subset));
  return rep.encountered_nonfinite
             ? std::numeric_limits<double>::infinity()
             : rep.max_error;
}

}  // namespace detail

inline std::vector<PrimitiveCheck> run_gradcheck_suite(
    std::uint64_t seed, std::size_t instances = 10, bool inject_fault = false) {
  using detail::CheckCase;
  using detail::rand_tensor;
  std::vector<PrimitiveCheck> checks;

  auto add_check = [&](const std::string& name, double tolerance,
                       auto make_case) {
    PrimitiveCheck check;
    check.name = name;
    check.tolerance = tolerance;
    check.instances = instances;
    for (std::size_t inst = 0; inst < instances; ++inst) {
      Rng rng(derive_seed(seed, std::hash<std::string>{}(name), inst));
      CheckCase c = make_case(rng);
      if (inject_fault && name == "relu" && inst == 0 && c.analytic.size())
        c.analytic[0] += 0.1;
      check.max_error = std::max(check.max_error, detail::run_case(c));
    }
    check.pass = check.max_error < check.tolerance;
    checks.push_back(std::move(check));
  };

  auto probe_weights = [](std::size_t n, Rng& rng) {
    Tensor w({n});
    for (std::size_t i = 0; i < n; ++i) w[i] = rng.uniform(-1.0, 1.0);
    return w;
  };

  add_check("conv2d", 1e-5, [&](Rng& rng) {
    const Tensor k = rand_tensor({3, 2, 3, 3}, rng, -1, 1);
    const Tensor b = rand_tensor({3}, rng, -1, 1);
    const Tensor w = probe_weights(3 * 5 * 5, rng);
    CheckCase c;
    c.point = rand_tensor({2, 5, 5}, rng, -1, 1);
    auto f = [k, b, w](const Tensor& x) {
      Tape t;
      Var y = t.conv2d(t.leaf(x, true), t.leaf(k), t.leaf(b), 1, 1);
      return t.value(t.weighted_sum(y, w)).item();
    };
    Tape t;
    Var xv = t.leaf(c.point, true);
    Var s = t.weighted_sum(t.conv2d(xv, t.leaf(k), t.leaf(b), 1, 1), w);
    t.backward(s);
    c.analytic = t.grad(xv);
    c.f = f;
    c.step = 1e-4;
    return c;
  });

  add_check("conv2d_kernel", 1e-5, [&](Rng& rng) {
    const Tensor x = rand_tensor({2, 5, 5}, rng, -1, 1);
    const Tensor w = probe_weights(3 * 3 * 3, rng);
    CheckCase c;
    c.point = rand_tensor({3, 2, 3, 3}, rng, -1, 1);
    auto f = [x, w](const Tensor& k) {
      Tape t;
      Var y = t.conv2d(t.leaf(x), t.leaf(k, true), Var{}, 2, 1);
      return t.value(t.weighted_sum(y, w)).item();
    };
    Tape t;
    Var kv = t.leaf(c.point, true);
    Var s = t.weighted_sum(t.conv2d(t.leaf(x), kv, Var{}, 2, 1), w);
    t.backward(s);
    c.analytic = t.grad(kv);
    c.f = f;
    c.step = 1e-4;
    return c;
  });

  add_check("maxpool2d", 1e-5, [&](Rng& rng) {
    const Tensor w = probe_weights(2 * 2 * 2, rng);
    CheckCase c;
    c.point = rand_tensor({2, 4, 4}, rng, 0, 1);
    auto f = [w](const Tensor& x) {
      Tape t;
      return t.value(t.weighted_sum(t.maxpool2d(t.leaf(x, true), 2, 2), w))
          .item();
    };
    Tape t;
    Var xv = t.leaf(c.point, true);
    t.backward(t.weighted_sum(t.maxpool2d(xv, 2, 2), w));
    c.analytic = t.grad(xv);
    c.f = f;
    return c;
  });

  add_check("relu", 1e-5, [&](Rng& rng) {
    const Tensor w = probe_weights(12, rng);
    CheckCase c;
    c.point = rand_tensor({12}, rng, -1, 1);
    auto f = [w](const Tensor& x) {
      Tape t;
      return t.value(t.weighted_sum(t.relu(t.leaf(x, true)), w)).item();
    };
    Tape t;
    Var xv = t.leaf(c.point, true);
    t.backward(t.weighted_sum(t.relu(xv), w));
    c.analytic = t.grad(xv);
    c.f = f;
    return c;
  });

  add_check("sigmoid", 1e-5, [&](Rng& rng) {
    const Tensor w = probe_weights(12, rng);
    CheckCase c;
    c.point = rand_tensor({12}, rng, -3, 3);
    auto f = [w](const Tensor& x) {
      Tape t;
      return t.value(t.weighted_sum(t.sigmoid(t.leaf(x, true)), w)).item();
    };
    Tape t;
    Var xv = t.leaf(c.point, true);
    t.backward(t.weighted_sum(t.sigmoid(xv), w));
    c.analytic = t.grad(xv);
    c.f = f;
    return c;
  });

  add_check("dense", 1e-6, [&](Rng& rng) {
    const Tensor x = rand_tensor({4}, rng, -1, 1);
    const Tensor b = rand_tensor({3}, rng, -1, 1);
    const Tensor w = probe_weights(3, rng);
    CheckCase c;
    c.point = rand_tensor({3, 4}, rng, -1, 1);
    auto f = [x, b, w](const Tensor& wm) {
      Tape t;
      return t
          .value(t.weighted_sum(t.dense(t.leaf(x), t.leaf(wm, true), t.leaf(b)),
                                w))
          .item();
    };
    Tape t;
    Var wv = t.leaf(c.point, true);
    t.backward(t.weighted_sum(t.dense(t.leaf(x), wv, t.leaf(b)), w));
    c.analytic = t.grad(wv);
    c.f = f;
    return c;
  });

  add_check("softmax_cross_entropy", 1e-6, [&](Rng& rng) {
    CheckCase c;
    c.point = rand_tensor({5}, rng, -2, 2);
    auto f = [](const Tensor& z) {
      Tape t;
      return t.value(t.softmax_cross_entropy(t.leaf(z, true), 2)).item();
    };
    Tape t;
    Var zv = t.leaf(c.point, true);
    t.backward(t.softmax_cross_entropy(zv, 2));
    c.analytic = t.grad(zv);
    c.f = f;
    return c;
  });

  for (DistanceMode mode :
       {DistanceMode::squared, DistanceMode::euclidean}) {
    const std::string name =
        std::string("prototype_distances_") + to_string(mode);
    add_check(name, 1e-5, [&, mode](Rng& rng) {
      const Tensor p = rand_tensor({3, 4}, rng, 0, 1);
      const Tensor w = probe_weights(3 * 2 * 2, rng);
      CheckCase c;
      c.point = rand_tensor({4, 2, 2}, rng, 0, 1);
      auto f = [p, w, mode](const Tensor& z) {
        Tape t;
        Var d = t.prototype_distances(t.leaf(z, true), t.leaf(p), mode);
        return t.value(t.weighted_sum(d, w)).item();
      };
      Tape t;
      Var zv = t.leaf(c.point, true);
      t.backward(
          t.weighted_sum(t.prototype_distances(zv, t.leaf(p), mode), w));
      c.analytic = t.grad(zv);
      c.f = f;
      return c;
    });
  }

  add_check("log_ratio_similarity", 1e-6, [&](Rng& rng) {
    const Tensor w = probe_weights(9, rng);
    CheckCase c;
    c.point = rand_tensor({9}, rng, 1e-3, 10.0);
    auto f = [w](const Tensor& d) {
      Tape t;
      return t.value(t.weighted_sum(t.log_ratio_similarity(t.leaf(d, true), 1e-4), w))
          .item();
    };
    Tape t;
    Var dv = t.leaf(c.point, true);
    t.backward(t.weighted_sum(t.log_ratio_similarity(dv, 1e-4), w));
    c.analytic = t.grad(dv);
    c.f = f;
    c.step = 1e-6;
    return c;
  });

  add_check("spatial_max", 1e-5, [&](Rng& rng) {
    const Tensor w = probe_weights(3, rng);
    CheckCase c;
    c.point = rand_tensor({3, 3, 3}, rng, 0, 1);
    auto f = [w](const Tensor& m) {
      Tape t;
      return t.value(t.weighted_sum(t.spatial_max(t.leaf(m, true)), w)).item();
    };
    Tape t;
    Var mv = t.leaf(c.point, true);
    t.backward(t.weighted_sum(t.spatial_max(mv), w));
    c.analytic = t.grad(mv);
    c.f = f;
    return c;
  });

  add_check("masked_min", 1e-5, [&](Rng& rng) {
    static const std::vector<std::size_t> rows = {0, 2};
    CheckCase c;
    c.point = rand_tensor({3, 2, 2}, rng, 0, 1);
    auto f = [](const Tensor& m) {
      Tape t;
      return t.value(t.masked_min(t.leaf(m, true), rows)).item();
    };
    Tape t;
    Var mv = t.leaf(c.point, true);
    t.backward(t.masked_min(mv, rows));
    c.analytic = t.grad(mv);
    c.f = f;
    return c;
  });

  add_check("region_mean", 1e-7, [&](Rng& rng) {
    static const std::vector<Cell> cells = {Cell{0, 0}, Cell{1, 1}};
    CheckCase c;
    c.point = rand_tensor({2, 2, 2}, rng, -1, 1);
    auto f = [](const Tensor& m) {
      Tape t;
      return t.value(t.region_mean(t.leaf(m, true), 1, cells)).item();
    };
    Tape t;
    Var mv = t.leaf(c.point, true);
    t.backward(t.region_mean(mv, 1, cells));
    c.analytic = t.grad(mv);
    c.f = f;
    return c;
  });

  add_check("elementwise_combine", 1e-7, [&](Rng& rng) {
    // add, sub, mul, scale and weighted_sum composed into one scalar
    const Tensor other = rand_tensor({6}, rng, -1, 1);
    const Tensor w = probe_weights(6, rng);
    CheckCase c;
    c.point = rand_tensor({6}, rng, -1, 1);
    auto f = [other, w](const Tensor& x) {
      Tape t;
      Var xv = t.leaf(x, true);
      Var o = t.leaf(other);
      Var y = t.scale(t.mul(t.add(xv, o), t.sub(xv, o)), 0.5);
      return t.value(t.weighted_sum(y, w)).item();
    };
    Tape t;
    Var xv = t.leaf(c.point, true);
    Var o = t.leaf(other);
    t.backward(
        t.weighted_sum(t.scale(t.mul(t.add(xv, o), t.sub(xv, o)), 0.5), w));
    c.analytic = t.grad(xv);
    c.f = f;
    return c;
  });

  add_check("l1_masked", 1e-6, [&](Rng& rng) {
    auto mask = std::make_shared<std::vector<std::uint8_t>>(8, 0);
    for (std::size_t i = 0; i < 8; i += 2) (*mask)[i] = 1;
    CheckCase c;
    c.point = rand_tensor({8}, rng, 0.2, 1.0);  // away from the kink at 0
    for (std::size_t i = 1; i < 8; i += 2) c.point[i] = -c.point[i];
    auto f = [mask](const Tensor& x) {
      Tape t;
      return t.value(t.l1_masked(t.leaf(x, true), mask)).item();
    };
    Tape t;
    Var xv = t.leaf(c.point, true);
    t.backward(t.l1_masked(xv, mask));
    c.analytic = t.grad(xv);
    c.f = f;
    return c;
  });

  // full composite loss on a downscaled model, subset of coordinates per
  // parameter tensor
  {
    PrimitiveCheck check;
    check.name = "composite_total_loss";
    check.tolerance = 1e-3;
    check.instances = instances;
    for (std::size_t inst = 0; inst < instances; ++inst) {
      Rng rng(derive_seed(seed, 0xc0117051ULL, inst));
      ModelConfig mc;
      mc.image_h = mc.image_w = 16;
      mc.latent_h = mc.latent_w = 2;
      mc.classes = 2;
      mc.prototypes_per_class = 2;
      Model model = make_model(mc, rng.next_u64());
      std::vector<Tensor> images;
      std::vector<std::size_t> labels = {0, 1};
      for (int i = 0; i < 2; ++i)
        images.push_back(rand_tensor({3, 16, 16}, rng, 0, 1));
      TrainConfig tc;
      model.params.set_all_trainable(true);
      total_loss(model, images, labels, tc, true);
      for (auto& p : model.params.entries()) {
        std::vector<std::size_t> subset;
        for (int k = 0; k < 8; ++k)
          subset.push_back(rng.below(p.value.size()));
        auto f = [&](const Tensor& v) {
          Model probe = model;
          probe.params.at(p.name).value = v;
          return total_loss(probe, images, labels, tc, false).total;
        };
        auto rep = finite_difference_check(f, p.value, p.grad, 1e-5, 1e9,
                                           subset);
        check.max_error = std::max(check.max_error, rep.max_error);
        if (rep.encountered_nonfinite)
          check.max_error = std::numeric_limits<double>::infinity();
      }
    }
    check.pass = check.max_error < check.tolerance;
    checks.push_back(std::move(check));
  }

  return checks;
}

inline bool gradcheck_all_pass(std::span<const PrimitiveCheck> checks) {
  for (const auto& c : checks)
    if (!c.pass) return false;
  return !checks.empty();
}

}  // namespace protolab
