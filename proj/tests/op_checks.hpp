#pragma once

// Named finite-difference checks covering every differentiable op. Shared by
// the unit tests (float build, loose tolerance) and the double-precision
// gradient-check binary (authoritative tolerance).

#include <functional>
#include <string>
#include <vector>

#include "cachesteer/rng.hpp"
#include "cachesteer/tensor.hpp"
#include "gradcheck.hpp"

namespace opchecks {

struct OpCheck {
  std::string name;
  std::function<gradcheck::Result(double eps, double guard)> run;
};

inline cachesteer::Tensor rand_param(cachesteer::Rng& rng, std::vector<size_t> shape,
                                     double lo = -2.0, double hi = 2.0) {
  size_t n = 1;
  for (size_t e : shape) n *= e;
  std::vector<cachesteer::real> v(n);
  for (auto& x : v) x = cachesteer::real(rng.uniform(lo, hi));
  return cachesteer::Tensor::param(std::move(shape), std::move(v));
}

inline cachesteer::Tensor rand_const(cachesteer::Rng& rng, std::vector<size_t> shape,
                                     double lo = -1.0, double hi = 1.0) {
  size_t n = 1;
  for (size_t e : shape) n *= e;
  std::vector<cachesteer::real> v(n);
  for (auto& x : v) x = cachesteer::real(rng.uniform(lo, hi));
  return cachesteer::Tensor::constant(std::move(shape), std::move(v));
}

inline cachesteer::Tensor rand_distribution(cachesteer::Rng& rng, size_t n) {
  std::vector<cachesteer::real> v(n);
  cachesteer::real total = 0;
  for (auto& x : v) {
    x = cachesteer::real(rng.uniform(0.05, 1.0));
    total += x;
  }
  for (auto& x : v) x /= total;
  return cachesteer::Tensor::constant({n}, std::move(v));
}

inline std::vector<OpCheck> all_op_checks(uint64_t seed) {
  using namespace cachesteer;
  std::vector<OpCheck> checks;
  auto add_check = [&](std::string name,
                       std::function<gradcheck::Result(double, double)> run) {
    checks.push_back({std::move(name), std::move(run)});
  };

  add_check("matmul", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "matmul"));
    auto a = rand_param(rng, {4, 5});
    auto b = rand_param(rng, {5, 3});
    auto w = rand_const(rng, {4, 3});
    return gradcheck::check([&] { return dot(matmul(a, b), w); }, {a, b}, eps, guard);
  });

  add_check("linear", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "linear"));
    auto x = rand_param(rng, {3, 4});
    auto w = rand_param(rng, {4, 5});
    auto b = rand_param(rng, {5});
    auto wt = rand_const(rng, {3, 5});
    return gradcheck::check([&] { return dot(linear(x, w, b), wt); }, {x, w, b}, eps, guard);
  });

  add_check("linear_vector_input", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "linear-vec"));
    auto x = rand_param(rng, {4});
    auto w = rand_param(rng, {4, 5});
    auto b = rand_param(rng, {5});
    auto wt = rand_const(rng, {5});
    return gradcheck::check([&] { return dot(linear(x, w, b), wt); }, {x, w, b}, eps, guard);
  });

  add_check("layer_norm", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "layer_norm"));
    auto x = rand_param(rng, {3, 6});
    auto g = rand_param(rng, {6}, 0.5, 1.5);
    auto b = rand_param(rng, {6}, -0.5, 0.5);
    auto wt = rand_const(rng, {3, 6});
    return gradcheck::check([&] { return dot(layer_norm(x, g, b), wt); }, {x, g, b}, eps, guard);
  });

  add_check("gelu", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "gelu"));
    auto x = rand_param(rng, {2, 5});
    auto wt = rand_const(rng, {2, 5});
    return gradcheck::check([&] { return dot(gelu(x), wt); }, {x}, eps, guard);
  });

  add_check("softmax_1d", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "softmax1"));
    auto x = rand_param(rng, {7});
    auto wt = rand_const(rng, {7});
    return gradcheck::check([&] { return dot(softmax(x, 0), wt); }, {x}, eps, guard);
  });

  add_check("softmax_mid_axis", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "softmax-mid"));
    auto x = rand_param(rng, {2, 3, 4});
    auto wt = rand_const(rng, {2, 3, 4});
    return gradcheck::check([&] { return dot(softmax(x, 1), wt); }, {x}, eps, guard);
  });

  add_check("add", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "add"));
    auto a = rand_param(rng, {2, 3});
    auto b = rand_param(rng, {2, 3});
    auto wt = rand_const(rng, {2, 3});
    return gradcheck::check([&] { return dot(add(a, b), wt); }, {a, b}, eps, guard);
  });

  add_check("sub", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "sub"));
    auto a = rand_param(rng, {2, 3});
    auto b = rand_param(rng, {2, 3});
    auto wt = rand_const(rng, {2, 3});
    return gradcheck::check([&] { return dot(sub(a, b), wt); }, {a, b}, eps, guard);
  });

  add_check("mul", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "mul"));
    auto a = rand_param(rng, {2, 3});
    auto b = rand_param(rng, {2, 3});
    auto wt = rand_const(rng, {2, 3});
    return gradcheck::check([&] { return dot(mul(a, b), wt); }, {a, b}, eps, guard);
  });

  add_check("scale", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "scale"));
    auto a = rand_param(rng, {6});
    auto wt = rand_const(rng, {6});
    return gradcheck::check([&] { return dot(scale(a, real(-0.7)), wt); }, {a}, eps, guard);
  });

  add_check("mul_scalar", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "mul_scalar"));
    auto a = rand_param(rng, {5});
    auto s = rand_param(rng, {}, 0.3, 1.7);
    auto wt = rand_const(rng, {5});
    return gradcheck::check([&] { return dot(mul_scalar(a, Scalar(s.node)), wt); }, {a, s}, eps,
                            guard);
  });

  add_check("transpose2d", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "transpose"));
    auto a = rand_param(rng, {3, 4});
    auto wt = rand_const(rng, {4, 3});
    return gradcheck::check([&] { return dot(transpose2d(a), wt); }, {a}, eps, guard);
  });

  add_check("embedding_rows", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "embedding"));
    auto table = rand_param(rng, {6, 4});
    std::vector<int> ids{1, 3, 3, 0};
    auto wt = rand_const(rng, {4, 4});
    return gradcheck::check([&] { return dot(embedding_rows(table, ids), wt); }, {table}, eps,
                            guard);
  });

  add_check("index_select", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "index_select"));
    auto x = rand_param(rng, {8});
    std::vector<int> ids{2, 5, 5, 7};
    auto wt = rand_const(rng, {4});
    return gradcheck::check([&] { return dot(index_select(x, ids), wt); }, {x}, eps, guard);
  });

  add_check("row", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "row"));
    auto x = rand_param(rng, {4, 3});
    auto wt = rand_const(rng, {3});
    return gradcheck::check([&] { return dot(row(x, 2), wt); }, {x}, eps, guard);
  });

  add_check("mean_rows", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "mean_rows"));
    auto x = rand_param(rng, {5, 3});
    auto wt = rand_const(rng, {3});
    return gradcheck::check([&] { return dot(mean_rows(x), wt); }, {x}, eps, guard);
  });

  add_check("stack_rows", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "stack_rows"));
    auto a = rand_param(rng, {4});
    auto b = rand_param(rng, {4});
    auto c = rand_param(rng, {4});
    auto wt = rand_const(rng, {3, 4});
    return gradcheck::check([&] { return dot(stack_rows({a, b, c}), wt); }, {a, b, c}, eps,
                            guard);
  });

  add_check("attend_cached", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "attend_cached"));
    auto q = rand_param(rng, {8});
    auto kn = rand_param(rng, {8});
    auto vn = rand_param(rng, {8});
    auto kc = rand_param(rng, {2, 3, 4});
    auto vc = rand_param(rng, {2, 3, 4});
    auto wt = rand_const(rng, {8});
    return gradcheck::check([&] { return dot(attend_cached(q, kc, vc, kn, vn, 2), wt); },
                            {q, kn, vn, kc, vc}, eps, guard);
  });

  add_check("attend_cached_empty_cache", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "attend_cached-empty"));
    auto q = rand_param(rng, {8});
    auto kn = rand_param(rng, {8});
    auto vn = rand_param(rng, {8});
    auto wt = rand_const(rng, {8});
    return gradcheck::check(
        [&] { return dot(attend_cached(q, Tensor(), Tensor(), kn, vn, 2), wt); }, {q, kn, vn},
        eps, guard);
  });

  add_check("attend_causal", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "attend_causal"));
    auto q = rand_param(rng, {4, 8});
    auto k = rand_param(rng, {4, 8});
    auto v = rand_param(rng, {4, 8});
    auto wt = rand_const(rng, {4, 8});
    return gradcheck::check([&] { return dot(attend_causal(q, k, v, 2), wt); }, {q, k, v}, eps,
                            guard);
  });

  add_check("sum", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "sum"));
    auto x = rand_param(rng, {3, 4});
    return gradcheck::check([&] { return sum(x); }, {x}, eps, guard);
  });

  add_check("mean", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "mean"));
    auto x = rand_param(rng, {3, 4});
    return gradcheck::check([&] { return mean(x); }, {x}, eps, guard);
  });

  add_check("dot", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "dot"));
    auto u = rand_param(rng, {6});
    auto v = rand_param(rng, {6});
    return gradcheck::check([&] { return dot(u, v); }, {u, v}, eps, guard);
  });

  add_check("pick", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "pick"));
    auto x = rand_param(rng, {5});
    return gradcheck::check([&] { return pick(x, 3); }, {x}, eps, guard);
  });

  add_check("cosine_similarity", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "cosine"));
    auto u = rand_param(rng, {5}, 0.5, 2.0);
    auto v = rand_param(rng, {5}, -2.0, -0.5);
    return gradcheck::check([&] { return cosine_similarity(u, v); }, {u, v}, eps, guard);
  });

  add_check("cross_entropy", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "cross_entropy"));
    auto logits = rand_param(rng, {6});
    auto target = rand_distribution(rng, 6);
    return gradcheck::check([&] { return cross_entropy(logits, target); }, {logits}, eps, guard);
  });

  add_check("cross_entropy_rows", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "ce_rows"));
    auto logits = rand_param(rng, {3, 5});
    std::vector<int> targets{1, 4, 0};
    return gradcheck::check([&] { return cross_entropy_rows(logits, targets); }, {logits}, eps,
                            guard);
  });

  add_check("scalar_arithmetic", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "scalar-arith"));
    auto ta = rand_param(rng, {}, 0.2, 1.5);
    auto tb = rand_param(rng, {}, 0.2, 1.5);
    return gradcheck::check(
        [&] {
          Scalar a(ta.node), b(tb.node);
          return (a + b) * sub(a, scale(b, real(0.4))) + real(0.3) * a;
        },
        {ta, tb}, eps, guard);
  });

  add_check("scalar_exp", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "scalar-exp"));
    auto ta = rand_param(rng, {}, -1.0, 1.0);
    return gradcheck::check([&] { return exp(scale(Scalar(ta.node), real(0.8))); }, {ta}, eps,
                            guard);
  });

  add_check("neg_log_clamped", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "neg-log"));
    auto tp = rand_param(rng, {}, 0.2, 0.9);
    return gradcheck::check([&] { return neg_log_clamped(Scalar(tp.node)); }, {tp}, eps, guard);
  });

  add_check("two_layer_network", [seed](double eps, double guard) {
    Rng rng(derive_seed(seed, "two-layer"));
    auto x = rand_param(rng, {4}, -1.0, 1.0);
    auto w1 = rand_param(rng, {4, 8}, -0.7, 0.7);
    auto b1 = rand_param(rng, {8}, -0.2, 0.2);
    auto w2 = rand_param(rng, {8, 3}, -0.7, 0.7);
    auto b2 = rand_param(rng, {3}, -0.2, 0.2);
    auto target = rand_distribution(rng, 3);
    return gradcheck::check(
        [&] { return cross_entropy(linear(gelu(linear(x, w1, b1)), w2, b2), target); },
        {x, w1, b1, w2, b2}, eps, guard);
  });

  return checks;
}

}  // namespace opchecks
