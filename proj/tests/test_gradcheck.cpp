#include <doctest.h>

#include "helpers.hpp"
#include "trajdistill/gradcheck.hpp"

using namespace trajdistill;

namespace {

// x^2 elementwise with a deliberately wrong local derivative (3x instead of 2x).
Var broken_square(const Var& x) {
  Tensor v = x.value();
  v.array() = v.array().square();
  return x.graph().record("broken_square", std::move(v), {x},
                          [](const Var& out, const Var& g) {
                            const Var x = out.graph().node(out.id()).parents[0];
                            return std::vector<Var>{mul(g, scale(x, 3.0))};
                          });
}

}  // namespace

TEST_CASE("relative error") {
  const Tensor a({2}, {1, 0}), b({2}, {1, 0});
  CHECK(relative_error(a, b) == 0.0);
  CHECK(relative_error(Tensor({1}, {2.0}), Tensor({1}, {1.0})) == doctest::Approx(0.5));
  CHECK(relative_error(Tensor({1}, {0.0}), Tensor({1}, {0.0})) == 0.0);
}

TEST_CASE("an injected wrong derivative is detected") {
  GradcheckOptions opt;
  opt.include_models = false;
  opt.extra_cases.push_back(OpCase{"broken_square", [](const Var& x) { return sum(broken_square(x)); },
                                   testing::random_tensor({5}, 3), true});
  const GradcheckReport rep = run_gradcheck_suite(opt);
  CHECK_FALSE(rep.passed());
  int failed = 0;
  for (const auto& r : rep.results) {
    if (!r.passed()) {
      ++failed;
      CHECK(r.name.rfind("broken_square", 0) == 0);
    }
  }
  CHECK(failed >= 1);
  CHECK(rep.max_rel_error() > 0.1);
}

TEST_CASE("a correct custom op passes") {
  GradcheckOptions opt;
  opt.include_models = false;
  opt.extra_cases.push_back(OpCase{"cube", [](const Var& x) { return sum(mul(square(x), x)); },
                                   testing::random_tensor({4}, 5), true});
  CHECK(run_gradcheck_suite(opt).passed());
}

TEST_CASE("meta-gradient checks pass for one to three inner steps") {
  for (int steps = 1; steps <= 3; ++steps) {
    const auto res = check_meta_gradient(1e-5, 1e-4, steps);
    REQUIRE(res.size() == 2);
    for (const auto& r : res) {
      INFO(r.name << " steps " << steps << " " << r.rel_error);
      CHECK(r.passed());
    }
  }
}

TEST_CASE("error is stable across finite-difference steps") {
  const double eps[] = {1e-4, 1e-5, 1e-6};
  const EpsSweep s = eps_sweep(eps, 3);
  REQUIRE(s.max_error.size() == 3);
  for (double e : s.max_error) CHECK(e < 1e-4);
  CHECK(s.stable(1e-6));
}
