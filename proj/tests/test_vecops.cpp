#include <cmath>

#include "doctest.h"

#include "bloop/vecops.hpp"
#include "test_util.hpp"

using bloop::ParamVector;
using testutil::TestRand;

TEST_SUITE("vecops") {

TEST_CASE("dot and norm match explicit-loop oracles") {
  TestRand rnd(101);
  for (Eigen::Index dim : {2, 7, 64}) {
    for (int trial = 0; trial < 50; ++trial) {
      const ParamVector a = rnd.vector(dim);
      const ParamVector b = rnd.vector(dim);
      // The two sums accumulate in different orders, so compare against a
      // cancellation-aware bound: error relative to sum |a_i b_i|, not to the
      // (possibly tiny) signed result.
      const double abs_dot = a.cwiseAbs().dot(b.cwiseAbs());
      CHECK(std::fabs(bloop::dot(a, b) - testutil::oracle_dot(a, b)) <=
            1e-13 * abs_dot + 1e-300);
      CHECK(testutil::rel_err(bloop::norm(a), testutil::oracle_norm(a)) < 1e-13);
    }
  }
}

TEST_CASE("scale and axpy are elementwise exact") {
  TestRand rnd(102);
  const ParamVector x = rnd.vector(7);
  const ParamVector y = rnd.vector(7);
  const ParamVector s = bloop::scale(-2.5, x);
  const ParamVector z = bloop::axpy(0.75, x, y);
  for (Eigen::Index i = 0; i < 7; ++i) {
    CHECK(s[i] == -2.5 * x[i]);
    CHECK(z[i] == y[i] + 0.75 * x[i]);
  }
}

TEST_CASE("dimension mismatches are rejected") {
  const ParamVector a = ParamVector::Ones(3);
  const ParamVector b = ParamVector::Ones(4);
  CHECK_THROWS_AS(bloop::dot(a, b), bloop::ContractViolation);
  CHECK_THROWS_AS(bloop::axpy(1.0, a, b), bloop::ContractViolation);
  CHECK_THROWS_AS(bloop::project_orth(a, b), bloop::ContractViolation);
}

TEST_CASE("norm_floor is scale-relative with a unit baseline") {
  CHECK(bloop::norm_floor(0.0) == 1e-12);
  CHECK(bloop::norm_floor(0.5) == 1e-12);
  CHECK(bloop::norm_floor(1.0) == 1e-12);
  CHECK(bloop::norm_floor(2.0) == 2e-12);
  CHECK(bloop::norm_floor(1e6) == 1e-6);
}

TEST_CASE("project_orth output is orthogonal to the axis") {
  TestRand rnd(103);
  for (Eigen::Index dim : {2, 7, 64}) {
    for (int trial = 0; trial < 200; ++trial) {
      const ParamVector a = rnd.nonzero_vector(dim);
      const ParamVector b = rnd.nonzero_vector(dim);
      const ParamVector pi = bloop::project_orth(a, b);
      CHECK(std::fabs(testutil::oracle_dot(pi, b)) <=
            1e-10 * testutil::oracle_norm(a) * testutil::oracle_norm(b));
    }
  }
}

TEST_CASE("project_orth matches the Gram-Schmidt oracle") {
  TestRand rnd(104);
  for (Eigen::Index dim : {2, 7, 64}) {
    for (int trial = 0; trial < 100; ++trial) {
      const ParamVector a = rnd.nonzero_vector(dim);
      const ParamVector b = rnd.nonzero_vector(dim);
      const ParamVector pi = bloop::project_orth(a, b);
      const ParamVector ref = testutil::oracle_reject(a, b);
      // Same formula up to the axis pre-scaling, so only rounding differs.
      // The rejection can cancel catastrophically when a is nearly parallel
      // to b, so compare at the scale of the inputs, not of the output.
      ParamVector diff = pi - ref;
      CHECK(testutil::oracle_norm(diff) <= 1e-12 * testutil::oracle_norm(a));
    }
  }
}

TEST_CASE("removed component is parallel to the axis") {
  TestRand rnd(105);
  for (int trial = 0; trial < 100; ++trial) {
    const ParamVector a = rnd.nonzero_vector(10);
    const ParamVector b = rnd.nonzero_vector(10);
    const ParamVector pi = bloop::project_orth(a, b);
    const ParamVector removed = a - pi;
    // removed should be (a.b/||b||^2) b; check collinearity via the rejection
    // of removed from b being ~0.
    const ParamVector residue = testutil::oracle_reject(removed, b);
    CHECK(testutil::oracle_norm(residue) <= 1e-12 * testutil::oracle_norm(a));
  }
}

TEST_CASE("project_orth is idempotent") {
  TestRand rnd(106);
  for (int trial = 0; trial < 50; ++trial) {
    const ParamVector a = rnd.nonzero_vector(16);
    const ParamVector b = rnd.nonzero_vector(16);
    const ParamVector once = bloop::project_orth(a, b);
    const ParamVector twice = bloop::project_orth(once, b);
    ParamVector diff = twice - once;
    CHECK(testutil::oracle_norm(diff) <= 1e-12 * testutil::oracle_norm(a));
  }
}

TEST_CASE("projection depends only on the direction of the axis") {
  TestRand rnd(107);
  for (int trial = 0; trial < 50; ++trial) {
    const ParamVector a = rnd.nonzero_vector(8);
    const ParamVector b = rnd.nonzero_vector(8);
    const ParamVector pi1 = bloop::project_orth(a, b);
    const ParamVector pi2 = bloop::project_orth(a, ParamVector(3.7 * b));
    ParamVector diff = pi1 - pi2;
    CHECK(testutil::oracle_norm(diff) <= 1e-12 * testutil::oracle_norm(a));
  }
}

TEST_CASE("canonical-axis projections are bit-exact across axis scalings") {
  TestRand rnd(108);
  for (int trial = 0; trial < 50; ++trial) {
    const ParamVector a = rnd.vector(6);
    const Eigen::Index k = trial % 6;
    ParamVector unit = ParamVector::Zero(6);
    unit[k] = 1.0;
    const ParamVector ref = bloop::project_orth(a, unit);
    for (double c : {2.0, 1e-6, 3.5e8, -7.25}) {
      ParamVector axis = ParamVector::Zero(6);
      axis[k] = c;
      CHECK(testutil::bitwise_equal(bloop::project_orth(a, axis), ref));
    }
    // The projection along e_k zeroes that coordinate exactly and leaves the
    // others untouched.
    CHECK(ref[k] == 0.0);
    for (Eigen::Index i = 0; i < 6; ++i) {
      if (i != k) {
        CHECK(ref[i] == a[i]);
      }
    }
  }
}

TEST_CASE("degenerate axis is rejected") {
  const ParamVector a = ParamVector::Ones(4);
  const ParamVector tiny = 1e-14 * ParamVector::Ones(4);
  CHECK_THROWS_AS(bloop::project_orth(a, ParamVector::Zero(4)),
                  bloop::DegenerateProjection);
  CHECK_THROWS_AS(bloop::project_orth(a, tiny), bloop::DegenerateProjection);
  // The floor is relative to ||a||: the same axis is fine when a is smaller.
  const ParamVector small_a = 1e-16 * ParamVector::Ones(4);
  CHECK_THROWS_AS(bloop::project_orth(small_a, tiny),
                  bloop::DegenerateProjection);  // floor never drops below 1e-12
}

TEST_CASE("span2 projection: frozen three-vector example") {
  ParamVector a(3), b1(3), b2(3);
  a << 1, 1, 1;
  b1 << 1, 0, 0;
  b2 << 1, 1, 0;
  const ParamVector out = bloop::project_orth_span2(a, b1, b2);
  CHECK(out[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(out[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(out[2] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("span2 projection is orthogonal to both axes") {
  TestRand rnd(109);
  for (Eigen::Index dim : {3, 10, 64}) {
    for (int trial = 0; trial < 100; ++trial) {
      const ParamVector a = rnd.nonzero_vector(dim);
      const ParamVector b1 = rnd.nonzero_vector(dim);
      const ParamVector b2 = rnd.nonzero_vector(dim);
      const ParamVector out = bloop::project_orth_span2(a, b1, b2);
      const double scale =
          testutil::oracle_norm(a) *
          std::max(testutil::oracle_norm(b1), testutil::oracle_norm(b2));
      CHECK(std::fabs(testutil::oracle_dot(out, b1)) <= 1e-9 * scale);
      CHECK(std::fabs(testutil::oracle_dot(out, b2)) <= 1e-9 * scale);
    }
  }
}

TEST_CASE("span2 collapses when the axes are collinear") {
  TestRand rnd(110);
  const ParamVector a = rnd.nonzero_vector(8);
  const ParamVector b1 = rnd.nonzero_vector(8);
  const ParamVector b2 = -4.0 * b1;
  const ParamVector out = bloop::project_orth_span2(a, b1, b2);
  const ParamVector single = bloop::project_orth(a, b1);
  ParamVector diff = out - single;
  CHECK(testutil::oracle_norm(diff) <= 1e-10 * testutil::oracle_norm(a));
}

TEST_CASE("span2 rejects a degenerate first axis") {
  const ParamVector a = ParamVector::Ones(4);
  CHECK_THROWS_AS(
      bloop::project_orth_span2(a, ParamVector::Zero(4), ParamVector::Ones(4)),
      bloop::DegenerateProjection);
}

}  // TEST_SUITE
