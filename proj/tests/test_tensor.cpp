#include <doctest.h>

#include "aspf/ops.hpp"
#include "aspf/rng.hpp"
#include "aspf/tensor.hpp"

using namespace aspf;

TEST_CASE("tensor construction and accessors") {
  TensorF t({2, 3}, 1.5f);
  CHECK(t.rank() == 2);
  CHECK(t.size() == 6);
  CHECK(t.dim(1) == 3);
  CHECK(t[5] == 1.5f);
  CHECK(shape_string(t.shape()) == "(2,3)");
  CHECK_THROWS_AS(TensorF({2, 0}), Error);
  CHECK_THROWS_AS(TensorF({2, 2}, std::vector<float>{1, 2, 3}), Error);
  CHECK_THROWS_AS(t.item(), Error);
  CHECK(TensorF({1}, 4.0f).item() == 4.0f);
}

TEST_CASE("copies share storage, clones do not") {
  TensorD a({3}, 1.0);
  TensorD b = a;
  b.values()[0] = 9;
  CHECK(a[0] == 9);
  CHECK(a.same_storage(b));
  TensorD c = a.clone();
  c.values()[1] = 7;
  CHECK(a[1] == 1);
  CHECK_FALSE(a.same_storage(c));
}

TEST_CASE("gradient buffers are lazy and zero_grad clears them") {
  TensorD a({2}, 1.0);
  CHECK_FALSE(a.has_grad());
  a.grad_buffer()[1] = 3;
  CHECK(a.grad()[0] == 0);
  CHECK(a.grad()[1] == 3);
  a.zero_grad();
  CHECK_FALSE(a.has_grad());
}

TEST_CASE("cast preserves values and all_finite spots NaN") {
  TensorD a({2}, std::vector<double>{0.5, -2});
  CHECK(a.cast<float>().vector() == std::vector<float>{0.5f, -2.0f});
  a.values()[0] = std::nan("");
  CHECK_FALSE(a.all_finite());
}

TEST_CASE("tape backward contract") {
  SUBCASE("second backward raises kTapeConsumed") {
    Tape<double> tape;
    TensorD x({1}, 2.0);
    x.set_requires_grad();
    const auto y = mul(tape, x, x);
    tape.backward(y);
    CHECK(x.grad()[0] == 4.0);
    try {
      tape.backward(y);
      FAIL("expected kTapeConsumed");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kTapeConsumed);
    }
    CHECK_THROWS_AS(add(tape, x, x), Error);
  }
  SUBCASE("non-scalar loss raises kNotScalar") {
    Tape<double> tape;
    TensorD x({2}, 1.0);
    x.set_requires_grad();
    const auto y = add(tape, x, x);
    try {
      tape.backward(y);
      FAIL("expected kNotScalar");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kNotScalar);
    }
  }
  SUBCASE("empty tape is rejected") {
    Tape<double> tape;
    CHECK_THROWS_AS(tape.backward(TensorD({1}, 1.0)), Error);
  }
  SUBCASE("untracked inputs get no gradient") {
    Tape<double> tape;
    TensorD x({1}, 2.0), c({1}, 3.0);
    x.set_requires_grad();
    tape.backward(mul(tape, x, c));
    CHECK(x.grad()[0] == 3.0);
    CHECK_FALSE(c.has_grad());
  }
}

TEST_CASE("rng is reproducible and in range") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    const double u = a.uniform();
    CHECK(u == b.uniform());
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(a.below(7) == b.below(7));
  }
  std::vector<int> v{1, 2, 3, 4, 5};
  Rng c(1);
  c.shuffle(v.begin(), v.end());
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>{1, 2, 3, 4, 5});
}

TEST_CASE("error messages carry the code name") {
  const Error e(ErrorCode::kBadMagic, "xyz");
  CHECK(std::string(e.what()) == "bad magic: xyz");
  CHECK(e.code() == ErrorCode::kBadMagic);
}
