// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <limits>

#include "mtla/masks.hpp"

using namespace mtla;

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool allowed(const AdditiveMask<double>& m, index_t row1, index_t col1) {
  return m.m(row1 - 1, col1 - 1) == 0.0;
}
}  // namespace

TEST_CASE("causal mask basics") {
  const auto m1 = causal_mask<double>(1);
  CHECK(m1.m.rows() == 1);
  CHECK(m1.m(0, 0) == 0.0);

  const auto m3 = causal_mask<double>(3);
  for (index_t r = 1; r <= 3; ++r)
    for (index_t c = 1; c <= 3; ++c) CHECK(allowed(m3, r, c) == (c <= r));
  CHECK_THROWS_AS(causal_mask<double>(0), ShapeError);
}

TEST_CASE("masked entries are exactly -inf and rows never empty") {
  for (index_t s = 1; s <= 4; ++s) {
    const auto m = stride_aware_causal_mask<double>(9, s);
    for (index_t r = 0; r < 9; ++r) {
      bool any = false;
      for (index_t c = 0; c < 9; ++c) {
        CHECK((m.m(r, c) == 0.0 || m.m(r, c) == kNegInf));
        any = any || m.m(r, c) == 0.0;
      }
      CHECK(any);
    }
  }
}

TEST_CASE("chunk mask: causal within chunk, nothing across") {
  const auto m = chunk_causal_mask<double>(4, 2);
  // rows allow: {1}, {1,2}, {3}, {3,4}
  CHECK(allowed(m, 1, 1));
  CHECK_FALSE(allowed(m, 1, 2));
  CHECK(allowed(m, 2, 1));
  CHECK(allowed(m, 2, 2));
  CHECK_FALSE(allowed(m, 2, 3));
  CHECK(allowed(m, 3, 3));
  CHECK_FALSE(allowed(m, 3, 1));
  CHECK_FALSE(allowed(m, 3, 2));
  CHECK(allowed(m, 4, 3));
  CHECK(allowed(m, 4, 4));
  CHECK_FALSE(allowed(m, 4, 2));
}

TEST_CASE("chunk mask degenerate widths") {
  const auto whole = chunk_causal_mask<double>(5, 7);
  CHECK(whole.m == causal_mask<double>(5).m);
  const auto diag = chunk_causal_mask<double>(5, 1);
  for (index_t r = 1; r <= 5; ++r)
    for (index_t c = 1; c <= 5; ++c) CHECK(allowed(diag, r, c) == (r == c));
  CHECK_THROWS_AS(chunk_causal_mask<double>(4, 0), ConfigError);
}

TEST_CASE("stride-aware mask rule") {
  const auto m = stride_aware_causal_mask<double>(4, 2);
  // rows allow: {1}, {2}, {2,3}, {2,4}
  CHECK(allowed(m, 1, 1));
  CHECK_FALSE(allowed(m, 1, 2));
  CHECK_FALSE(allowed(m, 2, 1));
  CHECK(allowed(m, 2, 2));
  CHECK(allowed(m, 3, 2));
  CHECK(allowed(m, 3, 3));
  CHECK_FALSE(allowed(m, 3, 1));
  CHECK(allowed(m, 4, 2));
  CHECK(allowed(m, 4, 4));
  CHECK_FALSE(allowed(m, 4, 3));
  CHECK_THROWS_AS(stride_aware_causal_mask<double>(4, 0), ConfigError);
  CHECK(stride_aware_causal_mask<double>(1, 3).m(0, 0) == 0.0);
}

TEST_CASE("stride-aware with s=1 equals causal, exhaustively to 64") {
  for (index_t t = 1; t <= 64; ++t)
    CHECK(stride_aware_causal_mask<double>(t, 1).m == causal_mask<double>(t).m);
}

TEST_CASE("stride-aware row m allows ceil(m/s) columns, all chunk ends") {
  for (index_t s = 1; s <= 5; ++s) {
    const index_t t = 37;
    const auto m = stride_aware_causal_mask<double>(t, s);
    for (index_t r = 1; r <= t; ++r) {
      index_t count = 0;
      for (index_t c = 1; c <= t; ++c) {
        if (!allowed(m, r, c)) continue;
        ++count;
        if (c < r) CHECK(c % s == 0);
      }
      CHECK(count == (r + s - 1) / s);
      CHECK(count == 1 + (r - 1) / s);
    }
  }
}

TEST_CASE("single-precision masks use float -inf") {
  const auto m = causal_mask<float>(2);
  CHECK(m.m(0, 1) == -std::numeric_limits<float>::infinity());
}
