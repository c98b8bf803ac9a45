#include <gtest/gtest.h>

#include "fd_suite.hpp"

// Every differentiable primitive and composed layer against central finite
// differences: 20 seeded cases each, relative error < 1e-4.
TEST(Gradients, FiniteDifferenceSuite) {
  const auto results = fdsuite::run_suite(20);
  ASSERT_FALSE(results.empty());
  for (const auto& r : results) {
    EXPECT_LT(r.max_rel_err, fdsuite::kTolerance) << "primitive: " << r.name;
  }
}
