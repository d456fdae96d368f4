// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "dmf/check/gradcheck_suite.hpp"
#include "dmf/check/oracle_suite.hpp"

using namespace dmf;

TEST(OracleSuite, EveryKernelMatchesReference) {
  for (const auto& r : check::run_oracle_suite(20, 123)) {
    EXPECT_GE(r.instances, 20);
    EXPECT_LE(r.max_rel_error, 1e-12) << r.op;
  }
}

class Gradcheck : public ::testing::TestWithParam<std::string> {};

TEST_P(Gradcheck, TapeMatchesCentralDifferences) {
  const auto results = check::run_gradcheck_suite(GetParam(), 29);
  ASSERT_EQ(results.size(), 1u);
  const auto& r = results.front();
  EXPECT_LE(r.rel_error, r.tolerance) << r.name << " worst input " << r.worst;
}

INSTANTIATE_TEST_SUITE_P(Registry, Gradcheck, ::testing::ValuesIn([] {
                           std::vector<std::string> names;
                           for (const auto& c : check::gradcheck_cases()) names.push_back(c.name);
                           return names;
                         }()),
                         [](const auto& info) { return info.param; });
