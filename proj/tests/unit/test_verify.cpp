#include <gtest/gtest.h>

#include "peftprof/verify.hpp"

using namespace peftprof;

TEST(Verify, AllSuitesPass) {
    VerifyOptions o;
    o.graphs = 8;
    VerifySummary v = run_verify(o);
    ASSERT_EQ(v.suites.size(), 5u);
    for (const auto& s : v.suites) {
        EXPECT_TRUE(s.passed) << s.name << ": " << s.detail;
        EXPECT_GT(s.checks, 0) << s.name;
    }
}

TEST(Verify, FlopsParityCatchesWrongAdamConstant) {
    VerifyOptions o;
    o.graphs = 3;
    o.adam_per_element = 13;
    SuiteResult s = verify_flops_parity(o);
    EXPECT_FALSE(s.passed);
    EXPECT_NE(s.detail.find("opt"), std::string::npos);
}

TEST(Verify, GradientSuiteEnforcesTolerance) {
    VerifyOptions o;
    o.graphs = 4;
    o.fd_tolerance = 1e-14;
    EXPECT_FALSE(verify_gradients(o).passed);
}

TEST(Verify, ConventionSuite) { EXPECT_TRUE(verify_conventions().passed); }

// A thin squeeze-excite layer under DoRA is curved enough that the step-1e-3
// central difference misses by more than 1e-4; the miss shrinks as eps^2.
TEST(Verify, DoraThinLayerMissIsTruncation) {
    auto tc = detail::toy_case(1012, 2);
    Executable ex = make_executable(tc.graph, detail::toy_config(Method::dora, 2), 12);
    randomize_adapters(ex, 12);
    const double coarse = gradient_check(ex, tc.input, tc.labels, 1e-3, 64, 12).max_rel_error;
    const double fine = gradient_check(ex, tc.input, tc.labels, 1e-4, 64, 12).max_rel_error;
    EXPECT_GT(coarse, 1e-4);
    EXPECT_LT(fine, 1e-5);
    EXPECT_NEAR(coarse / fine, 100.0, 5.0);
}
