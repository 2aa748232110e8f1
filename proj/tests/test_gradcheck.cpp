#include <doctest.h>

#include <set>

#include "tokenseg/gradcheck.hpp"
#include "tokenseg/rng.hpp"
#include "tokenseg/tensor.hpp"

using namespace tokenseg;

TEST_CASE("grad_check agrees with the analytic result on a quadratic") {
    Tensor a = Tensor::from({3}, {1, -2, 3}).set_requires_grad(true);
    const GradCheckResult r = grad_check([&] { return sum(mul(a, a)); }, {a});
    CHECK(r.max_rel_err <= real(1e-6));
}

TEST_CASE("grad_check error grows with a coarse step on a curved function") {
    Tensor a = Tensor::from({4}, {0.5, -1.5, 2.0, -0.25}).set_requires_grad(true);
    auto f = [&] { return sum(gelu(a)); };
    const GradCheckResult fine = grad_check(f, {a}, real(1e-5));
    const GradCheckResult coarse = grad_check(f, {a}, real(0.5));
    CHECK(fine.max_rel_err <= real(1e-6));
    CHECK(coarse.max_rel_err > fine.max_rel_err * 100);
}

TEST_CASE("the finite-difference suite passes on a few seeds") {
    const std::vector<FdCase> cases = run_fd_suite({1, 2, 3});
    CHECK(cases.size() >= 18);  // every op plus the composed cases
    std::set<std::string> names;
    for (const FdCase& c : cases) {
        INFO(c.name << " max_rel_err=" << c.max_rel_err);
        CHECK(c.pass);
        CHECK(c.max_rel_err <= real(1e-4));
        names.insert(c.name);
    }
    CHECK(names.size() == cases.size());  // one row per distinct case
    CHECK(names.count("composed_model") == 1);
    CHECK(names.count("composed_tokenmix") == 1);
}
