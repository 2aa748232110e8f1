#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tokenseg/tensor.hpp"

namespace tokenseg {

struct GradCheckResult {
    real max_rel_err = 0;
    std::string worst;  // "<leaf index>[<element>]" of the worst disagreement
};

// Compares backward grads of the scalar f() against central finite
// differences over every element of every leaf. f must rebuild its graph
// from the leaves' current values on each call. Error metric:
// |a - n| / max(|a|, |n|, 1e-3); the floor keeps finite-difference noise on
// near-zero gradients from registering as relative error.
GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves,
                           real h = real(1e-5));

struct FdCase {
    std::string name;
    real max_rel_err = 0;
    bool pass = false;
};

// The full finite-difference suite: one case per differentiable op plus the
// composed segmenter loss on a toy model, each repeated over the given
// seeds. Worst error per case is reported against the given tolerance.
std::vector<FdCase> run_fd_suite(const std::vector<uint64_t>& seeds, real tol = real(1e-4),
                                 real h = real(1e-5));

}  // namespace tokenseg
