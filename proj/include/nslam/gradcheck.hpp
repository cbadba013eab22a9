#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nslam/tape.hpp"

namespace nslam::ad {

// Scalar-valued function under test: receives one leaf Var per input tensor.
using CheckedFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    int checked = 0;
    int failed = 0;
    bool nonfinite = false;
    std::vector<std::string> failures;  // per-element diagnostics, capped

    bool pass() const { return failed == 0 && !nonfinite; }
};

// Compares tape gradients against central finite differences, element by
// element. rel err = |a-b| / max(|a|, |b|, 1e-3); the floor keeps fp64 FD
// noise (~1e-10 absolute) from flagging near-zero gradients.
GradCheckReport gradcheck(const CheckedFn& f, const std::vector<Tensor>& points,
                          double eps = 1e-5, double tol = 1e-4);

}  // namespace nslam::ad
