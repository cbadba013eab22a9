#include "nslam/gradcheck.hpp"

#include <cmath>
#include <sstream>

namespace nslam::ad {

namespace {

real eval_value(const CheckedFn& f, const std::vector<Tensor>& points) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(points.size());
    for (const Tensor& p : points) vars.push_back(tape.leaf(p));
    Var out = f(tape, vars);
    if (out.value().numel() != 1)
        throw std::invalid_argument("gradcheck: function under test must be scalar-valued");
    return out.value()[0];
}

}  // namespace

GradCheckReport gradcheck(const CheckedFn& f, const std::vector<Tensor>& points,
                          double eps, double tol) {
    GradCheckReport report;

    // Analytic gradients from one taped evaluation.
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(points.size());
    for (const Tensor& p : points) vars.push_back(tape.leaf(p));
    Var out = f(tape, vars);
    if (out.value().numel() != 1)
        throw std::invalid_argument("gradcheck: function under test must be scalar-valued");
    tape.backward(out);

    std::vector<Tensor> analytic;
    analytic.reserve(points.size());
    for (size_t i = 0; i < points.size(); ++i) {
        const Tensor& g = tape.grad(vars[i]);
        analytic.push_back(g.data.empty() ? Tensor(points[i].shape, 0.0) : g);
    }

    for (size_t pi = 0; pi < points.size(); ++pi) {
        std::vector<Tensor> work = points;
        for (int i = 0; i < points[pi].numel(); ++i) {
            real orig = work[pi][i];
            work[pi][i] = orig + eps;
            real fp = eval_value(f, work);
            work[pi][i] = orig - eps;
            real fm = eval_value(f, work);
            work[pi][i] = orig;

            real fd = (fp - fm) / (2.0 * eps);
            real an = analytic[pi][i];
            ++report.checked;

            if (!std::isfinite(fd) || !std::isfinite(an)) {
                report.nonfinite = true;
                ++report.failed;
                if (report.failures.size() < 16) {
                    std::ostringstream os;
                    os << "input " << pi << " elem " << i << ": non-finite (tape=" << an
                       << ", fd=" << fd << ")";
                    report.failures.push_back(os.str());
                }
                continue;
            }
            real denom = std::max({std::fabs(an), std::fabs(fd), 1e-3});
            real rel = std::fabs(an - fd) / denom;
            report.max_rel_err = std::max(report.max_rel_err, rel);
            if (rel > tol) {
                ++report.failed;
                if (report.failures.size() < 16) {
                    std::ostringstream os;
                    os << "input " << pi << " elem " << i << ": tape=" << an << " fd=" << fd
                       << " rel=" << rel;
                    report.failures.push_back(os.str());
                }
            }
        }
    }
    return report;
}

}  // namespace nslam::ad
