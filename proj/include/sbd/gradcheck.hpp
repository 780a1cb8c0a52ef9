#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sbd/autograd.hpp"

namespace sbd {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
    int64_t entries_checked = 0;
};

/// Compares analytic gradients against central differences
/// (L(th+eps) - L(th-eps)) / (2 eps) for every entry of every trainable
/// parameter. build_loss must construct the scalar loss on a fresh tape from
/// the parameters' current values; it is re-evaluated twice per entry and
/// stays independent of whatever backward rules produced the analytic side.
/// Relative error uses a 1e-8 denominator floor. Throws on non-finite loss
/// or eps outside [1e-7, 1e-3].
GradCheckReport grad_check(const std::function<Var(Tape&)>& build_loss,
                           const std::vector<Parameter*>& params, double eps);

} // namespace sbd
