#include "sbd/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace sbd {

namespace {

double eval_loss(const std::function<Var(Tape&)>& build_loss) {
    Tape t;
    Var loss = build_loss(t);
    if (loss.numel() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
    const double v = loss.value()(0);
    if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss");
    return v;
}

} // namespace

GradCheckReport grad_check(const std::function<Var(Tape&)>& build_loss,
                           const std::vector<Parameter*>& params, double eps) {
    if (!(eps >= 1e-7 && eps <= 1e-3))
        throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");

    for (Parameter* p : params) p->zero_grad();
    {
        Tape t;
        Var loss = build_loss(t);
        if (loss.numel() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
        if (!std::isfinite(loss.value()(0))) throw std::runtime_error("grad_check: non-finite loss");
        t.backward(loss);
    }
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->gradient);

    GradCheckReport rep;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        if (!p->trainable) continue;
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            const double saved = p->value.data[i];
            p->value.data[i] = saved + eps;
            const double up = eval_loss(build_loss);
            p->value.data[i] = saved - eps;
            const double down = eval_loss(build_loss);
            p->value.data[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[pi].data[i];
            const double rel = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
            ++rep.entries_checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = p->name;
                rep.worst_index = static_cast<int64_t>(i);
            }
        }
    }
    for (size_t pi = 0; pi < params.size(); ++pi) params[pi]->gradient = analytic[pi];
    return rep;
}

} // namespace sbd
