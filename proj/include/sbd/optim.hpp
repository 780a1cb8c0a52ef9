#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "sbd/autograd.hpp"

namespace sbd {

/// First-order optimizer over Parameters. Only trainable parameters are ever
/// touched; frozen ones keep their value and their (always-zero) gradient.
class Optimizer {
public:
    enum class Kind { sgd, adam };

    Optimizer(Kind kind, double lr) : kind_(kind), lr_(lr) {}

    static Kind kind_from_string(const std::string& s) {
        if (s == "sgd") return Kind::sgd;
        if (s == "adam") return Kind::adam;
        throw std::invalid_argument("unknown optimizer: " + s);
    }

    void step(const std::vector<Parameter*>& params) {
        ++t_;
        for (Parameter* p : params) {
            if (!p->trainable) continue;
            if (kind_ == Kind::sgd) {
                for (size_t i = 0; i < p->value.data.size(); ++i)
                    p->value.data[i] -= lr_ * p->gradient.data[i];
            } else {
                State& s = state_[p];
                if (s.m.data.empty()) {
                    s.m = Tensor(p->value.shape, 0.0);
                    s.v = Tensor(p->value.shape, 0.0);
                }
                const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
                const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
                const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
                for (size_t i = 0; i < p->value.data.size(); ++i) {
                    const double g = p->gradient.data[i];
                    s.m.data[i] = b1 * s.m.data[i] + (1.0 - b1) * g;
                    s.v.data[i] = b2 * s.v.data[i] + (1.0 - b2) * g * g;
                    const double mhat = s.m.data[i] / bc1;
                    const double vhat = s.v.data[i] / bc2;
                    p->value.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps);
                }
            }
        }
    }

    void zero_grads(const std::vector<Parameter*>& params) {
        for (Parameter* p : params) p->zero_grad();
    }

private:
    struct State {
        Tensor m, v;
    };
    Kind kind_;
    double lr_;
    int64_t t_ = 0;
    std::unordered_map<Parameter*, State> state_;
};

} // namespace sbd
