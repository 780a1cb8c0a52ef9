#include "doctest.h"

#include <cmath>
#include <functional>

#include "sbd/autograd.hpp"
#include "sbd/gradcheck.hpp"
#include "sbd/rng.hpp"

using namespace sbd;

namespace {

Tensor randt(std::vector<int> shape, RngStream& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = scale * rng.normal();
    return t;
}

// Reduces an op output to a scalar against fixed random weights so every
// output entry influences the loss.
double checked(ParamStore& ps, RngStream& rng, const std::function<Var(Tape&)>& build) {
    Tensor probe;
    auto loss = [&](Tape& t) -> Var {
        Var out = build(t);
        if (probe.data.empty()) probe = randt(out.shape(), rng);
        return weighted_sum(out, probe);
    };
    return grad_check(loss, ps.all(), 1e-5).max_rel_err;
}

} // namespace

TEST_SUITE_BEGIN("autograd_ops");

TEST_CASE("elementwise and scalar ops pass gradient checks") {
    RngStream rng(101);
    ParamStore ps;
    Parameter& a = ps.add("a", randt({3, 4}, rng), true);
    Parameter& b = ps.add("b", randt({3, 4}, rng, 0.7), true);
    // keep divisor away from zero
    for (double& v : b.value.data) v += (v >= 0 ? 1.5 : -1.5);

    CHECK(checked(ps, rng, [&](Tape& t) { return add(t.param(a), t.param(b)); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return sub(t.param(a), t.param(b)); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return mul(t.param(a), t.param(b)); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return divide(t.param(a), t.param(b)); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return scale(t.param(a), -2.5); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return relu(t.param(a)); }) < 1e-4);
    CHECK(checked(ps, rng, [&](Tape& t) { return sigmoid(t.param(a)); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return absval(t.param(a)); }) < 1e-4);
    CHECK(checked(ps, rng, [&](Tape& t) { return minimum(t.param(a), t.param(b)); }) < 1e-4);
    CHECK(checked(ps, rng, [&](Tape& t) { return maximum(t.param(a), t.param(b)); }) < 1e-4);
    CHECK(checked(ps, rng, [&](Tape& t) { return mean(t.param(a)); }) < 1e-6);
}

TEST_CASE("shape ops pass gradient checks") {
    RngStream rng(102);
    ParamStore ps;
    Parameter& a = ps.add("a", randt({3, 4}, rng), true);
    Parameter& v = ps.add("v", randt({5}, rng), true);
    Parameter& u = ps.add("u", randt({3}, rng), true);

    CHECK(checked(ps, rng, [&](Tape& t) { return transpose(t.param(a)); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return reshape(t.param(a), {2, 6}); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return concat({t.param(v), t.param(u)}); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return elem(t.param(v), 3); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return repeat_row(t.param(u), 4); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return gather_rows(t.param(a), {2, 0, 2}); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return slice_row(t.param(a), 1); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return scale_by(t.param(a), elem(t.param(v), 0)); }) < 1e-6);
}

TEST_CASE("linear algebra ops pass gradient checks") {
    RngStream rng(103);
    ParamStore ps;
    Parameter& a = ps.add("a", randt({3, 4}, rng), true);
    Parameter& b = ps.add("b", randt({4, 2}, rng), true);
    Parameter& w = ps.add("w", randt({3, 4}, rng), true);
    Parameter& bias = ps.add("bias", randt({3}, rng), true);
    Parameter& x1 = ps.add("x1", randt({4}, rng), true);
    Parameter& x2 = ps.add("x2", randt({5, 4}, rng), true);

    CHECK(checked(ps, rng, [&](Tape& t) { return matmul(t.param(a), t.param(b)); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return linear(t.param(w), t.param(bias), t.param(x1)); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return linear(t.param(w), t.param(bias), t.param(x2)); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return softmax(t.param(x1)); }) < 1e-5);
}

TEST_CASE("convolution and pooling ops pass gradient checks") {
    RngStream rng(104);
    ParamStore ps;
    Parameter& w3 = ps.add("w3", randt({3, 2, 3, 3}, rng), true);
    Parameter& b3 = ps.add("b3", randt({3}, rng), true);
    Parameter& w1 = ps.add("w1", randt({4, 3}, rng), true);
    Parameter& b1 = ps.add("b1", randt({4}, rng), true);
    Parameter& x = ps.add("x", randt({2, 4, 4}, rng), true);

    CHECK(checked(ps, rng, [&](Tape& t) { return conv3x3(t.param(w3), t.param(b3), t.param(x)); }) < 1e-5);
    CHECK(checked(ps, rng, [&](Tape& t) {
              return conv1x1(t.param(w1), t.param(b1), conv3x3(t.param(w3), t.param(b3), t.param(x)));
          }) < 1e-5);
    CHECK(checked(ps, rng, [&](Tape& t) { return avgpool2(t.param(x)); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return maxpool2(t.param(x)); }) < 1e-4);
    CHECK(checked(ps, rng, [&](Tape& t) { return gap(t.param(x)); }) < 1e-6);
}

TEST_CASE("broadcast multiplies and spatial stats pass gradient checks") {
    RngStream rng(105);
    ParamStore ps;
    Parameter& x = ps.add("x", randt({3, 4, 4}, rng), true);
    Parameter& s = ps.add("s", randt({3}, rng), true);
    Parameter& m = ps.add("m", randt({4, 4}, rng), true);

    CHECK(checked(ps, rng, [&](Tape& t) { return mul_channelwise(t.param(x), t.param(s)); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return mul_spatial(t.param(x), t.param(m)); }) < 1e-6);
    CHECK(checked(ps, rng, [&](Tape& t) { return spatial_stats(t.param(x)); }) < 1e-4);
}

TEST_CASE("loss primitives pass gradient checks") {
    RngStream rng(106);
    ParamStore ps;
    Parameter& logits = ps.add("logits", randt({4, 3}, rng), true);
    Parameter& raw = ps.add("raw", randt({2, 5}, rng), true);

    CHECK(checked(ps, rng, [&](Tape& t) {
              return cross_entropy_rows(t.param(logits), {0, 2, 1, 2});
          }) < 1e-5);

    Tensor targets({2, 5});
    for (double& v : targets.data) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    CHECK(checked(ps, rng, [&](Tape& t) {
              return bce_with_logits_mean(t.param(raw), targets);
          }) < 1e-5);
}

TEST_CASE("attention core and projected attention pass gradient checks") {
    RngStream rng(107);
    ParamStore ps;
    Parameter& q = ps.add("q", randt({3, 4}, rng), true);
    Parameter& k = ps.add("k", randt({5, 4}, rng), true);
    Parameter& v = ps.add("v", randt({5, 4}, rng), true);
    Parameter& wq = ps.add("wq", randt({4, 4}, rng, 0.5), true);
    Parameter& wk = ps.add("wk", randt({4, 4}, rng, 0.5), true);
    Parameter& wv = ps.add("wv", randt({4, 4}, rng, 0.5), true);
    Parameter& bq = ps.add("bq", randt({4}, rng, 0.1), true);
    Parameter& bk = ps.add("bk", randt({4}, rng, 0.1), true);
    Parameter& bv = ps.add("bv", randt({4}, rng, 0.1), true);

    CHECK(checked(ps, rng, [&](Tape& t) {
              return attention_core(t.param(q), t.param(k), t.param(v), 2);
          }) < 1e-4);

    MhaParams mha{&wq, &bq, &wk, &bk, &wv, &bv};
    CHECK(checked(ps, rng, [&](Tape& t) {
              return multi_head_attention(t, mha, t.param(q), t.param(k), t.param(k), 2);
          }) < 1e-4);
}

TEST_CASE("requires_grad gating: constants and frozen params receive nothing") {
    RngStream rng(108);
    ParamStore ps;
    Parameter& frozen = ps.add("frozen", randt({3, 3}, rng), false);
    Parameter& live = ps.add("live", randt({3, 3}, rng), true);

    Tape t;
    Var out = mul(t.param(frozen), t.param(live));
    Var loss = sum(out);
    t.backward(loss);
    for (double g : frozen.gradient.data) CHECK(g == 0.0);
    for (size_t i = 0; i < live.gradient.data.size(); ++i)
        CHECK(live.gradient.data[i] == doctest::Approx(frozen.value.data[i]).epsilon(1e-14));
}

TEST_SUITE_END();
