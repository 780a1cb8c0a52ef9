#include "doctest.h"

#include <cmath>

#include "sbd/autograd.hpp"
#include "sbd/gradcheck.hpp"
#include "sbd/optim.hpp"
#include "sbd/rng.hpp"
#include "sbd/tensor.hpp"

using namespace sbd;

namespace {

Tensor random_tensor(std::vector<int> shape, RngStream& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = scale * rng.normal();
    return t;
}

} // namespace

TEST_SUITE_BEGIN("numerics");

TEST_CASE("softmax: uniform logits, stabilization, closed form") {
    Tensor z = softmax_vec(Tensor::from({3}, {0.0, 0.0, 0.0}));
    for (int i = 0; i < 3; ++i) CHECK(z(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    // huge logit must not overflow
    Tensor big = softmax_vec(Tensor::from({2}, {1000.0, 0.0}));
    CHECK(big.all_finite());
    CHECK(big(0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(big(1) < 1e-300);

    // e^x / sum e^x by hand: [ln 2, 0] -> [2/3, 1/3]
    Tensor lg = softmax_vec(Tensor::from({2}, {std::log(2.0), 0.0}));
    CHECK(lg(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(lg(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("softmax: simplex and shift invariance over random inputs") {
    RngStream rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform_int(0, 6));
        Tensor v = random_tensor({n}, rng, 5.0);
        Tensor s = softmax_vec(v);
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            CHECK(s(i) >= 0.0);
            total += s(i);
        }
        CHECK(std::fabs(total - 1.0) <= 1e-12);

        const double shift = rng.uniform(-50.0, 50.0);
        Tensor vs = v;
        for (double& x : vs.data) x += shift;
        Tensor s2 = softmax_vec(vs);
        for (int i = 0; i < n; ++i) CHECK(std::fabs(s2(i) - s(i)) <= 1e-12);
    }
}

TEST_CASE("softmax: empty axis rejected") {
    Tensor v;
    v.shape = {};
    CHECK_THROWS_WITH_AS(softmax_vec(v), "empty softmax axis", std::invalid_argument);
}

TEST_CASE("gap: constant map, hand mean, loop oracle") {
    Tensor c({4, 3, 3}, 2.75);
    Tensor g = gap_chw(c);
    for (int i = 0; i < 4; ++i) CHECK(g(i) == 2.75);

    Tensor one = Tensor::from({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    CHECK(gap_chw(one)(0) == doctest::Approx(2.5).epsilon(1e-15));

    RngStream rng(7);
    Tensor x = random_tensor({3, 8, 8}, rng);
    Tensor g2 = gap_chw(x);
    for (int ch = 0; ch < 3; ++ch) {
        double s = 0.0;
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) s += x(ch, i, j);
        CHECK(g2(ch) == doctest::Approx(s / 64.0).epsilon(1e-14));
    }
}

TEST_CASE("linear: identity, hand case, matvec oracle, shape errors") {
    Tensor eye = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor zb({2}, 0.0);
    Tensor x = Tensor::from({2}, {3.5, -1.25});
    Tensor y = linear_vec(eye, zb, x);
    CHECK(y(0) == 3.5);
    CHECK(y(1) == -1.25);

    Tensor w1 = Tensor::from({1, 2}, {1.0, 1.0});
    Tensor b1 = Tensor::from({1}, {1.0});
    CHECK(linear_vec(w1, b1, Tensor::from({2}, {2.0, 3.0}))(0) == 6.0);

    RngStream rng(21);
    Tensor w = random_tensor({4, 7}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor v = random_tensor({7}, rng);
    Tensor out = linear_vec(w, b, v);
    for (int o = 0; o < 4; ++o) {
        double s = b(o);
        for (int i = 0; i < 7; ++i) s += w(o, i) * v(i);
        CHECK(out(o) == doctest::Approx(s).epsilon(1e-14));
    }

    CHECK_THROWS_AS(linear_vec(w, b, random_tensor({6}, rng)), std::invalid_argument);
    try {
        linear_vec(w, b, Tensor({6}, 0.0));
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[4,7]") != std::string::npos);
        CHECK(msg.find("[6]") != std::string::npos);
    }
}

TEST_CASE("conv3x3: zero kernel, center-tap kernel, 6-loop oracle") {
    RngStream rng(31);
    Tensor x = random_tensor({2, 5, 5}, rng);

    Tensor wz({3, 2, 3, 3}, 0.0);
    Tensor bz({3}, 0.0);
    Tensor yz = conv3x3(wz, bz, x);
    for (double v : yz.data) CHECK(v == 0.0);

    // center-one kernel sums input channels per output position
    Tensor wc({1, 2, 3, 3}, 0.0);
    wc(0, 0, 1, 1) = 1.0;
    wc(0, 1, 1, 1) = 1.0;
    Tensor yc = conv3x3(wc, Tensor({1}, 0.0), x);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j)
            CHECK(yc(0, i, j) == doctest::Approx(x(0, i, j) + x(1, i, j)).epsilon(1e-15));

    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    Tensor y = conv3x3(w, b, x);
    // independent naive six-loop oracle with explicit zero padding
    for (int oc = 0; oc < 3; ++oc)
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 5; ++j) {
                double s = b(oc);
                for (int ic = 0; ic < 2; ++ic)
                    for (int u = 0; u < 3; ++u)
                        for (int v = 0; v < 3; ++v) {
                            const int r = i + u - 1, c = j + v - 1;
                            if (r < 0 || r >= 5 || c < 0 || c >= 5) continue;
                            s += w(oc, ic, u, v) * x(ic, r, c);
                        }
                CHECK(y(oc, i, j) == doctest::Approx(s).epsilon(1e-13));
            }

    CHECK_THROWS_AS(conv3x3(w, b, random_tensor({3, 5, 5}, rng)), std::invalid_argument);
}

TEST_CASE("multi-head attention: single token, identical keys, 3-token formula oracle") {
    Tape t;
    ParamStore ps;
    const int d = 4;
    RngStream rng(41);

    // hand-set projections: identity-ish weights so the oracle stays explicit
    auto make = [&](const char* name, Tensor init) -> Parameter* { return &ps.add(name, std::move(init), true); };
    Tensor wq = random_tensor({d, d}, rng), wk = random_tensor({d, d}, rng), wv = random_tensor({d, d}, rng);
    Tensor zb({d}, 0.0);
    MhaParams mha{make("wq", wq), make("bq", zb), make("wk", wk), make("bk", zb), make("wv", wv), make("bv", zb)};

    SUBCASE("single token: output equals its value projection") {
        Tensor x = random_tensor({1, d}, rng);
        Var xv = t.constant(x);
        Var out = multi_head_attention(t, mha, xv, xv, xv, 2);
        Tensor expect({1, d});
        for (int o = 0; o < d; ++o) {
            double s = 0.0;
            for (int i = 0; i < d; ++i) s += wv(o, i) * x(0, i);
            expect(0, o) = s;
        }
        for (int o = 0; o < d; ++o) CHECK(out.value()(0, o) == doctest::Approx(expect(0, o)).epsilon(1e-13));
    }

    SUBCASE("identical keys give uniform attention rows") {
        Tensor q = random_tensor({3, d}, rng);
        Tensor krow = random_tensor({1, d}, rng);
        Tensor k({4, d});
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < d; ++c) k(r, c) = krow(0, c);
        Tensor probs = attention_probs(q, k, 2);
        for (int r = 0; r < probs.dim(0); ++r)
            for (int c = 0; c < 4; ++c) CHECK(probs(r, c) == doctest::Approx(0.25).epsilon(1e-12));
    }

    SUBCASE("3 tokens, 1 head: explicit softmax(QK^T/sqrt(d)) V oracle") {
        Tensor x = random_tensor({3, d}, rng);
        Var xv = t.constant(x);
        Var out = multi_head_attention(t, mha, xv, xv, xv, 1);

        // independent oracle: project, form logits, softmax rows, weight values
        auto proj = [&](const Tensor& w) {
            Tensor p({3, d});
            for (int r = 0; r < 3; ++r)
                for (int o = 0; o < d; ++o) {
                    double s = 0.0;
                    for (int i = 0; i < d; ++i) s += w(o, i) * x(r, i);
                    p(r, o) = s;
                }
            return p;
        };
        Tensor q = proj(wq), k = proj(wk), v = proj(wv);
        Tensor expect({3, d});
        for (int i = 0; i < 3; ++i) {
            double logits[3];
            for (int j = 0; j < 3; ++j) {
                double s = 0.0;
                for (int c = 0; c < d; ++c) s += q(i, c) * k(j, c);
                logits[j] = s / std::sqrt(static_cast<double>(d));
            }
            const double mx = std::max({logits[0], logits[1], logits[2]});
            double z = 0.0;
            double p[3];
            for (int j = 0; j < 3; ++j) {
                p[j] = std::exp(logits[j] - mx);
                z += p[j];
            }
            for (int j = 0; j < 3; ++j) p[j] /= z;
            for (int c = 0; c < d; ++c) {
                double s = 0.0;
                for (int j = 0; j < 3; ++j) s += p[j] * v(j, c);
                expect(i, c) = s;
            }
        }
        for (int i = 0; i < 3; ++i)
            for (int c = 0; c < d; ++c)
                CHECK(std::fabs(out.value()(i, c) - expect(i, c)) <= 1e-10);
    }

    SUBCASE("attention rows are simplex vectors; head-divisibility enforced") {
        Tensor q = random_tensor({5, d}, rng, 3.0);
        Tensor k = random_tensor({7, d}, rng, 3.0);
        Tensor probs = attention_probs(q, k, 2);
        for (int r = 0; r < probs.dim(0); ++r) {
            double s = 0.0;
            for (int c = 0; c < 7; ++c) {
                CHECK(probs(r, c) >= 0.0);
                s += probs(r, c);
            }
            CHECK(std::fabs(s - 1.0) <= 1e-9);
        }
        CHECK_THROWS_AS(attention_probs(q, k, 3), std::invalid_argument);
    }
}

TEST_CASE("reproducibility: same inputs and parameters give identical outputs") {
    RngStream rng(55);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor x = random_tensor({3, 8, 8}, rng);
    Tensor y1 = conv3x3(w, b, x);
    Tensor y2 = conv3x3(w, b, x);
    CHECK(y1.data == y2.data);
    Tensor s1 = softmax_vec(gap_chw(y1));
    Tensor s2 = softmax_vec(gap_chw(y2));
    CHECK(s1.data == s2.data);
}

TEST_CASE("grad_check: quadratic and linear losses") {
    ParamStore ps;
    RngStream rng(77);
    Parameter& theta = ps.add("theta", random_tensor({5}, rng), true);

    auto quadratic = [&](Tape& t) {
        Var th = t.param(theta);
        return scale(sum(mul(th, th)), 0.5);
    };
    GradCheckReport rep = grad_check(quadratic, ps.all(), 1e-5);
    CHECK(rep.max_rel_err < 1e-8);
    // analytic gradient of 0.5*||th||^2 is th itself
    for (int i = 0; i < 5; ++i) CHECK(theta.gradient(i) == doctest::Approx(theta.value(i)).epsilon(1e-14));

    auto linear_loss = [&](Tape& t) { return sum(t.param(theta)); };
    GradCheckReport rep2 = grad_check(linear_loss, ps.all(), 1e-5);
    CHECK(rep2.max_rel_err < 1e-8);
    for (int i = 0; i < 5; ++i) CHECK(theta.gradient(i) == 1.0);
}

TEST_CASE("grad_check: eps validation and non-finite loss") {
    ParamStore ps;
    Parameter& p = ps.add("p", Tensor({2}, 1.0), true);
    auto loss = [&](Tape& t) { return sum(t.param(p)); };
    CHECK_THROWS_AS(grad_check(loss, ps.all(), 1e-2), std::invalid_argument);
    CHECK_THROWS_AS(grad_check(loss, ps.all(), 1e-8), std::invalid_argument);

    auto bad = [&](Tape& t) {
        Var v = t.param(p);
        return divide(sum(v), t.constant(Tensor::scalar(0.0)));
    };
    p.value(0) = 1.0;
    CHECK_THROWS_AS(grad_check(bad, ps.all(), 1e-5), std::runtime_error);
}

TEST_CASE("frozen parameter: zero gradient and unchanged value after a step") {
    ParamStore ps;
    RngStream rng(91);
    Parameter& frozen = ps.add("frozen", random_tensor({4}, rng), false);
    Parameter& live = ps.add("live", random_tensor({4}, rng), true);
    const Tensor frozen_before = frozen.value;

    Tape t;
    Var loss = sum(mul(add(t.param(frozen), t.param(live)), add(t.param(frozen), t.param(live))));
    t.backward(loss);

    for (double g : frozen.gradient.data) CHECK(g == 0.0);
    bool live_has_grad = false;
    for (double g : live.gradient.data) live_has_grad = live_has_grad || g != 0.0;
    CHECK(live_has_grad);

    Optimizer opt(Optimizer::Kind::sgd, 0.1);
    opt.step(ps.all());
    CHECK(frozen.value.data == frozen_before.data);
}

TEST_CASE("tensor invariants: data length matches shape; finite checks") {
    Tensor t({2, 3}, 1.0);
    CHECK(t.numel() == 6);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor({0, 3}), std::invalid_argument);
    t(0) = std::nan("");
    CHECK_FALSE(t.all_finite());
    CHECK_THROWS_AS(t.require_finite("test"), std::runtime_error);
}

TEST_SUITE_END();
