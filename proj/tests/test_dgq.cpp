#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "sbd/dgq.hpp"
#include "sbd/gradcheck.hpp"
#include "test_util.hpp"

using namespace sbd;
using sbd_test::random_tensor;

TEST_SUITE_BEGIN("dgq");

TEST_CASE("gaussian kernel raw weights: center, edge, corner") {
    double raw[3][3];
    gaussian3x3_raw(1.5, raw);
    CHECK(raw[1][1] == 1.0);
    // exponent |p-c|^2 / (2 sigma^2) at offsets 1 and sqrt(2), sigma = 1.5
    CHECK(std::fabs(raw[0][1] - std::exp(-1.0 / 4.5)) <= 1e-12);
    CHECK(std::fabs(raw[0][0] - std::exp(-2.0 / 4.5)) <= 1e-12);
    CHECK(raw[0][1] == doctest::Approx(0.80074).epsilon(1e-4));
    CHECK(raw[0][0] == doctest::Approx(0.64118).epsilon(1e-4));
    for (int u = 0; u < 3; ++u)
        for (int v = 0; v < 3; ++v) {
            CHECK(raw[u][v] == raw[v][u]);
            CHECK(raw[u][v] == raw[2 - u][2 - v]);
        }
}

TEST_CASE("gt_density: empty, unit mass, boundary clipping, errors") {
    DensityMap empty = gt_density({}, 8, 8, 4.0, 1.5);
    for (double v : empty.grid.data) CHECK(v == 0.0);

    // one interior object: total mass 1, center cell carries the largest value
    DensityMap one = gt_density({{18.0, 10.0}}, 8, 8, 4.0, 1.5);
    double total = 0.0, peak = 0.0;
    for (double v : one.grid.data) {
        total += v;
        peak = std::max(peak, v);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(one.grid(2, 4) == peak); // cell (18/4, 10/4) = (4, 2) as (x, y)

    // corner object: clipped kernel still integrates to 1
    DensityMap corner = gt_density({{0.5, 0.5}}, 8, 8, 4.0, 1.5);
    total = 0.0;
    for (double v : corner.grid.data) total += v;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS_WITH_AS(static_cast<void>(gt_density({{32.0, 1.0}}, 8, 8, 4.0, 1.5)),
                         "gt_density: center (32, 1) outside image 32x32", std::invalid_argument);
}

TEST_CASE("gt_density: mass additivity over disjoint center sets") {
    const std::vector<std::pair<double, double>> a = {{10.0, 10.0}, {50.0, 12.0}};
    const std::vector<std::pair<double, double>> b = {{100.0, 100.0}, {70.0, 60.0}};
    std::vector<std::pair<double, double>> both = a;
    both.insert(both.end(), b.begin(), b.end());
    DensityMap da = gt_density(a, 16, 16, 8.0, 1.5);
    DensityMap db = gt_density(b, 16, 16, 8.0, 1.5);
    DensityMap dab = gt_density(both, 16, 16, 8.0, 1.5);
    // far-apart kernels touch disjoint cells, so the sum is exact bitwise
    for (size_t i = 0; i < dab.grid.data.size(); ++i)
        CHECK(dab.grid.data[i] == da.grid.data[i] + db.grid.data[i]);

    // overlapping sets still add within roundoff
    RngStream rng(3);
    std::vector<std::pair<double, double>> c, d, cd;
    for (int i = 0; i < 20; ++i) c.emplace_back(rng.uniform(2.0, 126.0), rng.uniform(2.0, 126.0));
    for (int i = 0; i < 20; ++i) d.emplace_back(rng.uniform(2.0, 126.0), rng.uniform(2.0, 126.0));
    cd = c;
    cd.insert(cd.end(), d.begin(), d.end());
    DensityMap mc = gt_density(c, 16, 16, 8.0, 1.5), md = gt_density(d, 16, 16, 8.0, 1.5),
               mcd = gt_density(cd, 16, 16, 8.0, 1.5);
    for (size_t i = 0; i < mcd.grid.data.size(); ++i)
        CHECK(std::fabs(mcd.grid.data[i] - (mc.grid.data[i] + md.grid.data[i])) <= 1e-12);
}

TEST_CASE("count round-trip: K interior centers recover exactly K") {
    RngStream rng(5);
    for (long long k : {0LL, 1LL, 7LL, 100LL, 1000LL}) {
        std::vector<std::pair<double, double>> centers;
        for (long long i = 0; i < k; ++i)
            centers.emplace_back(rng.uniform(8.0, 248.0), rng.uniform(8.0, 248.0));
        DensityMap m = gt_density(centers, 64, 64, 4.0, 1.5);
        CHECK(estimate_count(m.grid) == k);
    }
}

TEST_CASE("estimate_count: zero map, half-up rounding, validation") {
    CHECK(estimate_count(Tensor({4, 4}, 0.0)) == 0);
    Tensor half({1, 1}, 10.5);
    CHECK(estimate_count(half) == 11);
    Tensor bad({1, 2}, 0.0);
    bad(0) = -0.25;
    CHECK_THROWS_AS(estimate_count(bad), std::invalid_argument);
}

TEST_CASE("select_tier: canonical boundaries and scaled variants") {
    CHECK(select_tier(0) == 900);
    CHECK(select_tier(10) == 900);
    CHECK(select_tier(11) == 1200);
    CHECK(select_tier(100) == 1200);
    CHECK(select_tier(101) == 1500);
    CHECK(select_tier(500) == 1500);
    CHECK(select_tier(501) == 2000);
    CHECK(select_tier(3058) == 2000);

    const double f = 1.0 / 30.0;
    CHECK(select_tier(0, f) == 30);
    CHECK(select_tier(50, f) == 40);
    CHECK(select_tier(200, f) == 50);
    CHECK(select_tier(1000, f) == 67);

    // monotone over the whole range
    int prev = 0;
    for (long long n = 0; n <= 5000; ++n) {
        const int q = select_tier(n);
        CHECK(q >= prev);
        prev = q;
    }
}

TEST_CASE("sampling: point mass, determinism, empirical law") {
    Tensor point({2, 3}, 0.0);
    point(1, 2) = 4.2;
    RngStream rng(7);
    auto pos = sample_query_positions(point, 50, rng);
    for (const auto& [x, y] : pos) {
        CHECK(x == 2.5);
        CHECK(y == 1.5);
    }

    Tensor weights = Tensor::from({1, 3}, {0.2, 0.3, 0.5});
    RngStream s1(99), s2(99);
    auto a = sample_query_positions(weights, 1000, s1);
    auto b = sample_query_positions(weights, 1000, s2);
    CHECK(a == b);

    RngStream s3(1234);
    auto draws = sample_query_positions(weights, 100000, s3);
    double freq[3] = {0, 0, 0};
    for (const auto& [x, y] : draws) freq[static_cast<int>(x)] += 1.0 / 100000.0;
    CHECK(std::fabs(freq[0] - 0.2) < 0.01);
    CHECK(std::fabs(freq[1] - 0.3) < 0.01);
    CHECK(std::fabs(freq[2] - 0.5) < 0.01);

    // zero mass falls back to uniform cells
    Tensor zero({4, 4}, 0.0);
    RngStream s4(11);
    auto uniform_pos = sample_query_positions(zero, 64, s4);
    CHECK(uniform_pos.size() == 64);
    for (const auto& [x, y] : uniform_pos) {
        CHECK(x < 4.0);
        CHECK(y < 4.0);
    }

    Tensor negative({1, 2}, 0.0);
    negative(1) = -1.0;
    RngStream s5(12);
    CHECK_THROWS_AS(static_cast<void>(sample_query_positions(negative, 1, s5)), std::logic_error);
}

TEST_CASE("density head: zero features give a zero map; outputs stay non-negative") {
    ParamStore store;
    RngStream rng(13);
    DensityHeadParams head = make_density_head(store, 8, 4, rng);
    std::fill(head.conv_b->value.data.begin(), head.conv_b->value.data.end(), 0.0);
    std::fill(head.proj_b->value.data.begin(), head.proj_b->value.data.end(), 0.0);

    Tape t;
    Var zero = t.constant(Tensor({8, 6, 6}, 0.0));
    Var pred = predict_density(t, head, zero);
    CHECK(pred.shape() == std::vector<int>{6, 6});
    for (double v : pred.value().data) CHECK(v == 0.0);

    for (int trial = 0; trial < 100; ++trial) {
        Tape t2;
        Var x = t2.constant(random_tensor({8, 6, 6}, rng, 2.0));
        Var p = predict_density(t2, head, x);
        for (double v : p.value().data) CHECK(v >= 0.0);
    }
}

TEST_CASE("density head: fixed seed pins the predicted map") {
    ParamStore store;
    RngStream rng(substream_seed(1, "init/density"));
    DensityHeadParams head = make_density_head(store, 8, 4, rng);
    Tape t;
    RngStream irng(substream_seed(1, "fixture/density-input"));
    Var x = t.constant(random_tensor({8, 6, 6}, irng));
    Var pred = predict_density(t, head, x);
    double checksum = 0.0;
    for (double v : pred.value().data) checksum += v;
    CHECK(checksum == doctest::Approx(5.4963272418811364).epsilon(1e-9));
}

TEST_CASE("density loss: zero cases, positive BCE floor, spreadsheet oracle") {
    ParamStore store;
    Tape t;

    Var zero_pred = t.constant(Tensor({2, 2}, 0.0));
    Var l0 = density_loss(t, zero_pred, Tensor({2, 2}, 0.0), 0.0);
    CHECK(l0.value()(0) == 0.0); // MSE term 0, lambda 0

    // identical non-zero maps: MSE 0, BCE positive and finite
    Tensor gt = Tensor::from({2, 2}, {1.0, 0.0, 0.5, 0.0});
    Var pred_eq = t.constant(gt);
    Var l1 = density_loss(t, pred_eq, gt, 1.0);
    CHECK(l1.value()(0) > 0.0);
    CHECK(std::isfinite(l1.value()(0)));

    // hand-built 2x2 case against an explicit spreadsheet-style computation
    Tensor pred = Tensor::from({2, 2}, {0.6, 0.1, 1.4, 0.0});
    Tensor gt2 = Tensor::from({2, 2}, {1.0, 0.0, 1.0, 0.0});
    const double lambda = 0.25;
    Var l2 = density_loss(t, t.constant(pred), gt2, lambda);
    double mse = 0.0;
    for (int i = 0; i < 4; ++i) {
        const double d = pred.data[static_cast<size_t>(i)] - gt2.data[static_cast<size_t>(i)];
        mse += d * d;
    }
    // occupancy targets 1 where gt mass, else 0; prediction squashed by sigmoid
    auto term = [](double x, double y) {
        const double p = 1.0 / (1.0 + std::exp(-x));
        return y > 0.5 ? -std::log(p) : -std::log(1.0 - p);
    };
    const double bce = (term(0.6, 1) + term(0.1, 0) + term(1.4, 1) + term(0.0, 0)) / 4.0;
    CHECK(l2.value()(0) == doctest::Approx(mse + lambda * bce).epsilon(1e-12));

    CHECK_THROWS_AS(static_cast<void>(density_loss(t, t.constant(pred), Tensor({3, 3}, 0.0), 1.0)),
                    std::invalid_argument);
}

TEST_CASE("query contents: shared embedding plus positional encoding, deterministic") {
    ParamStore store;
    RngStream rng(17);
    Parameter& embed = store.add("embed", random_tensor({8}, rng));
    DensityMap pred;
    pred.grid = Tensor({4, 4}, 0.0);
    pred.grid(1, 1) = 2.0;
    pred.grid(2, 3) = 1.0;
    pred.cell_size = 8.0;

    Tape t;
    RngStream draw1(23), draw2(23);
    QuerySet a = sample_queries(t, embed, pred, 12, draw1);
    QuerySet b = sample_queries(t, embed, pred, 12, draw2);
    CHECK(a.positions == b.positions);
    CHECK(a.contents.value().data == b.contents.value().data);
    CHECK(a.contents.shape() == std::vector<int>{12, 8});
    CHECK(static_cast<int>(a.positions.size()) == 12);

    Tensor pe = positional_encoding(a.positions, 8, 4, 4);
    for (int n = 0; n < 12; ++n)
        for (int d = 0; d < 8; ++d)
            CHECK(a.contents.value()(n, d) ==
                  doctest::Approx(embed.value(d) + pe(n, d)).epsilon(1e-15));
}

TEST_CASE("cbam: neutral response at zero init, strict contraction, density bias wiring") {
    ParamStore store;
    RngStream rng(19);
    CbamParams cbam = make_cbam(store, 8, 2, rng);
    // zero-initialized attention: all squashes sit at 1/2
    for (Parameter* p : store.all())
        std::fill(p->value.data.begin(), p->value.data.end(), 0.0);

    Tape t;
    Tensor x = random_tensor({8, 4, 4}, rng);
    Var out = cbam_refine(t, cbam, t.constant(x), t.constant(Tensor({4, 4}, 0.0)));
    for (size_t i = 0; i < x.data.size(); ++i)
        CHECK(out.value().data[i] == doctest::Approx(0.25 * x.data[i]).epsilon(1e-12));

    // random parameters: attention scales lie in (0,1), so |out| < |x| off zeros
    ParamStore store2;
    CbamParams cbam2 = make_cbam(store2, 8, 2, rng);
    Tape t2;
    Var out2 = cbam_refine(t2, cbam2, t2.constant(x), t2.constant(random_tensor({4, 4}, rng)));
    for (size_t i = 0; i < x.data.size(); ++i) {
        if (x.data[i] == 0.0) continue;
        CHECK(std::fabs(out2.value().data[i]) < std::fabs(x.data[i]));
        CHECK(out2.value().data[i] * x.data[i] > 0.0); // same sign: scales are positive
    }
}

TEST_CASE("cbam: fixed seed pins the refined map") {
    ParamStore store;
    RngStream rng(substream_seed(1, "init/cbam"));
    CbamParams cbam = make_cbam(store, 8, 2, rng);
    RngStream irng(substream_seed(1, "fixture/cbam-input"));
    Tensor x = random_tensor({8, 4, 4}, irng);
    Tensor d = random_tensor({4, 4}, irng);
    for (double& v : d.data) v = std::fabs(v);
    Tape t;
    Var out = cbam_refine(t, cbam, t.constant(x), t.constant(d));
    double checksum = 0.0;
    for (double v : out.value().data) checksum += v;
    CHECK(checksum == doctest::Approx(0.13918832458493277).epsilon(1e-9));
}

TEST_CASE("density pipeline passes the gradient oracle") {
    ParamStore store;
    RngStream rng(29);
    DensityHeadParams head = make_density_head(store, 4, 3, rng);
    CbamParams cbam = make_cbam(store, 4, 2, rng);
    Tensor features = random_tensor({4, 4, 4}, rng);
    Tensor gt_grid = gt_density({{9.0, 9.0}, {20.0, 25.0}}, 4, 4, 8.0, 1.5).grid;

    Tensor probe;
    RngStream prng(31);
    auto loss = [&](Tape& t) -> Var {
        Var f = t.constant(features);
        Var pred = predict_density(t, head, f);
        Var dens = density_loss(t, pred, gt_grid, 0.1);
        Var refined = cbam_refine(t, cbam, f, pred);
        if (probe.data.empty()) probe = random_tensor(refined.shape(), prng);
        return add(dens, weighted_sum(refined, probe));
    };
    GradCheckReport rep = grad_check(loss, store.all(), 1e-5);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("density map text export round-trips") {
    DensityMap m = gt_density({{10.0, 20.0}, {40.0, 40.0}, {63.9, 0.1}}, 8, 8, 8.0, 1.5);
    const std::string path = "density_roundtrip.txt";
    save_density(m, path);
    DensityMap back = load_density(path);
    CHECK(back.cell_size == m.cell_size);
    CHECK(back.grid.shape == m.grid.shape);
    for (size_t i = 0; i < m.grid.data.size(); ++i) CHECK(back.grid.data[i] == m.grid.data[i]);

    // truncated file is a parse error
    {
        std::FILE* f = std::fopen("density_truncated.txt", "w");
        std::fputs("8 8 8.0\n0.5 0.25\n", f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(static_cast<void>(load_density("density_truncated.txt")), std::runtime_error);
    std::remove(path.c_str());
    std::remove("density_truncated.txt");
}

TEST_SUITE_END();
