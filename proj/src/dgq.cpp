#include "sbd/dgq.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sbd {

void gaussian3x3_raw(double sigma, double out[3][3]) {
    const double denom = 2.0 * sigma * sigma;
    for (int u = -1; u <= 1; ++u)
        for (int v = -1; v <= 1; ++v) out[u + 1][v + 1] = std::exp(-(u * u + v * v) / denom);
}

DensityMap gt_density(const std::vector<std::pair<double, double>>& centers_px, int grid_h, int grid_w,
                      double cell_size, double sigma) {
    if (grid_h < 1 || grid_w < 1 || cell_size <= 0.0)
        throw std::invalid_argument("gt_density: invalid grid");
    DensityMap map;
    map.grid = Tensor({grid_h, grid_w}, 0.0);
    map.cell_size = cell_size;

    double raw[3][3];
    gaussian3x3_raw(sigma, raw);

    const double img_h = grid_h * cell_size, img_w = grid_w * cell_size;
    for (const auto& [x, y] : centers_px) {
        if (!(x >= 0.0 && x < img_w && y >= 0.0 && y < img_h)) {
            std::ostringstream os;
            os << "gt_density: center (" << x << ", " << y << ") outside image " << img_w << "x" << img_h;
            throw std::invalid_argument(os.str());
        }
        const int cx = std::min(grid_w - 1, static_cast<int>(x / cell_size));
        const int cy = std::min(grid_h - 1, static_cast<int>(y / cell_size));
        double mass = 0.0;
        for (int u = -1; u <= 1; ++u)
            for (int v = -1; v <= 1; ++v) {
                const int r = cy + u, c = cx + v;
                if (r < 0 || r >= grid_h || c < 0 || c >= grid_w) continue;
                mass += raw[u + 1][v + 1];
            }
        for (int u = -1; u <= 1; ++u)
            for (int v = -1; v <= 1; ++v) {
                const int r = cy + u, c = cx + v;
                if (r < 0 || r >= grid_h || c < 0 || c >= grid_w) continue;
                map.grid(r, c) += raw[u + 1][v + 1] / mass;
            }
    }
    return map;
}

DensityHeadParams make_density_head(ParamStore& store, int in_channels, int mid_channels, RngStream& rng) {
    DensityHeadParams p;
    const double s3 = std::sqrt(2.0 / (in_channels * 9));
    Tensor cw({mid_channels, in_channels, 3, 3});
    for (double& v : cw.data) v = s3 * rng.normal();
    p.conv_w = &store.add("density.conv_w", std::move(cw));
    p.conv_b = &store.add("density.conv_b", Tensor({mid_channels}, 0.01));
    const double s1 = std::sqrt(2.0 / mid_channels);
    Tensor pw({1, mid_channels});
    for (double& v : pw.data) v = s1 * rng.normal();
    p.proj_w = &store.add("density.proj_w", std::move(pw));
    p.proj_b = &store.add("density.proj_b", Tensor({1}, 0.01));
    return p;
}

Var predict_density(Tape& t, const DensityHeadParams& p, Var final_map) {
    Var mid = relu(conv3x3(t.param(*p.conv_w), t.param(*p.conv_b), final_map));
    Var raw = conv1x1(t.param(*p.proj_w), t.param(*p.proj_b), mid); // [1,H,W]
    const Tensor& m = raw.value();
    return relu(reshape(raw, {m.dim(1), m.dim(2)}));
}

Var density_loss(Tape& t, Var pred, const Tensor& gt, double lambda_cls) {
    if (!pred.value().same_shape(gt))
        throw std::invalid_argument("density_loss: prediction " + pred.value().shape_str() +
                                    " vs ground truth " + gt.shape_str());
    Var diff = sub(pred, t.constant(gt));
    Var mse = sum(mul(diff, diff));
    Tensor occupancy(gt.shape, 0.0);
    for (size_t i = 0; i < gt.data.size(); ++i) occupancy.data[i] = gt.data[i] > 0.0 ? 1.0 : 0.0;
    Var bce = bce_with_logits_mean(pred, std::move(occupancy));
    return add(mse, scale(bce, lambda_cls));
}

long long estimate_count(const Tensor& grid) {
    double total = 0.0;
    for (double v : grid.data) {
        if (!std::isfinite(v) || v < 0.0)
            throw std::invalid_argument("estimate_count: map must be finite and non-negative");
        total += v;
    }
    return static_cast<long long>(std::floor(total + 0.5)); // half-up
}

int select_tier(long long n, double tier_factor) {
    if (n < 0) throw std::invalid_argument("select_tier: negative count");
    if (tier_factor <= 0.0) throw std::invalid_argument("select_tier: tier factor must be positive");
    int canonical = 2000;
    if (n <= 10)
        canonical = 900;
    else if (n <= 100)
        canonical = 1200;
    else if (n <= 500)
        canonical = 1500;
    const double scaled = canonical * tier_factor;
    return std::max(1, static_cast<int>(std::floor(scaled + 0.5)));
}

std::vector<std::pair<double, double>> sample_query_positions(const Tensor& grid, int num_queries,
                                                              RngStream& rng) {
    if (grid.rank() != 2) throw std::invalid_argument("sample_query_positions expects a 2-D grid");
    if (num_queries < 0) throw std::invalid_argument("sample_query_positions: negative count");
    const int h = grid.dim(0), w = grid.dim(1);
    std::vector<double> cumulative(grid.data.size());
    double total = 0.0;
    for (size_t i = 0; i < grid.data.size(); ++i) {
        if (grid.data[i] < 0.0) throw std::logic_error("sample_query_positions: negative density cell");
        total += grid.data[i];
        cumulative[i] = total;
    }

    std::vector<std::pair<double, double>> out;
    out.reserve(static_cast<size_t>(num_queries));
    for (int q = 0; q < num_queries; ++q) {
        size_t cell = 0;
        if (total > 0.0) {
            const double u = rng.uniform() * total;
            // first cell whose cumulative mass exceeds u
            size_t lo = 0, hi = cumulative.size() - 1;
            while (lo < hi) {
                const size_t mid = (lo + hi) / 2;
                if (cumulative[mid] > u)
                    hi = mid;
                else
                    lo = mid + 1;
            }
            cell = lo;
        } else {
            cell = static_cast<size_t>(rng.uniform_int(0, static_cast<long long>(grid.data.size()) - 1));
        }
        const int row = static_cast<int>(cell) / w;
        const int col = static_cast<int>(cell) % w;
        out.emplace_back(col + 0.5, row + 0.5);
    }
    return out;
}

Tensor positional_encoding(const std::vector<std::pair<double, double>>& positions, int dim, int grid_h,
                           int grid_w) {
    if (dim % 4 != 0) throw std::invalid_argument("positional_encoding: dim must be a multiple of 4");
    const int quarter = dim / 4;
    Tensor pe({static_cast<int>(positions.size()), dim});
    for (size_t n = 0; n < positions.size(); ++n) {
        const double x = positions[n].first / grid_w;
        const double y = positions[n].second / grid_h;
        for (int k = 0; k < quarter; ++k) {
            const double freq = std::pow(10000.0, -static_cast<double>(k) / quarter) * 6.283185307179586;
            pe(static_cast<int>(n), 4 * k + 0) = std::sin(freq * x);
            pe(static_cast<int>(n), 4 * k + 1) = std::cos(freq * x);
            pe(static_cast<int>(n), 4 * k + 2) = std::sin(freq * y);
            pe(static_cast<int>(n), 4 * k + 3) = std::cos(freq * y);
        }
    }
    return pe;
}

QuerySet sample_queries(Tape& t, Parameter& content_embed, const DensityMap& pred, int num_queries,
                        RngStream& rng) {
    QuerySet qs;
    qs.positions = sample_query_positions(pred.grid, num_queries, rng);
    const int dim = content_embed.value.dim(0);
    Tensor pe = positional_encoding(qs.positions, dim, pred.grid.dim(0), pred.grid.dim(1));
    qs.contents = add(repeat_row(t.param(content_embed), num_queries), t.constant(std::move(pe)));
    return qs;
}

CbamParams make_cbam(ParamStore& store, int channels, int reduced, RngStream& rng) {
    CbamParams p;
    auto init = [&](const char* name, std::vector<int> shape, int fan_in) -> Parameter* {
        Tensor w(std::move(shape));
        const double s = std::sqrt(2.0 / fan_in);
        for (double& v : w.data) v = s * rng.normal();
        return &store.add(name, std::move(w));
    };
    p.fc1_w = init("cbam.fc1_w", {reduced, channels}, channels);
    p.fc1_b = &store.add("cbam.fc1_b", Tensor({reduced}, 0.0));
    p.fc2_w = init("cbam.fc2_w", {channels, reduced}, reduced);
    p.fc2_b = &store.add("cbam.fc2_b", Tensor({channels}, 0.0));
    p.sp_w = init("cbam.sp_w", {1, 2, 3, 3}, 18);
    p.sp_b = &store.add("cbam.sp_b", Tensor({1}, 0.0));
    return p;
}

Var cbam_refine(Tape& t, const CbamParams& p, Var features, Var density) {
    const Tensor& f = features.value();
    if (f.rank() != 3) throw std::invalid_argument("cbam_refine expects [C,H,W], got " + f.shape_str());
    if (density.value().rank() != 2 || density.value().dim(0) != f.dim(1) ||
        density.value().dim(1) != f.dim(2))
        throw std::invalid_argument("cbam_refine: density " + density.value().shape_str() +
                                    " misaligned with features " + f.shape_str());

    Var squeeze = relu(linear(t.param(*p.fc1_w), t.param(*p.fc1_b), gap(features)));
    Var channel_scale = sigmoid(linear(t.param(*p.fc2_w), t.param(*p.fc2_b), squeeze));
    Var x = mul_channelwise(features, channel_scale);

    Var stats = spatial_stats(x); // [2,H,W]
    Var logits = conv3x3(t.param(*p.sp_w), t.param(*p.sp_b), stats);
    Var biased = add(reshape(logits, {f.dim(1), f.dim(2)}), density);
    return mul_spatial(x, sigmoid(biased));
}

void save_density(const DensityMap& map, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", map.cell_size);
    out << map.grid.dim(0) << ' ' << map.grid.dim(1) << ' ' << buf << '\n';
    for (int r = 0; r < map.grid.dim(0); ++r) {
        for (int c = 0; c < map.grid.dim(1); ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", map.grid(r, c));
            out << buf << (c + 1 < map.grid.dim(1) ? " " : "");
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

DensityMap load_density(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    int h = 0, w = 0;
    double cell = 0.0;
    if (!(in >> h >> w >> cell) || h < 1 || w < 1 || cell <= 0.0)
        throw std::runtime_error("malformed density header in " + path);
    DensityMap map;
    map.cell_size = cell;
    map.grid = Tensor({h, w});
    for (int i = 0; i < h * w; ++i)
        if (!(in >> map.grid.data[static_cast<size_t>(i)]))
            throw std::runtime_error("truncated density grid in " + path + " at value " + std::to_string(i));
    return map;
}

} // namespace sbd
