#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sbd/autograd.hpp"
#include "sbd/rng.hpp"

namespace sbd {

/// Non-negative grid whose total mass approximates the object count.
struct DensityMap {
    Tensor grid;            // [H_d, W_d]
    double cell_size = 1.0; // pixels per cell
};

/// Ground-truth density: each object center deposits a 3x3 discrete Gaussian
/// kernel (sigma in cell units) centered at its cell, renormalized to unit
/// mass after boundary clipping, summed over objects. Centers are pixel
/// coordinates; a center outside the image is an error naming it.
DensityMap gt_density(const std::vector<std::pair<double, double>>& centers_px, int grid_h, int grid_w,
                      double cell_size, double sigma);

/// Raw 3x3 kernel weights before normalization for a given sigma
/// (center/edge/corner at offsets 0, 1, sqrt(2)).
void gaussian3x3_raw(double sigma, double out[3][3]);

/// Density head: conv3x3 -> ReLU -> conv1x1 -> ReLU (non-negativity map).
struct DensityHeadParams {
    Parameter* conv_w = nullptr;
    Parameter* conv_b = nullptr;
    Parameter* proj_w = nullptr;
    Parameter* proj_b = nullptr;
};

DensityHeadParams make_density_head(ParamStore& store, int in_channels, int mid_channels, RngStream& rng);

/// Predicted density over the final feature map; output is [H, W], non-negative.
Var predict_density(Tape& t, const DensityHeadParams& p, Var final_map);

/// Squared-L2 consistency plus lambda_cls * BCE between the squashed
/// prediction and the occupancy of the ground truth (cells with mass).
Var density_loss(Tape& t, Var pred, const Tensor& gt, double lambda_cls);

/// Nearest integer (half-up) of the total predicted mass.
long long estimate_count(const Tensor& grid);

/// Query budget tiers by estimated count, scaled by the desk-scale factor
/// (canonical table at factor 1): <=10 -> 900, <=100 -> 1200, <=500 -> 1500,
/// else 2000. The scaled budget is rounded half-up and floored at 1.
int select_tier(long long estimated_count, double tier_factor = 1.0);

struct QueryBudget {
    long long estimated_count = 0;
    int num_queries = 0;
};

/// Query positions plus content embeddings.
struct QuerySet {
    std::vector<std::pair<double, double>> positions; // (x, y) grid coordinates
    Var contents;                                     // [N, D]
};

/// Positions drawn i.i.d. with replacement, cell probability proportional to
/// mass; zero total mass falls back to uniform cells. Deterministic given the
/// stream. Positions are cell centers.
std::vector<std::pair<double, double>> sample_query_positions(const Tensor& grid, int num_queries,
                                                              RngStream& rng);

/// Sinusoidal encoding of grid positions normalized by the grid extent.
Tensor positional_encoding(const std::vector<std::pair<double, double>>& positions, int dim, int grid_h,
                           int grid_w);

/// Shared learned content embedding plus the positional encoding.
QuerySet sample_queries(Tape& t, Parameter& content_embed, const DensityMap& pred, int num_queries,
                        RngStream& rng);

/// Channel attention (GAP -> FC -> squash -> per-channel scale) followed by
/// spatial attention whose logits are additively biased by the predicted
/// density map.
struct CbamParams {
    Parameter* fc1_w = nullptr;
    Parameter* fc1_b = nullptr;
    Parameter* fc2_w = nullptr;
    Parameter* fc2_b = nullptr;
    Parameter* sp_w = nullptr; // conv3x3 over [mean;max] maps
    Parameter* sp_b = nullptr;
};

CbamParams make_cbam(ParamStore& store, int channels, int reduced, RngStream& rng);

Var cbam_refine(Tape& t, const CbamParams& p, Var features, Var density);

/// Plain-text grid file: header "H_d W_d cell_size", then row-major reals.
void save_density(const DensityMap& map, const std::string& path);
DensityMap load_density(const std::string& path);

} // namespace sbd
