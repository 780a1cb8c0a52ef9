#pragma once

#include <vector>

#include "sbd/autograd.hpp"
#include "sbd/experts.hpp"
#include "sbd/rng.hpp"

namespace sbd {

/// Per-expert routing weights; non-negative, summing to 1.
struct RoutingScores {
    Tensor scores;
};

/// Active expert ids, ascending; exactly one per category present in the registry.
struct ActivationSet {
    std::vector<int> active;
};

/// Routing stem Conv -> ReLU -> GAP -> Flatten -> FC -> Softmax.
struct RouterParams {
    Parameter* conv_w = nullptr;
    Parameter* conv_b = nullptr;
    Parameter* fc_w = nullptr;
    Parameter* fc_b = nullptr;
};

RouterParams make_router(ParamStore& store, int in_channels, int stem_width, int num_experts,
                         RngStream& rng);

Var route(Tape& t, const RouterParams& p, Var base_features);
RoutingScores route(const RouterParams& p, const Tensor& base_features);

/// Category-wise top-1 selection; exact ties resolve to the lowest expert id.
ActivationSet activate(const Tensor& scores, const Registry& registry);

/// Per-expert calibration scalars and per-level gating parameters.
/// Gate input width is |categories| * C with expert features concatenated in
/// ascending-id order; gates are zero-initialized (uniform weights at start).
struct FusionParams {
    std::vector<Parameter*> alpha;  // by expert id, each [1], initialized to 1
    std::vector<Parameter*> gate_w; // per level [ncat, ncat*C]
    std::vector<Parameter*> gate_b; // per level [ncat]
};

FusionParams make_fusion(ParamStore& store, const Registry& registry);

/// Scales every level of a pyramid by the expert's calibration factor.
std::vector<Var> calibrate(Tape& t, const std::vector<Var>& pyramid, Var alpha);

/// Level gate: softmax(W_l GAP(Concat(features)) + b_l) over the active experts.
Var gate(Tape& t, const FusionParams& p, int level, const std::vector<Var>& calibrated_level);

/// Weighted sum over active experts of score * gate weight * calibrated level.
Var fuse_level(Tape& t, const std::vector<Var>& calibrated_level, const std::vector<Var>& expert_scores,
               Var gate_weights);

/// Attention over the flattened finest fused level with learned projections.
struct IntegrateParams {
    MhaParams mha;
    int heads = 4;
};

IntegrateParams make_integrate(ParamStore& store, int channels, int heads, RngStream& rng);

Var tokens_from_map(Tape& t, Var map);                      // [C,H,W] -> [H*W,C]
Var map_from_tokens(Tape& t, Var tokens, int h, int w);     // [H*W,C] -> [C,H,W]
Var integrate(Tape& t, const IntegrateParams& p, Var fused_finest_map); // -> tokens [N,D]

/// Full REM pass: route, activate, per-expert extraction + calibration,
/// per-level gating and fusion, then attention integration of the finest level.
struct RemOutput {
    Var scores;
    ActivationSet active;
    std::vector<Var> fused;     // L fused levels
    Var tokens;                 // [N, C] after attention
    Var final_map;              // tokens reshaped back to [C, H, W]
};

struct RemParams {
    RouterParams router;
    FusionParams fusion;
    IntegrateParams attn;
};

RemOutput rem_forward(Tape& t, const RemParams& p, const Registry& registry, Var image);

} // namespace sbd
