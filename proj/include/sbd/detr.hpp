#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sbd/autograd.hpp"
#include "sbd/rng.hpp"
#include "sbd/scenegen.hpp"

namespace sbd {

/// One decoded detection: box normalized to [0,1], score in (0,1).
struct Detection {
    Box box; // normalized cx, cy, w, h
    double score = 0.0;
    int label = 0;
};

/// One-to-one query/ground-truth pairing, injective in both coordinates.
struct Assignment {
    std::vector<std::pair<int, int>> pairs; // (query index, gt index)
};

struct DecoderLayerParams {
    MhaParams self_attn;
    MhaParams cross_attn;
    Parameter* ffn1_w = nullptr;
    Parameter* ffn1_b = nullptr;
    Parameter* ffn2_w = nullptr;
    Parameter* ffn2_b = nullptr;
};

struct DecoderParams {
    std::vector<DecoderLayerParams> layers;
    int heads = 4;
};

DecoderParams make_decoder(ParamStore& store, int dim, int n_layers, int ffn_hidden, int heads,
                           RngStream& rng);

/// Per layer: self-attention over queries, cross-attention into the feature
/// tokens, position-wise FFN; all with residual connections. Query count is
/// preserved; an empty query set is an error.
Var decoder_forward(Tape& t, const DecoderParams& p, Var queries, Var memory);

struct HeadParams {
    Parameter* cls_w = nullptr;
    Parameter* cls_b = nullptr;
    Parameter* box_w = nullptr;
    Parameter* box_b = nullptr;
    int num_classes = 3; // real classes; logits carry one extra background slot
};

HeadParams make_heads(ParamStore& store, int dim, int num_classes, RngStream& rng);

struct QueryOutputs {
    Var class_logits; // [N, K+1], background last
    Var boxes;        // [N, 4] squashed to (0,1)
};

QueryOutputs predict_raw(Tape& t, const HeadParams& p, Var decoded);

/// Detections with score strictly above tau_conf; score is the best real-class
/// softmax probability, so tau_conf = 1 yields none and tau_conf = 0 yields
/// one per query.
std::vector<Detection> predict(const QueryOutputs& out, double tau_conf);

/// Minimum-total-cost injective assignment of size min(N_q, N_gt).
Assignment hungarian_match(const Tensor& cost);

struct LossWeights {
    double cls = 2.0;
    double l1 = 5.0;
    double overlap = 2.0;
    double background = 0.2; // multiplier on unmatched-query class terms
};

/// Matching cost lambda_c (1 - p_class) + lambda_b L1 + lambda_g (1 - IoU)
/// evaluated on detached values. Ground-truth boxes are normalized.
Tensor match_cost(const QueryOutputs& out, const std::vector<Box>& gt_boxes,
                  const std::vector<int>& gt_classes, const LossWeights& w);

/// Matched pairs contribute class + L1 + IoU-overlap terms; unmatched queries
/// contribute (down-weighted) background classification. Normalized by the
/// query count.
Var detection_loss(Tape& t, const QueryOutputs& out, const std::vector<Box>& gt_boxes,
                   const std::vector<int>& gt_classes, const Assignment& assignment,
                   const LossWeights& w);

// ---- checkpoint container: named tensors, bit-exact round-trip ----

struct Checkpoint {
    int epoch = 0;
    std::vector<std::pair<std::string, Tensor>> params;
};

void save_checkpoint(const ParamStore& store, int epoch, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
/// Copies checkpoint tensors into the store; a missing name or shape mismatch
/// is an error naming the first offending tensor.
void assign_checkpoint(const Checkpoint& ck, ParamStore& store);

} // namespace sbd
