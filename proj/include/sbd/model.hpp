#pragma once

#include <memory>
#include <vector>

#include "sbd/config.hpp"
#include "sbd/detr.hpp"
#include "sbd/dgq.hpp"
#include "sbd/eval.hpp"
#include "sbd/optim.hpp"
#include "sbd/rem.hpp"

namespace sbd {

/// One scene pass through the pipeline: routing and expert fusion, density
/// prediction and query budgeting, decoding, matching, and losses.
struct SceneForward {
    Var total_loss;
    Var det_loss;
    Var dens_loss;            // zero constant when the density branch is off
    long long estimated_count = 0;
    int num_queries = 0;
    long long query_cost = 0; // num_queries * n_gt
    Tensor density_pred;      // empty when the density branch is off
    std::vector<Detection> detections;
};

struct EpochMetrics {
    int epoch = 0;
    double det_loss = 0.0;
    double density_loss = 0.0;
    double total_loss = 0.0;
};

struct EvalOutcome {
    std::vector<EvalDetection> detections; // pixel coordinates
    std::vector<EvalGroundTruth> ground_truths;
    long long query_cost = 0;
};

/// The assembled detection pipeline. All parameter groups draw from named
/// init sub-streams of the root seed, so disabling one component never
/// perturbs another's initialization. The ablation switches only change the
/// forward path: with use_rem off, the lowest-id general expert's pyramid is
/// used directly (plain per-level pass-through, no routing/attention); with
/// use_dgq off, a fixed lowest-tier query budget is sampled uniformly and no
/// density loss is applied.
class DetectionModel {
public:
    static std::unique_ptr<DetectionModel> build(const RunConfig& cfg);

    DetectionModel(const DetectionModel&) = delete;
    DetectionModel& operator=(const DetectionModel&) = delete;

    SceneForward forward_scene(Tape& t, const Scene& scene, RngStream& sampling_rng,
                               bool want_detections = false);

    /// Trains one epoch scene by scene (batch size 1); aborts with the scene
    /// id on a non-finite loss.
    EpochMetrics train_epoch(const std::vector<Scene>& scenes, Optimizer& opt);

    EvalOutcome evaluate(const std::vector<Scene>& scenes);

    const RunConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const Registry& registry() const { return registry_; }

    bool use_rem = true;
    bool use_dgq = true;

private:
    explicit DetectionModel(const RunConfig& cfg) : cfg_(cfg) {}

    RunConfig cfg_;
    ParamStore store_;
    Registry registry_;
    RemParams rem_;
    DensityHeadParams density_;
    CbamParams cbam_;
    Parameter* query_embed_ = nullptr;
    DecoderParams decoder_;
    HeadParams heads_;
};

} // namespace sbd
