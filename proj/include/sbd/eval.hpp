#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sbd/scenegen.hpp"

namespace sbd {

/// Detection record for evaluation; boxes in pixels, scene-scoped matching.
struct EvalDetection {
    int scene = 0;
    Box box;
    int label = 0;
    double score = 0.0;
};

struct EvalGroundTruth {
    int scene = 0;
    Box box;
    int label = 0;
};

/// Intersection-over-union of two center/size boxes, in [0, 1].
double iou(const Box& a, const Box& b);

/// Micro-averaged AP at one IoU threshold: detections sorted by descending
/// score (ties by insertion order), greedily matched to unmatched ground
/// truths of the same scene and class, precision-recall integrated with
/// all-point interpolation. No ground truths yields 0.
double compute_ap(const std::vector<EvalDetection>& dets, const std::vector<EvalGroundTruth>& gts,
                  double iou_threshold);

/// Mean AP over IoU thresholds 0.50:0.05:0.95.
double ap_over_thresholds(const std::vector<EvalDetection>& dets,
                          const std::vector<EvalGroundTruth>& gts);

struct ScaleApOptions {
    /// When true, detections that fall outside a bucket (own box area for
    /// unmatched ones) count as false positives instead of being ignored.
    bool cross_bucket_as_fp = false;
};

struct MetricsReport {
    double ap = 0.0;
    double ap50 = 0.0;
    std::optional<double> per_bucket[5]; // indexed by ScaleBucket
    double recall = 0.0;                 // at IoU 0.5
    long long query_cost = 0;            // sum over scenes of N_q * N_gt

    std::string to_text() const;
    static std::string csv_header();
    std::string to_csv_row() const;
};

/// Per-bucket AP restricts ground truths to the bucket; detections matched to
/// out-of-bucket ground truths are ignored for that bucket.
MetricsReport scale_ap_report(const std::vector<EvalDetection>& dets,
                              const std::vector<EvalGroundTruth>& gts, long long query_cost = 0,
                              const ScaleApOptions& options = {});

/// Many-to-one label translation for cross-dataset evaluation. Labels marked
/// excluded are dropped from both sides; any other unmapped label is an error.
struct CategoryMapping {
    std::unordered_map<int, int> to_common;
    std::unordered_set<int> excluded;

    static CategoryMapping identity(const std::vector<int>& labels);
};

std::vector<EvalDetection> map_categories(const std::vector<EvalDetection>& dets,
                                          const CategoryMapping& mapping);
std::vector<EvalGroundTruth> map_categories(const std::vector<EvalGroundTruth>& gts,
                                            const CategoryMapping& mapping);

} // namespace sbd
