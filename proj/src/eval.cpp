#include "sbd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace sbd {

double iou(const Box& a, const Box& b) {
    const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2, ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
    const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2, by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
    const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
    const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
    const double inter = iw * ih;
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

namespace {

std::vector<size_t> score_order(const std::vector<EvalDetection>& dets) {
    std::vector<size_t> order(dets.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
    return order;
}

/// Greedy matching in score order; returns per-detection matched gt index
/// (-1 for none) following the detection's position in `order`.
std::vector<int> greedy_match(const std::vector<EvalDetection>& dets, const std::vector<size_t>& order,
                              const std::vector<EvalGroundTruth>& gts, double thr) {
    std::vector<char> taken(gts.size(), 0);
    std::vector<int> match(order.size(), -1);
    for (size_t k = 0; k < order.size(); ++k) {
        const EvalDetection& d = dets[order[k]];
        int best = -1;
        double best_iou = 0.0;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (taken[g] || gts[g].scene != d.scene || gts[g].label != d.label) continue;
            const double v = iou(d.box, gts[g].box);
            if (v >= thr && v > best_iou) {
                best_iou = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            taken[static_cast<size_t>(best)] = 1;
            match[k] = best;
        }
    }
    return match;
}

double ap_from_flags(const std::vector<char>& is_tp, size_t n_gt) {
    if (n_gt == 0) return 0.0;
    std::vector<double> precision, recall;
    size_t tp = 0;
    for (size_t k = 0; k < is_tp.size(); ++k) {
        if (is_tp[k]) ++tp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }
    // all-point interpolation: running max of precision from the right
    for (size_t k = precision.size(); k-- > 1;)
        precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double ap = 0.0, prev_recall = 0.0;
    for (size_t k = 0; k < precision.size(); ++k) {
        if (!is_tp[k]) continue;
        ap += (recall[k] - prev_recall) * precision[k];
        prev_recall = recall[k];
    }
    return ap;
}

} // namespace

double compute_ap(const std::vector<EvalDetection>& dets, const std::vector<EvalGroundTruth>& gts,
                  double iou_threshold) {
    const auto order = score_order(dets);
    const auto match = greedy_match(dets, order, gts, iou_threshold);
    std::vector<char> is_tp(order.size(), 0);
    for (size_t k = 0; k < order.size(); ++k) is_tp[k] = match[k] >= 0;
    return ap_from_flags(is_tp, gts.size());
}

double ap_over_thresholds(const std::vector<EvalDetection>& dets,
                          const std::vector<EvalGroundTruth>& gts) {
    double acc = 0.0;
    int n = 0;
    for (int i = 0; i < 10; ++i) {
        acc += compute_ap(dets, gts, 0.5 + 0.05 * i);
        ++n;
    }
    return acc / n;
}

namespace {

double bucket_ap(const std::vector<EvalDetection>& dets, const std::vector<EvalGroundTruth>& gts,
                 ScaleBucket bucket, double thr, const ScaleApOptions& options) {
    // match against the full ground truth first, then restrict
    const auto order = score_order(dets);
    const auto match = greedy_match(dets, order, gts, thr);

    std::vector<EvalDetection> kept;
    std::vector<char> flags;
    for (size_t k = 0; k < order.size(); ++k) {
        const EvalDetection& d = dets[order[k]];
        if (match[k] >= 0) {
            const bool in_bucket = scale_bucket(gts[static_cast<size_t>(match[k])].box) == bucket;
            if (in_bucket) {
                kept.push_back(d);
                flags.push_back(1);
            } else if (options.cross_bucket_as_fp) {
                kept.push_back(d);
                flags.push_back(0);
            } // otherwise ignored for this bucket
        } else {
            const bool own_bucket = d.box.w > 0 && d.box.h > 0 && scale_bucket(d.box) == bucket;
            if (own_bucket || options.cross_bucket_as_fp) {
                kept.push_back(d);
                flags.push_back(0);
            }
        }
    }
    size_t n_gt = 0;
    for (const auto& g : gts)
        if (scale_bucket(g.box) == bucket) ++n_gt;
    return ap_from_flags(flags, n_gt);
}

} // namespace

MetricsReport scale_ap_report(const std::vector<EvalDetection>& dets,
                              const std::vector<EvalGroundTruth>& gts, long long query_cost,
                              const ScaleApOptions& options) {
    MetricsReport rep;
    rep.query_cost = query_cost;
    rep.ap = ap_over_thresholds(dets, gts);
    rep.ap50 = compute_ap(dets, gts, 0.5);

    for (int b = 0; b < 5; ++b) {
        const ScaleBucket bucket = static_cast<ScaleBucket>(b);
        size_t n_gt = 0;
        for (const auto& g : gts)
            if (scale_bucket(g.box) == bucket) ++n_gt;
        if (n_gt == 0) continue; // undefined, excluded from aggregates
        double acc = 0.0;
        for (int i = 0; i < 10; ++i) acc += bucket_ap(dets, gts, bucket, 0.5 + 0.05 * i, options);
        rep.per_bucket[b] = acc / 10.0;
    }

    if (!gts.empty()) {
        const auto order = score_order(dets);
        const auto match = greedy_match(dets, order, gts, 0.5);
        size_t tp = 0;
        for (int m : match)
            if (m >= 0) ++tp;
        rep.recall = static_cast<double>(tp) / static_cast<double>(gts.size());
    }
    return rep;
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string opt_fmt(const std::optional<double>& v) { return v ? fmt(*v) : "undefined"; }

} // namespace

std::string MetricsReport::to_text() const {
    std::ostringstream os;
    os << "ap = " << fmt(ap) << '\n';
    os << "ap50 = " << fmt(ap50) << '\n';
    os << "ap_vt = " << opt_fmt(per_bucket[0]) << '\n';
    os << "ap_t = " << opt_fmt(per_bucket[1]) << '\n';
    os << "ap_s = " << opt_fmt(per_bucket[2]) << '\n';
    os << "ap_m = " << opt_fmt(per_bucket[3]) << '\n';
    os << "recall = " << fmt(recall) << '\n';
    os << "query_cost = " << query_cost << '\n';
    return os.str();
}

std::string MetricsReport::csv_header() { return "ap,ap50,ap_vt,ap_t,ap_s,ap_m,recall,query_cost"; }

std::string MetricsReport::to_csv_row() const {
    std::ostringstream os;
    os << fmt(ap) << ',' << fmt(ap50) << ',' << opt_fmt(per_bucket[0]) << ',' << opt_fmt(per_bucket[1])
       << ',' << opt_fmt(per_bucket[2]) << ',' << opt_fmt(per_bucket[3]) << ',' << fmt(recall) << ','
       << query_cost;
    return os.str();
}

CategoryMapping CategoryMapping::identity(const std::vector<int>& labels) {
    CategoryMapping m;
    for (int l : labels) m.to_common[l] = l;
    return m;
}

namespace {

std::optional<int> translate(const CategoryMapping& mapping, int label) {
    if (mapping.excluded.count(label)) return std::nullopt;
    auto it = mapping.to_common.find(label);
    if (it == mapping.to_common.end())
        throw std::invalid_argument("label " + std::to_string(label) +
                                    " absent from category mapping and not marked excluded");
    return it->second;
}

} // namespace

std::vector<EvalDetection> map_categories(const std::vector<EvalDetection>& dets,
                                          const CategoryMapping& mapping) {
    std::vector<EvalDetection> out;
    for (EvalDetection d : dets)
        if (auto l = translate(mapping, d.label)) {
            d.label = *l;
            out.push_back(d);
        }
    return out;
}

std::vector<EvalGroundTruth> map_categories(const std::vector<EvalGroundTruth>& gts,
                                            const CategoryMapping& mapping) {
    std::vector<EvalGroundTruth> out;
    for (EvalGroundTruth g : gts)
        if (auto l = translate(mapping, g.label)) {
            g.label = *l;
            out.push_back(g);
        }
    return out;
}

} // namespace sbd
