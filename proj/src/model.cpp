#include "sbd/model.hpp"

#include <cmath>
#include <stdexcept>

namespace sbd {

std::unique_ptr<DetectionModel> DetectionModel::build(const RunConfig& cfg) {
    cfg.validate();
    std::unique_ptr<DetectionModel> m(new DetectionModel(cfg));
    const uint64_t root = cfg.seed;

    m->registry_ = build_registry(cfg.experts, m->store_, root);

    RngStream router_rng(substream_seed(root, "init/router"));
    m->rem_.router = make_router(m->store_, 3, cfg.stem_width, m->registry_.size(), router_rng);
    m->rem_.fusion = make_fusion(m->store_, m->registry_);
    RngStream attn_rng(substream_seed(root, "init/attn"));
    m->rem_.attn = make_integrate(m->store_, m->registry_.channels, cfg.heads, attn_rng);

    RngStream density_rng(substream_seed(root, "init/density"));
    m->density_ = make_density_head(m->store_, m->registry_.channels, cfg.density_mid, density_rng);
    RngStream cbam_rng(substream_seed(root, "init/cbam"));
    m->cbam_ = make_cbam(m->store_, m->registry_.channels, cfg.cbam_reduced, cbam_rng);

    RngStream embed_rng(substream_seed(root, "init/embed"));
    Tensor embed({m->registry_.channels});
    for (double& v : embed.data) v = 0.1 * embed_rng.normal();
    m->query_embed_ = &m->store_.add("query_embed", std::move(embed));

    RngStream decoder_rng(substream_seed(root, "init/decoder"));
    m->decoder_ = make_decoder(m->store_, m->registry_.channels, cfg.decoder_layers, cfg.ffn_hidden,
                               cfg.heads, decoder_rng);
    RngStream heads_rng(substream_seed(root, "init/heads"));
    m->heads_ = make_heads(m->store_, m->registry_.channels, cfg.data.num_classes, heads_rng);
    return m;
}

SceneForward DetectionModel::forward_scene(Tape& t, const Scene& scene, RngStream& sampling_rng,
                                           bool want_detections) {
    SceneForward out;
    Var image = t.constant(scene.image);

    // stage 1-3: routing, expert extraction, calibrated gated fusion
    Var final_map{};
    if (use_rem) {
        RemOutput rem = rem_forward(t, rem_, registry_, image);
        final_map = rem.final_map;
    } else {
        // single general expert, plain per-level pass-through
        int general_id = -1;
        for (const ExpertSpec& e : registry_.experts)
            if (e.category == ExpertCategory::general) {
                general_id = e.id;
                break;
            }
        std::vector<Var> pyramid = extract_features(t, registry_.by_id(general_id), image);
        final_map = pyramid[0];
    }

    const Tensor& fm = final_map.value();
    const int grid_h = fm.dim(1), grid_w = fm.dim(2);
    const double cell = static_cast<double>(scene.image.dim(1)) / grid_h;

    // stage 4: density-guided dynamic queries
    Var memory_tokens{};
    DensityMap pred_map;
    pred_map.cell_size = cell;
    if (use_dgq) {
        Var pred = predict_density(t, density_, final_map);
        std::vector<std::pair<double, double>> centers;
        for (const Box& b : scene.boxes) centers.emplace_back(b.cx, b.cy);
        DensityMap gt = gt_density(centers, grid_h, grid_w, cell, cfg_.sigma);
        out.dens_loss = density_loss(t, pred, gt.grid, cfg_.lambda_cls);
        pred_map.grid = pred.value();
        out.density_pred = pred_map.grid;
        out.estimated_count = estimate_count(pred_map.grid);
        out.num_queries = select_tier(out.estimated_count, cfg_.tier_factor);
        Var refined = cbam_refine(t, cbam_, final_map, pred);
        memory_tokens = tokens_from_map(t, refined);
    } else {
        out.dens_loss = t.constant(Tensor::scalar(0.0));
        pred_map.grid = Tensor({grid_h, grid_w}, 0.0); // uniform fallback sampling
        out.estimated_count = 0;
        out.num_queries = select_tier(0, cfg_.tier_factor);
        memory_tokens = tokens_from_map(t, final_map);
    }

    QuerySet queries = sample_queries(t, *query_embed_, pred_map, out.num_queries, sampling_rng);

    // stage 5-6: decode and predict
    Var decoded = decoder_forward(t, decoder_, queries.contents, memory_tokens);
    QueryOutputs raw = predict_raw(t, heads_, decoded);

    const double img_edge = static_cast<double>(scene.image.dim(1));
    std::vector<Box> gt_norm;
    for (const Box& b : scene.boxes)
        gt_norm.push_back(Box{b.cx / img_edge, b.cy / img_edge, b.w / img_edge, b.h / img_edge});

    Assignment assignment;
    if (!gt_norm.empty()) assignment = hungarian_match(match_cost(raw, gt_norm, scene.classes, cfg_.loss));
    out.det_loss = detection_loss(t, raw, gt_norm, scene.classes, assignment, cfg_.loss);
    out.total_loss = add(out.det_loss, out.dens_loss);
    out.query_cost = static_cast<long long>(out.num_queries) * static_cast<long long>(gt_norm.size());

    if (want_detections) out.detections = predict(raw, cfg_.tau_conf);
    return out;
}

EpochMetrics DetectionModel::train_epoch(const std::vector<Scene>& scenes, Optimizer& opt) {
    if (scenes.empty()) throw std::invalid_argument("train_epoch: no scenes");
    EpochMetrics metrics;
    auto params = store_.all();
    for (size_t i = 0; i < scenes.size(); ++i) {
        Tape t;
        RngStream sampling(substream_seed(cfg_.seed, "sampling", static_cast<uint64_t>(i)));
        SceneForward fwd = forward_scene(t, scenes[i], sampling);
        const double total = fwd.total_loss.value()(0);
        if (!std::isfinite(total))
            throw std::runtime_error("non-finite loss at scene " + std::to_string(i));
        metrics.det_loss += fwd.det_loss.value()(0);
        metrics.density_loss += fwd.dens_loss.value()(0);
        metrics.total_loss += total;

        opt.zero_grads(params);
        t.backward(fwd.total_loss);
        opt.step(params);
    }
    const double n = static_cast<double>(scenes.size());
    metrics.det_loss /= n;
    metrics.density_loss /= n;
    metrics.total_loss /= n;
    return metrics;
}

EvalOutcome DetectionModel::evaluate(const std::vector<Scene>& scenes) {
    EvalOutcome out;
    for (size_t i = 0; i < scenes.size(); ++i) {
        Tape t;
        RngStream sampling(substream_seed(cfg_.seed, "sampling", static_cast<uint64_t>(i)));
        SceneForward fwd = forward_scene(t, scenes[i], sampling, /*want_detections=*/true);
        out.query_cost += fwd.query_cost;
        const double edge = static_cast<double>(scenes[i].image.dim(1));
        for (const Detection& d : fwd.detections) {
            EvalDetection ed;
            ed.scene = static_cast<int>(i);
            ed.box = Box{d.box.cx * edge, d.box.cy * edge, d.box.w * edge, d.box.h * edge};
            ed.label = d.label;
            ed.score = d.score;
            out.detections.push_back(ed);
        }
        for (size_t b = 0; b < scenes[i].boxes.size(); ++b) {
            EvalGroundTruth gt;
            gt.scene = static_cast<int>(i);
            gt.box = scenes[i].boxes[b];
            gt.label = scenes[i].classes[b];
            out.ground_truths.push_back(gt);
        }
    }
    return out;
}

} // namespace sbd
