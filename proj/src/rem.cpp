#include "sbd/rem.hpp"

#include <stdexcept>

namespace sbd {

namespace {

Tensor he_init(std::vector<int> shape, int fan_in, RngStream& rng) {
    Tensor t(std::move(shape));
    const double s = std::sqrt(2.0 / fan_in);
    for (double& v : t.data) v = s * rng.normal();
    return t;
}

} // namespace

RouterParams make_router(ParamStore& store, int in_channels, int stem_width, int num_experts,
                         RngStream& rng) {
    RouterParams p;
    p.conv_w = &store.add("router.conv_w", he_init({stem_width, in_channels, 3, 3}, in_channels * 9, rng));
    p.conv_b = &store.add("router.conv_b", Tensor({stem_width}, 0.0));
    p.fc_w = &store.add("router.fc_w", he_init({num_experts, stem_width}, stem_width, rng));
    p.fc_b = &store.add("router.fc_b", Tensor({num_experts}, 0.0));
    return p;
}

Var route(Tape& t, const RouterParams& p, Var base_features) {
    Var stem = relu(conv3x3(t.param(*p.conv_w), t.param(*p.conv_b), base_features));
    Var pooled = gap(stem);
    Var logits = linear(t.param(*p.fc_w), t.param(*p.fc_b), pooled);
    return softmax(logits);
}

RoutingScores route(const RouterParams& p, const Tensor& base_features) {
    Tape t;
    return RoutingScores{route(t, p, t.constant(base_features)).value()};
}

ActivationSet activate(const Tensor& scores, const Registry& registry) {
    if (scores.numel() != registry.size())
        throw std::invalid_argument("activate: " + std::to_string(scores.numel()) + " scores for " +
                                    std::to_string(registry.size()) + " experts");
    ActivationSet out;
    for (ExpertCategory cat : registry.categories_present()) {
        int best = -1;
        double best_score = 0.0;
        for (const ExpertSpec& e : registry.experts) {
            if (e.category != cat) continue;
            const double s = scores(e.id);
            if (best < 0 || s > best_score) { // strict: ties keep the lowest id
                best = e.id;
                best_score = s;
            }
        }
        out.active.push_back(best);
    }
    std::sort(out.active.begin(), out.active.end());
    return out;
}

FusionParams make_fusion(ParamStore& store, const Registry& registry) {
    FusionParams p;
    for (const ExpertSpec& e : registry.experts)
        p.alpha.push_back(&store.add("fusion.alpha" + std::to_string(e.id), Tensor({1}, 1.0)));
    const int ncat = static_cast<int>(registry.categories_present().size());
    for (int l = 0; l < registry.levels; ++l) {
        p.gate_w.push_back(&store.add("fusion.gate" + std::to_string(l) + "w",
                                      Tensor({ncat, ncat * registry.channels}, 0.0)));
        p.gate_b.push_back(&store.add("fusion.gate" + std::to_string(l) + "b", Tensor({ncat}, 0.0)));
    }
    return p;
}

std::vector<Var> calibrate(Tape& t, const std::vector<Var>& pyramid, Var alpha) {
    (void)t;
    std::vector<Var> out;
    out.reserve(pyramid.size());
    for (Var level : pyramid) out.push_back(scale_by(level, alpha));
    return out;
}

Var gate(Tape& t, const FusionParams& p, int level, const std::vector<Var>& calibrated_level) {
    if (calibrated_level.empty()) throw std::invalid_argument("gate: no active experts");
    const auto& first = calibrated_level.front().value();
    std::vector<Var> pooled;
    for (Var f : calibrated_level) {
        if (!f.value().same_shape(first))
            throw std::invalid_argument("gate: level features disagree, " + f.value().shape_str() +
                                        " vs " + first.shape_str());
        pooled.push_back(gap(f)); // GAP(Concat(maps)) equals Concat(per-map GAP)
    }
    Var g = concat(pooled);
    Var logits = linear(t.param(*p.gate_w[static_cast<size_t>(level)]),
                        t.param(*p.gate_b[static_cast<size_t>(level)]), g);
    if (logits.numel() != static_cast<int64_t>(calibrated_level.size()))
        throw std::invalid_argument("gate: " + std::to_string(calibrated_level.size()) +
                                    " active experts for a gate of width " +
                                    std::to_string(logits.numel()));
    return softmax(logits);
}

Var fuse_level(Tape& t, const std::vector<Var>& calibrated_level, const std::vector<Var>& expert_scores,
               Var gate_weights) {
    (void)t;
    if (calibrated_level.size() != expert_scores.size() ||
        static_cast<int>(calibrated_level.size()) != gate_weights.numel())
        throw std::invalid_argument("fuse_level: mismatched expert counts");
    Var acc{};
    for (size_t e = 0; e < calibrated_level.size(); ++e) {
        Var term = scale_by(scale_by(calibrated_level[e], expert_scores[e]),
                            elem(gate_weights, static_cast<int64_t>(e)));
        acc = e == 0 ? term : add(acc, term);
    }
    return acc;
}

IntegrateParams make_integrate(ParamStore& store, int channels, int heads, RngStream& rng) {
    IntegrateParams p;
    p.heads = heads;
    const double s = std::sqrt(1.0 / channels);
    auto init = [&](const char* name) -> Parameter* {
        Tensor w({channels, channels});
        for (double& v : w.data) v = s * rng.normal();
        return &store.add(name, std::move(w));
    };
    p.mha.wq = init("attn.wq");
    p.mha.wk = init("attn.wk");
    p.mha.wv = init("attn.wv");
    p.mha.bq = &store.add("attn.bq", Tensor({channels}, 0.0));
    p.mha.bk = &store.add("attn.bk", Tensor({channels}, 0.0));
    p.mha.bv = &store.add("attn.bv", Tensor({channels}, 0.0));
    return p;
}

Var tokens_from_map(Tape& t, Var map) {
    (void)t;
    const Tensor& m = map.value();
    if (m.rank() != 3) throw std::invalid_argument("tokens_from_map expects [C,H,W], got " + m.shape_str());
    return transpose(reshape(map, {m.dim(0), m.dim(1) * m.dim(2)}));
}

Var map_from_tokens(Tape& t, Var tokens, int h, int w) {
    (void)t;
    const Tensor& m = tokens.value();
    if (m.rank() != 2 || m.dim(0) != h * w)
        throw std::invalid_argument("map_from_tokens: tokens " + m.shape_str() + " do not cover " +
                                    std::to_string(h) + "x" + std::to_string(w));
    return reshape(transpose(tokens), {m.dim(1), h, w});
}

Var integrate(Tape& t, const IntegrateParams& p, Var fused_finest_map) {
    const Tensor& m = fused_finest_map.value();
    if (m.rank() != 3 || m.dim(1) * m.dim(2) < 1)
        throw std::invalid_argument("integrate: no tokens in map " + m.shape_str());
    Var tokens = tokens_from_map(t, fused_finest_map);
    return multi_head_attention(t, p.mha, tokens, tokens, tokens, p.heads);
}

RemOutput rem_forward(Tape& t, const RemParams& p, const Registry& registry, Var image) {
    RemOutput out;
    out.scores = route(t, p.router, image);
    out.active = activate(out.scores.value(), registry);

    std::vector<std::vector<Var>> calibrated; // per active expert
    std::vector<Var> scores;                  // matching score scalars
    for (int id : out.active.active) {
        std::vector<Var> pyr = extract_features(t, registry.by_id(id), image);
        Var alpha = t.param(*p.fusion.alpha[static_cast<size_t>(id)]);
        calibrated.push_back(calibrate(t, pyr, alpha));
        scores.push_back(elem(out.scores, id));
    }

    for (int l = 0; l < registry.levels; ++l) {
        std::vector<Var> level;
        for (const auto& pyr : calibrated) level.push_back(pyr[static_cast<size_t>(l)]);
        Var w = gate(t, p.fusion, l, level);
        out.fused.push_back(fuse_level(t, level, scores, w));
    }

    const Tensor& finest = out.fused[0].value();
    out.tokens = integrate(t, p.attn, out.fused[0]);
    out.final_map = map_from_tokens(t, out.tokens, finest.dim(1), finest.dim(2));
    return out;
}

} // namespace sbd
