#include "sbd/detr.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace sbd {

namespace {

Tensor scaled_normal(std::vector<int> shape, double scale, RngStream& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = scale * rng.normal();
    return t;
}

MhaParams make_mha(ParamStore& store, const std::string& prefix, int dim, RngStream& rng) {
    const double s = std::sqrt(1.0 / dim);
    MhaParams p;
    p.wq = &store.add(prefix + ".wq", scaled_normal({dim, dim}, s, rng));
    p.bq = &store.add(prefix + ".bq", Tensor({dim}, 0.0));
    p.wk = &store.add(prefix + ".wk", scaled_normal({dim, dim}, s, rng));
    p.bk = &store.add(prefix + ".bk", Tensor({dim}, 0.0));
    p.wv = &store.add(prefix + ".wv", scaled_normal({dim, dim}, s, rng));
    p.bv = &store.add(prefix + ".bv", Tensor({dim}, 0.0));
    return p;
}

} // namespace

DecoderParams make_decoder(ParamStore& store, int dim, int n_layers, int ffn_hidden, int heads,
                           RngStream& rng) {
    if (n_layers < 1) throw std::invalid_argument("decoder needs at least one layer");
    DecoderParams p;
    p.heads = heads;
    for (int l = 0; l < n_layers; ++l) {
        const std::string prefix = "decoder" + std::to_string(l);
        DecoderLayerParams layer;
        layer.self_attn = make_mha(store, prefix + ".self", dim, rng);
        layer.cross_attn = make_mha(store, prefix + ".cross", dim, rng);
        layer.ffn1_w = &store.add(prefix + ".ffn1_w", scaled_normal({ffn_hidden, dim}, std::sqrt(2.0 / dim), rng));
        layer.ffn1_b = &store.add(prefix + ".ffn1_b", Tensor({ffn_hidden}, 0.01));
        layer.ffn2_w = &store.add(prefix + ".ffn2_w",
                                  scaled_normal({dim, ffn_hidden}, std::sqrt(1.0 / ffn_hidden), rng));
        layer.ffn2_b = &store.add(prefix + ".ffn2_b", Tensor({dim}, 0.0));
        p.layers.push_back(layer);
    }
    return p;
}

Var decoder_forward(Tape& t, const DecoderParams& p, Var queries, Var memory) {
    const Tensor& q = queries.value();
    if (q.rank() != 2 || q.dim(0) < 1) throw std::invalid_argument("decoder_forward: empty query set");
    Var x = queries;
    for (const DecoderLayerParams& layer : p.layers) {
        x = add(x, multi_head_attention(t, layer.self_attn, x, x, x, p.heads));
        x = add(x, multi_head_attention(t, layer.cross_attn, x, memory, memory, p.heads));
        Var h = relu(linear(t.param(*layer.ffn1_w), t.param(*layer.ffn1_b), x));
        x = add(x, linear(t.param(*layer.ffn2_w), t.param(*layer.ffn2_b), h));
    }
    return x;
}

HeadParams make_heads(ParamStore& store, int dim, int num_classes, RngStream& rng) {
    HeadParams p;
    p.num_classes = num_classes;
    const double s = std::sqrt(1.0 / dim);
    p.cls_w = &store.add("heads.cls_w", scaled_normal({num_classes + 1, dim}, s, rng));
    p.cls_b = &store.add("heads.cls_b", Tensor({num_classes + 1}, 0.0));
    p.box_w = &store.add("heads.box_w", scaled_normal({4, dim}, s, rng));
    p.box_b = &store.add("heads.box_b", Tensor({4}, 0.0));
    return p;
}

QueryOutputs predict_raw(Tape& t, const HeadParams& p, Var decoded) {
    QueryOutputs out;
    out.class_logits = linear(t.param(*p.cls_w), t.param(*p.cls_b), decoded);
    out.boxes = sigmoid(linear(t.param(*p.box_w), t.param(*p.box_b), decoded));
    return out;
}

std::vector<Detection> predict(const QueryOutputs& out, double tau_conf) {
    const Tensor& logits = out.class_logits.value();
    const Tensor& boxes = out.boxes.value();
    const int n = logits.dim(0), k = logits.dim(1) - 1;
    std::vector<Detection> dets;
    for (int i = 0; i < n; ++i) {
        double mx = logits(i, 0);
        for (int c = 1; c <= k; ++c) mx = std::max(mx, logits(i, c));
        double z = 0.0;
        for (int c = 0; c <= k; ++c) z += std::exp(logits(i, c) - mx);
        int best = 0;
        double best_p = 0.0;
        for (int c = 0; c < k; ++c) {
            const double pc = std::exp(logits(i, c) - mx) / z;
            if (pc > best_p) {
                best_p = pc;
                best = c;
            }
        }
        if (best_p > tau_conf) {
            Detection d;
            d.box = Box{boxes(i, 0), boxes(i, 1), boxes(i, 2), boxes(i, 3)};
            d.score = best_p;
            d.label = best;
            dets.push_back(d);
        }
    }
    return dets;
}

Assignment hungarian_match(const Tensor& cost) {
    if (cost.rank() != 2) throw std::invalid_argument("hungarian_match expects a 2-D cost matrix");
    cost.require_finite("hungarian_match cost");
    const int rows = cost.dim(0), cols = cost.dim(1);
    if (rows == 0 || cols == 0) return {};
    const bool flip = rows > cols;
    const int n = flip ? cols : rows; // n <= m
    const int m = flip ? rows : cols;
    auto at = [&](int r, int c) { return flip ? cost(c, r) : cost(r, c); };

    // potentials algorithm over rows 1..n, columns 1..m
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(m) + 1, 0.0);
    std::vector<int> p(static_cast<size_t>(m) + 1, 0), way(static_cast<size_t>(m) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(m) + 1, inf);
        std::vector<char> used(static_cast<size_t>(m) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            const int i0 = p[static_cast<size_t>(j0)];
            int j1 = 0;
            double delta = inf;
            for (int j = 1; j <= m; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                const double cur = at(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }

    Assignment a;
    for (int j = 1; j <= m; ++j) {
        const int i = p[static_cast<size_t>(j)];
        if (i == 0) continue;
        if (flip)
            a.pairs.emplace_back(j - 1, i - 1);
        else
            a.pairs.emplace_back(i - 1, j - 1);
    }
    std::sort(a.pairs.begin(), a.pairs.end());
    return a;
}

namespace {

double iou_value(const Box& a, const Box& b) {
    const double ax1 = a.cx - a.w / 2, ax2 = a.cx + a.w / 2, ay1 = a.cy - a.h / 2, ay2 = a.cy + a.h / 2;
    const double bx1 = b.cx - b.w / 2, bx2 = b.cx + b.w / 2, by1 = b.cy - b.h / 2, by2 = b.cy + b.h / 2;
    const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
    const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
    const double inter = iw * ih;
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

// differentiable IoU of a predicted [4] box var against a constant box
Var iou_var(Tape& t, Var box, const Box& gt) {
    Var cx = elem(box, 0), cy = elem(box, 1), w = elem(box, 2), h = elem(box, 3);
    Var half = t.constant(Tensor::scalar(0.5));
    Var wx = mul(w, half), hy = mul(h, half);
    Var x1 = sub(cx, wx), x2 = add(cx, wx), y1 = sub(cy, hy), y2 = add(cy, hy);
    Var gx1 = t.constant(Tensor::scalar(gt.cx - gt.w / 2));
    Var gx2 = t.constant(Tensor::scalar(gt.cx + gt.w / 2));
    Var gy1 = t.constant(Tensor::scalar(gt.cy - gt.h / 2));
    Var gy2 = t.constant(Tensor::scalar(gt.cy + gt.h / 2));
    Var iw = relu(sub(minimum(x2, gx2), maximum(x1, gx1)));
    Var ih = relu(sub(minimum(y2, gy2), maximum(y1, gy1)));
    Var inter = mul(iw, ih);
    Var uni = sub(add(mul(w, h), t.constant(Tensor::scalar(gt.w * gt.h))), inter);
    return divide(inter, uni);
}

} // namespace

Tensor match_cost(const QueryOutputs& out, const std::vector<Box>& gt_boxes,
                  const std::vector<int>& gt_classes, const LossWeights& w) {
    const Tensor& logits = out.class_logits.value();
    const Tensor& boxes = out.boxes.value();
    const int n = logits.dim(0), k = logits.dim(1) - 1, g = static_cast<int>(gt_boxes.size());
    Tensor cost({std::max(1, n), std::max(1, g)}, 0.0);
    if (n == 0 || g == 0) return Tensor::from({n == 0 ? 0 : n, 0}, {});
    for (int i = 0; i < n; ++i) {
        double mx = logits(i, 0);
        for (int c = 1; c <= k; ++c) mx = std::max(mx, logits(i, c));
        double z = 0.0;
        for (int c = 0; c <= k; ++c) z += std::exp(logits(i, c) - mx);
        Box pb{boxes(i, 0), boxes(i, 1), boxes(i, 2), boxes(i, 3)};
        for (int j = 0; j < g; ++j) {
            const double p_cls = std::exp(logits(i, gt_classes[static_cast<size_t>(j)]) - mx) / z;
            const double l1 = std::fabs(pb.cx - gt_boxes[static_cast<size_t>(j)].cx) +
                              std::fabs(pb.cy - gt_boxes[static_cast<size_t>(j)].cy) +
                              std::fabs(pb.w - gt_boxes[static_cast<size_t>(j)].w) +
                              std::fabs(pb.h - gt_boxes[static_cast<size_t>(j)].h);
            const double overlap = iou_value(pb, gt_boxes[static_cast<size_t>(j)]);
            cost(i, j) = w.cls * (1.0 - p_cls) + w.l1 * l1 + w.overlap * (1.0 - overlap);
        }
    }
    return cost;
}

Var detection_loss(Tape& t, const QueryOutputs& out, const std::vector<Box>& gt_boxes,
                   const std::vector<int>& gt_classes, const Assignment& assignment,
                   const LossWeights& w) {
    const Tensor& logits = out.class_logits.value();
    const int n = logits.dim(0);
    const int background = logits.dim(1) - 1;

    std::vector<int> targets(static_cast<size_t>(n), background);
    std::vector<char> matched(static_cast<size_t>(n), 0);
    for (const auto& [qi, gi] : assignment.pairs) {
        if (qi < 0 || qi >= n || gi < 0 || gi >= static_cast<int>(gt_boxes.size()))
            throw std::invalid_argument("detection_loss: assignment index out of range");
        if (matched[static_cast<size_t>(qi)]) throw std::invalid_argument("detection_loss: query matched twice");
        matched[static_cast<size_t>(qi)] = 1;
        targets[static_cast<size_t>(qi)] = gt_classes[static_cast<size_t>(gi)];
    }

    Tensor cls_weights({n});
    for (int i = 0; i < n; ++i)
        cls_weights(i) = matched[static_cast<size_t>(i)] ? w.cls : w.cls * w.background;
    Var loss = weighted_sum(cross_entropy_rows(out.class_logits, targets), std::move(cls_weights));

    for (const auto& [qi, gi] : assignment.pairs) {
        const Box& gt = gt_boxes[static_cast<size_t>(gi)];
        Var pb = slice_row(out.boxes, qi);
        Var diff = sub(pb, t.constant(Tensor::from({4}, {gt.cx, gt.cy, gt.w, gt.h})));
        loss = add(loss, scale(sum(absval(diff)), w.l1));
        loss = add(loss, scale(sub(t.constant(Tensor::scalar(1.0)), iou_var(t, pb, gt)), w.overlap));
    }
    return scale(loss, 1.0 / n);
}

// ---- checkpoint ----

void save_checkpoint(const ParamStore& store, int epoch, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    const auto params = store.all();
    out << "sbd-checkpoint v1\n";
    out << "epoch " << epoch << '\n';
    out << "params " << params.size() << '\n';
    char buf[64];
    for (const Parameter* p : params) {
        out << "param " << p->name << ' ' << p->value.rank();
        for (int d : p->value.shape) out << ' ' << d;
        out << (p->trainable ? " trainable" : " frozen") << '\n';
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%a", p->value.data[i]); // hex float, bit-exact
            out << buf << ((i + 1) % 8 == 0 || i + 1 == p->value.data.size() ? '\n' : ' ');
        }
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::string header;
    std::getline(in, header);
    if (header != "sbd-checkpoint v1") throw std::runtime_error(path + ": not a checkpoint file");
    Checkpoint ck;
    std::string key;
    size_t count = 0;
    if (!(in >> key >> ck.epoch) || key != "epoch") throw std::runtime_error(path + ": missing epoch");
    if (!(in >> key >> count) || key != "params") throw std::runtime_error(path + ": missing params count");
    for (size_t i = 0; i < count; ++i) {
        std::string name, flag;
        int rank = 0;
        if (!(in >> key >> name >> rank) || key != "param")
            throw std::runtime_error(path + ": malformed param header");
        std::vector<int> shape(static_cast<size_t>(rank));
        for (int d = 0; d < rank; ++d)
            if (!(in >> shape[static_cast<size_t>(d)])) throw std::runtime_error(path + ": malformed shape");
        if (!(in >> flag)) throw std::runtime_error(path + ": malformed param flag");
        Tensor t(shape);
        for (size_t j = 0; j < t.data.size(); ++j) {
            std::string tok;
            if (!(in >> tok)) throw std::runtime_error(path + ": truncated tensor " + name);
            t.data[j] = std::strtod(tok.c_str(), nullptr);
        }
        ck.params.emplace_back(std::move(name), std::move(t));
    }
    return ck;
}

void assign_checkpoint(const Checkpoint& ck, ParamStore& store) {
    if (ck.params.size() != store.size())
        throw std::runtime_error("checkpoint has " + std::to_string(ck.params.size()) +
                                 " tensors but the model has " + std::to_string(store.size()));
    for (const auto& [name, tensor] : ck.params) {
        Parameter* p = store.find(name);
        if (!p) throw std::runtime_error("checkpoint tensor '" + name + "' has no matching parameter");
        if (p->value.shape != tensor.shape)
            throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + tensor.shape_str() +
                                     " but the model expects " + p->value.shape_str());
        p->value = tensor;
    }
}

} // namespace sbd
