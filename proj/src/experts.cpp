#include "sbd/experts.hpp"

#include <stdexcept>

namespace sbd {

const char* to_string(ExpertCategory c) {
    switch (c) {
        case ExpertCategory::tiny: return "tiny";
        case ExpertCategory::general: return "general";
        case ExpertCategory::mix: return "mix";
    }
    return "?";
}

ExpertCategory expert_category_from_string(const std::string& s) {
    if (s == "tiny") return ExpertCategory::tiny;
    if (s == "general") return ExpertCategory::general;
    if (s == "mix") return ExpertCategory::mix;
    throw std::invalid_argument("unknown expert category: " + s);
}

std::vector<Parameter*> ExpertSpec::params() const {
    std::vector<Parameter*> out;
    for (Parameter* p : {t1w, t1b, t2w, t2b, t3w, t3b, g1w, g1b, g2w, g2b})
        if (p) out.push_back(p);
    for (size_t l = 0; l < proj_w.size(); ++l) {
        out.push_back(proj_w[l]);
        out.push_back(proj_b[l]);
    }
    return out;
}

const ExpertSpec& Registry::by_id(int id) const {
    for (const auto& e : experts)
        if (e.id == id) return e;
    throw std::out_of_range("no expert with id " + std::to_string(id));
}

std::vector<ExpertCategory> Registry::categories_present() const {
    std::vector<ExpertCategory> cats;
    for (ExpertCategory c : {ExpertCategory::tiny, ExpertCategory::general, ExpertCategory::mix})
        for (const auto& e : experts)
            if (e.category == c) {
                cats.push_back(c);
                break;
            }
    return cats;
}

namespace {

Tensor he_init(std::vector<int> shape, int fan_in, RngStream& rng) {
    Tensor t(std::move(shape));
    const double s = std::sqrt(2.0 / fan_in);
    for (double& v : t.data) v = s * rng.normal();
    return t;
}

void add_tiny_trunk(ExpertSpec& e, ParamStore& store, const std::string& prefix, RngStream& rng) {
    const int w = e.width;
    e.t1w = &store.add(prefix + ".t1w", he_init({w, 3, 3, 3}, 3 * 9, rng), e.trainable);
    e.t1b = &store.add(prefix + ".t1b", Tensor({w}, 0.0), e.trainable);
    e.t2w = &store.add(prefix + ".t2w", he_init({w, w, 3, 3}, w * 9, rng), e.trainable);
    e.t2b = &store.add(prefix + ".t2b", Tensor({w}, 0.0), e.trainable);
    e.t3w = &store.add(prefix + ".t3w", he_init({w, w, 3, 3}, w * 9, rng), e.trainable);
    e.t3b = &store.add(prefix + ".t3b", Tensor({w}, 0.0), e.trainable);
}

void add_general_trunk(ExpertSpec& e, ParamStore& store, const std::string& prefix, RngStream& rng) {
    const int w = e.width;
    e.g1w = &store.add(prefix + ".g1w", he_init({w, 3, 3, 3}, 3 * 9, rng), e.trainable);
    e.g1b = &store.add(prefix + ".g1b", Tensor({w}, 0.0), e.trainable);
    e.g2w = &store.add(prefix + ".g2w", he_init({w, w, 3, 3}, w * 9, rng), e.trainable);
    e.g2b = &store.add(prefix + ".g2b", Tensor({w}, 0.0), e.trainable);
}

} // namespace

Registry build_registry(const ExpertSetup& setup, ParamStore& store, uint64_t root_seed) {
    struct CatCount {
        ExpertCategory cat;
        int count;
    };
    const CatCount wanted[] = {{ExpertCategory::tiny, setup.count_tiny},
                               {ExpertCategory::general, setup.count_general},
                               {ExpertCategory::mix, setup.count_mix}};
    for (const auto& [cat, count] : wanted)
        if (count < 1)
            throw std::invalid_argument(std::string("category ") + to_string(cat) + " has no expert");
    if (setup.levels < 1) throw std::invalid_argument("registry needs at least one pyramid level");

    const uint64_t seed = setup.seed ? setup.seed : substream_seed(root_seed, "init/experts");
    Registry reg;
    reg.levels = setup.levels;
    reg.channels = setup.channels;
    int next_id = 0;
    for (const auto& [cat, count] : wanted) {
        for (int k = 0; k < count; ++k) {
            RngStream rng(substream_seed(seed, "expert", static_cast<uint64_t>(next_id)));
            ExpertSpec e;
            e.id = next_id;
            e.category = cat;
            e.levels = setup.levels;
            e.channels = setup.channels;
            e.width = setup.width;
            e.trainable = setup.trainable;
            const std::string prefix = "expert" + std::to_string(e.id);
            if (cat == ExpertCategory::tiny || cat == ExpertCategory::mix)
                add_tiny_trunk(e, store, prefix, rng);
            if (cat == ExpertCategory::general || cat == ExpertCategory::mix)
                add_general_trunk(e, store, prefix, rng);
            for (int l = 0; l < e.levels; ++l) {
                e.proj_w.push_back(&store.add(prefix + ".proj" + std::to_string(l) + "w",
                                              he_init({e.channels, e.width}, e.width, rng), e.trainable));
                e.proj_b.push_back(&store.add(prefix + ".proj" + std::to_string(l) + "b",
                                              Tensor({e.channels}, 0.0), e.trainable));
            }
            reg.experts.push_back(std::move(e));
            ++next_id;
        }
    }
    return reg;
}

std::vector<int> pyramid_sizes(int image_edge, int levels) {
    std::vector<int> out;
    int s = image_edge / Registry::base_stride;
    for (int l = 0; l < levels; ++l) {
        out.push_back(s);
        s /= 2;
    }
    return out;
}

namespace {

// fixed 3x3 box filter applied per channel; not a parameter
Var box_blur(Tape& t, Var x) {
    const int c = x.value().dim(0);
    Tensor blur({c, c, 3, 3}, 0.0);
    for (int ch = 0; ch < c; ++ch)
        for (int u = 0; u < 3; ++u)
            for (int v = 0; v < 3; ++v) blur(ch, ch, u, v) = 1.0 / 9.0;
    return conv3x3(t.constant(std::move(blur)), t.constant(Tensor({c}, 0.0)), x);
}

// Tiny trunk: full-resolution convolutions over a high-passed input keep
// pixel-scale contrast; the stack is stride-preserving, pooling happens only
// between stages.
Var tiny_base(Tape& t, const ExpertSpec& e, Var image) {
    Var x = relu(conv3x3(t.param(*e.t1w), t.param(*e.t1b), sub(image, box_blur(t, image))));
    x = relu(conv3x3(t.param(*e.t2w), t.param(*e.t2b), maxpool2(x)));
    x = relu(conv3x3(t.param(*e.t3w), t.param(*e.t3b), maxpool2(x)));
    return maxpool2(x); // stride 8; max pooling keeps peak responses of sparse detail
}

// General trunk: aggressive pooling plus smoothing before any features, so
// only structure coarser than its grain survives into the convolutions.
Var general_base(Tape& t, const ExpertSpec& e, Var image) {
    Var x = box_blur(t, avgpool2(avgpool2(avgpool2(image)))); // stride 8 before any conv
    x = relu(conv3x3(t.param(*e.g1w), t.param(*e.g1b), x));
    x = relu(conv3x3(t.param(*e.g2w), t.param(*e.g2b), x));
    return x;
}

} // namespace

std::vector<Var> extract_features(Tape& t, const ExpertSpec& e, Var image) {
    const Tensor& img = image.value();
    if (img.rank() != 3 || img.dim(0) != 3)
        throw std::invalid_argument("extract_features expects a [3,H,W] image, got " + img.shape_str());
    const int divisor = Registry::base_stride << (e.levels - 1);
    if (img.dim(1) % divisor || img.dim(2) % divisor)
        throw std::invalid_argument("image size " + img.shape_str() + " not divisible by " +
                                    std::to_string(divisor));

    Var base{};
    switch (e.category) {
        case ExpertCategory::tiny: base = tiny_base(t, e, image); break;
        case ExpertCategory::general: base = general_base(t, e, image); break;
        case ExpertCategory::mix:
            base = scale(add(tiny_base(t, e, image), general_base(t, e, image)), 0.5);
            break;
    }

    std::vector<Var> levels;
    Var cur = base;
    for (int l = 0; l < e.levels; ++l) {
        levels.push_back(conv1x1(t.param(*e.proj_w[static_cast<size_t>(l)]),
                                 t.param(*e.proj_b[static_cast<size_t>(l)]), cur));
        if (l + 1 < e.levels) cur = avgpool2(cur);
    }
    return levels;
}

FeaturePyramid extract_features(const ExpertSpec& e, const Tensor& image) {
    Tape t;
    Var img = t.constant(image);
    std::vector<Var> levels = extract_features(t, e, img);
    FeaturePyramid p;
    for (Var v : levels) p.levels.push_back(v.value());
    return p;
}

} // namespace sbd
