#include "sbd/scenegen.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sbd {

const char* to_string(ScaleBucket b) {
    switch (b) {
        case ScaleBucket::very_tiny: return "very_tiny";
        case ScaleBucket::tiny: return "tiny";
        case ScaleBucket::small: return "small";
        case ScaleBucket::medium: return "medium";
        case ScaleBucket::large: return "large";
    }
    return "?";
}

ScaleBucket scale_bucket(const Box& box) {
    if (!(box.w > 0.0 && box.h > 0.0)) throw std::invalid_argument("scale_bucket: box sides must be positive");
    const double area = box.w * box.h;
    if (area < 64.0) return ScaleBucket::very_tiny;
    if (area <= 256.0) return ScaleBucket::tiny;
    if (area <= 1024.0) return ScaleBucket::small;
    if (area <= 9216.0) return ScaleBucket::medium;
    return ScaleBucket::large;
}

double sample_max_side(const SceneGenParams& params, RngStream& rng) {
    const double limit = 0.45 * params.image_size;
    for (int attempt = 0; attempt < 100; ++attempt) {
        const double s = std::exp(params.size_log_mean + params.size_log_sigma * rng.normal());
        if (s >= params.min_side && s <= limit) return s;
    }
    throw std::runtime_error("cannot place object: size distribution incompatible with image size " +
                             std::to_string(params.image_size));
}

namespace {

void class_signature(int cls, double out[3]) {
    RngStream rng(substream_seed(0x5bdc1a55, "class", static_cast<uint64_t>(cls)));
    for (int ch = 0; ch < 3; ++ch) out[ch] = 0.2 + 0.8 * rng.uniform();
}

void render_blob(Tensor& image, const Box& box, int cls, double amplitude) {
    double sig[3];
    class_signature(cls, sig);
    const int edge_h = image.dim(1), edge_w = image.dim(2);
    const double sx = std::max(0.5, box.w / 4.0), sy = std::max(0.5, box.h / 4.0);
    const int x0 = std::max(0, static_cast<int>(std::floor(box.cx - box.w / 2.0)));
    const int x1 = std::min(edge_w - 1, static_cast<int>(std::ceil(box.cx + box.w / 2.0)));
    const int y0 = std::max(0, static_cast<int>(std::floor(box.cy - box.h / 2.0)));
    const int y1 = std::min(edge_h - 1, static_cast<int>(std::ceil(box.cy + box.h / 2.0)));
    for (int ch = 0; ch < 3; ++ch)
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double dx = (x + 0.5 - box.cx) / sx;
                const double dy = (y + 0.5 - box.cy) / sy;
                image(ch, y, x) += amplitude * sig[ch] * std::exp(-0.5 * (dx * dx + dy * dy));
            }
}

} // namespace

Scene generate_scene(const SceneGenParams& params, uint64_t seed) {
    if (params.image_size < 8 || params.min_objects < 0 || params.max_objects < params.min_objects ||
        params.num_classes < 1)
        throw std::invalid_argument("generate_scene: invalid generator configuration");
    RngStream rng(seed);
    Scene scene;
    scene.seed = seed;
    scene.image = Tensor({3, params.image_size, params.image_size});
    for (double& v : scene.image.data) v = params.noise * rng.normal();

    const int count =
        static_cast<int>(rng.uniform_int(params.min_objects, params.max_objects));
    const double edge = params.image_size;
    for (int i = 0; i < count; ++i) {
        const double side = sample_max_side(params, rng);
        const double aspect = rng.uniform(params.aspect_min, 1.0);
        const bool tall = rng.uniform() < 0.5;
        Box box;
        box.w = tall ? std::max(params.min_side, side * aspect) : side;
        box.h = tall ? side : std::max(params.min_side, side * aspect);
        box.cx = rng.uniform(box.w / 2.0, edge - box.w / 2.0);
        box.cy = rng.uniform(box.h / 2.0, edge - box.h / 2.0);
        const int cls = static_cast<int>(rng.uniform_int(0, params.num_classes - 1));
        const double amplitude = rng.uniform(0.5, 1.0);
        render_blob(scene.image, box, cls, amplitude);
        scene.boxes.push_back(box);
        scene.classes.push_back(cls);
    }
    return scene;
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

[[noreturn]] void parse_fail(const std::string& path, int line, const std::string& what) {
    throw std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

} // namespace

void save_scenes(const std::vector<Scene>& scenes, const SceneGenParams& params, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "sbd-dataset v1\n";
    out << "image_size " << params.image_size << '\n';
    out << "classes " << params.num_classes << '\n';
    out << "min_objects " << params.min_objects << '\n';
    out << "max_objects " << params.max_objects << '\n';
    out << "noise " << fmt(params.noise) << '\n';
    out << "size_log_mean " << fmt(params.size_log_mean) << '\n';
    out << "size_log_sigma " << fmt(params.size_log_sigma) << '\n';
    out << "min_side " << fmt(params.min_side) << '\n';
    out << "aspect_min " << fmt(params.aspect_min) << '\n';
    out << "scenes " << scenes.size() << '\n';
    for (size_t i = 0; i < scenes.size(); ++i) {
        const Scene& s = scenes[i];
        out << "scene " << i << " seed " << s.seed << " boxes " << s.boxes.size() << '\n';
        for (size_t b = 0; b < s.boxes.size(); ++b)
            out << fmt(s.boxes[b].cx) << ' ' << fmt(s.boxes[b].cy) << ' ' << fmt(s.boxes[b].w) << ' '
                << fmt(s.boxes[b].h) << ' ' << s.classes[b] << '\n';
        out << "image regen\n";
    }
    out << "end\n";
    if (!out) throw std::runtime_error("write failed: " + path);
}

Dataset load_scenes(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    int lineno = 0;
    auto next_line = [&](std::string& line) {
        if (!std::getline(in, line)) parse_fail(path, lineno, "unexpected end of file");
        ++lineno;
    };

    std::string line;
    next_line(line);
    if (line != "sbd-dataset v1") parse_fail(path, lineno, "not a dataset file");

    Dataset ds;
    size_t scene_count = 0;
    auto read_kv = [&](const char* key, auto& value) {
        next_line(line);
        std::istringstream is(line);
        std::string k;
        if (!(is >> k >> value) || k != key) parse_fail(path, lineno, std::string("expected '") + key + "'");
    };
    read_kv("image_size", ds.params.image_size);
    read_kv("classes", ds.params.num_classes);
    read_kv("min_objects", ds.params.min_objects);
    read_kv("max_objects", ds.params.max_objects);
    read_kv("noise", ds.params.noise);
    read_kv("size_log_mean", ds.params.size_log_mean);
    read_kv("size_log_sigma", ds.params.size_log_sigma);
    read_kv("min_side", ds.params.min_side);
    read_kv("aspect_min", ds.params.aspect_min);
    read_kv("scenes", scene_count);

    ds.scenes.reserve(scene_count);
    for (size_t i = 0; i < scene_count; ++i) {
        next_line(line);
        std::istringstream is(line);
        std::string kw_scene, kw_seed, kw_boxes;
        size_t index = 0, nboxes = 0;
        uint64_t seed = 0;
        if (!(is >> kw_scene >> index >> kw_seed >> seed >> kw_boxes >> nboxes) || kw_scene != "scene" ||
            kw_seed != "seed" || kw_boxes != "boxes" || index != i)
            parse_fail(path, lineno, "malformed scene header");
        std::vector<Box> boxes(nboxes);
        std::vector<int> classes(nboxes);
        for (size_t b = 0; b < nboxes; ++b) {
            next_line(line);
            std::istringstream bs(line);
            if (!(bs >> boxes[b].cx >> boxes[b].cy >> boxes[b].w >> boxes[b].h >> classes[b]))
                parse_fail(path, lineno, "malformed box record");
        }
        next_line(line);
        if (line != "image regen") parse_fail(path, lineno, "expected 'image regen'");

        Scene scene = generate_scene(ds.params, seed);
        if (scene.boxes.size() != nboxes) parse_fail(path, lineno, "record inconsistent with its seed");
        for (size_t b = 0; b < nboxes; ++b) {
            const bool same = scene.boxes[b].cx == boxes[b].cx && scene.boxes[b].cy == boxes[b].cy &&
                              scene.boxes[b].w == boxes[b].w && scene.boxes[b].h == boxes[b].h &&
                              scene.classes[b] == classes[b];
            if (!same) parse_fail(path, lineno, "record inconsistent with its seed");
        }
        ds.scenes.push_back(std::move(scene));
    }
    next_line(line);
    if (line != "end") parse_fail(path, lineno, "missing end marker");
    return ds;
}

} // namespace sbd
