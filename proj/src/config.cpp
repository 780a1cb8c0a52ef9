#include "sbd/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace sbd {

void RunConfig::validate() const {
    if (batch != 1) throw std::invalid_argument("batch size other than 1 is not supported");
    if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
    if (scene_count < 0) throw std::invalid_argument("scene count must be non-negative");
    if (tier_factor <= 0.0) throw std::invalid_argument("tier_factor must be positive");
    if (heads < 1 || experts.channels % heads != 0)
        throw std::invalid_argument("channel width " + std::to_string(experts.channels) +
                                    " must be divisible by " + std::to_string(heads) + " heads");
    if (experts.channels % 4 != 0)
        throw std::invalid_argument("channel width must be a multiple of 4 for positional encodings");
    if (optimizer != "adam" && optimizer != "sgd") throw std::invalid_argument("unknown optimizer: " + optimizer);
    const int divisor = Registry::base_stride << (experts.levels - 1);
    if (data.image_size % divisor)
        throw std::invalid_argument("image_size " + std::to_string(data.image_size) +
                                    " must be divisible by " + std::to_string(divisor));
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

long long parse_ll(const std::string& name, const std::string& value) {
    size_t pos = 0;
    long long v = 0;
    try {
        v = std::stoll(value, &pos);
    } catch (...) {
        throw std::invalid_argument("config key " + name + ": invalid integer '" + value + "'");
    }
    if (pos != value.size()) throw std::invalid_argument("config key " + name + ": invalid integer '" + value + "'");
    return v;
}

double parse_double(const std::string& name, const std::string& value) {
    size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(value, &pos);
    } catch (...) {
        throw std::invalid_argument("config key " + name + ": invalid number '" + value + "'");
    }
    if (pos != value.size()) throw std::invalid_argument("config key " + name + ": invalid number '" + value + "'");
    return v;
}

bool parse_bool(const std::string& name, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw std::invalid_argument("config key " + name + ": invalid boolean '" + value + "'");
}

struct Schema {
    std::map<std::string, std::function<void(RunConfig&, const std::string&)>> set;
    std::vector<std::pair<std::string, std::function<std::string(const RunConfig&)>>> get;

    void add(const std::string& key, std::function<void(RunConfig&, const std::string&)> setter,
             std::function<std::string(const RunConfig&)> getter) {
        set[key] = std::move(setter);
        get.emplace_back(key, std::move(getter));
    }
};

const Schema& schema() {
    static const Schema s = [] {
        Schema sc;
        auto add_int = [&sc](const std::string& key, auto ref) {
            sc.add(key,
                   [ref, key](RunConfig& c, const std::string& v) { ref(c) = static_cast<int>(parse_ll(key, v)); },
                   [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); });
        };
        auto add_double = [&sc](const std::string& key, auto ref) {
            sc.add(key, [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_double(key, v); },
                   [ref](const RunConfig& c) { return fmt(ref(const_cast<RunConfig&>(c))); });
        };
        auto add_bool = [&sc](const std::string& key, auto ref) {
            sc.add(key, [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); },
                   [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)) ? "true" : "false"; });
        };
        auto add_string = [&sc](const std::string& key, auto ref) {
            sc.add(key, [ref](RunConfig& c, const std::string& v) { ref(c) = v; },
                   [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); });
        };
        auto add_u64 = [&sc](const std::string& key, auto ref) {
            sc.add(key,
                   [ref, key](RunConfig& c, const std::string& v) {
                       ref(c) = static_cast<uint64_t>(parse_ll(key, v));
                   },
                   [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); });
        };

        add_int("experts.tiny", [](RunConfig& c) -> int& { return c.experts.count_tiny; });
        add_int("experts.general", [](RunConfig& c) -> int& { return c.experts.count_general; });
        add_int("experts.mix", [](RunConfig& c) -> int& { return c.experts.count_mix; });
        add_int("experts.channels", [](RunConfig& c) -> int& { return c.experts.channels; });
        add_int("experts.width", [](RunConfig& c) -> int& { return c.experts.width; });
        add_int("experts.levels", [](RunConfig& c) -> int& { return c.experts.levels; });
        add_bool("experts.trainable", [](RunConfig& c) -> bool& { return c.experts.trainable; });
        add_u64("experts.seed", [](RunConfig& c) -> uint64_t& { return c.experts.seed; });

        add_int("rem.heads", [](RunConfig& c) -> int& { return c.heads; });
        add_int("rem.stem_width", [](RunConfig& c) -> int& { return c.stem_width; });

        add_double("dgq.sigma", [](RunConfig& c) -> double& { return c.sigma; });
        add_double("dgq.lambda_cls", [](RunConfig& c) -> double& { return c.lambda_cls; });
        add_double("dgq.tier_factor", [](RunConfig& c) -> double& { return c.tier_factor; });
        add_double("dgq.tau_conf", [](RunConfig& c) -> double& { return c.tau_conf; });
        add_int("dgq.density_mid", [](RunConfig& c) -> int& { return c.density_mid; });
        add_int("dgq.cbam_reduced", [](RunConfig& c) -> int& { return c.cbam_reduced; });

        add_int("detr.layers", [](RunConfig& c) -> int& { return c.decoder_layers; });
        add_int("detr.ffn_hidden", [](RunConfig& c) -> int& { return c.ffn_hidden; });
        add_double("detr.cost_class", [](RunConfig& c) -> double& { return c.loss.cls; });
        add_double("detr.cost_box", [](RunConfig& c) -> double& { return c.loss.l1; });
        add_double("detr.cost_overlap", [](RunConfig& c) -> double& { return c.loss.overlap; });
        add_double("detr.background_weight", [](RunConfig& c) -> double& { return c.loss.background; });

        add_int("train.epochs", [](RunConfig& c) -> int& { return c.epochs; });
        add_double("train.lr", [](RunConfig& c) -> double& { return c.learning_rate; });
        add_string("train.optimizer", [](RunConfig& c) -> std::string& { return c.optimizer; });
        add_int("train.batch", [](RunConfig& c) -> int& { return c.batch; });
        add_u64("train.seed", [](RunConfig& c) -> uint64_t& { return c.seed; });

        add_int("data.image_size", [](RunConfig& c) -> int& { return c.data.image_size; });
        add_int("data.min_objects", [](RunConfig& c) -> int& { return c.data.min_objects; });
        add_int("data.max_objects", [](RunConfig& c) -> int& { return c.data.max_objects; });
        add_int("data.classes", [](RunConfig& c) -> int& { return c.data.num_classes; });
        add_int("data.scenes", [](RunConfig& c) -> int& { return c.scene_count; });
        add_double("data.noise", [](RunConfig& c) -> double& { return c.data.noise; });
        add_double("data.size_log_mean", [](RunConfig& c) -> double& { return c.data.size_log_mean; });
        add_double("data.size_log_sigma", [](RunConfig& c) -> double& { return c.data.size_log_sigma; });
        add_double("data.min_side", [](RunConfig& c) -> double& { return c.data.min_side; });
        add_double("data.aspect_min", [](RunConfig& c) -> double& { return c.data.aspect_min; });

        add_string("paths.dataset", [](RunConfig& c) -> std::string& { return c.dataset_path; });
        add_string("paths.checkpoint", [](RunConfig& c) -> std::string& { return c.checkpoint_path; });
        add_string("paths.report", [](RunConfig& c) -> std::string& { return c.report_path; });
        add_string("paths.train_log", [](RunConfig& c) -> std::string& { return c.train_log_path; });
        return sc;
    }();
    return s;
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']') throw std::invalid_argument("config line " + std::to_string(lineno) +
                                                             ": malformed section header");
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        const std::string full = section.empty() ? key : section + "." + key;
        auto it = schema().set.find(full);
        if (it == schema().set.end())
            throw std::invalid_argument("unknown config key '" + full + "' (line " + std::to_string(lineno) +
                                        ")");
        it->second(cfg, value);
    }
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string dump_config(const RunConfig& cfg) {
    std::ostringstream out;
    std::string section;
    for (const auto& [key, getter] : schema().get) {
        const std::string sec = key.substr(0, key.find('.'));
        if (sec != section) {
            if (!section.empty()) out << '\n';
            out << '[' << sec << "]\n";
            section = sec;
        }
        out << key.substr(key.find('.') + 1) << " = " << getter(cfg) << '\n';
    }
    return out.str();
}

} // namespace sbd
