#pragma once

#include <cstdint>
#include <string>

#include "sbd/detr.hpp"
#include "sbd/experts.hpp"
#include "sbd/scenegen.hpp"

namespace sbd {

/// Full run configuration. Every field has a default; an empty config text is
/// a runnable toy setup. Unknown sections or keys are hard errors.
struct RunConfig {
    ExpertSetup experts;

    // rem
    int heads = 4;
    int stem_width = 16;

    // dgq
    double sigma = 1.5;
    double lambda_cls = 0.1;
    double tier_factor = 1.0 / 30.0;
    double tau_conf = 0.3;
    int density_mid = 16;
    int cbam_reduced = 8;

    // detr
    int decoder_layers = 2;
    int ffn_hidden = 64;
    LossWeights loss;

    // train
    int epochs = 30;
    double learning_rate = 1e-4;
    std::string optimizer = "adam";
    int batch = 1;
    uint64_t seed = 1;

    // data
    SceneGenParams data;
    int scene_count = 200;

    // paths
    std::string dataset_path = "scenes.txt";
    std::string checkpoint_path = "model.ckpt";
    std::string report_path = "metrics";
    std::string train_log_path = "train_log.csv";

    void validate() const;
};

/// Parses key = value sections; keys outside the known set are errors.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);

/// Emits every effective key; parse(dump(c)) reproduces c exactly.
std::string dump_config(const RunConfig& cfg);

} // namespace sbd
