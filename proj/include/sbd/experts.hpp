#pragma once

#include <string>
#include <vector>

#include "sbd/autograd.hpp"
#include "sbd/rng.hpp"
#include "sbd/tensor.hpp"

namespace sbd {

enum class ExpertCategory { tiny, general, mix };

const char* to_string(ExpertCategory c);
ExpertCategory expert_category_from_string(const std::string& s);

/// Synthetic expert: a small conv stem with a category-specific receptive
/// bias standing in for a real backbone. A tiny-category expert keeps full
/// resolution through its convolutions before pooling (high-frequency
/// response); a general-category expert pools aggressively first; a
/// mix-category expert averages both trunks. Each level is aligned to a
/// common channel width by a per-level 1x1 projection.
struct ExpertSpec {
    int id = 0;
    ExpertCategory category = ExpertCategory::tiny;
    int levels = 3;
    int channels = 32; // common output width C
    int width = 8;     // internal stem width
    bool trainable = false;

    // tiny trunk (also used by mix)
    Parameter* t1w = nullptr;
    Parameter* t1b = nullptr;
    Parameter* t2w = nullptr;
    Parameter* t2b = nullptr;
    Parameter* t3w = nullptr;
    Parameter* t3b = nullptr;
    // general trunk (also used by mix)
    Parameter* g1w = nullptr;
    Parameter* g1b = nullptr;
    Parameter* g2w = nullptr;
    Parameter* g2b = nullptr;
    // per-level channel projections
    std::vector<Parameter*> proj_w;
    std::vector<Parameter*> proj_b;

    std::vector<Parameter*> params() const;
};

/// L feature maps at halving resolution; level 0 is the finest.
struct FeaturePyramid {
    std::vector<Tensor> levels;
};

struct ExpertSetup {
    int count_tiny = 2;
    int count_general = 2;
    int count_mix = 2;
    int channels = 32;
    int width = 8;
    int levels = 3;
    bool trainable = false;
    uint64_t seed = 0; // 0 derives the init stream from the root seed
};

struct Registry {
    std::vector<ExpertSpec> experts;
    int levels = 3;
    int channels = 32;

    // stem stride of level 0; images must be divisible by stride<<(levels-1)
    static constexpr int base_stride = 8;

    int size() const { return static_cast<int>(experts.size()); }
    const ExpertSpec& by_id(int id) const;
    std::vector<ExpertCategory> categories_present() const;
};

/// Builds the expert registry and registers all expert parameters under
/// names "expert<N>.*". Throws if any category has no expert.
Registry build_registry(const ExpertSetup& setup, ParamStore& store, uint64_t root_seed);

/// Taped feature extraction; gradients flow into expert parameters only when
/// the expert is trainable.
std::vector<Var> extract_features(Tape& t, const ExpertSpec& e, Var image);

/// Untaped convenience wrapper.
FeaturePyramid extract_features(const ExpertSpec& e, const Tensor& image);

/// Spatial sizes of each pyramid level for an image edge length.
std::vector<int> pyramid_sizes(int image_edge, int levels);

} // namespace sbd
