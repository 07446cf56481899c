#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "htcn/metrics.hpp"
#include "htcn/rng.hpp"
#include "htcn/tensor.hpp"

namespace htcn {

// Synthetic two-domain detection data ("ShapeScenes"): flat-color scenes of
// squares, circles, and triangles on 64x64 RGB images, with a parametric fog
// transform standing in for the real-world domain gap. Every scene is a pure
// function of (spec.seed, scene index), so datasets never need to be stored.

struct FogParams {
    double alpha_lo = 0.4;   // fog blend range toward gray
    double alpha_hi = 0.7;
    int blur_radius = 1;     // box blur half-width, 0 disables
    double noise_sigma = 0.03;  // additive uniform noise amplitude
    double gray = 0.6;       // fog color (all channels)

    bool is_null() const { return alpha_hi <= 0.0 && blur_radius == 0 && noise_sigma <= 0.0; }
};

struct SceneSpec {
    std::uint64_t seed = 0;
    int image_size = 64;
    int min_objects = 1;
    int max_objects = 4;
    double min_scale = 8.0;   // object bounding-box side, pixels
    double max_scale = 24.0;
    FogParams fog;
};

inline constexpr int kNumClasses = 3;
const char* class_name(int cls);  // square / circle / triangle

struct LabeledScene {
    Tensor image;  // [3,H,W], values in [0,1]
    std::vector<GroundTruthBox> labels;
};

// Unlabeled stream element. Labels are withheld structurally: this type
// simply has no label field, so no training-loss code can touch them.
struct UnlabeledScene {
    Tensor image;
};

// The four-stream training batch. target_like_source carries the labels of
// the source scenes it was derived from (the fog keeps geometry intact);
// the two target-side streams are unlabeled by construction.
struct DomainBatch {
    std::vector<LabeledScene> source;
    std::vector<LabeledScene> target_like_source;
    std::vector<UnlabeledScene> target;
    std::vector<UnlabeledScene> source_like_target;
};

// Disjoint index ranges keep the domains' scene content unpaired and keep
// evaluation scenes out of training.
inline constexpr std::uint64_t kTargetIndexOffset = 1ull << 40;
inline constexpr std::uint64_t kEvalIndexOffset = 1ull << 44;

// Renders the clean scene for a global index. Deterministic; bit-identical
// across calls and platforms.
LabeledScene generate_scene(const SceneSpec& spec, std::uint64_t index);

// out = (1 - alpha) * boxblur(image) + alpha * gray + uniform_noise(sigma),
// clipped to [0,1]. Geometry is untouched, so labels remain valid.
Tensor fog_transform(const Tensor& image, const FogParams& fog, double alpha, Pcg32& noise_rng);

// Fog strength used for the target domain (upper half of the alpha range)
// and for the interpolation stream (lower half); deterministic per index.
double sample_target_alpha(const SceneSpec& spec, std::uint64_t index);
double sample_interp_alpha(const SceneSpec& spec, std::uint64_t index);

// Assembles the four aligned streams for one training step.
DomainBatch make_domain_batch(const SceneSpec& spec, std::uint64_t batch_index, int per_stream);

// Labeled evaluation split. domain_fogged=true applies target-strength fog
// (measuring adaptation); false evaluates on clean scenes. Indices are taken
// from the evaluation range, disjoint from all training content.
std::vector<LabeledScene> generate_eval_split(const SceneSpec& spec, int count,
                                              bool domain_fogged);

// Lossless 8-bit PPM (P6) export plus a JSON-lines label file with fields
// file, boxes, classes. Returns the label file path.
std::string export_split(const SceneSpec& spec, const std::string& dir, const std::string& name,
                         int count, bool domain_fogged);

}  // namespace htcn
