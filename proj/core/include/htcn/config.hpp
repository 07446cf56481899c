#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "htcn/detector.hpp"
#include "htcn/scenegen.hpp"

namespace htcn {

// Training schedule and experiment bookkeeping. Together with the scene and
// model settings this is everything a run needs besides the seed.
struct TrainConfig {
    int iterations = 1500;
    double lr = 0.001;
    double momentum = 0.9;
    double lr_decay_factor = 0.1;
    double lr_decay_at = 0.6;  // fraction of iterations after which lr is scaled
    double lambda = 1.0;       // weight on the combined adversarial losses, >= 0
    int per_stream = 1;        // images drawn per domain stream per iteration
    int eval_images = 150;     // held-out evaluation split size
    int checkpoint_every = 0;  // extra checkpoint interval in iterations, 0 = final only
    std::vector<std::uint64_t> seeds = {1, 2, 3};  // used by multi-run commands
};

// One declarative bundle: data generation, model, training. The run seed is
// deliberately not part of this struct; commands take it separately and fill
// scene.seed at run time, so one config can drive several seeded runs.
struct ExperimentConfig {
    SceneSpec scene;
    DetectorConfig model;
    TrainConfig train;
};

ExperimentConfig default_config();

// lambda = 0 and all calibration switches off: a plain detector trained on
// labeled data only, the baseline every ablation is compared against.
ExperimentConfig source_only_variant(ExperimentConfig cfg);

// Canonical text form: fixed section and key order, shortest round-trip
// number formatting. parse(serialize(c)) reproduces c exactly, and the
// serialization is the input to the config hash.
std::string serialize_config(const ExperimentConfig& cfg);

// Parses the "[section]" / "key = value" format. Unknown sections or keys,
// malformed lines, and out-of-range values all throw; missing keys keep
// their defaults. '#' starts a comment.
ExperimentConfig parse_config(const std::string& text);

ExperimentConfig load_config_file(const std::string& path);
void save_config_file(const ExperimentConfig& cfg, const std::string& path);

// Range checks that do not need a constructed model (lambda >= 0, positive
// iteration counts, at least one seed, ...). Throws on violation. parse_config
// and the run drivers both call this.
void validate_config(const ExperimentConfig& cfg);

// FNV-1a over the canonical serialization. Stored in checkpoints so a model
// cannot be silently evaluated under a different configuration than it was
// trained with.
std::uint64_t config_hash(const ExperimentConfig& cfg);
std::string hash_hex(std::uint64_t h);

// Shortest decimal form that parses back to the identical double. Used for
// canonical config text and for CSV artifacts, so written numbers are exact.
std::string format_shortest(double x);

}  // namespace htcn
