#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "htcn/tensor.hpp"

namespace htcn {

// Numeric self-verification: finite-difference gradient comparison and the
// Monte-Carlo unbiasedness check for randomized fusion. Shared by the unit
// tests, the CLI subcommands, and the end-to-end acceptance binary so they
// all judge the same implementation with the same tolerances.

inline constexpr double kFdStep = 1e-4;
inline constexpr double kFdTolerance = 1e-4;

struct GradCheckReport {
    std::string name;
    double max_rel_err = 0.0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
    std::size_t probes = 0;
    bool pass = false;
};

// Compares analytic gradients of loss_fn against central finite differences
// taken at the current parameter values. loss_fn must rebuild its graph from
// scratch on every call (parameter values are perturbed in place between
// calls) and return a scalar. Relative error uses the absolute difference
// over max(|analytic|, |numeric|, 1e-6) so near-zero gradients do not blow
// up the ratio. max_probes_per_tensor = 0 probes every element; otherwise a
// deterministic strided subset is probed.
GradCheckReport fd_compare(const std::string& name, const std::function<Tensor()>& loss_fn,
                           const std::vector<Tensor>& params, double step = kFdStep,
                           double tol = kFdTolerance, std::size_t max_probes_per_tensor = 0);

// Finite-difference checks covering every differentiable op in the engine
// plus the calibration, fusion, and loss-head compositions. Inputs are drawn
// deterministically from `seed`, placed away from kinks (relu zero crossings,
// clamp edges, smooth-L1 breakpoints) so the central difference is valid.
std::vector<GradCheckReport> run_op_gradient_checks(std::uint64_t seed);

// True when every report passed.
bool all_passed(const std::vector<GradCheckReport>& reports);
double worst_rel_err(const std::vector<GradCheckReport>& reports);

// Composed check: a small full detector (every calibration switch on, a few
// thousand parameters) processes one labeled and one unlabeled scene, with
// calibration factors and proposals frozen at the unperturbed point so the
// objectives are smooth in the parameters. Two frozen objectives are audited:
// the detection loss probed over every parameter (discriminator parameters
// must show exactly zero influence on it), and the adversarial loss probed
// over the discriminator parameters, whose gradients never cross a reversal
// layer. Paths through the reversal layer are intentionally not a derivative
// of the forward value, so they cannot appear in any finite-difference
// equality; their exact negate-and-scale law is checked separately.
//
// The objectives are only piecewise smooth (relu and max-pool kinks), so the
// fixed probe step is valid only when no kink falls inside a probe bracket.
// kPipelineCheckSeed is a seed whose evaluation point was verified clean over
// every parameter entry at the probe step; other seeds may legitimately land
// a pre-activation within one step of a kink and fail the comparison without
// any gradient being wrong. If initialization or scene synthesis changes,
// re-scan a handful of seeds with full-entry probes and re-pin.
inline constexpr std::uint64_t kPipelineCheckSeed = 13;
std::vector<GradCheckReport> run_pipeline_gradient_check(std::uint64_t seed);

struct FusionCheckReport {
    int pairs = 0;
    int resamples = 0;
    int pairs_within_3se = 0;
    double worst_abs_z = 0.0;  // |mc mean - exact| / stderr, max over pairs
    bool pass = false;
};

// Draws n_pairs random (context, instance) vector pairs, then estimates
// E<fuse(x,u), fuse(y,w)> over n_resamples freshly drawn projection pairs
// and compares each estimate with the exact product <x,y><u,w>. Passes when
// every pair's estimate lies within three standard errors of its target.
// One projection resample is shared across the vector pairs (valid: each
// pair's mean and standard error are computed from its own estimates).
FusionCheckReport run_fusion_unbiasedness_check(std::uint64_t seed, int n_pairs, int n_resamples,
                                                int d_context, int d_instance, int d_out);

}  // namespace htcn
