#pragma once

#include "nac/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace nac {

inline constexpr Index kPatch = 11;
inline constexpr Index kPatchPixels = kPatch * kPatch;
/// Pixel centers sit at integer coordinates 0..10; the patch midpoint is 5.
inline constexpr double kPatchMid = (kPatch - 1) / 2.0;

/// Ground-truth profile parameters for one synthetic peak.
struct PeakParams {
  double row = kPatchMid, col = kPatchMid;
  double sigma_r = 1.0, sigma_c = 1.0;
  double eta = 0.5;        // Lorentzian fraction, [0,1]
  double amplitude = 100.0;
  double background = 0.0;
};

struct GeneratorConfig {
  double center_box_half = 1.0;  // centers uniform in midpoint +/- this, per axis
  double sigma_min = 0.7, sigma_max = 2.0;
  double amp_min = 50.0, amp_max = 500.0;
  double bg_min = 0.0, bg_max = 10.0;
  double noise_level = 0.5;  // per-pixel sigma = noise_level * sqrt(max(I,1))
  void validate() const;     // throws std::invalid_argument on bad ranges
};

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };

/// Labeled 11x11 patches with normalized (row,col)/11 center labels and a
/// fixed 80-10-10 assignment. true_params is populated by the generator only.
struct PeakDataset {
  Tensor patches;  // [N,1,11,11], min-max normalized to [0,1]
  Tensor labels;   // [N,2]
  std::vector<std::uint8_t> split;
  std::vector<PeakParams> true_params;
  Index size() const { return static_cast<Index>(split.size()); }
};

/// I(r,c) = B + A*(eta*L + (1-eta)*G) evaluated at integer pixel coords.
void pseudo_voigt_2d(const PeakParams& p, float* out121);
double pseudo_voigt_at(const PeakParams& p, double r, double c);

PeakDataset generate_dataset(const GeneratorConfig& cfg, Index n,
                             std::uint64_t seed);

std::vector<Index> split_indices(const PeakDataset& ds, Split s);

/// Copies the selected samples into contiguous batch tensors.
Tensor gather_patches(const PeakDataset& ds, const std::vector<Index>& idx,
                      Index begin, Index count);
Tensor gather_labels(const PeakDataset& ds, const std::vector<Index>& idx,
                     Index begin, Index count);

struct CenterEstimate {
  double row = 0.0, col = 0.0;
};

/// Intensity-weighted mean pixel coordinate. Throws on a non-positive-sum
/// or negative-valued patch.
CenterEstimate center_of_mass(const float* patch121);

struct FitResult {
  PeakParams params;
  double rms_residual = 0.0;
  bool converged = false;
  int evaluations = 0;
};

/// Nonlinear least squares against the pseudo-Voigt model: moment-based
/// initialization, Nelder-Mead refinement, at most `max_evals` objective
/// evaluations. A constant patch is degenerate and throws.
FitResult fit_pseudo_voigt(const float* patch121, int max_evals = 2000);

void save_dataset(const std::string& path, const PeakDataset& ds);
PeakDataset load_dataset(const std::string& path);

}  // namespace nac
