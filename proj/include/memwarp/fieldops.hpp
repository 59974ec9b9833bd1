#pragma once

#include <array>
#include <cstdint>

#include <torch/torch.h>

#include "memwarp/types.hpp"

// Deformation-field numerics.
//
// Fields are stored in voxel units, layout [B, 3, H, W, D] for the batched
// tensor API and [3, H, W, D] for the typed API. Warping is pull-back:
// out(x) = vol(x + u(x)), with sample positions clamped to the grid so
// out-of-range lookups read the border voxel.
namespace memwarp::fieldops {

enum class Interp { trilinear, nearest };

// --- batched tensor API (used by the network and the losses) -------------

/// Warps vol [B, C, H, W, D] by field [B, 3, H, W, D]. Differentiable w.r.t.
/// both inputs for trilinear; nearest passes gradient to vol only.
torch::Tensor warp(const torch::Tensor& vol, const torch::Tensor& field,
                   Interp interp = Interp::trilinear);

/// u_out(x) = u_inner(x) + u_outer(x + u_inner(x)).
torch::Tensor compose(const torch::Tensor& outer, const torch::Tensor& inner);

/// Scaling and squaring: u0 = v / 2^steps, then `steps` self-compositions.
torch::Tensor integrate_velocity(const torch::Tensor& velocity, int steps = 7);

/// Trilinear resize of [B, C, h, w, d] onto `target` where fine index o reads
/// coarse position o / 2 (clamped). Matches stride-2 downsampling centred on
/// even fine voxels.
torch::Tensor upsample2(const torch::Tensor& x, std::array<int64_t, 3> target);

/// upsample2 followed by doubling the vector magnitudes.
torch::Tensor upsample_scale2(const torch::Tensor& field, std::array<int64_t, 3> target);

/// Spatial dims at pyramid level `level` (1 = full resolution); each coarser
/// level is ceil(n / 2), as produced by a stride-2, pad-1, 3-wide convolution.
std::array<int64_t, 3> level_dims(std::array<int64_t, 3> full, int level);

/// Chains upsample2 through the intermediate pyramid levels until x reaches
/// `full`. No vector scaling.
torch::Tensor upsample_to(const torch::Tensor& x, std::array<int64_t, 3> full);

torch::Tensor zeros_field(int64_t batch, std::array<int64_t, 3> dims,
                          const torch::TensorOptions& opts);

/// det(I + grad u) per voxel for a [3, H, W, D] field; central differences in
/// the interior, one-sided at the borders. Returns float64 [H, W, D].
torch::Tensor jacobian_determinant(const torch::Tensor& field);

// --- typed API -------------------------------------------------------------

DisplacementField identity_displacement(const GridShape& shape);

ImageVolume warp(const ImageVolume& vol, const DisplacementField& field,
                 Interp interp = Interp::trilinear);
/// Hard labels are always resampled nearest-neighbour.
LabelVolume warp(const LabelVolume& labels, const DisplacementField& field);

DisplacementField compose(const DisplacementField& outer, const DisplacementField& inner);
DisplacementField integrate_velocity(const VelocityField& velocity, int steps = 7);
/// Doubles every spatial dim.
DisplacementField upsample_scale2(const DisplacementField& field);
torch::Tensor jacobian_determinant(const DisplacementField& field);

} // namespace memwarp::fieldops
