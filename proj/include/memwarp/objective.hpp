#pragma once

#include <vector>

#include <torch/torch.h>

#include "memwarp/network.hpp"
#include "memwarp/types.hpp"

// Training losses. All reductions are means so the smoothness weight carries
// over between grid sizes. Probability tensors are [B, N, H, W, D] with class
// 0 as background; Dice terms average the foreground classes only.
namespace memwarp::objective {

inline constexpr double kDiceEpsilon = 1e-5;

struct LossWeights {
    double smoothness = 0.01;
    bool dice = true;   // L_dsc on warped moving masks
    bool region = true; // L_rgn on memory address maps

    /// Deep-supervision weight 1 / 2^(level-1).
    static double region_weight(int level);
};

struct LossBreakdown {
    torch::Tensor sim, dsc, reg, rgn, total;

    struct Values {
        double sim, dsc, reg, rgn, total;
    };
    Values values() const;
};

/// One training batch. Mask tensors are one-hot [B, N, H, W, D] and may be
/// left undefined for runs that never touch labels.
struct PairBatch {
    torch::Tensor moving; // [B, 1, H, W, D]
    torch::Tensor fixed;
    torch::Tensor moving_onehot;
    torch::Tensor fixed_onehot;

    bool has_masks() const { return moving_onehot.defined() && fixed_onehot.defined(); }
};

torch::Tensor similarity_mse(const torch::Tensor& fixed, const torch::Tensor& warped_moving);

/// 1 - mean over samples and foreground classes of (2 sum pq + eps) / (sum p + sum q + eps).
torch::Tensor soft_dice_loss(const torch::Tensor& predicted, const torch::Tensor& target);

/// Soft Dice between the fixed one-hot mask and the moving one-hot mask
/// warped trilinearly by `field` [B, 3, H, W, D].
torch::Tensor dice_loss(const torch::Tensor& fixed_onehot, const torch::Tensor& moving_onehot,
                        const torch::Tensor& field);
torch::Tensor dice_loss(const LabelVolume& fixed, const LabelVolume& moving, const DisplacementField& field);

/// Forward differences on each axis, squared, summed over the 3x3 gradient
/// entries and averaged over voxels (u = a x gives 3 a^2).
torch::Tensor smoothness_reg(const torch::Tensor& field);

/// sum_i 2^-(i-1) * soft_dice_loss(up(J_i), fixed). Maps are finest first,
/// map k belonging to level k + 1.
torch::Tensor region_loss(const std::vector<torch::Tensor>& address_maps, const torch::Tensor& fixed_onehot);

/// L = sim + dsc + lambda reg + rgn; disabled terms are exactly zero.
LossBreakdown composite_loss(const PairBatch& batch, const network::ForwardResult& forward,
                             const LossWeights& weights);

} // namespace memwarp::objective
