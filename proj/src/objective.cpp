#include "memwarp/objective.hpp"

#include <cmath>

#include "memwarp/fieldops.hpp"

namespace memwarp::objective {

double LossWeights::region_weight(int level) {
    return std::ldexp(1.0, -(level - 1));
}

LossBreakdown::Values LossBreakdown::values() const {
    return {sim.item<double>(), dsc.item<double>(), reg.item<double>(), rgn.item<double>(), total.item<double>()};
}

torch::Tensor similarity_mse(const torch::Tensor& fixed, const torch::Tensor& warped_moving) {
    if (fixed.sizes() != warped_moving.sizes()) {
        throw ContractError("similarity_mse: shape mismatch");
    }
    return (fixed - warped_moving).pow(2).mean();
}

torch::Tensor soft_dice_loss(const torch::Tensor& predicted, const torch::Tensor& target) {
    if (predicted.sizes() != target.sizes()) {
        throw ContractError("soft_dice_loss: class/shape mismatch between prediction and target");
    }
    if (predicted.dim() != 5 || predicted.size(1) < 2) {
        throw ContractError("soft_dice_loss: expected [B,N,H,W,D] with N >= 2");
    }
    auto p = predicted.narrow(1, 1, predicted.size(1) - 1);
    auto q = target.narrow(1, 1, target.size(1) - 1);
    const std::vector<int64_t> spatial{2, 3, 4};
    auto inter = (p * q).sum(spatial);
    auto denom = p.sum(spatial) + q.sum(spatial);
    auto dice = (2.0 * inter + kDiceEpsilon) / (denom + kDiceEpsilon);
    return 1.0 - dice.mean();
}

torch::Tensor dice_loss(const torch::Tensor& fixed_onehot, const torch::Tensor& moving_onehot,
                        const torch::Tensor& field) {
    if (fixed_onehot.size(1) != moving_onehot.size(1)) {
        throw ContractError("dice_loss: class count mismatch");
    }
    auto warped = fieldops::warp(moving_onehot, field, fieldops::Interp::trilinear);
    return soft_dice_loss(warped, fixed_onehot);
}

torch::Tensor dice_loss(const LabelVolume& fixed, const LabelVolume& moving, const DisplacementField& field) {
    if (fixed.num_classes != moving.num_classes) {
        throw ContractError("dice_loss: class count mismatch");
    }
    auto dtype = field.vectors.scalar_type();
    return dice_loss(fixed.one_hot(dtype).unsqueeze(0), moving.one_hot(dtype).unsqueeze(0),
                     field.vectors.unsqueeze(0));
}

torch::Tensor smoothness_reg(const torch::Tensor& field) {
    if (field.dim() != 5 || field.size(1) != 3) {
        throw ContractError("smoothness_reg: expected [B,3,H,W,D]");
    }
    auto total = torch::zeros({}, field.options());
    for (int64_t axis = 2; axis <= 4; ++axis) {
        const int64_t n = field.size(axis);
        if (n < 2) {
            throw ContractError("smoothness_reg: every dim must be >= 2");
        }
        auto diff = field.narrow(axis, 1, n - 1) - field.narrow(axis, 0, n - 1);
        total = total + 3.0 * diff.pow(2).mean();
    }
    return total;
}

torch::Tensor region_loss(const std::vector<torch::Tensor>& address_maps, const torch::Tensor& fixed_onehot) {
    const std::array<int64_t, 3> full{fixed_onehot.size(2), fixed_onehot.size(3), fixed_onehot.size(4)};
    auto total = torch::zeros({}, fixed_onehot.options());
    for (size_t k = 0; k < address_maps.size(); ++k) {
        if (address_maps[k].size(1) != fixed_onehot.size(1)) {
            throw ContractError("region_loss: address slots do not match mask classes");
        }
        auto up = fieldops::upsample_to(address_maps[k], full);
        total = total + LossWeights::region_weight(static_cast<int>(k) + 1) * soft_dice_loss(up, fixed_onehot);
    }
    return total;
}

LossBreakdown composite_loss(const PairBatch& batch, const network::ForwardResult& forward,
                             const LossWeights& weights) {
    if (weights.smoothness < 0) {
        throw ContractError("composite_loss: smoothness weight must be >= 0");
    }
    const auto& field = forward.field;
    auto zero = torch::zeros({}, field.options());
    LossBreakdown out;
    out.sim = similarity_mse(batch.fixed, fieldops::warp(batch.moving, field));
    out.reg = smoothness_reg(field);
    out.dsc = zero;
    out.rgn = zero;
    const bool need_region = weights.region && !forward.address_maps.empty();
    if ((weights.dice || need_region) && !batch.has_masks()) {
        throw ContractError("composite_loss: supervised terms enabled but the batch carries no masks");
    }
    if (weights.dice) {
        out.dsc = dice_loss(batch.fixed_onehot, batch.moving_onehot, field);
    }
    if (need_region) {
        out.rgn = region_loss(forward.address_maps, batch.fixed_onehot);
    }
    out.total = out.sim + out.dsc + weights.smoothness * out.reg + out.rgn;
    return out;
}

} // namespace memwarp::objective
