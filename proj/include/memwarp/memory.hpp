#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "memwarp/types.hpp"

// Memory network: per-region prototype slots generated by a small MLP, soft
// addressing from fixed-image decoder features, and per-voxel dynamic filters
// that replace the final 1x1x1 flow convolution.
//
// Shapes (any leading batch/voxel dims are allowed, written "..." below):
//   memory M        [3C, N]
//   query           [..., 3C]
//   address map J   [..., N]       rows on the probability simplex
//   filters w       [..., 3, C]    row-major reshape of J M^T
//   context         [..., C]
namespace memwarp::memory {

struct MemoryConfig {
    int slots = 4;
    int64_t context_channels = 8; // C; slot vectors have 3C entries
    int64_t hidden = 0;           // 0 selects 4 * 3C

    int64_t slot_dim() const { return 3 * context_channels; }
    int64_t hidden_width() const { return hidden > 0 ? hidden : 4 * slot_dim(); }
    void validate() const;
};

/// The MLP g that maps each identity column e_k to slot vector M[:, k].
class SlotGeneratorImpl : public torch::nn::Module {
public:
    explicit SlotGeneratorImpl(const MemoryConfig& config);

    /// build_memory: M = g(I_N), shape [3C, N].
    torch::Tensor forward();

    const MemoryConfig& config() const { return config_; }

private:
    MemoryConfig config_;
    torch::nn::Linear hidden_{nullptr};
    torch::nn::Linear out_{nullptr};
};
TORCH_MODULE(SlotGenerator);

/// softmax over slots of query . (M / ||M||_col). Throws NumericError when a
/// slot column has zero norm.
torch::Tensor address(const torch::Tensor& query, const torch::Tensor& memory);

/// reshape(J M^T) -> [..., 3, C].
torch::Tensor generate_filters(const torch::Tensor& address_map, const torch::Tensor& memory);

/// Per-voxel w(x) context(x) -> [..., 3].
torch::Tensor apply_dynamic_filters(const torch::Tensor& filters, const torch::Tensor& context);

struct Segmentation {
    torch::Tensor probabilities; // [N, H, W, D]
    LabelVolume labels;
};

/// Soft and hard segmentation from per-level address maps laid out as grids
/// [N, h_i, w_i, d_i], finest level first. Hard labels are the per-voxel
/// argmax of the finest map brought to `full`; ties go to the lowest slot.
Segmentation segmentation_from_address(const std::vector<torch::Tensor>& level_maps, const GridShape& full);

/// First-index argmax over dim 0 of [N, ...].
torch::Tensor argmax_lowest(const torch::Tensor& probabilities);

} // namespace memwarp::memory
