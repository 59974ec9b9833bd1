#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "memwarp/memory.hpp"
#include "memwarp/types.hpp"

// LapWarp: a shared-weight encoder over the batch-stacked (moving, fixed)
// pair and a coarse-to-fine decoder that warps moving features level by level
// and adds a residual field at each level:
//
//   fixed_i   = d_i(enc_f_i ++ up(fixed_{i+1}))
//   moving_i  = d_i(warp(enc_m_i, cum~_{i+1}) ++ warp(up(moving_{i+1}), res~_{i+1}))
//   res_i     = f_i(moving_i ++ fixed_i)
//   cum_i     = res_i + cum~_{i+1}
//
// where "~" marks a field upsampled to the next finer level and doubled, and
// level 1 is full resolution. Levels are indexed 1..n, n coarsest.
namespace memwarp::network {

/// Smallest level count n with 2^(n-1) > d_max.
int min_pyramid_levels(double d_max);

struct NetworkConfig {
    int levels = 3;
    std::vector<int64_t> channels{8, 16, 32}; // C_i per level, finest first
    int memory_slots = 4;
    int integration_steps = 7;
    bool diffeomorphic = true;
    bool use_large_kernel = false;
    bool pyramid = true; // off: flow only at level 1, no intermediate warping
    bool memory = true;  // off: static 1x1x1 flow head
    double max_displacement = 0.0;

    int64_t decoder_channels(int level) const { return 3 * channels.at(level - 1); }
    int64_t context_channels(int level) const { return channels.at(level - 1); }
    bool has_flow(int level) const { return pyramid || level == 1; }
    bool integrates(int level) const { return diffeomorphic && has_flow(level) && level >= 2; }
    void validate() const;
};

struct LevelState {
    int level = 0;
    torch::Tensor raw_flow;         // flow-generator output; a velocity where integrated
    torch::Tensor residual;         // res_i
    torch::Tensor cumulative;       // cum_i
    torch::Tensor residual_up;      // res~_i at level i-1 (undefined at level 1)
    torch::Tensor cumulative_up;    // cum~_i at level i-1 (undefined at level 1)
    torch::Tensor moving_features;  // decoder output, moving stream
    torch::Tensor fixed_features;   // decoder output, fixed stream
    torch::Tensor address;          // J_i as [B, N, h, w, d]; undefined without memory
};

/// Decoded levels, coarsest first in decode order; `at(i)` looks up level i.
struct PyramidState {
    int levels = 0;
    std::array<int64_t, 3> full{};
    std::vector<LevelState> decoded;

    const LevelState& at(int level) const;
    /// Level that must be decoded next (n when empty, 0 when complete).
    int next_level() const;
};

struct EncodedPair {
    std::vector<torch::Tensor> moving; // finest first, [B, C_i, h_i, w_i, d_i]
    std::vector<torch::Tensor> fixed;
};

struct ForwardResult {
    PyramidState state;
    torch::Tensor field;                     // cum_1, [B, 3, H, W, D]
    std::vector<torch::Tensor> address_maps; // finest first; empty without memory
};

/// conv(3^3) + instance norm + LeakyReLU(0.2). With large kernels the conv is
/// the sum of 5^3, 3^3 and 1^3 branches (plus identity when shapes allow).
class ConvUnitImpl : public torch::nn::Module {
public:
    ConvUnitImpl(int64_t in, int64_t out, int64_t stride, bool large_kernel);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv3d conv_{nullptr};
    torch::nn::Conv3d conv5_{nullptr};
    torch::nn::Conv3d conv1_{nullptr};
    torch::nn::InstanceNorm3d norm_{nullptr};
    bool identity_ = false;
};
TORCH_MODULE(ConvUnit);

class FlowGeneratorImpl : public torch::nn::Module {
public:
    FlowGeneratorImpl(int64_t decoder_channels, int64_t context_channels, bool use_memory, int slots,
                      bool large_kernel);

    struct Output {
        torch::Tensor flow;    // [B, 3, h, w, d]
        torch::Tensor address; // [B, N, h, w, d] or undefined
    };
    Output forward(const torch::Tensor& moving, const torch::Tensor& fixed);

    /// Context vectors f_c(moving ++ fixed), [B, C, h, w, d].
    torch::Tensor context(const torch::Tensor& moving, const torch::Tensor& fixed);
    bool uses_memory() const { return !slots_.is_empty(); }
    memory::SlotGenerator& slots() { return slots_; }
    /// Zeroes the static head (or the slot generator's output layer).
    void zero_output();

private:
    ConvUnit ctx1_{nullptr};
    ConvUnit ctx2_{nullptr};
    torch::nn::Conv3d head_{nullptr};
    memory::SlotGenerator slots_{nullptr};
};
TORCH_MODULE(FlowGenerator);

class LapWarpImpl : public torch::nn::Module {
public:
    explicit LapWarpImpl(NetworkConfig config);

    const NetworkConfig& config() const { return config_; }

    /// Shared-weight encoding of the batch-stacked pair. Inputs [B,1,H,W,D].
    EncodedPair encode(const torch::Tensor& moving, const torch::Tensor& fixed);

    /// Decodes level `level`, which must be state.next_level().
    void decode_level(int level, const EncodedPair& features, PyramidState& state);

    ForwardResult forward(const torch::Tensor& moving, const torch::Tensor& fixed);

    /// Residual used in the additive update: the integrated velocity on
    /// levels >= 2 when diffeomorphic, the raw output otherwise.
    torch::Tensor apply_diffeomorphic_layer(const torch::Tensor& raw, int level) const;

    /// Sets every flow generator's output to zero (fixed-point tests).
    void zero_flow_generators();

    FlowGenerator& flow_generator(int level) { return flow_.at(level - 1); }

private:
    NetworkConfig config_;
    std::vector<torch::nn::Sequential> encoder_;
    std::vector<torch::nn::Sequential> decoder_;
    std::vector<FlowGenerator> flow_;
};
TORCH_MODULE(LapWarp);

/// Largest |cum_i - (res_i + cum~_{i+1})| over all levels.
double pyramid_invariant_deviation(const PyramidState& state);

/// Recomputes cum_1 from the stored residuals by explicit upsample-scale-add.
torch::Tensor recompose_from_residuals(const PyramidState& state);

} // namespace memwarp::network
