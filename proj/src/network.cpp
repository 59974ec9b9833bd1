#include "memwarp/network.hpp"

#include <cmath>
#include <string>

#include "memwarp/fieldops.hpp"

namespace memwarp::network {

int min_pyramid_levels(double d_max) {
    if (!(d_max >= 0.0)) {
        throw ContractError("min_pyramid_levels: d_max must be >= 0");
    }
    int n = 1;
    while (std::ldexp(1.0, n - 1) <= d_max) {
        ++n;
    }
    return n;
}

void NetworkConfig::validate() const {
    if (levels < 2) {
        throw ConfigError("network needs at least 2 pyramid levels, got " + std::to_string(levels));
    }
    if (static_cast<int>(channels.size()) != levels) {
        throw ConfigError("network: " + std::to_string(channels.size()) + " channel entries for " +
                          std::to_string(levels) + " levels");
    }
    for (auto c : channels) {
        if (c <= 0) {
            throw ConfigError("network: channel counts must be positive");
        }
    }
    if (integration_steps < 0) {
        throw ConfigError("network: integration steps must be >= 0");
    }
    if (memory && memory_slots < 2) {
        throw ConfigError("network: memory needs at least 2 slots");
    }
    if (min_pyramid_levels(max_displacement) > levels) {
        throw ConfigError("network: " + std::to_string(levels) + " levels cannot cover d_max = " +
                          std::to_string(max_displacement) + " voxels (need " +
                          std::to_string(min_pyramid_levels(max_displacement)) + ")");
    }
}

const LevelState& PyramidState::at(int level) const {
    for (const auto& s : decoded) {
        if (s.level == level) {
            return s;
        }
    }
    throw ContractError("pyramid level " + std::to_string(level) + " has not been decoded");
}

int PyramidState::next_level() const {
    return decoded.empty() ? levels : decoded.back().level - 1;
}

// ---------------------------------------------------------------------------

ConvUnitImpl::ConvUnitImpl(int64_t in, int64_t out, int64_t stride, bool large_kernel) {
    conv_ = register_module("conv", torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 3).stride(stride).padding(1)));
    if (large_kernel) {
        conv5_ = register_module("conv5",
                                 torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 5).stride(stride).padding(2)));
        conv1_ = register_module("conv1", torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 1).stride(stride)));
        identity_ = in == out && stride == 1;
    }
    norm_ = register_module("norm", torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(out).affine(true)));
}

torch::Tensor ConvUnitImpl::forward(const torch::Tensor& x) {
    auto y = conv_(x);
    if (!conv5_.is_empty()) {
        y = y + conv5_(x) + conv1_(x);
        if (identity_) {
            y = y + x;
        }
    }
    return torch::leaky_relu(norm_(y), 0.2);
}

FlowGeneratorImpl::FlowGeneratorImpl(int64_t decoder_channels, int64_t context_channels, bool use_memory, int slots,
                                     bool large_kernel) {
    ctx1_ = register_module("ctx1", ConvUnit(2 * decoder_channels, context_channels, 1, large_kernel));
    ctx2_ = register_module("ctx2", ConvUnit(context_channels, context_channels, 1, large_kernel));
    if (use_memory) {
        memory::MemoryConfig mc;
        mc.slots = slots;
        mc.context_channels = context_channels;
        slots_ = register_module("memory", memory::SlotGenerator(mc));
    } else {
        head_ = register_module("head", torch::nn::Conv3d(torch::nn::Conv3dOptions(context_channels, 3, 1)));
        torch::NoGradGuard no_grad;
        head_->weight.normal_(0.0, 1e-5);
        head_->bias.zero_();
    }
}

torch::Tensor FlowGeneratorImpl::context(const torch::Tensor& moving, const torch::Tensor& fixed) {
    return ctx2_(ctx1_(torch::cat({moving, fixed}, 1)));
}

FlowGeneratorImpl::Output FlowGeneratorImpl::forward(const torch::Tensor& moving, const torch::Tensor& fixed) {
    auto ctx = context(moving, fixed);
    if (!uses_memory()) {
        return {head_(ctx), torch::Tensor()};
    }
    auto mem = slots_->forward();                                    // [3C, N]
    auto query = fixed.permute({0, 2, 3, 4, 1});                     // [B, h, w, d, 3C]
    auto address = memory::address(query, mem);                      // [B, h, w, d, N]
    auto filters = memory::generate_filters(address, mem);           // [B, h, w, d, 3, C]
    auto flow = memory::apply_dynamic_filters(filters, ctx.permute({0, 2, 3, 4, 1}));
    return {flow.permute({0, 4, 1, 2, 3}), address.permute({0, 4, 1, 2, 3})};
}

void FlowGeneratorImpl::zero_output() {
    torch::NoGradGuard no_grad;
    if (uses_memory()) {
        // Zero slot vectors would make addressing degenerate; zeroing the
        // context path instead gives zero flow with valid slots.
        for (auto& p : ctx2_->parameters()) {
            p.zero_();
        }
    } else {
        head_->weight.zero_();
        head_->bias.zero_();
    }
}

// ---------------------------------------------------------------------------

LapWarpImpl::LapWarpImpl(NetworkConfig config) : config_(std::move(config)) {
    config_.validate();
    const bool lk = config_.use_large_kernel;
    for (int level = 1; level <= config_.levels; ++level) {
        const int64_t c = config_.channels[level - 1];
        torch::nn::Sequential enc;
        if (level == 1) {
            enc->push_back(ConvUnit(1, c, 1, lk));
        } else {
            enc->push_back(ConvUnit(config_.channels[level - 2], c, 2, false));
        }
        enc->push_back(ConvUnit(c, c, 1, lk));
        encoder_.push_back(register_module("enc" + std::to_string(level), enc));
    }
    for (int level = 1; level <= config_.levels; ++level) {
        const int64_t in = config_.channels[level - 1] +
                           (level < config_.levels ? config_.decoder_channels(level + 1) : 0);
        const int64_t out = config_.decoder_channels(level);
        torch::nn::Sequential dec;
        dec->push_back(ConvUnit(in, out, 1, lk));
        dec->push_back(ConvUnit(out, out, 1, lk));
        decoder_.push_back(register_module("dec" + std::to_string(level), dec));
        if (config_.has_flow(level)) {
            flow_.push_back(register_module("flow" + std::to_string(level),
                                            FlowGenerator(out, config_.context_channels(level), config_.memory,
                                                          config_.memory_slots, lk)));
        } else {
            flow_.push_back(FlowGenerator(nullptr));
        }
    }
}

EncodedPair LapWarpImpl::encode(const torch::Tensor& moving, const torch::Tensor& fixed) {
    if (moving.sizes() != fixed.sizes()) {
        throw ContractError("encode: moving and fixed shapes differ");
    }
    if (moving.dim() != 5 || moving.size(1) != 1) {
        throw ContractError("encode: expected [B,1,H,W,D] inputs");
    }
    if (!torch::isfinite(moving).all().item<bool>() || !torch::isfinite(fixed).all().item<bool>()) {
        throw NumericError("encode: non-finite input");
    }
    const std::array<int64_t, 3> full{moving.size(2), moving.size(3), moving.size(4)};
    for (auto n : fieldops::level_dims(full, config_.levels)) {
        if (n < 2) {
            throw ContractError("encode: input too small for " + std::to_string(config_.levels) + " levels");
        }
    }
    const int64_t b = moving.size(0);
    auto x = torch::cat({moving, fixed}, 0);
    EncodedPair out;
    for (auto& level : encoder_) {
        x = level->forward(x);
        out.moving.push_back(x.narrow(0, 0, b));
        out.fixed.push_back(x.narrow(0, b, b));
    }
    return out;
}

torch::Tensor LapWarpImpl::apply_diffeomorphic_layer(const torch::Tensor& raw, int level) const {
    if (config_.integrates(level)) {
        return fieldops::integrate_velocity(raw, config_.integration_steps);
    }
    return raw;
}

void LapWarpImpl::decode_level(int level, const EncodedPair& features, PyramidState& state) {
    if (level != state.next_level()) {
        throw ContractError("decode_level: expected level " + std::to_string(state.next_level()) + ", got " +
                            std::to_string(level));
    }
    const auto& enc_m = features.moving.at(level - 1);
    const auto& enc_f = features.fixed.at(level - 1);
    const int64_t b = enc_m.size(0);
    const bool coarsest = level == config_.levels;
    const std::array<int64_t, 3> dims{enc_m.size(2), enc_m.size(3), enc_m.size(4)};

    torch::Tensor moving_in, fixed_in;
    if (coarsest) {
        moving_in = enc_m;
        fixed_in = enc_f;
    } else {
        const auto& prev = state.decoded.back();
        auto up_m = fieldops::upsample2(prev.moving_features, dims);
        auto up_f = fieldops::upsample2(prev.fixed_features, dims);
        if (config_.pyramid) {
            moving_in = torch::cat({fieldops::warp(enc_m, prev.cumulative_up), fieldops::warp(up_m, prev.residual_up)}, 1);
        } else {
            moving_in = torch::cat({enc_m, up_m}, 1);
        }
        fixed_in = torch::cat({enc_f, up_f}, 1);
    }

    auto decoded = decoder_[level - 1]->forward(torch::cat({moving_in, fixed_in}, 0));
    LevelState s;
    s.level = level;
    s.moving_features = decoded.narrow(0, 0, b);
    s.fixed_features = decoded.narrow(0, b, b);

    if (config_.has_flow(level)) {
        auto out = flow_[level - 1]->forward(s.moving_features, s.fixed_features);
        s.raw_flow = out.flow;
        s.address = out.address;
        s.residual = apply_diffeomorphic_layer(out.flow, level);
    } else {
        s.residual = fieldops::zeros_field(b, dims, enc_m.options());
        s.raw_flow = s.residual;
    }
    s.cumulative = coarsest ? s.residual : s.residual + state.decoded.back().cumulative_up;

    if (level > 1) {
        const auto finer = fieldops::level_dims(state.full, level - 1);
        s.cumulative_up = fieldops::upsample_scale2(s.cumulative, finer);
        s.residual_up = fieldops::upsample_scale2(s.residual, finer);
    }
    state.decoded.push_back(std::move(s));
}

ForwardResult LapWarpImpl::forward(const torch::Tensor& moving, const torch::Tensor& fixed) {
    auto features = encode(moving, fixed);
    ForwardResult result;
    result.state.levels = config_.levels;
    result.state.full = {moving.size(2), moving.size(3), moving.size(4)};
    for (int level = config_.levels; level >= 1; --level) {
        decode_level(level, features, result.state);
    }
    result.field = result.state.at(1).cumulative;
    for (int level = 1; level <= config_.levels; ++level) {
        const auto& s = result.state.at(level);
        if (s.address.defined()) {
            result.address_maps.push_back(s.address);
        }
    }
    const double dev = pyramid_invariant_deviation(result.state);
    if (!(dev <= 1e-6)) {
        throw NumericError("forward: pyramid invariant violated by " + std::to_string(dev));
    }
    return result;
}

void LapWarpImpl::zero_flow_generators() {
    for (auto& f : flow_) {
        if (!f.is_empty()) {
            f->zero_output();
        }
    }
}

double pyramid_invariant_deviation(const PyramidState& state) {
    torch::NoGradGuard no_grad;
    double worst = 0.0;
    for (int level = state.levels; level >= 1; --level) {
        const auto& s = state.at(level);
        auto expected = level == state.levels ? s.residual : s.residual + state.at(level + 1).cumulative_up;
        worst = std::max(worst, (s.cumulative - expected).abs().max().item<double>());
    }
    return worst;
}

torch::Tensor recompose_from_residuals(const PyramidState& state) {
    torch::NoGradGuard no_grad;
    torch::Tensor cumulative;
    for (int level = state.levels; level >= 1; --level) {
        const auto& residual = state.at(level).residual;
        cumulative = level == state.levels ? residual : residual + cumulative;
        if (level > 1) {
            cumulative = fieldops::upsample_scale2(cumulative, fieldops::level_dims(state.full, level - 1));
        }
    }
    return cumulative;
}

} // namespace memwarp::network
