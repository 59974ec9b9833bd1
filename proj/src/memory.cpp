#include "memwarp/memory.hpp"

#include <string>

#include "memwarp/fieldops.hpp"

namespace memwarp::memory {

void MemoryConfig::validate() const {
    if (slots < 2) {
        throw ConfigError("memory needs at least 2 slots, got " + std::to_string(slots));
    }
    if (context_channels < 1) {
        throw ConfigError("memory context channels must be positive");
    }
}

SlotGeneratorImpl::SlotGeneratorImpl(const MemoryConfig& config) : config_(config) {
    config_.validate();
    hidden_ = register_module("hidden", torch::nn::Linear(config_.slots, config_.hidden_width()));
    out_ = register_module("out", torch::nn::Linear(config_.hidden_width(), config_.slot_dim()));
    // Small slot vectors keep the initial flow near zero; addressing only sees
    // normalised columns so it is unaffected by this scale.
    torch::NoGradGuard no_grad;
    out_->weight.uniform_(-1e-2, 1e-2);
    out_->bias.zero_();
}

torch::Tensor SlotGeneratorImpl::forward() {
    auto eye = torch::eye(config_.slots, hidden_->weight.options());
    auto slots = out_(torch::gelu(hidden_(eye))); // [N, 3C], row k = g(e_k)
    return slots.t();
}

torch::Tensor address(const torch::Tensor& query, const torch::Tensor& memory) {
    if (memory.dim() != 2) {
        throw ContractError("address: memory must be [3C, N]");
    }
    if (query.size(-1) != memory.size(0)) {
        throw ContractError("address: query width " + std::to_string(query.size(-1)) + " != slot dim " +
                            std::to_string(memory.size(0)));
    }
    auto norms = memory.norm(2, {0}, /*keepdim=*/true);
    if (norms.min().item<double>() <= 1e-12) {
        throw NumericError("address: degenerate memory (zero-norm slot column)");
    }
    auto logits = torch::matmul(query, memory / norms);
    return torch::softmax(logits, -1);
}

torch::Tensor generate_filters(const torch::Tensor& address_map, const torch::Tensor& memory) {
    if (memory.dim() != 2 || address_map.size(-1) != memory.size(1)) {
        throw ContractError("generate_filters: address map slots do not match memory columns");
    }
    if (memory.size(0) % 3 != 0) {
        throw ContractError("generate_filters: slot dim must be a multiple of 3");
    }
    auto flat = torch::matmul(address_map, memory.t()); // [..., 3C]
    auto sizes = flat.sizes().vec();
    sizes.back() = 3;
    sizes.push_back(memory.size(0) / 3);
    return flat.reshape(sizes);
}

torch::Tensor apply_dynamic_filters(const torch::Tensor& filters, const torch::Tensor& context) {
    if (filters.dim() < 2 || filters.size(-2) != 3) {
        throw ContractError("apply_dynamic_filters: filters must be [..., 3, C]");
    }
    if (context.size(-1) != filters.size(-1) || context.dim() + 1 != filters.dim() ||
        context.sizes().slice(0, context.dim() - 1) != filters.sizes().slice(0, filters.dim() - 2)) {
        throw ContractError("apply_dynamic_filters: context shape does not match filters");
    }
    return torch::matmul(filters, context.unsqueeze(-1)).squeeze(-1);
}

torch::Tensor argmax_lowest(const torch::Tensor& probabilities) {
    auto best = probabilities[0].clone();
    auto index = torch::zeros(best.sizes(), torch::kInt64);
    for (int64_t k = 1; k < probabilities.size(0); ++k) {
        auto better = probabilities[k] > best;
        index.masked_fill_(better, k);
        best = torch::where(better, probabilities[k], best);
    }
    return index;
}

Segmentation segmentation_from_address(const std::vector<torch::Tensor>& level_maps, const GridShape& full) {
    if (level_maps.empty()) {
        throw ContractError("segmentation_from_address: no address maps");
    }
    auto finest = level_maps.front().detach();
    if (finest.dim() != 4) {
        throw ContractError("segmentation_from_address: maps must be [N,h,w,d]");
    }
    finest = fieldops::upsample_to(finest.unsqueeze(0), full.dims()).squeeze(0);
    Segmentation seg;
    seg.probabilities = finest.contiguous();
    seg.labels = {argmax_lowest(seg.probabilities), static_cast<int>(finest.size(0)), full.spacing};
    return seg;
}

} // namespace memwarp::memory
