#include "memwarp/types.hpp"

#include <sstream>

namespace memwarp {

void GridShape::validate() const {
    if (height < 2 || width < 2 || depth < 2) {
        throw ContractError("grid dims must all be >= 2, got " + str());
    }
    for (double s : spacing) {
        if (!(s > 0.0)) {
            throw ContractError("grid spacing must be positive, got " + str());
        }
    }
}

std::string GridShape::str() const {
    std::ostringstream os;
    os << '(' << height << ',' << width << ',' << depth << ")@(" << spacing[0] << ',' << spacing[1] << ','
       << spacing[2] << ')';
    return os.str();
}

GridShape GridShape::of(const torch::Tensor& t, Spacing spacing) {
    if (t.dim() < 3) {
        throw ContractError("tensor has fewer than 3 spatial dims");
    }
    return {t.size(-3), t.size(-2), t.size(-1), spacing};
}

torch::Tensor LabelVolume::one_hot(torch::Dtype dtype) const {
    if (num_classes < 1) {
        throw ContractError("label volume has no classes");
    }
    auto oh = torch::one_hot(labels.to(torch::kInt64), num_classes); // [H,W,D,N]
    return oh.permute({3, 0, 1, 2}).to(dtype).contiguous();
}

} // namespace memwarp
