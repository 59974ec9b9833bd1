#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <torch/torch.h>

namespace memwarp {

// Error categories map one-to-one onto CLI exit codes (see tools/memwarp.cpp).
struct ContractError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Spacing = std::array<double, 3>;

struct GridShape {
    int64_t height = 0;
    int64_t width = 0;
    int64_t depth = 0;
    Spacing spacing{1.0, 1.0, 1.0};

    int64_t voxels() const { return height * width * depth; }
    std::array<int64_t, 3> dims() const { return {height, width, depth}; }
    bool same_dims(const GridShape& o) const {
        return height == o.height && width == o.width && depth == o.depth;
    }
    /// Throws ContractError unless every dim is >= 2 and every spacing is > 0.
    void validate() const;
    std::string str() const;

    static GridShape of(const torch::Tensor& t, Spacing spacing = {1.0, 1.0, 1.0});
};

/// Scalar intensity grid, tensor layout [H, W, D].
struct ImageVolume {
    torch::Tensor data;
    Spacing spacing{1.0, 1.0, 1.0};

    GridShape shape() const { return GridShape::of(data, spacing); }
};

/// Integer label grid [H, W, D] (int64), labels in {0..num_classes-1}, 0 = background.
struct LabelVolume {
    torch::Tensor labels;
    int num_classes = 0;
    Spacing spacing{1.0, 1.0, 1.0};

    GridShape shape() const { return GridShape::of(labels, spacing); }
    /// One-hot probability grid [N, H, W, D] in the requested dtype.
    torch::Tensor one_hot(torch::Dtype dtype = torch::kFloat32) const;
};

/// Per-voxel displacement u(x) in voxel units, layout [3, H, W, D];
/// component k offsets the index along axis k.
struct DisplacementField {
    torch::Tensor vectors;

    GridShape shape() const { return GridShape::of(vectors); }
};

/// Stationary velocity, same layout and units as DisplacementField.
struct VelocityField {
    torch::Tensor vectors;

    GridShape shape() const { return GridShape::of(vectors); }
};

} // namespace memwarp
