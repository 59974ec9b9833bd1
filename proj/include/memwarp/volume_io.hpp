#pragma once

#include <filesystem>
#include <variant>

#include <torch/torch.h>

#include "memwarp/types.hpp"

// Volume files. The format follows the extension:
//   .nii / .nii.gz   NIfTI-1 single file (gzip through zlib)
//   .mwv             one JSON header line, then raw little-endian data
// Integer volumes are read back as LabelVolume, 3-component vector intents as
// DisplacementField, everything else as ImageVolume. Fields are stored as
// [H, W, D, 1, 3] with their voxel-unit semantics recorded in the header.
namespace memwarp::io {

using AnyVolume = std::variant<ImageVolume, LabelVolume, DisplacementField>;

AnyVolume read_volume(const std::filesystem::path& path);
ImageVolume read_image(const std::filesystem::path& path);
/// num_classes <= 0 infers max label + 1.
LabelVolume read_labels(const std::filesystem::path& path, int num_classes = 0);
DisplacementField read_field(const std::filesystem::path& path);

void write_volume(const ImageVolume& vol, const std::filesystem::path& path);
void write_volume(const LabelVolume& vol, const std::filesystem::path& path);
void write_field(const DisplacementField& field, const std::filesystem::path& path,
                 const Spacing& spacing = {1.0, 1.0, 1.0});
/// Class probabilities [N, H, W, D] as a 4-D float volume.
void write_probabilities(const torch::Tensor& probabilities, const std::filesystem::path& path,
                         const Spacing& spacing);
/// Reads a [N, H, W, D] probability volume written by write_probabilities.
torch::Tensor read_probabilities(const std::filesystem::path& path);

} // namespace memwarp::io
