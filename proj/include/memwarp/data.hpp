#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "memwarp/types.hpp"

namespace memwarp::data {

inline constexpr int kPhantomClasses = 4;
/// Label order: background, RV, LVM, LVBP.
inline const std::array<std::string, kPhantomClasses> kClassNames{"background", "RV", "LVM", "LVBP"};

/// Short-axis cardiac phantom. Structures are stacks of in-plane shapes that
/// taper towards the first and last slices; lengths are in voxels.
struct PhantomSpec {
    GridShape shape{32, 32, 8, {1.8, 1.8, 10.0}};
    double lvbp_radius = 3.5;
    double lvm_thickness = 1.8;
    double rv_radius = 4.0; // in-plane semi-minor axis of the RV lobe
    double max_displacement = 1.9;
    std::array<double, 4> intensity{0.1, 0.75, 0.35, 0.9}; // per class
    double noise_sigma = 0.02;
    double edge_width = 0.6; // soft-boundary width of the intensity profile
    uint64_t seed = 7;

    void validate() const;
    nlohmann::json to_json() const;
    static PhantomSpec from_json(const nlohmann::json& j);
};

enum class Direction { ed_to_es, es_to_ed };
std::string to_string(Direction d);

struct RegistrationPair {
    std::string pair_id;
    std::string subject;
    Direction direction = Direction::ed_to_es;
    ImageVolume moving, fixed;
    LabelVolume moving_mask, fixed_mask;
    std::optional<DisplacementField> ground_truth; // warp(moving, gt) ~ fixed
};

struct PhantomSubject {
    std::string id;
    double amplitude = 0.0;
    ImageVolume ed, es;
    LabelVolume ed_seg, es_seg;
    DisplacementField ed_to_es; // pulls ED onto ES
    DisplacementField es_to_ed;

    RegistrationPair pair(Direction d) const;
};

/// ES is ED under a smooth in-plane contraction of the blood pools that
/// thickens the myocardium; labels and fields are evaluated analytically.
/// `noise = false` returns the clean normalised images.
PhantomSubject generate_phantom_subject(const PhantomSpec& spec, uint64_t seed, std::string id,
                                        bool noise = true);
/// The ED -> ES pair of one phantom subject.
RegistrationPair generate_phantom_pair(const PhantomSpec& spec, uint64_t seed);

/// Trilinear resample to `target_spacing`, centre crop/zero-pad to
/// `target_shape`, then min-max normalise to [0, 1]. Throws DataError on a
/// constant volume.
ImageVolume preprocess(const ImageVolume& vol, const Spacing& target_spacing,
                       const std::array<int64_t, 3>& target_shape);
/// Same geometry with nearest-neighbour resampling and no normalisation.
LabelVolume preprocess_labels(const LabelVolume& vol, const Spacing& target_spacing,
                              const std::array<int64_t, 3>& target_shape);
/// Min-max normalisation only.
ImageVolume normalize(const ImageVolume& vol);

struct CohortEntry {
    std::string pair_id;
    std::string subject;
    double stratify_key = 0.0;
};

struct CohortSplit {
    std::vector<std::string> train, val, test; // pair ids
};

/// Subject-disjoint split. Subjects are ordered by stratification key and
/// dealt so every key range is spread over the three splits in proportion.
CohortSplit split_cohort(const std::vector<CohortEntry>& pairs, const std::array<double, 3>& ratios, uint64_t seed);

// --- on-disk phantom dataset -------------------------------------------------

struct SubjectRecord {
    std::string id;
    std::string split; // "train" | "val" | "test"
    double amplitude = 0.0;
};

struct Manifest {
    PhantomSpec spec;
    std::vector<SubjectRecord> subjects;
    std::array<double, 3> ratios{0.6, 0.2, 0.2};

    nlohmann::json to_json() const;
    static Manifest from_json(const nlohmann::json& j);
    std::vector<std::string> subjects_in(const std::string& split) const;
};

/// Writes <root>/<subject>/{ed,es}_img.nii.gz, {ed,es}_seg.nii.gz, the two
/// ground-truth fields and <root>/manifest.json.
Manifest write_phantom_dataset(const PhantomSpec& spec, int subjects, const std::filesystem::path& root,
                               const std::array<double, 3>& ratios = {0.6, 0.2, 0.2});
Manifest read_manifest(const std::filesystem::path& root);

/// Every read of segmentation data through this module bumps this counter,
/// so callers can assert that a code path never touched masks.
std::atomic<int64_t>& mask_reads();

/// In-memory cohort loaded from a phantom dataset root.
class Dataset {
public:
    Dataset(const std::filesystem::path& root, bool with_masks);

    const Manifest& manifest() const { return manifest_; }
    bool has_masks() const { return with_masks_; }

    /// Pair ids of a split, both directions of each subject, in manifest order.
    std::vector<std::string> pairs(const std::string& split) const;
    const ImageVolume& moving(const std::string& pair_id) const;
    const ImageVolume& fixed(const std::string& pair_id) const;
    const LabelVolume& moving_mask(const std::string& pair_id) const;
    const LabelVolume& fixed_mask(const std::string& pair_id) const;
    GridShape shape() const { return manifest_.spec.shape; }

private:
    struct Subject {
        ImageVolume ed, es;
        std::optional<LabelVolume> ed_seg, es_seg;
    };
    const Subject& subject_of(const std::string& pair_id, bool& ed_moving) const;

    Manifest manifest_;
    bool with_masks_;
    std::vector<std::string> ids_;
    std::vector<Subject> subjects_;
};

std::string pair_id(const std::string& subject, Direction d);

} // namespace memwarp::data
