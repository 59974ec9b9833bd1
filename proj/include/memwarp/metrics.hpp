#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "memwarp/types.hpp"

namespace memwarp::metrics {

/// Raised when a metric has no defined value (e.g. HD95 with an empty class).
struct UndefinedMetric : std::domain_error {
    using std::domain_error::domain_error;
};

/// 2|A n B| / (|A| + |B|) for class k; 1 when both are empty.
double dice_score(const LabelVolume& a, const LabelVolume& b, int label);

/// Symmetric 95th-percentile surface distance in mm. Surfaces are the mask
/// voxels with a 6-neighbour outside the mask (or outside the grid); the two
/// directed distance sets are pooled before taking the percentile.
double hd95(const LabelVolume& a, const LabelVolume& b, int label, const Spacing& spacing);

/// Boundary voxels of class `label` as a bool grid.
torch::Tensor surface(const LabelVolume& mask, int label);

/// Percentile with linear interpolation between order statistics.
double percentile(std::vector<double> values, double q);

/// Std of log det J over interior voxels, det clamped to >= 1e-9.
double sdlogj(const DisplacementField& field);

/// Fraction of all voxels with det J <= 0.
double nonpositive_jacobian_fraction(const DisplacementField& field);

struct EvaluationReport {
    std::string pair_id;
    double dice_avg = 0.0;
    std::vector<double> dice; // foreground classes 1..K
    double hd95_mm = 0.0;     // NaN when no class had a defined value
    double sdlogj = 0.0;
    double nonpos_jac_frac = 0.0;
    int hd95_excluded = 0;
};

/// Warps the moving mask (nearest) and scores it against the fixed mask.
EvaluationReport evaluate_pair(const LabelVolume& fixed, const LabelVolume& moving, const DisplacementField& field,
                               const Spacing& spacing, std::string pair_id = {});

/// Column means; NaN HD95 entries are skipped.
EvaluationReport cohort_mean(const std::vector<EvaluationReport>& reports);

/// Columns: pair_id, dice_avg, dice_c1..cK, hd95_mm, sdlogj, nonpos_jac_frac.
/// A final row with pair_id "mean" holds the cohort mean.
void write_csv(const std::filesystem::path& path, const std::vector<EvaluationReport>& reports);
std::string to_csv(const std::vector<EvaluationReport>& reports);
nlohmann::json to_json(const std::vector<EvaluationReport>& reports);

} // namespace memwarp::metrics
