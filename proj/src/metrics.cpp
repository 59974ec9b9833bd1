#include "memwarp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>

#include "memwarp/fieldops.hpp"

namespace memwarp::metrics {

namespace {

void check_same(const LabelVolume& a, const LabelVolume& b, const char* what) {
    if (!a.shape().same_dims(b.shape())) {
        throw ContractError(std::string(what) + ": mask shapes differ " + a.shape().str() + " vs " + b.shape().str());
    }
}

constexpr double kFar = std::numeric_limits<double>::infinity();

// Squared Euclidean distance transform along one line (Felzenszwalb and
// Huttenlocher lower envelope), sample q at physical position q * step.
void edt_line(const double* f, double* out, int64_t n, double step, std::vector<int64_t>& v, std::vector<double>& z) {
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    int64_t k = -1;
    for (int64_t q = 0; q < n; ++q) {
        if (!std::isfinite(f[q])) {
            continue;
        }
        const double pq = q * step;
        while (k >= 0) {
            const double pv = v[k] * step;
            const double s = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2.0 * (pq - pv));
            if (s <= z[k]) {
                --k;
                continue;
            }
            ++k;
            v[k] = q;
            z[k] = s;
            z[k + 1] = kFar;
            break;
        }
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kFar;
            z[1] = kFar;
        }
    }
    if (k < 0) {
        std::fill(out, out + n, kFar);
        return;
    }
    int64_t j = 0;
    for (int64_t q = 0; q < n; ++q) {
        const double pq = q * step;
        while (z[j + 1] < pq) {
            ++j;
        }
        const double dv = pq - v[j] * step;
        out[q] = dv * dv + f[v[j]];
    }
}

// Squared distance (mm^2) from every voxel to the nearest `seed` voxel.
std::vector<double> squared_distance_map(const torch::Tensor& seeds, const Spacing& spacing) {
    const int64_t dims[3] = {seeds.size(0), seeds.size(1), seeds.size(2)};
    const int64_t stride[3] = {dims[1] * dims[2], dims[2], 1};
    auto acc = seeds.contiguous();
    const bool* s = acc.data_ptr<bool>();
    const int64_t total = dims[0] * dims[1] * dims[2];
    std::vector<double> grid(total);
    for (int64_t i = 0; i < total; ++i) {
        grid[i] = s[i] ? 0.0 : kFar;
    }
    std::vector<double> line, result;
    std::vector<int64_t> v;
    std::vector<double> z;
    for (int axis = 0; axis < 3; ++axis) {
        const int64_t n = dims[axis];
        line.resize(n);
        result.resize(n);
        const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
        for (int64_t i = 0; i < dims[a1]; ++i) {
            for (int64_t j = 0; j < dims[a2]; ++j) {
                const int64_t base = i * stride[a1] + j * stride[a2];
                for (int64_t q = 0; q < n; ++q) {
                    line[q] = grid[base + q * stride[axis]];
                }
                edt_line(line.data(), result.data(), n, spacing[axis], v, z);
                for (int64_t q = 0; q < n; ++q) {
                    grid[base + q * stride[axis]] = result[q];
                }
            }
        }
    }
    return grid;
}

void directed_distances(const torch::Tensor& from, const std::vector<double>& to_map, std::vector<double>& out) {
    auto f = from.contiguous();
    const bool* p = f.data_ptr<bool>();
    for (int64_t i = 0; i < f.numel(); ++i) {
        if (p[i]) {
            out.push_back(std::sqrt(to_map[i]));
        }
    }
}

torch::Tensor interior_mask(const torch::Tensor& grid) {
    auto m = torch::zeros(grid.sizes(), torch::kBool);
    using torch::indexing::Slice;
    m.index_put_({Slice(1, -1), Slice(1, -1), Slice(1, -1)}, true);
    return m;
}

std::string fmt(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

} // namespace

double dice_score(const LabelVolume& a, const LabelVolume& b, int label) {
    check_same(a, b, "dice_score");
    auto ma = a.labels == label;
    auto mb = b.labels == label;
    const double na = ma.sum().item<double>();
    const double nb = mb.sum().item<double>();
    if (na + nb == 0.0) {
        return 1.0;
    }
    const double inter = (ma & mb).sum().item<double>();
    return 2.0 * inter / (na + nb);
}

torch::Tensor surface(const LabelVolume& mask, int label) {
    auto m = mask.labels == label;
    // Erode with 6-connectivity, treating out-of-grid as outside.
    auto padded = torch::constant_pad_nd(m.to(torch::kUInt8), {1, 1, 1, 1, 1, 1}, 0);
    using torch::indexing::Slice;
    auto eroded = m.clone();
    const int64_t h = m.size(0), w = m.size(1), d = m.size(2);
    const int64_t offs[6][3] = {{0, 1, 1}, {2, 1, 1}, {1, 0, 1}, {1, 2, 1}, {1, 1, 0}, {1, 1, 2}};
    for (const auto& o : offs) {
        auto nb = padded.index({Slice(o[0], o[0] + h), Slice(o[1], o[1] + w), Slice(o[2], o[2] + d)});
        eroded = eroded & nb.to(torch::kBool);
    }
    return m & ~eroded;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) {
        throw UndefinedMetric("percentile of an empty set");
    }
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double hd95(const LabelVolume& a, const LabelVolume& b, int label, const Spacing& spacing) {
    check_same(a, b, "hd95");
    auto sa = surface(a, label);
    auto sb = surface(b, label);
    if (!sa.any().item<bool>() || !sb.any().item<bool>()) {
        throw UndefinedMetric("hd95: class " + std::to_string(label) + " is empty in at least one mask");
    }
    std::vector<double> pooled;
    directed_distances(sa, squared_distance_map(sb, spacing), pooled);
    directed_distances(sb, squared_distance_map(sa, spacing), pooled);
    return percentile(std::move(pooled), 95.0);
}

double sdlogj(const DisplacementField& field) {
    auto det = fieldops::jacobian_determinant(field);
    auto logdet = det.clamp_min(1e-9).log().masked_select(interior_mask(det));
    return logdet.std(/*unbiased=*/false).item<double>();
}

double nonpositive_jacobian_fraction(const DisplacementField& field) {
    auto det = fieldops::jacobian_determinant(field);
    return (det <= 0).to(torch::kFloat64).mean().item<double>();
}

EvaluationReport evaluate_pair(const LabelVolume& fixed, const LabelVolume& moving, const DisplacementField& field,
                               const Spacing& spacing, std::string pair_id) {
    check_same(fixed, moving, "evaluate_pair");
    if (fixed.num_classes != moving.num_classes) {
        throw ContractError("evaluate_pair: class count mismatch");
    }
    EvaluationReport r;
    r.pair_id = std::move(pair_id);
    auto warped = fieldops::warp(moving, field);
    double hd_sum = 0.0;
    int hd_count = 0;
    for (int k = 1; k < fixed.num_classes; ++k) {
        r.dice.push_back(dice_score(warped, fixed, k));
        try {
            hd_sum += hd95(warped, fixed, k, spacing);
            ++hd_count;
        } catch (const UndefinedMetric& e) {
            ++r.hd95_excluded;
            std::cerr << "warning: " << (r.pair_id.empty() ? "pair" : r.pair_id) << ": " << e.what()
                      << "; excluded from HD95 average\n";
        }
    }
    double sum = 0.0;
    for (double d : r.dice) {
        sum += d;
    }
    r.dice_avg = r.dice.empty() ? 0.0 : sum / static_cast<double>(r.dice.size());
    r.hd95_mm = hd_count > 0 ? hd_sum / hd_count : std::numeric_limits<double>::quiet_NaN();
    r.sdlogj = sdlogj(field);
    r.nonpos_jac_frac = nonpositive_jacobian_fraction(field);
    return r;
}

EvaluationReport cohort_mean(const std::vector<EvaluationReport>& reports) {
    EvaluationReport m;
    m.pair_id = "mean";
    if (reports.empty()) {
        return m;
    }
    const size_t k = reports.front().dice.size();
    m.dice.assign(k, 0.0);
    double hd = 0.0;
    int hd_n = 0;
    for (const auto& r : reports) {
        m.dice_avg += r.dice_avg;
        for (size_t c = 0; c < k && c < r.dice.size(); ++c) {
            m.dice[c] += r.dice[c];
        }
        if (!std::isnan(r.hd95_mm)) {
            hd += r.hd95_mm;
            ++hd_n;
        }
        m.sdlogj += r.sdlogj;
        m.nonpos_jac_frac += r.nonpos_jac_frac;
        m.hd95_excluded += r.hd95_excluded;
    }
    const double n = static_cast<double>(reports.size());
    m.dice_avg /= n;
    for (auto& d : m.dice) {
        d /= n;
    }
    m.hd95_mm = hd_n > 0 ? hd / hd_n : std::numeric_limits<double>::quiet_NaN();
    m.sdlogj /= n;
    m.nonpos_jac_frac /= n;
    return m;
}

std::string to_csv(const std::vector<EvaluationReport>& reports) {
    std::ostringstream os;
    const size_t k = reports.empty() ? 0 : reports.front().dice.size();
    os << "pair_id,dice_avg";
    for (size_t c = 1; c <= k; ++c) {
        os << ",dice_c" << c;
    }
    os << ",hd95_mm,sdlogj,nonpos_jac_frac\n";
    auto row = [&](const EvaluationReport& r) {
        os << r.pair_id << ',' << fmt(r.dice_avg);
        for (double d : r.dice) {
            os << ',' << fmt(d);
        }
        os << ',' << fmt(r.hd95_mm) << ',' << fmt(r.sdlogj) << ',' << fmt(r.nonpos_jac_frac) << '\n';
    };
    for (const auto& r : reports) {
        row(r);
    }
    row(cohort_mean(reports));
    return os.str();
}

void write_csv(const std::filesystem::path& path, const std::vector<EvaluationReport>& reports) {
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << to_csv(reports);
}

nlohmann::json to_json(const std::vector<EvaluationReport>& reports) {
    auto one = [](const EvaluationReport& r) {
        nlohmann::json j;
        j["pair_id"] = r.pair_id;
        j["dice_avg"] = r.dice_avg;
        j["dice"] = r.dice;
        j["hd95_mm"] = std::isnan(r.hd95_mm) ? nlohmann::json(nullptr) : nlohmann::json(r.hd95_mm);
        j["sdlogj"] = r.sdlogj;
        j["nonpos_jac_frac"] = r.nonpos_jac_frac;
        j["hd95_excluded"] = r.hd95_excluded;
        return j;
    };
    nlohmann::json out;
    out["pairs"] = nlohmann::json::array();
    for (const auto& r : reports) {
        out["pairs"].push_back(one(r));
    }
    out["mean"] = one(cohort_mean(reports));
    return out;
}

} // namespace memwarp::metrics
