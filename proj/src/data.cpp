#include "memwarp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "memwarp/volume_io.hpp"

namespace memwarp::data {

namespace fs = std::filesystem;

void PhantomSpec::validate() const {
    try {
        shape.validate();
    } catch (const ContractError& e) {
        throw ConfigError(std::string("phantom: ") + e.what());
    }
    const double min_dim = static_cast<double>(std::min({shape.height, shape.width, shape.depth}));
    if (!(max_displacement >= 0.0) || !(max_displacement < min_dim / 4.0)) {
        throw ConfigError("phantom: max_displacement must lie in [0, min_dim/4) = [0, " + std::to_string(min_dim / 4.0) +
                          ")");
    }
    if (!(lvbp_radius > 0.0) || !(lvm_thickness > 0.0) || !(rv_radius > 0.0)) {
        throw ConfigError("phantom: radii must be positive");
    }
    if (max_displacement >= 0.8 * std::min(lvbp_radius, rv_radius)) {
        throw ConfigError("phantom: max_displacement must stay below 0.8 x the smaller chamber radius");
    }
    const double extent = 2.0 * (lvbp_radius + lvm_thickness) + 2.0 * rv_radius + 2.0;
    if (extent > static_cast<double>(std::min(shape.height, shape.width))) {
        throw ConfigError("phantom: structures do not fit the in-plane grid");
    }
    if (noise_sigma < 0.0 || edge_width <= 0.0) {
        throw ConfigError("phantom: noise_sigma must be >= 0 and edge_width > 0");
    }
}

nlohmann::json PhantomSpec::to_json() const {
    return {{"shape", {shape.height, shape.width, shape.depth}},
            {"spacing", shape.spacing},
            {"lvbp_radius", lvbp_radius},
            {"lvm_thickness", lvm_thickness},
            {"rv_radius", rv_radius},
            {"max_displacement", max_displacement},
            {"intensity", intensity},
            {"noise_sigma", noise_sigma},
            {"edge_width", edge_width},
            {"seed", seed}};
}

PhantomSpec PhantomSpec::from_json(const nlohmann::json& j) {
    PhantomSpec s;
    try {
        if (j.contains("shape")) {
            auto d = j.at("shape").get<std::array<int64_t, 3>>();
            s.shape.height = d[0];
            s.shape.width = d[1];
            s.shape.depth = d[2];
        }
        s.shape.spacing = j.value("spacing", s.shape.spacing);
        s.lvbp_radius = j.value("lvbp_radius", s.lvbp_radius);
        s.lvm_thickness = j.value("lvm_thickness", s.lvm_thickness);
        s.rv_radius = j.value("rv_radius", s.rv_radius);
        s.max_displacement = j.value("max_displacement", s.max_displacement);
        s.intensity = j.value("intensity", s.intensity);
        s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
        s.edge_width = j.value("edge_width", s.edge_width);
        s.seed = j.value("seed", s.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("phantom spec: ") + e.what());
    }
    s.validate();
    return s;
}

std::string to_string(Direction d) {
    return d == Direction::ed_to_es ? "ED->ES" : "ES->ED";
}

std::string pair_id(const std::string& subject, Direction d) {
    return subject + (d == Direction::ed_to_es ? "_ed2es" : "_es2ed");
}

RegistrationPair PhantomSubject::pair(Direction d) const {
    RegistrationPair p;
    p.pair_id = data::pair_id(id, d);
    p.subject = id;
    p.direction = d;
    if (d == Direction::ed_to_es) {
        p.moving = ed;
        p.fixed = es;
        p.moving_mask = ed_seg;
        p.fixed_mask = es_seg;
        p.ground_truth = ed_to_es;
    } else {
        p.moving = es;
        p.fixed = ed;
        p.moving_mask = es_seg;
        p.fixed_mask = ed_seg;
        p.ground_truth = es_to_ed;
    }
    return p;
}

namespace {

double sigmoid(double t) {
    return 1.0 / (1.0 + std::exp(-t));
}

// Cosine fall-off from 1 at t = 0 to 0 at t = 1.
double falloff(double t) {
    if (t <= 0.0) {
        return 1.0;
    }
    if (t >= 1.0) {
        return 0.0;
    }
    return 0.5 * (1.0 + std::cos(M_PI * t));
}

constexpr double kLvTail = 2.0; // voxels

// Continuous geometry of one subject at end-diastole.
struct Heart {
    double cx, cy;        // LV axis
    double rb, re;        // blood pool and epicardial radii
    double rx, ry;        // RV lobe semi-axes
    double rvx, rvy;      // RV lobe centre
    double zc, rz;        // through-plane taper
    double amplitude;     // LV contraction (voxels)
    double rv_amplitude;  // RV contraction (voxels)
    double max_disp;
    double edge;
    std::array<double, 4> level;

    double taper(double z) const {
        const double t = (z - zc) / rz;
        return std::sqrt(std::max(0.25, 1.0 - t * t));
    }

    double lv_radius(double x, double y) const { return std::hypot(x - cx, y - cy); }

    double rv_ellipse(double x, double y, double s) const {
        return std::hypot((x - rvx) / (rx * s), (y - rvy) / (ry * s));
    }

    int label(double x, double y, double z) const {
        const double s = taper(z);
        const double r = lv_radius(x, y);
        if (r < rb * s) {
            return 3;
        }
        if (r < re * s) {
            return 2;
        }
        if (rv_ellipse(x, y, s) < 1.0) {
            return 1;
        }
        return 0;
    }

    double intensity(double x, double y, double z) const {
        const double s = taper(z);
        const double r = lv_radius(x, y);
        const double bp = sigmoid((rb * s - r) / edge);
        const double epi = sigmoid((re * s - r) / edge);
        const double rv = sigmoid((1.0 - rv_ellipse(x, y, s)) * ry * s / edge) * (1.0 - epi);
        const double bg = 1.0 - epi - rv;
        return level[0] * bg + level[1] * rv + level[2] * (epi - bp) + level[3] * bp;
    }

    // ED -> ES pull-back displacement (in-plane, voxels). ES(x) = ED(x + u(x)).
    // Both chambers use radial maps r_es -> r_ed that are strictly increasing,
    // so the field never folds.
    std::array<double, 3> displacement(double x, double y, double z) const {
        const double s = taper(z);
        double ux = 0.0, uy = 0.0;
        // LV: the blood pool shrinks by a, the epicardium by a / 4, so the
        // wall thickens; linear through the wall, cosine fall-off outside.
        const double r = lv_radius(x, y);
        if (r > 1e-12) {
            const double b_ed = rb * s, e_ed = re * s;
            const double a = amplitude * s;
            const double b_es = b_ed - a, e_es = e_ed - 0.25 * a;
            double r_ed;
            if (r <= b_es) {
                r_ed = r * b_ed / b_es;
            } else if (r <= e_es) {
                r_ed = b_ed + (r - b_es) * (e_ed - b_ed) / (e_es - b_es);
            } else {
                r_ed = r + 0.25 * a * falloff((r - e_es) / kLvTail);
            }
            const double k = (r_ed - r) / r;
            ux += k * (x - cx);
            uy += k * (y - cy);
        }
        // RV: the lobe contracts along rays from its centre; switched off
        // inside the LV so the septum slides.
        const double e = rv_ellipse(x, y, s);
        if (e > 1e-12) {
            const double q = 1.0 - rv_amplitude / rx; // ES boundary, elliptical units
            const double tail = 2.5 * (1.0 - q);
            const double e_ed = e <= q ? e / q : e + (1.0 - q) * falloff((e - q) / tail);
            const double k = (e_ed - e) / e * sigmoid((r - re * s) / 0.35);
            ux += k * (x - rvx);
            uy += k * (y - rvy);
        }
        const double mag = std::hypot(ux, uy);
        if (mag > max_disp) {
            ux *= max_disp / mag;
            uy *= max_disp / mag;
        }
        return {ux, uy, 0.0};
    }

    // Solves p + u(p) = (x, y) in-plane by damped Newton steps.
    std::array<double, 2> inverse(double x, double y, double z) const {
        auto residual = [&](double px, double py) {
            const auto u = displacement(px, py, z);
            return std::array<double, 2>{px + u[0] - x, py + u[1] - y};
        };
        double px = x, py = y;
        auto r = residual(px, py);
        constexpr double h = 1e-6;
        for (int it = 0; it < 50 && std::hypot(r[0], r[1]) > 1e-10; ++it) {
            const auto rx_ = residual(px + h, py), ry_ = residual(px, py + h);
            const double a = (rx_[0] - r[0]) / h, b = (ry_[0] - r[0]) / h;
            const double c = (rx_[1] - r[1]) / h, d = (ry_[1] - r[1]) / h;
            const double det = a * d - b * c;
            if (std::abs(det) < 1e-12) {
                break;
            }
            const double sx = (d * r[0] - b * r[1]) / det, sy = (a * r[1] - c * r[0]) / det;
            double t = 1.0;
            for (int back = 0; back < 20; ++back, t *= 0.5) {
                const auto trial = residual(px - t * sx, py - t * sy);
                if (std::hypot(trial[0], trial[1]) < std::hypot(r[0], r[1])) {
                    px -= t * sx;
                    py -= t * sy;
                    r = trial;
                    break;
                }
            }
        }
        return {px, py};
    }
};

Heart sample_heart(const PhantomSpec& spec, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto jitter = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    Heart h{};
    const double hgt = static_cast<double>(spec.shape.height);
    const double wid = static_cast<double>(spec.shape.width);
    const double dep = static_cast<double>(spec.shape.depth);
    h.rb = spec.lvbp_radius * jitter(0.9, 1.1);
    h.re = h.rb + spec.lvm_thickness * jitter(0.9, 1.15);
    h.ry = spec.rv_radius * jitter(0.9, 1.1);
    h.rx = 1.6 * h.ry;
    h.cx = (hgt - 1.0) / 2.0 + jitter(-1.5, 1.5);
    h.cy = (wid - 1.0) / 2.0 + 0.3 * h.ry + jitter(-1.0, 1.0);
    h.rvx = h.cx + jitter(-1.0, 1.0);
    h.rvy = h.cy - h.re - 0.3 * h.ry;
    h.zc = (dep - 1.0) / 2.0;
    h.rz = 0.8 * dep;
    h.amplitude = spec.max_displacement * jitter(0.85, 1.0);
    h.rv_amplitude = h.amplitude * jitter(0.9, 1.0);
    h.max_disp = spec.max_displacement;
    h.edge = spec.edge_width;
    h.level = spec.intensity;
    return h;
}

ImageVolume add_noise(const ImageVolume& vol, double sigma, std::mt19937_64& rng) {
    if (sigma <= 0.0) {
        return vol;
    }
    std::normal_distribution<double> gauss(0.0, sigma);
    auto out = vol.data.clone();
    auto* p = out.data_ptr<float>();
    for (int64_t i = 0; i < out.numel(); ++i) {
        p[i] = static_cast<float>(std::clamp(static_cast<double>(p[i]) + gauss(rng), 0.0, 1.0));
    }
    return {out, vol.spacing};
}

// Resample one axis of a [H,W,D] tensor to `m` samples, centre-aligned.
torch::Tensor resample_axis(const torch::Tensor& t, int64_t axis, int64_t m, double src_step, double dst_step,
                            bool nearest) {
    const int64_t n = t.size(axis);
    if (m == n && src_step == dst_step) {
        return t;
    }
    auto o = torch::arange(m, torch::kFloat64);
    auto pos = (o - (m - 1) / 2.0) * (dst_step / src_step) + (n - 1) / 2.0;
    pos = pos.clamp(0.0, static_cast<double>(n - 1));
    if (nearest) {
        return t.index_select(axis, torch::floor(pos + 0.5).clamp_max(n - 1).to(torch::kInt64));
    }
    auto lo = torch::floor(pos).clamp_max(std::max<int64_t>(n - 2, 0)).to(torch::kInt64);
    auto hi = (lo + 1).clamp_max(n - 1);
    auto frac = (pos - lo.to(torch::kFloat64)).to(t.scalar_type());
    std::vector<int64_t> view(3, 1);
    view[axis] = m;
    frac = frac.view(view);
    return t.index_select(axis, lo) * (1 - frac) + t.index_select(axis, hi) * frac;
}

torch::Tensor crop_or_pad(const torch::Tensor& t, const std::array<int64_t, 3>& target) {
    auto out = t;
    for (int64_t axis = 0; axis < 3; ++axis) {
        const int64_t n = out.size(axis);
        const int64_t want = target[axis];
        if (n > want) {
            out = out.narrow(axis, (n - want) / 2, want);
        } else if (n < want) {
            const int64_t before = (want - n) / 2;
            auto sizes = out.sizes().vec();
            sizes[axis] = want;
            auto padded = torch::zeros(sizes, out.options());
            padded.narrow(axis, before, n).copy_(out);
            out = padded;
        }
    }
    return out;
}

torch::Tensor resample(const torch::Tensor& t, const Spacing& src, const Spacing& dst, bool nearest) {
    auto out = t;
    for (int64_t axis = 0; axis < 3; ++axis) {
        const auto m = std::max<int64_t>(1, std::llround(t.size(axis) * src[axis] / dst[axis]));
        out = resample_axis(out, axis, m, src[axis], dst[axis], nearest);
    }
    return out;
}

} // namespace

ImageVolume normalize(const ImageVolume& vol) {
    auto data = vol.data.to(torch::kFloat32);
    const double lo = data.min().item<double>();
    const double hi = data.max().item<double>();
    if (!(hi > lo)) {
        throw DataError("cannot min-max normalise a constant volume");
    }
    return {((data - lo) / (hi - lo)).clamp(0.0, 1.0), vol.spacing};
}

ImageVolume preprocess(const ImageVolume& vol, const Spacing& target_spacing,
                       const std::array<int64_t, 3>& target_shape) {
    if (vol.data.dim() != 3) {
        throw ContractError("preprocess: expected a [H,W,D] volume");
    }
    auto data = resample(vol.data.to(torch::kFloat64), vol.spacing, target_spacing, false);
    data = crop_or_pad(data, target_shape);
    return normalize({data.to(torch::kFloat32), target_spacing});
}

LabelVolume preprocess_labels(const LabelVolume& vol, const Spacing& target_spacing,
                              const std::array<int64_t, 3>& target_shape) {
    auto data = resample(vol.labels, vol.spacing, target_spacing, true);
    return {crop_or_pad(data, target_shape).contiguous(), vol.num_classes, target_spacing};
}

PhantomSubject generate_phantom_subject(const PhantomSpec& spec, uint64_t seed, std::string id, bool noise) {
    spec.validate();
    std::mt19937_64 rng(seed);
    const Heart heart = sample_heart(spec, rng);
    const auto& g = spec.shape;
    const int64_t h = g.height, w = g.width, d = g.depth;

    auto ed = torch::empty({h, w, d}, torch::kFloat64);
    auto es = torch::empty({h, w, d}, torch::kFloat64);
    auto ed_seg = torch::empty({h, w, d}, torch::kInt64);
    auto es_seg = torch::empty({h, w, d}, torch::kInt64);
    auto fwd = torch::zeros({3, h, w, d}, torch::kFloat32);
    auto inv = torch::zeros({3, h, w, d}, torch::kFloat32);
    auto* ped = ed.data_ptr<double>();
    auto* pes = es.data_ptr<double>();
    auto* led = ed_seg.data_ptr<int64_t>();
    auto* les = es_seg.data_ptr<int64_t>();
    auto* pf = fwd.data_ptr<float>();
    auto* pi = inv.data_ptr<float>();
    const int64_t s = h * w * d;
    int64_t idx = 0;
    for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j < w; ++j) {
            for (int64_t k = 0; k < d; ++k, ++idx) {
                const double x = static_cast<double>(i), y = static_cast<double>(j), z = static_cast<double>(k);
                const auto u = heart.displacement(x, y, z);
                ped[idx] = heart.intensity(x, y, z);
                led[idx] = heart.label(x, y, z);
                pes[idx] = heart.intensity(x + u[0], y + u[1], z + u[2]);
                les[idx] = heart.label(x + u[0], y + u[1], z + u[2]);
                const auto inv_xy = heart.inverse(x, y, z);
                const double vx = inv_xy[0] - x, vy = inv_xy[1] - y;
                for (int c = 0; c < 3; ++c) {
                    pf[c * s + idx] = static_cast<float>(u[c]);
                }
                pi[idx] = static_cast<float>(vx);
                pi[s + idx] = static_cast<float>(vy);
            }
        }
    }
    PhantomSubject out;
    out.id = std::move(id);
    out.amplitude = heart.amplitude;
    out.ed = normalize({ed.to(torch::kFloat32), g.spacing});
    out.es = normalize({es.to(torch::kFloat32), g.spacing});
    if (noise) {
        out.ed = add_noise(out.ed, spec.noise_sigma, rng);
        out.es = add_noise(out.es, spec.noise_sigma, rng);
    }
    out.ed_seg = {ed_seg, kPhantomClasses, g.spacing};
    out.es_seg = {es_seg, kPhantomClasses, g.spacing};
    out.ed_to_es = {fwd};
    out.es_to_ed = {inv};
    return out;
}

RegistrationPair generate_phantom_pair(const PhantomSpec& spec, uint64_t seed) {
    return generate_phantom_subject(spec, seed, "phantom").pair(Direction::ed_to_es);
}

CohortSplit split_cohort(const std::vector<CohortEntry>& pairs, const std::array<double, 3>& ratios, uint64_t seed) {
    double total = 0.0;
    for (double r : ratios) {
        if (r < 0.0) {
            throw ConfigError("split ratios must be non-negative");
        }
        total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw ConfigError("split ratios must sum to 1");
    }
    // Subjects in first-seen order with their mean key.
    std::vector<std::string> subjects;
    std::map<std::string, std::pair<double, int>> keys;
    for (const auto& p : pairs) {
        auto [it, fresh] = keys.try_emplace(p.subject, 0.0, 0);
        if (fresh) {
            subjects.push_back(p.subject);
        }
        it->second.first += p.stratify_key;
        it->second.second += 1;
    }
    const auto n = static_cast<int64_t>(subjects.size());
    std::array<int64_t, 3> quota{std::llround(ratios[0] * n), std::llround(ratios[1] * n), 0};
    quota[2] = n - quota[0] - quota[1];
    for (int s = 0; s < 3; ++s) {
        if (quota[s] < 0 || (ratios[s] > 0.0 && quota[s] == 0)) {
            throw DataError("too few subjects (" + std::to_string(n) + ") for the requested split");
        }
    }
    auto order = subjects;
    auto mean_key = [&](const std::string& id) { return keys[id].first / keys[id].second; };
    std::stable_sort(order.begin(), order.end(), [&](const std::string& a, const std::string& b) {
        const double ka = mean_key(a), kb = mean_key(b);
        return ka != kb ? ka < kb : a < b;
    });
    std::mt19937_64 rng(seed);
    constexpr size_t kBlock = 5;
    for (size_t start = 0; start < order.size(); start += kBlock) {
        const auto end = std::min(order.size(), start + kBlock);
        std::shuffle(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end),
                     rng);
    }
    // Deal each subject to the split furthest behind its target share.
    std::map<std::string, int> assignment;
    std::array<int64_t, 3> assigned{0, 0, 0};
    for (size_t t = 0; t < order.size(); ++t) {
        int best = -1;
        double best_deficit = -1e300;
        for (int s = 0; s < 3; ++s) {
            if (assigned[s] >= quota[s]) {
                continue;
            }
            const double deficit =
                static_cast<double>(quota[s]) / static_cast<double>(n) * static_cast<double>(t + 1) - assigned[s];
            if (deficit > best_deficit) {
                best_deficit = deficit;
                best = s;
            }
        }
        assignment[order[t]] = best;
        ++assigned[best];
    }
    CohortSplit out;
    for (const auto& p : pairs) {
        switch (assignment[p.subject]) {
        case 0: out.train.push_back(p.pair_id); break;
        case 1: out.val.push_back(p.pair_id); break;
        default: out.test.push_back(p.pair_id); break;
        }
    }
    return out;
}

// --- manifest / on-disk dataset ----------------------------------------------

nlohmann::json Manifest::to_json() const {
    nlohmann::json j;
    j["spec"] = spec.to_json();
    j["class_names"] = kClassNames;
    j["ratios"] = ratios;
    j["layout"] = "<subject>/{ed,es}_img.nii.gz, <subject>/{ed,es}_seg.nii.gz";
    j["subjects"] = nlohmann::json::array();
    for (const auto& s : subjects) {
        j["subjects"].push_back({{"id", s.id}, {"split", s.split}, {"amplitude", s.amplitude}});
    }
    return j;
}

Manifest Manifest::from_json(const nlohmann::json& j) {
    Manifest m;
    try {
        m.spec = PhantomSpec::from_json(j.at("spec"));
        m.ratios = j.value("ratios", m.ratios);
        for (const auto& s : j.at("subjects")) {
            m.subjects.push_back({s.at("id").get<std::string>(), s.at("split").get<std::string>(),
                                  s.value("amplitude", 0.0)});
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    }
    return m;
}

std::vector<std::string> Manifest::subjects_in(const std::string& split) const {
    std::vector<std::string> out;
    for (const auto& s : subjects) {
        if (s.split == split) {
            out.push_back(s.id);
        }
    }
    return out;
}

Manifest write_phantom_dataset(const PhantomSpec& spec, int subjects, const fs::path& root,
                               const std::array<double, 3>& ratios) {
    spec.validate();
    if (subjects < 3) {
        throw ConfigError("a phantom dataset needs at least 3 subjects");
    }
    fs::create_directories(root);
    Manifest manifest;
    manifest.spec = spec;
    manifest.ratios = ratios;
    std::vector<CohortEntry> entries;
    std::seed_seq base{spec.seed};
    std::vector<uint64_t> seeds(static_cast<size_t>(subjects));
    {
        std::mt19937_64 rng(spec.seed);
        for (auto& s : seeds) {
            s = rng();
        }
    }
    for (int i = 0; i < subjects; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "subject_%03d", i);
        auto subj = generate_phantom_subject(spec, seeds[static_cast<size_t>(i)], name);
        const auto dir = root / name;
        io::write_volume(subj.ed, dir / "ed_img.nii.gz");
        io::write_volume(subj.es, dir / "es_img.nii.gz");
        io::write_volume(subj.ed_seg, dir / "ed_seg.nii.gz");
        io::write_volume(subj.es_seg, dir / "es_seg.nii.gz");
        io::write_field(subj.ed_to_es, dir / "ed_to_es_field.nii.gz", spec.shape.spacing);
        io::write_field(subj.es_to_ed, dir / "es_to_ed_field.nii.gz", spec.shape.spacing);
        manifest.subjects.push_back({name, "", subj.amplitude});
        for (auto d : {Direction::ed_to_es, Direction::es_to_ed}) {
            entries.push_back({pair_id(name, d), name, subj.amplitude});
        }
    }
    const auto split = split_cohort(entries, ratios, spec.seed);
    std::map<std::string, std::string> where;
    auto mark = [&](const std::vector<std::string>& ids, const char* tag) {
        for (const auto& id : ids) {
            where[id.substr(0, id.rfind('_'))] = tag;
        }
    };
    mark(split.train, "train");
    mark(split.val, "val");
    mark(split.test, "test");
    for (auto& s : manifest.subjects) {
        s.split = where[s.id];
    }
    std::ofstream out(root / "manifest.json");
    out << manifest.to_json().dump(2) << '\n';
    if (!out) {
        throw DataError("cannot write manifest in " + root.string());
    }
    return manifest;
}

Manifest read_manifest(const fs::path& root) {
    std::ifstream in(root / "manifest.json");
    if (!in) {
        throw DataError("no manifest.json under " + root.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    }
    return Manifest::from_json(j);
}

std::atomic<int64_t>& mask_reads() {
    static std::atomic<int64_t> counter{0};
    return counter;
}

Dataset::Dataset(const fs::path& root, bool with_masks) : manifest_(read_manifest(root)), with_masks_(with_masks) {
    for (const auto& rec : manifest_.subjects) {
        const auto dir = root / rec.id;
        Subject s;
        s.ed = io::read_image(dir / "ed_img.nii.gz");
        s.es = io::read_image(dir / "es_img.nii.gz");
        if (with_masks_) {
            mask_reads() += 2;
            s.ed_seg = io::read_labels(dir / "ed_seg.nii.gz", kPhantomClasses);
            s.es_seg = io::read_labels(dir / "es_seg.nii.gz", kPhantomClasses);
        }
        ids_.push_back(rec.id);
        subjects_.push_back(std::move(s));
    }
}

std::vector<std::string> Dataset::pairs(const std::string& split) const {
    std::vector<std::string> out;
    for (const auto& id : manifest_.subjects_in(split)) {
        out.push_back(pair_id(id, Direction::ed_to_es));
        out.push_back(pair_id(id, Direction::es_to_ed));
    }
    return out;
}

const Dataset::Subject& Dataset::subject_of(const std::string& pid, bool& ed_moving) const {
    const auto cut = pid.rfind('_');
    if (cut == std::string::npos) {
        throw DataError("malformed pair id '" + pid + "'");
    }
    const auto tag = pid.substr(cut + 1);
    if (tag != "ed2es" && tag != "es2ed") {
        throw DataError("malformed pair id '" + pid + "'");
    }
    ed_moving = tag == "ed2es";
    const auto it = std::find(ids_.begin(), ids_.end(), pid.substr(0, cut));
    if (it == ids_.end()) {
        throw DataError("unknown subject in pair id '" + pid + "'");
    }
    return subjects_[static_cast<size_t>(it - ids_.begin())];
}

const ImageVolume& Dataset::moving(const std::string& pid) const {
    bool ed_moving = false;
    const auto& s = subject_of(pid, ed_moving);
    return ed_moving ? s.ed : s.es;
}

const ImageVolume& Dataset::fixed(const std::string& pid) const {
    bool ed_moving = false;
    const auto& s = subject_of(pid, ed_moving);
    return ed_moving ? s.es : s.ed;
}

const LabelVolume& Dataset::moving_mask(const std::string& pid) const {
    if (!with_masks_) {
        throw ContractError("dataset was loaded without masks");
    }
    bool ed_moving = false;
    const auto& s = subject_of(pid, ed_moving);
    ++mask_reads();
    return ed_moving ? *s.ed_seg : *s.es_seg;
}

const LabelVolume& Dataset::fixed_mask(const std::string& pid) const {
    if (!with_masks_) {
        throw ContractError("dataset was loaded without masks");
    }
    bool ed_moving = false;
    const auto& s = subject_of(pid, ed_moving);
    ++mask_reads();
    return ed_moving ? *s.es_seg : *s.ed_seg;
}

} // namespace memwarp::data
