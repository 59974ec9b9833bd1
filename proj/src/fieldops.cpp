#include "memwarp/fieldops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace memwarp::fieldops {

namespace {

using torch::indexing::Slice;

void check_pair(const torch::Tensor& vol, const torch::Tensor& field) {
    if (vol.dim() != 5 || field.dim() != 5) {
        throw ContractError("warp: expected 5-D tensors [B,C,H,W,D] and [B,3,H,W,D]");
    }
    if (field.size(1) != 3) {
        throw ContractError("warp: field must have 3 components");
    }
    if (vol.size(0) != field.size(0) || vol.size(2) != field.size(2) ||
        vol.size(3) != field.size(3) || vol.size(4) != field.size(4)) {
        throw ContractError("warp: volume and field grid shapes differ");
    }
}

template <typename T>
struct AxisSample {
    int64_t lo = 0;
    int64_t hi = 0;
    T frac = 0;
    // Sample position lies within [0, n-1]; outside, the clamp has zero slope.
    bool inside = false;
};

template <typename T>
AxisSample<T> locate(T p, int64_t n) {
    AxisSample<T> s;
    const T last = static_cast<T>(n - 1);
    s.inside = n > 1 && p >= T(0) && p <= last;
    if (n == 1) {
        return s;
    }
    const T q = std::clamp(p, T(0), last);
    s.lo = std::min<int64_t>(static_cast<int64_t>(std::floor(q)), n - 2);
    s.hi = s.lo + 1;
    s.frac = q - static_cast<T>(s.lo);
    return s;
}

template <typename T>
int64_t nearest_index(T p, int64_t n) {
    const T q = std::clamp(p, T(0), static_cast<T>(n - 1));
    return std::min<int64_t>(static_cast<int64_t>(std::floor(q + T(0.5))), n - 1);
}

struct Geometry {
    int64_t batch, channels, h, w, d;
    int64_t spatial() const { return h * w * d; }
};

Geometry geometry(const torch::Tensor& vol) {
    return {vol.size(0), vol.size(1), vol.size(2), vol.size(3), vol.size(4)};
}

// Eight trilinear corners of one sample position.
template <typename T>
struct Stencil {
    AxisSample<T> ax[3];
    int64_t offset[8];
    T weight[8];

    void build(const Geometry& g, T p0, T p1, T p2) {
        ax[0] = locate(p0, g.h);
        ax[1] = locate(p1, g.w);
        ax[2] = locate(p2, g.d);
        for (int corner = 0; corner < 8; ++corner) {
            const int a = (corner >> 2) & 1, b = (corner >> 1) & 1, c = corner & 1;
            const int64_t i = a ? ax[0].hi : ax[0].lo;
            const int64_t j = b ? ax[1].hi : ax[1].lo;
            const int64_t k = c ? ax[2].hi : ax[2].lo;
            offset[corner] = (i * g.w + j) * g.d + k;
            weight[corner] = (a ? ax[0].frac : 1 - ax[0].frac) * (b ? ax[1].frac : 1 - ax[1].frac) *
                             (c ? ax[2].frac : 1 - ax[2].frac);
        }
    }
};

template <typename T>
void warp_forward_kernel(const torch::Tensor& vol, const torch::Tensor& field, torch::Tensor& out,
                         Interp interp) {
    const Geometry g = geometry(vol);
    const int64_t s = g.spatial();
    const T* v = vol.data_ptr<T>();
    const T* u = field.data_ptr<T>();
    T* o = out.data_ptr<T>();
    for (int64_t b = 0; b < g.batch; ++b) {
        const T* ub = u + b * 3 * s;
        const T* vb = v + b * g.channels * s;
        T* ob = o + b * g.channels * s;
        int64_t idx = 0;
        for (int64_t i = 0; i < g.h; ++i) {
            for (int64_t j = 0; j < g.w; ++j) {
                for (int64_t k = 0; k < g.d; ++k, ++idx) {
                    const T p0 = static_cast<T>(i) + ub[idx];
                    const T p1 = static_cast<T>(j) + ub[s + idx];
                    const T p2 = static_cast<T>(k) + ub[2 * s + idx];
                    if (interp == Interp::nearest) {
                        const int64_t src = (nearest_index(p0, g.h) * g.w + nearest_index(p1, g.w)) * g.d +
                                            nearest_index(p2, g.d);
                        for (int64_t c = 0; c < g.channels; ++c) {
                            ob[c * s + idx] = vb[c * s + src];
                        }
                        continue;
                    }
                    Stencil<T> st;
                    st.build(g, p0, p1, p2);
                    for (int64_t c = 0; c < g.channels; ++c) {
                        const T* vc = vb + c * s;
                        T acc = 0;
                        for (int corner = 0; corner < 8; ++corner) {
                            acc += st.weight[corner] * vc[st.offset[corner]];
                        }
                        ob[c * s + idx] = acc;
                    }
                }
            }
        }
    }
}

template <typename T>
void warp_backward_kernel(const torch::Tensor& vol, const torch::Tensor& field,
                          const torch::Tensor& grad_out, torch::Tensor* grad_vol,
                          torch::Tensor* grad_field, Interp interp) {
    const Geometry g = geometry(vol);
    const int64_t s = g.spatial();
    const T* v = vol.data_ptr<T>();
    const T* u = field.data_ptr<T>();
    const T* go = grad_out.data_ptr<T>();
    T* gv = grad_vol ? grad_vol->data_ptr<T>() : nullptr;
    T* gf = grad_field ? grad_field->data_ptr<T>() : nullptr;
    for (int64_t b = 0; b < g.batch; ++b) {
        const T* ub = u + b * 3 * s;
        const T* vb = v + b * g.channels * s;
        const T* gob = go + b * g.channels * s;
        T* gvb = gv ? gv + b * g.channels * s : nullptr;
        T* gfb = gf ? gf + b * 3 * s : nullptr;
        int64_t idx = 0;
        for (int64_t i = 0; i < g.h; ++i) {
            for (int64_t j = 0; j < g.w; ++j) {
                for (int64_t k = 0; k < g.d; ++k, ++idx) {
                    const T p0 = static_cast<T>(i) + ub[idx];
                    const T p1 = static_cast<T>(j) + ub[s + idx];
                    const T p2 = static_cast<T>(k) + ub[2 * s + idx];
                    if (interp == Interp::nearest) {
                        if (gvb) {
                            const int64_t src = (nearest_index(p0, g.h) * g.w + nearest_index(p1, g.w)) * g.d +
                                                nearest_index(p2, g.d);
                            for (int64_t c = 0; c < g.channels; ++c) {
                                gvb[c * s + src] += gob[c * s + idx];
                            }
                        }
                        continue;
                    }
                    Stencil<T> st;
                    st.build(g, p0, p1, p2);
                    T dp[3] = {0, 0, 0};
                    const T fx = st.ax[0].frac, fy = st.ax[1].frac, fz = st.ax[2].frac;
                    for (int64_t c = 0; c < g.channels; ++c) {
                        const T gout = gob[c * s + idx];
                        if (gvb) {
                            T* gvc = gvb + c * s;
                            for (int corner = 0; corner < 8; ++corner) {
                                gvc[st.offset[corner]] += st.weight[corner] * gout;
                            }
                        }
                        if (gfb) {
                            const T* vc = vb + c * s;
                            T val[8];
                            for (int corner = 0; corner < 8; ++corner) {
                                val[corner] = vc[st.offset[corner]];
                            }
                            // corner bits: (axis0, axis1, axis2)
                            const T d0 = (1 - fy) * (1 - fz) * (val[4] - val[0]) + fy * (1 - fz) * (val[6] - val[2]) +
                                         (1 - fy) * fz * (val[5] - val[1]) + fy * fz * (val[7] - val[3]);
                            const T d1 = (1 - fx) * (1 - fz) * (val[2] - val[0]) + fx * (1 - fz) * (val[6] - val[4]) +
                                         (1 - fx) * fz * (val[3] - val[1]) + fx * fz * (val[7] - val[5]);
                            const T d2 = (1 - fx) * (1 - fy) * (val[1] - val[0]) + fx * (1 - fy) * (val[5] - val[4]) +
                                         (1 - fx) * fy * (val[3] - val[2]) + fx * fy * (val[7] - val[6]);
                            dp[0] += gout * d0;
                            dp[1] += gout * d1;
                            dp[2] += gout * d2;
                        }
                    }
                    if (gfb) {
                        for (int a = 0; a < 3; ++a) {
                            gfb[a * s + idx] = st.ax[a].inside ? dp[a] : T(0);
                        }
                    }
                }
            }
        }
    }
}

torch::Tensor warp_forward(const torch::Tensor& vol, const torch::Tensor& field, Interp interp) {
    auto out = torch::empty_like(vol);
    AT_DISPATCH_FLOATING_TYPES(vol.scalar_type(), "memwarp_warp_forward",
                               [&] { warp_forward_kernel<scalar_t>(vol, field, out, interp); });
    return out;
}

class WarpFunction : public torch::autograd::Function<WarpFunction> {
public:
    static torch::Tensor forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& vol,
                                 const torch::Tensor& field, int64_t interp) {
        ctx->save_for_backward({vol, field});
        ctx->saved_data["interp"] = interp;
        return warp_forward(vol, field, static_cast<Interp>(interp));
    }

    static torch::autograd::tensor_list backward(torch::autograd::AutogradContext* ctx,
                                                 torch::autograd::tensor_list grad_outputs) {
        const auto saved = ctx->get_saved_variables();
        const auto& vol = saved[0];
        const auto& field = saved[1];
        const auto interp = static_cast<Interp>(ctx->saved_data["interp"].toInt());
        const auto grad_out = grad_outputs[0].contiguous();
        torch::Tensor grad_vol, grad_field;
        const bool need_vol = ctx->needs_input_grad(0);
        const bool need_field = ctx->needs_input_grad(1) && interp == Interp::trilinear;
        if (need_vol) {
            grad_vol = torch::zeros_like(vol);
        }
        if (need_field) {
            grad_field = torch::zeros_like(field);
        }
        if (need_vol || need_field) {
            AT_DISPATCH_FLOATING_TYPES(vol.scalar_type(), "memwarp_warp_backward", [&] {
                warp_backward_kernel<scalar_t>(vol, field, grad_out, need_vol ? &grad_vol : nullptr,
                                               need_field ? &grad_field : nullptr, interp);
            });
        }
        if (ctx->needs_input_grad(1) && !grad_field.defined()) {
            grad_field = torch::zeros_like(field);
        }
        return {grad_vol, grad_field, torch::Tensor()};
    }
};

std::array<int64_t, 3> spatial_dims(const torch::Tensor& t) {
    return {t.size(-3), t.size(-2), t.size(-1)};
}

void check_field3(const torch::Tensor& field, const char* what) {
    if (field.dim() != 4 || field.size(0) != 3) {
        throw ContractError(std::string(what) + ": expected a [3,H,W,D] field");
    }
}

} // namespace

torch::Tensor warp(const torch::Tensor& vol, const torch::Tensor& field, Interp interp) {
    check_pair(vol, field);
    if (!vol.is_floating_point()) {
        throw ContractError("warp: volume must be floating point");
    }
    auto f = field.to(vol.scalar_type()).contiguous();
    return WarpFunction::apply(vol.contiguous(), f, static_cast<int64_t>(interp));
}

torch::Tensor compose(const torch::Tensor& outer, const torch::Tensor& inner) {
    if (outer.sizes() != inner.sizes()) {
        throw ContractError("compose: field shapes differ");
    }
    return inner + warp(outer, inner, Interp::trilinear);
}

torch::Tensor integrate_velocity(const torch::Tensor& velocity, int steps) {
    if (steps < 0) {
        throw ContractError("integrate_velocity: steps must be >= 0");
    }
    if (steps == 0) {
        return velocity;
    }
    auto u = velocity / std::ldexp(1.0, steps);
    for (int s = 0; s < steps; ++s) {
        u = compose(u, u);
    }
    return u;
}

torch::Tensor upsample2(const torch::Tensor& x, std::array<int64_t, 3> target) {
    if (x.dim() != 5) {
        throw ContractError("upsample2: expected [B,C,H,W,D]");
    }
    namespace F = torch::nn::functional;
    const auto in = spatial_dims(x);
    std::vector<int64_t> doubled;
    for (auto n : in) {
        doubled.push_back(2 * n - 1);
    }
    // align_corners with size 2n-1 maps fine index o to coarse o/2 exactly.
    auto y = F::interpolate(x, F::InterpolateFuncOptions()
                                   .size(doubled)
                                   .mode(torch::kTrilinear)
                                   .align_corners(true));
    for (int a = 0; a < 3; ++a) {
        const int64_t dim = 2 + a;
        const int64_t have = y.size(dim);
        if (target[a] < have) {
            y = y.narrow(dim, 0, target[a]);
        } else if (target[a] > have) {
            auto edge = y.narrow(dim, have - 1, 1);
            std::vector<int64_t> reps(5, 1);
            reps[dim] = target[a] - have;
            y = torch::cat({y, edge.repeat(reps)}, dim);
        }
    }
    return y;
}

torch::Tensor upsample_scale2(const torch::Tensor& field, std::array<int64_t, 3> target) {
    return upsample2(field, target) * 2.0;
}

std::array<int64_t, 3> level_dims(std::array<int64_t, 3> full, int level) {
    for (int l = 1; l < level; ++l) {
        for (auto& n : full) {
            n = (n + 1) / 2;
        }
    }
    return full;
}

torch::Tensor upsample_to(const torch::Tensor& x, std::array<int64_t, 3> full) {
    std::vector<std::array<int64_t, 3>> chain{full};
    const auto have = spatial_dims(x);
    while (chain.back() != have) {
        auto next = level_dims(chain.back(), 2);
        if (next == chain.back()) {
            throw ContractError("upsample_to: input dims are not a pyramid level of the target");
        }
        chain.push_back(next);
    }
    auto y = x;
    for (auto it = chain.rbegin() + 1; it != chain.rend(); ++it) {
        y = upsample2(y, *it);
    }
    return y;
}

torch::Tensor zeros_field(int64_t batch, std::array<int64_t, 3> dims, const torch::TensorOptions& opts) {
    return torch::zeros({batch, 3, dims[0], dims[1], dims[2]}, opts);
}

torch::Tensor jacobian_determinant(const torch::Tensor& field) {
    check_field3(field, "jacobian_determinant");
    const auto dims = spatial_dims(field);
    for (auto n : dims) {
        if (n < 3) {
            throw ContractError("jacobian_determinant: every dim must be >= 3");
        }
    }
    auto u = field.detach().to(torch::kFloat64).contiguous();
    const int64_t h = dims[0], w = dims[1], d = dims[2], s = h * w * d;
    const double* up = u.data_ptr<double>();
    auto det = torch::empty({h, w, d}, torch::kFloat64);
    double* out = det.data_ptr<double>();
    const int64_t stride[3] = {w * d, d, 1};
    const int64_t extent[3] = {h, w, d};
    int64_t idx = 0;
    for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j < w; ++j) {
            for (int64_t k = 0; k < d; ++k, ++idx) {
                const int64_t pos[3] = {i, j, k};
                double jac[3][3];
                for (int axis = 0; axis < 3; ++axis) {
                    int64_t lo = idx, hi = idx;
                    double span = 2.0;
                    if (pos[axis] == 0) {
                        hi = idx + stride[axis];
                        span = 1.0;
                    } else if (pos[axis] == extent[axis] - 1) {
                        lo = idx - stride[axis];
                        span = 1.0;
                    } else {
                        lo = idx - stride[axis];
                        hi = idx + stride[axis];
                    }
                    for (int comp = 0; comp < 3; ++comp) {
                        jac[comp][axis] = (up[comp * s + hi] - up[comp * s + lo]) / span + (comp == axis ? 1.0 : 0.0);
                    }
                }
                out[idx] = jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1]) -
                           jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0]) +
                           jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]);
            }
        }
    }
    return det;
}

// --- typed API -------------------------------------------------------------

DisplacementField identity_displacement(const GridShape& shape) {
    shape.validate();
    return {torch::zeros({3, shape.height, shape.width, shape.depth}, torch::kFloat32)};
}

ImageVolume warp(const ImageVolume& vol, const DisplacementField& field, Interp interp) {
    if (!vol.shape().same_dims(field.shape())) {
        throw ContractError("warp: image " + vol.shape().str() + " vs field " + field.shape().str());
    }
    auto out = warp(vol.data.unsqueeze(0).unsqueeze(0), field.vectors.unsqueeze(0), interp);
    return {out.squeeze(0).squeeze(0), vol.spacing};
}

LabelVolume warp(const LabelVolume& labels, const DisplacementField& field) {
    if (!labels.shape().same_dims(field.shape())) {
        throw ContractError("warp: labels " + labels.shape().str() + " vs field " + field.shape().str());
    }
    auto as_real = labels.labels.to(torch::kFloat64).unsqueeze(0).unsqueeze(0);
    auto out = warp(as_real, field.vectors.unsqueeze(0), Interp::nearest);
    return {out.squeeze(0).squeeze(0).to(torch::kInt64), labels.num_classes, labels.spacing};
}

DisplacementField compose(const DisplacementField& outer, const DisplacementField& inner) {
    check_field3(outer.vectors, "compose");
    check_field3(inner.vectors, "compose");
    return {compose(outer.vectors.unsqueeze(0), inner.vectors.unsqueeze(0)).squeeze(0)};
}

DisplacementField integrate_velocity(const VelocityField& velocity, int steps) {
    check_field3(velocity.vectors, "integrate_velocity");
    return {integrate_velocity(velocity.vectors.unsqueeze(0), steps).squeeze(0)};
}

DisplacementField upsample_scale2(const DisplacementField& field) {
    check_field3(field.vectors, "upsample_scale2");
    auto d = spatial_dims(field.vectors);
    return {upsample_scale2(field.vectors.unsqueeze(0), {2 * d[0], 2 * d[1], 2 * d[2]}).squeeze(0)};
}

torch::Tensor jacobian_determinant(const DisplacementField& field) {
    return jacobian_determinant(field.vectors);
}

} // namespace memwarp::fieldops
