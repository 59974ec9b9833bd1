// Python bindings. Volumes cross the boundary as NumPy arrays: images
// float64 [H,W,D], labels int64 [H,W,D], fields float64 [3,H,W,D].

#include <cstring>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "memwarp/data.hpp"
#include "memwarp/fieldops.hpp"
#include "memwarp/metrics.hpp"
#include "memwarp/pipeline.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace memwarp;

namespace {

template <typename T>
torch::Tensor to_tensor(const py::array_t<T, py::array::c_style | py::array::forcecast>& a, int ndim,
                        const char* what) {
    if (a.ndim() != ndim) {
        throw ContractError(std::string(what) + ": expected a " + std::to_string(ndim) + "-D array");
    }
    std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
    const auto dtype = std::is_same_v<T, double> ? torch::kFloat64 : torch::kInt64;
    return torch::from_blob(const_cast<T*>(a.data()), shape, dtype).clone();
}

template <typename T>
py::array_t<T> to_numpy(const torch::Tensor& t) {
    const auto dtype = std::is_same_v<T, double> ? torch::kFloat64 : torch::kInt64;
    auto c = t.detach().to(dtype).contiguous();
    std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
    py::array_t<T> out(shape);
    std::memcpy(out.mutable_data(), c.template data_ptr<T>(), sizeof(T) * static_cast<size_t>(c.numel()));
    return out;
}

using Image = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Labels = py::array_t<int64_t, py::array::c_style | py::array::forcecast>;

LabelVolume labels_of(const Labels& a, int num_classes = 0) {
    auto t = to_tensor<int64_t>(a, 3, "labels");
    const int n = num_classes > 0 ? num_classes : static_cast<int>(t.max().item<int64_t>()) + 1;
    return {t, n};
}

data::PhantomSpec spec_of(const py::object& spec) {
    if (spec.is_none()) {
        return {};
    }
    const auto text = py::module_::import("json").attr("dumps")(spec).cast<std::string>();
    return data::PhantomSpec::from_json(nlohmann::json::parse(text));
}

py::dict report_dict(const metrics::EvaluationReport& r) {
    py::dict d;
    d["pair_id"] = r.pair_id;
    d["dice_avg"] = r.dice_avg;
    d["dice"] = r.dice;
    d["hd95_mm"] = r.hd95_mm;
    d["sdlogj"] = r.sdlogj;
    d["nonpos_jac_frac"] = r.nonpos_jac_frac;
    return d;
}

} // namespace

PYBIND11_MODULE(_memwarp, m) {
    m.doc() = "MemWarp deformable registration";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_IOError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<metrics::UndefinedMetric>(m, "UndefinedMetric", PyExc_ValueError);

    m.def(
        "warp",
        [](const Image& vol, const Image& field, bool nearest) {
            auto out = fieldops::warp(ImageVolume{to_tensor<double>(vol, 3, "volume")},
                                      DisplacementField{to_tensor<double>(field, 4, "field")},
                                      nearest ? fieldops::Interp::nearest : fieldops::Interp::trilinear);
            return to_numpy<double>(out.data);
        },
        py::arg("volume"), py::arg("field"), py::arg("nearest") = false,
        "Pull-back warp: out(x) = volume(x + field(x)), border-clamped.");
    m.def(
        "warp_labels",
        [](const Labels& labels, const Image& field) {
            auto out = fieldops::warp(labels_of(labels), DisplacementField{to_tensor<double>(field, 4, "field")});
            return to_numpy<int64_t>(out.labels);
        },
        py::arg("labels"), py::arg("field"));
    m.def(
        "integrate_velocity",
        [](const Image& v, int steps) {
            return to_numpy<double>(
                fieldops::integrate_velocity(VelocityField{to_tensor<double>(v, 4, "velocity")}, steps).vectors);
        },
        py::arg("velocity"), py::arg("steps") = 7);
    m.def(
        "jacobian_determinant",
        [](const Image& field) {
            return to_numpy<double>(
                fieldops::jacobian_determinant(DisplacementField{to_tensor<double>(field, 4, "field")}));
        },
        py::arg("field"));

    m.def(
        "dice_score", [](const Labels& a, const Labels& b, int label) {
            return metrics::dice_score(labels_of(a), labels_of(b), label);
        },
        py::arg("a"), py::arg("b"), py::arg("label"));
    m.def(
        "hd95",
        [](const Labels& a, const Labels& b, int label, std::array<double, 3> spacing) {
            return metrics::hd95(labels_of(a), labels_of(b), label, spacing);
        },
        py::arg("a"), py::arg("b"), py::arg("label"), py::arg("spacing") = std::array<double, 3>{1.0, 1.0, 1.0});
    m.def(
        "sdlogj", [](const Image& field) { return metrics::sdlogj({to_tensor<double>(field, 4, "field")}); },
        py::arg("field"));

    m.def(
        "phantom_pair",
        [](uint64_t seed, const py::object& spec) {
            const auto p = data::generate_phantom_pair(spec_of(spec), seed);
            py::dict d;
            d["moving"] = to_numpy<double>(p.moving.data);
            d["fixed"] = to_numpy<double>(p.fixed.data);
            d["moving_mask"] = to_numpy<int64_t>(p.moving_mask.labels);
            d["fixed_mask"] = to_numpy<int64_t>(p.fixed_mask.labels);
            d["ground_truth"] = to_numpy<double>(p.ground_truth->vectors);
            d["spacing"] = p.moving.spacing;
            return d;
        },
        py::arg("seed"), py::arg("spec") = py::none(),
        "ED -> ES phantom pair; `spec` is a dict of phantom settings.");
    m.def(
        "synth",
        [](const fs::path& out, int subjects, const py::object& spec) {
            const auto manifest = data::write_phantom_dataset(spec_of(spec), subjects, out);
            py::dict d;
            for (const char* split : {"train", "val", "test"}) {
                d[split] = manifest.subjects_in(split);
            }
            return d;
        },
        py::arg("out"), py::arg("subjects") = 50, py::arg("spec") = py::none());
    m.def(
        "train",
        [](const std::vector<std::string>& overrides, const std::optional<fs::path>& config) {
            const auto cfg = pipeline::load_config(config, overrides);
            pipeline::TrainResult r;
            {
                py::gil_scoped_release release;
                r = pipeline::train(cfg);
            }
            py::dict d;
            d["best_checkpoint"] = r.best_checkpoint;
            d["last_checkpoint"] = r.last_checkpoint;
            d["best_step"] = r.best_step;
            d["steps"] = r.steps;
            return d;
        },
        py::arg("overrides") = std::vector<std::string>{}, py::arg("config") = std::nullopt,
        "Train with `key.path=value` overrides on top of an optional JSON config.");
    m.def(
        "register",
        [](const fs::path& checkpoint, const fs::path& moving, const fs::path& fixed, const fs::path& out) {
            const auto r = pipeline::register_pair(checkpoint, moving, fixed, out);
            return py::make_tuple(r.field, r.warped);
        },
        py::arg("checkpoint"), py::arg("moving"), py::arg("fixed"), py::arg("out"));
    m.def(
        "evaluate",
        [](const std::optional<fs::path>& checkpoint, const fs::path& data, const std::string& split,
           const fs::path& out) { return report_dict(pipeline::evaluate(checkpoint, data, split, out)); },
        py::arg("checkpoint"), py::arg("data"), py::arg("split") = "test", py::arg("out"));
    m.def("mask_reads", [] { return data::mask_reads().load(); });
}
