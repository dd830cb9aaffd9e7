#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "candle/arch.hpp"
#include "candle/gradcheck.hpp"
#include "candle/io.hpp"
#include "candle/metrics.hpp"
#include "candle/ops.hpp"
#include "candle/prior.hpp"
#include "candle/scenegen.hpp"
#include "candle/wavelet.hpp"

namespace py = pybind11;
using namespace candle;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    Array a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data().begin(), t.data().end(), a.mutable_data());
    return a;
}

// Adds a leading batch axis when `t` is one rank short.
Tensor batched(const Tensor& t, int rank) {
    if (t.rank() != rank - 1) return t;
    Shape s{1};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    return reshape(t, s);
}

py::dict features_to_dict(const prior::SemanticFeatureSet& f) {
    py::dict d;
    for (const auto& l : f.layers) d[py::int_(l.layer_id)] = to_array(l.feature);
    return d;
}

prior::SemanticFeatureSet dict_to_features(const py::dict& d) {
    prior::SemanticFeatureSet f;
    for (int id : prior::kLayerIds) {
        if (!d.contains(py::int_(id))) throw Error(ErrorKind::Value, "missing prior layer " + std::to_string(id));
        f.layers.push_back({id, to_tensor(d[py::int_(id)].cast<Array>())});
    }
    prior::validate(f);
    return f;
}

}  // namespace

PYBIND11_MODULE(_candle, m) {
    m.doc() = "Ambient lighting normalization with semantic priors";

    py::register_exception<Error>(m, "CandleError", PyExc_RuntimeError);

    m.def(
        "generate_scene",
        [](std::uint64_t seed, std::int64_t height, std::int64_t width, int num_materials, int num_lights) {
            scenegen::SceneConfig c;
            c.height = height;
            c.width = width;
            c.num_materials = num_materials;
            c.num_lights = num_lights;
            c.validate();
            const auto s = scenegen::generate_scene(seed, c);
            py::dict d;
            d["input"] = to_array(s.input);
            d["gt"] = to_array(s.gt);
            d["material_map"] = to_array(s.material_map);
            return d;
        },
        py::arg("seed"), py::arg("height") = 64, py::arg("width") = 64, py::arg("num_materials") = 8, py::arg("num_lights") = 2);

    m.def("psnr", [](const Array& x, const Array& y) { return metrics::psnr(to_tensor(x), to_tensor(y)); });
    m.def("ssim", [](const Array& x, const Array& y) { return metrics::ssim(to_tensor(x), to_tensor(y)); });
    m.def(
        "patch_consistency",
        [](const Array& a, const Array& b, int patch) {
            const auto r = metrics::patch_consistency(to_tensor(a), to_tensor(b), patch);
            py::dict d;
            d["P"] = r.P;
            d["W"] = r.W;
            d["sims"] = r.per_patch_sims;
            d["rows"] = r.rows;
            d["cols"] = r.cols;
            return d;
        },
        py::arg("a"), py::arg("b"), py::arg("patch"));

    m.def("dwt2_haar", [](const Array& x) {
        const auto b = wavelet::dwt2_haar(batched(to_tensor(x), 4));
        return py::make_tuple(to_array(b.ll), to_array(b.lh), to_array(b.hl), to_array(b.hh), b.height, b.width);
    });
    m.def(
        "idwt2_haar",
        [](const Array& ll, const Array& lh, const Array& hl, const Array& hh, std::int64_t height, std::int64_t width) {
            return to_array(wavelet::idwt2_haar({to_tensor(ll), to_tensor(lh), to_tensor(hl), to_tensor(hh), height, width}));
        },
        py::arg("ll"), py::arg("lh"), py::arg("hl"), py::arg("hh"), py::arg("height") = 0, py::arg("width") = 0);

    m.def(
        "encode_synthetic",
        [](const Array& material_map, std::uint64_t seed) {
            return features_to_dict(prior::encode_synthetic(batched(to_tensor(material_map), 4), seed));
        },
        py::arg("material_map"), py::arg("seed") = 0);
    m.def("load_features", [](const std::filesystem::path& p) { return features_to_dict(prior::load_features(p)); });
    m.def("save_features", [](const std::filesystem::path& p, const py::dict& d) { prior::save_features(p, dict_to_features(d)); });

    m.def("read_container", [](const std::filesystem::path& p) {
        const auto c = io::read_container(p);
        py::dict d;
        for (const auto& r : c.records()) {
            if (r.text) d[py::str(r.name)] = py::str(*r.text);
            else d[py::str(r.name)] = to_array(r.tensor);
        }
        return d;
    });
    m.def("write_container", [](const std::filesystem::path& p, const py::dict& d) {
        io::Container c;
        for (const auto& [k, v] : d) {
            const auto name = k.cast<std::string>();
            if (py::isinstance<py::str>(v)) c.add_text(name, v.cast<std::string>());
            else c.add(name, to_tensor(v.cast<Array>()));
        }
        io::write_container(p, c);
    });
    m.def("read_ppm", [](const std::filesystem::path& p) { return to_array(io::read_ppm(p)); });
    m.def("write_ppm", [](const std::filesystem::path& p, const Array& img) { io::write_ppm(p, to_tensor(img)); });

    py::class_<arch::Model>(m, "Model")
        .def_static("load", &arch::load_checkpoint)
        .def_static(
            "from_config", [](const std::string& text) { return arch::init_model(arch::ModelConfig::from_text(text)); },
            py::arg("config") = "")
        .def("save", [](const arch::Model& self, const std::filesystem::path& p) { arch::save_checkpoint(p, self); })
        .def_property_readonly("config", [](const arch::Model& self) { return self.config.to_text(); })
        .def_property_readonly("parameter_count", [](const arch::Model& self) { return self.params.scalar_count(); })
        .def(
            "predict",
            [](const arch::Model& self, const Array& image, std::optional<Array> material_map, const std::string& provider,
               std::uint64_t prior_seed, bool refiner) {
                const Tensor img = batched(to_tensor(image), 4);
                prior::SemanticFeatureSet feats;
                if (self.config.guidance) {
                    const auto p = prior::make_provider(provider, prior_seed, self.config.prior_dim);
                    Tensor mat;
                    if (material_map) mat = batched(to_tensor(*material_map), 4);
                    feats = p->encode({&img, material_map ? &mat : nullptr, ""});
                }
                const Tensor y = arch::predict(self, img, self.config.guidance ? &feats : nullptr, refiner);
                return to_array(image.ndim() == 3 ? reshape(y, {3, img.dim(2), img.dim(3)}) : y);
            },
            py::arg("image"), py::arg("material_map") = py::none(), py::arg("provider") = "synthetic",
            py::arg("prior_seed") = 0, py::arg("refiner") = false);

    m.def(
        "gradcheck",
        [](const std::string& module, int seeds) {
            py::list out;
            for (const auto& r : gradcheck::run_suite(module, seeds)) {
                py::dict d;
                d["module"] = r.module;
                d["name"] = r.name;
                d["max_rel_error"] = r.max_rel_error;
                d["tolerance"] = r.tolerance;
                d["passed"] = r.passed();
                out.append(d);
            }
            return out;
        },
        py::arg("module") = "", py::arg("seeds") = 20);
}
