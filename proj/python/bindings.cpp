#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "forgetdissect/dissect.hpp"
#include "forgetdissect/error.hpp"
#include "forgetdissect/metrics.hpp"
#include "forgetdissect/nets.hpp"
#include "forgetdissect/pda.hpp"
#include "forgetdissect/pipeline.hpp"
#include "forgetdissect/store.hpp"
#include "forgetdissect/synthdata.hpp"

namespace py = pybind11;
namespace fd = forgetdissect;
namespace pl = forgetdissect::pipeline;
using json = nlohmann::json;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

fd::Mask to_mask(const U8Array& a) {
    if (a.ndim() != 2) throw py::value_error("mask must be a 2-D array");
    fd::Mask m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    const auto* p = a.data();
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = p[i] ? 1 : 0;
    return m;
}

fd::Image to_image(const F32Array& a) {
    if (a.ndim() != 3) throw py::value_error("image must be an H x W x C array");
    fd::Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
    std::copy(a.data(), a.data() + img.data.size(), img.data.begin());
    return img;
}

F32Array from_image(const fd::Image& img) {
    F32Array out({img.height, img.width, img.channels});
    std::copy(img.data.begin(), img.data.end(), out.mutable_data());
    return out;
}

U8Array from_mask(const fd::Mask& m) {
    U8Array out({m.height, m.width});
    std::copy(m.data.begin(), m.data.end(), out.mutable_data());
    return out;
}

pl::PipelineConfig parse_config(const std::string& text) {
    return pl::PipelineConfig::from_json(json::parse(text.empty() ? "{}" : text));
}

std::string results_json(const std::vector<pl::StageResult>& results) {
    json out = json::array();
    for (const auto& r : results) {
        out.push_back({{"dir", r.dir.string()}, {"skipped", r.skipped}, {"warnings", r.warnings}});
    }
    return out.dump();
}

template <class F>
std::string stage(const std::string& config, F&& f) {
    const auto c = parse_config(config);
    py::gil_scoped_release release;
    return results_json(f(c));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Native core of forgetdissect: dissection, metrics and the experiment pipeline.";

    static py::exception<fd::Error> error(m, "ForgetDissectError", PyExc_RuntimeError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const fd::Error& e) {
            const auto args = py::make_tuple(e.what(), fd::to_string(e.kind()), fd::exit_code(e.kind()));
            PyErr_SetObject(error.ptr(), args.ptr());
        }
    });

    m.def("iou", [](const U8Array& a, const U8Array& b) { return fd::dissect::iou(to_mask(a), to_mask(b)); },
          py::arg("a"), py::arg("b"));

    m.def("best_match", [](const std::vector<U8Array>& candidates, const U8Array& reference) {
        std::vector<fd::Mask> masks;
        for (const auto& c : candidates) masks.push_back(to_mask(c));
        const auto r = fd::dissect::best_match(masks, to_mask(reference));
        return py::make_tuple(r.map_index, r.iou);
    });

    m.def(
        "fragile_block",
        [](const std::vector<double>& ious, double epsilon) {
            fd::dissect::BlockIoUCurve curve;
            for (std::size_t b = 0; b < ious.size(); ++b) curve.entries.push_back({static_cast<int>(b) + 1, 0, ious[b]});
            return fd::dissect::fragile_block(curve, epsilon);
        },
        py::arg("ious"), py::arg("epsilon") = 1e-6);

    m.def(
        "bleu",
        [](const std::vector<int>& candidate, const std::vector<std::vector<int>>& references, int n, bool smoothing) {
            return fd::metrics::bleu_n(candidate, references, n, smoothing);
        },
        py::arg("candidate"), py::arg("references"), py::arg("n") = 4, py::arg("smoothing") = false);

    m.def(
        "rouge_l",
        [](const std::vector<int>& candidate, const std::vector<std::vector<int>>& references, double beta) {
            return fd::metrics::rouge_l(candidate, references, beta);
        },
        py::arg("candidate"), py::arg("references"), py::arg("beta") = fd::metrics::kRougeBeta);

    m.def("sha256_file", [](const std::filesystem::path& p) { return fd::store::sha256_file(p); });
    m.def("verify_checksum_index", [](const std::filesystem::path& p) { return fd::store::verify_checksum_index(p); });

    m.def("default_config", [] { return pl::PipelineConfig{}.to_json().dump(); });
    m.def("normalize_config", [](const std::string& config) { return parse_config(config).to_json().dump(); });

    m.def("gen_data", [](const std::string& c) { return stage(c, [](const auto& x) { return std::vector{pl::gen_data(x)}; }); });
    m.def("train_base", [](const std::string& c) { return stage(c, [](const auto& x) { return std::vector{pl::train_base(x)}; }); });
    m.def("train_incremental", [](const std::string& c, const std::vector<std::string>& labels) {
        return stage(c, [&](const auto& x) { return pl::train_incremental(x, labels.empty() ? pl::arm_labels(x) : labels); });
    }, py::arg("config"), py::arg("labels") = std::vector<std::string>{});
    m.def("dissect", [](const std::string& c) { return stage(c, [](const auto& x) { return std::vector{pl::run_dissect(x)}; }); });
    m.def("report", [](const std::string& c) { return stage(c, [](const auto& x) { return std::vector{pl::run_report(x)}; }); });
    m.def("run_all", [](const std::string& c) { return stage(c, [](const auto& x) { return pl::run_all(x); }); });

    m.def("load_report", [](const std::filesystem::path& p) {
        return fd::dissect::ForgettingReport::from_json(fd::store::read_json(p)).to_json().dump();
    });

    m.def("load_sample", [](const std::filesystem::path& dataset_dir, int sample_id) {
        const auto ds = fd::synthdata::load_dataset(dataset_dir);
        const auto& s = ds.sample(sample_id);
        std::vector<std::string> words;
        for (int t : s.caption) words.push_back(ds.vocabulary.word(t));
        return py::dict(py::arg("image") = from_image(s.image), py::arg("mask") = from_mask(s.seg_mask),
                        py::arg("label") = s.label, py::arg("caption") = s.caption, py::arg("words") = words);
    });

    m.def(
        "block_relevance",
        [](const std::filesystem::path& snapshot, const F32Array& image, int block_id, const std::vector<F32Array>& donors,
           const std::string& pda_params) {
            const auto model = fd::nets::load_snapshot(snapshot);
            const auto img = to_image(image);
            std::vector<fd::Image> donor_images;
            for (const auto& d : donors) donor_images.push_back(to_image(d));
            const auto params = fd::pda::PdaParams::from_json(json::parse(pda_params.empty() ? "{}" : pda_params));
            const auto sampler = fd::pda::make_sampler(params.sampler, donor_images, params.window);
            std::vector<fd::pda::RelevanceMap> maps;
            {
                py::gil_scoped_release release;
                maps = fd::pda::block_relevance_sweep(model, img, block_id, params, *sampler);
            }
            py::array_t<double> out({static_cast<py::ssize_t>(maps.size()), static_cast<py::ssize_t>(img.height),
                                     static_cast<py::ssize_t>(img.width)});
            auto* dst = out.mutable_data();
            for (const auto& map : maps) dst = std::copy(map.scores.data.begin(), map.scores.data.end(), dst);
            return out;
        },
        py::arg("snapshot"), py::arg("image"), py::arg("block_id"), py::arg("donors"), py::arg("pda_params") = "");
}
