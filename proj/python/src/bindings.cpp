#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <sstream>

#include "ett/checks.hpp"
#include "ett/eval.hpp"
#include "ett/pipeline.hpp"
#include "ett/verifier.hpp"

namespace py = pybind11;
using namespace ett;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::array_t<float> to_array(const Image& img) {
    py::array_t<float> out({img.height, img.width, 3});
    std::memcpy(out.mutable_data(), img.pixels.data(), img.pixels.size() * sizeof(float));
    return out;
}

std::vector<Image> to_images(const FloatArray& a) {
    if (a.ndim() != 4 || a.shape(3) != 3) throw py::value_error("expected an array of shape [N, H, W, 3]");
    const auto n = a.shape(0), h = a.shape(1), w = a.shape(2);
    std::vector<Image> out;
    const float* p = a.data();
    for (py::ssize_t i = 0; i < n; ++i) {
        Image img = Image::filled(static_cast<int>(h), static_cast<int>(w), 0.0f);
        std::memcpy(img.pixels.data(), p + i * h * w * 3, img.pixels.size() * sizeof(float));
        out.push_back(std::move(img));
    }
    return out;
}

RunConfig config_from(const std::map<std::string, std::string>& overrides) {
    Settings s = default_settings();
    for (const auto& [k, v] : overrides) s.set(k, v);
    return make_run_config(s);
}

std::map<std::string, std::string> hashes_by_name(const std::map<Group, std::uint64_t>& h) {
    std::map<std::string, std::string> out;
    for (const auto& [g, v] : h) {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
        out[std::string(group_name(g))] = buf;
    }
    return out;
}

Stage stage_from(const std::string& name) {
    const auto s = parse_stage(name);
    if (!s) throw py::value_error("unknown stage '" + name + "'");
    return *s;
}

py::dict losses(const LossBreakdown& b) {
    py::dict d;
    d["l_rec"] = b.l_rec;
    d["l_quant"] = b.l_quant;
    d["l_gan"] = b.l_gan;
    d["l_entropy"] = b.l_entropy;
    d["l_vq"] = b.l_vq;
    d["l_cap"] = b.l_cap;
    d["total"] = b.total;
    return d;
}

class PyModel {
public:
    PyModel(const std::map<std::string, std::string>& overrides, const std::string& checkpoint)
        : cfg_(config_from(overrides)), loaded_(load_model(cfg_, checkpoint)) {}

    py::array_t<float> reconstruct(const FloatArray& images) const {
        const auto out = reconstruct_images(*loaded_.model, to_images(images));
        py::array_t<float> arr({static_cast<py::ssize_t>(out.size()), images.shape(1), images.shape(2),
                                static_cast<py::ssize_t>(3)});
        float* dst = arr.mutable_data();
        for (const auto& img : out) {
            std::memcpy(dst, img.pixels.data(), img.pixels.size() * sizeof(float));
            dst += img.pixels.size();
        }
        return arr;
    }

    py::dict recon_metrics(std::int64_t limit) const {
        const auto idx = eval_indices(limit);
        const auto m = ett::recon_metrics(*loaded_.model, loaded_.data.corpus, idx);
        py::dict d;
        d["mse"] = m.mse;
        d["psnr"] = m.psnr;
        d["images"] = m.images;
        return d;
    }

    py::dict caption_metrics(std::int64_t limit, std::int64_t exact_limit) const {
        const auto idx = eval_indices(limit);
        const auto m = caption_eval(*loaded_.model, loaded_.data.corpus, loaded_.data.vocab, idx, exact_limit);
        py::dict d;
        d["token_accuracy"] = m.token_accuracy;
        d["exact_match"] = m.exact_match;
        d["nll"] = m.nll;
        d["tokens"] = m.tokens;
        return d;
    }

    std::map<std::string, std::string> hashes() const { return hashes_by_name(group_hashes(loaded_.model->params)); }
    std::string stage() const { return loaded_.state.stage; }

private:
    std::vector<std::uint64_t> eval_indices(std::int64_t limit) const {
        std::vector<std::uint64_t> idx = loaded_.data.corpus.eval_indices();
        if (limit > 0 && static_cast<std::size_t>(limit) < idx.size()) idx.resize(static_cast<std::size_t>(limit));
        return idx;
    }

    RunConfig cfg_;
    LoadedModel loaded_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Embedding-bridged tokenizer and tiny LM training toolkit";

    py::register_exception<Error>(m, "EttError", PyExc_RuntimeError);

    m.def("default_settings", [] {
        std::map<std::string, std::string> out;
        const Settings s = default_settings();
        std::istringstream in(s.canonical());
        for (std::string line; std::getline(in, line);) {
            const auto eq = line.find(" = ");
            out[line.substr(0, eq)] = line.substr(eq + 3);
        }
        return out;
    });

    m.def(
        "generate_sample",
        [](std::uint64_t seed, std::uint64_t index) {
            const Sample s = ett::generate_sample(seed, index);
            return py::make_tuple(to_array(s.image), s.caption);
        },
        py::arg("seed"), py::arg("index"), "Image [32, 32, 3] in [-1, 1] and its caption.");

    m.def(
        "caption_roundtrips",
        [](const std::string& caption) {
            const auto scene = parse_caption(caption);
            return scene.has_value() && caption_of(*scene) == caption;
        },
        py::arg("caption"));

    m.def(
        "render_caption",
        [](const std::string& caption) {
            const auto scene = parse_caption(caption);
            if (!scene) throw py::value_error("caption does not follow the scene grammar");
            return to_array(render_scene(*scene));
        },
        py::arg("caption"));

    m.def("psnr_from_mse", &psnr_from_mse, py::arg("mse"));

    m.def(
        "geneval_score",
        [](const std::vector<std::string>& captions, const FloatArray& images) {
            std::vector<SceneSpec> prompts;
            for (const auto& c : captions) {
                auto s = parse_caption(c);
                if (!s) throw py::value_error("unparseable prompt: " + c);
                prompts.push_back(*s);
            }
            const auto imgs = to_images(images);
            if (imgs.size() != prompts.size()) throw py::value_error("one image per prompt");
            const auto scores = score_images(prompts, imgs);
            py::dict d;
            d["overall"] = scores.overall;
            for (GenevalCategory c : kGenevalCategories) {
                d[py::str(std::string(category_name(c)))] = scores.accuracy[static_cast<std::size_t>(c)];
            }
            return d;
        },
        py::arg("captions"), py::arg("images"));

    m.def(
        "run_stage",
        [](const std::string& stage, const std::map<std::string, std::string>& overrides, bool force) {
            const RunConfig cfg = config_from(overrides);
            StageOptions opt;
            opt.force = force;
            StageOutcome out;
            {
                py::gil_scoped_release release;
                out = ett::run_stage(stage_from(stage), cfg, opt);
            }
            py::dict d;
            d["skipped"] = out.skipped;
            d["steps_done"] = out.steps_done;
            d["run_dir"] = out.run_dir;
            d["checkpoint"] = out.checkpoint;
            d["last"] = losses(out.last);
            d["hashes_before"] = hashes_by_name(out.hashes_before);
            d["hashes_after"] = hashes_by_name(out.hashes_after);
            return d;
        },
        py::arg("stage"), py::arg("settings") = std::map<std::string, std::string>{}, py::arg("force") = false,
        "Runs one training stage; `settings` overrides config keys.");

    m.def(
        "gradcheck",
        [](const std::string& op, std::uint64_t seed) {
            const auto line = op == "end-to-end" ? checks::check_end_to_end(seed) : checks::check_op(op, seed);
            py::dict d;
            d["name"] = line.name;
            d["max_rel_error"] = line.max_rel_error;
            d["threshold"] = line.threshold;
            d["passed"] = line.passed;
            d["note"] = line.note;
            d["grad_max"] = line.grad_max;
            return d;
        },
        py::arg("op"), py::arg("seed") = 0, "64-bit finite-difference check of one op or \"end-to-end\".");
    m.def("gradcheck_ops", &checks::op_names);

    py::class_<PyModel>(m, "Model")
        .def(py::init<const std::map<std::string, std::string>&, const std::string&>(), py::arg("settings"),
             py::arg("checkpoint"))
        .def_property_readonly("stage", &PyModel::stage)
        .def("reconstruct", &PyModel::reconstruct, py::arg("images"))
        .def("recon_metrics", &PyModel::recon_metrics, py::arg("limit") = 0)
        .def("caption_metrics", &PyModel::caption_metrics, py::arg("limit") = 0, py::arg("exact_limit") = 0)
        .def("group_hashes", &PyModel::hashes);
}
