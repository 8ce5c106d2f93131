#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "aimkp/analysis.hpp"
#include "aimkp/data.hpp"
#include "aimkp/decode.hpp"
#include "aimkp/masking.hpp"
#include "aimkp/metrics.hpp"
#include "aimkp/model.hpp"
#include "aimkp/objective.hpp"

namespace py = pybind11;
using namespace aimkp;

namespace {

MaskConvention convention_from(const std::string& s) {
    if (s == "formula-anchor") return MaskConvention::formula_anchor;
    if (s == "last-in-stride") return MaskConvention::last_in_stride;
    throw std::invalid_argument("unknown mask convention: " + s);
}

GradientVector as_gradient(const std::vector<double>& v) {
    GradientVector g;
    g.values = v;
    g.finalize_norm();
    return g;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "aimkp core: stride masks, gradient filtering, keyphrase metrics";

    py::class_<KeepMask>(m, "KeepMask")
        .def_property_readonly("is_2d", [](const KeepMask& k) { return k.is_2d; })
        .def_property_readonly("height", [](const KeepMask& k) { return k.height; })
        .def_property_readonly("width", [](const KeepMask& k) { return k.width; })
        .def_property_readonly("bits",
                               [](const KeepMask& k) {
                                   std::vector<int> out(k.bits.begin(), k.bits.end());
                                   return out;
                               })
        .def("popcount", &KeepMask::popcount)
        .def("__repr__", [](const KeepMask& k) { return render_mask(k); });

    m.def(
        "build_stride_mask_1d",
        [](int length, int gamma, const std::string& conv) {
            return build_stride_mask_1d(length, gamma, convention_from(conv));
        },
        py::arg("length"), py::arg("gamma"), py::arg("convention") = "last-in-stride");
    m.def(
        "build_stride_mask_2d",
        [](int height, int width, int gamma, const std::string& conv) {
            return build_stride_mask_2d(height, width, gamma, convention_from(conv));
        },
        py::arg("height"), py::arg("width"), py::arg("gamma"),
        py::arg("convention") = "last-in-stride");
    m.def("retention_ratio", &retention_ratio, py::arg("mask"));

    m.def("porter_stem", [](const std::string& w) { return porter_stem(w); }, py::arg("word"));
    m.def("normalize_phrases", &normalize_phrases, py::arg("phrases"));
    m.def("f1_at_k", &f1_at_k, py::arg("preds"), py::arg("gold"), py::arg("k"));
    m.def("map_at_k", &map_at_k, py::arg("preds"), py::arg("gold"), py::arg("k"));

    m.def(
        "cosine_similarity",
        [](const std::vector<double>& a, const std::vector<double>& b) {
            return cosine_similarity(as_gradient(a), as_gradient(b));
        },
        py::arg("a"), py::arg("b"));
    m.def("filter_switch", &filter_switch, py::arg("s"), py::arg("tau"));

    py::class_<Sample>(m, "Sample")
        .def_property_readonly("id", [](const Sample& s) { return s.id; })
        .def_property_readonly("grid", [](const Sample& s) { return s.grid; })
        .def_property_readonly("text", [](const Sample& s) { return s.text; })
        .def_property_readonly("target", [](const Sample& s) { return s.target; });

    py::class_<Dataset>(m, "Dataset")
        .def_property_readonly("size", [](const Dataset& d) { return d.samples.size(); })
        .def_property_readonly("vocab", [](const Dataset& d) { return d.vocab; })
        .def("keyphrases",
             [](const Dataset& d, size_t i) { return d.samples.at(i).keyphrases; })
        .def("sample", [](const Dataset& d, size_t i) { return d.samples.at(i).sample; });

    m.def(
        "generate_synthetic",
        [](int n, uint64_t seed, int grid_h, int grid_w, int text_len) {
            GenSpec spec;
            spec.n_samples = n;
            spec.seed = seed;
            spec.grid_h = grid_h;
            spec.grid_w = grid_w;
            spec.text_len = text_len;
            return generate_synthetic(spec);
        },
        py::arg("n"), py::arg("seed") = 7, py::arg("grid_h") = 6, py::arg("grid_w") = 6,
        py::arg("text_len") = 12);
    m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("dir"));
    m.def("load_dataset", &load_dataset, py::arg("dir"));

    py::class_<ModelParams>(m, "ModelParams")
        .def_property_readonly("n_params",
                               [](const ModelParams& p) { return p.values.size(); })
        .def_property_readonly("output_vocab",
                               [](const ModelParams& p) { return p.config.output_vocab; });

    py::class_<TrainResult>(m, "TrainResult")
        .def_property_readonly("best_epoch", [](const TrainResult& r) { return r.best_epoch; })
        .def_property_readonly("best_score", [](const TrainResult& r) { return r.best_score; })
        .def_property_readonly("diverged", [](const TrainResult& r) { return r.diverged; })
        .def_property_readonly("best_params", [](const TrainResult& r) { return r.best_params; })
        .def_property_readonly(
            "validation_scores",
            [](const TrainResult& r) {
                std::vector<double> out;
                for (const auto& v : r.validation) out.push_back(v.score);
                return out;
            })
        .def_property_readonly("n_decisions",
                               [](const TrainResult& r) { return r.decisions.size(); });

    m.def(
        "forward_nll",
        [](const ModelParams& p, const Sample& s) {
            return forward_nll(p, s, unmasked_plan(s.dims()));
        },
        py::arg("params"), py::arg("sample"));

    m.def(
        "masked_nll",
        [](const ModelParams& p, const Sample& s, const std::string& modality, int gamma) {
            Modality target = modality == "visual" ? Modality::visual : Modality::text;
            MaskPlan plan = compose_mask_plan(s.dims(), {gamma, gamma}, target);
            return forward_nll(p, s, plan);
        },
        py::arg("params"), py::arg("sample"), py::arg("modality"), py::arg("gamma") = 2);

    m.def(
        "train",
        [](const Dataset& ds, const std::string& schedule, int epochs, uint64_t seed,
           double tau_v, double tau_t, double lr, int embed_dim, int layers, int heads) {
            TrainData td = make_train_data(ds);
            ModelConfig mc = model_config_for(ds);
            mc.embed_dim = embed_dim;
            mc.num_layers = layers;
            mc.num_heads = heads;
            TrainConfig cfg;
            cfg.schedule = schedule_from_string(schedule);
            cfg.epochs = epochs;
            cfg.seed = seed;
            cfg.tau_v = tau_v;
            cfg.tau_t = tau_t;
            cfg.lr = lr;
            return run_training(td, mc, cfg);
        },
        py::arg("dataset"), py::arg("schedule") = "aimkp", py::arg("epochs") = 4,
        py::arg("seed") = 1, py::arg("tau_v") = 0.4, py::arg("tau_t") = 0.1, py::arg("lr") = 3e-3,
        py::arg("embed_dim") = 32, py::arg("layers") = 2, py::arg("heads") = 4);

    m.def(
        "decode",
        [](const ModelParams& p, const Sample& context, const std::vector<std::string>& vocab,
           const std::string& strategy, int beam, double temperature, uint64_t seed) {
            DecodeConfig dc;
            dc.strategy = decode_strategy_from_string(strategy);
            dc.beam_size = beam;
            dc.temperature = temperature;
            dc.seed = seed;
            dc.max_len = p.config.max_target_len;
            return decode(p, context, dc, vocab);
        },
        py::arg("params"), py::arg("context"), py::arg("vocab"), py::arg("strategy") = "greedy",
        py::arg("beam") = 5, py::arg("temperature") = 0.5, py::arg("seed") = 0);

    m.def("ablate_modality",
          [](const Sample& s, const std::string& which) {
              if (which == "drop-visual") return ablate_modality(s, Modality::visual);
              if (which == "drop-text") return ablate_modality(s, Modality::text);
              throw std::invalid_argument("which must be drop-visual or drop-text");
          },
          py::arg("sample"), py::arg("which"));
}
