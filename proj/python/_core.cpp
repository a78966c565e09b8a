// SPDX-License-Identifier: Apache-2.0
#include <sstream>

#include <pybind11/pybind11.h>
#include <pybind11/operators.h>
#include <pybind11/stl.h>

#include "bnas/cli.hpp"
#include "bnas/elasticity.hpp"
#include "bnas/errors.hpp"
#include "bnas/metrics.hpp"
#include "bnas/model_io.hpp"
#include "bnas/search.hpp"
#include "bnas/training.hpp"
#include "bnas/zoo.hpp"

namespace py = pybind11;
using namespace bnas;

namespace {

ElasticityPolicy policy_from(const py::dict& d) {
    ElasticityPolicy p;
    for (auto [k, v] : d) {
        const auto key = k.cast<std::string>();
        if (key == "width_divisor") p.width_divisor = v.cast<std::int64_t>();
        else if (key == "min_width") p.min_width = v.cast<std::int64_t>();
        else if (key == "max_width_options") p.max_width_options = v.cast<std::int64_t>();
        else if (key == "min_kernel") p.min_kernel = v.cast<std::int64_t>();
        else if (key == "reorder_channels") p.reorder_channels = v.cast<bool>();
        else throw ConfigError("unknown policy key '" + key + "'");
    }
    validate(p);
    return p;
}

std::vector<Objectives> points_from(const std::vector<std::pair<double, std::int64_t>>& pts) {
    std::vector<Objectives> out;
    for (const auto& [a, m] : pts) out.push_back({a, m});
    return out;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Super-network conversion, training and NSGA-II subnetwork search";
    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

    py::class_<ModelGraph>(m, "Model")
        .def_property_readonly("num_nodes", &ModelGraph::size)
        .def_property_readonly("num_classes", &ModelGraph::num_classes)
        .def_property_readonly("input_shape", [](const ModelGraph& g) { return g.input_shape(1).dims; })
        .def("topological_order", [](const ModelGraph& g) { return topological_order(g); })
        .def("macs", [](const ModelGraph& g) { return count_costs(g).total_macs; })
        .def("params", [](const ModelGraph& g) { return count_costs(g).total_params; })
        .def("save", [](const ModelGraph& g, const std::string& manifest, const std::string& weights) {
            save_model(g, manifest, weights);
        });

    m.def("zoo_names", &zoo_names);
    m.def("make_zoo_model", &make_zoo_model, py::arg("name"), py::arg("seed") = 42, py::arg("channels") = 3,
          py::arg("height") = 8, py::arg("width") = 8, py::arg("classes") = 10);
    m.def("load_model", [](const std::string& manifest, const std::string& weights) {
        return load_model(manifest, weights);
    });

    py::class_<SubnetworkConfig>(m, "SubnetworkConfig")
        .def(py::init<>())
        .def_readwrite("width", &SubnetworkConfig::width_choice)
        .def_readwrite("kernel", &SubnetworkConfig::kernel_choice)
        .def_readwrite("skip", &SubnetworkConfig::skip_mask)
        .def("to_json", [](const SubnetworkConfig& c) { return to_json(c); })
        .def_static("from_json", [](const std::string& s) { return subnetwork_config_from_json(s); })
        .def(py::self == py::self)
        .def("__repr__", [](const SubnetworkConfig& c) { return "SubnetworkConfig(" + to_json(c) + ")"; });

    py::class_<Dataset>(m, "Dataset")
        .def("__len__", &Dataset::size)
        .def_readonly("num_classes", &Dataset::num_classes)
        .def_readonly("labels", &Dataset::labels)
        .def_property_readonly("sample_shape", [](const Dataset& d) { return d.sample_shape().dims; })
        .def("pixel", [](const Dataset& d, std::int64_t i) {
            return std::vector<float>(d.images.begin() + i * d.sample_numel(),
                                      d.images.begin() + (i + 1) * d.sample_numel());
        });
    m.def("make_synthetic_dataset",
          [](std::uint64_t seed, std::int64_t n, std::int64_t classes, std::vector<std::int64_t> shape) {
              return make_synthetic_dataset(seed, n, classes, TensorShape(std::move(shape)));
          },
          py::arg("seed"), py::arg("num_samples"), py::arg("num_classes"), py::arg("shape"));

    py::class_<SuperNetwork>(m, "SuperNetwork")
        .def_property_readonly("cardinality", [](const SuperNetwork& n) { return n.space().cardinality(); })
        .def_property_readonly("width_groups",
                               [](const SuperNetwork& n) {
                                   std::vector<std::pair<std::string, std::vector<std::int64_t>>> out;
                                   for (const auto& g : n.space().width_groups) out.emplace_back(g.id, g.options);
                                   return out;
                               })
        .def_property_readonly("kernel_dims", [](const SuperNetwork& n) { return n.space().kernel_dims; })
        .def_property_readonly("skippable_blocks",
                               [](const SuperNetwork& n) {
                                   std::vector<std::string> ids;
                                   for (const auto& b : n.space().skippable_blocks) ids.push_back(b.id);
                                   return ids;
                               })
        .def("maximal", &SuperNetwork::maximal)
        .def("minimal", &SuperNetwork::minimal)
        .def("sample", [](const SuperNetwork& n, std::uint64_t seed) {
            Rng rng(seed);
            return sample_config(n.space(), rng);
        })
        .def("macs", [](const SuperNetwork& n, const SubnetworkConfig& c) { return count_macs(n, c).total_macs; })
        .def("params", [](const SuperNetwork& n, const SubnetworkConfig& c) { return count_params(n, c); })
        .def("evaluate", [](const SuperNetwork& n, const SubnetworkConfig& c, const Dataset& d) {
            return evaluate(n, c, d);
        })
        .def("materialize", &SuperNetwork::materialize);

    m.def(
        "convert",
        [](const ModelGraph& model, const py::dict& policy) {
            auto r = convert(model, policy_from(policy));
            return py::make_tuple(std::move(r.supernet), r.fidelity.max_abs_diff);
        },
        py::arg("model"), py::arg("policy") = py::dict(),
        "Returns (supernet, max |output difference| of the maximal subnetwork).");

    m.def("dominates", [](std::pair<double, std::int64_t> a, std::pair<double, std::int64_t> b) {
        return dominates({a.first, a.second}, {b.first, b.second});
    });
    m.def("fast_non_dominated_sort", [](const std::vector<std::pair<double, std::int64_t>>& pts) {
        return fast_non_dominated_sort(points_from(pts));
    });
    m.def("crowding_distance", [](const std::vector<std::pair<double, std::int64_t>>& pts) {
        return crowding_distance(points_from(pts));
    });

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            const int code = cli::run(args, out, err);
            return py::make_tuple(code, out.str(), err.str());
        },
        "Runs a CLI subcommand in-process; returns (exit code, stdout, stderr).");
}
