// SPDX-License-Identifier: Apache-2.0
#include "bnas/cli.hpp"

#include <cstdio>
#include <optional>
#include <ostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "bnas/elasticity.hpp"
#include "bnas/errors.hpp"
#include "bnas/metrics.hpp"
#include "bnas/model_io.hpp"
#include "bnas/search.hpp"
#include "bnas/training.hpp"
#include "bnas/zoo.hpp"

namespace bnas::cli {

namespace {

// Stream tags for derive_seed, one per consumer of randomness.
enum SeedTag : std::uint64_t { kTagInit = 1, kTagData, kTagPretrain, kTagTrain, kTagSearch, kTagFinetune, kTagProbe };

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

struct Common {
    std::uint64_t seed = 42;
    bool seed_given = false;
    std::string config_path;

    RunConfig load_config() const {
        RunConfig c;
        if (!config_path.empty()) c = run_config_from_json(read_file(config_path));
        if (seed_given || config_path.empty()) c.seed = seed;
        return c;
    }
};

void add_seed(CLI::App* cmd, Common& common) {
    cmd->add_option_function<std::uint64_t>(
           "--seed",
           [&common](const std::uint64_t& v) {
               common.seed = v;
               common.seed_given = true;
           },
           "Seed for every random choice (default 42)");
}

Dataset load_split(const fs::path& dir, const std::string& split, const ModelGraph& model, std::int64_t limit = 0) {
    auto d = load_idx_dataset(dir / (split + "-images.idx"), dir / (split + "-labels.idx"), limit, model.num_classes());
    const auto in = model.input_shape(1);
    if (d.channels != in[1] || d.height != in[2] || d.width != in[3])
        throw ConfigError("dataset samples are " + d.sample_shape().str() + " but the model expects " + in.str());
    return d;
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string());
}

SubnetworkConfig resolve_subnet(const SuperNetwork& net, const std::string& spec) {
    if (spec == "max") return net.maximal();
    if (spec == "min") return net.minimal();
    auto c = subnetwork_config_from_json(read_file(spec));
    check_config(net.space(), c);
    return c;
}

Objectives read_baseline(const fs::path& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
        return Objectives{doc.at("accuracy").get<double>(), doc.at("macs").get<std::int64_t>()};
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("baseline " + path.string() + ": " + e.what());
    }
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Super-network conversion, training and multi-objective subnetwork search"};
    app.require_subcommand(1);
    Common common;
    std::function<void()> action;

    // init
    std::string arch = "toy_cnn", out_dir;
    std::int64_t channels = 1, height = 12, width = 12, classes = 10;
    auto* init = app.add_subcommand("init", "Write a bundled example model");
    init->add_option("--arch", arch, "toy_resnet | toy_mobilenet | toy_cnn")->capture_default_str();
    init->add_option("--channels", channels)->capture_default_str();
    init->add_option("--height", height)->capture_default_str();
    init->add_option("--width", width)->capture_default_str();
    init->add_option("--classes", classes)->capture_default_str();
    init->add_option("--out", out_dir, "Output directory")->required();
    add_seed(init, common);
    init->callback([&] {
        action = [&] {
            auto model = make_zoo_model(arch, derive_seed(common.seed, kTagInit), channels, height, width, classes);
            make_dir(out_dir);
            save_model(model, fs::path(out_dir) / "model.json", fs::path(out_dir) / "model.bin");
            out << "wrote " << arch << " (" << model.size() << " nodes, " << count_costs(model).total_macs
                << " MACs) to " << out_dir << "\n";
        };
    });

    // make-data
    std::int64_t n_train = 4096, n_val = 1024;
    auto* data_cmd = app.add_subcommand("make-data", "Write a synthetic IDX dataset");
    data_cmd->add_option("--train", n_train, "Training samples")->capture_default_str();
    data_cmd->add_option("--val", n_val, "Validation samples")->capture_default_str();
    data_cmd->add_option("--classes", classes)->capture_default_str();
    data_cmd->add_option("--height", height)->capture_default_str();
    data_cmd->add_option("--width", width)->capture_default_str();
    data_cmd->add_option("--out", out_dir, "Output directory")->required();
    add_seed(data_cmd, common);
    data_cmd->callback([&] {
        action = [&] {
            if (classes < 2 || classes > 256) throw ConfigError("--classes must be in [2, 256]");
            const auto seed = derive_seed(common.seed, kTagData);
            const TensorShape shape{1, height, width};
            const auto train = make_synthetic_dataset(derive_seed(seed, 0), n_train, classes, shape);
            const auto val = make_synthetic_dataset(derive_seed(seed, 1), n_val, classes, shape);
            make_dir(out_dir);
            const fs::path dir(out_dir);
            save_idx_dataset(train, dir / "train-images.idx", dir / "train-labels.idx");
            save_idx_dataset(val, dir / "val-images.idx", dir / "val-labels.idx");
            out << "wrote " << n_train << " training and " << n_val << " validation samples to " << out_dir << "\n";
        };
    });

    // pretrain
    std::string model_path, weights_path, data_dir;
    int epochs = 10;
    auto* pretrain = app.add_subcommand("pretrain", "Train a standalone model with cross-entropy");
    pretrain->add_option("--model", model_path, "Model manifest")->required();
    pretrain->add_option("--weights", weights_path, "Weight payload")->required();
    pretrain->add_option("--data", data_dir, "IDX dataset directory")->required();
    pretrain->add_option("--config", common.config_path, "Run configuration");
    pretrain->add_option("--epochs", epochs)->capture_default_str();
    pretrain->add_option("--out", out_dir, "Output directory")->required();
    add_seed(pretrain, common);
    pretrain->callback([&] {
        action = [&] {
            const auto cfg = common.load_config();
            if (epochs < 0) throw ConfigError("--epochs must be >= 0");
            auto model = load_model(model_path, weights_path);
            const auto train = load_split(data_dir, "train", model);
            const auto val = load_split(data_dir, "val", model);
            Rng rng(derive_seed(cfg.seed, kTagPretrain));
            const auto report = train_model(model, train, val, epochs, cfg.training, rng);
            make_dir(out_dir);
            const fs::path dir(out_dir);
            save_model(model, dir / "model.json", dir / "model.bin");
            write_file_atomic(dir / "report.csv", report.csv());
            if (!report.epochs.empty()) out << "validation accuracy " << report.epochs.back().acc_max << "\n";
        };
    });

    // convert
    std::string policy_path;
    auto* convert_cmd = app.add_subcommand("convert", "Convert a trained model into a super-network");
    convert_cmd->add_option("--model", model_path, "Model manifest")->required();
    convert_cmd->add_option("--weights", weights_path, "Weight payload")->required();
    convert_cmd->add_option("--policy", policy_path, "Elasticity policy document");
    convert_cmd->add_option("--out", out_dir, "Output directory")->required();
    add_seed(convert_cmd, common);
    convert_cmd->callback([&] {
        action = [&] {
            ElasticityPolicy policy;
            if (!policy_path.empty()) policy = policy_from_json(read_file(policy_path));
            const auto model = load_model(model_path, weights_path);
            auto result = convert(model, policy, derive_seed(common.seed, kTagProbe));
            save_supernet(result.supernet, policy, out_dir);
            const auto& space = result.supernet.space();
            out << "fidelity max|Δ| ≤ 1e-6 relative: passed (observed " << fmt("%.3e", result.fidelity.max_abs_diff)
                << ", allowed " << fmt("%.3e", result.fidelity.tolerance) << ")\n";
            out << "search space: " << space.width_groups.size() << " width groups, " << space.kernel_dims.size()
                << " kernel layers, " << space.skippable_blocks.size() << " skippable blocks, "
                << space.cardinality() << " subnetworks\n";
        };
    });

    // train
    std::string supernet_dir;
    auto* train_cmd = app.add_subcommand("train", "Train a super-network");
    train_cmd->add_option("--supernet", supernet_dir, "Converted super-network directory")->required();
    train_cmd->add_option("--data", data_dir, "IDX dataset directory")->required();
    train_cmd->add_option("--config", common.config_path, "Run configuration");
    train_cmd->add_option("--out", out_dir, "Checkpoint directory")->required();
    add_seed(train_cmd, common);
    train_cmd->callback([&] {
        action = [&] {
            const auto cfg = common.load_config();
            auto loaded = load_supernet(supernet_dir);
            const auto train = load_split(data_dir, "train", loaded.net.base());
            const auto val = load_split(data_dir, "val", loaded.net.base());
            Rng rng(derive_seed(cfg.seed, kTagTrain));
            const auto report = train_supernet(loaded.net, train, val, cfg.training, rng);
            save_supernet(loaded.net, loaded.policy, out_dir);
            write_file_atomic(fs::path(out_dir) / "report.csv", report.csv());
            for (const auto& e : report.epochs)
                out << "epoch " << e.epoch << " [" << e.stage << "] loss " << fmt("%.4f", e.mean_loss) << " acc_max "
                    << fmt("%.4f", e.acc_max) << " acc_min " << fmt("%.4f", e.acc_min) << "\n";
        };
    });

    // search
    std::string baseline_path;
    int jobs = 0;
    auto* search_cmd = app.add_subcommand("search", "NSGA-II search over subnetworks");
    search_cmd->add_option("--supernet", supernet_dir, "Trained super-network directory")->required();
    search_cmd->add_option("--data", data_dir, "IDX dataset directory")->required();
    search_cmd->add_option("--config", common.config_path, "Run configuration");
    search_cmd->add_option("--out", out_dir, "Output directory")->required();
    search_cmd->add_option("--jobs", jobs, "Concurrent evaluations (default: config value)");
    search_cmd->add_option("--baseline", baseline_path, "Baseline document marked on the plot");
    add_seed(search_cmd, common);
    search_cmd->callback([&] {
        action = [&] {
            auto cfg = common.load_config();
            if (jobs < 0) throw ConfigError("--jobs must be >= 1");
            if (jobs > 0) cfg.search.jobs = jobs;
            validate(cfg.search);
            std::optional<Objectives> baseline;
            if (!baseline_path.empty()) baseline = read_baseline(baseline_path);
            const auto loaded = load_supernet(supernet_dir);
            const auto val = load_split(data_dir, "val", loaded.net.base(), cfg.search.val_samples);
            const fs::path dir(out_dir);
            make_dir(dir);
            const auto& space = loaded.net.space();
            auto persist = [&](const ParetoArchive& archive) {
                const auto rows = archive.rows();
                write_file_atomic(dir / "archive.csv", archive_csv(rows));
                write_file_atomic(dir / "configs.json", archive.sidecar_json(space));
                write_file_atomic(dir / "front.svg", pareto_svg(rows, baseline ? &*baseline : nullptr));
            };
            const auto archive = evolve(space, supernet_evaluator(loaded.net, val), cfg.search,
                                        derive_seed(cfg.seed, kTagSearch), persist);
            persist(archive);
            out << "evaluations " << archive.evaluations() << " (" << archive.unique_evaluations() << " distinct), "
                << archive.generations() << " generations, front of " << archive.front().size() << "\n";
        };
    });

    // eval
    std::string subnet = "max", json_out;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate one subnetwork");
    eval_cmd->add_option("--supernet", supernet_dir, "Super-network directory")->required();
    eval_cmd->add_option("--subnet", subnet, "max | min | subnetwork config file")->capture_default_str();
    eval_cmd->add_option("--data", data_dir, "IDX dataset directory")->required();
    std::int64_t eval_limit = 0;
    eval_cmd->add_option("--limit", eval_limit, "Validation samples to use (0 = all)");
    eval_cmd->add_option("--json-out", json_out, "Also write the result as a baseline document");
    add_seed(eval_cmd, common);
    eval_cmd->callback([&] {
        action = [&] {
            const auto loaded = load_supernet(supernet_dir);
            const auto config = resolve_subnet(loaded.net, subnet);
            const auto val = load_split(data_dir, "val", loaded.net.base(), eval_limit);
            const auto acc = evaluate(loaded.net, config, val);
            const auto costs = count_macs(loaded.net, config);
            out << "accuracy " << fmt("%.6f", acc) << "\nmacs " << costs.total_macs << "\nparams " << costs.total_params
                << "\n";
            if (!json_out.empty()) {
                nlohmann::json doc{{"accuracy", acc},
                                   {"macs", costs.total_macs},
                                   {"params", costs.total_params},
                                   {"config", nlohmann::json::parse(to_json(config))}};
                write_file_atomic(json_out, doc.dump(2) + "\n");
            }
        };
    });

    // report
    std::string archive_path;
    double slack = 0.0, fraction = 1.0;
    auto* report_cmd = app.add_subcommand("report", "Print the subnetworks that beat a baseline");
    report_cmd->add_option("--archive", archive_path, "archive.csv from search")->required();
    report_cmd->add_option("--baseline", baseline_path, "Baseline document from eval --json-out")->required();
    report_cmd->add_option("--accuracy-slack", slack, "Accuracy the region may give up")->capture_default_str();
    report_cmd->add_option("--macs-fraction", fraction, "Upper bound on MACs relative to the baseline")
        ->capture_default_str();
    report_cmd->callback([&] {
        action = [&] {
            if (slack < 0 || fraction <= 0) throw ConfigError("slack must be >= 0 and fraction > 0");
            const auto base = read_baseline(baseline_path);
            const auto rows = parse_archive_csv(read_file(archive_path));
            const auto region = outperforming_region(rows, base, slack, fraction);
            out << "baseline: accuracy " << fmt("%.4f", base.accuracy) << ", " << base.macs << " MACs\n";
            if (region.empty()) {
                out << "no front member outperforms the baseline\n";
                return;
            }
            out << "config_id         macs        params   top1     MACs reduction\n";
            for (const auto& r : region) {
                char line[160];
                std::snprintf(line, sizeof line, "%-16s  %-10lld  %-7lld  %.4f   %.2fx\n", r.config_id.c_str(),
                              static_cast<long long>(r.macs), static_cast<long long>(r.params), r.top1_accuracy,
                              macs_ratio(base.macs, r.macs));
                out << line;
            }
            const auto best = *std::max_element(region.begin(), region.end(), [](const auto& a, const auto& b) {
                return a.top1_accuracy < b.top1_accuracy || (a.top1_accuracy == b.top1_accuracy && a.macs > b.macs);
            });
            const auto& cheapest = region.front();
            out << "best accuracy: " << best.config_id << " (" << fmt("%.4f", best.top1_accuracy) << ", "
                << fmt("%.2f", macs_ratio(base.macs, best.macs)) << "x fewer MACs)\n";
            out << "fewest MACs:   " << cheapest.config_id << " (" << fmt("%.4f", cheapest.top1_accuracy) << ", "
                << fmt("%.2f", macs_ratio(base.macs, cheapest.macs)) << "x fewer MACs)\n";
        };
    });

    // finetune
    auto* finetune = app.add_subcommand("finetune", "Extract a subnetwork and train it on its own");
    finetune->add_option("--supernet", supernet_dir, "Super-network directory")->required();
    finetune->add_option("--subnet", subnet, "max | min | subnetwork config file")->required();
    finetune->add_option("--data", data_dir, "IDX dataset directory")->required();
    finetune->add_option("--config", common.config_path, "Run configuration");
    finetune->add_option("--epochs", epochs)->capture_default_str();
    finetune->add_option("--out", out_dir, "Output directory")->required();
    add_seed(finetune, common);
    finetune->callback([&] {
        action = [&] {
            const auto cfg = common.load_config();
            if (epochs < 0) throw ConfigError("--epochs must be >= 0");
            const auto loaded = load_supernet(supernet_dir);
            auto model = loaded.net.materialize(resolve_subnet(loaded.net, subnet));
            const auto train = load_split(data_dir, "train", model);
            const auto val = load_split(data_dir, "val", model);
            Rng rng(derive_seed(cfg.seed, kTagFinetune));
            const auto report = train_model(model, train, val, epochs, cfg.training, rng);
            make_dir(out_dir);
            const fs::path dir(out_dir);
            save_model(model, dir / "model.json", dir / "model.bin");
            write_file_atomic(dir / "report.csv", report.csv());
            if (!report.epochs.empty()) out << "validation accuracy " << report.epochs.back().acc_max << "\n";
        };
    });

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (action) action();
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const InvalidChoice& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

} // namespace bnas::cli
