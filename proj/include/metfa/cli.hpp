#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "metfa/ablation.hpp"
#include "metfa/datagen.hpp"
#include "metfa/errors.hpp"
#include "metfa/metrics.hpp"
#include "metfa/model.hpp"
#include "metfa/train.hpp"
#include "metfa/verify.hpp"

namespace metfa {

inline constexpr const char* kVersion = "1.0.0";

// Exit codes: 0 ok, 1 usage/config error, 2 numeric failure, 3 gradient
// verification failure.
enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 1,
    kExitNumeric = 2,
    kExitCheckFailed = 3,
};

namespace detail {

inline std::string resolve_output_dir(const std::string& flag_value,
                                      const std::string& config_value) {
    if (!flag_value.empty()) return flag_value;
    if (!config_value.empty()) return config_value;
    if (const char* env = std::getenv("METFA_OUTPUT_DIR")) {
        if (*env) return env;
    }
    return ".";
}

inline nlohmann::json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed JSON in " + path + ": " + e.what());
    }
    return j;
}

inline void print_metrics_line(std::ostream& out, const char* label, const MacroMetrics& m) {
    out << label << " f1=" << m.f1 << " recall=" << m.recall
        << " precision=" << m.precision << "\n";
}

} // namespace detail

inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
    CLI::App app{"MetFA trainer: metric-guided feature alignment on synthetic two-domain data"};
    app.name("metfa");
    app.require_subcommand(1);

    std::string spec_path, dataset_out;
    auto* gen = app.add_subcommand("gen-data", "Generate a two-domain dataset CSV");
    gen->add_option("spec", spec_path, "shift spec JSON file")->required();
    gen->add_option("out", dataset_out, "output CSV path")->required();

    std::string train_config_path, out_dir_flag;
    std::uint64_t seed_flag = 0;
    bool seed_given = false;
    long long epochs_flag = -1;
    auto* train_cmd = app.add_subcommand("train", "Train one run from a config JSON");
    train_cmd->add_option("config", train_config_path, "run config JSON file")->required();
    train_cmd->add_option("--seed", seed_flag, "override config seed")
        ->each([&](const std::string&) { seed_given = true; });
    train_cmd->add_option("--epochs", epochs_flag, "override epoch count");
    train_cmd->add_option("--output-dir", out_dir_flag, "output directory");

    std::string ckpt_path, data_path, eval_out_flag;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset CSV");
    eval_cmd->add_option("checkpoint", ckpt_path, "checkpoint JSON file")->required();
    eval_cmd->add_option("data", data_path, "dataset CSV file")->required();
    eval_cmd->add_option("--output-dir", eval_out_flag, "output directory");

    std::string ablate_config_path, ablate_out_flag;
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    std::vector<std::string> configs = ablation_names();
    std::size_t jobs = 1;
    auto* ablate_cmd = app.add_subcommand("ablate", "Run the ablation ladder");
    ablate_cmd->add_option("config", ablate_config_path, "base run config JSON file")->required();
    ablate_cmd->add_option("--seeds", seeds, "comma-separated seeds")->delimiter(',');
    ablate_cmd->add_option("--configs", configs, "comma-separated ablation names")->delimiter(',');
    ablate_cmd->add_option("--jobs", jobs, "parallel cells");
    ablate_cmd->add_option("--output-dir", ablate_out_flag, "output directory");

    double tol = 1e-4;
    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "Verify loss gradients against finite differences");
    gradcheck_cmd->add_option("--tol", tol, "max relative error tolerance");

    auto* version_cmd = app.add_subcommand("version", "Print version");

    try {
        std::reverse(args.begin(), args.end());
        app.parse(std::move(args));
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n";
        err << "run 'metfa --help' for usage\n";
        return kExitUsage;
    }

    try {
        if (gen->parsed()) {
            DomainShiftSpec spec = detail::load_json(spec_path).get<DomainShiftSpec>();
            DomainData data = generate_pair(spec);
            save_dataset_csv(dataset_out, data);
            out << "wrote " << dataset_out << " ("
                << data.source_train.x.rows() + data.source_test.x.rows() << " source + "
                << data.target_train_x.rows() + data.target_test_x.rows() << " target rows)\n";
            return kExitOk;
        }

        if (train_cmd->parsed()) {
            RunConfig cfg = detail::load_json(train_config_path).get<RunConfig>();
            if (seed_given) cfg.seed = seed_flag;
            if (epochs_flag >= 0) cfg.opt.epochs = static_cast<std::size_t>(epochs_flag);
            cfg.output_dir = detail::resolve_output_dir(out_dir_flag, cfg.output_dir);
            std::filesystem::create_directories(cfg.output_dir);

            TrainResult tr = train(cfg);
            save_manifest(cfg.output_dir + "/manifest.json", tr.manifest);
            save_checkpoint(cfg.output_dir + "/checkpoint.json", cfg.net, tr.params);

            const EpochRecord& last = tr.manifest.epochs.back();
            out << "status=" << tr.manifest.status << " epochs=" << tr.manifest.epochs.size() - 1
                << " wall_time_s=" << tr.manifest.wall_time_s << "\n";
            detail::print_metrics_line(out, "source_test", last.source_test);
            detail::print_metrics_line(out, "target_test", last.target_test);
            if (tr.manifest.status != "completed") {
                err << "run failed: " << tr.manifest.error << "\n";
                return kExitNumeric;
            }
            return kExitOk;
        }

        if (eval_cmd->parsed()) {
            auto [net, params] = load_checkpoint(ckpt_path);
            DomainData data = load_dataset_csv(data_path);
            if (data.num_classes > net.num_classes) {
                throw ConfigError("dataset has more classes than the checkpointed model");
            }
            const std::string out_dir = detail::resolve_output_dir(eval_out_flag, "");
            std::filesystem::create_directories(out_dir);

            DomainEval src = evaluate_labeled(net, params, data.source_test);
            DomainEval tgt =
                evaluate_quarantined(net, params, data.target_test_x, data.target_test_y);
            detail::print_metrics_line(out, "source_test", src.metrics);
            detail::print_metrics_line(out, "target_test", tgt.metrics);

            std::ofstream src_cm(out_dir + "/confusion_eval_source.csv");
            write_confusion_csv(src_cm, src.cm);
            std::ofstream tgt_cm(out_dir + "/confusion_eval_target.csv");
            write_confusion_csv(tgt_cm, tgt.cm);
            std::ofstream emb(out_dir + "/embeddings_eval.csv");
            export_embeddings(emb, net, params, data);
            return kExitOk;
        }

        if (ablate_cmd->parsed()) {
            RunConfig base = detail::load_json(ablate_config_path).get<RunConfig>();
            const std::string out_dir =
                detail::resolve_output_dir(ablate_out_flag, base.output_dir);
            AblationResults results = run_ablation(configs, base, seeds, out_dir, jobs);
            out << "wrote " << out_dir << "/metrics.csv (" << results.cells.size()
                << " cells)\n";
            for (std::size_t c = 0; c < results.configs.size(); ++c) {
                std::vector<double> t_f1;
                for (std::size_t s = 0; s < results.seeds.size(); ++s) {
                    t_f1.push_back(results.cells[c * results.seeds.size() + s].target_test.f1);
                }
                const auto ms = detail::mean_std(t_f1);
                out << results.configs[c] << " target_f1=" << ms.mean << " +/- " << ms.std
                    << "\n";
            }
            return kExitOk;
        }

        if (gradcheck_cmd->parsed()) {
            bool ok = true;
            for (const auto& check : verify_loss_gradients(10, 1e-5)) {
                const bool pass = check.max_rel_err <= tol;
                ok = ok && pass;
                out << check.name << " max_rel_err=" << check.max_rel_err
                    << (pass ? " ok" : " FAIL") << " (tol=" << tol << ")\n";
            }
            return ok ? kExitOk : kExitCheckFailed;
        }

        if (version_cmd->parsed()) {
            out << "metfa " << kVersion << "\n";
            return kExitOk;
        }
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

} // namespace metfa
