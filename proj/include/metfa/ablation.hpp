#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <string>
#include <thread>
#include <vector>

#include "metfa/errors.hpp"
#include "metfa/losses.hpp"
#include "metfa/metrics.hpp"
#include "metfa/train.hpp"

namespace metfa {

struct AblationCell {
    std::string config;
    std::uint64_t seed = 0;
    MacroMetrics source_test;
    MacroMetrics target_test;
    std::string status;
};

struct AblationResults {
    std::vector<std::string> configs;
    std::vector<std::uint64_t> seeds;
    std::vector<AblationCell> cells; // config-major, then seed order
};

namespace detail {

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd ms;
    if (xs.empty()) return ms;
    for (double x : xs) ms.mean += x;
    ms.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - ms.mean) * (x - ms.mean);
        ms.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return ms;
}

} // namespace detail

inline void write_metrics_csv(const std::string& path, const AblationResults& results);
inline void write_summary_csv(const std::string& path, const AblationResults& results);

// Trains every config x seed cell and drops per-cell artifacts next to the
// metrics: a target-test confusion matrix and the test-set embeddings, then
// a per-cell metrics.csv and a mean/std summary.
inline AblationResults run_ablation(const std::vector<std::string>& configs,
                                    const RunConfig& base,
                                    const std::vector<std::uint64_t>& seeds,
                                    const std::string& output_dir,
                                    std::size_t jobs = 1) {
    for (const auto& name : configs) apply_ablation_mask(LossWeights{}, name); // validate names
    if (!output_dir.empty()) std::filesystem::create_directories(output_dir);

    AblationResults results;
    results.configs = configs;
    results.seeds = seeds;
    results.cells.resize(configs.size() * seeds.size());

    auto run_cell = [&](std::size_t flat) {
        const std::string& config = configs[flat / seeds.size()];
        const std::uint64_t seed = seeds[flat % seeds.size()];
        RunConfig cell_cfg = base;
        cell_cfg.ablation = config;
        cell_cfg.seed = seed;
        cell_cfg.output_dir = output_dir;

        DomainData data = generate_pair(cell_cfg.resolved().shift);
        TrainResult tr = train(cell_cfg, data);

        AblationCell cell;
        cell.config = config;
        cell.seed = seed;
        cell.status = tr.manifest.status;
        cell.source_test = tr.manifest.epochs.back().source_test;
        cell.target_test = tr.manifest.epochs.back().target_test;
        results.cells[flat] = cell;

        if (!output_dir.empty()) {
            const std::string stem = config + "_" + std::to_string(seed);
            DomainEval tgt = evaluate_quarantined(cell_cfg.net, tr.params,
                                                  data.target_test_x, data.target_test_y);
            std::ofstream cm_out(output_dir + "/confusion_" + stem + ".csv");
            write_confusion_csv(cm_out, tgt.cm);
            std::ofstream emb_out(output_dir + "/embeddings_" + stem + ".csv");
            export_embeddings(emb_out, cell_cfg.net, tr.params, data);
        }
    };

    const std::size_t n_cells = results.cells.size();
    if (jobs <= 1) {
        for (std::size_t i = 0; i < n_cells; ++i) run_cell(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> workers;
        const std::size_t n_workers = std::min(jobs, n_cells);
        workers.reserve(n_workers);
        for (std::size_t t = 0; t < n_workers; ++t) {
            workers.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < n_cells; i = next.fetch_add(1)) {
                    run_cell(i);
                }
            });
        }
        for (auto& w : workers) w.join();
    }

    if (!output_dir.empty()) {
        write_metrics_csv(output_dir + "/metrics.csv", results);
        write_summary_csv(output_dir + "/ablation_summary.csv", results);
    }
    return results;
}

inline void write_metrics_csv(const std::string& path, const AblationResults& results) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open metrics file for writing: " + path);
    out << "config,seed,domain,f1,recall,precision\n" << std::setprecision(17);
    for (const auto& cell : results.cells) {
        out << cell.config << "," << cell.seed << ",source," << cell.source_test.f1 << ","
            << cell.source_test.recall << "," << cell.source_test.precision << "\n";
        out << cell.config << "," << cell.seed << ",target," << cell.target_test.f1 << ","
            << cell.target_test.recall << "," << cell.target_test.precision << "\n";
    }
}

// One row per config: source and target f1/recall/precision as mean and
// sample standard deviation over seeds.
inline void write_summary_csv(const std::string& path, const AblationResults& results) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open summary file for writing: " + path);
    out << "config";
    for (const char* domain : {"s", "t"}) {
        for (const char* metric : {"f1", "recall", "precision"}) {
            out << "," << domain << "_" << metric << "_mean," << domain << "_" << metric
                << "_std";
        }
    }
    out << "\n" << std::setprecision(17);

    const std::size_t n_seeds = results.seeds.size();
    for (std::size_t c = 0; c < results.configs.size(); ++c) {
        out << results.configs[c];
        for (bool target : {false, true}) {
            for (int metric = 0; metric < 3; ++metric) {
                std::vector<double> vals;
                vals.reserve(n_seeds);
                for (std::size_t s = 0; s < n_seeds; ++s) {
                    const auto& m = target ? results.cells[c * n_seeds + s].target_test
                                           : results.cells[c * n_seeds + s].source_test;
                    vals.push_back(metric == 0 ? m.f1 : metric == 1 ? m.recall : m.precision);
                }
                const auto ms = detail::mean_std(vals);
                out << "," << ms.mean << "," << ms.std;
            }
        }
        out << "\n";
    }
}

} // namespace metfa
