#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "metfa/datagen.hpp"
#include "metfa/errors.hpp"
#include "metfa/losses.hpp"
#include "metfa/metrics.hpp"
#include "metfa/model.hpp"
#include "metfa/optimizer.hpp"
#include "metfa/rng.hpp"

namespace metfa {

struct RunConfig {
    NetConfig net;
    OptConfig opt;
    LossWeights weights;
    DomainShiftSpec shift;
    std::string ablation = "metfa-5";
    std::string output_dir;
    std::uint64_t seed = 0;

    // The master seed drives both the data stream and the training stream;
    // the derived sub-seeds are recorded so a manifest replays exactly.
    RunConfig resolved() const {
        RunConfig r = *this;
        r.shift.seed = splitmix64(seed);
        r.opt.seed = splitmix64(seed + 1);
        return r;
    }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{{"net", c.net},       {"opt", c.opt},
                       {"weights", c.weights}, {"shift", c.shift},
                       {"ablation", c.ablation}, {"output_dir", c.output_dir},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    RunConfig d;
    c.net = j.value("net", d.net);
    c.opt = j.value("opt", d.opt);
    c.weights = j.value("weights", d.weights);
    c.shift = j.value("shift", d.shift);
    c.ablation = j.value("ablation", d.ablation);
    c.output_dir = j.value("output_dir", d.output_dir);
    c.seed = j.value("seed", d.seed);
}

struct EpochRecord {
    std::size_t epoch = 0; // 0 is the pre-training snapshot
    StepReport mean_losses; // averaged over the epoch's steps (zeros at epoch 0)
    MacroMetrics source_test;
    MacroMetrics target_test;
};

inline void to_json(nlohmann::json& j, const MacroMetrics& m) {
    j = nlohmann::json{{"f1", m.f1}, {"recall", m.recall}, {"precision", m.precision}};
}

inline void from_json(const nlohmann::json& j, MacroMetrics& m) {
    m.f1 = j.value("f1", 0.0);
    m.recall = j.value("recall", 0.0);
    m.precision = j.value("precision", 0.0);
}

inline void to_json(nlohmann::json& j, const StepReport& r) {
    j = nlohmann::json{{"ce", r.ce},
                       {"prior", r.prior},
                       {"metric", r.metric},
                       {"rec", r.rec},
                       {"classdist", r.classdist},
                       {"entropy", r.entropy},
                       {"objective_main", r.objective_main},
                       {"objective_proto", r.objective_proto},
                       {"grad_norm_main", r.grad_norm_main},
                       {"grad_norm_proto", r.grad_norm_proto}};
}

inline void to_json(nlohmann::json& j, const EpochRecord& e) {
    j = nlohmann::json{{"epoch", e.epoch},
                       {"losses", e.mean_losses},
                       {"source_test", e.source_test},
                       {"target_test", e.target_test}};
}

struct RunManifest {
    RunConfig config; // resolved form, sub-seeds included
    std::string status = "completed";
    std::string error;
    std::vector<EpochRecord> epochs;
    // Measured, not serialized: keeps the manifest file byte-reproducible.
    double wall_time_s = 0.0;
};

inline nlohmann::json manifest_to_json(const RunManifest& m) {
    return nlohmann::json{{"format", "metfa-run-v1"},
                          {"config", m.config},
                          {"seed", m.config.seed},
                          {"status", m.status},
                          {"error", m.error},
                          {"epochs", m.epochs}};
}

inline void save_manifest(const std::string& path, const RunManifest& m) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open manifest file for writing: " + path);
    out << manifest_to_json(m).dump(2) << "\n";
}

struct TrainResult {
    RunManifest manifest;
    ParamStore params;
};

// Full training run on pre-generated data. Target ground truth enters only
// through the per-epoch evaluation.
inline TrainResult train(const RunConfig& config, const DomainData& data) {
    const auto t0 = std::chrono::steady_clock::now();
    RunConfig cfg = config.resolved();
    cfg.net.validate();
    cfg.opt.validate();
    cfg.weights.validate();
    const LossWeights weights = apply_ablation_mask(cfg.weights, cfg.ablation);

    TrainResult result;
    result.manifest.config = cfg;
    result.params = init_params(cfg.net, cfg.opt.seed);
    MomentumState state = MomentumState::zeros_like(result.params);
    Rng rng(splitmix64(cfg.opt.seed));

    auto snapshot = [&](std::size_t epoch, const StepReport& mean_losses) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.mean_losses = mean_losses;
        rec.source_test = evaluate_labeled(cfg.net, result.params, data.source_test).metrics;
        rec.target_test = evaluate_quarantined(cfg.net, result.params, data.target_test_x,
                                               data.target_test_y).metrics;
        result.manifest.epochs.push_back(rec);
    };
    snapshot(0, StepReport{});

    const std::size_t batch_rows = kSourcePerClass * cfg.net.num_classes;
    const std::size_t steps =
        cfg.opt.steps_per_epoch > 0
            ? cfg.opt.steps_per_epoch
            : (data.source_train.x.rows() + batch_rows - 1) / batch_rows;

    for (std::size_t epoch = 1; epoch <= cfg.opt.epochs; ++epoch) {
        StepReport sums;
        try {
            for (std::size_t s = 0; s < steps; ++s) {
                Batch batch = sample_batch(data, rng);
                StepReport r = train_step(batch, cfg.net, result.params, state, weights,
                                          cfg.opt, rng);
                sums.ce += r.ce;
                sums.prior += r.prior;
                sums.metric += r.metric;
                sums.rec += r.rec;
                sums.classdist += r.classdist;
                sums.entropy += r.entropy;
                sums.objective_main += r.objective_main;
                sums.objective_proto += r.objective_proto;
                sums.grad_norm_main += r.grad_norm_main;
                sums.grad_norm_proto += r.grad_norm_proto;
            }
        } catch (const NumericError& e) {
            result.manifest.status = "failed";
            result.manifest.error = e.what();
            break;
        }
        const double inv = 1.0 / static_cast<double>(steps);
        StepReport mean = sums;
        mean.ce *= inv;
        mean.prior *= inv;
        mean.metric *= inv;
        mean.rec *= inv;
        mean.classdist *= inv;
        mean.entropy *= inv;
        mean.objective_main *= inv;
        mean.objective_proto *= inv;
        mean.grad_norm_main *= inv;
        mean.grad_norm_proto *= inv;
        snapshot(epoch, mean);
    }

    result.manifest.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

inline TrainResult train(const RunConfig& config) {
    RunConfig cfg = config.resolved();
    DomainData data = generate_pair(cfg.shift);
    return train(config, data);
}

} // namespace metfa
