#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "metfa/errors.hpp"
#include "metfa/rng.hpp"
#include "metfa/tensor.hpp"

namespace metfa {

// Parametric covariate shift between two synthetic domains. Class means sit
// on a circle of radius class_sep in the first two input dimensions (the
// signal plane); the target domain rotates, rescales and translates that
// plane. Zero rotation/translation with scale 1 gives identical domains.
struct DomainShiftSpec {
    std::size_t num_classes = 4;
    std::size_t input_dim = 16;
    double class_sep = 3.0;
    double noise_dim_std = 1.0;
    double rotation_deg = 30.0;
    double translation = 1.0;
    double scale = 1.3;
    std::size_t n_source = 500; // per class
    std::size_t n_target = 500; // per class
    std::uint64_t seed = 0;
    double test_fraction = 0.2;

    void validate() const {
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (input_dim < 2) throw ConfigError("input_dim must be >= 2 (signal plane)");
        if (n_source == 0 || n_target == 0) throw ConfigError("per-class counts must be >= 1");
        if (!(scale > 0.0)) throw ConfigError("scale must be > 0");
        if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
            throw ConfigError("test_fraction must be in [0, 1)");
        }
    }
};

struct EvalAccess;
inline void write_dataset_csv(std::ostream& out, const struct DomainData& data);

// Target-domain ground truth. Readable only through EvalAccess (the metric
// functions) and the dataset CSV writer; the training path carries values of
// this type around but cannot look inside.
class QuarantinedLabels {
public:
    QuarantinedLabels() = default;
    explicit QuarantinedLabels(std::vector<int> labels) : labels_(std::move(labels)) {}

    std::size_t size() const { return labels_.size(); }

    QuarantinedLabels subset(const std::vector<std::size_t>& rows) const {
        std::vector<int> out;
        out.reserve(rows.size());
        for (std::size_t r : rows) out.push_back(labels_.at(r));
        return QuarantinedLabels(std::move(out));
    }

private:
    std::vector<int> labels_;
    friend struct EvalAccess;
    friend void write_dataset_csv(std::ostream&, const DomainData&);
};

struct LabeledSet {
    Tensor x;
    std::vector<int> y;
};

struct DomainData {
    std::size_t num_classes = 0;
    std::size_t input_dim = 0;
    LabeledSet source_train;
    LabeledSet source_test;
    Tensor target_train_x;
    Tensor target_test_x;
    QuarantinedLabels target_train_y;
    QuarantinedLabels target_test_y;
};

namespace detail {

inline Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw InsufficientDataError("dataset split has no rows");
    std::vector<double> flat;
    flat.reserve(rows.size() * rows[0].size());
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    return Tensor({rows.size(), rows[0].size()}, std::move(flat));
}

} // namespace detail

inline DomainData generate_pair(const DomainShiftSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const std::size_t m = spec.num_classes;
    const std::size_t d = spec.input_dim;
    const double theta = spec.rotation_deg * std::numbers::pi / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double noise_scale = std::sqrt(spec.scale);

    DomainData data;
    data.num_classes = m;
    data.input_dim = d;

    struct SplitRows {
        std::vector<std::vector<double>> train_x, test_x;
        std::vector<int> train_y, test_y;
    };

    auto generate_domain = [&](bool target, std::size_t per_class) {
        SplitRows out;
        for (std::size_t cls = 0; cls < m; ++cls) {
            const double angle = 2.0 * std::numbers::pi * static_cast<double>(cls) / static_cast<double>(m);
            const double mx = spec.class_sep * std::cos(angle);
            const double my = spec.class_sep * std::sin(angle);
            std::vector<std::vector<double>> rows(per_class);
            for (std::size_t s = 0; s < per_class; ++s) {
                std::vector<double> row(d);
                const double e0 = rng.normal(), e1 = rng.normal();
                if (!target) {
                    row[0] = mx + e0;
                    row[1] = my + e1;
                } else {
                    const double sx = mx + noise_scale * e0;
                    const double sy = my + noise_scale * e1;
                    row[0] = ct * sx - st * sy + spec.translation;
                    row[1] = st * sx + ct * sy + spec.translation;
                }
                for (std::size_t j = 2; j < d; ++j) row[j] = rng.normal(0.0, spec.noise_dim_std);
                rows[s] = std::move(row);
            }
            // Stratified split, seeded shuffle within the class.
            std::vector<std::size_t> order(per_class);
            for (std::size_t s = 0; s < per_class; ++s) order[s] = s;
            rng.shuffle(order);
            const std::size_t n_test =
                static_cast<std::size_t>(std::llround(static_cast<double>(per_class) *
                                                      spec.test_fraction));
            for (std::size_t s = 0; s < per_class; ++s) {
                const bool is_test = s < n_test;
                auto& xs = is_test ? out.test_x : out.train_x;
                auto& ys = is_test ? out.test_y : out.train_y;
                xs.push_back(std::move(rows[order[s]]));
                ys.push_back(static_cast<int>(cls));
            }
        }
        return out;
    };

    SplitRows src = generate_domain(false, spec.n_source);
    SplitRows tgt = generate_domain(true, spec.n_target);

    data.source_train = {detail::rows_to_tensor(src.train_x), std::move(src.train_y)};
    data.source_test = {detail::rows_to_tensor(src.test_x), std::move(src.test_y)};
    data.target_train_x = detail::rows_to_tensor(tgt.train_x);
    data.target_test_x = detail::rows_to_tensor(tgt.test_x);
    data.target_train_y = QuarantinedLabels(std::move(tgt.train_y));
    data.target_test_y = QuarantinedLabels(std::move(tgt.test_y));
    return data;
}

// One training mini-batch: class-balanced labeled source rows plus uniformly
// drawn unlabeled target rows. Target ground truth rides along quarantined.
struct Batch {
    Tensor x_s;
    std::vector<int> y_s;
    Tensor x_t;
    QuarantinedLabels y_t_eval;
};

inline constexpr std::size_t kSourcePerClass = 5;

inline Batch sample_batch(const DomainData& data, Rng& rng) {
    const std::size_t m = data.num_classes;
    const std::size_t d = data.input_dim;

    std::vector<std::vector<std::size_t>> by_class(m);
    for (std::size_t i = 0; i < data.source_train.y.size(); ++i) {
        by_class[static_cast<std::size_t>(data.source_train.y[i])].push_back(i);
    }

    Batch batch;
    std::vector<double> xs;
    xs.reserve(m * kSourcePerClass * d);
    for (std::size_t cls = 0; cls < m; ++cls) {
        if (by_class[cls].size() < kSourcePerClass) {
            throw InsufficientDataError("source class " + std::to_string(cls) + " has only " +
                                        std::to_string(by_class[cls].size()) + " samples");
        }
        const auto pick = rng.sample_without_replacement(by_class[cls].size(), kSourcePerClass);
        for (std::size_t p : pick) {
            const std::size_t row = by_class[cls][p];
            const double* src = data.source_train.x.data() + row * d;
            xs.insert(xs.end(), src, src + d);
            batch.y_s.push_back(static_cast<int>(cls));
        }
    }
    batch.x_s = Tensor({m * kSourcePerClass, d}, std::move(xs));

    const std::size_t n_target = m * kSourcePerClass;
    if (data.target_train_x.rows() < n_target) {
        throw InsufficientDataError("target train split smaller than one batch");
    }
    const auto pick = rng.sample_without_replacement(data.target_train_x.rows(), n_target);
    std::vector<double> xt;
    xt.reserve(n_target * d);
    for (std::size_t row : pick) {
        const double* src = data.target_train_x.data() + row * d;
        xt.insert(xt.end(), src, src + d);
    }
    batch.x_t = Tensor({n_target, d}, std::move(xt));
    batch.y_t_eval = data.target_train_y.subset(pick);
    return batch;
}

// --- CSV round trip ----------------------------------------------------------
// Header: domain,split,label,quarantined,f0..f{d-1}. Target labels are present
// in the file but flagged quarantined=1; the loader routes them straight back
// into QuarantinedLabels.

inline void write_dataset_csv(std::ostream& out, const DomainData& data) {
    out << "domain,split,label,quarantined";
    for (std::size_t j = 0; j < data.input_dim; ++j) out << ",f" << j;
    out << "\n";
    out << std::setprecision(17);

    auto write_rows = [&](const char* domain, const char* split, const Tensor& x,
                          const std::vector<int>& y, bool quarantined) {
        for (std::size_t r = 0; r < x.rows(); ++r) {
            out << domain << "," << split << "," << y[r] << "," << (quarantined ? 1 : 0);
            for (std::size_t c = 0; c < x.cols(); ++c) out << "," << x.at(r, c);
            out << "\n";
        }
    };

    write_rows("source", "train", data.source_train.x, data.source_train.y, false);
    write_rows("source", "test", data.source_test.x, data.source_test.y, false);
    write_rows("target", "train", data.target_train_x, data.target_train_y.labels_, true);
    write_rows("target", "test", data.target_test_x, data.target_test_y.labels_, true);
}

inline void save_dataset_csv(const std::string& path, const DomainData& data) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open dataset file for writing: " + path);
    write_dataset_csv(out, data);
}

inline DomainData read_dataset_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("empty dataset file");
    std::size_t d = 0;
    {
        std::stringstream header(line);
        std::string col;
        std::vector<std::string> cols;
        while (std::getline(header, col, ',')) cols.push_back(col);
        if (cols.size() < 5 || cols[0] != "domain" || cols[1] != "split" ||
            cols[2] != "label" || cols[3] != "quarantined") {
            throw ConfigError("unexpected dataset CSV header");
        }
        d = cols.size() - 4;
    }

    std::vector<std::vector<double>> sx_train, sx_test, tx_train, tx_test;
    std::vector<int> sy_train, sy_test, ty_train, ty_test;
    int max_label = -1;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string domain, split, field;
        std::getline(ss, domain, ',');
        std::getline(ss, split, ',');
        std::getline(ss, field, ',');
        const int label = std::stoi(field);
        std::getline(ss, field, ','); // quarantined flag, implied by domain
        std::vector<double> row(d);
        for (std::size_t j = 0; j < d; ++j) {
            if (!std::getline(ss, field, ',')) throw ConfigError("short dataset row");
            row[j] = std::stod(field);
        }
        max_label = std::max(max_label, label);
        const bool is_test = split == "test";
        if (domain == "source") {
            (is_test ? sx_test : sx_train).push_back(std::move(row));
            (is_test ? sy_test : sy_train).push_back(label);
        } else if (domain == "target") {
            (is_test ? tx_test : tx_train).push_back(std::move(row));
            (is_test ? ty_test : ty_train).push_back(label);
        } else {
            throw ConfigError("unknown domain in dataset CSV: " + domain);
        }
    }

    DomainData data;
    data.num_classes = static_cast<std::size_t>(max_label + 1);
    data.input_dim = d;
    data.source_train = {detail::rows_to_tensor(sx_train), std::move(sy_train)};
    data.source_test = {detail::rows_to_tensor(sx_test), std::move(sy_test)};
    data.target_train_x = detail::rows_to_tensor(tx_train);
    data.target_test_x = detail::rows_to_tensor(tx_test);
    data.target_train_y = QuarantinedLabels(std::move(ty_train));
    data.target_test_y = QuarantinedLabels(std::move(ty_test));
    return data;
}

inline DomainData load_dataset_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open dataset file: " + path);
    return read_dataset_csv(in);
}

// Shift-spec JSON (gen-data input, RunConfig member).
inline void to_json(nlohmann::json& j, const DomainShiftSpec& s) {
    j = nlohmann::json{{"num_classes", s.num_classes},
                       {"input_dim", s.input_dim},
                       {"class_sep", s.class_sep},
                       {"noise_dim_std", s.noise_dim_std},
                       {"rotation_deg", s.rotation_deg},
                       {"translation", s.translation},
                       {"scale", s.scale},
                       {"n_source", s.n_source},
                       {"n_target", s.n_target},
                       {"seed", s.seed},
                       {"test_fraction", s.test_fraction}};
}

inline void from_json(const nlohmann::json& j, DomainShiftSpec& s) {
    DomainShiftSpec d;
    s.num_classes = j.value("num_classes", d.num_classes);
    s.input_dim = j.value("input_dim", d.input_dim);
    s.class_sep = j.value("class_sep", d.class_sep);
    s.noise_dim_std = j.value("noise_dim_std", d.noise_dim_std);
    s.rotation_deg = j.value("rotation_deg", d.rotation_deg);
    s.translation = j.value("translation", d.translation);
    s.scale = j.value("scale", d.scale);
    s.n_source = j.value("n_source", d.n_source);
    s.n_target = j.value("n_target", d.n_target);
    s.seed = j.value("seed", d.seed);
    s.test_fraction = j.value("test_fraction", d.test_fraction);
}

} // namespace metfa
