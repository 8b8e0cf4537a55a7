#pragma once

#include <algorithm>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "metfa/datagen.hpp"
#include "metfa/errors.hpp"
#include "metfa/model.hpp"
#include "metfa/tensor.hpp"

namespace metfa {

// The one gate through which target-domain ground truth can be read.
struct EvalAccess {
    static const std::vector<int>& labels(const QuarantinedLabels& q) { return q.labels_; }
};

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t num_classes)
        : m_(num_classes), counts_(num_classes * num_classes, 0) {}

    std::size_t num_classes() const { return m_; }
    long long& at(std::size_t true_cls, std::size_t pred_cls) {
        return counts_[true_cls * m_ + pred_cls];
    }
    long long at(std::size_t true_cls, std::size_t pred_cls) const {
        return counts_[true_cls * m_ + pred_cls];
    }
    long long total() const {
        long long t = 0;
        for (long long c : counts_) t += c;
        return t;
    }
    bool operator==(const ConfusionMatrix& o) const {
        return m_ == o.m_ && counts_ == o.counts_;
    }

private:
    std::size_t m_;
    std::vector<long long> counts_;
};

inline ConfusionMatrix confusion(const std::vector<int>& preds,
                                 const std::vector<int>& labels, std::size_t m) {
    if (preds.size() != labels.size()) {
        throw ShapeError("confusion: prediction and label counts differ");
    }
    ConfusionMatrix cm(m);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int t = labels[i], p = preds[i];
        if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= m ||
            static_cast<std::size_t>(p) >= m) {
            throw DomainError("confusion: class index outside [0, M)");
        }
        cm.at(static_cast<std::size_t>(t), static_cast<std::size_t>(p)) += 1;
    }
    return cm;
}

struct MacroMetrics {
    double f1 = 0.0;
    double recall = 0.0;
    double precision = 0.0;
};

// Unweighted mean over classes. Degenerate cells (empty row or column, or
// precision + recall == 0) contribute zero by convention. Per-class values
// are summed in sorted order so the macro means are bit-identical under any
// relabeling of the classes.
inline MacroMetrics macro_metrics(const ConfusionMatrix& cm) {
    const std::size_t m = cm.num_classes();
    std::vector<double> f1(m), rec(m), prec(m);
    for (std::size_t c = 0; c < m; ++c) {
        long long rowsum = 0, colsum = 0;
        for (std::size_t j = 0; j < m; ++j) {
            rowsum += cm.at(c, j);
            colsum += cm.at(j, c);
        }
        const double tp = static_cast<double>(cm.at(c, c));
        prec[c] = colsum > 0 ? tp / static_cast<double>(colsum) : 0.0;
        rec[c] = rowsum > 0 ? tp / static_cast<double>(rowsum) : 0.0;
        f1[c] = (prec[c] + rec[c]) > 0.0 ? 2.0 * prec[c] * rec[c] / (prec[c] + rec[c]) : 0.0;
    }
    auto sorted_mean = [m](std::vector<double>& v) {
        std::sort(v.begin(), v.end());
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(m);
    };
    return {sorted_mean(f1), sorted_mean(rec), sorted_mean(prec)};
}

struct DomainEval {
    MacroMetrics metrics;
    ConfusionMatrix cm{1};
};

inline DomainEval evaluate_labeled(const NetConfig& cfg, const ParamStore& ps,
                                   const LabeledSet& set) {
    InferResult res = infer(cfg, ps, set.x);
    DomainEval ev;
    ev.cm = confusion(res.pred, set.y, cfg.num_classes);
    ev.metrics = macro_metrics(ev.cm);
    return ev;
}

inline DomainEval evaluate_quarantined(const NetConfig& cfg, const ParamStore& ps,
                                       const Tensor& x, const QuarantinedLabels& y) {
    InferResult res = infer(cfg, ps, x);
    DomainEval ev;
    ev.cm = confusion(res.pred, EvalAccess::labels(y), cfg.num_classes);
    ev.metrics = macro_metrics(ev.cm);
    return ev;
}

inline void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm) {
    const std::size_t m = cm.num_classes();
    out << "true\\pred";
    for (std::size_t c = 0; c < m; ++c) out << ",c" << c;
    out << "\n";
    for (std::size_t t = 0; t < m; ++t) {
        out << "c" << t;
        for (std::size_t p = 0; p < m; ++p) out << "," << cm.at(t, p);
        out << "\n";
    }
}

// Eval-mode latent codes of every test sample, both domains, for external
// projection (t-SNE and friends).
inline void export_embeddings(std::ostream& out, const NetConfig& cfg,
                              const ParamStore& ps, const DomainData& data) {
    out << "domain,label,pred";
    for (std::size_t j = 0; j < cfg.latent_dim; ++j) out << ",z" << j;
    out << "\n";
    out << std::setprecision(17);

    auto dump = [&](const char* domain, const Tensor& x, const std::vector<int>& y) {
        InferResult res = infer(cfg, ps, x);
        for (std::size_t r = 0; r < x.rows(); ++r) {
            out << domain << "," << y[r] << "," << res.pred[r];
            for (std::size_t c = 0; c < cfg.latent_dim; ++c) out << "," << res.z.at(r, c);
            out << "\n";
        }
    };
    dump("source", data.source_test.x, data.source_test.y);
    dump("target", data.target_test_x, EvalAccess::labels(data.target_test_y));
}

} // namespace metfa
