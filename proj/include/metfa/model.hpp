#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "metfa/errors.hpp"
#include "metfa/rng.hpp"
#include "metfa/tape.hpp"
#include "metfa/tensor.hpp"

namespace metfa {

// Per-row argmax with lowest-index tie break.
inline std::vector<int> argmax_rows(const Tensor& p) {
    std::vector<int> out(p.rows());
    for (std::size_t r = 0; r < p.rows(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < p.cols(); ++c) {
            if (p.at(r, c) > p.at(r, best)) best = c;
        }
        out[r] = static_cast<int>(best);
    }
    return out;
}

struct NetConfig {
    std::size_t input_dim = 16;
    std::vector<std::size_t> encoder_hidden = {64, 64};
    std::size_t feat_dim = 32;
    std::size_t latent_dim = 16;
    std::vector<std::size_t> clf_hidden = {16};
    std::size_t num_classes = 4;
    double tau0 = 0.05;
    // Some minimax-entropy variants normalize the prototype rows as well;
    // here only the classifier features are normalized unless this is on.
    bool normalize_prototypes = false;

    std::size_t clf_feature_dim() const {
        return clf_hidden.empty() ? latent_dim : clf_hidden.back();
    }

    void validate() const {
        if (input_dim == 0 || feat_dim == 0 || latent_dim == 0 || num_classes == 0) {
            throw ConfigError("network dimensions must be >= 1");
        }
        for (std::size_t h : encoder_hidden) {
            if (h == 0) throw ConfigError("encoder hidden dims must be >= 1");
        }
        for (std::size_t h : clf_hidden) {
            if (h == 0) throw ConfigError("classifier hidden dims must be >= 1");
        }
        if (!(tau0 > 0.0)) throw ConfigError("tau0 must be > 0");
    }
};

enum class ParamGroup { main, prototype };

inline const char* group_name(ParamGroup g) {
    return g == ParamGroup::prototype ? "prototype" : "main";
}

// Named, ordered trainable tensors. The single `prototype` entry is the
// classifier's last dense layer W; everything else is `main`.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        ParamGroup group;
    };

    void add(std::string name, Tensor value, ParamGroup group = ParamGroup::main) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        index_[name] = entries_.size();
        entries_.push_back({std::move(name), std::move(value), group});
    }

    std::size_t size() const { return entries_.size(); }
    const Entry& entry(std::size_t i) const { return entries_[i]; }
    Entry& entry(std::size_t i) { return entries_[i]; }

    bool has(std::string_view name) const { return index_.count(std::string(name)) > 0; }

    Tensor& at(std::string_view name) {
        return entries_[index_of(name)].value;
    }
    const Tensor& at(std::string_view name) const {
        return entries_[index_of(name)].value;
    }

    std::size_t index_of(std::string_view name) const {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) throw ConfigError("unknown parameter: " + std::string(name));
        return it->second;
    }

    std::size_t prototype_index() const {
        std::size_t found = size();
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (entries_[i].group == ParamGroup::prototype) {
                if (found != size()) throw ConfigError("more than one prototype parameter");
                found = i;
            }
        }
        if (found == size()) throw ConfigError("no prototype parameter");
        return found;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline Tensor init_linear_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w = Tensor::zeros({fan_in, fan_out});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
    return w;
}

inline void add_linear(ParamStore& ps, const std::string& prefix, std::size_t in,
                       std::size_t out, Rng& rng) {
    ps.add(prefix + ".w", init_linear_weight(in, out, rng));
    ps.add(prefix + ".b", Tensor::zeros({1, out}));
}

} // namespace detail

inline ParamStore init_params(const NetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ParamStore ps;

    std::vector<std::size_t> enc_dims;
    enc_dims.push_back(cfg.input_dim);
    enc_dims.insert(enc_dims.end(), cfg.encoder_hidden.begin(), cfg.encoder_hidden.end());
    enc_dims.push_back(cfg.feat_dim);
    for (std::size_t i = 0; i + 1 < enc_dims.size(); ++i) {
        detail::add_linear(ps, "enc.l" + std::to_string(i), enc_dims[i], enc_dims[i + 1], rng);
    }

    detail::add_linear(ps, "gauss.mu", cfg.feat_dim, cfg.latent_dim, rng);
    detail::add_linear(ps, "gauss.logvar", cfg.feat_dim, cfg.latent_dim, rng);

    std::vector<std::size_t> clf_dims;
    clf_dims.push_back(cfg.latent_dim);
    clf_dims.insert(clf_dims.end(), cfg.clf_hidden.begin(), cfg.clf_hidden.end());
    for (std::size_t i = 0; i + 1 < clf_dims.size(); ++i) {
        detail::add_linear(ps, "clf.l" + std::to_string(i), clf_dims[i], clf_dims[i + 1], rng);
    }

    // Prototype layer: one weight row per class, no bias (cosine scores).
    {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.clf_feature_dim()));
        Tensor w = Tensor::zeros({cfg.num_classes, cfg.clf_feature_dim()});
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
        ps.add("clf.W", std::move(w), ParamGroup::prototype);
    }

    detail::add_linear(ps, "dec", cfg.latent_dim, cfg.feat_dim, rng);
    return ps;
}

// Parameter leaves on a tape, aligned with ParamStore order.
struct BoundParams {
    const ParamStore* store = nullptr;
    std::vector<Var> vars;

    Var at(std::string_view name) const { return vars[store->index_of(name)]; }
};

inline BoundParams bind_params(Tape& tape, const ParamStore& ps, bool requires_grad = true) {
    BoundParams bp;
    bp.store = &ps;
    bp.vars.reserve(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
        bp.vars.push_back(tape.leaf(ps.entry(i).value, requires_grad));
    }
    return bp;
}

enum class Mode { train, eval };

namespace detail {

inline Var linear(const BoundParams& bp, const std::string& prefix, Var x) {
    return add(matmul(x, bp.at(prefix + ".w")), bp.at(prefix + ".b"));
}

inline Var mlp(const BoundParams& bp, const std::string& prefix, Var x, std::size_t n_layers) {
    Var h = x;
    for (std::size_t i = 0; i < n_layers; ++i) {
        h = linear(bp, prefix + ".l" + std::to_string(i), h);
        if (i + 1 < n_layers) h = relu(h);
    }
    return h;
}

} // namespace detail

// Encoder E: ReLU MLP, linear output. x (batch x input_dim) -> F (batch x feat_dim).
inline Var encode(const NetConfig& cfg, const BoundParams& bp, Var x) {
    if (x.value().rank() != 2 || x.value().cols() != cfg.input_dim) {
        throw ShapeError("encode: expected (batch x " + std::to_string(cfg.input_dim) +
                         ") input, got " + shape_str(x.value().shape()));
    }
    return detail::mlp(bp, "enc", x, cfg.encoder_hidden.size() + 1);
}

struct GaussianCode {
    Var mu;
    Var logvar;
    Var z;
};

// Gaussian embedding G with the reparameterization trick. In train mode the
// per-call noise comes from rng; in eval mode z is mu.
inline GaussianCode embed(const NetConfig& cfg, const BoundParams& bp, Var f,
                          Mode mode, Rng* rng = nullptr) {
    GaussianCode code;
    code.mu = detail::linear(bp, "gauss.mu", f);
    code.logvar = detail::linear(bp, "gauss.logvar", f);
    if (mode == Mode::eval) {
        code.z = code.mu;
        return code;
    }
    if (!rng) throw Error("embed in train mode needs an rng");
    Tensor eps = Tensor::zeros(code.mu.value().shape());
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = rng->normal();
    Var eps_leaf = f.tape->leaf(std::move(eps), false);
    code.z = add(code.mu, mul(exp(scale(code.logvar, 0.5)), eps_leaf));
    return code;
}

struct ClassifierOut {
    Var h; // classifier features fed to the prototype layer
    Var g; // temperature-scaled cosine scores (pre-softmax)
    Var p; // softmax of g
};

// Classifier C: MLP trunk then the prototype layer. Each row of H is
// L2-normalized (zero norms clamped at 1e-12 with a numeric warning) and
// scored against the prototype rows of W at temperature tau0.
inline ClassifierOut classify(const NetConfig& cfg, const BoundParams& bp, Var z) {
    ClassifierOut out;
    out.h = cfg.clf_hidden.empty() ? z : detail::mlp(bp, "clf", z, cfg.clf_hidden.size());
    Var norms = l2_norm_rows(out.h, 1e-12);
    Var inv_norms = exp(scale(log(norms), -1.0));
    Var h_unit = mul(out.h, inv_norms);
    Var w = bp.at("clf.W");
    if (cfg.normalize_prototypes) {
        Var wn = l2_norm_rows(w, 1e-12);
        w = mul(w, exp(scale(log(wn), -1.0)));
    }
    out.g = scale(matmul(h_unit, w, /*trans_b=*/true), 1.0 / cfg.tau0);
    out.p = softmax_rows(out.g);
    return out;
}

// Decoder: single linear layer back to feat_dim.
inline Var reconstruct(const NetConfig& cfg, const BoundParams& bp, Var z) {
    (void)cfg;
    return detail::linear(bp, "dec", z);
}

// Whole pipeline in eval mode on a throwaway tape; deterministic in (x, params).
struct InferResult {
    Tensor f;
    Tensor z;
    Tensor h;
    Tensor g;
    Tensor p;
    std::vector<int> pred;
};

inline InferResult infer(const NetConfig& cfg, const ParamStore& ps, const Tensor& x) {
    Tape tape;
    BoundParams bp = bind_params(tape, ps, false);
    Var xv = tape.leaf(x, false);
    Var f = encode(cfg, bp, xv);
    GaussianCode code = embed(cfg, bp, f, Mode::eval);
    ClassifierOut clf = classify(cfg, bp, code.z);
    InferResult res;
    res.f = f.value();
    res.z = code.z.value();
    res.h = clf.h.value();
    res.g = clf.g.value();
    res.p = clf.p.value();
    res.pred = argmax_rows(res.p);
    return res;
}

// --- checkpoint serialization -----------------------------------------------

inline void to_json(nlohmann::json& j, const NetConfig& c) {
    j = nlohmann::json{{"input_dim", c.input_dim},
                       {"encoder_hidden", c.encoder_hidden},
                       {"feat_dim", c.feat_dim},
                       {"latent_dim", c.latent_dim},
                       {"clf_hidden", c.clf_hidden},
                       {"num_classes", c.num_classes},
                       {"tau0", c.tau0},
                       {"normalize_prototypes", c.normalize_prototypes}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c) {
    NetConfig d;
    c.input_dim = j.value("input_dim", d.input_dim);
    c.encoder_hidden = j.value("encoder_hidden", d.encoder_hidden);
    c.feat_dim = j.value("feat_dim", d.feat_dim);
    c.latent_dim = j.value("latent_dim", d.latent_dim);
    c.clf_hidden = j.value("clf_hidden", d.clf_hidden);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.tau0 = j.value("tau0", d.tau0);
    c.normalize_prototypes = j.value("normalize_prototypes", d.normalize_prototypes);
}

inline nlohmann::json checkpoint_to_json(const NetConfig& cfg, const ParamStore& ps) {
    nlohmann::json params = nlohmann::json::array();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& e = ps.entry(i);
        params.push_back({{"name", e.name},
                          {"group", group_name(e.group)},
                          {"shape", e.value.shape()},
                          {"data", e.value.buffer()}});
    }
    return nlohmann::json{{"format", "metfa-ckpt-v1"}, {"config", cfg}, {"params", params}};
}

inline void save_checkpoint(const std::string& path, const NetConfig& cfg,
                            const ParamStore& ps) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open checkpoint file for writing: " + path);
    out << checkpoint_to_json(cfg, ps).dump(2) << "\n";
}

inline std::pair<NetConfig, ParamStore> checkpoint_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "metfa-ckpt-v1") {
        throw ConfigError("unrecognized checkpoint format");
    }
    NetConfig cfg = j.at("config").get<NetConfig>();
    ParamStore ps;
    for (const auto& pj : j.at("params")) {
        Shape shape = pj.at("shape").get<Shape>();
        std::vector<double> data = pj.at("data").get<std::vector<double>>();
        ParamGroup group = pj.at("group").get<std::string>() == "prototype"
                               ? ParamGroup::prototype
                               : ParamGroup::main;
        ps.add(pj.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)),
               group);
    }
    ps.prototype_index(); // enforce exactly-one-prototype invariant
    return {cfg, ps};
}

inline std::pair<NetConfig, ParamStore> load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open checkpoint file: " + path);
    nlohmann::json j;
    in >> j;
    return checkpoint_from_json(j);
}

} // namespace metfa
