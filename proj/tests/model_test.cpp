#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "metfa/losses.hpp"
#include "metfa/model.hpp"
#include "metfa/rng.hpp"

using namespace metfa;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double stddev = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

void zero_param(ParamStore& ps, const std::string& name) {
    Tensor& t = ps.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.0;
}

double row_entropy(const Tensor& p, std::size_t r) {
    double h = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) {
        if (p.at(r, c) > 0.0) h -= p.at(r, c) * std::log(p.at(r, c));
    }
    return h;
}

} // namespace

TEST(Encode, ZeroWeightsGiveZeroFeatures) {
    NetConfig cfg;
    cfg.input_dim = 4;
    cfg.encoder_hidden = {3};
    cfg.feat_dim = 2;
    ParamStore ps = init_params(cfg, 0);
    zero_param(ps, "enc.l0.w");
    zero_param(ps, "enc.l1.w");

    Rng rng(1);
    Tape tape;
    BoundParams bp = bind_params(tape, ps, false);
    Var x = tape.leaf(random_tensor(rng, {5, 4}, 2.0), false);
    Tensor f = encode(cfg, bp, x).value();
    EXPECT_EQ(f, Tensor::zeros({5, 2}));
}

TEST(Encode, IdentityLinearLayerPassesInputThrough) {
    NetConfig cfg;
    cfg.input_dim = 3;
    cfg.encoder_hidden = {};
    cfg.feat_dim = 3;
    ParamStore ps = init_params(cfg, 0);
    zero_param(ps, "enc.l0.w");
    Tensor& w = ps.at("enc.l0.w");
    for (std::size_t i = 0; i < 3; ++i) w.at(i, i) = 1.0;

    Rng rng(2);
    Tensor xv = random_tensor(rng, {4, 3});
    Tape tape;
    BoundParams bp = bind_params(tape, ps, false);
    Tensor f = encode(cfg, bp, tape.leaf(xv, false)).value();
    EXPECT_EQ(f, xv);
}

TEST(Encode, DeterministicGivenSeed) {
    NetConfig cfg;
    Rng data_rng(3);
    Tensor x = random_tensor(data_rng, {6, cfg.input_dim});
    ParamStore a = init_params(cfg, 0);
    ParamStore b = init_params(cfg, 0);
    InferResult ra = infer(cfg, a, x);
    InferResult rb = infer(cfg, b, x);
    EXPECT_EQ(ra.f, rb.f);
    EXPECT_EQ(ra.p, rb.p);
}

TEST(Embed, EvalModeReturnsMeanExactly) {
    NetConfig cfg;
    ParamStore ps = init_params(cfg, 7);
    Rng rng(4);
    Tape tape;
    BoundParams bp = bind_params(tape, ps, false);
    Var f = encode(cfg, bp, tape.leaf(random_tensor(rng, {3, cfg.input_dim}), false));
    GaussianCode code = embed(cfg, bp, f, Mode::eval);
    EXPECT_EQ(code.z.value(), code.mu.value());
}

TEST(Embed, UnitVarianceShiftsMeanByNoise) {
    NetConfig cfg;
    cfg.input_dim = 2;
    cfg.encoder_hidden = {};
    cfg.feat_dim = 2;
    cfg.latent_dim = 3;
    ParamStore ps = init_params(cfg, 7);
    zero_param(ps, "gauss.logvar.w");
    zero_param(ps, "gauss.logvar.b");

    Tape tape;
    BoundParams bp = bind_params(tape, ps, false);
    Var f = encode(cfg, bp, tape.leaf(Tensor::matrix({{0.3, -1.2}, {2.0, 0.5}}), false));
    Rng noise(99);
    GaussianCode code = embed(cfg, bp, f, Mode::train, &noise);

    Rng replay(99);
    const Tensor& mu = code.mu.value();
    const Tensor& z = code.z.value();
    for (std::size_t i = 0; i < z.size(); ++i) {
        EXPECT_DOUBLE_EQ(z[i], mu[i] + replay.normal());
    }
}

TEST(Embed, SampleMeanConvergesToMu) {
    NetConfig cfg;
    cfg.input_dim = 2;
    cfg.encoder_hidden = {};
    cfg.feat_dim = 2;
    cfg.latent_dim = 4;
    ParamStore ps = init_params(cfg, 11);
    Tensor x = Tensor::matrix({{0.7, -0.4}});

    Tape probe;
    BoundParams bp0 = bind_params(probe, ps, false);
    GaussianCode base = embed(cfg, bp0, encode(cfg, bp0, probe.leaf(x, false)), Mode::eval);
    const Tensor mu = base.mu.value();
    const Tensor logvar = base.logvar.value();

    const std::size_t n = 100000;
    std::vector<double> acc(cfg.latent_dim, 0.0);
    Rng noise(123);
    for (std::size_t s = 0; s < n; ++s) {
        Tape tape;
        BoundParams bp = bind_params(tape, ps, false);
        GaussianCode code =
            embed(cfg, bp, encode(cfg, bp, tape.leaf(x, false)), Mode::train, &noise);
        for (std::size_t d = 0; d < cfg.latent_dim; ++d) acc[d] += code.z.value()[d];
    }
    for (std::size_t d = 0; d < cfg.latent_dim; ++d) {
        const double sigma = std::exp(0.5 * logvar[d]);
        const double bound = 3.0 * sigma / std::sqrt(static_cast<double>(n));
        EXPECT_NEAR(acc[d] / static_cast<double>(n), mu[d], bound) << "dim " << d;
    }
}

namespace {

// Config where the classifier features are the latent codes themselves: H = z.
NetConfig direct_classifier_config(std::size_t latent, std::size_t m, double tau0) {
    NetConfig cfg;
    cfg.input_dim = 2;
    cfg.encoder_hidden = {};
    cfg.feat_dim = 2;
    cfg.latent_dim = latent;
    cfg.clf_hidden = {};
    cfg.num_classes = m;
    cfg.tau0 = tau0;
    return cfg;
}

} // namespace

TEST(Classify, PrototypeRowScoresHighestAtTemperatureOne) {
    NetConfig cfg = direct_classifier_config(3, 3, 1.0);
    ParamStore ps = init_params(cfg, 5);
    ps.at("clf.W") = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});

    for (std::size_t i = 0; i < 3; ++i) {
        Tape tape;
        BoundParams bp = bind_params(tape, ps, false);
        Tensor z = Tensor::zeros({1, 3});
        z.at(0, i) = 1.0;
        ClassifierOut out = classify(cfg, bp, tape.leaf(z, false));
        EXPECT_EQ(argmax_rows(out.p.value())[0], static_cast<int>(i));
    }
}

TEST(Classify, ZeroPrototypesGiveUniformPrediction) {
    NetConfig cfg = direct_classifier_config(3, 4, 0.05);
    ParamStore ps = init_params(cfg, 5);
    zero_param(ps, "clf.W");
    Rng rng(6);
    Tape tape;
    BoundParams bp = bind_params(tape, ps, false);
    ClassifierOut out = classify(cfg, bp, tape.leaf(random_tensor(rng, {3, 3}), false));
    for (std::size_t i = 0; i < out.p.value().size(); ++i) {
        EXPECT_DOUBLE_EQ(out.p.value()[i], 0.25);
    }
}

TEST(Classify, LowTemperatureSharpensWithoutChangingArgmax) {
    Rng rng(8);
    NetConfig sharp = direct_classifier_config(4, 3, 0.05);
    NetConfig soft = direct_classifier_config(4, 3, 1.0);
    ParamStore ps = init_params(sharp, 9);
    Tensor z = random_tensor(rng, {5, 4});

    Tape t1, t2;
    BoundParams bp1 = bind_params(t1, ps, false);
    BoundParams bp2 = bind_params(t2, ps, false);
    ClassifierOut o_sharp = classify(sharp, bp1, t1.leaf(z, false));
    ClassifierOut o_soft = classify(soft, bp2, t2.leaf(z, false));

    EXPECT_EQ(argmax_rows(o_sharp.p.value()), argmax_rows(o_soft.p.value()));
    for (std::size_t r = 0; r < 5; ++r) {
        EXPECT_LT(row_entropy(o_sharp.p.value(), r), row_entropy(o_soft.p.value(), r));
    }
}

TEST(Classify, InvariantToPositiveRowScaling) {
    NetConfig cfg = direct_classifier_config(4, 3, 0.05);
    ParamStore ps = init_params(cfg, 10);
    Rng rng(11);
    Tensor z = random_tensor(rng, {4, 4});
    Tensor z_scaled = z;
    const double factors[] = {0.001, 3.7, 250.0, 1.0};
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 4; ++c) z_scaled.at(r, c) *= factors[r];
    }

    Tape t1, t2;
    BoundParams bp1 = bind_params(t1, ps, false);
    BoundParams bp2 = bind_params(t2, ps, false);
    ClassifierOut a = classify(cfg, bp1, t1.leaf(z, false));
    ClassifierOut b = classify(cfg, bp2, t2.leaf(z_scaled, false));
    for (std::size_t i = 0; i < a.g.value().size(); ++i) {
        EXPECT_NEAR(a.g.value()[i], b.g.value()[i], 1e-9);
        EXPECT_NEAR(a.p.value()[i], b.p.value()[i], 1e-9);
    }
}

TEST(Classify, ZeroNormRowClampsWithWarning) {
    NetConfig cfg = direct_classifier_config(3, 2, 0.05);
    ParamStore ps = init_params(cfg, 12);
    Tape tape;
    BoundParams bp = bind_params(tape, ps, false);
    ClassifierOut out = classify(cfg, bp, tape.leaf(Tensor::matrix({{0, 0, 0}}), false));
    EXPECT_EQ(tape.numeric_warnings(), 1);
    EXPECT_TRUE(out.p.value().all_finite());
}

TEST(Reconstruct, ZeroWeightsRepeatBias) {
    NetConfig cfg = direct_classifier_config(2, 2, 1.0);
    ParamStore ps = init_params(cfg, 13);
    zero_param(ps, "dec.w");
    ps.at("dec.b") = Tensor::matrix({{0.5, -1.5}});
    Rng rng(14);
    Tape tape;
    BoundParams bp = bind_params(tape, ps, false);
    Tensor zhat = reconstruct(cfg, bp, tape.leaf(random_tensor(rng, {3, 2}), false)).value();
    EXPECT_EQ(zhat, Tensor::matrix({{0.5, -1.5}, {0.5, -1.5}, {0.5, -1.5}}));
}

TEST(Reconstruct, IdentityWeightsPassLatentsThrough) {
    NetConfig cfg = direct_classifier_config(2, 2, 1.0);
    ParamStore ps = init_params(cfg, 15);
    zero_param(ps, "dec.w");
    zero_param(ps, "dec.b");
    Tensor& w = ps.at("dec.w");
    w.at(0, 0) = 1.0;
    w.at(1, 1) = 1.0;
    Rng rng(16);
    Tensor z = random_tensor(rng, {4, 2});
    Tape tape;
    BoundParams bp = bind_params(tape, ps, false);
    EXPECT_EQ(reconstruct(cfg, bp, tape.leaf(z, false)).value(), z);
}

TEST(Reconstruct, OutputShapeContract) {
    NetConfig cfg;
    ParamStore ps = init_params(cfg, 17);
    Rng rng(18);
    Tape tape;
    BoundParams bp = bind_params(tape, ps, false);
    Tensor zhat =
        reconstruct(cfg, bp, tape.leaf(random_tensor(rng, {7, cfg.latent_dim}), false)).value();
    EXPECT_EQ(zhat.shape(), (Shape{7, cfg.feat_dim}));
}

TEST(ParamStore, ExactlyOnePrototype) {
    NetConfig cfg;
    ParamStore ps = init_params(cfg, 0);
    EXPECT_EQ(ps.entry(ps.prototype_index()).name, "clf.W");
    ps.add("clf.W2", Tensor::zeros({2, 2}), ParamGroup::prototype);
    EXPECT_THROW(ps.prototype_index(), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    NetConfig cfg;
    cfg.tau0 = 0.05;
    ParamStore ps = init_params(cfg, 42);
    const std::string path =
        (std::filesystem::temp_directory_path() / "metfa_ckpt_test.json").string();
    save_checkpoint(path, cfg, ps);
    auto [cfg2, ps2] = load_checkpoint(path);
    std::remove(path.c_str());

    EXPECT_EQ(cfg2.tau0, cfg.tau0);
    EXPECT_EQ(cfg2.encoder_hidden, cfg.encoder_hidden);
    ASSERT_EQ(ps2.size(), ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
        EXPECT_EQ(ps2.entry(i).name, ps.entry(i).name);
        EXPECT_EQ(ps2.entry(i).group, ps.entry(i).group);
        EXPECT_EQ(ps2.entry(i).value, ps.entry(i).value) << ps.entry(i).name;
    }
}

TEST(Model, NoDeadParametersUnderFullObjective) {
    NetConfig cfg;
    cfg.input_dim = 4;
    cfg.encoder_hidden = {8};
    cfg.feat_dim = 6;
    cfg.latent_dim = 4;
    cfg.clf_hidden = {5};
    cfg.num_classes = 3;
    ParamStore ps = init_params(cfg, 21);
    Rng rng(22);

    Tape tape;
    BoundParams bp = bind_params(tape, ps, true);
    Var x_s = tape.leaf(random_tensor(rng, {6, 4}), false);
    Var x_t = tape.leaf(random_tensor(rng, {5, 4}), false);
    std::vector<int> y_s = {0, 0, 1, 1, 2, 2};

    Var f_s = encode(cfg, bp, x_s);
    GaussianCode code_s = embed(cfg, bp, f_s, Mode::train, &rng);
    ClassifierOut clf_s = classify(cfg, bp, code_s.z);
    Var f_t = encode(cfg, bp, x_t);
    GaussianCode code_t = embed(cfg, bp, f_t, Mode::train, &rng);
    ClassifierOut clf_t = classify(cfg, bp, code_t.z);
    PseudoLabels pseudo = PseudoLabels::from_probs(clf_t.p.value());

    LossSet losses;
    losses.ce = loss_ce(clf_s.g, y_s);
    losses.prior = loss_prior(code_s.mu, code_s.logvar, code_t.mu, code_t.logvar);
    losses.metric = loss_metric(code_s.z, y_s, code_t.z, pseudo);
    losses.rec = loss_rec(f_s, reconstruct(cfg, bp, code_s.z), f_t,
                          reconstruct(cfg, bp, code_t.z));
    losses.classdist = loss_classdist(clf_s.g, y_s, clf_t.g, pseudo, 2.0);
    losses.entropy = loss_entropy(clf_t.p);
    Objectives obj = objectives(tape, losses, LossWeights{});

    Gradients g_main = tape.backward(obj.main);
    Gradients g_proto = tape.backward(obj.proto);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const bool is_proto = ps.entry(i).group == ParamGroup::prototype;
        Tensor g = is_proto ? g_proto.of(bp.vars[i]) : g_main.of(bp.vars[i]);
        double norm = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) norm += std::fabs(g[k]);
        EXPECT_GT(norm, 0.0) << ps.entry(i).name;
    }
}
