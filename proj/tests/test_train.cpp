#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "stableflow/data.hpp"
#include "stableflow/dynamics.hpp"
#include "stableflow/train.hpp"
#include "test_util.hpp"

using namespace stableflow;

namespace {

TrainConfig small_config(LossKind kind, int iterations) {
    TrainConfig c = TrainConfig::desk();
    c.iterations = iterations;
    c.batch_size = 64;
    c.loss.batch_size = 64;
    c.loss.loss_kind = kind;
    c.net = {2, 16};
    c.data.n = 500;
    return c;
}

Model init_for(const TrainConfig& c) {
    if (c.model_kind() == ModelKind::potential) return init_potential(c.seed, 2, c.net.hidden_layers, c.net.hidden_width);
    return init_field(c.seed, 2, c.net.hidden_layers, c.net.hidden_width, c.baseline_time_input);
}

// Monte-Carlo estimate of the smallest achievable unnormalized stable loss:
// E || target - E[target | z, tau] ||^2, the conditional mean being the exact
// marginal field.
double bayes_floor(const StableCcnfParams& p, const EmpiricalTarget& data, int n, std::uint64_t seed) {
    Rng rng(seed);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double tau = p.tau0 + (p.tau1 - p.tau0) * rng.uniform();
        const Vector zt = data.points.col(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(data.size()))));
        const Vector z = sample_interpolant(p, tau, zt, rng);
        const Vector target = -p.lambda_z * (z - zt);
        total += (target - exact_marginal_vf(p, data, z, tau).velocity.head(2)).squaredNorm();
    }
    return total / n;
}

}  // namespace

TEST(Adam, ScalarOracleSequence) {
    Vector p = Vector::Zero(1);
    AdamState s = AdamState::zeros(1);
    const AdamConfig cfg{1e-3, 0.9, 0.999, 1e-8, 0.0};
    adam_step(p, Vector::Constant(1, std::sin(1.0) + 0.5), s, cfg);
    EXPECT_NEAR(p[0], -0.00099999999254549666843, 1e-18);
    for (int k = 2; k <= 10; ++k) adam_step(p, Vector::Constant(1, std::sin(static_cast<double>(k)) + 0.5), s, cfg);
    EXPECT_NEAR(p[0], -0.0071713471417421021669, 1e-15);
    EXPECT_EQ(s.step_count, 10);
}

TEST(Adam, FirstStepOfUnitGradient) {
    Vector p = Vector::Zero(1);
    AdamState s = AdamState::zeros(1);
    adam_step(p, Vector::Ones(1), s, AdamConfig{});
    EXPECT_DOUBLE_EQ(p[0], -0.001 / (1.0 + 1e-8));
}

TEST(Adam, DecoupledDecayShrinksWithoutGradient) {
    Vector p = (Vector(2) << 2.0, -4.0).finished();
    AdamState s = AdamState::zeros(2);
    adam_step(p, Vector::Zero(2), s, AdamConfig{0.01, 0.9, 0.999, 1e-8, 0.1});
    EXPECT_DOUBLE_EQ(p[0], 2.0 * 0.999);
    EXPECT_DOUBLE_EQ(p[1], -4.0 * 0.999);
}

TEST(Adam, RejectsNonFiniteAndMismatchedInputs) {
    Vector p = Vector::Zero(2);
    AdamState s = AdamState::zeros(2);
    EXPECT_THROW(adam_step(p, Vector::Constant(2, std::nan("")), s, AdamConfig{}), NumericFault);
    EXPECT_THROW(adam_step(p, Vector::Zero(3), s, AdamConfig{}), DimensionError);
}

TEST(Optimize, ConvexScalarConverges) {
    Vector p = Vector::Zero(1);
    const Objective f = [](const Vector& x) {
        return std::pair{(x[0] - 3.0) * (x[0] - 3.0), Vector::Constant(1, 2.0 * (x[0] - 3.0))};
    };
    const LossHistory h = optimize(p, f, AdamConfig{0.05, 0.9, 0.999, 1e-8, 0.0}, 2000);
    EXPECT_EQ(h.losses.size(), 2000u);
    EXPECT_NEAR(p[0], 3.0, 1e-3);
}

TEST(Optimize, LogHookCadence) {
    Vector p = Vector::Zero(1);
    const Objective f = [](const Vector& x) { return std::pair{x[0] * x[0], Vector::Constant(1, 2.0 * x[0])}; };
    std::vector<int> steps;
    TrainHooks hooks;
    hooks.on_log = [&](int step, double) { steps.push_back(step); };
    optimize(p, f, AdamConfig{}, 25, 10, hooks);
    EXPECT_EQ(steps, (std::vector<int>{1, 10, 20, 25}));
}

TEST(Optimize, FaultRestoresLastGoodParameters) {
    Vector p = Vector::Constant(1, 1.0);
    int calls = 0;
    Vector before_fault;
    const Objective f = [&](const Vector& x) {
        ++calls;
        if (calls == 5) {
            before_fault = x;
            return std::pair{std::nan(""), Vector::Zero(1)};
        }
        return std::pair{x[0] * x[0], Vector::Constant(1, 2.0 * x[0])};
    };
    TrainHooks hooks;
    Vector saved;
    hooks.on_fault = [&](const Vector& x) {
        saved = x;
        return std::string("fault.json");
    };
    try {
        optimize(p, f, AdamConfig{}, 10, 100, hooks);
        FAIL();
    } catch (const TrainingFault& e) {
        EXPECT_EQ(e.step(), 5);
        EXPECT_EQ(e.checkpoint_path(), "fault.json");
    }
    EXPECT_EQ(p, before_fault);
    EXPECT_EQ(saved, before_fault);
}

TEST(LossHistory, CsvAndWindows) {
    LossHistory h{{4.0, 3.0, 2.0, 1.0}};
    EXPECT_EQ(h.csv(), "step,loss\n1,4\n2,3\n3,2\n4,1\n");
    EXPECT_DOUBLE_EQ(h.head_mean(2), 3.5);
    EXPECT_DOUBLE_EQ(h.tail_mean(2), 1.5);
    EXPECT_DOUBLE_EQ(h.tail_mean(10), 2.5);
    EXPECT_EQ(LossHistory{}.tail_mean(3), 0.0);
}

TEST(TrainConfig, PresetsValidate) {
    EXPECT_NO_THROW(TrainConfig::desk().validate());
    const TrainConfig p = TrainConfig::paper();
    EXPECT_NO_THROW(p.validate());
    EXPECT_EQ(p.iterations, 20000);
    EXPECT_EQ(p.batch_size, 10000);
    EXPECT_EQ(p.net.hidden_width, 500);
    EXPECT_EQ(p.net.hidden_layers, 4);
    EXPECT_EQ(p.learning_rate, 1e-3);
    EXPECT_EQ(p.data.n, 100000);
    EXPECT_EQ(p.data.noise_std, 0.05);
}

TEST(TrainConfig, ValidationNamesTheField) {
    const auto field_of = [](const TrainConfig& c) {
        try {
            c.validate();
        } catch (const ConfigError& e) {
            return e.field();
        }
        return std::string("<none>");
    };
    TrainConfig c = TrainConfig::desk();
    c.ccnf.lambda_tau = -1.0;
    EXPECT_EQ(field_of(c), "ccnf.lambda_tau");
    c = TrainConfig::desk();
    c.learning_rate = 0.0;
    EXPECT_EQ(field_of(c), "learning_rate");
    c = TrainConfig::desk();
    c.data.name = "spirals";
    EXPECT_EQ(field_of(c), "data.name");
    c = TrainConfig::desk();
    c.loss.batch_size = 3;
    EXPECT_EQ(field_of(c), "loss.batch_size");
    c = TrainConfig::desk();
    c.loss.loss_kind = LossKind::cfm_ot;
    c.ccnf.lambda_tau = -1.0;
    EXPECT_EQ(field_of(c), "<none>");
}

TEST(TrainConfig, JsonRoundTripAndUnknownFields) {
    TrainConfig c = small_config(LossKind::auto_normalized, 7);
    c.ccnf.lambda_z = 2.5;
    c.seed = 99;
    const Json j = to_json(c);
    EXPECT_EQ(to_json(train_config_from_json(j)), j);
    Json bad = j;
    bad["learning_rat"] = 0.1;
    try {
        train_config_from_json(bad);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.field(), "learning_rat");
    }
    Json ot = to_json(small_config(LossKind::cfm_ot, 3));
    EXPECT_FALSE(ot.contains("ccnf"));
    EXPECT_EQ(to_json(train_config_from_json(ot)), ot);
}

TEST(TrainConfig, LoadFromFileErrors) {
    test::TempDir dir("cfg");
    EXPECT_THROW(load_train_config(dir.file("missing.json")), ConfigError);
    std::ofstream(dir.file("bad.json")) << "{\"iterations\": ";
    EXPECT_THROW(load_train_config(dir.file("bad.json")), ConfigError);
    std::ofstream(dir.file("ok.json")) << "{\"iterations\": 12, \"net\": {\"hidden_width\": 8}}";
    const TrainConfig c = load_train_config(dir.file("ok.json"));
    EXPECT_EQ(c.iterations, 12);
    EXPECT_EQ(c.net.hidden_width, 8);
    EXPECT_EQ(c.net.hidden_layers, 4);
}

TEST(Train, ZeroIterationsLeavesModelUnchanged) {
    const TrainConfig c = small_config(LossKind::auto_unnormalized, 0);
    const Model m0 = init_for(c);
    const EmpiricalTarget data = make_dataset("moons", 100, 0.05, 1).target();
    Rng rng(1);
    const TrainResult r = train(m0, data, c, rng);
    EXPECT_TRUE(network(r.model) == network(m0));
    EXPECT_TRUE(r.history.losses.empty());
}

TEST(Train, KindMismatchIsRejected) {
    const TrainConfig c = small_config(LossKind::cfm_ot, 1);
    Rng rng(1);
    EXPECT_THROW(train(init_potential(0, 2, 1, 4), make_dataset("moons", 10, 0.05, 1).target(), c, rng),
                 ConfigError);
}

TEST(Train, DeterministicAcrossRuns) {
    for (LossKind kind : {LossKind::auto_unnormalized, LossKind::auto_normalized, LossKind::cfm_ot}) {
        const TrainConfig c = small_config(kind, 20);
        const EmpiricalTarget data = make_dataset("moons", 300, 0.05, 1).target();
        Rng a = Rng::stream(c.seed, 1), b = Rng::stream(c.seed, 1);
        const TrainResult ra = train(init_for(c), data, c, a);
        const TrainResult rb = train(init_for(c), data, c, b);
        EXPECT_TRUE(network(ra.model) == network(rb.model)) << to_string(kind);
        EXPECT_EQ(ra.history.losses, rb.history.losses);
        EXPECT_EQ(checkpoint_json(ra.model, c).dump(), checkpoint_json(rb.model, c).dump());
    }
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
    test::TempDir dir("ckpt");
    for (LossKind kind : {LossKind::auto_unnormalized, LossKind::cfm_ot}) {
        TrainConfig c = small_config(kind, 5);
        c.baseline_time_input = false;
        const EmpiricalTarget data = make_dataset("circles", 200, 0.05, 2).target();
        Rng rng(3);
        const TrainResult r = train(init_for(c), data, c, rng);
        const std::string path = dir.file(to_string(kind) + ".json");
        save_checkpoint(r.model, c, path);
        const Checkpoint back = load_checkpoint(path);
        EXPECT_TRUE(network(back.model) == network(r.model));
        EXPECT_EQ(kind_of(back.model), kind_of(r.model));
        EXPECT_EQ(to_json(back.config), to_json(c));
        if (const auto* f = std::get_if<FieldNet>(&back.model)) EXPECT_FALSE(f->time_input);
        save_checkpoint(back.model, back.config, path + ".again");
        EXPECT_EQ(csv::read_file(path), csv::read_file(path + ".again"));
    }
}

TEST(Checkpoint, TruncatedOrCorruptFileIsParseError) {
    const std::string text = checkpoint_json(init_potential(1, 2, 2, 8), TrainConfig::desk()).dump();
    try {
        checkpoint_from_string(text.substr(0, text.size() / 2));
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_LE(e.offset(), text.size() / 2);
        EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos);
    }
    Json j = Json::parse(text);
    j["kind"] = "spline";
    EXPECT_THROW(checkpoint_from_string(j.dump()), ParseError);
    j = Json::parse(text);
    j["d"] = 5;
    EXPECT_THROW(checkpoint_from_string(j.dump()), ParseError);
    test::TempDir dir("ckpt");
    EXPECT_THROW(load_checkpoint(dir.file("absent.json")), Error);
}

TEST(Checkpoint, ReloadedModelReproducesSamples) {
    test::TempDir dir("ckpt");
    const TrainConfig c = small_config(LossKind::auto_unnormalized, 30);
    const EmpiricalTarget data = make_dataset("moons", 300, 0.05, 4).target();
    Rng rng(5);
    const TrainResult r = train(init_for(c), data, c, rng);
    save_checkpoint(r.model, c, dir.file("m.json"));
    const Checkpoint back = load_checkpoint(dir.file("m.json"));
    Rng a(6), b(6);
    const PushForwardResult pa = push_forward(std::get<PotentialNet>(r.model), c.ccnf, 100, 1.0, 0.05, a);
    const PushForwardResult pb = push_forward(std::get<PotentialNet>(back.model), c.ccnf, 100, 1.0, 0.05, b);
    EXPECT_EQ(support_distance(pa.final_states().topRows(2), data),
              support_distance(pb.final_states().topRows(2), data));
}

// Desk-scale stable training on moons. The regression target is stochastic, so
// the loss cannot fall below the Bayes floor; progress is measured as the
// remaining excess over that floor.
TEST(Train, DeskMoonsExcessLossDropsBelowQuarter) {
    const TrainConfig c = TrainConfig::desk();
    const EmpiricalTarget data = make_dataset("moons", c.data.n, c.data.noise_std, c.data.seed).target();
    Rng rng = Rng::stream(c.seed, 1);
    const TrainResult r = train(init_for(c), data, c, rng);
    ASSERT_EQ(r.history.losses.size(), static_cast<std::size_t>(c.iterations));
    for (double l : r.history.losses) ASSERT_TRUE(std::isfinite(l));
    EXPECT_TRUE(network(r.model).all_finite());
    const double floor = bayes_floor(c.ccnf, data, 4000, 3);
    const double initial = r.history.head_mean(100);
    const double final = r.history.tail_mean(100);
    std::cout << "floor " << floor << " initial " << initial << " final " << final << "\n";
    ASSERT_GT(initial, floor);
    EXPECT_LT(final - floor, 0.25 * (initial - floor));
}
