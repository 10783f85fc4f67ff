#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ssed/training.hpp"

using namespace ssed;

namespace {

ModelConfig micro()
{
    ModelConfig c;
    c.embed_dim = 2;
    c.hidden = 3;
    c.model_dim = 4;
    c.heads = 1;
    return c;
}

TrainConfig quick(std::size_t epochs)
{
    TrainConfig t;
    t.batch_size = 4;
    t.max_epochs = epochs;
    t.patience = 50;
    t.learning_rate = 1e-2;
    t.seed = 5;
    return t;
}

const Dataset& tiny_dataset()
{
    static const Dataset ds = [] {
        DatasetSpec spec;
        spec.samples = 12;
        spec.stations = 4;
        spec.span_days = 400;
        spec.seed = 3;
        return generate_dataset(spec);
    }();
    return ds;
}

Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0)
{
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = normal(rng, 0.0, sd);
    return Tensor(std::move(shape), std::move(v));
}

std::vector<std::vector<double>> snapshot(ModelParams p)
{
    std::vector<std::vector<double>> out;
    for (const auto& [name, t] : p.named()) out.emplace_back(t->data().begin(), t->data().end());
    return out;
}

}  // namespace

TEST(MseLoss, MatchesQuadrupleLoop)
{
    Rng rng = make_stream(1);
    const std::size_t n = 2, ns = 3, nt = 60, nc = 2;
    auto d = random_tensor({n, ns, nt, nc}, rng, 2.0), h = random_tensor({n, ns, nt, nc}, rng, 2.0);
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ns; ++j)
            for (std::size_t t = 0; t < nt; ++t)
                for (std::size_t k = 0; k < nc; ++k) {
                    const std::size_t at = ((i * ns + j) * nt + t) * nc + k;
                    s += (d[at] - h[at]) * (d[at] - h[at]);
                }
    s /= static_cast<double>(n * ns * nt * nc);
    EXPECT_NEAR(mse_loss(d, h).item(), s, 1e-12 * s);
}

TEST(MseLoss, TrivialCases)
{
    Rng rng = make_stream(2);
    auto d = random_tensor({2, 3, 5, 2}, rng);
    EXPECT_EQ(mse_loss(d, d).item(), 0.0);
    Tensor zero({2, 3, 5, 2}, std::vector<double>(60, 0.0)), c({2, 3, 5, 2}, std::vector<double>(60, 1.5));
    EXPECT_DOUBLE_EQ(mse_loss(zero, c).item(), 2.25);
    EXPECT_THROW(mse_loss(zero, Tensor({2, 3, 5, 1}, std::vector<double>(30, 0.0))), ShapeError);
}

TEST(Adam, ZeroLearningRateIsNoOp)
{
    auto p = init_params([] {
        auto c = micro();
        c.stations = 4;
        return c;
    }(), 9);
    auto before = snapshot(p);
    auto leaves = p.tensors();
    for (auto& t : leaves) {
        auto g = t.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = std::sin(static_cast<double>(i) + 0.3);
    }
    Adam opt(leaves, 0.0);
    opt.step();
    opt.step();
    EXPECT_EQ(snapshot(p), before);
}

TEST(Adam, FirstStepMovesByLearningRate)
{
    Tensor w({3}, {1.0, -2.0, 0.5}, true);
    auto g = w.mutable_grad();
    g[0] = 4.0;
    g[1] = -0.01;
    g[2] = 0.0;
    Adam opt({w}, 0.1);
    opt.step();
    // Bias-corrected first step is lr * g / (|g| + eps).
    EXPECT_NEAR(w[0], 0.9, 1e-8);
    EXPECT_NEAR(w[1], -1.9, 1e-6);
    EXPECT_EQ(w[2], 0.5);
}

TEST(ClipGradNorm, RescalesToLimit)
{
    Tensor a({2}, {0.0, 0.0}, true), b({1}, {0.0}, true);
    a.mutable_grad()[0] = 3.0;
    a.mutable_grad()[1] = 4.0;
    b.mutable_grad()[0] = 12.0;
    std::vector<Tensor> ps{a, b};
    EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 6.5), 13.0);
    EXPECT_NEAR(a.grad()[0], 1.5, 1e-15);
    EXPECT_NEAR(b.grad()[0], 6.0, 1e-15);
    EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 100.0), 6.5);
    EXPECT_NEAR(a.grad()[1], 2.0, 1e-15);
}

TEST(Train, ZeroLearningRateKeepsInitialParameters)
{
    auto tc = quick(1);
    tc.learning_rate = 0.0;
    auto r = train(tiny_dataset(), micro(), tc);
    auto mc = micro();
    mc.stations = 4;
    EXPECT_EQ(snapshot(r.best.params), snapshot(init_params(mc, tc.seed)));
    ASSERT_EQ(r.log.epochs.size(), 2u);
    EXPECT_EQ(r.log.epochs[1].val_mse, r.log.epochs[0].val_mse);
}

TEST(Train, SameSeedSameLog)
{
    auto a = train(tiny_dataset(), micro(), quick(3));
    auto b = train(tiny_dataset(), micro(), quick(3));
    ASSERT_EQ(a.log.epochs.size(), b.log.epochs.size());
    for (std::size_t e = 0; e < a.log.epochs.size(); ++e) {
        EXPECT_EQ(a.log.epochs[e].val_mse, b.log.epochs[e].val_mse);
        if (e > 0) {
            EXPECT_EQ(a.log.epochs[e].train_mse, b.log.epochs[e].train_mse);
        }
    }
    EXPECT_EQ(a.log.best_epoch, b.log.best_epoch);
    EXPECT_EQ(snapshot(a.best.params), snapshot(b.best.params));
    auto c = quick(3);
    c.seed = 6;
    EXPECT_NE(train(tiny_dataset(), micro(), c).log.epochs[1].val_mse, a.log.epochs[1].val_mse);
}

TEST(Train, BestEpochHasMinimumValidation)
{
    auto r = train(tiny_dataset(), micro(), quick(4));
    EXPECT_TRUE(std::isnan(r.log.epochs[0].train_mse));
    double best = r.log.epochs[0].val_mse;
    std::size_t at = 0;
    for (const auto& e : r.log.epochs)
        if (e.val_mse < best) best = e.val_mse, at = e.epoch;
    EXPECT_EQ(r.log.best_epoch, at);
    EXPECT_EQ(r.log.best_val_mse, best);
    EXPECT_EQ(r.best.epoch, at);
    // The stored checkpoint reproduces the best validation score.
    auto val = prepare_split(tiny_dataset(), tiny_dataset().manifest.val, r.best.input_scale);
    EXPECT_EQ(split_mse(r.best.params, r.best.config, val, r.best.input_scale), best);
}

TEST(Train, PatienceStopsEarly)
{
    auto tc = quick(20);
    tc.learning_rate = 0.0;
    tc.patience = 2;
    auto r = train(tiny_dataset(), micro(), tc);
    EXPECT_EQ(r.log.epochs.size(), 3u);  // epoch 0 plus two without improvement
    EXPECT_EQ(r.log.best_epoch, 0u);
}

TEST(Train, PlateauHalvesLearningRate)
{
    auto tc = quick(8);
    tc.patience = 6;
    tc.lr_decay = 0.5;
    tc.lr_decay_patience = 2;
    tc.min_learning_rate = 2e-3;
    auto r = train(tiny_dataset(), micro(), tc);
    // Replay the rule on the logged validation curve.
    double best = r.log.epochs[0].val_mse, lr = tc.learning_rate;
    std::size_t since = 0;
    for (std::size_t e = 1; e < r.log.epochs.size(); ++e) {
        EXPECT_EQ(r.log.epochs[e].learning_rate, lr) << "epoch " << e;
        if (r.log.epochs[e].val_mse < best) {
            best = r.log.epochs[e].val_mse;
            since = 0;
        } else if (++since % 2 == 0) {
            lr = std::max(2e-3, lr * 0.5);
        }
    }
    auto bad = tc;
    bad.lr_decay = 0.0;
    EXPECT_THROW(train(tiny_dataset(), micro(), bad), std::invalid_argument);
}

TEST(Train, NonFiniteLossNamesEpochAndBatch)
{
    Dataset ds = tiny_dataset();
    for (auto i : ds.manifest.train) ds.samples[i].clean.values[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        train(ds, micro(), quick(1));
        FAIL() << "expected a non-finite loss error";
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("non-finite loss"), std::string::npos) << msg;
        EXPECT_NE(msg.find("epoch 1, batch 0"), std::string::npos) << msg;
        EXPECT_NE(msg.find("gradient norm"), std::string::npos) << msg;
    }
}

TEST(Train, AblationRewiresParameters)
{
    auto tc = quick(1);
    for (auto a : {Ablation::no_transformer, Ablation::spatial_attention_only, Ablation::temporal_attention_only}) {
        auto mc = micro();
        mc.ablation = a;
        auto r = train(tiny_dataset(), mc, tc);
        EXPECT_EQ(r.best.config.ablation, a);
        auto full = micro();
        full.stations = 4;
        EXPECT_LT(r.best.params.count(), init_params(full, 1).count());
    }
}

TEST(TrainConfigFile, ParsesAndRejects)
{
    auto path = std::filesystem::temp_directory_path() / "ssed_train.cfg";
    {
        std::ofstream f(path);
        f << "# toy run\nhidden = 8\nmodel_dim=8\nheads = 2  # two heads\n\nlearning_rate = 3e-3\nablation = "
             "no_transformer\npositional_encoding = true\nbeta2 = 0.99\nlr_decay = 0.5\n";
    }
    ModelConfig mc;
    TrainConfig tc;
    apply_config(read_key_values(path.string()), mc, tc);
    EXPECT_EQ(mc.hidden, 8u);
    EXPECT_EQ(mc.model_dim, 8u);
    EXPECT_EQ(mc.heads, 2u);
    EXPECT_EQ(tc.learning_rate, 3e-3);
    EXPECT_EQ(tc.beta2, 0.99);
    EXPECT_EQ(tc.lr_decay, 0.5);
    EXPECT_EQ(mc.ablation, Ablation::no_transformer);
    EXPECT_TRUE(mc.positional_encoding);
    EXPECT_THROW(apply_config({{"hiden", "8"}}, mc, tc), std::invalid_argument);
    EXPECT_THROW(apply_config({{"hidden", "-3"}}, mc, tc), std::invalid_argument);
    EXPECT_THROW(apply_config({{"heads", "3"}}, mc, tc), std::invalid_argument);
    {
        std::ofstream f(path);
        f << "hidden = 8\nhidden = 9\n";
    }
    EXPECT_THROW(read_key_values(path.string()), std::runtime_error);
}

TEST(TrainLogFile, OneJsonObjectPerLine)
{
    TrainLog log;
    log.epochs = {{0, std::numeric_limits<double>::quiet_NaN(), 4.0, 0.1}, {1, 3.0, 2.5, 0.2}};
    log.best_epoch = 1;
    log.best_val_mse = 2.5;
    auto path = std::filesystem::temp_directory_path() / "ssed_train_log.jsonl";
    write_train_log(log, path.string());
    std::ifstream in(path);
    std::string line;
    std::vector<nlohmann::json> rows;
    while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_TRUE(rows[0]["train_mse"].is_null());
    EXPECT_EQ(rows[1]["val_mse"], 2.5);
    EXPECT_EQ(rows[2]["best_epoch"], 1);
}
