#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ssed/tensor.hpp"

using namespace ssed;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double sd = 1.0)
{
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = normal(rng, 0.0, sd);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

constexpr double kOpTolerance = 1e-6;

}  // namespace

TEST(TensorOps, SoftmaxOfEqualLogitsIsUniform)
{
    Tensor t({1, 2}, {0.0, 0.0});
    auto s = softmax(t, 1);
    EXPECT_DOUBLE_EQ(s[0], 0.5);
    EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(TensorOps, MatmulByIdentity)
{
    Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Rng rng = make_stream(1);
    auto x = random_tensor({3, 4}, rng, false);
    auto y = matmul(eye, x);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(TensorOps, GramIsSymmetricAndMatchesMatmul)
{
    Rng rng = make_stream(4);
    for (std::size_t n : {3u, 17u, 48u}) {
        auto e = random_tensor({n, 11}, rng, false);
        auto g = gram(e);
        auto m = matmul(e, transpose(e));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                EXPECT_EQ(g[i * n + j], g[j * n + i]);
                EXPECT_NEAR(g[i * n + j], m[i * n + j], 1e-12);
            }
    }
    auto x = random_tensor({5, 3}, rng);
    auto c = random_tensor({5, 5}, rng, false);
    EXPECT_LT(grad_check([&](const Tensor& t) { return sum(mul(gram(t), c)); }, x), kOpTolerance);
}

TEST(TensorOps, SigmoidAtZero)
{
    EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
}

TEST(TensorOps, ShapeMismatchNamesOperationAndShapes)
{
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[4,5]"), std::string::npos);
    }
    EXPECT_THROW(add(a, Tensor::zeros({3, 2})), ShapeError);
    EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0}), ShapeError);
}

TEST(TensorOps, RecordsOnlyWhenGradRequested)
{
    Tape::current().clear();
    Tensor a = Tensor::full({2}, 1.0);
    (void)add(a, a);
    EXPECT_TRUE(Tape::current().empty());
    Tensor b = Tensor::full({2}, 1.0, true);
    (void)add(a, b);
    EXPECT_EQ(Tape::current().size(), 1u);
    {
        NoGradGuard guard;
        (void)add(b, b);
    }
    EXPECT_EQ(Tape::current().size(), 1u);
    Tape::current().clear();
}

TEST(Backward, SumOfSquares)
{
    Tensor x({2}, {1.0, 2.0}, true);
    backward(sum(mul(x, x)));
    ASSERT_TRUE(x.has_grad());
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
    EXPECT_TRUE(Tape::current().empty());
}

TEST(Backward, SigmoidSlopeAtZero)
{
    Tensor w = Tensor::scalar(0.0, true);
    backward(affine(sigmoid(w), 4.0));
    EXPECT_DOUBLE_EQ(w.grad()[0], 1.0);
}

TEST(Backward, RejectsNonScalarLoss)
{
    Tensor x({2}, {1.0, 2.0}, true);
    auto y = mul(x, x);
    EXPECT_THROW(backward(y), ShapeError);
    Tape::current().clear();
}

TEST(Backward, RejectsEmptyTape)
{
    Tape::current().clear();
    EXPECT_THROW(backward(Tensor::scalar(1.0)), std::logic_error);
}

TEST(Backward, ThreeLayerCompositeMatchesFiniteDifferences)
{
    Rng rng = make_stream(7);
    auto x = random_tensor({5, 4}, rng);
    auto w1 = random_tensor({4, 6}, rng);
    auto b1 = random_tensor({6}, rng);
    auto w2 = random_tensor({6, 6}, rng);
    auto w3 = random_tensor({6, 3}, rng);
    auto f = [&] {
        auto h1 = tanh(linear(x, w1, &b1));
        auto h2 = sigmoid(matmul(h1, w2));
        auto h3 = softmax(matmul(h2, w3), 1);
        return mean(mul(h3, h3));
    };
    EXPECT_LT(grad_check(f, {x, w1, b1, w2, w3}, 1e-5), kOpTolerance);
}

TEST(GradCheck, SumIsExact)
{
    // Dyadic values and a power-of-two step keep every difference exact.
    Tensor x({4}, {1.0, -2.0, 3.0, 0.5}, true);
    double err = grad_check([](const Tensor& t) { return sum(t); }, x, std::ldexp(1.0, -17));
    EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, SoftmaxThenDot)
{
    Rng rng = make_stream(3);
    auto x = random_tensor({1, 7}, rng);
    auto c = random_tensor({1, 7}, rng, false);
    double err = grad_check([&](const Tensor& t) { return sum(mul(softmax(t, 1), c)); }, x);
    EXPECT_LT(err, kOpTolerance);
}

TEST(GradCheck, RejectsNonFinite)
{
    Tensor x({1}, {1.0}, true);
    EXPECT_THROW(grad_check([](const Tensor& t) { return sum(affine(t, 1e308 * 10)); }, x),
                 std::domain_error);
    Tape::current().clear();
}

// Every forward op against central differences, over several random draws.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, AllOpsAgreeWithCentralDifferences)
{
    Rng rng = make_stream(100, {static_cast<std::uint64_t>(GetParam())});
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({2, 3, 4}, rng);
    auto c = random_tensor({2, 3, 4}, rng, false);
    auto m = random_tensor({4, 5}, rng);
    auto bb = random_tensor({2, 4, 5}, rng);
    auto bt = random_tensor({2, 5, 4}, rng);
    auto gain = random_tensor({4}, rng);
    auto bias = random_tensor({4}, rng);
    auto dot = [&](const Tensor& t) {
        Rng r = make_stream(5);
        return sum(mul(t, random_tensor(t.shape(), r, false)));
    };

    std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
        {"add", [&] { return dot(add(a, b)); }},
        {"sub", [&] { return dot(sub(a, b)); }},
        {"mul", [&] { return dot(mul(a, b)); }},
        {"affine", [&] { return dot(affine(a, -1.5, 0.25)); }},
        {"sigmoid", [&] { return dot(sigmoid(a)); }},
        {"tanh", [&] { return dot(tanh(a)); }},
        {"relu", [&] { return dot(relu(a)); }},
        {"softmax0", [&] { return dot(softmax(a, 0)); }},
        {"softmax1", [&] { return dot(softmax(a, 1)); }},
        {"softmax2", [&] { return dot(softmax(a, 2)); }},
        {"matmul", [&] { return dot(matmul(reshape(a, {6, 4}), m)); }},
        {"bmm", [&] { return dot(bmm(reshape(a, {2, 3, 4}), bb)); }},
        {"bmm_t", [&] { return dot(bmm(a, bt, true)); }},
        {"concat", [&] { return dot(concat({a, b, c}, 1)); }},
        {"permute", [&] { return dot(permute(a, {2, 0, 1})); }},
        {"transpose", [&] { return dot(transpose(m)); }},
        {"expand", [&] { return dot(expand(a, 1, 3)); }},
        {"slice", [&] { return dot(slice(a, 2, 1, 2)); }},
        {"mean", [&] { return mean(mul(a, c)); }},
        {"layer_norm", [&] { return dot(layer_norm(a, gain, bias)); }},
        {"sdp", [&] { return dot(scaled_dot_product(a, b, b)); }},
    };
    for (auto& [name, fn] : cases) {
        double err = grad_check(fn, {a, b, m, bb, bt, gain, bias});
        EXPECT_LT(err, kOpTolerance) << name;
    }
}

INSTANTIATE_TEST_SUITE_P(RandomDraws, OpGradient, ::testing::Range(0, 4));

TEST(TensorOps, SoftmaxSlicesAreDistributions)
{
    Rng rng = make_stream(11);
    for (int trial = 0; trial < 50; ++trial) {
        auto x = random_tensor({3, 5, 7}, rng, false, 10.0);
        for (std::size_t axis = 0; axis < 3; ++axis) {
            auto y = softmax(x, axis);
            auto sp = detail::split_at(x.shape(), axis);
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t in = 0; in < sp.inner; ++in) {
                    double s = 0;
                    for (std::size_t k = 0; k < sp.len; ++k) {
                        double v = y[o * sp.len * sp.inner + k * sp.inner + in];
                        EXPECT_GE(v, 0.0);
                        s += v;
                    }
                    EXPECT_NEAR(s, 1.0, 1e-9);
                }
        }
    }
}

TEST(Dropout, EvaluationIsIdentity)
{
    Rng rng = make_stream(2);
    auto x = random_tensor({10, 10}, rng, false);
    auto y = dropout(x, 0.5, false, rng);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(Dropout, InvertedScalingAndKeepRate)
{
    auto x = Tensor::full({20000}, 1.0);
    Rng rng = make_stream(4);
    auto y = dropout(x, 0.25, true, rng);
    std::size_t kept = 0;
    for (double v : y.data()) {
        if (v != 0.0) {
            EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
            ++kept;
        }
    }
    EXPECT_NEAR(static_cast<double>(kept) / 20000.0, 0.75, 0.02);
}

TEST(Determinism, ReplayWithSameSeedIsBitIdentical)
{
    auto run = [] {
        Rng rng = make_stream(42);
        auto w = random_tensor({6, 6}, rng);
        auto x = random_tensor({4, 6}, rng, false);
        auto loss = mean(dropout(tanh(matmul(x, w)), 0.3, true, rng));
        backward(loss);
        return std::make_pair(loss.item(), std::vector<double>(w.grad().begin(), w.grad().end()));
    };
    auto r1 = run();
    auto r2 = run();
    EXPECT_EQ(r1.first, r2.first);
    EXPECT_EQ(r1.second, r2.second);
}

TEST(TensorOps, AliasLeafSharesStorageNotGradient)
{
    Tensor p({2}, {1.0, 2.0}, true);
    Tensor q = p.alias_leaf();
    backward(sum(mul(q, q)));
    EXPECT_FALSE(p.has_grad());
    EXPECT_DOUBLE_EQ(q.grad()[1], 4.0);
    p.mutable_data()[0] = 5.0;
    EXPECT_EQ(q[0], 5.0);
}
