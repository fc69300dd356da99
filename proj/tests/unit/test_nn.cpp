#include "apod/nn.hpp"

#include "../support/oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace apod;
using namespace apod::nn;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

std::vector<int> random_labels(std::size_t n, Rng& rng) {
    std::bernoulli_distribution b(0.5);
    std::vector<int> y(n);
    for (auto& v : y) v = b(rng) ? 1 : 0;
    return y;
}

}  // namespace

TEST_CASE("forward of an identity layer returns the input") {
    DenseLayer l{Matrix::Identity(2, 2), RowVector::Zero(2), Activation::identity};
    DenseNet net({l}, 0.0);
    Matrix x(1, 2);
    x << 1, 2;
    const Matrix out = net.predict(x);
    CHECK(out(0, 0) == 1.0);
    CHECK(out(0, 1) == 2.0);
}

TEST_CASE("zero weights give the bias for any input") {
    RowVector b(2);
    b << 0.5, -0.5;
    DenseNet net({DenseLayer{Matrix::Zero(3, 2), b, Activation::identity}}, 0.0);
    Rng rng(1);
    const Matrix out = net.predict(random_matrix(4, 3, rng));
    for (Eigen::Index r = 0; r < 4; ++r) {
        CHECK(out(r, 0) == 0.5);
        CHECK(out(r, 1) == -0.5);
    }
}

TEST_CASE("two-layer forward matches a straight-line evaluation") {
    Rng rng(7);
    const std::vector<int> dims{4, 6, 2};
    auto net = DenseNet::mlp(dims, Activation::relu, Activation::identity, 0.0, rng);
    const Matrix x = random_matrix(5, 4, rng);
    const Matrix expect = oracle::forward_plain(net, x);
    CHECK((net.predict(x) - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("dimension mismatches and non-finite inputs are rejected") {
    Rng rng(2);
    const std::vector<int> dims{3, 2};
    auto net = DenseNet::mlp(dims, Activation::relu, Activation::identity, 0.0, rng);
    CHECK_THROWS_AS(net.predict(Matrix::Zero(2, 4)), ConfigError);
    Matrix bad = Matrix::Zero(1, 3);
    bad(0, 1) = std::nan("");
    CHECK_THROWS_AS(net.predict(bad), InputError);
    CHECK_THROWS_AS(DenseNet({DenseLayer{Matrix::Zero(2, 3), RowVector::Zero(3), Activation::relu},
                              DenseLayer{Matrix::Zero(2, 2), RowVector::Zero(2), Activation::identity}},
                             0.0),
                    ConfigError);
}

TEST_CASE("hand chain rule: y = w x, squared loss") {
    // L = (w x - 0)^2 with x = 2, w = 3: dL/dw = 2 * 6 * 2 = 24
    DenseNet net({DenseLayer{Matrix::Constant(1, 1, 3.0), RowVector::Zero(1), Activation::identity}}, 0.0);
    Matrix x = Matrix::Constant(1, 1, 2.0);
    auto fwd = net.forward(x);
    const Matrix dl = 2.0 * fwd.output;
    auto g = net.backward(fwd.cache, dl);
    CHECK(g.layers[0].weight(0, 0) == doctest::Approx(24.0));
}

TEST_CASE("zero output gradient gives zero parameter gradients") {
    Rng rng(3);
    const std::vector<int> dims{3, 5, 2};
    auto net = DenseNet::mlp(dims, Activation::relu, Activation::identity, 0.0, rng);
    auto fwd = net.forward(random_matrix(4, 3, rng));
    auto g = net.backward(fwd.cache, Matrix::Zero(4, 2));
    CHECK(g.max_abs() == 0.0);
}

TEST_CASE("stale caches are refused") {
    Rng rng(4);
    const std::vector<int> dims{2, 2};
    auto net = DenseNet::mlp(dims, Activation::relu, Activation::identity, 0.0, rng);
    auto fwd = net.forward(random_matrix(3, 2, rng));
    net.mutable_layers()[0].bias(0) += 1.0;
    CHECK_THROWS_AS(net.backward(fwd.cache, Matrix::Ones(3, 2)), StateError);
}

TEST_CASE("cross-entropy gradients match finite differences") {
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        const std::vector<int> dims{5, 8, 2};
        auto net = DenseNet::mlp(dims, Activation::relu, Activation::identity, 0.0, rng);
        const Matrix x = random_matrix(7, 5, rng);
        const auto y = random_labels(7, rng);
        auto fwd = net.forward(x);
        auto ce = softmax_cross_entropy(fwd.output, y);
        auto g = net.backward(fwd.cache, ce.grad);
        auto num = oracle::numeric_gradient(net, [&](const DenseNet& n) {
            return oracle::cross_entropy(oracle::forward_plain(n, x), y);
        });
        CHECK(oracle::max_relative_error(g.layers, num) < 1e-4);
    }
}

TEST_CASE("generalized cross-entropy gradients match finite differences") {
    Rng rng(12);
    for (double q : {2.5, 3.0, 0.7}) {
        const Matrix logits = random_matrix(6, 2, rng);
        const auto y = random_labels(6, rng);
        auto res = generalized_cross_entropy(logits, y, q);
        CHECK(res.loss == doctest::Approx(oracle::gce(logits, y, q)).epsilon(1e-12));
        for (Eigen::Index i = 0; i < logits.size(); ++i) {
            Matrix up = logits, down = logits;
            up.data()[i] += 1e-6;
            down.data()[i] -= 1e-6;
            const double num = (oracle::gce(up, y, q) - oracle::gce(down, y, q)) / 2e-6;
            CHECK(oracle::relative_error(res.grad.data()[i], num) < 1e-4);
        }
    }
}

TEST_CASE("generalized cross-entropy vanishes at full confidence") {
    Matrix logits(1, 2);
    logits << 800.0, 0.0;
    const std::vector<int> y{0};
    CHECK(generalized_cross_entropy(logits, y, 2.5).loss == doctest::Approx(0.0));
}

TEST_CASE("cross-entropy values and stability") {
    const std::vector<int> y0{0};
    CHECK(softmax_cross_entropy(Matrix::Zero(1, 2), y0).loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    Matrix big(1, 2);
    big << 1000.0, 0.0;
    const auto r = softmax_cross_entropy(big, y0);
    CHECK(std::isfinite(r.loss));
    CHECK(r.loss == doctest::Approx(0.0));

    Rng rng(5);
    const Matrix logits = random_matrix(20, 2, rng, 4.0);
    const auto y = random_labels(20, rng);
    CHECK(softmax_cross_entropy(logits, y).loss == doctest::Approx(oracle::cross_entropy(logits, y)).epsilon(1e-13));
    const Matrix p = softmax(logits);
    const auto g = softmax_cross_entropy(logits, y).grad;
    for (Eigen::Index r = 0; r < 20; ++r) {
        CHECK(std::abs(p.row(r).sum() - 1.0) < 1e-9);
        CHECK(std::abs(g.row(r).sum()) < 1e-9);
    }
    const std::vector<int> bad{2};
    CHECK_THROWS_AS(softmax_cross_entropy(Matrix::Zero(1, 2), bad), InputError);
}

TEST_CASE("adam: first step, zero gradient, zero rate, non-finite gradient") {
    auto scalar_net = [] {
        return DenseNet({DenseLayer{Matrix::Constant(1, 1, 1.0), RowVector::Zero(1), Activation::identity}}, 0.0);
    };
    SUBCASE("first step with g = 1 moves by about -lr") {
        auto net = scalar_net();
        auto st = AdamState::for_net(net, {.lr = 1e-3});
        auto g = zero_gradients(net);
        g.layers[0].weight(0, 0) = 1.0;
        adam_step(net, g, st);
        // m_hat = v_hat = 1 after bias correction: step = lr / (1 + eps)
        CHECK(net.layers()[0].weight(0, 0) - 1.0 == doctest::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
        CHECK(st.step_count == 1);
    }
    SUBCASE("zero gradient keeps parameters and decays moments") {
        auto net = scalar_net();
        auto st = AdamState::for_net(net);
        auto g = zero_gradients(net);
        g.layers[0].weight(0, 0) = 1.0;
        adam_step(net, g, st);
        const double w = net.layers()[0].weight(0, 0);
        const double m = st.first_moment[0].weight(0, 0);
        adam_step(net, zero_gradients(net), st);
        CHECK(st.first_moment[0].weight(0, 0) == doctest::Approx(0.9 * m));
        // the decayed moment still moves the weight; with no history it would not
        auto fresh = scalar_net();
        auto fst = AdamState::for_net(fresh);
        adam_step(fresh, zero_gradients(fresh), fst);
        CHECK(fresh.layers()[0].weight(0, 0) == 1.0);
        CHECK(w != 1.0);
    }
    SUBCASE("lr = 0 leaves parameters unchanged") {
        auto net = scalar_net();
        auto st = AdamState::for_net(net, {.lr = 0.0});
        auto g = zero_gradients(net);
        g.layers[0].weight(0, 0) = 3.0;
        adam_step(net, g, st);
        CHECK(net.layers()[0].weight(0, 0) == 1.0);
    }
    SUBCASE("non-finite gradient is rejected without side effects") {
        auto net = scalar_net();
        auto st = AdamState::for_net(net);
        auto g = zero_gradients(net);
        g.layers[0].weight(0, 0) = std::numeric_limits<double>::infinity();
        CHECK_THROWS_AS(adam_step(net, g, st), NumericError);
        CHECK(st.step_count == 0);
        CHECK(net.layers()[0].weight(0, 0) == 1.0);
    }
}

TEST_CASE("dropout is the identity in eval mode and deterministic under a seed") {
    Rng rng(9);
    const std::vector<int> dims{4, 16, 2};
    auto net = DenseNet::mlp(dims, Activation::relu, Activation::identity, 0.5, rng);
    const Matrix x = random_matrix(3, 4, rng);
    net.set_mode(Mode::eval);
    CHECK(net.forward(x).output == net.forward(x).output);
    CHECK((net.forward(x).output - oracle::forward_plain(net, x)).cwiseAbs().maxCoeff() < 1e-12);
    net.set_mode(Mode::train);
    Rng a(3), b(3);
    CHECK(net.forward(x, &a).output == net.forward(x, &b).output);
    CHECK_THROWS_AS(net.forward(x), StateError);
}

TEST_CASE("checkpoint round trip is exact") {
    Rng rng(21);
    const std::vector<int> dims{6, 5, 3, 2};
    auto net = DenseNet::mlp(dims, Activation::relu, Activation::identity, 0.25, rng);
    std::stringstream ss;
    save_net(net, ss);
    const auto back = load_net(ss);
    CHECK(parameter_digest(back) == parameter_digest(net));
    CHECK(back.dropout_prob() == 0.25);
    CHECK(back.layers().size() == 3);
    std::stringstream bad("not-a-net 1\n");
    CHECK_THROWS_AS(load_net(bad), InputError);
}

TEST_CASE("fixed seed gives identical training trajectories") {
    auto train = [] {
        Rng rng(5);
        const std::vector<int> dims{3, 4, 2};
        auto net = DenseNet::mlp(dims, Activation::relu, Activation::identity, 0.5, rng);
        auto st = AdamState::for_net(net);
        const Matrix x = random_matrix(10, 3, rng);
        const auto y = random_labels(10, rng);
        for (int s = 0; s < 20; ++s) {
            auto fwd = net.forward(x, &rng);
            auto ce = softmax_cross_entropy(fwd.output, y);
            adam_step(net, net.backward(fwd.cache, ce.grad), st);
        }
        return parameter_digest(net);
    };
    CHECK(train() == train());
}
