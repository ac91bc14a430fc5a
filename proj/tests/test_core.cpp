#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "fd_check.hpp"
#include "simva/autodiff.hpp"
#include "simva/errors.hpp"
#include "simva/rng.hpp"
#include "simva/tensor.hpp"

using namespace simva;
using namespace simva::testutil;
namespace ag = simva::ag;

TEST_CASE("tensor basics") {
    Tensor t(Shape{2, 3});
    CHECK(t.size() == 6);
    t.at({1, 2}) = 5.0;
    CHECK(t[5] == 5.0);
    CHECK_THROWS_AS(t.at({2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor(Shape{2}, {1.0, 2.0, 3.0}), ShapeError);
    CHECK(Tensor::full({2, 2}, 3.0).max_abs() == 3.0);
}

TEST_CASE("rng determinism and ranges") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) {
        double u = a.uniform();
        CHECK(u == b.uniform());
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
    Rng c(7);
    double acc = 0.0;
    for (int i = 0; i < 10000; ++i) acc += c.normal();
    CHECK(std::fabs(acc / 10000.0) < 0.05);
    CHECK(mix_seed(1, 2) != mix_seed(1, 3));
    CHECK(hash_string("abc") != hash_string("abd"));
}

TEST_CASE("elementwise ops: gradients match finite differences") {
    Rng rng(1);
    auto unary_case = [&](const char* name, ag::NodePtr (*op)(const ag::NodePtr&), double lo, double hi) {
        CAPTURE(name);
        Tensor x = randu({3, 4}, rng, lo, hi);
        double err = max_fd_err(
            [op](ag::Tape& t, std::vector<ag::NodePtr>& in) { return weighted_sum(t, op(in[0])); }, {x});
        CHECK(err < 1e-7);
    };
    unary_case("exp", ag::exp_op, -1.0, 1.0);
    unary_case("log", ag::log_op, 0.5, 2.0);
    unary_case("sqrt", ag::sqrt_op, 0.5, 2.0);
    unary_case("rsqrt", ag::rsqrt, 0.5, 2.0);
    unary_case("square", ag::square, -2.0, 2.0);
    unary_case("tanh", ag::tanh_op, -2.0, 2.0);
    unary_case("sigmoid", ag::sigmoid, -3.0, 3.0);
    unary_case("silu", ag::silu, -3.0, 3.0);
    unary_case("gelu", ag::gelu, -3.0, 3.0);
    unary_case("softplus", ag::softplus, -3.0, 3.0);

    Tensor a = randt({2, 3}, rng), b = randu({2, 3}, rng, 0.5, 2.0);
    for (auto op : {ag::add, ag::sub, ag::mul, ag::divide}) {
        double err = max_fd_err(
            [op](ag::Tape& t, std::vector<ag::NodePtr>& in) { return weighted_sum(t, op(in[0], in[1])); },
            {a, b});
        CHECK(err < 1e-7);
    }
    double err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::add_scalar(ag::mul_scalar(in[0], 2.5), -0.5));
        },
        {a});
    CHECK(err < 1e-7);
}

TEST_CASE("broadcast, reduce, reshape, permute, slice, concat, gather") {
    Rng rng(2);
    Tensor x = randt({2, 1, 3}, rng);
    double err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::broadcast_to(in[0], {4, 2, 5, 3}));
        },
        {x});
    CHECK(err < 1e-7);

    Tensor y = randt({2, 3, 4}, rng);
    err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::reduce_sum(in[0], {0, 2}, false));
        },
        {y});
    CHECK(err < 1e-7);
    err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::reduce_mean(in[0], {1}, true));
        },
        {y});
    CHECK(err < 1e-7);
    err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::permute(ag::reshape(in[0], {4, 6}), {1, 0}));
        },
        {y});
    CHECK(err < 1e-7);
    err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            auto s1 = ag::slice(in[0], 1, 0, 2);
            auto s2 = ag::slice(in[0], 1, 1, 2);
            return weighted_sum(t, ag::concat({s1, s2}, 1));
        },
        {y});
    CHECK(err < 1e-7);
    err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::gather_rows(in[0], {1, 0, 1}));
        },
        {y});
    CHECK(err < 1e-7);

    // permute value oracle
    {
        ag::Tape tape;
        auto n = tape.constant(y);
        auto p = ag::permute(n, {2, 0, 1});
        for (int64_t i = 0; i < 2; ++i)
            for (int64_t j = 0; j < 3; ++j)
                for (int64_t k = 0; k < 4; ++k)
                    CHECK(p->value.at({k, i, j}) == y.at({i, j, k}));
    }
}

TEST_CASE("matmul and bmm match loop oracles and finite differences") {
    Rng rng(3);
    Tensor a = randt({3, 4}, rng), b = randt({4, 5}, rng);
    {
        ag::Tape tape;
        auto c = ag::matmul(tape.constant(a), tape.constant(b));
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < 5; ++j) {
                double s = 0.0;
                for (int64_t k = 0; k < 4; ++k) s += a.at({i, k}) * b.at({k, j});
                CHECK(c->value.at({i, j}) == doctest::Approx(s).epsilon(1e-14));
            }
    }
    double err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::matmul(in[0], in[1]));
        },
        {a, b});
    CHECK(err < 1e-7);

    Tensor ba = randt({2, 2, 3, 4}, rng), bb = randt({2, 2, 4, 2}, rng);
    err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) { return weighted_sum(t, ag::bmm(in[0], in[1])); },
        {ba, bb});
    CHECK(err < 1e-7);

    Tensor x = randt({2, 3, 4}, rng), w = randt({4, 6}, rng), bias = randt({6}, rng);
    err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::linear(in[0], in[1], in[2]));
        },
        {x, w, bias});
    CHECK(err < 1e-7);
}

TEST_CASE("softmax and logsumexp") {
    Rng rng(4);
    Tensor x = randt({3, 5}, rng, 2.0);
    {
        ag::Tape tape;
        auto y = ag::softmax_lastdim(tape.constant(x));
        for (int64_t r = 0; r < 3; ++r) {
            double s = 0.0;
            for (int64_t i = 0; i < 5; ++i) s += y->value.at({r, i});
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    double err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::softmax_lastdim(in[0]));
        },
        {x});
    CHECK(err < 1e-7);
    err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::logsumexp_lastdim(in[0]));
        },
        {x});
    CHECK(err < 1e-7);

    // -inf entries are hard zeros and receive zero gradient
    Tensor m = x;
    m.at({0, 2}) = -std::numeric_limits<double>::infinity();
    {
        ag::Tape tape;
        auto leaf = tape.leaf(m, "x");
        auto y = ag::softmax_lastdim(leaf);
        CHECK(y->value.at({0, 2}) == 0.0);
        tape.backward(weighted_sum(tape, y));
        CHECK(leaf->grad.at({0, 2}) == 0.0);
    }
}

TEST_CASE("conv2d matches naive oracle and finite differences") {
    Rng rng(5);
    Tensor x = randt({2, 3, 4, 4}, rng);
    Tensor k = randt({3, 3, 3, 2}, rng);
    Tensor bias = randt({2}, rng);
    {
        ag::Tape tape;
        auto y = ag::conv2d(tape.constant(x), tape.constant(k), tape.constant(bias), 1);
        REQUIRE(y->value.shape() == Shape{2, 2, 4, 4});
        // quadruple-loop oracle
        for (int64_t b = 0; b < 2; ++b)
            for (int64_t co = 0; co < 2; ++co)
                for (int64_t oy = 0; oy < 4; ++oy)
                    for (int64_t ox = 0; ox < 4; ++ox) {
                        double s = bias[co];
                        for (int64_t ky = 0; ky < 3; ++ky)
                            for (int64_t kx = 0; kx < 3; ++kx)
                                for (int64_t ci = 0; ci < 3; ++ci) {
                                    int64_t iy = oy + ky - 1, ix = ox + kx - 1;
                                    if (iy < 0 || iy >= 4 || ix < 0 || ix >= 4) continue;
                                    s += k.at({ky, kx, ci, co}) * x.at({b, ci, iy, ix});
                                }
                        CHECK(y->value.at({b, co, oy, ox}) == doctest::Approx(s).epsilon(1e-13));
                    }
    }
    double err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::conv2d(in[0], in[1], in[2], 1));
        },
        {x, k, bias});
    CHECK(err < 1e-7);
}

TEST_CASE("causal depthwise conv1d: oracle, gradient, causality") {
    Rng rng(6);
    Tensor x = randt({2, 5, 3}, rng);
    Tensor w = randt({3, 4}, rng);
    Tensor bias = randt({3}, rng);
    {
        ag::Tape tape;
        auto y = ag::conv1d_depthwise_causal(tape.constant(x), tape.constant(w), tape.constant(bias));
        for (int64_t b = 0; b < 2; ++b)
            for (int64_t t = 0; t < 5; ++t)
                for (int64_t e = 0; e < 3; ++e) {
                    double s = bias[e];
                    for (int64_t kk = 0; kk < 4; ++kk) {
                        int64_t ti = t - 3 + kk;
                        if (ti < 0) continue;
                        s += w.at({e, kk}) * x.at({b, ti, e});
                    }
                    CHECK(y->value.at({b, t, e}) == doctest::Approx(s).epsilon(1e-13));
                }
    }
    double err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::conv1d_depthwise_causal(in[0], in[1], in[2]));
        },
        {x, w, bias});
    CHECK(err < 1e-7);

    // perturbing the future leaves the past bitwise unchanged
    Tensor x2 = x;
    x2.at({0, 4, 1}) += 10.0;
    ag::Tape t1, t2;
    auto y1 = ag::conv1d_depthwise_causal(t1.constant(x), t1.constant(w), t1.constant(bias));
    auto y2 = ag::conv1d_depthwise_causal(t2.constant(x2), t2.constant(w), t2.constant(bias));
    for (int64_t t = 0; t < 4; ++t)
        for (int64_t e = 0; e < 3; ++e) CHECK(y1->value.at({0, t, e}) == y2->value.at({0, t, e}));
}

TEST_CASE("selective scan: sequential oracle, gradient, causality") {
    Rng rng(7);
    const int64_t B = 2, L = 6, E = 3, N = 4;
    Tensor u = randt({B, L, E}, rng);
    Tensor dt = randu({B, L, E}, rng, 0.01, 0.2);
    Tensor A = randu({E, N}, rng, -1.5, -0.1);
    Tensor Bc = randt({B, L, N}, rng);
    Tensor Cc = randt({B, L, N}, rng);
    Tensor D = randt({E}, rng);

    // independent per-element recurrence oracle
    auto oracle = [&](const Tensor& u_, const Tensor& dt_, const Tensor& A_, const Tensor& B_,
                      const Tensor& C_, const Tensor& D_) {
        Tensor y({B, L, E});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t e = 0; e < E; ++e) {
                std::vector<double> h(N, 0.0);
                for (int64_t t = 0; t < L; ++t) {
                    double acc = 0.0;
                    for (int64_t n = 0; n < N; ++n) {
                        double dct = std::exp(dt_.at({b, t, e}) * A_.at({e, n}));
                        h[static_cast<size_t>(n)] = dct * h[static_cast<size_t>(n)] +
                                                    dt_.at({b, t, e}) * B_.at({b, t, n}) * u_.at({b, t, e});
                        acc += C_.at({b, t, n}) * h[static_cast<size_t>(n)];
                    }
                    y.at({b, t, e}) = acc + D_[e] * u_.at({b, t, e});
                }
            }
        return y;
    };

    ag::Tape tape;
    auto y = ag::selective_scan(tape.constant(u), tape.constant(dt), tape.constant(A),
                                tape.constant(Bc), tape.constant(Cc), tape.constant(D));
    Tensor yo = oracle(u, dt, A, Bc, Cc, D);
    CHECK(max_abs_diff(y->value, yo) < 1e-12);

    double err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::selective_scan(in[0], in[1], in[2], in[3], in[4], in[5]));
        },
        {u, dt, A, Bc, Cc, D});
    CHECK(err < 1e-6);

    // causality: grad of y_t w.r.t. u_s is zero for s > t
    {
        ag::Tape t2;
        auto lu = t2.leaf(u, "u");
        auto ys = ag::selective_scan(lu, t2.constant(dt), t2.constant(A), t2.constant(Bc),
                                     t2.constant(Cc), t2.constant(D));
        const int64_t tq = 2;
        auto yt = ag::slice(ys, 1, tq, 1);
        t2.backward(ag::reduce_sum(yt, {0, 1, 2}, false));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t s = tq + 1; s < L; ++s)
                for (int64_t e = 0; e < E; ++e) CHECK(lu->grad.at({b, s, e}) == 0.0);
    }
}

TEST_CASE("norm composites and cross entropy") {
    Rng rng(8);
    Tensor x = randt({4, 6}, rng);
    Tensor gamma = randu({6}, rng, 0.5, 1.5);
    Tensor beta = randt({6}, rng);
    double err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::layer_norm_lastdim(in[0], in[1], in[2], 1e-5));
        },
        {x, gamma, beta});
    CHECK(err < 1e-6);
    err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) {
            return weighted_sum(t, ag::rms_norm_lastdim(in[0], in[1], 1e-6));
        },
        {x, gamma});
    CHECK(err < 1e-6);

    // uniform logits -> ln n
    {
        ag::Tape tape;
        auto l = tape.constant(Tensor::full({4}, 0.7));
        auto ce = ag::cross_entropy_1d(l, 2);
        CHECK(ce->value[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    Tensor logits = randt({5}, rng, 2.0);
    err = max_fd_err(
        [](ag::Tape& t, std::vector<ag::NodePtr>& in) { return ag::cross_entropy_1d(in[0], 3); },
        {logits});
    CHECK(err < 1e-7);
    CHECK_THROWS_AS(
        [&] {
            ag::Tape tape;
            ag::cross_entropy_1d(tape.constant(logits), 9);
        }(),
        ValidationError);
}

TEST_CASE("tape diagnostics and graph reuse") {
    ag::Tape tape;
    auto a = tape.leaf(Tensor::full({2}, 2.0), "a");
    auto b = ag::mul(a, a); // same node twice
    tape.backward(ag::reduce_sum(b, {0}, false));
    CHECK(a->grad[0] == doctest::Approx(4.0));
    CHECK(a->grad[1] == doctest::Approx(4.0));

    ag::Tape t2;
    auto x = t2.constant(Tensor::full({2}, 1.0));
    auto bad = ag::log_op(ag::add_scalar(x, -1.0)); // log(0) = -inf
    CHECK(t2.first_nonfinite() != nullptr);
    CHECK(t2.first_nonfinite()->label == "log");
    (void)bad;
}
