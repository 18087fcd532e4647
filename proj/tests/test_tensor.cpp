#include <cmath>
#include <random>

#include "doctest.h"
#include "rils/tensor.hpp"

using namespace rils;

namespace {

using D = Tensor<double>;

std::vector<double> random_vec(Rng& rng, size_t n, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

// Independent triple-loop oracle for matrix products.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b, size_t M, size_t K,
                                  size_t N) {
    std::vector<double> c(M * N, 0.0);
    for (size_t m = 0; m < M; ++m)
        for (size_t n = 0; n < N; ++n)
            for (size_t k = 0; k < K; ++k) c[m * N + n] += a[m * K + k] * b[k * N + n];
    return c;
}

}  // namespace

TEST_CASE("softmax closed forms") {
    D x = D::from_data({1, 2}, {0.0, std::log(2.0)});
    D y = softmax_rows(x);
    CHECK(y.value()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(y.value()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("l2_normalize closed form") {
    D x = D::from_data({1, 2}, {3.0, 4.0});
    D y = l2_normalize_rows(x);
    CHECK(y.value()[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(y.value()[1] == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("matmul matches triple-loop oracle at 64-bit") {
    Rng rng = make_rng(101);
    const size_t M = 3, K = 4, N = 2;
    auto av = random_vec(rng, M * K);
    auto bv = random_vec(rng, K * N);
    D c = matmul(D::from_data({M, K}, av), D::from_data({K, N}, bv));
    const auto expect = matmul_oracle(av, bv, M, K, N);
    for (size_t i = 0; i < expect.size(); ++i) CHECK(std::abs(c.value()[i] - expect[i]) < 1e-12);
}

TEST_CASE("matmul shape mismatch is a descriptive error") {
    D a = D::zeros({3, 4});
    D b = D::zeros({5, 2});
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
    try {
        matmul(a, b);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("3x4") != std::string::npos);
        CHECK(std::string(e.what()).find("5x2") != std::string::npos);
    }
}

TEST_CASE("gather index out of range") {
    D a = D::zeros({3, 2});
    CHECK_THROWS_AS(gather_rows(a, {0, 3}), IndexError);
}

TEST_CASE("backward requires a scalar loss") {
    D x = D::from_data({1, 2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(scalar_mul(x, 2.0)), ContractError);
}

TEST_CASE("d/dx x*x at 3 is 6") {
    D x = D::from_data({1, 1}, {3.0}, true);
    backward(mul(x, x));
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("d/dx sum(softmax(x)) is zero") {
    Rng rng = make_rng(7);
    D x = D::from_data({1, 5}, random_vec(rng, 5), true);
    backward(sum_all(softmax_rows(x)));
    for (double g : x.grad()) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("gradients accumulate additively across multiple uses") {
    D x = D::from_data({1, 1}, {2.0}, true);
    D y = add(mul(x, x), mul(x, x));  // 2 x^2
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(8.0).epsilon(1e-14));
}

TEST_CASE("stop_gradient forward identity, severed backward") {
    D x = D::from_data({1, 2}, {1.5, -2.0}, true);
    D y = stop_gradient(x);
    CHECK(y.value() == x.value());

    // d/dx sum(sg(x) * x) at x=[3]: only the live factor contributes.
    D z = D::from_data({1, 1}, {3.0}, true);
    backward(sum_all(mul(stop_gradient(z), z)));
    CHECK(z.grad()[0] == doctest::Approx(3.0).epsilon(1e-14));
}

TEST_CASE("stop_gradient matches finite differences of a frozen-branch graph") {
    // Analytic gradient of f(x) = sum(sg(softmax(x)) * x^2) must equal the
    // central differences of the graph with the sg branch frozen at x0.
    Rng rng = make_rng(13);
    const auto x0 = random_vec(rng, 4);

    D x = D::from_data({1, 4}, x0, true);
    backward(sum_all(mul(stop_gradient(softmax_rows(x)), mul(x, x))));
    const std::vector<double> analytic = x.grad();

    const std::vector<double> frozen = softmax_rows(D::from_data({1, 4}, x0)).value();
    const double h = 1e-5;
    for (size_t i = 0; i < x0.size(); ++i) {
        auto eval = [&](double xi) {
            double acc = 0;
            for (size_t j = 0; j < x0.size(); ++j) {
                const double v = (j == i) ? xi : x0[j];
                acc += frozen[j] * v * v;
            }
            return acc;
        };
        const double numeric = (eval(x0[i] + h) - eval(x0[i] - h)) / (2.0 * h);
        CHECK(std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)) < 1e-8);
    }
}

TEST_CASE("random composite graph gradient matches central differences") {
    Rng rng = make_rng(29);
    auto w1v = random_vec(rng, 4 * 3);
    auto w2v = random_vec(rng, 3 * 2);
    auto f = [&](const D& x) {
        D w1 = D::from_data({4, 3}, w1v);
        D w2 = D::from_data({3, 2}, w2v);
        D h = gelu(matmul(x, w1));
        D o = softmax_rows(matmul(h, w2));
        return sum_all(mul(o, o));
    };
    const double err = grad_check(f, D::from_data({2, 4}, random_vec(rng, 8)), 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("grad_check on sum of squares is near-exact") {
    Rng rng = make_rng(31);
    auto f = [](const D& x) { return sum_all(mul(x, x)); };
    const double err = grad_check(f, D::from_data({2, 3}, random_vec(rng, 6)), 1e-5);
    CHECK(err < 1e-10);
}

TEST_CASE("per-op gradients match finite differences") {
    Rng rng = make_rng(37);
    const D point = D::from_data({3, 4}, random_vec(rng, 12, 0.1, 1.5));
    const auto aux = random_vec(rng, 12, -0.8, 0.8);

    auto check = [&](const std::function<D(const D&)>& f, double tol = 1e-7) {
        CHECK(grad_check(f, point, 1e-5) < tol);
    };

    check([&](const D& x) { return sum_all(mul(add(x, D::from_data({3, 4}, aux)), x)); });
    check([&](const D& x) { return sum_all(mul(sub(x, D::from_data({3, 4}, aux)), x)); });
    check([&](const D& x) { return sum_all(exp(scalar_mul(x, 0.5))); });
    check([&](const D& x) { return sum_all(log(x)); });  // point is positive
    check([&](const D& x) { return sum_all(gelu(x)); });
    check([&](const D& x) { return sum_all(mul(transpose(x), transpose(x))); });
    check([&](const D& x) {
        D cc = concat_rows<double>({slice_cols(x, 0, 2), slice_cols(x, 2, 2)});
        return sum_all(mul(cc, cc));
    });
    check([&](const D& x) { return sum_all(mul(gather_rows(x, {2, 0, 0}), gather_rows(x, {1, 1, 2}))); });
    check([&](const D& x) { return sum_all(mul(mean_axis(x, 0), mean_axis(x, 0))); });
    check([&](const D& x) { return sum_all(mul(sum_axis(x, 1), sum_axis(x, 1))); });
    check([&](const D& x) { return sum_all(mul(softmax_rows(x), x)); });
    check([&](const D& x) { return sum_all(mul(log_softmax_rows(x), log_softmax_rows(x))); });
    check([&](const D& x) { return sum_all(mul(l2_normalize_rows(x), D::from_data({3, 4}, aux))); });
    check([&](const D& x) {
        D g = D::from_data({1, 4}, {1.1, 0.9, 1.05, 0.95});
        D b = D::from_data({1, 4}, {0.01, -0.02, 0.0, 0.03});
        return sum_all(mul(layer_norm(x, g, b), D::from_data({3, 4}, aux)));
    });
    check([&](const D& x) { return sum_all(scale(x, mean_all(x))); });
    check([&](const D& x) { return sum_all(mul(add_row(x, D::from_data({1, 4}, {0.1, 0.2, 0.3, 0.4})), x)); });
    check([&](const D& x) { return sum_all(mul(concat_cols<double>({x, x}), concat_cols<double>({x, x}))); });
}

TEST_CASE("layer_norm learns through gain and bias too") {
    Rng rng = make_rng(41);
    const auto xv = random_vec(rng, 8);
    auto f = [&](const D& gb) {
        D x = D::from_data({2, 4}, xv);
        D g = slice_cols(gb, 0, 4);
        D b = slice_cols(gb, 4, 4);
        return sum_all(mul(layer_norm(x, g, b), x));
    };
    const double err = grad_check(f, D::from_data({1, 8}, random_vec(rng, 8, 0.5, 1.5)), 1e-5);
    CHECK(err < 1e-7);
}

TEST_CASE("softmax rows are a distribution (property)") {
    Rng rng = make_rng(43);
    for (int trial = 0; trial < 50; ++trial) {
        std::uniform_int_distribution<size_t> dim(1, 8);
        const size_t n = dim(rng), d = dim(rng);
        D y = softmax_rows(D::from_data({n, d}, random_vec(rng, n * d, -30.0, 30.0)));
        for (size_t r = 0; r < n; ++r) {
            double sum = 0;
            for (size_t c = 0; c < d; ++c) {
                const double v = y.value()[r * d + c];
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("l2_normalize properties: unit norm and positive-scale invariance") {
    Rng rng = make_rng(47);
    for (int trial = 0; trial < 50; ++trial) {
        const auto v = random_vec(rng, 6, -2.0, 2.0);
        D y = l2_normalize_rows(D::from_data({1, 6}, v));
        double norm = 0;
        for (double e : y.value()) norm += e * e;
        CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-6);

        // Exact invariance for power-of-two scales (no rounding in c*v).
        for (double c : {2.0, 0.5, 8.0}) {
            auto scaled = v;
            for (auto& e : scaled) e *= c;
            D ys = l2_normalize_rows(D::from_data({1, 6}, scaled));
            CHECK(ys.value() == y.value());
        }
    }
    // Degenerate input: floored denominator, stays finite.
    D tiny = l2_normalize_rows(D::from_data({1, 2}, {0.0, 0.0}));
    for (double e : tiny.value()) CHECK(std::isfinite(e));
}

TEST_CASE("float32 softmax row sums stay within 1e-6") {
    using F = Tensor<float>;
    Rng rng = make_rng(53);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<float> v(64);
        std::uniform_real_distribution<float> d(-25.0f, 25.0f);
        for (auto& x : v) x = d(rng);
        F y = softmax_rows(F::from_data({4, 16}, v));
        for (size_t r = 0; r < 4; ++r) {
            float sum = 0;
            for (size_t c = 0; c < 16; ++c) sum += y.value()[r * 16 + c];
            CHECK(std::abs(sum - 1.0f) < 1e-6f);
        }
    }
}

TEST_CASE("no graph is recorded under NoGradGuard") {
    D x = D::from_data({1, 2}, {1.0, 2.0}, true);
    const uint64_t before = D::nodes_created();
    {
        NoGradGuard ng;
        D y = mul(x, x);
        CHECK_FALSE(y.requires_grad());
    }
    // Exactly one node for the result value, no backward linkage.
    CHECK(D::nodes_created() == before + 1);
}

TEST_CASE("grad_check reports non-finite values") {
    auto f = [](const D& x) { return sum_all(log(x)); };
    CHECK_THROWS_AS(grad_check(f, D::from_data({1, 2}, {1.0, -1.0}), 1e-5), NumericalError);
}
