#include <doctest.h>

#include <cmath>
#include <vector>

#include "eaf/autograd.hpp"
#include "eaf/matrix.hpp"
#include "eaf/rng.hpp"
#include "gradcheck.hpp"

using eaf::Matrix;
using eaf::Rng;
using eaf::ag::Graph;
using eaf::ag::Var;

namespace {

// Weighted scalar head so every output element receives a distinct gradient;
// a plain sum would hide transposition and indexing mistakes.
Var weighted_sum(Graph& g, Var out, const Matrix& weights) {
    return g.sum_all(g.mul(out, g.constant(weights)));
}

Matrix randm(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    return Matrix::randn(r, c, rng, scale);
}

}  // namespace

TEST_CASE("forward values of basic ops") {
    Graph g;
    Matrix a(2, 2);
    a(0, 0) = 1; a(0, 1) = 2; a(1, 0) = 3; a(1, 1) = 4;
    Matrix b(2, 2);
    b(0, 0) = 5; b(0, 1) = 6; b(1, 0) = 7; b(1, 1) = 8;

    Var va = g.constant(a);
    Var vb = g.constant(b);
    Matrix mm = g.matmul(va, vb).value();
    CHECK(mm(0, 0) == doctest::Approx(19));
    CHECK(mm(0, 1) == doctest::Approx(22));
    CHECK(mm(1, 0) == doctest::Approx(43));
    CHECK(mm(1, 1) == doctest::Approx(50));

    Matrix nt = g.matmul_nt(va, vb).value();  // a * b^T
    CHECK(nt(0, 0) == doctest::Approx(1 * 5 + 2 * 6));
    CHECK(nt(1, 1) == doctest::Approx(3 * 7 + 4 * 8));

    Matrix tn = g.matmul_tn(va, vb).value();  // a^T * b
    CHECK(tn(0, 0) == doctest::Approx(1 * 5 + 3 * 7));

    Matrix sm = g.softmax_rows(va).value();
    CHECK(sm(0, 0) + sm(0, 1) == doctest::Approx(1.0));
    CHECK(sm(1, 0) + sm(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("maxpool halves rows with floor") {
    Graph g;
    Matrix a(5, 2);
    for (std::size_t i = 0; i < 5; ++i) {
        a(i, 0) = static_cast<double>(i);
        a(i, 1) = -static_cast<double>(i);
    }
    Var out = g.maxpool2_rows(g.constant(a));
    CHECK(out.rows() == 2);
    CHECK(out.value()(0, 0) == 1.0);   // max(0, 1)
    CHECK(out.value()(0, 1) == 0.0);   // max(0, -1)
    CHECK(out.value()(1, 0) == 3.0);
}

TEST_CASE("im2col applies zero same-padding") {
    Graph g;
    Matrix a(3, 1);
    a(0, 0) = 1; a(1, 0) = 2; a(2, 0) = 3;
    Matrix cols = g.im2col(g.constant(a), 3).value();
    CHECK(cols.cols() == 3);
    // Row 0 window is [pad, x0, x1].
    CHECK(cols(0, 0) == 0.0);
    CHECK(cols(0, 1) == 1.0);
    CHECK(cols(0, 2) == 2.0);
    CHECK(cols(2, 2) == 0.0);
}

TEST_CASE("gradients of elementwise and broadcast ops") {
    Rng rng(1234);
    Matrix w = randm(3, 4, rng);

    auto check1 = [&](auto&& fn) {
        std::vector<Matrix> leaves = {randm(3, 4, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, fn(g, v[0]), w);
        });
        CHECK(err < 1e-6);
    };

    check1([](Graph& g, Var a) { return g.sigmoid(a); });
    check1([](Graph& g, Var a) { return g.tanh(a); });
    check1([](Graph& g, Var a) { return g.gelu(a); });
    check1([](Graph& g, Var a) { return g.exp(a); });
    check1([](Graph& g, Var a) { return g.scale(a, -1.7); });
    check1([](Graph& g, Var a) { return g.add_scalar(a, 0.3); });
    check1([](Graph& g, Var a) { return g.softmax_rows(a); });
    check1([](Graph& g, Var a) { return g.log_softmax_rows(a); });

    // log and rsqrt need positive inputs.
    {
        Matrix pos = randm(3, 4, rng);
        for (std::size_t i = 0; i < pos.size(); ++i) pos.data()[i] = 0.5 + std::abs(pos.data()[i]);
        double err = gradcheck::max_error({pos}, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.log(v[0]), w);
        });
        CHECK(err < 1e-6);
        err = gradcheck::max_error({pos}, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.rsqrt(v[0]), w);
        });
        CHECK(err < 1e-6);
    }
}

TEST_CASE("gradients of binary ops") {
    Rng rng(99);
    Matrix w = randm(3, 4, rng);
    std::vector<Matrix> leaves = {randm(3, 4, rng), randm(3, 4, rng)};

    auto check2 = [&](auto&& fn) {
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, fn(g, v[0], v[1]), w);
        });
        CHECK(err < 1e-6);
    };
    check2([](Graph& g, Var a, Var b) { return g.add(a, b); });
    check2([](Graph& g, Var a, Var b) { return g.sub(a, b); });
    check2([](Graph& g, Var a, Var b) { return g.mul(a, b); });
}

TEST_CASE("gradients of matrix products") {
    Rng rng(7);
    Matrix w = randm(3, 5, rng);
    {
        std::vector<Matrix> leaves = {randm(3, 4, rng), randm(4, 5, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.matmul(v[0], v[1]), w);
        });
        CHECK(err < 1e-6);
    }
    {
        std::vector<Matrix> leaves = {randm(3, 4, rng), randm(5, 4, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.matmul_nt(v[0], v[1]), w);
        });
        CHECK(err < 1e-6);
    }
    {
        std::vector<Matrix> leaves = {randm(4, 3, rng), randm(4, 5, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.matmul_tn(v[0], v[1]), w);
        });
        CHECK(err < 1e-6);
    }
    {
        std::vector<Matrix> leaves = {randm(5, 3, rng)};
        Matrix wt = randm(3, 5, rng);
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.transpose(v[0]), wt);
        });
        CHECK(err < 1e-6);
    }
}

TEST_CASE("gradients of broadcasts, reductions and scalar vars") {
    Rng rng(17);
    Matrix w = randm(4, 3, rng);
    {
        std::vector<Matrix> leaves = {randm(4, 3, rng), randm(1, 3, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.add_row(v[0], v[1]), w);
        });
        CHECK(err < 1e-6);
    }
    {
        std::vector<Matrix> leaves = {randm(4, 3, rng), randm(4, 1, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.add_col(v[0], v[1]), w);
        });
        CHECK(err < 1e-6);
        err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.mul_col(v[0], v[1]), w);
        });
        CHECK(err < 1e-6);
    }
    {
        std::vector<Matrix> leaves = {randm(1, 3, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.repeat_row(v[0], 4), w);
        });
        CHECK(err < 1e-6);
    }
    {
        Matrix s(1, 1);
        s(0, 0) = 1.3;
        std::vector<Matrix> leaves = {randm(4, 3, rng), s};
        for (auto&& op : {&Graph::mul_scalar_var, &Graph::div_scalar_var, &Graph::add_scalar_var}) {
            double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
                return weighted_sum(g, (g.*op)(v[0], v[1]), w);
            });
            CHECK(err < 1e-6);
        }
    }
    {
        std::vector<Matrix> leaves = {randm(4, 3, rng)};
        Matrix wr = randm(1, 3, rng);
        Matrix wc = randm(4, 1, rng);
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.sum_rows(v[0]), wr);
        });
        CHECK(err < 1e-6);
        err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.sum_cols(v[0]), wc);
        });
        CHECK(err < 1e-6);
        err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return g.sum_all(v[0]);
        });
        CHECK(err < 1e-6);
    }
}

TEST_CASE("gradients of structural ops") {
    Rng rng(23);
    {
        Matrix w = randm(7, 3, rng);
        std::vector<Matrix> leaves = {randm(2, 3, rng), randm(4, 3, rng), randm(1, 3, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            std::vector<Var> parts = {v[0], v[1], v[2]};
            return weighted_sum(g, g.concat_rows(parts), w);
        });
        CHECK(err < 1e-6);
    }
    {
        Matrix w = randm(4, 5, rng);
        std::vector<Matrix> leaves = {randm(4, 2, rng), randm(4, 3, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.concat_cols(v[0], v[1]), w);
        });
        CHECK(err < 1e-6);
    }
    {
        Matrix w = randm(2, 5, rng);
        std::vector<Matrix> leaves = {randm(6, 5, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.slice_rows(v[0], 1, 3), w);
        });
        CHECK(err < 1e-6);
    }
    {
        Matrix w = randm(6, 2, rng);
        std::vector<Matrix> leaves = {randm(6, 5, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.slice_cols(v[0], 2, 4), w);
        });
        CHECK(err < 1e-6);
    }
}

TEST_CASE("gradients of sequence ops") {
    Rng rng(31);
    {
        Matrix w = randm(6, 9, rng);
        std::vector<Matrix> leaves = {randm(6, 3, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.im2col(v[0], 3), w);
        });
        CHECK(err < 1e-6);
    }
    {
        // Keep entries well separated so the finite difference cannot flip
        // an argmax.
        Matrix a(6, 2);
        Rng local(5);
        for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] = local.uniform(-10.0, 10.0);
        Matrix w = randm(3, 2, rng);
        double err = gradcheck::max_error({a}, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.maxpool2_rows(v[0]), w);
        });
        CHECK(err < 1e-6);
    }
    {
        Matrix w = randm(4, 3, rng);
        std::vector<int> ids = {2, 0, 2, 1};
        std::vector<Matrix> leaves = {randm(3, 3, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.embedding_rows(v[0], ids), w);
        });
        CHECK(err < 1e-6);
    }
    {
        Matrix w = randm(4, 1, rng);
        std::vector<int> ids = {1, 0, 2, 2};
        std::vector<Matrix> leaves = {randm(4, 3, rng)};
        double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
            return weighted_sum(g, g.select_cols(v[0], ids), w);
        });
        CHECK(err < 1e-6);
    }
}

TEST_CASE("gradient accumulates through shared subexpressions") {
    Rng rng(41);
    std::vector<Matrix> leaves = {randm(3, 3, rng)};
    double err = gradcheck::max_error(leaves, [&](Graph& g, const std::vector<Var>& v) {
        Var y = g.mul(v[0], v[0]);            // x^2 uses x twice
        Var z = g.add(y, g.sigmoid(v[0]));    // and x a third time
        return g.sum_all(z);
    });
    CHECK(err < 1e-6);
}

TEST_CASE("rng reproducibility") {
    Rng a(2024), b(2024);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(2024), d(2025);
    CHECK(c.next_u64() != d.next_u64());

    Rng base(7);
    Rng f1 = base.fork(1);
    Rng f2 = base.fork(2);
    CHECK(f1.next_u64() != f2.next_u64());
}
