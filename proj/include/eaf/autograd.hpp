#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "eaf/matrix.hpp"

namespace eaf::ag {

class Graph;

// Lightweight handle to a node on the tape.
class Var {
public:
    Var() = default;
    bool valid() const { return g_ != nullptr; }
    const Matrix& value() const;
    const Matrix& grad() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    double scalar() const;
    Graph* graph() const { return g_; }
    std::size_t id() const { return id_; }

private:
    friend class Graph;
    Var(Graph* g, std::size_t id) : g_(g), id_(id) {}
    Graph* g_ = nullptr;
    std::size_t id_ = 0;
};

// Reverse-mode tape. Values are computed eagerly as ops are recorded;
// backward() walks the tape once in reverse creation order. A graph is
// built per forward pass and discarded afterwards.
class Graph {
public:
    Var constant(Matrix value);
    Var leaf(Matrix value);  // differentiable input / parameter

    // Elementwise binary (shapes must match).
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);

    // Scalar constants.
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);

    // 1x1 variable broadcast against a full matrix.
    Var mul_scalar_var(Var a, Var s);
    Var div_scalar_var(Var a, Var s);
    Var add_scalar_var(Var a, Var s);

    // Matrix products: plain, a*b^T, a^T*b.
    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);
    Var matmul_tn(Var a, Var b);
    Var transpose(Var a);

    // Broadcasts along rows/columns.
    Var add_row(Var a, Var row);   // [L x d] + [1 x d]
    Var add_col(Var a, Var col);   // [L x d] + [L x 1]
    Var mul_col(Var a, Var col);   // [L x d] * [L x 1]
    Var repeat_row(Var row, std::size_t times);

    // Elementwise nonlinearities.
    Var sigmoid(Var a);
    Var tanh(Var a);
    Var gelu(Var a);
    Var exp(Var a);
    Var log(Var a);
    Var rsqrt(Var a);

    // Reductions.
    Var sum_all(Var a);   // -> [1 x 1]
    Var sum_rows(Var a);  // [L x d] -> [1 x d]
    Var sum_cols(Var a);  // [L x d] -> [L x 1]

    // Structure.
    Var concat_rows(std::span<const Var> parts);
    Var concat_cols(Var a, Var b);
    Var slice_rows(Var a, std::size_t r0, std::size_t r1);
    Var slice_cols(Var a, std::size_t c0, std::size_t c1);

    // Softmax family (per row).
    Var softmax_rows(Var a);
    Var log_softmax_rows(Var a);

    // Sequence building blocks.
    Var im2col(Var a, std::size_t kernel);      // zero same-padding, odd kernel
    Var maxpool2_rows(Var a);                   // width-2/stride-2, floor length
    Var embedding_rows(Var table, const std::vector<int>& ids);
    Var select_cols(Var a, const std::vector<int>& ids);  // -> [L x 1]

    void backward(Var scalar_loss);

    const Matrix& value(Var v) const { return nodes_[v.id_].value; }
    const Matrix& grad(Var v) const { return nodes_[v.id_].grad; }
    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        bool reached = false;
        std::function<void()> backprop;
    };

    Var emit(Matrix value, bool requires_grad, std::function<void()> backprop,
             std::initializer_list<Var> parents);
    Matrix& grad_ref(std::size_t id);
    void mark(std::size_t id) { nodes_[id].reached = true; }

    std::vector<Node> nodes_;
};

}  // namespace eaf::ag
