#include "eaf/autograd.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>

namespace eaf::ag {

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

double norm_cdf(double x) {
    return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double norm_pdf(double x) {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

const Matrix& Var::value() const {
    return g_->value(*this);
}

const Matrix& Var::grad() const {
    return g_->grad(*this);
}

double Var::scalar() const {
    const Matrix& v = value();
    if (v.rows() != 1 || v.cols() != 1) throw std::logic_error("scalar(): node is not 1x1");
    return v(0, 0);
}

Var Graph::emit(Matrix value, bool requires_grad, std::function<void()> backprop,
                std::initializer_list<Var> parents) {
    for (const Var& p : parents) {
        if (p.g_ != this) throw std::logic_error("autograd: mixing nodes from different graphs");
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Matrix& Graph::grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Matrix::zeros(n.value.rows(), n.value.cols());
    n.reached = true;
    return n.grad;
}

Var Graph::constant(Matrix value) {
    return emit(std::move(value), false, nullptr, {});
}

Var Graph::leaf(Matrix value) {
    return emit(std::move(value), true, nullptr, {});
}

Var Graph::add(Var a, Var b) {
    check_same_shape(a.value(), b.value(), "add");
    Matrix out = eaf::add(a.value(), b.value());
    bool rg = nodes_[a.id_].requires_grad || nodes_[b.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a, b});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_, bid = b.id_;
    nodes_[oid].backprop = [this, oid, aid, bid] {
        const Matrix& g = nodes_[oid].grad;
        if (nodes_[aid].requires_grad) {
            Matrix& ga = grad_ref(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i];
        }
        if (nodes_[bid].requires_grad) {
            Matrix& gb = grad_ref(bid);
            for (std::size_t i = 0; i < g.size(); ++i) gb.data()[i] += g.data()[i];
        }
    };
    return v;
}

Var Graph::sub(Var a, Var b) {
    check_same_shape(a.value(), b.value(), "sub");
    Matrix out = eaf::sub(a.value(), b.value());
    bool rg = nodes_[a.id_].requires_grad || nodes_[b.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a, b});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_, bid = b.id_;
    nodes_[oid].backprop = [this, oid, aid, bid] {
        const Matrix& g = nodes_[oid].grad;
        if (nodes_[aid].requires_grad) {
            Matrix& ga = grad_ref(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i];
        }
        if (nodes_[bid].requires_grad) {
            Matrix& gb = grad_ref(bid);
            for (std::size_t i = 0; i < g.size(); ++i) gb.data()[i] -= g.data()[i];
        }
    };
    return v;
}

Var Graph::mul(Var a, Var b) {
    check_same_shape(a.value(), b.value(), "mul");
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = av.data()[i] * bv.data()[i];
    bool rg = nodes_[a.id_].requires_grad || nodes_[b.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a, b});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_, bid = b.id_;
    nodes_[oid].backprop = [this, oid, aid, bid] {
        const Matrix& g = nodes_[oid].grad;
        const Matrix& av2 = nodes_[aid].value;
        const Matrix& bv2 = nodes_[bid].value;
        if (nodes_[aid].requires_grad) {
            Matrix& ga = grad_ref(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * bv2.data()[i];
        }
        if (nodes_[bid].requires_grad) {
            Matrix& gb = grad_ref(bid);
            for (std::size_t i = 0; i < g.size(); ++i) gb.data()[i] += g.data()[i] * av2.data()[i];
        }
    };
    return v;
}

Var Graph::scale(Var a, double s) {
    Matrix out = eaf::scale(a.value(), s);
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid, s] {
        const Matrix& g = nodes_[oid].grad;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += s * g.data()[i];
    };
    return v;
}

Var Graph::add_scalar(Var a, double s) {
    Matrix out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += s;
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid] {
        const Matrix& g = nodes_[oid].grad;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i];
    };
    return v;
}

Var Graph::mul_scalar_var(Var a, Var s) {
    if (s.value().rows() != 1 || s.value().cols() != 1)
        throw std::invalid_argument("mul_scalar_var: scalar operand must be 1x1");
    const double sv = s.value()(0, 0);
    Matrix out = eaf::scale(a.value(), sv);
    bool rg = nodes_[a.id_].requires_grad || nodes_[s.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a, s});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_, sid = s.id_;
    nodes_[oid].backprop = [this, oid, aid, sid] {
        const Matrix& g = nodes_[oid].grad;
        const double sv2 = nodes_[sid].value(0, 0);
        const Matrix& av = nodes_[aid].value;
        if (nodes_[aid].requires_grad) {
            Matrix& ga = grad_ref(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += sv2 * g.data()[i];
        }
        if (nodes_[sid].requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g.data()[i] * av.data()[i];
            grad_ref(sid)(0, 0) += acc;
        }
    };
    return v;
}

Var Graph::div_scalar_var(Var a, Var s) {
    if (s.value().rows() != 1 || s.value().cols() != 1)
        throw std::invalid_argument("div_scalar_var: scalar operand must be 1x1");
    const double sv = s.value()(0, 0);
    if (sv == 0.0) throw std::domain_error("div_scalar_var: division by zero");
    Matrix out = eaf::scale(a.value(), 1.0 / sv);
    bool rg = nodes_[a.id_].requires_grad || nodes_[s.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a, s});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_, sid = s.id_;
    nodes_[oid].backprop = [this, oid, aid, sid] {
        const Matrix& g = nodes_[oid].grad;
        const double sv2 = nodes_[sid].value(0, 0);
        const Matrix& ov = nodes_[oid].value;
        if (nodes_[aid].requires_grad) {
            Matrix& ga = grad_ref(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] / sv2;
        }
        if (nodes_[sid].requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g.data()[i] * ov.data()[i];
            grad_ref(sid)(0, 0) -= acc / sv2;
        }
    };
    return v;
}

Var Graph::add_scalar_var(Var a, Var s) {
    if (s.value().rows() != 1 || s.value().cols() != 1)
        throw std::invalid_argument("add_scalar_var: scalar operand must be 1x1");
    Matrix out = a.value();
    const double sv = s.value()(0, 0);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += sv;
    bool rg = nodes_[a.id_].requires_grad || nodes_[s.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a, s});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_, sid = s.id_;
    nodes_[oid].backprop = [this, oid, aid, sid] {
        const Matrix& g = nodes_[oid].grad;
        if (nodes_[aid].requires_grad) {
            Matrix& ga = grad_ref(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i];
        }
        if (nodes_[sid].requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g.data()[i];
            grad_ref(sid)(0, 0) += acc;
        }
    };
    return v;
}

Var Graph::matmul(Var a, Var b) {
    Matrix out = eaf::matmul(a.value(), b.value());
    bool rg = nodes_[a.id_].requires_grad || nodes_[b.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a, b});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_, bid = b.id_;
    nodes_[oid].backprop = [this, oid, aid, bid] {
        const Matrix& g = nodes_[oid].grad;  // [m x n]
        const Matrix& av = nodes_[aid].value;  // [m x k]
        const Matrix& bv = nodes_[bid].value;  // [k x n]
        if (nodes_[aid].requires_grad) {
            Matrix& ga = grad_ref(aid);  // ga += g * b^T
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t k = 0; k < bv.rows(); ++k) {
                    double acc = 0.0;
                    const double* grow = g.row(i);
                    const double* brow = bv.row(k);
                    for (std::size_t j = 0; j < g.cols(); ++j) acc += grow[j] * brow[j];
                    ga(i, k) += acc;
                }
        }
        if (nodes_[bid].requires_grad) {
            Matrix& gb = grad_ref(bid);  // gb += a^T * g
            for (std::size_t i = 0; i < av.rows(); ++i) {
                const double* arow = av.row(i);
                const double* grow = g.row(i);
                for (std::size_t k = 0; k < av.cols(); ++k) {
                    const double aik = arow[k];
                    if (aik == 0.0) continue;
                    double* gbrow = gb.row(k);
                    for (std::size_t j = 0; j < g.cols(); ++j) gbrow[j] += aik * grow[j];
                }
            }
        }
    };
    return v;
}

Var Graph::matmul_nt(Var a, Var b) {
    const Matrix& av = a.value();  // [m x k]
    const Matrix& bv = b.value();  // [n x k]
    if (av.cols() != bv.cols()) throw std::invalid_argument("matmul_nt: inner dimensions disagree");
    Matrix out(av.rows(), bv.rows());
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < bv.rows(); ++j) {
            double acc = 0.0;
            const double* ar = av.row(i);
            const double* br = bv.row(j);
            for (std::size_t k = 0; k < av.cols(); ++k) acc += ar[k] * br[k];
            out(i, j) = acc;
        }
    bool rg = nodes_[a.id_].requires_grad || nodes_[b.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a, b});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_, bid = b.id_;
    nodes_[oid].backprop = [this, oid, aid, bid] {
        const Matrix& g = nodes_[oid].grad;   // [m x n]
        const Matrix& av2 = nodes_[aid].value;  // [m x k]
        const Matrix& bv2 = nodes_[bid].value;  // [n x k]
        if (nodes_[aid].requires_grad) {
            Matrix& ga = grad_ref(aid);  // ga += g * b
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) {
                    const double gij = g(i, j);
                    if (gij == 0.0) continue;
                    const double* br = bv2.row(j);
                    double* gar = ga.row(i);
                    for (std::size_t k = 0; k < bv2.cols(); ++k) gar[k] += gij * br[k];
                }
        }
        if (nodes_[bid].requires_grad) {
            Matrix& gb = grad_ref(bid);  // gb += g^T * a
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) {
                    const double gij = g(i, j);
                    if (gij == 0.0) continue;
                    const double* ar = av2.row(i);
                    double* gbr = gb.row(j);
                    for (std::size_t k = 0; k < av2.cols(); ++k) gbr[k] += gij * ar[k];
                }
        }
    };
    return v;
}

Var Graph::matmul_tn(Var a, Var b) {
    const Matrix& av = a.value();  // [k x m]
    const Matrix& bv = b.value();  // [k x n]
    if (av.rows() != bv.rows()) throw std::invalid_argument("matmul_tn: inner dimensions disagree");
    Matrix out(av.cols(), bv.cols());
    for (std::size_t k = 0; k < av.rows(); ++k) {
        const double* ar = av.row(k);
        const double* br = bv.row(k);
        for (std::size_t i = 0; i < av.cols(); ++i) {
            const double aki = ar[i];
            if (aki == 0.0) continue;
            double* orow = out.row(i);
            for (std::size_t j = 0; j < bv.cols(); ++j) orow[j] += aki * br[j];
        }
    }
    bool rg = nodes_[a.id_].requires_grad || nodes_[b.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a, b});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_, bid = b.id_;
    nodes_[oid].backprop = [this, oid, aid, bid] {
        const Matrix& g = nodes_[oid].grad;   // [m x n]
        const Matrix& av2 = nodes_[aid].value;  // [k x m]
        const Matrix& bv2 = nodes_[bid].value;  // [k x n]
        if (nodes_[aid].requires_grad) {
            Matrix& ga = grad_ref(aid);  // ga += b * g^T
            for (std::size_t k = 0; k < bv2.rows(); ++k) {
                const double* br = bv2.row(k);
                double* gar = ga.row(k);
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    double acc = 0.0;
                    const double* gr = g.row(i);
                    for (std::size_t j = 0; j < g.cols(); ++j) acc += br[j] * gr[j];
                    gar[i] += acc;
                }
            }
        }
        if (nodes_[bid].requires_grad) {
            Matrix& gb = grad_ref(bid);  // gb += a * g
            for (std::size_t k = 0; k < av2.rows(); ++k) {
                const double* ar = av2.row(k);
                double* gbr = gb.row(k);
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    const double aki = ar[i];
                    if (aki == 0.0) continue;
                    const double* gr = g.row(i);
                    for (std::size_t j = 0; j < g.cols(); ++j) gbr[j] += aki * gr[j];
                }
            }
        }
    };
    return v;
}

Var Graph::transpose(Var a) {
    const Matrix& av = a.value();
    Matrix out(av.cols(), av.rows());
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out(j, i) = av(i, j);
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid] {
        const Matrix& g = nodes_[oid].grad;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) ga(j, i) += g(i, j);
    };
    return v;
}

Var Graph::add_row(Var a, Var row) {
    const Matrix& av = a.value();
    const Matrix& rv = row.value();
    if (rv.rows() != 1 || rv.cols() != av.cols())
        throw std::invalid_argument("add_row: row operand must be [1 x cols]");
    Matrix out = av;
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) += rv(0, j);
    bool rg = nodes_[a.id_].requires_grad || nodes_[row.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a, row});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_, rid = row.id_;
    nodes_[oid].backprop = [this, oid, aid, rid] {
        const Matrix& g = nodes_[oid].grad;
        if (nodes_[aid].requires_grad) {
            Matrix& ga = grad_ref(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i];
        }
        if (nodes_[rid].requires_grad) {
            Matrix& gr = grad_ref(rid);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
        }
    };
    return v;
}

Var Graph::add_col(Var a, Var col) {
    const Matrix& av = a.value();
    const Matrix& cv = col.value();
    if (cv.cols() != 1 || cv.rows() != av.rows())
        throw std::invalid_argument("add_col: column operand must be [rows x 1]");
    Matrix out = av;
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) += cv(i, 0);
    bool rg = nodes_[a.id_].requires_grad || nodes_[col.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a, col});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_, cid = col.id_;
    nodes_[oid].backprop = [this, oid, aid, cid] {
        const Matrix& g = nodes_[oid].grad;
        if (nodes_[aid].requires_grad) {
            Matrix& ga = grad_ref(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i];
        }
        if (nodes_[cid].requires_grad) {
            Matrix& gc = grad_ref(cid);
            for (std::size_t i = 0; i < g.rows(); ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < g.cols(); ++j) acc += g(i, j);
                gc(i, 0) += acc;
            }
        }
    };
    return v;
}

Var Graph::mul_col(Var a, Var col) {
    const Matrix& av = a.value();
    const Matrix& cv = col.value();
    if (cv.cols() != 1 || cv.rows() != av.rows())
        throw std::invalid_argument("mul_col: column operand must be [rows x 1]");
    Matrix out = av;
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) *= cv(i, 0);
    bool rg = nodes_[a.id_].requires_grad || nodes_[col.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a, col});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_, cid = col.id_;
    nodes_[oid].backprop = [this, oid, aid, cid] {
        const Matrix& g = nodes_[oid].grad;
        const Matrix& av2 = nodes_[aid].value;
        const Matrix& cv2 = nodes_[cid].value;
        if (nodes_[aid].requires_grad) {
            Matrix& ga = grad_ref(aid);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += g(i, j) * cv2(i, 0);
        }
        if (nodes_[cid].requires_grad) {
            Matrix& gc = grad_ref(cid);
            for (std::size_t i = 0; i < g.rows(); ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < g.cols(); ++j) acc += g(i, j) * av2(i, j);
                gc(i, 0) += acc;
            }
        }
    };
    return v;
}

Var Graph::repeat_row(Var row, std::size_t times) {
    const Matrix& rv = row.value();
    if (rv.rows() != 1) throw std::invalid_argument("repeat_row: operand must be [1 x d]");
    Matrix out(times, rv.cols());
    for (std::size_t i = 0; i < times; ++i)
        for (std::size_t j = 0; j < rv.cols(); ++j) out(i, j) = rv(0, j);
    bool rg = nodes_[row.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {row});
    if (!rg) return v;
    std::size_t oid = v.id_, rid = row.id_;
    nodes_[oid].backprop = [this, oid, rid] {
        const Matrix& g = nodes_[oid].grad;
        Matrix& gr = grad_ref(rid);
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
    };
    return v;
}

Var Graph::sigmoid(Var a) {
    const Matrix& av = a.value();
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = av.data()[i];
        out.data()[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                 : std::exp(x) / (1.0 + std::exp(x));
    }
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid] {
        const Matrix& g = nodes_[oid].grad;
        const Matrix& ov = nodes_[oid].value;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = ov.data()[i];
            ga.data()[i] += g.data()[i] * s * (1.0 - s);
        }
    };
    return v;
}

Var Graph::tanh(Var a) {
    const Matrix& av = a.value();
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = std::tanh(av.data()[i]);
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid] {
        const Matrix& g = nodes_[oid].grad;
        const Matrix& ov = nodes_[oid].value;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double t = ov.data()[i];
            ga.data()[i] += g.data()[i] * (1.0 - t * t);
        }
    };
    return v;
}

Var Graph::gelu(Var a) {
    const Matrix& av = a.value();
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = av.data()[i];
        out.data()[i] = x * norm_cdf(x);
    }
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid] {
        const Matrix& g = nodes_[oid].grad;
        const Matrix& av2 = nodes_[aid].value;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = av2.data()[i];
            ga.data()[i] += g.data()[i] * (norm_cdf(x) + x * norm_pdf(x));
        }
    };
    return v;
}

Var Graph::exp(Var a) {
    const Matrix& av = a.value();
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = std::exp(av.data()[i]);
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid] {
        const Matrix& g = nodes_[oid].grad;
        const Matrix& ov = nodes_[oid].value;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * ov.data()[i];
    };
    return v;
}

Var Graph::log(Var a) {
    const Matrix& av = a.value();
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (av.data()[i] <= 0.0) throw std::domain_error("log: non-positive operand");
        out.data()[i] = std::log(av.data()[i]);
    }
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid] {
        const Matrix& g = nodes_[oid].grad;
        const Matrix& av2 = nodes_[aid].value;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] / av2.data()[i];
    };
    return v;
}

Var Graph::rsqrt(Var a) {
    const Matrix& av = a.value();
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (av.data()[i] <= 0.0) throw std::domain_error("rsqrt: non-positive operand");
        out.data()[i] = 1.0 / std::sqrt(av.data()[i]);
    }
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid] {
        const Matrix& g = nodes_[oid].grad;
        const Matrix& ov = nodes_[oid].value;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double o = ov.data()[i];
            ga.data()[i] += g.data()[i] * (-0.5 * o * o * o);
        }
    };
    return v;
}

Var Graph::sum_all(Var a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid] {
        const double g = nodes_[oid].grad(0, 0);
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] += g;
    };
    return v;
}

Var Graph::sum_rows(Var a) {
    const Matrix& av = a.value();
    Matrix out(1, av.cols());
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out(0, j) += av(i, j);
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid] {
        const Matrix& g = nodes_[oid].grad;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < ga.rows(); ++i)
            for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g(0, j);
    };
    return v;
}

Var Graph::sum_cols(Var a) {
    const Matrix& av = a.value();
    Matrix out(av.rows(), 1);
    for (std::size_t i = 0; i < av.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < av.cols(); ++j) acc += av(i, j);
        out(i, 0) = acc;
    }
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid] {
        const Matrix& g = nodes_[oid].grad;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < ga.rows(); ++i)
            for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += g(i, 0);
    };
    return v;
}

Var Graph::concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no operands");
    const std::size_t cols = parts[0].value().cols();
    std::size_t rows = 0;
    bool rg = false;
    for (const Var& p : parts) {
        if (p.value().cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
        rows += p.value().rows();
        rg = rg || nodes_[p.id_].requires_grad;
    }
    Matrix out(rows, cols);
    std::size_t r = 0;
    std::vector<std::size_t> ids;
    std::vector<std::size_t> offsets;
    for (const Var& p : parts) {
        const Matrix& pv = p.value();
        offsets.push_back(r);
        ids.push_back(p.id_);
        for (std::size_t i = 0; i < pv.rows(); ++i)
            for (std::size_t j = 0; j < cols; ++j) out(r + i, j) = pv(i, j);
        r += pv.rows();
    }
    Var v = emit(std::move(out), rg, nullptr, {});
    for (const Var& p : parts) {
        if (p.g_ != this) throw std::logic_error("concat_rows: mixing graphs");
    }
    if (!rg) return v;
    std::size_t oid = v.id_;
    nodes_[oid].backprop = [this, oid, ids, offsets] {
        const Matrix& g = nodes_[oid].grad;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!nodes_[ids[k]].requires_grad) continue;
            Matrix& gp = grad_ref(ids[k]);
            const std::size_t off = offsets[k];
            for (std::size_t i = 0; i < gp.rows(); ++i)
                for (std::size_t j = 0; j < gp.cols(); ++j) gp(i, j) += g(off + i, j);
        }
    };
    return v;
}

Var Graph::concat_cols(Var a, Var b) {
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (av.rows() != bv.rows()) throw std::invalid_argument("concat_cols: row mismatch");
    Matrix out(av.rows(), av.cols() + bv.cols());
    for (std::size_t i = 0; i < av.rows(); ++i) {
        for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) = av(i, j);
        for (std::size_t j = 0; j < bv.cols(); ++j) out(i, av.cols() + j) = bv(i, j);
    }
    const std::size_t acols = av.cols();
    bool rg = nodes_[a.id_].requires_grad || nodes_[b.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a, b});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_, bid = b.id_;
    nodes_[oid].backprop = [this, oid, aid, bid, acols] {
        const Matrix& g = nodes_[oid].grad;
        if (nodes_[aid].requires_grad) {
            Matrix& ga = grad_ref(aid);
            for (std::size_t i = 0; i < ga.rows(); ++i)
                for (std::size_t j = 0; j < acols; ++j) ga(i, j) += g(i, j);
        }
        if (nodes_[bid].requires_grad) {
            Matrix& gb = grad_ref(bid);
            for (std::size_t i = 0; i < gb.rows(); ++i)
                for (std::size_t j = 0; j < gb.cols(); ++j) gb(i, j) += g(i, acols + j);
        }
    };
    return v;
}

Var Graph::slice_rows(Var a, std::size_t r0, std::size_t r1) {
    const Matrix& av = a.value();
    if (r0 >= r1 || r1 > av.rows()) throw std::invalid_argument("slice_rows: bad range");
    Matrix out(r1 - r0, av.cols());
    for (std::size_t i = r0; i < r1; ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out(i - r0, j) = av(i, j);
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid, r0] {
        const Matrix& g = nodes_[oid].grad;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) ga(r0 + i, j) += g(i, j);
    };
    return v;
}

Var Graph::slice_cols(Var a, std::size_t c0, std::size_t c1) {
    const Matrix& av = a.value();
    if (c0 >= c1 || c1 > av.cols()) throw std::invalid_argument("slice_cols: bad range");
    Matrix out(av.rows(), c1 - c0);
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = c0; j < c1; ++j) out(i, j - c0) = av(i, j);
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid, c0] {
        const Matrix& g = nodes_[oid].grad;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) ga(i, c0 + j) += g(i, j);
    };
    return v;
}

Var Graph::softmax_rows(Var a) {
    const Matrix& av = a.value();
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < av.rows(); ++i) {
        double mx = av(i, 0);
        for (std::size_t j = 1; j < av.cols(); ++j) mx = std::max(mx, av(i, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < av.cols(); ++j) {
            out(i, j) = std::exp(av(i, j) - mx);
            denom += out(i, j);
        }
        for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) /= denom;
    }
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid] {
        const Matrix& g = nodes_[oid].grad;
        const Matrix& y = nodes_[oid].value;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.rows(); ++i) {
            double gy = 0.0;
            for (std::size_t j = 0; j < g.cols(); ++j) gy += g(i, j) * y(i, j);
            for (std::size_t j = 0; j < g.cols(); ++j)
                ga(i, j) += y(i, j) * (g(i, j) - gy);
        }
    };
    return v;
}

Var Graph::log_softmax_rows(Var a) {
    const Matrix& av = a.value();
    Matrix out(av.rows(), av.cols());
    for (std::size_t i = 0; i < av.rows(); ++i) {
        double mx = av(i, 0);
        for (std::size_t j = 1; j < av.cols(); ++j) mx = std::max(mx, av(i, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < av.cols(); ++j) denom += std::exp(av(i, j) - mx);
        const double lse = mx + std::log(denom);
        for (std::size_t j = 0; j < av.cols(); ++j) out(i, j) = av(i, j) - lse;
    }
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid] {
        const Matrix& g = nodes_[oid].grad;
        const Matrix& lp = nodes_[oid].value;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.rows(); ++i) {
            double gs = 0.0;
            for (std::size_t j = 0; j < g.cols(); ++j) gs += g(i, j);
            for (std::size_t j = 0; j < g.cols(); ++j)
                ga(i, j) += g(i, j) - std::exp(lp(i, j)) * gs;
        }
    };
    return v;
}

Var Graph::im2col(Var a, std::size_t kernel) {
    if (kernel % 2 == 0) throw std::invalid_argument("im2col: kernel width must be odd");
    const Matrix& av = a.value();
    const std::size_t L = av.rows();
    const std::size_t d = av.cols();
    const std::size_t pad = kernel / 2;
    Matrix out(L, kernel * d);
    for (std::size_t t = 0; t < L; ++t)
        for (std::size_t k = 0; k < kernel; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(pad);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
            for (std::size_t c = 0; c < d; ++c)
                out(t, k * d + c) = av(static_cast<std::size_t>(src), c);
        }
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid, kernel] {
        const Matrix& g = nodes_[oid].grad;
        Matrix& ga = grad_ref(aid);
        const std::size_t L = ga.rows();
        const std::size_t d = ga.cols();
        const std::size_t pad = kernel / 2;
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t k = 0; k < kernel; ++k) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(pad);
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                for (std::size_t c = 0; c < d; ++c)
                    ga(static_cast<std::size_t>(src), c) += g(t, k * d + c);
            }
    };
    return v;
}

Var Graph::maxpool2_rows(Var a) {
    const Matrix& av = a.value();
    const std::size_t L = av.rows() / 2;
    if (L == 0) throw std::invalid_argument("maxpool2_rows: needs at least two rows");
    Matrix out(L, av.cols());
    std::vector<std::uint8_t> take_second(L * av.cols(), 0);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) {
            const double x0 = av(2 * i, j);
            const double x1 = av(2 * i + 1, j);
            if (x1 > x0) {
                out(i, j) = x1;
                take_second[i * av.cols() + j] = 1;
            } else {
                out(i, j) = x0;
            }
        }
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid, take_second] {
        const Matrix& g = nodes_[oid].grad;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) {
                const std::size_t src = 2 * i + take_second[i * g.cols() + j];
                ga(src, j) += g(i, j);
            }
    };
    return v;
}

Var Graph::embedding_rows(Var table, const std::vector<int>& ids) {
    const Matrix& tv = table.value();
    Matrix out(ids.size(), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows())
            throw std::out_of_range("embedding_rows: id out of range");
        for (std::size_t j = 0; j < tv.cols(); ++j) out(i, j) = tv(static_cast<std::size_t>(ids[i]), j);
    }
    bool rg = nodes_[table.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {table});
    if (!rg) return v;
    std::size_t oid = v.id_, tid = table.id_;
    nodes_[oid].backprop = [this, oid, tid, ids] {
        const Matrix& g = nodes_[oid].grad;
        Matrix& gt = grad_ref(tid);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j)
                gt(static_cast<std::size_t>(ids[i]), j) += g(i, j);
    };
    return v;
}

Var Graph::select_cols(Var a, const std::vector<int>& ids) {
    const Matrix& av = a.value();
    if (ids.size() != av.rows()) throw std::invalid_argument("select_cols: one id per row required");
    Matrix out(av.rows(), 1);
    for (std::size_t i = 0; i < av.rows(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= av.cols())
            throw std::out_of_range("select_cols: id out of range");
        out(i, 0) = av(i, static_cast<std::size_t>(ids[i]));
    }
    bool rg = nodes_[a.id_].requires_grad;
    Var v = emit(std::move(out), rg, nullptr, {a});
    if (!rg) return v;
    std::size_t oid = v.id_, aid = a.id_;
    nodes_[oid].backprop = [this, oid, aid, ids] {
        const Matrix& g = nodes_[oid].grad;
        Matrix& ga = grad_ref(aid);
        for (std::size_t i = 0; i < g.rows(); ++i)
            ga(i, static_cast<std::size_t>(ids[i])) += g(i, 0);
    };
    return v;
}

void Graph::backward(Var scalar_loss) {
    if (scalar_loss.g_ != this) throw std::logic_error("backward: loss from another graph");
    const Matrix& lv = nodes_[scalar_loss.id_].value;
    if (lv.rows() != 1 || lv.cols() != 1) throw std::invalid_argument("backward: loss must be 1x1");
    Matrix& lg = grad_ref(scalar_loss.id_);
    lg(0, 0) = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.reached || !n.requires_grad || !n.backprop) continue;
        n.backprop();
    }
}

}  // namespace eaf::ag
