#pragma once

// Central finite-difference gradient checking. This is the independent
// oracle used against every analytic backward pass in the project: the
// function under test is rebuilt from scratch for every perturbed input,
// so the check never reuses the code path it verifies.

#include <cstddef>
#include <functional>
#include <vector>

#include "eaf/autograd.hpp"
#include "eaf/matrix.hpp"

namespace gradcheck {

using BuildFn = std::function<eaf::ag::Var(eaf::ag::Graph&, const std::vector<eaf::ag::Var>&)>;

// Error metric: |analytic - fd| / max(|analytic|, |fd|, 1). Behaves like a
// relative error for large gradients and an absolute error near zero, which
// keeps finite-difference noise from dominating vanishing entries.
inline double grad_error(double analytic, double fd) {
    const double denom = std::max({std::abs(analytic), std::abs(fd), 1.0});
    return std::abs(analytic - fd) / denom;
}

// Returns the worst-case error across every element of every leaf.
inline double max_error(std::vector<eaf::Matrix> leaves, const BuildFn& build, double h = 1e-5) {
    using eaf::ag::Graph;
    using eaf::ag::Var;

    auto eval = [&](const std::vector<eaf::Matrix>& inputs) {
        Graph g;
        std::vector<Var> vars;
        vars.reserve(inputs.size());
        for (const auto& m : inputs) vars.push_back(g.leaf(m));
        return build(g, vars).scalar();
    };

    // Analytic gradients from a single reverse pass.
    std::vector<eaf::Matrix> analytic;
    {
        Graph g;
        std::vector<Var> vars;
        vars.reserve(leaves.size());
        for (const auto& m : leaves) vars.push_back(g.leaf(m));
        Var loss = build(g, vars);
        g.backward(loss);
        for (const auto& v : vars) {
            const eaf::Matrix& gr = v.grad();
            analytic.push_back(gr.empty() ? eaf::Matrix::zeros(v.rows(), v.cols()) : gr);
        }
    }

    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        eaf::Matrix& m = leaves[li];
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double saved = m.data()[i];
            m.data()[i] = saved + h;
            const double fp = eval(leaves);
            m.data()[i] = saved - h;
            const double fm = eval(leaves);
            m.data()[i] = saved;
            const double fd = (fp - fm) / (2.0 * h);
            worst = std::max(worst, grad_error(analytic[li].data()[i], fd));
        }
    }
    return worst;
}

}  // namespace gradcheck
