#pragma once

// Shared test utilities.

#include <functional>
#include <vector>

#include "flowcal/autodiff.hpp"
#include "flowcal/tensor.hpp"

namespace testutil {

using flowcal::Graph;
using flowcal::NodeId;
using flowcal::Tensor;

// Gradient-check metric: max absolute entry difference normalized by the
// largest analytic-gradient magnitude across all parameters. FD truncation
// error is absolute, so per-entry relative comparisons would blow up on
// near-zero entries of otherwise O(1) gradients.
inline double grad_rel_error(const std::vector<Tensor>& analytic, const std::vector<Tensor>& fd) {
    double scale = 0.0;
    for (const Tensor& g : analytic) scale = std::max(scale, flowcal::max_abs(g));
    double diff = 0.0;
    for (size_t p = 0; p < analytic.size(); ++p)
        diff = std::max(diff, flowcal::max_abs_diff(analytic[p], fd[p]));
    return diff / std::max(scale, 1e-12);
}

// Runs backward on the graph and compares every trainable parameter's
// gradient against flowcal::fd_gradient re-evaluating the same graph.
inline double graph_gradcheck(Graph& g, NodeId loss, double step = 1e-5) {
    const std::vector<NodeId> ids = g.trainable_params();
    g.forward();
    g.backward(loss);
    std::vector<Tensor> analytic;
    std::vector<Tensor> init;
    for (NodeId id : ids) {
        analytic.push_back(g.grad(id));
        init.push_back(g.value(id));
    }
    auto fn = [&](const std::vector<Tensor>& params) {
        for (size_t i = 0; i < ids.size(); ++i) g.param_value(ids[i]) = params[i];
        g.forward();
        const double v = g.value(loss)[0];
        return v;
    };
    const std::vector<Tensor> fd = flowcal::fd_gradient(fn, init, step);
    for (size_t i = 0; i < ids.size(); ++i) g.param_value(ids[i]) = init[i];
    g.forward();
    return grad_rel_error(analytic, fd);
}

} // namespace testutil
