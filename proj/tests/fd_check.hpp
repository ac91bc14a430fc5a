#pragma once

// Test-side helpers: central finite differences against the tape's analytic
// gradients, and small tensor generators. Oracles here must stay independent
// of the library's backward implementations.

#include <cmath>
#include <functional>
#include <vector>

#include "simva/autodiff.hpp"
#include "simva/rng.hpp"
#include "simva/tensor.hpp"

namespace simva::testutil {

inline Tensor randt(Shape s, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(s));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

inline Tensor randu(Shape s, Rng& rng, double lo, double hi) {
    Tensor t(std::move(s));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

using LossFn = std::function<ag::NodePtr(ag::Tape&, std::vector<ag::NodePtr>&)>;

inline double eval_loss(const LossFn& f, const std::vector<Tensor>& inputs,
                        std::vector<Tensor>* grads = nullptr) {
    ag::Tape tape;
    std::vector<ag::NodePtr> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t, "x"));
    ag::NodePtr loss = f(tape, leaves);
    if (grads) {
        tape.backward(loss);
        grads->clear();
        for (auto& l : leaves)
            grads->push_back(l->grad.empty() ? Tensor(l->value.shape()) : l->grad);
    }
    return loss->value[0];
}

// Max relative error between analytic gradients and central differences,
// over every scalar of every input.
inline double max_fd_err(const LossFn& f, std::vector<Tensor> inputs, double eps = 1e-6) {
    std::vector<Tensor> grads;
    eval_loss(f, inputs, &grads);
    double worst = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (int64_t j = 0; j < inputs[i].size(); ++j) {
            double orig = inputs[i][j];
            inputs[i][j] = orig + eps;
            double lp = eval_loss(f, inputs);
            inputs[i][j] = orig - eps;
            double lm = eval_loss(f, inputs);
            inputs[i][j] = orig;
            double fd = (lp - lm) / (2.0 * eps);
            double an = grads[i][j];
            double err = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1.0});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// Reduce any-op output to a scalar with fixed pseudo-random weights so that
// every output component influences the loss.
inline ag::NodePtr weighted_sum(ag::Tape& tape, const ag::NodePtr& out, uint64_t seed = 7) {
    Rng rng(seed);
    Tensor w(out->value.shape());
    for (int64_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-1.0, 1.0);
    ag::NodePtr wc = tape.constant(std::move(w), "probe_weights");
    return ag::reduce_sum(ag::mul(out, wc), [&] {
        std::vector<int64_t> axes;
        for (int64_t d = 0; d < out->value.ndim(); ++d) axes.push_back(d);
        return axes;
    }(), false);
}

} // namespace simva::testutil
