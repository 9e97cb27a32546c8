#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mixtts/core/ops.hpp"
#include "mixtts/core/tensor.hpp"

// Central-difference verification of backward passes, always at f64.
// An op check builds a scalar objective from randomized inputs, differentiates
// it with the tape, then sweeps every input coordinate with x +- h.

namespace mixtts {

struct GradCheckReport {
    std::string name;
    double max_rel_err = 0.0;
    int instances = 0;
    bool pass(double tol = 1e-4) const { return max_rel_err <= tol; }
};

namespace gradcheck_detail {

inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    return std::abs(analytic - numeric) / denom;
}

}  // namespace gradcheck_detail

// `make_loss` must be a pure function of `leaves` values (reseed any internal
// randomness per call). Returns the max relative error over all coordinates.
inline double finite_difference_check(
    const std::function<Tensor<double>(Tape<double>*)>& make_loss,
    std::vector<Tensor<double>>& leaves, double h = 1e-5) {
    for (auto& leaf : leaves) {
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    }
    Tape<double> tape;
    Tensor<double> loss = make_loss(&tape);
    tape.backward(loss);

    double worst = 0.0;
    for (auto& leaf : leaves) {
        const std::vector<double> analytic =
            leaf.has_grad() ? leaf.grad() : std::vector<double>(leaf.values().size(), 0.0);
        for (std::size_t i = 0; i < leaf.values().size(); ++i) {
            const double keep = leaf.values()[i];
            leaf.values()[i] = keep + h;
            const double up = make_loss(nullptr).item();
            leaf.values()[i] = keep - h;
            const double down = make_loss(nullptr).item();
            leaf.values()[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            worst = std::max(worst, gradcheck_detail::rel_err(analytic[i], numeric));
        }
        leaf.zero_grad();
    }
    return worst;
}

// Same sweep restricted to a sampled subset of coordinates; used for whole-model
// graphs where a full sweep would be too slow.
inline double finite_difference_check_sampled(
    const std::function<Tensor<double>(Tape<double>*)>& make_loss,
    std::vector<Tensor<double>>& leaves, Rng& pick, int coords_per_leaf, double h = 1e-5) {
    for (auto& leaf : leaves) {
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    }
    Tape<double> tape;
    Tensor<double> loss = make_loss(&tape);
    tape.backward(loss);

    double worst = 0.0;
    for (auto& leaf : leaves) {
        const std::vector<double> analytic =
            leaf.has_grad() ? leaf.grad() : std::vector<double>(leaf.values().size(), 0.0);
        const Index n = leaf.numel();
        const int count = static_cast<int>(std::min<Index>(n, coords_per_leaf));
        for (int s = 0; s < count; ++s) {
            const std::size_t i = static_cast<std::size_t>(pick.uniform_int(0, n - 1));
            const double keep = leaf.values()[i];
            leaf.values()[i] = keep + h;
            const double up = make_loss(nullptr).item();
            leaf.values()[i] = keep - h;
            const double down = make_loss(nullptr).item();
            leaf.values()[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            worst = std::max(worst, gradcheck_detail::rel_err(analytic[i], numeric));
        }
        leaf.zero_grad();
    }
    return worst;
}

// Reduce any tensor to a scalar with fixed random weights so that every output
// coordinate influences the objective.
inline Tensor<double> weighted_probe(Tape<double>* tape, const Tensor<double>& y, Rng& rng) {
    Tensor<double> w = Tensor<double>::uniform(y.shape(), rng, 0.25, 1.75);
    return sum_all(tape, mul(tape, y, w));
}

}  // namespace mixtts
