#pragma once

#include <cstdint>
#include <vector>

#include "apex/rng.hpp"
#include "apex/tape.hpp"
#include "apex/tensor.hpp"

namespace apex {

// Compares reverse-mode gradients against central finite differences on a
// random sample of coordinates. `build` receives a fresh tape plus one leaf
// id per parameter tensor and returns the scalar loss id. Runs in 64-bit.
// Returns max over sampled coordinates of |g_ad - g_fd| / (|g_ad|+|g_fd|+1e-12).
template <class BuildFn>
double grad_check(const std::vector<TensorD*>& params, BuildFn&& build, double h,
                  int n_samples, uint64_t seed) {
    using Id = Tape<double>::Id;

    std::vector<TensorD> grads;
    {
        Tape<double> tape;
        std::vector<Id> leaves;
        leaves.reserve(params.size());
        for (const TensorD* p : params) leaves.push_back(tape.leaf(*p, true));
        const Id loss = build(tape, leaves);
        tape.backward(loss);
        for (Id l : leaves) grads.push_back(tape.grad(l));
    }

    auto eval = [&](const std::vector<TensorD*>& ps) {
        Tape<double> tape;
        std::vector<Id> leaves;
        leaves.reserve(ps.size());
        for (const TensorD* p : ps) leaves.push_back(tape.leaf(*p, false));
        const Id loss = build(tape, leaves);
        return tape.value(loss)[0];
    };

    int64_t total = 0;
    for (const TensorD* p : params) total += p->numel();

    Rng rng(seed);
    double max_rel = 0.0;
    const int n = static_cast<int>(std::min<int64_t>(n_samples, total));
    for (int s = 0; s < n; ++s) {
        const int64_t flat = static_cast<int64_t>(rng.below(static_cast<uint64_t>(total)));
        int64_t off = flat;
        size_t ti = 0;
        while (off >= params[ti]->numel()) {
            off -= params[ti]->numel();
            ++ti;
        }
        TensorD& t = *params[ti];
        const double orig = t[off];
        t[off] = orig + h;
        const double fp = eval(params);
        t[off] = orig - h;
        const double fm = eval(params);
        t[off] = orig;

        const double fd = (fp - fm) / (2.0 * h);
        const double ad = grads[ti][off];
        const double rel = std::abs(ad - fd) / (std::abs(ad) + std::abs(fd) + 1e-12);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace apex
