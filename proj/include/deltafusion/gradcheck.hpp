#pragma once

// Central-difference verification of tape gradients. The loss closure must be
// a deterministic pure function of the given leaves; it runs once under a
// record for the analytic pass and twice per entry, eagerly, for the numeric
// pass.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "deltafusion/tensor.hpp"

namespace deltafusion {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t entries_checked = 0;
};

inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
    return std::fabs(analytic - numeric) / denom;
}

// The default step balances cancellation noise against truncation: entries
// with an exactly-zero gradient (the key bias, say) read as eps*|f|/2h, which
// must stay below threshold * 1e-8, while the h^2 truncation term must stay
// below threshold relative to ordinary entries. 1e-3 clears both by two
// orders of magnitude on every op and pipeline here.
inline GradCheckResult finite_diff_check(const std::vector<Tensor>& leaves,
                                         const std::function<Tensor()>& loss_fn,
                                         double h = 1e-3) {
    for (const Tensor& leaf : leaves) const_cast<Tensor&>(leaf).set_requires_grad(true);

    std::vector<std::vector<double>> analytic;
    {
        ComputationRecord rec;
        RecordScope scope(rec);
        Tensor loss = loss_fn();
        zero_grads(leaves);
        rec.backward(loss);
        for (const Tensor& leaf : leaves) analytic.push_back(leaf.grad());
    }

    GradCheckResult result;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        Tensor& leaf = const_cast<Tensor&>(leaves[k]);
        for (std::size_t i = 0; i < leaf.size(); ++i) {
            const double saved = leaf.data()[i];
            leaf.data()[i] = saved + h;
            const double fp = loss_fn().item();
            leaf.data()[i] = saved - h;
            const double fm = loss_fn().item();
            leaf.data()[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            result.max_rel_err = std::max(result.max_rel_err, rel_err(analytic[k][i], numeric));
            ++result.entries_checked;
        }
    }
    return result;
}

} // namespace deltafusion
