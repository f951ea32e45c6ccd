#include "osnet/finite_difference.hpp"

#include <algorithm>
#include <cmath>

namespace osnet {

std::vector<double> finite_difference_grad(const std::function<double()>& forward,
                                           Tensor param, double step) {
    const std::size_t n = param.numel();
    std::vector<double> grad(n);
    double* p = param.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double saved = p[i];
        p[i] = saved + step;
        const double plus = forward();
        p[i] = saved - step;
        const double minus = forward();
        p[i] = saved;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    return grad;
}

std::vector<double> finite_difference_grad_at(const std::function<double()>& forward,
                                              Tensor param,
                                              const std::vector<std::size_t>& indices,
                                              double step) {
    std::vector<double> grad(indices.size());
    double* p = param.data();
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const std::size_t i = indices[k];
        if (i >= param.numel()) throw ContractError("probe index out of range");
        const double saved = p[i];
        p[i] = saved + step;
        const double plus = forward();
        p[i] = saved - step;
        const double minus = forward();
        p[i] = saved;
        grad[k] = (plus - minus) / (2.0 * step);
    }
    return grad;
}

double max_relative_error(const std::vector<double>& analytic,
                          const std::vector<double>& numeric, double floor) {
    if (analytic.size() != numeric.size()) {
        throw ContractError("gradient size mismatch in relative-error check");
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom =
            std::max({floor, std::fabs(analytic[i]), std::fabs(numeric[i])});
        worst = std::max(worst, std::fabs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

}  // namespace osnet
