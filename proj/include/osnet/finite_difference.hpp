#pragma once

#include <functional>
#include <vector>

#include "osnet/tensor.hpp"

namespace osnet {

// Central finite differences of a scalar-valued forward function with respect
// to every element of `param`. The forward closure must recompute the value
// from the tensor's current contents; only forward passes are used, so the
// probe is independent of the tape's backward rules. Parameter values are
// restored on return.
std::vector<double> finite_difference_grad(const std::function<double()>& forward,
                                           Tensor param, double step = 1e-4);

// As above but only for the listed flat element indices (subsampled probing
// of large tensors).
std::vector<double> finite_difference_grad_at(const std::function<double()>& forward,
                                              Tensor param,
                                              const std::vector<std::size_t>& indices,
                                              double step = 1e-4);

// Elementwise |a - n| / max(floor, |a|, |n|), reduced with max. Entries where
// both magnitudes fall below the floor count as exact.
double max_relative_error(const std::vector<double>& analytic,
                          const std::vector<double>& numeric, double floor = 1e-6);

}  // namespace osnet
