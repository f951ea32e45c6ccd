#include "osnet/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace osnet {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) {
            throw DimensionError("non-positive extent in shape " + shape_str(shape));
        }
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

double uniform01(std::mt19937_64& rng) {
    // 53 mantissa bits -> uniform on [0, 1)
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double uniform_open01(std::mt19937_64& rng) {
    double u = uniform01(rng);
    while (u <= 0.0) {
        u = uniform01(rng);
    }
    return u;
}

double normal01(std::mt19937_64& rng) {
    const double u1 = uniform_open01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor::Tensor(Shape shape, double fill) {
    const std::size_t n = shape_numel(shape);
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->values.assign(n, fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
    const std::size_t n = shape_numel(shape);
    if (values.size() != n) {
        throw DimensionError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
    }
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->values = std::move(values);
}

Tensor Tensor::zeros(const Shape& shape) { return Tensor(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, double value) { return Tensor(shape, value); }

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, value); }

Tensor Tensor::from_values(const Shape& shape, std::vector<double> values) {
    return Tensor(shape, std::move(values));
}

Tensor Tensor::randn(const Shape& shape, std::mt19937_64& rng, double stddev) {
    Tensor t(shape);
    double* p = t.data();
    const std::size_t n = t.numel();
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = stddev * normal01(rng);
    }
    return t;
}

Tensor::Impl& Tensor::impl() {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
}

const Tensor::Impl& Tensor::impl() const {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

int Tensor::dim(std::size_t i) const {
    const Shape& s = impl().shape;
    if (i >= s.size()) throw DimensionError("dim index out of range");
    return s[i];
}

std::size_t Tensor::ndim() const { return impl().shape.size(); }

std::size_t Tensor::numel() const { return impl().values.size(); }

double* Tensor::data() { return impl().values.data(); }
const double* Tensor::data() const { return impl().values.data(); }

double& Tensor::operator[](std::size_t i) { return impl().values[i]; }
double Tensor::operator[](std::size_t i) const { return impl().values[i]; }

std::size_t Tensor::index4(int n, int c, int h, int w) const {
    const Shape& s = impl().shape;
    return ((static_cast<std::size_t>(n) * s[1] + c) * s[2] + h) * s[3] + w;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
    impl().requires_grad = value;
    if (value && impl_->grad.empty()) {
        impl_->grad.assign(impl_->values.size(), 0.0);
    }
    return *this;
}

double* Tensor::grad_data() {
    Impl& im = impl();
    if (im.grad.empty()) {
        im.grad.assign(im.values.size(), 0.0);
    }
    return im.grad.data();
}

const double* Tensor::grad_data() const {
    const Impl& im = impl();
    return im.grad.empty() ? nullptr : im.grad.data();
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

void Tensor::zero_grad() {
    Impl& im = impl();
    im.grad.assign(im.values.size(), 0.0);
}

std::vector<double> Tensor::values_copy() const { return impl().values; }

std::vector<double> Tensor::grad_copy() const {
    const Impl& im = impl();
    if (im.grad.empty()) return std::vector<double>(im.values.size(), 0.0);
    return im.grad;
}

bool Tensor::all_finite() const {
    for (double v : impl().values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) {
    if (g_active_tape != nullptr) {
        g_active_tape->ops_.push_back(std::move(backward_fn));
    }
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " +
                            shape_str(loss.shape()));
    }
    if (ops_.empty()) {
        throw ContractError("backward on an empty tape");
    }
    Tensor seed = loss;
    seed.grad_data()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        (*it)();
    }
}

void Tape::clear() { ops_.clear(); }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

}  // namespace osnet
