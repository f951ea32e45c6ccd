#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace osnet {

// Error taxonomy used across the library.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EvaluationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense tensors are rank <= 4, interpreted as (N, C, H, W) for images.
using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Seeded scalar draws. Implemented directly on top of the mt19937_64 stream
// so values do not depend on the standard library's distribution internals.
double uniform01(std::mt19937_64& rng);       // [0, 1)
double uniform_open01(std::mt19937_64& rng);  // (0, 1), redraws on 0
double normal01(std::mt19937_64& rng);        // Box-Muller, one value per call

/// Dense double-precision tensor with shared storage and an optional
/// gradient buffer. Copying a Tensor aliases the same storage.
class Tensor {
  public:
    Tensor() = default;
    Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, double value);
    static Tensor scalar(double value);
    static Tensor from_values(const Shape& shape, std::vector<double> values);
    static Tensor randn(const Shape& shape, std::mt19937_64& rng, double stddev);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int dim(std::size_t i) const;
    std::size_t ndim() const;
    std::size_t numel() const;

    double* data();
    const double* data() const;
    double& operator[](std::size_t i);
    double operator[](std::size_t i) const;

    // Flat index for (n, c, h, w) against this tensor's shape.
    std::size_t index4(int n, int c, int h, int w) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool value);

    // Gradient buffer, allocated (zeroed) on first access.
    double* grad_data();
    const double* grad_data() const;  // nullptr if never allocated
    bool has_grad() const;
    void zero_grad();

    std::vector<double> values_copy() const;
    std::vector<double> grad_copy() const;

    bool all_finite() const;
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  private:
    struct Impl {
        Shape shape;
        std::vector<double> values;
        std::vector<double> grad;  // empty until requested
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;

    Impl& impl();
    const Impl& impl() const;
};

/// Records the backward rule of every differentiable operation executed while
/// a TapeScope is active. Operations append in execution order, so the list
/// is topologically sorted; backward() replays it once in reverse.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse.
    // Gradients accumulate additively; the caller zeroes parameter grads
    // beforehand. The tape stays intact until clear().
    void backward(const Tensor& loss);

    void clear();
    std::size_t size() const { return ops_.size(); }

    static Tape* active();
    // Appends to the active tape; no-op when recording is off.
    static void record(std::function<void()> backward_fn);

  private:
    std::vector<std::function<void()>> ops_;
    friend class TapeScope;
};

/// RAII guard that makes a tape the active recording target.
class TapeScope {
  public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape* previous_;
};

}  // namespace osnet
