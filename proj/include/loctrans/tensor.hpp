#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace loctrans {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Dense row-major float64 array. Copies of a Tensor share storage; use clone()
// for an independent buffer. The gradient buffer is allocated lazily, either by
// backward() or by zero_grad().
class Tensor {
public:
    Tensor();
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

    const Shape& shape() const;
    std::size_t ndim() const { return shape().size(); }
    std::size_t size() const;
    // 2-D view: rows() is the product of all leading dimensions.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const;
    std::span<double> mutable_values();
    double operator[](std::size_t i) const { return values()[i]; }
    double at(std::size_t r, std::size_t c) const;
    double& at(std::size_t r, std::size_t c);
    double item() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);

    bool has_grad() const;
    std::span<const double> grad() const;
    // Gradient storage is bookkeeping shared by every handle to the same node,
    // so it stays writable through const handles held by tape closures.
    std::span<double> mutable_grad() const;
    void zero_grad() const;
    void drop_grad() const;

    Tensor clone() const;
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

private:
    struct Node;
    std::shared_ptr<Node> node_;
};

// Ordered record of primitive operations. Each entry is the backward closure of
// one op; backward() replays them in exact reverse order of creation.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_fn);
    void backward(const Tensor& loss);
    void clear();
    std::size_t size() const { return ops_.size(); }

private:
    std::vector<std::function<void()>> ops_;
};

// Activates a tape for the current thread. Ops only record while a tape is
// active and at least one operand requires a gradient.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape() noexcept;

// Convenience: runs loss.backward on the tape that recorded it.
void backward(Tape& tape, const Tensor& loss);

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Central-difference check of the tape gradient of f at x. Returns the max over
// elements of |analytic - numeric| / max(1, |numeric|); NaN in either gradient
// yields +inf.
double grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

} // namespace loctrans
