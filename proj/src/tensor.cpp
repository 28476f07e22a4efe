#include "loctrans/tensor.hpp"

#include <cblas.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "loctrans/error.hpp"

namespace loctrans {

namespace {

thread_local Tape* g_active_tape = nullptr;

// Single-threaded BLAS keeps every product bitwise reproducible.
const bool g_blas_single_thread = [] {
    openblas_set_num_threads(1);
    return true;
}();

} // namespace

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

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

struct Tensor::Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
};

Tensor::Tensor() : Tensor(Shape{0}) {}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<Node>()) {
    node_->values.assign(shape_size(shape), fill);
    node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<Node>()) {
    if (shape_size(shape) != values.size()) {
        throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->values = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged matrix literal");
        values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(values));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->values.size(); }

std::size_t Tensor::rows() const {
    const auto& s = node_->shape;
    if (s.empty()) return 1;
    if (s.size() == 1) return 1;
    return size() / s.back();
}

std::size_t Tensor::cols() const {
    const auto& s = node_->shape;
    return s.empty() ? 1 : s.back();
}

std::span<const double> Tensor::values() const { return node_->values; }
std::span<double> Tensor::mutable_values() { return node_->values; }

double Tensor::at(std::size_t r, std::size_t c) const { return node_->values[r * cols() + c]; }
double& Tensor::at(std::size_t r, std::size_t c) { return node_->values[r * cols() + c]; }

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->values[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
}

bool Tensor::has_grad() const { return !node_->grad.empty() || node_->values.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() const {
    if (node_->grad.size() != node_->values.size()) node_->grad.assign(node_->values.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() const { node_->grad.assign(node_->values.size(), 0.0); }
void Tensor::drop_grad() const { node_->grad.clear(); }

Tensor Tensor::clone() const {
    Tensor out(node_->shape, node_->values);
    out.node_->requires_grad = node_->requires_grad;
    return out;
}

void Tape::record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    Tensor seed = loss;
    seed.mutable_grad()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void Tape::clear() { ops_.clear(); }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() noexcept { return g_active_tape; }

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

double grad_check(const ScalarFn& f, const Tensor& x, double eps) {
    Tensor probe = x;
    const bool had = probe.requires_grad();
    probe.set_requires_grad(true);
    probe.zero_grad();

    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = f(probe);
        if (loss.requires_grad()) tape.backward(loss);
    }
    std::vector<double> analytic(probe.grad().begin(), probe.grad().end());
    if (analytic.size() != probe.size()) analytic.assign(probe.size(), 0.0);

    auto vals = probe.mutable_values();
    double worst = 0.0;
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const double saved = vals[i];
        vals[i] = saved + eps;
        const double up = f(probe).item();
        vals[i] = saved - eps;
        const double down = f(probe).item();
        vals[i] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        if (std::isnan(numeric) || std::isnan(analytic[i])) {
            worst = std::numeric_limits<double>::infinity();
            continue;
        }
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
        worst = std::max(worst, err);
    }
    probe.drop_grad();
    probe.set_requires_grad(had);
    return worst;
}

} // namespace loctrans
