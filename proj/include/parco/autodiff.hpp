#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value is a rank-2 tensor (scalars are 1x1, vectors are 1xN or Nx1).
// A Tape records operations in execution order (define-by-run) and replays
// them backwards to accumulate gradients. Spatial Jacobians of implicit
// networks are carried forward as ordinary graph nodes (see DualVar), so a
// single reverse pass yields parameter gradients of input-gradient terms.
//
// Broadcasting rules are deliberately narrow:
//   * add/sub accept equal shapes, or an RxC left operand with a 1xC row
//     (row-wise bias add);
//   * scalar multiplication goes through scale()/add_scalar();
//   * every other shape mix throws ShapeError naming both shapes.
namespace parco::ad {

struct Shape {
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const { return rows * cols; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

namespace detail {

// Leaves elements default-initialized (indeterminate) on resize, so kernels
// that overwrite every entry skip the zero fill.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    using std::allocator<T>::allocator;
    template <class U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
    Tensor(std::size_t rows, std::size_t cols, std::vector<double> values);
    Tensor(std::initializer_list<std::initializer_list<double>> rows);

    static Tensor scalar(double v) { return Tensor(1, 1, v); }
    /// Storage with unspecified contents; the caller must write every entry.
    static Tensor uninitialized(std::size_t rows, std::size_t cols) {
        Tensor t;
        t.shape_ = {rows, cols};
        t.values_.resize(rows * cols);
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rows() const { return shape_.rows; }
    std::size_t cols() const { return shape_.cols; }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return values_[r * shape_.cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * shape_.cols + c]; }
    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    double item() const;

    bool all_finite() const;

private:
    Shape shape_;
    std::vector<double, detail::DefaultInitAllocator<double>> values_;
};

enum class OpKind : std::uint8_t {
    leaf,
    constant,
    matmul,
    add,
    sub,
    mul,
    div,
    scale,
    add_scalar,
    sin,
    cos,
    exp,
    relu,
    softmax_rows,
    concat_rows,
    concat_last_axis,
    gather_rows,
    reduce_sum,
    reduce_sum_last_axis,
    reduce_mean,
    reduce_max_axis,
    square,
    abs,
    sqrt,
    l2_norm_rows,
    pow_scalar,
    clamp_max,
};

const char* op_name(OpKind kind);

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::uint32_t id = 0;

    bool valid() const { return tape != nullptr; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

class Tape {
public:
    /// With record == false no backward closures are stored (inference mode).
    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value);
    Var constant(Tensor value);

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
    std::size_t size() const { return nodes_.size(); }
    bool recording() const { return record_; }

    /// Accumulates d(loss)/d(node) for every node reachable from the 1x1 loss.
    void backward(Var loss);

    /// Gradient after backward(); an all-zero tensor for nodes the loss does not reach.
    Tensor grad(Var v) const;

    // Internal node construction used by the op functions.
    using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;
    Var push(OpKind kind, Tensor value, std::span<const Var> inputs, BackwardFn backward);
    Var push(OpKind kind, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
        return push(kind, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
    }
    bool needs_grad(Var v) const { return nodes_[v.id].requires_grad; }
    const Tensor& grad_of(std::uint32_t id) const { return nodes_[id].grad; }
    Tensor& grad_acc(std::uint32_t id);
    const std::vector<std::uint32_t>& inputs(std::uint32_t id) const { return nodes_[id].inputs; }

private:
    struct Node {
        OpKind kind = OpKind::constant;
        Tensor value;
        Tensor grad;
        std::vector<std::uint32_t> inputs;
        BackwardFn backward;
        bool requires_grad = false;
    };

    Var check_owner(Var v) const;

    std::vector<Node> nodes_;
    bool record_ = true;
};

// ---- primitives -----------------------------------------------------------

enum class Trans : std::uint8_t { none, b };

/// a (RxK) . b (KxC), or a . b^T when trans == Trans::b (b is CxK).
Var matmul(Var a, Var b, Trans trans = Trans::none);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var sin(Var a);
Var cos(Var a);
Var exp(Var a);
Var relu(Var a);
Var softmax_rows(Var a);
Var concat_rows(std::span<const Var> parts);
Var concat_last_axis(std::span<const Var> parts);
Var gather_rows(Var a, std::vector<std::uint32_t> rows);
Var reduce_sum(Var a);
Var reduce_sum_last_axis(Var a);
Var reduce_mean(Var a);
/// Column-wise max over consecutive groups of `group` rows: (G*group)xC -> GxC.
/// group == rows gives the global per-channel max. Ties route the gradient to
/// the first maximal row.
Var reduce_max_axis(Var a, std::size_t group);
Var square(Var a);
Var abs(Var a);
Var sqrt(Var a);
/// Per-row Euclidean norm, RxC -> Rx1. The gradient of a zero row is zero.
Var l2_norm_rows(Var a);
/// Elementwise a^p for a >= 0.
Var pow_scalar(Var a, double p);
/// Elementwise min(a, c); the gradient is zero where the clamp is active.
Var clamp_max(Var a, double c);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

// ---- forward Jacobian propagation ----------------------------------------

/// A batch of values together with their derivatives w.r.t. the three input
/// coordinates: jac[k] has the value's shape and holds d value / d x_k.
struct DualVar {
    Var value;
    std::array<Var, 3> jac;

    /// Stacks the three Jacobian columns into an Nx3 tensor (requires Nx1 values).
    Var gradient() const;
};

/// One step of a dual-propagated layer function.
///   OpKind::matmul: value <- scale * (value . weight^T) + bias + shift
///                   (bias and shift are optional 1xC rows)
///   OpKind::sin:    value <- sin(value)
/// Any other kind has no Jacobian rule and is rejected before evaluation.
struct DualLayer {
    OpKind kind = OpKind::matmul;
    Var weight{};
    Var bias{};
    Var shift{};
    double scale = 1.0;
};

class UnsupportedOp : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Seeds the dual input: value = points (Nx3 constant), jac[k] = e_k.
DualVar dual_input(Tape& tape, const Tensor& points);
DualVar dual_affine(const DualVar& in, Var weight, Var bias = {}, Var shift = {}, double scale = 1.0);
DualVar dual_sin(const DualVar& in);
DualVar dual_forward(Tape& tape, const Tensor& points, std::span<const DualLayer> layers);

// ---- finite-difference checking ------------------------------------------

struct ParamError {
    std::string name;
    double max_rel_err = 0.0;
    double mean_rel_err = 0.0;
    std::size_t probes = 0;
};

struct GradReport {
    std::vector<ParamError> params;
    double max_rel_err = 0.0;
    double mean_rel_err = 0.0;
    std::size_t probe_count = 0;
    std::size_t kink_redraws = 0;  // entries skipped because the stencil crossed a kink
};

inline constexpr double kFdFloor = 1e-8;
/// Relative disagreement between the +-eps and +-2 eps central differences
/// above which a probe is treated as straddling a non-differentiable point.
inline constexpr double kKinkTolerance = 1e-4;
inline constexpr std::size_t kMaxDrawsPerProbe = 10;

/// |a - b| / max(|a|, |b|, kFdFloor)
double relative_error(double a, double b);

void to_json(nlohmann::json& j, const GradReport& r);

/// Builds a scalar loss on a fresh tape given leaves bound to the parameter values.
using LossBuilder = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares reverse-mode gradients against fourth-order central differences
/// (step eps, stencil x +- eps, x +- 2 eps) at `probes`
/// randomly chosen parameter entries. Entries whose stencil straddles a kink
/// are redrawn (counted in kink_redraws). `params` is never modified.
GradReport finite_difference_check(const LossBuilder& fn, std::span<const Tensor> params,
                                   std::span<const std::string> names, std::size_t probes,
                                   double eps, std::uint64_t seed);

}  // namespace parco::ad
