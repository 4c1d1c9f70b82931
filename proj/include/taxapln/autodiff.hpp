#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "taxapln/random.hpp"

/// Matrix-valued reverse-mode differentiation.
///
/// Every node on a Tape holds a dense double matrix. Rows are batch samples
/// throughout the model code, so most ops act row-wise and the usual dense
/// layer is `x * W + b` with b broadcast over rows. Nodes are appended in
/// evaluation order, which makes the tape topologically sorted; backward()
/// walks it once in reverse.
namespace taxapln::ad {

using Matrix = Eigen::MatrixXd;

/// Trainable array with its accumulated gradient.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    Parameter() = default;
    Parameter(std::string name_, Matrix init) : name(std::move(name_)), value(std::move(init)) {
        grad = Matrix::Zero(value.rows(), value.cols());
    }
    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

using ParameterRefs = std::vector<Parameter*>;

class Tape;

/// Handle to a node of a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    Tape* tape() const { return tape_; }
    std::size_t index() const { return index_; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}
    Tape* tape_ = nullptr;
    std::size_t index_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Matrix& grad_out, const Matrix& out_value)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value);
    /// Free leaf that collects a gradient (used by tests and gradient checks).
    Var variable(Matrix value);
    /// Leaf bound to a parameter; backward() adds into `p.grad`.
    Var parameter(Parameter& p);

    /// Accumulates d(out)/d(node) for every node reachable from `out` and
    /// adds parameter gradients into their Parameter::grad. `out` must be 1x1.
    void backward(const Var& out);

    const Matrix& value(std::size_t node) const { return nodes_[node].value; }
    /// Gradient of the last backward() output w.r.t. `v`; zeros if unreached.
    Matrix grad(const Var& v) const;
    std::size_t size() const { return nodes_.size(); }

    /// Negative-control hook for gradient checks: when set, the tanh and exp
    /// backward rules are deliberately wrong.
    void set_corrupt_backward(bool on) { corrupt_backward_ = on; }
    bool corrupt_backward() const { return corrupt_backward_; }

    // Op-author interface.
    Var record(Matrix value, std::vector<std::size_t> parents, BackwardFn backward);
    bool requires_grad(std::size_t node) const { return nodes_[node].requires_grad; }
    template <typename Derived>
    void accumulate(std::size_t node, const Eigen::DenseBase<Derived>& g) {
        Node& n = nodes_[node];
        if (!n.requires_grad) return;
        if (!n.has_grad) {
            n.grad = g.derived().matrix();
            n.has_grad = true;
        } else {
            n.grad += g.derived().matrix();
        }
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        bool has_grad = false;
        BackwardFn backward;
        Parameter* param = nullptr;
    };
    std::vector<Node> nodes_;
    bool corrupt_backward_ = false;
};

// ---------------------------------------------------------------------------
// Primitives. Binary elementwise ops broadcast a 1 x c row or a 1 x 1
// scalar operand across the other operand.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

Var matmul(const Var& a, const Var& b);
/// Matrix times column vector; shorthand for matmul with a k x 1 operand.
Var matvec(const Var& m, const Var& v);

Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);

Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var relu(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
/// Identity inside [lo, hi], constant (zero gradient) outside.
Var clamp(const Var& a, double lo, double hi);

Var sum(const Var& a);
Var mean(const Var& a);
/// r x c -> r x 1.
Var row_sum(const Var& a);

/// Row-wise softmax with max subtraction.
Var softmax(const Var& a);
/// Row-wise log-softmax within column groups: group[j] names the group of
/// column j. Columns of a group need not be contiguous.
Var segment_log_softmax(const Var& a, const std::vector<int>& group);

/// Lower-triangular factor from an unconstrained square matrix: strict lower
/// part copied, diagonal exponentiated, upper part zero.
Var lower_factor(const Var& raw);
/// Solves L w_i = d_i for every row d_i of D, i.e. returns D L^{-T}.
/// L must be lower triangular (as produced by lower_factor).
Var tri_solve_rows(const Var& lower, const Var& rhs);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator-(const Var& a, double s) { return add_scalar(a, -s); }

// ---------------------------------------------------------------------------
// Optimisation

void zero_grad(const ParameterRefs& params);
double global_grad_norm(const ParameterRefs& params);
/// Rescales all gradients by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the norm before clipping.
double clip_gradients(const ParameterRefs& params, double max_norm);

struct AdamState {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long step = 0;
    std::vector<Matrix> first_moment;
    std::vector<Matrix> second_moment;
};

/// Bias-corrected Adam update from the gradients stored in `params`.
void adam_step(const ParameterRefs& params, AdamState& state);

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::string worst_parameter;
    Eigen::Index worst_row = 0, worst_col = 0;
    double analytic = 0.0, numeric = 0.0;
    int probes = 0;
};

using ScalarBuilder = std::function<Var(Tape&)>;

/// Central finite differences on `probes` randomly chosen parameter
/// coordinates, compared against backward(). Relative error is
/// |a - n| / (max(|a|, |n|) + 1e-8 max(1, |f|)) with f the objective at
/// the current point. `corrupt` switches the tape's
/// negative-control backward rules on.
GradCheckResult finite_difference_check(const ScalarBuilder& build, const ParameterRefs& params, int probes,
                                        double step, Rng& rng, bool corrupt = false);

}  // namespace taxapln::ad
