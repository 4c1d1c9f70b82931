#include "taxapln/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "taxapln/error.hpp"

namespace taxapln::ad {

const Matrix& Var::value() const { return tape_->value(index_); }

Var Tape::constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, false, false, {}, nullptr});
    return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, true, false, {}, nullptr});
    return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
    nodes_.push_back(Node{p.value, {}, true, false, {}, &p});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::vector<std::size_t> parents, BackwardFn backward) {
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_[p].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(backward) : BackwardFn{}, nullptr});
    return Var(this, nodes_.size() - 1);
}

void Tape::backward(const Var& out) {
    if (out.tape() != this) throw NumericError("ForeignVar", "backward called with a node from another tape");
    const Node& root = nodes_[out.index()];
    if (root.value.rows() != 1 || root.value.cols() != 1)
        throw NumericError("NonScalarOutput", "backward needs a 1x1 output, got " + std::to_string(root.value.rows()) +
                                                  "x" + std::to_string(root.value.cols()));
    for (auto& n : nodes_) {
        n.has_grad = false;
        n.grad.resize(0, 0);
    }
    accumulate(out.index(), Matrix::Ones(1, 1));
    for (std::size_t i = out.index() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.has_grad) continue;
        if (n.backward) n.backward(*this, n.grad, n.value);
        if (n.param) n.param->grad += n.grad;
    }
}

Matrix Tape::grad(const Var& v) const {
    const Node& n = nodes_[v.index()];
    if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

// ---------------------------------------------------------------------------

namespace {

Tape& tape_of(const Var& a) {
    if (!a.tape()) throw NumericError("UnboundVar", "operation on a default-constructed Var");
    return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
    if (a.tape() != b.tape()) throw NumericError("ForeignVar", "operands live on different tapes");
    return tape_of(a);
}

// Output shape of a broadcasting binary op.
std::pair<Eigen::Index, Eigen::Index> broadcast_shape(const Matrix& a, const Matrix& b) {
    const Eigen::Index r = std::max(a.rows(), b.rows());
    const Eigen::Index c = std::max(a.cols(), b.cols());
    auto ok = [&](const Matrix& m) { return (m.rows() == r || m.rows() == 1) && (m.cols() == c || m.cols() == 1); };
    if (!ok(a) || !ok(b))
        throw NumericError("ShapeMismatch", "cannot broadcast " + std::to_string(a.rows()) + "x" +
                                                std::to_string(a.cols()) + " with " + std::to_string(b.rows()) + "x" +
                                                std::to_string(b.cols()));
    return {r, c};
}

Matrix expand(const Matrix& m, Eigen::Index r, Eigen::Index c) {
    if (m.rows() == r && m.cols() == c) return m;
    return m.replicate(r / m.rows(), c / m.cols());
}

Matrix reduce_to(const Matrix& g, Eigen::Index r, Eigen::Index c) {
    if (g.rows() == r && g.cols() == c) return g;
    if (r == 1 && c == 1) return Matrix::Constant(1, 1, g.sum());
    if (r == 1) return g.colwise().sum();
    return g.rowwise().sum();
}

}  // namespace

Var add(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    const auto [r, c] = broadcast_shape(a.value(), b.value());
    Matrix out = expand(a.value(), r, c) + expand(b.value(), r, c);
    const auto ia = a.index(), ib = b.index();
    return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Matrix& g, const Matrix& y) {
        t.accumulate(ia, reduce_to(g, t.value(ia).rows(), t.value(ia).cols()));
        t.accumulate(ib, reduce_to(g, t.value(ib).rows(), t.value(ib).cols()));
    });
}

Var sub(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    const auto [r, c] = broadcast_shape(a.value(), b.value());
    Matrix out = expand(a.value(), r, c) - expand(b.value(), r, c);
    const auto ia = a.index(), ib = b.index();
    return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Matrix& g, const Matrix& y) {
        t.accumulate(ia, reduce_to(g, t.value(ia).rows(), t.value(ia).cols()));
        t.accumulate(ib, reduce_to(-g, t.value(ib).rows(), t.value(ib).cols()));
    });
}

Var mul(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    const auto [r, c] = broadcast_shape(a.value(), b.value());
    Matrix out = expand(a.value(), r, c).cwiseProduct(expand(b.value(), r, c));
    const auto ia = a.index(), ib = b.index();
    return t.record(std::move(out), {ia, ib}, [ia, ib, r = r, c = c](Tape& t, const Matrix& g, const Matrix& y) {
        const Matrix& av = t.value(ia);
        const Matrix& bv = t.value(ib);
        if (t.requires_grad(ia)) t.accumulate(ia, reduce_to(g.cwiseProduct(expand(bv, r, c)), av.rows(), av.cols()));
        if (t.requires_grad(ib)) t.accumulate(ib, reduce_to(g.cwiseProduct(expand(av, r, c)), bv.rows(), bv.cols()));
    });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    return t.record(a.value() * s, {ia}, [ia, s](Tape& t, const Matrix& g, const Matrix& y) { t.accumulate(ia, g * s); });
}

Var add_scalar(const Var& a, double s) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    return t.record(a.value().array() + s, {ia}, [ia](Tape& t, const Matrix& g, const Matrix& y) { t.accumulate(ia, g); });
}

Var matmul(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    if (a.cols() != b.rows())
        throw NumericError("ShapeMismatch", "matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                                " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    const auto ia = a.index(), ib = b.index();
    return t.record(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, const Matrix& g, const Matrix& y) {
        if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
        if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
    });
}

Var matvec(const Var& m, const Var& v) {
    if (v.cols() != 1) throw NumericError("ShapeMismatch", "matvec expects a column vector");
    return matmul(m, v);
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw NumericError("ShapeMismatch", "concat of nothing");
    Tape& t = tape_of(parts.front());
    const Eigen::Index r = parts.front().rows();
    Eigen::Index c = 0;
    std::vector<std::size_t> ids;
    std::vector<Eigen::Index> widths;
    for (const auto& p : parts) {
        if (p.tape() != &t) throw NumericError("ForeignVar", "concat operands live on different tapes");
        if (p.rows() != r) throw NumericError("ShapeMismatch", "concat: row counts differ");
        ids.push_back(p.index());
        widths.push_back(p.cols());
        c += p.cols();
    }
    Matrix out(r, c);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return t.record(std::move(out), ids, [ids, widths](Tape& t, const Matrix& g, const Matrix& y) {
        Eigen::Index at = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (t.requires_grad(ids[k])) t.accumulate(ids[k], g.middleCols(at, widths[k]));
            at += widths[k];
        }
    });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
    Tape& t = tape_of(a);
    if (start < 0 || count < 0 || start + count > a.cols())
        throw NumericError("ShapeMismatch", "slice out of range");
    const auto ia = a.index();
    return t.record(a.value().middleCols(start, count), {ia}, [ia, start, count](Tape& t, const Matrix& g, const Matrix& y) {
        Matrix full = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
        full.middleCols(start, count) = g;
        t.accumulate(ia, full);
    });
}

Var exp(const Var& a) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    const bool corrupt = t.corrupt_backward();
    return t.record(a.value().array().exp().matrix(), {ia}, [ia, corrupt](Tape& t, const Matrix& g, const Matrix& y) {
        Matrix d = g.cwiseProduct(y);
        if (corrupt) d *= 1.1;
        t.accumulate(ia, d);
    });
}

Var log(const Var& a) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    return t.record(a.value().array().log().matrix(), {ia},
                    [ia](Tape& t, const Matrix& g, const Matrix& y) { t.accumulate(ia, g.cwiseQuotient(t.value(ia))); });
}

Var tanh(const Var& a) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    Matrix y = a.value().array().tanh().matrix();
    const bool corrupt = t.corrupt_backward();
    return t.record(std::move(y), {ia}, [ia, corrupt](Tape& t, const Matrix& g, const Matrix& y) {
        Matrix d = g.array() * (1.0 - y.array().square());
        if (corrupt) d = g.array() * (1.0 - y.array());
        t.accumulate(ia, d);
    });
}

Var sigmoid(const Var& a) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    Matrix y = a.value().unaryExpr([](double x) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    return t.record(std::move(y), {ia}, [ia](Tape& t, const Matrix& g, const Matrix& y) {
        t.accumulate(ia, g.array() * y.array() * (1.0 - y.array()));
    });
}

Var softplus(const Var& a) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    Matrix y = a.value().unaryExpr([](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
    return t.record(std::move(y), {ia}, [ia](Tape& t, const Matrix& g, const Matrix& y) {
        const Matrix s = t.value(ia).unaryExpr([](double x) {
            return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        });
        t.accumulate(ia, g.cwiseProduct(s));
    });
}

Var relu(const Var& a) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    return t.record(a.value().cwiseMax(0.0), {ia}, [ia](Tape& t, const Matrix& g, const Matrix& y) {
        t.accumulate(ia, (t.value(ia).array() > 0.0).select(g, 0.0));
    });
}

Var square(const Var& a) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    return t.record(a.value().array().square().matrix(), {ia},
                    [ia](Tape& t, const Matrix& g, const Matrix& y) { t.accumulate(ia, 2.0 * g.cwiseProduct(t.value(ia))); });
}

Var sqrt(const Var& a) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    Matrix y = a.value().array().sqrt().matrix();
    return t.record(std::move(y), {ia}, [ia](Tape& t, const Matrix& g, const Matrix& y) {
        t.accumulate(ia, g.array() / (2.0 * y.array()));
    });
}

Var clamp(const Var& a, double lo, double hi) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    return t.record(a.value().cwiseMax(lo).cwiseMin(hi), {ia}, [ia, lo, hi](Tape& t, const Matrix& g, const Matrix& y) {
        const auto& x = t.value(ia).array();
        t.accumulate(ia, (x >= lo && x <= hi).select(g, 0.0));
    });
}

Var sum(const Var& a) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    return t.record(Matrix::Constant(1, 1, a.value().sum()), {ia}, [ia](Tape& t, const Matrix& g, const Matrix& y) {
        t.accumulate(ia, Matrix::Constant(t.value(ia).rows(), t.value(ia).cols(), g(0, 0)));
    });
}

Var mean(const Var& a) {
    const double n = static_cast<double>(a.value().size());
    if (n == 0) throw NumericError("ShapeMismatch", "mean of an empty matrix");
    return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    return t.record(a.value().rowwise().sum(), {ia}, [ia](Tape& t, const Matrix& g, const Matrix& y) {
        t.accumulate(ia, g.replicate(1, t.value(ia).cols()));
    });
}

Var softmax(const Var& a) {
    Tape& t = tape_of(a);
    const auto ia = a.index();
    Matrix y = a.value();
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        y.row(i).array() -= y.row(i).maxCoeff();
        y.row(i) = y.row(i).array().exp();
        y.row(i) /= y.row(i).sum();
    }
    return t.record(std::move(y), {ia}, [ia](Tape& t, const Matrix& g, const Matrix& y) {
        const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
        Matrix d = g;
        d.colwise() -= dot;
        t.accumulate(ia, d.cwiseProduct(y));
    });
}

Var segment_log_softmax(const Var& a, const std::vector<int>& group) {
    Tape& t = tape_of(a);
    if (static_cast<Eigen::Index>(group.size()) != a.cols())
        throw NumericError("ShapeMismatch", "segment_log_softmax: group vector length differs from column count");
    const int groups = group.empty() ? 0 : *std::max_element(group.begin(), group.end()) + 1;
    const Matrix& x = a.value();
    const Eigen::Index n = x.rows();
    Matrix gmax = Matrix::Constant(n, groups, -std::numeric_limits<double>::infinity());
    for (Eigen::Index j = 0; j < x.cols(); ++j) gmax.col(group[j]) = gmax.col(group[j]).cwiseMax(x.col(j));
    Matrix gsum = Matrix::Zero(n, groups);
    for (Eigen::Index j = 0; j < x.cols(); ++j)
        gsum.col(group[j]).array() += (x.col(j) - gmax.col(group[j])).array().exp();
    Matrix out(n, x.cols());
    Matrix prob(n, x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        out.col(j) = x.col(j) - gmax.col(group[j]) - gsum.col(group[j]).array().log().matrix();
        prob.col(j) = out.col(j).array().exp();
    }
    const auto ia = a.index();
    return t.record(std::move(out), {ia}, [ia, prob, group, groups](Tape& t, const Matrix& g, const Matrix& y) {
        Matrix gsum = Matrix::Zero(g.rows(), groups);
        for (Eigen::Index j = 0; j < g.cols(); ++j) gsum.col(group[j]) += g.col(j);
        Matrix d = g;
        for (Eigen::Index j = 0; j < g.cols(); ++j) d.col(j) -= prob.col(j).cwiseProduct(gsum.col(group[j]));
        t.accumulate(ia, d);
    });
}

Var lower_factor(const Var& raw) {
    Tape& t = tape_of(raw);
    if (raw.rows() != raw.cols()) throw NumericError("ShapeMismatch", "lower_factor needs a square matrix");
    Matrix out = raw.value().triangularView<Eigen::StrictlyLower>();
    out.diagonal() = raw.value().diagonal().array().exp();
    const auto ir = raw.index();
    Eigen::VectorXd diag = out.diagonal();
    return t.record(std::move(out), {ir}, [ir, diag](Tape& t, const Matrix& g, const Matrix& y) {
        Matrix d = g.triangularView<Eigen::StrictlyLower>();
        d.diagonal() = g.diagonal().cwiseProduct(diag);
        t.accumulate(ir, d);
    });
}

Var tri_solve_rows(const Var& lower, const Var& rhs) {
    Tape& t = tape_of(lower, rhs);
    if (lower.rows() != lower.cols() || rhs.cols() != lower.rows())
        throw NumericError("ShapeMismatch", "tri_solve_rows: incompatible shapes");
    const Matrix& L = lower.value();
    Matrix w = L.triangularView<Eigen::Lower>().solve(rhs.value().transpose()).transpose();
    const auto il = lower.index(), id = rhs.index();
    return t.record(w, {il, id}, [il, id, w](Tape& t, const Matrix& g, const Matrix& y) {
        const Matrix& L = t.value(il);
        const Matrix h = L.triangularView<Eigen::Lower>().transpose().solve(g.transpose()).transpose();
        t.accumulate(id, h);
        if (t.requires_grad(il)) {
            Matrix dl = -(h.transpose() * w);
            t.accumulate(il, Matrix(dl.triangularView<Eigen::Lower>()));
        }
    });
}

// ---------------------------------------------------------------------------

void zero_grad(const ParameterRefs& params) {
    for (auto* p : params) p->zero_grad();
}

double global_grad_norm(const ParameterRefs& params) {
    double s = 0.0;
    for (auto* p : params) s += p->grad.squaredNorm();
    return std::sqrt(s);
}

double clip_gradients(const ParameterRefs& params, double max_norm) {
    if (!(max_norm > 0.0)) throw ConfigError("InvalidClip", "max_norm must be positive");
    const double norm = global_grad_norm(params);
    if (norm > max_norm) {
        const double f = max_norm / norm;
        for (auto* p : params) p->grad *= f;
    }
    return norm;
}

void adam_step(const ParameterRefs& params, AdamState& state) {
    if (state.first_moment.size() != params.size()) {
        state.first_moment.clear();
        state.second_moment.clear();
        for (auto* p : params) {
            state.first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
            state.second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        }
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        Matrix& m = state.first_moment[k];
        Matrix& v = state.second_moment[k];
        m = state.beta1 * m + (1.0 - state.beta1) * p.grad;
        v = state.beta2 * v + (1.0 - state.beta2) * p.grad.cwiseAbs2();
        p.value.array() -= state.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + state.epsilon);
    }
}

GradCheckResult finite_difference_check(const ScalarBuilder& build, const ParameterRefs& params, int probes,
                                        double step, Rng& rng, bool corrupt) {
    if (!(step > 0.0)) throw ConfigError("InvalidStep", "finite-difference step must be positive");
    GradCheckResult result;
    std::vector<Eigen::Index> offsets{0};
    for (auto* p : params) offsets.push_back(offsets.back() + p->value.size());
    if (offsets.back() == 0) return result;

    zero_grad(params);
    double floor = 1e-8;
    {
        Tape tape;
        tape.set_corrupt_backward(corrupt);
        Var out = build(tape);
        // scaling the objective must not change the verdict
        floor *= std::max(1.0, std::abs(out.value()(0, 0)));
        tape.backward(out);
    }
    std::vector<Matrix> analytic;
    for (auto* p : params) analytic.push_back(p->grad);

    auto evaluate = [&]() {
        Tape tape;
        return build(tape).value()(0, 0);
    };

    std::uniform_int_distribution<Eigen::Index> pick(0, offsets.back() - 1);
    for (int probe = 0; probe < probes; ++probe) {
        const Eigen::Index flat = pick(rng);
        const auto k = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
        Parameter& p = *params[k];
        const Eigen::Index local = flat - offsets[k];
        const Eigen::Index r = local % p.value.rows();
        const Eigen::Index c = local / p.value.rows();
        const double saved = p.value(r, c);
        p.value(r, c) = saved + step;
        const double up = evaluate();
        p.value(r, c) = saved - step;
        const double down = evaluate();
        p.value(r, c) = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double a = analytic[k](r, c);
        const double rel = std::abs(a - numeric) / (std::max(std::abs(a), std::abs(numeric)) + floor);
        ++result.probes;
        if (rel >= result.max_relative_error) {
            result.max_relative_error = rel;
            result.worst_parameter = p.name;
            result.worst_row = r;
            result.worst_col = c;
            result.analytic = a;
            result.numeric = numeric;
        }
    }
    return result;
}

}  // namespace taxapln::ad
