#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ndvq/common.hpp"

// Reverse-mode automatic differentiation on a tape arena, sized for the
// loss graphs of this codec: scalar nodes, at most two parents each, with
// the local partials frozen at record time. Backward is a single sweep in
// reverse creation order, which is a valid reverse-topological order
// because every node is created after its parents.

namespace ndvq::ad {

using Ref = std::uint32_t;
inline constexpr Ref kParamBit = 0x80000000u;
inline constexpr Ref kNoParent = 0xffffffffu;

inline bool is_param(Ref r) { return (r & kParamBit) != 0 && r != kNoParent; }
inline std::uint32_t ref_index(Ref r) { return r & ~kParamBit; }

struct Node {
    double value = 0.0;
    double adjoint = 0.0;  // zero until backward() visits this node
    Ref a = kNoParent;
    Ref b = kNoParent;
    double da = 0.0;
    double db = 0.0;
};

class Tape;

/// Handle to a recorded scalar. Cheap to copy; the cached value makes
/// forward arithmetic independent of tape lookups.
struct Var {
    Tape* tape = nullptr;
    Ref ref = kNoParent;
    double val = 0.0;

    double value() const { return val; }
    double adjoint() const;
};

class Tape {
public:
    Tape() = default;

    /// Attach an external parameter block. Nodes may then reference
    /// parameters directly; backward accumulates into `grads`.
    void bind_params(std::span<const double> values, std::span<double> grads) {
        if (values.size() != grads.size())
            throw std::invalid_argument("tape: parameter/gradient length mismatch");
        param_values_ = values;
        param_grads_ = grads;
    }

    std::size_t size() const { return nodes_.size(); }

    /// Drop all nodes, keeping capacity for the next step.
    void clear() {
        nodes_.clear();
        swept_ = false;
    }

    void reserve(std::size_t n) { nodes_.reserve(n); }

    /// Zero every node adjoint (parameter gradients are owned by the caller).
    void reset_adjoints() {
        for (Node& n : nodes_) n.adjoint = 0.0;
        swept_ = false;
    }

    Var input(double value) {
        return wrap(push(value, kNoParent, kNoParent, 0.0, 0.0));
    }

    Var param(std::uint32_t index) {
        assert(index < param_values_.size());
        return Var{this, kParamBit | index, param_values_[index]};
    }

    const Node& node(Ref r) const { return nodes_[ref_index(r)]; }

    double adjoint_of(const Var& v) const {
        if (is_param(v.ref)) return param_grads_[ref_index(v.ref)];
        return nodes_[ref_index(v.ref)].adjoint;
    }

    /// Reverse sweep seeding d(output)/d(output) = 1. Fan-out gradients
    /// accumulate within the sweep; a second sweep over the same nodes
    /// would double-count, so reset_adjoints() is required in between.
    void backward(const Var& output) {
        if (output.tape != this) throw std::invalid_argument("backward: variable from another tape");
        if (swept_)
            throw std::invalid_argument("backward: adjoints already populated; call reset_adjoints() first");
        swept_ = true;
        if (is_param(output.ref)) {
            param_grads_[ref_index(output.ref)] += 1.0;
            return;
        }
        const std::uint32_t top = ref_index(output.ref);
        nodes_[top].adjoint += 1.0;
        for (std::uint32_t i = top + 1; i-- > 0;) {
            const Node& n = nodes_[i];
            const double g = n.adjoint;
            if (g == 0.0) continue;
            if (n.a != kNoParent) accumulate(n.a, n.da * g);
            if (n.b != kNoParent) accumulate(n.b, n.db * g);
        }
    }

    // record helpers used by operators
    Var unary(double value, const Var& a, double da) {
        return wrap(push(value, a.ref, kNoParent, da, 0.0));
    }
    Var binary(double value, const Var& a, const Var& b, double da, double db) {
        assert(a.tape == b.tape);
        return wrap(push(value, a.ref, b.ref, da, db));
    }

private:
    Ref push(double value, Ref a, Ref b, double da, double db) {
        nodes_.push_back(Node{value, 0.0, a, b, da, db});
        return static_cast<Ref>(nodes_.size() - 1);
    }

    Var wrap(Ref r) { return Var{this, r, nodes_[r].value}; }

    void accumulate(Ref r, double g) {
        if (is_param(r))
            param_grads_[ref_index(r)] += g;
        else
            nodes_[ref_index(r)].adjoint += g;
    }

    std::vector<Node> nodes_;
    std::span<const double> param_values_;
    std::span<double> param_grads_;
    bool swept_ = false;
};

inline double Var::adjoint() const { return tape->adjoint_of(*this); }

// ---- recorded operations ----

inline Var operator+(const Var& a, const Var& b) { return a.tape->binary(a.val + b.val, a, b, 1.0, 1.0); }
inline Var operator+(const Var& a, double c) { return a.tape->unary(a.val + c, a, 1.0); }
inline Var operator+(double c, const Var& a) { return a + c; }

inline Var operator-(const Var& a, const Var& b) { return a.tape->binary(a.val - b.val, a, b, 1.0, -1.0); }
inline Var operator-(const Var& a, double c) { return a.tape->unary(a.val - c, a, 1.0); }
inline Var operator-(double c, const Var& a) { return a.tape->unary(c - a.val, a, -1.0); }
inline Var operator-(const Var& a) { return a.tape->unary(-a.val, a, -1.0); }

inline Var operator*(const Var& a, const Var& b) { return a.tape->binary(a.val * b.val, a, b, b.val, a.val); }
inline Var operator*(const Var& a, double c) { return a.tape->unary(a.val * c, a, c); }
inline Var operator*(double c, const Var& a) { return a * c; }

inline Var operator/(const Var& a, const Var& b) {
    if (b.val == 0.0) throw DomainError("autodiff: division by zero");
    const double inv = 1.0 / b.val;
    return a.tape->binary(a.val * inv, a, b, inv, -a.val * inv * inv);
}
inline Var operator/(const Var& a, double c) {
    if (c == 0.0) throw DomainError("autodiff: division by zero constant");
    return a.tape->unary(a.val / c, a, 1.0 / c);
}
inline Var operator/(double c, const Var& a) {
    if (a.val == 0.0) throw DomainError("autodiff: division by zero");
    return a.tape->unary(c / a.val, a, -c / (a.val * a.val));
}

inline Var& operator+=(Var& a, const Var& b) { a = a + b; return a; }
inline Var& operator-=(Var& a, const Var& b) { a = a - b; return a; }
inline Var& operator*=(Var& a, const Var& b) { a = a * b; return a; }

/// |x| with subgradient 0 at x = 0.
inline Var abs(const Var& a) {
    const double s = a.val > 0.0 ? 1.0 : (a.val < 0.0 ? -1.0 : 0.0);
    return a.tape->unary(std::fabs(a.val), a, s);
}

inline Var square(const Var& a) { return a.tape->unary(a.val * a.val, a, 2.0 * a.val); }

/// sqrt(0) is recorded with partial 0 (subgradient at the boundary);
/// negative inputs are a domain error.
inline Var sqrt(const Var& a) {
    if (a.val < 0.0) throw DomainError("autodiff: sqrt of negative value " + std::to_string(a.val));
    const double r = std::sqrt(a.val);
    return a.tape->unary(r, a, a.val == 0.0 ? 0.0 : 0.5 / r);
}

inline Var log(const Var& a) {
    if (a.val <= 0.0) throw DomainError("autodiff: log of non-positive value " + std::to_string(a.val));
    return a.tape->unary(std::log(a.val), a, 1.0 / a.val);
}

inline Var exp(const Var& a) {
    const double e = std::exp(a.val);
    return a.tape->unary(e, a, e);
}

/// max(x, c) with partial 0 on ties.
inline Var vmax(const Var& a, double c) {
    return a.tape->unary(a.val > c ? a.val : c, a, a.val > c ? 1.0 : 0.0);
}

inline Var vmin(const Var& a, double c) {
    return a.tape->unary(a.val < c ? a.val : c, a, a.val < c ? 1.0 : 0.0);
}

// double passthroughs so generic kernels instantiate for both scalar types
inline double abs(double x) { return std::fabs(x); }
inline double square(double x) { return x * x; }
inline double sqrt(double x) { return std::sqrt(x); }
inline double log(double x) { return std::log(x); }
inline double exp(double x) { return std::exp(x); }
inline double vmax(double a, double c) { return a > c ? a : c; }
inline double vmin(double a, double c) { return a < c ? a : c; }

inline double value_of(double x) { return x; }
inline double value_of(const Var& v) { return v.val; }

inline double zero_like(double) { return 0.0; }
inline Var zero_like(const Var& v) { return v.tape->input(0.0); }

// ---- gradient checking ----

struct GradCheckError : std::runtime_error {
    explicit GradCheckError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A differentiable map for checking: given a tape and leaf variables for
/// the point, return the recorded scalar output.
using DiffFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// Non-finite function values abort the check naming the coordinate.
inline double grad_check(const DiffFn& f, std::span<const double> point, double step) {
    if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");

    const auto eval = [&](std::span<const double> x) {
        Tape tape;
        std::vector<Var> leaves;
        leaves.reserve(x.size());
        for (double xi : x) leaves.push_back(tape.input(xi));
        return f(tape, leaves).val;
    };

    // analytic gradient in one backward pass
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(point.size());
    for (double xi : point) leaves.push_back(tape.input(xi));
    const Var out = f(tape, leaves);
    if (!std::isfinite(out.val)) throw GradCheckError("grad_check: non-finite function value at base point");
    tape.backward(out);
    std::vector<double> analytic(point.size());
    for (std::size_t i = 0; i < point.size(); ++i) analytic[i] = leaves[i].adjoint();

    std::vector<double> x(point.begin(), point.end());
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + step;
        const double fp = eval(x);
        x[i] = keep - step;
        const double fm = eval(x);
        x[i] = keep;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw GradCheckError("grad_check: non-finite function value at coordinate " + std::to_string(i));
        const double numeric = (fp - fm) / (2.0 * step);
        const double err = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(analytic[i]));
        if (err > worst) worst = err;
    }
    return worst;
}

// ---- Adam ----

struct AdamState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::uint64_t step_count = 0;

    explicit AdamState(std::size_t n = 0) : first_moment(n, 0.0), second_moment(n, 0.0) {}
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Standard Adam update with bias correction, in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                      double learning_rate, const AdamConfig& cfg = {}) {
    if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
        params.size() != state.second_moment.size())
        throw std::invalid_argument("adam_step: parameter/gradient/moment length mismatch");
    if (learning_rate <= 0.0) throw std::invalid_argument("adam_step: learning rate must be positive");

    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grads[i];
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grads[i] * grads[i];
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        params[i] -= learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
}

}  // namespace ndvq::ad
