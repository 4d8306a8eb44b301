#pragma once

#include "snows/recon.hpp"

namespace snows {

enum class HvpMode { exact, finite_diff };

struct CgConfig {
    double tol = 1e-3;       // absolute residual 2-norm threshold
    int max_iters = 100;
    double lambda = 1e-4;    // Levenberg-Marquardt damping
    double eps_fd = 0.0;     // finite-difference step; 0 selects exact mode
    bool relative_tol = false;  // interpret tol as a fraction of ||g||
};

template <typename S>
struct CgReport {
    Tensor<S> delta;  // active-set solution
    int iters_used = 0;
    double final_residual_norm = 0.0;
    int hvp_calls = 0;
    std::vector<double> residual_history;  // ||r|| after each iteration
};

template <typename S>
S dot(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "dot");
    S acc = S(0);
    for (index_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
    return acc;
}

namespace detail {

template <typename S>
double default_eps_fd() {
    return std::is_same_v<S, float> ? 1e-4 : 1e-7;
}

template <typename S>
void check_finite(const Tensor<S>& t, const std::string& what) {
    for (index_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(static_cast<double>(t[i])))
            throw NumericError(what + ": non-finite value at flat index " + std::to_string(i));
}

}  // namespace detail

// Hessian-vector product on the active set.
//
// exact mode: the gradient computation is re-run in dual-number arithmetic
// with the weight tangent set to the direction, which evaluates the
// directional derivative of the gradient d/de grad(W + e*dir) at e = 0
// exactly (one extra gradient-cost pass, no truncation error).
//
// finite_diff mode: forward difference [grad(W + e*dir) - grad(W)] / e with
// e = eps_fd / ||v||, the paper-literal path. Costs one gradient evaluation
// when the base gradient is supplied, two otherwise.
template <typename S>
Tensor<S> hvp(const ReconstructionTask<S>& t, const Tensor<S>& w_hat, const Tensor<S>& v, HvpMode mode,
              double eps_fd = 0.0, const Tensor<S>* base_grad = nullptr) {
    if (v.numel() != t.active_count())
        throw DimensionError("hvp direction has " + std::to_string(v.numel()) + " entries, active set has " +
                             std::to_string(t.active_count()));
    const double vnorm = norm2(v);
    if (vnorm == 0.0) return Tensor<S>(Shape{t.active_count()});
    detail::check_task_consistent(t, w_hat);

    Tensor<S> result;
    if (mode == HvpMode::exact) {
        Tensor<Dual<S>> w_dual(Shape{w_hat.numel()});
        for (index_t i = 0; i < w_hat.numel(); ++i) w_dual[i] = Dual<S>(w_hat[i]);
        for (std::size_t i = 0; i < t.active.size(); ++i)
            w_dual[t.active[i]].t = v[static_cast<index_t>(i)];
        Tensor<Dual<S>> g = grad_active_core(t, w_dual);
        result = tangent_part(g);
    } else {
        if (eps_fd <= 0.0) eps_fd = detail::default_eps_fd<S>();
        const S eps = static_cast<S>(eps_fd / vnorm);
        Tensor<S> w_pert = w_hat;
        for (std::size_t i = 0; i < t.active.size(); ++i)
            w_pert[t.active[i]] += eps * v[static_cast<index_t>(i)];
        Tensor<S> g1 = grad_active(t, w_pert);
        Tensor<S> g0 = base_grad ? *base_grad : grad_active(t, w_hat);
        result = Tensor<S>(g1.shape());
        for (index_t i = 0; i < g1.numel(); ++i) result[i] = (g1[i] - g0[i]) / eps;
    }
    detail::check_finite(result, "hvp (||v|| = " + std::to_string(vnorm) + ")");
    return result;
}

// Conjugate gradient on (B + lambda I) x = -g where B is presented as an
// operator. The loop is the literal CG recursion: delta <- 0, r <- -g,
// p <- r, eta = r'r / p'B(p), with the tolerance tested before each
// iteration so a zero gradient exits immediately.
template <typename S, typename ApplyH>
CgReport<S> cg_solve_operator(ApplyH&& apply_h, const Tensor<S>& g, const CgConfig& cfg) {
    if (cfg.tol <= 0 || cfg.max_iters < 1 || cfg.lambda < 0) throw ValueError("invalid CG config");
    CgReport<S> rep;
    rep.delta = Tensor<S>(g.shape());
    Tensor<S> r = scale(g, -1.0);
    Tensor<S> p = r;
    double rr = static_cast<double>(dot(r, r));
    const double threshold = cfg.relative_tol ? cfg.tol * norm2(g) : cfg.tol;
    rep.final_residual_norm = std::sqrt(rr);

    while (rep.final_residual_norm >= threshold && rep.iters_used < cfg.max_iters) {
        Tensor<S> bp = apply_h(p);
        ++rep.hvp_calls;
        axpy(static_cast<S>(cfg.lambda), p, bp);
        const double pbp = static_cast<double>(dot(p, bp));
        if (pbp <= 0.0)
            throw NumericError("CG curvature failure: p'Bp = " + std::to_string(pbp) +
                               " <= 0 despite damping lambda = " + std::to_string(cfg.lambda));
        const S eta = static_cast<S>(rr / pbp);
        axpy(eta, p, rep.delta);
        axpy(-eta, bp, r);
        const double rr_new = static_cast<double>(dot(r, r));
        ++rep.iters_used;
        rep.final_residual_norm = std::sqrt(rr_new);
        rep.residual_history.push_back(rep.final_residual_norm);
        if (rep.final_residual_norm < threshold) break;
        const S gamma = static_cast<S>(rr_new / rr);
        Tensor<S> p_next = r;
        axpy(gamma, p, p_next);
        p = std::move(p_next);
        rr = rr_new;
    }
    return rep;
}

// Algorithm-level solve of the damped reduced system
// (H_Z + lambda I) delta = -g for one task. `g` must be the active-set
// gradient at w_hat; in finite-difference mode it doubles as the HVP base
// point, so each CG iteration costs exactly one gradient evaluation.
template <typename S>
CgReport<S> cg_solve(const ReconstructionTask<S>& t, const Tensor<S>& w_hat, const Tensor<S>& g,
                     const CgConfig& cfg) {
    const HvpMode mode = cfg.eps_fd == 0.0 ? HvpMode::exact : HvpMode::finite_diff;
    return cg_solve_operator(
        [&](const Tensor<S>& p) { return hvp(t, w_hat, p, mode, cfg.eps_fd, &g); }, g, cfg);
}

// Scatter an active-set vector into the task's full logical coordinates;
// masked entries stay exactly zero.
template <typename S>
Tensor<S> task_scatter(const ReconstructionTask<S>& t, const Tensor<S>& v) {
    return scatter_active(v, t.active, t.logical_numel());
}

template <typename S>
Tensor<S> task_gather(const ReconstructionTask<S>& t, const Tensor<S>& full) {
    if (full.numel() != t.logical_numel())
        throw DimensionError("gather: full vector has " + std::to_string(full.numel()) + " entries, expected " +
                             std::to_string(t.logical_numel()));
    return gather_active(full, t.active);
}

}  // namespace snows
