#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>

#include "snows/newton.hpp"

// Independent brute-force references. Everything here runs in double
// precision and single-threaded, regardless of the production dtype, and
// stays off the production code paths it is used to check.

namespace snows::oracle {

using Task = ReconstructionTask<double>;

// Explicit active-set system (H, g) for desk-scale verification.
struct DenseSystem {
    Eigen::MatrixXd H;
    Eigen::VectorXd g;
};

inline Eigen::VectorXd to_eigen(const Tensor<double>& t) {
    return Eigen::Map<const Eigen::VectorXd>(t.data(), t.numel());
}

inline Tensor<double> from_eigen(const Eigen::VectorXd& v) {
    Tensor<double> t(Shape{static_cast<index_t>(v.size())});
    Eigen::Map<Eigen::VectorXd>(t.data(), v.size()) = v;
    return t;
}

// H assembled column-by-column from exact-mode Hessian-vector products on
// basis vectors.
inline Eigen::MatrixXd brute_hessian_hvp(const Task& t, const Tensor<double>& w_hat) {
    const index_t m = t.active_count();
    Eigen::MatrixXd H(m, m);
    Tensor<double> e(Shape{m});
    for (index_t j = 0; j < m; ++j) {
        e[j] = 1.0;
        H.col(j) = to_eigen(hvp(t, w_hat, e, HvpMode::exact));
        e[j] = 0.0;
    }
    return H;
}

namespace detail {

inline double loss_at_active(const Task& t, const Tensor<double>& w_hat, const Tensor<double>& delta_active) {
    Tensor<double> w = w_hat;
    axpy(1.0, task_scatter(t, delta_active), w);
    return loss(t, w);
}

}  // namespace detail

// H assembled from second-order central finite differences of the loss.
// Touches only loss evaluations, so it is independent of every gradient and
// HVP code path.
inline Eigen::MatrixXd brute_hessian_fd(const Task& t, const Tensor<double>& w_hat, double h = 1e-4) {
    const index_t m = t.active_count();
    Eigen::MatrixXd H(m, m);
    Tensor<double> d(Shape{m});
    const double l0 = loss(t, w_hat);
    for (index_t i = 0; i < m; ++i) {
        // diagonal: (L(+h) - 2 L(0) + L(-h)) / h^2
        d[i] = h;
        double lp = detail::loss_at_active(t, w_hat, d);
        d[i] = -h;
        double lm = detail::loss_at_active(t, w_hat, d);
        d[i] = 0.0;
        H(i, i) = (lp - 2.0 * l0 + lm) / (h * h);
        for (index_t j = i + 1; j < m; ++j) {
            d[i] = h;
            d[j] = h;
            double lpp = detail::loss_at_active(t, w_hat, d);
            d[j] = -h;
            double lpm = detail::loss_at_active(t, w_hat, d);
            d[i] = -h;
            d[j] = h;
            double lmp = detail::loss_at_active(t, w_hat, d);
            d[j] = -h;
            double lmm = detail::loss_at_active(t, w_hat, d);
            d[i] = 0.0;
            d[j] = 0.0;
            H(i, j) = H(j, i) = (lpp - lpm - lmp + lmm) / (4.0 * h * h);
        }
    }
    return H;
}

// Central finite differences of the loss over the active set; independent
// gradient reference.
inline Tensor<double> fd_grad_active(const Task& t, const Tensor<double>& w_hat, double h = 1e-5) {
    const index_t m = t.active_count();
    Tensor<double> g(Shape{m});
    Tensor<double> d(Shape{m});
    for (index_t i = 0; i < m; ++i) {
        d[i] = h;
        double lp = detail::loss_at_active(t, w_hat, d);
        d[i] = -h;
        double lm = detail::loss_at_active(t, w_hat, d);
        d[i] = 0.0;
        g[i] = (lp - lm) / (2.0 * h);
    }
    return g;
}

// Explicit active-set Hessian and gradient. H comes from exact HVP columns;
// callers cross-check against brute_hessian_fd where independence matters.
inline DenseSystem brute_hessian(const Task& t, const Tensor<double>& w_hat, index_t cap = 512) {
    if (t.active_count() > cap)
        throw ValueError("brute_hessian: active set " + std::to_string(t.active_count()) + " exceeds cap " +
                         std::to_string(cap));
    DenseSystem sys;
    sys.H = brute_hessian_hvp(t, w_hat);
    sys.g = to_eigen(grad_active(t, w_hat));
    return sys;
}

// delta = -(H + lambda I)^-1 g by dense Cholesky; errors on indefiniteness,
// reporting the smallest eigenvalue.
inline Tensor<double> direct_newton(const DenseSystem& sys, double lambda) {
    Eigen::MatrixXd A = sys.H + lambda * Eigen::MatrixXd::Identity(sys.H.rows(), sys.H.cols());
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A, Eigen::EigenvaluesOnly);
        throw NumericError("direct_newton: H + lambda I not positive definite (min eigenvalue " +
                           std::to_string(es.eigenvalues().minCoeff()) + ")");
    }
    return from_eigen(llt.solve(-sys.g));
}

// ---------------------------------------------------------------------------
// Closed-form K = 0 solution: per output unit, least squares on its active
// support via normal equations. Supports dense/attention_out (X as given)
// and conv2d (X via im2col). An optional ridge stabilizes singular systems.

inline Tensor<double> closed_form_k0(const Task& t, double ridge = 0.0) {
    if (t.sub.horizon != 0) throw ValueError("closed_form_k0 requires a K = 0 task");
    if (t.weight_names.size() != 1) throw ValueError("closed_form_k0 handles a single weight tensor");
    const OpSpec& op = t.graph->m.ops[static_cast<std::size_t>(t.sub.start)];

    Eigen::MatrixXd X;   // (rows, d_in_eff)
    Eigen::MatrixXd Y;   // (rows, outputs)
    const Mask& mask = t.masks[0];
    index_t d_eff = 0, n_out = 0;

    if (op.kind == OpKind::dense || op.kind == OpKind::attention_out) {
        d_eff = t.inputs.shape().back();
        n_out = op.out_features;
        const index_t rows = t.inputs.numel() / d_eff;
        X = Eigen::Map<const MatrixRM<double>>(t.inputs.data(), rows, d_eff).cast<double>();
        Y = Eigen::Map<const MatrixRM<double>>(t.targets[0].data(), rows, n_out).cast<double>();
        if (op.weight_names.size() == 2) {
            const Tensor<double>& b = t.graph->weight(op.weight_names[1]);
            for (index_t j = 0; j < n_out; ++j) Y.col(j).array() -= b[j];
        }
    } else if (op.kind == OpKind::conv2d) {
        const Tensor<double>& w = t.graph->weight(op.weight_names[0]);
        const index_t f = w.dim(0), c = w.dim(1);
        const int kh = op.kernel_h, kw = op.kernel_w;
        const index_t oh = (t.inputs.dim(2) + 2 * op.pad - kh) / op.stride + 1;
        const index_t ow = (t.inputs.dim(3) + 2 * op.pad - kw) / op.stride + 1;
        Tensor<double> col = snows::detail::im2col(t.inputs, kh, kw, op.stride, op.pad, oh, ow);
        d_eff = c * kh * kw;
        n_out = f;
        const index_t rows = col.dim(0);
        X = Eigen::Map<const MatrixRM<double>>(col.data(), rows, d_eff).cast<double>();
        Y.resize(rows, f);
        index_t r = 0;
        for (index_t n = 0; n < t.targets[0].dim(0); ++n)
            for (index_t y = 0; y < oh; ++y)
                for (index_t x = 0; x < ow; ++x, ++r)
                    for (index_t fi = 0; fi < f; ++fi) Y(r, fi) = t.targets[0](n, fi, y, x);
        if (op.weight_names.size() == 2) {
            const Tensor<double>& b = t.graph->weight(op.weight_names[1]);
            for (index_t j = 0; j < f; ++j) Y.col(j).array() -= b[j];
        }
    } else {
        throw ValueError("closed_form_k0: op kind " + std::string(op_kind_name(op.kind)) + " unsupported");
    }

    // Per output unit j, solve X_S' X_S w_S = X_S' y_j on the active support
    // S. For dense weights (d_in, d_out) the support of column j is read down
    // the mask column; for conv it is the flattened (c, kh, kw) mask row.
    Tensor<double> solution(Shape{t.logical_numel()});
    const Shape& ws = t.weight_shapes[0];
    auto mask_at = [&](index_t j, index_t p) -> bool {
        if (ws.size() == 2) return mask.pattern[static_cast<std::size_t>(p * ws[1] + j)];
        return mask.pattern[static_cast<std::size_t>(j * d_eff + p)];  // conv: filter-major rows
    };
    auto weight_flat = [&](index_t j, index_t p) -> index_t {
        if (ws.size() == 2) return p * ws[1] + j;
        return j * d_eff + p;
    };

    for (index_t j = 0; j < n_out; ++j) {
        std::vector<index_t> support;
        for (index_t p = 0; p < d_eff; ++p)
            if (mask_at(j, p)) support.push_back(p);
        if (support.empty()) continue;
        const index_t ms = static_cast<index_t>(support.size());
        Eigen::MatrixXd Xs(X.rows(), ms);
        for (index_t s = 0; s < ms; ++s) Xs.col(s) = X.col(support[static_cast<std::size_t>(s)]);
        Eigen::MatrixXd A = Xs.transpose() * Xs;
        A.diagonal().array() += ridge;
        Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
        if (!lu.isInvertible())
            throw NumericError("closed_form_k0: singular normal equations for output " + std::to_string(j) +
                               " (add explicit ridge)");
        Eigen::VectorXd w = lu.solve(Xs.transpose() * Y.col(j));
        for (index_t s = 0; s < ms; ++s) solution[weight_flat(j, support[static_cast<std::size_t>(s)])] = w(s);
    }
    return solution;
}

// ---------------------------------------------------------------------------
// Fisher-approximate Newton baseline: F = (1/N) sum_i grad_i grad_i' over
// per-sample gradients within the batch, delta = -(F + lambda I)^-1 grad.
// Explicit assembly up to `cap` active weights, matrix-free CG beyond.

inline std::vector<Tensor<double>> per_sample_grads(const Task& t, const Tensor<double>& w_hat) {
    std::vector<Tensor<double>> gs;
    gs.reserve(static_cast<std::size_t>(t.n_samples()));
    for (index_t i = 0; i < t.n_samples(); ++i) {
        Task one = batch_view(t, i, 1);
        gs.push_back(grad_active(one, w_hat));
    }
    return gs;
}

inline Tensor<double> fisher_apply(const std::vector<Tensor<double>>& gs, const Tensor<double>& v) {
    Tensor<double> out(v.shape());
    const double inv_n = 1.0 / static_cast<double>(gs.size());
    for (const auto& gi : gs) {
        double c = dot(gi, v) * inv_n;
        axpy(c, gi, out);
    }
    return out;
}

inline Tensor<double> fisher_newton_step(const Task& batch, const Tensor<double>& w_hat, double lambda,
                                         index_t cap = 512) {
    auto gs = per_sample_grads(batch, w_hat);
    Tensor<double> g = grad_active(batch, w_hat);
    const index_t m = g.numel();
    if (m <= cap) {
        Eigen::MatrixXd F = Eigen::MatrixXd::Zero(m, m);
        const double inv_n = 1.0 / static_cast<double>(gs.size());
        for (const auto& gi : gs) {
            Eigen::VectorXd v = to_eigen(gi);
            F.noalias() += inv_n * v * v.transpose();
        }
        DenseSystem sys{std::move(F), to_eigen(g)};
        return direct_newton(sys, lambda);
    }
    CgConfig cfg;
    cfg.tol = 1e-8;
    cfg.relative_tol = true;
    cfg.max_iters = static_cast<int>(m);
    cfg.lambda = lambda;
    return cg_solve_operator([&](const Tensor<double>& v) { return fisher_apply(gs, v); }, g, cfg).delta;
}

// ---------------------------------------------------------------------------
// SGD baseline on the same masked objective, active-set updates only.

struct SgdRow {
    index_t step;
    double loss;
    double dist;  // ||W_t - W_0||^2 / ||W_0||^2
};

struct SgdResult {
    Tensor<double> w;
    std::vector<SgdRow> trajectory;
    bool diverged = false;
};

inline SgdResult sgd_baseline(const Task& task, double lr, index_t steps, Rng rng, index_t batch_size = 0) {
    if (lr <= 0) throw ValueError("sgd_baseline: lr must be positive");
    SgdResult res;
    res.w = initial_masked(task);
    const Tensor<double> w0 = res.w;
    const double w0sq = sumsq(w0) > 0 ? sumsq(w0) : 1.0;

    Task shuffled = task;
    shuffled.sample_order.resize(static_cast<std::size_t>(task.n_samples()));
    for (index_t i = 0; i < task.n_samples(); ++i) shuffled.sample_order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(shuffled.sample_order);
    const index_t bs = batch_size > 0 ? batch_size : task.n_samples();
    const index_t nb = batch_count(task, bs);

    for (index_t s = 0; s < steps; ++s) {
        Task batch = batch_view(shuffled, s % nb, bs);
        Tensor<double> g = grad_active(batch, res.w);
        axpy(-lr, task_scatter(batch, g), res.w);
        double l = loss(task, res.w);
        double diff = 0;
        for (index_t i = 0; i < res.w.numel(); ++i) {
            double d = res.w[i] - w0[i];
            diff += d * d;
        }
        res.trajectory.push_back({s + 1, l, diff / w0sq});
        if (!std::isfinite(l)) {
            res.diverged = true;
            break;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Toy quadratic study: L(w) = 1/2 (l1 w1^2 + l2 w2^2). Closed forms plus the
// same problem pushed through the generic SGD and Newton paths as a smoke
// test. Expressed as a K = 0 dense task with X = diag(sqrt(l1/2),
// sqrt(l2/2)) and zero targets, whose raw-sum loss equals the quadratic
// exactly.

struct ToyQuadraticReport {
    double kappa = 0.0;
    bool sgd_diverges = false;                // eta outside (0, 2/l_max)
    index_t sgd_iters_closed_form = 0;        // ceil(ln eps / ln(1 - eta*l1))
    index_t sgd_iters_numeric = 0;            // generic path, |w1| <= eps
    double sgd_w2_closed_form_one_step = 0.0; // (1 - eta*l2) * w2; exactly 0 for eta = 1/l2
    double sgd_w2_after_one_step = 0.0;       // generic path (rounding-level for eta = 1/l2)
    index_t newton_steps = 1;
    double newton_final_norm = 0.0;           // ||w|| after one Newton step
};

// The task borrows the graph, so the graph lives behind a stable pointer.
struct ToyQuadraticProblem {
    std::unique_ptr<NetworkGraph<double>> graph;
    Task task;
};

inline ToyQuadraticProblem make_toy_quadratic_task(double l1, double l2, double w1, double w2) {
    auto g = std::make_unique<NetworkGraph<double>>();
    g->m.input_shape = Shape{2, 2};
    OpSpec dense;
    dense.kind = OpKind::dense;
    dense.out_features = 1;
    dense.weight_names = {"w"};
    dense.is_target = true;
    g->m.ops = {dense};
    g->m.prunable = {"w"};
    g->weights.emplace("w", Tensor<double>(Shape{2, 1}, {w1, w2}));

    Tensor<double> x(Shape{2, 2}, {std::sqrt(l1 / 2.0), 0.0, 0.0, std::sqrt(l2 / 2.0)});
    std::vector<Mask> masks{Mask{Shape{2, 1}, {1, 1}, MaskKind::unstructured(0.0)}};
    std::vector<Tensor<double>> targets{Tensor<double>(Shape{2, 1})};  // zeros

    ToyQuadraticProblem p;
    p.graph = std::move(g);
    p.task = make_task(*p.graph, {"w"}, std::move(masks), 0, std::move(x), std::move(targets));
    return p;
}

inline ToyQuadraticReport toy_quadratic(double l1, double l2, std::pair<double, double> w0, double eta,
                                        double eps = 1e-6) {
    if (l1 <= 0 || l2 <= 0) throw ValueError("toy_quadratic: curvatures must be positive");
    ToyQuadraticReport rep;
    const double lmax = std::max(l1, l2), lmin = std::min(l1, l2);
    rep.kappa = lmax / lmin;
    rep.sgd_diverges = !(eta > 0 && eta < 2.0 / lmax);

    const double rate = std::abs(1.0 - eta * l1);
    if (!rep.sgd_diverges && std::abs(w0.first) > eps && rate > 0 && rate < 1)
        rep.sgd_iters_closed_form =
            static_cast<index_t>(std::ceil(std::log(eps / std::abs(w0.first)) / std::log(rate)));
    rep.sgd_w2_closed_form_one_step = (1.0 - eta * l2) * w0.second;

    // generic SGD path: w <- w - eta * grad, full batch
    {
        auto p = make_toy_quadratic_task(l1, l2, w0.first, w0.second);
        Tensor<double> w = initial_masked(p.task);
        index_t cap = rep.sgd_diverges ? 1000 : rep.sgd_iters_closed_form * 4 + 64;
        for (index_t s = 0; s < cap; ++s) {
            Tensor<double> g = grad_active(p.task, w);
            axpy(-eta, task_scatter(p.task, g), w);
            if (s == 0) rep.sgd_w2_after_one_step = w[1];
            if (std::abs(w[0]) <= eps) {
                rep.sgd_iters_numeric = s + 1;
                break;
            }
        }
    }

    // generic Newton path: one undamped step through CG + Armijo
    {
        auto p = make_toy_quadratic_task(l1, l2, w0.first, w0.second);
        NewtonConfig cfg;
        cfg.batch_size = 2;
        cfg.cg.lambda = 0.0;
        cfg.cg.tol = 1e-14;
        cfg.cg.max_iters = 8;
        NewtonState<double> st;
        st.w_hat = initial_masked(p.task);
        newton_step(p.task, st, cfg, "toy", 0);
        rep.newton_steps = 1;
        rep.newton_final_norm = norm2(st.w_hat);
    }
    return rep;
}

}  // namespace snows::oracle
