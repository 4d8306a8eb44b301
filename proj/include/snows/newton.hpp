#pragma once

#include <chrono>
#include <optional>

#include "snows/hvp.hpp"

namespace snows {

struct NewtonConfig {
    index_t batch_size = 128;
    index_t batches = 0;  // cap on batches per epoch; 0 = use all
    int max_epochs = 1;
    CgConfig cg;
    double armijo_beta = 1e-5;  // sufficient-decrease constant
    double armijo_shrink = 0.5;
    double alpha_min = 9.5367431640625e-07;  // 2^-20
    int lambda_retries = 3;     // x10 escalations after a rejected step
    bool early_stop = false;    // optional per-epoch relative-improvement stop
    double early_stop_rel = 1e-6;
};

struct TrajectoryRow {
    std::string weight;
    index_t batch = 0;
    double loss_pre = 0.0;
    double loss_post = 0.0;
    double alpha = 0.0;
    int cg_iters = 0;
    double delta_norm = 0.0;
    double wall_ms = 0.0;
};

template <typename S>
struct NewtonState {
    Tensor<S> w_hat;  // flat logical weights, mask-consistent at every step
    index_t step = 0;
    std::vector<TrajectoryRow> trajectory;
};

namespace detail {

struct ArmijoResult {
    bool ok = false;
    double alpha = 0.0;
    double loss_pre = 0.0;
    double loss_post = 0.0;
};

// Backtracking from alpha = 1: accept the largest alpha with
// L(W + alpha*delta) <= L(W) + alpha*beta*delta'g. Requires delta'g < 0.
template <typename S>
ArmijoResult armijo_detail(const ReconstructionTask<S>& t, const Tensor<S>& w_hat, const Tensor<S>& delta,
                           const Tensor<S>& g, const NewtonConfig& cfg) {
    const double dg = static_cast<double>(dot(delta, g));
    if (dg >= 0.0)
        throw NumericError("Armijo: delta'g = " + std::to_string(dg) + " >= 0, not a descent direction");
    ArmijoResult res;
    res.loss_pre = static_cast<double>(loss(t, w_hat));
    Tensor<S> full = task_scatter(t, delta);
    double alpha = 1.0;
    while (alpha >= cfg.alpha_min) {
        Tensor<S> trial = w_hat;
        axpy(static_cast<S>(alpha), full, trial);
        const double l = static_cast<double>(loss(t, trial));
        if (l <= res.loss_pre + alpha * cfg.armijo_beta * dg) {
            res.ok = true;
            res.alpha = alpha;
            res.loss_post = l;
            return res;
        }
        alpha *= cfg.armijo_shrink;
    }
    res.loss_post = res.loss_pre;
    return res;  // failure signal: no admissible step
}

}  // namespace detail

// Largest alpha <= 1 satisfying the sufficient-decrease condition, or
// nullopt when no alpha >= alpha_min qualifies. delta'g >= 0 is an error.
template <typename S>
std::optional<double> armijo_search(const ReconstructionTask<S>& t, const Tensor<S>& w_hat,
                                    const Tensor<S>& delta, const Tensor<S>& g, const NewtonConfig& cfg) {
    auto res = detail::armijo_detail(t, w_hat, delta, g, cfg);
    if (!res.ok) return std::nullopt;
    return res.alpha;
}

// One stochastic Newton step on a mini-batch: gradient, damped CG solve,
// Armijo step size, commit on the active set. A rejected step (Armijo
// failure or CG curvature failure) escalates lambda x10 up to
// lambda_retries times, then the batch is skipped (recorded with alpha 0).
template <typename S>
void newton_step(const ReconstructionTask<S>& batch, NewtonState<S>& state, const NewtonConfig& cfg,
                 const std::string& label, index_t batch_idx) {
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed_ms = [&t0] {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    };

    TrajectoryRow row;
    row.weight = label;
    row.batch = batch_idx;

    Tensor<S> g = grad_active(batch, state.w_hat);
    if (norm2(g) == 0.0) {
        row.loss_pre = row.loss_post = static_cast<double>(loss(batch, state.w_hat));
        row.wall_ms = elapsed_ms();
        state.trajectory.push_back(std::move(row));
        ++state.step;
        return;
    }

    NewtonConfig attempt = cfg;
    for (int r = 0; r <= cfg.lambda_retries; ++r) {
        try {
            CgReport<S> rep = cg_solve(batch, state.w_hat, g, attempt.cg);
            auto ar = detail::armijo_detail(batch, state.w_hat, rep.delta, g, attempt);
            row.loss_pre = ar.loss_pre;
            row.cg_iters = rep.iters_used;
            row.delta_norm = norm2(rep.delta);
            if (ar.ok) {
                Tensor<S> full = task_scatter(batch, rep.delta);
                axpy(static_cast<S>(ar.alpha), full, state.w_hat);
                row.alpha = ar.alpha;
                row.loss_post = ar.loss_post;
                row.wall_ms = elapsed_ms();
                state.trajectory.push_back(std::move(row));
                ++state.step;
                return;
            }
        } catch (const NumericError& e) {
            log_message(LogLevel::debug, std::string("newton retry: ") + e.what());
        }
        attempt.cg.lambda = (attempt.cg.lambda == 0.0 ? 1e-8 : attempt.cg.lambda * 10.0);
    }

    // skipped batch
    row.loss_pre = row.loss_post = static_cast<double>(loss(batch, state.w_hat));
    row.alpha = 0.0;
    row.wall_ms = elapsed_ms();
    log_message(LogLevel::warn, "newton: batch " + std::to_string(batch_idx) + " of '" + label +
                                    "' skipped after " + std::to_string(cfg.lambda_retries) + " lambda escalations");
    state.trajectory.push_back(std::move(row));
    ++state.step;
}

// Layer-wise stochastic Newton: initialize W ⊙ Z, then sweep seeded shuffled
// mini-batches, taking one damped Newton step per batch.
template <typename S>
NewtonState<S> optimize_layer(const ReconstructionTask<S>& task, const NewtonConfig& cfg, Rng rng,
                              const std::string& label = "") {
    NewtonState<S> state;
    state.w_hat = initial_masked(task);

    ReconstructionTask<S> shuffled = task;
    shuffled.sample_order.resize(static_cast<std::size_t>(task.n_samples()));
    for (index_t i = 0; i < task.n_samples(); ++i) shuffled.sample_order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(shuffled.sample_order);

    index_t nb = batch_count(task, cfg.batch_size);
    if (cfg.batches > 0) nb = std::min(nb, cfg.batches);
    std::string name = label.empty() ? task.weight_names[0] : label;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const std::size_t first_row = state.trajectory.size();
        for (index_t b = 0; b < nb; ++b) {
            ReconstructionTask<S> batch = batch_view(shuffled, b, cfg.batch_size);
            newton_step(batch, state, cfg, name, b);
        }
        if (cfg.early_stop && state.trajectory.size() > first_row) {
            const double pre = state.trajectory[first_row].loss_pre;
            const double post = state.trajectory.back().loss_post;
            if (pre > 0 && (pre - post) / pre < cfg.early_stop_rel) break;
        }
    }
    return state;
}

}  // namespace snows
