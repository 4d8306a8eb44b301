#pragma once

#include <filesystem>
#include <iostream>

#include "snows/driver.hpp"

namespace snows {

// Command bodies for the CLI. Each takes a resolved config (see config.hpp),
// writes its outputs under cfg["out"], and returns a process exit code.

namespace detail {

inline void echo_config(const nlohmann::json& cfg) {
    const std::string out = cfg.at("out").get<std::string>();
    if (out.empty()) return;
    std::filesystem::create_directories(out);
    std::ofstream f(out + "/config.json");
    if (!f) throw IoError("cannot write '" + out + "/config.json'");
    f << cfg.dump(2) << '\n';
}

inline NewtonConfig newton_config_from(const nlohmann::json& cfg) {
    NewtonConfig nc;
    nc.batch_size = cfg.at("batch_size").get<index_t>();
    nc.batches = cfg.at("batches").get<index_t>();
    nc.max_epochs = cfg.at("epochs").get<int>();
    nc.cg.tol = cfg.at("cg_tol").get<double>();
    nc.cg.lambda = cfg.at("lambda").get<double>();
    nc.cg.max_iters = cfg.at("cg_max_iters").get<int>();
    nc.cg.eps_fd = cfg.at("cg_eps_fd").get<double>();
    nc.cg.relative_tol = cfg.at("cg_relative_tol").get<bool>();
    return nc;
}

inline std::string resolved_dtype(const nlohmann::json& cfg) {
    std::string dt = cfg.at("dtype").get<std::string>();
    if (dt == "auto") dt = checkpoint_dtype(cfg.at("checkpoint").get<std::string>());
    if (dt != "f32" && dt != "f64") throw ValueError("dtype must be f32, f64 or auto, got '" + dt + "'");
    return dt;
}

template <typename F>
int dispatch_dtype(const std::string& dt, F&& f) {
    if (dt == "f32") return f(std::type_identity<float>{});
    return f(std::type_identity<double>{});
}

}  // namespace detail

inline int cmd_prune(nlohmann::json cfg) {
    const std::string out = cfg.at("out").get<std::string>();
    if (out.empty()) throw ValueError("prune: --out is required");
    const std::string dt = detail::resolved_dtype(cfg);
    cfg["dtype"] = dt;
    detail::echo_config(cfg);

    return detail::dispatch_dtype(dt, [&]<typename TI>(TI) {
        using S = typename TI::type;
        NetworkGraph<S> g = load_network<S>(cfg.at("manifest"), cfg.at("checkpoint"));
        Rng rng(cfg.at("seed").get<std::uint64_t>());
        Dataset<S> data = resolve_data<S>(cfg.at("data"), g.m, cfg.at("classes").get<int>(), rng);

        PruneConfig pc;
        pc.K = cfg.at("k").get<int>();
        pc.newton = detail::newton_config_from(cfg);
        pc.default_mask = parse_mask_spec(cfg.at("mask").get<std::string>());
        for (auto it = cfg.at("mask_for").begin(); it != cfg.at("mask_for").end(); ++it)
            pc.mask_overrides[it.key()] = parse_mask_spec(it.value().get<std::string>());
        pc.calib_n = cfg.at("calib_n").get<index_t>();
        pc.seed = cfg.at("seed").get<std::uint64_t>();
        pc.eval_threads = cfg.at("threads").get<int>();
        pc.deterministic = cfg.at("deterministic").get<bool>();
        pc.resume_path = out + "/resume.snws";

        PruneReport report = prune_network(g, pc, data.features, rng);

        save_network(g, report.masks, out + "/pruned.snws");
        write_trajectory_csv(report.trajectory, out + "/trajectory.csv");
        {
            std::ofstream f(out + "/report.json");
            f << prune_report_json(report).dump(2) << '\n';
        }
        std::cout << "pruned " << report.layers.size() << " layer groups, total sparsity "
                  << report.total_sparsity() << "\n";
        for (const auto& l : report.layers)
            std::cout << "  " << l.weights << ": K=" << l.k_used << " loss " << l.loss_before << " -> "
                      << l.loss_after << "\n";
        return 0;
    });
}

inline int cmd_eval(nlohmann::json cfg) {
    const std::string out = cfg.at("out").get<std::string>();
    const std::string dt = detail::resolved_dtype(cfg);
    cfg["dtype"] = dt;
    detail::echo_config(cfg);

    return detail::dispatch_dtype(dt, [&]<typename TI>(TI) {
        using S = typename TI::type;
        NetworkGraph<S> pruned = load_network<S>(cfg.at("manifest"), cfg.at("checkpoint"));
        NetworkGraph<S> dense = load_network<S>(cfg.at("manifest"), cfg.at("dense"));
        Rng rng(cfg.at("seed").get<std::uint64_t>());
        Dataset<S> data = resolve_data<S>(cfg.at("data"), pruned.m, cfg.at("classes").get<int>(), rng);

        EvalReport rep = eval_network(pruned, dense, data, cfg.at("k").get<int>());
        if (!out.empty()) {
            std::ofstream f(out + "/eval.json");
            f << eval_report_json(rep).dump(2) << '\n';
        }
        std::cout << "accuracy " << rep.accuracy << " (dense " << rep.dense_accuracy << ", delta "
                  << rep.accuracy - rep.dense_accuracy << ")\n";
        for (const auto& l : rep.layers)
            std::cout << "  " << l.weights << ": K=" << l.k_used << " recon loss " << l.recon_loss << "\n";
        return 0;
    });
}

inline int cmd_train(nlohmann::json cfg) {
    const std::string out = cfg.at("out").get<std::string>();
    if (out.empty()) throw ValueError("train: --out is required");
    std::string dt = cfg.at("dtype").get<std::string>();
    if (dt == "auto") dt = "f64";
    cfg["dtype"] = dt;
    detail::echo_config(cfg);

    return detail::dispatch_dtype(dt, [&]<typename TI>(TI) {
        using S = typename TI::type;
        Rng rng(cfg.at("seed").get<std::uint64_t>());
        GraphManifest m = make_toy_cnn_manifest(cfg.at("channels").get<index_t>(), cfg.at("hw").get<index_t>(),
                                                cfg.at("classes").get<int>());
        Dataset<S> data = make_synthetic_gaussian<S>(
            cfg.at("n").get<index_t>(), Shape(m.input_shape.begin() + 1, m.input_shape.end()),
            cfg.at("classes").get<int>(), rng.substream("data"), cfg.at("noise").get<double>());
        TrainOptions opt;
        opt.epochs = cfg.at("train_epochs").get<int>();
        opt.lr = cfg.at("lr").get<double>();
        opt.momentum = cfg.at("momentum").get<double>();
        opt.batch_size = cfg.at("batch_size").get<index_t>();

        NetworkGraph<S> g;
        g.m = m;
        he_init(g, rng.substream("init"));
        calibrate_batchnorm(g, slice_dim0(data.features, 0, std::min<index_t>(data.size(), 256)));
        double acc = train_classifier(g, data, opt, rng.substream("train"));

        save_manifest(g.m, out + "/manifest.json");
        save_network(g, {}, out + "/dense.snws");
        std::cout << "trained fixture: " << acc << " train accuracy over " << data.size() << " samples\n";
        if (acc < 0.9) log_message(LogLevel::warn, "fixture train accuracy below 0.9");
        return 0;
    });
}

inline int cmd_oracle(const nlohmann::json& cfg) {
    detail::echo_config(cfg);
    auto suites = run_oracle_suites(cfg.at("suite").get<std::string>(), cfg.at("seed").get<std::uint64_t>());
    bool all = true;
    std::ofstream csv;
    const std::string out = cfg.at("out").get<std::string>();
    if (!out.empty()) {
        csv.open(out + "/oracle.csv");
        csv << "suite,check,measured,tolerance,pass\n";
    }
    for (const auto& s : suites) {
        std::cout << "[suite " << s.suite << "]\n";
        for (const auto& r : s.rows) {
            std::printf("  %s  %-58s measured %.3e", r.pass ? "PASS" : "FAIL", r.check.c_str(), r.measured);
            if (r.tolerance > 0) std::printf("  tol %.0e", r.tolerance);
            std::printf("\n");
            if (csv.is_open())
                csv << s.suite << ",\"" << r.check << "\"," << fmt_double(r.measured) << ','
                    << fmt_double(r.tolerance) << ',' << (r.pass ? 1 : 0) << '\n';
            all = all && r.pass;
        }
    }
    if (!all) {
        std::cout << "oracle: FAILURES present\n";
        return 3;
    }
    std::cout << "oracle: all checks passed\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Ablation studies

namespace detail {

template <typename S>
struct StudyTask {
    std::unique_ptr<NetworkGraph<S>> graph;
    ReconstructionTask<S> task;
    std::string label;
};

// Task for the first prunable group, with the mask spec applied and dense
// targets captured (nothing upstream is pruned, so the cascade is dense).
template <typename S>
StudyTask<S> first_layer_task(const nlohmann::json& cfg, const Rng& rng) {
    auto g = std::make_unique<NetworkGraph<S>>(
        load_network<S>(cfg.at("manifest").get<std::string>(), cfg.at("checkpoint").get<std::string>()));
    GraphAnalysis an = validate(*g);
    Dataset<S> data = resolve_data<S>(cfg.at("data"), g->m, cfg.at("classes").get<int>(), rng);
    Tensor<S> calib = select_calibration(data.features, cfg.at("calib_n").get<index_t>(), rng);
    if (g->m.prunable.empty()) throw ValueError("manifest declares no prunable weights");

    int first_op = an.owner.at(g->m.prunable.front());
    std::vector<std::string> names;
    for (const auto& n : g->m.prunable)
        if (an.owner.at(n) == first_op) names.push_back(n);

    CascadeState<S> st;
    st.x = calib;
    cascade_to(*g, an, st, first_op);
    const int K = cfg.at("k").get<int>();
    SubNetwork sub = make_subnetwork(g->m, first_op, K);
    auto sides = window_side_inputs(an, st, sub.start, sub.last());
    auto targets = capture_targets(*g, sub, st.x, sides);

    MaskSpec ms = parse_mask_spec(cfg.at("mask").get<std::string>());
    std::vector<Mask> masks;
    for (const auto& n : names) masks.push_back(build_mask(*g, n, ms));

    StudyTask<S> out;
    out.graph = std::move(g);
    out.task = make_task(*out.graph, names, std::move(masks), K, st.x, std::move(targets), sides);
    out.task.eval_threads = cfg.at("threads").get<int>();
    for (const auto& n : names) out.label += (out.label.empty() ? "" : "+") + n;
    return out;
}

}  // namespace detail

inline int cmd_ablate(nlohmann::json cfg) {
    const std::string out = cfg.at("out").get<std::string>();
    if (out.empty()) throw ValueError("ablate: --out is required");
    std::string dt = cfg.at("dtype").get<std::string>();
    if (dt == "auto") dt = checkpoint_dtype(cfg.at("checkpoint").get<std::string>());
    cfg["dtype"] = dt;
    detail::echo_config(cfg);
    const std::string study = cfg.at("study").get<std::string>();
    const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();

    if (study == "k-sweep") {
        // full pruning runs at each K; raw loss and accuracy curves only
        std::ofstream f(out + "/k_sweep.csv"), fa(out + "/k_sweep_accuracy.csv");
        f << "k,weights,loss_before,loss_after,sparsity\n";
        fa << "k,accuracy_pruned,accuracy_dense\n";
        for (int K : cfg.at("k_values").get<std::vector<int>>()) {
            detail::dispatch_dtype(dt, [&]<typename TI>(TI) {
                using S = typename TI::type;
                NetworkGraph<S> g = load_network<S>(cfg.at("manifest"), cfg.at("checkpoint"));
                NetworkGraph<S> dense = g;
                Rng rng(seed);
                Dataset<S> data = resolve_data<S>(cfg.at("data"), g.m, cfg.at("classes").get<int>(), rng);
                PruneConfig pc;
                pc.K = K;
                pc.newton = detail::newton_config_from(cfg);
                pc.default_mask = parse_mask_spec(cfg.at("mask").get<std::string>());
                pc.calib_n = cfg.at("calib_n").get<index_t>();
                pc.seed = seed;
                pc.eval_threads = cfg.at("threads").get<int>();
                PruneReport rep = prune_network(g, pc, data.features, rng);
                for (const auto& l : rep.layers)
                    f << K << ',' << l.weights << ',' << fmt_double(l.loss_before) << ','
                      << fmt_double(l.loss_after) << ','
                      << fmt_double(static_cast<double>(l.zeros) / static_cast<double>(l.numel)) << '\n';
                fa << K << ',' << fmt_double(accuracy(g, data)) << ',' << fmt_double(accuracy(dense, data))
                   << '\n';
                return 0;
            });
        }
        std::cout << "k-sweep written to " << out << "\n";
        return 0;
    }

    if (study == "cg-iters") {
        std::ofstream f(out + "/cg_iters.csv"), fr(out + "/cg_residuals.csv");
        f << "max_iters,step,loss_pre,loss_post,alpha,wall_ms\n";
        fr << "max_iters,iter,residual_norm\n";
        return detail::dispatch_dtype(dt, [&]<typename TI>(TI) {
            using S = typename TI::type;
            Rng rng(seed);
            auto st = detail::first_layer_task<S>(cfg, rng);
            for (int cap : cfg.at("cg_iter_values").get<std::vector<int>>()) {
                NewtonConfig nc = detail::newton_config_from(cfg);
                nc.cg.max_iters = cap;
                NewtonState<S> state = optimize_layer(st.task, nc, rng.substream("newton"), st.label);
                int step = 0;
                for (const auto& row : state.trajectory)
                    f << cap << ',' << step++ << ',' << fmt_double(row.loss_pre) << ','
                      << fmt_double(row.loss_post) << ',' << fmt_double(row.alpha) << ','
                      << fmt_double(row.wall_ms) << '\n';
                // one representative solve trace per cap
                Tensor<S> w = initial_masked(st.task);
                Tensor<S> g = grad_active(st.task, w);
                CgReport<S> rep = cg_solve(st.task, w, g, nc.cg);
                for (int i = 0; i < static_cast<int>(rep.residual_history.size()); ++i)
                    fr << cap << ',' << i + 1 << ',' << fmt_double(rep.residual_history[static_cast<std::size_t>(i)])
                       << '\n';
            }
            std::cout << "cg-iters written to " << out << "\n";
            return 0;
        });
    }

    if (study == "sgd-vs-newton") {
        std::ofstream f(out + "/sgd_vs_newton.csv");
        f << "method,lr,step,loss,dist_w\n";
        return detail::dispatch_dtype(dt, [&]<typename TI>(TI) {
            using S = typename TI::type;
            if constexpr (!std::is_same_v<S, double>) {
                throw ValueError("sgd-vs-newton runs in f64 (pass --dtype f64)");
            } else {
                Rng rng(seed);
                auto st = detail::first_layer_task<S>(cfg, rng);
                const int newton_steps = cfg.at("newton_steps").get<int>();
                NewtonConfig nc = detail::newton_config_from(cfg);
                nc.batch_size = st.task.n_samples();  // full batch on both sides

                NewtonState<double> state;
                state.w_hat = initial_masked(st.task);
                const Tensor<double> w0 = state.w_hat;
                const double w0sq = std::max(sumsq(w0), 1e-300);
                f << "newton,0,0," << fmt_double(loss(st.task, state.w_hat)) << ",0\n";
                for (int s = 0; s < newton_steps; ++s) {
                    newton_step(st.task, state, nc, st.label, s);
                    double diff = 0;
                    for (index_t i = 0; i < w0.numel(); ++i) {
                        double d = state.w_hat[i] - w0[i];
                        diff += d * d;
                    }
                    f << "newton,0," << s + 1 << ',' << fmt_double(state.trajectory.back().loss_post) << ','
                      << fmt_double(diff / w0sq) << '\n';
                }
                for (double lr : cfg.at("sgd_lrs").get<std::vector<double>>()) {
                    auto res = oracle::sgd_baseline(st.task, lr, cfg.at("sgd_steps").get<index_t>(),
                                                    rng.substream("sgd"));
                    for (const auto& row : res.trajectory)
                        f << "sgd," << fmt_double(lr) << ',' << row.step << ',' << fmt_double(row.loss) << ','
                          << fmt_double(row.dist) << '\n';
                }
                std::cout << "sgd-vs-newton written to " << out << "\n";
                return 0;
            }
        });
    }

    if (study == "fisher-vs-newton") {
        std::ofstream f(out + "/fisher_vs_newton.csv");
        f << "method,step,loss,wall_ms\n";
        return detail::dispatch_dtype(dt, [&]<typename TI>(TI) {
            using S = typename TI::type;
            if constexpr (!std::is_same_v<S, double>) {
                throw ValueError("fisher-vs-newton runs in f64 (pass --dtype f64)");
            } else {
                Rng rng(seed);
                auto st = detail::first_layer_task<S>(cfg, rng);
                const int steps = cfg.at("newton_steps").get<int>();
                NewtonConfig nc = detail::newton_config_from(cfg);
                nc.batch_size = st.task.n_samples();
                const double lambda = cfg.at("lambda").get<double>();

                NewtonState<double> state;
                state.w_hat = initial_masked(st.task);
                f << "newton,0," << fmt_double(loss(st.task, state.w_hat)) << ",0\n";
                auto t0 = std::chrono::steady_clock::now();
                for (int s = 0; s < steps; ++s) {
                    newton_step(st.task, state, nc, st.label, s);
                    double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                    f << "newton," << s + 1 << ',' << fmt_double(state.trajectory.back().loss_post) << ','
                      << fmt_double(ms) << '\n';
                }

                Tensor<double> wf = initial_masked(st.task);
                f << "fisher,0," << fmt_double(loss(st.task, wf)) << ",0\n";
                t0 = std::chrono::steady_clock::now();
                for (int s = 0; s < steps; ++s) {
                    Tensor<double> delta = oracle::fisher_newton_step(st.task, wf, lambda);
                    Tensor<double> g = grad_active(st.task, wf);
                    auto ar = snows::detail::armijo_detail(st.task, wf, delta, g, nc);
                    if (ar.ok) axpy(ar.alpha, task_scatter(st.task, delta), wf);
                    double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
                    f << "fisher," << s + 1 << ',' << fmt_double(ar.ok ? ar.loss_post : ar.loss_pre) << ','
                      << fmt_double(ms) << '\n';
                }
                std::cout << "fisher-vs-newton written to " << out << "\n";
                return 0;
            }
        });
    }

    throw ValueError("unknown study '" + study + "' (k-sweep | cg-iters | sgd-vs-newton | fisher-vs-newton)");
}

}  // namespace snows
