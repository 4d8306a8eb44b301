#pragma once

#include "snows/config.hpp"
#include "snows/oracles.hpp"
#include "snows/pipeline.hpp"
#include "snows/train.hpp"
#include "snows/vit.hpp"

namespace snows {

// Shared command bodies behind the CLI, written against resolved configs so
// tests can drive them directly.

inline std::string checkpoint_dtype(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    char magic[4];
    std::uint32_t ver;
    std::uint64_t hlen;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&ver), 4);
    in.read(reinterpret_cast<char*>(&hlen), 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw IoError("'" + path + "' is not a SNWS checkpoint (bad magic)");
    std::string hbytes(hlen, '\0');
    in.read(hbytes.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw IoError("truncated checkpoint header in '" + path + "'");
    auto header = nlohmann::json::parse(hbytes);
    const auto& tensors = header.at("tensors");
    if (tensors.empty()) throw ValueError("checkpoint '" + path + "' is empty");
    return tensors.at(0).at("dtype").get<std::string>();
}

template <typename S>
NetworkGraph<S> load_network(const std::string& manifest_path, const std::string& ckpt_path) {
    NetworkGraph<S> g;
    g.m = load_manifest(manifest_path);
    CheckpointData<S> ck = load_checkpoint<S>(ckpt_path);
    if (ck.manifest_hash != 0 && ck.manifest_hash != manifest_hash(g.m))
        throw ValueError("checkpoint '" + ckpt_path + "' was written for a different manifest than '" +
                         manifest_path + "'");
    g.weights = std::move(ck.tensors);
    validate(g);
    return g;
}

template <typename S>
void save_network(const NetworkGraph<S>& g, const std::map<std::string, Mask>& masks,
                  const std::string& path) {
    CheckpointData<S> ck;
    ck.tensors = g.weights;
    ck.masks = masks;
    ck.manifest_hash = manifest_hash(g.m);
    save_checkpoint(path, ck);
}

// --data accepts a raw record file path or a synthetic spec:
//   synth:n=2000,noise=1.5         (sub-stream "data")
//   synth-heldout:n=1000,noise=1.5 (sub-stream "data.heldout")
// Feature shape comes from the manifest's input shape.
template <typename S>
Dataset<S> resolve_data(const std::string& spec, const GraphManifest& m, int classes, const Rng& run_rng) {
    Shape feat(m.input_shape.begin() + 1, m.input_shape.end());
    auto parse_synth = [&](const std::string& params, const char* stream) {
        index_t n = 2000;
        double noise = 1.5;
        std::size_t pos = 0;
        while (pos < params.size()) {
            std::size_t comma = params.find(',', pos);
            std::string kv = params.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            auto eq = kv.find('=');
            if (eq != std::string::npos) {
                std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
                if (key == "n")
                    n = std::stoll(val);
                else if (key == "noise")
                    noise = std::stod(val);
                else
                    throw ValueError("unknown synth parameter '" + key + "'");
            } else if (!kv.empty()) {
                throw ValueError("synth spec expects key=value pairs, got '" + kv + "'");
            }
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        return make_synthetic_gaussian<S>(n, feat, classes, run_rng.substream(stream), noise);
    };
    if (spec.rfind("synth-heldout:", 0) == 0) return parse_synth(spec.substr(14), "data.heldout");
    if (spec == "synth-heldout") return parse_synth("", "data.heldout");
    if (spec.rfind("synth:", 0) == 0) return parse_synth(spec.substr(6), "data");
    if (spec == "synth") return parse_synth("", "data");
    return load_raw_dataset<S>(spec, feat, classes);
}

// ---------------------------------------------------------------------------
// Random desk-scale task zoo (double precision, m <= 50) for verification
// suites: masked MLP, conv and joint-QKV reconstruction problems with
// generic (non-stationary) targets.

struct ZooTask {
    std::unique_ptr<NetworkGraph<double>> graph;
    ReconstructionTask<double> task;
};

inline ZooTask make_zoo_task(int kind, int K, Rng& rng) {
    ZooTask z;
    if (kind % 3 == 2) {
        AttentionBlockSpec spec;
        spec.d = 4;
        spec.heads = 2;
        spec.head_dim = 2;
        spec.seq = 3;
        Rng task_rng(rng.next_u64());
        auto p = qkv_joint_task(spec, K, 2, task_rng);
        std::vector<Mask> masks;
        for (const char* n : {"wq", "wk", "wv"}) masks.push_back(magnitude_mask_nm(p.graph->weight(n), 2, 4));
        z.graph = std::move(p.graph);
        z.task = make_task(*z.graph, {"wq", "wk", "wv"}, std::move(masks), K, p.task.inputs, p.task.targets,
                           p.task.side_inputs);
    } else {
        auto g = std::make_unique<NetworkGraph<double>>();
        std::string pruned;
        if (kind % 3 == 0) {
            g->m.input_shape = Shape{6, 5};
            OpSpec d1;
            d1.kind = OpKind::dense;
            d1.out_features = 4;
            d1.weight_names = {"w1", "b1"};
            d1.is_target = true;
            OpSpec act{.kind = OpKind::gelu, .is_target = true};
            OpSpec d2;
            d2.kind = OpKind::dense;
            d2.out_features = 3;
            d2.weight_names = {"w2", "b2"};
            d2.is_target = true;
            g->m.ops = {d1, act, d2};
            g->m.prunable = {"w1"};
            pruned = "w1";
        } else {
            g->m.input_shape = Shape{3, 4, 5, 5};
            OpSpec c1;
            c1.kind = OpKind::conv2d;
            c1.kernel_h = c1.kernel_w = 2;
            c1.out_channels = 2;
            c1.weight_names = {"w1"};
            c1.is_target = true;
            OpSpec act{.kind = OpKind::relu, .is_target = true};
            OpSpec c2;
            c2.kind = OpKind::conv2d;
            c2.kernel_h = c2.kernel_w = 2;
            c2.out_channels = 2;
            c2.weight_names = {"w2"};
            c2.is_target = true;
            g->m.ops = {c1, act, c2};
            g->m.prunable = {"w1"};
            pruned = "w1";
        }
        for (auto& [name, shape] : analyze(g->m).weight_shapes)
            g->weights.emplace(name, random_normal<double>(shape, rng, 0.5));
        Tensor<double> x = random_normal<double>(g->m.input_shape, rng, 0.7);
        GraphAnalysis an = analyze(g->m);
        SubNetwork sub = make_subnetwork(g->m, 0, K);
        auto targets = forward_capture(*g, sub, x);
        for (auto& t : targets)
            for (auto& v : t) v += 0.05 * rng.normal();  // generic, non-stationary point
        Mask mask = kind % 3 == 0 ? magnitude_mask_unstructured(g->weight(pruned), 0.5)
                                  : magnitude_mask_nm(g->weight(pruned), 2, 4);
        z.graph = std::move(g);
        z.task = make_task(*z.graph, {pruned}, {mask}, K, std::move(x), std::move(targets));
    }
    return z;
}

// ---------------------------------------------------------------------------
// Oracle suites: named check tables with measured errors vs tolerances.

struct SuiteRow {
    std::string check;
    double measured = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct SuiteResult {
    std::string suite;
    std::vector<SuiteRow> rows;

    bool all_pass() const {
        for (const auto& r : rows)
            if (!r.pass) return false;
        return true;
    }

    void add(const std::string& check, double measured, double tolerance) {
        rows.push_back({check, measured, tolerance, measured <= tolerance});
    }
    void add_exact(const std::string& check, bool ok, double measured) {
        rows.push_back({check, measured, 0.0, ok});
    }
};

namespace detail {

inline double vec_rel_err(const Eigen::VectorXd& got, const Eigen::VectorXd& ref) {
    return (got - ref).norm() / std::max(1e-300, ref.norm());
}

}  // namespace detail

inline SuiteResult oracle_suite_hvp(std::uint64_t seed, int n_tasks = 21) {
    SuiteResult res{"hvp", {}};
    Rng rng(seed);
    double worst_exact = 0, worst_fd = 0, worst_sym = 0;
    for (int i = 0; i < n_tasks; ++i) {
        ZooTask z = make_zoo_task(i, 1 + static_cast<int>(rng.below(2)), rng);
        Tensor<double> w = initial_masked(z.task);
        Eigen::MatrixXd H_fd = oracle::brute_hessian_fd(z.task, w);
        Tensor<double> v = random_normal<double>(Shape{z.task.active_count()}, rng, 1.0);
        Eigen::VectorXd ref = H_fd * oracle::to_eigen(v);
        worst_exact = std::max(worst_exact,
                               detail::vec_rel_err(oracle::to_eigen(hvp(z.task, w, v, HvpMode::exact)), ref));
        worst_fd = std::max(
            worst_fd, detail::vec_rel_err(oracle::to_eigen(hvp(z.task, w, v, HvpMode::finite_diff)), ref));
        Tensor<double> u = random_normal<double>(Shape{z.task.active_count()}, rng, 1.0);
        double uhv = dot(u, hvp(z.task, w, v, HvpMode::exact));
        double vhu = dot(v, hvp(z.task, w, u, HvpMode::exact));
        worst_sym = std::max(worst_sym, std::abs(uhv - vhu) / std::max({std::abs(uhv), std::abs(vhu), 1e-12}));
    }
    res.add("exact hvp vs brute-force Hessian (" + std::to_string(n_tasks) + " tasks)", worst_exact, 1e-6);
    res.add("fd hvp vs brute-force Hessian", worst_fd, 1e-4);
    res.add("symmetry probe u'Hv vs v'Hu", worst_sym, 1e-5);
    return res;
}

inline SuiteResult oracle_suite_cg(std::uint64_t seed, int n_systems = 21) {
    SuiteResult res{"cg", {}};
    Rng rng(seed);
    double worst = 0;
    double worst_drift = 0;
    for (int i = 0; i < n_systems; ++i) {
        const int m = 20 + static_cast<int>(rng.below(181));  // 20..200
        Eigen::MatrixXd A(m, m);
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < m; ++c) A(r, c) = rng.normal();
        Eigen::MatrixXd H = A.transpose() * A / std::sqrt(static_cast<double>(m));
        const double lambda = std::pow(10.0, -2.0 + 2.0 * rng.uniform());  // [1e-2, 1]
        Tensor<double> g = random_normal<double>(Shape{m}, rng, 1.0);
        oracle::DenseSystem sys{H, oracle::to_eigen(g)};
        Tensor<double> direct = oracle::direct_newton(sys, lambda);
        CgConfig cfg;
        cfg.tol = 1e-10;
        cfg.max_iters = 20 * m;
        cfg.lambda = lambda;
        auto rep = cg_solve_operator(
            [&](const Tensor<double>& p) { return oracle::from_eigen(H * oracle::to_eigen(p)); }, g, cfg);
        worst = std::max(worst, detail::vec_rel_err(oracle::to_eigen(rep.delta), oracle::to_eigen(direct)));
        // residual norm recomputed from scratch; meaningful only above the
        // rounding floor of the recursion
        Eigen::VectorXd r = -sys.g - (H + lambda * Eigen::MatrixXd::Identity(m, m)) * oracle::to_eigen(rep.delta);
        const double recomputed = r.norm();
        if (recomputed > 1e-9)
            worst_drift =
                std::max(worst_drift, std::abs(recomputed - rep.final_residual_norm) / recomputed);
    }
    res.add("cg(tol=1e-10) vs dense solve (" + std::to_string(n_systems) + " systems)", worst, 1e-6);
    res.add("reported vs recomputed residual norm", worst_drift, 1e-4);
    return res;
}

inline SuiteResult oracle_suite_k0(std::uint64_t seed, int n_tasks = 6) {
    SuiteResult res{"k0", {}};
    Rng rng(seed);
    double worst = 0;
    for (int i = 0; i < n_tasks; ++i) {
        auto g = std::make_unique<NetworkGraph<double>>();
        const index_t d_in = 8 + 4 * static_cast<index_t>(rng.below(3));
        const index_t d_out = 3 + static_cast<index_t>(rng.below(4));
        g->m.input_shape = Shape{3 * d_in, d_in};
        OpSpec fc;
        fc.kind = OpKind::dense;
        fc.out_features = d_out;
        fc.weight_names = {"w"};
        fc.is_target = true;
        g->m.ops = {fc};
        g->m.prunable = {"w"};
        g->weights.emplace("w", random_normal<double>(Shape{d_in, d_out}, rng, 1.0));
        Tensor<double> x = random_normal<double>(g->m.input_shape, rng, 1.0);
        SubNetwork sub = make_subnetwork(g->m, 0, 0);
        auto targets = forward_capture(*g, sub, x);
        Mask mask = i % 2 == 0 ? magnitude_mask_nm(g->weight("w"), 2, 4)
                               : magnitude_mask_unstructured(g->weight("w"), 0.5);
        auto task = make_task(*g, {"w"}, {mask}, 0, std::move(x), std::move(targets));

        Tensor<double> closed = oracle::closed_form_k0(task);
        NewtonConfig nc;
        nc.batch_size = task.n_samples();
        nc.cg.lambda = 1e-8;
        nc.cg.tol = 1e-10;
        nc.cg.max_iters = 50 * static_cast<int>(task.active_count());
        NewtonState<double> st;
        st.w_hat = initial_masked(task);
        newton_step(task, st, nc, "k0", 0);
        worst = std::max(worst, detail::vec_rel_err(oracle::to_eigen(st.w_hat), oracle::to_eigen(closed)));
    }
    res.add("one Newton step (lambda=1e-8) vs normal equations (" + std::to_string(n_tasks) + " tasks)", worst,
            1e-6);
    return res;
}

inline SuiteResult oracle_suite_toy_quadratic() {
    SuiteResult res{"toy-quadratic", {}};
    auto rep = oracle::toy_quadratic(1.0, 100.0, {1.0, 1.0}, 0.01, 1e-6);
    res.add_exact("kappa == 100", rep.kappa == 100.0, rep.kappa);
    res.add_exact("closed-form SGD iterations == 1375", rep.sgd_iters_closed_form == 1375,
                  static_cast<double>(rep.sgd_iters_closed_form));
    res.add_exact("generic-path SGD iterations within +/-1 of 1375",
                  std::llabs(rep.sgd_iters_numeric - 1375) <= 1, static_cast<double>(rep.sgd_iters_numeric));
    res.add_exact("closed-form w2 after one SGD step == 0", rep.sgd_w2_closed_form_one_step == 0.0,
                  rep.sgd_w2_closed_form_one_step);
    res.add("generic-path Newton reaches the origin in one step (||w||)", rep.newton_final_norm, 1e-12);
    return res;
}

inline std::vector<SuiteResult> run_oracle_suites(const std::string& which, std::uint64_t seed) {
    std::vector<SuiteResult> out;
    if (which == "hvp" || which == "all") out.push_back(oracle_suite_hvp(seed));
    if (which == "cg" || which == "all") out.push_back(oracle_suite_cg(seed + 1));
    if (which == "k0" || which == "all") out.push_back(oracle_suite_k0(seed + 2));
    if (which == "toy-quadratic" || which == "all") out.push_back(oracle_suite_toy_quadratic());
    if (out.empty()) throw ValueError("unknown oracle suite '" + which + "'");
    return out;
}

}  // namespace snows
