// snows: one-shot pruning via K-step reconstruction and Hessian-free
// stochastic Newton. Subcommands: prune, eval, ablate, oracle, train.
//
// Options resolve as defaults < --config file < flags. The resolved config
// is echoed into the output directory. Exit codes: 0 success, 2 validation
// error, 3 numerical failure, 4 I/O error.

#include <CLI11.hpp>
#include <deque>
#include <iostream>

#include "snows/commands.hpp"

namespace {

struct SubArgs {
    CLI::App* app = nullptr;
    std::string config_path;
    std::deque<std::string> values;
    std::vector<std::string> mask_for;
    std::vector<std::pair<CLI::Option*, std::pair<const std::string*, std::string>>> bound;  // opt -> (value, key)

    void opt(const std::string& flag, const std::string& key, const std::string& help) {
        values.emplace_back();
        std::string* slot = &values.back();
        CLI::Option* o = app->add_option(flag, *slot, help);
        bound.push_back({o, {slot, key}});
    }

    void flag(const std::string& flag_name, const std::string& key, const std::string& help) {
        CLI::Option* o = app->add_flag(flag_name, help);
        bound.push_back({o, {nullptr, key}});
    }

    std::vector<std::pair<std::string, std::string>> overrides() const {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& [o, kv] : bound)
            if (o->count() > 0) out.emplace_back(kv.second, kv.first ? *kv.first : "true");
        for (const auto& mf : mask_for) out.emplace_back("mask_for", mf);
        return out;
    }
};

void add_solver_opts(SubArgs& s) {
    s.opt("--k", "k", "K-step horizon");
    s.opt("--lambda", "lambda", "Levenberg-Marquardt damping");
    s.opt("--cg-tol", "cg_tol", "CG residual tolerance");
    s.opt("--cg-max-iters", "cg_max_iters", "CG iteration cap");
    s.opt("--cg-eps-fd", "cg_eps_fd", "finite-difference HVP step (0 = exact mode)");
    s.flag("--cg-relative-tol", "cg_relative_tol", "interpret --cg-tol relative to ||g||");
    s.opt("--batch-size", "batch_size", "mini-batch size");
    s.opt("--batches", "batches", "cap on batches per epoch (0 = all)");
    s.opt("--epochs", "epochs", "epochs over the calibration batches");
    s.opt("--calib-n", "calib_n", "calibration sample count (0 = all)");
    s.opt("--classes", "classes", "number of classes in the dataset");
}

void add_common_opts(SubArgs& s) {
    s.app->add_option("--config", s.config_path, "JSON config file (flags override it)");
    s.opt("--seed", "seed", "master seed; all randomness derives from it");
    s.opt("--threads", "threads", "evaluation threads (1 = bitwise deterministic)");
    s.opt("--dtype", "dtype", "f32 | f64 | auto (from checkpoint)");
    s.opt("--out", "out", "output directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SNOWS one-shot pruning toolkit"};
    app.require_subcommand(1);

    std::map<std::string, SubArgs> subs;
    auto make_sub = [&](const std::string& name, const std::string& desc) -> SubArgs& {
        SubArgs& s = subs[name];
        s.app = app.add_subcommand(name, desc);
        add_common_opts(s);
        return s;
    };

    {
        SubArgs& s = make_sub("prune", "prune a network with K-step reconstruction + stochastic Newton");
        s.opt("--manifest", "manifest", "network manifest JSON");
        s.opt("--checkpoint", "checkpoint", "dense weights (SNWS checkpoint)");
        s.opt("--data", "data", "calibration data: file path or synth:n=...,noise=...");
        add_solver_opts(s);
        s.opt("--mask", "mask", "default mask spec: unstructured:S | nm:N:M | import:PATH");
        s.app->add_option("--mask-for", s.mask_for, "per-weight mask spec WEIGHT=SPEC (repeatable)");
        s.flag("--deterministic", "deterministic", "zero wall-clock fields in outputs");
    }
    {
        SubArgs& s = make_sub("eval", "accuracy + per-layer K-step reconstruction vs a dense reference");
        s.opt("--manifest", "manifest", "network manifest JSON");
        s.opt("--checkpoint", "checkpoint", "checkpoint to evaluate");
        s.opt("--dense", "dense", "dense reference checkpoint");
        s.opt("--data", "data", "evaluation data: file path or synth-heldout:n=...");
        s.opt("--k", "k", "K-step horizon for reconstruction losses");
        s.opt("--classes", "classes", "number of classes");
    }
    {
        SubArgs& s = make_sub("ablate", "desk-scale ablation studies");
        s.opt("--study", "study", "k-sweep | cg-iters | sgd-vs-newton | fisher-vs-newton");
        s.opt("--manifest", "manifest", "network manifest JSON");
        s.opt("--checkpoint", "checkpoint", "dense weights");
        s.opt("--data", "data", "calibration data");
        add_solver_opts(s);
        s.opt("--mask", "mask", "mask spec for the studied layer(s)");
        s.opt("--k-values", "k_values", "comma list for k-sweep");
        s.opt("--cg-iter-values", "cg_iter_values", "comma list for cg-iters");
        s.opt("--sgd-steps", "sgd_steps", "SGD steps in sgd-vs-newton");
        s.opt("--sgd-lrs", "sgd_lrs", "comma list of SGD learning rates");
        s.opt("--newton-steps", "newton_steps", "Newton steps in comparisons");
    }
    {
        SubArgs& s = make_sub("oracle", "run verification suites");
        s.opt("--suite", "suite", "hvp | cg | k0 | toy-quadratic | all");
    }
    {
        SubArgs& s = make_sub("train", "train the synthetic desk-scale CNN fixture");
        s.opt("--n", "n", "training samples");
        s.opt("--classes", "classes", "classes");
        s.opt("--noise", "noise", "class-noise stddev");
        s.opt("--hw", "hw", "image height/width");
        s.opt("--channels", "channels", "image channels");
        s.opt("--train-epochs", "train_epochs", "training epochs");
        s.opt("--lr", "lr", "learning rate");
        s.opt("--momentum", "momentum", "SGD momentum");
        s.opt("--batch-size", "batch_size", "training batch size");
    }

    CLI11_PARSE(app, argc, argv);

    try {
        for (auto& [name, s] : subs) {
            if (!s.app->parsed()) continue;
            nlohmann::json file_cfg = nlohmann::json::object();
            if (!s.config_path.empty()) file_cfg = snows::load_config_file(s.config_path);
            nlohmann::json cfg = snows::resolve_config(name, file_cfg, s.overrides());
            if (name == "prune") return snows::cmd_prune(std::move(cfg));
            if (name == "eval") return snows::cmd_eval(std::move(cfg));
            if (name == "ablate") return snows::cmd_ablate(std::move(cfg));
            if (name == "oracle") return snows::cmd_oracle(cfg);
            if (name == "train") return snows::cmd_train(std::move(cfg));
        }
        std::cerr << "no subcommand\n";
        return 2;
    } catch (const snows::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const snows::IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return 4;
    } catch (const snows::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
