#pragma once

#include <fstream>
#include <json.hpp>

#include "snows/common.hpp"

namespace snows {

inline constexpr const char* kVersionString = "snows-0.1.0";

// Resolved run configuration: typed defaults per subcommand, overlaid by an
// optional JSON config file, overlaid by command-line flags. Flags win. The
// resolved document is echoed into the run directory for replay.

inline nlohmann::json default_config(const std::string& cmd) {
    using nlohmann::json;
    json c = {{"command", cmd}, {"version", kVersionString}, {"seed", std::uint64_t{0}},
              {"dtype", "auto"}, {"threads", 1}, {"out", ""}};
    auto solver = [&c] {
        c["k"] = 3;
        c["lambda"] = 1e-4;
        c["cg_tol"] = 1e-3;
        c["cg_max_iters"] = 100;
        c["cg_eps_fd"] = 0.0;
        c["cg_relative_tol"] = false;
        c["batch_size"] = 128;
        c["batches"] = 0;
        c["epochs"] = 1;
        c["calib_n"] = 0;
        c["classes"] = 10;
    };
    if (cmd == "prune") {
        c["manifest"] = "";
        c["checkpoint"] = "";
        c["data"] = "";
        solver();
        c["mask"] = "nm:2:4";
        c["mask_for"] = nlohmann::json::object();
        c["deterministic"] = false;
    } else if (cmd == "eval") {
        c["manifest"] = "";
        c["checkpoint"] = "";
        c["dense"] = "";
        c["data"] = "";
        c["k"] = 3;
        c["classes"] = 10;
    } else if (cmd == "ablate") {
        c["study"] = "";
        c["manifest"] = "";
        c["checkpoint"] = "";
        c["data"] = "";
        solver();
        c["mask"] = "nm:2:4";
        c["k_values"] = std::vector<int>{0, 1, 3, 5};
        c["cg_iter_values"] = std::vector<int>{5, 50, 500};
        c["sgd_steps"] = 2000;
        c["sgd_lrs"] = std::vector<double>{1e-3, 1e-2, 1e-1};
        c["newton_steps"] = 10;
    } else if (cmd == "oracle") {
        c["suite"] = "all";
        c["dtype"] = "f64";  // oracles always run double
    } else if (cmd == "train") {
        c["n"] = 2000;
        c["classes"] = 10;
        c["noise"] = 1.5;
        c["hw"] = 8;
        c["channels"] = 3;
        c["train_epochs"] = 20;
        c["lr"] = 0.05;
        c["momentum"] = 0.9;
        c["batch_size"] = 64;
        c["dtype"] = "f64";
    } else {
        throw ValueError("unknown subcommand '" + cmd + "'");
    }
    return c;
}

namespace detail {

template <typename T>
std::vector<T> parse_list(const std::string& s) {
    std::vector<T> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        std::size_t comma = s.find(',', pos);
        std::string item = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (!item.empty()) {
            if constexpr (std::is_same_v<T, int>)
                out.push_back(std::stoi(item));
            else
                out.push_back(static_cast<T>(std::stod(item)));
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

}  // namespace detail

// Typed assignment of a textual flag value, using the default's JSON type.
inline void apply_override(nlohmann::json& cfg, const std::string& key, const std::string& value) {
    if (key == "mask_for") {  // repeated WEIGHT=SPEC entries
        auto eq = value.find('=');
        if (eq == std::string::npos) throw ValueError("--mask-for expects WEIGHT=SPEC, got '" + value + "'");
        cfg["mask_for"][value.substr(0, eq)] = value.substr(eq + 1);
        return;
    }
    if (!cfg.contains(key)) throw ValueError("unknown option '" + key + "' for " + cfg["command"].get<std::string>());
    nlohmann::json& slot = cfg[key];
    try {
        if (slot.is_boolean())
            slot = (value == "true" || value == "1" || value == "yes");
        else if (slot.is_number_float())
            slot = std::stod(value);
        else if (slot.is_number_unsigned())
            slot = static_cast<std::uint64_t>(std::stoull(value));
        else if (slot.is_number_integer())
            slot = static_cast<std::int64_t>(std::stoll(value));
        else if (slot.is_array() && !slot.empty() && slot[0].is_number_integer())
            slot = detail::parse_list<int>(value);
        else if (slot.is_array())
            slot = detail::parse_list<double>(value);
        else
            slot = value;
    } catch (const std::exception&) {
        throw ValueError("cannot parse '" + value + "' for option '" + key + "'");
    }
}

// defaults <- config file <- flags; one precedence rule.
inline nlohmann::json resolve_config(const std::string& cmd, const nlohmann::json& file_cfg,
                                     const std::vector<std::pair<std::string, std::string>>& flags) {
    nlohmann::json cfg = default_config(cmd);
    for (auto it = file_cfg.begin(); it != file_cfg.end(); ++it) {
        if (it.key() == "command" || it.key() == "version") continue;
        if (!cfg.contains(it.key()))
            throw ValueError("unknown config key '" + it.key() + "' for " + cmd);
        if (cfg[it.key()].type() != it.value().type() && !(cfg[it.key()].is_number() && it.value().is_number()))
            throw ValueError("config key '" + it.key() + "' has wrong type");
        cfg[it.key()] = it.value();
    }
    for (const auto& [k, v] : flags) apply_override(cfg, k, v);
    return cfg;
}

inline nlohmann::json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("cannot parse config '" + path + "': " + e.what());
    }
    return j;
}

}  // namespace snows
