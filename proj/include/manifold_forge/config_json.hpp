#pragma once

// RunConfig: the JSON run description shared by the CLI and the acceptance
// driver. Every physical quantity carries its unit in the key name.

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dichotomy.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "noise.hpp"

namespace mforge {

struct SolverSettings {
    double dt_time = 0.01;
    double T_time = 5.0;
    // constant-in-xi initial history, one sine coefficient per mode (missing modes are 0)
    std::vector<double> initial_history_coeffs{0.1};
};

struct LPSettings {
    std::optional<double> T_trunc_time;  // default: smallest admissible horizon for the split
    double tol = 1e-8;
    int max_iter = 200;
    double tol_inv = 1e-3;
};

struct NoiseSettings {
    std::uint64_t seed = 1;
    std::vector<std::uint64_t> seeds;  // seed set for multi-seed suites; empty means 1..20
    std::optional<double> tail_cutoff_time;  // default 20 / mu
    std::optional<double> path_dt_time;      // default dt_time
};

struct ManifoldSettings {
    std::string graph = "unstable";  // "stable" or "unstable"
    int coordinates = 2;             // leading basis vectors spanning the zeta box
    int resolution = 5;
    double half_width = 0.5;
};

struct RunConfig {
    ModelConfig model;
    SplitRequest split;
    SolverSettings solver;
    LPSettings lp;
    NoiseSettings noise;
    ManifoldSettings manifold;
    std::string output_dir = "runs";

    std::vector<std::uint64_t> seed_set() const {
        if (!noise.seeds.empty()) return noise.seeds;
        std::vector<std::uint64_t> s;
        for (std::uint64_t i = 1; i <= 20; ++i) s.push_back(i);
        return s;
    }
    double tail_cutoff() const { return noise.tail_cutoff_time.value_or(default_tail_cutoff(model.mu)); }
    double path_dt() const { return noise.path_dt_time.value_or(solver.dt_time); }

    ProductState initial_state() const {
        ProductState x = ProductState::zero(model);
        for (std::size_t n = 0; n < solver.initial_history_coeffs.size(); ++n)
            x.segment.values.col(static_cast<Eigen::Index>(n)).setConstant(solver.initial_history_coeffs[n]);
        return ProductState::compatible_from(x.segment);
    }

    /// All checks that need no spectral computation.
    void validate() const {
        auto fail = [](const std::string& field, const std::string& what) {
            throw ConfigError("config field " + field + ": " + what);
        };
        model.validate();
        const double dt = solver.dt_time;
        if (!(dt > 0.0)) fail("solver.dt_time", "must be positive");
        if (std::abs(dt - model.dt()) > 1e-12 * model.dt()) {
            std::ostringstream os;
            os.precision(17);
            os << "must equal tau_time / (history_pts - 1) = " << model.dt() << " (got " << dt << ")";
            fail("solver.dt_time", os.str());
        }
        auto multiple_of = [](double t, double step) {
            const double q = t / step;
            return std::abs(q - std::round(q)) <= 1e-9 * std::max(1.0, q);
        };
        if (!(solver.T_time > 0.0)) fail("solver.T_time", "must be positive");
        if (!multiple_of(solver.T_time, dt)) fail("solver.T_time", "must be a multiple of dt_time");
        if (static_cast<int>(solver.initial_history_coeffs.size()) > model.modes)
            fail("solver.initial_history_coeffs", "has more entries than modes");
        if (lp.T_trunc_time) {
            if (!(*lp.T_trunc_time > 0.0)) fail("lp.T_trunc_time", "must be positive");
            if (!multiple_of(*lp.T_trunc_time, dt)) fail("lp.T_trunc_time", "must be a multiple of dt_time");
        }
        if (!(lp.tol > 0.0)) fail("lp.tol", "must be positive");
        if (lp.max_iter < 1) fail("lp.max_iter", "must be >= 1");
        if (!(lp.tol_inv > 0.0)) fail("lp.tol_inv", "must be positive");
        if (!(tail_cutoff() > 0.0)) fail("noise.tail_cutoff_time", "must be positive");
        const double pdt = path_dt();
        if (!(pdt > 0.0) || !multiple_of(dt, pdt)) fail("noise.path_dt_time", "must be positive and divide dt_time");
        if (!multiple_of(model.tau, pdt)) fail("noise.path_dt_time", "must divide tau_time");
        if (split.re_lo >= split.re_hi) fail("split.re_lo_per_time", "must be below split.re_hi_per_time");
        if (!(split.margin >= 0.0 && split.margin < 0.5)) fail("split.margin", "must lie in [0, 0.5)");
        if (split.alpha.has_value() != split.beta.has_value())
            fail("split.alpha_per_time", "alpha_per_time and beta_per_time must be given together");
        if (split.alpha && !(*split.beta < *split.alpha)) fail("split.beta_per_time", "must be below alpha_per_time");
        if (split.eta && split.alpha && !(*split.beta < *split.eta && *split.eta < *split.alpha))
            fail("split.eta_per_time", "must lie strictly between beta_per_time and alpha_per_time");
        if (split.order < 1) fail("split.order", "must be >= 1");
        if (split.K_samples < 1) fail("split.K_samples", "must be >= 1");
        if (manifold.graph != "stable" && manifold.graph != "unstable")
            fail("manifold.graph", "must be \"stable\" or \"unstable\"");
        if (manifold.coordinates < 1) fail("manifold.coordinates", "must be >= 1");
        if (manifold.resolution < 1) fail("manifold.resolution", "must be >= 1");
        if (!(manifold.half_width >= 0.0)) fail("manifold.half_width", "must be non-negative");
    }
};

/// Desk-scale defaults: eight modes, unit delay, r = 100, two noise shapes
/// of amplitude 0.02 on the first two modes, rational birth with p = 0.005.
inline RunConfig desk_config() {
    RunConfig rc;
    rc.model.mu = 1.0;
    rc.model.delta = 0.5;
    rc.model.tau = 1.0;
    rc.model.modes = 8;
    rc.model.history_intervals = 100;
    rc.model.g.assign(2, SpectralField::Zero(8));
    rc.model.g[0](0) = 0.02;
    rc.model.g[1](1) = 0.02;
    rc.model.birth = BirthFunction::rational(0.005);
    rc.solver.dt_time = 0.01;
    rc.solver.T_time = 5.0;
    return rc;
}

namespace detail {

using nlohmann::json;

inline const json* find(const json& j, const char* key) {
    auto it = j.find(key);
    return it == j.end() || it->is_null() ? nullptr : &*it;
}

template <class T>
void read(const json& obj, const char* section, const char* key, T& out) {
    if (const json* v = find(obj, key)) {
        try {
            out = v->get<T>();
        } catch (const json::exception&) {
            throw ConfigError(std::string("config field ") + section + "." + key + ": wrong type");
        }
    }
}

template <class T>
void read_opt(const json& obj, const char* section, const char* key, std::optional<T>& out) {
    if (const json* v = find(obj, key)) {
        T tmp{};
        read(obj, section, key, tmp);
        out = tmp;
        (void)v;
    }
}

inline void reject_unknown(const json& obj, const char* section, std::initializer_list<const char*> known) {
    if (!obj.is_object()) throw ConfigError(std::string("config section ") + section + ": must be an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError(std::string("config field ") + section + "." + it.key() + ": unknown key");
    }
}

template <class T>
json opt_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

}  // namespace detail

/// Parses a RunConfig; missing keys keep the desk defaults. Unknown keys are
/// rejected so typos in unit-suffixed names do not pass silently.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
    using detail::read;
    using detail::read_opt;
    RunConfig rc = desk_config();
    detail::reject_unknown(j, "root", {"model", "split", "solver", "lp", "noise", "manifold", "outputs"});

    if (const auto* m = detail::find(j, "model")) {
        detail::reject_unknown(*m, "model",
                               {"mu_per_time", "delta_per_time", "tau_time", "modes", "history_pts", "noise_shapes",
                                "birth"});
        read(*m, "model", "mu_per_time", rc.model.mu);
        read(*m, "model", "delta_per_time", rc.model.delta);
        read(*m, "model", "tau_time", rc.model.tau);
        read(*m, "model", "modes", rc.model.modes);
        int pts = rc.model.history_intervals + 1;
        read(*m, "model", "history_pts", pts);
        if (pts < 2) throw ConfigError("config field model.history_pts: must be >= 2");
        rc.model.history_intervals = pts - 1;
        if (const auto* shapes = detail::find(*m, "noise_shapes")) {
            if (!shapes->is_array() || shapes->empty())
                throw ConfigError("config field model.noise_shapes: must be a non-empty array of coefficient arrays");
            rc.model.g.clear();
            for (const auto& s : *shapes) {
                std::vector<double> c;
                try {
                    c = s.get<std::vector<double>>();
                } catch (const nlohmann::json::exception&) {
                    throw ConfigError("config field model.noise_shapes: entries must be arrays of numbers");
                }
                if (static_cast<int>(c.size()) != rc.model.modes)
                    throw ConfigError("config field model.noise_shapes: each shape needs `modes` coefficients");
                rc.model.g.push_back(Eigen::Map<const Eigen::VectorXd>(c.data(), static_cast<Eigen::Index>(c.size())));
            }
        } else if (rc.model.modes >= 1) {
            // default shapes, resized to the requested mode count
            for (std::size_t j = 0; j < rc.model.g.size(); ++j) {
                SpectralField gj = SpectralField::Zero(rc.model.modes);
                if (static_cast<int>(j) < rc.model.modes) gj(static_cast<Eigen::Index>(j)) = 0.02;
                rc.model.g[j] = gj;
            }
        }
        if (const auto* b = detail::find(*m, "birth")) {
            detail::reject_unknown(*b, "model.birth", {"kind", "p_per_time"});
            std::string kind = "rational";
            double p = 0.005;
            read(*b, "model.birth", "kind", kind);
            read(*b, "model.birth", "p_per_time", p);
            if (kind == "rational") rc.model.birth = BirthFunction::rational(p);
            else if (kind == "linear") rc.model.birth = BirthFunction::linear(p);
            else if (kind == "zero") rc.model.birth = BirthFunction::zero();
            else throw ConfigError("config field model.birth.kind: expected rational, linear or zero");
        }
    }
    if (const auto* s = detail::find(j, "split")) {
        detail::reject_unknown(*s, "split",
                               {"re_lo_per_time", "re_hi_per_time", "margin", "alpha_per_time", "beta_per_time",
                                "eta_per_time", "order", "K_horizon_time", "K_samples", "K_seed"});
        read(*s, "split", "re_lo_per_time", rc.split.re_lo);
        read(*s, "split", "re_hi_per_time", rc.split.re_hi);
        read(*s, "split", "margin", rc.split.margin);
        read_opt(*s, "split", "alpha_per_time", rc.split.alpha);
        read_opt(*s, "split", "beta_per_time", rc.split.beta);
        read_opt(*s, "split", "eta_per_time", rc.split.eta);
        read(*s, "split", "order", rc.split.order);
        read(*s, "split", "K_horizon_time", rc.split.K_horizon);
        read(*s, "split", "K_samples", rc.split.K_samples);
        read(*s, "split", "K_seed", rc.split.K_seed);
    }
    if (const auto* s = detail::find(j, "solver")) {
        detail::reject_unknown(*s, "solver", {"dt_time", "T_time", "initial_history_coeffs"});
        read(*s, "solver", "dt_time", rc.solver.dt_time);
        read(*s, "solver", "T_time", rc.solver.T_time);
        read(*s, "solver", "initial_history_coeffs", rc.solver.initial_history_coeffs);
    }
    if (const auto* s = detail::find(j, "lp")) {
        detail::reject_unknown(*s, "lp", {"T_trunc_time", "tol", "max_iter", "tol_inv"});
        read_opt(*s, "lp", "T_trunc_time", rc.lp.T_trunc_time);
        read(*s, "lp", "tol", rc.lp.tol);
        read(*s, "lp", "max_iter", rc.lp.max_iter);
        read(*s, "lp", "tol_inv", rc.lp.tol_inv);
    }
    if (const auto* s = detail::find(j, "noise")) {
        detail::reject_unknown(*s, "noise", {"seed", "seeds", "tail_cutoff_time", "path_dt_time"});
        read(*s, "noise", "seed", rc.noise.seed);
        read(*s, "noise", "seeds", rc.noise.seeds);
        read_opt(*s, "noise", "tail_cutoff_time", rc.noise.tail_cutoff_time);
        read_opt(*s, "noise", "path_dt_time", rc.noise.path_dt_time);
    }
    if (const auto* s = detail::find(j, "manifold")) {
        detail::reject_unknown(*s, "manifold", {"graph", "coordinates", "resolution", "half_width"});
        read(*s, "manifold", "graph", rc.manifold.graph);
        read(*s, "manifold", "coordinates", rc.manifold.coordinates);
        read(*s, "manifold", "resolution", rc.manifold.resolution);
        read(*s, "manifold", "half_width", rc.manifold.half_width);
    }
    if (const auto* s = detail::find(j, "outputs")) {
        detail::reject_unknown(*s, "outputs", {"dir"});
        read(*s, "outputs", "dir", rc.output_dir);
    }
    return rc;
}

inline nlohmann::json run_config_to_json(const RunConfig& rc) {
    using nlohmann::json;
    json shapes = json::array();
    for (const auto& gj : rc.model.g) shapes.push_back(std::vector<double>(gj.data(), gj.data() + gj.size()));
    json j;
    j["model"] = {{"mu_per_time", rc.model.mu},
                  {"delta_per_time", rc.model.delta},
                  {"tau_time", rc.model.tau},
                  {"modes", rc.model.modes},
                  {"history_pts", rc.model.nodes()},
                  {"noise_shapes", shapes},
                  {"birth", {{"kind", rc.model.birth.kind()}, {"p_per_time", rc.model.birth.p()}}}};
    j["split"] = {{"re_lo_per_time", rc.split.re_lo},
                  {"re_hi_per_time", rc.split.re_hi},
                  {"margin", rc.split.margin},
                  {"alpha_per_time", detail::opt_json(rc.split.alpha)},
                  {"beta_per_time", detail::opt_json(rc.split.beta)},
                  {"eta_per_time", detail::opt_json(rc.split.eta)},
                  {"order", rc.split.order},
                  {"K_horizon_time", rc.split.K_horizon},
                  {"K_samples", rc.split.K_samples},
                  {"K_seed", rc.split.K_seed}};
    j["solver"] = {{"dt_time", rc.solver.dt_time},
                   {"T_time", rc.solver.T_time},
                   {"initial_history_coeffs", rc.solver.initial_history_coeffs}};
    j["lp"] = {{"T_trunc_time", detail::opt_json(rc.lp.T_trunc_time)},
               {"tol", rc.lp.tol},
               {"max_iter", rc.lp.max_iter},
               {"tol_inv", rc.lp.tol_inv}};
    j["noise"] = {{"seed", rc.noise.seed},
                  {"seeds", rc.noise.seeds},
                  {"tail_cutoff_time", detail::opt_json(rc.noise.tail_cutoff_time)},
                  {"path_dt_time", detail::opt_json(rc.noise.path_dt_time)}};
    j["manifold"] = {{"graph", rc.manifold.graph},
                     {"coordinates", rc.manifold.coordinates},
                     {"resolution", rc.manifold.resolution},
                     {"half_width", rc.manifold.half_width}};
    j["outputs"] = {{"dir", rc.output_dir}};
    return j;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    RunConfig rc = run_config_from_json(j);
    rc.validate();
    return rc;
}

}  // namespace mforge
