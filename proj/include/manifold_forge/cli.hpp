#pragma once

// Command-line front end: spectrum | simulate | manifold | verify.
// Every run writes runs/<hash>/ with config.json, manifest.json and the
// command's outputs. The hash covers the resolved config and the command, so
// identical invocations land in the same directory with identical CSVs.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "config_json.hpp"
#include "dichotomy.hpp"
#include "errors.hpp"
#include "flow.hpp"
#include "manifold.hpp"
#include "noise.hpp"
#include "parallel.hpp"
#include "verify.hpp"

namespace mforge::cli {

inline constexpr const char* tool_version = "0.1.0";

enum ExitCode : int { ok = 0, failure = 1, usage = 2 };

/// Files produced by one command, held in memory until the run completes so a
/// failing run leaves nothing behind.
struct RunArtifact {
    std::string command;
    std::string content_hash;
    std::filesystem::path dir;
    std::vector<std::pair<std::string, std::string>> files;  // name, bytes (in emission order)
    nlohmann::json extra = nlohmann::json::object();

    void add(std::string name, std::string bytes) { files.emplace_back(std::move(name), std::move(bytes)); }
};

inline std::string content_hash(const RunConfig& rc, const std::string& command, const std::string& suite) {
    const std::string key = command + "|" + suite + "|" + run_config_to_json(rc).dump();
    return hex64(fnv1a64(key));
}

inline std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline void write_artifact(RunArtifact& art, const RunConfig& rc, const std::string& started, double seconds) {
    std::filesystem::create_directories(art.dir);
    std::vector<std::pair<std::string, std::string>> all;
    all.emplace_back("config.json", run_config_to_json(rc).dump(2) + "\n");
    for (auto& f : art.files) all.push_back(f);
    nlohmann::json files = nlohmann::json::array();
    for (const auto& [name, bytes] : all) {
        std::ofstream out(art.dir / name, std::ios::binary);
        out << bytes;
        if (!out) throw std::runtime_error("cannot write " + (art.dir / name).string());
        files.push_back({{"name", name}, {"bytes", bytes.size()}, {"fnv1a64", hex64(fnv1a64(bytes))}});
    }
    nlohmann::json manifest{{"tool", "manifold_forge"},
                            {"version", tool_version},
                            {"command", art.command},
                            {"content_hash", art.content_hash},
                            {"files", files},
                            {"wall_clock", {{"started_utc", started}, {"seconds", seconds}}},
                            {"threads", worker_count()}};
    for (auto it = art.extra.begin(); it != art.extra.end(); ++it) manifest[it.key()] = it.value();
    std::ofstream(art.dir / "manifest.json") << manifest.dump(2) << "\n";
}

namespace detail {

inline std::ostringstream csv_stream() {
    std::ostringstream os;
    os.precision(17);
    return os;
}

inline nlohmann::json root_json(const CharacteristicRoot& r) {
    return {{"re_per_time", r.lam.real()}, {"im_per_time", r.lam.imag()}, {"mode", r.mode},
            {"residual", r.residual}, {"multiplicity", r.multiplicity}};
}

inline nlohmann::json split_json(const SpectralSplit& s) {
    nlohmann::json roots = nlohmann::json::array();
    for (const auto& r : s.unstable_roots) roots.push_back(root_json(r));
    return {{"alpha_per_time", s.alpha}, {"beta_per_time", s.beta}, {"eta_per_time", s.eta}, {"K", s.K},
            {"unstable_dim", s.unstable_dim()}, {"unstable_roots", roots}};
}

inline nlohmann::json gap_report_json(const GapReport& g) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& o : g.orders)
        out.push_back({{"order", o.order}, {"applicable", o.applicable}, {"value", o.value},
                       {"margin", o.applicable ? 1.0 - o.value : 0.0}, {"holds", g.holds(o.order)}});
    return out;
}

inline std::string trajectory_csv(const Trajectory& tr, const NoiseRealization* noise, const Model& model,
                                  bool original) {
    const int N = model.cfg().modes;
    auto os = csv_stream();
    os << "t";
    for (int n = 1; n <= N; ++n) os << ",a" << n;
    os << ",norm_H,norm_X\n";
    for (std::size_t k = 0; k < tr.states.size(); ++k) {
        const ProductState& x = tr.states[k];
        os << tr.times[k];
        for (int n = 0; n < N; ++n) os << "," << x.head(n);
        // for the random PDE, the X column is the original field v = V + z at this time
        const SpectralField v = original ? x.head : SpectralField(x.head + model.z_at(noise, tr.times[k]));
        os << "," << x.norm() << "," << norm_X(v) << "\n";
    }
    return os.str();
}

}  // namespace detail

// --------------------------------------------------------------------------

inline RunArtifact cmd_spectrum(const RunConfig& rc) {
    RunArtifact art;
    const Model model(rc.model);
    const SplitChoice ch = choose_split(model, rc.split);
    nlohmann::json roots = nlohmann::json::object();
    for (std::size_t n = 0; n < ch.search.roots.size(); ++n) {
        nlohmann::json list = nlohmann::json::array();
        for (const auto& r : ch.search.roots[n]) list.push_back(detail::root_json(r));
        roots[std::to_string(n + 1)] = list;
    }
    nlohmann::json gaps = nlohmann::json::array();
    for (const auto& g : ch.search.gaps)
        gaps.push_back({{"lo_per_time", g.lo}, {"hi_per_time", g.hi}, {"width_per_time", g.width()},
                        {"roots_above", g.roots_above}, {"verified", g.verified}});
    nlohmann::json rep{{"roots_per_mode", roots},
                       {"search_window_per_time", {ch.search.re_lo, ch.search.re_hi}},
                       {"gaps", gaps},
                       {"split", detail::split_json(ch.split)},
                       {"K_estimate",
                        {{"K", ch.K.K}, {"sampled_max", ch.K.sampled_max}, {"safety", ch.K.safety},
                         {"worst_time", ch.K.worst_time}, {"worst_kind", ch.K.worst_kind}}},
                       {"lipschitz_f", rc.model.birth.lipschitz()},
                       {"critical_lipschitz", critical_lipschitz(ch.split.K, ch.split.alpha, ch.split.beta, ch.split.eta)},
                       {"gap_conditions", detail::gap_report_json(ch.conditions)}};
    art.add("spectrum.json", rep.dump(2) + "\n");

    auto os = detail::csv_stream();
    os << "mode,re,im,residual\n";
    for (const auto& list : ch.search.roots)
        for (const auto& r : list) os << r.mode << "," << r.lam.real() << "," << r.lam.imag() << "," << r.residual << "\n";
    art.add("roots.csv", os.str());
    std::cout << "split beta=" << ch.split.beta << " alpha=" << ch.split.alpha << " eta=" << ch.split.eta
              << " K=" << ch.split.K << " rho=" << ch.conditions.rho() << "\n";
    return art;
}

inline RunArtifact cmd_simulate(const RunConfig& rc) {
    RunArtifact art;
    const Model model(rc.model);
    const double T = rc.solver.T_time, dt = rc.solver.dt_time;
    const Fiber fib = sample_fiber(rc.model, rc.noise.seed, 0.0, T + rc.model.tau, rc.path_dt(), rc.tail_cutoff());
    const ProductState u0 = rc.initial_state();
    const ProductState v0 = transform(u0, &fib.noise, model, 0.0);
    const Trajectory random = solve_random_pde(v0, &fib.noise, model, T, dt);
    const Trajectory direct = solve_spde_direct(u0.segment, fib.noise, model, T, dt);
    const ProductState u_back = untransform(random.back(), &fib.noise, model, T);
    const double gap = (direct.back() - u_back).norm();
    const double res = mild_residual(random, &fib.noise, model);

    art.add("random_pde.csv", detail::trajectory_csv(random, &fib.noise, model, false));
    art.add("spde.csv", detail::trajectory_csv(direct, &fib.noise, model, true));
    art.add("final_segment_random_pde.csv", random.back().segment.to_csv());
    art.add("final_segment_spde.csv", direct.back().segment.to_csv());
    art.add("noise_path.csv", fib.path.to_csv());
    nlohmann::json meta{{"T_time", T},
                        {"dt_time", dt},
                        {"seed", rc.noise.seed},
                        {"path", {{"seed", fib.path.spec().seed}, {"t_lo_time", fib.path.t_lo()},
                                  {"t_hi_time", fib.path.t_hi()}, {"dt_time", fib.path.dt()}, {"m", fib.path.m()}}},
                        {"tail_cutoff_time", fib.noise.tail_cutoff()},
                        {"tail_bound", fib.noise.tail_bound()},
                        {"endpoint_gap_direct_vs_conjugated", gap},
                        {"mild_residual", res},
                        {"final_norm_H", random.back().norm()}};
    art.add("simulate.json", meta.dump(2) + "\n");
    std::cout << "T=" << T << " dt=" << dt << " endpoint gap=" << gap << " mild residual=" << res << "\n";
    return art;
}

inline RunArtifact cmd_manifold(const RunConfig& rc) {
    RunArtifact art;
    const Model model(rc.model);
    const SplitChoice ch = choose_split(model, rc.split);
    const bool stable = rc.manifold.graph == "stable";
    const LPGrid grid = LPGrid::make(ch.split, rc.model, stable, rc.lp.T_trunc_time);
    const double past = stable ? 0.0 : grid.T_trunc;
    const double future = stable ? grid.T_trunc : 0.0;
    const Fiber fib = sample_fiber(rc.model, rc.noise.seed, past + rc.model.tau, future + rc.model.tau, rc.path_dt(),
                                   rc.tail_cutoff());
    const NoiseRealization* noise = rc.model.has_noise() ? &fib.noise : nullptr;
    LPOptions opt;
    opt.tol = rc.lp.tol;
    opt.max_iter = rc.lp.max_iter;
    const auto basis = coordinate_basis(ch.split, rc.model, stable, rc.manifold.coordinates);
    const auto atlas = build_atlas(basis, rc.manifold.resolution, rc.manifold.half_width, noise, ch.split, model, grid, opt);

    const int N = rc.model.modes;
    const int d = static_cast<int>(basis.size());
    auto os = detail::csv_stream();
    auto sh = detail::csv_stream();
    for (int k = 1; k <= d; ++k) os << "c" << k << ",";
    for (int k = 1; k <= d; ++k) sh << "c" << k << ",";
    os << "h_norm";
    for (int n = 1; n <= N; ++n) os << ",h0_" << n;
    os << ",iterations,converged,residual,contraction,rho\n";
    for (int n = 1; n <= N; ++n) sh << "u0_" << n << ",";
    sh << "norm\n";
    int unconverged = 0;
    for (const auto& p : atlas) {
        const GraphSample& s = p.sample;
        for (int k = 0; k < d; ++k) os << p.coords(k) << ",";
        os << s.value.norm();
        for (int n = 0; n < N; ++n) os << "," << s.value.present()(n);
        os << "," << s.iterations << "," << (s.converged ? 1 : 0) << "," << s.residual << "," << s.observed_contraction
           << "," << s.rho_bound << "\n";
        if (!s.converged) ++unconverged;
        const HistorySegment shifted = shifted_manifold_point(s, noise, model);
        for (int k = 0; k < d; ++k) sh << p.coords(k) << ",";
        for (int n = 0; n < N; ++n) sh << shifted.present()(n) << ",";
        sh << shifted.norm() << "\n";
    }
    art.add("atlas.csv", os.str());
    art.add("shifted_manifold.csv", sh.str());
    nlohmann::json meta{{"graph", rc.manifold.graph},
                        {"split", detail::split_json(ch.split)},
                        {"gap_conditions", detail::gap_report_json(ch.conditions)},
                        {"T_trunc_time", grid.T_trunc},
                        {"dt_time", grid.dt},
                        {"tol", opt.tol},
                        {"seed", rc.noise.seed},
                        {"noise", rc.model.has_noise()},
                        {"points", atlas.size()},
                        {"unconverged", unconverged},
                        {"coordinate_box", {{"coordinates", d}, {"resolution", rc.manifold.resolution},
                                            {"half_width", rc.manifold.half_width}}}};
    art.add("manifold.json", meta.dump(2) + "\n");
    std::cout << rc.manifold.graph << " atlas: " << atlas.size() << " points, " << unconverged << " unconverged\n";
    return art;
}

inline const std::vector<std::string>& suite_names() {
    static const std::vector<std::string> names{"spectrum",   "dichotomy", "cocycle",     "mild",
                                                "contraction", "invariance", "tracking",   "conjugation",
                                                "degenerate",  "smoothness"};
    return names;
}

/// Runs the named suites on the configured model; returns the reports.
inline std::vector<PropertyReport> run_suites(const RunConfig& rc, const std::vector<std::string>& which) {
    const Model model(rc.model);
    std::vector<PropertyReport> out;
    auto wants = [&](const char* n) { return std::find(which.begin(), which.end(), n) != which.end(); };
    if (wants("spectrum")) out.push_back(run_spectrum_suite(rc.model));
    if (wants("mild")) {
        MildSettings ms;
        ms.seed = rc.noise.seed;
        out.push_back(run_mild_suite(rc.model, ms));
    }
    if (wants("conjugation")) {
        ConjugationSettings cs;
        cs.seeds = rc.seed_set();
        out.push_back(run_conjugation_suite(rc.model, cs));
    }
    if (wants("cocycle")) {
        CocycleSettings cs;
        cs.seeds = rc.seed_set();
        out.push_back(run_cocycle_suite(model, cs));
    }
    const bool needs_split = wants("dichotomy") || wants("contraction") || wants("invariance") || wants("tracking") ||
                             wants("degenerate") || wants("smoothness");
    if (!needs_split) return out;

    const SplitChoice ch = choose_split(model, rc.split);
    const SpectralSplit& split = ch.split;
    if (wants("dichotomy")) out.push_back(run_dichotomy_suite(split, model));
    if (wants("degenerate")) out.push_back(run_degenerate_suite(model, split, {0.5, rc.noise.seed}));

    const bool needs_atlas = wants("contraction") || wants("invariance") || wants("tracking");
    const double base = rc.lp.T_trunc_time.value_or(LPGrid::default_horizon(split));
    const LPGrid gs = LPGrid::make(split, rc.model, true, base + 2.0 * rc.model.tau);
    const LPGrid gu = LPGrid::make(split, rc.model, false, rc.lp.T_trunc_time);
    const Fiber fib = sample_fiber(rc.model, rc.noise.seed, gu.T_trunc + 3.0 * rc.model.tau,
                                   gs.T_trunc + 8.0 * rc.model.tau, rc.path_dt(), rc.tail_cutoff());
    const Fiber* fiber = rc.model.has_noise() ? &fib : nullptr;
    const NoiseRealization* noise = fiber ? &fiber->noise : nullptr;
    LPOptions opt;
    opt.tol = rc.lp.tol;
    opt.max_iter = rc.lp.max_iter;
    const std::string digest = config_fingerprint(rc.model, &split);

    if (needs_atlas) {
        auto atlas = [&](bool stable, std::string& err) {
            try {
                return build_atlas(coordinate_basis(split, rc.model, stable, rc.manifold.coordinates),
                                   rc.manifold.resolution, rc.manifold.half_width, noise, split, model,
                                   stable ? gs : gu, opt);
            } catch (const std::exception& e) {
                err = e.what();
                return std::vector<AtlasPoint>{};
            }
        };
        std::string es, eu;
        const auto as = atlas(true, es), au = atlas(false, eu);
        if (wants("contraction")) {
            for (bool stable : {true, false}) {
                PropertyReport r = run_contraction_suite(stable ? as : au, stable ? "stable" : "unstable", digest, opt.tol);
                if (!(stable ? es : eu).empty()) r.error("atlas", stable ? es : eu);
                out.push_back(std::move(r));
            }
        }
        if (wants("invariance")) {
            InvarianceSettings inv;
            inv.tol_inv = rc.lp.tol_inv;
            out.push_back(run_invariance_suite(as, fiber, split, model, gs, inv, opt));
            out.push_back(run_invariance_suite(au, fiber, split, model, gu, inv, opt));
        }
        if (wants("tracking")) out.push_back(run_tracking_suite(as, fiber, split, model));
    }
    if (wants("smoothness")) out.push_back(run_smoothness_suite(model, split, fiber));
    return out;
}

inline RunArtifact cmd_verify(const RunConfig& rc, const std::string& suite, bool& all_pass) {
    RunArtifact art;
    std::vector<std::string> which;
    if (suite == "all") which = suite_names();
    else which.push_back(suite);
    const auto reports = run_suites(rc, which);
    all_pass = !reports.empty();
    nlohmann::json index = nlohmann::json::array();
    for (const auto& r : reports) {
        std::cout << r.summary_line() << "\n";
        all_pass = all_pass && r.all_pass();
        art.add("verify_" + r.name() + ".json", r.to_json().dump(2) + "\n");
        index.push_back({{"suite", r.name()}, {"pass", r.all_pass()}, {"cases", r.cases().size()},
                         {"failures", r.failures()}});
    }
    art.add("verify_summary.json", nlohmann::json{{"suites", index}, {"pass", all_pass}}.dump(2) + "\n");
    return art;
}

// --------------------------------------------------------------------------

/// Entry point shared by the executable and the tests.
inline int run_main(int argc, char** argv) {
    CLI::App app{"Random invariant manifolds of a delayed stochastic reaction-diffusion model"};
    app.require_subcommand(1);
    std::string config_path, out_dir, suite = "all";
    std::optional<std::uint64_t> seed;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "RunConfig JSON file")->required();
        sub->add_option("--seed", seed, "override noise.seed");
        sub->add_option("--out", out_dir, "parent directory for runs/<hash> (default: outputs.dir)");
    };
    CLI::App* spectrum = app.add_subcommand("spectrum", "characteristic roots, gaps, split and K");
    CLI::App* simulate = app.add_subcommand("simulate", "trajectories of the SPDE and its conjugated random PDE");
    CLI::App* manifold = app.add_subcommand("manifold", "graph atlas of the stable or unstable manifold");
    CLI::App* verify = app.add_subcommand("verify", "property suites; exit code 1 if any case fails");
    for (CLI::App* sub : {spectrum, simulate, manifold, verify}) add_common(sub);
    std::vector<std::string> choices = suite_names();
    choices.push_back("all");
    verify->add_option("--suite", suite, "suite name or all")->check(CLI::IsMember(choices));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : usage;
    }

    if (!std::filesystem::exists(config_path)) {
        std::cerr << "error: config file not found: " << config_path << "\n";
        return usage;
    }
    RunConfig rc;
    try {
        rc = load_run_config(config_path);
        if (seed) rc.noise.seed = *seed;
        rc.validate();
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return usage;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    const std::string started = utc_now();
    const auto t0 = std::chrono::steady_clock::now();
    RunArtifact art;
    int code = ok;
    try {
        if (command == "spectrum") art = cmd_spectrum(rc);
        else if (command == "simulate") art = cmd_simulate(rc);
        else if (command == "manifold") art = cmd_manifold(rc);
        else {
            bool pass = false;
            art = cmd_verify(rc, suite, pass);
            code = pass ? ok : failure;
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return usage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return failure;
    }
    art.command = command;
    art.content_hash = content_hash(rc, command, command == "verify" ? suite : "");
    art.dir = std::filesystem::path(out_dir.empty() ? rc.output_dir : out_dir) / art.content_hash;
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    try {
        write_artifact(art, rc, started, seconds);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return failure;
    }
    std::cout << "run directory: " << art.dir.string() << "\n";
    return code;
}

}  // namespace mforge::cli
