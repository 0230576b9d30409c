// Acceptance driver: one PASS/FAIL line per criterion at desk scale, plus
// INFO lines with the measurements behind each verdict.

#include <manifold_forge/config_json.hpp>
#include <manifold_forge/verify.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <string>

using namespace mforge;

namespace {

int failures = 0;

void info(const std::string& s) { std::cout << "  INFO " << s << "\n" << std::flush; }

void print_failures(const PropertyReport& rep, std::size_t limit = 6) {
    std::size_t shown = 0;
    for (const auto& c : rep.cases()) {
        if (c.pass) continue;
        if (shown++ == limit) {
            info(rep.name() + ": further failing cases omitted");
            break;
        }
        std::ostringstream os;
        os << rep.name() << " failing: " << c.label << " measured=" << c.measured << " threshold=" << c.threshold;
        if (!c.note.empty()) os << " [" << c.note << "]";
        info(os.str());
    }
}

void worst_case(const PropertyReport& rep) {
    const PropertyCase* worst = nullptr;
    double w = -1.0;
    for (const auto& c : rep.cases())
        if (c.threshold > 0.0 && std::isfinite(c.measured) && c.measured / c.threshold > w) {
            w = c.measured / c.threshold;
            worst = &c;
        }
    if (worst != nullptr) {
        std::ostringstream os;
        os << rep.name() << " tightest: " << worst->label << " measured=" << worst->measured
           << " threshold=" << worst->threshold;
        if (!worst->note.empty()) os << " [" << worst->note << "]";
        info(os.str());
    }
}

void verdict(int id, const std::string& name, bool pass, double seconds, double limit, const std::string& detail) {
    const bool in_time = seconds < limit;
    std::ostringstream os;
    os << (pass && in_time ? "PASS" : "FAIL") << " criterion " << id << ": " << name << " (" << detail << "; "
       << std::fixed << std::setprecision(1) << seconds << "s of " << limit << "s)";
    std::cout << os.str() << "\n" << std::flush;
    if (!(pass && in_time)) ++failures;
}

double since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string summary(const std::vector<const PropertyReport*>& reps) {
    std::size_t total = 0, bad = 0;
    for (const auto* r : reps) {
        total += r->cases().size();
        bad += r->failures();
    }
    std::ostringstream os;
    os << total - bad << "/" << total << " cases pass";
    return os.str();
}

void report_all(const std::vector<const PropertyReport*>& reps) {
    for (const auto* r : reps) {
        info(r->summary_line());
        worst_case(*r);
        print_failures(*r);
    }
}

ModelConfig without_noise(ModelConfig cfg) {
    for (auto& gj : cfg.g) gj.setZero();
    return cfg;
}

}  // namespace

int main() {
    using clock = std::chrono::steady_clock;
    const RunConfig desk = desk_config();
    const ModelConfig& cfg = desk.model;
    const Model model(cfg);
    std::cout << "desk scale: N=" << cfg.modes << " tau=" << cfg.tau << " r=" << cfg.history_intervals
              << " mu=" << cfg.mu << " delta=" << cfg.delta << " m=" << cfg.m() << " sigma=0.02 L_f="
              << cfg.birth.lipschitz() << " threads=" << worker_count() << "\n";

    // 1: spectrum
    {
        auto t0 = clock::now();
        const PropertyReport rep = run_spectrum_suite(cfg);
        const double s = since(t0);
        report_all({&rep});
        verdict(1, "spectrum correctness", rep.all_pass(), s, 10.0, summary({&rep}));
    }

    auto t_split = clock::now();
    const SplitChoice choice = choose_split(model, desk.split);
    const SpectralSplit& split = choice.split;
    {
        std::ostringstream os;
        os << "split beta=" << split.beta << " alpha=" << split.alpha << " eta=" << split.eta << " K=" << split.K
           << " d_u=" << split.unstable_dim() << " rho=" << choice.conditions.rho() << " ("
           << std::setprecision(3) << since(t_split) << "s)";
        info(os.str());
    }

    // 2: dichotomy
    {
        auto t0 = clock::now();
        const PropertyReport rep = run_dichotomy_suite(split, model);
        const double s = since(t0);
        report_all({&rep});
        verdict(2, "exponential dichotomy", rep.all_pass(), s, 120.0, summary({&rep}));
    }

    // 3: cocycle and semigroup
    {
        auto t0 = clock::now();
        const PropertyReport rep = run_cocycle_suite(model);
        const double s = since(t0);
        report_all({&rep});
        verdict(3, "cocycle and semigroup", rep.all_pass(), s, 60.0, summary({&rep}));
    }

    // 4: mild residual
    {
        auto t0 = clock::now();
        const PropertyReport rep = run_mild_suite(cfg);
        const double s = since(t0);
        report_all({&rep});
        verdict(4, "mild-solution residual", rep.all_pass(), s, 120.0, summary({&rep}));
    }

    // Shared fiber and grids for 5-7. The stable horizon leaves 2 tau for the
    // shifted solves of the invariance check.
    const LPGrid grid_s = LPGrid::make(split, cfg, true, LPGrid::default_horizon(split) + 2.0 * cfg.tau);
    const LPGrid grid_u = LPGrid::make(split, cfg, false);
    const double past = grid_u.T_trunc + 3.0 * cfg.tau;
    const double future = grid_s.T_trunc + 8.0 * cfg.tau;
    const std::uint64_t seed = desk.noise.seed;
    const double fine_dt = cfg.tau / (2.0 * cfg.history_intervals);
    const Fiber fiber = sample_fiber(cfg, seed, past, future, fine_dt);
    const auto basis_s = coordinate_basis(split, cfg, true, 2);
    const auto basis_u = coordinate_basis(split, cfg, false, 2);
    LPOptions lp;
    lp.tol = desk.lp.tol;
    lp.max_iter = desk.lp.max_iter;
    const std::string digest = config_fingerprint(cfg, &split);

    const ModelConfig quiet_cfg = without_noise(cfg);
    const Model quiet(quiet_cfg);

    auto atlas_or_error = [&](const std::vector<ProductState>& basis, const NoiseRealization* noise, const Model& m,
                              const LPGrid& grid, std::string& err) {
        try {
            return build_atlas(basis, 5, 0.5, noise, split, m, grid, lp);
        } catch (const std::exception& e) {
            err = e.what();
            return std::vector<AtlasPoint>{};
        }
    };

    // 5: contraction
    std::vector<AtlasPoint> atlas_s, atlas_u, quiet_s;
    {
        auto t0 = clock::now();
        std::string es, eu;
        atlas_s = atlas_or_error(basis_s, &fiber.noise, model, grid_s, es);
        atlas_u = atlas_or_error(basis_u, &fiber.noise, model, grid_u, eu);
        PropertyReport rs = run_contraction_suite(atlas_s, "stable", digest, lp.tol);
        PropertyReport ru = run_contraction_suite(atlas_u, "unstable", digest, lp.tol);
        if (!es.empty()) rs.error("stable atlas", es);
        if (!eu.empty()) ru.error("unstable atlas", eu);
        const double s = since(t0);
        report_all({&rs, &ru});
        verdict(5, "Lyapunov-Perron contraction (5x5 atlases)", rs.all_pass() && ru.all_pass(), s, 300.0,
                summary({&rs, &ru}));

        std::string eq;
        quiet_s = atlas_or_error(basis_s, nullptr, quiet, grid_s, eq);
        PropertyReport rq = run_contraction_suite(quiet_s, "stable-zero-noise", digest, lp.tol);
        if (!eq.empty()) rq.error("stable atlas", eq);
        info("zero-noise fiber, not part of the verdict: " + rq.summary_line());
        worst_case(rq);
    }

    // 6: invariance with dt halving
    {
        auto t0 = clock::now();
        InvarianceSettings inv;
        inv.tol_inv = desk.lp.tol_inv;
        const InvarianceMeasure ms = measure_invariance(atlas_s, &fiber, split, model, grid_s, inv, lp);
        const InvarianceMeasure mu = measure_invariance(atlas_u, &fiber, split, model, grid_u, inv, lp);
        PropertyReport rep("invariance", digest, {seed});
        report_invariance(rep, "stable", ms, inv);
        report_invariance(rep, "unstable", mu, inv);
        if (atlas_s.empty()) rep.error("stable atlas", "no stable atlas");
        if (atlas_u.empty()) rep.error("unstable atlas", "no unstable atlas");

        // same Wiener path, half the step
        ModelConfig fine_cfg = cfg;
        fine_cfg.history_intervals = 2 * cfg.history_intervals;
        const Model fine(fine_cfg);
        const SpectralSplit fine_split = make_split(fine_cfg, split.beta, split.alpha, split.eta, -4.0);
        SpectralSplit fs = fine_split;
        fs.K = split.K;
        const LPGrid fgs = LPGrid::make(fs, fine_cfg, true, grid_s.T_trunc);
        const LPGrid fgu = LPGrid::make(fs, fine_cfg, false, grid_u.T_trunc);
        const Fiber fine_fiber{fiber.path, NoiseRealization(fiber.path, cfg.mu, fiber.noise.tail_cutoff())};
        const std::size_t n = inv.max_points;
        auto refine = [&](bool stable, const std::vector<AtlasPoint>& coarse) {
            std::vector<AtlasPoint> out;
            const auto basis = coordinate_basis(fs, fine_cfg, stable, 2);
            for (std::size_t i = 0; i < std::min(n, coarse.size()); ++i) out.push_back({coarse[i].coords, {}});
            parallel_for(out.size(), [&](std::size_t i) {
                out[i].sample =
                    solve_graph(combine(basis, out[i].coords), &fine_fiber.noise, fs, fine, stable ? fgs : fgu, lp);
            });
            return out;
        };
        for (bool stable : {true, false}) {
            const InvarianceMeasure& coarse = stable ? ms : mu;
            const char* which = stable ? "stable" : "unstable";
            try {
                const auto fa = refine(stable, stable ? atlas_s : atlas_u);
                const InvarianceMeasure mf =
                    measure_invariance(fa, &fine_fiber, fs, fine, stable ? fgs : fgu, inv, lp);
                const auto wc = worst_defects(coarse), wf = worst_defects(mf);
                for (std::size_t k = 0; k < inv.times_tau.size(); ++k) {
                    std::ostringstream l;
                    l << which << " worst defect at t=" << inv.times_tau[k] << " tau, dt " << cfg.dt() << " -> "
                      << fine_cfg.dt();
                    rep.check(l.str(), wf[k], wc[k], std::isfinite(wf[k]) && std::isfinite(wc[k]) && wf[k] <= wc[k],
                              "coarse " + detail::fmt_t(wc[k]) + ", fine " + detail::fmt_t(wf[k]));
                }
            } catch (const std::exception& e) {
                rep.error(std::string(which) + " refinement", e.what());
            }
        }
        const double s = since(t0);
        report_all({&rep});
        for (const auto& c : rep.cases())
            if (c.label.find("worst defect") != std::string::npos)
                info(std::string(c.pass ? "ok   " : "FAIL ") + c.label + " [" + c.note + "]");
        verdict(6, "invariance of both graphs", rep.all_pass(), s, 600.0, summary({&rep}));

        InvarianceSettings quiet_inv = inv;
        const InvarianceMeasure mq = measure_invariance(quiet_s, nullptr, split, quiet, grid_s, quiet_inv, lp);
        PropertyReport rq("invariance-stable-zero-noise", digest);
        report_invariance(rq, "stable", mq, quiet_inv);
        info("zero-noise fiber, not part of the verdict: " + rq.summary_line());
        worst_case(rq);
    }

    // 7: tracking
    {
        auto t0 = clock::now();
        PropertyReport rep = run_tracking_suite(atlas_s, &fiber, split, model);
        if (atlas_s.empty()) rep.error("stable atlas", "no stable atlas");
        const double s = since(t0);
        report_all({&rep});
        verdict(7, "exponential tracking on the stable atlas", rep.all_pass(), s, 120.0, summary({&rep}));
        const PropertyReport rq = run_tracking_suite(quiet_s, nullptr, split, quiet);
        info("zero-noise fiber, not part of the verdict: " + rq.summary_line());
        worst_case(rq);
    }

    // 8: conjugation
    {
        auto t0 = clock::now();
        const PropertyReport rep = run_conjugation_suite(cfg);
        const double s = since(t0);
        report_all({&rep});
        verdict(8, "conjugation equivalence", rep.all_pass(), s, 180.0, summary({&rep}));
    }

    // 9: degenerate limits
    {
        auto t0 = clock::now();
        const PropertyReport rep = run_degenerate_suite(model, split);
        const double s = since(t0);
        report_all({&rep});
        verdict(9, "degenerate limits", rep.all_pass(), s, 60.0, summary({&rep}));
    }

    // 10: smoothness. The order-2 gap condition needs beta < 2 eta < alpha,
    // which no gap of the desk spectrum admits; the probe runs on the
    // delta = 0 member of the family, where (-5, -2) is wide enough.
    {
        auto t0 = clock::now();
        const SmoothnessSettings sm;
        const PropertyReport desk_rep = run_smoothness_suite(quiet, split, nullptr, sm);
        info("desk split, not part of the verdict: " + desk_rep.summary_line());
        for (const auto& c : desk_rep.cases())
            info("  " + c.label + " measured=" + detail::fmt_t(c.measured) + (c.note.empty() ? "" : " [" + c.note + "]"));

        ModelConfig vcfg = quiet_cfg;
        vcfg.delta = 0.0;
        vcfg.birth = BirthFunction::rational(0.001);
        const Model vmodel(vcfg);
        SplitRequest req;
        req.beta = -4.8;
        req.alpha = -2.1;
        req.eta = -2.3;
        const SplitChoice vc = choose_split(vmodel, req);
        {
            std::ostringstream os;
            os << "delta=0 variant: beta=" << vc.split.beta << " alpha=" << vc.split.alpha << " eta=" << vc.split.eta
               << " K=" << vc.split.K << " L_f=" << vcfg.birth.lipschitz();
            info(os.str());
        }
        const PropertyReport rep = run_smoothness_suite(vmodel, vc.split, nullptr, sm);
        const double s = since(t0);
        report_all({&rep});
        for (const auto& c : rep.cases())
            if (!c.note.empty()) info("  " + c.label + " [" + c.note + "]");
        verdict(10, "smoothness probe of D h^s", rep.all_pass(), s, 300.0, summary({&rep}));
    }

    std::cout << (failures == 0 ? "all criteria pass" : std::to_string(failures) + " criteria fail") << "\n";
    return failures == 0 ? 0 : 1;
}
