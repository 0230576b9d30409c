#pragma once

// Property suites. Each suite collects measured values against thresholds;
// failing cases are recorded, never thrown.

#include <json.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dichotomy.hpp"
#include "errors.hpp"
#include "flow.hpp"
#include "manifold.hpp"
#include "model.hpp"
#include "noise.hpp"
#include "parallel.hpp"

namespace mforge {

struct PropertyCase {
    std::string label;
    std::string inputs_digest;
    double measured = 0.0;
    double threshold = 0.0;
    bool pass = false;
    std::string note;
};

class PropertyReport {
public:
    PropertyReport(std::string name, std::string config_digest, std::vector<std::uint64_t> seeds = {})
        : name_(std::move(name)), config_digest_(std::move(config_digest)), seeds_(std::move(seeds)) {}

    /// Records `measured <= threshold` (or the explicit verdict when given).
    PropertyCase& check(const std::string& label, double measured, double threshold,
                        std::optional<bool> verdict = std::nullopt, std::string note = {}) {
        PropertyCase c;
        c.label = label;
        c.inputs_digest = hex64(fnv1a64(name_ + "|" + config_digest_ + "|" + label));
        c.measured = measured;
        c.threshold = threshold;
        c.pass = verdict.value_or(std::isfinite(measured) && measured <= threshold);
        c.note = std::move(note);
        cases_.push_back(std::move(c));
        return cases_.back();
    }
    /// Records a case that could not be evaluated (error during computation).
    PropertyCase& error(const std::string& label, const std::string& what) {
        return check(label, std::numeric_limits<double>::quiet_NaN(), 0.0, false, what);
    }

    const std::string& name() const { return name_; }
    const std::string& config_digest() const { return config_digest_; }
    const std::vector<std::uint64_t>& seeds() const { return seeds_; }
    const std::vector<PropertyCase>& cases() const { return cases_; }
    bool all_pass() const {
        return !cases_.empty() && std::all_of(cases_.begin(), cases_.end(), [](const auto& c) { return c.pass; });
    }
    std::size_t failures() const {
        return static_cast<std::size_t>(std::count_if(cases_.begin(), cases_.end(), [](const auto& c) { return !c.pass; }));
    }
    /// Largest measured/threshold ratio, for summaries.
    double worst_ratio() const {
        double w = 0.0;
        for (const auto& c : cases_)
            if (c.threshold > 0.0 && std::isfinite(c.measured)) w = std::max(w, c.measured / c.threshold);
        return w;
    }

    std::string summary_line() const {
        std::ostringstream os;
        os << (all_pass() ? "PASS " : "FAIL ") << name_ << ": " << cases_.size() - failures() << "/" << cases_.size()
           << " cases";
        return os.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["suite"] = name_;
        j["config_digest"] = config_digest_;
        j["seed_set"] = seeds_;
        j["pass"] = all_pass();
        j["cases"] = nlohmann::json::array();
        for (const auto& c : cases_) {
            nlohmann::json cj{{"label", c.label}, {"inputs_digest", c.inputs_digest}, {"threshold", c.threshold},
                              {"pass", c.pass}};
            if (std::isfinite(c.measured)) cj["measured"] = c.measured;
            else cj["measured"] = nullptr;
            if (!c.note.empty()) cj["note"] = c.note;
            j["cases"].push_back(cj);
        }
        return j;
    }

private:
    std::string name_;
    std::string config_digest_;
    std::vector<std::uint64_t> seeds_;
    std::vector<PropertyCase> cases_;
};

inline std::string config_fingerprint(const ModelConfig& cfg, const SpectralSplit* split = nullptr) {
    std::ostringstream os;
    os << std::setprecision(17) << "mu=" << cfg.mu << ";delta=" << cfg.delta << ";tau=" << cfg.tau
       << ";modes=" << cfg.modes << ";r=" << cfg.history_intervals << ";birth=" << cfg.birth.kind() << ":"
       << cfg.birth.p() << ":" << cfg.birth.lipschitz() << ";g=";
    for (const auto& gj : cfg.g) {
        os << "[";
        for (Eigen::Index i = 0; i < gj.size(); ++i) os << gj(i) << ",";
        os << "]";
    }
    if (split != nullptr)
        os << ";split=" << split->beta << ":" << split->alpha << ":" << split->eta << ":" << split->K;
    return hex64(fnv1a64(os.str()));
}

inline std::vector<std::uint64_t> default_seed_set() {
    std::vector<std::uint64_t> s;
    for (std::uint64_t i = 1; i <= 20; ++i) s.push_back(i);
    return s;
}

/// Wiener path and OU realization covering [-t_past, t_future] for every
/// theta_t evaluation a run performs.
struct Fiber {
    WienerPath path;
    NoiseRealization noise;
};

inline Fiber sample_fiber(const ModelConfig& cfg, std::uint64_t seed, double t_past, double t_future,
                          std::optional<double> path_dt = std::nullopt, std::optional<double> tail_cutoff = std::nullopt) {
    const double cutoff = tail_cutoff.value_or(default_tail_cutoff(cfg.mu));
    const double dt = path_dt.value_or(cfg.dt());
    const Window w = default_window(cutoff, cfg.tau, t_past, t_future);
    // round the window outward onto the grid so grid-aligned times stay nodes
    WienerPath p = sample_wiener_path(seed, std::floor(w.t_lo / dt) * dt, std::ceil(w.t_hi / dt) * dt, dt, cfg.m());
    NoiseRealization nr(p, cfg.mu, cutoff);
    return {std::move(p), std::move(nr)};
}

namespace detail {

inline ProductState random_compatible_state(const ModelConfig& cfg, std::mt19937_64& rng, double scale = 1.0) {
    // smooth in xi: a few Fourier-like terms per mode
    std::normal_distribution<double> N01(0.0, 1.0);
    ProductState x = ProductState::zero(cfg);
    for (int n = 0; n < cfg.modes; ++n) {
        const double a0 = N01(rng), a1 = N01(rng), a2 = N01(rng);
        for (int i = 0; i <= cfg.history_intervals; ++i) {
            const double s = cfg.xi(i) / cfg.tau;
            x.segment.values(i, n) = a0 + a1 * std::cos(std::numbers::pi * s) + a2 * s * s;
        }
        x.segment.values.col(n) /= static_cast<double>(n + 1);
    }
    x = ProductState::compatible_from(x.segment);
    x *= scale / x.norm();
    return x;
}

// f tau rounded to the nearest positive multiple of dt, so sample times
// quoted in delays work for any history resolution
inline double grid_time(double f, const ModelConfig& cfg) {
    if (f == 0.0) return 0.0;
    return cfg.dt() * std::max(1.0, std::round(f * cfg.tau / cfg.dt()));
}

inline std::string fmt_t(double t) {
    std::ostringstream os;
    os << t;
    return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// spectrum

inline PropertyReport run_spectrum_suite(const ModelConfig& cfg, double re_min = -5.0, int rectangles = 10,
                                         std::uint64_t seed = 11) {
    PropertyReport rep("spectrum", config_fingerprint(cfg), {seed});
    ModelConfig diag = cfg;
    diag.delta = 0.0;
    for (int n = 1; n <= cfg.modes; ++n) {
        try {
            auto roots = characteristic_roots(n, diag, -static_cast<double>(n) * n - cfg.mu - 1.0);
            const double exact = -static_cast<double>(n) * n - cfg.mu;
            double err = roots.size() == 1 ? std::abs(roots.front().lam - cplx(exact, 0.0)) : 1.0;
            rep.check("delta=0 mode " + std::to_string(n) + " root equals -n^2-mu", err, 1e-12);
        } catch (const std::exception& e) {
            rep.error("delta=0 mode " + std::to_string(n), e.what());
        }
    }
    std::vector<std::vector<CharacteristicRoot>> all;
    try {
        all = spectrum(cfg, re_min);
    } catch (const std::exception& e) {
        rep.error("root search", e.what());
        return rep;
    }
    for (int n = 1; n <= cfg.modes; ++n) {
        const auto& roots = all[static_cast<std::size_t>(n - 1)];
        double worst = 0.0;
        bool closed = true;
        for (const auto& r : roots) {
            worst = std::max(worst, r.residual);
            const bool has_conj = std::any_of(roots.begin(), roots.end(), [&](const auto& o) {
                return std::abs(o.lam - std::conj(r.lam)) <= 1e-9 * (1.0 + std::abs(r.lam));
            });
            closed = closed && has_conj;
        }
        rep.check("mode " + std::to_string(n) + " max residual (" + std::to_string(roots.size()) + " roots)", worst,
                  1e-12);
        rep.check("mode " + std::to_string(n) + " conjugate closure", closed ? 0.0 : 1.0, 0.0);
    }
    // random rectangles inside the searched region
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> re_u(re_min, 0.5), im_u(-30.0, 30.0), mode_u(0.0, 1.0);
    int done = 0, tries = 0;
    while (done < rectangles && tries < 20 * rectangles) {
        ++tries;
        double a = re_u(rng), b = re_u(rng), c = im_u(rng), d = im_u(rng);
        if (a > b) std::swap(a, b);
        if (c > d) std::swap(c, d);
        if (b - a < 0.2 || d - c < 0.5) continue;
        const int n = 1 + static_cast<int>(mode_u(rng) * std::min(cfg.modes, 3));
        const Rect box{a, b, c, d};
        int wind = 0;
        try {
            wind = winding_number(box, n, cfg);
        } catch (const ContourError&) {
            continue;  // edge grazes a root; draw another rectangle
        }
        int listed = 0;
        for (const auto& r : all[static_cast<std::size_t>(n - 1)])
            if (box.contains(r.lam)) ++listed;
        std::ostringstream label;
        label << "mode " << n << " rectangle [" << a << "," << b << "]x[" << c << "," << d << "] winding " << wind
              << " vs listed " << listed;
        rep.check(label.str(), std::abs(wind - listed), 0.0);
        ++done;
    }
    if (done < rectangles) rep.error("random rectangles", "could not place enough rectangles");
    return rep;
}

// ---------------------------------------------------------------------------
// dichotomy

struct DichotomySettings {
    int samples = 100;
    std::vector<double> times_tau{0.25, 0.5, 1.0, 2.0, 5.0};
    double slack = 1.05;
    int commutation_samples = 20;
    std::vector<double> commutation_tau{0.25, 1.0, 2.0};
    std::uint64_t seed = 99;  // distinct from the K estimate's seed
};

inline PropertyReport run_dichotomy_suite(const SpectralSplit& split, const Model& model,
                                          const DichotomySettings& set = {}) {
    const ModelConfig& cfg = model.cfg();
    PropertyReport rep("dichotomy", config_fingerprint(cfg, &split), {set.seed});
    const double bound = set.slack * split.K;

    std::vector<long> marks;
    for (double f : set.times_tau) marks.push_back(steps_for(detail::grid_time(f, cfg), cfg.dt(), "dichotomy suite"));
    const long last = *std::max_element(marks.begin(), marks.end());

    std::mt19937_64 rng(set.seed);
    std::vector<ProductState> xs;
    for (int i = 0; i < set.samples; ++i) xs.push_back(detail::random_unit_state(cfg, rng));
    // stress: leading stable eigen-direction just below the gap
    auto stress = coordinate_basis(split, cfg, true, 1);
    std::vector<ProductState> extra = stress;
    extra.push_back(ProductState::zero(cfg));

    struct Row {
        std::vector<double> stable, unstable;
    };
    auto measure = [&](const ProductState& x) {
        Row row;
        StepMap step(cfg);
        ProductState y = split.project_stable(x);
        const double nx = x.norm();
        long k = 0;
        for (long mark : marks) {
            for (; k < mark; ++k) step.apply(y);
            const double t = cfg.dt() * mark;
            row.stable.push_back(nx == 0.0 ? 0.0 : std::exp(-split.beta * t) * y.norm() / nx);
        }
        for (long mark : marks) {
            const double t = -cfg.dt() * mark;
            row.unstable.push_back(nx == 0.0 ? 0.0 : std::exp(-split.alpha * t) * split.unstable_flow(t, x).norm() / nx);
        }
        (void)last;
        return row;
    };
    std::vector<Row> rows(xs.size() + extra.size());
    parallel_for(rows.size(), [&](std::size_t i) { rows[i] = measure(i < xs.size() ? xs[i] : extra[i - xs.size()]); });

    for (std::size_t m = 0; m < marks.size(); ++m) {
        double ws = 0.0, wu = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            ws = std::max(ws, rows[i].stable[m]);
            wu = std::max(wu, rows[i].unstable[m]);
        }
        const std::string t = detail::fmt_t(set.times_tau[m]);
        rep.check("stable bound, " + std::to_string(xs.size()) + " fresh vectors, t=" + t + " tau", ws, bound);
        rep.check("unstable bound, " + std::to_string(xs.size()) + " fresh vectors, t=-" + t + " tau", wu, bound);
    }
    double stress_worst = 0.0;
    for (double v : rows[xs.size()].stable) stress_worst = std::max(stress_worst, v);
    rep.check("stable bound along the leading stable eigen-direction", stress_worst, bound);
    double zero_worst = 0.0;
    for (double v : rows.back().stable) zero_worst = std::max(zero_worst, v);
    rep.check("x = 0", zero_worst, bound);

    // commutation of P^u with S~(t)
    std::mt19937_64 crng(set.seed + 1);
    double comm = 0.0;
    for (int i = 0; i < set.commutation_samples; ++i) {
        const ProductState x = detail::random_unit_state(cfg, crng);
        for (double f : set.commutation_tau) {
            const double t = detail::grid_time(f, cfg);
            const ProductState a = split.project_unstable(linear_semigroup(t, x, cfg));
            const ProductState b = linear_semigroup(t, split.project_unstable(x), cfg);
            comm = std::max(comm, (a - b).norm() / x.norm());
        }
    }
    rep.check("commutation |P^u S(t)x - S(t)P^u x| / |x|", comm, 1e-6);

    // projection idempotency and eigenvector property per block
    for (const auto& b : split.blocks) {
        const Eigen::MatrixXd P = b.matrix();
        rep.check("mode " + std::to_string(b.mode) + " idempotency |P^2 - P|", (P * P - P).norm(), 1e-8);
        double eig = 0.0;
        for (int k = 0; k < b.rank(); ++k) {
            ProductState p = ProductState::zero(cfg);
            p.segment.values.col(b.mode - 1) = b.basis.col(k).head(cfg.nodes());
            p.head(b.mode - 1) = b.basis(cfg.nodes(), k);
            for (double f : {0.25, 1.0}) {
                const double t = detail::grid_time(f, cfg);
                const ProductState flowed = linear_semigroup(t, p, cfg);
                const ProductState exact = split.unstable_flow(t, p);
                eig = std::max(eig, (flowed - exact).norm() / p.norm());
            }
        }
        rep.check("mode " + std::to_string(b.mode) + " range vectors are eigenvectors of S(t)", eig, 1e-8);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// cocycle and semigroup

struct CocycleSettings {
    std::vector<std::uint64_t> seeds = default_seed_set();
    std::vector<std::pair<double, double>> st_pairs{{0.5, 0.5}, {1.0, 0.75}, {0.25, 1.5}};  // (s, t) in units of tau
    int semigroup_samples = 10;
};

inline PropertyReport run_cocycle_suite(const Model& model, const CocycleSettings& set = {}) {
    const ModelConfig& cfg = model.cfg();
    PropertyReport rep("cocycle", config_fingerprint(cfg), set.seeds);
    double horizon = 0.0;
    for (auto [s, t] : set.st_pairs) horizon = std::max(horizon, (s + t) * cfg.tau);

    struct Out {
        double cocycle = 0.0, identity = 0.0;
        std::string err;
    };
    std::vector<Out> outs(set.seeds.size());
    parallel_for(set.seeds.size(), [&](std::size_t i) {
        try {
            Fiber fib = sample_fiber(cfg, set.seeds[i], 0.0, horizon + cfg.tau);
            std::mt19937_64 rng(set.seeds[i] * 7919ULL);
            const ProductState x = detail::random_compatible_state(cfg, rng);
            for (auto [sf, tf] : set.st_pairs) {
                const double s = detail::grid_time(sf, cfg), t = detail::grid_time(tf, cfg);
                const ProductState direct = cocycle(s + t, &fib.noise, x, model);
                const ProductState first = cocycle(s, &fib.noise, x, model);
                NoiseRealization shifted(shift(fib.path, s), cfg.mu, fib.noise.tail_cutoff());
                const ProductState composed = cocycle(t, &shifted, first, model);
                outs[i].cocycle = std::max(outs[i].cocycle, (direct - composed).norm() / std::max(1e-300, direct.norm()));
            }
            outs[i].identity = (cocycle(0.0, &fib.noise, x, model) - x).norm();
        } catch (const std::exception& e) {
            outs[i].err = e.what();
        }
    });
    for (std::size_t i = 0; i < outs.size(); ++i) {
        const std::string sd = "seed " + std::to_string(set.seeds[i]);
        if (!outs[i].err.empty()) {
            rep.error(sd, outs[i].err);
            continue;
        }
        rep.check(sd + " |Phi(t+s,w,x) - Phi(t,theta_s w,Phi(s,w,x))| relative", outs[i].cocycle, 1e-6);
        rep.check(sd + " Phi(0,w,x) = x", outs[i].identity, 0.0);
    }

    // deterministic limit: with g = 0 the cocycle ignores omega
    {
        ModelConfig quiet = cfg;
        for (auto& gj : quiet.g) gj.setZero();
        Model qm(quiet);
        Fiber a = sample_fiber(quiet, 1, 0.0, 2.0 * cfg.tau), b = sample_fiber(quiet, 2, 0.0, 2.0 * cfg.tau);
        std::mt19937_64 rng(5);
        const ProductState x = detail::random_compatible_state(quiet, rng);
        const double gap = (cocycle(cfg.tau, &a.noise, x, qm) - cocycle(cfg.tau, &b.noise, x, qm)).norm();
        rep.check("g = 0: Phi independent of omega", gap, 0.0);
    }

    // semigroup property of the linear flow, including incompatible states
    std::mt19937_64 rng(4242);
    double semi = 0.0;
    for (int i = 0; i < set.semigroup_samples; ++i) {
        const ProductState x = detail::random_unit_state(cfg, rng);
        for (auto [sf, tf] : set.st_pairs) {
            const double s = detail::grid_time(sf, cfg), t = detail::grid_time(tf, cfg);
            const ProductState lhs = linear_semigroup(s + t, x, cfg);
            const ProductState rhs = linear_semigroup(t, linear_semigroup(s, x, cfg), cfg);
            semi = std::max(semi, (lhs - rhs).norm() / std::max(1e-300, lhs.norm()));
        }
    }
    rep.check("S(t+s) = S(t)S(s) relative", semi, 1e-8);
    return rep;
}

// ---------------------------------------------------------------------------
// mild solution residual

struct MildSettings {
    std::uint64_t seed = 1;
    double T_tau = 2.0;
    std::vector<int> bound_intervals{100};       // r values checked against 10 dt
    std::vector<int> sweep_intervals{500, 1000};  // r values for the halving ratio
    double min_ratio = 1.6;
};

inline PropertyReport run_mild_suite(const ModelConfig& base, const MildSettings& set = {}) {
    PropertyReport rep("mild", config_fingerprint(base), {set.seed});
    std::vector<int> all = set.bound_intervals;
    all.insert(all.end(), set.sweep_intervals.begin(), set.sweep_intervals.end());
    const int finest = *std::max_element(all.begin(), all.end());
    ModelConfig fine = base;
    fine.history_intervals = finest;
    const double T = set.T_tau * base.tau;
    Fiber fib = sample_fiber(fine, set.seed, 0.0, T + base.tau, fine.dt());

    std::vector<double> res(all.size(), std::numeric_limits<double>::quiet_NaN());
    std::vector<std::string> errs(all.size());
    parallel_for(all.size(), [&](std::size_t i) {
        try {
            ModelConfig cfg = base;
            cfg.history_intervals = all[i];
            Model model(cfg);
            std::mt19937_64 rng(set.seed);
            const ProductState x = detail::random_compatible_state(cfg, rng);
            const Trajectory traj = solve_random_pde(x, &fib.noise, model, T, cfg.dt());
            res[i] = mild_residual(traj, &fib.noise, model);
        } catch (const std::exception& e) {
            errs[i] = e.what();
        }
    });
    for (std::size_t i = 0; i < set.bound_intervals.size(); ++i) {
        const double dt = base.tau / all[i];
        if (!errs[i].empty()) rep.error("residual at dt=" + detail::fmt_t(dt), errs[i]);
        else rep.check("residual at dt=" + detail::fmt_t(dt) + " <= 10 dt", res[i], 10.0 * dt);
    }
    const std::size_t off = set.bound_intervals.size();
    for (std::size_t i = off; i + 1 < all.size(); ++i) {
        const double ratio = res[i] / res[i + 1];
        const double dt = base.tau / all[i];
        rep.check("residual ratio dt=" + detail::fmt_t(dt) + " -> " + detail::fmt_t(base.tau / all[i + 1]), ratio,
                  set.min_ratio, std::isfinite(ratio) && ratio >= set.min_ratio,
                  "residuals " + detail::fmt_t(res[i]) + ", " + detail::fmt_t(res[i + 1]));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Lyapunov-Perron contraction

inline PropertyReport run_contraction_suite(const std::vector<AtlasPoint>& atlas, const std::string& which,
                                            const std::string& digest, double tol) {
    PropertyReport rep("contraction-" + which, digest);
    for (std::size_t i = 0; i < atlas.size(); ++i) {
        const GraphSample& s = atlas[i].sample;
        std::ostringstream c;
        c << which << " point " << i << " (";
        for (Eigen::Index k = 0; k < atlas[i].coords.size(); ++k) c << (k ? "," : "") << atlas[i].coords(k);
        c << ")";
        rep.check(c.str() + " observed ratio <= rho + 0.1", s.observed_contraction, s.rho_bound + 0.1,
                  std::nullopt, "rho=" + detail::fmt_t(s.rho_bound));
        rep.check(c.str() + " converged residual <= tol", s.residual, tol, s.converged && s.residual <= tol);
        rep.check(c.str() + " iterations <= predicted", s.iterations, s.predicted_iterations,
                  s.converged && s.iterations <= s.predicted_iterations);
    }
    if (!atlas.empty()) rep.check("rho < 1", atlas.front().sample.rho_bound, 1.0, atlas.front().sample.rho_bound < 1.0);
    return rep;
}

// ---------------------------------------------------------------------------
// invariance

struct InvarianceSettings {
    std::vector<double> times_tau{0.5, 1.0, 2.0};
    double tol_inv = 1e-3;
    std::size_t max_points = 20;
};

struct InvarianceMeasure {
    std::vector<std::vector<double>> defects;  // [point][time]
    std::vector<double> zeta_norms;
    std::vector<std::string> errors;           // per point, empty if fine
    std::vector<double> roundtrip;             // shifted point -> transform -> manifold point
};

/// Defects for the first `max_points` atlas points; the grid must leave room
/// for the largest time (stable graphs shrink their horizon by t).
inline InvarianceMeasure measure_invariance(const std::vector<AtlasPoint>& atlas, const Fiber* fiber,
                                            const SpectralSplit& split, const Model& model, const LPGrid& grid,
                                            const InvarianceSettings& set, const LPOptions& opt = {}) {
    const ModelConfig& cfg = model.cfg();
    const std::size_t n = std::min(set.max_points, atlas.size());
    InvarianceMeasure m;
    m.defects.assign(n, std::vector<double>(set.times_tau.size(), std::numeric_limits<double>::quiet_NaN()));
    m.zeta_norms.assign(n, 0.0);
    m.errors.assign(n, {});
    m.roundtrip.assign(n, std::numeric_limits<double>::quiet_NaN());
    parallel_for(n, [&](std::size_t i) {
        const GraphSample& s = atlas[i].sample;
        m.zeta_norms[i] = s.zeta.norm();
        try {
            const NoiseRealization* nr = fiber ? &fiber->noise : nullptr;
            const HistorySegment shifted = shifted_manifold_point(s, nr, model);
            const ProductState back = transform(ProductState::compatible_from(shifted), nr, model);
            m.roundtrip[i] = (back - manifold_point(s)).norm();
            for (std::size_t k = 0; k < set.times_tau.size(); ++k) {
                const InvarianceCheck chk = invariance_defect(s, fiber ? &fiber->path : nullptr,
                                                              fiber ? fiber->noise.tail_cutoff() : 1.0, split, model,
                                                              grid, detail::grid_time(set.times_tau[k], cfg), opt);
                m.defects[i][k] = chk.defect;
            }
        } catch (const std::exception& e) {
            m.errors[i] = e.what();
        }
    });
    return m;
}

inline void report_invariance(PropertyReport& rep, const std::string& which, const InvarianceMeasure& m,
                              const InvarianceSettings& set) {
    for (std::size_t i = 0; i < m.defects.size(); ++i) {
        const std::string p = which + " point " + std::to_string(i);
        if (!m.errors[i].empty()) {
            rep.error(p, m.errors[i]);
            continue;
        }
        for (std::size_t k = 0; k < set.times_tau.size(); ++k)
            rep.check(p + " defect at t=" + detail::fmt_t(set.times_tau[k]) + " tau", m.defects[i][k],
                      set.tol_inv * (1.0 + m.zeta_norms[i]));
        rep.check(p + " shifted point transforms back onto the manifold", m.roundtrip[i], 1e-12);
    }
}

/// Worst defect over points for each time; NaN if any point failed.
inline std::vector<double> worst_defects(const InvarianceMeasure& m) {
    if (m.defects.empty()) return {};
    std::vector<double> w(m.defects.front().size(), 0.0);
    for (std::size_t i = 0; i < m.defects.size(); ++i)
        for (std::size_t k = 0; k < w.size(); ++k) {
            if (!m.errors[i].empty()) w[k] = std::numeric_limits<double>::quiet_NaN();
            else w[k] = std::max(w[k], m.defects[i][k]);
        }
    return w;
}

inline PropertyReport run_invariance_suite(const std::vector<AtlasPoint>& atlas, const Fiber* fiber,
                                           const SpectralSplit& split, const Model& model, const LPGrid& grid,
                                           const InvarianceSettings& set = {}, const LPOptions& opt = {}) {
    PropertyReport rep(std::string("invariance-") + (grid.stable ? "stable" : "unstable"),
                       config_fingerprint(model.cfg(), &split),
                       fiber ? std::vector<std::uint64_t>{fiber->path.spec().seed} : std::vector<std::uint64_t>{});
    report_invariance(rep, grid.stable ? "stable" : "unstable",
                      measure_invariance(atlas, fiber, split, model, grid, set, opt), set);
    return rep;
}

// ---------------------------------------------------------------------------
// exponential tracking

inline PropertyReport run_tracking_suite(const std::vector<AtlasPoint>& atlas, const Fiber* fiber,
                                         const SpectralSplit& split, const Model& model, double horizon_tau = 5.0) {
    const ModelConfig& cfg = model.cfg();
    PropertyReport rep("tracking", config_fingerprint(cfg, &split),
                       fiber ? std::vector<std::uint64_t>{fiber->path.spec().seed} : std::vector<std::uint64_t>{});
    std::vector<double> ratio(atlas.size(), std::numeric_limits<double>::quiet_NaN());
    std::vector<std::string> errs(atlas.size());
    parallel_for(atlas.size(), [&](std::size_t i) {
        try {
            const ProductState psi = manifold_point(atlas[i].sample);
            const Trajectory tr = solve_random_pde(psi, fiber ? &fiber->noise : nullptr, model,
                                                   detail::grid_time(horizon_tau, cfg), cfg.dt());
            double sup = 0.0;
            for (std::size_t k = 0; k < tr.states.size(); ++k)
                sup = std::max(sup, std::exp(-split.eta * tr.times[k]) * tr.states[k].norm());
            ratio[i] = sup / std::max(tr.states.front().norm(), 1e-300);
            if (tr.states.front().norm() == 0.0) ratio[i] = sup == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
        } catch (const std::exception& e) {
            errs[i] = e.what();
        }
    });
    for (std::size_t i = 0; i < atlas.size(); ++i) {
        const std::string p = "stable point " + std::to_string(i) + " sup e^{-eta t}|V(t)| / |V(0)|";
        if (!errs[i].empty()) rep.error(p, errs[i]);
        else rep.check(p, ratio[i], 2.0);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// conjugation

struct ConjugationSettings {
    std::vector<std::uint64_t> seeds = default_seed_set();
    std::vector<int> intervals{100, 200, 400};  // dt = tau / r
    double T_tau = 2.0;
    double ratio_lo = 1.4;
    double ratio_hi = 2.6;
};

/// RMS over seeds of the endpoint gap |u_direct(T) - untransform(v(T))| per dt.
inline std::vector<double> conjugation_gaps(const ModelConfig& base, const ConjugationSettings& set) {
    const int finest = *std::max_element(set.intervals.begin(), set.intervals.end());
    const double path_dt = base.tau / (2.0 * finest);
    const double T = set.T_tau * base.tau;
    std::vector<std::vector<double>> gaps(set.seeds.size(), std::vector<double>(set.intervals.size()));
    parallel_for(set.seeds.size(), [&](std::size_t si) {
        ModelConfig probe = base;
        Fiber fib = sample_fiber(probe, set.seeds[si], 0.0, T + base.tau, path_dt);
        for (std::size_t k = 0; k < set.intervals.size(); ++k) {
            ModelConfig cfg = base;
            cfg.history_intervals = set.intervals[k];
            Model model(cfg);
            std::mt19937_64 rng(set.seeds[si] * 104729ULL);
            const ProductState u0 = detail::random_compatible_state(cfg, rng);
            const Trajectory direct = solve_spde_direct(u0.segment, fib.noise, model, T, cfg.dt(), false);
            const ProductState v0 = transform(u0, &fib.noise, model, 0.0);
            const Trajectory vr = solve_random_pde(v0, &fib.noise, model, T, cfg.dt(), false);
            const ProductState u_back = untransform(vr.back(), &fib.noise, model, T);
            gaps[si][k] = (direct.back() - u_back).norm();
        }
    });
    std::vector<double> rms(set.intervals.size(), 0.0);
    for (std::size_t k = 0; k < set.intervals.size(); ++k) {
        for (const auto& g : gaps) rms[k] += g[k] * g[k];
        rms[k] = std::sqrt(rms[k] / static_cast<double>(gaps.size()));
    }
    return rms;
}

inline PropertyReport run_conjugation_suite(const ModelConfig& base, const ConjugationSettings& set = {}) {
    PropertyReport rep("conjugation", config_fingerprint(base), set.seeds);
    std::vector<double> rms;
    try {
        rms = conjugation_gaps(base, set);
    } catch (const std::exception& e) {
        rep.error("conjugation sweep", e.what());
        return rep;
    }
    for (std::size_t k = 0; k + 1 < rms.size(); ++k) {
        const double ratio = rms[k] / rms[k + 1];
        std::ostringstream l;
        l << "gap ratio dt=" << base.tau / set.intervals[k] << " -> " << base.tau / set.intervals[k + 1];
        rep.check(l.str(), ratio, set.ratio_hi, ratio >= set.ratio_lo && ratio <= set.ratio_hi,
                  "rms gaps " + detail::fmt_t(rms[k]) + ", " + detail::fmt_t(rms[k + 1]));
    }
    // zero noise: both routes run the same arithmetic
    {
        ModelConfig quiet = base;
        quiet.history_intervals = set.intervals.front();
        for (auto& gj : quiet.g) gj.setZero();
        Model model(quiet);
        Fiber fib = sample_fiber(quiet, 1, 0.0, set.T_tau * base.tau + base.tau);
        std::mt19937_64 rng(3);
        const ProductState u0 = detail::random_compatible_state(quiet, rng);
        const double T = set.T_tau * base.tau;
        const ProductState a = solve_spde_direct(u0.segment, fib.noise, model, T, quiet.dt(), false).back();
        const ProductState b = solve_random_pde(u0, &fib.noise, model, T, quiet.dt(), false).back();
        rep.check("g = 0: direct and random-PDE solvers agree", (a - b).norm(), 1e-10);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// degenerate limits

struct DegenerateSettings {
    double half_width = 0.5;
    std::uint64_t seed = 1;
};

inline PropertyReport run_degenerate_suite(const Model& model, const SpectralSplit& split,
                                           const DegenerateSettings& set = {}) {
    const ModelConfig& cfg = model.cfg();
    PropertyReport rep("degenerate", config_fingerprint(cfg, &split), {set.seed});
    const LPGrid gs = LPGrid::make(split, cfg, true);
    const LPGrid gu = LPGrid::make(split, cfg, false);
    const double horizon = std::max(gs.T_trunc, gu.T_trunc);

    // g = 0, zeta = 0
    {
        ModelConfig quiet = cfg;
        for (auto& gj : quiet.g) gj.setZero();
        Model qm(quiet);
        for (const LPGrid* g : {&gs, &gu}) {
            const char* which = g->stable ? "h^s(0)" : "h^u(0)";
            try {
                const GraphSample s = solve_graph(ProductState::zero(quiet), nullptr, split, qm, *g);
                rep.check(std::string("g = 0: |") + which + "|", s.value.norm(), 1e-10);
            } catch (const std::exception& e) {
                rep.error(std::string("g = 0: ") + which, e.what());
            }
        }
    }
    // f = 0 with noise: h is affine in zeta
    {
        ModelConfig lin = cfg;
        lin.birth = BirthFunction::zero();
        Model lm(lin);
        Fiber fib = sample_fiber(lin, set.seed, horizon, horizon);
        for (const LPGrid* g : {&gs, &gu}) {
            const char* which = g->stable ? "h^s" : "h^u";
            try {
                const auto basis = coordinate_basis(split, lin, g->stable, 2);
                Eigen::VectorXd c1(2), c2(2);
                c1 << set.half_width, -0.3 * set.half_width;
                c2 << -0.6 * set.half_width, 0.9 * set.half_width;
                const Eigen::VectorXd cm = 0.5 * (c1 + c2);
                const HistorySegment h1 = solve_graph(combine(basis, c1), &fib.noise, split, lm, *g).value;
                const HistorySegment h2 = solve_graph(combine(basis, c2), &fib.noise, split, lm, *g).value;
                const HistorySegment hm = solve_graph(combine(basis, cm), &fib.noise, split, lm, *g).value;
                rep.check(std::string("f = 0: ") + which + "(z1) + " + which + "(z2) - 2 " + which + "(mid)",
                          (h1 + h2 - 2.0 * hm).norm(), 1e-8);
            } catch (const std::exception& e) {
                rep.error(std::string("f = 0: ") + which, e.what());
            }
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// smoothness probe

struct SmoothnessSettings {
    std::vector<double> fd_steps{0.4, 0.2, 0.1, 0.05};
    double min_order = 1.8;
    double probe_tol = 1e-13;
};

inline PropertyReport run_smoothness_suite(const Model& model, const SpectralSplit& split, const Fiber* fiber,
                                           const SmoothnessSettings& set = {}) {
    const ModelConfig& cfg = model.cfg();
    PropertyReport rep("smoothness", config_fingerprint(cfg, &split),
                       fiber ? std::vector<std::uint64_t>{fiber->path.spec().seed} : std::vector<std::uint64_t>{});
    const GapReport gap = gap_condition(split.K, cfg.birth.lipschitz(), split.alpha, split.beta, split.eta, 2);
    const bool order2 = gap.holds(2);
    rep.check("order-1 gap condition", gap.orders[0].value, 1.0, gap.holds(1));
    rep.check("order-2 gap condition", gap.orders[1].value, 1.0, order2,
              gap.orders[1].applicable ? "" : "not applicable: 2 eta outside (beta, alpha)");
    try {
        const LPGrid grid = LPGrid::make(split, cfg, true);
        const auto basis = coordinate_basis(split, cfg, true, 2);
        if (basis.empty()) throw ConfigError("smoothness probe: no stable coordinate direction");
        const ProductState base = basis.size() > 1 ? ProductState(0.5 * basis[0] + 0.3 * basis[1]) : 0.5 * basis[0];
        LPOptions opt;
        opt.tol = set.probe_tol;
        auto solver = [&](const ProductState& z) {
            return solve_graph(split.project_stable(z), fiber ? &fiber->noise : nullptr, split, model, grid, opt).value;
        };
        const ProbeResult pr = derivative_probe(base, basis[0], solver, set.fd_steps);
        std::ostringstream note;
        note << "errors";
        for (double e : pr.errors) note << " " << e;
        note << "; |Dh| " << pr.richardson.norm();
        rep.check("central-difference order of D h^s", pr.observed_order, set.min_order,
                  order2 && pr.observed_order >= set.min_order, note.str());
    } catch (const std::exception& e) {
        rep.error("derivative probe", e.what());
    }
    return rep;
}

}  // namespace mforge
