#pragma once

// Lyapunov-Perron graphs of the stable and unstable manifolds.
//
// A graph value is read off the fixed point V of
//   stable   (t >= 0): V(t) = S~(t) z + int_0^t P^s S~(t-s) F ds - int_t^T P^u S~(t-s) F ds
//   unstable (t <= 0): V(t) = S~(t) z - int_t^0 P^u S~(t-s) F ds + int_{-T}^t P^s S~(t-s) F ds
// with F = F(s, theta_s omega, V(s)), both integrals by composite trapezoid on
// the solver grid, and the P^u propagator taken from the finite unstable block.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dichotomy.hpp"
#include "errors.hpp"
#include "flow.hpp"
#include "model.hpp"
#include "noise.hpp"
#include "parallel.hpp"

namespace mforge {

struct LPGrid {
    bool stable = true;
    double T_trunc = 0.0;
    double dt = 0.0;
    long steps = 0;
    double eta = 0.0;

    double time(long k) const { return stable ? dt * k : -T_trunc + dt * k; }
    double weight(long k) const { return std::exp(-eta * time(k)); }

    /// Smallest admissible horizon: max(5/(alpha-eta), 5/(eta-beta), 5 tau).
    static double default_horizon(const SpectralSplit& split) {
        return std::max({5.0 / (split.alpha - split.eta), 5.0 / (split.eta - split.beta), 5.0 * split.tau});
    }

    static LPGrid make(const SpectralSplit& split, const ModelConfig& cfg, bool stable,
                       std::optional<double> horizon = std::nullopt) {
        LPGrid g;
        g.stable = stable;
        g.dt = cfg.dt();
        g.eta = split.eta;
        const double want = horizon.value_or(default_horizon(split));
        g.steps = static_cast<long>(std::ceil(want / g.dt - 1e-9));
        g.T_trunc = g.dt * static_cast<double>(g.steps);
        g.validate(split);
        return g;
    }

    void validate(const SpectralSplit& split) const {
        if (!(split.beta < eta && eta < split.alpha)) throw ConfigError("LPGrid: need beta < eta < alpha");
        const double need = std::max(5.0 / (split.alpha - eta), 5.0 / (eta - split.beta));
        if (T_trunc < need * (1.0 - 1e-12)) {
            std::ostringstream os;
            os << "LPGrid: T_trunc_time=" << T_trunc << " is below the minimum " << need << " for this gap";
            throw ConfigError(os.str());
        }
    }
};

struct GraphSample {
    bool stable = true;
    ProductState zeta_hat;          // input, in range(P^s) or range(P^u)
    HistorySegment zeta;            // P_1 zeta_hat
    HistorySegment value;           // h(zeta, omega)
    ProductState point;             // V(0) = (zeta + h, (zeta + h)(0))
    int iterations = 0;
    bool converged = false;
    double observed_contraction = 0.0;
    double residual = 0.0;
    double rho_bound = 0.0;
    int predicted_iterations = 0;
    double tail_bound = 0.0;
    std::vector<double> updates;    // weighted-norm update per iteration
    bool contraction_flag = false;  // observed rate exceeded rho + 0.1
    std::vector<ProductState> trajectory;
};

struct LPOptions {
    double tol = 1e-8;
    int max_iter = 200;
    bool keep_trajectory = false;
    std::optional<double> rho;  // overrides the gap-condition value for the iteration bound
};

namespace detail {

inline double weighted_distance(const std::vector<ProductState>& a, const std::vector<ProductState>& b,
                                const LPGrid& grid) {
    double worst = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k)
        worst = std::max(worst, grid.weight(static_cast<long>(k)) * (a[k] - b[k]).norm());
    return worst;
}

inline double weighted_size(const std::vector<ProductState>& a, const LPGrid& grid) {
    double worst = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, grid.weight(static_cast<long>(k)) * a[k].norm());
    return worst;
}

inline void require_lp_window(const NoiseRealization* noise, const ModelConfig& cfg, const LPGrid& grid) {
    if (noise == nullptr || !cfg.has_noise()) return;
    const double lo = (grid.stable ? 0.0 : -grid.T_trunc) - cfg.tau;
    const double hi = grid.stable ? grid.T_trunc : 0.0;
    if (noise->t_first() > lo + 1e-9 * grid.dt || noise->t_last() < hi - 1e-9 * grid.dt) {
        std::ostringstream os;
        os << "noise window [" << noise->t_first() << ", " << noise->t_last()
           << "] does not cover the Lyapunov-Perron horizon [" << lo << ", " << hi << "]";
        throw WindowError(os.str());
    }
}

inline SpectralField head_forcing(const LPGrid& grid, long k, const NoiseRealization* noise, const ProductState& v,
                                  const Model& model) {
    return model.forcing_head(grid.time(k), noise, v.segment);
}

}  // namespace detail

/// Initial iterate S~(t) zeta_hat on the grid.
inline std::vector<ProductState> lp_initial(const ProductState& zeta_hat, const SpectralSplit& split,
                                            const Model& model, const LPGrid& grid) {
    std::vector<ProductState> V(static_cast<std::size_t>(grid.steps) + 1);
    if (grid.stable) {
        StepMap step(model.cfg());
        ProductState x = zeta_hat;
        for (long k = 0; k <= grid.steps; ++k) {
            V[static_cast<std::size_t>(k)] = x;
            if (k < grid.steps) step.apply(x);
        }
    } else {
        const Eigen::VectorXd c0 = split.coords(zeta_hat);
        const Eigen::MatrixXd one = split.unstable_propagator(grid.dt);
        Eigen::VectorXd c = split.unstable_propagator(-grid.T_trunc) * c0;
        for (long k = 0; k <= grid.steps; ++k) {
            V[static_cast<std::size_t>(k)] = split.lift(c);
            c = one * c;
        }
        V.back() = split.lift(c0);
    }
    return V;
}

/// One application of the Lyapunov-Perron operator. `free` holds S~(t_k) zeta_hat.
/// If `graph_part` is given it receives the complementary integral at t = 0,
/// whose segment is the graph value h(zeta, omega).
inline std::vector<ProductState> lp_apply(const std::vector<ProductState>& V, const std::vector<ProductState>& free,
                                          const NoiseRealization* noise, const SpectralSplit& split,
                                          const Model& model, const LPGrid& grid,
                                          ProductState* graph_part = nullptr) {
    const ModelConfig& cfg = model.cfg();
    const std::size_t n = V.size();
    const double dt = grid.dt;
    StepMap step(cfg);

    std::vector<SpectralField> F(n);
    std::vector<Eigen::VectorXd> cu(n);
    for (std::size_t k = 0; k < n; ++k) {
        F[k] = detail::head_forcing(grid, static_cast<long>(k), noise, V[k], model);
        cu[k] = split.head_coords(F[k]);
    }
    auto stable_part = [&](std::size_t k) {
        ProductState x{HistorySegment(cfg.tau, Eigen::MatrixXd::Zero(cfg.nodes(), cfg.modes)), F[k]};
        split.add_lift(x, cu[k], -1.0);
        return x;
    };

    std::vector<ProductState> out(n);
    // forward sum for int_{t_0}^{t_k} P^s S~(t_k - s) F ds
    ProductState acc = stable_part(0);
    ProductState from_first = acc;
    out[0] = free[0];
    for (std::size_t k = 1; k < n; ++k) {
        step.apply(acc);
        step.apply(from_first);
        ProductState fk = stable_part(k);
        acc += fk;
        ProductState integral = dt * (acc - 0.5 * from_first - 0.5 * fk);
        if (graph_part != nullptr && !grid.stable && k + 1 == n) *graph_part = integral;
        out[k] = free[k] + integral;
    }
    if (graph_part != nullptr && !grid.stable && n == 1) *graph_part = ProductState::zero(cfg);
    // backward sum for int_{t_k}^{t_last} P^u S~(t_k - s) F ds, in coordinates
    const Eigen::MatrixXd back = split.unstable_propagator(-dt);
    const int d = split.unstable_dim();
    if (d > 0) {
        Eigen::VectorXd C = cu[n - 1];
        Eigen::VectorXd D = cu[n - 1];
        for (std::size_t kk = n - 1; kk-- > 0;) {
            C = cu[kk] + back * C;
            D = back * D;
            const Eigen::VectorXd U = dt * (C - 0.5 * cu[kk] - 0.5 * D);
            split.add_lift(out[kk], U, -1.0);
            if (graph_part != nullptr && grid.stable && kk == 0) *graph_part = split.lift(-U);
        }
    }
    if (graph_part != nullptr && grid.stable && (d == 0 || n == 1)) *graph_part = ProductState::zero(cfg);
    return out;
}

namespace detail {

inline void require_range(const ProductState& zeta_hat, const SpectralSplit& split, bool stable) {
    const ProductState off = stable ? split.project_unstable(zeta_hat) : split.project_stable(zeta_hat);
    if (off.norm() > 1e-8 * std::max(1.0, zeta_hat.norm())) {
        std::ostringstream os;
        os << "zeta_hat has a " << (stable ? "P^u" : "P^s") << " component of norm " << off.norm()
           << "; it must lie in range(" << (stable ? "P^s" : "P^u") << ")";
        throw ProjectionError(os.str());
    }
}

inline double lp_tail_bound(const std::vector<ProductState>& V, const NoiseRealization* noise,
                            const SpectralSplit& split, const Model& model, const LPGrid& grid) {
    double fsup = 0.0;
    for (std::size_t k = 0; k < V.size(); ++k)
        fsup = std::max(fsup, grid.weight(static_cast<long>(k)) *
                                  head_forcing(grid, static_cast<long>(k), noise, V[k], model).norm());
    if (grid.stable)
        return split.K * fsup * std::exp(-(split.alpha - grid.eta) * grid.T_trunc) / (split.alpha - grid.eta);
    return split.K * fsup * std::exp(-(grid.eta - split.beta) * grid.T_trunc) / (grid.eta - split.beta);
}

}  // namespace detail

inline int predicted_iterations(double rho, double tol, double first_update) {
    if (first_update <= tol) return 1;
    if (!(rho > 0.0 && rho < 1.0)) return std::numeric_limits<int>::max();
    const double n = std::ceil(std::log(tol * (1.0 - rho) / first_update) / std::log(rho));
    return 1 + static_cast<int>(std::max(0.0, n));
}

/// Iterates the Lyapunov-Perron operator from S~(.) zeta_hat until the
/// weighted update falls below tol.
inline GraphSample solve_graph(const ProductState& zeta_hat, const NoiseRealization* noise, const SpectralSplit& split,
                               const Model& model, const LPGrid& grid, const LPOptions& opt = {}) {
    const ModelConfig& cfg = model.cfg();
    if (!(opt.tol > 0.0)) throw ConfigError("solve_graph: tol must be positive");
    grid.validate(split);
    detail::require_range(zeta_hat, split, grid.stable);
    detail::require_lp_window(noise, cfg, grid);

    GraphSample s;
    s.stable = grid.stable;
    s.zeta_hat = zeta_hat;
    s.zeta = zeta_hat.segment;
    const GapReport gap = gap_condition(split.K, cfg.birth.lipschitz(), split.alpha, split.beta, grid.eta, 1);
    s.rho_bound = opt.rho.value_or(gap.rho());

    const std::vector<ProductState> free = lp_initial(zeta_hat, split, model, grid);
    std::vector<ProductState> V = free;
    ProductState graph_part;
    int above_one = 0;
    double prev = 0.0;
    for (int it = 1; it <= opt.max_iter; ++it) {
        std::vector<ProductState> next = lp_apply(V, free, noise, split, model, grid, &graph_part);
        const double upd = detail::weighted_distance(next, V, grid);
        if (!std::isfinite(upd)) throw DivergenceError("solve_graph: update is not finite");
        V.swap(next);
        s.updates.push_back(upd);
        s.iterations = it;
        s.residual = upd;
        const double floor = 64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, detail::weighted_size(V, grid));
        if (it >= 2 && prev > floor) {
            const double ratio = upd / prev;
            s.observed_contraction = std::max(s.observed_contraction, ratio);
            above_one = ratio >= 1.0 ? above_one + 1 : 0;
            if (above_one >= 3) {
                std::ostringstream os;
                os << "Lyapunov-Perron iteration is not contracting: update ratio " << ratio << " for 3 iterations"
                   << " (gap-condition rho = " << s.rho_bound << ")";
                throw DivergenceError(os.str());
            }
        }
        prev = upd;
        if (upd <= opt.tol) {
            s.converged = true;
            break;
        }
        if (it >= 2 && upd <= floor) break;  // stalled at rounding level above tol
    }
    s.predicted_iterations = predicted_iterations(s.rho_bound, opt.tol, s.updates.front());
    s.contraction_flag = s.observed_contraction > s.rho_bound + 0.1;
    s.tail_bound = detail::lp_tail_bound(V, noise, split, model, grid);

    // h is the complementary integral at t = 0 of the last iterate's input,
    // which is the fixed point up to the final update.
    s.value = graph_part.segment;
    s.point = ProductState::compatible_from(s.zeta + s.value);
    if (opt.keep_trajectory) s.trajectory = std::move(V);
    return s;
}

inline GraphSample solve_graph_stable(const ProductState& zeta_hat, const NoiseRealization* noise,
                                      const SpectralSplit& split, const Model& model, const LPGrid& grid,
                                      const LPOptions& opt = {}) {
    if (!grid.stable) throw ConfigError("solve_graph_stable: grid is oriented for the unstable graph");
    return solve_graph(zeta_hat, noise, split, model, grid, opt);
}

inline GraphSample solve_graph_unstable(const ProductState& zeta_hat, const NoiseRealization* noise,
                                        const SpectralSplit& split, const Model& model, const LPGrid& grid,
                                        const LPOptions& opt = {}) {
    if (grid.stable) throw ConfigError("solve_graph_unstable: grid is oriented for the stable graph");
    return solve_graph(zeta_hat, noise, split, model, grid, opt);
}

/// psi = zeta + h(zeta, omega) paired with psi(0).
inline ProductState manifold_point(const GraphSample& s) {
    return ProductState::compatible_from(s.zeta + s.value);
}

/// The same point on the manifold of the original equation: psi + z(theta_xi omega).
inline HistorySegment shifted_manifold_point(const GraphSample& s, const NoiseRealization* noise, const Model& model,
                                             double t0 = 0.0) {
    return untransform(manifold_point(s), noise, model, t0).segment;
}

/// Basis of the coordinate plane used to sample zeta. Unstable: the range of
/// P^u. Stable: real parts of the eigenvectors of the leading roots below
/// beta, one per conjugate pair so that several modes are represented.
/// Vectors are normalized in H.
inline std::vector<ProductState> coordinate_basis(const SpectralSplit& split, const ModelConfig& cfg, bool stable,
                                                  int count = 2) {
    std::vector<ProductState> out;
    if (!stable) {
        const int d = split.unstable_dim();
        for (int i = 0; i < std::min(count, d); ++i) {
            Eigen::VectorXd c = Eigen::VectorXd::Zero(d);
            c(i) = 1.0;
            ProductState x = split.lift(c);
            out.push_back((1.0 / x.norm()) * x);
        }
        return out;
    }
    std::vector<CharacteristicRoot> below;
    auto collect = [&](const std::vector<std::vector<CharacteristicRoot>>& roots) {
        below.clear();
        for (const auto& mode_roots : roots)
            for (const auto& r : mode_roots)
                if (r.lam.real() <= split.beta && r.lam.imag() >= 0.0) below.push_back(r);
    };
    collect(split.all_roots);
    // the split only searched down to just below beta; look deeper if that is not enough
    for (double depth = 8.0; static_cast<int>(below.size()) < count && depth <= 64.0; depth *= 2.0)
        collect(spectrum(cfg, split.beta - depth));
    std::sort(below.begin(), below.end(), [](const auto& a, const auto& b) {
        if (a.lam.real() != b.lam.real()) return a.lam.real() > b.lam.real();
        return a.mode < b.mode;
    });
    for (const auto& r : below) {
        if (static_cast<int>(out.size()) >= count) break;
        const ModeProjection p = mode_projection(r.mode, {r}, cfg);
        ProductState x = ProductState::zero(cfg);
        x.segment.values.col(r.mode - 1) = p.basis.col(0).head(cfg.nodes());
        x.head(r.mode - 1) = p.basis(cfg.nodes(), 0);
        x = split.project_stable(x);
        out.push_back((1.0 / x.norm()) * x);
    }
    return out;
}

inline ProductState combine(const std::vector<ProductState>& basis, const Eigen::VectorXd& c) {
    ProductState x = (c.size() > 0 ? c(0) : 0.0) * basis.front();
    for (Eigen::Index i = 1; i < c.size(); ++i) x += c(i) * basis[static_cast<std::size_t>(i)];
    return x;
}

struct AtlasPoint {
    Eigen::VectorXd coords;
    GraphSample sample;
};

/// Graph samples on a resolution^d grid of coordinates in [-half_width, half_width]^d.
inline std::vector<AtlasPoint> build_atlas(const std::vector<ProductState>& basis, int resolution, double half_width,
                                           const NoiseRealization* noise, const SpectralSplit& split,
                                           const Model& model, const LPGrid& grid, const LPOptions& opt = {}) {
    const int d = static_cast<int>(basis.size());
    if (d == 0) throw ConfigError("build_atlas: empty coordinate basis");
    if (resolution < 1) throw ConfigError("build_atlas: resolution must be >= 1");
    std::size_t total = 1;
    for (int i = 0; i < d; ++i) total *= static_cast<std::size_t>(resolution);
    std::vector<AtlasPoint> out(total);
    parallel_for(total, [&](std::size_t idx) {
        Eigen::VectorXd c(d);
        std::size_t rest = idx;
        for (int i = 0; i < d; ++i) {
            const auto k = static_cast<double>(rest % static_cast<std::size_t>(resolution));
            rest /= static_cast<std::size_t>(resolution);
            c(i) = resolution == 1 ? 0.0 : -half_width + 2.0 * half_width * k / (resolution - 1);
        }
        out[idx].coords = c;
        out[idx].sample = solve_graph(combine(basis, c), noise, split, model, grid, opt);
    });
    return out;
}

struct InvarianceCheck {
    double t = 0.0;
    double defect = 0.0;
    double zeta_norm = 0.0;
    GraphSample at_t;
};

/// Evolves psi = zeta + h(zeta, omega) to time t and compares the
/// complementary component with the graph over the shifted fiber theta_t omega.
/// Stable graphs keep the absolute horizon (T_trunc - t for the shifted fiber);
/// unstable graphs reuse the same relative horizon.
inline InvarianceCheck invariance_defect(const GraphSample& s, const WienerPath* path, double tail_cutoff,
                                         const SpectralSplit& split, const Model& model, const LPGrid& grid, double t,
                                         const LPOptions& opt = {}) {
    const ModelConfig& cfg = model.cfg();
    std::optional<NoiseRealization> here, there;
    if (path != nullptr && cfg.has_noise()) {
        here.emplace(*path, cfg.mu, tail_cutoff);
        there.emplace(shift(*path, t), cfg.mu, tail_cutoff);
    }
    const NoiseRealization* n0 = here ? &*here : nullptr;
    const NoiseRealization* nt = there ? &*there : nullptr;

    const ProductState Vt = cocycle(t, n0, s.point, model);
    InvarianceCheck out;
    out.t = t;
    out.zeta_norm = s.zeta.norm();
    LPGrid g = grid;
    if (grid.stable) {
        g.steps = grid.steps - steps_for(t, grid.dt, "invariance_defect");
        g.T_trunc = g.dt * static_cast<double>(g.steps);
        const ProductState zeta_t = split.project_stable(Vt);
        out.at_t = solve_graph(zeta_t, nt, split, model, g, opt);
        out.defect = (split.project_unstable(Vt).segment - out.at_t.value).norm();
    } else {
        const ProductState zeta_t = split.project_unstable(Vt);
        out.at_t = solve_graph(zeta_t, nt, split, model, g, opt);
        out.defect = (split.project_stable(Vt).segment - out.at_t.value).norm();
    }
    return out;
}

struct ProbeResult {
    std::vector<double> steps;
    std::vector<HistorySegment> estimates;  // central differences
    std::vector<double> errors;             // against the Richardson limit
    std::vector<double> orders;             // log2 of successive error ratios (steps halved)
    HistorySegment richardson;
    double observed_order = 0.0;
};

/// Central differences (h(z + e d) - h(z - e d)) / 2e along a direction, with
/// a Richardson limit built from the two finest steps.
inline ProbeResult derivative_probe(const ProductState& base, const ProductState& direction,
                                    const std::function<HistorySegment(const ProductState&)>& h_solver,
                                    const std::vector<double>& fd_steps) {
    if (fd_steps.size() < 2) throw ConfigError("derivative_probe: need at least two steps");
    ProbeResult out;
    out.steps = fd_steps;
    out.estimates.resize(fd_steps.size());
    parallel_for(fd_steps.size(), [&](std::size_t i) {
        const double e = fd_steps[i];
        HistorySegment plus = h_solver(base + e * direction);
        HistorySegment minus = h_solver(base - e * direction);
        out.estimates[i] = (1.0 / (2.0 * e)) * (plus - minus);
    });
    const std::size_t m = fd_steps.size();
    const double q = fd_steps[m - 2] / fd_steps[m - 1];
    out.richardson = (1.0 / (q * q - 1.0)) * (q * q * out.estimates[m - 1] - out.estimates[m - 2]);
    for (std::size_t i = 0; i < m; ++i) out.errors.push_back((out.estimates[i] - out.richardson).norm());
    for (std::size_t i = 0; i + 1 < m; ++i) {
        const double ratio = out.errors[i] / std::max(out.errors[i + 1], 1e-300);
        const double step_ratio = fd_steps[i] / fd_steps[i + 1];
        out.orders.push_back(std::log(ratio) / std::log(step_ratio));
    }
    // order from the coarse end, where the Richardson limit is not yet the reference itself
    out.observed_order = out.orders.front();
    return out;
}

}  // namespace mforge
