#pragma once

// Pathwise time integration on H. The stiff diagonal part -n^2 - mu is
// integrated exactly (exponential Euler); delay, nonlinear and noise terms
// are explicit. dt is locked to tau / r, so the delayed value is always the
// oldest stored history node.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "model.hpp"
#include "noise.hpp"

namespace mforge {

/// One step of the discretized linear delay semigroup, plus optional forcing.
/// Per mode n with a = -n^2 - mu:
///   head' = e^{a dt} head + (e^{a dt} - 1)/a * (-delta phi(-tau) + forcing)
/// and the segment shifts left by one node, taking the old head at xi = -dt
/// and the new head at xi = 0.
class StepMap {
public:
    explicit StepMap(const ModelConfig& cfg)
        : dt_(cfg.dt()), delta_(cfg.delta), r_(cfg.history_intervals), modes_(cfg.modes) {
        decay_.resize(modes_);
        gain_.resize(modes_);
        for (int n = 0; n < modes_; ++n) {
            const double a = ModelConfig::laplace_eigenvalue(n + 1) - cfg.mu;
            decay_(n) = std::exp(a * dt_);
            gain_(n) = std::expm1(a * dt_) / a;
        }
    }

    double dt() const { return dt_; }
    int intervals() const { return r_; }
    const Eigen::VectorXd& decay() const { return decay_; }
    const Eigen::VectorXd& gain() const { return gain_; }
    /// Coefficient of phi(-tau) in the head update, per mode.
    Eigen::VectorXd delay_gain() const { return -delta_ * gain_; }

    void apply(ProductState& x, const SpectralField* forcing = nullptr, const SpectralField* additive = nullptr) const {
        Eigen::MatrixXd& seg = x.segment.values;
        SpectralField drive = -delta_ * seg.row(0).transpose();
        if (forcing != nullptr) drive += *forcing;
        SpectralField next = decay_.cwiseProduct(x.head) + gain_.cwiseProduct(drive);
        if (additive != nullptr) next += *additive;
        for (int n = 0; n < modes_; ++n) {
            double* col = seg.col(n).data();
            std::copy(col + 1, col + r_, col);
            col[r_ - 1] = x.head(n);
            col[r_] = next(n);
        }
        x.head = std::move(next);
    }

private:
    double dt_;
    double delta_;
    int r_;
    int modes_;
    Eigen::VectorXd decay_;
    Eigen::VectorXd gain_;
};

/// Steps per time span, requiring t to be a whole number of dt.
inline long steps_for(double t, double dt, const char* what) {
    const double x = t / dt;
    const double k = std::round(x);
    if (std::abs(x - k) > 1e-8 * std::max(1.0, std::abs(x))) {
        std::ostringstream os;
        os << what << ": time " << t << " is not a multiple of dt=" << dt;
        throw ConfigError(os.str());
    }
    return static_cast<long>(k);
}

inline void require_locked_dt(const ModelConfig& cfg, double dt) {
    if (std::abs(dt - cfg.dt()) > 1e-12 * cfg.tau) {
        std::ostringstream os;
        os << "dt_time=" << dt << " must equal tau_time/history_intervals=" << cfg.dt();
        throw ConfigError(os.str());
    }
}

struct Trajectory {
    std::vector<double> times;
    std::vector<ProductState> states;
    PathSpec path_ref;
    double dt = 0.0;
    std::string scheme;

    const ProductState& back() const { return states.back(); }
};

/// S~(t) x for t >= 0 on grid; incompatible x is allowed (its head drives the
/// history from xi = -dt upward, as in the block form of the semigroup).
inline ProductState linear_semigroup(double t, const ProductState& x, const ModelConfig& cfg) {
    if (t < 0.0) throw ConfigError("linear_semigroup: negative time is only defined on the unstable block");
    const long k = steps_for(t, cfg.dt(), "linear_semigroup");
    StepMap step(cfg);
    ProductState y = x;
    for (long i = 0; i < k; ++i) step.apply(y);
    return y;
}

namespace detail {

inline void check_finite(const ProductState& x, double t) {
    if (!x.head.allFinite() || !x.segment.values.allFinite() || x.head.cwiseAbs().maxCoeff() > 1e150) {
        std::ostringstream os;
        os << "solution diverged (NaN/overflow) at t=" << t;
        throw DivergenceError(os.str());
    }
}

inline void require_noise_window(const NoiseRealization* noise, const ModelConfig& cfg, double t_from, double t_to) {
    if (noise == nullptr || !cfg.has_noise()) return;
    if (noise->t_first() > t_from - cfg.tau + 1e-9 * cfg.dt() || noise->t_last() < t_to - 1e-9 * cfg.dt()) {
        std::ostringstream os;
        os << "noise realization covers [" << noise->t_first() << ", " << noise->t_last() << "] but the run needs ["
           << t_from - cfg.tau << ", " << t_to << "]";
        throw WindowError(os.str());
    }
}

}  // namespace detail

/// Random delay PDE for v = u - z on the fiber carried by `noise` (null = no noise).
inline Trajectory solve_random_pde(const ProductState& init, const NoiseRealization* noise, const Model& model,
                                   double T, double dt, bool keep_states = true) {
    const ModelConfig& cfg = model.cfg();
    require_locked_dt(cfg, dt);
    if (!init.is_compatible()) throw ConfigError("solve_random_pde: initial state needs head = segment(0)");
    const long steps = steps_for(T, dt, "solve_random_pde");
    detail::require_noise_window(noise, cfg, 0.0, T);

    StepMap step(cfg);
    Trajectory traj;
    traj.dt = dt;
    traj.scheme = "exponential-euler/random-pde";
    if (noise != nullptr) traj.path_ref = noise->path().spec();
    ProductState x = init;
    traj.times.push_back(0.0);
    traj.states.push_back(x);
    for (long k = 0; k < steps; ++k) {
        const double t = dt * static_cast<double>(k);
        const SpectralField forcing = model.forcing_head(t, noise, x.segment);
        step.apply(x, &forcing);
        detail::check_finite(x, t + dt);
        if (keep_states || k + 1 == steps) {
            traj.times.push_back(t + dt);
            traj.states.push_back(x);
        }
    }
    return traj;
}

/// The original SPDE with additive increments sum_j g_j dw_j read from the path grid.
inline Trajectory solve_spde_direct(const HistorySegment& init, const NoiseRealization& noise, const Model& model,
                                    double T, double dt, bool keep_states = true) {
    const ModelConfig& cfg = model.cfg();
    require_locked_dt(cfg, dt);
    const long steps = steps_for(T, dt, "solve_spde_direct");
    if (!noise.path().contains(0.0) || !noise.path().contains(T))
        throw WindowError("solve_spde_direct: path does not cover [0, T]");

    StepMap step(cfg);
    Trajectory traj;
    traj.dt = dt;
    traj.scheme = "exponential-euler-maruyama/direct";
    traj.path_ref = noise.path().spec();
    ProductState x = ProductState::compatible_from(init);
    traj.times.push_back(0.0);
    traj.states.push_back(x);
    for (long k = 0; k < steps; ++k) {
        const double t = dt * static_cast<double>(k);
        const SpectralField forcing = model.nemytskii(x.segment.delayed());
        SpectralField kick = SpectralField::Zero(cfg.modes);
        for (int j = 0; j < cfg.m(); ++j) {
            const auto& gj = cfg.g[static_cast<std::size_t>(j)];
            if (gj.isZero(0.0)) continue;
            kick += gj * noise.increment(j, t, t + dt);
        }
        step.apply(x, &forcing, &kick);
        detail::check_finite(x, t + dt);
        if (keep_states || k + 1 == steps) {
            traj.times.push_back(t + dt);
            traj.states.push_back(x);
        }
    }
    return traj;
}

/// v = u - z(theta_{t0 + .} omega) on the segment and u(t0) - z(theta_{t0} omega) on the head.
inline ProductState transform(const ProductState& u, const NoiseRealization* noise, const Model& model, double t0 = 0.0) {
    ProductState v = u;
    const ModelConfig& cfg = model.cfg();
    for (int i = 0; i < cfg.nodes(); ++i) v.segment.values.row(i) -= model.z_at(noise, t0 + cfg.xi(i)).transpose();
    v.head -= model.z_at(noise, t0);
    return v;
}

inline ProductState untransform(const ProductState& v, const NoiseRealization* noise, const Model& model, double t0 = 0.0) {
    ProductState u = v;
    const ModelConfig& cfg = model.cfg();
    for (int i = 0; i < cfg.nodes(); ++i) u.segment.values.row(i) += model.z_at(noise, t0 + cfg.xi(i)).transpose();
    u.head += model.z_at(noise, t0);
    return u;
}

/// Phi(t, omega, x): endpoint of the random PDE run driven by `noise`.
inline ProductState cocycle(double t, const NoiseRealization* noise, const ProductState& x, const Model& model) {
    if (t == 0.0) return x;
    return solve_random_pde(x, noise, model, t, model.cfg().dt(), false).back();
}

/// max_t ||V(t) - [S~(t)V(0) + int_0^t S~(t-s)F(s) ds]|| / (1 + ||V(t)||), with the
/// integral by composite trapezoid on the solver grid.
inline double mild_residual(const Trajectory& traj, const NoiseRealization* noise, const Model& model) {
    const ModelConfig& cfg = model.cfg();
    if (traj.states.size() < 2) return 0.0;
    if (traj.states.size() != traj.times.size()) throw ConfigError("mild_residual: trajectory must keep all states");
    StepMap step(cfg);
    const double dt = traj.dt;
    auto forcing = [&](std::size_t k) { return assemble_F(traj.times[k], noise, traj.states[k], model); };

    ProductState free = traj.states.front();  // S~(t_k) V(0)
    ProductState first = forcing(0);
    ProductState acc = first;                 // sum_j S~(t_k - t_j) F_j
    ProductState from_zero = first;           // S~(t_k) F_0
    double worst = 0.0;
    for (std::size_t k = 1; k < traj.states.size(); ++k) {
        step.apply(free);
        step.apply(acc);
        step.apply(from_zero);
        ProductState fk = forcing(k);
        acc += fk;
        ProductState integral = dt * (acc - 0.5 * from_zero - 0.5 * fk);
        ProductState mild = free + integral;
        const double res = (traj.states[k] - mild).norm() / (1.0 + traj.states[k].norm());
        worst = std::max(worst, res);
    }
    return worst;
}

}  // namespace mforge
