#pragma once

// Two-sided Wiener paths, the Wiener shift, and the stationary
// Ornstein-Uhlenbeck process z_j(theta_t omega) used to conjugate the
// additive-noise equation into a pathwise random PDE.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace mforge {

/// Everything needed to regenerate a path bit-exactly.
struct PathSpec {
    std::uint64_t seed = 0;
    double t_lo = 0.0;   // requested window
    double t_hi = 0.0;
    double dt = 0.0;
    int m = 1;
    double shift = 0.0;  // accumulated theta_t applied after sampling
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Sub-stream seed for (seed, component, direction).
inline std::uint64_t substream_seed(std::uint64_t seed, int component, int direction) {
    std::uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ (static_cast<std::uint64_t>(component) + 1) * 0x632be59bd9b4e019ULL);
    return splitmix64(h ^ static_cast<std::uint64_t>(direction + 7));
}

// int_0^1 e^{xs} ds and int_0^1 e^{xs} s ds, stable near x = 0.
inline double phi1(double x) {
    if (std::abs(x) < 1e-3) return 1.0 + x / 2.0 + x * x / 6.0 + x * x * x / 24.0;
    return std::expm1(x) / x;
}
inline double phi_s(double x) {
    if (std::abs(x) < 1e-3) return 0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0;
    return (x * std::expm1(x) + x - std::expm1(x)) / (x * x);
}

/// Exact int_a^b e^{mu (u - ref)} l(u) du for l linear on [a, b] with l(a)=la, l(b)=lb.
inline double exp_weighted_linear(double a, double b, double la, double lb, double mu, double ref) {
    const double h = b - a;
    if (h <= 0.0) return 0.0;
    const double x = mu * h;
    const double ws = phi_s(x);
    const double w0 = phi1(x) - ws;
    return h * std::exp(mu * (a - ref)) * (la * w0 + lb * ws);
}

}  // namespace detail

/// Sampled two-sided m-component Wiener path on a uniform grid, piecewise
/// linear between nodes. Immutable; omega_j(0) = 0 for every component.
class WienerPath {
public:
    WienerPath(double origin, double dt, Eigen::MatrixXd values, PathSpec spec)
        : origin_(origin), dt_(dt), values_(std::move(values)), spec_(spec) {}

    double dt() const { return dt_; }
    int m() const { return static_cast<int>(values_.cols()); }
    Eigen::Index nodes() const { return values_.rows(); }
    double t_lo() const { return origin_; }
    double t_hi() const { return origin_ + dt_ * static_cast<double>(nodes() - 1); }
    double node_time(Eigen::Index k) const { return origin_ + dt_ * static_cast<double>(k); }
    const Eigen::MatrixXd& values() const { return values_; }
    const PathSpec& spec() const { return spec_; }

    bool contains(double t) const {
        const double slack = 1e-9 * dt_;
        return t >= t_lo() - slack && t <= t_hi() + slack;
    }

    /// Node index if t is a grid node (within 1e-9 dt), else -1.
    Eigen::Index node_index(double t) const {
        const double x = (t - origin_) / dt_;
        const double k = std::round(x);
        if (std::abs(x - k) > 1e-9 || k < 0 || k > static_cast<double>(nodes() - 1)) return -1;
        return static_cast<Eigen::Index>(k);
    }

    double value(int j, double t) const {
        if (!contains(t)) {
            std::ostringstream os;
            os << "Wiener path queried at t=" << t << " outside [" << t_lo() << ", " << t_hi() << "]";
            throw WindowError(os.str());
        }
        double x = (t - origin_) / dt_;
        x = std::clamp(x, 0.0, static_cast<double>(nodes() - 1));
        const double k = std::round(x);
        if (std::abs(x - k) <= 1e-12) return values_(static_cast<Eigen::Index>(k), j);
        auto k0 = static_cast<Eigen::Index>(std::floor(x));
        if (k0 >= nodes() - 1) k0 = nodes() - 2;
        const double frac = x - static_cast<double>(k0);
        return (1.0 - frac) * values_(k0, j) + frac * values_(k0 + 1, j);
    }

    std::string to_csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "t";
        for (int j = 0; j < m(); ++j) os << ",w" << (j + 1);
        os << "\n";
        for (Eigen::Index k = 0; k < nodes(); ++k) {
            os << node_time(k);
            for (int j = 0; j < m(); ++j) os << "," << values_(k, j);
            os << "\n";
        }
        return os.str();
    }

private:
    double origin_;
    double dt_;
    Eigen::MatrixXd values_;  // nodes x m
    PathSpec spec_;
};

/// Samples a two-sided path with independent N(0, dt) increments. Each
/// component draws from two sub-streams (forward from 0, backward from 0),
/// so neither m nor the past window length reshuffles the other draws.
inline WienerPath sample_wiener_path(std::uint64_t seed, double t_lo, double t_hi, double dt, int m) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("sample_wiener_path: dt must be positive");
    if (!(t_lo < 0.0 && t_hi > 0.0)) throw ConfigError("sample_wiener_path: window must contain 0 in its interior");
    if (m < 1) throw ConfigError("sample_wiener_path: need at least one component");

    const auto past = static_cast<Eigen::Index>(std::ceil(-t_lo / dt - 1e-9));
    const auto future = static_cast<Eigen::Index>(std::ceil(t_hi / dt - 1e-9));
    Eigen::MatrixXd values = Eigen::MatrixXd::Zero(past + future + 1, m);
    const double sd = std::sqrt(dt);
    for (int j = 0; j < m; ++j) {
        std::mt19937_64 fwd(detail::substream_seed(seed, j, 0));
        std::mt19937_64 bwd(detail::substream_seed(seed, j, 1));
        std::normal_distribution<double> normal(0.0, 1.0);
        for (Eigen::Index k = 0; k < future; ++k)
            values(past + k + 1, j) = values(past + k, j) + sd * normal(fwd);
        normal.reset();
        for (Eigen::Index k = 0; k < past; ++k)
            values(past - k - 1, j) = values(past - k, j) - sd * normal(bwd);
    }
    PathSpec spec{seed, t_lo, t_hi, dt, m, 0.0};
    return WienerPath(-dt * static_cast<double>(past), dt, std::move(values), spec);
}

/// The identically-zero path on the same grid conventions.
inline WienerPath zero_path(double t_lo, double t_hi, double dt, int m) {
    if (!(dt > 0.0) || !(t_lo < 0.0 && t_hi > 0.0) || m < 1) throw ConfigError("zero_path: bad window");
    const auto past = static_cast<Eigen::Index>(std::ceil(-t_lo / dt - 1e-9));
    const auto future = static_cast<Eigen::Index>(std::ceil(t_hi / dt - 1e-9));
    PathSpec spec{0, t_lo, t_hi, dt, m, 0.0};
    return WienerPath(-dt * static_cast<double>(past), dt, Eigen::MatrixXd::Zero(past + future + 1, m), spec);
}

/// theta_t omega(s) = omega(s + t) - omega(t). The shifted grid is the old
/// grid translated by -t, so the result is exact for any t in the window.
inline WienerPath shift(const WienerPath& path, double t) {
    if (!path.contains(t)) {
        std::ostringstream os;
        os << "shift by t=" << t << " leaves the sampled window [" << path.t_lo() << ", " << path.t_hi() << "]";
        throw WindowError(os.str());
    }
    Eigen::MatrixXd values = path.values();
    for (int j = 0; j < path.m(); ++j) values.col(j).array() -= path.value(j, t);
    // exact zero at the new origin when t is a node
    if (auto k = path.node_index(t); k >= 0) values.row(k).setZero();
    PathSpec spec = path.spec();
    spec.shift += t;
    return WienerPath(path.t_lo() - t, path.dt(), std::move(values), spec);
}

/// z_j(theta_t omega_j) = -mu int_{-C}^0 e^{mu s} (theta_t omega_j)(s) ds,
/// integrated exactly over the piecewise-linear path. The discarded tail is
/// bounded by sup|theta_t omega| * e^{-mu C}.
inline double ou_value(const WienerPath& path, int j, double t, double mu, double tail_cutoff) {
    if (!(mu > 0.0)) throw ConfigError("ou_value: mu must be positive");
    if (!(tail_cutoff > 0.0)) throw ConfigError("ou_value: tail_cutoff must be positive");
    const double a = t - tail_cutoff;
    if (!path.contains(a) || !path.contains(t)) {
        std::ostringstream os;
        os << "ou_value: [" << a << ", " << t << "] not inside sampled window [" << path.t_lo() << ", "
           << path.t_hi() << "]";
        throw WindowError(os.str());
    }
    const double wt = path.value(j, t);
    // integral of e^{mu (u - t)} omega(u) over [t - C, t]
    double integral = 0.0;
    double left = a;
    double left_val = path.value(j, a);
    auto k = static_cast<Eigen::Index>(std::floor((a - path.t_lo()) / path.dt())) + 1;
    for (; k < path.nodes(); ++k) {
        const double tk = path.node_time(k);
        if (tk >= t - 1e-12 * path.dt()) break;
        if (tk <= left) continue;
        const double vk = path.values()(k, j);
        integral += detail::exp_weighted_linear(left, tk, left_val, vk, mu, t);
        left = tk;
        left_val = vk;
    }
    integral += detail::exp_weighted_linear(left, t, left_val, wt, mu, t);
    return -mu * integral + wt * (1.0 - std::exp(-mu * tail_cutoff));
}

/// OU samples z_j(theta_{t_k} omega_j) at every path node t_k whose tail
/// window fits in the path. Built with an O(1)-per-node sliding recursion.
class NoiseRealization {
public:
    NoiseRealization(const WienerPath& path, double mu, double tail_cutoff) : path_(path), mu_(mu) {
        if (!(mu > 0.0)) throw ConfigError("NoiseRealization: mu must be positive");
        if (!(tail_cutoff > 0.0)) throw ConfigError("NoiseRealization: tail_cutoff must be positive");
        const double dt = path.dt();
        lag_ = static_cast<Eigen::Index>(std::ceil(tail_cutoff / dt - 1e-9));
        cutoff_ = dt * static_cast<double>(lag_);
        if (lag_ >= path.nodes()) throw WindowError("NoiseRealization: path shorter than the tail cutoff");
        first_ = lag_;
        const Eigen::Index count = path.nodes() - first_;
        ou_ = Eigen::MatrixXd::Zero(count, path.m());

        const double decay = std::exp(-mu * dt);
        const double tail_weight = 1.0 - std::exp(-mu * cutoff_);
        const double x = mu * dt;
        const double ws = detail::phi_s(x);
        const double w0 = detail::phi1(x) - ws;
        const double far = std::exp(-mu * cutoff_);
        const auto& w = path.values();
        for (int j = 0; j < path.m(); ++j) {
            // direct sum for the first node, then slide
            double integral = 0.0;
            const double t0 = path.node_time(first_);
            for (Eigen::Index p = 0; p < lag_; ++p)
                integral += detail::exp_weighted_linear(path.node_time(p), path.node_time(p + 1), w(p, j),
                                                        w(p + 1, j), mu, t0);
            ou_(0, j) = -mu * integral + w(first_, j) * tail_weight;
            for (Eigen::Index k = first_; k + 1 < path.nodes(); ++k) {
                const Eigen::Index d = k - lag_;
                const double dropped = dt * far * (w(d, j) * w0 + w(d + 1, j) * ws);
                const double added = dt * decay * (w(k, j) * w0 + w(k + 1, j) * ws);
                integral = decay * (integral - dropped) + added;
                ou_(k + 1 - first_, j) = -mu * integral + w(k + 1, j) * tail_weight;
            }
        }
        tail_bound_ = 2.0 * w.cwiseAbs().maxCoeff() * std::exp(-mu * cutoff_);
    }

    const WienerPath& path() const { return path_; }
    double mu() const { return mu_; }
    double tail_cutoff() const { return cutoff_; }
    int m() const { return path_.m(); }
    /// Documented bound on the truncated part of the improper integral.
    double tail_bound() const { return tail_bound_; }
    double t_first() const { return path_.node_time(first_); }
    double t_last() const { return path_.t_hi(); }

    double z(int j, double t) const {
        const double slack = 1e-9 * path_.dt();
        if (t < t_first() - slack || t > t_last() + slack) {
            std::ostringstream os;
            os << "OU value requested at t=" << t << " outside the realized window [" << t_first() << ", "
               << t_last() << "]";
            throw WindowError(os.str());
        }
        double x = (t - t_first()) / path_.dt();
        x = std::clamp(x, 0.0, static_cast<double>(ou_.rows() - 1));
        const double k = std::round(x);
        if (std::abs(x - k) <= 1e-9) return ou_(static_cast<Eigen::Index>(k), j);
        auto k0 = static_cast<Eigen::Index>(std::floor(x));
        if (k0 >= ou_.rows() - 1) k0 = ou_.rows() - 2;
        const double frac = x - static_cast<double>(k0);
        return (1.0 - frac) * ou_(k0, j) + frac * ou_(k0 + 1, j);
    }

    /// Wiener increment omega_j(b) - omega_j(a).
    double increment(int j, double a, double b) const { return path_.value(j, b) - path_.value(j, a); }

private:
    WienerPath path_;
    double mu_;
    double cutoff_ = 0.0;
    Eigen::Index lag_ = 0;
    Eigen::Index first_ = 0;
    Eigen::MatrixXd ou_;  // rows aligned with path nodes first_..end
    double tail_bound_ = 0.0;
};

/// z(theta_t omega) = sum_j g_j z_j(theta_t omega_j) as spectral coefficients.
inline Eigen::VectorXd z_field(const NoiseRealization& noise, double t, const std::vector<Eigen::VectorXd>& g) {
    if (g.empty()) throw ConfigError("z_field: no noise shapes");
    if (static_cast<int>(g.size()) != noise.m())
        throw ConfigError("z_field: number of noise shapes differs from path components");
    Eigen::VectorXd out = Eigen::VectorXd::Zero(g.front().size());
    for (int j = 0; j < noise.m(); ++j) {
        if (g[static_cast<std::size_t>(j)].size() != out.size()) throw ConfigError("z_field: ragged noise shapes");
        if (g[static_cast<std::size_t>(j)].isZero(0.0)) continue;
        out += g[static_cast<std::size_t>(j)] * noise.z(j, t);
    }
    return out;
}

/// History field xi -> z(theta_{t+xi} omega) on the nodes t + xi_i, rows = nodes.
inline Eigen::MatrixXd z_history(const NoiseRealization& noise, double t, const std::vector<double>& xi,
                                 const std::vector<Eigen::VectorXd>& g) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(xi.size()), g.empty() ? 0 : g.front().size());
    for (std::size_t i = 0; i < xi.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = z_field(noise, t + xi[i], g);
    return out;
}

/// Default two-sided window: every theta_t evaluation for t in [-T_past, T_future]
/// with delay tau and OU tail cutoff stays inside.
struct Window {
    double t_lo;
    double t_hi;
};
inline Window default_window(double tail_cutoff, double tau, double t_past, double t_future) {
    return {-(tail_cutoff + tau + t_past), std::max(t_future, 1e-9)};
}

inline double default_tail_cutoff(double mu) { return 20.0 / mu; }

}  // namespace mforge
