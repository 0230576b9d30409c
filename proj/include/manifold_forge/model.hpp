#pragma once

// Delayed reaction-diffusion population model on (0, pi) with Dirichlet
// boundary conditions, discretized in the sine basis e_n(x) = sqrt(2/pi) sin(nx),
// together with the product state space H = L^2([-tau,0], X) x X.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "noise.hpp"

namespace mforge {

using SpectralField = Eigen::VectorXd;

/// Birth function f acting pointwise on the delayed value, with a declared
/// global Lipschitz constant and smoothness order (-1 means C-infinity).
class BirthFunction {
public:
    BirthFunction() : BirthFunction(zero()) {}
    BirthFunction(std::string kind, double p, std::function<double(double)> fn, double lipschitz, int smoothness)
        : kind_(std::move(kind)), p_(p), fn_(std::move(fn)), lipschitz_(lipschitz), smoothness_(smoothness) {}

    /// f(u) = p u / (1 + u^2); sup |f'| = |p| at u = 0.
    static BirthFunction rational(double p) {
        return {"rational", p, [p](double u) { return p * u / (1.0 + u * u); }, std::abs(p), -1};
    }
    static BirthFunction linear(double p) {
        return {"linear", p, [p](double u) { return p * u; }, std::abs(p), -1};
    }
    static BirthFunction zero() {
        return {"zero", 0.0, [](double) { return 0.0; }, 0.0, -1};
    }
    static BirthFunction custom(std::string name, std::function<double(double)> fn, double lipschitz,
                                int smoothness) {
        return {std::move(name), 0.0, std::move(fn), lipschitz, smoothness};
    }

    double operator()(double u) const { return fn_(u); }
    const std::string& kind() const { return kind_; }
    double p() const { return p_; }
    double lipschitz() const { return lipschitz_; }
    int smoothness() const { return smoothness_; }
    bool is_zero() const { return kind_ == "zero" || (kind_ != "custom" && p_ == 0.0 && lipschitz_ == 0.0); }

private:
    std::string kind_;
    double p_;
    std::function<double(double)> fn_;
    double lipschitz_;
    int smoothness_;
};

/// Parameters of the delayed population model and its discretization.
struct ModelConfig {
    double mu = 1.0;     // death rate (1/time)
    double delta = 0.5;  // delayed feedback rate (1/time)
    double tau = 1.0;    // delay (time)
    int modes = 8;       // sine modes retained
    int history_intervals = 100;  // r; history grid has r+1 nodes and dt = tau / r
    std::vector<SpectralField> g;  // noise shapes, one per Wiener component
    BirthFunction birth = BirthFunction::rational(0.005);

    int m() const { return static_cast<int>(g.size()); }
    double dt() const { return tau / static_cast<double>(history_intervals); }
    int nodes() const { return history_intervals + 1; }

    double xi(int i) const { return -tau + tau * static_cast<double>(i) / static_cast<double>(history_intervals); }
    std::vector<double> xi_nodes() const {
        std::vector<double> out(static_cast<std::size_t>(nodes()));
        for (int i = 0; i < nodes(); ++i) out[static_cast<std::size_t>(i)] = xi(i);
        return out;
    }

    bool has_noise() const {
        for (const auto& gj : g)
            if (!gj.isZero(0.0)) return true;
        return false;
    }

    /// Eigenvalue -n^2 of the Dirichlet Laplacian for 1-based mode n.
    static double laplace_eigenvalue(int n) { return -static_cast<double>(n) * static_cast<double>(n); }

    void validate() const {
        auto fail = [](const std::string& what) { throw ConfigError("ModelConfig: " + what); };
        if (!(mu > 0.0)) fail("mu_per_time must be positive");
        if (!(tau > 0.0)) fail("tau_time must be positive");
        if (!std::isfinite(delta)) fail("delta_per_time must be finite");
        if (modes < 1) fail("modes must be >= 1");
        if (history_intervals < 1) fail("history_intervals must be >= 1 (history_pts >= 2)");
        if (g.empty()) fail("need at least one noise shape (use a zero vector for no noise)");
        for (const auto& gj : g)
            if (gj.size() != modes) fail("every noise shape needs exactly `modes` coefficients");
        if (!(birth.lipschitz() >= 0.0)) fail("birth Lipschitz constant must be non-negative");
        if (std::abs(birth(0.0)) > 1e-14) fail("birth function must satisfy f(0) = 0");
    }
};

/// Verifies the declared Lipschitz constant on a test grid; returns the
/// largest sampled difference quotient.
inline double sampled_lipschitz(const BirthFunction& f, double lo = -10.0, double hi = 10.0, int points = 4001) {
    double best = 0.0;
    std::vector<double> u(static_cast<std::size_t>(points));
    for (int i = 0; i < points; ++i) u[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (points - 1);
    for (int i = 0; i + 1 < points; ++i) {
        const double a = u[static_cast<std::size_t>(i)], b = u[static_cast<std::size_t>(i + 1)];
        best = std::max(best, std::abs(f(a) - f(b)) / (b - a));
    }
    // a few long-range pairs as well
    for (int i = 0; i < points; i += 97)
        for (int k = points - 1; k > i; k -= 89) {
            const double a = u[static_cast<std::size_t>(i)], b = u[static_cast<std::size_t>(k)];
            best = std::max(best, std::abs(f(a) - f(b)) / (b - a));
        }
    return best;
}

/// Sine transform on the uniform interior grid x_k = k pi / (M+1), k = 1..M.
class SineBasis {
public:
    SineBasis(int modes, int points) : modes_(modes), points_(points) {
        if (points < 2 * modes + 1) {
            std::ostringstream os;
            os << "spatial grid with " << points << " interior points aliases " << modes
               << " modes (need >= " << 2 * modes + 1 << ")";
            throw ConfigError(os.str());
        }
        const double h = std::numbers::pi / static_cast<double>(points + 1);
        weight_ = h;
        eval_.resize(points, modes);
        x_.resize(points);
        const double amp = std::sqrt(2.0 / std::numbers::pi);
        for (int k = 0; k < points; ++k) {
            x_(k) = h * (k + 1);
            for (int n = 0; n < modes; ++n) eval_(k, n) = amp * std::sin((n + 1) * x_(k));
        }
    }
    explicit SineBasis(int modes) : SineBasis(modes, 2 * modes + 1) {}

    int modes() const { return modes_; }
    int points() const { return points_; }
    const Eigen::VectorXd& x() const { return x_; }

    Eigen::VectorXd reconstruct(const SpectralField& c) const { return eval_ * c; }
    SpectralField project(const Eigen::VectorXd& samples) const {
        if (samples.size() != points_) throw ConfigError("SineBasis::project: sample count mismatch");
        return weight_ * (eval_.transpose() * samples);
    }

private:
    int modes_;
    int points_;
    double weight_ = 0.0;
    Eigen::MatrixXd eval_;  // points x modes
    Eigen::VectorXd x_;
};

/// Sine coefficients of samples on a uniform interior grid of (0, pi).
inline SpectralField project_field(const Eigen::VectorXd& samples, int modes) {
    SineBasis basis(modes, static_cast<int>(samples.size()));
    return basis.project(samples);
}

inline double norm_X(const SpectralField& c) { return c.norm(); }

/// Discretized history phi in L^2([-tau, 0], X): row i is the field at xi_i.
struct HistorySegment {
    double tau = 1.0;
    Eigen::MatrixXd values;  // (r+1) x N

    HistorySegment() = default;
    HistorySegment(double tau_, Eigen::MatrixXd v) : tau(tau_), values(std::move(v)) {}
    static HistorySegment zero(const ModelConfig& cfg) {
        return {cfg.tau, Eigen::MatrixXd::Zero(cfg.nodes(), cfg.modes)};
    }
    static HistorySegment constant(const ModelConfig& cfg, const SpectralField& h) {
        HistorySegment s = zero(cfg);
        s.values.rowwise() = h.transpose();
        return s;
    }

    int intervals() const { return static_cast<int>(values.rows()) - 1; }
    double dxi() const { return tau / intervals(); }
    SpectralField at(int i) const { return values.row(i).transpose(); }
    SpectralField delayed() const { return at(0); }
    SpectralField present() const { return at(intervals()); }

    /// Composite trapezoid: weights dt/2, dt, ..., dt, dt/2 summing to tau.
    double norm_sq() const {
        const double h = dxi();
        double s = 0.0;
        const int r = intervals();
        for (int i = 0; i <= r; ++i) {
            const double w = (i == 0 || i == r) ? 0.5 * h : h;
            s += w * values.row(i).squaredNorm();
        }
        return s;
    }
    double norm() const { return std::sqrt(norm_sq()); }

    HistorySegment& operator+=(const HistorySegment& o) { values += o.values; return *this; }
    HistorySegment& operator-=(const HistorySegment& o) { values -= o.values; return *this; }
    HistorySegment& operator*=(double a) { values *= a; return *this; }
    friend HistorySegment operator+(HistorySegment a, const HistorySegment& b) { return a += b; }
    friend HistorySegment operator-(HistorySegment a, const HistorySegment& b) { return a -= b; }
    friend HistorySegment operator*(double a, HistorySegment s) { return s *= a; }

    /// (xi, n) coefficient table.
    std::string to_csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "xi";
        for (Eigen::Index n = 0; n < values.cols(); ++n) os << ",c" << (n + 1);
        os << "\n";
        for (int i = 0; i <= intervals(); ++i) {
            os << -tau + dxi() * i;
            for (Eigen::Index n = 0; n < values.cols(); ++n) os << "," << values(i, n);
            os << "\n";
        }
        return os.str();
    }
};

/// Element (phi, h) of H. Solutions pair a segment with its own value at 0.
struct ProductState {
    HistorySegment segment;
    SpectralField head;

    ProductState() = default;
    ProductState(HistorySegment s, SpectralField h) : segment(std::move(s)), head(std::move(h)) {}
    static ProductState zero(const ModelConfig& cfg) {
        return {HistorySegment::zero(cfg), SpectralField::Zero(cfg.modes)};
    }
    /// (phi, phi(0)), the pairing used for solutions.
    static ProductState compatible_from(HistorySegment s) {
        SpectralField h = s.present();
        return {std::move(s), std::move(h)};
    }

    bool is_compatible(double tol = 1e-10) const {
        return (head - segment.present()).norm() <= tol * (1.0 + head.norm());
    }

    double norm_sq() const { return segment.norm_sq() + head.squaredNorm(); }
    double norm() const { return std::sqrt(norm_sq()); }

    ProductState& operator+=(const ProductState& o) { segment += o.segment; head += o.head; return *this; }
    ProductState& operator-=(const ProductState& o) { segment -= o.segment; head -= o.head; return *this; }
    ProductState& operator*=(double a) { segment *= a; head *= a; return *this; }
    friend ProductState operator+(ProductState a, const ProductState& b) { return a += b; }
    friend ProductState operator-(ProductState a, const ProductState& b) { return a -= b; }
    friend ProductState operator*(double a, ProductState s) { return s *= a; }
};

/// Delta applied to a field: coefficient n scaled by -n^2.
inline SpectralField apply_A(const SpectralField& field) {
    SpectralField out = field;
    for (Eigen::Index n = 0; n < out.size(); ++n) out(n) *= ModelConfig::laplace_eigenvalue(static_cast<int>(n) + 1);
    return out;
}

/// L phi = -delta phi(-tau).
inline SpectralField apply_L(const HistorySegment& segment, double delta) { return -delta * segment.delayed(); }

/// Model configuration plus the pseudo-spectral machinery built from it.
class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)), basis_((cfg_.validate(), cfg_.modes)) {}

    const ModelConfig& cfg() const { return cfg_; }
    const SineBasis& basis() const { return basis_; }

    /// Nemytskii operator: f applied on the 2N+1-point grid, projected back.
    SpectralField nemytskii(const SpectralField& c) const {
        if (cfg_.birth.is_zero()) return SpectralField::Zero(c.size());
        Eigen::VectorXd u = basis_.reconstruct(c);
        for (Eigen::Index k = 0; k < u.size(); ++k) u(k) = cfg_.birth(u(k));
        return basis_.project(u);
    }

    SpectralField z_at(const NoiseRealization* noise, double t) const {
        if (noise == nullptr || !cfg_.has_noise()) return SpectralField::Zero(cfg_.modes);
        return z_field(*noise, t, cfg_.g);
    }

    /// Head of F(t, theta_t omega, V) = L z + f(v_t + z) + A z; the segment part is zero.
    SpectralField forcing_head(double t, const NoiseRealization* noise, const HistorySegment& segment) const {
        const SpectralField z_now = z_at(noise, t);
        const SpectralField z_delayed = z_at(noise, t - cfg_.tau);
        return -cfg_.delta * z_delayed + nemytskii(segment.delayed() + z_delayed) + apply_A(z_now);
    }

private:
    ModelConfig cfg_;
    SineBasis basis_;
};

/// F(t, theta_t omega, V) as an element of H (zero segment component).
inline ProductState assemble_F(double t, const NoiseRealization* noise, const ProductState& state, const Model& model) {
    return {HistorySegment::zero(model.cfg()), model.forcing_head(t, noise, state.segment)};
}

}  // namespace mforge
