#pragma once

// Spectrum of the linear delay operator, spectral gap selection, the
// unstable/stable projections and the dichotomy constant.
//
// Per sine mode n the linear part reduces to the scalar delay equation
//   x'(t) = a x(t) + b x(t - tau),   a = -n^2 - mu,  b = -delta,
// whose characteristic function is chi(lambda) = lambda - a - b e^{-lambda tau}.

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "flow.hpp"
#include "model.hpp"
#include "parallel.hpp"

namespace mforge {

using cplx = std::complex<double>;

struct CharacteristicRoot {
    cplx lam;
    int mode = 1;
    double residual = 0.0;
    int multiplicity = 1;
};

inline cplx characteristic(cplx lam, int n, const ModelConfig& cfg) {
    const double c = static_cast<double>(n) * n + cfg.mu;
    return lam + cfg.delta * std::exp(-lam * cfg.tau) + c;
}

inline cplx characteristic_derivative(cplx lam, int /*n*/, const ModelConfig& cfg) {
    return 1.0 - cfg.delta * cfg.tau * std::exp(-lam * cfg.tau);
}

struct Rect {
    double re_lo, re_hi, im_lo, im_hi;
    double width() const { return re_hi - re_lo; }
    double height() const { return im_hi - im_lo; }
    bool contains(cplx z, double slack = 0.0) const {
        return z.real() >= re_lo - slack && z.real() <= re_hi + slack && z.imag() >= im_lo - slack &&
               z.imag() <= im_hi + slack;
    }
};

namespace detail {

constexpr double kNearRoot = 1e-6;

struct ArgWalker {
    int n;
    const ModelConfig& cfg;

    void guard(cplx z, cplx f) const {
        const cplx d = characteristic_derivative(z, n, cfg);
        const double dist = std::abs(f) / std::max(std::abs(d), 1e-300);
        if (std::abs(f) == 0.0 || dist < kNearRoot) {
            std::ostringstream os;
            os << "contour passes within " << kNearRoot << " of a root near " << z.real() << (z.imag() < 0 ? "" : "+")
               << z.imag() << "i (mode " << n << ")";
            throw ContourError(os.str());
        }
    }

    // Change of arg chi along the straight segment z0 -> z1. Segments are split
    // until each piece turns by less than pi/3 and is shorter than the
    // first-order distance |chi / chi'| to the nearest zero.
    double segment(cplx z0, cplx f0, cplx z1, cplx f1, int depth) const {
        const double turn = std::arg(f1 / f0);
        const cplx d0 = characteristic_derivative(z0, n, cfg);
        const double reach = std::abs(f0) / std::max(std::abs(d0), 1e-300);
        if ((std::abs(turn) <= std::numbers::pi / 3.0 && std::abs(z1 - z0) <= reach) || depth > 48) {
            if (depth > 48) throw ContourError("winding number: edge refinement did not resolve the argument");
            return turn;
        }
        const cplx zm = 0.5 * (z0 + z1);
        const cplx fm = characteristic(zm, n, cfg);
        guard(zm, fm);
        return segment(z0, f0, zm, fm, depth + 1) + segment(zm, fm, z1, f1, depth + 1);
    }
};

}  // namespace detail

/// Number of zeros of chi_n inside the rectangle, from the total change of
/// arg chi along its boundary (4096 base nodes, refined adaptively).
inline int winding_number(const Rect& box, int n, const ModelConfig& cfg, int base_nodes = 4096) {
    if (!(box.re_hi > box.re_lo) || !(box.im_hi > box.im_lo)) throw ContourError("winding number: empty rectangle");
    const cplx corners[5] = {{box.re_lo, box.im_lo}, {box.re_hi, box.im_lo}, {box.re_hi, box.im_hi},
                             {box.re_lo, box.im_hi}, {box.re_lo, box.im_lo}};
    const double perimeter = 2.0 * (box.width() + box.height());
    detail::ArgWalker walk{n, cfg};
    double total = 0.0;
    for (int e = 0; e < 4; ++e) {
        const cplx a = corners[e], b = corners[e + 1];
        const int pieces = std::max(8, static_cast<int>(std::ceil(base_nodes * std::abs(b - a) / perimeter)));
        cplx z_prev = a;
        cplx f_prev = characteristic(a, n, cfg);
        walk.guard(z_prev, f_prev);
        for (int k = 1; k <= pieces; ++k) {
            const cplx z = a + (b - a) * (static_cast<double>(k) / pieces);
            const cplx f = characteristic(z, n, cfg);
            walk.guard(z, f);
            total += walk.segment(z_prev, f_prev, z, f, 0);
            z_prev = z;
            f_prev = f;
        }
    }
    const double w = total / (2.0 * std::numbers::pi);
    const double rounded = std::round(w);
    if (std::abs(w - rounded) > 1e-6) {
        std::ostringstream os;
        os << "winding number not an integer (" << w << ")";
        throw ContourError(os.str());
    }
    return static_cast<int>(rounded);
}

namespace detail {

inline std::optional<cplx> newton_root(cplx z, int n, const ModelConfig& cfg) {
    for (int it = 0; it < 100; ++it) {
        const cplx f = characteristic(z, n, cfg);
        const cplx d = characteristic_derivative(z, n, cfg);
        if (std::abs(d) == 0.0) return std::nullopt;
        const cplx step = f / d;
        z -= step;
        if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) return std::nullopt;
        if (std::abs(step) <= 1e-15 * (1.0 + std::abs(z))) break;
    }
    for (int it = 0; it < 2; ++it) z -= characteristic(z, n, cfg) / characteristic_derivative(z, n, cfg);
    return z;
}

struct RootSearch {
    int n;
    const ModelConfig& cfg;
    std::vector<CharacteristicRoot> found;

    // Count with a few alternative split positions if a child edge grazes a root.
    int count(const Rect& r) const { return winding_number(r, n, cfg); }

    void solve(const Rect& r, int inside, int depth) {
        if (inside == 0) return;
        const double diam = std::hypot(r.width(), r.height());
        if (inside == 1 && diam < 2.0) {
            const cplx center{0.5 * (r.re_lo + r.re_hi), 0.5 * (r.im_lo + r.im_hi)};
            if (auto z = newton_root(center, n, cfg); z && r.contains(*z, 1e-9 * (1.0 + std::abs(*z)))) {
                CharacteristicRoot root;
                root.lam = *z;
                root.mode = n;
                root.residual = std::abs(characteristic(*z, n, cfg));
                found.push_back(root);
                return;
            }
        }
        if (diam < 1e-8) {
            std::ostringstream os;
            os << inside << " roots of mode " << n << " cluster within " << diam << " near " << r.re_lo << "+"
               << r.im_lo << "i; repeated roots are not supported";
            throw MultiplicityError(os.str());
        }
        if (depth > 200) throw ContourError("root isolation: subdivision depth exceeded");
        static constexpr double fractions[] = {0.5, 0.4721, 0.5279, 0.4417, 0.5583, 0.4103};
        for (double frac : fractions) {
            Rect a = r, b = r;
            if (r.width() >= r.height()) {
                const double cut = r.re_lo + frac * r.width();
                a.re_hi = cut;
                b.re_lo = cut;
            } else {
                const double cut = r.im_lo + frac * r.height();
                a.im_hi = cut;
                b.im_lo = cut;
            }
            int ca = 0, cb = 0;
            try {
                ca = count(a);
                cb = count(b);
            } catch (const ContourError&) {
                continue;
            }
            if (ca + cb != inside) continue;
            solve(a, ca, depth + 1);
            solve(b, cb, depth + 1);
            return;
        }
        throw ContourError("root isolation: every split line passed too close to a root");
    }
};

}  // namespace detail

/// Rectangle that contains every root of mode n with Re >= re_min, from
/// |lambda + n^2 + mu| = |delta| e^{-Re lambda tau}.
inline std::optional<Rect> root_box(int n, const ModelConfig& cfg, double re_min) {
    const double c = static_cast<double>(n) * n + cfg.mu;
    const double reach = std::abs(cfg.delta) * std::exp(-re_min * cfg.tau);
    const double re_max = -c + reach + 1.0;
    if (re_max <= re_min) return std::nullopt;
    return Rect{re_min, re_max, -(reach + 1.0), reach + 1.0};
}

/// All roots of chi_n with Re >= re_min, sorted by decreasing real part then
/// imaginary part. The count is certified by the winding number of the box.
inline std::vector<CharacteristicRoot> characteristic_roots(int n, const ModelConfig& cfg, double re_min) {
    if (!std::isfinite(re_min)) throw ConfigError("characteristic_roots: re_min must be finite");
    if (n < 1) throw ConfigError("characteristic_roots: mode index is 1-based");
    const double c = static_cast<double>(n) * n + cfg.mu;
    if (cfg.delta == 0.0) {
        if (-c < re_min) return {};
        return {CharacteristicRoot{cplx(-c, 0.0), n, 0.0, 1}};
    }
    auto box0 = root_box(n, cfg, re_min);
    if (!box0) return {};

    for (int attempt = 0; attempt < 6; ++attempt) {
        Rect box = *box0;
        const double nudge = 1e-5 * attempt * (1.0 + std::abs(re_min));
        box.re_lo -= nudge;
        box.re_hi += 0.37 * nudge;
        box.im_lo -= 0.61 * nudge;
        box.im_hi += 0.61 * nudge;
        detail::RootSearch search{n, cfg, {}};
        int total = 0;
        try {
            total = search.count(box);
            search.solve(box, total, 0);
        } catch (const ContourError&) {
            if (attempt == 5) throw;
            continue;
        }
        if (static_cast<int>(search.found.size()) != total) {
            throw ContourError("characteristic_roots: isolated root count differs from winding number");
        }
        std::vector<CharacteristicRoot> roots;
        for (auto& r : search.found) {
            if (std::abs(r.lam.imag()) < 1e-12 * (1.0 + std::abs(r.lam))) r.lam.imag(0.0);
            if (r.lam.real() >= re_min) roots.push_back(r);
        }
        std::sort(roots.begin(), roots.end(), [](const auto& x, const auto& y) {
            if (x.lam.real() != y.lam.real()) return x.lam.real() > y.lam.real();
            return x.lam.imag() > y.lam.imag();
        });
        return roots;
    }
    throw ContourError("characteristic_roots: retries exhausted");
}

/// Roots of every mode 1..N that can reach Re >= re_min.
inline std::vector<std::vector<CharacteristicRoot>> spectrum(const ModelConfig& cfg, double re_min) {
    std::vector<std::vector<CharacteristicRoot>> out(static_cast<std::size_t>(cfg.modes));
    parallel_for(out.size(), [&](std::size_t i) { out[i] = characteristic_roots(static_cast<int>(i) + 1, cfg, re_min); });
    return out;
}

struct GapCandidate {
    double lo = 0.0;
    double hi = 0.0;
    int roots_above = 0;  // roots with Re >= hi over all modes
    bool verified = false;
    double width() const { return hi - lo; }
};

struct GapSearch {
    double re_lo = 0.0;
    double re_hi = 0.0;
    double min_width = 0.0;
    std::vector<std::vector<CharacteristicRoot>> roots;  // per mode, Re >= re_lo
    std::vector<GapCandidate> gaps;                      // sorted by decreasing width
    bool admissible() const { return !gaps.empty(); }
};

/// Maximal root-free open intervals of real parts inside (re_lo, re_hi), each
/// re-checked by a zero winding number over the strip for every relevant mode.
inline GapSearch find_gap(const ModelConfig& cfg, double re_lo, double re_hi, double min_width = 0.0) {
    if (!(re_hi > re_lo)) throw ConfigError("find_gap: empty window");
    GapSearch out;
    out.re_lo = re_lo;
    out.re_hi = re_hi;
    out.min_width = min_width;
    out.roots = spectrum(cfg, re_lo);

    std::vector<double> cuts{re_lo, re_hi};
    for (const auto& mode_roots : out.roots)
        for (const auto& r : mode_roots)
            if (r.lam.real() > re_lo && r.lam.real() < re_hi) cuts.push_back(r.lam.real());
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end(), [](double a, double b) { return std::abs(a - b) < 1e-12; }),
               cuts.end());

    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
        GapCandidate g{cuts[i], cuts[i + 1], 0, false};
        if (g.width() < std::max(min_width, 1e-9)) continue;
        for (const auto& mode_roots : out.roots)
            for (const auto& r : mode_roots)
                if (r.lam.real() >= g.hi - 1e-12) ++g.roots_above;
        out.gaps.push_back(g);
    }

    parallel_for(out.gaps.size(), [&](std::size_t i) {
        GapCandidate& g = out.gaps[i];
        const double shrink = std::min(1e-6, 0.25 * g.width());
        bool clean = true;
        for (int n = 1; n <= cfg.modes && clean; ++n) {
            if (cfg.delta == 0.0) {
                const double lam = -static_cast<double>(n) * n - cfg.mu;
                clean = !(lam > g.lo && lam < g.hi);
                continue;
            }
            auto box = root_box(n, cfg, g.lo + shrink);
            if (!box) continue;
            box->re_hi = g.hi - shrink;
            if (box->re_hi <= box->re_lo) continue;
            clean = winding_number(*box, n, cfg) == 0;
        }
        g.verified = clean;
    });
    std::stable_sort(out.gaps.begin(), out.gaps.end(),
                     [](const GapCandidate& a, const GapCandidate& b) { return a.width() > b.width(); });
    return out;
}

/// Root of the discretized per-mode step map matching a continuous root:
/// e^{nu dt} solves mu^{r+1} = E mu^r + kappa, with E = e^{a dt},
/// kappa = b (E - 1)/a.
inline cplx discrete_exponent(cplx lam, int n, const ModelConfig& cfg) {
    const double dt = cfg.dt();
    const double a = ModelConfig::laplace_eigenvalue(n) - cfg.mu;
    const double E = std::exp(a * dt);
    const double kappa = -cfg.delta * std::expm1(a * dt) / a;
    cplx nu = lam;
    for (int it = 0; it < 100; ++it) {
        const cplx q = std::exp(nu * dt) - E - kappa * std::exp(-nu * cfg.tau);
        const cplx dq = dt * std::exp(nu * dt) + kappa * cfg.tau * std::exp(-nu * cfg.tau);
        const cplx step = q / dq;
        nu -= step;
        if (std::abs(step) <= 1e-15 * (1.0 + std::abs(nu))) break;
    }
    if (lam.imag() == 0.0) nu.imag(0.0);
    return nu;
}

/// Rank-d block of the unstable projection for one mode, acting on the local
/// vector (segment column n at the r+1 nodes, head n).
struct ModeProjection {
    int mode = 1;
    std::vector<cplx> exponents;      // discrete exponents nu, one per real root or conjugate pair
    Eigen::MatrixXd basis;            // (r+2) x d
    Eigen::MatrixXd coords;           // d x (r+2), coords * basis = I
    Eigen::MatrixXd generator;        // d x d, M restricted to the range is exp(dt * generator)

    int rank() const { return static_cast<int>(basis.cols()); }
    Eigen::MatrixXd matrix() const { return basis * coords; }
};

/// Spectral projection onto the eigenvectors of the given roots for the
/// discretized mode-n delay semigroup. Right eigenvectors are e^{nu xi} on the
/// nodes with head 1; the left eigenvector w has w_head = 1 and
/// w_{xi_j} = kappa e^{-nu dt (j+1)} for j < r. Conjugate pairs give a real rank-2 block.
inline ModeProjection mode_projection(int n, const std::vector<CharacteristicRoot>& roots, const ModelConfig& cfg) {
    const int r = cfg.history_intervals;
    const int dim = r + 2;
    const double dt = cfg.dt();
    const double a = ModelConfig::laplace_eigenvalue(n) - cfg.mu;
    const double kappa = -cfg.delta * std::expm1(a * dt) / a;

    ModeProjection out;
    out.mode = n;
    std::vector<Eigen::VectorXd> cols;
    std::vector<Eigen::RowVectorXd> rows;
    std::vector<std::pair<int, cplx>> blocks;  // (size, nu)
    for (const auto& root : roots) {
        if (root.mode != n) throw ConfigError("mode_projection: root belongs to another mode");
        if (root.multiplicity != 1) throw MultiplicityError("mode_projection: repeated root");
        if (root.lam.imag() < 0.0) continue;  // represented by its conjugate
        const cplx nu = discrete_exponent(root.lam, n, cfg);
        Eigen::VectorXcd v(dim), w(dim);
        for (int i = 0; i <= r; ++i) v(i) = std::exp(nu * dt * static_cast<double>(i - r));
        v(r + 1) = 1.0;
        for (int j = 0; j < r; ++j) w(j) = kappa * std::exp(-nu * dt * static_cast<double>(j + 1));
        w(r) = 0.0;
        w(r + 1) = 1.0;
        const cplx pairing = w.transpose() * v;
        if (std::abs(pairing) < 1e-10) {
            std::ostringstream os;
            os << "mode " << n << ": eigenvalue " << root.lam << " is defective (pairing " << std::abs(pairing) << ")";
            throw MultiplicityError(os.str());
        }
        const Eigen::VectorXcd u = w / pairing;
        out.exponents.push_back(nu);
        if (root.lam.imag() == 0.0) {
            cols.push_back(v.real());
            rows.push_back(u.real().transpose());
            blocks.emplace_back(1, nu);
        } else {
            cols.push_back(v.real());
            cols.push_back(v.imag());
            rows.push_back(2.0 * u.real().transpose());
            rows.push_back(-2.0 * u.imag().transpose());
            blocks.emplace_back(2, nu);
        }
    }
    const int d = static_cast<int>(cols.size());
    out.basis.resize(dim, d);
    out.coords.resize(d, dim);
    out.generator = Eigen::MatrixXd::Zero(d, d);
    for (int k = 0; k < d; ++k) {
        out.basis.col(k) = cols[static_cast<std::size_t>(k)];
        out.coords.row(k) = rows[static_cast<std::size_t>(k)];
    }
    int at = 0;
    for (const auto& [size, nu] : blocks) {
        if (size == 1) {
            out.generator(at, at) = nu.real();
        } else {
            out.generator.block(at, at, 2, 2) << nu.real(), nu.imag(), -nu.imag(), nu.real();
        }
        at += size;
    }
    return out;
}

namespace detail {

inline Eigen::VectorXd local_vector(const ProductState& x, int col) {
    const int r = x.segment.intervals();
    Eigen::VectorXd y(r + 2);
    y.head(r + 1) = x.segment.values.col(col);
    y(r + 1) = x.head(col);
    return y;
}

inline Eigen::MatrixXd block_diag_exp(const std::vector<ModeProjection>& blocks, int dim, double t) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(dim, dim);
    int at = 0;
    for (const auto& b : blocks) {
        const int d = b.rank();
        out.block(at, at, d, d) = (t * b.generator).exp();
        at += d;
    }
    return out;
}

}  // namespace detail

/// Dichotomy data: gap, weight, unstable roots and the projections.
struct SpectralSplit {
    double alpha = 0.0;
    double beta = 0.0;
    double eta = 0.0;
    double K = 1.0;
    std::vector<CharacteristicRoot> unstable_roots;
    std::vector<std::vector<CharacteristicRoot>> all_roots;  // per mode, as searched
    std::vector<ModeProjection> blocks;                      // modes with nonzero rank only
    int modes = 0;
    int intervals = 0;
    double tau = 1.0;

    int unstable_dim() const {
        int d = 0;
        for (const auto& b : blocks) d += b.rank();
        return d;
    }

    /// Coordinates W x of the unstable component.
    Eigen::VectorXd coords(const ProductState& x) const {
        Eigen::VectorXd c(unstable_dim());
        int at = 0;
        for (const auto& b : blocks) {
            c.segment(at, b.rank()) = b.coords * detail::local_vector(x, b.mode - 1);
            at += b.rank();
        }
        return c;
    }

    /// Coordinates of the head-only state (0, h); only the last column of W is needed.
    Eigen::VectorXd head_coords(const SpectralField& h) const {
        Eigen::VectorXd c(unstable_dim());
        int at = 0;
        for (const auto& b : blocks) {
            c.segment(at, b.rank()) = b.coords.col(intervals + 1) * h(b.mode - 1);
            at += b.rank();
        }
        return c;
    }

    ProductState lift(const Eigen::VectorXd& c) const {
        ProductState x{HistorySegment(tau, Eigen::MatrixXd::Zero(intervals + 1, modes)), SpectralField::Zero(modes)};
        add_lift(x, c, 1.0);
        return x;
    }

    /// x += scale * V c.
    void add_lift(ProductState& x, const Eigen::VectorXd& c, double scale) const {
        int at = 0;
        for (const auto& b : blocks) {
            const Eigen::VectorXd y = scale * (b.basis * c.segment(at, b.rank()));
            x.segment.values.col(b.mode - 1) += y.head(intervals + 1);
            x.head(b.mode - 1) += y(intervals + 1);
            at += b.rank();
        }
    }

    ProductState project_unstable(const ProductState& x) const { return lift(coords(x)); }
    ProductState project_stable(const ProductState& x) const {
        ProductState y = x;
        add_lift(y, coords(x), -1.0);
        return y;
    }

    /// Block-diagonal generator of S~(t) on range(P^u).
    Eigen::MatrixXd generator() const {
        const int d = unstable_dim();
        Eigen::MatrixXd G = Eigen::MatrixXd::Zero(d, d);
        int at = 0;
        for (const auto& b : blocks) {
            G.block(at, at, b.rank(), b.rank()) = b.generator;
            at += b.rank();
        }
        return G;
    }

    /// exp(t G) for any real t, via the matrix exponential of each block.
    Eigen::MatrixXd unstable_propagator(double t) const { return detail::block_diag_exp(blocks, unstable_dim(), t); }

    /// S~(t) P^u x for t of either sign.
    ProductState unstable_flow(double t, const ProductState& x) const { return lift(unstable_propagator(t) * coords(x)); }

    /// Dense (r+2)x(r+2) per-mode projection matrices, for diagnostics.
    Eigen::MatrixXd mode_matrix(int n) const {
        for (const auto& b : blocks)
            if (b.mode == n) return b.matrix();
        return Eigen::MatrixXd::Zero(intervals + 2, intervals + 2);
    }
};

struct GapOrder {
    int order = 1;
    bool applicable = true;
    double value = 0.0;
    bool holds = false;
    double margin = 0.0;
};

struct GapReport {
    std::vector<GapOrder> orders;
    bool holds(int i) const {
        for (const auto& o : orders)
            if (o.order == i) return o.applicable && o.holds;
        return false;
    }
    double rho() const { return orders.empty() ? 0.0 : orders.front().value; }
};

/// K L_f (1/(i eta - beta) + 1/(alpha - i eta)) < 1 for i = 1..k; orders with
/// i eta outside (beta, alpha) are reported as not applicable.
inline GapReport gap_condition(double K, double L_f, double alpha, double beta, double eta, int k) {
    if (!(beta < eta && eta < alpha)) throw ConfigError("gap_condition: need beta < eta < alpha");
    GapReport rep;
    for (int i = 1; i <= std::max(1, k); ++i) {
        GapOrder o;
        o.order = i;
        const double ie = i * eta;
        if (!(beta < ie && ie < alpha)) {
            o.applicable = false;
            o.value = std::numeric_limits<double>::infinity();
            o.margin = -std::numeric_limits<double>::infinity();
            rep.orders.push_back(o);
            continue;
        }
        o.value = (L_f == 0.0) ? 0.0 : K * L_f * (1.0 / (ie - beta) + 1.0 / (alpha - ie));
        o.holds = o.value < 1.0;
        o.margin = 1.0 - o.value;
        rep.orders.push_back(o);
    }
    return rep;
}

/// Largest L_f for which the order-1 gap condition holds with the given K.
inline double critical_lipschitz(double K, double alpha, double beta, double eta) {
    return 1.0 / (K * (1.0 / (eta - beta) + 1.0 / (alpha - eta)));
}

/// Discrete spectrum check: no eigenvalue of any mode's step map has modulus
/// in [e^{beta dt}, e^{alpha dt}], and exactly the selected roots lie above.
inline void check_discrete_gap(const SpectralSplit& split, const ModelConfig& cfg) {
    const int r = cfg.history_intervals;
    const double dt = cfg.dt();
    for (int n = 1; n <= cfg.modes; ++n) {
        const double a = ModelConfig::laplace_eigenvalue(n) - cfg.mu;
        const double E = std::exp(a * dt);
        const double kappa = -cfg.delta * std::expm1(a * dt) / a;
        // companion matrix of p(x) = x^{r+1} - E x^r - kappa
        Eigen::MatrixXd C = Eigen::MatrixXd::Zero(r + 1, r + 1);
        C(0, 0) = E;
        C(0, r) = kappa;
        for (int i = 1; i <= r; ++i) C(i, i - 1) = 1.0;
        const Eigen::VectorXcd ev = C.eigenvalues();
        int above = 0;
        for (Eigen::Index i = 0; i < ev.size(); ++i) {
            const double mag = std::abs(ev(i));
            const double rate = mag > 0.0 ? std::log(mag) / dt : -std::numeric_limits<double>::infinity();
            if (rate > split.beta && rate < split.alpha) {
                std::ostringstream os;
                os << "discretized mode " << n << " has a growth rate " << rate << " inside the gap (" << split.beta
                   << ", " << split.alpha << "); refine dt or move the gap";
                throw DichotomyError(os.str());
            }
            if (rate >= split.alpha) ++above;
        }
        int expected = 0;
        for (const auto& b : split.blocks)
            if (b.mode == n) expected = b.rank();
        if (above != expected) {
            std::ostringstream os;
            os << "mode " << n << ": " << above << " discrete eigenvalues above the gap but " << expected
               << " continuous roots selected";
            throw DichotomyError(os.str());
        }
    }
}

struct SplitRequest {
    double re_lo = -4.0;  // search window for gaps
    double re_hi = 1.0;
    double margin = 0.1;  // fraction of the gap width kept clear on each side
    std::optional<double> alpha;
    std::optional<double> beta;
    std::optional<double> eta;
    int order = 2;        // k for the per-order gap condition
    double K_horizon = 0.0;  // 0 means 5 tau
    int K_samples = 64;
    std::uint64_t K_seed = 2024;
};

struct KEstimate {
    double K = 1.0;           // reported value, with safety factor
    double sampled_max = 1.0; // before the factor
    double safety = 1.1;
    double worst_time = 0.0;
    std::string worst_kind;
};

namespace detail {

inline ProductState random_unit_state(const ModelConfig& cfg, std::mt19937_64& rng) {
    std::normal_distribution<double> N01(0.0, 1.0);
    ProductState x = ProductState::zero(cfg);
    for (Eigen::Index i = 0; i < x.segment.values.size(); ++i) x.segment.values.data()[i] = N01(rng);
    for (Eigen::Index i = 0; i < x.head.size(); ++i) x.head(i) = N01(rng);
    x *= 1.0 / x.norm();
    return x;
}

inline std::vector<ProductState> structured_states(const ModelConfig& cfg) {
    std::vector<ProductState> out;
    const int r = cfg.history_intervals;
    for (int n = 0; n < cfg.modes; ++n) {
        ProductState head_only = ProductState::zero(cfg);
        head_only.head(n) = 1.0;
        out.push_back(head_only);
        ProductState flat = ProductState::zero(cfg);
        flat.segment.values.col(n).setOnes();
        flat.head(n) = 1.0;
        out.push_back(flat);
        for (int i : {0, r - 1, r}) {
            if (i < 0) continue;
            ProductState bump = ProductState::zero(cfg);
            bump.segment.values(i, n) = 1.0;
            if (i == r) bump.head(n) = 1.0;
            out.push_back(bump);
        }
    }
    for (auto& x : out) x *= 1.0 / x.norm();
    return out;
}

}  // namespace detail

/// Sampled sup of e^{-beta t}|S~(t)P^s x| (t in [0, horizon]) and
/// e^{-alpha t}|S~(t)P^u x| (t in [-horizon, 0]) over unit x, times 1.1.
inline KEstimate estimate_K(const SpectralSplit& split, const Model& model, double horizon, int samples,
                            std::uint64_t seed = 2024, double safety = 1.1) {
    const ModelConfig& cfg = model.cfg();
    if (!(horizon > 0.0)) throw ConfigError("estimate_K: horizon must be positive");
    std::vector<ProductState> candidates = detail::structured_states(cfg);
    std::mt19937_64 rng(seed);
    for (int s = 0; s < samples; ++s) candidates.push_back(detail::random_unit_state(cfg, rng));

    const long steps = std::max(1L, static_cast<long>(std::ceil(horizon / cfg.dt())));
    const Eigen::MatrixXd back_one = split.unstable_propagator(-cfg.dt());
    struct Local {
        double best = 0.0, t = 0.0;
        std::string kind;
    };
    std::vector<Local> results(candidates.size());
    parallel_for(candidates.size(), [&](std::size_t idx) {
        const ProductState& x = candidates[idx];
        Local loc;
        StepMap step(cfg);
        ProductState y = split.project_stable(x);
        std::vector<double> stable_track;
        stable_track.reserve(static_cast<std::size_t>(steps) + 1);
        for (long k = 0; k <= steps; ++k) {
            const double t = cfg.dt() * k;
            const double v = std::exp(-split.beta * t) * y.norm();
            stable_track.push_back(v);
            if (v > loc.best) loc = {v, t, "stable"};
            if (k < steps) step.apply(y);
        }
        Eigen::VectorXd c = split.coords(x);
        std::vector<double> unstable_track;
        if (c.size() > 0) {
            for (long k = 0; k <= steps; ++k) {
                const double t = -cfg.dt() * k;
                const double v = std::exp(-split.alpha * t) * split.lift(c).norm();
                unstable_track.push_back(v);
                if (v > loc.best) loc = {v, t, "unstable"};
                c = back_one * c;
            }
        }
        auto runaway = [&](const std::vector<double>& track, const char* kind) {
            if (track.size() < 8) return;
            const double early = *std::max_element(track.begin(), track.begin() + static_cast<long>(track.size() / 2));
            if (track.back() > 10.0 && track.back() > 2.0 * early) {
                std::ostringstream os;
                os << "estimate_K: " << kind << " bound grows without limit for sample " << idx << " (weighted norm "
                   << track.back() << " at |t|=" << horizon << "); the gap does not separate the spectrum";
                throw DichotomyError(os.str());
            }
        };
        runaway(stable_track, "stable");
        runaway(unstable_track, "unstable");
        results[idx] = loc;
    });
    KEstimate est;
    est.safety = safety;
    est.sampled_max = 0.0;
    for (const auto& loc : results)
        if (loc.best > est.sampled_max) {
            est.sampled_max = loc.best;
            est.worst_time = loc.t;
            est.worst_kind = loc.kind;
        }
    est.K = safety * est.sampled_max;
    return est;
}

/// Assembles a split for explicit (beta, alpha, eta); roots above alpha form
/// the unstable set. K is left at 1 until estimate_K is run.
inline SpectralSplit make_split(const ModelConfig& cfg, double beta, double alpha, double eta, double re_min) {
    if (!(beta < eta && eta < alpha)) throw ConfigError("split: need beta < eta < alpha");
    if (!(re_min < beta)) throw ConfigError("split: root search must start below beta");
    SpectralSplit s;
    s.alpha = alpha;
    s.beta = beta;
    s.eta = eta;
    s.modes = cfg.modes;
    s.intervals = cfg.history_intervals;
    s.tau = cfg.tau;
    s.all_roots = spectrum(cfg, re_min);
    for (int n = 1; n <= cfg.modes; ++n) {
        std::vector<CharacteristicRoot> up;
        for (const auto& r : s.all_roots[static_cast<std::size_t>(n - 1)]) {
            const double re = r.lam.real();
            if (re > beta && re < alpha) {
                std::ostringstream os;
                os << "root " << r.lam << " of mode " << n << " lies inside the gap (" << beta << ", " << alpha << ")";
                throw DichotomyError(os.str());
            }
            if (re >= alpha) up.push_back(r);
        }
        if (up.empty()) continue;
        for (const auto& r : up) s.unstable_roots.push_back(r);
        s.blocks.push_back(mode_projection(n, up, cfg));
    }
    check_discrete_gap(s, cfg);
    return s;
}

struct SplitChoice {
    SpectralSplit split;
    GapSearch search;
    KEstimate K;
    GapReport conditions;
};

/// Default: widest verified gap with at least one root above it, shrunk by
/// `margin` on both sides, eta at the midpoint unless given.
inline SplitChoice choose_split(const Model& model, const SplitRequest& req = {}) {
    const ModelConfig& cfg = model.cfg();
    SplitChoice out;
    double beta = 0.0, alpha = 0.0;
    if (req.alpha && req.beta) {
        beta = *req.beta;
        alpha = *req.alpha;
        out.search = find_gap(cfg, std::min(req.re_lo, beta - 1.0), std::max(req.re_hi, alpha + 1.0));
    } else {
        out.search = find_gap(cfg, req.re_lo, req.re_hi);
        const GapCandidate* pick = nullptr;
        for (const auto& g : out.search.gaps)
            if (g.verified && g.roots_above > 0) {
                pick = &g;
                break;
            }
        if (pick == nullptr) throw DichotomyError("no admissible gap with an unstable root above it in the window");
        const double w = pick->width();
        beta = pick->lo + req.margin * w;
        alpha = pick->hi - req.margin * w;
    }
    const double eta = req.eta.value_or(0.5 * (alpha + beta));
    const double re_min = std::min(out.search.re_lo, beta - 0.5);
    out.split = make_split(cfg, beta, alpha, eta, re_min);
    const double horizon = req.K_horizon > 0.0 ? req.K_horizon : 5.0 * cfg.tau;
    out.K = estimate_K(out.split, model, horizon, req.K_samples, req.K_seed);
    out.split.K = out.K.K;
    out.conditions = gap_condition(out.split.K, cfg.birth.lipschitz(), alpha, beta, eta, req.order);
    return out;
}

}  // namespace mforge
