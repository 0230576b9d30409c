#include <gtest/gtest.h>

#include <manifold_forge/dichotomy.hpp>
#include <manifold_forge/flow.hpp>

#include <cmath>
#include <numbers>
#include <random>

using namespace mforge;

namespace {

ModelConfig desk() {
    ModelConfig c;
    c.g = {Eigen::VectorXd::Zero(8)};
    return c;
}

// Independent oracle: roots of lambda + c + delta e^{-lambda tau} = 0 from the
// Lambert W function, w e^w = -delta tau e^{c tau}, lambda = w / tau - c.
// W_k is found by Newton from the standard asymptotic branch guess.
cplx lambert_w(cplx a, int k) {
    const cplx L1 = std::log(a) + cplx(0.0, 2.0 * std::numbers::pi * k);
    cplx w = L1 - std::log(L1);
    for (int it = 0; it < 200; ++it) {
        const cplx f = w * std::exp(w) - a;
        const cplx df = std::exp(w) * (1.0 + w);
        const cplx step = f / df;
        w -= step;
        if (std::abs(step) < 1e-15 * (1.0 + std::abs(w))) break;
    }
    return w;
}

std::vector<cplx> lambert_roots(int n, const ModelConfig& cfg, double re_min) {
    const double c = static_cast<double>(n) * n + cfg.mu;
    const cplx a(-cfg.delta * cfg.tau * std::exp(c * cfg.tau), 0.0);
    std::vector<cplx> out;
    for (int k = -40; k <= 40; ++k) {
        const cplx lam = lambert_w(a, k) / cfg.tau - c;
        if (lam.real() < re_min) continue;
        bool dup = false;
        for (const auto& z : out) dup = dup || std::abs(z - lam) < 1e-8;
        if (!dup && std::abs(characteristic(lam, n, cfg)) < 1e-9) out.push_back(lam);
    }
    return out;
}

// Weighted H-norm matrix square root on one mode's local vector (r+1 nodes, head).
Eigen::VectorXd sqrt_weights(const ModelConfig& cfg) {
    const int r = cfg.history_intervals;
    Eigen::VectorXd w(r + 2);
    for (int i = 0; i <= r; ++i) w(i) = std::sqrt((i == 0 || i == r ? 0.5 : 1.0) * cfg.dt());
    w(r + 1) = 1.0;
    return w;
}

ProductState embed(const ModelConfig& cfg, int n, const Eigen::VectorXd& local) {
    ProductState x = ProductState::zero(cfg);
    x.segment.values.col(n - 1) = local.head(cfg.nodes());
    x.head(n - 1) = local(cfg.nodes());
    return x;
}

Eigen::VectorXd extract(const ProductState& x, int n) {
    Eigen::VectorXd y(x.segment.values.rows() + 1);
    y.head(x.segment.values.rows()) = x.segment.values.col(n - 1);
    y(y.size() - 1) = x.head(n - 1);
    return y;
}

}  // namespace

TEST(Characteristic, DerivativeMatchesFiniteDifference) {
    const ModelConfig c = desk();
    const cplx z(-1.3, 2.1), h(1e-6, 0.0);
    const cplx fd = (characteristic(z + h, 2, c) - characteristic(z - h, 2, c)) / (2.0 * h);
    EXPECT_LT(std::abs(fd - characteristic_derivative(z, 2, c)), 1e-7);
}

TEST(Spectrum, DeltaZeroGivesExactRealRoot) {
    ModelConfig c = desk();
    c.delta = 0.0;
    for (int n = 1; n <= 4; ++n) {
        const auto roots = characteristic_roots(n, c, -30.0);
        ASSERT_EQ(roots.size(), 1u) << "mode " << n;
        EXPECT_NEAR(roots[0].lam.real(), -static_cast<double>(n) * n - c.mu, 1e-12);
        EXPECT_EQ(roots[0].lam.imag(), 0.0);
    }
}

TEST(Spectrum, MatchesLambertWOracle) {
    const ModelConfig c = desk();
    for (int n : {1, 2, 3}) {
        const double re_min = -5.0;
        const auto roots = characteristic_roots(n, c, re_min);
        const auto oracle = lambert_roots(n, c, re_min);
        ASSERT_EQ(roots.size(), oracle.size()) << "mode " << n;
        for (const auto& o : oracle) {
            double best = 1e300;
            for (const auto& r : roots) best = std::min(best, std::abs(r.lam - o));
            EXPECT_LT(best, 1e-10) << "mode " << n << " oracle root " << o;
        }
        for (const auto& r : roots) EXPECT_LE(r.residual, 1e-12);
    }
}

TEST(Spectrum, DeskLeadingRoots) {
    const ModelConfig c = desk();
    const auto r1 = characteristic_roots(1, c, -3.0);
    ASSERT_FALSE(r1.empty());
    double lead = -1e300;
    for (const auto& r : r1) lead = std::max(lead, r.lam.real());
    EXPECT_NEAR(lead, -1.3799, 1e-3);
}

TEST(Winding, CountsRootsInsideRectangles) {
    const ModelConfig c = desk();
    EXPECT_EQ(winding_number(Rect{-1.6, -1.0, 1.5, 2.5}, 1, c), 1);
    EXPECT_EQ(winding_number(Rect{-1.6, -1.0, -2.5, 2.5}, 1, c), 2);
    EXPECT_EQ(winding_number(Rect{-1.0, 1.0, -5.0, 5.0}, 1, c), 0);
    // contour through a root is rejected
    const auto roots = characteristic_roots(1, c, -2.0);
    const cplx z = roots.front().lam;
    EXPECT_THROW(winding_number(Rect{z.real(), z.real() + 1.0, z.imag() - 1.0, z.imag() + 1.0}, 1, c), ContourError);
}

TEST(Gap, DeskWidestGap) {
    const ModelConfig c = desk();
    const GapSearch s = find_gap(c, -4.0, 1.0);
    ASSERT_TRUE(s.admissible());
    bool found = false;
    for (const auto& g : s.gaps)
        if (std::abs(g.lo + 2.7434) < 1e-3 && std::abs(g.hi + 2.0394) < 1e-3) {
            found = true;
            EXPECT_TRUE(g.verified);
            EXPECT_GT(g.roots_above, 0);
        }
    EXPECT_TRUE(found);
}

TEST(GapCondition, FormulaAndApplicability) {
    const GapReport g = gap_condition(2.0, 0.1, -1.0, -5.0, -2.0, 2);
    ASSERT_EQ(g.orders.size(), 2u);
    EXPECT_NEAR(g.orders[0].value, 2.0 * 0.1 * (1.0 / 3.0 + 1.0 / 1.0), 1e-15);
    EXPECT_TRUE(g.holds(1));
    // 2 eta = -4 lies in (-5, -1)
    EXPECT_NEAR(g.orders[1].value, 2.0 * 0.1 * (1.0 / 1.0 + 1.0 / 3.0), 1e-15);
    const GapReport h = gap_condition(2.0, 0.1, -1.0, -3.0, -2.0, 2);
    EXPECT_FALSE(h.orders[1].applicable);
    EXPECT_FALSE(h.holds(2));
    const double Lc = critical_lipschitz(2.0, -1.0, -5.0, -2.0);
    EXPECT_NEAR(gap_condition(2.0, Lc, -1.0, -5.0, -2.0, 1).rho(), 1.0, 1e-14);
    EXPECT_THROW(gap_condition(1.0, 0.1, -1.0, -3.0, -0.5, 1), ConfigError);
}

TEST(DiscreteExponent, ConvergesToContinuousRootAtFirstOrder) {
    ModelConfig c = desk();
    const cplx lam = characteristic_roots(1, c, -1.5).front().lam;
    std::vector<double> err;
    for (int r : {50, 100, 200}) {
        c.history_intervals = r;
        err.push_back(std::abs(discrete_exponent(lam, 1, c) - lam));
    }
    EXPECT_NEAR(err[0] / err[1], 2.0, 0.2);
    EXPECT_NEAR(err[1] / err[2], 2.0, 0.2);
}

TEST(ModeProjection, BiorthogonalAndInvariant) {
    const ModelConfig c = desk();
    const auto roots = characteristic_roots(1, c, -1.5);
    const ModeProjection p = mode_projection(1, roots, c);
    ASSERT_EQ(p.rank(), 2);
    EXPECT_LT((p.coords * p.basis - Eigen::MatrixXd::Identity(2, 2)).norm(), 1e-12);
    const Eigen::MatrixXd P = p.matrix();
    EXPECT_LT((P * P - P).norm(), 1e-10);
    // one step of the discrete flow acts on the range as exp(dt G)
    StepMap step(c);
    for (int k = 0; k < 2; ++k) {
        ProductState x = embed(c, 1, p.basis.col(k));
        step.apply(x);
        const Eigen::VectorXd expect = p.basis * (c.dt() * p.generator).exp().col(k);
        EXPECT_LT((extract(x, 1) - expect).norm(), 1e-12);
    }
}

TEST(ModeProjection, AgreesWithContinuousBilinearFormToFirstOrder) {
    // continuous coefficient (h - delta int e^{-lambda(s+tau)} phi(s) ds) / chi'(lambda), trapezoid in s
    auto gap = [](int r) {
        ModelConfig c = desk();
        c.history_intervals = r;
        const auto roots = characteristic_roots(1, c, -1.5);
        const cplx lam = roots.front().lam.imag() > 0 ? roots.front().lam : std::conj(roots.front().lam);
        const ModeProjection p = mode_projection(1, roots, c);
        Eigen::VectorXd x(r + 2);
        for (int i = 0; i <= r; ++i) x(i) = std::cos(2.0 * c.xi(i)) + 0.3 * c.xi(i);
        x(r + 1) = x(r);
        cplx integral = 0.0;
        for (int i = 0; i <= r; ++i) {
            const double w = (i == 0 || i == r) ? 0.5 * c.dt() : c.dt();
            integral += w * std::exp(-lam * (c.xi(i) + c.tau)) * x(i);
        }
        const cplx coef = (x(r + 1) - c.delta * integral) / (1.0 - c.delta * c.tau * std::exp(-lam * c.tau));
        Eigen::VectorXd cont(r + 2);
        for (int i = 0; i <= r; ++i) cont(i) = 2.0 * std::real(coef * std::exp(lam * c.xi(i)));
        cont(r + 1) = 2.0 * std::real(coef);
        return (p.matrix() * x - cont).norm() / std::sqrt(static_cast<double>(r));
    };
    const double g1 = gap(100), g2 = gap(200);
    EXPECT_LT(g1, 0.05);
    EXPECT_NEAR(g1 / g2, 2.0, 0.4);
}

class DeskSplit : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        cfg_ = new ModelConfig(desk());
        model_ = new Model(*cfg_);
        choice_ = new SplitChoice(choose_split(*model_));
    }
    static void TearDownTestSuite() {
        delete choice_;
        delete model_;
        delete cfg_;
    }
    static ModelConfig* cfg_;
    static Model* model_;
    static SplitChoice* choice_;
};
ModelConfig* DeskSplit::cfg_ = nullptr;
Model* DeskSplit::model_ = nullptr;
SplitChoice* DeskSplit::choice_ = nullptr;

TEST_F(DeskSplit, DefaultSplitShrinksWidestGap) {
    const SpectralSplit& s = choice_->split;
    EXPECT_NEAR(s.beta, -2.7434 + 0.1 * 0.704, 2e-3);
    EXPECT_NEAR(s.alpha, -2.0394 - 0.1 * 0.704, 2e-3);
    EXPECT_NEAR(s.eta, 0.5 * (s.alpha + s.beta), 1e-12);
    EXPECT_EQ(s.unstable_dim(), 4);
    EXPECT_NO_THROW(check_discrete_gap(s, *cfg_));
    EXPECT_TRUE(choice_->conditions.holds(1));
    EXPECT_FALSE(choice_->conditions.orders.at(1).applicable);
}

TEST_F(DeskSplit, ProjectionsAreComplementary) {
    const SpectralSplit& s = choice_->split;
    std::mt19937_64 rng(1);
    const ProductState x = detail::random_unit_state(*cfg_, rng);
    EXPECT_LT((s.project_unstable(x) + s.project_stable(x) - x).norm(), 1e-12);
    EXPECT_LT(s.project_unstable(s.project_stable(x)).norm(), 1e-10);
    EXPECT_LT((s.coords(s.lift(s.coords(x))) - s.coords(x)).norm(), 1e-10);
    SpectralField h = SpectralField::Random(cfg_->modes);
    ProductState head_only = ProductState::zero(*cfg_);
    head_only.head = h;
    EXPECT_LT((s.head_coords(h) - s.coords(head_only)).norm(), 1e-13);
}

TEST_F(DeskSplit, UnstablePropagatorIsAGroup) {
    const SpectralSplit& s = choice_->split;
    const Eigen::MatrixXd a = s.unstable_propagator(0.7) * s.unstable_propagator(-0.7);
    EXPECT_LT((a - Eigen::MatrixXd::Identity(4, 4)).norm(), 1e-12);
    EXPECT_LT((s.unstable_propagator(0.3) * s.unstable_propagator(0.4) - s.unstable_propagator(0.7)).norm(), 1e-12);
}

TEST_F(DeskSplit, CommutesWithDiscreteSemigroup) {
    const SpectralSplit& s = choice_->split;
    std::mt19937_64 rng(2);
    for (int i = 0; i < 3; ++i) {
        const ProductState x = detail::random_unit_state(*cfg_, rng);
        const ProductState a = s.project_unstable(linear_semigroup(1.0, x, *cfg_));
        const ProductState b = linear_semigroup(1.0, s.project_unstable(x), *cfg_);
        EXPECT_LT((a - b).norm(), 1e-9);
    }
}

TEST_F(DeskSplit, KBoundsExactPerModeOperatorNorms) {
    // oracle: assemble S~(t)(I - P) per mode column by column and take the
    // largest singular value in the weighted norm
    const SpectralSplit& s = choice_->split;
    const ModelConfig& c = *cfg_;
    const Eigen::VectorXd sw = sqrt_weights(c);
    const int dim = c.nodes() + 1;
    const std::vector<double> times{0.25, 0.5, 1.0, 2.0, 5.0};
    double worst_stable = 0.0, worst_unstable = 0.0;
    for (int n = 1; n <= c.modes; ++n) {
        const Eigen::MatrixXd P = s.mode_matrix(n);
        const Eigen::MatrixXd Q = Eigen::MatrixXd::Identity(dim, dim) - P;
        std::vector<Eigen::MatrixXd> M(times.size(), Eigen::MatrixXd(dim, dim));
        StepMap step(c);
        for (int k = 0; k < dim; ++k) {
            ProductState x = embed(c, n, Q.col(k));
            long done = 0;
            for (std::size_t m = 0; m < times.size(); ++m) {
                const long target = std::lround(times[m] / c.dt());
                for (; done < target; ++done) step.apply(x);
                M[m].col(k) = extract(x, n);
            }
        }
        for (std::size_t m = 0; m < times.size(); ++m) {
            const Eigen::MatrixXd W = sw.asDiagonal() * M[m] * sw.cwiseInverse().asDiagonal();
            const double norm = Eigen::JacobiSVD<Eigen::MatrixXd>(W).singularValues()(0);
            worst_stable = std::max(worst_stable, std::exp(-s.beta * times[m]) * norm);
        }
        if (P.isZero(0.0)) continue;
        for (double t : times) {
            Eigen::MatrixXd B(dim, dim);
            for (int k = 0; k < dim; ++k) B.col(k) = extract(s.unstable_flow(-t, embed(c, n, Eigen::VectorXd::Unit(dim, k))), n);
            const Eigen::MatrixXd W = sw.asDiagonal() * B * sw.cwiseInverse().asDiagonal();
            const double norm = Eigen::JacobiSVD<Eigen::MatrixXd>(W).singularValues()(0);
            worst_unstable = std::max(worst_unstable, std::exp(s.alpha * t) * norm);
        }
    }
    EXPECT_LE(worst_stable, 1.05 * s.K);
    EXPECT_LE(worst_unstable, 1.05 * s.K);
    // the estimate is not wildly conservative either
    EXPECT_GE(s.K, std::max(worst_stable, worst_unstable) / 1.05 / 4.0);
}

TEST(EstimateK, DeltaZeroExceedsOneFromHistoryShift) {
    // with delta = 0 the head's mass lingers in the segment for tau, so K > 1
    ModelConfig c = desk();
    c.delta = 0.0;
    c.modes = 2;
    c.g = {Eigen::VectorXd::Zero(2)};
    const Model m(c);
    SplitRequest req;
    req.beta = -4.8;
    req.alpha = -2.1;
    const SplitChoice ch = choose_split(m, req);
    EXPECT_GT(ch.split.K, 2.0);
}

TEST(MakeSplit, RejectsBadOrdering) {
    const ModelConfig c = desk();
    EXPECT_THROW(make_split(c, -1.0, -2.0, -1.5, -4.0), ConfigError);
    EXPECT_THROW(make_split(c, -2.5, -2.0, -2.2, -2.0), ConfigError);
}
