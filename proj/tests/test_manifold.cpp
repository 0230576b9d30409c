#include <gtest/gtest.h>

#include <manifold_forge/manifold.hpp>
#include <manifold_forge/verify.hpp>

#include <cmath>

using namespace mforge;

namespace {

// Reduced desk model: fewer modes keep the Lyapunov-Perron solves quick.
ModelConfig base_config() {
    ModelConfig c;
    c.modes = 4;
    c.history_intervals = 50;
    c.g = {Eigen::VectorXd::Unit(4, 0) * 0.02, Eigen::VectorXd::Unit(4, 1) * 0.02};
    return c;
}

struct Case {
    ModelConfig cfg;
    Model model;
    SplitChoice choice;
    explicit Case(ModelConfig c) : cfg(c), model(c), choice(choose_split(model)) {}
    const SpectralSplit& split() const { return choice.split; }
};

const Case& noisy() {
    static const Case s(base_config());
    return s;
}

const Case& linear_quiet() {
    static const Case s([] {
        ModelConfig c = base_config();
        for (auto& g : c.g) g.setZero();
        c.birth = BirthFunction::zero();
        return c;
    }());
    return s;
}

const Case& nonlinear_quiet() {
    static const Case s([] {
        ModelConfig c = base_config();
        for (auto& g : c.g) g.setZero();
        return c;
    }());
    return s;
}

Fiber fiber_for(const Case& s, double past, double future) { return sample_fiber(s.cfg, 1, past, future); }

}  // namespace

TEST(LPGrid, HorizonRules) {
    const Case& s = linear_quiet();
    const LPGrid g = LPGrid::make(s.split(), s.cfg, true);
    EXPECT_GE(g.T_trunc, LPGrid::default_horizon(s.split()) - 1e-12);
    EXPECT_LT(g.T_trunc, LPGrid::default_horizon(s.split()) + s.cfg.dt());
    EXPECT_DOUBLE_EQ(g.time(0), 0.0);
    const LPGrid u = LPGrid::make(s.split(), s.cfg, false);
    EXPECT_NEAR(u.time(0), -u.T_trunc, 1e-12);
    EXPECT_NEAR(u.time(u.steps), 0.0, 1e-12);
    EXPECT_NEAR(u.weight(u.steps), 1.0, 1e-12);
    EXPECT_THROW(LPGrid::make(s.split(), s.cfg, true, 1.0), ConfigError);
}

TEST(PredictedIterations, MatchesClosedForm) {
    EXPECT_EQ(predicted_iterations(0.5, 1e-8, 1e-9), 1);
    const int n = predicted_iterations(0.5, 1e-8, 1.0);
    EXPECT_EQ(n, 1 + static_cast<int>(std::ceil(std::log(1e-8 * 0.5) / std::log(0.5))));
    EXPECT_EQ(predicted_iterations(1.2, 1e-8, 1.0), std::numeric_limits<int>::max());
}

TEST(CoordinateBasis, VectorsLieInTheRightRanges) {
    const Case& s = noisy();
    for (bool stable : {true, false}) {
        const auto b = coordinate_basis(s.split(), s.cfg, stable, 2);
        ASSERT_EQ(b.size(), 2u);
        for (const auto& v : b) {
            EXPECT_NEAR(v.norm(), 1.0, 1e-12);
            const ProductState other = stable ? s.split().project_unstable(v) : s.split().project_stable(v);
            EXPECT_LT(other.norm(), 1e-10);
        }
    }
}

TEST(Graph, LinearModelWithoutNoiseHasZeroGraphs) {
    const Case& s = linear_quiet();
    for (bool stable : {true, false}) {
        const LPGrid g = LPGrid::make(s.split(), s.cfg, stable);
        const auto b = coordinate_basis(s.split(), s.cfg, stable, 2);
        const GraphSample gs = solve_graph(0.7 * b[0] - 0.4 * b[1], nullptr, s.split(), s.model, g);
        EXPECT_TRUE(gs.converged);
        EXPECT_LT(gs.value.norm(), 1e-12);
        EXPECT_LT((manifold_point(gs).segment - gs.zeta).norm(), 1e-12);
    }
}

TEST(Graph, AdditiveNoiseWithLinearBirthGivesConstantUnstableGraph) {
    // f = 0: the graph is affine in zeta with zero linear part, so h(zeta) = h(0)
    ModelConfig c = base_config();
    c.birth = BirthFunction::zero();
    const Case s(c);
    const LPGrid g = LPGrid::make(s.split(), s.cfg, false);
    const Fiber f = fiber_for(s, g.T_trunc + 1.0, 1.0);
    const auto b = coordinate_basis(s.split(), s.cfg, false, 2);
    const GraphSample h0 = solve_graph(ProductState::zero(c), &f.noise, s.split(), s.model, g);
    const GraphSample h1 = solve_graph(0.5 * b[0] + 0.2 * b[1], &f.noise, s.split(), s.model, g);
    EXPECT_GT(h0.value.norm(), 1e-4);
    EXPECT_LT((h0.value - h1.value).norm(), 1e-10);
}

TEST(Graph, RejectsZetaOutsideTheRange) {
    const Case& s = nonlinear_quiet();
    const LPGrid g = LPGrid::make(s.split(), s.cfg, true);
    const auto bu = coordinate_basis(s.split(), s.cfg, false, 1);
    EXPECT_THROW(solve_graph(bu[0], nullptr, s.split(), s.model, g), ProjectionError);
    EXPECT_THROW(solve_graph_unstable(bu[0], nullptr, s.split(), s.model, g), ConfigError);
}

TEST(Graph, RejectsNoiseWindowTooShort) {
    const Case& s = noisy();
    const LPGrid g = LPGrid::make(s.split(), s.cfg, false);
    const Fiber f = fiber_for(s, 2.0, 1.0);
    EXPECT_THROW(solve_graph(ProductState::zero(s.cfg), &f.noise, s.split(), s.model, g), WindowError);
}

TEST(Graph, ContractionWithinGapBound) {
    const Case& s = noisy();
    const LPGrid g = LPGrid::make(s.split(), s.cfg, false);
    const Fiber f = fiber_for(s, g.T_trunc + 1.0, 1.0);
    const auto b = coordinate_basis(s.split(), s.cfg, false, 2);
    const GraphSample gs = solve_graph(0.5 * b[0], &f.noise, s.split(), s.model, g);
    EXPECT_TRUE(gs.converged);
    EXPECT_LT(gs.rho_bound, 1.0);
    EXPECT_LE(gs.observed_contraction, gs.rho_bound + 0.1);
    EXPECT_LE(gs.iterations, gs.predicted_iterations);
    EXPECT_FALSE(gs.contraction_flag);
}

TEST(Graph, DivergesWhenGapConditionFailsBadly) {
    ModelConfig c = base_config();
    for (auto& g : c.g) g.setZero();
    c.birth = BirthFunction::linear(3.0);
    const Case s(c);
    const LPGrid g = LPGrid::make(s.split(), s.cfg, true);
    const auto b = coordinate_basis(s.split(), s.cfg, true, 1);
    EXPECT_THROW(solve_graph(b[0], nullptr, s.split(), s.model, g), DivergenceError);
}

TEST(Invariance, DeterministicGraphsAreInvariant) {
    const Case& s = nonlinear_quiet();
    for (bool stable : {true, false}) {
        const double extra = stable ? 2.0 * s.cfg.tau : 0.0;
        const LPGrid g = LPGrid::make(s.split(), s.cfg, stable, LPGrid::default_horizon(s.split()) + extra);
        const auto b = coordinate_basis(s.split(), s.cfg, stable, 2);
        const GraphSample gs = solve_graph(0.5 * b[0] + 0.5 * b[1], nullptr, s.split(), s.model, g);
        for (double t : {0.5, 1.0}) {
            const InvarianceCheck chk = invariance_defect(gs, nullptr, 1.0, s.split(), s.model, g, t);
            EXPECT_LT(chk.defect, 1e-4) << (stable ? "stable" : "unstable") << " t=" << t;
        }
    }
}

TEST(Invariance, UnstableGraphUnderNoise) {
    const Case& s = noisy();
    const LPGrid g = LPGrid::make(s.split(), s.cfg, false);
    const Fiber f = fiber_for(s, g.T_trunc + 2.0, 3.0);
    const auto b = coordinate_basis(s.split(), s.cfg, false, 2);
    const GraphSample gs = solve_graph(0.3 * b[0] - 0.2 * b[1], &f.noise, s.split(), s.model, g);
    const InvarianceCheck chk = invariance_defect(gs, &f.path, f.noise.tail_cutoff(), s.split(), s.model, g, 1.0);
    EXPECT_LT(chk.defect, 1e-3 * (1.0 + gs.zeta.norm()));
}

TEST(Atlas, GridOfCoordinates) {
    const Case& s = nonlinear_quiet();
    const LPGrid g = LPGrid::make(s.split(), s.cfg, false);
    const auto b = coordinate_basis(s.split(), s.cfg, false, 2);
    const auto atlas = build_atlas(b, 3, 0.5, nullptr, s.split(), s.model, g);
    ASSERT_EQ(atlas.size(), 9u);
    EXPECT_DOUBLE_EQ(atlas[0].coords(0), -0.5);
    EXPECT_DOUBLE_EQ(atlas[4].coords(0), 0.0);
    EXPECT_DOUBLE_EQ(atlas[8].coords(1), 0.5);
    // zeta = 0 without noise gives the zero graph value
    EXPECT_EQ(atlas[4].sample.value.norm(), 0.0);
    EXPECT_THROW(build_atlas({}, 3, 0.5, nullptr, s.split(), s.model, g), ConfigError);
}

TEST(ShiftedManifold, AddsTheOrnsteinUhlenbeckField) {
    const Case& s = noisy();
    const LPGrid g = LPGrid::make(s.split(), s.cfg, false);
    const Fiber f = fiber_for(s, g.T_trunc + 1.0, 1.0);
    const GraphSample gs = solve_graph(ProductState::zero(s.cfg), &f.noise, s.split(), s.model, g);
    const HistorySegment shifted = shifted_manifold_point(gs, &f.noise, s.model);
    const SpectralField z0 = s.model.z_at(&f.noise, 0.0);
    EXPECT_LT((shifted.present() - manifold_point(gs).head - z0).norm(), 1e-14);
}

TEST(DerivativeProbe, SecondOrderOnACubic) {
    // h(z) = (first coefficient)^3 along the direction e: D h = 3 a^2, FD error e^2 exactly
    const ModelConfig c = base_config();
    ProductState base = ProductState::zero(c), dir = ProductState::zero(c);
    base.head(0) = 0.5;
    dir.head(0) = 1.0;
    auto solver = [&](const ProductState& z) {
        HistorySegment out = HistorySegment::zero(c);
        out.values(0, 0) = std::pow(z.head(0), 3);
        return out;
    };
    const ProbeResult pr = derivative_probe(base, dir, solver, {0.4, 0.2, 0.1, 0.05});
    EXPECT_NEAR(pr.observed_order, 2.0, 0.05);
    EXPECT_NEAR(pr.richardson.values(0, 0), 3.0 * 0.25, 1e-12);
    EXPECT_THROW(derivative_probe(base, dir, solver, {0.1}), ConfigError);
}
