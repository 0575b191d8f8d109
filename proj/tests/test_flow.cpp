#include <catch2/catch_amalgamated.hpp>

#include "aacord/flow.hpp"
#include "helpers.hpp"

using namespace aacord;
using Catch::Matchers::WithinAbs;

namespace {

const std::vector<std::string> kVars1 = canonical_variables(1);
const std::vector<std::string> kVars2 = canonical_variables(2);

PhasePoint pt(std::initializer_list<double> vals) {
    PhasePoint z(static_cast<Eigen::Index>(vals.size()));
    Eigen::Index i = 0;
    for (double v : vals) z[i++] = v;
    return z;
}

} // namespace

TEST_CASE("flow map: harmonic rotation closes after 2 pi") {
    VectorFieldHandle v = hamiltonian_vector_field(parse("(p1^2+q1^2)/2"), kVars1);
    PhasePoint z0 = pt({1.0, 0.0});
    PhasePoint z = flow_map(v, 2.0 * M_PI, z0);
    CHECK_THAT((z - z0).norm(), WithinAbs(0.0, 1e-9));

    // quarter period: (cos t, -sin t) at t = pi/2 -> (0, -1)
    PhasePoint q = flow_map(v, M_PI / 2.0, z0);
    CHECK_THAT(q[0], WithinAbs(0.0, 1e-10));
    CHECK_THAT(q[1], WithinAbs(-1.0, 1e-10));
}

TEST_CASE("flow map: free particle drifts linearly") {
    VectorFieldHandle v = hamiltonian_vector_field(parse("p1^2/2"), kVars1);
    for (double t : {0.3, 1.0, 7.5, 40.0}) {
        PhasePoint z = flow_map(v, t, pt({0.0, 1.0}));
        CHECK_THAT(z[0], WithinAbs(t, 1e-9 * std::max(1.0, t)));
        CHECK_THAT(z[1], WithinAbs(1.0, 1e-11));
    }
}

TEST_CASE("flow map: zero parameter is the identity") {
    VectorFieldHandle v = hamiltonian_vector_field(parse("sin(q1)*p1 + q1^2"), kVars1);
    PhasePoint z0 = pt({0.4, -1.3});
    PhasePoint z = flow_map(v, 0.0, z0);
    REQUIRE((z - z0).norm() == 0.0);
}

TEST_CASE("flow map: multi-field combination equals sequential composition") {
    VectorFieldHandle v1 = hamiltonian_vector_field(parse("p1^2/2"), kVars2);
    VectorFieldHandle v2 = hamiltonian_vector_field(parse("p2^2/2"), kVars2);
    std::vector<VectorFieldHandle> fields{v1, v2};
    PhasePoint z0 = pt({0.2, -0.1, 0.7, 1.1});
    double s[2] = {1.4, -0.8};
    PhasePoint combined = flow_map(fields, std::span<const double>(s, 2), z0);
    PhasePoint sequential = flow_map(v2, s[1], flow_map(v1, s[0], z0));
    CHECK_THAT((combined - sequential).norm(), WithinAbs(0.0, 1e-10));
}

TEST_CASE("commutation residual: involutive pairs commute, conjugate pairs do not") {
    VectorFieldHandle v1 = hamiltonian_vector_field(parse("p1^2/2"), kVars2);
    VectorFieldHandle v2 = hamiltonian_vector_field(parse("p2^2/2"), kVars2);
    auto g = testutil::rng(41);
    for (int i = 0; i < 5; ++i) {
        auto z = testutil::random_point(g, 4);
        CHECK_THAT(commutation_residual(v1, v2, z, 1.0, 1.0), WithinAbs(0.0, 1e-9));
        CHECK_THAT(commutation_residual(v1, v1, z, 0.7, 1.3), WithinAbs(0.0, 1e-9));
    }

    // H = q1 shifts p, G = p1^2/2 drifts q: the compositions differ by
    // exactly (1, 0) at s = t = 1, so the residual is 1
    VectorFieldHandle shift = hamiltonian_vector_field(parse("q1"), kVars1);
    VectorFieldHandle drift = hamiltonian_vector_field(parse("p1^2/2"), kVars1);
    auto z = pt({0.3, 0.9});
    CHECK_THAT(commutation_residual(shift, drift, z, 1.0, 1.0), WithinAbs(1.0, 1e-9));
}

TEST_CASE("completeness probe: bounded and linear orbits pass, blow-up reports") {
    FlowConfig cfg;
    VectorFieldHandle osc = hamiltonian_vector_field(parse("(p1^2+q1^2)/2"), kVars1);
    ProbeReport r1 = completeness_probe(osc, pt({1.0, 0.0}), 1000.0, cfg);
    CHECK(r1.ok());

    VectorFieldHandle free_p = hamiltonian_vector_field(parse("p1^2/2"), kVars1);
    ProbeReport r2 = completeness_probe(free_p, pt({0.0, 1.0}), 1000.0, cfg);
    CHECK(r2.ok());   // linear growth stays below the escape radius

    // qdot = q^2 p^2 style growth blows up in finite time; the probe must
    // report escape or exhaustion rather than failing silently
    VectorFieldHandle blow = hamiltonian_vector_field(parse("q1^2*p1^2/2"), kVars1);
    ProbeReport r3 = completeness_probe(blow, pt({1.5, 1.5}), 1000.0, cfg);
    CHECK_FALSE(r3.ok());
    if (r3.outcome == ProbeReport::Outcome::Escape) {
        CHECK(r3.escape_norm > cfg.escape_radius);
        CHECK(std::abs(r3.escape_time) <= 1000.0);
    }
}

TEST_CASE("group law: Phi_s Phi_s' = Phi_{s+s'} for commuting catalog fields") {
    VectorFieldHandle v1 = hamiltonian_vector_field(parse("(p1^2+q1^2)/2"), kVars2);
    VectorFieldHandle v2 = hamiltonian_vector_field(parse("(p2^2+4*q2^2)/2"), kVars2);
    std::vector<VectorFieldHandle> fields{v1, v2};
    FlowConfig cfg;
    const double tol = 10.0 * std::max(cfg.rtol * 100.0, cfg.atol * 1e4);
    auto g = testutil::rng(47);
    for (int i = 0; i < 5; ++i) {
        PhasePoint z = testutil::random_point(g, 4, -1.0, 1.0);
        double a[2] = {testutil::uniform(g, -2, 2), testutil::uniform(g, -2, 2)};
        double b[2] = {testutil::uniform(g, -2, 2), testutil::uniform(g, -2, 2)};
        double ab[2] = {a[0] + b[0], a[1] + b[1]};
        PhasePoint two = flow_map(fields, std::span<const double>(b, 2),
                                  flow_map(fields, std::span<const double>(a, 2), z, cfg), cfg);
        PhasePoint one = flow_map(fields, std::span<const double>(ab, 2), z, cfg);
        CHECK_THAT((two - one).norm(), WithinAbs(0.0, tol));
    }
}

TEST_CASE("conservation: H along its own flow, all integrals along casimir flows") {
    // oscillator pair: both energies conserved along both flows
    Expr h1 = parse("(p1^2+q1^2)/2");
    Expr h2 = parse("(p2^2+4*q2^2)/2");
    VectorFieldHandle v1 = hamiltonian_vector_field(h1, kVars2);
    VectorFieldHandle v2 = hamiltonian_vector_field(h2, kVars2);
    PhasePoint z0 = pt({1.0, 0.5, 0.0, 0.0});
    double e1 = v1.generator_value(z0), e2 = v2.generator_value(z0);

    PhasePoint z = z0;
    for (int leg = 0; leg < 10; ++leg) {
        z = flow_map(v1, 10.0, z);
        z = flow_map(v2, 10.0, z);   // total T = 100 along each
        CHECK_THAT(v1.generator_value(z), WithinAbs(e1, 1e-8));
        CHECK_THAT(v2.generator_value(z), WithinAbs(e2, 1e-8));
    }
}

TEST_CASE("flow-derivative consistency: d/dt f(Phi_t z) at 0 equals {f,H}(z)") {
    auto vars = canonical_variables(2);
    Expr h = parse("(p1^2+q1^2)/2 + (p2^2+4*q2^2)/2");
    Expr f = parse("q1*p2 - q2*p1 + sin(q2)");
    VectorFieldHandle xh = hamiltonian_vector_field(h, vars);
    Expr fh = poisson_bracket(f, h, vars);
    auto g = testutil::rng(53);
    const double dt = 1e-5;
    for (int i = 0; i < 10; ++i) {
        auto z = testutil::random_point(g, 4);
        double fp = testutil::eval_at(f, vars, flow_map(xh, dt, z));
        double fm = testutil::eval_at(f, vars, flow_map(xh, -dt, z));
        double expected = testutil::eval_at(fh, vars, z);
        CHECK_THAT((fp - fm) / (2 * dt), WithinAbs(expected, 1e-6 * std::max(1.0, std::abs(expected))));
    }
}

TEST_CASE("flow errors: bad config rejected, domain errors surface") {
    VectorFieldHandle v = hamiltonian_vector_field(parse("p1^2/2"), kVars1);
    FlowConfig bad;
    bad.rtol = -1;
    CHECK_THROWS_AS(flow_map(v, 1.0, pt({0.0, 1.0}), bad), std::invalid_argument);
    CHECK_THROWS_AS(flow_map(v, std::numeric_limits<double>::infinity(), pt({0.0, 1.0})),
                    std::invalid_argument);

    // log(q1) turns undefined when the drift crosses q1 = 0 moving left
    VectorFieldHandle vlog = hamiltonian_vector_field(parse("p1^2/2 + log(q1)"), kVars1);
    CHECK_THROWS_AS(flow_map(vlog, 10.0, pt({0.5, -1.0})), FlowError);
}
