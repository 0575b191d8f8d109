#include <catch2/catch_amalgamated.hpp>

#include "aacord/lattice.hpp"
#include "helpers.hpp"

using namespace aacord;
using Catch::Matchers::WithinAbs;

namespace {

PhasePoint pt(std::initializer_list<double> vals) {
    PhasePoint z(static_cast<Eigen::Index>(vals.size()));
    Eigen::Index i = 0;
    for (double v : vals) z[i++] = v;
    return z;
}

const double kTwoPi = 2.0 * M_PI;

std::vector<VectorFieldHandle> oscillator_fields_2d() {
    auto vars = canonical_variables(2);
    return {hamiltonian_vector_field(parse("(p1^2+q1^2)/2"), vars),
            hamiltonian_vector_field(parse("(p2^2+4*q2^2)/2"), vars)};
}

} // namespace

TEST_CASE("period lattice: harmonic oscillator has rank 1 with period 2 pi") {
    auto vars = canonical_variables(1);
    std::vector<VectorFieldHandle> flows{
        hamiltonian_vector_field(parse("(p1^2+q1^2)/2"), vars)};
    SearchConfig cfg;   // default box half-width 50
    PeriodLattice lat = detect_period_lattice(flows, pt({1.0, 0.0}), cfg);
    REQUIRE(lat.rank == 1);
    CHECK_THAT(lat.basis(0, 0), WithinAbs(kTwoPi, 1e-9));
    CHECK(lat.residuals[0] < cfg.tol_return);
    CHECK(lat.minimality_guard);
    CHECK_FALSE(lat.low_confidence);
    CHECK(cylinder_signature(lat) == std::pair<int, int>{0, 1});
}

TEST_CASE("period lattice: free particle never returns") {
    auto vars = canonical_variables(1);
    std::vector<VectorFieldHandle> flows{hamiltonian_vector_field(parse("p1^2/2"), vars)};
    SearchConfig cfg;   // S = 50 per the acceptance setup
    PeriodLattice lat = detect_period_lattice(flows, pt({0.0, 1.0}), cfg);
    CHECK(lat.rank == 0);
    CHECK_FALSE(lat.low_confidence);
    CHECK(cylinder_signature(lat) == std::pair<int, int>{1, 0});
    CHECK(lat.search_bound == 50.0);
}

TEST_CASE("period lattice: 2d oscillator with frequencies (1,2)") {
    auto flows = oscillator_fields_2d();
    SearchConfig cfg;
    cfg.box_halfwidth = 8.0;   // covers both periods and their combinations
    PeriodLattice lat = detect_period_lattice(flows, pt({1.0, 0.5, 0.0, 0.3}), cfg);
    REQUIRE(lat.rank == 2);
    // reduced, sign-canonical, norm-ordered basis: {(0, pi), (2 pi, 0)}
    CHECK_THAT(lat.basis(0, 0), WithinAbs(0.0, 1e-8));
    CHECK_THAT(lat.basis(0, 1), WithinAbs(M_PI, 1e-8));
    CHECK_THAT(lat.basis(1, 0), WithinAbs(kTwoPi, 1e-8));
    CHECK_THAT(lat.basis(1, 1), WithinAbs(0.0, 1e-8));
    CHECK(cylinder_signature(lat) == std::pair<int, int>{0, 2});
    CHECK(lat.minimality_guard);
}

TEST_CASE("period lattice: pendulum libration period matches the elliptic integral") {
    auto vars = canonical_variables(1);
    std::vector<VectorFieldHandle> flows{
        hamiltonian_vector_field(parse("p1^2/2 - cos(q1)"), vars)};
    // E = -0.5 at (0, 1): modulus k with k^2 = (1+E)/2, period 4 K(k)
    const double k = std::sqrt(0.25);
    const double period = 4.0 * std::comp_ellint_1(k);
    SearchConfig cfg;
    cfg.box_halfwidth = 10.0;
    PeriodLattice lat = detect_period_lattice(flows, pt({0.0, 1.0}), cfg);
    REQUIRE(lat.rank == 1);
    CHECK_THAT(lat.basis(0, 0), WithinAbs(period, 1e-8));
}

TEST_CASE("period lattice: non-commuting flows are rejected") {
    auto vars = canonical_variables(1);
    std::vector<VectorFieldHandle> flows{hamiltonian_vector_field(parse("q1"), vars),
                                         hamiltonian_vector_field(parse("p1^2/2"), vars)};
    SearchConfig cfg;
    cfg.box_halfwidth = 2.0;
    CHECK_THROWS_AS(detect_period_lattice(flows, pt({0.3, 0.9}), cfg), std::invalid_argument);
}

TEST_CASE("integer closure: small combinations of generators return to the anchor") {
    auto flows = oscillator_fields_2d();
    SearchConfig cfg;
    cfg.box_halfwidth = 8.0;
    PhasePoint z = pt({1.0, 0.5, 0.0, 0.3});
    PeriodLattice lat = detect_period_lattice(flows, z, cfg);
    REQUIRE(lat.rank == 2);
    FlowConfig tight;
    tight.rtol = 1e-12;
    tight.atol = 1e-14;
    for (int a = -3; a <= 3; ++a)
        for (int b = -3; b <= 3; ++b) {
            Vec s = a * lat.basis.row(0).transpose() + b * lat.basis.row(1).transpose();
            PhasePoint back = flow_map(flows, std::span<const double>(s.data(), 2), z, tight);
            CHECK((back - z).norm() < 10.0 * cfg.tol_return * (std::abs(a) + std::abs(b) + 1));
        }
}

TEST_CASE("fiber-wide isotropy: the same generators close on other fiber points") {
    auto flows = oscillator_fields_2d();
    SearchConfig cfg;
    cfg.box_halfwidth = 8.0;
    PhasePoint z = pt({1.0, 0.5, 0.0, 0.3});
    PeriodLattice lat = detect_period_lattice(flows, z, cfg);
    REQUIRE(lat.rank == 2);
    FlowConfig tight;
    tight.rtol = 1e-12;
    tight.atol = 1e-14;
    auto g = testutil::rng(61);
    for (int trial = 0; trial < 5; ++trial) {
        double s[2] = {testutil::uniform(g, -2, 2), testutil::uniform(g, -2, 2)};
        PhasePoint z2 = flow_map(flows, std::span<const double>(s, 2), z, tight);
        for (int i = 0; i < lat.rank; ++i) {
            Vec u = lat.basis.row(i);
            PhasePoint back = flow_map(flows, std::span<const double>(u.data(), 2), z2, tight);
            CHECK((back - z2).norm() < 10.0 * cfg.tol_return);
        }
    }
}

TEST_CASE("lattice stability across the base: continuation tracks the fiber family") {
    auto vars = canonical_variables(1);
    std::vector<VectorFieldHandle> flows{
        hamiltonian_vector_field(parse("p1^2/2 - cos(q1)"), vars)};
    SearchConfig cfg;
    cfg.box_halfwidth = 10.0;
    PeriodLattice lat = detect_period_lattice(flows, pt({0.0, 1.0}), cfg);
    REQUIRE(lat.rank == 1);

    // walk the energy family E = p^2/2 - 1 upward in small steps
    PeriodLattice current = lat;
    double prev_period = current.basis(0, 0);
    for (double p = 1.02; p <= 1.2 + 1e-9; p += 0.02) {
        auto next = continue_lattice(flows, pt({0.0, p}), current, cfg);
        REQUIRE(next.has_value());
        REQUIRE(next->rank == 1);
        double period = next->basis(0, 0);
        CHECK(std::abs(period - prev_period) / prev_period < 0.1);
        // the true period 4 K(k) with k^2 = p^2/4
        double expected = 4.0 * std::comp_ellint_1(p / 2.0);
        CHECK_THAT(period, WithinAbs(expected, 1e-8));
        prev_period = period;
        current = *next;
    }
}

TEST_CASE("adapt_basis: forced normalizations") {
    // m = 1: T = [1/(2 pi)]
    PeriodLattice l1;
    l1.m = 1;
    l1.rank = 1;
    l1.basis = Mat(1, 1);
    l1.basis << kTwoPi;
    Mat t1 = adapt_basis(l1);
    CHECK_THAT(t1(0, 0), WithinAbs(1.0 / kTwoPi, 1e-14));

    // m = 2 diagonal: T = diag(1/(2 pi), 1/pi)
    PeriodLattice l2;
    l2.m = 2;
    l2.rank = 2;
    l2.basis = Mat(2, 2);
    l2.basis << kTwoPi, 0.0, 0.0, M_PI;
    Mat t2 = adapt_basis(l2);
    Vec u1(2), u2(2);
    u1 << kTwoPi, 0.0;
    u2 << 0.0, M_PI;
    Vec e1 = t2 * u1, e2 = t2 * u2;
    CHECK_THAT(e1[0], WithinAbs(1.0, 1e-12));
    CHECK_THAT(e1[1], WithinAbs(0.0, 1e-12));
    CHECK_THAT(e2[0], WithinAbs(0.0, 1e-12));
    CHECK_THAT(e2[1], WithinAbs(1.0, 1e-12));

    // m = 2, r = 1, skew generator (2 pi, 2 pi): lattice direction lands on
    // e2, the orthogonal complement (1,-1)/sqrt(2) lands on e1
    PeriodLattice l3;
    l3.m = 2;
    l3.rank = 1;
    l3.basis = Mat(1, 2);
    l3.basis << kTwoPi, kTwoPi;
    Mat t3 = adapt_basis(l3);
    Vec u(2), w(2);
    u << kTwoPi, kTwoPi;
    w << 1.0 / std::sqrt(2.0), -1.0 / std::sqrt(2.0);
    Vec tu = t3 * u, tw = t3 * w;
    CHECK_THAT(tu[0], WithinAbs(0.0, 1e-12));
    CHECK_THAT(tu[1], WithinAbs(1.0, 1e-12));
    CHECK_THAT(tw[0], WithinAbs(1.0, 1e-12));
    CHECK_THAT(std::abs(tw[1]), WithinAbs(0.0, 1e-12));

    // rank 0 is refused
    PeriodLattice l0;
    l0.m = 1;
    l0.rank = 0;
    CHECK_THROWS_AS(adapt_basis(l0), std::invalid_argument);
}

TEST_CASE("basis reduction: dependent and redundant generators collapse") {
    // {(2 pi, 0), (2 pi, pi), (0, pi)} reduces to the primitive pair
    Mat raw(3, 2);
    raw << kTwoPi, 0.0, kTwoPi, M_PI, 0.0, M_PI;
    Mat red = detail::canonicalize_basis(detail::gauss_reduce(raw));
    REQUIRE(red.rows() == 2);
    CHECK_THAT(red(0, 0), WithinAbs(0.0, 1e-12));
    CHECK_THAT(red(0, 1), WithinAbs(M_PI, 1e-12));
    CHECK_THAT(red(1, 0), WithinAbs(kTwoPi, 1e-12));
    CHECK_THAT(red(1, 1), WithinAbs(0.0, 1e-12));

    // integer-combination recognition
    Mat basis(2, 2);
    basis << kTwoPi, 0.0, 0.0, M_PI;
    Vec comb(2);
    comb << 2 * kTwoPi, -3 * M_PI;
    CHECK(detail::is_integer_combination(basis, comb, 1e-6));
    comb << kTwoPi, 0.5 * M_PI;
    CHECK_FALSE(detail::is_integer_combination(basis, comb, 1e-6));
}
