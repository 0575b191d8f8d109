#include <catch2/catch_amalgamated.hpp>

#include "aacord/structure.hpp"
#include "helpers.hpp"

using namespace aacord;
using Catch::Matchers::WithinAbs;



using testutil::box_of;
using testutil::pt;
using testutil::make_e2_algebra;

namespace {
SystemDef harmonic1d() { return testutil::make_harmonic1d(); }
SystemDef oscillator2d() { return testutil::make_oscillator2d(); }
SystemDef e2_system() { return testutil::make_e2(); }
SystemDef so3_momentum() { return testutil::make_so3_momentum(); }
} // namespace

TEST_CASE("system definition: bounds and declarations are enforced") {
    // k = 2n rejected
    CHECK_THROWS_AS(SystemDef(1, {"A", "B"}, {parse("q1"), parse("p1")}, pt({0.5, 0.5}),
                              box_of({-1, -1}, {1, 1})),
                    std::invalid_argument);
    // k < n rejected (a bare PIS is expressed through Casimirs, not here)
    CHECK_THROWS_AS(SystemDef(2, {"A"}, {parse("p1")}, pt({0, 0, 1, 0}),
                              box_of({-1, -1, 0, -1}, {1, 1, 2, 1})),
                    std::invalid_argument);
    // undeclared variable
    CHECK_THROWS_AS(SystemDef(1, {"A"}, {parse("p1 + q7")}, pt({0.5, 0.5}),
                              box_of({-1, -1}, {1, 1})),
                    std::invalid_argument);
    // reference point outside the sampling box
    CHECK_THROWS_AS(SystemDef(1, {"A"}, {parse("p1")}, pt({5.0, 0.0}),
                              box_of({-1, -1}, {1, 1})),
                    std::invalid_argument);
    // wrong Casimir count
    CHECK_THROWS_AS(SystemDef(2, {"H1", "H2", "H3"},
                              {parse("p1"), parse("p2"), parse("q1*p2 - q2*p1")},
                              pt({0, 0, 1, 0.5}), box_of({-1, -1, 0.3, 0.2}, {1, 1, 1.4, 1}),
                              ToleranceConfig{}, {parse("H1"), parse("H2")}),
                    std::invalid_argument);
}

TEST_CASE("independence: oscillator passes off-origin, fails at the critical point") {
    SystemDef sys = harmonic1d();
    CheckRecord at_regular = independence_check(sys, {pt({1.0, 0.0})});
    CHECK(at_regular.pass);
    CHECK_THAT(at_regular.details["min_kth_singular_value"].get<double>(), WithinAbs(1.0, 1e-12));

    CheckRecord at_origin = independence_check(sys, {pt({0.0, 0.0})});
    CHECK_FALSE(at_origin.pass);
    CHECK_THAT(at_origin.details["min_kth_singular_value"].get<double>(), WithinAbs(0.0, 1e-15));

    SystemDef e2 = e2_system();
    CheckRecord e2rec = independence_check(e2, {pt({0.0, 0.0, 1.0, 1.0})});
    CHECK(e2rec.pass);   // rank 3 at (q,p) = (0,0,1,1)
}

TEST_CASE("structure matrix: abelian pair is zero, e(2) and so(3) close on themselves") {
    SystemDef osc = oscillator2d();
    StructureMatrixField s_osc(osc);
    auto samples = sample_regular_points(osc, 32);
    REQUIRE(!samples.empty());
    CHECK(s_osc.abelian(samples, 1e-10));
    for (const auto& z : samples) CHECK(s_osc(z).cwiseAbs().maxCoeff() < 1e-12);

    // e(2): {H1,H2} = 0, {H1,H3} = -H2, {H2,H3} = H1
    SystemDef e2 = e2_system();
    StructureMatrixField s_e2(e2);
    auto g = testutil::rng(71);
    for (int i = 0; i < 10; ++i) {
        auto z = testutil::random_point(g, 4);
        Mat s = s_e2(z);
        CHECK_THAT(s(0, 1), WithinAbs(0.0, 1e-14));
        CHECK_THAT(s(0, 2), WithinAbs(-z[3], 1e-14));       // -p2
        CHECK_THAT(s(1, 2), WithinAbs(z[2], 1e-14));        //  p1
        CHECK_THAT((s + s.transpose()).norm(), WithinAbs(0.0, 1e-14));
    }

    // so(3) momentum set: L-block closes with the epsilon pattern, H central
    SystemDef so3 = so3_momentum();
    StructureMatrixField s_so3(so3);
    for (int i = 0; i < 10; ++i) {
        auto z = testutil::random_point(g, 6);
        Mat s = s_so3(z);
        Vec l = so3.base_point(z);
        CHECK_THAT(s(0, 1), WithinAbs(0.0, 1e-13));
        CHECK_THAT(s(0, 2), WithinAbs(0.0, 1e-13));
        CHECK_THAT(s(0, 3), WithinAbs(0.0, 1e-13));
        CHECK_THAT(s(1, 2), WithinAbs(l[3], 1e-12));   // {L1,L2} = L3
        CHECK_THAT(s(2, 3), WithinAbs(l[1], 1e-12));   // {L2,L3} = L1
        CHECK_THAT(s(3, 1), WithinAbs(l[2], 1e-12));   // {L3,L1} = L2
    }
}

TEST_CASE("corank certificate: abelian n, e(2) one, so(3) momentum two") {
    SystemDef osc = oscillator2d();
    StructureMatrixField s_osc(osc);
    auto osc_samples = sample_regular_points(osc, 32);
    auto [m_osc, rec_osc] = corank_check(s_osc, osc, osc_samples);
    CHECK(rec_osc.pass);
    CHECK(m_osc == 2);

    SystemDef e2 = e2_system();
    StructureMatrixField s_e2(e2);
    auto e2_samples = sample_regular_points(e2, 32);
    auto [m_e2, rec_e2] = corank_check(s_e2, e2, e2_samples);
    CHECK(rec_e2.pass);
    CHECK(m_e2 == 1);

    SystemDef so3 = so3_momentum();
    StructureMatrixField s_so3(so3);
    auto so3_samples = sample_regular_points(so3, 32);
    auto [m_so3, rec_so3] = corank_check(s_so3, so3, so3_samples);
    CHECK(rec_so3.pass);
    CHECK(m_so3 == 2);

    // negative control: a sample set containing L = 0 breaks constancy
    auto bad = so3_samples;
    bad.push_back(pt({1.0, 0.0, 0.0, 0.9, 0.0, 0.0}));   // p parallel to q, L = 0
    auto [m_bad, rec_bad] = corank_check(s_so3, so3, bad);
    CHECK_FALSE(rec_bad.pass);
    (void)m_bad;
}

TEST_CASE("rank identity: rank(s) + m = k on passing systems") {
    for (auto* make : {+[] { return e2_system(); }, +[] { return so3_momentum(); }}) {
        SystemDef sys = make();
        StructureMatrixField smat(sys);
        auto samples = sample_regular_points(sys, 24);
        for (const auto& z : samples) {
            int corank = numeric_corank(smat(z), smat.corank_tolerance());
            int rank = sys.integral_count() - corank;
            CHECK(rank + sys.fiber_dim() == sys.integral_count());
            // coinduced structure has rank 2(n - m)
            CHECK(rank == 2 * (sys.dof() - sys.fiber_dim()));
        }
    }
}

TEST_CASE("fiber constancy: valid systems pass, brackets depending on fiber fail") {
    SystemDef osc = oscillator2d();
    StructureMatrixField s_osc(osc);
    CheckRecord rec = fiber_constancy_check(s_osc, osc);
    CHECK(rec.pass);
    CHECK(rec.max_residual < 1e-9);

    SystemDef e2 = e2_system();
    StructureMatrixField s_e2(e2);
    CheckRecord rec2 = fiber_constancy_check(s_e2, e2);
    CHECK(rec2.pass);
    CHECK(rec2.max_residual < 1e-9);

    // broken pair: {p1, q1 p2} = -p2, and p2 varies along the fibers of
    // (p1, q1 p2), so the bracket cannot be a function of the map
    SystemDef broken(2, {"F1", "F2"}, {parse("p1"), parse("q1*p2")}, pt({1.0, 0.5, 0.3, 1.0}),
                     box_of({0.5, -1, -0.5, 0.5}, {1.5, 1, 0.8, 1.5}));
    StructureMatrixField s_broken(broken);
    CheckRecord rec3 = fiber_constancy_check(s_broken, broken);
    CHECK_FALSE(rec3.pass);
}

TEST_CASE("lie-poisson bivector: plug-in examples") {
    LieAlgebraSpec so3(3, 1);
    so3.set(0, 1, 2, 1.0);
    so3.set(1, 2, 0, 1.0);
    so3.set(2, 0, 1, 1.0);
    so3.validate();

    Vec x(3);
    x << 0, 0, 1;
    Mat w = lie_poisson_bivector(so3, x);
    Mat expected(3, 3);
    expected << 0, 1, 0, -1, 0, 0, 0, 0, 0;
    CHECK((w - expected).norm() == 0.0);

    x.setZero();
    CHECK(lie_poisson_bivector(so3, x).norm() == 0.0);

    LieAlgebraSpec e2 = make_e2_algebra();
    e2.validate();
    Vec y(3);
    y << 1, 0, 0;
    Mat we2 = lie_poisson_bivector(e2, y);
    // only the (2,3)/(3,2) pair is nonzero: {H2,H3} = H1 = 1
    CHECK_THAT(we2(1, 2), WithinAbs(1.0, 0.0));
    CHECK_THAT(we2(2, 1), WithinAbs(-1.0, 0.0));
    we2(1, 2) = we2(2, 1) = 0.0;
    CHECK(we2.norm() == 0.0);
}

TEST_CASE("lie algebra validation: antisymmetry and Jacobi enforced") {
    LieAlgebraSpec bad(3, 1);
    bad.set(0, 1, 1, 1.0);   // [e0,e1] = e1 together with [e1,e2] = e0
    bad.set(1, 2, 0, 1.0);   // violates Jacobi on the triple (e0,e1,e2)
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("casimir verification: correct sets pass, wrong choice fails loudly") {
    SystemDef e2 = e2_system();
    auto samples = sample_regular_points(e2, 32);
    CasimirSet cas = CasimirSet::from_system(e2);
    CheckRecord rec = casimir_verify(e2, cas, samples);
    CHECK(rec.pass);
    CHECK(rec.max_residual < 1e-10);

    // C = H3 is not a Casimir: {H3, H1} = H2 != 0
    CasimirSet wrong(e2, {parse("H3")});
    CheckRecord rec2 = casimir_verify(e2, wrong, samples);
    CHECK_FALSE(rec2.pass);

    SystemDef so3 = so3_momentum();
    auto so3_samples = sample_regular_points(so3, 32);
    CasimirSet cas3 = CasimirSet::from_system(so3);
    CheckRecord rec3 = casimir_verify(so3, cas3, so3_samples);
    CHECK(rec3.pass);

    // count mismatch is a hard error
    CHECK_THROWS_AS(CasimirSet(e2, {parse("H1"), parse("H2")}), std::invalid_argument);
}

TEST_CASE("casimir gradients span the null space of the structure matrix") {
    SystemDef e2 = e2_system();
    StructureMatrixField smat(e2);
    CasimirSet cas = CasimirSet::from_system(e2);
    auto samples = sample_regular_points(e2, 16);
    for (const auto& z : samples) {
        Mat s = smat(z);
        Eigen::JacobiSVD<Mat> svd(s, Eigen::ComputeFullV);
        Mat null_basis = svd.matrixV().rightCols(1);            // corank 1
        Vec grad = cas.base_jacobian(e2.base_point(z)).row(0);  // dC
        grad.normalize();
        double cosang = std::abs((null_basis.transpose() * grad)(0, 0));
        CHECK(std::acos(std::min(1.0, cosang)) < 1e-6);
    }
}

TEST_CASE("transverse coordinates: abelian empty, e(2) and so(3) pick two") {
    SystemDef osc = oscillator2d();
    CasimirSet cas_osc = CasimirSet::from_system(osc);
    auto osc_samples = sample_regular_points(osc, 16);
    CHECK(transverse_coordinates(osc, cas_osc, osc_samples).empty());

    SystemDef e2 = e2_system();
    CasimirSet cas_e2 = CasimirSet::from_system(e2);
    auto e2_samples = sample_regular_points(e2, 16);
    auto a_e2 = transverse_coordinates(e2, cas_e2, e2_samples);
    REQUIRE(a_e2.size() == 2);
    // the selection must complete dC to a full-rank frame; H3 (index 2) is
    // obligatory because dC lies in span{dH1, dH2}
    CHECK(std::find(a_e2.begin(), a_e2.end(), 2) != a_e2.end());

    SystemDef so3 = so3_momentum();
    CasimirSet cas_so3 = CasimirSet::from_system(so3);
    auto so3_samples = sample_regular_points(so3, 16);
    auto a_so3 = transverse_coordinates(so3, cas_so3, so3_samples);
    CHECK(a_so3.size() == 2);
}

TEST_CASE("validate_structure: noncommutative certificate with lie-poisson match") {
    SystemDef e2 = e2_system();
    ResidualReport report = validate_structure(e2, "e2");
    CHECK(report.overall_pass());
    REQUIRE(report.find("corank") != nullptr);
    CHECK(report.find("corank")->details["expected_corank"].get<int>() == 1);
    REQUIRE(report.find("abelian") != nullptr);
    CHECK_FALSE(report.find("abelian")->details["abelian"].get<bool>());
    REQUIRE(report.find("lie_poisson_match") != nullptr);
    CHECK(report.find("lie_poisson_match")->pass);

    SystemDef osc = oscillator2d();
    ResidualReport r2 = validate_structure(osc, "osc");
    CHECK(r2.overall_pass());
    CHECK(r2.find("abelian")->details["abelian"].get<bool>());

    // determinism: running twice yields byte-identical serialized reports
    ResidualReport r3 = validate_structure(osc, "osc");
    CHECK(r2.to_string() == r3.to_string());
}
