#ifndef AACORD_TESTS_HELPERS_HPP
#define AACORD_TESTS_HELPERS_HPP

#include <random>
#include <string>
#include <vector>

#include "aacord/expr.hpp"
#include "aacord/structure.hpp"
#include "aacord/symplectic.hpp"

namespace testutil {

inline std::mt19937_64 rng(std::uint64_t seed = 42) { return std::mt19937_64(seed); }

inline double uniform(std::mt19937_64& g, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(g);
}

inline aacord::PhasePoint random_point(std::mt19937_64& g, int dim, double lo = -2.0,
                                       double hi = 2.0) {
    aacord::PhasePoint z(dim);
    for (int i = 0; i < dim; ++i) z[i] = uniform(g, lo, hi);
    return z;
}

/// Central finite difference of an expression with respect to one variable.
/// Independent oracle: uses eval only, never symbolic differentiation.
inline double fd_derivative(const aacord::Expr& e, const std::vector<std::string>& vars,
                            const aacord::PhasePoint& z, std::size_t which, double h = 1e-6) {
    aacord::Bindings bp, bm;
    for (std::size_t i = 0; i < vars.size(); ++i) {
        double vi = z[static_cast<Eigen::Index>(i)];
        bp.set(vars[i], i == which ? vi + h : vi);
        bm.set(vars[i], i == which ? vi - h : vi);
    }
    return (aacord::eval(e, bp) - aacord::eval(e, bm)) / (2.0 * h);
}

inline aacord::Bindings bind(const std::vector<std::string>& vars, const aacord::PhasePoint& z) {
    aacord::Bindings b;
    for (std::size_t i = 0; i < vars.size(); ++i) b.set(vars[i], z[static_cast<Eigen::Index>(i)]);
    return b;
}

inline double eval_at(const aacord::Expr& e, const std::vector<std::string>& vars,
                      const aacord::PhasePoint& z) {
    return aacord::eval(e, bind(vars, z));
}

// --- shared system fixtures -------------------------------------------------

inline aacord::Box box_of(std::initializer_list<double> lo, std::initializer_list<double> hi) {
    aacord::Box b;
    b.lo = aacord::Vec(static_cast<Eigen::Index>(lo.size()));
    b.hi = aacord::Vec(static_cast<Eigen::Index>(hi.size()));
    Eigen::Index i = 0;
    for (double v : lo) b.lo[i++] = v;
    i = 0;
    for (double v : hi) b.hi[i++] = v;
    return b;
}

inline aacord::PhasePoint pt(std::initializer_list<double> vals) {
    aacord::PhasePoint z(static_cast<Eigen::Index>(vals.size()));
    Eigen::Index i = 0;
    for (double v : vals) z[i++] = v;
    return z;
}

inline aacord::SystemDef make_harmonic1d(aacord::PhasePoint z0 = pt({1.0, 0.0})) {
    return aacord::SystemDef(1, {"H1"}, {aacord::parse("(p1^2+q1^2)/2")}, std::move(z0),
                             box_of({-1.8, -1.8}, {1.8, 1.8}));
}

inline aacord::SystemDef make_free1d() {
    return aacord::SystemDef(1, {"H1"}, {aacord::parse("p1^2/2")}, pt({0.0, 1.0}),
                             box_of({-4.0, 0.4}, {4.0, 2.2}));
}

inline aacord::SystemDef make_oscillator2d() {
    return aacord::SystemDef(2, {"H1", "H2"},
                             {aacord::parse("(p1^2+q1^2)/2"), aacord::parse("(p2^2+4*q2^2)/2")},
                             pt({1.0, 0.5, 0.0, 0.0}),
                             box_of({0.3, 0.2, -1.5, -1.5}, {1.6, 1.2, 1.5, 1.5}));
}

inline aacord::SystemDef make_pendulum() {
    return aacord::SystemDef(1, {"H1"}, {aacord::parse("p1^2/2 - cos(q1)")}, pt({0.0, 1.0}),
                             box_of({-2.4, 0.2}, {2.4, 1.5}));
}

inline aacord::LieAlgebraSpec make_e2_algebra() {
    aacord::LieAlgebraSpec alg(3, 1);
    alg.set(0, 2, 1, -1.0);  // {H1,H3} = -H2
    alg.set(1, 2, 0, 1.0);   // {H2,H3} =  H1
    return alg;
}

inline aacord::SystemDef make_e2() {
    return aacord::SystemDef(2, {"H1", "H2", "H3"},
                             {aacord::parse("p1"), aacord::parse("p2"),
                              aacord::parse("q1*p2 - q2*p1")},
                             pt({0.0, 0.0, 1.0, 0.5}),
                             box_of({-0.8, -0.8, 0.5, 0.2}, {0.8, 0.8, 1.4, 1.0}),
                             aacord::ToleranceConfig{},
                             {aacord::parse("H1^2 + H2^2")},
                             make_e2_algebra());
}

inline aacord::LieAlgebraSpec make_so3_momentum_algebra() {
    aacord::LieAlgebraSpec alg(4, 2);   // index 0 is the central H
    alg.set(1, 2, 3, 1.0);
    alg.set(2, 3, 1, 1.0);
    alg.set(3, 1, 2, 1.0);
    return alg;
}

inline aacord::SystemDef make_so3_momentum() {
    return aacord::SystemDef(3, {"H", "L1", "L2", "L3"},
                             {aacord::parse("(p1^2+p2^2+p3^2)/2"), aacord::parse("q2*p3 - q3*p2"),
                              aacord::parse("q3*p1 - q1*p3"), aacord::parse("q1*p2 - q2*p1")},
                             pt({1.0, 0.0, 0.0, 0.0, 1.0, 0.0}),
                             box_of({0.7, -0.25, -0.25, -0.25, 0.7, -0.25},
                                    {1.3, 0.25, 0.25, 0.25, 1.3, 0.25}),
                             aacord::ToleranceConfig{},
                             {aacord::parse("H"), aacord::parse("L1^2 + L2^2 + L3^2")},
                             make_so3_momentum_algebra());
}

} // namespace testutil

#endif
