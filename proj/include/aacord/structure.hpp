#ifndef AACORD_STRUCTURE_HPP
#define AACORD_STRUCTURE_HPP

/** \file structure.hpp
    \brief System definitions and the integrability certificates:
           independence, bracket closure on fibers, constant corank,
           Casimir verification, Lie-Poisson structures, and the selection
           of transverse base coordinates.

    A system is a set of k integrals H_1..H_k on R^2n with n <= k < 2n.
    The structure matrix s_ij = {H_i, H_j}, viewed as a function on the
    base, must have constant corank m = 2n - k on the sampled domain; m
    independent Casimir functions of the coinduced base Poisson structure
    then generate the fiber directions. Casimirs are verified, never
    discovered.
*/

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "aacord/expr.hpp"
#include "aacord/flow.hpp"
#include "aacord/report.hpp"
#include "aacord/symplectic.hpp"

namespace aacord {

struct ToleranceConfig {
    double tol_rank = 1e-8;      ///< independence: least acceptable k-th singular value
    double tol_corank = 1e-8;    ///< corank threshold, relative to sigma_max
    double tol_abelian = 1e-10;  ///< bracket magnitude below which the system counts Abelian
    double tol_fiber = 1e-8;     ///< fiber-constancy of bracket values
    double tol_casimir = 1e-8;   ///< involution of Casimir pull-backs with the integrals
    int sample_count = 64;
    std::uint64_t seed = 42;
};

/// Axis-aligned box; used both for phase-space sampling and base domains.
struct Box {
    Vec lo, hi;

    int dim() const { return static_cast<int>(lo.size()); }
    bool contains(const Vec& x, double slack = 0.0) const {
        for (int i = 0; i < dim(); ++i)
            if (x[i] < lo[i] - slack || x[i] > hi[i] + slack) return false;
        return true;
    }
    Vec center() const { return 0.5 * (lo + hi); }
};

/** Structure constants c_ij^h of a real Lie algebra of dimension k and
    rank m, validated for exact antisymmetry and the Jacobi identity. */
class LieAlgebraSpec {
public:
    LieAlgebraSpec(int dimension, int rank)
        : k_(dimension), rank_(rank),
          c_(static_cast<std::size_t>(dimension) * dimension * dimension, 0.0) {}

    int dimension() const { return k_; }
    int rank() const { return rank_; }

    double at(int i, int j, int h) const { return c_[index(i, j, h)]; }
    void set(int i, int j, int h, double v) {
        c_[index(i, j, h)] = v;
        c_[index(j, i, h)] = -v;
    }

    void validate() const {
        for (int i = 0; i < k_; ++i)
            for (int j = 0; j < k_; ++j)
                for (int h = 0; h < k_; ++h)
                    if (at(i, j, h) != -at(j, i, h))
                        throw std::invalid_argument("structure constants are not antisymmetric");
        // Jacobi identity, exact: sum_l (c_ij^l c_lh^m + c_jh^l c_li^m + c_hi^l c_lj^m) = 0
        for (int i = 0; i < k_; ++i)
            for (int j = 0; j < k_; ++j)
                for (int h = 0; h < k_; ++h)
                    for (int m = 0; m < k_; ++m) {
                        double s = 0.0;
                        for (int l = 0; l < k_; ++l)
                            s += at(i, j, l) * at(l, h, m) + at(j, h, l) * at(l, i, m) +
                                 at(h, i, l) * at(l, j, m);
                        if (s != 0.0)
                            throw std::invalid_argument("structure constants violate the Jacobi identity");
                    }
    }

private:
    std::size_t index(int i, int j, int h) const {
        return (static_cast<std::size_t>(i) * k_ + j) * k_ + h;
    }
    int k_;
    int rank_;
    std::vector<double> c_;
};

/// Lie-Poisson bivector w^ij(x) = c_ij^h x_h on the dual of the algebra.
inline Mat lie_poisson_bivector(const LieAlgebraSpec& alg, const Vec& x) {
    const int k = alg.dimension();
    Mat w = Mat::Zero(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            double s = 0.0;
            for (int h = 0; h < k; ++h) s += alg.at(i, j, h) * x[h];
            w(i, j) = s;
        }
    return w;
}

/** A CIS/PIS specification: n degrees of freedom, k integrals with
    n <= k < 2n, optional Casimirs of the coinduced structure (expressions
    in the integral names), optional Lie-algebra structure constants, a
    reference point, a phase-space sampling box, and tolerances.

    For an Abelian system (k = n) with no Casimirs given, the coordinate
    Casimirs C_l = x_l are filled in automatically. */
class SystemDef {
public:
    SystemDef(int n, std::vector<std::string> integral_names, std::vector<Expr> integrals,
              PhasePoint z0, Box sampling_box, ToleranceConfig tol = {},
              std::vector<Expr> casimirs = {}, std::optional<LieAlgebraSpec> algebra = {})
        : n_(n), k_(static_cast<int>(integrals.size())), names_(std::move(integral_names)),
          integrals_(std::move(integrals)), casimirs_(std::move(casimirs)),
          algebra_(std::move(algebra)), z0_(std::move(z0)), box_(std::move(sampling_box)),
          tol_(tol), variables_(canonical_variables(n)) {
        if (k_ < n_ || k_ >= 2 * n_)
            throw std::invalid_argument("integral count must satisfy n <= k < 2n (n = " +
                                        std::to_string(n_) + ", k = " + std::to_string(k_) + ")");
        if (static_cast<int>(names_.size()) != k_)
            throw std::invalid_argument("one name per integral required");
        if (z0_.size() != 2 * n_) throw std::invalid_argument("reference point has wrong dimension");
        if (box_.dim() != 2 * n_) throw std::invalid_argument("sampling box has wrong dimension");
        if (!box_.contains(z0_))
            throw std::invalid_argument("reference point lies outside the sampling box");
        check_declared(integrals_, variables_);
        if (algebra_ && algebra_->dimension() != k_)
            throw std::invalid_argument("algebra dimension must equal the integral count");
        if (algebra_) algebra_->validate();

        if (casimirs_.empty() && k_ == n_) {
            // Abelian: the base bracket vanishes, every coordinate is a Casimir
            for (const auto& nm : names_) casimirs_.push_back(Expr::variable(nm));
        }
        if (!casimirs_.empty() && static_cast<int>(casimirs_.size()) != fiber_dim())
            throw std::invalid_argument("expected " + std::to_string(fiber_dim()) +
                                        " Casimir functions, got " +
                                        std::to_string(casimirs_.size()));
        check_declared(casimirs_, names_);

        fields_.reserve(static_cast<std::size_t>(k_));
        for (const Expr& h : integrals_) fields_.emplace_back(h, variables_);
        // symbolic Jacobian dH_i/dz_j, compiled for sampling loops
        jac_.reserve(static_cast<std::size_t>(k_) * 2 * n_);
        for (const Expr& h : integrals_)
            for (const auto& v : variables_)
                jac_.emplace_back(differentiate(h, v), std::span<const std::string>(variables_));
    }

    int dof() const { return n_; }
    int integral_count() const { return k_; }
    /// Corank of the structure matrix demanded by the definition: m = 2n - k.
    int fiber_dim() const { return 2 * n_ - k_; }

    const std::vector<std::string>& names() const { return names_; }
    const std::vector<std::string>& variables() const { return variables_; }
    const std::vector<Expr>& integrals() const { return integrals_; }
    const std::vector<Expr>& casimirs() const { return casimirs_; }
    bool has_casimirs() const { return !casimirs_.empty(); }
    const std::optional<LieAlgebraSpec>& algebra() const { return algebra_; }
    const PhasePoint& reference_point() const { return z0_; }
    const Box& sampling_box() const { return box_; }
    const ToleranceConfig& tolerances() const { return tol_; }
    ToleranceConfig& tolerances() { return tol_; }
    const std::vector<VectorFieldHandle>& integral_fields() const { return fields_; }

    /// Base-space image x = (H_1(z), ..., H_k(z)).
    Vec base_point(const PhasePoint& z) const {
        Vec x(k_);
        for (int i = 0; i < k_; ++i) x[i] = fields_[static_cast<std::size_t>(i)].generator_value(z);
        return x;
    }

    /// Jacobian dH/dz (k x 2n) at z, from cached symbolic derivatives.
    Mat jacobian(const PhasePoint& z) const {
        Mat j(k_, 2 * n_);
        std::span<const double> vals(z.data(), static_cast<std::size_t>(z.size()));
        for (int i = 0; i < k_; ++i)
            for (int c = 0; c < 2 * n_; ++c)
                j(i, c) = jac_[static_cast<std::size_t>(i) * 2 * n_ + c].eval(vals);
        return j;
    }

private:
    static void check_declared(const std::vector<Expr>& exprs,
                               const std::vector<std::string>& declared) {
        for (const Expr& e : exprs)
            for (const auto& v : e.variables()) {
                if (std::find(declared.begin(), declared.end(), v) == declared.end())
                    throw std::invalid_argument("undeclared identifier '" + v + "' in expression");
            }
    }

    int n_, k_;
    std::vector<std::string> names_;
    std::vector<Expr> integrals_;
    std::vector<Expr> casimirs_;
    std::optional<LieAlgebraSpec> algebra_;
    PhasePoint z0_;
    Box box_;
    ToleranceConfig tol_;
    std::vector<std::string> variables_;
    std::vector<VectorFieldHandle> fields_;
    std::vector<CompiledExpr> jac_;
};

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

namespace detail {

inline double halton(std::uint64_t index, std::uint64_t base) {
    double f = 1.0, r = 0.0;
    while (index > 0) {
        f /= static_cast<double>(base);
        r += f * static_cast<double>(index % base);
        index /= base;
    }
    return r;
}

constexpr std::uint64_t kPrimes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37};

} // namespace detail

/// Low-discrepancy (Halton) points in the box; `skip` offsets the sequence
/// so different checks can draw disjoint streams deterministically.
inline std::vector<Vec> halton_points(const Box& box, int count, std::uint64_t skip = 0) {
    const int d = box.dim();
    if (d > 12) throw std::invalid_argument("halton_points: dimension too large");
    std::vector<Vec> pts;
    pts.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Vec x(d);
        for (int c = 0; c < d; ++c) {
            double u = detail::halton(skip + static_cast<std::uint64_t>(i) + 1,
                                      detail::kPrimes[c]);
            x[c] = box.lo[c] + u * (box.hi[c] - box.lo[c]);
        }
        pts.push_back(std::move(x));
    }
    return pts;
}

/** Sample the system's box, keeping only points where the integrals are
    independent (the regular subset); failing points are counted in the
    report but excluded from downstream certificates. */
inline std::vector<PhasePoint> sample_regular_points(const SystemDef& sys, int count = -1,
                                                     int* rejected = nullptr) {
    if (count < 0) count = sys.tolerances().sample_count;
    auto raw = halton_points(sys.sampling_box(), count);
    std::vector<PhasePoint> out;
    int bad = 0;
    for (auto& z : raw) {
        Eigen::JacobiSVD<Mat> svd(sys.jacobian(z));
        double sk = svd.singularValues()[sys.integral_count() - 1];
        if (sk > sys.tolerances().tol_rank) out.push_back(std::move(z));
        else ++bad;
    }
    if (rejected) *rejected = bad;
    return out;
}

// ---------------------------------------------------------------------------
// Certificates
// ---------------------------------------------------------------------------

/** Independence of the integrals: the smallest (k-th) singular value of
    dH/dz, minimized over the samples, must exceed tol_rank. */
inline CheckRecord independence_check(const SystemDef& sys,
                                      const std::vector<PhasePoint>& samples) {
    if (samples.empty()) throw std::invalid_argument("independence_check: no samples");
    CheckRecord rec;
    rec.name = "independence";
    rec.anchor = "integrals functionally independent: k-form dH_1 ^ ... ^ dH_k nowhere zero";
    rec.tolerance = sys.tolerances().tol_rank;
    rec.sample_count = static_cast<int>(samples.size());
    double min_sk = std::numeric_limits<double>::infinity();
    int failures = 0;
    for (const auto& z : samples) {
        double sk;
        try {
            Eigen::JacobiSVD<Mat> svd(sys.jacobian(z));
            sk = svd.singularValues()[sys.integral_count() - 1];
        } catch (const EvalError& e) {
            ++failures;
            rec.details["evaluation_errors"].push_back(e.what());
            continue;
        }
        min_sk = std::min(min_sk, sk);
    }
    rec.max_residual = min_sk;   // here the "residual" is the worst margin
    rec.details["min_kth_singular_value"] = min_sk;
    if (failures) rec.details["points_with_domain_errors"] = failures;
    rec.pass = failures == 0 && min_sk > rec.tolerance;
    return rec;
}

/** The matrix s_ij = {H_i, H_j} of structure functions, kept symbolically
    with a compiled pointwise evaluator. */
class StructureMatrixField {
public:
    explicit StructureMatrixField(const SystemDef& sys)
        : k_(sys.integral_count()), corank_tol_(sys.tolerances().tol_corank) {
        entries_.resize(static_cast<std::size_t>(k_) * k_);
        const auto& vars = sys.variables();
        for (int i = 0; i < k_; ++i) {
            entry(i, i) = Expr::constant(0.0);
            for (int j = i + 1; j < k_; ++j) {
                Expr b = poisson_bracket(sys.integrals()[static_cast<std::size_t>(i)],
                                         sys.integrals()[static_cast<std::size_t>(j)], vars);
                entry(i, j) = b;
                entry(j, i) = detail::s_neg(b);
            }
        }
        compiled_.reserve(entries_.size());
        for (const Expr& e : entries_)
            compiled_.emplace_back(e, std::span<const std::string>(vars));
    }

    int size() const { return k_; }
    double corank_tolerance() const { return corank_tol_; }
    const Expr& entry_expr(int i, int j) const {
        return entries_[static_cast<std::size_t>(i) * k_ + j];
    }

    Mat operator()(const PhasePoint& z) const {
        Mat s(k_, k_);
        std::span<const double> vals(z.data(), static_cast<std::size_t>(z.size()));
        for (int i = 0; i < k_; ++i)
            for (int j = 0; j < k_; ++j)
                s(i, j) = compiled_[static_cast<std::size_t>(i) * k_ + j].eval(vals);
        return s;
    }

    /// True when every entry vanishes (within tol) across the samples.
    bool abelian(const std::vector<PhasePoint>& samples, double tol) const {
        for (const auto& z : samples)
            if ((*this)(z).cwiseAbs().maxCoeff() > tol) return false;
        return true;
    }

private:
    Expr& entry(int i, int j) { return entries_[static_cast<std::size_t>(i) * k_ + j]; }
    int k_;
    double corank_tol_;
    std::vector<Expr> entries_;
    std::vector<CompiledExpr> compiled_;
};

inline StructureMatrixField structure_matrix(const SystemDef& sys) {
    return StructureMatrixField(sys);
}

/// Corank of an antisymmetric matrix: singular values below tol * sigma_max.
inline int numeric_corank(const Mat& s, double rel_tol) {
    Eigen::JacobiSVD<Mat> svd(s);
    const auto& sv = svd.singularValues();
    double smax = sv.size() ? sv[0] : 0.0;
    if (smax < 1e-300) return static_cast<int>(s.rows());
    int corank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv[i] < rel_tol * smax) ++corank;
    return corank;
}

/** Constant-corank certificate: corank of s at every sample must equal
    m = 2n - k. Returns the measured corank (consensus value) and the record. */
inline std::pair<int, CheckRecord> corank_check(const StructureMatrixField& smat,
                                                const SystemDef& sys,
                                                const std::vector<PhasePoint>& samples) {
    if (samples.empty()) throw std::invalid_argument("corank_check: no samples");
    CheckRecord rec;
    rec.name = "corank";
    rec.anchor = "structure matrix {H_i,H_j} has constant corank m = 2n - k on the base";
    rec.tolerance = smat.corank_tolerance();
    rec.sample_count = static_cast<int>(samples.size());
    const int expected = sys.fiber_dim();
    std::vector<int> seen;
    bool all_match = true;
    for (const auto& z : samples) {
        int c = numeric_corank(smat(z), smat.corank_tolerance());
        if (std::find(seen.begin(), seen.end(), c) == seen.end()) seen.push_back(c);
        if (c != expected) all_match = false;
    }
    std::sort(seen.begin(), seen.end());
    rec.details["expected_corank"] = expected;
    rec.details["observed_coranks"] = seen;
    rec.max_residual = all_match ? 0.0 : 1.0;
    rec.pass = all_match;
    return {all_match ? expected : seen.front(), rec};
}

namespace detail {

/// Orthonormal basis of ker(dH) at z (columns).
inline Mat fiber_kernel_basis(const SystemDef& sys, const PhasePoint& z) {
    Mat j = sys.jacobian(z);
    Eigen::JacobiSVD<Mat> svd(j, Eigen::ComputeFullV);
    const int dim = 2 * sys.dof();
    const int k = sys.integral_count();
    return svd.matrixV().rightCols(dim - k);
}

/// Newton re-projection onto the level set {H = target}.
inline PhasePoint project_to_fiber(const SystemDef& sys, PhasePoint z, const Vec& target,
                                   int iters = 3) {
    for (int it = 0; it < iters; ++it) {
        Vec r = sys.base_point(z) - target;
        if (r.norm() < 1e-14) break;
        Mat j = sys.jacobian(z);
        Vec step = j.completeOrthogonalDecomposition().solve(r);
        z -= step;
    }
    return z;
}

/** Walk along the fiber of H through z0: repeated small steps of the unit
    projection of a frozen random ambient direction onto ker(dH), with
    Newton re-projection after each step. Works for valid and broken
    systems alike (the kernel is the fiber tangent by definition). */
inline std::vector<PhasePoint> fiber_walk(const SystemDef& sys, const PhasePoint& z0,
                                          const Vec& direction, int steps, double step_size) {
    std::vector<PhasePoint> pts;
    Vec target = sys.base_point(z0);
    PhasePoint z = z0;
    for (int s = 0; s < steps; ++s) {
        Mat kb = fiber_kernel_basis(sys, z);
        Vec d = kb * (kb.transpose() * direction);
        double norm = d.norm();
        if (norm < 1e-10) break;   // direction fell into the row space
        d /= norm;
        // midpoint step on the projected field
        PhasePoint mid = z + 0.5 * step_size * d;
        Mat kbm = fiber_kernel_basis(sys, mid);
        Vec dm = kbm * (kbm.transpose() * direction);
        if (dm.norm() < 1e-10) break;
        z += step_size * dm / dm.norm();
        z = project_to_fiber(sys, z, target);
        pts.push_back(z);
    }
    return pts;
}

} // namespace detail

/** Fiber-constancy of the brackets: transport the reference point along
    fiber directions and compare every {H_i,H_j} against its value at the
    start. A passing system has s_ij = (function of H) only, so the values
    cannot move along a fiber.

    Transport uses the kernel of dH directly (projected walk with Newton
    re-projection); when Casimir pull-backs are available their flows are
    used as well, exercising the same fibers through the flow map. */
inline CheckRecord fiber_constancy_check(const StructureMatrixField& smat, const SystemDef& sys,
                                         int n_points = 16, const FlowConfig& fcfg = {}) {
    CheckRecord rec;
    rec.name = "fiber_constancy";
    rec.anchor = "brackets {H_i,H_j} are constant on fibers of H (structure functions live on the base)";
    rec.tolerance = sys.tolerances().tol_fiber;
    rec.assumed = {"fibers connected (transport explores one component)"};

    const PhasePoint& z0 = sys.reference_point();
    Mat s0 = smat(z0);
    double scale = std::max(1.0, s0.cwiseAbs().maxCoeff());
    std::mt19937_64 gen(sys.tolerances().seed ^ 0x5eedf1be5ULL);
    std::normal_distribution<double> nd;

    std::vector<PhasePoint> visited;
    const int dim = 2 * sys.dof();
    for (int trial = 0; trial < n_points; ++trial) {
        Vec dir(dim);
        for (int i = 0; i < dim; ++i) dir[i] = nd(gen);
        auto walk = detail::fiber_walk(sys, z0, dir, 6, 0.08);
        visited.insert(visited.end(), walk.begin(), walk.end());
    }

    // Casimir flows reach the same fibers through the group action
    if (sys.has_casimirs()) {
        std::vector<std::pair<std::string, Expr>> sub;
        for (int i = 0; i < sys.integral_count(); ++i)
            sub.emplace_back(sys.names()[static_cast<std::size_t>(i)],
                             sys.integrals()[static_cast<std::size_t>(i)]);
        std::vector<VectorFieldHandle> vfields;
        for (const Expr& c : sys.casimirs())
            vfields.emplace_back(substitute(c, sub), sys.variables());
        std::uniform_real_distribution<double> ud(-0.5, 0.5);
        for (int trial = 0; trial < std::min(n_points, 8); ++trial) {
            std::vector<double> s(vfields.size());
            for (auto& v : s) v = ud(gen);
            try {
                visited.push_back(flow_map(vfields, s, z0, fcfg));
            } catch (const FlowError& e) {
                rec.details["flow_errors"].push_back(e.what());
            }
        }
    }

    double worst = 0.0;
    for (const auto& z : visited)
        worst = std::max(worst, (smat(z) - s0).cwiseAbs().maxCoeff());
    rec.sample_count = static_cast<int>(visited.size());
    rec.max_residual = worst / scale;
    rec.details["transported_points"] = static_cast<int>(visited.size());
    rec.details["bracket_scale"] = scale;
    rec.pass = rec.max_residual < rec.tolerance && !visited.empty();
    return rec;
}

/** Casimir pull-backs H*C and their Hamiltonian vector fields; the fields
    span the fiber directions of a passing system. */
class CasimirSet {
public:
    CasimirSet(const SystemDef& sys, std::vector<Expr> base_exprs)
        : base_exprs_(std::move(base_exprs)) {
        if (static_cast<int>(base_exprs_.size()) != sys.fiber_dim())
            throw std::invalid_argument("expected " + std::to_string(sys.fiber_dim()) +
                                        " Casimir functions, got " +
                                        std::to_string(base_exprs_.size()));
        std::vector<std::pair<std::string, Expr>> sub;
        for (int i = 0; i < sys.integral_count(); ++i)
            sub.emplace_back(sys.names()[static_cast<std::size_t>(i)],
                             sys.integrals()[static_cast<std::size_t>(i)]);
        for (const Expr& c : base_exprs_) {
            pullbacks_.push_back(substitute(c, sub));
            fields_.emplace_back(pullbacks_.back(), sys.variables());
        }
        // base-space Jacobian dC_l/dx_i, symbolic
        for (const Expr& c : base_exprs_)
            for (const auto& nm : sys.names()) base_jac_.push_back(differentiate(c, nm));
        base_names_ = sys.names();
    }

    static CasimirSet from_system(const SystemDef& sys) {
        if (!sys.has_casimirs())
            throw std::invalid_argument("system definition carries no Casimir functions");
        return CasimirSet(sys, sys.casimirs());
    }

    int count() const { return static_cast<int>(base_exprs_.size()); }
    const std::vector<Expr>& base_exprs() const { return base_exprs_; }
    const std::vector<Expr>& pullbacks() const { return pullbacks_; }
    const std::vector<VectorFieldHandle>& fields() const { return fields_; }

    /// Value vector J = C(x) at a base point x.
    Vec values_at_base(const Vec& x) const {
        Bindings b;
        for (std::size_t i = 0; i < base_names_.size(); ++i) b.set(base_names_[i], x[static_cast<Eigen::Index>(i)]);
        Vec out(count());
        for (int l = 0; l < count(); ++l) out[l] = eval(base_exprs_[static_cast<std::size_t>(l)], b);
        return out;
    }

    /// Jacobian dC/dx (m x k) at a base point.
    Mat base_jacobian(const Vec& x) const {
        Bindings b;
        for (std::size_t i = 0; i < base_names_.size(); ++i) b.set(base_names_[i], x[static_cast<Eigen::Index>(i)]);
        const int k = static_cast<int>(base_names_.size());
        Mat j(count(), k);
        for (int l = 0; l < count(); ++l)
            for (int i = 0; i < k; ++i)
                j(l, i) = eval(base_jac_[static_cast<std::size_t>(l) * k + i], b);
        return j;
    }

private:
    std::vector<Expr> base_exprs_;
    std::vector<Expr> pullbacks_;
    std::vector<VectorFieldHandle> fields_;
    std::vector<Expr> base_jac_;
    std::vector<std::string> base_names_;
};

/** Verify the supplied Casimirs: each pull-back must commute with every
    integral (tolerance tol_casimir) and the C_l must be independent as
    base functions (Jacobian rank m at the sampled base points). */
inline CheckRecord casimir_verify(const SystemDef& sys, const CasimirSet& cas,
                                  const std::vector<PhasePoint>& samples) {
    CheckRecord rec;
    rec.name = "casimir_verify";
    rec.anchor = "Casimir pull-backs commute with all integrals and are independent on the base";
    rec.tolerance = sys.tolerances().tol_casimir;
    rec.sample_count = static_cast<int>(samples.size());

    // involution residuals {H*C_l, H_i}
    double worst = 0.0;
    const auto& vars = sys.variables();
    for (const Expr& pc : cas.pullbacks()) {
        for (const Expr& h : sys.integrals()) {
            Expr br = poisson_bracket(pc, h, vars);
            CompiledExpr cb(br, std::span<const std::string>(vars));
            for (const auto& z : samples) {
                std::span<const double> vals(z.data(), static_cast<std::size_t>(z.size()));
                worst = std::max(worst, std::abs(cb.eval(vals)));
            }
        }
    }
    rec.max_residual = worst;
    bool involution_ok = worst < rec.tolerance;

    // independence of the C_l over the base images of the samples
    double min_sm = std::numeric_limits<double>::infinity();
    for (const auto& z : samples) {
        Mat bj = cas.base_jacobian(sys.base_point(z));
        Eigen::JacobiSVD<Mat> svd(bj);
        min_sm = std::min(min_sm, svd.singularValues()[cas.count() - 1]);
    }
    bool rank_ok = min_sm > sys.tolerances().tol_rank;
    rec.details["max_involution_residual"] = worst;
    rec.details["min_casimir_jacobian_singular_value"] = min_sm;
    if (!involution_ok) rec.details["failure"] = "a Casimir pull-back fails to commute with an integral";
    else if (!rank_ok) rec.details["failure"] = "Casimir functions are rank-deficient on the base";
    rec.pass = involution_ok && rank_ok;
    return rec;
}

/** Select 2(n-m) integral indices whose base differentials, together with
    the Casimir differentials dC_l, give a full-rank frame at every sampled
    base point. Greedy max-min pivoting, deterministic tie-break on index. */
inline std::vector<int> transverse_coordinates(const SystemDef& sys, const CasimirSet& cas,
                                               const std::vector<PhasePoint>& samples) {
    const int k = sys.integral_count();
    const int m = sys.fiber_dim();
    const int want = 2 * (sys.dof() - m);
    if (want == 0) return {};
    if (samples.empty()) throw std::invalid_argument("transverse_coordinates: no samples");

    std::vector<Vec> base_pts;
    base_pts.reserve(samples.size());
    for (const auto& z : samples) base_pts.push_back(sys.base_point(z));

    std::vector<int> chosen;
    auto stacked_min_sv = [&](const std::vector<int>& sel) {
        double worst = std::numeric_limits<double>::infinity();
        for (const auto& x : base_pts) {
            Mat mth(m + static_cast<int>(sel.size()), k);
            mth.topRows(m) = cas.base_jacobian(x);
            for (std::size_t r = 0; r < sel.size(); ++r) {
                mth.row(m + static_cast<Eigen::Index>(r)).setZero();
                mth(m + static_cast<Eigen::Index>(r), sel[r]) = 1.0;
            }
            Eigen::JacobiSVD<Mat> svd(mth);
            worst = std::min(worst, svd.singularValues()[mth.rows() - 1]);
        }
        return worst;
    };

    for (int round = 0; round < want; ++round) {
        int best = -1;
        double best_sv = 0.0;
        for (int cand = 0; cand < k; ++cand) {
            if (std::find(chosen.begin(), chosen.end(), cand) != chosen.end()) continue;
            auto trial = chosen;
            trial.push_back(cand);
            double sv = stacked_min_sv(trial);
            if (sv > best_sv + 1e-15) {
                best_sv = sv;
                best = cand;
            }
        }
        if (best < 0 || best_sv <= sys.tolerances().tol_rank)
            throw std::runtime_error(
                "transverse_coordinates: no completing subset at the sampled base points "
                "(shrink the domain)");
        chosen.push_back(best);
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

/** Run the full structure certificate battery for a system: independence,
    corank, fiber constancy, and (when Casimirs are present) their
    verification. This is the `validate` entry point. */
inline ResidualReport validate_structure(const SystemDef& sys, const std::string& system_name) {
    ResidualReport report;
    report.system = system_name;
    report.seed = sys.tolerances().seed;

    int rejected = 0;
    auto samples = sample_regular_points(sys, -1, &rejected);
    if (samples.empty()) {
        CheckRecord rec;
        rec.name = "sampling";
        rec.anchor = "regular points exist in the sampling box";
        rec.pass = false;
        rec.details["rejected_points"] = rejected;
        report.add(rec);
        return report;
    }

    report.add(independence_check(sys, samples));
    StructureMatrixField smat(sys);
    auto [m, corank_rec] = corank_check(smat, sys, samples);
    corank_rec.details["rejected_sample_points"] = rejected;
    report.add(corank_rec);
    report.add(fiber_constancy_check(smat, sys));

    CheckRecord ab;
    ab.name = "abelian";
    ab.anchor = "all brackets vanish identically (k = n case)";
    ab.tolerance = sys.tolerances().tol_abelian;
    ab.sample_count = static_cast<int>(samples.size());
    ab.pass = true;
    ab.details["abelian"] = smat.abelian(samples, sys.tolerances().tol_abelian);
    report.add(ab);

    if (sys.has_casimirs()) {
        CasimirSet cas = CasimirSet::from_system(sys);
        report.add(casimir_verify(sys, cas, samples));
    }

    if (sys.algebra()) {
        // coinduced bracket must match the Lie-Poisson bivector on the dual
        CheckRecord rec;
        rec.name = "lie_poisson_match";
        rec.anchor = "coinduced base bracket equals the Lie-Poisson bivector c_ij^h x_h";
        rec.tolerance = 1e-10;
        rec.sample_count = static_cast<int>(samples.size());
        double worst = 0.0;
        for (const auto& z : samples) {
            Mat s = smat(z);
            Mat w = lie_poisson_bivector(*sys.algebra(), sys.base_point(z));
            worst = std::max(worst, (s - w).cwiseAbs().maxCoeff());
        }
        rec.max_residual = worst;
        rec.pass = worst < rec.tolerance;
        report.add(rec);
    }

    return report;
}

} // namespace aacord

#endif // AACORD_STRUCTURE_HPP
