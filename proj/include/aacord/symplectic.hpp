#ifndef AACORD_SYMPLECTIC_HPP
#define AACORD_SYMPLECTIC_HPP

/** \file symplectic.hpp
    \brief The canonical symplectic structure on R^2n: Poisson brackets,
           Hamiltonian vector fields, and the Liouville 1-form.

    Conventions, fixed once and inherited by every downstream formula:

      coordinates   z = (q^1..q^n, p_1..p_n)
      form          Omega = sum_a dp_a ^ dq^a
      bracket       {f,g} = sum_a (d_q f d_p g - d_p f d_q g),  {q^a,p_a} = 1
      vector field  X_H = (dH/dp_a) d_q - (dH/dq^a) d_p,  so  X_H . Omega = -dH
      Liouville     theta = sum_a p_a dq^a,  d theta = Omega
*/

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "aacord/expr.hpp"

namespace aacord {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Phase point z in R^2n, ordered (q^1..q^n, p_1..p_n).
using PhasePoint = Vec;

/// Canonical variable names for n degrees of freedom: q1..qn, p1..pn.
inline std::vector<std::string> canonical_variables(int n) {
    std::vector<std::string> names;
    names.reserve(2 * static_cast<std::size_t>(n));
    for (int a = 1; a <= n; ++a) names.push_back("q" + std::to_string(a));
    for (int a = 1; a <= n; ++a) names.push_back("p" + std::to_string(a));
    return names;
}

/** Hamiltonian vector field of a generating function H.

    Holds the generator and its 2n cached symbolic partial derivatives,
    compiled for positional evaluation. Immutable after construction;
    evaluation is reentrant. */
class VectorFieldHandle {
public:
    VectorFieldHandle() = default;

    VectorFieldHandle(Expr generator, const std::vector<std::string>& variables)
        : generator_(std::move(generator)), n_(static_cast<int>(variables.size()) / 2) {
        const int n = n_;
        components_.reserve(2 * static_cast<std::size_t>(n));
        // qdot_a = dH/dp_a ; pdot_a = -dH/dq^a
        for (int a = 0; a < n; ++a)
            components_.push_back(differentiate(generator_, variables[static_cast<std::size_t>(n + a)]));
        for (int a = 0; a < n; ++a)
            components_.push_back(detail::s_neg(
                differentiate(generator_, variables[static_cast<std::size_t>(a)])));
        compiled_.reserve(components_.size());
        for (const Expr& c : components_)
            compiled_.emplace_back(c, std::span<const std::string>(variables));
        compiled_generator_ = CompiledExpr(generator_, std::span<const std::string>(variables));
    }

    int dof() const { return n_; }
    const Expr& generator() const { return generator_; }
    const std::vector<Expr>& component_exprs() const { return components_; }

    /// X_H(z), all 2n components.
    Vec operator()(const PhasePoint& z) const {
        Vec out(2 * n_);
        std::span<const double> vals(z.data(), static_cast<std::size_t>(z.size()));
        for (int i = 0; i < 2 * n_; ++i)
            out[i] = compiled_[static_cast<std::size_t>(i)].eval(vals);
        return out;
    }

    void eval_into(std::span<const double> z, std::span<double> out) const {
        for (std::size_t i = 0; i < compiled_.size(); ++i) out[i] = compiled_[i].eval(z);
    }

    /// Value of the generating function at z.
    double generator_value(const PhasePoint& z) const {
        return compiled_generator_.eval(std::span<const double>(z.data(),
                                        static_cast<std::size_t>(z.size())));
    }

private:
    Expr generator_;
    int n_ = 0;
    std::vector<Expr> components_;        // (qdot_1..qdot_n, pdot_1..pdot_n)
    std::vector<CompiledExpr> compiled_;
    CompiledExpr compiled_generator_;
};

/** The canonical symplectic structure on R^2n with its constant matrix and
    the Liouville primitive theta = sum p_a dq^a as a coefficient rule. */
class SymplecticStructure {
public:
    explicit SymplecticStructure(int n) : n_(n) {}

    int dof() const { return n_; }
    int dim() const { return 2 * n_; }

    /// Matrix of Omega on coordinate fields: Omega(e_i, e_j).
    Mat omega_matrix() const {
        Mat w = Mat::Zero(2 * n_, 2 * n_);
        for (int a = 0; a < n_; ++a) {
            w(a, n_ + a) = -1.0;   // Omega(d_q, d_p) = -1 under Omega = dp ^ dq
            w(n_ + a, a) = 1.0;
        }
        return w;
    }

    /// Coefficient of theta on the i-th coordinate differential at z
    /// (p_a on dq^a, zero on dp_a).
    double theta_coefficient(const PhasePoint& z, int i) const {
        return i < n_ ? z[n_ + i] : 0.0;
    }

    /// Exterior derivative of theta as a constant matrix, entry (i,j) of
    /// d theta = d_i theta_j - d_j theta_i; equals omega_matrix() exactly.
    Mat d_theta_matrix() const {
        // theta_j(z) = z[n+j] for j < n else 0; d_i theta_j = delta_{i,n+j}
        Mat d = Mat::Zero(2 * n_, 2 * n_);
        for (int j = 0; j < n_; ++j) d(n_ + j, j) = 1.0;
        return d - d.transpose();
    }

private:
    int n_;
};

/// Hamiltonian vector field of H over the given canonical variables.
inline VectorFieldHandle hamiltonian_vector_field(const Expr& h,
                                                  const std::vector<std::string>& variables) {
    return VectorFieldHandle(h, variables);
}

/** Symbolic Poisson bracket {f,g} = sum_a (d_q f d_p g - d_p f d_q g). */
inline Expr poisson_bracket(const Expr& f, const Expr& g,
                            const std::vector<std::string>& variables) {
    namespace d = detail;
    const int n = static_cast<int>(variables.size()) / 2;
    Expr acc = Expr::constant(0.0);
    for (int a = 0; a < n; ++a) {
        const std::string& q = variables[static_cast<std::size_t>(a)];
        const std::string& p = variables[static_cast<std::size_t>(n + a)];
        Expr term = d::s_sub(d::s_mul(differentiate(f, q), differentiate(g, p)),
                             d::s_mul(differentiate(f, p), differentiate(g, q)));
        acc = d::s_add(acc, term);
    }
    return acc;
}

/// theta(zdot) = sum_a p_a qdot^a at the phase point z.
inline double liouville_integrand(const PhasePoint& z, const Vec& velocity) {
    const int n = static_cast<int>(z.size()) / 2;
    double s = 0.0;
    for (int a = 0; a < n; ++a) s += z[n + a] * velocity[a];
    return s;
}

} // namespace aacord

#endif // AACORD_SYMPLECTIC_HPP
