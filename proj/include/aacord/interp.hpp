#ifndef AACORD_INTERP_HPP
#define AACORD_INTERP_HPP

/** \file interp.hpp
    \brief Natural cubic splines and tensor-product tables on rectangular
           grids, used for action tables, lattice continuation data, and
           gauge-correction functions.
*/

#include <Eigen/Dense>

#include <stdexcept>
#include <vector>

namespace aacord {

/** Cubic spline through strictly increasing nodes with not-a-knot boundary
    conditions (fourth-order accurate up to the ends, unlike natural ends
    which bias curved data near the boundary). Evaluation outside the node
    range extrapolates linearly with the boundary slope. */
class CubicSpline {
public:
    CubicSpline() = default;

    CubicSpline(const Eigen::VectorXd& x, const Eigen::VectorXd& y) : x_(x), y_(y) {
        const Eigen::Index n = x.size();
        if (n < 2 || y.size() != n) throw std::invalid_argument("spline needs >= 2 nodes");
        for (Eigen::Index i = 1; i < n; ++i)
            if (x[i] <= x[i - 1]) throw std::invalid_argument("spline nodes must increase");
        m_ = Eigen::VectorXd::Zero(n);
        if (n == 2) return;   // degenerates to the chord
        if (n == 3) {
            // unique parabola: constant second derivative
            double h0 = x[1] - x[0], h1 = x[2] - x[1];
            double c = 2.0 * ((y[2] - y[1]) / h1 - (y[1] - y[0]) / h0) / (h0 + h1);
            m_.setConstant(c);
            return;
        }

        // interior equations for the second derivatives m_1..m_{n-2}, with
        // m_0 and m_{n-1} eliminated through the not-a-knot conditions
        //   m_0 = (1+r0) m_1 - r0 m_2,      r0 = h_0/h_1
        //   m_{n-1} = (1+r1) m_{n-2} - r1 m_{n-3},  r1 = h_{n-2}/h_{n-3}
        const Eigen::Index k = n - 2;
        Eigen::VectorXd a(k), b(k), c(k), d(k);
        for (Eigen::Index i = 1; i + 1 < n; ++i) {
            double hl = x[i] - x[i - 1], hr = x[i + 1] - x[i];
            a[i - 1] = hl / 6.0;
            b[i - 1] = (hl + hr) / 3.0;
            c[i - 1] = hr / 6.0;
            d[i - 1] = (y[i + 1] - y[i]) / hr - (y[i] - y[i - 1]) / hl;
        }
        {
            double r0 = (x_[1] - x_[0]) / (x_[2] - x_[1]);
            b[0] += a[0] * (1.0 + r0);
            c[0] -= a[0] * r0;
            a[0] = 0.0;
            double r1 = (x_[n - 1] - x_[n - 2]) / (x_[n - 2] - x_[n - 3]);
            b[k - 1] += c[k - 1] * (1.0 + r1);
            a[k - 1] -= c[k - 1] * r1;
            c[k - 1] = 0.0;
        }
        for (Eigen::Index i = 1; i < k; ++i) {
            double w = a[i] / b[i - 1];
            b[i] -= w * c[i - 1];
            d[i] -= w * d[i - 1];
        }
        Eigen::VectorXd sol(k);
        sol[k - 1] = d[k - 1] / b[k - 1];
        for (Eigen::Index i = k - 2; i >= 0; --i) sol[i] = (d[i] - c[i] * sol[i + 1]) / b[i];
        for (Eigen::Index i = 0; i < k; ++i) m_[i + 1] = sol[i];
        double r0 = (x_[1] - x_[0]) / (x_[2] - x_[1]);
        m_[0] = (1.0 + r0) * m_[1] - r0 * m_[2];
        double r1 = (x_[n - 1] - x_[n - 2]) / (x_[n - 2] - x_[n - 3]);
        m_[n - 1] = (1.0 + r1) * m_[n - 2] - r1 * m_[n - 3];
    }

    double value(double t) const {
        auto [i, h, u] = locate(t);
        if (u < 0.0) return y_[i] + slope_at_node(i) * (t - x_[i]);
        if (u > 1.0) return y_[i + 1] + slope_at_node(i + 1) * (t - x_[i + 1]);
        double A = 1.0 - u, B = u;
        return A * y_[i] + B * y_[i + 1] +
               ((A * A * A - A) * m_[i] + (B * B * B - B) * m_[i + 1]) * h * h / 6.0;
    }

    double derivative(double t) const {
        auto [i, h, u] = locate(t);
        if (u < 0.0) return slope_at_node(i);
        if (u > 1.0) return slope_at_node(i + 1);
        double A = 1.0 - u, B = u;
        return (y_[i + 1] - y_[i]) / h +
               ((3 * B * B - 1) * m_[i + 1] - (3 * A * A - 1) * m_[i]) * h / 6.0;
    }

private:
    std::tuple<Eigen::Index, double, double> locate(double t) const {
        const Eigen::Index n = x_.size();
        Eigen::Index lo = 0, hi = n - 1;
        if (t <= x_[0]) return {0, x_[1] - x_[0], (t - x_[0]) / (x_[1] - x_[0]) < 0 ? -1.0 : 0.0};
        if (t >= x_[n - 1])
            return {n - 2, x_[n - 1] - x_[n - 2],
                    (t - x_[n - 1]) > 0 ? 2.0 : 1.0};
        while (hi - lo > 1) {
            Eigen::Index mid = (lo + hi) / 2;
            (x_[mid] <= t ? lo : hi) = mid;
        }
        double h = x_[lo + 1] - x_[lo];
        return {lo, h, (t - x_[lo]) / h};
    }

    double slope_at_node(Eigen::Index i) const {
        const Eigen::Index n = x_.size();
        Eigen::Index seg = i < n - 1 ? i : n - 2;
        double h = x_[seg + 1] - x_[seg];
        double u = i < n - 1 ? 0.0 : 1.0;
        double A = 1.0 - u, B = u;
        return (y_[seg + 1] - y_[seg]) / h +
               ((3 * B * B - 1) * m_[seg + 1] - (3 * A * A - 1) * m_[seg]) * h / 6.0;
    }

    Eigen::VectorXd x_, y_, m_;
};

/** Scalar field on a tensor-product grid of dimension 1..4 with nested
    cubic-spline interpolation. Values are stored flat, last axis fastest. */
class TensorTable {
public:
    TensorTable() = default;

    TensorTable(std::vector<Eigen::VectorXd> axes, Eigen::VectorXd values)
        : axes_(std::move(axes)), values_(std::move(values)) {
        std::size_t total = 1;
        for (const auto& ax : axes_) total *= static_cast<std::size_t>(ax.size());
        if (total != static_cast<std::size_t>(values_.size()))
            throw std::invalid_argument("table size does not match its axes");
        if (axes_.empty() || axes_.size() > 4)
            throw std::invalid_argument("tensor table supports 1..4 axes");
    }

    bool empty() const { return axes_.empty(); }
    int dim() const { return static_cast<int>(axes_.size()); }
    const std::vector<Eigen::VectorXd>& axes() const { return axes_; }
    const Eigen::VectorXd& raw_values() const { return values_; }

    double value(const Eigen::VectorXd& p) const { return eval_rec(p, 0, 0, -1); }

    /// Partial derivative with respect to axis `d`.
    double derivative(const Eigen::VectorXd& p, int d) const { return eval_rec(p, 0, 0, d); }

private:
    // recursive separable evaluation; at level `axis` the block of values
    // starting at `offset` spans the remaining axes
    double eval_rec(const Eigen::VectorXd& p, std::size_t axis, std::size_t offset,
                    int deriv_axis) const {
        const auto& ax = axes_[axis];
        const std::size_t n = static_cast<std::size_t>(ax.size());
        if (axis + 1 == axes_.size()) {
            Eigen::VectorXd slice = values_.segment(static_cast<Eigen::Index>(offset),
                                                    static_cast<Eigen::Index>(n));
            CubicSpline sp(ax, slice);
            return deriv_axis == static_cast<int>(axis) ? sp.derivative(p[static_cast<Eigen::Index>(axis)])
                                                        : sp.value(p[static_cast<Eigen::Index>(axis)]);
        }
        std::size_t stride = 1;
        for (std::size_t a = axis + 1; a < axes_.size(); ++a)
            stride *= static_cast<std::size_t>(axes_[a].size());
        Eigen::VectorXd g(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i)
            g[static_cast<Eigen::Index>(i)] = eval_rec(p, axis + 1, offset + i * stride, deriv_axis);
        CubicSpline sp(ax, g);
        return deriv_axis == static_cast<int>(axis) ? sp.derivative(p[static_cast<Eigen::Index>(axis)])
                                                    : sp.value(p[static_cast<Eigen::Index>(axis)]);
    }

    std::vector<Eigen::VectorXd> axes_;
    Eigen::VectorXd values_;
};

} // namespace aacord

#endif // AACORD_INTERP_HPP
