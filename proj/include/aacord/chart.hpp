#ifndef AACORD_CHART_HPP
#define AACORD_CHART_HPP

/** \file chart.hpp
    \brief Construction of generalized action-angle coordinates
           (I_l, x^A, t^a, phi^i) on a domain of a certified system, with
           numerical verification of the canonical block structure and the
           action-angle equations of motion.

    Geometry of the construction:

      - The Casimir pull-backs P_l generate m commuting fiber flows; their
        values J = P(z) coordinatize the leaf space W.
      - The period lattice of the reference fiber fixes the compact
        directions; it is continued fiber-by-fiber over a J-grid, so each
        action cycle closes on its own fiber.
      - Actions: I_a = J'_a on noncompact directions (J' the reference
        re-mix), I_i = (1/2pi) . cycle integral of the Liouville form on
        compact directions, tabulated over the J-grid with cubic
        interpolation.
      - Transverse coordinates on 2-dimensional leaves are the conjugate
        pair (a, g): g the value of one selected integral G, a the flow
        time of X_G from a fixed section. Raw integral values cannot serve
        here: no time gauge makes Omega(dI, dx) vanish against them, while
        the conjugate pair admits one.
      - A gauge correction Delta(J, x), found by integrating the measured
        residual blocks of Omega and applied as a shift of (t, phi),
        removes the remaining dI^dx and dI^dI cross terms. This is the
        coordinate adjustment that finishes the canonical form; sections
        chosen by orthogonal slicing alone do not reach it.
*/

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "aacord/flow.hpp"
#include "aacord/interp.hpp"
#include "aacord/lattice.hpp"
#include "aacord/report.hpp"
#include "aacord/structure.hpp"
#include "aacord/symplectic.hpp"

namespace aacord {

class ChartError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ChartConfig {
    int j_grid_points = 17;        ///< action-table nodes per J-axis
    int x_grid_points = 9;         ///< gauge-correction nodes per leaf axis
    int corr_j_grid_points = 25;   ///< correction nodes per J-axis (Chebyshev-clustered)
    double fd_step = 1e-5;         ///< finite-difference step for block checks
    double block_tol = 1e-5;
    double roundtrip_tol = 1e-7;
    double action_quad_rel = 1e-9; ///< relative refinement target for action cycles
    double probe_window = 100.0;   ///< completeness probe horizon over the domain
    bool gauge_correction = true;
    SearchConfig lattice;          ///< reference-fiber lattice search
    FlowConfig flow;               ///< integrator settings for chart work
};

/// Point in chart coordinates: actions I (noncompact directions first),
/// transverse leaf coordinates x, flow times t, angles phi in [0, 2pi).
struct ChartPoint {
    Vec I;
    Vec x;
    Vec t;
    Vec phi;
};

/** Action integral over one compact cycle: (1/2pi) times the integral of
    the Liouville form along tau -> Phi_{tau u_i}(anchor), tau in [0,1].
    Composite Gauss-Legendre panels, refined until the relative change
    drops below rel_tol; the cycle must close on itself. */
inline double action_integral(std::span<const VectorFieldHandle> flows, const PeriodLattice& lat,
                              const PhasePoint& anchor, int i, double rel_tol = 1e-9,
                              const FlowConfig& fcfg = {}) {
    if (i < 0 || i >= lat.rank) throw std::invalid_argument("action_integral: bad cycle index");
    const Vec u = lat.basis.row(i);
    const int m = lat.m;

    // cycle closure
    PhasePoint round = flow_map(flows, std::span<const double>(u.data(), static_cast<std::size_t>(m)),
                                anchor, fcfg);
    double closure = (round - anchor).norm();
    if (closure > 10.0 * 1e-9 * (1.0 + anchor.norm()))
        throw ChartError("action cycle fails to close (defect " + std::to_string(closure) + ")");

    // 5-point Gauss-Legendre nodes on [0,1]
    static const double gl_x[5] = {0.04691007703066800, 0.23076534494715845, 0.5,
                                   0.76923465505284155, 0.95308992296933200};
    static const double gl_w[5] = {0.11846344252809454, 0.23931433524968324, 0.28444444444444444,
                                   0.23931433524968324, 0.11846344252809454};

    auto theta_rate = [&](const PhasePoint& z) {
        Vec zdot = Vec::Zero(z.size());
        for (int l = 0; l < m; ++l) zdot += u[l] * flows[static_cast<std::size_t>(l)](z);
        return liouville_integrand(z, zdot);
    };

    double prev = std::numeric_limits<double>::quiet_NaN();
    for (int panels = 4; panels <= 1024; panels *= 2) {
        // walk the cycle through the sorted Gauss nodes incrementally
        double acc = 0.0;
        double tau_prev = 0.0;
        PhasePoint z = anchor;
        for (int p = 0; p < panels; ++p) {
            double a = static_cast<double>(p) / panels;
            double w_panel = 1.0 / panels;
            for (int g = 0; g < 5; ++g) {
                double tau = a + gl_x[g] * w_panel;
                Vec ds = (tau - tau_prev) * u;
                z = flow_map(flows, std::span<const double>(ds.data(), static_cast<std::size_t>(m)),
                             z, fcfg);
                tau_prev = tau;
                acc += gl_w[g] * w_panel * theta_rate(z);
            }
        }
        if (std::isfinite(prev) && std::abs(acc - prev) <= rel_tol * std::abs(acc) + 1e-14)
            return acc / (2.0 * M_PI);
        prev = acc;
    }
    return prev / (2.0 * M_PI);
}

/** Generalized action-angle chart on a J-domain (and leaf domain where the
    system is noncommutative). Immutable once built; forward and inverse
    evaluations are pure. */
class Chart {
public:
    /** Assemble the chart: certify the structure hypotheses, select
        transverse coordinates, detect and continue the period lattice,
        tabulate actions, and (by default) build the gauge correction.

        j_domain is the box of Casimir values; x_domain the box of leaf
        coordinates (flow time of X_G, value of G), required exactly when
        2(n - m) = 2. Leaves of dimension > 2 are not supported. */
    static Chart build(const SystemDef& sys, const Box& j_domain, const Box& x_domain = {},
                       const ChartConfig& cfg = {}) {
        Chart c(sys, j_domain, x_domain, cfg);
        c.construct();
        return c;
    }

    int dof() const { return sys_.dof(); }
    int action_dim() const { return m_; }
    int compact_rank() const { return r_; }
    int leaf_dim() const { return nx_; }
    std::pair<int, int> signature() const { return {m_ - r_, r_}; }
    const SystemDef& system() const { return sys_; }
    const std::vector<int>& transverse_indices() const { return A_; }
    const Mat& reference_adapted_map() const { return t_ref_; }
    const PeriodLattice& reference_lattice() const { return lattice_ref_; }
    const Box& j_domain() const { return j_box_; }
    const Box& x_domain() const { return x_box_; }
    const Json& provenance() const { return provenance_; }
    const std::vector<VectorFieldHandle>& fiber_flows() const { return vfields_; }

    /// Casimir values J at a phase point.
    Vec j_values(const PhasePoint& z) const {
        Vec J(m_);
        for (int l = 0; l < m_; ++l) J[l] = vfields_[static_cast<std::size_t>(l)].generator_value(z);
        return J;
    }

    /// Actions I(J): noncompact rows are the fixed linear re-mix of J,
    /// compact rows come from the tabulated cycle integrals.
    Vec actions_from_j(const Vec& J) const {
        Vec I(m_);
        Vec jprime = t_ref_inv_.transpose() * J;
        for (int a = 0; a < m_ - r_; ++a) I[a] = jprime[a];
        for (int i = 0; i < r_; ++i)
            I[m_ - r_ + i] = action_tables_[static_cast<std::size_t>(i)].value(J);
        return I;
    }

    /// Inverse of the action map by damped Newton on the tabulated rows.
    Vec j_from_actions(const Vec& I) const {
        Vec J = j_box_.center();
        for (int it = 0; it < 60; ++it) {
            Vec f = actions_from_j(J) - I;
            if (f.lpNorm<Eigen::Infinity>() < 1e-12 * (1.0 + I.norm())) return J;
            Mat df = frequency_matrix(J);
            Vec step = df.fullPivLu().solve(f);
            double lambda = 1.0;
            for (int half = 0; half < 12; ++half) {
                Vec j_try = J - lambda * step;
                if ((actions_from_j(j_try) - I).norm() < f.norm()) {
                    J = j_try;
                    break;
                }
                lambda *= 0.5;
                if (half == 11) throw ChartError("action table inversion stalled");
            }
        }
        if ((actions_from_j(J) - I).lpNorm<Eigen::Infinity>() > 1e-9 * (1.0 + I.norm()))
            throw ChartError("action table inversion did not converge (I outside table?)");
        return J;
    }

    /// Full derivative dI/dJ (m x m): linear rows for noncompact actions,
    /// interpolation-table gradients for compact ones.
    Mat frequency_matrix(const Vec& J) const {
        Mat df(m_, m_);
        Mat lin = t_ref_inv_.transpose();
        for (int a = 0; a < m_ - r_; ++a) df.row(a) = lin.row(a);
        for (int i = 0; i < r_; ++i)
            for (int l = 0; l < m_; ++l)
                df(m_ - r_ + i, l) = action_tables_[static_cast<std::size_t>(i)].derivative(J, l);
        return df;
    }

    /** Forward map z -> (I, x, t, phi). Solves the commuting-flow shooting
        problem against the reference section. */
    ChartPoint forward(const PhasePoint& z) const { return forward_hinted(z, nullptr); }

    ChartPoint forward_hinted(const PhasePoint& z, const Vec* shoot_hint) const {
        Vec J = j_values(z);
        require_in_domain(J);

        PhasePoint spine = spine_at(J);
        Vec x(nx_);
        PhasePoint anchor0;
        if (nx_ == 2) {
            double g_val = field_G_.generator_value(z);
            x[1] = g_val;
            anchor0 = leaf_anchor_from(spine, g_val);
        } else {
            anchor0 = spine;
        }

        Vec su = solve_shooting(z, anchor0, J, shoot_hint);
        if (nx_ == 2) x[0] = su[m_];

        Vec s = su.head(m_);
        Vec yraw = gamma_at(J, &spine).fullPivLu().solve(s);   // (t-units, lattice-cycle units)
        ChartPoint w;
        w.I = actions_from_j(J);
        w.x = x;
        w.t = Vec(m_ - r_);
        w.phi = Vec(r_);
        Vec delta = correction_at(J, x);
        for (int a = 0; a < m_ - r_; ++a) w.t[a] = yraw[a] + delta[a];
        for (int i = 0; i < r_; ++i)
            w.phi[i] = wrap_angle(2.0 * M_PI * yraw[m_ - r_ + i] + delta[m_ - r_ + i]);
        return w;
    }

    /** Inverse map (I, x, t, phi) -> z: recover J, locate the section
        anchor, undo the gauge correction, and apply the group action. */
    PhasePoint inverse(const ChartPoint& w) const { return inverse_with_params(w, nullptr); }

    PhasePoint inverse_with_params(const ChartPoint& w, Vec* out_params) const {
        Vec J = j_from_actions(w.I);
        Vec x = w.x;
        PhasePoint spine = spine_at(J);
        PhasePoint anchor0 = nx_ == 2 ? leaf_anchor_from(spine, x[1]) : spine;

        Vec delta = correction_at(J, x);
        Vec yraw(m_);
        for (int a = 0; a < m_ - r_; ++a) yraw[a] = w.t[a] - delta[a];
        for (int i = 0; i < r_; ++i)
            yraw[m_ - r_ + i] = (w.phi[i] - delta[m_ - r_ + i]) / (2.0 * M_PI);
        Vec s = gamma_at(J, &spine) * yraw;

        // one combined integration: fiber flows plus the leaf flow X_G
        std::vector<double> params(static_cast<std::size_t>(m_) + (nx_ == 2 ? 1 : 0));
        for (int l = 0; l < m_; ++l) params[static_cast<std::size_t>(l)] = s[l];
        if (nx_ == 2) params.back() = x[0];
        if (out_params) {
            Vec p(static_cast<Eigen::Index>(params.size()));
            for (std::size_t i = 0; i < params.size(); ++i) p[static_cast<Eigen::Index>(i)] = params[i];
            *out_params = p;
        }
        return flow_map(shooting_fields(), params, anchor0, flow_);
    }

    /// Reference-section anchor of the fiber over J (leaf coordinates at
    /// their reference values).
    PhasePoint spine_at(const Vec& J) const { return spine_newton(J, nearest_node_spine(J)); }

    /// Lattice generators continued to the fiber over J (r x m).
    Mat lattice_at(const Vec& J) const {
        Mat u(r_, m_);
        for (int i = 0; i < r_; ++i)
            for (int l = 0; l < m_; ++l)
                u(i, l) = lattice_tables_[static_cast<std::size_t>(i) * m_ + l].value(J);
        return u;
    }

    Json metadata() const {
        Json j;
        j["action_dimension"] = m_;
        j["compact_rank"] = r_;
        j["signature"] = {{"noncompact", m_ - r_}, {"compact", r_}};
        j["transverse_indices"] = A_;
        if (nx_ == 2) j["leaf_pair"] = {{"flow_time_of", sys_.names()[static_cast<std::size_t>(idx_G_)]},
                                        {"paired_with", sys_.names()[static_cast<std::size_t>(idx_F_)]}};
        Json tr = Json::array();
        for (int i = 0; i < m_; ++i) {
            Json row = Json::array();
            for (int c = 0; c < m_; ++c) row.push_back(t_ref_(i, c));
            tr.push_back(row);
        }
        j["reference_adapted_map"] = tr;
        Json dom;
        dom["j_lo"] = std::vector<double>(j_box_.lo.data(), j_box_.lo.data() + j_box_.lo.size());
        dom["j_hi"] = std::vector<double>(j_box_.hi.data(), j_box_.hi.data() + j_box_.hi.size());
        if (nx_ == 2) {
            dom["x_lo"] = std::vector<double>(x_box_.lo.data(), x_box_.lo.data() + x_box_.lo.size());
            dom["x_hi"] = std::vector<double>(x_box_.hi.data(), x_box_.hi.data() + x_box_.hi.size());
        }
        j["domain"] = dom;
        j["gauge_correction"] = corrections_active_;
        j["provenance"] = provenance_;
        return j;
    }

    /// J-grid nodes and tabulated actions, for serialization.
    Json table_json() const {
        Json j;
        Json axes = Json::array();
        for (const auto& ax : j_axes_)
            axes.push_back(std::vector<double>(ax.data(), ax.data() + ax.size()));
        j["j_axes"] = axes;
        Json actions = Json::array();
        for (int i = 0; i < r_; ++i) {
            const auto& t = action_tables_[static_cast<std::size_t>(i)].raw_values();
            actions.push_back(std::vector<double>(t.data(), t.data() + t.size()));
        }
        j["compact_actions"] = actions;
        return j;
    }

private:
    Chart(const SystemDef& sys, const Box& j_domain, const Box& x_domain, const ChartConfig& cfg)
        : sys_(sys), cfg_(cfg), j_box_(j_domain), x_box_(x_domain) {
        flow_ = cfg.flow;
        flow_.rtol = std::min(flow_.rtol, 1e-12);
        flow_.atol = std::min(flow_.atol, 1e-14);
    }

    // ---------------------------------------------------------- construction

    void construct() {
        const int n = sys_.dof();
        m_ = sys_.fiber_dim();
        nx_ = 2 * (n - m_);
        if (!sys_.has_casimirs())
            throw ChartError("chart construction requires Casimir functions");
        if (nx_ != 0 && nx_ != 2)
            throw ChartError("transverse leaves of dimension " + std::to_string(nx_) +
                             " are not supported (only 0 and 2)");
        if (j_box_.dim() != m_) throw ChartError("J-domain dimension must equal 2n - k");
        if (nx_ == 2 && x_box_.dim() != 2)
            throw ChartError("leaf domain (flow time, G value) required for 2-dimensional leaves");

        // 1. structure certificates on the sampling box
        ResidualReport certs = validate_structure(sys_, "chart-preflight");
        provenance_["structure_certificates"] = certs.to_json();
        if (!certs.overall_pass())
            throw ChartError("structure certificates failed; chart refused");

        cas_ = CasimirSet::from_system(sys_);
        for (const auto& f : cas_->fields()) vfields_.push_back(f);

        auto samples = sample_regular_points(sys_);
        A_ = transverse_coordinates(sys_, *cas_, samples);

        // 2. leaf machinery: conjugate pair (flow time of X_G, value of G)
        if (nx_ == 2) {
            idx_F_ = A_[0];
            idx_G_ = A_[1];
            std::vector<std::pair<std::string, Expr>> sub;
            for (int i = 0; i < sys_.integral_count(); ++i)
                sub.emplace_back(sys_.names()[static_cast<std::size_t>(i)],
                                 sys_.integrals()[static_cast<std::size_t>(i)]);
            field_F_ = VectorFieldHandle(sys_.integrals()[static_cast<std::size_t>(idx_F_)],
                                         sys_.variables());
            field_G_ = VectorFieldHandle(sys_.integrals()[static_cast<std::size_t>(idx_G_)],
                                         sys_.variables());
            // the pair must be conjugate: {G, F} bounded away from zero
            Expr gf = poisson_bracket(sys_.integrals()[static_cast<std::size_t>(idx_G_)],
                                      sys_.integrals()[static_cast<std::size_t>(idx_F_)],
                                      sys_.variables());
            pair_bracket_ = CompiledExpr(gf, std::span<const std::string>(sys_.variables()));
            double worst = std::numeric_limits<double>::infinity();
            for (const auto& z : samples)
                worst = std::min(worst, std::abs(pair_bracket_.eval(
                                            std::span<const double>(z.data(), static_cast<std::size_t>(z.size())))));
            provenance_["leaf_pair_min_bracket"] = worst;
            if (worst < 1e-6)
                throw ChartError("selected transverse pair degenerates on the domain");
            shoot_fields_ = vfields_;
            shoot_fields_.push_back(field_G_);
        }

        // 3. reference-section slice: orthogonal complement of the flow
        //    directions at the reference point
        const PhasePoint& z0 = sys_.reference_point();
        z0_ = z0;
        g_ref_ = nx_ == 2 ? field_G_.generator_value(z0) : 0.0;
        {
            const int dim = 2 * n;
            int span_cols = m_ + (nx_ == 2 ? 1 : 0);
            Mat dirs(dim, span_cols);
            for (int l = 0; l < m_; ++l) dirs.col(l) = vfields_[static_cast<std::size_t>(l)](z0);
            if (nx_ == 2) dirs.col(m_) = field_G_(z0);
            Eigen::JacobiSVD<Mat> svd(dirs, Eigen::ComputeFullU);
            slice_basis_ = svd.matrixU().rightCols(dim - span_cols);
        }

        // 4. completeness probes over the domain corners
        {
            Json probes = Json::array();
            bool ok = true;
            std::vector<PhasePoint> probe_pts{z0};
            for (const auto& l : vfields_) {
                for (const auto& zp : probe_pts) {
                    ProbeReport rep = completeness_probe(l, zp, cfg_.probe_window, cfg_.flow);
                    Json pj;
                    pj["ok"] = rep.ok();
                    pj["window"] = rep.window;
                    pj["radius"] = rep.radius;
                    if (!rep.ok()) {
                        pj["escape_time"] = rep.escape_time;
                        ok = false;
                    }
                    probes.push_back(pj);
                }
            }
            provenance_["completeness_probes"] = probes;
            provenance_["completeness_window"] = cfg_.probe_window;
            if (!ok) throw ChartError("a fiber flow failed its completeness probe; chart refused");
        }

        // 5. reference lattice at the section anchor of the reference fiber
        Vec j_ref = j_values(z0);
        if (!j_box_.contains(j_ref, 1e-9))
            throw ChartError("reference point maps outside the J-domain");
        node_spines_.assign(1, z0);   // temporary seed for the first spine solve
        j_axes_.clear();
        PhasePoint ref_anchor = spine_newton(j_ref, z0);

        lattice_ref_ = detect_period_lattice(vfields_, ref_anchor, cfg_.lattice, cfg_.flow);
        r_ = lattice_ref_.rank;
        provenance_["reference_lattice"] = lattice_ref_.to_json();
        if (r_ > 0) {
            reorder_lattice_rows(lattice_ref_);
            t_ref_ = adapt_basis(lattice_ref_);
        } else {
            t_ref_ = Mat::Identity(m_, m_);
        }
        t_ref_inv_ = t_ref_.inverse();

        // 6. J-grid: spines, lattice continuation, compact actions
        build_axes();
        build_tables(ref_anchor, j_ref);

        // 7. invertibility of the action map at every node
        for (const Vec& J : enumerate_nodes()) {
            Mat df = frequency_matrix(J);
            if (std::abs(df.fullPivLu().determinant()) < 1e-12)
                throw ChartError("action map is degenerate at a grid node");
        }

        // 8. gauge correction from the measured residual blocks
        if (cfg_.gauge_correction) build_corrections();
    }

    void build_axes() {
        j_axes_.resize(static_cast<std::size_t>(m_));
        for (int l = 0; l < m_; ++l) {
            int npts = cfg_.j_grid_points;
            Vec ax(npts);
            for (int i = 0; i < npts; ++i)
                ax[i] = j_box_.lo[l] + (j_box_.hi[l] - j_box_.lo[l]) * i / (npts - 1);
            j_axes_[static_cast<std::size_t>(l)] = ax;
        }
    }

    std::vector<Vec> enumerate_nodes() const {
        std::vector<Vec> nodes;
        std::vector<int> idx(static_cast<std::size_t>(m_), 0);
        for (;;) {
            Vec J(m_);
            for (int l = 0; l < m_; ++l) J[l] = j_axes_[static_cast<std::size_t>(l)][idx[static_cast<std::size_t>(l)]];
            nodes.push_back(J);
            int l = m_ - 1;
            while (l >= 0 && ++idx[static_cast<std::size_t>(l)] ==
                                 j_axes_[static_cast<std::size_t>(l)].size()) {
                idx[static_cast<std::size_t>(l)] = 0;
                --l;
            }
            if (l < 0) break;
        }
        return nodes;
    }

    void build_tables(const PhasePoint& ref_anchor, const Vec& j_ref) {
        auto nodes = enumerate_nodes();
        const std::size_t count = nodes.size();
        node_spines_.assign(count, PhasePoint());
        std::vector<Mat> node_lattice(count);
        std::vector<Vec> node_actions(count);
        std::vector<PeriodLattice> node_full(count);
        (void)j_ref;

        // strides of the lexicographic enumeration, last axis fastest
        std::vector<std::size_t> stride(static_cast<std::size_t>(m_), 1);
        for (int l = m_ - 2; l >= 0; --l)
            stride[static_cast<std::size_t>(l)] =
                stride[static_cast<std::size_t>(l + 1)] *
                static_cast<std::size_t>(j_axes_[static_cast<std::size_t>(l + 1)].size());

        PeriodLattice ref_lat = lattice_ref_;
        ref_lat.anchor = ref_anchor;

        for (std::size_t idx = 0; idx < count; ++idx) {
            const Vec& J = nodes[idx];
            // continuation seed: the already-built node adjacent along the
            // innermost axis whose index is nonzero; the very first node
            // seeds from the reference fiber
            std::size_t seed_idx = count;   // sentinel: use the reference
            std::size_t rem = idx;
            for (int l = m_ - 1; l >= 0; --l) {
                std::size_t pos = (idx / stride[static_cast<std::size_t>(l)]) %
                                  static_cast<std::size_t>(j_axes_[static_cast<std::size_t>(l)].size());
                if (pos > 0) {
                    seed_idx = idx - stride[static_cast<std::size_t>(l)];
                    break;
                }
                (void)rem;
            }
            const PhasePoint& seed_spine = seed_idx < count ? node_spines_[seed_idx] : ref_anchor;
            const PeriodLattice& seed_lat = seed_idx < count ? node_full[seed_idx] : ref_lat;

            PhasePoint spine = spine_newton(J, seed_spine);
            node_spines_[idx] = spine;

            PeriodLattice lat_here;
            if (r_ > 0) {
                auto cont = continue_lattice(vfields_, spine, seed_lat, cfg_.lattice, cfg_.flow);
                if (!cont)
                    throw ChartError("lattice continuation failed across the domain "
                                     "(rank change or continuation step too large)");
                lat_here = *cont;
            } else {
                lat_here = lattice_ref_;
                lat_here.anchor = spine;
            }
            node_lattice[idx] = r_ > 0 ? lat_here.basis : Mat(0, m_);
            node_full[idx] = lat_here;

            Vec acts(r_);
            for (int i = 0; i < r_; ++i)
                acts[i] = action_integral(vfields_, lat_here, spine, i, cfg_.action_quad_rel, flow_);
            node_actions[idx] = acts;
        }

        action_tables_.clear();
        lattice_tables_.clear();
        for (int i = 0; i < r_; ++i) {
            Vec vals(static_cast<Eigen::Index>(count));
            for (std::size_t idx = 0; idx < count; ++idx) vals[static_cast<Eigen::Index>(idx)] = node_actions[idx][i];
            action_tables_.emplace_back(j_axes_, vals);
        }
        for (int i = 0; i < r_; ++i)
            for (int l = 0; l < m_; ++l) {
                Vec vals(static_cast<Eigen::Index>(count));
                for (std::size_t idx = 0; idx < count; ++idx)
                    vals[static_cast<Eigen::Index>(idx)] = node_lattice[idx](i, l);
                lattice_tables_.emplace_back(j_axes_, vals);
            }
    }

    /// Compact generators get chart labels aligned with the J-axes they
    /// chiefly rotate (dominant-column ordering); ties fall back to the
    /// detection order. This matches action indices to base coordinates.
    void reorder_lattice_rows(PeriodLattice& lat) const {
        std::vector<int> order(static_cast<std::size_t>(lat.rank));
        for (int i = 0; i < lat.rank; ++i) order[static_cast<std::size_t>(i)] = i;
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            int da = 0, db = 0;
            lat.basis.row(a).cwiseAbs().maxCoeff(&da);
            lat.basis.row(b).cwiseAbs().maxCoeff(&db);
            return da < db;
        });
        Mat nb(lat.rank, lat.m);
        std::vector<double> nr(static_cast<std::size_t>(lat.rank));
        for (int i = 0; i < lat.rank; ++i) {
            nb.row(i) = lat.basis.row(order[static_cast<std::size_t>(i)]);
            nr[static_cast<std::size_t>(i)] = lat.residuals[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        }
        lat.basis = nb;
        lat.residuals = nr;
    }

    // ------------------------------------------------------------- geometry

    /// Newton solve for the section point over J inside the affine slice.
    PhasePoint spine_newton(const Vec& J, const PhasePoint& seed) const {
        const int rows = m_ + (nx_ == 2 ? 1 : 0);
        // seed's slice coordinates
        Vec w = slice_basis_.transpose() * (seed - z0_);
        for (int it = 0; it < 80; ++it) {
            PhasePoint zeta = z0_ + slice_basis_ * w;
            Vec rho(rows);
            Mat grad(rows, 2 * sys_.dof());
            for (int l = 0; l < m_; ++l) {
                rho[l] = vfields_[static_cast<std::size_t>(l)].generator_value(zeta) - J[l];
                grad.row(l) = field_gradient(vfields_[static_cast<std::size_t>(l)], zeta);
            }
            if (nx_ == 2) {
                rho[m_] = field_G_.generator_value(zeta) - g_ref_;
                grad.row(m_) = field_gradient(field_G_, zeta);
            }
            if (rho.lpNorm<Eigen::Infinity>() < 1e-12 * (1.0 + J.norm())) return zeta;
            Mat jac = grad * slice_basis_;   // square rows x rows
            Vec step = jac.fullPivLu().solve(rho);
            if (!step.allFinite()) break;
            double lambda = 1.0;
            bool moved = false;
            for (int half = 0; half < 10; ++half) {
                Vec w_try = w - lambda * step;
                PhasePoint z_try = z0_ + slice_basis_ * w_try;
                Vec rho_try(rows);
                bool ok = true;
                try {
                    for (int l = 0; l < m_; ++l)
                        rho_try[l] = vfields_[static_cast<std::size_t>(l)].generator_value(z_try) - J[l];
                    if (nx_ == 2) rho_try[m_] = field_G_.generator_value(z_try) - g_ref_;
                } catch (const EvalError&) {
                    ok = false;
                }
                if (ok && rho_try.norm() < rho.norm()) {
                    w = w_try;
                    moved = true;
                    break;
                }
                lambda *= 0.5;
            }
            if (!moved) break;
        }
        throw ChartError("section anchor solve failed to converge over the requested fiber");
    }

    /// Gradient of a field's generating function via the component formula:
    /// X = (dH/dp, -dH/dq), so grad H = (-pdot, qdot).
    static Vec field_gradient(const VectorFieldHandle& f, const PhasePoint& z) {
        const int n = f.dof();
        Vec v = f(z);
        Vec g(2 * n);
        for (int a = 0; a < n; ++a) {
            g[a] = -v[n + a];
            g[n + a] = v[a];
        }
        return g;
    }

    PhasePoint nearest_node_spine(const Vec& J) const {
        if (node_spines_.size() <= 1 || j_axes_.empty()) return node_spines_.front();
        // locate the nearest grid node index
        std::size_t flat = 0;
        for (int l = 0; l < m_; ++l) {
            const Vec& ax = j_axes_[static_cast<std::size_t>(l)];
            Eigen::Index best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (Eigen::Index i = 0; i < ax.size(); ++i) {
                double d = std::abs(ax[i] - J[l]);
                if (d < bd) {
                    bd = d;
                    best = i;
                }
            }
            flat = flat * static_cast<std::size_t>(ax.size()) + static_cast<std::size_t>(best);
        }
        return node_spines_[std::min(flat, node_spines_.size() - 1)];
    }

    /// Anchor of the leaf point (flow time 0, value g) on the fiber of the
    /// given spine: 1-D Newton along the X_F orbit.
    PhasePoint leaf_anchor_from(const PhasePoint& spine, double g_target) const {
        double b = 0.0;
        PhasePoint zb = spine;
        for (int it = 0; it < 60; ++it) {
            double g = field_G_.generator_value(zb);
            double res = g - g_target;
            if (std::abs(res) < 1e-12 * (1.0 + std::abs(g_target))) return zb;
            double rate = pair_bracket_.eval(
                std::span<const double>(zb.data(), static_cast<std::size_t>(zb.size())));
            if (std::abs(rate) < 1e-10)
                throw ChartError("leaf anchor solve degenerate: {G,F} vanished");
            double step = res / rate;
            double lambda = 1.0;
            for (int half = 0; half < 10; ++half) {
                double b_try = b - lambda * step;
                PhasePoint z_try = flow_map(field_F_, b_try, spine, flow_);
                if (std::abs(field_G_.generator_value(z_try) - g_target) < std::abs(res)) {
                    b = b_try;
                    zb = z_try;
                    break;
                }
                lambda *= 0.5;
                if (half == 9) throw ChartError("leaf anchor solve stalled");
            }
        }
        throw ChartError("leaf anchor solve did not converge");
    }

    std::span<const VectorFieldHandle> shooting_fields() const {
        return nx_ == 2 ? std::span<const VectorFieldHandle>(shoot_fields_)
                        : std::span<const VectorFieldHandle>(vfields_);
    }

    /// Gauss-Newton shooting: solve Phi_s Psi^G_a (anchor) = z for (s, a).
    Vec solve_shooting(const PhasePoint& z, const PhasePoint& anchor, const Vec& J,
                       const Vec* hint = nullptr) const {
        auto fields = shooting_fields();
        const int nu = static_cast<int>(fields.size());
        const double tol = 1e-11 * (1.0 + z.norm());

        auto attempt = [&](Vec u) -> std::optional<Vec> {
            double best = std::numeric_limits<double>::infinity();
            for (int it = 0; it < 60; ++it) {
                PhasePoint w;
                try {
                    w = flow_map(fields, std::span<const double>(u.data(), static_cast<std::size_t>(nu)),
                                 anchor, flow_);
                } catch (const FlowError&) {
                    return std::nullopt;
                }
                Vec f = w - z;
                double norm = f.norm();
                if (norm < tol) return u;
                if (norm > 10.0 * best + 1.0) return std::nullopt;
                best = std::min(best, norm);
                Mat jac(z.size(), nu);
                for (int c = 0; c < nu; ++c) jac.col(c) = fields[static_cast<std::size_t>(c)](w);
                Vec step = jac.completeOrthogonalDecomposition().solve(f);
                if (!step.allFinite()) return std::nullopt;
                double lambda = 1.0;
                bool moved = false;
                for (int half = 0; half < 10; ++half) {
                    Vec u_try = u - lambda * step;
                    try {
                        PhasePoint w_try = flow_map(
                            fields, std::span<const double>(u_try.data(), static_cast<std::size_t>(nu)),
                            anchor, flow_);
                        double n_try = (w_try - z).norm();
                        if (n_try < norm) {
                            u = u_try;
                            moved = true;
                            break;
                        }
                    } catch (const FlowError&) {
                    }
                    lambda *= 0.5;
                }
                if (!moved) return std::nullopt;
            }
            return std::nullopt;
        };

        if (hint && hint->size() == nu)
            if (auto hit = attempt(*hint)) return *hit;
        if (auto hit = attempt(Vec::Zero(nu))) return *hit;

        // multi-start over the compact cell (and a few leaf times)
        Mat u_here = r_ > 0 ? lattice_at(J) : Mat(0, m_);
        std::vector<Vec> seeds;
        std::vector<int> ticks(static_cast<std::size_t>(r_), 0);
        for (;;) {
            Vec s0 = Vec::Zero(nu);
            for (int i = 0; i < r_; ++i)
                s0.head(m_) += (ticks[static_cast<std::size_t>(i)] / 8.0) * u_here.row(i).transpose();
            seeds.push_back(s0);
            int i = r_ - 1;
            while (i >= 0 && ++ticks[static_cast<std::size_t>(i)] == 8) {
                ticks[static_cast<std::size_t>(i)] = 0;
                --i;
            }
            if (i < 0) break;
            if (seeds.size() > 64) break;
        }
        if (nx_ == 2 && x_box_.dim() == 2) {
            std::vector<Vec> widened;
            for (const Vec& s0 : seeds)
                for (double afrac : {0.0, -0.5, 0.5}) {
                    Vec u2 = s0;
                    u2[nu - 1] = x_box_.lo[0] + (0.5 + afrac * 0.9) * (x_box_.hi[0] - x_box_.lo[0]);
                    widened.push_back(u2);
                }
            seeds = std::move(widened);
        }
        // rank seeds by their raw residual, refine the most promising first
        std::vector<std::pair<double, Vec>> ranked;
        for (const Vec& s0 : seeds) {
            try {
                PhasePoint w = flow_map(fields,
                                        std::span<const double>(s0.data(), static_cast<std::size_t>(nu)),
                                        anchor, flow_);
                ranked.emplace_back((w - z).norm(), s0);
            } catch (const FlowError&) {
            }
        }
        std::sort(ranked.begin(), ranked.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        for (std::size_t i = 0; i < std::min<std::size_t>(ranked.size(), 12); ++i)
            if (auto hit = attempt(ranked[i].second)) return *hit;
        throw ChartError("shooting solve failed: point unreachable from the reference section "
                         "(disconnected fiber or domain violation)");
    }

    /// Per-fiber group parametrization: columns are the fixed reference
    /// complement followed by the continued lattice generators. When an
    /// on-fiber anchor is supplied, the interpolated generators are polished
    /// by Gauss-Newton so the cycles close to return tolerance (the tables
    /// then act as seeds; angle periodicity holds to solver accuracy).
    Mat gamma_at(const Vec& J, const PhasePoint* anchor = nullptr) const {
        Mat gamma = t_ref_inv_;
        if (r_ > 0) {
            Mat u = lattice_at(J);
            if (anchor) {
                for (int i = 0; i < r_; ++i) {
                    Vec row = u.row(i);
                    auto polished = detail::refine_return(vfields_, *anchor, row, cfg_.lattice, flow_);
                    if (polished && (*polished - row).norm() < 0.25 * row.norm())
                        u.row(i) = *polished;
                }
            }
            for (int i = 0; i < r_; ++i) gamma.col(m_ - r_ + i) = u.row(i).transpose();
        }
        return gamma;
    }

    static double wrap_angle(double phi) {
        double w = std::fmod(phi, 2.0 * M_PI);
        if (w < 0) w += 2.0 * M_PI;
        return w;
    }

    void require_in_domain(const Vec& J) const {
        double slack = 0.0;
        for (int l = 0; l < m_; ++l) slack = std::max(slack, 1e-3 * (j_box_.hi[l] - j_box_.lo[l]));
        if (!j_box_.contains(J, slack))
            throw ChartError("phase point maps outside the chart's J-domain");
    }

    // ------------------------------------------------------ gauge correction

    /// Correction shift of (t, phi-in-radians) at (J, x); zero until built.
    Vec correction_at(const Vec& J, const Vec& x) const {
        Vec delta = Vec::Zero(m_);
        if (!corrections_active_) return delta;
        for (int l = 0; l < m_; ++l) {
            if (!corr_x_[static_cast<std::size_t>(l)].empty()) {
                Vec p(m_ + 2);
                p.head(m_) = J;
                p[m_] = x[0];
                p[m_ + 1] = x[1];
                delta[l] += corr_x_[static_cast<std::size_t>(l)].value(p);
            }
            if (!corr_j_[static_cast<std::size_t>(l)].empty())
                delta[l] += corr_j_[static_cast<std::size_t>(l)].value(J);
        }
        return delta;
    }

    /// Chart-point vector layout used for block measurements: [I; x; t; phi].
    Vec pack(const ChartPoint& w) const {
        Vec v(2 * sys_.dof());
        v.head(m_) = w.I;
        for (int a = 0; a < nx_; ++a) v[m_ + a] = w.x[a];
        for (int a = 0; a < m_ - r_; ++a) v[m_ + nx_ + a] = w.t[a];
        for (int i = 0; i < r_; ++i) v[m_ + nx_ + (m_ - r_) + i] = w.phi[i];
        return v;
    }

    /// Pulled-back Omega matrix in chart coordinates at z, via a central
    /// finite-difference Jacobian of the forward map (angles unwrapped).
    Mat omega_in_chart(const PhasePoint& z, const Vec* shoot_hint = nullptr) const {
        const int dim = 2 * sys_.dof();
        Mat jac(dim, dim);
        for (int c = 0; c < dim; ++c) {
            double h = cfg_.fd_step * (1.0 + std::abs(z[c]));
            PhasePoint zp = z, zm = z;
            zp[c] += h;
            zm[c] -= h;
            Vec wp = pack(forward_hinted(zp, shoot_hint));
            Vec wm = pack(forward_hinted(zm, shoot_hint));
            Vec diff = wp - wm;
            for (int i = 0; i < r_; ++i) {
                int row = m_ + nx_ + (m_ - r_) + i;
                double d = diff[row];
                d = std::remainder(d, 2.0 * M_PI);
                diff[row] = d;
            }
            jac.col(c) = diff / (2.0 * h);
        }
        SymplecticStructure st(sys_.dof());
        Mat jinv = jac.fullPivLu().inverse();
        return jinv.transpose() * st.omega_matrix() * jinv;
    }

    /// Chebyshev-Lobatto nodes cluster where spline curvature concentrates;
    /// corrections often carry 1/J-type profiles, so the correction grid
    /// uses clustered J-axes (uniform ones would need far more nodes).
    static Vec make_axis(double lo, double hi, int n, bool clustered) {
        Vec ax(n);
        for (int i = 0; i < n; ++i) {
            double u = static_cast<double>(i) / (n - 1);
            if (clustered) u = 0.5 * (1.0 - std::cos(M_PI * u));
            ax[i] = lo + u * (hi - lo);
        }
        return ax;
    }

    static std::vector<Vec> enumerate_over(const std::vector<Vec>& axes) {
        std::vector<Vec> nodes;
        std::vector<Eigen::Index> idx(axes.size(), 0);
        for (;;) {
            Vec p(static_cast<Eigen::Index>(axes.size()));
            for (std::size_t l = 0; l < axes.size(); ++l) p[static_cast<Eigen::Index>(l)] = axes[l][idx[l]];
            nodes.push_back(p);
            int l = static_cast<int>(axes.size()) - 1;
            while (l >= 0 && ++idx[static_cast<std::size_t>(l)] == axes[static_cast<std::size_t>(l)].size()) {
                idx[static_cast<std::size_t>(l)] = 0;
                --l;
            }
            if (l < 0) break;
        }
        return nodes;
    }

    /** Measure the residual blocks Omega(dI, dx) on the (J-grid x x-grid)
        of section points and Omega(dI, dI) on the J-grid, integrate them to
        the shift Delta(J, x), and activate the correction. */
    void build_corrections() {
        corr_x_.assign(static_cast<std::size_t>(m_), TensorTable());
        corr_j_.assign(static_cast<std::size_t>(m_), TensorTable());
        corrections_active_ = false;

        // dedicated correction grid: dense and clustered for one J-axis,
        // moderate for several (the table dimension grows with m)
        std::vector<Vec> corr_axes(static_cast<std::size_t>(m_));
        const int jn = m_ == 1 ? cfg_.corr_j_grid_points : std::min(9, cfg_.j_grid_points);
        for (int l = 0; l < m_; ++l)
            corr_axes[static_cast<std::size_t>(l)] = make_axis(j_box_.lo[l], j_box_.hi[l], jn, true);
        auto nodes = enumerate_over(corr_axes);
        double closure_defect = 0.0;

        if (nx_ == 2) {
            // x-axes centred on the reference leaf values (0, g_ref)
            const int xn = m_ == 1 ? cfg_.x_grid_points : std::min(7, cfg_.x_grid_points);
            Vec ax1(xn), ax2(xn);
            for (int i = 0; i < xn; ++i) {
                double u = static_cast<double>(i) / (xn - 1);
                ax1[i] = x_box_.lo[0] + u * (x_box_.hi[0] - x_box_.lo[0]);
                ax2[i] = x_box_.lo[1] + u * (x_box_.hi[1] - x_box_.lo[1]);
            }
            const int nx1 = static_cast<int>(ax1.size()), nx2 = static_cast<int>(ax2.size());
            // reference indices: nodes nearest to (0, g_ref)
            int i0 = 0, j0 = 0;
            for (int i = 1; i < nx1; ++i)
                if (std::abs(ax1[i]) < std::abs(ax1[i0])) i0 = i;
            for (int j = 1; j < nx2; ++j)
                if (std::abs(ax2[j] - g_ref_) < std::abs(ax2[j0] - g_ref_)) j0 = j;

            const std::size_t per_node = static_cast<std::size_t>(nx1) * nx2;
            std::vector<Vec> delta_flat(static_cast<std::size_t>(m_),
                                        Vec::Zero(static_cast<Eigen::Index>(nodes.size() * per_node)));

            for (std::size_t nidx = 0; nidx < nodes.size(); ++nidx) {
                const Vec& J = nodes[nidx];
                // R[mu](i,j, A): Omega(dI_mu, dx_A) at section point (J, x_ij)
                std::vector<Mat> r0(static_cast<std::size_t>(m_), Mat(nx1, nx2));
                std::vector<Mat> r1(static_cast<std::size_t>(m_), Mat(nx1, nx2));
                for (int i = 0; i < nx1; ++i)
                    for (int j = 0; j < nx2; ++j) {
                        ChartPoint w;
                        w.I = actions_from_j(J);
                        w.x = Vec(2);
                        w.x << ax1[i], ax2[j];
                        w.t = Vec::Zero(m_ - r_);
                        w.phi = Vec::Zero(r_);
                        Vec hint;
                        PhasePoint zs = inverse_with_params(w, &hint);
                        Mat om = omega_in_chart(zs, &hint);
                        for (int mu = 0; mu < m_; ++mu) {
                            r0[static_cast<std::size_t>(mu)](i, j) = om(mu, m_ + 0);
                            r1[static_cast<std::size_t>(mu)](i, j) = om(mu, m_ + 1);
                        }
                    }
                // closedness of R dx (exactness diagnostic)
                for (int mu = 0; mu < m_; ++mu)
                    for (int i = 0; i + 1 < nx1; ++i)
                        for (int j = 0; j + 1 < nx2; ++j) {
                            double d1 = (r0[static_cast<std::size_t>(mu)](i, j + 1) -
                                         r0[static_cast<std::size_t>(mu)](i, j)) /
                                        (ax2[j + 1] - ax2[j]);
                            double d2 = (r1[static_cast<std::size_t>(mu)](i + 1, j) -
                                         r1[static_cast<std::size_t>(mu)](i, j)) /
                                        (ax1[i + 1] - ax1[i]);
                            closure_defect = std::max(closure_defect, std::abs(d1 - d2));
                        }
                // path integral from (i0, j0): along x1 at j0, then along x2
                for (int mu = 0; mu < m_; ++mu) {
                    Mat delta(nx1, nx2);
                    delta(i0, j0) = 0.0;
                    for (int i = i0 + 1; i < nx1; ++i)
                        delta(i, j0) = delta(i - 1, j0) +
                                       0.5 * (r0[static_cast<std::size_t>(mu)](i - 1, j0) +
                                              r0[static_cast<std::size_t>(mu)](i, j0)) *
                                           (ax1[i] - ax1[i - 1]);
                    for (int i = i0 - 1; i >= 0; --i)
                        delta(i, j0) = delta(i + 1, j0) -
                                       0.5 * (r0[static_cast<std::size_t>(mu)](i + 1, j0) +
                                              r0[static_cast<std::size_t>(mu)](i, j0)) *
                                           (ax1[i + 1] - ax1[i]);
                    for (int i = 0; i < nx1; ++i) {
                        for (int j = j0 + 1; j < nx2; ++j)
                            delta(i, j) = delta(i, j - 1) +
                                          0.5 * (r1[static_cast<std::size_t>(mu)](i, j - 1) +
                                                 r1[static_cast<std::size_t>(mu)](i, j)) *
                                              (ax2[j] - ax2[j - 1]);
                        for (int j = j0 - 1; j >= 0; --j)
                            delta(i, j) = delta(i, j + 1) -
                                          0.5 * (r1[static_cast<std::size_t>(mu)](i, j + 1) +
                                                 r1[static_cast<std::size_t>(mu)](i, j)) *
                                              (ax2[j + 1] - ax2[j]);
                    }
                    for (int i = 0; i < nx1; ++i)
                        for (int j = 0; j < nx2; ++j)
                            delta_flat[static_cast<std::size_t>(mu)]
                                      [static_cast<Eigen::Index>(nidx * per_node +
                                                                 static_cast<std::size_t>(i) * nx2 + j)] =
                                delta(i, j);
                }
            }
            std::vector<Vec> axes = corr_axes;
            axes.push_back(ax1);
            axes.push_back(ax2);
            for (int mu = 0; mu < m_; ++mu)
                corr_x_[static_cast<std::size_t>(mu)] =
                    TensorTable(axes, delta_flat[static_cast<std::size_t>(mu)]);
        }
        provenance_["gauge_correction_closure_defect"] = closure_defect;

        // dI ^ dI block over the J-grid, measured on the reference leaf line
        // where the x-part of the shift vanishes identically (so the order
        // of the two corrections does not matter there)
        if (m_ >= 2) {
            std::vector<Vec> qflat(static_cast<std::size_t>(m_ * m_),
                                   Vec::Zero(static_cast<Eigen::Index>(nodes.size())));
            for (std::size_t nidx = 0; nidx < nodes.size(); ++nidx) {
                const Vec& J = nodes[nidx];
                ChartPoint w;
                w.I = actions_from_j(J);
                w.x = Vec(nx_);
                if (nx_ == 2) w.x << 0.0, g_ref_;
                w.t = Vec::Zero(m_ - r_);
                w.phi = Vec::Zero(r_);
                Vec hint;
                PhasePoint zs = inverse_with_params(w, &hint);
                Mat om = omega_in_chart(zs, &hint);
                for (int a = 0; a < m_; ++a)
                    for (int b = 0; b < m_; ++b)
                        qflat[static_cast<std::size_t>(a * m_ + b)][static_cast<Eigen::Index>(nidx)] =
                            om(a, b);
            }
            std::vector<TensorTable> qtab;
            for (int a = 0; a < m_ * m_; ++a)
                qtab.emplace_back(corr_axes, qflat[static_cast<std::size_t>(a)]);

            // homotopy potential in action space: Delta^mu(I) =
            //   -int_0^1 sigma Q_{lmu}(I0 + sigma (I-I0)) (I-I0)^l dsigma
            Vec j_center = j_box_.center();
            Vec i_center = actions_from_j(j_center);
            static const double gx[5] = {0.04691007703066800, 0.23076534494715845, 0.5,
                                         0.76923465505284155, 0.95308992296933200};
            static const double gw[5] = {0.11846344252809454, 0.23931433524968324,
                                         0.28444444444444444, 0.23931433524968324,
                                         0.11846344252809454};
            std::vector<Vec> dj(static_cast<std::size_t>(m_),
                                Vec::Zero(static_cast<Eigen::Index>(nodes.size())));
            for (std::size_t nidx = 0; nidx < nodes.size(); ++nidx) {
                Vec I = actions_from_j(nodes[nidx]);
                Vec di = I - i_center;
                for (int mu = 0; mu < m_; ++mu) {
                    double acc = 0.0;
                    for (int g = 0; g < 5; ++g) {
                        Vec i_sig = i_center + gx[g] * di;
                        Vec j_sig;
                        try {
                            j_sig = j_from_actions(i_sig);
                        } catch (const ChartError&) {
                            continue;
                        }
                        for (int l = 0; l < m_; ++l)
                            acc += gw[g] * gx[g] *
                                   qtab[static_cast<std::size_t>(l * m_ + mu)].value(j_sig) * di[l];
                    }
                    dj[static_cast<std::size_t>(mu)][static_cast<Eigen::Index>(nidx)] = -acc;
                }
            }
            for (int mu = 0; mu < m_; ++mu)
                corr_j_[static_cast<std::size_t>(mu)] =
                    TensorTable(corr_axes, dj[static_cast<std::size_t>(mu)]);
        }
        corrections_active_ = true;
    }

    // ---------------------------------------------------------------- state

    SystemDef sys_;
    ChartConfig cfg_;
    FlowConfig flow_;
    Box j_box_, x_box_;

    std::optional<CasimirSet> cas_;
    std::vector<VectorFieldHandle> vfields_;
    std::vector<VectorFieldHandle> shoot_fields_;
    int m_ = 0, r_ = 0, nx_ = 0;
    std::vector<int> A_;
    int idx_F_ = -1, idx_G_ = -1;
    VectorFieldHandle field_F_, field_G_;
    CompiledExpr pair_bracket_;
    double g_ref_ = 0.0;

    PhasePoint z0_;
    Mat slice_basis_;
    PeriodLattice lattice_ref_;
    Mat t_ref_, t_ref_inv_;

    std::vector<Vec> j_axes_;
    std::vector<PhasePoint> node_spines_;
    std::vector<TensorTable> action_tables_;    // r tables over J
    std::vector<TensorTable> lattice_tables_;   // r*m tables over J

    std::vector<TensorTable> corr_x_;           // m tables over (J, x1, x2)
    std::vector<TensorTable> corr_j_;           // m tables over J
    bool corrections_active_ = false;

    Json provenance_ = Json::object();

    friend CheckRecord verify_canonical_blocks(const Chart&, const std::vector<PhasePoint>&,
                                               double);
};

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/** Pull the canonical form into chart coordinates at each sample and check
    the block structure: Omega(dI_l, dy'^mu) = delta, Omega(dy', dy') = 0,
    Omega(dy', dx) = 0, Omega(dI, dI) = 0, and (Casimir charts) also
    Omega(dI, dx) = 0. The dx^dx block is reported with its conditioning,
    not constrained. */
inline CheckRecord verify_canonical_blocks(const Chart& chart,
                                           const std::vector<PhasePoint>& samples,
                                           double tol = 1e-5) {
    CheckRecord rec;
    rec.name = "canonical_blocks";
    rec.anchor = "symplectic form reduces to dI ^ dy' plus a transverse block in chart coordinates";
    rec.tolerance = tol;
    rec.sample_count = static_cast<int>(samples.size());
    rec.assumed = {"fibers connected and mutually diffeomorphic over the domain",
                   "completeness accepted from finite-window probes"};

    const int m = chart.action_dim();
    const int nx = chart.leaf_dim();
    double worst_delta = 0.0, worst_yy = 0.0, worst_yx = 0.0, worst_ii = 0.0, worst_ix = 0.0;
    double min_xx_sv = std::numeric_limits<double>::infinity();
    int skipped = 0;

    for (const auto& z : samples) {
        Mat om;
        try {
            om = chart.omega_in_chart(z);
        } catch (const std::exception& e) {
            ++skipped;
            rec.details["skipped_samples"].push_back(e.what());
            continue;
        }
        auto iblk = [&](int a) { return a; };
        auto xblk = [&](int a) { return m + a; };
        auto yblk = [&](int a) { return m + nx + a; };

        for (int a = 0; a < m; ++a)
            for (int b = 0; b < m; ++b) {
                worst_delta = std::max(worst_delta,
                                       std::abs(om(iblk(a), yblk(b)) - (a == b ? 1.0 : 0.0)));
                worst_yy = std::max(worst_yy, std::abs(om(yblk(a), yblk(b))));
                worst_ii = std::max(worst_ii, std::abs(om(iblk(a), iblk(b))));
            }
        for (int a = 0; a < m; ++a)
            for (int c = 0; c < nx; ++c) {
                worst_yx = std::max(worst_yx, std::abs(om(yblk(a), xblk(c))));
                worst_ix = std::max(worst_ix, std::abs(om(iblk(a), xblk(c))));
            }
        if (nx > 0) {
            Mat xx(nx, nx);
            for (int a = 0; a < nx; ++a)
                for (int b = 0; b < nx; ++b) xx(a, b) = om(xblk(a), xblk(b));
            Eigen::JacobiSVD<Mat> svd(xx);
            min_xx_sv = std::min(min_xx_sv, svd.singularValues()[nx - 1]);
        }
    }

    rec.details["delta_block"] = worst_delta;
    rec.details["yy_block"] = worst_yy;
    rec.details["yx_block"] = worst_yx;
    rec.details["II_block"] = worst_ii;
    rec.details["Ix_block"] = worst_ix;
    if (nx > 0) rec.details["xx_block_min_singular_value"] = min_xx_sv;
    if (skipped) rec.details["skipped"] = skipped;

    rec.max_residual = std::max({worst_delta, worst_yy, worst_yx, worst_ii, worst_ix});
    rec.pass = skipped < static_cast<int>(samples.size()) && rec.max_residual < tol;
    return rec;
}

/** Equations of motion in chart coordinates for a Hamiltonian that is a
    function of the actions alone: I and x stay fixed, y' advances linearly
    with slope dH/dI. The action-only property is itself checked first. */
inline CheckRecord verify_equations_of_motion(const Chart& chart, const Expr& hamiltonian,
                                              const PhasePoint& z0, double t_max,
                                              double slope_rel_tol = 1e-4,
                                              double conserved_tol = 1e-6) {
    CheckRecord rec;
    rec.name = "equations_of_motion";
    rec.anchor = "action-angle equations of motion: dy'/dt = dH/dI with I, x constant";
    rec.tolerance = slope_rel_tol;

    const auto& sys = chart.system();
    VectorFieldHandle xh(hamiltonian, sys.variables());
    const int m = chart.action_dim();
    const int r = chart.compact_rank();

    // 1. H must be a function of the actions alone: vary x and y' on a few
    //    fibers and watch the value
    {
        double worst = 0.0;
        ChartPoint w0 = chart.forward(z0);
        for (double fj : {0.15, 0.5, 0.85}) {
            ChartPoint w = w0;
            Vec jprobe = chart.j_domain().lo + fj * (chart.j_domain().hi - chart.j_domain().lo);
            w.I = chart.actions_from_j(jprobe);
            PhasePoint base = chart.inverse(w);
            double h0 = xh.generator_value(base);
            for (int variant = 0; variant < 6; ++variant) {
                ChartPoint wv = w;
                for (int a = 0; a < m - r; ++a) wv.t[a] += 0.2 * (variant + 1) / 6.0;
                for (int i = 0; i < r; ++i)
                    wv.phi[i] = std::fmod(wv.phi[i] + 2.0 * M_PI * (variant + 1) / 7.0, 2.0 * M_PI);
                if (chart.leaf_dim() == 2) {
                    double fx = (variant % 3 - 1) * 0.2;
                    wv.x[0] = w.x[0] + fx * (chart.x_domain().hi[0] - chart.x_domain().lo[0]) / 4.0;
                    wv.x[1] = w.x[1] + fx * (chart.x_domain().hi[1] - chart.x_domain().lo[1]) / 4.0;
                }
                worst = std::max(worst, std::abs(xh.generator_value(chart.inverse(wv)) - h0) /
                                            (1.0 + std::abs(h0)));
            }
        }
        rec.details["action_only_regression_residual"] = worst;
        if (worst > conserved_tol) {
            rec.pass = false;
            rec.max_residual = worst;
            rec.details["failure"] = "hamiltonian is not a function of the actions alone";
            return rec;
        }
    }

    // 2. integrate and map the trajectory through the chart
    FlowConfig fcfg;
    fcfg.rtol = 1e-12;
    fcfg.atol = 1e-14;
    const double dt = t_max / 48.0;
    auto traj = flow_trajectory(xh, z0, t_max, dt, fcfg);

    ChartPoint w0 = chart.forward(z0);
    const int ny = m;
    Mat ys(static_cast<Eigen::Index>(traj.size()), ny);
    Vec ts(static_cast<Eigen::Index>(traj.size()));
    double worst_i = 0.0, worst_x = 0.0;
    std::vector<double> prev_phi(static_cast<std::size_t>(r));
    std::vector<double> winding(static_cast<std::size_t>(r), 0.0);
    for (int i = 0; i < r; ++i) prev_phi[static_cast<std::size_t>(i)] = w0.phi[i];

    for (std::size_t s = 0; s < traj.size(); ++s) {
        ChartPoint w = chart.forward(traj[s].second);
        worst_i = std::max(worst_i, (w.I - w0.I).lpNorm<Eigen::Infinity>());
        if (chart.leaf_dim() > 0)
            worst_x = std::max(worst_x, (w.x - w0.x).lpNorm<Eigen::Infinity>());
        ts[static_cast<Eigen::Index>(s)] = traj[s].first;
        for (int a = 0; a < m - r; ++a) ys(static_cast<Eigen::Index>(s), a) = w.t[a];
        for (int i = 0; i < r; ++i) {
            double raw = w.phi[i];
            double jump = raw - prev_phi[static_cast<std::size_t>(i)];
            jump = std::remainder(jump, 2.0 * M_PI);
            winding[static_cast<std::size_t>(i)] += jump;
            prev_phi[static_cast<std::size_t>(i)] = raw;
            ys(static_cast<Eigen::Index>(s), m - r + i) = w0.phi[i] + winding[static_cast<std::size_t>(i)];
        }
    }
    rec.details["max_action_drift"] = worst_i;
    rec.details["max_transverse_drift"] = worst_x;

    // 3. linear fit of y'(t) against the finite-difference slope of H in I
    Vec slopes(ny), expected(ny);
    {
        double tbar = ts.mean();
        double denom = (ts.array() - tbar).square().sum();
        for (int c = 0; c < ny; ++c) {
            double ybar = ys.col(c).mean();
            slopes[c] = ((ts.array() - tbar) * (ys.col(c).array() - ybar)).sum() / denom;
        }
        ChartPoint wref = w0;
        for (int l = 0; l < ny; ++l) {
            double d = 1e-5 * (1.0 + std::abs(w0.I[l]));
            ChartPoint wp = wref, wm = wref;
            wp.I[l] += d;
            wm.I[l] -= d;
            expected[l] = (xh.generator_value(chart.inverse(wp)) -
                           xh.generator_value(chart.inverse(wm))) /
                          (2.0 * d);
        }
    }
    double worst_slope = 0.0;
    for (int c = 0; c < ny; ++c)
        worst_slope = std::max(worst_slope, std::abs(slopes[c] - expected[c]) /
                                                std::max(1.0, std::abs(expected[c])));
    rec.details["slopes"] = std::vector<double>(slopes.data(), slopes.data() + slopes.size());
    rec.details["expected_slopes"] =
        std::vector<double>(expected.data(), expected.data() + expected.size());
    rec.details["slope_relative_error"] = worst_slope;

    rec.max_residual = std::max({worst_slope, worst_i / conserved_tol * slope_rel_tol,
                                 worst_x / conserved_tol * slope_rel_tol});
    rec.pass = worst_i < conserved_tol && worst_x < conserved_tol && worst_slope < slope_rel_tol;
    return rec;
}

/** Frequency duality: the matrix of y'-advance rates under the original
    fiber flows, times (dI/dJ)^T, is the identity. Rates are measured from
    the chart itself by short flows; dI/dJ comes from the action table. */
inline CheckRecord verify_frequency_duality(const Chart& chart, const std::vector<Vec>& j_samples,
                                            double tol = 1e-4, double eps = 1e-4) {
    CheckRecord rec;
    rec.name = "frequency_duality";
    rec.anchor = "flow rates of the angle coordinates invert the action-table derivative";
    rec.tolerance = tol;
    rec.sample_count = static_cast<int>(j_samples.size());

    const int m = chart.action_dim();
    const int r = chart.compact_rank();
    const auto& flows = chart.fiber_flows();
    double worst = 0.0;
    for (const Vec& J : j_samples) {
        ChartPoint w;
        w.I = chart.actions_from_j(J);
        w.x = Vec(chart.leaf_dim());
        if (chart.leaf_dim() == 2) w.x << 0.0, chart.forward(chart.system().reference_point()).x[1];
        w.t = Vec::Zero(m - r);
        w.phi = Vec::Zero(r);
        PhasePoint z = chart.inverse(w);
        ChartPoint w_base = chart.forward(z);

        Mat rates(m, m);
        for (int mu = 0; mu < m; ++mu) {
            PhasePoint zf = flow_map(flows[static_cast<std::size_t>(mu)], eps, z);
            ChartPoint wf = chart.forward(zf);
            for (int a = 0; a < m - r; ++a) rates(a, mu) = (wf.t[a] - w_base.t[a]) / eps;
            for (int i = 0; i < r; ++i) {
                double d = std::remainder(wf.phi[i] - w_base.phi[i], 2.0 * M_PI);
                rates(m - r + i, mu) = d / eps;
            }
        }
        Mat prod = rates * chart.frequency_matrix(J).transpose();
        worst = std::max(worst, (prod - Mat::Identity(m, m)).cwiseAbs().maxCoeff());
    }
    rec.max_residual = worst;
    rec.pass = worst < tol;
    return rec;
}

/** Transition triviality: two charts over the same domain, built from
    different reference anchors, assign y' coordinates differing by a
    constant on each fiber. Reports the worst within-fiber spread of the
    offset. */
inline CheckRecord verify_transition_offsets(const Chart& a, const Chart& b,
                                             const std::vector<Vec>& j_samples,
                                             int points_per_fiber = 6, double tol = 1e-6) {
    CheckRecord rec;
    rec.name = "transition_offsets";
    rec.anchor = "action-angle coordinates from different sections differ by fiberwise constants";
    rec.tolerance = tol;
    rec.sample_count = static_cast<int>(j_samples.size());

    const int m = a.action_dim();
    const int r = a.compact_rank();
    double worst_spread = 0.0;
    double worst_action = 0.0;
    for (const Vec& J : j_samples) {
        Vec lo = Vec::Constant(m, std::numeric_limits<double>::infinity());
        Vec hi = Vec::Constant(m, -std::numeric_limits<double>::infinity());
        for (int p = 0; p < points_per_fiber; ++p) {
            ChartPoint w;
            w.I = a.actions_from_j(J);
            w.x = Vec(a.leaf_dim());
            if (a.leaf_dim() == 2)
                w.x << 0.0, a.forward(a.system().reference_point()).x[1];
            w.t = Vec::Constant(m - r, -0.4 + 0.8 * p / std::max(1, points_per_fiber - 1));
            w.phi = Vec::Constant(r, std::fmod(0.3 + 5.5 * p / std::max(1, points_per_fiber - 1),
                                               2.0 * M_PI));
            PhasePoint z = a.inverse(w);
            ChartPoint wa = a.forward(z);
            ChartPoint wb = b.forward(z);
            worst_action = std::max(worst_action, (wa.I - wb.I).lpNorm<Eigen::Infinity>());
            for (int c = 0; c < m - r; ++c) {
                double off = wa.t[c] - wb.t[c];
                lo[c] = std::min(lo[c], off);
                hi[c] = std::max(hi[c], off);
            }
            for (int i = 0; i < r; ++i) {
                double off = std::remainder(wa.phi[i] - wb.phi[i], 2.0 * M_PI);
                // compare offsets in a common branch relative to the first point
                if (p == 0) {
                    lo[m - r + i] = hi[m - r + i] = off;
                } else {
                    double base = 0.5 * (lo[m - r + i] + hi[m - r + i]);
                    off = base + std::remainder(off - base, 2.0 * M_PI);
                    lo[m - r + i] = std::min(lo[m - r + i], off);
                    hi[m - r + i] = std::max(hi[m - r + i], off);
                }
            }
        }
        worst_spread = std::max(worst_spread, (hi - lo).lpNorm<Eigen::Infinity>());
    }
    rec.details["worst_offset_spread"] = worst_spread;
    rec.details["action_agreement"] = worst_action;
    rec.max_residual = worst_spread;
    rec.pass = worst_spread < tol;
    return rec;
}

} // namespace aacord

#endif // AACORD_CHART_HPP
