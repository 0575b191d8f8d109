#ifndef AACORD_LATTICE_HPP
#define AACORD_LATTICE_HPP

/** \file lattice.hpp
    \brief Detection of the isotropy period lattice K of an invariant fiber
           under the commuting R^m flow action, and classification of the
           fiber as the toroidal cylinder R^(m-r) x T^r.

    Strategy: coarse close-return scan over a parameter grid, Gauss-Newton
    refinement of each near-return on F(s) = Phi_s(z) - z, deduplication
    modulo integer combinations, and pairwise Gauss reduction of the
    surviving generators. Close returns are preferred over frequency
    analysis because they realize the isotropy-group definition directly
    and handle mixed compact/noncompact directions.
*/

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "aacord/flow.hpp"
#include "aacord/report.hpp"
#include "aacord/symplectic.hpp"

namespace aacord {

struct SearchConfig {
    double box_halfwidth = 50.0;   ///< S: periods beyond this are undetectable
    double grid_step = 0.1;        ///< h: coarse resolution
    double coarse_accept = 1e-2;   ///< relative near-return radius
    int newton_max_iter = 50;
    double tol_return = 1e-9;
    std::int64_t max_grid_points = 5000000;

    void validate() const {
        if (grid_step >= box_halfwidth)
            throw std::invalid_argument("grid step must be smaller than the search box");
        if (coarse_accept <= tol_return)
            throw std::invalid_argument("coarse acceptance must exceed the return tolerance");
    }
};

/** Detected isotropy lattice of the fiber through the anchor point:
    r independent return vectors u_i in the flow-parameter space R^m,
    with the refinement residual of each and the validity bounds of the
    search that produced them. */
struct PeriodLattice {
    int m = 0;                    ///< action dimension
    int rank = 0;                 ///< r = number of independent generators
    Mat basis;                    ///< r x m, reduced and sign-canonical
    std::vector<double> residuals;///< |Phi_u(z) - z| per basis vector
    PhasePoint anchor;

    // certificate bounds
    double search_bound = 0.0;    ///< vectors longer than this were not searched
    double resolution = 0.0;
    bool minimality_guard = true; ///< no shorter refined return was discarded
    bool low_confidence = false;  ///< coarse hits existed but refinement failed
    double commutation_residual_checked = 0.0;

    std::pair<int, int> signature() const { return {m - rank, rank}; }

    Json to_json() const {
        Json j;
        j["action_dimension"] = m;
        j["rank"] = rank;
        Json rows = Json::array();
        for (int i = 0; i < rank; ++i) {
            Json row = Json::array();
            for (int c = 0; c < m; ++c) row.push_back(basis(i, c));
            rows.push_back(row);
        }
        j["basis"] = rows;
        j["residuals"] = residuals;
        j["signature"] = {{"noncompact", m - rank}, {"compact", rank}};
        j["search_bound"] = search_bound;
        j["resolution"] = resolution;
        j["minimality_guard"] = minimality_guard;
        j["low_confidence"] = low_confidence;
        return j;
    }
};

/// Fiber type R^(m-r) x T^r as (noncompact, compact) counts.
inline std::pair<int, int> cylinder_signature(const PeriodLattice& lat) {
    return lat.signature();
}

namespace detail {

inline Vec flow_at(std::span<const VectorFieldHandle> fields, const Vec& s, const PhasePoint& z,
                   const FlowConfig& cfg) {
    return flow_map(fields, std::span<const double>(s.data(), static_cast<std::size_t>(s.size())),
                    z, cfg);
}

/** One Gauss-Newton refinement of a close return: minimize |Phi_s z - z|
    using the exact Jacobian columns v_l(Phi_s z). Returns the refined s,
    or nothing on divergence. */
inline std::optional<Vec> refine_return(std::span<const VectorFieldHandle> fields,
                                        const PhasePoint& z, Vec s, const SearchConfig& cfg,
                                        const FlowConfig& fcfg, double* out_residual = nullptr) {
    const int m = static_cast<int>(fields.size());
    const int dim = static_cast<int>(z.size());
    double best = std::numeric_limits<double>::infinity();
    for (int it = 0; it < cfg.newton_max_iter; ++it) {
        PhasePoint zs;
        try {
            zs = flow_at(fields, s, z, fcfg);
        } catch (const FlowError&) {
            return std::nullopt;
        }
        Vec f = zs - z;
        double norm = f.norm();
        if (norm < 0.2 * cfg.tol_return) {
            if (out_residual) *out_residual = norm;
            return s;
        }
        if (norm > 4.0 * best) return std::nullopt;   // diverging
        best = std::min(best, norm);

        Mat jac(dim, m);
        for (int l = 0; l < m; ++l) jac.col(l) = fields[static_cast<std::size_t>(l)](zs);
        Vec step = jac.completeOrthogonalDecomposition().solve(f);
        if (!step.allFinite()) return std::nullopt;

        // damped update
        double lambda = 1.0;
        for (int half = 0; half < 8; ++half) {
            Vec s_try = s - lambda * step;
            try {
                double norm_try = (flow_at(fields, s_try, z, fcfg) - z).norm();
                if (norm_try < norm || norm_try < 0.2 * cfg.tol_return) {
                    s = s_try;
                    break;
                }
            } catch (const FlowError&) {
                // fall through to smaller step
            }
            lambda *= 0.5;
            if (half == 7) return std::nullopt;
        }
    }
    // converged slowly: accept if the residual already meets the tolerance
    try {
        double norm = (flow_at(fields, s, z, fcfg) - z).norm();
        if (norm < cfg.tol_return) {
            if (out_residual) *out_residual = norm;
            return s;
        }
    } catch (const FlowError&) {
    }
    return std::nullopt;
}

/// Is u an integer combination of the rows of basis (within tol)?
inline bool is_integer_combination(const Mat& basis, const Vec& u, double tol) {
    if (basis.rows() == 0) return false;
    Mat bt = basis.transpose();   // m x r
    Vec c = bt.completeOrthogonalDecomposition().solve(u);
    Vec c_rounded = c.array().round().matrix();
    return (bt * c_rounded - u).norm() < tol * (1.0 + u.norm());
}

/// Pairwise Gauss (Lagrange) reduction, iterated to stability; zero rows drop.
inline Mat gauss_reduce(Mat basis) {
    const double tiny = 1e-9;
    for (int pass = 0; pass < 100; ++pass) {
        // drop zero rows, sort ascending by norm
        std::vector<Vec> rows;
        for (int i = 0; i < basis.rows(); ++i)
            if (basis.row(i).norm() > tiny) rows.push_back(basis.row(i));
        std::sort(rows.begin(), rows.end(),
                  [](const Vec& a, const Vec& b) { return a.norm() < b.norm(); });
        Mat next(static_cast<Eigen::Index>(rows.size()), basis.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) next.row(static_cast<Eigen::Index>(i)) = rows[i];
        basis = next;

        bool changed = false;
        for (int i = 0; i < basis.rows(); ++i)
            for (int j = 0; j < basis.rows(); ++j) {
                if (i == j) continue;
                double denom = basis.row(i).squaredNorm();
                if (denom < tiny * tiny) continue;
                double mu = std::round(basis.row(j).dot(basis.row(i)) / denom);
                if (mu != 0.0) {
                    basis.row(j) -= mu * basis.row(i);
                    changed = true;
                }
            }
        if (!changed) break;
    }
    return basis;
}

/// Deterministic orientation: first nonzero component nonnegative; rows
/// ordered by (norm, lexicographic).
inline Mat canonicalize_basis(Mat basis) {
    for (int i = 0; i < basis.rows(); ++i) {
        for (int c = 0; c < basis.cols(); ++c) {
            if (std::abs(basis(i, c)) > 1e-12) {
                if (basis(i, c) < 0) basis.row(i) = -basis.row(i);
                break;
            }
        }
    }
    std::vector<Vec> rows;
    for (int i = 0; i < basis.rows(); ++i) rows.push_back(basis.row(i));
    std::sort(rows.begin(), rows.end(), [](const Vec& a, const Vec& b) {
        double na = a.norm(), nb = b.norm();
        if (std::abs(na - nb) > 1e-9 * (1 + na)) return na < nb;
        for (int c = 0; c < a.size(); ++c)
            if (std::abs(a[c] - b[c]) > 1e-9) return a[c] < b[c];
        return false;
    });
    for (std::size_t i = 0; i < rows.size(); ++i) basis.row(static_cast<Eigen::Index>(i)) = rows[i];
    return basis;
}

/** Recursive incremental grid walk over the half-space of parameter space
    (first nonzero coordinate positive), visiting states by single-axis
    h-steps. The visitor receives (s, state, distance-to-anchor). */
class GridWalker {
public:
    GridWalker(std::span<const VectorFieldHandle> fields, const PhasePoint& anchor,
               const SearchConfig& cfg, const FlowConfig& fcfg)
        : fields_(fields), anchor_(anchor), cfg_(cfg), fcfg_(fcfg),
          m_(static_cast<int>(fields.size())) {}

    template <class Visitor>
    void run(Visitor&& visit) {
        Vec s = Vec::Zero(m_);
        walk_axis(0, s, anchor_, true, visit);
    }

private:
    template <class Visitor>
    void walk_axis(int axis, Vec s, PhasePoint state, bool outer_all_zero, Visitor& visit) {
        const int steps = static_cast<int>(std::floor(cfg_.box_halfwidth / cfg_.grid_step + 1e-9));
        // upward sweep including s_axis = 0
        sweep(axis, s, state, +1, steps, outer_all_zero, visit, true);
        if (!outer_all_zero) {
            // downward sweep, excluding the already-visited zero slice
            sweep(axis, s, state, -1, steps, false, visit, false);
        }
    }

    template <class Visitor>
    void sweep(int axis, Vec s, PhasePoint state, int dir, int steps, bool outer_all_zero,
               Visitor& visit, bool include_zero) {
        double w[1];
        std::span<const VectorFieldHandle> one(&fields_[static_cast<std::size_t>(axis)], 1);
        const int first_i = include_zero ? 0 : 1;
        for (int i = first_i; i <= steps; ++i) {
            if (i > 0) {
                w[0] = dir * cfg_.grid_step;
                try {
                    state = flow_map(one, std::span<const double>(w, 1), state, fcfg_);
                } catch (const FlowError&) {
                    return;   // abandoned sweep: orbit left the representable region
                }
                s[axis] = dir * i * cfg_.grid_step;
            } else {
                s[axis] = 0.0;
            }
            if (axis + 1 < m_) {
                bool zero_here = outer_all_zero && i == 0;
                walk_axis(axis + 1, s, state, zero_here, visit);
            } else {
                visit(s, state, (state - anchor_).norm(), i == first_i);
            }
        }
    }

    std::span<const VectorFieldHandle> fields_;
    PhasePoint anchor_;
    SearchConfig cfg_;
    FlowConfig fcfg_;
    int m_;
};

} // namespace detail

/** Detect the period lattice of the fiber through z under the commuting
    flows. Preconditions (checked): the flows commute at z within 1e-8.

    Steps: coarse scan of the parameter grid for near-returns, Gauss-Newton
    refinement of candidates, deduplication modulo integer combinations of
    accepted generators, pairwise Gauss reduction, sign canonicalization,
    and a final re-polish of the reduced generators. */
inline PeriodLattice detect_period_lattice(std::span<const VectorFieldHandle> flows,
                                           const PhasePoint& z, const SearchConfig& cfg = {},
                                           const FlowConfig& fcfg_in = {}) {
    cfg.validate();
    const int m = static_cast<int>(flows.size());

    // refinement wants more integrator accuracy than the return tolerance
    FlowConfig fcfg = fcfg_in;
    fcfg.rtol = std::min(fcfg.rtol, 1e-12);
    fcfg.atol = std::min(fcfg.atol, 1e-14);

    PeriodLattice lat;
    lat.m = m;
    lat.anchor = z;
    lat.search_bound = cfg.box_halfwidth;
    lat.resolution = cfg.grid_step;

    // precondition: commuting flows
    double worst_comm = 0.0;
    for (int a = 0; a < m; ++a)
        for (int b = a + 1; b < m; ++b)
            worst_comm = std::max(worst_comm,
                                  commutation_residual(flows[static_cast<std::size_t>(a)],
                                                       flows[static_cast<std::size_t>(b)], z,
                                                       1.0, 1.0, fcfg_in));
    lat.commutation_residual_checked = worst_comm;
    if (worst_comm > 1e-8)
        throw std::invalid_argument("period lattice requires commuting flows (residual " +
                                    std::to_string(worst_comm) + ")");

    {
        double pts = 1.0;
        for (int a = 0; a < m; ++a) pts *= 2.0 * cfg.box_halfwidth / cfg.grid_step + 1.0;
        if (pts > static_cast<double>(cfg.max_grid_points))
            throw std::invalid_argument("coarse search grid exceeds the configured budget; "
                                        "shrink the box or coarsen the step");
    }

    // 1. coarse scan: collect near-returns, thinned to local minima along
    //    the innermost axis
    struct Candidate {
        Vec s;
        double dist;
    };
    std::vector<Candidate> candidates;
    // A true return can sit half a grid cell away from the nearest node,
    // displaced by up to (h/2) * speed; widen the acceptance accordingly so
    // grid quantization cannot hide a generator.
    double speed_sum = 0.0;
    for (const auto& f : flows) speed_sum += f(z).norm();
    const double accept = std::max(cfg.coarse_accept * (1.0 + z.norm()),
                                   0.75 * cfg.grid_step * speed_sum);
    const double skip_radius = 0.75 * cfg.grid_step;

    {
        detail::GridWalker walker(flows, z, cfg, fcfg_in);
        bool in_valley = false;
        Vec best_s;
        double best_d = 0.0;
        auto flush = [&] {
            if (in_valley) {
                candidates.push_back({best_s, best_d});
                in_valley = false;
            }
        };
        // one candidate per contiguous below-threshold valley of each sweep
        walker.run([&](const Vec& s, const PhasePoint&, double dist, bool sweep_start) {
            if (sweep_start) flush();
            bool below = dist < accept && s.norm() > skip_radius;
            if (below) {
                if (!in_valley || dist < best_d) {
                    best_s = s;
                    best_d = dist;
                }
                in_valley = true;
            } else {
                flush();
            }
        });
        flush();
    }

    std::sort(candidates.begin(), candidates.end(),
              [](const Candidate& a, const Candidate& b) { return a.dist < b.dist; });
    if (candidates.size() > 200) candidates.resize(200);

    // 2. refine and accumulate independent generators
    std::vector<Vec> refined;
    Mat basis(0, m);
    bool any_refinement_failed = false;
    for (const auto& cand : candidates) {
        auto s_ref = detail::refine_return(flows, z, cand.s, cfg, fcfg);
        if (!s_ref) {
            any_refinement_failed = true;
            continue;
        }
        if (s_ref->norm() < 0.5 * cfg.grid_step) continue;   // collapsed to the trivial return
        refined.push_back(*s_ref);
    }
    std::sort(refined.begin(), refined.end(),
              [](const Vec& a, const Vec& b) { return a.norm() < b.norm(); });
    for (const Vec& u : refined) {
        if (detail::is_integer_combination(basis, u, 1e-6)) continue;
        basis.conservativeResize(basis.rows() + 1, m);
        basis.row(basis.rows() - 1) = u;
    }

    // 3. reduce, canonicalize, re-polish
    basis = detail::gauss_reduce(basis);
    basis = detail::canonicalize_basis(basis);
    lat.rank = static_cast<int>(basis.rows());
    lat.basis = basis;
    lat.residuals.assign(static_cast<std::size_t>(lat.rank), 0.0);
    for (int i = 0; i < lat.rank; ++i) {
        double res = 0.0;
        Vec row = lat.basis.row(i);
        auto polished = detail::refine_return(flows, z, row, cfg, fcfg, &res);
        if (polished) {
            lat.basis.row(i) = *polished;
            lat.residuals[static_cast<std::size_t>(i)] = res;
        } else {
            res = (detail::flow_at(flows, row, z, fcfg) - z).norm();
            lat.residuals[static_cast<std::size_t>(i)] = res;
            if (res > cfg.tol_return) lat.low_confidence = true;
        }
    }
    lat.basis = detail::canonicalize_basis(lat.basis);

    if (lat.rank == 0 && any_refinement_failed && !candidates.empty()) lat.low_confidence = true;

    // basis must be genuinely independent
    if (lat.rank > 0) {
        Eigen::JacobiSVD<Mat> svd(lat.basis);
        if (svd.singularValues()[lat.rank - 1] <= 1e-8)
            throw std::runtime_error("reduced lattice basis is rank-deficient");
    }

    // 4. minimality guard: no refined return strictly inside half the
    //    shortest generator (other than the trivial one)
    if (lat.rank > 0) {
        double min_norm = lat.basis.row(0).norm();
        for (int i = 1; i < lat.rank; ++i) min_norm = std::min(min_norm, lat.basis.row(i).norm());
        for (const Vec& u : refined)
            if (u.norm() > 0.5 * cfg.grid_step && u.norm() < 0.5 * min_norm)
                lat.minimality_guard = false;
    }

    return lat;
}

/** Continue a known lattice to a nearby fiber: Gauss-Newton polish of each
    basis vector at the new anchor. Fails (nullopt) if any generator stops
    converging, signalling a rank change or a too-large continuation step. */
inline std::optional<PeriodLattice> continue_lattice(std::span<const VectorFieldHandle> flows,
                                                     const PhasePoint& z_new,
                                                     const PeriodLattice& reference,
                                                     const SearchConfig& cfg = {},
                                                     const FlowConfig& fcfg_in = {}) {
    FlowConfig fcfg = fcfg_in;
    fcfg.rtol = std::min(fcfg.rtol, 1e-12);
    fcfg.atol = std::min(fcfg.atol, 1e-14);

    PeriodLattice lat = reference;
    lat.anchor = z_new;
    lat.residuals.assign(static_cast<std::size_t>(reference.rank), 0.0);
    for (int i = 0; i < reference.rank; ++i) {
        double res = 0.0;
        Vec row = reference.basis.row(i);
        auto polished = detail::refine_return(flows, z_new, row, cfg, fcfg, &res);
        if (!polished) return std::nullopt;
        // continuation must stay in the same homotopy class: reject jumps
        if ((*polished - row).norm() > 0.45 * row.norm()) return std::nullopt;
        lat.basis.row(i) = *polished;
        lat.residuals[static_cast<std::size_t>(i)] = res;
    }
    if (lat.rank > 0) {
        Eigen::JacobiSVD<Mat> svd(lat.basis);
        if (svd.singularValues()[lat.rank - 1] <= 1e-8) return std::nullopt;
    }
    return lat;
}

/** Invertible re-mix T of the action parameters sending the lattice
    generators to the last r coordinate directions, completed by an
    orthonormal basis of the orthogonal complement on the first m - r.
    Requires rank >= 1. */
inline Mat adapt_basis(const PeriodLattice& lat) {
    if (lat.rank < 1) throw std::invalid_argument("adapt_basis requires a nonzero lattice rank");
    const int m = lat.m;
    const int r = lat.rank;
    Mat columns(m, m);

    if (r < m) {
        // null space of the basis rows = orthogonal complement of span{u_i}
        Eigen::JacobiSVD<Mat> svd(lat.basis, Eigen::ComputeFullV);
        Mat comp = svd.matrixV().rightCols(m - r);
        // deterministic orientation of each complement column
        for (int c = 0; c < comp.cols(); ++c)
            for (int rr = 0; rr < m; ++rr)
                if (std::abs(comp(rr, c)) > 1e-12) {
                    if (comp(rr, c) < 0) comp.col(c) = -comp.col(c);
                    break;
                }
        columns.leftCols(m - r) = comp;
    }
    for (int i = 0; i < r; ++i) columns.col(m - r + i) = lat.basis.row(i).transpose();
    return columns.inverse();
}

} // namespace aacord

#endif // AACORD_LATTICE_HPP
