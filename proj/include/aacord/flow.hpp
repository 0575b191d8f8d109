#ifndef AACORD_FLOW_HPP
#define AACORD_FLOW_HPP

/** \file flow.hpp
    \brief Numerical flows of Hamiltonian vector fields: the R^m action
           Phi_s, commutation residuals, and finite-window completeness
           probes.

    The integrator is an embedded explicit Dormand-Prince 5(4) pair with
    proportional-integral step control. Commuting flows are integrated as
    one combined field sum_l s^l v_l over unit time; order irrelevance of
    the composition is asserted by tests, not assumed here.
*/

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aacord/symplectic.hpp"

namespace aacord {

/// Flow integration failure (step exhaustion, escape, or a domain error
/// raised by the field expressions en route).
class FlowError : public std::runtime_error {
public:
    enum class Kind { StepExhaustion, Escape, DomainError };
    FlowError(Kind k, const std::string& what, double t = 0.0)
        : std::runtime_error(what), kind_(k), t_(t) {}
    Kind kind() const { return kind_; }
    double time() const { return t_; }
private:
    Kind kind_;
    double t_;
};

struct FlowConfig {
    double rtol = 1e-10;          ///< relative tolerance
    double atol = 1e-12;          ///< absolute tolerance
    std::int64_t max_steps = 1000000;
    double escape_radius = 1e6;   ///< |z| beyond this reports possible incompleteness

    void validate() const {
        if (rtol <= 0 || atol <= 0) throw std::invalid_argument("tolerances must be positive");
        if (escape_radius <= 1) throw std::invalid_argument("escape radius must exceed 1");
    }
};

/// Outcome of a finite-window completeness probe. Not a completeness
/// proof: "ok" only means no escape within [-T, T] at the probe radius.
struct ProbeReport {
    enum class Outcome { Ok, Escape, StepExhaustion };
    Outcome outcome = Outcome::Ok;
    double escape_time = 0.0;   ///< time at which |z| crossed the radius
    double escape_norm = 0.0;
    double window = 0.0;
    double radius = 0.0;
    std::int64_t steps = 0;

    bool ok() const { return outcome == Outcome::Ok; }
};

namespace detail {

/// RHS adaptor for a fixed linear combination sum_l s^l v_l of fields.
class CombinedField {
public:
    CombinedField(std::span<const VectorFieldHandle> fields, std::span<const double> weights)
        : fields_(fields), weights_(weights.begin(), weights.end()) {}

    void operator()(std::span<const double> z, std::span<double> dz,
                    std::span<double> scratch) const {
        std::fill(dz.begin(), dz.end(), 0.0);
        for (std::size_t l = 0; l < fields_.size(); ++l) {
            if (weights_[l] == 0.0) continue;
            fields_[l].eval_into(z, scratch);
            for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += weights_[l] * scratch[i];
        }
    }

private:
    std::span<const VectorFieldHandle> fields_;
    std::vector<double> weights_;
};

/** Dormand-Prince 5(4) step machinery. The driver integrates an autonomous
    field over [0, T] with adaptive steps, invoking an observer after each
    accepted step. */
class Dopri5 {
public:
    // classical DP5(4) tableau
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187,
                            a53 = 64448.0 / 6561, a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                            a64 = 49.0 / 176, a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                            b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    // embedded 4th-order weights
    static constexpr double e1 = 5179.0 / 57600, e3 = 7571.0 / 16695, e4 = 393.0 / 640,
                            e5 = -92097.0 / 339200, e6 = 187.0 / 2100, e7 = 1.0 / 40;

    template <class Rhs, class Observer>
    static ProbeReport integrate(const Rhs& rhs, std::vector<double>& y, double T,
                                 const FlowConfig& cfg, Observer&& observe,
                                 bool throw_on_failure) {
        cfg.validate();
        ProbeReport rep;
        rep.window = std::abs(T);
        rep.radius = cfg.escape_radius;
        const std::size_t d = y.size();
        if (T == 0.0) return rep;
        const double dir = T > 0 ? 1.0 : -1.0;
        const double t_end = T;

        std::vector<double> k1(d), k2(d), k3(d), k4(d), k5(d), k6(d), k7(d);
        std::vector<double> ytmp(d), ynew(d), scratch(d);
        auto stage = [&](std::vector<double>& out, auto&&... terms) {
            // out = y + h*(sum of coeff*k)
            for (std::size_t i = 0; i < d; ++i) {
                double acc = 0.0;
                ((acc += terms.first * (*terms.second)[i]), ...);
                out[i] = y[i] + acc;
            }
        };

        double t = 0.0;
        double h = dir * std::min(0.01 * std::abs(T) + 1e-8, 0.1);
        double err_prev = 1.0;
        bool first = true;

        try {
            rhs(std::span<const double>(y), std::span<double>(k1), std::span<double>(scratch));
        } catch (const EvalError& e) {
            if (throw_on_failure)
                throw FlowError(FlowError::Kind::DomainError,
                                std::string("field evaluation failed at start: ") + e.what(), 0.0);
            rep.outcome = ProbeReport::Outcome::StepExhaustion;
            return rep;
        }

        for (std::int64_t step = 0; step < cfg.max_steps; ++step) {
            if ((t_end - t) * dir <= 0.0) { rep.steps = step; return rep; }
            if ((t + h - t_end) * dir > 0.0) h = t_end - t;

            bool rejected_domain = false;
            double err = 0.0;
            try {
                using P = std::pair<double, const std::vector<double>*>;
                stage(ytmp, P{h * a21, &k1});
                rhs(ytmp, k2, scratch);
                stage(ytmp, P{h * a31, &k1}, P{h * a32, &k2});
                rhs(ytmp, k3, scratch);
                stage(ytmp, P{h * a41, &k1}, P{h * a42, &k2}, P{h * a43, &k3});
                rhs(ytmp, k4, scratch);
                stage(ytmp, P{h * a51, &k1}, P{h * a52, &k2}, P{h * a53, &k3}, P{h * a54, &k4});
                rhs(ytmp, k5, scratch);
                stage(ytmp, P{h * a61, &k1}, P{h * a62, &k2}, P{h * a63, &k3}, P{h * a64, &k4},
                      P{h * a65, &k5});
                rhs(ytmp, k6, scratch);
                stage(ynew, P{h * b1, &k1}, P{h * b3, &k3}, P{h * b4, &k4}, P{h * b5, &k5},
                      P{h * b6, &k6});
                rhs(ynew, k7, scratch);

                for (std::size_t i = 0; i < d; ++i) {
                    double e5th = ynew[i];
                    double e4th = y[i] + h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] +
                                              e5 * k5[i] + e6 * k6[i] + e7 * k7[i]);
                    double sc = cfg.atol + cfg.rtol * std::max(std::abs(y[i]), std::abs(ynew[i]));
                    double q = (e5th - e4th) / sc;
                    err += q * q;
                }
                err = std::sqrt(err / static_cast<double>(d));
            } catch (const EvalError&) {
                rejected_domain = true;
            }

            if (rejected_domain) {
                // halve and retry; if the step has collapsed, give up
                h *= 0.5;
                if (std::abs(h) < 1e-14 * (1.0 + std::abs(t))) {
                    if (throw_on_failure)
                        throw FlowError(FlowError::Kind::DomainError,
                                        "field evaluation failed (domain error) near t = " +
                                            std::to_string(t), t);
                    rep.outcome = ProbeReport::Outcome::StepExhaustion;
                    rep.steps = step;
                    return rep;
                }
                continue;
            }

            if (err <= 1.0) {
                t += h;
                y.swap(ynew);
                k1.swap(k7);   // FSAL
                observe(t, std::span<const double>(y));

                double nrm = 0.0;
                for (double v : y) nrm += v * v;
                nrm = std::sqrt(nrm);
                if (nrm > cfg.escape_radius) {
                    rep.outcome = ProbeReport::Outcome::Escape;
                    rep.escape_time = t;
                    rep.escape_norm = nrm;
                    rep.steps = step + 1;
                    if (throw_on_failure)
                        throw FlowError(FlowError::Kind::Escape,
                                        "trajectory escaped |z| = " + std::to_string(nrm) +
                                            " at t = " + std::to_string(t) +
                                            " (possible incompleteness)", t);
                    return rep;
                }

                // PI controller (order 5, error exponent 1/5 with a small
                // integral term for smoothness)
                double fac = 0.9 * std::pow(err > 0 ? err : 1e-10, -0.7 / 5.0) *
                             std::pow(err_prev > 0 ? err_prev : 1e-10, 0.4 / 5.0);
                fac = std::clamp(fac, 0.2, first ? 10.0 : 5.0);
                h *= fac;
                err_prev = err;
                first = false;
            } else {
                double fac = std::max(0.2, 0.9 * std::pow(err, -1.0 / 5.0));
                h *= fac;
            }
        }

        rep.outcome = ProbeReport::Outcome::StepExhaustion;
        rep.steps = cfg.max_steps;
        if (throw_on_failure)
            throw FlowError(FlowError::Kind::StepExhaustion,
                            "step budget exhausted at t = " + std::to_string(t), t);
        return rep;
    }
};

} // namespace detail

/** Endpoint of the R^m action: integrate sum_l s^l v_l over unit time from z0.

    The fields must pairwise commute for Phi_s to be well defined as a group
    action; that property is certified separately (commutation_residual). */
inline PhasePoint flow_map(std::span<const VectorFieldHandle> fields, std::span<const double> s,
                           const PhasePoint& z0, const FlowConfig& cfg = {}) {
    if (fields.size() != s.size())
        throw std::invalid_argument("flow_map: parameter count does not match field count");
    for (double v : s)
        if (!std::isfinite(v)) throw std::invalid_argument("flow_map: non-finite parameter");
    std::vector<double> y(z0.data(), z0.data() + z0.size());
    detail::CombinedField rhs(fields, s);
    detail::Dopri5::integrate(rhs, y, 1.0, cfg, [](double, std::span<const double>) {}, true);
    return Eigen::Map<const Vec>(y.data(), static_cast<Eigen::Index>(y.size()));
}

/// Single-field convenience overload: Phi_t of one Hamiltonian field.
inline PhasePoint flow_map(const VectorFieldHandle& field, double t, const PhasePoint& z0,
                           const FlowConfig& cfg = {}) {
    double s[1] = {t};
    return flow_map(std::span<const VectorFieldHandle>(&field, 1), std::span<const double>(s, 1),
                    z0, cfg);
}

/** || Phi_s^l Phi_t^m z - Phi_t^m Phi_s^l z ||_2 : the commutation defect of
    two flows, zero (up to integrator error) iff the generators are in
    involution along the relevant orbits. */
inline double commutation_residual(const VectorFieldHandle& vl, const VectorFieldHandle& vm,
                                   const PhasePoint& z, double s, double t,
                                   const FlowConfig& cfg = {}) {
    PhasePoint a = flow_map(vm, t, flow_map(vl, s, z, cfg), cfg);
    PhasePoint b = flow_map(vl, s, flow_map(vm, t, z, cfg), cfg);
    return (a - b).norm();
}

/** Integrate v over [0, T] and [0, -T], reporting ok / escape / exhaustion.
    Failures are report outcomes, never exceptions. */
inline ProbeReport completeness_probe(const VectorFieldHandle& v, const PhasePoint& z, double T,
                                      const FlowConfig& cfg = {}) {
    if (T <= 0) throw std::invalid_argument("completeness_probe: window must be positive");
    ProbeReport worst;
    worst.window = T;
    worst.radius = cfg.escape_radius;
    for (double dir : {+1.0, -1.0}) {
        std::vector<double> y(z.data(), z.data() + z.size());
        double w[1] = {dir};
        detail::CombinedField rhs(std::span<const VectorFieldHandle>(&v, 1),
                                  std::span<const double>(w, 1));
        ProbeReport rep = detail::Dopri5::integrate(
            rhs, y, T, cfg, [](double, std::span<const double>) {}, false);
        rep.window = T;
        worst.steps += rep.steps;
        if (!rep.ok() && worst.ok()) {
            rep.escape_time *= dir;
            rep.steps = worst.steps;
            worst = rep;
        }
    }
    return worst;
}

/** Trajectory sampling: states at times 0, dt, 2 dt, ..., T along the flow
    of a single field. Used by trace output and equations-of-motion checks. */
inline std::vector<std::pair<double, PhasePoint>> flow_trajectory(
    const VectorFieldHandle& field, const PhasePoint& z0, double t_max, double dt,
    const FlowConfig& cfg = {}) {
    if (dt <= 0 || t_max <= 0)
        throw std::invalid_argument("flow_trajectory: t_max and dt must be positive");
    std::vector<std::pair<double, PhasePoint>> out;
    out.emplace_back(0.0, z0);
    PhasePoint z = z0;
    double t = 0.0;
    while (t < t_max - 1e-12 * t_max) {
        double step = std::min(dt, t_max - t);
        z = flow_map(field, step, z, cfg);
        t += step;
        out.emplace_back(t, z);
    }
    return out;
}

} // namespace aacord

#endif // AACORD_FLOW_HPP
