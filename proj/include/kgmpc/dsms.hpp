#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "kgmpc/common.hpp"
#include "kgmpc/config.hpp"

namespace kgmpc {

// ---------------------------------------------------------------------------
// Decoupled synchronous machine system: a flywheel-bearing classical machine
// feeding the grid through a back-to-back converter. The full seven-state ODE
// is available for physics checks; closed-loop work normally runs one of the
// reduced actuator models (the converter loops are much faster than the grid
// dynamics the predictor is trained on).
//
// Frame convention: q-axis aligned with the AC-side voltage, so V_gd = 0 and
// V_gq is the grid-voltage magnitude. omega_r is the absolute electrical
// speed in rad/s; the stored rotor angle is the deviation angle, integrating
// omega_r - omega0.
// ---------------------------------------------------------------------------

enum class ActuatorMode { Ideal, FirstOrder, FullOde };

struct DsmsParams {
    double e_q = 1.0;     // internal EMF, pu
    double r_s = 0.0025;  // machine-side resistance, pu
    double x_s = 0.25;    // machine-side reactance, pu
    double r_g = 0.001;   // grid-side phase-reactor resistance, pu
    double x_g = 0.1656;  // grid-side phase-reactor reactance, pu
    double h = 6.175;     // flywheel inertia, s
    double c_dc = 0.004;  // DC capacitance, pu
    double v_dc_nom = 1.0;
    double base_mva = 900.0;  // machine power base, MVA
    double omega0 = 2.0 * kPi * 60.0;
    double p_bound = 0.3;     // |P_e| limit, pu
    double omega_min = 0.95;  // speed band, pu of omega0
    double omega_max = 1.05;
    ActuatorMode mode = ActuatorMode::FirstOrder;
    double tau_c = 0.02;             // first-order actuator time constant, s
    double modulation_limit = 1.2;   // converter voltage magnitude cap, pu
    double current_loop_bw = 200.0;  // rad/s
    double vdc_loop_bw = 20.0;       // rad/s
    double dt_inner = 2.5e-4;        // full-ODE sub-step, s

    void validate() const {
        if (r_s < 0 || x_s <= 0 || r_g < 0 || x_g <= 0) throw ConfigError("dsms reactances must be positive");
        if (h <= 0) throw ConfigError("dsms inertia must be positive");
        if (!(0 < omega_min && omega_min < 1 && 1 < omega_max)) throw ConfigError("dsms speed band must bracket 1 pu");
        if (p_bound <= 0) throw ConfigError("dsms power bound must be positive");
        if (c_dc <= 0 || v_dc_nom <= 0) throw ConfigError("dsms DC-link parameters must be positive");
    }
};

struct DsmsState {
    double i_sd = 0.0;
    double i_sq = 0.0;
    double delta_r = 0.0;  // deviation angle, rad
    double omega_r = 0.0;  // absolute electrical speed, rad/s
    double i_gd = 0.0;
    double i_gq = 0.0;
    double v_dc = 1.0;
    // inner-loop integrators (machine d/q, DC voltage, grid d/q)
    double int_sd = 0.0;
    double int_sq = 0.0;
    double int_v = 0.0;
    double int_gd = 0.0;
    double int_gq = 0.0;
    // first-order actuator state
    double p_act = 0.0;
};

struct ConverterCommand {
    double v_sc_d = 0.0;
    double v_sc_q = 0.0;
    double v_gc_d = 0.0;
    double v_gc_q = 0.0;
};

inline DsmsState dsms_equilibrium_state(const DsmsParams& p) {
    DsmsState s;
    s.omega_r = p.omega0;
    s.v_dc = p.v_dc_nom;
    return s;
}

/// Derived DC currents: the machine-side converter forwards the EMF power to
/// the DC link, the grid-side converter draws its AC terminal power.
inline double dsms_i_dc(const DsmsState& s, const DsmsParams& p) { return p.e_q * s.i_sq / s.v_dc; }
inline double dsms_i_load(const DsmsState& s, const ConverterCommand& c) {
    return (c.v_gc_d * s.i_gd + c.v_gc_q * s.i_gq) / s.v_dc;
}

struct DsmsDerivative {
    double di_sd, di_sq, ddelta_r, domega_r, di_gd, di_gq, dv_dc;
};

/// Right-hand sides of the seven machine/converter state equations.
/// `omega_s` is the grid electrical frequency in rad/s (the measured bus
/// frequency where available, omega0 otherwise).
inline DsmsDerivative dsms_derivatives(const DsmsState& s, const ConverterCommand& c, double v_gq,
                                       const DsmsParams& p, double omega_s) {
    if (s.omega_r <= 0.0) throw DivergenceError("dsms rotor speed is non-positive", 0.0);
    if (s.v_dc <= 0.0) throw DivergenceError("dsms DC voltage is non-positive", 0.0);
    DsmsDerivative d;
    d.di_sd = (s.omega_r / p.x_s) * (p.x_s * s.i_sq - p.r_s * s.i_sd - c.v_sc_d);
    d.di_sq = (s.omega_r / p.x_s) * (-p.x_s * s.i_sd - p.r_s * s.i_sq - c.v_sc_q + p.e_q);
    d.ddelta_r = s.omega_r - p.omega0;
    d.domega_r = -(p.e_q * s.i_sq) * p.omega0 / (2.0 * p.h);
    d.di_gd = (omega_s / p.x_g) * (p.x_g * s.i_gq - p.r_g * s.i_gd - c.v_gc_d);
    d.di_gq = (omega_s / p.x_g) * (-p.x_g * s.i_gd - p.r_g * s.i_gq - c.v_gc_q + v_gq);
    d.dv_dc = (dsms_i_dc(s, p) - dsms_i_load(s, c)) / p.c_dc;
    return d;
}

/// Audit of the AC/DC power-balance chain. Entries:
///   [0] EMF power minus DC inflow (zero by construction of i_dc)
///   [1] DC inflow minus machine-side converter AC power
///   [2] grid-side converter AC power minus grid injection
///   [3] machine-side AC power minus grid-side AC power
inline Eigen::Vector4d power_balance_residual(const DsmsState& s, const ConverterCommand& c, double v_gq,
                                              const DsmsParams& p) {
    double p_emf = p.e_q * s.i_sq;
    double p_dc = s.v_dc * dsms_i_dc(s, p);
    double p_sc = c.v_sc_q * s.i_sq + c.v_sc_d * s.i_sd;
    double p_gc = c.v_gc_q * s.i_gq + c.v_gc_d * s.i_gd;
    double p_inj = v_gq * s.i_gq;
    Eigen::Vector4d r;
    r << p_emf - p_dc, p_dc - p_sc, p_gc - p_inj, p_sc - p_gc;
    return r;
}

// ---------------------------------------------------------------------------
// Inner converter control: PI current loops with cross-coupling feedforward
// on both converters, outer PI holding the DC-link voltage from the grid
// side, zero reactive reference. Loop-shaped gains: first-order current
// loops at current_loop_bw, second-order DC loop at vdc_loop_bw.
// ---------------------------------------------------------------------------

struct InnerLoopGains {
    double kp_c_s, ki_c_s;  // machine-side current PI
    double kp_c_g, ki_c_g;  // grid-side current PI
    double kp_v, ki_v;      // DC-voltage PI

    static InnerLoopGains from_params(const DsmsParams& p) {
        InnerLoopGains g;
        g.kp_c_s = p.current_loop_bw * p.x_s / p.omega0;
        g.ki_c_s = p.current_loop_bw * p.r_s;
        g.kp_c_g = p.current_loop_bw * p.x_g / p.omega0;
        g.ki_c_g = p.current_loop_bw * p.r_g;
        const double zeta = 0.8;
        g.kp_v = 2.0 * zeta * p.vdc_loop_bw * p.c_dc;
        g.ki_v = p.vdc_loop_bw * p.vdc_loop_bw * p.c_dc;
        return g;
    }
};

/// One discrete update of the converter controls. Integrators advance inside
/// the state; integration is halted on a saturated converter (anti-windup).
inline ConverterCommand inner_control_step(DsmsState& s, double p_ref, double v_gq,
                                           const InnerLoopGains& g, const DsmsParams& p, double dt) {
    ConverterCommand cmd;
    // machine side: track i_sq_ref = p_ref / E_q, i_sd_ref = 0
    double i_sq_ref = p_ref / p.e_q;
    double e_sd = -s.i_sd;
    double e_sq = i_sq_ref - s.i_sq;
    double u_sd = g.kp_c_s * e_sd + s.int_sd;
    double u_sq = g.kp_c_s * e_sq + s.int_sq;
    cmd.v_sc_d = p.x_s * s.i_sq - u_sd;
    cmd.v_sc_q = -p.x_s * s.i_sd + p.e_q - u_sq;
    double mag_s = std::hypot(cmd.v_sc_d, cmd.v_sc_q);
    bool sat_s = mag_s > p.modulation_limit;
    if (sat_s) {
        double scale = p.modulation_limit / mag_s;
        cmd.v_sc_d *= scale;
        cmd.v_sc_q *= scale;
    } else {
        s.int_sd += g.ki_c_s * e_sd * dt;
        s.int_sq += g.ki_c_s * e_sq * dt;
    }

    // grid side: outer PI holds v_dc, power feedforward exports the incoming
    // EMF power, zero reactive reference (i_gd_ref = 0)
    double v_eff = std::max(v_gq, 0.05);
    double e_v = s.v_dc - p.v_dc_nom;
    double i_gq_ref = p.e_q * s.i_sq / v_eff + g.kp_v * e_v + s.int_v;
    double e_gd = -s.i_gd;
    double e_gq = i_gq_ref - s.i_gq;
    double u_gd = g.kp_c_g * e_gd + s.int_gd;
    double u_gq = g.kp_c_g * e_gq + s.int_gq;
    cmd.v_gc_d = p.x_g * s.i_gq - u_gd;
    cmd.v_gc_q = -p.x_g * s.i_gd + v_gq - u_gq;
    double mag_g = std::hypot(cmd.v_gc_d, cmd.v_gc_q);
    bool sat_g = mag_g > p.modulation_limit;
    if (sat_g) {
        double scale = p.modulation_limit / mag_g;
        cmd.v_gc_d *= scale;
        cmd.v_gc_q *= scale;
    } else {
        s.int_v += g.ki_v * e_v * dt;
        s.int_gd += g.ki_c_g * e_gd * dt;
        s.int_gq += g.ki_c_g * e_gq * dt;
    }
    return cmd;
}

// ---------------------------------------------------------------------------
// Actuator step
// ---------------------------------------------------------------------------

struct ActuatorResult {
    double p_injected = 0.0;  // machine electrical power delivered, pu (step mean)
    cplx s_grid;              // complex power handed to the network, pu on machine base
};

/// Clamp a power command to the converter bound and to the sign admissible
/// for the current flywheel speed (discharge forbidden below the band,
/// charge forbidden above it).
inline double clamp_power_command(double p_cmd, double omega_r, const DsmsParams& p) {
    double cmd = std::clamp(p_cmd, -p.p_bound, p.p_bound);
    if (omega_r <= p.omega_min * p.omega0) cmd = std::min(cmd, 0.0);
    if (omega_r >= p.omega_max * p.omega0) cmd = std::max(cmd, 0.0);
    return cmd;
}

namespace detail {

inline void integrate_full_ode(DsmsState& s, const ConverterCommand& cmd, double v_gq, double omega_s,
                               const DsmsParams& p, double dt) {
    auto deriv = [&](const DsmsState& st) { return dsms_derivatives(st, cmd, v_gq, p, omega_s); };
    auto advance = [](const DsmsState& st, const DsmsDerivative& d, double h_step) {
        DsmsState out = st;
        out.i_sd += h_step * d.di_sd;
        out.i_sq += h_step * d.di_sq;
        out.delta_r += h_step * d.ddelta_r;
        out.omega_r += h_step * d.domega_r;
        out.i_gd += h_step * d.di_gd;
        out.i_gq += h_step * d.di_gq;
        out.v_dc += h_step * d.dv_dc;
        return out;
    };
    DsmsDerivative k1 = deriv(s);
    DsmsDerivative k2 = deriv(advance(s, k1, dt / 2));
    DsmsDerivative k3 = deriv(advance(s, k2, dt / 2));
    DsmsDerivative k4 = deriv(advance(s, k3, dt));
    s.i_sd += dt / 6 * (k1.di_sd + 2 * k2.di_sd + 2 * k3.di_sd + k4.di_sd);
    s.i_sq += dt / 6 * (k1.di_sq + 2 * k2.di_sq + 2 * k3.di_sq + k4.di_sq);
    s.delta_r += dt / 6 * (k1.ddelta_r + 2 * k2.ddelta_r + 2 * k3.ddelta_r + k4.ddelta_r);
    s.omega_r += dt / 6 * (k1.domega_r + 2 * k2.domega_r + 2 * k3.domega_r + k4.domega_r);
    s.i_gd += dt / 6 * (k1.di_gd + 2 * k2.di_gd + 2 * k3.di_gd + k4.di_gd);
    s.i_gq += dt / 6 * (k1.di_gq + 2 * k2.di_gq + 2 * k3.di_gq + k4.di_gq);
    s.v_dc += dt / 6 * (k1.dv_dc + 2 * k2.dv_dc + 2 * k3.dv_dc + k4.dv_dc);
}

}  // namespace detail

/// Advance the actuator by dt under power command p_cmd (pu machine base).
/// In every mode the flywheel obeys (2H/omega0) domega_r/dt = -P_e.
inline ActuatorResult actuator_step(DsmsState& s, double p_cmd, double v_gq, double omega_s,
                                    const DsmsParams& p, double dt) {
    ActuatorResult out;
    double cmd = clamp_power_command(p_cmd, s.omega_r, p);
    switch (p.mode) {
        case ActuatorMode::Ideal: {
            s.omega_r -= cmd * p.omega0 / (2.0 * p.h) * dt;
            s.p_act = cmd;
            out.p_injected = cmd;
            out.s_grid = cplx(cmd, 0.0);
            break;
        }
        case ActuatorMode::FirstOrder: {
            double decay = std::exp(-dt / p.tau_c);
            double p0 = s.p_act;
            double energy = cmd * dt + (p0 - cmd) * p.tau_c * (1.0 - decay);  // integral of P over dt
            s.p_act = cmd + (p0 - cmd) * decay;
            s.omega_r -= energy * p.omega0 / (2.0 * p.h);
            out.p_injected = energy / dt;
            out.s_grid = cplx(out.p_injected, 0.0);
            break;
        }
        case ActuatorMode::FullOde: {
            InnerLoopGains gains = InnerLoopGains::from_params(p);
            int substeps = std::max(1, static_cast<int>(std::ceil(dt / p.dt_inner - 1e-9)));
            double h_step = dt / substeps;
            double pe_acc = 0.0, igq_acc = 0.0, igd_acc = 0.0;
            for (int k = 0; k < substeps; ++k) {
                ConverterCommand c = inner_control_step(s, cmd, v_gq, gains, p, h_step);
                double pe0 = p.e_q * s.i_sq, igq0 = s.i_gq, igd0 = s.i_gd;
                detail::integrate_full_ode(s, c, v_gq, omega_s, p, h_step);
                pe_acc += 0.5 * (pe0 + p.e_q * s.i_sq);
                igq_acc += 0.5 * (igq0 + s.i_gq);
                igd_acc += 0.5 * (igd0 + s.i_gd);
            }
            s.p_act = cmd;
            out.p_injected = pe_acc / substeps;
            out.s_grid = cplx(v_gq * igq_acc / substeps, v_gq * igd_acc / substeps);
            break;
        }
    }
    if (s.omega_r < 0.5 * p.omega0 || s.omega_r > 1.5 * p.omega0)
        throw DivergenceError("dsms rotor speed left guard band", 0.0);
    return out;
}

// ---------------------------------------------------------------------------
// Config loading
// ---------------------------------------------------------------------------

inline DsmsParams dsms_params_from_config(const ConfigTable& t, double omega0) {
    DsmsParams p;
    p.omega0 = omega0;
    p.e_q = t.num_or("e_q", p.e_q);
    p.r_s = t.num_or("r_s", p.r_s);
    p.x_s = t.num_or("x_s", p.x_s);
    p.r_g = t.num_or("r_g", p.r_g);
    p.x_g = t.num_or("x_g", p.x_g);
    p.h = t.num_or("h", p.h);
    p.c_dc = t.num_or("c_dc", p.c_dc);
    p.v_dc_nom = t.num_or("v_dc_nom", p.v_dc_nom);
    p.base_mva = t.num_or("base_mva", p.base_mva);
    p.p_bound = t.num_or("b", p.p_bound);
    p.omega_min = t.num_or("omega_min", p.omega_min);
    p.omega_max = t.num_or("omega_max", p.omega_max);
    p.tau_c = t.num_or("tau_c", p.tau_c);
    p.modulation_limit = t.num_or("modulation_limit", p.modulation_limit);
    p.current_loop_bw = t.num_or("current_loop_bw", p.current_loop_bw);
    p.vdc_loop_bw = t.num_or("vdc_loop_bw", p.vdc_loop_bw);
    p.dt_inner = t.num_or("dt_inner", p.dt_inner);
    std::string mode = t.str_or("mode", "first_order");
    if (mode == "ideal") p.mode = ActuatorMode::Ideal;
    else if (mode == "first_order") p.mode = ActuatorMode::FirstOrder;
    else if (mode == "full_ode") p.mode = ActuatorMode::FullOde;
    else throw ConfigError("unknown dsms mode '" + mode + "'");
    p.validate();
    return p;
}

}  // namespace kgmpc
