#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <vector>

#include "kgmpc/dsms.hpp"
#include "kgmpc/grid.hpp"

namespace kgmpc {

// ---------------------------------------------------------------------------
// Fixed-step co-simulation of the grid and the storage actuator. The grid
// integrates at dt with the storage injection held over each step; the
// frequency measurement and the control law run every Ts (an integer number
// of inner steps). Power commands returned by the control law are in pu on
// the storage machine base.
// ---------------------------------------------------------------------------

enum class MeasurementMode { BusAngle, MachineSpeed };

struct SimOptions {
    double dt = 1e-3;
    double ts = 0.05;
    double t_end = 15.0;
    double t_filter = 0.05;            // frequency-meter time constant
    MeasurementMode measurement = MeasurementMode::BusAngle;
    int speed_machine = 0;             // machine index for MachineSpeed mode

    int steps_per_sample() const {
        double ratio = ts / dt;
        int r = static_cast<int>(ratio + 0.5);
        if (r < 1 || std::abs(ratio - r) > 1e-9) throw ConfigError("Ts must be an integer multiple of dt");
        return r;
    }
};

/// Time-aligned outputs of one run. Sample arrays are at Ts spacing; u[k] is
/// the command that was applied over the interval ending at t[k] (so u[0] is
/// the pre-run hold, normally zero).
struct SimSeries {
    std::vector<double> t;
    std::vector<double> y;          // measured frequency deviation, pu
    std::vector<double> u;          // commanded storage power, pu machine base
    std::vector<double> p_dsms;     // delivered storage power, pu machine base
    std::vector<double> omega_r;    // storage rotor speed, rad/s (0 when absent)
    Eigen::MatrixXd delta;          // machines x samples
    Eigen::MatrixXd domega;         // machines x samples
    bool truncated = false;         // divergence guard tripped
    double truncated_at = 0.0;
    int network_rebuilds = 0;

    std::size_t samples() const { return t.size(); }
};

using ControlLaw = std::function<double(double t, double y)>;

class Simulator {
  public:
    Simulator(GridModel model, std::vector<Event> events, SimOptions options,
              std::optional<DsmsParams> dsms_params = std::nullopt)
        : model_(std::move(model)), events_(std::move(events)), opt_(options) {
        check_events_sorted(events_);
        net_ = build_reduced_network(model_);
        if (dsms_params) {
            dsms_params->validate();
            dsms_params_ = *dsms_params;
            dsms_state_ = dsms_equilibrium_state(*dsms_params_);
        }
    }

    /// Start from the solved zero-injection equilibrium.
    void init_equilibrium() {
        state_ = solve_equilibrium(model_, net_);
        post_init();
    }

    /// Start from the equilibrium perturbed by per-machine angle/speed offsets.
    void init_perturbed(const Eigen::VectorXd& ddelta, const Eigen::VectorXd& ddomega) {
        state_ = solve_equilibrium(model_, net_);
        if (ddelta.size() != state_.delta.size() || ddomega.size() != state_.domega.size())
            throw DimensionError("init_perturbed: perturbation size mismatch");
        state_.delta += ddelta;
        state_.domega += ddomega;
        NetworkSolution sol = solve_network(net_, machine_phasors(model_, state_.delta),
                                            Eigen::VectorXcd::Zero(net_.n_retained));
        state_.bus_v = sol.v_retained;
        post_init();
    }

    const GridModel& model() const { return model_; }
    const GridState& state() const { return state_; }
    const DsmsState& dsms_state() const { return dsms_state_; }

    /// Run to t_end; `law` is evaluated at every measurement instant and its
    /// return value is applied until the next one. Divergence truncates the
    /// series instead of propagating.
    SimSeries run(const ControlLaw& law) {
        SimSeries series;
        const int r = opt_.steps_per_sample();
        const int n_steps = static_cast<int>(opt_.t_end / opt_.dt + 0.5);
        const int n_machines = static_cast<int>(model_.machines.size());
        const int n_samples = n_steps / r + 1;
        series.delta.resize(n_machines, n_samples);
        series.domega.resize(n_machines, n_samples);

        FrequencyMeter meter(model_.omega0, opt_.t_filter, opt_.ts);
        double p_delivered = 0.0;

        auto take_sample = [&](int sample_idx) {
            double y = measure(meter);
            series.t.push_back(state_.t);
            series.y.push_back(y);
            series.u.push_back(u_cmd_);
            series.p_dsms.push_back(p_delivered);
            series.omega_r.push_back(dsms_params_ ? dsms_state_.omega_r : 0.0);
            series.delta.col(sample_idx) = state_.delta;
            series.domega.col(sample_idx) = state_.domega;
            v_gq_ = dsms_voltage_mag();
            omega_s_ = model_.omega0 * (1.0 + y);
            u_cmd_ = law(state_.t, y);
        };

        take_sample(0);
        int sample_idx = 1;
        for (int k = 1; k <= n_steps; ++k) {
            double t_prev = state_.t;
            double t_now = t_prev + opt_.dt;
            try {
                if (apply_events(model_, events_, t_prev, t_now)) {
                    net_ = build_reduced_network(model_);
                    ++series.network_rebuilds;
                }
                std::map<int, cplx> injections = model_.scripted_injections;
                if (dsms_params_) {
                    ActuatorResult ar = actuator_step(dsms_state_, u_cmd_, v_gq_, omega_s_,
                                                      *dsms_params_, opt_.dt);
                    p_delivered = ar.p_injected;
                    injections[model_.dsms_bus] +=
                        ar.s_grid * (dsms_params_->base_mva / model_.base_mva);
                }
                state_ = step_grid(state_, model_, net_, injections, opt_.dt);
            } catch (const DivergenceError& e) {
                series.truncated = true;
                series.truncated_at = e.time != 0.0 ? e.time : t_now;
                break;
            }
            if (k % r == 0) take_sample(sample_idx++);
        }
        if (series.truncated) {
            series.delta.conservativeResize(n_machines, sample_idx);
            series.domega.conservativeResize(n_machines, sample_idx);
        }
        return series;
    }

  private:
    void post_init() {
        u_cmd_ = 0.0;
        v_gq_ = dsms_voltage_mag();
        omega_s_ = model_.omega0;
    }

    double dsms_voltage_mag() const {
        if (state_.bus_v.size() == 0) return 1.0;
        return std::abs(state_.bus_v(net_.retained_index(model_.dsms_bus)));
    }

    double measure(FrequencyMeter& meter) {
        if (opt_.measurement == MeasurementMode::MachineSpeed)
            return state_.domega(opt_.speed_machine);
        double angle = std::arg(state_.bus_v(net_.retained_index(model_.dsms_bus)));
        return meter.push(angle);
    }

    GridModel model_;
    ReducedNetwork net_;
    GridState state_;
    std::vector<Event> events_;
    SimOptions opt_;
    std::optional<DsmsParams> dsms_params_;
    DsmsState dsms_state_;
    double u_cmd_ = 0.0;
    double v_gq_ = 1.0;
    double omega_s_ = 2.0 * kPi * 60.0;
};

/// Time-series CSV: `t,delta_1..delta_n,domega_1..domega_n,f_dsms_bus,pe_dsms`.
inline std::string series_to_csv(const SimSeries& series) {
    const int n = static_cast<int>(series.delta.rows());
    std::vector<std::string> header{"t"};
    for (int i = 1; i <= n; ++i) header.push_back("delta_" + std::to_string(i));
    for (int i = 1; i <= n; ++i) header.push_back("domega_" + std::to_string(i));
    header.push_back("f_dsms_bus");
    header.push_back("pe_dsms");
    CsvWriter csv(header);
    for (std::size_t k = 0; k < series.samples(); ++k) {
        std::vector<double> row;
        row.push_back(series.t[k]);
        for (int i = 0; i < n; ++i) row.push_back(series.delta(i, static_cast<Eigen::Index>(k)));
        for (int i = 0; i < n; ++i) row.push_back(series.domega(i, static_cast<Eigen::Index>(k)));
        row.push_back(series.y[k]);
        row.push_back(series.p_dsms[k]);
        csv.row(row);
    }
    return csv.str();
}

}  // namespace kgmpc
