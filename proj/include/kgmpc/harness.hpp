#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kgmpc/datagen.hpp"
#include "kgmpc/mpc.hpp"
#include "kgmpc/sim.hpp"

namespace kgmpc {

// ---------------------------------------------------------------------------
// Experiment orchestration: the three system variants, the two fault
// scripts, closed-loop runs, and side-by-side damping metrics.
//   A: the benchmark as configured.
//   B: the storage-slot machine replaced by a constant negative load carrying
//      its pre-fault injection (an inertia-less source).
//   C: B plus the converter-interfaced flywheel at the same bus, controlled
//      by the lifted-predictor MPC with zero steady-state injection.
// ---------------------------------------------------------------------------

enum class VariantTag { A, B, C };

inline VariantTag variant_from_string(const std::string& s) {
    if (s == "A" || s == "a") return VariantTag::A;
    if (s == "B" || s == "b") return VariantTag::B;
    if (s == "C" || s == "c") return VariantTag::C;
    throw ConfigError("unknown system variant '" + s + "'");
}

inline std::string to_string(VariantTag tag) {
    switch (tag) {
        case VariantTag::A: return "A";
        case VariantTag::B: return "B";
        default: return "C";
    }
}

struct VariantModel {
    GridModel model;
    std::optional<DsmsParams> dsms;
};

/// Replace the storage-slot machine by a constant-impedance negative load
/// that reproduces its pre-fault terminal injection at the solved pre-fault
/// voltage, so boundary power flows are unchanged.
inline VariantModel build_variant(const GridModel& base, const DsmsParams& dsms_params, VariantTag tag) {
    VariantModel out;
    out.model = base;
    if (tag == VariantTag::A) return out;

    int slot = base.machine_at_bus(base.dsms_bus);
    if (slot < 0) throw ConfigError("no machine at the storage bus to replace");

    GridModel work = base;
    ReducedNetwork net = build_reduced_network(work);
    GridState eq = solve_equilibrium(work, net);
    cplx s_inj = machine_terminal_injection(work, net, eq, slot);
    double vmag = std::abs(eq.bus_v(net.retained_index(base.dsms_bus)));

    out.model.machines.erase(out.model.machines.begin() + slot);
    Load neg;
    neg.bus = base.dsms_bus;
    neg.s = -s_inj / (vmag * vmag);  // folded as admittance conj(s); injects s_inj at the pre-fault voltage
    out.model.loads.push_back(neg);
    validate_model(out.model);

    if (tag == VariantTag::C) out.dsms = dsms_params;
    return out;
}

// ---------------------------------------------------------------------------
// Fault scripts (times in seconds; "6 cycles" at 60 Hz = 0.1 s)
// ---------------------------------------------------------------------------

inline std::vector<Event> fault_script(const GridModel& model, const std::string& id,
                                       cplx fault_admittance = cplx(1e4, -1e4)) {
    if (id == "none") return {};
    if (id == "fault1") {
        int tie = model.find_branch(7, 8, 0);
        return {make_bus_fault(2.0, 7, fault_admittance), make_fault_clear(2.1, 7), make_trip(2.1, tie),
                make_reclose(5.0, tie)};
    }
    if (id == "fault2") {
        int tie = model.find_branch(8, 9, 0);
        return {make_bus_fault(2.0, 9, fault_admittance), make_fault_clear(2.1, 9), make_trip(2.1, tie),
                make_reclose(5.0, tie)};
    }
    throw ConfigError("unknown fault script '" + id + "'");
}

/// Post-fault topology used for training campaigns.
inline GridModel apply_topology(GridModel model, const std::string& id) {
    if (id == "base") return model;
    if (id == "fault1_post") {
        model.branches[static_cast<std::size_t>(model.find_branch(7, 8, 0))].in_service = false;
    } else if (id == "fault2_post") {
        model.branches[static_cast<std::size_t>(model.find_branch(8, 9, 0))].in_service = false;
    } else {
        throw ConfigError("unknown topology id '" + id + "'");
    }
    validate_model(model);
    return model;
}

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

struct ScenarioConfig {
    VariantTag variant = VariantTag::A;
    std::string fault = "fault1";
    double t_end = 15.0;
    double dt = 1e-3;
    double ts = 0.05;
    double t_filter = 0.05;
    MeasurementMode measurement = MeasurementMode::BusAngle;
    int speed_machine = 0;
    MpcConfig controller;
    std::string predictor_path;
    std::vector<Event> custom_events;

    void validate() const {
        if (variant == VariantTag::C && predictor_path.empty())
            throw ConfigError("variant C requires a predictor file");
        if (t_end <= 0) throw ConfigError("scenario: t_end must be positive");
    }
};

inline ScenarioConfig scenario_from_config(const ConfigFile& cfg) {
    ScenarioConfig sc;
    const ConfigTable& t = cfg.table("scenario");
    sc.variant = variant_from_string(t.str_or("variant", "A"));
    sc.fault = t.str_or("fault", "fault1");
    sc.t_end = t.num_or("t_end", sc.t_end);
    sc.dt = t.num_or("dt", sc.dt);
    sc.ts = t.num_or("ts", sc.ts);
    sc.t_filter = t.num_or("t_filter", sc.t_filter);
    std::string meas = t.str_or("measurement", "bus_angle");
    if (meas == "bus_angle") sc.measurement = MeasurementMode::BusAngle;
    else if (meas == "machine_speed") sc.measurement = MeasurementMode::MachineSpeed;
    else throw ConfigError("unknown measurement mode '" + meas + "'");
    sc.speed_machine = t.integer_or("speed_machine", 0);
    sc.predictor_path = t.str_or("predictor", "");
    if (cfg.has_table("controller")) sc.controller = mpc_config_from_table(cfg.table("controller"));
    for (const auto& ev : cfg.list("event")) {
        std::string kind = ev.str("kind");
        double when = ev.num("t");
        if (kind == "bus_fault")
            sc.custom_events.push_back(make_bus_fault(when, ev.integer("bus"),
                                                      cplx(ev.num_or("g", 1e4), ev.num_or("b", -1e4))));
        else if (kind == "clear_fault") sc.custom_events.push_back(make_fault_clear(when, ev.integer("bus")));
        else if (kind == "trip") sc.custom_events.push_back(make_trip(when, ev.integer("branch")));
        else if (kind == "reclose") sc.custom_events.push_back(make_reclose(when, ev.integer("branch")));
        else if (kind == "set_injection")
            sc.custom_events.push_back(make_injection(when, ev.integer("bus"),
                                                      cplx(ev.num_or("p", 0.0), ev.num_or("q", 0.0))));
        else throw ConfigError("unknown event kind '" + kind + "'");
    }
    sc.validate();
    return sc;
}

// ---------------------------------------------------------------------------
// Scenario run
// ---------------------------------------------------------------------------

struct ScenarioResult {
    SimSeries series;
    std::string applied_events_digest;  // sha256 of the event script
    VariantTag variant = VariantTag::A;
};

inline std::string event_script_digest(const std::vector<Event>& events) {
    Sha256 h;
    for (const auto& ev : events) {
        std::string line = format_double(ev.t) + "," + std::to_string(static_cast<int>(ev.kind)) + "," +
                           std::to_string(ev.bus) + "," + std::to_string(ev.branch) + "," +
                           format_double(ev.value.real()) + "," + format_double(ev.value.imag()) + "\n";
        h.update(line);
    }
    return h.hex_digest();
}

inline ScenarioResult run_scenario(const GridModel& base, const DsmsParams& dsms_params,
                                   const ScenarioConfig& sc,
                                   const LinearPredictor* predictor = nullptr) {
    sc.validate();
    VariantModel vm = build_variant(base, dsms_params, sc.variant);
    std::vector<Event> events =
        sc.fault == "custom" ? sc.custom_events : fault_script(vm.model, sc.fault);

    SimOptions opt;
    opt.dt = sc.dt;
    opt.ts = sc.ts;
    opt.t_end = sc.t_end;
    opt.t_filter = sc.t_filter;
    opt.measurement = sc.measurement;
    opt.speed_machine = sc.speed_machine;

    Simulator sim(vm.model, events, opt, vm.dsms);
    sim.init_equilibrium();

    ScenarioResult result;
    result.variant = sc.variant;
    result.applied_events_digest = event_script_digest(events);

    if (sc.variant == VariantTag::C) {
        if (predictor == nullptr) throw ConfigError("variant C requires a predictor");
        if (std::abs(predictor->spec.ts - sc.ts) > 1e-12)
            throw ConfigError("predictor sampling period does not match the scenario Ts");
        Controller controller(*predictor, sc.controller);
        result.series = sim.run([&](double, double y) { return controller.control_step(y).u0; });
    } else {
        result.series = sim.run([](double, double) { return 0.0; });
    }
    return result;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Metrics {
    double peak_df = 0.0;        // max |frequency deviation|, pu
    double rms_df = 0.0;         // RMS over the evaluation window
    double settling_time = 0.0;  // first time after which |df| stays below threshold
    bool settled = true;
    double control_effort = 0.0;  // integral of u^2 dt
    bool truncated = false;
    bool window_clipped = false;  // evaluation window extended past the data
};

/// Which frequency-deviation signal the damping metrics quantify. The
/// controller always consumes the local bus measurement; metrics default to
/// the rotor-speed deviation of a reference machine, which is free of the
/// algebraic angle transient a bus-frequency estimate shows at the fault
/// switching instants.
enum class MetricsSignal { MeasuredBus, MachineSpeed };

inline std::vector<double> metrics_series(const SimSeries& series, MetricsSignal signal,
                                          const GridModel& model, int machine_bus) {
    if (signal == MetricsSignal::MeasuredBus) return series.y;
    int idx = model.machine_at_bus(machine_bus);
    if (idx < 0) throw ConfigError("metrics: no machine at bus " + std::to_string(machine_bus));
    std::vector<double> df(series.samples());
    for (std::size_t k = 0; k < df.size(); ++k) df[k] = series.domega(idx, static_cast<Eigen::Index>(k));
    return df;
}

inline Metrics compute_metrics(const std::vector<double>& t, const std::vector<double>& df,
                               const std::vector<double>& u, bool truncated, double window_lo = 5.0,
                               double window_hi = 15.0, double settle_threshold = 5e-4) {
    if (t.empty() || t.size() != df.size()) throw DimensionError("compute_metrics: empty or ragged series");
    Metrics m;
    m.truncated = truncated;
    double ts = t.size() > 1 ? t[1] - t[0] : 0.0;
    int rms_count = 0;
    double rms_acc = 0.0;
    int last_above = -1;
    for (std::size_t k = 0; k < t.size(); ++k) {
        double ay = std::abs(df[k]);
        m.peak_df = std::max(m.peak_df, ay);
        if (t[k] >= window_lo && t[k] <= window_hi) {
            rms_acc += df[k] * df[k];
            ++rms_count;
        }
        if (ay >= settle_threshold) last_above = static_cast<int>(k);
        if (k > 0 && k < u.size()) m.control_effort += u[k] * u[k] * ts;
    }
    if (rms_count > 0) m.rms_df = std::sqrt(rms_acc / rms_count);
    if (t.back() < window_hi) m.window_clipped = true;
    if (last_above < 0) {
        m.settling_time = 0.0;
    } else if (last_above + 1 < static_cast<int>(t.size())) {
        m.settling_time = t[static_cast<std::size_t>(last_above + 1)];
    } else {
        m.settling_time = t.back();
        m.settled = false;
    }
    return m;
}

inline Metrics compute_metrics(const SimSeries& series, double window_lo = 5.0, double window_hi = 15.0,
                               double settle_threshold = 5e-4) {
    return compute_metrics(series.t, series.y, series.u, series.truncated, window_lo, window_hi,
                           settle_threshold);
}

// ---------------------------------------------------------------------------
// Side-by-side comparison
// ---------------------------------------------------------------------------

struct ComparisonEntry {
    VariantTag variant;
    Metrics metrics;
    SimSeries series;
    std::string events_digest;
    std::string error;  // non-empty when the variant failed to run
};

struct ComparisonReport {
    std::vector<ComparisonEntry> entries;
    bool ordering_ok = true;   // paper's qualitative ordering held
    bool any_divergence = false;

    const ComparisonEntry* find(VariantTag tag) const {
        for (const auto& e : entries)
            if (e.variant == tag && e.error.empty()) return &e;
        return nullptr;
    }
};

/// Run each requested variant under the identical event script and check the
/// expected orderings: storage damps (C beats B) and lost inertia hurts
/// (B worse than A). Metrics default to the speed deviation of the machine at
/// `metrics_bus` (present in every variant).
inline ComparisonReport compare(const GridModel& base, const DsmsParams& dsms_params,
                                const std::string& fault, const std::vector<VariantTag>& variants,
                                const LinearPredictor* predictor, const MpcConfig& controller_cfg,
                                double t_end = 15.0,
                                MetricsSignal signal = MetricsSignal::MachineSpeed,
                                int metrics_bus = 4) {
    ComparisonReport report;
    for (VariantTag tag : variants) {
        ScenarioConfig sc;
        sc.variant = tag;
        sc.fault = fault;
        sc.t_end = t_end;
        sc.controller = controller_cfg;
        sc.predictor_path = tag == VariantTag::C ? "<in-memory>" : "";
        ComparisonEntry entry;
        entry.variant = tag;
        try {
            VariantModel vm = build_variant(base, dsms_params, tag);
            ScenarioResult res = run_scenario(base, dsms_params, sc, predictor);
            entry.series = std::move(res.series);
            entry.events_digest = res.applied_events_digest;
            entry.metrics = compute_metrics(entry.series.t,
                                            metrics_series(entry.series, signal, vm.model, metrics_bus),
                                            entry.series.u, entry.series.truncated);
            if (entry.series.truncated) report.any_divergence = true;
        } catch (const std::exception& e) {
            entry.error = e.what();
            report.any_divergence = true;
        }
        report.entries.push_back(std::move(entry));
    }
    const ComparisonEntry* a = report.find(VariantTag::A);
    const ComparisonEntry* b = report.find(VariantTag::B);
    const ComparisonEntry* c = report.find(VariantTag::C);
    if (b != nullptr && c != nullptr) {
        if (!(c->metrics.peak_df < b->metrics.peak_df)) report.ordering_ok = false;
        if (!(c->metrics.rms_df < b->metrics.rms_df)) report.ordering_ok = false;
    }
    if (a != nullptr && b != nullptr) {
        if (!(b->metrics.peak_df > a->metrics.peak_df)) report.ordering_ok = false;
    }
    return report;
}

inline std::string comparison_summary_csv(const ComparisonReport& report) {
    std::string out = "variant,peak_df,rms_df,settling_time,settled,control_effort,truncated\n";
    for (const auto& e : report.entries) {
        if (!e.error.empty()) {
            out += to_string(e.variant) + ",error,error,error,error,error,error\n";
            continue;
        }
        const Metrics& m = e.metrics;
        out += to_string(e.variant) + "," + format_double(m.peak_df) + "," + format_double(m.rms_df) +
               "," + format_double(m.settling_time) + "," + (m.settled ? "1" : "0") + "," +
               format_double(m.control_effort) + "," + (m.truncated ? "1" : "0") + "\n";
    }
    return out;
}

}  // namespace kgmpc
