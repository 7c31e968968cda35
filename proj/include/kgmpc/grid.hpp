#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "kgmpc/common.hpp"
#include "kgmpc/config.hpp"

namespace kgmpc {

// ---------------------------------------------------------------------------
// Classical-model multi-machine grid: constant EMF behind transient reactance,
// swing-equation rotor dynamics, constant-impedance loads, Kron-reduced
// network with a small set of retained buses (the storage injection bus plus
// any measurement buses).
// ---------------------------------------------------------------------------

struct Bus {
    int id = 0;
    double kv = 0.0;
};

struct Branch {
    int from = 0;
    int to = 0;
    double r = 0.0;        // series resistance, pu on system base
    double x = 0.0;        // series reactance, pu
    double b_shunt = 0.0;  // total line charging susceptance, pu
    bool in_service = true;
};

struct Machine {
    int bus = 0;
    double h = 0.0;         // inertia constant, s, on system base
    double d = 0.0;         // damping, pu on system base
    double xd_prime = 0.0;  // transient reactance, pu on system base
    double ra = 0.0;        // armature resistance, pu on system base
    double emf = 1.0;       // internal EMF magnitude, pu
    double pm = 0.0;        // mechanical power, pu on system base
};

struct Load {
    int bus = 0;
    cplx s;  // complex power at nominal voltage, pu; folded into Y as admittance
};

struct GridModel {
    std::vector<Bus> buses;
    std::vector<Branch> branches;
    std::vector<Machine> machines;
    std::vector<Load> loads;
    double base_mva = 100.0;
    double omega0 = 2.0 * kPi * 60.0;  // rad/s
    int dsms_bus = 0;
    std::vector<int> retained_buses;  // always contains dsms_bus

    // event-applied state
    std::map<int, cplx> fault_shunts;          // bus id -> fault admittance
    std::map<int, cplx> scripted_injections;   // bus id -> complex power (retained buses)

    int bus_index(int id) const {
        for (std::size_t i = 0; i < buses.size(); ++i)
            if (buses[i].id == id) return static_cast<int>(i);
        throw ConfigError("unknown bus id " + std::to_string(id));
    }
    int machine_at_bus(int bus_id) const {
        for (std::size_t i = 0; i < machines.size(); ++i)
            if (machines[i].bus == bus_id) return static_cast<int>(i);
        return -1;
    }
    int find_branch(int from, int to, int ordinal = 0) const {
        int seen = 0;
        for (std::size_t i = 0; i < branches.size(); ++i) {
            const auto& br = branches[i];
            if ((br.from == from && br.to == to) || (br.from == to && br.to == from)) {
                if (seen == ordinal) return static_cast<int>(i);
                ++seen;
            }
        }
        throw ConfigError("no branch " + std::to_string(from) + "-" + std::to_string(to) +
                          " ordinal " + std::to_string(ordinal));
    }
};

struct GridState {
    Eigen::VectorXd delta;   // rotor angles, rad
    Eigen::VectorXd domega;  // speed deviations, pu on omega0
    double t = 0.0;
    Eigen::VectorXcd bus_v;  // retained-bus voltage phasors from the last solve
};

struct Event {
    enum class Kind { ApplyBusFault, ClearBusFault, TripBranch, RecloseBranch, SetInjection };
    double t = 0.0;
    Kind kind = Kind::ApplyBusFault;
    int bus = -1;
    int branch = -1;
    cplx value;  // fault admittance or injected complex power
};

inline Event make_bus_fault(double t, int bus, cplx y = cplx(1e4, -1e4)) {
    return Event{t, Event::Kind::ApplyBusFault, bus, -1, y};
}
inline Event make_fault_clear(double t, int bus) { return Event{t, Event::Kind::ClearBusFault, bus, -1, {}}; }
inline Event make_trip(double t, int branch) { return Event{t, Event::Kind::TripBranch, -1, branch, {}}; }
inline Event make_reclose(double t, int branch) { return Event{t, Event::Kind::RecloseBranch, -1, branch, {}}; }
inline Event make_injection(double t, int bus, cplx s) { return Event{t, Event::Kind::SetInjection, bus, -1, s}; }

// ---------------------------------------------------------------------------
// Model validation
// ---------------------------------------------------------------------------

namespace detail {

class UnionFind {
  public:
    explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }
    std::size_t find(std::size_t a) {
        while (parent_[a] != a) a = parent_[a] = parent_[parent_[a]];
        return a;
    }
    void unite(std::size_t a, std::size_t b) { parent_[find(a)] = find(b); }

  private:
    std::vector<std::size_t> parent_;
};

}  // namespace detail

inline bool grid_is_connected(const GridModel& model) {
    if (model.buses.empty()) return false;
    detail::UnionFind uf(model.buses.size());
    for (const auto& br : model.branches) {
        if (!br.in_service) continue;
        uf.unite(static_cast<std::size_t>(model.bus_index(br.from)),
                 static_cast<std::size_t>(model.bus_index(br.to)));
    }
    auto root = uf.find(0);
    for (std::size_t i = 1; i < model.buses.size(); ++i)
        if (uf.find(i) != root) return false;
    return true;
}

inline void validate_model(const GridModel& model) {
    if (model.buses.empty()) throw ConfigError("model has no buses");
    if (!grid_is_connected(model)) throw ConfigError("in-service branch graph is not connected");
    for (const auto& br : model.branches)
        if (std::hypot(br.r, br.x) <= 0.0) throw ConfigError("branch with zero impedance");
    for (const auto& m : model.machines) {
        if (m.h <= 0.0) throw ConfigError("machine inertia must be positive");
        if (m.emf <= 0.0) throw ConfigError("machine EMF must be positive");
        if (std::hypot(m.ra, m.xd_prime) <= 0.0) throw ConfigError("machine with zero internal impedance");
        model.bus_index(m.bus);
    }
    bool has_dsms = false;
    for (int b : model.retained_buses) {
        model.bus_index(b);
        if (b == model.dsms_bus) has_dsms = true;
    }
    if (!has_dsms) throw ConfigError("retained-bus set must contain the storage bus");
}

// ---------------------------------------------------------------------------
// Admittance assembly and Kron reduction
// ---------------------------------------------------------------------------

/// Bus admittance matrix over network buses plus machine internal nodes
/// (appended after the buses, in machine order). Loads, active faults and
/// line charging enter as shunts.
inline Eigen::MatrixXcd assemble_admittance(const GridModel& model) {
    const int n = static_cast<int>(model.buses.size());
    const int m = static_cast<int>(model.machines.size());
    Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n + m, n + m);
    for (const auto& br : model.branches) {
        if (!br.in_service) continue;
        int f = model.bus_index(br.from);
        int t = model.bus_index(br.to);
        cplx ys = 1.0 / cplx(br.r, br.x);
        cplx half_charge(0.0, br.b_shunt / 2.0);
        y(f, f) += ys + half_charge;
        y(t, t) += ys + half_charge;
        y(f, t) -= ys;
        y(t, f) -= ys;
    }
    for (const auto& load : model.loads) y(model.bus_index(load.bus), model.bus_index(load.bus)) += std::conj(load.s);
    for (const auto& [bus, yf] : model.fault_shunts) y(model.bus_index(bus), model.bus_index(bus)) += yf;
    for (int k = 0; k < m; ++k) {
        int b = model.bus_index(model.machines[k].bus);
        cplx ym = 1.0 / cplx(model.machines[k].ra, model.machines[k].xd_prime);
        y(n + k, n + k) += ym;
        y(b, b) += ym;
        y(n + k, b) -= ym;
        y(b, n + k) -= ym;
    }
    return y;
}

/// Kron reduction: eliminate all nodes not listed in `retained`.
/// Throws NetworkError naming the offending nodes when the eliminated block
/// is singular (an eliminated subnetwork with no path to a retained node).
inline Eigen::MatrixXcd kron_reduce(const Eigen::MatrixXcd& y, const std::vector<int>& retained) {
    const int n = static_cast<int>(y.rows());
    std::vector<bool> keep(n, false);
    for (int idx : retained) keep[static_cast<std::size_t>(idx)] = true;
    std::vector<int> elim;
    for (int i = 0; i < n; ++i)
        if (!keep[i]) elim.push_back(i);
    const int nr = static_cast<int>(retained.size());
    const int ne = static_cast<int>(elim.size());
    Eigen::MatrixXcd y_rr(nr, nr), y_re(nr, ne), y_er(ne, nr), y_ee(ne, ne);
    for (int i = 0; i < nr; ++i)
        for (int j = 0; j < nr; ++j) y_rr(i, j) = y(retained[i], retained[j]);
    for (int i = 0; i < nr; ++i)
        for (int j = 0; j < ne; ++j) y_re(i, j) = y(retained[i], elim[j]);
    for (int i = 0; i < ne; ++i)
        for (int j = 0; j < nr; ++j) y_er(i, j) = y(elim[i], retained[j]);
    for (int i = 0; i < ne; ++i)
        for (int j = 0; j < ne; ++j) y_ee(i, j) = y(elim[i], elim[j]);
    if (ne == 0) return y_rr;
    Eigen::FullPivLU<Eigen::MatrixXcd> lu(y_ee);
    if (lu.rank() < ne) {
        std::string msg = "singular eliminated block; offending nodes:";
        // nodes in the kernel's support are the disconnected ones
        Eigen::MatrixXcd kernel = lu.kernel();
        for (int i = 0; i < ne; ++i)
            if (kernel.row(i).norm() > 1e-9) msg += " " + std::to_string(elim[i]);
        throw NetworkError(msg);
    }
    return y_rr - y_re * lu.solve(y_er);
}

/// Complex admittance matrix over machine internal nodes (first) and retained
/// buses (after), with everything else eliminated.
struct ReducedNetwork {
    Eigen::MatrixXcd y;
    int n_machines = 0;
    int n_retained = 0;
    std::vector<int> retained_bus_ids;  // network bus ids, in matrix order

    double g(int i, int j) const { return y(i, j).real(); }
    double b(int i, int j) const { return y(i, j).imag(); }
    int dim() const { return n_machines + n_retained; }

    Eigen::MatrixXcd y_rm;                          // retained-bus rows, machine columns
    Eigen::PartialPivLU<Eigen::MatrixXcd> y_rr_lu;  // factor of the retained-bus block

    int retained_index(int bus_id) const {
        for (std::size_t i = 0; i < retained_bus_ids.size(); ++i)
            if (retained_bus_ids[i] == bus_id) return static_cast<int>(i);
        throw ConfigError("bus " + std::to_string(bus_id) + " is not retained");
    }
};

inline ReducedNetwork build_reduced_network(const GridModel& model) {
    const int n = static_cast<int>(model.buses.size());
    const int m = static_cast<int>(model.machines.size());
    Eigen::MatrixXcd y_full = assemble_admittance(model);
    std::vector<int> retained;
    for (int k = 0; k < m; ++k) retained.push_back(n + k);
    for (int b : model.retained_buses) retained.push_back(model.bus_index(b));
    ReducedNetwork net;
    net.y = kron_reduce(y_full, retained);
    net.n_machines = m;
    net.n_retained = static_cast<int>(model.retained_buses.size());
    net.retained_bus_ids = model.retained_buses;
    net.y_rm = net.y.block(m, 0, net.n_retained, m);
    net.y_rr_lu.compute(net.y.block(m, m, net.n_retained, net.n_retained));
    return net;
}

// ---------------------------------------------------------------------------
// Algebraic network solve and electrical power
// ---------------------------------------------------------------------------

/// Active power absorbed from each machine internal node:
/// P_i = sum_j |V_i||V_j| (G_ij cos(d_i-d_j) + B_ij sin(d_i-d_j)),
/// evaluated in complex form. `v_nodes` covers machine nodes then retained buses.
inline Eigen::VectorXd electrical_power(const ReducedNetwork& net, const Eigen::VectorXcd& v_nodes) {
    if (v_nodes.size() != net.dim()) throw DimensionError("electrical_power: node vector size mismatch");
    Eigen::VectorXcd current = net.y * v_nodes;
    Eigen::VectorXd p(net.n_machines);
    for (int i = 0; i < net.n_machines; ++i) p(i) = (v_nodes(i) * std::conj(current(i))).real();
    return p;
}

inline Eigen::VectorXd electrical_power(const ReducedNetwork& net, const Eigen::VectorXd& mags,
                                        const Eigen::VectorXd& angles) {
    if (mags.size() != net.dim() || angles.size() != net.dim())
        throw DimensionError("electrical_power: magnitude/angle size mismatch");
    Eigen::VectorXcd v(net.dim());
    for (int i = 0; i < net.dim(); ++i) v(i) = std::polar(mags(i), angles(i));
    return electrical_power(net, v);
}

struct NetworkSolution {
    Eigen::VectorXcd v_retained;
    int iterations = 0;
    double residual = 0.0;
};

/// Solve the retained-bus voltages with machines as known internal voltages
/// and constant-power injections at retained buses (fixed point on the
/// injection current). Zero injections reduce to one direct linear solve.
inline NetworkSolution solve_network(const ReducedNetwork& net, const Eigen::VectorXcd& machine_v,
                                     const Eigen::VectorXcd& injections,
                                     const Eigen::VectorXcd* warm = nullptr) {
    if (machine_v.size() != net.n_machines) throw DimensionError("solve_network: machine voltage size mismatch");
    if (injections.size() != net.n_retained) throw DimensionError("solve_network: injection size mismatch");
    const Eigen::VectorXcd rhs0 = -net.y_rm * machine_v;
    const bool has_injection = injections.cwiseAbs().maxCoeff() > 0.0;

    NetworkSolution sol;
    Eigen::VectorXcd v = (warm != nullptr && warm->size() == net.n_retained)
                             ? *warm
                             : Eigen::VectorXcd(net.y_rr_lu.solve(rhs0));
    auto injection_current = [&](const Eigen::VectorXcd& volts) {
        Eigen::VectorXcd i = Eigen::VectorXcd::Zero(net.n_retained);
        for (int k = 0; k < net.n_retained; ++k) {
            if (injections(k) == cplx(0.0, 0.0)) continue;
            if (std::abs(volts(k)) < 1e-6)
                throw NetworkError("voltage collapse at injection bus " +
                                   std::to_string(net.retained_bus_ids[k]));
            i(k) = std::conj(injections(k) / volts(k));
        }
        return i;
    };

    const Eigen::MatrixXcd y_rr = net.y.block(net.n_machines, net.n_machines, net.n_retained, net.n_retained);
    constexpr int kMaxIter = 50;
    constexpr double kTol = 1e-8;
    for (int iter = 1; iter <= kMaxIter; ++iter) {
        Eigen::VectorXcd i_inj = injection_current(v);
        Eigen::VectorXcd v_next = net.y_rr_lu.solve(rhs0 + i_inj);
        double res = (y_rr * v_next - rhs0 - injection_current(v_next)).cwiseAbs().maxCoeff();
        sol.iterations = iter;
        sol.residual = res;
        v = v_next;
        if (res <= kTol) {
            sol.v_retained = v;
            return sol;
        }
        if (!has_injection) break;  // linear case cannot improve further
    }
    if (!has_injection && sol.residual <= 1e-6) {  // direct solve, residual is roundoff
        sol.v_retained = v;
        return sol;
    }
    throw NetworkError("network solve did not converge, residual " + std::to_string(sol.residual),
                       sol.residual);
}

inline Eigen::VectorXcd machine_phasors(const GridModel& model, const Eigen::VectorXd& delta) {
    Eigen::VectorXcd v(model.machines.size());
    for (std::size_t i = 0; i < model.machines.size(); ++i) v(i) = std::polar(model.machines[i].emf, delta(i));
    return v;
}

/// Injection vector over retained buses from a bus-id -> power map (pu).
inline Eigen::VectorXcd injection_vector(const ReducedNetwork& net, const std::map<int, cplx>& by_bus) {
    Eigen::VectorXcd s = Eigen::VectorXcd::Zero(net.n_retained);
    for (const auto& [bus, power] : by_bus) s(net.retained_index(bus)) += power;
    return s;
}

// ---------------------------------------------------------------------------
// Swing-equation integration
// ---------------------------------------------------------------------------

inline constexpr double kSpeedGuardBand = 0.2;  // pu; beyond this the run is declared divergent

struct GridDerivative {
    Eigen::VectorXd ddelta;
    Eigen::VectorXd ddomega;
};

inline GridDerivative grid_derivatives(const GridModel& model, const ReducedNetwork& net,
                                       const Eigen::VectorXd& delta, const Eigen::VectorXd& domega,
                                       const Eigen::VectorXcd& injections, Eigen::VectorXcd* v_scratch) {
    Eigen::VectorXcd v_m = machine_phasors(model, delta);
    NetworkSolution sol = solve_network(net, v_m, injections, v_scratch);
    if (v_scratch != nullptr) *v_scratch = sol.v_retained;
    Eigen::VectorXcd nodes(net.dim());
    nodes.head(net.n_machines) = v_m;
    nodes.tail(net.n_retained) = sol.v_retained;
    Eigen::VectorXd pe = electrical_power(net, nodes);
    GridDerivative d;
    d.ddelta = model.omega0 * domega;
    d.ddomega.resize(model.machines.size());
    for (std::size_t i = 0; i < model.machines.size(); ++i) {
        const auto& mach = model.machines[i];
        d.ddomega(static_cast<int>(i)) =
            (mach.pm - pe(static_cast<int>(i)) - mach.d * domega(static_cast<int>(i))) / (2.0 * mach.h);
    }
    return d;
}

/// One fixed-step RK4 step; the network is solved at every internal stage.
/// `injections` (pu complex power per retained bus) are held over the step.
inline GridState step_grid(const GridState& state, const GridModel& model, const ReducedNetwork& net,
                           const std::map<int, cplx>& injections, double dt) {
    if (dt <= 0.0) throw std::invalid_argument("step_grid: dt must be positive");
    Eigen::VectorXcd s_inj = injection_vector(net, injections);
    Eigen::VectorXcd warm = state.bus_v.size() == net.n_retained ? state.bus_v : Eigen::VectorXcd();
    Eigen::VectorXcd* warm_ptr = warm.size() > 0 ? &warm : nullptr;

    auto f = [&](const Eigen::VectorXd& delta, const Eigen::VectorXd& domega) {
        return grid_derivatives(model, net, delta, domega, s_inj, warm_ptr);
    };
    GridDerivative k1 = f(state.delta, state.domega);
    GridDerivative k2 = f(state.delta + 0.5 * dt * k1.ddelta, state.domega + 0.5 * dt * k1.ddomega);
    GridDerivative k3 = f(state.delta + 0.5 * dt * k2.ddelta, state.domega + 0.5 * dt * k2.ddomega);
    GridDerivative k4 = f(state.delta + dt * k3.ddelta, state.domega + dt * k3.ddomega);

    GridState next;
    next.t = state.t + dt;
    next.delta = state.delta + (dt / 6.0) * (k1.ddelta + 2.0 * k2.ddelta + 2.0 * k3.ddelta + k4.ddelta);
    next.domega = state.domega + (dt / 6.0) * (k1.ddomega + 2.0 * k2.ddomega + 2.0 * k3.ddomega + k4.ddomega);

    if (!next.delta.allFinite() || !next.domega.allFinite() ||
        next.domega.cwiseAbs().maxCoeff() >= kSpeedGuardBand)
        throw DivergenceError("grid state left guard band at t=" + std::to_string(next.t), next.t);

    NetworkSolution sol = solve_network(net, machine_phasors(model, next.delta), s_inj, warm_ptr);
    next.bus_v = sol.v_retained;
    return next;
}

// ---------------------------------------------------------------------------
// Event application
// ---------------------------------------------------------------------------

inline void check_events_sorted(const std::vector<Event>& events) {
    for (std::size_t i = 1; i < events.size(); ++i)
        if (events[i].t < events[i - 1].t) throw ConfigError("events must be sorted by time");
}

/// Apply all events with t_prev < t <= t_now, in order. Returns true when the
/// admittance structure changed and the reduced network must be rebuilt.
inline bool apply_events(GridModel& model, const std::vector<Event>& events, double t_prev, double t_now) {
    bool rebuild = false;
    for (const auto& ev : events) {
        if (ev.t <= t_prev || ev.t > t_now) continue;
        switch (ev.kind) {
            case Event::Kind::ApplyBusFault:
                if (model.fault_shunts.count(ev.bus)) throw ConfigError("fault already applied at bus " + std::to_string(ev.bus));
                model.fault_shunts[ev.bus] = ev.value;
                rebuild = true;
                break;
            case Event::Kind::ClearBusFault:
                if (!model.fault_shunts.count(ev.bus))
                    throw ConfigError("clear of non-existent fault at bus " + std::to_string(ev.bus));
                model.fault_shunts.erase(ev.bus);
                rebuild = true;
                break;
            case Event::Kind::TripBranch: {
                auto& br = model.branches.at(static_cast<std::size_t>(ev.branch));
                if (!br.in_service) throw ConfigError("trip of out-of-service branch " + std::to_string(ev.branch));
                br.in_service = false;
                if (!grid_is_connected(model)) {
                    br.in_service = true;
                    throw NetworkError("trip of branch " + std::to_string(ev.branch) + " would island the network");
                }
                rebuild = true;
                break;
            }
            case Event::Kind::RecloseBranch: {
                auto& br = model.branches.at(static_cast<std::size_t>(ev.branch));
                if (br.in_service) throw ConfigError("reclose of in-service branch " + std::to_string(ev.branch));
                br.in_service = true;
                rebuild = true;
                break;
            }
            case Event::Kind::SetInjection:
                model.scripted_injections[ev.bus] = ev.value;
                break;
        }
    }
    return rebuild;
}

// ---------------------------------------------------------------------------
// Bus-frequency measurement
// ---------------------------------------------------------------------------

/// Frequency estimate at a bus: backward-difference angle derivative over the
/// sampling period, low-pass filtered with time constant Tf (exact
/// discretization, so Tf = 0 bypasses the filter).
class FrequencyMeter {
  public:
    FrequencyMeter(double omega0, double t_filter, double ts) : omega0_(omega0), tf_(t_filter), ts_(ts) {
        if (ts <= 0.0) throw std::invalid_argument("FrequencyMeter: Ts must be positive");
    }

    /// Push the next angle sample (rad, spacing Ts); returns filtered pu deviation.
    double push(double angle) {
        if (!primed_) {
            primed_ = true;
            prev_angle_ = angle;
            return y_;
        }
        double raw = wrap_angle(angle - prev_angle_) / (ts_ * omega0_);
        prev_angle_ = angle;
        if (tf_ <= 0.0) {
            y_ = raw;
        } else {
            double alpha = std::exp(-ts_ / tf_);
            y_ = alpha * y_ + (1.0 - alpha) * raw;
        }
        return y_;
    }

    double value() const { return y_; }

  private:
    double omega0_;
    double tf_;
    double ts_;
    bool primed_ = false;
    double prev_angle_ = 0.0;
    double y_ = 0.0;
};

inline double measure_bus_frequency(const std::vector<double>& angles, double omega0, double t_filter,
                                    double ts) {
    if (angles.size() < 2) throw DimensionError("measure_bus_frequency: need at least 2 samples");
    FrequencyMeter meter(omega0, t_filter, ts);
    double y = 0.0;
    for (double a : angles) y = meter.push(a);
    return y;
}

// ---------------------------------------------------------------------------
// Equilibrium
// ---------------------------------------------------------------------------

/// Machines-only admittance (retained buses eliminated as well); valid for
/// equilibrium work where retained-bus injections are zero.
inline Eigen::MatrixXcd machine_only_admittance(const ReducedNetwork& net) {
    std::vector<int> keep(static_cast<std::size_t>(net.n_machines));
    std::iota(keep.begin(), keep.end(), 0);
    return kron_reduce(net.y, keep);
}

/// Solve the classical-model equilibrium: angles such that electrical power
/// matches dispatch for every machine except the slack (index 0), whose pm is
/// replaced by its solved electrical power. Speed deviations are zero.
inline GridState solve_equilibrium(GridModel& model, const ReducedNetwork& net, int slack = 0) {
    const int m = static_cast<int>(model.machines.size());
    if (m == 0) throw ConfigError("equilibrium: no machines");
    Eigen::MatrixXcd y_eff = machine_only_admittance(net);
    Eigen::VectorXd emf(m);
    for (int i = 0; i < m; ++i) emf(i) = model.machines[i].emf;

    auto power = [&](const Eigen::VectorXd& delta) {
        Eigen::VectorXd p = Eigen::VectorXd::Zero(m);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) {
                double dd = delta(i) - delta(j);
                p(i) += emf(i) * emf(j) *
                        (y_eff(i, j).real() * std::cos(dd) + y_eff(i, j).imag() * std::sin(dd));
            }
        return p;
    };

    Eigen::VectorXd delta = Eigen::VectorXd::Zero(m);
    std::vector<int> unknowns;
    for (int i = 0; i < m; ++i)
        if (i != slack) unknowns.push_back(i);
    const int nu = static_cast<int>(unknowns.size());

    for (int iter = 0; iter < 100 && nu > 0; ++iter) {
        Eigen::VectorXd p = power(delta);
        Eigen::VectorXd res(nu);
        for (int k = 0; k < nu; ++k) res(k) = p(unknowns[k]) - model.machines[unknowns[k]].pm;
        if (res.cwiseAbs().maxCoeff() <= 1e-12) break;
        Eigen::MatrixXd jac(nu, nu);
        for (int a = 0; a < nu; ++a) {
            int i = unknowns[a];
            for (int bcol = 0; bcol < nu; ++bcol) {
                int j = unknowns[bcol];
                if (i == j) {
                    double sum = 0.0;
                    for (int l = 0; l < m; ++l) {
                        if (l == i) continue;
                        double dd = delta(i) - delta(l);
                        sum += emf(i) * emf(l) *
                               (-y_eff(i, l).real() * std::sin(dd) + y_eff(i, l).imag() * std::cos(dd));
                    }
                    jac(a, bcol) = sum;
                } else {
                    double dd = delta(i) - delta(j);
                    jac(a, bcol) = emf(i) * emf(j) *
                                   (y_eff(i, j).real() * std::sin(dd) - y_eff(i, j).imag() * std::cos(dd));
                }
            }
        }
        Eigen::VectorXd step = jac.partialPivLu().solve(res);
        double cap = step.cwiseAbs().maxCoeff();
        if (cap > 0.5) step *= 0.5 / cap;  // damp early Newton steps
        for (int k = 0; k < nu; ++k) delta(unknowns[k]) -= step(k);
        if (iter == 99) throw NetworkError("equilibrium Newton did not converge");
    }

    Eigen::VectorXd p = power(delta);
    if (nu > 0) {
        for (int k = 0; k < nu; ++k)
            if (std::abs(p(unknowns[k]) - model.machines[unknowns[k]].pm) > 1e-10)
                throw NetworkError("equilibrium Newton did not converge");
    }
    model.machines[static_cast<std::size_t>(slack)].pm = p(slack);

    GridState state;
    state.delta = delta;
    state.domega = Eigen::VectorXd::Zero(m);
    state.t = 0.0;
    NetworkSolution sol =
        solve_network(net, machine_phasors(model, delta), Eigen::VectorXcd::Zero(net.n_retained));
    state.bus_v = sol.v_retained;
    return state;
}

/// Complex power a machine injects into its terminal bus (the bus must be
/// retained so its voltage is available in the state).
inline cplx machine_terminal_injection(const GridModel& model, const ReducedNetwork& net,
                                       const GridState& state, int machine_idx) {
    const auto& mach = model.machines.at(static_cast<std::size_t>(machine_idx));
    cplx e = std::polar(mach.emf, state.delta(machine_idx));
    cplx v = state.bus_v(net.retained_index(mach.bus));
    cplx ym = 1.0 / cplx(mach.ra, mach.xd_prime);
    cplx current = (e - v) * ym;
    return v * std::conj(current);
}

// ---------------------------------------------------------------------------
// Full-network reference solve (oracle path used by tests and variant sizing)
// ---------------------------------------------------------------------------

/// Voltages at every network bus given machine internal voltages, solving the
/// unreduced nodal equations (constant-power injections not supported here).
inline Eigen::VectorXcd full_network_bus_voltages(const GridModel& model, const Eigen::VectorXd& delta) {
    const int n = static_cast<int>(model.buses.size());
    const int m = static_cast<int>(model.machines.size());
    Eigen::MatrixXcd y = assemble_admittance(model);
    Eigen::VectorXcd v_m = machine_phasors(model, delta);
    Eigen::MatrixXcd y_bb = y.topLeftCorner(n, n);
    Eigen::MatrixXcd y_bm = y.topRightCorner(n, m);
    return y_bb.partialPivLu().solve(-y_bm * v_m);
}

// ---------------------------------------------------------------------------
// Config loading
// ---------------------------------------------------------------------------

inline GridModel grid_model_from_config(const ConfigFile& cfg) {
    GridModel model;
    const auto& sys = cfg.table("system");
    model.base_mva = sys.num("base_mva");
    model.omega0 = 2.0 * kPi * sys.num("f_hz");
    for (const auto& t : cfg.list("bus")) model.buses.push_back({t.integer("id"), t.num_or("kv", 0.0)});
    for (const auto& t : cfg.list("branch")) {
        Branch br;
        br.from = t.integer("from");
        br.to = t.integer("to");
        br.r = t.num_or("r", 0.0);
        br.x = t.num("x");
        br.b_shunt = t.num_or("b", 0.0);
        br.in_service = t.boolean_or("in_service", true);
        model.branches.push_back(br);
    }
    for (const auto& t : cfg.list("machine")) {
        Machine mach;
        mach.bus = t.integer("bus");
        double mbase = t.num_or("base_mva", model.base_mva);
        double ratio = mbase / model.base_mva;
        mach.h = t.num("h") * ratio;
        mach.d = t.num_or("d", 0.0) * ratio;
        mach.xd_prime = t.num("xd_prime") / ratio;
        mach.ra = t.num_or("ra", 0.0) / ratio;
        mach.emf = t.num_or("e", 1.0);
        mach.pm = t.num("p_mw") / model.base_mva;
        model.machines.push_back(mach);
    }
    for (const auto& t : cfg.list("load")) {
        Load load;
        load.bus = t.integer("bus");
        load.s = cplx(t.num_or("p_mw", 0.0), t.num_or("q_mvar", 0.0)) / model.base_mva;
        model.loads.push_back(load);
    }
    const auto& grid = cfg.table("grid");
    model.dsms_bus = grid.integer("dsms_bus");
    for (double b : grid.num_array("retained_buses")) model.retained_buses.push_back(static_cast<int>(b));
    validate_model(model);
    return model;
}

}  // namespace kgmpc
