// scratch probe (not installed): equilibrium + fault response sanity
#include <cstdio>

#include "kgmpc/harness.hpp"

using namespace kgmpc;

int main() {
    ConfigFile cfg = load_config("configs/kundur_two_area.toml");
    GridModel base = grid_model_from_config(cfg);
    DsmsParams dsms = dsms_params_from_config(cfg.table("dsms"), base.omega0);

    GridModel work = base;
    ReducedNetwork net = build_reduced_network(work);
    GridState eq = solve_equilibrium(work, net);
    std::printf("equilibrium angles (deg):");
    for (int i = 0; i < eq.delta.size(); ++i) std::printf(" %.2f", rad2deg(eq.delta(i)));
    std::printf("\nslack pm = %.4f pu (%.1f MW)\n", work.machines[0].pm, work.machines[0].pm * 100);
    std::printf("bus3 V = %.4f ang %.2f deg\n", std::abs(eq.bus_v(0)), rad2deg(std::arg(eq.bus_v(0))));
    Eigen::VectorXcd v_all = full_network_bus_voltages(work, eq.delta);
    for (int b = 0; b < 11; ++b)
        std::printf("  bus %2d |V| = %.4f ang %.2f\n", b + 1, std::abs(v_all(b)), rad2deg(std::arg(v_all(b))));
    cplx s3 = machine_terminal_injection(work, net, eq, 2);
    std::printf("machine-3 terminal injection: %.4f + j%.4f pu\n", s3.real(), s3.imag());

    for (const char* fault : {"fault1", "fault2"}) {
        for (double dscale : {6.0, 10.0, 12.0, 15.0}) {
            for (const char* tag : {"A", "B"}) {
                GridModel scaled = base;
                for (auto& mach : scaled.machines) mach.d *= dscale;
                VariantModel vm = build_variant(scaled, dsms, variant_from_string(tag));
                SimOptions opt;
                opt.t_end = 20.0;
                Simulator sim(vm.model, fault_script(vm.model, fault), opt, vm.dsms);
                sim.init_equilibrium();
                SimSeries s = sim.run([](double, double) { return 0.0; });
                std::vector<double> df = metrics_series(s, MetricsSignal::MachineSpeed, vm.model, 4);
                Metrics m = compute_metrics(s.t, df, s.u, s.truncated);
                std::size_t argmax = 0;
                for (std::size_t k = 0; k < df.size(); ++k)
                    if (std::abs(df[k]) > std::abs(df[argmax])) argmax = k;
                std::printf("%s D x%.0f variant %s: peak=%.5f at t=%.2f rms=%.6f settle=%.2f\n", fault,
                            dscale, tag, m.peak_df, s.t[argmax], m.rms_df, m.settling_time);
            }
        }
    }
    return 0;
}
