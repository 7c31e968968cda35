#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "kgmpc/koopman.hpp"
#include "kgmpc/rng.hpp"
#include "kgmpc/sha256.hpp"
#include "kgmpc/sim.hpp"

namespace kgmpc {

// ---------------------------------------------------------------------------
// Offline simulation campaigns: sample initial conditions uniformly around
// the equilibrium, excite the storage input with a piecewise-constant random
// law, record (y, u) at the control sampling period, and persist everything
// reproducibly. Randomness is counter-based per trajectory, so results do not
// depend on the number of worker threads.
// ---------------------------------------------------------------------------

enum class InputLaw { PiecewiseConstantUniform, Zero };

struct CampaignConfig {
    int trajectories = 1000;
    double duration = 5.0;  // s
    double ts = 0.05;       // s
    double dt = 1e-3;       // inner integration step
    double t_filter = 0.05;
    double domega_range = 0.05;      // pu, symmetric
    double ddelta_range_deg = 20.0;  // degrees, symmetric
    InputLaw law = InputLaw::PiecewiseConstantUniform;
    double input_range = 0.3;  // pu machine base
    int dwell = 1;             // samples each random input level is held
    std::uint64_t master_seed = 1;
    std::string topology = "base";  // post-fault topology id, echoed in the manifest
    std::string campaign_id = "campaign";

    void validate() const {
        if (trajectories < 0) throw ConfigError("campaign: trajectory count must be >= 0");
        if (duration <= 0 || ts <= 0) throw ConfigError("campaign: duration and Ts must be positive");
        if (domega_range <= 0 || ddelta_range_deg <= 0)
            throw ConfigError("campaign: sampling ranges must be positive-width");
        if (dwell < 1) throw ConfigError("campaign: dwell must be >= 1 step");
        if (input_range < 0) throw ConfigError("campaign: input range must be non-negative");
    }
};

struct InitialCondition {
    Eigen::VectorXd ddelta;  // rad
    Eigen::VectorXd ddomega; // pu
};

/// Uniform draws in the configured intervals; each sample is a pure function
/// of (seed, index) so any subset can be regenerated independently.
inline std::vector<InitialCondition> sample_initial_conditions(int n, int n_machines,
                                                               double ddelta_range_deg,
                                                               double domega_range,
                                                               std::uint64_t seed) {
    std::vector<InitialCondition> out;
    out.reserve(static_cast<std::size_t>(std::max(0, n)));
    for (int i = 0; i < n; ++i) {
        CounterRng rng(seed, 2 * static_cast<std::uint64_t>(i));
        InitialCondition ic;
        ic.ddelta.resize(n_machines);
        ic.ddomega.resize(n_machines);
        double drad = deg2rad(ddelta_range_deg);
        for (int k = 0; k < n_machines; ++k) ic.ddelta(k) = rng.uniform(-drad, drad);
        for (int k = 0; k < n_machines; ++k) ic.ddomega(k) = rng.uniform(-domega_range, domega_range);
        out.push_back(std::move(ic));
    }
    return out;
}

/// Control law of one campaign trajectory: a new uniform level every `dwell`
/// samples, addressed by draw index so evaluation order is irrelevant.
inline ControlLaw campaign_input_law(const CampaignConfig& cfg, std::uint64_t traj_index) {
    if (cfg.law == InputLaw::Zero) return [](double, double) { return 0.0; };
    CounterRng rng(cfg.master_seed, 2 * traj_index + 1);
    double range = cfg.input_range;
    double ts = cfg.ts;
    int dwell = cfg.dwell;
    return [rng, range, ts, dwell](double t, double) mutable {
        auto sample_idx = static_cast<std::uint64_t>(t / ts + 0.5);
        std::uint64_t draw = sample_idx / static_cast<std::uint64_t>(dwell);
        double unit = static_cast<double>(rng.word(draw) >> 11) * 0x1.0p-53;
        return -range + 2.0 * range * unit;
    };
}

struct TrajectoryRecord {
    int id = 0;
    std::uint64_t seed = 0;
    Eigen::VectorXd initial;  // [ddelta; ddomega]
    std::vector<double> t;
    std::vector<double> y;
    std::vector<double> u;
    bool truncated = false;

    std::string to_csv() const {
        CsvWriter csv({"t", "y", "u"});
        for (std::size_t k = 0; k < t.size(); ++k) csv.row({t[k], y[k], u[k]});
        return csv.str();
    }
};

struct Dataset {
    CampaignConfig config;
    std::vector<TrajectoryRecord> records;
    std::string content_hash;  // sha256 over record csv bytes, in id order
    int truncated_count = 0;

    void refresh_hash() {
        Sha256 h;
        truncated_count = 0;
        for (const auto& rec : records) {
            h.update(rec.to_csv());
            if (rec.truncated) ++truncated_count;
        }
        content_hash = h.hex_digest();
    }
};

inline int resolve_jobs(int requested) {
    int jobs = requested;
    if (jobs <= 0) {
        jobs = static_cast<int>(std::thread::hardware_concurrency());
        if (jobs <= 0) jobs = 1;
    }
    if (const char* cap = std::getenv("KGMPC_JOBS")) {
        int limit = std::atoi(cap);
        if (limit > 0) jobs = std::min(jobs, limit);
    }
    return std::max(1, jobs);
}

/// Simulate every trajectory of the campaign on the supplied (post-fault)
/// model. Divergent trajectories are kept with a truncation flag.
inline Dataset run_campaign(const CampaignConfig& cfg, const GridModel& model,
                            const std::optional<DsmsParams>& dsms, int jobs = 0) {
    cfg.validate();
    Dataset ds;
    ds.config = cfg;
    ds.records.resize(static_cast<std::size_t>(cfg.trajectories));
    const int n_machines = static_cast<int>(model.machines.size());
    auto ics = sample_initial_conditions(cfg.trajectories, n_machines, cfg.ddelta_range_deg,
                                         cfg.domega_range, cfg.master_seed);

    std::atomic<int> next{0};
    auto worker = [&]() {
        for (;;) {
            int i = next.fetch_add(1);
            if (i >= cfg.trajectories) return;
            SimOptions opt;
            opt.dt = cfg.dt;
            opt.ts = cfg.ts;
            opt.t_end = cfg.duration;
            opt.t_filter = cfg.t_filter;
            Simulator sim(model, {}, opt, dsms);
            sim.init_perturbed(ics[static_cast<std::size_t>(i)].ddelta,
                               ics[static_cast<std::size_t>(i)].ddomega);
            SimSeries series = sim.run(campaign_input_law(cfg, static_cast<std::uint64_t>(i)));
            TrajectoryRecord rec;
            rec.id = i;
            rec.seed = cfg.master_seed;
            rec.initial.resize(2 * n_machines);
            rec.initial.head(n_machines) = ics[static_cast<std::size_t>(i)].ddelta;
            rec.initial.tail(n_machines) = ics[static_cast<std::size_t>(i)].ddomega;
            rec.t = series.t;
            rec.y = series.y;
            rec.u = series.u;
            rec.truncated = series.truncated;
            ds.records[static_cast<std::size_t>(i)] = std::move(rec);
        }
    };
    int n_jobs = std::min(resolve_jobs(jobs), std::max(1, cfg.trajectories));
    std::vector<std::thread> pool;
    for (int j = 1; j < n_jobs; ++j) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();

    ds.refresh_hash();
    return ds;
}

// ---------------------------------------------------------------------------
// Snapshot assembly
// ---------------------------------------------------------------------------

struct SnapshotAssembly {
    SnapshotSet snapshots;
    int skipped_records = 0;                        // records shorter than nd + 1
    std::vector<std::pair<int, int>> provenance;    // (trajectory id, window start) per column
};

/// Every window of nd consecutive samples lifts to a Z column, the one-step
/// shifted window to the Z+ column, and the U column is the input applied at
/// the newest embedded instant (the record stores u[k] as the input that was
/// held over the interval ending at t[k]). Windows never cross trajectory
/// boundaries: K = sum over records of (len - nd).
inline SnapshotAssembly assemble_snapshots(const Dataset& ds, const DelaySpec& spec) {
    spec.validate();
    if (spec.p != 1 || spec.m != 1) throw ConfigError("assemble_snapshots: campaign data is scalar (p = m = 1)");
    SnapshotAssembly out;
    const int nd = spec.nd;
    std::size_t total = 0;
    for (const auto& rec : ds.records) {
        if (static_cast<int>(rec.t.size()) < nd + 1) {
            ++out.skipped_records;
            continue;
        }
        total += rec.t.size() - static_cast<std::size_t>(nd);
    }
    const int n = spec.lifted_dim();
    out.snapshots.spec = spec;
    out.snapshots.campaign_id = ds.config.campaign_id;
    out.snapshots.z.resize(n, static_cast<Eigen::Index>(total));
    out.snapshots.zplus.resize(n, static_cast<Eigen::Index>(total));
    out.snapshots.u.resize(1, static_cast<Eigen::Index>(total));
    out.provenance.reserve(total);

    Eigen::Index col = 0;
    Eigen::MatrixXd yw(1, nd), uw(1, nd), ywp(1, nd), uwp(1, nd);
    for (const auto& rec : ds.records) {
        const int len = static_cast<int>(rec.t.size());
        if (len < nd + 1) continue;
        for (int w = 0; w + nd < len; ++w) {
            for (int k = 0; k < nd; ++k) {
                yw(0, k) = rec.y[static_cast<std::size_t>(w + k)];
                uw(0, k) = rec.u[static_cast<std::size_t>(w + k)];
                ywp(0, k) = rec.y[static_cast<std::size_t>(w + k + 1)];
                uwp(0, k) = rec.u[static_cast<std::size_t>(w + k + 1)];
            }
            out.snapshots.z.col(col) = lift(build_embedding(yw, uw, spec), spec);
            out.snapshots.zplus.col(col) = lift(build_embedding(ywp, uwp, spec), spec);
            out.snapshots.u(0, col) = rec.u[static_cast<std::size_t>(w + nd)];
            out.provenance.emplace_back(rec.id, w);
            ++col;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset persistence: manifest.txt + traj_<id>.csv (+ snapshots.bin written
// by the datagen tool when a delay count is requested).
// ---------------------------------------------------------------------------

namespace detail {

inline std::string traj_filename(int id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "traj_%05d.csv", id);
    return buf;
}

}  // namespace detail

inline std::string manifest_text(const Dataset& ds) {
    const auto& c = ds.config;
    std::string s;
    s += "format = \"kgmpc-dataset-1\"\n";
    s += "campaign_id = \"" + c.campaign_id + "\"\n";
    s += "trajectories = " + std::to_string(c.trajectories) + "\n";
    s += "duration_s = " + format_double(c.duration) + "\n";
    s += "ts = " + format_double(c.ts) + "\n";
    s += "dt = " + format_double(c.dt) + "\n";
    s += "t_filter = " + format_double(c.t_filter) + "\n";
    s += "domega_range = " + format_double(c.domega_range) + "\n";
    s += "ddelta_range_deg = " + format_double(c.ddelta_range_deg) + "\n";
    s += std::string("input_law = \"") +
         (c.law == InputLaw::Zero ? "zero" : "piecewise_constant_uniform") + "\"\n";
    s += "input_range = " + format_double(c.input_range) + "\n";
    s += "dwell = " + std::to_string(c.dwell) + "\n";
    s += "master_seed = " + std::to_string(c.master_seed) + "\n";
    s += "topology = \"" + c.topology + "\"\n";
    s += "truncated_count = " + std::to_string(ds.truncated_count) + "\n";
    std::string ids;
    for (const auto& rec : ds.records)
        if (rec.truncated) ids += (ids.empty() ? "" : ", ") + std::to_string(rec.id);
    s += "truncated_ids = [" + ids + "]\n";
    s += "content_hash = \"" + ds.content_hash + "\"\n";
    return s;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& rec : ds.records) write_file(dir / detail::traj_filename(rec.id), rec.to_csv());
    write_file(dir / "manifest.txt", manifest_text(ds));
}

inline CampaignConfig campaign_config_from_table(const ConfigTable& t) {
    CampaignConfig c;
    c.trajectories = t.integer_or("trajectories", c.trajectories);
    c.duration = t.num_or("duration_s", c.duration);
    c.ts = t.num_or("ts", c.ts);
    c.dt = t.num_or("dt", c.dt);
    c.t_filter = t.num_or("t_filter", c.t_filter);
    c.domega_range = t.num_or("domega_range", c.domega_range);
    c.ddelta_range_deg = t.num_or("ddelta_range_deg", c.ddelta_range_deg);
    std::string law = t.str_or("input_law", "piecewise_constant_uniform");
    if (law == "zero") c.law = InputLaw::Zero;
    else if (law == "piecewise_constant_uniform") c.law = InputLaw::PiecewiseConstantUniform;
    else throw ConfigError("unknown input law '" + law + "'");
    c.input_range = t.num_or("input_range", c.input_range);
    c.dwell = t.integer_or("dwell", c.dwell);
    c.master_seed = static_cast<std::uint64_t>(t.num_or("master_seed", 1));
    c.topology = t.str_or("topology", c.topology);
    c.campaign_id = t.str_or("campaign_id", c.campaign_id);
    c.validate();
    return c;
}

/// Manifest-only read: campaign echo and stored hash without loading arrays.
inline std::pair<CampaignConfig, std::string> load_manifest(const std::filesystem::path& dir) {
    ConfigFile cfg = load_config(dir / "manifest.txt");
    const ConfigTable& root = cfg.table("");
    if (root.str_or("format", "") != "kgmpc-dataset-1") throw IntegrityError("unknown dataset format");
    CampaignConfig c = campaign_config_from_table(root);
    return {c, root.str("content_hash")};
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    auto [cfg, stored_hash] = load_manifest(dir);
    Dataset ds;
    ds.config = cfg;
    ds.records.resize(static_cast<std::size_t>(cfg.trajectories));
    for (int i = 0; i < cfg.trajectories; ++i) {
        auto path = dir / detail::traj_filename(i);
        CsvTable table = read_csv(path);
        if (table.header != std::vector<std::string>{"t", "y", "u"})
            throw IntegrityError("unexpected columns in " + path.string());
        TrajectoryRecord rec;
        rec.id = i;
        rec.seed = cfg.master_seed;
        rec.t = table.columns[0];
        rec.y = table.columns[1];
        rec.u = table.columns[2];
        ds.records[static_cast<std::size_t>(i)] = std::move(rec);
    }
    ConfigFile manifest = load_config(dir / "manifest.txt");
    if (manifest.table("").has("truncated_ids"))
        for (double id : manifest.table("").num_array("truncated_ids"))
            ds.records.at(static_cast<std::size_t>(id)).truncated = true;
    ds.refresh_hash();
    if (ds.content_hash != stored_hash)
        throw IntegrityError("dataset content hash mismatch (expected " + stored_hash + ", got " +
                             ds.content_hash + ")");
    return ds;
}

}  // namespace kgmpc
