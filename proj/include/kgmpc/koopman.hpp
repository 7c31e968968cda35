#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "kgmpc/common.hpp"
#include "kgmpc/io.hpp"

namespace kgmpc {

// ---------------------------------------------------------------------------
// Lifted linear prediction of measured outputs: time-delay embedding of
// (y, u) windows, a norm observable and a constant observable on top, and a
// least-squares fit of one-step lifted dynamics z+ = A z + B u from snapshot
// matrices.
// ---------------------------------------------------------------------------

struct DelaySpec {
    int nd = 5;        // number of delays
    double ts = 0.05;  // sampling period, s
    int p = 1;         // output dimension
    int m = 1;         // input dimension
    int norm_element = 0;  // which embedding entry feeds the norm observable

    int embedded_dim() const { return nd * (p + m); }
    int lifted_dim() const { return embedded_dim() + 2; }

    void validate() const {
        if (nd < 1) throw ConfigError("DelaySpec: nd must be >= 1");
        if (ts <= 0) throw ConfigError("DelaySpec: Ts must be positive");
        if (p < 1 || m < 1) throw ConfigError("DelaySpec: dimensions must be positive");
        if (norm_element < 0 || norm_element >= embedded_dim())
            throw ConfigError("DelaySpec: norm element out of range");
    }
};

/// Stack output and input windows (oldest first) into the embedded vector
/// [y_i .. y_{i+nd-1}, u_i .. u_{i+nd-1}].
inline Eigen::VectorXd build_embedding(const Eigen::MatrixXd& y_window, const Eigen::MatrixXd& u_window,
                                       const DelaySpec& spec) {
    if (y_window.rows() != spec.p || y_window.cols() != spec.nd)
        throw DimensionError("build_embedding: output window must be p x nd");
    if (u_window.rows() != spec.m || u_window.cols() != spec.nd)
        throw DimensionError("build_embedding: input window must be m x nd");
    Eigen::VectorXd zeta(spec.embedded_dim());
    for (int k = 0; k < spec.nd; ++k) zeta.segment(k * spec.p, spec.p) = y_window.col(k);
    int off = spec.nd * spec.p;
    for (int k = 0; k < spec.nd; ++k) zeta.segment(off + k * spec.m, spec.m) = u_window.col(k);
    return zeta;
}

/// Lift an embedded vector: z = [zeta; |zeta(norm_element)|; 1].
inline Eigen::VectorXd lift(const Eigen::VectorXd& zeta, const DelaySpec& spec) {
    if (zeta.size() != spec.embedded_dim()) throw DimensionError("lift: embedding size mismatch");
    Eigen::VectorXd z(spec.lifted_dim());
    z.head(zeta.size()) = zeta;
    z(zeta.size()) = std::abs(zeta(spec.norm_element));
    z(zeta.size() + 1) = 1.0;
    return z;
}

/// Snapshot matrices for the regression: columns of zplus are the one-step
/// shifted lifts of the same trajectory windows as z.
struct SnapshotSet {
    Eigen::MatrixXd z;      // N x K
    Eigen::MatrixXd zplus;  // N x K
    Eigen::MatrixXd u;      // m x K
    DelaySpec spec;
    std::string campaign_id;  // provenance (not persisted in the binary format)

    int count() const { return static_cast<int>(z.cols()); }

    void validate() const {
        if (z.cols() != zplus.cols() || z.cols() != u.cols())
            throw DimensionError("SnapshotSet: column counts differ");
        if (z.rows() != spec.lifted_dim() || zplus.rows() != spec.lifted_dim() || u.rows() != spec.m)
            throw DimensionError("SnapshotSet: row counts inconsistent with DelaySpec");
    }
};

struct LinearPredictor {
    Eigen::MatrixXd a;  // N x N
    Eigen::MatrixXd b;  // N x m
    Eigen::MatrixXd c;  // p x N, selects the newest output coordinate(s)
    DelaySpec spec;
    double residual = 0.0;         // ||Zplus - A Z - B U||_F at the fit
    double condition = 0.0;        // condition estimate of [Z; U]
    bool underdetermined = false;  // K < N + m warning flag

    int lifted_dim() const { return static_cast<int>(a.rows()); }
};

/// Selector extracting the newest output coordinates from a lifted state.
inline Eigen::MatrixXd output_selector(const DelaySpec& spec) {
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(spec.p, spec.lifted_dim());
    for (int i = 0; i < spec.p; ++i) c(i, (spec.nd - 1) * spec.p + i) = 1.0;
    return c;
}

struct EdmdResult {
    Eigen::MatrixXd a;
    Eigen::MatrixXd b;
    double residual = 0.0;
    double condition = 0.0;
    bool underdetermined = false;
};

/// Core EDMD regression on raw snapshot matrices:
/// [A B] = Zplus * pinv([Z; U]), computed through a rank-revealing
/// least-squares solve (complete orthogonal decomposition), which tolerates
/// the near-dependent rows a delay embedding can produce.
inline EdmdResult edmd_regress(const Eigen::MatrixXd& z, const Eigen::MatrixXd& zplus,
                               const Eigen::MatrixXd& u) {
    const auto n = z.rows();
    const auto m = u.rows();
    const auto k = z.cols();
    if (k == 0) throw DimensionError("edmd_regress: empty snapshot set");
    if (zplus.rows() != n || zplus.cols() != k || u.cols() != k)
        throw DimensionError("edmd_regress: snapshot matrix shapes disagree");
    if (!z.allFinite() || !zplus.allFinite() || !u.allFinite())
        throw std::invalid_argument("edmd_regress: snapshot data contains non-finite entries");

    Eigen::MatrixXd regressors(n + m, k);
    regressors.topRows(n) = z;
    regressors.bottomRows(m) = u;

    // min over X of ||X * regressors - Zplus||_F  ==  regressors^T X^T ~ Zplus^T
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(regressors.transpose());
    cod.setThreshold(1e-10);
    Eigen::MatrixXd ab = cod.solve(zplus.transpose()).transpose();

    EdmdResult res;
    res.a = ab.leftCols(n);
    res.b = ab.rightCols(m);
    res.residual = (zplus - res.a * z - res.b * u).norm();
    res.underdetermined = k < n + m;
    Eigen::VectorXd sv = regressors.bdcSvd().singularValues();
    double smin = sv(sv.size() - 1);
    res.condition = smin > 0 ? sv(0) / smin : std::numeric_limits<double>::infinity();
    return res;
}

inline LinearPredictor fit(const SnapshotSet& snaps) {
    snaps.validate();
    EdmdResult res = edmd_regress(snaps.z, snaps.zplus, snaps.u);
    LinearPredictor pred;
    pred.spec = snaps.spec;
    pred.a = std::move(res.a);
    pred.b = std::move(res.b);
    pred.c = output_selector(snaps.spec);
    pred.residual = res.residual;
    pred.condition = res.condition;
    pred.underdetermined = res.underdetermined;
    return pred;
}

struct PredictedTrajectory {
    Eigen::MatrixXd z;  // N x (L+1), lifted states including z0
    Eigen::MatrixXd y;  // p x (L+1), extracted outputs
};

/// Iterate z_{k+1} = A z_k + B u_k over the provided input sequence.
inline PredictedTrajectory predict(const LinearPredictor& pred, const Eigen::VectorXd& z0,
                                   const Eigen::MatrixXd& u_seq) {
    const int n = pred.lifted_dim();
    if (z0.size() != n) throw DimensionError("predict: z0 size mismatch");
    if (u_seq.size() > 0 && u_seq.rows() != pred.spec.m) throw DimensionError("predict: input dimension mismatch");
    const int steps = static_cast<int>(u_seq.cols());
    PredictedTrajectory out;
    out.z.resize(n, steps + 1);
    out.z.col(0) = z0;
    for (int i = 0; i < steps; ++i) out.z.col(i + 1) = pred.a * out.z.col(i) + pred.b * u_seq.col(i);
    out.y = pred.c * out.z;
    return out;
}

/// Relative RMSE in percent: 100 * ||pred - true||_F / ||true||_F over the
/// sampled trajectory.
inline double relative_rmse(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& truth) {
    if (predicted.rows() != truth.rows() || predicted.cols() != truth.cols())
        throw DimensionError("relative_rmse: shape mismatch");
    if (truth.size() == 0) throw DimensionError("relative_rmse: empty trajectories");
    double denom = truth.norm();
    if (denom == 0.0) throw std::invalid_argument("relative_rmse: reference trajectory is identically zero");
    return 100.0 * (predicted - truth).norm() / denom;
}

// ---------------------------------------------------------------------------
// Persistence: KPSNAP1 (snapshots) and KPMOD1 (predictor), little-endian,
// row-major 64-bit floats.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_matrix(BinaryWriter& w, const Eigen::MatrixXd& mat) {
    for (Eigen::Index i = 0; i < mat.rows(); ++i)
        for (Eigen::Index j = 0; j < mat.cols(); ++j) w.f64(mat(i, j));
}

inline Eigen::MatrixXd read_matrix(BinaryReader& r, Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd mat(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) mat(i, j) = r.f64();
    return mat;
}

}  // namespace detail

inline void save_snapshots(const SnapshotSet& snaps, const std::filesystem::path& path) {
    snaps.validate();
    BinaryWriter w;
    w.magic8("KPSNAP1");
    w.u64(static_cast<std::uint64_t>(snaps.spec.lifted_dim()));
    w.u64(static_cast<std::uint64_t>(snaps.spec.m));
    w.u64(static_cast<std::uint64_t>(snaps.count()));
    detail::write_matrix(w, snaps.z);
    detail::write_matrix(w, snaps.zplus);
    detail::write_matrix(w, snaps.u);
    w.save(path);
}

/// Load snapshot matrices; the delay spec is reconstructed only partially
/// (N and m are stored; nd/Ts metadata live in the dataset manifest).
inline SnapshotSet load_snapshots(const std::filesystem::path& path, const DelaySpec& spec) {
    BinaryReader r(read_file(path));
    r.expect_magic8("KPSNAP1");
    auto n = static_cast<Eigen::Index>(r.u64());
    auto m = static_cast<Eigen::Index>(r.u64());
    auto k = static_cast<Eigen::Index>(r.u64());
    if (n != spec.lifted_dim() || m != spec.m)
        throw IntegrityError("snapshot file dimensions do not match the delay spec");
    SnapshotSet snaps;
    snaps.spec = spec;
    snaps.z = detail::read_matrix(r, n, k);
    snaps.zplus = detail::read_matrix(r, n, k);
    snaps.u = detail::read_matrix(r, m, k);
    if (!r.at_end()) throw IntegrityError("trailing bytes in snapshot file");
    return snaps;
}

inline void save_predictor(const LinearPredictor& pred, const std::filesystem::path& path) {
    BinaryWriter w;
    w.magic8("KPMOD1");
    w.u64(static_cast<std::uint64_t>(pred.lifted_dim()));
    w.u64(static_cast<std::uint64_t>(pred.spec.m));
    w.u64(static_cast<std::uint64_t>(pred.spec.p));
    w.u64(static_cast<std::uint64_t>(pred.spec.nd));
    w.u64(static_cast<std::uint64_t>(pred.spec.norm_element));
    w.f64(pred.spec.ts);
    detail::write_matrix(w, pred.a);
    detail::write_matrix(w, pred.b);
    detail::write_matrix(w, pred.c);
    w.f64(pred.residual);
    w.f64(pred.condition);
    w.save(path);
}

inline LinearPredictor load_predictor(const std::filesystem::path& path) {
    BinaryReader r(read_file(path));
    r.expect_magic8("KPMOD1");
    auto n = static_cast<Eigen::Index>(r.u64());
    LinearPredictor pred;
    pred.spec.m = static_cast<int>(r.u64());
    pred.spec.p = static_cast<int>(r.u64());
    pred.spec.nd = static_cast<int>(r.u64());
    pred.spec.norm_element = static_cast<int>(r.u64());
    pred.spec.ts = r.f64();
    pred.spec.validate();
    if (n != pred.spec.lifted_dim()) throw IntegrityError("predictor dimensions inconsistent");
    pred.a = detail::read_matrix(r, n, n);
    pred.b = detail::read_matrix(r, n, pred.spec.m);
    pred.c = detail::read_matrix(r, pred.spec.p, n);
    pred.residual = r.f64();
    pred.condition = r.f64();
    if (!r.at_end()) throw IntegrityError("trailing bytes in predictor file");
    return pred;
}

}  // namespace kgmpc
