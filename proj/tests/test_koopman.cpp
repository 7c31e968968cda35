#include <catch_amalgamated.hpp>

#include <filesystem>

#include "kgmpc/koopman.hpp"
#include "kgmpc/rng.hpp"

using namespace kgmpc;
using Catch::Approx;

namespace {

Eigen::MatrixXd random_stable_matrix(CounterRng& rng, int n, double radius) {
    Eigen::MatrixXd a(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = rng.uniform(-1.0, 1.0);
    double rho = a.eigenvalues().cwiseAbs().maxCoeff();
    if (rho > 0) a *= radius / rho;
    return a;
}

}  // namespace

TEST_CASE("delay embedding stacks output and input windows oldest-first") {
    DelaySpec spec;
    spec.nd = 2;
    Eigen::MatrixXd y(1, 2), u(1, 2);
    y << 0.1, 0.2;
    u << 0.0, 0.3;
    Eigen::VectorXd zeta = build_embedding(y, u, spec);
    REQUIRE(zeta.size() == 4);
    CHECK(zeta(0) == 0.1);
    CHECK(zeta(1) == 0.2);
    CHECK(zeta(2) == 0.0);
    CHECK(zeta(3) == 0.3);

    DelaySpec one;
    one.nd = 1;
    Eigen::MatrixXd y1(1, 1), u1(1, 1);
    y1 << 0.7;
    u1 << -0.3;
    Eigen::VectorXd z1 = build_embedding(y1, u1, one);
    REQUIRE(z1.size() == 2);
    CHECK(z1(0) == 0.7);
    CHECK(z1(1) == -0.3);

    CHECK_THROWS_AS(build_embedding(y1, u, spec), DimensionError);
}

TEST_CASE("embedding shift property: the next window is the shifted embedding") {
    DelaySpec spec;
    spec.nd = 3;
    std::vector<double> ys{0.1, -0.2, 0.3, 0.45, -0.05};
    std::vector<double> us{0.0, 0.2, -0.1, 0.3, 0.25};
    auto window = [&](int w) {
        Eigen::MatrixXd y(1, 3), u(1, 3);
        for (int k = 0; k < 3; ++k) {
            y(0, k) = ys[static_cast<std::size_t>(w + k)];
            u(0, k) = us[static_cast<std::size_t>(w + k)];
        }
        return build_embedding(y, u, spec);
    };
    Eigen::VectorXd zeta0 = window(0);
    Eigen::VectorXd zeta1 = window(1);
    // the shifted window drops the oldest sample and appends the new one
    CHECK(zeta1(0) == zeta0(1));
    CHECK(zeta1(1) == zeta0(2));
    CHECK(zeta1(2) == ys[3]);
    CHECK(zeta1(3) == zeta0(4));
    CHECK(zeta1(5) == us[3]);
}

TEST_CASE("lift appends the norm observable and the constant") {
    DelaySpec spec;
    spec.nd = 2;
    Eigen::VectorXd zeta(4);
    zeta << -0.02, 0.01, 0.0, 0.1;
    Eigen::VectorXd z = lift(zeta, spec);
    REQUIRE(z.size() == 6);
    CHECK(z(0) == -0.02);
    CHECK(z(1) == 0.01);
    CHECK(z(2) == 0.0);
    CHECK(z(3) == 0.1);
    CHECK(z(4) == 0.02);  // |zeta(first element)|
    CHECK(z(5) == 1.0);

    Eigen::VectorXd zeros = lift(Eigen::VectorXd::Zero(4), spec);
    CHECK(zeros.head(5).cwiseAbs().maxCoeff() == 0.0);
    CHECK(zeros(5) == 1.0);

    // deterministic: bit-identical on repeat
    Eigen::VectorXd again = lift(zeta, spec);
    CHECK((again.array() == z.array()).all());

    DelaySpec alt = spec;
    alt.norm_element = 3;
    CHECK(lift(zeta, alt)(4) == 0.1);
}

TEST_CASE("edmd regression recovers a scalar lifted system exactly") {
    // z+ = 0.5 z + 1.0 u with persistently exciting input
    CounterRng rng(5, 0);
    const int k = 40;
    Eigen::MatrixXd z(1, k), zp(1, k), u(1, k);
    double state = 0.3;
    for (int i = 0; i < k; ++i) {
        double input = rng.uniform(-1.0, 1.0);
        z(0, i) = state;
        u(0, i) = input;
        state = 0.5 * state + 1.0 * input;
        zp(0, i) = state;
    }
    EdmdResult res = edmd_regress(z, zp, u);
    CHECK(std::abs(res.a(0, 0) - 0.5) < 1e-10);
    CHECK(std::abs(res.b(0, 0) - 1.0) < 1e-10);
    CHECK(res.residual < 1e-12);
}

TEST_CASE("edmd regression: identity dynamics under zero input") {
    CounterRng rng(6, 0);
    const int n = 4, k = 30;
    Eigen::MatrixXd z(n, k);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) z(i, j) = rng.uniform(-1.0, 1.0);
    EdmdResult res = edmd_regress(z, z, Eigen::MatrixXd::Zero(1, k));
    CHECK((res.a - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(res.b.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("edmd regression: stored residual matches an independent recomputation") {
    CounterRng rng(7, 0);
    const int n = 5, k = 60;
    Eigen::MatrixXd z(n, k), zp(n, k), u(1, k);
    for (int j = 0; j < k; ++j) {
        for (int i = 0; i < n; ++i) {
            z(i, j) = rng.uniform(-1.0, 1.0);
            zp(i, j) = rng.uniform(-1.0, 1.0);  // inconsistent data -> nonzero residual
        }
        u(0, j) = rng.uniform(-1.0, 1.0);
    }
    EdmdResult res = edmd_regress(z, zp, u);
    double recomputed = (zp - res.a * z - res.b * u).norm();
    CHECK(std::abs(res.residual - recomputed) < 1e-12);
    CHECK(res.residual > 0.1);
    CHECK_FALSE(res.underdetermined);
    CHECK(edmd_regress(z.leftCols(3), zp.leftCols(3), u.leftCols(3)).underdetermined);
}

TEST_CASE("exact recovery of random stable lifted systems") {
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
        CounterRng rng(900 + trial, 0);
        int n = 3 + static_cast<int>(rng.uniform(0, 10));  // up to 12
        int k = 10 * n + 40;
        Eigen::MatrixXd a_true = random_stable_matrix(rng, n, 0.9);
        Eigen::MatrixXd b_true(n, 1);
        for (int i = 0; i < n; ++i) b_true(i, 0) = rng.uniform(-1.0, 1.0);

        Eigen::MatrixXd z(n, k), zp(n, k), u(1, k);
        Eigen::VectorXd state(n);
        for (int i = 0; i < n; ++i) state(i) = rng.uniform(-1.0, 1.0);
        for (int j = 0; j < k; ++j) {
            if (j % 40 == 0)  // restart from a fresh initial state now and then
                for (int i = 0; i < n; ++i) state(i) = rng.uniform(-1.0, 1.0);
            double input = rng.uniform(-1.0, 1.0);
            z.col(j) = state;
            u(0, j) = input;
            state = a_true * state + b_true * input;
            zp.col(j) = state;
        }
        EdmdResult res = edmd_regress(z, zp, u);
        double err = (res.a - a_true).norm() + (res.b - b_true).norm();
        INFO("n=" << n << " err=" << err);
        REQUIRE(err < 1e-8);
    }
}

TEST_CASE("least-squares first-order optimality: perturbations never decrease the residual") {
    CounterRng rng(42, 0);
    const int n = 4, k = 50;
    Eigen::MatrixXd z(n, k), zp(n, k), u(1, k);
    for (int j = 0; j < k; ++j) {
        for (int i = 0; i < n; ++i) {
            z(i, j) = rng.uniform(-1.0, 1.0);
            zp(i, j) = rng.uniform(-1.0, 1.0);
        }
        u(0, j) = rng.uniform(-1.0, 1.0);
    }
    EdmdResult res = edmd_regress(z, zp, u);
    for (int trial = 0; trial < 50; ++trial) {
        Eigen::MatrixXd da(n, n), db(n, 1);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) da(i, j) = rng.uniform(-1.0, 1.0);
            db(i, 0) = rng.uniform(-1.0, 1.0);
        }
        double scale = 1e-4 / std::sqrt(da.squaredNorm() + db.squaredNorm());
        Eigen::MatrixXd a2 = res.a + scale * da;
        Eigen::MatrixXd b2 = res.b + scale * db;
        double perturbed = (zp - a2 * z - b2 * u).norm();
        REQUIRE(perturbed >= res.residual);
    }
}

TEST_CASE("predict iterates the lifted dynamics") {
    DelaySpec spec;
    spec.nd = 1;
    LinearPredictor pred;
    pred.spec = spec;
    const int n = spec.lifted_dim();
    pred.a = Eigen::MatrixXd::Identity(n, n);
    pred.b = Eigen::MatrixXd::Zero(n, 1);
    pred.c = output_selector(spec);

    Eigen::VectorXd z0(n);
    z0 << 0.2, -0.1, 0.2, 1.0;

    SECTION("identity dynamics repeat z0") {
        PredictedTrajectory out = predict(pred, z0, Eigen::MatrixXd::Zero(1, 5));
        REQUIRE(out.z.cols() == 6);
        for (int i = 0; i < 6; ++i) REQUIRE((out.z.col(i) - z0).cwiseAbs().maxCoeff() == 0.0);
        CHECK(out.y(0, 3) == z0(0));  // newest output coordinate
    }
    SECTION("zero-length input returns just z0") {
        PredictedTrajectory out = predict(pred, z0, Eigen::MatrixXd(1, 0));
        REQUIRE(out.z.cols() == 1);
        CHECK((out.z.col(0) - z0).cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("dimension mismatches throw") {
        CHECK_THROWS_AS(predict(pred, z0.head(2), Eigen::MatrixXd(1, 0)), DimensionError);
        CHECK_THROWS_AS(predict(pred, z0, Eigen::MatrixXd(2, 3)), DimensionError);
    }
}

TEST_CASE("one-step prediction on a training column stays within the fit residual") {
    CounterRng rng(13, 0);
    DelaySpec spec;
    spec.nd = 2;
    const int n = spec.lifted_dim();
    const int k = 200;
    SnapshotSet snaps;
    snaps.spec = spec;
    snaps.z.resize(n, k);
    snaps.zplus.resize(n, k);
    snaps.u.resize(1, k);
    // lifted trajectories of a consistent toy system, plus tiny noise on z+
    Eigen::MatrixXd a_true = random_stable_matrix(rng, n, 0.8);
    Eigen::VectorXd state = Eigen::VectorXd::Ones(n);
    for (int j = 0; j < k; ++j) {
        double input = rng.uniform(-0.5, 0.5);
        snaps.z.col(j) = state;
        snaps.u(0, j) = input;
        state = a_true * state + Eigen::VectorXd::Constant(n, 0.1 * input);
        snaps.zplus.col(j) = state + Eigen::VectorXd::Constant(n, 1e-6 * rng.uniform(-1, 1));
    }
    LinearPredictor pred = fit(snaps);
    for (int j = 0; j < k; j += 17) {
        Eigen::VectorXd z1 = pred.a * snaps.z.col(j) + pred.b * snaps.u.col(j);
        double col_err = (snaps.zplus.col(j) - z1).norm();
        REQUIRE(col_err <= pred.residual + 1e-12);
        // the predict() path reproduces the same arithmetic
        PredictedTrajectory out = predict(pred, snaps.z.col(j), snaps.u.col(j));
        REQUIRE((out.z.col(1) - z1).cwiseAbs().maxCoeff() < 1e-15);
    }
}

TEST_CASE("constant coordinate survives fitting and prediction") {
    CounterRng rng(77, 0);
    DelaySpec spec;
    spec.nd = 3;
    const int n = spec.lifted_dim();
    const int k = 400;
    SnapshotSet snaps;
    snaps.spec = spec;
    snaps.z.resize(n, k);
    snaps.zplus.resize(n, k);
    snaps.u.resize(1, k);
    // columns built from genuine lifts so the last coordinate is exactly 1
    std::vector<double> ys, us;
    for (int j = 0; j < k + spec.nd + 1; ++j) {
        ys.push_back(0.05 * std::sin(0.21 * j) + 0.01 * rng.uniform(-1, 1));
        us.push_back(rng.uniform(-0.3, 0.3));
    }
    for (int j = 0; j < k; ++j) {
        Eigen::MatrixXd yw(1, 3), uw(1, 3), ywp(1, 3), uwp(1, 3);
        for (int c = 0; c < 3; ++c) {
            yw(0, c) = ys[static_cast<std::size_t>(j + c)];
            uw(0, c) = us[static_cast<std::size_t>(j + c)];
            ywp(0, c) = ys[static_cast<std::size_t>(j + c + 1)];
            uwp(0, c) = us[static_cast<std::size_t>(j + c + 1)];
        }
        snaps.z.col(j) = lift(build_embedding(yw, uw, spec), spec);
        snaps.zplus.col(j) = lift(build_embedding(ywp, uwp, spec), spec);
        snaps.u(0, j) = us[static_cast<std::size_t>(j + 3)];
    }
    LinearPredictor pred = fit(snaps);
    PredictedTrajectory out = predict(pred, snaps.z.col(0), Eigen::MatrixXd::Zero(1, 10));
    for (int i = 0; i <= 10; ++i) REQUIRE(std::abs(out.z(n - 1, i) - 1.0) < 1e-6);
}

TEST_CASE("relative RMSE") {
    Eigen::MatrixXd truth(1, 4);
    truth << 0.1, -0.2, 0.3, 0.05;
    CHECK(relative_rmse(truth, truth) == 0.0);
    CHECK(relative_rmse(Eigen::MatrixXd::Zero(1, 4), truth) == Approx(100.0));
    CHECK_THROWS(relative_rmse(truth, Eigen::MatrixXd::Zero(1, 4)));
    CHECK_THROWS_AS(relative_rmse(truth, truth.leftCols(2)), DimensionError);
}

TEST_CASE("snapshot and predictor files round-trip; corruption is detected") {
    CounterRng rng(3, 9);
    DelaySpec spec;
    spec.nd = 2;
    const int n = spec.lifted_dim();
    SnapshotSet snaps;
    snaps.spec = spec;
    snaps.z = Eigen::MatrixXd::Zero(n, 7);
    snaps.zplus = Eigen::MatrixXd::Zero(n, 7);
    snaps.u = Eigen::MatrixXd::Zero(1, 7);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < 7; ++j) {
            snaps.z(i, j) = rng.uniform(-1, 1);
            snaps.zplus(i, j) = rng.uniform(-1, 1);
        }
    auto dir = std::filesystem::temp_directory_path();
    auto snap_path = dir / "kgmpc_test.kpsnap";
    save_snapshots(snaps, snap_path);
    SnapshotSet loaded = load_snapshots(snap_path, spec);
    CHECK((loaded.z.array() == snaps.z.array()).all());
    CHECK((loaded.zplus.array() == snaps.zplus.array()).all());

    // truncated file
    std::string bytes = read_file(snap_path);
    write_file(snap_path, bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_snapshots(snap_path, spec), IntegrityError);

    LinearPredictor pred = fit(snaps);
    auto mod_path = dir / "kgmpc_test.kpmod";
    save_predictor(pred, mod_path);
    LinearPredictor back = load_predictor(mod_path);
    CHECK((back.a.array() == pred.a.array()).all());
    CHECK((back.b.array() == pred.b.array()).all());
    CHECK((back.c.array() == pred.c.array()).all());
    CHECK(back.spec.nd == spec.nd);
    CHECK(back.residual == pred.residual);

    write_file(mod_path, std::string("KPSNAP1\0", 8) + read_file(mod_path).substr(8));
    CHECK_THROWS_AS(load_predictor(mod_path), IntegrityError);
    std::filesystem::remove(snap_path);
    std::filesystem::remove(mod_path);
}
