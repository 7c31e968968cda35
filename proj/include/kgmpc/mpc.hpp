#pragma once

#include <Eigen/Dense>
#include <chrono>
#include <deque>
#include <optional>
#include <vector>

#include "kgmpc/common.hpp"
#include "kgmpc/config.hpp"
#include "kgmpc/koopman.hpp"

namespace kgmpc {

// ---------------------------------------------------------------------------
// Receding-horizon control on the lifted predictor: quadratic output cost
// over the horizon, box bound on the input, condensed into a strictly convex
// QP over the input sequence and solved with a primal active-set method.
// ---------------------------------------------------------------------------

struct MpcConfig {
    int np = 10;           // horizon steps
    double w = 1e5;        // weight on the newest output coordinate (Q = w C^T C)
    Eigen::MatrixXd r;     // input weight, m x m SPD (default: identity)
    double bound = 0.3;    // |u_i| <= bound, pu
    double ts = 0.05;      // control period, s
    bool warm_start = true;
    bool terminal_cost = false;  // include the z_Np term as well (off: cost i = 0..Np-1 as printed)
    std::optional<Eigen::VectorXd> z_ref;  // default: zeros with constant coordinate 1

    void validate(int m) const {
        if (np < 1) throw ConfigError("mpc: horizon must be >= 1");
        if (w <= 0) throw ConfigError("mpc: output weight must be positive");
        if (bound <= 0) throw ConfigError("mpc: input bound must be positive");
        if (ts <= 0) throw ConfigError("mpc: control period must be positive");
        if (r.size() > 0) {
            if (r.rows() != m || r.cols() != m) throw ConfigError("mpc: R dimension mismatch");
            if (!r.isApprox(r.transpose())) throw ConfigError("mpc: R must be symmetric");
            Eigen::LLT<Eigen::MatrixXd> llt(r);
            if (llt.info() != Eigen::Success) throw ConfigError("mpc: R must be positive definite");
        }
    }
};

inline Eigen::VectorXd default_z_ref(const DelaySpec& spec) {
    Eigen::VectorXd z = Eigen::VectorXd::Zero(spec.lifted_dim());
    z(spec.lifted_dim() - 1) = 1.0;  // constant observable
    return z;
}

struct CondensedQp {
    Eigen::MatrixXd h;   // Hessian, (Np*m)^2, symmetric positive definite
    Eigen::VectorXd f;   // gradient
    Eigen::VectorXd lb;  // -bound
    Eigen::VectorXd ub;  // +bound
    double offset = 0.0;  // input-independent cost term

    double objective(const Eigen::VectorXd& u) const {
        return 0.5 * u.dot(h * u) + f.dot(u) + offset;
    }
};

/// Precomputes the block prediction maps for a fixed predictor/config pair so
/// the per-step condensing is a matrix-vector product.
class Condenser {
  public:
    Condenser(const LinearPredictor& pred, const MpcConfig& cfg) : cfg_(cfg) {
        const int n = pred.lifted_dim();
        const int m = pred.spec.m;
        cfg_.validate(m);
        const int np = cfg_.np;
        const int rows = cfg_.terminal_cost ? np + 1 : np;  // cost stages i = 0..rows-1
        n_ = n;
        m_ = m;

        Eigen::MatrixXd q = cfg_.w * pred.c.transpose() * pred.c;
        Eigen::MatrixXd r = cfg_.r.size() > 0 ? cfg_.r : Eigen::MatrixXd::Identity(m, m);
        Eigen::VectorXd z_ref = cfg_.z_ref ? *cfg_.z_ref : default_z_ref(pred.spec);
        if (z_ref.size() != n) throw ConfigError("mpc: z_ref dimension mismatch");

        // abar rows: z_i = A^i z0 + sum_j A^(i-1-j) B u_j
        abar_.resize(rows * n, n);
        Eigen::MatrixXd a_pow = Eigen::MatrixXd::Identity(n, n);
        for (int i = 0; i < rows; ++i) {
            abar_.block(i * n, 0, n, n) = a_pow;
            a_pow = pred.a * a_pow;
        }
        Eigen::MatrixXd gamma = Eigen::MatrixXd::Zero(rows * n, np * m);
        std::vector<Eigen::MatrixXd> apb(static_cast<std::size_t>(rows));  // A^k B
        Eigen::MatrixXd blk = pred.b;
        for (int k = 0; k < rows; ++k) {
            apb[static_cast<std::size_t>(k)] = blk;
            blk = pred.a * blk;
        }
        for (int i = 1; i < rows; ++i)
            for (int j = 0; j < std::min(i, np); ++j)
                gamma.block(i * n, j * m, n, m) = apb[static_cast<std::size_t>(i - 1 - j)];

        Eigen::MatrixXd qbar = Eigen::MatrixXd::Zero(rows * n, rows * n);
        for (int i = 0; i < rows; ++i) qbar.block(i * n, i * n, n, n) = q;
        Eigen::MatrixXd rbar = Eigen::MatrixXd::Zero(np * m, np * m);
        for (int i = 0; i < np; ++i) rbar.block(i * m, i * m, m, m) = r;

        zref_bar_.resize(rows * n);
        for (int i = 0; i < rows; ++i) zref_bar_.segment(i * n, n) = z_ref;

        h_ = 2.0 * (gamma.transpose() * qbar * gamma + rbar);
        h_ = 0.5 * (h_ + h_.transpose());  // enforce exact symmetry
        gain_ = 2.0 * gamma.transpose() * qbar;  // maps (abar z0 - zref_bar) to f
        qbar_ = qbar;
        gamma_ = gamma;
    }

    /// Condensed QP for the current lifted state.
    CondensedQp qp_for(const Eigen::VectorXd& z0) const {
        if (z0.size() != n_) throw DimensionError("condense: z0 size mismatch");
        CondensedQp qp;
        qp.h = h_;
        Eigen::VectorXd dev = abar_ * z0 - zref_bar_;
        qp.f = gain_ * dev;
        qp.offset = dev.dot(qbar_ * dev);
        qp.lb = Eigen::VectorXd::Constant(h_.rows(), -cfg_.bound);
        qp.ub = Eigen::VectorXd::Constant(h_.rows(), cfg_.bound);
        return qp;
    }

    const MpcConfig& config() const { return cfg_; }
    int input_dim() const { return m_; }

  private:
    MpcConfig cfg_;
    int n_ = 0, m_ = 0;
    Eigen::MatrixXd h_, gain_, qbar_, gamma_, abar_;
    Eigen::VectorXd zref_bar_;
};

inline CondensedQp condense(const LinearPredictor& pred, const MpcConfig& cfg, const Eigen::VectorXd& z0) {
    return Condenser(pred, cfg).qp_for(z0);
}

// ---------------------------------------------------------------------------
// Primal active-set solver for box-constrained strictly convex QPs
// ---------------------------------------------------------------------------

struct BoxQpSolution {
    Eigen::VectorXd u;
    int iterations = 0;          // working-set loop passes
    int active_set_changes = 0;  // bound additions + removals
    double kkt_residual = 0.0;
    double objective = 0.0;
};

/// Max KKT violation: interior coordinates need zero gradient, coordinates at
/// a bound need the gradient pointing out of the box.
inline double box_qp_kkt_residual(const CondensedQp& qp, const Eigen::VectorXd& u) {
    Eigen::VectorXd g = qp.h * u + qp.f;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < u.size(); ++i) {
        if (u(i) >= qp.ub(i))
            worst = std::max(worst, g(i));  // at upper bound, need g <= 0
        else if (u(i) <= qp.lb(i))
            worst = std::max(worst, -g(i));  // at lower bound, need g >= 0
        else
            worst = std::max(worst, std::abs(g(i)));
        worst = std::max({worst, u(i) - qp.ub(i), qp.lb(i) - u(i)});
    }
    return worst;
}

inline BoxQpSolution solve_box_qp(const CondensedQp& qp, const Eigen::VectorXd* warm_start = nullptr) {
    const Eigen::Index n = qp.h.rows();
    if (qp.f.size() != n || qp.lb.size() != n || qp.ub.size() != n)
        throw DimensionError("solve_box_qp: inconsistent problem dimensions");

    Eigen::VectorXd u(n);
    if (warm_start != nullptr && warm_start->size() == n)
        u = warm_start->cwiseMax(qp.lb).cwiseMin(qp.ub);
    else
        u = Eigen::VectorXd::Zero(n).cwiseMax(qp.lb).cwiseMin(qp.ub);

    // side: 0 free, +1 fixed at ub, -1 fixed at lb
    std::vector<int> side(static_cast<std::size_t>(n), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (u(i) == qp.ub(i)) side[static_cast<std::size_t>(i)] = +1;
        else if (u(i) == qp.lb(i)) side[static_cast<std::size_t>(i)] = -1;
    }

    BoxQpSolution sol;
    const int max_iter = 100 * static_cast<int>(n);
    for (sol.iterations = 1; sol.iterations <= max_iter; ++sol.iterations) {
        std::vector<Eigen::Index> free_idx;
        for (Eigen::Index i = 0; i < n; ++i)
            if (side[static_cast<std::size_t>(i)] == 0) free_idx.push_back(i);
        const auto nf = static_cast<Eigen::Index>(free_idx.size());

        Eigen::VectorXd target = u;
        if (nf > 0) {
            Eigen::MatrixXd h_ff(nf, nf);
            Eigen::VectorXd rhs(nf);
            for (Eigen::Index a = 0; a < nf; ++a) {
                rhs(a) = -qp.f(free_idx[static_cast<std::size_t>(a)]);
                for (Eigen::Index b = 0; b < nf; ++b)
                    h_ff(a, b) = qp.h(free_idx[static_cast<std::size_t>(a)], free_idx[static_cast<std::size_t>(b)]);
            }
            for (Eigen::Index i = 0; i < n; ++i) {
                if (side[static_cast<std::size_t>(i)] == 0) continue;
                for (Eigen::Index a = 0; a < nf; ++a)
                    rhs(a) -= qp.h(free_idx[static_cast<std::size_t>(a)], i) * u(i);
            }
            Eigen::VectorXd uf = h_ff.ldlt().solve(rhs);
            if (!uf.allFinite())
                throw std::runtime_error("solve_box_qp: singular reduced Hessian (H not positive definite?)");
            for (Eigen::Index a = 0; a < nf; ++a) target(free_idx[static_cast<std::size_t>(a)]) = uf(a);
        }

        // ratio test toward the equality-constrained optimum
        double alpha = 1.0;
        Eigen::Index blocking = -1;
        int block_side = 0;
        for (Eigen::Index a = 0; a < nf; ++a) {
            Eigen::Index i = free_idx[static_cast<std::size_t>(a)];
            double step = target(i) - u(i);
            if (step > 0 && target(i) > qp.ub(i)) {
                double rat = (qp.ub(i) - u(i)) / step;
                if (rat < alpha - 1e-15) { alpha = rat; blocking = i; block_side = +1; }
            } else if (step < 0 && target(i) < qp.lb(i)) {
                double rat = (qp.lb(i) - u(i)) / step;
                if (rat < alpha - 1e-15) { alpha = rat; blocking = i; block_side = -1; }
            }
        }

        if (blocking >= 0) {
            for (Eigen::Index a = 0; a < nf; ++a) {
                Eigen::Index i = free_idx[static_cast<std::size_t>(a)];
                u(i) += alpha * (target(i) - u(i));
            }
            u(blocking) = block_side > 0 ? qp.ub(blocking) : qp.lb(blocking);
            side[static_cast<std::size_t>(blocking)] = block_side;
            ++sol.active_set_changes;
            continue;
        }

        u = target;
        // multiplier check on the working set: release the worst violator
        Eigen::VectorXd g = qp.h * u + qp.f;
        double release_tol = 1e-12 * (1.0 + g.cwiseAbs().maxCoeff());
        double worst = 0.0;
        Eigen::Index worst_idx = -1;
        for (Eigen::Index i = 0; i < n; ++i) {
            int sd = side[static_cast<std::size_t>(i)];
            if (sd == 0) continue;
            double viol = sd > 0 ? g(i) : -g(i);
            if (viol > worst) { worst = viol; worst_idx = i; }
        }
        if (worst_idx >= 0 && worst > release_tol) {
            side[static_cast<std::size_t>(worst_idx)] = 0;
            ++sol.active_set_changes;
            continue;
        }

        double certificate = box_qp_kkt_residual(qp, u);
        if (certificate > 1e-8) continue;  // re-iterate; a PD Hessian cannot stall here
        sol.u = u;
        sol.kkt_residual = certificate;
        sol.objective = qp.objective(u);
        return sol;
    }
    throw std::runtime_error("solve_box_qp: iteration cap exceeded (conditioning bug?)");
}

// ---------------------------------------------------------------------------
// Receding-horizon controller state
// ---------------------------------------------------------------------------

struct ControlStepResult {
    double u0 = 0.0;
    bool active = false;  // false during warm-up
    int qp_iterations = 0;
    double kkt_residual = 0.0;
    double solve_us = 0.0;  // condense + solve wall time, microseconds
};

/// Holds the measurement ring buffers and the warm-started input sequence of
/// one local control loop. Measurements arrive at the predictor's Ts; the
/// controller declines to act until the embedding window is full.
class Controller {
  public:
    Controller(const LinearPredictor& pred, const MpcConfig& cfg)
        : pred_(pred), condenser_(pred, cfg), nd_(pred.spec.nd) {
        if (pred.spec.p != 1 || pred.spec.m != 1)
            throw ConfigError("controller supports scalar output/input predictors");
    }

    /// Feed the newest measurement, get the input to apply until the next step.
    ControlStepResult control_step(double y_new) {
        auto t0 = std::chrono::steady_clock::now();
        y_buf_.push_back(y_new);
        u_buf_.push_back(last_applied_);
        if (static_cast<int>(y_buf_.size()) > nd_) {
            y_buf_.pop_front();
            u_buf_.pop_front();
        }
        ControlStepResult res;
        if (static_cast<int>(y_buf_.size()) < nd_) return res;  // warm-up

        Eigen::MatrixXd yw(1, nd_), uw(1, nd_);
        for (int k = 0; k < nd_; ++k) {
            yw(0, k) = y_buf_[static_cast<std::size_t>(k)];
            uw(0, k) = u_buf_[static_cast<std::size_t>(k)];
        }
        Eigen::VectorXd z0 = lift(build_embedding(yw, uw, pred_.spec), pred_.spec);
        CondensedQp qp = condenser_.qp_for(z0);
        const Eigen::VectorXd* warm =
            (condenser_.config().warm_start && warm_seq_.size() == qp.h.rows()) ? &warm_seq_ : nullptr;
        BoxQpSolution sol = solve_box_qp(qp, warm);

        res.active = true;
        res.u0 = sol.u(0);
        res.qp_iterations = sol.iterations;
        res.kkt_residual = sol.kkt_residual;
        warm_seq_.resize(sol.u.size());
        warm_seq_.head(sol.u.size() - 1) = sol.u.tail(sol.u.size() - 1);  // shift, append 0
        warm_seq_(sol.u.size() - 1) = 0.0;
        last_applied_ = res.u0;
        res.solve_us =
            std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
        return res;
    }

    /// Measurement gap: hold the last input and re-enter warm-up.
    void notify_gap() {
        y_buf_.clear();
        u_buf_.clear();
        warm_seq_.resize(0);
    }

    bool warmed_up() const { return static_cast<int>(y_buf_.size()) >= nd_; }
    double last_applied() const { return last_applied_; }

  private:
    LinearPredictor pred_;
    Condenser condenser_;
    int nd_;
    std::deque<double> y_buf_;
    std::deque<double> u_buf_;
    Eigen::VectorXd warm_seq_;
    double last_applied_ = 0.0;
};

inline MpcConfig mpc_config_from_table(const ConfigTable& t) {
    MpcConfig cfg;
    cfg.np = t.integer_or("np", cfg.np);
    cfg.w = t.num_or("w", cfg.w);
    if (t.has("r")) cfg.r = Eigen::MatrixXd::Constant(1, 1, t.num("r"));
    cfg.bound = t.num_or("b", cfg.bound);
    cfg.ts = t.num_or("ts", cfg.ts);
    cfg.warm_start = t.boolean_or("warm_start", cfg.warm_start);
    cfg.terminal_cost = t.boolean_or("terminal_cost", cfg.terminal_cost);
    return cfg;
}

}  // namespace kgmpc
