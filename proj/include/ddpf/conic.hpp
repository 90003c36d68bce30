#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "errors.hpp"

namespace ddpf {

using SparseMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Linear-cost program with linear equalities/inequalities, box bounds, and unit-disk
/// constraints x_l^2 + x_r^2 <= 1 on disjoint variable pairs.
struct ConicProgram {
    Eigen::Index n = 0;
    Eigen::VectorXd c;
    double cost_offset = 0.0;
    SparseMat A_eq;
    Eigen::VectorXd b_eq;
    SparseMat A_in;  ///< A_in x <= b_in
    Eigen::VectorXd b_in;
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;
    std::vector<std::array<Eigen::Index, 2>> balls;

    /// Empty program over n unbounded variables.
    static ConicProgram with_variables(Eigen::Index n)
    {
        ConicProgram p;
        p.n = n;
        p.c = Eigen::VectorXd::Zero(n);
        p.A_eq.resize(0, n);
        p.b_eq.resize(0);
        p.A_in.resize(0, n);
        p.b_in.resize(0);
        p.lower = Eigen::VectorXd::Constant(n, -kInf);
        p.upper = Eigen::VectorXd::Constant(n, kInf);
        return p;
    }

    void validate() const
    {
        auto fail = [](const std::string& m) { throw Error(ErrorKind::DimensionMismatch, "ConicProgram: " + m); };
        if (c.size() != n || lower.size() != n || upper.size() != n) fail("cost/bound length differs from n");
        if (A_eq.cols() != n || A_eq.rows() != b_eq.size()) fail("equality block dimensions");
        if (A_in.cols() != n || A_in.rows() != b_in.size()) fail("inequality block dimensions");
        std::vector<bool> used(static_cast<std::size_t>(n), false);
        for (const auto& ball : balls)
            for (auto i : ball) {
                if (i < 0 || i >= n) fail("ball index out of range");
                if (used[static_cast<std::size_t>(i)]) fail("ball index pairs must be disjoint");
                used[static_cast<std::size_t>(i)] = true;
            }
    }
};

enum class SolveStatus { Optimal, Infeasible, Unbounded, ToleranceNotMet };

inline const char* to_string(SolveStatus s)
{
    switch (s) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::Infeasible: return "infeasible";
    case SolveStatus::Unbounded: return "unbounded";
    case SolveStatus::ToleranceNotMet: return "tolerance_not_met";
    }
    return "unknown";
}

struct KktResiduals {
    double primal = kInf;
    double dual = kInf;
    double gap = kInf;
};

struct Solution {
    Eigen::VectorXd x;
    double objective = kInf;
    SolveStatus status = SolveStatus::ToleranceNotMet;
    KktResiduals kkt;
    double solve_time = 0.0;  ///< seconds
    int iterations = 0;
};

struct SolverOptions {
    double tol = 1e-8;
    double inaccurate_tol = 1e-5;  ///< accepted as tolerance_not_met when the iteration stops early
    int max_iterations = 100;
    bool equilibrate = true;
    double static_regularization = 1e-7;
    int refinement_steps = 10;
};

/// Largest violation of any constraint of `prog` at `x`.
inline double max_violation(const ConicProgram& prog, const Eigen::VectorXd& x)
{
    double v = 0.0;
    if (prog.A_eq.rows()) v = std::max(v, (prog.A_eq * x - prog.b_eq).cwiseAbs().maxCoeff());
    if (prog.A_in.rows()) v = std::max(v, (prog.A_in * x - prog.b_in).maxCoeff());
    for (Eigen::Index j = 0; j < prog.n; ++j) v = std::max({v, prog.lower(j) - x(j), x(j) - prog.upper(j)});
    for (const auto& [l, r] : prog.balls) v = std::max(v, std::hypot(x(l), x(r)) - 1.0);
    return std::max(v, 0.0);
}

/// Plain-text dump: one line per variable, then one line per constraint row.
inline void write_program(std::ostream& os, const ConicProgram& p)
{
    os << "variables " << p.n << "\n";
    for (Eigen::Index j = 0; j < p.n; ++j)
        os << "x" << j << " cost " << p.c(j) << " lower " << p.lower(j) << " upper " << p.upper(j) << "\n";
    os << "offset " << p.cost_offset << "\n";
    auto rows = [&](const SparseMat& m, const Eigen::VectorXd& rhs, const char* tag, const char* op) {
        Eigen::SparseMatrix<double, Eigen::RowMajor> r = m;
        os << tag << " " << r.rows() << "\n";
        for (Eigen::Index i = 0; i < r.rows(); ++i) {
            for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(r, i); it; ++it)
                os << (it.value() < 0 ? " - " : " + ") << std::abs(it.value()) << " x" << it.col();
            os << " " << op << " " << rhs(i) << "\n";
        }
    };
    rows(p.A_eq, p.b_eq, "equalities", "=");
    rows(p.A_in, p.b_in, "inequalities", "<=");
    os << "balls " << p.balls.size() << "\n";
    for (const auto& [l, r] : p.balls) os << "x" << l << "^2 + x" << r << "^2 <= 1\n";
}

namespace detail {

/// Cone layout of the standard form G x + s = h: `linear` orthant rows followed by
/// second-order cones of the listed dimensions.
struct ConeLayout {
    Eigen::Index linear = 0;
    std::vector<Eigen::Index> soc;

    Eigen::Index size() const
    {
        Eigen::Index m = linear;
        for (auto q : soc) m += q;
        return m;
    }
    double degree() const { return static_cast<double>(linear + static_cast<Eigen::Index>(soc.size())); }
};

inline double soc_residual(const Eigen::Ref<const Eigen::VectorXd>& v) { return v(0) - v.tail(v.size() - 1).norm(); }

/// Step to the boundary along d from v (interior); +inf when the ray stays inside.
inline double orthant_step(const Eigen::Ref<const Eigen::VectorXd>& v, const Eigen::Ref<const Eigen::VectorXd>& d)
{
    double a = kInf;
    for (Eigen::Index i = 0; i < v.size(); ++i)
        if (d(i) < 0.0) a = std::min(a, -v(i) / d(i));
    return a;
}

inline double soc_step(const Eigen::Ref<const Eigen::VectorXd>& v, const Eigen::Ref<const Eigen::VectorXd>& d)
{
    const Eigen::Index q = v.size();
    const double a = d(0) * d(0) - d.tail(q - 1).squaredNorm();
    const double b = v(0) * d(0) - v.tail(q - 1).dot(d.tail(q - 1));
    const double c = std::max(v(0) * v(0) - v.tail(q - 1).squaredNorm(), 0.0);
    const double scale = std::max({std::abs(a), std::abs(b), c, 1e-300});
    if (std::abs(a) <= 1e-14 * scale) {
        if (b < 0.0) return c / (-2.0 * b);
        return kInf;
    }
    const double disc = b * b - a * c;
    if (disc < 0.0) return kInf;
    const double sq = std::sqrt(disc);
    const double qq = -(b + (b >= 0.0 ? sq : -sq));
    double r1 = qq / a;
    double r2 = qq != 0.0 ? c / qq : kInf;
    double best = kInf;
    for (double r : {r1, r2})
        if (r > 0.0) best = std::min(best, r);
    return best;
}

/// Nesterov-Todd scaling for the product cone.
class NtScaling {
public:
    void update(const ConeLayout& cones, const Eigen::VectorXd& s, const Eigen::VectorXd& z)
    {
        cones_ = &cones;
        w_ = (s.head(cones.linear).array() / z.head(cones.linear).array()).sqrt();
        soc_.resize(cones.soc.size());
        Eigen::Index off = cones.linear;
        for (std::size_t k = 0; k < cones.soc.size(); ++k) {
            const Eigen::Index q = cones.soc[k];
            auto sk = s.segment(off, q);
            auto zk = z.segment(off, q);
            const double sres = std::sqrt(std::max(sk(0) * sk(0) - sk.tail(q - 1).squaredNorm(), 1e-300));
            const double zres = std::sqrt(std::max(zk(0) * zk(0) - zk.tail(q - 1).squaredNorm(), 1e-300));
            const Eigen::VectorXd sb = sk / sres;
            const Eigen::VectorXd zb = zk / zres;
            const double gamma = std::sqrt(std::max((1.0 + sb.dot(zb)) / 2.0, 1e-300));
            Eigen::VectorXd wb(q);
            wb(0) = (sb(0) + zb(0)) / (2.0 * gamma);
            wb.tail(q - 1) = (sb.tail(q - 1) - zb.tail(q - 1)) / (2.0 * gamma);
            const double eta = std::sqrt(sres / zres);
            Eigen::MatrixXd wm(q, q);
            wm(0, 0) = wb(0);
            wm.block(0, 1, 1, q - 1) = wb.tail(q - 1).transpose();
            wm.block(1, 0, q - 1, 1) = wb.tail(q - 1);
            wm.block(1, 1, q - 1, q - 1) = Eigen::MatrixXd::Identity(q - 1, q - 1) +
                                           wb.tail(q - 1) * wb.tail(q - 1).transpose() / (1.0 + wb(0));
            Eigen::MatrixXd wi = wm;
            wi.block(0, 1, 1, q - 1) *= -1.0;
            wi.block(1, 0, q - 1, 1) *= -1.0;
            soc_[k].w = eta * wm;
            soc_[k].winv = wi / eta;
            soc_[k].off = off;
            off += q;
        }
    }

    Eigen::VectorXd apply(const Eigen::VectorXd& v) const { return apply_impl(v, false); }
    Eigen::VectorXd apply_inverse(const Eigen::VectorXd& v) const { return apply_impl(v, true); }

    /// Lower-triangular entries of W^T W as (row, col, value) relative to the cone block.
    template <class F>
    void for_each_wtw(F&& f) const
    {
        for (Eigen::Index i = 0; i < cones_->linear; ++i) f(i, i, w_(i) * w_(i));
        for (const auto& blk : soc_) {
            const Eigen::MatrixXd w2 = blk.w * blk.w;
            for (Eigen::Index r = 0; r < w2.rows(); ++r)
                for (Eigen::Index c = 0; c <= r; ++c) f(blk.off + r, blk.off + c, w2(r, c));
        }
    }

    Eigen::VectorXd apply_wtw(const Eigen::VectorXd& v) const { return apply(apply(v)); }

private:
    struct SocBlock {
        Eigen::MatrixXd w;
        Eigen::MatrixXd winv;
        Eigen::Index off = 0;
    };

    Eigen::VectorXd apply_impl(const Eigen::VectorXd& v, bool inverse) const
    {
        Eigen::VectorXd out(v.size());
        const Eigen::Index l = cones_->linear;
        if (inverse)
            out.head(l) = v.head(l).cwiseQuotient(w_);
        else
            out.head(l) = v.head(l).cwiseProduct(w_);
        for (const auto& blk : soc_) {
            const auto q = blk.w.rows();
            out.segment(blk.off, q) = (inverse ? blk.winv : blk.w) * v.segment(blk.off, q);
        }
        return out;
    }

    const ConeLayout* cones_ = nullptr;
    Eigen::VectorXd w_;
    std::vector<SocBlock> soc_;
};

inline Eigen::VectorXd jordan_product(const ConeLayout& cones, const Eigen::VectorXd& u, const Eigen::VectorXd& v)
{
    Eigen::VectorXd out(u.size());
    const Eigen::Index l = cones.linear;
    out.head(l) = u.head(l).cwiseProduct(v.head(l));
    Eigen::Index off = l;
    for (auto q : cones.soc) {
        auto uu = u.segment(off, q);
        auto vv = v.segment(off, q);
        out(off) = uu.dot(vv);
        out.segment(off + 1, q - 1) = uu(0) * vv.tail(q - 1) + vv(0) * uu.tail(q - 1);
        off += q;
    }
    return out;
}

/// Solves lambda o x = d cone-wise.
inline Eigen::VectorXd jordan_divide(const ConeLayout& cones, const Eigen::VectorXd& lambda, const Eigen::VectorXd& d)
{
    Eigen::VectorXd out(d.size());
    const Eigen::Index l = cones.linear;
    out.head(l) = d.head(l).cwiseQuotient(lambda.head(l));
    Eigen::Index off = l;
    for (auto q : cones.soc) {
        auto lam = lambda.segment(off, q);
        auto dd = d.segment(off, q);
        const double det = lam(0) * lam(0) - lam.tail(q - 1).squaredNorm();
        const double x0 = (lam(0) * dd(0) - lam.tail(q - 1).dot(dd.tail(q - 1))) / det;
        out(off) = x0;
        out.segment(off + 1, q - 1) = (dd.tail(q - 1) - x0 * lam.tail(q - 1)) / lam(0);
        off += q;
    }
    return out;
}

inline Eigen::VectorXd cone_identity(const ConeLayout& cones)
{
    Eigen::VectorXd e = Eigen::VectorXd::Zero(cones.size());
    e.head(cones.linear).setOnes();
    Eigen::Index off = cones.linear;
    for (auto q : cones.soc) {
        e(off) = 1.0;
        off += q;
    }
    return e;
}

/// Smallest "eigenvalue" of v over all cones (negative when v lies outside).
inline double cone_min_eig(const ConeLayout& cones, const Eigen::VectorXd& v)
{
    double m = kInf;
    if (cones.linear) m = v.head(cones.linear).minCoeff();
    Eigen::Index off = cones.linear;
    for (auto q : cones.soc) {
        m = std::min(m, soc_residual(v.segment(off, q)));
        off += q;
    }
    return m;
}

inline double cone_step(const ConeLayout& cones, const Eigen::VectorXd& v, const Eigen::VectorXd& d)
{
    double a = orthant_step(v.head(cones.linear), d.head(cones.linear));
    Eigen::Index off = cones.linear;
    for (auto q : cones.soc) {
        a = std::min(a, soc_step(v.segment(off, q), d.segment(off, q)));
        off += q;
    }
    return a;
}

/// Standard form  min c'x  s.t.  A x = b,  G x + s = h,  s in K.
struct StandardForm {
    SparseMat A;
    Eigen::VectorXd b;
    SparseMat G;
    Eigen::VectorXd h;
    Eigen::VectorXd c;
    ConeLayout cones;
    Eigen::VectorXd eq_unscale, in_unscale;  ///< undo row equilibration when measuring residuals
};

struct StandardSolution {
    Eigen::VectorXd x, y, z, s;
    SolveStatus status = SolveStatus::ToleranceNotMet;
    int iterations = 0;
};

/// Symmetric quasi-definite KKT system [[0, A', G'], [A, 0, 0], [G, 0, -W'W]] with
/// static regularization, factored by sparse LDL' and refined against the exact matrix.
class KktSolver {
public:
    KktSolver(const StandardForm& f, const SolverOptions& opt) : f_(f), opt_(opt)
    {
        n_ = f.A.cols();
        p_ = f.A.rows();
        m_ = f.G.rows();
        At_ = f.A.transpose();
        Gt_ = f.G.transpose();
    }

    void factor(const NtScaling& w)
    {
        w_ = &w;
        for (double reg = opt_.static_regularization; reg <= 1e-3; reg *= 100.0)
            if (assemble_and_factor(w, reg)) return;
        throw Error(ErrorKind::NumericalBreakdown, "KKT factorization failed");
    }

private:
    bool assemble_and_factor(const NtScaling& w, double reg)
    {
        const Eigen::Index dim = n_ + p_ + m_;
        std::vector<Triplet> t;
        t.reserve(static_cast<std::size_t>(f_.A.nonZeros() + f_.G.nonZeros() + dim + 9 * f_.cones.soc.size()));
        for (Eigen::Index j = 0; j < n_; ++j) t.emplace_back(j, j, reg);
        // dual blocks get a much smaller shift; a full-size one limits equality accuracy
        for (Eigen::Index i = 0; i < p_; ++i) t.emplace_back(n_ + i, n_ + i, -reg * 1e-3);
        for (Eigen::Index k = 0; k < f_.A.outerSize(); ++k)
            for (SparseMat::InnerIterator it(f_.A, k); it; ++it) t.emplace_back(n_ + it.row(), it.col(), it.value());
        for (Eigen::Index k = 0; k < f_.G.outerSize(); ++k)
            for (SparseMat::InnerIterator it(f_.G, k); it; ++it)
                t.emplace_back(n_ + p_ + it.row(), it.col(), it.value());
        const Eigen::Index zo = n_ + p_;
        for (Eigen::Index i = 0; i < m_; ++i) t.emplace_back(zo + i, zo + i, -reg * 1e-3);
        w.for_each_wtw([&](Eigen::Index r, Eigen::Index c, double v) { t.emplace_back(zo + r, zo + c, -v); });
        K_.resize(dim, dim);
        K_.setFromTriplets(t.begin(), t.end());
        if (!analyzed_) {
            ldl_.analyzePattern(K_);
            analyzed_ = true;
        }
        ldl_.factorize(K_);
        if (ldl_.info() != Eigen::Success) return false;
        const auto& d = ldl_.vectorD();
        for (Eigen::Index i = 0; i < d.size(); ++i)
            if (!std::isfinite(d(i)) || d(i) == 0.0) return false;
        return true;
    }

public:
    Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const
    {
        Eigen::VectorXd u = ldl_.solve(rhs);
        const double scale = 1.0 + rhs.lpNorm<Eigen::Infinity>();
        Eigen::VectorXd r = rhs - multiply(u);
        double rn = r.lpNorm<Eigen::Infinity>();
        for (int it = 0; it < opt_.refinement_steps && rn > 1e-14 * scale; ++it) {
            const Eigen::VectorXd cand = u + ldl_.solve(r);
            const Eigen::VectorXd rc = rhs - multiply(cand);
            const double rcn = rc.lpNorm<Eigen::Infinity>();
            if (!(rcn < rn)) break;
            u = cand;
            r = rc;
            rn = rcn;
        }
        return u;
    }

private:
    Eigen::VectorXd multiply(const Eigen::VectorXd& u) const
    {
        Eigen::VectorXd out(u.size());
        const auto x = u.head(n_);
        const auto y = u.segment(n_, p_);
        const Eigen::VectorXd z = u.tail(m_);
        out.head(n_) = At_ * y + Gt_ * z;
        out.segment(n_, p_) = f_.A * x;
        out.tail(m_) = f_.G * x - w_->apply_wtw(z);
        return out;
    }

    const StandardForm& f_;
    const SolverOptions& opt_;
    Eigen::Index n_ = 0, p_ = 0, m_ = 0;
    SparseMat At_, Gt_, K_;
    Eigen::SimplicialLDLT<SparseMat, Eigen::Lower, Eigen::AMDOrdering<int>> ldl_;
    bool analyzed_ = false;
    const NtScaling* w_ = nullptr;
};

/// Homogeneous self-dual embedding, Mehrotra predictor-corrector, NT scaling.
inline StandardSolution solve_standard(const StandardForm& f, const SolverOptions& opt)
{
    const Eigen::Index n = f.A.cols(), p = f.A.rows(), m = f.G.rows();
    const ConeLayout& cones = f.cones;
    const Eigen::VectorXd e = cone_identity(cones);
    const double degree = cones.degree();

    KktSolver kkt(f, opt);
    NtScaling w;

    auto split = [&](const Eigen::VectorXd& u, Eigen::VectorXd& x, Eigen::VectorXd& y, Eigen::VectorXd& z) {
        x = u.head(n);
        y = u.segment(n, p);
        z = u.tail(m);
    };
    auto stack = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& c) {
        Eigen::VectorXd u(n + p + m);
        u << a, b, c;
        return u;
    };

    // Initial point from two least-squares problems with W = I.
    StandardSolution sol;
    Eigen::VectorXd x, y, z, s;
    {
        Eigen::VectorXd ones_s = e, ones_z = e;
        w.update(cones, ones_s, ones_z);
        kkt.factor(w);
        Eigen::VectorXd xs, ys, zs;
        split(kkt.solve(stack(Eigen::VectorXd::Zero(n), f.b, f.h)), xs, ys, zs);
        x = xs;
        s = -zs;
        split(kkt.solve(stack(-f.c, Eigen::VectorXd::Zero(p), Eigen::VectorXd::Zero(m))), xs, ys, zs);
        y = ys;
        z = zs;
        auto shift = [&](Eigen::VectorXd& v) {
            if (m == 0) return;
            const double a = cone_min_eig(cones, v);
            if (a <= 0.0) v += (1.0 - a) * e;
        };
        shift(s);
        shift(z);
    }
    double tau = 1.0, kappa = 1.0;

    // primal residuals are absolute, in the units of the unequilibrated rows
    const Eigen::VectorXd eq_unscale = f.eq_unscale.size() == p ? f.eq_unscale : Eigen::VectorXd::Ones(p);
    const Eigen::VectorXd in_unscale = f.in_unscale.size() == m ? f.in_unscale : Eigen::VectorXd::Ones(m);
    const double bnorm = 1.0, hnorm = 1.0;
    const double cnorm = std::max(1.0, f.c.lpNorm<Eigen::Infinity>());
    const SparseMat At = f.A.transpose();
    const SparseMat Gt = f.G.transpose();

    auto inf_norm = [](const Eigen::VectorXd& v) { return v.size() ? v.lpNorm<Eigen::Infinity>() : 0.0; };

    struct Quality {
        double pres, dres, gap, relgap;
    };
    auto quality = [&]() {
        Quality q{};
        q.pres = std::max(inf_norm((f.A * x - f.b * tau).cwiseProduct(eq_unscale)) / bnorm,
                          inf_norm((f.G * x + s - f.h * tau).cwiseProduct(in_unscale)) / hnorm) /
                 tau;
        q.dres = inf_norm(At * y + Gt * z + f.c * tau) / cnorm / tau;
        q.gap = s.dot(z) / (tau * tau);
        const double pcost = f.c.dot(x) / tau;
        const double dcost = -(f.b.dot(y) + f.h.dot(z)) / tau;
        q.relgap = q.gap / std::max(1e-300, std::min(std::abs(pcost), std::abs(dcost)));
        return q;
    };

    int stalled = 0;
    StandardSolution best;
    double best_merit = kInf;
    for (int iter = 0; iter <= opt.max_iterations; ++iter) {
        sol.iterations = iter;
        const Quality q = quality();
        const double merit = std::max({q.pres, q.dres, std::min(q.gap, q.relgap)});
        if (merit < best_merit && tau > 0.0) {
            best_merit = merit;
            best = {x / tau, y / tau, z / tau, s / tau, SolveStatus::ToleranceNotMet, iter};
        }
        if (q.pres <= opt.tol && q.dres <= opt.tol && (q.gap <= opt.tol || q.relgap <= opt.tol)) {
            return {x / tau, y / tau, z / tau, s / tau, SolveStatus::Optimal, iter};
        }
        // infeasibility certificates
        const double by_hz = f.b.dot(y) + f.h.dot(z);
        if (by_hz < 0.0) {
            const double res = inf_norm(At * y + Gt * z) / (-by_hz);
            if (res <= opt.tol) return {x, y / (-by_hz), z / (-by_hz), s, SolveStatus::Infeasible, iter};
        }
        const double cx = f.c.dot(x);
        if (cx < 0.0) {
            const double res = std::max(inf_norm(f.A * x), inf_norm(f.G * x + s)) / (-cx);
            if (res <= opt.tol) return {x / (-cx), y, z, s / (-cx), SolveStatus::Unbounded, iter};
        }
        if (iter == opt.max_iterations) break;

        const Eigen::VectorXd rx = At * y + Gt * z + f.c * tau;
        const Eigen::VectorXd ry = -(f.A * x) + f.b * tau;
        const Eigen::VectorXd rz = -(f.G * x) + f.h * tau - s;
        const double rtau = -f.c.dot(x) - f.b.dot(y) - f.h.dot(z) - kappa;
        const double mu = (s.dot(z) + tau * kappa) / (degree + 1.0);

        w.update(cones, s, z);
        const Eigen::VectorXd lambda = w.apply(z);
        try {
            kkt.factor(w);
        } catch (const Error&) {
            break;
        }
        Eigen::VectorXd x1, y1, z1;
        split(kkt.solve(stack(-f.c, f.b, f.h)), x1, y1, z1);
        const double den_base = -(f.c.dot(x1) + f.b.dot(y1) + f.h.dot(z1));

        struct Dir {
            Eigen::VectorXd dx, dy, dz, ds;
            double dtau = 0.0, dkappa = 0.0;
        };
        auto direction = [&](const Eigen::VectorXd& ds_rhs, double dkappa_rhs, double eta) {
            Dir d;
            const Eigen::VectorXd lam_div = jordan_divide(cones, lambda, ds_rhs);
            Eigen::VectorXd x2, y2, z2;
            split(kkt.solve(stack(-eta * rx, eta * ry, eta * rz - w.apply(lam_div))), x2, y2, z2);
            d.dtau = (-eta * rtau + f.c.dot(x2) + f.b.dot(y2) + f.h.dot(z2) + dkappa_rhs / tau) /
                     (kappa / tau + den_base);
            d.dx = x2 + d.dtau * x1;
            d.dy = y2 + d.dtau * y1;
            d.dz = z2 + d.dtau * z1;
            d.ds = w.apply(lam_div - w.apply(d.dz));
            d.dkappa = (dkappa_rhs - kappa * d.dtau) / tau;
            return d;
        };
        auto max_step = [&](const Dir& d) {
            double a = std::min(cone_step(cones, s, d.ds), cone_step(cones, z, d.dz));
            if (d.dtau < 0.0) a = std::min(a, -tau / d.dtau);
            if (d.dkappa < 0.0) a = std::min(a, -kappa / d.dkappa);
            return a;
        };

        // predictor
        const Eigen::VectorXd lam2 = jordan_product(cones, lambda, lambda);
        const Dir aff = direction(-lam2, -kappa * tau, 1.0);
        const double a_aff = std::min(1.0, max_step(aff));
        const double sigma = std::clamp(std::pow(1.0 - a_aff, 3), 0.0, 1.0);

        // corrector
        const Eigen::VectorXd corr = jordan_product(cones, w.apply_inverse(aff.ds), w.apply(aff.dz));
        const Dir cmb = direction(-lam2 - corr + sigma * mu * e, -kappa * tau - aff.dtau * aff.dkappa + sigma * mu,
                                  1.0 - sigma);
        const double a = std::min(1.0, 0.99 * max_step(cmb));
        if (!(a > 1e-12) || !std::isfinite(a)) {
            if (++stalled >= 3) break;
            continue;
        }
        stalled = a < 1e-8 ? stalled + 1 : 0;
        if (stalled >= 5) break;
        x += a * cmb.dx;
        y += a * cmb.dy;
        z += a * cmb.dz;
        s += a * cmb.ds;
        tau += a * cmb.dtau;
        kappa += a * cmb.dkappa;
        if (!(tau > 0.0) || !x.allFinite()) break;
    }
    if (best_merit <= opt.inaccurate_tol) return best;
    if (sol.iterations >= opt.max_iterations && best.x.size()) return best;
    throw Error(ErrorKind::NumericalBreakdown, "iteration " + std::to_string(sol.iterations) + " stalled (merit " +
                                                   std::to_string(best_merit) + ")");
}

}  // namespace detail

/// Interior-point solve of a ConicProgram.
///
/// Fixed variables are substituted out, the rest is cast to standard form with
/// bound rows in the nonnegative orthant and each unit disk as a 3-dimensional
/// second-order cone (1, x_l, x_r), Ruiz-equilibrated, and handed to the
/// homogeneous self-dual interior-point iteration.
inline Solution solve_convex(const ConicProgram& prog, const SolverOptions& opt = {})
{
    const auto start = std::chrono::steady_clock::now();
    prog.validate();
    Solution out;
    auto finish = [&](Solution& s) {
        s.solve_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return s;
    };
    auto infeasible = [&]() {
        out.status = SolveStatus::Infeasible;
        out.x = Eigen::VectorXd::Zero(prog.n);
        out.objective = kInf;
        return finish(out);
    };

    const Eigen::Index n = prog.n;
    std::vector<bool> in_ball(static_cast<std::size_t>(n), false);
    for (const auto& ball : prog.balls)
        for (auto i : ball) in_ball[static_cast<std::size_t>(i)] = true;

    // presolve: singleton rows become bounds, then fixed variables are substituted
    using RowMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;
    const RowMat eq_rows = prog.A_eq, in_rows = prog.A_in;
    Eigen::VectorXd lo = prog.lower, up = prog.upper;
    std::vector<bool> drop_eq(static_cast<std::size_t>(eq_rows.rows()), false);
    std::vector<bool> drop_in(static_cast<std::size_t>(in_rows.rows()), false);
    auto is_fixed = [&](Eigen::Index j) {
        return std::isfinite(lo(j)) && std::abs(up(j) - lo(j)) <= 1e-12 * (1.0 + std::abs(lo(j)));
    };
    auto singleton = [&](const RowMat& M, const Eigen::VectorXd& rhs, Eigen::Index i, Eigen::Index& col, double& coef,
                         double& r) {
        int count = 0;
        r = rhs(i);
        for (RowMat::InnerIterator it(M, i); it; ++it) {
            if (it.value() == 0.0) continue;
            if (is_fixed(it.col())) {
                r -= it.value() * lo(it.col());
            } else if (++count == 1) {
                col = it.col();
                coef = it.value();
            }
        }
        return count == 1;
    };
    for (bool changed = true; changed;) {
        changed = false;
        for (Eigen::Index i = 0; i < in_rows.rows(); ++i) {
            Eigen::Index j = -1;
            double a = 0.0, r = 0.0;
            if (drop_in[static_cast<std::size_t>(i)] || !singleton(in_rows, prog.b_in, i, j, a, r)) continue;
            if (a > 0.0)
                up(j) = std::min(up(j), r / a);
            else
                lo(j) = std::max(lo(j), r / a);
            drop_in[static_cast<std::size_t>(i)] = true;
            changed = true;
        }
        for (Eigen::Index i = 0; i < eq_rows.rows(); ++i) {
            Eigen::Index j = -1;
            double a = 0.0, r = 0.0;
            if (drop_eq[static_cast<std::size_t>(i)] || !singleton(eq_rows, prog.b_eq, i, j, a, r)) continue;
            const double v = r / a;
            if (v < lo(j) - opt.tol * (1.0 + std::abs(v)) || v > up(j) + opt.tol * (1.0 + std::abs(v))) return infeasible();
            lo(j) = up(j) = std::clamp(v, lo(j), up(j));
            drop_eq[static_cast<std::size_t>(i)] = true;
            changed = true;
        }
        for (Eigen::Index j = 0; j < n; ++j)
            if (lo(j) > up(j) && lo(j) <= up(j) + opt.tol * (1.0 + std::abs(lo(j)))) lo(j) = up(j) = 0.5 * (lo(j) + up(j));
    }

    Eigen::VectorXd fixed_value = Eigen::VectorXd::Zero(n);
    std::vector<Eigen::Index> col_map(static_cast<std::size_t>(n), -1);
    std::vector<Eigen::Index> free_cols;
    std::vector<Eigen::Index> pinned;  // fixed ball variables kept as equality rows
    for (Eigen::Index j = 0; j < n; ++j) {
        if (lo(j) > up(j) + opt.tol) return infeasible();
        if (is_fixed(j) && !in_ball[static_cast<std::size_t>(j)]) {
            fixed_value(j) = lo(j);
            continue;
        }
        const bool fixed = is_fixed(j);
        if (fixed) pinned.push_back(j);
        col_map[static_cast<std::size_t>(j)] = static_cast<Eigen::Index>(free_cols.size());
        free_cols.push_back(j);
    }
    const auto nr = static_cast<Eigen::Index>(free_cols.size());

    auto reduce_rows = [&](const RowMat& R, const Eigen::VectorXd& rhs, const std::vector<bool>& dropped, bool equality,
                           std::vector<Triplet>& trip, std::vector<double>& rvec, Eigen::Index& rows) -> bool {
        for (Eigen::Index i = 0; i < R.rows(); ++i) {
            if (dropped[static_cast<std::size_t>(i)]) continue;
            double r = rhs(i);
            bool any = false;
            double rownorm = 0.0;
            for (RowMat::InnerIterator it(R, i); it; ++it) {
                const auto mapped = col_map[static_cast<std::size_t>(it.col())];
                if (mapped < 0)
                    r -= it.value() * fixed_value(it.col());
                else if (it.value() != 0.0) {
                    trip.emplace_back(rows, mapped, it.value());
                    any = true;
                    rownorm = std::max(rownorm, std::abs(it.value()));
                }
            }
            if (!any) {
                const double slack = 1e3 * opt.tol * (1.0 + std::abs(rhs(i)));
                if (equality ? std::abs(r) > slack : r < -slack) return false;
                continue;
            }
            rvec.push_back(r);
            ++rows;
        }
        return true;
    };

    detail::StandardForm f;
    {
        std::vector<Triplet> ta;
        std::vector<double> b;
        Eigen::Index rows = 0;
        if (!reduce_rows(eq_rows, prog.b_eq, drop_eq, true, ta, b, rows)) return infeasible();
        for (auto j : pinned) {
            ta.emplace_back(rows++, col_map[static_cast<std::size_t>(j)], 1.0);
            b.push_back(lo(j));
        }
        f.A.resize(rows, nr);
        f.A.setFromTriplets(ta.begin(), ta.end());
        f.b = Eigen::Map<Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));

        std::vector<Triplet> tg;
        std::vector<double> h;
        Eigen::Index grows = 0;
        if (!reduce_rows(in_rows, prog.b_in, drop_in, false, tg, h, grows)) return infeasible();
        for (Eigen::Index k = 0; k < nr; ++k) {
            const Eigen::Index j = free_cols[static_cast<std::size_t>(k)];
            if (std::find(pinned.begin(), pinned.end(), j) != pinned.end()) continue;
            if (std::isfinite(up(j)) && up(j) < 1e20) {
                tg.emplace_back(grows++, k, 1.0);
                h.push_back(up(j));
            }
            if (std::isfinite(lo(j)) && lo(j) > -1e20) {
                tg.emplace_back(grows++, k, -1.0);
                h.push_back(-lo(j));
            }
        }
        f.cones.linear = grows;
        for (const auto& [l, r] : prog.balls) {
            tg.emplace_back(grows + 1, col_map[static_cast<std::size_t>(l)], -1.0);
            tg.emplace_back(grows + 2, col_map[static_cast<std::size_t>(r)], -1.0);
            h.insert(h.end(), {1.0, 0.0, 0.0});
            grows += 3;
            f.cones.soc.push_back(3);
        }
        f.G.resize(grows, nr);
        f.G.setFromTriplets(tg.begin(), tg.end());
        f.h = Eigen::Map<Eigen::VectorXd>(h.data(), static_cast<Eigen::Index>(h.size()));
        f.c.resize(nr);
        for (Eigen::Index k = 0; k < nr; ++k) f.c(k) = prog.c(free_cols[static_cast<std::size_t>(k)]);
    }

    // Ruiz equilibration: x = D xs, rows scaled by E (uniform inside each cone)
    Eigen::VectorXd D = Eigen::VectorXd::Ones(nr);
    Eigen::VectorXd Ea = Eigen::VectorXd::Ones(f.A.rows());
    Eigen::VectorXd Eg = Eigen::VectorXd::Ones(f.G.rows());
    if (opt.equilibrate && nr > 0) {
        for (int pass = 0; pass < 10; ++pass) {
            Eigen::VectorXd colmax = Eigen::VectorXd::Zero(nr);
            Eigen::VectorXd rowa = Eigen::VectorXd::Zero(f.A.rows());
            Eigen::VectorXd rowg = Eigen::VectorXd::Zero(f.G.rows());
            for (Eigen::Index k = 0; k < nr; ++k) {
                for (SparseMat::InnerIterator it(f.A, k); it; ++it) {
                    colmax(k) = std::max(colmax(k), std::abs(it.value()));
                    rowa(it.row()) = std::max(rowa(it.row()), std::abs(it.value()));
                }
                for (SparseMat::InnerIterator it(f.G, k); it; ++it) {
                    colmax(k) = std::max(colmax(k), std::abs(it.value()));
                    rowg(it.row()) = std::max(rowg(it.row()), std::abs(it.value()));
                }
            }
            Eigen::Index off = f.cones.linear;
            for (auto q : f.cones.soc) {
                const double mx = rowg.segment(off, q).maxCoeff();
                rowg.segment(off, q).setConstant(mx);
                off += q;
            }
            auto factor = [](double v) { return v > 0.0 ? std::clamp(1.0 / std::sqrt(v), 1e-4, 1e4) : 1.0; };
            Eigen::VectorXd dc = colmax.unaryExpr(factor);
            Eigen::VectorXd da = rowa.unaryExpr(factor);
            Eigen::VectorXd dg = rowg.unaryExpr(factor);
            f.A = da.asDiagonal() * f.A * dc.asDiagonal();
            f.G = dg.asDiagonal() * f.G * dc.asDiagonal();
            D = D.cwiseProduct(dc);
            Ea = Ea.cwiseProduct(da);
            Eg = Eg.cwiseProduct(dg);
        }
        f.b = Ea.cwiseProduct(f.b);
        f.h = Eg.cwiseProduct(f.h);
        f.c = D.cwiseProduct(f.c);
    }
    f.eq_unscale = Ea.cwiseInverse();
    f.in_unscale = Eg.cwiseInverse();

    detail::StandardSolution st = detail::solve_standard(f, opt);
    out.iterations = st.iterations;
    out.status = st.status;
    out.x = fixed_value;
    if (st.status == SolveStatus::Infeasible) {
        out.objective = kInf;
        return finish(out);
    }
    const Eigen::VectorXd xr = D.cwiseProduct(st.x);
    for (Eigen::Index k = 0; k < nr; ++k) out.x(free_cols[static_cast<std::size_t>(k)]) = xr(k);
    if (st.status == SolveStatus::Unbounded) {
        out.objective = -kInf;
        return finish(out);
    }
    out.objective = prog.c.dot(out.x) + prog.cost_offset;

    // residuals in original units
    const Eigen::VectorXd y = Ea.cwiseProduct(st.y);
    const Eigen::VectorXd z = Eg.cwiseProduct(st.z);
    const Eigen::VectorXd s = st.s.cwiseQuotient(Eg);
    const SparseMat A0 = Ea.cwiseInverse().asDiagonal() * f.A * D.cwiseInverse().asDiagonal();
    const SparseMat G0 = Eg.cwiseInverse().asDiagonal() * f.G * D.cwiseInverse().asDiagonal();
    const Eigen::VectorXd c0 = f.c.cwiseQuotient(D);
    out.kkt.primal = max_violation(prog, out.x);
    out.kkt.dual = (SparseMat(A0.transpose()) * y + SparseMat(G0.transpose()) * z + c0).lpNorm<Eigen::Infinity>() /
                   (1.0 + c0.lpNorm<Eigen::Infinity>());
    out.kkt.gap = std::abs(s.dot(z));
    return finish(out);
}

}  // namespace ddpf
