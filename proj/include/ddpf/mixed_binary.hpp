#pragma once

#include <chrono>
#include <cstdint>
#include <queue>
#include <utility>
#include <vector>

#include "conic.hpp"

namespace ddpf {

/// Conic program with a subset of variables restricted to {0, 1}.
struct MixedBinaryProgram {
    ConicProgram base;
    std::vector<Eigen::Index> binary_indices;

    void validate() const
    {
        base.validate();
        for (auto j : binary_indices) {
            if (j < 0 || j >= base.n) throw Error(ErrorKind::DimensionMismatch, "binary index out of range");
            if (base.lower(j) != 0.0 || base.upper(j) != 1.0)
                throw Error(ErrorKind::InvalidParameter, "binary variable " + std::to_string(j) + " must have bounds [0,1]");
        }
    }
};

enum class BinaryStrategy { Auto, Enumerate, BranchAndBound };

struct MixedBinaryOptions {
    SolverOptions convex;
    int enumerate_max_binaries = 24;
    std::uint64_t auto_enumerate_limit = 4096;  ///< auto enumerates when 2^|binaries| is at most this
    double integrality_tol = 1e-6;
    /// Relative objective tolerance for ties; it must exceed the convex solver's accuracy.
    /// Nodes whose bound is within it of the incumbent are still explored.
    double tie_tol = 1e-7;
};

struct MixedBinarySolution {
    Solution solution;
    std::vector<int> binaries;  ///< assignment in binary_indices order
    int subproblems = 0;
};

namespace detail {

inline bool lex_less(const std::vector<int>& a, const std::vector<int>& b) { return a < b; }

inline double tie_tol(const MixedBinaryOptions& opt, double v) { return opt.tie_tol * std::max(1.0, std::abs(v)); }

/// Solves the base program with binaries fixed; nullopt-like empty x when infeasible.
inline Solution solve_fixed(const MixedBinaryProgram& prog, const std::vector<int>& assignment,
                            const MixedBinaryOptions& opt)
{
    ConicProgram p = prog.base;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        const auto j = prog.binary_indices[i];
        p.lower(j) = p.upper(j) = assignment[i];
    }
    return solve_convex(p, opt.convex);
}

inline bool usable(const Solution& s) { return s.status == SolveStatus::Optimal || s.status == SolveStatus::ToleranceNotMet; }

}  // namespace detail

/// Global optimum over all binary assignments. Ties in the objective go to the
/// lexicographically smallest assignment so the result does not depend on search order.
inline MixedBinarySolution solve_mixed_binary(const MixedBinaryProgram& prog,
                                              BinaryStrategy strategy = BinaryStrategy::Auto,
                                              const MixedBinaryOptions& opt = {})
{
    const auto start = std::chrono::steady_clock::now();
    prog.validate();
    const std::size_t nb = prog.binary_indices.size();
    if (strategy == BinaryStrategy::Auto)
        strategy = nb < 63 && (std::uint64_t{1} << nb) <= opt.auto_enumerate_limit ? BinaryStrategy::Enumerate
                                                                                   : BinaryStrategy::BranchAndBound;

    MixedBinarySolution best;
    best.solution.status = SolveStatus::Infeasible;
    best.solution.objective = kInf;
    bool have = false;
    auto offer = [&](const Solution& s, const std::vector<int>& assignment) {
        if (!detail::usable(s)) return;
        const double tol = detail::tie_tol(opt, s.objective);
        if (!have || s.objective < best.solution.objective - tol ||
            (s.objective <= best.solution.objective + tol && detail::lex_less(assignment, best.binaries))) {
            best.solution = s;
            best.binaries = assignment;
            have = true;
        }
    };

    if (strategy == BinaryStrategy::Enumerate) {
        if (static_cast<int>(nb) > opt.enumerate_max_binaries)
            throw Error(ErrorKind::TooManyBinaries,
                        std::to_string(nb) + " binaries exceed the cap of " + std::to_string(opt.enumerate_max_binaries));
        std::vector<int> a(nb, 0);
        const std::uint64_t total = std::uint64_t{1} << nb;
        for (std::uint64_t mask = 0; mask < total; ++mask) {
            // first binary is the most significant bit, so masks ascend lexicographically
            for (std::size_t i = 0; i < nb; ++i) a[i] = static_cast<int>((mask >> (nb - 1 - i)) & 1U);
            const Solution s = detail::solve_fixed(prog, a, opt);
            ++best.subproblems;
            if (s.status == SolveStatus::Unbounded) {
                best.solution = s;
                best.binaries = a;
                best.solution.solve_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                return best;
            }
            offer(s, a);
        }
    } else {
        struct Node {
            double bound;
            std::uint64_t seq;
            std::vector<int> lo, hi;
        };
        auto worse = [](const Node& a, const Node& b) { return a.bound > b.bound || (a.bound == b.bound && a.seq > b.seq); };
        std::priority_queue<Node, std::vector<Node>, decltype(worse)> open(worse);
        std::uint64_t seq = 0;
        open.push({-kInf, seq++, std::vector<int>(nb, 0), std::vector<int>(nb, 1)});
        while (!open.empty()) {
            Node node = open.top();
            open.pop();
            if (have && node.bound > best.solution.objective + detail::tie_tol(opt, best.solution.objective)) continue;

            ConicProgram p = prog.base;
            for (std::size_t i = 0; i < nb; ++i) {
                p.lower(prog.binary_indices[i]) = node.lo[i];
                p.upper(prog.binary_indices[i]) = node.hi[i];
            }
            const Solution relax = solve_convex(p, opt.convex);
            ++best.subproblems;
            if (relax.status == SolveStatus::Unbounded) {
                best.solution = relax;
                best.solution.solve_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                return best;
            }
            if (!detail::usable(relax)) continue;
            if (have && relax.objective > best.solution.objective + detail::tie_tol(opt, best.solution.objective))
                continue;

            std::ptrdiff_t branch = -1;
            double closest = kInf;
            for (std::size_t i = 0; i < nb; ++i) {
                const double v = relax.x(prog.binary_indices[i]);
                const double frac = std::abs(v - std::round(v));
                if (frac <= opt.integrality_tol) continue;
                const double dist = std::abs(v - 0.5);
                if (dist < closest) {
                    closest = dist;
                    branch = static_cast<std::ptrdiff_t>(i);
                }
            }
            if (branch < 0) {
                std::vector<int> a(nb);
                for (std::size_t i = 0; i < nb; ++i)
                    a[i] = static_cast<int>(std::lround(std::clamp(relax.x(prog.binary_indices[i]), 0.0, 1.0)));
                // re-solve on the integral face so the objective matches a fixed-binary solve
                const Solution s = node.lo == node.hi ? relax : detail::solve_fixed(prog, a, opt);
                if (node.lo != node.hi) ++best.subproblems;
                offer(s, a);
                continue;
            }
            const auto b = static_cast<std::size_t>(branch);
            Node down{relax.objective, seq++, node.lo, node.hi};
            down.hi[b] = 0;
            Node up{relax.objective, seq++, node.lo, node.hi};
            up.lo[b] = 1;
            open.push(std::move(down));
            open.push(std::move(up));
        }
    }
    if (!have) best.binaries.assign(nb, 0);
    best.solution.solve_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return best;
}

/// Incremental assembly of a MixedBinaryProgram.
class ProgramBuilder {
public:
    using Terms = std::vector<std::pair<Eigen::Index, double>>;

    /// Adds `count` variables with common bounds; returns the first index.
    Eigen::Index add_variables(Eigen::Index count, double lower = -kInf, double upper = kInf)
    {
        const Eigen::Index first = n_;
        for (Eigen::Index i = 0; i < count; ++i) {
            lower_.push_back(lower);
            upper_.push_back(upper);
            cost_.push_back(0.0);
        }
        n_ += count;
        return first;
    }

    Eigen::Index add_binary()
    {
        const Eigen::Index j = add_variables(1, 0.0, 1.0);
        binaries_.push_back(j);
        return j;
    }

    void set_bounds(Eigen::Index j, double lower, double upper)
    {
        lower_.at(static_cast<std::size_t>(j)) = lower;
        upper_.at(static_cast<std::size_t>(j)) = upper;
    }

    void add_cost(Eigen::Index j, double v) { cost_.at(static_cast<std::size_t>(j)) += v; }
    void add_cost_offset(double v) { offset_ += v; }

    void add_equality(const Terms& terms, double rhs) { add_row(eq_, eq_rhs_, terms, rhs); }
    void add_inequality(const Terms& terms, double rhs) { add_row(in_, in_rhs_, terms, rhs); }
    void add_ball(Eigen::Index l, Eigen::Index r) { balls_.push_back({l, r}); }

    Eigen::Index size() const { return n_; }
    Eigen::Index equality_count() const { return static_cast<Eigen::Index>(eq_rhs_.size()); }
    Eigen::Index inequality_count() const { return static_cast<Eigen::Index>(in_rhs_.size()); }

    MixedBinaryProgram build() const
    {
        MixedBinaryProgram out;
        ConicProgram& p = out.base;
        p.n = n_;
        p.c = Eigen::Map<const Eigen::VectorXd>(cost_.data(), n_);
        p.cost_offset = offset_;
        p.lower = Eigen::Map<const Eigen::VectorXd>(lower_.data(), n_);
        p.upper = Eigen::Map<const Eigen::VectorXd>(upper_.data(), n_);
        p.A_eq.resize(equality_count(), n_);
        p.A_eq.setFromTriplets(eq_.begin(), eq_.end());
        p.b_eq = Eigen::Map<const Eigen::VectorXd>(eq_rhs_.data(), equality_count());
        p.A_in.resize(inequality_count(), n_);
        p.A_in.setFromTriplets(in_.begin(), in_.end());
        p.b_in = Eigen::Map<const Eigen::VectorXd>(in_rhs_.data(), inequality_count());
        p.balls = balls_;
        out.binary_indices = binaries_;
        return out;
    }

private:
    void add_row(std::vector<Triplet>& trip, std::vector<double>& rhs, const Terms& terms, double b)
    {
        const auto row = static_cast<Eigen::Index>(rhs.size());
        for (const auto& [j, v] : terms) {
            if (j < 0 || j >= n_) throw Error(ErrorKind::DimensionMismatch, "row references unknown variable");
            if (v != 0.0) trip.emplace_back(row, j, v);
        }
        rhs.push_back(b);
    }

    Eigen::Index n_ = 0;
    std::vector<double> lower_, upper_, cost_;
    double offset_ = 0.0;
    std::vector<Triplet> eq_, in_;
    std::vector<double> eq_rhs_, in_rhs_;
    std::vector<std::array<Eigen::Index, 2>> balls_;
    std::vector<Eigen::Index> binaries_;
};

}  // namespace ddpf
