#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "grid.hpp"

namespace ddpf {

enum class Direction { From, To };

/// Constant-voltage line coefficients: p_ij = g_from - (g_t cos th + b_t sin th).
struct EffectiveLineCoeffs {
    double g_from = 0.0;  ///< (gbar_ij + g_ij) v_i^2
    double g_to = 0.0;    ///< (gbar_ji + g_ij) v_j^2
    double g_t = 0.0;     ///< g_ij v_i v_j
    double b_t = 0.0;     ///< b_ij v_i v_j
};

inline EffectiveLineCoeffs effective_coeffs(const LineParams& line, double v_i, double v_j)
{
    if (!(v_i > 0.0) || !(v_j > 0.0)) throw Error(ErrorKind::NonpositiveVoltage, "line end voltage must be positive");
    return EffectiveLineCoeffs{(line.g_shunt_from + line.g) * v_i * v_i, (line.g_shunt_to + line.g) * v_j * v_j,
                               line.g * v_i * v_j, line.b * v_i * v_j};
}

inline std::vector<EffectiveLineCoeffs> effective_coeffs(const Grid& grid)
{
    std::vector<EffectiveLineCoeffs> out;
    out.reserve(grid.edge_count());
    for (std::size_t l = 0; l < grid.edge_count(); ++l) {
        const auto& e = grid.edges()[l];
        out.push_back(effective_coeffs(grid.lines()[l], grid.voltage(e.first), grid.voltage(e.second)));
    }
    return out;
}

/// Active power entering the line at its `from` (i) or `to` (j) end; theta is theta_i - theta_j.
inline double line_power(const EffectiveLineCoeffs& c, double theta, Direction direction)
{
    if (direction == Direction::From) return c.g_from - (c.g_t * std::cos(theta) + c.b_t * std::sin(theta));
    return c.g_to - (c.g_t * std::cos(-theta) + c.b_t * std::sin(-theta));
}

/// Directional line powers [p_ij, p_ji] per edge for the given edge angle differences.
inline Eigen::VectorXd line_powers(const std::vector<EffectiveLineCoeffs>& coeffs, const Eigen::VectorXd& theta)
{
    if (static_cast<std::size_t>(theta.size()) != coeffs.size())
        throw Error(ErrorKind::DimensionMismatch, "theta length differs from edge count");
    Eigen::VectorXd pe(2 * theta.size());
    for (Eigen::Index l = 0; l < theta.size(); ++l) {
        const auto& c = coeffs[static_cast<std::size_t>(l)];
        pe(2 * l) = line_power(c, theta(l), Direction::From);
        pe(2 * l + 1) = line_power(c, theta(l), Direction::To);
    }
    return pe;
}

/// Maps directional line powers onto nodal injections (rows follow sorted node order).
inline Eigen::MatrixXd injection_matrix(const Grid& grid)
{
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(grid.node_count()),
                                              2 * static_cast<Eigen::Index>(grid.edge_count()));
    for (std::size_t l = 0; l < grid.edge_count(); ++l) {
        const auto& e = grid.edges()[l];
        m(static_cast<Eigen::Index>(grid.index_of(e.first)), 2 * static_cast<Eigen::Index>(l)) = 1.0;
        m(static_cast<Eigen::Index>(grid.index_of(e.second)), 2 * static_cast<Eigen::Index>(l) + 1) = 1.0;
    }
    return m;
}

inline Eigen::VectorXd injections_from_flows(const Grid& grid, const Eigen::VectorXd& pe)
{
    if (static_cast<std::size_t>(pe.size()) != 2 * grid.edge_count())
        throw Error(ErrorKind::DimensionMismatch, "directional line power vector must have 2*N_e entries");
    Eigen::VectorXd pg = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(grid.node_count()));
    for (std::size_t l = 0; l < grid.edge_count(); ++l) {
        const auto& e = grid.edges()[l];
        pg(static_cast<Eigen::Index>(grid.index_of(e.first))) += pe(2 * static_cast<Eigen::Index>(l));
        pg(static_cast<Eigen::Index>(grid.index_of(e.second))) += pe(2 * static_cast<Eigen::Index>(l) + 1);
    }
    return pg;
}

inline double total_losses(const Eigen::VectorXd& pg) { return pg.sum(); }

struct RadialPfOptions {
    double tol = 1e-10;
    double angle_bound = std::numbers::pi / 2;
    int max_sweeps = 20;
};

struct RadialPfResult {
    Eigen::VectorXd theta;  ///< edge angle differences in edge order
    double slack_injection = 0.0;
    double residual = 0.0;  ///< max injection mismatch over non-slack nodes
    int sweeps = 0;
};

namespace detail {

/// Solves g_near - (g_t cos psi + b_t sin psi) = target for psi on the branch where the
/// left side is increasing, then polishes with safeguarded Newton steps.
inline double invert_line_power(double g_near, double g_t, double b_t, double target, double bound, double tol)
{
    const double radius = std::hypot(g_t, b_t);
    const double offset = std::atan2(b_t, g_t);
    const double arg = (g_near - target) / radius;
    if (std::abs(arg) > 1.0 + 1e-15)
        throw Error(ErrorKind::NoConvergence,
                    "iterations=0 residual=" + std::to_string(std::abs(arg) - 1.0) + " (flow beyond line capability)");
    double psi = offset + std::acos(std::clamp(arg, -1.0, 1.0));
    if (psi > std::numbers::pi) psi -= 2.0 * std::numbers::pi;
    if (std::abs(psi) > bound) throw Error(ErrorKind::AngleOutOfTrustRegion, "required angle " + std::to_string(psi));

    double lo = -bound, hi = bound;
    for (int it = 0; it < 50; ++it) {
        const double f = g_near - (g_t * std::cos(psi) + b_t * std::sin(psi)) - target;
        if (std::abs(f) <= 0.1 * tol) break;
        const double df = g_t * std::sin(psi) - b_t * std::cos(psi);
        if (f > 0.0)
            hi = std::min(hi, psi);
        else
            lo = std::max(lo, psi);
        double next = df != 0.0 ? psi - f / df : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        psi = next;
    }
    return psi;
}

}  // namespace detail

/// Recovers edge angle differences from injections at every non-slack node.
///
/// The tree is rooted at the slack bus and swept leaves-first: once all child
/// flows of a node are known its flow towards the parent follows from the
/// injection balance, and that single-edge equation is inverted in closed form.
inline RadialPfResult solve_radial_pf(const Grid& grid, const Eigen::VectorXd& injections, NodeId slack,
                                      const RadialPfOptions& opt = {})
{
    validate_radial(grid);
    const std::size_t n = grid.node_count();
    if (static_cast<std::size_t>(injections.size()) != n)
        throw Error(ErrorKind::DimensionMismatch, "injection vector must have one entry per node");
    if (!(opt.tol > 0.0)) throw Error(ErrorKind::InvalidParameter, "tol must be positive");
    const std::size_t root = grid.index_of(slack);
    const auto coeffs = effective_coeffs(grid);

    // BFS order from the root; parent edge per node
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> adj(n);  // (neighbour, edge)
    for (std::size_t l = 0; l < grid.edge_count(); ++l) {
        auto a = grid.index_of(grid.edges()[l].first), b = grid.index_of(grid.edges()[l].second);
        adj[a].push_back({b, l});
        adj[b].push_back({a, l});
    }
    std::vector<std::size_t> order{root};
    std::vector<std::ptrdiff_t> parent_edge(n, -1);
    std::vector<bool> seen(n, false);
    seen[root] = true;
    for (std::size_t q = 0; q < order.size(); ++q)
        for (auto [nb, l] : adj[order[q]])
            if (!seen[nb]) {
                seen[nb] = true;
                parent_edge[nb] = static_cast<std::ptrdiff_t>(l);
                order.push_back(nb);
            }

    RadialPfResult res;
    res.theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(grid.edge_count()));
    Eigen::VectorXd pe;
    for (int sweep = 1; sweep <= opt.max_sweeps; ++sweep) {
        res.sweeps = sweep;
        std::vector<double> child_inflow(n, 0.0);  // sum of flows leaving the node into child lines
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            const std::size_t v = *it;
            if (v == root) continue;
            const auto l = static_cast<std::size_t>(parent_edge[v]);
            const auto& c = coeffs[l];
            const bool v_is_from = grid.index_of(grid.edges()[l].first) == v;
            const double target = injections(static_cast<Eigen::Index>(v)) - child_inflow[v];
            // psi = theta_v - theta_parent
            const double psi = detail::invert_line_power(v_is_from ? c.g_from : c.g_to, c.g_t, c.b_t, target,
                                                         opt.angle_bound, opt.tol);
            const double th = v_is_from ? psi : -psi;
            res.theta(static_cast<Eigen::Index>(l)) = th;
            const std::size_t parent = v_is_from ? grid.index_of(grid.edges()[l].second)
                                                 : grid.index_of(grid.edges()[l].first);
            child_inflow[parent] += line_power(c, th, v_is_from ? Direction::To : Direction::From);
        }
        pe = line_powers(coeffs, res.theta);
        const Eigen::VectorXd pg = injections_from_flows(grid, pe);
        double worst = 0.0;
        for (std::size_t v = 0; v < n; ++v)
            if (v != root)
                worst = std::max(worst, std::abs(pg(static_cast<Eigen::Index>(v)) - injections(static_cast<Eigen::Index>(v))));
        res.residual = worst;
        res.slack_injection = pg(static_cast<Eigen::Index>(root));
        if (worst <= opt.tol) return res;
    }
    throw Error(ErrorKind::NoConvergence,
                "iterations=" + std::to_string(res.sweeps) + " residual=" + std::to_string(res.residual));
}

}  // namespace ddpf
