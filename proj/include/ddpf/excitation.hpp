#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "behavior.hpp"
#include "physics.hpp"

namespace ddpf {

struct ExcitationOptions {
    Eigen::Index samples = 9;
    double angle_range = 0.3;  ///< radians, draws are uniform in [-range, range]
    std::uint64_t seed = 0;
    LiftMode mode = LiftMode::PerEdge;
    double rank_tol = 1e-9;
    int max_attempts = 10;
};

struct Excitation {
    Trajectory trajectory;
    PeReport certificate;
    int attempts = 0;
};

/// Draws random operating points, evaluates the line physics, and retries until
/// the lifted input block is persistently exciting of order one.
inline Excitation generate_excitation(const Grid& grid, const ExcitationOptions& opt)
{
    validate_radial(grid);
    if (!(opt.angle_range > 0.0 && opt.angle_range <= std::numbers::pi / 2))
        throw Error(ErrorKind::InvalidParameter, "angle_range must lie in (0, pi/2]");
    if (opt.samples < 1) throw Error(ErrorKind::InvalidParameter, "at least one sample is required");

    const auto coeffs = effective_coeffs(grid);
    const auto pairs = all_node_pairs(grid);
    const auto ne = static_cast<Eigen::Index>(grid.edge_count());
    const auto nb = static_cast<Eigen::Index>(grid.node_count());
    const Eigen::Index n = opt.samples;

    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> draw(-opt.angle_range, opt.angle_range);

    Excitation out;
    Trajectory& t = out.trajectory;
    t.mode = opt.mode;
    t.line_pairs = grid.edges();
    t.nodes = grid.nodes();
    t.theta_pairs = opt.mode == LiftMode::PerEdge ? grid.edges() : pairs;
    const auto width = static_cast<Eigen::Index>(t.theta_pairs.size());

    for (out.attempts = 1; out.attempts <= opt.max_attempts; ++out.attempts) {
        t.theta.resize(n, width);
        t.phi.resize(n, 2 * width + 1);
        t.pe.resize(n, 2 * ne);
        t.pg.resize(n, nb);
        for (Eigen::Index k = 0; k < n; ++k) {
            Eigen::VectorXd edge_theta(ne);
            if (opt.mode == LiftMode::PerEdge) {
                for (Eigen::Index l = 0; l < ne; ++l) edge_theta(l) = draw(rng);
                t.theta.row(k) = edge_theta.transpose();
            } else {
                Eigen::VectorXd node_angles = Eigen::VectorXd::Zero(nb);
                for (Eigen::Index v = 1; v < nb; ++v) node_angles(v) = draw(rng);
                t.theta.row(k) = pair_differences(grid, node_angles).transpose();
                for (Eigen::Index l = 0; l < ne; ++l) {
                    const auto& e = grid.edges()[static_cast<std::size_t>(l)];
                    edge_theta(l) = node_angles(static_cast<Eigen::Index>(grid.index_of(e.first))) -
                                    node_angles(static_cast<Eigen::Index>(grid.index_of(e.second)));
                }
            }
            t.phi.row(k) = lift_angles(t.theta.row(k).transpose()).transpose();
            const Eigen::VectorXd pe = line_powers(coeffs, edge_theta);
            t.pe.row(k) = pe.transpose();
            t.pg.row(k) = injections_from_flows(grid, pe).transpose();
        }
        out.certificate = is_persistently_exciting(t.phi, 1, opt.rank_tol);
        if (out.certificate.pe) return out;
    }
    throw Error(ErrorKind::ExcitationFailed, "lifted block rank " + std::to_string(out.certificate.rank) + "/" +
                                                 std::to_string(out.certificate.required_rank) + " after " +
                                                 std::to_string(opt.max_attempts) + " attempts");
}

// ---------------------------------------------------------------------------
// Trajectory CSV
//
// Header: k, theta_<i>_<j>..., phi_0..phi_<d-1>, pe_<i>_<j>, pe_<j>_<i>..., pg_<i>...
// One sample per row; values are written with 17 significant digits so that
// import reproduces every double exactly. Per-edge files list the grid lines
// under theta_*, all-pairs files list every node pair.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_double(const std::string& s, const std::string& column)
{
    try {
        std::size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorKind::SchemaError, "column " + column + ": cannot parse '" + s + "'");
    }
}

inline bool parse_ints(const std::string& s, std::vector<int>& out)
{
    out.clear();
    std::istringstream ss(s);
    std::string part;
    while (std::getline(ss, part, '_')) {
        int v = 0;
        auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
        if (ec != std::errc{} || p != part.data() + part.size()) return false;
        out.push_back(v);
    }
    return true;
}

}  // namespace detail

inline void export_trajectory(const Trajectory& t, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + path);
    out << "k";
    for (const auto& p : t.theta_pairs) out << ",theta_" << p.first << "_" << p.second;
    for (Eigen::Index i = 0; i < t.phi.cols(); ++i) out << ",phi_" << i;
    for (const auto& p : t.line_pairs)
        out << ",pe_" << p.first << "_" << p.second << ",pe_" << p.second << "_" << p.first;
    for (NodeId v : t.nodes) out << ",pg_" << v;
    out << "\n";
    for (Eigen::Index k = 0; k < t.samples(); ++k) {
        out << k;
        for (const Eigen::MatrixXd* block : {&t.theta, &t.phi, &t.pe, &t.pg})
            for (Eigen::Index c = 0; c < block->cols(); ++c) out << "," << detail::format_double((*block)(k, c));
        out << "\n";
    }
    if (!out) throw Error(ErrorKind::IoError, "write failed for " + path);
}

inline Trajectory import_trajectory(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoError, "cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line.empty()) throw Error(ErrorKind::SchemaError, "empty file " + path);
    const auto header = detail::split_csv_line(line);
    if (header.empty() || header[0] != "k") throw Error(ErrorKind::SchemaError, "column k: first column must be 'k'");

    Trajectory t;
    std::vector<std::size_t> theta_cols, phi_cols, pe_cols, pg_cols;
    std::vector<int> ids;
    std::vector<NodePair> pe_dirs;
    for (std::size_t c = 1; c < header.size(); ++c) {
        const std::string& h = header[c];
        if (h.rfind("theta_", 0) == 0 && detail::parse_ints(h.substr(6), ids) && ids.size() == 2) {
            t.theta_pairs.push_back({ids[0], ids[1]});
            theta_cols.push_back(c);
        } else if (h.rfind("phi_", 0) == 0 && detail::parse_ints(h.substr(4), ids) && ids.size() == 1) {
            if (ids[0] != static_cast<int>(phi_cols.size())) throw Error(ErrorKind::SchemaError, "column " + h + ": out of order");
            phi_cols.push_back(c);
        } else if (h.rfind("pe_", 0) == 0 && detail::parse_ints(h.substr(3), ids) && ids.size() == 2) {
            pe_dirs.push_back({ids[0], ids[1]});
            pe_cols.push_back(c);
        } else if (h.rfind("pg_", 0) == 0 && detail::parse_ints(h.substr(3), ids) && ids.size() == 1) {
            t.nodes.push_back(ids[0]);
            pg_cols.push_back(c);
        } else {
            throw Error(ErrorKind::SchemaError, "column " + h + ": unknown");
        }
    }
    if (theta_cols.empty()) throw Error(ErrorKind::SchemaError, "column theta_*: missing");
    if (phi_cols.size() != 2 * theta_cols.size() + 1)
        throw Error(ErrorKind::SchemaError, "column phi_*: expected " + std::to_string(2 * theta_cols.size() + 1));
    if (pe_cols.empty() || pe_cols.size() % 2) throw Error(ErrorKind::SchemaError, "column pe_*: missing or unpaired");
    for (std::size_t i = 0; i < pe_dirs.size(); i += 2) {
        const auto& a = pe_dirs[i];
        const auto& b = pe_dirs[i + 1];
        if (!(a.first < a.second && b.first == a.second && b.second == a.first))
            throw Error(ErrorKind::SchemaError, "column pe_" + std::to_string(a.first) + "_" + std::to_string(a.second) +
                                                    ": directions must be listed as pe_i_j, pe_j_i");
        t.line_pairs.push_back(a);
    }
    std::set<NodeId> referenced;
    for (const auto& p : t.line_pairs) referenced.insert({p.first, p.second});
    for (const auto& p : t.theta_pairs) referenced.insert({p.first, p.second});
    for (NodeId v : referenced)
        if (std::find(t.nodes.begin(), t.nodes.end(), v) == t.nodes.end())
            throw Error(ErrorKind::SchemaError, "column pg_" + std::to_string(v) + ": missing");
    t.mode = t.theta_pairs == t.line_pairs ? LiftMode::PerEdge : LiftMode::AllPairs;

    std::vector<std::vector<double>> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw Error(ErrorKind::SchemaError, "row " + std::to_string(lineno) + ": expected " +
                                                    std::to_string(header.size()) + " fields");
        std::vector<double> r(cells.size());
        for (std::size_t c = 1; c < cells.size(); ++c) r[c] = detail::parse_double(cells[c], header[c]);
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw Error(ErrorKind::SchemaError, "no samples in " + path);

    auto fill = [&](Eigen::MatrixXd& m, const std::vector<std::size_t>& cols) {
        m.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
        for (std::size_t k = 0; k < rows.size(); ++k)
            for (std::size_t c = 0; c < cols.size(); ++c)
                m(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c)) = rows[k][cols[c]];
    };
    fill(t.theta, theta_cols);
    fill(t.phi, phi_cols);
    fill(t.pe, pe_cols);
    fill(t.pg, pg_cols);
    return t;
}

/// Checks that a trajectory's line and node layout matches the grid.
inline void check_trajectory_layout(const Grid& grid, const Trajectory& t)
{
    if (t.line_pairs != grid.edges()) throw Error(ErrorKind::DimensionMismatch, "trajectory lines differ from grid lines");
    if (t.nodes != grid.nodes()) throw Error(ErrorKind::DimensionMismatch, "trajectory nodes differ from grid nodes");
    const auto expected = t.mode == LiftMode::PerEdge ? grid.edges() : all_node_pairs(grid);
    if (t.theta_pairs != expected) throw Error(ErrorKind::DimensionMismatch, "trajectory angle pairs do not match grid");
}

}  // namespace ddpf
