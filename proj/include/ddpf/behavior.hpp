#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "grid.hpp"

namespace ddpf {

/// Which angle pairs are lifted: the grid's own lines, or every node pair.
enum class LiftMode { PerEdge, AllPairs };

inline const char* to_string(LiftMode m) { return m == LiftMode::PerEdge ? "per-edge" : "all-pairs"; }

/// Sampled measurement record. Every block stores one sample per row.
///
/// `theta` holds angle differences theta_i - theta_j for `theta_pairs`
/// (the grid lines in per-edge mode, all node pairs in all-pairs mode); `phi`
/// is the lift of each theta row; `pe` holds [p_ij, p_ji] per line of
/// `line_pairs`; `pg` holds nodal injections in ascending node order.
struct Trajectory {
    LiftMode mode = LiftMode::PerEdge;
    std::vector<NodePair> theta_pairs;
    std::vector<NodePair> line_pairs;
    std::vector<NodeId> nodes;
    Eigen::MatrixXd theta;
    Eigen::MatrixXd phi;
    Eigen::MatrixXd pe;
    Eigen::MatrixXd pg;

    Eigen::Index samples() const { return theta.rows(); }
};

struct HankelMatrix {
    int order = 1;
    int width = 1;  ///< channels per sample
    Eigen::MatrixXd data;
};

/// Block-Hankel matrix of order L from a sample block (one sample per row).
/// Row block r, column c holds sample r + c.
inline HankelMatrix hankel(const Eigen::MatrixXd& samples, int order)
{
    const Eigen::Index n = samples.rows();
    const Eigen::Index w = samples.cols();
    if (order < 1 || order > n)
        throw Error(ErrorKind::OrderTooLarge, "order " + std::to_string(order) + " for " + std::to_string(n) + " samples");
    HankelMatrix h{order, static_cast<int>(w), Eigen::MatrixXd(w * order, n - order + 1)};
    for (int r = 0; r < order; ++r)
        for (Eigen::Index c = 0; c < n - order + 1; ++c) h.data.block(r * w, c, w, 1) = samples.row(r + c).transpose();
    return h;
}

struct PeReport {
    bool pe = false;
    int rank = 0;
    int required_rank = 0;
    double threshold = 0.0;
    double smallest_kept_singular_value = 0.0;
};

/// Numerical rank of the order-L Hankel matrix by singular-value thresholding at rank_tol * sigma_max.
inline PeReport is_persistently_exciting(const Eigen::MatrixXd& samples, int order, double rank_tol = 1e-9)
{
    const HankelMatrix h = hankel(samples, order);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(h.data);
    const Eigen::VectorXd& sv = svd.singularValues();
    PeReport rep;
    rep.required_rank = static_cast<int>(h.data.rows());
    const double smax = sv.size() ? sv(0) : 0.0;
    rep.threshold = rank_tol * smax;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv(i) > rep.threshold && sv(i) > 0.0) {
            ++rep.rank;
            rep.smallest_kept_singular_value = sv(i);
        }
    rep.pe = rep.rank == rep.required_rank;
    return rep;
}

inline Eigen::Vector3d lift_line(double theta) { return {1.0, std::cos(theta), std::sin(theta)}; }

/// [1, cos th_1, sin th_1, ..., cos th_m, sin th_m] for angle differences th.
inline Eigen::VectorXd lift_angles(const Eigen::VectorXd& theta)
{
    Eigen::VectorXd phi(2 * theta.size() + 1);
    phi(0) = 1.0;
    for (Eigen::Index l = 0; l < theta.size(); ++l) {
        phi(2 * l + 1) = std::cos(theta(l));
        phi(2 * l + 2) = std::sin(theta(l));
    }
    return phi;
}

inline Eigen::VectorXd lift_grid(const Grid& grid, const Eigen::VectorXd& theta)
{
    if (static_cast<std::size_t>(theta.size()) != grid.edge_count())
        throw Error(ErrorKind::DimensionMismatch, "theta length differs from edge count");
    return lift_angles(theta);
}

/// Angle differences theta_i - theta_j for every node pair, from per-node angles.
inline Eigen::VectorXd pair_differences(const Grid& grid, const Eigen::VectorXd& node_angles)
{
    if (static_cast<std::size_t>(node_angles.size()) != grid.node_count())
        throw Error(ErrorKind::DimensionMismatch, "node angle vector must have one entry per node");
    const auto pairs = all_node_pairs(grid);
    Eigen::VectorXd d(static_cast<Eigen::Index>(pairs.size()));
    for (std::size_t p = 0; p < pairs.size(); ++p)
        d(static_cast<Eigen::Index>(p)) = node_angles(static_cast<Eigen::Index>(grid.index_of(pairs[p].first))) -
                                          node_angles(static_cast<Eigen::Index>(grid.index_of(pairs[p].second)));
    return d;
}

inline Eigen::VectorXd lift_all_pairs(const Grid& grid, const Eigen::VectorXd& node_angles)
{
    return lift_angles(pair_differences(grid, node_angles));
}

/// atan2 of each (cos, sin) pair of a lifted vector.
inline Eigen::VectorXd angles_from_lift(const Eigen::VectorXd& phi)
{
    Eigen::VectorXd th((phi.size() - 1) / 2);
    for (Eigen::Index l = 0; l < th.size(); ++l) th(l) = std::atan2(phi(2 * l + 2), phi(2 * l + 1));
    return th;
}

/// Order-one Hankel blocks of a PE-certified trajectory. `pg` is present for
/// the topology-agnostic (all-pairs) representation.
struct DataDrivenModel {
    LiftMode mode = LiftMode::PerEdge;
    HankelMatrix phi;
    HankelMatrix pe;
    std::optional<HankelMatrix> pg;
    PeReport certificate;

    Eigen::Index lifted_dim() const { return phi.data.rows(); }
    Eigen::Index columns() const { return phi.data.cols(); }
};

inline DataDrivenModel make_model(const Eigen::MatrixXd& phi_samples, const Eigen::MatrixXd& pe_samples,
                                  const Eigen::MatrixXd* pg_samples = nullptr, LiftMode mode = LiftMode::PerEdge,
                                  double rank_tol = 1e-9)
{
    if (phi_samples.rows() != pe_samples.rows() || (pg_samples && pg_samples->rows() != phi_samples.rows()))
        throw Error(ErrorKind::DimensionMismatch, "channel blocks must have equal sample counts");
    DataDrivenModel m;
    m.mode = mode;
    m.certificate = is_persistently_exciting(phi_samples, 1, rank_tol);
    if (!m.certificate.pe)
        throw Error(ErrorKind::ModelNotPE, "lifted input rank " + std::to_string(m.certificate.rank) + " < " +
                                               std::to_string(m.certificate.required_rank));
    m.phi = hankel(phi_samples, 1);
    m.pe = hankel(pe_samples, 1);
    if (pg_samples) m.pg = hankel(*pg_samples, 1);
    return m;
}

inline DataDrivenModel make_model(const Trajectory& traj, double rank_tol = 1e-9)
{
    return make_model(traj.phi, traj.pe, traj.mode == LiftMode::AllPairs ? &traj.pg : nullptr, traj.mode, rank_tol);
}

/// Minimum-norm alpha with H_phi alpha = phi_query.
inline Eigen::VectorXd dd_alpha(const DataDrivenModel& model, const Eigen::VectorXd& phi_query, double tol = 1e-8)
{
    if (phi_query.size() != model.lifted_dim())
        throw Error(ErrorKind::DimensionMismatch, "query length differs from lifted dimension");
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(model.phi.data);
    Eigen::VectorXd alpha = cod.solve(phi_query);
    const double res = (model.phi.data * alpha - phi_query).norm();
    if (res > tol * (1.0 + phi_query.norm()))
        throw Error(ErrorKind::InconsistentQuery, "residual " + std::to_string(res));
    return alpha;
}

/// Line powers predicted from data alone: H_pe alpha for the minimum-norm alpha.
inline Eigen::VectorXd dd_predict(const DataDrivenModel& model, const Eigen::VectorXd& phi_query, double tol = 1e-8)
{
    return model.pe.data * dd_alpha(model, phi_query, tol);
}

}  // namespace ddpf
