#pragma once

#include <optional>
#include <string>
#include <vector>

#include "behavior.hpp"
#include "mixed_binary.hpp"
#include "physics.hpp"

namespace ddpf {

enum class OpfVariant { Reference, NonconvexDD, ConvexDD, GeneralizedDD };

inline const char* to_string(OpfVariant v)
{
    switch (v) {
    case OpfVariant::Reference: return "reference";
    case OpfVariant::NonconvexDD: return "dd";
    case OpfVariant::ConvexDD: return "dd-convex";
    case OpfVariant::GeneralizedDD: return "dd-generalized";
    }
    return "unknown";
}

inline OpfVariant parse_variant(const std::string& s)
{
    for (auto v : {OpfVariant::Reference, OpfVariant::NonconvexDD, OpfVariant::ConvexDD, OpfVariant::GeneralizedDD})
        if (s == to_string(v)) return v;
    throw Error(ErrorKind::InvalidParameter, "unknown variant '" + s + "'");
}

/// How line powers are tied to the lifted angles: known line coefficients, or
/// Hankel blocks of measured data (per-edge or all-pairs).
struct PowerFlowModel {
    OpfVariant variant = OpfVariant::Reference;
    Grid grid;
    std::vector<EffectiveLineCoeffs> coeffs;
    std::optional<DataDrivenModel> data;

    bool data_driven() const { return variant != OpfVariant::Reference; }
    bool generalized() const { return variant == OpfVariant::GeneralizedDD; }
    Eigen::Index pair_count() const
    {
        const auto nb = static_cast<Eigen::Index>(grid.node_count());
        return generalized() ? nb * (nb - 1) / 2 : static_cast<Eigen::Index>(grid.edge_count());
    }
    Eigen::Index lifted_dim() const { return 2 * pair_count() + 1; }
    Eigen::Index line_dim() const { return 2 * static_cast<Eigen::Index>(grid.edge_count()); }
    Eigen::Index node_dim() const { return static_cast<Eigen::Index>(grid.node_count()); }
    Eigen::Index alpha_dim() const { return data ? data->columns() : 0; }
};

inline PowerFlowModel make_reference_model(const Grid& grid, std::vector<EffectiveLineCoeffs> coeffs = {})
{
    validate_radial(grid);
    if (coeffs.empty()) coeffs = effective_coeffs(grid);
    if (coeffs.size() != grid.edge_count())
        throw Error(ErrorKind::DimensionMismatch, "one set of line coefficients per edge is required");
    return {OpfVariant::Reference, grid, std::move(coeffs), std::nullopt};
}

/// Data-driven power-flow model. `variant` must be one of the DD tags; the
/// generalized variant requires an all-pairs model carrying the nodal block.
inline PowerFlowModel make_dd_model(const Grid& grid, const DataDrivenModel& model, OpfVariant variant)
{
    validate_radial(grid);
    if (variant == OpfVariant::Reference) throw Error(ErrorKind::InvalidParameter, "reference variant takes no data");
    if (!model.certificate.pe) throw Error(ErrorKind::ModelNotPE, "Hankel model is not persistently exciting");
    PowerFlowModel m{variant, grid, {}, model};
    if (model.lifted_dim() != m.lifted_dim())
        throw Error(ErrorKind::DimensionMismatch, "lifted block has " + std::to_string(model.lifted_dim()) +
                                                      " rows, expected " + std::to_string(m.lifted_dim()));
    if (model.pe.data.rows() != m.line_dim())
        throw Error(ErrorKind::DimensionMismatch, "line power block rows differ from 2*N_e");
    if (m.generalized() && (!model.pg || model.pg->data.rows() != m.node_dim()))
        throw Error(ErrorKind::DimensionMismatch, "generalized variant needs the nodal injection block");
    if (model.pe.data.cols() != model.columns() || (model.pg && model.pg->data.cols() != model.columns()))
        throw Error(ErrorKind::DimensionMismatch, "Hankel blocks have different column counts");
    return m;
}

/// Variable positions of one power-flow block inside a program.
struct PowerFlowBlock {
    Eigen::Index phi = -1, alpha = -1, pe = -1, pg = -1;
    Eigen::Index phi_dim = 0, alpha_dim = 0, pe_dim = 0, pg_dim = 0;

    Eigen::Index cos_index(Eigen::Index pair) const { return phi + 2 * pair + 1; }
};

/// Adds lifted angles (with unit disks per pair), line powers, nodal injections and,
/// for data-driven variants, Hankel weights, together with the coupling equalities.
/// Adds -beta * (sum of cosine entries) to the cost.
inline PowerFlowBlock add_power_flow_block(ProgramBuilder& b, const PowerFlowModel& m, double beta)
{
    PowerFlowBlock blk;
    blk.phi_dim = m.lifted_dim();
    blk.pe_dim = m.line_dim();
    blk.pg_dim = m.node_dim();
    blk.phi = b.add_variables(blk.phi_dim, -1.0, 1.0);
    b.set_bounds(blk.phi, 1.0, 1.0);
    for (Eigen::Index l = 0; l < m.pair_count(); ++l) {
        b.add_ball(blk.phi + 2 * l + 1, blk.phi + 2 * l + 2);
        b.add_cost(blk.cos_index(l), -beta);
    }
    blk.pe = b.add_variables(blk.pe_dim);
    blk.pg = b.add_variables(blk.pg_dim);

    if (!m.data_driven()) {
        for (Eigen::Index l = 0; l < blk.pe_dim / 2; ++l) {
            const auto& c = m.coeffs[static_cast<std::size_t>(l)];
            const Eigen::Index pc = blk.phi + 2 * l + 1, ps = pc + 1;
            b.add_equality({{blk.pe + 2 * l, 1.0}, {blk.phi, -c.g_from}, {pc, c.g_t}, {ps, c.b_t}}, 0.0);
            b.add_equality({{blk.pe + 2 * l + 1, 1.0}, {blk.phi, -c.g_to}, {pc, c.g_t}, {ps, -c.b_t}}, 0.0);
        }
    } else {
        const DataDrivenModel& d = *m.data;
        blk.alpha_dim = d.columns();
        blk.alpha = b.add_variables(blk.alpha_dim);
        auto hankel_rows = [&](const Eigen::MatrixXd& h, Eigen::Index target) {
            for (Eigen::Index r = 0; r < h.rows(); ++r) {
                ProgramBuilder::Terms row{{target + r, -1.0}};
                for (Eigen::Index c = 0; c < h.cols(); ++c) row.push_back({blk.alpha + c, h(r, c)});
                b.add_equality(row, 0.0);
            }
        };
        hankel_rows(d.phi.data, blk.phi);
        hankel_rows(d.pe.data, blk.pe);
        if (m.generalized()) hankel_rows(d.pg->data, blk.pg);
    }
    if (!m.generalized()) {
        const Eigen::MatrixXd inj = injection_matrix(m.grid);
        for (Eigen::Index i = 0; i < blk.pg_dim; ++i) {
            ProgramBuilder::Terms row{{blk.pg + i, -1.0}};
            for (Eigen::Index l = 0; l < blk.pe_dim; ++l)
                if (inj(i, l) != 0.0) row.push_back({blk.pe + l, inj(i, l)});
            b.add_equality(row, 0.0);
        }
    }
    return blk;
}

/// Values of one power-flow block.
struct PowerFlowPoint {
    Eigen::VectorXd phi, alpha, pe, pg;
};

inline PowerFlowPoint extract_point(const PowerFlowBlock& blk, const Eigen::VectorXd& x)
{
    PowerFlowPoint p;
    p.phi = x.segment(blk.phi, blk.phi_dim);
    p.pe = x.segment(blk.pe, blk.pe_dim);
    p.pg = x.segment(blk.pg, blk.pg_dim);
    if (blk.alpha >= 0) p.alpha = x.segment(blk.alpha, blk.alpha_dim);
    return p;
}

/// 1 - (cos^2 + sin^2) per trigonometric pair.
inline Eigen::VectorXd pair_residuals(const Eigen::VectorXd& phi)
{
    Eigen::VectorXd r((phi.size() - 1) / 2);
    for (Eigen::Index l = 0; l < r.size(); ++l) r(l) = 1.0 - (phi(2 * l + 1) * phi(2 * l + 1) + phi(2 * l + 2) * phi(2 * l + 2));
    return r;
}

/// Scales every pair onto the unit circle and re-derives the dependent quantities.
inline PowerFlowPoint project_point(const PowerFlowModel& m, const PowerFlowPoint& in, std::vector<std::string>* warnings)
{
    PowerFlowPoint out = in;
    for (Eigen::Index l = 0; l < (in.phi.size() - 1) / 2; ++l) {
        const double c = in.phi(2 * l + 1), s = in.phi(2 * l + 2);
        const double r = std::hypot(c, s);
        if (r <= 1e-12) {
            out.phi(2 * l + 1) = 1.0;
            out.phi(2 * l + 2) = 0.0;
            if (warnings) warnings->push_back("pair " + std::to_string(l) + " at origin mapped to (1,0)");
        } else {
            out.phi(2 * l + 1) = c / r;
            out.phi(2 * l + 2) = s / r;
        }
    }
    out.phi(0) = 1.0;
    if (!m.data_driven()) {
        out.pe = line_powers(m.coeffs, angles_from_lift(out.phi));
    } else {
        out.alpha = dd_alpha(*m.data, out.phi);
        out.pe = m.data->pe.data * out.alpha;
    }
    out.pg = m.generalized() ? Eigen::VectorXd(m.data->pg->data * out.alpha) : injections_from_flows(m.grid, out.pe);
    return out;
}

// ---------------------------------------------------------------------------
// Single-step OPF
// ---------------------------------------------------------------------------

enum class Channel { Phi, Pe, Pg };
enum class Sense { LessEqual, Equal };

/// Linear rows over (phi, p_e, p_g) of one operating point.
struct ApplicationConstraints {
    struct Term {
        Channel channel;
        Eigen::Index index;
        double coeff;
    };
    struct Row {
        std::vector<Term> terms;
        Sense sense = Sense::LessEqual;
        double rhs = 0.0;
    };
    std::vector<Row> rows;

    void add(std::vector<Term> terms, Sense sense, double rhs) { rows.push_back({std::move(terms), sense, rhs}); }
    void bound(Channel ch, Eigen::Index i, double lo, double hi)
    {
        if (lo == hi) {
            add({{ch, i, 1.0}}, Sense::Equal, lo);
            return;
        }
        if (std::isfinite(hi)) add({{ch, i, 1.0}}, Sense::LessEqual, hi);
        if (std::isfinite(lo)) add({{ch, i, -1.0}}, Sense::LessEqual, -lo);
    }

    /// Largest violation at a point; rows over phi are skipped when `phi` is empty.
    double violation(const Eigen::VectorXd& phi, const Eigen::VectorXd& pe, const Eigen::VectorXd& pg) const
    {
        double worst = 0.0;
        for (const auto& r : rows) {
            double v = -r.rhs;
            for (const auto& t : r.terms) {
                const Eigen::VectorXd& src = t.channel == Channel::Phi ? phi : t.channel == Channel::Pe ? pe : pg;
                if (t.index < 0 || t.index >= src.size()) throw Error(ErrorKind::DimensionMismatch, "constraint index");
                v += t.coeff * src(t.index);
            }
            worst = std::max(worst, r.sense == Sense::Equal ? std::abs(v) : v);
        }
        return worst;
    }
};

/// Linear cost on line powers and injections plus a weight on total losses (sum of injections).
struct OpfObjective {
    Eigen::VectorXd pe_cost;
    Eigen::VectorXd pg_cost;
    double loss_weight = 0.0;

    static OpfObjective losses() { return {Eigen::VectorXd(), Eigen::VectorXd(), 1.0}; }

    double evaluate(const Eigen::VectorXd& pe, const Eigen::VectorXd& pg) const
    {
        double f = loss_weight * pg.sum();
        if (pe_cost.size()) f += pe_cost.dot(pe);
        if (pg_cost.size()) f += pg_cost.dot(pg);
        return f;
    }
};

struct OpfProblem {
    PowerFlowModel model;
    ApplicationConstraints app;
    OpfObjective objective;
    double beta = 1.0;
    bool restore = false;  ///< nonconvex data-driven path: project onto the circles after the solve
    MixedBinaryProgram program;
    PowerFlowBlock block;
};

struct OpfSolution {
    Eigen::VectorXd pe, pg, theta, phi, alpha;
    double objective = 0.0;          ///< application objective, without the relaxation term
    double relaxed_objective = 0.0;  ///< objective including -beta * sum(cos)
    Eigen::VectorXd tightness;       ///< 1 - (cos^2 + sin^2) per pair
    double max_tightness_residual = 0.0;
    double app_violation = 0.0;
    bool restored = false;
    SolveStatus status = SolveStatus::Optimal;
    double solve_time = 0.0;
    std::vector<std::string> warnings;
};

namespace detail {

inline OpfProblem assemble_opf(PowerFlowModel model, const ApplicationConstraints& app, const OpfObjective& objective,
                               double beta, bool restore)
{
    if (!(beta >= 0.0)) throw Error(ErrorKind::InvalidParameter, "beta must be nonnegative");
    OpfProblem p{std::move(model), app, objective, beta, restore, {}, {}};
    ProgramBuilder b;
    p.block = add_power_flow_block(b, p.model, beta);
    const auto& blk = p.block;
    if (objective.pe_cost.size() && objective.pe_cost.size() != blk.pe_dim)
        throw Error(ErrorKind::DimensionMismatch, "line power cost length");
    if (objective.pg_cost.size() && objective.pg_cost.size() != blk.pg_dim)
        throw Error(ErrorKind::DimensionMismatch, "injection cost length");
    for (Eigen::Index i = 0; i < blk.pe_dim; ++i)
        if (objective.pe_cost.size()) b.add_cost(blk.pe + i, objective.pe_cost(i));
    for (Eigen::Index i = 0; i < blk.pg_dim; ++i)
        b.add_cost(blk.pg + i, objective.loss_weight + (objective.pg_cost.size() ? objective.pg_cost(i) : 0.0));
    for (const auto& row : app.rows) {
        ProgramBuilder::Terms terms;
        for (const auto& t : row.terms) {
            const Eigen::Index base = t.channel == Channel::Phi ? blk.phi : t.channel == Channel::Pe ? blk.pe : blk.pg;
            const Eigen::Index dim = t.channel == Channel::Phi ? blk.phi_dim : t.channel == Channel::Pe ? blk.pe_dim : blk.pg_dim;
            if (t.index < 0 || t.index >= dim)
                throw Error(ErrorKind::DimensionMismatch, "application constraint index " + std::to_string(t.index) +
                                                              " outside its channel of size " + std::to_string(dim));
            terms.push_back({base + t.index, t.coeff});
        }
        if (row.sense == Sense::Equal)
            b.add_equality(terms, row.rhs);
        else
            b.add_inequality(terms, row.rhs);
    }
    p.program = b.build();
    return p;
}

inline void fill_solution(const OpfProblem& p, const PowerFlowPoint& pt, OpfSolution& s)
{
    s.phi = pt.phi;
    s.alpha = pt.alpha;
    s.pe = pt.pe;
    s.pg = pt.pg;
    s.theta = angles_from_lift(pt.phi);
    s.objective = p.objective.evaluate(pt.pe, pt.pg);
    double cos_sum = 0.0;
    for (Eigen::Index l = 0; l < (pt.phi.size() - 1) / 2; ++l) cos_sum += pt.phi(2 * l + 1);
    s.relaxed_objective = s.objective - p.beta * cos_sum;
    s.tightness = pair_residuals(pt.phi);
    s.max_tightness_residual = s.tightness.size() ? s.tightness.cwiseAbs().maxCoeff() : 0.0;
    s.app_violation = p.app.violation(pt.phi, pt.pe, pt.pg);
}

}  // namespace detail

/// Known-physics OPF: the line map is linear in the lifted angles, circles relaxed to disks.
inline OpfProblem build_reference_opf(const Grid& grid, const std::vector<EffectiveLineCoeffs>& coeffs,
                                      const ApplicationConstraints& app, const OpfObjective& objective,
                                      double beta = 1.0)
{
    return detail::assemble_opf(make_reference_model(grid, coeffs), app, objective, beta, false);
}

/// Per-edge data-driven OPF. relaxed=false solves the same program and then restores tightness.
inline OpfProblem build_dd_opf(const Grid& grid, const DataDrivenModel& model, const ApplicationConstraints& app,
                               const OpfObjective& objective, bool relaxed, double beta = 1.0)
{
    if (model.mode != LiftMode::PerEdge) throw Error(ErrorKind::DimensionMismatch, "per-edge model required");
    return detail::assemble_opf(make_dd_model(grid, model, relaxed ? OpfVariant::ConvexDD : OpfVariant::NonconvexDD),
                                app, objective, beta, !relaxed);
}

/// Topology-agnostic OPF over all node pairs; injections come from their own Hankel block.
inline OpfProblem build_generalized_dd_opf(const Grid& grid, const DataDrivenModel& model,
                                           const ApplicationConstraints& app, const OpfObjective& objective,
                                           double beta = 1.0)
{
    if (model.mode != LiftMode::AllPairs) throw Error(ErrorKind::DimensionMismatch, "all-pairs model required");
    return detail::assemble_opf(make_dd_model(grid, model, OpfVariant::GeneralizedDD), app, objective, beta, true);
}

inline OpfSolution restore_tightness(const OpfSolution& sol, const OpfProblem& p, double tol = 1e-6)
{
    PowerFlowPoint pt{sol.phi, sol.alpha, sol.pe, sol.pg};
    OpfSolution out = sol;
    const PowerFlowPoint proj = project_point(p.model, pt, &out.warnings);
    detail::fill_solution(p, proj, out);
    out.restored = true;
    if (out.app_violation > tol)
        throw Error(ErrorKind::ProjectionInfeasible,
                    "projected point violates application constraints by " + std::to_string(out.app_violation));
    return out;
}

struct TightnessReport {
    Eigen::VectorXd residuals;
    double max_residual = 0.0;
    bool pass = true;
};

inline TightnessReport check_tightness(const Eigen::VectorXd& phi, double tol)
{
    TightnessReport r;
    r.residuals = pair_residuals(phi);
    r.max_residual = r.residuals.size() ? r.residuals.cwiseAbs().maxCoeff() : 0.0;
    r.pass = r.max_residual <= tol;
    return r;
}

inline TightnessReport check_tightness(const OpfSolution& sol, double tol) { return check_tightness(sol.phi, tol); }

/// Solver settings for power-flow programs. The loss curvature is small (about g/b^2),
/// so flows are only accurate to roughly sqrt(tol / curvature); 1e-9 keeps them near 1e-5.
inline SolverOptions opf_solver_options()
{
    SolverOptions o;
    o.tol = 1e-9;
    return o;
}

/// Solves the program; the nonconvex and generalized data-driven variants are projected onto the circles afterwards.
inline OpfSolution solve_opf(const OpfProblem& p, const SolverOptions& opt = opf_solver_options())
{
    MixedBinaryOptions mo;
    mo.convex = opt;
    const MixedBinarySolution r = solve_mixed_binary(p.program, BinaryStrategy::Auto, mo);
    OpfSolution s;
    s.status = r.solution.status;
    s.solve_time = r.solution.solve_time;
    if (s.status == SolveStatus::Infeasible) throw Error(ErrorKind::Infeasible, "OPF program is infeasible");
    if (s.status == SolveStatus::Unbounded) throw Error(ErrorKind::NumericalBreakdown, "OPF program is unbounded");
    detail::fill_solution(p, extract_point(p.block, r.solution.x), s);
    if (p.restore) {
        OpfSolution restored = restore_tightness(s, p);
        restored.solve_time = s.solve_time;
        return restored;
    }
    return s;
}

}  // namespace ddpf
