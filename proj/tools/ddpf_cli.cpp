// ddpf: data generation, OPF solves, closed-loop MPC runs and run comparison.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "ddpf/microgrid.hpp"

using namespace ddpf;

namespace {

constexpr const char* kExitCodes =
    "Exit codes:\n"
    "  0  success\n"
    "  1  other failure (bad flags, excitation failed, ...)\n"
    "  2  infeasible problem or profile\n"
    "  3  numerical breakdown\n"
    "  4  schema or I/O error\n"
    "  5  dimension mismatch (data incompatible with grid or variant)\n";

int exit_code(ErrorKind k)
{
    switch (k) {
    case ErrorKind::Infeasible:
    case ErrorKind::InfeasibleProfile:
    case ErrorKind::ProjectionInfeasible:
    case ErrorKind::StateBoundViolation: return 2;
    case ErrorKind::NumericalBreakdown:
    case ErrorKind::NoConvergence: return 3;
    case ErrorKind::IoError:
    case ErrorKind::SchemaError: return 4;
    case ErrorKind::DimensionMismatch:
    case ErrorKind::ModelNotPE:
    case ErrorKind::ForecastTooShort: return 5;
    default: return 1;
    }
}

Grid grid_or_default(const std::string& path) { return path.empty() ? case_study_grid() : load_grid(path); }

LiftMode parse_mode(const std::string& s)
{
    if (s == "per-edge") return LiftMode::PerEdge;
    if (s == "all-pairs") return LiftMode::AllPairs;
    throw Error(ErrorKind::InvalidParameter, "unknown mode '" + s + "'");
}

void print_certificate(const PeReport& c)
{
    std::cout << "PE: rank " << c.rank << "/" << c.required_rank << "\n"
              << "threshold: " << detail::format_double(c.threshold) << "\n"
              << "smallest kept singular value: " << detail::format_double(c.smallest_kept_singular_value) << "\n";
}

/// Power-flow model for a variant; DD variants read the trajectory at `data_path` or,
/// when it is empty, synthesize the minimal persistently exciting data set.
PowerFlowModel power_flow_model(const Grid& grid, OpfVariant v, const std::string& data_path, std::uint64_t data_seed)
{
    if (v == OpfVariant::Reference) return make_reference_model(grid);
    Trajectory traj;
    if (!data_path.empty()) {
        traj = import_trajectory(data_path);
        check_trajectory_layout(grid, traj);
    } else {
        ExcitationOptions opt;
        opt.seed = data_seed;
        opt.mode = v == OpfVariant::GeneralizedDD ? LiftMode::AllPairs : LiftMode::PerEdge;
        opt.samples = opt.mode == LiftMode::AllPairs
                          ? 1 + 2 * static_cast<Eigen::Index>(all_node_pairs(grid).size())
                          : 1 + 2 * static_cast<Eigen::Index>(grid.edge_count());
        traj = generate_excitation(grid, opt).trajectory;
    }
    const DataDrivenModel model = make_model(traj);
    print_certificate(model.certificate);
    return make_dd_model(grid, model, v);
}

/// "node:value,node:value" fixes the injection of each listed node.
std::map<NodeId, double> parse_injections(const std::string& s)
{
    std::map<NodeId, double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw Error(ErrorKind::InvalidParameter, "injection '" + item + "' needs node:value");
        out[std::stoi(item.substr(0, colon))] = detail::parse_double(item.substr(colon + 1), "injection");
    }
    return out;
}

Profiles load_profiles(const std::string& source, Eigen::Index K, const MicrogridConfig& cfg)
{
    if (source.rfind("seed:", 0) == 0) {
        ProfileShape shape;
        shape.Ts = cfg.Ts;
        return generate_profiles(std::stoull(source.substr(5)), K, shape, cfg.fleet_capacity());
    }
    return read_profiles(source);
}

void write_solution(const OpfSolution& s, const Grid& grid, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + path);
    out << "name,value\n";
    auto row = [&](const std::string& n, double v) { out << n << "," << detail::format_double(v) << "\n"; };
    for (std::size_t l = 0; l < grid.edge_count(); ++l) {
        const auto& e = grid.edges()[l];
        row("pe_" + std::to_string(e.first) + "_" + std::to_string(e.second), s.pe(2 * static_cast<Eigen::Index>(l)));
        row("pe_" + std::to_string(e.second) + "_" + std::to_string(e.first), s.pe(2 * static_cast<Eigen::Index>(l) + 1));
    }
    for (std::size_t n = 0; n < grid.node_count(); ++n)
        row("pg_" + std::to_string(grid.nodes()[n]), s.pg(static_cast<Eigen::Index>(n)));
    for (std::size_t l = 0; l < grid.edge_count(); ++l) {
        const auto& e = grid.edges()[l];
        row("theta_" + std::to_string(e.first) + "_" + std::to_string(e.second), s.theta(static_cast<Eigen::Index>(l)));
    }
    for (Eigen::Index i = 0; i < s.phi.size(); ++i) row("phi_" + std::to_string(i), s.phi(i));
    for (Eigen::Index i = 0; i < s.alpha.size(); ++i) row("alpha_" + std::to_string(i), s.alpha(i));
    row("objective", s.objective);
    row("max_tightness_residual", s.max_tightness_residual);
    row("restored", s.restored ? 1.0 : 0.0);
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Data-driven power flow and microgrid MPC"};
    app.footer(kExitCodes);
    app.require_subcommand(1);

    // generate-data
    std::string grid_path, out_path, mode = "per-edge";
    Eigen::Index samples = 9;
    double range = 0.3;
    std::uint64_t seed = 0;
    auto* gen = app.add_subcommand("generate-data", "synthesize a persistently exciting trajectory");
    gen->add_option("--grid", grid_path, "grid JSON (default: the 5-node case grid)");
    gen->add_option("--samples", samples, "number of samples N")->capture_default_str();
    gen->add_option("--range", range, "angle excitation range in rad")->capture_default_str();
    gen->add_option("--seed", seed)->capture_default_str();
    gen->add_option("--mode", mode, "per-edge | all-pairs")->capture_default_str();
    gen->add_option("--out", out_path, "trajectory CSV")->required();

    // solve-opf
    std::string data_path, variant_name = "reference", objective = "losses", injections;
    double beta = 1.0;
    std::uint64_t data_seed = 0;
    auto* opf = app.add_subcommand("solve-opf", "solve one OPF instance");
    opf->add_option("--grid", grid_path, "grid JSON (default: the 5-node case grid)");
    opf->add_option("--data", data_path, "trajectory CSV for DD variants (default: synthesized)");
    opf->add_option("--data-seed", data_seed, "seed for synthesized data")->capture_default_str();
    opf->add_option("--variant", variant_name, "reference | dd | dd-convex | dd-generalized")->capture_default_str();
    opf->add_option("--objective", objective, "losses")->capture_default_str();
    opf->add_option("--injections", injections, "fixed injections, e.g. 2:0.1,3:-0.3 (others free)");
    opf->add_option("--beta", beta)->capture_default_str();
    opf->add_option("--out", out_path, "solution CSV")->required();

    // run-mpc
    std::string config_path, profiles = "seed:0", out_dir;
    int steps = 336;
    auto* mpc = app.add_subcommand("run-mpc", "closed-loop microgrid MPC");
    mpc->add_option("--config", config_path, "microgrid config JSON")->required();
    mpc->add_option("--grid", grid_path, "grid JSON (default: the 5-node case grid)");
    mpc->add_option("--data", data_path, "trajectory CSV for DD variants (default: synthesized)");
    mpc->add_option("--data-seed", data_seed, "seed for synthesized data")->capture_default_str();
    mpc->add_option("--profiles", profiles, "profile CSV or seed:<int>")->capture_default_str();
    mpc->add_option("--variant", variant_name, "reference | dd | dd-convex | dd-generalized")->capture_default_str();
    mpc->add_option("--steps", steps, "closed-loop steps K")->capture_default_str();
    mpc->add_option("--out-dir", out_dir, "directory for results.csv, solve_times.csv, kpis.csv")->required();

    // compare
    std::vector<std::string> runs;
    double tol = 1e-4;
    auto* cmp = app.add_subcommand("compare", "compare result directories column by column");
    cmp->add_option("--runs", runs, "two or more run directories")->required()->expected(2, -1);
    cmp->add_option("--tol", tol)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*gen) {
            const Grid grid = grid_or_default(grid_path);
            ExcitationOptions opt;
            opt.samples = samples;
            opt.angle_range = range;
            opt.seed = seed;
            opt.mode = parse_mode(mode);
            const auto ex = generate_excitation(grid, opt);
            export_trajectory(ex.trajectory, out_path);
            print_certificate(ex.certificate);
            std::cout << "wrote " << ex.trajectory.samples() << " samples to " << out_path << "\n";
        } else if (*opf) {
            if (objective != "losses") throw Error(ErrorKind::InvalidParameter, "unknown objective '" + objective + "'");
            const Grid grid = grid_or_default(grid_path);
            const OpfVariant v = parse_variant(variant_name);
            const PowerFlowModel model = power_flow_model(grid, v, data_path, data_seed);
            ApplicationConstraints constraints;
            for (const auto& [node, p] : parse_injections(injections))
                constraints.bound(Channel::Pg, static_cast<Eigen::Index>(grid.index_of(node)), p, p);
            const OpfObjective obj = OpfObjective::losses();
            OpfProblem problem =
                v == OpfVariant::Reference        ? build_reference_opf(grid, model.coeffs, constraints, obj, beta)
                : v == OpfVariant::GeneralizedDD ? build_generalized_dd_opf(grid, *model.data, constraints, obj, beta)
                                                  : build_dd_opf(grid, *model.data, constraints, obj,
                                                                 v == OpfVariant::ConvexDD, beta);
            const OpfSolution s = solve_opf(problem);
            for (const auto& w : s.warnings) std::cerr << "warning: " << w << "\n";
            write_solution(s, grid, out_path);
            std::cout << "status: " << to_string(s.status) << "\n"
                      << "objective: " << detail::format_double(s.objective) << "\n"
                      << "max tightness residual: " << detail::format_double(s.max_tightness_residual) << "\n";
        } else if (*mpc) {
            const Grid grid = grid_or_default(grid_path);
            const MicrogridConfig cfg = load_config(config_path);
            cfg.validate(grid);
            const OpfVariant v = parse_variant(variant_name);
            const Profiles prof = load_profiles(profiles, steps + cfg.horizon, cfg);
            const PowerFlowModel model = power_flow_model(grid, v, data_path, data_seed);
            const ClosedLoopResult res = run_closed_loop(cfg, model, prof, steps);
            std::filesystem::create_directories(out_dir);
            write_closed_loop(res, grid, out_dir);
            std::cout << "variant: " << to_string(v) << "\n"
                      << "steps: " << res.records.size() << "\n"
                      << "mean operating cost: " << detail::format_double(res.kpis.mean_operating_cost) << "\n"
                      << "mean loss cost: " << detail::format_double(res.kpis.mean_loss_cost) << "\n";
        } else if (*cmp) {
            const ResultsTable base = read_results(runs.front() + "/results.csv");
            bool pass = true;
            for (std::size_t r = 1; r < runs.size(); ++r) {
                const ResultsTable other = read_results(runs[r] + "/results.csv");
                std::cout << runs.front() << " vs " << runs[r] << "\n";
                for (const auto& [name, d] : compare_results(base, other)) {
                    const bool ok = d <= tol;
                    pass = pass && ok;
                    std::printf("  %-16s %.3e %s\n", name.c_str(), d, ok ? "PASS" : "FAIL");
                }
            }
            std::cout << (pass ? "PASS" : "FAIL") << " at tol " << tol << "\n";
            return pass ? 0 : 1;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
