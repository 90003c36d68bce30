#pragma once

#include <random>

#include "ddpf/excitation.hpp"
#include "ddpf/opf.hpp"

namespace ddpf::fixtures {

/// Per-edge and all-pairs Hankel models of the case grid from noiseless excitation.
struct CaseModels {
    Grid grid = case_study_grid();
    DataDrivenModel per_edge;
    DataDrivenModel all_pairs;
};

inline CaseModels case_models(Eigen::Index per_edge_samples = 9, Eigen::Index all_pairs_samples = 21,
                              std::uint64_t seed = 1)
{
    CaseModels m;
    ExcitationOptions opt;
    opt.seed = seed;
    opt.samples = per_edge_samples;
    m.per_edge = make_model(generate_excitation(m.grid, opt).trajectory);
    opt.mode = LiftMode::AllPairs;
    opt.samples = all_pairs_samples;
    m.all_pairs = make_model(generate_excitation(m.grid, opt).trajectory);
    return m;
}

struct OpfInstance {
    ApplicationConstraints app;
    OpfObjective objective;
};

/// Node 1 is the slack, node 2 a bounded dispatchable source, nodes 3-5 fixed injections.
/// Cost: losses plus a random nonnegative price on the two sources.
inline OpfInstance random_opf_instance(std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u(0.0, 1.0);
    OpfInstance inst;
    inst.app.bound(Channel::Pg, 1, -0.1, 0.2 + 0.6 * u(rng));
    const double p3 = -(0.1 + 0.4 * u(rng));
    const double p4 = 0.3 * u(rng) - 0.2;
    const double p5 = -(0.2 + 0.5 * u(rng));
    inst.app.bound(Channel::Pg, 2, p3, p3);
    inst.app.bound(Channel::Pg, 3, p4, p4);
    inst.app.bound(Channel::Pg, 4, p5, p5);
    inst.objective.loss_weight = 1.0;
    inst.objective.pg_cost = Eigen::VectorXd::Zero(5);
    inst.objective.pg_cost(0) = u(rng);
    inst.objective.pg_cost(1) = u(rng);
    return inst;
}

}  // namespace ddpf::fixtures
