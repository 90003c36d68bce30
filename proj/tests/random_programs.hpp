#pragma once

#include <random>

#include "ddpf/mixed_binary.hpp"

namespace ddpf::fixtures {

/// Random mixed-binary program: disk-constrained continuous pairs switched on
/// and off by binaries, with a knapsack-like row so that the optimum is not trivial.
inline MixedBinaryProgram random_mixed_binary(std::mt19937_64& rng, int binaries)
{
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    ProgramBuilder b;
    const int pairs = 2;
    const Eigen::Index x0 = b.add_variables(2 * pairs);
    for (int k = 0; k < pairs; ++k) b.add_ball(x0 + 2 * k, x0 + 2 * k + 1);
    for (Eigen::Index j = 0; j < 2 * pairs; ++j) b.add_cost(x0 + j, ud(rng));
    std::vector<Eigen::Index> d;
    for (int i = 0; i < binaries; ++i) {
        d.push_back(b.add_binary());
        b.add_cost(d.back(), ud(rng));
    }
    // each continuous variable is capped by a weighted sum of binaries
    for (Eigen::Index j = 0; j < 2 * pairs; ++j) {
        ProgramBuilder::Terms row{{x0 + j, 1.0}};
        for (int i = 0; i < binaries; ++i) row.push_back({d[static_cast<std::size_t>(i)], -0.5 * std::abs(ud(rng))});
        b.add_inequality(row, 0.1);
    }
    ProgramBuilder::Terms knap;
    for (int i = 0; i < binaries; ++i) knap.push_back({d[static_cast<std::size_t>(i)], 1.0});
    b.add_inequality(knap, 0.5 * binaries + 0.5);
    return b.build();
}

}  // namespace ddpf::fixtures
