#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "ddpf/mixed_binary.hpp"

using namespace ddpf;

namespace {

ConicProgram disk_program(double c0, double c1)
{
    ProgramBuilder b;
    b.add_variables(2);
    b.add_cost(0, c0);
    b.add_cost(1, c1);
    b.add_ball(0, 1);
    return b.build().base;
}

// Brute-force 2-variable LP oracle: best feasible vertex among all pairwise row intersections.
double vertex_oracle(const Eigen::MatrixXd& a, const Eigen::VectorXd& rhs, const Eigen::Vector2d& c)
{
    double best = kInf;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = i + 1; j < a.rows(); ++j) {
            Eigen::Matrix2d m;
            m << a.row(i), a.row(j);
            if (std::abs(m.determinant()) < 1e-12) continue;
            const Eigen::Vector2d v = m.partialPivLu().solve(Eigen::Vector2d(rhs(i), rhs(j)));
            if (((a * v - rhs).array() <= 1e-9).all()) best = std::min(best, c.dot(v));
        }
    return best;
}

}  // namespace

TEST(Conic, BallExtremePoint)
{
    const Solution s = solve_convex(disk_program(1.0, 0.0));
    ASSERT_EQ(s.status, SolveStatus::Optimal);
    EXPECT_NEAR(s.x(0), -1.0, 1e-7);
    EXPECT_NEAR(s.objective, -1.0, 1e-8);
}

TEST(Conic, DiskOptimumMatchesAnalyticMaximizer)
{
    const Solution s = solve_convex(disk_program(-1.0, -1.0));
    ASSERT_EQ(s.status, SolveStatus::Optimal);
    EXPECT_NEAR(s.objective, -std::sqrt(2.0), 1e-8);
    EXPECT_NEAR(s.x(0), std::sqrt(0.5), 1e-6);
    EXPECT_NEAR(s.x(1), std::sqrt(0.5), 1e-6);
}

TEST(Conic, RandomLinearCostOverDiskEqualsMinusNorm)
{
    std::mt19937_64 rng(7);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 50; ++trial) {
        const double c0 = nd(rng), c1 = nd(rng);
        const Solution s = solve_convex(disk_program(c0, c1));
        ASSERT_EQ(s.status, SolveStatus::Optimal);
        EXPECT_NEAR(s.objective, -std::hypot(c0, c1), 1e-8 * (1 + std::hypot(c0, c1)));
    }
}

TEST(Conic, ContradictoryEqualitiesAreInfeasible)
{
    ProgramBuilder b;
    b.add_variables(1);
    b.add_equality({{0, 1.0}}, 1.0);
    b.add_equality({{0, 1.0}}, 2.0);
    EXPECT_EQ(solve_convex(b.build().base).status, SolveStatus::Infeasible);
}

TEST(Conic, InequalitiesOutsideDiskAreInfeasible)
{
    ProgramBuilder b;
    b.add_variables(2);
    b.add_ball(0, 1);
    b.add_inequality({{0, -1.0}, {1, -1.0}}, -1.5);  // x0 + x1 >= 1.5 > sqrt(2)
    EXPECT_EQ(solve_convex(b.build().base).status, SolveStatus::Infeasible);
}

TEST(Conic, FreeDirectionIsUnbounded)
{
    ProgramBuilder b;
    b.add_variables(2);
    b.add_cost(0, -1.0);
    b.add_inequality({{1, 1.0}}, 1.0);
    EXPECT_EQ(solve_convex(b.build().base).status, SolveStatus::Unbounded);
}

TEST(Conic, RandomTwoVariableLpMatchesVertexEnumeration)
{
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    int solved = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int rows = 6;
        Eigen::MatrixXd a(rows + 4, 2);
        Eigen::VectorXd rhs(rows + 4);
        for (int i = 0; i < rows; ++i) {
            a.row(i) << ud(rng), ud(rng);
            rhs(i) = 0.2 + std::abs(ud(rng));  // origin strictly feasible
        }
        a.bottomRows(4) << 1, 0, -1, 0, 0, 1, 0, -1;
        rhs.tail(4).setConstant(3.0);
        const Eigen::Vector2d c(ud(rng), ud(rng));

        ProgramBuilder b;
        b.add_variables(2, -3.0, 3.0);
        b.add_cost(0, c(0));
        b.add_cost(1, c(1));
        for (int i = 0; i < rows; ++i) b.add_inequality({{0, a(i, 0)}, {1, a(i, 1)}}, rhs(i));
        const Solution s = solve_convex(b.build().base);
        ASSERT_EQ(s.status, SolveStatus::Optimal);
        EXPECT_NEAR(s.objective, vertex_oracle(a, rhs, c), 1e-7);
        EXPECT_LE(max_violation(b.build().base, s.x), 1e-8);
        ++solved;
    }
    EXPECT_EQ(solved, 100);
}

TEST(Conic, OptimalStatusImpliesSmallResiduals)
{
    const Solution s = solve_convex(disk_program(0.3, -2.0));
    ASSERT_EQ(s.status, SolveStatus::Optimal);
    EXPECT_LE(s.kkt.primal, 1e-8);
    EXPECT_LE(s.kkt.dual, 1e-8);
    EXPECT_LE(s.kkt.gap, 1e-7);
    EXPECT_GE(s.solve_time, 0.0);
}

TEST(Conic, FixedBallVariableStaysCoupled)
{
    ProgramBuilder b;
    b.add_variables(2);
    b.set_bounds(0, 0.5, 0.5);
    b.add_cost(1, 1.0);
    b.add_ball(0, 1);
    const Solution s = solve_convex(b.build().base);
    ASSERT_EQ(s.status, SolveStatus::Optimal);
    EXPECT_NEAR(s.x(1), -std::sqrt(0.75), 1e-7);
}

TEST(Conic, FixedVariablesAreSubstituted)
{
    ProgramBuilder b;
    b.add_variables(3);
    b.set_bounds(2, 2.0, 2.0);
    b.add_cost(0, 1.0);
    b.add_cost(2, 1.0);
    b.add_equality({{0, 1.0}, {1, -1.0}, {2, 1.0}}, 0.0);
    b.set_bounds(1, -1.0, 1.0);
    const Solution s = solve_convex(b.build().base);
    ASSERT_EQ(s.status, SolveStatus::Optimal);
    EXPECT_NEAR(s.x(0), -3.0, 1e-7);
    EXPECT_NEAR(s.objective, -1.0, 1e-7);
}

TEST(Conic, BadlyScaledRowsStillSolve)
{
    ProgramBuilder b;
    b.add_variables(3);
    b.add_cost(0, -1.0);
    b.add_cost(2, 1e3);
    b.add_ball(0, 1);
    b.add_inequality({{0, 1e4}, {2, -1e4}}, 0.5e4);  // x0 - x2 <= 0.5
    b.set_bounds(2, 0.0, 10.0);
    const Solution s = solve_convex(b.build().base);
    ASSERT_EQ(s.status, SolveStatus::Optimal);
    EXPECT_NEAR(s.x(0), 0.5, 1e-7);
}

TEST(Conic, SingletonRowsPinAVariable)
{
    // x2 <= 0 and -x2 <= 0 leave no interior for x2
    ProgramBuilder b;
    b.add_variables(3);
    b.add_ball(0, 1);
    b.add_cost(1, -1.0);
    b.add_inequality({{2, 1.0}}, 0.0);
    b.add_inequality({{2, -1.0}}, 0.0);
    b.add_equality({{0, 1.0}, {2, 1.0}}, 0.6);
    const ConicProgram p = b.build().base;
    const Solution s = solve_convex(p);
    ASSERT_EQ(s.status, SolveStatus::Optimal);
    EXPECT_EQ(s.x(2), 0.0);
    EXPECT_NEAR(s.x(1), 0.8, 1e-7);
    EXPECT_LE(max_violation(p, s.x), 1e-10);
}

TEST(Conic, LargePenaltyDoesNotBuyInfeasibility)
{
    ProgramBuilder b;
    b.add_variables(2);
    const Eigen::Index slack = b.add_variables(1, 0.0, kInf);
    b.add_ball(0, 1);
    b.add_cost(0, -1.0);
    b.add_cost(1, -1.0);
    b.add_cost(slack, 1e3);
    b.add_inequality({{0, 1.0}, {slack, -1.0}}, 0.6);
    const ConicProgram p = b.build().base;
    const Solution s = solve_convex(p);
    ASSERT_EQ(s.status, SolveStatus::Optimal);
    EXPECT_NEAR(s.objective, -1.4, 1e-6);
    EXPECT_LE(max_violation(p, s.x), 1e-9);
}

TEST(Conic, ValidateRejectsOverlappingBalls)
{
    ConicProgram p = ConicProgram::with_variables(3);
    p.balls = {{0, 1}, {1, 2}};
    EXPECT_THROW(p.validate(), Error);
}

TEST(Conic, ProgramDumpListsEveryRow)
{
    ProgramBuilder b;
    b.add_variables(2, -1.0, 1.0);
    b.add_equality({{0, 1.0}}, 0.25);
    b.add_inequality({{0, 1.0}, {1, -2.0}}, 1.0);
    b.add_ball(0, 1);
    std::ostringstream os;
    write_program(os, b.build().base);
    const std::string text = os.str();
    EXPECT_NE(text.find("variables 2"), std::string::npos);
    EXPECT_NE(text.find("+ 1 x0 = 0.25"), std::string::npos);
    EXPECT_NE(text.find("- 2 x1 <= 1"), std::string::npos);
    EXPECT_NE(text.find("x0^2 + x1^2 <= 1"), std::string::npos);
}
