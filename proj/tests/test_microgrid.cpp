#include <cstdio>
#include <filesystem>

#include <gtest/gtest.h>

#include "ddpf/microgrid.hpp"
#include "opf_instances.hpp"

using namespace ddpf;

namespace {

const fixtures::CaseModels& models()
{
    static const fixtures::CaseModels m = fixtures::case_models();
    return m;
}

PowerFlowModel reference() { return make_reference_model(models().grid); }

Profiles flat_profiles(Eigen::Index K, double res1, double res2, double demand)
{
    Profiles p;
    p.w_r.resize(K, 2);
    p.w_r.col(0).setConstant(res1);
    p.w_r.col(1).setConstant(res2);
    p.w_d = Eigen::VectorXd::Constant(K, demand);
    return p;
}

std::string temp_dir(const std::string& name)
{
    const auto d = std::filesystem::temp_directory_path() / ("ddpf_mg_" + name);
    std::filesystem::create_directories(d);
    return d.string();
}

}  // namespace

TEST(MicrogridConfig, DefaultsValidate) { EXPECT_NO_THROW(MicrogridConfig{}.validate(models().grid)); }

TEST(MicrogridConfig, JsonRoundTrip)
{
    MicrogridConfig c;
    c.beta = 0.25;
    c.x0 = {1.5, 2.0};
    const auto back = config_from_json(config_to_json(c));
    EXPECT_EQ(back.beta, 0.25);
    EXPECT_EQ(back.x0, c.x0);
    EXPECT_EQ(back.c3, c.c3);
    EXPECT_EQ(back.unit_nodes, c.unit_nodes);
    EXPECT_EQ(back.horizon, 6);
}

TEST(MicrogridConfig, MissingKeyIsNamed)
{
    auto j = config_to_json(MicrogridConfig{});
    j.erase("beta");
    try {
        config_from_json(j);
        FAIL() << "expected SchemaError";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::SchemaError);
        EXPECT_NE(std::string(e.what()).find("'beta'"), std::string::npos);
    }
}

TEST(MicrogridConfig, RejectsInconsistentLimits)
{
    MicrogridConfig c;
    c.pt_min(0) = 1.0;  // above pt_max
    EXPECT_THROW(c.validate(models().grid), Error);
    MicrogridConfig d;
    d.x_soft_min(1) = 5.0;  // above x_soft_max
    EXPECT_THROW(d.validate(models().grid), Error);
    MicrogridConfig e;
    e.pe_max = Eigen::VectorXd::Ones(3);
    try {
        e.validate(models().grid);
        FAIL();
    } catch (const Error& err) {
        EXPECT_EQ(err.kind(), ErrorKind::DimensionMismatch);
    }
}

TEST(MicrogridConfig, UnitMatrixMapsEachUnitOnce)
{
    const auto U = unit_matrix(MicrogridConfig{}, models().grid);
    ASSERT_EQ(U.rows(), 5);
    ASSERT_EQ(U.cols(), 7);
    EXPECT_TRUE((U.colwise().sum().array() == 1.0).all());
    // node 2 hosts storage 1 and the first renewable source
    EXPECT_EQ(U(1, 2), 1.0);
    EXPECT_EQ(U(1, 4), 1.0);
    EXPECT_EQ(U(4, 6), 1.0);
    EXPECT_EQ(U.row(1).sum(), 2.0);
}

TEST(Profiles, DeterministicPerSeed)
{
    const auto a = generate_profiles(11, 96);
    const auto b = generate_profiles(11, 96);
    const auto c = generate_profiles(12, 96);
    EXPECT_EQ(a.w_d, b.w_d);
    EXPECT_EQ(a.w_r, b.w_r);
    EXPECT_NE(a.w_d, c.w_d);
}

TEST(Profiles, PhotovoltaicIsZeroAtNight)
{
    const auto p = generate_profiles(3, 96);
    for (Eigen::Index k = 0; k < p.size(); ++k) {
        const double hour = std::fmod(0.5 * static_cast<double>(k), 24.0);
        if (hour <= 6.0 || hour >= 18.0) {
            EXPECT_EQ(p.w_r(k, 1), 0.0) << "k=" << k;
        }
    }
    EXPECT_GT(p.w_r.col(1).maxCoeff(), 0.0);
    EXPECT_GE(p.w_r.minCoeff(), 0.0);
    EXPECT_GE(p.w_d.minCoeff(), 0.0);
}

TEST(Profiles, PeakAboveFleetCapacityIsRejected)
{
    ProfileShape s;
    s.demand_mean = 4.5;
    s.demand_amplitude = 0.5;
    try {
        generate_profiles(1, 48, s);
        FAIL() << "expected InfeasibleProfile";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::InfeasibleProfile);
    }
}

TEST(Profiles, CsvRoundTripIsExact)
{
    const auto p = generate_profiles(5, 20);
    const auto path = temp_dir("profiles") + "/profiles.csv";
    write_profiles(p, path);
    const auto q = read_profiles(path);
    EXPECT_EQ(p.w_d, q.w_d);
    EXPECT_EQ(p.w_r, q.w_r);
}

TEST(Profiles, WindowRepeatsLastRow)
{
    const auto p = generate_profiles(5, 4);
    const auto w = p.window(2, 5);
    EXPECT_EQ(w.w_d(0), p.w_d(2));
    EXPECT_EQ(w.w_d(4), p.w_d(3));
}

TEST(Mpc, ForecastShorterThanHorizon)
{
    try {
        build_mpc_step(MicrogridConfig{}, reference(), PlantState{}, flat_profiles(3, 0.2, 0.2, 0.5));
        FAIL() << "expected ForecastTooShort";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::ForecastTooShort);
    }
}

TEST(Mpc, ProgramHasTwoBinariesPerStage)
{
    const auto mp = build_mpc_step(MicrogridConfig{}, reference(), PlantState{}, flat_profiles(6, 0.2, 0.2, 0.5));
    EXPECT_EQ(mp.program.binary_indices.size(), 12u);
    EXPECT_EQ(mp.stages.size(), 6u);
}

TEST(Mpc, BranchAndBoundMatchesEnumeration)
{
    const auto prof = generate_profiles(2, 12);
    MicrogridConfig cfg;
    cfg.horizon = 3;  // 64 assignments keeps enumeration cheap
    for (int k : {0, 5}) {
        PlantState s = PlantState::initial(cfg);
        s.k = k;
        MpcOptions bb, en;
        en.strategy = BinaryStrategy::Enumerate;
        const auto a = solve_mpc_step(cfg, reference(), s, prof.window(k, 3), bb);
        const auto b = solve_mpc_step(cfg, reference(), s, prof.window(k, 3), en);
        EXPECT_EQ(a.delta, b.delta);
        EXPECT_NEAR(a.objective, b.objective, 1e-6);
        EXPECT_LE((a.pt - b.pt).cwiseAbs().maxCoeff(), 1e-4);
        EXPECT_LE(a.subproblems, b.subproblems);
    }
}

TEST(Plant, EnergyFollowsStoragePower)
{
    MicrogridConfig cfg;
    PlantState s = PlantState::initial(cfg);
    const auto n = step_plant(cfg, s, Eigen::Vector2d(1.0, -0.6), {1, 1});
    EXPECT_DOUBLE_EQ(n.x(0), 0.5 + 0.5 * 1.0);
    EXPECT_DOUBLE_EQ(n.x(1), 0.5 - 0.5 * 0.6);
    EXPECT_EQ(n.k, 1);
    EXPECT_EQ(n.delta_prev, (std::array<int, 2>{1, 1}));
}

TEST(Plant, DischargingBelowEmptyIsRejected)
{
    MicrogridConfig cfg;
    try {
        step_plant(cfg, PlantState::initial(cfg), Eigen::Vector2d(0.0, -1.0), {1, 0});  // 0.5 - 0.5 = 0 is fine
        step_plant(cfg, PlantState::initial(cfg), Eigen::Vector2d(-1.0, -1.1), {1, 0});
        FAIL() << "expected StateBoundViolation";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::StateBoundViolation);
    }
}

TEST(ClosedLoop, EnergyAccountingAndCosts)
{
    MicrogridConfig cfg;
    const auto prof = generate_profiles(4, 12);
    const auto r = run_closed_loop(cfg, reference(), prof, 6);
    ASSERT_EQ(r.records.size(), 6u);
    Eigen::Vector2d x = cfg.x0;
    double op = 0.0, loss = 0.0;
    std::array<int, 2> prev = cfg.delta0;
    for (const auto& rec : r.records) {
        x += 0.5 * rec.ps;  // B = Ts * I with A = I
        EXPECT_LE((rec.x_after - x).cwiseAbs().maxCoeff(), 1e-12);
        double sw = 0.0;
        for (int i = 0; i < 2; ++i) {
            const auto ui = static_cast<std::size_t>(i);
            sw += cfg.c0(i) * std::abs(rec.delta[ui] - prev[ui]) + cfg.c1(i) * rec.delta[ui];
        }
        prev = rec.delta;
        const double pw = cfg.c2.dot(rec.pt) + cfg.c3.dot(rec.pr) + cfg.c4.dot(rec.ps.cwiseAbs());
        EXPECT_NEAR(rec.cost_sw, sw, 1e-12);
        EXPECT_NEAR(rec.cost_p, pw, 1e-12);
        // losses are the sum of all nodal injections and cannot be negative
        EXPECT_GE(rec.cost_loss, -1e-7);
        op += sw + pw;
        loss += rec.pg.sum();
    }
    EXPECT_NEAR(r.kpis.mean_operating_cost, op / 6.0, 1e-12);
    EXPECT_NEAR(r.kpis.mean_loss_cost, loss / 6.0, 1e-12);
    EXPECT_LE((r.final.x - x).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE(audit_closed_loop(cfg, models().grid, prof, r).worst(), 1e-6);
}

TEST(ClosedLoop, SoftEnergyPenaltyIsChargedAfterTheMove)
{
    MicrogridConfig cfg;
    cfg.x0 = {0.1, 0.5};  // below the soft minimum of storage 1
    const auto prof = flat_profiles(8, 0.0, 0.0, 0.2);
    const auto r = run_closed_loop(cfg, reference(), prof, 1);
    const auto& rec = r.records.front();
    const double expected = cfg.c5(0) * std::max(0.0, 0.5 - rec.x_after(0)) +
                            cfg.c5(1) * std::max(0.0, 0.5 - rec.x_after(1));
    EXPECT_NEAR(rec.cost_x, expected, 1e-9);
    EXPECT_GT(rec.ps(0), 0.5);  // the large penalty makes storage 1 charge
}

TEST(ClosedLoop, ErrorsCarryTheStepIndex)
{
    auto prof = flat_profiles(20, 0.1, 0.1, 0.5);
    prof.w_d(8) = 10.0;  // first seen by the step whose horizon reaches k = 8
    try {
        run_closed_loop(MicrogridConfig{}, reference(), prof, 10);
        FAIL() << "expected Infeasible";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Infeasible);
        EXPECT_NE(std::string(e.what()).find("step 3"), std::string::npos) << e.what();
    }
}

TEST(ClosedLoop, ShortRunAgreesAcrossVariants)
{
    const auto& m = models();
    MicrogridConfig cfg;
    const auto prof = generate_profiles(9, 12);
    const auto ref = run_closed_loop(cfg, reference(), prof, 4);
    const auto dd = run_closed_loop(cfg, make_dd_model(m.grid, m.per_edge, OpfVariant::NonconvexDD), prof, 4);
    const auto gen = run_closed_loop(cfg, make_dd_model(m.grid, m.all_pairs, OpfVariant::GeneralizedDD), prof, 4);
    for (const auto* r : {&dd, &gen})
        for (std::size_t k = 0; k < 4; ++k) {
            EXPECT_LE((r->records[k].pe - ref.records[k].pe).cwiseAbs().maxCoeff(), 1e-4);
            EXPECT_LE((r->records[k].pt - ref.records[k].pt).cwiseAbs().maxCoeff(), 1e-4);
            EXPECT_EQ(r->records[k].delta, ref.records[k].delta);
        }
}

TEST(Results, CsvSchemaAndComparison)
{
    MicrogridConfig cfg;
    const auto prof = generate_profiles(4, 8);
    const auto r = run_closed_loop(cfg, reference(), prof, 2);
    const auto dir = temp_dir("results");
    write_closed_loop(r, models().grid, dir);
    const auto t = read_results(dir + "/results.csv");
    const std::vector<std::string> cols{
        "k",         "time_h",    "conv1_power", "conv2_power", "bess1_power", "bess2_power",     "res1_power",
        "res2_power", "load",     "stored_energy_1", "stored_energy_2", "pe_12", "pe_21", "pe_24",
        "pe_42",     "pe_25",     "pe_52",       "pe_35",       "pe_53",       "cost_sw",         "cost_p",
        "cost_x",    "cost_loss", "solve_time_s"};
    EXPECT_EQ(t.columns, cols);
    ASSERT_EQ(t.values.rows(), 2);
    EXPECT_EQ(t.values(1, 0), 1.0);
    EXPECT_EQ(t.values(1, 1), 0.5);
    EXPECT_EQ(t.values(0, 9), r.records[0].x_after(0));  // exact round trip
    for (const auto& [name, d] : compare_results(t, t)) EXPECT_EQ(d, 0.0) << name;
    const auto st = read_results(dir + "/solve_times.csv");
    EXPECT_EQ(st.columns, std::vector<std::string>{"solve_time_s"});
    const auto kp = detail::split_csv_line([&] {
        std::ifstream f(dir + "/kpis.csv");
        std::string l;
        std::getline(f, l);
        return l;
    }());
    EXPECT_EQ(kp, (std::vector<std::string>{"variant", "steps", "mean_operating_cost", "mean_loss_cost"}));
}

TEST(Mpc, ZeroDemandAndRenewablesSwitchEverythingOff)
{
    const auto r = solve_mpc_step(MicrogridConfig{}, reference(), PlantState::initial(MicrogridConfig{}),
                                  flat_profiles(6, 0.0, 0.0, 0.0));
    EXPECT_EQ(r.delta, (std::array<int, 2>{0, 0}));
    EXPECT_LE(r.pt.cwiseAbs().maxCoeff(), 1e-7);
    EXPECT_LE(r.ps.cwiseAbs().maxCoeff(), 1e-7);
    EXPECT_LE(r.pe.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Mpc, RenewablesAreDispatchedBeforeGenerators)
{
    MicrogridConfig cfg;
    cfg.horizon = 1;
    cfg.delta0 = {0, 0};
    const auto r = solve_mpc_step(cfg, reference(), PlantState::initial(cfg), flat_profiles(1, 1.0, 1.0, 0.5));
    EXPECT_EQ(r.delta, (std::array<int, 2>{0, 0}));
    EXPECT_GE(r.pr.sum(), 0.5);
    // hand-enumerated oracle: committing either generator costs at least c1 + c2 * pt_min more
    MpcOptions en;
    en.strategy = BinaryStrategy::Enumerate;
    EXPECT_EQ(solve_mpc_step(cfg, reference(), PlantState::initial(cfg), flat_profiles(1, 1.0, 1.0, 0.5), en).delta,
              r.delta);
}

TEST(Plant, TableExamples)
{
    MicrogridConfig cfg;
    const auto s = PlantState::initial(cfg);
    EXPECT_EQ(step_plant(cfg, s, Eigen::Vector2d::Zero(), {1, 0}).x, cfg.x0);
    EXPECT_EQ(step_plant(cfg, s, Eigen::Vector2d(1.0, 0.0), {1, 0}).x, Eigen::Vector2d(1.0, 0.5));
    EXPECT_EQ(step_plant(cfg, s, Eigen::Vector2d(-1.0, -1.0), {1, 0}).x, Eigen::Vector2d(0.0, 0.0));
    EXPECT_THROW(step_plant(cfg, s, Eigen::Vector2d(-1.1, 0.0), {1, 0}), Error);
}

TEST(ClosedLoop, SingleTrivialStepKpisEqualItsCosts)
{
    const auto r = run_closed_loop(MicrogridConfig{}, reference(), flat_profiles(1, 0.0, 0.0, 0.0), 1);
    const auto& rec = r.records.front();
    EXPECT_DOUBLE_EQ(r.kpis.mean_operating_cost, rec.cost_sw + rec.cost_p);
    EXPECT_DOUBLE_EQ(r.kpis.mean_loss_cost, rec.cost_loss);
}

TEST(ClosedLoop, PowerCostBoundedByAvailableRenewables)
{
    MicrogridConfig cfg;
    const auto prof = generate_profiles(6, 12);
    const auto r = run_closed_loop(cfg, reference(), prof, 5);
    for (const auto& rec : r.records)
        EXPECT_GE(rec.cost_p, cfg.c3.dot(prof.w_r.row(rec.k).transpose()) - 1e-9);
}

TEST(Kpis, HandExamples)
{
    StepRecord a;
    a.cost_sw = 0.2;
    a.cost_p = 1.0;
    a.cost_loss = 0.01;
    const auto k = compute_kpis({a});
    EXPECT_DOUBLE_EQ(k.mean_operating_cost, 1.2);
    EXPECT_DOUBLE_EQ(k.mean_loss_cost, 0.01);
    const auto z = compute_kpis({StepRecord{}, StepRecord{}});
    EXPECT_EQ(z.mean_operating_cost, 0.0);
    EXPECT_EQ(z.mean_loss_cost, 0.0);
}

TEST(Mpc, RebalanceRestoresExactPowerFlow)
{
    const Grid& g = models().grid;
    Eigen::VectorXd inj(5);
    inj << 0.0, 0.1, 0.3, 0.2, -1.0;
    const RadialPfResult pfr = solve_radial_pf(g, inj, 1);
    const Eigen::VectorXd& t = pfr.theta;  // edges 1-2, 2-4, 2-5, 3-5
    Eigen::VectorXd nodes(5);
    nodes(0) = 0.0;
    nodes(1) = -t(0);
    nodes(3) = nodes(1) - t(1);
    nodes(4) = nodes(1) - t(2);
    nodes(2) = nodes(4) + t(3);
    const Eigen::VectorXd pe_true = line_powers(effective_coeffs(g), t);

    const MicrogridConfig cfg;
    for (OpfVariant v : {OpfVariant::NonconvexDD, OpfVariant::GeneralizedDD}) {
        const bool gen = v == OpfVariant::GeneralizedDD;
        const PowerFlowModel pf = make_dd_model(g, gen ? models().all_pairs : models().per_edge, v);
        StepRecord r;
        r.pt = {pfr.slack_injection + 3e-6, 0.3};
        r.ps = {0.0, 0.0};
        r.pr = {0.1, 0.2};
        r.pd = -1.0;
        r.delta = {1, 1};
        r.x_before = cfg.x0;
        Eigen::VectorXd off = nodes;
        off(3) += 2e-6;
        PowerFlowPoint pt;
        Eigen::VectorXd edge_off(4);
        for (std::size_t l = 0; l < 4; ++l)
            edge_off(static_cast<Eigen::Index>(l)) = off(static_cast<Eigen::Index>(g.index_of(g.edges()[l].first))) -
                                                     off(static_cast<Eigen::Index>(g.index_of(g.edges()[l].second)));
        pt.phi = gen ? lift_all_pairs(g, off) : lift_grid(g, edge_off);
        ASSERT_TRUE(rebalance_point(cfg, pf, r, pt)) << to_string(v);
        EXPECT_NEAR(r.pt(0), pfr.slack_injection, 1e-10) << to_string(v);
        EXPECT_LE((pt.pe - pe_true).cwiseAbs().maxCoeff(), 1e-10) << to_string(v);
        EXPECT_LE((pt.pg.tail(4) - inj.tail(4)).cwiseAbs().maxCoeff(), 1e-12) << to_string(v);
    }
}
