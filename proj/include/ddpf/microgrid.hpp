#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "excitation.hpp"
#include "opf.hpp"

namespace ddpf {

/// Unit order used throughout: two conventional generators, two storage systems,
/// two renewable sources, one load.
inline constexpr int kUnitCount = 7;
inline const std::array<const char*, kUnitCount> kUnitNames = {"conv1", "conv2", "bess1", "bess2", "res1", "res2", "load"};

struct MicrogridConfig {
    Eigen::Vector2d c0{0.2, 0.1};
    Eigen::Vector2d c1{0.13, 0.07};
    Eigen::Vector2d c2{1.56, 1.43};
    Eigen::Vector2d c3{-0.8, -1.0};
    Eigen::Vector2d c4{0.1, 0.05};
    Eigen::Vector2d c5{1e3, 1e3};
    double c6 = 1.0;
    double gamma = 0.9;
    int horizon = 6;
    double Ts = 0.5;  ///< hours
    Eigen::Vector2d pt_min{0.3, 0.1};
    Eigen::Vector2d pt_max{0.9, 0.6};
    Eigen::Vector2d ps_min{-1.0, -1.0};
    Eigen::Vector2d ps_max{1.0, 1.0};
    Eigen::Vector2d As{1.0, 1.0};  ///< diagonal
    Eigen::Vector2d Bs{0.5, 0.5};  ///< diagonal, pu h per pu
    Eigen::Vector2d x_min{0.0, 0.0};
    Eigen::Vector2d x_max{7.0, 4.0};
    Eigen::Vector2d x_soft_min{0.5, 0.5};
    Eigen::Vector2d x_soft_max{6.5, 3.5};
    Eigen::VectorXd pe_min = Eigen::VectorXd::Constant(1, -1.0);  ///< one entry, or one per directed line
    Eigen::VectorXd pe_max = Eigen::VectorXd::Constant(1, 1.0);
    Eigen::Vector2d x0{0.5, 0.5};
    std::array<int, 2> delta0{1, 0};
    double beta = 1.0;
    std::array<NodeId, kUnitCount> unit_nodes{1, 3, 2, 4, 2, 4, 5};
    /// Sign with which storage power enters the nodal balance. Positive storage power
    /// charges the battery, so it is drawn from the grid.
    double storage_injection_sign = -1.0;

    Eigen::VectorXd line_min(Eigen::Index lines2) const
    {
        return pe_min.size() == 1 ? Eigen::VectorXd::Constant(lines2, pe_min(0)) : pe_min;
    }
    Eigen::VectorXd line_max(Eigen::Index lines2) const
    {
        return pe_max.size() == 1 ? Eigen::VectorXd::Constant(lines2, pe_max(0)) : pe_max;
    }
    double fleet_capacity() const { return pt_max.sum() + ps_max.sum(); }

    void validate(const Grid& grid) const
    {
        auto bad = [](const std::string& m) { throw Error(ErrorKind::InvalidParameter, "microgrid config: " + m); };
        if (!(gamma > 0.0 && gamma < 1.0)) bad("gamma must lie in (0,1)");
        if (horizon < 1) bad("horizon must be positive");
        if (!(Ts > 0.0)) bad("Ts must be positive");
        if ((c0.array() < 0).any() || (c4.array() < 0).any() || (c5.array() < 0).any())
            bad("c0, c4, c5 must be nonnegative");
        if ((c1.array() < 0).any() || (c2.array() < 0).any() || (c3.array() > 0).any() || c6 < 0)
            bad("cost signs: c1, c2, c6 >= 0 and c3 <= 0");
        if ((pt_min.array() < 0).any() || (pt_min.array() > pt_max.array()).any()) bad("0 <= pt_min <= pt_max");
        if ((ps_min.array() > 0).any() || (ps_max.array() < 0).any()) bad("ps_min <= 0 <= ps_max");
        if ((x_min.array() > x_soft_min.array()).any() || (x_soft_min.array() > x_soft_max.array()).any() ||
            (x_soft_max.array() > x_max.array()).any())
            bad("x_min <= x_soft_min <= x_soft_max <= x_max");
        if ((x0.array() < x_min.array()).any() || (x0.array() > x_max.array()).any()) bad("x0 outside energy bounds");
        if (!(beta >= 0.0)) bad("beta must be nonnegative");
        if (delta0[0] < 0 || delta0[0] > 1 || delta0[1] < 0 || delta0[1] > 1) bad("delta0 entries must be 0 or 1");
        const auto l2 = 2 * static_cast<Eigen::Index>(grid.edge_count());
        if ((pe_min.size() != 1 && pe_min.size() != l2) || (pe_max.size() != 1 && pe_max.size() != l2))
            throw Error(ErrorKind::DimensionMismatch, "line limits need 1 or " + std::to_string(l2) + " entries");
        if ((line_min(l2).array() > line_max(l2).array()).any()) bad("pe_min <= pe_max");
        for (NodeId n : unit_nodes)
            if (!grid.has_node(n)) bad("unit mapped to unknown node " + std::to_string(n));
    }
};

/// Boolean unit-to-node matrix (nodes in ascending order, units in kUnitNames order).
inline Eigen::MatrixXd unit_matrix(const MicrogridConfig& cfg, const Grid& grid)
{
    Eigen::MatrixXd u = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(grid.node_count()), kUnitCount);
    for (int j = 0; j < kUnitCount; ++j)
        u(static_cast<Eigen::Index>(grid.index_of(cfg.unit_nodes[static_cast<std::size_t>(j)])), j) = 1.0;
    return u;
}

// ---------------------------------------------------------------------------
// Config JSON. Every case-study parameter is required:
//   c0..c5 [2], c6, gamma, horizon, Ts, pt_min, pt_max, ps_min, ps_max, As, Bs
//   (diagonals), x_min, x_max, x_soft_min, x_soft_max, pe_min, pe_max (number or
//   one per directed line), x0, delta0, beta.
// Optional: unit_nodes [7] (conv1, conv2, bess1, bess2, res1, res2, load),
//   storage_injection_sign (default -1).
// ---------------------------------------------------------------------------

inline MicrogridConfig config_from_json(const nlohmann::json& j)
{
    MicrogridConfig c;
    auto vec2 = [&](const char* key) {
        const auto& v = detail::require_key(j, key, "microgrid config");
        if (!v.is_array() || v.size() != 2)
            throw Error(ErrorKind::SchemaError, std::string("key '") + key + "' must be an array of 2 numbers");
        return Eigen::Vector2d(v[0].get<double>(), v[1].get<double>());
    };
    auto num = [&](const char* key) {
        const auto& v = detail::require_key(j, key, "microgrid config");
        if (!v.is_number()) throw Error(ErrorKind::SchemaError, std::string("key '") + key + "' must be a number");
        return v.get<double>();
    };
    auto limits = [&](const char* key) {
        const auto& v = detail::require_key(j, key, "microgrid config");
        if (v.is_number()) return Eigen::VectorXd::Constant(1, v.get<double>()).eval();
        const auto vals = v.get<std::vector<double>>();
        return Eigen::Map<const Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size())).eval();
    };
    try {
        c.c0 = vec2("c0");
        c.c1 = vec2("c1");
        c.c2 = vec2("c2");
        c.c3 = vec2("c3");
        c.c4 = vec2("c4");
        c.c5 = vec2("c5");
        c.c6 = num("c6");
        c.gamma = num("gamma");
        c.horizon = static_cast<int>(num("horizon"));
        c.Ts = num("Ts");
        c.pt_min = vec2("pt_min");
        c.pt_max = vec2("pt_max");
        c.ps_min = vec2("ps_min");
        c.ps_max = vec2("ps_max");
        c.As = vec2("As");
        c.Bs = vec2("Bs");
        c.x_min = vec2("x_min");
        c.x_max = vec2("x_max");
        c.x_soft_min = vec2("x_soft_min");
        c.x_soft_max = vec2("x_soft_max");
        c.pe_min = limits("pe_min");
        c.pe_max = limits("pe_max");
        c.x0 = vec2("x0");
        const Eigen::Vector2d d0 = vec2("delta0");
        c.delta0 = {static_cast<int>(d0(0)), static_cast<int>(d0(1))};
        c.beta = num("beta");
        if (j.contains("unit_nodes")) {
            const auto nodes = j.at("unit_nodes").get<std::vector<NodeId>>();
            if (nodes.size() != kUnitCount) throw Error(ErrorKind::SchemaError, "key 'unit_nodes' needs 7 entries");
            std::copy(nodes.begin(), nodes.end(), c.unit_nodes.begin());
        }
        c.storage_injection_sign = detail::number_or(j, "storage_injection_sign", -1.0);
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::SchemaError, std::string("microgrid config: ") + ex.what());
    }
    return c;
}

inline nlohmann::json config_to_json(const MicrogridConfig& c)
{
    auto v2 = [](const Eigen::Vector2d& v) { return nlohmann::json::array({v(0), v(1)}); };
    auto lim = [](const Eigen::VectorXd& v) {
        if (v.size() == 1) return nlohmann::json(v(0));
        return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
    };
    nlohmann::json j;
    j["c0"] = v2(c.c0);
    j["c1"] = v2(c.c1);
    j["c2"] = v2(c.c2);
    j["c3"] = v2(c.c3);
    j["c4"] = v2(c.c4);
    j["c5"] = v2(c.c5);
    j["c6"] = c.c6;
    j["gamma"] = c.gamma;
    j["horizon"] = c.horizon;
    j["Ts"] = c.Ts;
    j["pt_min"] = v2(c.pt_min);
    j["pt_max"] = v2(c.pt_max);
    j["ps_min"] = v2(c.ps_min);
    j["ps_max"] = v2(c.ps_max);
    j["As"] = v2(c.As);
    j["Bs"] = v2(c.Bs);
    j["x_min"] = v2(c.x_min);
    j["x_max"] = v2(c.x_max);
    j["x_soft_min"] = v2(c.x_soft_min);
    j["x_soft_max"] = v2(c.x_soft_max);
    j["pe_min"] = lim(c.pe_min);
    j["pe_max"] = lim(c.pe_max);
    j["x0"] = v2(c.x0);
    j["delta0"] = {c.delta0[0], c.delta0[1]};
    j["beta"] = c.beta;
    j["unit_nodes"] = c.unit_nodes;
    j["storage_injection_sign"] = c.storage_injection_sign;
    return j;
}

inline MicrogridConfig load_config(const std::string& path) { return config_from_json(detail::read_json_file(path)); }

inline void save_config(const MicrogridConfig& c, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + path);
    out << config_to_json(c).dump(2) << "\n";
}

struct PlantState {
    Eigen::Vector2d x{0.5, 0.5};
    std::array<int, 2> delta_prev{1, 0};
    int k = 0;

    static PlantState initial(const MicrogridConfig& c) { return {c.x0, c.delta0, 0}; }
};

/// Renewable availability (one column per RES unit) and demand, one row per step.
struct Profiles {
    Eigen::MatrixXd w_r;  ///< K x 2
    Eigen::VectorXd w_d;  ///< K
    Eigen::Index size() const { return w_d.size(); }

    void validate() const
    {
        if (w_r.rows() != w_d.size() || w_r.cols() != 2) throw Error(ErrorKind::DimensionMismatch, "profile shape");
        if ((w_r.array() < 0).any() || (w_d.array() < 0).any())
            throw Error(ErrorKind::InvalidParameter, "profiles must be nonnegative");
    }

    /// Rows [start, start + len), repeating the last row past the end.
    Profiles window(Eigen::Index start, Eigen::Index len) const
    {
        if (size() == 0) throw Error(ErrorKind::ForecastTooShort, "empty profile");
        Profiles p;
        p.w_r.resize(len, 2);
        p.w_d.resize(len);
        for (Eigen::Index h = 0; h < len; ++h) {
            const Eigen::Index r = std::min(start + h, size() - 1);
            p.w_r.row(h) = w_r.row(r);
            p.w_d(h) = w_d(r);
        }
        return p;
    }
};

struct ProfileShape {
    double demand_mean = 0.8;
    double demand_amplitude = 0.3;
    double demand_noise = 0.03;
    double wind_mean = 0.35;
    double wind_persistence = 0.9;
    double wind_volatility = 0.08;
    double wind_max = 1.0;
    double pv_peak = 0.8;
    double Ts = 0.5;
};

/// Synthetic profiles: daily demand sinusoid with noise, an autoregressive wind-like
/// source and a PV-like source that is zero between 18:00 and 06:00.
inline Profiles generate_profiles(std::uint64_t seed, Eigen::Index K, const ProfileShape& shape = {},
                                  double fleet_capacity = MicrogridConfig{}.fleet_capacity())
{
    if (K < 1) throw Error(ErrorKind::InvalidParameter, "K must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::uniform_real_distribution<double> cloud(0.6, 1.0);
    Profiles p;
    p.w_r.resize(K, 2);
    p.w_d.resize(K);
    double wind = shape.wind_mean;
    for (Eigen::Index k = 0; k < K; ++k) {
        const double hour = std::fmod(static_cast<double>(k) * shape.Ts, 24.0);
        const double day_phase = 2.0 * std::numbers::pi * (hour - 13.0) / 24.0;
        p.w_d(k) = std::max(0.0, shape.demand_mean + shape.demand_amplitude * std::cos(day_phase) +
                                     shape.demand_noise * n01(rng));
        wind = shape.wind_mean + shape.wind_persistence * (wind - shape.wind_mean) + shape.wind_volatility * n01(rng);
        wind = std::clamp(wind, 0.0, shape.wind_max);
        p.w_r(k, 0) = wind;
        const double c = cloud(rng);
        p.w_r(k, 1) = (hour > 6.0 && hour < 18.0) ? shape.pv_peak * c * std::sin(std::numbers::pi * (hour - 6.0) / 12.0) : 0.0;
    }
    const double peak = p.w_d.maxCoeff();
    if (peak > fleet_capacity)
        throw Error(ErrorKind::InfeasibleProfile, "peak demand " + std::to_string(peak) + " pu exceeds fleet capacity " +
                                                      std::to_string(fleet_capacity) + " pu");
    return p;
}

inline void write_profiles(const Profiles& p, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + path);
    out << "k,res1_available,res2_available,demand\n";
    for (Eigen::Index k = 0; k < p.size(); ++k)
        out << k << "," << detail::format_double(p.w_r(k, 0)) << "," << detail::format_double(p.w_r(k, 1)) << ","
            << detail::format_double(p.w_d(k)) << "\n";
}

inline Profiles read_profiles(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoError, "cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorKind::SchemaError, "empty profile file " + path);
    const auto header = detail::split_csv_line(line);
    const std::vector<std::string> expected{"k", "res1_available", "res2_available", "demand"};
    if (header != expected) throw Error(ErrorKind::SchemaError, "profile header must be k,res1_available,res2_available,demand");
    std::vector<std::array<double, 3>> rows;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != 4) throw Error(ErrorKind::SchemaError, "profile row with " + std::to_string(cells.size()) + " fields");
        rows.push_back({detail::parse_double(cells[1], header[1]), detail::parse_double(cells[2], header[2]),
                        detail::parse_double(cells[3], header[3])});
    }
    Profiles p;
    p.w_r.resize(static_cast<Eigen::Index>(rows.size()), 2);
    p.w_d.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        p.w_r(i, 0) = rows[k][0];
        p.w_r(i, 1) = rows[k][1];
        p.w_d(i) = rows[k][2];
    }
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------
// MPC program
// ---------------------------------------------------------------------------

struct MpcStage {
    Eigen::Index pt = -1, delta = -1, sigma = -1, p_plus = -1, p_minus = -1, pr = -1, x = -1, slack_lo = -1,
                 slack_hi = -1;
    PowerFlowBlock pf;
};

struct MpcProgram {
    MixedBinaryProgram program;
    std::vector<MpcStage> stages;
    Profiles forecast;
};

/// One receding-horizon problem. Stage h holds the moves at k+h and the stored
/// energy x(k+h+1) they produce; energy bounds and soft-bound penalties apply to it.
inline MpcProgram build_mpc_step(const MicrogridConfig& cfg, const PowerFlowModel& pf, const PlantState& state,
                                 const Profiles& forecast)
{
    cfg.validate(pf.grid);
    const int H = cfg.horizon;
    if (forecast.size() < H)
        throw Error(ErrorKind::ForecastTooShort,
                    "forecast has " + std::to_string(forecast.size()) + " steps, horizon is " + std::to_string(H));
    const Eigen::MatrixXd U = unit_matrix(cfg, pf.grid);
    const Eigen::Index l2 = pf.line_dim();
    const Eigen::VectorXd pe_lo = cfg.line_min(l2), pe_hi = cfg.line_max(l2);

    MpcProgram out;
    out.forecast = forecast.window(0, H);
    ProgramBuilder b;
    for (int h = 0; h < H; ++h) {
        const double disc = std::pow(cfg.gamma, h);
        MpcStage st;
        st.pt = b.add_variables(2, 0.0, 0.0);
        st.delta = b.add_binary();
        b.add_binary();
        st.sigma = b.add_variables(2, 0.0, kInf);
        st.p_plus = b.add_variables(2, 0.0, 0.0);
        st.p_minus = b.add_variables(2, 0.0, 0.0);
        st.pr = b.add_variables(2, 0.0, 0.0);
        st.x = b.add_variables(2, 0.0, 0.0);
        st.slack_lo = b.add_variables(2, 0.0, kInf);
        st.slack_hi = b.add_variables(2, 0.0, kInf);
        for (int i = 0; i < 2; ++i) {
            const Eigen::Index pt = st.pt + i, d = st.delta + i, sg = st.sigma + i, pp = st.p_plus + i,
                               pm = st.p_minus + i, pr = st.pr + i, x = st.x + i;
            b.set_bounds(pt, 0.0, cfg.pt_max(i));
            b.set_bounds(pp, 0.0, cfg.ps_max(i));
            b.set_bounds(pm, 0.0, -cfg.ps_min(i));
            b.set_bounds(pr, 0.0, out.forecast.w_r(h, i));
            b.set_bounds(x, cfg.x_min(i), cfg.x_max(i));
            // generator limits switched by commitment
            b.add_inequality({{d, cfg.pt_min(i)}, {pt, -1.0}}, 0.0);
            b.add_inequality({{pt, 1.0}, {d, -cfg.pt_max(i)}}, 0.0);
            // |delta_h - delta_{h-1}| <= sigma
            if (h == 0) {
                const double prev = state.delta_prev[static_cast<std::size_t>(i)];
                b.add_inequality({{d, 1.0}, {sg, -1.0}}, prev);
                b.add_inequality({{d, -1.0}, {sg, -1.0}}, -prev);
            } else {
                const Eigen::Index dp = out.stages.back().delta + i;
                b.add_inequality({{d, 1.0}, {dp, -1.0}, {sg, -1.0}}, 0.0);
                b.add_inequality({{d, -1.0}, {dp, 1.0}, {sg, -1.0}}, 0.0);
            }
            // storage dynamics
            if (h == 0)
                b.add_equality({{x, 1.0}, {pp, -cfg.Bs(i)}, {pm, cfg.Bs(i)}}, cfg.As(i) * state.x(i));
            else
                b.add_equality({{x, 1.0}, {out.stages.back().x + i, -cfg.As(i)}, {pp, -cfg.Bs(i)}, {pm, cfg.Bs(i)}}, 0.0);
            // soft energy bounds
            b.add_inequality({{x, -1.0}, {st.slack_lo + i, -1.0}}, -cfg.x_soft_min(i));
            b.add_inequality({{x, 1.0}, {st.slack_hi + i, -1.0}}, cfg.x_soft_max(i));

            b.add_cost(sg, disc * cfg.c0(i));
            b.add_cost(d, disc * cfg.c1(i));
            b.add_cost(pt, disc * cfg.c2(i));
            b.add_cost(pr, disc * cfg.c3(i));
            b.add_cost(pp, disc * cfg.c4(i));
            b.add_cost(pm, disc * cfg.c4(i));
            b.add_cost(st.slack_lo + i, disc * cfg.c5(i));
            b.add_cost(st.slack_hi + i, disc * cfg.c5(i));
        }
        st.pf = add_power_flow_block(b, pf, cfg.beta);
        for (Eigen::Index l = 0; l < l2; ++l) b.set_bounds(st.pf.pe + l, pe_lo(l), pe_hi(l));
        for (Eigen::Index n = 0; n < st.pf.pg_dim; ++n) b.add_cost(st.pf.pg + n, disc * cfg.c6);
        // nodal balance of units and load
        const double pd = -out.forecast.w_d(h);
        const double sgn = cfg.storage_injection_sign;
        for (Eigen::Index n = 0; n < st.pf.pg_dim; ++n) {
            ProgramBuilder::Terms row{{st.pf.pg + n, 1.0}};
            for (int i = 0; i < 2; ++i) {
                if (U(n, i)) row.push_back({st.pt + i, -1.0});
                if (U(n, 2 + i)) {
                    row.push_back({st.p_plus + i, -sgn});
                    row.push_back({st.p_minus + i, sgn});
                }
                if (U(n, 4 + i)) row.push_back({st.pr + i, -1.0});
            }
            b.add_equality(row, U(n, 6) * pd);
        }
        out.stages.push_back(st);
    }
    out.program = b.build();
    return out;
}

/// Applied first move of an MPC solution together with the resulting plant quantities.
struct StepRecord {
    int k = 0;
    double time_h = 0.0;
    Eigen::Vector2d pt, ps, pr;
    std::array<int, 2> delta{0, 0};
    std::array<int, 2> delta_prev{0, 0};
    double pd = 0.0;
    Eigen::Vector2d x_before, x_after;
    Eigen::VectorXd pe, pg, phi;
    double cost_sw = 0.0, cost_p = 0.0, cost_x = 0.0, cost_loss = 0.0;
    double objective = 0.0;
    double solve_time_s = 0.0;
    int subproblems = 0;
    double tightness = 0.0;  ///< max circle residual of the applied stage before any projection
};

/// Stage costs of an applied move.
inline void evaluate_stage_costs(const MicrogridConfig& cfg, StepRecord& r)
{
    r.cost_sw = 0.0;
    for (int i = 0; i < 2; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        r.cost_sw += cfg.c0(i) * std::abs(r.delta[ui] - r.delta_prev[ui]) + cfg.c1(i) * r.delta[ui];
    }
    r.cost_p = cfg.c2.dot(r.pt) + cfg.c3.dot(r.pr) + cfg.c4.dot(r.ps.cwiseAbs());
    r.cost_x = cfg.c5.dot((cfg.x_soft_min - r.x_after).cwiseMax(0.0) + (r.x_after - cfg.x_soft_max).cwiseMax(0.0));
    r.cost_loss = cfg.c6 * r.pg.sum();
}

/// Advances the stored energy with the applied storage power.
inline PlantState step_plant(const MicrogridConfig& cfg, const PlantState& state, const Eigen::Vector2d& ps,
                             const std::array<int, 2>& delta, double tol = 1e-6)
{
    PlantState next;
    next.x = cfg.As.cwiseProduct(state.x) + cfg.Bs.cwiseProduct(ps);
    for (int i = 0; i < 2; ++i)
        if (next.x(i) < cfg.x_min(i) - tol || next.x(i) > cfg.x_max(i) + tol)
            throw Error(ErrorKind::StateBoundViolation, "storage " + std::to_string(i + 1) + " energy " +
                                                            std::to_string(next.x(i)) + " outside [" +
                                                            std::to_string(cfg.x_min(i)) + ", " +
                                                            std::to_string(cfg.x_max(i)) + "]");
    next.delta_prev = delta;
    next.k = state.k + 1;
    return next;
}

/// Moves a projected point back onto exact nodal balance at the committed unit powers.
/// Node angles are corrected by Newton steps through the data map phi -> (p_e, p_g);
/// the first committed generator, or else a storage unit, takes up the mismatch at its
/// node. Returns false when no unit can take it up within its limits.
inline bool rebalance_point(const MicrogridConfig& cfg, const PowerFlowModel& pf, StepRecord& r, PowerFlowPoint& pt,
                            double tol = 1e-6)
{
    const Grid& grid = pf.grid;
    const auto nb = static_cast<Eigen::Index>(grid.node_count());
    const auto pairs = pf.generalized() ? all_node_pairs(grid) : grid.edges();
    const auto np = static_cast<Eigen::Index>(pairs.size());
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(np, nb);
    for (Eigen::Index p = 0; p < np; ++p) {
        A(p, static_cast<Eigen::Index>(grid.index_of(pairs[static_cast<std::size_t>(p)].first))) = 1.0;
        A(p, static_cast<Eigen::Index>(grid.index_of(pairs[static_cast<std::size_t>(p)].second))) = -1.0;
    }
    const DataDrivenModel& d = *pf.data;
    const Eigen::MatrixXd X =
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(d.phi.data).solve(
            Eigen::MatrixXd::Identity(d.lifted_dim(), d.lifted_dim()));
    const Eigen::MatrixXd Mpe = d.pe.data * X;
    const Eigen::MatrixXd Mpg = pf.generalized() ? Eigen::MatrixXd(d.pg->data * X) : Eigen::MatrixXd(injection_matrix(grid) * Mpe);

    Eigen::VectorXd units(kUnitCount);
    units << r.pt(0), r.pt(1), cfg.storage_injection_sign * r.ps(0), cfg.storage_injection_sign * r.ps(1), r.pr(0),
        r.pr(1), r.pd;
    const Eigen::VectorXd target = unit_matrix(cfg, grid) * units;
    const Eigen::VectorXd t0 =
        A.rightCols(nb - 1).colPivHouseholderQr().solve(angles_from_lift(pt.phi));

    // storage is tried first inside its soft energy band, then anywhere within hard limits
    std::vector<std::pair<int, bool>> candidates;
    for (int j = 0; j < 2; ++j)
        if (r.delta[static_cast<std::size_t>(j)] == 1) candidates.emplace_back(j, false);
    for (bool soft : {true, false})
        for (int j = 2; j < 4; ++j) candidates.emplace_back(j, soft);
    for (const auto& [j, soft] : candidates) {
        const auto s = static_cast<Eigen::Index>(grid.index_of(cfg.unit_nodes[static_cast<std::size_t>(j)]));
        Eigen::VectorXd theta = Eigen::VectorXd::Zero(nb);
        theta.tail(nb - 1) = t0;
        Eigen::VectorXd phi, pg;
        double res = 0.0;
        for (int it = 0; it < 30; ++it) {
            const Eigen::VectorXd ang = A * theta;
            phi = lift_angles(ang);
            pg = Mpg * phi;
            Eigen::VectorXd f = pg - target;
            f(s) = 0.0;
            res = f.cwiseAbs().maxCoeff();
            if (res < 1e-14) break;
            Eigen::MatrixXd dphi = Eigen::MatrixXd::Zero(phi.size(), np);
            for (Eigen::Index p = 0; p < np; ++p) {
                dphi(2 * p + 1, p) = -std::sin(ang(p));
                dphi(2 * p + 2, p) = std::cos(ang(p));
            }
            Eigen::MatrixXd J = (Mpg * dphi * A).rightCols(nb - 1);
            J.row(s).setZero();
            theta.tail(nb - 1) -= J.colPivHouseholderQr().solve(f);
        }
        if (res > 1e-10) continue;
        const double value = units(j) + pg(s) - target(s);
        if (j < 2) {
            if (value < cfg.pt_min(j) - tol || value > cfg.pt_max(j) + tol) continue;
            r.pt(j) = value;
        } else {
            const double ps = value / cfg.storage_injection_sign;
            if (ps < cfg.ps_min(j - 2) - tol || ps > cfg.ps_max(j - 2) + tol) continue;
            const double x = cfg.As(j - 2) * r.x_before(j - 2) + cfg.Bs(j - 2) * ps;
            if (soft && (x < cfg.x_soft_min(j - 2) || x > cfg.x_soft_max(j - 2))) continue;
            r.ps(j - 2) = ps;
        }
        pt.phi = phi;
        pt.alpha = X * phi;
        pt.pe = Mpe * phi;
        pt.pg = pg;
        return true;
    }
    return false;
}

struct MpcOptions {
    BinaryStrategy strategy = BinaryStrategy::BranchAndBound;
    SolverOptions solver = opf_solver_options();
    double projection_tol = 1e-5;  ///< largest line-power change accepted from projection
};

/// Solves one MPC step and extracts the first move. Variants without a convex
/// relaxation guarantee are projected onto the circles before the move is applied.
inline StepRecord solve_mpc_step(const MicrogridConfig& cfg, const PowerFlowModel& pf, const PlantState& state,
                                 const Profiles& forecast, const MpcOptions& opt = {})
{
    const auto start = std::chrono::steady_clock::now();
    const MpcProgram mp = build_mpc_step(cfg, pf, state, forecast);
    MixedBinaryOptions mo;
    mo.convex = opt.solver;
    const MixedBinarySolution sol = solve_mixed_binary(mp.program, opt.strategy, mo);
    if (sol.solution.status == SolveStatus::Infeasible) throw Error(ErrorKind::Infeasible, "MPC problem is infeasible");
    if (sol.solution.status == SolveStatus::Unbounded) throw Error(ErrorKind::NumericalBreakdown, "MPC problem is unbounded");
    const Eigen::VectorXd& x = sol.solution.x;
    const MpcStage& s0 = mp.stages.front();

    StepRecord r;
    r.k = state.k;
    r.time_h = state.k * cfg.Ts;
    r.delta_prev = state.delta_prev;
    r.x_before = state.x;
    for (int i = 0; i < 2; ++i) {
        r.pt(i) = x(s0.pt + i);
        r.ps(i) = x(s0.p_plus + i) - x(s0.p_minus + i);
        r.pr(i) = x(s0.pr + i);
        r.delta[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(x(s0.delta + i)));
    }
    r.pd = -mp.forecast.w_d(0);
    PowerFlowPoint pt = extract_point(s0.pf, x);
    r.tightness = pair_residuals(pt.phi).cwiseAbs().maxCoeff();
    if (pf.variant == OpfVariant::NonconvexDD || pf.variant == OpfVariant::GeneralizedDD) {
        PowerFlowPoint proj = project_point(pf, pt, nullptr);
        if (!rebalance_point(cfg, pf, r, proj))
            throw Error(ErrorKind::ProjectionInfeasible, "no committed unit can absorb the projection mismatch");
        const double shift = (proj.pe - pt.pe).cwiseAbs().maxCoeff();
        if (shift > opt.projection_tol)
            throw Error(ErrorKind::ProjectionInfeasible,
                        "projection moves line powers by " + std::to_string(shift) + " (relaxation not tight)");
        const Eigen::Index l2 = proj.pe.size();
        const double over =
            std::max((cfg.line_min(l2) - proj.pe).maxCoeff(), (proj.pe - cfg.line_max(l2)).maxCoeff());
        if (over > 1e-6)
            throw Error(ErrorKind::ProjectionInfeasible, "projected line powers exceed limits by " + std::to_string(over));
        pt = proj;
    }
    r.pe = pt.pe;
    r.pg = pt.pg;
    r.phi = pt.phi;
    r.objective = sol.solution.objective;
    r.subproblems = sol.subproblems;
    PlantState next = step_plant(cfg, state, r.ps, r.delta);
    r.x_after = next.x;
    evaluate_stage_costs(cfg, r);
    r.solve_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

struct Kpis {
    double mean_operating_cost = 0.0;  ///< mean of switching/running plus power cost
    double mean_loss_cost = 0.0;
};

inline Kpis compute_kpis(const std::vector<StepRecord>& records)
{
    if (records.empty()) throw Error(ErrorKind::InvalidParameter, "no records");
    Kpis k;
    for (const auto& r : records) {
        k.mean_operating_cost += r.cost_sw + r.cost_p;
        k.mean_loss_cost += r.cost_loss;
    }
    const auto n = static_cast<double>(records.size());
    k.mean_operating_cost /= n;
    k.mean_loss_cost /= n;
    return k;
}

struct ClosedLoopResult {
    OpfVariant variant = OpfVariant::Reference;
    PlantState initial, final;
    std::vector<StepRecord> records;
    Kpis kpis;
};

inline ClosedLoopResult run_closed_loop(const MicrogridConfig& cfg, const PowerFlowModel& pf, const Profiles& profiles,
                                        int K, const MpcOptions& opt = {})
{
    if (K < 1) throw Error(ErrorKind::InvalidParameter, "K must be positive");
    profiles.validate();
    if (profiles.size() < K)
        throw Error(ErrorKind::ForecastTooShort, "profiles cover " + std::to_string(profiles.size()) + " of " +
                                                     std::to_string(K) + " steps");
    ClosedLoopResult res;
    res.variant = pf.variant;
    res.initial = PlantState::initial(cfg);
    PlantState state = res.initial;
    for (int k = 0; k < K; ++k) {
        try {
            StepRecord r = solve_mpc_step(cfg, pf, state, profiles.window(k, cfg.horizon), opt);
            state = step_plant(cfg, state, r.ps, r.delta);
            res.records.push_back(std::move(r));
        } catch (const Error& e) {
            throw Error(e.kind(), "step " + std::to_string(k) + ": " + e.what());
        }
    }
    res.final = state;
    res.kpis = compute_kpis(res.records);
    return res;
}

// ---------------------------------------------------------------------------
// Constraint audit, replayed from the records only
// ---------------------------------------------------------------------------

struct AuditReport {
    double generator_limits = 0.0;
    double storage_limits = 0.0;
    double storage_dynamics = 0.0;
    double energy_bounds = 0.0;
    double res_limits = 0.0;
    double line_limits = 0.0;
    double nodal_balance = 0.0;
    double line_physics = 0.0;  ///< records' line powers vs line equations at the recorded angles
    double worst() const
    {
        return std::max({generator_limits, storage_limits, storage_dynamics, energy_bounds, res_limits, line_limits,
                         nodal_balance, line_physics});
    }
};

inline AuditReport audit_closed_loop(const MicrogridConfig& cfg, const Grid& grid, const Profiles& profiles,
                                     const ClosedLoopResult& res)
{
    AuditReport a;
    const Eigen::MatrixXd U = unit_matrix(cfg, grid);
    const auto coeffs = effective_coeffs(grid);
    const Eigen::Index l2 = 2 * static_cast<Eigen::Index>(grid.edge_count());
    const Eigen::VectorXd lo = cfg.line_min(l2), hi = cfg.line_max(l2);
    Eigen::Vector2d x = res.initial.x;
    for (const auto& r : res.records) {
        for (int i = 0; i < 2; ++i) {
            const auto ui = static_cast<std::size_t>(i);
            const double d = r.delta[ui];
            a.generator_limits = std::max({a.generator_limits, cfg.pt_min(i) * d - r.pt(i), r.pt(i) - cfg.pt_max(i) * d,
                                           (d == 0.0 || d == 1.0) ? 0.0 : 1.0});
            a.storage_limits = std::max({a.storage_limits, cfg.ps_min(i) - r.ps(i), r.ps(i) - cfg.ps_max(i)});
            a.res_limits = std::max({a.res_limits, -r.pr(i), r.pr(i) - profiles.w_r(r.k, i)});
        }
        const Eigen::Vector2d xn = cfg.As.cwiseProduct(x) + cfg.Bs.cwiseProduct(r.ps);
        a.storage_dynamics = std::max(a.storage_dynamics, (xn - r.x_after).cwiseAbs().maxCoeff());
        x = r.x_after;
        a.energy_bounds = std::max({a.energy_bounds, (cfg.x_min - x).maxCoeff(), (x - cfg.x_max).maxCoeff()});
        a.line_limits = std::max({a.line_limits, (lo - r.pe).maxCoeff(), (r.pe - hi).maxCoeff()});
        Eigen::VectorXd units(kUnitCount);
        units << r.pt(0), r.pt(1), cfg.storage_injection_sign * r.ps(0), cfg.storage_injection_sign * r.ps(1), r.pr(0),
            r.pr(1), -profiles.w_d(r.k);
        a.nodal_balance = std::max(a.nodal_balance, (r.pg - U * units).cwiseAbs().maxCoeff());
        a.nodal_balance = std::max(a.nodal_balance, (r.pg - injections_from_flows(grid, r.pe)).cwiseAbs().maxCoeff());
        // the edge angles are the first pairs for per-edge lifts; all-pairs lifts list node pairs
        const auto pairs = (r.phi.size() - 1) / 2 == static_cast<Eigen::Index>(grid.edge_count())
                               ? grid.edges()
                               : all_node_pairs(grid);
        Eigen::VectorXd theta(static_cast<Eigen::Index>(grid.edge_count()));
        const Eigen::VectorXd th_all = angles_from_lift(r.phi);
        for (std::size_t l = 0; l < grid.edge_count(); ++l) {
            const auto it = std::find(pairs.begin(), pairs.end(), grid.edges()[l]);
            theta(static_cast<Eigen::Index>(l)) = th_all(static_cast<Eigen::Index>(it - pairs.begin()));
        }
        a.line_physics = std::max(a.line_physics, (line_powers(coeffs, theta) - r.pe).cwiseAbs().maxCoeff());
    }
    return a;
}

// ---------------------------------------------------------------------------
// Result files
// ---------------------------------------------------------------------------

inline std::vector<std::string> results_columns(const Grid& grid)
{
    std::vector<std::string> cols{"k", "time_h", "conv1_power", "conv2_power", "bess1_power", "bess2_power",
                                  "res1_power", "res2_power", "load", "stored_energy_1", "stored_energy_2"};
    for (const auto& e : grid.edges()) {
        cols.push_back("pe_" + std::to_string(e.first) + std::to_string(e.second));
        cols.push_back("pe_" + std::to_string(e.second) + std::to_string(e.first));
    }
    for (const char* c : {"cost_sw", "cost_p", "cost_x", "cost_loss", "solve_time_s"}) cols.emplace_back(c);
    return cols;
}

/// Writes results.csv (one row per step), solve_times.csv and kpis.csv into `dir`.
inline void write_closed_loop(const ClosedLoopResult& res, const Grid& grid, const std::string& dir)
{
    auto open = [&](const std::string& name) {
        std::ofstream f(dir + "/" + name);
        if (!f) throw Error(ErrorKind::IoError, "cannot write " + dir + "/" + name);
        return f;
    };
    const auto cols = results_columns(grid);
    {
        std::ofstream f = open("results.csv");
        for (std::size_t i = 0; i < cols.size(); ++i) f << (i ? "," : "") << cols[i];
        f << "\n";
        for (const auto& r : res.records) {
            f << r.k;
            std::vector<double> v{r.time_h, r.pt(0), r.pt(1), r.ps(0), r.ps(1), r.pr(0), r.pr(1), r.pd, r.x_after(0),
                                  r.x_after(1)};
            for (Eigen::Index i = 0; i < r.pe.size(); ++i) v.push_back(r.pe(i));
            for (double c : {r.cost_sw, r.cost_p, r.cost_x, r.cost_loss, r.solve_time_s}) v.push_back(c);
            for (double d : v) f << "," << detail::format_double(d);
            f << "\n";
        }
    }
    {
        std::ofstream f = open("solve_times.csv");
        f << "solve_time_s\n";
        for (const auto& r : res.records) f << detail::format_double(r.solve_time_s) << "\n";
    }
    {
        std::ofstream f = open("kpis.csv");
        f << "variant,steps,mean_operating_cost,mean_loss_cost\n";
        f << to_string(res.variant) << "," << res.records.size() << ","
          << detail::format_double(res.kpis.mean_operating_cost) << "," << detail::format_double(res.kpis.mean_loss_cost)
          << "\n";
    }
}

/// Column-wise table read back from a results CSV.
struct ResultsTable {
    std::vector<std::string> columns;
    Eigen::MatrixXd values;  ///< one row per step
};

inline ResultsTable read_results(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoError, "cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorKind::SchemaError, "empty results file " + path);
    ResultsTable t;
    t.columns = detail::split_csv_line(line);
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != t.columns.size())
            throw Error(ErrorKind::SchemaError, path + ": row " + std::to_string(rows.size() + 2) + " has " +
                                                    std::to_string(cells.size()) + " fields");
        std::vector<double> r;
        for (std::size_t c = 0; c < cells.size(); ++c) r.push_back(detail::parse_double(cells[c], t.columns[c]));
        rows.push_back(std::move(r));
    }
    t.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.columns.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t c = 0; c < rows[i].size(); ++c)
            t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
    return t;
}

/// Largest absolute difference per column; the timing column is skipped.
inline std::vector<std::pair<std::string, double>> compare_results(const ResultsTable& a, const ResultsTable& b)
{
    if (a.columns != b.columns) throw Error(ErrorKind::DimensionMismatch, "result files have different columns");
    if (a.values.rows() != b.values.rows())
        throw Error(ErrorKind::DimensionMismatch, "result files have " + std::to_string(a.values.rows()) + " and " +
                                                      std::to_string(b.values.rows()) + " steps");
    std::vector<std::pair<std::string, double>> out;
    for (std::size_t c = 0; c < a.columns.size(); ++c) {
        if (a.columns[c] == "solve_time_s") continue;
        const auto ci = static_cast<Eigen::Index>(c);
        const double d = a.values.rows() ? (a.values.col(ci) - b.values.col(ci)).cwiseAbs().maxCoeff() : 0.0;
        out.emplace_back(a.columns[c], d);
    }
    return out;
}

}  // namespace ddpf
