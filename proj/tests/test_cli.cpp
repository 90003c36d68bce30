#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include <gtest/gtest.h>

#include "ddpf/microgrid.hpp"

using namespace ddpf;

namespace {

struct RunResult {
    int code = -1;
    std::string output;
};

RunResult run(const std::string& args)
{
    const std::string cmd = std::string(DDPF_CLI_PATH) + " " + args + " 2>&1";
    RunResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe)) r.output += buf.data();
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string work_dir()
{
    const auto d = std::filesystem::temp_directory_path() / "ddpf_cli_tests";
    std::filesystem::create_directories(d);
    return d.string();
}

std::map<std::string, double> read_solution(const std::string& path)
{
    std::map<std::string, double> out;
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        const auto c = line.find(',');
        out[line.substr(0, c)] = std::stod(line.substr(c + 1));
    }
    return out;
}

const std::string kInjections = "--injections 2:0.1,3:-0.3,4:0.2,5:-0.5";
const std::string kConfig = std::string(DDPF_DATA_DIR) + "/microgrid.json";

}  // namespace

TEST(Cli, HelpDocumentsExitCodes)
{
    const auto r = run("--help");
    EXPECT_EQ(r.code, 0);
    for (const char* s : {"2  infeasible", "3  numerical", "4  schema", "5  dimension"})
        EXPECT_NE(r.output.find(s), std::string::npos) << s;
}

TEST(Cli, GenerateData)
{
    const auto dir = work_dir();
    auto r = run("generate-data --samples 9 --out " + dir + "/t9.csv");
    EXPECT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("PE: rank 9/9"), std::string::npos);
    EXPECT_EQ(import_trajectory(dir + "/t9.csv").samples(), 9);

    r = run("generate-data --samples 8 --out " + dir + "/t8.csv");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("ExcitationFailed"), std::string::npos);

    r = run("generate-data --samples 21 --mode all-pairs --out " + dir + "/t21.csv");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.output.find("PE: rank 21/21"), std::string::npos);
}

TEST(Cli, SolveOpfVariants)
{
    const auto dir = work_dir();
    ASSERT_EQ(run("generate-data --samples 9 --seed 3 --out " + dir + "/d9.csv").code, 0);
    ASSERT_EQ(run("generate-data --samples 21 --seed 3 --mode all-pairs --out " + dir + "/d21.csv").code, 0);

    auto r = run("solve-opf --variant reference " + kInjections + " --out " + dir + "/ref.csv");
    ASSERT_EQ(r.code, 0) << r.output;
    r = run("solve-opf --variant dd-convex --beta 1 --data " + dir + "/d9.csv " + kInjections + " --out " + dir +
            "/cvx.csv");
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_NE(r.output.find("max tightness residual"), std::string::npos);
    r = run("solve-opf --variant dd-generalized --data " + dir + "/d21.csv " + kInjections + " --out " + dir +
            "/gen.csv");
    ASSERT_EQ(r.code, 0) << r.output;

    const auto ref = read_solution(dir + "/ref.csv");
    const auto cvx = read_solution(dir + "/cvx.csv");
    const auto gen = read_solution(dir + "/gen.csv");
    EXPECT_LE(cvx.at("max_tightness_residual"), 1e-6);
    for (const auto& [name, v] : ref)
        if (name.rfind("pe_", 0) == 0 || name.rfind("pg_", 0) == 0) {
            EXPECT_NEAR(cvx.at(name), v, 1e-4) << name;
            EXPECT_NEAR(gen.at(name), v, 1e-4) << name;
        }
    EXPECT_EQ(cvx.count("alpha_8"), 1u);
    EXPECT_EQ(gen.count("alpha_20"), 1u);
}

TEST(Cli, GeneralizedWithPerEdgeDataIsADimensionError)
{
    const auto dir = work_dir();
    ASSERT_EQ(run("generate-data --samples 9 --out " + dir + "/e9.csv").code, 0);
    const auto r = run("solve-opf --variant dd-generalized --data " + dir + "/e9.csv --out " + dir + "/x.csv");
    EXPECT_EQ(r.code, 5) << r.output;
}

TEST(Cli, InfeasibleOpfExitCode)
{
    const auto r = run("solve-opf --variant reference --injections 2:40,3:40,4:40,5:40 --out " + work_dir() + "/inf.csv");
    EXPECT_EQ(r.code, 2) << r.output;
}

TEST(Cli, RunMpcSingleTrivialStep)
{
    const auto dir = work_dir();
    Profiles p;
    p.w_r = Eigen::MatrixXd::Zero(8, 2);
    p.w_d = Eigen::VectorXd::Zero(8);
    write_profiles(p, dir + "/zero.csv");
    const auto r = run("run-mpc --config " + kConfig + " --profiles " + dir + "/zero.csv --steps 1 --out-dir " + dir +
                       "/mpc1");
    ASSERT_EQ(r.code, 0) << r.output;
    for (const char* f : {"results.csv", "solve_times.csv", "kpis.csv"})
        EXPECT_TRUE(std::filesystem::exists(dir + "/mpc1/" + f)) << f;
    const auto t = read_results(dir + "/mpc1/results.csv");
    ASSERT_EQ(t.values.rows(), 1);
    auto col = [&](const std::string& n) {
        return t.values(0, std::find(t.columns.begin(), t.columns.end(), n) - t.columns.begin());
    };
    std::ifstream kp(dir + "/mpc1/kpis.csv");
    std::string header, row;
    std::getline(kp, header);
    std::getline(kp, row);
    const auto cells = detail::split_csv_line(row);
    ASSERT_EQ(cells.size(), 4u);
    EXPECT_EQ(cells[0], "reference");
    EXPECT_DOUBLE_EQ(std::stod(cells[2]), col("cost_sw") + col("cost_p"));
    EXPECT_DOUBLE_EQ(std::stod(cells[3]), col("cost_loss"));
}

TEST(Cli, MissingConfigKeyIsNamed)
{
    const auto dir = work_dir();
    auto j = config_to_json(load_config(kConfig));
    j.erase("beta");
    std::ofstream(dir + "/nobeta.json") << j.dump();
    const auto r = run("run-mpc --config " + dir + "/nobeta.json --steps 1 --out-dir " + dir + "/nb");
    EXPECT_EQ(r.code, 4);
    EXPECT_NE(r.output.find("'beta'"), std::string::npos) << r.output;
}

TEST(Cli, CompareRuns)
{
    const auto dir = work_dir();
    ASSERT_EQ(run("run-mpc --config " + kConfig + " --profiles seed:3 --steps 2 --out-dir " + dir + "/a").code, 0);
    ASSERT_EQ(run("run-mpc --config " + kConfig + " --variant dd-convex --profiles seed:3 --steps 2 --out-dir " + dir +
                  "/b")
                  .code,
              0);
    ASSERT_EQ(run("run-mpc --config " + kConfig + " --profiles seed:3 --steps 1 --out-dir " + dir + "/c").code, 0);

    auto r = run("compare --runs " + dir + "/a " + dir + "/a");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.output.find("0.000e+00"), std::string::npos);
    EXPECT_EQ(r.output.find("e-"), std::string::npos) << "self comparison must be exact";

    r = run("compare --runs " + dir + "/a " + dir + "/b --tol 1e-4");
    EXPECT_EQ(r.code, 0) << r.output;

    r = run("compare --runs " + dir + "/a " + dir + "/c");
    EXPECT_NE(r.code, 0);
}
