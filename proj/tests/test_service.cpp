#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <sstream>
#include <thread>

#include <sys/wait.h>
#include <unistd.h>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "ibcl/http_api.hpp"
#include "ibcl/service.hpp"

using namespace ibcl;
namespace fs = std::filesystem;

namespace {

nlohmann::json valid_config(const fs::path& out_dir) {
    auto doc = nlohmann::json::parse(R"({
        "stream": {"type": "synthetic", "kind": "similar", "num_tasks": 2, "feature_dim": 2, "n_per_task": 200},
        "hidden": 4,
        "priors": {"m": 2, "stds": [2.0, 3.0]},
        "train": {"lr": 0.05, "batch": 32, "epochs": 20, "mc_samples": 2},
        "d": 0,
        "alpha": 0.05,
        "K": 2,
        "models_per_preference": 10,
        "hdr_samples": 1000,
        "seed": 3
    })");
    doc["out_dir"] = out_dir.string();
    return doc;
}

// One small experiment shared by every test: knowledge base and test data on
// disk plus the matching in-memory service state.
class ServiceFixture : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        root_ = fs::temp_directory_path() / ("ibcl_service_" + std::to_string(::getpid()));
        fs::create_directories(root_);
        const RunConfig cfg = parse_run_config(valid_config(root_ / "run"));
        const ExperimentResult res = run_experiment(cfg.experiment);
        outputs_ = write_run_outputs(res, cfg);
        state_ = new ServiceState(make_service_state(outputs_.kb, outputs_.data_dir));
        state_->hdr_samples = 2000;
        const KnowledgeBase empty(res.kb.arch(), fixture::isotropic_priors(res.kb.arch(), {1.0, 2.0}));
        save_kb(empty, (root_ / "empty.json").string());
    }

    static void TearDownTestSuite() {
        delete state_;
        fs::remove_all(root_);
    }

    static inline fs::path root_;
    static inline RunOutputs outputs_;
    static inline ServiceState* state_ = nullptr;
};

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

CliResult run_cli(const std::string& args) {
    static int n = 0;
    const fs::path base = fs::temp_directory_path() / ("ibcl_cli_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
    const std::string cmd = std::string("\"") + IBCL_CLI_PATH + "\" " + args + " > \"" + base.string() + ".out\" 2> \"" +
                            base.string() + ".err\"";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(base.string() + ".out");
    r.err = slurp(base.string() + ".err");
    fs::remove(base.string() + ".out");
    fs::remove(base.string() + ".err");
    return r;
}

// In-process server on a free port for the duration of a test.
class LiveServer {
public:
    explicit LiveServer(const ServiceState& state) {
        install_routes(server_, state, log_);
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~LiveServer() {
        server_.stop();
        thread_.join();
    }
    httplib::Client client() const { return httplib::Client("127.0.0.1", port_); }
    int port() const { return port_; }
    std::string log() const { return log_.str(); }

private:
    httplib::Server server_;
    std::ostringstream log_;
    int port_ = 0;
    std::thread thread_;
};

std::set<std::string> keys(const nlohmann::json& j) {
    std::set<std::string> out;
    for (const auto& [k, v] : j.items()) out.insert(k);
    return out;
}

} // namespace

// ----------------------------------------------------------------- config

TEST(RunConfigParsing, ValidConfig) {
    const RunConfig cfg = parse_run_config(valid_config("out"));
    EXPECT_EQ(cfg.out_dir, fs::path("out"));
    EXPECT_EQ(cfg.experiment.prior_stds, (std::vector<double>{2.0, 3.0}));
    EXPECT_EQ(cfg.experiment.train.learning_rate, 0.05);
    EXPECT_EQ(cfg.experiment.train.mc_samples, 2u);
    EXPECT_EQ(cfg.experiment.d, 0.0);
    EXPECT_EQ(cfg.experiment.hidden_dim, 4u);
    const auto& spec = std::get<SyntheticStreamSpec>(cfg.experiment.stream);
    EXPECT_EQ(spec.num_tasks, 2u);
    EXPECT_EQ(spec.seed, 3u);
}

TEST(RunConfigParsing, AutoThresholdAndDefaults) {
    auto doc = valid_config("out");
    doc["d"] = "auto";
    doc.erase("hidden");
    doc.erase("hdr_samples");
    const RunConfig cfg = parse_run_config(doc);
    EXPECT_FALSE(cfg.experiment.d.has_value());
    EXPECT_EQ(cfg.experiment.hidden_dim, 64u);
    EXPECT_EQ(cfg.experiment.hdr_samples, kDefaultHdrSamples);
}

TEST(RunConfigParsing, ListsEveryMissingField) {
    auto doc = valid_config("out");
    doc["train"].erase("lr");
    doc.erase("alpha");
    doc.erase("out_dir");
    doc["stream"].erase("n_per_task");
    try {
        parse_run_config(doc);
        FAIL() << "expected a config error";
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("4 problem(s)"), std::string::npos) << msg;
        for (const char* f : {"train.lr", "alpha", "out_dir", "stream.n_per_task"})
            EXPECT_NE(msg.find(std::string("missing field: ") + f), std::string::npos) << msg;
    }
}

TEST(RunConfigParsing, RejectsBadValues) {
    auto doc = valid_config("out");
    doc["d"] = "sometimes";
    EXPECT_THROW(parse_run_config(doc), ValidationError);
    doc = valid_config("out");
    doc["priors"]["m"] = 3;
    EXPECT_THROW(parse_run_config(doc), ValidationError);
    doc = valid_config("out");
    doc["K"] = -1;
    EXPECT_THROW(parse_run_config(doc), ValidationError);
    doc = valid_config("out");
    doc["alpha"] = 1.0;
    EXPECT_THROW(parse_run_config(doc), ValidationError);
    doc = valid_config("out");
    doc["stream"]["kind"] = "noisy";
    EXPECT_THROW(parse_run_config(doc), ValidationError);
    doc = valid_config("out");
    doc["stream"] = {{"type", "features"}, {"num_tasks", 2}};
    EXPECT_THROW(parse_run_config(doc), ValidationError);
}

TEST(WeightList, Parsing) {
    EXPECT_EQ(parse_weight_list("0.25,0.75"), (std::vector<double>{0.25, 0.75}));
    EXPECT_EQ(parse_weight_list(" 1 "), std::vector<double>{1.0});
    EXPECT_THROW(parse_weight_list("0.5,abc"), ValidationError);
    EXPECT_THROW(parse_weight_list("0.5x,0.5"), ValidationError);
    EXPECT_THROW(parse_weight_list(""), ValidationError);
}

// ----------------------------------------------------------------- queries

TEST_F(ServiceFixture, RunWritesOutputs) {
    EXPECT_TRUE(fs::exists(outputs_.kb));
    EXPECT_TRUE(fs::exists(outputs_.metrics));
    EXPECT_TRUE(fs::exists(outputs_.results));
    EXPECT_TRUE(fs::exists(outputs_.data_dir / "task2_test.csv"));
    const auto results = nlohmann::json::parse(slurp(outputs_.results));
    EXPECT_EQ(results["training_runs"], 4);
    EXPECT_EQ(results["metrics"]["max"].size(), 2u);
    EXPECT_TRUE(results["metrics"]["max"][0]["bwt"].is_null());
    const std::string csv = slurp(outputs_.metrics);
    EXPECT_EQ(csv.rfind("variant,task_index,avg_acc,peak_acc,bwt\n", 0), 0u);
}

TEST_F(ServiceFixture, QueryIsDeterministicAndZeroShot) {
    const auto before = training_counter().load();
    const QueryParams q{{0.3, 0.7}, 0.05, 30, 11};
    const auto a = query_to_json(run_query(*state_, q), state_->kb);
    const auto b = query_to_json(run_query(*state_, q), state_->kb);
    EXPECT_EQ(a, b);
    EXPECT_EQ(training_counter().load(), before);
    EXPECT_EQ(a["per_task"].size(), 2u);
    EXPECT_EQ(a["n_samples"], 30);
}

TEST_F(ServiceFixture, QueryEdgeCases) {
    const auto zero = query_to_json(run_query(*state_, {{0.5, 0.5}, 0.0, 20, 1}), state_->kb);
    EXPECT_EQ(zero["acceptance_rate"], 1.0);
    EXPECT_TRUE(zero["log_threshold"].is_null());

    const auto first = query_to_json(run_query(*state_, {{1.0, 0.0}, 0.05, 20, 1}), state_->kb);
    for (const auto& c : first["components"]) EXPECT_EQ(c["task"], 1);
    for (std::size_t i = 2; i < 4; ++i) EXPECT_EQ(first["beta"][i], 0.0);

    EXPECT_THROW(run_query(*state_, {{0.5, 0.6}, 0.05, 20, 1}), ValidationError);
    EXPECT_THROW(run_query(*state_, {{1.0}, 0.05, 20, 1}), ValidationError);
    EXPECT_THROW(run_query(*state_, {{0.5, 0.5}, 1.0, 20, 1}), ValidationError);
    EXPECT_THROW(run_query(*state_, {{0.5, 0.5}, 0.05, 0, 1}), ValidationError);
    // Within the 1e-6 input tolerance, no renormalization.
    EXPECT_NO_THROW(run_query(*state_, {{0.5, 0.5 + 5e-7}, 0.05, 5, 1}));
}

TEST_F(ServiceFixture, InspectReport) {
    const auto rep = inspect_report(state_->kb);
    EXPECT_EQ(rep["num_tasks"], 2);
    EXPECT_EQ(rep["tasks"][0]["stored"], 2);
    EXPECT_EQ(rep["tasks"][0]["substituted"], 0);
    EXPECT_DOUBLE_EQ(rep["tasks"][1]["eu"].get<double>(), epistemic_uncertainty(state_->kb, 2));
    EXPECT_DOUBLE_EQ(rep["fgcs_diameter"].get<double>(), fgcs_diameter(state_->kb));
    EXPECT_NE(inspect_text(rep).find("task 1: stored 2, substituted 0"), std::string::npos);
    const auto single = inspect_report(fixture::scalar_kb({{1.0}}));
    EXPECT_EQ(single["fgcs_diameter"], 0.0);
    EXPECT_TRUE(single["suggested_threshold"].is_null());
}

// -------------------------------------------------------------------- HTTP

TEST_F(ServiceFixture, HttpStatusAndEu) {
    LiveServer srv(*state_);
    auto cli = srv.client();
    auto res = cli.Get("/api/status");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    const auto status = nlohmann::json::parse(res->body);
    EXPECT_EQ(status["num_tasks"], 2);
    EXPECT_EQ(status["m"], 2);
    EXPECT_EQ(status["buffer_history"], state_->kb.buffer_history());
    EXPECT_EQ(status["arch"]["output"], 1);
    EXPECT_EQ(status["training_runs"], 0);
    EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");

    res = cli.Get("/api/eu");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    const auto eu = nlohmann::json::parse(res->body);
    EXPECT_EQ(eu["per_task_eu"].size(), 2u);
    double s = 0;
    for (double w : eu["suggested_weights"]) s += w;
    EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST_F(ServiceFixture, HttpPreference) {
    LiveServer srv(*state_);
    auto cli = srv.client();
    const auto before = training_counter().load();
    auto res = cli.Post("/api/preference", R"({"weights":[0.4,0.6],"alpha":0.05,"n_samples":20,"seed":5})",
                        "application/json");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200) << res->body;
    const auto a = nlohmann::json::parse(res->body);
    EXPECT_EQ(a["beta"].size(), 4u);
    EXPECT_TRUE(a["log_threshold"].is_number());
    EXPECT_EQ(a["per_task"].size(), 2u);
    for (const char* k : {"task", "acc_max", "acc_mean", "acc_min"}) EXPECT_TRUE(a["per_task"][0].contains(k));

    res = cli.Post("/api/preference", R"({"weights":[0.9,0.1],"alpha":0.0,"n_samples":5,"seed":1})", "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(keys(nlohmann::json::parse(res->body)), keys(a));
    EXPECT_EQ(training_counter().load(), before);
}

TEST_F(ServiceFixture, HttpErrors) {
    LiveServer srv(*state_);
    auto cli = srv.client();
    auto post = [&](const std::string& body) { return cli.Post("/api/preference", body, "application/json"); };
    EXPECT_EQ(post(R"({"weights":[0.5,0.6]})")->status, 400);
    EXPECT_EQ(post(R"({"weights":[1.0]})")->status, 400);
    EXPECT_EQ(post(R"({"weights":"0.5,0.5"})")->status, 400);
    EXPECT_EQ(post(R"({"weights":[0.5,0.5],"n_samples":-3})")->status, 400);
    EXPECT_EQ(post("{not json")->status, 400);
    const auto bad = post(R"({"weights":[0.5,0.6]})");
    EXPECT_TRUE(nlohmann::json::parse(bad->body).contains("error"));
    EXPECT_EQ(cli.Get("/api/projection?weights=0.5,0.5&x=999")->status, 400);
    EXPECT_EQ(cli.Get("/api/projection?x=0")->status, 400);
    EXPECT_EQ(cli.Get("/api/projection?weights=0.5,0.5&alpha=abc")->status, 400);
    EXPECT_EQ(cli.Get("/api/nothing")->status, 404);
}

TEST_F(ServiceFixture, HttpNoTasksIs409) {
    ServiceState empty = make_service_state(root_ / "empty.json", std::nullopt);
    LiveServer srv(empty);
    auto cli = srv.client();
    EXPECT_EQ(cli.Get("/api/status")->status, 200);
    EXPECT_EQ(cli.Post("/api/preference", R"({"weights":[1.0]})", "application/json")->status, 409);
    EXPECT_EQ(cli.Get("/api/eu")->status, 409);
    EXPECT_EQ(cli.Get("/api/projection?weights=1")->status, 409);
}

TEST_F(ServiceFixture, HttpProjection) {
    LiveServer srv(*state_);
    auto cli = srv.client();
    auto res = cli.Get("/api/projection?x=0&y=3&weights=0.5,0.5&alpha=0&n=200&seed=2");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200) << res->body;
    auto p = nlohmann::json::parse(res->body);
    ASSERT_EQ(p["points"].size(), 200u);
    for (const auto& pt : p["points"]) EXPECT_TRUE(pt["inside"].get<bool>());
    EXPECT_EQ(p["inside_fraction"], 1.0);

    double last = 1.0;
    for (double alpha : {0.05, 0.25, 0.6}) {
        res = cli.Get(("/api/projection?weights=0.5,0.5&n=2000&seed=2&alpha=" + std::to_string(alpha)).c_str());
        const double frac = nlohmann::json::parse(res->body)["inside_fraction"];
        EXPECT_LE(frac, last);
        EXPECT_NEAR(frac, 1.0 - alpha, 0.05);
        last = frac;
    }
}

TEST_F(ServiceFixture, HttpConcurrentRequestsAreIndependent) {
    LiveServer srv(*state_);
    auto ask = [&](int seed) {
        auto cli = srv.client();
        auto res = cli.Post("/api/preference",
                            R"({"weights":[0.5,0.5],"alpha":0.05,"n_samples":50,"seed":)" + std::to_string(seed) + "}",
                            "application/json");
        return std::make_pair(res ? res->status : -1, res ? res->body : std::string());
    };
    auto f1 = std::async(std::launch::async, ask, 1);
    auto f2 = std::async(std::launch::async, ask, 2);
    const auto r1 = f1.get(), r2 = f2.get();
    EXPECT_EQ(r1.first, 200);
    EXPECT_EQ(r2.first, 200);
    EXPECT_NE(r1.second, r2.second);
    EXPECT_EQ(ask(1).second, r1.second);
}

// --------------------------------------------------------------------- CLI

TEST_F(ServiceFixture, CliRunWritesFiles) {
    const fs::path cfg_path = root_ / "cli_config.json";
    std::ofstream(cfg_path) << valid_config(root_ / "cli_run").dump();
    const CliResult r = run_cli("run \"" + cfg_path.string() + "\"");
    EXPECT_EQ(r.code, 0) << r.err;
    for (const char* f : {"kb.json", "metrics.csv", "results.json"}) EXPECT_TRUE(fs::exists(root_ / "cli_run" / f)) << f;
    EXPECT_NE(r.err.find("task 2: stored"), std::string::npos);
}

TEST_F(ServiceFixture, CliRunLogsAutoThreshold) {
    auto doc = valid_config(root_ / "cli_auto");
    doc["d"] = "auto";
    const fs::path cfg_path = root_ / "cli_auto.json";
    std::ofstream(cfg_path) << doc.dump();
    const CliResult r = run_cli("run \"" + cfg_path.string() + "\"");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto results = nlohmann::json::parse(slurp(root_ / "cli_auto" / "results.json"));
    const KnowledgeBase kb = load_kb((root_ / "cli_auto" / "kb.json").string());
    const KnowledgeBase first = KnowledgeBase::assemble(kb.arch(), kb.m(), {}, {kb.task(1)}, {kb.buffer_history()[0]});
    EXPECT_DOUBLE_EQ(results["auto_threshold"].get<double>(), suggest_threshold(first));
    EXPECT_NE(r.err.find("auto threshold d = "), std::string::npos);
}

TEST_F(ServiceFixture, CliRunMissingFieldExitsTwo) {
    auto doc = valid_config(root_ / "never");
    doc.erase("models_per_preference");
    doc["priors"].erase("stds");
    const fs::path cfg_path = root_ / "bad_config.json";
    std::ofstream(cfg_path) << doc.dump();
    const CliResult r = run_cli("run \"" + cfg_path.string() + "\"");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("missing field: models_per_preference"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("missing field: priors.stds"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(root_ / "never"));
    EXPECT_EQ(run_cli("run \"" + (root_ / "nope.json").string() + "\"").code, 2);
}

TEST_F(ServiceFixture, CliQuery) {
    const std::string base = "query \"" + outputs_.kb.string() + "\" --data \"" + outputs_.data_dir.string() + "\" ";
    const CliResult a = run_cli(base + "--pref 0.25,0.75 --alpha 0.05 --samples 20 --seed 4");
    const CliResult b = run_cli(base + "--pref 0.25,0.75 --alpha 0.05 --samples 20 --seed 4");
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, b.out);
    const auto j = nlohmann::json::parse(a.out);
    EXPECT_EQ(j["training_runs"], 0);
    EXPECT_EQ(j["per_task"].size(), 2u);
    const auto zero = nlohmann::json::parse(run_cli(base + "--pref 1,0 --alpha 0 --samples 10").out);
    EXPECT_EQ(zero["acceptance_rate"], 1.0);
    for (const auto& c : zero["components"]) EXPECT_EQ(c["task"], 1);

    EXPECT_EQ(run_cli(base + "--pref 0.5,0.6").code, 2);
    EXPECT_EQ(run_cli(base + "--pref 1").code, 2);
    EXPECT_EQ(run_cli(base + "--pref 0.5,x").code, 2);
    EXPECT_EQ(run_cli(base).code, 2);
}

TEST_F(ServiceFixture, CliInspect) {
    const CliResult r = run_cli("inspect \"" + outputs_.kb.string() + "\"");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("task 1: stored 2, substituted 0"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("FGCS diameter"), std::string::npos);
    const auto j = nlohmann::json::parse(run_cli("inspect --json \"" + outputs_.kb.string() + "\"").out);
    EXPECT_EQ(j["num_tasks"], 2);

    const fs::path broken = root_ / "broken.json";
    std::ofstream(broken) << R"({"version": 1, "arch": )";
    EXPECT_EQ(run_cli("inspect \"" + broken.string() + "\"").code, 2);
    EXPECT_EQ(run_cli("frobnicate").code, 2);
    EXPECT_EQ(run_cli("").code, 2);
}

TEST_F(ServiceFixture, CliServePortInUseExitsOne) {
    LiveServer blocker(*state_);
    const CliResult r = run_cli("serve \"" + outputs_.kb.string() + "\" --port " + std::to_string(blocker.port()));
    EXPECT_EQ(r.code, 1) << r.err;
}

TEST_F(ServiceFixture, CliServeAnswersAndStopsOnSigterm) {
    int out_pipe[2];
    ASSERT_EQ(::pipe(out_pipe), 0);
    const pid_t pid = ::fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
        ::dup2(out_pipe[1], STDOUT_FILENO);
        ::close(out_pipe[0]);
        const std::string kb = outputs_.kb.string(), data = outputs_.data_dir.string();
        ::execl(IBCL_CLI_PATH, IBCL_CLI_PATH, "serve", kb.c_str(), data.c_str(), "--port", "0", "--hdr-samples", "1000",
                static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(out_pipe[1]);
    FILE* out = ::fdopen(out_pipe[0], "r");
    char line[256] = {0};
    ASSERT_NE(std::fgets(line, sizeof line, out), nullptr);
    const std::string text(line);
    const auto colon = text.rfind(':');
    ASSERT_NE(colon, std::string::npos) << text;
    const int port = std::stoi(text.substr(colon + 1));

    httplib::Client cli("127.0.0.1", port);
    auto res = cli.Post("/api/preference", R"({"weights":[0.5,0.5],"n_samples":10})", "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    res = cli.Get("/api/status");
    ASSERT_TRUE(res);
    EXPECT_EQ(nlohmann::json::parse(res->body)["training_runs"], 0);

    ::kill(pid, SIGTERM);
    int status = 0;
    ::waitpid(pid, &status, 0);
    std::fclose(out);
    EXPECT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), 0);
}
