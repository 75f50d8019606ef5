// ibcl: run experiments, query and inspect knowledge bases, serve the HTTP API.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

#include <csignal>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ibcl/http_api.hpp"
#include "ibcl/service.hpp"

namespace {

httplib::Server* g_server = nullptr;

void stop_server(int) {
    if (g_server) g_server->stop();
}

int cmd_run(const std::string& config_path, bool quiet) {
    const ibcl::RunConfig cfg = ibcl::load_run_config(config_path);
    const ibcl::ExperimentResult res = ibcl::run_experiment(cfg.experiment, [&](const std::string& line) {
        if (!quiet) std::cerr << line << std::endl;
    });
    const ibcl::RunOutputs out = ibcl::write_run_outputs(res, cfg);
    std::cout << "knowledge base: " << out.kb.string() << "\n"
              << "metrics: " << out.metrics.string() << "\n"
              << "results: " << out.results.string() << "\n"
              << "task data: " << out.data_dir.string() << "\n";
    return 0;
}

int cmd_query(const std::string& kb_path, const std::optional<std::string>& data, const ibcl::QueryParams& q,
              std::size_t hdr_samples) {
    ibcl::ServiceState state =
        ibcl::make_service_state(kb_path, data ? std::optional<std::filesystem::path>(*data) : std::nullopt);
    state.hdr_samples = hdr_samples;
    nlohmann::json out = ibcl::query_to_json(ibcl::run_query(state, q), state.kb);
    out["training_runs"] = state.training_runs();
    std::cout << out.dump(2) << std::endl;
    return 0;
}

int cmd_serve(const std::string& kb_path, const std::optional<std::string>& data, const std::string& host, int port,
              double alpha, std::size_t hdr_samples) {
    ibcl::ServiceState state =
        ibcl::make_service_state(kb_path, data ? std::optional<std::filesystem::path>(*data) : std::nullopt);
    ibcl::require(alpha >= 0.0 && alpha < 1.0, "--alpha must lie in [0, 1)");
    state.default_alpha = alpha;
    state.hdr_samples = hdr_samples;

    httplib::Server server;
    ibcl::install_routes(server, state, std::cerr);
    const int bound = port == 0 ? server.bind_to_any_port(host) : (server.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw ibcl::RuntimeError("cannot listen on " + host + ":" + std::to_string(port) + " (port in use?)");
    g_server = &server;
    std::signal(SIGINT, stop_server);
    std::signal(SIGTERM, stop_server);
    std::cout << "listening on http://" << host << ":" << bound << std::endl;
    const bool ok = server.listen_after_bind();
    g_server = nullptr;
    if (!ok) throw ibcl::RuntimeError("server stopped unexpectedly");
    if (state.training_runs() != 0) throw ibcl::RuntimeError("training happened while serving");
    return 0;
}

int cmd_inspect(const std::string& kb_path, bool json) {
    const auto report = ibcl::inspect_report(ibcl::load_kb(kb_path));
    if (json)
        std::cout << report.dump(2) << std::endl;
    else
        std::cout << ibcl::inspect_text(report);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Imprecise Bayesian continual learning: knowledge bases of posterior extreme points, queried by "
                 "task preference"};
    app.require_subcommand(1);

    std::string config_path;
    bool quiet = false;
    auto* run = app.add_subcommand("run", "Run a continual-learning experiment from a JSON config");
    run->add_option("config", config_path, "Config file")->required();
    run->add_flag("-q,--quiet", quiet, "No progress log");

    std::string kb_path;
    std::optional<std::string> data_dir;
    std::string pref;
    ibcl::QueryParams q;
    std::size_t hdr_samples = ibcl::kDefaultHdrSamples;
    auto* query = app.add_subcommand("query", "Zero-shot answer for one preference");
    query->add_option("kb", kb_path, "Knowledge base file")->required();
    query->add_option("--data", data_dir, "Directory with task{i}_test.csv files");
    query->add_option("--pref", pref, "Task weights, comma separated, summing to 1")->required();
    query->add_option("--alpha", q.alpha, "HDR level")->capture_default_str();
    query->add_option("--samples", q.n_samples, "Models sampled from the HDR")->capture_default_str();
    query->add_option("--seed", q.seed, "Random seed")->capture_default_str();
    query->add_option("--hdr-samples", hdr_samples, "Draws used to estimate the HDR threshold")->capture_default_str();

    std::string host = "127.0.0.1";
    int port = 8080;
    double alpha = 0.01;
    auto* serve = app.add_subcommand("serve", "Serve the HTTP query API");
    serve->add_option("kb", kb_path, "Knowledge base file")->required();
    serve->add_option("data", data_dir, "Directory with task{i}_test.csv files");
    serve->add_option("--host", host)->capture_default_str();
    serve->add_option("--port", port, "0 picks a free port")->capture_default_str()->check(CLI::Range(0, 65535));
    serve->add_option("--alpha", alpha, "Default HDR level")->capture_default_str();
    serve->add_option("--hdr-samples", hdr_samples)->capture_default_str();

    bool json = false;
    auto* inspect = app.add_subcommand("inspect", "Summarize a knowledge base");
    inspect->add_option("kb", kb_path, "Knowledge base file")->required();
    inspect->add_flag("--json", json, "Machine-readable output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*run) return cmd_run(config_path, quiet);
        if (*query) {
            q.weights = ibcl::parse_weight_list(pref);
            return cmd_query(kb_path, data_dir, q, hdr_samples);
        }
        if (*serve) return cmd_serve(kb_path, data_dir, host, port, alpha, hdr_samples);
        if (*inspect) return cmd_inspect(kb_path, json);
    } catch (const ibcl::ValidationError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 2;
}
