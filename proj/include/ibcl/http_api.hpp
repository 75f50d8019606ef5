#pragma once

// HTTP/JSON routes over a read-only ServiceState.
//
//   GET  /api/status
//   POST /api/preference   {weights, alpha?, n_samples?, seed?}
//   GET  /api/projection?x=&y=&weights=&alpha=&n=&seed=
//   GET  /api/eu
//
// 400 for malformed input, 409 while the knowledge base has no tasks, 500
// with an opaque id otherwise (details go to the error log only).

#include <atomic>
#include <functional>
#include <mutex>
#include <ostream>
#include <random>
#include <string>

// Eigen must come first: httplib pulls in <resolv.h>, whose `_res` macro
// breaks Eigen's product kernels.
#include "error.hpp"
#include "service.hpp"

#include <httplib.h>
#include <json.hpp>

namespace ibcl {

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

inline double query_number(const httplib::Request& req, const std::string& key, double fallback) {
    if (!req.has_param(key)) return fallback;
    const std::string v = req.get_param_value(key);
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ValidationError(key + ": '" + v + "' is not a number");
    return out;
}

inline std::size_t query_count(const httplib::Request& req, const std::string& key, std::size_t fallback) {
    const double v = query_number(req, key, static_cast<double>(fallback));
    if (!(v >= 0.0) || v != std::floor(v) || v > 1e15) throw ValidationError(key + ": expected a non-negative integer");
    return static_cast<std::size_t>(v);
}

inline QueryParams preference_body(const std::string& body, double default_alpha) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error&) {
        throw ValidationError("request body is not valid JSON");
    }
    if (!doc.is_object()) throw ValidationError("request body must be a JSON object");
    QueryParams q;
    q.alpha = default_alpha;
    const auto it = doc.find("weights");
    if (it == doc.end() || !it->is_array()) throw ValidationError("weights: expected an array of numbers");
    for (const auto& x : *it) {
        if (!x.is_number()) throw ValidationError("weights: expected an array of numbers");
        q.weights.push_back(x.get<double>());
    }
    auto count = [&](const char* key, std::uint64_t fallback) -> std::uint64_t {
        if (!doc.contains(key)) return fallback;
        const auto& v = doc[key];
        if (!(v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0)))
            throw ValidationError(std::string(key) + ": expected a non-negative integer");
        return v.get<std::uint64_t>();
    };
    if (doc.contains("alpha")) {
        if (!doc["alpha"].is_number()) throw ValidationError("alpha: expected a number");
        q.alpha = doc["alpha"].get<double>();
    }
    q.n_samples = count("n_samples", q.n_samples);
    q.seed = count("seed", q.seed);
    return q;
}

} // namespace detail

/// Registers the API on `server`. `error_log` receives internal errors with
/// the id returned to the client.
inline void install_routes(httplib::Server& server, const ServiceState& state, std::ostream& error_log) {
    auto log_mutex = std::make_shared<std::mutex>();
    auto guarded = [&error_log, log_mutex](std::function<nlohmann::json(const httplib::Request&)> handler) {
        return [handler, &error_log, log_mutex](const httplib::Request& req, httplib::Response& res) {
            try {
                detail::send_json(res, 200, handler(req));
            } catch (const NoTasksError& e) {
                detail::send_json(res, 409, {{"error", e.what()}});
            } catch (const ValidationError& e) {
                detail::send_json(res, 400, {{"error", e.what()}});
            } catch (const std::exception& e) {
                static std::atomic<std::uint64_t> counter{0};
                std::ostringstream id;
                id << std::hex << mix_seed(std::random_device{}() ^ counter.fetch_add(1));
                {
                    std::lock_guard<std::mutex> lock(*log_mutex);
                    error_log << "error " << id.str() << " on " << req.method << ' ' << req.path << ": " << e.what()
                              << std::endl;
                }
                detail::send_json(res, 500, {{"error", "internal error"}, {"id", id.str()}});
            }
        };
    };

    // httplib's defaults add SO_REUSEPORT, which lets a second server share a
    // busy port instead of failing to bind.
    server.set_socket_options([](socket_t sock) {
        int yes = 1;
        ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof yes);
    });
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });

    server.Get("/api/status", guarded([&state](const httplib::Request&) { return status_report(state); }));

    server.Post("/api/preference", guarded([&state](const httplib::Request& req) {
                    const QueryParams q = detail::preference_body(req.body, state.default_alpha);
                    return query_to_json(run_query(state, q), state.kb);
                }));

    server.Get("/api/projection", guarded([&state](const httplib::Request& req) {
                   if (state.kb.num_tasks() == 0) throw NoTasksError();
                   ProjectionParams p;
                   if (!req.has_param("weights")) throw ValidationError("weights: missing query parameter");
                   p.weights = parse_weight_list(req.get_param_value("weights"));
                   p.x = detail::query_count(req, "x", 0);
                   p.y = detail::query_count(req, "y", 1);
                   p.alpha = detail::query_number(req, "alpha", state.default_alpha);
                   p.n = detail::query_count(req, "n", p.n);
                   p.seed = detail::query_count(req, "seed", 0);
                   return projection(state, p);
               }));

    server.Get("/api/eu", guarded([&state](const httplib::Request&) { return eu_report(state.kb); }));
}

} // namespace ibcl
