#pragma once

// HTTP front end for interactive sessions.
//
//   GET    /datasets               manifests of the served datasets
//   POST   /sessions               {dataset, measure?} -> {session_id}
//   GET    /sessions/{id}/stream   chunked NDJSON result frames (replay, then live)
//   POST   /sessions/{id}/actions  NDJSON actions, applied in arrival order
//   DELETE /sessions/{id}
//
// A stream stays open until the client disconnects or the session is closed.
// Reconnecting to the same session replays the latest frame of every plot.

#include <httplib.h>

#include <atomic>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "binner.hpp"
#include "engine.hpp"
#include "session.hpp"

namespace progbin {

struct ServerOptions {
    SessionManagerOptions sessions;
    /// Budget for a full level-0 query over every plot.
    double latency_budget_ms = 100.0;
    /// Longest a stream waits for a frame before checking for shutdown.
    std::chrono::milliseconds poll_interval{200};
    /// Optional directory of static client assets, mounted at `/`.
    std::filesystem::path static_dir;
};

/// Manifest describing an in-memory dataset, as written by `write_manifest`.
inline Manifest describe(const Dataset& ds) {
    Manifest m{ds.name, kManifestVersion, ds.hierarchy.dims, ds.measures, {}};
    for (const auto level : ds.hierarchy.levels()) m.levels.push_back({level, ds.table(level).row_count(), level_file_name(level)});
    return m;
}

/// Load every built dataset under `dir`: either `dir` itself or its immediate subdirectories.
inline std::map<std::string, std::shared_ptr<Engine>> load_catalog(const std::filesystem::path& dir, EngineOptions options = {}) {
    std::vector<std::filesystem::path> roots;
    if (std::filesystem::exists(dir / "manifest.json")) {
        roots.push_back(dir);
    } else if (std::filesystem::is_directory(dir)) {
        for (const auto& e : std::filesystem::directory_iterator(dir))
            if (e.is_directory() && std::filesystem::exists(e.path() / "manifest.json")) roots.push_back(e.path());
        std::sort(roots.begin(), roots.end());
    }
    if (roots.empty()) throw io_error("no dataset manifest under '" + dir.string() + "'");
    std::map<std::string, std::shared_ptr<Engine>> out;
    for (const auto& r : roots) {
        auto ds = std::make_shared<const Dataset>(load_dataset(r));
        const auto name = ds->name;
        if (!out.emplace(name, std::make_shared<Engine>(std::move(ds), options)).second)
            throw config_error("duplicate dataset name '" + name + "'");
    }
    return out;
}

struct LatencyProbe {
    std::string dataset;
    double elapsed_ms = 0.0;
    bool within_budget = true;
};

/// Time a level-0 query of every plot under a filter on the first dimension.
inline LatencyProbe probe_latency(const std::string& name, Engine& engine, double budget_ms) {
    const auto& dims = engine.dataset().hierarchy.dims;
    std::vector<Frontier> frontiers;
    for (std::size_t d = 0; d < dims.size(); ++d) frontiers.push_back(Frontier::uniform(d, dims[d], Level(0)));
    std::vector<Predicate> preds;
    if (!dims.empty()) {
        const auto n = dims[0].bin_count(Level(0));
        preds.push_back(Predicate{0, Level(0), n / 4, std::max<std::uint64_t>(n / 4 + 1, n / 2)});
    }
    const auto r = engine.multi_query(preds, frontiers, 0);
    return {name, r.elapsed_ms, r.elapsed_ms <= budget_ms};
}

class Server {
  public:
    Server(std::map<std::string, std::shared_ptr<Engine>> engines, ServerOptions options = {})
        : manager_(engines, options.sessions), options_(std::move(options)) {
        for (const auto& [name, e] : engines) manifests_.push_back(describe(e->dataset()));
        engines_ = std::move(engines);
        routes();
    }

    ~Server() { stop(); }

    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Run the startup latency probe on every dataset, warning on stderr when over budget.
    std::vector<LatencyProbe> probe(std::ostream& log = std::cerr) {
        std::vector<LatencyProbe> out;
        for (const auto& [name, e] : engines_) {
            out.push_back(probe_latency(name, *e, options_.latency_budget_ms));
            if (!out.back().within_budget)
                log << "warning: level-0 query on '" << name << "' took " << out.back().elapsed_ms << " ms (budget "
                    << options_.latency_budget_ms << " ms)\n";
        }
        return out;
    }

    /// Bind an ephemeral port; returns it, or -1 on failure.
    int bind_to_any_port(const std::string& host = "127.0.0.1") { return http_.bind_to_any_port(host); }
    bool bind(const std::string& host, int port) { return http_.bind_to_port(host, port); }

    /// Serve until `stop`; blocks.
    bool listen_after_bind() { return http_.listen_after_bind(); }
    bool listen(const std::string& host, int port) { return http_.listen(host, port); }
    void wait_until_ready() const { http_.wait_until_ready(); }

    void stop() {
        stopping_ = true;
        if (http_.is_running()) http_.stop();
    }

    SessionManager& sessions() { return manager_; }

  private:
    static void send_json(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static void send_error(httplib::Response& res, int status, const std::string& message) {
        send_json(res, status, json{{"error", message}});
    }

    void routes() {
        http_.Get("/datasets", [this](const httplib::Request&, httplib::Response& res) { send_json(res, 200, manifests_); });

        http_.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
            json body;
            try {
                body = json::parse(req.body);
                if (!body.is_object()) throw query_error("body must be a JSON object");
            } catch (const std::exception& e) {
                return send_error(res, 400, std::string("malformed request: ") + e.what());
            }
            const auto dataset = body.value("dataset", std::string{});
            if (!engines_.count(dataset)) return send_error(res, 404, "unknown dataset '" + dataset + "'");
            try {
                std::size_t measure = 0;
                if (body.contains("measure")) {
                    const auto& m = body["measure"];
                    measure = m.is_string() ? engines_.at(dataset)->dataset().schema().measure_index(m.get<std::string>())
                                            : m.get<std::size_t>();
                }
                send_json(res, 201, json{{"session_id", manager_.create(dataset, measure)}});
            } catch (const std::exception& e) {
                send_error(res, 400, e.what());
            }
        });

        http_.Get(R"(/sessions/([0-9a-f]+)/stream)", [this](const httplib::Request& req, httplib::Response& res) {
            auto runner = manager_.find(req.matches[1]);
            if (!runner) return send_error(res, 404, "unknown session");
            auto sub = runner->subscribe();
            res.set_chunked_content_provider(
                "application/x-ndjson",
                [this, sub](std::size_t, httplib::DataSink& sink) {
                    while (!stopping_) {
                        if (auto f = sub->pop(options_.poll_interval)) {
                            const auto line = json(*f).dump() + "\n";
                            return sink.write(line.data(), line.size());
                        }
                        if (sub->closed()) {
                            sink.done();
                            return true;
                        }
                        if (!sink.is_writable()) return false;
                    }
                    return false;
                },
                [runner, sub](bool) { runner->unsubscribe(sub); });
        });

        http_.Post(R"(/sessions/([0-9a-f]+)/actions)", [this](const httplib::Request& req, httplib::Response& res) {
            auto runner = manager_.find(req.matches[1]);
            if (!runner) return send_error(res, 404, "unknown session");
            std::istringstream in(req.body);
            std::string line;
            std::size_t accepted = 0;
            json rejected = json::array();
            for (std::size_t n = 1; std::getline(in, line); ++n) {
                if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
                auto a = parse_action_or_invalid(line, runner->schema());
                if (a.kind == Action::Kind::invalid) rejected.push_back(json{{"line", n}, {"error", a.message}});
                else ++accepted;
                runner->submit(std::move(a));  // an invalid action still yields an error frame in order
            }
            send_json(res, rejected.empty() ? 202 : 400, json{{"accepted", accepted}, {"rejected", rejected}});
        });

        http_.Delete(R"(/sessions/([0-9a-f]+))", [this](const httplib::Request& req, httplib::Response& res) {
            if (!manager_.close(req.matches[1])) return send_error(res, 404, "unknown session");
            res.status = 204;
        });

        if (!options_.static_dir.empty() && !http_.set_mount_point("/", options_.static_dir.string()))
            throw io_error("cannot serve static assets from '" + options_.static_dir.string() + "'");
    }

    std::map<std::string, std::shared_ptr<Engine>> engines_;
    std::vector<Manifest> manifests_;
    SessionManager manager_;
    ServerOptions options_;
    httplib::Server http_;
    std::atomic<bool> stopping_{false};
};

}  // namespace progbin
