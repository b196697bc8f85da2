// progbin: build binned datasets, generate synthetic data, serve sessions, run benchmarks.

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <iomanip>
#include <iostream>
#include <thread>

#include "progbin/progbin.hpp"

using namespace progbin;

namespace {

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

json read_json_file(const std::string& path) {
    try {
        return json::parse(detail::read_file(path));
    } catch (const json::exception& e) {
        throw ingest_error("invalid JSON in '" + path + "': " + e.what());
    }
}

/// "32", "[32,16]" or {"x": 32, "y": 16}.
std::vector<std::uint32_t> parse_level0_bins(const std::string& text, const Schema& schema) {
    const auto j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw config_error("--level0-bins: expected a number or JSON, got '" + text + "'");
    if (j.is_number_unsigned()) return {j.get<std::uint32_t>()};
    if (j.is_array()) return j.get<std::vector<std::uint32_t>>();
    if (j.is_object()) {
        std::vector<std::uint32_t> out;
        for (const auto& d : schema.dims) {
            if (!j.contains(d.name)) throw config_error("--level0-bins: no entry for '" + d.name + "'");
            out.push_back(j.at(d.name).get<std::uint32_t>());
        }
        return out;
    }
    throw config_error("--level0-bins: expected a positive integer, an array or an object");
}

/// A dataset directory, or a catalog directory holding exactly one dataset unless `name` picks one.
std::shared_ptr<const Dataset> load_one(const std::string& dir, const std::string& name) {
    const auto cat = load_catalog(dir, EngineOptions{1, 1});
    if (!name.empty()) {
        auto it = cat.find(name);
        if (it == cat.end()) throw query_error("no dataset '" + name + "' under '" + dir + "'");
        return it->second->dataset_ptr();
    }
    if (cat.size() != 1) throw config_error("'" + dir + "' holds several datasets; pick one with --dataset");
    return cat.begin()->second->dataset_ptr();
}

std::string fmt(const std::optional<double>& v) {
    if (!v) return "-";
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << *v;
    return s.str();
}

std::string sci(double v) {
    std::ostringstream s;
    s << std::scientific << std::setprecision(2) << v;
    return s.str();
}

void print_report(const bench::BenchReport& r) {
    std::cout << "dataset " << r.dataset << ", " << r.runs << " runs, " << r.queries << " queries, " << r.filter_states
              << " filter states\n";
    std::cout << "level      rct      rnr  re_mean re_median      af      rec  sparsity  sp_ad   sp_igp  sp_avg\n";
    for (const auto& row : r.levels) {
        std::cout << std::left << std::setw(6) << row.level.to_string() << std::right << ' ' << std::setw(8) << fmt(row.rct)
                  << ' ' << std::setw(8) << fmt(row.rnr) << ' ' << std::setw(8) << fmt(row.re_mean) << ' ' << std::setw(8)
                  << fmt(row.re_median) << ' ' << std::setw(8) << fmt(row.af) << ' ' << std::setw(8) << fmt(row.rec) << ' '
                  << std::setw(9) << sci(row.sparsity) << ' ' << std::setw(7) << fmt(row.spearman.ad_only) << ' '
                  << std::setw(7) << fmt(row.spearman.igp_only) << ' ' << std::setw(7) << fmt(row.spearman.average_rank) << '\n';
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Progressive binned analytics: build, synth, serve, bench"};
    app.require_subcommand(1);

    // build
    std::string input, schema_path, level0 = "32", out_dir;
    int max_level = 4;
    auto* build = app.add_subcommand("build", "Bin a CSV into a factor-2 level hierarchy");
    build->add_option("--input", input, "Raw CSV")->required()->check(CLI::ExistingFile);
    build->add_option("--schema", schema_path, "Schema JSON")->required()->check(CLI::ExistingFile);
    build->add_option("--level0-bins", level0, "Level-0 bins: a number, a JSON array or a {dim: n} object");
    build->add_option("--max-level", max_level, "Finest binned level")->check(CLI::NonNegativeNumber);
    build->add_option("--out", out_dir, "Output directory")->required();

    // synth
    std::string spec_path, synth_out;
    std::size_t rows = 1000000;
    std::uint64_t seed = 1;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic CSV");
    synth->add_option("--spec", spec_path, "Synthetic spec JSON")->required()->check(CLI::ExistingFile);
    synth->add_option("--rows", rows, "Row count")->check(CLI::PositiveNumber);
    synth->add_option("--seed", seed, "Seed");
    synth->add_option("--out", synth_out, "Output CSV")->required();

    // serve
    std::string data_dir, host = "127.0.0.1", static_dir;
    int port = 8080;
    std::size_t shards = std::max(1u, std::thread::hardware_concurrency());
    double budget = 100.0;
    auto* serve = app.add_subcommand("serve", "Serve interactive sessions over HTTP");
    serve->add_option("--data", data_dir, "Dataset or catalog directory")->required()->check(CLI::ExistingDirectory);
    serve->add_option("--port", port, "Port");
    serve->add_option("--host", host, "Bind address");
    serve->add_option("--shards", shards, "Shards per level")->check(CLI::PositiveNumber);
    serve->add_option("--latency-budget-ms", budget, "Level-0 latency budget");
    serve->add_option("--static", static_dir, "Client asset directory")->check(CLI::ExistingDirectory);

    // bench
    auto* bench_cmd = app.add_subcommand("bench", "Simulated workloads and ranking reports");
    bench_cmd->require_subcommand(1);
    std::string dataset, report_out = "report.json", ranks_out = "ranks.json";
    std::size_t queries = 100, runs = 3;
    auto* run = bench_cmd->add_subcommand("run", "Run a simulated workload");
    run->add_option("--data", data_dir, "Dataset or catalog directory")->required()->check(CLI::ExistingDirectory);
    run->add_option("--dataset", dataset, "Dataset name within a catalog");
    run->add_option("--queries", queries, "Workload length")->check(CLI::PositiveNumber);
    run->add_option("--runs", runs, "Runs, each on a fresh engine")->check(CLI::PositiveNumber);
    run->add_option("--seed", seed, "Workload seed");
    run->add_option("--shards", shards, "Shards per level")->check(CLI::PositiveNumber);
    run->add_option("--out", report_out, "Report JSON; CSV and query log are written next to it");
    auto* rank = bench_cmd->add_subcommand("rank", "Ranking effectiveness per level");
    rank->add_option("--data", data_dir, "Dataset or catalog directory")->required()->check(CLI::ExistingDirectory);
    rank->add_option("--dataset", dataset, "Dataset name within a catalog");
    rank->add_option("--out", ranks_out, "Output JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*build) {
            const auto schema = read_json_file(schema_path).get<Schema>();
            const auto h = compute_hierarchy(schema.dims, parse_level0_bins(level0, schema), max_level);
            auto bound = schema;
            bound.dims = h.dims;
            const auto raw = ingest_csv(input, bound);
            const auto m = write_manifest(build_dataset(raw, h), out_dir);
            for (const auto& l : m.levels) std::cout << "level " << l.level.to_string() << ": " << l.row_count << " rows\n";
            return 0;
        }
        if (*synth) {
            const auto spec = read_json_file(spec_path).get<SyntheticSpec>();
            write_csv(generate_synthetic(spec, rows, seed), synth_out);
            std::cout << "wrote " << rows << " rows to " << synth_out << '\n';
            return 0;
        }
        if (*serve) {
            ServerOptions o;
            o.latency_budget_ms = budget;
            o.static_dir = static_dir;
            Server server(load_catalog(data_dir, EngineOptions{shards, 1}), o);
            for (const auto& p : server.probe()) std::cerr << "level-0 probe '" << p.dataset << "': " << p.elapsed_ms << " ms\n";
            if (!server.bind(host, port)) throw io_error("cannot bind " + host + ":" + std::to_string(port));
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::thread watcher([&] {
                while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
                server.stop();
            });
            std::cerr << "listening on " << host << ":" << port << '\n';
            server.listen_after_bind();
            g_interrupted = true;
            watcher.join();
            return 0;
        }
        if (*run) {
            bench::BenchOptions o;
            o.queries = queries;
            o.runs = runs;
            o.seed = seed;
            o.engine = EngineOptions{shards, 1};
            const auto r = bench::run_bench(load_one(data_dir, dataset), o);
            bench::emit_report(r, report_out);
            print_report(r.report);
            for (const auto& f : r.report.invariant_failures) std::cerr << "invariant failure: " << f << '\n';
            return r.report.invariant_failures.empty() ? 0 : 3;
        }
        if (*rank) {
            Engine engine(load_one(data_dir, dataset), EngineOptions{shards, 1});
            const auto r = bench::rank_report(engine);
            bench::write_text(ranks_out, json(r).dump(2) + "\n");
            for (const auto& row : r.levels)
                std::cout << "level " << row.level.to_string() << ": ad " << fmt(row.spearman.ad_only) << ", igp "
                          << fmt(row.spearman.igp_only) << ", average " << fmt(row.spearman.average_rank)
                          << (row.spearman.degenerate ? " (degenerate)" : "") << '\n';
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
