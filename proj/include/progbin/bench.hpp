#pragma once

// Simulated-workload harness and evaluation reports.
//
// A workload alternates filter mutations with a refinement sweep over every
// plot. Each run replays it on a fresh engine and logs every query; the report
// is a pure function of that log, so it can be recomputed from disk.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "binner.hpp"
#include "engine.hpp"
#include "metrics.hpp"
#include "refinement.hpp"
#include "schema.hpp"

namespace progbin::bench {

// --- rank correlation -------------------------------------------------------

/// 1-based ranks of `values`, largest first when `descending`; ties share their average rank.
inline std::vector<double> average_ranks(std::span<const double> values, bool descending = false) {
    return progbin::detail::fractional_ranks(values.size(), [&](std::size_t a, std::size_t b) {
        return descending ? values[a] > values[b] : values[a] < values[b];
    });
}

/// Pearson correlation of two rank vectors; empty when either is constant.
inline std::optional<double> rank_correlation(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw range_error("rank vectors differ in length");
    if (a.size() < 2) throw range_error("rank correlation needs at least 2 elements");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return std::nullopt;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Spearman coefficient of two orderings of the same elements (ids 0..n-1 in any order).
inline double spearman(std::span<const std::size_t> order_a, std::span<const std::size_t> order_b) {
    const auto n = order_a.size();
    if (n < 2) throw range_error("spearman needs at least 2 elements");
    if (order_b.size() != n) throw range_error("orders differ in length");
    std::vector<double> ra(n, 0.0), rb(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (order_a[i] >= n || ra[order_a[i]] != 0.0) throw range_error("order_a is not a permutation of 0..n-1");
        if (order_b[i] >= n || rb[order_b[i]] != 0.0) throw range_error("order_b is not a permutation of 0..n-1");
        ra[order_a[i]] = static_cast<double>(i + 1);
        rb[order_b[i]] = static_cast<double>(i + 1);
    }
    return *rank_correlation(ra, rb);
}

/// Spearman coefficient of two score vectors over the same elements, ties averaged.
inline std::optional<double> spearman_scores(std::span<const double> a, std::span<const double> b) {
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    return rank_correlation(ra, rb);
}

// --- ranking effectiveness --------------------------------------------------

struct VariantScores {
    std::optional<double> ad_only;
    std::optional<double> igp_only;
    std::optional<double> average_rank;
    /// No variant could be scored: every plot had constant ground truth or too few cells.
    bool degenerate = true;

    friend bool operator==(const VariantScores&, const VariantScores&) = default;
};

/// Per-level uniform histograms of every plot: `ys[level][dim][bin]`.
using LevelHistograms = std::map<Level, std::vector<std::vector<double>>>;

namespace detail {

inline std::span<const double> cells_of(const std::vector<double>& fine, std::uint64_t bin, std::uint64_t ratio) {
    return std::span<const double>(fine).subspan(bin * ratio, ratio);
}

inline std::optional<double> mean_of(const std::vector<double>& xs) {
    if (xs.empty()) return std::nullopt;
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

inline std::optional<double> median_of(std::vector<double> xs) {
    if (xs.empty()) return std::nullopt;
    const auto mid = xs.size() / 2;
    std::nth_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(mid), xs.end());
    if (xs.size() % 2 == 1) return xs[mid];
    const double hi = xs[mid];
    return (*std::max_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(mid)) + hi) / 2.0;
}

/// Variant-vs-truth coefficients for one plot at `level`; empty when undefined.
inline std::array<std::optional<double>, 3> plot_ranking(const DimensionSpec& dim, Level level, std::size_t d,
                                                         const LevelHistograms& ys) {
    const auto next = next_level(level, dim);
    const auto& coarse = ys.at(level)[d];
    const auto& fine = ys.at(next)[d];
    const auto& base = ys.at(Level::base())[d];
    const double total = std::accumulate(coarse.begin(), coarse.end(), 0.0);
    const auto r_next = dim.ratio(next, level);
    const auto r_base = dim.ratio(Level::base(), level);
    std::vector<RankInput> inputs;
    std::vector<double> truth;
    for (std::uint64_t b = 0; b < coarse.size(); ++b) {
        const auto re = metrics::result_error(coarse[b], cells_of(base, b, r_base));
        if (!re) continue;
        const auto subs = cells_of(fine, b, r_next);
        const metrics::BinSplit split{coarse[b], std::vector<double>(subs.begin(), subs.end()), total};
        inputs.push_back(RankInput{BinRef{d, level, b}, metrics::average_deviance(split),
                                   metrics::bin_igp(coarse[b] / total, dim.cells_per_bin(level))});
        truth.push_back(*re);
    }
    if (inputs.size() < 2) return {};
    const auto truth_rank = average_ranks(truth, true);
    std::array<std::optional<double>, 3> out;
    const RankingVariant variants[] = {RankingVariant::ad_only, RankingVariant::igp_only, RankingVariant::average_rank};
    for (std::size_t v = 0; v < 3; ++v) {
        // Position in the variant's order; ties keep x order, as they do when displayed.
        const auto order = rank_results(inputs, variants[v]);
        std::vector<double> pos(inputs.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            const auto it = std::find_if(inputs.begin(), inputs.end(), [&](const RankInput& c) { return c.ref == order[i]; });
            pos[static_cast<std::size_t>(it - inputs.begin())] = static_cast<double>(i + 1);
        }
        out[v] = rank_correlation(pos, truth_rank);
    }
    return out;
}

}  // namespace detail

/// Spearman coefficient of each ranking variant against the true order (descending
/// result error at base resolution) of the non-empty bins at `level`, averaged over plots.
inline VariantScores ranking_effectiveness(const std::vector<DimensionSpec>& dims, Level level, const LevelHistograms& ys) {
    if (level.is_base()) return {};
    std::array<std::vector<double>, 3> acc;
    for (std::size_t d = 0; d < dims.size(); ++d) {
        const auto r = detail::plot_ranking(dims[d], level, d, ys);
        for (std::size_t v = 0; v < 3; ++v)
            if (r[v]) acc[v].push_back(*r[v]);
    }
    VariantScores s;
    s.ad_only = detail::mean_of(acc[0]);
    s.igp_only = detail::mean_of(acc[1]);
    s.average_rank = detail::mean_of(acc[2]);
    s.degenerate = !s.ad_only && !s.igp_only && !s.average_rank;
    return s;
}

// --- workload ---------------------------------------------------------------

inline constexpr double kAddShare = 0.24;
inline constexpr double kModifyShare = 0.46;
inline constexpr double kRemoveShare = 0.30;

struct WorkloadStep {
    enum class Kind { add_filter, modify_filter, remove_filter, refine };
    Kind kind = Kind::refine;
    std::size_t dim = 0;
    std::optional<Predicate> predicate;  // add and modify
    Level level{0};                      // level every plot is queried at after this step

    friend bool operator==(const WorkloadStep&, const WorkloadStep&) = default;
};

struct Workload {
    std::string name;
    std::uint64_t seed = 0;
    std::size_t query_count = 0;
    std::vector<WorkloadStep> steps;

    friend bool operator==(const Workload&, const Workload&) = default;
};

inline std::string to_string(WorkloadStep::Kind k) {
    switch (k) {
        case WorkloadStep::Kind::add_filter: return "add_filter";
        case WorkloadStep::Kind::modify_filter: return "modify_filter";
        case WorkloadStep::Kind::remove_filter: return "remove_filter";
        case WorkloadStep::Kind::refine: return "refine";
    }
    return "refine";
}

inline WorkloadStep::Kind parse_step_kind(const std::string& s) {
    for (auto k : {WorkloadStep::Kind::add_filter, WorkloadStep::Kind::modify_filter, WorkloadStep::Kind::remove_filter,
                   WorkloadStep::Kind::refine})
        if (to_string(k) == s) return k;
    throw query_error("unknown workload step '" + s + "'");
}

inline void to_json(json& j, const WorkloadStep& s) {
    j = json{{"kind", to_string(s.kind)}, {"dim", s.dim}, {"level", level_to_json(s.level)}};
    j["predicate"] = s.predicate ? json(*s.predicate) : json(nullptr);
}

inline void from_json(const json& j, WorkloadStep& s) {
    s.kind = parse_step_kind(j.at("kind").get<std::string>());
    s.dim = j.at("dim").get<std::size_t>();
    s.level = level_from_json(j.at("level"));
    s.predicate = j.at("predicate").is_null() ? std::nullopt : std::optional<Predicate>(j.at("predicate").get<Predicate>());
}

inline void to_json(json& j, const Workload& w) {
    j = json{{"name", w.name}, {"seed", w.seed}, {"query_count", w.query_count}, {"steps", w.steps}};
}

inline void from_json(const json& j, Workload& w) {
    w.name = j.at("name").get<std::string>();
    w.seed = j.at("seed").get<std::uint64_t>();
    w.query_count = j.at("query_count").get<std::size_t>();
    w.steps = j.at("steps").get<std::vector<WorkloadStep>>();
}

/// Level-0 range covering 10-50% of the domain.
inline Predicate random_range(std::mt19937_64& rng, std::size_t d, const DimensionSpec& dim) {
    const auto n = dim.bin_count(Level(0));
    const auto lo_w = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::ceil(0.1 * static_cast<double>(n))));
    const auto hi_w = std::max<std::uint64_t>(lo_w, n / 2);
    const auto w = std::uniform_int_distribution<std::uint64_t>(lo_w, hi_w)(rng);
    const auto lo = std::uniform_int_distribution<std::uint64_t>(0, n - w)(rng);
    return Predicate{d, Level(0), lo, lo + w};
}

/// Each filter mutation is answered at level 0 and followed by one refinement step
/// per level up to max_level; the sequence is cut at `n_queries` steps. A mutation
/// that cannot apply (remove or modify with no filter, add with every plot filtered)
/// falls back to one that can.
inline Workload simulate_workload(const std::string& name, const std::vector<DimensionSpec>& dims, std::size_t n_queries,
                                  std::uint64_t seed) {
    if (n_queries < 1) throw config_error("a workload needs at least one query");
    if (dims.empty()) throw config_error("a workload needs at least one dimension");
    const int max_level = dims.front().max_level;
    std::mt19937_64 rng(seed);
    std::discrete_distribution<int> op({kAddShare, kModifyShare, kRemoveShare});
    std::vector<std::optional<Predicate>> active(dims.size());
    Workload w{name, seed, n_queries, {}};
    auto pick = [&](bool filtered) {
        std::vector<std::size_t> c;
        for (std::size_t d = 0; d < dims.size(); ++d)
            if (active[d].has_value() == filtered) c.push_back(d);
        return c[std::uniform_int_distribution<std::size_t>(0, c.size() - 1)(rng)];
    };
    while (w.steps.size() < n_queries) {
        const auto n_active = static_cast<std::size_t>(std::count_if(active.begin(), active.end(), [](auto& p) { return p.has_value(); }));
        auto kind = static_cast<WorkloadStep::Kind>(op(rng));
        if (n_active == 0) kind = WorkloadStep::Kind::add_filter;
        if (kind == WorkloadStep::Kind::add_filter && n_active == dims.size()) kind = WorkloadStep::Kind::modify_filter;
        WorkloadStep s;
        s.kind = kind;
        s.dim = pick(kind != WorkloadStep::Kind::add_filter);
        if (kind != WorkloadStep::Kind::remove_filter) {
            auto p = random_range(rng, s.dim, dims[s.dim]);
            for (int retry = 0; retry < 8 && active[s.dim] == p; ++retry) p = random_range(rng, s.dim, dims[s.dim]);
            s.predicate = p;
        }
        active[s.dim] = s.predicate;
        w.steps.push_back(s);
        for (int k = 1; k <= max_level && w.steps.size() < n_queries; ++k) w.steps.push_back(WorkloadStep{WorkloadStep::Kind::refine, 0, {}, Level(k)});
    }
    return w;
}

inline Workload simulate_workload(const Manifest& m, std::size_t n_queries, std::uint64_t seed) {
    return simulate_workload(m.name, m.dims, n_queries, seed);
}

// --- RCT / RNR --------------------------------------------------------------

/// RCT(k) = (sum of t_j for j <= k) / t_base.
inline std::vector<double> compute_rct(std::span<const double> times, double base_time) {
    if (!(base_time > 0.0)) throw range_error("base time must be positive");
    std::vector<double> out;
    double acc = 0.0;
    for (double t : times) out.push_back((acc += t) / base_time);
    return out;
}

/// RNR(k) = results shown at k / results of the base query.
inline std::vector<double> compute_rnr(std::span<const double> counts, double base_count) {
    if (!(base_count > 0.0)) throw range_error("base result count must be positive");
    std::vector<double> out;
    for (double c : counts) out.push_back(c / base_count);
    return out;
}

// --- runs -------------------------------------------------------------------

struct QueryRecord {
    std::size_t run = 0;
    std::size_t step = 0;
    std::size_t state = 0;  // filter state the query ran under
    Level level;            // BASE marks the reference query of a state
    double elapsed_ms = 0.0;
    std::size_t results = 0;  // non-empty cells over all plots

    friend bool operator==(const QueryRecord&, const QueryRecord&) = default;
};

inline void to_json(json& j, const QueryRecord& r) {
    j = json{{"run", r.run},           {"step", r.step},         {"state", r.state},
             {"level", level_to_json(r.level)}, {"elapsed_ms", r.elapsed_ms}, {"results", r.results}};
}

inline void from_json(const json& j, QueryRecord& r) {
    r.run = j.at("run").get<std::size_t>();
    r.step = j.at("step").get<std::size_t>();
    r.state = j.at("state").get<std::size_t>();
    r.level = level_from_json(j.at("level"));
    r.elapsed_ms = j.at("elapsed_ms").get<double>();
    r.results = j.at("results").get<std::size_t>();
}

/// Everything a report is computed from.
struct QueryLog {
    std::string dataset;
    std::vector<DimensionSpec> dims;
    std::map<Level, std::size_t> table_rows;
    Workload workload;
    std::size_t runs = 0;
    std::size_t shards = 0;
    std::vector<QueryRecord> records;
    std::vector<Predicate> final_predicates;
    LevelHistograms final_histograms;                // from the last run
    std::vector<std::string> run_mismatches;         // result differences between runs

    friend bool operator==(const QueryLog&, const QueryLog&) = default;
};

inline void to_json(json& j, const QueryLog& l) {
    j = json{{"dataset", l.dataset}, {"dims", l.dims}, {"workload", l.workload}, {"runs", l.runs}, {"shards", l.shards},
             {"records", l.records}, {"final_predicates", l.final_predicates}, {"run_mismatches", l.run_mismatches}};
    j["table_rows"] = json::array();
    for (const auto& [level, n] : l.table_rows) j["table_rows"].push_back(json{{"level", level_to_json(level)}, {"rows", n}});
    j["final_histograms"] = json::array();
    for (const auto& [level, ys] : l.final_histograms) j["final_histograms"].push_back(json{{"level", level_to_json(level)}, {"y", ys}});
}

inline void from_json(const json& j, QueryLog& l) {
    l.dataset = j.at("dataset").get<std::string>();
    l.dims = j.at("dims").get<std::vector<DimensionSpec>>();
    l.workload = j.at("workload").get<Workload>();
    l.runs = j.at("runs").get<std::size_t>();
    l.shards = j.at("shards").get<std::size_t>();
    l.records = j.at("records").get<std::vector<QueryRecord>>();
    l.final_predicates = j.at("final_predicates").get<std::vector<Predicate>>();
    l.run_mismatches = j.at("run_mismatches").get<std::vector<std::string>>();
    l.table_rows.clear();
    for (const auto& t : j.at("table_rows")) l.table_rows[level_from_json(t.at("level"))] = t.at("rows").get<std::size_t>();
    l.final_histograms.clear();
    for (const auto& h : j.at("final_histograms"))
        l.final_histograms[level_from_json(h.at("level"))] = h.at("y").get<std::vector<std::vector<double>>>();
}

struct BenchOptions {
    std::size_t queries = 100;
    std::size_t runs = 3;
    std::uint64_t seed = 1;
    EngineOptions engine;
};

namespace detail {

inline std::size_t results_of(const MultiQueryResult& r) {
    std::size_t n = 0;
    for (const auto& h : r.histograms) n += h.non_empty();
    return n;
}

inline std::vector<Frontier> uniform_frontiers(const std::vector<DimensionSpec>& dims, Level level) {
    std::vector<Frontier> out;
    for (std::size_t d = 0; d < dims.size(); ++d) out.push_back(Frontier::uniform(d, dims[d], level));
    return out;
}

}  // namespace detail

/// Play `workload` `options.runs` times, each on a fresh engine, and log every query.
/// Every filter state also runs its reference query at BASE.
inline QueryLog run_workload(std::shared_ptr<const Dataset> ds, const Workload& workload, const BenchOptions& options) {
    if (options.runs < 1) throw config_error("at least one run is required");
    const auto& dims = ds->hierarchy.dims;
    QueryLog log;
    log.dataset = ds->name;
    log.dims = dims;
    for (const auto& [level, t] : ds->tables) log.table_rows[level] = t.row_count();
    log.workload = workload;
    log.runs = options.runs;
    log.shards = options.engine.shard_count;
    std::vector<std::size_t> first_results;
    for (std::size_t run = 0; run < options.runs; ++run) {
        Engine engine(ds, options.engine);
        std::vector<std::optional<Predicate>> active(dims.size());
        auto preds = [&] {
            std::vector<Predicate> out;
            for (const auto& p : active)
                if (p) out.push_back(*p);
            return out;
        };
        std::size_t state = 0;
        std::vector<std::size_t> results;
        for (std::size_t i = 0; i < workload.steps.size(); ++i) {
            const auto& s = workload.steps[i];
            if (s.kind != WorkloadStep::Kind::refine) {
                ++state;
                active.at(s.dim) = s.predicate;
                const auto base = engine.multi_query(preds(), detail::uniform_frontiers(dims, Level::base()), 0);
                log.records.push_back({run, i, state, Level::base(), base.elapsed_ms, detail::results_of(base)});
                results.push_back(log.records.back().results);
            }
            const auto r = engine.multi_query(preds(), detail::uniform_frontiers(dims, s.level), 0);
            log.records.push_back({run, i, state, s.level, r.elapsed_ms, detail::results_of(r)});
            results.push_back(log.records.back().results);
        }
        if (run == 0) {
            first_results = results;
        } else if (results != first_results) {
            log.run_mismatches.push_back("run " + std::to_string(run) + " result counts differ from run 0");
        }
        LevelHistograms ys;
        for (const auto level : ds->hierarchy.levels()) {
            const auto r = engine.multi_query(preds(), detail::uniform_frontiers(dims, level), 0);
            for (const auto& h : r.histograms) ys[level].push_back(h.values());
        }
        if (run > 0 && ys != log.final_histograms)
            log.run_mismatches.push_back("run " + std::to_string(run) + " final histograms differ from run 0");
        log.final_histograms = std::move(ys);
        log.final_predicates = preds();
    }
    return log;
}

// --- report -----------------------------------------------------------------

inline constexpr int kReportSchemaVersion = 1;

struct LevelRow {
    Level level;
    double time_ms = 0.0;        // mean per filter state
    double cumulative_ms = 0.0;  // mean per filter state, levels 0..k (BASE row adds the base query)
    double base_ms = 0.0;
    double rct = 0.0;
    double results = 0.0;  // mean per filter state
    double base_results = 0.0;
    double rnr = 0.0;
    std::optional<double> re_mean;
    std::optional<double> re_median;
    std::optional<double> af;
    std::optional<double> rec;
    double sparsity = 0.0;
    VariantScores spearman;

    friend bool operator==(const LevelRow&, const LevelRow&) = default;
};

struct BenchReport {
    int schema_version = kReportSchemaVersion;
    std::string dataset;
    std::size_t runs = 0;
    std::size_t queries = 0;
    std::uint64_t seed = 0;
    std::size_t shards = 0;
    std::size_t filter_states = 0;  // states whose sweep ran to max_level
    std::vector<LevelRow> levels;
    std::vector<std::string> invariant_failures;

    friend bool operator==(const BenchReport&, const BenchReport&) = default;
};

namespace detail {

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline std::optional<double> optional_from(const json& j) {
    return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

}  // namespace detail

inline void to_json(json& j, const VariantScores& s) {
    j = json{{"ad_only", detail::optional_json(s.ad_only)},
             {"igp_only", detail::optional_json(s.igp_only)},
             {"average_rank", detail::optional_json(s.average_rank)},
             {"degenerate", s.degenerate}};
}

inline void from_json(const json& j, VariantScores& s) {
    s.ad_only = detail::optional_from(j.at("ad_only"));
    s.igp_only = detail::optional_from(j.at("igp_only"));
    s.average_rank = detail::optional_from(j.at("average_rank"));
    s.degenerate = j.at("degenerate").get<bool>();
}

inline void to_json(json& j, const LevelRow& r) {
    j = json{{"level", level_to_json(r.level)},
             {"time_ms", r.time_ms},
             {"cumulative_ms", r.cumulative_ms},
             {"base_ms", r.base_ms},
             {"rct", r.rct},
             {"results", r.results},
             {"base_results", r.base_results},
             {"rnr", r.rnr},
             {"re_mean", detail::optional_json(r.re_mean)},
             {"re_median", detail::optional_json(r.re_median)},
             {"af", detail::optional_json(r.af)},
             {"rec", detail::optional_json(r.rec)},
             {"sparsity", r.sparsity},
             {"spearman", r.spearman}};
}

inline void from_json(const json& j, LevelRow& r) {
    r.level = level_from_json(j.at("level"));
    r.time_ms = j.at("time_ms").get<double>();
    r.cumulative_ms = j.at("cumulative_ms").get<double>();
    r.base_ms = j.at("base_ms").get<double>();
    r.rct = j.at("rct").get<double>();
    r.results = j.at("results").get<double>();
    r.base_results = j.at("base_results").get<double>();
    r.rnr = j.at("rnr").get<double>();
    r.re_mean = detail::optional_from(j.at("re_mean"));
    r.re_median = detail::optional_from(j.at("re_median"));
    r.af = detail::optional_from(j.at("af"));
    r.rec = detail::optional_from(j.at("rec"));
    r.sparsity = j.at("sparsity").get<double>();
    r.spearman = j.at("spearman").get<VariantScores>();
}

inline void to_json(json& j, const BenchReport& r) {
    j = json{{"schema_version", r.schema_version}, {"dataset", r.dataset}, {"runs", r.runs},
             {"queries", r.queries},               {"seed", r.seed},       {"shards", r.shards},
             {"filter_states", r.filter_states},   {"levels", r.levels},   {"invariant_failures", r.invariant_failures}};
}

inline void from_json(const json& j, BenchReport& r) {
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != kReportSchemaVersion) throw ingest_error("unsupported report schema " + std::to_string(r.schema_version));
    r.dataset = j.at("dataset").get<std::string>();
    r.runs = j.at("runs").get<std::size_t>();
    r.queries = j.at("queries").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.shards = j.at("shards").get<std::size_t>();
    r.filter_states = j.at("filter_states").get<std::size_t>();
    r.levels = j.at("levels").get<std::vector<LevelRow>>();
    r.invariant_failures = j.at("invariant_failures").get<std::vector<std::string>>();
}

/// Result error, anomalous fraction and entropy change of every plot at `level`,
/// measured against the BASE histograms.
inline void fill_quality(LevelRow& row, const std::vector<DimensionSpec>& dims, const LevelHistograms& ys) {
    std::vector<double> per_plot_re, all_re, afs, recs;
    const auto& base = ys.at(Level::base());
    for (std::size_t d = 0; d < dims.size(); ++d) {
        const auto& coarse = ys.at(row.level)[d];
        const auto ratio = dims[d].ratio(Level::base(), row.level);
        const double total = std::accumulate(coarse.begin(), coarse.end(), 0.0);
        std::vector<double> res;
        std::vector<metrics::BinSplit> splits;
        for (std::uint64_t b = 0; b < coarse.size(); ++b) {
            const auto cells = detail::cells_of(base[d], b, ratio);
            if (const auto re = metrics::result_error(coarse[b], cells)) res.push_back(*re);
            splits.push_back(metrics::BinSplit{coarse[b], std::vector<double>(cells.begin(), cells.end()), total});
        }
        if (const auto m = detail::mean_of(res)) per_plot_re.push_back(*m);
        all_re.insert(all_re.end(), res.begin(), res.end());
        if (const auto af = metrics::anomalous_fraction(coarse)) afs.push_back(*af);
        if (total > 0)
            if (const auto rec = metrics::plot_rec(splits)) recs.push_back(std::max(0.0, *rec));
    }
    row.re_mean = detail::mean_of(per_plot_re);
    row.re_median = detail::median_of(all_re);
    row.af = detail::mean_of(afs);
    row.rec = detail::mean_of(recs);
}

/// Per-level report over the filter states whose sweep completed, averaged over runs.
inline BenchReport summarize(const QueryLog& log) {
    if (log.dims.empty()) throw config_error("log has no dimensions");
    BinHierarchy h{log.dims, log.dims.front().max_level};
    const auto levels = h.levels();
    const auto L = static_cast<std::size_t>(h.max_level);
    BenchReport rep;
    rep.dataset = log.dataset;
    rep.runs = log.runs;
    rep.queries = log.workload.query_count;
    rep.seed = log.workload.seed;
    rep.shards = log.shards;
    rep.invariant_failures = log.run_mismatches;

    // times[run][state][level index], level index L + 1 is BASE
    std::map<std::size_t, std::map<std::size_t, std::vector<std::optional<QueryRecord>>>> grid;
    for (const auto& r : log.records) {
        auto& slot = grid[r.run][r.state];
        slot.resize(L + 2);
        const auto idx = r.level.is_base() ? L + 1 : static_cast<std::size_t>(r.level.value());
        slot[idx] = r;
    }
    std::vector<std::size_t> complete;
    if (!grid.empty())
        for (const auto& [state, slots] : grid.begin()->second)
            if (std::all_of(slots.begin(), slots.end(), [](const auto& s) { return s.has_value(); })) complete.push_back(state);
    rep.filter_states = complete.size();

    rep.levels.resize(L + 2);
    for (std::size_t i = 0; i < L + 2; ++i) rep.levels[i].level = levels[i];
    if (!complete.empty()) {
        const double n_states = static_cast<double>(complete.size());
        for (const auto& [run, states] : grid) {
            std::vector<double> t(L + 2, 0.0), res(L + 2, 0.0);
            for (auto s : complete) {
                const auto& slots = states.at(s);
                for (std::size_t i = 0; i < L + 2; ++i) {
                    t[i] += slots[i]->elapsed_ms;
                    res[i] += static_cast<double>(slots[i]->results);
                }
            }
            if (res[L + 1] <= 0.0) {
                rep.invariant_failures.push_back("run " + std::to_string(run) + ": base queries returned no results");
                continue;
            }
            const double base_t = std::max(t[L + 1], 1e-9);
            // The BASE row counts the whole progressive path plus the base query itself.
            const auto rct = compute_rct(t, base_t);
            const auto rnr = compute_rnr(std::span<const double>(res), res[L + 1]);
            double cum = 0.0;
            for (std::size_t i = 0; i < L + 2; ++i) {
                auto& row = rep.levels[i];
                cum += t[i];
                const double w = 1.0 / static_cast<double>(grid.size());
                row.time_ms += w * t[i] / n_states;
                row.cumulative_ms += w * cum / n_states;
                row.base_ms += w * base_t / n_states;
                row.rct += w * rct[i];
                row.results += w * res[i] / n_states;
                row.base_results += w * res[L + 1] / n_states;
                row.rnr += w * rnr[i];
            }
        }
        rep.levels[L + 1].rnr = 1.0;
    } else {
        rep.invariant_failures.push_back("no filter state completed its refinement sweep");
    }

    for (auto& row : rep.levels) {
        const auto rows = log.table_rows.find(row.level);
        if (rows != log.table_rows.end()) row.sparsity = static_cast<double>(rows->second) / h.max_rows(row.level);
        if (!log.final_histograms.empty()) {
            fill_quality(row, log.dims, log.final_histograms);
            row.spearman = ranking_effectiveness(log.dims, row.level, log.final_histograms);
        }
    }

    for (std::size_t i = 0; i < rep.levels.size(); ++i) {
        const auto& row = rep.levels[i];
        const auto name = row.level.to_string();
        if (complete.empty()) break;
        if (!(row.rnr > 0.0 && row.rnr <= 1.0 + 1e-12)) rep.invariant_failures.push_back("RNR(" + name + ") outside (0, 1]");
        if (i > 0 && row.rct < rep.levels[i - 1].rct) rep.invariant_failures.push_back("RCT decreases at level " + name);
        if (i > 0 && row.rnr < rep.levels[i - 1].rnr - 1e-12) rep.invariant_failures.push_back("RNR decreases at level " + name);
    }
    return rep;
}

struct BenchResult {
    QueryLog log;
    BenchReport report;
};

inline BenchResult run_bench(std::shared_ptr<const Dataset> ds, const BenchOptions& options) {
    const auto workload = simulate_workload(ds->name, ds->hierarchy.dims, options.queries, options.seed);
    BenchResult r;
    r.log = run_workload(std::move(ds), workload, options);
    r.report = summarize(r.log);
    return r;
}

// --- files ------------------------------------------------------------------

inline std::filesystem::path sibling(const std::filesystem::path& path, const std::string& suffix) {
    auto p = path;
    p.replace_extension();
    return p.string() + suffix;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    out << text;
    if (!out) throw io_error("cannot write '" + path.string() + "'");
}

/// Per-level table as CSV.
inline std::string report_csv(const BenchReport& r) {
    std::ostringstream out;
    out.precision(17);
    out << "level,time_ms,cumulative_ms,base_ms,rct,results,base_results,rnr,re_mean,re_median,af,rec,sparsity,"
           "spearman_ad,spearman_igp,spearman_avg\n";
    auto opt = [&](const std::optional<double>& v) {
        if (v) out << *v;
    };
    for (const auto& row : r.levels) {
        out << row.level.to_string() << ',' << row.time_ms << ',' << row.cumulative_ms << ',' << row.base_ms << ',' << row.rct
            << ',' << row.results << ',' << row.base_results << ',' << row.rnr << ',';
        opt(row.re_mean);
        out << ',';
        opt(row.re_median);
        out << ',';
        opt(row.af);
        out << ',';
        opt(row.rec);
        out << ',' << row.sparsity << ',';
        opt(row.spearman.ad_only);
        out << ',';
        opt(row.spearman.igp_only);
        out << ',';
        opt(row.spearman.average_rank);
        out << '\n';
    }
    return out.str();
}

/// Writes `path` (JSON report), `<path stem>.csv` (per-level table) and
/// `<path stem>.log.json` (raw query log).
inline void emit_report(const BenchResult& r, const std::filesystem::path& path) {
    write_text(path, json(r.report).dump(2) + "\n");
    write_text(sibling(path, ".csv"), report_csv(r.report));
    write_text(sibling(path, ".log.json"), json(r.log).dump() + "\n");
}

inline BenchReport load_report(const std::filesystem::path& path) {
    try {
        return json::parse(progbin::detail::read_file(path)).get<BenchReport>();
    } catch (const json::exception& e) {
        throw ingest_error("invalid report '" + path.string() + "': " + e.what());
    }
}

inline QueryLog load_log(const std::filesystem::path& path) {
    try {
        return json::parse(progbin::detail::read_file(path)).get<QueryLog>();
    } catch (const json::exception& e) {
        throw ingest_error("invalid query log '" + path.string() + "': " + e.what());
    }
}

// --- ranking report ---------------------------------------------------------

struct RankRow {
    Level level;
    VariantScores spearman;
};

struct RankReport {
    std::string dataset;
    std::vector<RankRow> levels;  // 0..max_level
};

inline void to_json(json& j, const RankReport& r) {
    j = json{{"schema_version", kReportSchemaVersion}, {"dataset", r.dataset}, {"levels", json::array()}};
    for (const auto& row : r.levels) j["levels"].push_back(json{{"level", level_to_json(row.level)}, {"spearman", row.spearman}});
}

/// Ranking effectiveness on the unfiltered histograms of every level.
inline RankReport rank_report(Engine& engine) {
    const auto& ds = engine.dataset();
    LevelHistograms ys;
    for (const auto level : ds.hierarchy.levels())
        for (const auto& h : engine.multi_query({}, detail::uniform_frontiers(ds.hierarchy.dims, level), 0).histograms)
            ys[level].push_back(h.values());
    RankReport r{ds.name, {}};
    for (int k = 0; k <= ds.hierarchy.max_level; ++k)
        r.levels.push_back({Level(k), ranking_effectiveness(ds.hierarchy.dims, Level(k), ys)});
    return r;
}

}  // namespace progbin::bench
