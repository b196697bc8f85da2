#include <gtest/gtest.h>

#include <random>

#include "oracle.hpp"
#include "progbin/bench.hpp"
#include "progbin/synth.hpp"

using namespace progbin;
using namespace progbin::bench;

namespace {

double closed_form(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    const auto n = static_cast<double>(a.size());
    std::vector<double> pa(a.size()), pb(b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        pa[a[i]] = static_cast<double>(i);
        pb[b[i]] = static_cast<double>(i);
    }
    double d2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d2 += (pa[i] - pb[i]) * (pa[i] - pb[i]);
    return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

std::shared_ptr<const Dataset> zipf_dataset(std::size_t rows, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.schema.name = "zipf";
    for (int d = 0; d < 3; ++d) {
        spec.schema.dims.push_back(DimensionSpec{"d" + std::to_string(d), 0, 256, 1, 4, 3});
        spec.dim_distributions.push_back(Distribution{Distribution::Kind::zipf, 0, 1, 1.0, 2.0});
    }
    spec.schema.measures.push_back(MeasureSpec{});
    const auto raw = generate_synthetic(spec, rows, seed);
    return std::make_shared<const Dataset>(build_dataset(raw, BinHierarchy{spec.schema.dims, 3}));
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / (name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    return p;
}

}  // namespace

TEST(Rct, Examples) {
    const std::vector<double> t{1, 2, 3};
    const auto r = compute_rct(t, 100);
    ASSERT_EQ(r.size(), 3u);
    EXPECT_DOUBLE_EQ(r[0], 0.01);
    EXPECT_DOUBLE_EQ(r[1], 0.03);
    EXPECT_DOUBLE_EQ(r[2], 0.06);
    EXPECT_THROW(compute_rct(t, 0), range_error);
    std::mt19937_64 rng(1);
    std::vector<double> ts(20);
    for (auto& x : ts) x = static_cast<double>(rng() % 1000) / 10.0;
    const auto m = compute_rct(ts, 7.5);
    EXPECT_TRUE(std::is_sorted(m.begin(), m.end()));
}

TEST(Rnr, Examples) {
    const std::vector<double> c{8, 800};
    const auto r = compute_rnr(c, 800);
    EXPECT_DOUBLE_EQ(r[0], 0.01);
    EXPECT_DOUBLE_EQ(r[1], 1.0);
    EXPECT_THROW(compute_rnr(c, 0), range_error);
}

TEST(Spearman, IdentityAndReversal) {
    const std::vector<std::size_t> a{0, 1, 2, 3, 4};
    const std::vector<std::size_t> r{4, 3, 2, 1, 0};
    EXPECT_DOUBLE_EQ(spearman(a, a), 1.0);
    EXPECT_DOUBLE_EQ(spearman(a, r), -1.0);
    EXPECT_THROW(spearman(std::vector<std::size_t>{0}, std::vector<std::size_t>{0}), range_error);
    EXPECT_THROW(spearman(a, std::vector<std::size_t>{0, 1, 2, 3}), range_error);
    EXPECT_THROW(spearman(a, std::vector<std::size_t>{0, 1, 2, 3, 3}), range_error);
}

TEST(Spearman, MatchesClosedFormOnRandomPermutations) {
    std::mt19937_64 rng(11);
    for (int t = 0; t < 1000; ++t) {
        std::vector<std::size_t> a(2 + rng() % 60);
        std::iota(a.begin(), a.end(), 0);
        auto b = a;
        std::shuffle(a.begin(), a.end(), rng);
        std::shuffle(b.begin(), b.end(), rng);
        EXPECT_NEAR(spearman(a, b), closed_form(a, b), 1e-12);
    }
}

TEST(Spearman, TiesShareAverageRanks) {
    const std::vector<double> v{10, 20, 20, 30};
    EXPECT_EQ(average_ranks(v), (std::vector<double>{1, 2.5, 2.5, 4}));
    EXPECT_EQ(average_ranks(v, true), (std::vector<double>{4, 2.5, 2.5, 1}));
    // Pearson on ranks {1,2.5,2.5,4} vs {1,2,3,4}: co-moment 4.5, moments 4.5 and 5.
    EXPECT_NEAR(*spearman_scores(v, std::vector<double>{1, 2, 3, 4}), 4.5 / std::sqrt(4.5 * 5.0), 1e-12);
    EXPECT_FALSE(spearman_scores(std::vector<double>{3, 3, 3}, std::vector<double>{1, 2, 3}));
}

TEST(Workload, DeterministicAndSized) {
    const std::vector<DimensionSpec> dims(5, DimensionSpec{"x", 0, 1024, 1, 32, 4});
    const auto a = simulate_workload("w", dims, 100, 7);
    const auto b = simulate_workload("w", dims, 100, 7);
    const auto c = simulate_workload("w", dims, 100, 8);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    EXPECT_EQ(a.steps.size(), 100u);
    EXPECT_EQ(a.query_count, 100u);
    EXPECT_THROW(simulate_workload("w", dims, 0, 1), config_error);
    EXPECT_EQ(json(a).get<Workload>(), a);
}

TEST(Workload, FilterThenSweepWithAlignedRanges) {
    const std::vector<DimensionSpec> dims(5, DimensionSpec{"x", 0, 1024, 1, 32, 4});
    const auto w = simulate_workload("w", dims, 1000, 3);
    std::vector<std::optional<Predicate>> active(5);
    for (std::size_t i = 0; i < w.steps.size(); ++i) {
        const auto& s = w.steps[i];
        if (i % 5 == 0) {
            ASSERT_NE(s.kind, WorkloadStep::Kind::refine);
            EXPECT_EQ(s.level, Level(0));
        } else {
            ASSERT_EQ(s.kind, WorkloadStep::Kind::refine);
            EXPECT_EQ(s.level, Level(static_cast<int>(i % 5)));
            continue;
        }
        switch (s.kind) {
            case WorkloadStep::Kind::add_filter: EXPECT_FALSE(active[s.dim]); break;
            case WorkloadStep::Kind::modify_filter: EXPECT_TRUE(active[s.dim]); break;
            case WorkloadStep::Kind::remove_filter: EXPECT_TRUE(active[s.dim]); break;
            default: break;
        }
        if (s.predicate) {
            const auto& p = *s.predicate;
            EXPECT_EQ(p.dim, s.dim);
            EXPECT_EQ(p.level, Level(0));
            EXPECT_NO_THROW(check_predicate(p, dims[s.dim]));
            const auto width = p.hi - p.lo;
            EXPECT_GE(width, 4u);   // 10% of 32 bins, rounded up
            EXPECT_LE(width, 16u);  // 50%
        }
        active[s.dim] = s.predicate;
    }
}

TEST(Workload, MutationMixNearStatedShares) {
    const std::vector<DimensionSpec> dims(5, DimensionSpec{"x", 0, 1024, 1, 32, 4});
    const auto w = simulate_workload("w", dims, 100000, 5);
    std::map<WorkloadStep::Kind, double> n;
    double total = 0;
    for (const auto& s : w.steps)
        if (s.kind != WorkloadStep::Kind::refine) {
            n[s.kind] += 1;
            total += 1;
        }
    // Fallbacks for infeasible mutations shift the mix by a few points.
    EXPECT_NEAR(n[WorkloadStep::Kind::add_filter] / total, kAddShare, 0.05);
    EXPECT_NEAR(n[WorkloadStep::Kind::modify_filter] / total, kModifyShare, 0.05);
    EXPECT_NEAR(n[WorkloadStep::Kind::remove_filter] / total, kRemoveShare, 0.05);
}

TEST(RankingEffectiveness, PerfectlyUniformDataIsDegenerate) {
    const DimensionSpec dim{"x", 0, 64, 1, 4, 2};
    LevelHistograms ys;
    for (const auto level : {Level(0), Level(1), Level(2), Level::base()})
        ys[level].push_back(std::vector<double>(dim.bin_count(level), static_cast<double>(dim.cells_per_bin(level))));
    const auto s = ranking_effectiveness({dim}, Level(0), ys);
    EXPECT_TRUE(s.degenerate);
    EXPECT_FALSE(s.ad_only);
    EXPECT_TRUE(ranking_effectiveness({dim}, Level::base(), ys).degenerate);
}

TEST(RankingEffectiveness, AdOrderMatchesTruthWhenSubBinsCarryTheError) {
    // Four level-0 bins of 2 atomic cells; BASE is the next level, so AD and RE coincide.
    const DimensionSpec dim{"x", 0, 8, 1, 4, 0};
    LevelHistograms ys;
    ys[Level(0)] = {{10, 20, 30, 40}};
    ys[Level::base()] = {{4, 6, 10, 10, 10, 20, 15, 25}};
    const auto s = ranking_effectiveness({dim}, Level(0), ys);
    ASSERT_TRUE(s.ad_only);
    EXPECT_FALSE(s.degenerate);
    EXPECT_NEAR(*s.ad_only, 1.0, 1e-12);
    ASSERT_TRUE(s.igp_only);
    ASSERT_TRUE(s.average_rank);
    EXPECT_GE(*s.igp_only, -1.0);
    EXPECT_LE(*s.igp_only, 1.0);
}

TEST(Bench, ReportHasOneRowPerLevelAndRoundTrips) {
    const auto ds = zipf_dataset(20000, 4);
    BenchOptions o;
    o.queries = 24;
    o.runs = 3;
    o.seed = 9;
    o.engine = EngineOptions{2, 1};
    const auto r = run_bench(ds, o);
    ASSERT_EQ(r.report.levels.size(), 5u);  // 0..3 plus BASE
    EXPECT_EQ(r.report.levels.back().level, Level::base());
    EXPECT_EQ(r.report.runs, 3u);
    EXPECT_EQ(r.report.filter_states, 6u);
    EXPECT_TRUE(r.report.invariant_failures.empty()) << r.report.invariant_failures.front();
    EXPECT_EQ(r.log.records.size(), 3u * (24u + 6u));
    for (const auto& row : r.report.levels) {
        EXPECT_GT(row.rnr, 0.0);
        EXPECT_LE(row.rnr, 1.0);
        EXPECT_TRUE(row.re_mean);
        EXPECT_TRUE(row.re_median);
        EXPECT_TRUE(row.af);
        EXPECT_TRUE(row.rec);
        EXPECT_GT(row.sparsity, 0.0);
        if (!row.level.is_base()) {
            EXPECT_TRUE(row.spearman.ad_only);
            EXPECT_TRUE(row.spearman.igp_only);
            EXPECT_TRUE(row.spearman.average_rank);
        }
    }
    EXPECT_EQ(r.report.levels.back().rnr, 1.0);
    EXPECT_EQ(*r.report.levels.back().re_mean, 0.0);
    EXPECT_NEAR(*r.report.levels.back().rec, 0.0, 1e-12);
    for (std::size_t i = 1; i < r.report.levels.size(); ++i) {
        EXPECT_GE(r.report.levels[i].rct, r.report.levels[i - 1].rct);
        EXPECT_GE(r.report.levels[i].rnr, r.report.levels[i - 1].rnr);
    }

    const auto dir = temp_dir("progbin_bench");
    emit_report(r, dir / "report.json");
    EXPECT_EQ(load_report(dir / "report.json"), r.report);
    const auto log = load_log(dir / "report.log.json");
    EXPECT_EQ(log, r.log);
    // Every reported value comes back from the persisted log alone.
    EXPECT_EQ(summarize(log), r.report);
    const auto csv = progbin::detail::read_file(dir / "report.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
    EXPECT_EQ(csv.substr(0, 6), "level,");
    std::filesystem::remove_all(dir);
}

TEST(Bench, RunsUseFreshEnginesAndAgree) {
    const auto ds = zipf_dataset(5000, 6);
    BenchOptions o;
    o.queries = 12;
    o.runs = 2;
    o.engine = EngineOptions{3, 0};
    const auto log = run_workload(ds, simulate_workload("zipf", ds->hierarchy.dims, o.queries, 1), o);
    EXPECT_TRUE(log.run_mismatches.empty());
    std::vector<std::size_t> a, b;
    for (const auto& r : log.records) (r.run == 0 ? a : b).push_back(r.results);
    EXPECT_EQ(a, b);
}

TEST(Bench, BaseResultsMatchOracleUnderFinalFilters) {
    std::mt19937_64 rng(3);
    auto raw = oracle::random_raw(rng, 3000, 3, 2, 4);
    const auto ds = std::make_shared<const Dataset>(build_dataset(raw, BinHierarchy{raw.schema.dims, 2}));
    BenchOptions o;
    o.queries = 9;
    o.runs = 1;
    o.engine = EngineOptions{2, 1};
    const auto log = run_workload(ds, simulate_workload("r", ds->hierarchy.dims, o.queries, 4), o);
    for (const auto level : ds->hierarchy.levels())
        for (std::size_t d = 0; d < 3; ++d) {
            const auto want = oracle::brute_histogram(raw, log.final_predicates, d, level, raw.schema.measures[0]);
            const auto& got = log.final_histograms.at(level)[d];
            ASSERT_EQ(got.size(), want.size());
            for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i], static_cast<double>(want[i].count));
        }
}

TEST(Bench, SummaryFlagsBrokenLogs) {
    QueryLog log;
    log.dims = {DimensionSpec{"x", 0, 8, 1, 4, 0}};
    log.runs = 1;
    const auto rep = summarize(log);
    EXPECT_FALSE(rep.invariant_failures.empty());
    log.records = {{0, 0, 1, Level::base(), 5.0, 8}, {0, 0, 1, Level(0), 1.0, 10}};
    EXPECT_NE(std::find(summarize(log).invariant_failures.begin(), summarize(log).invariant_failures.end(), "RNR(0) outside (0, 1]"),
              summarize(log).invariant_failures.end());
}

TEST(RankReport, CoversEveryRefinableLevel) {
    const auto ds = zipf_dataset(20000, 2);
    Engine e(ds, EngineOptions{1, 1});
    const auto r = rank_report(e);
    ASSERT_EQ(r.levels.size(), 4u);
    for (const auto& row : r.levels) {
        EXPECT_FALSE(row.spearman.degenerate);
        EXPECT_TRUE(row.spearman.average_rank);
    }
    const json j = r;
    EXPECT_EQ(j["levels"].size(), 4u);
}
