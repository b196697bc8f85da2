#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "oracle.hpp"
#include "progbin/binner.hpp"
#include "progbin/metrics.hpp"
#include "progbin/synth.hpp"

using namespace progbin;
namespace fs = std::filesystem;

namespace {

class TempDir {
  public:
    TempDir() {
        path_ = fs::temp_directory_path() / ("progbin_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

  private:
    fs::path path_;
};

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

Schema xy_schema() {
    Schema s;
    s.name = "xy";
    s.dims = {DimensionSpec{"x", 0, 100, 1, 4, 0}, DimensionSpec{"y", 0, 8, 1, 2, 2}};
    s.measures = {MeasureSpec{"count", MeasureKind::count, ""}, MeasureSpec{"sum_v", MeasureKind::sum, "v"}};
    return s;
}

BinHierarchy hierarchy_of(const RawDataset& raw) { return BinHierarchy{raw.schema.dims, raw.schema.dims.front().max_level}; }

/// Independent group-by keyed on bin tuples.
std::map<std::vector<std::uint32_t>, Aggregate> brute_group_by(const RawDataset& raw, Level level) {
    std::map<std::vector<std::uint32_t>, Aggregate> out;
    for (std::size_t r = 0; r < raw.rows(); ++r) {
        std::vector<std::uint32_t> key;
        for (std::size_t d = 0; d < raw.dims.size(); ++d)
            key.push_back(static_cast<std::uint32_t>(bin_of(raw.dims[d][r], raw.schema.dims[d], level)));
        auto& a = out[key];
        a.count += 1;
        a.sum += raw.values[0][r];
        a.min = std::min(a.min, raw.values[0][r]);
        a.max = std::max(a.max, raw.values[0][r]);
    }
    return out;
}

}  // namespace

TEST(ComputeHierarchy, HalvesWidthPerLevel) {
    DimensionSpec d{"x", 0, 100, 0.25, 0, 0};
    const auto h = compute_hierarchy({d}, {4}, 2);
    EXPECT_DOUBLE_EQ(h.dims[0].width(Level(0)), 25);
    EXPECT_DOUBLE_EQ(h.dims[0].width(Level(1)), 12.5);
    EXPECT_DOUBLE_EQ(h.dims[0].width(Level(2)), 6.25);
    for (int k = 0; k < 2; ++k) {
        const auto coarse = h.boundaries(0, Level(k));
        const auto fine = h.boundaries(0, Level(k + 1));
        for (double b : coarse) EXPECT_NE(std::find(fine.begin(), fine.end(), b), fine.end());
    }
}

TEST(ComputeHierarchy, FiveBinnedLevelsGiveSixResolutions) {
    DimensionSpec d{"x", 0, 1024, 1, 0, 0};
    const auto h = compute_hierarchy({d}, {32}, 4);
    const auto levels = h.levels();
    ASSERT_EQ(levels.size(), 6u);
    EXPECT_EQ(levels.back(), Level::base());
}

TEST(ComputeHierarchy, RejectsNonDivisibleDomain) {
    DimensionSpec d{"x", 0, 100, 1, 0, 0};
    EXPECT_THROW(compute_hierarchy({d}, {32}, 0), config_error);
    EXPECT_THROW(compute_hierarchy({d, d}, {4, 4, 4}, 0), config_error);
}

TEST(MaterializeLevel, SingleCellCountsAllRows) {
    RawDataset raw;
    raw.schema = xy_schema();
    raw.value_names = {"v"};
    raw.dims = {{1, 2, 3}, {0, 0, 1}};
    raw.values = {{1, 2, 3}};
    const auto t = materialize_level(raw, hierarchy_of(raw), Level(0));
    ASSERT_EQ(t.row_count(), 1u);
    EXPECT_EQ(t.count[0], 3);
    EXPECT_EQ(t.comps[1][0], 6);
}

TEST(MaterializeLevel, ReportsOutOfDomainRow) {
    RawDataset raw;
    raw.schema = xy_schema();
    raw.value_names = {"v"};
    raw.dims = {{1, 100}, {0, 0}};
    raw.values = {{1, 2}};
    try {
        materialize_level(raw, hierarchy_of(raw), Level(0));
        FAIL();
    } catch (const ingest_error& e) {
        EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos);
    }
}

TEST(MaterializeLevel, MatchesBruteForceGroupBy) {
    std::mt19937_64 rng(42);
    auto raw = oracle::random_raw(rng, 10000);
    const auto h = hierarchy_of(raw);
    for (const auto level : h.levels()) {
        const auto t = materialize_level(raw, h, level);
        const auto expected = brute_group_by(raw, level);
        ASSERT_EQ(t.row_count(), expected.size());
        std::size_t r = 0;
        for (const auto& [key, agg] : expected) {
            for (std::size_t d = 0; d < key.size(); ++d) ASSERT_EQ(t.bins[d][r], key[d]);
            ASSERT_EQ(t.aggregate(r, 0).count, agg.count);
            ASSERT_EQ(t.aggregate(r, 1).sum, agg.sum);
            ASSERT_EQ(t.aggregate(r, 2).min, agg.min);
            ASSERT_EQ(t.aggregate(r, 3).max, agg.max);
            ASSERT_EQ(t.aggregate(r, 4).sum, agg.sum);
            ++r;
        }
    }
}

TEST(MaterializeLevel, ConservesCountsAndRollsUpExactly) {
    std::mt19937_64 rng(3);
    auto raw = oracle::random_raw(rng, 5000);
    const auto h = hierarchy_of(raw);
    const auto ds = build_dataset(raw, h);
    for (const auto level : h.levels()) EXPECT_EQ(ds.table(level).total_count(), static_cast<std::int64_t>(raw.rows()));
    // Roll-up of each level equals the level materialized straight from raw rows.
    for (const auto level : h.levels()) EXPECT_EQ(ds.table(level), materialize_level(raw, h, level));
}

TEST(MaterializeLevel, SparsityNonIncreasingInLevel) {
    std::mt19937_64 rng(8);
    auto raw = oracle::random_raw(rng, 3000);
    const auto h = hierarchy_of(raw);
    const auto ds = build_dataset(raw, h);
    double prev = 2.0;
    for (const auto level : h.levels()) {
        const auto& t = ds.table(level);
        EXPECT_LE(static_cast<double>(t.row_count()), std::min<double>(raw.rows(), h.max_rows(level)));
        const double s = metrics::sparsity(t, h);
        EXPECT_LE(s, prev);
        prev = s;
    }
}

TEST(IngestCsv, ParsesWellFormedFile) {
    TempDir tmp;
    write_text(tmp.path() / "in.csv", "x,y,v\n1,2,3.5\n99.5,7,-1\n");
    const auto raw = ingest_csv(tmp.path() / "in.csv", xy_schema());
    EXPECT_EQ(raw.rows(), 2u);
    EXPECT_EQ(raw.dims[1][1], 7);
    EXPECT_EQ(raw.value_column("v")[0], 3.5);
}

TEST(IngestCsv, RejectsDomainMaxNamingRow) {
    TempDir tmp;
    write_text(tmp.path() / "in.csv", "x,y,v\n1,2,3\n100,1,1\n");
    try {
        ingest_csv(tmp.path() / "in.csv", xy_schema());
        FAIL();
    } catch (const ingest_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
        EXPECT_NE(msg.find("'x'"), std::string::npos) << msg;
    }
}

TEST(IngestCsv, RejectsMissingColumnAndNonNumericCell) {
    TempDir tmp;
    write_text(tmp.path() / "a.csv", "x,v\n1,2\n");
    EXPECT_THROW(ingest_csv(tmp.path() / "a.csv", xy_schema()), ingest_error);
    write_text(tmp.path() / "b.csv", "x,y,v\n1,abc,2\n");
    EXPECT_THROW(ingest_csv(tmp.path() / "b.csv", xy_schema()), ingest_error);
    EXPECT_THROW(ingest_csv(tmp.path() / "missing.csv", xy_schema()), io_error);
}

TEST(IngestCsv, RoundTripsThroughWriteCsv) {
    TempDir tmp;
    std::mt19937_64 rng(1);
    auto raw = oracle::random_raw(rng, 500);
    raw.values[0][0] = 0.1;  // a value that needs shortest round-trip formatting
    write_csv(raw, tmp.path() / "r.csv");
    const auto back = ingest_csv(tmp.path() / "r.csv", raw.schema);
    EXPECT_EQ(back, raw);
}

namespace {

SyntheticSpec one_dim_spec(Distribution dist, std::uint32_t level0 = 32) {
    SyntheticSpec s;
    s.schema.dims = {DimensionSpec{"a", 0, 1024, 1, level0, 2}};
    s.schema.measures = {MeasureSpec{}};
    s.dim_distributions = {dist};
    return s;
}

}  // namespace

TEST(GenerateSynthetic, DeterministicForSeed) {
    TempDir tmp;
    SyntheticSpec s = one_dim_spec(Distribution{Distribution::Kind::zipf, 0, 1, 1.1, 2});
    s.schema.dims.push_back(DimensionSpec{"b", -4, 4, 0.5, 4, 1});
    s.dim_distributions.push_back(Distribution{Distribution::Kind::normal, 0, 2});
    s.schema.measures.push_back(MeasureSpec{"sum_v", MeasureKind::sum, "v"});
    s.value_columns.push_back(ValueColumnSpec{DimensionSpec{"v", 0, 10, 0.01}, {}});
    write_csv(generate_synthetic(s, 2000, 7), tmp.path() / "a.csv");
    write_csv(generate_synthetic(s, 2000, 7), tmp.path() / "b.csv");
    EXPECT_EQ(detail::read_file(tmp.path() / "a.csv"), detail::read_file(tmp.path() / "b.csv"));
    EXPECT_NE(generate_synthetic(s, 2000, 8), generate_synthetic(s, 2000, 7));
}

TEST(GenerateSynthetic, UniformLevelZeroCountsWithinBinomialBound) {
    const std::size_t n = 1'000'000;
    const auto s = one_dim_spec(Distribution{});
    const auto raw = generate_synthetic(s, n, 17);
    const auto h = BinHierarchy{s.schema.dims, 2};
    const auto t = materialize_level(raw, h, Level(0));
    ASSERT_EQ(t.row_count(), 32u);
    const double p = 1.0 / 32.0;
    const double mean = n * p, sigma = std::sqrt(n * p * (1 - p));
    for (auto c : t.count) EXPECT_LE(std::abs(static_cast<double>(c) - mean), 5 * sigma);
}

TEST(GenerateSynthetic, ZipfLevelZeroMassStrictlyDecreasing) {
    const std::size_t n = 1'000'000;
    const Distribution zipf{Distribution::Kind::zipf, 0, 1, 1.0, 0};
    const auto s = one_dim_spec(zipf);
    const auto masses = bin_masses(zipf, s.schema.dims[0], Level(0));
    for (std::size_t i = 1; i < masses.size(); ++i) EXPECT_LT(masses[i], masses[i - 1]);
    const auto raw = generate_synthetic(s, n, 23);
    const auto t = materialize_level(raw, BinHierarchy{s.schema.dims, 2}, Level(0));
    ASSERT_EQ(t.row_count(), masses.size());
    for (std::size_t i = 0; i < masses.size(); ++i) {
        const double mean = n * masses[i], sigma = std::sqrt(n * masses[i] * (1 - masses[i]));
        EXPECT_LE(std::abs(static_cast<double>(t.count[i]) - mean), 5 * sigma) << "bin " << i;
    }
}

TEST(GenerateSynthetic, RejectsInvalidParameters) {
    EXPECT_THROW(generate_synthetic(one_dim_spec(Distribution{Distribution::Kind::zipf, 0, 1, -1, 0}), 10, 1), config_error);
    EXPECT_THROW(generate_synthetic(one_dim_spec(Distribution{Distribution::Kind::normal, 0, 0}), 10, 1), config_error);
    EXPECT_THROW(generate_synthetic(one_dim_spec(Distribution{}), 0, 1), config_error);
}

TEST(Manifest, BuildThenLoadRoundTrips) {
    TempDir tmp;
    std::mt19937_64 rng(4);
    auto raw = oracle::random_raw(rng, 2000);
    raw.schema.name = "rt";
    const auto ds = build_dataset(raw, hierarchy_of(raw));
    const auto m = write_manifest(ds, tmp.path());
    EXPECT_EQ(m.levels.size(), ds.hierarchy.levels().size());
    const auto back = load_dataset(tmp.path());
    EXPECT_EQ(back.name, "rt");
    EXPECT_EQ(back.measures, ds.measures);
    for (const auto level : ds.hierarchy.levels()) EXPECT_EQ(back.table(level), ds.table(level));

    const auto j = json::parse(detail::read_file(tmp.path() / "manifest.json"));
    std::set<std::string> keys;
    for (auto it = j.begin(); it != j.end(); ++it) keys.insert(it.key());
    EXPECT_EQ(keys, (std::set<std::string>{"name", "version", "dims", "measures", "levels"}));
    EXPECT_EQ(j["levels"].back()["level"], "base");
    for (const auto& l : j["levels"]) {
        const auto level = level_from_json(l["level"]);
        EXPECT_EQ(l["row_count"].get<std::size_t>(), ds.table(level).row_count());
    }
}

TEST(Manifest, DetectsTamperedRowCount) {
    TempDir tmp;
    std::mt19937_64 rng(6);
    auto raw = oracle::random_raw(rng, 300);
    write_manifest(build_dataset(raw, hierarchy_of(raw)), tmp.path());
    auto j = json::parse(detail::read_file(tmp.path() / "manifest.json"));
    j["levels"][1]["row_count"] = j["levels"][1]["row_count"].get<int>() + 1;
    write_text(tmp.path() / "manifest.json", j.dump());
    EXPECT_THROW(load_dataset(tmp.path()), ingest_error);
}

TEST(Manifest, DetectsMissingLevel) {
    TempDir tmp;
    std::mt19937_64 rng(6);
    auto raw = oracle::random_raw(rng, 300);
    write_manifest(build_dataset(raw, hierarchy_of(raw)), tmp.path());
    auto j = json::parse(detail::read_file(tmp.path() / "manifest.json"));
    j["levels"].erase(0);
    write_text(tmp.path() / "manifest.json", j.dump());
    EXPECT_THROW(load_dataset(tmp.path()), ingest_error);
}
