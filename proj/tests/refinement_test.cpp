#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "progbin/refinement.hpp"

using namespace progbin;

namespace {

/// y of any cell as the sum of per-atomic-cell values.
class CellValues {
  public:
    CellValues(DimensionSpec dim, std::vector<double> atomic) : dim_(std::move(dim)), atomic_(std::move(atomic)) {}

    double operator()(const BinRef& r) const {
        const auto s = cell_span(r, dim_);
        double y = 0.0;
        for (auto a = s.begin; a < s.end; ++a) y += atomic_[a];
        return y;
    }

    ValueFn fn() const {
        return [this](const BinRef& r) { return (*this)(r); };
    }

    const DimensionSpec& dim() const { return dim_; }

  private:
    DimensionSpec dim_;
    std::vector<double> atomic_;
};

/// Four level-0 bins of 100 atomic cells with y {10,20,30,40} and level-1 halves
/// {4,6}, {10,10}, {10,20}, {15,25}; uniform below level 1.
CellValues worked_example() {
    const DimensionSpec dim{"x", 0, 400, 1, 4, 2};
    const std::vector<double> halves{4, 6, 10, 10, 10, 20, 15, 25};
    std::vector<double> atomic(400);
    for (std::size_t a = 0; a < 400; ++a) atomic[a] = halves[a / 50] / 50.0;
    return CellValues(dim, atomic);
}

CellValues random_values(std::mt19937_64& rng, int max_level = 3) {
    const std::uint64_t cells = std::uint64_t{4} << max_level;
    const DimensionSpec dim{"x", 0, static_cast<double>(cells), 1, 4, max_level};
    std::vector<double> atomic(cells);
    std::geometric_distribution<int> g(0.2);
    for (auto& v : atomic) v = g(rng);
    return CellValues(dim, atomic);
}

BinRef bin(Level l, std::uint64_t i) { return BinRef{0, l, i}; }

std::vector<BinRef> edited_cells(const PlanRound& r) {
    std::vector<BinRef> out;
    for (const auto& e : r.edits) out.push_back(e.cell);
    return out;
}

/// Every cell of `after` lies inside one cell of `before` at the same or a coarser level.
bool never_coarsens(const Frontier& before, const Frontier& after, const DimensionSpec& dim) {
    for (const auto& c : after.cells) {
        const auto s = cell_span(c, dim);
        const bool inside = std::any_of(before.cells.begin(), before.cells.end(), [&](const BinRef& b) {
            const auto o = cell_span(b, dim);
            return s.begin >= o.begin && s.end <= o.end && b.level <= c.level;
        });
        if (!inside) return false;
    }
    return true;
}

RefinementKnobs random_knobs(std::mt19937_64& rng, int max_level) {
    RefinementKnobs k;
    const int a = static_cast<int>(rng() % static_cast<std::uint64_t>(max_level + 1));
    const int b = a + static_cast<int>(rng() % static_cast<std::uint64_t>(max_level + 2 - a));
    k.min_ref = Level(a);
    k.max_ref = b > max_level ? Level::base() : Level(b);
    if (rng() % 2) k.max_nr = 4 + rng() % 40;
    if (rng() % 3 == 0) k.min_nr = std::min<std::size_t>(k.max_nr.value_or(64), rng() % 30);
    if (rng() % 2) k.min_ad = static_cast<double>(rng() % 100) / 100.0;
    if (rng() % 2) k.max_rec = static_cast<double>(rng() % 100) / 100.0;
    return k;
}

}  // namespace

TEST(RankResults, WorkedExampleOrder) {
    const std::vector<RankInput> in{{bin(Level(0), 0), 0.2, 2.0},
                                    {bin(Level(0), 1), 0.0, 2.86},
                                    {bin(Level(0), 2), 0.33, 3.82},
                                    {bin(Level(0), 3), 0.25, 5.03}};
    const auto order = rank_results(in);
    EXPECT_EQ(order, (std::vector<BinRef>{bin(Level(0), 0), bin(Level(0), 2), bin(Level(0), 1), bin(Level(0), 3)}));
    EXPECT_EQ(rank_results(in, RankingVariant::ad_only),
              (std::vector<BinRef>{bin(Level(0), 2), bin(Level(0), 3), bin(Level(0), 0), bin(Level(0), 1)}));
    EXPECT_EQ(rank_results(in, RankingVariant::igp_only),
              (std::vector<BinRef>{bin(Level(0), 0), bin(Level(0), 1), bin(Level(0), 2), bin(Level(0), 3)}));
}

TEST(RankResults, TiesKeepIndexOrder) {
    std::vector<RankInput> in;
    for (std::uint64_t i = 0; i < 6; ++i) in.push_back({bin(Level(1), i), 0.5, 1.5});
    const auto order = rank_results(in);
    for (std::uint64_t i = 0; i < 6; ++i) EXPECT_EQ(order[i].index, i);
}

TEST(RankResults, EmptyAndAllMassBinsRankLast) {
    const std::vector<RankInput> in{{bin(Level(0), 0), 0.0, std::nullopt}, {bin(Level(0), 1), 0.0, 1.0}};
    EXPECT_EQ(rank_results(in, RankingVariant::igp_only).front().index, 1u);
}

TEST(RankResults, OutputIsPermutation) {
    std::mt19937_64 rng(6);
    for (int t = 0; t < 100; ++t) {
        std::vector<RankInput> in;
        for (std::uint64_t i = 0; i < 1 + rng() % 20; ++i) {
            std::optional<double> igp;
            if (rng() % 5) igp = static_cast<double>(rng() % 7);
            in.push_back({bin(Level(2), i), static_cast<double>(rng() % 5) / 4.0, igp});
        }
        for (auto v : {RankingVariant::ad_only, RankingVariant::igp_only, RankingVariant::average_rank}) {
            auto order = rank_results(in, v);
            std::sort(order.begin(), order.end(), [](const BinRef& a, const BinRef& b) { return a.index < b.index; });
            ASSERT_EQ(order.size(), in.size());
            for (std::size_t i = 0; i < in.size(); ++i) EXPECT_EQ(order[i], in[i].ref);
        }
    }
}

TEST(SelectTop, AcceptsSplitsWithinBudget) {
    const DimensionSpec dim{"x", 0, 400, 1, 4, 2};
    const std::vector<BinRef> ranked{bin(Level(0), 2), bin(Level(0), 0), bin(Level(0), 1), bin(Level(0), 3)};
    // Four cells split into eight; six displayed: two parents refined, two kept.
    auto f = Frontier::uniform(0, dim, Level(0));
    const auto accepted = select_top(ranked, 4, 6, dim);
    EXPECT_EQ(accepted, (std::vector<BinRef>{bin(Level(0), 2), bin(Level(0), 0)}));
    for (const auto& c : accepted) f.replace(c, sub_bins(c, dim));
    EXPECT_EQ(f.cells.size(), 6u);
    EXPECT_TRUE(f.is_valid(dim));
    EXPECT_EQ(select_top(ranked, 4, 100, dim).size(), 4u);
    EXPECT_TRUE(select_top(ranked, 4, 0, dim).empty());
}

TEST(GroPlan, MinRefBeyondMaxNrSelectsTopRanked) {
    const auto v = worked_example();
    RefinementKnobs k;
    k.min_ref = Level(1);
    k.max_nr = 6;
    const auto plan = gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), k);
    ASSERT_EQ(plan.rounds.size(), 1u);
    EXPECT_EQ(plan.rounds[0].rule, "min_ref");
    EXPECT_EQ(plan.rounds[0].frontier.cells.size(), 8u);
    EXPECT_EQ(plan.stop_reason, "max_nr");
    ASSERT_EQ(plan.selected.size(), 6u);
    // Uniform-below cells have AD 0; ranking falls to IGP, so the smallest bins lead.
    for (const auto& c : plan.selected) EXPECT_EQ(c.level, Level(1));
}

TEST(GroPlan, DefaultKnobsRefineToBase) {
    const auto v = worked_example();
    const auto plan = gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), RefinementKnobs{});
    ASSERT_EQ(plan.rounds.size(), 3u);  // max_level 2: levels 1, 2, then BASE
    EXPECT_EQ(plan.rounds.back().frontier, Frontier::uniform(0, v.dim(), Level::base()));
    EXPECT_EQ(plan.stop_reason, "max_ref");
}

TEST(GroPlan, MinAdKeepsOnlyDeviatingBins) {
    const auto v = worked_example();
    RefinementKnobs k;
    k.min_ad = 0.3;
    const auto plan = gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), k);
    ASSERT_EQ(plan.rounds.size(), 1u);
    EXPECT_EQ(edited_cells(plan.rounds[0]), (std::vector<BinRef>{bin(Level(0), 2)}));
    EXPECT_EQ(plan.stop_reason, "min_ad");
}

TEST(GroPlan, LevelsOutrankCounts) {
    const auto v = worked_example();
    RefinementKnobs k;
    k.min_ref = Level(2);
    k.max_nr = 3;
    const auto plan = gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), k);
    EXPECT_EQ(plan.rounds.back().frontier, Frontier::uniform(0, v.dim(), Level(2)));
    EXPECT_EQ(plan.selected.size(), 3u);

    RefinementKnobs cap;
    cap.max_ref = Level(1);
    cap.min_nr = 100;
    const auto capped = gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), cap);
    EXPECT_EQ(capped.rounds.back().frontier.cells.size(), 8u);
    EXPECT_EQ(capped.stop_reason, "max_ref");
}

TEST(GroPlan, CountsOutrankAd) {
    const auto v = worked_example();
    // Every bin but bin 2 passes min_ad 0.1, yet only six cells fit.
    RefinementKnobs k;
    k.min_ad = 0.1;
    k.max_nr = 6;
    const auto plan = gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), k);
    ASSERT_EQ(plan.rounds.size(), 1u);
    EXPECT_EQ(plan.rounds[0].frontier.cells.size(), 6u);
    EXPECT_EQ(plan.stop_reason, "max_nr");

    // min_nr forces splits that min_ad would veto.
    RefinementKnobs force;
    force.min_ad = 10.0;
    force.min_nr = 7;
    const auto forced = gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), force);
    ASSERT_FALSE(forced.rounds.empty());
    EXPECT_EQ(forced.rounds[0].rule, "min_nr");
    EXPECT_GE(forced.rounds.back().frontier.cells.size(), 7u);
}

TEST(GroPlan, AdOutranksRec) {
    const auto v = worked_example();
    // REC of the bins: {0.29, 0.43, 0.52, 0.75}. max_rec 0.6 admits bins 0-2, min_ad 0.1 then drops bin 1.
    RefinementKnobs k;
    k.min_ad = 0.1;
    k.max_rec = 0.6;
    const auto plan = gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), k);
    ASSERT_FALSE(plan.rounds.empty());
    auto cells = edited_cells(plan.rounds[0]);
    std::sort(cells.begin(), cells.end(), [](auto& a, auto& b) { return a.index < b.index; });
    EXPECT_EQ(cells, (std::vector<BinRef>{bin(Level(0), 0), bin(Level(0), 2)}));

    // max_rec alone stops only bin 3.
    RefinementKnobs rec_only;
    rec_only.max_rec = 0.6;
    const auto r = gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), rec_only);
    auto rc = edited_cells(r.rounds[0]);
    std::sort(rc.begin(), rc.end(), [](auto& a, auto& b) { return a.index < b.index; });
    EXPECT_EQ(rc, (std::vector<BinRef>{bin(Level(0), 0), bin(Level(0), 1), bin(Level(0), 2)}));
}

TEST(GroPlan, ScopeLimitsRefinement) {
    const auto v = worked_example();
    RefinementKnobs k;
    k.scope.kind = RefinementScope::Kind::bin;
    k.scope.bin = bin(Level(0), 1);
    const auto plan = gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), k);
    const auto& f = plan.rounds.back().frontier;
    for (const auto& c : f.cells) {
        const auto s = cell_span(c, v.dim());
        EXPECT_EQ(c.level == Level(0), s.begin < 100 || s.begin >= 200);
    }
    RefinementKnobs other;
    other.scope.kind = RefinementScope::Kind::dim;
    other.scope.dim = 3;
    EXPECT_TRUE(gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), other).rounds.empty());
}

TEST(GroPlan, RejectsInconsistentKnobs) {
    const auto v = worked_example();
    RefinementKnobs k;
    k.min_ref = Level(2);
    k.max_ref = Level(1);
    EXPECT_THROW(gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), k), config_error);
    RefinementKnobs n;
    n.min_nr = 5;
    n.max_nr = 4;
    EXPECT_THROW(gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), n), config_error);
    RefinementKnobs deep;
    deep.min_ref = Level(5);
    EXPECT_THROW(gro_plan(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn(), deep), config_error);
}

TEST(GroPlan, EveryRoundTilesAndNeverCoarsens) {
    std::mt19937_64 rng(19);
    for (int t = 0; t < 300; ++t) {
        const auto v = random_values(rng);
        const auto k = random_knobs(rng, 3);
        auto start = Frontier::uniform(0, v.dim(), Level(0));
        const auto plan = gro_plan(v.dim(), start, v.fn(), k);
        Frontier prev = start;
        for (const auto& r : plan.rounds) {
            ASSERT_TRUE(r.frontier.is_valid(v.dim()));
            ASSERT_TRUE(never_coarsens(prev, r.frontier, v.dim()));
            for (const auto& c : r.frontier.cells) {
                if (!(c.level <= k.max_ref)) ADD_FAILURE() << "cell past max_ref";
            }
            prev = r.frontier;
        }
        for (const auto& c : prev.cells) EXPECT_GE(c.level, k.min_ref);
        if (!plan.selected.empty()) EXPECT_EQ(plan.selected.size(), *k.max_nr);
        else if (k.max_nr && prev.cells.size() > *k.max_nr) {
            // Only min_ref may push the count past max_nr, and then cells are selected.
            ADD_FAILURE() << prev.cells.size() << " cells over max_nr " << *k.max_nr;
        }
    }
}

TEST(GroPlan, DeterministicAndScaleInvariant) {
    std::mt19937_64 rng(23);
    for (int t = 0; t < 100; ++t) {
        const auto v = random_values(rng);
        const auto k = random_knobs(rng, 3);
        const auto start = Frontier::uniform(0, v.dim(), Level(0));
        const auto a = gro_plan(v.dim(), start, v.fn(), k);
        const auto b = gro_plan(v.dim(), start, v.fn(), k);
        const ValueFn scaled = [&](const BinRef& r) { return 8.0 * v(r); };
        const auto c = gro_plan(v.dim(), start, scaled, k);
        ASSERT_EQ(a.rounds.size(), b.rounds.size());
        ASSERT_EQ(a.rounds.size(), c.rounds.size());
        for (std::size_t i = 0; i < a.rounds.size(); ++i) {
            EXPECT_EQ(a.rounds[i].frontier, b.rounds[i].frontier);
            EXPECT_EQ(a.rounds[i].frontier, c.rounds[i].frontier);
        }
        EXPECT_EQ(a.selected, c.selected);
        EXPECT_EQ(a.stop_reason, c.stop_reason);
    }
}

TEST(RankResults, ScaleInvariant) {
    std::mt19937_64 rng(29);
    for (int t = 0; t < 100; ++t) {
        const auto v = random_values(rng);
        const auto f = Frontier::uniform(0, v.dim(), Level(1));
        double total = 0;
        for (const auto& c : f.cells) total += v(c);
        auto inputs = [&](double scale) {
            std::vector<RankInput> in;
            for (const auto& c : f.cells) {
                metrics::BinSplit s{scale * v(c), {}, scale * total};
                for (const auto& sb : sub_bins(c, v.dim())) s.subs.push_back(scale * v(sb));
                in.push_back({c, metrics::average_deviance(s), metrics::bin_igp(total > 0 ? v(c) / total : 0, 2)});
            }
            return in;
        };
        EXPECT_EQ(rank_results(inputs(1.0)), rank_results(inputs(1000.0)));
    }
}

TEST(RefineToMax, OneRoundPerLevel) {
    const DimensionSpec dim{"x", 0, 128, 1, 4, 4};
    const auto start = Frontier::uniform(0, dim, Level(0));
    const auto plan = refine_to_max(dim, start);
    ASSERT_EQ(plan.rounds.size(), 5u);
    for (int k = 0; k < 4; ++k) EXPECT_EQ(plan.rounds[k].frontier, Frontier::uniform(0, dim, Level(k + 1)));
    EXPECT_EQ(plan.rounds[4].frontier, Frontier::uniform(0, dim, Level::base()));
    EXPECT_TRUE(refine_to_max(dim, Frontier::uniform(0, dim, Level::base())).rounds.empty());
}

TEST(RunHighest, SingleRoundEqualsRefineToMaxResult) {
    const DimensionSpec dim{"x", 0, 128, 1, 4, 4};
    auto mixed = Frontier::uniform(0, dim, Level(0));
    mixed.replace(bin(Level(0), 1), sub_bins(bin(Level(0), 1), dim));
    for (const auto& start : {Frontier::uniform(0, dim, Level(0)), Frontier::uniform(0, dim, Level(3)), mixed}) {
        const auto plan = run_highest(dim, start);
        ASSERT_EQ(plan.rounds.size(), 1u);
        EXPECT_EQ(plan.rounds[0].frontier, refine_to_max(dim, start).rounds.back().frontier);
        for (const auto& e : plan.rounds[0].edits) EXPECT_EQ(e.kind, FrontierEdit::Kind::to_base);
    }
}

TEST(RefineUntilUninteresting, StopsAtUniformSplits) {
    const auto v = worked_example();
    const auto plan = refine_until_uninteresting(v.dim(), Frontier::uniform(0, v.dim(), Level(0)), v.fn());
    ASSERT_EQ(plan.rounds.size(), 1u);
    auto cells = edited_cells(plan.rounds[0]);
    std::sort(cells.begin(), cells.end(), [](auto& a, auto& b) { return a.index < b.index; });
    EXPECT_EQ(cells, (std::vector<BinRef>{bin(Level(0), 0), bin(Level(0), 2), bin(Level(0), 3)}));
    EXPECT_EQ(plan.stop_reason, "min_ad");
}

TEST(RefineUntilUninteresting, ThresholdIsInclusive) {
    // Parent 20 with halves {9, 11}: AD exactly 0.1.
    ASSERT_EQ(metrics::average_deviance(metrics::BinSplit{20, {9, 11}, 20}), kInterestingAd);
    const DimensionSpec one{"x", 0, 2, 1, 1, 0};
    const CellValues w(one, {9, 11});
    const auto plan = refine_until_uninteresting(one, Frontier::uniform(0, one, Level(0)), w.fn());
    ASSERT_EQ(plan.rounds.size(), 1u);
    EXPECT_EQ(plan.rounds[0].edits[0].kind, FrontierEdit::Kind::to_base);
}
