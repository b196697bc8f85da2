#pragma once

// Result ranking, the knob-driven generalized refinement operator and the
// single-click refinement operators. Planning is pure: cell values come from
// a caller-supplied lookup, and plans are produced one progressive round at a
// time so a caller can stop between rounds.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "core.hpp"
#include "metrics.hpp"

namespace progbin {

/// y-value of any cell under the current filters.
using ValueFn = std::function<double(const BinRef&)>;

struct RefinementScope {
    enum class Kind { all, dim, bin };
    Kind kind = Kind::all;
    std::size_t dim = 0;
    BinRef bin;  // for Kind::bin
};

struct RefinementKnobs {
    Level min_ref{0};
    Level max_ref = Level::base();
    std::size_t min_nr = 0;
    std::optional<std::size_t> max_nr;
    double min_ad = 0.0;
    std::optional<double> max_rec;
    RefinementScope scope;

    void validate() const {
        if (max_ref < min_ref) throw config_error("min_ref must not exceed max_ref");
        if (max_nr && min_nr > *max_nr) throw config_error("min_nr must not exceed max_nr");
        if (!(min_ad >= 0.0)) throw config_error("min_ad must be non-negative");
    }

    /// Whether any metric-driven knob is active (otherwise planning needs no values).
    bool uses_metrics() const { return min_ad > 0.0 || max_rec.has_value() || max_nr.has_value() || min_nr > 0; }
};

/// Per-cell inputs to ranking. `igp` is empty for cells without mass.
struct RankInput {
    BinRef ref;
    double ad = 0.0;
    std::optional<double> igp;
};

enum class RankingVariant { ad_only, igp_only, average_rank };

namespace detail {

/// 1-based ranks with ties sharing their average rank; `better(a, b)` orders best first.
template <class Better>
std::vector<double> fractional_ranks(std::size_t n, Better better) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), better);
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i + 1;
        while (j < n && !better(idx[i], idx[j]) && !better(idx[j], idx[i])) ++j;
        const double r = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) rank[idx[k]] = r;
        i = j;
    }
    return rank;
}

inline double igp_key(const std::optional<double>& v) { return v ? *v : std::numeric_limits<double>::infinity(); }

}  // namespace detail

/// Most important first. Higher AD and lower IGP are better; the default averages
/// both rank positions. Ties keep the input (x) order.
inline std::vector<BinRef> rank_results(std::span<const RankInput> cells, RankingVariant variant = RankingVariant::average_rank) {
    const auto n = cells.size();
    const auto by_ad = detail::fractional_ranks(n, [&](std::size_t a, std::size_t b) { return cells[a].ad > cells[b].ad; });
    const auto by_igp = detail::fractional_ranks(
        n, [&](std::size_t a, std::size_t b) { return detail::igp_key(cells[a].igp) < detail::igp_key(cells[b].igp); });
    std::vector<double> score(n);
    for (std::size_t i = 0; i < n; ++i) {
        switch (variant) {
            case RankingVariant::ad_only: score[i] = by_ad[i]; break;
            case RankingVariant::igp_only: score[i] = by_igp[i]; break;
            case RankingVariant::average_rank: score[i] = (by_ad[i] + by_igp[i]) / 2.0; break;
        }
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
    std::vector<BinRef> out;
    out.reserve(n);
    for (auto i : idx) out.push_back(cells[i].ref);
    return out;
}

/// Accept splits of `ranked` cells, best first, while the plot stays within `max_nr`
/// displayed cells. Rejected cells stay at their current resolution.
inline std::vector<BinRef> select_top(std::span<const BinRef> ranked, std::size_t current_count, std::size_t max_nr,
                                      const DimensionSpec& dim) {
    std::vector<BinRef> accepted;
    for (const auto& c : ranked) {
        const auto grows = dim.ratio(next_level(c.level, dim), c.level) - 1;
        if (current_count + grows > max_nr) break;
        current_count += grows;
        accepted.push_back(c);
    }
    return accepted;
}

struct FrontierEdit {
    enum class Kind { split, to_base };
    Kind kind = Kind::split;
    BinRef cell;
    std::vector<BinRef> replacement;
};

struct PlanRound {
    std::size_t dim = 0;
    std::vector<FrontierEdit> edits;
    Frontier frontier;  // after the round
    std::string rule;   // knob that drove the round
};

struct RefinementPlan {
    std::vector<PlanRound> rounds;
    std::string stop_reason;
    /// Display order chosen by ranking when the level knobs leave more cells than max_nr.
    std::vector<BinRef> selected;
};

/// Knob-driven refinement of one plot, one level per round.
///
/// Knobs bind in the order levels, counts, AD, REC:
///  - cells below min_ref are refined unconditionally;
///  - if that already exceeds max_nr, refinement stops and the top max_nr cells are selected by rank;
///  - otherwise cells below max_ref keep refining while their split has AD >= min_ad and
///    REC <= max_rec, best ranked first, as long as the plot stays within max_nr cells;
///  - when that leaves fewer than min_nr cells, the best stopped cells are refined anyway.
class GroPlanner {
  public:
    GroPlanner(const DimensionSpec& dim, Frontier start, RefinementKnobs knobs)
        : dim_(dim), frontier_(std::move(start)), knobs_(std::move(knobs)) {
        knobs_.validate();
        frontier_.validate(dim_);
        if (!dim_.has_level(knobs_.min_ref) || !dim_.has_level(knobs_.max_ref))
            throw config_error("refinement levels outside the hierarchy of '" + dim_.name + "'");
    }

    const Frontier& frontier() const { return frontier_; }
    bool done() const { return done_; }
    const std::string& stop_reason() const { return stop_reason_; }
    const std::vector<BinRef>& selected() const { return selected_; }

    std::optional<PlanRound> next(const ValueFn& values) {
        if (done_) return std::nullopt;

        std::vector<BinRef> below_min;
        for (const auto& c : frontier_.cells)
            if (in_scope(c) && c.level < knobs_.min_ref) below_min.push_back(c);
        if (!below_min.empty()) return apply(below_min, "min_ref");

        const auto count = frontier_.cells.size();
        if (knobs_.max_nr && count > *knobs_.max_nr) {
            auto ranked = rank(scoped_cells(), values);
            ranked.resize(*knobs_.max_nr);
            selected_ = std::move(ranked);
            return finish("max_nr");
        }

        std::vector<BinRef> candidates;
        for (const auto& c : frontier_.cells)
            if (in_scope(c) && c.level < knobs_.max_ref && !c.level.is_base() && !is_frozen(c)) candidates.push_back(c);
        if (candidates.empty()) return min_nr_round(values, last_freeze_.empty() ? "max_ref" : last_freeze_);

        if (!knobs_.uses_metrics()) return apply(candidates, "max_ref");

        std::vector<BinRef> qualifying;
        for (const auto& c : candidates) {
            const auto split = split_of(c, values);
            if (metrics::average_deviance(split) < knobs_.min_ad) {
                freeze(c, "min_ad");
                continue;
            }
            const auto rec = metrics::bin_rec(split);
            if (knobs_.max_rec && rec && *rec > *knobs_.max_rec) {
                freeze(c, "max_rec");
                continue;
            }
            qualifying.push_back(c);
        }
        if (qualifying.empty()) return min_nr_round(values, last_freeze_.empty() ? "max_ref" : last_freeze_);

        auto ranked = rank(qualifying, values);
        if (!knobs_.max_nr) return apply(ranked, "ad_rec");
        auto accepted = select_top(ranked, count, *knobs_.max_nr, dim_);
        if (accepted.empty()) return min_nr_round(values, "max_nr");
        const bool budget_bound = accepted.size() < ranked.size();
        auto round = apply(accepted, "max_nr");
        if (budget_bound) {
            done_ = true;
            stop_reason_ = "max_nr";
        }
        return round;
    }

  private:
    bool in_scope(const BinRef& c) const {
        switch (knobs_.scope.kind) {
            case RefinementScope::Kind::all: return true;
            case RefinementScope::Kind::dim: return c.dim == knobs_.scope.dim;
            case RefinementScope::Kind::bin: {
                if (c.dim != knobs_.scope.bin.dim) return false;
                const auto outer = cell_span(knobs_.scope.bin, dim_);
                const auto inner = cell_span(c, dim_);
                return inner.begin >= outer.begin && inner.end <= outer.end;
            }
        }
        return false;
    }

    std::vector<BinRef> scoped_cells() const {
        std::vector<BinRef> out;
        for (const auto& c : frontier_.cells)
            if (in_scope(c)) out.push_back(c);
        return out;
    }

    bool is_frozen(const BinRef& c) const { return std::find(frozen_.begin(), frozen_.end(), c) != frozen_.end(); }

    void freeze(const BinRef& c, const char* why) {
        frozen_.push_back(c);
        last_freeze_ = why;
    }

    double plot_total(const ValueFn& values) const {
        double t = 0.0;
        for (const auto& c : frontier_.cells) t += values(c);
        return t;
    }

    metrics::BinSplit split_of(const BinRef& c, const ValueFn& values) {
        if (!total_) total_ = plot_total(values);
        metrics::BinSplit s{values(c), {}, *total_};
        for (const auto& sb : sub_bins(c, dim_)) s.subs.push_back(values(sb));
        return s;
    }

    std::vector<BinRef> rank(const std::vector<BinRef>& cells, const ValueFn& values) {
        if (!total_) total_ = plot_total(values);
        std::vector<RankInput> in;
        for (const auto& c : cells) {
            RankInput r{c, 0.0, std::nullopt};
            const auto y = values(c);
            const auto n = c.level.is_base() ? 1 : dim_.cells_per_bin(c.level);
            r.igp = metrics::bin_igp(*total_ > 0.0 ? y / *total_ : 0.0, n);
            if (!c.level.is_base()) r.ad = metrics::average_deviance(split_of(c, values));
            in.push_back(r);
        }
        return rank_results(in);
    }

    std::optional<PlanRound> min_nr_round(const ValueFn& values, const std::string& reason) {
        auto count = frontier_.cells.size();
        if (count >= knobs_.min_nr) return finish(reason);
        std::vector<BinRef> pool;
        for (const auto& c : frontier_.cells)
            if (in_scope(c) && c.level < knobs_.max_ref && !c.level.is_base()) pool.push_back(c);
        std::vector<BinRef> accepted;
        for (const auto& c : rank(pool, values)) {
            if (count >= knobs_.min_nr) break;
            const auto grows = dim_.ratio(next_level(c.level, dim_), c.level) - 1;
            if (knobs_.max_nr && count + grows > *knobs_.max_nr) break;
            count += grows;
            accepted.push_back(c);
        }
        if (accepted.empty()) return finish(pool.empty() ? "max_ref" : "max_nr");
        return apply(accepted, "min_nr");
    }

    std::optional<PlanRound> finish(std::string reason) {
        done_ = true;
        stop_reason_ = std::move(reason);
        return std::nullopt;
    }

    PlanRound apply(const std::vector<BinRef>& cells, std::string rule) {
        PlanRound round;
        round.dim = frontier_.dim;
        round.rule = std::move(rule);
        for (const auto& c : cells) {
            FrontierEdit e;
            e.cell = c;
            e.replacement = sub_bins(c, dim_);
            e.kind = e.replacement.front().level.is_base() ? FrontierEdit::Kind::to_base : FrontierEdit::Kind::split;
            frontier_.replace(c, e.replacement);
            round.edits.push_back(std::move(e));
        }
        std::erase_if(frozen_, [&](const BinRef& f) { return !frontier_.contains(f); });
        total_.reset();
        round.frontier = frontier_;
        return round;
    }

    DimensionSpec dim_;
    Frontier frontier_;
    RefinementKnobs knobs_;
    std::vector<BinRef> frozen_;
    std::vector<BinRef> selected_;
    std::string last_freeze_;
    std::string stop_reason_;
    std::optional<double> total_;
    bool done_ = false;
};

inline RefinementPlan run_planner(GroPlanner& planner, const ValueFn& values) {
    RefinementPlan plan;
    while (auto round = planner.next(values)) plan.rounds.push_back(std::move(*round));
    plan.stop_reason = planner.stop_reason();
    plan.selected = planner.selected();
    return plan;
}

inline RefinementPlan gro_plan(const DimensionSpec& dim, const Frontier& frontier, const ValueFn& values,
                               const RefinementKnobs& knobs) {
    GroPlanner planner(dim, frontier, knobs);
    return run_planner(planner, values);
}

/// Refine every cell one level per round until BASE.
inline RefinementPlan refine_to_max(const DimensionSpec& dim, const Frontier& frontier) {
    GroPlanner planner(dim, frontier, RefinementKnobs{});
    return run_planner(planner, [](const BinRef&) -> double { throw query_error("no values needed"); });
}

/// Jump every cell straight to BASE in one round.
inline RefinementPlan run_highest(const DimensionSpec& dim, const Frontier& frontier) {
    frontier.validate(dim);
    RefinementPlan plan;
    PlanRound round;
    round.dim = frontier.dim;
    round.rule = "run_base";
    Frontier after{frontier.dim, {}};
    for (const auto& c : frontier.cells) {
        if (c.level.is_base()) {
            after.cells.push_back(c);
            continue;
        }
        const auto span = cell_span(c, dim);
        FrontierEdit e{FrontierEdit::Kind::to_base, c, {}};
        for (auto a = span.begin; a < span.end; ++a) e.replacement.push_back(BinRef{c.dim, Level::base(), a});
        after.cells.insert(after.cells.end(), e.replacement.begin(), e.replacement.end());
        round.edits.push_back(std::move(e));
    }
    round.frontier = std::move(after);
    plan.rounds.push_back(std::move(round));
    plan.stop_reason = "max_ref";
    return plan;
}

inline constexpr double kInterestingAd = 0.1;

/// Refine each cell while its split stays interesting (AD >= 0.1).
inline RefinementPlan refine_until_uninteresting(const DimensionSpec& dim, const Frontier& frontier, const ValueFn& values) {
    RefinementKnobs knobs;
    knobs.min_ad = kInterestingAd;
    return gro_plan(dim, frontier, values, knobs);
}

}  // namespace progbin
