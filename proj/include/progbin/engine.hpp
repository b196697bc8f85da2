#pragma once

// Sharded filter/group-aggregate engine over the binned tables.
//
// Each level's table is split round-robin into shards. A shard keeps a
// columnar copy of its rows, a per-dimension row order sorted by bin, and a
// per-row bitmask of the predicates the row currently fails. Predicate
// changes only touch the rows whose bins enter or leave the selection.
// Queries fan out to every shard and the partial histograms are merged in
// shard order, so results do not depend on scheduling.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <utility>
#include <vector>

#include "binner.hpp"
#include "core.hpp"

namespace progbin {

struct HistogramCell {
    BinRef ref;
    Aggregate agg;
    friend bool operator==(const HistogramCell&, const HistogramCell&) = default;
};

/// Per-cell aggregates for one plot, sorted by x. Absent data reads as y = 0.
struct Histogram {
    std::size_t group_dim = 0;
    Level group_level;  // level of a uniform histogram; mixed frontiers report their finest level
    MeasureSpec measure;
    std::vector<HistogramCell> cells;
    double elapsed_ms = 0.0;

    double y(std::size_t i) const { return cells[i].agg.value(measure.kind); }

    std::vector<double> values() const {
        std::vector<double> out;
        out.reserve(cells.size());
        for (const auto& c : cells) out.push_back(c.agg.value(measure.kind));
        return out;
    }

    Aggregate total() const {
        Aggregate t;
        for (const auto& c : cells) t.merge(c.agg);
        return t;
    }

    /// Cells holding data.
    std::size_t non_empty() const {
        return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const auto& c) { return !c.agg.empty(); }));
    }

    /// Same shape and aggregates; timing ignored.
    bool same_result(const Histogram& o) const {
        return group_dim == o.group_dim && group_level == o.group_level && measure == o.measure && cells == o.cells;
    }
};

struct QueryRequest {
    Level level;                       // table to scan
    std::vector<Predicate> predicates; // at most one per dim, at levels <= `level`
    std::size_t group_dim = 0;
    Level group_level;                 // <= level
    std::size_t measure = 0;           // index into the dataset's measures
    bool exclude_own_filter = true;
};

/// One grouping of a batched scan.
struct GroupSpec {
    std::size_t dim = 0;
    Level level;
    bool exclude_own_filter = true;
};

namespace detail {

inline std::vector<std::pair<std::uint64_t, std::uint64_t>> interval_minus(std::pair<std::uint64_t, std::uint64_t> a,
                                                                          std::pair<std::uint64_t, std::uint64_t> b) {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> out;
    if (b.second <= a.first || b.first >= a.second || b.first >= b.second) {
        if (a.first < a.second) out.push_back(a);
        return out;
    }
    if (a.first < b.first) out.emplace_back(a.first, b.first);
    if (b.second < a.second) out.emplace_back(b.second, a.second);
    return out;
}

inline double elapsed_ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Worker state for one partition of a level's table.
class Shard {
  public:
    Shard(const BinnedTable& table, const std::vector<DimensionSpec>& dims, std::size_t shard_index, std::size_t shard_count)
        : level_(table.level), measures_(table.measures), dims_(dims) {
        const auto n = table.row_count();
        std::vector<std::size_t> rows;
        for (std::size_t r = shard_index; r < n; r += shard_count) rows.push_back(r);
        bins_.resize(dims.size());
        for (std::size_t d = 0; d < dims.size(); ++d) {
            bins_[d].reserve(rows.size());
            for (auto r : rows) bins_[d].push_back(table.bins[d][r]);
        }
        count_.reserve(rows.size());
        for (auto r : rows) count_.push_back(table.count[r]);
        comps_.resize(table.comps.size());
        for (std::size_t m = 0; m < table.comps.size(); ++m)
            if (!table.comps[m].empty())
                for (auto r : rows) comps_[m].push_back(table.comps[m][r]);
        fail_.assign(rows.size(), 0);
        order_.resize(dims.size());
        applied_.resize(dims.size());
        for (std::size_t d = 0; d < dims.size(); ++d) {
            applied_[d] = {0, dims[d].bin_count(level_)};
            sort_by_bin(d);
        }
    }

    Shard(const Shard&) = delete;
    Shard& operator=(const Shard&) = delete;

    Level level() const { return level_; }
    std::size_t size() const { return count_.size(); }

    /// Row multiset of this shard as (bin tuple, count) pairs.
    std::vector<std::pair<std::vector<std::uint32_t>, std::int64_t>> rows() const {
        std::vector<std::pair<std::vector<std::uint32_t>, std::int64_t>> out;
        for (std::size_t r = 0; r < size(); ++r) {
            std::vector<std::uint32_t> key;
            for (const auto& col : bins_) key.push_back(col[r]);
            out.emplace_back(std::move(key), count_[r]);
        }
        return out;
    }

    /// Partial histograms, one per group. `predicates` must already be at this shard's level
    /// (or be excluded by every group).
    std::vector<Histogram> query(const std::vector<Predicate>& predicates, const std::vector<GroupSpec>& groups,
                                 std::size_t measure) {
        std::lock_guard lock(mu_);
        apply_filters(predicates);
        const auto kind = measures_.at(measure).kind;
        std::vector<Histogram> out;
        std::vector<std::vector<Aggregate>> acc;
        std::vector<std::uint32_t> allow;  // bits that must be clear for a row to count
        std::vector<std::uint64_t> ratio;
        for (const auto& g : groups) {
            const auto& dim = dims_.at(g.dim);
            ratio.push_back(dim.ratio(level_, g.level));
            acc.emplace_back(dim.bin_count(g.level));
            allow.push_back(g.exclude_own_filter ? ~(std::uint32_t{1} << g.dim) : ~std::uint32_t{0});
        }
        switch (kind) {
            case MeasureKind::count: scan<MeasureKind::count>(groups, measure, allow, ratio, acc); break;
            case MeasureKind::sum: scan<MeasureKind::sum>(groups, measure, allow, ratio, acc); break;
            case MeasureKind::avg: scan<MeasureKind::avg>(groups, measure, allow, ratio, acc); break;
            case MeasureKind::min: scan<MeasureKind::min>(groups, measure, allow, ratio, acc); break;
            case MeasureKind::max: scan<MeasureKind::max>(groups, measure, allow, ratio, acc); break;
        }
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            Histogram h;
            h.group_dim = groups[gi].dim;
            h.group_level = groups[gi].level;
            h.measure = measures_[measure];
            h.cells.reserve(acc[gi].size());
            for (std::uint64_t b = 0; b < acc[gi].size(); ++b)
                h.cells.push_back({BinRef{groups[gi].dim, groups[gi].level, b}, acc[gi][b]});
            out.push_back(std::move(h));
        }
        return out;
    }

  private:
    template <MeasureKind Kind>
    void scan(const std::vector<GroupSpec>& groups, std::size_t measure, const std::vector<std::uint32_t>& allow,
              const std::vector<std::uint64_t>& ratio, std::vector<std::vector<Aggregate>>& acc) const {
        const double* vals = Kind == MeasureKind::count ? nullptr : comps_[measure].data();
        const auto n = size();
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            const auto* bins = bins_[groups[gi].dim].data();
            const auto mask = allow[gi];
            const auto r = ratio[gi];
            auto* out = acc[gi].data();
            for (std::size_t row = 0; row < n; ++row) {
                if (fail_[row] & mask) continue;
                auto& a = out[r == 1 ? bins[row] : bins[row] / r];
                a.count += count_[row];
                if constexpr (Kind == MeasureKind::sum || Kind == MeasureKind::avg) a.sum += vals[row];
                if constexpr (Kind == MeasureKind::min) a.min = std::min(a.min, vals[row]);
                if constexpr (Kind == MeasureKind::max) a.max = std::max(a.max, vals[row]);
            }
        }
    }

    void sort_by_bin(std::size_t d) {
        const auto n = size();
        const auto nbins = dims_[d].bin_count(level_);
        auto& order = order_[d];
        order.resize(n);
        if (nbins <= 4 * n + 1024) {
            std::vector<std::uint32_t> start(nbins + 1, 0);
            for (auto b : bins_[d]) ++start[b + 1];
            for (std::uint64_t b = 0; b < nbins; ++b) start[b + 1] += start[b];
            for (std::uint32_t r = 0; r < n; ++r) order[start[bins_[d][r]]++] = r;
        } else {
            for (std::uint32_t r = 0; r < n; ++r) order[r] = r;
            std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return bins_[d][a] < bins_[d][b]; });
        }
    }

    /// Positions in order_[d] of rows whose bin lies in [lo, hi).
    std::pair<std::size_t, std::size_t> rows_in(std::size_t d, std::uint64_t lo, std::uint64_t hi) const {
        const auto& order = order_[d];
        const auto& bins = bins_[d];
        auto key = [&](std::uint32_t r) { return std::uint64_t{bins[r]}; };
        const auto a = std::ranges::lower_bound(order, lo, {}, key) - order.begin();
        const auto b = std::ranges::lower_bound(order, hi, {}, key) - order.begin();
        return {static_cast<std::size_t>(a), static_cast<std::size_t>(b)};
    }

    void apply_filters(const std::vector<Predicate>& predicates) {
        std::vector<std::pair<std::uint64_t, std::uint64_t>> want(dims_.size());
        for (std::size_t d = 0; d < dims_.size(); ++d) want[d] = {0, dims_[d].bin_count(level_)};
        for (const auto& p : predicates)
            if (p.level == level_) want[p.dim] = {p.lo, p.hi};
        for (std::size_t d = 0; d < dims_.size(); ++d) {
            if (want[d] == applied_[d]) continue;
            const auto bit = std::uint32_t{1} << d;
            for (auto [lo, hi] : detail::interval_minus(applied_[d], want[d])) {
                const auto [a, b] = rows_in(d, lo, hi);
                for (auto i = a; i < b; ++i) fail_[order_[d][i]] |= bit;
            }
            for (auto [lo, hi] : detail::interval_minus(want[d], applied_[d])) {
                const auto [a, b] = rows_in(d, lo, hi);
                for (auto i = a; i < b; ++i) fail_[order_[d][i]] &= ~bit;
            }
            applied_[d] = want[d];
        }
    }

    Level level_;
    std::vector<MeasureSpec> measures_;
    std::vector<DimensionSpec> dims_;
    std::vector<std::vector<std::uint32_t>> bins_;
    std::vector<std::int64_t> count_;
    std::vector<std::vector<double>> comps_;
    std::vector<std::vector<std::uint32_t>> order_;
    std::vector<std::uint32_t> fail_;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> applied_;
    std::mutex mu_;
};

struct ShardSet {
    Level level;
    std::vector<std::unique_ptr<Shard>> shards;
    std::size_t shard_count() const { return shards.size(); }
};

inline ShardSet build_shards(const BinnedTable& table, const std::vector<DimensionSpec>& dims, std::size_t shard_count) {
    if (shard_count < 1) throw config_error("shard_count must be at least 1");
    if (dims.size() > 32) throw config_error("at most 32 dimensions are supported");
    ShardSet s{table.level, {}};
    for (std::size_t i = 0; i < shard_count; ++i) s.shards.push_back(std::make_unique<Shard>(table, dims, i, shard_count));
    return s;
}

inline void check_compatible(const Histogram& a, const Histogram& b) {
    if (a.group_dim != b.group_dim || a.group_level != b.group_level || !(a.measure == b.measure) ||
        a.cells.size() != b.cells.size())
        throw query_error("cannot merge histograms of different shapes");
    for (std::size_t i = 0; i < a.cells.size(); ++i)
        if (!(a.cells[i].ref == b.cells[i].ref)) throw query_error("cannot merge histograms over different cells");
}

/// Cell-wise monoid merge. An empty partial (no cells) is the identity.
inline Histogram merge_partials(const std::vector<Histogram>& partials) {
    const Histogram* shape = nullptr;
    for (const auto& p : partials)
        if (!p.cells.empty()) {
            shape = &p;
            break;
        }
    if (!shape) return partials.empty() ? Histogram{} : partials.front();
    Histogram out = *shape;
    for (auto& c : out.cells) c.agg = Aggregate{};
    out.elapsed_ms = 0.0;
    for (const auto& p : partials) {
        if (p.cells.empty()) continue;
        check_compatible(out, p);
        for (std::size_t i = 0; i < p.cells.size(); ++i) out.cells[i].agg.merge(p.cells[i].agg);
    }
    return out;
}

inline Histogram shard_query(Shard& shard, const QueryRequest& req) {
    return shard.query(req.predicates, {GroupSpec{req.group_dim, req.group_level, req.exclude_own_filter}}, req.measure).front();
}

struct EngineOptions {
    std::size_t shard_count = std::max(1u, std::thread::hardware_concurrency());
    /// Levels up to and including this one scan their shards on the calling thread.
    std::optional<int> serial_through_level = 1;
};

struct MultiQueryResult {
    std::vector<Histogram> histograms;  // one per requested frontier
    double elapsed_ms = 0.0;
};

class Engine {
  public:
    Engine(std::shared_ptr<const Dataset> dataset, EngineOptions options = {})
        : dataset_(std::move(dataset)), options_(options) {
        for (const auto& [level, table] : dataset_->tables)
            shards_.emplace(level, build_shards(table, dataset_->hierarchy.dims, options_.shard_count));
    }

    const Dataset& dataset() const { return *dataset_; }
    std::shared_ptr<const Dataset> dataset_ptr() const { return dataset_; }
    const EngineOptions& options() const { return options_; }
    const ShardSet& shards(Level level) const { return shard_set(level); }

    /// One scan of `level`'s table producing a histogram per group.
    std::vector<Histogram> query_batch(Level level, const std::vector<Predicate>& predicates,
                                       const std::vector<GroupSpec>& groups, std::size_t measure) {
        const auto t0 = std::chrono::steady_clock::now();
        auto& set = shard_set(level);
        const auto& dims = dataset_->hierarchy.dims;
        if (measure >= dataset_->measures.size()) throw query_error("unknown measure index " + std::to_string(measure));
        for (const auto& g : groups) {
            if (g.dim >= dims.size()) throw query_error("unknown dimension index " + std::to_string(g.dim));
            if (level < g.level) throw query_error("group level " + g.level.to_string() + " finer than table level " + level.to_string());
            if (!dims[g.dim].has_level(g.level)) throw query_error("no level " + g.level.to_string());
        }
        std::vector<Predicate> snapped;
        std::vector<bool> seen(dims.size(), false);
        for (const auto& p : predicates) {
            if (p.dim >= dims.size()) throw query_error("unknown dimension index " + std::to_string(p.dim));
            if (seen[p.dim]) throw query_error("more than one predicate on '" + dims[p.dim].name + "'");
            seen[p.dim] = true;
            if (level < p.level) {
                const bool excluded_everywhere = std::all_of(groups.begin(), groups.end(), [&](const GroupSpec& g) {
                    return g.dim == p.dim && g.exclude_own_filter;
                });
                if (!excluded_everywhere)
                    throw alignment_error("predicate on '" + dims[p.dim].name + "' at level " + p.level.to_string() +
                                          " cannot be answered at level " + level.to_string());
                continue;
            }
            snapped.push_back(snap_predicate(p, level, dims[p.dim]));
        }

        std::vector<std::vector<Histogram>> partials(set.shard_count());
        const bool serial = !level.is_base() && options_.serial_through_level && level.value() <= *options_.serial_through_level;
        if (serial || set.shard_count() == 1) {
            for (std::size_t s = 0; s < set.shard_count(); ++s) partials[s] = set.shards[s]->query(snapped, groups, measure);
        } else {
            std::vector<std::future<std::vector<Histogram>>> futures;
            for (std::size_t s = 0; s < set.shard_count(); ++s)
                futures.push_back(std::async(std::launch::async, [&, s] { return set.shards[s]->query(snapped, groups, measure); }));
            // Collect every future before rethrowing so no worker outlives the call.
            std::exception_ptr failure;
            for (std::size_t s = 0; s < futures.size(); ++s) {
                try {
                    partials[s] = futures[s].get();
                } catch (...) {
                    if (!failure) failure = std::current_exception();
                }
            }
            if (failure) std::rethrow_exception(failure);
        }

        std::vector<Histogram> out;
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            std::vector<Histogram> parts;
            parts.reserve(partials.size());
            for (auto& p : partials) parts.push_back(std::move(p[gi]));
            out.push_back(merge_partials(parts));
        }
        const double ms = detail::elapsed_ms_since(t0);
        for (auto& h : out) h.elapsed_ms = ms;
        return out;
    }

    Histogram query(const QueryRequest& req) {
        return query_batch(req.level, req.predicates, {GroupSpec{req.group_dim, req.group_level, req.exclude_own_filter}},
                           req.measure)
            .front();
    }

    /// Crossfilter view of every frontier: each plot sees all predicates but its own,
    /// with one y per frontier cell. Scans are shared between plots that need the same table.
    MultiQueryResult multi_query(const std::vector<Predicate>& predicates, const std::vector<Frontier>& frontiers,
                                 std::size_t measure) {
        const auto& dims = dataset_->hierarchy.dims;
        std::map<Level, std::vector<GroupSpec>> batches;
        for (const auto& f : frontiers) {
            if (f.dim >= dims.size()) throw query_error("unknown dimension index " + std::to_string(f.dim));
            f.validate(dims[f.dim]);
            std::vector<Level> levels;
            for (const auto& c : f.cells)
                if (std::find(levels.begin(), levels.end(), c.level) == levels.end()) levels.push_back(c.level);
            for (const auto l : levels) {
                Level table = l;
                for (const auto& p : predicates)
                    if (p.dim != f.dim) table = std::max(table, p.level);
                auto& groups = batches[table];
                const GroupSpec g{f.dim, l, true};
                if (std::none_of(groups.begin(), groups.end(), [&](const GroupSpec& x) { return x.dim == g.dim && x.level == g.level; }))
                    groups.push_back(g);
            }
        }

        MultiQueryResult result;
        std::map<std::pair<std::size_t, Level>, Histogram> by_group;
        for (const auto& [table, groups] : batches) {
            auto hs = query_batch(table, predicates, groups, measure);
            result.elapsed_ms += hs.empty() ? 0.0 : hs.front().elapsed_ms;
            for (std::size_t i = 0; i < groups.size(); ++i) by_group[{groups[i].dim, groups[i].level}] = std::move(hs[i]);
        }
        for (const auto& f : frontiers) {
            Histogram h;
            h.group_dim = f.dim;
            h.measure = dataset_->measures.at(measure);
            h.elapsed_ms = result.elapsed_ms;
            h.group_level = f.cells.empty() ? Level(0) : f.cells.front().level;
            for (const auto& c : f.cells) {
                h.group_level = std::max(h.group_level, c.level);
                h.cells.push_back({c, by_group.at({f.dim, c.level}).cells[c.index].agg});
            }
            result.histograms.push_back(std::move(h));
        }
        return result;
    }

  private:
    ShardSet& shard_set(Level level) {
        auto it = shards_.find(level);
        if (it == shards_.end()) throw query_error("level " + level.to_string() + " not materialized");
        return it->second;
    }
    const ShardSet& shard_set(Level level) const {
        auto it = shards_.find(level);
        if (it == shards_.end()) throw query_error("level " + level.to_string() + " not materialized");
        return it->second;
    }

    std::shared_ptr<const Dataset> dataset_;
    EngineOptions options_;
    std::map<Level, ShardSet> shards_;
};

}  // namespace progbin
