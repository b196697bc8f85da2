#pragma once

// Shared domain types and exact bin arithmetic for the factor-2 bin hierarchy.
//
// Every dimension is an equi-width grid of "atomic" cells (the BASE level).
// Level k has level0_bins * 2^k bins, each an integer number of atomic cells
// wide, so boundaries at every level are a subset of the atomic boundaries and
// nesting is exact by construction.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace progbin {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct domain_error : error {
    using error::error;
};
struct range_error : error {
    using error::error;
};
struct config_error : error {
    using error::error;
};
struct alignment_error : error {
    using error::error;
};
struct no_children_error : error {
    using error::error;
};
struct ingest_error : error {
    using error::error;
};
struct query_error : error {
    using error::error;
};
struct io_error : error {
    using error::error;
};

/// Refinement level: 0..max_level, or BASE (the atomic-cell grid), which
/// orders after every numbered level.
class Level {
  public:
    constexpr Level() = default;
    constexpr explicit Level(int k) : k_(k) {
        if (k < 0) throw range_error("negative refinement level");
    }
    static constexpr Level base() {
        Level l;
        l.k_ = kBase;
        return l;
    }

    constexpr bool is_base() const { return k_ == kBase; }
    /// Numbered level; BASE has no number.
    constexpr int value() const {
        if (is_base()) throw range_error("BASE level has no number");
        return k_;
    }

    constexpr auto operator<=>(const Level&) const = default;

    std::string to_string() const { return is_base() ? "base" : std::to_string(k_); }
    static Level parse(const std::string& s) {
        if (s == "base" || s == "BASE") return base();
        std::size_t pos = 0;
        int k = 0;
        try {
            k = std::stoi(s, &pos);
        } catch (const std::exception&) {
            throw range_error("invalid level '" + s + "'");
        }
        if (pos != s.size() || k < 0) throw range_error("invalid level '" + s + "'");
        return Level(k);
    }

  private:
    static constexpr int kBase = std::numeric_limits<int>::max();
    int k_ = 0;
};

inline constexpr int kSplitFactor = 2;

struct DimensionSpec {
    std::string name;
    double domain_min = 0.0;
    double domain_max = 1.0;  // exclusive
    double atomic_resolution = 1.0;
    std::uint32_t level0_bins = 32;
    int max_level = 4;

    friend bool operator==(const DimensionSpec&, const DimensionSpec&) = default;

    /// Number of atomic cells spanning the domain.
    std::uint64_t atomic_cells() const {
        return static_cast<std::uint64_t>(std::llround((domain_max - domain_min) / atomic_resolution));
    }

    /// Throws config_error when the domain cannot carry the declared hierarchy.
    void validate() const {
        if (name.empty()) throw config_error("dimension without a name");
        if (!(domain_max > domain_min))
            throw config_error("dimension '" + name + "': domain_max must exceed domain_min");
        if (!(atomic_resolution > 0))
            throw config_error("dimension '" + name + "': atomic_resolution must be positive");
        if (level0_bins == 0) throw config_error("dimension '" + name + "': level0_bins must be positive");
        if (max_level < 0 || max_level > 24)
            throw config_error("dimension '" + name + "': max_level out of range");
        const double span = domain_max - domain_min;
        const auto cells = atomic_cells();
        if (cells == 0 || std::abs(static_cast<double>(cells) * atomic_resolution - span) > 1e-9 * span)
            throw config_error("dimension '" + name + "': domain is not a multiple of atomic_resolution");
        const std::uint64_t finest = std::uint64_t{level0_bins} << max_level;
        if (cells % finest != 0)
            throw config_error("dimension '" + name + "': " + std::to_string(cells) +
                               " atomic cells not divisible by " + std::to_string(finest) +
                               " bins at level " + std::to_string(max_level));
    }

    bool has_level(Level l) const { return l.is_base() || l.value() <= max_level; }

    std::uint64_t bin_count(Level l) const {
        if (l.is_base()) return atomic_cells();
        if (l.value() > max_level)
            throw range_error("dimension '" + name + "': level " + l.to_string() + " above max_level");
        return std::uint64_t{level0_bins} << l.value();
    }

    /// Atomic cells per bin at `l`.
    std::uint64_t cells_per_bin(Level l) const { return atomic_cells() / bin_count(l); }

    double width(Level l) const { return (domain_max - domain_min) / static_cast<double>(bin_count(l)); }

    /// x-coordinate of atomic boundary `a` (0..atomic_cells()).
    double atomic_boundary(std::uint64_t a) const {
        const auto cells = atomic_cells();
        if (a >= cells) return domain_max;
        return domain_min + static_cast<double>(a) * ((domain_max - domain_min) / static_cast<double>(cells));
    }

    /// Ratio of bin counts between a finer and a coarser level.
    std::uint64_t ratio(Level fine, Level coarse) const {
        if (fine < coarse) throw alignment_error("cannot map level " + fine.to_string() + " onto finer level " + coarse.to_string());
        return bin_count(fine) / bin_count(coarse);
    }
};

struct BinRef {
    std::size_t dim = 0;  // index into the dataset's dimension list
    Level level;
    std::uint64_t index = 0;

    friend bool operator==(const BinRef&, const BinRef&) = default;
};

struct Predicate {
    std::size_t dim = 0;
    Level level;
    std::uint64_t lo = 0;  // inclusive
    std::uint64_t hi = 0;  // exclusive

    friend bool operator==(const Predicate&, const Predicate&) = default;
};

/// Half-open range of atomic cells.
struct CellSpan {
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
    friend bool operator==(const CellSpan&, const CellSpan&) = default;
};

inline void check_ref(const BinRef& ref, const DimensionSpec& dim) {
    if (!dim.has_level(ref.level))
        throw range_error("dimension '" + dim.name + "': no level " + ref.level.to_string());
    if (ref.index >= dim.bin_count(ref.level))
        throw range_error("dimension '" + dim.name + "': bin " + std::to_string(ref.index) + " out of range at level " +
                          ref.level.to_string());
}

inline std::uint64_t atomic_index_of(double value, const DimensionSpec& dim) {
    if (!(value >= dim.domain_min && value < dim.domain_max))
        throw domain_error("dimension '" + dim.name + "': value " + std::to_string(value) + " outside [" +
                           std::to_string(dim.domain_min) + ", " + std::to_string(dim.domain_max) + ")");
    const auto cells = dim.atomic_cells();
    const double w = (dim.domain_max - dim.domain_min) / static_cast<double>(cells);
    auto a = static_cast<std::uint64_t>(std::floor((value - dim.domain_min) / w));
    a = std::min(a, cells - 1);
    // Settle against the boundaries bin_range reports, so the two agree bit-for-bit.
    while (a > 0 && value < dim.atomic_boundary(a)) --a;
    while (a + 1 < cells && value >= dim.atomic_boundary(a + 1)) ++a;
    return a;
}

inline std::uint64_t bin_of(double value, const DimensionSpec& dim, Level level) {
    return atomic_index_of(value, dim) / dim.cells_per_bin(level);
}

inline CellSpan cell_span(const BinRef& ref, const DimensionSpec& dim) {
    check_ref(ref, dim);
    const auto per = dim.cells_per_bin(ref.level);
    return {ref.index * per, (ref.index + 1) * per};
}

inline std::pair<double, double> bin_range(const BinRef& ref, const DimensionSpec& dim) {
    const auto s = cell_span(ref, dim);
    return {dim.atomic_boundary(s.begin), dim.atomic_boundary(s.end)};
}

/// Level one step finer than `l`: max_level steps to BASE.
inline Level next_level(Level l, const DimensionSpec& dim) {
    if (l.is_base()) throw no_children_error("dimension '" + dim.name + "': BASE cells cannot be refined");
    return l.value() >= dim.max_level ? Level::base() : Level(l.value() + 1);
}

inline std::pair<BinRef, BinRef> children(const BinRef& ref, const DimensionSpec& dim) {
    check_ref(ref, dim);
    if (ref.level.is_base() || ref.level.value() >= dim.max_level)
        throw no_children_error("dimension '" + dim.name + "': bin at level " + ref.level.to_string() +
                                " has no binned children; refine to BASE instead");
    const Level c(ref.level.value() + 1);
    return {BinRef{ref.dim, c, 2 * ref.index}, BinRef{ref.dim, c, 2 * ref.index + 1}};
}

/// Cells one step finer than `ref`: its two children, or its atomic cells when at max_level.
inline std::vector<BinRef> sub_bins(const BinRef& ref, const DimensionSpec& dim) {
    const Level fine = next_level(ref.level, dim);
    check_ref(ref, dim);
    const auto r = dim.ratio(fine, ref.level);
    std::vector<BinRef> out;
    out.reserve(r);
    for (std::uint64_t i = 0; i < r; ++i) out.push_back(BinRef{ref.dim, fine, ref.index * r + i});
    return out;
}

inline BinRef parent(const BinRef& ref, const DimensionSpec& dim) {
    check_ref(ref, dim);
    if (!ref.level.is_base() && ref.level.value() == 0) throw range_error("level-0 bins have no parent");
    const Level p = ref.level.is_base() ? Level(dim.max_level) : Level(ref.level.value() - 1);
    return BinRef{ref.dim, p, ref.index / dim.ratio(ref.level, p)};
}

inline void check_predicate(const Predicate& p, const DimensionSpec& dim) {
    if (!dim.has_level(p.level))
        throw range_error("dimension '" + dim.name + "': predicate level " + p.level.to_string() + " not present");
    if (!(p.lo < p.hi && p.hi <= dim.bin_count(p.level)))
        throw range_error("dimension '" + dim.name + "': predicate [" + std::to_string(p.lo) + ", " +
                          std::to_string(p.hi) + ") invalid at level " + p.level.to_string());
}

inline Predicate snap_predicate(const Predicate& pred, Level target, const DimensionSpec& dim) {
    check_predicate(pred, dim);
    if (target < pred.level)
        throw alignment_error("predicate at level " + pred.level.to_string() + " cannot be answered at coarser level " +
                              target.to_string());
    const auto r = dim.ratio(target, pred.level);
    return Predicate{pred.dim, target, pred.lo * r, pred.hi * r};
}

/// Per-plot cover of a dimension's domain by disjoint cells, sorted by x.
struct Frontier {
    std::size_t dim = 0;
    std::vector<BinRef> cells;

    static Frontier uniform(std::size_t dim_index, const DimensionSpec& dim, Level level) {
        Frontier f{dim_index, {}};
        const auto n = dim.bin_count(level);
        f.cells.reserve(n);
        for (std::uint64_t i = 0; i < n; ++i) f.cells.push_back(BinRef{dim_index, level, i});
        return f;
    }

    bool is_valid(const DimensionSpec& dim) const {
        std::uint64_t next = 0;
        for (const auto& c : cells) {
            if (c.dim != this->dim || !dim.has_level(c.level) || c.index >= dim.bin_count(c.level)) return false;
            const auto s = cell_span(c, dim);
            if (s.begin != next) return false;
            next = s.end;
        }
        return next == dim.atomic_cells();
    }

    void validate(const DimensionSpec& dim) const {
        if (!is_valid(dim)) throw range_error("frontier for '" + dim.name + "' does not tile the domain");
    }

    /// Replace `cell` by `replacement` cells (which must tile the same span).
    void replace(const BinRef& cell, const std::vector<BinRef>& replacement) {
        auto it = std::find(cells.begin(), cells.end(), cell);
        if (it == cells.end()) throw range_error("cell not on frontier");
        it = cells.erase(it);
        cells.insert(it, replacement.begin(), replacement.end());
    }

    bool contains(const BinRef& cell) const { return std::find(cells.begin(), cells.end(), cell) != cells.end(); }

    friend bool operator==(const Frontier&, const Frontier&) = default;
};

enum class MeasureKind { count, sum, min, max, avg };

inline std::string to_string(MeasureKind k) {
    switch (k) {
        case MeasureKind::count: return "count";
        case MeasureKind::sum: return "sum";
        case MeasureKind::min: return "min";
        case MeasureKind::max: return "max";
        case MeasureKind::avg: return "avg";
    }
    return "count";
}

inline MeasureKind parse_measure_kind(const std::string& s) {
    if (s == "count") return MeasureKind::count;
    if (s == "sum") return MeasureKind::sum;
    if (s == "min") return MeasureKind::min;
    if (s == "max") return MeasureKind::max;
    if (s == "avg") return MeasureKind::avg;
    throw config_error("unsupported measure kind '" + s + "'");
}

struct MeasureSpec {
    std::string name = "count";
    MeasureKind kind = MeasureKind::count;
    std::string column;  // source column; empty for count

    friend bool operator==(const MeasureSpec&, const MeasureSpec&) = default;
};

/// Mergeable partial aggregate. Every supported measure is read off it.
struct Aggregate {
    std::int64_t count = 0;
    double sum = 0.0;
    double min = std::numeric_limits<double>::infinity();
    double max = -std::numeric_limits<double>::infinity();

    void merge(const Aggregate& o) {
        count += o.count;
        sum += o.sum;
        min = std::min(min, o.min);
        max = std::max(max, o.max);
    }

    bool empty() const { return count == 0; }

    /// Presented y-value; empty cells read as 0.
    double value(MeasureKind kind) const {
        if (count == 0) return 0.0;
        switch (kind) {
            case MeasureKind::count: return static_cast<double>(count);
            case MeasureKind::sum: return sum;
            case MeasureKind::min: return min;
            case MeasureKind::max: return max;
            case MeasureKind::avg: return sum / static_cast<double>(count);
        }
        return 0.0;
    }

    friend bool operator==(const Aggregate&, const Aggregate&) = default;
};

}  // namespace progbin
