#pragma once

// Information-theoretic refinement metrics and evaluation metrics.
// All logarithms are base 2.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "binner.hpp"
#include "core.hpp"

namespace progbin::metrics {

/// A bin's value next to the values of its sub-bins. `plot_total` is the sum of
/// y over the unrefined plot and normalizes every probability.
struct BinSplit {
    double parent = 0.0;
    std::vector<double> subs;
    double plot_total = 0.0;
};

/// Mean relative deviation of the sub-bins from an even split of the parent.
/// An empty parent has AD 0.
inline double average_deviance(const BinSplit& split) {
    if (split.subs.empty() || split.parent == 0.0) return 0.0;
    const double expected = split.parent / static_cast<double>(split.subs.size());
    double acc = 0.0;
    for (double y : split.subs) acc += std::abs((expected - y) / expected);
    return acc / static_cast<double>(split.subs.size());
}

inline double plot_average_deviance(std::span<const BinSplit> splits) {
    if (splits.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& s : splits) acc += average_deviance(s);
    return acc / static_cast<double>(splits.size());
}

inline double entropy_term(double p) { return p > 0.0 ? -p * std::log2(p) : 0.0; }

struct EntropyReport {
    std::vector<double> bins;
    double plot = 0.0;
};

inline EntropyReport entropy(std::span<const double> ys, double plot_total) {
    EntropyReport r;
    r.bins.reserve(ys.size());
    for (double y : ys) {
        const double e = plot_total > 0.0 ? entropy_term(y / plot_total) : 0.0;
        r.bins.push_back(e);
        r.plot += e;
    }
    return r;
}

inline EntropyReport entropy(std::span<const double> ys) {
    double total = 0.0;
    for (double y : ys) total += y;
    return entropy(ys, total);
}

/// Entropy carried by a bin's sub-bins, normalized by the unrefined plot total.
inline double sub_bin_entropy(const BinSplit& split) {
    double e = 0.0;
    if (split.plot_total > 0.0)
        for (double y : split.subs) e += entropy_term(y / split.plot_total);
    return e;
}

/// Relative entropy change of refining one bin. Undefined when the bin carries no entropy.
inline std::optional<double> bin_rec(const BinSplit& split) {
    const double before = split.plot_total > 0.0 ? entropy_term(split.parent / split.plot_total) : 0.0;
    if (before <= 0.0) return std::nullopt;
    return (sub_bin_entropy(split) - before) / before;
}

/// Entropy of the refined plot (every split applied).
inline double refined_entropy(std::span<const BinSplit> splits) {
    double e = 0.0;
    for (const auto& s : splits) e += sub_bin_entropy(s);
    return e;
}

/// Relative entropy change of refining the whole plot. Undefined for a zero-entropy plot.
inline std::optional<double> plot_rec(std::span<const BinSplit> splits) {
    double before = 0.0;
    for (const auto& s : splits) before += s.plot_total > 0.0 ? entropy_term(s.parent / s.plot_total) : 0.0;
    if (before <= 0.0) return std::nullopt;
    return (refined_entropy(splits) - before) / before;
}

namespace detail {
inline void check_sub_bin_counts(std::span<const double> ys, std::span<const std::uint64_t> n) {
    if (ys.size() != n.size()) throw range_error("one sub-bin count per bin is required");
    for (auto k : n)
        if (k < 1) throw range_error("sub-bin counts must be at least 1");
}
}  // namespace detail

/// Upper bound on the entropy gained by refining every bin i into n_i sub-bins.
/// Depends only on the bin probabilities and the sub-bin counts.
inline double mei(std::span<const double> ys, std::span<const std::uint64_t> n) {
    detail::check_sub_bin_counts(ys, n);
    double total = 0.0;
    for (double y : ys) total += y;
    if (total <= 0.0) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < ys.size(); ++i) acc += (ys[i] / total) * std::log2(static_cast<double>(n[i]));
    return acc;
}

/// Bin IGP: log(n) / -log(p). Empty bins have none; a bin holding all mass is infinite.
inline std::optional<double> bin_igp(double p, std::uint64_t n) {
    if (n < 1) throw range_error("sub-bin counts must be at least 1");
    if (!(p > 0.0)) return std::nullopt;
    if (p >= 1.0) return std::numeric_limits<double>::infinity();
    return std::log2(static_cast<double>(n)) / -std::log2(p);
}

struct IgpReport {
    std::optional<double> plot;                // MEI / plot entropy; undefined at zero entropy
    std::vector<std::optional<double>> bins;   // per bin; nullopt for empty bins
};

inline IgpReport igp(std::span<const double> ys, std::span<const std::uint64_t> n) {
    detail::check_sub_bin_counts(ys, n);
    IgpReport r;
    const auto e = entropy(ys);
    if (e.plot > 0.0) r.plot = mei(ys, n) / e.plot;
    double total = 0.0;
    for (double y : ys) total += y;
    for (std::size_t i = 0; i < ys.size(); ++i) r.bins.push_back(bin_igp(total > 0.0 ? ys[i] / total : 0.0, n[i]));
    return r;
}

/// How far the uniform estimate of a bin misses its base-resolution cells.
/// Undefined when the uniform estimate is zero.
inline std::optional<double> result_error(double bin_y, std::span<const double> base_cells) {
    if (base_cells.empty()) return std::nullopt;
    const double expected = bin_y / static_cast<double>(base_cells.size());
    if (expected == 0.0) return std::nullopt;
    double acc = 0.0;
    for (double y : base_cells) acc += std::abs((y - expected) / expected);
    return acc / static_cast<double>(base_cells.size());
}

inline bool differs_from(double neighbor, double x) {
    if (x == 0.0) return neighbor != 0.0;
    return std::abs((neighbor - x) / x) > 0.1;
}

/// Fraction of cells that differ by more than 10% from every adjacent cell.
inline std::optional<double> anomalous_fraction(std::span<const double> ys) {
    if (ys.size() < 2) return std::nullopt;
    std::size_t anomalous = 0;
    for (std::size_t i = 0; i < ys.size(); ++i) {
        bool all = true;
        if (i > 0) all = all && differs_from(ys[i - 1], ys[i]);
        if (i + 1 < ys.size()) all = all && differs_from(ys[i + 1], ys[i]);
        anomalous += all ? 1 : 0;
    }
    return static_cast<double>(anomalous) / static_cast<double>(ys.size());
}

/// Occupied share of the cells a table at its level could hold.
inline double sparsity(const BinnedTable& table, const BinHierarchy& h) {
    return static_cast<double>(table.row_count()) / h.max_rows(table.level);
}

/// Plot- and bin-level refinement metrics for a set of splits.
struct MetricReport {
    std::vector<double> ad;
    std::vector<double> entropy;
    std::vector<std::optional<double>> rec;
    std::vector<std::optional<double>> igp;
    double plot_ad = 0.0;
    double plot_entropy = 0.0;
    double refined_entropy = 0.0;
    std::optional<double> plot_rec;
    double mei = 0.0;
    std::optional<double> plot_igp;
};

/// `n` holds, per bin, the number of cells it can eventually be refined into.
inline MetricReport report(std::span<const BinSplit> splits, std::span<const std::uint64_t> n) {
    MetricReport r;
    std::vector<double> ys;
    for (const auto& s : splits) {
        ys.push_back(s.parent);
        r.ad.push_back(average_deviance(s));
        r.rec.push_back(bin_rec(s));
    }
    const double total = splits.empty() ? 0.0 : splits.front().plot_total;
    const auto e = entropy(ys, total);
    r.entropy = e.bins;
    r.plot_entropy = e.plot;
    r.plot_ad = plot_average_deviance(splits);
    r.refined_entropy = progbin::metrics::refined_entropy(splits);
    r.plot_rec = progbin::metrics::plot_rec(splits);
    const auto g = progbin::metrics::igp(ys, n);
    r.mei = progbin::metrics::mei(ys, n);
    r.igp = g.bins;
    r.plot_igp = g.plot;
    return r;
}

}  // namespace progbin::metrics
