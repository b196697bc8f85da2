#pragma once

// Deterministic synthetic datasets with independent per-column marginals.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "binner.hpp"
#include "schema.hpp"

namespace progbin {

struct Distribution {
    enum class Kind { uniform, normal, zipf };
    Kind kind = Kind::uniform;
    double mean = 0.0;    // normal, in domain units
    double stddev = 1.0;  // normal, in domain units
    double s = 1.0;       // zipf exponent
    double q = 0.0;       // zipf offset: mass of cell i is proportional to 1/(i + 1 + q)^s
};

/// A generated measure source column; values are quantized to its grid.
struct ValueColumnSpec {
    DimensionSpec grid;  // name, domain and resolution; hierarchy fields unused
    Distribution distribution;
};

struct SyntheticSpec {
    Schema schema;
    std::vector<Distribution> dim_distributions;  // one per schema dim
    std::vector<ValueColumnSpec> value_columns;
};

inline void from_json(const json& j, Distribution& d) {
    const auto kind = j.value("kind", std::string("uniform"));
    if (kind == "uniform") {
        d.kind = Distribution::Kind::uniform;
    } else if (kind == "normal") {
        d.kind = Distribution::Kind::normal;
        d.mean = j.at("mean").get<double>();
        d.stddev = j.at("stddev").get<double>();
    } else if (kind == "zipf") {
        d.kind = Distribution::Kind::zipf;
        d.s = j.value("s", 1.0);
        d.q = j.value("q", 0.0);
    } else {
        throw config_error("unknown distribution kind '" + kind + "'");
    }
}

inline void from_json(const json& j, SyntheticSpec& spec) {
    from_json(j, spec.schema);
    spec.dim_distributions.clear();
    for (const auto& d : j.at("dims")) spec.dim_distributions.push_back(d.value("distribution", json::object()).get<Distribution>());
    spec.value_columns.clear();
    if (j.contains("values")) {
        for (const auto& v : j.at("values")) {
            ValueColumnSpec c;
            c.grid.name = v.at("name").get<std::string>();
            c.grid.domain_min = v.at("min").get<double>();
            c.grid.domain_max = v.at("max").get<double>();
            c.grid.atomic_resolution = v.value("atomic_resolution", 1.0);
            c.distribution = v.value("distribution", json::object()).get<Distribution>();
            spec.value_columns.push_back(std::move(c));
        }
    }
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Draws atomic-cell indices in [0, cells) from one marginal.
class CellSampler {
  public:
    CellSampler(const Distribution& dist, const DimensionSpec& grid, std::uint64_t seed)
        : dist_(dist), cells_(grid.atomic_cells()), rng_(seed) {
        const double span = grid.domain_max - grid.domain_min;
        switch (dist.kind) {
            case Distribution::Kind::uniform: break;
            case Distribution::Kind::normal:
                if (!(dist.stddev > 0)) throw config_error("'" + grid.name + "': normal stddev must be positive");
                // Truncation must keep a reasonable acceptance rate.
                if (dist.mean + 6 * dist.stddev < grid.domain_min || dist.mean - 6 * dist.stddev > grid.domain_max)
                    throw config_error("'" + grid.name + "': normal mass lies outside the domain");
                mean_cells_ = (dist.mean - grid.domain_min) / span * static_cast<double>(cells_);
                sd_cells_ = dist.stddev / span * static_cast<double>(cells_);
                break;
            case Distribution::Kind::zipf: {
                if (!(dist.s > 0) || !(dist.q >= 0)) throw config_error("'" + grid.name + "': zipf needs s > 0 and q >= 0");
                cdf_.resize(cells_);
                double acc = 0.0;
                for (std::uint64_t i = 0; i < cells_; ++i) {
                    acc += std::pow(static_cast<double>(i) + 1.0 + dist.q, -dist.s);
                    cdf_[i] = acc;
                }
                for (auto& c : cdf_) c /= acc;
                cdf_.back() = 1.0;
                break;
            }
        }
    }

    std::uint64_t operator()() {
        switch (dist_.kind) {
            case Distribution::Kind::uniform: return std::min(cells_ - 1, static_cast<std::uint64_t>(unit() * static_cast<double>(cells_)));
            case Distribution::Kind::normal:
                while (true) {
                    const double x = mean_cells_ + sd_cells_ * gaussian();
                    if (x >= 0 && x < static_cast<double>(cells_)) return static_cast<std::uint64_t>(x);
                }
            case Distribution::Kind::zipf: {
                const double u = unit();
                const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
                return std::min<std::uint64_t>(cells_ - 1, static_cast<std::uint64_t>(it - cdf_.begin()));
            }
        }
        return 0;
    }

  private:
    double unit() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = unit();
        while (u1 <= 0.0) u1 = unit();
        const double u2 = unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

    Distribution dist_;
    std::uint64_t cells_;
    std::mt19937_64 rng_;
    std::vector<double> cdf_;
    double mean_cells_ = 0.0;
    double sd_cells_ = 1.0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace detail

/// Analytic probability mass of each level-`level` bin under `dist` (for checks).
inline std::vector<double> bin_masses(const Distribution& dist, const DimensionSpec& dim, Level level) {
    const auto cells = dim.atomic_cells();
    std::vector<double> w(cells, 1.0);
    if (dist.kind == Distribution::Kind::zipf)
        for (std::uint64_t i = 0; i < cells; ++i) w[i] = std::pow(static_cast<double>(i) + 1.0 + dist.q, -dist.s);
    if (dist.kind == Distribution::Kind::normal) {
        const double span = dim.domain_max - dim.domain_min;
        for (std::uint64_t i = 0; i < cells; ++i) {
            const double x0 = dim.domain_min + span * static_cast<double>(i) / static_cast<double>(cells);
            const double x1 = dim.domain_min + span * static_cast<double>(i + 1) / static_cast<double>(cells);
            w[i] = std::erf((x1 - dist.mean) / (dist.stddev * std::sqrt(2.0))) - std::erf((x0 - dist.mean) / (dist.stddev * std::sqrt(2.0)));
        }
    }
    double total = 0.0;
    for (double x : w) total += x;
    const auto per = dim.cells_per_bin(level);
    std::vector<double> out(dim.bin_count(level), 0.0);
    for (std::uint64_t i = 0; i < cells; ++i) out[i / per] += w[i] / total;
    return out;
}

inline RawDataset generate_synthetic(const SyntheticSpec& spec, std::size_t n_rows, std::uint64_t seed) {
    if (n_rows < 1) throw config_error("synthetic dataset needs at least one row");
    if (spec.dim_distributions.size() != spec.schema.dims.size())
        throw config_error("one distribution per dimension is required");
    RawDataset raw;
    raw.schema = spec.schema;
    raw.value_names = spec.schema.value_columns();
    for (const auto& name : raw.value_names) {
        bool found = false;
        for (const auto& v : spec.value_columns) found = found || v.grid.name == name;
        if (!found) throw config_error("no generator for value column '" + name + "'");
    }

    std::uint64_t stream = 0;
    auto fill = [&](const DimensionSpec& grid, const Distribution& dist) {
        detail::CellSampler sample(dist, grid, detail::splitmix64(seed ^ detail::splitmix64(++stream)));
        std::vector<double> col(n_rows);
        for (auto& v : col) v = grid.atomic_boundary(sample());
        return col;
    };
    for (std::size_t d = 0; d < spec.schema.dims.size(); ++d) {
        spec.schema.dims[d].validate();
        raw.dims.push_back(fill(spec.schema.dims[d], spec.dim_distributions[d]));
    }
    for (const auto& name : raw.value_names)
        for (const auto& v : spec.value_columns)
            if (v.grid.name == name) raw.values.push_back(fill(v.grid, v.distribution));
    return raw;
}

}  // namespace progbin
