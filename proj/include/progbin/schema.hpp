#pragma once

// JSON mapping for schemas and manifests.

#include <string>
#include <vector>

#include <json.hpp>

#include "core.hpp"

namespace progbin {

using json = nlohmann::json;

inline json level_to_json(Level l) { return l.is_base() ? json("base") : json(l.value()); }

inline Level level_from_json(const json& j) {
    if (j.is_string()) return Level::parse(j.get<std::string>());
    if (j.is_number_integer()) return Level(j.get<int>());
    throw config_error("level must be an integer or \"base\"");
}

inline void to_json(json& j, const DimensionSpec& d) {
    j = json{{"name", d.name},
             {"domain_min", d.domain_min},
             {"domain_max", d.domain_max},
             {"atomic_resolution", d.atomic_resolution},
             {"level0_bins", d.level0_bins},
             {"max_level", d.max_level},
             {"split_factor", kSplitFactor}};
}

inline void from_json(const json& j, DimensionSpec& d) {
    d.name = j.at("name").get<std::string>();
    d.domain_min = j.contains("domain_min") ? j.at("domain_min").get<double>() : j.at("min").get<double>();
    d.domain_max = j.contains("domain_max") ? j.at("domain_max").get<double>() : j.at("max").get<double>();
    d.atomic_resolution = j.value("atomic_resolution", 1.0);
    d.level0_bins = j.value("level0_bins", 32u);
    d.max_level = j.value("max_level", 4);
    if (j.value("split_factor", kSplitFactor) != kSplitFactor)
        throw config_error("dimension '" + d.name + "': only split_factor 2 is supported");
}

inline void to_json(json& j, const MeasureSpec& m) {
    j = json{{"name", m.name}, {"kind", to_string(m.kind)}};
    if (!m.column.empty()) j["column"] = m.column;
}

inline void from_json(const json& j, MeasureSpec& m) {
    m.kind = parse_measure_kind(j.at("kind").get<std::string>());
    m.column = j.value("column", std::string{});
    m.name = j.value("name", m.column.empty() ? to_string(m.kind) : to_string(m.kind) + "_" + m.column);
    if (m.kind != MeasureKind::count && m.column.empty())
        throw config_error("measure '" + m.name + "' needs a source column");
}

/// Dimensions plus measures of a dataset.
struct Schema {
    std::string name = "dataset";
    std::vector<DimensionSpec> dims;
    std::vector<MeasureSpec> measures;

    /// Distinct measure source columns, in first-use order.
    std::vector<std::string> value_columns() const {
        std::vector<std::string> out;
        for (const auto& m : measures)
            if (!m.column.empty() && std::find(out.begin(), out.end(), m.column) == out.end()) out.push_back(m.column);
        return out;
    }

    std::size_t dim_index(const std::string& dim) const {
        for (std::size_t i = 0; i < dims.size(); ++i)
            if (dims[i].name == dim) return i;
        throw query_error("unknown dimension '" + dim + "'");
    }

    std::size_t measure_index(const std::string& measure) const {
        for (std::size_t i = 0; i < measures.size(); ++i)
            if (measures[i].name == measure) return i;
        throw query_error("unknown measure '" + measure + "'");
    }
};

inline void from_json(const json& j, Schema& s) {
    s.name = j.value("name", std::string("dataset"));
    s.dims = j.at("dims").get<std::vector<DimensionSpec>>();
    if (j.contains("measures")) s.measures = j.at("measures").get<std::vector<MeasureSpec>>();
    if (s.measures.empty()) s.measures.push_back(MeasureSpec{});
    if (s.dims.empty()) throw config_error("schema declares no dimensions");
    if (s.dims.size() > 32) throw config_error("at most 32 dimensions are supported");
    for (std::size_t i = 0; i < s.dims.size(); ++i)
        for (std::size_t k = i + 1; k < s.dims.size(); ++k)
            if (s.dims[i].name == s.dims[k].name) throw config_error("duplicate dimension '" + s.dims[i].name + "'");
}

inline void to_json(json& j, const Predicate& p) {
    j = json{{"dim", p.dim}, {"level", level_to_json(p.level)}, {"lo", p.lo}, {"hi", p.hi}};
}

inline void from_json(const json& j, Predicate& p) {
    p.dim = j.at("dim").get<std::size_t>();
    p.level = level_from_json(j.at("level"));
    p.lo = j.at("lo").get<std::uint64_t>();
    p.hi = j.at("hi").get<std::uint64_t>();
}

inline void to_json(json& j, const Schema& s) { j = json{{"name", s.name}, {"dims", s.dims}, {"measures", s.measures}}; }

}  // namespace progbin
