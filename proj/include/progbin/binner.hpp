#pragma once

// Offline binning pipeline: raw rows -> one sparse BinnedTable per refinement
// level plus the BASE (atomic-cell) table, persisted as CSV files next to a
// JSON manifest.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "core.hpp"
#include "schema.hpp"

namespace progbin {

struct RawDataset {
    Schema schema;
    std::vector<std::vector<double>> dims;     // one column per schema dim
    std::vector<std::string> value_names;      // measure source columns
    std::vector<std::vector<double>> values;   // one column per value name

    std::size_t rows() const { return dims.empty() ? 0 : dims.front().size(); }

    const std::vector<double>& value_column(const std::string& name) const {
        for (std::size_t i = 0; i < value_names.size(); ++i)
            if (value_names[i] == name) return values[i];
        throw query_error("unknown value column '" + name + "'");
    }

    friend bool operator==(const RawDataset& a, const RawDataset& b) {
        return a.dims == b.dims && a.value_names == b.value_names && a.values == b.values;
    }
};

/// Equi-width factor-2 hierarchy: one DimensionSpec per dimension, shared max_level.
struct BinHierarchy {
    std::vector<DimensionSpec> dims;
    int max_level = 0;

    /// Queryable resolutions: 0..max_level, then BASE.
    std::vector<Level> levels() const {
        std::vector<Level> out;
        for (int k = 0; k <= max_level; ++k) out.emplace_back(k);
        out.push_back(Level::base());
        return out;
    }

    std::vector<double> boundaries(std::size_t dim, Level level) const {
        const auto& d = dims.at(dim);
        const auto n = d.bin_count(level);
        const auto per = d.cells_per_bin(level);
        std::vector<double> out;
        out.reserve(n + 1);
        for (std::uint64_t i = 0; i <= n; ++i) out.push_back(d.atomic_boundary(i * per));
        return out;
    }

    /// Π_i bins_i(level): the most rows a table at `level` can hold.
    double max_rows(Level level) const {
        double p = 1.0;
        for (const auto& d : dims) p *= static_cast<double>(d.bin_count(level));
        return p;
    }
};

inline BinHierarchy compute_hierarchy(std::vector<DimensionSpec> dims, const std::vector<std::uint32_t>& level0_bins,
                                      int max_level) {
    if (level0_bins.size() != dims.size() && level0_bins.size() != 1)
        throw config_error("level0_bins must be given once or per dimension");
    BinHierarchy h;
    h.max_level = max_level;
    for (std::size_t i = 0; i < dims.size(); ++i) {
        dims[i].level0_bins = level0_bins.size() == 1 ? level0_bins[0] : level0_bins[i];
        dims[i].max_level = max_level;
        dims[i].validate();
    }
    h.dims = std::move(dims);
    return h;
}

/// One materialized level: distinct bin-index tuples with their aggregates.
/// Rows are sorted by bin tuple (first dimension most significant).
struct BinnedTable {
    Level level;
    std::vector<MeasureSpec> measures;
    std::vector<std::vector<std::uint32_t>> bins;  // [dim][row]
    std::vector<std::int64_t> count;               // [row]
    std::vector<std::vector<double>> comps;        // [measure][row]; empty for count measures

    std::size_t row_count() const { return count.size(); }
    std::size_t dim_count() const { return bins.size(); }

    Aggregate aggregate(std::size_t row, std::size_t measure) const {
        Aggregate a;
        a.count = count[row];
        const auto& m = measures.at(measure);
        switch (m.kind) {
            case MeasureKind::count: break;
            case MeasureKind::sum:
            case MeasureKind::avg: a.sum = comps[measure][row]; break;
            case MeasureKind::min: a.min = comps[measure][row]; break;
            case MeasureKind::max: a.max = comps[measure][row]; break;
        }
        return a;
    }

    std::int64_t total_count() const { return std::accumulate(count.begin(), count.end(), std::int64_t{0}); }

    friend bool operator==(const BinnedTable&, const BinnedTable&) = default;
};

namespace detail {

using Key = unsigned __int128;

inline std::vector<int> key_bits(const std::vector<DimensionSpec>& dims, Level level) {
    std::vector<int> bits;
    int total = 0;
    for (const auto& d : dims) {
        const int b = std::max(1, static_cast<int>(std::bit_width(d.bin_count(level) - 1)));
        bits.push_back(b);
        total += b;
    }
    if (total > 128) throw config_error("bin tuple at level " + level.to_string() + " needs " + std::to_string(total) + " bits; at most 128 are supported");
    return bits;
}

/// Group rows by the bin tuple in `row_bins` and fold their contributions.
/// `contribute(row, table, out_row)` merges the row's measures into out_row.
template <class Contribute>
BinnedTable group_rows(Level level, const std::vector<DimensionSpec>& dims, const std::vector<MeasureSpec>& measures,
                       const std::vector<std::vector<std::uint32_t>>& row_bins, std::size_t n, Contribute contribute) {
    const auto bits = key_bits(dims, level);
    std::vector<std::pair<Key, std::uint32_t>> keys(n);
    for (std::size_t r = 0; r < n; ++r) {
        Key k = 0;
        for (std::size_t d = 0; d < dims.size(); ++d) k = (k << bits[d]) | row_bins[d][r];
        keys[r] = {k, static_cast<std::uint32_t>(r)};
    }
    std::sort(keys.begin(), keys.end());

    BinnedTable t;
    t.level = level;
    t.measures = measures;
    t.bins.resize(dims.size());
    t.comps.resize(measures.size());
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = keys[i].second;
        const bool first = i == 0 || keys[i].first != keys[i - 1].first;
        if (first) {
            for (std::size_t d = 0; d < dims.size(); ++d) t.bins[d].push_back(row_bins[d][row]);
            t.count.push_back(0);
            for (std::size_t m = 0; m < measures.size(); ++m) {
                if (measures[m].kind == MeasureKind::count) continue;
                t.comps[m].push_back(measures[m].kind == MeasureKind::min   ? std::numeric_limits<double>::infinity()
                                     : measures[m].kind == MeasureKind::max ? -std::numeric_limits<double>::infinity()
                                                                            : 0.0);
            }
        }
        contribute(row, t, t.count.size() - 1);
    }
    return t;
}

inline void fold(BinnedTable& t, std::size_t out, std::size_t m, double v) {
    switch (t.measures[m].kind) {
        case MeasureKind::count: break;
        case MeasureKind::sum:
        case MeasureKind::avg: t.comps[m][out] += v; break;
        case MeasureKind::min: t.comps[m][out] = std::min(t.comps[m][out], v); break;
        case MeasureKind::max: t.comps[m][out] = std::max(t.comps[m][out], v); break;
    }
}

}  // namespace detail

inline BinnedTable materialize_level(const RawDataset& raw, const BinHierarchy& h, Level level) {
    if (raw.dims.size() != h.dims.size()) throw config_error("hierarchy does not cover the dataset's dimensions");
    const auto n = raw.rows();
    std::vector<std::vector<std::uint32_t>> row_bins(h.dims.size(), std::vector<std::uint32_t>(n));
    for (std::size_t d = 0; d < h.dims.size(); ++d) {
        const auto& spec = h.dims[d];
        const auto per = spec.cells_per_bin(level);
        for (std::size_t r = 0; r < n; ++r) {
            try {
                row_bins[d][r] = static_cast<std::uint32_t>(atomic_index_of(raw.dims[d][r], spec) / per);
            } catch (const domain_error& e) {
                throw ingest_error("row " + std::to_string(r + 1) + ": " + e.what());
            }
        }
    }
    const auto& measures = raw.schema.measures;
    std::vector<const std::vector<double>*> src(measures.size(), nullptr);
    for (std::size_t m = 0; m < measures.size(); ++m)
        if (measures[m].kind != MeasureKind::count) src[m] = &raw.value_column(measures[m].column);
    return detail::group_rows(level, h.dims, measures, row_bins, n, [&](std::size_t row, BinnedTable& t, std::size_t out) {
        t.count[out] += 1;
        for (std::size_t m = 0; m < measures.size(); ++m)
            if (src[m]) detail::fold(t, out, m, (*src[m])[row]);
    });
}

/// Aggregate a table into a coarser level (every bin maps onto exactly one coarse bin).
inline BinnedTable roll_up(const BinnedTable& fine, const BinHierarchy& h, Level coarse) {
    std::vector<std::vector<std::uint32_t>> row_bins(h.dims.size());
    for (std::size_t d = 0; d < h.dims.size(); ++d) {
        const auto r = h.dims[d].ratio(fine.level, coarse);
        row_bins[d].resize(fine.row_count());
        for (std::size_t i = 0; i < fine.row_count(); ++i) row_bins[d][i] = static_cast<std::uint32_t>(fine.bins[d][i] / r);
    }
    return detail::group_rows(coarse, h.dims, fine.measures, row_bins, fine.row_count(),
                              [&](std::size_t row, BinnedTable& t, std::size_t out) {
                                  t.count[out] += fine.count[row];
                                  for (std::size_t m = 0; m < t.measures.size(); ++m)
                                      if (t.measures[m].kind != MeasureKind::count)
                                          detail::fold(t, out, m, fine.comps[m][row]);
                              });
}

struct Dataset {
    std::string name;
    BinHierarchy hierarchy;
    std::vector<MeasureSpec> measures;
    std::map<Level, BinnedTable> tables;

    const BinnedTable& table(Level l) const {
        auto it = tables.find(l);
        if (it == tables.end()) throw query_error("level " + l.to_string() + " not materialized");
        return it->second;
    }

    Schema schema() const { return Schema{name, hierarchy.dims, measures}; }
};

/// BASE from the raw rows, then each level rolled up from the next finer one.
inline Dataset build_dataset(const RawDataset& raw, const BinHierarchy& h) {
    Dataset ds{raw.schema.name, h, raw.schema.measures, {}};
    auto finer = ds.tables.emplace(Level::base(), materialize_level(raw, h, Level::base())).first;
    for (int k = h.max_level; k >= 0; --k) finer = ds.tables.emplace(Level(k), roll_up(finer->second, h, Level(k))).first;
    return ds;
}

// --- CSV --------------------------------------------------------------------

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    for (auto& f : out) {
        while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
        while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
    }
    return out;
}

template <class T>
std::optional<T> parse_number(std::string_view s) {
    T v{};
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) return std::nullopt;
    return v;
}

/// Buffered writer using shortest round-trip formatting.
class CsvWriter {
  public:
    explicit CsvWriter(const std::filesystem::path& path) : out_(path, std::ios::binary) {
        if (!out_) throw io_error("cannot open '" + path.string() + "' for writing");
        buf_.reserve(1 << 20);
    }
    ~CsvWriter() { flush(); }
    CsvWriter(const CsvWriter&) = delete;
    CsvWriter& operator=(const CsvWriter&) = delete;

    template <class T>
    void field(T v, bool last) {
        char tmp[64];
        const auto [p, ec] = std::to_chars(tmp, tmp + sizeof tmp, v);
        buf_.append(tmp, p);
        buf_.push_back(last ? '\n' : ',');
        if (buf_.size() > (1 << 20) - 128) flush();
    }
    void text(std::string_view s, bool last) {
        buf_.append(s);
        buf_.push_back(last ? '\n' : ',');
    }
    void flush() {
        out_.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        buf_.clear();
        if (!out_) throw io_error("write failed");
    }

  private:
    std::ofstream out_;
    std::string buf_;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

/// Calls fn(line_number, fields) per non-empty line after the header; returns the header.
template <class Fn>
std::vector<std::string> for_each_csv_row(const std::string& text, const std::string& what, Fn fn) {
    std::string_view rest(text);
    std::size_t line_no = 0;
    std::vector<std::string> header;
    while (!rest.empty()) {
        const auto nl = rest.find('\n');
        const auto line = rest.substr(0, nl);
        rest = nl == std::string_view::npos ? std::string_view{} : rest.substr(nl + 1);
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv_line(line);
        if (header.empty()) {
            for (auto f : fields) header.emplace_back(f);
            continue;
        }
        if (fields.size() != header.size())
            throw ingest_error(what + ": line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                               " fields, found " + std::to_string(fields.size()));
        fn(line_no, fields);
    }
    if (header.empty()) throw ingest_error(what + ": missing header");
    return header;
}

inline std::vector<std::string> csv_header(const std::string& text, const std::string& what) {
    std::string_view rest(text);
    while (!rest.empty()) {
        const auto nl = rest.find('\n');
        const auto line = rest.substr(0, nl);
        rest = nl == std::string_view::npos ? std::string_view{} : rest.substr(nl + 1);
        if (line.empty() || line == "\r") continue;
        std::vector<std::string> out;
        for (auto f : split_csv_line(line)) out.emplace_back(f);
        return out;
    }
    throw ingest_error(what + ": missing header");
}

}  // namespace detail

/// Parse a headered numeric CSV. Rows outside a dimension's domain are rejected.
inline RawDataset ingest_csv(const std::filesystem::path& path, const Schema& schema) {
    for (const auto& d : schema.dims) d.validate();
    const auto text = detail::read_file(path);
    RawDataset raw;
    raw.schema = schema;
    raw.value_names = schema.value_columns();
    raw.dims.resize(schema.dims.size());
    raw.values.resize(raw.value_names.size());

    const auto what = path.string();
    const auto header = detail::csv_header(text, what);
    auto find_col = [&](const std::string& name) {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw ingest_error(what + ": missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    std::vector<std::size_t> dim_col, val_col;
    for (const auto& d : schema.dims) dim_col.push_back(find_col(d.name));
    for (const auto& v : raw.value_names) val_col.push_back(find_col(v));

    std::size_t row = 0;
    detail::for_each_csv_row(text, what, [&](std::size_t line, const std::vector<std::string_view>& f) {
        ++row;
        auto cell = [&](std::size_t col, const std::string& name) {
            auto v = detail::parse_number<double>(f[col]);
            if (!v)
                throw ingest_error(what + ": row " + std::to_string(row) + " (line " + std::to_string(line) + "), column '" +
                                   name + "': non-numeric value '" + std::string(f[col]) + "'");
            return *v;
        };
        for (std::size_t d = 0; d < dim_col.size(); ++d) {
            const double v = cell(dim_col[d], schema.dims[d].name);
            const auto& spec = schema.dims[d];
            if (!(v >= spec.domain_min && v < spec.domain_max))
                throw ingest_error(what + ": row " + std::to_string(row) + " (line " + std::to_string(line) + "), column '" +
                                   spec.name + "': value " + std::string(f[dim_col[d]]) + " outside [" +
                                   std::to_string(spec.domain_min) + ", " + std::to_string(spec.domain_max) + ")");
            raw.dims[d].push_back(v);
        }
        for (std::size_t c = 0; c < val_col.size(); ++c) raw.values[c].push_back(cell(val_col[c], raw.value_names[c]));
    });
    return raw;
}

inline void write_csv(const RawDataset& raw, const std::filesystem::path& path) {
    detail::CsvWriter w(path);
    const auto cols = raw.dims.size() + raw.values.size();
    std::size_t c = 0;
    for (const auto& d : raw.schema.dims) w.text(d.name, ++c == cols);
    for (const auto& v : raw.value_names) w.text(v, ++c == cols);
    for (std::size_t r = 0; r < raw.rows(); ++r) {
        c = 0;
        for (const auto& col : raw.dims) w.field(col[r], ++c == cols);
        for (const auto& col : raw.values) w.field(col[r], ++c == cols);
    }
}

// --- manifest ---------------------------------------------------------------

inline constexpr int kManifestVersion = 1;

struct ManifestLevel {
    Level level;
    std::size_t row_count = 0;
    std::string path;
};

struct Manifest {
    std::string name;
    int version = kManifestVersion;
    std::vector<DimensionSpec> dims;
    std::vector<MeasureSpec> measures;
    std::vector<ManifestLevel> levels;
};

inline void to_json(json& j, const Manifest& m) {
    j = json{{"name", m.name}, {"version", m.version}, {"dims", m.dims}, {"measures", m.measures}, {"levels", json::array()}};
    for (const auto& l : m.levels)
        j["levels"].push_back(json{{"level", level_to_json(l.level)}, {"row_count", l.row_count}, {"path", l.path}});
}

inline void from_json(const json& j, Manifest& m) {
    m.name = j.at("name").get<std::string>();
    m.version = j.at("version").get<int>();
    m.dims = j.at("dims").get<std::vector<DimensionSpec>>();
    m.measures = j.at("measures").get<std::vector<MeasureSpec>>();
    m.levels.clear();
    for (const auto& l : j.at("levels"))
        m.levels.push_back({level_from_json(l.at("level")), l.at("row_count").get<std::size_t>(), l.at("path").get<std::string>()});
}

inline std::string level_file_name(Level l) { return "level_" + l.to_string() + ".csv"; }

inline void write_table(const BinnedTable& t, const std::vector<DimensionSpec>& dims, const std::filesystem::path& path) {
    detail::CsvWriter w(path);
    std::vector<std::size_t> value_measures;
    for (std::size_t m = 0; m < t.measures.size(); ++m)
        if (t.measures[m].kind != MeasureKind::count) value_measures.push_back(m);
    const auto cols = dims.size() + 1 + value_measures.size();
    std::size_t c = 0;
    for (const auto& d : dims) w.text(d.name, ++c == cols);
    w.text("count", ++c == cols);
    for (auto m : value_measures) w.text(t.measures[m].name, ++c == cols);
    for (std::size_t r = 0; r < t.row_count(); ++r) {
        c = 0;
        for (const auto& col : t.bins) w.field(col[r], ++c == cols);
        w.field(t.count[r], ++c == cols);
        for (auto m : value_measures) w.field(t.comps[m][r], ++c == cols);
    }
}

inline BinnedTable read_table(const std::filesystem::path& path, Level level, const std::vector<DimensionSpec>& dims,
                              const std::vector<MeasureSpec>& measures) {
    const auto text = detail::read_file(path);
    BinnedTable t;
    t.level = level;
    t.measures = measures;
    t.bins.resize(dims.size());
    t.comps.resize(measures.size());
    std::vector<std::size_t> value_measures;
    for (std::size_t m = 0; m < measures.size(); ++m)
        if (measures[m].kind != MeasureKind::count) value_measures.push_back(m);
    const auto what = path.string();
    std::vector<std::uint64_t> limits;
    for (const auto& d : dims) limits.push_back(d.bin_count(level));
    detail::for_each_csv_row(text, what, [&](std::size_t line, const std::vector<std::string_view>& f) {
        if (f.size() != dims.size() + 1 + value_measures.size())
            throw ingest_error(what + ": line " + std::to_string(line) + ": column count does not match manifest");
        for (std::size_t d = 0; d < dims.size(); ++d) {
            auto b = detail::parse_number<std::uint64_t>(f[d]);
            if (!b || *b >= limits[d])
                throw ingest_error(what + ": line " + std::to_string(line) + ": invalid bin index for '" + dims[d].name + "'");
            t.bins[d].push_back(static_cast<std::uint32_t>(*b));
        }
        auto c = detail::parse_number<std::int64_t>(f[dims.size()]);
        if (!c || *c <= 0) throw ingest_error(what + ": line " + std::to_string(line) + ": count must be a positive integer");
        t.count.push_back(*c);
        for (std::size_t i = 0; i < value_measures.size(); ++i) {
            auto v = detail::parse_number<double>(f[dims.size() + 1 + i]);
            if (!v) throw ingest_error(what + ": line " + std::to_string(line) + ": non-numeric measure component");
            t.comps[value_measures[i]].push_back(*v);
        }
    });
    return t;
}

inline Manifest write_manifest(const Dataset& ds, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw io_error("cannot create '" + out_dir.string() + "': " + ec.message());
    Manifest m{ds.name, kManifestVersion, ds.hierarchy.dims, ds.measures, {}};
    for (const auto level : ds.hierarchy.levels()) {
        const auto& t = ds.table(level);
        const auto file = level_file_name(level);
        write_table(t, ds.hierarchy.dims, out_dir / file);
        m.levels.push_back({level, t.row_count(), file});
    }
    std::ofstream out(out_dir / "manifest.json");
    if (!out) throw io_error("cannot write manifest in '" + out_dir.string() + "'");
    out << json(m).dump(2) << '\n';
    if (!out) throw io_error("manifest write failed");
    return m;
}

inline Manifest read_manifest(const std::filesystem::path& dir) {
    Manifest m;
    try {
        m = json::parse(detail::read_file(dir / "manifest.json")).get<Manifest>();
    } catch (const json::exception& e) {
        throw ingest_error("invalid manifest in '" + dir.string() + "': " + e.what());
    }
    if (m.version != kManifestVersion) throw ingest_error("unsupported manifest version " + std::to_string(m.version));
    return m;
}

/// Load and validate a built dataset directory.
inline Dataset load_dataset(const std::filesystem::path& dir) {
    const auto m = read_manifest(dir);
    Dataset ds;
    ds.name = m.name;
    ds.measures = m.measures;
    ds.hierarchy.dims = m.dims;
    ds.hierarchy.max_level = m.dims.empty() ? 0 : m.dims.front().max_level;
    for (const auto& d : m.dims) {
        d.validate();
        if (d.max_level != ds.hierarchy.max_level) throw ingest_error("dimensions disagree on max_level");
    }
    for (const auto& l : m.levels) {
        auto t = read_table(dir / l.path, l.level, m.dims, m.measures);
        if (t.row_count() != l.row_count)
            throw ingest_error("level " + l.level.to_string() + ": manifest row_count " + std::to_string(l.row_count) +
                               " does not match " + std::to_string(t.row_count()) + " rows in '" + l.path + "'");
        ds.tables.emplace(l.level, std::move(t));
    }
    for (const auto level : ds.hierarchy.levels())
        if (!ds.tables.count(level)) throw ingest_error("manifest lacks level " + level.to_string());
    return ds;
}

}  // namespace progbin
