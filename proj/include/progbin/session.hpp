#pragma once

// Interactive sessions: per-session filter state and frontiers, translation of
// user actions into engine queries and refinement plans, and the result frames
// streamed back to the client.
//
// `Session` is the synchronous core (one action at a time, frames pushed into a
// sink). `SessionRunner` serializes actions on a worker thread, debounces
// filter storms and cancels in-flight plans; `SessionManager` owns the runners.

#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "engine.hpp"
#include "metrics.hpp"
#include "refinement.hpp"
#include "schema.hpp"

namespace progbin {

// --- frames -----------------------------------------------------------------

struct FrameCell {
    Level level;
    std::uint64_t bin = 0;
    double x0 = 0.0;
    double x1 = 0.0;
    double y = 0.0;
    friend bool operator==(const FrameCell&, const FrameCell&) = default;
};

struct FrameMetrics {
    std::optional<double> plot_ad;
    std::optional<double> plot_entropy;
    std::optional<double> plot_rec;
    std::optional<double> plot_igp;
    friend bool operator==(const FrameMetrics&, const FrameMetrics&) = default;
};

struct ResultFrame {
    enum class Kind { snapshot, refine, done, error };
    std::uint64_t seq = 0;
    Kind kind = Kind::snapshot;
    std::optional<std::size_t> dim;
    std::vector<FrameCell> cells;
    FrameMetrics metrics;
    double elapsed_ms = 0.0;
    std::string message;  // done: stop reason; error: what went wrong
};

inline std::string to_string(ResultFrame::Kind k) {
    switch (k) {
        case ResultFrame::Kind::snapshot: return "snapshot";
        case ResultFrame::Kind::refine: return "refine";
        case ResultFrame::Kind::done: return "done";
        case ResultFrame::Kind::error: return "error";
    }
    return "error";
}

inline ResultFrame::Kind parse_frame_kind(const std::string& s) {
    if (s == "snapshot") return ResultFrame::Kind::snapshot;
    if (s == "refine") return ResultFrame::Kind::refine;
    if (s == "done") return ResultFrame::Kind::done;
    if (s == "error") return ResultFrame::Kind::error;
    throw query_error("unknown frame kind '" + s + "'");
}

namespace detail {
template <class T>
json optional_json(const std::optional<T>& v) {
    if (!v) return nullptr;
    if constexpr (std::is_floating_point_v<T>)
        if (!std::isfinite(*v)) return *v > 0 ? json("inf") : json("-inf");
    return *v;
}

inline std::optional<double> optional_double(const json& j) {
    if (j.is_null()) return std::nullopt;
    if (j.is_string()) return j.get<std::string>() == "inf" ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    return j.get<double>();
}
}  // namespace detail

inline void to_json(json& j, const FrameCell& c) {
    j = json{{"level", level_to_json(c.level)}, {"bin", c.bin}, {"x0", c.x0}, {"x1", c.x1}, {"y", c.y}};
}

inline void from_json(const json& j, FrameCell& c) {
    c.level = level_from_json(j.at("level"));
    c.bin = j.at("bin").get<std::uint64_t>();
    c.x0 = j.at("x0").get<double>();
    c.x1 = j.at("x1").get<double>();
    c.y = j.at("y").get<double>();
}

inline void to_json(json& j, const ResultFrame& f) {
    j = json{{"seq", f.seq},
             {"kind", to_string(f.kind)},
             {"dim", detail::optional_json(f.dim)},
             {"cells", f.cells},
             {"metrics",
              {{"plot_ad", detail::optional_json(f.metrics.plot_ad)},
               {"plot_entropy", detail::optional_json(f.metrics.plot_entropy)},
               {"plot_rec", detail::optional_json(f.metrics.plot_rec)},
               {"plot_igp", detail::optional_json(f.metrics.plot_igp)}}},
             {"elapsed_ms", f.elapsed_ms}};
    if (!f.message.empty()) j["message"] = f.message;
}

inline void from_json(const json& j, ResultFrame& f) {
    f.seq = j.at("seq").get<std::uint64_t>();
    f.kind = parse_frame_kind(j.at("kind").get<std::string>());
    f.dim = j.at("dim").is_null() ? std::nullopt : std::optional<std::size_t>(j.at("dim").get<std::size_t>());
    f.cells = j.at("cells").get<std::vector<FrameCell>>();
    const auto& m = j.at("metrics");
    f.metrics.plot_ad = detail::optional_double(m.at("plot_ad"));
    f.metrics.plot_entropy = detail::optional_double(m.at("plot_entropy"));
    f.metrics.plot_rec = detail::optional_double(m.at("plot_rec"));
    f.metrics.plot_igp = detail::optional_double(m.at("plot_igp"));
    f.elapsed_ms = j.at("elapsed_ms").get<double>();
    f.message = j.value("message", std::string{});
}

// --- actions ----------------------------------------------------------------

struct Action {
    enum class Kind { filter, refine_bin, gro, refine_max, run_base, refine_interesting, reset, stop, invalid };
    Kind kind = Kind::invalid;
    std::size_t dim = 0;
    std::optional<Predicate> range;  // filter; empty clears
    BinRef cell;                     // refine_bin
    RefinementKnobs knobs;           // gro, including scope
    std::string message;             // invalid: parse error
};

namespace detail {

inline std::size_t dim_from_json(const json& j, const Schema& schema) {
    if (j.is_string()) return schema.dim_index(j.get<std::string>());
    if (!j.is_number_unsigned() && !j.is_number_integer()) throw query_error("'dim' must be an index or a name");
    const auto d = j.get<long long>();
    if (d < 0 || static_cast<std::size_t>(d) >= schema.dims.size()) throw query_error("unknown dimension " + std::to_string(d));
    return static_cast<std::size_t>(d);
}

inline RefinementKnobs knobs_from_json(const json& j) {
    RefinementKnobs k;
    if (j.contains("min_ref") && !j["min_ref"].is_null()) k.min_ref = level_from_json(j["min_ref"]);
    if (j.contains("max_ref") && !j["max_ref"].is_null()) k.max_ref = level_from_json(j["max_ref"]);
    if (j.contains("min_nr") && !j["min_nr"].is_null()) k.min_nr = j["min_nr"].get<std::size_t>();
    if (j.contains("max_nr") && !j["max_nr"].is_null()) k.max_nr = j["max_nr"].get<std::size_t>();
    if (j.contains("min_ad") && !j["min_ad"].is_null()) k.min_ad = j["min_ad"].get<double>();
    if (j.contains("max_rec") && !j["max_rec"].is_null()) k.max_rec = j["max_rec"].get<double>();
    return k;
}

}  // namespace detail

/// Parse one action object. Throws query_error (or a config/range error) when malformed.
inline Action parse_action(const json& j, const Schema& schema) {
    if (!j.is_object()) throw query_error("action must be a JSON object");
    const auto name = j.at("action").get<std::string>();
    Action a;
    try {
        if (name == "filter") {
            a.kind = Action::Kind::filter;
            a.dim = detail::dim_from_json(j.at("dim"), schema);
            const auto& r = j.at("range");
            if (!r.is_null()) {
                Predicate p{a.dim, level_from_json(r.at("level")), r.at("lo").get<std::uint64_t>(), r.at("hi").get<std::uint64_t>()};
                check_predicate(p, schema.dims[a.dim]);
                a.range = p;
            }
        } else if (name == "refine_bin") {
            a.kind = Action::Kind::refine_bin;
            a.dim = detail::dim_from_json(j.at("dim"), schema);
            a.cell = BinRef{a.dim, level_from_json(j.at("level")), j.at("bin").get<std::uint64_t>()};
            check_ref(a.cell, schema.dims[a.dim]);
        } else if (name == "gro") {
            a.kind = Action::Kind::gro;
            a.knobs = detail::knobs_from_json(j.value("knobs", json::object()));
            const auto scope = j.value("scope", json("all"));
            if (scope.is_string() && scope.get<std::string>() == "all") {
                a.knobs.scope.kind = RefinementScope::Kind::all;
            } else if (scope.is_object() && scope.contains("bin")) {
                a.knobs.scope.kind = RefinementScope::Kind::bin;
                a.dim = detail::dim_from_json(scope.at("dim"), schema);
                a.knobs.scope.dim = a.dim;
                a.knobs.scope.bin = BinRef{a.dim, level_from_json(scope.at("level")), scope.at("bin").get<std::uint64_t>()};
                check_ref(a.knobs.scope.bin, schema.dims[a.dim]);
            } else if (scope.is_object()) {
                a.knobs.scope.kind = RefinementScope::Kind::dim;
                a.dim = detail::dim_from_json(scope.at("dim"), schema);
                a.knobs.scope.dim = a.dim;
            } else {
                throw query_error("'scope' must be \"all\", {dim} or {dim, level, bin}");
            }
            a.knobs.validate();
        } else if (name == "refine_max" || name == "run_base" || name == "refine_interesting") {
            a.kind = name == "refine_max"  ? Action::Kind::refine_max
                     : name == "run_base" ? Action::Kind::run_base
                                          : Action::Kind::refine_interesting;
            a.dim = detail::dim_from_json(j.at("dim"), schema);
        } else if (name == "reset") {
            a.kind = Action::Kind::reset;
        } else if (name == "stop") {
            a.kind = Action::Kind::stop;
        } else {
            throw query_error("unknown action '" + name + "'");
        }
    } catch (const json::exception& e) {
        throw query_error("malformed '" + name + "' action: " + e.what());
    }
    return a;
}

/// Parse, turning any failure into an `invalid` action that reports itself as an error frame.
inline Action parse_action_or_invalid(const std::string& text, const Schema& schema) {
    try {
        return parse_action(json::parse(text), schema);
    } catch (const std::exception& e) {
        Action a;
        a.kind = Action::Kind::invalid;
        a.message = e.what();
        return a;
    }
}

// --- session core -----------------------------------------------------------

using FrameSink = std::function<void(ResultFrame)>;
using CancelFn = std::function<bool()>;

class Session {
  public:
    Session(std::string id, std::shared_ptr<Engine> engine, std::size_t measure = 0)
        : id_(std::move(id)), engine_(std::move(engine)), measure_(measure) {
        if (measure_ >= engine_->dataset().measures.size()) throw query_error("unknown measure index " + std::to_string(measure_));
        predicates_.resize(dims().size());
        reset_frontiers();
    }

    const std::string& id() const { return id_; }
    const std::string& dataset_name() const { return engine_->dataset().name; }
    Schema schema() const { return engine_->dataset().schema(); }
    const std::vector<Frontier>& frontiers() const { return frontiers_; }
    const std::vector<std::optional<Predicate>>& predicates() const { return predicates_; }
    std::uint64_t last_seq() const { return next_seq_ - 1; }

    /// Level-0 snapshot of every plot.
    void start(const FrameSink& sink) { snapshot_all(sink); }

    void apply(const Action& a, const FrameSink& sink, const CancelFn& cancelled = {}) {
        try {
            dispatch(a, sink, cancelled ? cancelled : CancelFn([] { return false; }));
        } catch (const std::exception& e) {
            emit_error(sink, e.what());
        }
    }

    /// Apply several filter actions as one update (last writer per dim wins).
    void apply_filters(const std::vector<Action>& filters, const FrameSink& sink) {
        try {
            const auto t0 = std::chrono::steady_clock::now();
            for (const auto& f : filters) set_filter(f);
            snapshot_all(sink, t0);
        } catch (const std::exception& e) {
            emit_error(sink, e.what());
        }
    }

    void emit_error(const FrameSink& sink, const std::string& message) {
        ResultFrame f;
        f.kind = ResultFrame::Kind::error;
        f.message = message;
        emit(sink, std::move(f));
    }

    /// y of any cell under the current predicates (own-dimension predicate excluded).
    double value(const BinRef& c) { return uniform(c.dim, c.level).y(c.index); }

  private:
    const std::vector<DimensionSpec>& dims() const { return engine_->dataset().hierarchy.dims; }

    void dispatch(const Action& a, const FrameSink& sink, const CancelFn& cancelled) {
        switch (a.kind) {
            case Action::Kind::filter: {
                const auto t0 = std::chrono::steady_clock::now();
                set_filter(a);
                snapshot_all(sink, t0);
                return;
            }
            case Action::Kind::refine_bin: return refine_bin(a.cell, sink);
            case Action::Kind::gro: {
                std::vector<std::size_t> plots;
                if (a.knobs.scope.kind == RefinementScope::Kind::all)
                    for (std::size_t d = 0; d < dims().size(); ++d) plots.push_back(d);
                else
                    plots.push_back(a.dim);
                return run_planners(plots, a.knobs, sink, cancelled);
            }
            case Action::Kind::refine_max: return run_planners({a.dim}, RefinementKnobs{}, sink, cancelled);
            case Action::Kind::refine_interesting: {
                RefinementKnobs k;
                k.min_ad = kInterestingAd;
                return run_planners({a.dim}, k, sink, cancelled);
            }
            case Action::Kind::run_base: {
                check_dim(a.dim);
                const auto t0 = std::chrono::steady_clock::now();
                const auto plan = run_highest(dims()[a.dim], frontiers_[a.dim]);
                for (const auto& round : plan.rounds) {
                    if (cancelled()) return;
                    apply_round(round, sink, t0);
                }
                return emit_done(sink, plan.stop_reason);
            }
            case Action::Kind::reset: {
                for (auto& p : predicates_) p.reset();
                cache_.clear();
                reset_frontiers();
                return snapshot_all(sink);
            }
            case Action::Kind::stop: return emit_done(sink, "stop");
            case Action::Kind::invalid: return emit_error(sink, a.message.empty() ? "invalid action" : a.message);
        }
    }

    void check_dim(std::size_t d) const {
        if (d >= dims().size()) throw query_error("unknown dimension " + std::to_string(d));
    }

    void reset_frontiers() {
        frontiers_.clear();
        for (std::size_t d = 0; d < dims().size(); ++d) frontiers_.push_back(Frontier::uniform(d, dims()[d], Level(0)));
    }

    void set_filter(const Action& a) {
        check_dim(a.dim);
        if (a.range) {
            auto p = *a.range;
            p.dim = a.dim;
            check_predicate(p, dims()[a.dim]);
            if (predicates_[a.dim] == p) return;
            predicates_[a.dim] = p;
        } else {
            if (!predicates_[a.dim]) return;
            predicates_[a.dim].reset();
        }
        // Every plot but the filtered one sees the change.
        std::erase_if(cache_, [&](const auto& kv) { return kv.first.first != a.dim; });
    }

    std::vector<Predicate> active_predicates() const {
        std::vector<Predicate> out;
        for (const auto& p : predicates_)
            if (p) out.push_back(*p);
        return out;
    }

    const Histogram& uniform(std::size_t dim, Level level) {
        const auto key = std::make_pair(dim, level);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        prefetch({key});
        return cache_.at(key);
    }

    /// Query the missing (dim, level) histograms in as few scans as possible.
    void prefetch(const std::vector<std::pair<std::size_t, Level>>& keys) {
        std::vector<Frontier> missing;
        for (const auto& [d, l] : keys)
            if (!cache_.count({d, l}) &&
                std::none_of(missing.begin(), missing.end(), [&](const Frontier& f) { return f.dim == d && f.cells.front().level == l; }))
                missing.push_back(Frontier::uniform(d, dims()[d], l));
        if (missing.empty()) return;
        auto res = engine_->multi_query(active_predicates(), missing, measure_);
        for (std::size_t i = 0; i < missing.size(); ++i)
            cache_[{missing[i].dim, missing[i].cells.front().level}] = std::move(res.histograms[i]);
    }

    void prefetch_frontier(const Frontier& f) {
        std::vector<std::pair<std::size_t, Level>> keys;
        for (const auto& c : f.cells)
            if (keys.empty() || keys.back().second != c.level) keys.emplace_back(f.dim, c.level);
        prefetch(keys);
    }

    std::vector<double> frontier_values(const Frontier& f) {
        prefetch_frontier(f);
        std::vector<double> ys;
        ys.reserve(f.cells.size());
        for (const auto& c : f.cells) ys.push_back(value(c));
        return ys;
    }

    std::vector<std::uint64_t> sub_bin_counts(const Frontier& f) const {
        std::vector<std::uint64_t> n;
        n.reserve(f.cells.size());
        for (const auto& c : f.cells) n.push_back(c.level.is_base() ? 1 : dims()[f.dim].cells_per_bin(c.level));
        return n;
    }

    ResultFrame plot_frame(std::size_t d, ResultFrame::Kind kind, const std::vector<double>& ys) const {
        ResultFrame f;
        f.kind = kind;
        f.dim = d;
        const auto& spec = dims()[d];
        const auto& frontier = frontiers_[d];
        f.cells.reserve(frontier.cells.size());
        for (std::size_t i = 0; i < frontier.cells.size(); ++i) {
            const auto& c = frontier.cells[i];
            const auto [x0, x1] = bin_range(c, spec);
            f.cells.push_back(FrameCell{c.level, c.index, x0, x1, ys[i]});
        }
        f.metrics.plot_entropy = metrics::entropy(ys).plot;
        f.metrics.plot_igp = metrics::igp(ys, sub_bin_counts(frontier)).plot;
        return f;
    }

    void snapshot_all(const FrameSink& sink, std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now()) {
        std::vector<std::pair<std::size_t, Level>> keys;
        for (const auto& f : frontiers_)
            for (const auto& c : f.cells)
                if (std::find(keys.begin(), keys.end(), std::make_pair(f.dim, c.level)) == keys.end()) keys.emplace_back(f.dim, c.level);
        prefetch(keys);
        for (std::size_t d = 0; d < frontiers_.size(); ++d) {
            auto frame = plot_frame(d, ResultFrame::Kind::snapshot, frontier_values(frontiers_[d]));
            frame.elapsed_ms = detail::elapsed_ms_since(t0);
            emit(sink, std::move(frame));
        }
    }

    /// Apply a round's edits and emit the plot's refine frame. AD and REC describe the transition.
    void apply_round(const PlanRound& round, const FrameSink& sink, std::chrono::steady_clock::time_point t0) {
        const auto d = round.dim;
        const auto before = frontier_values(frontiers_[d]);
        double total = 0.0;
        for (double y : before) total += y;
        frontiers_[d] = round.frontier;
        const auto after = frontier_values(frontiers_[d]);

        std::vector<metrics::BinSplit> splits;
        for (const auto& e : round.edits) {
            metrics::BinSplit s{value(e.cell), {}, total};
            for (const auto& c : e.replacement) s.subs.push_back(value(c));
            splits.push_back(std::move(s));
        }
        auto frame = plot_frame(d, ResultFrame::Kind::refine, after);
        frame.metrics.plot_ad = metrics::plot_average_deviance(splits);
        const double h_before = metrics::entropy(before, total).plot;
        if (h_before > 0.0) frame.metrics.plot_rec = (metrics::entropy(after, total).plot - h_before) / h_before;
        frame.elapsed_ms = detail::elapsed_ms_since(t0);
        emit(sink, std::move(frame));
    }

    void refine_bin(const BinRef& cell, const FrameSink& sink) {
        check_dim(cell.dim);
        const auto& spec = dims()[cell.dim];
        if (!frontiers_[cell.dim].contains(cell))
            throw range_error("bin " + std::to_string(cell.index) + " at level " + cell.level.to_string() + " is not displayed");
        if (cell.level.is_base()) throw no_children_error("dimension '" + spec.name + "': cannot refine past BASE");
        const auto t0 = std::chrono::steady_clock::now();
        PlanRound round;
        round.dim = cell.dim;
        FrontierEdit e{FrontierEdit::Kind::split, cell, sub_bins(cell, spec)};
        if (e.replacement.front().level.is_base()) e.kind = FrontierEdit::Kind::to_base;
        round.frontier = frontiers_[cell.dim];
        round.frontier.replace(cell, e.replacement);
        round.edits.push_back(std::move(e));
        apply_round(round, sink, t0);
    }

    /// Progressive execution: one round per plot per step, cancellation checked between rounds.
    void run_planners(const std::vector<std::size_t>& plots, RefinementKnobs knobs, const FrameSink& sink,
                      const CancelFn& cancelled) {
        std::vector<GroPlanner> planners;
        for (auto d : plots) {
            check_dim(d);
            planners.emplace_back(dims()[d], frontiers_[d], knobs);
        }
        const ValueFn values = [this](const BinRef& c) { return value(c); };
        bool progressed = true;
        while (progressed) {
            progressed = false;
            for (auto& p : planners) {
                if (p.done()) continue;
                if (cancelled()) return;
                const auto t0 = std::chrono::steady_clock::now();
                if (auto round = p.next(values)) {
                    apply_round(*round, sink, t0);
                    progressed = true;
                }
            }
        }
        std::string reason;
        for (const auto& p : planners) {
            if (!reason.empty()) reason += ",";
            reason += p.stop_reason();
        }
        emit_done(sink, reason);
    }

    void emit_done(const FrameSink& sink, const std::string& reason) {
        ResultFrame f;
        f.kind = ResultFrame::Kind::done;
        f.message = reason;
        emit(sink, std::move(f));
    }

    void emit(const FrameSink& sink, ResultFrame f) {
        f.seq = next_seq_++;
        sink(std::move(f));
    }

    std::string id_;
    std::shared_ptr<Engine> engine_;
    std::size_t measure_;
    std::vector<std::optional<Predicate>> predicates_;
    std::vector<Frontier> frontiers_;
    std::map<std::pair<std::size_t, Level>, Histogram> cache_;
    std::uint64_t next_seq_ = 1;
};

// --- runner -----------------------------------------------------------------

/// Frame queue of one stream connection.
class Subscription {
  public:
    void push(const ResultFrame& f) {
        {
            std::lock_guard lock(mu_);
            frames_.push_back(f);
        }
        cv_.notify_all();
    }

    void close() {
        {
            std::lock_guard lock(mu_);
            closed_ = true;
        }
        cv_.notify_all();
    }

    bool closed() const {
        std::lock_guard lock(mu_);
        return closed_ && frames_.empty();
    }

    std::optional<ResultFrame> pop(std::chrono::milliseconds timeout) {
        std::unique_lock lock(mu_);
        if (!cv_.wait_for(lock, timeout, [&] { return !frames_.empty() || closed_; })) return std::nullopt;
        if (frames_.empty()) return std::nullopt;
        auto f = std::move(frames_.front());
        frames_.pop_front();
        return f;
    }

  private:
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<ResultFrame> frames_;
    bool closed_ = false;
};

struct RunnerOptions {
    std::chrono::milliseconds debounce{50};
};

class SessionRunner {
  public:
    SessionRunner(std::unique_ptr<Session> session, RunnerOptions options = {})
        : session_(std::move(session)), options_(options), schema_(session_->schema()) {
        session_->start([this](ResultFrame f) { publish(std::move(f)); });
        touch();
        worker_ = std::thread([this] { run(); });
    }

    ~SessionRunner() {
        {
            std::lock_guard lock(mu_);
            quitting_ = true;
            ++cancel_generation_;
        }
        cv_.notify_all();
        worker_.join();
        std::lock_guard lock(sub_mu_);
        for (auto& s : subscribers_) s->close();
    }

    SessionRunner(const SessionRunner&) = delete;
    SessionRunner& operator=(const SessionRunner&) = delete;

    const std::string& id() const { return session_->id(); }
    const Schema& schema() const { return schema_; }

    /// Queue an action. Stop, reset and filter cancel any plan submitted before them,
    /// whether it is running or still queued.
    void submit(Action a) {
        {
            std::lock_guard lock(mu_);
            if (a.kind == Action::Kind::stop || a.kind == Action::Kind::reset || a.kind == Action::Kind::filter)
                ++cancel_generation_;
            queue_.push_back({std::move(a), cancel_generation_});
        }
        touch();
        cv_.notify_all();
    }

    void submit_json(const std::string& line) { submit(parse_action_or_invalid(line, schema_)); }

    /// New stream: replays the latest frame of every plot, then follows live frames.
    std::shared_ptr<Subscription> subscribe() {
        auto sub = std::make_shared<Subscription>();
        std::lock_guard lock(sub_mu_);
        std::vector<const ResultFrame*> latest;
        for (const auto& [d, f] : latest_) latest.push_back(&f);
        std::sort(latest.begin(), latest.end(), [](auto a, auto b) { return a->seq < b->seq; });
        for (auto f : latest) sub->push(*f);
        subscribers_.push_back(sub);
        touch();
        return sub;
    }

    void unsubscribe(const std::shared_ptr<Subscription>& sub) {
        sub->close();
        std::lock_guard lock(sub_mu_);
        std::erase(subscribers_, sub);
        touch();
    }

    /// End every attached stream once its queued frames are drained.
    void close_streams() {
        std::lock_guard lock(sub_mu_);
        for (auto& s : subscribers_) s->close();
        subscribers_.clear();
    }

    std::size_t subscriber_count() const {
        std::lock_guard lock(sub_mu_);
        return subscribers_.size();
    }

    /// Block until every queued action has been applied.
    void wait_idle() {
        std::unique_lock lock(mu_);
        idle_cv_.wait(lock, [&] { return queue_.empty() && !busy_; });
    }

    std::chrono::steady_clock::time_point last_activity() const {
        std::lock_guard lock(activity_mu_);
        return last_activity_;
    }

  private:
    void touch() {
        std::lock_guard lock(activity_mu_);
        last_activity_ = std::chrono::steady_clock::now();
    }

    void publish(ResultFrame f) {
        std::lock_guard lock(sub_mu_);
        if (f.dim) latest_[*f.dim] = f;
        for (auto& s : subscribers_) s->push(f);
    }

    void run() {
        const FrameSink sink = [this](ResultFrame f) { publish(std::move(f)); };
        std::unique_lock lock(mu_);
        while (true) {
            cv_.wait(lock, [&] { return quitting_ || !queue_.empty(); });
            if (quitting_) break;
            auto [a, generation] = std::move(queue_.front());
            queue_.pop_front();
            busy_ = true;
            if (a.kind == Action::Kind::filter) {
                // Debounce: gather the filters that arrive within the window, last writer per dim wins.
                cv_.wait_for(lock, options_.debounce, [&] { return quitting_; });
                if (quitting_) break;
                std::vector<Action> filters{std::move(a)};
                while (!queue_.empty() && queue_.front().first.kind == Action::Kind::filter) {
                    filters.push_back(std::move(queue_.front().first));
                    queue_.pop_front();
                }
                lock.unlock();
                session_->apply_filters(filters, sink);
            } else {
                lock.unlock();
                session_->apply(a, sink, [this, generation = generation] {
                    std::lock_guard g(mu_);
                    return cancel_generation_ != generation;
                });
            }
            lock.lock();
            busy_ = false;
            touch();
            if (queue_.empty()) idle_cv_.notify_all();
        }
        busy_ = false;
        idle_cv_.notify_all();
    }

    std::unique_ptr<Session> session_;
    RunnerOptions options_;
    Schema schema_;

    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable idle_cv_;
    std::deque<std::pair<Action, std::uint64_t>> queue_;  // action, cancel generation at submit
    std::uint64_t cancel_generation_ = 0;
    bool busy_ = false;
    bool quitting_ = false;

    mutable std::mutex sub_mu_;
    std::vector<std::shared_ptr<Subscription>> subscribers_;
    std::map<std::size_t, ResultFrame> latest_;

    mutable std::mutex activity_mu_;
    std::chrono::steady_clock::time_point last_activity_;

    std::thread worker_;
};

// --- manager ----------------------------------------------------------------

struct SessionManagerOptions {
    RunnerOptions runner;
    /// Sessions without a stream and without actions for this long are dropped.
    std::chrono::seconds idle_timeout{600};
};

class SessionManager {
  public:
    explicit SessionManager(std::map<std::string, std::shared_ptr<Engine>> engines, SessionManagerOptions options = {})
        : engines_(std::move(engines)), options_(options), rng_(std::random_device{}()) {}

    std::vector<std::string> dataset_names() const {
        std::vector<std::string> out;
        for (const auto& [name, e] : engines_) out.push_back(name);
        return out;
    }

    const Dataset& dataset(const std::string& name) const { return engine(name)->dataset(); }

    std::string create(const std::string& dataset, std::size_t measure = 0) {
        auto e = engine(dataset);
        expire_idle();
        std::string id;
        {
            std::lock_guard lock(mu_);
            do {
                id = random_id();
            } while (runners_.count(id));
        }
        auto runner = std::make_shared<SessionRunner>(std::make_unique<Session>(id, e, measure), options_.runner);
        std::lock_guard lock(mu_);
        runners_.emplace(id, std::move(runner));
        return id;
    }

    std::shared_ptr<SessionRunner> find(const std::string& id) const {
        std::lock_guard lock(mu_);
        auto it = runners_.find(id);
        return it == runners_.end() ? nullptr : it->second;
    }

    bool close(const std::string& id) {
        std::shared_ptr<SessionRunner> r;
        {
            std::lock_guard lock(mu_);
            auto it = runners_.find(id);
            if (it == runners_.end()) return false;
            r = std::move(it->second);
            runners_.erase(it);
        }
        r->close_streams();
        return true;
    }

    std::size_t session_count() const {
        std::lock_guard lock(mu_);
        return runners_.size();
    }

    void expire_idle() {
        std::vector<std::shared_ptr<SessionRunner>> dropped;
        const auto now = std::chrono::steady_clock::now();
        std::lock_guard lock(mu_);
        for (auto it = runners_.begin(); it != runners_.end();) {
            if (it->second->subscriber_count() == 0 && now - it->second->last_activity() > options_.idle_timeout) {
                dropped.push_back(std::move(it->second));
                it = runners_.erase(it);
            } else {
                ++it;
            }
        }
    }

  private:
    std::shared_ptr<Engine> engine(const std::string& name) const {
        auto it = engines_.find(name);
        if (it == engines_.end()) throw query_error("unknown dataset '" + name + "'");
        return it->second;
    }

    std::string random_id() {
        static constexpr char hex[] = "0123456789abcdef";
        std::string s(16, '0');
        auto v = rng_();
        for (auto& c : s) {
            c = hex[v & 15];
            v >>= 4;
        }
        return s;
    }

    std::map<std::string, std::shared_ptr<Engine>> engines_;
    SessionManagerOptions options_;
    mutable std::mutex mu_;
    std::map<std::string, std::shared_ptr<SessionRunner>> runners_;
    std::mt19937_64 rng_;
};

}  // namespace progbin
