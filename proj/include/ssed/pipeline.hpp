#pragma once
// Continuous-series path: ingest and detrend station files, denoise every
// 60-day window, turn the windows into daily displacement rates and write
// plot-ready CSV files.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssed/csv.hpp"
#include "ssed/model.hpp"
#include "ssed/series_io.hpp"

namespace ssed {

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// Removes the least-squares line through the observed days of every station
/// and component over the full span. Gaps stay gaps.
inline void detrend_series(ContinuousSeries& s)
{
    auto& d = s.data;
    for (std::size_t j = 0; j < d.stations; ++j)
        for (std::size_t c = 0; c < d.comps; ++c) {
            auto f = fit_line(d.days, [&](std::size_t t) { return s.gaps(j, t) ? kGapSentinel : d(j, t, c); });
            if (f.points == 0) continue;
            for (std::size_t t = 0; t < d.days; ++t)
                if (!s.gaps(j, t)) d(j, t, c) -= f.intercept + f.slope * static_cast<double>(t);
        }
}

/// Station file plus one `<id>.csv` per station, aligned and detrended.
inline ContinuousSeries ingest(const std::string& series_dir, const std::string& station_file)
{
    auto s = load_series_dir(series_dir, read_stations(station_file));
    detrend_series(s);
    return s;
}

// ---------------------------------------------------------------------------
// Sliding-window denoising
// ---------------------------------------------------------------------------

/// Maps a batch of observed windows (NaN gaps) and their masks to denoised
/// windows of the same shape, in mm.
using BatchDenoiser =
    std::function<std::vector<SeriesBlock>(const std::vector<SeriesBlock>&, const std::vector<GapMask>&)>;

/// Eval-mode model inference on whole batches.
inline BatchDenoiser checkpoint_denoiser(const Checkpoint& ck)
{
    return [&ck](const std::vector<SeriesBlock>& obs, const std::vector<GapMask>& masks) {
        std::vector<const SeriesBlock*> po;
        std::vector<const GapMask*> pm;
        for (std::size_t b = 0; b < obs.size(); ++b) {
            po.push_back(&obs[b]);
            pm.push_back(&masks[b]);
        }
        NoGradGuard guard;
        Tensor y = forward(ck.params, ck.config, prepare_batch(po, pm, ck.input_scale));
        std::vector<SeriesBlock> out;
        const std::size_t per = obs.front().size();
        for (std::size_t b = 0; b < obs.size(); ++b) {
            SeriesBlock blk(obs[b].stations, obs[b].days, obs[b].comps);
            for (std::size_t i = 0; i < per; ++i) blk.values[i] = y[b * per + i] * ck.input_scale;
            out.push_back(std::move(blk));
        }
        return out;
    };
}

/// Returns the observed window unchanged (gaps become 0). Used to check the
/// rate plumbing independently of any model.
inline BatchDenoiser identity_denoiser()
{
    return [](const std::vector<SeriesBlock>& obs, const std::vector<GapMask>&) {
        std::vector<SeriesBlock> out = obs;
        for (auto& b : out)
            for (auto& v : b.values)
                if (std::isnan(v)) v = 0.0;
        return out;
    };
}

inline std::size_t window_count(std::size_t span, std::size_t window, std::size_t stride)
{
    if (stride == 0) throw std::invalid_argument("sliding window: stride must be >= 1");
    if (span < window)
        throw std::invalid_argument("sliding window: span of " + std::to_string(span) + " days is shorter than the " +
                                    std::to_string(window) + "-day window");
    return (span - window) / stride + 1;
}

/// Calls `sink(start_day, denoised)` for every window start 0, stride, ...
/// in increasing order, denoising `batch` windows at a time.
inline void for_each_denoised_window(const ContinuousSeries& s, const BatchDenoiser& denoiser, std::size_t stride,
                                     const std::function<void(std::size_t, const SeriesBlock&)>& sink,
                                     std::size_t window = kWindowDays, std::size_t batch = 64)
{
    const std::size_t n = window_count(s.days(), window, stride);
    const std::size_t N = s.data.stations, C = s.data.comps;
    for (std::size_t first = 0; first < n; first += batch) {
        const std::size_t m = std::min(batch, n - first);
        std::vector<SeriesBlock> obs;
        std::vector<GapMask> masks;
        for (std::size_t k = 0; k < m; ++k) {
            const std::size_t t0 = (first + k) * stride;
            SeriesBlock w(N, window, C);
            GapMask g(N, window);
            for (std::size_t j = 0; j < N; ++j)
                for (std::size_t t = 0; t < window; ++t) {
                    g.set(j, t, s.gaps(j, t0 + t));
                    for (std::size_t c = 0; c < C; ++c) w(j, t, c) = s.data(j, t0 + t, c);
                }
            obs.push_back(std::move(w));
            masks.push_back(std::move(g));
        }
        auto out = denoiser(obs, masks);
        if (out.size() != m) throw std::runtime_error("sliding window: denoiser returned the wrong batch size");
        for (std::size_t k = 0; k < m; ++k) {
            if (!out[k].same_shape(obs[k])) throw std::runtime_error("sliding window: denoiser changed window shape");
            sink((first + k) * stride, out[k]);
        }
    }
}

struct DenoisedWindows {
    std::size_t stride = 1;
    std::size_t span = 0;
    std::vector<std::size_t> starts;
    std::vector<SeriesBlock> windows;
};

inline DenoisedWindows sliding_denoise(const ContinuousSeries& s, const BatchDenoiser& denoiser,
                                       std::size_t stride = 1)
{
    DenoisedWindows out;
    out.stride = stride;
    out.span = s.days();
    for_each_denoised_window(s, denoiser, stride, [&](std::size_t t0, const SeriesBlock& w) {
        out.starts.push_back(t0);
        out.windows.push_back(w);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Rates
// ---------------------------------------------------------------------------

/// Window days whose rates are kept; the 20 middle days of a 60-day window.
inline constexpr std::size_t kKeepFirst = 20;
inline constexpr std::size_t kKeepLast = 39;

/// Daily displacement rates (mm/day). Days no window covers hold NaN and
/// provenance 0.
struct RateField {
    std::vector<std::string> stations;
    Day start{};
    std::size_t days = 0;
    std::vector<double> east, north;       // [station * days + t]
    std::vector<std::size_t> provenance;   // windows averaged per day

    double& at(std::vector<double>& v, std::size_t s, std::size_t t) { return v[s * days + t]; }
    double at(const std::vector<double>& v, std::size_t s, std::size_t t) const { return v[s * days + t]; }
    Day date(std::size_t t) const { return start + std::chrono::days{static_cast<long>(t)}; }
};

/// Accumulates backward-difference rates over the kept days of each window.
class RateAccumulator {
public:
    RateAccumulator(std::size_t stations, std::size_t span)
        : stations_(stations), span_(span), sum_(2 * stations * span, 0.0), count_(span, 0)
    {
    }

    void add(std::size_t start, const SeriesBlock& w)
    {
        if (w.stations != stations_ || w.comps != kComponents || w.days <= kKeepLast)
            throw std::invalid_argument("RateAccumulator: window shape does not match");
        if (start + w.days > span_) throw std::invalid_argument("RateAccumulator: window extends past the span");
        for (std::size_t t = kKeepFirst; t <= kKeepLast; ++t) {
            const std::size_t day = start + t;
            ++count_[day];
            for (std::size_t s = 0; s < stations_; ++s)
                for (std::size_t c = 0; c < kComponents; ++c)
                    sum_[(c * stations_ + s) * span_ + day] += w(s, t, c) - w(s, t - 1, c);
        }
    }

    RateField finish(std::vector<std::string> ids, Day start) const
    {
        if (ids.size() != stations_) throw std::invalid_argument("RateAccumulator: station id count differs");
        RateField f;
        f.stations = std::move(ids);
        f.start = start;
        f.days = span_;
        f.provenance = count_;
        const double nan = std::numeric_limits<double>::quiet_NaN();
        f.east.assign(stations_ * span_, nan);
        f.north.assign(stations_ * span_, nan);
        for (std::size_t s = 0; s < stations_; ++s)
            for (std::size_t t = 0; t < span_; ++t)
                if (count_[t] > 0) {
                    const double n = static_cast<double>(count_[t]);
                    f.east[s * span_ + t] = sum_[s * span_ + t] / n;
                    f.north[s * span_ + t] = sum_[(stations_ + s) * span_ + t] / n;
                }
        return f;
    }

private:
    std::size_t stations_, span_;
    std::vector<double> sum_;  // [component][station][day]
    std::vector<std::size_t> count_;
};

inline std::vector<std::string> station_ids(const StationNetwork& net)
{
    std::vector<std::string> ids;
    for (const auto& s : net.stations) ids.push_back(s.id);
    return ids;
}

/// Per calendar day, the mean over covering windows of the kept rates.
inline RateField aggregate_rates(const DenoisedWindows& w, std::vector<std::string> ids, Day start = {})
{
    if (w.windows.empty()) throw std::invalid_argument("aggregate_rates: no windows");
    RateAccumulator acc(w.windows.front().stations, w.span);
    for (std::size_t k = 0; k < w.windows.size(); ++k) acc.add(w.starts[k], w.windows[k]);
    return acc.finish(std::move(ids), start);
}

/// Streams windows straight into the accumulator without keeping them.
inline RateField denoise_rates(const ContinuousSeries& s, const BatchDenoiser& denoiser, std::size_t stride = 1)
{
    RateAccumulator acc(s.data.stations, s.days());
    for_each_denoised_window(s, denoiser, stride, [&](std::size_t t0, const SeriesBlock& w) { acc.add(t0, w); });
    return acc.finish(station_ids(s.network), s.start);
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

/// Station x day matrix: header `station,<date>...`, one row per station.
/// Cells are blank where the day is uncovered or |rate| < threshold.
inline void write_rate_matrix(const RateField& f, const std::vector<double>& v, const std::string& path,
                              double threshold = 0.0)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "station";
    for (std::size_t t = 0; t < f.days; ++t) out << ',' << format_date(f.date(t));
    out << '\n';
    for (std::size_t s = 0; s < f.stations.size(); ++s) {
        out << f.stations[s];
        for (std::size_t t = 0; t < f.days; ++t) {
            out << ',';
            const double r = f.at(v, s, t);
            if (std::isfinite(r) && std::abs(r) >= threshold) out << format_value(r);
        }
        out << '\n';
    }
}

/// Reads a matrix written by write_rate_matrix; blank cells become NaN.
inline std::vector<double> read_rate_matrix(const std::string& path, std::vector<std::string>* stations = nullptr,
                                            std::vector<Day>* dates = nullptr)
{
    auto table = read_csv(path);
    if (table.header.empty() || table.header.front() != "station")
        throw std::runtime_error(path + ": expected a 'station' column first");
    if (dates) {
        dates->clear();
        for (std::size_t k = 1; k < table.header.size(); ++k) dates->push_back(parse_date(table.header[k]));
    }
    if (stations) stations->clear();
    std::vector<double> v;
    for (const auto& row : table.rows) {
        if (row.size() != table.header.size()) throw std::runtime_error(path + ": ragged row");
        if (stations) stations->push_back(row.front());
        for (std::size_t k = 1; k < row.size(); ++k) v.push_back(parse_optional(row[k]));
    }
    return v;
}

inline void write_provenance(const RateField& f, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "date,windows\n";
    for (std::size_t t = 0; t < f.days; ++t) out << format_date(f.date(t)) << ',' << f.provenance[t] << '\n';
}

/// `station_i,station_j,weight` for edges above the report threshold.
inline void write_edges(const AdjacencyReport& r, const std::vector<std::string>& ids, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "station_i,station_j,weight\n";
    for (const auto& e : r.strong_edges) out << ids.at(e.i) << ',' << ids.at(e.j) << ',' << format_value(e.strength) << '\n';
}

inline void write_diagonal(const AdjacencyReport& r, const std::vector<std::string>& ids, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "station,self_weight\n";
    for (std::size_t i = 0; i < r.diagonal.size(); ++i) out << ids.at(i) << ',' << format_value(r.diagonal[i]) << '\n';
}

struct OutputPaths {
    std::filesystem::path rates_east, rates_north, display_east, display_north, provenance, edges, diagonal;
};

inline OutputPaths output_paths(const std::filesystem::path& dir)
{
    return {dir / "rates_east.csv",   dir / "rates_north.csv", dir / "display_east.csv", dir / "display_north.csv",
            dir / "provenance.csv",   dir / "edges.csv",       dir / "diagonal.csv"};
}

/// Writes raw and thresholded rate matrices, per-day provenance, and the
/// adjacency edge list and diagonal when a report is given.
inline OutputPaths emit_outputs(const RateField& f, const AdjacencyReport* adjacency, double display_threshold,
                                const std::string& directory)
{
    if (display_threshold < 0.0) throw std::invalid_argument("emit_outputs: display threshold must be >= 0");
    std::filesystem::create_directories(directory);
    auto p = output_paths(directory);
    write_rate_matrix(f, f.east, p.rates_east.string());
    write_rate_matrix(f, f.north, p.rates_north.string());
    write_rate_matrix(f, f.east, p.display_east.string(), display_threshold);
    write_rate_matrix(f, f.north, p.display_north.string(), display_threshold);
    write_provenance(f, p.provenance.string());
    if (adjacency) {
        write_edges(*adjacency, f.stations, p.edges.string());
        write_diagonal(*adjacency, f.stations, p.diagonal.string());
    }
    return p;
}

}  // namespace ssed
