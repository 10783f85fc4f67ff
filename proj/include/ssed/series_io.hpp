#pragma once

// Per-station daily displacement files (`date,east_mm,north_mm`, empty fields
// for gaps) and their alignment onto a common daily grid.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssed/csv.hpp"
#include "ssed/okada.hpp"
#include "ssed/series.hpp"

namespace ssed {

using Day = std::chrono::sys_days;

/// Parses YYYY-MM-DD.
inline Day parse_date(std::string_view s)
{
    s = trim(s);
    auto bad = [&] { return std::invalid_argument("invalid date '" + std::string(s) + "' (expected YYYY-MM-DD)"); };
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') throw bad();
    int y = 0;
    unsigned m = 0, d = 0;
    auto num = [&](std::size_t pos, std::size_t len, auto& out) {
        auto [p, ec] = std::from_chars(s.data() + pos, s.data() + pos + len, out);
        if (ec != std::errc() || p != s.data() + pos + len) throw bad();
    };
    num(0, 4, y);
    num(5, 2, m);
    num(8, 2, d);
    std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
    if (!ymd.ok()) throw bad();
    return Day{ymd};
}

inline std::string format_date(Day day)
{
    std::chrono::year_month_day ymd{day};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
}

struct StationSeries {
    std::string id;
    Day start{};
    std::vector<double> east;   // NaN marks a gap
    std::vector<double> north;

    std::size_t days() const { return east.size(); }
};

/// Reads one station file. Rows must advance by exactly one day; a missing
/// day is written as a row with empty fields.
inline StationSeries read_station_series(const std::string& path, std::string id)
{
    auto table = read_csv(path);
    if (table.header != std::vector<std::string>{"date", "east_mm", "north_mm"})
        throw std::runtime_error(path + ": expected header 'date,east_mm,north_mm'");
    if (table.rows.empty()) throw std::runtime_error(path + ": no rows");
    StationSeries s;
    s.id = std::move(id);
    Day prev{};
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const std::string where = path + ": row " + std::to_string(r + 2);
        if (row.size() != 3) throw std::runtime_error(where + " has " + std::to_string(row.size()) + " fields");
        Day d;
        try {
            d = parse_date(row[0]);
        } catch (const std::invalid_argument& e) {
            throw std::runtime_error(where + ": " + e.what());
        }
        if (r == 0) {
            s.start = d;
        } else if (d - prev != std::chrono::days{1}) {
            throw std::runtime_error(where + ": non-daily cadence (" + format_date(prev) + " -> " +
                                     format_date(d) + ")");
        }
        prev = d;
        try {
            s.east.push_back(parse_optional(row[1]));
            s.north.push_back(parse_optional(row[2]));
        } catch (const std::invalid_argument& e) {
            throw std::runtime_error(where + ": " + e.what());
        }
    }
    return s;
}

inline void write_station_series(const StationSeries& s, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "date,east_mm,north_mm\n";
    for (std::size_t t = 0; t < s.days(); ++t) {
        out << format_date(s.start + std::chrono::days{static_cast<long>(t)}) << ',';
        if (std::isfinite(s.east[t])) out << format_value(s.east[t]);
        out << ',';
        if (std::isfinite(s.north[t])) out << format_value(s.north[t]);
        out << '\n';
    }
}

/// Stations on a shared daily grid; gaps are NaN in `data` and flagged in `gaps`.
struct ContinuousSeries {
    StationNetwork network;
    Day start{};
    SeriesBlock data;  // [stations, days, 2]
    GapMask gaps;

    std::size_t days() const { return data.days; }
    Day date(std::size_t t) const { return start + std::chrono::days{static_cast<long>(t)}; }
};

/// Union grid over all stations, ordered as in `network`.
inline ContinuousSeries align_series(const std::vector<StationSeries>& series, const StationNetwork& network)
{
    if (series.size() != network.size())
        throw std::invalid_argument("align_series: " + std::to_string(series.size()) + " series for " +
                                    std::to_string(network.size()) + " stations");
    std::map<std::string, const StationSeries*> by_id;
    for (const auto& s : series) {
        if (network.index_of(s.id) < 0) throw std::invalid_argument("align_series: unknown station '" + s.id + "'");
        if (!by_id.emplace(s.id, &s).second)
            throw std::invalid_argument("align_series: duplicate series for '" + s.id + "'");
    }
    Day lo = Day::max(), hi = Day::min();
    for (const auto& s : series) {
        lo = std::min(lo, s.start);
        hi = std::max(hi, s.start + std::chrono::days{static_cast<long>(s.days()) - 1});
    }
    const auto span = static_cast<std::size_t>((hi - lo).count() + 1);
    ContinuousSeries out;
    out.network = network;
    out.start = lo;
    out.data = SeriesBlock(network.size(), span, kComponents, kGapSentinel);
    out.gaps = GapMask(network.size(), span);
    for (std::size_t i = 0; i < network.size(); ++i) {
        const auto it = by_id.find(network.stations[i].id);
        if (it == by_id.end())
            throw std::invalid_argument("align_series: no series for station '" + network.stations[i].id + "'");
        const auto& s = *it->second;
        const auto offset = static_cast<std::size_t>((s.start - lo).count());
        for (std::size_t t = 0; t < s.days(); ++t) {
            out.data(i, offset + t, 0) = s.east[t];
            out.data(i, offset + t, 1) = s.north[t];
        }
        for (std::size_t t = 0; t < span; ++t)
            out.gaps.set(i, t, !std::isfinite(out.data(i, t, 0)) || !std::isfinite(out.data(i, t, 1)));
        for (std::size_t t = 0; t < span; ++t)
            if (out.gaps(i, t)) out.data(i, t, 0) = out.data(i, t, 1) = kGapSentinel;
    }
    return out;
}

/// Loads `<dir>/<station id>.csv` for every station. Files whose stem is not
/// a known station are an error.
inline ContinuousSeries load_series_dir(const std::string& dir, const StationNetwork& network)
{
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
    std::vector<StationSeries> series;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
        const auto id = p.stem().string();
        if (network.index_of(id) < 0) throw std::runtime_error(p.string() + ": unknown station '" + id + "'");
        series.push_back(read_station_series(p.string(), id));
    }
    try {
        return align_series(series, network);
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error(dir + ": " + e.what());
    }
}

}  // namespace ssed
