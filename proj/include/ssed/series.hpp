#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

namespace ssed {

inline constexpr std::size_t kComponents = 2;  // east, north
inline constexpr std::size_t kWindowDays = 60;

/// Station x day x component block of displacements (mm), row-major.
struct SeriesBlock {
    std::size_t stations = 0;
    std::size_t days = 0;
    std::size_t comps = kComponents;
    std::vector<double> values;

    SeriesBlock() = default;
    SeriesBlock(std::size_t n_stations, std::size_t n_days, std::size_t n_comps = kComponents,
                double fill = 0.0)
        : stations(n_stations), days(n_days), comps(n_comps),
          values(n_stations * n_days * n_comps, fill)
    {
    }

    std::size_t size() const { return values.size(); }
    std::size_t index(std::size_t s, std::size_t t, std::size_t c) const
    {
        return (s * days + t) * comps + c;
    }
    double& operator()(std::size_t s, std::size_t t, std::size_t c) { return values[index(s, t, c)]; }
    double operator()(std::size_t s, std::size_t t, std::size_t c) const
    {
        return values[index(s, t, c)];
    }
    bool same_shape(const SeriesBlock& o) const
    {
        return stations == o.stations && days == o.days && comps == o.comps;
    }
};

/// Station x day gap flags; true marks a missing observation.
struct GapMask {
    std::size_t stations = 0;
    std::size_t days = 0;
    std::vector<std::uint8_t> flags;

    GapMask() = default;
    GapMask(std::size_t n_stations, std::size_t n_days)
        : stations(n_stations), days(n_days), flags(n_stations * n_days, 0)
    {
    }

    bool operator()(std::size_t s, std::size_t t) const { return flags[s * days + t] != 0; }
    void set(std::size_t s, std::size_t t, bool gap) { flags[s * days + t] = gap ? 1 : 0; }

    double fraction() const
    {
        if (flags.empty()) return 0.0;
        std::size_t n = 0;
        for (auto f : flags) n += f;
        return static_cast<double>(n) / static_cast<double>(flags.size());
    }
};

inline constexpr double kGapSentinel = std::numeric_limits<double>::quiet_NaN();

/// Least-squares line through the finite points of y over t = 0..n-1,
/// returned as {intercept, slope}. Fewer than two points give {mean or 0, 0}.
struct LineFit {
    double intercept = 0.0;
    double slope = 0.0;
    std::size_t points = 0;
};

template <class Getter>
LineFit fit_line(std::size_t n, Getter y)
{
    double st = 0, sy = 0, stt = 0, sty = 0;
    std::size_t m = 0;
    for (std::size_t t = 0; t < n; ++t) {
        double v = y(t);
        if (!std::isfinite(v)) continue;
        double tt = static_cast<double>(t);
        st += tt;
        sy += v;
        stt += tt * tt;
        sty += tt * v;
        ++m;
    }
    LineFit f;
    f.points = m;
    if (m == 0) return f;
    double mm = static_cast<double>(m);
    double den = mm * stt - st * st;
    if (m < 2 || den == 0.0) {
        f.intercept = sy / mm;
        return f;
    }
    f.slope = (mm * sty - st * sy) / den;
    f.intercept = (sy - f.slope * st) / mm;
    return f;
}

}  // namespace ssed
