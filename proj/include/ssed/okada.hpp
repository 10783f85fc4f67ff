#pragma once

// Static surface displacement of a rectangular dislocation in a homogeneous
// elastic half-space (Okada 1985), plus a point-source summation oracle used
// to cross-check it.

#include <array>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssed/csv.hpp"

namespace ssed {

struct Station {
    std::string id;
    double lat = 0.0;  // degrees
    double lon = 0.0;  // degrees
};

struct StationNetwork {
    std::vector<Station> stations;

    std::size_t size() const { return stations.size(); }

    void validate() const
    {
        std::set<std::string> seen;
        for (const auto& s : stations) {
            if (!seen.insert(s.id).second)
                throw std::invalid_argument("station network: duplicate id '" + s.id + "'");
            if (!(std::abs(s.lat) <= 90.0) || !(std::abs(s.lon) <= 180.0))
                throw std::invalid_argument("station network: '" + s.id +
                                            "' has coordinates out of range");
        }
    }

    std::ptrdiff_t index_of(const std::string& id) const
    {
        for (std::size_t i = 0; i < stations.size(); ++i)
            if (stations[i].id == id) return static_cast<std::ptrdiff_t>(i);
        return -1;
    }
};

/// Reads `id,lat,lon` rows (with header).
inline StationNetwork read_stations(const std::string& path)
{
    auto table = read_csv(path);
    if (table.header != std::vector<std::string>{"id", "lat", "lon"})
        throw std::runtime_error(path + ": expected header 'id,lat,lon'");
    StationNetwork net;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        if (row.size() != 3)
            throw std::runtime_error(path + ": row " + std::to_string(r + 2) + " has " +
                                     std::to_string(row.size()) + " fields");
        net.stations.push_back({row[0], parse_double(row[1]), parse_double(row[2])});
    }
    net.validate();
    return net;
}

inline void write_stations(const StationNetwork& net, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "id,lat,lon\n";
    out.precision(10);
    for (const auto& s : net.stations) out << s.id << ',' << s.lat << ',' << s.lon << '\n';
}

// ---------------------------------------------------------------------------
// Local projection
// ---------------------------------------------------------------------------

inline constexpr double kKmPerDegLon = 111.32;  // at the equator, scaled by cos(lat0)
inline constexpr double kKmPerDegLat = 110.57;
inline constexpr double kDegToRad = std::numbers::pi / 180.0;

struct LocalPoint {
    double east_km = 0.0;
    double north_km = 0.0;
};

struct GeoOrigin {
    double lat = 0.0;
    double lon = 0.0;
};

inline LocalPoint to_local(double lat, double lon, GeoOrigin origin)
{
    return {(lon - origin.lon) * kKmPerDegLon * std::cos(origin.lat * kDegToRad),
            (lat - origin.lat) * kKmPerDegLat};
}

inline GeoOrigin from_local(LocalPoint p, GeoOrigin origin)
{
    return {origin.lat + p.north_km / kKmPerDegLat,
            origin.lon + p.east_km / (kKmPerDegLon * std::cos(origin.lat * kDegToRad))};
}

/// Equirectangular flat-earth projection of every station around `origin`.
inline std::vector<LocalPoint> project_local(const StationNetwork& network, GeoOrigin origin)
{
    if (network.size() > 0) {
        double lat_lo = 90, lat_hi = -90, lon_lo = 180, lon_hi = -180;
        for (const auto& s : network.stations) {
            lat_lo = std::min(lat_lo, s.lat);
            lat_hi = std::max(lat_hi, s.lat);
            lon_lo = std::min(lon_lo, s.lon);
            lon_hi = std::max(lon_hi, s.lon);
        }
        constexpr double pad = 5.0;
        if (origin.lat < lat_lo - pad || origin.lat > lat_hi + pad || origin.lon < lon_lo - pad ||
            origin.lon > lon_hi + pad)
            throw std::invalid_argument("project_local: origin lies outside the padded network extent");
    }
    std::vector<LocalPoint> out;
    out.reserve(network.size());
    for (const auto& s : network.stations) {
        auto p = to_local(s.lat, s.lon, origin);
        if (std::hypot(p.east_km, p.north_km) > 2000.0)
            throw std::invalid_argument("project_local: station '" + s.id +
                                        "' is farther than 2000 km from the origin");
        out.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sources
// ---------------------------------------------------------------------------

struct DislocationSource {
    double lat = 0.0;  // centroid surface projection, degrees
    double lon = 0.0;
    double depth_km = 30.0;  // centroid depth, positive down
    double strike_deg = 0.0;
    double dip_deg = 12.0;
    double rake_deg = 90.0;
    double length_km = 10.0;
    double width_km = 10.0;
    double slip_m = 0.0;
    double magnitude = 6.0;  // Mw
    double t0_days = 30.0;   // logistic inflection
    double duration_days = 20.0;

    void validate() const
    {
        if (!(dip_deg > 0.0 && dip_deg <= 90.0))
            throw std::invalid_argument("dislocation: dip must lie in (0, 90]");
        if (!(depth_km > 0.0)) throw std::invalid_argument("dislocation: depth must be positive");
        if (!(length_km > 0.0 && width_km > 0.0))
            throw std::invalid_argument("dislocation: fault dimensions must be positive");
        if (!(slip_m >= 0.0)) throw std::invalid_argument("dislocation: slip must be non-negative");
        if (depth_km - 0.5 * width_km * std::sin(dip_deg * kDegToRad) <= 0.0)
            throw std::invalid_argument("dislocation: fault breaks the free surface");
    }
};

/// Elastic constants and the moment-to-geometry scaling law.
struct ElasticScaling {
    double shear_modulus_pa = 30e9;
    double poisson = 0.25;
    // M0 = 10^(moment_slope * Mw + moment_offset) N m
    double moment_slope = 1.5;
    double moment_offset = 9.1;
    // L = W = 10^((Mw - size_intercept) / size_divisor) km
    double size_intercept = 4.0;
    double size_divisor = 2.0;
};

struct FaultGeometry {
    double length_km = 0.0;
    double width_km = 0.0;
    double slip_m = 0.0;
    double moment_nm = 0.0;
};

inline FaultGeometry magnitude_to_geometry(double mw, const ElasticScaling& law = {})
{
    if (!(mw >= 5.5 && mw <= 7.5))
        throw std::invalid_argument("magnitude_to_geometry: Mw " + std::to_string(mw) +
                                    " outside [5.5, 7.5]");
    FaultGeometry g;
    g.moment_nm = std::pow(10.0, law.moment_slope * mw + law.moment_offset);
    g.length_km = g.width_km = std::pow(10.0, (mw - law.size_intercept) / law.size_divisor);
    g.slip_m = g.moment_nm / (law.shear_modulus_pa * g.length_km * g.width_km * 1e6);
    return g;
}

// ---------------------------------------------------------------------------
// Displacement fields
// ---------------------------------------------------------------------------

/// Horizontal displacement per station, millimetres.
struct StaticField {
    std::vector<std::array<double, 2>> enu;  // {east, north}
    std::size_t perturbed = 0;              // stations nudged off a singular line

    std::size_t size() const { return enu.size(); }
    double east(std::size_t i) const { return enu[i][0]; }
    double north(std::size_t i) const { return enu[i][1]; }
};

namespace okada_detail {

struct Frame {
    double ss, cs, sd, cd;  // sin/cos strike, sin/cos dip
};

inline Frame frame_of(const DislocationSource& src)
{
    double s = src.strike_deg * kDegToRad, d = src.dip_deg * kDegToRad;
    double cd = std::cos(d);
    if (std::abs(cd) < 1e-12) cd = 0.0;
    return {std::sin(s), std::cos(s), std::sin(d), cd};
}

/// Rotates (east, north) into the along-strike / Okada-y frame.
inline void to_fault_axes(const Frame& f, double e, double n, double& x, double& y)
{
    x = f.ss * e + f.cs * n;
    y = f.ss * n - f.cs * e;
}

inline std::array<double, 2> to_geographic(const Frame& f, double ux, double uy)
{
    return {f.ss * ux - f.cs * uy, f.cs * ux + f.ss * uy};
}

struct Corner {
    double ux_ss, uy_ss, ux_ds, uy_ds;
    bool singular;
};

inline Corner corner(double xi, double eta, double q, const Frame& f, double mu_ratio)
{
    const double sd = f.sd, cd = f.cd;
    const double R = std::sqrt(xi * xi + eta * eta + q * q);
    const double ytil = eta * cd + q * sd;
    const double dtil = eta * sd - q * cd;
    const double X = std::sqrt(xi * xi + q * q);
    const double tiny = 1e-12 * (1.0 + R);
    Corner c{};
    c.singular = (R + eta) < tiny || (R + xi) < tiny || (R + dtil) < tiny;
    if (c.singular) return c;

    const double log_re = std::log(R + eta);
    double I1, I2, I3, I5;
    if (cd != 0.0) {
        I5 = (xi == 0.0) ? 0.0
                         : mu_ratio * 2.0 / cd *
                               std::atan((eta * (X + q * cd) + X * (R + X) * sd) /
                                         (xi * (R + X) * cd));
        const double I4 = mu_ratio / cd * (std::log(R + dtil) - sd * log_re);
        I3 = mu_ratio * (ytil / (cd * (R + dtil)) - log_re) + sd / cd * I4;
        I1 = mu_ratio * (-xi / (cd * (R + dtil))) - sd / cd * I5;
    } else {
        const double rd = R + dtil;
        I3 = mu_ratio / 2.0 * (eta / rd + ytil * q / (rd * rd) - log_re);
        I1 = -mu_ratio / 2.0 * xi * q / (rd * rd);
    }
    I2 = mu_ratio * (-log_re) - I3;

    const double theta = (q == 0.0) ? 0.0 : std::atan(xi * eta / (q * R));
    c.ux_ss = xi * q / (R * (R + eta)) + theta + I1 * sd;
    c.uy_ss = ytil * q / (R * (R + eta)) + q * cd / (R + eta) + I2 * sd;
    c.ux_ds = q / R - I3 * sd * cd;
    c.uy_ds = ytil * q / (R * (R + xi)) + cd * theta - I1 * sd * cd;
    return c;
}

}  // namespace okada_detail

/// Closed-form rectangular-dislocation surface displacement at each station,
/// horizontal components in mm. Stations are projected with the fault
/// centroid as origin.
inline StaticField okada_displacement(const DislocationSource& src, const StationNetwork& network,
                                      const ElasticScaling& elastic = {})
{
    src.validate();
    using namespace okada_detail;
    const auto pts = project_local(network, {src.lat, src.lon});
    const Frame f = frame_of(src);
    const double mu_ratio = 1.0 - 2.0 * elastic.poisson;  // mu / (lambda + mu)
    const double L = src.length_km * 1e3, W = src.width_km * 1e3;
    const double d = src.depth_km * 1e3 + 0.5 * W * f.sd;  // bottom edge depth
    const double rake = src.rake_deg * kDegToRad;
    const double U1 = src.slip_m * std::cos(rake), U2 = src.slip_m * std::sin(rake);

    StaticField out;
    out.enu.resize(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        double e = pts[i].east_km * 1e3, n = pts[i].north_km * 1e3;
        for (int attempt = 0;; ++attempt) {
            double x, y;
            to_fault_axes(f, e, n, x, y);
            x += 0.5 * L;
            y += 0.5 * W * f.cd;
            const double p = y * f.cd + d * f.sd;
            const double q = y * f.sd - d * f.cd;
            const Corner c1 = corner(x, p, q, f, mu_ratio);
            const Corner c2 = corner(x, p - W, q, f, mu_ratio);
            const Corner c3 = corner(x - L, p, q, f, mu_ratio);
            const Corner c4 = corner(x - L, p - W, q, f, mu_ratio);
            if ((c1.singular || c2.singular || c3.singular || c4.singular) && attempt == 0) {
                std::clog << "warning: okada: station '" << network.stations[i].id
                          << "' lies on a fault-edge singularity; evaluating 1 m east\n";
                e += 1.0;
                ++out.perturbed;
                continue;
            }
            auto chinnery = [&](double Corner::*m) { return c1.*m - c2.*m - c3.*m + c4.*m; };
            const double k = 1.0 / (2.0 * std::numbers::pi);
            const double ux = -U1 * k * chinnery(&Corner::ux_ss) - U2 * k * chinnery(&Corner::ux_ds);
            const double uy = -U1 * k * chinnery(&Corner::uy_ss) - U2 * k * chinnery(&Corner::uy_ds);
            auto u = to_geographic(f, ux, uy);
            out.enu[i] = {u[0] * 1e3, u[1] * 1e3};
            break;
        }
    }
    return out;
}

struct OracleField {
    StaticField field;
    std::vector<bool> reliable;  // false when closer than one sub-patch diagonal to the fault
};

/// Sums n_sub x n_sub point sources (Okada 1985 point-source surface
/// solution), each carrying the potency of its sub-patch.
inline OracleField okada_point_oracle(const DislocationSource& src, const StationNetwork& network,
                                      int n_sub, const ElasticScaling& elastic = {})
{
    if (n_sub < 2) throw std::invalid_argument("okada_point_oracle: n_sub must be >= 2");
    src.validate();
    using namespace okada_detail;
    const auto pts = project_local(network, {src.lat, src.lon});
    const Frame f = frame_of(src);
    const double mu_ratio = 1.0 - 2.0 * elastic.poisson;
    const double L = src.length_km * 1e3, W = src.width_km * 1e3;
    const double dl = L / n_sub, dw = W / n_sub;
    const double diag = std::hypot(dl, dw);
    const double rake = src.rake_deg * kDegToRad;
    const double potency = src.slip_m * dl * dw;
    const double P1 = potency * std::cos(rake), P2 = potency * std::sin(rake);
    const double k = 1.0 / (2.0 * std::numbers::pi);

    OracleField out;
    out.field.enu.assign(pts.size(), {0.0, 0.0});
    out.reliable.assign(pts.size(), true);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        double xs, ys;
        to_fault_axes(f, pts[i].east_km * 1e3, pts[i].north_km * 1e3, xs, ys);
        double ux = 0, uy = 0;
        for (int a = 0; a < n_sub; ++a) {
            const double along = -0.5 * L + (a + 0.5) * dl;
            for (int b = 0; b < n_sub; ++b) {
                const double updip = -0.5 * W + (b + 0.5) * dw;
                const double x = xs - along;
                const double y = ys - updip * f.cd;
                const double d = src.depth_km * 1e3 - updip * f.sd;
                const double R2 = x * x + y * y + d * d;
                const double R = std::sqrt(R2);
                if (R < diag) out.reliable[i] = false;
                const double R5 = R2 * R2 * R;
                const double p = y * f.cd + d * f.sd;
                const double q = y * f.sd - d * f.cd;
                const double Rd = R + d;
                const double c1 = 1.0 / (R * Rd * Rd);
                const double c2 = (3.0 * R + d) / (R2 * R * Rd * Rd * Rd);
                const double I1 = mu_ratio * y * (c1 - x * x * c2);
                const double I2 = mu_ratio * x * (c1 - y * y * c2);
                const double I3 = mu_ratio * x / (R2 * R) - I2;
                ux += -P1 * k * (3.0 * x * x * q / R5 + I1 * f.sd) -
                      P2 * k * (3.0 * x * p * q / R5 - I3 * f.sd * f.cd);
                uy += -P1 * k * (3.0 * x * y * q / R5 + I2 * f.sd) -
                      P2 * k * (3.0 * y * p * q / R5 - I1 * f.sd * f.cd);
            }
        }
        auto u = to_geographic(f, ux, uy);
        out.field.enu[i] = {u[0] * 1e3, u[1] * 1e3};
    }
    return out;
}

/// ||other - ref|| / ||ref|| over the selected stations (all when `include` is empty).
inline double relative_l2_difference(const StaticField& ref, const StaticField& other,
                                     const std::vector<bool>& include = {})
{
    if (ref.size() != other.size())
        throw std::invalid_argument("relative_l2_difference: field sizes differ");
    double num = 0, den = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        if (!include.empty() && !include[i]) continue;
        for (int c = 0; c < 2; ++c) {
            double d = other.enu[i][c] - ref.enu[i][c];
            num += d * d;
            den += ref.enu[i][c] * ref.enu[i][c];
        }
    }
    if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::sqrt(num / den);
}

}  // namespace ssed
